//! Rough single-thread throughput probe for the kernels that dominate
//! training time. Prints GFLOP/s per shape; useful when sizing runs for a
//! new machine.

use std::time::Instant;

use muvit_core::graph::Graph;
use muvit_core::rng::substream;
use muvit_core::tensor::Tensor;

fn time_gflops(mut f: impl FnMut(), flops_per_call: f64, reps: usize) -> f64 {
    f(); // warmup
    let t0 = Instant::now();
    for _ in 0..reps {
        f();
    }
    let dt = t0.elapsed().as_secs_f64();
    flops_per_call * reps as f64 / dt / 1e9
}

fn main() {
    let mut rng = substream(42, "calibrate");

    for (m, k, n) in [(512, 128, 128), (512, 128, 512), (512, 32, 512), (256, 576, 32), (16384, 32, 32)] {
        let a: Tensor<f32> = Tensor::randn(&[m, k], &mut rng);
        let b: Tensor<f32> = Tensor::randn(&[k, n], &mut rng);
        let gf = time_gflops(
            || {
                let mut g = Graph::inference();
                let (ai, bi) = (g.constant(a.clone()), g.constant(b.clone()));
                let _ = g.matmul(ai, bi, false, false);
            },
            2.0 * m as f64 * k as f64 * n as f64,
            20,
        );
        println!("gemm {m}x{k}x{n}: {gf:.1} GFLOP/s");
    }

    for (c, h, w, k) in [(32, 128, 128, 3), (64, 64, 64, 3)] {
        let x: Tensor<f32> = Tensor::randn(&[c, h, w], &mut rng);
        let wt: Tensor<f32> = Tensor::randn(&[c, c, k, k], &mut rng);
        let bs: Tensor<f32> = Tensor::randn(&[c], &mut rng);
        let gf = time_gflops(
            || {
                let mut g = Graph::inference();
                let (xi, wi, bi) =
                    (g.constant(x.clone()), g.constant(wt.clone()), g.constant(bs.clone()));
                let _ = g.conv2d(xi, wi, bi);
            },
            2.0 * (c * c * h * w * k * k) as f64,
            5,
        );
        println!("conv2d {c}ch {h}x{w} k{k}: {gf:.1} GFLOP/s");
    }

    // softmax + gelu elementwise throughput
    let x: Tensor<f32> = Tensor::randn(&[4, 512, 512], &mut rng);
    let t0 = Instant::now();
    let reps = 20;
    for _ in 0..reps {
        let mut g = Graph::inference();
        let xi = g.constant(x.clone());
        let _ = g.softmax_last(xi);
    }
    println!(
        "softmax [4,512,512]: {:.2} ms/call",
        t0.elapsed().as_secs_f64() * 1e3 / reps as f64
    );
    let y: Tensor<f32> = Tensor::randn(&[512, 512], &mut rng);
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::inference();
        let yi = g.constant(y.clone());
        let _ = g.gelu(yi);
    }
    println!(
        "gelu [512,512]: {:.2} ms/call",
        t0.elapsed().as_secs_f64() * 1e3 / reps as f64
    );
}
