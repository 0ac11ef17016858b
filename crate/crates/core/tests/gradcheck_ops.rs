//! Finite-difference verification of every differentiable operator.
//!
//! Each operator is checked in f64 at eps 1e-5 on at least two seeded random
//! shapes; the analytic gradient must match central differences within
//! relative error 1e-4 (most are far tighter).

use std::sync::Arc;

use muvit_core::gradcheck::check_gradient;
use muvit_core::graph::{BnStat, Graph, NodeId};
use muvit_core::rng::substream;
use muvit_core::tensor::Tensor;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn randn(shape: &[usize], tag: &str) -> Tensor<f64> {
    let mut rng = substream(0xBEEF, tag);
    Tensor::randn(shape, &mut rng)
}

fn check(tag: &str, inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[NodeId]) -> NodeId) {
    let err = check_gradient(&f, inputs, EPS).unwrap();
    assert!(err < TOL, "{tag}: max rel err {err}");
}

/// Random positive-weight readout so gradients reach every element.
fn readout(g: &mut Graph<f64>, x: NodeId, tag: &str) -> NodeId {
    let shape = g.value(x).shape().to_vec();
    let mut rng = substream(0xD00D, tag);
    let w = g.constant(Tensor::randn(&shape, &mut rng));
    let p = g.mul(x, w);
    g.sum_all(p)
}

#[test]
fn add_sub_mul_div() {
    for shape in [vec![5], vec![3, 4]] {
        let a = randn(&shape, "a");
        let b = randn(&shape, "b").map(|v| v + 3.0); // keep divisor away from 0
        check("add", &[a.clone(), b.clone()], |g, ids| {
            let y = g.add(ids[0], ids[1]);
            readout(g, y, "add")
        });
        check("sub", &[a.clone(), b.clone()], |g, ids| {
            let y = g.sub(ids[0], ids[1]);
            readout(g, y, "sub")
        });
        check("mul", &[a.clone(), b.clone()], |g, ids| {
            let y = g.mul(ids[0], ids[1]);
            readout(g, y, "mul")
        });
        check("div", &[a, b], |g, ids| {
            let y = g.div(ids[0], ids[1]);
            readout(g, y, "div")
        });
    }
}

#[test]
fn add_row_scale_exp() {
    for (n, d) in [(3usize, 4usize), (6, 2)] {
        let a = randn(&[n, d], "ar-a");
        let r = randn(&[d], "ar-r");
        check("add_row", &[a.clone(), r], |g, ids| {
            let y = g.add_row(ids[0], ids[1]);
            readout(g, y, "ar")
        });
        check("scale", &[a.clone()], |g, ids| {
            let y = g.scale(ids[0], -1.7);
            readout(g, y, "sc")
        });
        check("exp", &[a], |g, ids| {
            let y = g.exp(ids[0]);
            readout(g, y, "ex")
        });
    }
}

#[test]
fn matmul_all_transpose_combinations() {
    let (m, k, n) = (4, 3, 5);
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let ashape = if ta { vec![k, m] } else { vec![m, k] };
        let bshape = if tb { vec![n, k] } else { vec![k, n] };
        let a = randn(&ashape, "mm-a");
        let b = randn(&bshape, "mm-b");
        check(&format!("matmul ta={ta} tb={tb}"), &[a, b], move |g, ids| {
            let y = g.matmul(ids[0], ids[1], ta, tb);
            readout(g, y, "mm")
        });
    }
    // large-ish sanity shape from the worked example
    let a = randn(&[4, 3], "mm2-a");
    let b = randn(&[3, 2], "mm2-b");
    let err = check_gradient(
        &|g, ids| {
            let c = g.matmul(ids[0], ids[1], false, false);
            g.sum_all(c)
        },
        &[a, b],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-7, "plain matmul err {err}");
}

#[test]
fn bmm_both_transposes() {
    for (ta, tb) in [(false, false), (true, true)] {
        let ashape = if ta { vec![2, 3, 4] } else { vec![2, 4, 3] };
        let bshape = if tb { vec![2, 5, 3] } else { vec![2, 3, 5] };
        let a = randn(&ashape, "bmm-a");
        let b = randn(&bshape, "bmm-b");
        check(&format!("bmm ta={ta} tb={tb}"), &[a, b], move |g, ids| {
            let y = g.bmm(ids[0], ids[1], ta, tb);
            readout(g, y, "bmm")
        });
    }
}

#[test]
fn reshape_permute_concat_narrow() {
    let a = randn(&[2, 3, 4], "rp-a");
    check("reshape", &[a.clone()], |g, ids| {
        let y = g.reshape(ids[0], vec![6, 4]);
        readout(g, y, "rs")
    });
    for perm in [[1, 0, 2], [2, 1, 0], [0, 2, 1]] {
        check(&format!("permute {perm:?}"), &[a.clone()], move |g, ids| {
            let y = g.permute3(ids[0], perm);
            readout(g, y, "pm")
        });
    }
    let b = randn(&[2, 2, 4], "rp-b");
    for axis in [0usize, 1, 2] {
        let b2 = randn(&[2, 2, 4], "rp-b2");
        check(&format!("concat axis {axis}"), &[b.clone(), b2], move |g, ids| {
            let y = g.concat(axis, &[ids[0], ids[1]]);
            readout(g, y, "cc")
        });
        check(&format!("narrow axis {axis}"), &[a.clone()], move |g, ids| {
            let y = g.narrow(ids[0], axis, 1, 1);
            readout(g, y, "nr")
        });
    }
}

#[test]
fn gather_scatter_repeat() {
    let a = randn(&[5, 3], "gs-a");
    let idx = Arc::new(vec![4usize, 0, 2, 0]);
    check("gather_rows", &[a.clone()], {
        let idx = idx.clone();
        move |g, ids| {
            let y = g.gather_rows(ids[0], idx.clone());
            readout(g, y, "ga")
        }
    });
    let b = randn(&[3, 2], "gs-b");
    let sidx = Arc::new(vec![1usize, 4, 2]);
    check("scatter_rows", &[b], move |g, ids| {
        let y = g.scatter_rows(ids[0], 6, sidx.clone());
        readout(g, y, "sr")
    });
    let r = randn(&[4], "gs-r");
    check("repeat_row", &[r], |g, ids| {
        let y = g.repeat_row(ids[0], 5);
        readout(g, y, "rr")
    });
}

#[test]
fn softmax_and_losses() {
    for shape in [vec![3, 5], vec![2, 2, 4]] {
        let a = randn(&shape, "sm-a");
        check("softmax", &[a], |g, ids| {
            let y = g.softmax_last(ids[0]);
            readout(g, y, "sm")
        });
    }
    let p = randn(&[4, 3], "mse-p");
    let t = randn(&[4, 3], "mse-t");
    check("mse", &[p, t], |g, ids| g.mse(ids[0], ids[1]));
    for n in [3usize, 7] {
        let logits = randn(&[n, 4], "ce-l");
        let labels: Arc<Vec<u32>> = Arc::new((0..n as u32).map(|i| i % 4).collect());
        check("cross_entropy", &[logits.clone()], {
            let labels = labels.clone();
            move |g, ids| g.cross_entropy(ids[0], labels.clone(), None).unwrap()
        });
        let weights = Arc::new(vec![1.0, 2.0, 0.5, 1.5]);
        check("weighted cross_entropy", &[logits], move |g, ids| {
            g.cross_entropy(ids[0], labels.clone(), Some(weights.clone())).unwrap()
        });
    }
}

#[test]
fn layernorm_two_shapes() {
    for (n, d) in [(2usize, 8usize), (5, 3)] {
        let x = randn(&[n, d], "ln-x");
        let gamma = randn(&[d], "ln-g");
        let beta = randn(&[d], "ln-b");
        let err = check_gradient(
            &|g, ids| {
                let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-6);
                readout(g, y, "ln")
            },
            &[x, gamma, beta],
            EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "layernorm err {err}");
    }
}

#[test]
fn batchnorm_train_and_eval() {
    for (c, h, w) in [(2usize, 3usize, 4usize), (3, 2, 2)] {
        let x = randn(&[c, h, w], "bn-x");
        let gamma = randn(&[c], "bn-g");
        let beta = randn(&[c], "bn-b");
        for training in [true, false] {
            let stat = BnStat::new("bn", c);
            stat.set(
                randn(&[c], "bn-rm").map(|v| v * 0.1),
                randn(&[c], "bn-rv").map(|v| v.abs() + 0.5),
            );
            check(
                &format!("batchnorm training={training}"),
                &[x.clone(), gamma.clone(), beta.clone()],
                move |g, ids| {
                    let y = g.batch_norm(ids[0], ids[1], ids[2], &stat, training, 0.1, 1e-5);
                    readout(g, y, "bn")
                },
            );
        }
    }
}

#[test]
fn activations() {
    for shape in [vec![7], vec![2, 5]] {
        let a = randn(&shape, "act-a");
        check("gelu", &[a.clone()], |g, ids| {
            let y = g.gelu(ids[0]);
            readout(g, y, "ge")
        });
        // keep ReLU inputs away from the kink
        let b = randn(&shape, "act-b").map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
        check("relu", &[b], |g, ids| {
            let y = g.relu(ids[0]);
            readout(g, y, "re")
        });
    }
}

#[test]
fn conv2d_3x3_and_1x1() {
    for (cin, cout, h, w, k) in [(2usize, 3usize, 5usize, 4usize, 3usize), (3, 2, 3, 3, 1), (1, 4, 6, 5, 3)] {
        let x = randn(&[cin, h, w], "cv-x");
        let wt = randn(&[cout, cin, k, k], "cv-w");
        let b = randn(&[cout], "cv-b");
        check(&format!("conv2d k={k} cin={cin}"), &[x, wt, b], |g, ids| {
            let y = g.conv2d(ids[0], ids[1], ids[2]);
            readout(g, y, "cv")
        });
    }
}

#[test]
fn conv2d_preserves_extent_and_matches_direct_sum() {
    // cross-check the gemm-structured kernel against a naive triple loop
    let mut rng = substream(0xC0FFEE, "cv-ref");
    let (cin, cout, h, w, k) = (3usize, 2usize, 6usize, 5usize, 3usize);
    let x: Tensor<f64> = Tensor::randn(&[cin, h, w], &mut rng);
    let wt: Tensor<f64> = Tensor::randn(&[cout, cin, k, k], &mut rng);
    let b: Tensor<f64> = Tensor::randn(&[cout], &mut rng);
    let mut g = Graph::inference();
    let (xi, wi, bi) = (g.constant(x.clone()), g.constant(wt.clone()), g.constant(b.clone()));
    let y = g.conv2d(xi, wi, bi);
    assert_eq!(g.value(y).shape(), &[cout, h, w]);
    let pad = (k / 2) as i64;
    for co in 0..cout {
        for yy in 0..h {
            for xx in 0..w {
                let mut acc = b.data()[co];
                for ci in 0..cin {
                    for dy in 0..k {
                        for dx in 0..k {
                            let sy = yy as i64 + dy as i64 - pad;
                            let sx = xx as i64 + dx as i64 - pad;
                            if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                                acc += wt.data()[((co * cin + ci) * k + dy) * k + dx]
                                    * x.data()[(ci * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                }
                let got = g.value(y).data()[(co * h + yy) * w + xx];
                assert!((got - acc).abs() < 1e-10, "conv mismatch at {co},{yy},{xx}");
            }
        }
    }
}

#[test]
fn upsample_bilinear_two_shapes() {
    for (c, h, w) in [(2usize, 3usize, 4usize), (1, 5, 2)] {
        let x = randn(&[c, h, w], "up-x");
        check("upsample2x", &[x], |g, ids| {
            let y = g.upsample2x(ids[0]);
            readout(g, y, "up")
        });
    }
}

#[test]
fn rope_rotation() {
    for (heads, n, dh, ky, kx) in [(2usize, 3usize, 8usize, 2usize, 2usize), (1, 4, 12, 3, 2)] {
        let x = randn(&[heads, n, dh], "rp-x");
        let ay = randn(&[n, ky], "rp-ay");
        let ax = randn(&[n, kx], "rp-ax");
        check("rope", &[x, ay, ax], |g, ids| {
            let y = g.rope(ids[0], ids[1], ids[2]);
            readout(g, y, "rp")
        });
    }
}

#[test]
fn reductions() {
    for shape in [vec![6], vec![3, 4]] {
        let a = randn(&shape, "rd-a");
        check("sum_all", &[a.clone()], |g, ids| g.sum_all(ids[0]));
        check("mean_all", &[a], |g, ids| g.mean_all(ids[0]));
    }
    let b = randn(&[4, 3], "rd-b");
    check("sum_axis0", &[b], |g, ids| {
        let y = g.sum_axis0(ids[0]);
        readout(g, y, "sa")
    });
}
