//! Finite-difference gradient oracle.
//!
//! Checks run in f64: the analytic gradient of a scalar-valued graph is
//! compared element-by-element against central differences. The oracle never
//! touches the backward implementations it verifies — it only re-evaluates
//! the forward pass at perturbed inputs.

use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Max over all input elements of
/// `|analytic - central_difference| / max(1, |central_difference|)`.
/// `f` builds a scalar loss from graph leaves created from `inputs` in order.
pub fn check_gradient<F>(f: &F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId + ?Sized,
{
    // analytic pass
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &ids);
    if g.value(loss).len() != 1 {
        return Err(Error::Contract("check_gradient needs a scalar-reducible op".into()));
    }
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .map(|&id| {
            g.grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(id).shape()))
        })
        .collect();

    let eval = |inputs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::inference();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let loss = f(&mut g, &ids);
        g.value(loss).item()
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for ei in 0..t.len() {
            let orig = t.data()[ei];
            work[ti].data_mut()[ei] = orig + eps;
            let fp = eval(&work);
            work[ti].data_mut()[ei] = orig - eps;
            let fm = eval(&work);
            work[ti].data_mut()[ei] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let an = analytic[ti].data()[ei];
            if !fd.is_finite() || !an.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient check: input {ti} element {ei}: analytic {an}, fd {fd}"
                )));
            }
            let rel = (an - fd).abs() / fd.abs().max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_gradient_matches_oracle() {
        let mut rng = crate::rng::substream(10, "gc-mm");
        let a: Tensor<f64> = Tensor::randn(&[4, 3], &mut rng);
        let b: Tensor<f64> = Tensor::randn(&[3, 2], &mut rng);
        let err = check_gradient(
            &|g, ids| {
                let c = g.matmul(ids[0], ids[1], false, false);
                g.sum_all(c)
            },
            &[a, b],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "matmul gradcheck err {err}");
    }

    #[test]
    fn gelu_gradient_at_zero_is_half() {
        let x = Tensor::from_vec(vec![1], vec![0.0f64]);
        let mut g = Graph::new();
        let id = g.leaf(x, true);
        let y = g.gelu(id);
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        let grad = g.grad(id).unwrap().data()[0];
        assert!((grad - 0.5).abs() < 1e-12, "GELU'(0) = {grad}");
    }

    #[test]
    fn layernorm_gradient_matches_oracle() {
        let mut rng = crate::rng::substream(11, "gc-ln");
        let x: Tensor<f64> = Tensor::randn(&[2, 8], &mut rng);
        let gamma: Tensor<f64> = Tensor::randn(&[8], &mut rng);
        let beta: Tensor<f64> = Tensor::randn(&[8], &mut rng);
        let err = check_gradient(
            &|g, ids| {
                let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-6);
                let yy = g.mul(y, y);
                g.sum_all(yy)
            },
            &[x, gamma, beta],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "layernorm gradcheck err {err}");
    }

    #[test]
    fn softmax_cross_entropy_two_logits() {
        // CE(softmax(z), onehot(1)) at z = [0, 0]: d/dz = (p - onehot) = [0.25-?]
        // p = [0.5, 0.5]; grad = [0.5, -0.5] for the mean over one row.
        // The spec's worked example uses the finite-difference oracle.
        let z = Tensor::from_vec(vec![1, 2], vec![0.0f64, 0.0]);
        let labels = std::sync::Arc::new(vec![1u32]);
        let err = check_gradient(
            &move |g, ids| g.cross_entropy(ids[0], labels.clone(), None).unwrap(),
            &[z.clone()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "ce gradcheck err {err}");
        let mut g = Graph::new();
        let id = g.leaf(z, true);
        let loss = g.cross_entropy(id, std::sync::Arc::new(vec![1u32]), None).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(id).unwrap();
        assert!((grad.data()[0] - 0.5).abs() < 1e-12);
        assert!((grad.data()[1] + 0.5).abs() < 1e-12);
    }
}
