//! AdamW with global-norm gradient clipping, plus the cosine LR schedule.

use crate::graph::Param;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 gradient clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: Some(0.5),
        }
    }
}

/// Optimizer state: first/second moment per parameter plus the step counter.
pub struct AdamW<E: Scalar> {
    pub cfg: AdamWConfig,
    params: Vec<Param<E>>,
    m: Vec<Tensor<E>>,
    v: Vec<Tensor<E>>,
    pub step_count: u64,
}

impl<E: Scalar> AdamW<E> {
    pub fn new(params: Vec<Param<E>>, cfg: AdamWConfig) -> Self {
        let m = params.iter().map(|p| Tensor::zeros(p.value().shape())).collect();
        let v = params.iter().map(|p| Tensor::zeros(p.value().shape())).collect();
        AdamW { cfg, params, m, v, step_count: 0 }
    }

    pub fn params(&self) -> &[Param<E>] {
        &self.params
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// Pre-clip global L2 norm over all parameter gradients (missing grads
    /// count as zero).
    pub fn global_grad_norm(&self) -> f64 {
        let sq: f64 = self.params.iter().filter_map(|p| p.grad().map(|g| g.sq_l2())).sum();
        sq.sqrt()
    }

    /// One AdamW step at learning rate `lr` (schedule already applied).
    /// Gradients are rescaled so the global norm does not exceed the clip,
    /// moments are bias-corrected, weight decay is decoupled. Consumes and
    /// zeroes the parameter gradients. Empty parameter list is a no-op.
    pub fn step(&mut self, lr: f64) -> Result<()> {
        if self.params.is_empty() {
            return Ok(());
        }
        let norm = self.global_grad_norm();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("global gradient norm = {norm}")));
        }
        let clip_scale = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        let (b1, b2) = (E::from_f64(self.cfg.beta1), E::from_f64(self.cfg.beta2));
        let one_b1 = E::from_f64(1.0 - self.cfg.beta1);
        let one_b2 = E::from_f64(1.0 - self.cfg.beta2);
        let epsv = E::from_f64(self.cfg.eps);
        let clip = E::from_f64(clip_scale);
        for (i, p) in self.params.iter().enumerate() {
            let Some(grad) = p.grad() else { continue };
            let lr_p = lr * p.lr_mult();
            let step_size = E::from_f64(lr_p / bc1);
            let bc2_sqrt = E::from_f64(bc2.sqrt());
            let decay = E::from_f64(1.0 - lr_p * self.cfg.weight_decay);
            let mut value = p.value();
            {
                let vd = value.data_mut();
                let md = self.m[i].data_mut();
                let vvd = self.v[i].data_mut();
                for j in 0..vd.len() {
                    let gj = grad.data()[j] * clip;
                    md[j] = b1 * md[j] + one_b1 * gj;
                    vvd[j] = b2 * vvd[j] + one_b2 * gj * gj;
                    // decoupled weight decay, then bias-corrected update
                    vd[j] = vd[j] * decay
                        - step_size * md[j] / (vvd[j].sqrt() / bc2_sqrt + epsv);
                }
            }
            p.set_value(value);
            p.zero_grad();
        }
        Ok(())
    }

    /// Moment buffers by parameter name, for checkpointing.
    pub fn state_tensors(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        for (i, p) in self.params.iter().enumerate() {
            out.push((format!("opt.m.{}", p.name()), self.m[i].clone()));
            out.push((format!("opt.v.{}", p.name()), self.v[i].clone()));
        }
        out
    }

    pub fn load_state(
        &mut self,
        mut lookup: impl FnMut(&str) -> Option<Tensor<E>>,
        step_count: u64,
    ) -> Result<()> {
        for (i, p) in self.params.iter().enumerate() {
            let name = p.name();
            let m = lookup(&format!("opt.m.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing opt.m.{name}")))?;
            let v = lookup(&format!("opt.v.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing opt.v.{name}")))?;
            if m.shape() != p.value().shape() || v.shape() != p.value().shape() {
                return Err(Error::Checkpoint(format!(
                    "optimizer state shape mismatch for {name}"
                )));
            }
            self.m[i] = m;
            self.v[i] = v;
        }
        self.step_count = step_count;
        Ok(())
    }
}

/// Cosine annealing: `base_lr * 0.5 * (1 + cos(pi * step / total_steps))`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Contract("cosine_lr: total_steps must be > 0".into()));
    }
    if step > total_steps {
        return Err(Error::Contract(format!(
            "cosine_lr: step {step} > total_steps {total_steps}"
        )));
    }
    let frac = step as f64 / total_steps as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 0.3).unwrap(), 0.3);
        assert!(cosine_lr(100, 100, 0.3).unwrap().abs() < 1e-17);
        assert!((cosine_lr(50, 100, 0.3).unwrap() - 0.15).abs() < 1e-15);
        assert!(cosine_lr(1, 0, 0.3).is_err());
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let p = Param::new("w", Tensor::from_vec(vec![2], vec![1.0f64, -2.0]));
        p.add_grad(&Tensor::zeros(&[2]));
        let mut opt = AdamW::new(
            vec![p.clone()],
            AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() },
        );
        opt.step(0.1).unwrap();
        assert_eq!(p.value().data(), &[1.0, -2.0]);
    }

    #[test]
    fn single_step_matches_hand_execution() {
        // w=1, g=1, lr=0.1, wd=0, step 1:
        // m=0.1, v=0.001, m_hat=1, v_hat=1 -> w = 1 - 0.1*1/(1+eps) ~= 0.9
        let p = Param::new("w", Tensor::from_vec(vec![1], vec![1.0f64]));
        p.add_grad(&Tensor::from_vec(vec![1], vec![1.0]));
        let mut opt = AdamW::new(
            vec![p.clone()],
            AdamWConfig { lr: 0.1, weight_decay: 0.0, clip_norm: None, ..Default::default() },
        );
        opt.step(0.1).unwrap();
        let w = p.value().data()[0];
        assert!((w - 0.9).abs() < 1e-6, "w after one step = {w}");
    }

    #[test]
    fn clipping_rescales_to_the_clip_norm() {
        // two params with grads (3, 4): global norm 5, clip 0.5 -> scale 0.1
        let a = Param::new("a", Tensor::from_vec(vec![1], vec![0.0f64]));
        let b = Param::new("b", Tensor::from_vec(vec![1], vec![0.0f64]));
        a.add_grad(&Tensor::from_vec(vec![1], vec![3.0]));
        b.add_grad(&Tensor::from_vec(vec![1], vec![4.0]));
        let opt = AdamW::new(vec![a, b], AdamWConfig { clip_norm: Some(0.5), ..Default::default() });
        let norm = opt.global_grad_norm();
        assert!((norm - 5.0).abs() < 1e-12);
        let scale = 0.5 / norm;
        assert!((norm * scale - 0.5).abs() < 1e-6);
    }

    #[test]
    fn empty_param_list_is_noop() {
        let mut opt: AdamW<f32> = AdamW::new(vec![], AdamWConfig::default());
        opt.step(0.1).unwrap();
        assert_eq!(opt.step_count, 0);
    }
}
