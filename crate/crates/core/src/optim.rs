// SPDX-License-Identifier: MIT OR Apache-2.0

//! AdamW with decoupled weight decay and per-group hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment accumulators for a fixed list of parameters.
#[derive(Debug, Clone)]
pub struct OptimizerState<F> {
    groups: Vec<AdamWConfig>,
    group_of: Vec<usize>,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    step: u64,
}

impl<F: Scalar> OptimizerState<F> {
    /// `group_of[i]` selects the hyperparameter group of parameter `i`.
    pub fn new(params: &[Tensor<F>], groups: Vec<AdamWConfig>, group_of: Vec<usize>) -> Result<Self> {
        if group_of.len() != params.len() {
            return Err(Error::shape(
                "optimizer",
                format!("{} group assignments for {} parameters", group_of.len(), params.len()),
            ));
        }
        if let Some(&g) = group_of.iter().find(|&&g| g >= groups.len()) {
            return Err(Error::invalid("optimizer group", format!("{g} of {}", groups.len())));
        }
        for g in &groups {
            if !(g.lr >= 0.0) || !(0.0..1.0).contains(&g.beta1) || !(0.0..1.0).contains(&g.beta2) || !(g.eps > 0.0) {
                return Err(Error::invalid("optimizer hyperparameters", format!("{g:?}")));
            }
        }
        let zeros = |p: &Tensor<F>| Tensor::zeros(p.shape().to_vec());
        Ok(OptimizerState {
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            groups,
            group_of,
            step: 0,
        })
    }

    /// Single-group convenience constructor.
    pub fn single(params: &[Tensor<F>], config: AdamWConfig) -> Result<Self> {
        Self::new(params, vec![config], vec![0; params.len()])
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn groups(&self) -> &[AdamWConfig] {
        &self.groups
    }

    pub fn set_lr(&mut self, group: usize, lr: f64) {
        self.groups[group].lr = lr;
    }
}

/// Applies one AdamW update in place.
///
/// Decay is decoupled: each parameter is first scaled by `1 - lr·λ`, then
/// moved by the bias-corrected Adam direction.
pub fn optimizer_step<F: Scalar>(
    params: &mut [Tensor<F>],
    grads: &[Tensor<F>],
    state: &mut OptimizerState<F>,
) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != params.len() {
        return Err(Error::shape(
            "optimizer_step",
            format!("{} params, {} grads, {} slots", params.len(), grads.len(), state.m.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::shape(
                "optimizer_step",
                format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite { op: "optimizer_step (gradient)" });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let cfg = state.groups[state.group_of[i]];
        let (b1, b2) = (F::lit(cfg.beta1), F::lit(cfg.beta2));
        let bc1 = F::lit(1.0 - cfg.beta1.powi(t));
        let bc2 = F::lit(1.0 - cfg.beta2.powi(t));
        let lr = F::lit(cfg.lr);
        let decay = F::lit(1.0 - cfg.lr * cfg.weight_decay);
        let eps = F::lit(cfg.eps);
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = b1 * *mv + (F::one() - b1) * gv;
            *vv = b2 * *vv + (F::one() - b2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv = *pv * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = vec![Tensor::<f64>::from_f64(vec![3], &[1.0, -2.0, 4.0]).unwrap()];
        let g = vec![Tensor::zeros(vec![3])];
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamWConfig::default()
        };
        let mut st = OptimizerState::single(&p, cfg).unwrap();
        optimizer_step(&mut p, &g, &mut st).unwrap();
        let f = 1.0 - 0.1 * 0.5;
        assert_eq!(p[0].data(), &[f, -2.0 * f, 4.0 * f]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_is_normalized_gradient() {
        let mut p = vec![Tensor::<f64>::zeros(vec![3])];
        let g = vec![Tensor::from_f64(vec![3], &[0.5, -3.0, 1e-3]).unwrap()];
        let cfg = AdamWConfig::with_lr(0.01);
        let mut st = OptimizerState::single(&p, cfg).unwrap();
        optimizer_step(&mut p, &g, &mut st).unwrap();
        for (pv, gv) in p[0].data().iter().zip(g[0].data()) {
            let expect = -0.01 * gv / (gv.abs() + 1e-8);
            assert!((pv - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_mismatch_and_nonfinite() {
        let mut p = vec![Tensor::<f64>::zeros(vec![3])];
        let mut st = OptimizerState::single(&p, AdamWConfig::default()).unwrap();
        assert!(optimizer_step(&mut p, &[Tensor::zeros(vec![2])], &mut st).is_err());
        let bad = vec![Tensor::from_f64(vec![3], &[0.0, f64::NAN, 0.0]).unwrap()];
        assert!(matches!(optimizer_step(&mut p, &bad, &mut st), Err(Error::NonFinite { .. })));
        assert_eq!(st.step_count(), 0);
    }

    /// Independently written scalar AdamW, following the published update.
    fn reference_adamw(x0: &[f64], target: &[f64], cfg: AdamWConfig, steps: usize) -> Vec<f64> {
        let mut x = x0.to_vec();
        let mut m = vec![0.0; x.len()];
        let mut v = vec![0.0; x.len()];
        for t in 1..=steps {
            for i in 0..x.len() {
                let g = 2.0 * (x[i] - target[i]) * (i as f64 + 1.0);
                x[i] -= cfg.lr * cfg.weight_decay * x[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let mh = m[i] / (1.0 - cfg.beta1.powi(t as i32));
                let vh = v[i] / (1.0 - cfg.beta2.powi(t as i32));
                x[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
        x
    }

    #[test]
    fn quadratic_bowl_matches_reference() {
        let x0 = [3.0, -1.0, 0.5, 2.0];
        let target = [1.0, 1.0, -1.0, 0.0];
        let cfg = AdamWConfig {
            lr: 0.05,
            weight_decay: 0.01,
            ..AdamWConfig::default()
        };
        let mut p = vec![Tensor::<f64>::from_f64(vec![4], &x0).unwrap()];
        let mut st = OptimizerState::single(&p, cfg).unwrap();
        for _ in 0..100 {
            let g: Vec<f64> = p[0]
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| 2.0 * (x - target[i]) * (i as f64 + 1.0))
                .collect();
            optimizer_step(&mut p, &[Tensor::from_f64(vec![4], &g).unwrap()], &mut st).unwrap();
        }
        let expect = reference_adamw(&x0, &target, cfg, 100);
        for (a, b) in p[0].data().iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn groups_use_their_own_rates() {
        let mut p = vec![Tensor::<f64>::zeros(vec![1]), Tensor::zeros(vec![1])];
        let g = vec![Tensor::scalar(1.0), Tensor::scalar(1.0)];
        let mut st = OptimizerState::new(
            &p,
            vec![AdamWConfig::with_lr(3e-4), AdamWConfig::with_lr(1e-5)],
            vec![0, 1],
        )
        .unwrap();
        optimizer_step(&mut p, &g, &mut st).unwrap();
        assert!((p[0].data()[0] + 3e-4).abs() < 1e-10);
        assert!((p[1].data()[0] + 1e-5).abs() < 1e-10);
    }
}
