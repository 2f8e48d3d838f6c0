use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Gradients, ModelParams, ParamId, ParamSubsetMask};

/// Adam hyper-parameters. Weight decay is classic L2 (added to the gradient)
/// and skipped for normalization scale/shift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = || params.params.iter().map(|p| Array2::zeros(p.dim())).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter array flagged in `update`.
/// Arrays outside the mask are left bit-for-bit untouched, moments included.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &AdamConfig,
    update: &ParamSubsetMask,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for id in ParamId::ALL {
        if !update.is_trainable(id) {
            continue;
        }
        let i = id as usize;
        let decay = if id.is_norm() { 0.0 } else { cfg.weight_decay };
        ndarray::Zip::from(&mut params.params[i])
            .and(&grads.tensors[i])
            .and(&mut state.m[i])
            .and(&mut state.v[i])
            .for_each(|theta, &g, m, v| {
                let g = g + decay * *theta;
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *theta -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{select_mask, ArchConfig, MaskMode};

    fn small() -> ModelParams {
        ModelParams::init(
            ArchConfig {
                enc1: 4,
                enc2: 5,
                dec1: 6,
                joints: 2,
            },
            3,
        )
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = small();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adam_step(&mut p, &Gradients::zeros_like(&before), &mut st, &cfg, &select_mask(MaskMode::All));
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = small();
        let before = p.clone();
        let mut g = Gradients::zeros_like(&p);
        g.tensors[0].fill(0.37);
        g.tensors[1].fill(-2.5);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adam_step(&mut p, &g, &mut st, &cfg, &select_mask(MaskMode::All));
        // m_hat = g, v_hat = g^2  =>  step = lr * g / (|g| + eps)
        for (a, b) in p.params[0].iter().zip(before.params[0].iter()) {
            let expected = 1e-3 * 0.37 / (0.37 + 1e-8);
            assert!(((b - a) - expected).abs() < 1e-15);
        }
        for (a, b) in p.params[1].iter().zip(before.params[1].iter()) {
            assert!(((a - b) - 1e-3 * 2.5 / (2.5 + 1e-8)).abs() < 1e-15);
        }
    }

    #[test]
    fn weight_decay_shrinks_towards_zero() {
        let mut p = small();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            weight_decay: 1e-2,
            ..Default::default()
        };
        let zeros = Gradients::zeros_like(&p);
        adam_step(&mut p, &zeros, &mut st, &cfg, &select_mask(MaskMode::All));
        for (a, b) in p.params[ParamId::Enc2W as usize]
            .iter()
            .zip(before.params[ParamId::Enc2W as usize].iter())
        {
            if *b != 0.0 {
                assert!(a.abs() < b.abs());
                assert_eq!(a.signum(), b.signum());
            }
        }
        // normalization parameters are not decayed
        assert_eq!(
            p.params[ParamId::Norm1Scale as usize],
            before.params[ParamId::Norm1Scale as usize]
        );
    }

    #[test]
    fn masked_arrays_are_untouched() {
        let mut p = small();
        let before = p.clone();
        let mut g = Gradients::zeros_like(&p);
        for t in &mut g.tensors {
            t.fill(1.0);
        }
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &AdamConfig::default(), &select_mask(MaskMode::FreezeHeads));
        for id in ParamId::ALL {
            let same = p.param(id) == before.param(id);
            assert_eq!(same, !id.is_encoder(), "{}", id.name());
        }
    }
}
