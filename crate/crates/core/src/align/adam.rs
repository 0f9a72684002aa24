use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied as `p -= lr * weight_decay * p`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Linear warmup times half-cosine decay. `warmup = 0` skips the warmup;
/// progress past `horizon` stays at the end of the cosine.
pub fn learning_rate(base: f64, step: usize, warmup: usize, horizon: usize) -> f64 {
    let warm = if warmup == 0 {
        1.0
    } else {
        (step as f64 / warmup as f64).min(1.0)
    };
    let progress = if horizon == 0 {
        0.0
    } else {
        (step as f64 / horizon as f64).min(1.0)
    };
    base * warm * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Per-tensor update policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateRule {
    pub trainable: bool,
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    /// Updates applied so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        AdamState {
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update at learning rate `lr`. Frozen tensors are
/// not touched, including their moments.
pub fn adam_step(
    params: &mut [&mut Matrix],
    grads: &[Matrix],
    rules: &[UpdateRule],
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || rules.len() != n || state.m.len() != n {
        return Err(Error::shape(
            format!("{n} grads, rules and moments"),
            format!("{}, {} and {}", grads.len(), rules.len(), state.m.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::shape(
                format!("{}x{}", p.rows(), p.cols()),
                format!("{}x{}", g.rows(), g.cols()),
            ));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..n {
        if !rules[i].trainable {
            continue;
        }
        let decay = if rules[i].decay { cfg.weight_decay } else { 0.0 };
        let p = params[i].as_mut_slice();
        let m = state.m[i].as_mut_slice();
        let v = state.v[i].as_mut_slice();
        for (((p, &g), m), v) in p.iter_mut().zip(grads[i].as_slice()).zip(m).zip(v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + decay * *p);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const ON: UpdateRule = UpdateRule {
        trainable: true,
        decay: false,
    };

    #[test]
    fn schedule_shape() {
        assert_eq!(learning_rate(1e-3, 0, 10, 100), 0.0);
        assert!((learning_rate(1.0, 50, 10, 100) - 0.5).abs() < 1e-12);
        assert!((learning_rate(1.0, 5, 10, 1_000_000) - 0.5).abs() < 1e-6);
        assert!(learning_rate(1.0, 100, 10, 100).abs() < 1e-12);
        assert_eq!(learning_rate(2.0, 0, 0, 100), 2.0);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut p = Matrix::row_vector(&[1.0, -2.0]);
        let before = p.clone();
        let mut state = AdamState::new(&[(1, 2)]);
        let rule = UpdateRule { trainable: true, decay: true };
        let lr = learning_rate(1e-3, 0, 100, 1000);
        adam_step(&mut [&mut p], &[Matrix::row_vector(&[3.0, 4.0])], &[rule], &mut state, &AdamConfig::default(), lr)
            .unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn memoryless_adam_takes_sign_steps() {
        let cfg = AdamConfig {
            beta1: 0.0,
            beta2: 0.0,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let mut p = Matrix::row_vector(&[0.0, 0.0, 0.0]);
        let g = Matrix::row_vector(&[0.5, -3.0, 1e-3]);
        let mut state = AdamState::new(&[(1, 3)]);
        for step in 1..=20 {
            adam_step(&mut [&mut p], &[g.clone()], &[ON], &mut state, &cfg, 0.01).unwrap();
            for (x, gv) in p.as_slice().iter().zip(g.as_slice()) {
                let expected = -0.01 * step as f64 * gv / (gv.abs() + 1e-8);
                assert!((x - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn frozen_tensors_are_bit_identical() {
        let mut a = Matrix::row_vector(&[0.1, 0.2]);
        let mut b = Matrix::row_vector(&[0.3, 0.4]);
        let frozen = b.clone();
        let mut state = AdamState::new(&[(1, 2), (1, 2)]);
        let g = Matrix::row_vector(&[1.0, 1.0]);
        let rules = [ON, UpdateRule { trainable: false, decay: true }];
        for _ in 0..5 {
            adam_step(&mut [&mut a, &mut b], &[g.clone(), g.clone()], &rules, &mut state, &AdamConfig::default(), 0.1)
                .unwrap();
        }
        assert_eq!(b, frozen);
        assert_ne!(a, Matrix::row_vector(&[0.1, 0.2]));
        assert_eq!(state.m[1], Matrix::zeros(1, 2));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut p = Matrix::zeros(1, 2);
        let mut state = AdamState::new(&[(1, 2)]);
        let r = adam_step(&mut [&mut p], &[Matrix::zeros(2, 1)], &[ON], &mut state, &AdamConfig::default(), 0.1);
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
    }
}
