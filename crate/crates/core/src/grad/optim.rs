//! Adam and the warm-up / inverse-square-root learning-rate schedule.

use super::{GradError, ParamStore};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |id| vec![0.0; store.get(id).len()];
        Self {
            first_moment: store.ids().map(zeros).collect(),
            second_moment: store.ids().map(zeros).collect(),
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// One bias-corrected Adam update over every trainable parameter holding a
/// gradient. Parameters without a gradient see a zero gradient.
pub fn adam_step(store: &mut ParamStore, state: &mut OptimizerState, lr: f64) -> Result<(), GradError> {
    if state.first_moment.len() != store.len() {
        return Err(GradError::ShapeMismatch {
            op: "adam_step",
            left: vec![store.len()],
            right: vec![state.first_moment.len()],
        });
    }
    for id in store.ids() {
        if !store.is_trainable(id) {
            continue;
        }
        let t = store.get(id);
        if state.first_moment[id.index()].len() != t.len() {
            return Err(GradError::ShapeMismatch {
                op: "adam_step",
                left: t.shape().to_vec(),
                right: vec![state.first_moment[id.index()].len()],
            });
        }
        if let Some(g) = t.grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(GradError::NonFiniteGradient {
                    param: store.name(id).to_string(),
                });
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);

    for id in store.ids() {
        if !store.is_trainable(id) {
            continue;
        }
        let tensor = store.get_mut(id);
        let grad = tensor.take_grad();
        let m = &mut state.first_moment[id.index()];
        let v = &mut state.second_moment[id.index()];
        let data = tensor.data_mut();
        for j in 0..data.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[j]);
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `base · min(step / warmup, sqrt(warmup / step))`; peaks at `base` when
/// `step == warmup`.
pub fn noam_lr(step: u64, base: f64, warmup: u64) -> Result<f64, GradError> {
    if step == 0 {
        return Err(GradError::InvalidStep);
    }
    let s = step as f64;
    let w = warmup.max(1) as f64;
    Ok(base * (s / w).min((w / s).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::Tensor;

    fn store_with(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(&[values.len()], values.to_vec()).unwrap(), true);
        s
    }

    #[test]
    fn noam_schedule_points() {
        assert!((noam_lr(4000, 1e-3, 4000).unwrap() - 1e-3).abs() < 1e-18);
        assert!((noam_lr(1000, 1e-3, 4000).unwrap() - 2.5e-4).abs() < 1e-18);
        assert!((noam_lr(16000, 1e-3, 4000).unwrap() - 5e-4).abs() < 1e-18);
        assert!(matches!(noam_lr(0, 1e-3, 4000), Err(GradError::InvalidStep)));
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store_with(&[0.3, -1.2]);
        let mut st = OptimizerState::new(&s);
        let id = s.find("w").unwrap();
        s.get_mut(id).accumulate_grad(&[0.0, 0.0]);
        adam_step(&mut s, &mut st, 1e-3).unwrap();
        assert_eq!(s.get(id).data(), &[0.3, -1.2]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = store_with(&[0.0, 0.0, 0.0]);
        let mut st = OptimizerState::new(&s);
        let id = s.find("w").unwrap();
        s.get_mut(id).accumulate_grad(&[0.5, -3.0, 1e-3]);
        adam_step(&mut s, &mut st, 0.01).unwrap();
        for (&x, want) in s.get(id).data().iter().zip([-0.01, 0.01, -0.01]) {
            assert!((x - want).abs() < 1e-7, "{x} vs {want}");
        }
    }

    #[test]
    fn two_steps_match_hand_rolled_trace() {
        // Hand-rolled Adam on a single scalar, gradients 0.2 then -0.1.
        let lr = 0.05;
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let mut x = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, g) in [(1, 0.2f64), (2, -0.1)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }

        let mut s = store_with(&[1.0]);
        let mut st = OptimizerState::new(&s);
        let id = s.find("w").unwrap();
        for g in [0.2, -0.1] {
            s.get_mut(id).accumulate_grad(&[g]);
            adam_step(&mut s, &mut st, lr).unwrap();
        }
        assert_eq!(st.step, 2);
        assert!((s.get(id).data()[0] - x).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut s = store_with(&[0.0]);
        let mut st = OptimizerState::new(&s);
        let id = s.find("w").unwrap();
        s.get_mut(id).accumulate_grad(&[f64::NAN]);
        assert!(matches!(adam_step(&mut s, &mut st, 1e-3), Err(GradError::NonFiniteGradient { .. })));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn frozen_entries_untouched() {
        let mut s = ParamStore::new();
        let id = s.insert("stat", Tensor::new(&[1], vec![2.0]).unwrap(), false);
        let mut st = OptimizerState::new(&s);
        s.get_mut(id).accumulate_grad(&[1.0]);
        adam_step(&mut s, &mut st, 0.1).unwrap();
        assert_eq!(s.get(id).data(), &[2.0]);
    }
}
