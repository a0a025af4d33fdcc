use super::ParamVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn reset(&mut self) {
        *self = Self::new(self.m.len());
    }
}

/// Bias-corrected adaptive-moment update, in place.
pub fn adam_step(params: &mut ParamVector, grad: &ParamVector, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    let n = params.len();
    for (what, got) in [("gradient", grad.len()), ("adam first moment", state.m.len()), ("adam second moment", state.v.len())] {
        if got != n {
            return Err(Error::Shape { what, expected: n, got });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let p = params.as_mut_slice();
    for i in 0..n {
        let g = grad.as_slice()[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Rescales `grad` so its L2 norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_grad_norm(grad: &mut ParamVector, max_norm: f64) -> f64 {
    let norm = grad.as_slice().iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grad.as_mut_slice() {
            *g *= scale;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::Layout;

    fn layout(n: usize) -> Layout {
        let mut l = Layout::default();
        l.push("w", n);
        l
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = ParamVector::from_vec(layout(3), vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let g = ParamVector::zeros(layout(3));
        let mut s = AdamState::new(3);
        adam_step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.t, 1);
        assert!(s.m.iter().chain(&s.v).all(|x| *x == 0.0));
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = ParamVector::from_vec(layout(3), vec![0.0; 3]).unwrap();
        let g = ParamVector::from_vec(layout(3), vec![0.3, -2.0, 1e-3]).unwrap();
        let mut s = AdamState::new(3);
        let cfg = AdamConfig::with_lr(0.01);
        adam_step(&mut p, &g, &mut s, &cfg).unwrap();
        for (x, gi) in p.as_slice().iter().zip(g.as_slice()) {
            // m_hat = g, v_hat = g^2 => step = lr * g / (|g| + eps).
            let expected = -0.01 * gi / (gi.abs() + 1e-8);
            assert!((x - expected).abs() < 1e-15);
        }
        assert!((s.m[0] - 0.03).abs() < 1e-15);
        assert!((s.v[1] - 0.004).abs() < 1e-15);
    }

    #[test]
    fn identical_inputs_identical_results() {
        let run = || {
            let mut p = ParamVector::from_vec(layout(2), vec![0.1, 0.2]).unwrap();
            let mut s = AdamState::new(2);
            for k in 0..50 {
                let g = ParamVector::from_vec(layout(2), vec![(k as f64).sin(), (k as f64 * 0.3).cos()]).unwrap();
                adam_step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap();
            }
            p.into_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut p = ParamVector::zeros(layout(2));
        let g = ParamVector::zeros(layout(3));
        assert!(adam_step(&mut p, &g, &mut AdamState::new(2), &AdamConfig::default()).is_err());
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = ParamVector::from_vec(layout(2), vec![3.0, 4.0]).unwrap();
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g.as_slice()[0] - 0.6).abs() < 1e-15);
    }
}
