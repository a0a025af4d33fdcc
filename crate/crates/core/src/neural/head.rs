use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::model::Action;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Action distribution produced from the network output.
///
/// Categorical heads read `n` logits. Gaussian heads read `dim` means from
/// the network followed by `dim` trainable log standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyHead {
    Categorical { n: usize },
    Gaussian { dim: usize },
}

impl PolicyHead {
    /// Width of the network output feeding the head.
    pub fn dim(&self) -> usize {
        match *self {
            PolicyHead::Categorical { n } => n,
            PolicyHead::Gaussian { dim } => dim,
        }
    }

    /// Length of the full distribution-parameter vector.
    pub fn logits_dim(&self) -> usize {
        match *self {
            PolicyHead::Categorical { n } => n,
            PolicyHead::Gaussian { dim } => 2 * dim,
        }
    }

    fn check(&self, logits: &[f64]) -> Result<()> {
        if logits.len() != self.logits_dim() {
            return Err(Error::Shape {
                what: "policy logits",
                expected: self.logits_dim(),
                got: logits.len(),
            });
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(domain("policy logits must be finite"));
        }
        Ok(())
    }
}

/// Softmax of categorical logits.
pub fn probabilities(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

fn gaussian_action(dim: usize, action: &Action) -> Result<&[f64]> {
    match action {
        Action::Continuous(a) if a.len() == dim => Ok(a),
        Action::Continuous(a) => Err(Error::Shape {
            what: "continuous action",
            expected: dim,
            got: a.len(),
        }),
        Action::Discrete(_) => Err(domain("gaussian head needs a continuous action")),
    }
}

fn categorical_action(n: usize, action: &Action) -> Result<usize> {
    match action {
        Action::Discrete(i) if *i < n => Ok(*i),
        Action::Discrete(i) => Err(domain(format!("action {i} out of range for {n} categories"))),
        Action::Continuous(_) => Err(domain("categorical head needs a discrete action")),
    }
}

/// Log-density of `action`.
pub fn log_prob(head: &PolicyHead, logits: &[f64], action: &Action) -> Result<f64> {
    Ok(log_prob_grad(head, logits, action)?.0)
}

/// Log-density and its gradient with respect to the logits.
pub fn log_prob_grad(head: &PolicyHead, logits: &[f64], action: &Action) -> Result<(f64, Vec<f64>)> {
    head.check(logits)?;
    match *head {
        PolicyHead::Categorical { n } => {
            let a = categorical_action(n, action)?;
            let logp = log_softmax(logits);
            let mut grad: Vec<f64> = logp.iter().map(|l| -l.exp()).collect();
            grad[a] += 1.0;
            Ok((logp[a], grad))
        }
        PolicyHead::Gaussian { dim } => {
            let a = gaussian_action(dim, action)?;
            let (mean, log_std) = logits.split_at(dim);
            let mut grad = vec![0.0; 2 * dim];
            let mut total = 0.0;
            for k in 0..dim {
                let inv_var = (-2.0 * log_std[k]).exp();
                let diff = a[k] - mean[k];
                let z2 = diff * diff * inv_var;
                total += -0.5 * z2 - log_std[k] - HALF_LN_2PI;
                grad[k] = diff * inv_var;
                grad[dim + k] = z2 - 1.0;
            }
            Ok((total, grad))
        }
    }
}

/// Entropy of the distribution.
pub fn entropy(head: &PolicyHead, logits: &[f64]) -> Result<f64> {
    Ok(entropy_grad(head, logits)?.0)
}

/// Entropy and its gradient with respect to the logits.
pub fn entropy_grad(head: &PolicyHead, logits: &[f64]) -> Result<(f64, Vec<f64>)> {
    head.check(logits)?;
    match *head {
        PolicyHead::Categorical { .. } => {
            let logp = log_softmax(logits);
            let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
            let h: f64 = -p.iter().zip(&logp).map(|(pi, li)| pi * li).sum::<f64>();
            let grad = p.iter().zip(&logp).map(|(pi, li)| -pi * (li + h)).collect();
            Ok((h, grad))
        }
        PolicyHead::Gaussian { dim } => {
            let log_std = &logits[dim..];
            let h = log_std.iter().map(|ls| ls + 0.5 + HALF_LN_2PI).sum();
            let mut grad = vec![0.0; 2 * dim];
            for g in &mut grad[dim..] {
                *g = 1.0;
            }
            Ok((h, grad))
        }
    }
}

/// Draws an action. Gaussian samples are unclipped; clipping to the control
/// range happens where the action is handed to the environment.
pub fn sample(head: &PolicyHead, logits: &[f64], rng: &mut dyn RngCore) -> Result<Action> {
    head.check(logits)?;
    match *head {
        PolicyHead::Categorical { n } => {
            let p = probabilities(logits);
            let u: f64 = rand::Rng::gen(rng);
            let mut acc = 0.0;
            for (i, pi) in p.iter().enumerate() {
                acc += pi;
                if u < acc {
                    return Ok(Action::Discrete(i));
                }
            }
            Ok(Action::Discrete(n - 1))
        }
        PolicyHead::Gaussian { dim } => {
            let (mean, log_std) = logits.split_at(dim);
            let a = (0..dim)
                .map(|k| {
                    let z: f64 = StandardNormal.sample(rng);
                    mean[k] + log_std[k].exp() * z
                })
                .collect();
            Ok(Action::Continuous(a))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const CAT4: PolicyHead = PolicyHead::Categorical { n: 4 };

    #[test]
    fn uniform_categorical() {
        let logits = [0.3; 4];
        let lp = log_prob(&CAT4, &logits, &Action::Discrete(2)).unwrap();
        assert!((lp - 0.25f64.ln()).abs() < 1e-15);
        assert!((entropy(&CAT4, &logits).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!((lp + 1.386_294_361_119_890_6).abs() < 1e-12);
    }

    #[test]
    fn standard_normal_density_at_zero() {
        let head = PolicyHead::Gaussian { dim: 3 };
        let lp = log_prob(&head, &[0.0; 6], &Action::Continuous(vec![0.0; 3])).unwrap();
        assert!((lp - 3.0 * -0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn non_finite_logits_rejected() {
        assert!(log_prob(&CAT4, &[0.0, f64::NAN, 0.0, 0.0], &Action::Discrete(0)).is_err());
        assert!(entropy(&CAT4, &[f64::INFINITY, 0.0, 0.0, 0.0]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample(&CAT4, &[0.0, 0.0, 0.0], &mut rng).is_err());
    }

    #[test]
    fn wrong_action_kind_rejected() {
        assert!(log_prob(&CAT4, &[0.0; 4], &Action::Continuous(vec![0.0])).is_err());
        assert!(log_prob(&CAT4, &[0.0; 4], &Action::Discrete(4)).is_err());
    }

    fn fd_check(head: PolicyHead, logits: Vec<f64>, action: Action) {
        let (_, g) = log_prob_grad(&head, &logits, &action).unwrap();
        let (_, ge) = entropy_grad(&head, &logits).unwrap();
        let h = 1e-6;
        for k in 0..logits.len() {
            let mut p = logits.clone();
            p[k] += h;
            let mut m = logits.clone();
            m[k] -= h;
            let fd = (log_prob(&head, &p, &action).unwrap() - log_prob(&head, &m, &action).unwrap()) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-7, "logp grad {k}");
            let fe = (entropy(&head, &p).unwrap() - entropy(&head, &m).unwrap()) / (2.0 * h);
            assert!((fe - ge[k]).abs() < 1e-7, "entropy grad {k}");
        }
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        fd_check(CAT4, vec![0.2, -1.0, 0.7, 0.0], Action::Discrete(1));
        fd_check(PolicyHead::Gaussian { dim: 2 }, vec![0.1, -0.4, -0.3, 0.2], Action::Continuous(vec![0.5, -1.0]));
    }

    #[test]
    fn sampling_is_reproducible() {
        let logits = [0.5, -0.2, 1.0, 0.0];
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| sample(&CAT4, &logits, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn categorical_frequencies_within_three_sigma() {
        let logits = [0.5, -0.2, 1.0, 0.0];
        let p = probabilities(&logits);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sample(&CAT4, &logits, &mut rng).unwrap().index().unwrap()] += 1;
        }
        for k in 0..4 {
            let freq = counts[k] as f64 / n as f64;
            let sigma = (p[k] * (1.0 - p[k]) / n as f64).sqrt();
            assert!((freq - p[k]).abs() <= 3.0 * sigma, "category {k}: {freq} vs {}", p[k]);
        }
    }

    #[test]
    fn gaussian_samples_have_requested_moments() {
        let head = PolicyHead::Gaussian { dim: 1 };
        let logits = [1.5, 0.5f64.ln()];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 50_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| match sample(&head, &logits, &mut rng).unwrap() {
                Action::Continuous(v) => v[0],
                _ => unreachable!(),
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 1.5).abs() < 4.0 * 0.5 / (n as f64).sqrt());
        assert!((var - 0.25).abs() < 0.01);
    }
}
