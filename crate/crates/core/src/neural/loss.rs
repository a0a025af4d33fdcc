use super::head::{entropy_grad, log_prob_grad, PolicyHead};
use super::{backward_trace, forward_trace, MlpSpec, ParamVector, PolicyNet};
use crate::error::{domain, Error, Result};
use crate::model::Action;

/// Scalar training losses, all mean-reduced over the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossSpec {
    /// `-mean(min(w A, clip(w, 1-eps, 1+eps) A)) - c mean(H)` where
    /// `w = exp(log_prob - old_log_prob)`.
    ClippedSurrogate {
        head: PolicyHead,
        clip_epsilon: f64,
        entropy_coef: f64,
    },
    /// `0.5 mean((V(s) - target)^2)` for a single-output network.
    ValueMse,
}

/// One row of a training batch. Unused fields are ignored by each loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSample {
    pub obs: Vec<f64>,
    pub action: Action,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: ParamVector,
    /// Fraction of samples whose ratio left `[1-eps, 1+eps]`.
    pub clip_fraction: f64,
    /// `mean((w - 1) - ln w)`, a nonnegative KL estimate.
    pub approx_kl: f64,
    pub entropy: f64,
}

fn net_for(spec: &MlpSpec, head: PolicyHead) -> Result<PolicyNet> {
    if spec.output_dim != head.dim() {
        return Err(Error::Shape {
            what: "policy output",
            expected: head.dim(),
            got: spec.output_dim,
        });
    }
    Ok(PolicyNet { mlp: spec.clone(), head })
}

fn check_params(params: &ParamVector, expected: usize) -> Result<()> {
    if params.len() != expected {
        return Err(Error::Shape {
            what: "parameters",
            expected,
            got: params.len(),
        });
    }
    Ok(())
}

/// Loss and its exact gradient with respect to every parameter.
pub fn backward(params: &ParamVector, spec: &MlpSpec, batch: &[LossSample], loss: &LossSpec) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(domain("loss over an empty batch"));
    }
    spec.validate()?;
    for s in batch {
        if s.obs.len() != spec.input_dim {
            return Err(Error::Shape {
                what: "batch observation",
                expected: spec.input_dim,
                got: s.obs.len(),
            });
        }
    }
    let n = batch.len() as f64;
    let mut grad = ParamVector::zeros(params.layout().clone());
    match *loss {
        LossSpec::ClippedSurrogate {
            head,
            clip_epsilon,
            entropy_coef,
        } => {
            let net = net_for(spec, head)?;
            check_params(params, net.layout().total())?;
            let (mut total, mut clipped, mut kl, mut ent) = (0.0, 0usize, 0.0, 0.0);
            for s in batch {
                let (logits, trace) = net.logits_with_trace(params, &s.obs);
                let (logp, dlogp) = log_prob_grad(&head, &logits, &s.action)?;
                let (h, dh) = entropy_grad(&head, &logits)?;
                let log_ratio = logp - s.old_log_prob;
                let ratio = log_ratio.exp();
                let clipped_ratio = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon);
                let unclipped_obj = ratio * s.advantage;
                let clipped_obj = clipped_ratio * s.advantage;
                // The unclipped branch carries the gradient whenever it is
                // the smaller of the two.
                let (obj, active) = if unclipped_obj <= clipped_obj {
                    (unclipped_obj, true)
                } else {
                    (clipped_obj, false)
                };
                total += -obj - entropy_coef * h;
                ent += h;
                kl += (ratio - 1.0) - log_ratio;
                if (ratio - 1.0).abs() > clip_epsilon {
                    clipped += 1;
                }
                let scale = if active { -s.advantage * ratio / n } else { 0.0 };
                let grad_logits: Vec<f64> = dlogp
                    .iter()
                    .zip(&dh)
                    .map(|(gl, gh)| scale * gl - entropy_coef / n * gh)
                    .collect();
                net.backward_logits(params, &trace, &grad_logits, grad.as_mut_slice());
            }
            let out = LossOutput {
                loss: total / n,
                grad,
                clip_fraction: clipped as f64 / n,
                approx_kl: kl / n,
                entropy: ent / n,
            };
            if !out.loss.is_finite() || !out.approx_kl.is_finite() {
                return Err(Error::NonFinite("policy loss".into()));
            }
            Ok(out)
        }
        LossSpec::ValueMse => {
            if spec.output_dim != 1 {
                return Err(Error::Shape {
                    what: "value output",
                    expected: 1,
                    got: spec.output_dim,
                });
            }
            check_params(params, spec.n_params())?;
            let mut total = 0.0;
            for s in batch {
                let trace = forward_trace(spec, params.as_slice(), &s.obs);
                let err = trace.output()[0] - s.target;
                total += 0.5 * err * err;
                backward_trace(spec, params.as_slice(), &trace, &[err / n], grad.as_mut_slice());
            }
            let loss = total / n;
            if !loss.is_finite() {
                return Err(Error::NonFinite("value loss".into()));
            }
            Ok(LossOutput {
                loss,
                grad,
                clip_fraction: 0.0,
                approx_kl: 0.0,
                entropy: 0.0,
            })
        }
    }
}

/// Forward-only evaluation of the same loss.
pub fn loss_value(params: &ParamVector, spec: &MlpSpec, batch: &[LossSample], loss: &LossSpec) -> Result<f64> {
    if batch.is_empty() {
        return Err(domain("loss over an empty batch"));
    }
    let n = batch.len() as f64;
    match *loss {
        LossSpec::ClippedSurrogate {
            head,
            clip_epsilon,
            entropy_coef,
        } => {
            let net = net_for(spec, head)?;
            let mut total = 0.0;
            for s in batch {
                let logits = net.logits(params, &s.obs)?;
                let logp = super::head::log_prob(&head, &logits, &s.action)?;
                let h = super::head::entropy(&head, &logits)?;
                let ratio = (logp - s.old_log_prob).exp();
                let obj = (ratio * s.advantage).min(ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon) * s.advantage);
                total += -obj - entropy_coef * h;
            }
            Ok(total / n)
        }
        LossSpec::ValueMse => {
            let mut total = 0.0;
            for s in batch {
                let v = super::forward(params, spec, &s.obs)?[0];
                total += 0.5 * (v - s.target).powi(2);
            }
            Ok(total / n)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{init_mlp_params, Activation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(rng: &mut ChaCha8Rng, n: usize, dim: usize, head: PolicyHead) -> Vec<LossSample> {
        (0..n)
            .map(|_| LossSample {
                obs: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                action: match head {
                    PolicyHead::Categorical { n } => Action::Discrete(rng.gen_range(0..n)),
                    PolicyHead::Gaussian { dim } => Action::Continuous((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()),
                },
                old_log_prob: rng.gen_range(-2.0..-0.5),
                advantage: rng.gen_range(-1.0..1.0),
                target: rng.gen_range(-1.0..1.0),
            })
            .collect()
    }

    #[test]
    fn zero_advantage_and_entropy_gives_zero_gradient() {
        let head = PolicyHead::Categorical { n: 3 };
        let spec = MlpSpec::new(2, 3).with_hidden(vec![4]);
        let net = PolicyNet { mlp: spec.clone(), head };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = net.init(&mut rng);
        let mut b = batch(&mut rng, 5, 2, head);
        for s in &mut b {
            s.advantage = 0.0;
        }
        let loss = LossSpec::ClippedSurrogate {
            head,
            clip_epsilon: 0.2,
            entropy_coef: 0.0,
        };
        let out = backward(&params, &spec, &b, &loss).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.as_slice().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn clipped_ratio_uses_clip_bound() {
        // Single linear logit layer with zero weights: uniform over 2 actions.
        let head = PolicyHead::Categorical { n: 2 };
        let spec = MlpSpec::new(1, 2).with_hidden(vec![]).with_activation(Activation::Linear);
        let params = ParamVector::zeros(spec.layout());
        let old = (0.5f64).ln() - 1.5f64.ln(); // ratio = 1.5
        let sample = LossSample {
            obs: vec![0.0],
            action: Action::Discrete(0),
            old_log_prob: old,
            advantage: 2.0,
            target: 0.0,
        };
        let loss = LossSpec::ClippedSurrogate {
            head,
            clip_epsilon: 0.2,
            entropy_coef: 0.0,
        };
        let out = backward(&params, &spec, &[sample], &loss).unwrap();
        assert!((out.loss + 1.2 * 2.0).abs() < 1e-12);
        assert_eq!(out.clip_fraction, 1.0);
        assert!(out.grad.as_slice().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn duplicated_rows_give_same_gradient() {
        let head = PolicyHead::Categorical { n: 3 };
        let spec = MlpSpec::new(2, 3).with_hidden(vec![4]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = PolicyNet { mlp: spec.clone(), head }.init(&mut rng);
        let one = batch(&mut rng, 1, 2, head);
        let two = vec![one[0].clone(), one[0].clone()];
        let loss = LossSpec::ClippedSurrogate {
            head,
            clip_epsilon: 0.2,
            entropy_coef: 0.01,
        };
        let g1 = backward(&params, &spec, &one, &loss).unwrap().grad;
        let g2 = backward(&params, &spec, &two, &loss).unwrap().grad;
        for (a, b) in g1.as_slice().iter().zip(g2.as_slice()) {
            assert!((a - b).abs() <= 1e-15 * (1.0 + a.abs()));
        }
    }

    fn check_fd(params: &ParamVector, spec: &MlpSpec, b: &[LossSample], loss: &LossSpec) {
        let out = backward(params, spec, b, loss).unwrap();
        let h = 1e-5;
        for k in 0..params.len() {
            let mut p = params.clone();
            p.as_mut_slice()[k] += h;
            let mut m = params.clone();
            m.as_mut_slice()[k] -= h;
            let fd = (loss_value(&p, spec, b, loss).unwrap() - loss_value(&m, spec, b, loss).unwrap()) / (2.0 * h);
            let g = out.grad.as_slice()[k];
            let rel = (fd - g).abs() / (1e-6_f64).max(fd.abs().max(g.abs()));
            assert!(rel <= 1e-4 || (fd - g).abs() < 1e-9, "param {k}: fd {fd} analytic {g}");
        }
    }

    #[test]
    fn value_gradient_matches_finite_differences() {
        let spec = MlpSpec::new(3, 1).with_hidden(vec![4, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = ParamVector::from_vec(spec.layout(), init_mlp_params(&spec, 1.0, &mut rng)).unwrap();
        let b = batch(&mut rng, 6, 3, PolicyHead::Categorical { n: 1 });
        check_fd(&params, &spec, &b, &LossSpec::ValueMse);
    }

    #[test]
    fn gaussian_policy_gradient_matches_finite_differences() {
        let head = PolicyHead::Gaussian { dim: 2 };
        let spec = MlpSpec::new(3, 2).with_hidden(vec![5]);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let params = ParamVector::from_vec(
            PolicyNet { mlp: spec.clone(), head }.layout(),
            {
                let mut d = init_mlp_params(&spec, 1.0, &mut rng);
                d.extend([0.1, -0.2]);
                d
            },
        )
        .unwrap();
        let b = batch(&mut rng, 6, 3, head);
        // Keep ratios away from the clip kinks by matching old log-probs.
        let net = PolicyNet { mlp: spec.clone(), head };
        let b: Vec<LossSample> = b
            .into_iter()
            .map(|mut s| {
                let logits = net.logits(&params, &s.obs).unwrap();
                s.old_log_prob = crate::neural::log_prob(&head, &logits, &s.action).unwrap() - 0.05;
                s
            })
            .collect();
        let loss = LossSpec::ClippedSurrogate {
            head,
            clip_epsilon: 0.2,
            entropy_coef: 0.01,
        };
        check_fd(&params, &spec, &b, &loss);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let spec = MlpSpec::new(1, 1).with_hidden(vec![]);
        let params = ParamVector::zeros(spec.layout());
        assert!(backward(&params, &spec, &[], &LossSpec::ValueMse).is_err());
    }
}
