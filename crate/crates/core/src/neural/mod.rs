//! Small feed-forward networks with exact reverse-mode gradients.
//!
//! Parameters are stored flat in a [`ParamVector`]; for each layer the
//! weights (`out x in`, row-major) come first, then the biases. Hidden layers
//! use the configured activation, the output layer is linear.

mod adam;
mod head;
mod loss;

pub use adam::{adam_step, clip_grad_norm, AdamConfig, AdamState};
pub use head::{entropy, entropy_grad, log_prob, log_prob_grad, probabilities, sample, PolicyHead};
pub use loss::{backward, loss_value, LossOutput, LossSample, LossSpec};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{domain, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Linear,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpSpec {
    /// Two tanh hidden layers of 128 units.
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![128, 128],
            output_dim,
            activation: Activation::Tanh,
        }
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(domain("network dimensions must all be at least 1"));
        }
        Ok(())
    }

    /// `(in, out)` per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &h in self.hidden.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }

    pub fn n_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn layout(&self) -> Layout {
        let mut layout = Layout::default();
        for (l, (i, o)) in self.layer_dims().into_iter().enumerate() {
            layout.push(format!("layer{l}.weight"), i * o);
            layout.push(format!("layer{l}.bias"), o);
        }
        layout
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Named contiguous blocks of a flat parameter array.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Layout {
    blocks: Vec<Block>,
}

impl Layout {
    pub fn push(&mut self, name: impl Into<String>, len: usize) {
        let offset = self.total();
        self.blocks.push(Block {
            name: name.into(),
            offset,
            len,
        });
    }

    pub fn total(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.offset + b.len)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn find(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }
}

/// Flat parameter storage plus its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    data: Vec<f64>,
    layout: Layout,
}

impl ParamVector {
    pub fn zeros(layout: Layout) -> Self {
        Self {
            data: vec![0.0; layout.total()],
            layout,
        }
    }

    pub fn from_vec(layout: Layout, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.total() {
            return Err(Error::Shape {
                what: "parameter vector",
                expected: layout.total(),
                got: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("parameter vector".into()));
        }
        Ok(Self { data, layout })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.layout.find(name).map(|b| &self.data[b.offset..b.offset + b.len])
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// SHA-256 of the little-endian parameter bytes, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for x in &self.data {
            hasher.update(x.to_le_bytes());
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Glorot-uniform weights, zero biases. The last layer is scaled by
/// `output_scale` (small values give near-uniform initial policies).
pub fn init_mlp_params<R: Rng + ?Sized>(spec: &MlpSpec, output_scale: f64, rng: &mut R) -> Vec<f64> {
    let dims = spec.layer_dims();
    let last = dims.len() - 1;
    let mut data = Vec::with_capacity(spec.n_params());
    for (l, &(i, o)) in dims.iter().enumerate() {
        let bound = (6.0 / (i + o) as f64).sqrt() * if l == last { output_scale } else { 1.0 };
        data.extend((0..i * o).map(|_| rng.gen_range(-bound..=bound)));
        data.extend(std::iter::repeat_n(0.0, o));
    }
    data
}

/// Layer outputs recorded during a forward pass; `acts[0]` is the input.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    acts: Vec<Vec<f64>>,
}

impl Trace {
    pub(crate) fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has at least the input")
    }
}

pub(crate) fn forward_trace(spec: &MlpSpec, params: &[f64], input: &[f64]) -> Trace {
    let dims = spec.layer_dims();
    let last = dims.len() - 1;
    let mut acts = Vec::with_capacity(dims.len() + 1);
    acts.push(input.to_vec());
    let mut offset = 0;
    for (l, &(i, o)) in dims.iter().enumerate() {
        let w = &params[offset..offset + i * o];
        let b = &params[offset + i * o..offset + i * o + o];
        offset += i * o + o;
        let x = &acts[l];
        let mut y = b.to_vec();
        for (r, yr) in y.iter_mut().enumerate() {
            let row = &w[r * i..(r + 1) * i];
            *yr += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        if l != last {
            for v in y.iter_mut() {
                *v = spec.activation.apply(*v);
            }
        }
        acts.push(y);
    }
    Trace { acts }
}

/// Accumulates `d loss / d params` into `grad` given `d loss / d output`.
pub(crate) fn backward_trace(spec: &MlpSpec, params: &[f64], trace: &Trace, grad_out: &[f64], grad: &mut [f64]) {
    let dims = spec.layer_dims();
    let mut offsets = Vec::with_capacity(dims.len());
    let mut off = 0;
    for &(i, o) in &dims {
        offsets.push(off);
        off += i * o + o;
    }
    let mut delta = grad_out.to_vec();
    for l in (0..dims.len()).rev() {
        let (i, o) = dims[l];
        let off = offsets[l];
        let x = &trace.acts[l];
        {
            let (gw, gb) = grad[off..off + i * o + o].split_at_mut(i * o);
            for r in 0..o {
                let d = delta[r];
                if d == 0.0 {
                    continue;
                }
                gb[r] += d;
                for (g, xv) in gw[r * i..(r + 1) * i].iter_mut().zip(x) {
                    *g += d * xv;
                }
            }
        }
        if l == 0 {
            break;
        }
        let w = &params[off..off + i * o];
        let mut prev = vec![0.0; i];
        for r in 0..o {
            let d = delta[r];
            if d == 0.0 {
                continue;
            }
            for (p, wv) in prev.iter_mut().zip(&w[r * i..(r + 1) * i]) {
                *p += d * wv;
            }
        }
        for (p, y) in prev.iter_mut().zip(x) {
            *p *= spec.activation.derivative_from_output(*y);
        }
        delta = prev;
    }
}

fn check_forward(params: &[f64], spec: &MlpSpec, input: &[f64]) -> Result<()> {
    spec.validate()?;
    if input.len() != spec.input_dim {
        return Err(Error::Shape {
            what: "network input",
            expected: spec.input_dim,
            got: input.len(),
        });
    }
    if params.len() < spec.n_params() {
        return Err(Error::Shape {
            what: "network parameters",
            expected: spec.n_params(),
            got: params.len(),
        });
    }
    Ok(())
}

/// Network output for one input.
pub fn forward(params: &ParamVector, spec: &MlpSpec, input: &[f64]) -> Result<Vec<f64>> {
    check_forward(params.as_slice(), spec, input)?;
    Ok(forward_trace(spec, params.as_slice(), input).acts.pop().expect("non-empty"))
}

/// A policy network: an MLP producing the head's distribution parameters.
/// Gaussian heads append a free `log_std` block to the MLP parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub mlp: MlpSpec,
    pub head: PolicyHead,
}

impl PolicyNet {
    pub fn new(input_dim: usize, hidden: Vec<usize>, activation: Activation, head: PolicyHead) -> Result<Self> {
        let mlp = MlpSpec {
            input_dim,
            hidden,
            output_dim: head.dim(),
            activation,
        };
        mlp.validate()?;
        Ok(Self { mlp, head })
    }

    pub fn layout(&self) -> Layout {
        let mut layout = self.mlp.layout();
        if let PolicyHead::Gaussian { dim } = self.head {
            layout.push("log_std", dim);
        }
        layout
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut data = init_mlp_params(&self.mlp, 0.01, rng);
        if let PolicyHead::Gaussian { dim } = self.head {
            data.extend(std::iter::repeat_n(0.0, dim));
        }
        ParamVector::from_vec(self.layout(), data).expect("layout matches")
    }

    /// Distribution parameters ("logits") for one observation: categorical
    /// logits, or mean followed by log-std for Gaussian heads.
    pub fn logits(&self, params: &ParamVector, obs: &[f64]) -> Result<Vec<f64>> {
        check_forward(params.as_slice(), &self.mlp, obs)?;
        Ok(self.logits_with_trace(params, obs).0)
    }

    pub(crate) fn logits_with_trace(&self, params: &ParamVector, obs: &[f64]) -> (Vec<f64>, Trace) {
        let trace = forward_trace(&self.mlp, params.as_slice(), obs);
        let mut logits = trace.output().to_vec();
        if let PolicyHead::Gaussian { .. } = self.head {
            let block = params.block("log_std").expect("gaussian layout has log_std");
            logits.extend_from_slice(block);
        }
        (logits, trace)
    }

    /// Routes `d loss / d logits` to the parameters.
    pub(crate) fn backward_logits(&self, params: &ParamVector, trace: &Trace, grad_logits: &[f64], grad: &mut [f64]) {
        let out = self.mlp.output_dim;
        backward_trace(&self.mlp, params.as_slice(), trace, &grad_logits[..out], grad);
        if let PolicyHead::Gaussian { dim } = self.head {
            let block = params.layout().find("log_std").expect("gaussian layout has log_std");
            for k in 0..dim {
                grad[block.offset + k] += grad_logits[out + k];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_give_zero_output() {
        let spec = MlpSpec::new(3, 2).with_hidden(vec![4]);
        let p = ParamVector::zeros(spec.layout());
        assert_eq!(forward(&p, &spec, &[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_returns_input() {
        let spec = MlpSpec::new(3, 3).with_hidden(vec![]).with_activation(Activation::Linear);
        let mut data = vec![0.0; 12];
        for k in 0..3 {
            data[k * 3 + k] = 1.0;
        }
        let p = ParamVector::from_vec(spec.layout(), data).unwrap();
        assert_eq!(forward(&p, &spec, &[0.5, -1.5, 2.0]).unwrap(), vec![0.5, -1.5, 2.0]);
    }

    #[test]
    fn shape_errors() {
        let spec = MlpSpec::new(3, 2).with_hidden(vec![4]);
        let p = ParamVector::zeros(spec.layout());
        assert!(matches!(forward(&p, &spec, &[1.0]), Err(Error::Shape { .. })));
        assert!(ParamVector::from_vec(spec.layout(), vec![0.0; 3]).is_err());
        assert!(ParamVector::from_vec(spec.layout(), vec![f64::NAN; spec.n_params()]).is_err());
        assert!(MlpSpec::new(0, 2).validate().is_err());
    }

    #[test]
    fn default_spec_network_size() {
        let spec = MlpSpec::new(16, 4);
        assert_eq!(spec.hidden, vec![128, 128]);
        assert_eq!(spec.n_params(), 16 * 128 + 128 + 128 * 128 + 128 + 128 * 4 + 4);
    }

    #[test]
    fn single_weight_perturbation_matches_gradient() {
        let spec = MlpSpec::new(3, 2).with_hidden(vec![5]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = init_mlp_params(&spec, 1.0, &mut rng);
        let p = ParamVector::from_vec(spec.layout(), data).unwrap();
        let x = [0.3, -0.7, 1.1];
        let trace = forward_trace(&spec, p.as_slice(), &x);
        // d(sum of outputs)/d params.
        let mut grad = vec![0.0; spec.n_params()];
        backward_trace(&spec, p.as_slice(), &trace, &[1.0, 1.0], &mut grad);
        for idx in [0, 7, 19, spec.n_params() - 1] {
            let h = 1e-5;
            let mut plus = p.clone();
            plus.as_mut_slice()[idx] += h;
            let mut minus = p.clone();
            minus.as_mut_slice()[idx] -= h;
            let f = |q: &ParamVector| forward(q, &spec, &x).unwrap().iter().sum::<f64>();
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            assert!((fd - grad[idx]).abs() < 1e-8, "param {idx}: fd {fd} vs {}", grad[idx]);
        }
    }

    #[test]
    fn fingerprint_tracks_content() {
        let spec = MlpSpec::new(2, 1).with_hidden(vec![2]);
        let a = ParamVector::zeros(spec.layout());
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.as_mut_slice()[0] = 1.0;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
