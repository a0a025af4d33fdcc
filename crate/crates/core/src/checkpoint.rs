//! Binary agent checkpoints.
//!
//! All integers and floats are little-endian. Layout:
//!
//! ```text
//! magic        8 bytes  "RPBTCKPT"
//! version      u16      1
//! head kind    u8       0 = categorical, 1 = gaussian
//! flags        u8       bit 0: optimizer moments present
//!                       bit 1: policy only (no value network, no moments)
//! head dim     u32
//! tau          f64
//! steps        u64
//! updates      u64
//! seed         u64
//! policy mlp   spec (see below)
//! value mlp    spec     absent in policy-only files
//! n_policy     u64      number of policy parameters
//! n_value      u64      absent in policy-only files
//! policy       n_policy x f64
//! value        n_value x f64
//! [moments]    t u64, m n_policy x f64, v n_policy x f64,
//!              t u64, m n_value x f64,  v n_value x f64
//! ```
//!
//! An MLP spec is `activation u8 (0 tanh, 1 relu, 2 linear)`, `input u32`,
//! `n_hidden u32`, `n_hidden x u32` widths, `output u32`. The file must end
//! exactly after the last field.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::neural::{Activation, AdamState, MlpSpec, ParamVector, PolicyHead, PolicyNet};
use crate::rppo::{AgentState, Opponent, RppoConfig};

pub const MAGIC: &[u8; 8] = b"RPBTCKPT";
pub const VERSION: u16 = 1;

const FLAG_MOMENTS: u8 = 1;
const FLAG_POLICY_ONLY: u8 = 2;

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub policy: PolicyNet,
    pub policy_params: ParamVector,
    /// Value network; `None` for policy-only snapshots.
    pub value: Option<(MlpSpec, ParamVector)>,
    pub tau: f64,
    pub steps: u64,
    pub updates: u64,
    pub seed: u64,
    pub moments: Option<(AdamState, AdamState)>,
}

impl Checkpoint {
    pub fn from_agent(agent: &AgentState, with_moments: bool) -> Self {
        Self {
            policy: agent.policy.clone(),
            policy_params: agent.policy_params.clone(),
            value: Some((agent.value.clone(), agent.value_params.clone())),
            tau: agent.tau(),
            steps: agent.steps,
            updates: agent.updates,
            seed: agent.seed,
            moments: with_moments.then(|| (agent.policy_opt.clone(), agent.value_opt.clone())),
        }
    }

    /// Frozen policy without training state.
    pub fn policy_only(policy: PolicyNet, policy_params: ParamVector, tau: f64) -> Self {
        Self {
            policy,
            policy_params,
            value: None,
            tau,
            steps: 0,
            updates: 0,
            seed: 0,
            moments: None,
        }
    }

    pub fn opponent(&self) -> Opponent {
        Opponent::Policy {
            net: self.policy.clone(),
            params: Arc::new(self.policy_params.clone()),
        }
    }

    /// Rebuilds an agent under `config`; the stored risk level overrides the
    /// config's and missing moments start fresh. Fails for policy-only
    /// snapshots.
    pub fn into_agent(self, mut config: RppoConfig) -> Result<AgentState> {
        let Some((value, value_params)) = self.value else {
            return Err(Error::Domain("a policy-only snapshot cannot be trained further".into()));
        };
        config.risk = config.risk.with_tau(self.tau)?;
        config.hidden = self.policy.mlp.hidden.clone();
        config.activation = self.policy.mlp.activation;
        let (policy_opt, value_opt) = self
            .moments
            .unwrap_or_else(|| (AdamState::new(self.policy_params.len()), AdamState::new(value_params.len())));
        Ok(AgentState {
            policy: self.policy,
            policy_params: self.policy_params,
            value,
            value_params,
            policy_opt,
            value_opt,
            config,
            steps: self.steps,
            updates: self.updates,
            seed: self.seed,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let (kind, dim) = match self.policy.head {
            PolicyHead::Categorical { n } => (0u8, n),
            PolicyHead::Gaussian { dim } => (1u8, dim),
        };
        out.push(kind);
        let mut flags = 0;
        if self.value.is_none() {
            flags |= FLAG_POLICY_ONLY;
        } else if self.moments.is_some() {
            flags |= FLAG_MOMENTS;
        }
        out.push(flags);
        out.extend_from_slice(&(dim as u32).to_le_bytes());
        out.extend_from_slice(&self.tau.to_le_bytes());
        for x in [self.steps, self.updates, self.seed] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        write_spec(&mut out, &self.policy.mlp);
        if let Some((spec, _)) = &self.value {
            write_spec(&mut out, spec);
        }
        out.extend_from_slice(&(self.policy_params.len() as u64).to_le_bytes());
        if let Some((_, params)) = &self.value {
            out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        }
        write_f64s(&mut out, self.policy_params.as_slice());
        if let Some((_, params)) = &self.value {
            write_f64s(&mut out, params.as_slice());
            if let Some((p, v)) = &self.moments {
                for s in [p, v] {
                    out.extend_from_slice(&s.t.to_le_bytes());
                    write_f64s(&mut out, &s.m);
                    write_f64s(&mut out, &s.v);
                }
            }
        }
        out
    }

    /// Decodes `bytes`; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8, "magic")? != MAGIC {
            return Err(r.bad("magic", "not a checkpoint file"));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(r.bad("version", format!("unsupported version {version}")));
        }
        let kind = r.u8("head kind")?;
        let flags = r.u8("flags")?;
        if flags > 2 {
            return Err(r.bad("flags", format!("unknown flag bits {flags:#04x}")));
        }
        let policy_only = flags & FLAG_POLICY_ONLY != 0;
        let dim = r.u32("head dim")? as usize;
        let head = match kind {
            0 => PolicyHead::Categorical { n: dim },
            1 => PolicyHead::Gaussian { dim },
            k => return Err(r.bad("head kind", format!("unknown head kind {k}"))),
        };
        let tau = r.f64("tau")?;
        if !(tau > 0.0 && tau < 1.0) {
            return Err(r.bad("tau", format!("{tau} is outside (0, 1)")));
        }
        let steps = r.u64("steps")?;
        let updates = r.u64("updates")?;
        let seed = r.u64("seed")?;
        let policy_mlp = r.spec("policy spec")?;
        if policy_mlp.output_dim != head.dim() {
            return Err(r.bad("policy spec", "output width does not match the head"));
        }
        let value_spec = if policy_only {
            None
        } else {
            let v = r.spec("value spec")?;
            if v.output_dim != 1 {
                return Err(r.bad("value spec", "value network must have one output"));
            }
            Some(v)
        };
        let policy = PolicyNet { mlp: policy_mlp, head };
        let n_policy = r.u64("n_policy")? as usize;
        let policy_layout = policy.layout();
        if n_policy != policy_layout.total() {
            return Err(r.bad("n_policy", format!("spec needs {} parameters, file has {n_policy}", policy_layout.total())));
        }
        let n_value = match &value_spec {
            Some(v) => {
                let n = r.u64("n_value")? as usize;
                if n != v.n_params() {
                    return Err(r.bad("n_value", format!("spec needs {} parameters, file has {n}", v.n_params())));
                }
                n
            }
            None => 0,
        };
        let pp = r.f64s(n_policy, "policy parameters")?;
        let policy_params = ParamVector::from_vec(policy_layout, pp).map_err(|e| r.bad("policy parameters", e.to_string()))?;
        let value = match value_spec {
            Some(spec) => {
                let vp = r.f64s(n_value, "value parameters")?;
                let params = ParamVector::from_vec(spec.layout(), vp).map_err(|e| r.bad("value parameters", e.to_string()))?;
                Some((spec, params))
            }
            None => None,
        };
        let moments = if flags & FLAG_MOMENTS != 0 {
            let mut read = |n: usize, what: &'static str| -> Result<AdamState> {
                let t = r.u64(what)?;
                let m = r.f64s(n, what)?;
                let v = r.f64s(n, what)?;
                Ok(AdamState { m, v, t })
            };
            let p = read(n_policy, "policy moments")?;
            let v = read(n_value, "value moments")?;
            Some((p, v))
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(r.bad("trailer", format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            policy,
            policy_params,
            value,
            tau,
            steps,
            updates,
            seed,
            moments,
        })
    }

    /// Writes atomically: a temporary sibling is written and then renamed.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            field: "file",
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes, path)
    }
}

fn write_spec(out: &mut Vec<u8>, spec: &MlpSpec) {
    out.push(match spec.activation {
        Activation::Tanh => 0,
        Activation::Relu => 1,
        Activation::Linear => 2,
    });
    out.extend_from_slice(&(spec.input_dim as u32).to_le_bytes());
    out.extend_from_slice(&(spec.hidden.len() as u32).to_le_bytes());
    for h in &spec.hidden {
        out.extend_from_slice(&(*h as u32).to_le_bytes());
    }
    out.extend_from_slice(&(spec.output_dim as u32).to_le_bytes());
}

fn write_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn bad(&self, field: &'static str, reason: impl Into<String>) -> Error {
        Error::Checkpoint {
            path: self.path.to_path_buf(),
            field,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(self.bad(field, format!("file truncated at byte {}", self.bytes.len()))),
        }
    }

    fn u8(&mut self, field: &'static str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().expect("length checked")))
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("length checked")))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("length checked")))
    }

    fn f64(&mut self, field: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().expect("length checked")))
    }

    fn f64s(&mut self, n: usize, field: &'static str) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| self.bad(field, "length overflow"))?;
        let raw = self.take(len, field)?;
        let xs: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
        if xs.iter().any(|x| !x.is_finite()) {
            return Err(self.bad(field, "non-finite value"));
        }
        Ok(xs)
    }

    fn spec(&mut self, field: &'static str) -> Result<MlpSpec> {
        let activation = match self.u8(field)? {
            0 => Activation::Tanh,
            1 => Activation::Relu,
            2 => Activation::Linear,
            a => return Err(self.bad(field, format!("unknown activation {a}"))),
        };
        let input_dim = self.u32(field)? as usize;
        let n_hidden = self.u32(field)? as usize;
        if n_hidden > 64 {
            return Err(self.bad(field, format!("implausible layer count {n_hidden}")));
        }
        let mut hidden = Vec::with_capacity(n_hidden);
        for _ in 0..n_hidden {
            hidden.push(self.u32(field)? as usize);
        }
        let output_dim = self.u32(field)? as usize;
        let spec = MlpSpec {
            input_dim,
            hidden,
            output_dim,
            activation,
        };
        spec.validate().map_err(|e| self.bad(field, e.to_string()))?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ActionSpace;

    fn agent() -> AgentState {
        let cfg = RppoConfig {
            hidden: vec![5, 3],
            ..RppoConfig::toy(0.3).unwrap()
        };
        let mut a = AgentState::new(4, &ActionSpace::Discrete(3), cfg, 11).unwrap();
        a.steps = 1234;
        a.policy_opt.t = 7;
        a.policy_opt.m[0] = 0.25;
        a
    }

    #[test]
    fn round_trip_is_byte_identical() {
        for moments in [false, true] {
            let ck = Checkpoint::from_agent(&agent(), moments);
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes, Path::new("x.ckpt")).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn agent_survives_round_trip() {
        let a = agent();
        let ck = Checkpoint::from_bytes(&Checkpoint::from_agent(&a, true).to_bytes(), Path::new("x")).unwrap();
        let b = ck.into_agent(a.config.clone()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gaussian_head_round_trip() {
        let cfg = RppoConfig {
            hidden: vec![4],
            ..RppoConfig::toy(0.7).unwrap()
        };
        let space = ActionSpace::Continuous {
            low: vec![-1.0; 2],
            high: vec![1.0; 2],
        };
        let a = AgentState::new(3, &space, cfg, 2).unwrap();
        let bytes = Checkpoint::from_agent(&a, false).to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("g")).unwrap();
        assert_eq!(back.policy.head, PolicyHead::Gaussian { dim: 2 });
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn policy_only_round_trip() {
        let a = agent();
        let ck = Checkpoint::policy_only(a.policy.clone(), a.policy_params.clone(), a.tau());
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("p")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert!(bytes.len() < Checkpoint::from_agent(&a, false).to_bytes().len());
        assert!(back.into_agent(a.config.clone()).is_err());
        let mut b = bytes.clone();
        b[11] = 3;
        assert_eq!(field_of(Checkpoint::from_bytes(&b, Path::new("p")).unwrap_err()), "flags");
    }

    fn field_of(err: Error) -> &'static str {
        match err {
            Error::Checkpoint { field, .. } => field,
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn corruption_names_the_field() {
        let bytes = Checkpoint::from_agent(&agent(), false).to_bytes();
        let p = Path::new("bad.ckpt");
        let mut b = bytes.clone();
        b[0] = b'X';
        assert_eq!(field_of(Checkpoint::from_bytes(&b, p).unwrap_err()), "magic");
        let mut b = bytes.clone();
        b[8] = 9;
        assert_eq!(field_of(Checkpoint::from_bytes(&b, p).unwrap_err()), "version");
        let mut b = bytes.clone();
        b[10] = 5;
        assert_eq!(field_of(Checkpoint::from_bytes(&b, p).unwrap_err()), "head kind");
        let mut b = bytes.clone();
        b[16..24].copy_from_slice(&1.5f64.to_le_bytes());
        assert_eq!(field_of(Checkpoint::from_bytes(&b, p).unwrap_err()), "tau");
        assert_eq!(field_of(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p).unwrap_err()), "value parameters");
        let mut b = bytes.clone();
        b.push(0);
        assert_eq!(field_of(Checkpoint::from_bytes(&b, p).unwrap_err()), "trailer");
        let msg = Checkpoint::from_bytes(&b, p).unwrap_err().to_string();
        assert!(msg.contains("bad.ckpt") && msg.contains("trailer"), "{msg}");
    }

    #[test]
    fn save_and_load_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ck = Checkpoint::from_agent(&agent(), true);
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let path2 = dir.path().join("b.ckpt");
        loaded.save(&path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
        assert_eq!(field_of(Checkpoint::load(&dir.path().join("missing")).unwrap_err()), "file");
    }
}
