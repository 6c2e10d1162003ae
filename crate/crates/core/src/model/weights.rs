use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelError, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SLTW";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Seed of the frozen encoder weights.
pub const ENCODER_SEED: u64 = 0x5eed_0f_e4c0de;
const FROZEN_BIAS_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Zeros,
    Ones,
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    Scaled { fan_in: usize, gain: f64 },
    Normal(f64),
    /// Sine/cosine features of the patch-grid coordinates, `[side², dim]`.
    Fourier { side: usize },
}

/// Smooth positional code: for frequency `k` and axis `a`, the pair
/// `sin(π·k·u_a), cos(π·k·u_a)` with `u_a ∈ [-1, 1]`. Columns past the last full
/// group repeat the cycle.
fn fourier_grid(side: usize, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(side * side * dim);
    let coord = |i: usize| if side > 1 { 2.0 * i as f64 / (side - 1) as f64 - 1.0 } else { 0.0 };
    for y in 0..side {
        for x in 0..side {
            let u = [coord(x), coord(y)];
            for j in 0..dim {
                let group = j / 4;
                let (axis, trig) = ((j / 2) % 2, j % 2);
                let phase = std::f64::consts::PI * (group + 1) as f64 * u[axis];
                let v = if trig == 0 { phase.sin() } else { phase.cos() };
                out.push(v as f32 as f64);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
    init: Init,
}

fn linear(out: &mut Vec<TensorSpec>, prefix: &str, fan_in: usize, fan_out: usize, bias: bool, frozen: bool) {
    let gain = if frozen { 2f64.sqrt() } else { 1.0 };
    out.push(TensorSpec {
        name: format!("{prefix}.weight"),
        shape: vec![fan_in, fan_out],
        frozen,
        init: Init::Scaled { fan_in, gain },
    });
    if bias {
        out.push(TensorSpec {
            name: format!("{prefix}.bias"),
            shape: vec![fan_out],
            frozen,
            // Zero biases would make the frozen stack positively homogeneous, and its
            // final layer norm would then erase patch brightness.
            init: if frozen { Init::Normal(FROZEN_BIAS_STD) } else { Init::Zeros },
        });
    }
}

fn norm(out: &mut Vec<TensorSpec>, prefix: &str, width: usize) {
    out.push(TensorSpec {
        name: format!("{prefix}.gain"),
        shape: vec![width],
        frozen: false,
        init: Init::Ones,
    });
    out.push(TensorSpec {
        name: format!("{prefix}.bias"),
        shape: vec![width],
        frozen: false,
        init: Init::Zeros,
    });
}

/// Every tensor a model with this config owns, in a fixed order.
pub fn tensor_specs(cfg: &ModelConfig) -> Vec<TensorSpec> {
    let (m, d, eh) = (cfg.feature_dim, cfg.slot_dim, cfg.encoder_hidden);
    let mut s = Vec::new();
    linear(&mut s, "enc.patch", cfg.patch_len(), eh, true, true);
    linear(&mut s, "enc.fc1", eh, eh, true, true);
    linear(&mut s, "enc.fc2", eh, m, true, true);

    linear(&mut s, "proj.fc1", m, m, true, false);
    linear(&mut s, "proj.fc2", m, m, true, false);
    norm(&mut s, "proj.norm", m);
    s.push(TensorSpec {
        name: "proj.pos".into(),
        shape: vec![4, m],
        frozen: false,
        init: Init::Scaled { fan_in: 4, gain: 0.5 },
    });

    norm(&mut s, "sa.norm_in", m);
    linear(&mut s, "sa.k", m, d, false, false);
    linear(&mut s, "sa.v", m, d, false, false);
    norm(&mut s, "sa.norm_slots", d);
    linear(&mut s, "sa.q", d, d, false, false);
    linear(&mut s, "sa.gru.ih", d, 3 * d, true, false);
    linear(&mut s, "sa.gru.hh", d, 3 * d, true, false);
    norm(&mut s, "sa.norm_mlp", d);
    linear(&mut s, "sa.mlp.fc1", d, cfg.sa_mlp_hidden, true, false);
    linear(&mut s, "sa.mlp.fc2", cfg.sa_mlp_hidden, d, true, false);
    s.push(TensorSpec {
        name: "sa.init".into(),
        shape: vec![cfg.num_slots, d],
        frozen: false,
        init: Init::Normal(1.0),
    });

    for l in 0..cfg.predictor_layers {
        let p = format!("pred.{l}");
        norm(&mut s, &format!("{p}.norm1"), d);
        for proj in ["q", "k", "v", "out"] {
            linear(&mut s, &format!("{p}.{proj}"), d, d, true, false);
        }
        norm(&mut s, &format!("{p}.norm2"), d);
        linear(&mut s, &format!("{p}.ff1"), d, cfg.predictor_ff, true, false);
        linear(&mut s, &format!("{p}.ff2"), cfg.predictor_ff, d, true, false);
    }

    s.push(TensorSpec {
        name: "dec.pos".into(),
        shape: vec![cfg.num_patches(), cfg.pos_dim],
        frozen: false,
        init: Init::Fourier {
            side: cfg.patches_per_side(),
        },
    });
    let hidden = cfg.decoder_hidden;
    linear(&mut s, "dec.fc1", d + cfg.pos_dim, hidden, true, false);
    for i in 0..cfg.decoder_layers - 2 {
        linear(&mut s, &format!("dec.hidden{i}"), hidden, hidden, true, false);
    }
    linear(&mut s, "dec.out", hidden, m + 1, true, false);
    s
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamCount {
    pub trainable: usize,
    pub frozen: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.trainable + self.frozen
    }
}

/// Named parameters of one model. The frozen encoder entries never change after
/// [`ModelWeights::init`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
    frozen: Vec<String>,
}

impl ModelWeights {
    /// Random initialization; all values are exactly representable as `f32`.
    ///
    /// Trainable tensors are drawn from `seed`. The frozen encoder plays the role of
    /// a fixed pretrained backbone, so it is drawn from [`ENCODER_SEED`] and is the
    /// same for every run with the same config.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut trainable_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut frozen_rng = ChaCha8Rng::seed_from_u64(ENCODER_SEED);
        let mut tensors = BTreeMap::new();
        let mut frozen = Vec::new();
        for spec in tensor_specs(config) {
            let n: usize = spec.shape.iter().product();
            let rng = if spec.frozen {
                &mut frozen_rng
            } else {
                &mut trainable_rng
            };
            let data: Vec<f64> = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Scaled { fan_in, gain } => {
                    let dist = Normal::new(0.0, gain / (fan_in as f64).sqrt()).expect("valid std");
                    (0..n).map(|_| dist.sample(rng) as f32 as f64).collect()
                }
                Init::Fourier { side } => fourier_grid(side, spec.shape[1]),
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("valid std");
                    (0..n).map(|_| dist.sample(rng) as f32 as f64).collect()
                }
            };
            if spec.frozen {
                frozen.push(spec.name.clone());
            }
            tensors.insert(spec.name, Tensor::new(spec.shape, data)?);
        }
        Ok(Self {
            config: config.clone(),
            tensors,
            frozen,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|f| f == name)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors
            .keys()
            .filter(|k| !self.is_frozen(k))
            .cloned()
            .collect()
    }

    pub fn frozen_names(&self) -> &[String] {
        &self.frozen
    }

    /// Replace a trainable tensor. Frozen entries and shape changes are rejected.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.is_frozen(name) {
            return Err(ModelError::Config(format!("{name} is frozen")));
        }
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| ModelError::Config(format!("unknown tensor {name}")))?;
        if slot.shape() != value.shape() {
            return Err(ModelError::Config(format!(
                "shape mismatch for {name}: {:?} vs {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Visit every trainable tensor's values in name order. Shapes cannot change.
    pub fn update_trainable(&mut self, mut f: impl FnMut(&str, &mut [f64])) {
        for (name, t) in self.tensors.iter_mut() {
            if !self.frozen.iter().any(|n| n == name) {
                f(name, t.data_mut());
            }
        }
    }

    /// Parameter totals from enumerating the weight map.
    pub fn param_count(&self) -> ParamCount {
        let mut c = ParamCount::default();
        for (name, t) in &self.tensors {
            if self.is_frozen(name) {
                c.frozen += t.numel();
            } else {
                c.trainable += t.numel();
            }
        }
        c
    }

    fn hash_where(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            if keep(name) {
                h.update(name.as_bytes());
                for v in t.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    /// SHA-256 over the frozen encoder tensors.
    pub fn frozen_hash(&self) -> String {
        self.hash_where(|n| self.is_frozen(n))
    }

    /// SHA-256 over every tensor.
    pub fn hash(&self) -> String {
        self.hash_where(|_| true)
    }

    /// Put every tensor on `tape`. Trainable entries become parameters when
    /// `trainable` is set; frozen entries are always constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable && !self.is_frozen(name) {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(t.rank() as u8);
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        buf
    }

    /// Parse a checkpoint and check it holds exactly the tensors `config` expects.
    pub fn from_bytes(bytes: &[u8], config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(ModelError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut found = HashMap::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| ModelError::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            if found.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(ModelError::Checkpoint(format!("duplicate tensor {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(ModelError::Checkpoint("trailing bytes".into()));
        }
        let specs = tensor_specs(config);
        if specs.len() != found.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                specs.len(),
                found.len()
            )));
        }
        let mut tensors = BTreeMap::new();
        let mut frozen = Vec::new();
        for spec in specs {
            let t = found
                .remove(&spec.name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {}", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "{}: shape {:?}, config expects {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            if spec.frozen {
                frozen.push(spec.name.clone());
            }
            tensors.insert(spec.name, t);
        }
        Ok(Self {
            config: config.clone(),
            tensors,
            frozen,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, config)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ModelError::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Tape handles for every tensor of a [`ModelWeights`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    /// Handles placed on a tape by the caller, e.g. when a gradient check owns the parameters.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("tensor {name} is not bound"))
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
