//! Training objectives and slot correspondence.
//!
//! Frame-level inputs are passed as flat slices ordered `(b, t)` with `t` fastest;
//! functions that need the video structure take `frames` (T) explicitly.

mod matching;

pub use matching::{assignment_cost, cosine_cost, hungarian, match_slots, MatchStrategy};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var, DEGENERATE_EPS};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("contrastive loss needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("slot {index} is degenerate (norm {norm:e})")]
    DegenerateSlot { index: usize, norm: f64 },
    #[error("invalid loss weights: {0}")]
    Weights(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

/// Added to self-similarities so the anchor drops out of its own denominator.
const SELF_MASK: f64 = -1e30;

/// Coefficients of `rec + alpha·contrast + beta·kd`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.2,
            tau: 0.1,
        }
    }
}

/// Distillation weights compared by the β sweep.
pub const BETA_GRID: [f64; 5] = [0.1, 0.2, 0.3, 0.5, 0.8];

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(LossError::Weights(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(LossError::Weights(format!(
                "alpha and beta must be non-negative, got {} and {}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    pub fn combine(&self, rec: f64, contrast: f64, kd: f64) -> f64 {
        rec + self.alpha * contrast + self.beta * kd
    }
}

fn same_len<A, B>(what: &str, a: &[A], b: &[B]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(LossError::Shape(format!(
            "{what}: {} student frames vs {} teacher frames",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Mean over frames of the summed squared error of each `P×m` block.
pub fn rec_loss(tape: &mut Tape, reconstructions: &[Var], targets: &[Var]) -> Result<Var> {
    same_len("rec_loss", reconstructions, targets)?;
    let mut total = None;
    for (&r, &f) in reconstructions.iter().zip(targets) {
        if tape.shape(r) != tape.shape(f) {
            return Err(LossError::Shape(format!(
                "reconstruction {:?} vs target {:?}",
                tape.shape(r),
                tape.shape(f)
            )));
        }
        let diff = tape.sub(r, f)?;
        let sq = tape.square(diff)?;
        let s = tape.sum(sq)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    let total = total.expect("nonempty");
    Ok(tape.mul_scalar(total, 1.0 / reconstructions.len() as f64)?)
}

/// Slot-slot contrastive loss over a mini-batch.
///
/// `slots` holds `B·T` frames of `N×d` slots ordered `(b, t)`. The anchor
/// `(b, t, n)` for `t < T−1` has positive `(b, t+1, n)`. The candidates in the
/// denominator are every other slot of frames `t` and `t+1` across the mini-batch.
/// The sum is divided by `B·T·N`.
pub fn slot_contrast_loss(tape: &mut Tape, slots: &[Var], frames: usize, tau: f64) -> Result<Var> {
    if frames < 2 {
        return Err(LossError::TooFewFrames(frames));
    }
    if slots.is_empty() || slots.len() % frames != 0 {
        return Err(LossError::Shape(format!("{} frames do not split into videos of {frames}", slots.len())));
    }
    let shape = tape.shape(slots[0]).to_vec();
    if shape.len() != 2 || slots.iter().any(|&s| tape.shape(s) != shape.as_slice()) {
        return Err(LossError::Shape("every frame needs the same N×d slot matrix".into()));
    }
    let n = shape[0];
    let videos = slots.len() / frames;
    let rows = videos * n;

    let all = tape.concat(slots, 0)?;
    check_rows(tape.value(all))?;
    let z = tape.normalize(all)?;
    let frame_rows = |tape: &mut Tape, t: usize| -> Result<Var> {
        let parts = (0..videos)
            .map(|b| {
                let lo = (b * frames + t) * n;
                Ok(tape.slice(z, 0, lo, lo + n)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(tape.concat(&parts, 0)?)
    };
    // Columns: frame t+1 (positives on the diagonal), then frame t (anchor masked).
    let mut mask = vec![0.0; rows * 2 * rows];
    let mut select = vec![0.0; rows * 2 * rows];
    for i in 0..rows {
        mask[i * 2 * rows + rows + i] = SELF_MASK;
        select[i * 2 * rows + i] = 1.0;
    }
    let mask = Tensor::new(vec![rows, 2 * rows], mask)?;
    let select = Tensor::new(vec![rows, 2 * rows], select)?;
    let mut total = None;
    for t in 0..frames - 1 {
        let anchors = frame_rows(tape, t)?;
        let next = frame_rows(tape, t + 1)?;
        let cands = tape.concat(&[next, anchors], 0)?;
        let ct = tape.transpose(cands)?;
        let sim = tape.matmul(anchors, ct)?;
        let logits = tape.mul_scalar(sim, 1.0 / tau)?;
        let m = tape.constant(mask.clone());
        let logits = tape.add(logits, m)?;
        let log_p = tape.log_softmax(logits, 1)?;
        let sel = tape.constant(select.clone());
        let picked = tape.mul(log_p, sel)?;
        let s = tape.sum(picked)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    let count = (slots.len() * n) as f64;
    Ok(tape.mul_scalar(total.expect("at least two frames"), -1.0 / count)?)
}

fn permuted_teachers(tape: &Tape, student: &[Var], teacher: &[Tensor], strategy: MatchStrategy) -> Result<Vec<Tensor>> {
    same_len("slot distillation", student, teacher)?;
    student
        .iter()
        .zip(teacher)
        .map(|(&s, t)| {
            let pi = match_slots(tape.value(s), t, strategy)?;
            Ok(t.select_rows(&pi)?)
        })
        .collect()
}

/// Cosine slot distillation: mean of `1 − cos(s^S_n, s^T_π(n))` over frames and slots.
/// Teacher slots are plain tensors, so no gradient reaches them.
pub fn slot_kd_loss(tape: &mut Tape, student: &[Var], teacher: &[Tensor], strategy: MatchStrategy) -> Result<Var> {
    let targets = permuted_teachers(tape, student, teacher, strategy)?;
    let mut total = None;
    let mut count = 0;
    for (&s, t) in student.iter().zip(targets) {
        count += t.rows();
        check_rows(tape.value(s))?;
        check_rows(&t)?;
        let t = tape.constant(t);
        let cos = tape.row_cosine(s, t)?;
        let c = tape.sum(cos)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, c)?,
            None => c,
        });
    }
    let mean = tape.mul_scalar(total.expect("nonempty"), -1.0 / count as f64)?;
    Ok(tape.add_scalar(mean, 1.0)?)
}

fn check_rows(t: &Tensor) -> Result<()> {
    for i in 0..t.rows() {
        let norm = t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm >= DEGENERATE_EPS) {
            return Err(LossError::DegenerateSlot { index: i, norm });
        }
    }
    Ok(())
}

/// Mean over frames and slots of `‖s^S_n − s^T_π(n)‖²`.
pub fn slot_kd_mse(tape: &mut Tape, student: &[Var], teacher: &[Tensor], strategy: MatchStrategy) -> Result<Var> {
    let targets = permuted_teachers(tape, student, teacher, strategy)?;
    let mut total = None;
    let mut count = 0;
    for (&s, t) in student.iter().zip(targets) {
        count += t.rows();
        let t = tape.constant(t);
        let diff = tape.sub(s, t)?;
        let sq = tape.square(diff)?;
        let c = tape.sum(sq)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, c)?,
            None => c,
        });
    }
    Ok(tape.mul_scalar(total.expect("nonempty"), 1.0 / count as f64)?)
}

/// Two-layer ReLU MLP mapping teacher-width features to student width.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    tensors: BTreeMap<String, Tensor>,
}

impl Adapter {
    pub const NAMES: [&'static str; 4] = ["adapter.fc1.weight", "adapter.fc1.bias", "adapter.fc2.weight", "adapter.fc2.bias"];

    /// Hidden width equals the student width.
    pub fn init(teacher_dim: usize, student_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |fan_in: usize, fan_out: usize| {
            let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid std");
            let data = (0..fan_in * fan_out).map(|_| dist.sample(&mut rng) as f32 as f64).collect();
            Tensor::new(vec![fan_in, fan_out], data).expect("shape matches")
        };
        let w1 = normal(teacher_dim, student_dim);
        let w2 = normal(student_dim, student_dim);
        let tensors = BTreeMap::from([
            (Self::NAMES[0].to_string(), w1),
            (Self::NAMES[1].to_string(), Tensor::zeros(vec![student_dim])),
            (Self::NAMES[2].to_string(), w2),
            (Self::NAMES[3].to_string(), Tensor::zeros(vec![student_dim])),
        ]);
        Self { tensors }
    }

    pub fn from_tensors(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Self {
        let tensors = Self::NAMES.iter().map(|n| n.to_string()).zip([w1, b1, w2, b2]).collect();
        Self { tensors }
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.tensors
    }

    /// Places the adapter on `tape` as trainable parameters, in [`Self::NAMES`] order.
    pub fn bind(&self, tape: &mut Tape) -> AdapterVars {
        let v = Self::NAMES.map(|n| tape.param(self.tensors[n].clone()));
        AdapterVars(v)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdapterVars(pub [Var; 4]);

impl AdapterVars {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let [w1, b1, w2, b2] = self.0;
        let h = tape.matmul(x, w1)?;
        let h = tape.add(h, b1)?;
        let h = tape.relu(h)?;
        let y = tape.matmul(h, w2)?;
        Ok(tape.add(y, b2)?)
    }
}

/// Mean squared error between student frames and the adapted teacher frames.
/// Used for both feature and reconstruction distillation.
pub fn adapted_mse(tape: &mut Tape, student: &[Var], teacher: &[Tensor], adapter: &AdapterVars) -> Result<Var> {
    same_len("adapted distillation", student, teacher)?;
    let mut total = None;
    let mut count = 0;
    for (&s, t) in student.iter().zip(teacher) {
        let t = tape.constant(t.clone());
        let a = adapter.apply(tape, t)?;
        if tape.shape(a) != tape.shape(s) {
            return Err(LossError::Shape(format!(
                "adapted teacher {:?} vs student {:?}",
                tape.shape(a),
                tape.shape(s)
            )));
        }
        count += tape.value(s).numel();
        let diff = tape.sub(s, a)?;
        let sq = tape.square(diff)?;
        let c = tape.sum(sq)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, c)?,
            None => c,
        });
    }
    Ok(tape.mul_scalar(total.expect("nonempty"), 1.0 / count as f64)?)
}

/// Feature distillation on encoder outputs.
pub fn feature_kd_loss(tape: &mut Tape, student: &[Var], teacher: &[Tensor], adapter: &AdapterVars) -> Result<Var> {
    adapted_mse(tape, student, teacher, adapter)
}

/// Distillation of decoder reconstructions.
pub fn reconstruction_kd_loss(
    tape: &mut Tape,
    student: &[Var],
    teacher: &[Tensor],
    adapter: &AdapterVars,
) -> Result<Var> {
    adapted_mse(tape, student, teacher, adapter)
}

/// `rec + alpha·contrast + beta·kd`; either optional term may be absent.
pub fn total_loss(tape: &mut Tape, rec: Var, contrast: Option<Var>, kd: Option<Var>, w: &LossWeights) -> Result<Var> {
    let mut total = rec;
    for (term, coef) in [(contrast, w.alpha), (kd, w.beta)] {
        if let Some(term) = term {
            let scaled = tape.mul_scalar(term, coef)?;
            total = tape.add(total, scaled)?;
        }
    }
    Ok(total)
}
