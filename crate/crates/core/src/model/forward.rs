use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Bound, ModelConfig, ModelError, ModelWeights, Result};
use crate::tensor::{Precision, Tape, Tensor, Var, DEGENERATE_EPS};

const LN_EPS: f64 = 1e-5;
/// Added to slot-attention weights before renormalizing over positions.
const ATTN_EPS: f64 = 1e-8;
/// Subtracted from pixel values before the frozen encoder.
pub const PIXEL_CENTER: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotKind {
    /// Before slot attention: the learned init at frame 0, the predictor output afterwards.
    Predicted,
    /// After slot attention.
    Corrected,
}

/// `N×d` slots of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotSet {
    pub slots: Tensor,
    pub kind: SlotKind,
}

/// Tape handles produced for one frame.
#[derive(Clone, Copy, Debug)]
pub struct FrameVars {
    pub predicted: Var,
    pub corrected: Var,
    /// Projected features `P×m` (the reconstruction target).
    pub features: Var,
    /// Final slot-attention map `P×N`.
    pub attention: Var,
    pub decoded: Option<Decoded>,
}

#[derive(Clone, Copy, Debug)]
pub struct Decoded {
    /// `P×m`
    pub reconstruction: Var,
    /// `P×N`
    pub alphas: Var,
}

/// Materialized outputs for one frame.
#[derive(Clone, Debug)]
pub struct FrameOutput {
    pub predicted: SlotSet,
    pub corrected: SlotSet,
    pub features: Tensor,
    pub reconstruction: Tensor,
    pub alphas: Tensor,
    pub attention: Tensor,
}

fn linear(tape: &mut Tape, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, b.var(&format!("{prefix}.weight")))?;
    Ok(match b.get(&format!("{prefix}.bias")) {
        Some(bias) => tape.add(y, bias)?,
        None => y,
    })
}

fn layer_norm(tape: &mut Tape, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let y = tape.layer_norm(x, LN_EPS)?;
    let y = tape.mul(y, b.var(&format!("{prefix}.gain")))?;
    Ok(tape.add(y, b.var(&format!("{prefix}.bias")))?)
}

/// Cut an `H×W×3` frame into `P` flattened patches (row-major patches, each `(dy, dx, c)`),
/// with pixel values shifted by `-PIXEL_CENTER`.
pub fn patchify(frame: &[f32], cfg: &ModelConfig) -> Result<Tensor> {
    let side = cfg.image_size;
    if frame.len() != side * side * 3 {
        return Err(ModelError::Input(format!(
            "frame has {} values, expected {side}x{side}x3",
            frame.len()
        )));
    }
    let (p, n) = (cfg.patch_size, cfg.patches_per_side());
    let mut data = Vec::with_capacity(side * side * 3);
    for py in 0..n {
        for px in 0..n {
            for dy in 0..p {
                let row = (py * p + dy) * side + px * p;
                data.extend(frame[row * 3..(row + p) * 3].iter().map(|&v| v as f64 - PIXEL_CENTER));
            }
        }
    }
    Ok(Tensor::new(vec![n * n, cfg.patch_len()], data)?)
}

/// Frozen part of the encoder: patchify, a ReLU MLP, then a fixed layer norm scaled
/// by `1/sqrt(P·m)` so every frame's features carry unit total energy.
/// Never carries gradients.
pub fn encode_frozen(tape: &mut Tape, b: &Bound, cfg: &ModelConfig, frame: &[f32]) -> Result<Var> {
    let patches = tape.constant(patchify(frame, cfg)?);
    let h = linear(tape, b, "enc.patch", patches)?;
    let h = tape.relu(h)?;
    let h = linear(tape, b, "enc.fc1", h)?;
    let h = tape.relu(h)?;
    let h = linear(tape, b, "enc.fc2", h)?;
    let h = tape.layer_norm(h, LN_EPS)?;
    Ok(tape.mul_scalar(h, cfg.feature_scale())?)
}

/// Patch-grid coordinates `[x, 1−x, y, 1−y]` in `[0, 1]`, one row per patch.
pub fn position_grid(cfg: &ModelConfig) -> Tensor {
    let n = cfg.patches_per_side();
    let coord = |i: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
    let mut data = Vec::with_capacity(n * n * 4);
    for y in 0..n {
        for x in 0..n {
            let (u, v) = (coord(x), coord(y));
            data.extend([u, 1.0 - u, v, 1.0 - v]);
        }
    }
    Tensor::new(vec![n * n, 4], data).expect("grid shape")
}

/// Trainable projection MLP and layer norm, plus a learned linear embedding of the
/// patch coordinates. The frozen features carry no position, so without it slots
/// could not tell where their object is.
pub fn project(tape: &mut Tape, b: &Bound, cfg: &ModelConfig, frozen: Var) -> Result<Var> {
    let unit = tape.mul_scalar(frozen, 1.0 / cfg.feature_scale())?;
    let h = linear(tape, b, "proj.fc1", unit)?;
    let h = tape.relu(h)?;
    let h = linear(tape, b, "proj.fc2", h)?;
    let h = layer_norm(tape, b, "proj.norm", h)?;
    let grid = tape.constant(position_grid(cfg));
    let pos = tape.matmul(grid, b.var("proj.pos"))?;
    Ok(tape.add(h, pos)?)
}

/// Full encoder: `H×W×3` frame to `P×m` features.
pub fn encode(tape: &mut Tape, b: &Bound, cfg: &ModelConfig, frame: &[f32]) -> Result<Var> {
    let f = encode_frozen(tape, b, cfg, frame)?;
    project(tape, b, cfg, f)
}

fn check_slots(tape: &Tape, slots: Var) -> Result<()> {
    let t = tape.value(slots);
    let d = *t.shape().last().unwrap_or(&1);
    for (i, row) in t.data().chunks(d.max(1)).enumerate() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < DEGENERATE_EPS {
            return Err(ModelError::DegenerateSlot { index: i, norm: n });
        }
    }
    Ok(())
}

/// Iterative slot attention. Returns the corrected slots `N×d` and the final
/// attention map `P×N` (softmax over slots at every position).
pub fn slot_attention(
    tape: &mut Tape,
    b: &Bound,
    cfg: &ModelConfig,
    init: Var,
    features: Var,
) -> Result<(Var, Var)> {
    if tape.value(features).data().iter().all(|&v| v == 0.0) {
        return Err(ModelError::DegenerateFeatures);
    }
    let d = cfg.slot_dim;
    let inputs = layer_norm(tape, b, "sa.norm_in", features)?;
    let k = tape.matmul(inputs, b.var("sa.k.weight"))?;
    let v = tape.matmul(inputs, b.var("sa.v.weight"))?;
    let kt = tape.transpose(k)?;

    let mut slots = init;
    let mut attn = None;
    for _ in 0..cfg.sa_iterations {
        let prev = slots;
        let s = layer_norm(tape, b, "sa.norm_slots", slots)?;
        let q = tape.matmul(s, b.var("sa.q.weight"))?;
        let logits = tape.matmul(q, kt)?;
        let logits = tape.mul_scalar(logits, 1.0 / (d as f64).sqrt())?;
        // Slots compete for every position.
        let a = tape.softmax(logits, 0)?;
        attn = Some(a);
        let a = tape.add_scalar(a, ATTN_EPS)?;
        let total = tape.sum_axis(a, 1, true)?;
        let weights = tape.div(a, total)?;
        let updates = tape.matmul(weights, v)?;
        slots = gru_cell(tape, b, d, updates, prev)?;
        let h = layer_norm(tape, b, "sa.norm_mlp", slots)?;
        let h = linear(tape, b, "sa.mlp.fc1", h)?;
        let h = tape.relu(h)?;
        let h = linear(tape, b, "sa.mlp.fc2", h)?;
        slots = tape.add(slots, h)?;
    }
    check_slots(tape, slots)?;
    let attn = tape.transpose(attn.expect("at least one iteration"))?;
    Ok((slots, attn))
}

/// GRU cell with gates ordered (reset, update, candidate).
fn gru_cell(tape: &mut Tape, b: &Bound, d: usize, x: Var, h: Var) -> Result<Var> {
    let gi = linear(tape, b, "sa.gru.ih", x)?;
    let gh = linear(tape, b, "sa.gru.hh", h)?;
    let (ir, iz, inn) = (tape.slice(gi, 1, 0, d)?, tape.slice(gi, 1, d, 2 * d)?, tape.slice(gi, 1, 2 * d, 3 * d)?);
    let (hr, hz, hn) = (tape.slice(gh, 1, 0, d)?, tape.slice(gh, 1, d, 2 * d)?, tape.slice(gh, 1, 2 * d, 3 * d)?);
    let r = tape.add(ir, hr)?;
    let r = tape.sigmoid(r)?;
    let z = tape.add(iz, hz)?;
    let z = tape.sigmoid(z)?;
    let rh = tape.mul(r, hn)?;
    let n = tape.add(inn, rh)?;
    let n = tape.tanh(n)?;
    // h' = n + z * (h - n)
    let diff = tape.sub(h, n)?;
    let zd = tape.mul(z, diff)?;
    Ok(tape.add(n, zd)?)
}

/// Transformer block(s) over the slots of one frame, giving the slots expected at
/// the next frame.
pub fn predict_next(tape: &mut Tape, b: &Bound, cfg: &ModelConfig, slots: Var) -> Result<Var> {
    let heads = cfg.predictor_heads;
    let dh = cfg.slot_dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut x = slots;
    for l in 0..cfg.predictor_layers {
        let p = format!("pred.{l}");
        let h = layer_norm(tape, b, &format!("{p}.norm1"), x)?;
        let q = linear(tape, b, &format!("{p}.q"), h)?;
        let k = linear(tape, b, &format!("{p}.k"), h)?;
        let v = linear(tape, b, &format!("{p}.v"), h)?;
        let mut outs = Vec::with_capacity(heads);
        for j in 0..heads {
            let (lo, hi) = (j * dh, (j + 1) * dh);
            let qh = tape.slice(q, 1, lo, hi)?;
            let kh = tape.slice(k, 1, lo, hi)?;
            let vh = tape.slice(v, 1, lo, hi)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.mul_scalar(s, scale)?;
            let a = tape.softmax(s, 1)?;
            outs.push(tape.matmul(a, vh)?);
        }
        let o = tape.concat(&outs, 1)?;
        let o = linear(tape, b, &format!("{p}.out"), o)?;
        x = tape.add(x, o)?;
        let h = layer_norm(tape, b, &format!("{p}.norm2"), x)?;
        let h = linear(tape, b, &format!("{p}.ff1"), h)?;
        let h = tape.relu(h)?;
        let h = linear(tape, b, &format!("{p}.ff2"), h)?;
        x = tape.add(x, h)?;
    }
    Ok(x)
}

/// Per-slot decoder output before alpha mixing: `N×P×(m+1)`, channel `m` is the alpha logit.
pub fn decode_slots(tape: &mut Tape, b: &Bound, cfg: &ModelConfig, slots: Var) -> Result<Var> {
    let (n, d) = (tape.shape(slots)[0], cfg.slot_dim);
    let (p, hidden) = (cfg.num_patches(), cfg.decoder_hidden);
    // First layer on the concatenation [slot, pos]: split the weight rows so the slot
    // and positional halves are multiplied once and combined by broadcasting.
    let w1 = b.var("dec.fc1.weight");
    let w_slot = tape.slice(w1, 0, 0, d)?;
    let w_pos = tape.slice(w1, 0, d, d + cfg.pos_dim)?;
    let hs = tape.matmul(slots, w_slot)?;
    let hp = tape.matmul(b.var("dec.pos"), w_pos)?;
    let hp = tape.add(hp, b.var("dec.fc1.bias"))?;
    let hs = tape.reshape(hs, &[n, 1, hidden])?;
    let hp = tape.reshape(hp, &[1, p, hidden])?;
    let h = tape.add(hs, hp)?;
    let mut h = tape.reshape(h, &[n * p, hidden])?;
    h = tape.relu(h)?;
    for i in 0..cfg.decoder_layers - 2 {
        h = linear(tape, b, &format!("dec.hidden{i}"), h)?;
        h = tape.relu(h)?;
    }
    let out = linear(tape, b, "dec.out", h)?;
    Ok(tape.reshape(out, &[n, p, cfg.feature_dim + 1])?)
}

/// Spatial-broadcast decoding of `N×d` slots into a `P×m` reconstruction and
/// `P×N` alpha masks.
pub fn decode(tape: &mut Tape, b: &Bound, cfg: &ModelConfig, slots: Var) -> Result<Decoded> {
    let (n, m, p) = (tape.shape(slots)[0], cfg.feature_dim, cfg.num_patches());
    let out = decode_slots(tape, b, cfg, slots)?;
    // Features are decoded at unit scale and brought to the target scale here.
    let feats = tape.slice(out, 2, 0, m)?;
    let feats = tape.mul_scalar(feats, cfg.feature_scale())?;
    let logits = tape.slice(out, 2, m, m + 1)?;
    let logits = tape.reshape(logits, &[n, p])?;
    let alphas = tape.softmax(logits, 0)?;
    let a3 = tape.reshape(alphas, &[n, p, 1])?;
    let mixed = tape.mul(feats, a3)?;
    let reconstruction = tape.sum_axis(mixed, 0, false)?;
    let alphas = tape.transpose(alphas)?;
    Ok(Decoded {
        reconstruction,
        alphas,
    })
}

/// Per-patch argmax of `P×N` alphas, upsampled to a `side×side` label image.
/// Ties go to the lower slot index.
pub fn masks_from_alphas(alphas: &Tensor, patch_size: usize, side: usize) -> Result<Vec<u16>> {
    let per_side = side / patch_size.max(1);
    let (p, n) = match alphas.shape() {
        &[p, n] => (p, n),
        _ => (0, 0),
    };
    if n == 0 || per_side * patch_size != side || p != per_side * per_side {
        return Err(ModelError::Input(format!(
            "alphas {:?} do not tile a {side}x{side} frame with patch {patch_size}",
            alphas.shape()
        )));
    }
    let labels: Vec<u16> = (0..p)
        .map(|i| {
            let row = alphas.row(i);
            let mut best = 0;
            for j in 1..n {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best as u16
        })
        .collect();
    let mut out = vec![0u16; side * side];
    for y in 0..side {
        for x in 0..side {
            out[y * side + x] = labels[(y / patch_size) * per_side + x / patch_size];
        }
    }
    Ok(out)
}

/// Gaussian noise for the slot initialization.
pub fn slot_noise(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let n = cfg.num_slots * cfg.slot_dim;
    let data = if cfg.slot_noise > 0.0 {
        let dist = Normal::new(0.0, cfg.slot_noise).expect("valid std");
        (0..n).map(|_| dist.sample(rng)).collect()
    } else {
        vec![0.0; n]
    };
    Tensor::new(vec![cfg.num_slots, cfg.slot_dim], data).expect("shape matches")
}

/// Run the slot pipeline over a video given the frozen features of every frame.
///
/// Frame 0 starts from the learned slot init plus `noise`; later frames start from
/// the predictor applied to the previous corrected slots, so slot index `n` refers
/// to the same slot throughout.
pub fn forward_video_vars(
    tape: &mut Tape,
    b: &Bound,
    cfg: &ModelConfig,
    frozen: &[Var],
    noise: &Tensor,
    with_decoder: bool,
) -> Result<Vec<FrameVars>> {
    let noise = tape.constant(noise.clone());
    let mut predicted = tape.add(b.var("sa.init"), noise)?;
    let mut out = Vec::with_capacity(frozen.len());
    for (t, &f) in frozen.iter().enumerate() {
        if t > 0 {
            let prev: &FrameVars = &out[t - 1];
            predicted = predict_next(tape, b, cfg, prev.corrected)?;
        }
        let features = project(tape, b, cfg, f)?;
        let (corrected, attention) = slot_attention(tape, b, cfg, predicted, features)?;
        let decoded = if with_decoder {
            Some(decode(tape, b, cfg, corrected)?)
        } else {
            None
        };
        out.push(FrameVars {
            predicted,
            corrected,
            features,
            attention,
            decoded,
        });
    }
    Ok(out)
}

/// Inference over one video. Deterministic in `(weights, frames, noise_seed)`.
pub fn forward_video(
    weights: &ModelWeights,
    frames: &[&[f32]],
    noise_seed: u64,
    precision: Precision,
) -> Result<Vec<FrameOutput>> {
    let cfg = weights.config();
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = slot_noise(cfg, &mut rng);
    let mut tape = Tape::new(precision);
    let b = weights.bind(&mut tape, false);
    let frozen = frames
        .iter()
        .map(|f| encode_frozen(&mut tape, &b, cfg, f))
        .collect::<Result<Vec<_>>>()?;
    let vars = forward_video_vars(&mut tape, &b, cfg, &frozen, &noise, true)?;
    Ok(vars
        .iter()
        .map(|fv| {
            let dec = fv.decoded.expect("decoder enabled");
            FrameOutput {
                predicted: SlotSet {
                    slots: tape.value(fv.predicted).clone(),
                    kind: SlotKind::Predicted,
                },
                corrected: SlotSet {
                    slots: tape.value(fv.corrected).clone(),
                    kind: SlotKind::Corrected,
                },
                features: tape.value(fv.features).clone(),
                reconstruction: tape.value(dec.reconstruction).clone(),
                alphas: tape.value(dec.alphas).clone(),
                attention: tape.value(fv.attention).clone(),
            }
        })
        .collect())
}
