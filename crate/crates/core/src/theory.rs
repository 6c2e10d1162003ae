//! Empirical check that cosine slot distillation bounds the teacher-student
//! decoding discrepancy through a Lipschitz decoder.
//!
//! For slots `a`, `b` of common norm `r` with `c = 1 − cos(a, b)`,
//! `‖a − b‖² = 2r²c`, so any `K_f`-Lipschitz decoder `f` satisfies
//! `‖f(a) − f(b)‖² ≤ 2·K_f²·r²·c`.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelWeights;
use crate::tensor::{matmul_plain, Tensor, DEGENERATE_EPS};

/// Relative inflation applied to every power-iteration estimate.
pub const SAFETY_INFLATION: f64 = 1e-6;
pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_ITERS: usize = 1000;

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("layer {index}: {msg}")]
    Layer { index: usize, msg: String },
    #[error("{teacher} teacher slots vs {student} student slots")]
    Count { teacher: usize, student: usize },
    #[error("pair {pair}: slot width {got}, decoder expects {want}")]
    Width { pair: usize, got: usize, want: usize },
    #[error("pair {pair}: degenerate slot (norm {norm:e})")]
    DegenerateSlot { pair: usize, norm: f64 },
    #[error("decoder weights: {0}")]
    Weights(String),
}

pub type Result<T, E = TheoryError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralNorm {
    /// Power-iteration estimate of the largest singular value.
    pub sigma: f64,
    /// `sigma · (1 + SAFETY_INFLATION)`.
    pub upper: f64,
    pub iterations: usize,
    /// `‖WᵀW v − σ² v‖` at the final unit vector `v`.
    pub residual: f64,
}

/// Largest singular value by power iteration on `WᵀW`, stopping when the relative
/// change in `σ` drops below `tol` or after `iters` rounds.
pub fn spectral_norm(w: &Tensor, iters: usize, tol: f64) -> SpectralNorm {
    let (rows, cols) = match w.shape() {
        &[r, c] => (r, c),
        &[c] => (1, c),
        _ => (1, w.numel()),
    };
    if w.data().iter().all(|&x| x == 0.0) || cols == 0 {
        return SpectralNorm {
            sigma: 0.0,
            upper: 0.0,
            iterations: 0,
            residual: 0.0,
        };
    }
    let a = w.data();
    let apply = |v: &[f64]| -> Vec<f64> {
        // WᵀW v
        let mut wv = vec![0.0; rows];
        for i in 0..rows {
            wv[i] = (0..cols).map(|j| a[i * cols + j] * v[j]).sum();
        }
        let mut out = vec![0.0; cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j] += a[i * cols + j] * wv[i];
            }
        }
        out
    };
    let unit = |v: Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<_>>()
    };
    // Deterministic start with distinct entries.
    let mut v = unit((0..cols).map(|j| 1.0 + j as f64 / cols as f64).collect());
    let mut sigma = 0.0;
    let mut iterations = 0;
    for k in 1..=iters.max(1) {
        iterations = k;
        let av = apply(&v);
        let rayleigh: f64 = av.iter().zip(&v).map(|(x, y)| x * y).sum();
        let next = rayleigh.max(0.0).sqrt();
        let norm = av.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // Start vector in the null space; fall back to a basis sweep.
            v = unit((0..cols).map(|j| if j == k % cols { 1.0 } else { 0.0 }).collect());
            continue;
        }
        let done = sigma > 0.0 && (next - sigma).abs() / next < tol;
        sigma = next;
        v = av.into_iter().map(|x| x / norm).collect();
        if done {
            break;
        }
    }
    let av = apply(&v);
    let rayleigh: f64 = av.iter().zip(&v).map(|(x, y)| x * y).sum();
    sigma = sigma.max(rayleigh.max(0.0).sqrt());
    let residual = av
        .iter()
        .zip(&v)
        .map(|(x, y)| (x - rayleigh * y).powi(2))
        .sum::<f64>()
        .sqrt();
    SpectralNorm {
        sigma,
        upper: sigma * (1.0 + SAFETY_INFLATION),
        iterations,
        residual,
    }
}

/// One stage of a feed-forward map, as far as its Lipschitz constant is concerned.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// `x ↦ x W` (+ any constant); factor `σ_max(W)`.
    Linear(Tensor),
    /// Elementwise ReLU; factor 1.
    Relu,
    /// Copies the input to `copies` positions (adding position-dependent
    /// constants); factor `√copies`.
    Broadcast { copies: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LipschitzEstimate {
    /// Per-layer factor from the raw estimates.
    pub factors: Vec<f64>,
    /// Product of raw factors.
    pub k_f: f64,
    /// Product with every spectral norm inflated; used in the bound.
    pub k_f_upper: f64,
    /// Power-iteration residual for each linear layer (0 for other kinds).
    pub residuals: Vec<f64>,
}

pub fn lipschitz_upper_bound(layers: &[Layer]) -> Result<LipschitzEstimate> {
    let mut est = LipschitzEstimate {
        factors: Vec::with_capacity(layers.len()),
        k_f: 1.0,
        k_f_upper: 1.0,
        residuals: Vec::with_capacity(layers.len()),
    };
    for (index, layer) in layers.iter().enumerate() {
        let (raw, upper, residual) = match layer {
            Layer::Linear(w) => {
                if w.rank() != 2 {
                    return Err(TheoryError::Layer {
                        index,
                        msg: format!("linear weight must be a matrix, got shape {:?}", w.shape()),
                    });
                }
                let s = spectral_norm(w, DEFAULT_ITERS, DEFAULT_TOL);
                (s.sigma, s.upper, s.residual)
            }
            Layer::Relu => (1.0, 1.0, 0.0),
            Layer::Broadcast { copies } => {
                let f = (*copies as f64).sqrt();
                (f, f, 0.0)
            }
        };
        est.factors.push(raw);
        est.residuals.push(residual);
        est.k_f *= raw;
        est.k_f_upper *= upper;
    }
    Ok(est)
}

/// The decoder applied to a single slot: broadcast over positions, ReLU MLP,
/// `P×(m+1)` output including the alpha logit, no mixing across slots.
#[derive(Clone, Debug)]
pub struct SlotDecoder {
    slot_weight: Tensor,
    /// Positional contribution to the first layer, bias included: `P×H`.
    position_bias: Tensor,
    hidden: Vec<(Tensor, Tensor)>,
    out: (Tensor, Tensor),
}

impl SlotDecoder {
    pub fn from_weights(w: &ModelWeights) -> Result<Self> {
        let cfg = w.config();
        let get = |name: &str| {
            w.get(name)
                .cloned()
                .ok_or_else(|| TheoryError::Weights(format!("missing {name}")))
        };
        let fc1 = get("dec.fc1.weight")?;
        let d = cfg.slot_dim;
        let hidden = cfg.decoder_hidden;
        let slot_weight = Tensor::new(vec![d, hidden], fc1.data()[..d * hidden].to_vec())
            .map_err(|e| TheoryError::Weights(e.to_string()))?;
        let pos_weight = Tensor::new(vec![cfg.pos_dim, hidden], fc1.data()[d * hidden..].to_vec())
            .map_err(|e| TheoryError::Weights(e.to_string()))?;
        let mut position_bias =
            matmul_plain(&get("dec.pos")?, &pos_weight).map_err(|e| TheoryError::Weights(e.to_string()))?;
        let b1 = get("dec.fc1.bias")?;
        for row in position_bias.data_mut().chunks_mut(hidden) {
            for (x, b) in row.iter_mut().zip(b1.data()) {
                *x += b;
            }
        }
        let hidden_layers = (0..cfg.decoder_layers - 2)
            .map(|i| Ok((get(&format!("dec.hidden{i}.weight"))?, get(&format!("dec.hidden{i}.bias"))?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            slot_weight,
            position_bias,
            hidden: hidden_layers,
            out: (get("dec.out.weight")?, get("dec.out.bias")?),
        })
    }

    pub fn slot_dim(&self) -> usize {
        self.slot_weight.shape()[0]
    }

    pub fn positions(&self) -> usize {
        self.position_bias.shape()[0]
    }

    pub fn layers(&self) -> Vec<Layer> {
        let mut layers = vec![
            Layer::Linear(self.slot_weight.clone()),
            Layer::Broadcast {
                copies: self.positions(),
            },
            Layer::Relu,
        ];
        for (w, _) in &self.hidden {
            layers.push(Layer::Linear(w.clone()));
            layers.push(Layer::Relu);
        }
        layers.push(Layer::Linear(self.out.0.clone()));
        layers
    }

    /// `f(s)`: the flattened `P×(m+1)` per-slot decoder output.
    pub fn apply(&self, slot: &[f64]) -> Vec<f64> {
        let s = Tensor::new(vec![1, slot.len()], slot.to_vec()).expect("row vector");
        let hs = matmul_plain(&s, &self.slot_weight).expect("slot width checked by caller");
        let width = hs.numel();
        let mut h = self.position_bias.clone();
        for row in h.data_mut().chunks_mut(width) {
            for (x, a) in row.iter_mut().zip(hs.data()) {
                *x = (*x + a).max(0.0);
            }
        }
        for (w, b) in &self.hidden {
            h = affine(&h, w, b);
            for x in h.data_mut() {
                *x = x.max(0.0);
            }
        }
        affine(&h, &self.out.0, &self.out.1).into_data()
    }
}

fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut y = matmul_plain(x, w).expect("decoder shapes are validated on load");
    let n = b.numel();
    for row in y.data_mut().chunks_mut(n) {
        for (v, bv) in row.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    y
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMode {
    /// Rescale each pair to the geometric mean of its norms before decoding.
    #[default]
    Equalized,
    /// Decode the slots as given; the bound is reported but not guaranteed.
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundRow {
    pub pair: usize,
    pub c: f64,
    pub lhs: f64,
    pub r: f64,
    pub k_f: f64,
    pub bound: f64,
    pub slack: f64,
    /// `|‖s^T‖ − ‖s^S‖|` of the slots as given.
    pub norm_gap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    pub mode: BoundMode,
    pub lipschitz: LipschitzEstimate,
    pub rows: Vec<BoundRow>,
}

impl BoundReport {
    pub fn violations(&self) -> usize {
        self.rows.iter().filter(|r| r.slack < 0.0).count()
    }

    pub fn min_slack(&self) -> f64 {
        self.rows.iter().map(|r| r.slack).fold(f64::INFINITY, f64::min)
    }

    pub fn mean_c(&self) -> f64 {
        self.rows.iter().map(|r| r.c).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn mean_lhs(&self) -> f64 {
        self.rows.iter().map(|r| r.lhs).sum::<f64>() / self.rows.len().max(1) as f64
    }

    /// Columns `pair_id,c,lhs,r,K_f,bound,slack,norm_gap` and a trailing summary line.
    pub fn to_csv(&self, config_hash: &str) -> String {
        let mut s = format!("# config_hash={config_hash}\npair_id,c,lhs,r,K_f,bound,slack,norm_gap\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.pair, r.c, r.lhs, r.r, r.k_f, r.bound, r.slack, r.norm_gap
            )
            .expect("write to string");
        }
        let mode = match self.mode {
            BoundMode::Equalized => "equalized",
            BoundMode::Raw => "raw",
        };
        writeln!(
            s,
            "# summary mode={mode} pairs={} violations={} min_slack={} K_f={} K_f_raw={}",
            self.rows.len(),
            self.violations(),
            self.min_slack(),
            self.lipschitz.k_f_upper,
            self.lipschitz.k_f
        )
        .expect("write to string");
        s
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Check the bound on every `(teacher[i], student[i])` pair.
///
/// `c` is computed from the decoded vectors themselves as `‖a − b‖² / (2r²)`, which
/// equals `1 − cos(a, b)` when both have norm `r`.
pub fn verify_theorem(
    teacher: &[Vec<f64>],
    student: &[Vec<f64>],
    decoder: &SlotDecoder,
    mode: BoundMode,
) -> Result<BoundReport> {
    if teacher.len() != student.len() {
        return Err(TheoryError::Count {
            teacher: teacher.len(),
            student: student.len(),
        });
    }
    let lipschitz = lipschitz_upper_bound(&decoder.layers())?;
    let k = lipschitz.k_f_upper;
    let d = decoder.slot_dim();
    let rows = teacher
        .par_iter()
        .zip(student.par_iter())
        .enumerate()
        .map(|(pair, (t, s))| {
            for v in [t, s] {
                if v.len() != d {
                    return Err(TheoryError::Width {
                        pair,
                        got: v.len(),
                        want: d,
                    });
                }
            }
            let (nt, ns) = (norm(t), norm(s));
            for n in [nt, ns] {
                if !(n >= DEGENERATE_EPS) {
                    return Err(TheoryError::DegenerateSlot { pair, norm: n });
                }
            }
            let r = (nt * ns).sqrt();
            let (a, b): (Vec<f64>, Vec<f64>) = match mode {
                BoundMode::Equalized => (
                    t.iter().map(|x| x / nt * r).collect(),
                    s.iter().map(|x| x / ns * r).collect(),
                ),
                BoundMode::Raw => (t.clone(), s.clone()),
            };
            let c = match mode {
                BoundMode::Equalized => sq_dist(&a, &b) / (2.0 * r * r),
                BoundMode::Raw => {
                    let dot: f64 = t.iter().zip(s).map(|(x, y)| x * y).sum();
                    1.0 - dot / (nt * ns)
                }
            };
            let lhs = sq_dist(&decoder.apply(&a), &decoder.apply(&b));
            let bound = 2.0 * k * k * r * r * c;
            Ok(BoundRow {
                pair,
                c,
                lhs,
                r,
                k_f: k,
                bound,
                slack: bound - lhs,
                norm_gap: (nt - ns).abs(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BoundReport { mode, lipschitz, rows })
}
