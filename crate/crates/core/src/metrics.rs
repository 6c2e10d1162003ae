//! Foreground ARI and mean best overlap, per frame and per video.
//!
//! Masks are flat label slices; ground-truth label 0 is background. A video is a
//! `T·H·W` slice with time outermost.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("prediction has {pred} labels, ground truth has {gt}")]
    ShapeMismatch { pred: usize, gt: usize },
    #[error("{len} labels do not split into {frames} frames")]
    Frames { len: usize, frames: usize },
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

/// Which side of the overlap table mBO averages over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MboOrientation {
    /// For every ground-truth object, the best IoU over predicted masks.
    #[default]
    PerGroundTruth,
    /// For every predicted mask, the best IoU over ground-truth objects.
    PerPrediction,
}

fn check(pred: &[u16], gt: &[u16]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(MetricError::ShapeMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    Ok(())
}

fn pairs(n: u64) -> f64 {
    (n as f64) * (n.saturating_sub(1) as f64) / 2.0
}

/// Adjusted Rand index over pixels whose ground-truth label is not background.
///
/// `None` when there is no foreground. When the index is degenerate (both sides
/// a single cluster, or every pixel its own cluster) the value is 1.
pub fn fg_ari(pred: &[u16], gt: &[u16]) -> Result<Option<f64>> {
    check(pred, gt)?;
    let mut table: BTreeMap<(u16, u16), u64> = BTreeMap::new();
    let mut rows: BTreeMap<u16, u64> = BTreeMap::new();
    let mut cols: BTreeMap<u16, u64> = BTreeMap::new();
    let mut n = 0u64;
    for (&p, &g) in pred.iter().zip(gt) {
        if g == 0 {
            continue;
        }
        *table.entry((g, p)).or_default() += 1;
        *rows.entry(g).or_default() += 1;
        *cols.entry(p).or_default() += 1;
        n += 1;
    }
    if n == 0 {
        return Ok(None);
    }
    let index: f64 = table.values().map(|&c| pairs(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| pairs(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| pairs(c)).sum();
    let total = pairs(n);
    if total == 0.0 {
        return Ok(Some(1.0));
    }
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    let denom = max_index - expected;
    if denom == 0.0 {
        return Ok(Some(1.0));
    }
    Ok(Some((index - expected) / denom))
}

/// Mean best overlap. `None` when there is no ground-truth object (or, in the
/// per-prediction orientation, no prediction at all).
pub fn m_bo(pred: &[u16], gt: &[u16], orientation: MboOrientation) -> Result<Option<f64>> {
    check(pred, gt)?;
    let mut inter: BTreeMap<(u16, u16), u64> = BTreeMap::new();
    let mut gt_area: BTreeMap<u16, u64> = BTreeMap::new();
    let mut pred_area: BTreeMap<u16, u64> = BTreeMap::new();
    for (&p, &g) in pred.iter().zip(gt) {
        *pred_area.entry(p).or_default() += 1;
        if g != 0 {
            *gt_area.entry(g).or_default() += 1;
            *inter.entry((g, p)).or_default() += 1;
        }
    }
    if gt_area.is_empty() {
        return Ok(None);
    }
    let iou = |g: u16, p: u16| {
        let i = inter.get(&(g, p)).copied().unwrap_or(0);
        i as f64 / (gt_area[&g] + pred_area[&p] - i) as f64
    };
    let best: Vec<f64> = match orientation {
        MboOrientation::PerGroundTruth => gt_area
            .keys()
            .map(|&g| pred_area.keys().map(|&p| iou(g, p)).fold(0.0, f64::max))
            .collect(),
        MboOrientation::PerPrediction => pred_area
            .keys()
            .map(|&p| gt_area.keys().map(|&g| iou(g, p)).fold(0.0, f64::max))
            .collect(),
    };
    if best.is_empty() {
        return Ok(None);
    }
    Ok(Some(best.iter().sum::<f64>() / best.len() as f64))
}

/// Metric evaluated once per frame and averaged over frames where it is defined.
pub fn image_level<F>(metric: F, pred: &[u16], gt: &[u16], frames: usize) -> Result<Option<f64>>
where
    F: Fn(&[u16], &[u16]) -> Result<Option<f64>>,
{
    check(pred, gt)?;
    if frames == 0 || pred.len() % frames != 0 {
        return Err(MetricError::Frames {
            len: pred.len(),
            frames,
        });
    }
    let size = pred.len() / frames;
    let mut values = Vec::with_capacity(frames);
    for (p, g) in pred.chunks(size.max(1)).zip(gt.chunks(size.max(1))) {
        if let Some(v) = metric(p, g)? {
            values.push(v);
        }
    }
    Ok(mean(&values))
}

/// Metric evaluated once over all `T·H·W` pixels of the video.
pub fn video_level<F>(metric: F, pred: &[u16], gt: &[u16]) -> Result<Option<f64>>
where
    F: Fn(&[u16], &[u16]) -> Result<Option<f64>>,
{
    metric(pred, gt)
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Sample standard deviation (divides by `n − 1`); 0 for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = values.iter().sum::<f64>() / values.len() as f64;
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

/// The four headline numbers, each averaged over videos where it is defined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub image_fg_ari: f64,
    pub image_mbo: f64,
    pub video_fg_ari: f64,
    pub video_mbo: f64,
}

impl Scores {
    pub const NAMES: [(&'static str, &'static str); 4] = [
        ("image", "fg_ari"),
        ("image", "mbo"),
        ("video", "fg_ari"),
        ("video", "mbo"),
    ];

    pub fn values(&self) -> [f64; 4] {
        [self.image_fg_ari, self.image_mbo, self.video_fg_ari, self.video_mbo]
    }

    fn from_values(v: [f64; 4]) -> Self {
        Self {
            image_fg_ari: v[0],
            image_mbo: v[1],
            video_fg_ari: v[2],
            video_mbo: v[3],
        }
    }
}

/// Scores of a set of videos. `preds[i]` and `gts[i]` are `T·H·W` label slices.
/// Videos are evaluated in parallel on the current rayon pool.
pub fn score_videos(
    preds: &[Vec<u16>],
    gts: &[&[u16]],
    frames: usize,
    orientation: MboOrientation,
) -> Result<Scores> {
    if preds.len() != gts.len() {
        return Err(MetricError::ShapeMismatch {
            pred: preds.len(),
            gt: gts.len(),
        });
    }
    let mbo = |p: &[u16], g: &[u16]| m_bo(p, g, orientation);
    let per_video: Vec<[Option<f64>; 4]> = preds
        .par_iter()
        .zip(gts.par_iter())
        .map(|(p, g)| {
            Ok([
                image_level(fg_ari, p, g, frames)?,
                image_level(mbo, p, g, frames)?,
                video_level(fg_ari, p, g)?,
                video_level(mbo, p, g)?,
            ])
        })
        .collect::<Result<_>>()?;
    let mut out = [0.0; 4];
    for (k, slot) in out.iter_mut().enumerate() {
        let vals: Vec<f64> = per_video.iter().filter_map(|v| v[k]).collect();
        *slot = mean(&vals).unwrap_or(0.0);
    }
    Ok(Scores::from_values(out))
}

/// Per-seed scores with mean and sample standard deviation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_seed: Vec<(u64, Scores)>,
}

impl EvalReport {
    pub fn mean(&self) -> Scores {
        let n = self.per_seed.len().max(1) as f64;
        let mut acc = [0.0; 4];
        for (_, s) in &self.per_seed {
            for (a, v) in acc.iter_mut().zip(s.values()) {
                *a += v;
            }
        }
        Scores::from_values(acc.map(|a| a / n))
    }

    pub fn std(&self) -> Scores {
        let mut out = [0.0; 4];
        for (k, o) in out.iter_mut().enumerate() {
            let vals: Vec<f64> = self.per_seed.iter().map(|(_, s)| s.values()[k]).collect();
            *o = sample_std(&vals);
        }
        Scores::from_values(out)
    }

    /// CSV with columns `level,metric,seed,value`, then `mean` and `std` rows.
    pub fn to_csv(&self, config_hash: &str) -> String {
        let mut s = format!("# config_hash={config_hash}\nlevel,metric,seed,value\n");
        let mut rows: Vec<(String, Scores)> = self.per_seed.iter().map(|(seed, sc)| (seed.to_string(), *sc)).collect();
        rows.push(("mean".into(), self.mean()));
        rows.push(("std".into(), self.std()));
        for (k, (level, metric)) in Scores::NAMES.iter().enumerate() {
            for (seed, sc) in &rows {
                writeln!(s, "{level},{metric},{seed},{}", sc.values()[k]).expect("write to string");
            }
        }
        s
    }
}
