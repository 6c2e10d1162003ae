//! Mask prediction and seed-averaged scoring of a trained model.

use rayon::prelude::*;
use thiserror::Error;

use crate::datagen::VideoBatch;
use crate::losses::{match_slots, LossError, MatchStrategy};
use crate::metrics::{score_videos, EvalReport, MboOrientation, MetricError, Scores};
use crate::model::{forward_video, masks_from_alphas, ModelError, ModelWeights};
use crate::tensor::Precision;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("data does not fit the model: {0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Slot-noise seed for one video under one evaluation seed.
pub fn video_noise_seed(seed: u64, video: usize) -> u64 {
    seed ^ (video as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Predicted `T·H·W` slot labels for every video.
pub fn predict_masks(weights: &ModelWeights, data: &VideoBatch, seed: u64) -> Result<Vec<Vec<u16>>> {
    let cfg = weights.config();
    if data.height != cfg.image_size || data.width != cfg.image_size {
        return Err(EvalError::Data(format!(
            "frames are {}x{}, model expects {}",
            data.height, data.width, cfg.image_size
        )));
    }
    (0..data.batch)
        .into_par_iter()
        .map(|b| {
            let out = forward_video(weights, &data.video_frames(b), video_noise_seed(seed, b), Precision::Single)?;
            let mut labels = Vec::with_capacity(data.frames * data.height * data.width);
            for f in &out {
                labels.extend(masks_from_alphas(&f.alphas, cfg.patch_size, cfg.image_size)?);
            }
            Ok(labels)
        })
        .collect()
}

/// Scores of `preds` against the ground truth of `data`.
pub fn score(preds: &[Vec<u16>], data: &VideoBatch, orientation: MboOrientation) -> Result<Scores> {
    let gts: Vec<&[u16]> = (0..data.batch).map(|b| data.video_masks(b)).collect();
    Ok(score_videos(preds, &gts, data.frames, orientation)?)
}

/// One [`Scores`] row per evaluation seed.
pub fn evaluate(
    weights: &ModelWeights,
    data: &VideoBatch,
    seeds: &[u64],
    orientation: MboOrientation,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for &seed in seeds {
        let preds = predict_masks(weights, data, seed)?;
        report.per_seed.push((seed, score(&preds, data, orientation)?));
    }
    Ok(report)
}

/// Scores obtained by predicting the ground truth itself.
pub fn evaluate_oracle(data: &VideoBatch, seeds: &[u64], orientation: MboOrientation) -> Result<EvalReport> {
    let preds: Vec<Vec<u16>> = (0..data.batch).map(|b| data.video_masks(b).to_vec()).collect();
    let scores = score(&preds, data, orientation)?;
    Ok(EvalReport {
        per_seed: seeds.iter().map(|&s| (s, scores)).collect(),
    })
}

/// Up to `count` corrected `(teacher, student)` slot pairs, in `(video, frame, slot)`
/// order. Both models see the same slot noise; slots are paired by `strategy`.
pub fn matched_slot_pairs(
    teacher: &ModelWeights,
    student: &ModelWeights,
    data: &VideoBatch,
    seed: u64,
    count: usize,
    strategy: MatchStrategy,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let (tc, sc) = (teacher.config(), student.config());
    if tc.num_slots != sc.num_slots || tc.slot_dim != sc.slot_dim {
        return Err(EvalError::Data(format!(
            "teacher has {} slots of width {}, student has {} of width {}",
            tc.num_slots, tc.slot_dim, sc.num_slots, sc.slot_dim
        )));
    }
    let (mut t_out, mut s_out) = (Vec::new(), Vec::new());
    for b in 0..data.batch {
        if t_out.len() >= count {
            break;
        }
        let frames = data.video_frames(b);
        let noise = video_noise_seed(seed, b);
        let t = forward_video(teacher, &frames, noise, Precision::Single)?;
        let s = forward_video(student, &frames, noise, Precision::Single)?;
        for (ft, fs) in t.iter().zip(&s) {
            let perm = match_slots(&fs.corrected.slots, &ft.corrected.slots, strategy)?;
            for (n, &pn) in perm.iter().enumerate() {
                if t_out.len() < count {
                    t_out.push(ft.corrected.slots.row(pn).to_vec());
                    s_out.push(fs.corrected.slots.row(n).to_vec());
                }
            }
        }
    }
    Ok((t_out, s_out))
}
