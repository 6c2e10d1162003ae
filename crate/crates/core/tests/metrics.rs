use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slotforge::metrics::{
    fg_ari, image_level, m_bo, sample_std, score_videos, video_level, EvalReport, MboOrientation, MetricError, Scores,
};

/// Adjusted Rand index from explicit pair counting over foreground pixels.
fn ari_by_pairs(pred: &[u16], gt: &[u16]) -> Option<f64> {
    let fg: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] != 0).collect();
    if fg.is_empty() {
        return None;
    }
    let (mut a, mut b, mut c, mut d) = (0f64, 0f64, 0f64, 0f64);
    for (x, &i) in fg.iter().enumerate() {
        for &j in &fg[x + 1..] {
            match (gt[i] == gt[j], pred[i] == pred[j]) {
                (true, true) => a += 1.0,
                (true, false) => b += 1.0,
                (false, true) => c += 1.0,
                (false, false) => d += 1.0,
            }
        }
    }
    let denom = (a + b) * (b + d) + (a + c) * (c + d);
    if denom == 0.0 {
        return Some(1.0);
    }
    Some(2.0 * (a * d - b * c) / denom)
}

fn iou_table_mbo(pred: &[u16], gt: &[u16], orientation: MboOrientation) -> Option<f64> {
    let mut gt_labels: Vec<u16> = gt.iter().copied().filter(|&g| g != 0).collect();
    gt_labels.sort();
    gt_labels.dedup();
    let mut pred_labels: Vec<u16> = pred.to_vec();
    pred_labels.sort();
    pred_labels.dedup();
    if gt_labels.is_empty() {
        return None;
    }
    let iou = |g: u16, p: u16| {
        let inter = (0..gt.len()).filter(|&i| gt[i] == g && pred[i] == p).count();
        let union = (0..gt.len()).filter(|&i| gt[i] == g || pred[i] == p).count();
        inter as f64 / union as f64
    };
    let table: Vec<Vec<f64>> = gt_labels.iter().map(|&g| pred_labels.iter().map(|&p| iou(g, p)).collect()).collect();
    let best: Vec<f64> = match orientation {
        MboOrientation::PerGroundTruth => table.iter().map(|r| r.iter().cloned().fold(0.0, f64::max)).collect(),
        MboOrientation::PerPrediction => (0..pred_labels.len())
            .map(|j| table.iter().map(|r| r[j]).fold(0.0, f64::max))
            .collect(),
    };
    Some(best.iter().sum::<f64>() / best.len() as f64)
}

fn random_masks(rng: &mut ChaCha8Rng) -> (Vec<u16>, Vec<u16>, usize) {
    let (h, w, t) = (rng.gen_range(1..=6), rng.gen_range(1..=6), rng.gen_range(1..=3));
    let (gl, pl) = (rng.gen_range(1..=4), rng.gen_range(1..=5));
    let n = h * w * t;
    let gt = (0..n).map(|_| rng.gen_range(0..gl)).collect();
    let pred = (0..n).map(|_| rng.gen_range(0..pl)).collect();
    (pred, gt, t)
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= 1e-9,
        _ => false,
    }
}

#[test]
fn metrics_match_brute_force_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let (pred, gt, t) = random_masks(&mut rng);
        assert!(close(fg_ari(&pred, &gt).unwrap(), ari_by_pairs(&pred, &gt)), "{pred:?} {gt:?}");
        for o in [MboOrientation::PerGroundTruth, MboOrientation::PerPrediction] {
            assert!(close(m_bo(&pred, &gt, o).unwrap(), iou_table_mbo(&pred, &gt, o)));
        }
        let img = image_level(fg_ari, &pred, &gt, t).unwrap();
        let size = pred.len() / t;
        let per: Vec<f64> = (0..t)
            .filter_map(|f| ari_by_pairs(&pred[f * size..(f + 1) * size], &gt[f * size..(f + 1) * size]))
            .collect();
        let want = (!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64);
        assert!(close(img, want));
    }
}

#[test]
fn ari_examples() {
    let gt = [1, 1, 2, 2, 0, 0];
    assert_eq!(fg_ari(&[3, 3, 5, 5, 1, 2], &gt).unwrap(), Some(1.0));
    assert_eq!(fg_ari(&[7, 7, 7, 7, 0, 0], &gt).unwrap(), Some(0.0));
    assert_eq!(fg_ari(&[1, 2, 3], &[0, 0, 0]).unwrap(), None);
    assert_eq!(
        fg_ari(&[1, 2], &[1]).unwrap_err(),
        MetricError::ShapeMismatch { pred: 2, gt: 1 }
    );
    // Background pixels never count.
    assert_eq!(fg_ari(&[3, 3, 5, 5, 9, 9], &gt).unwrap(), fg_ari(&[3, 3, 5, 5, 1, 2], &gt).unwrap());
}

#[test]
fn mbo_examples() {
    // 4×4 grid, one gt square in the top-left 2×2 block; prediction covers its left column.
    #[rustfmt::skip]
    let gt = [
        1, 1, 0, 0,
        1, 1, 0, 0,
        0, 0, 0, 0,
        0, 0, 0, 0,
    ];
    #[rustfmt::skip]
    let half = [
        1, 0, 0, 0,
        1, 0, 0, 0,
        0, 0, 0, 0,
        0, 0, 0, 0,
    ];
    assert_eq!(m_bo(&gt, &gt, MboOrientation::PerGroundTruth).unwrap(), Some(1.0));
    assert_eq!(m_bo(&half, &gt, MboOrientation::PerGroundTruth).unwrap(), Some(0.5));

    // Extra spurious labels do not move the per-gt value.
    let mut spurious = gt;
    spurious[15] = 7;
    spurious[14] = 8;
    assert_eq!(m_bo(&spurious, &gt, MboOrientation::PerGroundTruth).unwrap(), Some(1.0));
    assert!(m_bo(&spurious, &gt, MboOrientation::PerPrediction).unwrap().unwrap() < 1.0);
    assert_eq!(m_bo(&gt, &[0; 16], MboOrientation::PerGroundTruth).unwrap(), None);
}

#[test]
fn video_versus_image_level() {
    let frame_gt = [1u16, 1, 2, 2];
    let frame_pred = [0u16, 0, 1, 1];
    let gt: Vec<u16> = frame_gt.repeat(3);
    let pred: Vec<u16> = frame_pred.repeat(3);
    for metric in [fg_ari as fn(&[u16], &[u16]) -> _, |p: &[u16], g: &[u16]| m_bo(p, g, MboOrientation::PerGroundTruth)] {
        assert_eq!(image_level(metric, &pred, &gt, 3).unwrap(), video_level(metric, &pred, &gt).unwrap());
        assert_eq!(
            image_level(metric, &frame_pred, &frame_gt, 1).unwrap(),
            video_level(metric, &frame_pred, &frame_gt).unwrap()
        );
    }

    // Ids swap at t=1: each frame is perfect, the video is not.
    let gt = [1u16, 1, 2, 2, 1, 1, 2, 2];
    let pred = [5u16, 5, 6, 6, 6, 6, 5, 5];
    let img = image_level(fg_ari, &pred, &gt, 2).unwrap().unwrap();
    let vid = video_level(fg_ari, &pred, &gt).unwrap().unwrap();
    assert_eq!(img, 1.0);
    assert!(vid < img);
    assert!(close(Some(vid), ari_by_pairs(&pred, &gt)));
    assert!(image_level(fg_ari, &pred, &gt, 3).is_err());
}

#[test]
fn frames_without_foreground_are_skipped() {
    let gt = [0u16, 0, 1, 2];
    let pred = [4u16, 4, 1, 2];
    assert_eq!(image_level(fg_ari, &pred, &gt, 2).unwrap(), Some(1.0));
}

#[test]
fn report_mean_std_and_csv() {
    let s = |v: f64| Scores {
        image_fg_ari: v,
        image_mbo: v / 2.0,
        video_fg_ari: v,
        video_mbo: 0.5,
    };
    let report = EvalReport {
        per_seed: vec![(42, s(0.2)), (101, s(0.4)), (2048, s(0.9))],
    };
    let m = report.mean();
    assert!((m.image_fg_ari - 0.5).abs() < 1e-15);
    // Sample std of (0.2, 0.4, 0.9): deviations -0.3, -0.1, 0.4 → sqrt(0.26 / 2).
    assert!((report.std().image_fg_ari - (0.13f64).sqrt()).abs() < 1e-12);
    assert_eq!(report.std().video_mbo, 0.0);
    assert_eq!(sample_std(&[3.0]), 0.0);

    let csv = report.to_csv("abc");
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "# config_hash=abc");
    assert_eq!(lines[1], "level,metric,seed,value");
    assert_eq!(lines.len(), 2 + 4 * 5);
    assert!(lines.contains(&"image,fg_ari,42,0.2"));
    assert!(lines.iter().any(|l| l.starts_with("video,mbo,std,")));
}

#[test]
fn score_videos_averages_over_videos() {
    let gt1: Vec<u16> = vec![1, 1, 2, 2];
    let gt2: Vec<u16> = vec![0, 0, 0, 0];
    let preds = vec![vec![3, 3, 4, 4], vec![1, 2, 3, 4]];
    let s = score_videos(&preds, &[&gt1, &gt2], 1, MboOrientation::PerGroundTruth).unwrap();
    // The second video has no foreground and drops out.
    assert_eq!(s.values(), [1.0; 4]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn metrics_invariant_to_relabeling(seed in 0u64..1_000_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pred, gt, _) = random_masks(&mut rng);
        // Relabel predictions by any injective map and ground-truth objects by a
        // map fixing background.
        let pred2: Vec<u16> = pred.iter().map(|&p| 10 + (p * 7) % 11).collect();
        let gt2: Vec<u16> = gt.iter().map(|&g| if g == 0 { 0 } else { 4 - g + 20 }).collect();
        prop_assert!(close(fg_ari(&pred, &gt).unwrap(), fg_ari(&pred2, &gt2).unwrap()));
        let o = MboOrientation::PerGroundTruth;
        prop_assert!(close(m_bo(&pred, &gt, o).unwrap(), m_bo(&pred2, &gt2, o).unwrap()));

        // Prediction changes on background pixels leave FG-ARI alone.
        let bg_changed: Vec<u16> = pred.iter().zip(&gt).map(|(&p, &g)| if g == 0 { 99 } else { p }).collect();
        prop_assert_eq!(fg_ari(&pred, &gt).unwrap(), fg_ari(&bg_changed, &gt).unwrap());

        // Replacing a predicted mask with an exact gt mask never lowers mBO.
        if let Some(&g) = gt.iter().find(|&&g| g != 0) {
            let target = pred[gt.iter().position(|&x| x == g).unwrap()];
            let fixed: Vec<u16> = pred
                .iter()
                .zip(&gt)
                .map(|(&p, &x)| if x == g { 500 } else if p == target { 501 } else { p })
                .collect();
            let before = m_bo(&pred, &gt, o).unwrap().unwrap();
            let after = m_bo(&fixed, &gt, o).unwrap().unwrap();
            prop_assert!(after >= before - 1e-12);
        }
    }
}
