use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use slotforge::losses::{slot_kd_loss, MatchStrategy};
use slotforge::model::{ModelConfig, ModelWeights};
use slotforge::tensor::{Precision, Tape, Tensor};
use slotforge::theory::{
    lipschitz_upper_bound, spectral_norm, verify_theorem, BoundMode, Layer, SlotDecoder, TheoryError, DEFAULT_ITERS,
    DEFAULT_TOL,
};

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(vec![r, c], (0..r * c).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn sigma(w: &Tensor) -> f64 {
    spectral_norm(w, DEFAULT_ITERS, DEFAULT_TOL).sigma
}

fn small_decoder_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: 4,
        encoder_hidden: 8,
        feature_dim: 6,
        slot_dim: 8,
        num_slots: 3,
        sa_iterations: 1,
        sa_mlp_hidden: 8,
        predictor_layers: 1,
        predictor_heads: 2,
        predictor_ff: 8,
        decoder_hidden: 12,
        decoder_layers: 3,
        pos_dim: 4,
        slot_noise: 0.1,
    }
}

fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

#[test]
fn spectral_norm_examples() {
    assert!((sigma(&Tensor::eye(3)) - 1.0).abs() < 1e-12);
    let diag = Tensor::from_rows(&[vec![3.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 0.5]]).unwrap();
    assert!((sigma(&diag) - 3.0).abs() < 1e-9);
    let zero = spectral_norm(&Tensor::zeros(vec![3, 2]), DEFAULT_ITERS, DEFAULT_TOL);
    assert_eq!((zero.sigma, zero.upper, zero.iterations), (0.0, 0.0, 0));
    let s = spectral_norm(&diag, DEFAULT_ITERS, DEFAULT_TOL);
    assert_eq!(s.upper, s.sigma * (1.0 + 1e-6));
}

#[test]
fn spectral_norm_matches_svd_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let w = random_matrix(&mut rng, 4, 3);
        let m = DMatrix::from_row_slice(4, 3, w.data());
        let oracle = m.singular_values().max();
        assert!((sigma(&w) - oracle).abs() <= 1e-8, "{} vs {oracle}", sigma(&w));
        let scaled = sigma(&w.scale(-2.5));
        assert!((scaled - 2.5 * sigma(&w)).abs() <= 1e-9);
    }
}

#[test]
fn lipschitz_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = random_matrix(&mut rng, 5, 3);
    let single = lipschitz_upper_bound(&[Layer::Linear(w.clone())]).unwrap();
    assert_eq!(single.k_f, sigma(&w));

    let two = lipschitz_upper_bound(&[Layer::Linear(Tensor::eye(3).scale(2.0)), Layer::Linear(Tensor::eye(3).scale(3.0))])
        .unwrap();
    assert!((two.k_f - 6.0).abs() < 1e-12);
    assert!(two.k_f_upper >= two.k_f);

    let base = [Layer::Linear(w.clone()), Layer::Relu, Layer::Linear(random_matrix(&mut rng, 3, 4))];
    let k = lipschitz_upper_bound(&base).unwrap().k_f;
    let mut doubled = base.clone();
    doubled[0] = Layer::Linear(w.scale(2.0));
    assert!((lipschitz_upper_bound(&doubled).unwrap().k_f - 2.0 * k).abs() <= 1e-9 * k);

    let bc = lipschitz_upper_bound(&[Layer::Broadcast { copies: 16 }]).unwrap();
    assert_eq!(bc.k_f, 4.0);
    assert!(matches!(
        lipschitz_upper_bound(&[Layer::Linear(Tensor::zeros(vec![3]))]),
        Err(TheoryError::Layer { index: 0, .. })
    ));
}

#[test]
fn lipschitz_bound_dominates_sampled_ratios() {
    let cfg = small_decoder_config();
    let w = ModelWeights::init(&cfg, 3).unwrap();
    let dec = SlotDecoder::from_weights(&w).unwrap();
    let k = lipschitz_upper_bound(&dec.layers()).unwrap().k_f;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let a = random_vec(&mut rng, 8);
        let b: Vec<f64> = if rng.gen_bool(0.5) {
            a.iter().map(|x| x + 1e-3 * rng.sample::<f64, _>(StandardNormal)).collect()
        } else {
            random_vec(&mut rng, 8)
        };
        let num: f64 = dec.apply(&a).iter().zip(dec.apply(&b)).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        let den: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        worst = worst.max((num / den).sqrt());
    }
    assert!(k >= worst, "K_f {k} < sampled {worst}");
}

#[test]
fn slot_decoder_matches_model_decoder() {
    let cfg = small_decoder_config();
    let w = ModelWeights::init(&cfg, 5).unwrap();
    let dec = SlotDecoder::from_weights(&w).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let slots = Tensor::new(vec![3, 8], (0..24).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
    let mut tape = Tape::new(Precision::Double);
    let b = w.bind(&mut tape, false);
    let s = tape.constant(slots.clone());
    let out = slotforge::model::decode_slots(&mut tape, &b, &cfg, s).unwrap();
    let per_slot = tape.value(out).data();
    let stride = cfg.num_patches() * (cfg.feature_dim + 1);
    for n in 0..3 {
        let f = dec.apply(slots.row(n));
        assert_eq!(f.len(), stride);
        for (x, y) in f.iter().zip(&per_slot[n * stride..(n + 1) * stride]) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_slots_give_zero_everything() {
    let cfg = small_decoder_config();
    let w = ModelWeights::init(&cfg, 7).unwrap();
    let dec = SlotDecoder::from_weights(&w).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let slots: Vec<Vec<f64>> = (0..20).map(|_| random_vec(&mut rng, 8)).collect();
    let report = verify_theorem(&slots, &slots, &dec, BoundMode::Equalized).unwrap();
    for r in &report.rows {
        assert_eq!((r.c, r.lhs, r.bound, r.slack), (0.0, 0.0, 0.0, 0.0));
    }
    assert_eq!(report.violations(), 0);
}

#[test]
fn antipodal_unit_pair_through_linear_decoder() {
    // One linear layer of the decoder path with everything else removed.
    let cfg = ModelConfig {
        decoder_layers: 2,
        ..small_decoder_config()
    };
    let w = ModelWeights::init(&cfg, 9).unwrap();
    let dec = SlotDecoder::from_weights(&w).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut t = random_vec(&mut rng, 8);
    let n = t.iter().map(|x| x * x).sum::<f64>().sqrt();
    t.iter_mut().for_each(|x| *x /= n);
    let s: Vec<f64> = t.iter().map(|x| -x).collect();
    let report = verify_theorem(&[t.clone()], &[s.clone()], &dec, BoundMode::Equalized).unwrap();
    let row = report.rows[0];
    assert!((row.c - 2.0).abs() < 1e-12);
    assert!((row.r - 1.0).abs() < 1e-12);
    let lhs: f64 = dec.apply(&t).iter().zip(dec.apply(&s)).map(|(a, b)| (a - b).powi(2)).sum();
    assert_eq!(row.lhs, lhs);
    let k = report.lipschitz.k_f_upper;
    assert!((row.bound - 2.0 * k * k * 2.0).abs() <= 1e-9 * row.bound);
    assert!(row.slack >= 0.0);
}

#[test]
fn equalized_mode_never_violates_and_c_matches_slot_kd() {
    let cfg = small_decoder_config();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..5 {
        let w = ModelWeights::init(&cfg, seed).unwrap();
        let dec = SlotDecoder::from_weights(&w).unwrap();
        let teacher: Vec<Vec<f64>> = (0..100).map(|_| random_vec(&mut rng, 8)).collect();
        let student: Vec<Vec<f64>> = teacher
            .iter()
            .map(|t| t.iter().map(|x| x * rng.gen_range(0.2..3.0) + 0.3 * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let report = verify_theorem(&teacher, &student, &dec, BoundMode::Equalized).unwrap();
        assert_eq!(report.violations(), 0, "min slack {}", report.min_slack());
        for (i, row) in report.rows.iter().enumerate().take(10) {
            let mut tape = Tape::new(Precision::Double);
            let s = tape.constant(Tensor::new(vec![1, 8], student[i].clone()).unwrap());
            let l = slot_kd_loss(&mut tape, &[s], &[Tensor::new(vec![1, 8], teacher[i].clone()).unwrap()], MatchStrategy::Index)
                .unwrap();
            assert!((tape.value(l).item() - row.c).abs() <= 1e-12);
        }

        let raw = verify_theorem(&teacher, &student, &dec, BoundMode::Raw).unwrap();
        assert!(raw.rows.iter().all(|r| r.norm_gap >= 0.0));
        assert!(raw.rows.iter().zip(&report.rows).all(|(a, b)| (a.c - b.c).abs() < 1e-12));
    }
}

#[test]
fn verify_errors_and_csv() {
    let cfg = small_decoder_config();
    let w = ModelWeights::init(&cfg, 1).unwrap();
    let dec = SlotDecoder::from_weights(&w).unwrap();
    let a = vec![vec![1.0; 8]];
    assert!(matches!(
        verify_theorem(&a, &[], &dec, BoundMode::Equalized),
        Err(TheoryError::Count { .. })
    ));
    assert!(matches!(
        verify_theorem(&a, &[vec![0.0; 8]], &dec, BoundMode::Equalized),
        Err(TheoryError::DegenerateSlot { pair: 0, .. })
    ));
    assert!(matches!(
        verify_theorem(&a, &[vec![1.0; 3]], &dec, BoundMode::Equalized),
        Err(TheoryError::Width { .. })
    ));
    let report = verify_theorem(&[vec![1.0; 8], vec![2.0; 8]], &[vec![0.5; 8], vec![-1.0; 8]], &dec, BoundMode::Equalized)
        .unwrap();
    let csv = report.to_csv("h");
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "# config_hash=h");
    assert_eq!(lines[1], "pair_id,c,lhs,r,K_f,bound,slack,norm_gap");
    assert_eq!(lines.len(), 5);
    assert!(lines[4].starts_with("# summary mode=equalized pairs=2 violations=0"));
}
