use itertools::Itertools;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slotforge::losses::{
    assignment_cost, cosine_cost, feature_kd_loss, hungarian, match_slots, rec_loss, reconstruction_kd_loss,
    slot_contrast_loss, slot_kd_loss, slot_kd_mse, total_loss, Adapter, LossError, LossWeights, MatchStrategy,
    BETA_GRID,
};
use slotforge::tensor::{check_gradients, Precision, Tape, Tensor, Var};

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).item()
}

fn consts(tape: &mut Tape, ts: &[Tensor]) -> Vec<Var> {
    ts.iter().map(|t| tape.constant(t.clone())).collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

// ---- reconstruction ----

#[test]
fn rec_loss_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let f = random_tensor(&mut rng, &[4, 3]);
    let mut tape = Tape::new(Precision::Double);
    let a = tape.constant(f.clone());
    let b = tape.constant(f.clone());
    let zero = rec_loss(&mut tape, &[a], &[b]).unwrap();
    assert_eq!(scalar(&tape, zero), 0.0);

    let shifted: Vec<f64> = f.data().iter().map(|x| x + 1.0).collect();
    let frames: Vec<Var> = (0..3).map(|_| tape.constant(Tensor::new(vec![4, 3], shifted.clone()).unwrap())).collect();
    let targets: Vec<Var> = (0..3).map(|_| tape.constant(f.clone())).collect();
    let l = rec_loss(&mut tape, &frames, &targets).unwrap();
    assert!((scalar(&tape, l) - 12.0).abs() < 1e-12);

    let x = random_tensor(&mut rng, &[2, 2]);
    let y = random_tensor(&mut rng, &[2, 2]);
    let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
    let l = rec_loss(&mut tape, &[xv], &[yv]).unwrap();
    let oracle: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    assert!((scalar(&tape, l) - oracle).abs() < 1e-14);

    let odd = tape.constant(Tensor::zeros(vec![2, 3]));
    assert!(matches!(rec_loss(&mut tape, &[xv], &[odd]), Err(LossError::Shape(_))));
}

// ---- contrastive ----

/// Direct per-anchor evaluation; `slots[b][t]` is `N×d`.
fn contrast_oracle(slots: &[Vec<Tensor>], tau: f64) -> f64 {
    let (b_count, t_count, n) = (slots.len(), slots[0].len(), slots[0][0].rows());
    let flat: Vec<(usize, usize, usize, &[f64])> = (0..b_count)
        .flat_map(|b| (0..t_count).flat_map(move |t| (0..n).map(move |k| (b, t, k))))
        .map(|(b, t, k)| (b, t, k, slots[b][t].row(k)))
        .collect();
    let mut total = 0.0;
    for &(b, t, k, anchor) in &flat {
        if t + 1 >= t_count {
            continue;
        }
        let pos = (cos(anchor, slots[b][t + 1].row(k)) / tau).exp();
        let denom: f64 = flat
            .iter()
            .filter(|&&(b2, t2, k2, _)| (t2 == t || t2 == t + 1) && (b2, t2, k2) != (b, t, k))
            .map(|&(_, _, _, other)| (cos(anchor, other) / tau).exp())
            .sum();
        total -= (pos / denom).ln();
    }
    total / (b_count * t_count * n) as f64
}

fn run_contrast(slots: &[Vec<Tensor>], tau: f64) -> f64 {
    let mut tape = Tape::new(Precision::Double);
    let frames = slots[0].len();
    let flat: Vec<Tensor> = slots.iter().flatten().cloned().collect();
    let vars = consts(&mut tape, &flat);
    let l = slot_contrast_loss(&mut tape, &vars, frames, tau).unwrap();
    scalar(&tape, l)
}

#[test]
fn contrast_single_candidate_is_zero() {
    let s = vec![vec![
        Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap(),
        Tensor::from_rows(&[vec![-0.5, 0.3]]).unwrap(),
    ]];
    assert!(run_contrast(&s, 0.1).abs() < 1e-12);
}

#[test]
fn contrast_orthogonal_negatives_closed_form() {
    // B=1, T=2, N=2 in 4 dims: positives identical, everything else orthogonal.
    let e = |i: usize| {
        let mut v = vec![0.0; 4];
        v[i] = 1.0;
        v
    };
    let s = vec![vec![
        Tensor::from_rows(&[e(0), e(1)]).unwrap(),
        Tensor::from_rows(&[e(0), e(1)]).unwrap(),
    ]];
    // Each anchor at t=0 sees its positive (cos 1) and two orthogonal slots; M = 4.
    let per_anchor = -(10f64.exp() / (10f64.exp() + 2.0)).ln();
    let want = 2.0 * per_anchor / 4.0;
    assert!((run_contrast(&s, 0.1) - want).abs() < 1e-12);
    assert!((contrast_oracle(&s, 0.1) - want).abs() < 1e-12);
}

#[test]
fn contrast_matches_oracle_on_random_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let (b, t, n, d) = (rng.gen_range(1..4), rng.gen_range(2..5), rng.gen_range(1..5), rng.gen_range(2..6));
        let s: Vec<Vec<Tensor>> = (0..b).map(|_| (0..t).map(|_| random_tensor(&mut rng, &[n, d])).collect()).collect();
        let tau = rng.gen_range(0.05..1.0);
        let got = run_contrast(&s, tau);
        assert!((got - contrast_oracle(&s, tau)).abs() < 1e-9, "{got}");
    }
}

#[test]
fn contrast_errors() {
    let mut tape = Tape::new(Precision::Double);
    let a = tape.constant(Tensor::full(vec![2, 3], 1.0));
    assert!(matches!(slot_contrast_loss(&mut tape, &[a], 1, 0.1), Err(LossError::TooFewFrames(1))));
    let z = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]]).unwrap());
    assert!(matches!(
        slot_contrast_loss(&mut tape, &[a, z], 2, 0.1),
        Err(LossError::DegenerateSlot { index: 3, .. })
    ));
}

#[test]
fn contrast_invariances() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let (b, t, n, d) = (2, 3, 4, 5);
        let s: Vec<Vec<Tensor>> = (0..b).map(|_| (0..t).map(|_| random_tensor(&mut rng, &[n, d])).collect()).collect();
        let base = run_contrast(&s, 0.1);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let permuted: Vec<Vec<Tensor>> =
            s.iter().map(|v| v.iter().map(|f| f.select_rows(&perm).unwrap()).collect()).collect();
        assert!((run_contrast(&permuted, 0.1) - base).abs() <= 1e-6);
        let scaled: Vec<Vec<Tensor>> = s.iter().map(|v| v.iter().map(|f| f.scale(3.0)).collect()).collect();
        assert!((run_contrast(&scaled, 0.1) - base).abs() <= 1e-6);
    }
}

// ---- matching ----

fn brute_force(cost: &[Vec<f64>]) -> f64 {
    (0..cost.len())
        .permutations(cost.len())
        .map(|p| assignment_cost(cost, &p))
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn hungarian_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let n = rng.gen_range(1..7);
        let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let a = hungarian(&cost);
        assert_eq!(a.iter().copied().sorted().collect::<Vec<_>>(), (0..n).collect::<Vec<_>>());
        assert_eq!(assignment_cost(&cost, &a), brute_force(&cost));
    }
}

#[test]
fn matching_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let s = random_tensor(&mut rng, &[5, 4]);
    assert_eq!(match_slots(&s, &s, MatchStrategy::Hungarian).unwrap(), vec![0, 1, 2, 3, 4]);
    assert_eq!(match_slots(&s, &s, MatchStrategy::Index).unwrap(), vec![0, 1, 2, 3, 4]);
    let swapped = s.select_rows(&[1, 0, 2, 3, 4]).unwrap();
    assert_eq!(match_slots(&s, &swapped, MatchStrategy::Hungarian).unwrap(), vec![1, 0, 2, 3, 4]);

    let t = random_tensor(&mut rng, &[5, 4]);
    let cost = cosine_cost(&s, &t).unwrap();
    let pi = match_slots(&s, &t, MatchStrategy::Hungarian).unwrap();
    assert_eq!(assignment_cost(&cost, &pi), brute_force(&cost));

    let zero = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
    let fine = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    assert!(matches!(
        match_slots(&fine, &zero, MatchStrategy::Hungarian),
        Err(LossError::DegenerateSlot { index: 1, .. })
    ));
    assert!(match_slots(&fine, &random_tensor(&mut rng, &[3, 2]), MatchStrategy::Index).is_err());
}

// ---- slot distillation ----

fn run_kd(student: &[Tensor], teacher: &[Tensor], strategy: MatchStrategy) -> f64 {
    let mut tape = Tape::new(Precision::Double);
    let s = consts(&mut tape, student);
    let l = slot_kd_loss(&mut tape, &s, teacher, strategy).unwrap();
    scalar(&tape, l)
}

#[test]
fn slot_kd_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let s: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut rng, &[4, 5])).collect();
    assert!(run_kd(&s, &s, MatchStrategy::Index).abs() < 1e-12);
    let neg: Vec<Tensor> = s.iter().map(|t| t.scale(-2.0)).collect();
    assert!((run_kd(&s, &neg, MatchStrategy::Index) - 2.0).abs() < 1e-12);

    let st = vec![Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()];
    let te = vec![Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap()];
    assert!((run_kd(&st, &te, MatchStrategy::Index) - 1.0).abs() < 1e-15);
    assert!(run_kd(&st, &te, MatchStrategy::Hungarian).abs() < 1e-15);
}

#[test]
fn slot_kd_matches_direct_cosine_and_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let n = rng.gen_range(2..7);
        let s: Vec<Tensor> = (0..2).map(|_| random_tensor(&mut rng, &[n, 3])).collect();
        let t: Vec<Tensor> = (0..2).map(|_| random_tensor(&mut rng, &[n, 3])).collect();
        let index = run_kd(&s, &t, MatchStrategy::Index);
        let hung = run_kd(&s, &t, MatchStrategy::Hungarian);
        let oracle: f64 = s
            .iter()
            .zip(&t)
            .flat_map(|(a, b)| (0..n).map(move |i| 1.0 - cos(a.row(i), b.row(i))))
            .sum::<f64>()
            / (2 * n) as f64;
        assert!((index - oracle).abs() < 1e-12);
        assert!(hung <= index + 1e-12);
        assert!((0.0..=2.0 + 1e-12).contains(&index));
    }
}

#[test]
fn slot_kd_scale_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let s = vec![random_tensor(&mut rng, &[5, 4])];
        let t = vec![random_tensor(&mut rng, &[5, 4])];
        let base = run_kd(&s, &t, MatchStrategy::Index);
        let mut scaled = s[0].clone();
        for i in 0..5 {
            let c = rng.gen_range(0.01..100.0);
            for v in &mut scaled.data_mut()[i * 4..(i + 1) * 4] {
                *v *= c;
            }
        }
        assert!((run_kd(&[scaled], &t, MatchStrategy::Index) - base).abs() <= 1e-6);
    }
}

#[test]
fn slot_kd_gradient_only_reaches_student() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let s = random_tensor(&mut rng, &[3, 4]);
    let t = random_tensor(&mut rng, &[3, 4]);
    let mut tape = Tape::new(Precision::Double);
    let sv = tape.param(s.clone());
    let tv = tape.param(t.clone());
    // Teacher values go in as a detached tensor, so its source var sees nothing.
    let teacher = tape.value(tv).clone();
    let l = slot_kd_loss(&mut tape, &[sv], &[teacher], MatchStrategy::Index).unwrap();
    let g = tape.backward(l).unwrap();
    assert!(g.get(sv).is_some());
    assert!(g.get(tv).map_or(true, |g| g.data().iter().all(|&x| x == 0.0)));

    let report = check_gradients(&[s], 1e-5, |tape, v| {
        slot_kd_loss(tape, &[v[0]], &[t.clone()], MatchStrategy::Hungarian).map_err(|e| match e {
            LossError::Tensor(t) => t,
            other => panic!("{other}"),
        })
    })
    .unwrap();
    assert!(report.max_rel_err <= 1e-4);
}

#[test]
fn slot_kd_mse_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let s = random_tensor(&mut rng, &[3, 4]);
    let plus: Vec<f64> = s.data().iter().map(|x| x + 1.0).collect();
    let t = Tensor::new(vec![3, 4], plus).unwrap();
    let mut tape = Tape::new(Precision::Double);
    let sv = tape.constant(s.clone());
    let same = slot_kd_mse(&mut tape, &[sv], &[s.clone()], MatchStrategy::Index).unwrap();
    assert_eq!(scalar(&tape, same), 0.0);
    let four = slot_kd_mse(&mut tape, &[sv], &[t], MatchStrategy::Index).unwrap();
    assert!((scalar(&tape, four) - 4.0).abs() < 1e-12);

    let r = random_tensor(&mut rng, &[3, 4]);
    let l = slot_kd_mse(&mut tape, &[sv], &[r.clone()], MatchStrategy::Index).unwrap();
    let oracle: f64 = s.data().iter().zip(r.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 3.0;
    assert!((scalar(&tape, l) - oracle).abs() < 1e-12);
}

// ---- adapted distillation ----

#[test]
fn adapted_mse_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let teacher = random_tensor(&mut rng, &[4, 6]);
    let zero = Adapter::from_tensors(
        Tensor::zeros(vec![6, 3]),
        Tensor::zeros(vec![3]),
        Tensor::zeros(vec![3, 3]),
        Tensor::zeros(vec![3]),
    );
    let mut tape = Tape::new(Precision::Double);
    let av = zero.bind(&mut tape);
    let s = tape.constant(Tensor::zeros(vec![4, 3]));
    let l = feature_kd_loss(&mut tape, &[s], &[teacher.clone()], &av).unwrap();
    assert_eq!(scalar(&tape, l), 0.0);

    // Adapter output equal to the student: fc2 is zero and its bias carries the value.
    let target = random_tensor(&mut rng, &[1, 3]);
    let fixed = Adapter::from_tensors(
        Tensor::zeros(vec![6, 3]),
        Tensor::zeros(vec![3]),
        Tensor::zeros(vec![3, 3]),
        Tensor::new(vec![3], target.data().to_vec()).unwrap(),
    );
    let av = fixed.bind(&mut tape);
    let rows: Vec<Vec<f64>> = (0..4).map(|_| target.data().to_vec()).collect();
    let s = tape.constant(Tensor::from_rows(&rows).unwrap());
    let l = reconstruction_kd_loss(&mut tape, &[s], &[teacher.clone()], &av).unwrap();
    assert_eq!(scalar(&tape, l), 0.0);

    let adapter = Adapter::init(6, 3, 1);
    let student = random_tensor(&mut rng, &[4, 3]);
    let av = adapter.bind(&mut tape);
    let sv = tape.constant(student.clone());
    let l = feature_kd_loss(&mut tape, &[sv], &[teacher.clone()], &av).unwrap();
    let w = adapter.tensors();
    let (w1, b1) = (&w["adapter.fc1.weight"], &w["adapter.fc1.bias"]);
    let (w2, b2) = (&w["adapter.fc2.weight"], &w["adapter.fc2.bias"]);
    let mut oracle = 0.0;
    for p in 0..4 {
        let h: Vec<f64> = (0..3)
            .map(|j| ((0..6).map(|i| teacher.row(p)[i] * w1.data()[i * 3 + j]).sum::<f64>() + b1.data()[j]).max(0.0))
            .collect();
        for j in 0..3 {
            let y = (0..3).map(|i| h[i] * w2.data()[i * 3 + j]).sum::<f64>() + b2.data()[j];
            oracle += (student.row(p)[j] - y).powi(2);
        }
    }
    assert!((scalar(&tape, l) - oracle / 12.0).abs() < 1e-12);

    let g = tape.backward(l).unwrap();
    for v in av.0 {
        assert!(g.get(v).is_some());
    }
}

// ---- total ----

#[test]
fn total_loss_examples() {
    let mut tape = Tape::new(Precision::Double);
    let (r, c, k) = (tape.constant(Tensor::scalar(1.0)), tape.constant(Tensor::scalar(2.0)), tape.constant(Tensor::scalar(3.0)));
    let none = LossWeights { alpha: 0.0, beta: 0.0, tau: 0.1 };
    let t = total_loss(&mut tape, r, Some(c), Some(k), &none).unwrap();
    assert_eq!(scalar(&tape, t), 1.0);
    let w = LossWeights::default();
    let t = total_loss(&mut tape, r, Some(c), Some(k), &w).unwrap();
    assert!((scalar(&tape, t) - 2.6).abs() < 1e-15);
    assert!((w.combine(1.0, 2.0, 3.0) - 2.6).abs() < 1e-15);
    assert_eq!(BETA_GRID, [0.1, 0.2, 0.3, 0.5, 0.8]);

    let doubled = LossWeights { beta: 0.4, ..w };
    assert_eq!(doubled.combine(0.0, 0.0, 3.0), 2.0 * w.combine(0.0, 0.0, 3.0));
    assert!(LossWeights { tau: 0.0, ..w }.validate().is_err());
    assert!(LossWeights { beta: -1.0, ..w }.validate().is_err());
}

#[test]
fn contrastive_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let inputs: Vec<Tensor> = (0..4).map(|_| random_tensor(&mut rng, &[2, 3])).collect();
    let report = check_gradients(&inputs, 1e-5, |tape, v| {
        slot_contrast_loss(tape, v, 2, 0.5).map_err(|e| match e {
            LossError::Tensor(t) => t,
            other => panic!("{other}"),
        })
    })
    .unwrap();
    assert!(report.max_rel_err <= 1e-4, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn hungarian_never_worse_than_index(seed in 0u64..100_000, n in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_tensor(&mut rng, &[n, 3]);
        let t = random_tensor(&mut rng, &[n, 3]);
        let cost = cosine_cost(&s, &t).unwrap();
        let h = hungarian(&cost);
        prop_assert!(assignment_cost(&cost, &h) <= assignment_cost(&cost, &(0..n).collect::<Vec<_>>()));
    }
}
