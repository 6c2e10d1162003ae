use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use slotforge::config::RunConfig;
use slotforge::datagen::{generate, load_dataset, VideoBatch};
use slotforge::evaluation::{evaluate as evaluate_model, evaluate_oracle, matched_slot_pairs};
use slotforge::losses::{MatchStrategy, BETA_GRID};
use slotforge::metrics::{EvalReport, MboOrientation, Scores};
use slotforge::model::{cost, forward_video, ModelWeights};
use slotforge::tensor::Precision;
use slotforge::theory::{verify_theorem as verify, BoundMode, SlotDecoder};
use slotforge::trainer::{self, KdVariant, RunRecord, TrainError, Trained, RUN_COLUMNS};

use crate::error::CliError;
use crate::svg;
use crate::{ConfigArg, TrainOverrides};

type Result<T, E = CliError> = std::result::Result<T, E>;

fn load_config(arg: &ConfigArg) -> Result<RunConfig> {
    match &arg.config {
        Some(path) => Ok(RunConfig::load(path)?),
        None => Ok(RunConfig::default()),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn load_data(path: &Path) -> Result<VideoBatch> {
    load_dataset(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Load a checkpoint under the student config, falling back to the teacher config.
fn load_checkpoint(path: &Path, cfg: &RunConfig) -> Result<ModelWeights> {
    let bytes = fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    ModelWeights::from_bytes(&bytes, &cfg.student)
        .or_else(|_| ModelWeights::from_bytes(&bytes, &cfg.teacher))
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn parse_objects(s: &str) -> Result<(usize, usize)> {
    let bad = || CliError::Config(format!("--objects {s:?}: expected N or MIN..MAX"));
    match s.split_once("..") {
        Some((a, b)) => Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?)),
        None => {
            let n = s.trim().parse().map_err(|_| bad())?;
            Ok((n, n))
        }
    }
}

pub fn gen_data(
    config: &ConfigArg,
    seed: Option<u64>,
    out: &Path,
    count: Option<usize>,
    objects: Option<&str>,
    size: Option<usize>,
    frames: Option<usize>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    let data = &mut cfg.data;
    data.seed = seed.unwrap_or(data.seed);
    data.count = count.unwrap_or(data.count);
    data.size = size.unwrap_or(data.size);
    data.frames = frames.unwrap_or(data.frames);
    if let Some(o) = objects {
        (data.min_objects, data.max_objects) = parse_objects(o)?;
    }
    let batch = generate(data.seed, &data.gen_config(data.count))?;
    fs::create_dir_all(out)?;
    let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
    for b in 0..batch.batch {
        let video = batch.subset(&[b]);
        video.save(out.join(format!("video_{b:05}.sltv")))?;
        let objects: BTreeSet<u16> = batch.video_masks(b).iter().copied().filter(|&l| l > 0).collect();
        *histogram.entry(objects.len()).or_default() += 1;
    }
    let mut csv = format!("# config_hash={}\n# dataset_hash={}\nobjects,videos\n", cfg.hash(), batch.content_hash());
    for (k, v) in &histogram {
        writeln!(csv, "{k},{v}").expect("write to string");
    }
    write(&out.join("histogram.csv"), &csv)?;
    println!(
        "wrote {} videos ({} frames of {}x{}) to {}",
        batch.batch,
        batch.frames,
        batch.height,
        batch.width,
        out.display()
    );
    for (k, v) in &histogram {
        println!("  {k} objects: {v} videos");
    }
    Ok(())
}

fn apply_overrides(cfg: &mut RunConfig, o: &TrainOverrides, teacher: bool) {
    let train = if teacher { &mut cfg.teacher_train } else { &mut cfg.train };
    if let Some(s) = o.steps {
        train.steps = s;
    }
    if let Some(s) = o.seed {
        train.seed = s;
    }
}

/// Persist the outcome of a training run; a divergence still writes its record.
fn finish_run(
    result: std::result::Result<Trained, TrainError>,
    cfg: &RunConfig,
    data: &VideoBatch,
    eval_data: Option<&VideoBatch>,
    out: &Path,
    checkpoint: &str,
) -> Result<RunRecord> {
    fs::create_dir_all(out)?;
    write(&out.join("config.toml"), cfg.to_toml())?;
    let stamp = |r: &mut RunRecord| {
        r.config_hash = cfg.hash();
        r.dataset_hash = data.content_hash();
    };
    match result {
        Ok(mut trained) => {
            stamp(&mut trained.record);
            if let Some(ev) = eval_data {
                let report = evaluate_model(&trained.weights, ev, &cfg.eval.seeds, cfg.eval.mbo)?;
                trained.record.eval = Some(report.mean());
            }
            trained.weights.save(out.join(checkpoint))?;
            write(&out.join("run.csv"), trained.record.to_csv())?;
            Ok(trained.record)
        }
        Err(TrainError::Diverged { step, reason, mut record }) => {
            stamp(&mut record);
            write(&out.join("run.csv"), record.to_csv())?;
            Err(CliError::Diverged(format!(
                "step {step}: {reason} (record written to {})",
                out.join("run.csv").display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

fn print_record(r: &RunRecord) {
    let last = r.steps.last();
    println!(
        "{} beta={} seed={}: {} steps, final rec {:.4} contrast {:.4} kd {:.4}, {:.1} ms/step",
        r.label,
        r.beta,
        r.seed,
        r.steps.len(),
        last.map_or(f64::NAN, |s| s.rec),
        last.map_or(f64::NAN, |s| s.contrast),
        last.map_or(f64::NAN, |s| s.kd),
        r.mean_wall_ms()
    );
    if let Some(e) = &r.eval {
        println!(
            "  image FG-ARI {:.4}  image mBO {:.4}  video FG-ARI {:.4}  video mBO {:.4}",
            e.image_fg_ari, e.image_mbo, e.video_fg_ari, e.video_mbo
        );
    }
}

pub fn train_teacher(config: &ConfigArg, data_path: &Path, out: &Path, o: &TrainOverrides) -> Result<()> {
    let mut cfg = load_config(config)?;
    apply_overrides(&mut cfg, o, true);
    cfg.validate()?;
    let data = load_data(data_path)?;
    let eval_data = o.eval_data.as_deref().map(load_data).transpose()?;
    let mut losses = cfg.losses;
    losses.beta = 0.0;
    let result = trainer::train_teacher(&cfg.teacher, &cfg.teacher_train, &losses, &data);
    let record = finish_run(result, &cfg, &data, eval_data.as_ref(), out, "teacher.sltw")?;
    print_record(&record);
    Ok(())
}

pub struct DistillFlags {
    pub kd_variant: Option<KdVariant>,
    pub beta: Option<f64>,
    pub match_strategy: Option<MatchStrategy>,
    pub sweep: bool,
}

pub fn distill(
    config: &ConfigArg,
    teacher_path: &Path,
    data_path: &Path,
    out: &Path,
    flags: DistillFlags,
    o: &TrainOverrides,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    apply_overrides(&mut cfg, o, false);
    if let Some(v) = flags.kd_variant {
        cfg.train.kd_variant = v;
    }
    if let Some(b) = flags.beta {
        cfg.losses.beta = b;
    }
    if let Some(m) = flags.match_strategy {
        cfg.train.match_strategy = m;
    }
    cfg.validate()?;
    let bytes = fs::read(teacher_path).map_err(|e| CliError::Io(format!("{}: {e}", teacher_path.display())))?;
    let teacher = ModelWeights::from_bytes(&bytes, &cfg.teacher)
        .map_err(|e| CliError::Io(format!("{}: {e}", teacher_path.display())))?;
    if cfg.teacher.num_slots != cfg.student.num_slots || cfg.teacher.slot_dim != cfg.student.slot_dim {
        return Err(CliError::Config(format!(
            "teacher has {} slots of width {}, student config asks for {} of width {}",
            cfg.teacher.num_slots, cfg.teacher.slot_dim, cfg.student.num_slots, cfg.student.slot_dim
        )));
    }
    let teacher_hash = teacher.hash();
    let data = load_data(data_path)?;
    let eval_data = o.eval_data.as_deref().map(load_data).transpose()?;

    let runs: Vec<(RunConfig, PathBuf)> = if flags.sweep {
        BETA_GRID
            .iter()
            .map(|&b| {
                let mut c = cfg.clone();
                c.losses.beta = b;
                (c, out.join(format!("beta_{b}")))
            })
            .collect()
    } else {
        vec![(cfg.clone(), out.to_path_buf())]
    };
    let teacher_cache = trainer::frozen_features(&teacher, &data)?;
    for (run_cfg, dir) in runs {
        let student = ModelWeights::init(&run_cfg.student, run_cfg.train.seed)?;
        let student_cache = trainer::frozen_features(&student, &data)?;
        let result = trainer::distill_from(
            &teacher,
            &teacher_cache,
            student,
            &student_cache,
            data.frames,
            &run_cfg.train,
            &run_cfg.losses,
        );
        let record = finish_run(result, &run_cfg, &data, eval_data.as_ref(), &dir, "student.sltw")?;
        print_record(&record);
    }
    if teacher.hash() != teacher_hash || fs::read(teacher_path)? != bytes {
        return Err(CliError::Io("teacher checkpoint changed during distillation".into()));
    }
    Ok(())
}

fn print_report(report: &EvalReport) {
    let (mean, std) = (report.mean(), report.std());
    println!("{:<6} {:<7} {:>10} {:>10}", "level", "metric", "mean", "std");
    for (k, (level, metric)) in Scores::NAMES.iter().enumerate() {
        println!("{level:<6} {metric:<7} {:>10.4} {:>10.4}", mean.values()[k], std.values()[k]);
    }
}

pub fn evaluate(
    config: &ConfigArg,
    checkpoint: Option<&Path>,
    data_path: &Path,
    seeds: Option<Vec<u64>>,
    out: Option<&Path>,
    oracle_pred: bool,
    mbo: Option<MboOrientation>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seeds {
        cfg.eval.seeds = s;
    }
    if let Some(m) = mbo {
        cfg.eval.mbo = m;
    }
    cfg.validate()?;
    let data = load_data(data_path)?;
    let report = if oracle_pred {
        evaluate_oracle(&data, &cfg.eval.seeds, cfg.eval.mbo)?
    } else {
        let path = checkpoint.ok_or_else(|| CliError::Config("--checkpoint is required".into()))?;
        let weights = load_checkpoint(path, &cfg)?;
        evaluate_model(&weights, &data, &cfg.eval.seeds, cfg.eval.mbo)?
    };
    print_report(&report);
    if let Some(out) = out {
        write(out, report.to_csv(&cfg.hash()))?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn verify_theorem(
    config: &ConfigArg,
    teacher_path: &Path,
    student_path: &Path,
    data_path: &Path,
    pairs: Option<usize>,
    mode: BoundMode,
    match_strategy: Option<MatchStrategy>,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let teacher = load_checkpoint(teacher_path, &cfg)?;
    let student = load_checkpoint(student_path, &cfg)?;
    let data = load_data(data_path)?;
    let count = pairs.unwrap_or(cfg.eval.pairs);
    let strategy = match_strategy.unwrap_or(cfg.train.match_strategy);
    let (t, s) = matched_slot_pairs(&teacher, &student, &data, seed, count, strategy)?;
    if t.len() < count {
        return Err(CliError::Config(format!(
            "data yields only {} slot pairs, {count} requested",
            t.len()
        )));
    }
    let decoder = SlotDecoder::from_weights(&teacher)?;
    let report = verify(&t, &s, &decoder, mode)?;
    println!(
        "{} pairs, {} violations, min slack {:.4e}, mean c {:.4}, mean lhs {:.4e}, K_f {:.4e}",
        report.rows.len(),
        report.violations(),
        report.min_slack(),
        report.mean_c(),
        report.mean_lhs(),
        report.lipschitz.k_f_upper
    );
    if let Some(out) = out {
        write(out, report.to_csv(&cfg.hash()))?;
        let points: Vec<svg::Point> = report
            .rows
            .iter()
            .map(|r| svg::Point {
                x: r.bound,
                y: r.lhs,
                size: 0.1,
                label: String::new(),
            })
            .collect();
        write(
            &out.with_extension("svg"),
            svg::scatter("Decoded discrepancy vs bound", "bound 2K²r²c", "lhs", &points),
        )?;
    }
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time_forward(w: &ModelWeights, frames: &[&[f32]], repeats: usize, warmup: usize) -> Result<f64> {
    for _ in 0..warmup {
        forward_video(w, frames, 0, Precision::Single)?;
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        forward_video(w, frames, 0, Precision::Single)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(times))
}

pub fn bench(
    config: &ConfigArg,
    teacher_path: &Path,
    student_path: &Path,
    repeats: usize,
    warmup: usize,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let teacher = load_checkpoint(teacher_path, &cfg)?;
    let student = load_checkpoint(student_path, &cfg)?;
    if teacher.config().image_size != student.config().image_size {
        return Err(CliError::Config("checkpoints expect different frame sizes".into()));
    }
    let side = teacher.config().image_size;
    let mut gen = cfg.data.gen_config(1);
    gen.height = side;
    gen.width = side;
    let video = generate(cfg.data.seed, &gen)?;
    let frames = video.video_frames(0);
    let row = |w: &ModelWeights| -> Result<(usize, u64, f64)> {
        Ok((
            w.param_count().total(),
            cost::flop_count(w.config(), side, side, frames.len()),
            time_forward(w, &frames, repeats.max(1), warmup)?,
        ))
    };
    let (tp, tf, tt) = row(&teacher)?;
    let (sp, sf, st) = row(&student)?;
    let mut csv = format!("# config_hash={}\nmodel,params,flops,median_ms\n", cfg.hash());
    writeln!(csv, "teacher,{tp},{tf},{tt}").expect("write to string");
    writeln!(csv, "student,{sp},{sf},{st}").expect("write to string");
    writeln!(
        csv,
        "ratio,{},{},{}",
        tp as f64 / sp as f64,
        tf as f64 / sf as f64,
        tt / st
    )
    .expect("write to string");
    println!("{:<8} {:>10} {:>14} {:>10}", "model", "params", "flops", "ms/video");
    println!("{:<8} {tp:>10} {tf:>14} {tt:>10.2}", "teacher");
    println!("{:<8} {sp:>10} {sf:>14} {st:>10.2}", "student");
    println!(
        "{:<8} {:>10.2} {:>14.2} {:>10.2}",
        "ratio",
        tp as f64 / sp as f64,
        tf as f64 / sf as f64,
        tt / st
    );
    if let Some(out) = out {
        write(out, csv)?;
    }
    Ok(())
}

fn collect_runs(dir: &Path, found: &mut Vec<(PathBuf, RunRecord)>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_runs(&path, found)?;
        } else if path.extension().is_some_and(|e| e == "csv") {
            let text = fs::read_to_string(&path)?;
            if text.lines().any(|l| l == RUN_COLUMNS) {
                let record = RunRecord::from_csv(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
                found.push((path, record));
            }
        }
    }
    Ok(())
}

pub fn report(runs_dir: &Path, out: &Path) -> Result<()> {
    let mut runs = Vec::new();
    collect_runs(runs_dir, &mut runs)?;
    if runs.is_empty() {
        return Err(CliError::Io(format!("no run records under {}", runs_dir.display())));
    }
    let datasets: BTreeSet<String> = runs.iter().map(|(_, r)| r.dataset_hash.clone()).collect();
    if datasets.len() > 1 {
        return Err(CliError::Config(format!(
            "runs were trained on {} different datasets",
            datasets.len()
        )));
    }
    runs.sort_by(|(pa, a), (pb, b)| {
        (a.label.as_str(), a.beta, a.seed, pa).partial_cmp(&(b.label.as_str(), b.beta, b.seed, pb)).expect("finite beta")
    });
    let configs: BTreeSet<&str> = runs.iter().map(|(_, r)| r.config_hash.as_str()).collect();
    let mut csv = format!(
        "# config_hash={}\n# dataset_hash={}\nrun,label,beta,seed,steps,params,final_rec,final_kd,mean_wall_ms,image_fg_ari,image_mbo,video_fg_ari,video_mbo,diverged\n",
        configs.into_iter().collect::<Vec<_>>().join(";"),
        datasets.first().cloned().unwrap_or_default()
    );
    let name = |p: &Path| {
        p.strip_prefix(runs_dir)
            .unwrap_or(p)
            .parent()
            .map(|d| d.display().to_string())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| ".".into())
    };
    for (path, r) in &runs {
        let e = r.eval.map(|e| e.values().map(|v| v.to_string()));
        let e = e.unwrap_or_else(|| [(); 4].map(|_| String::new()));
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{:.3},{},{},{},{},{}",
            name(path),
            r.label,
            r.beta,
            r.seed,
            r.steps.len(),
            r.param_count,
            r.tail_mean(10, |s| s.rec),
            r.tail_mean(10, |s| s.kd),
            r.mean_wall_ms(),
            e[0],
            e[1],
            e[2],
            e[3],
            r.diverged.as_deref().unwrap_or("no")
        )
        .expect("write to string");
    }
    let max_params = runs.iter().map(|(_, r)| r.param_count).max().unwrap_or(1).max(1) as f64;
    let points: Vec<svg::Point> = runs
        .iter()
        .filter_map(|(p, r)| {
            r.eval.map(|e| svg::Point {
                x: r.mean_wall_ms(),
                y: e.image_mbo,
                size: r.param_count as f64 / max_params,
                label: format!("{} ({})", r.label, name(p)),
            })
        })
        .collect();
    let series: Vec<svg::Series> = runs
        .iter()
        .map(|(p, r)| svg::Series {
            label: format!("{} ({})", r.label, name(p)),
            points: r.steps.iter().map(|s| (s.step as f64, s.total.max(1e-12).log10())).collect(),
        })
        .collect();
    let with_suffix = |suffix: &str| {
        let mut s = out.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    write(&with_suffix(".csv"), &csv)?;
    write(
        &with_suffix("_scatter.svg"),
        svg::scatter("Quality vs training step time", "ms per step", "image mBO", &points),
    )?;
    write(
        &with_suffix("_loss.svg"),
        svg::lines("Training loss", "step", "log10 total loss", &series),
    )?;
    print!("{}", csv.lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join("\n"));
    println!();
    Ok(())
}
