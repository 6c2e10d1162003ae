use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use slotforge::datagen::load_dataset;
use slotforge::trainer::RunRecord;

const TINY: &str = r#"
[data]
seed = 3
count = 4
frames = 2
size = 16
max_objects = 2

[teacher]
image_size = 16
patch_size = 4
encoder_hidden = 16
feature_dim = 8
slot_dim = 8
num_slots = 3
sa_iterations = 1
sa_mlp_hidden = 8
predictor_heads = 2
predictor_ff = 8
decoder_hidden = 8
pos_dim = 4

[student]
image_size = 16
patch_size = 4
encoder_hidden = 8
feature_dim = 4
slot_dim = 8
num_slots = 3
sa_iterations = 1
sa_mlp_hidden = 8
predictor_heads = 2
predictor_ff = 8
decoder_hidden = 8
pos_dim = 4

[teacher_train]
steps = 3
batch_size = 2
probe_every = 0

[train]
steps = 3
batch_size = 2
probe_every = 2
probe_videos = 2

[eval]
seeds = [1, 2]
pairs = 10
"#;

fn slotforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slotforge"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = slotforge(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    slotforge(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> String {
        s(&self.path("tiny.toml")).to_string()
    }

    fn data(&self) -> PathBuf {
        let d = self.path("data");
        if !d.exists() {
            ok(&["gen-data", "--config", &self.config(), "--out", s(&d)]);
        }
        d
    }

    fn teacher(&self) -> PathBuf {
        let out = self.path("teacher");
        if !out.exists() {
            ok(&[
                "train-teacher",
                "--config",
                &self.config(),
                "--data",
                s(&self.data()),
                "--out",
                s(&out),
            ]);
        }
        out.join("teacher.sltw")
    }
}

fn strip_wall_clock(csv: &str) -> String {
    csv.lines()
        .map(|l| match l.rsplit_once(',') {
            Some((head, _)) if !l.starts_with('#') => head.to_string(),
            _ => l.to_string(),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn gen_data_is_deterministic() {
    let f = Fixture::new();
    for name in ["a", "b"] {
        ok(&["gen-data", "--seed", "0", "--count", "3", "--out", s(&f.path(name))]);
    }
    for i in 0..3 {
        let file = format!("video_{i:05}.sltv");
        assert_eq!(
            fs::read(f.path("a").join(&file)).unwrap(),
            fs::read(f.path("b").join(&file)).unwrap()
        );
    }
}

#[test]
fn gen_data_accepts_single_frame() {
    let f = Fixture::new();
    ok(&["gen-data", "--frames", "1", "--count", "2", "--out", s(&f.path("d"))]);
    assert_eq!(load_dataset(f.path("d")).unwrap().frames, 1);
}

#[test]
fn gen_data_histogram_matches_files() {
    let f = Fixture::new();
    let out = f.path("d");
    let stdout = ok(&[
        "gen-data",
        "--objects",
        "0..4",
        "--count",
        "100",
        "--size",
        "32",
        "--out",
        s(&out),
    ]);
    let files: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "sltv"))
        .collect();
    assert_eq!(files.len(), 100);

    let data = load_dataset(&out).unwrap();
    let mut oracle: BTreeMap<usize, usize> = BTreeMap::new();
    for b in 0..data.batch {
        let labels: BTreeSet<u16> = data.video_masks(b).iter().copied().filter(|&l| l > 0).collect();
        assert!(labels.len() <= 4);
        *oracle.entry(labels.len()).or_default() += 1;
    }
    assert!(oracle.len() > 1, "object counts should vary: {oracle:?}");
    for (k, v) in &oracle {
        assert!(stdout.contains(&format!("{k} objects: {v} videos")), "{stdout}");
    }
    let csv = fs::read_to_string(out.join("histogram.csv")).unwrap();
    assert!(csv.starts_with("# config_hash="));
    for (k, v) in &oracle {
        assert!(csv.lines().any(|l| l == format!("{k},{v}")));
    }
}

#[test]
fn exit_codes() {
    let f = Fixture::new();
    fs::write(f.path("bad.toml"), "[train]\nstepz = 3\n").unwrap();
    assert_eq!(code(&["gen-data", "--config", s(&f.path("bad.toml")), "--out", s(&f.path("x"))]), 2);
    assert_eq!(code(&["gen-data", "--size", "8", "--out", s(&f.path("x"))]), 2);
    assert_eq!(code(&["gen-data", "--objects", "3..1", "--out", s(&f.path("x"))]), 2);
    assert_eq!(
        code(&[
            "train-teacher",
            "--config",
            &f.config(),
            "--data",
            s(&f.path("missing")),
            "--out",
            s(&f.path("t"))
        ]),
        4
    );
    assert_eq!(
        code(&["distill", "--teacher", "x", "--data", "y", "--out", "z", "--kd-variant", "bogus"]),
        2
    );
    fs::write(f.path("garbage.sltw"), b"SLTWnope").unwrap();
    assert_eq!(
        code(&[
            "evaluate",
            "--config",
            &f.config(),
            "--checkpoint",
            s(&f.path("garbage.sltw")),
            "--data",
            s(&f.data())
        ]),
        4
    );
}

#[test]
fn divergence_exits_3_and_keeps_record() {
    let f = Fixture::new();
    let cfg = TINY.replace("[teacher_train]\n", "[teacher_train]\nlr = 1e30\nwarmup_steps = 0\n");
    fs::write(f.path("hot.toml"), cfg).unwrap();
    let (out, config, data) = (f.path("hot"), f.path("hot.toml"), f.data());
    let args = [
        "train-teacher",
        "--config",
        s(&config),
        "--data",
        s(&data),
        "--out",
        s(&out),
    ];
    assert_eq!(code(&args), 3);
    let record = RunRecord::from_csv(&fs::read_to_string(out.join("run.csv")).unwrap()).unwrap();
    assert!(record.diverged.is_some());
    assert!(!out.join("teacher.sltw").exists());
}

#[test]
fn oracle_predictions_score_one() {
    let f = Fixture::new();
    let out = f.path("oracle.csv");
    ok(&[
        "evaluate",
        "--oracle-pred",
        "--data",
        s(&f.data()),
        "--seeds",
        "42,101,2048",
        "--out",
        s(&out),
    ]);
    let csv = fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("# config_hash="));
    let rows: Vec<&str> = csv.lines().skip(2).collect();
    assert_eq!(rows.len(), 4 * 5);
    for r in rows {
        let cols: Vec<&str> = r.split(',').collect();
        let want = if cols[2] == "std" { 0.0 } else { 1.0 };
        assert_eq!(cols[3].parse::<f64>().unwrap(), want, "{r}");
    }
}

#[test]
fn training_pipeline_is_deterministic() {
    let f = Fixture::new();
    let teacher = f.teacher();
    let data = f.data();
    let mut outputs = Vec::new();
    for name in ["s1", "s2"] {
        let out = f.path(name);
        ok(&[
            "distill",
            "--config",
            &f.config(),
            "--teacher",
            s(&teacher),
            "--data",
            s(&data),
            "--out",
            s(&out),
        ]);
        let eval = f.path(&format!("{name}_eval.csv"));
        ok(&[
            "evaluate",
            "--config",
            &f.config(),
            "--checkpoint",
            s(&out.join("student.sltw")),
            "--data",
            s(&data),
            "--out",
            s(&eval),
        ]);
        outputs.push((
            fs::read(out.join("student.sltw")).unwrap(),
            strip_wall_clock(&fs::read_to_string(out.join("run.csv")).unwrap()),
            fs::read_to_string(eval).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
    let record = RunRecord::from_csv(&fs::read_to_string(f.path("s1").join("run.csv")).unwrap()).unwrap();
    assert_eq!(record.steps.len(), 3);
    assert_eq!(record.label, "slot_cosine");
    assert_eq!(record.beta, 0.2);
    assert!(!record.config_hash.is_empty());
    assert_eq!(record.probes.iter().map(|p| p.step).collect::<Vec<_>>(), vec![2, 3]);
}

#[test]
fn distill_rejects_mismatched_slots() {
    let f = Fixture::new();
    let teacher = f.teacher();
    let at = TINY.find("[student]").unwrap();
    let cfg = format!("{}{}", &TINY[..at], TINY[at..].replacen("num_slots = 3", "num_slots = 4", 1));
    fs::write(f.path("mismatch.toml"), cfg).unwrap();
    assert_eq!(
        code(&[
            "distill",
            "--config",
            s(&f.path("mismatch.toml")),
            "--teacher",
            s(&teacher),
            "--data",
            s(&f.data()),
            "--out",
            s(&f.path("m"))
        ]),
        2
    );
}

#[test]
fn verify_theorem_rows_and_self_pairs() {
    let f = Fixture::new();
    let teacher = f.teacher();
    let out = f.path("bound.csv");
    ok(&[
        "verify-theorem",
        "--config",
        &f.config(),
        "--teacher",
        s(&teacher),
        "--student",
        s(&teacher),
        "--data",
        s(&f.data()),
        "--pairs",
        "10",
        "--out",
        s(&out),
    ]);
    let csv = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2 + 10 + 1);
    assert!(lines[12].starts_with("# summary mode=equalized pairs=10 violations=0"));
    for row in &lines[2..12] {
        assert_eq!(row.split(',').nth(1).unwrap().parse::<f64>().unwrap(), 0.0);
    }
    roxmltree::Document::parse(&fs::read_to_string(out.with_extension("svg")).unwrap()).unwrap();
}

#[test]
fn bench_same_checkpoint_gives_unit_ratios() {
    let f = Fixture::new();
    let teacher = f.teacher();
    let out = f.path("bench.csv");
    ok(&[
        "bench",
        "--config",
        &f.config(),
        "--teacher",
        s(&teacher),
        "--student",
        s(&teacher),
        "--out",
        s(&out),
    ]);
    let csv = fs::read_to_string(&out).unwrap();
    let ratio: Vec<f64> = csv
        .lines()
        .find(|l| l.starts_with("ratio,"))
        .unwrap()
        .split(',')
        .skip(1)
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(&ratio[..2], &[1.0, 1.0]);
    assert!(ratio[2] > 0.5 && ratio[2] < 2.0, "timing ratio {}", ratio[2]);
}

#[test]
fn report_sweep_and_single_run() {
    let f = Fixture::new();
    let teacher = f.teacher();
    let runs = f.path("sweep");
    ok(&[
        "distill",
        "--config",
        &f.config(),
        "--teacher",
        s(&teacher),
        "--data",
        s(&f.data()),
        "--out",
        s(&runs),
        "--sweep",
        "--steps",
        "2",
    ]);
    let prefix = f.path("table");
    ok(&["report", "--runs", s(&runs), "--out", s(&prefix)]);
    let csv = fs::read_to_string(f.path("table.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    let betas: Vec<f64> = rows.iter().map(|r| r.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert_eq!(betas, vec![0.1, 0.2, 0.3, 0.5, 0.8]);
    for svg in ["table_scatter.svg", "table_loss.svg"] {
        roxmltree::Document::parse(&fs::read_to_string(f.path(svg)).unwrap()).unwrap();
    }

    ok(&["report", "--runs", s(&runs.join("beta_0.2")), "--out", s(&f.path("one"))]);
    let csv = fs::read_to_string(f.path("one.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 2);

    assert_eq!(code(&["report", "--runs", s(&f.path("nothing_here")), "--out", s(&prefix)]), 4);
}

#[test]
fn report_refuses_mixed_datasets() {
    let f = Fixture::new();
    let teacher = f.teacher();
    let other = f.path("other_data");
    ok(&["gen-data", "--config", &f.config(), "--seed", "99", "--out", s(&other)]);
    for (name, data) in [("runs/a", f.data()), ("runs/b", other)] {
        ok(&[
            "distill",
            "--config",
            &f.config(),
            "--teacher",
            s(&teacher),
            "--data",
            s(&data),
            "--out",
            s(&f.path(name)),
            "--steps",
            "1",
        ]);
    }
    assert_eq!(code(&["report", "--runs", s(&f.path("runs")), "--out", s(&f.path("r"))]), 2);
}
