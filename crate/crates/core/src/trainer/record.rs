use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::metrics::Scores;

/// Scalars logged after one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub rec: f64,
    pub contrast: f64,
    pub kd: f64,
    pub total: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub wall_ms: f64,
}

/// Mean distillation cosine gap and mean decoded discrepancy over a fixed probe set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundProbe {
    pub step: usize,
    pub mean_c: f64,
    pub mean_lhs: f64,
    pub violations: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub config_hash: String,
    pub dataset_hash: String,
    pub label: String,
    /// Distillation weight; 0 for runs without a teacher.
    pub beta: f64,
    pub steps: Vec<StepLog>,
    pub probes: Vec<BoundProbe>,
    pub eval: Option<Scores>,
    pub param_count: usize,
    /// Set when the run stopped on a numerical failure.
    pub diverged: Option<String>,
}

pub const RUN_COLUMNS: &str = "step,rec,contrast,kd,total,grad_norm,wall_ms";

impl RunRecord {
    /// Mean of `f` over the first `n` logged steps.
    pub fn head_mean(&self, n: usize, f: impl Fn(&StepLog) -> f64) -> f64 {
        let k = n.min(self.steps.len()).max(1);
        self.steps.iter().take(k).map(&f).sum::<f64>() / k as f64
    }

    /// Mean of `f` over the last `n` logged steps.
    pub fn tail_mean(&self, n: usize, f: impl Fn(&StepLog) -> f64) -> f64 {
        let k = n.min(self.steps.len()).max(1);
        self.steps.iter().rev().take(k).map(&f).sum::<f64>() / k as f64
    }

    pub fn mean_wall_ms(&self) -> f64 {
        self.steps.iter().map(|s| s.wall_ms).sum::<f64>() / self.steps.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# config_hash={}\n# dataset_hash={}\n{RUN_COLUMNS}\n",
            self.config_hash, self.dataset_hash
        );
        for l in &self.steps {
            writeln!(
                s,
                "{},{},{},{},{},{},{:.3}",
                l.step, l.rec, l.contrast, l.kd, l.total, l.grad_norm, l.wall_ms
            )
            .expect("write to string");
        }
        for p in &self.probes {
            writeln!(
                s,
                "# probe step={} mean_c={} mean_lhs={} violations={}",
                p.step, p.mean_c, p.mean_lhs, p.violations
            )
            .expect("write to string");
        }
        let mut summary = format!(
            "# summary label={} beta={} seed={} steps={} params={} diverged={}",
            self.label,
            self.beta,
            self.seed,
            self.steps.len(),
            self.param_count,
            self.diverged.as_deref().unwrap_or("no").replace(char::is_whitespace, "_"),
        );
        if let Some(e) = &self.eval {
            write!(
                summary,
                " image_fg_ari={} image_mbo={} video_fg_ari={} video_mbo={}",
                e.image_fg_ari, e.image_mbo, e.video_fg_ari, e.video_mbo
            )
            .expect("write to string");
        }
        s.push_str(&summary);
        s.push('\n');
        s
    }

    /// Parse a CSV written by [`RunRecord::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut rec = RunRecord::default();
        let mut saw_header = false;
        for (i, line) in text.lines().enumerate() {
            if let Some(rest) = line.strip_prefix("# config_hash=") {
                rec.config_hash = rest.to_string();
            } else if let Some(rest) = line.strip_prefix("# dataset_hash=") {
                rec.dataset_hash = rest.to_string();
            } else if let Some(rest) = line.strip_prefix("# probe ") {
                let kv = key_values(rest);
                rec.probes.push(BoundProbe {
                    step: parse(&kv, "step", i)?,
                    mean_c: parse(&kv, "mean_c", i)?,
                    mean_lhs: parse(&kv, "mean_lhs", i)?,
                    violations: parse(&kv, "violations", i)?,
                });
            } else if let Some(rest) = line.strip_prefix("# summary ") {
                let kv = key_values(rest);
                rec.label = kv.iter().find(|(k, _)| k == "label").map(|(_, v)| v.clone()).unwrap_or_default();
                rec.beta = parse(&kv, "beta", i)?;
                rec.seed = parse(&kv, "seed", i)?;
                rec.param_count = parse(&kv, "params", i)?;
                let div: String = parse(&kv, "diverged", i)?;
                rec.diverged = (div != "no").then_some(div);
                if kv.iter().any(|(k, _)| k == "image_fg_ari") {
                    rec.eval = Some(Scores {
                        image_fg_ari: parse(&kv, "image_fg_ari", i)?,
                        image_mbo: parse(&kv, "image_mbo", i)?,
                        video_fg_ari: parse(&kv, "video_fg_ari", i)?,
                        video_mbo: parse(&kv, "video_mbo", i)?,
                    });
                }
            } else if line == RUN_COLUMNS {
                saw_header = true;
            } else if line.starts_with('#') || line.is_empty() {
                continue;
            } else {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 7 {
                    return Err(format!("line {}: expected 7 fields, got {}", i + 1, f.len()));
                }
                let num = |j: usize| f[j].parse::<f64>().map_err(|e| format!("line {}: {e}", i + 1));
                rec.steps.push(StepLog {
                    step: f[0].parse().map_err(|e| format!("line {}: {e}", i + 1))?,
                    rec: num(1)?,
                    contrast: num(2)?,
                    kd: num(3)?,
                    total: num(4)?,
                    grad_norm: num(5)?,
                    wall_ms: num(6)?,
                });
            }
        }
        if !saw_header {
            return Err("missing run header".into());
        }
        Ok(rec)
    }
}

fn key_values(s: &str) -> Vec<(String, String)> {
    s.split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn parse<T: std::str::FromStr>(kv: &[(String, String)], key: &str, line: usize) -> Result<T, String> {
    let v = kv
        .iter()
        .find(|(k, _)| k == key)
        .ok_or_else(|| format!("line {}: missing {key}", line + 1))?;
    v.1.parse().map_err(|_| format!("line {}: bad value for {key}", line + 1))
}
