//! Experiment plans: synthesize or load data, train every listed system,
//! decode the evaluation sets and write comparison tables.
//!
//! A plan is TOML:
//!
//! ```toml
//! name = "mu-sweep"
//! # data_dir = "data"        # existing `cstt synth` output, or:
//! [data]                     # synthesis spec, generated into OUT/data
//! target_ratio = 0.1
//!
//! [base]                     # training config shared by every run
//! steps = 2000
//! peak_lr = 1e-3
//!
//! [[run]]
//! label = "baseline"
//! system = "baseline"
//! seed = 1
//!
//! [[run]]
//! label = "cm-mse-2.33"
//! system = "cm"
//! seed = 1
//! overrides = { mu = 2.33, xmodal = { mode = "mse" } }
//! ```
//!
//! Reports carry no timestamps or absolute paths, so rerunning a plan gives
//! byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::synthcorpus::{self, Datasets, SynthSpec};
use crate::trainer::{self, SystemKind, TrainConfig};
use crate::util::sha256_hex;

pub const EVAL_SETS: [&str; 2] = ["eval_homogeneous", "eval_shifted"];

/// `100 * (baseline - system) / baseline`: positive means the system has
/// fewer errors.
pub fn relative_change(baseline_ter: f64, system_ter: f64) -> Result<f64> {
    if !(baseline_ter > 0.0) {
        return Err(Error::invalid(format!("baseline TER {baseline_ter} must be positive")));
    }
    Ok(100.0 * (baseline_ter - system_ter) / baseline_ter)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub label: String,
    pub system: SystemKind,
    pub seed: Option<u64>,
    #[serde(default)]
    pub overrides: toml::Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    #[serde(default = "default_name")]
    pub name: String,
    pub data_dir: Option<PathBuf>,
    pub data: Option<SynthSpec>,
    #[serde(default)]
    pub base: toml::Table,
    #[serde(rename = "run")]
    pub runs: Vec<RunSpec>,
}

fn default_name() -> String {
    "experiment".into()
}

impl Plan {
    pub fn parse(text: &str) -> Result<Self> {
        let plan: Self = toml::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs.is_empty() {
            return Err(Error::invalid("plan lists no runs"));
        }
        if self.data_dir.is_some() && self.data.is_some() {
            return Err(Error::invalid("give either data_dir or [data], not both"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for r in &self.runs {
            if r.label.is_empty() || r.label.contains(['/', '\\']) || r.label.starts_with('.') {
                return Err(Error::invalid(format!("run label {:?} is not a plain name", r.label)));
            }
            if !seen.insert(r.label.as_str()) {
                return Err(Error::invalid(format!("duplicate run label {:?}", r.label)));
            }
        }
        Ok(())
    }

    /// Base table, then the run's overrides (deep-merged), then its system
    /// and seed.
    pub fn resolve(&self, run: &RunSpec) -> Result<TrainConfig> {
        let mut table = self.base.clone();
        merge(&mut table, &run.overrides);
        table.insert("system".into(), toml::Value::String(run.system.to_string()));
        if let Some(seed) = run.seed {
            let seed = i64::try_from(seed).map_err(|_| Error::invalid(format!("seed {seed} too large")))?;
            table.insert("seed".into(), toml::Value::Integer(seed));
        }
        let cfg: TrainConfig = toml::Value::Table(table).try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge(into: &mut toml::Table, from: &toml::Table) {
    for (k, v) in from {
        match (into.get_mut(k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            _ => {
                into.insert(k.clone(), v.clone());
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub system: SystemKind,
    pub status: String,
    pub error: Option<String>,
    pub results: BTreeMap<String, MetricsReport>,
    /// Relative TER change against the first baseline run, per eval set.
    pub relative_ter_change: BTreeMap<String, f64>,
    pub final_train_loss: Option<f64>,
    pub checkpoint: Option<String>,
    pub checkpoint_sha256: Option<String>,
    pub manifest_sha256: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub rows: Vec<ReportRow>,
    pub table: String,
    pub jsonl: String,
}

impl ReportBundle {
    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

fn prepare_data(plan: &Plan, plan_dir: &Path, out: &Path) -> Result<(Datasets, PathBuf)> {
    match &plan.data_dir {
        Some(d) => {
            let dir = plan_dir.join(d);
            Ok((synthcorpus::load_datasets(&dir)?, dir))
        }
        None => {
            let dir = out.join("data");
            let spec = plan.data.clone().unwrap_or_default();
            synthcorpus::synthesize_to_dir(&spec, &dir)?;
            // Reload so every run sees exactly what is on disk.
            Ok((synthcorpus::load_datasets(&dir)?, dir))
        }
    }
}

struct RunOutput {
    results: BTreeMap<String, MetricsReport>,
    final_loss: Option<f64>,
    checkpoint: String,
    checkpoint_sha256: String,
}

fn execute_run(plan: &Plan, run: &RunSpec, ds: &Datasets, out: &Path) -> Result<RunOutput> {
    let cfg = plan.resolve(run)?;
    let run_dir = out.join("runs").join(&run.label);
    let outcome = trainer::train(ds, &cfg, &run_dir)?;
    let inference = outcome.model.to_inference()?;
    let mut results = BTreeMap::new();
    for set in EVAL_SETS {
        let utts = match set {
            "eval_homogeneous" => &ds.eval_homogeneous,
            _ => &ds.eval_shifted,
        };
        let (hyps, report) = trainer::evaluate(&inference, &ds.language.vocab, utts)?;
        let mut text = String::new();
        for (u, h) in utts.iter().zip(&hyps) {
            writeln!(text, "{}\t{}\t{}", u.id, u.transcript(), h).expect("write to String");
        }
        let path = run_dir.join(format!("hyp_{set}.tsv"));
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        results.insert(set.to_string(), report);
    }
    let bytes = fs::read(&outcome.checkpoint).map_err(|e| Error::io(&outcome.checkpoint, e))?;
    Ok(RunOutput {
        results,
        final_loss: outcome.reports.last().map(|r| r.total),
        checkpoint: format!("runs/{}/checkpoint.bin", run.label),
        checkpoint_sha256: sha256_hex(&bytes),
    })
}

/// Trains and scores every run of the plan, writing `report.txt` and
/// `report.jsonl` into `out`. A failing run is reported as FAILED and the
/// remaining runs still execute.
pub fn run_experiment(plan: &Plan, plan_dir: &Path, out: &Path) -> Result<ReportBundle> {
    plan.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (ds, data_dir) = prepare_data(plan, plan_dir, out)?;
    let mut manifests = BTreeMap::new();
    for split in synthcorpus::SPLITS {
        manifests.insert(split.to_string(), synthcorpus::manifest_checksum(&data_dir, split)?);
    }

    let mut rows = Vec::with_capacity(plan.runs.len());
    for run in &plan.runs {
        let row = match execute_run(plan, run, &ds, out) {
            Ok(o) => ReportRow {
                label: run.label.clone(),
                system: run.system,
                status: "OK".into(),
                error: None,
                results: o.results,
                relative_ter_change: BTreeMap::new(),
                final_train_loss: o.final_loss,
                checkpoint: Some(o.checkpoint),
                checkpoint_sha256: Some(o.checkpoint_sha256),
                manifest_sha256: manifests.clone(),
            },
            Err(e) => ReportRow {
                label: run.label.clone(),
                system: run.system,
                status: "FAILED".into(),
                error: Some(e.to_string()),
                results: BTreeMap::new(),
                relative_ter_change: BTreeMap::new(),
                final_train_loss: None,
                checkpoint: None,
                checkpoint_sha256: None,
                manifest_sha256: manifests.clone(),
            },
        };
        rows.push(row);
    }
    fill_relative_changes(&mut rows);

    let table = render_table(&plan.name, &rows);
    let mut jsonl = String::new();
    for r in &rows {
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
    }
    let write = |name: &str, text: &str| {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("report.txt", &table)?;
    write("report.jsonl", &jsonl)?;
    Ok(ReportBundle { rows, table, jsonl })
}

pub fn run_experiment_file(plan_path: &Path, out: &Path) -> Result<ReportBundle> {
    let text = fs::read_to_string(plan_path).map_err(|e| Error::io(plan_path, e))?;
    let plan = Plan::parse(&text)?;
    let dir = plan_path.parent().unwrap_or(Path::new("."));
    run_experiment(&plan, dir, out)
}

fn fill_relative_changes(rows: &mut [ReportRow]) {
    let Some(base) = rows
        .iter()
        .find(|r| r.system == SystemKind::Baseline && r.status == "OK")
        .map(|r| r.results.clone())
    else {
        return;
    };
    for row in rows.iter_mut().filter(|r| r.status == "OK") {
        for (set, rep) in &row.results {
            if let Some(b) = base.get(set) {
                if let Ok(c) = relative_change(b.ter, rep.ter) {
                    row.relative_ter_change.insert(set.clone(), c);
                }
            }
        }
    }
}

fn short(set: &str) -> &str {
    set.strip_prefix("eval_").unwrap_or(set)
}

/// Fixed-width table: one row per run with CS-All / CS-Man / CS-Eng for
/// each eval set, then the relative TER change against the baseline.
pub fn render_table(name: &str, rows: &[ReportRow]) -> String {
    let label_w = rows.iter().map(|r| r.label.chars().count()).max().unwrap_or(0).max(6);
    let mut s = String::new();
    writeln!(s, "# {name}").unwrap();
    let mut head = format!("{:<label_w$}  {:<8}", "run", "system");
    for set in EVAL_SETS {
        for col in ["All", "Man", "Eng"] {
            head.push_str(&format!("  {:>16}", format!("{}:CS-{col}", short(set))));
        }
    }
    writeln!(s, "{head}").unwrap();
    for r in rows {
        let mut line = format!("{:<label_w$}  {:<8}", r.label, r.system.to_string());
        if r.status != "OK" {
            line.push_str("  FAILED");
            if let Some(e) = &r.error {
                line.push_str(&format!(" ({e})"));
            }
        } else {
            for set in EVAL_SETS {
                match r.results.get(set) {
                    Some(m) => {
                        for v in [m.ter, m.cer_man, m.wer_eng] {
                            line.push_str(&format!("  {v:>16.2}"));
                        }
                    }
                    None => line.push_str(&format!("  {:>16}  {:>16}  {:>16}", "-", "-", "-")),
                }
            }
        }
        writeln!(s, "{}", line.trim_end()).unwrap();
    }
    let compared: Vec<&ReportRow> = rows
        .iter()
        .filter(|r| r.system != SystemKind::Baseline && !r.relative_ter_change.is_empty())
        .collect();
    if !compared.is_empty() {
        writeln!(s).unwrap();
        let mut head = format!("{:<label_w$}", "vs baseline (relative TER change %)");
        let first_w = head.chars().count();
        for set in EVAL_SETS {
            head.push_str(&format!("  {:>16}", short(set)));
        }
        writeln!(s, "{head}").unwrap();
        for r in compared {
            let mut line = format!("{:<first_w$}", r.label);
            for set in EVAL_SETS {
                match r.relative_ter_change.get(set) {
                    Some(c) => line.push_str(&format!("  {c:>+16.2}")),
                    None => line.push_str(&format!("  {:>16}", "-")),
                }
            }
            writeln!(s, "{line}").unwrap();
        }
    }
    writeln!(s).unwrap();
    for r in rows.iter().filter(|r| r.status == "OK") {
        writeln!(
            s,
            "{}: checkpoint {} sha256 {}",
            r.label,
            r.checkpoint.as_deref().unwrap_or("-"),
            r.checkpoint_sha256.as_deref().unwrap_or("-")
        )
        .unwrap();
    }
    if let Some(r) = rows.first() {
        for (split, sum) in &r.manifest_sha256 {
            writeln!(s, "manifest {split}.jsonl sha256 {sum}").unwrap();
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_change_examples() {
        assert!((relative_change(15.6, 13.2).unwrap() - 15.384_615_384_615_385).abs() < 1e-12);
        assert_eq!(relative_change(7.5, 7.5).unwrap(), 0.0);
        assert_eq!(relative_change(10.0, 5.0).unwrap(), 50.0);
        assert!(relative_change(0.0, 1.0).is_err());
    }

    const PLAN: &str = r#"
name = "t"
[base]
steps = 10
peak_lr = 1e-3
[base.xmodal]
temperature = 0.5

[[run]]
label = "baseline"
system = "baseline"
seed = 3

[[run]]
label = "cm"
system = "cm"
overrides = { mu = 3.0, xmodal = { mode = "mse" } }
"#;

    #[test]
    fn plan_overrides_deep_merge() {
        let plan = Plan::parse(PLAN).unwrap();
        let b = plan.resolve(&plan.runs[0]).unwrap();
        assert_eq!((b.system, b.seed, b.steps), (SystemKind::Baseline, 3, 10));
        let c = plan.resolve(&plan.runs[1]).unwrap();
        assert_eq!(c.system, SystemKind::Cm);
        assert_eq!(c.mu, 3.0);
        assert_eq!(c.xmodal.mode, "mse");
        assert_eq!(c.xmodal.temperature, 0.5);
    }

    #[test]
    fn plan_rejects_bad_labels_and_empty_runs() {
        assert!(Plan::parse("name = \"x\"\nrun = []\n").is_err());
        let dup = PLAN.replace("label = \"cm\"", "label = \"baseline\"");
        assert!(Plan::parse(&dup).is_err());
        let bad = PLAN.replace("label = \"cm\"", "label = \"../x\"");
        assert!(Plan::parse(&bad).is_err());
    }

    #[test]
    fn failed_rows_render_and_skip_comparisons() {
        let mut ok = ReportRow {
            label: "baseline".into(),
            system: SystemKind::Baseline,
            status: "OK".into(),
            error: None,
            results: BTreeMap::new(),
            relative_ter_change: BTreeMap::new(),
            final_train_loss: Some(1.0),
            checkpoint: Some("runs/baseline/checkpoint.bin".into()),
            checkpoint_sha256: Some("ab".into()),
            manifest_sha256: BTreeMap::new(),
        };
        let m = |ter: f64| MetricsReport {
            ter,
            ..MetricsReport::default()
        };
        ok.results.insert("eval_homogeneous".into(), m(20.0));
        let mut sys = ok.clone();
        sys.label = "cm".into();
        sys.system = SystemKind::Cm;
        sys.results.insert("eval_homogeneous".into(), m(15.0));
        let failed = ReportRow {
            label: "swap".into(),
            status: "FAILED".into(),
            error: Some("boom".into()),
            results: BTreeMap::new(),
            ..sys.clone()
        };
        let mut rows = vec![ok, sys, failed];
        fill_relative_changes(&mut rows);
        assert_eq!(rows[1].relative_ter_change["eval_homogeneous"], 25.0);
        assert!(rows[2].relative_ter_change.is_empty());
        let t = render_table("x", &rows);
        assert!(t.contains("FAILED (boom)"));
        assert!(t.contains("+25.00"));
    }
}
