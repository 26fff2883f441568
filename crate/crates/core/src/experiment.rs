//! Run configuration, multi-seed runs, run artifacts and the ablation grid.
//!
//! A run directory holds `metrics_seed<s>.csv` and `seed<s>.toml` per seed
//! plus `summary.txt`. The ablation grid nests one run directory per regime
//! and flag combination and writes `ablation.csv` next to them.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ccl::train::{AblationFlags, TrainConfig, Trainer, TrainerSettings};
use crate::ccl::CclHyper;
use crate::data::{generate_dataset, load_csv_dataset, load_csv_test, DatasetSpec, LabeledSet, UnlabeledRegime, UnlabeledSet};
use crate::error::{Error, Result};
use crate::metrics::{metrics_csv, EvalReport, MetricsRow};
use crate::model::{save_checkpoint, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Also write the final model of every seed.
    pub checkpoint: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            output_dir: PathBuf::from("runs/default"),
            checkpoint: false,
        }
    }
}

/// Real data instead of the synthetic generator: a training CSV whose
/// unlabeled rows have an empty label cell, and an optional labeled test CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub train: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default = "default_label_column")]
    pub label_column: String,
}

fn default_label_column() -> String {
    "label".into()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DatasetSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<CsvSource>,
    pub model: ModelConfig,
    pub ccl: CclHyper,
    pub train: TrainConfig,
    pub ablation: AblationFlags,
    pub run: RunSection,
}

/// Splits `section.key=value` (a leading `--` is accepted).
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    let body = arg.strip_prefix("--").unwrap_or(arg);
    let (key, value) = body
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {arg:?} is not of the form section.key=value")))?;
    if !key.contains('.') || key.starts_with('.') || key.ends_with('.') {
        return Err(Error::Config(format!("override key {key:?} must look like section.key")));
    }
    Ok((key.to_string(), value.to_string()))
}

/// A TOML value literal, or the raw text as a string when it does not parse.
fn override_value(text: &str) -> toml::Value {
    format!("v = {text}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

impl RunConfig {
    /// Parses TOML text, applies overrides and validates.
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut root: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for (key, value) in overrides {
            let mut parts = key.split('.').peekable();
            let mut table = &mut root;
            while let Some(part) = parts.next() {
                if parts.peek().is_none() {
                    table.insert(part.to_string(), override_value(value));
                    break;
                }
                let entry = table
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                table = entry
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("override {key}: {part} is not a section")))?;
            }
        }
        let config: RunConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string().trim().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("every field is representable in TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.seeds.is_empty() {
            return Err(Error::Config("run.seeds must list at least one seed".into()));
        }
        let mut seen = self.run.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.run.seeds.len() {
            return Err(Error::Config("run.seeds contains duplicates".into()));
        }
        self.model.validate()?;
        self.ccl.validate()?;
        self.train.validate()?;
        if self.csv.is_none() {
            self.data.validate()?;
            if self.model.input_dim != self.data.feature_dim {
                return Err(Error::Config(format!(
                    "model.input_dim = {} but data.feature_dim = {}",
                    self.model.input_dim, self.data.feature_dim
                )));
            }
            if self.model.num_classes != self.data.num_classes {
                return Err(Error::Config(format!(
                    "model.num_classes = {} but data.num_classes = {}",
                    self.model.num_classes, self.data.num_classes
                )));
            }
        }
        Ok(())
    }

    pub fn settings(&self) -> TrainerSettings {
        TrainerSettings {
            model: self.model.clone(),
            hyper: self.ccl.clone(),
            train: self.train.clone(),
            flags: self.ablation,
        }
    }

    /// Synthetic data of a run seed use `data.seed + seed`.
    pub fn dataset_spec(&self, seed: u64) -> DatasetSpec {
        DatasetSpec {
            seed: self.data.seed.wrapping_add(seed),
            ..self.data.clone()
        }
    }
}

/// Training pools and optional test set of one seed.
pub struct RunData {
    pub labeled: LabeledSet,
    pub unlabeled: UnlabeledSet,
    pub test: Option<LabeledSet>,
}

pub fn load_data(config: &RunConfig, seed: u64) -> Result<RunData> {
    match &config.csv {
        Some(src) => {
            let train = load_csv_dataset(&src.train, &src.label_column)?;
            let test = match &src.test {
                Some(p) => Some(load_csv_test(p, &src.label_column, &train)?),
                None => None,
            };
            if train.labeled.num_classes != config.model.num_classes
                || train.labeled.features.cols() != config.model.input_dim
            {
                return Err(Error::Config(format!(
                    "{} has {} features and {} classes; set model.input_dim and model.num_classes to match",
                    src.train.display(),
                    train.labeled.features.cols(),
                    train.labeled.num_classes
                )));
            }
            Ok(RunData {
                labeled: train.labeled,
                unlabeled: train.unlabeled,
                test,
            })
        }
        None => {
            let ds = generate_dataset(&config.dataset_spec(seed))?;
            Ok(RunData {
                labeled: ds.labeled,
                unlabeled: ds.unlabeled,
                test: Some(ds.test),
            })
        }
    }
}

/// Result of one seed, also stored as `seed<s>.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub wall_seconds: f64,
    pub skipped_rpl_steps: usize,
    pub final_metrics: MetricsRow,
    pub prior_estimate: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<EvalReport>,
    #[serde(skip)]
    pub rows: Vec<MetricsRow>,
}

pub fn metrics_file(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("metrics_seed{seed}.csv"))
}

pub fn outcome_file(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("seed{seed}.toml"))
}

/// Trains one seed; only writes a checkpoint when `run.checkpoint` is set.
pub fn run_seed(config: &RunConfig, seed: u64) -> Result<SeedOutcome> {
    let start = Instant::now();
    let data = load_data(config, seed)?;
    let trainer = Trainer::new(config.settings(), &data.labeled, &data.unlabeled, data.test.as_ref(), seed)?;
    let out = trainer.run()?;
    if config.run.checkpoint {
        let dir = &config.run.output_dir;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_checkpoint(&dir.join(format!("model_seed{seed}.ckpt")), &out.state, config.train.steps)?;
    }
    Ok(SeedOutcome {
        seed,
        wall_seconds: start.elapsed().as_secs_f64(),
        skipped_rpl_steps: out.skipped_rpl_steps,
        final_metrics: out.rows.last().expect("the initial evaluation is always recorded").clone(),
        prior_estimate: out.prior.pi.as_slice().to_vec(),
        report: out.final_report,
        rows: out.rows,
    })
}

/// Writes the metrics CSV and the outcome file of one seed into `dir`.
pub fn write_seed_artifacts(dir: &Path, outcome: &SeedOutcome) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = metrics_file(dir, outcome.seed);
    std::fs::write(&path, metrics_csv(&outcome.rows)).map_err(|e| Error::io(&path, e))?;
    let path = outcome_file(dir, outcome.seed);
    let text = toml::to_string(outcome).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_seed_outcome(dir: &Path, seed: u64) -> Result<SeedOutcome> {
    let path = outcome_file(dir, seed);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

/// Mean and sample standard deviation; the deviation is 0 for one value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregate {
    pub top1: (f64, f64),
    pub ece: (f64, f64),
    pub prior_l1: (f64, f64),
}

pub fn aggregate(outcomes: &[SeedOutcome]) -> Aggregate {
    let col = |f: fn(&MetricsRow) -> f64| mean_std(&outcomes.iter().map(|o| f(&o.final_metrics)).collect::<Vec<_>>());
    Aggregate {
        top1: col(|r| r.top1),
        ece: col(|r| r.ece),
        prior_l1: col(|r| r.prior_l1),
    }
}

/// Structured text: resolved configuration, per-seed final metrics, the
/// aggregate over seeds and the wall time.
pub fn render_summary(config: &RunConfig, outcomes: &[SeedOutcome], wall_seconds: f64) -> String {
    let mut out = String::from("# run summary\n\n[config]\n");
    for line in config.to_toml().lines() {
        let _ = writeln!(out, "  {line}");
    }
    out.push_str("\n[final]\n");
    for o in outcomes {
        let m = &o.final_metrics;
        let _ = writeln!(
            out,
            "  seed {}: step {} top1 {:.4} ece {:.4} prior_l1 {:.4} masked_fraction {:.4} skipped_rpl_steps {} ({:.1} s)",
            o.seed, m.step, m.top1, m.ece, m.prior_l1, m.masked_fraction, o.skipped_rpl_steps, o.wall_seconds
        );
        if let Some(r) = &o.report {
            let recall: Vec<String> = r.per_class_recall.iter().map(|v| format!("{v:.3}")).collect();
            let _ = writeln!(out, "    per_class_recall [{}]", recall.join(", "));
        }
        let prior: Vec<String> = o.prior_estimate.iter().map(|v| format!("{v:.4}")).collect();
        let _ = writeln!(out, "    prior_estimate [{}]", prior.join(", "));
    }
    let agg = aggregate(outcomes);
    let _ = writeln!(out, "\n[aggregate] ({} seeds, mean ± std)", outcomes.len());
    let _ = writeln!(out, "  top1     {:.4} ± {:.4}", agg.top1.0, agg.top1.1);
    let _ = writeln!(out, "  ece      {:.4} ± {:.4}", agg.ece.0, agg.ece.1);
    let _ = writeln!(out, "  prior_l1 {:.4} ± {:.4}", agg.prior_l1.0, agg.prior_l1.1);
    let _ = writeln!(out, "\nwall_time_seconds = {wall_seconds:.2}");
    out
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seeds: Vec<SeedOutcome>,
    pub wall_seconds: f64,
    pub summary: String,
}

/// Trains every seed in order, writing each seed's artifacts as soon as it
/// finishes, then the summary.
pub fn run(config: &RunConfig, mut progress: impl FnMut(&SeedOutcome)) -> Result<RunOutcome> {
    config.validate()?;
    let start = Instant::now();
    let dir = &config.run.output_dir;
    let mut seeds = Vec::with_capacity(config.run.seeds.len());
    for &seed in &config.run.seeds {
        let outcome = run_seed(config, seed)?;
        write_seed_artifacts(dir, &outcome)?;
        progress(&outcome);
        seeds.push(outcome);
    }
    finish_run(config, seeds, start.elapsed().as_secs_f64())
}

/// Writes `summary.txt` for seeds that already have their artifacts.
pub fn finish_run(config: &RunConfig, seeds: Vec<SeedOutcome>, wall_seconds: f64) -> Result<RunOutcome> {
    let dir = &config.run.output_dir;
    let summary = render_summary(config, &seeds, wall_seconds);
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("summary.txt");
    std::fs::write(&path, &summary).map_err(|e| Error::io(&path, e))?;
    Ok(RunOutcome {
        seeds,
        wall_seconds,
        summary,
    })
}

/// One line of the ablation comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub regime: String,
    pub flags: AblationFlags,
    pub seeds: usize,
    pub top1: (f64, f64),
    pub ece: (f64, f64),
    pub prior_l1: (f64, f64),
}

pub const ABLATION_HEADER: &str =
    "regime,dual_branch,reliable_pl,smoothed_pl,energy_mask,seeds,top1_mean,top1_std,ece_mean,ece_std,prior_l1_mean,prior_l1_std";

impl AblationRow {
    pub fn to_csv_line(&self) -> String {
        let f = self.flags;
        format!(
            "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.regime,
            f.dual_branch,
            f.reliable_pl,
            f.smoothed_pl,
            f.energy_mask,
            self.seeds,
            self.top1.0,
            self.top1.1,
            self.ece.0,
            self.ece.1,
            self.prior_l1.0,
            self.prior_l1.1
        )
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

/// `consistent` (γ_u = γ_l), `uniform`, `reversed` (ratio γ_l), or any
/// explicit `gamma_u` value such as `50` or `reversed:20`.
pub fn regime_from_name(name: &str, gamma_l: f64) -> Result<UnlabeledRegime> {
    match name.trim() {
        "consistent" => Ok(UnlabeledRegime::LongTail(gamma_l)),
        "reversed" => Ok(UnlabeledRegime::Reversed(gamma_l)),
        other => other.parse(),
    }
}

/// Directory of one grid cell below the base output directory.
pub fn grid_cell_dir(base: &Path, regime: &UnlabeledRegime, flags: &AblationFlags) -> PathBuf {
    base.join(format!("regime_{}", regime.to_string().replace(':', "_"))).join(flags.label())
}

/// The configuration of one grid cell.
pub fn grid_cell_config(base: &RunConfig, regime: UnlabeledRegime, flags: AblationFlags) -> RunConfig {
    let mut config = base.clone();
    config.data.gamma_u = regime;
    config.ablation = flags;
    config.run.output_dir = grid_cell_dir(&base.run.output_dir, &regime, &flags);
    config
}

/// Runs the six ablation rows for each regime and writes `ablation.csv`.
pub fn ablation_grid(
    base: &RunConfig,
    regimes: &[UnlabeledRegime],
    mut progress: impl FnMut(&RunConfig, &SeedOutcome),
) -> Result<Vec<AblationRow>> {
    if base.csv.is_some() {
        return Err(Error::Config("the ablation grid varies the synthetic regime; remove the [csv] section".into()));
    }
    if regimes.is_empty() {
        return Err(Error::Config("the ablation grid needs at least one regime".into()));
    }
    let mut rows = Vec::new();
    for &regime in regimes {
        for flags in AblationFlags::TABLE {
            let config = grid_cell_config(base, regime, flags);
            let outcome = run(&config, |o| progress(&config, o))?;
            let agg = aggregate(&outcome.seeds);
            rows.push(AblationRow {
                regime: regime.to_string(),
                flags,
                seeds: outcome.seeds.len(),
                top1: agg.top1,
                ece: agg.ece,
                prior_l1: agg.prior_l1,
            });
        }
    }
    let dir = &base.run.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("ablation.csv");
    std::fs::write(&path, ablation_csv(&rows)).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut c = RunConfig::default();
        c.data.num_classes = 3;
        c.data.feature_dim = 2;
        c.data.n1 = 10;
        c.data.m1 = 20;
        c.data.gamma_l = 5.0;
        c.data.test_per_class = 5;
        c.model.input_dim = 2;
        c.model.num_classes = 3;
        c.model.hidden_dims = vec![8];
        c.model.embed_dim = 4;
        c.train.steps = 6;
        c.train.eval_interval = 3;
        c.train.batch_size = 8;
        c
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml_str(&c.to_toml(), &[]).unwrap(), c);
        assert_eq!(RunConfig::from_toml_str("", &[]).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = RunConfig::from_toml_str("[train]\nstepz = 3\n", &[]).unwrap_err().to_string();
        assert!(e.contains("stepz"), "{e}");
        let e = RunConfig::from_toml_str("[trian]\n", &[]).unwrap_err().to_string();
        assert!(e.contains("trian"), "{e}");
    }

    #[test]
    fn overrides_win_over_the_file() {
        let ov: Vec<_> = ["--train.steps=7", "ablation.dual_branch=false", "data.gamma_u=reversed:50", "run.seeds=[3, 4]"]
            .iter()
            .map(|a| parse_override(a).unwrap())
            .collect();
        let c = RunConfig::from_toml_str("[train]\nsteps = 100\n", &ov).unwrap();
        assert_eq!(c.train.steps, 7);
        assert!(!c.ablation.dual_branch);
        assert_eq!(c.data.gamma_u, UnlabeledRegime::Reversed(50.0));
        assert_eq!(c.run.seeds, vec![3, 4]);
        assert!(parse_override("--steps=3").is_err());
        assert!(parse_override("train.steps").is_err());
    }

    #[test]
    fn mismatched_dimensions_are_rejected() {
        let e = RunConfig::from_toml_str("[model]\ninput_dim = 3\n", &[]).unwrap_err().to_string();
        assert!(e.contains("input_dim"), "{e}");
        assert!(RunConfig::from_toml_str("[run]\nseeds = []\n", &[]).is_err());
    }

    #[test]
    fn zero_steps_give_the_initial_row_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small();
        c.train.steps = 0;
        c.run.output_dir = dir.path().to_path_buf();
        let out = run(&c, |_| {}).unwrap();
        assert_eq!(out.seeds[0].rows.len(), 1);
        assert_eq!(out.seeds[0].final_metrics.step, 0);
        assert!(dir.path().join("summary.txt").exists());
    }

    #[test]
    fn seed_outcome_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small();
        c.run.output_dir = dir.path().to_path_buf();
        c.run.seeds = vec![2];
        let out = run(&c, |_| {}).unwrap();
        let mut back = read_seed_outcome(dir.path(), 2).unwrap();
        back.rows = out.seeds[0].rows.clone();
        assert_eq!(back, out.seeds[0]);
    }

    #[test]
    fn regime_names() {
        assert_eq!(regime_from_name("consistent", 100.0).unwrap(), UnlabeledRegime::LongTail(100.0));
        assert_eq!(regime_from_name("reversed", 10.0).unwrap(), UnlabeledRegime::Reversed(10.0));
        assert_eq!(regime_from_name("uniform", 10.0).unwrap(), UnlabeledRegime::Uniform);
        assert_eq!(regime_from_name("reversed:5", 10.0).unwrap(), UnlabeledRegime::Reversed(5.0));
        assert!(regime_from_name("sideways", 10.0).is_err());
    }

    #[test]
    fn grid_over_one_regime_has_six_rows_and_full_row_matches_plain_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small();
        c.run.output_dir = dir.path().to_path_buf();
        let rows = ablation_grid(&c, &[UnlabeledRegime::Uniform], |_, _| {}).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0].flags, AblationFlags::new(false, false, false, true));
        let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
        assert_eq!(csv.lines().count(), 7);

        let mut plain = c.clone();
        plain.data.gamma_u = UnlabeledRegime::Uniform;
        plain.ablation = AblationFlags::FULL;
        plain.run.output_dir = dir.path().join("plain");
        run(&plain, |_| {}).unwrap();
        let cell = grid_cell_dir(dir.path(), &UnlabeledRegime::Uniform, &AblationFlags::FULL);
        let a = std::fs::read(metrics_file(&cell, 0)).unwrap();
        let b = std::fs::read(metrics_file(&plain.run.output_dir, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mean_std_basics() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}
