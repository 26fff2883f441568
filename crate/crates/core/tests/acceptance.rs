//! Acceptance report: one PASS/FAIL line per criterion, then a nonzero exit
//! if any criterion failed. Criteria 7 to 9 train the desk configuration in
//! `configs/desk.toml` and take several minutes on one core.

mod common;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use ccl_core::ccl::train::AblationFlags;
use ccl_core::experiment::{grid_cell_config, mean_std, metrics_file, regime_from_name, run, run_seed, RunConfig, SeedOutcome};
use ccl_core::gradcheck::{run_suite, DEFAULT_SEEDS, DEFAULT_STEP, DEFAULT_TOLERANCE};
use ccl_core::metrics::MetricsRow;
use common::Verdict;

const DESK: &str = include_str!("../../../configs/desk.toml");
const REGIMES: [&str; 3] = ["consistent", "uniform", "reversed"];
const MIN_GAIN: f64 = 0.02;
const MAX_SECONDS_PER_SEED: f64 = 600.0;

fn flags(bits: &str) -> AblationFlags {
    let b: Vec<bool> = bits.chars().map(|c| c == '1').collect();
    AblationFlags::new(b[0], b[1], b[2], b[3])
}

/// Trained desk cells keyed by regime name and flag bits.
struct Cells {
    base: RunConfig,
    done: BTreeMap<(&'static str, &'static str), Vec<SeedOutcome>>,
}

impl Cells {
    fn get(&mut self, regime: &'static str, bits: &'static str) -> &[SeedOutcome] {
        if !self.done.contains_key(&(regime, bits)) {
            let start = Instant::now();
            let r = regime_from_name(regime, self.base.data.gamma_l).unwrap();
            let config = grid_cell_config(&self.base, r, flags(bits));
            let outcomes: Vec<SeedOutcome> =
                config.run.seeds.iter().map(|&s| run_seed(&config, s).expect("desk run trains")).collect();
            let top1 = mean_std(&outcomes.iter().map(|o| o.final_metrics.top1).collect::<Vec<_>>());
            eprintln!(
                "  trained {regime:<10} {bits}: top1 {:.4} ± {:.4} ({:.0} s)",
                top1.0,
                top1.1,
                start.elapsed().as_secs_f64()
            );
            self.done.insert((regime, bits), outcomes);
        }
        &self.done[&(regime, bits)]
    }

    fn mean(&mut self, regime: &'static str, bits: &'static str, f: fn(&MetricsRow) -> f64) -> f64 {
        let v: Vec<f64> = self.get(regime, bits).iter().map(|o| f(&o.final_metrics)).collect();
        mean_std(&v).0
    }
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let suite = run_suite(&DEFAULT_SEEDS, DEFAULT_STEP, DEFAULT_TOLERANCE).unwrap();
    let secs = start.elapsed().as_secs_f64();
    Verdict::new(
        suite.passed() && secs < 60.0,
        format!(
            "{} cases, max rel err {:.3e} (tol {DEFAULT_TOLERANCE:e}, step {DEFAULT_STEP:e}), {secs:.2} s",
            suite.cases.len(),
            suite.max_rel_err()
        ),
    )
}

fn ccl_gain(cells: &mut Cells) -> Verdict {
    let full = cells.mean("consistent", "1111", |m| m.top1);
    let base = cells.mean("consistent", "0000", |m| m.top1);
    let slowest = ["1111", "0000"]
        .iter()
        .flat_map(|b| cells.get("consistent", b).iter().map(|o| o.wall_seconds).collect::<Vec<_>>())
        .fold(0.0, f64::max);
    Verdict::new(
        full - base >= MIN_GAIN && slowest < MAX_SECONDS_PER_SEED,
        format!("full {full:.4} vs baseline {base:.4}: gain {:+.4} (need ≥ {MIN_GAIN}); slowest seed {slowest:.1} s", full - base),
    )
}

fn energy_vs_confidence(cells: &mut Cells) -> Verdict {
    let (pl_e, pl_c) = (cells.mean("reversed", "1111", |m| m.prior_l1), cells.mean("reversed", "1110", |m| m.prior_l1));
    let (ece_e, ece_c) = (cells.mean("reversed", "1111", |m| m.ece), cells.mean("reversed", "1110", |m| m.ece));
    Verdict::new(
        pl_e < pl_c && ece_e <= ece_c,
        format!("reversed: prior_l1 energy {pl_e:.4} vs confidence {pl_c:.4}; ece energy {ece_e:.4} vs confidence {ece_c:.4}"),
    )
}

fn ablation_direction(cells: &mut Cells) -> Verdict {
    let mut avg = |bits: &'static str| REGIMES.iter().map(|r| cells.mean(r, bits, |m| m.top1)).sum::<f64>() / 3.0;
    let (full, no_rpl, no_spl) = (avg("1111"), avg("1011"), avg("1101"));
    Verdict::new(
        no_rpl < full && no_spl <= full,
        format!("mean top1 over 3 regimes: full {full:.4}, without rpl {no_rpl:.4}, without spl {no_spl:.4}"),
    )
}

fn determinism(base: &RunConfig) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut config = base.clone();
    config.train.steps = 300;
    config.train.eval_interval = 100;
    config.run.seeds = vec![0, 3];
    let mut same = true;
    for attempt in ["a", "b"] {
        config.run.output_dir = dir.path().join(attempt);
        run(&config, |_| {}).unwrap();
    }
    for &s in &config.run.seeds {
        let a = std::fs::read(metrics_file(&dir.path().join("a"), s)).unwrap();
        let b = std::fs::read(metrics_file(&dir.path().join("b"), s)).unwrap();
        same &= a == b && !a.is_empty();
    }
    Verdict::new(same, "two runs of the desk config (300 steps, seeds 0 and 3) give byte-identical metrics CSVs")
}

fn main() -> ExitCode {
    let start = Instant::now();
    let base = RunConfig::from_toml_str(DESK, &[]).expect("desk config parses");
    base.validate().expect("desk config is valid");
    let mut cells = Cells { base: base.clone(), done: BTreeMap::new() };

    let mut report: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut check = |n: usize, name: &'static str, v: Verdict| {
        eprintln!("{} criterion {n:>2} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        report.push((n, name, v));
    };
    check(1, "gradient suite", gradient_suite());
    check(2, "propagation vs Neumann series", common::propagation_vs_neumann());
    check(3, "reliable contrastive vs double sum", common::rpl_vs_brute_force());
    let identity = common::balanced_identity();
    let jensen = common::jensen_batches();
    check(
        4,
        "balanced-batch identity and Jensen bound",
        Verdict::new(identity.pass && jensen.pass, format!("{}; {}", identity.detail, jensen.detail)),
    );
    check(5, "distribution invariants", common::distribution_invariants(1000, 1e-9));
    check(6, "long-tail endpoints", common::longtail_endpoints());
    check(10, "determinism", determinism(&base));
    check(7, "CCL gain over baseline", ccl_gain(&mut cells));
    check(8, "energy vs confidence selection", energy_vs_confidence(&mut cells));
    check(9, "ablation direction", ablation_direction(&mut cells));

    report.sort_by_key(|r| r.0);
    println!("\nacceptance summary ({:.0} s)", start.elapsed().as_secs_f64());
    for (n, name, v) in &report {
        println!("{} {n:>2} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    if report.iter().all(|r| r.2.pass) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
