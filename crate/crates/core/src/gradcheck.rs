//! Finite-difference audit of every differentiable loss.
//!
//! Each case draws a small random instance from its seed, flattens the
//! differentiable inputs into one vector and compares the tape's gradient with
//! central differences through [`check_gradient`].

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::ccl::train::{AblationFlags, TrainConfig, Trainer, TrainerSettings};
use crate::ccl::{self, CclHyper};
use crate::data::{generate_dataset, DatasetSpec, UnlabeledRegime};
use crate::error::Result;
use crate::framework::zoo::{self, ClassQueues};
use crate::framework::{self, BatchPartition, KernelConfig};
use crate::model::{ModelConfig, NORM_FLOOR};
use crate::numerics::{check_gradient, seeded_rng, GradientReport, Matrix, ProbVector, Rng, Tape, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

const BATCH: usize = 8;
const CLASSES: usize = 3;
const DIM: usize = 4;

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckCase {
    pub name: &'static str,
    pub seed: u64,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub param_count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckSuite {
    pub step: f64,
    pub tolerance: f64,
    pub cases: Vec<GradcheckCase>,
}

impl GradcheckSuite {
    pub fn max_rel_err(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.max_rel_err < self.tolerance)
    }

    /// Worst case per loss, one line each, then a verdict line.
    pub fn render(&self) -> String {
        let mut names: Vec<&str> = self.cases.iter().map(|c| c.name).collect();
        names.dedup();
        let mut out = String::new();
        let _ = writeln!(out, "{:<28} {:>6} {:>12} {:>12}", "loss", "params", "max_abs", "max_rel");
        for name in names {
            let worst = self
                .cases
                .iter()
                .filter(|c| c.name == name)
                .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
                .expect("at least one case per name");
            let _ = writeln!(
                out,
                "{:<28} {:>6} {:>12.3e} {:>12.3e}",
                name, worst.param_count, worst.max_abs_err, worst.max_rel_err
            );
        }
        let verdict = if self.passed() { "ok" } else { "FAILED" };
        let _ = writeln!(
            out,
            "{} cases, step {:e}, max relative error {:.3e} (tolerance {:e}): {verdict}",
            self.cases.len(),
            self.step,
            self.max_rel_err(),
            self.tolerance
        );
        out
    }
}

type LossFn<'a> = dyn for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>> + 'a;

/// Gradient check of `loss` over the matrices `inputs`, all treated as leaves.
pub fn check_tape_loss(inputs: &[Matrix], loss: &LossFn<'_>, step: f64) -> Result<GradientReport> {
    let shapes: Vec<(usize, usize)> = inputs.iter().map(Matrix::shape).collect();
    let flat: Vec<f64> = inputs.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
    let eval = |theta: &[f64]| -> Result<(f64, Vec<f64>)> {
        let tape = Tape::new();
        let mut offset = 0;
        let mut leaves = Vec::with_capacity(shapes.len());
        for &(r, c) in &shapes {
            leaves.push(tape.leaf(Matrix::new(r, c, theta[offset..offset + r * c].to_vec())?));
            offset += r * c;
        }
        let out = loss(&leaves)?;
        let grads = tape.backward(out);
        let g = leaves.iter().flat_map(|&v| grads.get(v).as_slice().to_vec()).collect();
        Ok((out.scalar(), g))
    };
    check_gradient(eval, &flat, step)
}

fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Labels with every class at least twice, shuffled.
fn labels(rng: &mut Rng) -> Vec<usize> {
    let mut y: Vec<usize> = (0..BATCH).map(|i| if i < 2 * CLASSES { i % CLASSES } else { rng.gen_range(0..CLASSES) }).collect();
    y.shuffle(rng);
    y
}

fn random_prior(rng: &mut Rng) -> ProbVector {
    ProbVector::normalized((0..CLASSES).map(|_| rng.gen_range(0.2..1.0)).collect()).expect("positive weights")
}

fn soft_rows(rows: usize, rng: &mut Rng) -> Matrix {
    let logits = gaussian(rows, CLASSES, rng);
    crate::numerics::softmax_rows(&logits).expect("finite logits")
}

fn unit(v: Var<'_>) -> Var<'_> {
    v.normalize_rows(NORM_FLOOR)
}

struct Instance {
    labels: Vec<usize>,
    partition: BatchPartition,
    prior: ProbVector,
    prior_b: ProbVector,
    soft: Matrix,
    kernel: KernelConfig,
    x: Matrix,
}

impl Instance {
    fn draw(rng: &mut Rng) -> Result<Self> {
        let labels = labels(rng);
        Ok(Self {
            partition: BatchPartition::new(labels.clone(), CLASSES)?,
            labels,
            prior: random_prior(rng),
            prior_b: random_prior(rng),
            soft: soft_rows(BATCH, rng),
            kernel: KernelConfig::new(rng.gen_range(0.5..2.0))?,
            x: gaussian(BATCH, DIM, rng),
        })
    }
}

fn framework_cases(seed: u64, step: f64, out: &mut Vec<GradcheckCase>) -> Result<()> {
    let mut rng = seeded_rng(seed);
    let inst = Instance::draw(&mut rng)?;
    let Instance {
        labels,
        partition,
        prior,
        prior_b,
        soft,
        kernel,
        x,
    } = &inst;
    let (kernel, x) = (*kernel, vec![x.clone()]);
    let logits = vec![gaussian(BATCH, CLASSES, &mut rng)];
    let centers = gaussian(CLASSES, DIM, &mut rng);
    let with_centers = vec![x[0].clone(), centers.clone()];
    let mut queues = ClassQueues::new(CLASSES, DIM, 4);
    let mut queue_z = gaussian(6, DIM, &mut rng);
    for i in 0..6 {
        let n = queue_z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        queue_z.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }
    queues.push(&queue_z, &[0, 1, 2, 0, 1, 2])?;
    let positives = zoo::sample_k_positives(partition, 1, &mut rng)?;
    let vartheta = Matrix::from_fn(1, CLASSES, |_, _| rng.gen_range(-0.8..0.8));

    let mut check = |name: &'static str, inputs: &[Matrix], f: &LossFn<'_>| -> Result<()> {
        let r = check_tape_loss(inputs, f, step)?;
        out.push(case(name, seed, r));
        Ok(())
    };
    check("unified_loss_j", &logits, &|p| framework::unified_loss_j_batch(p[0], soft, prior, prior_b))?;
    check("class_balanced_ce", &x, &|p| Ok(framework::class_balanced_ce_rows(unit(p[0]), partition, kernel)?.mean()))?;
    check("scl_in", &x, &|p| Ok(framework::scl_loss_rows(unit(p[0]), partition, kernel)?.0.mean()))?;
    check("scl_out", &x, &|p| Ok(framework::scl_loss_rows(unit(p[0]), partition, kernel)?.1.mean()))?;
    check("kernel_posterior_ce", &x, &|p| {
        let post = framework::kernel_posteriors(unit(p[0]), partition, None, kernel, true)?;
        framework::soft_cross_entropy(post, &framework::one_hot_matrix(labels, CLASSES))
    })?;
    check("bcl", &with_centers, &|p| zoo::bcl_loss(unit(p[0]), partition, Some(unit(p[1])), prior, kernel))?;
    check("gml", &x, &|p| zoo::gml_loss(unit(p[0]), partition, &queues, prior, kernel))?;
    check("kcl_in", &x, &|p| Ok(zoo::kcl_losses(unit(p[0]), partition, &positives, kernel)?.0))?;
    check("kcl_out", &x, &|p| Ok(zoo::kcl_losses(unit(p[0]), partition, &positives, kernel)?.1))?;
    check("paco", &with_centers, &|p| zoo::paco_loss(unit(p[0]), partition, unit(p[1]), 0.5, prior, kernel))?;
    check("tvmf", &with_centers, &|p| zoo::tvmf_loss(unit(p[0]), labels, unit(p[1]), 0.0, 0.5, prior))?;
    check("tvmf_q1", &with_centers, &|p| zoo::tvmf_loss(unit(p[0]), labels, unit(p[1]), 1.0, 2.0, prior))?;
    let wc = vec![x[0].clone(), centers, vartheta];
    check("wcdas", &wc, &|p| zoo::wcdas_loss(unit(p[0]), labels, unit(p[1]), p[2], prior))?;
    Ok(())
}

fn ccl_cases(seed: u64, step: f64, out: &mut Vec<GradcheckCase>) -> Result<()> {
    let mut rng = seeded_rng(seed ^ 0x5eed);
    let inst = Instance::draw(&mut rng)?;
    let (labels, partition, prior, kernel) = (&inst.labels, &inst.partition, &inst.prior, inst.kernel);
    let nu = 6;
    let logits = vec![gaussian(BATCH, CLASSES, &mut rng)];
    let pseudo: Vec<usize> = (0..BATCH).map(|_| rng.gen_range(0..CLASSES)).collect();
    let mask: Vec<bool> = (0..BATCH).map(|i| i % 3 != 1).collect();
    let soft_u = soft_rows(nu, &mut rng);
    let merged = ccl::merged_soft_labels(labels, CLASSES, &soft_u)?;
    let z_all = vec![gaussian(BATCH + nu, DIM, &mut rng)];
    let protos = gaussian(CLASSES, DIM, &mut rng);
    let pair = vec![gaussian(nu, DIM, &mut rng), inst.x.clone()];
    let weak_target = soft_rows(nu, &mut rng);
    let beta = rng.gen_range(0.1..0.6);
    // Leave class 2 out of the labeled batch so the prototype path is taken.
    let sparse_labels: Vec<usize> = labels.iter().map(|&y| y.min(1)).collect();
    let sparse = BatchPartition::new(sparse_labels, CLASSES)?;

    let mut check = |name: &'static str, inputs: &[Matrix], f: &LossFn<'_>| -> Result<()> {
        let r = check_tape_loss(inputs, f, step)?;
        out.push(case(name, seed, r));
        Ok(())
    };
    check("balanced_labeled_loss", &logits, &|p| ccl::balanced_labeled_loss(p[0], labels, prior, 2.0))?;
    check("cross_entropy", &logits, &|p| ccl::cross_entropy(p[0], labels))?;
    check("unlabeled_consistency", &logits, &|p| {
        ccl::unlabeled_consistency_loss(p[0], &pseudo, &mask, prior, 2.0)
    })?;
    check("masked_cross_entropy", &logits, &|p| ccl::masked_cross_entropy(p[0], &pseudo, &mask))?;
    check("reliable_contrastive", &z_all, &|p| {
        let protos = p[0].tape().constant(protos.clone());
        ccl::reliable_contrastive_loss(unit(p[0]), &merged, prior, kernel, Some(unit(protos)))
    })?;
    check("smoothed_consistency", &pair, &|p| {
        let z_u = unit(p[0]);
        let post = ccl::labeled_kernel_posteriors(z_u, unit(p[1]), partition, prior, kernel, None)?;
        let prop = ccl::propagate(post, ccl::similarity_graph(z_u, kernel)?, beta)?;
        ccl::smoothed_consistency_loss(&weak_target, prop)
    })?;
    let with_protos = vec![pair[0].clone(), pair[1].clone(), protos.clone()];
    check("smoothed_with_prototypes", &with_protos, &|p| {
        let z_u = unit(p[0]);
        let post = ccl::labeled_kernel_posteriors(z_u, unit(p[1]), &sparse, prior, kernel, Some(unit(p[2])))?;
        let prop = ccl::propagate(post, ccl::similarity_graph(z_u, kernel)?, beta)?;
        ccl::smoothed_consistency_loss(&weak_target, prop)
    })?;
    Ok(())
}

/// The complete training objective of a small model, with every teacher
/// signal frozen at the values of one real step.
fn objective_case(seed: u64, step: f64, out: &mut Vec<GradcheckCase>) -> Result<()> {
    let spec = DatasetSpec {
        num_classes: CLASSES,
        feature_dim: DIM,
        n1: 8,
        m1: 12,
        gamma_l: 4.0,
        gamma_u: UnlabeledRegime::Uniform,
        test_per_class: 2,
        seed,
        ..DatasetSpec::default()
    };
    let data = generate_dataset(&spec)?;
    let settings = TrainerSettings {
        model: ModelConfig {
            input_dim: DIM,
            hidden_dims: vec![8],
            embed_dim: 3,
            num_classes: CLASSES,
            init_scale: 1.0,
        },
        hyper: CclHyper {
            // Every sample passes the energy gate, so all loss terms are live.
            energy_zeta: 0.0,
            ..CclHyper::default()
        },
        train: TrainConfig {
            steps: 1,
            batch_size: BATCH / 2,
            ..TrainConfig::default()
        },
        flags: AblationFlags::FULL,
    };
    let mut trainer = Trainer::new(settings, &data.labeled, &data.unlabeled, None, seed)?;
    // A sample whose hidden activations are all zero gets a zero projection
    // at initialisation, where the normalisation has slope 1/NORM_FLOOR and
    // central differences cannot follow; such batches are redrawn.
    let batch = loop {
        let batch = trainer.sample()?;
        let x = Matrix::vstack(&[&batch.labeled, &batch.strong])?;
        let features = trainer.state().forward(&x)?.features;
        if features.row_iter().all(|r| r.iter().any(|&v| v != 0.0)) {
            break batch;
        }
    };
    let targets = trainer.compute_targets(&batch)?;
    let ctx = trainer.context().clone();
    let params = trainer.state().params.clone();
    let r = check_tape_loss(&params, &|p| Ok(ccl::train::objective(&ctx, p, &batch, &targets)?.0), step)?;
    out.push(case("full_objective", seed, r));
    Ok(())
}

fn case(name: &'static str, seed: u64, r: GradientReport) -> GradcheckCase {
    GradcheckCase {
        name,
        seed,
        max_abs_err: r.max_abs_err,
        max_rel_err: r.max_rel_err,
        param_count: r.param_count,
    }
}

/// Runs every case for every seed.
pub fn run_suite(seeds: &[u64], step: f64, tolerance: f64) -> Result<GradcheckSuite> {
    let mut cases = Vec::new();
    for &seed in seeds {
        framework_cases(seed, step, &mut cases)?;
        ccl_cases(seed, step, &mut cases)?;
        objective_case(seed, step, &mut cases)?;
    }
    cases.sort_by_key(|c| (c.name, c.seed));
    Ok(GradcheckSuite { step, tolerance, cases })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_one_seed() {
        let suite = run_suite(&[7], DEFAULT_STEP, DEFAULT_TOLERANCE).unwrap();
        assert!(suite.passed(), "{}", suite.render());
        assert!(suite.cases.iter().any(|c| c.name == "full_objective"));
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let inputs = vec![Matrix::from_rows(&[vec![0.3, -1.2]]).unwrap()];
        // d/dx of x·x recorded as mul by a constant copy: half the true slope.
        let r = check_tape_loss(
            &inputs,
            &|p| {
                let c = p[0].tape().constant((*p[0].value()).clone());
                Ok(p[0].mul(c)?.sum())
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.max_rel_err > 0.4);
    }
}
