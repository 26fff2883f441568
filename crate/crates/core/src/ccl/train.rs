//! One training run: per step, a gradient-free pass computes every teacher
//! signal (fused pseudo-labels, masks, prior update, prototypes, the weak-view
//! propagation target), then the objective is recorded on a tape over a single
//! forward of the labeled weak views stacked on the unlabeled strong views.

use serde::{Deserialize, Serialize};

use super::*;
use crate::data::{sample_batches, LabeledSet, UnlabeledSet};
use crate::error::{Error, Result};
use crate::framework::BatchPartition;
use crate::metrics::{ece, evaluate, prior_l1, EvalReport, MetricsRow, DEFAULT_ECE_BINS};
use crate::model::{cosine_lr, forward_vars, init_model, ModelConfig, ModelState, NORM_FLOOR};
use crate::numerics::{concat_rows, seeded_rng, softmax_rows, Matrix, ProbVector, Rng, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub eval_interval: usize,
    /// Size of both the labeled and the unlabeled batch.
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Scale of the augmentation noise, in units of the feature noise.
    pub augment_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            eval_interval: 500,
            batch_size: 64,
            base_lr: 0.03,
            momentum: 0.9,
            weight_decay: 5e-4,
            augment_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be >= 2".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("train.eval_interval must be >= 1".into()));
        }
        if !(self.base_lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0)
            || !(self.augment_scale >= 0.0)
        {
            return Err(Error::Config(
                "train.base_lr, train.weight_decay and train.augment_scale must be >= 0, train.momentum in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Switches for the four components varied in the ablation lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub dual_branch: bool,
    pub reliable_pl: bool,
    pub smoothed_pl: bool,
    pub energy_mask: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::FULL
    }
}

impl AblationFlags {
    pub const FULL: Self = Self::new(true, true, true, true);
    pub const BASELINE: Self = Self::new(false, false, false, false);

    pub const fn new(dual_branch: bool, reliable_pl: bool, smoothed_pl: bool, energy_mask: bool) -> Self {
        Self {
            dual_branch,
            reliable_pl,
            smoothed_pl,
            energy_mask,
        }
    }

    /// The six rows of the ablation table, ending with the full method.
    pub const TABLE: [Self; 6] = [
        Self::new(false, false, false, true),
        Self::new(true, false, false, true),
        Self::new(true, false, true, true),
        Self::new(true, true, false, true),
        Self::new(true, true, true, false),
        Self::new(true, true, true, true),
    ];

    pub fn label(&self) -> String {
        let b = |f: bool| if f { '1' } else { '0' };
        format!(
            "dual{}_rpl{}_spl{}_energy{}",
            b(self.dual_branch),
            b(self.reliable_pl),
            b(self.smoothed_pl),
            b(self.energy_mask)
        )
    }
}

/// Inputs of one optimisation step.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub labeled: Matrix,
    pub labels: Vec<usize>,
    pub weak: Matrix,
    pub strong: Matrix,
}

/// Teacher signals of one step; constants for the objective.
#[derive(Debug, Clone)]
pub struct StepTargets {
    pub fused: FusedPosterior,
    pub consistency_mask: Vec<bool>,
    pub selection: SelectionMask,
    /// Prior used by the consistency loss (before this step's update).
    pub pi_u_before: ProbVector,
    /// Prior after this step's update, used by the contrastive terms.
    pub pi_u: ProbVector,
    pub prop_weak: Option<Matrix>,
    pub prototypes: Matrix,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub cls: f64,
    pub rpl: f64,
    pub spl: f64,
    pub total: f64,
}

/// Static quantities the objective depends on.
#[derive(Debug, Clone)]
pub struct ObjectiveContext {
    pub model: ModelConfig,
    pub hyper: CclHyper,
    pub flags: AblationFlags,
    pub pi_l: ProbVector,
}

impl ObjectiveContext {
    fn lambda1(&self) -> f64 {
        if self.flags.reliable_pl {
            self.hyper.lambda1
        } else {
            1.0
        }
    }
}

/// Records the full objective for fixed targets; returns the total and the
/// component values.
pub fn objective<'t>(
    ctx: &ObjectiveContext,
    params: &[Var<'t>],
    batch: &StepBatch,
    targets: &StepTargets,
) -> Result<(Var<'t>, LossValues)> {
    let tape = params
        .first()
        .ok_or_else(|| Error::invalid("objective needs parameters"))?
        .tape();
    let (h, flags) = (&ctx.hyper, ctx.flags);
    let c = ctx.model.num_classes;
    let nl = batch.labeled.rows();
    let nu = batch.strong.rows();
    let x = tape.constant(Matrix::vstack(&[&batch.labeled, &batch.strong])?);
    let out = forward_vars(&ctx.model, params, x)?;
    let li: Vec<usize> = (0..nl).collect();
    let ui: Vec<usize> = (nl..nl + nu).collect();
    let pseudo = &targets.fused.pseudo_labels;
    let cmask = &targets.consistency_mask;

    let mut l_cls = balanced_labeled_loss(out.logits_b.gather_rows(&li)?, &batch.labels, &ctx.pi_l, h.tau)?.add(
        unlabeled_consistency_loss(out.logits_b.gather_rows(&ui)?, pseudo, cmask, &targets.pi_u_before, h.tau)?,
    )?;
    if flags.dual_branch {
        l_cls = l_cls.add(cross_entropy(out.logits_s.gather_rows(&li)?, &batch.labels)?)?;
        if h.standard_on_unlabeled {
            l_cls = l_cls.add(masked_cross_entropy(out.logits_s.gather_rows(&ui)?, pseudo, cmask)?)?;
        }
    }

    let z_l = out.embeddings.gather_rows(&li)?;
    let z_u = out.embeddings.gather_rows(&ui)?;
    let protos = tape.constant(targets.prototypes.clone());
    let kernel = h.kernel();
    let zero = || tape.constant(Matrix::scalar(0.0));

    let selected = targets.selection.selected();
    let l_rpl = if flags.reliable_pl && !selected.is_empty() {
        let z_b = concat_rows(&[z_l, z_u.gather_rows(&selected)?])?;
        let soft = merged_soft_labels(&batch.labels, c, &targets.fused.rows.select_rows(&selected))?;
        reliable_contrastive_loss(z_b, &soft, &targets.pi_u, kernel, Some(protos))?
    } else {
        zero()
    };

    let l_spl = match (&targets.prop_weak, flags.smoothed_pl) {
        (Some(weak), true) => {
            let part = BatchPartition::new(batch.labels.clone(), c)?;
            let p_l = labeled_kernel_posteriors(z_u, z_l, &part, &targets.pi_u, kernel, Some(protos))?;
            let prop = propagate(p_l, similarity_graph(z_u, kernel)?, h.beta)?;
            smoothed_consistency_loss(weak, prop)?
        }
        _ => zero(),
    };

    let total = total_loss(l_cls, l_rpl, l_spl, ctx.lambda1(), h.lambda2)?;
    let values = LossValues {
        cls: l_cls.scalar(),
        rpl: l_rpl.scalar(),
        spl: l_spl.scalar(),
        total: total.scalar(),
    };
    Ok((total, values))
}

/// Normalised per-class mean embedding of the labeled pool; classes without
/// samples get the zero vector.
pub fn class_prototypes(embeddings: &Matrix, labels: &[usize], num_classes: usize) -> Matrix {
    let mut protos = Matrix::zeros(num_classes, embeddings.cols());
    for (row, &y) in embeddings.row_iter().zip(labels) {
        protos.row_mut(y).iter_mut().zip(row).for_each(|(p, v)| *p += v);
    }
    normalize_rows(&mut protos);
    protos
}

fn normalize_rows(m: &mut Matrix) {
    for i in 0..m.rows() {
        let n = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
        m.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }
}

/// Everything one run needs besides data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerSettings {
    pub model: ModelConfig,
    pub hyper: CclHyper,
    pub train: TrainConfig,
    pub flags: AblationFlags,
}

/// Posteriors the run's selection rule sees on clean inputs.
struct PoolView {
    fused: FusedPosterior,
    post_b: Matrix,
    selection: SelectionMask,
}

/// Mutable state of a run.
pub struct Trainer<'d> {
    settings: TrainerSettings,
    labeled: &'d LabeledSet,
    unlabeled: &'d UnlabeledSet,
    test: Option<&'d LabeledSet>,
    ctx: ObjectiveContext,
    state: ModelState,
    prior: PriorEstimate,
    prototypes: Matrix,
    rng: Rng,
    step: usize,
    last_loss: LossValues,
    last_selected: f64,
    last_lr: f64,
    skipped_rpl: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub final_report: Option<EvalReport>,
    pub state: ModelState,
    pub prior: PriorEstimate,
    /// Steps where the reliable set had no unlabeled member.
    pub skipped_rpl_steps: usize,
}

impl<'d> Trainer<'d> {
    pub fn new(
        settings: TrainerSettings,
        labeled: &'d LabeledSet,
        unlabeled: &'d UnlabeledSet,
        test: Option<&'d LabeledSet>,
        seed: u64,
    ) -> Result<Self> {
        settings.model.validate()?;
        settings.hyper.validate()?;
        settings.train.validate()?;
        let c = settings.model.num_classes;
        if labeled.num_classes != c || unlabeled.num_classes != c {
            return Err(Error::Config(format!(
                "model.num_classes = {c} but the data has {} classes",
                labeled.num_classes
            )));
        }
        if labeled.features.cols() != settings.model.input_dim || unlabeled.features.cols() != settings.model.input_dim {
            return Err(Error::Config(format!(
                "model.input_dim = {} but the data has {} features",
                settings.model.input_dim,
                labeled.features.cols()
            )));
        }
        let pi_l = labeled.prior()?;
        if !pi_l.is_strictly_positive() {
            let k = labeled.class_counts().iter().position(|&n| n == 0).unwrap_or(0);
            return Err(Error::UnrepresentedClass(k));
        }
        let mut init_rng = seeded_rng(seed);
        let state = init_model(&settings.model, &mut init_rng)?;
        let mut rng = seeded_rng(seed);
        rng.set_stream(1);
        let pool = state.forward(&labeled.features)?;
        let prototypes = class_prototypes(&pool.embeddings, &labeled.labels, c);
        let ctx = ObjectiveContext {
            model: settings.model.clone(),
            hyper: settings.hyper.clone(),
            flags: settings.flags,
            pi_l,
        };
        let prior = PriorEstimate::uniform(c, settings.hyper.alpha);
        let base_lr = settings.train.base_lr;
        Ok(Self {
            settings,
            labeled,
            unlabeled,
            test,
            ctx,
            state,
            prior,
            prototypes,
            rng,
            step: 0,
            last_loss: LossValues::default(),
            last_selected: 0.0,
            last_lr: base_lr,
            skipped_rpl: 0,
        })
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn prior(&self) -> &PriorEstimate {
        &self.prior
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn context(&self) -> &ObjectiveContext {
        &self.ctx
    }

    /// Draws the next pair of batches.
    pub fn sample(&mut self) -> Result<StepBatch> {
        let b = self.settings.train.batch_size;
        let noise = self.noise_scale();
        let (lb, ub) = sample_batches(self.labeled, self.unlabeled, b, b, noise, &mut self.rng)?;
        Ok(StepBatch {
            labeled: lb.features,
            labels: lb.labels,
            weak: ub.weak,
            strong: ub.strong,
        })
    }

    fn noise_scale(&self) -> f64 {
        self.settings.train.augment_scale
    }

    fn energy_logits(&self, logits_b: &Matrix) -> Result<Matrix> {
        if self.settings.hyper.energy_on_adjusted {
            prior_adjusted_logits(logits_b, &self.prior.pi)
        } else {
            Ok(logits_b.clone())
        }
    }

    /// Clean-input posteriors on `x` under the current model and prior, with
    /// the run's selection rule applied.
    fn view(&self, x: &Matrix) -> Result<(PoolView, crate::model::ForwardOutput)> {
        let h = &self.settings.hyper;
        let out = self.state.forward(x)?;
        let post_b = post_adjusted(&out.logits_b, &self.prior.pi, 1.0)?;
        let fused = if self.settings.flags.dual_branch {
            let star = pi_star(&self.ctx.pi_l, &self.prior.pi)?;
            fuse_branches(&post_b, &softmax_rows(&out.logits_s)?, &star)?
        } else {
            FusedPosterior {
                pseudo_labels: post_b.argmax_rows(),
                rows: post_b.clone(),
                pi_star: self.prior.pi.clone(),
            }
        };
        let selection = if self.settings.flags.energy_mask {
            build_energy_mask(&self.energy_logits(&out.logits_b)?, h.energy_zeta, h.energy_t)?
        } else {
            build_confidence_mask(&fused.rows, h.conf_threshold)
        };
        Ok((PoolView { fused, post_b, selection }, out))
    }

    /// Teacher pass for one batch; advances the prior and the prototypes.
    pub fn compute_targets(&mut self, batch: &StepBatch) -> Result<StepTargets> {
        let h = self.settings.hyper.clone();
        let c = self.settings.model.num_classes;
        let (view, out_u) = self.view(&batch.weak)?;
        let consistency_mask = match h.consistency_mask {
            ConsistencyMask::Selection => view.selection.flags.clone(),
            ConsistencyMask::Confidence => build_confidence_mask(&view.fused.rows, h.conf_threshold).flags,
            ConsistencyMask::Energy => {
                build_energy_mask(&self.energy_logits(&out_u.logits_b)?, h.energy_zeta, h.energy_t)?.flags
            }
        };
        let pi_u_before = self.prior.pi.clone();
        self.prior.update(&view.post_b.select_rows(&view.selection.selected()))?;

        let out_l = self.state.forward(&batch.labeled)?;
        let batch_protos = class_prototypes(&out_l.embeddings, &batch.labels, c);
        let present = crate::data::class_counts(&batch.labels, c);
        let m = h.prototype_momentum;
        for k in (0..c).filter(|&k| present[k] > 0) {
            let (old, new) = (self.prototypes.row_mut(k), batch_protos.row(k));
            old.iter_mut().zip(new).for_each(|(o, n)| *o = m * *o + (1.0 - m) * n);
        }
        normalize_rows(&mut self.prototypes);

        let prop_weak = if self.settings.flags.smoothed_pl {
            let tape = Tape::new();
            let part = BatchPartition::new(batch.labels.clone(), c)?;
            let z_u = tape.constant(out_u.embeddings.clone());
            let z_l = tape.constant(out_l.embeddings);
            let protos = tape.constant(self.prototypes.clone());
            let p_l = labeled_kernel_posteriors(z_u, z_l, &part, &self.prior.pi, h.kernel(), Some(protos))?;
            let graph = similarity_graph(z_u, h.kernel())?;
            Some((*propagate(p_l, graph, h.beta)?.value()).clone())
        } else {
            None
        };

        Ok(StepTargets {
            fused: view.fused,
            consistency_mask,
            selection: view.selection,
            pi_u_before,
            pi_u: self.prior.pi.clone(),
            prop_weak,
            prototypes: self.prototypes.clone(),
        })
    }

    /// One optimisation step. Non-finite losses, activations, gradients or
    /// updated parameters surface as [`Error::Diverged`].
    pub fn train_step(&mut self) -> Result<LossValues> {
        let step = self.step;
        let diverged = |what: &'static str| Error::Diverged { step, what };
        let batch = self.sample()?;
        let targets = self.compute_targets(&batch).map_err(|e| match e {
            Error::NonFinite(_) => diverged("teacher posteriors"),
            e => e,
        })?;
        let t = &self.settings.train;
        let lr = cosine_lr(t.base_lr, step, t.steps);
        let tape = Tape::new();
        let params = self.state.leaves(&tape);
        let (total, values) = objective(&self.ctx, &params, &batch, &targets).map_err(|e| match e {
            Error::NonFinite(_) => diverged("activations"),
            e => e,
        })?;
        if !values.total.is_finite() {
            return Err(diverged("loss"));
        }
        let grads = tape.backward(total);
        let grads: Vec<Matrix> = params.iter().map(|&p| grads.get(p)).collect();
        if grads.iter().any(|g| g.as_slice().iter().any(|v| !v.is_finite())) {
            return Err(diverged("gradient"));
        }
        let (momentum, wd) = (t.momentum, t.weight_decay);
        self.state.sgd_step(&grads, lr, momentum, wd)?;
        if self.state.params.iter().any(|p| p.as_slice().iter().any(|v| !v.is_finite())) {
            return Err(diverged("parameters"));
        }
        if self.settings.flags.reliable_pl && targets.selection.count() == 0 {
            self.skipped_rpl += 1;
        }
        self.step += 1;
        self.last_loss = values;
        self.last_selected = targets.selection.fraction();
        self.last_lr = lr;
        Ok(values)
    }

    /// Test accuracy, the prior error against the hidden unlabeled labels,
    /// and the calibration error of the fused posterior on the part of the
    /// unlabeled pool the selection rule keeps.
    pub fn evaluate(&self) -> Result<(MetricsRow, Option<EvalReport>)> {
        let report = match self.test {
            Some(test) => Some(evaluate(&self.state, test)?),
            None => None,
        };
        let hidden = self.unlabeled.hidden_labels();
        let prior_err = match self.unlabeled.true_prior() {
            Some(truth) => prior_l1(&self.prior.pi, &truth)?,
            None => f64::NAN,
        };
        let calibration = match hidden {
            Some(labels) => {
                let (view, _) = self.view(&self.unlabeled.features)?;
                let kept = view.selection.selected();
                let conf: Vec<f64> = kept
                    .iter()
                    .map(|&i| view.fused.rows.row(i).iter().cloned().fold(0.0, f64::max).min(1.0))
                    .collect();
                let correct: Vec<bool> = kept.iter().map(|&i| view.fused.pseudo_labels[i] == labels[i]).collect();
                ece(&conf, &correct, DEFAULT_ECE_BINS)?
            }
            None => f64::NAN,
        };
        let report = report.map(|mut r| {
            r.step = self.step;
            r.ece = calibration;
            r.prior_l1 = prior_err;
            r
        });
        let row = MetricsRow {
            step: self.step,
            top1: report.as_ref().map_or(f64::NAN, |r| r.top1),
            ece: calibration,
            prior_l1: prior_err,
            masked_fraction: self.last_selected,
            loss_cls: self.last_loss.cls,
            loss_rpl: self.last_loss.rpl,
            loss_spl: self.last_loss.spl,
            lr: self.last_lr,
        };
        Ok((row, report))
    }

    /// Trains for the configured number of steps, evaluating at step 0, every
    /// `eval_interval` steps and after the last step.
    pub fn run(mut self) -> Result<TrainOutcome> {
        let (steps, every) = (self.settings.train.steps, self.settings.train.eval_interval);
        let checked = |t: &Self| {
            t.evaluate().map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { step: t.step, what: "evaluation outputs" },
                e => e,
            })
        };
        let mut rows = vec![checked(&self)?.0];
        let mut final_report = None;
        while self.step < steps {
            self.train_step()?;
            if self.step % every == 0 || self.step == steps {
                let (row, report) = checked(&self)?;
                rows.push(row);
                final_report = report;
            }
        }
        if steps == 0 {
            final_report = checked(&self)?.1;
        }
        Ok(TrainOutcome {
            rows,
            final_report,
            state: self.state,
            prior: self.prior,
            skipped_rpl_steps: self.skipped_rpl,
        })
    }
}
