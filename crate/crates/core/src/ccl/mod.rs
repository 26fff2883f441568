//! Building blocks of the continuous contrastive pipeline and its training
//! loop ([`train`]).
//!
//! Loss functions take [`Var`]s for the quantities that carry gradients
//! (logits and embeddings of the current views) and plain matrices for
//! teacher signals, which are always constants.

pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::framework::{log_prior_row, off_diagonal, one_hot_matrix, soft_cross_entropy, BatchPartition, KernelConfig};
use crate::numerics::{argmax, logsumexp, Matrix, ProbVector, Tape, Var};

/// Which rule picks reliable unlabeled samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Energy,
    Confidence,
}

/// Rule behind the consistency-loss mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConsistencyMask {
    /// Same rule as the reliable-sample selection of the run.
    Selection,
    Confidence,
    Energy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CclHyper {
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta: f64,
    pub tau: f64,
    pub conf_threshold: f64,
    pub energy_zeta: f64,
    pub energy_t: f64,
    pub alpha: f64,
    pub kernel_temperature: f64,
    pub consistency_mask: ConsistencyMask,
    /// Whether `f_s` also fits masked pseudo-labels.
    pub standard_on_unlabeled: bool,
    /// EMA momentum of the labeled class prototypes.
    pub prototype_momentum: f64,
    /// Score energies on `logits_b + log π̂ᵘ` instead of raw `logits_b`.
    pub energy_on_adjusted: bool,
}

impl Default for CclHyper {
    fn default() -> Self {
        Self {
            lambda1: 0.7,
            lambda2: 1.0,
            beta: 0.2,
            tau: 2.0,
            conf_threshold: 0.95,
            energy_zeta: -8.75,
            energy_t: 1.0,
            alpha: 0.1,
            kernel_temperature: 1.0,
            consistency_mask: ConsistencyMask::Selection,
            standard_on_unlabeled: true,
            prototype_momentum: 0.9,
            energy_on_adjusted: true,
        }
    }
}

impl CclHyper {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::Config(msg.to_string())) };
        check((0.0..=1.0).contains(&self.lambda1), "ccl.lambda1 must lie in [0, 1]")?;
        check(self.lambda2 >= 0.0, "ccl.lambda2 must be >= 0")?;
        check((0.0..1.0).contains(&self.beta), "ccl.beta must lie in [0, 1)")?;
        check(self.tau >= 0.0, "ccl.tau must be >= 0")?;
        check(
            self.conf_threshold > 0.0 && self.conf_threshold < 1.0,
            "ccl.conf_threshold must lie in (0, 1)",
        )?;
        check(!self.energy_zeta.is_nan(), "ccl.energy_zeta must be a number")?;
        check(self.energy_t > 0.0, "ccl.energy_t must be > 0")?;
        check(self.alpha > 0.0 && self.alpha <= 1.0, "ccl.alpha must lie in (0, 1]")?;
        check(
            self.kernel_temperature > 0.0 && self.kernel_temperature.is_finite(),
            "ccl.kernel_temperature must be > 0",
        )?;
        check(
            (0.0..1.0).contains(&self.prototype_momentum),
            "ccl.prototype_momentum must lie in [0, 1)",
        )
    }

    pub fn kernel(&self) -> KernelConfig {
        KernelConfig {
            temperature: self.kernel_temperature,
        }
    }
}

/// Mean of `−log softmax(logits + τ·log π)[y]`.
pub fn balanced_labeled_loss<'t>(logits: Var<'t>, labels: &[usize], prior: &ProbVector, tau: f64) -> Result<Var<'t>> {
    if prior.len() != logits.cols() {
        return Err(Error::shape("balanced_labeled_loss", format!("prior {} vs {} classes", prior.len(), logits.cols())));
    }
    if !prior.is_strictly_positive() {
        return Err(Error::invalid("balanced_labeled_loss: prior must be strictly positive"));
    }
    let adjusted = logits.add(log_prior_row(logits.tape(), prior, tau))?;
    Ok(adjusted.log_softmax_rows().pick(labels)?.mean().neg())
}

/// Plain mean cross-entropy.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    Ok(logits.log_softmax_rows().pick(labels)?.mean().neg())
}

/// `E(x) = −T · log Σ_k exp(f_k / T)`.
pub fn energy_score(logits: &[f64], t: f64) -> f64 {
    let scaled: Vec<f64> = logits.iter().map(|v| v / t).collect();
    -t * logsumexp(&scaled)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionMask {
    pub kind: MaskKind,
    pub threshold: f64,
    pub temperature: f64,
    pub flags: Vec<bool>,
}

impl SelectionMask {
    pub fn selected(&self) -> Vec<usize> {
        self.flags.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i).collect()
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.flags.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.flags.len() as f64
        }
    }
}

/// `logits + log π̂ᵘ` row-wise: logits whose softmax is the post-adjusted
/// posterior with `scale = 1`.
pub fn prior_adjusted_logits(logits: &Matrix, pi_u: &ProbVector) -> Result<Matrix> {
    if logits.cols() != pi_u.len() {
        return Err(Error::shape("prior_adjusted_logits", format!("{} columns, prior {}", logits.cols(), pi_u.len())));
    }
    let lp = pi_u.ln();
    Ok(Matrix::from_fn(logits.rows(), logits.cols(), |i, k| logits[(i, k)] + lp[k]))
}

/// Flags rows whose energy is at most `zeta`.
pub fn build_energy_mask(logits: &Matrix, zeta: f64, t: f64) -> Result<SelectionMask> {
    if !(t > 0.0) {
        return Err(Error::invalid("energy temperature must be > 0"));
    }
    Ok(SelectionMask {
        kind: MaskKind::Energy,
        threshold: zeta,
        temperature: t,
        flags: logits.row_iter().map(|r| energy_score(r, t) <= zeta).collect(),
    })
}

/// Flags rows whose largest probability reaches `threshold`.
pub fn build_confidence_mask(posteriors: &Matrix, threshold: f64) -> SelectionMask {
    SelectionMask {
        kind: MaskKind::Confidence,
        threshold,
        temperature: 1.0,
        flags: posteriors
            .row_iter()
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max) >= threshold)
            .collect(),
    }
}

/// EMA estimate of the unlabeled class prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorEstimate {
    pub pi: ProbVector,
    pub alpha: f64,
    pub update_count: usize,
}

impl PriorEstimate {
    pub fn uniform(num_classes: usize, alpha: f64) -> Self {
        Self {
            pi: ProbVector::uniform(num_classes),
            alpha,
            update_count: 0,
        }
    }

    /// `π̂ ← (1−α)π̂ + α·mean(rows)`; unchanged for an empty set of rows.
    pub fn update(&mut self, rows: &Matrix) -> Result<()> {
        if rows.rows() == 0 {
            return Ok(());
        }
        if rows.cols() != self.pi.len() {
            return Err(Error::shape("update_prior", format!("{} columns for {} classes", rows.cols(), self.pi.len())));
        }
        let n = rows.rows() as f64;
        let mean: Vec<f64> = rows.col_sums().into_iter().map(|s| s / n).collect();
        let next: Vec<f64> = self
            .pi
            .as_slice()
            .iter()
            .zip(&mean)
            .map(|(p, m)| (1.0 - self.alpha) * p + self.alpha * m)
            .collect();
        self.pi = ProbVector::normalized(next)?;
        self.update_count += 1;
        Ok(())
    }
}

/// `softmax(logits + scale·log π̂ᵘ)` row-wise.
pub fn post_adjusted(logits: &Matrix, pi_u: &ProbVector, scale: f64) -> Result<Matrix> {
    let lp = pi_u.ln();
    let shifted = Matrix::from_fn(logits.rows(), logits.cols(), |i, k| logits[(i, k)] + scale * lp[k]);
    crate::numerics::softmax_rows(&shifted)
}

/// `π̂* ∝ π̂ᵘ / (πˡ + π̂ᵘ)`.
pub fn pi_star(pi_l: &ProbVector, pi_u: &ProbVector) -> Result<ProbVector> {
    if pi_l.len() != pi_u.len() {
        return Err(Error::shape("pi_star", format!("{} vs {}", pi_l.len(), pi_u.len())));
    }
    let w = pi_u.as_slice().iter().zip(pi_l.as_slice()).map(|(u, l)| if u + l > 0.0 { u / (u + l) } else { 0.0 });
    ProbVector::normalized(w.collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedPosterior {
    pub rows: Matrix,
    pub pseudo_labels: Vec<usize>,
    pub pi_star: ProbVector,
}

/// `½·post_b + ½·normalize(post_s ⊙ π̂*)`, with argmax pseudo-labels.
pub fn fuse_branches(post_b_adjusted: &Matrix, post_s: &Matrix, pi_star: &ProbVector) -> Result<FusedPosterior> {
    if post_b_adjusted.shape() != post_s.shape() || post_s.cols() != pi_star.len() {
        return Err(Error::shape(
            "fuse_branches",
            format!("{:?}, {:?}, prior {}", post_b_adjusted.shape(), post_s.shape(), pi_star.len()),
        ));
    }
    let mut rows = post_b_adjusted.clone();
    for i in 0..rows.rows() {
        let weighted: Vec<f64> = post_s.row(i).iter().zip(pi_star.as_slice()).map(|(p, w)| p * w).collect();
        let reweighted = ProbVector::normalized(weighted)
            .map_err(|_| Error::invalid(format!("fuse_branches: row {i} has no mass under pi_star")))?;
        for (o, r) in rows.row_mut(i).iter_mut().zip(reweighted.as_slice()) {
            *o = 0.5 * *o + 0.5 * r;
        }
    }
    let pseudo_labels = rows.row_iter().map(argmax).collect();
    Ok(FusedPosterior {
        rows,
        pseudo_labels,
        pi_star: pi_star.clone(),
    })
}

/// Mean over masked rows of `−log softmax(logits + τ·log π̂ᵘ)[pseudo]`; zero if none.
pub fn unlabeled_consistency_loss<'t>(
    logits_strong: Var<'t>,
    pseudo_labels: &[usize],
    mask: &[bool],
    pi_u: &ProbVector,
    tau: f64,
) -> Result<Var<'t>> {
    let tape = logits_strong.tape();
    if mask.len() != logits_strong.rows() || pseudo_labels.len() != mask.len() {
        return Err(Error::shape("unlabeled_consistency_loss", "mask, labels and logits disagree"));
    }
    let picked: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if picked.is_empty() {
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    let rows = logits_strong.gather_rows(&picked)?;
    let labels: Vec<usize> = picked.iter().map(|&i| pseudo_labels[i]).collect();
    balanced_labeled_loss(rows, &labels, pi_u, tau)
}

/// Masked plain cross-entropy against pseudo-labels; zero if none.
pub fn masked_cross_entropy<'t>(logits: Var<'t>, pseudo_labels: &[usize], mask: &[bool]) -> Result<Var<'t>> {
    let uniform = ProbVector::uniform(logits.cols());
    unlabeled_consistency_loss(logits, pseudo_labels, mask, &uniform, 0.0)
}

/// Soft-label kernel posteriors over a reliable set (`n × C`).
///
/// For query `i`, `e_k = Σ_{j≠i} κ_ij P[j,k] / Σ_{j≠i} P[j,k]` and the
/// posterior is `∝ e_k · π̂ᵘ_k`. A class with no soft mass among the other
/// samples falls back to `κ(z_i, c_k)` when prototypes are given.
pub fn reliable_posteriors<'t>(
    z: Var<'t>,
    soft_labels: &Matrix,
    pi_u: &ProbVector,
    kernel: KernelConfig,
    prototypes: Option<Var<'t>>,
) -> Result<Var<'t>> {
    let (n, c) = soft_labels.shape();
    if z.rows() != n || pi_u.len() != c {
        return Err(Error::shape("reliable_contrastive_loss", format!("{} embeddings, labels {:?}", z.rows(), (n, c))));
    }
    let tape = z.tape();
    let off = off_diagonal(n);
    let mass = off.matmul(soft_labels)?;
    let mass_tol = 1e-12;
    let empty = mass.map(|m| if m <= mass_tol { 1.0 } else { 0.0 });
    let safe_mass = mass.map(|m| if m <= mass_tol { 1.0 } else { m });
    let gram = kernel.gram(z, z)?.mul_const(off)?;
    let mut class_exp = gram.matmul(tape.constant(soft_labels.clone()))?.div(tape.constant(safe_mass))?;
    if empty.sum() > 0.0 {
        let p = prototypes.ok_or_else(|| {
            let idx = empty.as_slice().iter().position(|&e| e > 0.0).expect("non-empty");
            Error::UnrepresentedClass(idx % c)
        })?;
        let keep = empty.map(|e| 1.0 - e);
        class_exp = class_exp.mul_const(keep)?.add(kernel.gram(z, p)?.mul_const(empty)?)?;
    }
    let weighted = class_exp.mul_const(pi_u.as_row())?;
    weighted.div(weighted.sum_rows())
}

/// Mean soft cross-entropy between the reliable set's soft labels and
/// [`reliable_posteriors`].
pub fn reliable_contrastive_loss<'t>(
    z: Var<'t>,
    soft_labels: &Matrix,
    pi_u: &ProbVector,
    kernel: KernelConfig,
    prototypes: Option<Var<'t>>,
) -> Result<Var<'t>> {
    let post = reliable_posteriors(z, soft_labels, pi_u, kernel, prototypes)?;
    soft_cross_entropy(post, soft_labels)
}

/// Rows `∝ (1/|B_y|) Σ_{B_y} κ(z_u, z') · π̂ᵘ_y` over a labeled batch; absent
/// classes use their prototype.
pub fn labeled_kernel_posteriors<'t>(
    z_u: Var<'t>,
    z_l: Var<'t>,
    labeled: &BatchPartition,
    pi_u: &ProbVector,
    kernel: KernelConfig,
    prototypes: Option<Var<'t>>,
) -> Result<Var<'t>> {
    let c = labeled.num_classes();
    if z_l.rows() != labeled.len() || pi_u.len() != c {
        return Err(Error::shape("labeled_kernel_posterior", "labeled embeddings, labels and prior disagree"));
    }
    let tape = z_u.tape();
    let counts = labeled.counts();
    let sums = kernel.gram(z_u, z_l)?.matmul(tape.constant(labeled.one_hot()))?;
    let inv = Matrix::from_fn(1, c, |_, k| if counts[k] == 0 { 0.0 } else { pi_u[k] / counts[k] as f64 });
    let mut means = sums.mul_const(inv)?;
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        let p = prototypes.ok_or(Error::UnrepresentedClass(k))?;
        let absent = Matrix::from_fn(1, c, |_, k| if counts[k] == 0 { pi_u[k] } else { 0.0 });
        means = means.add(kernel.gram(z_u, p)?.mul_const(absent)?)?;
    }
    means.div(means.sum_rows())
}

/// Row-normalised kernel graph `G_ij = κ_ij / Σ_j κ_ij` (self included).
pub fn similarity_graph<'t>(z: Var<'t>, kernel: KernelConfig) -> Result<Var<'t>> {
    let k = kernel.gram(z, z)?;
    k.div(k.sum_rows())
}

/// `(1 − β)(I − βG)⁻¹ P_L`.
pub fn propagate<'t>(p_l: Var<'t>, graph: Var<'t>, beta: f64) -> Result<Var<'t>> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::invalid(format!("propagation needs 0 <= beta < 1, got {beta}")));
    }
    let n = graph.rows();
    if graph.cols() != n || p_l.rows() != n {
        return Err(Error::shape("propagate", format!("graph {:?}, posteriors {:?}", graph.shape(), p_l.shape())));
    }
    if beta == 0.0 {
        return Ok(p_l);
    }
    let system = p_l.tape().constant(Matrix::identity(n)).sub(graph.scale(beta))?;
    Ok(system.solve(p_l)?.scale(1.0 - beta))
}

/// Plain-value propagation with a kernel graph built from `z_u`.
pub fn propagate_matrix(p_l: &Matrix, z_u: &Matrix, beta: f64, kernel: KernelConfig) -> Result<Matrix> {
    let tape = Tape::new();
    let g = similarity_graph(tape.constant(z_u.clone()), kernel)?;
    Ok((*propagate(tape.constant(p_l.clone()), g, beta)?.value()).clone())
}

/// Mean `−Σ_k weak[i,k] · log strong[i,k]`; the weak side is a constant.
pub fn smoothed_consistency_loss<'t>(prop_weak: &Matrix, prop_strong: Var<'t>) -> Result<Var<'t>> {
    if prop_weak.shape() != prop_strong.shape() {
        return Err(Error::shape("smoothed_consistency_loss", format!("{:?} vs {:?}", prop_weak.shape(), prop_strong.shape())));
    }
    soft_cross_entropy(prop_strong, prop_weak)
}

/// `λ1·L_cls + (1−λ1)·L_rpl + λ2·L_spl`.
pub fn total_loss<'t>(l_cls: Var<'t>, l_rpl: Var<'t>, l_spl: Var<'t>, lambda1: f64, lambda2: f64) -> Result<Var<'t>> {
    l_cls.scale(lambda1).add(l_rpl.scale(1.0 - lambda1))?.add(l_spl.scale(lambda2))
}

/// Labeled one-hot rows stacked over the unlabeled soft rows.
pub fn merged_soft_labels(labels: &[usize], num_classes: usize, unlabeled_rows: &Matrix) -> Result<Matrix> {
    Matrix::vstack(&[&one_hot_matrix(labels, num_classes), unlabeled_rows])
}
