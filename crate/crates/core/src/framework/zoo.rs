//! Long-tail losses expressed as density estimates plugged into the
//! label-shift-corrected posterior: kernel estimates with class centres,
//! queues, K-positive subsets or learnable centres, and two closed-form
//! directional densities.
//!
//! Every function returns the batch-mean loss as a `1×1` [`Var`].

use std::collections::VecDeque;

use rand::seq::index::sample;

use super::{class_sums_without_self, log_prior_row, one_hot_matrix, BatchPartition, KernelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, ProbVector, Rng, Var};

fn check_prior(prior: &ProbVector, c: usize, op: &'static str) -> Result<()> {
    if prior.len() != c {
        return Err(Error::shape(op, format!("prior of length {} for {c} classes", prior.len())));
    }
    if !prior.is_strictly_positive() {
        return Err(Error::invalid(format!("{op}: prior must be strictly positive")));
    }
    Ok(())
}

fn check_rows(z: Var<'_>, partition: &BatchPartition, op: &'static str) -> Result<()> {
    if z.rows() != partition.len() {
        return Err(Error::shape(op, format!("{} embeddings for {} labels", z.rows(), partition.len())));
    }
    Ok(())
}

/// Balanced contrastive loss with class centres and `1/π_y` reweighting.
///
/// Each class set is `B_k ∪ {c_k}` when `centers` is given, else `B_k`.
/// Row `i`: `−(1/π_y) log[(Σ_{N_y∖i} κ / (|N_y|−1)) / Σ_k (Σ_{N_k} κ / |N_k|)]`.
pub fn bcl_loss<'t>(
    z: Var<'t>,
    partition: &BatchPartition,
    centers: Option<Var<'t>>,
    prior: &ProbVector,
    kernel: KernelConfig,
) -> Result<Var<'t>> {
    let (b, c) = (partition.len(), partition.num_classes());
    check_rows(z, partition, "bcl_loss")?;
    check_prior(prior, c, "bcl_loss")?;
    let tape = z.tape();
    let labels = partition.labels();
    let extra = usize::from(centers.is_some());
    let counts: Vec<usize> = partition.counts().iter().map(|n| n + extra).collect();
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        return Err(Error::UnrepresentedClass(k));
    }
    if let Some(i) = (0..b).find(|&i| counts[labels[i]] < 2) {
        return Err(Error::invalid(format!("bcl_loss: sample {i} has no positive partner")));
    }
    let one_hot = partition.one_hot();
    let mut sums = kernel.gram(z, z)?.matmul(tape.constant(one_hot.clone()))?;
    let mut own = class_sums_without_self(z, &one_hot, kernel)?;
    if let Some(cen) = centers {
        let to_centers = kernel.gram(z, cen)?;
        sums = sums.add(to_centers)?;
        own = own.add(to_centers)?;
    }
    let inv = Matrix::from_fn(1, c, |_, k| 1.0 / counts[k] as f64);
    let denom = sums.mul_const(inv)?.sum_rows();
    let positives = own.pick(labels)?;
    let inv_pos = Matrix::from_fn(b, 1, |i, _| 1.0 / (counts[labels[i]] - 1) as f64);
    let weights = Matrix::from_fn(b, 1, |i, _| 1.0 / prior[labels[i]]);
    Ok(positives
        .mul_const(inv_pos)?
        .div(denom)?
        .ln()
        .mul_const(weights)?
        .sum()
        .scale(-1.0 / b as f64))
}

/// Fixed-capacity per-class ring buffers of detached embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassQueues {
    capacity: usize,
    dim: usize,
    queues: Vec<VecDeque<Vec<f64>>>,
}

impl ClassQueues {
    pub const DEFAULT_CAPACITY: usize = 32;

    pub fn new(num_classes: usize, dim: usize, capacity: usize) -> Self {
        Self {
            capacity,
            dim,
            queues: vec![VecDeque::with_capacity(capacity); num_classes],
        }
    }

    pub fn len(&self, class: usize) -> usize {
        self.queues[class].len()
    }

    pub fn is_empty(&self) -> bool {
        self.queues.iter().all(VecDeque::is_empty)
    }

    /// Enqueues each row under its label, evicting the oldest entries.
    pub fn push(&mut self, z: &Matrix, labels: &[usize]) -> Result<()> {
        if z.cols() != self.dim || z.rows() != labels.len() {
            return Err(Error::shape("ClassQueues::push", format!("{:?} with {} labels", z.shape(), labels.len())));
        }
        for (row, &y) in z.row_iter().zip(labels) {
            let q = self.queues.get_mut(y).ok_or(Error::UnrepresentedClass(y))?;
            if self.capacity == 0 {
                continue;
            }
            if q.len() == self.capacity {
                q.pop_front();
            }
            q.push_back(row.to_vec());
        }
        Ok(())
    }

    /// All queued embeddings with their class labels.
    pub fn contents(&self) -> (Matrix, Vec<usize>) {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (k, q) in self.queues.iter().enumerate() {
            for row in q {
                data.extend_from_slice(row);
                labels.push(k);
            }
        }
        (Matrix::new(labels.len(), self.dim, data).expect("rows share dim"), labels)
    }
}

/// Gaussian mixture likelihood loss over the batch merged with class queues.
///
/// Row `i`: `−log[(π_y Σ_{N_y∖i} κ / (|N_y|−1)) / Σ_k π_k Σ_{N_k} κ / |N_k|]`
/// with `N_k = B_k ∪ Q_k`. Queue entries are constants.
pub fn gml_loss<'t>(
    z: Var<'t>,
    partition: &BatchPartition,
    queues: &ClassQueues,
    prior: &ProbVector,
    kernel: KernelConfig,
) -> Result<Var<'t>> {
    let (b, c) = (partition.len(), partition.num_classes());
    check_rows(z, partition, "gml_loss")?;
    check_prior(prior, c, "gml_loss")?;
    if queues.queues.len() != c {
        return Err(Error::shape("gml_loss", format!("{} queues for {c} classes", queues.queues.len())));
    }
    let tape = z.tape();
    let labels = partition.labels();
    let batch_counts = partition.counts();
    let counts: Vec<usize> = (0..c).map(|k| batch_counts[k] + queues.len(k)).collect();
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        return Err(Error::UnrepresentedClass(k));
    }
    if let Some(i) = (0..b).find(|&i| counts[labels[i]] < 2) {
        return Err(Error::invalid(format!("gml_loss: sample {i} has no positive partner")));
    }
    let one_hot = partition.one_hot();
    let mut sums = kernel.gram(z, z)?.matmul(tape.constant(one_hot.clone()))?;
    let mut own = class_sums_without_self(z, &one_hot, kernel)?;
    let (qz, ql) = queues.contents();
    if !ql.is_empty() {
        let q = tape.constant(qz);
        let to_queue = kernel.gram(z, q)?.matmul(tape.constant(one_hot_matrix(&ql, c)))?;
        sums = sums.add(to_queue)?;
        own = own.add(to_queue)?;
    }
    let scale = Matrix::from_fn(1, c, |_, k| prior[k] / counts[k] as f64);
    let denom = sums.mul_const(scale)?.sum_rows();
    let positives = own.pick(labels)?;
    let num_scale = Matrix::from_fn(b, 1, |i, _| prior[labels[i]] / (counts[labels[i]] - 1) as f64);
    Ok(positives.mul_const(num_scale)?.div(denom)?.ln().sum().scale(-1.0 / b as f64))
}

/// Draws, for every query, `k` distinct positives from its own class
/// excluding itself.
pub fn sample_k_positives(partition: &BatchPartition, k: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::invalid("KCL needs K >= 1"));
    }
    (0..partition.len())
        .map(|i| {
            let others: Vec<usize> = partition
                .members(partition.labels()[i])
                .iter()
                .copied()
                .filter(|&j| j != i)
                .collect();
            if k > others.len() {
                return Err(Error::invalid(format!(
                    "KCL: K = {k} exceeds the {} positives available to sample {i}",
                    others.len()
                )));
            }
            Ok(sample(rng, others.len(), k).into_iter().map(|j| others[j]).collect())
        })
        .collect()
}

/// K-positive contrastive losses `(in, out)` for given positive subsets.
///
/// In-form: `−log[(1/K) Σ_{P_i} κ / Σ_B κ]`; out-form:
/// `−(1/K) Σ_{P_i} log(κ / Σ_B κ)`. Denominators include the query.
pub fn kcl_losses<'t>(
    z: Var<'t>,
    partition: &BatchPartition,
    positives: &[Vec<usize>],
    kernel: KernelConfig,
) -> Result<(Var<'t>, Var<'t>)> {
    let b = partition.len();
    check_rows(z, partition, "kcl_losses")?;
    if positives.len() != b {
        return Err(Error::shape("kcl_losses", format!("{} positive sets for {b} queries", positives.len())));
    }
    let k = positives.first().map_or(0, Vec::len);
    for (i, p) in positives.iter().enumerate() {
        let y = partition.labels()[i];
        if p.len() != k || k == 0 || p.iter().any(|&j| j == i || j >= b || partition.labels()[j] != y) {
            return Err(Error::invalid(format!("kcl_losses: invalid positive set for sample {i}")));
        }
    }
    let mut mask = Matrix::zeros(b, b);
    for (i, p) in positives.iter().enumerate() {
        for &j in p {
            mask[(i, j)] += 1.0 / k as f64;
        }
    }
    let logits = z.matmul(z.transpose())?.scale(1.0 / kernel.temperature);
    let log_denom = logits.logsumexp_rows();
    let mean_kernel = logits.exp().mul_const(mask.clone())?.sum_rows();
    let l_in = log_denom.sub(mean_kernel.ln())?.mean();
    let l_out = log_denom.sub(logits.mul_const(mask)?.sum_rows())?.mean();
    Ok((l_in, l_out))
}

/// Parametric contrastive loss with learnable class centres.
///
/// Class estimate `(β/|B_k|) Σ_{B_k} κ + (1−β) κ(z, c_k)`, with the query left
/// out of its own sum; scaled by `π_k` and normalised over classes.
pub fn paco_loss<'t>(
    z: Var<'t>,
    partition: &BatchPartition,
    centers: Var<'t>,
    beta: f64,
    prior: &ProbVector,
    kernel: KernelConfig,
) -> Result<Var<'t>> {
    let (b, c) = (partition.len(), partition.num_classes());
    check_rows(z, partition, "paco_loss")?;
    check_prior(prior, c, "paco_loss")?;
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("paco_loss: beta must lie in [0, 1], got {beta}")));
    }
    if centers.rows() != c {
        return Err(Error::shape("paco_loss", format!("{} centers for {c} classes", centers.rows())));
    }
    let labels = partition.labels();
    let one_hot = partition.one_hot();
    let counts = partition.counts();
    let sums = class_sums_without_self(z, &one_hot, kernel)?;
    let coef = Matrix::from_fn(1, c, |_, k| if counts[k] == 0 { 0.0 } else { beta / counts[k] as f64 });
    let class_est = sums.mul_const(coef)?.add(kernel.gram(z, centers)?.scale(1.0 - beta))?;
    let weighted = class_est.mul_const(prior.as_row())?;
    let post = weighted.div(weighted.sum_rows())?;
    Ok(post.pick(labels)?.ln().sum().scale(-1.0 / b as f64))
}

/// `s_q(d, ρ) = [1 − (1−q)ρd/2]^{1/(1−q)}` with the base clamped at zero;
/// `exp(−ρd/2)` at `q = 1`.
pub fn tvmf_similarity(d: f64, q: f64, rho: f64) -> f64 {
    if q == 1.0 {
        (-rho * d / 2.0).exp()
    } else {
        (1.0 - (1.0 - q) * rho * d / 2.0).max(0.0).powf(1.0 / (1.0 - q))
    }
}

fn tvmf_var<'t>(d: Var<'t>, q: f64, rho: f64) -> Var<'t> {
    if q == 1.0 {
        d.scale(-rho / 2.0).exp()
    } else {
        d.scale(-(1.0 - q) * rho / 2.0).add_scalar(1.0).clamp_min(0.0).powf(1.0 / (1.0 - q))
    }
}

/// T-vMF loss: logits `φ_{q,ρ}(z, μ_k)` adjusted by `log π_k`.
///
/// `φ = 2 (s_q(‖z−μ_k‖) − s_q(2)) / (s_q(0) − s_q(2)) − 1` for unit `z`, `μ_k`.
pub fn tvmf_loss<'t>(
    z: Var<'t>,
    labels: &[usize],
    mu: Var<'t>,
    q: f64,
    rho: f64,
    prior: &ProbVector,
) -> Result<Var<'t>> {
    let c = mu.rows();
    check_prior(prior, c, "tvmf_loss")?;
    if z.rows() != labels.len() || labels.iter().any(|&y| y >= c) {
        return Err(Error::invalid("tvmf_loss: labels do not match embeddings/classes"));
    }
    if !(rho > 0.0) {
        return Err(Error::invalid("tvmf_loss: rho must be > 0"));
    }
    let s0 = tvmf_similarity(0.0, q, rho);
    let s2 = tvmf_similarity(2.0, q, rho);
    if !(s0 > s2) {
        return Err(Error::invalid(format!("tvmf_loss: degenerate similarity range for q={q}, rho={rho}")));
    }
    let tape = z.tape();
    let (b, l) = z.shape();
    // ‖z−μ‖² = ‖z‖² + ‖μ‖² − 2 z·μ
    let zz = z.mul(z)?.matmul(tape.constant(Matrix::filled(l, c, 1.0)))?;
    let mm = tape.constant(Matrix::filled(b, l, 1.0)).matmul(mu.mul(mu)?.transpose())?;
    let sq = zz.add(mm)?.sub(z.matmul(mu.transpose())?.scale(2.0))?;
    let dist = sq.clamp_min(0.0).sqrt();
    let phi = tvmf_var(dist, q, rho).add_scalar(-s2).scale(2.0 / (s0 - s2)).add_scalar(-1.0);
    let log_post = phi.add(log_prior_row(tape, prior, 1.0))?.log_softmax_rows();
    Ok(log_post.pick(labels)?.sum().scale(-1.0 / b as f64))
}

/// Wrapped-Cauchy loss: logits `f(cos θ_k; ϑ_k) + log π_k` with
/// `f = (1−ϑ²) / (2π(1 + ϑ² − 2ϑ cos θ))`. Requires `|ϑ_k| < 1`.
pub fn wcdas_loss<'t>(
    z: Var<'t>,
    labels: &[usize],
    mu: Var<'t>,
    vartheta: Var<'t>,
    prior: &ProbVector,
) -> Result<Var<'t>> {
    let c = mu.rows();
    check_prior(prior, c, "wcdas_loss")?;
    if vartheta.shape() != (1, c) {
        return Err(Error::shape("wcdas_loss", format!("vartheta {:?} for {c} classes", vartheta.shape())));
    }
    if let Some(k) = vartheta.value().as_slice().iter().position(|t| !(t.abs() < 1.0)) {
        return Err(Error::invalid(format!("wcdas_loss: |vartheta_{k}| must be < 1")));
    }
    if z.rows() != labels.len() || labels.iter().any(|&y| y >= c) {
        return Err(Error::invalid("wcdas_loss: labels do not match embeddings/classes"));
    }
    let tape = z.tape();
    let b = z.rows();
    let zn = z.normalize_rows(crate::model::NORM_FLOOR);
    let mn = mu.normalize_rows(crate::model::NORM_FLOOR);
    let cos = zn.matmul(mn.transpose())?;
    let t2 = vartheta.mul(vartheta)?;
    let numer = t2.neg().add_scalar(1.0);
    let denom = cos.mul(vartheta.scale(-2.0))?.add(t2.add_scalar(1.0))?.scale(2.0 * std::f64::consts::PI);
    let f = denom.powf(-1.0).mul(numer)?;
    let log_post = f.add(log_prior_row(tape, prior, 1.0))?.log_softmax_rows();
    Ok(log_post.pick(labels)?.sum().scale(-1.0 / b as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::framework::class_balanced_ce_rows;
    use crate::numerics::{seeded_rng, Tape};

    fn unit_rows(rows: usize, cols: usize, seed: u64) -> Matrix {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = seeded_rng(seed);
        let mut m = Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng));
        for i in 0..rows {
            let n = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            m.row_mut(i).iter_mut().for_each(|v| *v /= n);
        }
        m
    }

    #[test]
    fn bcl_uniform_collapses_to_balanced_ce() {
        let tape = Tape::new();
        let z = tape.constant(unit_rows(6, 3, 1));
        let part = BatchPartition::new(vec![0, 0, 1, 1, 2, 2], 3).unwrap();
        let bcl = bcl_loss(z, &part, None, &ProbVector::uniform(3), KernelConfig::default()).unwrap();
        let ce = class_balanced_ce_rows(z, &part, KernelConfig::default()).unwrap().mean();
        assert!((bcl.scalar() - 3.0 * ce.scalar()).abs() < 1e-12);
    }

    #[test]
    fn tvmf_limit_q_to_one() {
        for d in [0.0, 0.3, 1.1, 2.0] {
            let e = tvmf_similarity(d, 1.0, 4.0);
            assert!((tvmf_similarity(d, 1.0 + 1e-6, 4.0) - e).abs() < 1e-4);
            assert!((tvmf_similarity(d, 1.0 - 1e-6, 4.0) - e).abs() < 1e-4);
        }
    }

    #[test]
    fn wcdas_zero_concentration_is_log_c() {
        let tape = Tape::new();
        let z = tape.constant(unit_rows(5, 3, 2));
        let mu = tape.constant(unit_rows(4, 3, 3));
        let theta = tape.constant(Matrix::zeros(1, 4));
        let loss = wcdas_loss(z, &[0, 1, 2, 3, 0], mu, theta, &ProbVector::uniform(4)).unwrap();
        assert!((loss.scalar() - 4f64.ln()).abs() < 1e-12);
        let bad = tape.constant(Matrix::row_vector(&[0.0, 1.0, 0.0, 0.0]));
        assert!(wcdas_loss(z, &[0, 1, 2, 3, 0], mu, bad, &ProbVector::uniform(4)).is_err());
    }

    #[test]
    fn kcl_rejects_oversized_k() {
        let part = BatchPartition::new(vec![0, 0, 1, 1, 1], 2).unwrap();
        assert!(sample_k_positives(&part, 2, &mut seeded_rng(0)).is_err());
        let sets = sample_k_positives(&part, 1, &mut seeded_rng(0)).unwrap();
        assert_eq!(sets[0], vec![1]);
    }

    #[test]
    fn queues_evict_oldest() {
        let mut q = ClassQueues::new(2, 1, 2);
        q.push(&Matrix::column_vector(&[1.0, 2.0, 3.0]), &[0, 0, 0]).unwrap();
        let (m, l) = q.contents();
        assert_eq!(m.as_slice(), &[2.0, 3.0]);
        assert_eq!(l, vec![0, 0]);
    }
}
