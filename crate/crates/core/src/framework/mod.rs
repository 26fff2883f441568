//! Label-shift adjustment, the prior-weighted posterior-matching loss `J`,
//! Gaussian-kernel class posteriors and supervised contrastive forms.
//!
//! Batched operations take embeddings as a [`Var`] so that every loss is
//! differentiable; thin wrappers evaluate single rows on plain values.

pub mod zoo;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, ProbVector, Tape, Var, PROB_FLOOR};

/// `output[y] ∝ posterior[y] · target[y] / source[y]`.
pub fn bayes_adjust(posterior: &ProbVector, source: &ProbVector, target: &ProbVector) -> Result<ProbVector> {
    let c = posterior.len();
    if source.len() != c || target.len() != c {
        return Err(Error::shape("bayes_adjust", format!("lengths {c}, {}, {}", source.len(), target.len())));
    }
    if !source.is_strictly_positive() {
        return Err(Error::invalid("bayes_adjust: source prior must be strictly positive"));
    }
    let w: Vec<f64> = (0..c).map(|k| posterior[k] * target[k] / source[k]).collect();
    ProbVector::normalized(w).map_err(|_| Error::invalid("bayes_adjust: all-zero reweighted posterior"))
}

/// Row-wise [`bayes_adjust`] of a posterior matrix.
pub fn bayes_adjust_rows(posteriors: &Matrix, source: &ProbVector, target: &ProbVector) -> Result<Matrix> {
    let mut out = posteriors.clone();
    for i in 0..posteriors.rows() {
        let row = ProbVector::normalized(posteriors.row(i).to_vec())?;
        out.row_mut(i).copy_from_slice(bayes_adjust(&row, source, target)?.as_slice());
    }
    Ok(out)
}

/// `1×C` constant row of `scale · ln prior`.
pub(crate) fn log_prior_row<'t>(tape: &'t Tape, prior: &ProbVector, scale: f64) -> Var<'t> {
    tape.constant(Matrix::row_vector(&prior.ln()).scale(scale))
}

/// Batched `J` over logits of `P̂_t`.
///
/// Row `i` contributes `−Σ_k (chosen_k / source_k) · soft[i,k] · log P̂(k|z_i)`,
/// where `P̂(·|z_i) ∝ softmax(logits_i) · chosen`. Returns the batch mean.
pub fn unified_loss_j_batch<'t>(
    logits_t: Var<'t>,
    soft_labels: &Matrix,
    source: &ProbVector,
    chosen: &ProbVector,
) -> Result<Var<'t>> {
    let (n, c) = logits_t.shape();
    if soft_labels.shape() != (n, c) || source.len() != c || chosen.len() != c {
        return Err(Error::shape("unified_loss_j", format!("logits {:?}, labels {:?}", (n, c), soft_labels.shape())));
    }
    if !source.is_strictly_positive() || !chosen.is_strictly_positive() {
        return Err(Error::invalid("unified_loss_j: priors must be strictly positive"));
    }
    let tape = logits_t.tape();
    let log_post = logits_t.add(log_prior_row(tape, chosen, 1.0))?.log_softmax_rows();
    let ratio: Vec<f64> = (0..c).map(|k| chosen[k] / source[k]).collect();
    let weights = Matrix::from_fn(n, c, |i, k| soft_labels[(i, k)] * ratio[k]);
    Ok(log_post.mul_const(weights)?.sum().scale(-1.0 / n.max(1) as f64))
}

/// Scalar `J` for one sample given the model's `P̂_t` row.
pub fn unified_loss_j(
    soft_label: &ProbVector,
    posterior_t: &ProbVector,
    source: &ProbVector,
    chosen: &ProbVector,
) -> Result<f64> {
    let tape = Tape::new();
    let logits = tape.constant(Matrix::row_vector(&posterior_t.ln()));
    Ok(unified_loss_j_batch(logits, &soft_label.as_row(), source, chosen)?.scalar())
}

/// Gaussian-kernel similarity `κ(z, z') = exp(z·z' / t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub temperature: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self { temperature: 1.0 }
    }
}

impl KernelConfig {
    pub fn new(temperature: f64) -> Result<Self> {
        if temperature > 0.0 && temperature.is_finite() {
            Ok(Self { temperature })
        } else {
            Err(Error::invalid(format!("kernel temperature must be > 0, got {temperature}")))
        }
    }

    /// `exp(a · bᵀ / t)` for row sets `a` and `b`.
    pub fn gram<'t>(&self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        Ok(a.matmul(b.transpose())?.scale(1.0 / self.temperature).exp())
    }

    /// `κ(z_i, z_i)` for every row, as `n×1`.
    pub fn self_similarity<'t>(&self, z: Var<'t>) -> Result<Var<'t>> {
        Ok(z.mul(z)?.sum_rows().scale(1.0 / self.temperature).exp())
    }
}

/// Ones everywhere except a zero diagonal.
pub(crate) fn off_diagonal(n: usize) -> Matrix {
    Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 })
}

/// Kernel sums per class with each query's own term left out (`n × C`).
///
/// Masks the diagonal instead of subtracting `κ(z_i, z_i)`, which cancels
/// badly when the self term dominates.
pub(crate) fn class_sums_without_self<'t>(z: Var<'t>, one_hot: &Matrix, kernel: KernelConfig) -> Result<Var<'t>> {
    kernel
        .gram(z, z)?
        .mul_const(off_diagonal(z.rows()))?
        .matmul(z.tape().constant(one_hot.clone()))
}

/// Labels of a batch grouped by class, with optional class prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPartition {
    labels: Vec<usize>,
    num_classes: usize,
    members: Vec<Vec<usize>>,
    prototypes: Option<Matrix>,
}

impl BatchPartition {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!("label {bad} outside [0, {num_classes})")));
        }
        let mut members = vec![Vec::new(); num_classes];
        for (i, &y) in labels.iter().enumerate() {
            members[y].push(i);
        }
        Ok(Self {
            labels,
            num_classes,
            members,
            prototypes: None,
        })
    }

    /// Attaches unit-norm class prototypes (`C × l`).
    pub fn with_prototypes(mut self, prototypes: Matrix) -> Result<Self> {
        if prototypes.rows() != self.num_classes {
            return Err(Error::shape("prototypes", format!("{} rows for {} classes", prototypes.rows(), self.num_classes)));
        }
        for r in prototypes.row_iter() {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("prototype norm {n} is not 1")));
            }
        }
        self.prototypes = Some(prototypes);
        Ok(self)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn members(&self, class: usize) -> &[usize] {
        &self.members[class]
    }

    pub fn counts(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    pub fn prototypes(&self) -> Option<&Matrix> {
        self.prototypes.as_ref()
    }

    pub fn one_hot(&self) -> Matrix {
        one_hot_matrix(&self.labels, self.num_classes)
    }
}

pub fn one_hot_matrix(labels: &[usize], num_classes: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), num_classes);
    for (i, &y) in labels.iter().enumerate() {
        m[(i, y)] = 1.0;
    }
    m
}

/// Kernel class posteriors for every query in the batch (`B × C`).
///
/// Entry `(i, k)` is `mean_k / Σ_j mean_j`, where `mean_k` averages
/// `κ(z_i, ·)` over the members of class `k`. With `exclude_self` the query
/// is dropped from its own class. A class left without members is
/// represented by its prototype alone when `prototypes` is given.
pub fn kernel_posteriors<'t>(
    z: Var<'t>,
    partition: &BatchPartition,
    prototypes: Option<Var<'t>>,
    kernel: KernelConfig,
    exclude_self: bool,
) -> Result<Var<'t>> {
    let (b, c) = (partition.len(), partition.num_classes());
    if z.rows() != b {
        return Err(Error::shape("kernel_posteriors", format!("{} embeddings for {b} labels", z.rows())));
    }
    let one_hot = partition.one_hot();
    let mut counts = Matrix::from_fn(b, c, |_, k| partition.members(k).len() as f64);
    let mut sums = if exclude_self {
        counts = counts.zip_map(&one_hot, |n, o| n - o);
        class_sums_without_self(z, &one_hot, kernel)?
    } else {
        kernel.gram(z, z)?.matmul(z.tape().constant(one_hot.clone()))?
    };
    let empty = counts.map(|n| if n == 0.0 { 1.0 } else { 0.0 });
    if empty.sum() > 0.0 {
        match prototypes {
            Some(p) => {
                if p.rows() != c {
                    return Err(Error::shape("kernel_posteriors", format!("{} prototypes for {c} classes", p.rows())));
                }
                sums = sums.add(kernel.gram(z, p)?.mul_const(empty.clone())?)?;
                counts.add_assign(&empty);
            }
            None => {
                let k = (0..b * c).find(|&idx| empty.as_slice()[idx] > 0.0).expect("non-empty") % c;
                return Err(Error::UnrepresentedClass(k));
            }
        }
    }
    let means = sums.div(z.tape().constant(counts))?;
    means.div(means.sum_rows())
}

/// Posterior of one query on plain values, using the partition's prototypes.
pub fn kernel_posterior(
    query: usize,
    z: &Matrix,
    partition: &BatchPartition,
    kernel: KernelConfig,
    exclude_self: bool,
) -> Result<ProbVector> {
    if query >= partition.len() {
        return Err(Error::invalid(format!("query {query} outside batch of {}", partition.len())));
    }
    let c = partition.num_classes();
    let zq = z.row(query);
    let kappa = |other: &[f64]| {
        let dot: f64 = zq.iter().zip(other).map(|(a, b)| a * b).sum();
        (dot / kernel.temperature).exp()
    };
    let mut means = Vec::with_capacity(c);
    for k in 0..c {
        let members: Vec<usize> = partition
            .members(k)
            .iter()
            .copied()
            .filter(|&j| !(exclude_self && j == query))
            .collect();
        if members.is_empty() {
            let proto = partition.prototypes().ok_or(Error::UnrepresentedClass(k))?;
            means.push(kappa(proto.row(k)));
        } else {
            means.push(members.iter().map(|&j| kappa(z.row(j))).sum::<f64>() / members.len() as f64);
        }
    }
    ProbVector::normalized(means)
}

/// Per-sample cross-entropy of the class-balanced kernel posterior with the
/// query removed from its own numerator only.
///
/// Row `i`: `−log[(1/(|B_y|−1)) Σ_{B_y∖i} κ / Σ_k (1/|B_k|) Σ_{B_k} κ]`.
/// Returns an `n×1` column.
pub fn class_balanced_ce_rows<'t>(z: Var<'t>, partition: &BatchPartition, kernel: KernelConfig) -> Result<Var<'t>> {
    let (b, c) = (partition.len(), partition.num_classes());
    let counts = partition.counts();
    if let Some(i) = (0..b).find(|&i| counts[partition.labels()[i]] < 2) {
        return Err(Error::invalid(format!("sample {i} has no positive partner")));
    }
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        return Err(Error::UnrepresentedClass(k));
    }
    let tape = z.tape();
    let one_hot = partition.one_hot();
    let sums = kernel.gram(z, z)?.matmul(tape.constant(one_hot.clone()))?;
    let inv_counts = Matrix::from_fn(1, c, |_, k| 1.0 / counts[k] as f64);
    let denom = sums.mul_const(inv_counts)?.sum_rows();
    let positives = class_sums_without_self(z, &one_hot, kernel)?.pick(partition.labels())?;
    let inv_pos = Matrix::from_fn(b, 1, |i, _| 1.0 / (counts[partition.labels()[i]] - 1) as f64);
    Ok(positives.mul_const(inv_pos)?.div(denom)?.ln().neg())
}

/// Supervised contrastive losses with the positive sum inside (`in`) or
/// outside (`out`) the logarithm, as `n×1` columns.
///
/// Denominators sum `κ` over the whole batch including the query itself.
pub fn scl_loss_rows<'t>(z: Var<'t>, partition: &BatchPartition, kernel: KernelConfig) -> Result<(Var<'t>, Var<'t>)> {
    let b = partition.len();
    if z.rows() != b {
        return Err(Error::shape("scl_losses", format!("{} embeddings for {b} labels", z.rows())));
    }
    let counts = partition.counts();
    if let Some(i) = (0..b).find(|&i| counts[partition.labels()[i]] < 2) {
        return Err(Error::invalid(format!("sample {i} has a singleton positive set")));
    }
    let tape = z.tape();
    let one_hot = partition.one_hot();
    let logits = z.matmul(z.transpose())?.scale(1.0 / kernel.temperature);
    let log_denom = logits.logsumexp_rows();
    let own = logits
        .exp()
        .mul_const(off_diagonal(b))?
        .matmul(tape.constant(one_hot))?
        .pick(partition.labels())?;
    let l_in = own.ln().neg().add(log_denom)?;

    // mean over positives of z·z'/t: mask excludes the query itself
    let mask = Matrix::from_fn(b, b, |i, j| {
        if i != j && partition.labels()[i] == partition.labels()[j] {
            1.0 / (counts[partition.labels()[i]] - 1) as f64
        } else {
            0.0
        }
    });
    let pos_mean = logits.mul_const(mask)?.sum_rows();
    let l_out = log_denom.sub(pos_mean)?;
    Ok((l_in, l_out))
}

/// `(L_in, L_out)` for one query on plain values.
pub fn scl_losses(query: usize, z: &Matrix, partition: &BatchPartition, kernel: KernelConfig) -> Result<(f64, f64)> {
    let tape = Tape::new();
    let (a, b) = scl_loss_rows(tape.constant(z.clone()), partition, kernel)?;
    Ok((a.value()[(query, 0)], b.value()[(query, 0)]))
}

/// Mean soft cross-entropy `−Σ_k target[i,k] log max(p[i,k], floor)`.
pub(crate) fn soft_cross_entropy<'t>(posterior: Var<'t>, target: &Matrix) -> Result<Var<'t>> {
    let n = posterior.rows().max(1) as f64;
    Ok(posterior.ln_floor(PROB_FLOOR).mul_const(target.clone())?.sum().scale(-1.0 / n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn bayes_examples() {
        let u = ProbVector::uniform(2);
        assert_eq!(bayes_adjust(&pv(&[0.3, 0.7]), &u, &u).unwrap(), pv(&[0.3, 0.7]));
        let out = bayes_adjust(&pv(&[0.8, 0.2]), &pv(&[0.9, 0.1]), &u).unwrap();
        assert!((out[0] - 0.3077).abs() < 1e-4 && (out[1] - 0.6923).abs() < 1e-4);
        let hot = ProbVector::one_hot(3, 1);
        assert_eq!(bayes_adjust(&hot, &pv(&[0.5, 0.3, 0.2]), &ProbVector::uniform(3)).unwrap(), hot);
        assert!(bayes_adjust(&pv(&[1.0, 0.0]), &u, &pv(&[0.0, 1.0])).is_err());
    }

    #[test]
    fn unified_j_examples() {
        let j = unified_loss_j(&pv(&[1.0, 0.0]), &pv(&[0.5, 0.5]), &pv(&[0.75, 0.25]), &pv(&[0.75, 0.25])).unwrap();
        assert!((j - 0.75f64.ln().abs()).abs() < 1e-12);
        assert!((j - 0.2877).abs() < 1e-4);
        let u = ProbVector::uniform(3);
        let p = pv(&[0.2, 0.5, 0.3]);
        let ce = unified_loss_j(&ProbVector::one_hot(3, 2), &p, &u, &u).unwrap();
        assert!((ce + 0.3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kernel_posterior_two_class_example() {
        let z = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let part = BatchPartition::new(vec![0, 0, 1], 2).unwrap();
        let p = kernel_posterior(0, &z, &part, KernelConfig::default(), true).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p[0] - 0.7311).abs() < 1e-4 && (p[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn kernel_posterior_identical_embeddings_uniform() {
        let z = Matrix::filled(6, 3, 1.0 / 3f64.sqrt());
        let part = BatchPartition::new(vec![0, 0, 1, 1, 2, 2], 3).unwrap();
        for q in 0..6 {
            let p = kernel_posterior(q, &z, &part, KernelConfig::default(), true).unwrap();
            for k in 0..3 {
                assert!((p[k] - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unrepresented_class_and_prototype_fallback() {
        let z = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let part = BatchPartition::new(vec![0, 1], 3).unwrap();
        let err = kernel_posterior(0, &z, &part, KernelConfig::default(), false).unwrap_err();
        assert_eq!(err.to_string(), "class 2 unrepresented");
        let solo = kernel_posterior(0, &z, &part, KernelConfig::default(), true).unwrap_err();
        assert!(matches!(solo, Error::UnrepresentedClass(_)));
        let protos = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]).unwrap();
        let part = part.with_prototypes(protos).unwrap();
        let p = kernel_posterior(0, &z, &part, KernelConfig::default(), true).unwrap();
        let e = std::f64::consts::E;
        let total = e + 1.0 + 1.0 / e;
        assert!((p[0] - e / total).abs() < 1e-12 && (p[2] - (1.0 / e) / total).abs() < 1e-12);
    }

    #[test]
    fn scl_symmetric_batch() {
        let z = Matrix::filled(4, 2, 1.0 / 2f64.sqrt());
        let part = BatchPartition::new(vec![0, 0, 1, 1], 2).unwrap();
        let (l_in, l_out) = scl_losses(0, &z, &part, KernelConfig::default()).unwrap();
        assert!((l_in - 4f64.ln()).abs() < 1e-12);
        assert!((l_out - 4f64.ln()).abs() < 1e-12);
        let single = BatchPartition::new(vec![0, 1, 1, 1], 2).unwrap();
        assert!(scl_losses(1, &z, &single, KernelConfig::default()).is_err());
    }

    #[test]
    fn scl_separated_classes_vanish() {
        let z = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]).unwrap();
        let part = BatchPartition::new(vec![0, 0, 1, 1], 2).unwrap();
        let (l_in, _) = scl_losses(0, &z, &part, KernelConfig::new(0.01).unwrap()).unwrap();
        // self stays in the denominator, so the limit is log 2
        assert!((l_in - 2f64.ln()).abs() < 1e-12, "{l_in}");
    }
}
