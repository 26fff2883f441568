//! Dense matrices, stable log-domain primitives, a reverse-mode tape and
//! the finite-difference gradient oracle.

pub mod autodiff;
pub mod linalg;
mod matrix;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use autodiff::{concat_rows, Gradients, Tape, Var};
pub use linalg::{solve_linear, Lu};
pub use matrix::{argmax, Matrix};

/// Probability floor used inside every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Sum-to-one tolerance for [`ProbVector`].
pub const PROB_TOL: f64 = 1e-9;

/// A probability vector: non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::invalid("empty probability vector"));
        }
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(format!("probability entries must be finite and >= 0: {p:?}")));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > PROB_TOL {
            return Err(Error::invalid(format!("probabilities sum to {s}")));
        }
        Ok(Self(p))
    }

    /// Scales non-negative weights to sum to one.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("weights must be finite and non-negative"));
        }
        let s: f64 = weights.iter().sum();
        if s <= 0.0 {
            return Err(Error::invalid("weights have zero total mass"));
        }
        Ok(Self(weights.into_iter().map(|w| w / s).collect()))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        Self::normalized(counts.iter().map(|&c| c as f64).collect())
    }

    pub fn one_hot(n: usize, k: usize) -> Self {
        let mut p = vec![0.0; n];
        p[k] = 1.0;
        Self(p)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.0.iter().all(|&v| v > 0.0)
    }

    pub fn ln(&self) -> Vec<f64> {
        self.0.iter().map(|p| p.max(PROB_FLOOR).ln()).collect()
    }

    pub fn as_row(&self) -> Matrix {
        Matrix::row_vector(&self.0)
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Whether `p` is a probability vector within `tol`.
pub fn is_distribution(p: &[f64], tol: f64) -> bool {
    !p.is_empty()
        && p.iter().all(|v| v.is_finite() && *v >= -tol)
        && (p.iter().sum::<f64>() - 1.0).abs() <= tol
}

pub fn logsumexp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn log_softmax_unchecked(x: &[f64]) -> Vec<f64> {
    let lse = logsumexp(x);
    x.iter().map(|v| v - lse).collect()
}

/// Log-softmax via max subtraction.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("log_softmax of empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("log_softmax input"));
    }
    Ok(log_softmax_unchecked(logits))
}

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    Ok(log_softmax(logits)?.into_iter().map(f64::exp).collect())
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(logits: &Matrix) -> Result<Matrix> {
    logits.ensure_finite("logits")?;
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = log_softmax_unchecked(logits.row(i));
        out.row_mut(i).iter_mut().zip(row).for_each(|(o, v)| *o = v.exp());
    }
    Ok(out)
}

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub param_count: usize,
}

/// Relative-error floor in [`check_gradient`].
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Compares `loss`'s own gradient with central finite differences.
///
/// `loss` returns the value and the gradient at a parameter vector; the
/// finite-difference side only uses the value. Relative error per entry
/// is `|a - f| / max(|a|, |f|, 1e-8)`.
pub fn check_gradient<F>(loss: F, params: &[f64], step: f64) -> Result<GradientReport>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(step > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let (f0, analytic) = loss(params)?;
    if !f0.is_finite() {
        return Err(Error::NonFinite("loss at base point"));
    }
    if analytic.len() != params.len() {
        return Err(Error::shape(
            "check_gradient",
            format!("{} gradient entries for {} parameters", analytic.len(), params.len()),
        ));
    }
    let mut probe = params.to_vec();
    let mut report = GradientReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        param_count: params.len(),
    };
    for (k, &a) in analytic.iter().enumerate() {
        probe[k] = params[k] + step;
        let (fp, _) = loss(&probe)?;
        probe[k] = params[k] - step;
        let (fm, _) = loss(&probe)?;
        probe[k] = params[k];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite("loss at probe point"));
        }
        let numeric = (fp - fm) / (2.0 * step);
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        report.max_abs_err = report.max_abs_err.max(abs);
        report.max_rel_err = report.max_rel_err.max(rel);
    }
    Ok(report)
}

/// Deterministic, portable random stream. Cloning snapshots its state.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng as _;

    #[test]
    fn log_softmax_examples() {
        let half = 0.5f64.ln();
        for input in [[0.0, 0.0], [1000.0, 1000.0]] {
            let out = log_softmax(&input).unwrap();
            assert!((out[0] - half).abs() < 1e-12 && (out[1] - half).abs() < 1e-12);
        }
        let out = log_softmax(&[1.0, 0.0]).unwrap();
        // -ln(1 + e^-1) and -ln(1 + e)
        assert!((out[0] + 0.313_261_687_518_222_8).abs() < 1e-12);
        assert!((out[1] + 1.313_261_687_518_222_8).abs() < 1e-12);
        assert!(log_softmax(&[f64::NAN, 0.0]).is_err());
        assert!(log_softmax(&[f64::INFINITY]).is_err());
    }

    proptest! {
        #[test]
        fn log_softmax_exponentiates_to_distribution(x in prop::collection::vec(-500.0f64..500.0, 1..12)) {
            let p: Vec<f64> = log_softmax(&x).unwrap().into_iter().map(f64::exp).collect();
            prop_assert!(is_distribution(&p, 1e-12));
        }

        #[test]
        fn log_softmax_shift_invariant(
            x in prop::collection::vec(-50.0f64..50.0, 1..12),
            c in -100.0f64..100.0,
        ) {
            let a = log_softmax(&x).unwrap();
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let b = log_softmax(&shifted).unwrap();
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![0.5, 0.5]).is_ok());
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbVector::new(vec![1.5, -0.5]).is_err());
        assert!(ProbVector::normalized(vec![0.0, 0.0]).is_err());
        let p = ProbVector::from_counts(&[3, 1]).unwrap();
        assert_eq!(p.as_slice(), &[0.75, 0.25]);
    }

    #[test]
    fn gradient_check_quadratic_and_constant() {
        let quad = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
            Ok((p.iter().map(|v| v * v).sum(), p.iter().map(|v| 2.0 * v).collect()))
        };
        let r = check_gradient(quad, &[0.3, -1.2, 4.0], 1e-5).unwrap();
        assert!(r.max_rel_err < 1e-8, "{r:?}");
        assert_eq!(r.param_count, 3);

        let constant = |p: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((7.0, vec![0.0; p.len()])) };
        let r = check_gradient(constant, &[1.0, 2.0], 1e-5).unwrap();
        assert!(r.max_abs_err < 1e-10);
    }

    #[test]
    fn gradient_check_flags_wrong_gradient_and_nan() {
        let wrong = |p: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((p[0] * p[0], vec![p[0]])) };
        let r = check_gradient(wrong, &[1.0], 1e-5).unwrap();
        assert!(r.max_rel_err > 0.4);
        let nan = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
            Ok((if p[0] > 1.0 { f64::NAN } else { 0.0 }, vec![0.0]))
        };
        assert!(check_gradient(nan, &[1.0], 1e-5).is_err());
    }

    #[test]
    fn rng_determinism_and_restore() {
        let draws = |rng: &mut super::Rng| (0..100).map(|_| rng.gen::<u64>()).collect::<Vec<_>>();
        assert_eq!(draws(&mut seeded_rng(0)), draws(&mut seeded_rng(0)));
        assert_ne!(draws(&mut seeded_rng(0)), draws(&mut seeded_rng(1)));
        let mut rng = seeded_rng(42);
        draws(&mut rng);
        let mut saved = rng.clone();
        assert_eq!(draws(&mut rng), draws(&mut saved));
    }
}
