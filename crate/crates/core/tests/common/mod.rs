//! Oracle checks shared by the per-topic test files and the acceptance
//! report. Each check returns a verdict plus a one-line measurement.

#![allow(dead_code)]

use ccl_core::ccl::{
    fuse_branches, labeled_kernel_posteriors, pi_star, post_adjusted, propagate_matrix, reliable_contrastive_loss,
    similarity_graph, PriorEstimate,
};
use ccl_core::data::longtail_counts;
use ccl_core::framework::{class_balanced_ce_rows, kernel_posteriors, scl_loss_rows, BatchPartition, KernelConfig};
use ccl_core::numerics::autodiff::Tape;
use ccl_core::numerics::{is_distribution, seeded_rng, Rng};
use ccl_core::{Matrix, ProbVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }

    pub fn assert(&self) {
        assert!(self.pass, "{}", self.detail);
    }
}

pub fn unit_rows(rng: &mut Rng, n: usize, d: usize) -> Matrix {
    let mut m = Matrix::from_fn(n, d, |_, _| StandardNormal.sample(rng));
    for i in 0..n {
        let norm = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        m.row_mut(i).iter_mut().for_each(|v| *v /= norm);
    }
    m
}

pub fn random_prob(rng: &mut Rng, c: usize) -> ProbVector {
    ProbVector::normalized((0..c).map(|_| rng.gen_range(0.05..1.0)).collect()).unwrap()
}

pub fn stochastic_rows(rng: &mut Rng, n: usize, c: usize) -> Matrix {
    let mut m = Matrix::zeros(n, c);
    for i in 0..n {
        m.row_mut(i).copy_from_slice(random_prob(rng, c).as_slice());
    }
    m
}

/// Truncated Neumann series `(1 − β) Σ_{k<terms} βᵏ Gᵏ P`.
pub fn neumann_propagation(g: &Matrix, p: &Matrix, beta: f64, terms: usize) -> Matrix {
    let mut term = p.clone();
    let mut acc = p.clone();
    for _ in 1..terms {
        term = g.matmul(&term).unwrap().scale(beta);
        acc = Matrix::from_fn(acc.rows(), acc.cols(), |i, j| acc[(i, j)] + term[(i, j)]);
    }
    acc.scale(1.0 - beta)
}

pub fn propagation_vs_neumann() -> Verdict {
    let (batches, bu, c, d) = (20, 16, 5, 6);
    let kernel = KernelConfig::default();
    let mut worst: f64 = 0.0;
    for beta in [0.1, 0.2, 0.5] {
        for b in 0..batches {
            let mut rng = seeded_rng(1000 + b as u64);
            let z = unit_rows(&mut rng, bu, d);
            let p = stochastic_rows(&mut rng, bu, c);
            let tape = Tape::new();
            let g = (*similarity_graph(tape.constant(z.clone()), kernel).unwrap().value()).clone();
            let direct = propagate_matrix(&p, &z, beta, kernel).unwrap();
            let series = neumann_propagation(&g, &p, beta, 200);
            worst = worst.max(direct.sub(&series).unwrap().max_abs());
        }
    }
    Verdict::new(worst < 1e-8, format!("max |direct − neumann| = {worst:.3e} (tol 1e-8, 3 betas × 20 batches)"))
}

/// Direct double-sum evaluation of the reliable contrastive loss.
pub fn brute_force_rpl(z: &Matrix, soft: &Matrix, pi_u: &ProbVector, t: f64, protos: Option<&Matrix>) -> f64 {
    let (n, c) = soft.shape();
    let kappa = |a: &[f64], b: &[f64]| (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / t).exp();
    let mut total = 0.0;
    for i in 0..n {
        let mut e = vec![0.0; c];
        for (k, ek) in e.iter_mut().enumerate() {
            let mut num = 0.0;
            let mut den = 0.0;
            for j in 0..n {
                if j != i {
                    num += kappa(z.row(i), z.row(j)) * soft[(j, k)];
                    den += soft[(j, k)];
                }
            }
            *ek = if den > 1e-12 { num / den } else { kappa(z.row(i), protos.unwrap().row(k)) };
        }
        let norm: f64 = (0..c).map(|k| e[k] * pi_u[k]).sum();
        for k in 0..c {
            let post = e[k] * pi_u[k] / norm;
            total -= soft[(i, k)] * post.max(1e-12).ln();
        }
    }
    total / n as f64
}

pub fn rpl_vs_brute_force() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut with_protos = 0;
    for inst in 0..50u64 {
        let mut rng = seeded_rng(2000 + inst);
        let n = rng.gen_range(2..=6);
        let c = rng.gen_range(2..=4);
        let d = rng.gen_range(2..=5);
        let t = rng.gen_range(0.3..2.0);
        let z = unit_rows(&mut rng, n, d);
        let mut soft = stochastic_rows(&mut rng, n, c);
        // a random subset of rows becomes one-hot, like labeled members
        for i in 0..n {
            if rng.gen_bool(0.5) {
                let k = rng.gen_range(0..c);
                soft.row_mut(i).iter_mut().enumerate().for_each(|(j, v)| *v = f64::from(j == k));
            }
        }
        let pi_u = random_prob(&mut rng, c);
        let protos = unit_rows(&mut rng, c, d);
        let kernel = KernelConfig::new(t).unwrap();
        let tape = Tape::new();
        let loss = reliable_contrastive_loss(
            tape.constant(z.clone()),
            &soft,
            &pi_u,
            kernel,
            Some(tape.constant(protos.clone())),
        )
        .unwrap()
        .scalar();
        let oracle = brute_force_rpl(&z, &soft, &pi_u, t, Some(&protos));
        let needs_protos = (0..n).any(|i| (0..c).any(|k| (0..n).filter(|&j| j != i).map(|j| soft[(j, k)]).sum::<f64>() <= 1e-12));
        with_protos += usize::from(needs_protos);
        worst = worst.max((loss - oracle).abs());
    }
    Verdict::new(
        worst < 1e-10,
        format!("max |loss − double sum| = {worst:.3e} over 50 instances ({with_protos} use prototype fallback; tol 1e-10)"),
    )
}

/// Class-balanced posterior CE against the in-form loss on 4×4 batches.
///
/// With `n` members per class the class-balanced row equals
/// `L_in − log(n / (n − 1))`: the positive average has `n − 1` terms while
/// every denominator class average has `n`.
pub fn balanced_identity() -> Verdict {
    let (classes, per) = (4, 4);
    let offset = (per as f64 / (per as f64 - 1.0)).ln();
    let labels: Vec<usize> = (0..classes * per).map(|i| i / per).collect();
    let partition = BatchPartition::new(labels, classes).unwrap();
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = seeded_rng(3000 + seed);
        let t = rng.gen_range(0.2..1.5);
        let z = unit_rows(&mut rng, classes * per, 6);
        let kernel = KernelConfig::new(t).unwrap();
        let tape = Tape::new();
        let zv = tape.constant(z);
        let cb = class_balanced_ce_rows(zv, &partition, kernel).unwrap().value();
        let (l_in, _) = scl_loss_rows(zv, &partition, kernel).unwrap();
        let l_in = l_in.value();
        for i in 0..classes * per {
            worst = worst.max((cb[(i, 0)] + offset - l_in[(i, 0)]).abs());
        }
    }
    Verdict::new(worst < 1e-10, format!("max |CB-CE + log(4/3) − L_in| = {worst:.3e} over 20 seeds (tol 1e-10)"))
}

/// `−log mean ≤ −mean log` over positives, i.e. `L_in + log(|B_y|−1) ≤ L_out`.
pub fn jensen_batches() -> Verdict {
    let mut violations = 0;
    let mut rows = 0;
    for b in 0..100u64 {
        let mut rng = seeded_rng(4000 + b);
        let c = rng.gen_range(2..=4);
        let mut labels: Vec<usize> = (0..c).flat_map(|k| [k, k]).collect();
        for _ in 0..rng.gen_range(0..8) {
            labels.push(rng.gen_range(0..c));
        }
        let partition = BatchPartition::new(labels.clone(), c).unwrap();
        let counts = partition.counts();
        let z = unit_rows(&mut rng, labels.len(), 4).scale(rng.gen_range(0.5..3.0));
        let tape = Tape::new();
        let (l_in, l_out) = scl_loss_rows(tape.constant(z), &partition, KernelConfig::default()).unwrap();
        let (l_in, l_out) = (l_in.value(), l_out.value());
        for (i, &y) in labels.iter().enumerate() {
            rows += 1;
            if l_in[(i, 0)] + ((counts[y] - 1) as f64).ln() > l_out[(i, 0)] + 1e-12 {
                violations += 1;
            }
        }
    }
    Verdict::new(violations == 0, format!("{violations} Jensen violations over 100 batches ({rows} anchors)"))
}

/// Random posteriors of every kind plus prior updates; returns the number
/// of outputs that are not probability vectors within `tol`.
pub fn distribution_invariants(cases: u64, tol: f64) -> Verdict {
    let mut bad = Vec::new();
    let mut graph_dev: f64 = 0.0;
    for case in 0..cases {
        let mut rng = seeded_rng(5000 + case);
        let c = rng.gen_range(2..=6);
        let n = rng.gen_range(2..=10);
        let d = rng.gen_range(2..=6);
        let kernel = KernelConfig::new(rng.gen_range(0.1..2.0)).unwrap();
        let scale = rng.gen_range(0.5..4.0);
        let z = unit_rows(&mut rng, n, d).scale(scale);
        let protos = unit_rows(&mut rng, c, d);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let partition = BatchPartition::new(labels, c).unwrap();
        let pi_u = random_prob(&mut rng, c);
        let pi_l = random_prob(&mut rng, c);
        let tape = Tape::new();
        let (zv, pv) = (tape.constant(z.clone()), tape.constant(protos));
        let mut check = |what: &str, m: &Matrix| {
            if let Some(i) = (0..m.rows()).find(|&i| !is_distribution(m.row(i), tol)) {
                bad.push(format!("case {case}: {what} row {i} = {:?}", m.row(i)));
            }
        };
        check("kernel", &kernel_posteriors(zv, &partition, Some(pv), kernel, rng.gen_bool(0.5)).unwrap().value());
        check("labeled kernel", &labeled_kernel_posteriors(zv, zv, &partition, &pi_u, kernel, Some(pv)).unwrap().value());

        let mut normal = |_, _| -> f64 { 5.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) };
        let logits_b = Matrix::from_fn(n, c, &mut normal);
        let logits_s = Matrix::from_fn(n, c, &mut normal);
        let star = pi_star(&pi_l, &pi_u).unwrap();
        check("pi_star", &star.as_row());
        let post_b = post_adjusted(&logits_b, &pi_u, 1.0).unwrap();
        let post_s = ccl_core::numerics::softmax_rows(&logits_s).unwrap();
        check("fused", &fuse_branches(&post_b, &post_s, &star).unwrap().rows);

        let beta = rng.gen_range(0.0..0.95);
        let p_l = stochastic_rows(&mut rng, n, c);
        check("propagated", &propagate_matrix(&p_l, &z, beta, kernel).unwrap());
        let g = similarity_graph(zv, kernel).unwrap().value();
        for s in g.row_sums() {
            graph_dev = graph_dev.max((s - 1.0).abs());
        }
        if g.as_slice().iter().any(|&v| v < 0.0) {
            graph_dev = f64::INFINITY;
        }

        let mut prior = PriorEstimate::uniform(c, rng.gen_range(0.01..1.0));
        for _ in 0..rng.gen_range(1..20) {
            let m = rng.gen_range(0..6);
            prior.update(&stochastic_rows(&mut rng, m, c)).unwrap();
        }
        check("pi_u after updates", &prior.pi.as_row());
    }
    let graph_ok = graph_dev <= tol;
    let detail = match bad.first() {
        Some(first) => format!("{} invalid outputs, first: {first}", bad.len()),
        None => format!("{cases} cases valid; max |G row sum − 1| = {graph_dev:.2e} (tol {tol:e})"),
    };
    Verdict::new(bad.is_empty() && graph_ok, detail)
}

pub fn longtail_endpoints() -> Verdict {
    let mut notes = Vec::new();
    let mut pass = true;
    for (n1, gamma, c) in [(500usize, 100.0f64, 10usize), (50, 10.0, 100), (150, 20.0, 100)] {
        let counts = longtail_counts(n1, gamma, c).unwrap();
        let tail = (n1 as f64 / gamma).round() as usize;
        pass &= counts.len() == c && counts[0] == n1 && counts[c - 1] == tail;
        notes.push(format!("({n1},{gamma},{c}) → [{}..{}] want [{n1}..{tail}]", counts[0], counts[c - 1]));
    }
    Verdict::new(pass, notes.join("; "))
}
