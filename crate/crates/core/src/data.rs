//! Long-tailed labeled/unlabeled datasets, vector augmentations and batching.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{seeded_rng, Matrix, ProbVector, Rng};

/// Per-class counts decaying geometrically from `n1` to `n1 / gamma`.
///
/// `counts[c] = round(n1 · gamma^(-c/(C-1)))`, floored at 1.
pub fn longtail_counts(n1: usize, gamma: f64, num_classes: usize) -> Result<Vec<usize>> {
    if n1 == 0 || num_classes < 2 || !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::invalid(format!(
            "longtail_counts needs n1 >= 1, C >= 2, gamma > 0 (got {n1}, {num_classes}, {gamma})"
        )));
    }
    let last = (num_classes - 1) as f64;
    Ok((0..num_classes)
        .map(|c| {
            let n = n1 as f64 * gamma.powf(-(c as f64) / last);
            (n.round() as usize).max(1)
        })
        .collect())
}

/// Label distribution of the unlabeled pool relative to the labeled one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnlabeledRegime {
    /// Long-tailed with its own ratio (equal to `gamma_l` for the consistent setting).
    LongTail(f64),
    Uniform,
    /// Long tail with ratio `gamma`, head on the last class.
    Reversed(f64),
}

impl UnlabeledRegime {
    pub fn name(&self) -> &'static str {
        match self {
            UnlabeledRegime::LongTail(_) => "longtail",
            UnlabeledRegime::Uniform => "uniform",
            UnlabeledRegime::Reversed(_) => "reversed",
        }
    }
}

impl fmt::Display for UnlabeledRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UnlabeledRegime::LongTail(g) => write!(f, "{g}"),
            UnlabeledRegime::Uniform => write!(f, "uniform"),
            UnlabeledRegime::Reversed(g) => write!(f, "reversed:{g}"),
        }
    }
}

impl FromStr for UnlabeledRegime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let positive = |v: &str| -> Result<f64> {
            let g: f64 = v
                .parse()
                .map_err(|_| Error::Config(format!("gamma_u: cannot parse {v:?} as a number")))?;
            if g > 0.0 && g.is_finite() {
                Ok(g)
            } else {
                Err(Error::Config(format!("gamma_u must be > 0, got {g}")))
            }
        };
        if s == "uniform" {
            Ok(UnlabeledRegime::Uniform)
        } else if let Some(rest) = s.strip_prefix("reversed:") {
            Ok(UnlabeledRegime::Reversed(positive(rest)?))
        } else {
            Ok(UnlabeledRegime::LongTail(positive(s)?))
        }
    }
}

impl Serialize for UnlabeledRegime {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            UnlabeledRegime::LongTail(g) => s.serialize_f64(*g),
            other => s.serialize_str(&other.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for UnlabeledRegime {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(g) => UnlabeledRegime::from_str(&g.to_string()),
            Raw::Text(t) => UnlabeledRegime::from_str(&t),
        }
        .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Size of the largest labeled class.
    pub n1: usize,
    /// Size of the largest unlabeled class.
    pub m1: usize,
    pub gamma_l: f64,
    pub gamma_u: UnlabeledRegime,
    pub class_separation: f64,
    pub noise_scale: f64,
    /// Samples per class in the balanced test set.
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            feature_dim: 8,
            n1: 100,
            m1: 600,
            gamma_l: 100.0,
            gamma_u: UnlabeledRegime::LongTail(100.0),
            class_separation: 2.0,
            noise_scale: 1.0,
            test_per_class: 100,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad(format!("data.num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.feature_dim == 0 {
            return bad("data.feature_dim must be >= 1".into());
        }
        if self.n1 == 0 || self.m1 == 0 {
            return bad("data.n1 and data.m1 must be >= 1".into());
        }
        if !(self.gamma_l > 0.0) || !self.gamma_l.is_finite() {
            return bad(format!("data.gamma_l must be > 0, got {}", self.gamma_l));
        }
        if !(self.noise_scale >= 0.0) || !(self.class_separation >= 0.0) {
            return bad("data.noise_scale and data.class_separation must be >= 0".into());
        }
        if self.test_per_class == 0 {
            return bad("data.test_per_class must be >= 1".into());
        }
        Ok(())
    }

    pub fn labeled_counts(&self) -> Result<Vec<usize>> {
        longtail_counts(self.n1, self.gamma_l, self.num_classes)
    }

    pub fn unlabeled_counts(&self) -> Result<Vec<usize>> {
        match self.gamma_u {
            UnlabeledRegime::LongTail(g) => longtail_counts(self.m1, g, self.num_classes),
            UnlabeledRegime::Uniform => Ok(vec![self.m1; self.num_classes]),
            UnlabeledRegime::Reversed(g) => {
                let mut c = longtail_counts(self.m1, g, self.num_classes)?;
                c.reverse();
                Ok(c)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        class_counts(&self.labels, self.num_classes)
    }

    pub fn prior(&self) -> Result<ProbVector> {
        ProbVector::from_counts(&self.class_counts())
    }
}

/// Unlabeled pool. Ground-truth labels, when known, are kept for evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSet {
    pub features: Matrix,
    hidden_labels: Option<Vec<usize>>,
    pub num_classes: usize,
}

impl UnlabeledSet {
    pub fn new(features: Matrix, hidden_labels: Option<Vec<usize>>, num_classes: usize) -> Self {
        Self {
            features,
            hidden_labels,
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Ground truth for evaluation; never used by training.
    pub fn hidden_labels(&self) -> Option<&[usize]> {
        self.hidden_labels.as_deref()
    }

    pub fn true_prior(&self) -> Option<ProbVector> {
        let labels = self.hidden_labels()?;
        ProbVector::from_counts(&class_counts(labels, self.num_classes)).ok()
    }
}

pub fn class_counts(labels: &[usize], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for &y in labels {
        counts[y] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub labeled: LabeledSet,
    pub unlabeled: UnlabeledSet,
    pub test: LabeledSet,
}

/// Unit directions equally spaced along the trigonometric moment curve:
/// `(cos θ, sin θ, cos 2θ, sin 2θ, …)` at `θ = 2πc/C`, so the Gram matrix is
/// circulant. In two dimensions this is the regular polygon; in one
/// dimension the classes sit at evenly spaced points of `[-1, 1]`.
pub fn class_directions(num_classes: usize, dim: usize) -> Matrix {
    let harmonics = (dim / 2).max(1);
    let mut m = Matrix::zeros(num_classes, dim);
    for c in 0..num_classes {
        let theta = std::f64::consts::TAU * c as f64 / num_classes as f64;
        if dim == 1 {
            m[(c, 0)] = 2.0 * c as f64 / (num_classes - 1).max(1) as f64 - 1.0;
            continue;
        }
        for h in 0..harmonics {
            let a = (h + 1) as f64 * theta;
            m[(c, 2 * h)] = a.cos();
            m[(c, 2 * h + 1)] = a.sin();
        }
        let norm = m.row(c).iter().map(|v| v * v).sum::<f64>().sqrt();
        m.row_mut(c).iter_mut().for_each(|v| *v /= norm);
    }
    m
}

fn sample_blobs(
    counts: &[usize],
    means: &Matrix,
    noise: f64,
    rng: &mut Rng,
) -> (Matrix, Vec<usize>) {
    let dim = means.cols();
    let total: usize = counts.iter().sum();
    let mut data = Vec::with_capacity(total * dim);
    let mut labels = Vec::with_capacity(total);
    for (c, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            for j in 0..dim {
                let z: f64 = StandardNormal.sample(rng);
                data.push(means[(c, j)] + noise * z);
            }
            labels.push(c);
        }
    }
    (Matrix::new(total, dim, data).expect("sizes agree"), labels)
}

/// Gaussian blobs around `class_separation`-scaled [`class_directions`].
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let c = spec.num_classes;
    let means = class_directions(c, spec.feature_dim).scale(spec.class_separation);
    let mut rng = seeded_rng(spec.seed);
    let (lx, ly) = sample_blobs(&spec.labeled_counts()?, &means, spec.noise_scale, &mut rng);
    let (ux, uy) = sample_blobs(&spec.unlabeled_counts()?, &means, spec.noise_scale, &mut rng);
    let (tx, ty) = sample_blobs(&vec![spec.test_per_class; c], &means, spec.noise_scale, &mut rng);
    Ok(Dataset {
        labeled: LabeledSet {
            features: lx,
            labels: ly,
            num_classes: c,
        },
        unlabeled: UnlabeledSet::new(ux, Some(uy), c),
        test: LabeledSet {
            features: tx,
            labels: ty,
            num_classes: c,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentKind {
    Weak,
    Strong,
}

pub const WEAK_NOISE: f64 = 0.05;
pub const STRONG_NOISE: f64 = 0.25;
pub const STRONG_DROPOUT: f64 = 0.1;

/// Weak: additive noise of std `0.05·noise_scale`. Strong: std
/// `0.25·noise_scale` noise, then each coordinate zeroed with probability 0.1.
pub fn augment(batch: &Matrix, kind: AugmentKind, noise_scale: f64, rng: &mut Rng) -> Matrix {
    let mut out = batch.clone();
    let std = match kind {
        AugmentKind::Weak => WEAK_NOISE,
        AugmentKind::Strong => STRONG_NOISE,
    } * noise_scale;
    for v in out.as_mut_slice() {
        let z: f64 = StandardNormal.sample(rng);
        *v += std * z;
        if kind == AugmentKind::Strong && rng.gen::<f64>() < STRONG_DROPOUT {
            *v = 0.0;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct AugmentedViews {
    pub weak: Matrix,
    pub strong: Matrix,
    pub indices: Vec<usize>,
}

/// Draws both batches uniformly with replacement; the labeled batch gets a
/// weak view, the unlabeled batch a weak and a strong view.
pub fn sample_batches(
    labeled: &LabeledSet,
    unlabeled: &UnlabeledSet,
    labeled_batch: usize,
    unlabeled_batch: usize,
    noise_scale: f64,
    rng: &mut Rng,
) -> Result<(LabeledBatch, AugmentedViews)> {
    if labeled.is_empty() || unlabeled.is_empty() {
        return Err(Error::invalid("cannot sample from an empty pool"));
    }
    let li: Vec<usize> = (0..labeled_batch).map(|_| rng.gen_range(0..labeled.len())).collect();
    let ui: Vec<usize> = (0..unlabeled_batch)
        .map(|_| rng.gen_range(0..unlabeled.len()))
        .collect();
    let lx = labeled.features.select_rows(&li);
    let ux = unlabeled.features.select_rows(&ui);
    let weak_l = augment(&lx, AugmentKind::Weak, noise_scale, rng);
    let weak_u = augment(&ux, AugmentKind::Weak, noise_scale, rng);
    let strong_u = augment(&ux, AugmentKind::Strong, noise_scale, rng);
    Ok((
        LabeledBatch {
            features: weak_l,
            labels: li.iter().map(|&i| labeled.labels[i]).collect(),
            indices: li,
        },
        AugmentedViews {
            weak: weak_u,
            strong: strong_u,
            indices: ui,
        },
    ))
}

/// Per-column standardisation statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const VARIANCE_FLOOR: f64 = 1e-12;

impl Standardization {
    pub fn fit(features: &Matrix) -> Self {
        let n = features.rows().max(1) as f64;
        let mean: Vec<f64> = features.col_sums().into_iter().map(|s| s / n).collect();
        let mut var = vec![0.0; features.cols()];
        for r in features.row_iter() {
            for (j, v) in r.iter().enumerate() {
                var[j] += (v - mean[j]).powi(2);
            }
        }
        let std = var.into_iter().map(|v| (v / n).max(VARIANCE_FLOOR).sqrt()).collect();
        Self { mean, std }
    }

    pub fn apply(&self, features: &Matrix) -> Matrix {
        Matrix::from_fn(features.rows(), features.cols(), |i, j| {
            (features[(i, j)] - self.mean[j]) / self.std[j]
        })
    }
}

#[derive(Debug, Clone)]
pub struct CsvDataset {
    pub labeled: LabeledSet,
    pub unlabeled: UnlabeledSet,
    pub class_names: Vec<String>,
    pub standardization: Standardization,
}

type CsvRows = Vec<(Vec<f64>, Option<String>)>;

/// Feature vectors and optional label text of every data row.
fn read_csv_rows(path: &Path, label_column: &str) -> Result<CsvRows> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_open_error(path, e))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Csv {
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| Error::invalid(format!("label column {label_column:?} not in header")))?;
    let dim = headers.len() - 1;

    let mut rows: Vec<(Vec<f64>, Option<String>)> = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let row = k + 1;
        let record = record.map_err(|e| Error::Csv {
            row,
            message: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(Error::Csv {
                row,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let mut feats = Vec::with_capacity(dim);
        let mut label = None;
        for (j, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if j == label_idx {
                if !cell.is_empty() {
                    label = Some(cell.to_string());
                }
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Csv {
                row,
                message: format!("non-numeric feature {:?} in column {:?}", cell, &headers[j]),
            })?;
            if !v.is_finite() {
                return Err(Error::Csv {
                    row,
                    message: format!("non-finite feature in column {:?}", &headers[j]),
                });
            }
            feats.push(v);
        }
        rows.push((feats, label));
    }
    if rows.is_empty() {
        return Err(Error::invalid(format!("{}: no data rows", path.display())));
    }
    Ok(rows)
}

/// Reads a headed CSV; rows whose label cell is empty join the unlabeled pool.
///
/// Labels are mapped to class indices in sorted order of their text.
/// Features are standardised with statistics over all rows.
pub fn load_csv_dataset(path: &Path, label_column: &str) -> Result<CsvDataset> {
    let rows = read_csv_rows(path, label_column)?;

    let mut class_names: Vec<String> = rows.iter().filter_map(|(_, l)| l.clone()).collect();
    class_names.sort();
    class_names.dedup();
    let all = Matrix::from_rows(&rows.iter().map(|(f, _)| f.as_slice()).collect::<Vec<_>>())?;
    let standardization = Standardization::fit(&all);
    let all = standardization.apply(&all);

    let (mut li, mut ly, mut ui) = (Vec::new(), Vec::new(), Vec::new());
    for (i, (_, label)) in rows.iter().enumerate() {
        match label {
            Some(l) => {
                li.push(i);
                ly.push(class_names.binary_search(l).expect("collected above"));
            }
            None => ui.push(i),
        }
    }
    let num_classes = class_names.len();
    Ok(CsvDataset {
        labeled: LabeledSet {
            features: all.select_rows(&li),
            labels: ly,
            num_classes,
        },
        unlabeled: UnlabeledSet::new(all.select_rows(&ui), None, num_classes),
        class_names,
        standardization,
    })
}

/// Reads a fully labeled evaluation CSV with the class names and
/// standardisation of `train`.
pub fn load_csv_test(path: &Path, label_column: &str, train: &CsvDataset) -> Result<LabeledSet> {
    let rows = read_csv_rows(path, label_column)?;
    let dim = train.standardization.mean.len();
    let mut labels = Vec::with_capacity(rows.len());
    for (k, (feats, label)) in rows.iter().enumerate() {
        let row = k + 1;
        if feats.len() != dim {
            return Err(Error::Csv {
                row,
                message: format!("{} features, training data has {dim}", feats.len()),
            });
        }
        let label = label.as_ref().ok_or_else(|| Error::Csv {
            row,
            message: "missing label".into(),
        })?;
        let y = train.class_names.binary_search(label).map_err(|_| Error::Csv {
            row,
            message: format!("class {label:?} does not occur in the training file"),
        })?;
        labels.push(y);
    }
    let features = Matrix::from_rows(&rows.iter().map(|(f, _)| f.as_slice()).collect::<Vec<_>>())?;
    Ok(LabeledSet {
        features: train.standardization.apply(&features),
        labels,
        num_classes: train.class_names.len(),
    })
}

fn csv_open_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::invalid(format!("{}: {other:?}", path.display())),
    }
}

#[derive(Debug, Serialize)]
struct SnapshotMeta<'a> {
    spec: &'a DatasetSpec,
    labeled_counts: Vec<usize>,
    unlabeled_counts: Vec<usize>,
    test_per_class: usize,
}

/// Writes `<dir>/train.csv` (empty label for unlabeled rows), `<dir>/test.csv`
/// and `<dir>/meta.toml`.
pub fn export_snapshot(dataset: &Dataset, spec: &DatasetSpec, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header: Vec<String> = (0..spec.feature_dim)
        .map(|j| format!("x{j}"))
        .chain(std::iter::once("label".to_string()))
        .collect();
    let write = |name: &str, rows: Vec<(&[f64], Option<usize>)>| -> Result<()> {
        let path = dir.join(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_open_error(&path, e))?;
        let wrap = |e: csv::Error| Error::invalid(format!("{}: {e}", path.display()));
        w.write_record(&header).map_err(wrap)?;
        for (feats, label) in rows {
            let mut rec: Vec<String> = feats.iter().map(|v| format!("{v}")).collect();
            rec.push(label.map(|l| l.to_string()).unwrap_or_default());
            w.write_record(&rec).map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    };
    let train = dataset
        .labeled
        .features
        .row_iter()
        .zip(&dataset.labeled.labels)
        .map(|(r, &y)| (r, Some(y)))
        .chain(dataset.unlabeled.features.row_iter().map(|r| (r, None)))
        .collect();
    write("train.csv", train)?;
    let test = dataset
        .test
        .features
        .row_iter()
        .zip(&dataset.test.labels)
        .map(|(r, &y)| (r, Some(y)))
        .collect();
    write("test.csv", test)?;

    let meta = SnapshotMeta {
        spec,
        labeled_counts: dataset.labeled.class_counts(),
        unlabeled_counts: class_counts(
            dataset.unlabeled.hidden_labels().unwrap_or(&[]),
            spec.num_classes,
        ),
        test_per_class: spec.test_per_class,
    };
    let text = toml::to_string(&meta).map_err(|e| Error::invalid(e.to_string()))?;
    let path = dir.join("meta.toml");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
