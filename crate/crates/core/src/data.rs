//! Adaptation datasets, synthetic domain-shift generators and the
//! delimited feature-file format.
//!
//! Feature files carry one sample per row: `f0,...,f{d-1},label,domain`.
//! Domains `0..N` are labelled sources and domain `N` is the target; a
//! target label of `-1` means no ground truth. Target ground truth is kept
//! in [`TargetTruth`], never inside [`AdaptationDataset`], so training code
//! cannot read it.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DMatrixView};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// K×n one-hot indicator matrix.
pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> DMatrix<T> {
    DMatrix::from_fn(classes, labels.len(), |r, c| if labels[c] == r { T::one() } else { T::zero() })
}

/// Column-wise argmax; ties go to the lowest row index.
pub fn argmax_columns<T: Scalar>(m: &DMatrix<T>) -> Vec<usize> {
    m.column_iter()
        .map(|col| {
            let mut best = 0;
            for (i, &v) in col.iter().enumerate() {
                if v > col[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Horizontal concatenation of equally tall matrices.
pub fn hstack<T: Scalar>(blocks: &[DMatrixView<'_, T>]) -> DMatrix<T> {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for b in blocks {
        out.columns_mut(at, b.ncols()).copy_from(b);
        at += b.ncols();
    }
    out
}

/// Labelled samples from one source domain.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDomain<T: Scalar> {
    pub features: DMatrix<T>,
    pub labels: Vec<usize>,
}

/// Ground-truth target labels, reachable only through evaluation code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetTruth {
    labels: Vec<usize>,
}

impl TargetTruth {
    pub fn new(labels: Vec<usize>) -> Self {
        Self { labels }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Fraction of `predicted` equal to the truth.
    pub fn accuracy(&self, predicted: &[usize]) -> f64 {
        if self.labels.is_empty() {
            return f64::NAN;
        }
        let hits = self.labels.iter().zip(predicted).filter(|(a, b)| a == b).count();
        hits as f64 / self.labels.len() as f64
    }
}

/// Labelled sources plus an unlabelled target.
///
/// Sources are stored concatenated in order; the pooled sample order used
/// by every dependence term is all source columns followed by the target.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationDataset<T: Scalar> {
    source_x: DMatrix<T>,
    source_labels: Vec<usize>,
    source_sizes: Vec<usize>,
    target_x: DMatrix<T>,
    classes: usize,
    pseudo_labels: Option<DMatrix<T>>,
}

impl<T: Scalar> AdaptationDataset<T> {
    pub fn new(sources: Vec<LabeledDomain<T>>, target: DMatrix<T>, classes: usize) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::Input("at least one source domain is required".into()));
        }
        if classes == 0 {
            return Err(Error::Input("at least one class is required".into()));
        }
        let d = target.nrows();
        if target.ncols() == 0 {
            return Err(Error::Input("target domain is empty".into()));
        }
        for (i, s) in sources.iter().enumerate() {
            if s.features.nrows() != d {
                return Err(Error::DimensionMismatch { expected: d, got: s.features.nrows() });
            }
            if s.features.ncols() != s.labels.len() {
                return Err(Error::Shape(format!("source {i}: {} columns but {} labels", s.features.ncols(), s.labels.len())));
            }
            if s.labels.is_empty() {
                return Err(Error::Input(format!("source {i} is empty")));
            }
            if let Some(&bad) = s.labels.iter().find(|&&l| l >= classes) {
                return Err(Error::Input(format!("source {i}: label {bad} outside [0, {classes})")));
            }
        }
        let views: Vec<_> = sources.iter().map(|s| s.features.as_view()).collect();
        let source_x = hstack(&views);
        let source_sizes = sources.iter().map(|s| s.labels.len()).collect();
        let source_labels = sources.into_iter().flat_map(|s| s.labels).collect();
        Ok(Self { source_x, source_labels, source_sizes, target_x: target, classes, pseudo_labels: None })
    }

    pub fn single_source(source: LabeledDomain<T>, target: DMatrix<T>, classes: usize) -> Result<Self> {
        Self::new(vec![source], target, classes)
    }

    pub fn num_sources(&self) -> usize {
        self.source_sizes.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.target_x.nrows()
    }

    pub fn n_source(&self) -> usize {
        self.source_labels.len()
    }

    pub fn n_target(&self) -> usize {
        self.target_x.ncols()
    }

    pub fn n_total(&self) -> usize {
        self.n_source() + self.n_target()
    }

    pub fn source_sizes(&self) -> &[usize] {
        &self.source_sizes
    }

    /// All source samples, concatenated in source order.
    pub fn source_features(&self) -> &DMatrix<T> {
        &self.source_x
    }

    pub fn source_labels(&self) -> &[usize] {
        &self.source_labels
    }

    pub fn target_features(&self) -> &DMatrix<T> {
        &self.target_x
    }

    /// Source `i` as an owned labelled domain.
    pub fn source(&self, i: usize) -> LabeledDomain<T> {
        let start: usize = self.source_sizes[..i].iter().sum();
        let len = self.source_sizes[i];
        LabeledDomain {
            features: self.source_x.columns(start, len).into_owned(),
            labels: self.source_labels[start..start + len].to_vec(),
        }
    }

    /// K×n_s one-hot matrix of source labels.
    pub fn source_label_matrix(&self) -> DMatrix<T> {
        one_hot(&self.source_labels, self.classes)
    }

    /// Sources followed by target, d×n.
    pub fn pooled_features(&self) -> DMatrix<T> {
        hstack(&[self.source_x.as_view(), self.target_x.as_view()])
    }

    /// Domain index of every pooled sample; the target is domain `N`.
    pub fn domain_indices(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_total());
        for (i, &len) in self.source_sizes.iter().enumerate() {
            out.extend(std::iter::repeat_n(i, len));
        }
        out.extend(std::iter::repeat_n(self.num_sources(), self.n_target()));
        out
    }

    /// (N+1)×n one-hot domain matrix Z.
    pub fn domain_matrix(&self) -> DMatrix<T> {
        one_hot(&self.domain_indices(), self.num_sources() + 1)
    }

    pub fn pseudo_labels(&self) -> Option<&DMatrix<T>> {
        self.pseudo_labels.as_ref()
    }

    pub fn set_pseudo_labels(&mut self, labels: DMatrix<T>) -> Result<()> {
        if labels.shape() != (self.classes, self.n_target()) {
            return Err(Error::Shape(format!(
                "pseudo-labels must be {}x{}, got {:?}",
                self.classes,
                self.n_target(),
                labels.shape()
            )));
        }
        self.pseudo_labels = Some(labels);
        Ok(())
    }

    pub fn clear_pseudo_labels(&mut self) {
        self.pseudo_labels = None;
    }

    /// K×n label matrix Y: source truth followed by target pseudo-labels.
    pub fn label_matrix(&self) -> Result<DMatrix<T>> {
        let pseudo = self
            .pseudo_labels
            .as_ref()
            .ok_or_else(|| Error::Precondition("target pseudo-labels have not been initialised".into()))?;
        let ys = self.source_label_matrix();
        Ok(hstack(&[ys.as_view(), pseudo.as_view()]))
    }
}

/// A dataset with its evaluation-only target truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario<T: Scalar> {
    pub dataset: AdaptationDataset<T>,
    pub truth: Option<TargetTruth>,
}

/// Every sample with its class and domain, for statistics that need target labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledSample<T: Scalar> {
    pub features: DMatrix<T>,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
    pub classes: usize,
    pub num_domains: usize,
}

impl<T: Scalar> PooledSample<T> {
    pub fn label_matrix(&self) -> DMatrix<T> {
        one_hot(&self.labels, self.classes)
    }

    pub fn domain_matrix(&self) -> DMatrix<T> {
        one_hot(&self.domains, self.num_domains)
    }

    /// Columns whose domain satisfies `keep`, with their labels.
    pub fn select_domains(&self, keep: impl Fn(usize) -> bool) -> (DMatrix<T>, Vec<usize>) {
        let idx: Vec<usize> = (0..self.domains.len()).filter(|&i| keep(self.domains[i])).collect();
        let x = self.features.select_columns(&idx);
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (x, labels)
    }
}

impl<T: Scalar> Scenario<T> {
    /// Pooled samples with target truth; `None` when the target is unlabelled.
    pub fn pooled(&self) -> Option<PooledSample<T>> {
        let truth = self.truth.as_ref()?;
        let ds = &self.dataset;
        let mut labels = ds.source_labels().to_vec();
        labels.extend_from_slice(truth.labels());
        Some(PooledSample {
            features: ds.pooled_features(),
            labels,
            domains: ds.domain_indices(),
            classes: ds.classes(),
            num_domains: ds.num_sources() + 1,
        })
    }
}

/// Synthetic scenario family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SyntheticKind {
    /// Gaussian class blobs with class means on a circle of radius `separation`;
    /// the target is translated by `shift` (its length sets the dimension).
    ShiftedBlobs { shift: Vec<f64>, separation: f64 },
    /// Two interleaved half-moons; the target is rotated by `angle` radians.
    RotatedMoons { angle: f64 },
    /// Domain shifts only the class prior (`dependent = false`), or additionally
    /// adds `offset` along the first axis per domain index (`dependent = true`).
    ConditionalChain { dependent: bool, offset: f64, separation: f64, dim: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub classes: usize,
    pub samples_per_class_per_domain: usize,
    pub noise_sd: f64,
    pub num_sources: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.samples_per_class_per_domain < 2 {
            return Err(Error::Config("samples_per_class_per_domain must be at least 2".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("at least 2 classes are required".into()));
        }
        if !(self.noise_sd > 0.0) {
            return Err(Error::Config(format!("noise_sd must be positive, got {}", self.noise_sd)));
        }
        if self.num_sources == 0 {
            return Err(Error::Config("num_sources must be at least 1".into()));
        }
        match &self.kind {
            SyntheticKind::ShiftedBlobs { shift, .. } if shift.is_empty() => {
                Err(Error::Config("shift vector must have at least one dimension".into()))
            }
            SyntheticKind::RotatedMoons { .. } if self.classes != 2 => {
                Err(Error::Config("rotated moons have exactly 2 classes".into()))
            }
            SyntheticKind::ConditionalChain { dim, .. } if *dim == 0 => Err(Error::Config("dim must be positive".into())),
            _ => Ok(()),
        }
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn class_mean(c: usize, classes: usize, dim: usize, separation: f64) -> Vec<f64> {
    let mut mu = vec![0.0; dim];
    if dim == 1 {
        mu[0] = separation * c as f64;
    } else {
        let theta = 2.0 * PI * c as f64 / classes as f64;
        mu[0] = separation * theta.cos();
        mu[1] = separation * theta.sin();
    }
    mu
}

/// Gaussian blobs; source `i` of `N` is offset by `(i/N)·shift`, the target by `shift`.
pub fn make_shifted_blobs<T: Scalar>(spec: &SyntheticSpec) -> Result<Scenario<T>> {
    spec.validate()?;
    let SyntheticKind::ShiftedBlobs { shift, separation } = &spec.kind else {
        return Err(Error::Config("make_shifted_blobs needs a ShiftedBlobs spec".into()));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = shift.len();
    let per = spec.samples_per_class_per_domain;
    let draw = |offset_scale: f64, rng: &mut ChaCha8Rng| {
        let n = per * spec.classes;
        let labels: Vec<usize> = (0..n).map(|i| i / per).collect();
        let means: Vec<Vec<f64>> = (0..spec.classes).map(|c| class_mean(c, spec.classes, dim, *separation)).collect();
        let mut x = DMatrix::<T>::zeros(dim, n);
        for (col, &c) in labels.iter().enumerate() {
            for r in 0..dim {
                x[(r, col)] = T::lit(means[c][r] + offset_scale * shift[r] + spec.noise_sd * gauss(rng));
            }
        }
        (x, labels)
    };
    let mut sources = Vec::with_capacity(spec.num_sources);
    for i in 0..spec.num_sources {
        let (features, labels) = draw(i as f64 / spec.num_sources as f64, &mut rng);
        sources.push(LabeledDomain { features, labels });
    }
    let (target, truth) = draw(1.0, &mut rng);
    Ok(Scenario { dataset: AdaptationDataset::new(sources, target, spec.classes)?, truth: Some(TargetTruth::new(truth)) })
}

/// Two moons; source `i` of `N` is rotated by `(i/N)·angle`, the target by `angle`.
pub fn make_rotated_moons<T: Scalar>(spec: &SyntheticSpec) -> Result<Scenario<T>> {
    spec.validate()?;
    let SyntheticKind::RotatedMoons { angle } = spec.kind else {
        return Err(Error::Config("make_rotated_moons needs a RotatedMoons spec".into()));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let per = spec.samples_per_class_per_domain;
    let draw = |rot: f64, rng: &mut ChaCha8Rng| {
        let (s, c) = rot.sin_cos();
        let n = 2 * per;
        let labels: Vec<usize> = (0..n).map(|i| i / per).collect();
        let mut x = DMatrix::<T>::zeros(2, n);
        for (col, &label) in labels.iter().enumerate() {
            let t = PI * rng.random::<f64>();
            let (mut px, mut py) = if label == 0 { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
            px += spec.noise_sd * gauss(rng) - 0.5;
            py += spec.noise_sd * gauss(rng) - 0.25;
            x[(0, col)] = T::lit(c * px - s * py);
            x[(1, col)] = T::lit(s * px + c * py);
        }
        (x, labels)
    };
    let mut sources = Vec::with_capacity(spec.num_sources);
    for i in 0..spec.num_sources {
        let (features, labels) = draw(angle * i as f64 / spec.num_sources as f64, &mut rng);
        sources.push(LabeledDomain { features, labels });
    }
    let (target, truth) = draw(angle, &mut rng);
    Ok(Scenario { dataset: AdaptationDataset::new(sources, target, 2)?, truth: Some(TargetTruth::new(truth)) })
}

/// Samples with known conditional-independence structure between X and Z given Y.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSample<T: Scalar> {
    pub x: DMatrix<T>,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
    pub classes: usize,
    pub num_domains: usize,
}

impl<T: Scalar> ChainSample<T> {
    pub fn y(&self) -> DMatrix<T> {
        one_hot(&self.labels, self.classes)
    }

    pub fn z(&self) -> DMatrix<T> {
        one_hot(&self.domains, self.num_domains)
    }

    /// Domains `0..N` become labelled sources, domain `N` the target.
    pub fn into_scenario(self) -> Result<Scenario<T>> {
        let last = self.num_domains - 1;
        let mut sources = Vec::with_capacity(last);
        for d in 0..last {
            let idx: Vec<usize> = (0..self.domains.len()).filter(|&i| self.domains[i] == d).collect();
            sources.push(LabeledDomain { features: self.x.select_columns(&idx), labels: idx.iter().map(|&i| self.labels[i]).collect() });
        }
        let idx: Vec<usize> = (0..self.domains.len()).filter(|&i| self.domains[i] == last).collect();
        let target = self.x.select_columns(&idx);
        let truth = idx.iter().map(|&i| self.labels[i]).collect();
        Ok(Scenario { dataset: AdaptationDataset::new(sources, target, self.classes)?, truth: Some(TargetTruth::new(truth)) })
    }
}

/// `Z → Y → X` chain over `N + 1` domains, `K · samples_per_class_per_domain` samples each.
///
/// Domain `z` triples the prior weight of class `z mod K`. Features are
/// `N(μ_y, σ²I)`; in dependent mode domain `z` adds `z · offset` on the first axis.
pub fn make_conditional_chain<T: Scalar>(spec: &SyntheticSpec) -> Result<ChainSample<T>> {
    spec.validate()?;
    let SyntheticKind::ConditionalChain { dependent, offset, separation, dim } = spec.kind else {
        return Err(Error::Config("make_conditional_chain needs a ConditionalChain spec".into()));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.classes;
    let num_domains = spec.num_sources + 1;
    let per_domain = k * spec.samples_per_class_per_domain;
    let n = num_domains * per_domain;
    let mut x = DMatrix::<T>::zeros(dim, n);
    let mut labels = Vec::with_capacity(n);
    let mut domains = Vec::with_capacity(n);
    for z in 0..num_domains {
        let favored = z % k;
        let total_weight = (k + 2) as f64;
        for _ in 0..per_domain {
            let u = rng.random::<f64>() * total_weight;
            // favoured class owns weight 3, the others weight 1
            let y = if u < 3.0 {
                favored
            } else {
                let other = ((u - 3.0).floor() as usize).min(k - 2);
                (0..k).filter(|&c| c != favored).nth(other).expect("k >= 2")
            };
            let mu = class_mean(y, k, dim, separation);
            let col = labels.len();
            for r in 0..dim {
                let shift = if dependent && r == 0 { offset * z as f64 } else { 0.0 };
                x[(r, col)] = T::lit(mu[r] + shift + spec.noise_sd * gauss(&mut rng));
            }
            labels.push(y);
            domains.push(z);
        }
    }
    Ok(ChainSample { x, labels, domains, classes: k, num_domains })
}

/// Dispatches on the spec's kind.
pub fn generate<T: Scalar>(spec: &SyntheticSpec) -> Result<Scenario<T>> {
    match spec.kind {
        SyntheticKind::ShiftedBlobs { .. } => make_shifted_blobs(spec),
        SyntheticKind::RotatedMoons { .. } => make_rotated_moons(spec),
        SyntheticKind::ConditionalChain { .. } => make_conditional_chain(spec)?.into_scenario(),
    }
}

/// Options for reading a feature file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureFileOptions {
    pub delimiter: u8,
    /// Number of classes; inferred as `max label + 1` when absent.
    pub classes: Option<usize>,
}

impl Default for FeatureFileOptions {
    fn default() -> Self {
        Self { delimiter: b',', classes: None }
    }
}

fn parse_err(row: usize, detail: impl Into<String>) -> Error {
    Error::Parse { row, detail: detail.into() }
}

/// Reads a feature file; rows may appear in any order.
pub fn load_features<T: Scalar>(path: impl AsRef<Path>, opts: FeatureFileOptions) -> Result<Scenario<T>> {
    let file = std::fs::File::open(path)?;
    read_features(file, opts)
}

pub fn read_features<T: Scalar, R: std::io::Read>(reader: R, opts: FeatureFileOptions) -> Result<Scenario<T>> {
    let mut rdr = csv::ReaderBuilder::new().delimiter(opts.delimiter).has_headers(true).flexible(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let find = |name: &str| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Input(format!("missing column `{name}`")))
    };
    let label_col = find("label")?;
    let domain_col = find("domain")?;
    let feature_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != label_col && c != domain_col).collect();
    if feature_cols.is_empty() {
        return Err(Error::Input("no feature columns".into()));
    }

    let mut rows: Vec<(Vec<T>, i64, usize)> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.len() != headers.len() {
            return Err(parse_err(line, format!("expected {} fields, found {}", headers.len(), rec.len())));
        }
        let mut feats = Vec::with_capacity(feature_cols.len());
        for &c in &feature_cols {
            let v: T = rec[c].trim().parse().map_err(|_| parse_err(line, format!("bad number `{}`", &rec[c])))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite feature `{}`", &rec[c])));
            }
            feats.push(v);
        }
        let label: i64 = rec[label_col].trim().parse().map_err(|_| parse_err(line, format!("bad label `{}`", &rec[label_col])))?;
        let domain: usize =
            rec[domain_col].trim().parse().map_err(|_| parse_err(line, format!("bad domain `{}`", &rec[domain_col])))?;
        if label < -1 {
            return Err(parse_err(line, format!("unknown label {label}")));
        }
        rows.push((feats, label, domain));
    }
    if rows.is_empty() {
        return Err(Error::Input("feature file has no rows".into()));
    }

    let target_domain = rows.iter().map(|r| r.2).max().expect("non-empty");
    if target_domain == 0 {
        return Err(Error::Input("need at least one source domain and a target domain".into()));
    }
    let inferred = rows.iter().map(|r| r.1).max().unwrap_or(-1);
    let classes = match opts.classes {
        Some(k) => k,
        None if inferred >= 0 => (inferred + 1) as usize,
        None => return Err(Error::Input("no labelled rows".into())),
    };
    for (i, r) in rows.iter().enumerate() {
        if r.1 >= classes as i64 {
            return Err(parse_err(i + 2, format!("unknown label {} (classes = {classes})", r.1)));
        }
        if r.1 < 0 && r.2 != target_domain {
            return Err(parse_err(i + 2, format!("source row in domain {} has no label", r.2)));
        }
    }

    let d = feature_cols.len();
    let collect = |dom: usize| -> (DMatrix<T>, Vec<i64>) {
        let sel: Vec<&(Vec<T>, i64, usize)> = rows.iter().filter(|r| r.2 == dom).collect();
        let x = DMatrix::from_fn(d, sel.len(), |r, c| sel[c].0[r]);
        (x, sel.iter().map(|r| r.1).collect())
    };
    let mut sources = Vec::with_capacity(target_domain);
    for dom in 0..target_domain {
        let (x, labels) = collect(dom);
        if labels.is_empty() {
            return Err(Error::Input(format!("domain {dom} has no rows")));
        }
        sources.push(LabeledDomain { features: x, labels: labels.into_iter().map(|l| l as usize).collect() });
    }
    let (target, target_labels) = collect(target_domain);
    let truth = if target_labels.iter().all(|&l| l >= 0) {
        Some(TargetTruth::new(target_labels.into_iter().map(|l| l as usize).collect()))
    } else if target_labels.iter().all(|&l| l < 0) {
        None
    } else {
        return Err(Error::Input("target rows mix labelled and unlabelled (-1) entries".into()));
    };
    Ok(Scenario { dataset: AdaptationDataset::new(sources, target, classes)?, truth })
}

/// Writes sources then target with full-precision (round-trip) decimal floats.
pub fn write_features<T: Scalar, W: std::io::Write>(scenario: &Scenario<T>, writer: W, delimiter: u8) -> Result<()> {
    let ds = &scenario.dataset;
    let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(writer);
    let to_io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut header: Vec<String> = (0..ds.dim()).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    header.push("domain".into());
    w.write_record(&header).map_err(to_io)?;
    let domains = ds.domain_indices();
    let x = ds.pooled_features();
    let ns = ds.n_source();
    for col in 0..ds.n_total() {
        let mut rec: Vec<String> = x.column(col).iter().map(|v| v.to_string()).collect();
        let label = if col < ns {
            ds.source_labels()[col] as i64
        } else {
            scenario.truth.as_ref().map_or(-1, |t| t.labels()[col - ns] as i64)
        };
        rec.push(label.to_string());
        rec.push(domains[col].to_string());
        w.write_record(&rec).map_err(to_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_features<T: Scalar>(scenario: &Scenario<T>, path: impl AsRef<Path>, delimiter: u8) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_features(scenario, std::io::BufWriter::new(file), delimiter)
}
