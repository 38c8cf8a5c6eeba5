//! Feature transform `g` (dense → ReLU → dense), softmax classifier `C`,
//! and the three loss terms combined into the adaptation objective.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{hstack, AdaptationDataset};
use crate::dependence::StatBandwidths;
use crate::error::{Error, Result};
use crate::gradients::TraceObjective;
use crate::linalg::all_finite;
use crate::scalar::Scalar;

const LOG_CLAMP: f64 = 1e-12;

/// Fully connected layer `W x + b`, with `W` stored out×in.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T: Scalar> {
    pub weight: DMatrix<T>,
    pub bias: DVector<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { weight: DMatrix::zeros(outputs, inputs), bias: DVector::zeros(outputs) }
    }

    /// Uniform in `±1/√fan_in` for weights and biases.
    pub fn uniform(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = DMatrix::from_fn(outputs, inputs, |_, _| T::lit(rng.random_range(-bound..bound)));
        let bias = DVector::from_fn(outputs, |_, _| T::lit(rng.random_range(-bound..bound)));
        Self { weight, bias }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &DMatrix<T>) -> DMatrix<T> {
        let mut out = &self.weight * x;
        for mut col in out.column_iter_mut() {
            col += &self.bias;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub classes: usize,
}

impl ModelShape {
    /// 512 hidden units and 512 output features.
    pub fn new(input_dim: usize, classes: usize) -> Self {
        Self { input_dim, hidden_dim: 512, feature_dim: 512, classes }
    }
}

/// Weights of `g` (two layers) and `C` (one layer).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Scalar> {
    pub g_layer1: Dense<T>,
    pub g_layer2: Dense<T>,
    pub c_layer: Dense<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(shape: ModelShape) -> Self {
        Self {
            g_layer1: Dense::zeros(shape.input_dim, shape.hidden_dim),
            g_layer2: Dense::zeros(shape.hidden_dim, shape.feature_dim),
            c_layer: Dense::zeros(shape.feature_dim, shape.classes),
        }
    }

    pub fn init(shape: ModelShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            g_layer1: Dense::uniform(shape.input_dim, shape.hidden_dim, &mut rng),
            g_layer2: Dense::uniform(shape.hidden_dim, shape.feature_dim, &mut rng),
            c_layer: Dense::uniform(shape.feature_dim, shape.classes, &mut rng),
        }
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            input_dim: self.g_layer1.inputs(),
            hidden_dim: self.g_layer1.outputs(),
            feature_dim: self.g_layer2.outputs(),
            classes: self.c_layer.outputs(),
        }
    }

    /// Checks layer chaining and finiteness.
    pub fn validate(&self) -> Result<()> {
        if self.g_layer2.inputs() != self.g_layer1.outputs() || self.c_layer.inputs() != self.g_layer2.outputs() {
            return Err(Error::Shape("layer sizes do not chain".into()));
        }
        for layer in self.layers() {
            if layer.bias.len() != layer.outputs() {
                return Err(Error::Shape("bias length differs from layer outputs".into()));
            }
            if !all_finite(&layer.weight) || layer.bias.iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical("parameters", "non-finite weight"));
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> [&Dense<T>; 3] {
        [&self.g_layer1, &self.g_layer2, &self.c_layer]
    }

    pub(crate) fn slices(&self) -> [&[T]; 6] {
        [
            self.g_layer1.weight.as_slice(),
            self.g_layer1.bias.as_slice(),
            self.g_layer2.weight.as_slice(),
            self.g_layer2.bias.as_slice(),
            self.c_layer.weight.as_slice(),
            self.c_layer.bias.as_slice(),
        ]
    }

    pub(crate) fn slices_mut(&mut self) -> [&mut [T]; 6] {
        [
            self.g_layer1.weight.as_mut_slice(),
            self.g_layer1.bias.as_mut_slice(),
            self.g_layer2.weight.as_mut_slice(),
            self.g_layer2.bias.as_mut_slice(),
            self.c_layer.weight.as_mut_slice(),
            self.c_layer.bias.as_mut_slice(),
        ]
    }

    /// `self += other`, elementwise.
    pub(crate) fn accumulate(&mut self, other: &Self) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (a, &b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
    }

    fn check_input(&self, x: &DMatrix<T>) -> Result<()> {
        if x.nrows() != self.g_layer1.inputs() {
            return Err(Error::DimensionMismatch { expected: self.g_layer1.inputs(), got: x.nrows() });
        }
        Ok(())
    }
}

/// Intermediate activations of `g`, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct FeatureCache<T: Scalar> {
    pre_activation: DMatrix<T>,
    hidden: DMatrix<T>,
    pub features: DMatrix<T>,
}

pub fn forward_g_cached<T: Scalar>(params: &ModelParams<T>, x: &DMatrix<T>) -> Result<FeatureCache<T>> {
    params.check_input(x)?;
    let pre_activation = params.g_layer1.forward(x);
    let hidden = pre_activation.map(|v| if v > T::zero() { v } else { T::zero() });
    let features = params.g_layer2.forward(&hidden);
    Ok(FeatureCache { pre_activation, hidden, features })
}

/// `g(X)`: dense → ReLU → dense, d'×n.
pub fn forward_g<T: Scalar>(params: &ModelParams<T>, x: &DMatrix<T>) -> Result<DMatrix<T>> {
    Ok(forward_g_cached(params, x)?.features)
}

/// Column-wise softmax with max shift.
pub fn softmax_columns<T: Scalar>(logits: &DMatrix<T>) -> DMatrix<T> {
    let mut out = logits.clone();
    for mut col in out.column_iter_mut() {
        let max = col.iter().copied().fold(T::min_value().unwrap_or(-T::max_value().expect("bounded")), T::max);
        let mut sum = T::zero();
        for v in col.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        col /= sum;
    }
    out
}

/// `C(X_re)`: K×n class probabilities.
pub fn forward_c<T: Scalar>(params: &ModelParams<T>, xre: &DMatrix<T>) -> Result<DMatrix<T>> {
    if xre.nrows() != params.c_layer.inputs() {
        return Err(Error::DimensionMismatch { expected: params.c_layer.inputs(), got: xre.nrows() });
    }
    Ok(softmax_columns(&params.c_layer.forward(xre)))
}

/// `C(g(X))`.
pub fn predict_proba<T: Scalar>(params: &ModelParams<T>, x: &DMatrix<T>) -> Result<DMatrix<T>> {
    forward_c(params, &forward_g(params, x)?)
}

fn clamped_ln<T: Scalar>(p: T) -> T {
    let floor = T::lit(LOG_CLAMP);
    (if p > floor { p } else { floor }).ln()
}

fn check_one_hot<T: Scalar>(y: &DMatrix<T>) -> Result<()> {
    for (j, col) in y.column_iter().enumerate() {
        let ones = col.iter().filter(|&&v| v == T::one()).count();
        let zeros = col.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || ones + zeros != col.len() {
            return Err(Error::Input(format!("label column {j} is not one-hot")));
        }
    }
    Ok(())
}

/// `Σ_j Σ_i -y_ij ln ŷ_ij` (a sum over samples, not a mean).
pub fn loss_ce<T: Scalar>(probs: &DMatrix<T>, labels: &DMatrix<T>) -> Result<T> {
    if probs.shape() != labels.shape() {
        return Err(Error::Shape(format!("probabilities {:?} vs labels {:?}", probs.shape(), labels.shape())));
    }
    check_one_hot(labels)?;
    let mut acc = T::zero();
    for (p, &y) in probs.iter().zip(labels.iter()) {
        if y != T::zero() {
            acc -= y * clamped_ln(*p);
        }
    }
    Ok(acc)
}

/// `Σ_j Σ_i -ŷ_ij ln ŷ_ij` over target columns.
pub fn loss_entropy<T: Scalar>(probs: &DMatrix<T>) -> T {
    let mut acc = T::zero();
    for &p in probs.iter() {
        acc -= p * clamped_ln(p);
    }
    acc
}

/// `∂L_CE/∂logits = P - Y`.
fn ce_logit_grad<T: Scalar>(probs: &DMatrix<T>, labels: &DMatrix<T>) -> DMatrix<T> {
    probs - labels
}

/// `∂H/∂z_k = -p_k (ln p_k + H)` per column.
fn entropy_logit_grad<T: Scalar>(probs: &DMatrix<T>) -> DMatrix<T> {
    let mut out = probs.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        let h = probs.column(j).iter().fold(T::zero(), |a, &p| a - p * clamped_ln(p));
        for v in col.iter_mut() {
            let p = *v;
            *v = -p * (clamped_ln(p) + h);
        }
    }
    out
}

fn row_sums<T: Scalar>(m: &DMatrix<T>) -> DVector<T> {
    DVector::from_fn(m.nrows(), |r, _| m.row(r).iter().fold(T::zero(), |a, &v| a + v))
}

/// Backpropagates `∂L/∂logits` (restricted to `logit_cols`, the trailing columns)
/// and `∂L/∂X_re` (all columns, optional) through `C` and `g`.
fn backward<T: Scalar>(
    params: &ModelParams<T>,
    x: &DMatrix<T>,
    cache: &FeatureCache<T>,
    d_logits: Option<&DMatrix<T>>,
    d_features: Option<DMatrix<T>>,
) -> ModelParams<T> {
    let n = x.ncols();
    let shape = params.shape();
    let mut grads = ModelParams::zeros(shape);
    let mut d_xre = d_features.unwrap_or_else(|| DMatrix::zeros(shape.feature_dim, n));
    if let Some(dl) = d_logits {
        let offset = n - dl.ncols();
        let feats = cache.features.columns(offset, dl.ncols());
        grads.c_layer.weight = dl * feats.transpose();
        grads.c_layer.bias = row_sums(dl);
        let back = params.c_layer.weight.transpose() * dl;
        let mut tail = d_xre.columns_mut(offset, dl.ncols());
        tail += back;
    }
    grads.g_layer2.weight = &d_xre * cache.hidden.transpose();
    grads.g_layer2.bias = row_sums(&d_xre);
    let mut d_hidden = params.g_layer2.weight.transpose() * &d_xre;
    d_hidden.zip_apply(&cache.pre_activation, |g, pre| {
        if !(pre > T::zero()) {
            *g = T::zero();
        }
    });
    grads.g_layer1.weight = &d_hidden * x.transpose();
    grads.g_layer1.bias = row_sums(&d_hidden);
    grads
}

/// Source cross-entropy and its parameter gradient.
pub fn ce_value_and_grad<T: Scalar>(
    params: &ModelParams<T>,
    xs: &DMatrix<T>,
    ys: &DMatrix<T>,
) -> Result<(T, ModelParams<T>)> {
    let cache = forward_g_cached(params, xs)?;
    let probs = forward_c(params, &cache.features)?;
    let ce = loss_ce(&probs, ys)?;
    let d_logits = ce_logit_grad(&probs, ys);
    Ok((ce, backward(params, xs, &cache, Some(&d_logits), None)))
}

/// Per-term weights and kernel settings of the adaptation objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig<T> {
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    pub bandwidths: StatBandwidths<T>,
}

/// `total = ce + beta1·cond + beta2·ent`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown<T> {
    pub ce: T,
    pub cond: T,
    pub ent: T,
    pub total: T,
    pub beta1: T,
    pub beta2: T,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn new(ce: T, cond: T, ent: T, beta1: T, beta2: T) -> Self {
        Self { ce, cond, ent, total: ce + beta1 * cond + beta2 * ent, beta1, beta2 }
    }
}

/// Evaluates all three terms on the current features. Multi-source CE is the
/// sum over every source sample; COND uses the (N+1)-valued domain matrix.
pub fn loss_total<T: Scalar>(
    dataset: &AdaptationDataset<T>,
    params: &ModelParams<T>,
    cfg: &ObjectiveConfig<T>,
) -> Result<LossBreakdown<T>> {
    let y = dataset.label_matrix()?;
    let xs = dataset.source_features();
    let ce = loss_ce(&predict_proba(params, xs)?, &dataset.source_label_matrix())?;
    let xre = forward_g(params, &dataset.pooled_features())?;
    let ns = dataset.n_source();
    let target_probs = forward_c(params, &xre.columns(ns, dataset.n_target()).into_owned())?;
    let ent = loss_entropy(&target_probs);
    let cond = TraceObjective::cond(&xre, &y, &dataset.domain_matrix(), &cfg.bandwidths, cfg.epsilon)?.value(&xre)?;
    Ok(LossBreakdown::new(ce, cond, ent, cfg.beta1, cfg.beta2))
}

/// Names the term whose gradient left the finite range.
fn check_term<T: Scalar>(term: &'static str, g: &ModelParams<T>) -> Result<()> {
    if g.slices().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite { term });
    }
    Ok(())
}

/// Loss breakdown and the gradient of `total` with respect to all parameters.
///
/// The CE gradient is computed exactly as in source-only training; the
/// regularisers are back-propagated in a second pass only when their weight
/// is non-zero, so `beta1 = beta2 = 0` reproduces a CE step bit-for-bit.
pub fn loss_and_gradient<T: Scalar>(
    dataset: &AdaptationDataset<T>,
    params: &ModelParams<T>,
    cfg: &ObjectiveConfig<T>,
) -> Result<(LossBreakdown<T>, ModelParams<T>)> {
    let y = dataset.label_matrix()?;
    let (ce, mut grads) = ce_value_and_grad(params, dataset.source_features(), &dataset.source_label_matrix())?;
    check_term("cross-entropy", &grads)?;

    let x = dataset.pooled_features();
    let cache = forward_g_cached(params, &x)?;
    let ns = dataset.n_source();
    let target_feats = cache.features.columns(ns, dataset.n_target()).into_owned();
    let target_probs = forward_c(params, &target_feats)?;
    let ent = loss_entropy(&target_probs);
    let objective = TraceObjective::cond(&cache.features, &y, &dataset.domain_matrix(), &cfg.bandwidths, cfg.epsilon)?;

    let use_cond = cfg.beta1 != T::zero();
    let use_ent = cfg.beta2 != T::zero();
    let cond = if use_cond {
        let (value, g) = objective.value_and_gradient(&cache.features)?;
        let d_features = g * cfg.beta1;
        let d_logits = use_ent.then(|| entropy_logit_grad(&target_probs) * cfg.beta2);
        let reg = backward(params, &x, &cache, d_logits.as_ref(), Some(d_features));
        check_term("conditional dependence", &reg)?;
        grads.accumulate(&reg);
        value
    } else {
        if use_ent {
            let d_logits = entropy_logit_grad(&target_probs) * cfg.beta2;
            let reg = backward(params, &x, &cache, Some(&d_logits), None);
            check_term("target entropy", &reg)?;
            grads.accumulate(&reg);
        }
        objective.value(&cache.features)?
    };
    Ok((LossBreakdown::new(ce, cond, ent, cfg.beta1, cfg.beta2), grads))
}

const MODEL_MAGIC: &str = "mci-model v1";

fn write_matrix<T: Scalar, W: Write>(w: &mut W, name: &str, rows: usize, cols: usize, data: &[T]) -> Result<()> {
    writeln!(w, "{name} {rows} {cols}")?;
    // column-major storage, written row by row
    for r in 0..rows {
        let line: Vec<String> = (0..cols).map(|c| data[c * rows + r].to_string()).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

/// Text model file: a magic line, the shape line, then each tensor as a
/// `name rows cols` header followed by rows of round-trip decimal values.
pub fn write_model<T: Scalar, W: Write>(params: &ModelParams<T>, mut w: W) -> Result<()> {
    let s = params.shape();
    writeln!(w, "{MODEL_MAGIC}")?;
    writeln!(w, "shape {} {} {} {}", s.input_dim, s.hidden_dim, s.feature_dim, s.classes)?;
    for (name, layer) in [("g1", &params.g_layer1), ("g2", &params.g_layer2), ("c", &params.c_layer)] {
        write_matrix(&mut w, &format!("{name}.weight"), layer.outputs(), layer.inputs(), layer.weight.as_slice())?;
        write_matrix(&mut w, &format!("{name}.bias"), layer.outputs(), 1, layer.bias.as_slice())?;
    }
    Ok(())
}

pub fn save_model<T: Scalar>(params: &ModelParams<T>, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_model(params, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_model<T: Scalar, R: BufRead>(r: R) -> Result<ModelParams<T>> {
    let mut lines = r.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, Ok(l))) => Ok((i, l)),
            Some((_, Err(e))) => Err(e.into()),
            None => Err(Error::Parse { row: 0, detail: format!("unexpected end of model file, expected {what}") }),
        }
    };
    let (row, magic) = next("header")?;
    if magic.trim() != MODEL_MAGIC {
        return Err(Error::Parse { row, detail: format!("not a model file: `{magic}`") });
    }
    let (row, shape_line) = next("shape")?;
    let dims: Vec<usize> = shape_line
        .split_whitespace()
        .skip(1)
        .map(|t| t.parse().map_err(|_| Error::Parse { row, detail: format!("bad shape `{shape_line}`") }))
        .collect::<Result<_>>()?;
    if dims.len() != 4 {
        return Err(Error::Parse { row, detail: "shape needs 4 sizes".into() });
    }
    let shape = ModelShape { input_dim: dims[0], hidden_dim: dims[1], feature_dim: dims[2], classes: dims[3] };
    let mut params = ModelParams::<T>::zeros(shape);
    let expected = [("g1", shape.input_dim, shape.hidden_dim), ("g2", shape.hidden_dim, shape.feature_dim), ("c", shape.feature_dim, shape.classes)];
    let mut tensors: Vec<Vec<T>> = Vec::new();
    for (name, inputs, outputs) in expected {
        for (suffix, rows, cols) in [("weight", outputs, inputs), ("bias", outputs, 1)] {
            let (row, head) = next("tensor header")?;
            let parts: Vec<&str> = head.split_whitespace().collect();
            let want = format!("{name}.{suffix}");
            if parts.len() != 3 || parts[0] != want || parts[1] != rows.to_string() || parts[2] != cols.to_string() {
                return Err(Error::Parse { row, detail: format!("expected `{want} {rows} {cols}`, found `{head}`") });
            }
            let mut data = vec![T::zero(); rows * cols];
            for r in 0..rows {
                let (row, line) = next("tensor row")?;
                let vals: Vec<&str> = line.split_whitespace().collect();
                if vals.len() != cols {
                    return Err(Error::Parse { row, detail: format!("expected {cols} values, found {}", vals.len()) });
                }
                for (c, v) in vals.iter().enumerate() {
                    data[c * rows + r] = v.parse().map_err(|_| Error::Parse { row, detail: format!("bad number `{v}`") })?;
                }
            }
            tensors.push(data);
        }
    }
    for (dst, src) in params.slices_mut().into_iter().zip(&tensors) {
        dst.copy_from_slice(src);
    }
    params.validate()?;
    Ok(params)
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelParams<T>> {
    let file = std::fs::File::open(path)?;
    read_model(std::io::BufReader::new(file))
}

/// Concatenates `parts` column-wise; used to stack per-source label matrices.
pub fn concat_columns<T: Scalar>(parts: &[DMatrix<T>]) -> DMatrix<T> {
    let views: Vec<_> = parts.iter().map(|p| p.as_view()).collect();
    hstack(&views)
}
