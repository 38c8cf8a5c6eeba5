//! Full-batch training: source pre-training, pseudo-label initialisation, and
//! adaptation epochs on the combined objective, all driven by one Adam state.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{argmax_columns, one_hot, AdaptationDataset, TargetTruth};
use crate::dependence::StatBandwidths;
use crate::error::{Error, Result};
use crate::model::{
    ce_value_and_grad, loss_and_gradient, predict_proba, LossBreakdown, ModelParams, ModelShape, ObjectiveConfig,
};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Scalar> {
    config: AdamConfig,
    learning_rate: f64,
    first: ModelParams<T>,
    second: ModelParams<T>,
    steps: u32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(shape: ModelShape, config: AdamConfig, learning_rate: f64) -> Self {
        Self { config, learning_rate, first: ModelParams::zeros(shape), second: ModelParams::zeros(shape), steps: 0 }
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>) {
        self.steps += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let one = T::one();
        let bc1 = T::lit(1.0 - c.beta1.powi(self.steps as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.steps as i32));
        let lr = T::lit(self.learning_rate);
        let eps = T::lit(c.eps);
        let tensors = params.slices_mut().into_iter().zip(grads.slices()).zip(self.first.slices_mut()).zip(self.second.slices_mut());
        for (((p, g), m), v) in tensors {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PseudoLabelMode {
    /// Argmax one-hot; ties go to the lowest class index.
    Hard,
    /// Predicted probabilities.
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub pretrain_epochs: usize,
    pub adapt_epochs: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub pseudo_label_mode: PseudoLabelMode,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub bandwidths: StatBandwidths<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta1: 1e-2,
            beta2: 5e-3,
            epsilon: 1e-4,
            pretrain_epochs: 100,
            adapt_epochs: 100,
            learning_rate: 1e-3,
            adam: AdamConfig::default(),
            seed: 0,
            pseudo_label_mode: PseudoLabelMode::Hard,
            hidden_dim: 512,
            feature_dim: 512,
            bandwidths: StatBandwidths::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 { Ok(()) } else { Err(Error::Config(format!("{name} must be finite and non-negative, got {v}"))) }
        };
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 { Ok(()) } else { Err(Error::Config(format!("{name} must be positive, got {v}"))) }
        };
        nonneg("beta1", self.beta1)?;
        nonneg("beta2", self.beta2)?;
        positive("epsilon", self.epsilon)?;
        positive("learning rate", self.learning_rate)?;
        positive("adam eps", self.adam.eps)?;
        for (name, b) in [("adam beta1", self.adam.beta1), ("adam beta2", self.adam.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.hidden_dim == 0 || self.feature_dim == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn shape(&self, input_dim: usize, classes: usize) -> ModelShape {
        ModelShape { input_dim, hidden_dim: self.hidden_dim, feature_dim: self.feature_dim, classes }
    }

    /// Source-only baseline: the same run with both regularisers off.
    pub fn baseline(&self) -> Self {
        Self { beta1: 0.0, beta2: 0.0, ..*self }
    }

    fn objective<T: Scalar>(&self) -> ObjectiveConfig<T> {
        let bw = self.bandwidths;
        ObjectiveConfig {
            beta1: T::lit(self.beta1),
            beta2: T::lit(self.beta2),
            epsilon: T::lit(self.epsilon),
            bandwidths: StatBandwidths { features: bw.features.map(T::lit), labels: bw.labels.map(T::lit), domains: bw.domains.map(T::lit) },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Pretrain,
    Adapt,
}

/// One optimiser step. Losses are measured at the parameters before the
/// step; accuracy is measured after it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub ce: f64,
    /// Present for adaptation epochs only.
    pub loss: Option<LossBreakdown<f64>>,
    pub target_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.target_accuracy)
    }
}

/// Parameters and optimiser state carried across phases.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer<T: Scalar> {
    pub params: ModelParams<T>,
    adam: Adam<T>,
    config: TrainConfig,
}

fn diverged(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { term } => Error::Diverged { epoch, term },
        other => other,
    }
}

fn breakdown_f64<T: Scalar>(b: &LossBreakdown<T>) -> LossBreakdown<f64> {
    LossBreakdown {
        ce: b.ce.as_f64(),
        cond: b.cond.as_f64(),
        ent: b.ent.as_f64(),
        total: b.total.as_f64(),
        beta1: b.beta1.as_f64(),
        beta2: b.beta2.as_f64(),
    }
}

impl<T: Scalar> Trainer<T> {
    /// Seeded initialisation sized for `dataset`.
    pub fn new(dataset: &AdaptationDataset<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let shape = config.shape(dataset.dim(), dataset.classes());
        Ok(Self { params: ModelParams::init(shape, config.seed), adam: Adam::new(shape, config.adam, config.learning_rate), config })
    }

    /// Continues from existing parameters with a fresh optimiser.
    pub fn from_params(params: ModelParams<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        params.validate()?;
        let adam = Adam::new(params.shape(), config.adam, config.learning_rate);
        Ok(Self { params, adam, config })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Optimiser steps taken so far.
    pub fn steps(&self) -> usize {
        self.adam.steps() as usize
    }

    fn target_accuracy(&self, dataset: &AdaptationDataset<T>, truth: Option<&TargetTruth>) -> Result<Option<f64>> {
        match truth {
            None => Ok(None),
            Some(t) => Ok(Some(t.accuracy(&self.predict(dataset.target_features())?))),
        }
    }

    /// Hard class predictions.
    pub fn predict(&self, x: &DMatrix<T>) -> Result<Vec<usize>> {
        Ok(argmax_columns(&predict_proba(&self.params, x)?))
    }

    /// `epochs` full-batch Adam steps on the summed source cross-entropy.
    pub fn pretrain(&mut self, dataset: &AdaptationDataset<T>, epochs: usize, truth: Option<&TargetTruth>) -> Result<TrainTrace> {
        let mut trace = TrainTrace::default();
        let ys = dataset.source_label_matrix();
        for epoch in 0..epochs {
            let step = self.steps();
            let (ce, grads) = ce_value_and_grad(&self.params, dataset.source_features(), &ys)?;
            if !ce.is_finite() {
                return Err(Error::Diverged { epoch: step, term: "cross-entropy" });
            }
            if grads.slices().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged { epoch: step, term: "cross-entropy" });
            }
            self.adam.step(&mut self.params, &grads);
            trace.epochs.push(EpochRecord {
                phase: Phase::Pretrain,
                epoch,
                ce: ce.as_f64(),
                loss: None,
                target_accuracy: self.target_accuracy(dataset, truth)?,
            });
        }
        Ok(trace)
    }

    /// Sets the target pseudo-labels from the current predictions.
    pub fn init_pseudo_labels(&self, dataset: &mut AdaptationDataset<T>) -> Result<()> {
        let probs = predict_proba(&self.params, dataset.target_features())?;
        let labels = match self.config.pseudo_label_mode {
            PseudoLabelMode::Hard => one_hot(&argmax_columns(&probs), dataset.classes()),
            PseudoLabelMode::Soft => probs,
        };
        dataset.set_pseudo_labels(labels)
    }

    /// One step on the full objective, then a pseudo-label refresh.
    pub fn adapt_epoch(&mut self, dataset: &mut AdaptationDataset<T>) -> Result<LossBreakdown<T>> {
        let step = self.steps();
        let (loss, grads) = loss_and_gradient(dataset, &self.params, &self.config.objective()).map_err(diverged(step))?;
        for (term, v) in [("cross-entropy", loss.ce), ("conditional dependence", loss.cond), ("target entropy", loss.ent)] {
            if !v.is_finite() {
                return Err(Error::Diverged { epoch: step, term });
            }
        }
        self.adam.step(&mut self.params, &grads);
        self.init_pseudo_labels(dataset)?;
        Ok(loss)
    }

    /// `pretrain`, pseudo-label initialisation, then `adapt_epochs` adaptation epochs.
    pub fn run(&mut self, dataset: &mut AdaptationDataset<T>, truth: Option<&TargetTruth>) -> Result<TrainTrace> {
        let mut trace = self.pretrain(dataset, self.config.pretrain_epochs, truth)?;
        self.init_pseudo_labels(dataset)?;
        for epoch in 0..self.config.adapt_epochs {
            let loss = self.adapt_epoch(dataset)?;
            trace.epochs.push(EpochRecord {
                phase: Phase::Adapt,
                epoch,
                ce: loss.ce.as_f64(),
                loss: Some(breakdown_f64(&loss)),
                target_accuracy: self.target_accuracy(dataset, truth)?,
            });
        }
        Ok(trace)
    }
}

/// Result of a complete training run.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult<T: Scalar> {
    pub params: ModelParams<T>,
    pub trace: TrainTrace,
}

/// Trains from a seeded initialisation. The same code path serves one or
/// several sources. `truth` is used only to record target accuracy.
pub fn fit<T: Scalar>(
    dataset: &mut AdaptationDataset<T>,
    config: &TrainConfig,
    truth: Option<&TargetTruth>,
) -> Result<FitResult<T>> {
    let mut trainer = Trainer::new(dataset, *config)?;
    let trace = trainer.run(dataset, truth)?;
    Ok(FitResult { params: trainer.params, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_shifted_blobs, LabeledDomain, SyntheticKind, SyntheticSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn small_config() -> TrainConfig {
        TrainConfig { hidden_dim: 16, feature_dim: 8, pretrain_epochs: 5, adapt_epochs: 3, epsilon: 1e-3, ..TrainConfig::default() }
    }

    fn blobs(seed: u64) -> crate::data::Scenario<f64> {
        let spec = SyntheticSpec {
            kind: SyntheticKind::ShiftedBlobs { shift: vec![1.0, 0.0], separation: 3.0 },
            classes: 3,
            samples_per_class_per_domain: 10,
            noise_sd: 1.0,
            num_sources: 1,
            seed,
        };
        make_shifted_blobs(&spec).unwrap()
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let shape = ModelShape { input_dim: 1, hidden_dim: 1, feature_dim: 1, classes: 1 };
        let mut p = ModelParams::<f64>::zeros(shape);
        let mut g = ModelParams::<f64>::zeros(shape);
        g.c_layer.bias[0] = 3.0;
        g.g_layer1.weight[(0, 0)] = -0.5;
        let mut adam = Adam::new(shape, AdamConfig::default(), 1e-3);
        adam.step(&mut p, &g);
        // first step is lr·g/(|g| + eps) after bias correction
        assert!((p.c_layer.bias[0] + 1e-3 * 3.0 / (3.0 + 1e-8)).abs() < 1e-15);
        assert!((p.g_layer1.weight[(0, 0)] - 1e-3 * 0.5 / (0.5 + 1e-8)).abs() < 1e-15);
        assert_eq!(p.g_layer2.weight[(0, 0)], 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { beta1: -1.0, ..TrainConfig::default() },
            TrainConfig { epsilon: 0.0, ..TrainConfig::default() },
            TrainConfig { learning_rate: f64::NAN, ..TrainConfig::default() },
            TrainConfig { hidden_dim: 0, ..TrainConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn zero_pretrain_epochs_leave_params_unchanged() {
        let sc = blobs(0);
        let cfg = small_config();
        let mut t = Trainer::new(&sc.dataset, cfg).unwrap();
        let before = t.params.clone();
        let trace = t.pretrain(&sc.dataset, 0, None).unwrap();
        assert!(trace.is_empty());
        assert_eq!(t.params, before);
    }

    #[test]
    fn pseudo_label_modes() {
        let mut sc = blobs(1);
        let shape = small_config().shape(2, 3);
        let t = Trainer::from_params(ModelParams::<f64>::zeros(shape), small_config()).unwrap();
        t.init_pseudo_labels(&mut sc.dataset).unwrap();
        let pl = sc.dataset.pseudo_labels().unwrap();
        assert!(pl.column_iter().all(|c| c[0] == 1.0 && c.sum() == 1.0));

        let soft = Trainer::new(&sc.dataset, TrainConfig { pseudo_label_mode: PseudoLabelMode::Soft, ..small_config() }).unwrap();
        soft.init_pseudo_labels(&mut sc.dataset).unwrap();
        for c in sc.dataset.pseudo_labels().unwrap().column_iter() {
            assert!((c.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn adapt_requires_pseudo_labels() {
        let mut sc = blobs(2);
        let mut t = Trainer::new(&sc.dataset, small_config()).unwrap();
        assert!(matches!(t.adapt_epoch(&mut sc.dataset), Err(Error::Precondition(_))));
    }

    #[test]
    fn fit_records_every_epoch_and_is_deterministic() {
        let cfg = small_config();
        let mut a = blobs(3);
        let mut b = blobs(3);
        let ra = fit(&mut a.dataset, &cfg, a.truth.as_ref()).unwrap();
        let rb = fit(&mut b.dataset, &cfg, b.truth.as_ref()).unwrap();
        assert_eq!(ra.params, rb.params);
        assert_eq!(ra.trace, rb.trace);
        assert_eq!(ra.trace.len(), 8);
        for rec in ra.trace.epochs.iter().filter(|r| r.phase == Phase::Adapt) {
            let l = rec.loss.unwrap();
            assert_eq!(l.total, l.ce + l.beta1 * l.cond + l.beta2 * l.ent);
            assert!(rec.target_accuracy.is_some());
        }
    }

    #[test]
    fn zero_betas_match_cross_entropy_only_training() {
        let cfg = TrainConfig { beta1: 0.0, beta2: 0.0, ..small_config() };
        let mut sc = blobs(4);
        let full = fit(&mut sc.dataset, &cfg, None).unwrap();
        let mut t = Trainer::new(&sc.dataset, cfg).unwrap();
        t.pretrain(&sc.dataset, cfg.pretrain_epochs + cfg.adapt_epochs, None).unwrap();
        assert_eq!(full.params, t.params);
    }

    #[test]
    fn zero_adapt_epochs_return_pretrained_params() {
        let cfg = TrainConfig { adapt_epochs: 0, ..small_config() };
        let mut sc = blobs(5);
        let full = fit(&mut sc.dataset, &cfg, None).unwrap();
        let mut t = Trainer::new(&sc.dataset, cfg).unwrap();
        t.pretrain(&sc.dataset, cfg.pretrain_epochs, None).unwrap();
        assert_eq!(full.params, t.params);
    }

    #[test]
    fn separable_source_is_fit_perfectly() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 40;
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let xs = DMatrix::from_fn(2, n, |r, c| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            noise * 0.3 + if r == 0 { if labels[c] == 1 { 2.0 } else { -2.0 } } else { 0.0 }
        });
        let ds = AdaptationDataset::single_source(LabeledDomain { features: xs.clone(), labels: labels.clone() }, xs.clone(), 2).unwrap();
        let mut t = Trainer::new(&ds, TrainConfig { hidden_dim: 32, feature_dim: 16, ..TrainConfig::default() }).unwrap();
        t.pretrain(&ds, 200, None).unwrap();
        assert_eq!(t.predict(&xs).unwrap(), labels);
    }

    #[test]
    fn non_finite_input_reports_epoch_and_term() {
        let mut sc = blobs(7);
        let cfg = small_config();
        let mut t = Trainer::new(&sc.dataset, cfg).unwrap();
        t.pretrain(&sc.dataset, 2, None).unwrap();
        t.init_pseudo_labels(&mut sc.dataset).unwrap();
        t.params.c_layer.bias[0] = f64::NAN;
        match t.adapt_epoch(&mut sc.dataset) {
            Err(Error::Diverged { epoch, term }) => {
                assert_eq!(epoch, 2);
                assert_eq!(term, "cross-entropy");
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
