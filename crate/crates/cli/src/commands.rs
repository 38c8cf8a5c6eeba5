use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use mci::data::{argmax_columns, save_features, Scenario};
use mci::dependence::{
    cond, cond_test, nocco, nocco_test, per_class_nocco, per_class_nocco_test, ExtendedGrams, PermutationTest,
    StatBandwidths,
};
use mci::discrepancy::{a_distance, class_a_distance, class_mmd, mmd_fitted, ClassDiscrepancy};
use mci::kernel::{fitted_gram, indicator_gram, Bandwidth};
use mci::model::{predict_proba, save_model, LossBreakdown};
use mci::trainer::{fit, FitResult, PseudoLabelMode, TrainConfig, TrainTrace};
use mci::Error;
use serde::Serialize;

use crate::args::{GenerateArgs, MeasureArgs, PseudoLabels, Stat, SweepArgs, TrainArgs, TrainingArgs};
use crate::report::{emit, mean_and_stderr, RunReport};
use crate::source::DataSource;
use crate::UsageError;

fn stat_name(stat: Stat) -> &'static str {
    match stat {
        Stat::Nocco => "nocco",
        Stat::Cond => "cond",
        Stat::PerClassNocco => "per-class-nocco",
        Stat::Mmd => "mmd",
        Stat::ADistance => "a-distance",
    }
}

#[derive(Debug, Serialize)]
struct MeasureConfig {
    data: DataSource,
    stat: &'static str,
    epsilon: f64,
    permutations: Option<usize>,
    per_class: bool,
}

#[derive(Debug, Default, Serialize)]
struct MeasureResults {
    stat: &'static str,
    statistic: f64,
    n: usize,
    permutation_pvalue: Option<f64>,
    skipped_classes: usize,
    classifier_test_error: Option<f64>,
    per_class: Option<Vec<ClassDiscrepancy>>,
}

fn labelled_pool(scenario: &Scenario<f64>, what: &str) -> mci::Result<mci::data::PooledSample<f64>> {
    scenario
        .pooled()
        .ok_or_else(|| Error::Input(format!("{what} needs a label for every row, but target rows are unlabelled")))
}

fn measure_results(args: &MeasureArgs, scenario: &Scenario<f64>) -> mci::Result<MeasureResults> {
    let ds = &scenario.dataset;
    let eps = args.epsilon;
    let bw = StatBandwidths::<f64>::default();
    let test = args.permutations.map(|permutations| PermutationTest { permutations, seed: args.seed });
    let stat = stat_name(args.stat);
    let mut out = MeasureResults { stat, n: ds.n_total(), ..Default::default() };
    match args.stat {
        Stat::Nocco => {
            let (kx, _) = fitted_gram(&ds.pooled_features(), bw.features)?;
            let kz = indicator_gram(&ds.domain_matrix(), bw.domains)?;
            let r = match &test {
                Some(t) => nocco_test(&kx, &kz, eps, t)?,
                None => nocco(&kx, &kz, eps)?,
            };
            out.statistic = r.statistic;
            out.permutation_pvalue = r.permutation_pvalue;
        }
        Stat::Cond => {
            let pool = labelled_pool(scenario, "cond")?;
            let grams = ExtendedGrams::build(&pool.features, &pool.label_matrix(), &pool.domain_matrix(), &bw)?;
            let r = match &test {
                Some(t) => cond_test(&grams, &pool.labels, eps, t)?,
                None => cond(&grams.kxt, &grams.kzt, &grams.ky, eps)?,
            };
            out.statistic = r.statistic;
            out.permutation_pvalue = r.permutation_pvalue;
        }
        Stat::PerClassNocco => {
            let pool = labelled_pool(scenario, "per-class-nocco")?;
            let (kx, _) = fitted_gram(&pool.features, bw.features)?;
            let kz = indicator_gram(&pool.domain_matrix(), bw.domains)?;
            let r = match &test {
                Some(t) => per_class_nocco_test(&kx, &kz, &pool.labels, eps, t)?,
                None => per_class_nocco(&kx, &kz, &pool.labels, eps)?,
            };
            out.statistic = r.statistic;
            out.permutation_pvalue = r.permutation_pvalue;
            out.skipped_classes = r.skipped_classes;
        }
        Stat::Mmd | Stat::ADistance => {
            if test.is_some() {
                return Err(Error::Config(format!("--permutations is not available for {stat}")));
            }
            let (xs, xt) = (ds.source_features(), ds.target_features());
            out.n = xs.ncols() + xt.ncols();
            match (args.stat, args.per_class) {
                (Stat::Nocco | Stat::Cond | Stat::PerClassNocco, _) => unreachable!("handled above"),
                (Stat::Mmd, false) => out.statistic = mmd_fitted(xs, xt, Bandwidth::MeanSqDist)?,
                (Stat::ADistance, false) => {
                    let r = a_distance(xs, xt, args.seed)?;
                    out.statistic = r.d_a;
                    out.classifier_test_error = Some(r.classifier_test_error);
                }
                (_, true) => {
                    let truth = scenario
                        .truth
                        .as_ref()
                        .ok_or_else(|| Error::Input(format!("per-class {stat} needs target labels")))?;
                    let cc = if args.stat == Stat::Mmd {
                        class_mmd(xs, ds.source_labels(), xt, truth.labels(), Bandwidth::MeanSqDist)?
                    } else {
                        let (r, cc) = class_a_distance(xs, ds.source_labels(), xt, truth.labels(), args.seed)?;
                        out.classifier_test_error = Some(r.classifier_test_error);
                        cc
                    };
                    out.statistic = cc.value;
                    out.skipped_classes = cc.skipped_classes.len();
                    out.per_class = Some(cc.per_class);
                }
            }
        }
    }
    Ok(out)
}

pub fn measure(args: &MeasureArgs, argv: Vec<String>) -> anyhow::Result<()> {
    let start = Instant::now();
    if !(args.epsilon > 0.0) {
        return Err(UsageError(format!("--epsilon must be positive, got {}", args.epsilon)).into());
    }
    let source = DataSource::from_args(&args.data, args.seed)?;
    let scenario = source.load()?;
    let results = measure_results(args, &scenario)?;
    let config = MeasureConfig {
        data: source,
        stat: stat_name(args.stat),
        epsilon: args.epsilon,
        permutations: args.permutations,
        per_class: args.per_class,
    };
    let report = RunReport { command: argv, seed: args.seed, config, results, wall_time_s: start.elapsed().as_secs_f64() };
    emit(&report, args.output.out.as_deref(), "measure")
}

fn train_config(t: &TrainingArgs) -> TrainConfig {
    TrainConfig {
        beta1: t.beta1,
        beta2: t.beta2,
        epsilon: t.epsilon,
        pretrain_epochs: t.pretrain_epochs,
        adapt_epochs: t.adapt_epochs,
        learning_rate: t.lr,
        seed: t.seed,
        pseudo_label_mode: match t.pseudo_labels {
            PseudoLabels::Hard => PseudoLabelMode::Hard,
            PseudoLabels::Soft => PseudoLabelMode::Soft,
        },
        hidden_dim: t.hidden_dim,
        feature_dim: t.feature_dim,
        ..TrainConfig::default()
    }
}

struct TrialRun {
    fit: FitResult<f64>,
    accuracy: Option<f64>,
}

fn run_trial(scenario: &Scenario<f64>, config: &TrainConfig) -> mci::Result<TrialRun> {
    let mut ds = scenario.dataset.clone();
    let fit = fit(&mut ds, config, scenario.truth.as_ref())?;
    let accuracy = match &scenario.truth {
        Some(t) => Some(t.accuracy(&argmax_columns(&predict_proba(&fit.params, ds.target_features())?))),
        None => None,
    };
    Ok(TrialRun { fit, accuracy })
}

fn final_loss(trace: &TrainTrace) -> Option<LossBreakdown<f64>> {
    trace.epochs.last().and_then(|e| e.loss)
}

fn trial_path(base: &Path, trial: usize, trials: usize) -> PathBuf {
    if trials == 1 {
        return base.to_path_buf();
    }
    let stem = base.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match base.extension() {
        Some(ext) => format!("{stem}.{trial}.{}", ext.to_string_lossy()),
        None => format!("{stem}.{trial}"),
    };
    base.with_file_name(name)
}

fn check_trials(trials: usize) -> anyhow::Result<()> {
    if trials == 0 {
        return Err(UsageError("--trials must be at least 1".into()).into());
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrainRunConfig {
    data: DataSource,
    training: TrainConfig,
    trials: usize,
    baseline: bool,
}

#[derive(Debug, Serialize)]
struct TrialResult {
    trial: usize,
    seed: u64,
    accuracy: Option<f64>,
    baseline_accuracy: Option<f64>,
    delta: Option<f64>,
    final_loss: Option<LossBreakdown<f64>>,
    trace: Option<TrainTrace>,
    baseline_trace: Option<TrainTrace>,
}

#[derive(Debug, Serialize)]
struct Summary {
    mean: f64,
    stderr: f64,
}

impl Summary {
    fn of(values: &[Option<f64>]) -> Option<Self> {
        let v: Option<Vec<f64>> = values.iter().copied().collect();
        v.filter(|v| !v.is_empty()).map(|v| {
            let (mean, stderr) = mean_and_stderr(&v);
            Summary { mean, stderr }
        })
    }
}

#[derive(Debug, Serialize)]
struct TrainResults {
    accuracy: Option<Summary>,
    baseline_accuracy: Option<Summary>,
    delta: Option<Summary>,
    trials: Vec<TrialResult>,
}

pub fn train(args: &TrainArgs, argv: Vec<String>) -> anyhow::Result<()> {
    let start = Instant::now();
    let t = &args.training;
    check_trials(t.trials)?;
    let base_config = train_config(t);
    base_config.validate()?;
    let source = DataSource::from_args(&args.data, t.seed)?;
    let mut trials = Vec::with_capacity(t.trials);
    for i in 0..t.trials {
        let seed = t.seed + i as u64;
        let scenario = source.reseeded(seed).load()?;
        let config = TrainConfig { seed, ..base_config };
        let run = run_trial(&scenario, &config).with_context(|| format!("trial {i} (seed {seed})"))?;
        if let Some(base) = &args.model_out {
            let path = trial_path(base, i, t.trials);
            save_model(&run.fit.params, &path).with_context(|| format!("writing {}", path.display()))?;
        }
        let baseline = if args.baseline {
            Some(run_trial(&scenario, &config.baseline()).with_context(|| format!("baseline trial {i} (seed {seed})"))?)
        } else {
            None
        };
        let baseline_accuracy = baseline.as_ref().and_then(|b| b.accuracy);
        trials.push(TrialResult {
            trial: i,
            seed,
            accuracy: run.accuracy,
            baseline_accuracy,
            delta: run.accuracy.zip(baseline_accuracy).map(|(a, b)| a - b),
            final_loss: final_loss(&run.fit.trace),
            trace: args.trace.then(|| run.fit.trace.clone()),
            baseline_trace: baseline.filter(|_| args.trace).map(|b| b.fit.trace),
        });
    }
    let pick = |f: fn(&TrialResult) -> Option<f64>| trials.iter().map(f).collect::<Vec<_>>();
    let results = TrainResults {
        accuracy: Summary::of(&pick(|r| r.accuracy)),
        baseline_accuracy: if args.baseline { Summary::of(&pick(|r| r.baseline_accuracy)) } else { None },
        delta: if args.baseline { Summary::of(&pick(|r| r.delta)) } else { None },
        trials,
    };
    let config = TrainRunConfig { data: source, training: base_config, trials: t.trials, baseline: args.baseline };
    let report = RunReport { command: argv, seed: t.seed, config, results, wall_time_s: start.elapsed().as_secs_f64() };
    emit(&report, args.output.out.as_deref(), "train")
}

#[derive(Debug, Serialize)]
struct SweepConfig {
    data: DataSource,
    training: TrainConfig,
    trials: usize,
    beta1_grid: Vec<f64>,
    beta2_grid: Vec<f64>,
    epsilon_grid: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct SweepRow {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    accuracy: Option<Summary>,
    trial_accuracies: Vec<Option<f64>>,
    /// Mean over trials of the last adaptation epoch's loss terms.
    ce: Option<f64>,
    cond: Option<f64>,
    ent: Option<f64>,
    total: Option<f64>,
}

fn sorted_grid(name: &str, values: &[f64]) -> anyhow::Result<Vec<f64>> {
    if values.is_empty() {
        return Err(UsageError(format!("--{name} is empty")).into());
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(UsageError(format!("--{name} contains {bad}")).into());
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    Ok(v)
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn sweep(args: &SweepArgs, argv: Vec<String>) -> anyhow::Result<()> {
    let start = Instant::now();
    let t = &args.training;
    check_trials(t.trials)?;
    let b1 = sorted_grid("beta1-grid", &args.beta1_grid)?;
    let b2 = sorted_grid("beta2-grid", &args.beta2_grid)?;
    let eps = if args.epsilon_grid.is_empty() { vec![t.epsilon] } else { sorted_grid("epsilon-grid", &args.epsilon_grid)? };
    let base_config = train_config(t);
    for &beta1 in &b1 {
        for &beta2 in &b2 {
            for &epsilon in &eps {
                TrainConfig { beta1, beta2, epsilon, ..base_config }.validate()?;
            }
        }
    }
    let source = DataSource::from_args(&args.data, t.seed)?;
    // trial i of every cell sees the same data and initialisation
    let scenarios: Vec<Scenario<f64>> =
        (0..t.trials).map(|i| source.reseeded(t.seed + i as u64).load()).collect::<mci::Result<_>>()?;
    let mut rows = Vec::new();
    for &beta1 in &b1 {
        for &beta2 in &b2 {
            for &epsilon in &eps {
                let mut accs = Vec::with_capacity(t.trials);
                let mut losses = Vec::with_capacity(t.trials);
                for (i, scenario) in scenarios.iter().enumerate() {
                    let seed = t.seed + i as u64;
                    let config = TrainConfig { beta1, beta2, epsilon, seed, ..base_config };
                    let run = run_trial(scenario, &config)
                        .with_context(|| format!("cell beta1={beta1} beta2={beta2} epsilon={epsilon}, trial {i}"))?;
                    accs.push(run.accuracy);
                    losses.push(final_loss(&run.fit.trace));
                }
                let term = |f: fn(&LossBreakdown<f64>) -> f64| mean_of(losses.iter().map(|l| l.as_ref().map(f)));
                rows.push(SweepRow {
                    beta1,
                    beta2,
                    epsilon,
                    accuracy: Summary::of(&accs),
                    trial_accuracies: accs,
                    ce: term(|l| l.ce),
                    cond: term(|l| l.cond),
                    ent: term(|l| l.ent),
                    total: term(|l| l.total),
                });
            }
        }
    }
    if args.table {
        print_table(&rows);
    }
    let config = SweepConfig {
        data: source,
        training: base_config,
        trials: t.trials,
        beta1_grid: b1,
        beta2_grid: b2,
        epsilon_grid: eps,
    };
    let report = RunReport { command: argv, seed: t.seed, config, results: rows, wall_time_s: start.elapsed().as_secs_f64() };
    emit(&report, args.output.out.as_deref(), "sweep")
}

fn print_table(rows: &[SweepRow]) {
    let fmt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
    eprintln!("{:>10} {:>10} {:>10} {:>8} {:>8} {:>10} {:>10}", "beta1", "beta2", "epsilon", "acc", "stderr", "cond", "ent");
    for r in rows {
        eprintln!(
            "{:>10.1e} {:>10.1e} {:>10.1e} {:>8} {:>8} {:>10} {:>10}",
            r.beta1,
            r.beta2,
            r.epsilon,
            fmt(r.accuracy.as_ref().map(|s| s.mean)),
            fmt(r.accuracy.as_ref().map(|s| s.stderr)),
            fmt(r.cond),
            fmt(r.ent),
        );
    }
}

pub fn generate(args: &GenerateArgs) -> anyhow::Result<()> {
    let source = DataSource::from_args(&args.data, args.seed)?;
    let scenario = source.load()?;
    let delimiter = args.data.delimiter;
    if !delimiter.is_ascii() {
        return Err(UsageError(format!("delimiter must be ASCII, got {delimiter:?}")).into());
    }
    save_features(&scenario, &args.out, delimiter as u8).with_context(|| format!("writing {}", args.out.display()))?;
    eprintln!(
        "wrote {} rows ({} source, {} target) to {}",
        scenario.dataset.n_total(),
        scenario.dataset.n_source(),
        scenario.dataset.n_target(),
        args.out.display()
    );
    Ok(())
}
