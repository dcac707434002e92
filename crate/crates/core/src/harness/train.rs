use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{sgd_step, OptimizerState, Tape};
use crate::data::{
    load_tu_dataset, normalize_targets, stratified_split, Dataset, SplitPlan, TargetStats, Task,
};
use crate::error::{ensure, CcnError, Result};
use crate::model::{record_loss, Model, Target};
use crate::scheme::{build_scheme, CompositionScheme};

use super::checkpoint::Checkpoint;
use super::config::{FeatureKind, RunConfig, TaskKind};
use super::parallel_map;

/// A dataset with model-ready features, its schemes and target statistics.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub schemes: Vec<CompositionScheme>,
    pub stats: Option<TargetStats>,
}

pub fn prepare(cfg: &RunConfig, stats: Option<&TargetStats>) -> Result<Prepared> {
    let raw = load_tu_dataset(&cfg.dataset)?;
    let expected = match cfg.task {
        TaskKind::Classification => Task::Classification,
        TaskKind::Regression => Task::Regression,
    };
    ensure!(
        raw.task() == expected,
        Config,
        "config says {:?} but {} holds {:?} targets",
        cfg.task,
        cfg.dataset.display(),
        raw.task()
    );
    let featured = match cfg.features {
        FeatureKind::Histogram => raw.with_histogram_features(cfg.histogram_depth)?,
        FeatureKind::Onehot => raw.with_one_hot_features()?,
    };
    let (dataset, stats) = match (expected, stats) {
        (Task::Classification, _) => (featured, None),
        (Task::Regression, Some(s)) => {
            let targets = featured
                .targets
                .iter()
                .map(|t| match t {
                    Target::Real(y) => Target::Real(s.normalize(y)),
                    Target::Class(_) => unreachable!("checked regression"),
                })
                .collect();
            (
                Dataset {
                    targets,
                    ..featured
                },
                Some(s.clone()),
            )
        }
        (Task::Regression, None) => {
            let (d, s) = normalize_targets(&featured)?;
            (d, Some(s))
        }
    };
    let schemes = dataset
        .graphs
        .iter()
        .map(|g| build_scheme(g, cfg.levels))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        dataset,
        schemes,
        stats,
    })
}

/// Stratified split for classes, seeded shuffle with the same sizes for real
/// targets.
pub fn split_plan(ds: &Dataset, seed: u64) -> Result<SplitPlan> {
    match ds.task() {
        Task::Classification => stratified_split(ds, seed),
        Task::Regression => {
            let n = ds.len();
            let held = (n + 5) / 10;
            ensure!(n > 2 * held, Dataset, "{n} graphs are too few to split");
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut valid = idx[..held].to_vec();
            let mut test = idx[held..2 * held].to_vec();
            let mut train = idx[2 * held..].to_vec();
            valid.sort_unstable();
            test.sort_unstable();
            train.sort_unstable();
            Ok(SplitPlan {
                train,
                valid,
                test,
                seed,
            })
        }
    }
}

/// Named metric values in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics(pub Vec<(&'static str, f64)>);

impl Metrics {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.iter().find(|(n, _)| *n == name).map(|&(_, v)| v)
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Loss plus accuracy for classes, or MAE/RMSE in original units for real
/// targets. Per-graph work fans out over workers; sums run in index order.
pub fn evaluate(model: &Model, prepared: &Prepared, indices: &[usize]) -> Result<Metrics> {
    ensure!(!indices.is_empty(), Invalid, "cannot evaluate an empty split");
    let ds = &prepared.dataset;
    let per_graph = parallel_map(indices, |&i| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let (_, out) = model.record_with_leaves(&mut tape, &ds.graphs[i], &prepared.schemes[i])?;
        let loss = record_loss(&mut tape, out, &ds.targets[i])?;
        Ok((tape.value(loss).item(), tape.value(out).data().to_vec()))
    });
    let n = indices.len() as f64;
    let mut loss = 0.0;
    let mut correct = 0.0;
    let mut abs_err = 0.0;
    let mut sq_err = 0.0;
    let mut count = 0.0;
    for (&i, r) in indices.iter().zip(per_graph) {
        let (l, out) = r?;
        loss += l;
        match &ds.targets[i] {
            Target::Class(c) => {
                if argmax(&out) == *c {
                    correct += 1.0;
                }
            }
            Target::Real(y) => {
                let stats = prepared.stats.as_ref().ok_or_else(|| {
                    CcnError::Invalid("real targets without normalization statistics".into())
                })?;
                let pred = stats.denormalize(&out);
                let truth = stats.denormalize(y);
                for (p, t) in pred.iter().zip(&truth) {
                    abs_err += (p - t).abs();
                    sq_err += (p - t) * (p - t);
                    count += 1.0;
                }
            }
        }
    }
    Ok(match ds.task() {
        Task::Classification => Metrics(vec![("loss", loss / n), ("accuracy", correct / n)]),
        Task::Regression => Metrics(vec![
            ("loss", loss / n),
            ("mae", abs_err / count),
            ("rmse", (sq_err / count).sqrt()),
        ]),
    })
}

/// The selection metric and whether larger is better.
fn selection(task: Task) -> (&'static str, bool) {
    match task {
        Task::Classification => ("accuracy", true),
        Task::Regression => ("mae", false),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitReport {
    pub split_seed: u64,
    pub best_epoch: usize,
    pub best_valid: f64,
    pub test: Metrics,
    pub metrics_path: PathBuf,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub splits: Vec<SplitReport>,
    /// Name of the selection metric and its mean test value over splits.
    pub metric: &'static str,
    pub mean_test: f64,
    pub std_test: f64,
}

fn record_line(buf: &mut String, epoch: &str, split: &str, metrics: &Metrics) {
    for (name, value) in &metrics.0 {
        writeln!(buf, "{epoch}\t{split}\t{name}\t{value:?}").unwrap();
    }
}

/// One optimizer step per training graph, in a seeded shuffled order.
pub fn train_epoch(
    model: &mut Model,
    prepared: &Prepared,
    order: &[usize],
    opt: &mut OptimizerState,
) -> Result<()> {
    let ds = &prepared.dataset;
    for &i in order {
        let mut tape = Tape::new();
        let (leaves, out) = model.record_with_leaves(&mut tape, &ds.graphs[i], &prepared.schemes[i])?;
        let loss = record_loss(&mut tape, out, &ds.targets[i])?;
        let grads = tape.backward_scalar(loss)?;
        let mut params = model.parameters();
        let g: Vec<_> = leaves
            .iter()
            .zip(&params)
            .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
            .collect();
        sgd_step(&mut params, &g, opt)?;
        model.set_parameters(params)?;
    }
    Ok(())
}

/// Trains on one split, keeping the epoch with the best validation metric
/// (earliest on ties).
pub fn train_split(cfg: &RunConfig, prepared: &Prepared, split_seed: u64) -> Result<SplitReport> {
    let ds = &prepared.dataset;
    let plan = split_plan(ds, split_seed)?;
    let dir = cfg.output_dir.join(format!("split-{split_seed}"));
    fs::create_dir_all(&dir)?;
    let split_cfg = RunConfig {
        split_seeds: vec![split_seed],
        ..cfg.clone()
    };
    let model_cfg = cfg.model_config(ds.graphs[0].label_dim(), ds.output_dim());
    let mut model = Model::init(model_cfg, cfg.seed)?;
    let mut opt = OptimizerState::new(
        cfg.optimizer(cfg.epochs * plan.train.len()),
        &model.parameters(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ split_seed.rotate_left(32));
    let (metric, larger_better) = selection(ds.task());
    let mut log = String::new();
    let mut best: Option<(usize, f64, Model, OptimizerState)> = None;
    for epoch in 1..=cfg.epochs {
        let mut order = plan.train.clone();
        order.shuffle(&mut rng);
        train_epoch(&mut model, prepared, &order, &mut opt)?;
        let train_m = evaluate(&model, prepared, &plan.train)?;
        let valid_m = evaluate(&model, prepared, &plan.valid)?;
        record_line(&mut log, &epoch.to_string(), "train", &train_m);
        record_line(&mut log, &epoch.to_string(), "valid", &valid_m);
        let v = valid_m.get(metric).unwrap();
        let improved = match &best {
            None => true,
            Some((_, b, _, _)) => {
                if larger_better {
                    v > *b
                } else {
                    v < *b
                }
            }
        };
        if improved {
            best = Some((epoch, v, model.clone(), opt.clone()));
        }
    }
    let last = Checkpoint {
        config: split_cfg.clone(),
        model: model.clone(),
        optimizer: opt.clone(),
        epoch: cfg.epochs,
        best_metric: best.as_ref().map_or(f64::NAN, |b| b.1),
        target_stats: prepared.stats.clone(),
    };
    let last_path = dir.join("last.ckpt");
    last.save(&last_path)?;
    let (best_epoch, best_valid, best_model, best_opt) = match best {
        Some(b) => b,
        None => (0, f64::NAN, model, opt),
    };
    let test = evaluate(&best_model, prepared, &plan.test)?;
    record_line(&mut log, "best", "test", &test);
    let metrics_path = dir.join("metrics.tsv");
    fs::write(&metrics_path, log)?;
    let best_path = dir.join("best.ckpt");
    Checkpoint {
        config: split_cfg,
        model: best_model,
        optimizer: best_opt,
        epoch: best_epoch,
        best_metric: best_valid,
        target_stats: prepared.stats.clone(),
    }
    .save(&best_path)?;
    Ok(SplitReport {
        split_seed,
        best_epoch,
        best_valid,
        test,
        metrics_path,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
    })
}

/// Trains one model per split seed and summarizes their test metrics.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let prepared = prepare(cfg, None)?;
    ensure!(
        prepared.dataset.len() >= 3,
        Dataset,
        "dataset {} has too few graphs",
        cfg.dataset.display()
    );
    let splits = parallel_map(&cfg.split_seeds, |&s| train_split(cfg, &prepared, s))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let (metric, _) = selection(prepared.dataset.task());
    let values: Vec<f64> = splits.iter().map(|s| s.test.get(metric).unwrap()).collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    Ok(TrainReport {
        splits,
        metric,
        mean_test: mean,
        std_test: var.sqrt(),
    })
}

/// Evaluates a checkpoint on a named split (`train`, `valid`, `test` or
/// `all`) of a dataset, using the split seed stored with the checkpoint.
pub fn cmd_eval(checkpoint: &Path, dataset: &Path, split: &str) -> Result<Metrics> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = RunConfig {
        dataset: dataset.to_path_buf(),
        ..ck.config.clone()
    };
    let prepared = prepare(&cfg, ck.target_stats.as_ref())?;
    ensure!(
        prepared.dataset.graphs[0].label_dim() == ck.model.config.input_dim
            && prepared.dataset.output_dim() == ck.model.config.output_dim,
        Config,
        "dataset {} does not match the checkpoint's model",
        dataset.display()
    );
    let indices: Vec<usize> = if split == "all" {
        (0..prepared.dataset.len()).collect()
    } else {
        let plan = split_plan(&prepared.dataset, cfg.split_seeds[0])?;
        plan.get(split)
            .ok_or_else(|| CcnError::Config(format!("unknown split {split:?}")))?
            .to_vec()
    };
    evaluate(&ck.model, &prepared, &indices)
}
