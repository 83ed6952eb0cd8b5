//! Command implementations behind the `cte` binary.
//!
//! Every JSON document carries a `"schema"` field and every CSV file starts
//! with a `# schema` comment line, so downstream tooling can reject formats it
//! does not know.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use cte::ensemble::{classify_batch_timed, time_voting, BatchTiming, LatencySummary};
use cte::tensor::prepare_batch;
use cte::train::TableLog;
use cte::{
    load_cifar10, load_dataset, load_idx, load_model, save_model, split, Ensemble, LabeledDataset, TeacherSoftLabels,
    TrainConfig, TreeShape,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub mod pareto;

pub const TRAIN_LOG_SCHEMA: &str = "cte-train-log/1";
pub const EVAL_SCHEMA: &str = "cte-eval/1";
pub const BENCH_SCHEMA: &str = "cte-bench/1";

/// A problem with how the tool was invoked, reported with exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Where to find a dataset: a `.cted` file path, or one of `mnist-train`,
/// `mnist-test`, `cifar10-train`, `cifar10-test` looked up under the data root.
#[derive(Debug, Clone)]
pub struct DatasetArgs {
    pub dataset: Option<String>,
    pub data_dir: Option<PathBuf>,
    /// Keep only the first `limit` examples.
    pub limit: Option<usize>,
}

fn find_first(root: &Path, candidates: &[String]) -> Option<PathBuf> {
    for sub in ["", "mnist", "MNIST", "MNIST/raw", "cifar-10-batches-bin"] {
        for c in candidates {
            let p = root.join(sub).join(c);
            if p.is_file() {
                return Some(p);
            }
        }
    }
    None
}

fn idx_pair(root: &Path, prefix: &str) -> Result<(PathBuf, PathBuf)> {
    let names = |kind: &str| -> Vec<String> { vec![format!("{prefix}-{kind}"), format!("{prefix}-{kind}.gz")] };
    let img = find_first(root, &names("images-idx3-ubyte"));
    let lab = find_first(root, &names("labels-idx1-ubyte"));
    match (img, lab) {
        (Some(i), Some(l)) => Ok((i, l)),
        _ => Err(usage(format!(
            "no {prefix}-images-idx3-ubyte / {prefix}-labels-idx1-ubyte under {}",
            root.display()
        ))),
    }
}

impl DatasetArgs {
    pub fn load(&self) -> Result<LabeledDataset> {
        let name = self
            .dataset
            .as_deref()
            .ok_or_else(|| usage("no dataset given; pass --dataset"))?;
        let root = || {
            self.data_dir
                .clone()
                .ok_or_else(|| usage(format!("dataset {name} needs --data-dir or CTE_DATA_DIR")))
        };
        let ds = match name {
            "mnist-train" | "mnist-test" => {
                let (img, lab) = idx_pair(&root()?, if name == "mnist-train" { "train" } else { "t10k" })?;
                load_idx(&img, &lab)?
            }
            "cifar10-train" | "cifar10-test" => {
                let root = root()?;
                let wanted: Vec<String> = if name == "cifar10-train" {
                    (1..=5).map(|b| format!("data_batch_{b}.bin")).collect()
                } else {
                    vec!["test_batch.bin".into()]
                };
                let paths = wanted
                    .iter()
                    .map(|w| {
                        find_first(&root, std::slice::from_ref(w))
                            .ok_or_else(|| usage(format!("{w} not found under {}", root.display())))
                    })
                    .collect::<Result<Vec<_>>>()?;
                load_cifar10(&paths)?
            }
            path => {
                let mut p = PathBuf::from(path);
                if !p.is_file() {
                    if let Some(r) = &self.data_dir {
                        p = r.join(path);
                    }
                }
                if !p.is_file() {
                    return Err(usage(format!("dataset file {path} not found")));
                }
                load_dataset(&p).with_context(|| format!("reading {}", p.display()))?
            }
        };
        Ok(match self.limit {
            Some(n) => ds.take(n),
            None => ds,
        })
    }
}

pub fn read_train_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let config: TrainConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    config.validate()?;
    Ok(config)
}

/// Overrides both random streams with `seed`.
pub fn apply_seed(config: &mut TrainConfig, seed: Option<u64>) {
    if let Some(s) = seed {
        config.growth.seed = s;
        config.loss.seed = s;
    }
}

#[derive(Debug, Serialize)]
pub struct TrainLog {
    pub schema: &'static str,
    pub dataset: String,
    pub train_examples: usize,
    pub validation_examples: usize,
    pub config: TrainConfig,
    pub tables: Vec<TableLog>,
    pub seconds: f64,
}

pub struct TrainRequest<'a> {
    pub config: TrainConfig,
    pub data: &'a LabeledDataset,
    /// Held-out fraction for per-table validation error.
    pub holdout: Option<f64>,
    pub teacher: Option<PathBuf>,
}

pub fn train(req: TrainRequest<'_>) -> Result<(Ensemble, TrainLog)> {
    let started = Instant::now();
    if req.teacher.is_some() && req.holdout.is_some() {
        // Teacher rows are aligned with the whole dataset, not a split of it.
        return Err(usage("--teacher cannot be combined with --holdout"));
    }
    let (fit, held) = match req.holdout {
        Some(f) => {
            let (a, b) = split(req.data, 1.0 - f, req.config.growth.seed)?;
            (a, Some(b))
        }
        None => (req.data.clone(), None),
    };
    let teacher = match &req.teacher {
        Some(p) => Some(TeacherSoftLabels::load(p).with_context(|| format!("reading teacher labels {}", p.display()))?),
        None => None,
    };
    if fit.is_empty() {
        bail!("the training set is empty");
    }
    let trained = cte::train_ensemble(
        &fit.images,
        &fit.labels,
        &req.config,
        teacher.as_ref(),
        held.as_ref().map(|h| (&h.images[..], &h.labels[..])),
    )?;
    let log = TrainLog {
        schema: TRAIN_LOG_SCHEMA,
        dataset: req.data.provenance.clone(),
        train_examples: fit.len(),
        validation_examples: held.as_ref().map_or(0, |h| h.len()),
        config: req.config,
        tables: trained.log,
        seconds: started.elapsed().as_secs_f64(),
    };
    Ok((trained.ensemble, log))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn save(ens: &Ensemble, path: &Path) -> Result<()> {
    save_model(ens, path).with_context(|| format!("writing model {}", path.display()))
}

pub fn load(path: &Path) -> Result<Ensemble> {
    if !path.is_file() {
        return Err(usage(format!("model file {} not found", path.display())));
    }
    load_model(path).with_context(|| format!("reading model {}", path.display()))
}

fn check_dims(ens: &Ensemble, data: &LabeledDataset) -> Result<()> {
    let d = ens.dims();
    if let Some(dd) = data.dims() {
        if (dd.width, dd.height, dd.depth) != (d.width, d.height, d.depth) {
            bail!(
                "model expects {}x{}x{} images, dataset has {}x{}x{}",
                d.width,
                d.height,
                d.depth,
                dd.width,
                dd.height,
                dd.depth
            );
        }
    }
    if data.classes > ens.classes() {
        bail!("dataset has {} classes, model only {}", data.classes, ens.classes());
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalRecord {
    pub schema: String,
    pub dataset: String,
    pub examples: usize,
    pub classes: usize,
    pub errors: usize,
    pub error_rate: f64,
    /// `confusion[true - 1][predicted - 1]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Classifies every example (in parallel) and tallies the confusion matrix.
pub fn evaluate(ens: &Ensemble, data: &LabeledDataset) -> Result<EvalRecord> {
    check_dims(ens, data)?;
    let c = ens.classes();
    let predicted: Vec<u16> = data
        .images
        .par_iter()
        .map(|img| cte::classify(ens, img))
        .collect::<cte::Result<_>>()?;
    let mut confusion = vec![vec![0usize; c]; c];
    for (&p, &y) in predicted.iter().zip(&data.labels) {
        confusion[y as usize - 1][p as usize - 1] += 1;
    }
    let errors = predicted.iter().zip(&data.labels).filter(|(p, y)| p != y).count();
    Ok(EvalRecord {
        schema: EVAL_SCHEMA.into(),
        dataset: data.provenance.clone(),
        examples: data.len(),
        classes: c,
        errors,
        error_rate: if data.is_empty() {
            0.0
        } else {
            errors as f64 / data.len() as f64
        },
        confusion,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRecord {
    pub schema: &'static str,
    pub dataset: String,
    pub images: usize,
    pub reps: usize,
    pub tables: usize,
    /// Voting only, on prepared images, over `reps` passes.
    pub vote_us: LatencySummary,
    /// Channel preparation alone, one pass.
    pub prepare_us: LatencySummary,
    /// Preparation plus voting, one pass.
    pub total_us: LatencySummary,
}

/// Single-thread latency: one timed pass through preparation and voting, and
/// `reps` further passes of voting alone on prepared images.
pub fn bench(ens: &Ensemble, data: &LabeledDataset, reps: usize) -> Result<BenchRecord> {
    check_dims(ens, data)?;
    let (_, BatchTiming { total, prepare, .. }) = classify_batch_timed(ens, &data.images)?;
    let prepared = prepare_batch(&data.images, ens.prep_config())?;
    let vote = time_voting(ens, &prepared, reps)?;
    Ok(BenchRecord {
        schema: BENCH_SCHEMA,
        dataset: data.provenance.clone(),
        images: data.len(),
        reps: reps.max(1),
        tables: ens.tables().len(),
        vote_us: vote,
        prepare_us: prepare,
        total_us: total,
    })
}

/// `K1-K2-..:q1-q2-..` for trees, `fern` otherwise.
pub fn tree_label(tree: Option<&TreeShape>) -> String {
    match tree {
        None => "fern".into(),
        Some(t) => {
            let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("-");
            format!("{}:{}", join(&t.stage_bits), join(&t.split_factors))
        }
    }
}
