//! Global convex optimization over fixed histogram features.
//!
//! The linear model scores example `i` for class `c` as
//! `s_i^c = W_c . H_i - T^c`. Every loss is `1/2 ||W||^2 + lambda * sum_i l_i`.
//! Softmax biases are unregularized; SVM biases ride on a constant feature.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CteError, Result};
use crate::optim::{self, LbfgsOptions};

/// One table's block of histogram columns, stored row-compressed.
///
/// Raw values are kept as given; the column scale divides them on read.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlock {
    columns: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u16>,
    values: Vec<f32>,
    scales: Vec<f64>,
    inv_scales: Vec<f64>,
}

impl FeatureBlock {
    /// Builds a block from per-row sparse entries `(column, value)`.
    pub fn from_rows<I, R>(columns: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator<Item = (usize, f32)>,
    {
        if columns == 0 || columns > 1 << 16 {
            return Err(CteError::InvalidConfig(format!(
                "a feature block needs 1..=65536 columns, got {columns}"
            )));
        }
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut values = Vec::new();
        for row in rows {
            for (c, v) in row {
                if c >= columns {
                    return Err(CteError::DimensionMismatch {
                        expected: format!("column < {columns}"),
                        found: format!("column {c}"),
                    });
                }
                if v != 0.0 {
                    cols.push(c as u16);
                    values.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Ok(Self {
            columns,
            row_ptr,
            cols,
            values,
            scales: vec![1.0; columns],
            inv_scales: vec![1.0; columns],
        })
    }

    /// Builds a block from word counts, one histogram per row.
    pub fn from_histograms<'a>(columns: usize, rows: impl IntoIterator<Item = &'a [u32]>) -> Result<Self> {
        Self::from_rows(
            columns,
            rows.into_iter().map(|h| {
                h.iter()
                    .enumerate()
                    .filter(|(_, &c)| c > 0)
                    .map(|(b, &c)| (b, c as f32))
                    .collect::<Vec<_>>()
            }),
        )
    }

    pub fn from_dense(rows: &[Vec<f64>]) -> Result<Self> {
        let columns = rows.first().map_or(0, Vec::len);
        Self::from_rows(
            columns,
            rows.iter()
                .map(|r| r.iter().enumerate().map(|(c, &v)| (c, v as f32)).collect::<Vec<_>>()),
        )
    }

    pub fn rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn columns(&self) -> usize {
        self.columns
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// Calls `f(column, scaled value)` for every stored entry of row `i`.
    #[inline]
    pub fn for_each_in_row(&self, i: usize, mut f: impl FnMut(usize, f64)) {
        for j in self.row_ptr[i]..self.row_ptr[i + 1] {
            let c = self.cols[j] as usize;
            f(c, self.values[j] as f64 * self.inv_scales[c]);
        }
    }

    /// Scaled value at `(i, c)`; linear scan, meant for tests.
    pub fn get(&self, i: usize, c: usize) -> f64 {
        let mut v = 0.0;
        self.for_each_in_row(i, |col, x| {
            if col == c {
                v = x;
            }
        });
        v
    }

    pub fn set_scales(&mut self, scales: Vec<f64>) {
        assert_eq!(scales.len(), self.columns);
        self.inv_scales = scales.iter().map(|s| 1.0 / s).collect();
        self.scales = scales;
    }
}

/// Divides every nonzero column by its mean absolute nonzero value
/// (`L1 / L0`); all-zero columns get scale 1. Returns the scales applied.
pub fn normalize_columns(block: &mut FeatureBlock) -> Vec<f64> {
    let mut l1 = vec![0.0f64; block.columns];
    let mut l0 = vec![0usize; block.columns];
    for (&c, &v) in block.cols.iter().zip(&block.values) {
        l1[c as usize] += (v as f64).abs();
        l0[c as usize] += 1;
    }
    let scales: Vec<f64> = l1
        .iter()
        .zip(&l0)
        .map(|(&s, &n)| if n == 0 || s == 0.0 { 1.0 } else { s / n as f64 })
        .collect();
    block.set_scales(scales.clone());
    scales
}

/// Example-major sparse matrix made of one column block per table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    blocks: Vec<FeatureBlock>,
    offsets: Vec<usize>,
}

impl FeatureMatrix {
    pub fn new(rows: usize) -> Self {
        Self {
            rows,
            blocks: Vec::new(),
            offsets: Vec::new(),
        }
    }

    pub fn from_block(block: FeatureBlock) -> Self {
        let mut m = Self::new(block.rows());
        m.push_block(block).expect("row count matches");
        m
    }

    pub fn push_block(&mut self, block: FeatureBlock) -> Result<()> {
        if block.rows() != self.rows {
            return Err(CteError::DimensionMismatch {
                expected: format!("{} rows", self.rows),
                found: format!("{} rows", block.rows()),
            });
        }
        self.offsets.push(self.columns());
        self.blocks.push(block);
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn columns(&self) -> usize {
        self.blocks.iter().map(|b| b.columns).sum()
    }

    pub fn blocks(&self) -> &[FeatureBlock] {
        &self.blocks
    }

    pub fn nnz(&self) -> usize {
        self.blocks.iter().map(FeatureBlock::nnz).sum()
    }

    #[inline]
    pub fn for_each_in_row(&self, i: usize, mut f: impl FnMut(usize, f64)) {
        for (b, &off) in self.blocks.iter().zip(&self.offsets) {
            b.for_each_in_row(i, |c, v| f(off + c, v));
        }
    }

    /// Squared Euclidean norm of every row.
    pub fn row_norms_sq(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|i| {
                let mut s = 0.0;
                self.for_each_in_row(i, |_, v| s += v * v);
                s
            })
            .collect()
    }
}

/// Weights `W` (feature-major, all classes of one feature contiguous) and biases `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub classes: usize,
    pub features: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl LinearModel {
    pub fn zeros(classes: usize, features: usize) -> Self {
        Self {
            classes,
            features,
            weights: vec![0.0; classes * features],
            biases: vec![0.0; classes],
        }
    }

    #[inline]
    pub fn weight(&self, feature: usize, class: usize) -> f64 {
        self.weights[feature * self.classes + class]
    }

    /// Pads with zero weights for `extra` new features.
    pub fn extended(&self, extra: usize) -> Self {
        let mut m = self.clone();
        m.features += extra;
        m.weights.resize(m.features * m.classes, 0.0);
        m
    }

    pub fn scores(&self, h: &FeatureMatrix) -> Vec<f64> {
        scores_of(&self.weights, &self.biases, self.classes, h)
    }

    pub fn weight_norm_sq(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum()
    }
}

/// Row-major `N x C` score matrix.
fn scores_of(weights: &[f64], biases: &[f64], classes: usize, h: &FeatureMatrix) -> Vec<f64> {
    let mut s = vec![0.0; h.rows() * classes];
    s.par_chunks_mut(classes).enumerate().for_each(|(i, row)| {
        row.iter_mut().zip(biases).for_each(|(r, t)| *r = -t);
        h.for_each_in_row(i, |f, v| {
            let w = &weights[f * classes..(f + 1) * classes];
            row.iter_mut().zip(w).for_each(|(r, wc)| *r += v * wc);
        });
    });
    s
}

/// Per-example, per-class loss gradients `g_i^c`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMatrix {
    pub rows: usize,
    pub classes: usize,
    pub data: Vec<f64>,
}

impl GradientMatrix {
    pub fn zeros(rows: usize, classes: usize) -> Self {
        Self {
            rows,
            classes,
            data: vec![0.0; rows * classes],
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    #[inline]
    pub fn get(&self, i: usize, c: usize) -> f64 {
        self.data[i * self.classes + c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Svm,
    Softmax,
    SoftmaxDistill,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Weight `lambda` of the data term.
    pub regularization: f64,
    /// Weight of the true-label softmax term in the distillation blend.
    pub distill_mix: f64,
    pub distill_temperature: f64,
    /// Value `B` of the constant feature carrying the SVM bias.
    pub svm_bias_feature: f64,
    /// Softmax: gradient-norm bound. SVM: duality-gap bound per program.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Softmax,
            regularization: 1.0,
            distill_mix: 0.5,
            distill_temperature: 1.0,
            svm_bias_feature: 1.0,
            tolerance: 1e-4,
            max_iterations: 2000,
            seed: 0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.regularization > 0.0) {
            return Err(CteError::InvalidConfig("regularization weight must be positive".into()));
        }
        if !(self.svm_bias_feature > 0.0) {
            return Err(CteError::InvalidConfig("SVM bias feature must be positive".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(CteError::InvalidConfig("solver tolerance must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.distill_mix) {
            return Err(CteError::InvalidConfig("distillation mix must lie in [0, 1]".into()));
        }
        if !(self.distill_temperature > 0.0) {
            return Err(CteError::InvalidConfig(
                "distillation temperature must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// How a solve ended.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolveReport {
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
    /// Final gradient norm (softmax) or the largest relative duality gap
    /// over the per-class programs (SVM).
    pub certificate: f64,
}

/// External teacher probabilities, one row per example.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSoftLabels {
    pub rows: usize,
    pub classes: usize,
    pub probs: Vec<f32>,
    pub temperature: Option<f32>,
}

impl TeacherSoftLabels {
    pub fn new(rows: usize, classes: usize, probs: Vec<f32>, temperature: Option<f32>) -> Result<Self> {
        let t = Self {
            rows,
            classes,
            probs,
            temperature,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.probs.len() != self.rows * self.classes {
            return Err(CteError::InvalidTeacher(format!(
                "{} values for {}x{}",
                self.probs.len(),
                self.rows,
                self.classes
            )));
        }
        for (i, row) in self.probs.chunks(self.classes.max(1)).enumerate() {
            if row.iter().any(|&p| !(p >= 0.0)) {
                return Err(CteError::InvalidTeacher(format!("row {i} has a negative entry")));
            }
            let s: f64 = row.iter().map(|&p| p as f64).sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(CteError::InvalidTeacher(format!("row {i} sums to {s}")));
            }
        }
        Ok(())
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.probs[i * self.classes..(i + 1) * self.classes]
    }

    /// Layout: `u32 N, u32 C, u8 has-temperature, f32 temperature`, then
    /// `N x C` f32 probabilities, all little-endian.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.classes as u32).to_le_bytes())?;
        w.write_all(&[self.temperature.is_some() as u8])?;
        w.write_all(&self.temperature.unwrap_or(0.0).to_le_bytes())?;
        for p in &self.probs {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut header = [0u8; 13];
        r.read_exact(&mut header)
            .map_err(|_| CteError::Truncated("teacher file header".into()))?;
        let rows = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
        let classes = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let temperature = (header[8] != 0).then(|| f32::from_le_bytes(header[9..13].try_into().unwrap()));
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() != rows * classes * 4 {
            return Err(CteError::Truncated(format!(
                "teacher payload has {} bytes, expected {}",
                payload.len(),
                rows * classes * 4
            )));
        }
        let probs = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Self::new(rows, classes, probs, temperature)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

fn check_labels(labels: &[u16], classes: usize, rows: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(CteError::DimensionMismatch {
            expected: format!("{rows} labels"),
            found: format!("{} labels", labels.len()),
        });
    }
    if let Some(&l) = labels.iter().find(|&&l| l == 0 || l as usize > classes) {
        return Err(CteError::InvalidLabels(format!("label {l} outside 1..={classes}")));
    }
    Ok(())
}

/// Softmax probabilities of `scores / temperature`, stabilized by max subtraction.
pub fn softmax(scores: &[f64], temperature: f64, out: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &s) in out.iter_mut().zip(scores) {
        *o = ((s - max) / temperature).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

fn log_sum_exp(scores: &[f64], temperature: f64) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max / temperature
        + scores
            .iter()
            .map(|&s| ((s - max) / temperature).exp())
            .sum::<f64>()
            .ln()
}

/// Teacher probabilities softened by `temperature`: `q ~ p^(1/T)`.
pub fn soften(teacher: &[f32], temperature: f64, out: &mut [f64]) {
    let mut z = 0.0;
    for (o, &p) in out.iter_mut().zip(teacher) {
        *o = if p > 0.0 {
            (p as f64).powf(1.0 / temperature)
        } else {
            0.0
        };
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

/// Per-example loss terms, without the `lambda` factor.
#[derive(Debug, Clone, Copy)]
enum ExampleLoss<'a> {
    Softmax,
    Distill {
        teacher: &'a TeacherSoftLabels,
        mix: f64,
        temperature: f64,
    },
}

impl ExampleLoss<'_> {
    /// Loss of example `i` with the given scores; writes `dl/ds` into `grad`.
    fn eval(&self, i: usize, label: u16, scores: &[f64], grad: &mut [f64], scratch: &mut [f64]) -> f64 {
        let y = label as usize - 1;
        match *self {
            ExampleLoss::Softmax => {
                softmax(scores, 1.0, grad);
                grad[y] -= 1.0;
                log_sum_exp(scores, 1.0) - scores[y]
            }
            ExampleLoss::Distill {
                teacher,
                mix,
                temperature,
            } => {
                // mix * softmax(s) vs one-hot + (1 - mix) * T^2 * KL(q || softmax(s / T))
                softmax(scores, 1.0, grad);
                grad[y] -= 1.0;
                grad.iter_mut().for_each(|g| *g *= mix);
                let hard = log_sum_exp(scores, 1.0) - scores[y];

                let q = scratch;
                soften(teacher.row(i), temperature, q);
                let lse_t = log_sum_exp(scores, temperature);
                let mut kl = 0.0;
                for (c, &qc) in q.iter().enumerate() {
                    if qc > 0.0 {
                        let log_p = scores[c] / temperature - lse_t;
                        kl += qc * (qc.ln() - log_p);
                    }
                }
                let t2 = temperature * temperature;
                for (c, g) in grad.iter_mut().enumerate() {
                    let p_t = (scores[c] / temperature - lse_t).exp();
                    *g += (1.0 - mix) * temperature * (p_t - q[c]);
                }
                mix * hard + (1.0 - mix) * t2 * kl
            }
        }
    }
}

/// Blended distillation loss summed over examples, for scores given
/// row-major `N x C`.
pub fn distill_loss(
    scores: &[f64],
    labels: &[u16],
    teacher: &TeacherSoftLabels,
    mix: f64,
    temperature: f64,
) -> Result<f64> {
    teacher.validate()?;
    let c = teacher.classes;
    check_labels(labels, c, scores.len() / c.max(1))?;
    if teacher.rows != labels.len() {
        return Err(CteError::DimensionMismatch {
            expected: format!("{} teacher rows", labels.len()),
            found: format!("{}", teacher.rows),
        });
    }
    let loss = ExampleLoss::Distill {
        teacher,
        mix,
        temperature,
    };
    let mut grad = vec![0.0; c];
    let mut scratch = vec![0.0; c];
    Ok(scores
        .chunks(c)
        .zip(labels)
        .enumerate()
        .map(|(i, (s, &y))| loss.eval(i, y, s, &mut grad, &mut scratch))
        .sum())
}

/// Objective and gradient of a smooth loss over `x = [W (feature-major), T]`.
fn smooth_objective(
    loss: ExampleLoss<'_>,
    h: &FeatureMatrix,
    labels: &[u16],
    classes: usize,
    lambda: f64,
    x: &[f64],
    grad: &mut [f64],
) -> f64 {
    let nw = h.columns() * classes;
    let (w, t) = x.split_at(nw);
    let scores = scores_of(w, t, classes, h);

    let n = h.rows();
    let mut dscores = vec![0.0; n * classes];
    // Per-example losses are summed in order so the value does not depend on
    // how the parallel work was split.
    let losses: Vec<f64> = dscores
        .par_chunks_mut(classes)
        .zip(scores.par_chunks(classes))
        .enumerate()
        .map_init(
            || vec![0.0; classes],
            |scratch, (i, (g, s))| loss.eval(i, labels[i], s, g, scratch),
        )
        .collect();
    let data: f64 = losses.iter().sum();

    let (gw, gt) = grad.split_at_mut(nw);
    gw.copy_from_slice(w);
    gt.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..n {
        let d = &dscores[i * classes..(i + 1) * classes];
        h.for_each_in_row(i, |f, v| {
            let row = &mut gw[f * classes..(f + 1) * classes];
            row.iter_mut().zip(d).for_each(|(r, dc)| *r += lambda * v * dc);
        });
        gt.iter_mut().zip(d).for_each(|(r, dc)| *r -= lambda * dc);
    }
    0.5 * w.iter().map(|v| v * v).sum::<f64>() + lambda * data
}

fn solve_smooth(
    loss: ExampleLoss<'_>,
    h: &FeatureMatrix,
    labels: &[u16],
    classes: usize,
    config: &LossConfig,
    init: Option<&LinearModel>,
) -> Result<(LinearModel, SolveReport)> {
    config.validate()?;
    check_labels(labels, classes, h.rows())?;
    let features = h.columns();
    let mut x0 = vec![0.0; features * classes + classes];
    if let Some(m) = init {
        if m.classes != classes || m.features > features {
            return Err(CteError::DimensionMismatch {
                expected: format!("initial model with {classes} classes and at most {features} features"),
                found: format!("{} classes, {} features", m.classes, m.features),
            });
        }
        x0[..m.weights.len()].copy_from_slice(&m.weights);
        // The objective is invariant to a common shift of all biases; pin the
        // mean to zero so the minimizer is unique.
        let mean = m.biases.iter().sum::<f64>() / classes as f64;
        for (dst, b) in x0[features * classes..].iter_mut().zip(&m.biases) {
            *dst = b - mean;
        }
    }
    let lambda = config.regularization;
    let result = optim::minimize(
        |x, g| smooth_objective(loss, h, labels, classes, lambda, x, g),
        x0,
        &LbfgsOptions {
            memory: 10,
            gradient_tolerance: config.tolerance,
            max_iterations: config.max_iterations,
        },
    );
    let mut weights = result.x;
    let biases = weights.split_off(features * classes);
    Ok((
        LinearModel {
            classes,
            features,
            weights,
            biases,
        },
        SolveReport {
            converged: result.converged,
            iterations: result.iterations,
            objective: result.value,
            certificate: result.gradient_norm,
        },
    ))
}

/// Minimizes `1/2 ||W||^2 - lambda * sum_i log softmax(s_i)[y_i]`.
pub fn solve_softmax(
    h: &FeatureMatrix,
    labels: &[u16],
    classes: usize,
    config: &LossConfig,
    init: Option<&LinearModel>,
) -> Result<(LinearModel, SolveReport)> {
    solve_smooth(ExampleLoss::Softmax, h, labels, classes, config, init)
}

/// Minimizes the softmax objective with the distillation blend as data term.
pub fn solve_distill(
    h: &FeatureMatrix,
    labels: &[u16],
    teacher: &TeacherSoftLabels,
    config: &LossConfig,
    init: Option<&LinearModel>,
) -> Result<(LinearModel, SolveReport)> {
    teacher.validate()?;
    if teacher.rows != h.rows() {
        return Err(CteError::DimensionMismatch {
            expected: format!("{} teacher rows", h.rows()),
            found: format!("{}", teacher.rows),
        });
    }
    let loss = ExampleLoss::Distill {
        teacher,
        mix: config.distill_mix,
        temperature: config.distill_temperature,
    };
    solve_smooth(loss, h, labels, teacher.classes, config, init)
}

/// Value of the softmax or distillation objective at `model`.
pub fn smooth_objective_value(
    h: &FeatureMatrix,
    labels: &[u16],
    model: &LinearModel,
    config: &LossConfig,
    teacher: Option<&TeacherSoftLabels>,
) -> Result<(f64, Vec<f64>)> {
    let loss = match (config.kind, teacher) {
        (LossKind::SoftmaxDistill, Some(t)) => ExampleLoss::Distill {
            teacher: t,
            mix: config.distill_mix,
            temperature: config.distill_temperature,
        },
        (LossKind::SoftmaxDistill, None) => {
            return Err(CteError::InvalidConfig("distillation needs teacher soft labels".into()))
        }
        _ => ExampleLoss::Softmax,
    };
    let mut x = model.weights.clone();
    x.extend_from_slice(&model.biases);
    let mut g = vec![0.0; x.len()];
    let v = smooth_objective(loss, h, labels, model.classes, config.regularization, &x, &mut g);
    Ok((v, g))
}

/// One-vs-all binary labels `y_{i,c} = 2 delta(y_i, c) - 1`.
fn binary_labels(labels: &[u16], class: usize) -> Vec<f64> {
    labels
        .iter()
        .map(|&l| if l as usize == class + 1 { 1.0 } else { -1.0 })
        .collect()
}

/// Result of one binary SVM program.
#[derive(Debug, Clone)]
pub struct BinarySvm {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub alphas: Vec<f64>,
    pub primal: f64,
    pub dual: f64,
    pub sweeps: usize,
}

impl BinarySvm {
    /// Duality gap; bounds the distance of `primal` from the optimum.
    pub fn gap(&self) -> f64 {
        self.primal - self.dual
    }
}

struct SvmProblem<'a> {
    h: &'a FeatureMatrix,
    y: Vec<f64>,
    /// `||x_i||^2 + B^2`, the diagonal of the augmented Gram matrix.
    q: Vec<f64>,
    lambda: f64,
    bias_feature: f64,
}

impl SvmProblem<'_> {
    #[inline]
    fn margin(&self, i: usize, w: &[f64], w0: f64) -> f64 {
        let mut m = w0 * self.bias_feature;
        self.h.for_each_in_row(i, |f, v| m += w[f] * v);
        m
    }

    fn primal(&self, w: &[f64], w0: f64) -> f64 {
        let hinge: f64 = (0..self.h.rows())
            .map(|i| (1.0 - self.y[i] * self.margin(i, w, w0)).max(0.0))
            .sum();
        0.5 * (w.iter().map(|v| v * v).sum::<f64>() + w0 * w0) + self.lambda * hinge
    }

    fn dual(&self, alphas: &[f64], w: &[f64], w0: f64) -> f64 {
        alphas.iter().sum::<f64>() - 0.5 * (w.iter().map(|v| v * v).sum::<f64>() + w0 * w0)
    }
}

/// Solves one binary L1-loss SVM by dual coordinate ascent.
///
/// The bias enters as the weight `w0` of a constant feature of value `B`, so
/// the score is `w . x - T` with `T = -B w0` and the bias pays `1/2 (T / B)^2`.
/// Sweeps stop once the duality gap is at most `tol`.
pub fn solve_binary_svm(
    h: &FeatureMatrix,
    y: Vec<f64>,
    row_norms_sq: &[f64],
    lambda: f64,
    bias_feature: f64,
    tol: f64,
    max_sweeps: usize,
    seed: u64,
) -> BinarySvm {
    let n = h.rows();
    let b2 = bias_feature * bias_feature;
    let problem = SvmProblem {
        h,
        y,
        q: row_norms_sq.iter().map(|q| q + b2).collect(),
        lambda,
        bias_feature,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut alphas = vec![0.0; n];
    let mut w = vec![0.0; h.columns()];
    let mut w0 = 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    let mut primal = problem.primal(&w, w0);
    let mut dual = 0.0;
    let mut sweeps = 0;

    while primal - dual > tol && sweeps < max_sweeps {
        sweeps += 1;
        order.shuffle(&mut rng);
        for &i in &order {
            let yi = problem.y[i];
            let g = yi * problem.margin(i, &w, w0) - 1.0;
            let a = alphas[i];
            let new = if problem.q[i] > 0.0 {
                (a - g / problem.q[i]).clamp(0.0, lambda)
            } else {
                lambda
            };
            if new != a {
                let d = (new - a) * yi;
                h.for_each_in_row(i, |f, v| w[f] += d * v);
                w0 += d * bias_feature;
                alphas[i] = new;
            }
        }
        // Rebuild w from alphas so that the dual value is exact, not drifted.
        w.iter_mut().for_each(|v| *v = 0.0);
        w0 = 0.0;
        for (i, &a) in alphas.iter().enumerate() {
            if a != 0.0 {
                let d = a * problem.y[i];
                h.for_each_in_row(i, |f, v| w[f] += d * v);
                w0 += d * bias_feature;
            }
        }
        primal = problem.primal(&w, w0);
        dual = problem.dual(&alphas, &w, w0);
    }

    BinarySvm {
        weights: w,
        bias: -bias_feature * w0,
        alphas,
        primal,
        dual,
        sweeps,
    }
}

/// Sum of `C` one-vs-all programs
/// `1/2 ||W_c||^2 + 1/2 (T^c / B)^2 + lambda * sum_i max(1 - y_{i,c} s_i^c, 0)`.
///
/// The report's certificate is the largest per-program duality gap.
pub fn solve_svm(
    h: &FeatureMatrix,
    labels: &[u16],
    classes: usize,
    config: &LossConfig,
) -> Result<(LinearModel, SolveReport, Vec<BinarySvm>)> {
    config.validate()?;
    if classes < 2 {
        return Err(CteError::InvalidConfig(
            "the SVM loss needs at least two classes".into(),
        ));
    }
    check_labels(labels, classes, h.rows())?;
    let norms = h.row_norms_sq();
    let programs: Vec<BinarySvm> = (0..classes)
        .into_par_iter()
        .map(|c| {
            solve_binary_svm(
                h,
                binary_labels(labels, c),
                &norms,
                config.regularization,
                config.svm_bias_feature,
                config.tolerance,
                config.max_iterations,
                config.seed.wrapping_add(c as u64),
            )
        })
        .collect();

    let features = h.columns();
    let mut model = LinearModel::zeros(classes, features);
    for (c, p) in programs.iter().enumerate() {
        for (f, &v) in p.weights.iter().enumerate() {
            model.weights[f * classes + c] = v;
        }
        model.biases[c] = p.bias;
    }
    let worst = programs.iter().map(BinarySvm::gap).fold(0.0, f64::max);
    let report = SolveReport {
        converged: worst <= config.tolerance,
        iterations: programs.iter().map(|p| p.sweeps).max().unwrap_or(0),
        objective: programs.iter().map(|p| p.primal).sum(),
        certificate: worst,
    };
    Ok((model, report, programs))
}

/// SVM objective summed over the one-vs-all programs, bias penalty included.
pub fn svm_objective(h: &FeatureMatrix, labels: &[u16], model: &LinearModel, lambda: f64, bias_feature: f64) -> f64 {
    let s = model.scores(h);
    let c = model.classes;
    let hinge: f64 = s
        .chunks(c)
        .zip(labels)
        .map(|(row, &l)| {
            row.iter()
                .enumerate()
                .map(|(k, &sk)| {
                    let y = if k + 1 == l as usize { 1.0 } else { -1.0 };
                    (1.0 - y * sk).max(0.0)
                })
                .sum::<f64>()
        })
        .sum();
    let bias: f64 = model.biases.iter().map(|t| (t / bias_feature).powi(2)).sum();
    0.5 * (model.weight_norm_sq() + bias) + lambda * hinge
}

/// Dispatches to the solver selected by `config.kind`.
pub fn solve(
    h: &FeatureMatrix,
    labels: &[u16],
    classes: usize,
    config: &LossConfig,
    teacher: Option<&TeacherSoftLabels>,
    init: Option<&LinearModel>,
) -> Result<(LinearModel, SolveReport)> {
    match config.kind {
        LossKind::Svm => solve_svm(h, labels, classes, config).map(|(m, r, _)| (m, r)),
        LossKind::Softmax => solve_softmax(h, labels, classes, config, init),
        LossKind::SoftmaxDistill => {
            let t = teacher.ok_or_else(|| CteError::InvalidConfig("distillation needs teacher soft labels".into()))?;
            solve_distill(h, labels, t, config, init)
        }
    }
}

/// Objective value of `model` under `config`.
pub fn objective(
    h: &FeatureMatrix,
    labels: &[u16],
    model: &LinearModel,
    config: &LossConfig,
    teacher: Option<&TeacherSoftLabels>,
) -> Result<f64> {
    match config.kind {
        LossKind::Svm => Ok(svm_objective(
            h,
            labels,
            model,
            config.regularization,
            config.svm_bias_feature,
        )),
        _ => smooth_objective_value(h, labels, model, config, teacher).map(|(v, _)| v),
    }
}

/// Loss gradients `g_i^c = dl_i / ds_i^c` at the current solution.
pub fn loss_gradients(
    model: &LinearModel,
    h: &FeatureMatrix,
    labels: &[u16],
    config: &LossConfig,
    teacher: Option<&TeacherSoftLabels>,
) -> Result<GradientMatrix> {
    if model.features != h.columns() {
        return Err(CteError::DimensionMismatch {
            expected: format!("{} features", h.columns()),
            found: format!("{} features", model.features),
        });
    }
    check_labels(labels, model.classes, h.rows())?;
    let scores = model.scores(h);
    gradients_from_scores(&scores, labels, model.classes, config, teacher)
}

/// Loss gradients from a row-major `N x C` score matrix.
pub fn gradients_from_scores(
    scores: &[f64],
    labels: &[u16],
    classes: usize,
    config: &LossConfig,
    teacher: Option<&TeacherSoftLabels>,
) -> Result<GradientMatrix> {
    let n = labels.len();
    if scores.len() != n * classes {
        return Err(CteError::DimensionMismatch {
            expected: format!("{} scores", n * classes),
            found: format!("{}", scores.len()),
        });
    }
    let mut g = GradientMatrix::zeros(n, classes);
    match config.kind {
        LossKind::Svm => {
            for (i, (row, &l)) in scores.chunks(classes).zip(labels).enumerate() {
                for (c, &s) in row.iter().enumerate() {
                    let y = if c + 1 == l as usize { 1.0 } else { -1.0 };
                    if 1.0 - y * s > 0.0 {
                        g.data[i * classes + c] = -y;
                    }
                }
            }
        }
        LossKind::Softmax | LossKind::SoftmaxDistill => {
            let loss = if config.kind == LossKind::Softmax {
                ExampleLoss::Softmax
            } else {
                let t =
                    teacher.ok_or_else(|| CteError::InvalidConfig("distillation needs teacher soft labels".into()))?;
                if t.rows != n || t.classes != classes {
                    return Err(CteError::DimensionMismatch {
                        expected: format!("{n}x{classes} teacher"),
                        found: format!("{}x{}", t.rows, t.classes),
                    });
                }
                ExampleLoss::Distill {
                    teacher: t,
                    mix: config.distill_mix,
                    temperature: config.distill_temperature,
                }
            };
            let mut scratch = vec![0.0; classes];
            for (i, (row, &l)) in scores.chunks(classes).zip(labels).enumerate() {
                loss.eval(i, l, row, &mut g.data[i * classes..(i + 1) * classes], &mut scratch);
            }
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_instance(n: usize, f: usize, classes: usize, seed: u64) -> (FeatureMatrix, Vec<u16>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..f)
                    .map(|_| {
                        if rng.gen_bool(0.3) {
                            rng.gen_range(0..5) as f64
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        let labels = (0..n).map(|i| (i % classes) as u16 + 1).collect();
        (
            FeatureMatrix::from_block(FeatureBlock::from_dense(&rows).unwrap()),
            labels,
        )
    }

    #[test]
    fn column_normalization() {
        let mut b = FeatureBlock::from_dense(&[vec![2.0, 1.0, 0.0], vec![0.0, 1.0, 0.0], vec![2.0, 0.0, 0.0]]).unwrap();
        let scales = normalize_columns(&mut b);
        assert_eq!(scales, vec![2.0, 1.0, 1.0]);
        assert_eq!((b.get(0, 0), b.get(1, 0), b.get(2, 0)), (1.0, 0.0, 1.0));
        assert_eq!((b.get(0, 1), b.get(1, 1)), (1.0, 1.0));
    }

    #[test]
    fn normalized_columns_have_unit_mean_over_nonzeros() {
        let (h, _) = random_instance(40, 12, 3, 5);
        let mut b = h.blocks()[0].clone();
        normalize_columns(&mut b);
        for c in 0..b.columns() {
            let vals: Vec<f64> = (0..b.rows()).map(|i| b.get(i, c)).filter(|&v| v != 0.0).collect();
            if !vals.is_empty() {
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                assert!((mean - 1.0).abs() < 1e-12, "column {c}: {mean}");
            }
        }
    }

    #[test]
    fn separable_pair() {
        let h = FeatureMatrix::from_block(FeatureBlock::from_dense(&[vec![1.0], vec![-1.0]]).unwrap());
        let norms = h.row_norms_sq();
        let svm = solve_binary_svm(&h, vec![1.0, -1.0], &norms, 10.0, 1.0, 1e-9, 10_000, 1);
        assert!((svm.weights[0] - 1.0).abs() < 1e-6, "{svm:?}");
        assert!(svm.bias.abs() < 1e-6);
        assert!((svm.primal - 0.5).abs() < 1e-6);
    }

    #[test]
    fn svm_vanishing_regularization_weight() {
        let (h, labels) = random_instance(30, 6, 3, 2);
        let cfg = LossConfig {
            kind: LossKind::Svm,
            regularization: 1e-6,
            tolerance: 1e-9,
            ..LossConfig::default()
        };
        let (m, report, _) = solve_svm(&h, &labels, 3, &cfg).unwrap();
        assert!(report.converged);
        // Every weight is bounded by lambda times the summed example norms.
        assert!(m.weight_norm_sq().sqrt() < 1e-3);
        assert!(m.biases.iter().all(|t| t.abs() < 1e-4));
    }

    #[test]
    fn softmax_symmetric_single_example() {
        let h = FeatureMatrix::from_block(FeatureBlock::from_dense(&[vec![0.0, 0.0]]).unwrap());
        let (m, r) = solve_softmax(&h, &[1], 2, &LossConfig::default(), None).unwrap();
        assert!(r.converged);
        assert!(m.weights.iter().all(|&w| w == 0.0));
        // The label pulls the biases apart; the gauge keeps them centered.
        assert!((m.biases[0] + m.biases[1]).abs() < 1e-9);
    }

    #[test]
    fn softmax_zero_features_no_label_preference() {
        // Two examples with opposite labels and no features: biases equal, p = 1/2.
        let h = FeatureMatrix::from_block(FeatureBlock::from_dense(&[vec![0.0], vec![0.0]]).unwrap());
        let (m, _) = solve_softmax(&h, &[1, 2], 2, &LossConfig::default(), None).unwrap();
        assert!(m.weights.iter().all(|&w| w == 0.0));
        assert!((m.biases[0] - m.biases[1]).abs() < 1e-9);
        let mut p = [0.0; 2];
        softmax(&m.scores(&h)[..2], 1.0, &mut p);
        assert!((p[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn softmax_gradients_sum_to_zero() {
        let (h, labels) = random_instance(20, 8, 4, 3);
        let cfg = LossConfig::default();
        let (m, _) = solve_softmax(&h, &labels, 4, &cfg, None).unwrap();
        let g = loss_gradients(&m, &h, &labels, &cfg, None).unwrap();
        for i in 0..g.rows {
            assert!(g.row(i).iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn svm_gradient_zero_for_non_support_vectors() {
        let scores = vec![2.0, -3.0, 0.5, 0.2];
        let cfg = LossConfig {
            kind: LossKind::Svm,
            ..LossConfig::default()
        };
        let g = gradients_from_scores(&scores, &[1, 2], 2, &cfg, None).unwrap();
        assert_eq!(g.row(0), &[0.0, 0.0]);
        assert_eq!(g.row(1), &[1.0, -1.0]);
    }

    #[test]
    fn distill_with_pure_label_mix_is_softmax() {
        let scores = vec![0.3, -1.0, 2.0, 0.1, 0.0, -0.4];
        let labels = [3u16, 1];
        let teacher = TeacherSoftLabels::new(2, 3, vec![0.2, 0.3, 0.5, 0.6, 0.3, 0.1], None).unwrap();
        let soft = gradients_from_scores(&scores, &labels, 3, &LossConfig::default(), None).unwrap();
        let cfg = LossConfig {
            kind: LossKind::SoftmaxDistill,
            distill_mix: 1.0,
            distill_temperature: 2.0,
            ..LossConfig::default()
        };
        let dist = gradients_from_scores(&scores, &labels, 3, &cfg, Some(&teacher)).unwrap();
        assert_eq!(soft, dist);
    }

    #[test]
    fn distill_one_hot_teacher_equals_softmax_loss() {
        let scores = vec![0.3, -1.0, 2.0, 0.1, 0.0, -0.4];
        let labels = [3u16, 1];
        let teacher = TeacherSoftLabels::new(2, 3, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0], None).unwrap();
        let hard = distill_loss(&scores, &labels, &teacher, 1.0, 1.0).unwrap();
        for mix in [0.0, 0.3, 1.0] {
            let v = distill_loss(&scores, &labels, &teacher, mix, 1.0).unwrap();
            assert!((v - hard).abs() < 1e-12);
        }
    }

    #[test]
    fn distill_matching_teacher_has_zero_kl() {
        let scores = vec![0.3, -1.0, 2.0];
        let mut p = vec![0.0; 3];
        softmax(&scores, 1.0, &mut p);
        let teacher = TeacherSoftLabels::new(1, 3, p.iter().map(|&v| v as f32).collect(), None).unwrap();
        // f32 rounding of the teacher leaves a tiny KL.
        assert!(distill_loss(&scores, &[1], &teacher, 0.0, 1.0).unwrap().abs() < 1e-6);
    }

    #[test]
    fn teacher_file_roundtrip_and_validation() {
        let t = TeacherSoftLabels::new(2, 2, vec![0.25, 0.75, 1.0, 0.0], Some(3.0)).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(TeacherSoftLabels::read_from(&buf[..]).unwrap(), t);
        assert!(TeacherSoftLabels::read_from(&buf[..buf.len() - 1]).is_err());
        assert!(TeacherSoftLabels::new(1, 2, vec![0.5, 0.6], None).is_err());
        assert!(TeacherSoftLabels::new(1, 2, vec![1.5, -0.5], None).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = LossConfig {
            regularization: 0.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossConfig {
            distill_mix: 1.5,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn svm_needs_two_classes() {
        let (h, _) = random_instance(4, 3, 1, 0);
        let cfg = LossConfig {
            kind: LossKind::Svm,
            ..LossConfig::default()
        };
        assert!(solve_svm(&h, &[1, 1, 1, 1], 1, &cfg).is_err());
    }

    fn finite_difference_check(cfg: &LossConfig, teacher: Option<&TeacherSoftLabels>) {
        let (h, labels) = random_instance(12, 5, 3, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = LinearModel::zeros(3, 5);
        m.weights.iter_mut().for_each(|w| *w = rng.gen_range(-0.5..0.5));
        m.biases.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
        let (_, g) = smooth_objective_value(&h, &labels, &m, cfg, teacher).unwrap();
        let eps = 1e-6;
        for k in 0..g.len() {
            let mut plus = m.clone();
            let mut minus = m.clone();
            let nw = m.weights.len();
            if k < nw {
                plus.weights[k] += eps;
                minus.weights[k] -= eps;
            } else {
                plus.biases[k - nw] += eps;
                minus.biases[k - nw] -= eps;
            }
            let fp = smooth_objective_value(&h, &labels, &plus, cfg, teacher).unwrap().0;
            let fm = smooth_objective_value(&h, &labels, &minus, cfg, teacher).unwrap().0;
            let fd = (fp - fm) / (2.0 * eps);
            let rel = (fd - g[k]).abs() / g[k].abs().max(1.0);
            assert!(rel <= 1e-5, "coordinate {k}: analytic {} vs numeric {fd}", g[k]);
        }
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        finite_difference_check(&LossConfig::default(), None);
    }

    #[test]
    fn distill_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let probs: Vec<f32> = (0..12)
            .flat_map(|_| {
                let raw: Vec<f32> = (0..3).map(|_| rng.gen_range(0.05f32..1.0)).collect();
                let z: f32 = raw.iter().sum();
                let mut p: Vec<f32> = raw.iter().map(|v| v / z).collect();
                p[2] = 1.0 - p[0] - p[1];
                p
            })
            .collect();
        let teacher = TeacherSoftLabels::new(12, 3, probs, None).unwrap();
        let cfg = LossConfig {
            kind: LossKind::SoftmaxDistill,
            distill_mix: 0.3,
            distill_temperature: 2.5,
            ..LossConfig::default()
        };
        finite_difference_check(&cfg, Some(&teacher));
    }

    #[test]
    fn softmax_starts_agree() {
        let (h, labels) = random_instance(30, 6, 3, 21);
        // Gradient norms much below this sit at the rounding level of an
        // objective near 20 and are not reliably reachable.
        let cfg = LossConfig {
            tolerance: 1e-7,
            ..LossConfig::default()
        };
        let (a, ra) = solve_softmax(&h, &labels, 3, &cfg, None).unwrap();
        let mut init = LinearModel::zeros(3, 6);
        init.weights
            .iter_mut()
            .enumerate()
            .for_each(|(k, w)| *w = (k as f64).sin());
        init.biases = vec![3.0, -1.0, 7.0];
        let (b, rb) = solve_softmax(&h, &labels, 3, &cfg, Some(&init)).unwrap();
        assert!(ra.converged && rb.converged, "{ra:?} {rb:?}");
        assert!((ra.objective - rb.objective).abs() <= 1e-9 * ra.objective.abs().max(1.0));
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn svm_certificate_bounds_objective() {
        let (h, labels) = random_instance(60, 8, 3, 13);
        let cfg = LossConfig {
            kind: LossKind::Svm,
            tolerance: 1e-6,
            max_iterations: 200_000,
            ..LossConfig::default()
        };
        let (m, report, programs) = solve_svm(&h, &labels, 3, &cfg).unwrap();
        assert!(report.converged, "{report:?}");
        let total = svm_objective(&h, &labels, &m, cfg.regularization, cfg.svm_bias_feature);
        assert!((total - report.objective).abs() < 1e-9 * total.max(1.0));
        let dual: f64 = programs.iter().map(|p| p.dual).sum();
        assert!(dual <= total + 1e-9);
        // No small perturbation of the solution beats the certified lower bound.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let mut p = m.clone();
            p.weights.iter_mut().for_each(|w| *w += rng.gen_range(-1e-2..1e-2));
            p.biases.iter_mut().for_each(|b| *b += rng.gen_range(-1e-2..1e-2));
            assert!(svm_objective(&h, &labels, &p, cfg.regularization, cfg.svm_bias_feature) >= dual - 1e-9);
        }
    }
}
