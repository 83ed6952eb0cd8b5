//! Table growth against loss gradients, alternating with global re-solves.
//!
//! Gradients enter the growth scores in fixed point: each `g_i^c` is rounded
//! to an integer number of ticks (`2^-32` unless the sample is large enough to
//! need a coarser unit). Every cell statistic is then an exact integer sum, so
//! scores do not depend on accumulation order or thread count, and the
//! threshold sweep agrees exactly with exhaustive enumeration.

use std::time::Instant;

use log::{debug, info, warn};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{argmax, ConvTable, Ensemble, ImageDims};
use crate::error::{CteError, Result};
use crate::losses::{
    self, gradients_from_scores, normalize_columns, FeatureBlock, FeatureMatrix, GradientMatrix, LinearModel,
    LossConfig, SolveReport, TeacherSoftLabels,
};
use crate::tensor::{prepare_batch, ChannelKind, ExtendedImage, PrepConfig, RawImage};
use crate::words::{
    step, valid_area_for_radius, BitFunction, BitKind, Fern, LongTree, Region, TreeNode, WordCalculator,
    DEFAULT_PATCH_SIZE, MAX_WORD_BITS,
};

/// Thresholds kept for exact re-scoring at the end of a sweep.
const NEAR_TIE_CAP: usize = 16;

/// `g_i^c = 1/|{i: y_i = c}|` for members of class `c`, `-1/|{i: y_i != c}|` otherwise.
pub fn init_gradients(labels: &[u16], classes: usize) -> Result<GradientMatrix> {
    let mut counts = vec![0usize; classes];
    for &l in labels {
        if l == 0 || l as usize > classes {
            return Err(CteError::InvalidLabels(format!("label {l} outside 1..={classes}")));
        }
        counts[l as usize - 1] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(CteError::EmptyClass(c + 1));
    }
    let n = labels.len();
    let mut g = GradientMatrix::zeros(n, classes);
    for (i, &l) in labels.iter().enumerate() {
        for (c, &pos) in counts.iter().enumerate() {
            g.data[i * classes + c] = if l as usize == c + 1 {
                1.0 / pos as f64
            } else {
                -1.0 / (n - pos) as f64
            };
        }
    }
    Ok(g)
}

/// Gradients in integer ticks of `unit`.
#[derive(Debug, Clone)]
struct Ticks {
    classes: usize,
    unit: f64,
    data: Vec<i64>,
}

impl Ticks {
    fn new(g: &GradientMatrix, patches_per_image: usize) -> Result<Self> {
        if let Some(v) = g.data.iter().find(|v| !v.is_finite()) {
            return Err(CteError::InvalidConfig(format!("non-finite gradient {v}")));
        }
        let max = g.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let total = (g.rows * patches_per_image).max(1) as f64;
        let mut bits = 32;
        if max > 0.0 {
            // Keep every cell sum below 2^62.
            bits = bits.min(61 - (max * total).log2().ceil() as i32);
        }
        let factor = 2f64.powi(bits);
        Ok(Self {
            classes: g.classes,
            unit: 1.0 / factor,
            data: g.data.iter().map(|v| (v * factor).round() as i64).collect(),
        })
    }

    #[inline]
    fn row(&self, i: usize) -> &[i64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }
}

/// The images, aggregation area and patch radius tables are grown on.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub images: &'a [ExtendedImage],
    pub area: Region,
    pub patch_radius: usize,
}

impl<'a> Sample<'a> {
    pub fn new(images: &'a [ExtendedImage], area: Region, patch_radius: usize) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| CteError::InvalidConfig("the training sample is empty".into()))?;
        if let Some(img) = images
            .iter()
            .find(|im| (im.width(), im.height(), im.kinds()) != (first.width(), first.height(), first.kinds()))
        {
            return Err(CteError::DimensionMismatch {
                expected: format!("{}x{}x{}", first.width(), first.height(), first.depth()),
                found: format!("{}x{}x{}", img.width(), img.height(), img.depth()),
            });
        }
        let valid = valid_area_for_radius(patch_radius, first.width(), first.height())?;
        if area.is_empty() || !area.is_subset_of(&valid) {
            return Err(CteError::DimensionMismatch {
                expected: format!("nonempty area inside {valid:?}"),
                found: format!("{area:?}"),
            });
        }
        Ok(Self {
            images,
            area,
            patch_radius,
        })
    }
}

/// Words of the calculator under construction for every `(image, pixel)`
/// patch, with the subset of patches currently being grown.
///
/// Patch ids run image-major, then row-major over the area.
#[derive(Debug, Clone)]
pub struct PatchWordCache<'a> {
    images: &'a [ExtendedImage],
    area: Region,
    words: Vec<u16>,
    bits: usize,
    active: Vec<u32>,
}

impl<'a> PatchWordCache<'a> {
    /// An empty-word cache over all patches.
    pub fn new(sample: &Sample<'a>) -> Self {
        let n = sample.images.len() * sample.area.len();
        Self {
            images: sample.images,
            area: sample.area,
            words: vec![0; n],
            bits: 0,
            active: (0..n as u32).collect(),
        }
    }

    /// A cache holding the full words of `calc`.
    pub fn from_calculator(sample: &Sample<'a>, calc: &WordCalculator) -> Self {
        let mut cache = Self::new(sample);
        let a = sample.area;
        let mut row = vec![0u32; a.width];
        for (i, img) in sample.images.iter().enumerate() {
            for r in 0..a.height {
                calc.eval_row(img, a.x0, a.y0 + r, &mut row);
                let start = i * a.len() + r * a.width;
                for (dst, &w) in cache.words[start..start + a.width].iter_mut().zip(&row) {
                    *dst = w as u16;
                }
            }
        }
        cache.bits = calc.word_bits();
        cache
    }

    pub fn word_bits(&self) -> usize {
        self.bits
    }

    pub fn words(&self) -> &[u16] {
        &self.words
    }

    pub fn patches_per_image(&self) -> usize {
        self.area.len()
    }

    pub fn active(&self) -> &[u32] {
        &self.active
    }

    #[inline]
    fn image_of(&self, id: u32) -> usize {
        id as usize / self.area.len()
    }

    #[inline]
    fn locate(&self, id: u32) -> (&ExtendedImage, usize, usize) {
        let per = self.area.len();
        let r = id as usize % per;
        (
            &self.images[id as usize / per],
            self.area.x0 + r % self.area.width,
            self.area.y0 + r / self.area.width,
        )
    }

    /// The candidate's bit on every active patch.
    pub fn bits_of(&self, f: &BitFunction) -> Vec<u8> {
        self.active
            .iter()
            .map(|&id| {
                let (img, x, y) = self.locate(id);
                f.eval(img, x, y) as u8
            })
            .collect()
    }

    /// The candidate's underlying measurement on every active patch.
    pub fn values_of(&self, f: &BitFunction) -> Vec<f32> {
        self.active
            .iter()
            .map(|&id| {
                let (img, x, y) = self.locate(id);
                f.underlying(img, x, y)
            })
            .collect()
    }

    /// Appends `f` as the next bit of every active patch's word.
    pub fn push_bit(&mut self, f: &BitFunction) -> Result<()> {
        if self.bits >= MAX_WORD_BITS {
            return Err(CteError::InvalidConfig(format!(
                "words are limited to {MAX_WORD_BITS} bits"
            )));
        }
        let bits = self.bits_of(f);
        for (&id, &b) in self.active.iter().zip(&bits) {
            self.words[id as usize] |= (b as u16) << self.bits;
        }
        self.bits += 1;
        Ok(())
    }

    /// Overwrites bit `pos` of every active patch's word with `f`.
    fn set_bit(&mut self, pos: usize, f: &BitFunction) {
        let bits = self.bits_of(f);
        let mask = !(1u16 << pos);
        for (&id, &b) in self.active.iter().zip(&bits) {
            let w = &mut self.words[id as usize];
            *w = (*w & mask) | ((b as u16) << pos);
        }
    }

    /// A copy whose active words drop bit `pos`, higher bits moving down.
    fn without_bit(&self, pos: usize) -> Self {
        let mut c = self.clone();
        let low = (1u16 << pos) - 1;
        for &id in &self.active {
            let w = self.words[id as usize];
            c.words[id as usize] = (w & low) | ((w >> (pos + 1)) << pos);
        }
        c.bits -= 1;
        c
    }

    fn set_active(&mut self, active: Vec<u32>, bits: usize) {
        self.active = active;
        self.bits = bits;
    }
}

/// Per-cell gradient sums and counts over the active patches, cells being
/// the current words.
struct Cells {
    classes: usize,
    unit: f64,
    sum: Vec<i64>,
    count: Vec<i64>,
    present: Vec<u32>,
}

impl Cells {
    fn new(cache: &PatchWordCache<'_>, ticks: &Ticks) -> Self {
        let classes = ticks.classes;
        let n = 1usize << cache.bits;
        let mut sum = vec![0i64; n * classes];
        let mut count = vec![0i64; n];
        for &id in &cache.active {
            let b = cache.words[id as usize] as usize;
            count[b] += 1;
            for (s, &t) in sum[b * classes..(b + 1) * classes]
                .iter_mut()
                .zip(ticks.row(cache.image_of(id)))
            {
                *s += t;
            }
        }
        let present = (0..n as u32).filter(|&b| count[b as usize] > 0).collect();
        Self {
            classes,
            unit: ticks.unit,
            sum,
            count,
            present,
        }
    }

    #[inline]
    fn cell_sum(&self, b: usize) -> &[i64] {
        &self.sum[b * self.classes..(b + 1) * self.classes]
    }

    /// `sum_b sum_c |S_b^c|`.
    fn r_score(&self) -> f64 {
        let total: i128 = self.sum.iter().map(|&s| (s as i128).abs()).sum();
        total as f64 * self.unit
    }

    /// Sums over the active patches whose bit is 1.
    fn ones(&self, cache: &PatchWordCache<'_>, ticks: &Ticks, bits: &[u8]) -> (Vec<i64>, Vec<i64>) {
        let mut s1 = vec![0i64; self.sum.len()];
        let mut n1 = vec![0i64; self.count.len()];
        for (&id, &bit) in cache.active.iter().zip(bits) {
            if bit != 0 {
                let b = cache.words[id as usize] as usize;
                n1[b] += 1;
                for (s, &t) in s1[b * self.classes..(b + 1) * self.classes]
                    .iter_mut()
                    .zip(ticks.row(cache.image_of(id)))
                {
                    *s += t;
                }
            }
        }
        (s1, n1)
    }

    /// `sum_c |S1_b^c n_b - n1_b S_b^c|`, which is `n_b` times the cell's
    /// centered score.
    #[inline]
    fn cell_delta(&self, b: usize, s1: &[i64], n1: i64) -> i128 {
        let n = self.count[b] as i128;
        let n1 = n1 as i128;
        s1.iter()
            .zip(self.cell_sum(b))
            .map(|(&a, &s)| (a as i128 * n - n1 * s as i128).abs())
            .sum()
    }

    /// The centered score of a split given its one-side sums, summed over
    /// cells in ascending order.
    fn delta_score(&self, s1: &[i64], n1: &[i64]) -> f64 {
        let c = self.classes;
        let mut total = 0.0f64;
        for &b in &self.present {
            let b = b as usize;
            total += self.cell_delta(b, &s1[b * c..(b + 1) * c], n1[b]) as f64 / self.count[b] as f64;
        }
        total * self.unit
    }

    fn delta_of_bits(&self, cache: &PatchWordCache<'_>, ticks: &Ticks, bits: &[u8]) -> f64 {
        let (s1, n1) = self.ones(cache, ticks, bits);
        self.delta_score(&s1, &n1)
    }

    /// Best threshold for the given underlying values of the active patches.
    fn sweep(&self, cache: &PatchWordCache<'_>, ticks: &Ticks, values: &[f32]) -> (f32, f64) {
        // Descending value, then ascending position, packed into one sort key.
        let mut order: Vec<u64> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| ((!order_key(v) as u64) << 32) | i as u64)
            .collect();
        order.sort_unstable();
        let pos = |k: usize| (order[k] & u32::MAX as u64) as usize;
        let Some(first) = order.first().map(|_| pos(0)) else {
            return (0.0, 0.0);
        };

        let c = self.classes;
        let mut s1 = vec![0i64; self.sum.len()];
        let mut n1 = vec![0i64; self.count.len()];
        let mut quantized = vec![0i128; self.count.len()];
        let mut total: i128 = 0;
        let slack_cells = 2 * self.present.len() as i128 + 2;
        let mut best: i128 = i128::MIN;
        // (quantized score, threshold, patches on the 1 side)
        let mut kept: Vec<(i128, f32, usize)> = Vec::new();

        // Cells touched by the current run of equal values.
        let mut dirty: Vec<usize> = Vec::new();
        let mut is_dirty = vec![false; self.count.len()];
        let mut k = 0;
        while k < order.len() {
            let v = values[pos(k)];
            while k < order.len() && values[pos(k)] == v {
                let b = self.add_patch(cache, ticks, pos(k), &mut s1, &mut n1);
                if !is_dirty[b] {
                    is_dirty[b] = true;
                    dirty.push(b);
                }
                k += 1;
            }
            for b in dirty.drain(..) {
                is_dirty[b] = false;
                let q = self.cell_delta(b, &s1[b * c..(b + 1) * c], n1[b]) / self.count[b] as i128;
                total += q - quantized[b];
                quantized[b] = q;
            }
            if k == order.len() {
                break;
            }
            let t = threshold_between(values[pos(k)], v);
            best = best.max(total);
            let slack = slack_cells + (best as f64 * 1e-12) as i128;
            if total >= best - slack {
                kept.retain(|&(q, _, _)| q >= best - slack);
                kept.push((total, t, k));
                if kept.len() > NEAR_TIE_CAP {
                    // Drop the weakest; among equals the lowest threshold goes.
                    let worst = (0..kept.len()).rev().min_by_key(|&j| kept[j].0).expect("nonempty");
                    kept.remove(worst);
                }
            }
        }

        if kept.is_empty() {
            return (values[first], 0.0);
        }
        // Exact scores of the survivors, replaying the sweep up to each one.
        // `kept` is in sweep order, so ties go to the higher threshold.
        s1.fill(0);
        n1.fill(0);
        let mut delta = vec![0i128; self.count.len()];
        let mut result = (kept[0].1, f64::NEG_INFINITY);
        let mut k = 0;
        for &(_, t, end) in &kept {
            while k < end {
                let b = self.add_patch(cache, ticks, pos(k), &mut s1, &mut n1);
                if !is_dirty[b] {
                    is_dirty[b] = true;
                    dirty.push(b);
                }
                k += 1;
            }
            for b in dirty.drain(..) {
                is_dirty[b] = false;
                delta[b] = self.cell_delta(b, &s1[b * c..(b + 1) * c], n1[b]);
            }
            let score = self.present.iter().fold(0.0f64, |acc, &b| {
                acc + delta[b as usize] as f64 / self.count[b as usize] as f64
            }) * self.unit;
            if score > result.1 {
                result = (t, score);
            }
        }
        result
    }

    /// Moves patch `pos` of the active list to the 1 side; returns its cell.
    #[inline]
    fn add_patch(
        &self,
        cache: &PatchWordCache<'_>,
        ticks: &Ticks,
        pos: usize,
        s1: &mut [i64],
        n1: &mut [i64],
    ) -> usize {
        let id = cache.active[pos];
        let b = cache.words[id as usize] as usize;
        n1[b] += 1;
        let c = self.classes;
        for (s, &t) in s1[b * c..(b + 1) * c].iter_mut().zip(ticks.row(cache.image_of(id))) {
            *s += t;
        }
        b
    }

    /// Column of the split score matrix: for each node-local word `z`, the
    /// score of the cells with that local word once split by `bits`.
    fn split_column(
        &self,
        cache: &PatchWordCache<'_>,
        ticks: &Ticks,
        bits: &[u8],
        shift: usize,
        node_bits: usize,
    ) -> Vec<f64> {
        let (s1, _) = self.ones(cache, ticks, bits);
        let c = self.classes;
        let mask = (1usize << node_bits) - 1;
        let mut col = vec![0i128; 1 << node_bits];
        for &b in &self.present {
            let b = b as usize;
            let v: i128 = s1[b * c..(b + 1) * c]
                .iter()
                .zip(self.cell_sum(b))
                .map(|(&a, &s)| (a as i128).abs() + (s as i128 - a as i128).abs())
                .sum();
            col[(b >> shift) & mask] += v;
        }
        col.iter().map(|&v| v as f64 * self.unit).collect()
    }
}

/// Maps `f32` to `u32` preserving `total_cmp` order.
#[inline]
fn order_key(v: f32) -> u32 {
    let b = v.to_bits();
    if b >> 31 == 1 {
        !b
    } else {
        b | 0x8000_0000
    }
}

/// A threshold `t` with `lo < t <= hi`, so that `step` maps `lo` to 0 and `hi` to 1.
pub fn threshold_between(lo: f32, hi: f32) -> f32 {
    debug_assert!(lo < hi);
    let mid = ((lo as f64 + hi as f64) * 0.5) as f32;
    if mid > lo {
        mid
    } else {
        hi
    }
}

/// `R(B) = sum_c sum_b |sum_{i,p: b_{i,p} = b} g_i^c|` over the sample.
pub fn score_r(calc: &WordCalculator, sample: &Sample<'_>, g: &GradientMatrix) -> Result<f64> {
    check_gradients(sample, g)?;
    let cache = PatchWordCache::from_calculator(sample, calc);
    let ticks = Ticks::new(g, cache.patches_per_image())?;
    Ok(Cells::new(&cache, &ticks).r_score())
}

/// The centered score of appending `candidate` to the cached words.
pub fn score_r_delta(cache: &PatchWordCache<'_>, candidate: &BitFunction, g: &GradientMatrix) -> Result<f64> {
    let ticks = Ticks::new(g, cache.patches_per_image())?;
    let cells = Cells::new(cache, &ticks);
    Ok(cells.delta_of_bits(cache, &ticks, &cache.bits_of(candidate)))
}

/// The threshold maximizing the centered score of `candidate`, found by one
/// sorted sweep over its underlying values. Ties go to the higher threshold.
pub fn optimal_threshold(
    candidate: &BitFunction,
    cache: &PatchWordCache<'_>,
    g: &GradientMatrix,
) -> Result<(f32, f64)> {
    if !candidate.kind().is_thresholded() {
        return Err(CteError::InvalidBitFunction(format!(
            "{:?} has no threshold",
            candidate.kind()
        )));
    }
    let ticks = Ticks::new(g, cache.patches_per_image())?;
    let cells = Cells::new(cache, &ticks);
    Ok(cells.sweep(cache, &ticks, &cache.values_of(candidate)))
}

fn check_gradients(sample: &Sample<'_>, g: &GradientMatrix) -> Result<()> {
    if g.rows != sample.images.len() {
        return Err(CteError::DimensionMismatch {
            expected: format!("{} gradient rows", sample.images.len()),
            found: format!("{}", g.rows),
        });
    }
    Ok(())
}

/// Chosen children of a tree split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitChoice {
    /// Candidate columns, one per child, in child order.
    pub columns: Vec<usize>,
    /// Child slot for every node-local word.
    pub directing: Vec<u8>,
    pub score: f64,
}

fn split_value(scores: &[f64], rows: usize, cols: usize, set: &[usize]) -> f64 {
    (0..rows)
        .map(|z| {
            set.iter()
                .map(|&j| scores[z * cols + j])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum()
}

/// Picks `q` columns of the row-major `rows x cols` score matrix maximizing
/// `sum_z max_{j in G} S(z, j)`: the best pair by exhaustive search, then
/// greedy additions. Each row is routed to its best chosen column.
pub fn choose_split(scores: &[f64], rows: usize, q: usize) -> Result<SplitChoice> {
    let cols = if rows == 0 { 0 } else { scores.len() / rows };
    if q == 0 || q > cols || q > u8::MAX as usize + 1 || rows * cols != scores.len() {
        return Err(CteError::InvalidConfig(format!(
            "cannot choose {q} children from {cols} candidates"
        )));
    }
    let mut set: Vec<usize> = Vec::with_capacity(q);
    if q == 1 {
        let mut best = (0, f64::NEG_INFINITY);
        for j in 0..cols {
            let v = split_value(scores, rows, cols, &[j]);
            if v > best.1 {
                best = (j, v);
            }
        }
        set.push(best.0);
    } else {
        let mut best = ((0, 1), f64::NEG_INFINITY);
        for a in 0..cols {
            for b in a + 1..cols {
                let v = split_value(scores, rows, cols, &[a, b]);
                if v > best.1 {
                    best = ((a, b), v);
                }
            }
        }
        set.extend([best.0 .0, best.0 .1]);
        while set.len() < q {
            let mut add = (usize::MAX, f64::NEG_INFINITY);
            for j in 0..cols {
                if set.contains(&j) {
                    continue;
                }
                set.push(j);
                let v = split_value(scores, rows, cols, &set);
                set.pop();
                if v > add.1 {
                    add = (j, v);
                }
            }
            set.push(add.0);
        }
    }
    let directing = (0..rows)
        .map(|z| {
            let mut best = 0;
            for k in 1..set.len() {
                if scores[z * cols + set[k]] > scores[z * cols + set[best]] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    Ok(SplitChoice {
        score: split_value(scores, rows, cols, &set),
        columns: set,
        directing,
    })
}

/// Stage sizes and split factors of a long tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeShape {
    pub stage_bits: Vec<usize>,
    pub split_factors: Vec<usize>,
}

impl TreeShape {
    pub fn word_bits(&self) -> usize {
        self.stage_bits.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.word_bits();
        if self.stage_bits.is_empty() || self.stage_bits.contains(&0) || k > MAX_WORD_BITS {
            return Err(CteError::InvalidConfig(format!(
                "tree stages {:?} must be positive and total at most {MAX_WORD_BITS} bits",
                self.stage_bits
            )));
        }
        if self.split_factors.len() + 1 != self.stage_bits.len()
            || self.split_factors.iter().any(|&q| q == 0 || q > 256)
        {
            return Err(CteError::InvalidConfig(format!(
                "{} stages need {} split factors in 1..=256, got {:?}",
                self.stage_bits.len(),
                self.stage_bits.len() - 1,
                self.split_factors
            )));
        }
        Ok(())
    }
}

/// How new tables are grown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrowthConfig {
    /// Candidates drawn per bit slot.
    pub candidates: usize,
    pub replacement_sweeps: usize,
    pub refinement_sweeps: usize,
    /// Inclusive range of the per-table number of enforced spatial get-bits.
    /// While enforcement is on, get-bits appear only in enforced slots;
    /// `0..=0` turns enforcement off.
    pub spatial_bits_min: usize,
    pub spatial_bits_max: usize,
    /// Bit function kinds the prior draws from.
    pub kinds: Vec<BitKind>,
    /// Fit thresholds by sweep; otherwise use the value at a random patch.
    pub optimal_thresholds: bool,
    /// Candidate pool size for tree splits.
    pub split_candidates: usize,
    pub seed: u64,
}

impl Default for GrowthConfig {
    fn default() -> Self {
        Self {
            candidates: 40,
            replacement_sweeps: 2,
            refinement_sweeps: 1,
            spatial_bits_min: 1,
            spatial_bits_max: 5,
            kinds: BitKind::ALL.to_vec(),
            optimal_thresholds: true,
            split_candidates: 64,
            seed: 0,
        }
    }
}

impl GrowthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidates == 0 || self.split_candidates == 0 {
            return Err(CteError::InvalidConfig("candidate counts must be at least 1".into()));
        }
        if self.spatial_bits_min > self.spatial_bits_max {
            return Err(CteError::InvalidConfig(format!(
                "spatial bit range {}..={} is empty",
                self.spatial_bits_min, self.spatial_bits_max
            )));
        }
        if self.kinds.is_empty() {
            return Err(CteError::InvalidConfig("no bit function kinds enabled".into()));
        }
        Ok(())
    }

    fn enforcement(&self) -> bool {
        self.spatial_bits_max > 0
    }
}

/// Uniform prior over bit functions compatible with the channel layout.
#[derive(Debug, Clone)]
pub struct BitPrior {
    radius: i8,
    kinds: Vec<BitKind>,
    appearance: Vec<u16>,
    integral: Vec<u16>,
    spatial: Vec<(u16, u8)>,
}

impl BitPrior {
    /// `exclude_get_bit` removes get-bits from ordinary draws, leaving them to
    /// [`BitPrior::draw_spatial`].
    pub fn new(image: &ExtendedImage, patch_radius: usize, kinds: &[BitKind], exclude_get_bit: bool) -> Result<Self> {
        let radius = i8::try_from(patch_radius)
            .map_err(|_| CteError::InvalidConfig(format!("patch radius {patch_radius} too large")))?;
        let channels = |f: fn(ChannelKind) -> bool| -> Vec<u16> {
            (0..image.depth())
                .filter(|&d| f(image.kind(d)))
                .map(|d| d as u16)
                .collect()
        };
        let appearance = channels(ChannelKind::is_appearance);
        let integral = channels(|k| k == ChannelKind::Integral);
        let spatial: Vec<(u16, u8)> = (0..image.depth())
            .filter_map(|d| match image.bit_width(d) {
                Some(w) if w > 0 => Some((d as u16, w as u8)),
                _ => None,
            })
            .collect();
        let mut enabled: Vec<BitKind> = Vec::new();
        for &k in kinds {
            let ok = match k {
                BitKind::OnePixel => !appearance.is_empty(),
                BitKind::TwoPixel => !appearance.is_empty() && radius > 0,
                BitKind::IntegralBit => !integral.is_empty() && radius > 0,
                BitKind::GetBit => !spatial.is_empty() && !exclude_get_bit,
            };
            if ok && !enabled.contains(&k) {
                enabled.push(k);
            }
        }
        if enabled.is_empty() {
            return Err(CteError::InvalidConfig(
                "no enabled bit function kind can be drawn for this channel layout".into(),
            ));
        }
        Ok(Self {
            radius,
            kinds: enabled,
            appearance,
            integral,
            spatial,
        })
    }

    pub fn has_spatial(&self) -> bool {
        !self.spatial.is_empty()
    }

    /// A random bit function; thresholds are left at 0.
    pub fn draw(&self, rng: &mut impl Rng) -> BitFunction {
        let r = self.radius;
        let kind = self.kinds[rng.gen_range(0..self.kinds.len())];
        match kind {
            BitKind::OnePixel => BitFunction::OnePixel {
                channel: self.appearance[rng.gen_range(0..self.appearance.len())],
                dx: rng.gen_range(-r..=r),
                dy: rng.gen_range(-r..=r),
                threshold: 0.0,
            },
            BitKind::TwoPixel => {
                let channel = self.appearance[rng.gen_range(0..self.appearance.len())];
                loop {
                    let o: [i8; 4] = std::array::from_fn(|_| rng.gen_range(-r..=r));
                    if (o[0], o[1]) != (o[2], o[3]) {
                        break BitFunction::TwoPixel {
                            channel,
                            dx1: o[0],
                            dy1: o[1],
                            dx2: o[2],
                            dy2: o[3],
                            threshold: 0.0,
                        };
                    }
                }
            }
            BitKind::IntegralBit => {
                let channel = self.integral[rng.gen_range(0..self.integral.len())];
                let mut span = || {
                    let a = rng.gen_range(-r..r);
                    let b = rng.gen_range(a + 1..=r);
                    (a, b)
                };
                let (x1, x2) = span();
                let (y1, y2) = span();
                BitFunction::IntegralBit {
                    channel,
                    x1,
                    y1,
                    x2,
                    y2,
                    threshold: 0.0,
                }
            }
            BitKind::GetBit => self
                .draw_spatial(rng)
                .expect("get-bit enabled only with spatial channels"),
        }
    }

    /// A random get-bit on a spatial channel.
    pub fn draw_spatial(&self, rng: &mut impl Rng) -> Option<BitFunction> {
        if self.spatial.is_empty() {
            return None;
        }
        let (channel, width) = self.spatial[rng.gen_range(0..self.spatial.len())];
        Some(BitFunction::GetBit {
            channel,
            bit: rng.gen_range(0..width),
        })
    }

    /// The incumbent and its one-pixel offset perturbations, channel held.
    pub fn perturbations(&self, f: &BitFunction) -> Vec<BitFunction> {
        let r = self.radius;
        let ok = |v: i8| (-r..=r).contains(&v);
        let grid = |x: i8, y: i8| -> Vec<(i8, i8)> {
            let mut out = Vec::with_capacity(9);
            for dy in -1..=1i8 {
                for dx in -1..=1i8 {
                    let (a, b) = (x.saturating_add(dx), y.saturating_add(dy));
                    if ok(a) && ok(b) {
                        out.push((a, b));
                    }
                }
            }
            out
        };
        let mut out = vec![*f];
        match *f {
            BitFunction::OnePixel {
                channel,
                dx,
                dy,
                threshold,
            } => {
                for (a, b) in grid(dx, dy) {
                    if (a, b) != (dx, dy) {
                        out.push(BitFunction::OnePixel {
                            channel,
                            dx: a,
                            dy: b,
                            threshold,
                        });
                    }
                }
            }
            BitFunction::TwoPixel {
                channel,
                dx1,
                dy1,
                dx2,
                dy2,
                threshold,
            } => {
                for (a, b) in grid(dx1, dy1) {
                    if (a, b) != (dx1, dy1) && (a, b) != (dx2, dy2) {
                        out.push(BitFunction::TwoPixel {
                            channel,
                            dx1: a,
                            dy1: b,
                            dx2,
                            dy2,
                            threshold,
                        });
                    }
                }
                for (a, b) in grid(dx2, dy2) {
                    if (a, b) != (dx2, dy2) && (a, b) != (dx1, dy1) {
                        out.push(BitFunction::TwoPixel {
                            channel,
                            dx1,
                            dy1,
                            dx2: a,
                            dy2: b,
                            threshold,
                        });
                    }
                }
            }
            BitFunction::IntegralBit {
                channel,
                x1,
                y1,
                x2,
                y2,
                threshold,
            } => {
                for (a, b) in grid(x1, y1) {
                    if (a, b) != (x1, y1) && a < x2 && b < y2 {
                        out.push(BitFunction::IntegralBit {
                            channel,
                            x1: a,
                            y1: b,
                            x2,
                            y2,
                            threshold,
                        });
                    }
                }
                for (a, b) in grid(x2, y2) {
                    if (a, b) != (x2, y2) && x1 < a && y1 < b {
                        out.push(BitFunction::IntegralBit {
                            channel,
                            x1,
                            y1,
                            x2: a,
                            y2: b,
                            threshold,
                        });
                    }
                }
            }
            BitFunction::GetBit { channel, bit } => {
                let width = self
                    .spatial
                    .iter()
                    .find(|&&(c, _)| c == channel)
                    .map_or(bit + 1, |&(_, w)| w);
                if bit > 0 {
                    out.push(BitFunction::GetBit { channel, bit: bit - 1 });
                }
                if bit + 1 < width {
                    out.push(BitFunction::GetBit { channel, bit: bit + 1 });
                }
            }
        }
        out
    }
}

/// Counts from replacement or refinement sweeps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepStats {
    pub evaluated: usize,
    pub accepted: usize,
    /// `(incumbent score, accepted score)` for every accepted change, each
    /// measured with the other bits of the node held fixed.
    pub improvements: Vec<(f64, f64)>,
}

/// A candidate plus the patch whose value serves as its threshold when
/// thresholds are not optimized.
type Draw = (BitFunction, u32);

struct Grower<'s, 'a> {
    ticks: &'s Ticks,
    prior: &'s BitPrior,
    config: &'s GrowthConfig,
    enforced: Vec<bool>,
    rng: ChaCha8Rng,
    _images: std::marker::PhantomData<&'a ()>,
}

impl<'s, 'a> Grower<'s, 'a> {
    fn draws(&mut self, spatial: bool, n: usize) -> Vec<Draw> {
        (0..n)
            .map(|_| {
                let f = if spatial {
                    self.prior
                        .draw_spatial(&mut self.rng)
                        .expect("enforcement needs spatial channels")
                } else {
                    self.prior.draw(&mut self.rng)
                };
                (f, self.rng.gen())
            })
            .collect()
    }

    fn score(
        &self,
        cells: &Cells,
        cache: &PatchWordCache<'a>,
        (f, patch): Draw,
        optimize_threshold: bool,
    ) -> (BitFunction, f64) {
        if !f.kind().is_thresholded() {
            return (f, cells.delta_of_bits(cache, self.ticks, &cache.bits_of(&f)));
        }
        let values = cache.values_of(&f);
        if optimize_threshold && self.config.optimal_thresholds {
            let (t, s) = cells.sweep(cache, self.ticks, &values);
            return (f.with_threshold(t), s);
        }
        let t = if optimize_threshold {
            values.get(patch as usize % values.len().max(1)).copied().unwrap_or(0.0)
        } else {
            f.threshold().unwrap_or(0.0)
        };
        let bits: Vec<u8> = values.iter().map(|&v| step(v, t) as u8).collect();
        (f.with_threshold(t), cells.delta_of_bits(cache, self.ticks, &bits))
    }

    /// Scores every draw; returns the best, ties going to the earliest.
    fn best(
        &self,
        cells: &Cells,
        cache: &PatchWordCache<'a>,
        draws: &[Draw],
        optimize_threshold: bool,
    ) -> (BitFunction, f64) {
        let scored: Vec<(BitFunction, f64)> = draws
            .par_iter()
            .map(|&d| self.score(cells, cache, d, optimize_threshold))
            .collect();
        scored
            .into_iter()
            .reduce(|a, b| if b.1 > a.1 { b } else { a })
            .expect("at least one candidate")
    }

    /// Appends `count` bits to the active words by forward selection.
    fn forward(&mut self, cache: &mut PatchWordCache<'a>, bits: &mut Vec<BitFunction>, count: usize) -> Result<()> {
        for _ in 0..count {
            let spatial = self.enforced[cache.bits];
            let draws = self.draws(spatial, self.config.candidates);
            let cells = Cells::new(cache, self.ticks);
            let (f, _) = self.best(&cells, cache, &draws, true);
            cache.push_bit(&f)?;
            bits.push(f);
        }
        Ok(())
    }

    /// Replacement (`refine == false`) or refinement sweeps over the node's
    /// bits from `frozen` on. The node's first bit sits at word position `start`.
    fn improve(
        &mut self,
        cache: &mut PatchWordCache<'a>,
        bits: &mut [BitFunction],
        start: usize,
        frozen: usize,
        sweeps: usize,
        refine: bool,
        stats: &mut SweepStats,
    ) {
        for _ in 0..sweeps {
            for k in frozen..bits.len() {
                let pos = start + k;
                let context = cache.without_bit(pos);
                let cells = Cells::new(&context, self.ticks);
                let incumbent = cells.delta_of_bits(&context, self.ticks, &context.bits_of(&bits[k]));
                let draws: Vec<Draw> = if refine {
                    self.prior.perturbations(&bits[k]).into_iter().map(|f| (f, 0)).collect()
                } else {
                    self.draws(self.enforced[pos], self.config.candidates)
                };
                stats.evaluated += draws.len();
                // Refinement keeps incumbent thresholds when sweeps are off.
                let (f, score) = self.best(&cells, &context, &draws, !refine || self.config.optimal_thresholds);
                if score > incumbent {
                    cache.set_bit(pos, &f);
                    bits[k] = f;
                    stats.accepted += 1;
                    stats.improvements.push((incumbent, score));
                }
            }
        }
    }

    fn grow_node(
        &mut self,
        cache: &mut PatchWordCache<'a>,
        mut bits: Vec<BitFunction>,
        target: usize,
        stats: &mut SweepStats,
    ) -> Result<Vec<BitFunction>> {
        let start = cache.bits - bits.len();
        let frozen = bits.len();
        self.forward(cache, &mut bits, target - frozen)?;
        let (r, f) = (self.config.replacement_sweeps, self.config.refinement_sweeps);
        self.improve(cache, &mut bits, start, frozen, r, false, stats);
        self.improve(cache, &mut bits, start, frozen, f, true, stats);
        Ok(bits)
    }
}

/// Enforced spatial slots: a count drawn uniformly from the configured range
/// (capped at `word_bits`), placed at uniformly drawn word positions.
fn draw_enforcement(config: &GrowthConfig, prior: &BitPrior, word_bits: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut slots = vec![false; word_bits];
    if config.enforcement() && prior.has_spatial() {
        let count = rng
            .gen_range(config.spatial_bits_min..=config.spatial_bits_max)
            .min(word_bits);
        for p in sample_indices(rng, word_bits, count).into_iter() {
            slots[p] = true;
        }
    }
    slots
}

/// Shape of the calculator a table grows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CalculatorShape {
    Fern { word_bits: usize },
    Tree(TreeShape),
}

impl CalculatorShape {
    pub fn word_bits(&self) -> usize {
        match self {
            CalculatorShape::Fern { word_bits } => *word_bits,
            CalculatorShape::Tree(t) => t.word_bits(),
        }
    }
}

/// A freshly grown calculator with the words it produces on the sample.
#[derive(Debug, Clone)]
pub struct GrownTable {
    pub calculator: WordCalculator,
    /// Full words per patch, image-major.
    pub words: Vec<u16>,
    pub enforced_spatial: usize,
    pub stats: SweepStats,
}

fn make_grower<'s, 'a>(
    sample: &Sample<'a>,
    ticks: &'s Ticks,
    prior: &'s BitPrior,
    config: &'s GrowthConfig,
    word_bits: usize,
    seed: u64,
) -> Grower<'s, 'a> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let _ = sample;
    let enforced = draw_enforcement(config, prior, word_bits, &mut rng);
    Grower {
        ticks,
        prior,
        config,
        enforced,
        rng,
        _images: std::marker::PhantomData,
    }
}

fn prior_for(sample: &Sample<'_>, config: &GrowthConfig) -> Result<BitPrior> {
    let exclude = config.enforcement();
    BitPrior::new(&sample.images[0], sample.patch_radius, &config.kinds, exclude)
        .or_else(|_| BitPrior::new(&sample.images[0], sample.patch_radius, &config.kinds, false))
}

/// Grows one table's calculator against `g`.
pub fn grow_table(
    sample: &Sample<'_>,
    g: &GradientMatrix,
    shape: &CalculatorShape,
    config: &GrowthConfig,
    seed: u64,
) -> Result<GrownTable> {
    config.validate()?;
    check_gradients(sample, g)?;
    let k = shape.word_bits();
    if k == 0 || k > MAX_WORD_BITS {
        return Err(CteError::InvalidConfig(format!(
            "word length {k} outside 1..={MAX_WORD_BITS}"
        )));
    }
    let prior = prior_for(sample, config)?;
    let ticks = Ticks::new(g, sample.area.len())?;
    let mut grower = make_grower(sample, &ticks, &prior, config, k, seed);
    let enforced_spatial = grower.enforced.iter().filter(|&&e| e).count();
    let mut cache = PatchWordCache::new(sample);
    let mut stats = SweepStats::default();

    let calculator = match shape {
        CalculatorShape::Fern { word_bits } => {
            let bits = grower.grow_node(&mut cache, Vec::new(), *word_bits, &mut stats)?;
            WordCalculator::Fern(Fern::new(bits, sample.patch_radius)?)
        }
        CalculatorShape::Tree(t) => {
            t.validate()?;
            if config.split_candidates < t.split_factors.iter().copied().max().unwrap_or(1) {
                return Err(CteError::InvalidConfig(format!(
                    "{} split candidates cannot fill {:?} children",
                    config.split_candidates, t.split_factors
                )));
            }
            WordCalculator::Tree(grow_tree(&mut grower, &mut cache, t, sample.patch_radius, &mut stats)?)
        }
    };
    Ok(GrownTable {
        calculator,
        words: cache.words,
        enforced_spatial,
        stats,
    })
}

fn grow_tree<'a>(
    grower: &mut Grower<'_, 'a>,
    cache: &mut PatchWordCache<'a>,
    shape: &TreeShape,
    patch_radius: usize,
    stats: &mut SweepStats,
) -> Result<LongTree> {
    let all: Vec<u32> = cache.active.clone();
    let root = grower.grow_node(cache, Vec::new(), shape.stage_bits[0], stats)?;
    let mut stages: Vec<Vec<TreeNode>> = vec![vec![TreeNode::leaf(root)]];
    let mut members: Vec<Vec<u32>> = vec![all.clone()];
    let mut prefix = shape.stage_bits[0];

    for (s, &q) in shape.split_factors.iter().enumerate() {
        let ks = shape.stage_bits[s];
        let next_bits = shape.stage_bits[s + 1];
        let mut children: Vec<(BitFunction, Vec<u32>)> = Vec::new();
        let mut nodes = std::mem::take(&mut stages[s]);
        for (a, node) in nodes.iter_mut().enumerate() {
            cache.set_active(std::mem::take(&mut members[a]), prefix);
            let cells = Cells::new(cache, grower.ticks);
            let spatial = grower.enforced[prefix];
            let pool = grower.draws(spatial, grower.config.split_candidates);
            let scored: Vec<(BitFunction, Vec<f64>)> = pool
                .par_iter()
                .map(|&d| {
                    let (f, _) = grower.score(&cells, cache, d, true);
                    let col = cells.split_column(cache, grower.ticks, &cache.bits_of(&f), prefix - ks, ks);
                    (f, col)
                })
                .collect();
            let rows = 1usize << ks;
            let cols = scored.len();
            let mut matrix = vec![0.0; rows * cols];
            for (j, (_, col)) in scored.iter().enumerate() {
                for z in 0..rows {
                    matrix[z * cols + j] = col[z];
                }
            }
            let choice = choose_split(&matrix, rows, q)?;
            let base = children.len();
            node.children = (0..q).map(|j| (base + j) as u32).collect();
            node.directing = choice.directing.clone();
            for &j in &choice.columns {
                children.push((scored[j].0, Vec::new()));
            }
            let mask = (1usize << ks) - 1;
            for &id in &cache.active {
                let z = (cache.words[id as usize] as usize >> (prefix - ks)) & mask;
                children[base + choice.directing[z] as usize].1.push(id);
            }
        }
        stages[s] = nodes;

        let mut next_nodes = Vec::with_capacity(children.len());
        let mut next_members = Vec::with_capacity(children.len());
        for (first, ids) in children {
            cache.set_active(ids, prefix);
            cache.push_bit(&first)?;
            let bits = grower.grow_node(cache, vec![first], next_bits, stats)?;
            next_nodes.push(TreeNode::leaf(bits));
            next_members.push(std::mem::take(&mut cache.active));
        }
        stages.push(next_nodes);
        members = next_members;
        prefix += next_bits;
    }
    cache.set_active(all, prefix);
    LongTree::new(
        shape.stage_bits.clone(),
        shape.split_factors.clone(),
        stages,
        patch_radius,
    )
}

/// Grows a `word_bits`-bit fern: forward selection, then replacement and
/// refinement sweeps.
pub fn grow_fern(
    sample: &Sample<'_>,
    g: &GradientMatrix,
    word_bits: usize,
    config: &GrowthConfig,
    seed: u64,
) -> Result<Fern> {
    match grow_table(sample, g, &CalculatorShape::Fern { word_bits }, config, seed)?.calculator {
        WordCalculator::Fern(f) => Ok(f),
        WordCalculator::Tree(_) => unreachable!("fern shape grows a fern"),
    }
}

fn improve_fern(
    fern: &Fern,
    sample: &Sample<'_>,
    g: &GradientMatrix,
    sweeps: usize,
    config: &GrowthConfig,
    seed: u64,
    refine: bool,
) -> Result<(Fern, SweepStats)> {
    config.validate()?;
    check_gradients(sample, g)?;
    let prior = prior_for(sample, config)?;
    let ticks = Ticks::new(g, sample.area.len())?;
    let mut grower = make_grower(sample, &ticks, &prior, config, fern.word_bits(), seed);
    // Spatial get-bits keep their slot kind.
    grower.enforced = fern
        .bits()
        .iter()
        .map(|f| config.enforcement() && f.kind() == BitKind::GetBit && sample.images[0].kind(f.channel()).is_spatial())
        .collect();
    let calc = WordCalculator::Fern(fern.clone());
    let mut cache = PatchWordCache::from_calculator(sample, &calc);
    let mut bits = fern.bits().to_vec();
    let mut stats = SweepStats::default();
    grower.improve(&mut cache, &mut bits, 0, 0, sweeps, refine, &mut stats);
    Ok((Fern::new(bits, fern.patch_radius())?, stats))
}

/// Tries `config.candidates` random replacements for every bit, `sweeps`
/// times, accepting strict improvements of the bit's centered score with the
/// other bits fixed.
pub fn replace_bits(
    fern: &Fern,
    sample: &Sample<'_>,
    g: &GradientMatrix,
    sweeps: usize,
    config: &GrowthConfig,
    seed: u64,
) -> Result<(Fern, SweepStats)> {
    improve_fern(fern, sample, g, sweeps, config, seed, false)
}

/// Local search over one-pixel offset perturbations of every bit, with
/// thresholds re-fitted.
pub fn refine_bits(
    fern: &Fern,
    sample: &Sample<'_>,
    g: &GradientMatrix,
    sweeps: usize,
    config: &GrowthConfig,
) -> Result<(Fern, SweepStats)> {
    improve_fern(fern, sample, g, sweeps, config, 0, true)
}

/// The shared centered square aggregation area: the valid region shrunk by
/// `margin` on every side, then cut to a square.
pub fn default_area(patch_radius: usize, width: usize, height: usize, margin: usize) -> Result<Region> {
    let valid = valid_area_for_radius(patch_radius, width, height)?;
    let side = valid.width.min(valid.height).saturating_sub(2 * margin);
    if side == 0 {
        return Err(CteError::ImageTooSmall {
            width,
            height,
            reason: format!("no aggregation area left with patch radius {patch_radius} and margin {margin}"),
        });
    }
    Ok(Region::new(
        valid.x0 + (valid.width - side) / 2,
        valid.y0 + (valid.height - side) / 2,
        side,
        side,
    ))
}

/// Everything `train_ensemble` needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of tables `M`.
    pub tables: usize,
    /// Fern word length `K`; ignored when `tree` is set.
    pub word_bits: usize,
    pub patch_size: usize,
    pub tree: Option<TreeShape>,
    pub area_margin: usize,
    pub prep: PrepConfig,
    pub loss: LossConfig,
    pub growth: GrowthConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tables: 10,
            word_bits: 8,
            patch_size: DEFAULT_PATCH_SIZE,
            tree: None,
            area_margin: 1,
            prep: PrepConfig::default(),
            loss: LossConfig::default(),
            growth: GrowthConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size % 2 == 0 {
            return Err(CteError::InvalidConfig(format!(
                "patch size {} must be odd",
                self.patch_size
            )));
        }
        self.shape().word_bits();
        match &self.tree {
            Some(t) => t.validate()?,
            None if self.word_bits == 0 || self.word_bits > MAX_WORD_BITS => {
                return Err(CteError::InvalidConfig(format!(
                    "word length {} outside 1..={MAX_WORD_BITS}",
                    self.word_bits
                )))
            }
            None => {}
        }
        self.prep.validate()?;
        self.loss.validate()?;
        self.growth.validate()
    }

    pub fn shape(&self) -> CalculatorShape {
        match &self.tree {
            Some(t) => CalculatorShape::Tree(t.clone()),
            None => CalculatorShape::Fern {
                word_bits: self.word_bits,
            },
        }
    }

    pub fn patch_radius(&self) -> usize {
        self.patch_size / 2
    }
}

/// Per-table training record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableLog {
    pub table: usize,
    pub r_score: f64,
    pub enforced_spatial: usize,
    pub objective: f64,
    pub converged: bool,
    pub solver_iterations: usize,
    pub certificate: f64,
    pub train_error: f64,
    pub validation_error: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub ensemble: Ensemble,
    pub log: Vec<TableLog>,
    /// The solution of the last global solve, on normalized features.
    pub model: LinearModel,
    pub report: SolveReport,
}

struct GrownColumns {
    calculator: WordCalculator,
    scales: Vec<f64>,
    spatial_bits: u8,
}

fn spatial_count(calc: &WordCalculator, kinds: &[ChannelKind]) -> u8 {
    calc.bit_functions()
        .filter(|f| f.kind() == BitKind::GetBit && kinds.get(f.channel()).is_some_and(|k| k.is_spatial()))
        .count() as u8
}

fn export(
    grown: &[GrownColumns],
    model: &LinearModel,
    area: Region,
    prep: PrepConfig,
    dims: ImageDims,
) -> Result<Ensemble> {
    let classes = model.classes;
    let mut tables = Vec::with_capacity(grown.len());
    let mut offset = 0;
    for t in grown {
        let cells = t.calculator.cells();
        let mut weights = vec![0f32; cells * classes];
        for word in 0..cells {
            for c in 0..classes {
                weights[word * classes + c] = (model.weight(offset + word, c) / t.scales[word]) as f32;
            }
        }
        offset += cells;
        tables.push(ConvTable::new(
            t.calculator.clone(),
            area,
            weights,
            classes,
            t.spatial_bits,
        )?);
    }
    let biases = model.biases.iter().map(|&b| b as f32).collect();
    Ensemble::new(tables, biases, prep, dims)
}

fn error_rate(scores: &[f64], labels: &[u16], classes: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let wrong = scores
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &l)| {
            let mut best = 0;
            for c in 1..classes {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best + 1 != l as usize
        })
        .count();
    wrong as f64 / labels.len() as f64
}

/// Histogram rows of one table from the words of every patch.
fn histogram_block(words: &[u16], per_image: usize, cells: usize) -> Result<FeatureBlock> {
    let rows: Vec<Vec<(usize, f32)>> = words
        .par_chunks(per_image)
        .map(|w| {
            let mut sorted = w.to_vec();
            sorted.sort_unstable();
            let mut row: Vec<(usize, f32)> = Vec::new();
            for &word in &sorted {
                match row.last_mut() {
                    Some((b, n)) if *b == word as usize => *n += 1.0,
                    _ => row.push((word as usize, 1.0)),
                }
            }
            row
        })
        .collect();
    FeatureBlock::from_rows(cells, rows)
}

/// Trains an ensemble: each round grows a table against the current loss
/// gradients, appends its normalized histogram columns, re-solves all weights
/// (warm-started) and recomputes the gradients.
pub fn train_ensemble(
    images: &[RawImage],
    labels: &[u16],
    config: &TrainConfig,
    teacher: Option<&TeacherSoftLabels>,
    validation: Option<(&[RawImage], &[u16])>,
) -> Result<TrainedModel> {
    config.validate()?;
    let first = images
        .first()
        .ok_or_else(|| CteError::InvalidConfig("the training set is empty".into()))?;
    let dims = ImageDims {
        width: first.width(),
        height: first.height(),
        depth: first.depth(),
    };
    if labels.len() != images.len() {
        return Err(CteError::DimensionMismatch {
            expected: format!("{} labels", images.len()),
            found: format!("{}", labels.len()),
        });
    }
    let classes = labels.iter().copied().max().unwrap_or(0) as usize;
    let mut g = init_gradients(labels, classes)?;

    let prepared = prepare_batch(images, &config.prep)?;
    let radius = config.patch_radius();
    let area = default_area(radius, dims.width, dims.height, config.area_margin)?;
    let sample = Sample::new(&prepared, area, radius)?;
    let validation = match validation {
        Some((imgs, labs)) => Some((prepare_batch(imgs, &config.prep)?, labs)),
        None => None,
    };
    let shape = config.shape();

    let mut h = FeatureMatrix::new(images.len());
    let mut grown: Vec<GrownColumns> = Vec::new();
    let mut log = Vec::new();
    let (mut model, mut report) = losses::solve(&h, labels, classes, &config.loss, teacher, None)?;

    for m in 0..config.tables {
        let started = Instant::now();
        let seed = config
            .growth
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(m as u64);
        let table = grow_table(&sample, &g, &shape, &config.growth, seed)?;
        let grown_at = started.elapsed().as_secs_f64();
        let r_score = {
            let cache = PatchWordCache::from_calculator(&sample, &table.calculator);
            debug_assert_eq!(cache.words, table.words);
            Cells::new(&cache, &Ticks::new(&g, area.len())?).r_score()
        };

        let cells = table.calculator.cells();
        let mut block = histogram_block(&table.words, area.len(), cells)?;
        let scales = normalize_columns(&mut block);
        h.push_block(block)?;
        let init = model.extended(cells);
        (model, report) = losses::solve(&h, labels, classes, &config.loss, teacher, Some(&init))?;
        debug!(
            "table {}: growth {grown_at:.2}s, solve {:.2}s ({} iterations)",
            m + 1,
            started.elapsed().as_secs_f64() - grown_at,
            report.iterations
        );
        if !report.converged {
            warn!(
                "table {}: global solve stopped after {} iterations with certificate {:.3e}",
                m + 1,
                report.iterations,
                report.certificate
            );
        }
        let scores = model.scores(&h);
        let train_error = error_rate(&scores, labels, classes);
        if m + 1 < config.tables {
            g = gradients_from_scores(&scores, labels, classes, &config.loss, teacher)?;
        }
        grown.push(GrownColumns {
            spatial_bits: spatial_count(&table.calculator, prepared[0].kinds()),
            calculator: table.calculator,
            scales,
        });

        let validation_error = match &validation {
            Some((imgs, labs)) => {
                let ens = export(&grown, &model, area, config.prep, dims)?;
                let wrong = imgs
                    .par_iter()
                    .zip(labs.par_iter())
                    .map(|(img, &l)| -> Result<usize> {
                        Ok((argmax(&ens.scores_prepared(img)?) + 1 != l as usize) as usize)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(wrong.iter().sum::<usize>() as f64 / imgs.len().max(1) as f64)
            }
            None => None,
        };

        let entry = TableLog {
            table: m + 1,
            r_score,
            enforced_spatial: table.enforced_spatial,
            objective: report.objective,
            converged: report.converged,
            solver_iterations: report.iterations,
            certificate: report.certificate,
            train_error,
            validation_error,
            seconds: started.elapsed().as_secs_f64(),
        };
        info!(
            "table {}/{}: R {:.4} loss {:.6} train error {:.4}{} ({:.1}s)",
            entry.table,
            config.tables,
            entry.r_score,
            entry.objective,
            entry.train_error,
            entry
                .validation_error
                .map_or(String::new(), |e| format!(" validation error {e:.4}")),
            entry.seconds
        );
        log.push(entry);
    }

    let ensemble = export(&grown, &model, area, config.prep, dims)?;
    Ok(TrainedModel {
        ensemble,
        log,
        model,
        report,
    })
}
