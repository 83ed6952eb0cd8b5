//! The classifier: convolutional tables voting into class scores.

use std::time::Instant;

use crate::error::{CteError, Result};
use crate::tensor::{prepare_channels, ExtendedImage, PrepConfig, RawImage};
use crate::words::{valid_area, Region, WordCalculator};

/// A word calculator, the area it is applied over, and its vote weights.
///
/// `weights` holds `cells x classes` values laid out word-major, so the
/// weights of all classes for one word are contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTable {
    calculator: WordCalculator,
    area: Region,
    weights: Vec<f32>,
    classes: usize,
    spatial_bits: u8,
}

impl ConvTable {
    pub fn new(
        calculator: WordCalculator,
        area: Region,
        weights: Vec<f32>,
        classes: usize,
        spatial_bits: u8,
    ) -> Result<Self> {
        if classes == 0 {
            return Err(CteError::InvalidConfig("a table needs at least one class".into()));
        }
        let expected = calculator.cells() * classes;
        if weights.len() != expected {
            return Err(CteError::DimensionMismatch {
                expected: format!("{expected} weights"),
                found: format!("{} weights", weights.len()),
            });
        }
        Ok(Self {
            calculator,
            area,
            weights,
            classes,
            spatial_bits,
        })
    }

    pub fn calculator(&self) -> &WordCalculator {
        &self.calculator
    }

    pub fn area(&self) -> Region {
        self.area
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn spatial_bits(&self) -> u8 {
        self.spatial_bits
    }

    /// Weights of all classes for `word`.
    #[inline]
    pub fn word_weights(&self, word: u32) -> &[f32] {
        let start = word as usize * self.classes;
        &self.weights[start..start + self.classes]
    }

    fn check_area(&self, width: usize, height: usize) -> Result<()> {
        let valid = valid_area(&self.calculator, width, height)?;
        if !self.area.is_subset_of(&valid) {
            return Err(CteError::DimensionMismatch {
                expected: format!("area inside {valid:?}"),
                found: format!("{:?}", self.area),
            });
        }
        Ok(())
    }

    /// Adds this table's votes over its area into `scores`, one row of words
    /// at a time.
    fn vote(&self, image: &ExtendedImage, scores: &mut [f32], row: &mut Vec<u32>) {
        row.resize(self.area.width, 0);
        for y in self.area.y0..self.area.y0 + self.area.height {
            self.calculator.eval_row(image, self.area.x0, y, row);
            for &word in row.iter() {
                for (s, &w) in scores.iter_mut().zip(self.word_weights(word)) {
                    *s += w;
                }
            }
        }
    }

    fn vote_reference(&self, image: &ExtendedImage, scores: &mut [f32]) {
        for p in self.area.pixels() {
            let word = self.calculator.eval_unchecked(image, p.x, p.y);
            for (s, &w) in scores.iter_mut().zip(self.word_weights(word)) {
                *s += w;
            }
        }
    }
}

/// Word counts of one table over its aggregation area.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordHistogram {
    pub counts: Vec<u32>,
}

impl WordHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}

/// Input image geometry an ensemble was trained for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageDims {
    pub width: usize,
    pub height: usize,
    pub depth: usize,
}

/// A trained convolutional tables ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    tables: Vec<ConvTable>,
    biases: Vec<f32>,
    classes: usize,
    prep: PrepConfig,
    dims: ImageDims,
}

impl Ensemble {
    pub fn new(tables: Vec<ConvTable>, biases: Vec<f32>, prep: PrepConfig, dims: ImageDims) -> Result<Self> {
        prep.validate()?;
        let classes = biases.len();
        if classes == 0 {
            return Err(CteError::InvalidConfig("an ensemble needs at least one class".into()));
        }
        let kinds = prep.channel_kinds(dims.depth);
        for (m, t) in tables.iter().enumerate() {
            if t.classes != classes {
                return Err(CteError::DimensionMismatch {
                    expected: format!("{classes} classes"),
                    found: format!("table {m} with {} classes", t.classes),
                });
            }
            t.check_area(dims.width, dims.height)?;
            t.calculator.validate_channels(&kinds, true)?;
        }
        Ok(Self {
            tables,
            biases,
            classes,
            prep,
            dims,
        })
    }

    pub fn tables(&self) -> &[ConvTable] {
        &self.tables
    }

    pub fn biases(&self) -> &[f32] {
        &self.biases
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn prep_config(&self) -> &PrepConfig {
        &self.prep
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    /// A copy keeping only the first `m` tables.
    pub fn truncated(&self, m: usize) -> Ensemble {
        Ensemble {
            tables: self.tables[..m.min(self.tables.len())].to_vec(),
            ..self.clone()
        }
    }

    fn check_dims(&self, width: usize, height: usize, depth: usize) -> Result<()> {
        if (width, height, depth) != (self.dims.width, self.dims.height, self.dims.depth) {
            return Err(CteError::DimensionMismatch {
                expected: format!("{}x{}x{}", self.dims.width, self.dims.height, self.dims.depth),
                found: format!("{width}x{height}x{depth}"),
            });
        }
        Ok(())
    }

    pub fn prepare(&self, image: &RawImage) -> Result<ExtendedImage> {
        self.check_dims(image.width(), image.height(), image.depth())?;
        prepare_channels(image, &self.prep)
    }

    /// Class scores of an already prepared image using direct per-word voting.
    pub fn scores_prepared(&self, image: &ExtendedImage) -> Result<Vec<f32>> {
        self.check_dims(image.width(), image.height(), self.dims.depth)?;
        if image.depth() != self.prep.extended_depth(self.dims.depth) {
            return Err(CteError::DimensionMismatch {
                expected: format!("{} channels", self.prep.extended_depth(self.dims.depth)),
                found: format!("{} channels", image.depth()),
            });
        }
        let mut scores: Vec<f32> = self.biases.iter().map(|t| -t).collect();
        let mut row = Vec::new();
        for t in &self.tables {
            t.vote(image, &mut scores, &mut row);
        }
        Ok(scores)
    }

    /// Per-pixel scalar voting, kept as a reference for the row-wise path.
    pub fn scores_reference(&self, image: &ExtendedImage) -> Vec<f32> {
        let mut scores: Vec<f32> = self.biases.iter().map(|t| -t).collect();
        for t in &self.tables {
            t.vote_reference(image, &mut scores);
        }
        scores
    }

    /// Scores through explicit histograms: `W H^t - T`, accumulated in `f64`.
    pub fn scores_from_histograms(&self, image: &ExtendedImage) -> Result<Vec<f64>> {
        let mut scores: Vec<f64> = self.biases.iter().map(|&t| -(t as f64)).collect();
        for t in &self.tables {
            let h = table_histogram(t, image)?;
            for (word, &count) in h.counts.iter().enumerate() {
                if count == 0 {
                    continue;
                }
                for (s, &w) in scores.iter_mut().zip(t.word_weights(word as u32)) {
                    *s += w as f64 * count as f64;
                }
            }
        }
        Ok(scores)
    }
}

/// Counts each word over the table's area.
pub fn table_histogram(table: &ConvTable, image: &ExtendedImage) -> Result<WordHistogram> {
    table.check_area(image.width(), image.height())?;
    let mut counts = vec![0u32; table.calculator.cells()];
    let mut row = vec![0u32; table.area.width];
    for y in table.area.y0..table.area.y0 + table.area.height {
        table.calculator.eval_row(image, table.area.x0, y, &mut row);
        for &w in &row {
            counts[w as usize] += 1;
        }
    }
    Ok(WordHistogram { counts })
}

/// Class scores `W H^t - T` for a raw image.
pub fn class_scores(ens: &Ensemble, image: &RawImage) -> Result<Vec<f32>> {
    let ext = ens.prepare(image)?;
    ens.scores_prepared(&ext)
}

/// Index of the largest score; ties go to the smallest index.
pub fn argmax(scores: &[f32]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// The predicted class label in `1..=C`.
pub fn classify(ens: &Ensemble, image: &RawImage) -> Result<u16> {
    Ok(argmax(&class_scores(ens, image)?) as u16 + 1)
}

/// Median and 95th percentile of a latency sample, in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LatencySummary {
    pub median_us: f64,
    pub p95_us: f64,
    pub mean_us: f64,
}

impl LatencySummary {
    pub fn from_samples(samples: &mut [f64]) -> Self {
        if samples.is_empty() {
            return Self {
                median_us: 0.0,
                p95_us: 0.0,
                mean_us: 0.0,
            };
        }
        samples.sort_by(f64::total_cmp);
        let pick = |q: f64| samples[((samples.len() - 1) as f64 * q).round() as usize];
        Self {
            median_us: pick(0.5),
            p95_us: pick(0.95),
            mean_us: samples.iter().sum::<f64>() / samples.len() as f64,
        }
    }
}

/// Single-thread latency of classifying a batch.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct BatchTiming {
    /// Channel preparation plus voting.
    pub total: LatencySummary,
    pub prepare: LatencySummary,
    pub vote: LatencySummary,
}

/// Number of untimed passes over the first images before measuring.
const WARMUP_IMAGES: usize = 16;

/// Classifies every image on the calling thread, timing channel preparation
/// and voting separately for each image.
pub fn classify_batch_timed(ens: &Ensemble, images: &[RawImage]) -> Result<(Vec<u16>, BatchTiming)> {
    for img in images.iter().take(WARMUP_IMAGES) {
        let ext = ens.prepare(img)?;
        std::hint::black_box(ens.scores_prepared(&ext)?);
    }
    let mut labels = Vec::with_capacity(images.len());
    let mut prep = Vec::with_capacity(images.len());
    let mut vote = Vec::with_capacity(images.len());
    let mut total = Vec::with_capacity(images.len());
    for img in images {
        let t0 = Instant::now();
        let ext = ens.prepare(img)?;
        let t1 = Instant::now();
        let scores = ens.scores_prepared(&ext)?;
        let label = argmax(std::hint::black_box(&scores)) as u16 + 1;
        let t2 = Instant::now();
        labels.push(label);
        prep.push((t1 - t0).as_secs_f64() * 1e6);
        vote.push((t2 - t1).as_secs_f64() * 1e6);
        total.push((t2 - t0).as_secs_f64() * 1e6);
    }
    Ok((
        labels,
        BatchTiming {
            total: LatencySummary::from_samples(&mut total),
            prepare: LatencySummary::from_samples(&mut prep),
            vote: LatencySummary::from_samples(&mut vote),
        },
    ))
}

/// Per-image voting latency on pre-prepared images.
pub fn time_voting(ens: &Ensemble, images: &[ExtendedImage], reps: usize) -> Result<LatencySummary> {
    for img in images.iter().take(WARMUP_IMAGES) {
        std::hint::black_box(ens.scores_prepared(img)?);
    }
    let mut samples = Vec::with_capacity(images.len() * reps.max(1));
    for _ in 0..reps.max(1) {
        for img in images {
            let t0 = Instant::now();
            std::hint::black_box(ens.scores_prepared(img)?);
            samples.push(t0.elapsed().as_secs_f64() * 1e6);
        }
    }
    Ok(LatencySummary::from_samples(&mut samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::words::{BitFunction, Fern};

    fn constant_one_table(classes: usize, weights: Vec<f32>, area: Region) -> ConvTable {
        let fern = Fern::new(
            vec![BitFunction::OnePixel {
                channel: 0,
                dx: 0,
                dy: 0,
                threshold: -1.0,
            }],
            0,
        )
        .unwrap();
        ConvTable::new(WordCalculator::Fern(fern), area, weights, classes, 0).unwrap()
    }

    fn dims(w: usize, h: usize) -> ImageDims {
        ImageDims {
            width: w,
            height: h,
            depth: 1,
        }
    }

    #[test]
    fn histogram_of_constant_bit() {
        let t = constant_one_table(2, vec![0.0; 4], Region::new(0, 0, 20, 20));
        let img = prepare_channels(&RawImage::from_fn(20, 20, 1, |_, _, _| 0.5), &PrepConfig::identity()).unwrap();
        let h = table_histogram(&t, &img).unwrap();
        assert_eq!(h.counts, vec![0, 400]);
        assert_eq!(h.total(), 400);
    }

    #[test]
    fn zero_weights_give_negated_biases() {
        let t = constant_one_table(2, vec![0.0; 4], Region::new(0, 0, 4, 4));
        let ens = Ensemble::new(vec![t], vec![1.0, 2.0], PrepConfig::identity(), dims(4, 4)).unwrap();
        let img = RawImage::from_fn(4, 4, 1, |_, _, _| 0.0);
        assert_eq!(class_scores(&ens, &img).unwrap(), vec![-1.0, -2.0]);
        assert_eq!(classify(&ens, &img).unwrap(), 1);
    }

    #[test]
    fn tie_goes_to_first_class() {
        assert_eq!(argmax(&[0.0, 0.0]), 0);
        assert_eq!(argmax(&[-1.0, 3.0, 3.0]), 1);
        let ens = Ensemble::new(vec![], vec![0.0, 0.0], PrepConfig::identity(), dims(3, 3)).unwrap();
        assert_eq!(classify(&ens, &RawImage::from_fn(3, 3, 1, |_, _, _| 0.0)).unwrap(), 1);
    }

    #[test]
    fn histogram_dot_product() {
        // H = (3, 5) over an 8-pixel row; W row for class 1 is (2, -1).
        let fern = Fern::new(
            vec![BitFunction::OnePixel {
                channel: 0,
                dx: 0,
                dy: 0,
                threshold: 0.5,
            }],
            0,
        )
        .unwrap();
        let t = ConvTable::new(
            WordCalculator::Fern(fern),
            Region::new(0, 0, 8, 1),
            vec![2.0, -1.0],
            1,
            0,
        )
        .unwrap();
        let img = RawImage::from_fn(8, 1, 1, |x, _, _| if x < 3 { 0.0 } else { 1.0 });
        let ens = Ensemble::new(vec![t.clone()], vec![0.0], PrepConfig::identity(), dims(8, 1)).unwrap();
        let ext = ens.prepare(&img).unwrap();
        assert_eq!(table_histogram(&t, &ext).unwrap().counts, vec![3, 5]);
        assert_eq!(class_scores(&ens, &img).unwrap(), vec![1.0]);
        assert_eq!(ens.scores_from_histograms(&ext).unwrap(), vec![1.0]);
    }

    #[test]
    fn dimension_checks() {
        let ens = Ensemble::new(vec![], vec![0.0, 0.0], PrepConfig::identity(), dims(5, 5)).unwrap();
        assert!(matches!(
            class_scores(&ens, &RawImage::from_fn(6, 5, 1, |_, _, _| 0.0)),
            Err(CteError::DimensionMismatch { .. })
        ));
        let t = constant_one_table(2, vec![0.0; 4], Region::new(0, 0, 6, 5));
        assert!(Ensemble::new(vec![t], vec![0.0, 0.0], PrepConfig::identity(), dims(5, 5)).is_err());
        let t = constant_one_table(2, vec![0.0; 4], Region::new(0, 0, 5, 5));
        assert!(Ensemble::new(vec![t], vec![0.0; 3], PrepConfig::identity(), dims(5, 5)).is_err());
    }

    #[test]
    fn empty_ensemble_timing() {
        let ens = Ensemble::new(vec![], vec![0.0; 3], PrepConfig::identity(), dims(8, 8)).unwrap();
        let images: Vec<_> = (0..20)
            .map(|i| RawImage::from_fn(8, 8, 1, |x, _, _| (x + i) as f32))
            .collect();
        let (labels, timing) = classify_batch_timed(&ens, &images).unwrap();
        assert!(labels.iter().all(|&l| l == 1));
        assert!(timing.vote.median_us < 50.0);
    }

    #[test]
    fn latency_percentiles() {
        let mut s: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        let l = LatencySummary::from_samples(&mut s);
        assert_eq!(l.median_us, 51.0);
        assert_eq!(l.p95_us, 95.0);
    }
}
