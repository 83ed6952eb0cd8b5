//! Behavior of table growth on small constructed problems.

use cte::tensor::prepare_channels;
use cte::train::{choose_split, replace_bits, score_r, Sample};
use cte::{
    grow_fern, init_gradients, train_ensemble, BitFunction, BitKind, ExtendedImage, Fern, GrowthConfig, PrepConfig,
    RawImage, Region, TrainConfig, WordCalculator,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 7;
const RADIUS: usize = 3;

/// Two classes told apart only by the pixel at `(x, y)`: bright for class 1,
/// dark for class 2. Every other pixel is noise shared by both classes.
fn one_pixel_problem(n: usize, x: usize, y: usize, seed: u64) -> (Vec<RawImage>, Vec<u16>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let class = i % 2;
        images.push(RawImage::from_fn(SIDE, SIDE, 1, |px, py, _| {
            if (px, py) == (x, y) {
                if class == 0 {
                    rng.gen_range(0.7..1.0)
                } else {
                    rng.gen_range(0.0..0.3)
                }
            } else {
                rng.gen_range(0.0..1.0)
            }
        }));
        labels.push(class as u16 + 1);
    }
    (images, labels)
}

/// Originals only, unsmoothed: 49 one-pixel candidates, one of them informative.
fn prep() -> PrepConfig {
    PrepConfig::identity()
}

fn prepare(images: &[RawImage]) -> Vec<ExtendedImage> {
    images.iter().map(|r| prepare_channels(r, &prep()).unwrap()).collect()
}

/// One patch per image, centered, covering the whole image.
fn center() -> Region {
    Region::new(RADIUS, RADIUS, 1, 1)
}

fn separates(bit: &BitFunction, images: &[ExtendedImage], labels: &[u16]) -> bool {
    let ones: Vec<bool> = images.iter().map(|im| bit.eval(im, RADIUS, RADIUS) == 1).collect();
    let first = ones[0];
    ones.iter().zip(labels).all(|(&o, &l)| (o == first) == (l == labels[0]))
}

fn config() -> GrowthConfig {
    GrowthConfig {
        candidates: 300,
        replacement_sweeps: 0,
        refinement_sweeps: 0,
        spatial_bits_min: 0,
        spatial_bits_max: 0,
        kinds: vec![BitKind::OnePixel],
        ..GrowthConfig::default()
    }
}

#[test]
fn single_bit_finds_the_informative_pixel() {
    let (raw, labels) = one_pixel_problem(40, 5, 2, 1);
    let images = prepare(&raw);
    let sample = Sample::new(&images, center(), RADIUS).unwrap();
    let g = init_gradients(&labels, 2).unwrap();
    let fern = grow_fern(&sample, &g, 1, &config(), 3).unwrap();
    let bit = &fern.bits()[0];
    assert!(separates(bit, &images, &labels), "{bit:?}");
    match *bit {
        BitFunction::OnePixel { dx, dy, .. } => assert_eq!((dx, dy), (2, -1)),
        ref other => panic!("expected a one-pixel bit, got {other:?}"),
    }
}

#[test]
fn one_table_fits_a_separable_set() {
    let (raw, labels) = one_pixel_problem(40, 5, 2, 2);
    let config = TrainConfig {
        tables: 1,
        word_bits: 2,
        patch_size: 2 * RADIUS + 1,
        area_margin: 0,
        prep: prep(),
        growth: config(),
        ..TrainConfig::default()
    };
    let trained = train_ensemble(&raw, &labels, &config, None, None).unwrap();
    assert_eq!(trained.log[0].train_error, 0.0, "{:?}", trained.ensemble.tables()[0]);
}

#[test]
fn replacement_removes_a_planted_useless_bit() {
    let (raw, labels) = one_pixel_problem(40, 1, 4, 3);
    let images = prepare(&raw);
    let sample = Sample::new(&images, center(), RADIUS).unwrap();
    let g = init_gradients(&labels, 2).unwrap();
    let constant = BitFunction::OnePixel {
        channel: 0,
        dx: 0,
        dy: 0,
        threshold: f32::NEG_INFINITY,
    };
    let planted = Fern::new(vec![constant.clone(), constant], RADIUS).unwrap();
    let before = score_r(&WordCalculator::Fern(planted.clone()), &sample, &g).unwrap();
    let (fixed, stats) = replace_bits(&planted, &sample, &g, 1, &config(), 5).unwrap();
    let after = score_r(&WordCalculator::Fern(fixed.clone()), &sample, &g).unwrap();
    assert!(stats.accepted >= 1);
    assert!(after > before, "{before} -> {after}");
    assert!(fixed.bits().iter().any(|b| separates(b, &images, &labels)), "{fixed:?}");
}

#[test]
fn two_children_of_three_match_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let rows = rng.gen_range(1..6);
        let scores: Vec<f64> = (0..rows * 3).map(|_| rng.gen_range(0..5) as f64).collect();
        let got = choose_split(&scores, rows, 2).unwrap();
        let value = |a: usize, b: usize| -> f64 { (0..rows).map(|z| scores[z * 3 + a].max(scores[z * 3 + b])).sum() };
        let best = [(0, 1), (0, 2), (1, 2)]
            .iter()
            .map(|&(a, b)| value(a, b))
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(got.score, best, "{scores:?}");
        let mut cols = got.columns.clone();
        cols.sort();
        assert_eq!(value(cols[0], cols[1]), best);
        for z in 0..rows {
            let chosen = got.columns[got.directing[z] as usize];
            assert_eq!(
                scores[z * 3 + chosen],
                scores[z * 3 + cols[0]].max(scores[z * 3 + cols[1]])
            );
        }
    }
}
