//! Fixtures shared by the benchmarks: random images and random ensembles of
//! the shapes used for latency measurements.

use cte::tensor::{prepare_channels, ExtendedImage};
use cte::train::{default_area, BitPrior};
use cte::words::DEFAULT_PATCH_SIZE;
use cte::{BitKind, ConvTable, Ensemble, Fern, ImageDims, LongTree, PrepConfig, RawImage, TreeNode, WordCalculator};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SIDE: usize = 28;
pub const CLASSES: usize = 10;

pub fn random_images(n: usize, seed: u64) -> Vec<RawImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| RawImage::from_fn(SIDE, SIDE, 1, |_, _, _| rng.gen::<f32>()))
        .collect()
}

fn random_bits(prior: &BitPrior, k: usize, rng: &mut ChaCha8Rng) -> Vec<cte::BitFunction> {
    (0..k)
        .map(|_| {
            let f = prior.draw(rng);
            if f.kind().is_thresholded() {
                f.with_threshold(rng.gen_range(-0.5..0.5))
            } else {
                f
            }
        })
        .collect()
}

fn assemble(calcs: Vec<WordCalculator>, prep: PrepConfig, rng: &mut ChaCha8Rng) -> Ensemble {
    let radius = DEFAULT_PATCH_SIZE / 2;
    let area = default_area(radius, SIDE, SIDE, 1).expect("28x28 has an area");
    let tables = calcs
        .into_iter()
        .map(|calc| {
            let weights = (0..calc.cells() * CLASSES).map(|_| rng.gen_range(-1.0..1.0)).collect();
            ConvTable::new(calc, area, weights, CLASSES, 0).expect("valid table")
        })
        .collect();
    let dims = ImageDims {
        width: SIDE,
        height: SIDE,
        depth: 1,
    };
    Ensemble::new(tables, vec![0.0; CLASSES], prep, dims).expect("valid ensemble")
}

fn prior(prep: &PrepConfig) -> BitPrior {
    let probe = prepare_channels(&random_images(1, 0)[0], prep).expect("prepares");
    BitPrior::new(&probe, DEFAULT_PATCH_SIZE / 2, &BitKind::ALL, false).expect("bits available")
}

/// `tables` random `k`-bit ferns over the default channel layout.
pub fn fern_ensemble(tables: usize, k: usize, seed: u64) -> Ensemble {
    let prep = PrepConfig::default();
    let prior = prior(&prep);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let calcs = (0..tables)
        .map(|_| {
            WordCalculator::Fern(
                Fern::new(random_bits(&prior, k, &mut rng), DEFAULT_PATCH_SIZE / 2).expect("valid fern"),
            )
        })
        .collect();
    assemble(calcs, prep, &mut rng)
}

/// `tables` random two-stage trees: a `k1`-bit root splitting into `q` children of `k2` bits.
pub fn tree_ensemble(tables: usize, k1: usize, k2: usize, q: usize, seed: u64) -> Ensemble {
    let prep = PrepConfig::default();
    let prior = prior(&prep);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let calcs = (0..tables)
        .map(|_| {
            let root = TreeNode {
                bits: random_bits(&prior, k1, &mut rng),
                children: (0..q as u32).collect(),
                directing: (0..1usize << k1).map(|_| rng.gen_range(0..q) as u8).collect(),
            };
            let leaves = (0..q)
                .map(|_| TreeNode::leaf(random_bits(&prior, k2, &mut rng)))
                .collect();
            let tree = LongTree::new(vec![k1, k2], vec![q], vec![vec![root], leaves], DEFAULT_PATCH_SIZE / 2)
                .expect("valid tree");
            WordCalculator::Tree(tree)
        })
        .collect();
    assemble(calcs, prep, &mut rng)
}

pub fn prepared(ens: &Ensemble, images: &[RawImage]) -> Vec<ExtendedImage> {
    images.iter().map(|im| ens.prepare(im).expect("dims match")).collect()
}
