use cte::data::{read_dataset, write_dataset};
use cte::train::threshold_between;
use cte::{split, LabeledDataset, RawImage};
use proptest::prelude::*;

fn dataset() -> impl Strategy<Value = LabeledDataset> {
    (1usize..5, 1usize..5, 1usize..3, 2usize..5, 1usize..30).prop_flat_map(|(w, h, d, classes, n)| {
        (
            prop::collection::vec(prop::collection::vec(-1e3f32..1e3, w * h * d), n),
            prop::collection::vec(1..=classes as u16, n),
            "[a-z:/.-]{0,12}",
        )
            .prop_map(move |(pixels, labels, provenance)| {
                let images = pixels.into_iter().map(|p| RawImage::new(w, h, d, p).unwrap()).collect();
                LabeledDataset::new(images, labels, classes, provenance).unwrap()
            })
    })
}

proptest! {
    #[test]
    fn threshold_lies_between(a in -1e30f32..1e30, b in -1e30f32..1e30) {
        prop_assume!(a != b);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let t = threshold_between(lo, hi);
        prop_assert!(lo < t && t <= hi, "{lo} {t} {hi}");
    }

    #[test]
    fn adjacent_floats_still_split(x in -1e30f32..1e30) {
        let next = f32::from_bits(if x >= 0.0 { x.to_bits() + 1 } else { x.to_bits() - 1 });
        let t = threshold_between(x, next);
        prop_assert!(x < t && t <= next);
    }

    #[test]
    fn dataset_file_round_trips(ds in dataset()) {
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        prop_assert_eq!(read_dataset(&buf[..]).unwrap(), ds);
    }

    #[test]
    fn split_is_a_stratified_partition(ds in dataset(), fraction in 0.05f64..0.95, seed: u64) {
        let held: usize = ds.class_counts().iter().map(|&n| ((1.0 - fraction) * n as f64).ceil() as usize).sum();
        let Ok((a, b)) = split(&ds, fraction, seed) else {
            // Refused only when the first part would be empty.
            prop_assert_eq!(held, ds.len());
            return Ok(());
        };
        prop_assert_eq!(a.len() + b.len(), ds.len());
        let (ca, cb, c) = (a.class_counts(), b.class_counts(), ds.class_counts());
        for k in 0..ds.classes {
            prop_assert_eq!(ca[k] + cb[k], c[k]);
            prop_assert_eq!(cb[k], ((1.0 - fraction) * c[k] as f64).ceil() as usize);
        }
        // Same multiset of examples.
        let key = |d: &LabeledDataset| {
            let mut v: Vec<(u16, Vec<u32>)> = d
                .images
                .iter()
                .zip(&d.labels)
                .map(|(im, &l)| (l, im.data().iter().map(|x| x.to_bits()).collect()))
                .collect();
            v.sort();
            v
        };
        let mut joined = a.clone();
        joined.images.extend(b.images.iter().cloned());
        joined.labels.extend(&b.labels);
        prop_assert_eq!(key(&joined), key(&ds));
    }
}
