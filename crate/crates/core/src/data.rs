//! Dataset loading: MNIST IDX files, CIFAR-10 binary batches and a plain
//! little-endian tensor format, plus seeded stratified splits.
//!
//! Labels are shifted to `1..=C` on load and pixel bytes are scaled to `[0, 1]`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ensemble::ImageDims;
use crate::error::{CteError, Result};
use crate::tensor::RawImage;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
const CIFAR_CLASSES: usize = 10;
const CTED_MAGIC: &[u8; 4] = b"CTED";
const CTED_VERSION: u32 = 1;

/// Images with labels in `1..=classes`, all of one size.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<RawImage>,
    pub labels: Vec<u16>,
    pub classes: usize,
    /// Where the data came from, e.g. `mnist-idx:train-images-idx3-ubyte`.
    pub provenance: String,
}

impl LabeledDataset {
    pub fn new(images: Vec<RawImage>, labels: Vec<u16>, classes: usize, provenance: impl Into<String>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(CteError::Dataset(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l == 0 || l as usize > classes) {
            return Err(CteError::InvalidLabels(format!("label {l} outside 1..={classes}")));
        }
        if let Some(first) = images.first() {
            let dims = (first.width(), first.height(), first.depth());
            if let Some(img) = images.iter().find(|im| (im.width(), im.height(), im.depth()) != dims) {
                return Err(CteError::DimensionMismatch {
                    expected: format!("{}x{}x{}", dims.0, dims.1, dims.2),
                    found: format!("{}x{}x{}", img.width(), img.height(), img.depth()),
                });
            }
        }
        Ok(Self {
            images,
            labels,
            classes,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn dims(&self) -> Option<ImageDims> {
        self.images.first().map(|im| ImageDims {
            width: im.width(),
            height: im.height(),
            depth: im.depth(),
        })
    }

    /// Examples per class, index `c - 1` for class `c`.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l as usize - 1] += 1;
        }
        counts
    }

    /// The examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            provenance: self.provenance.clone(),
        }
    }

    /// The first `n` examples (all of them if fewer).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

/// Reads a whole file, inflating it if it is gzip-compressed.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| CteError::Truncated(format!("{what}: header ends at byte {}", bytes.len())))
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Parses an IDX image file (`u8` pixels) and its label file. Plain and
/// gzip-compressed files are both accepted.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let img = read_maybe_gz(images_path)?;
    let lab = read_maybe_gz(labels_path)?;
    let name = file_name(images_path);

    let magic = be_u32(&img, 0, &name)?;
    if magic != IDX_IMAGES {
        return Err(CteError::Format(format!(
            "{name}: magic {magic:#010x}, expected {IDX_IMAGES:#010x} for an image file"
        )));
    }
    let lname = file_name(labels_path);
    let lmagic = be_u32(&lab, 0, &lname)?;
    if lmagic != IDX_LABELS {
        return Err(CteError::Format(format!(
            "{lname}: magic {lmagic:#010x}, expected {IDX_LABELS:#010x} for a label file"
        )));
    }

    let n = be_u32(&img, 4, &name)? as usize;
    let rows = be_u32(&img, 8, &name)? as usize;
    let cols = be_u32(&img, 12, &name)? as usize;
    let nl = be_u32(&lab, 4, &lname)? as usize;
    if n != nl {
        return Err(CteError::Dataset(format!(
            "{name} has {n} images but {lname} has {nl} labels"
        )));
    }
    let plane = rows * cols;
    if img.len() < 16 + n * plane {
        return Err(CteError::Truncated(format!(
            "{name}: {} payload bytes, expected {}",
            img.len().saturating_sub(16),
            n * plane
        )));
    }
    if lab.len() < 8 + n {
        return Err(CteError::Truncated(format!(
            "{lname}: {} payload bytes, expected {n}",
            lab.len().saturating_sub(8)
        )));
    }

    let images = img[16..16 + n * plane]
        .chunks_exact(plane)
        .map(|px| RawImage::new(cols, rows, 1, px.iter().map(|&b| b as f32 / 255.0).collect()))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<u16> = lab[8..8 + n].iter().map(|&b| b as u16 + 1).collect();
    let classes = labels.iter().copied().max().unwrap_or(0).max(10) as usize;
    LabeledDataset::new(images, labels, classes, format!("mnist-idx:{name}"))
}

/// Parses one or more CIFAR-10 binary batch files into a single dataset.
pub fn load_cifar10<P: AsRef<Path>>(batch_paths: &[P]) -> Result<LabeledDataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut names = Vec::new();
    for path in batch_paths {
        let path = path.as_ref();
        let name = file_name(path);
        let bytes = fs::read(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(CteError::Format(format!(
                "{name}: {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
                bytes.len()
            )));
        }
        for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            if rec[0] as usize >= CIFAR_CLASSES {
                return Err(CteError::InvalidLabels(format!(
                    "{name}: record {r} has label byte {}",
                    rec[0]
                )));
            }
            labels.push(rec[0] as u16 + 1);
            // Red, green and blue planes, each row-major, as `RawImage` stores them.
            let data = rec[1..].iter().map(|&b| b as f32 / 255.0).collect();
            images.push(RawImage::new(CIFAR_SIDE, CIFAR_SIDE, 3, data)?);
        }
        names.push(name);
    }
    LabeledDataset::new(images, labels, CIFAR_CLASSES, format!("cifar10:{}", names.join(",")))
}

/// Writes the generic format: `"CTED"`, version, width, height, depth, C, N
/// (all `u32`), the image values as `f32`, the labels as `u16`, then the
/// provenance as a length-prefixed UTF-8 string. Everything little-endian.
pub fn write_dataset<W: Write>(ds: &LabeledDataset, mut out: W) -> Result<()> {
    let d = ds.dims().unwrap_or(ImageDims {
        width: 0,
        height: 0,
        depth: 0,
    });
    let mut buf = Vec::with_capacity(32 + ds.len() * (d.width * d.height * d.depth * 4 + 2));
    buf.extend_from_slice(CTED_MAGIC);
    for v in [CTED_VERSION as usize, d.width, d.height, d.depth, ds.classes, ds.len()] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for img in &ds.images {
        for v in img.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for l in &ds.labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    buf.extend_from_slice(&(ds.provenance.len() as u32).to_le_bytes());
    buf.extend_from_slice(ds.provenance.as_bytes());
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_dataset<R: Read>(mut input: R) -> Result<LabeledDataset> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut at = 0usize;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        let s = bytes
            .get(at..at + n)
            .ok_or_else(|| CteError::Truncated(format!("dataset file ends inside {what}")))?;
        at += n;
        Ok(s)
    };
    if take(4, "the magic")? != CTED_MAGIC {
        return Err(CteError::Format("not a CTED dataset file".into()));
    }
    let mut header = [0usize; 6];
    for h in header.iter_mut() {
        *h = u32::from_le_bytes(take(4, "the header")?.try_into().expect("4 bytes")) as usize;
    }
    let [version, width, height, depth, classes, n] = header;
    if version != CTED_VERSION as usize {
        return Err(CteError::UnsupportedVersion {
            found: version as u32,
            supported: CTED_VERSION,
        });
    }
    let per = width * height * depth;
    let payload = take(n * per * 4, "the image payload")?;
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let images = values
        .chunks_exact(per.max(1))
        .take(n)
        .map(|v| RawImage::new(width, height, depth, v.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<u16> = take(n * 2, "the labels")?
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes(b.try_into().expect("2 bytes")))
        .collect();
    let len = u32::from_le_bytes(take(4, "the provenance")?.try_into().expect("4 bytes")) as usize;
    let provenance = String::from_utf8(take(len, "the provenance")?.to_vec())
        .map_err(|_| CteError::Format("provenance is not UTF-8".into()))?;
    LabeledDataset::new(images, labels, classes, provenance)
}

pub fn save_dataset(ds: &LabeledDataset, path: &Path) -> Result<()> {
    write_dataset(ds, std::io::BufWriter::new(fs::File::create(path)?))
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    read_dataset(std::io::BufReader::new(fs::File::open(path)?))
}

/// Seeded stratified split. Each class is shuffled and cut so that part b
/// gets `ceil((1 - fraction) * n_c)` of its examples; both parts keep the
/// shuffled order.
pub fn split(ds: &LabeledDataset, fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CteError::InvalidConfig(format!(
            "split fraction {fraction} outside (0, 1)"
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut left: Vec<usize> = ds
        .class_counts()
        .iter()
        .map(|&n| n - ((1.0 - fraction) * n as f64).ceil() as usize)
        .collect();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for i in order {
        let c = ds.labels[i] as usize - 1;
        if left[c] > 0 {
            left[c] -= 1;
            a.push(i);
        } else {
            b.push(i);
        }
    }
    if a.is_empty() || b.is_empty() {
        return Err(CteError::Dataset(format!(
            "splitting {} examples at {fraction} leaves an empty part",
            ds.len()
        )));
    }
    Ok((ds.subset(&a), ds.subset(&b)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32, payload: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_IMAGES, n, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(payload);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = IDX_LABELS.to_be_bytes().to_vec();
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn idx_pair_parses() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(
            dir.path(),
            "img",
            &idx_images(2, 2, 3, &[0, 51, 102, 153, 204, 255, 1, 2, 3, 4, 5, 6]),
        );
        let lab = write(dir.path(), "lab", &idx_labels(&[7, 0]));
        let ds = load_idx(&img, &lab).unwrap();
        assert_eq!(ds.labels, vec![8, 1]);
        assert_eq!(ds.classes, 10);
        assert_eq!((ds.images[0].width(), ds.images[0].height()), (3, 2));
        assert_eq!(ds.images[0].get(2, 0, 0), 0.4);
        assert_eq!(ds.images[0].get(2, 1, 0), 1.0);
    }

    #[test]
    fn idx_reads_gzip() {
        let dir = tempfile::tempdir().unwrap();
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        gz.write_all(&idx_images(1, 1, 1, &[255])).unwrap();
        let img = write(dir.path(), "img.gz", &gz.finish().unwrap());
        let lab = write(dir.path(), "lab", &idx_labels(&[3]));
        let ds = load_idx(&img, &lab).unwrap();
        assert_eq!(ds.images[0].data(), &[1.0]);
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(dir.path(), "img", &idx_images(2, 2, 2, &[0; 7]));
        let lab = write(dir.path(), "lab", &idx_labels(&[1, 2]));
        assert!(matches!(load_idx(&img, &lab), Err(CteError::Truncated(_))));
        assert!(matches!(load_idx(&lab, &img), Err(CteError::Format(_))));
        let img = write(dir.path(), "img3", &idx_images(3, 1, 1, &[0; 3]));
        assert!(matches!(load_idx(&img, &lab), Err(CteError::Dataset(_))));
    }

    #[test]
    fn cifar_record_is_planar() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 9;
        // red (1, 0), green (0, 1), blue (31, 31)
        rec[1 + 1] = 255;
        rec[1 + 1024 + 32] = 51;
        rec[1 + 2048 + 1023] = 102;
        let p = write(dir.path(), "one.bin", &rec);
        let ds = load_cifar10(&[&p]).unwrap();
        assert_eq!(ds.labels, vec![10]);
        let im = &ds.images[0];
        assert_eq!((im.width(), im.height(), im.depth()), (32, 32, 3));
        assert_eq!(im.get(1, 0, 0), 1.0);
        assert_eq!(im.get(0, 1, 1), 0.2);
        assert_eq!(im.get(31, 31, 2), 0.4);
        assert_eq!(im.data().iter().filter(|&&v| v != 0.0).count(), 3);

        let short = write(dir.path(), "short.bin", &rec[..100]);
        assert!(matches!(load_cifar10(&[&short]), Err(CteError::Format(_))));
        rec[0] = 10;
        let bad = write(dir.path(), "bad.bin", &rec);
        assert!(matches!(load_cifar10(&[&bad]), Err(CteError::InvalidLabels(_))));
    }

    fn synthetic(n: usize, classes: usize) -> LabeledDataset {
        let images = (0..n)
            .map(|i| RawImage::from_fn(3, 2, 2, |x, y, d| (i * 13 + x + 3 * y + 7 * d) as f32 * 0.25 - 1.5))
            .collect();
        let labels = (0..n).map(|i| (i % classes) as u16 + 1).collect();
        LabeledDataset::new(images, labels, classes, "synthetic").unwrap()
    }

    #[test]
    fn generic_round_trip() {
        let ds = synthetic(7, 3);
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert_eq!(read_dataset(&buf[..]).unwrap(), ds);
        assert!(matches!(
            read_dataset(&buf[..buf.len() - 3]),
            Err(CteError::Truncated(_))
        ));
        buf[0] = b'X';
        assert!(matches!(read_dataset(&buf[..]), Err(CteError::Format(_))));
    }

    #[test]
    fn stratified_split() {
        let ds = synthetic(100, 10);
        let (a, b) = split(&ds, 0.9, 4).unwrap();
        assert_eq!((a.len(), b.len()), (90, 10));
        assert!(a.class_counts().iter().all(|&c| c == 9));
        assert!(b.class_counts().iter().all(|&c| c == 1));
        assert_eq!(split(&ds, 0.9, 4).unwrap(), (a.clone(), b));
        assert_ne!(split(&ds, 0.9, 5).unwrap().0, a);

        let uneven = synthetic(23, 4);
        let (a, b) = split(&uneven, 0.7, 1).unwrap();
        for ((na, nb), n) in a.class_counts().iter().zip(b.class_counts()).zip(uneven.class_counts()) {
            assert_eq!(na + nb, n);
            assert!((nb as f64 - 0.3 * n as f64).abs() <= 1.0);
        }

        let (_, b) = split(&ds, 0.999, 0).unwrap();
        assert_eq!(b.len(), 10);
        assert!(split(&synthetic(1, 1), 0.5, 0).is_err());
        assert!(split(&ds, 1.0, 0).is_err());
    }
}
