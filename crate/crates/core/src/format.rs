//! Binary model files.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! "CTE1"  u32 version  u32 C  u32 M  u32 K  u32 width  u32 height  u32 depth
//! prep:   u32 orientations  u32 smoothing-radius  u8 flags (1 gradient, 2 integral, 4 spatial)
//! M x table:
//!     u8 kind (0 fern, 1 tree)  u8 patch-radius  u8 spatial-bits
//!     fern: u8 K, K x bit record
//!     tree: u8 stages, stages x u8 K_s, (stages-1) x u8 q_s,
//!           per stage: u32 nodes, per node: K_s x bit record and, unless final,
//!           u8 children, children x u32, 2^K_s x u8 directing entries
//!     u32 x0  u32 y0  u32 width  u32 height
//!     cells x C f32 weights (word-major)
//! C x f32 biases
//! u32 CRC32 of every preceding byte
//! ```
//!
//! A bit record is `u8 kind, u16 channel, 4 x i8 offsets, f32 threshold, u8 bit`.

use std::fs;
use std::path::Path;

use crate::ensemble::{ConvTable, Ensemble, ImageDims};
use crate::error::{CteError, Result};
use crate::tensor::PrepConfig;
use crate::words::{BitFunction, BitKind, Fern, LongTree, Region, TreeNode, WordCalculator};

pub const MAGIC: &[u8; 4] = b"CTE1";
pub const FORMAT_VERSION: u32 = 1;

const TAG_FERN: u8 = 0;
const TAG_TREE: u8 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn i8(&mut self, v: i8) {
        self.buf.push(v as u8);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn usize32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| CteError::Format(format!("{v} does not fit in u32")))?;
        self.u32(v);
        Ok(())
    }
    fn usize8(&mut self, v: usize) -> Result<()> {
        let v = u8::try_from(v).map_err(|_| CteError::Format(format!("{v} does not fit in u8")))?;
        self.u8(v);
        Ok(())
    }

    fn bit(&mut self, f: &BitFunction) -> Result<()> {
        self.u8(f.kind().tag());
        let ch = u16::try_from(f.channel())
            .map_err(|_| CteError::Format(format!("channel {} does not fit in u16", f.channel())))?;
        self.u16(ch);
        for o in f.offsets() {
            self.i8(o);
        }
        self.f32(f.threshold().unwrap_or(0.0));
        self.u8(match f {
            BitFunction::GetBit { bit, .. } => *bit,
            _ => 0,
        });
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CteError::Truncated(format!(
                "needed {n} bytes at offset {}, only {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn i8(&mut self) -> Result<i8> {
        Ok(self.u8()? as i8)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn bit(&mut self) -> Result<BitFunction> {
        let tag = self.u8()?;
        let kind = BitKind::from_tag(tag).ok_or_else(|| CteError::Format(format!("unknown bit kind {tag}")))?;
        let channel = self.u16()?;
        let o = [self.i8()?, self.i8()?, self.i8()?, self.i8()?];
        let threshold = self.f32()?;
        let bit = self.u8()?;
        Ok(match kind {
            BitKind::OnePixel => BitFunction::OnePixel {
                channel,
                dx: o[0],
                dy: o[1],
                threshold,
            },
            BitKind::TwoPixel => BitFunction::TwoPixel {
                channel,
                dx1: o[0],
                dy1: o[1],
                dx2: o[2],
                dy2: o[3],
                threshold,
            },
            BitKind::GetBit => BitFunction::GetBit { channel, bit },
            BitKind::IntegralBit => BitFunction::IntegralBit {
                channel,
                x1: o[0],
                y1: o[1],
                x2: o[2],
                y2: o[3],
                threshold,
            },
        })
    }

    /// Fails early on counts that cannot fit in the remaining bytes.
    fn check_count(&self, count: usize, bytes_each: usize) -> Result<()> {
        if count.saturating_mul(bytes_each) > self.buf.len() - self.pos {
            return Err(CteError::Truncated(format!(
                "{count} records of {bytes_each} bytes exceed the remaining input"
            )));
        }
        Ok(())
    }
}

/// Serializes an ensemble to bytes.
pub fn encode_model(ens: &Ensemble) -> Result<Vec<u8>> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.usize32(ens.classes())?;
    w.usize32(ens.tables().len())?;
    let k = ens
        .tables()
        .iter()
        .map(|t| t.calculator().word_bits())
        .max()
        .unwrap_or(0);
    w.usize32(k)?;
    let dims = ens.dims();
    w.usize32(dims.width)?;
    w.usize32(dims.height)?;
    w.usize32(dims.depth)?;

    let prep = ens.prep_config();
    w.usize32(prep.orientations)?;
    w.usize32(prep.smoothing_radius)?;
    w.u8(prep.gradient_channels as u8 | (prep.integral_channels as u8) << 1 | (prep.spatial_channels as u8) << 2);

    for t in ens.tables() {
        match t.calculator() {
            WordCalculator::Fern(f) => {
                w.u8(TAG_FERN);
                w.usize8(f.patch_radius())?;
                w.u8(t.spatial_bits());
                w.usize8(f.word_bits())?;
                for b in f.bits() {
                    w.bit(b)?;
                }
            }
            WordCalculator::Tree(tree) => {
                w.u8(TAG_TREE);
                w.usize8(tree.patch_radius())?;
                w.u8(t.spatial_bits());
                w.usize8(tree.stage_bits().len())?;
                for &k in tree.stage_bits() {
                    w.usize8(k)?;
                }
                for &q in tree.split_factors() {
                    w.usize8(q)?;
                }
                let last = tree.stages().len() - 1;
                for (s, nodes) in tree.stages().iter().enumerate() {
                    w.usize32(nodes.len())?;
                    for node in nodes {
                        for b in &node.bits {
                            w.bit(b)?;
                        }
                        if s < last {
                            w.usize8(node.children.len())?;
                            for &c in &node.children {
                                w.u32(c);
                            }
                            w.buf.extend_from_slice(&node.directing);
                        }
                    }
                }
            }
        }
        let a = t.area();
        w.usize32(a.x0)?;
        w.usize32(a.y0)?;
        w.usize32(a.width)?;
        w.usize32(a.height)?;
        for &v in t.weights() {
            w.f32(v);
        }
    }
    for &b in ens.biases() {
        w.f32(b);
    }
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    Ok(w.buf)
}

/// Parses an ensemble from bytes, verifying magic, version and checksum.
pub fn decode_model(bytes: &[u8]) -> Result<Ensemble> {
    if bytes.len() < 8 {
        return Err(CteError::Truncated(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(CteError::Format(format!("bad magic bytes {:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version == 0 || version > FORMAT_VERSION {
        return Err(CteError::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    if bytes.len() < 12 {
        return Err(CteError::Truncated("missing checksum".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CteError::Checksum { stored, computed });
    }

    let mut r = Reader { buf: body, pos: 8 };
    let classes = r.usize()?;
    let m = r.usize()?;
    let _k = r.usize()?;
    let dims = ImageDims {
        width: r.usize()?,
        height: r.usize()?,
        depth: r.usize()?,
    };
    let orientations = r.usize()?;
    let smoothing_radius = r.usize()?;
    let flags = r.u8()?;
    let prep = PrepConfig {
        orientations,
        smoothing_radius,
        gradient_channels: flags & 1 != 0,
        integral_channels: flags & 2 != 0,
        spatial_channels: flags & 4 != 0,
    };

    r.check_count(m, 3)?;
    let mut tables = Vec::with_capacity(m);
    for _ in 0..m {
        let tag = r.u8()?;
        let radius = r.u8()? as usize;
        let spatial_bits = r.u8()?;
        let calc = match tag {
            TAG_FERN => {
                let k = r.u8()? as usize;
                let bits = (0..k).map(|_| r.bit()).collect::<Result<Vec<_>>>()?;
                WordCalculator::Fern(Fern::new(bits, radius)?)
            }
            TAG_TREE => {
                let n_stages = r.u8()? as usize;
                let stage_bits = (0..n_stages)
                    .map(|_| r.u8().map(usize::from))
                    .collect::<Result<Vec<_>>>()?;
                let splits = (0..n_stages.saturating_sub(1))
                    .map(|_| r.u8().map(usize::from))
                    .collect::<Result<Vec<_>>>()?;
                let mut stages = Vec::with_capacity(n_stages);
                for (s, &ks) in stage_bits.iter().enumerate() {
                    let n_nodes = r.usize()?;
                    r.check_count(n_nodes, ks * 13)?;
                    let mut nodes = Vec::with_capacity(n_nodes);
                    for _ in 0..n_nodes {
                        let bits = (0..ks).map(|_| r.bit()).collect::<Result<Vec<_>>>()?;
                        if s + 1 < n_stages {
                            let nc = r.u8()? as usize;
                            let children = (0..nc).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
                            let directing = r.take(1 << ks)?.to_vec();
                            nodes.push(TreeNode {
                                bits,
                                children,
                                directing,
                            });
                        } else {
                            nodes.push(TreeNode::leaf(bits));
                        }
                    }
                    stages.push(nodes);
                }
                WordCalculator::Tree(LongTree::new(stage_bits, splits, stages, radius)?)
            }
            other => return Err(CteError::Format(format!("unknown calculator kind {other}"))),
        };
        let area = Region::new(r.usize()?, r.usize()?, r.usize()?, r.usize()?);
        let n_weights = calc.cells() * classes;
        r.check_count(n_weights, 4)?;
        let weights = (0..n_weights).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        tables.push(ConvTable::new(calc, area, weights, classes, spatial_bits)?);
    }
    r.check_count(classes, 4)?;
    let biases = (0..classes).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    if r.pos != body.len() {
        return Err(CteError::Format(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ensemble::new(tables, biases, prep, dims)
}

pub fn save_model(ens: &Ensemble, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_model(ens)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Ensemble> {
    decode_model(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Ensemble {
        let fern = Fern::new(
            vec![
                BitFunction::OnePixel {
                    channel: 0,
                    dx: 1,
                    dy: -1,
                    threshold: 0.25,
                },
                BitFunction::GetBit { channel: 1, bit: 1 },
            ],
            1,
        )
        .unwrap();
        let prep = PrepConfig {
            spatial_channels: true,
            ..PrepConfig::identity()
        };
        let t = ConvTable::new(
            WordCalculator::Fern(fern),
            Region::new(1, 1, 4, 4),
            (0..8).map(|v| v as f32 * 0.5).collect(),
            2,
            1,
        )
        .unwrap();
        Ensemble::new(
            vec![t],
            vec![0.5, -0.5],
            prep,
            ImageDims {
                width: 6,
                height: 6,
                depth: 1,
            },
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_bytes() {
        let e = tiny();
        let bytes = encode_model(&e).unwrap();
        assert_eq!(&bytes[..4], b"CTE1");
        assert_eq!(decode_model(&bytes).unwrap(), e);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_model(&tiny()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_model(&bytes), Err(CteError::Format(_))));
    }

    #[test]
    fn future_version() {
        let mut bytes = encode_model(&tiny()).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            decode_model(&bytes),
            Err(CteError::UnsupportedVersion { found: 2, .. })
        ));
    }

    #[test]
    fn corrupted_payload() {
        let mut bytes = encode_model(&tiny()).unwrap();
        let n = bytes.len();
        bytes[n - 10] ^= 0xff;
        assert!(matches!(decode_model(&bytes), Err(CteError::Checksum { .. })));
    }

    #[test]
    fn truncated_file() {
        let bytes = encode_model(&tiny()).unwrap();
        assert!(decode_model(&bytes[..6]).is_err());
        // Truncation with a recomputed checksum still fails to parse.
        let mut cut = bytes[..bytes.len() - 12].to_vec();
        let crc = crc32fast::hash(&cut);
        cut.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode_model(&cut), Err(CteError::Truncated(_))));
    }
}
