//! Bit functions and word calculators.
//!
//! A word calculator maps the patch around a pixel to a `K`-bit word. Bit `k`
//! of the word is the output of the `k`-th bit function applied, so the first
//! applied bit is the least significant one.

use serde::{Deserialize, Serialize};

use crate::error::{CteError, Result};
use crate::tensor::{ChannelKind, ExtendedImage};

/// Largest supported word length.
pub const MAX_WORD_BITS: usize = 16;

/// Default patch edge length.
pub const DEFAULT_PATCH_SIZE: usize = 9;

/// The four bit function families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BitKind {
    OnePixel,
    TwoPixel,
    GetBit,
    IntegralBit,
}

impl BitKind {
    pub const ALL: [BitKind; 4] = [
        BitKind::OnePixel,
        BitKind::TwoPixel,
        BitKind::GetBit,
        BitKind::IntegralBit,
    ];

    pub fn tag(self) -> u8 {
        match self {
            BitKind::OnePixel => 0,
            BitKind::TwoPixel => 1,
            BitKind::GetBit => 2,
            BitKind::IntegralBit => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    /// Whether the bit compares a measurement against a threshold.
    pub fn is_thresholded(self) -> bool {
        !matches!(self, BitKind::GetBit)
    }
}

/// A one-bit feature of a patch. Offsets are relative to the patch center.
///
/// Thresholded kinds output `1` when `value - threshold >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BitFunction {
    OnePixel {
        channel: u16,
        dx: i8,
        dy: i8,
        threshold: f32,
    },
    TwoPixel {
        channel: u16,
        dx1: i8,
        dy1: i8,
        dx2: i8,
        dy2: i8,
        threshold: f32,
    },
    GetBit {
        channel: u16,
        bit: u8,
    },
    /// Thresholded rectangle sum over `(x1, x2] x (y1, y2]` read from an
    /// integral channel.
    IntegralBit {
        channel: u16,
        x1: i8,
        y1: i8,
        x2: i8,
        y2: i8,
        threshold: f32,
    },
}

impl BitFunction {
    pub fn kind(&self) -> BitKind {
        match self {
            BitFunction::OnePixel { .. } => BitKind::OnePixel,
            BitFunction::TwoPixel { .. } => BitKind::TwoPixel,
            BitFunction::GetBit { .. } => BitKind::GetBit,
            BitFunction::IntegralBit { .. } => BitKind::IntegralBit,
        }
    }

    pub fn channel(&self) -> usize {
        match *self {
            BitFunction::OnePixel { channel, .. }
            | BitFunction::TwoPixel { channel, .. }
            | BitFunction::GetBit { channel, .. }
            | BitFunction::IntegralBit { channel, .. } => channel as usize,
        }
    }

    pub fn threshold(&self) -> Option<f32> {
        match *self {
            BitFunction::OnePixel { threshold, .. }
            | BitFunction::TwoPixel { threshold, .. }
            | BitFunction::IntegralBit { threshold, .. } => Some(threshold),
            BitFunction::GetBit { .. } => None,
        }
    }

    /// Returns a copy with the threshold replaced. Get-bit functions are unchanged.
    pub fn with_threshold(mut self, t: f32) -> Self {
        match &mut self {
            BitFunction::OnePixel { threshold, .. }
            | BitFunction::TwoPixel { threshold, .. }
            | BitFunction::IntegralBit { threshold, .. } => *threshold = t,
            BitFunction::GetBit { .. } => {}
        }
        self
    }

    /// The (up to four) offset components in `(x1, y1, x2, y2)` order.
    pub fn offsets(&self) -> [i8; 4] {
        match *self {
            BitFunction::OnePixel { dx, dy, .. } => [dx, dy, 0, 0],
            BitFunction::TwoPixel { dx1, dy1, dx2, dy2, .. } => [dx1, dy1, dx2, dy2],
            BitFunction::GetBit { .. } => [0; 4],
            BitFunction::IntegralBit { x1, y1, x2, y2, .. } => [x1, y1, x2, y2],
        }
    }

    /// Largest absolute offset the function reads.
    pub fn reach(&self) -> usize {
        self.offsets()
            .iter()
            .map(|o| o.unsigned_abs() as usize)
            .max()
            .unwrap_or(0)
    }

    /// Checks structural constraints against a patch radius and channel layout.
    pub fn validate(
        &self,
        patch_radius: usize,
        kinds: &[ChannelKind],
        allow_get_bit_on_any_channel: bool,
    ) -> Result<()> {
        let d = self.channel();
        let Some(&kind) = kinds.get(d) else {
            return Err(CteError::InvalidBitFunction(format!(
                "channel {d} out of range for {} channels",
                kinds.len()
            )));
        };
        if self.reach() > patch_radius {
            return Err(CteError::InvalidBitFunction(format!(
                "offsets {:?} exceed patch radius {patch_radius}",
                self.offsets()
            )));
        }
        match *self {
            BitFunction::IntegralBit { x1, y1, x2, y2, .. } => {
                if kind != ChannelKind::Integral {
                    return Err(CteError::ChannelKindMismatch {
                        channel: d,
                        kind: kind.to_string(),
                    });
                }
                if x1 >= x2 || y1 >= y2 {
                    return Err(CteError::InvalidBitFunction(format!(
                        "integral rectangle needs x1 < x2 and y1 < y2, got ({x1}, {y1}, {x2}, {y2})"
                    )));
                }
            }
            BitFunction::GetBit { bit, .. } => {
                if !kind.is_spatial() && !allow_get_bit_on_any_channel {
                    return Err(CteError::ChannelKindMismatch {
                        channel: d,
                        kind: kind.to_string(),
                    });
                }
                if bit as usize >= 32 {
                    return Err(CteError::InvalidBitFunction(format!("bit index {bit} >= 32")));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// The measurement compared against the threshold (the raw channel value
    /// for get-bit functions). `(x, y)` is the patch center.
    #[inline]
    pub fn underlying(&self, img: &ExtendedImage, x: usize, y: usize) -> f32 {
        let at = |dx: i8, dy: i8, d: u16| -> f32 {
            let xx = (x as isize + dx as isize) as usize;
            let yy = (y as isize + dy as isize) as usize;
            img.get(xx, yy, d as usize)
        };
        match *self {
            BitFunction::OnePixel { channel, dx, dy, .. } => at(dx, dy, channel),
            BitFunction::TwoPixel {
                channel,
                dx1,
                dy1,
                dx2,
                dy2,
                ..
            } => at(dx1, dy1, channel) - at(dx2, dy2, channel),
            BitFunction::GetBit { channel, .. } => at(0, 0, channel),
            BitFunction::IntegralBit {
                channel,
                x1,
                y1,
                x2,
                y2,
                ..
            } => at(x1, y1, channel) - at(x1, y2, channel) - at(x2, y1, channel) + at(x2, y2, channel),
        }
    }

    /// Evaluates the bit at patch center `(x, y)` without bounds checks beyond
    /// slice indexing.
    #[inline]
    pub fn eval(&self, img: &ExtendedImage, x: usize, y: usize) -> u32 {
        let v = self.underlying(img, x, y);
        match *self {
            BitFunction::GetBit { bit, .. } => get_bit(v, bit),
            BitFunction::OnePixel { threshold, .. }
            | BitFunction::TwoPixel { threshold, .. }
            | BitFunction::IntegralBit { threshold, .. } => step(v, threshold),
        }
    }

    /// ORs this function's bit, shifted to position `shift`, into the words of
    /// the `out.len()` contiguous pixels starting at `(x0, y)`.
    #[inline]
    pub fn eval_row(&self, img: &ExtendedImage, x0: usize, y: usize, shift: u32, out: &mut [u32]) {
        let n = out.len();
        let w = img.width();
        let row = |d: u16, dx: i8, dy: i8| -> &[f32] {
            let plane = img.plane(d as usize);
            let start = (y as isize + dy as isize) as usize * w + (x0 as isize + dx as isize) as usize;
            &plane[start..start + n]
        };
        match *self {
            BitFunction::OnePixel {
                channel,
                dx,
                dy,
                threshold,
            } => {
                for (o, &v) in out.iter_mut().zip(row(channel, dx, dy)) {
                    *o |= step(v, threshold) << shift;
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
                let a = row(channel, dx1, dy1);
                let b = row(channel, dx2, dy2);
                for ((o, &va), &vb) in out.iter_mut().zip(a).zip(b) {
                    *o |= step(va - vb, threshold) << shift;
                }
            }
            BitFunction::GetBit { channel, bit } => {
                for (o, &v) in out.iter_mut().zip(row(channel, 0, 0)) {
                    *o |= get_bit(v, bit) << shift;
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
                let a = row(channel, x1, y1);
                let b = row(channel, x1, y2);
                let c = row(channel, x2, y1);
                let d = row(channel, x2, y2);
                for i in 0..n {
                    out[i] |= step(a[i] - b[i] - c[i] + d[i], threshold) << shift;
                }
            }
        }
    }
}

/// Heaviside step with `step(0) = 1`.
#[inline(always)]
pub fn step(value: f32, threshold: f32) -> u32 {
    (value - threshold >= 0.0) as u32
}

#[inline(always)]
fn get_bit(value: f32, bit: u8) -> u32 {
    ((value as u32) >> bit) & 1
}

/// A pixel position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Pixel {
    pub x: usize,
    pub y: usize,
}

impl Pixel {
    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }
}

/// An axis-aligned rectangle of pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl Region {
    pub fn new(x0: usize, y0: usize, width: usize, height: usize) -> Self {
        Self { x0, y0, width, height }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, p: Pixel) -> bool {
        p.x >= self.x0 && p.x < self.x0 + self.width && p.y >= self.y0 && p.y < self.y0 + self.height
    }

    pub fn is_subset_of(&self, other: &Region) -> bool {
        self.is_empty()
            || (self.x0 >= other.x0
                && self.y0 >= other.y0
                && self.x0 + self.width <= other.x0 + other.width
                && self.y0 + self.height <= other.y0 + other.height)
    }

    /// Shrinks the region by `margin` pixels on every side.
    pub fn shrink(&self, margin: usize) -> Region {
        let width = self.width.saturating_sub(2 * margin);
        let height = self.height.saturating_sub(2 * margin);
        Region::new(self.x0 + margin, self.y0 + margin, width, height)
    }

    /// Pixels in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = Pixel> + '_ {
        (self.y0..self.y0 + self.height)
            .flat_map(move |y| (self.x0..self.x0 + self.width).map(move |x| Pixel::new(x, y)))
    }
}

/// Evaluates one bit with full bounds and channel checks.
pub fn eval_bit(f: &BitFunction, image: &ExtendedImage, p: Pixel) -> Result<u32> {
    check_patch(image, p, f.reach())?;
    let d = f.channel();
    if d >= image.depth() {
        return Err(CteError::InvalidBitFunction(format!(
            "channel {d} out of range for {} channels",
            image.depth()
        )));
    }
    let kind = image.kind(d);
    match f {
        BitFunction::IntegralBit { .. } if kind != ChannelKind::Integral => {
            return Err(CteError::ChannelKindMismatch {
                channel: d,
                kind: kind.to_string(),
            })
        }
        BitFunction::GetBit { bit, .. } => {
            if let Some(width) = image.bit_width(d) {
                if *bit as u32 >= width {
                    return Err(CteError::InvalidBitFunction(format!(
                        "bit {bit} outside the {width}-bit channel {d}"
                    )));
                }
            }
        }
        _ => {}
    }
    Ok(f.eval(image, p.x, p.y))
}

fn check_patch(image: &ExtendedImage, p: Pixel, radius: usize) -> Result<()> {
    if p.x < radius || p.y < radius || p.x + radius >= image.width() || p.y + radius >= image.height() {
        return Err(CteError::PatchOutOfBounds { x: p.x, y: p.y });
    }
    Ok(())
}

/// A flat list of bit functions applied to every patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Fern {
    bits: Vec<BitFunction>,
    patch_radius: usize,
}

impl Fern {
    pub fn new(bits: Vec<BitFunction>, patch_radius: usize) -> Result<Self> {
        if bits.is_empty() || bits.len() > MAX_WORD_BITS {
            return Err(CteError::InvalidConfig(format!(
                "a fern needs 1..={MAX_WORD_BITS} bits, got {}",
                bits.len()
            )));
        }
        if let Some(f) = bits.iter().find(|f| f.reach() > patch_radius) {
            return Err(CteError::InvalidBitFunction(format!(
                "{f:?} reaches outside patch radius {patch_radius}"
            )));
        }
        Ok(Self { bits, patch_radius })
    }

    pub fn bits(&self) -> &[BitFunction] {
        &self.bits
    }

    pub fn word_bits(&self) -> usize {
        self.bits.len()
    }

    pub fn patch_radius(&self) -> usize {
        self.patch_radius
    }

    pub fn patch_size(&self) -> usize {
        2 * self.patch_radius + 1
    }

    #[inline]
    pub fn eval_unchecked(&self, img: &ExtendedImage, x: usize, y: usize) -> u32 {
        self.bits
            .iter()
            .enumerate()
            .fold(0u32, |w, (k, f)| w | (f.eval(img, x, y) << k))
    }

    /// Words for `out.len()` contiguous pixels of row `y` starting at `x0`,
    /// evaluated one bit function at a time across the whole run.
    pub fn eval_row(&self, img: &ExtendedImage, x0: usize, y: usize, out: &mut [u32]) {
        out.fill(0);
        for (k, f) in self.bits.iter().enumerate() {
            f.eval_row(img, x0, y, k as u32, out);
        }
    }
}

/// Evaluates a fern at `p` with bounds checks.
pub fn eval_fern(fern: &Fern, image: &ExtendedImage, p: Pixel) -> Result<u32> {
    let mut word = 0u32;
    for (k, f) in fern.bits.iter().enumerate() {
        word |= eval_bit(f, image, p)? << k;
    }
    Ok(word)
}

/// A node of a long tree: `K_s` bit functions and, for non-final stages, the
/// child-directing table.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub bits: Vec<BitFunction>,
    /// Indices of this node's children in the next stage's node list.
    pub children: Vec<u32>,
    /// `2^K_s` entries, each an index into `children`.
    pub directing: Vec<u8>,
}

impl TreeNode {
    pub fn leaf(bits: Vec<BitFunction>) -> Self {
        Self {
            bits,
            children: Vec::new(),
            directing: Vec::new(),
        }
    }

    #[inline]
    fn word(&self, img: &ExtendedImage, x: usize, y: usize) -> u32 {
        self.bits
            .iter()
            .enumerate()
            .fold(0u32, |w, (k, f)| w | (f.eval(img, x, y) << k))
    }
}

/// A staged word calculator where each node's word selects the next node.
#[derive(Debug, Clone, PartialEq)]
pub struct LongTree {
    stage_bits: Vec<usize>,
    split_factors: Vec<usize>,
    stages: Vec<Vec<TreeNode>>,
    patch_radius: usize,
}

impl LongTree {
    pub fn new(
        stage_bits: Vec<usize>,
        split_factors: Vec<usize>,
        stages: Vec<Vec<TreeNode>>,
        patch_radius: usize,
    ) -> Result<Self> {
        let tree = Self {
            stage_bits,
            split_factors,
            stages,
            patch_radius,
        };
        tree.validate()?;
        Ok(tree)
    }

    fn validate(&self) -> Result<()> {
        let n_stages = self.stage_bits.len();
        let bad = |m: String| Err(CteError::InvalidTree(m));
        if n_stages == 0 {
            return bad("a tree needs at least one stage".into());
        }
        let total: usize = self.stage_bits.iter().sum();
        if total == 0 || total > MAX_WORD_BITS || self.stage_bits.contains(&0) {
            return bad(format!(
                "stage sizes {:?} must be positive and sum to at most {MAX_WORD_BITS}",
                self.stage_bits
            ));
        }
        if self.split_factors.len() + 1 != n_stages {
            return bad(format!(
                "{} stages need {} split factors, got {}",
                n_stages,
                n_stages - 1,
                self.split_factors.len()
            ));
        }
        if self.split_factors.iter().any(|&q| q == 0 || q > u8::MAX as usize + 1) {
            return bad(format!("split factors {:?} out of range", self.split_factors));
        }
        if self.stages.len() != n_stages || self.stages[0].len() != 1 {
            return bad("stage node lists must match stage count, with one root".into());
        }
        for (s, nodes) in self.stages.iter().enumerate() {
            if nodes.is_empty() {
                return bad(format!("stage {s} has no nodes"));
            }
            let last = s + 1 == n_stages;
            if !last && self.stages[s + 1].len() > nodes.len() * self.split_factors[s] {
                return bad(format!("stage {} has more nodes than stage {s} can address", s + 1));
            }
            for (i, node) in nodes.iter().enumerate() {
                if node.bits.len() != self.stage_bits[s] {
                    return bad(format!(
                        "node {i} of stage {s} has {} bits, expected {}",
                        node.bits.len(),
                        self.stage_bits[s]
                    ));
                }
                if let Some(f) = node.bits.iter().find(|f| f.reach() > self.patch_radius) {
                    return Err(CteError::InvalidBitFunction(format!(
                        "{f:?} reaches outside patch radius {}",
                        self.patch_radius
                    )));
                }
                if last {
                    if !node.children.is_empty() || !node.directing.is_empty() {
                        return bad(format!("final-stage node {i} has children"));
                    }
                    continue;
                }
                if node.children.is_empty() || node.children.len() > self.split_factors[s] {
                    return bad(format!(
                        "node {i} of stage {s} has {} children, split factor {}",
                        node.children.len(),
                        self.split_factors[s]
                    ));
                }
                if let Some(&c) = node.children.iter().find(|&&c| c as usize >= self.stages[s + 1].len()) {
                    return bad(format!("node {i} of stage {s} points at missing child {c}"));
                }
                if node.directing.len() != 1 << self.stage_bits[s] {
                    return bad(format!("node {i} of stage {s} has a directing table of the wrong size"));
                }
                if node.directing.iter().any(|&e| e as usize >= node.children.len()) {
                    return bad(format!("node {i} of stage {s} directs to a missing child slot"));
                }
            }
        }
        Ok(())
    }

    /// A single-stage tree equivalent to `fern`.
    pub fn from_fern(fern: &Fern) -> Self {
        Self {
            stage_bits: vec![fern.word_bits()],
            split_factors: Vec::new(),
            stages: vec![vec![TreeNode::leaf(fern.bits().to_vec())]],
            patch_radius: fern.patch_radius(),
        }
    }

    pub fn stage_bits(&self) -> &[usize] {
        &self.stage_bits
    }

    pub fn split_factors(&self) -> &[usize] {
        &self.split_factors
    }

    pub fn stages(&self) -> &[Vec<TreeNode>] {
        &self.stages
    }

    pub fn word_bits(&self) -> usize {
        self.stage_bits.iter().sum()
    }

    pub fn patch_radius(&self) -> usize {
        self.patch_radius
    }

    pub fn leaf_count(&self) -> usize {
        self.stages.last().map_or(0, Vec::len)
    }

    /// Iterates over every bit function of every node.
    pub fn all_bits(&self) -> impl Iterator<Item = &BitFunction> {
        self.stages.iter().flatten().flat_map(|n| n.bits.iter())
    }

    #[inline]
    pub fn eval_unchecked(&self, img: &ExtendedImage, x: usize, y: usize) -> u32 {
        let mut node = &self.stages[0][0];
        let mut word = 0u32;
        let mut shift = 0;
        for s in 0..self.stages.len() {
            let w = node.word(img, x, y);
            word |= w << shift;
            shift += self.stage_bits[s];
            if s + 1 < self.stages.len() {
                let child = node.children[node.directing[w as usize] as usize];
                node = &self.stages[s + 1][child as usize];
            }
        }
        word
    }
}

/// Evaluates a long tree at `p` with bounds checks.
///
/// Stage 1 fills the lowest bits. The emitted word determines the path taken,
/// since each stage's routing depends only on the words of earlier stages.
pub fn eval_tree(tree: &LongTree, image: &ExtendedImage, p: Pixel) -> Result<u32> {
    for f in tree.all_bits() {
        eval_bit(f, image, p)?;
    }
    Ok(tree.eval_unchecked(image, p.x, p.y))
}

/// A fern or a long tree.
#[derive(Debug, Clone, PartialEq)]
pub enum WordCalculator {
    Fern(Fern),
    Tree(LongTree),
}

impl WordCalculator {
    pub fn word_bits(&self) -> usize {
        match self {
            WordCalculator::Fern(f) => f.word_bits(),
            WordCalculator::Tree(t) => t.word_bits(),
        }
    }

    /// Number of distinct words, i.e. weight-table cells per class.
    pub fn cells(&self) -> usize {
        1 << self.word_bits()
    }

    pub fn patch_radius(&self) -> usize {
        match self {
            WordCalculator::Fern(f) => f.patch_radius(),
            WordCalculator::Tree(t) => t.patch_radius(),
        }
    }

    pub fn bit_functions(&self) -> Box<dyn Iterator<Item = &BitFunction> + '_> {
        match self {
            WordCalculator::Fern(f) => Box::new(f.bits().iter()),
            WordCalculator::Tree(t) => Box::new(t.all_bits()),
        }
    }

    pub fn validate_channels(&self, kinds: &[ChannelKind], allow_get_bit_on_any_channel: bool) -> Result<()> {
        let r = self.patch_radius();
        self.bit_functions()
            .try_for_each(|f| f.validate(r, kinds, allow_get_bit_on_any_channel))
    }

    pub fn eval(&self, image: &ExtendedImage, p: Pixel) -> Result<u32> {
        match self {
            WordCalculator::Fern(f) => eval_fern(f, image, p),
            WordCalculator::Tree(t) => eval_tree(t, image, p),
        }
    }

    #[inline]
    pub fn eval_unchecked(&self, image: &ExtendedImage, x: usize, y: usize) -> u32 {
        match self {
            WordCalculator::Fern(f) => f.eval_unchecked(image, x, y),
            WordCalculator::Tree(t) => t.eval_unchecked(image, x, y),
        }
    }

    /// Words for a run of contiguous pixels in one row. Ferns use the
    /// bit-major fast path; trees fall back to per-pixel evaluation.
    pub fn eval_row(&self, image: &ExtendedImage, x0: usize, y: usize, out: &mut [u32]) {
        match self {
            WordCalculator::Fern(f) => f.eval_row(image, x0, y, out),
            WordCalculator::Tree(t) => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = t.eval_unchecked(image, x0 + i, y);
                }
            }
        }
    }
}

/// The centered rectangle of pixels whose patches lie inside a
/// `width x height` image.
pub fn valid_area(calc: &WordCalculator, width: usize, height: usize) -> Result<Region> {
    valid_area_for_radius(calc.patch_radius(), width, height)
}

pub fn valid_area_for_radius(radius: usize, width: usize, height: usize) -> Result<Region> {
    let patch = 2 * radius + 1;
    if patch > width || patch > height {
        return Err(CteError::ImageTooSmall {
            width,
            height,
            reason: format!("patch of size {patch} does not fit"),
        });
    }
    Ok(Region::new(radius, radius, width - patch + 1, height - patch + 1))
}
