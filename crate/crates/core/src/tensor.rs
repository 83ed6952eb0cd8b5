//! Image representation and channel preparation.
//!
//! A [`RawImage`] with `D` channels is turned into an [`ExtendedImage`] with
//! `D_e >= D` channels. The channel order under a fixed [`PrepConfig`] is:
//!
//! 1. the original channels, smoothed with a triangle filter,
//! 2. one gradient-norm channel,
//! 3. `orientations` oriented-gradient channels,
//! 4. integral images of every channel from 1-3 (same order),
//! 5. the horizontal then the vertical spatial channel.
//!
//! Groups 2-3 appear only with gradients enabled, group 4 only with integral
//! channels enabled and group 5 only with spatial channels enabled. Bit
//! functions address channels by their position in this list, so the order is
//! part of the model format.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CteError, Result};

/// A dense image with `depth` channel planes, each stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    width: usize,
    height: usize,
    depth: usize,
    data: Vec<f32>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, depth: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || depth == 0 {
            return Err(CteError::InvalidConfig(format!(
                "image dimensions must be positive, got {width}x{height}x{depth}"
            )));
        }
        if data.len() != width * height * depth {
            return Err(CteError::DimensionMismatch {
                expected: format!("{} values for {width}x{height}x{depth}", width * height * depth),
                found: format!("{} values", data.len()),
            });
        }
        Ok(Self {
            width,
            height,
            depth,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, depth: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height * depth);
        for d in 0..depth {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(x, y, d));
                }
            }
        }
        Self::new(width, height, depth, data).expect("from_fn dimensions are consistent")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, d: usize) -> f32 {
        self.data[(d * self.height + y) * self.width + x]
    }

    /// Copies channel plane `d` out as a [`Channel`].
    pub fn channel(&self, d: usize) -> Channel {
        let plane = self.width * self.height;
        Channel {
            width: self.width,
            height: self.height,
            data: self.data[d * plane..(d + 1) * plane].to_vec(),
        }
    }
}

/// A single row-major image plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Channel {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(CteError::DimensionMismatch {
                expected: format!("{} values", width * height),
                found: format!("{} values", data.len()),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

/// What a channel of an [`ExtendedImage`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChannelKind {
    Original,
    GradientNorm,
    /// Oriented gradient energy for the given orientation bin.
    GradientOriented(u8),
    Integral,
    SpatialHorizontal,
    SpatialVertical,
}

impl ChannelKind {
    pub fn is_spatial(self) -> bool {
        matches!(self, ChannelKind::SpatialHorizontal | ChannelKind::SpatialVertical)
    }

    /// Channels whose values are real-valued appearance measurements.
    pub fn is_appearance(self) -> bool {
        matches!(
            self,
            ChannelKind::Original | ChannelKind::GradientNorm | ChannelKind::GradientOriented(_)
        )
    }
}

impl std::fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ChannelKind::Original => write!(f, "original"),
            ChannelKind::GradientNorm => write!(f, "gradient-norm"),
            ChannelKind::GradientOriented(o) => write!(f, "gradient-oriented[{o}]"),
            ChannelKind::Integral => write!(f, "integral"),
            ChannelKind::SpatialHorizontal => write!(f, "spatial-horizontal"),
            ChannelKind::SpatialVertical => write!(f, "spatial-vertical"),
        }
    }
}

/// Channel preparation settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepConfig {
    /// Number of oriented gradient maps.
    pub orientations: usize,
    /// Triangle filter radius applied to the original channels; 0 disables smoothing.
    pub smoothing_radius: usize,
    pub gradient_channels: bool,
    pub integral_channels: bool,
    pub spatial_channels: bool,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            orientations: 6,
            smoothing_radius: 1,
            gradient_channels: true,
            integral_channels: true,
            spatial_channels: true,
        }
    }
}

impl PrepConfig {
    /// Configuration that passes the image through unchanged.
    pub fn identity() -> Self {
        Self {
            orientations: 6,
            smoothing_radius: 0,
            gradient_channels: false,
            integral_channels: false,
            spatial_channels: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gradient_channels && self.orientations == 0 {
            return Err(CteError::InvalidConfig(
                "orientation count must be at least 1 when gradient channels are enabled".into(),
            ));
        }
        if self.orientations > u8::MAX as usize {
            return Err(CteError::InvalidConfig(format!(
                "orientation count {} exceeds 255",
                self.orientations
            )));
        }
        Ok(())
    }

    /// The channel kinds produced for a `depth`-channel input, in order.
    pub fn channel_kinds(&self, depth: usize) -> Vec<ChannelKind> {
        let mut kinds = vec![ChannelKind::Original; depth];
        if self.gradient_channels {
            kinds.push(ChannelKind::GradientNorm);
            kinds.extend((0..self.orientations).map(|o| ChannelKind::GradientOriented(o as u8)));
        }
        if self.integral_channels {
            let n = kinds.len();
            kinds.extend(std::iter::repeat(ChannelKind::Integral).take(n));
        }
        if self.spatial_channels {
            kinds.push(ChannelKind::SpatialHorizontal);
            kinds.push(ChannelKind::SpatialVertical);
        }
        kinds
    }

    pub fn extended_depth(&self, depth: usize) -> usize {
        self.channel_kinds(depth).len()
    }
}

/// Number of location bits carried by the spatial channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpatialBitBudget {
    pub horizontal: u32,
    pub vertical: u32,
}

impl SpatialBitBudget {
    pub fn for_size(width: usize, height: usize) -> Self {
        Self {
            horizontal: floor_log2(width),
            vertical: floor_log2(height),
        }
    }
}

fn floor_log2(n: usize) -> u32 {
    debug_assert!(n > 0);
    usize::BITS - 1 - n.leading_zeros()
}

/// The prepared multi-channel image read by all bit functions.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedImage {
    width: usize,
    height: usize,
    kinds: Vec<ChannelKind>,
    spatial_bits: SpatialBitBudget,
    data: Vec<f32>,
}

impl ExtendedImage {
    /// Assembles an extended image from explicit channels.
    pub fn from_channels(channels: Vec<(ChannelKind, Channel)>) -> Result<Self> {
        let Some((_, first)) = channels.first() else {
            return Err(CteError::InvalidConfig("an image needs at least one channel".into()));
        };
        let (width, height) = (first.width, first.height);
        let mut kinds = Vec::with_capacity(channels.len());
        let mut data = Vec::with_capacity(width * height * channels.len());
        for (kind, ch) in channels {
            if ch.width != width || ch.height != height {
                return Err(CteError::DimensionMismatch {
                    expected: format!("{width}x{height}"),
                    found: format!("{}x{}", ch.width, ch.height),
                });
            }
            kinds.push(kind);
            data.extend_from_slice(&ch.data);
        }
        Ok(Self {
            width,
            height,
            kinds,
            spatial_bits: SpatialBitBudget::for_size(width, height),
            data,
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn depth(&self) -> usize {
        self.kinds.len()
    }

    pub fn kinds(&self) -> &[ChannelKind] {
        &self.kinds
    }

    pub fn kind(&self, d: usize) -> ChannelKind {
        self.kinds[d]
    }

    pub fn spatial_bits(&self) -> SpatialBitBudget {
        self.spatial_bits
    }

    /// Number of readable bits of channel `d` for get-bit functions, if any.
    pub fn bit_width(&self, d: usize) -> Option<u32> {
        match self.kinds.get(d)? {
            ChannelKind::SpatialHorizontal => Some(self.spatial_bits.horizontal),
            ChannelKind::SpatialVertical => Some(self.spatial_bits.vertical),
            _ => None,
        }
    }

    #[inline]
    pub fn plane(&self, d: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[d * n..(d + 1) * n]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, d: usize) -> f32 {
        self.data[(d * self.height + y) * self.width + x]
    }

    pub fn channel(&self, d: usize) -> Channel {
        Channel {
            width: self.width,
            height: self.height,
            data: self.plane(d).to_vec(),
        }
    }
}

/// Builds the extended image for `image` under `config`.
pub fn prepare_channels(image: &RawImage, config: &PrepConfig) -> Result<ExtendedImage> {
    config.validate()?;
    let (w, h) = (image.width(), image.height());
    if config.gradient_channels && (w < 3 || h < 3) {
        return Err(CteError::ImageTooSmall {
            width: w,
            height: h,
            reason: "gradient channels need at least 3x3 pixels".into(),
        });
    }
    if config.spatial_channels && (w < 2 || h < 2) {
        return Err(CteError::ImageTooSmall {
            width: w,
            height: h,
            reason: "spatial channels need at least 2x2 pixels".into(),
        });
    }

    let mut channels: Vec<(ChannelKind, Channel)> = (0..image.depth())
        .map(|d| {
            let ch = image.channel(d);
            (ChannelKind::Original, smooth_channel(&ch, config.smoothing_radius))
        })
        .collect();

    if config.gradient_channels {
        let originals: Vec<&Channel> = channels.iter().map(|(_, c)| c).collect();
        let grads = gradient_channels_multi(&originals, config.orientations);
        let mut grads = grads.into_iter();
        channels.push((ChannelKind::GradientNorm, grads.next().expect("norm channel")));
        channels.extend(
            grads
                .enumerate()
                .map(|(o, c)| (ChannelKind::GradientOriented(o as u8), c)),
        );
    }

    if config.integral_channels {
        let integrals: Vec<_> = channels
            .iter()
            .map(|(_, c)| (ChannelKind::Integral, integral_channel(c)))
            .collect();
        channels.extend(integrals);
    }

    if config.spatial_channels {
        let (hor, ver) = spatial_channels(w, h)?;
        channels.push((ChannelKind::SpatialHorizontal, hor));
        channels.push((ChannelKind::SpatialVertical, ver));
    }

    ExtendedImage::from_channels(channels)
}

/// Prepares many images, in parallel.
pub fn prepare_batch(images: &[RawImage], config: &PrepConfig) -> Result<Vec<ExtendedImage>> {
    images.par_iter().map(|img| prepare_channels(img, config)).collect()
}

/// Gradient norm followed by `orientations` oriented-gradient channels.
///
/// The per-pixel sum of the oriented channels equals the norm channel exactly.
pub fn gradient_channels(channel: &Channel, orientations: usize) -> Result<Vec<Channel>> {
    if orientations == 0 {
        return Err(CteError::InvalidConfig("orientation count must be at least 1".into()));
    }
    Ok(gradient_channels_multi(&[channel], orientations))
}

// For multi-channel input each pixel uses the gradient of the channel with the
// largest magnitude there.
fn gradient_channels_multi(channels: &[&Channel], orientations: usize) -> Vec<Channel> {
    let (w, h) = (channels[0].width, channels[0].height);
    let mut out: Vec<Channel> = (0..=orientations).map(|_| Channel::zeros(w, h)).collect();
    let bin_width = PI / orientations as f64;

    for y in 0..h {
        for x in 0..w {
            let mut best = (0.0f64, 0.0f64, -1.0f64);
            for ch in channels {
                let gx = derivative(w, x, |i| ch.get(i, y) as f64);
                let gy = derivative(h, y, |j| ch.get(x, j) as f64);
                let mag2 = gx * gx + gy * gy;
                if mag2 > best.2 {
                    best = (gx, gy, mag2);
                }
            }
            let (gx, gy, mag2) = best;
            let norm = mag2.sqrt() as f32;
            let idx = y * w + x;
            out[0].data[idx] = norm;
            if norm == 0.0 {
                continue;
            }

            let mut theta = gy.atan2(gx);
            if theta < 0.0 {
                theta += PI;
            }
            if theta >= PI {
                theta -= PI;
            }
            let pos = theta / bin_width;
            let lower = (pos.floor() as usize) % orientations;
            let upper = (lower + 1) % orientations;
            let frac = pos - pos.floor();

            // The larger share is at least half the norm, so the remainder is an
            // exact subtraction and the two shares add back to `norm` exactly.
            let (big_bin, small_bin, big_frac) = if frac <= 0.5 {
                (lower, upper, 1.0 - frac)
            } else {
                (upper, lower, frac)
            };
            let big = ((norm as f64) * big_frac) as f32;
            let small = norm - big;
            out[1 + big_bin].data[idx] += big;
            out[1 + small_bin].data[idx] += small;
        }
    }
    out
}

/// Central difference in the interior, one-sided at the borders.
#[inline]
fn derivative(n: usize, i: usize, f: impl Fn(usize) -> f64) -> f64 {
    if n < 2 {
        0.0
    } else if i == 0 {
        f(1) - f(0)
    } else if i == n - 1 {
        f(n - 1) - f(n - 2)
    } else {
        (f(i + 1) - f(i - 1)) * 0.5
    }
}

/// Inclusive integral image: `out(x, y) = sum of in(x', y')` over `x' <= x, y' <= y`.
///
/// Prefix sums run along each row first, then down each column, in `f64`.
pub fn integral_channel(channel: &Channel) -> Channel {
    let (w, h) = (channel.width, channel.height);
    let mut acc = vec![0.0f64; w * h];
    for y in 0..h {
        let mut run = 0.0f64;
        for x in 0..w {
            run += channel.data[y * w + x] as f64;
            acc[y * w + x] = run;
        }
    }
    for y in 1..h {
        for x in 0..w {
            acc[y * w + x] += acc[(y - 1) * w + x];
        }
    }
    Channel {
        width: w,
        height: h,
        data: acc.into_iter().map(|v| v as f32).collect(),
    }
}

/// Horizontal and vertical location channels.
///
/// Pixel column `x` stores `floor(x * 2^N^H / width)`, an `N^H`-bit code whose
/// most significant bit splits the image into left and right halves; the
/// vertical channel is analogous.
pub fn spatial_channels(width: usize, height: usize) -> Result<(Channel, Channel)> {
    if width < 2 || height < 2 {
        return Err(CteError::ImageTooSmall {
            width,
            height,
            reason: "spatial channels need at least 2x2 pixels".into(),
        });
    }
    let budget = SpatialBitBudget::for_size(width, height);
    let hor = Channel::from_fn(width, height, |x, _| {
        quantized_location(x, width, budget.horizontal) as f32
    });
    let ver = Channel::from_fn(width, height, |_, y| {
        quantized_location(y, height, budget.vertical) as f32
    });
    Ok((hor, ver))
}

fn quantized_location(pos: usize, extent: usize, bits: u32) -> u32 {
    ((pos << bits) / extent) as u32
}

/// Separable triangle-filter smoothing with symmetric border reflection.
///
/// The kernel for radius `r` has weights `(r + 1 - |k|) / (r + 1)^2` for
/// `|k| <= r`; radius 0 returns the channel unchanged.
pub fn smooth_channel(channel: &Channel, radius: usize) -> Channel {
    if radius == 0 {
        return channel.clone();
    }
    let (w, h) = (channel.width, channel.height);
    let norm = ((radius + 1) * (radius + 1)) as f64;
    let kernel: Vec<f64> = (0..=2 * radius)
        .map(|k| (radius + 1 - k.abs_diff(radius)) as f64 / norm)
        .collect();
    let r = radius as isize;

    let mut horizontal = vec![0.0f64; w * h];
    for y in 0..h {
        let row = &channel.data[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kw) in kernel.iter().enumerate() {
                let xi = reflect(x as isize + k as isize - r, w);
                acc += kw * row[xi] as f64;
            }
            horizontal[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kw) in kernel.iter().enumerate() {
                let yi = reflect(y as isize + k as isize - r, h);
                acc += kw * horizontal[yi * w + x];
            }
            out[y * w + x] = acc as f32;
        }
    }
    Channel {
        width: w,
        height: h,
        data: out,
    }
}

/// Symmetric reflection (`-1 -> 0`, `n -> n - 1`), folded until in range.
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_channel(w: usize, h: usize, seed: u64) -> Channel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Channel::from_fn(w, h, |_, _| rng.gen::<f32>())
    }

    #[test]
    fn mnist_sized_channel_count() {
        let img = RawImage::from_fn(28, 28, 1, |x, y, _| ((x * y) % 7) as f32 / 7.0);
        let cfg = PrepConfig::default();
        let ext = prepare_channels(&img, &cfg).unwrap();
        assert_eq!(ext.depth(), 18);
        assert_eq!(cfg.extended_depth(1), 18);
        assert_eq!(ext.kind(0), ChannelKind::Original);
        assert_eq!(ext.kind(1), ChannelKind::GradientNorm);
        assert_eq!(ext.kind(7), ChannelKind::GradientOriented(5));
        assert_eq!(ext.kind(8), ChannelKind::Integral);
        assert_eq!(ext.kind(16), ChannelKind::SpatialHorizontal);
        assert_eq!(ext.kind(17), ChannelKind::SpatialVertical);
    }

    #[test]
    fn identity_preparation() {
        let img = RawImage::from_fn(5, 4, 3, |x, y, d| (x + 10 * y + 100 * d) as f32);
        let ext = prepare_channels(&img, &PrepConfig::identity()).unwrap();
        assert_eq!(ext.depth(), 3);
        for d in 0..3 {
            assert_eq!(ext.plane(d), img.channel(d).data.as_slice());
        }
    }

    #[test]
    fn constant_image_has_no_gradient() {
        let img = RawImage::from_fn(8, 8, 1, |_, _, _| 0.3);
        let ext = prepare_channels(&img, &PrepConfig::default()).unwrap();
        for d in 1..=7 {
            assert!(ext.plane(d).iter().all(|&v| v == 0.0), "channel {d}");
        }
    }

    #[test]
    fn preparation_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = RawImage::from_fn(12, 10, 2, |_, _, _| rng.gen());
        let a = prepare_channels(&img, &PrepConfig::default()).unwrap();
        let b = prepare_channels(&img, &PrepConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_small_for_gradients() {
        let img = RawImage::from_fn(2, 5, 1, |_, _, _| 0.0);
        assert!(matches!(
            prepare_channels(&img, &PrepConfig::default()),
            Err(CteError::ImageTooSmall { .. })
        ));
        let cfg = PrepConfig {
            orientations: 0,
            ..PrepConfig::default()
        };
        let img = RawImage::from_fn(5, 5, 1, |_, _, _| 0.0);
        assert!(matches!(prepare_channels(&img, &cfg), Err(CteError::InvalidConfig(_))));
    }

    #[test]
    fn ramp_gradient() {
        let ramp = Channel::from_fn(8, 6, |x, _| x as f32);
        let out = gradient_channels(&ramp, 6).unwrap();
        assert_eq!(out.len(), 7);
        assert!(out[0].data.iter().all(|&v| v == 1.0));
        assert!(out[1].data.iter().all(|&v| v == 1.0));
        for ch in &out[2..] {
            assert!(ch.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn constant_gradient_is_zero() {
        let c = Channel::from_fn(5, 5, |_, _| 2.0);
        for ch in gradient_channels(&c, 4).unwrap() {
            assert!(ch.data.iter().all(|&v| v == 0.0));
        }
        assert!(gradient_channels(&c, 0).is_err());
    }

    #[test]
    fn oriented_energy_is_conserved() {
        for seed in 0..20 {
            let c = random_channel(8, 8, seed);
            let out = gradient_channels(&c, 6).unwrap();
            for i in 0..64 {
                let sum: f64 = out[1..].iter().map(|ch| ch.data[i] as f64).sum();
                let norm = out[0].data[i] as f64;
                assert!((sum - norm).abs() <= 1e-9 * norm.max(1e-300), "{sum} vs {norm}");
            }
        }
    }

    #[test]
    fn integral_of_ones() {
        let ones = Channel::from_fn(4, 4, |_, _| 1.0);
        let ii = integral_channel(&ones);
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(ii.get(x, y), ((x + 1) * (y + 1)) as f32);
            }
        }
    }

    #[test]
    fn integral_of_corner_impulse() {
        let c = Channel::from_fn(5, 3, |x, y| if x == 0 && y == 0 { 7.0 } else { 0.0 });
        assert!(integral_channel(&c).data.iter().all(|&v| v == 7.0));
    }

    #[test]
    fn integral_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = Channel::from_fn(5, 5, |_, _| rng.gen_range(-20..20) as f32);
        let ii = integral_channel(&c);
        for y in 0..5 {
            for x in 0..5 {
                let mut s = 0.0f32;
                for yy in 0..=y {
                    for xx in 0..=x {
                        s += c.get(xx, yy);
                    }
                }
                assert_eq!(ii.get(x, y), s);
            }
        }
    }

    #[test]
    fn spatial_codes() {
        assert_eq!(
            SpatialBitBudget::for_size(28, 32),
            SpatialBitBudget {
                horizontal: 4,
                vertical: 5
            }
        );
        let (hor, ver) = spatial_channels(28, 28).unwrap();
        // 15 * 16 / 28 = 8.57 -> 8: right half, first column of the third quarter.
        assert_eq!(hor.get(15, 0), 8.0);
        assert_eq!(hor.get(27, 3), 15.0);
        assert_eq!(ver.get(3, 27), 15.0);
        assert_eq!(hor.get(0, 9), 0.0);

        let (hor, _) = spatial_channels(2, 2).unwrap();
        assert_eq!(hor.data, vec![0.0, 1.0, 0.0, 1.0]);
        assert!(spatial_channels(1, 5).is_err());
    }

    #[test]
    fn spatial_top_bits_form_two_by_two_grid() {
        for &(w, h) in &[(28usize, 28usize), (32, 32), (36, 30)] {
            let budget = SpatialBitBudget::for_size(w, h);
            let (hor, ver) = spatial_channels(w, h).unwrap();
            let mut counts = [0usize; 4];
            for y in 0..h {
                for x in 0..w {
                    let bx = (hor.get(x, y) as u32 >> (budget.horizontal - 1)) & 1;
                    let by = (ver.get(x, y) as u32 >> (budget.vertical - 1)) & 1;
                    assert_eq!(bx, (2 * x >= w) as u32);
                    assert_eq!(by, (2 * y >= h) as u32);
                    counts[(by * 2 + bx) as usize] += 1;
                }
            }
            assert!(counts.iter().all(|&c| c > 0));
        }
    }

    #[test]
    fn spatial_channels_ignore_content() {
        let a = RawImage::from_fn(9, 9, 1, |_, _, _| 0.0);
        let b = RawImage::from_fn(9, 9, 1, |x, y, _| (x * y) as f32);
        let ea = prepare_channels(&a, &PrepConfig::default()).unwrap();
        let eb = prepare_channels(&b, &PrepConfig::default()).unwrap();
        let n = ea.depth();
        assert_eq!(ea.plane(n - 2), eb.plane(n - 2));
        assert_eq!(ea.plane(n - 1), eb.plane(n - 1));
    }

    #[test]
    fn smoothing() {
        let c = random_channel(6, 5, 1);
        assert_eq!(smooth_channel(&c, 0), c);

        let k = Channel::from_fn(7, 6, |_, _| 0.25);
        for r in 1..4 {
            for v in smooth_channel(&k, r).data {
                assert!((v - 0.25).abs() < 1e-7);
            }
        }

        let impulse = Channel::from_fn(5, 5, |x, y| if x == 2 && y == 2 { 1.0 } else { 0.0 });
        let s = smooth_channel(&impulse, 1);
        let expected = [[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]];
        for y in 0..5 {
            for x in 0..5 {
                let e = if (1..=3).contains(&x) && (1..=3).contains(&y) {
                    expected[y - 1][x - 1] / 16.0
                } else {
                    0.0
                };
                assert_eq!(s.get(x, y), e, "({x}, {y})");
            }
        }
    }

    #[test]
    fn reflection() {
        assert_eq!(reflect(-1, 5), 0);
        assert_eq!(reflect(-2, 5), 1);
        assert_eq!(reflect(5, 5), 4);
        assert_eq!(reflect(7, 1), 0);
    }
}
