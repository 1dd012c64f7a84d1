//! Deterministic numeric primitives: rank-3 tensors, binary masks, masked
//! channel statistics and seeded Gaussian noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Rank-3 array (channels x height x width), row-major by (channel, row,
/// column). Holds latent-space z values or pixel-space images alike.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl LatentTensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::shape(
                "positive dims",
                format!("{channels}x{height}x{width}"),
            ));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(
                format!("{} values", channels * height * width),
                format!("{}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("nonfinite value in tensor data".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn constant(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, a: f64) -> Self {
        self.map(|v| a * v)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a - b)
    }

    /// self + a * other.
    pub fn add_scaled(&self, other: &Self, a: f64) -> Result<Self> {
        self.zip(other, |s, o| s + a * o)
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// ||self - other|| / max(||other||, eps).
    pub fn rel_l2_error(&self, other: &Self) -> Result<f64> {
        let diff = self.sub(other)?;
        Ok(diff.norm_l2() / other.norm_l2().max(1e-300))
    }

    /// Checks the mask spatial dims against this tensor.
    pub fn check_mask(&self, m: &Mask) -> Result<()> {
        if self.height == m.height() && self.width == m.width() {
            Ok(())
        } else {
            Err(Error::shape(
                format!("mask {}x{}", self.height, self.width),
                format!("mask {}x{}", m.height(), m.width()),
            ))
        }
    }

    /// Zeroes every site outside the mask (broadcast across channels).
    pub fn mul_mask(&self, m: &Mask) -> Result<Self> {
        self.check_mask(m)?;
        Ok(Self::from_fn(self.channels, self.height, self.width, |c, y, x| {
            if m.get(y, x) {
                self.at(c, y, x)
            } else {
                0.0
            }
        }))
    }

    /// Per-site select: inside the mask take `self`, outside take `other`.
    pub fn select_masked(&self, other: &Self, m: &Mask) -> Result<Self> {
        self.check_same_shape(other)?;
        self.check_mask(m)?;
        Ok(Self::from_fn(self.channels, self.height, self.width, |c, y, x| {
            if m.get(y, x) {
                self.at(c, y, x)
            } else {
                other.at(c, y, x)
            }
        }))
    }

    /// SHA-256 over the little-endian f64 bytes, prefixed by the shape.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.channels as u64).to_le_bytes());
        hasher.update((self.height as u64).to_le_bytes());
        hasher.update((self.width as u64).to_le_bytes());
        for v in &self.data {
            hasher.update(v.to_le_bytes());
        }
        hex_digest(hasher)
    }
}

/// Binary H x W mask; values are strictly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(y, x)));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Builds a mask from 0/nonzero bytes.
    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width {
            return Err(Error::shape(
                format!("{} mask bytes", height * width),
                format!("{}", bytes.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            data: bytes.iter().map(|&b| u8::from(b != 0)).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = u8::from(v);
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn active_count(&self) -> usize {
        self.data.iter().filter(|&&b| b != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.active_count() == 0
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&b| 1 - b).collect(),
        }
    }

    pub fn xor(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| a ^ b)
                .collect(),
        })
    }

    pub fn is_subset_of(&self, other: &Self) -> Result<bool> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .all(|(&a, &b)| a <= b))
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.height == other.height && self.width == other.width {
            Ok(())
        } else {
            Err(Error::shape(
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ))
        }
    }

    /// Center-sample downscaling by an integer factor, then re-binarization.
    pub fn downsample(&self, f: usize) -> Result<Self> {
        if f == 0 || self.height % f != 0 || self.width % f != 0 {
            return Err(Error::shape(
                format!("dims divisible by {f}"),
                format!("{}x{}", self.height, self.width),
            ));
        }
        let (h, w) = (self.height / f, self.width / f);
        Ok(Self::from_fn(h, w, |y, x| {
            self.get(y * f + f / 2, x * f + f / 2)
        }))
    }

    /// Chebyshev dilation by `radius` sites.
    pub fn dilate(&self, radius: usize) -> Self {
        if radius == 0 {
            return self.clone();
        }
        let r = radius as isize;
        Self::from_fn(self.height, self.width, |y, x| {
            for dy in -r..=r {
                for dx in -r..=r {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny >= 0
                        && nx >= 0
                        && (ny as usize) < self.height
                        && (nx as usize) < self.width
                        && self.get(ny as usize, nx as usize)
                    {
                        return true;
                    }
                }
            }
            false
        })
    }

    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.height as u64).to_le_bytes());
        hasher.update((self.width as u64).to_le_bytes());
        hasher.update(&self.data);
        hex_digest(hasher)
    }
}

/// Per-channel mean and population standard deviation over a masked support.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub count: usize,
}

impl ChannelStats {
    /// Flattened (mean ++ std) vector, used by the style proxy metric.
    pub fn concat(&self) -> Vec<f64> {
        let mut v = self.mean.clone();
        v.extend_from_slice(&self.std);
        v
    }
}

/// Per-channel mean/std of `t` over the active sites of `m` only.
///
/// Uses the population convention (divide by count) and a two-pass
/// accumulation.
pub fn masked_channel_stats(t: &LatentTensor, m: &Mask) -> Result<ChannelStats> {
    t.check_mask(m)?;
    let count = m.active_count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let mut mean = Vec::with_capacity(t.channels());
    let mut std = Vec::with_capacity(t.channels());
    for c in 0..t.channels() {
        let mut acc = 0.0f64;
        for y in 0..t.height() {
            for x in 0..t.width() {
                if m.get(y, x) {
                    acc += t.at(c, y, x);
                }
            }
        }
        let mu = acc / count as f64;
        let mut var = 0.0f64;
        for y in 0..t.height() {
            for x in 0..t.width() {
                if m.get(y, x) {
                    let d = t.at(c, y, x) - mu;
                    var += d * d;
                }
            }
        }
        mean.push(mu);
        std.push((var / count as f64).max(0.0).sqrt());
    }
    Ok(ChannelStats { mean, std, count })
}

/// Per-channel stats over every site.
pub fn channel_stats(t: &LatentTensor) -> ChannelStats {
    let all = Mask::ones(t.height(), t.width());
    masked_channel_stats(t, &all).expect("all-ones mask is never empty")
}

/// Standard-normal tensor, a pure function of (shape, seed).
pub fn gaussian_noise(channels: usize, height: usize, width: usize, seed: u64) -> Result<LatentTensor> {
    if channels == 0 || height == 0 || width == 0 {
        return Err(Error::shape(
            "positive dims",
            format!("{channels}x{height}x{width}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..channels * height * width)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Ok(LatentTensor {
        channels,
        height,
        width,
        data,
    })
}

/// Derives a named substream seed from the run seed; all randomness in a run
/// flows from one seed through these labels.
pub fn subseed(seed: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Seeded RNG for a named substream.
pub fn substream_rng(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(subseed(seed, label))
}

pub(crate) fn hex_digest(hasher: Sha256) -> String {
    let bytes = hasher.finalize();
    let mut s = String::with_capacity(64);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// SHA-256 hex digest of raw bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex_digest(hasher)
}
