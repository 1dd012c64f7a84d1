//! Desk-scale evaluation: Sobel edge maps, SSIM, the combined content
//! similarity score, and a channel-statistics style proxy standing in for a
//! learned style discriminator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::MaskSet;
use crate::tensor::{channel_stats, masked_channel_stats, ChannelStats, LatentTensor, Mask};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ssim_bg: f64,
    pub ssim_fg: f64,
    /// (1 + SSIM_bg)(1 + SSIM_fg) / 4.
    pub content_similarity: f64,
    /// 1 / (1 + d) over channel-statistic distance; a proxy, not the paper's
    /// learned discriminator.
    pub style_proxy: f64,
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 { -i - 1 } else if i >= n { 2 * n - 1 - i } else { i };
    j as usize
}

fn luminance(x: &LatentTensor) -> LatentTensor {
    match x.channels() {
        1 => x.clone(),
        3 => LatentTensor::from_fn(1, x.height(), x.width(), |_, y, xx| {
            0.2989 * x.at(0, y, xx) + 0.587 * x.at(1, y, xx) + 0.114 * x.at(2, y, xx)
        }),
        c => {
            let inv = 1.0 / c as f64;
            LatentTensor::from_fn(1, x.height(), x.width(), |_, y, xx| {
                (0..c).map(|ch| x.at(ch, y, xx)).sum::<f64>() * inv
            })
        }
    }
}

/// Sobel gradient magnitude of the luminance channel, normalized by its
/// theoretical maximum on [0, 1] inputs (4 sqrt 2).
pub fn edge_map(x: &LatentTensor) -> LatentTensor {
    let lum = luminance(x);
    let (h, w) = (lum.height(), lum.width());
    let norm = 4.0 * std::f64::consts::SQRT_2;
    LatentTensor::from_fn(1, h, w, |_, y, xx| {
        let sample = |dy: isize, dx: isize| {
            lum.at(0, reflect(y as isize + dy, h), reflect(xx as isize + dx, w))
        };
        // Paired differences so constant regions cancel exactly.
        let gx = (sample(-1, 1) - sample(-1, -1))
            + 2.0 * (sample(0, 1) - sample(0, -1))
            + (sample(1, 1) - sample(1, -1));
        let gy = (sample(1, -1) - sample(-1, -1))
            + 2.0 * (sample(1, 0) - sample(-1, 0))
            + (sample(1, 1) - sample(-1, 1));
        (gx * gx + gy * gy).sqrt() / norm
    })
}

const SSIM_WINDOW: usize = 7;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut total = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = y as f64 - c;
            let dx = x as f64 - c;
            let v = (-(dy * dy + dx * dx) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = v;
            total += v;
        }
    }
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Standard SSIM with a 7x7 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03 and unit dynamic range, averaged over valid window positions.
pub fn ssim(a: &LatentTensor, b: &LatentTensor) -> Result<f64> {
    a.check_same_shape(b)?;
    if a.channels() != 1 {
        return Err(Error::shape("1 channel", format!("{}", a.channels())));
    }
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(
            format!("at least {SSIM_WINDOW}x{SSIM_WINDOW}"),
            format!("{h}x{w}"),
        ));
    }
    let win = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let wgt = win[dy * SSIM_WINDOW + dx];
                    mu_a += wgt * a.at(0, y0 + dy, x0 + dx);
                    mu_b += wgt * b.at(0, y0 + dy, x0 + dx);
                }
            }
            let mut var_a = 0.0;
            let mut var_b = 0.0;
            let mut cov = 0.0;
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let wgt = win[dy * SSIM_WINDOW + dx];
                    let da = a.at(0, y0 + dy, x0 + dx) - mu_a;
                    let db = b.at(0, y0 + dy, x0 + dx) - mu_b;
                    var_a += wgt * da * da;
                    var_b += wgt * db * db;
                    cov += wgt * da * db;
                }
            }
            total += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn crop(x: &LatentTensor, y0: usize, x0: usize, h: usize, w: usize) -> LatentTensor {
    LatentTensor::from_fn(x.channels(), h, w, |c, y, xx| x.at(c, y0 + y, x0 + xx))
}

fn mask_to_tensor_mul(e: &LatentTensor, m: &Mask) -> Result<LatentTensor> {
    e.mul_mask(m)
}

/// Tight bounding box of the user mask (equals the user box for rectangular
/// masks, which is how the pipeline constructs them).
fn user_bbox(m: &Mask) -> Result<(usize, usize, usize, usize)> {
    let (mut min_y, mut min_x, mut max_y, mut max_x) = (usize::MAX, usize::MAX, 0usize, 0usize);
    let mut any = false;
    for y in 0..m.height() {
        for x in 0..m.width() {
            if m.get(y, x) {
                any = true;
                min_y = min_y.min(y);
                min_x = min_x.min(x);
                max_y = max_y.max(y);
                max_x = max_x.max(x);
            }
        }
    }
    if !any {
        return Err(Error::EmptyMask);
    }
    Ok((min_y, min_x, max_y - min_y + 1, max_x - min_x + 1))
}

/// Content similarity S = (1 + SSIM_bg)(1 + SSIM_fg) / 4, with SSIM_fg over
/// the user-box crop of the edge maps of the composite and the aligned
/// foreground, and SSIM_bg over edge maps zero-filled outside the background
/// region. Returns (S, SSIM_bg, SSIM_fg).
pub fn content_similarity(
    x_res: &LatentTensor,
    x_bg: &LatentTensor,
    x_fg_aligned: &LatentTensor,
    masks: &MaskSet,
) -> Result<(f64, f64, f64)> {
    x_res.check_same_shape(x_bg)?;
    x_res.check_same_shape(x_fg_aligned)?;
    let e_res = edge_map(x_res);
    let e_bg = edge_map(x_bg);
    let e_fg = edge_map(x_fg_aligned);

    let (by, bx, bh, bw) = user_bbox(&masks.user)?;
    let ssim_fg = ssim(&crop(&e_res, by, bx, bh, bw), &crop(&e_fg, by, bx, bh, bw))?;
    let ssim_bg = ssim(
        &mask_to_tensor_mul(&e_res, &masks.background)?,
        &mask_to_tensor_mul(&e_bg, &masks.background)?,
    )?;
    let s = (1.0 + ssim_bg) * (1.0 + ssim_fg) / 4.0;
    Ok((s, ssim_bg, ssim_fg))
}

fn stat_distance(a: &ChannelStats, b: &ChannelStats) -> f64 {
    a.concat()
        .iter()
        .zip(b.concat())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Style proxy: 1 / (1 + d) with d the L2 distance between the channel
/// statistics (mean ++ std) of the composite's object region and of the
/// whole background image.
pub fn style_proxy(x_res: &LatentTensor, masks: &MaskSet, x_bg: &LatentTensor) -> Result<f64> {
    x_res.check_same_shape(x_bg)?;
    let obj = masked_channel_stats(x_res, &masks.object)?;
    let bg = channel_stats(x_bg);
    Ok(1.0 / (1.0 + stat_distance(&obj, &bg)))
}

/// Spread of the per-channel means over a region: max minus min channel
/// mean. Zero for grayscale regions.
pub fn saturation(x: &LatentTensor, region: &Mask) -> Result<f64> {
    let stats = masked_channel_stats(x, region)?;
    let hi = stats.mean.iter().cloned().fold(f64::MIN, f64::max);
    let lo = stats.mean.iter().cloned().fold(f64::MAX, f64::min);
    Ok(hi - lo)
}

/// Full report for one composed sample.
pub fn evaluate(
    x_res: &LatentTensor,
    x_bg: &LatentTensor,
    x_fg_aligned: &LatentTensor,
    masks: &MaskSet,
) -> Result<MetricsReport> {
    let (content, ssim_bg, ssim_fg) = content_similarity(x_res, x_bg, x_fg_aligned, masks)?;
    let style = style_proxy(x_res, masks, x_bg)?;
    Ok(MetricsReport {
        ssim_bg,
        ssim_fg,
        content_similarity: content,
        style_proxy: style,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{build_mask_set, BoxRect};
    use crate::tensor::gaussian_noise;

    #[test]
    fn edge_map_constant_is_zero() {
        let x = LatentTensor::constant(3, 8, 8, 0.6);
        let e = edge_map(&x);
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn edge_map_vertical_step() {
        let k = 5usize;
        let x = LatentTensor::from_fn(3, 12, 12, |_, _, xx| if xx < k { 0.0 } else { 1.0 });
        let e = edge_map(&x);
        for y in 0..12 {
            for xx in 0..12 {
                let v = e.at(0, y, xx);
                if xx == k - 1 || xx == k {
                    assert!(v > 0.1, "expected response at column {xx}");
                } else {
                    assert!(v < 1e-12, "unexpected response {v} at column {xx}");
                }
            }
        }
    }

    #[test]
    fn edge_map_matches_brute_force() {
        let x = gaussian_noise(3, 5, 5, 3).unwrap().map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0));
        let e = edge_map(&x);
        // Brute force: explicit 3x3 correlation with reflect indexing.
        let lum = LatentTensor::from_fn(1, 5, 5, |_, y, xx| {
            0.2989 * x.at(0, y, xx) + 0.587 * x.at(1, y, xx) + 0.114 * x.at(2, y, xx)
        });
        let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
        let ky = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
        let refl = |i: isize| -> usize {
            if i < 0 {
                (-i - 1) as usize
            } else if i >= 5 {
                (9 - i) as usize
            } else {
                i as usize
            }
        };
        for y in 0..5usize {
            for xx in 0..5usize {
                let mut gx = 0.0;
                let mut gy = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let sy = refl(y as isize + dy as isize - 1);
                        let sx = refl(xx as isize + dx as isize - 1);
                        gx += kx[dy][dx] * lum.at(0, sy, sx);
                        gy += ky[dy][dx] * lum.at(0, sy, sx);
                    }
                }
                let expected = (gx * gx + gy * gy).sqrt() / (4.0 * std::f64::consts::SQRT_2);
                assert!((e.at(0, y, xx) - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn ssim_identity() {
        let a = gaussian_noise(1, 10, 10, 1).unwrap().map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0));
        let s = ssim(&a, &a).unwrap();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_constant_mismatch_collapses() {
        let a = LatentTensor::constant(1, 9, 9, 0.0);
        let b = LatentTensor::constant(1, 9, 9, 1.0);
        let s = ssim(&a, &b).unwrap();
        assert!(s < 0.01, "ssim {s}");
    }

    #[test]
    fn ssim_bounded() {
        for seed in 0..6u64 {
            let a = gaussian_noise(1, 9, 12, seed).unwrap().map(|v| (0.5 + 0.3 * v).clamp(0.0, 1.0));
            let b = gaussian_noise(1, 9, 12, 50 + seed).unwrap().map(|v| (0.5 + 0.3 * v).clamp(0.0, 1.0));
            let s = ssim(&a, &b).unwrap();
            assert!((-1.0..=1.0).contains(&s), "ssim {s}");
        }
    }

    #[test]
    fn ssim_shape_checks() {
        let a = LatentTensor::zeros(1, 8, 8);
        assert!(ssim(&a, &LatentTensor::zeros(1, 9, 8)).is_err());
        assert!(ssim(&LatentTensor::zeros(1, 5, 5), &LatentTensor::zeros(1, 5, 5)).is_err());
    }

    fn toy_masks() -> MaskSet {
        let user = BoxRect::new(4, 4, 10, 10).to_mask(20, 20).unwrap();
        let object = BoxRect::new(5, 5, 8, 8).to_mask(20, 20).unwrap();
        build_mask_set(&user, &object, 2, 0).unwrap()
    }

    #[test]
    fn content_similarity_arithmetic_identities() {
        // Directly check the combination rule at its corners.
        let s = |bg: f64, fg: f64| (1.0 + bg) * (1.0 + fg) / 4.0;
        assert_eq!(s(1.0, 1.0), 1.0);
        assert_eq!(s(0.0, 0.0), 0.25);
        assert_eq!(s(1.0, 0.0), 0.5);
    }

    #[test]
    fn content_similarity_self_composite_is_high() {
        let masks = toy_masks();
        let bg = LatentTensor::from_fn(3, 20, 20, |_, y, _| if (y / 3) % 2 == 0 { 0.2 } else { 0.8 });
        // Composite = background with the "foreground" pasted; use the same
        // image for fg so edges agree inside the box.
        let (s, ssim_bg, _ssim_fg) = content_similarity(&bg, &bg, &bg, &masks).unwrap();
        assert!((ssim_bg - 1.0).abs() < 1e-9);
        assert!(s > 0.99, "S {s}");
        assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn style_proxy_identity_and_monotonicity() {
        let masks = toy_masks();
        // Statistically identical object region and background: constant
        // image gives the exact maximum.
        let flat = LatentTensor::constant(3, 20, 20, 0.4);
        assert!(style_proxy(&flat, &masks, &flat).unwrap() > 1.0 - 1e-12);
        let bg = gaussian_noise(3, 20, 20, 4).unwrap().map(|v| (0.5 + 0.1 * v).clamp(0.0, 1.0));
        // Pasting the background into itself only leaves sampling error.
        assert!(style_proxy(&bg, &masks, &bg).unwrap() > 0.9);
        // Larger stat distance gives strictly smaller score.
        let shifted = bg.map(|v| (v + 0.3).clamp(0.0, 1.0));
        let more_shifted = bg.map(|v| (v + 0.6).clamp(0.0, 1.0));
        let s1 = style_proxy(&shifted, &masks, &bg).unwrap();
        let s2 = style_proxy(&more_shifted, &masks, &bg).unwrap();
        assert!(s1 > s2, "{s1} vs {s2}");
    }

    #[test]
    fn style_proxy_empty_mask_errors() {
        let user = Mask::ones(8, 8);
        let ms = build_mask_set(&user, &Mask::zeros(8, 8), 2, 0).unwrap();
        let x = LatentTensor::zeros(3, 8, 8);
        assert!(matches!(
            style_proxy(&x, &ms, &x),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn saturation_grayscale_zero_color_positive() {
        let gray = LatentTensor::constant(3, 8, 8, 0.4);
        let all = Mask::ones(8, 8);
        assert_eq!(saturation(&gray, &all).unwrap(), 0.0);
        let mut colored = gray.clone();
        for y in 0..8 {
            for x in 0..8 {
                colored.set(0, y, x, 0.9);
            }
        }
        assert!((saturation(&colored, &all).unwrap() - 0.5).abs() < 1e-12);
    }
}
