//! Object placement preprocessing and mask algebra at pixel and latent
//! resolution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LatentTensor, Mask};

/// Pixel rectangle "x,y,w,h" with origin at the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BoxRect {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.w >= 1 && self.h >= 1 && self.x + self.w <= width && self.y + self.h <= height
    }

    pub fn check_fits(&self, height: usize, width: usize) -> Result<()> {
        if self.fits(height, width) {
            Ok(())
        } else {
            Err(Error::BoxOutOfCanvas {
                x: self.x,
                y: self.y,
                w: self.w,
                h: self.h,
                canvas_h: height,
                canvas_w: width,
            })
        }
    }

    /// Rectangle mask on an H x W canvas.
    pub fn to_mask(&self, height: usize, width: usize) -> Result<Mask> {
        self.check_fits(height, width)?;
        Ok(Mask::from_fn(height, width, |y, x| {
            y >= self.y && y < self.y + self.h && x >= self.x && x < self.x + self.w
        }))
    }
}

impl std::str::FromStr for BoxRect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(Error::InvalidConfig(format!(
                "user box must be x,y,w,h — got '{s}'"
            )));
        }
        let nums: Vec<usize> = parts
            .iter()
            .map(|p| {
                p.parse::<usize>()
                    .map_err(|_| Error::InvalidConfig(format!("bad box coordinate '{p}'")))
            })
            .collect::<Result<_>>()?;
        Ok(BoxRect::new(nums[0], nums[1], nums[2], nums[3]))
    }
}

impl std::fmt::Display for BoxRect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{},{}", self.x, self.y, self.w, self.h)
    }
}

/// Aligned binary masks at pixel resolution plus their latent counterparts.
///
/// Invariants: background = 1 - user, transition = user XOR object, and
/// object <= user, at both resolutions.
#[derive(Debug, Clone)]
pub struct MaskSet {
    pub user: Mask,
    pub object: Mask,
    pub background: Mask,
    pub transition: Mask,
    pub latent_user: Mask,
    pub latent_object: Mask,
    pub latent_background: Mask,
    pub latent_transition: Mask,
    pub downscale: usize,
}

/// Rescales and relocates the object: the tight crop of `obj_mask` is
/// aspect-fit scaled into `user_box` (bilinear for the image, nearest for the
/// mask) and centered; everything outside the placed object is zero.
pub fn place_object(
    fg: &LatentTensor,
    obj_mask: &Mask,
    user_box: BoxRect,
    canvas: (usize, usize),
) -> Result<(LatentTensor, Mask)> {
    let (canvas_h, canvas_w) = canvas;
    user_box.check_fits(canvas_h, canvas_w)?;
    fg.check_mask(obj_mask)?;
    let bbox = tight_bbox(obj_mask).ok_or(Error::EmptyObjectMask)?;
    let (crop_y, crop_x, crop_h, crop_w) = bbox;

    let scale = (user_box.w as f64 / crop_w as f64).min(user_box.h as f64 / crop_h as f64);
    let tw = ((crop_w as f64 * scale).round() as usize).clamp(1, user_box.w);
    let th = ((crop_h as f64 * scale).round() as usize).clamp(1, user_box.h);
    let ox = user_box.x + (user_box.w - tw) / 2;
    let oy = user_box.y + (user_box.h - th) / 2;

    let src_y = |ty: usize| (ty as f64 + 0.5) * crop_h as f64 / th as f64 - 0.5;
    let src_x = |tx: usize| (tx as f64 + 0.5) * crop_w as f64 / tw as f64 - 0.5;

    let mut aligned_mask = Mask::zeros(canvas_h, canvas_w);
    for ty in 0..th {
        let sy = (src_y(ty).round().max(0.0) as usize).min(crop_h - 1);
        for tx in 0..tw {
            let sx = (src_x(tx).round().max(0.0) as usize).min(crop_w - 1);
            aligned_mask.set(oy + ty, ox + tx, obj_mask.get(crop_y + sy, crop_x + sx));
        }
    }

    let mut aligned_fg = LatentTensor::zeros(fg.channels(), canvas_h, canvas_w);
    for ty in 0..th {
        let sy = src_y(ty).clamp(0.0, (crop_h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(crop_h - 1);
        let fy = sy - y0 as f64;
        for tx in 0..tw {
            if !aligned_mask.get(oy + ty, ox + tx) {
                continue;
            }
            let sx = src_x(tx).clamp(0.0, (crop_w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(crop_w - 1);
            let fx = sx - x0 as f64;
            for c in 0..fg.channels() {
                let v00 = fg.at(c, crop_y + y0, crop_x + x0);
                let v01 = fg.at(c, crop_y + y0, crop_x + x1);
                let v10 = fg.at(c, crop_y + y1, crop_x + x0);
                let v11 = fg.at(c, crop_y + y1, crop_x + x1);
                let top = v00 + fx * (v01 - v00);
                let bot = v10 + fx * (v11 - v10);
                aligned_fg.set(c, oy + ty, ox + tx, top + fy * (bot - top));
            }
        }
    }
    Ok((aligned_fg, aligned_mask))
}

fn tight_bbox(m: &Mask) -> Option<(usize, usize, usize, usize)> {
    let (mut min_y, mut min_x) = (usize::MAX, usize::MAX);
    let (mut max_y, mut max_x) = (0usize, 0usize);
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
    any.then(|| (min_y, min_x, max_y - min_y + 1, max_x - min_x + 1))
}

/// Derives the full mask set. `object_aligned` must lie inside `user`; latent
/// masks come from center-sample downscaling by `f`, with an optional
/// dilation of the latent object mask (clipped back into the latent user
/// region so the partition invariants hold).
pub fn build_mask_set(
    user: &Mask,
    object_aligned: &Mask,
    f: usize,
    latent_object_dilation: usize,
) -> Result<MaskSet> {
    user.check_same_shape(object_aligned)?;
    if !object_aligned.is_subset_of(user)? {
        return Err(Error::ObjectOutsideUserBox);
    }
    let background = user.complement();
    let transition = user.xor(object_aligned)?;
    let latent_user = user.downsample(f)?;
    let mut latent_object = object_aligned.downsample(f)?;
    if latent_object_dilation > 0 {
        let dilated = latent_object.dilate(latent_object_dilation);
        latent_object = Mask::from_fn(dilated.height(), dilated.width(), |y, x| {
            dilated.get(y, x) && latent_user.get(y, x)
        });
    }
    let latent_background = latent_user.complement();
    let latent_transition = latent_user.xor(&latent_object)?;
    Ok(MaskSet {
        user: user.clone(),
        object: object_aligned.clone(),
        background,
        transition,
        latent_user,
        latent_object,
        latent_background,
        latent_transition,
        downscale: f,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn disc_mask(h: usize, w: usize, cy: f64, cx: f64, r: f64) -> Mask {
        Mask::from_fn(h, w, |y, x| {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            dy * dy + dx * dx <= r * r
        })
    }

    #[test]
    fn identity_placement() {
        let fg = LatentTensor::from_fn(3, 10, 10, |c, y, x| (c + 2 * y + 3 * x) as f64 * 0.01);
        // Object occupying exactly rows 2..=7, cols 3..=6.
        let obj = Mask::from_fn(10, 10, |y, x| (2..=7).contains(&y) && (3..=6).contains(&x));
        let user_box = BoxRect::new(3, 2, 4, 6); // same size as the tight bbox
        let (afg, am) = place_object(&fg, &obj, user_box, (10, 10)).unwrap();
        assert_eq!(am, obj);
        for y in 2..=7 {
            for x in 3..=6 {
                for c in 0..3 {
                    assert!((afg.at(c, y, x) - fg.at(c, y, x)).abs() < 1e-12);
                }
            }
        }
        // Outside the placed object everything is zero.
        assert_eq!(afg.mul_mask(&am).unwrap(), afg);
    }

    #[test]
    fn half_box_quarters_the_area() {
        let obj = disc_mask(32, 32, 16.0, 16.0, 10.0);
        let fg = LatentTensor::constant(3, 32, 32, 0.5);
        let full = BoxRect::new(2, 2, 21, 21);
        let half = BoxRect::new(2, 2, 10, 10);
        let (_, m_full) = place_object(&fg, &obj, full, (32, 32)).unwrap();
        let (_, m_half) = place_object(&fg, &obj, half, (32, 32)).unwrap();
        let ratio = m_half.active_count() as f64 / m_full.active_count() as f64;
        assert!((ratio - 0.25).abs() <= 0.025, "ratio {ratio}");
    }

    #[test]
    fn box_out_of_canvas_rejected() {
        let fg = LatentTensor::constant(3, 8, 8, 1.0);
        let obj = Mask::ones(8, 8);
        assert!(matches!(
            place_object(&fg, &obj, BoxRect::new(4, 4, 8, 8), (8, 8)),
            Err(Error::BoxOutOfCanvas { .. })
        ));
    }

    #[test]
    fn empty_object_mask_rejected() {
        let fg = LatentTensor::constant(3, 8, 8, 1.0);
        let obj = Mask::zeros(8, 8);
        assert!(matches!(
            place_object(&fg, &obj, BoxRect::new(0, 0, 4, 4), (8, 8)),
            Err(Error::EmptyObjectMask)
        ));
    }

    #[test]
    fn degenerate_mask_sets() {
        let user = Mask::from_fn(8, 8, |y, x| y >= 2 && y < 6 && x >= 2 && x < 6);
        // object == user: transition empty
        let ms = build_mask_set(&user, &user, 2, 0).unwrap();
        assert!(ms.transition.is_empty());
        assert!(ms.latent_transition.is_empty());
        // object empty: transition == user
        let ms = build_mask_set(&user, &Mask::zeros(8, 8), 2, 0).unwrap();
        assert_eq!(ms.transition, user);
        // everything full: background and transition empty
        let ms = build_mask_set(&Mask::ones(8, 8), &Mask::ones(8, 8), 2, 0).unwrap();
        assert!(ms.background.is_empty());
        assert!(ms.transition.is_empty());
    }

    #[test]
    fn object_outside_user_rejected() {
        let user = Mask::from_fn(8, 8, |y, _| y < 4);
        let object = Mask::from_fn(8, 8, |y, _| y >= 4);
        assert!(matches!(
            build_mask_set(&user, &object, 2, 0),
            Err(Error::ObjectOutsideUserBox)
        ));
    }

    #[test]
    fn indivisible_dims_rejected() {
        let user = Mask::ones(9, 8);
        assert!(build_mask_set(&user, &user, 2, 0).is_err());
    }

    #[test]
    fn dilated_latent_object_stays_inside_user() {
        let user = Mask::from_fn(16, 16, |y, x| (4..12).contains(&y) && (4..12).contains(&x));
        let object = Mask::from_fn(16, 16, |y, x| (6..10).contains(&y) && (6..10).contains(&x));
        let ms = build_mask_set(&user, &object, 2, 1).unwrap();
        assert!(ms.latent_object.is_subset_of(&ms.latent_user).unwrap());
        let undilated = build_mask_set(&user, &object, 2, 0).unwrap();
        assert!(ms.latent_object.active_count() > undilated.latent_object.active_count());
        // Partition identities still hold with dilation.
        assert_eq!(ms.latent_transition, ms.latent_user.xor(&ms.latent_object).unwrap());
    }

    proptest! {
        #[test]
        fn partition_identities(seed in 0u64..512) {
            let mut rng = crate::tensor::substream_rng(seed, "mask-prop");
            use rand::Rng;
            let h = 2 * rng.random_range(2..9usize);
            let w = 2 * rng.random_range(2..9usize);
            let user = Mask::from_fn(h, w, |_, _| rng.random_bool(0.5));
            let object = Mask::from_fn(h, w, |y, x| user.get(y, x) && rng.random_bool(0.5));
            let ms = build_mask_set(&user, &object, 2, 0).unwrap();
            for y in 0..h {
                for x in 0..w {
                    // background + user = 1
                    prop_assert_eq!(u8::from(ms.background.get(y, x)) + u8::from(ms.user.get(y, x)), 1);
                    // transition = user XOR object
                    prop_assert_eq!(ms.transition.get(y, x), ms.user.get(y, x) ^ ms.object.get(y, x));
                    // transition + object = user (object is a subset of user)
                    prop_assert_eq!(
                        u8::from(ms.transition.get(y, x)) + u8::from(ms.object.get(y, x)),
                        u8::from(ms.user.get(y, x))
                    );
                }
            }
            prop_assert_eq!(ms.latent_user.height(), h / 2);
            prop_assert_eq!(ms.latent_user.width(), w / 2);
            for y in 0..h / 2 {
                for x in 0..w / 2 {
                    prop_assert_eq!(
                        u8::from(ms.latent_background.get(y, x)) + u8::from(ms.latent_user.get(y, x)),
                        1
                    );
                    prop_assert_eq!(
                        ms.latent_transition.get(y, x),
                        ms.latent_user.get(y, x) ^ ms.latent_object.get(y, x)
                    );
                }
            }
        }
    }
}
