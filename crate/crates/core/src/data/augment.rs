//! Weak and strong augmentation pipelines for square grayscale images.
//!
//! Draw order from the RNG is fixed: crop scale, crop x, crop y, flip; then,
//! for the strong extras, brightness, contrast, noise gate (plus one normal
//! per pixel when the gate fires and σ > 0), blur gate. A strong policy with
//! zero-strength extras therefore reproduces the weak output for the same
//! stream.

use serde::{Deserialize, Serialize};

use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Weak,
    Strong,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub kind: PolicyKind,
    /// Crop side as a fraction of the image side, drawn uniformly.
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
    /// Additive brightness shift drawn from `[−b, b]`.
    pub brightness: f64,
    /// Contrast factor drawn from `[1−c, 1+c]`, applied around the image mean.
    pub contrast: f64,
    pub noise_prob: f64,
    pub noise_std: f64,
    pub blur_prob: f64,
}

impl AugmentationPolicy {
    /// Random crop-and-resize plus horizontal flip.
    pub fn weak() -> Self {
        Self {
            kind: PolicyKind::Weak,
            crop_scale: (0.7, 1.0),
            flip_prob: 0.5,
            brightness: 0.0,
            contrast: 0.0,
            noise_prob: 0.0,
            noise_std: 0.0,
            blur_prob: 0.0,
        }
    }

    /// Weak plus brightness/contrast jitter, grayscale noise and blur.
    pub fn strong() -> Self {
        Self { kind: PolicyKind::Strong, brightness: 0.3, contrast: 0.4, noise_prob: 0.5, noise_std: 0.05, blur_prob: 0.5, ..Self::weak() }
    }

    /// No-op policy.
    pub fn identity() -> Self {
        Self { crop_scale: (1.0, 1.0), flip_prob: 0.0, ..Self::weak() }
    }
}

/// 3×3 binomial kernel `[1 2 1]ᵀ[1 2 1] / 16`.
pub const BLUR_KERNEL: [[f64; 3]; 3] =
    [[1.0 / 16.0, 2.0 / 16.0, 1.0 / 16.0], [2.0 / 16.0, 4.0 / 16.0, 2.0 / 16.0], [1.0 / 16.0, 2.0 / 16.0, 1.0 / 16.0]];

/// One pass of [`BLUR_KERNEL`] with edge replication.
pub fn blur3x3(img: &[f64], side: usize) -> Vec<f64> {
    let at = |r: isize, c: isize| {
        let r = r.clamp(0, side as isize - 1) as usize;
        let c = c.clamp(0, side as isize - 1) as usize;
        img[r * side + c]
    };
    let mut out = vec![0.0; img.len()];
    for r in 0..side as isize {
        for c in 0..side as isize {
            let mut acc = 0.0;
            for (dr, krow) in BLUR_KERNEL.iter().enumerate() {
                for (dc, &k) in krow.iter().enumerate() {
                    acc += k * at(r + dr as isize - 1, c + dc as isize - 1);
                }
            }
            out[r as usize * side + c as usize] = acc;
        }
    }
    out
}

pub fn hflip(img: &[f64], side: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for r in 0..side {
        for c in 0..side {
            out[r * side + c] = img[r * side + side - 1 - c];
        }
    }
    out
}

/// Bilinear resample of the square crop `[ox, ox+size) × [oy, oy+size)`
/// back to `side × side`. Output pixel `j` samples source coordinate
/// `o + (j + 0.5)·size/side − 0.5` (pixel-center convention), clamped to
/// `[0, side−1]`.
pub fn crop_resize(img: &[f64], side: usize, ox: f64, oy: f64, size: f64) -> Vec<f64> {
    let max = (side - 1) as f64;
    let coord = |o: f64, j: usize| (o + (j as f64 + 0.5) * size / side as f64 - 0.5).clamp(0.0, max);
    let mut out = vec![0.0; img.len()];
    for r in 0..side {
        let y = coord(oy, r);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(side - 1);
        let fy = y - y0 as f64;
        for c in 0..side {
            let x = coord(ox, c);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(side - 1);
            let fx = x - x0 as f64;
            let top = img[y0 * side + x0] * (1.0 - fx) + img[y0 * side + x1] * fx;
            let bottom = img[y1 * side + x0] * (1.0 - fx) + img[y1 * side + x1] * fx;
            out[r * side + c] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

/// Applies `policy` to one `side × side` image in [0,1]. Output is clamped to [0,1].
pub fn augment(image: &[f64], side: usize, policy: &AugmentationPolicy, rng: &mut Rng) -> Vec<f64> {
    let (lo, hi) = policy.crop_scale;
    let scale = rng.uniform_range(lo, hi);
    let ux = rng.uniform();
    let uy = rng.uniform();
    let flip = rng.uniform() < policy.flip_prob;

    let mut img = if scale < 1.0 {
        let size = scale * side as f64;
        let slack = side as f64 - size;
        crop_resize(image, side, ux * slack, uy * slack, size)
    } else {
        image.to_vec()
    };
    if flip {
        img = hflip(&img, side);
    }

    if policy.kind == PolicyKind::Strong {
        let shift = (2.0 * rng.uniform() - 1.0) * policy.brightness;
        let factor = 1.0 + (2.0 * rng.uniform() - 1.0) * policy.contrast;
        if shift != 0.0 || factor != 1.0 {
            let mean = img.iter().sum::<f64>() / img.len() as f64;
            for v in &mut img {
                *v = mean + (*v - mean) * factor + shift;
            }
        }
        if rng.uniform() < policy.noise_prob && policy.noise_std > 0.0 {
            for v in &mut img {
                *v += policy.noise_std * rng.normal();
            }
        }
        if rng.uniform() < policy.blur_prob {
            img = blur3x3(&img, side);
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64) -> Vec<f64> {
        let mut r = Rng::new(seed);
        (0..64).map(|_| r.uniform()).collect()
    }

    #[test]
    fn identity_policy_is_identity() {
        let x = image(1);
        let y = augment(&x, 8, &AugmentationPolicy::identity(), &mut Rng::new(3));
        assert_eq!(x, y);
        let zero_strong = AugmentationPolicy {
            kind: PolicyKind::Strong,
            brightness: 0.0,
            contrast: 0.0,
            noise_prob: 0.0,
            blur_prob: 0.0,
            ..AugmentationPolicy::identity()
        };
        assert_eq!(augment(&x, 8, &zero_strong, &mut Rng::new(3)), x);
    }

    #[test]
    fn forced_flip_is_involution() {
        let x = image(2);
        let p = AugmentationPolicy { flip_prob: 1.0, ..AugmentationPolicy::identity() };
        let once = augment(&x, 8, &p, &mut Rng::new(0));
        assert_ne!(once, x);
        assert_eq!(augment(&once, 8, &p, &mut Rng::new(1)), x);
    }

    #[test]
    fn blur_matches_direct_convolution() {
        let x = image(4);
        let side = 8;
        let got = blur3x3(&x, side);
        let w = [1.0, 2.0, 1.0];
        for r in 0..side {
            for c in 0..side {
                let mut acc = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        let rr = (r as i64 + i as i64 - 1).clamp(0, 7) as usize;
                        let cc = (c as i64 + j as i64 - 1).clamp(0, 7) as usize;
                        acc += w[i] * w[j] * x[rr * side + cc];
                    }
                }
                assert!((got[r * side + c] - acc / 16.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn strong_with_zero_extras_reproduces_weak() {
        let x = image(5);
        let weak = AugmentationPolicy::weak();
        let strong_zero = AugmentationPolicy {
            kind: PolicyKind::Strong,
            brightness: 0.0,
            contrast: 0.0,
            noise_prob: 0.0,
            noise_std: 0.0,
            blur_prob: 0.0,
            ..weak.clone()
        };
        for s in 0..20 {
            assert_eq!(augment(&x, 8, &weak, &mut Rng::new(s)), augment(&x, 8, &strong_zero, &mut Rng::new(s)));
        }
    }

    #[test]
    fn outputs_stay_in_unit_interval() {
        let x = image(6);
        let mut rng = Rng::new(9);
        let p = AugmentationPolicy { brightness: 0.9, contrast: 0.9, noise_prob: 1.0, noise_std: 0.5, ..AugmentationPolicy::strong() };
        for _ in 0..50 {
            assert!(augment(&x, 8, &p, &mut rng).iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn two_streams_give_two_views() {
        let x = image(7);
        let a = augment(&x, 8, &AugmentationPolicy::strong(), &mut Rng::new(1));
        let b = augment(&x, 8, &AugmentationPolicy::strong(), &mut Rng::new(2));
        assert_ne!(a, b);
    }
}
