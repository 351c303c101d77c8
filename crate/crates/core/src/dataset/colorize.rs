//! Depth-to-color conversion through surface normals.
//!
//! Raw depth is first normalized, then converted to a per-pixel surface
//! normal `n = normalize(-dd/dx, -dd/dy, 1)` with central differences
//! (one-sided at the borders), and finally mapped to color channels as
//! `(n + 1) / 2`. Normalizing first makes the result invariant to the
//! camera distance: adding a constant to the depth map or rescaling its
//! range leaves the colorization unchanged.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How raw depth is brought to a canonical range before differentiation.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum DepthNormalize {
    /// Min-max normalize each image independently, then stretch to the
    /// relief height. Flat images map to all zeros.
    PerImage,
    /// Normalize with fixed bounds shared across a whole dataset.
    Global { min: f32, max: f32 },
}

/// Height of the normalized relief relative to image width. A pixel step is
/// 1 unit, so this fixes the slope scale of the normals.
pub fn default_relief(width: usize) -> f32 {
    width as f32 / 16.0
}

/// Colorize with the default per-image normalization and relief.
pub fn colorize_depth(depth: &Tensor) -> Result<Tensor> {
    let width = *depth.shape().last().unwrap_or(&0);
    colorize_depth_with(depth, DepthNormalize::PerImage, default_relief(width))
}

pub fn colorize_depth_with(
    depth: &Tensor,
    normalize: DepthNormalize,
    relief: f32,
) -> Result<Tensor> {
    if depth.rank() != 2 {
        return Err(Error::BadShape {
            op: "colorize_depth",
            detail: format!("expected [H,W] depth, got {:?}", depth.shape()),
        });
    }
    if !depth.is_finite() {
        return Err(Error::NonFinite {
            context: "colorize_depth input".into(),
        });
    }
    if depth.data().iter().any(|d| *d < 0.0) {
        return Err(Error::Dataset("depth values must be nonnegative".into()));
    }
    let (h, w) = (depth.shape()[0], depth.shape()[1]);
    if h < 2 || w < 2 {
        return Err(Error::BadShape {
            op: "colorize_depth",
            detail: format!("need at least 2x2 pixels, got {h}x{w}"),
        });
    }

    let raw = depth.data();
    let (lo, hi) = match normalize {
        DepthNormalize::PerImage => {
            let lo = raw.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = raw.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            (lo, hi)
        }
        DepthNormalize::Global { min, max } => {
            if !(min < max) {
                return Err(Error::InvalidArgument(format!(
                    "global depth bounds must satisfy min < max, got {min}..{max}"
                )));
            }
            (min, max)
        }
    };
    let range = hi - lo;
    let d = |y: usize, x: usize| -> f32 {
        if range > 0.0 {
            (raw[y * w + x] - lo) / range * relief
        } else {
            0.0
        }
    };

    let mut out = vec![0.0f32; 3 * h * w];
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let gx = if x == 0 {
                d(y, 1) - d(y, 0)
            } else if x == w - 1 {
                d(y, w - 1) - d(y, w - 2)
            } else {
                (d(y, x + 1) - d(y, x - 1)) / 2.0
            };
            let gy = if y == 0 {
                d(1, x) - d(0, x)
            } else if y == h - 1 {
                d(h - 1, x) - d(h - 2, x)
            } else {
                (d(y + 1, x) - d(y - 1, x)) / 2.0
            };
            let norm = (gx * gx + gy * gy + 1.0).sqrt();
            let n = [-gx / norm, -gy / norm, 1.0 / norm];
            for (ch, nc) in n.iter().enumerate() {
                out[ch * plane + y * w + x] = (nc + 1.0) / 2.0;
            }
        }
    }
    Tensor::from_vec(vec![3, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn depth(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> Tensor {
        let mut data = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                data[y * w + x] = f(y, x);
            }
        }
        Tensor::from_vec(vec![h, w], data).unwrap()
    }

    #[test]
    fn flat_plane_gives_straight_up_normals() {
        let colorized = colorize_depth(&depth(8, 8, |_, _| 3.0)).unwrap();
        let plane = 64;
        for i in 0..plane {
            assert_eq!(colorized.data()[i], 0.5);
            assert_eq!(colorized.data()[plane + i], 0.5);
            assert_eq!(colorized.data()[2 * plane + i], 1.0);
        }
    }

    #[test]
    fn constant_depth_offset_changes_nothing() {
        // Integer depths are exact in f32, so the +10 shift cancels exactly.
        let base = depth(16, 16, |y, x| ((x * 3 + y * 7) % 11) as f32);
        let shifted = depth(16, 16, |y, x| ((x * 3 + y * 7) % 11) as f32 + 10.0);
        let a = colorize_depth(&base).unwrap();
        let b = colorize_depth(&shifted).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn depth_range_scaling_changes_nothing() {
        let base = depth(16, 16, |y, x| ((x + 2 * y) % 9) as f32);
        let scaled = depth(16, 16, |y, x| ((x + 2 * y) % 9) as f32 * 37.5);
        let a = colorize_depth(&base).unwrap();
        let b = colorize_depth(&scaled).unwrap();
        for (va, vb) in a.data().iter().zip(b.data()) {
            assert!((va - vb).abs() < 1e-6);
        }
    }

    #[test]
    fn tilted_plane_matches_analytic_normal() {
        // d(x,y) = x * s normalizes to slope g = relief / (W-1) regardless
        // of s; the interior normal is (-g, 0, 1) / sqrt(g^2 + 1).
        let (h, w) = (16usize, 16usize);
        let colorized = colorize_depth(&depth(h, w, |_, x| x as f32 * 2.5)).unwrap();
        let g = default_relief(w) / (w as f32 - 1.0);
        let norm = (g * g + 1.0).sqrt();
        let expect = [(-g / norm + 1.0) / 2.0, 0.5, (1.0 / norm + 1.0) / 2.0];
        let plane = h * w;
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                for ch in 0..3 {
                    let got = colorized.data()[ch * plane + y * w + x];
                    assert!(
                        (got - expect[ch]).abs() < 1e-5,
                        "pixel ({y},{x}) channel {ch}: {got} vs {}",
                        expect[ch]
                    );
                }
            }
        }
    }

    #[test]
    fn output_is_bounded_with_unit_normals() {
        let t = depth(12, 12, |y, x| ((x * x + 3 * y) % 17) as f32 * 0.3);
        let colorized = colorize_depth(&t).unwrap();
        let plane = 144;
        for i in 0..plane {
            let n = [
                2.0 * colorized.data()[i] - 1.0,
                2.0 * colorized.data()[plane + i] - 1.0,
                2.0 * colorized.data()[2 * plane + i] - 1.0,
            ];
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            assert!((len - 1.0).abs() < 1e-5, "normal length {len}");
            for v in n {
                assert!((-1.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn negative_depth_is_rejected() {
        let t = Tensor::from_vec(vec![2, 2], vec![1.0, -0.5, 0.0, 2.0]).unwrap();
        assert!(colorize_depth(&t).is_err());
    }

    #[test]
    fn non_finite_depth_is_rejected() {
        let t = Tensor::from_vec(vec![2, 2], vec![1.0, f32::NAN, 0.0, 2.0]).unwrap();
        assert!(matches!(
            colorize_depth(&t),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn global_normalization_uses_fixed_bounds() {
        let a = depth(8, 8, |_, x| x as f32);
        let wide = colorize_depth_with(&a, DepthNormalize::Global { min: 0.0, max: 70.0 }, 2.0)
            .unwrap();
        let tight = colorize_depth_with(&a, DepthNormalize::Global { min: 0.0, max: 7.0 }, 2.0)
            .unwrap();
        // Wider bounds flatten the slope, pushing the x-channel toward 0.5.
        let mid = 8 * 4 + 4;
        assert!(wide.data()[mid] > tight.data()[mid]);
        assert!(colorize_depth_with(&a, DepthNormalize::Global { min: 3.0, max: 3.0 }, 2.0).is_err());
    }
}
