//! Mean-centering between image space and model space.
//!
//! The model consumes images with the per-channel training-set mean
//! subtracted. Centering is the whole transform, so the inverse is exact
//! and adversarial inputs can always be mapped back to displayable images.

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel means of the two modalities over a training split.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChannelStats {
    pub rgb_mean: [f32; 3],
    pub depth_mean: [f32; 3],
}

impl ChannelStats {
    /// Channel means over every pixel of every sample in the split.
    pub fn fit(train: &Dataset) -> Result<ChannelStats> {
        if train.samples.is_empty() {
            return Err(Error::Dataset(
                "cannot fit channel statistics on an empty split".into(),
            ));
        }
        let plane = train.image_size * train.image_size;
        let mut rgb = [0.0f64; 3];
        let mut depth = [0.0f64; 3];
        for sample in &train.samples {
            for ch in 0..3 {
                for i in 0..plane {
                    rgb[ch] += sample.rgb[ch * plane + i] as f64;
                    depth[ch] += sample.depth_colorized[ch * plane + i] as f64;
                }
            }
        }
        let count = (train.samples.len() * plane) as f64;
        Ok(ChannelStats {
            rgb_mean: rgb.map(|v| (v / count) as f32),
            depth_mean: depth.map(|v| (v / count) as f32),
        })
    }

    /// Valid range of preprocessed values per channel: the image of [0,1]
    /// under mean subtraction. Attacks clamp to this so their outputs stay
    /// displayable after inverse preprocessing.
    pub fn valid_range(mean: &[f32; 3]) -> [(f32, f32); 3] {
        [
            (-mean[0], 1.0 - mean[0]),
            (-mean[1], 1.0 - mean[1]),
            (-mean[2], 1.0 - mean[2]),
        ]
    }
}

/// Subtract per-channel means from a `[3,H,W]` image.
pub fn preprocess_image(image: &Tensor, mean: &[f32; 3]) -> Result<Tensor> {
    centered(image, mean, -1.0, "preprocess_image")
}

/// Add the means back, returning a displayable `[3,H,W]` image.
pub fn inverse_preprocess(x: &Tensor, mean: &[f32; 3]) -> Result<Tensor> {
    centered(x, mean, 1.0, "inverse_preprocess")
}

fn centered(image: &Tensor, mean: &[f32; 3], sign: f32, op: &'static str) -> Result<Tensor> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::BadShape {
            op,
            detail: format!("expected [3,H,W], got {:?}", image.shape()),
        });
    }
    let plane = image.shape()[1] * image.shape()[2];
    let mut data = image.data().to_vec();
    for ch in 0..3 {
        let shift = sign * mean[ch];
        for v in &mut data[ch * plane..(ch + 1) * plane] {
            *v += shift;
        }
    }
    Tensor::from_vec(image.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(v: impl Fn(usize, usize) -> f32) -> Tensor {
        let mut data = vec![0.0f32; 3 * 16];
        for ch in 0..3 {
            for i in 0..16 {
                data[ch * 16 + i] = v(ch, i);
            }
        }
        Tensor::from_vec(vec![3, 4, 4], data).unwrap()
    }

    #[test]
    fn round_trip_is_identity() {
        let mean = [0.31, 0.47, 0.12];
        let img = image(|ch, i| ((ch * 5 + i) % 10) as f32 / 10.0);
        let back = inverse_preprocess(&preprocess_image(&img, &mean).unwrap(), &mean).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn mean_image_maps_to_zero() {
        let mean = [0.2, 0.5, 0.8];
        let img = image(|ch, _| [0.2, 0.5, 0.8][ch]);
        let x = preprocess_image(&img, &mean).unwrap();
        for v in x.data() {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn valid_range_brackets_zero_for_means_in_unit_interval() {
        let ranges = ChannelStats::valid_range(&[0.3, 0.5, 0.9]);
        for (lo, hi) in ranges {
            assert!(lo <= 0.0 && hi >= 0.0);
            assert!((hi - lo - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let t = Tensor::zeros(vec![1, 4, 4]);
        assert!(preprocess_image(&t, &[0.0; 3]).is_err());
    }
}
