//! Mask-consistent data augmentation.
//!
//! The pipeline runs in a fixed order: horizontal flip (image and mask
//! together), gamma, mean-anchored contrast, brightness, truncated Gaussian
//! noise and a final clamp to the 8-bit range. Only the flip touches the
//! mask.

use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::LabelMask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub flip_probability: f64,
    pub gamma: (f64, f64),
    pub contrast: (f64, f64),
    pub brightness: (f64, f64),
    /// Noise is zero-mean Gaussian truncated to `[-noise_bound, noise_bound]`.
    pub noise_bound: f64,
    pub noise_sigma: f64,
    pub copies_per_image: usize,
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            flip_probability: 0.5,
            gamma: (0.8, 1.2),
            contrast: (0.8, 1.2),
            brightness: (0.8, 1.2),
            noise_bound: 50.0,
            noise_sigma: 50.0 / 3.0,
            copies_per_image: 2,
            seed: 0,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::config("flip probability must lie in [0, 1]"));
        }
        for (name, (lo, hi)) in [
            ("gamma", self.gamma),
            ("contrast", self.contrast),
            ("brightness", self.brightness),
        ] {
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::config(format!(
                    "{name} range [{lo}, {hi}] must be positive and ordered"
                )));
            }
        }
        if !(self.noise_bound >= 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::config("noise bound and sigma must be >= 0"));
        }
        Ok(())
    }
}

/// Concrete draw of every augmentation parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub flip: bool,
    pub gamma: f64,
    pub contrast: f64,
    pub brightness: f64,
}

impl AugmentParams {
    pub const NEUTRAL: AugmentParams = AugmentParams {
        flip: false,
        gamma: 1.0,
        contrast: 1.0,
        brightness: 1.0,
    };

    pub fn sample<R: Rng + ?Sized>(spec: &AugmentSpec, rng: &mut R) -> Self {
        let uniform = |rng: &mut R, (lo, hi): (f64, f64)| {
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..=hi)
            }
        };
        AugmentParams {
            flip: rng.random::<f64>() < spec.flip_probability,
            gamma: uniform(rng, spec.gamma),
            contrast: uniform(rng, spec.contrast),
            brightness: uniform(rng, spec.brightness),
        }
    }
}

pub fn flip_image(image: &GrayImage) -> GrayImage {
    image::imageops::flip_horizontal(image)
}

/// Applies `params`, then adds truncated Gaussian noise drawn from `rng`
/// (`noise_sigma == 0` disables noise).
pub fn apply<R: Rng + ?Sized>(
    image: &GrayImage,
    mask: &LabelMask,
    params: &AugmentParams,
    noise_bound: f64,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<(GrayImage, LabelMask)> {
    if (image.width() as usize, image.height() as usize) != (mask.width(), mask.height()) {
        return Err(Error::data(format!(
            "image is {} x {} but mask is {} x {}",
            image.width(),
            image.height(),
            mask.width(),
            mask.height()
        )));
    }
    let (image, mask) = if params.flip {
        (flip_image(image), mask.flip_horizontal())
    } else {
        (image.clone(), mask.clone())
    };

    let mut v: Vec<f64> = image
        .as_raw()
        .iter()
        .map(|&p| 255.0 * (p as f64 / 255.0).powf(params.gamma))
        .collect();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    for x in &mut v {
        *x = params.brightness * (mean + params.contrast * (*x - mean));
    }
    if noise_sigma > 0.0 && noise_bound > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::config(e.to_string()))?;
        for x in &mut v {
            let n = loop {
                let s = normal.sample(rng);
                if s.abs() <= noise_bound {
                    break s;
                }
            };
            *x += n;
        }
    }
    let pixels = v.iter().map(|&x| x.round().clamp(0.0, 255.0) as u8).collect();
    let out = GrayImage::from_raw(image.width(), image.height(), pixels).expect("same extents");
    Ok((out, mask))
}

/// Draws parameters from `spec` and augments one image/mask pair.
pub fn augment_pair<R: Rng + ?Sized>(
    image: &GrayImage,
    mask: &LabelMask,
    spec: &AugmentSpec,
    rng: &mut R,
) -> Result<(GrayImage, LabelMask)> {
    spec.validate()?;
    let params = AugmentParams::sample(spec, rng);
    apply(image, mask, &params, spec.noise_bound, spec.noise_sigma, rng)
}

/// A training item; `copy == 0` is the original.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedItem {
    pub id: String,
    pub copy: usize,
    pub image: GrayImage,
    pub mask: LabelMask,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Seed of the random stream for one (item, copy) pair.
pub fn item_seed(seed: u64, id: &str, copy: usize) -> u64 {
    let mut key = Vec::with_capacity(id.len() + 16);
    key.extend_from_slice(&seed.to_le_bytes());
    key.extend_from_slice(id.as_bytes());
    key.extend_from_slice(&(copy as u64).to_le_bytes());
    fnv1a(&key)
}

/// Keeps every original and appends `copies_per_image` augmented copies of
/// each. Every copy has its own random stream keyed by (seed, id, copy), so
/// the output does not depend on processing order.
pub fn expand_dataset(
    items: &[(String, GrayImage, LabelMask)],
    spec: &AugmentSpec,
) -> Result<Vec<AugmentedItem>> {
    spec.validate()?;
    let per_item: Vec<Result<Vec<AugmentedItem>>> = items
        .par_iter()
        .map(|(id, image, mask)| {
            let mut out = vec![AugmentedItem {
                id: id.clone(),
                copy: 0,
                image: image.clone(),
                mask: mask.clone(),
            }];
            for copy in 1..=spec.copies_per_image {
                let mut rng = ChaCha8Rng::seed_from_u64(item_seed(spec.seed, id, copy));
                let (image, mask) = augment_pair(image, mask, spec, &mut rng)?;
                out.push(AugmentedItem {
                    id: id.clone(),
                    copy,
                    image,
                    mask,
                });
            }
            Ok(out)
        })
        .collect();
    let mut out = Vec::with_capacity(items.len() * (1 + spec.copies_per_image));
    for r in per_item {
        out.extend(r?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::WearClass;

    fn pair() -> (GrayImage, LabelMask) {
        let img = GrayImage::from_fn(8, 4, |x, y| image::Luma([(x * 30 + y * 5) as u8]));
        let classes = (0..32).map(|i| (i % 6) as u8).collect();
        (img, LabelMask::new(8, 4, classes).unwrap())
    }

    #[test]
    fn neutral_parameters_are_identity() {
        let (img, mask) = pair();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, m) = apply(&img, &mask, &AugmentParams::NEUTRAL, 50.0, 0.0, &mut rng).unwrap();
        assert_eq!(a, img);
        assert_eq!(m, mask);
    }

    #[test]
    fn double_flip_restores_pair() {
        let (img, mask) = pair();
        let p = AugmentParams {
            flip: true,
            ..AugmentParams::NEUTRAL
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, m) = apply(&img, &mask, &p, 0.0, 0.0, &mut rng).unwrap();
        assert_ne!(a, img);
        let (b, m2) = apply(&a, &m, &p, 0.0, 0.0, &mut rng).unwrap();
        assert_eq!((b, m2), (img, mask));
    }

    #[test]
    fn contrast_is_mean_anchored_then_brightness_scales() {
        let img = GrayImage::from_pixel(4, 4, image::Luma([128]));
        let mask = LabelMask::filled(4, 4, WearClass::Unworn);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let contrast = AugmentParams {
            contrast: 1.2,
            ..AugmentParams::NEUTRAL
        };
        let (a, _) = apply(&img, &mask, &contrast, 0.0, 0.0, &mut rng).unwrap();
        assert!(a.as_raw().iter().all(|&v| v == 128));
        let both = AugmentParams {
            contrast: 1.2,
            brightness: 1.1,
            ..AugmentParams::NEUTRAL
        };
        let (b, _) = apply(&img, &mask, &both, 0.0, 0.0, &mut rng).unwrap();
        assert!(b.as_raw().iter().all(|&v| v == 141));
    }

    #[test]
    fn misaligned_mask_is_a_data_error() {
        let (img, _) = pair();
        let mask = LabelMask::filled(4, 4, WearClass::Unworn);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = augment_pair(&img, &mask, &AugmentSpec::default(), &mut rng).unwrap_err();
        assert_eq!(err.category(), "data");
    }

    #[test]
    fn zero_copies_is_identity() {
        let (img, mask) = pair();
        let spec = AugmentSpec {
            copies_per_image: 0,
            ..Default::default()
        };
        let out = expand_dataset(&[("a".into(), img.clone(), mask.clone())], &spec).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!((&out[0].image, &out[0].mask), (&img, &mask));
    }
}
