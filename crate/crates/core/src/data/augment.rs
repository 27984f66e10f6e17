use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Photometric augmentation ranges. Multipliers are drawn uniformly from
/// the closed interval; the noise standard deviation from `[0, noise_max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentRanges {
    pub noise_max: f64,
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub saturation: (f64, f64),
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            noise_max: 0.02,
            brightness: (0.8, 1.2),
            contrast: (0.8, 1.2),
            saturation: (0.8, 1.2),
        }
    }
}

impl AugmentRanges {
    pub fn identity() -> Self {
        AugmentRanges {
            noise_max: 0.0,
            brightness: (1.0, 1.0),
            contrast: (1.0, 1.0),
            saturation: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} range [{lo}, {hi}]")));
            }
        }
        if !(self.noise_max >= 0.0 && self.noise_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise_max {}",
                self.noise_max
            )));
        }
        Ok(())
    }
}

const LUMA: [Real; 3] = [0.299, 0.587, 0.114];

/// Brightness, contrast about the image mean, saturation against per-pixel
/// luma, additive Gaussian noise, then clamping to `[0, 1]`. Every draw is
/// made regardless of the ranges so the RNG stream does not depend on them.
pub fn augment(image: &Tensor, rng: &mut impl Rng, ranges: &AugmentRanges) -> Tensor {
    let brightness = rng.random_range(ranges.brightness.0..=ranges.brightness.1) as Real;
    let contrast = rng.random_range(ranges.contrast.0..=ranges.contrast.1) as Real;
    let saturation = rng.random_range(ranges.saturation.0..=ranges.saturation.1) as Real;
    let sigma = rng.random_range(0.0..=ranges.noise_max);
    let noise_seed: u64 = rng.random();

    let mut out = image.clone();
    let (c, h, w) = match image.chw() {
        Ok(d) => d,
        Err(_) => return out,
    };
    let hw = h * w;
    if brightness != 1.0 {
        out.data_mut().iter_mut().for_each(|v| *v *= brightness);
    }
    if contrast != 1.0 {
        let mean = out.mean();
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = mean + contrast * (*v - mean));
    }
    if saturation != 1.0 && c == 3 {
        let d = out.data_mut();
        for p in 0..hw {
            let luma: Real = (0..3).map(|k| LUMA[k] * d[k * hw + p]).sum();
            for k in 0..3 {
                d[k * hw + p] = luma + saturation * (d[k * hw + p] - luma);
            }
        }
    }
    if sigma > 0.0 {
        use rand::SeedableRng;
        let mut nr = rand_chacha::ChaCha8Rng::seed_from_u64(noise_seed);
        let n = Normal::new(0.0, sigma).expect("sigma is finite and positive");
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v += n.sample(&mut nr) as Real);
    }
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v = v.clamp(0.0, 1.0));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(seed: u64) -> Tensor {
        crate::data::procedural_image(seed, 16, 16)
    }

    #[test]
    fn degenerate_ranges_are_identity() {
        let x = image(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&x, &mut rng, &AugmentRanges::identity()), x);
    }

    #[test]
    fn gray_is_fixed_under_saturation() {
        let x = Tensor::from_fn(&[3, 4, 4], |i| ((i % 16) as Real) / 20.0);
        let ranges = AugmentRanges {
            saturation: (1.2, 1.2),
            ..AugmentRanges::identity()
        };
        let y = augment(&x, &mut ChaCha8Rng::seed_from_u64(0), &ranges);
        assert!(x.max_abs_diff(&y) < 1e-12);
    }

    proptest! {
        #[test]
        fn output_is_clamped(seed in any::<u64>(), img in 0u64..8) {
            let ranges = AugmentRanges { noise_max: 0.3, brightness: (0.5, 2.0), ..AugmentRanges::default() };
            let y = augment(&image(img), &mut ChaCha8Rng::seed_from_u64(seed), &ranges);
            prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
