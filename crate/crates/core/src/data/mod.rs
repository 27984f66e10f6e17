//! Synthetic training pairs.
//!
//! A pair is generated from a source image: a `p x p` window becomes the
//! target `I_T`, its four corners are perturbed by up to `rho` pixels, and
//! the unaligned view `I_U` is resampled so that
//! `warp(I_U, gt_h) ~ I_T`. Cross-resolution pairs degrade the target by a
//! bicubic down/up round trip. Both images are finally snapped to 8-bit
//! levels so that the on-disk form is exact.

mod augment;
mod io;
mod procedural;

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::homography::imageio::{quantize_tensor, read_rgb};
use crate::homography::{dlt, rect_corners, warp, CornerOffsets, Homography};
use crate::parallel;
use crate::tensor::resize::{resize_bicubic, resize_bicubic_to};
use crate::tensor::Tensor;

pub use augment::{augment, AugmentRanges};
pub use io::{
    read_dataset, read_sample, write_dataset, write_sample, GT_FILE, TARGET_FILE, UNALIGNED_FILE,
};
pub use procedural::procedural_image;

/// Retries before a perturbation that keeps the quad convex is abandoned.
pub const MAX_RESAMPLES: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Procedural,
    /// PPM/PGM files, chosen uniformly per sample.
    Directory(PathBuf),
}

#[derive(Clone, Debug)]
pub struct GenConfig {
    pub patch: usize,
    pub rho: f64,
    /// Extra border around the perturbation range in procedural sources.
    pub margin: usize,
    pub augment: Option<AugmentRanges>,
    /// Cross-resolution factor: 1, 4 or 8.
    pub scale: usize,
    pub source: Source,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            patch: 128,
            rho: 32.0,
            margin: 16,
            augment: Some(AugmentRanges::default()),
            scale: 1,
            source: Source::Procedural,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch < 2 {
            return Err(Error::InvalidArgument(
                "patch size must be at least 2".into(),
            ));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "rho must be >= 0, got {}",
                self.rho
            )));
        }
        if !matches!(self.scale, 1 | 4 | 8) {
            return Err(Error::InvalidArgument(format!(
                "cross-resolution factor must be 1, 4 or 8, got {}",
                self.scale
            )));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }

    /// Smallest source extent that fits the patch plus perturbation.
    pub fn min_source_extent(&self) -> usize {
        self.patch + 2 * self.rho.ceil() as usize
    }

    fn procedural_extent(&self) -> usize {
        self.min_source_extent() + 2 * self.margin
    }
}

#[derive(Clone, Debug)]
pub struct SamplePair {
    pub target: Tensor,
    pub unaligned: Tensor,
    pub gt_offsets: CornerOffsets,
    pub gt_h: Homography,
    pub scale: usize,
    pub seed: u64,
}

/// Seed of sample `index` in the dataset drawn from `master`.
pub fn sample_seed(master: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng.random()
}

/// Draws corner offsets in `[-rho, rho]` until the quad is convex.
pub fn random_offsets(patch: usize, rho: f64, rng: &mut impl Rng) -> Result<CornerOffsets> {
    let base = rect_corners(patch, patch);
    for _ in 0..MAX_RESAMPLES {
        let mut v = [0.0; 8];
        if rho > 0.0 {
            v.iter_mut().for_each(|x| *x = rng.random_range(-rho..=rho));
        }
        let co = CornerOffsets::from_vec8(base, &v);
        if co.is_convex() {
            return Ok(co);
        }
    }
    Err(Error::Degenerate(format!(
        "no convex perturbation found in {MAX_RESAMPLES} attempts"
    )))
}

/// Builds one pair from `source`.
pub fn make_pair(
    source: &Tensor,
    cfg: &GenConfig,
    rng: &mut impl Rng,
    seed: u64,
) -> Result<SamplePair> {
    cfg.validate()?;
    let (_, sh, sw) = source.chw()?;
    let need = cfg.min_source_extent();
    if sh < need || sw < need {
        return Err(Error::InvalidArgument(format!(
            "source {sw}x{sh} smaller than patch + 2 rho = {need}"
        )));
    }
    let p = cfg.patch;
    let pad = cfg.rho.ceil() as usize;
    let x0 = rng.random_range(pad..=sw - p - pad);
    let y0 = rng.random_range(pad..=sh - p - pad);
    let gt_offsets = random_offsets(p, cfg.rho, rng)?;
    let gt_h = dlt(&gt_offsets.base, &gt_offsets.displaced())?;
    let to_source = Homography::translation(x0 as f64, y0 as f64);
    let mut target = source.crop(x0, y0, p, p)?;
    let mut unaligned = warp(source, &to_source.compose(&gt_h.inverse()?)?, p, p)?;
    if cfg.scale > 1 {
        target = resize_bicubic_to(&resize_bicubic(&target, 1, cfg.scale)?, p, p)?;
    }
    if let Some(ranges) = &cfg.augment {
        target = augment(&target, rng, ranges);
        unaligned = augment(&unaligned, rng, ranges);
    }
    Ok(SamplePair {
        target: quantize_tensor(&target),
        unaligned: quantize_tensor(&unaligned),
        gt_offsets,
        gt_h,
        scale: cfg.scale,
        seed,
    })
}

fn list_images(dir: &std::path::Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{}: no .ppm/.pgm images",
            dir.display()
        )));
    }
    Ok(files)
}

/// Regenerates a sample from its own seed.
pub fn generate_from_seed(cfg: &GenConfig, seed: u64) -> Result<SamplePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source = match &cfg.source {
        Source::Procedural => {
            let n = cfg.procedural_extent();
            procedural_image(rng.random(), n, n)
        }
        Source::Directory(dir) => {
            let files = list_images(dir)?;
            read_rgb(&files[rng.random_range(0..files.len())])?
        }
    };
    make_pair(&source, cfg, &mut rng, seed)
}

pub fn generate(cfg: &GenConfig, master: u64, index: u64) -> Result<SamplePair> {
    generate_from_seed(cfg, sample_seed(master, index))
}

/// Samples `first..first + n` of the dataset drawn from `master`.
pub fn generate_range(
    cfg: &GenConfig,
    master: u64,
    first: u64,
    n: usize,
) -> Result<Vec<SamplePair>> {
    cfg.validate()?;
    parallel::map_indexed(n, |i| generate(cfg, master, first + i as u64))
        .into_iter()
        .collect()
}
