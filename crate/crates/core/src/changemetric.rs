//! Environment-change images: what moved in the scene, ignoring the arm.
//!
//! Both observations are masked with the union of their arm masks, blurred,
//! and compared twice: per pixel and per 4x4 patch mean. A pixel is flagged
//! only when both distances clear their thresholds. The flagged raster is
//! max-pooled to a 32x32 binary grid whose set fraction is the change norm.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::derive_seed;
use crate::simworld::Observation;

pub const CHANGE_SIDE: usize = 32;
pub const CHANGE_PIXELS: usize = CHANGE_SIDE * CHANGE_SIDE;

/// Segmenter error model: dilation of the arm mask, then random pixel flips.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MaskNoiseConfig {
    pub flip_prob: f64,
    pub dilate_px: usize,
}

impl MaskNoiseConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!(
                "flip_prob must lie in [0, 1], got {}",
                self.flip_prob
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChangeConfig {
    pub blur_sigma: f64,
    pub pixel_threshold: f64,
    pub feature_threshold: f64,
    pub patch: usize,
    pub noise: MaskNoiseConfig,
}

impl Default for ChangeConfig {
    fn default() -> Self {
        Self {
            blur_sigma: 1.0,
            pixel_threshold: 0.1,
            feature_threshold: 0.05,
            patch: 4,
            noise: MaskNoiseConfig::none(),
        }
    }
}

impl ChangeConfig {
    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        if self.blur_sigma < 0.0 || self.patch == 0 {
            return Err(Error::Config("blur_sigma must be >= 0 and patch > 0".into()));
        }
        Ok(())
    }
}

/// Binary 32x32 change grid with its normalised count.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangeImage {
    pub grid: Vec<bool>,
    pub norm: f64,
}

impl ChangeImage {
    pub fn zero() -> Self {
        Self {
            grid: vec![false; CHANGE_PIXELS],
            norm: 0.0,
        }
    }

    pub fn from_grid(grid: Vec<bool>) -> Self {
        let norm = grid.iter().filter(|&&g| g).count() as f64 / grid.len().max(1) as f64;
        Self { grid, norm }
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.grid.iter().map(|&g| if g { 1.0 } else { 0.0 }).collect()
    }
}

/// Arm mask after dilation and seeded flips.
pub fn noisy_mask(agent: &[bool], size: usize, noise: &MaskNoiseConfig, seed: u64) -> Vec<bool> {
    let mut mask = dilate(agent, size, noise.dilate_px);
    if noise.flip_prob > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for m in mask.iter_mut() {
            if rng.random::<f64>() < noise.flip_prob {
                *m = !*m;
            }
        }
    }
    mask
}

fn dilate(mask: &[bool], size: usize, px: usize) -> Vec<bool> {
    if px == 0 {
        return mask.to_vec();
    }
    let mut out = vec![false; mask.len()];
    for r in 0..size {
        for c in 0..size {
            if !mask[r * size + c] {
                continue;
            }
            for rr in r.saturating_sub(px)..=(r + px).min(size - 1) {
                for cc in c.saturating_sub(px)..=(c + px).min(size - 1) {
                    out[rr * size + cc] = true;
                }
            }
        }
    }
    out
}

fn apply_mask(img: &[f64], mask: &[bool]) -> Vec<f64> {
    img.iter()
        .zip(mask)
        .map(|(&v, &m)| if m { 0.0 } else { v })
        .collect()
}

/// Composite image with (possibly noisy) arm pixels zeroed.
pub fn mask_agent(obs: &Observation, noise: &MaskNoiseConfig, seed: u64) -> Vec<f64> {
    let mask = noisy_mask(&obs.agent_layer, obs.size, noise, seed);
    apply_mask(&obs.composite, &mask)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(img: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    if k.len() == 1 {
        return img.to_vec();
    }
    let radius = (k.len() / 2) as i64;
    let n = size as i64;
    let mut tmp = vec![0.0; img.len()];
    for r in 0..n {
        for c in 0..n {
            let mut acc = 0.0;
            for (i, w) in k.iter().enumerate() {
                let cc = (c + i as i64 - radius).clamp(0, n - 1);
                acc += w * img[(r * n + cc) as usize];
            }
            tmp[(r * n + c) as usize] = acc;
        }
    }
    let mut out = vec![0.0; img.len()];
    for r in 0..n {
        for c in 0..n {
            let mut acc = 0.0;
            for (i, w) in k.iter().enumerate() {
                let rr = (r + i as i64 - radius).clamp(0, n - 1);
                acc += w * tmp[(rr * n + c) as usize];
            }
            out[(r * n + c) as usize] = acc;
        }
    }
    out
}

/// Patch-mean descriptors of a `size x size` image (one value per `patch x patch` block).
pub fn patch_features(img: &[f64], size: usize, patch: usize) -> Vec<f64> {
    let side = size.div_ceil(patch);
    let mut sums = vec![0.0; side * side];
    let mut counts = vec![0usize; side * side];
    for r in 0..size {
        for c in 0..size {
            let i = (r / patch) * side + c / patch;
            sums[i] += img[r * size + c];
            counts[i] += 1;
        }
    }
    sums.iter().zip(&counts).map(|(s, &n)| s / n as f64).collect()
}

/// Max-pools a binary `size x size` raster to `side x side`.
pub fn max_pool(mask: &[bool], size: usize, side: usize) -> Vec<bool> {
    let mut out = vec![false; side * side];
    for r in 0..size {
        for c in 0..size {
            if mask[r * size + c] {
                out[(r * side / size) * side + c * side / size] = true;
            }
        }
    }
    out
}

/// Pixel-level change flags before pooling.
pub fn change_flags(
    x_i: &Observation,
    x_j: &Observation,
    cfg: &ChangeConfig,
    seed: u64,
) -> Result<Vec<bool>> {
    if x_i.size != x_j.size || x_i.composite.len() != x_j.composite.len() {
        return Err(Error::dims(
            format!("{0}x{0}", x_i.size),
            format!("{0}x{0}", x_j.size),
        ));
    }
    let n = x_i.size;
    let mi = noisy_mask(&x_i.agent_layer, n, &cfg.noise, derive_seed(seed, "mask", 0));
    let mj = noisy_mask(&x_j.agent_layer, n, &cfg.noise, derive_seed(seed, "mask", 1));
    // compare only pixels visible in both frames so that occlusion by the arm
    // does not register as change
    let union: Vec<bool> = mi.iter().zip(&mj).map(|(&a, &b)| a || b).collect();
    let bi = gaussian_blur(&apply_mask(&x_i.composite, &union), n, cfg.blur_sigma);
    let bj = gaussian_blur(&apply_mask(&x_j.composite, &union), n, cfg.blur_sigma);
    let fi = patch_features(&bi, n, cfg.patch);
    let fj = patch_features(&bj, n, cfg.patch);
    let fside = n.div_ceil(cfg.patch);
    let mut flags = vec![false; n * n];
    for r in 0..n {
        for c in 0..n {
            let p = r * n + c;
            let f = (r / cfg.patch) * fside + c / cfg.patch;
            flags[p] = (bi[p] - bj[p]).abs() > cfg.pixel_threshold
                && (fi[f] - fj[f]).abs() > cfg.feature_threshold;
        }
    }
    Ok(flags)
}

pub fn change_image(
    x_i: &Observation,
    x_j: &Observation,
    cfg: &ChangeConfig,
    seed: u64,
) -> Result<ChangeImage> {
    let flags = change_flags(x_i, x_j, cfg, seed)?;
    Ok(ChangeImage::from_grid(max_pool(&flags, x_i.size, CHANGE_SIDE)))
}

/// Labels every frame against the first one; returns the labels and their summed norm.
pub fn label_trajectory(
    observations: &[Observation],
    cfg: &ChangeConfig,
    seed: u64,
) -> Result<(Vec<ChangeImage>, f64)> {
    let first = observations.first().ok_or(Error::EmptyTrajectory)?;
    let mut labels = Vec::with_capacity(observations.len());
    labels.push(ChangeImage::zero());
    for (t, obs) in observations.iter().enumerate().skip(1) {
        labels.push(change_image(obs, first, cfg, derive_seed(seed, "label", t as u64))?);
    }
    let total = labels.iter().map(|c| c.norm).sum();
    Ok((labels, total))
}
