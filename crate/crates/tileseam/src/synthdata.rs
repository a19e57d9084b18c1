//! Deterministic generator of heterogeneous 3D volumes: bright spherical
//! blobs confined to one half of the last axis, three-class one-hot labels
//! (background / foreground / boundary), an intensity ramp, Gaussian noise
//! and an occasional bright plane. The point of the design is that tile
//! statistics differ sharply from global statistics, which is the
//! precondition for every normalization artifact this crate studies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{SplitMix64, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    /// [D, H, W]; every extent divisible by 4.
    pub shape: [usize; 3],
    /// Inclusive blob count range.
    pub blob_count: (usize, usize),
    /// Blob radius range in voxels.
    pub blob_radius: (f64, f64),
    /// Boundary shell thickness in voxels.
    pub shell_thickness: usize,
    /// Blobs only occupy the first `dense_fraction` of the last axis.
    pub dense_fraction: f64,
    /// Linear intensity ramp amplitude along the last axis (descending
    /// toward the sparse half).
    pub ramp_amplitude: f64,
    /// Additive Gaussian noise sigma.
    pub noise_sigma: f64,
    /// Probability of a bright plane artifact in the sparse half.
    pub bright_line_prob: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            shape: [64, 64, 128],
            blob_count: (8, 14),
            blob_radius: (4.0, 8.0),
            shell_thickness: 1,
            dense_fraction: 0.5,
            ramp_amplitude: 0.10,
            noise_sigma: 0.04,
            bright_line_prob: 0.5,
            seed: 0,
        }
    }
}

pub struct SynthVolume {
    /// [1, D, H, W]
    pub image: Tensor,
    /// [3, D, H, W] one-hot {background, foreground, boundary}
    pub labels: Tensor,
}

pub const CLASS_BACKGROUND: usize = 0;
pub const CLASS_FOREGROUND: usize = 1;
pub const CLASS_BOUNDARY: usize = 2;

struct Blob {
    center: [f64; 3],
    radius: f64,
    brightness: f64,
}

fn validate(spec: &SynthSpec) -> Result<()> {
    for &e in &spec.shape {
        if e == 0 || e % 4 != 0 {
            return Err(Error::Config(format!(
                "volume shape {:?} must have positive extents divisible by 4",
                spec.shape
            )));
        }
    }
    if spec.blob_count.0 > spec.blob_count.1 || spec.blob_radius.0 > spec.blob_radius.1 {
        return Err(Error::Config("empty blob count/radius range".into()));
    }
    if !(0.0 < spec.dense_fraction && spec.dense_fraction <= 1.0) {
        return Err(Error::Config("dense_fraction outside (0,1]".into()));
    }
    let max_r = spec.blob_radius.1;
    let dense_w = (spec.shape[2] as f64 * spec.dense_fraction).floor();
    if 2.0 * max_r + 2.0 > spec.shape[0] as f64
        || 2.0 * max_r + 2.0 > spec.shape[1] as f64
        || 2.0 * max_r + 2.0 > dense_w
    {
        return Err(Error::Config(format!(
            "blob radius up to {max_r} does not fit the dense region of {:?}",
            spec.shape
        )));
    }
    Ok(())
}

/// Generates one volume. A pure function of the spec; identical specs give
/// bit-identical volumes.
pub fn generate(spec: &SynthSpec) -> Result<SynthVolume> {
    validate(spec)?;
    let [d, h, w] = spec.shape;
    let sp = d * h * w;
    let mut rng = SplitMix64::with_stream(spec.seed, 0x5D47A);

    // Place non-overlapping spheres inside the dense region.
    let count = spec.blob_count.0 + rng.index(spec.blob_count.1 - spec.blob_count.0 + 1);
    let dense_w = (w as f64 * spec.dense_fraction).floor();
    let mut blobs: Vec<Blob> = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while blobs.len() < count {
        attempts += 1;
        if attempts > 200 * count {
            return Err(Error::Data(format!(
                "could not place {count} non-overlapping blobs after {attempts} attempts"
            )));
        }
        let r = rng.range(spec.blob_radius.0, spec.blob_radius.1);
        let margin = r + 1.0;
        let c = [
            rng.range(margin, d as f64 - margin),
            rng.range(margin, h as f64 - margin),
            rng.range(margin, dense_w - margin),
        ];
        let overlaps = blobs.iter().any(|b| {
            let dist2 = (b.center[0] - c[0]).powi(2)
                + (b.center[1] - c[1]).powi(2)
                + (b.center[2] - c[2]).powi(2);
            dist2.sqrt() < b.radius + r + 1.0
        });
        if !overlaps {
            let brightness = rng.range(0.6, 0.9);
            blobs.push(Blob {
                center: c,
                radius: r,
                brightness,
            });
        }
    }

    // Rasterize the instance mask and the base image.
    let mut instance = vec![false; sp];
    let mut image = vec![0.1f64; sp];
    for b in &blobs {
        let r = b.radius;
        let lo = |c: f64| (c - r).floor().max(0.0) as usize;
        let hi = |c: f64, n: usize| ((c + r).ceil() as usize + 1).min(n);
        for z in lo(b.center[0])..hi(b.center[0], d) {
            for y in lo(b.center[1])..hi(b.center[1], h) {
                for x in lo(b.center[2])..hi(b.center[2], w) {
                    let dist2 = (z as f64 - b.center[0]).powi(2)
                        + (y as f64 - b.center[1]).powi(2)
                        + (x as f64 - b.center[2]).powi(2);
                    if dist2 <= r * r {
                        let i = (z * h + y) * w + x;
                        instance[i] = true;
                        image[i] += b.brightness;
                    }
                }
            }
        }
    }

    // Labels are geometry: boundary voxels are instance voxels within
    // shell_thickness (Chebyshev) of a non-instance voxel; voxels outside
    // the volume count as non-instance.
    let t = spec.shell_thickness as i64;
    let mut labels = Tensor::zeros(&[3, d, h, w]);
    {
        let lab = labels.data_mut();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = (z * h + y) * w + x;
                    if !instance[i] {
                        lab[CLASS_BACKGROUND * sp + i] = 1.0;
                        continue;
                    }
                    let mut is_boundary = false;
                    'scan: for dz in -t..=t {
                        for dy in -t..=t {
                            for dx in -t..=t {
                                let (zz, yy, xx) =
                                    (z as i64 + dz, y as i64 + dy, x as i64 + dx);
                                if zz < 0
                                    || yy < 0
                                    || xx < 0
                                    || zz >= d as i64
                                    || yy >= h as i64
                                    || xx >= w as i64
                                {
                                    is_boundary = true;
                                    break 'scan;
                                }
                                let j = ((zz as usize) * h + yy as usize) * w + xx as usize;
                                if !instance[j] {
                                    is_boundary = true;
                                    break 'scan;
                                }
                            }
                        }
                    }
                    let class = if is_boundary {
                        CLASS_BOUNDARY
                    } else {
                        CLASS_FOREGROUND
                    };
                    lab[class * sp + i] = 1.0;
                }
            }
        }
    }

    // Imaging effects after labels: ramp, bright plane, noise.
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let ramp = spec.ramp_amplitude * (1.0 - x as f64 / (w - 1) as f64);
                image[(z * h + y) * w + x] += ramp;
            }
        }
    }
    if rng.uniform() < spec.bright_line_prob {
        // A bright plane in the sparse half, perpendicular to the last axis.
        let sparse_lo = dense_w as usize;
        if sparse_lo < w {
            let plane = sparse_lo + rng.index(w - sparse_lo);
            for z in 0..d {
                for y in 0..h {
                    image[(z * h + y) * w + plane] += 0.5;
                }
            }
        }
    }
    for v in image.iter_mut() {
        *v += rng.normal() * spec.noise_sigma;
    }

    // Heterogeneity guarantee: dense-half mean must exceed sparse-half mean
    // by more than the noise sigma, otherwise tile statistics would not
    // diverge from global ones and the spec is invalid.
    let split = (w as f64 * spec.dense_fraction) as usize;
    let (mut dense_sum, mut dense_n, mut sparse_sum, mut sparse_n) = (0.0, 0usize, 0.0, 0usize);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let v = image[(z * h + y) * w + x];
                if x < split {
                    dense_sum += v;
                    dense_n += 1;
                } else {
                    sparse_sum += v;
                    sparse_n += 1;
                }
            }
        }
    }
    if spec.dense_fraction < 1.0 {
        let gap = dense_sum / dense_n as f64 - sparse_sum / sparse_n.max(1) as f64;
        if gap <= spec.noise_sigma {
            return Err(Error::Data(format!(
                "generated volume not heterogeneous enough: dense-sparse mean gap {gap:.4} <= noise sigma {}",
                spec.noise_sigma
            )));
        }
    }

    let image = Tensor::from_vec(&[1, d, h, w], image)?;
    Ok(SynthVolume { image, labels })
}
