//! Sliding-window prediction with halo cropping.
//!
//! The volume is covered by overlapping tile windows; each window is
//! predicted independently and only the tile's core (the window shrunk by
//! the halo) is written into the stitched output. Cores partition the
//! volume exactly: no averaging, no feathering. Windows are clamped to the
//! volume boundary where possible; volumes smaller than the tile are padded
//! with zeros on the trailing side.
//!
//! Window offsets must stay on the model's downsampling grid or pooling
//! misaligns between tiles, so `predict_sliding` rounds the halo up until
//! the stride is a multiple of 2^levels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::ops::Range;

use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::tensor::{quantile, Tensor};
use crate::unet::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormStrategy {
    /// Quantile-normalize the whole image once.
    Global,
    /// Quantile-normalize every sampled tile independently.
    TileWise,
}

/// Input (intensity) normalization: rescale by the (q_min, q_max) quantiles
/// and clip to [0, 1].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NormalizeSpec {
    pub q_min: f64,
    pub q_max: f64,
    pub strategy: NormStrategy,
}

impl NormalizeSpec {
    pub fn global() -> Self {
        NormalizeSpec {
            q_min: 0.01,
            q_max: 0.98,
            strategy: NormStrategy::Global,
        }
    }

    pub fn tile_wise() -> Self {
        NormalizeSpec {
            strategy: NormStrategy::TileWise,
            ..Self::global()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.q_min && self.q_min < self.q_max && self.q_max <= 1.0) {
            return Err(Error::Config(format!(
                "quantiles (q_min={}, q_max={}) must satisfy 0 <= q_min < q_max <= 1",
                self.q_min, self.q_max
            )));
        }
        Ok(())
    }
}

/// x' = clip((x - Q(q_min)) / (Q(q_max) - Q(q_min)), 0, 1).
/// A constant image maps to all zeros.
pub fn quantile_normalize(image: &Tensor, spec: &NormalizeSpec) -> Result<Tensor> {
    spec.validate()?;
    if image.is_empty() {
        return Err(Error::Data("cannot normalize an empty image".into()));
    }
    let q_lo = quantile(image.data(), spec.q_min)?;
    let q_hi = quantile(image.data(), spec.q_max)?;
    let mut out = image.clone();
    if q_hi == q_lo {
        out.data_mut().fill(0.0);
        return Ok(out);
    }
    let range = q_hi - q_lo;
    for v in out.data_mut() {
        *v = ((*v - q_lo) / range).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// One tile of a stitch plan. All coordinates are volume-space.
#[derive(Debug, Clone)]
pub struct TileSpec {
    /// Window start per axis (window extent = tile size, may overhang the
    /// volume on the trailing side when the volume is smaller than a tile).
    pub window_start: [usize; 3],
    /// Output region this tile owns.
    pub core: [Range<usize>; 3],
}

#[derive(Debug, Clone)]
pub struct StitchPlan {
    pub volume_shape: [usize; 3],
    pub tile_size: [usize; 3],
    pub halo: [usize; 3],
    pub tiles: Vec<TileSpec>,
}

/// Per-axis window starts and core boundaries. Interior stride is
/// tile - 2*halo; the last window is clamped so it ends at the volume
/// boundary; first and last cores extend to the boundaries.
fn axis_plan(len: usize, tile: usize, halo: usize) -> Vec<(usize, usize, usize)> {
    if tile >= len {
        return vec![(0, 0, len)];
    }
    let stride = tile - 2 * halo;
    let mut starts = vec![0usize];
    loop {
        let p = *starts.last().unwrap();
        if p + tile >= len {
            break;
        }
        starts.push((p + stride).min(len - tile));
    }
    let n = starts.len();
    starts
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let lo = if i == 0 { 0 } else { p + halo };
            let hi = if i == n - 1 { len } else { starts[i + 1] + halo };
            (p, lo, hi)
        })
        .collect()
}

/// Builds the tile grid for a volume.
pub fn plan_grid(
    volume_shape: [usize; 3],
    tile_size: [usize; 3],
    halo: [usize; 3],
) -> Result<StitchPlan> {
    for a in 0..3 {
        if volume_shape[a] == 0 {
            return Err(Error::Geometry("empty volume".into()));
        }
        if tile_size[a] % 4 != 0 {
            return Err(Error::Geometry(format!(
                "tile size {} on axis {a} not divisible by 4",
                tile_size[a]
            )));
        }
        if 2 * halo[a] >= tile_size[a] {
            return Err(Error::Geometry(format!(
                "halo {} too large for tile {} on axis {a} (need tile - 2*halo >= 1)",
                halo[a], tile_size[a]
            )));
        }
    }
    let axes: Vec<Vec<(usize, usize, usize)>> = (0..3)
        .map(|a| axis_plan(volume_shape[a], tile_size[a], halo[a]))
        .collect();
    let mut tiles = Vec::new();
    for &(pz, lz, hz) in &axes[0] {
        for &(py, ly, hy) in &axes[1] {
            for &(px, lx, hx) in &axes[2] {
                tiles.push(TileSpec {
                    window_start: [pz, py, px],
                    core: [lz..hz, ly..hy, lx..hx],
                });
            }
        }
    }
    Ok(StitchPlan {
        volume_shape,
        tile_size,
        halo,
        tiles,
    })
}

/// Copies the window starting at `start` (extent `tile_size`) out of a
/// [C,D,H,W] volume, zero-filling anything beyond the volume.
pub fn extract_window(volume: &Tensor, start: [usize; 3], tile_size: [usize; 3]) -> Tensor {
    let [c, d, h, w] = volume.dims4().expect("volume rank 4");
    let [td, th, tw] = tile_size;
    let mut out = Tensor::zeros(&[c, td, th, tw]);
    let od = out.data_mut();
    let vd = volume.data();
    for ci in 0..c {
        for z in 0..td {
            let vz = start[0] + z;
            if vz >= d {
                continue;
            }
            for y in 0..th {
                let vy = start[1] + y;
                if vy >= h {
                    continue;
                }
                let copy_w = tw.min(w.saturating_sub(start[2]));
                if copy_w == 0 {
                    continue;
                }
                let src = ((ci * d + vz) * h + vy) * w + start[2];
                let dst = ((ci * td + z) * th + y) * tw;
                od[dst..dst + copy_w].copy_from_slice(&vd[src..src + copy_w]);
            }
        }
    }
    out
}

/// Runs a tile predictor over the plan and stitches tile cores into a full
/// prediction. The predictor maps a [C_in, td, th, tw] window to a
/// [C_out, td, th, tw] prediction. Tiles are independent work items.
pub fn predict_sliding_with<F>(
    predict_tile: F,
    volume: &Tensor,
    spec: &NormalizeSpec,
    plan: &StitchPlan,
    out_channels: usize,
) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    spec.validate()?;
    let [_, d, h, w] = volume.dims4()?;
    let normalized_volume;
    let src: &Tensor = match spec.strategy {
        NormStrategy::Global => {
            normalized_volume = quantile_normalize(volume, spec)?;
            &normalized_volume
        }
        NormStrategy::TileWise => volume,
    };

    let core_preds: Vec<(usize, Tensor)> = plan
        .tiles
        .par_iter()
        .enumerate()
        .map(|(i, t)| -> Result<(usize, Tensor)> {
            let mut window = extract_window(src, t.window_start, plan.tile_size);
            if spec.strategy == NormStrategy::TileWise {
                window = quantile_normalize(&window, spec)?;
            }
            let [cw, td, th, tw] = window.dims4()?;
            let batched = window.reshape(&[1, cw, td, th, tw])?;
            let pred = predict_tile(&batched)?;
            let [_, co, pd, ph, pw] = pred.dims5()?;
            if (pd, ph, pw) != (td, th, tw) || co != out_channels {
                return Err(Error::Shape(format!(
                    "tile predictor returned {:?}, expected [1,{out_channels},{td},{th},{tw}]",
                    pred.shape()
                )));
            }
            // Crop the core (tile coordinates).
            let core = &t.core;
            let (cd, ch, cw2) = (
                core[0].len(),
                core[1].len(),
                core[2].len(),
            );
            let mut crop = Tensor::zeros(&[out_channels, cd, ch, cw2]);
            let cdat = crop.data_mut();
            for ci in 0..out_channels {
                for (zi, vz) in core[0].clone().enumerate() {
                    let tz = vz - t.window_start[0];
                    for (yi, vy) in core[1].clone().enumerate() {
                        let ty = vy - t.window_start[1];
                        let tx0 = core[2].start - t.window_start[2];
                        let src_base = ((ci * td + tz) * th + ty) * tw + tx0;
                        let dst_base = ((ci * cd + zi) * ch + yi) * cw2;
                        cdat[dst_base..dst_base + cw2]
                            .copy_from_slice(&pred.data()[src_base..src_base + cw2]);
                    }
                }
            }
            Ok((i, crop))
        })
        .collect::<Result<Vec<_>>>()?;

    // Deterministic sequential stitch; cores are disjoint.
    let mut out = Tensor::zeros(&[out_channels, d, h, w]);
    let od = out.data_mut();
    for (i, crop) in core_preds {
        let t = &plan.tiles[i];
        let core = &t.core;
        let (cd, ch, cw2) = (core[0].len(), core[1].len(), core[2].len());
        for ci in 0..out_channels {
            for (zi, vz) in core[0].clone().enumerate() {
                for (yi, vy) in core[1].clone().enumerate() {
                    let src = ((ci * cd + zi) * ch + yi) * cw2;
                    let dst = ((ci * d + vz) * h + vy) * w + core[2].start;
                    od[dst..dst + cw2].copy_from_slice(&crop.data()[src..src + cw2]);
                }
            }
        }
    }
    Ok(out)
}

/// Rounds the halo up so the interior stride stays on the model's
/// downsampling grid (stride multiple of 2^levels given tile divisible by
/// 2^levels, which holds when halo is a multiple of 2^(levels-1)).
pub fn align_halo(halo: [usize; 3], levels: usize) -> [usize; 3] {
    let q = 1usize << levels.saturating_sub(1);
    let mut out = halo;
    for v in out.iter_mut() {
        *v = (*v).div_ceil(q) * q;
    }
    out
}

/// Sliding-window prediction of a [C,D,H,W] volume with a U-Net model.
/// The halo is aligned up to the model's downsampling grid first.
pub fn predict_sliding(
    model: &Model,
    volume: &Tensor,
    spec: &NormalizeSpec,
    tile_size: [usize; 3],
    halo: [usize; 3],
    mode: Mode,
) -> Result<Tensor> {
    let [c, ..] = volume.dims4()?;
    if c != model.config.in_channels {
        return Err(Error::Shape(format!(
            "volume has {c} channels, model expects {}",
            model.config.in_channels
        )));
    }
    let div = model.config.spatial_divisor();
    for &t in &tile_size {
        if t % div != 0 {
            return Err(Error::Geometry(format!(
                "tile size {t} not divisible by the model's downsampling factor {div}"
            )));
        }
    }
    let halo = align_halo(halo, model.config.levels);
    let plan = plan_grid(
        [volume.shape()[1], volume.shape()[2], volume.shape()[3]],
        tile_size,
        halo,
    )?;
    predict_sliding_with(
        |tile| model.predict(tile, mode),
        volume,
        spec,
        &plan,
        model.config.out_channels,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::NormKind;
    use crate::tensor::SplitMix64;
    use crate::unet::ModelConfig;
    use proptest::prelude::*;

    #[test]
    fn single_tile_plan_owns_whole_axis() {
        let plan = plan_grid([8, 8, 8], [8, 8, 8], [0, 0, 0]).unwrap();
        assert_eq!(plan.tiles.len(), 1);
        assert_eq!(plan.tiles[0].core, [0..8, 0..8, 0..8]);
    }

    #[test]
    fn hand_enumerated_plan_volume20_tile12_halo2() {
        let plan = plan_grid([20, 12, 12], [12, 12, 12], [2, 2, 2]).unwrap();
        // Axis 0: windows at 0 and 8, cores [0,10) and [10,20).
        assert_eq!(plan.tiles.len(), 2);
        assert_eq!(plan.tiles[0].window_start, [0, 0, 0]);
        assert_eq!(plan.tiles[0].core[0], 0..10);
        assert_eq!(plan.tiles[1].window_start, [8, 0, 0]);
        assert_eq!(plan.tiles[1].core[0], 10..20);
    }

    #[test]
    fn oversized_halo_is_rejected() {
        assert!(plan_grid([20, 20, 20], [12, 12, 12], [6, 6, 6]).is_err());
    }

    proptest! {
        #[test]
        fn cores_partition_the_volume(
            len0 in 4usize..64,
            len1 in 4usize..40,
            tile_q in 1usize..8,
            halo in 0usize..10,
        ) {
            let tile = tile_q * 4;
            prop_assume!(2 * halo < tile);
            let shape = [len0, len1, tile.max(5)];
            let plan = plan_grid(shape, [tile; 3], [halo; 3]).unwrap();
            // Every voxel covered exactly once.
            let mut count = vec![0u8; shape[0] * shape[1] * shape[2]];
            for t in &plan.tiles {
                for z in t.core[0].clone() {
                    for y in t.core[1].clone() {
                        for x in t.core[2].clone() {
                            count[(z * shape[1] + y) * shape[2] + x] += 1;
                        }
                    }
                }
                // Core stays within the window and at least halo from
                // non-boundary window edges.
                for a in 0..3 {
                    let lo = t.core[a].start;
                    let hi = t.core[a].end;
                    let ws = t.window_start[a];
                    let we = ws + tile;
                    prop_assert!(lo >= ws && hi <= we.max(shape[a]));
                    if ws > 0 {
                        prop_assert!(lo >= ws + halo);
                    }
                    if we < shape[a] {
                        prop_assert!(hi + halo <= we);
                    }
                }
            }
            prop_assert!(count.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn constant_volume_normalizes_to_zeros() {
        let img = Tensor::full(&[1, 4, 4, 4], 7.5);
        let out = quantile_normalize(&img, &NormalizeSpec::global()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_is_idempotent_up_to_clipping() {
        let mut rng = SplitMix64::new(1);
        let img = Tensor::uniform(&[1, 6, 6, 6], &mut rng);
        let spec = NormalizeSpec::global();
        let once = quantile_normalize(&img, &spec).unwrap();
        let twice = quantile_normalize(&once, &spec).unwrap();
        // Values already in [0,1]; renormalizing only rescales by the new
        // quantile span, which is 1 for an already-normalized image only at
        // the exact quantile anchors, so compare within clip effects.
        for (&a, &b) in once.data().iter().zip(twice.data()) {
            assert!((0.0..=1.0).contains(&b));
            assert!((a - b).abs() <= 0.15, "{a} vs {b}");
        }
    }

    #[test]
    fn normalize_is_invariant_to_power_of_two_scaling_bitwise() {
        let mut rng = SplitMix64::new(2);
        let img = Tensor::uniform(&[1, 6, 6, 6], &mut rng);
        let spec = NormalizeSpec::global();
        let base = quantile_normalize(&img, &spec).unwrap();
        for scale in [2.0f64, 4.0, 0.5, 1024.0] {
            let mut scaled = img.clone();
            scaled.scale(scale);
            let out = quantile_normalize(&scaled, &spec).unwrap();
            assert_eq!(out.data(), base.data(), "scale {scale}");
        }
    }

    #[test]
    fn normalize_is_invariant_to_general_affine_within_tolerance() {
        let mut rng = SplitMix64::new(3);
        let img = Tensor::uniform(&[1, 6, 6, 6], &mut rng);
        let spec = NormalizeSpec::global();
        let base = quantile_normalize(&img, &spec).unwrap();
        let mut t = img.clone();
        for v in t.data_mut() {
            *v = 3.7 * *v + 11.3;
        }
        let out = quantile_normalize(&t, &spec).unwrap();
        assert!(base.max_abs_diff(&out) < 1e-12);
    }

    #[test]
    fn identity_predictor_reproduces_normalized_volume_exactly() {
        let mut rng = SplitMix64::new(4);
        let vol = Tensor::uniform(&[2, 16, 16, 24], &mut rng);
        let spec = NormalizeSpec::global();
        let want = quantile_normalize(&vol, &spec).unwrap();
        for (tile, halo) in [(8usize, 0usize), (8, 2), (16, 4), (12, 2)] {
            let plan = plan_grid([16, 16, 24], [tile; 3], [halo; 3]).unwrap();
            let got = predict_sliding_with(|t| Ok(t.clone()), &vol, &spec, &plan, 2).unwrap();
            assert_eq!(got.data(), want.data(), "tile {tile} halo {halo}");
        }
    }

    #[test]
    fn volumes_smaller_than_the_tile_are_zero_padded_and_stitched_whole() {
        let mut rng = SplitMix64::new(7);
        let vol = Tensor::uniform(&[1, 8, 8, 20], &mut rng);
        let spec = NormalizeSpec::global();
        let want = quantile_normalize(&vol, &spec).unwrap();
        let plan = plan_grid([8, 8, 20], [16, 16, 16], [2, 2, 2]).unwrap();
        // Windows overhang two axes; the identity predictor sees the zero
        // padding but the cores only keep real voxels.
        let got = predict_sliding_with(|t| Ok(t.clone()), &vol, &spec, &plan, 1).unwrap();
        assert_eq!(got.data(), want.data());
        // The padded region really is zero-filled in the extracted window.
        let win = extract_window(&want, [0, 0, 8], [16, 16, 16]);
        for z in 0..16 {
            for y in 0..16 {
                for x in 0..16 {
                    let v = win.data()[(z * 16 + y) * 16 + x];
                    if z >= 8 || y >= 8 || x >= 12 {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn global_norm_model_stitches_seamlessly_with_trf_halo() {
        // Micro 1-level model: TRF margins are within 10 voxels, so halo 10
        // on a 32-tile grid must reproduce the whole-volume forward exactly.
        let mut cfg = ModelConfig::new(NormKind::BatchNorm).with_features(vec![2, 3]);
        cfg.seed = 8;
        let model = Model::build(&cfg).unwrap();
        let mut rng = SplitMix64::new(5);
        let vol = Tensor::uniform(&[1, 32, 32, 64], &mut rng);
        let spec = NormalizeSpec::global();
        let whole = {
            let norm = quantile_normalize(&vol, &spec).unwrap();
            let batched = norm.reshape(&[1, 1, 32, 32, 64]).unwrap();
            let y = model.predict(&batched, Mode::Eval).unwrap();
            y.reshape(&[3, 32, 32, 64]).unwrap()
        };
        let stitched = predict_sliding(
            &model,
            &vol,
            &spec,
            [32, 32, 32],
            [10, 10, 10],
            Mode::Eval,
        )
        .unwrap();
        assert_eq!(stitched.max_abs_diff(&whole), 0.0);
    }

    #[test]
    fn instance_norm_model_depends_on_tiling() {
        let mut cfg = ModelConfig::new(NormKind::InstanceNorm).with_features(vec![2, 3]);
        cfg.seed = 9;
        let model = Model::build(&cfg).unwrap();
        let mut rng = SplitMix64::new(6);
        // Heterogeneous: second half dim.
        let mut vol = Tensor::uniform(&[1, 32, 32, 64], &mut rng);
        for i in 32 * 32 * 32..vol.len() {
            vol.data_mut()[i] *= 0.05;
        }
        let spec = NormalizeSpec::global();
        let whole = {
            let norm = quantile_normalize(&vol, &spec).unwrap();
            let batched = norm.reshape(&[1, 1, 32, 32, 64]).unwrap();
            let y = model.predict(&batched, Mode::Eval).unwrap();
            y.reshape(&[3, 32, 32, 64]).unwrap()
        };
        let stitched = predict_sliding(
            &model,
            &vol,
            &spec,
            [32, 32, 32],
            [10, 10, 10],
            Mode::Eval,
        )
        .unwrap();
        assert!(stitched.max_abs_diff(&whole) > 0.0);
    }
}
