//! Diagnostics: theoretical/effective receptive field probes, the tile
//! mismatch metric (prediction disagreement of overlapping tiles in the
//! valid part of their overlap), train/eval disparity, and Dice evaluation.
//!
//! The theoretical receptive field is computed twice by independent routes:
//! interval propagation through the layer graph, and a gradient-support
//! probe on a linearized all-positive clone of the network where no
//! cancellation can hide a dependency. Models with tile-coupled
//! normalization statistics report FULL_TILE instead of a box.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{quantile_normalize, NormStrategy, NormalizeSpec};
use crate::layers::Mode;
use crate::tensor::{conv3d, conv3d_backward_input, SplitMix64, Tensor};
use crate::train::Volume;
use crate::unet::{Model, ModelConfig};

// ---------------------------------------------------------------------------
// Theoretical receptive field
// ---------------------------------------------------------------------------

/// Per-axis (before, after) margins of the receptive-field box around a
/// voxel, or the whole tile when instance statistics couple every voxel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrfResult {
    Box { margins: [(usize, usize); 3] },
    FullTile,
}

impl TrfResult {
    /// Worst-case per-axis radius, the halo a seamless stitch needs.
    pub fn radius(&self) -> Option<usize> {
        match self {
            TrfResult::Box { margins } => Some(
                margins
                    .iter()
                    .map(|&(a, b)| a.max(b))
                    .max()
                    .unwrap_or(0),
            ),
            TrfResult::FullTile => None,
        }
    }
}

/// Widens an interval by `blocks` same-padding convolutions of kernel `k`.
fn widen_blocks(iv: (i64, i64), blocks: usize, k: usize) -> (i64, i64) {
    let r = (blocks * (k - 1) / 2) as i64;
    (iv.0 - r, iv.1 + r)
}

/// Input interval needed by a U-Net stage with `l` levels below it, given
/// the interval needed at the stage output. Coordinates are absolute and
/// assumed far from any boundary.
fn stage_interval(l: usize, blocks: usize, k: usize, out_iv: (i64, i64)) -> (i64, i64) {
    if l == 0 {
        return widen_blocks(out_iv, blocks, k);
    }
    // Stage forward: e = enc_blocks(x); p = pool(e); u = sub(p);
    // up = upconv(u); y = dec_blocks(concat(up, e)).
    let concat_iv = widen_blocks(out_iv, blocks, k);
    // Transposed conv k2 s2: output o depends on input floor(o/2) terms;
    // for an interval the needed inputs are [floor(lo/2), floor(hi/2)].
    let up_in = (concat_iv.0.div_euclid(2), concat_iv.1.div_euclid(2));
    let pool_out = stage_interval(l - 1, blocks, k, up_in);
    let pool_in = (2 * pool_out.0, 2 * pool_out.1 + 1);
    // The encoder output feeds both the pool path and the skip.
    let enc_out = (concat_iv.0.min(pool_in.0), concat_iv.1.max(pool_in.1));
    widen_blocks(enc_out, blocks, k)
}

/// Exact TRF margins (before, after) of one output voxel at absolute
/// position `center` along one axis. Margins depend on `center mod
/// 2^levels` through the down/upsampling grid.
pub fn trf_margins_at(levels: usize, blocks: usize, k: usize, center: i64) -> (i64, i64) {
    // Final 1x1x1 conv and pointwise activations do not widen.
    let (lo, hi) = stage_interval(levels, blocks, k, (center, center));
    (center - lo, hi - center)
}

/// Theoretical receptive field of a model config in the given mode.
/// Margins are the worst case over all grid parities, so `halo >= radius`
/// covers every output voxel.
pub fn compute_trf(config: &ModelConfig, mode: Mode) -> Result<TrfResult> {
    config.validate()?;
    if config.norm_kind.uses_input_stats(mode) {
        return Ok(TrfResult::FullTile);
    }
    let period = 1i64 << config.levels;
    let base = 1024 * period;
    let mut before = 0i64;
    let mut after = 0i64;
    for p in 0..period {
        let (b, a) = trf_margins_at(config.levels, config.blocks_per_level, config.conv_kernel, base + p);
        before = before.max(b);
        after = after.max(a);
    }
    let m = (before as usize, after as usize);
    Ok(TrfResult::Box {
        margins: [m, m, m],
    })
}

/// Gradient-support oracle for the TRF: walks the adjoint of a linearized
/// clone of the architecture (single channel, all-ones kernels, sum pooling
/// instead of max, skips as addition). Every path coefficient is positive,
/// so the nonzero support of the propagated seed equals the computation
/// graph of the center voxel exactly. Returns the support margins and
/// whether the support is a filled box.
pub fn trf_support_probe(
    levels: usize,
    blocks: usize,
    k: usize,
    tile: usize,
    center: [usize; 3],
) -> Result<([(usize, usize); 3], bool)> {
    let div = 1usize << levels;
    if tile % div != 0 {
        return Err(Error::Geometry(format!(
            "probe tile {tile} not divisible by {div}"
        )));
    }
    let ones_k = Tensor::full(&[1, 1, k, k, k], 1.0);
    let ones_2 = Tensor::full(&[1, 1, 2, 2, 2], 1.0);
    let pad = (k - 1) / 2;

    fn blocks_adjoint(delta: &Tensor, w: &Tensor, blocks: usize, pad: usize) -> Result<Tensor> {
        let mut d = delta.clone();
        let shape = d.dims4()?;
        for _ in 0..blocks {
            d = conv3d_backward_input(w, &d, &shape, 1, pad)?;
        }
        Ok(d)
    }

    fn sumpool_adjoint(delta: &Tensor) -> Result<Tensor> {
        let [c, d, h, w] = delta.dims4()?;
        let mut out = Tensor::zeros(&[c, 2 * d, 2 * h, 2 * w]);
        let od = out.data_mut();
        let dd = delta.data();
        for ci in 0..c {
            for z in 0..2 * d {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        od[((ci * 2 * d + z) * 2 * h + y) * 2 * w + x] =
                            dd[((ci * d + z / 2) * h + y / 2) * w + x / 2];
                    }
                }
            }
        }
        Ok(out)
    }

    fn stage_adjoint(
        l: usize,
        delta: &Tensor,
        ones_k: &Tensor,
        ones_2: &Tensor,
        blocks: usize,
        pad: usize,
    ) -> Result<Tensor> {
        if l == 0 {
            return blocks_adjoint(delta, ones_k, blocks, pad);
        }
        let d_concat = blocks_adjoint(delta, ones_k, blocks, pad)?;
        let d_skip = d_concat.clone();
        // Adjoint of the k2 s2 transposed conv is a stride-2 gather.
        let d_sub = conv3d(&d_concat, ones_2, &[0.0], 2, 0)?;
        let d_pool_out = stage_adjoint(l - 1, &d_sub, ones_k, ones_2, blocks, pad)?;
        let mut d_enc = sumpool_adjoint(&d_pool_out)?;
        d_enc.add_assign(&d_skip);
        blocks_adjoint(&d_enc, ones_k, blocks, pad)
    }

    let mut seed = Tensor::zeros(&[1, tile, tile, tile]);
    seed.data_mut()[(center[0] * tile + center[1]) * tile + center[2]] = 1.0;
    let grad = stage_adjoint(levels, &seed, &ones_k, &ones_2, blocks, pad)?;

    // Bounding box of the nonzero support.
    let mut lo = [tile; 3];
    let mut hi = [0usize; 3];
    let gd = grad.data();
    for z in 0..tile {
        for y in 0..tile {
            for x in 0..tile {
                if gd[(z * tile + y) * tile + x] != 0.0 {
                    let p = [z, y, x];
                    for a in 0..3 {
                        lo[a] = lo[a].min(p[a]);
                        hi[a] = hi[a].max(p[a]);
                    }
                }
            }
        }
    }
    if lo[0] > hi[0] {
        return Err(Error::Data("gradient support is empty".into()));
    }
    // The support must also be a filled box for the margins to be the
    // whole story.
    let mut filled = true;
    for z in lo[0]..=hi[0] {
        for y in lo[1]..=hi[1] {
            for x in lo[2]..=hi[2] {
                if gd[(z * tile + y) * tile + x] == 0.0 {
                    filled = false;
                }
            }
        }
    }
    let margins = [
        (center[0] - lo[0], hi[0] - center[0]),
        (center[1] - lo[1], hi[1] - center[1]),
        (center[2] - lo[2], hi[2] - center[2]),
    ];
    Ok((margins, filled))
}

// ---------------------------------------------------------------------------
// Effective receptive field
// ---------------------------------------------------------------------------

/// log10 of the voxelwise mean absolute input gradient of the center output
/// voxel (summed over output channels), over `n_samples` uniform random
/// tiles. Values are floored at 1e-12 before the log.
pub fn compute_erf(
    model: &Model,
    tile: usize,
    n_samples: usize,
    rng: &mut SplitMix64,
) -> Result<Tensor> {
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be >= 1".into()));
    }
    let c_in = model.config.in_channels;
    let mut acc = Tensor::zeros(&[tile, tile, tile]);
    for _ in 0..n_samples {
        let x = Tensor::uniform(&[1, c_in, tile, tile, tile], rng);
        let out = model.forward(&x, Mode::Eval)?;
        let mut dy = Tensor::zeros(out.y.shape());
        let sp = tile * tile * tile;
        let center = ((tile / 2) * tile + tile / 2) * tile + tile / 2;
        for co in 0..model.config.out_channels {
            dy.data_mut()[co * sp + center] = 1.0;
        }
        let (_, dx) = model.backward(&out.tape, &dy)?;
        // Mean |grad| over input channels.
        let ad = acc.data_mut();
        for ci in 0..c_in {
            for i in 0..sp {
                ad[i] += dx.data()[ci * sp + i].abs() / c_in as f64;
            }
        }
    }
    let inv = 1.0 / n_samples as f64;
    let mut out = acc;
    for v in out.data_mut() {
        *v = (*v * inv).max(1e-12).log10();
    }
    Ok(out)
}

/// Receptive-field report: TRF plus the ERF map probed on one tile size.
pub struct RfReport {
    pub trf: TrfResult,
    pub tile_size: usize,
    pub samples: usize,
    pub erf_map: Tensor,
}

// ---------------------------------------------------------------------------
// Dice helpers
// ---------------------------------------------------------------------------

/// Dice of two binary masks given as thresholded slices; both-empty is 1.
pub fn binary_dice(a: &[f64], b: &[f64], threshold: f64) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut inter = 0usize;
    let mut na = 0usize;
    let mut nb = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        let xa = x > threshold;
        let yb = y > threshold;
        if xa {
            na += 1;
        }
        if yb {
            nb += 1;
        }
        if xa && yb {
            inter += 1;
        }
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// Median of a list (mean of the two middle elements for even lengths).
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---------------------------------------------------------------------------
// Tile mismatch
// ---------------------------------------------------------------------------

/// Geometry of the overlapping-tile probe: a probe region of
/// `tile + split_offset` along the last axis is split into two `tile`-sized
/// windows offset by `split_offset`; predictions are compared on the
/// overlap shrunk by `halo` from every tile edge.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MismatchProbe {
    pub tile: [usize; 3],
    pub split_offset: usize,
    pub grid_stride: usize,
    pub halo: usize,
    pub threshold: f64,
}

impl MismatchProbe {
    /// Desk-scale default: 32x32x48 probes split into two 32^3 tiles offset
    /// by 16, sampled on a stride-16 grid.
    pub fn desk() -> Self {
        MismatchProbe {
            tile: [32, 32, 32],
            split_offset: 16,
            grid_stride: 16,
            halo: 4,
            threshold: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.split_offset == 0 {
            return Err(Error::Geometry("split_offset must be positive".into()));
        }
        let overlap = self.tile[2] as i64 - self.split_offset as i64;
        if overlap - 2 * self.halo as i64 <= 0 {
            return Err(Error::Geometry(format!(
                "valid overlap is empty: tile {} - offset {} - 2*halo {} <= 0",
                self.tile[2], self.split_offset, self.halo
            )));
        }
        for a in 0..2 {
            if 2 * self.halo >= self.tile[a] {
                return Err(Error::Geometry(format!(
                    "halo {} swallows tile axis {a}",
                    self.halo
                )));
            }
        }
        if self.grid_stride == 0 {
            return Err(Error::Geometry("grid_stride must be positive".into()));
        }
        Ok(())
    }
}

/// Tile-mismatch report. `seamless` means max_dist is exactly 0.0; report
/// writers render the per-channel mismatch as "no" in that case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchReport {
    pub max_dist: f64,
    pub per_channel_mismatch: Vec<f64>,
    pub tiles_compared: usize,
    pub seamless: bool,
}

/// Runs the overlap probe with an arbitrary tile predictor
/// ([1,C,td,th,tw] -> [1,C_out,td,th,tw]).
pub fn tile_mismatch_with<F>(
    predict_tile: F,
    volume: &Tensor,
    spec: &NormalizeSpec,
    probe: &MismatchProbe,
    out_channels: usize,
) -> Result<MismatchReport>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    probe.validate()?;
    spec.validate()?;
    let [_, d, h, w] = volume.dims4()?;
    let [t0, t1, t2] = probe.tile;
    let probe_w = t2 + probe.split_offset;
    if t0 > d || t1 > h || probe_w > w {
        return Err(Error::Geometry(format!(
            "probe region [{t0},{t1},{probe_w}] does not fit volume [{d},{h},{w}]"
        )));
    }

    let normalized;
    let src = match spec.strategy {
        NormStrategy::Global => {
            normalized = quantile_normalize(volume, spec)?;
            &normalized
        }
        NormStrategy::TileWise => volume,
    };

    let positions: Vec<[usize; 3]> = {
        let steps = |len: usize, size: usize| -> Vec<usize> {
            (0..=len - size).step_by(probe.grid_stride).collect()
        };
        let mut v = Vec::new();
        for &pz in &steps(d, t0) {
            for &py in &steps(h, t1) {
                for &px in &steps(w, probe_w) {
                    v.push([pz, py, px]);
                }
            }
        }
        v
    };

    let mut max_dist = 0.0f64;
    let mut per_channel: Vec<Vec<f64>> = vec![Vec::new(); out_channels];
    let halo = probe.halo;

    for pos in &positions {
        let run = |start: [usize; 3]| -> Result<Tensor> {
            let mut win = crate::infer::extract_window(src, start, probe.tile);
            if spec.strategy == NormStrategy::TileWise {
                win = quantile_normalize(&win, spec)?;
            }
            let [c, a, b, cc] = win.dims4()?;
            predict_tile(&win.reshape(&[1, c, a, b, cc])?)
        };
        let p1 = run(*pos)?;
        let p2 = run([pos[0], pos[1], pos[2] + probe.split_offset])?;

        // Valid overlap, tile-1 coordinates: z in [halo, t0-halo),
        // y in [halo, t1-halo), x in [offset+halo, t2-halo).
        let zr = halo..t0 - halo;
        let yr = halo..t1 - halo;
        let xr = probe.split_offset + halo..t2 - halo;
        for ci in 0..out_channels {
            let mut o1 = Vec::with_capacity(zr.len() * yr.len() * xr.len());
            let mut o2 = Vec::with_capacity(o1.capacity());
            for z in zr.clone() {
                for y in yr.clone() {
                    for x in xr.clone() {
                        let i1 = ((ci * t0 + z) * t1 + y) * t2 + x;
                        let i2 = ((ci * t0 + z) * t1 + y) * t2 + (x - probe.split_offset);
                        o1.push(p1.data()[i1]);
                        o2.push(p2.data()[i2]);
                    }
                }
            }
            for (&a, &b) in o1.iter().zip(&o2) {
                max_dist = max_dist.max((a - b).abs());
            }
            per_channel[ci].push(1.0 - binary_dice(&o1, &o2, probe.threshold));
        }
    }

    Ok(MismatchReport {
        max_dist,
        per_channel_mismatch: per_channel.iter().map(|v| median(v)).collect(),
        tiles_compared: positions.len(),
        seamless: max_dist == 0.0,
    })
}

/// Overlap probe with a model in EVAL mode.
pub fn tile_mismatch(
    model: &Model,
    volume: &Tensor,
    spec: &NormalizeSpec,
    probe: &MismatchProbe,
) -> Result<MismatchReport> {
    tile_mismatch_with(
        |t| model.predict(t, Mode::Eval),
        volume,
        spec,
        probe,
        model.config.out_channels,
    )
}

// ---------------------------------------------------------------------------
// Train/eval disparity
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisparityReport {
    /// 1 - Dice(P_train, P_eval) per volume, all channels pooled.
    pub per_volume: Vec<f64>,
    pub median: f64,
}

/// Predicts every volume twice by sliding window, forcing train-mode
/// normalization statistics once (without committing stat updates) and
/// eval-mode statistics once, then reports 1 - Dice of the thresholded
/// masks.
pub fn train_eval_disparity(
    model: &Model,
    volumes: &[Tensor],
    spec: &NormalizeSpec,
    tile_size: [usize; 3],
    halo: [usize; 3],
) -> Result<DisparityReport> {
    if volumes.is_empty() {
        return Err(Error::Data("no volumes for disparity probe".into()));
    }
    let mut per_volume = Vec::with_capacity(volumes.len());
    for vol in volumes {
        let p_train =
            crate::infer::predict_sliding(model, vol, spec, tile_size, halo, Mode::Train)?;
        let p_eval = crate::infer::predict_sliding(model, vol, spec, tile_size, halo, Mode::Eval)?;
        let dice = binary_dice(p_train.data(), p_eval.data(), 0.5);
        per_volume.push(1.0 - dice);
    }
    let med = median(&per_volume);
    Ok(DisparityReport {
        per_volume,
        median: med,
    })
}

// ---------------------------------------------------------------------------
// Dice evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    /// Median Dice per class across volumes.
    pub per_class_median: Vec<f64>,
    /// Per volume, per class.
    pub per_volume: Vec<Vec<f64>>,
}

/// Sliding-window prediction of each volume, thresholded per channel at 0.5
/// and scored against one-hot labels.
pub fn dice_eval(
    model: &Model,
    data: &[Volume],
    spec: &NormalizeSpec,
    tile_size: [usize; 3],
    halo: [usize; 3],
    mode: Mode,
) -> Result<DiceReport> {
    if data.is_empty() {
        return Err(Error::Data("no volumes for dice evaluation".into()));
    }
    let classes = model.config.out_channels;
    let mut per_volume = Vec::with_capacity(data.len());
    for v in data {
        let [lc, ..] = v.labels.dims4()?;
        if lc != classes {
            return Err(Error::Shape(format!(
                "label channels {lc} != model out_channels {classes}"
            )));
        }
        let pred =
            crate::infer::predict_sliding(model, &v.image, spec, tile_size, halo, mode)?;
        let sp = pred.len() / classes;
        let mut scores = Vec::with_capacity(classes);
        for ci in 0..classes {
            scores.push(binary_dice(
                &pred.data()[ci * sp..(ci + 1) * sp],
                &v.labels.data()[ci * sp..(ci + 1) * sp],
                0.5,
            ));
        }
        per_volume.push(scores);
    }
    let per_class_median = (0..classes)
        .map(|ci| median(&per_volume.iter().map(|v| v[ci]).collect::<Vec<_>>()))
        .collect();
    Ok(DiceReport {
        per_class_median,
        per_volume,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::NormKind;
    use crate::unet::Model;

    #[test]
    fn conv_stack_margins_compose() {
        // A single same-padding 3^3 conv has radius 1; two stacked, radius 2.
        assert_eq!(widen_blocks((0, 0), 1, 3), (-1, 1));
        assert_eq!(widen_blocks((0, 0), 2, 3), (-2, 2));
        assert_eq!(widen_blocks((0, 0), 1, 5), (-2, 2));
    }

    #[test]
    fn default_unet_margins_are_order_25_and_match_probe() {
        // 2 levels, 2 blocks, k3, center on the coarse grid.
        let (before, after) = trf_margins_at(2, 2, 3, 1024);
        assert_eq!((before, after), (22, 21));

        let tile = 64usize;
        let center = [32usize; 3];
        let (margins, filled) = trf_support_probe(2, 2, 3, tile, center).unwrap();
        assert!(filled);
        let (b, a) = trf_margins_at(2, 2, 3, 32);
        for axis in 0..3 {
            assert_eq!(margins[axis], (b as usize, a as usize), "axis {axis}");
        }
    }

    #[test]
    fn interval_propagation_matches_gradient_support_on_varied_configs() {
        for (levels, blocks, k, tile) in [(1usize, 1usize, 3usize, 32usize), (1, 2, 5, 48), (2, 1, 3, 64)] {
            let center = [tile / 2; 3];
            let (margins, filled) = trf_support_probe(levels, blocks, k, tile, center).unwrap();
            assert!(filled, "levels {levels} blocks {blocks} k {k}");
            let (b, a) = trf_margins_at(levels, blocks, k, (tile / 2) as i64);
            for axis in 0..3 {
                assert_eq!(
                    margins[axis],
                    (b as usize, a as usize),
                    "levels {levels} blocks {blocks} k {k} axis {axis}"
                );
            }
        }
    }

    #[test]
    fn instance_stat_configs_report_full_tile() {
        let cfg = ModelConfig::new(NormKind::InstanceNorm);
        assert_eq!(compute_trf(&cfg, Mode::Eval).unwrap(), TrfResult::FullTile);
        assert_eq!(compute_trf(&cfg, Mode::Train).unwrap(), TrfResult::FullTile);
        let cfg = ModelConfig::new(NormKind::BatchNorm);
        assert!(matches!(
            compute_trf(&cfg, Mode::Eval).unwrap(),
            TrfResult::Box { .. }
        ));
        // Batch statistics couple the tile in train mode.
        assert_eq!(compute_trf(&cfg, Mode::Train).unwrap(), TrfResult::FullTile);
        let cfg = ModelConfig::new(NormKind::InstanceNormTracked);
        assert!(matches!(
            compute_trf(&cfg, Mode::Eval).unwrap(),
            TrfResult::Box { .. }
        ));
    }

    #[test]
    fn unit_gradient_through_single_ones_conv_is_the_kernel_box() {
        // The ERF/TRF probe primitive: backpropagating a center seed through
        // one all-ones same-padding 3^3 conv yields 1 on the 3^3 box around
        // the center and 0 elsewhere.
        let ones = Tensor::full(&[1, 1, 3, 3, 3], 1.0);
        let mut seed = Tensor::zeros(&[1, 7, 7, 7]);
        seed.data_mut()[(3 * 7 + 3) * 7 + 3] = 1.0;
        let grad = conv3d_backward_input(&ones, &seed, &[1, 7, 7, 7], 1, 1).unwrap();
        for z in 0..7 {
            for y in 0..7 {
                for x in 0..7 {
                    let inside = (2..=4).contains(&z) && (2..=4).contains(&y) && (2..=4).contains(&x);
                    let v = grad.data()[(z * 7 + y) * 7 + x];
                    assert_eq!(v, if inside { 1.0 } else { 0.0 }, "({z},{y},{x})");
                }
            }
        }
    }

    #[test]
    fn erf_support_stays_inside_trf_box() {
        let mut cfg = ModelConfig::new(NormKind::BatchNorm).with_features(vec![2, 3]);
        cfg.seed = 3;
        let model = Model::build(&cfg).unwrap();
        let tile = 32usize;
        let mut rng = SplitMix64::new(5);
        let erf = compute_erf(&model, tile, 2, &mut rng).unwrap();
        let trf = compute_trf(&cfg, Mode::Eval).unwrap();
        let (b, a) = trf_margins_at(cfg.levels, cfg.blocks_per_level, cfg.conv_kernel, (tile / 2) as i64);
        let _ = trf;
        let c = tile / 2;
        for z in 0..tile {
            for y in 0..tile {
                for x in 0..tile {
                    let v = erf.data()[(z * tile + y) * tile + x];
                    if v > -12.0 {
                        // voxel carries gradient; must be inside the box
                        for (axis, pos) in [z, y, x].into_iter().enumerate() {
                            assert!(
                                (pos as i64) >= c as i64 - b && (pos as i64) <= c as i64 + a,
                                "gradient outside TRF at axis {axis} pos {pos}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn erf_is_deterministic_under_seed() {
        let mut cfg = ModelConfig::new(NormKind::Identity).with_features(vec![2, 3]);
        cfg.seed = 4;
        let model = Model::build(&cfg).unwrap();
        let a = compute_erf(&model, 16, 2, &mut SplitMix64::new(9)).unwrap();
        let b = compute_erf(&model, 16, 2, &mut SplitMix64::new(9)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn binary_dice_examples() {
        // |A ∩ B| = 2, |A| = 3, |B| = 4 -> 4/7.
        let a = [1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let b = [1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        assert!((binary_dice(&a, &b, 0.5) - 4.0 / 7.0).abs() < 1e-12);
        assert_eq!(binary_dice(&a, &a, 0.5), 1.0);
        let z = [0.0; 4];
        assert_eq!(binary_dice(&z, &z, 0.5), 1.0);
        let d1 = [1.0, 0.0];
        let d2 = [0.0, 1.0];
        assert_eq!(binary_dice(&d1, &d2, 0.5), 0.0);
    }

    #[test]
    fn median_conventions() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn constant_stub_is_seamless() {
        let vol = Tensor::full(&[1, 32, 32, 48], 0.25);
        let probe = MismatchProbe {
            tile: [32, 32, 32],
            split_offset: 16,
            grid_stride: 16,
            halo: 4,
            threshold: 0.5,
        };
        let rep = tile_mismatch_with(
            |t| {
                let [n, _, a, b, c] = t.dims5().unwrap();
                Ok(Tensor::full(&[n, 2, a, b, c], 0.7))
            },
            &vol,
            &NormalizeSpec::global(),
            &probe,
            2,
        )
        .unwrap();
        assert_eq!(rep.max_dist, 0.0);
        assert!(rep.seamless);
        assert!(rep.per_channel_mismatch.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn global_norm_model_mismatch_is_exactly_zero_with_trf_halo() {
        // 1-level micro model: margins (8,9) -> halo 10 suffices.
        let mut cfg = ModelConfig::new(NormKind::BatchNorm).with_features(vec![2, 3]);
        cfg.seed = 6;
        let model = Model::build(&cfg).unwrap();
        let mut rng = SplitMix64::new(7);
        let vol = Tensor::uniform(&[1, 32, 32, 64], &mut rng);
        let probe = MismatchProbe {
            tile: [32, 32, 32],
            split_offset: 8,
            grid_stride: 8,
            halo: 10,
            threshold: 0.5,
        };
        let rep = tile_mismatch(&model, &vol, &NormalizeSpec::global(), &probe).unwrap();
        assert_eq!(rep.max_dist, 0.0, "report: {rep:?}");
        assert!(rep.seamless);
    }

    #[test]
    fn instance_norm_model_mismatch_is_positive_on_heterogeneous_volume() {
        let mut cfg = ModelConfig::new(NormKind::InstanceNorm).with_features(vec![2, 3]);
        cfg.seed = 8;
        let model = Model::build(&cfg).unwrap();
        let mut rng = SplitMix64::new(9);
        let mut vol = Tensor::uniform(&[1, 32, 32, 64], &mut rng);
        for i in 32 * 32 * 32..vol.len() {
            vol.data_mut()[i] *= 0.02;
        }
        let probe = MismatchProbe {
            tile: [32, 32, 32],
            split_offset: 8,
            grid_stride: 8,
            halo: 10,
            threshold: 0.5,
        };
        let rep = tile_mismatch(&model, &vol, &NormalizeSpec::global(), &probe).unwrap();
        assert!(rep.max_dist > 0.0);
        assert!(!rep.seamless);
    }

    #[test]
    fn larger_valid_overlap_restriction_never_increases_max_dist() {
        let mut cfg = ModelConfig::new(NormKind::InstanceNorm).with_features(vec![2, 3]);
        cfg.seed = 10;
        let model = Model::build(&cfg).unwrap();
        let mut rng = SplitMix64::new(11);
        let vol = Tensor::uniform(&[1, 32, 32, 64], &mut rng);
        let mut probe = MismatchProbe {
            tile: [32, 32, 32],
            split_offset: 8,
            grid_stride: 16,
            halo: 2,
            threshold: 0.5,
        };
        let loose = tile_mismatch(&model, &vol, &NormalizeSpec::global(), &probe).unwrap();
        probe.halo = 5;
        let tight = tile_mismatch(&model, &vol, &NormalizeSpec::global(), &probe).unwrap();
        assert!(tight.max_dist <= loose.max_dist);
    }

    #[test]
    fn overlap_smaller_than_halo_band_is_rejected() {
        let probe = MismatchProbe {
            tile: [32, 32, 32],
            split_offset: 24,
            grid_stride: 8,
            halo: 4,
            threshold: 0.5,
        };
        assert!(probe.validate().is_err());
    }

    #[test]
    fn mode_independent_models_have_exactly_zero_disparity() {
        for kind in [NormKind::InstanceNorm, NormKind::Identity] {
            let mut cfg = ModelConfig::new(kind).with_features(vec![2, 3]);
            cfg.seed = 12;
            let model = Model::build(&cfg).unwrap();
            let mut rng = SplitMix64::new(13);
            let vol = Tensor::uniform(&[1, 16, 16, 32], &mut rng);
            let rep = train_eval_disparity(
                &model,
                &[vol],
                &NormalizeSpec::global(),
                [16, 16, 16],
                [2, 2, 2],
            )
            .unwrap();
            assert_eq!(rep.median, 0.0, "kind {kind:?}");
            assert!(rep.per_volume.iter().all(|&d| d == 0.0));
        }
    }
}
