//! Training loop: soft Dice loss with empty-channel skipping, Adam with
//! gradient accumulation, random tile sampling, flip augmentation, and the
//! two-stage BatchRenorm schedule (a BatchNorm-identical warmup followed by
//! a linear ramp of the clipping bounds to their targets).

use std::path::PathBuf;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::infer::{quantile_normalize, NormStrategy, NormalizeSpec};
use crate::layers::NormKind;
use crate::tensor::{SplitMix64, Tensor};
use crate::unet::{Mode, Model};

/// One dataset item: a [1,D,H,W] image with [C,D,H,W] one-hot labels.
#[derive(Debug, Clone)]
pub struct Volume {
    pub image: Tensor,
    pub labels: Tensor,
}

impl From<crate::synthdata::SynthVolume> for Volume {
    fn from(v: crate::synthdata::SynthVolume) -> Self {
        Volume {
            image: v.image,
            labels: v.labels,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    /// Micro-steps (forward/backward passes); parameters update every
    /// `accum_steps` of them.
    pub steps: u64,
    pub accum_steps: u64,
    pub batch_size: usize,
    pub tile_size: [usize; 3],
    /// Per-axis flip probability.
    pub flip_prob: f64,
    pub input_norm: NormalizeSpec,
    /// BatchRenorm schedule: steps before the ramp starts (r=1, d=0, exact
    /// BatchNorm behavior), then a linear ramp to (r_max, d_max).
    pub renorm_warmup_steps: u64,
    pub renorm_ramp_steps: u64,
    pub renorm_r_max: f64,
    pub renorm_d_max: f64,
    pub seed: u64,
    /// Write a checkpoint every N micro-steps when set.
    pub checkpoint_every: Option<u64>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            steps: 300,
            accum_steps: 8,
            batch_size: 1,
            tile_size: [32, 32, 32],
            flip_prob: 0.5,
            input_norm: NormalizeSpec::global(),
            renorm_warmup_steps: 100,
            renorm_ramp_steps: 1000,
            renorm_r_max: 3.0,
            renorm_d_max: 5.0,
            seed: 0,
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 {
            return Err(Error::Config("negative learning rate".into()));
        }
        if self.steps == 0 || self.accum_steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps/accum_steps/batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("flip_prob outside [0,1]".into()));
        }
        if self.renorm_r_max < 1.0 || self.renorm_d_max < 0.0 {
            return Err(Error::Config("renorm targets need r_max >= 1, d_max >= 0".into()));
        }
        self.input_norm.validate()
    }
}

// ---------------------------------------------------------------------------
// Dice loss
// ---------------------------------------------------------------------------

const DICE_EPS: f64 = 1e-5;

/// Per-channel soft Dice loss 1 - (2*sum(p*g)+eps)/(sum(p)+sum(g)+eps),
/// averaged over the channels whose target is non-empty, then over samples.
/// Empty channels contribute neither loss nor gradient; an all-empty sample
/// contributes loss 0.
pub fn dice_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "dice: pred {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let [n, c, d, h, w] = pred.dims5()?;
    let sp = d * h * w;
    if !target.data().iter().all(|&g| g == 0.0 || g == 1.0) {
        return Err(Error::Data("dice target must be binary".into()));
    }

    let mut grad = Tensor::zeros(pred.shape());
    let mut total = 0.0;
    for ni in 0..n {
        // First pass: per-channel sums and the number of non-empty channels.
        let mut sums = Vec::with_capacity(c);
        let mut kept = 0usize;
        for ci in 0..c {
            let base = (ni * c + ci) * sp;
            let p = &pred.data()[base..base + sp];
            let g = &target.data()[base..base + sp];
            let sum_p: f64 = p.iter().sum();
            let sum_g: f64 = g.iter().sum();
            let inter: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
            if sum_g > 0.0 {
                kept += 1;
            }
            sums.push((sum_p, sum_g, inter));
        }
        if kept == 0 {
            continue;
        }
        let mut sample_loss = 0.0;
        for ci in 0..c {
            let (sum_p, sum_g, inter) = sums[ci];
            if sum_g == 0.0 {
                continue;
            }
            let denom = sum_p + sum_g + DICE_EPS;
            let num = 2.0 * inter + DICE_EPS;
            sample_loss += 1.0 - num / denom;
            // d/dp_i [1 - num/denom] = -(2*g_i*denom - num) / denom^2,
            // scaled by the channel and sample averaging.
            let scale = 1.0 / (kept as f64 * n as f64);
            let base = (ni * c + ci) * sp;
            let g = &target.data()[base..base + sp];
            let gd = &mut grad.data_mut()[base..base + sp];
            for (dst, &gi) in gd.iter_mut().zip(g) {
                *dst = -scale * (2.0 * gi * denom - num) / (denom * denom);
            }
        }
        total += sample_loss / kept as f64;
    }
    Ok((total / n as f64, grad))
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(param_count: usize) -> Self {
        AdamState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Standard Adam update with bias correction.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: params {} / grads {} / state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let b1 = state.beta1;
    let b2 = state.beta2;
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Sampling and augmentation
// ---------------------------------------------------------------------------

/// Uniform random tile with its offset. Offsets are deterministic under the
/// rng state (three draws, one per axis).
pub fn sample_tile(
    volume: &Volume,
    tile_size: [usize; 3],
    rng: &mut SplitMix64,
) -> Result<(Tensor, Tensor, [usize; 3])> {
    let [ci, d, h, w] = volume.image.dims4()?;
    let [cl, ld, lh, lw] = volume.labels.dims4()?;
    if (ld, lh, lw) != (d, h, w) {
        return Err(Error::Shape("image/label spatial mismatch".into()));
    }
    let [td, th, tw] = tile_size;
    if td > d || th > h || tw > w {
        return Err(Error::Geometry(format!(
            "tile {tile_size:?} larger than volume [{d},{h},{w}]"
        )));
    }
    let off = [
        rng.index(d - td + 1),
        rng.index(h - th + 1),
        rng.index(w - tw + 1),
    ];
    let slice4 = |t: &Tensor, c: usize| -> Tensor {
        let mut out = Tensor::zeros(&[c, td, th, tw]);
        for cc in 0..c {
            for z in 0..td {
                for y in 0..th {
                    let src = ((cc * d + off[0] + z) * h + off[1] + y) * w + off[2];
                    let dst = ((cc * td + z) * th + y) * tw;
                    out.data_mut()[dst..dst + tw]
                        .copy_from_slice(&t.data()[src..src + tw]);
                }
            }
        }
        out
    };
    Ok((slice4(&volume.image, ci), slice4(&volume.labels, cl), off))
}

/// Flips each spatial axis independently with probability `flip_prob`;
/// image and labels flip identically. Always consumes three draws.
pub fn flip_augment(
    image: &Tensor,
    labels: &Tensor,
    flip_prob: f64,
    rng: &mut SplitMix64,
) -> (Tensor, Tensor) {
    let flips = [
        rng.uniform() < flip_prob,
        rng.uniform() < flip_prob,
        rng.uniform() < flip_prob,
    ];
    (flip_tensor(image, flips), flip_tensor(labels, flips))
}

fn flip_tensor(t: &Tensor, flips: [bool; 3]) -> Tensor {
    if !flips.iter().any(|&f| f) {
        return t.clone();
    }
    let [c, d, h, w] = t.dims4().expect("flip: rank 4");
    let mut out = Tensor::zeros(t.shape());
    let src = t.data();
    let dst = out.data_mut();
    for ci in 0..c {
        for z in 0..d {
            let sz = if flips[0] { d - 1 - z } else { z };
            for y in 0..h {
                let sy = if flips[1] { h - 1 - y } else { y };
                for x in 0..w {
                    let sx = if flips[2] { w - 1 - x } else { x };
                    dst[((ci * d + z) * h + y) * w + x] = src[((ci * d + sz) * h + sy) * w + sx];
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub r_max_eff: f64,
    pub d_max_eff: f64,
    /// Observed renorm correction extremes across layers this step.
    pub r_obs_min: f64,
    pub r_obs_max: f64,
    pub d_obs_max: f64,
    pub running_mu_mean_abs: f64,
    pub running_var_mean: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingLog {
    pub records: Vec<StepRecord>,
}

impl TrainingLog {
    pub fn initial_loss(&self) -> f64 {
        self.records.first().map(|r| r.loss).unwrap_or(f64::NAN)
    }

    /// Mean loss over the trailing `window` records.
    pub fn final_smoothed_loss(&self, window: usize) -> f64 {
        let n = self.records.len();
        if n == 0 {
            return f64::NAN;
        }
        let w = window.min(n).max(1);
        self.records[n - w..].iter().map(|r| r.loss).sum::<f64>() / w as f64
    }

    /// Mean loss over the leading `window` records.
    pub fn initial_smoothed_loss(&self, window: usize) -> f64 {
        let n = self.records.len();
        if n == 0 {
            return f64::NAN;
        }
        let w = window.min(n).max(1);
        self.records[..w].iter().map(|r| r.loss).sum::<f64>() / w as f64
    }
}

/// Effective BatchRenorm bounds for a given micro-step: (1, 0) during the
/// warmup, then a linear ramp reaching the targets after `ramp` steps.
pub fn renorm_schedule(step: u64, warmup: u64, ramp: u64, r_max: f64, d_max: f64) -> (f64, f64) {
    if step < warmup {
        return (1.0, 0.0);
    }
    let t = if ramp == 0 {
        1.0
    } else {
        (((step - warmup) + 1) as f64 / ramp as f64).min(1.0)
    };
    (1.0 + t * (r_max - 1.0), t * d_max)
}

/// Trains the model in place. A pure function of (model, dataset, config):
/// identical inputs give bit-identical parameters and log losses.
pub fn train(model: &mut Model, dataset: &[Volume], config: &TrainConfig) -> Result<TrainingLog> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let div = model.config.spatial_divisor();
    for &t in &config.tile_size {
        if t % div != 0 {
            return Err(Error::Config(format!(
                "tile size {t} not divisible by the model's downsampling factor {div}"
            )));
        }
    }

    // Global input normalization happens once, up front.
    let prepared: Vec<Volume> = match config.input_norm.strategy {
        NormStrategy::Global => dataset
            .iter()
            .map(|v| {
                Ok(Volume {
                    image: quantile_normalize(&v.image, &config.input_norm)?,
                    labels: v.labels.clone(),
                })
            })
            .collect::<Result<_>>()?,
        NormStrategy::TileWise => dataset.to_vec(),
    };

    let mut rng = SplitMix64::with_stream(config.seed, 0x7E41);
    let mut adam = AdamState::new(model.param_count());
    let mut acc = vec![0.0f64; model.param_count()];
    let mut acc_count = 0u64;
    let mut log = TrainingLog::default();
    let is_renorm = model.config.norm_kind == NormKind::BatchRenorm;

    for step in 0..config.steps {
        let t0 = Instant::now();

        let (r_eff, d_eff) = renorm_schedule(
            step,
            config.renorm_warmup_steps,
            config.renorm_ramp_steps,
            config.renorm_r_max,
            config.renorm_d_max,
        );
        if is_renorm {
            model.set_renorm_bounds(r_eff, d_eff)?;
        }

        // Assemble a batch of augmented tiles.
        let mut images = Vec::with_capacity(config.batch_size);
        let mut labels = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let vol = &prepared[rng.index(prepared.len())];
            let (img, lab, _) = sample_tile(vol, config.tile_size, &mut rng)?;
            let (mut img, lab) = flip_augment(&img, &lab, config.flip_prob, &mut rng);
            if config.input_norm.strategy == NormStrategy::TileWise {
                img = quantile_normalize(&img, &config.input_norm)?;
            }
            images.push(img);
            labels.push(lab);
        }
        let batch_x = stack_batch(&images);
        let batch_g = stack_batch(&labels);

        let out = model.forward(&batch_x, Mode::Train)?;
        model.commit_stats(&out.pending);
        let (loss, loss_grad) = dice_loss(&out.y, &batch_g)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let (grads, _) = model.backward(&out.tape, &loss_grad)?;
        for (a, g) in acc.iter_mut().zip(&grads) {
            *a += g;
        }
        acc_count += 1;

        if acc_count == config.accum_steps || step + 1 == config.steps {
            let inv = 1.0 / acc_count as f64;
            for a in acc.iter_mut() {
                *a *= inv;
            }
            let mut params = model.params_flat();
            adam_step(&mut params, &acc, &mut adam, config.lr)?;
            model.set_params_flat(&params)?;
            acc.iter_mut().for_each(|a| *a = 0.0);
            acc_count = 0;
        }

        model.step_count += 1;
        let (mu_abs, var_mean) = model.running_stats_summary();
        log.records.push(StepRecord {
            step,
            loss,
            r_max_eff: if is_renorm { r_eff } else { 1.0 },
            d_max_eff: if is_renorm { d_eff } else { 0.0 },
            r_obs_min: out.tape.r_observed.0,
            r_obs_max: out.tape.r_observed.1,
            d_obs_max: out.tape.d_abs_observed,
            running_mu_mean_abs: mu_abs,
            running_var_mean: var_mean,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });

        if let (Some(every), Some(dir)) = (config.checkpoint_every, &config.checkpoint_dir) {
            if every > 0 && (step + 1) % every == 0 {
                let path = dir.join(format!("step_{:06}", step + 1));
                crate::io::save_checkpoint(model, &path)?;
            }
        }
    }

    Ok(log)
}

fn stack_batch(tiles: &[Tensor]) -> Tensor {
    let shape4 = tiles[0].shape();
    let mut shape5 = vec![tiles.len()];
    shape5.extend_from_slice(shape4);
    let mut data = Vec::with_capacity(tiles.len() * tiles[0].len());
    for t in tiles {
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(&shape5, data).expect("finite batch")
}
