//! 3D U-Net assembled from a declarative config: encoder levels of
//! conv+norm+ReLU blocks separated by 2x2x2 max-pools, a bottleneck, and a
//! decoder of stride-2 transposed-conv upsamples with channel-concatenation
//! skips, closed by a 1x1x1 conv and (by default) a per-channel sigmoid.
//!
//! Stride-1 same-padding convolutions and matched down/up factors keep the
//! output spatial shape equal to the input shape; input extents must be
//! divisible by 2^levels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    concat_channels, concat_channels_backward, max_pool_batch, max_pool_batch_backward,
    norm_backward, norm_forward, relu_backward, relu_forward, sigmoid_backward, sigmoid_forward,
    Conv3dLayer, NormCache, NormKind, NormState, PoolCache, ReluCache, SigmoidCache,
    StatUpdate, UpconvLayer,
};
use crate::tensor::{SplitMix64, Tensor};

pub use crate::layers::Mode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Linear,
}

/// Declarative U-Net description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// One entry per encoder level plus the bottleneck, strictly increasing.
    pub features_per_level: Vec<usize>,
    /// Number of downsampling steps.
    pub levels: usize,
    pub blocks_per_level: usize,
    pub norm_kind: NormKind,
    /// Odd; convolutions pad to keep shape.
    pub conv_kernel: usize,
    pub final_activation: Activation,
    pub norm_momentum: f64,
    pub norm_eps: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Defaults: 2 downsampling steps, 2 blocks per level, 32/64/128 feature
    /// maps, 3x3x3 kernels, momentum 0.01, per-channel sigmoid.
    pub fn new(norm_kind: NormKind) -> Self {
        ModelConfig {
            in_channels: 1,
            out_channels: 3,
            features_per_level: vec![32, 64, 128],
            levels: 2,
            blocks_per_level: 2,
            norm_kind,
            conv_kernel: 3,
            final_activation: Activation::Sigmoid,
            norm_momentum: 0.01,
            norm_eps: 1e-5,
            seed: 0,
        }
    }

    pub fn with_features(mut self, features: Vec<usize>) -> Self {
        self.levels = features.len().saturating_sub(1);
        self.features_per_level = features;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::Config("levels must be >= 1".into()));
        }
        if self.features_per_level.len() != self.levels + 1 {
            return Err(Error::Config(format!(
                "features_per_level needs {} entries for {} levels, got {}",
                self.levels + 1,
                self.levels,
                self.features_per_level.len()
            )));
        }
        if !self.features_per_level.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(
                "features_per_level must be strictly increasing".into(),
            ));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config("conv_kernel must be odd".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.blocks_per_level == 0 {
            return Err(Error::Config("channel/block counts must be positive".into()));
        }
        if !(self.norm_momentum > 0.0 && self.norm_momentum <= 1.0) {
            return Err(Error::Config("norm_momentum outside (0,1]".into()));
        }
        if self.norm_eps <= 0.0 {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Input extents must be divisible by this.
    pub fn spatial_divisor(&self) -> usize {
        1 << self.levels
    }
}

#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv3dLayer,
    /// None exactly when the norm kind is Identity.
    pub norm: Option<NormState>,
}

/// Instantiated U-Net: ordered layer graph plus per-norm-layer state.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub enc: Vec<Vec<ConvBlock>>,
    pub bottleneck: Vec<ConvBlock>,
    /// ups[l] upsamples features_per_level[l+1] -> features_per_level[l].
    pub ups: Vec<UpconvLayer>,
    pub dec: Vec<Vec<ConvBlock>>,
    pub final_conv: Conv3dLayer,
    /// Completed training micro-steps.
    pub step_count: u64,
}

fn he_conv(
    rng: &mut SplitMix64,
    c_out: usize,
    c_in: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Conv3dLayer {
    let fan_in = (c_in * k * k * k) as f64;
    let std = (2.0 / fan_in).sqrt();
    let n = c_out * c_in * k * k * k;
    let data: Vec<f64> = (0..n).map(|_| rng.normal() * std).collect();
    Conv3dLayer {
        weight: Tensor::from_vec(&[c_out, c_in, k, k, k], data).expect("finite init"),
        bias: vec![0.0; c_out],
        stride,
        padding,
    }
}

fn he_upconv(rng: &mut SplitMix64, c_in: usize, c_out: usize) -> UpconvLayer {
    // Each output voxel of the stride-2 kernel-2 transpose sums exactly
    // c_in terms, so fan_in = c_in.
    let std = (2.0 / c_in as f64).sqrt();
    let n = c_in * c_out * 8;
    let data: Vec<f64> = (0..n).map(|_| rng.normal() * std).collect();
    UpconvLayer {
        weight: Tensor::from_vec(&[c_in, c_out, 2, 2, 2], data).expect("finite init"),
        bias: vec![0.0; c_out],
    }
}

fn push_block_params<'a>(out: &mut Vec<&'a [f64]>, b: &'a ConvBlock) {
    out.push(b.conv.weight.data());
    out.push(&b.conv.bias);
    if let Some(st) = &b.norm {
        out.push(&st.gamma);
        out.push(&st.beta);
    }
}

impl Model {
    /// Builds and He-initializes a model from its config. Two builds from
    /// the same config are bit-identical.
    pub fn build(config: &ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut rng = SplitMix64::with_stream(config.seed, 0x1417);
        let k = config.conv_kernel;
        let pad = (k - 1) / 2;
        let f = &config.features_per_level;
        let norm = |c: usize| -> Result<Option<NormState>> {
            if config.norm_kind == NormKind::Identity {
                Ok(None)
            } else {
                Ok(Some(NormState::new(
                    c,
                    config.norm_momentum,
                    config.norm_eps,
                )?))
            }
        };

        let mut enc = Vec::with_capacity(config.levels);
        let mut c_in = config.in_channels;
        for l in 0..config.levels {
            let mut blocks = Vec::with_capacity(config.blocks_per_level);
            for _ in 0..config.blocks_per_level {
                blocks.push(ConvBlock {
                    conv: he_conv(&mut rng, f[l], c_in, k, 1, pad),
                    norm: norm(f[l])?,
                });
                c_in = f[l];
            }
            enc.push(blocks);
        }

        let mut bottleneck = Vec::with_capacity(config.blocks_per_level);
        for _ in 0..config.blocks_per_level {
            bottleneck.push(ConvBlock {
                conv: he_conv(&mut rng, f[config.levels], c_in, k, 1, pad),
                norm: norm(f[config.levels])?,
            });
            c_in = f[config.levels];
        }

        // Decoder built in application order (deepest level first).
        let mut ups: Vec<Option<UpconvLayer>> = (0..config.levels).map(|_| None).collect();
        let mut dec: Vec<Option<Vec<ConvBlock>>> = (0..config.levels).map(|_| None).collect();
        for l in (0..config.levels).rev() {
            ups[l] = Some(he_upconv(&mut rng, c_in, f[l]));
            let mut blocks = Vec::with_capacity(config.blocks_per_level);
            let mut bc_in = 2 * f[l]; // concat [up | skip]
            for _ in 0..config.blocks_per_level {
                blocks.push(ConvBlock {
                    conv: he_conv(&mut rng, f[l], bc_in, k, 1, pad),
                    norm: norm(f[l])?,
                });
                bc_in = f[l];
            }
            dec[l] = Some(blocks);
            c_in = f[l];
        }

        let final_conv = he_conv(&mut rng, config.out_channels, c_in, 1, 1, 0);

        Ok(Model {
            config: config.clone(),
            enc,
            bottleneck,
            ups: ups.into_iter().map(Option::unwrap).collect(),
            dec: dec.into_iter().map(Option::unwrap).collect(),
            final_conv,
            step_count: 0,
        })
    }

    /// Norm states in forward-traversal order (encoder levels ascending,
    /// bottleneck, decoder levels descending).
    pub fn norm_states(&self) -> Vec<&NormState> {
        let mut out: Vec<&NormState> = Vec::new();
        for blocks in &self.enc {
            for b in blocks {
                if let Some(s) = b.norm.as_ref() {
                    out.push(s);
                }
            }
        }
        for b in &self.bottleneck {
            if let Some(s) = b.norm.as_ref() {
                out.push(s);
            }
        }
        for l in (0..self.config.levels).rev() {
            for b in &self.dec[l] {
                if let Some(s) = b.norm.as_ref() {
                    out.push(s);
                }
            }
        }
        out
    }

    pub fn norm_states_mut(&mut self) -> Vec<&mut NormState> {
        let mut out: Vec<&mut NormState> = Vec::new();
        for blocks in self.enc.iter_mut() {
            out.extend(blocks.iter_mut().filter_map(|b| b.norm.as_mut()));
        }
        out.extend(self.bottleneck.iter_mut().filter_map(|b| b.norm.as_mut()));
        let mut dec_levels: Vec<Vec<&mut NormState>> = self
            .dec
            .iter_mut()
            .map(|blocks| blocks.iter_mut().filter_map(|b| b.norm.as_mut()).collect())
            .collect();
        while let Some(level) = dec_levels.pop() {
            out.extend(level);
        }
        out
    }

    /// Sets the effective BatchRenorm bounds on every norm layer.
    pub fn set_renorm_bounds(&mut self, r_max: f64, d_max: f64) -> Result<()> {
        for st in self.norm_states_mut() {
            st.set_renorm_bounds(r_max, d_max)?;
        }
        Ok(())
    }

    pub fn commit_stats(&mut self, pending: &[Option<StatUpdate>]) {
        let states = self.norm_states_mut();
        debug_assert_eq!(states.len(), pending.len());
        for (st, p) in states.into_iter().zip(pending) {
            if let Some(u) = p {
                st.apply_update(u);
            }
        }
    }

    /// Mean absolute running mean and mean running variance across all norm
    /// layers, for training-log snapshots.
    pub fn running_stats_summary(&self) -> (f64, f64) {
        let mut mu_acc = 0.0;
        let mut var_acc = 0.0;
        let mut count = 0usize;
        for st in self.norm_states() {
            for &m in &st.running_mu {
                mu_acc += m.abs();
            }
            for &v in &st.running_var {
                var_acc += v;
            }
            count += st.channels();
        }
        if count == 0 {
            (0.0, 0.0)
        } else {
            (mu_acc / count as f64, var_acc / count as f64)
        }
    }

    /// Trainable parameter slices in canonical order. The flat gradient
    /// vector from `backward` uses exactly this order.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for blocks in &self.enc {
            for b in blocks {
                push_block_params(&mut out, b);
            }
        }
        for b in &self.bottleneck {
            push_block_params(&mut out, b);
        }
        for l in (0..self.config.levels).rev() {
            out.push(self.ups[l].weight.data());
            out.push(&self.ups[l].bias);
            for b in &self.dec[l] {
                push_block_params(&mut out, b);
            }
        }
        out.push(self.final_conv.weight.data());
        out.push(&self.final_conv.bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for s in self.param_slices() {
            v.extend_from_slice(s);
        }
        v
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "flat parameter vector length {} != parameter count {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0usize;
        self.for_each_param_mut(|slice| {
            slice.copy_from_slice(&flat[offset..offset + slice.len()]);
            offset += slice.len();
        });
        Ok(())
    }

    fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        fn visit_block(b: &mut ConvBlock, f: &mut dyn FnMut(&mut [f64])) {
            f(b.conv.weight.data_mut());
            f(&mut b.conv.bias);
            if let Some(st) = b.norm.as_mut() {
                f(&mut st.gamma);
                f(&mut st.beta);
            }
        }
        for blocks in self.enc.iter_mut() {
            for b in blocks.iter_mut() {
                visit_block(b, &mut f);
            }
        }
        for b in self.bottleneck.iter_mut() {
            visit_block(b, &mut f);
        }
        for l in (0..self.config.levels).rev() {
            f(self.ups[l].weight.data_mut());
            f(&mut self.ups[l].bias);
            for b in self.dec[l].iter_mut() {
                visit_block(b, &mut f);
            }
        }
        f(self.final_conv.weight.data_mut());
        f(&mut self.final_conv.bias);
    }
}

struct BlockTape {
    x: Tensor,
    norm: Option<NormCache>,
    relu: ReluCache,
}

/// Cached activations from one forward pass, consumed by `backward`.
pub struct ModelTape {
    enc: Vec<Vec<BlockTape>>,
    pools: Vec<PoolCache>,
    bottleneck: Vec<BlockTape>,
    ups_in: Vec<Tensor>,
    dec: Vec<Vec<BlockTape>>,
    final_in: Tensor,
    sigmoid: Option<SigmoidCache>,
    /// r/d extremes observed across norm layers (for the training log).
    pub r_observed: (f64, f64),
    pub d_abs_observed: f64,
}

pub struct ForwardOut {
    pub y: Tensor,
    pub tape: ModelTape,
    /// Pending running-stat updates in norm-layer traversal order; commit
    /// with `Model::commit_stats` or drop to leave the model untouched.
    pub pending: Vec<Option<StatUpdate>>,
}

fn block_forward(
    block: &ConvBlock,
    kind: NormKind,
    mode: Mode,
    x: &Tensor,
) -> Result<(Tensor, BlockTape, Option<StatUpdate>)> {
    let c = block.conv.forward_batch(x)?;
    let (ny, ncache, pending) = match &block.norm {
        Some(st) => {
            let nf = norm_forward(&c, st, kind, mode)?;
            (nf.y, Some(nf.cache), nf.pending)
        }
        None => (c, None, None),
    };
    let (y, relu) = relu_forward(ny);
    Ok((
        y,
        BlockTape {
            x: x.clone(),
            norm: ncache,
            relu,
        },
        pending,
    ))
}

struct BlockGrad {
    dw: Tensor,
    db: Vec<f64>,
    dgamma: Vec<f64>,
    dbeta: Vec<f64>,
}

fn block_backward(block: &ConvBlock, tape: &BlockTape, dy: &Tensor) -> Result<(Tensor, BlockGrad)> {
    let d_relu = relu_backward(&tape.relu, dy);
    let (d_conv_out, dgamma, dbeta) = match &tape.norm {
        Some(cache) => {
            let g = norm_backward(cache, &d_relu)?;
            (g.d_input, g.d_gamma, g.d_beta)
        }
        None => (d_relu, vec![], vec![]),
    };
    let (dx, dw, db) = block.conv.backward_batch(&tape.x, &d_conv_out)?;
    Ok((
        dx,
        BlockGrad {
            dw,
            db,
            dgamma,
            dbeta,
        },
    ))
}

impl Model {
    /// Whole-tile forward pass. Never mutates the model; train-mode stat
    /// updates come back in `pending`.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<ForwardOut> {
        let [_, c, d, h, w] = x.dims5()?;
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "input channels {c} != model in_channels {}",
                self.config.in_channels
            )));
        }
        let div = self.config.spatial_divisor();
        if d % div != 0 || h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "spatial extents [{d},{h},{w}] not divisible by {div}"
            )));
        }
        let kind = self.config.norm_kind;
        let levels = self.config.levels;

        let mut pending = Vec::new();
        let mut r_lo = f64::INFINITY;
        let mut r_hi = f64::NEG_INFINITY;
        let mut d_abs = 0.0f64;
        let mut note_cache = |cache: &Option<NormCache>| {
            if let Some(c) = cache {
                r_lo = r_lo.min(c.r_min_observed());
                r_hi = r_hi.max(c.r_max_observed());
                d_abs = d_abs.max(c.d_abs_max_observed());
            }
        };

        let mut cur = x.clone();
        let mut enc_tapes = Vec::with_capacity(levels);
        let mut pools = Vec::with_capacity(levels);
        let mut skips = Vec::with_capacity(levels);

        for l in 0..levels {
            let mut tapes = Vec::with_capacity(self.config.blocks_per_level);
            for b in &self.enc[l] {
                let (y, tape, p) = block_forward(b, kind, mode, &cur)?;
                cur = y;
                note_cache(&tape.norm);
                tapes.push(tape);
                if b.norm.is_some() {
                    pending.push(p);
                }
            }
            skips.push(cur.clone());
            let (pooled, pc) = max_pool_batch(&cur)?;
            cur = pooled;
            pools.push(pc);
            enc_tapes.push(tapes);
        }

        let mut bott_tapes = Vec::with_capacity(self.config.blocks_per_level);
        for b in &self.bottleneck {
            let (y, tape, p) = block_forward(b, kind, mode, &cur)?;
            cur = y;
            note_cache(&tape.norm);
            bott_tapes.push(tape);
            if b.norm.is_some() {
                pending.push(p);
            }
        }

        let mut ups_in: Vec<Option<Tensor>> = (0..levels).map(|_| None).collect();
        let mut dec_tapes: Vec<Option<Vec<BlockTape>>> = (0..levels).map(|_| None).collect();
        for l in (0..levels).rev() {
            ups_in[l] = Some(cur.clone());
            let up = self.ups[l].forward_batch(&cur)?;
            cur = concat_channels(&up, &skips[l])?;
            let mut tapes = Vec::with_capacity(self.config.blocks_per_level);
            for b in &self.dec[l] {
                let (y, tape, p) = block_forward(b, kind, mode, &cur)?;
                cur = y;
                note_cache(&tape.norm);
                tapes.push(tape);
                if b.norm.is_some() {
                    pending.push(p);
                }
            }
            dec_tapes[l] = Some(tapes);
        }

        let final_in = cur.clone();
        let logits = self.final_conv.forward_batch(&cur)?;
        let (y, sigmoid) = match self.config.final_activation {
            Activation::Sigmoid => {
                let (y, c) = sigmoid_forward(&logits);
                (y, Some(c))
            }
            Activation::Linear => (logits, None),
        };

        Ok(ForwardOut {
            y,
            tape: ModelTape {
                enc: enc_tapes,
                pools,
                bottleneck: bott_tapes,
                ups_in: ups_in.into_iter().map(Option::unwrap).collect(),
                dec: dec_tapes.into_iter().map(Option::unwrap).collect(),
                final_in,
                sigmoid,
                r_observed: if r_lo.is_finite() { (r_lo, r_hi) } else { (1.0, 1.0) },
                d_abs_observed: d_abs,
            },
            pending,
        })
    }

    /// Forward without keeping the tape.
    pub fn predict(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.forward(x, mode)?.y)
    }

    /// Backpropagates `loss_grad` through the cached forward. Returns the
    /// flat parameter gradient (canonical order) and the input gradient.
    pub fn backward(&self, tape: &ModelTape, loss_grad: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let levels = self.config.levels;
        let f = &self.config.features_per_level;

        let mut g = loss_grad.clone();
        if let Some(sc) = &tape.sigmoid {
            g = sigmoid_backward(sc, &g);
        }
        let (d_final_in, dw_final, db_final) =
            self.final_conv.backward_batch(&tape.final_in, &g)?;
        g = d_final_in;

        let mut dec_grads: Vec<Vec<BlockGrad>> = Vec::with_capacity(levels);
        let mut up_grads: Vec<(Tensor, Vec<f64>)> = Vec::with_capacity(levels);
        let mut skip_grads: Vec<Option<Tensor>> = (0..levels).map(|_| None).collect();

        // Decoder levels in reverse application order (finest first).
        for l in 0..levels {
            let mut level_grads = Vec::with_capacity(self.config.blocks_per_level);
            for (b, t) in self.dec[l].iter().zip(&tape.dec[l]).rev() {
                let (dx, bg) = block_backward(b, t, &g)?;
                g = dx;
                level_grads.push(bg);
            }
            level_grads.reverse();
            dec_grads.push(level_grads);
            let (d_up_out, d_skip) = concat_channels_backward(&g, f[l])?;
            skip_grads[l] = Some(d_skip);
            let (d_up_in, dwu, dbu) = self.ups[l].backward_batch(&tape.ups_in[l], &d_up_out)?;
            g = d_up_in;
            up_grads.push((dwu, dbu));
        }

        let mut bott_grads = Vec::with_capacity(self.config.blocks_per_level);
        for (b, t) in self.bottleneck.iter().zip(&tape.bottleneck).rev() {
            let (dx, bg) = block_backward(b, t, &g)?;
            g = dx;
            bott_grads.push(bg);
        }
        bott_grads.reverse();

        let mut enc_grads: Vec<Option<Vec<BlockGrad>>> = (0..levels).map(|_| None).collect();
        for l in (0..levels).rev() {
            g = max_pool_batch_backward(&tape.pools[l], &g)?;
            g.add_assign(skip_grads[l].as_ref().expect("skip grad filled"));
            let mut level_grads = Vec::with_capacity(self.config.blocks_per_level);
            for (b, t) in self.enc[l].iter().zip(&tape.enc[l]).rev() {
                let (dx, bg) = block_backward(b, t, &g)?;
                g = dx;
                level_grads.push(bg);
            }
            level_grads.reverse();
            enc_grads[l] = Some(level_grads);
        }

        // Flatten in canonical parameter order (mirrors param_slices).
        let mut flat = Vec::with_capacity(self.param_count());
        let push_block = |flat: &mut Vec<f64>, bg: &BlockGrad| {
            flat.extend_from_slice(bg.dw.data());
            flat.extend_from_slice(&bg.db);
            flat.extend_from_slice(&bg.dgamma);
            flat.extend_from_slice(&bg.dbeta);
        };
        for l in 0..levels {
            for bg in enc_grads[l].as_ref().unwrap() {
                push_block(&mut flat, bg);
            }
        }
        for bg in &bott_grads {
            push_block(&mut flat, bg);
        }
        for l in (0..levels).rev() {
            // up_grads / dec_grads were collected finest-first.
            let (dwu, dbu) = &up_grads[l];
            flat.extend_from_slice(dwu.data());
            flat.extend_from_slice(dbu);
            for bg in &dec_grads[l] {
                push_block(&mut flat, bg);
            }
        }
        flat.extend_from_slice(dw_final.data());
        flat.extend_from_slice(&db_final);

        debug_assert_eq!(flat.len(), self.param_count());
        Ok((flat, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_config(kind: NormKind) -> ModelConfig {
        let mut c = ModelConfig::new(kind).with_features(vec![2, 3, 4]);
        c.seed = 5;
        c
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let cfg = ModelConfig::new(NormKind::BatchNorm);
        let m = Model::build(&cfg).unwrap();
        // Closed form over the layer list: conv w+b plus norm gamma+beta per
        // block, upconv w+b, and the final 1x1x1 conv.
        let k3 = 27;
        let conv = |co: usize, ci: usize| co * ci * k3 + co;
        let norm = |c: usize| 2 * c;
        let up = |ci: usize, co: usize| ci * co * 8 + co;
        let expected = conv(32, 1)
            + norm(32)
            + conv(32, 32)
            + norm(32)
            + conv(64, 32)
            + norm(64)
            + conv(64, 64)
            + norm(64)
            + conv(128, 64)
            + norm(128)
            + conv(128, 128)
            + norm(128)
            + up(128, 64)
            + conv(64, 128)
            + norm(64)
            + conv(64, 64)
            + norm(64)
            + up(64, 32)
            + conv(32, 64)
            + norm(32)
            + conv(32, 32)
            + norm(32)
            + (3 * 32 + 3);
        assert_eq!(m.param_count(), expected);
    }

    #[test]
    fn same_seed_builds_bit_identical_models() {
        let cfg = micro_config(NormKind::BatchNorm);
        let a = Model::build(&cfg).unwrap();
        let b = Model::build(&cfg).unwrap();
        assert_eq!(a.params_flat(), b.params_flat());
        let c = Model::build(&cfg.clone().with_seed(6)).unwrap();
        assert_ne!(a.params_flat(), c.params_flat());
    }

    #[test]
    fn zero_levels_is_rejected() {
        let mut cfg = ModelConfig::new(NormKind::Identity);
        cfg.levels = 0;
        cfg.features_per_level = vec![8];
        assert!(Model::build(&cfg).is_err());
    }

    #[test]
    fn forward_shape_matches_input_and_sigmoid_range() {
        let cfg = micro_config(NormKind::BatchNorm);
        let m = Model::build(&cfg).unwrap();
        let mut rng = SplitMix64::new(1);
        let x = Tensor::uniform(&[1, 1, 8, 8, 8], &mut rng);
        let y = m.predict(&x, Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 3, 8, 8, 8]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn indivisible_extents_are_rejected() {
        let cfg = micro_config(NormKind::Identity);
        let m = Model::build(&cfg).unwrap();
        let x = Tensor::zeros(&[1, 1, 6, 8, 8]);
        assert!(m.predict(&x, Mode::Eval).is_err());
    }

    #[test]
    fn eval_forward_is_pure_for_global_kinds() {
        for kind in [NormKind::BatchNorm, NormKind::BatchRenorm, NormKind::Identity] {
            let cfg = micro_config(kind);
            let m = Model::build(&cfg).unwrap();
            let mut rng = SplitMix64::new(2);
            let x = Tensor::uniform(&[1, 1, 8, 8, 8], &mut rng);
            let y1 = m.predict(&x, Mode::Eval).unwrap();
            let y2 = m.predict(&x, Mode::Eval).unwrap();
            assert_eq!(y1.data(), y2.data());
        }
    }

    #[test]
    fn identity_norm_forward_is_shift_equivariant_on_interior() {
        // Shift the input by the spatial divisor along z; interior outputs
        // shift identically, bit-exact.
        let cfg = micro_config(NormKind::Identity);
        let m = Model::build(&cfg).unwrap();
        let mut rng = SplitMix64::new(3);
        let (dz, hy, wx) = (64usize, 8usize, 8usize);
        let x = Tensor::uniform(&[1, 1, dz, hy, wx], &mut rng);
        let shift = 4usize;
        let mut xs = Tensor::zeros(&[1, 1, dz, hy, wx]);
        for z in shift..dz {
            for y in 0..hy {
                for xx in 0..wx {
                    xs.data_mut()[(z * hy + y) * wx + xx] =
                        x.data()[((z - shift) * hy + y) * wx + xx];
                }
            }
        }
        let y0 = m.predict(&x, Mode::Eval).unwrap();
        let y1 = m.predict(&xs, Mode::Eval).unwrap();
        // TRF margins for this architecture stay within +-22; compare a band
        // well clear of both z borders and the fresh region.
        for co in 0..3 {
            for z in 28..36 {
                for y in 0..hy {
                    for xx in 0..wx {
                        let a = y1.data()[((co * dz + z) * hy + y) * wx + xx];
                        let b = y0.data()[((co * dz + z - shift) * hy + y) * wx + xx];
                        assert_eq!(a.to_bits(), b.to_bits(), "voxel c{co} z{z} y{y} x{xx}");
                    }
                }
            }
        }
    }

    #[test]
    fn instance_norm_prediction_depends_on_tile_content() {
        let cfg = micro_config(NormKind::InstanceNorm);
        let m = Model::build(&cfg).unwrap();
        let mut rng = SplitMix64::new(4);
        // Heterogeneous volume: bright half, dim half.
        let mut big = Tensor::uniform(&[1, 1, 16, 8, 8], &mut rng);
        for z in 8..16 {
            for i in 0..64 {
                big.data_mut()[z * 64 + i] *= 0.05;
            }
        }
        let mut small = Tensor::zeros(&[1, 1, 8, 8, 8]);
        let n = 8 * 64;
        small.data_mut().copy_from_slice(&big.data()[0..n]);
        let y_big = m.predict(&big, Mode::Eval).unwrap();
        let y_small = m.predict(&small, Mode::Eval).unwrap();
        let mut max_diff = 0.0f64;
        for co in 0..3 {
            for i in 0..n {
                let a = y_small.data()[co * n + i];
                let b = y_big.data()[co * 16 * 64 + i];
                max_diff = max_diff.max((a - b).abs());
            }
        }
        assert!(max_diff > 0.0, "tile content must matter for instance norm");
    }

    #[test]
    fn linear_final_activation_skips_the_sigmoid() {
        let mut cfg = micro_config(NormKind::Identity);
        cfg.final_activation = Activation::Linear;
        let linear = Model::build(&cfg).unwrap();
        cfg.final_activation = Activation::Sigmoid;
        let sig = Model::build(&cfg).unwrap();
        let mut rng = SplitMix64::new(8);
        let x = Tensor::uniform(&[1, 1, 8, 8, 8], &mut rng);
        let logits = linear.predict(&x, Mode::Eval).unwrap();
        let y = sig.predict(&x, Mode::Eval).unwrap();
        for (&l, &p) in logits.data().iter().zip(y.data()) {
            assert_eq!((1.0 / (1.0 + (-l).exp())).to_bits(), p.to_bits());
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cfg = micro_config(NormKind::BatchNorm);
        let m = Model::build(&cfg).unwrap();
        let mut rng = SplitMix64::new(6);
        let x = Tensor::uniform(&[1, 1, 8, 8, 8], &mut rng);
        let out = m.forward(&x, Mode::Train).unwrap();
        let dy = Tensor::zeros(out.y.shape());
        let (grads, dx) = m.backward(&out.tape, &dy).unwrap();
        assert!(grads.iter().all(|&g| g == 0.0));
        assert!(dx.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn set_params_roundtrip() {
        let cfg = micro_config(NormKind::BatchRenorm);
        let mut m = Model::build(&cfg).unwrap();
        let mut p = m.params_flat();
        for (i, v) in p.iter_mut().enumerate() {
            *v += (i % 7) as f64 * 1e-3;
        }
        m.set_params_flat(&p).unwrap();
        assert_eq!(m.params_flat(), p);
    }

    #[test]
    fn micro_model_gradient_matches_finite_differences() {
        // Whole-model gradcheck on a micro config: a deterministic random
        // subset of parameters per norm kind.
        for kind in [NormKind::Identity, NormKind::BatchNorm, NormKind::InstanceNorm] {
            let cfg = micro_config(kind);
            let m = Model::build(&cfg).unwrap();
            let mut rng = SplitMix64::new(7);
            let x = Tensor::uniform(&[1, 1, 8, 8, 8], &mut rng);
            let w = Tensor::normal(&[1, 3, 8, 8, 8], &mut rng);

            let out = m.forward(&x, Mode::Train).unwrap();
            let (grads, _) = m.backward(&out.tape, &w).unwrap();

            let p0 = m.params_flat();
            let mut worst = 0.0f64;
            let mut idx_rng = SplitMix64::new(100);
            for _ in 0..60 {
                let i = idx_rng.index(p0.len());
                let h = 1e-6;
                let mut mp = m.clone();
                let mut pp = p0.clone();
                pp[i] += h;
                mp.set_params_flat(&pp).unwrap();
                let lp = mp.forward(&x, Mode::Train).unwrap().y.dot(&w);
                let mut pm = p0.clone();
                pm[i] -= h;
                mp.set_params_flat(&pm).unwrap();
                let lm = mp.forward(&x, Mode::Train).unwrap().y.dot(&w);
                let fd = (lp - lm) / (2.0 * h);
                let an = grads[i];
                let err = (fd - an).abs() / an.abs().max(fd.abs()).max(1.0);
                worst = worst.max(err);
            }
            assert!(worst < 1e-5, "kind {kind:?}: worst param grad err {worst}");
        }
    }
}
