//! Differentiable layers with explicit train/eval mode semantics.
//!
//! The normalization layer is the interesting part: the same forward entry
//! point implements BatchNorm, InstanceNorm (optionally tracking running
//! statistics), BatchRenorm and the identity, differing only in where the
//! normalization statistics come from and whether running averages update.
//! All kinds share one numeric path `y = gamma * ((x - mu) * inv_std * r + d)
//! + beta`, so degenerate cases (r = 1, d = 0) are bitwise identical to
//! plain BatchNorm rather than merely close.
//!
//! Forwards never mutate state: stat updates are returned as a pending
//! [`StatUpdate`] that the caller may commit, which is what lets diagnostics
//! run train-mode normalization without touching the model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    conv3d, conv3d_backward_input, conv3d_backward_params, conv3d_transposed,
    conv3d_transposed_backward, max_pool3d, max_pool3d_backward, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    BatchNorm,
    InstanceNorm,
    InstanceNormTracked,
    BatchRenorm,
    Identity,
}

impl NormKind {
    /// Kinds whose normalization statistics depend on the current input in
    /// the given mode. These are the tile-coupled configurations: every
    /// output voxel depends on the whole tile.
    pub fn uses_input_stats(&self, mode: Mode) -> bool {
        match self {
            NormKind::Identity => false,
            NormKind::InstanceNorm => true,
            NormKind::InstanceNormTracked => mode == Mode::Train,
            NormKind::BatchNorm | NormKind::BatchRenorm => mode == Mode::Train,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "batchnorm" | "batch_norm" | "bn" => Ok(NormKind::BatchNorm),
            "instancenorm" | "instance_norm" | "in" => Ok(NormKind::InstanceNorm),
            "instancenormtracked" | "instance_norm_tracked" | "int" => {
                Ok(NormKind::InstanceNormTracked)
            }
            "batchrenorm" | "batch_renorm" | "brn" => Ok(NormKind::BatchRenorm),
            "identity" | "none" | "id" => Ok(NormKind::Identity),
            other => Err(Error::Config(format!("unknown norm kind '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            NormKind::BatchNorm => "batchnorm",
            NormKind::InstanceNorm => "instancenorm",
            NormKind::InstanceNormTracked => "instancenormtracked",
            NormKind::BatchRenorm => "batchrenorm",
            NormKind::Identity => "identity",
        }
    }
}

/// Per-layer normalization record: affine parameters, running statistics and
/// the BatchRenorm clipping bounds currently in effect.
#[derive(Debug, Clone)]
pub struct NormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mu: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    pub r_max: f64,
    pub d_max: f64,
    pub step_count: u64,
}

impl NormState {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(Error::Config(format!("momentum {momentum} outside (0,1]")));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("eps {eps} must be positive")));
        }
        Ok(NormState {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mu: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            eps,
            r_max: 1.0,
            d_max: 0.0,
            step_count: 0,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Sets the effective BatchRenorm clipping bounds (the training schedule
    /// ramps these from (1, 0) to their target values).
    pub fn set_renorm_bounds(&mut self, r_max: f64, d_max: f64) -> Result<()> {
        if r_max < 1.0 || d_max < 0.0 {
            return Err(Error::Config(format!(
                "renorm bounds r_max={r_max}, d_max={d_max} invalid (need r_max >= 1, d_max >= 0)"
            )));
        }
        self.r_max = r_max;
        self.d_max = d_max;
        Ok(())
    }

    /// Commits a pending running-statistics update:
    /// `p_new = (1 - momentum) * p_old + momentum * p_t`.
    pub fn apply_update(&mut self, update: &StatUpdate) {
        let m = self.momentum;
        for (p, &t) in self.running_mu.iter_mut().zip(&update.mu) {
            *p = (1.0 - m) * *p + m * t;
        }
        for (p, &t) in self.running_var.iter_mut().zip(&update.var) {
            *p = (1.0 - m) * *p + m * t;
        }
        self.step_count += 1;
    }
}

/// Batch statistics produced by a train-mode forward, not yet folded into
/// the running averages.
#[derive(Debug, Clone)]
pub struct StatUpdate {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StatScope {
    PerChannel,
    PerSampleChannel,
}

/// Everything the normalization backward needs.
#[derive(Debug, Clone)]
pub struct NormCache {
    kind: NormKind,
    n: usize,
    c: usize,
    spatial: usize,
    /// Normalized pre-affine values (r,d correction already applied).
    z: Tensor,
    /// Pre-correction normalized values; only stored when they differ from z.
    x_hat: Option<Tensor>,
    /// 1/sqrt(var + eps) per group.
    inv_std: Vec<f64>,
    /// Per-channel renorm correction, 1.0/0.0 when inactive.
    r: Vec<f64>,
    d: Vec<f64>,
    gamma: Vec<f64>,
    scope: StatScope,
    /// Whether statistics were computed from the input (full backward) or
    /// are constants (running averages).
    input_stats: bool,
}

impl NormCache {
    pub fn r_max_observed(&self) -> f64 {
        self.r.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn r_min_observed(&self) -> f64 {
        self.r.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn d_abs_max_observed(&self) -> f64 {
        self.d.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }
}

pub struct NormForward {
    pub y: Tensor,
    pub cache: NormCache,
    pub pending: Option<StatUpdate>,
}

/// Gradients of a normalization layer: input plus both affine parameters.
#[derive(Debug)]
pub struct LayerGrad {
    pub d_input: Tensor,
    pub d_gamma: Vec<f64>,
    pub d_beta: Vec<f64>,
}

/// Per-group mean and biased variance. Scope PerChannel reduces over
/// (N, spatial) per channel; PerSampleChannel over spatial per (n, c).
/// Accumulation order is fixed: samples ascending, spatial ascending.
fn group_stats(x: &Tensor, scope: StatScope) -> (Vec<f64>, Vec<f64>) {
    let [n, c, d, h, w] = x.dims5().expect("group_stats: rank 5");
    let sp = d * h * w;
    let xd = x.data();
    match scope {
        StatScope::PerChannel => {
            let count = (n * sp) as f64;
            let mut mu = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut acc = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ci) * sp;
                    for &v in &xd[base..base + sp] {
                        acc += v;
                    }
                }
                let m = acc / count;
                let mut vacc = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ci) * sp;
                    for &v in &xd[base..base + sp] {
                        let t = v - m;
                        vacc += t * t;
                    }
                }
                mu[ci] = m;
                var[ci] = vacc / count;
            }
            (mu, var)
        }
        StatScope::PerSampleChannel => {
            let count = sp as f64;
            let mut mu = vec![0.0; n * c];
            let mut var = vec![0.0; n * c];
            for g in 0..n * c {
                let base = g * sp;
                let mut acc = 0.0;
                for &v in &xd[base..base + sp] {
                    acc += v;
                }
                let m = acc / count;
                let mut vacc = 0.0;
                for &v in &xd[base..base + sp] {
                    let t = v - m;
                    vacc += t * t;
                }
                mu[g] = m;
                var[g] = vacc / count;
            }
            (mu, var)
        }
    }
}

/// The shared numeric path: z = (x - mu) * inv * r + d, y = gamma * z + beta.
/// `mu`, `inv` are indexed per group according to `scope`; r, d, gamma, beta
/// per channel.
#[allow(clippy::too_many_arguments)]
fn normalize_affine(
    x: &Tensor,
    mu: &[f64],
    inv: &[f64],
    r: &[f64],
    d: &[f64],
    gamma: &[f64],
    beta: &[f64],
    scope: StatScope,
) -> (Tensor, Tensor) {
    let [n, c, dd, hh, ww] = x.dims5().expect("normalize_affine: rank 5");
    let sp = dd * hh * ww;
    let mut z = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let xd = x.data();
    for ni in 0..n {
        for ci in 0..c {
            let g = match scope {
                StatScope::PerChannel => ci,
                StatScope::PerSampleChannel => ni * c + ci,
            };
            let (m, iv, rc, dc, gc, bc) = (mu[g], inv[g], r[ci], d[ci], gamma[ci], beta[ci]);
            let base = (ni * c + ci) * sp;
            let zs = &mut z.data_mut()[base..base + sp];
            for (zv, &xv) in zs.iter_mut().zip(&xd[base..base + sp]) {
                *zv = (xv - m) * iv * rc + dc;
            }
            let ys = &mut y.data_mut()[base..base + sp];
            for (yv, &zv) in ys.iter_mut().zip(z.data()[base..base + sp].iter()) {
                *yv = gc * zv + bc;
            }
        }
    }
    (z, y)
}

/// Feature-normalization forward pass.
pub fn norm_forward(
    x: &Tensor,
    state: &NormState,
    kind: NormKind,
    mode: Mode,
) -> Result<NormForward> {
    let [n, c, d, h, w] = x.dims5()?;
    if n == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if kind != NormKind::Identity && c != state.channels() {
        return Err(Error::Shape(format!(
            "input channels {c} != norm state channels {}",
            state.channels()
        )));
    }
    let sp = d * h * w;

    if kind == NormKind::Identity {
        let cache = NormCache {
            kind,
            n,
            c,
            spatial: sp,
            z: Tensor::zeros(&[0]),
            x_hat: None,
            inv_std: vec![],
            r: vec![1.0],
            d: vec![0.0],
            gamma: vec![],
            scope: StatScope::PerChannel,
            input_stats: false,
        };
        return Ok(NormForward {
            y: x.clone(),
            cache,
            pending: None,
        });
    }

    let (scope, input_stats, mu, var, pending): (
        StatScope,
        bool,
        Vec<f64>,
        Vec<f64>,
        Option<StatUpdate>,
    ) = match (kind, mode) {
        (NormKind::BatchNorm, Mode::Train) | (NormKind::BatchRenorm, Mode::Train) => {
            let (mu, var) = group_stats(x, StatScope::PerChannel);
            let pending = Some(StatUpdate {
                mu: mu.clone(),
                var: var.clone(),
            });
            (StatScope::PerChannel, true, mu, var, pending)
        }
        (NormKind::BatchNorm, Mode::Eval)
        | (NormKind::BatchRenorm, Mode::Eval)
        | (NormKind::InstanceNormTracked, Mode::Eval) => (
            StatScope::PerChannel,
            false,
            state.running_mu.clone(),
            state.running_var.clone(),
            None,
        ),
        (NormKind::InstanceNorm, _) => {
            let (mu, var) = group_stats(x, StatScope::PerSampleChannel);
            (StatScope::PerSampleChannel, true, mu, var, None)
        }
        (NormKind::InstanceNormTracked, Mode::Train) => {
            let (mu, var) = group_stats(x, StatScope::PerSampleChannel);
            // Running stats accumulate the batch average of the per-sample
            // statistics.
            let mut pm = vec![0.0; c];
            let mut pv = vec![0.0; c];
            for ci in 0..c {
                for ni in 0..n {
                    pm[ci] += mu[ni * c + ci];
                    pv[ci] += var[ni * c + ci];
                }
                pm[ci] /= n as f64;
                pv[ci] /= n as f64;
            }
            (
                StatScope::PerSampleChannel,
                true,
                mu,
                var,
                Some(StatUpdate { mu: pm, var: pv }),
            )
        }
        (NormKind::Identity, _) => unreachable!(),
    };

    let inv: Vec<f64> = var.iter().map(|&v| 1.0 / (v + state.eps).sqrt()).collect();

    // BatchRenorm correction factors, treated as constants in backward.
    let (r, dvec) = if kind == NormKind::BatchRenorm && mode == Mode::Train {
        compute_renorm_rd(&mu, &var, state)
    } else {
        (vec![1.0; c], vec![0.0; c])
    };

    let (z, y) = normalize_affine(x, &mu, &inv, &r, &dvec, &state.gamma, &state.beta, scope);
    y.ensure_finite("norm_forward")?;

    let x_hat = if kind == NormKind::BatchRenorm && mode == Mode::Train {
        let mut xh = Tensor::zeros(x.shape());
        let xd = x.data();
        for ni in 0..n {
            for ci in 0..c {
                let g = match scope {
                    StatScope::PerChannel => ci,
                    StatScope::PerSampleChannel => ni * c + ci,
                };
                let base = (ni * c + ci) * sp;
                for (o, &xv) in xh.data_mut()[base..base + sp]
                    .iter_mut()
                    .zip(&xd[base..base + sp])
                {
                    *o = (xv - mu[g]) * inv[g];
                }
            }
        }
        Some(xh)
    } else {
        None
    };

    Ok(NormForward {
        y,
        cache: NormCache {
            kind,
            n,
            c,
            spatial: sp,
            z,
            x_hat,
            inv_std: inv,
            r,
            d: dvec,
            gamma: state.gamma.clone(),
            scope,
            input_stats,
        },
        pending,
    })
}

/// r = clip(sigma_B / sigma_run, 1/r_max, r_max),
/// d = clip((mu_B - mu_run) / sigma_run, -d_max, d_max),
/// with sigma = sqrt(var + eps) on both sides.
fn compute_renorm_rd(mu_b: &[f64], var_b: &[f64], state: &NormState) -> (Vec<f64>, Vec<f64>) {
    let c = mu_b.len();
    let mut r = vec![1.0; c];
    let mut d = vec![0.0; c];
    for ci in 0..c {
        let sigma_b = (var_b[ci] + state.eps).sqrt();
        let sigma_run = (state.running_var[ci] + state.eps).sqrt();
        r[ci] = (sigma_b / sigma_run).clamp(1.0 / state.r_max, state.r_max);
        d[ci] = ((mu_b[ci] - state.running_mu[ci]) / sigma_run).clamp(-state.d_max, state.d_max);
    }
    (r, d)
}

/// Exact analytic gradient of the normalization layer.
pub fn norm_backward(cache: &NormCache, upstream: &Tensor) -> Result<LayerGrad> {
    if cache.kind == NormKind::Identity {
        return Ok(LayerGrad {
            d_input: upstream.clone(),
            d_gamma: vec![],
            d_beta: vec![],
        });
    }
    let (n, c, sp) = (cache.n, cache.c, cache.spatial);
    if upstream.len() != n * c * sp {
        return Err(Error::Shape("stale cache: upstream shape mismatch".into()));
    }
    let dyd = upstream.data();
    let zd = cache.z.data();
    let xh = cache.x_hat.as_ref().map(|t| t.data()).unwrap_or(zd);

    let mut d_gamma = vec![0.0; c];
    let mut d_beta = vec![0.0; c];
    for ci in 0..c {
        let mut dg = 0.0;
        let mut db = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * sp;
            for i in base..base + sp {
                dg += dyd[i] * zd[i];
                db += dyd[i];
            }
        }
        d_gamma[ci] = dg;
        d_beta[ci] = db;
    }

    let mut d_input = Tensor::zeros(upstream.shape());
    if !cache.input_stats {
        // Statistics are constants: dx = dy * gamma * r * inv.
        let dxd = d_input.data_mut();
        for ni in 0..n {
            for ci in 0..c {
                let g = match cache.scope {
                    StatScope::PerChannel => ci,
                    StatScope::PerSampleChannel => ni * c + ci,
                };
                let k = cache.gamma[ci] * cache.r[ci] * cache.inv_std[g];
                let base = (ni * c + ci) * sp;
                for i in base..base + sp {
                    dxd[i] = dyd[i] * k;
                }
            }
        }
        return Ok(LayerGrad {
            d_input,
            d_gamma,
            d_beta,
        });
    }

    // Input-dependent statistics: full batch-norm backward per group,
    // dx_i = inv * (dxh_i - mean(dxh) - xh_i * mean(dxh * xh)),
    // where dxh = dy * gamma * r (r, d held constant).
    let dxd = d_input.data_mut();
    let bases_for = |ci: usize, gi: usize| -> Vec<usize> {
        match cache.scope {
            StatScope::PerChannel => (0..n).map(|ni| (ni * c + ci) * sp).collect(),
            StatScope::PerSampleChannel => vec![gi * sp],
        }
    };
    let group_count = match cache.scope {
        StatScope::PerChannel => c,
        StatScope::PerSampleChannel => n * c,
    };
    for gi in 0..group_count {
        let ci = match cache.scope {
            StatScope::PerChannel => gi,
            StatScope::PerSampleChannel => gi % c,
        };
        let bases = bases_for(ci, gi);
        let count = (bases.len() * sp) as f64;
        let scale = cache.gamma[ci] * cache.r[ci];
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for &base in &bases {
            for i in base..base + sp {
                let dxh = dyd[i] * scale;
                s1 += dxh;
                s2 += dxh * xh[i];
            }
        }
        let m1 = s1 / count;
        let m2 = s2 / count;
        let inv = cache.inv_std[gi];
        for &base in &bases {
            for i in base..base + sp {
                let dxh = dyd[i] * scale;
                dxd[i] = inv * (dxh - m1 - xh[i] * m2);
            }
        }
    }

    Ok(LayerGrad {
        d_input,
        d_gamma,
        d_beta,
    })
}

// ---------------------------------------------------------------------------
// Pointwise activations
// ---------------------------------------------------------------------------

pub struct ReluCache {
    input: Tensor,
}

/// ReLU; the derivative at exactly 0 is 0.
pub fn relu_forward(x: Tensor) -> (Tensor, ReluCache) {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    (y, ReluCache { input: x })
}

pub fn relu_backward(cache: &ReluCache, upstream: &Tensor) -> Tensor {
    let mut dx = upstream.clone();
    for (d, &x) in dx.data_mut().iter_mut().zip(cache.input.data()) {
        if x <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

pub struct SigmoidCache {
    output: Tensor,
}

pub fn sigmoid_forward(x: &Tensor) -> (Tensor, SigmoidCache) {
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = 1.0 / (1.0 + (-*v).exp());
    }
    (y.clone(), SigmoidCache { output: y })
}

pub fn sigmoid_backward(cache: &SigmoidCache, upstream: &Tensor) -> Tensor {
    let mut dx = upstream.clone();
    for (d, &y) in dx.data_mut().iter_mut().zip(cache.output.data()) {
        *d *= y * (1.0 - y);
    }
    dx
}

// ---------------------------------------------------------------------------
// Convolution / pooling layers over batched [N,C,D,H,W] tensors
// ---------------------------------------------------------------------------

fn sample(x: &Tensor, ni: usize) -> Tensor {
    let [n, c, d, h, w] = x.dims5().expect("sample: rank 5");
    debug_assert!(ni < n);
    let sp = c * d * h * w;
    Tensor::from_vec(&[c, d, h, w], x.data()[ni * sp..(ni + 1) * sp].to_vec())
        .expect("sample slice is finite")
}

fn stack(samples: Vec<Tensor>) -> Tensor {
    let shape4 = samples[0].shape().to_vec();
    let mut shape5 = vec![samples.len()];
    shape5.extend_from_slice(&shape4);
    let mut data = Vec::with_capacity(samples.len() * samples[0].len());
    for s in samples {
        data.extend_from_slice(s.data());
    }
    Tensor::from_vec(&shape5, data).expect("stack of finite tensors")
}

#[derive(Debug, Clone)]
pub struct Conv3dLayer {
    pub weight: Tensor, // [c_out, c_in, k, k, k]
    pub bias: Vec<f64>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv3dLayer {
    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn forward_batch(&self, x: &Tensor) -> Result<Tensor> {
        let [n, ..] = x.dims5()?;
        let mut outs = Vec::with_capacity(n);
        for ni in 0..n {
            outs.push(conv3d(
                &sample(x, ni),
                &self.weight,
                &self.bias,
                self.stride,
                self.padding,
            )?);
        }
        Ok(stack(outs))
    }

    /// Returns (d_input, d_weight, d_bias); parameter gradients sum over the
    /// batch in sample order.
    pub fn backward_batch(&self, x: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Vec<f64>)> {
        let [n, c, d, h, w] = x.dims5()?;
        let mut dxs = Vec::with_capacity(n);
        let mut dw_total = Tensor::zeros(self.weight.shape());
        let mut db_total = vec![0.0; self.bias.len()];
        for ni in 0..n {
            let xs = sample(x, ni);
            let dys = sample(dy, ni);
            let dx = conv3d_backward_input(
                &self.weight,
                &dys,
                &[c, d, h, w],
                self.stride,
                self.padding,
            )?;
            let (dw, db) =
                conv3d_backward_params(&xs, &dys, self.kernel(), self.stride, self.padding)?;
            dw_total.add_assign(&dw);
            for (a, b) in db_total.iter_mut().zip(&db) {
                *a += b;
            }
            dxs.push(dx);
        }
        Ok((stack(dxs), dw_total, db_total))
    }
}

#[derive(Debug, Clone)]
pub struct UpconvLayer {
    pub weight: Tensor, // [c_in, c_out, 2, 2, 2]
    pub bias: Vec<f64>,
}

impl UpconvLayer {
    pub fn forward_batch(&self, x: &Tensor) -> Result<Tensor> {
        let [n, ..] = x.dims5()?;
        let mut outs = Vec::with_capacity(n);
        for ni in 0..n {
            outs.push(conv3d_transposed(&sample(x, ni), &self.weight, &self.bias)?);
        }
        Ok(stack(outs))
    }

    pub fn backward_batch(&self, x: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Vec<f64>)> {
        let [n, ..] = x.dims5()?;
        let mut dxs = Vec::with_capacity(n);
        let mut dw_total = Tensor::zeros(self.weight.shape());
        let mut db_total = vec![0.0; self.bias.len()];
        for ni in 0..n {
            let (dx, dw, db) =
                conv3d_transposed_backward(&sample(x, ni), &self.weight, &sample(dy, ni))?;
            dw_total.add_assign(&dw);
            for (a, b) in db_total.iter_mut().zip(&db) {
                *a += b;
            }
            dxs.push(dx);
        }
        Ok((stack(dxs), dw_total, db_total))
    }
}

pub struct PoolCache {
    pub argmax: Vec<Vec<usize>>,
    pub in_shape: [usize; 4],
}

pub fn max_pool_batch(x: &Tensor) -> Result<(Tensor, PoolCache)> {
    let [n, c, d, h, w] = x.dims5()?;
    let mut outs = Vec::with_capacity(n);
    let mut argmax = Vec::with_capacity(n);
    for ni in 0..n {
        let (y, a) = max_pool3d(&sample(x, ni))?;
        outs.push(y);
        argmax.push(a);
    }
    Ok((
        stack(outs),
        PoolCache {
            argmax,
            in_shape: [c, d, h, w],
        },
    ))
}

pub fn max_pool_batch_backward(cache: &PoolCache, dy: &Tensor) -> Result<Tensor> {
    let [n, ..] = dy.dims5()?;
    let mut dxs = Vec::with_capacity(n);
    for ni in 0..n {
        dxs.push(max_pool3d_backward(
            &cache.argmax[ni],
            &cache.in_shape,
            &sample(dy, ni),
        )?);
    }
    Ok(stack(dxs))
}

/// Concatenates two batched tensors along the channel axis: [up | skip].
pub fn concat_channels(up: &Tensor, skip: &Tensor) -> Result<Tensor> {
    let [n, c1, d, h, w] = up.dims5()?;
    let [n2, c2, d2, h2, w2] = skip.dims5()?;
    if n != n2 || d != d2 || h != h2 || w != w2 {
        return Err(Error::Shape(format!(
            "concat spatial/batch mismatch: {:?} vs {:?}",
            up.shape(),
            skip.shape()
        )));
    }
    let sp = d * h * w;
    let mut out = Tensor::zeros(&[n, c1 + c2, d, h, w]);
    let od = out.data_mut();
    for ni in 0..n {
        let dst = ni * (c1 + c2) * sp;
        od[dst..dst + c1 * sp].copy_from_slice(&up.data()[ni * c1 * sp..(ni + 1) * c1 * sp]);
        od[dst + c1 * sp..dst + (c1 + c2) * sp]
            .copy_from_slice(&skip.data()[ni * c2 * sp..(ni + 1) * c2 * sp]);
    }
    Ok(out)
}

/// Splits the upstream gradient of a channel concat back into its parts.
pub fn concat_channels_backward(dy: &Tensor, c_up: usize) -> Result<(Tensor, Tensor)> {
    let [n, c, d, h, w] = dy.dims5()?;
    let c_skip = c - c_up;
    let sp = d * h * w;
    let mut d_up = Tensor::zeros(&[n, c_up, d, h, w]);
    let mut d_skip = Tensor::zeros(&[n, c_skip, d, h, w]);
    for ni in 0..n {
        let src = ni * c * sp;
        d_up.data_mut()[ni * c_up * sp..(ni + 1) * c_up * sp]
            .copy_from_slice(&dy.data()[src..src + c_up * sp]);
        d_skip.data_mut()[ni * c_skip * sp..(ni + 1) * c_skip * sp]
            .copy_from_slice(&dy.data()[src + c_up * sp..src + c * sp]);
    }
    Ok((d_up, d_skip))
}
