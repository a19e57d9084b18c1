//! 3D convolution, transposed convolution and max-pooling kernels with their
//! exact backward passes.
//!
//! Every kernel fixes its per-output accumulation order (bias first, then
//! `c_in`, `kz`, `ky`, `kx`). Outputs are therefore bit-identical no matter
//! where a window sits inside a larger tensor and no matter how many worker
//! threads run: parallelism is only over disjoint output slabs.

use rayon::prelude::*;

use super::Tensor;
use crate::error::{Error, Result};

/// Zero-pads a [C,D,H,W] tensor by `p` on every spatial side.
fn pad_spatial(input: &Tensor, p: usize) -> (Vec<f64>, [usize; 4]) {
    let [c, d, h, w] = input.dims4().expect("pad_spatial: rank 4");
    let (dp, hp, wp) = (d + 2 * p, h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; c * dp * hp * wp];
    let src = input.data();
    for ci in 0..c {
        for z in 0..d {
            for y in 0..h {
                let s0 = ((ci * d + z) * h + y) * w;
                let o0 = ((ci * dp + z + p) * hp + y + p) * wp + p;
                out[o0..o0 + w].copy_from_slice(&src[s0..s0 + w]);
            }
        }
    }
    (out, [c, dp, hp, wp])
}

fn conv_out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let span = n + 2 * pad;
    if span < k {
        return Err(Error::Shape(format!(
            "kernel {k} larger than padded extent {span}"
        )));
    }
    if (span - k) % stride != 0 {
        return Err(Error::Shape(format!(
            "non-integral output extent: ({n} + 2*{pad} - {k}) not divisible by stride {stride}"
        )));
    }
    Ok((span - k) / stride + 1)
}

fn check_conv_args(k: usize, stride: usize, padding: usize) -> Result<()> {
    let k_ok = k % 2 == 1 || (k == 2 && stride == 2);
    if !k_ok {
        return Err(Error::Shape(format!(
            "kernel {k} with stride {stride} unsupported (k must be odd, or k=2 with stride 2)"
        )));
    }
    if padding >= k {
        return Err(Error::Shape(format!("padding {padding} must be < kernel {k}")));
    }
    if stride == 0 {
        return Err(Error::Shape("stride must be positive".into()));
    }
    Ok(())
}

/// 3D convolution of a [C_in,D,H,W] input with [C_out,C_in,k,k,k] weights.
pub fn conv3d(
    input: &Tensor,
    weights: &Tensor,
    bias: &[f64],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let [c_in, d, h, w] = input.dims4()?;
    let [c_out, wci, k, k1, k2] = weights.dims5()?;
    if wci != c_in || k != k1 || k != k2 {
        return Err(Error::Shape(format!(
            "weights {:?} incompatible with input {:?}",
            weights.shape(),
            input.shape()
        )));
    }
    if bias.len() != c_out {
        return Err(Error::Shape(format!(
            "bias length {} != c_out {}",
            bias.len(),
            c_out
        )));
    }
    check_conv_args(k, stride, padding)?;
    let od = conv_out_extent(d, k, stride, padding)?;
    let oh = conv_out_extent(h, k, stride, padding)?;
    let ow = conv_out_extent(w, k, stride, padding)?;

    let (xp_owned, pdims);
    let xp: &[f64];
    if padding == 0 {
        xp = input.data();
        pdims = [c_in, d, h, w];
    } else {
        let (v, dims) = pad_spatial(input, padding);
        xp_owned = v;
        xp = &xp_owned;
        pdims = dims;
    }
    let [_, dp, hp, wp] = pdims;

    let mut out = Tensor::zeros(&[c_out, od, oh, ow]);
    let wdat = weights.data();
    let k3 = k * k * k;
    let spatial = od * oh * ow;

    out.data_mut()
        .par_chunks_mut(spatial)
        .enumerate()
        .for_each(|(co, slab)| {
            let wco = &wdat[co * c_in * k3..(co + 1) * c_in * k3];
            let b = bias[co];
            for oz in 0..od {
                for oy in 0..oh {
                    let row = &mut slab[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                    row.fill(b);
                    for ci in 0..c_in {
                        for kz in 0..k {
                            let iz = oz * stride + kz;
                            for ky in 0..k {
                                let iy = oy * stride + ky;
                                let xrow = &xp[((ci * dp + iz) * hp + iy) * wp
                                    ..((ci * dp + iz) * hp + iy + 1) * wp];
                                let wrow = &wco[((ci * k + kz) * k + ky) * k
                                    ..((ci * k + kz) * k + ky + 1) * k];
                                for (kx, &wv) in wrow.iter().enumerate() {
                                    if stride == 1 {
                                        for (o, &x) in row.iter_mut().zip(&xrow[kx..kx + ow]) {
                                            *o += wv * x;
                                        }
                                    } else {
                                        for (o, orow) in row.iter_mut().enumerate() {
                                            *orow += wv * xrow[o * stride + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    out.ensure_finite("conv3d")?;
    Ok(out)
}

/// Gradient of `conv3d` with respect to its input.
pub fn conv3d_backward_input(
    weights: &Tensor,
    dy: &Tensor,
    input_shape: &[usize; 4],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let [c_out, c_in, k, _, _] = weights.dims5()?;
    let [dyc, od, oh, ow] = dy.dims4()?;
    if dyc != c_out {
        return Err(Error::Shape(format!(
            "upstream channels {dyc} != weight c_out {c_out}"
        )));
    }
    let [ic, d, h, w] = *input_shape;
    if ic != c_in {
        return Err(Error::Shape(format!(
            "input channels {ic} != weight c_in {c_in}"
        )));
    }
    let (dp, hp, wp) = (d + 2 * padding, h + 2 * padding, w + 2 * padding);
    let mut dxp = vec![0.0; c_in * dp * hp * wp];
    let wdat = weights.data();
    let dyd = dy.data();
    let k3 = k * k * k;

    dxp.par_chunks_mut(dp * hp * wp)
        .enumerate()
        .for_each(|(ci, slab)| {
            for az in 0..dp {
                for ay in 0..hp {
                    let drow = &mut slab[(az * hp + ay) * wp..(az * hp + ay + 1) * wp];
                    for co in 0..c_out {
                        let wc = &wdat[(co * c_in + ci) * k3..(co * c_in + ci + 1) * k3];
                        for kz in 0..k {
                            if az < kz || (az - kz) % stride != 0 {
                                continue;
                            }
                            let oz = (az - kz) / stride;
                            if oz >= od {
                                continue;
                            }
                            for ky in 0..k {
                                if ay < ky || (ay - ky) % stride != 0 {
                                    continue;
                                }
                                let oy = (ay - ky) / stride;
                                if oy >= oh {
                                    continue;
                                }
                                let dyrow =
                                    &dyd[((co * od + oz) * oh + oy) * ow..((co * od + oz) * oh + oy + 1) * ow];
                                for kx in 0..k {
                                    let wv = wc[(kz * k + ky) * k + kx];
                                    if stride == 1 {
                                        for (dst, &g) in drow[kx..kx + ow].iter_mut().zip(dyrow) {
                                            *dst += wv * g;
                                        }
                                    } else {
                                        for (ox, &g) in dyrow.iter().enumerate() {
                                            drow[ox * stride + kx] += wv * g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });

    // Crop the padding margin back off.
    let mut dx = Tensor::zeros(&[c_in, d, h, w]);
    let dxd = dx.data_mut();
    for ci in 0..c_in {
        for z in 0..d {
            for y in 0..h {
                let s0 = ((ci * dp + z + padding) * hp + y + padding) * wp + padding;
                let o0 = ((ci * d + z) * h + y) * w;
                dxd[o0..o0 + w].copy_from_slice(&dxp[s0..s0 + w]);
            }
        }
    }
    Ok(dx)
}

/// Gradients of `conv3d` with respect to weights and bias.
pub fn conv3d_backward_params(
    input: &Tensor,
    dy: &Tensor,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Vec<f64>)> {
    let [c_in, d, h, w] = input.dims4()?;
    let [c_out, od, oh, ow] = dy.dims4()?;

    let (xp_owned, pdims);
    let xp: &[f64];
    if padding == 0 {
        xp = input.data();
        pdims = [c_in, d, h, w];
    } else {
        let (v, dims) = pad_spatial(input, padding);
        xp_owned = v;
        xp = &xp_owned;
        pdims = dims;
    }
    let [_, dp, hp, wp] = pdims;

    let mut dw = Tensor::zeros(&[c_out, c_in, k, k, k]);
    let mut db = vec![0.0; c_out];
    let dyd = dy.data();
    let k3 = k * k * k;

    let db_slices: Vec<f64> = (0..c_out)
        .map(|co| dyd[co * od * oh * ow..(co + 1) * od * oh * ow].iter().sum())
        .collect();
    db.copy_from_slice(&db_slices);

    dw.data_mut()
        .par_chunks_mut(c_in * k3)
        .enumerate()
        .for_each(|(co, slab)| {
            for ci in 0..c_in {
                for kz in 0..k {
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut acc = 0.0;
                            for oz in 0..od {
                                let iz = oz * stride + kz;
                                for oy in 0..oh {
                                    let iy = oy * stride + ky;
                                    let dyrow = &dyd[((co * od + oz) * oh + oy) * ow
                                        ..((co * od + oz) * oh + oy + 1) * ow];
                                    let xbase = ((ci * dp + iz) * hp + iy) * wp + kx;
                                    if stride == 1 {
                                        for (g, &x) in dyrow.iter().zip(&xp[xbase..xbase + ow]) {
                                            acc += g * x;
                                        }
                                    } else {
                                        for (ox, &g) in dyrow.iter().enumerate() {
                                            acc += g * xp[xbase + ox * stride];
                                        }
                                    }
                                }
                            }
                            slab[((ci * k + kz) * k + ky) * k + kx] = acc;
                        }
                    }
                }
            }
        });

    Ok((dw, db))
}

/// Transposed 3D convolution, the decoder upsampler: kernel 2, stride 2,
/// weights laid out [C_in,C_out,2,2,2]. Output extents double.
pub fn conv3d_transposed(input: &Tensor, weights: &Tensor, bias: &[f64]) -> Result<Tensor> {
    let [c_in, d, h, w] = input.dims4()?;
    let [wci, c_out, k0, k1, k2] = weights.dims5()?;
    if wci != c_in {
        return Err(Error::Shape(format!(
            "weights c_in {wci} != input channels {c_in}"
        )));
    }
    if (k0, k1, k2) != (2, 2, 2) {
        return Err(Error::Shape("transposed conv supports kernel 2 only".into()));
    }
    if bias.len() != c_out {
        return Err(Error::Shape(format!(
            "bias length {} != c_out {}",
            bias.len(),
            c_out
        )));
    }
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let mut out = Tensor::zeros(&[c_out, od, oh, ow]);
    let xd = input.data();
    let wd = weights.data();

    out.data_mut()
        .par_chunks_mut(od * oh * ow)
        .enumerate()
        .for_each(|(co, slab)| {
            let b = bias[co];
            for oz in 0..od {
                let (z, kz) = (oz >> 1, oz & 1);
                for oy in 0..oh {
                    let (y, ky) = (oy >> 1, oy & 1);
                    let row = &mut slab[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                    row.fill(b);
                    for ci in 0..c_in {
                        let xrow = &xd[((ci * d + z) * h + y) * w..((ci * d + z) * h + y + 1) * w];
                        let wbase = (((ci * c_out + co) * 2 + kz) * 2 + ky) * 2;
                        let (w0, w1) = (wd[wbase], wd[wbase + 1]);
                        for (ox, o) in row.iter_mut().enumerate() {
                            let wv = if ox & 1 == 0 { w0 } else { w1 };
                            *o += wv * xrow[ox >> 1];
                        }
                    }
                }
            }
        });
    out.ensure_finite("conv3d_transposed")?;
    Ok(out)
}

/// Gradients of `conv3d_transposed`: input, weights and bias.
pub fn conv3d_transposed_backward(
    input: &Tensor,
    weights: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let [c_in, d, h, w] = input.dims4()?;
    let [_, c_out, _, _, _] = weights.dims5()?;
    let [dyc, od, oh, ow] = dy.dims4()?;
    if dyc != c_out || od != 2 * d || oh != 2 * h || ow != 2 * w {
        return Err(Error::Shape(format!(
            "upstream {:?} incompatible with transposed conv output [{},{},{},{}]",
            dy.shape(),
            c_out,
            2 * d,
            2 * h,
            2 * w
        )));
    }
    let wd = weights.data();
    let dyd = dy.data();
    let xd = input.data();

    let mut dx = Tensor::zeros(&[c_in, d, h, w]);
    dx.data_mut()
        .par_chunks_mut(d * h * w)
        .enumerate()
        .for_each(|(ci, slab)| {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0;
                        for co in 0..c_out {
                            for kz in 0..2 {
                                for ky in 0..2 {
                                    for kx in 0..2 {
                                        let wv = wd[((((ci * c_out + co) * 2 + kz) * 2 + ky) * 2) + kx];
                                        let g = dyd[((co * od + 2 * z + kz) * oh + 2 * y + ky) * ow
                                            + 2 * x
                                            + kx];
                                        acc += wv * g;
                                    }
                                }
                            }
                        }
                        slab[(z * h + y) * w + x] = acc;
                    }
                }
            }
        });

    let mut dw = Tensor::zeros(&[c_in, c_out, 2, 2, 2]);
    dw.data_mut()
        .par_chunks_mut(c_out * 8)
        .enumerate()
        .for_each(|(ci, slab)| {
            for co in 0..c_out {
                for kz in 0..2 {
                    for ky in 0..2 {
                        for kx in 0..2 {
                            let mut acc = 0.0;
                            for z in 0..d {
                                for y in 0..h {
                                    for x in 0..w {
                                        acc += xd[((ci * d + z) * h + y) * w + x]
                                            * dyd[((co * od + 2 * z + kz) * oh + 2 * y + ky) * ow
                                                + 2 * x
                                                + kx];
                                    }
                                }
                            }
                            slab[((co * 2 + kz) * 2 + ky) * 2 + kx] = acc;
                        }
                    }
                }
            }
        });

    let db: Vec<f64> = (0..c_out)
        .map(|co| dyd[co * od * oh * ow..(co + 1) * od * oh * ow].iter().sum())
        .collect();

    Ok((dx, dw, db))
}

/// 2x2x2 max pooling with stride 2. Returns the pooled tensor and the flat
/// input index of each window maximum (first hit wins on ties), which makes
/// the backward pass exact.
pub fn max_pool3d(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let [c, d, h, w] = input.dims4()?;
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "max_pool3d requires even spatial extents, got [{d},{h},{w}]"
        )));
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut out = Tensor::zeros(&[c, od, oh, ow]);
    let mut argmax = vec![0usize; c * od * oh * ow];
    let xd = input.data();
    let od_sp = od * oh * ow;

    let outd = out.data_mut();
    outd.par_chunks_mut(od_sp)
        .zip(argmax.par_chunks_mut(od_sp))
        .enumerate()
        .for_each(|(ci, (oslab, aslab))| {
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for kz in 0..2 {
                            for ky in 0..2 {
                                for kx in 0..2 {
                                    let idx = ((ci * d + 2 * oz + kz) * h + 2 * oy + ky) * w
                                        + 2 * ox
                                        + kx;
                                    let v = xd[idx];
                                    if v > best {
                                        best = v;
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        oslab[(oz * oh + oy) * ow + ox] = best;
                        aslab[(oz * oh + oy) * ow + ox] = best_idx;
                    }
                }
            }
        });
    Ok((out, argmax))
}

/// Routes the upstream gradient back to the stored argmax positions.
pub fn max_pool3d_backward(argmax: &[usize], input_shape: &[usize; 4], dy: &Tensor) -> Result<Tensor> {
    if argmax.len() != dy.len() {
        return Err(Error::Shape(format!(
            "argmax length {} != upstream length {}",
            argmax.len(),
            dy.len()
        )));
    }
    let mut dx = Tensor::zeros(input_shape.as_slice());
    let dxd = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(dy.data()) {
        dxd[idx] += g;
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SplitMix64;

    /// Direct six-nested-loop convolution with the same accumulation order
    /// as the production kernel: bias, then (c_in, kz, ky, kx).
    fn conv3d_oracle(
        input: &Tensor,
        weights: &Tensor,
        bias: &[f64],
        stride: usize,
        padding: usize,
    ) -> Tensor {
        let [c_in, d, h, w] = input.dims4().unwrap();
        let [c_out, _, k, _, _] = weights.dims5().unwrap();
        let od = (d + 2 * padding - k) / stride + 1;
        let oh = (h + 2 * padding - k) / stride + 1;
        let ow = (w + 2 * padding - k) / stride + 1;
        let mut out = Tensor::zeros(&[c_out, od, oh, ow]);
        let get = |ci: usize, z: i64, y: i64, x: i64| -> f64 {
            if z < 0 || y < 0 || x < 0 || z >= d as i64 || y >= h as i64 || x >= w as i64 {
                0.0
            } else {
                input.data()[((ci * d + z as usize) * h + y as usize) * w + x as usize]
            }
        };
        for co in 0..c_out {
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[co];
                        for ci in 0..c_in {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let wv = weights.data()
                                            [(((co * c_in + ci) * k + kz) * k + ky) * k + kx];
                                        acc += wv
                                            * get(
                                                ci,
                                                (oz * stride + kz) as i64 - padding as i64,
                                                (oy * stride + ky) as i64 - padding as i64,
                                                (ox * stride + kx) as i64 - padding as i64,
                                            );
                                    }
                                }
                            }
                        }
                        out.data_mut()[((co * od + oz) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_reproduces_input_bitwise() {
        let mut rng = SplitMix64::new(1);
        let x = Tensor::uniform(&[2, 3, 4, 5], &mut rng);
        let mut w = Tensor::zeros(&[2, 2, 1, 1, 1]);
        w.data_mut()[0] = 1.0; // co=0 <- ci=0
        w.data_mut()[3] = 1.0; // co=1 <- ci=1
        let y = conv3d(&x, &w, &[0.0, 0.0], 1, 0).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn all_ones_kernel_counts_window_overlap() {
        let x = Tensor::full(&[1, 5, 5, 5], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3, 3], 1.0);
        let y = conv3d(&x, &w, &[0.0], 1, 1).unwrap();
        let [_, d, h, ww] = y.dims4().unwrap();
        assert_eq!([d, h, ww], [5, 5, 5]);
        let at = |z: usize, yy: usize, x_: usize| y.data()[(z * 5 + yy) * 5 + x_];
        assert_eq!(at(2, 2, 2), 27.0);
        assert_eq!(at(0, 0, 0), 8.0);
    }

    #[test]
    fn conv_matches_brute_force_oracle_exactly() {
        let mut rng = SplitMix64::new(99);
        let x = Tensor::normal(&[2, 4, 4, 4], &mut rng);
        let w = Tensor::normal(&[3, 2, 3, 3, 3], &mut rng);
        let b: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        for padding in [0, 1] {
            let got = conv3d(&x, &w, &b, 1, padding).unwrap();
            let want = conv3d_oracle(&x, &w, &b, 1, padding);
            assert_eq!(got.shape(), want.shape());
            assert_eq!(got.data(), want.data(), "padding={padding}");
        }
    }

    #[test]
    fn strided_conv_matches_oracle() {
        let mut rng = SplitMix64::new(5);
        let x = Tensor::normal(&[2, 6, 6, 6], &mut rng);
        let w = Tensor::normal(&[2, 2, 2, 2, 2], &mut rng);
        let b = vec![0.25, -0.5];
        let got = conv3d(&x, &w, &b, 2, 0).unwrap();
        let want = conv3d_oracle(&x, &w, &b, 2, 0);
        assert_eq!(got.data(), want.data());
    }

    #[test]
    fn conv_rejects_non_integral_output() {
        let x = Tensor::zeros(&[1, 5, 5, 5]);
        let w = Tensor::zeros(&[1, 1, 2, 2, 2]);
        assert!(conv3d(&x, &w, &[0.0], 2, 0).is_err());
    }

    #[test]
    fn conv_rejects_shape_mismatch() {
        let x = Tensor::zeros(&[2, 4, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3, 3]);
        assert!(conv3d(&x, &w, &[0.0], 1, 1).is_err());
    }

    #[test]
    fn window_placement_does_not_change_bits() {
        // Convolving an extracted window equals the corresponding region of
        // the big convolution (pad 0 so footprints stay interior).
        let mut rng = SplitMix64::new(17);
        let big = Tensor::normal(&[1, 8, 8, 8], &mut rng);
        let w = Tensor::normal(&[2, 1, 3, 3, 3], &mut rng);
        let b = vec![0.1, -0.2];
        let full = conv3d(&big, &w, &b, 1, 0).unwrap();

        // Window [2..7) per axis -> its pad-0 conv output is 3^3 and must
        // equal full[:, 2..5, 2..5, 2..5].
        let mut win = Tensor::zeros(&[1, 5, 5, 5]);
        for z in 0..5 {
            for y in 0..5 {
                for x in 0..5 {
                    win.data_mut()[(z * 5 + y) * 5 + x] =
                        big.data()[((z + 2) * 8 + y + 2) * 8 + x + 2];
                }
            }
        }
        let small = conv3d(&win, &w, &b, 1, 0).unwrap();
        for co in 0..2 {
            for z in 0..3 {
                for y in 0..3 {
                    for x in 0..3 {
                        let a = small.data()[((co * 3 + z) * 3 + y) * 3 + x];
                        let bfull = full.data()[((co * 6 + z + 2) * 6 + y + 2) * 6 + x + 2];
                        assert_eq!(a.to_bits(), bfull.to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn transposed_single_voxel_scatters_to_full_block() {
        let mut x = Tensor::zeros(&[1, 1, 1, 1]);
        x.data_mut()[0] = 3.5;
        let w = Tensor::full(&[1, 1, 2, 2, 2], 1.0);
        let y = conv3d_transposed(&x, &w, &[0.0]).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn transposed_zero_input_broadcasts_bias() {
        let x = Tensor::zeros(&[2, 2, 2, 2]);
        let mut rng = SplitMix64::new(2);
        let w = Tensor::normal(&[2, 3, 2, 2, 2], &mut rng);
        let y = conv3d_transposed(&x, &w, &[1.0, -2.0, 0.5]).unwrap();
        for co in 0..3 {
            let want = [1.0, -2.0, 0.5][co];
            assert!(y.data()[co * 64..(co + 1) * 64].iter().all(|&v| v == want));
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_matching_forward_conv() {
        // <T(x), y> == <x, conv(y, w)>: the transposed-conv weight layout
        // [c_in,c_out,2,2,2] read as forward-conv weights [c_out',c_in',...]
        // is exactly the matching stride-2 kernel-2 gather over y.
        let mut rng = SplitMix64::new(8);
        for trial in 0..5 {
            let (ci, co, d) = (1 + trial % 3, 1 + (trial + 1) % 3, 2 + trial % 2);
            let x = Tensor::normal(&[ci, d, d, d], &mut rng);
            let w = Tensor::normal(&[ci, co, 2, 2, 2], &mut rng);
            let y = Tensor::normal(&[co, 2 * d, 2 * d, 2 * d], &mut rng);
            let tx = conv3d_transposed(&x, &w, &vec![0.0; co]).unwrap();
            let adj = conv3d(&y, &w, &vec![0.0; ci], 2, 0).unwrap();
            let lhs = tx.dot(&y);
            let rhs = x.dot(&adj);
            let denom = lhs.abs().max(rhs.abs()).max(1e-30);
            assert!(
                ((lhs - rhs) / denom).abs() < 1e-12,
                "adjointness violated: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn conv_backward_input_is_adjoint_of_forward() {
        let mut rng = SplitMix64::new(3);
        for (stride, pad, k) in [(1usize, 1usize, 3usize), (1, 0, 3), (2, 0, 2), (1, 2, 5)] {
            let d = if stride == 2 { 6 } else { 7 };
            let x = Tensor::normal(&[2, d, d, d], &mut rng);
            let w = Tensor::normal(&[3, 2, k, k, k], &mut rng);
            let y = conv3d(&x, &w, &vec![0.0; 3], stride, pad).unwrap();
            let g = Tensor::normal(y.shape(), &mut rng);
            let dx = conv3d_backward_input(&w, &g, &[2, d, d, d], stride, pad).unwrap();
            let lhs = y.dot(&g);
            let rhs = x.dot(&dx);
            let denom = lhs.abs().max(rhs.abs()).max(1e-30);
            assert!(
                ((lhs - rhs) / denom).abs() < 1e-12,
                "stride={stride} pad={pad} k={k}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn pool_constant_input_stays_constant() {
        let x = Tensor::full(&[2, 4, 4, 4], 2.5);
        let (y, _) = max_pool3d(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn pool_picks_window_maximum() {
        let mut x = Tensor::zeros(&[1, 2, 2, 2]);
        x.data_mut()[5] = 5.0;
        let (y, arg) = max_pool3d(&x).unwrap();
        assert_eq!(y.data(), &[5.0]);
        assert_eq!(arg, vec![5]);
    }

    #[test]
    fn pool_matches_loop_oracle_and_routes_gradient() {
        let mut rng = SplitMix64::new(11);
        let x = Tensor::normal(&[3, 4, 6, 8], &mut rng);
        let (y, arg) = max_pool3d(&x).unwrap();
        let [c, d, h, w] = x.dims4().unwrap();
        for ci in 0..c {
            for oz in 0..d / 2 {
                for oy in 0..h / 2 {
                    for ox in 0..w / 2 {
                        let mut best = f64::NEG_INFINITY;
                        for kz in 0..2 {
                            for ky in 0..2 {
                                for kx in 0..2 {
                                    best = best.max(
                                        x.data()[((ci * d + 2 * oz + kz) * h + 2 * oy + ky) * w
                                            + 2 * ox
                                            + kx],
                                    );
                                }
                            }
                        }
                        assert_eq!(
                            y.data()[((ci * (d / 2) + oz) * (h / 2) + oy) * (w / 2) + ox],
                            best
                        );
                    }
                }
            }
        }
        let g = Tensor::normal(y.shape(), &mut rng);
        let dx = max_pool3d_backward(&arg, &[c, d, h, w], &g).unwrap();
        let routed: f64 = dx.data().iter().sum();
        let upstream: f64 = g.data().iter().sum();
        assert!((routed - upstream).abs() < 1e-12);
    }

    #[test]
    fn pool_breaks_ties_toward_the_first_scan_position() {
        let x = Tensor::full(&[1, 2, 2, 2], 4.0);
        let (y, arg) = max_pool3d(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn pool_rejects_odd_extent() {
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        assert!(max_pool3d(&x).is_err());
    }
}
