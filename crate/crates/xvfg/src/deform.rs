//! Deformable convolution: per-tap learned offsets evaluated by bilinear
//! sampling, with gradients flowing to the input, the kernel, and the
//! sampling coordinates (and through them into the offset predictor).
//!
//! One offset pair per kernel tap, shared across input channels (a single
//! deformable group), no modulation scalar. The offset predictor is a plain
//! convolution initialized to zero, so an untrained layer is exactly a
//! standard convolution.

use rand::Rng;

use crate::error::{Error, Result};
use crate::gemm;
use crate::ops;
use crate::optim::{ParamBank, Session};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Bilinear read of one channel plane at a real-valued position. Any of the
/// four neighbouring pixels that falls outside [0,H)x[0,W) contributes 0,
/// making this a total function of (y, x).
#[inline]
fn sample_plane(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |yy: isize, xx: isize| -> f64 {
        if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    (1.0 - fy) * (1.0 - fx) * at(y0, x0)
        + (1.0 - fy) * fx * at(y0, x0 + 1)
        + fy * (1.0 - fx) * at(y0 + 1, x0)
        + fy * fx * at(y0 + 1, x0 + 1)
}

/// Value plus its derivatives w.r.t. the sampling coordinates.
#[inline]
fn sample_plane_grad(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> (f64, f64, f64) {
    let y0f = y.floor();
    let x0f = x.floor();
    let fy = y - y0f;
    let fx = x - x0f;
    let (y0, x0) = (y0f as isize, x0f as isize);
    let at = |yy: isize, xx: isize| -> f64 {
        if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let p00 = at(y0, x0);
    let p01 = at(y0, x0 + 1);
    let p10 = at(y0 + 1, x0);
    let p11 = at(y0 + 1, x0 + 1);
    let value = (1.0 - fy) * (1.0 - fx) * p00
        + (1.0 - fy) * fx * p01
        + fy * (1.0 - fx) * p10
        + fy * fx * p11;
    let dy = -(1.0 - fx) * p00 - fx * p01 + (1.0 - fx) * p10 + fx * p11;
    let dx = -(1.0 - fy) * p00 + (1.0 - fy) * p01 - fy * p10 + fy * p11;
    (value, dy, dx)
}

/// Bilinear sample of every channel of batch element `n` at (y, x).
pub fn bilinear_sample(map: &Tensor, n: usize, y: f64, x: f64) -> Vec<f64> {
    let s = map.shape();
    let hw = s.h * s.w;
    (0..s.c)
        .map(|c| {
            let base = (n * s.c + c) * hw;
            sample_plane(&map.data()[base..base + hw], s.h, s.w, y, x)
        })
        .collect()
}

/// Analytic (value, d/dy, d/dx) per channel; the oracle target for the
/// coordinate gradient checks.
pub fn bilinear_sample_grad(map: &Tensor, n: usize, y: f64, x: f64) -> Vec<(f64, f64, f64)> {
    let s = map.shape();
    let hw = s.h * s.w;
    (0..s.c)
        .map(|c| {
            let base = (n * s.c + c) * hw;
            sample_plane_grad(&map.data()[base..base + hw], s.h, s.w, y, x)
        })
        .collect()
}

/// Deformable cross-correlation.
///
/// `offsets` is [N, 2*kH*kW, OH, OW]: channel 2t is the y displacement of
/// tap t and channel 2t+1 the x displacement, taps in row-major kernel
/// order. For every output position p and tap t the input is read at the
/// regular grid point plus the learned offset.
pub fn deform_conv2d(
    tape: &mut Tape,
    input: &Var,
    weight: &Var,
    bias: &Var,
    offsets: &Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let xs = input.shape();
    let ws = weight.shape();
    if ws.c != xs.c {
        return Err(Error::shape(
            "deform_conv2d",
            format!(
                "input channels C={} do not match weight input channels C={}",
                xs.c, ws.c
            ),
        ));
    }
    let (kh, kw) = (ws.h, ws.w);
    let (oh, ow) = ops::conv_output_hw(xs.h, xs.w, kh, kw, stride, padding)?;
    let os = Shape::new(xs.n, ws.n, oh, ow);
    let taps = kh * kw;
    let offs = offsets.shape();
    if offs.n != xs.n || offs.c != 2 * taps || offs.h != oh || offs.w != ow {
        return Err(Error::shape(
            "deform_conv2d",
            format!(
                "offset map must be {}x{}x{oh}x{ow}, got {offs}",
                xs.n,
                2 * taps
            ),
        ));
    }
    let bs = bias.shape();
    if bs.c != ws.n || bs.n != 1 || bs.h != 1 || bs.w != 1 {
        return Err(Error::shape(
            "deform_conv2d",
            format!("bias must be 1x{}x1x1, got {bs}", ws.n),
        ));
    }

    let (cout, kdim, patch) = (ws.n, xs.c * taps, oh * ow);
    let xd = input.value.data();
    let od = offsets.value.data();
    let wd = weight.value.data();
    let bd = bias.value.data();
    let hw = xs.h * xs.w;

    // sampled[K x P] per batch element, the deformable analogue of im2col
    let mut sampled = vec![0.0; xs.n * kdim * patch];
    let mut out = vec![0.0; os.numel()];
    for n in 0..xs.n {
        let samp = &mut sampled[n * kdim * patch..(n + 1) * kdim * patch];
        for ky in 0..kh {
            for kx in 0..kw {
                let t = ky * kw + kx;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let p = oy * ow + ox;
                        let dy = od[offs.index(n, 2 * t, oy, ox)];
                        let dx = od[offs.index(n, 2 * t + 1, oy, ox)];
                        let y = (oy * stride + ky) as f64 - padding as f64 + dy;
                        let x = (ox * stride + kx) as f64 - padding as f64 + dx;
                        for ci in 0..xs.c {
                            let base = (n * xs.c + ci) * hw;
                            samp[((ci * kh + ky) * kw + kx) * patch + p] =
                                sample_plane(&xd[base..base + hw], xs.h, xs.w, y, x);
                        }
                    }
                }
            }
        }
        let o = &mut out[n * cout * patch..(n + 1) * cout * patch];
        gemm::matmul(cout, kdim, patch, wd, samp, 0.0, o);
        for co in 0..cout {
            let b = bd[co];
            for v in &mut o[co * patch..(co + 1) * patch] {
                *v += b;
            }
        }
    }
    let value = Tensor::new(os, out);

    let parents: Vec<_> = [input, weight, bias, offsets]
        .iter()
        .filter_map(|v| v.node)
        .collect();
    if parents.is_empty() {
        return Ok(Var::constant(value));
    }
    let mask = [
        input.node.is_some(),
        weight.node.is_some(),
        bias.node.is_some(),
        offsets.node.is_some(),
    ];
    let xt = input.value.clone();
    let ot = offsets.value.clone();
    let wt = weight.value.clone();
    Ok(tape.push(value, parents, move |g| {
        let gd = g.data();
        let xd = xt.data();
        let od = ot.data();
        let wd = wt.data();

        // dsamp = W^T * g per batch element; shared by input and offset grads
        let mut dsamp_all = vec![0.0; xs.n * kdim * patch];
        if mask[0] || mask[3] {
            for n in 0..xs.n {
                let gn = &gd[n * cout * patch..(n + 1) * cout * patch];
                let ds = &mut dsamp_all[n * kdim * patch..(n + 1) * kdim * patch];
                gemm::matmul_tn(kdim, cout, patch, wd, gn, 0.0, ds);
            }
        }

        let mut dx_t = mask[0].then(|| vec![0.0; xs.numel()]);
        let mut doff = mask[3].then(|| vec![0.0; ot.numel()]);
        if mask[0] || mask[3] {
            for n in 0..xs.n {
                let ds = &dsamp_all[n * kdim * patch..(n + 1) * kdim * patch];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let t = ky * kw + kx;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let p = oy * ow + ox;
                                let dyv = od[offs.index(n, 2 * t, oy, ox)];
                                let dxv = od[offs.index(n, 2 * t + 1, oy, ox)];
                                let y = (oy * stride + ky) as f64 - padding as f64 + dyv;
                                let x = (ox * stride + kx) as f64 - padding as f64 + dxv;
                                let y0 = y.floor();
                                let x0 = x.floor();
                                let fy = y - y0;
                                let fx = x - x0;
                                let (y0, x0) = (y0 as isize, x0 as isize);
                                let mut acc_dy = 0.0;
                                let mut acc_dx = 0.0;
                                for ci in 0..xs.c {
                                    let gs = ds[((ci * kh + ky) * kw + kx) * patch + p];
                                    if gs == 0.0 {
                                        continue;
                                    }
                                    let base = (n * xs.c + ci) * hw;
                                    let plane = &xd[base..base + hw];
                                    let read = |yy: isize, xx: isize| -> f64 {
                                        if yy < 0
                                            || yy >= xs.h as isize
                                            || xx < 0
                                            || xx >= xs.w as isize
                                        {
                                            0.0
                                        } else {
                                            plane[yy as usize * xs.w + xx as usize]
                                        }
                                    };
                                    let p00 = read(y0, x0);
                                    let p01 = read(y0, x0 + 1);
                                    let p10 = read(y0 + 1, x0);
                                    let p11 = read(y0 + 1, x0 + 1);
                                    if mask[3] {
                                        acc_dy += gs
                                            * (-(1.0 - fx) * p00 - fx * p01
                                                + (1.0 - fx) * p10
                                                + fx * p11);
                                        acc_dx += gs
                                            * (-(1.0 - fy) * p00 + (1.0 - fy) * p01
                                                - fy * p10
                                                + fy * p11);
                                    }
                                    if let Some(dxs) = dx_t.as_mut() {
                                        let mut put = |yy: isize, xx: isize, wgt: f64| {
                                            if yy >= 0
                                                && yy < xs.h as isize
                                                && xx >= 0
                                                && xx < xs.w as isize
                                            {
                                                dxs[base
                                                    + yy as usize * xs.w
                                                    + xx as usize] += gs * wgt;
                                            }
                                        };
                                        put(y0, x0, (1.0 - fy) * (1.0 - fx));
                                        put(y0, x0 + 1, (1.0 - fy) * fx);
                                        put(y0 + 1, x0, fy * (1.0 - fx));
                                        put(y0 + 1, x0 + 1, fy * fx);
                                    }
                                }
                                if let Some(doffs) = doff.as_mut() {
                                    doffs[offs.index(n, 2 * t, oy, ox)] = acc_dy;
                                    doffs[offs.index(n, 2 * t + 1, oy, ox)] = acc_dx;
                                }
                            }
                        }
                    }
                }
            }
        }

        let mut grads = Vec::new();
        if let Some(dx) = dx_t {
            grads.push(Tensor::new(xs, dx));
        }
        if mask[1] {
            let mut dw = vec![0.0; ws.numel()];
            for n in 0..xs.n {
                let gn = &gd[n * cout * patch..(n + 1) * cout * patch];
                let samp = &sampled[n * kdim * patch..(n + 1) * kdim * patch];
                gemm::matmul_nt(cout, patch, kdim, gn, samp, 1.0, &mut dw);
            }
            grads.push(Tensor::new(ws, dw));
        }
        if mask[2] {
            let mut db = vec![0.0; cout];
            for n in 0..xs.n {
                for co in 0..cout {
                    let base = (n * cout + co) * patch;
                    db[co] += gd[base..base + patch].iter().sum::<f64>();
                }
            }
            grads.push(Tensor::new(Shape::new(1, cout, 1, 1), db));
        }
        if let Some(d) = doff {
            grads.push(Tensor::new(offs, d));
        }
        grads
    }))
}

/// A deformable convolution layer: the kernel plus its offset predictor, a
/// standard convolution with 2*kH*kW output channels sharing the deformable
/// geometry so the offset map matches the output grid.
pub struct DeformConvLayer {
    pub weight: String,
    pub bias: String,
    pub offset_weight: String,
    pub offset_bias: String,
    pub stride: usize,
    pub padding: usize,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl DeformConvLayer {
    /// Kernel weights get the usual random init; the offset predictor starts
    /// at all zeros so the layer begins as a standard convolution.
    pub fn init(
        bank: &mut ParamBank,
        rng: &mut impl Rng,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let layer = DeformConvLayer {
            weight: format!("{prefix}.w"),
            bias: format!("{prefix}.b"),
            offset_weight: format!("{prefix}.offset.w"),
            offset_bias: format!("{prefix}.offset.b"),
            stride,
            padding,
            kernel,
            in_channels: cin,
            out_channels: cout,
        };
        bank.insert(
            &layer.weight,
            Tensor::randn(Shape::new(cout, cin, kernel, kernel), 0.0, 0.02, rng),
        )?;
        bank.insert(&layer.bias, Tensor::zeros(Shape::new(1, cout, 1, 1)))?;
        let off_c = 2 * kernel * kernel;
        bank.insert(
            &layer.offset_weight,
            Tensor::zeros(Shape::new(off_c, cin, kernel, kernel)),
        )?;
        bank.insert(&layer.offset_bias, Tensor::zeros(Shape::new(1, off_c, 1, 1)))?;
        Ok(layer)
    }

    pub fn forward(&self, s: &mut Session, bank: &ParamBank, input: &Var) -> Result<Var> {
        let ow = s.param(bank, &self.offset_weight);
        let ob = s.param(bank, &self.offset_bias);
        let offsets = ops::conv2d(&mut s.tape, input, &ow, &ob, self.stride, self.padding)?;
        let w = s.param(bank, &self.weight);
        let b = s.param(bank, &self.bias);
        deform_conv2d(&mut s.tape, input, &w, &b, &offsets, self.stride, self.padding)
    }

    pub fn param_names(&self) -> Vec<String> {
        vec![
            self.weight.clone(),
            self.bias.clone(),
            self.offset_weight.clone(),
            self.offset_bias.clone(),
        ]
    }

    /// Element count of the offset predictor alone.
    pub fn offset_param_count(&self) -> usize {
        let off_c = 2 * self.kernel * self.kernel;
        off_c * self.in_channels * self.kernel * self.kernel + off_c
    }
}
