//! 2D convolution (cross-correlation) and batch normalization.
//!
//! Convolution lowers each batch element to an im2col matrix and runs the
//! product on the GEMM kernel; the column matrices are kept for the backward
//! pass. Batch statistics are used in every mode, so small batches behave the
//! same in training and generation.

use crate::error::{Error, Result};
use crate::gemm;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Output spatial size of a convolution; rejects geometries that do not
/// divide exactly.
pub fn conv_output_hw(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::shape("conv2d", "stride must be positive".to_string()));
    }
    let span_h = h + 2 * padding;
    let span_w = w + 2 * padding;
    if span_h < kh || (span_h - kh) % stride != 0 {
        return Err(Error::shape(
            "conv2d",
            format!("height {h} with padding {padding}, kernel {kh}, stride {stride} has no integral output size"),
        ));
    }
    if span_w < kw || (span_w - kw) % stride != 0 {
        return Err(Error::shape(
            "conv2d",
            format!("width {w} with padding {padding}, kernel {kw}, stride {stride} has no integral output size"),
        ));
    }
    Ok(((span_h - kh) / stride + 1, (span_w - kw) / stride + 1))
}

/// Zero-padded im2col for one batch element: col is [Cin*kh*kw x oh*ow].
fn im2col(
    x: &[f64],
    s: Shape,
    n: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    col: &mut [f64],
) {
    let patch = oh * ow;
    for ci in 0..s.c {
        let plane = &x[(n * s.c + ci) * s.h * s.w..(n * s.c + ci + 1) * s.h * s.w];
        for ky in 0..kh {
            for kx in 0..kw {
                let krow = ((ci * kh + ky) * kw + kx) * patch;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    let row = krow + oy * ow;
                    if iy < 0 || iy >= s.h as isize {
                        col[row..row + ow].fill(0.0);
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        col[row + ox] = if ix < 0 || ix >= s.w as isize {
                            0.0
                        } else {
                            plane[iy * s.w + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add the im2col gradient back onto the input plane.
fn col2im(
    dcol: &[f64],
    s: Shape,
    n: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f64],
) {
    let patch = oh * ow;
    for ci in 0..s.c {
        let plane_off = (n * s.c + ci) * s.h * s.w;
        for ky in 0..kh {
            for kx in 0..kw {
                let krow = ((ci * kh + ky) * kw + kx) * patch;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let row = krow + oy * ow;
                    let base = plane_off + iy as usize * s.w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < s.w as isize {
                            dx[base + ix as usize] += dcol[row + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding.
///
/// input [N,Cin,H,W], weight [Cout,Cin,kH,kW], bias [1,Cout,1,1];
/// differentiable w.r.t. all three.
pub fn conv2d(
    tape: &mut Tape,
    input: &Var,
    weight: &Var,
    bias: &Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let xs = input.shape();
    let ws = weight.shape();
    let bs = bias.shape();
    if ws.c != xs.c {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input channels C={} do not match weight input channels C={}",
                xs.c, ws.c
            ),
        ));
    }
    if bs.c != ws.n || bs.n != 1 || bs.h != 1 || bs.w != 1 {
        return Err(Error::shape(
            "conv2d",
            format!("bias must be 1x{}x1x1, got {bs}", ws.n),
        ));
    }
    let (kh, kw) = (ws.h, ws.w);
    let (oh, ow) = conv_output_hw(xs.h, xs.w, kh, kw, stride, padding)?;
    let (cout, kdim, patch) = (ws.n, xs.c * kh * kw, oh * ow);
    let os = Shape::new(xs.n, cout, oh, ow);

    let xd = input.value.data();
    let wd = weight.value.data();
    let bd = bias.value.data();
    let mut cols = vec![0.0; xs.n * kdim * patch];
    let mut out = vec![0.0; os.numel()];
    for n in 0..xs.n {
        let col = &mut cols[n * kdim * patch..(n + 1) * kdim * patch];
        im2col(xd, xs, n, kh, kw, stride, padding, oh, ow, col);
        let o = &mut out[n * cout * patch..(n + 1) * cout * patch];
        gemm::matmul(cout, kdim, patch, wd, col, 0.0, o);
        for co in 0..cout {
            let b = bd[co];
            for v in &mut o[co * patch..(co + 1) * patch] {
                *v += b;
            }
        }
    }
    let value = Tensor::new(os, out);

    let parents: Vec<_> = [input, weight, bias].iter().filter_map(|v| v.node).collect();
    if parents.is_empty() {
        return Ok(Var::constant(value));
    }
    let mask = [
        input.node.is_some(),
        weight.node.is_some(),
        bias.node.is_some(),
    ];
    let wt = weight.value.clone();
    Ok(tape.push(value, parents, move |g| {
        let gd = g.data();
        let mut grads = Vec::new();
        if mask[0] {
            let wd = wt.data();
            let mut dx = vec![0.0; xs.numel()];
            let mut dcol = vec![0.0; kdim * patch];
            for n in 0..xs.n {
                let gn = &gd[n * cout * patch..(n + 1) * cout * patch];
                gemm::matmul_tn(kdim, cout, patch, wd, gn, 0.0, &mut dcol);
                col2im(&dcol, xs, n, kh, kw, stride, padding, oh, ow, &mut dx);
            }
            grads.push(Tensor::new(xs, dx));
        }
        if mask[1] {
            let mut dw = vec![0.0; ws.numel()];
            for n in 0..xs.n {
                let gn = &gd[n * cout * patch..(n + 1) * cout * patch];
                let col = &cols[n * kdim * patch..(n + 1) * kdim * patch];
                gemm::matmul_nt(cout, patch, kdim, gn, col, 1.0, &mut dw);
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
        grads
    }))
}

/// Batch normalization over N,H,W per channel, using batch statistics in
/// every mode; gradients flow through the statistics.
pub fn batch_norm(tape: &mut Tape, x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
    let s = x.shape();
    for (name, p) in [("gamma", gamma), ("beta", beta)] {
        let ps = p.shape();
        if ps.c != s.c || ps.n != 1 || ps.h != 1 || ps.w != 1 {
            return Err(Error::shape(
                "batch_norm",
                format!("{name} must be 1x{}x1x1, got {ps}", s.c),
            ));
        }
    }
    let m = (s.n * s.h * s.w) as f64;
    let hw = s.h * s.w;
    let xd = x.value.data();
    let gd = gamma.value.data();
    let bd = beta.value.data();

    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    for c in 0..s.c {
        let mut acc = 0.0;
        for n in 0..s.n {
            let base = (n * s.c + c) * hw;
            acc += xd[base..base + hw].iter().sum::<f64>();
        }
        mean[c] = acc / m;
        let mut acc2 = 0.0;
        for n in 0..s.n {
            let base = (n * s.c + c) * hw;
            for &v in &xd[base..base + hw] {
                let d = v - mean[c];
                acc2 += d * d;
            }
        }
        var[c] = acc2 / m;
    }
    let invstd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();

    let mut xhat = vec![0.0; s.numel()];
    let mut out = vec![0.0; s.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * hw;
            for i in 0..hw {
                let h = (xd[base + i] - mean[c]) * invstd[c];
                xhat[base + i] = h;
                out[base + i] = gd[c] * h + bd[c];
            }
        }
    }
    let value = Tensor::new(s, out);

    let parents: Vec<_> = [x, gamma, beta].iter().filter_map(|v| v.node).collect();
    if parents.is_empty() {
        return Ok(Var::constant(value));
    }
    let mask = [
        x.node.is_some(),
        gamma.node.is_some(),
        beta.node.is_some(),
    ];
    let xhat = Tensor::new(s, xhat);
    let gamma_t = gamma.value.clone();
    Ok(tape.push(value, parents, move |g| {
        let gout = g.data();
        let hd = xhat.data();
        // per-channel sums of g and g*xhat, shared by all three gradients
        let mut sum_g = vec![0.0; s.c];
        let mut sum_gh = vec![0.0; s.c];
        for n in 0..s.n {
            for c in 0..s.c {
                let base = (n * s.c + c) * hw;
                for i in 0..hw {
                    sum_g[c] += gout[base + i];
                    sum_gh[c] += gout[base + i] * hd[base + i];
                }
            }
        }
        let mut grads = Vec::new();
        if mask[0] {
            let gt = gamma_t.data();
            let mut dx = vec![0.0; s.numel()];
            for n in 0..s.n {
                for c in 0..s.c {
                    let k = gt[c] * invstd[c];
                    let mg = sum_g[c] / m;
                    let mgh = sum_gh[c] / m;
                    let base = (n * s.c + c) * hw;
                    for i in 0..hw {
                        dx[base + i] = k * (gout[base + i] - mg - hd[base + i] * mgh);
                    }
                }
            }
            grads.push(Tensor::new(s, dx));
        }
        if mask[1] {
            grads.push(Tensor::new(Shape::new(1, s.c, 1, 1), sum_gh.clone()));
        }
        if mask[2] {
            grads.push(Tensor::new(Shape::new(1, s.c, 1, 1), sum_g.clone()));
        }
        grads
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Quadruple-nested-loop reference convolution; the oracle the fast path
    /// must match.
    pub fn conv2d_naive(
        input: &Tensor,
        weight: &Tensor,
        bias: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Tensor {
        let xs = input.shape();
        let ws = weight.shape();
        let (oh, ow) = conv_output_hw(xs.h, xs.w, ws.h, ws.w, stride, padding).unwrap();
        let os = Shape::new(xs.n, ws.n, oh, ow);
        let mut out = vec![0.0; os.numel()];
        for n in 0..xs.n {
            for co in 0..ws.n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.data()[co];
                        for ci in 0..xs.c {
                            for ky in 0..ws.h {
                                for kx in 0..ws.w {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if iy >= 0
                                        && iy < xs.h as isize
                                        && ix >= 0
                                        && ix < xs.w as isize
                                    {
                                        acc += input.at(n, ci, iy as usize, ix as usize)
                                            * weight.at(co, ci, ky, kx);
                                    }
                                }
                            }
                        }
                        out[os.index(n, co, oy, ox)] = acc;
                    }
                }
            }
        }
        Tensor::new(os, out)
    }

    #[test]
    fn all_ones_3x3_with_2x2_kernel_sums_to_four() {
        let mut tape = Tape::new();
        let x = Var::constant(Tensor::ones(Shape::new(1, 1, 3, 3)));
        let w = Var::constant(Tensor::ones(Shape::new(1, 1, 2, 2)));
        let b = Var::constant(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        let y = conv2d(&mut tape, &x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert!(y.value.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Var::constant(Tensor::rand_uniform(Shape::new(2, 1, 4, 5), -1.0, 1.0, &mut rng));
        let w = Var::constant(Tensor::ones(Shape::new(1, 1, 1, 1)));
        let b = Var::constant(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        let y = conv2d(&mut tape, &x, &w, &b, 1, 0).unwrap();
        assert!(y.value.max_abs_diff(&x.value) < 1e-15);
    }

    #[test]
    fn matches_quadruple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::rand_uniform(Shape::new(2, 3, 8, 8), -1.0, 1.0, &mut rng);
        for (k, stride, padding) in [(3, 1, 0), (3, 1, 1), (4, 2, 1)] {
            let w = Tensor::rand_uniform(Shape::new(4, 3, k, k), -0.5, 0.5, &mut rng);
            let b = Tensor::rand_uniform(Shape::new(1, 4, 1, 1), -0.1, 0.1, &mut rng);
            let mut tape = Tape::new();
            let y = conv2d(
                &mut tape,
                &Var::constant(x.clone()),
                &Var::constant(w.clone()),
                &Var::constant(b.clone()),
                stride,
                padding,
            )
            .unwrap();
            let oracle = conv2d_naive(&x, &w, &b, stride, padding);
            assert!(
                y.value.max_abs_diff(&oracle) <= 1e-12,
                "k={k} stride={stride} pad={padding}: {}",
                y.value.max_abs_diff(&oracle)
            );
        }
    }

    #[test]
    fn rejects_channel_mismatch_with_diagnostic() {
        let mut tape = Tape::new();
        let x = Var::constant(Tensor::zeros(Shape::new(1, 3, 4, 4)));
        let w = Var::constant(Tensor::zeros(Shape::new(2, 4, 3, 3)));
        let b = Var::constant(Tensor::zeros(Shape::new(1, 2, 1, 1)));
        let err = conv2d(&mut tape, &x, &w, &b, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("C=3") && msg.contains("C=4"), "{msg}");
    }

    #[test]
    fn rejects_non_integral_geometry() {
        let err = conv_output_hw(5, 5, 2, 2, 2, 0).unwrap_err();
        assert!(err.to_string().contains("no integral output size"));
    }

    #[test]
    fn conv_gradients_match_oracle_sums() {
        // loss = sum(conv(x, w, b)); for all-ones weights over interior
        // pixels the input gradient equals the number of taps covering
        // the pixel. Use a 1x1 kernel so it is exactly 1 everywhere.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(Shape::new(1, 1, 3, 3), 2.0));
        let w = tape.leaf(Tensor::ones(Shape::new(1, 1, 1, 1)));
        let b = tape.leaf(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        let y = conv2d(&mut tape, &x, &w, &b, 1, 0).unwrap();
        let loss = ops::sum_all(&mut tape, &y);
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.of(&x).unwrap().bits_eq(&Tensor::ones(x.shape())));
        // dW = sum of inputs = 9 * 2.0; db = 9
        assert_eq!(grads.of(&w).unwrap().item(), 18.0);
        assert_eq!(grads.of(&b).unwrap().item(), 9.0);
    }

    #[test]
    fn batch_norm_of_constant_input_is_beta() {
        let mut tape = Tape::new();
        let x = Var::constant(Tensor::full(Shape::new(2, 3, 4, 4), 5.0));
        let gamma = Var::constant(Tensor::ones(Shape::new(1, 3, 1, 1)));
        let beta = Var::constant(Tensor::zeros(Shape::new(1, 3, 1, 1)));
        let y = batch_norm(&mut tape, &x, &gamma, &beta, 1e-5).unwrap();
        assert!(y.value.data().iter().all(|&v| v.abs() <= 1e-6));
    }

    #[test]
    fn batch_norm_with_zero_gamma_is_constant_beta() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Var::constant(Tensor::rand_uniform(Shape::new(1, 2, 3, 3), -4.0, 4.0, &mut rng));
        let gamma = Var::constant(Tensor::zeros(Shape::new(1, 2, 1, 1)));
        let beta = Var::constant(Tensor::full(Shape::new(1, 2, 1, 1), 7.0));
        let y = batch_norm(&mut tape, &x, &gamma, &beta, 1e-5).unwrap();
        assert!(y.value.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn batch_norm_normalizes_statistics() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let s = Shape::new(4, 3, 6, 6);
        let x = Var::constant(Tensor::rand_uniform(s, -2.0, 3.0, &mut rng));
        let gamma = Var::constant(Tensor::ones(Shape::new(1, 3, 1, 1)));
        let beta = Var::constant(Tensor::zeros(Shape::new(1, 3, 1, 1)));
        let y = batch_norm(&mut tape, &x, &gamma, &beta, 1e-5).unwrap();
        let m = (s.n * s.h * s.w) as f64;
        for c in 0..s.c {
            let mut mean = 0.0;
            let mut var = 0.0;
            for n in 0..s.n {
                for h in 0..s.h {
                    for w in 0..s.w {
                        mean += y.value.at(n, c, h, w);
                    }
                }
            }
            mean /= m;
            for n in 0..s.n {
                for h in 0..s.h {
                    for w in 0..s.w {
                        let d = y.value.at(n, c, h, w) - mean;
                        var += d * d;
                    }
                }
            }
            var /= m;
            assert!(mean.abs() <= 1e-10, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() <= 1e-4, "channel {c} var {var}");
        }
    }

    #[test]
    fn batch_norm_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = Var::constant(Tensor::zeros(Shape::new(1, 3, 2, 2)));
        let gamma = Var::constant(Tensor::ones(Shape::new(1, 2, 1, 1)));
        let beta = Var::constant(Tensor::zeros(Shape::new(1, 3, 1, 1)));
        let err = batch_norm(&mut tape, &x, &gamma, &beta, 1e-5).unwrap_err();
        assert!(err.to_string().contains("gamma"));
    }

    #[test]
    fn finite_inputs_stay_finite_through_the_stack() {
        use proptest::prelude::*;
        let mut runner = proptest::test_runner::TestRunner::deterministic();
        runner
            .run(&(0u64..1000), |seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut tape = Tape::new();
                let x = Var::constant(Tensor::rand_uniform(
                    Shape::new(1, 2, 6, 6),
                    -5.0,
                    5.0,
                    &mut rng,
                ));
                let w = Var::constant(Tensor::rand_uniform(
                    Shape::new(3, 2, 3, 3),
                    -2.0,
                    2.0,
                    &mut rng,
                ));
                let b = Var::constant(Tensor::rand_uniform(
                    Shape::new(1, 3, 1, 1),
                    -1.0,
                    1.0,
                    &mut rng,
                ));
                let gamma = Var::constant(Tensor::rand_uniform(
                    Shape::new(1, 3, 1, 1),
                    -2.0,
                    2.0,
                    &mut rng,
                ));
                let beta = Var::constant(Tensor::rand_uniform(
                    Shape::new(1, 3, 1, 1),
                    -2.0,
                    2.0,
                    &mut rng,
                ));
                let y = conv2d(&mut tape, &x, &w, &b, 1, 1).unwrap();
                let y = batch_norm(&mut tape, &y, &gamma, &beta, 1e-5).unwrap();
                for kind in [
                    ops::Activation::LeakyRelu,
                    ops::Activation::Sigmoid,
                    ops::Activation::Tanh,
                ] {
                    let a = ops::activation(&mut tape, kind, &y);
                    prop_assert!(a.value.all_finite());
                }
                prop_assert!(y.value.all_finite());
                Ok(())
            })
            .unwrap();
    }

    #[test]
    fn conv_is_deterministic_across_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = Tensor::rand_uniform(Shape::new(2, 4, 8, 8), -1.0, 1.0, &mut rng);
        let w = Tensor::rand_uniform(Shape::new(8, 4, 3, 3), -0.5, 0.5, &mut rng);
        let b = Tensor::rand_uniform(Shape::new(1, 8, 1, 1), -0.1, 0.1, &mut rng);
        let run = || {
            let mut tape = Tape::new();
            conv2d(
                &mut tape,
                &Var::constant(x.clone()),
                &Var::constant(w.clone()),
                &Var::constant(b.clone()),
                1,
                1,
            )
            .unwrap()
            .value
        };
        assert!(run().bits_eq(&run()));
    }
}
