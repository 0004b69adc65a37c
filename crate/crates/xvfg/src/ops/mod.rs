//! Differentiable tensor operations.
//!
//! Every op takes the tape plus input [`Var`]s, computes the forward value,
//! and records a backward rule for the inputs that are on the tape. Ops are
//! pure over immutable tensors; reduction orders are fixed so repeated runs
//! are bit-identical.

mod conv;

pub use conv::{batch_norm, conv2d, conv_output_hw};

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(sigmoid(x)) without ever evaluating log(0); exact for |x| up to
/// hundreds.
#[inline]
pub fn log_sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

// ── elementwise arithmetic ──────────────────────────────────────────────

fn same_shape(op: &'static str, a: &Var, b: &Var) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("operands differ: {} vs {}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

pub fn add(tape: &mut Tape, a: &Var, b: &Var) -> Result<Var> {
    same_shape("add", a, b)?;
    let value = a.value.add(&b.value);
    let (parents, mask) = parent_list(&[a, b]);
    Ok(tape.push(value, parents, move |g| {
        let mut out = Vec::new();
        if mask[0] {
            out.push(g.clone());
        }
        if mask[1] {
            out.push(g.clone());
        }
        out
    }))
}

pub fn sub(tape: &mut Tape, a: &Var, b: &Var) -> Result<Var> {
    same_shape("sub", a, b)?;
    let value = a.value.sub(&b.value);
    let (parents, mask) = parent_list(&[a, b]);
    Ok(tape.push(value, parents, move |g| {
        let mut out = Vec::new();
        if mask[0] {
            out.push(g.clone());
        }
        if mask[1] {
            out.push(g.scale(-1.0));
        }
        out
    }))
}

/// Elementwise (Hadamard) product.
pub fn mul(tape: &mut Tape, a: &Var, b: &Var) -> Result<Var> {
    same_shape("mul", a, b)?;
    let value = a.value.zip_map(&b.value, |x, y| x * y);
    let (parents, mask) = parent_list(&[a, b]);
    let (av, bv) = (a.value.clone(), b.value.clone());
    Ok(tape.push(value, parents, move |g| {
        let mut out = Vec::new();
        if mask[0] {
            out.push(g.zip_map(&bv, |gi, y| gi * y));
        }
        if mask[1] {
            out.push(g.zip_map(&av, |gi, x| gi * x));
        }
        out
    }))
}

pub fn scale(tape: &mut Tape, a: &Var, k: f64) -> Var {
    let value = a.value.scale(k);
    match a.node {
        None => Var::constant(value),
        Some(id) => tape.push(value, vec![id], move |g| vec![g.scale(k)]),
    }
}

pub fn neg(tape: &mut Tape, a: &Var) -> Var {
    scale(tape, a, -1.0)
}

/// Collect tape parents for the subset of vars that require grad, plus a
/// mask telling the backward rule which inputs expect a gradient.
fn parent_list(vars: &[&Var]) -> (Vec<NodeId>, Vec<bool>) {
    let parents = vars.iter().filter_map(|v| v.node).collect();
    let mask = vars.iter().map(|v| v.node.is_some()).collect();
    (parents, mask)
}

// ── activations ─────────────────────────────────────────────────────────

/// Elementwise nonlinearities; the leaky slope is fixed at 0.2.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    LeakyRelu,
    Relu,
    Sigmoid,
    Tanh,
}

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn activation(tape: &mut Tape, kind: Activation, x: &Var) -> Var {
    let value = match kind {
        Activation::LeakyRelu => x.value.map(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v }),
        Activation::Relu => x.value.map(|v| v.max(0.0)),
        Activation::Sigmoid => x.value.map(sigmoid_scalar),
        Activation::Tanh => x.value.map(f64::tanh),
    };
    let Some(id) = x.node else {
        return Var::constant(value);
    };
    match kind {
        Activation::LeakyRelu => {
            let xin = x.value.clone();
            tape.push(value, vec![id], move |g| {
                vec![g.zip_map(&xin, |gi, v| if v > 0.0 { gi } else { LEAKY_SLOPE * gi })]
            })
        }
        Activation::Relu => {
            let xin = x.value.clone();
            tape.push(value, vec![id], move |g| {
                vec![g.zip_map(&xin, |gi, v| if v > 0.0 { gi } else { 0.0 })]
            })
        }
        Activation::Sigmoid => {
            let y = value.clone();
            tape.push(value, vec![id], move |g| {
                vec![g.zip_map(&y, |gi, s| gi * s * (1.0 - s))]
            })
        }
        Activation::Tanh => {
            let y = value.clone();
            tape.push(value, vec![id], move |g| {
                vec![g.zip_map(&y, |gi, t| gi * (1.0 - t * t))]
            })
        }
    }
}

pub fn leaky_relu(tape: &mut Tape, x: &Var) -> Var {
    activation(tape, Activation::LeakyRelu, x)
}

pub fn relu(tape: &mut Tape, x: &Var) -> Var {
    activation(tape, Activation::Relu, x)
}

pub fn sigmoid(tape: &mut Tape, x: &Var) -> Var {
    activation(tape, Activation::Sigmoid, x)
}

pub fn tanh(tape: &mut Tape, x: &Var) -> Var {
    activation(tape, Activation::Tanh, x)
}

/// log(sigmoid(x)), the stable building block of the adversarial losses.
pub fn log_sigmoid(tape: &mut Tape, x: &Var) -> Var {
    let value = x.value.map(log_sigmoid_scalar);
    let Some(id) = x.node else {
        return Var::constant(value);
    };
    let xin = x.value.clone();
    tape.push(value, vec![id], move |g| {
        vec![g.zip_map(&xin, |gi, v| gi * sigmoid_scalar(-v))]
    })
}

pub fn abs(tape: &mut Tape, x: &Var) -> Var {
    let value = x.value.map(f64::abs);
    let Some(id) = x.node else {
        return Var::constant(value);
    };
    let xin = x.value.clone();
    tape.push(value, vec![id], move |g| {
        vec![g.zip_map(&xin, |gi, v| gi * sign(v))]
    })
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Softmax across channels, independently per (n, h, w) position.
pub fn softmax_channels(tape: &mut Tape, x: &Var) -> Var {
    let s = x.shape();
    let xd = x.value.data();
    let mut out = vec![0.0; s.numel()];
    for n in 0..s.n {
        for h in 0..s.h {
            for w in 0..s.w {
                let mut maxv = f64::NEG_INFINITY;
                for c in 0..s.c {
                    maxv = maxv.max(xd[s.index(n, c, h, w)]);
                }
                let mut denom = 0.0;
                for c in 0..s.c {
                    let e = (xd[s.index(n, c, h, w)] - maxv).exp();
                    out[s.index(n, c, h, w)] = e;
                    denom += e;
                }
                for c in 0..s.c {
                    out[s.index(n, c, h, w)] /= denom;
                }
            }
        }
    }
    let value = Tensor::new(s, out);
    let Some(id) = x.node else {
        return Var::constant(value);
    };
    let prob = value.clone();
    tape.push(value, vec![id], move |g| {
        let gd = g.data();
        let pd = prob.data();
        let mut dx = vec![0.0; s.numel()];
        for n in 0..s.n {
            for h in 0..s.h {
                for w in 0..s.w {
                    let mut dot = 0.0;
                    for c in 0..s.c {
                        let i = s.index(n, c, h, w);
                        dot += gd[i] * pd[i];
                    }
                    for c in 0..s.c {
                        let i = s.index(n, c, h, w);
                        dx[i] = pd[i] * (gd[i] - dot);
                    }
                }
            }
        }
        vec![Tensor::new(s, dx)]
    })
}

// ── broadcast gates ─────────────────────────────────────────────────────

/// Multiply a per-channel gate [N,C,1,1] into a map [N,C,H,W].
pub fn mul_channel_gate(tape: &mut Tape, gate: &Var, x: &Var) -> Result<Var> {
    let (gs, xs) = (gate.shape(), x.shape());
    if gs.n != xs.n || gs.c != xs.c || gs.h != 1 || gs.w != 1 {
        return Err(Error::shape(
            "mul_channel_gate",
            format!("gate {gs} does not broadcast over {xs}"),
        ));
    }
    let hw = xs.h * xs.w;
    let mut out = vec![0.0; xs.numel()];
    let (gd, xd) = (gate.value.data(), x.value.data());
    for n in 0..xs.n {
        for c in 0..xs.c {
            let gv = gd[n * xs.c + c];
            let base = (n * xs.c + c) * hw;
            for i in 0..hw {
                out[base + i] = gv * xd[base + i];
            }
        }
    }
    let value = Tensor::new(xs, out);
    let (parents, mask) = parent_list(&[gate, x]);
    let (gt, xt) = (gate.value.clone(), x.value.clone());
    Ok(tape.push(value, parents, move |g| {
        let gd = g.data();
        let mut out = Vec::new();
        if mask[0] {
            let xd = xt.data();
            let mut dgate = vec![0.0; gs.numel()];
            for n in 0..xs.n {
                for c in 0..xs.c {
                    let base = (n * xs.c + c) * hw;
                    let mut acc = 0.0;
                    for i in 0..hw {
                        acc += gd[base + i] * xd[base + i];
                    }
                    dgate[n * xs.c + c] = acc;
                }
            }
            out.push(Tensor::new(gs, dgate));
        }
        if mask[1] {
            let gtd = gt.data();
            let mut dx = vec![0.0; xs.numel()];
            for n in 0..xs.n {
                for c in 0..xs.c {
                    let gv = gtd[n * xs.c + c];
                    let base = (n * xs.c + c) * hw;
                    for i in 0..hw {
                        dx[base + i] = gv * gd[base + i];
                    }
                }
            }
            out.push(Tensor::new(xs, dx));
        }
        out
    }))
}

/// Multiply a per-position gate [N,1,H,W] into a map [N,C,H,W].
pub fn mul_spatial_gate(tape: &mut Tape, gate: &Var, x: &Var) -> Result<Var> {
    let (gs, xs) = (gate.shape(), x.shape());
    if gs.n != xs.n || gs.c != 1 || gs.h != xs.h || gs.w != xs.w {
        return Err(Error::shape(
            "mul_spatial_gate",
            format!("gate {gs} does not broadcast over {xs}"),
        ));
    }
    let hw = xs.h * xs.w;
    let (gd, xd) = (gate.value.data(), x.value.data());
    let mut out = vec![0.0; xs.numel()];
    for n in 0..xs.n {
        for c in 0..xs.c {
            let base = (n * xs.c + c) * hw;
            let gbase = n * hw;
            for i in 0..hw {
                out[base + i] = gd[gbase + i] * xd[base + i];
            }
        }
    }
    let value = Tensor::new(xs, out);
    let (parents, mask) = parent_list(&[gate, x]);
    let (gt, xt) = (gate.value.clone(), x.value.clone());
    Ok(tape.push(value, parents, move |g| {
        let gd = g.data();
        let mut out = Vec::new();
        if mask[0] {
            let xd = xt.data();
            let mut dgate = vec![0.0; gs.numel()];
            for n in 0..xs.n {
                for c in 0..xs.c {
                    let base = (n * xs.c + c) * hw;
                    let gbase = n * hw;
                    for i in 0..hw {
                        dgate[gbase + i] += gd[base + i] * xd[base + i];
                    }
                }
            }
            out.push(Tensor::new(gs, dgate));
        }
        if mask[1] {
            let gtd = gt.data();
            let mut dx = vec![0.0; xs.numel()];
            for n in 0..xs.n {
                for c in 0..xs.c {
                    let base = (n * xs.c + c) * hw;
                    let gbase = n * hw;
                    for i in 0..hw {
                        dx[base + i] = gtd[gbase + i] * gd[base + i];
                    }
                }
            }
            out.push(Tensor::new(xs, dx));
        }
        out
    }))
}

// ── structure ───────────────────────────────────────────────────────────

/// Channel-wise concatenation; part order is preserved and the gradient
/// splits back exactly.
pub fn concat_channels(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    if parts.is_empty() {
        return Err(Error::shape("concat_channels", "no parts given".to_string()));
    }
    let first = parts[0].shape();
    let mut total_c = 0;
    for (i, p) in parts.iter().enumerate() {
        let s = p.shape();
        if s.n != first.n || s.h != first.h || s.w != first.w {
            return Err(Error::shape(
                "concat_channels",
                format!("part {i} has {s}, expected N,H,W of {first}"),
            ));
        }
        total_c += s.c;
    }
    let os = Shape::new(first.n, total_c, first.h, first.w);
    let hw = first.h * first.w;
    let mut out = vec![0.0; os.numel()];
    let mut coff = 0;
    // (channel offset, channel count) for each part that wants a gradient
    let mut grad_slices: Vec<(usize, usize)> = Vec::new();
    for p in parts {
        let s = p.shape();
        let pd = p.value.data();
        for n in 0..s.n {
            let dst = (n * total_c + coff) * hw;
            let src = n * s.c * hw;
            out[dst..dst + s.c * hw].copy_from_slice(&pd[src..src + s.c * hw]);
        }
        if p.node.is_some() {
            grad_slices.push((coff, s.c));
        }
        coff += s.c;
    }
    let value = Tensor::new(os, out);
    let parents: Vec<NodeId> = parts.iter().filter_map(|p| p.node).collect();
    Ok(tape.push(value, parents, move |g| {
        let gd = g.data();
        grad_slices
            .iter()
            .map(|&(off, ch)| {
                let ps = Shape::new(os.n, ch, os.h, os.w);
                let mut part = vec![0.0; ps.numel()];
                for n in 0..os.n {
                    let src = (n * total_c + off) * hw;
                    let dst = n * ch * hw;
                    part[dst..dst + ch * hw].copy_from_slice(&gd[src..src + ch * hw]);
                }
                Tensor::new(ps, part)
            })
            .collect()
    }))
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_nearest2(tape: &mut Tape, x: &Var) -> Var {
    let s = x.shape();
    let os = Shape::new(s.n, s.c, s.h * 2, s.w * 2);
    let xd = x.value.data();
    let mut out = vec![0.0; os.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            for h in 0..s.h {
                for w in 0..s.w {
                    let v = xd[s.index(n, c, h, w)];
                    out[os.index(n, c, 2 * h, 2 * w)] = v;
                    out[os.index(n, c, 2 * h, 2 * w + 1)] = v;
                    out[os.index(n, c, 2 * h + 1, 2 * w)] = v;
                    out[os.index(n, c, 2 * h + 1, 2 * w + 1)] = v;
                }
            }
        }
    }
    let value = Tensor::new(os, out);
    let Some(id) = x.node else {
        return Var::constant(value);
    };
    tape.push(value, vec![id], move |g| {
        let gd = g.data();
        let mut dx = vec![0.0; s.numel()];
        for n in 0..s.n {
            for c in 0..s.c {
                for h in 0..s.h {
                    for w in 0..s.w {
                        dx[s.index(n, c, h, w)] = gd[os.index(n, c, 2 * h, 2 * w)]
                            + gd[os.index(n, c, 2 * h, 2 * w + 1)]
                            + gd[os.index(n, c, 2 * h + 1, 2 * w)]
                            + gd[os.index(n, c, 2 * h + 1, 2 * w + 1)];
                    }
                }
            }
        }
        vec![Tensor::new(s, dx)]
    })
}

// ── pooling ─────────────────────────────────────────────────────────────

/// Mean over H,W per channel: [N,C,H,W] -> [N,C,1,1].
pub fn global_avg_pool(tape: &mut Tape, x: &Var) -> Var {
    let s = x.shape();
    let hw = (s.h * s.w) as f64;
    let os = Shape::new(s.n, s.c, 1, 1);
    let xd = x.value.data();
    let mut out = vec![0.0; os.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.h * s.w;
            out[n * s.c + c] = xd[base..base + s.h * s.w].iter().sum::<f64>() / hw;
        }
    }
    let value = Tensor::new(os, out);
    let Some(id) = x.node else {
        return Var::constant(value);
    };
    tape.push(value, vec![id], move |g| {
        let gd = g.data();
        let mut dx = vec![0.0; s.numel()];
        for n in 0..s.n {
            for c in 0..s.c {
                let gv = gd[n * s.c + c] / hw;
                let base = (n * s.c + c) * s.h * s.w;
                for i in 0..s.h * s.w {
                    dx[base + i] = gv;
                }
            }
        }
        vec![Tensor::new(s, dx)]
    })
}

/// Max over H,W per channel; ties route the gradient to the first maximum
/// in row-major scan order.
pub fn global_max_pool(tape: &mut Tape, x: &Var) -> Var {
    let s = x.shape();
    let os = Shape::new(s.n, s.c, 1, 1);
    let xd = x.value.data();
    let mut out = vec![0.0; os.numel()];
    let mut argmax = vec![0usize; os.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.h * s.w;
            let mut best = f64::NEG_INFINITY;
            let mut besti = 0;
            for i in 0..s.h * s.w {
                if xd[base + i] > best {
                    best = xd[base + i];
                    besti = i;
                }
            }
            out[n * s.c + c] = best;
            argmax[n * s.c + c] = besti;
        }
    }
    let value = Tensor::new(os, out);
    let Some(id) = x.node else {
        return Var::constant(value);
    };
    tape.push(value, vec![id], move |g| {
        let gd = g.data();
        let mut dx = vec![0.0; s.numel()];
        for n in 0..s.n {
            for c in 0..s.c {
                let base = (n * s.c + c) * s.h * s.w;
                dx[base + argmax[n * s.c + c]] = gd[n * s.c + c];
            }
        }
        vec![Tensor::new(s, dx)]
    })
}

/// Mean over channels: [N,C,H,W] -> [N,1,H,W].
pub fn channel_mean(tape: &mut Tape, x: &Var) -> Var {
    let s = x.shape();
    let os = Shape::new(s.n, 1, s.h, s.w);
    let xd = x.value.data();
    let cf = s.c as f64;
    let mut out = vec![0.0; os.numel()];
    for n in 0..s.n {
        for h in 0..s.h {
            for w in 0..s.w {
                let mut acc = 0.0;
                for c in 0..s.c {
                    acc += xd[s.index(n, c, h, w)];
                }
                out[os.index(n, 0, h, w)] = acc / cf;
            }
        }
    }
    let value = Tensor::new(os, out);
    let Some(id) = x.node else {
        return Var::constant(value);
    };
    tape.push(value, vec![id], move |g| {
        let gd = g.data();
        let mut dx = vec![0.0; s.numel()];
        for n in 0..s.n {
            for h in 0..s.h {
                for w in 0..s.w {
                    let gv = gd[os.index(n, 0, h, w)] / cf;
                    for c in 0..s.c {
                        dx[s.index(n, c, h, w)] = gv;
                    }
                }
            }
        }
        vec![Tensor::new(s, dx)]
    })
}

/// Max over channels; first-channel tie-break.
pub fn channel_max(tape: &mut Tape, x: &Var) -> Var {
    let s = x.shape();
    let os = Shape::new(s.n, 1, s.h, s.w);
    let xd = x.value.data();
    let mut out = vec![0.0; os.numel()];
    let mut argmax = vec![0usize; os.numel()];
    for n in 0..s.n {
        for h in 0..s.h {
            for w in 0..s.w {
                let mut best = f64::NEG_INFINITY;
                let mut bestc = 0;
                for c in 0..s.c {
                    let v = xd[s.index(n, c, h, w)];
                    if v > best {
                        best = v;
                        bestc = c;
                    }
                }
                out[os.index(n, 0, h, w)] = best;
                argmax[os.index(n, 0, h, w)] = bestc;
            }
        }
    }
    let value = Tensor::new(os, out);
    let Some(id) = x.node else {
        return Var::constant(value);
    };
    tape.push(value, vec![id], move |g| {
        let gd = g.data();
        let mut dx = vec![0.0; s.numel()];
        for n in 0..s.n {
            for h in 0..s.h {
                for w in 0..s.w {
                    let c = argmax[os.index(n, 0, h, w)];
                    dx[s.index(n, c, h, w)] = gd[os.index(n, 0, h, w)];
                }
            }
        }
        vec![Tensor::new(s, dx)]
    })
}

// ── reductions ──────────────────────────────────────────────────────────

pub fn sum_all(tape: &mut Tape, x: &Var) -> Var {
    let s = x.shape();
    let total: f64 = x.value.data().iter().sum();
    let value = Tensor::scalar(total);
    let Some(id) = x.node else {
        return Var::constant(value);
    };
    tape.push(value, vec![id], move |g| vec![Tensor::full(s, g.item())])
}

pub fn mean_all(tape: &mut Tape, x: &Var) -> Var {
    let s = x.shape();
    let denom = s.numel() as f64;
    let total: f64 = x.value.data().iter().sum();
    let value = Tensor::scalar(total / denom);
    let Some(id) = x.node else {
        return Var::constant(value);
    };
    tape.push(value, vec![id], move |g| {
        vec![Tensor::full(s, g.item() / denom)]
    })
}

/// Anisotropic total variation: mean |x[h+1,w] - x[h,w]| plus
/// mean |x[h,w+1] - x[h,w]|, each mean over its own difference count.
/// 1x1 spatial input yields 0 by definition.
pub fn total_variation(tape: &mut Tape, x: &Var) -> Var {
    let s = x.shape();
    let xd = x.value.data();
    let cnt_v = s.n * s.c * s.h.saturating_sub(1) * s.w;
    let cnt_h = s.n * s.c * s.h * s.w.saturating_sub(1);
    let mut sum_v = 0.0;
    let mut sum_h = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            for h in 0..s.h {
                for w in 0..s.w {
                    let v = xd[s.index(n, c, h, w)];
                    if h + 1 < s.h {
                        sum_v += (xd[s.index(n, c, h + 1, w)] - v).abs();
                    }
                    if w + 1 < s.w {
                        sum_h += (xd[s.index(n, c, h, w + 1)] - v).abs();
                    }
                }
            }
        }
    }
    let tv_v = if cnt_v > 0 { sum_v / cnt_v as f64 } else { 0.0 };
    let tv_h = if cnt_h > 0 { sum_h / cnt_h as f64 } else { 0.0 };
    let value = Tensor::scalar(tv_v + tv_h);
    let Some(id) = x.node else {
        return Var::constant(value);
    };
    let xin = x.value.clone();
    tape.push(value, vec![id], move |g| {
        let gv = g.item();
        let xd = xin.data();
        let wv = if cnt_v > 0 { gv / cnt_v as f64 } else { 0.0 };
        let wh = if cnt_h > 0 { gv / cnt_h as f64 } else { 0.0 };
        let mut dx = vec![0.0; s.numel()];
        for n in 0..s.n {
            for c in 0..s.c {
                for h in 0..s.h {
                    for w in 0..s.w {
                        let i = s.index(n, c, h, w);
                        if h + 1 < s.h {
                            let j = s.index(n, c, h + 1, w);
                            let sg = sign(xd[j] - xd[i]);
                            dx[j] += wv * sg;
                            dx[i] -= wv * sg;
                        }
                        if w + 1 < s.w {
                            let j = s.index(n, c, h, w + 1);
                            let sg = sign(xd[j] - xd[i]);
                            dx[j] += wh * sg;
                            dx[i] -= wh * sg;
                        }
                    }
                }
            }
        }
        vec![Tensor::new(s, dx)]
    })
}
