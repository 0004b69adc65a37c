//! Central finite-difference verification of every backward rule.
//!
//! Each check places its inputs and parameters in a [`ParamBank`], builds a
//! scalar loss through a [`Session`], and compares the tape gradients against
//! two-sided finite differences element by element. The relative error for
//! element i is |a_i - n_i| / max(1, |a_i|, |n_i|); an op passes when the
//! worst element stays within [`TOLERANCE`].
//!
//! Inputs are sampled away from the kinks of |x|, leaky units, pooling
//! argmax switches and the bilinear integer lattice, so the differences
//! measure the rule and not a non-differentiable point.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionModule;
use crate::deform;
use crate::error::{Error, Result};
use crate::losses;
use crate::networks::Discriminator;
use crate::ops;
use crate::optim::{ParamBank, Session};
use crate::tape::Var;
use crate::tensor::{Shape, Tensor};

pub const TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;
/// Finer step for whole-network compositions: the piecewise-linear leaky
/// units make the crossing window proportional to the step size.
pub const FD_STEP_COMPOSITE: f64 = 1e-6;

/// Outcome of one op's check.
#[derive(Debug, Clone)]
pub struct OpReport {
    pub op: String,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub pass: bool,
}

impl std::fmt::Display for OpReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<24} max_rel_err {:>12.3e}  worst {}[{}]  {}",
            self.op,
            self.max_rel_err,
            self.worst_param,
            self.worst_index,
            if self.pass { "ok" } else { "FAIL" }
        )
    }
}

/// Compare tape gradients against central differences for every element of
/// the named bank entries.
pub fn check(
    name: &str,
    bank: &ParamBank,
    perturb: &[&str],
    step: f64,
    loss_fn: impl Fn(&mut Session, &ParamBank) -> Result<Var>,
) -> Result<OpReport> {
    // analytic gradients
    let mut session = Session::new();
    let loss = loss_fn(&mut session, bank)?;
    let grads = session.tape.backward(&loss)?;

    let eval = |bank: &ParamBank| -> Result<f64> {
        let mut s = Session::new();
        Ok(loss_fn(&mut s, bank)?.value.item())
    };

    let mut worst = OpReport {
        op: name.to_string(),
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        pass: true,
    };
    for &pname in perturb {
        let base = bank.get(pname).clone();
        let analytic = session
            .touched(pname)
            .and_then(|v| grads.of(v))
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(base.shape()));
        for i in 0..base.numel() {
            let x = base.data()[i];
            let mut plus = bank.clone();
            plus.set(pname, base.with_value_at(i, x + step));
            let mut minus = bank.clone();
            minus.set(pname, base.with_value_at(i, x - step));
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > worst.max_rel_err {
                worst.max_rel_err = rel;
                worst.worst_param = pname.to_string();
                worst.worst_index = i;
            }
        }
    }
    worst.pass = worst.max_rel_err <= TOLERANCE;
    Ok(worst)
}

// ── input samplers ──────────────────────────────────────────────────────

fn smooth(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor {
    Tensor::rand_uniform(shape, -2.0, 2.0, rng)
}

/// Magnitudes in [margin, 2] with random sign; safe for |x|-style kinks.
fn kink_free(rng: &mut ChaCha8Rng, shape: Shape, margin: f64) -> Tensor {
    let data = (0..shape.numel())
        .map(|_| {
            let mag = rng.gen_range(margin..2.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data)
}

/// A shuffled linear ramp: all values distinct with gaps far above the FD
/// step, so pooling argmax choices cannot flip.
fn well_separated(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor {
    let n = shape.numel();
    let mut vals: Vec<f64> = (0..n)
        .map(|i| -1.0 + 2.0 * i as f64 / (n.max(2) - 1) as f64)
        .collect();
    vals.shuffle(rng);
    Tensor::new(shape, vals)
}

fn bank_of(entries: Vec<(&str, Tensor)>) -> ParamBank {
    let mut bank = ParamBank::new();
    for (name, t) in entries {
        bank.insert(name, t).expect("unique gradcheck names");
    }
    bank
}

fn proj_loss(s: &mut Session, y: &Var, proj: &Tensor) -> Result<Var> {
    let p = Var::constant(proj.clone());
    let weighted = ops::mul(&mut s.tape, y, &p)?;
    Ok(ops::sum_all(&mut s.tape, &weighted))
}

// ── suites ──────────────────────────────────────────────────────────────

/// Which op family to verify.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Module {
    Tensor,
    Deform,
    Attention,
    Losses,
}

impl Module {
    pub fn all() -> [Module; 4] {
        [Module::Tensor, Module::Deform, Module::Attention, Module::Losses]
    }

    pub fn parse(s: &str) -> Result<Module> {
        match s {
            "tensor" => Ok(Module::Tensor),
            "deform" => Ok(Module::Deform),
            "attention" => Ok(Module::Attention),
            "losses" => Ok(Module::Losses),
            _ => Err(Error::Config(format!(
                "unknown gradcheck module {s:?}; expected tensor, deform, attention or losses"
            ))),
        }
    }
}

impl std::fmt::Display for Module {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Module::Tensor => "tensor",
            Module::Deform => "deform",
            Module::Attention => "attention",
            Module::Losses => "losses",
        })
    }
}

pub fn run_module(module: Module, seed: u64) -> Result<Vec<OpReport>> {
    match module {
        Module::Tensor => tensor_suite(seed),
        Module::Deform => deform_suite(seed),
        Module::Attention => attention_suite(seed),
        Module::Losses => losses_suite(seed),
    }
}

pub fn run_all(seed: u64) -> Result<Vec<OpReport>> {
    let mut out = Vec::new();
    for m in Module::all() {
        out.extend(run_module(m, seed)?);
    }
    Ok(out)
}

fn tensor_suite(seed: u64) -> Result<Vec<OpReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15));
    let mut reports = Vec::new();

    // conv2d, stride 1 and stride 2
    {
        let bank = bank_of(vec![
            ("x", smooth(&mut rng, Shape::new(2, 3, 5, 5))),
            ("w", smooth(&mut rng, Shape::new(4, 3, 3, 3))),
            ("b", smooth(&mut rng, Shape::new(1, 4, 1, 1))),
        ]);
        let proj = smooth(&mut rng, Shape::new(2, 4, 5, 5));
        reports.push(check("conv2d", &bank, &["x", "w", "b"], FD_STEP, move |s, bank| {
            let x = s.param(bank, "x");
            let w = s.param(bank, "w");
            let b = s.param(bank, "b");
            let y = ops::conv2d(&mut s.tape, &x, &w, &b, 1, 1)?;
            proj_loss(s, &y, &proj)
        })?);
    }
    {
        let bank = bank_of(vec![
            ("x", smooth(&mut rng, Shape::new(1, 2, 6, 6))),
            ("w", smooth(&mut rng, Shape::new(3, 2, 4, 4))),
            ("b", smooth(&mut rng, Shape::new(1, 3, 1, 1))),
        ]);
        let proj = smooth(&mut rng, Shape::new(1, 3, 3, 3));
        reports.push(check(
            "conv2d(stride2)",
            &bank,
            &["x", "w", "b"],
            FD_STEP,
            move |s, bank| {
                let x = s.param(bank, "x");
                let w = s.param(bank, "w");
                let b = s.param(bank, "b");
                let y = ops::conv2d(&mut s.tape, &x, &w, &b, 2, 1)?;
                proj_loss(s, &y, &proj)
            },
        )?);
    }

    // batch_norm through the statistics
    {
        let bank = bank_of(vec![
            ("x", smooth(&mut rng, Shape::new(2, 3, 4, 4))),
            ("gamma", smooth(&mut rng, Shape::new(1, 3, 1, 1))),
            ("beta", smooth(&mut rng, Shape::new(1, 3, 1, 1))),
        ]);
        let proj = smooth(&mut rng, Shape::new(2, 3, 4, 4));
        reports.push(check(
            "batch_norm",
            &bank,
            &["x", "gamma", "beta"],
            FD_STEP,
            move |s, bank| {
                let x = s.param(bank, "x");
                let g = s.param(bank, "gamma");
                let b = s.param(bank, "beta");
                let y = ops::batch_norm(&mut s.tape, &x, &g, &b, 1e-5)?;
                proj_loss(s, &y, &proj)
            },
        )?);
    }

    // activations
    for (name, kind, guarded) in [
        ("leaky_relu", ops::Activation::LeakyRelu, true),
        ("relu", ops::Activation::Relu, true),
        ("sigmoid", ops::Activation::Sigmoid, false),
        ("tanh", ops::Activation::Tanh, false),
    ] {
        let shape = Shape::new(2, 2, 4, 4);
        let x = if guarded {
            kink_free(&mut rng, shape, 0.1)
        } else {
            smooth(&mut rng, shape)
        };
        let bank = bank_of(vec![("x", x)]);
        let proj = smooth(&mut rng, shape);
        reports.push(check(name, &bank, &["x"], FD_STEP, move |s, bank| {
            let x = s.param(bank, "x");
            let y = ops::activation(&mut s.tape, kind, &x);
            proj_loss(s, &y, &proj)
        })?);
    }

    // log_sigmoid
    {
        let shape = Shape::new(1, 2, 3, 3);
        let bank = bank_of(vec![("x", smooth(&mut rng, shape))]);
        let proj = smooth(&mut rng, shape);
        reports.push(check("log_sigmoid", &bank, &["x"], FD_STEP, move |s, bank| {
            let x = s.param(bank, "x");
            let y = ops::log_sigmoid(&mut s.tape, &x);
            proj_loss(s, &y, &proj)
        })?);
    }

    // abs
    {
        let shape = Shape::new(1, 2, 4, 4);
        let bank = bank_of(vec![("x", kink_free(&mut rng, shape, 0.1))]);
        let proj = smooth(&mut rng, shape);
        reports.push(check("abs", &bank, &["x"], FD_STEP, move |s, bank| {
            let x = s.param(bank, "x");
            let y = ops::abs(&mut s.tape, &x);
            proj_loss(s, &y, &proj)
        })?);
    }

    // concat with arithmetic on top (gradient splitting)
    {
        let bank = bank_of(vec![
            ("a", smooth(&mut rng, Shape::new(1, 2, 3, 3))),
            ("b", smooth(&mut rng, Shape::new(1, 1, 3, 3))),
            ("c", smooth(&mut rng, Shape::new(1, 3, 3, 3))),
        ]);
        let proj = smooth(&mut rng, Shape::new(1, 3, 3, 3));
        reports.push(check(
            "concat_channels",
            &bank,
            &["a", "b", "c"],
            FD_STEP,
            move |s, bank| {
                let a = s.param(bank, "a");
                let b = s.param(bank, "b");
                let c = s.param(bank, "c");
                let joined = ops::concat_channels(&mut s.tape, &[a, b])?;
                let prod = ops::mul(&mut s.tape, &joined, &c)?;
                proj_loss(s, &prod, &proj)
            },
        )?);
    }

    // broadcast gates
    {
        let bank = bank_of(vec![
            ("gate", smooth(&mut rng, Shape::new(2, 3, 1, 1))),
            ("x", smooth(&mut rng, Shape::new(2, 3, 4, 4))),
        ]);
        let proj = smooth(&mut rng, Shape::new(2, 3, 4, 4));
        reports.push(check(
            "mul_channel_gate",
            &bank,
            &["gate", "x"],
            FD_STEP,
            move |s, bank| {
                let g = s.param(bank, "gate");
                let x = s.param(bank, "x");
                let y = ops::mul_channel_gate(&mut s.tape, &g, &x)?;
                proj_loss(s, &y, &proj)
            },
        )?);
    }
    {
        let bank = bank_of(vec![
            ("gate", smooth(&mut rng, Shape::new(2, 1, 4, 4))),
            ("x", smooth(&mut rng, Shape::new(2, 3, 4, 4))),
        ]);
        let proj = smooth(&mut rng, Shape::new(2, 3, 4, 4));
        reports.push(check(
            "mul_spatial_gate",
            &bank,
            &["gate", "x"],
            FD_STEP,
            move |s, bank| {
                let g = s.param(bank, "gate");
                let x = s.param(bank, "x");
                let y = ops::mul_spatial_gate(&mut s.tape, &g, &x)?;
                proj_loss(s, &y, &proj)
            },
        )?);
    }

    // pooling and reductions
    {
        let shape = Shape::new(2, 3, 4, 4);
        let bank = bank_of(vec![("x", well_separated(&mut rng, shape))]);
        let proj = smooth(&mut rng, Shape::new(2, 3, 1, 1));
        reports.push(check("global_avg_pool", &bank, &["x"], FD_STEP, {
            let proj = proj.clone();
            move |s, bank| {
                let x = s.param(bank, "x");
                let y = ops::global_avg_pool(&mut s.tape, &x);
                proj_loss(s, &y, &proj)
            }
        })?);
        reports.push(check("global_max_pool", &bank, &["x"], FD_STEP, move |s, bank| {
            let x = s.param(bank, "x");
            let y = ops::global_max_pool(&mut s.tape, &x);
            proj_loss(s, &y, &proj)
        })?);
        let proj2 = smooth(&mut rng, Shape::new(2, 1, 4, 4));
        reports.push(check("channel_mean", &bank, &["x"], FD_STEP, {
            let proj2 = proj2.clone();
            move |s, bank| {
                let x = s.param(bank, "x");
                let y = ops::channel_mean(&mut s.tape, &x);
                proj_loss(s, &y, &proj2)
            }
        })?);
        reports.push(check("channel_max", &bank, &["x"], FD_STEP, move |s, bank| {
            let x = s.param(bank, "x");
            let y = ops::channel_max(&mut s.tape, &x);
            proj_loss(s, &y, &proj2)
        })?);
    }

    // upsample
    {
        let bank = bank_of(vec![("x", smooth(&mut rng, Shape::new(1, 2, 3, 3)))]);
        let proj = smooth(&mut rng, Shape::new(1, 2, 6, 6));
        reports.push(check("upsample_nearest2", &bank, &["x"], FD_STEP, move |s, bank| {
            let x = s.param(bank, "x");
            let y = ops::upsample_nearest2(&mut s.tape, &x);
            proj_loss(s, &y, &proj)
        })?);
    }

    // softmax over channels
    {
        let shape = Shape::new(1, 4, 2, 2);
        let bank = bank_of(vec![("x", smooth(&mut rng, shape))]);
        let proj = smooth(&mut rng, shape);
        reports.push(check("softmax_channels", &bank, &["x"], FD_STEP, move |s, bank| {
            let x = s.param(bank, "x");
            let y = ops::softmax_channels(&mut s.tape, &x);
            proj_loss(s, &y, &proj)
        })?);
    }

    // total variation
    {
        let shape = Shape::new(1, 2, 5, 5);
        let bank = bank_of(vec![("x", well_separated(&mut rng, shape))]);
        reports.push(check("total_variation", &bank, &["x"], FD_STEP, move |s, bank| {
            let x = s.param(bank, "x");
            Ok(ops::total_variation(&mut s.tape, &x))
        })?);
    }

    // composite: conv -> batch_norm -> activation -> sum
    {
        let bank = bank_of(vec![
            ("x", smooth(&mut rng, Shape::new(2, 2, 6, 6))),
            ("w", smooth(&mut rng, Shape::new(3, 2, 3, 3))),
            ("b", smooth(&mut rng, Shape::new(1, 3, 1, 1))),
            ("gamma", smooth(&mut rng, Shape::new(1, 3, 1, 1))),
            ("beta", smooth(&mut rng, Shape::new(1, 3, 1, 1))),
        ]);
        reports.push(check(
            "conv_bn_act_sum",
            &bank,
            &["x", "w", "b", "gamma", "beta"],
            FD_STEP,
            move |s, bank| {
                let x = s.param(bank, "x");
                let w = s.param(bank, "w");
                let b = s.param(bank, "b");
                let gamma = s.param(bank, "gamma");
                let beta = s.param(bank, "beta");
                let y = ops::conv2d(&mut s.tape, &x, &w, &b, 1, 1)?;
                let y = ops::batch_norm(&mut s.tape, &y, &gamma, &beta, 1e-5)?;
                let y = ops::tanh(&mut s.tape, &y);
                Ok(ops::sum_all(&mut s.tape, &y))
            },
        )?);
    }

    Ok(reports)
}

fn deform_suite(seed: u64) -> Result<Vec<OpReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545f4914f6cdd1d));
    let mut reports = Vec::new();

    // offset tensors sampled well inside a cell, away from the lattice
    let safe_offsets = |shape: Shape, rng: &mut ChaCha8Rng| -> Tensor {
        let data = (0..shape.numel())
            .map(|_| {
                let mag = rng.gen_range(0.2..0.45);
                if rng.gen_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        Tensor::new(shape, data)
    };

    // bilinear sampling path: 1x1 kernel, offsets as direct leaves
    {
        let (oh, ow) = ops::conv_output_hw(5, 5, 1, 1, 1, 0)?;
        let bank = bank_of(vec![
            ("x", smooth(&mut rng, Shape::new(1, 3, 5, 5))),
            ("w", smooth(&mut rng, Shape::new(2, 3, 1, 1))),
            ("b", smooth(&mut rng, Shape::new(1, 2, 1, 1))),
            ("off", safe_offsets(Shape::new(1, 2, oh, ow), &mut rng)),
        ]);
        let proj = smooth(&mut rng, Shape::new(1, 2, oh, ow));
        reports.push(check(
            "bilinear_sample",
            &bank,
            &["x", "w", "b", "off"],
            FD_STEP,
            move |s, bank| {
                let x = s.param(bank, "x");
                let w = s.param(bank, "w");
                let b = s.param(bank, "b");
                let off = s.param(bank, "off");
                let y = deform::deform_conv2d(&mut s.tape, &x, &w, &b, &off, 1, 0)?;
                proj_loss(s, &y, &proj)
            },
        )?);
    }

    // full deformable convolution with leaf offsets
    {
        let (oh, ow) = ops::conv_output_hw(6, 6, 3, 3, 1, 1)?;
        let bank = bank_of(vec![
            ("x", smooth(&mut rng, Shape::new(1, 2, 6, 6))),
            ("w", smooth(&mut rng, Shape::new(3, 2, 3, 3))),
            ("b", smooth(&mut rng, Shape::new(1, 3, 1, 1))),
            ("off", safe_offsets(Shape::new(1, 18, oh, ow), &mut rng)),
        ]);
        let proj = smooth(&mut rng, Shape::new(1, 3, oh, ow));
        reports.push(check(
            "deform_conv2d",
            &bank,
            &["x", "w", "b", "off"],
            FD_STEP,
            move |s, bank| {
                let x = s.param(bank, "x");
                let w = s.param(bank, "w");
                let b = s.param(bank, "b");
                let off = s.param(bank, "off");
                let y = deform::deform_conv2d(&mut s.tape, &x, &w, &b, &off, 1, 1)?;
                proj_loss(s, &y, &proj)
            },
        )?);
    }

    // offset-predictor path: offsets produced by a conv whose parameters are
    // perturbed; weights scaled so every sampling point stays off-lattice
    {
        let off_w_data: Vec<f64> = (0..18 * 2 * 9)
            .map(|_| {
                let mag: f64 = rng.gen_range(0.001..0.003);
                if rng.gen_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        let off_b_data: Vec<f64> = (0..18).map(|_| rng.gen_range(0.25..0.35)).collect();
        let bank = bank_of(vec![
            ("x", smooth(&mut rng, Shape::new(1, 2, 6, 6))),
            ("w", smooth(&mut rng, Shape::new(3, 2, 3, 3))),
            ("b", smooth(&mut rng, Shape::new(1, 3, 1, 1))),
            ("off_w", Tensor::new(Shape::new(18, 2, 3, 3), off_w_data)),
            ("off_b", Tensor::new(Shape::new(1, 18, 1, 1), off_b_data)),
        ]);
        let proj = smooth(&mut rng, Shape::new(1, 3, 6, 6));
        reports.push(check(
            "deform_offset_path",
            &bank,
            &["x", "w", "b", "off_w", "off_b"],
            FD_STEP,
            move |s, bank| {
                let x = s.param(bank, "x");
                let w = s.param(bank, "w");
                let b = s.param(bank, "b");
                let ow = s.param(bank, "off_w");
                let ob = s.param(bank, "off_b");
                let offsets = ops::conv2d(&mut s.tape, &x, &ow, &ob, 1, 1)?;
                let y = deform::deform_conv2d(&mut s.tape, &x, &w, &b, &offsets, 1, 1)?;
                proj_loss(s, &y, &proj)
            },
        )?);
    }

    Ok(reports)
}

fn attention_suite(seed: u64) -> Result<Vec<OpReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xd1342543de82ef95));
    let mut reports = Vec::new();

    let mut bank = ParamBank::new();
    let module = AttentionModule::init(&mut bank, &mut rng, "am", 8, 4)?;
    bank.insert("f", well_separated(&mut rng, Shape::new(2, 8, 4, 4)))?;
    let names: Vec<String> = module
        .param_names()
        .into_iter()
        .chain(["f".to_string()])
        .collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();

    {
        let proj = smooth(&mut rng, Shape::new(2, 8, 1, 1));
        let module = &module;
        reports.push(check(
            "channel_attention",
            &bank,
            &name_refs,
            FD_STEP,
            move |s, bank| {
                let f = s.param(bank, "f");
                let gate = module.channel_attention(s, bank, &f)?;
                proj_loss(s, &gate, &proj)
            },
        )?);
    }
    {
        let proj = smooth(&mut rng, Shape::new(2, 1, 4, 4));
        let module = &module;
        reports.push(check(
            "spatial_attention",
            &bank,
            &name_refs,
            FD_STEP,
            move |s, bank| {
                let f = s.param(bank, "f");
                let gate = module.spatial_attention(s, bank, &f)?;
                proj_loss(s, &gate, &proj)
            },
        )?);
    }
    {
        let proj = smooth(&mut rng, Shape::new(2, 8, 4, 4));
        let module = &module;
        reports.push(check(
            "attention_refine",
            &bank,
            &name_refs,
            FD_STEP,
            move |s, bank| {
                let f = s.param(bank, "f");
                let out = module.refine(s, bank, &f)?;
                proj_loss(s, &out, &proj)
            },
        )?);
    }

    Ok(reports)
}

fn losses_suite(seed: u64) -> Result<Vec<OpReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e6c63d0876a7a35));
    let mut reports = Vec::new();

    // adversarial terms from logits
    {
        let shape = Shape::new(2, 1, 3, 3);
        let bank = bank_of(vec![
            ("real", smooth(&mut rng, shape)),
            ("fake", smooth(&mut rng, shape)),
        ]);
        reports.push(check(
            "d_loss",
            &bank,
            &["real", "fake"],
            FD_STEP,
            move |s, bank| {
                let r = s.param(bank, "real");
                let f = s.param(bank, "fake");
                losses::d_loss_from_logits(s, &r, &f)
            },
        )?);
        reports.push(check("g_loss", &bank, &["fake"], FD_STEP, move |s, bank| {
            let f = s.param(bank, "fake");
            losses::g_loss_from_logits(s, &f)
        })?);
    }

    // pixel L1 with the difference bounded away from zero
    {
        let shape = Shape::new(1, 3, 4, 4);
        let a = smooth(&mut rng, shape);
        let gap = kink_free(&mut rng, shape, 0.1);
        let b = a.add(&gap);
        let bank = bank_of(vec![("a", a), ("b", b)]);
        reports.push(check("pixel_l1", &bank, &["a", "b"], FD_STEP, move |s, bank| {
            let a = s.param(bank, "a");
            let b = s.param(bank, "b");
            losses::pixel_l1(s, &a, &b)
        })?);
    }

    // total variation as a loss
    {
        let bank = bank_of(vec![("img", well_separated(&mut rng, Shape::new(1, 3, 5, 5)))]);
        reports.push(check("tv_loss", &bank, &["img"], FD_STEP, move |s, bank| {
            let img = s.param(bank, "img");
            Ok(losses::tv_loss(s, &img))
        })?);
    }

    // adversarial pair through a real discriminator: gradient reaches the
    // discriminator parameters (d side) and the fake image (g side)
    {
        let mut bank = ParamBank::new();
        let d = Discriminator::init(&mut bank, &mut rng, "d", 3, 3, 4)?;
        // zero-initialized norm shifts park activations exactly on the leaky
        // kink (the innermost norm collapses to its beta); move them off it
        for name in bank.names().map(str::to_string).collect::<Vec<_>>() {
            if name.ends_with(".beta") || name.ends_with(".b") {
                let shape = bank.get(&name).shape();
                bank.set(&name, kink_free(&mut rng, shape, 0.1));
            }
        }
        bank.insert("cond", smooth(&mut rng, Shape::new(1, 3, 8, 8)))?;
        bank.insert("real", smooth(&mut rng, Shape::new(1, 3, 8, 8)))?;
        bank.insert("fake", smooth(&mut rng, Shape::new(1, 3, 8, 8)))?;
        let mut names: Vec<String> = bank
            .names()
            .filter(|n| n.starts_with("d."))
            .map(str::to_string)
            .collect();
        names.push("fake".to_string());
        let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let d_ref = &d;
        reports.push(check(
            "adv_loss_pair",
            &bank,
            &name_refs,
            FD_STEP_COMPOSITE,
            move |s, bank| {
                let cond = s.param(bank, "cond");
                let real = s.param(bank, "real");
                let fake = s.param(bank, "fake");
                let pair = losses::adv_loss_pair(s, bank, d_ref, &cond, &real, &fake)?;
                // check one joint scalar: d_loss + g_loss exercises both paths
                ops::add(&mut s.tape, &pair.d_loss, &pair.g_loss)
            },
        )?);
    }

    Ok(reports)
}

/// A deliberately wrong backward rule; the harness must flag it. Used by the
/// harness self-test and the CLI's `--sabotage` mode.
pub fn run_sabotaged(seed: u64) -> Result<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::new(1, 2, 3, 3);
    let bank = bank_of(vec![("x", smooth(&mut rng, shape))]);
    let proj = smooth(&mut rng, shape);
    check("sigmoid(sabotaged)", &bank, &["x"], FD_STEP, move |s, bank| {
        let x = s.param(bank, "x");
        let value = x.value.map(ops::sigmoid_scalar);
        let y = match x.node {
            None => Var::constant(value),
            Some(id) => {
                let saved = value.clone();
                // wrong by 2 percent
                s.tape.push(value, vec![id], move |g| {
                    vec![g.zip_map(&saved, |gi, yv| gi * yv * (1.0 - yv) * 1.02)]
                })
            }
        };
        proj_loss(s, &y, &proj)
    })
}
