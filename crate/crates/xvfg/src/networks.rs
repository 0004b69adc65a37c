//! Generators, patch discriminators, and the two-stage pipeline.
//!
//! Each generator is a U-shaped encoder-decoder: stride-2 4x4 convolutions
//! down, nearest-upsample plus 3x3 convolutions up, skip connections between
//! mirrored levels, a tanh image head in [-1,1], and an exposed feature map
//! (the penultimate decoder activation, at input resolution). When the
//! deformable toggle is on, the first encoder convolution (or, by
//! configuration, the last decoder convolution) is a deformable layer.
//!
//! Stage 1 turns the source image plus the target semantic map into a coarse
//! image and a semantic reconstruction; stage 2 refines the stage-1 feature
//! maps with attention gates and generates the final image. One semantic
//! generator serves both stages.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionModule;
use crate::deform::DeformConvLayer;
use crate::error::{Error, Result};
use crate::ops::{self, Activation};
use crate::optim::{ParamBank, Session};
use crate::tape::Var;
use crate::tensor::{Shape, Tensor};

const BN_EPS: f64 = 1e-5;

// ── layers ──────────────────────────────────────────────────────────────

struct Conv {
    w: String,
    b: String,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn init(
        bank: &mut ParamBank,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let layer = Conv {
            w: format!("{name}.w"),
            b: format!("{name}.b"),
            stride,
            pad,
        };
        bank.insert(
            &layer.w,
            Tensor::randn(Shape::new(cout, cin, k, k), 0.0, 0.02, rng),
        )?;
        bank.insert(&layer.b, Tensor::zeros(Shape::new(1, cout, 1, 1)))?;
        Ok(layer)
    }

    fn forward(&self, s: &mut Session, bank: &ParamBank, x: &Var) -> Result<Var> {
        let w = s.param(bank, &self.w);
        let b = s.param(bank, &self.b);
        ops::conv2d(&mut s.tape, x, &w, &b, self.stride, self.pad)
    }
}

struct Norm {
    gamma: String,
    beta: String,
}

impl Norm {
    fn init(bank: &mut ParamBank, rng: &mut impl Rng, name: &str, c: usize) -> Result<Self> {
        let layer = Norm {
            gamma: format!("{name}.gamma"),
            beta: format!("{name}.beta"),
        };
        bank.insert(
            &layer.gamma,
            Tensor::randn(Shape::new(1, c, 1, 1), 1.0, 0.02, rng),
        )?;
        bank.insert(&layer.beta, Tensor::zeros(Shape::new(1, c, 1, 1)))?;
        Ok(layer)
    }

    fn forward(&self, s: &mut Session, bank: &ParamBank, x: &Var) -> Result<Var> {
        let gamma = s.param(bank, &self.gamma);
        let beta = s.param(bank, &self.beta);
        ops::batch_norm(&mut s.tape, x, &gamma, &beta, BN_EPS)
    }
}

/// First layer of a U-net: plain or deformable convolution.
enum FrontConv {
    Plain(Conv),
    Deform(DeformConvLayer),
}

impl FrontConv {
    fn forward(&self, s: &mut Session, bank: &ParamBank, x: &Var) -> Result<Var> {
        match self {
            FrontConv::Plain(c) => c.forward(s, bank, x),
            FrontConv::Deform(d) => d.forward(s, bank, x),
        }
    }
}

// ── generator ───────────────────────────────────────────────────────────

/// Where the deformable convolution sits inside the U-net.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DeformPlacement {
    #[default]
    Off,
    /// The first encoder convolution (the default reading of "outermost").
    FirstEncoder,
    /// The last decoder convolution, the other outermost candidate.
    LastDecoder,
}

#[derive(Clone, Copy, Debug)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub feature_channels: usize,
    pub deform: DeformPlacement,
}

impl GeneratorConfig {
    /// Desk-scale default: depth 3, base 32, feature 64.
    pub fn desk(in_channels: usize, out_channels: usize) -> Self {
        GeneratorConfig {
            in_channels,
            out_channels,
            depth: 3,
            base_channels: 32,
            feature_channels: 64,
            deform: DeformPlacement::Off,
        }
    }
}

struct EncBlock {
    conv: FrontConv,
    norm: Option<Norm>,
}

struct DecBlock {
    conv: FrontConv,
    norm: Norm,
    skip: Option<usize>, // encoder level whose output is concatenated
}

pub struct Generator {
    pub cfg: GeneratorConfig,
    pub prefix: String,
    enc: Vec<EncBlock>,
    dec: Vec<DecBlock>,
    head: Conv,
}

impl Generator {
    pub fn init(
        bank: &mut ParamBank,
        rng: &mut impl Rng,
        prefix: &str,
        cfg: GeneratorConfig,
    ) -> Result<Self> {
        if cfg.depth == 0 {
            return Err(Error::Config("generator depth must be at least 1".into()));
        }
        let widths: Vec<usize> = (0..cfg.depth).map(|i| cfg.base_channels << i).collect();
        let mut enc = Vec::new();
        for (i, &cout) in widths.iter().enumerate() {
            let cin = if i == 0 { cfg.in_channels } else { widths[i - 1] };
            let name = format!("{prefix}.enc{i}");
            let conv = if i == 0 && cfg.deform == DeformPlacement::FirstEncoder {
                FrontConv::Deform(DeformConvLayer::init(bank, rng, &name, cin, cout, 4, 2, 1)?)
            } else {
                FrontConv::Plain(Conv::init(bank, rng, &name, cin, cout, 4, 2, 1)?)
            };
            let norm = if i == 0 {
                None
            } else {
                Some(Norm::init(bank, rng, &format!("{name}.bn"), cout)?)
            };
            enc.push(EncBlock { conv, norm });
        }
        let mut dec = Vec::new();
        let mut prev = widths[cfg.depth - 1];
        for j in 0..cfg.depth {
            let last = j == cfg.depth - 1;
            let (skip, cin, cout) = if last {
                (None, prev, cfg.feature_channels)
            } else {
                let level = cfg.depth - 2 - j;
                (Some(level), prev + widths[level], widths[level])
            };
            let name = format!("{prefix}.dec{j}");
            let conv = if last && cfg.deform == DeformPlacement::LastDecoder {
                FrontConv::Deform(DeformConvLayer::init(bank, rng, &name, cin, cout, 3, 1, 1)?)
            } else {
                FrontConv::Plain(Conv::init(bank, rng, &name, cin, cout, 3, 1, 1)?)
            };
            let norm = Norm::init(bank, rng, &format!("{name}.bn"), cout)?;
            dec.push(DecBlock { conv, norm, skip });
            prev = cout;
        }
        let head = Conv::init(
            bank,
            rng,
            &format!("{prefix}.head"),
            cfg.feature_channels,
            cfg.out_channels,
            3,
            1,
            1,
        )?;
        Ok(Generator {
            cfg,
            prefix: prefix.to_string(),
            enc,
            dec,
            head,
        })
    }

    /// Run the U-net. Returns the tanh image head and the feature map (the
    /// last decoder activation, `feature_channels` wide at input resolution).
    pub fn forward(&self, s: &mut Session, bank: &ParamBank, x: &Var) -> Result<(Var, Var)> {
        let xs = x.shape();
        let div = 1usize << self.cfg.depth;
        if xs.h % div != 0 || xs.w % div != 0 {
            return Err(Error::shape(
                "generator_forward",
                format!(
                    "input {xs} not divisible by 2^depth = {div} in H and W"
                ),
            ));
        }
        if xs.c != self.cfg.in_channels {
            return Err(Error::shape(
                "generator_forward",
                format!("input channels C={} but generator expects C={}", xs.c, self.cfg.in_channels),
            ));
        }
        let mut skips = Vec::with_capacity(self.enc.len());
        let mut h = x.clone();
        for block in &self.enc {
            let mut y = block.conv.forward(s, bank, &h)?;
            if let Some(norm) = &block.norm {
                y = norm.forward(s, bank, &y)?;
            }
            h = ops::activation(&mut s.tape, Activation::LeakyRelu, &y);
            skips.push(h.clone());
        }
        for block in &self.dec {
            let up = ops::upsample_nearest2(&mut s.tape, &h);
            let joined = match block.skip {
                Some(level) => ops::concat_channels(&mut s.tape, &[up, skips[level].clone()])?,
                None => up,
            };
            let y = block.conv.forward(s, bank, &joined)?;
            let y = block.norm.forward(s, bank, &y)?;
            h = ops::activation(&mut s.tape, Activation::Relu, &y);
        }
        let feature = h;
        let logits = self.head.forward(s, bank, &feature)?;
        let out = ops::activation(&mut s.tape, Activation::Tanh, &logits);
        Ok((out, feature))
    }

    /// Total parameter elements, via the bank prefix.
    pub fn param_count(&self, bank: &ParamBank) -> usize {
        bank.count_elements(&format!("{}.", self.prefix))
    }

    /// Element count of the offset predictor, when a deformable layer is
    /// present.
    pub fn offset_param_count(&self) -> usize {
        let probe = |front: &FrontConv| match front {
            FrontConv::Deform(d) => d.offset_param_count(),
            FrontConv::Plain(_) => 0,
        };
        self.enc.iter().map(|b| probe(&b.conv)).sum::<usize>()
            + self.dec.iter().map(|b| probe(&b.conv)).sum::<usize>()
    }
}

// ── discriminator ───────────────────────────────────────────────────────

/// Patch classifier over condition plus target, concatenated channel-wise.
/// Three stride-2 blocks shrink 64x64 inputs to an 8x8 logit map.
pub struct Discriminator {
    pub prefix: String,
    pub cond_channels: usize,
    pub target_channels: usize,
    blocks: Vec<(Conv, Option<Norm>)>,
    head: Conv,
}

impl Discriminator {
    pub fn init(
        bank: &mut ParamBank,
        rng: &mut impl Rng,
        prefix: &str,
        cond_channels: usize,
        target_channels: usize,
        base: usize,
    ) -> Result<Self> {
        let cin = cond_channels + target_channels;
        let widths = [base, base * 2, base * 4];
        let mut blocks = Vec::new();
        let mut prev = cin;
        for (i, &cout) in widths.iter().enumerate() {
            let name = format!("{prefix}.block{i}");
            let conv = Conv::init(bank, rng, &name, prev, cout, 4, 2, 1)?;
            let norm = if i == 0 {
                None
            } else {
                Some(Norm::init(bank, rng, &format!("{name}.bn"), cout)?)
            };
            blocks.push((conv, norm));
            prev = cout;
        }
        let head = Conv::init(bank, rng, &format!("{prefix}.head"), prev, 1, 3, 1, 1)?;
        Ok(Discriminator {
            prefix: prefix.to_string(),
            cond_channels,
            target_channels,
            blocks,
            head,
        })
    }

    /// Patch logit map [N,1,H/8,W/8].
    pub fn logits(&self, s: &mut Session, bank: &ParamBank, cond: &Var, target: &Var) -> Result<Var> {
        let (cs, ts) = (cond.shape(), target.shape());
        if cs.h != ts.h || cs.w != ts.w || cs.n != ts.n {
            return Err(Error::shape(
                "discriminate",
                format!("condition {cs} and target {ts} must agree on N,H,W"),
            ));
        }
        if cs.c != self.cond_channels || ts.c != self.target_channels {
            return Err(Error::shape(
                "discriminate",
                format!(
                    "expected condition C={} and target C={}, got C={} and C={}",
                    self.cond_channels, self.target_channels, cs.c, ts.c
                ),
            ));
        }
        let mut h = ops::concat_channels(&mut s.tape, &[cond.clone(), target.clone()])?;
        for (conv, norm) in &self.blocks {
            let mut y = conv.forward(s, bank, &h)?;
            if let Some(n) = norm {
                y = n.forward(s, bank, &y)?;
            }
            h = ops::activation(&mut s.tape, Activation::LeakyRelu, &y);
        }
        self.head.forward(s, bank, &h)
    }

    /// Patch probability map in (0,1).
    pub fn discriminate(
        &self,
        s: &mut Session,
        bank: &ParamBank,
        cond: &Var,
        target: &Var,
    ) -> Result<Var> {
        let logits = self.logits(s, bank, cond, target)?;
        Ok(ops::sigmoid(&mut s.tape, &logits))
    }

    pub fn param_count(&self, bank: &ParamBank) -> usize {
        bank.count_elements(&format!("{}.", self.prefix))
    }
}

// ── pipeline ────────────────────────────────────────────────────────────

/// Table-style ablation rows: A is the plain two-stage baseline, each
/// following row adds one component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    A,
    B,
    C,
    D,
}

impl Ablation {
    /// (attention, deformable, semantic-guided loss) toggles.
    pub fn toggles(self) -> (bool, bool, bool) {
        match self {
            Ablation::A => (false, false, false),
            Ablation::B => (true, false, false),
            Ablation::C => (true, true, false),
            Ablation::D => (true, true, true),
        }
    }

    pub fn method_string(self) -> &'static str {
        match self {
            Ablation::A => "SGAN",
            Ablation::B => "SGAN + AM",
            Ablation::C => "SGAN + AM + DC",
            Ablation::D => "SGAN + AM + DC + LS",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Ablation::A),
            "B" | "b" => Ok(Ablation::B),
            "C" | "c" => Ok(Ablation::C),
            "D" | "d" => Ok(Ablation::D),
            _ => Err(Error::Config(format!(
                "unknown ablation {s:?}; expected A, B, C or D"
            ))),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Ablation::A => "A",
            Ablation::B => "B",
            Ablation::C => "C",
            Ablation::D => "D",
        })
    }
}

/// Width and depth knobs shared by every network in the pipeline.
#[derive(Clone, Copy, Debug)]
pub struct NetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub feature_channels: usize,
    pub attention_reduction: usize,
    /// Placement used when the deformable toggle is on.
    pub deform_placement: DeformPlacement,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            depth: 3,
            base_channels: 32,
            feature_channels: 64,
            attention_reduction: 4,
            deform_placement: DeformPlacement::FirstEncoder,
        }
    }
}

pub const IMAGE_CHANNELS: usize = 3;
/// Semantic maps travel as color-coded 3-channel images in [-1,1].
pub const SEMANTIC_CHANNELS: usize = 3;

/// All networks of one pipeline, built per ablation. Rows without the
/// attention, deformable or semantic-loss component simply do not own those
/// parameters.
pub struct Model {
    pub coarse_gen: Generator,   // source + semantic -> coarse image
    pub refine_gen: Generator,   // source + coarse + gated features -> final image
    pub semantic_gen: Generator, // image -> semantic image (shared by both stages)
    pub attn_image: Option<AttentionModule>,
    pub attn_semantic: Option<AttentionModule>,
    pub disc_image: Discriminator,
    pub disc_semantic: Option<Discriminator>,
    pub ablation: Ablation,
    pub net: NetConfig,
}

impl Model {
    pub fn build(bank: &mut ParamBank, seed: u64, net: NetConfig, ablation: Ablation) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (am, dc, ls) = ablation.toggles();
        let deform = if dc { net.deform_placement } else { DeformPlacement::Off };
        let gen_cfg = |cin: usize, cout: usize| GeneratorConfig {
            in_channels: cin,
            out_channels: cout,
            depth: net.depth,
            base_channels: net.base_channels,
            feature_channels: net.feature_channels,
            deform,
        };
        let coarse_gen = Generator::init(
            bank,
            &mut rng,
            "gi",
            gen_cfg(IMAGE_CHANNELS + SEMANTIC_CHANNELS, IMAGE_CHANNELS),
        )?;
        let semantic_gen = Generator::init(
            bank,
            &mut rng,
            "gs",
            gen_cfg(IMAGE_CHANNELS, SEMANTIC_CHANNELS),
        )?;
        let refine_in = IMAGE_CHANNELS + IMAGE_CHANNELS + 2 * net.feature_channels;
        let refine_gen = Generator::init(bank, &mut rng, "ga", gen_cfg(refine_in, IMAGE_CHANNELS))?;
        let (attn_image, attn_semantic) = if am {
            (
                Some(AttentionModule::init(
                    bank,
                    &mut rng,
                    "am_i",
                    net.feature_channels,
                    net.attention_reduction,
                )?),
                Some(AttentionModule::init(
                    bank,
                    &mut rng,
                    "am_s",
                    net.feature_channels,
                    net.attention_reduction,
                )?),
            )
        } else {
            (None, None)
        };
        let disc_image = Discriminator::init(
            bank,
            &mut rng,
            "d1",
            IMAGE_CHANNELS,
            IMAGE_CHANNELS,
            net.base_channels,
        )?;
        let disc_semantic = if ls {
            Some(Discriminator::init(
                bank,
                &mut rng,
                "d2",
                IMAGE_CHANNELS + SEMANTIC_CHANNELS,
                IMAGE_CHANNELS + SEMANTIC_CHANNELS,
                net.base_channels,
            )?)
        } else {
            None
        };
        Ok(Model {
            coarse_gen,
            refine_gen,
            semantic_gen,
            attn_image,
            attn_semantic,
            disc_image,
            disc_semantic,
            ablation,
            net,
        })
    }

    /// Names of every generator-side parameter (generators plus attention),
    /// in a fixed order; the generator optimizer's update list.
    pub fn generator_param_names(&self, bank: &ParamBank) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for prefix in ["gi.", "gs.", "ga.", "am_i.", "am_s."] {
            names.extend(
                bank.names()
                    .filter(|n| n.starts_with(prefix))
                    .map(str::to_string),
            );
        }
        names
    }

    /// Names of every discriminator parameter, in a fixed order.
    pub fn discriminator_param_names(&self, bank: &ParamBank) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for prefix in ["d1.", "d2."] {
            names.extend(
                bank.names()
                    .filter(|n| n.starts_with(prefix))
                    .map(str::to_string),
            );
        }
        names
    }

    pub fn total_param_count(&self, bank: &ParamBank) -> usize {
        bank.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Stage-1 products: the coarse image, its semantic reconstruction, and the
/// two feature maps handed to stage 2.
pub struct Stage1 {
    pub coarse: Var,
    pub sem_coarse: Var,
    pub feat_image: Var,
    pub feat_semantic: Var,
}

/// Stage 1: the source view concatenated with the target-view semantic map
/// (in color form) drives the coarse generator; the coarse image drives the
/// shared semantic generator.
pub fn stage1(
    s: &mut Session,
    bank: &ParamBank,
    model: &Model,
    source: &Var,
    semantic_color: &Var,
) -> Result<Stage1> {
    let (ss, cs) = (source.shape(), semantic_color.shape());
    if ss.h != cs.h || ss.w != cs.w || ss.n != cs.n {
        return Err(Error::shape(
            "stage1",
            format!("source {ss} and semantic map {cs} must agree on N,H,W"),
        ));
    }
    let joined = ops::concat_channels(&mut s.tape, &[source.clone(), semantic_color.clone()])?;
    let (coarse, feat_image) = model.coarse_gen.forward(s, bank, &joined)?;
    let (sem_coarse, feat_semantic) = model.semantic_gen.forward(s, bank, &coarse)?;
    Ok(Stage1 {
        coarse,
        sem_coarse,
        feat_image,
        feat_semantic,
    })
}

/// Stage-2 products: the refined image and its semantic reconstruction.
pub struct Stage2 {
    pub refined: Var,
    pub sem_refined: Var,
}

/// Stage 2: gate the stage-1 feature maps (pass-through when attention is
/// off), concatenate with the source and the coarse image, refine, and run
/// the shared semantic generator on the result.
pub fn stage2(
    s: &mut Session,
    bank: &ParamBank,
    model: &Model,
    source: &Var,
    stage1: &Stage1,
) -> Result<Stage2> {
    let feat_image = match &model.attn_image {
        Some(am) => am.refine(s, bank, &stage1.feat_image)?,
        None => stage1.feat_image.clone(),
    };
    let feat_semantic = match &model.attn_semantic {
        Some(am) => am.refine(s, bank, &stage1.feat_semantic)?,
        None => stage1.feat_semantic.clone(),
    };
    let joined = ops::concat_channels(
        &mut s.tape,
        &[
            source.clone(),
            stage1.coarse.clone(),
            feat_image,
            feat_semantic,
        ],
    )?;
    let (refined, _) = model.refine_gen.forward(s, bank, &joined)?;
    let (sem_refined, _) = model.semantic_gen.forward(s, bank, &refined)?;
    Ok(Stage2 {
        refined,
        sem_refined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_net() -> NetConfig {
        NetConfig {
            depth: 3,
            base_channels: 8,
            feature_channels: 16,
            attention_reduction: 4,
            deform_placement: DeformPlacement::FirstEncoder,
        }
    }

    fn rand_input(shape: Shape, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng)
    }

    #[test]
    fn generator_shape_contract_and_tanh_range() {
        let mut bank = ParamBank::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let g = Generator::init(
            &mut bank,
            &mut rng,
            "g",
            GeneratorConfig::desk(6, 3),
        )
        .unwrap();
        let mut s = Session::new();
        let x = Var::constant(rand_input(Shape::new(1, 6, 32, 32), 9));
        let (out, feature) = g.forward(&mut s, &bank, &x).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 3, 32, 32));
        assert_eq!(feature.shape(), Shape::new(1, 64, 32, 32));
        assert!(out.value.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn generator_rejects_indivisible_input() {
        let mut bank = ParamBank::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Generator::init(&mut bank, &mut rng, "g", GeneratorConfig::desk(3, 3)).unwrap();
        let mut s = Session::new();
        let x = Var::constant(Tensor::zeros(Shape::new(1, 3, 20, 20)));
        let err = g.forward(&mut s, &bank, &x).unwrap_err();
        assert!(err.to_string().contains("2^depth"));
    }

    #[test]
    fn stage_wiring_preserves_resolution_and_feature_widths() {
        let mut bank = ParamBank::new();
        let model = Model::build(&mut bank, 7, small_net(), Ablation::D).unwrap();
        let mut s = Session::new();
        let source = Var::constant(rand_input(Shape::new(2, 3, 32, 32), 10));
        let sem = Var::constant(rand_input(Shape::new(2, 3, 32, 32), 11));
        let s1 = stage1(&mut s, &bank, &model, &source, &sem).unwrap();
        assert_eq!(s1.coarse.shape(), Shape::new(2, 3, 32, 32));
        assert_eq!(s1.sem_coarse.shape(), Shape::new(2, 3, 32, 32));
        assert_eq!(s1.feat_image.shape(), Shape::new(2, 16, 32, 32));
        assert_eq!(s1.feat_semantic.shape(), Shape::new(2, 16, 32, 32));
        let s2 = stage2(&mut s, &bank, &model, &source, &s1).unwrap();
        assert_eq!(s2.refined.shape(), Shape::new(2, 3, 32, 32));
        assert_eq!(s2.sem_refined.shape(), Shape::new(2, 3, 32, 32));
    }

    #[test]
    fn refine_generator_consumes_two_images_plus_two_feature_maps() {
        let mut bank = ParamBank::new();
        let net = small_net();
        let model = Model::build(&mut bank, 7, net, Ablation::D).unwrap();
        assert_eq!(
            model.refine_gen.cfg.in_channels,
            3 + 3 + 2 * net.feature_channels
        );
    }

    #[test]
    fn semantic_generator_is_shared_between_stages() {
        // Both stages must touch the identical parameter node: gradient
        // flows from both heads into one tensor.
        let mut bank = ParamBank::new();
        let model = Model::build(&mut bank, 3, small_net(), Ablation::A).unwrap();
        let mut s = Session::new();
        let source = Var::constant(rand_input(Shape::new(1, 3, 16, 16), 20));
        let sem = Var::constant(rand_input(Shape::new(1, 3, 16, 16), 21));
        let s1 = stage1(&mut s, &bank, &model, &source, &sem).unwrap();
        let first_touch = s.touched("gs.enc0.w").unwrap().node;
        let _s2 = stage2(&mut s, &bank, &model, &source, &s1).unwrap();
        let second_touch = s.touched("gs.enc0.w").unwrap().node;
        assert_eq!(first_touch, second_touch);
    }

    #[test]
    fn attention_off_passes_features_through() {
        let mut bank = ParamBank::new();
        let model = Model::build(&mut bank, 3, small_net(), Ablation::A).unwrap();
        assert!(model.attn_image.is_none() && model.attn_semantic.is_none());
        let mut s = Session::new();
        let source = Var::constant(rand_input(Shape::new(1, 3, 16, 16), 30));
        let sem = Var::constant(rand_input(Shape::new(1, 3, 16, 16), 31));
        let s1 = stage1(&mut s, &bank, &model, &source, &sem).unwrap();
        // with attention off, stage2's input reuses the stage-1 features
        // unchanged; verify by recomputing the concat input channel block
        let s2 = stage2(&mut s, &bank, &model, &source, &s1).unwrap();
        assert_eq!(s2.refined.shape(), Shape::new(1, 3, 16, 16));
    }

    #[test]
    fn discriminator_patch_geometry_and_range() {
        let mut bank = ParamBank::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = Discriminator::init(&mut bank, &mut rng, "d", 3, 3, 8).unwrap();
        let mut s = Session::new();
        let cond = Var::constant(rand_input(Shape::new(2, 3, 64, 64), 40));
        let target = Var::constant(rand_input(Shape::new(2, 3, 64, 64), 41));
        let p = d.discriminate(&mut s, &bank, &cond, &target).unwrap();
        assert_eq!(p.shape(), Shape::new(2, 1, 8, 8));
        assert!(p.value.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zeroed_final_layer_gives_half_probabilities() {
        let mut bank = ParamBank::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = Discriminator::init(&mut bank, &mut rng, "d", 3, 3, 8).unwrap();
        bank.set("d.head.w", Tensor::zeros(bank.get("d.head.w").shape()));
        bank.set("d.head.b", Tensor::zeros(bank.get("d.head.b").shape()));
        let mut s = Session::new();
        let cond = Var::constant(rand_input(Shape::new(1, 3, 32, 32), 50));
        let target = Var::constant(rand_input(Shape::new(1, 3, 32, 32), 51));
        let p = d.discriminate(&mut s, &bank, &cond, &target).unwrap();
        assert!(p.value.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn discriminator_rejects_channel_mismatch() {
        let mut bank = ParamBank::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = Discriminator::init(&mut bank, &mut rng, "d", 6, 6, 8).unwrap();
        let mut s = Session::new();
        let cond = Var::constant(Tensor::zeros(Shape::new(1, 3, 16, 16)));
        let target = Var::constant(Tensor::zeros(Shape::new(1, 6, 16, 16)));
        assert!(d.logits(&mut s, &bank, &cond, &target).is_err());
    }

    #[test]
    fn deform_toggle_off_matches_zero_offset_deform_layer() {
        // DC off vs DC on with its zero-initialized offset predictor:
        // identical outputs, since offsets start at zero.
        let net = small_net();
        let mut bank_off = ParamBank::new();
        let off = Model::build(&mut bank_off, 11, net, Ablation::B).unwrap();
        let mut bank_on = ParamBank::new();
        let on = Model::build(&mut bank_on, 11, net, Ablation::C).unwrap();
        // align the dc-model's plain weights with the off-model's
        for name in bank_off.names().map(str::to_string).collect::<Vec<_>>() {
            if bank_on.try_get(&name).is_some() {
                let t = bank_off.get(&name).clone();
                bank_on.set(&name, t);
            }
        }
        let source = Var::constant(rand_input(Shape::new(1, 3, 16, 16), 60));
        let sem = Var::constant(rand_input(Shape::new(1, 3, 16, 16), 61));
        let mut s_off = Session::new();
        let a = stage1(&mut s_off, &bank_off, &off, &source, &sem).unwrap();
        let mut s_on = Session::new();
        let b = stage1(&mut s_on, &bank_on, &on, &source, &sem).unwrap();
        assert!(a.coarse.value.max_abs_diff(&b.coarse.value) <= 1e-12);
    }

    #[test]
    fn golden_checksum_of_generator_forward() {
        // Self-consistency pin: seed 42, fixed config. If initialization or
        // any op changes numerically, this fails and the constant must be
        // re-recorded deliberately.
        let mut bank = ParamBank::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let g = Generator::init(&mut bank, &mut rng, "g", GeneratorConfig::desk(6, 3)).unwrap();
        let mut s = Session::new();
        let x = Var::constant(rand_input(Shape::new(1, 6, 32, 32), 42));
        let (out, _) = g.forward(&mut s, &bank, &x).unwrap();
        let got = out.value.checksum();
        if std::env::var("XVFG_PRINT_GOLDEN").is_ok() {
            eprintln!("generator_forward golden: {got:#018x}");
        }
        const GOLDEN: u64 = 0x814bdfec836451f1;
        assert_eq!(got, GOLDEN, "got {got:#018x}");
    }

    #[test]
    fn golden_checksum_of_stage2_output() {
        let mut bank = ParamBank::new();
        let model = Model::build(&mut bank, 42, small_net(), Ablation::D).unwrap();
        let mut s = Session::new();
        let source = Var::constant(rand_input(Shape::new(1, 3, 32, 32), 70));
        let sem = Var::constant(rand_input(Shape::new(1, 3, 32, 32), 71));
        let s1 = stage1(&mut s, &bank, &model, &source, &sem).unwrap();
        let s2 = stage2(&mut s, &bank, &model, &source, &s1).unwrap();
        let got = s2.refined.value.checksum();
        if std::env::var("XVFG_PRINT_GOLDEN").is_ok() {
            eprintln!("stage2 golden: {got:#018x}");
        }
        const GOLDEN: u64 = 0xd7fcbf1e56db46e1;
        assert_eq!(got, GOLDEN, "got {got:#018x}");
    }
}
