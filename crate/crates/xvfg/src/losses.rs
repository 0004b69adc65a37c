//! Training objectives: conditional adversarial terms for the image and
//! semantic-guided discriminators, their weighted total, pixel L1 losses,
//! total-variation regularization, and the generator objective.
//!
//! Discriminator and generator terms are computed from patch logits through
//! log-sigmoid, so they stay finite for any logit magnitude the networks can
//! produce. The discriminator term uses detached fakes; the generator term
//! is the non-saturating form.

use crate::error::{Error, Result};
use crate::networks::Discriminator;
use crate::ops;
use crate::optim::{ParamBank, Session};
use crate::tape::Var;

/// Loss weights and component toggles.
///
/// `stage2_weight` multiplies both second-stage adversarial terms;
/// `pixel` holds the four L1 weights in pipeline order
/// (coarse image, coarse semantic, refined image, refined semantic).
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub stage2_weight: f64,
    pub pixel: [f64; 4],
    pub tv_weight: f64,
    pub attention: bool,
    pub deform: bool,
    pub semantic_adv: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            stage2_weight: 4.0,
            pixel: [100.0, 1.0, 200.0, 2.0],
            tv_weight: 1e-6,
            attention: true,
            deform: true,
            semantic_adv: true,
        }
    }
}

impl LossWeights {
    pub fn for_ablation(ablation: crate::networks::Ablation) -> Self {
        let (attention, deform, semantic_adv) = ablation.toggles();
        LossWeights {
            attention,
            deform,
            semantic_adv,
            ..LossWeights::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.stage2_weight,
            self.pixel[0],
            self.pixel[1],
            self.pixel[2],
            self.pixel[3],
            self.tv_weight,
        ];
        if all.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

fn require_batch(op: &'static str, logits: &Var) -> Result<()> {
    if logits.shape().numel() == 0 {
        return Err(Error::Data(format!("{op}: empty batch")));
    }
    Ok(())
}

/// Discriminator loss from patch logits:
/// -[mean log sigmoid(real) + mean log sigmoid(-fake)]. Always >= 0.
pub fn d_loss_from_logits(s: &mut Session, real: &Var, fake: &Var) -> Result<Var> {
    require_batch("d_loss", real)?;
    require_batch("d_loss", fake)?;
    let lr = ops::log_sigmoid(&mut s.tape, real);
    let term_real = ops::mean_all(&mut s.tape, &lr);
    let neg_fake = ops::neg(&mut s.tape, fake);
    let lf = ops::log_sigmoid(&mut s.tape, &neg_fake);
    let term_fake = ops::mean_all(&mut s.tape, &lf);
    let total = ops::add(&mut s.tape, &term_real, &term_fake)?;
    Ok(ops::neg(&mut s.tape, &total))
}

/// Non-saturating generator loss from fake patch logits:
/// -mean log sigmoid(fake).
pub fn g_loss_from_logits(s: &mut Session, fake: &Var) -> Result<Var> {
    require_batch("g_loss", fake)?;
    let lf = ops::log_sigmoid(&mut s.tape, fake);
    let m = ops::mean_all(&mut s.tape, &lf);
    Ok(ops::neg(&mut s.tape, &m))
}

/// Both adversarial terms for one discriminator and one (real, fake) pair.
/// The fake is detached for the discriminator term and left attached for the
/// generator term; the expectation is the mean over batch and patch map.
pub struct AdvPair {
    pub d_loss: Var,
    pub g_loss: Var,
}

pub fn adv_loss_pair(
    s: &mut Session,
    bank: &ParamBank,
    d: &Discriminator,
    cond: &Var,
    real: &Var,
    fake: &Var,
) -> Result<AdvPair> {
    let real_logits = d.logits(s, bank, cond, real)?;
    let fake_detached = d.logits(s, bank, cond, &fake.detach())?;
    let d_loss = d_loss_from_logits(s, &real_logits, &fake_detached)?;
    let fake_logits = d.logits(s, bank, cond, fake)?;
    let g_loss = g_loss_from_logits(s, &fake_logits)?;
    Ok(AdvPair { d_loss, g_loss })
}

/// Weighted total of the four adversarial terms: stage-1 image, stage-2
/// image (weighted), stage-1 semantic-guided, stage-2 semantic-guided
/// (weighted). The semantic-guided terms are omitted when the toggle is off.
pub fn total_adv_loss(
    s: &mut Session,
    w: &LossWeights,
    image_stage1: &Var,
    image_stage2: &Var,
    semantic_stage1: Option<&Var>,
    semantic_stage2: Option<&Var>,
) -> Result<Var> {
    let weighted2 = ops::scale(&mut s.tape, image_stage2, w.stage2_weight);
    let mut total = ops::add(&mut s.tape, image_stage1, &weighted2)?;
    if w.semantic_adv {
        if let Some(t) = semantic_stage1 {
            total = ops::add(&mut s.tape, &total, t)?;
        }
        if let Some(t) = semantic_stage2 {
            let wt = ops::scale(&mut s.tape, t, w.stage2_weight);
            total = ops::add(&mut s.tape, &total, &wt)?;
        }
    }
    Ok(total)
}

/// Mean absolute difference over all elements.
pub fn pixel_l1(s: &mut Session, a: &Var, b: &Var) -> Result<Var> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "pixel_l1",
            format!("operands differ: {} vs {}", a.shape(), b.shape()),
        ));
    }
    let diff = ops::sub(&mut s.tape, a, b)?;
    let mag = ops::abs(&mut s.tape, &diff);
    Ok(ops::mean_all(&mut s.tape, &mag))
}

/// Anisotropic total variation of an image batch.
pub fn tv_loss(s: &mut Session, img: &Var) -> Var {
    ops::total_variation(&mut s.tape, img)
}

/// The four reconstruction pairs of the pipeline, in weight order.
pub struct PixelPairs<'a> {
    pub coarse: (&'a Var, &'a Var),
    pub sem_coarse: (&'a Var, &'a Var),
    pub refined: (&'a Var, &'a Var),
    pub sem_refined: (&'a Var, &'a Var),
}

/// Generator objective: weighted pixel L1 terms plus the generator-side
/// adversarial total plus weighted TV on the refined image.
pub fn total_objective(
    s: &mut Session,
    w: &LossWeights,
    pairs: &PixelPairs,
    g_adv_total: &Var,
    refined_image: &Var,
) -> Result<Var> {
    let order = [pairs.coarse, pairs.sem_coarse, pairs.refined, pairs.sem_refined];
    let mut total = g_adv_total.clone();
    for (weight, (a, b)) in w.pixel.iter().zip(order) {
        let l1 = pixel_l1(s, a, b)?;
        let scaled = ops::scale(&mut s.tape, &l1, *weight);
        total = ops::add(&mut s.tape, &total, &scaled)?;
    }
    let tv = tv_loss(s, refined_image);
    let tv_scaled = ops::scale(&mut s.tape, &tv, w.tv_weight);
    ops::add(&mut s.tape, &total, &tv_scaled)
}
