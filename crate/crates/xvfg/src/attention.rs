//! Channel and spatial attention gating for feature-map refinement.
//!
//! The channel gate pools the map globally along H,W (average and max),
//! pushes both vectors through one shared two-layer MLP, and squashes the
//! sum; the spatial gate reduces along channels (mean and max), stacks the
//! two maps and runs a 7x7 convolution. Gates multiply into the features in
//! a fixed order: channel first, then spatial on the channel-gated map.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops;
use crate::optim::{ParamBank, Session};
use crate::tape::Var;

const SPATIAL_KERNEL: usize = 7;

#[derive(Debug)]
pub struct AttentionModule {
    pub channels: usize,
    pub reduction: usize,
    mlp_w1: String,
    mlp_b1: String,
    mlp_w2: String,
    mlp_b2: String,
    spatial_w: String,
    spatial_b: String,
}

impl AttentionModule {
    /// The reduction ratio must divide the channel count.
    pub fn init(
        bank: &mut ParamBank,
        rng: &mut impl Rng,
        prefix: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "attention reduction {reduction} does not divide channel count {channels}"
            )));
        }
        let hidden = channels / reduction;
        let m = AttentionModule {
            channels,
            reduction,
            mlp_w1: format!("{prefix}.mlp.w1"),
            mlp_b1: format!("{prefix}.mlp.b1"),
            mlp_w2: format!("{prefix}.mlp.w2"),
            mlp_b2: format!("{prefix}.mlp.b2"),
            spatial_w: format!("{prefix}.spatial.w"),
            spatial_b: format!("{prefix}.spatial.b"),
        };
        use crate::tensor::{Shape, Tensor};
        bank.insert(
            &m.mlp_w1,
            Tensor::randn(Shape::new(hidden, channels, 1, 1), 0.0, 0.02, rng),
        )?;
        bank.insert(&m.mlp_b1, Tensor::zeros(Shape::new(1, hidden, 1, 1)))?;
        bank.insert(
            &m.mlp_w2,
            Tensor::randn(Shape::new(channels, hidden, 1, 1), 0.0, 0.02, rng),
        )?;
        bank.insert(&m.mlp_b2, Tensor::zeros(Shape::new(1, channels, 1, 1)))?;
        bank.insert(
            &m.spatial_w,
            Tensor::randn(
                Shape::new(1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL),
                0.0,
                0.02,
                rng,
            ),
        )?;
        bank.insert(&m.spatial_b, Tensor::zeros(Shape::new(1, 1, 1, 1)))?;
        Ok(m)
    }

    /// Shared MLP over a pooled [N,C,1,1] vector.
    fn mlp(&self, s: &mut Session, bank: &ParamBank, x: &Var) -> Result<Var> {
        let w1 = s.param(bank, &self.mlp_w1);
        let b1 = s.param(bank, &self.mlp_b1);
        let w2 = s.param(bank, &self.mlp_w2);
        let b2 = s.param(bank, &self.mlp_b2);
        let h = ops::conv2d(&mut s.tape, x, &w1, &b1, 1, 0)?;
        let h = ops::relu(&mut s.tape, &h);
        ops::conv2d(&mut s.tape, &h, &w2, &b2, 1, 0)
    }

    /// Channel gate [N,C,1,1]: sigmoid(MLP(avgpool F) + MLP(maxpool F)).
    pub fn channel_attention(&self, s: &mut Session, bank: &ParamBank, f: &Var) -> Result<Var> {
        if f.shape().c != self.channels {
            return Err(Error::shape(
                "channel_attention",
                format!("expected C={}, got {}", self.channels, f.shape()),
            ));
        }
        let avg = ops::global_avg_pool(&mut s.tape, f);
        let max = ops::global_max_pool(&mut s.tape, f);
        let a = self.mlp(s, bank, &avg)?;
        let b = self.mlp(s, bank, &max)?;
        let sum = ops::add(&mut s.tape, &a, &b)?;
        Ok(ops::sigmoid(&mut s.tape, &sum))
    }

    /// Spatial gate [N,1,H,W]: sigmoid(conv7x7([channel-mean F, channel-max F])).
    pub fn spatial_attention(&self, s: &mut Session, bank: &ParamBank, f: &Var) -> Result<Var> {
        let mean = ops::channel_mean(&mut s.tape, f);
        let max = ops::channel_max(&mut s.tape, f);
        let stacked = ops::concat_channels(&mut s.tape, &[mean, max])?;
        let w = s.param(bank, &self.spatial_w);
        let b = s.param(bank, &self.spatial_b);
        let logits = ops::conv2d(&mut s.tape, &stacked, &w, &b, 1, SPATIAL_KERNEL / 2)?;
        Ok(ops::sigmoid(&mut s.tape, &logits))
    }

    /// Gate the features: channel first, then spatial on the gated map.
    /// Output shape equals input shape.
    pub fn refine(&self, s: &mut Session, bank: &ParamBank, f: &Var) -> Result<Var> {
        let mc = self.channel_attention(s, bank, f)?;
        let f1 = ops::mul_channel_gate(&mut s.tape, &mc, f)?;
        let ms = self.spatial_attention(s, bank, &f1)?;
        ops::mul_spatial_gate(&mut s.tape, &ms, &f1)
    }

    pub fn param_names(&self) -> Vec<String> {
        vec![
            self.mlp_w1.clone(),
            self.mlp_b1.clone(),
            self.mlp_w2.clone(),
            self.mlp_b2.clone(),
            self.spatial_w.clone(),
            self.spatial_b.clone(),
        ]
    }

    /// Total element count of the module's parameters.
    pub fn param_count(&self) -> usize {
        let hidden = self.channels / self.reduction;
        let mlp = hidden * self.channels + hidden + self.channels * hidden + self.channels;
        let spatial = 2 * SPATIAL_KERNEL * SPATIAL_KERNEL + 1;
        mlp + spatial
    }
}
