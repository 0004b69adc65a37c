//! A small fixed-seed convolutional classifier used as the probe for the
//! KL score and top-k accuracy. Trained on scene labels with a Brier loss;
//! deterministic per (seed, training set).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::metrics::ProbeClassifier;
use crate::ops;
use crate::optim::{Adam, ParamBank, Session};
use crate::tape::Var;
use crate::tensor::{Shape, Tensor};

pub struct ConvProbe {
    bank: ParamBank,
    classes: usize,
}

const WIDTH1: usize = 8;
const WIDTH2: usize = 16;

impl ConvProbe {
    fn init_bank(classes: usize, seed: u64) -> Result<ParamBank> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xeb0a));
        let mut bank = ParamBank::new();
        bank.insert(
            "p.c1.w",
            Tensor::randn(Shape::new(WIDTH1, 3, 4, 4), 0.0, 0.05, &mut rng),
        )?;
        bank.insert("p.c1.b", Tensor::zeros(Shape::new(1, WIDTH1, 1, 1)))?;
        bank.insert(
            "p.c2.w",
            Tensor::randn(Shape::new(WIDTH2, WIDTH1, 4, 4), 0.0, 0.05, &mut rng),
        )?;
        bank.insert("p.c2.b", Tensor::zeros(Shape::new(1, WIDTH2, 1, 1)))?;
        bank.insert(
            "p.head.w",
            Tensor::randn(Shape::new(classes, WIDTH2, 1, 1), 0.0, 0.05, &mut rng),
        )?;
        bank.insert("p.head.b", Tensor::zeros(Shape::new(1, classes, 1, 1)))?;
        Ok(bank)
    }

    fn logits(s: &mut Session, bank: &ParamBank, x: &Var) -> Result<Var> {
        let w1 = s.param(bank, "p.c1.w");
        let b1 = s.param(bank, "p.c1.b");
        let h = ops::conv2d(&mut s.tape, x, &w1, &b1, 2, 1)?;
        let h = ops::leaky_relu(&mut s.tape, &h);
        let w2 = s.param(bank, "p.c2.w");
        let b2 = s.param(bank, "p.c2.b");
        let h = ops::conv2d(&mut s.tape, &h, &w2, &b2, 2, 1)?;
        let h = ops::leaky_relu(&mut s.tape, &h);
        let pooled = ops::global_avg_pool(&mut s.tape, &h);
        let wh = s.param(bank, "p.head.w");
        let bh = s.param(bank, "p.head.b");
        ops::conv2d(&mut s.tape, &pooled, &wh, &bh, 1, 0)
    }

    /// Train on labeled images. Images are [1,3,H,W]; labels index the
    /// class set.
    pub fn train(
        images: &[Tensor],
        labels: &[usize],
        classes: usize,
        seed: u64,
        iterations: usize,
    ) -> Result<ConvProbe> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::Data(format!(
                "probe training needs matched images and labels, got {} and {}",
                images.len(),
                labels.len()
            )));
        }
        let mut bank = Self::init_bank(classes, seed)?;
        let names: Vec<String> = bank.names().map(str::to_string).collect();
        let mut adam = Adam::new(names, 3e-3, 0.9, 0.999, 1e-8);
        let mut order_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x517c));
        let batch = images.len().min(8);
        for _ in 0..iterations {
            use rand::Rng;
            let mut s = Session::new();
            // stack a batch
            let shape = images[0].shape();
            let bs = Shape::new(batch, 3, shape.h, shape.w);
            let mut x = vec![0.0; bs.numel()];
            let os = Shape::new(batch, classes, 1, 1);
            let mut onehot = vec![0.0; os.numel()];
            for i in 0..batch {
                let pick = order_rng.gen_range(0..images.len());
                let img = &images[pick];
                x[i * 3 * shape.h * shape.w..(i + 1) * 3 * shape.h * shape.w]
                    .copy_from_slice(img.data());
                onehot[i * classes + labels[pick]] = 1.0;
            }
            let x = Var::constant(Tensor::new(bs, x));
            let target = Var::constant(Tensor::new(os, onehot));
            let logits = Self::logits(&mut s, &bank, &x)?;
            let probs = ops::softmax_channels(&mut s.tape, &logits);
            let diff = ops::sub(&mut s.tape, &probs, &target)?;
            let sq = ops::mul(&mut s.tape, &diff, &diff)?;
            let loss = ops::mean_all(&mut s.tape, &sq);
            let grads = s.tape.backward(&loss)?;
            adam.step(&mut bank, &s, &grads);
        }
        Ok(ConvProbe { bank, classes })
    }

    /// Train on a paired dataset's target-view images and scene labels.
    pub fn from_samples(
        samples: &[crate::data::PairedSample],
        target_is_ground: bool,
        seed: u64,
        iterations: usize,
    ) -> Result<ConvProbe> {
        let images: Vec<Tensor> = samples
            .iter()
            .map(|s| {
                if target_is_ground {
                    s.ground.clone()
                } else {
                    s.aerial.clone()
                }
            })
            .collect();
        let labels: Vec<usize> = samples.iter().map(|s| s.scene_label).collect();
        ConvProbe::train(&images, &labels, NUM_CLASSES, seed, iterations)
    }
}

impl ProbeClassifier for ConvProbe {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn probabilities(&self, image: &Tensor) -> Vec<f64> {
        let mut s = Session::new();
        let x = Var::constant(image.clone());
        let logits = Self::logits(&mut s, &self.bank, &x).expect("probe forward");
        let probs = ops::softmax_channels(&mut s.tape, &logits);
        probs.value.data().to_vec()
    }
}
