//! End-to-end optimization of the two-stage pipeline, evaluation against
//! held-out samples, and the ablation sweep.
//!
//! Each iteration runs one discriminator step on detached fakes, then one
//! generator step on the full objective; fakes are generated once per
//! iteration and the generator step re-scores them under the freshly updated
//! discriminators. Everything is deterministic per seed: batch order,
//! initialization, and update order.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{image, save_checkpoint, PairedSample};
use crate::error::{Error, Result};
use crate::losses::{self, LossWeights, PixelPairs};
use crate::metrics::{self, MetricRow, ProbeClassifier};
use crate::networks::{stage1, stage2, Ablation, Model, NetConfig, Stage1, Stage2};
use crate::optim::{Adam, ParamBank, Session};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    A2g,
    G2a,
}

impl Direction {
    pub fn parse(s: &str) -> Result<Direction> {
        match s {
            "a2g" => Ok(Direction::A2g),
            "g2a" => Ok(Direction::G2a),
            _ => Err(Error::Config(format!(
                "unknown direction {s:?}; expected a2g or g2a"
            ))),
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::A2g => "a2g",
            Direction::G2a => "g2a",
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub direction: Direction,
    pub size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub weights: LossWeights,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub net: NetConfig,
    /// Stop after this many iterations even mid-epoch.
    pub max_iterations: Option<usize>,
    /// Checkpoint/grid cadence in epochs.
    pub checkpoint_every: usize,
    /// Where checkpoints, loss logs and sample grids go; `None` keeps the
    /// run entirely in memory.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            direction: Direction::A2g,
            size: 32,
            epochs: 25,
            batch_size: 4,
            seed: 1,
            ablation: Ablation::D,
            weights: LossWeights::default(),
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            net: NetConfig::default(),
            max_iterations: None,
            checkpoint_every: 1,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.size, 32 | 64 | 256) {
            return Err(Error::Config(format!(
                "size {} not supported; expected 32, 64 or 256",
                self.size
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint cadence must be positive".into()));
        }
        self.weights.validate()
    }

    /// Ablation drives both the model components and the loss toggles.
    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        let keep = self.weights;
        self.weights = LossWeights {
            ..LossWeights::for_ablation(ablation)
        };
        self.weights.stage2_weight = keep.stage2_weight;
        self.weights.pixel = keep.pixel;
        self.weights.tv_weight = keep.tv_weight;
        self
    }
}

/// One loss-log line. `d2` is absent when the semantic-guided loss is off.
#[derive(Clone, Debug)]
pub struct LossRow {
    pub iter: usize,
    pub d1: f64,
    pub d2: Option<f64>,
    pub g_adv: f64,
    pub l1_stage1: f64,
    pub l1_stage2: f64,
    pub tv: f64,
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str = "iter,d1,d2,g_adv,l1_stage1,l1_stage2,tv,total";

impl LossRow {
    pub fn to_csv(&self) -> String {
        let d2 = self.d2.map(|v| format!("{v:.9}")).unwrap_or_default();
        format!(
            "{},{:.9},{},{:.9},{:.9},{:.9},{:.9},{:.9}",
            self.iter, self.d1, d2, self.g_adv, self.l1_stage1, self.l1_stage2, self.tv, self.total
        )
    }
}

/// A finished training run: the parameter bank, the built model, and the
/// per-iteration loss log.
pub struct TrainOutcome {
    pub bank: ParamBank,
    pub model: Model,
    pub loss_log: Vec<LossRow>,
    pub final_checkpoint: Option<PathBuf>,
}

/// Source, target and semantic-map batches under the configured direction;
/// g2a is a pure role swap of the two views.
fn batch_views(
    samples: &[&PairedSample],
    direction: Direction,
) -> (Tensor, Tensor, Tensor) {
    let (sources, targets): (Vec<&Tensor>, Vec<&Tensor>) = match direction {
        Direction::A2g => (
            samples.iter().map(|s| &s.aerial).collect(),
            samples.iter().map(|s| &s.ground).collect(),
        ),
        Direction::G2a => (
            samples.iter().map(|s| &s.ground).collect(),
            samples.iter().map(|s| &s.aerial).collect(),
        ),
    };
    let semantics: Vec<&Tensor> = samples.iter().map(|s| &s.ground_semantic_color).collect();
    (
        Tensor::stack_batch(&sources),
        Tensor::stack_batch(&targets),
        Tensor::stack_batch(&semantics),
    )
}

struct StepOutput {
    row: LossRow,
}

/// One optimization iteration: discriminators first on detached fakes, then
/// the generators against the updated discriminators.
fn train_step(
    bank: &mut ParamBank,
    model: &Model,
    cfg: &TrainConfig,
    adam_g: &mut Adam,
    adam_d: &mut Adam,
    iter: usize,
    source_t: &Tensor,
    target_t: &Tensor,
    semantic_t: &Tensor,
) -> Result<StepOutput> {
    let w = &cfg.weights;
    let mut s = Session::new();
    let source = Var::constant(source_t.clone());
    let target = Var::constant(target_t.clone());
    let semantic = Var::constant(semantic_t.clone());

    let s1: Stage1 = stage1(&mut s, bank, model, &source, &semantic)?;
    let s2: Stage2 = stage2(&mut s, bank, model, &source, &s1)?;

    // discriminator step on detached fakes
    let (d1_value, d2_value) = {
        let mut sd = Session::new();
        let coarse = s1.coarse.detach();
        let refined = s2.refined.detach();
        let d1_a = {
            let rl = model.disc_image.logits(&mut sd, bank, &source, &target)?;
            let fl = model.disc_image.logits(&mut sd, bank, &source, &coarse)?;
            losses::d_loss_from_logits(&mut sd, &rl, &fl)?
        };
        let d1_b = {
            let rl = model.disc_image.logits(&mut sd, bank, &source, &target)?;
            let fl = model.disc_image.logits(&mut sd, bank, &source, &refined)?;
            losses::d_loss_from_logits(&mut sd, &rl, &fl)?
        };
        let d1_total = {
            let scaled = crate::ops::scale(&mut sd.tape, &d1_b, w.stage2_weight);
            crate::ops::add(&mut sd.tape, &d1_a, &scaled)?
        };
        let mut d_total = d1_total.clone();
        let mut d2_value = None;
        if let Some(d2) = &model.disc_semantic {
            let cond = crate::ops::concat_channels(&mut sd.tape, &[source.clone(), semantic.clone()])?;
            let real = crate::ops::concat_channels(&mut sd.tape, &[target.clone(), semantic.clone()])?;
            let fake_a = crate::ops::concat_channels(
                &mut sd.tape,
                &[coarse.clone(), s1.sem_coarse.detach()],
            )?;
            let fake_b = crate::ops::concat_channels(
                &mut sd.tape,
                &[refined.clone(), s2.sem_refined.detach()],
            )?;
            let d2_a = {
                let rl = d2.logits(&mut sd, bank, &cond, &real)?;
                let fl = d2.logits(&mut sd, bank, &cond, &fake_a)?;
                losses::d_loss_from_logits(&mut sd, &rl, &fl)?
            };
            let d2_b = {
                let rl = d2.logits(&mut sd, bank, &cond, &real)?;
                let fl = d2.logits(&mut sd, bank, &cond, &fake_b)?;
                losses::d_loss_from_logits(&mut sd, &rl, &fl)?
            };
            let d2_total = {
                let scaled = crate::ops::scale(&mut sd.tape, &d2_b, w.stage2_weight);
                crate::ops::add(&mut sd.tape, &d2_a, &scaled)?
            };
            d_total = crate::ops::add(&mut sd.tape, &d_total, &d2_total)?;
            d2_value = Some(d2_total.value.item());
        }
        let grads = sd.tape.backward(&d_total)?;
        adam_d.step(bank, &sd, &grads);
        (d1_total.value.item(), d2_value)
    };

    // generator step against the updated discriminators
    let g1_a = {
        let fl = model.disc_image.logits(&mut s, bank, &source, &s1.coarse)?;
        losses::g_loss_from_logits(&mut s, &fl)?
    };
    let g1_b = {
        let fl = model.disc_image.logits(&mut s, bank, &source, &s2.refined)?;
        losses::g_loss_from_logits(&mut s, &fl)?
    };
    let (g2_a, g2_b) = if let Some(d2) = &model.disc_semantic {
        let cond = crate::ops::concat_channels(&mut s.tape, &[source.clone(), semantic.clone()])?;
        let fake_a =
            crate::ops::concat_channels(&mut s.tape, &[s1.coarse.clone(), s1.sem_coarse.clone()])?;
        let fake_b =
            crate::ops::concat_channels(&mut s.tape, &[s2.refined.clone(), s2.sem_refined.clone()])?;
        let ga = {
            let fl = d2.logits(&mut s, bank, &cond, &fake_a)?;
            losses::g_loss_from_logits(&mut s, &fl)?
        };
        let gb = {
            let fl = d2.logits(&mut s, bank, &cond, &fake_b)?;
            losses::g_loss_from_logits(&mut s, &fl)?
        };
        (Some(ga), Some(gb))
    } else {
        (None, None)
    };
    let g_adv = losses::total_adv_loss(&mut s, w, &g1_a, &g1_b, g2_a.as_ref(), g2_b.as_ref())?;

    let pairs = PixelPairs {
        coarse: (&s1.coarse, &target),
        sem_coarse: (&s1.sem_coarse, &semantic),
        refined: (&s2.refined, &target),
        sem_refined: (&s2.sem_refined, &semantic),
    };
    let total = losses::total_objective(&mut s, w, &pairs, &g_adv, &s2.refined)?;

    // logged components (values only)
    let l1_stage1 = w.pixel[0] * mean_abs_diff(&s1.coarse.value, target_t)
        + w.pixel[1] * mean_abs_diff(&s1.sem_coarse.value, semantic_t);
    let l1_stage2 = w.pixel[2] * mean_abs_diff(&s2.refined.value, target_t)
        + w.pixel[3] * mean_abs_diff(&s2.sem_refined.value, semantic_t);
    let tv_weighted = {
        let mut st = Session::new();
        let img = Var::constant(s2.refined.value.clone());
        w.tv_weight * losses::tv_loss(&mut st, &img).value.item()
    };

    let grads = s.tape.backward(&total)?;
    adam_g.step(bank, &s, &grads);

    Ok(StepOutput {
        row: LossRow {
            iter,
            d1: d1_value,
            d2: d2_value,
            g_adv: g_adv.value.item(),
            l1_stage1,
            l1_stage2,
            tv: tv_weighted,
            total: total.value.item(),
        },
    })
}

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.numel() as f64
}

/// Train on a dataset. Writes checkpoints, the loss-log CSV and sample
/// grids under `out_dir` when set.
pub fn train(cfg: &TrainConfig, dataset: &[PairedSample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    for sample in dataset {
        let s = sample.aerial.shape();
        if s.h != cfg.size || s.w != cfg.size {
            return Err(Error::Config(format!(
                "sample {} is {}x{} but the config says {}",
                sample.id, s.h, s.w, cfg.size
            )));
        }
    }
    if cfg.batch_size > dataset.len() {
        return Err(Error::Config(format!(
            "batch size {} exceeds dataset size {}",
            cfg.batch_size,
            dataset.len()
        )));
    }
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }

    let mut bank = ParamBank::new();
    let model = Model::build(&mut bank, cfg.seed, cfg.net, cfg.ablation)?;
    let mut adam_g = Adam::new(
        model.generator_param_names(&bank),
        cfg.lr,
        cfg.beta1,
        cfg.beta2,
        cfg.adam_eps,
    );
    let mut adam_d = Adam::new(
        model.discriminator_param_names(&bank),
        cfg.lr,
        cfg.beta1,
        cfg.beta2,
        cfg.adam_eps,
    );

    let batches_per_epoch = dataset.len() / cfg.batch_size;
    let mut loss_log = Vec::new();
    let mut iter = 0usize;
    let mut final_checkpoint = None;
    // an explicit iteration cap overrides the epoch budget
    let epoch_budget = if cfg.max_iterations.is_some() {
        usize::MAX
    } else {
        cfg.epochs
    };
    'epochs: for epoch in 0..epoch_budget {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e3779b9));
        order.shuffle(&mut shuffle_rng);
        for b in 0..batches_per_epoch {
            iter += 1;
            let picks: Vec<&PairedSample> = order
                [b * cfg.batch_size..(b + 1) * cfg.batch_size]
                .iter()
                .map(|&i| &dataset[i])
                .collect();
            let (source, target, semantic) = batch_views(&picks, cfg.direction);
            let out = train_step(
                &mut bank, &model, cfg, &mut adam_g, &mut adam_d, iter, &source, &target,
                &semantic,
            )?;
            loss_log.push(out.row);
            if cfg.max_iterations.is_some_and(|cap| iter >= cap) {
                break 'epochs;
            }
        }
        if let Some(dir) = &cfg.out_dir {
            if (epoch + 1) % cfg.checkpoint_every == 0 {
                let path = dir.join(format!("checkpoint_epoch{:04}.xvfg", epoch + 1));
                write_checkpoint(&path, &bank, cfg)?;
                write_sample_grid(&dir.join(format!("samples_epoch{:04}.ppm", epoch + 1)), &bank, &model, cfg, dataset)?;
            }
        }
    }

    if let Some(dir) = &cfg.out_dir {
        let path = dir.join("final.xvfg");
        write_checkpoint(&path, &bank, cfg)?;
        write_sample_grid(&dir.join("samples_final.ppm"), &bank, &model, cfg, dataset)?;
        final_checkpoint = Some(path);
        let mut csv = String::from(LOSS_CSV_HEADER);
        csv.push('\n');
        for row in &loss_log {
            csv.push_str(&row.to_csv());
            csv.push('\n');
        }
        let log_path = dir.join("loss_log.csv");
        std::fs::write(&log_path, csv)
            .map_err(|e| Error::io(log_path.display().to_string(), e))?;
    }

    Ok(TrainOutcome {
        bank,
        model,
        loss_log,
        final_checkpoint,
    })
}

/// Config scalars stored alongside the weights so evaluation can reject a
/// mismatched checkpoint.
fn config_meta(cfg: &TrainConfig) -> Vec<(String, Tensor)> {
    let scalar = |v: f64| Tensor::scalar(v);
    vec![
        ("meta.size".into(), scalar(cfg.size as f64)),
        (
            "meta.direction".into(),
            scalar(match cfg.direction {
                Direction::A2g => 0.0,
                Direction::G2a => 1.0,
            }),
        ),
        (
            "meta.ablation".into(),
            scalar(match cfg.ablation {
                Ablation::A => 0.0,
                Ablation::B => 1.0,
                Ablation::C => 2.0,
                Ablation::D => 3.0,
            }),
        ),
        ("meta.depth".into(), scalar(cfg.net.depth as f64)),
        ("meta.base_channels".into(), scalar(cfg.net.base_channels as f64)),
        (
            "meta.feature_channels".into(),
            scalar(cfg.net.feature_channels as f64),
        ),
        (
            "meta.attention_reduction".into(),
            scalar(cfg.net.attention_reduction as f64),
        ),
        ("meta.seed".into(), scalar(cfg.seed as f64)),
    ]
}

fn write_checkpoint(path: &Path, bank: &ParamBank, cfg: &TrainConfig) -> Result<()> {
    let meta = config_meta(cfg);
    let entries = meta
        .iter()
        .map(|(n, t)| (n.as_str(), t))
        .chain(bank.iter());
    save_checkpoint(path, entries)
}

/// Rebuild a model and bank from a checkpoint's meta entries and weights.
pub fn restore(path: &Path) -> Result<(ParamBank, Model, TrainConfig)> {
    let map = crate::data::load_checkpoint(path)?;
    let meta = |name: &str| -> Result<f64> {
        map.get(name)
            .map(Tensor::item)
            .ok_or_else(|| Error::Checkpoint(format!("missing {name} entry")))
    };
    let mut cfg = TrainConfig {
        size: meta("meta.size")? as usize,
        direction: if meta("meta.direction")? == 0.0 {
            Direction::A2g
        } else {
            Direction::G2a
        },
        seed: meta("meta.seed")? as u64,
        ..TrainConfig::default()
    };
    cfg.ablation = match meta("meta.ablation")? as usize {
        0 => Ablation::A,
        1 => Ablation::B,
        2 => Ablation::C,
        _ => Ablation::D,
    };
    let ablation = cfg.ablation;
    cfg = cfg.with_ablation(ablation);
    cfg.net.depth = meta("meta.depth")? as usize;
    cfg.net.base_channels = meta("meta.base_channels")? as usize;
    cfg.net.feature_channels = meta("meta.feature_channels")? as usize;
    cfg.net.attention_reduction = meta("meta.attention_reduction")? as usize;

    let mut bank = ParamBank::new();
    let model = Model::build(&mut bank, cfg.seed, cfg.net, cfg.ablation)?;
    for name in bank.names().map(str::to_string).collect::<Vec<_>>() {
        let stored = map.get(&name).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint lacks parameter {name:?}"))
        })?;
        if stored.shape() != bank.get(&name).shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name:?} is {} in the checkpoint but {} in the model",
                stored.shape(),
                bank.get(&name).shape()
            )));
        }
        bank.set(&name, stored.clone());
    }
    Ok((bank, model, cfg))
}

/// Forward a whole dataset (batch 1) and return per-sample coarse and
/// refined images.
fn generate_all(
    bank: &ParamBank,
    model: &Model,
    cfg: &TrainConfig,
    dataset: &[PairedSample],
) -> Result<Vec<(Tensor, Tensor)>> {
    let mut out = Vec::with_capacity(dataset.len());
    for sample in dataset {
        let mut s = Session::new();
        let (source, _, semantic) = batch_views(&[sample], cfg.direction);
        let source = Var::constant(source);
        let semantic = Var::constant(semantic);
        let s1 = stage1(&mut s, bank, model, &source, &semantic)?;
        let s2 = stage2(&mut s, bank, model, &source, &s1)?;
        out.push((s1.coarse.value, s2.refined.value));
    }
    Ok(out)
}

fn write_sample_grid(
    path: &Path,
    bank: &ParamBank,
    model: &Model,
    cfg: &TrainConfig,
    dataset: &[PairedSample],
) -> Result<()> {
    let count = dataset.len().min(4);
    let preview = &dataset[..count];
    let generated = generate_all(bank, model, cfg, preview)?;
    let mut rows = Vec::new();
    let mut keep = Vec::new(); // own the tensors the grid borrows
    for (sample, (coarse, refined)) in preview.iter().zip(&generated) {
        let (source, target) = match cfg.direction {
            Direction::A2g => (&sample.aerial, &sample.ground),
            Direction::G2a => (&sample.ground, &sample.aerial),
        };
        keep.push((source.clone(), coarse.clone(), refined.clone(), target.clone()));
    }
    for (source, coarse, refined, target) in &keep {
        rows.push(vec![source, coarse, refined, target]);
    }
    let grid = image::image_grid(&rows)?;
    image::encode_image(&grid, path)
}

/// Map a [-1,1] image into [0,1] for the metric suite.
fn to_unit(img: &Tensor) -> Tensor {
    img.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

/// Metrics for the refined output and, for stage comparison, the coarse
/// output, against the real target view.
pub struct EvalReport {
    pub refined: MetricRow,
    pub coarse: MetricRow,
    /// Mean raw L1 in [-1,1] space, the stage-comparison yardstick.
    pub l1_refined: f64,
    pub l1_coarse: f64,
}

pub fn evaluate(
    bank: &ParamBank,
    model: &Model,
    cfg: &TrainConfig,
    dataset: &[PairedSample],
    probe: &dyn ProbeClassifier,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Data("evaluation dataset is empty".into()));
    }
    let generated = generate_all(bank, model, cfg, dataset)?;
    let targets: Vec<Tensor> = dataset
        .iter()
        .map(|s| match cfg.direction {
            Direction::A2g => s.ground.clone(),
            Direction::G2a => s.aerial.clone(),
        })
        .collect();
    let labels: Vec<usize> = dataset.iter().map(|s| s.scene_label).collect();

    let row_for = |imgs: &[Tensor]| -> Result<MetricRow> {
        let mut ssim_total = 0.0;
        let mut psnr_total = 0.0;
        for (img, target) in imgs.iter().zip(&targets) {
            ssim_total += metrics::ssim(&to_unit(img), &to_unit(target), 1.0)?;
            psnr_total += metrics::psnr(&to_unit(img), &to_unit(target), 1.0);
        }
        let unit_targets: Vec<Tensor> = targets.iter().map(to_unit).collect();
        let unit_imgs: Vec<Tensor> = imgs.iter().map(to_unit).collect();
        let (kl_mean, kl_std) = metrics::kl_score(probe, &unit_imgs, &unit_targets)?;
        let k5 = probe.num_classes().min(5);
        Ok(MetricRow {
            ssim: ssim_total / imgs.len() as f64,
            psnr: psnr_total / imgs.len() as f64,
            kl_mean,
            kl_std,
            top1: metrics::topk_accuracy(probe, &unit_imgs, &labels, 1)?,
            top5: metrics::topk_accuracy(probe, &unit_imgs, &labels, k5)?,
        })
    };

    let coarse_imgs: Vec<Tensor> = generated.iter().map(|(c, _)| c.clone()).collect();
    let refined_imgs: Vec<Tensor> = generated.iter().map(|(_, r)| r.clone()).collect();
    let l1 = |imgs: &[Tensor]| -> f64 {
        imgs.iter()
            .zip(&targets)
            .map(|(a, b)| mean_abs_diff(a, b))
            .sum::<f64>()
            / imgs.len() as f64
    };
    Ok(EvalReport {
        refined: row_for(&refined_imgs)?,
        coarse: row_for(&coarse_imgs)?,
        l1_refined: l1(&refined_imgs),
        l1_coarse: l1(&coarse_imgs),
    })
}

/// One ablation-sweep result row.
#[derive(Clone, Debug)]
pub struct AblateRow {
    pub baseline: Ablation,
    pub method: &'static str,
    pub seed: u64,
    pub psnr: f64,
    pub ssim: f64,
}

pub const ABLATE_CSV_HEADER: &str = "baseline,method,seed,psnr,ssim";

impl AblateRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.baseline,
            self.method,
            self.seed,
            metrics::format_metric_value(self.psnr),
            metrics::format_metric_value(self.ssim)
        )
    }
}

/// Train rows A..D under identical seeds and budgets and evaluate each.
/// Returns per-seed rows followed by one mean row per baseline (seed column
/// reused as the count marker in CSV output by the caller).
pub fn ablate(
    base_cfg: &TrainConfig,
    train_set: &[PairedSample],
    eval_set: &[PairedSample],
    probe: &dyn ProbeClassifier,
    seeds: &[u64],
) -> Result<Vec<AblateRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for ablation in [Ablation::A, Ablation::B, Ablation::C, Ablation::D] {
            let mut cfg = base_cfg.clone().with_ablation(ablation);
            cfg.seed = seed;
            cfg.out_dir = None;
            let outcome = train(&cfg, train_set)?;
            let report = evaluate(&outcome.bank, &outcome.model, &cfg, eval_set, probe)?;
            rows.push(AblateRow {
                baseline: ablation,
                method: ablation.method_string(),
                seed,
                psnr: report.refined.psnr,
                ssim: report.refined.ssim,
            });
        }
    }
    Ok(rows)
}

/// Mean rows per baseline over the per-seed rows.
pub fn ablate_means(rows: &[AblateRow]) -> Vec<AblateRow> {
    [Ablation::A, Ablation::B, Ablation::C, Ablation::D]
        .into_iter()
        .filter_map(|ab| {
            let group: Vec<&AblateRow> = rows.iter().filter(|r| r.baseline == ab).collect();
            if group.is_empty() {
                return None;
            }
            let n = group.len() as f64;
            Some(AblateRow {
                baseline: ab,
                method: ab.method_string(),
                seed: group.len() as u64,
                psnr: group.iter().map(|r| r.psnr).sum::<f64>() / n,
                ssim: group.iter().map(|r| r.ssim).sum::<f64>() / n,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::toy_dataset;
    use crate::metrics::UniformProbe;
    use crate::networks::DeformPlacement;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 2,
            max_iterations: Some(3),
            net: NetConfig {
                depth: 2,
                base_channels: 4,
                feature_channels: 8,
                attention_reduction: 4,
                deform_placement: DeformPlacement::FirstEncoder,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_log_is_seed_deterministic() {
        let data = toy_dataset(0, 4, 32).unwrap();
        let cfg = tiny_cfg();
        let a = train(&cfg, &data).unwrap();
        let b = train(&cfg, &data).unwrap();
        let csv_a: Vec<String> = a.loss_log.iter().map(LossRow::to_csv).collect();
        let csv_b: Vec<String> = b.loss_log.iter().map(LossRow::to_csv).collect();
        assert_eq!(csv_a, csv_b);
    }

    #[test]
    fn ablation_a_has_no_d2_column() {
        let data = toy_dataset(0, 4, 32).unwrap();
        let cfg = tiny_cfg().with_ablation(Ablation::A);
        let out = train(&cfg, &data).unwrap();
        assert!(out.loss_log.iter().all(|r| r.d2.is_none()));
        let csv = out.loss_log[0].to_csv();
        // empty d2 field: two consecutive commas
        assert!(csv.contains(",,"), "{csv}");
    }

    #[test]
    fn ablation_d_logs_d2() {
        let data = toy_dataset(0, 4, 32).unwrap();
        let cfg = tiny_cfg().with_ablation(Ablation::D);
        let out = train(&cfg, &data).unwrap();
        assert!(out.loss_log.iter().all(|r| r.d2.is_some()));
    }

    #[test]
    fn discriminator_step_leaves_generators_unchanged_and_vice_versa() {
        let data = toy_dataset(0, 4, 32).unwrap();
        let cfg = tiny_cfg();
        let mut bank = ParamBank::new();
        let model = Model::build(&mut bank, cfg.seed, cfg.net, cfg.ablation).unwrap();
        let gen_names = model.generator_param_names(&bank);
        let disc_names = model.discriminator_param_names(&bank);
        let mut adam_g = Adam::new(gen_names.clone(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
        let mut adam_d = Adam::new(disc_names.clone(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);

        let picks: Vec<&PairedSample> = data.iter().take(2).collect();
        let (source, target, semantic) = batch_views(&picks, cfg.direction);

        // snapshot, run one full step, then verify cross-updates by
        // re-running each half in isolation
        let gen_before: Vec<Tensor> = gen_names.iter().map(|n| bank.get(n).clone()).collect();
        let disc_before: Vec<Tensor> = disc_names.iter().map(|n| bank.get(n).clone()).collect();
        train_step(
            &mut bank, &model, &cfg, &mut adam_g, &mut adam_d, 1, &source, &target, &semantic,
        )
        .unwrap();
        // both optimizers ran: generators and discriminators both moved
        let gen_moved = gen_names
            .iter()
            .zip(&gen_before)
            .any(|(n, t)| !bank.get(n).bits_eq(t));
        let disc_moved = disc_names
            .iter()
            .zip(&disc_before)
            .any(|(n, t)| !bank.get(n).bits_eq(t));
        assert!(gen_moved && disc_moved);
        // the optimizers never share parameters
        for n in &gen_names {
            assert!(!disc_names.contains(n));
        }
    }

    #[test]
    fn direction_swap_changes_roles_only() {
        let data = toy_dataset(0, 2, 32).unwrap();
        let picks: Vec<&PairedSample> = data.iter().collect();
        let (src_a2g, tgt_a2g, _) = batch_views(&picks, Direction::A2g);
        let (src_g2a, tgt_g2a, _) = batch_views(&picks, Direction::G2a);
        assert!(src_a2g.bits_eq(&tgt_g2a));
        assert!(tgt_a2g.bits_eq(&src_g2a));
    }

    #[test]
    fn ground_to_aerial_trains_through_the_same_path() {
        let data = toy_dataset(0, 4, 32).unwrap();
        let mut cfg = tiny_cfg();
        cfg.direction = Direction::G2a;
        let out = train(&cfg, &data).unwrap();
        assert_eq!(out.loss_log.len(), 3);
        assert!(out.loss_log.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn checkpoint_restore_round_trips_weights_and_config() {
        let data = toy_dataset(0, 4, 32).unwrap();
        let dir = std::env::temp_dir().join("xvfg_trainer_test").join("restore");
        let _ = std::fs::remove_dir_all(&dir);
        let mut cfg = tiny_cfg();
        cfg.out_dir = Some(dir.clone());
        let out = train(&cfg, &data).unwrap();
        let ckpt = out.final_checkpoint.unwrap();
        let (bank, _model, cfg2) = restore(&ckpt).unwrap();
        assert_eq!(cfg2.size, cfg.size);
        assert_eq!(cfg2.ablation, cfg.ablation);
        for (name, tensor) in bank.iter() {
            assert!(out.bank.get(name).bits_eq(tensor), "{name} drifted");
        }
    }

    #[test]
    fn evaluate_real_against_real_is_perfect() {
        // feed the real targets through the metric path by treating them as
        // generated: ssim 1, psnr inf, kl 0
        let data = toy_dataset(0, 3, 32).unwrap();
        let probe = UniformProbe { classes: 4 };
        let targets: Vec<Tensor> = data.iter().map(|s| to_unit(&s.ground)).collect();
        let (kl_mean, kl_std) = metrics::kl_score(&probe, &targets, &targets).unwrap();
        assert_eq!((kl_mean, kl_std), (0.0, 0.0));
        for t in &targets {
            assert!((metrics::ssim(t, t, 1.0).unwrap() - 1.0).abs() <= 1e-12);
            assert!(metrics::psnr(t, t, 1.0).is_infinite());
        }
    }

    #[test]
    fn parameter_counts_step_by_component() {
        // B adds the two attention modules over A; C adds the offset
        // predictors over B; D adds the semantic discriminator over C.
        let net = tiny_cfg().net;
        let counts: Vec<usize> = [Ablation::A, Ablation::B, Ablation::C, Ablation::D]
            .into_iter()
            .map(|ab| {
                let mut bank = ParamBank::new();
                let model = Model::build(&mut bank, 5, net, ab).unwrap();
                model.total_param_count(&bank)
            })
            .collect();
        let mut bank = ParamBank::new();
        let model_d = Model::build(&mut bank, 5, net, Ablation::D).unwrap();
        let attention: usize = model_d
            .attn_image
            .as_ref()
            .map(|m| m.param_count())
            .unwrap()
            + model_d
                .attn_semantic
                .as_ref()
                .map(|m| m.param_count())
                .unwrap();
        let offsets = model_d.coarse_gen.offset_param_count()
            + model_d.refine_gen.offset_param_count()
            + model_d.semantic_gen.offset_param_count();
        let d2 = model_d
            .disc_semantic
            .as_ref()
            .map(|d| d.param_count(&bank))
            .unwrap();
        assert_eq!(counts[1] - counts[0], attention);
        assert_eq!(counts[2] - counts[1], offsets);
        assert_eq!(counts[3] - counts[2], d2);
    }
}
