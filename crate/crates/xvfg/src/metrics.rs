//! Image-quality and classification metrics: PSNR, SSIM, the KL score
//! against a reference set, and top-k accuracy through a pluggable probe
//! classifier.
//!
//! Metric inputs are images in [0, max_value]; color images are converted
//! to ITU-R 601 luma before SSIM. SSIM uses the standard 11x11 Gaussian
//! window with sigma 1.5, K1 = 0.01, K2 = 0.03, evaluated over valid window
//! positions only.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Probability floor applied before logs in the KL score.
pub const KL_FLOOR: f64 = 1e-12;

/// 10 log10(max^2 / MSE); identical images return the infinite sentinel,
/// rendered as "inf" in reports.
pub fn psnr(a: &Tensor, b: &Tensor, max_value: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "psnr shape mismatch");
    let mse = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_value * max_value / mse).log10()
    }
}

/// ITU-R 601 luma of a [N,3,H,W] image, or a copy of a single-channel one.
fn to_luma(img: &Tensor) -> Result<Tensor> {
    let s = img.shape();
    match s.c {
        1 => Ok(img.clone()),
        3 => {
            let os = Shape::new(s.n, 1, s.h, s.w);
            let d = img.data();
            let mut out = vec![0.0; os.numel()];
            for n in 0..s.n {
                for h in 0..s.h {
                    for w in 0..s.w {
                        out[os.index(n, 0, h, w)] = 0.299 * d[s.index(n, 0, h, w)]
                            + 0.587 * d[s.index(n, 1, h, w)]
                            + 0.114 * d[s.index(n, 2, h, w)];
                    }
                }
            }
            Ok(Tensor::new(os, out))
        }
        c => Err(Error::shape(
            "ssim",
            format!("expected 1 or 3 channels, got {c}"),
        )),
    }
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut total = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        total += *v;
    }
    for v in &mut k {
        *v /= total;
    }
    k
}

/// Valid-region separable Gaussian filter of an H x W plane.
fn filter_valid(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    // rows first
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * plane[y * w + x + i];
            }
            tmp[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean structural similarity over valid window positions, in [-1, 1].
pub fn ssim(a: &Tensor, b: &Tensor, max_value: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "ssim",
            format!("operands differ: {} vs {}", a.shape(), b.shape()),
        ));
    }
    let s = a.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            format!("image {}x{} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window", s.h, s.w),
        ));
    }
    let la = to_luma(a)?;
    let lb = to_luma(b)?;
    let c1 = (SSIM_K1 * max_value) * (SSIM_K1 * max_value);
    let c2 = (SSIM_K2 * max_value) * (SSIM_K2 * max_value);
    let hw = s.h * s.w;
    let mut total = 0.0;
    let mut count = 0usize;
    for n in 0..s.n {
        let pa = &la.data()[n * hw..(n + 1) * hw];
        let pb = &lb.data()[n * hw..(n + 1) * hw];
        let sq_a: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let sq_b: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(pb.iter()).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(pa, s.h, s.w);
        let mu_b = filter_valid(pb, s.h, s.w);
        let m_aa = filter_valid(&sq_a, s.h, s.w);
        let m_bb = filter_valid(&sq_b, s.h, s.w);
        let m_ab = filter_valid(&ab, s.h, s.w);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = m_aa[i] - ma * ma;
            let var_b = m_bb[i] - mb * mb;
            let cov = m_ab[i] - ma * mb;
            let val = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
            total += val;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

// ── probe-based metrics ─────────────────────────────────────────────────

/// A deterministic image classifier producing a probability vector.
pub trait ProbeClassifier {
    fn num_classes(&self) -> usize;
    /// Probabilities over classes for one [1,3,H,W] image; sums to 1.
    fn probabilities(&self, image: &Tensor) -> Vec<f64>;
}

/// The maximally uninformative probe; useful as a fixture.
pub struct UniformProbe {
    pub classes: usize,
}

impl ProbeClassifier for UniformProbe {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn probabilities(&self, _image: &Tensor) -> Vec<f64> {
        vec![1.0 / self.classes as f64; self.classes]
    }
}

/// KL(p_gen || mean p_ref) per generated image; returns (mean, std) over the
/// generated set, with distributions floored at [`KL_FLOOR`] before logs.
/// The std is the population standard deviation.
pub fn kl_score(
    probe: &dyn ProbeClassifier,
    generated: &[Tensor],
    reference: &[Tensor],
) -> Result<(f64, f64)> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::Data("kl_score: empty image set".into()));
    }
    let k = probe.num_classes();
    let mut mean_ref = vec![0.0; k];
    for img in reference {
        for (acc, p) in mean_ref.iter_mut().zip(probe.probabilities(img)) {
            *acc += p;
        }
    }
    for v in &mut mean_ref {
        *v /= reference.len() as f64;
    }
    let mut scores = Vec::with_capacity(generated.len());
    for img in generated {
        let p = probe.probabilities(img);
        let mut kl = 0.0;
        for (pi, qi) in p.iter().zip(mean_ref.iter()) {
            let pf = pi.max(KL_FLOOR);
            let qf = qi.max(KL_FLOOR);
            kl += pf * (pf.ln() - qf.ln());
        }
        scores.push(kl);
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / scores.len() as f64;
    Ok((mean, var.sqrt()))
}

/// Fraction of images whose label lands in the probe's k most probable
/// classes. Ties order by ascending class index, so with a uniform probe the
/// lowest class indices win.
pub fn topk_accuracy(
    probe: &dyn ProbeClassifier,
    generated: &[Tensor],
    labels: &[usize],
    k: usize,
) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::Data("topk_accuracy: empty image set".into()));
    }
    if generated.len() != labels.len() {
        return Err(Error::Data(format!(
            "topk_accuracy: {} images but {} labels",
            generated.len(),
            labels.len()
        )));
    }
    let classes = probe.num_classes();
    if k == 0 || k > classes {
        return Err(Error::Config(format!(
            "topk_accuracy: k = {k} outside 1..={classes}"
        )));
    }
    let mut hits = 0usize;
    for (img, &label) in generated.iter().zip(labels) {
        if label >= classes {
            return Err(Error::Data(format!(
                "topk_accuracy: label {label} out of range for {classes} classes"
            )));
        }
        let probs = probe.probabilities(img);
        let mut order: Vec<usize> = (0..classes).collect();
        // descending probability, ascending class index on ties
        order.sort_by(|&a, &b| {
            probs[b]
                .partial_cmp(&probs[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        if order[..k].contains(&label) {
            hits += 1;
        }
    }
    Ok(hits as f64 / generated.len() as f64)
}

/// One row of the metric report; kl and top-k are optional because they need
/// a probe.
#[derive(Debug, Clone, Copy)]
pub struct MetricRow {
    pub ssim: f64,
    pub psnr: f64,
    pub kl_mean: f64,
    pub kl_std: f64,
    pub top1: f64,
    pub top5: f64,
}

/// CSV header shared by the eval and ablation reports.
pub const METRIC_CSV_HEADER: &str = "method,direction,size,ssim,psnr,kl_mean,kl_std,top1,top5";

pub fn format_metric_value(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct per-window SSIM with explicit weighted sums; the oracle the
    /// filtering route must match.
    fn ssim_oracle(a: &Tensor, b: &Tensor, max_value: f64) -> f64 {
        let la = to_luma(a).unwrap();
        let lb = to_luma(b).unwrap();
        let s = la.shape();
        let k = gaussian_kernel();
        let c1 = (SSIM_K1 * max_value) * (SSIM_K1 * max_value);
        let c2 = (SSIM_K2 * max_value) * (SSIM_K2 * max_value);
        let mut total = 0.0;
        let mut count = 0;
        for n in 0..s.n {
            for oy in 0..=(s.h - SSIM_WINDOW) {
                for ox in 0..=(s.w - SSIM_WINDOW) {
                    let mut ma = 0.0;
                    let mut mb = 0.0;
                    let mut maa = 0.0;
                    let mut mbb = 0.0;
                    let mut mab = 0.0;
                    for dy in 0..SSIM_WINDOW {
                        for dx in 0..SSIM_WINDOW {
                            let wgt = k[dy] * k[dx];
                            let va = la.at(n, 0, oy + dy, ox + dx);
                            let vb = lb.at(n, 0, oy + dy, ox + dx);
                            ma += wgt * va;
                            mb += wgt * vb;
                            maa += wgt * va * va;
                            mbb += wgt * vb * vb;
                            mab += wgt * va * vb;
                        }
                    }
                    let var_a = maa - ma * ma;
                    let var_b = mbb - mb * mb;
                    let cov = mab - ma * mb;
                    total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    fn rand_img(shape: Shape, seed: u64, max: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(shape, 0.0, max, &mut rng)
    }

    #[test]
    fn psnr_closed_forms() {
        let s = Shape::new(1, 1, 4, 4);
        let a = Tensor::full(s, 0.3);
        assert!(psnr(&a, &a, 1.0).is_infinite());
        // uniform difference of max-value: 0 dB
        let zero = Tensor::zeros(s);
        let one = Tensor::ones(s);
        assert!((psnr(&zero, &one, 1.0) - 0.0).abs() < 1e-12);
        // uniform difference of max/2: 10 log10(4) = 6.0206 dB
        let half = Tensor::full(s, 0.5);
        assert!((psnr(&zero, &half, 1.0) - 10.0 * 4.0f64.log10()).abs() < 1e-12);
        assert!((psnr(&zero, &half, 1.0) - 6.0205999132).abs() < 1e-6);
    }

    #[test]
    fn psnr_strictly_decreases_with_mse() {
        let s = Shape::new(1, 1, 3, 3);
        let zero = Tensor::zeros(s);
        let mut last = f64::INFINITY;
        for step in 1..=5 {
            let delta = Tensor::full(s, step as f64 * 0.1);
            let p = psnr(&zero, &delta, 1.0);
            assert!(p < last, "psnr did not decrease: {p} vs {last}");
            last = p;
        }
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let img = rand_img(Shape::new(1, 3, 16, 16), 3, 1.0);
        let v = ssim(&img, &img, 1.0).unwrap();
        assert!((v - 1.0).abs() <= 1e-12, "{v}");
    }

    #[test]
    fn ssim_matches_per_window_oracle() {
        for seed in [10u64, 11, 12] {
            let a = rand_img(Shape::new(1, 3, 16, 16), seed, 1.0);
            let b = rand_img(Shape::new(1, 3, 16, 16), seed + 100, 1.0);
            let fast = ssim(&a, &b, 1.0).unwrap();
            let slow = ssim_oracle(&a, &b, 1.0);
            assert!((fast - slow).abs() <= 1e-9, "seed {seed}: {fast} vs {slow}");
        }
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = rand_img(Shape::new(1, 1, 16, 16), 20, 1.0);
        let b = rand_img(Shape::new(1, 1, 16, 16), 21, 1.0);
        let ab = ssim(&a, &b, 1.0).unwrap();
        let ba = ssim(&b, &a, 1.0).unwrap();
        assert!((ab - ba).abs() <= 1e-12);
    }

    #[test]
    fn inverted_zero_mean_pattern_has_negative_ssim() {
        // a checkerboard around mid-gray against its inversion: structure
        // anti-correlates, so the index goes negative.
        let s = Shape::new(1, 1, 16, 16);
        let mut data = vec![0.0; s.numel()];
        for h in 0..16 {
            for w in 0..16 {
                data[s.index(0, 0, h, w)] = if (h + w) % 2 == 0 { 0.9 } else { 0.1 };
            }
        }
        let a = Tensor::new(s, data);
        let b = a.map(|v| 1.0 - v);
        let v = ssim(&a, &b, 1.0).unwrap();
        assert!(v < 0.0, "{v}");
    }

    #[test]
    fn ssim_rejects_images_smaller_than_the_window() {
        let a = Tensor::zeros(Shape::new(1, 1, 8, 8));
        assert!(ssim(&a, &a, 1.0).is_err());
    }

    struct FixedProbe {
        table: Vec<(u64, Vec<f64>)>,
    }

    impl ProbeClassifier for FixedProbe {
        fn num_classes(&self) -> usize {
            self.table[0].1.len()
        }
        fn probabilities(&self, image: &Tensor) -> Vec<f64> {
            let key = image.checksum();
            self.table
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, p)| p.clone())
                .expect("unknown image")
        }
    }

    #[test]
    fn kl_of_identical_sets_under_constant_probe_is_zero() {
        let imgs: Vec<Tensor> = (0..4)
            .map(|i| rand_img(Shape::new(1, 3, 8, 8), 30 + i, 1.0))
            .collect();
        let probe = UniformProbe { classes: 4 };
        let (mean, std) = kl_score(&probe, &imgs, &imgs).unwrap();
        assert_eq!(mean, 0.0);
        assert_eq!(std, 0.0);
    }

    #[test]
    fn kl_closed_form_ln_two() {
        let g = rand_img(Shape::new(1, 3, 8, 8), 40, 1.0);
        let r = rand_img(Shape::new(1, 3, 8, 8), 41, 1.0);
        let probe = FixedProbe {
            table: vec![
                (g.checksum(), vec![1.0, 0.0]),
                (r.checksum(), vec![0.5, 0.5]),
            ],
        };
        let (mean, std) = kl_score(&probe, &[g], &[r]).unwrap();
        assert!((mean - std::f64::consts::LN_2).abs() <= 1e-9, "{mean}");
        assert_eq!(std, 0.0);
    }

    #[test]
    fn kl_matches_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let imgs: Vec<Tensor> = (0..3)
            .map(|i| rand_img(Shape::new(1, 3, 8, 8), 60 + i, 1.0))
            .collect();
        let refs: Vec<Tensor> = (0..2)
            .map(|i| rand_img(Shape::new(1, 3, 8, 8), 70 + i, 1.0))
            .collect();
        let mut table = Vec::new();
        for img in imgs.iter().chain(refs.iter()) {
            let mut p: Vec<f64> = (0..4).map(|_| rng.gen_range(0.01..1.0)).collect();
            let total: f64 = p.iter().sum();
            for v in &mut p {
                *v /= total;
            }
            table.push((img.checksum(), p));
        }
        let probe = FixedProbe { table: table.clone() };
        let (mean, _) = kl_score(&probe, &imgs, &refs).unwrap();

        // independent summation
        let dist = |img: &Tensor| -> Vec<f64> {
            table
                .iter()
                .find(|(k, _)| *k == img.checksum())
                .unwrap()
                .1
                .clone()
        };
        let mut qbar = [0.0; 4];
        for r in &refs {
            for (acc, v) in qbar.iter_mut().zip(dist(r)) {
                *acc += v / refs.len() as f64;
            }
        }
        let mut oracle = 0.0;
        for g in &imgs {
            let p = dist(g);
            let mut kl = 0.0;
            for i in 0..4 {
                kl += p[i] * (p[i].ln() - qbar[i].ln());
            }
            oracle += kl / imgs.len() as f64;
        }
        assert!((mean - oracle).abs() <= 1e-12);
        use rand::Rng;
    }

    #[test]
    fn kl_is_nonnegative_on_floored_distributions() {
        let g = rand_img(Shape::new(1, 3, 8, 8), 80, 1.0);
        let r = rand_img(Shape::new(1, 3, 8, 8), 81, 1.0);
        let probe = FixedProbe {
            table: vec![
                (g.checksum(), vec![0.25, 0.25, 0.25, 0.25]),
                (r.checksum(), vec![0.97, 0.01, 0.01, 0.01]),
            ],
        };
        let (mean, _) = kl_score(&probe, &[g], &[r]).unwrap();
        assert!(mean >= 0.0);
    }

    #[test]
    fn top_k_equal_to_class_count_is_always_one() {
        let imgs: Vec<Tensor> = (0..3)
            .map(|i| rand_img(Shape::new(1, 3, 8, 8), 90 + i, 1.0))
            .collect();
        let probe = UniformProbe { classes: 4 };
        let acc = topk_accuracy(&probe, &imgs, &[3, 1, 2], 4).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn uniform_probe_tie_breaks_ascending() {
        // all labels are class 0; ascending tie-break puts class 0 first
        let imgs: Vec<Tensor> = (0..2)
            .map(|i| rand_img(Shape::new(1, 3, 8, 8), 95 + i, 1.0))
            .collect();
        let probe = UniformProbe { classes: 4 };
        assert_eq!(topk_accuracy(&probe, &imgs, &[0, 0], 1).unwrap(), 1.0);
        // and class 3 can never win a k=1 tie-break
        assert_eq!(topk_accuracy(&probe, &imgs, &[3, 3], 1).unwrap(), 0.0);
    }

    #[test]
    fn topk_is_monotone_in_k() {
        let imgs: Vec<Tensor> = (0..5)
            .map(|i| rand_img(Shape::new(1, 3, 8, 8), 100 + i, 1.0))
            .collect();
        let mut table = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for img in &imgs {
            use rand::Rng;
            let mut p: Vec<f64> = (0..6).map(|_| rng.gen_range(0.01..1.0)).collect();
            let total: f64 = p.iter().sum();
            for v in &mut p {
                *v /= total;
            }
            table.push((img.checksum(), p));
        }
        let probe = FixedProbe { table };
        let labels = [0, 2, 4, 1, 5];
        let mut last = 0.0;
        for k in 1..=6 {
            let acc = topk_accuracy(&probe, &imgs, &labels, k).unwrap();
            assert!(acc >= last);
            last = acc;
        }
        assert_eq!(last, 1.0);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let imgs = vec![rand_img(Shape::new(1, 3, 8, 8), 110, 1.0)];
        let probe = UniformProbe { classes: 4 };
        assert!(topk_accuracy(&probe, &imgs, &[4], 1).is_err());
    }
}
