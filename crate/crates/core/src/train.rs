//! Training loop, evaluation and the robustness grid.

use std::fmt;
use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::autodiff::sigmoid;
use crate::backbone::Model;
use crate::data::{distort, Distortion, Kind, Sample};
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossConfig};
use crate::metrics::{auc, f1_at, Histogram};
use crate::optim::{cosine_lr, AdamW, OptimConfig};
use crate::param::{Grads, Graph};
use crate::rng::{derive_seed, stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub log_every: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 1,
            log_every: 50,
            seed: 0,
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::InvalidArgument(
                "steps, batch_size and log_every must be positive".into(),
            ));
        }
        self.loss.validate()?;
        OptimConfig {
            total_steps: self.steps,
            ..self.optim.clone()
        }
        .validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogLine {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub bce: f64,
    pub edge: f64,
}

impl fmt::Display for LogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} lr={:.3e} loss={:.6} bce={:.6} edge={:.6}",
            self.step, self.lr, self.loss, self.bce, self.edge
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Mean total loss of each step's batch.
    pub losses: Vec<f64>,
    pub log: Vec<LogLine>,
    pub optimizer: AdamW,
}

impl TrainReport {
    /// Mean loss over the first and last `n` steps.
    pub fn first_last(&self, n: usize) -> (f64, f64) {
        let n = n.clamp(1, self.losses.len().max(1));
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
        (mean(&self.losses[..n]), mean(&self.losses[self.losses.len() - n..]))
    }
}

/// Loss values (total, bce, edge) and parameter gradients for one sample.
pub fn sample_gradients(model: &Model, sample: &Sample, loss: &LossConfig) -> Result<([f64; 3], Grads)> {
    let mut g = Graph::new(&model.store);
    let out = model.forward(&mut g, &sample.image)?;
    let parts = total_loss(&mut g, out.logits, &sample.mask, loss)?;
    let values = [
        g.value(parts.total).item(),
        g.value(parts.bce).item(),
        g.value(parts.edge).item(),
    ];
    if !values[0].is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss {} on sample seed {}",
            values[0], sample.seed
        )));
    }
    g.backward(parts.total)?;
    Ok((values, g.grads()))
}

/// Mean total loss over `samples`, without gradients.
pub fn mean_loss(model: &Model, samples: &[Sample], loss: &LossConfig) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("mean loss over an empty set".into()));
    }
    let mut sum = 0.0;
    for sample in samples {
        let mut g = Graph::new(&model.store);
        let out = model.forward(&mut g, &sample.image)?;
        let parts = total_loss(&mut g, out.logits, &sample.mask, loss)?;
        sum += g.value(parts.total).item();
    }
    Ok(sum / samples.len() as f64)
}

/// Optimises every unfrozen parameter of `model` on `samples`, visiting
/// them in a fresh seeded order each epoch.
pub fn train(
    model: &mut Model,
    samples: &[Sample],
    cfg: &TrainConfig,
    resume: Option<AdamW>,
    mut on_log: impl FnMut(&LogLine),
) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let optim = OptimConfig {
        total_steps: cfg.steps,
        ..cfg.optim.clone()
    };
    let mut opt = resume.unwrap_or_else(|| AdamW::new(model.store.len()));
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut log = Vec::new();
    for step in 0..cfg.steps {
        let lr = cosine_lr(step, &optim)?;
        let mut grads = Grads::empty(model.store.len());
        let mut sums = [0.0; 3];
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut stream(cfg.seed, "train.order", epoch));
                epoch += 1;
                cursor = 0;
            }
            let sample = &samples[order[cursor]];
            cursor += 1;
            let (values, g) = sample_gradients(model, sample, &cfg.loss).map_err(|e| annotate(e, step, sample.seed))?;
            grads.accumulate(&g);
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v;
            }
        }
        let b = cfg.batch_size as f64;
        grads.scale(1.0 / b);
        opt.update(&mut model.store, &grads, lr, &optim)
            .map_err(|e| annotate(e, step, samples[order[cursor - 1]].seed))?;
        losses.push(sums[0] / b);
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            let line = LogLine {
                step,
                lr,
                loss: sums[0] / b,
                bce: sums[1] / b,
                edge: sums[2] / b,
            };
            on_log(&line);
            log.push(line);
        }
    }
    Ok(TrainReport {
        losses,
        log,
        optimizer: opt,
    })
}

fn annotate(e: Error, step: usize, seed: u64) -> Error {
    match e {
        Error::Numerical(msg) => Error::Numerical(format!("step {step}, batch sample seed {seed}: {msg}")),
        other => other,
    }
}

/// Sigmoid probabilities for each image, computed on a pool of threads.
pub fn predict_probs(model: &Model, images: &[Tensor]) -> Result<Vec<Tensor>> {
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(images.len().max(1));
    let mut out: Vec<Option<Result<Tensor>>> = (0..images.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunk = images.len().div_ceil(workers).max(1);
        for (imgs, slots) in images.chunks(chunk).zip(out.chunks_mut(chunk)) {
            scope.spawn(move || {
                for (img, slot) in imgs.iter().zip(slots) {
                    *slot = Some(model.predict(img).map(|z| z.map(sigmoid)));
                }
            });
        }
    });
    out.into_iter().map(|r| r.expect("every image predicted")).collect()
}

/// Mean intersection-over-union of `p ≥ 0.5` against the masks.
pub fn mean_iou(model: &Model, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let probs = predict_probs(model, &images)?;
    let mut total = 0.0;
    for (p, s) in probs.iter().zip(samples) {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&pv, &m) in p.data().iter().zip(s.mask.data()) {
            let (a, b) = (pv >= 0.5, m == 1.0);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        total += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    Ok(total / samples.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum F1Mode {
    /// Best F1 of each image, averaged over images.
    PerImage,
    /// One threshold sweep over the pixels of all images together.
    Pooled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub mode: F1Mode,
    pub distortions: Vec<Distortion>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: F1Mode::PerImage,
            distortions: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
struct ImageScore {
    kind: Kind,
    hist: Histogram,
    best: f64,
    threshold: f64,
    at_half: f64,
    auc: Option<f64>,
}

fn score(probs: &Tensor, sample: &Sample) -> Result<ImageScore> {
    let (p, m) = (probs.data(), sample.mask.data());
    let hist = Histogram::new(p, m);
    let (best, threshold) = hist.best();
    let has_both = m.contains(&1.0) && m.contains(&0.0);
    Ok(ImageScore {
        kind: sample.kind,
        best,
        threshold,
        at_half: f1_at(p, m, 0.5),
        auc: if has_both { Some(auc(p, m)?) } else { None },
        hist,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub images: usize,
    pub best_f1: f64,
    pub threshold_at_best: f64,
    pub f1_at_half: f64,
    /// Macro average over images that contain both classes.
    pub auc: Option<f64>,
    pub auc_images: usize,
}

fn summarise(scores: &[&ImageScore], mode: F1Mode) -> Summary {
    let n = scores.len() as f64;
    let mean = |f: &dyn Fn(&ImageScore) -> f64| scores.iter().map(|s| f(s)).sum::<f64>() / n;
    let aucs: Vec<f64> = scores.iter().filter_map(|s| s.auc).collect();
    let (best_f1, threshold_at_best, f1_at_half) = match mode {
        F1Mode::PerImage => (mean(&|s| s.best), mean(&|s| s.threshold), mean(&|s| s.at_half)),
        F1Mode::Pooled => {
            let mut pooled = Histogram::default();
            for s in scores {
                pooled.merge(&s.hist);
            }
            let (f, t) = pooled.best();
            (f, t, pooled.f1_at(crate::metrics::THRESHOLDS / 2))
        }
    };
    Summary {
        images: scores.len(),
        best_f1,
        threshold_at_best,
        f1_at_half,
        auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
        auc_images: aucs.len(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mode: F1Mode,
    pub overall: Summary,
    pub per_kind: Vec<(Kind, Summary)>,
    /// One summary per requested distortion.
    pub grid: Vec<(Distortion, Summary)>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("nan".to_string(), |v| format!("{v:.6}"))
}

impl EvalReport {
    pub fn grid_lookup(&self, d: Distortion) -> Option<&Summary> {
        self.grid.iter().find(|(g, _)| *g == d).map(|(_, s)| s)
    }

    /// Tab-separated table with one row per kind and per distortion.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("scope\tcondition\timages\tbest_f1\tthreshold\tf1_at_0.5\tauc\tauc_images\n");
        let mut row = |scope: &str, cond: &str, s: &Summary| {
            let _ = writeln!(
                out,
                "{scope}\t{cond}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}",
                s.images,
                s.best_f1,
                s.threshold_at_best,
                s.f1_at_half,
                fmt_opt(s.auc),
                s.auc_images
            );
        };
        row("all", "clean", &self.overall);
        for (k, s) in &self.per_kind {
            row(k.name(), "clean", s);
        }
        for (d, s) in &self.grid {
            row("all", &d.to_string(), s);
        }
        out
    }

    /// Single line of `metric=value` pairs.
    pub fn summary_line(&self) -> String {
        let mut parts = vec![
            format!(
                "mode={}",
                if self.mode == F1Mode::Pooled {
                    "pooled"
                } else {
                    "per_image"
                }
            ),
            format!("images={}", self.overall.images),
            format!("best_f1={:.6}", self.overall.best_f1),
            format!("auc={}", fmt_opt(self.overall.auc)),
            format!("threshold_at_best={:.6}", self.overall.threshold_at_best),
            format!("f1_at_0.5={:.6}", self.overall.f1_at_half),
        ];
        for (k, s) in &self.per_kind {
            parts.push(format!("best_f1.{k}={:.6}", s.best_f1));
        }
        for (d, s) in &self.grid {
            parts.push(format!("best_f1.{d}={:.6}", s.best_f1));
        }
        parts.join(" ")
    }
}

/// Scores `model` on clean images and on each requested distortion.
pub fn evaluate(model: &Model, samples: &[Sample], cfg: &EvalConfig) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let run = |images: Vec<Tensor>| -> Result<Vec<ImageScore>> {
        let probs = predict_probs(model, &images)?;
        probs.iter().zip(samples).map(|(p, s)| score(p, s)).collect()
    };
    let clean = run(samples.iter().map(|s| s.image.clone()).collect())?;
    let all: Vec<&ImageScore> = clean.iter().collect();
    let overall = summarise(&all, cfg.mode);
    let per_kind = Kind::ALL
        .into_iter()
        .filter_map(|k| {
            let subset: Vec<&ImageScore> = clean.iter().filter(|s| s.kind == k).collect();
            (!subset.is_empty()).then(|| (k, summarise(&subset, cfg.mode)))
        })
        .collect();
    let mut grid = Vec::new();
    for &d in &cfg.distortions {
        let images = samples
            .iter()
            .enumerate()
            .map(|(i, s)| distort(&s.image, d, derive_seed(cfg.seed, "noise", i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let scores = run(images)?;
        grid.push((d, summarise(&scores.iter().collect::<Vec<_>>(), cfg.mode)));
    }
    Ok(EvalReport {
        mode: cfg.mode,
        overall,
        per_kind,
        grid,
    })
}
