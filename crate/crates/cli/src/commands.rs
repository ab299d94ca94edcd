use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use revi_core::backbone::Model;
use revi_core::checkpoint::{save_model, Checkpoint};
use revi_core::config::RunConfig;
use revi_core::data::{generate_split, proxy_split, read_split, resize_bilinear, write_split, Distortion};
use revi_core::diagnostics::{corrupted_case, registry, run_cases};
use revi_core::gradcheck::GradCheckConfig;
use revi_core::image::{decode_pgm, decode_ppm, write_pgm};
use revi_core::rng::stream;
use revi_core::rpca::{rpca_decompose, RpcaConfig};
use revi_core::train::{evaluate, mean_iou, mean_loss, train as fit};
use revi_core::{Error, Graph, Result, Tensor};

use crate::{AdapterFlags, Common};

pub const TRAIN: &str = "train";
pub const TEST: &str = "test";
pub const PROXY_TRAIN: &str = "proxy_train";
pub const PROXY_VAL: &str = "proxy_val";

/// Training samples whose mean loss is recorded before and after `train`.
const PROBE_SAMPLES: usize = 32;

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn apply_adapter_flags(cfg: &mut RunConfig, flags: &AdapterFlags) -> Result<()> {
    if let Some(p) = flags.placement {
        cfg.adapter.placement = p;
    }
    if let Some(k) = flags.adapter {
        cfg.adapter.kind = k;
    }
    if let Some(r) = flags.lora_rank {
        cfg.adapter.lora_rank = r;
    }
    cfg.validate()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_resolved(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_text(&dir.join("config.txt"), &cfg.to_text())
}

pub fn gen_data(common: &Common, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = resolve(common)?;
    if let Some(out) = out {
        cfg.paths.data = out;
    }
    let dir = cfg.paths.data.clone();
    create_dir(&dir)?;
    let size = cfg.backbone.image_size;
    let d = &cfg.data;
    for (split, count) in [(TRAIN, d.train_count), (TEST, d.test_count)] {
        let samples = generate_split(cfg.seed, split, count, &d.mix, size);
        write_split(&dir, split, &samples)?;
        println!("{split}: {count} samples");
    }
    let p = &cfg.pretrain;
    for (split, count) in [(PROXY_TRAIN, p.train_count), (PROXY_VAL, p.val_count)] {
        write_split(&dir, split, &proxy_split(cfg.seed, split, count, size))?;
        println!("{split}: {count} samples");
    }
    write_resolved(&dir, &cfg)
}

fn run_dir(cfg: &RunConfig, out: Option<PathBuf>, name: &str) -> Result<PathBuf> {
    let dir = out.unwrap_or_else(|| cfg.paths.out.join(name));
    create_dir(&dir)?;
    Ok(dir)
}

fn check_backbone(cfg: &RunConfig, model: &Model) -> Result<()> {
    if cfg.backbone != model.config {
        return Err(Error::Config(format!(
            "checkpoint backbone {:?} does not match the configured {:?}",
            model.config, cfg.backbone
        )));
    }
    Ok(())
}

pub fn pretrain(common: &Common, out: Option<PathBuf>) -> Result<()> {
    let cfg = resolve(common)?;
    let dir = run_dir(&cfg, out, "pretrain")?;
    write_resolved(&dir, &cfg)?;
    let train_set = read_split(&cfg.paths.data, PROXY_TRAIN)?;
    let val_set = read_split(&cfg.paths.data, PROXY_VAL)?;
    let mut model = Model::new(cfg.backbone.clone(), &mut stream(cfg.seed, "init.backbone", 0))?;
    let mut log = String::new();
    let start = Instant::now();
    let report = fit(&mut model, &train_set, &cfg.pretrain_train_config(), None, |line| {
        println!("{line}");
        log.push_str(&format!("{line}\n"));
    })?;
    let iou = mean_iou(&model, &val_set)?;
    let summary = format!(
        "val_iou={iou:.6} steps={} seconds={:.1}",
        report.losses.len(),
        start.elapsed().as_secs_f64()
    );
    println!("{summary}");
    write_text(&dir.join("train.log"), &log)?;
    write_text(&dir.join("pretrain.txt"), &format!("{summary}\n"))?;
    save_model(&dir.join("model.ckpt"), &model, None)
}

pub fn train(common: &Common, flags: &AdapterFlags, checkpoint: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = resolve(common)?;
    apply_adapter_flags(&mut cfg, flags)?;
    if let Some(c) = checkpoint {
        cfg.paths.checkpoint = Some(c);
    }
    let ckpt_path = cfg
        .paths
        .checkpoint
        .clone()
        .ok_or_else(|| Error::Config("train needs a pretrained checkpoint (--checkpoint)".into()))?;
    let dir = run_dir(&cfg, out, "train")?;
    write_resolved(&dir, &cfg)?;
    let mut model = Checkpoint::load(&ckpt_path)?.to_model()?;
    check_backbone(&cfg, &model)?;
    let census = model.attach_adapters(&cfg.adapter, &mut stream(cfg.seed, "init.adapter", 0))?;
    let census_text = format!(
        "{}trainable={} frozen={} total={} ratio_of_total={:.4} ratio_of_frozen={:.4}\n",
        census.to_table(),
        census.trainable(),
        census.frozen(),
        census.total(),
        census.ratio_of_total(),
        census.ratio_of_frozen()
    );
    print!("{census_text}");
    write_text(&dir.join("census.txt"), &census_text)?;
    let samples = read_split(&cfg.paths.data, TRAIN)?;
    let before = model.store.checksum(|p| p.frozen);
    let probe = &samples[..samples.len().min(PROBE_SAMPLES)];
    let probe_before = mean_loss(&model, probe, &cfg.loss)?;
    let mut log = String::new();
    let report = fit(&mut model, &samples, &cfg.train_config(), None, |line| {
        println!("{line}");
        log.push_str(&format!("{line}\n"));
    });
    write_text(&dir.join("train.log"), &log)?;
    let report = report?;
    let after = model.store.checksum(|p| p.frozen);
    let (first, last) = report.first_last(50);
    let probe_after = mean_loss(&model, probe, &cfg.loss)?;
    let audit = format!(
        "frozen_checksum_before={before:016x} frozen_checksum_after={after:016x} unchanged={} \
         loss_first={first:.6} loss_last={last:.6} probe_loss_before={probe_before:.6} probe_loss_after={probe_after:.6}\n",
        before == after
    );
    print!("{audit}");
    write_text(&dir.join("audit.txt"), &audit)?;
    save_model(&dir.join("model.ckpt"), &model, Some(&report.optimizer))
}

pub fn eval(common: &Common, checkpoint: &Path, out: Option<PathBuf>, distort: &[Distortion]) -> Result<()> {
    let cfg = resolve(common)?;
    let model = Checkpoint::load(checkpoint)?.to_model()?;
    check_backbone(&cfg, &model)?;
    let mut ecfg = cfg.eval_config();
    for d in distort {
        if !ecfg.distortions.contains(d) {
            ecfg.distortions.push(*d);
        }
    }
    let samples = read_split(&cfg.paths.data, TEST)?;
    let report = evaluate(&model, &samples, &ecfg)?;
    let dir = run_dir(&cfg, out, "eval")?;
    write_resolved(&dir, &cfg)?;
    let line = report.summary_line();
    println!("{line}");
    print!("{}", report.to_tsv());
    write_text(&dir.join("report.tsv"), &report.to_tsv())?;
    write_text(&dir.join("summary.txt"), &format!("{line}\n"))
}

fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P6") {
        decode_ppm(&bytes)
    } else {
        decode_pgm(&bytes)
    }
}

/// Channel mean of a C×H×W map, rescaled to [0,1].
fn renormalized(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = t.dims3()?;
    let n = h * w;
    let mean: Vec<f64> = (0..n)
        .map(|p| (0..c).map(|ch| t.data()[ch * n + p]).sum::<f64>() / c as f64)
        .collect();
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    Tensor::new(&[1, h, w], mean.iter().map(|v| (v - lo) / span).collect())
}

pub fn decompose(input: &Path, learned: Option<PathBuf>, out: &Path) -> Result<()> {
    let img = read_image(input)?;
    create_dir(out)?;
    match learned {
        None => {
            let (c, h, w) = img.dims3()?;
            if c != 1 {
                return Err(Error::InvalidArgument(
                    "classical decomposition takes a grey PGM".into(),
                ));
            }
            let d = img.clone().reshape(&[h, w])?;
            let res = rpca_decompose(&d, &RpcaConfig::default())?;
            let recon = res
                .low_rank
                .data()
                .iter()
                .zip(res.sparse.data())
                .zip(d.data())
                .map(|((b, o), x)| (x - b - o).abs())
                .fold(0.0, f64::max);
            let mean_abs_o = res.sparse.data().iter().map(|v| v.abs()).sum::<f64>() / (h * w) as f64;
            write_pgm(&out.join("B.pgm"), &res.low_rank.clone().reshape(&[1, h, w])?)?;
            write_pgm(&out.join("O.pgm"), &res.sparse.map(f64::abs).reshape(&[1, h, w])?)?;
            let stats = format!(
                "iterations={} converged={} final_residual={:.3e} max_reconstruction_error={recon:.3e} mean_abs_sparse={mean_abs_o:.6}\n",
                res.iterations,
                res.converged,
                res.residual_history.last().copied().unwrap_or(0.0)
            );
            print!("{stats}");
            write_text(&out.join("decompose.txt"), &stats)
        }
        Some(ckpt) => {
            let model = Checkpoint::load(&ckpt)?.to_model()?;
            if model.adapter_count() == 0 {
                return Err(Error::InvalidArgument("checkpoint has no adapters to inspect".into()));
            }
            let s = model.config.image_size;
            let (c, h, w) = img.dims3()?;
            let rgb = if c == 3 {
                img
            } else {
                Tensor::from_fn(&[3, h, w], |i| img.data()[i % (h * w)])
            };
            let rgb = if (h, w) == (s, s) {
                rgb
            } else {
                resize_bilinear(&rgb, s, s)?
            };
            let mut g = Graph::inference(&model.store);
            let fwd = model.forward(&mut g, &rgb)?;
            for trace in &fwd.traces {
                if let Some(b) = trace.low_rank {
                    let path = out.join(format!("block{}_B.pgm", trace.site));
                    write_pgm(&path, &renormalized(g.value(b))?)?;
                    println!("{}", path.display());
                }
                let path = out.join(format!("block{}_O.pgm", trace.site));
                write_pgm(&path, &renormalized(g.value(trace.hidden_out))?)?;
                println!("{}", path.display());
            }
            Ok(())
        }
    }
}

pub fn census(common: &Common, flags: &AdapterFlags, checkpoint: Option<PathBuf>) -> Result<()> {
    let mut cfg = resolve(common)?;
    apply_adapter_flags(&mut cfg, flags)?;
    let model = match checkpoint {
        Some(path) => Checkpoint::load(&path)?.to_model()?,
        None => {
            let mut m = Model::new(cfg.backbone.clone(), &mut stream(cfg.seed, "init.backbone", 0))?;
            m.attach_adapters(&cfg.adapter, &mut stream(cfg.seed, "init.adapter", 0))?;
            m
        }
    };
    let c = model.census();
    print!("{}", c.to_table());
    println!(
        "trainable={} frozen={} total={} ratio_of_total={:.4} ratio_of_frozen={:.4}",
        c.trainable(),
        c.frozen(),
        c.total(),
        c.ratio_of_total(),
        c.ratio_of_frozen()
    );
    Ok(())
}

pub fn gradcheck(inject_fault: bool) -> Result<()> {
    let start = Instant::now();
    let mut cases = registry();
    if inject_fault {
        cases.push(corrupted_case());
    }
    let results = run_cases(&cases, GradCheckConfig::default())?;
    let mut failed = 0;
    for r in &results {
        println!(
            "{:<24} {:>10.3e} {}",
            r.name,
            r.max_rel_err,
            if r.passed { "ok" } else { "FAIL" }
        );
        failed += !r.passed as usize;
    }
    println!(
        "{} checks, {failed} failed, {:.2}s",
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(Error::Numerical(format!("{failed} gradient check(s) failed")));
    }
    Ok(())
}
