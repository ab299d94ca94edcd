use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use revi_core::adapter::AdapterConfig;
use revi_core::checkpoint::save_model;
use revi_core::image::write_pgm;
use revi_core::rng::stream;
use revi_core::Tensor;
use tempfile::TempDir;

const SMALL: &str = "\
backbone.image_size = 16
backbone.embed_dim = 8
backbone.depth = 2
backbone.heads = 2
backbone.mlp_ratio = 2
backbone.decoder_channels = 8,4
adapter.width = 4
adapter.lora_rank = 1
data.train_count = 100
data.test_count = 12
pretrain.train_count = 24
pretrain.val_count = 8
pretrain.epochs = 1
optim.lr_init = 1e-3
optim.steps = 50
run.log_every = 10
";

fn revi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_revi"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = revi(args);
    assert!(
        out.status.success(),
        "revi {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let text = format!(
            "{SMALL}{extra}paths.data = {}\npaths.out = {}\n",
            data.display(),
            dir.path().join("runs").display()
        );
        fs::write(dir.path().join("run.cfg"), text).unwrap();
        Workspace { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn cfg(&self) -> String {
        self.path("run.cfg").display().to_string()
    }

    fn s(&self, rel: &str) -> String {
        self.path(rel).display().to_string()
    }
}

fn key_values(line: &str) -> BTreeMap<String, String> {
    line.split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(tree(&path));
        } else {
            out.insert(path.clone(), fs::read(&path).unwrap());
        }
    }
    out
}

#[test]
fn gen_data_layout_and_determinism() {
    let ws = Workspace::new("");
    ok(&["gen-data", "--config", &ws.cfg()]);
    let manifest = fs::read_to_string(ws.path("data/train/manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 100);
    for i in 0..100 {
        assert!(ws.path(&format!("data/train/{i}_img.ppm")).exists());
        assert!(ws.path(&format!("data/train/{i}_mask.pgm")).exists());
    }
    let mut counts = BTreeMap::new();
    for line in manifest.lines() {
        *counts
            .entry(line.split_whitespace().nth(1).unwrap().to_string())
            .or_insert(0) += 1;
    }
    assert_eq!(counts.len(), 4);
    for (kind, c) in &counts {
        assert!((*c - 25i32).abs() <= 1, "{kind}: {c}");
    }
    assert!(ws.path("data/config.txt").exists());

    let first = tree(&ws.path("data"));
    ok(&["gen-data", "--config", &ws.cfg()]);
    assert_eq!(first, tree(&ws.path("data")));
    let other = ws.s("other");
    ok(&["gen-data", "--config", &ws.cfg(), "--seed", "5", "--out", &other]);
    assert_ne!(
        fs::read(ws.path("data/train/0_img.ppm")).unwrap(),
        fs::read(ws.path("other/train/0_img.ppm")).unwrap()
    );
}

#[test]
fn pipeline_smoke_run() {
    let ws = Workspace::new("");
    let cfg = ws.cfg();
    ok(&["gen-data", "--config", &cfg]);
    let pre = ws.s("runs/pre");
    let out = ok(&["pretrain", "--config", &cfg, "--out", &pre]);
    assert!(out.contains("val_iou="));
    let pre_ckpt = ws.s("runs/pre/model.ckpt");

    let run = ws.s("runs/revi");
    let out = ok(&["train", "--config", &cfg, "--checkpoint", &pre_ckpt, "--out", &run]);
    assert!(out.contains("ratio_of_total="));
    let audit = key_values(&fs::read_to_string(ws.path("runs/revi/audit.txt")).unwrap());
    assert_eq!(audit["unchanged"], "true");
    let first: f64 = audit["probe_loss_before"].parse().unwrap();
    let last: f64 = audit["probe_loss_after"].parse().unwrap();
    assert!(
        first.is_finite() && last.is_finite() && last < first,
        "{first} -> {last}"
    );
    let log = fs::read_to_string(ws.path("runs/revi/train.log")).unwrap();
    assert!(log
        .lines()
        .all(|l| l.starts_with("step=") && l.contains(" lr=") && l.contains(" edge=")));
    let resolved = fs::read_to_string(ws.path("runs/revi/config.txt")).unwrap();
    assert!(resolved.contains(&format!("paths.checkpoint = {pre_ckpt}")));

    // evaluation is exactly reproducible and records the requested distortion
    let trained = ws.s("runs/revi/model.ckpt");
    let e1 = ws.s("runs/e1");
    let e2 = ws.s("runs/e2");
    ok(&[
        "eval",
        "--config",
        &cfg,
        "--checkpoint",
        &trained,
        "--distort",
        "blur:15",
        "--out",
        &e1,
    ]);
    ok(&[
        "eval",
        "--config",
        &cfg,
        "--checkpoint",
        &trained,
        "--distort",
        "blur:15",
        "--out",
        &e2,
    ]);
    let r1 = fs::read_to_string(ws.path("runs/e1/report.tsv")).unwrap();
    assert_eq!(r1, fs::read_to_string(ws.path("runs/e2/report.tsv")).unwrap());
    assert!(r1.lines().any(|l| l.starts_with("all\tblur:15\t")));
    let summary = key_values(&fs::read_to_string(ws.path("runs/e1/summary.txt")).unwrap());
    assert!(summary.contains_key("best_f1.blur:15"));

    // the learned decomposition emits one pair per adapted block
    let mask = Tensor::from_fn(&[1, 16, 16], |i| (i % 7) as f64 / 7.0);
    write_pgm(&ws.path("probe.pgm"), &mask).unwrap();
    let dec = ws.s("runs/dec");
    ok(&[
        "decompose",
        &ws.s("probe.pgm"),
        "--learned",
        "--checkpoint",
        &trained,
        "--out",
        &dec,
    ]);
    for block in 0..2 {
        assert!(ws.path(&format!("runs/dec/block{block}_B.pgm")).exists());
        assert!(ws.path(&format!("runs/dec/block{block}_O.pgm")).exists());
    }

    // every placement trains
    for placement in ["encoder", "decoder", "both"] {
        let dir = ws.s(&format!("runs/{placement}"));
        ok(&[
            "train",
            "--config",
            &cfg,
            "--checkpoint",
            &pre_ckpt,
            "--placement",
            placement,
            "--adapter",
            "revi",
            "--out",
            &dir,
        ]);
    }
    let dir = ws.s("runs/conv");
    ok(&[
        "train",
        "--config",
        &cfg,
        "--checkpoint",
        &pre_ckpt,
        "--adapter",
        "conv-equal",
        "--out",
        &dir,
    ]);

    // untrained zero-initialised adapters score exactly like the bare backbone
    let (mut model, _) = revi_core::checkpoint::load_model(&ws.path("runs/pre/model.ckpt")).unwrap();
    let cfg_adapter = AdapterConfig {
        width: 4,
        lora_rank: 1,
        ..AdapterConfig::default()
    };
    model.attach_adapters(&cfg_adapter, &mut stream(0, "t", 0)).unwrap();
    save_model(&ws.path("runs/zero.ckpt"), &model, None).unwrap();
    let bare = ws.s("runs/bare");
    let zero = ws.s("runs/zero");
    ok(&["eval", "--config", &cfg, "--checkpoint", &pre_ckpt, "--out", &bare]);
    ok(&[
        "eval",
        "--config",
        &cfg,
        "--checkpoint",
        &ws.s("runs/zero.ckpt"),
        "--out",
        &zero,
    ]);
    assert_eq!(
        fs::read_to_string(ws.path("runs/bare/report.tsv")).unwrap(),
        fs::read_to_string(ws.path("runs/zero/report.tsv")).unwrap()
    );
}

#[test]
fn classical_decomposition_of_a_rank_one_image() {
    let ws = Workspace::new("");
    let img = Tensor::from_fn(&[1, 24, 32], |p| {
        let (i, j) = ((p / 32) as f64, (p % 32) as f64);
        (0.2 + 0.6 * (i / 23.0)) * (0.3 + 0.7 * (j / 31.0).sqrt())
    });
    write_pgm(&ws.path("r1.pgm"), &img).unwrap();
    let out = ws.s("dec");
    ok(&["decompose", &ws.s("r1.pgm"), "--classical", "--out", &out]);
    let stats = key_values(&fs::read_to_string(ws.path("dec/decompose.txt")).unwrap());
    let mean_o: f64 = stats["mean_abs_sparse"].parse().unwrap();
    let recon: f64 = stats["max_reconstruction_error"].parse().unwrap();
    assert!(mean_o < 2.0 / 255.0, "{mean_o}");
    assert!(recon < 1e-5, "{recon}");
    let o = revi_core::image::read_pgm(&ws.path("dec/O.pgm")).unwrap();
    assert!(o.mean() < 2.0 / 255.0);
    assert!(ws.path("dec/B.pgm").exists());
}

#[test]
fn census_reports_a_small_trainable_share() {
    let out = ok(&["census"]);
    let kv = key_values(out.lines().last().unwrap());
    let ratio: f64 = kv["ratio_of_total"].parse().unwrap();
    assert!(ratio < 0.25, "{ratio}");
    let both = ok(&[
        "census",
        "--placement",
        "both",
        "--adapter",
        "conv-equal",
        "--lora-rank",
        "2",
    ]);
    assert!(both.contains("decoder.0.adapter"));
}

#[test]
fn gradcheck_and_fault_injection() {
    let out = revi(&["gradcheck"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("ska_mke_enhance_loss") && text.contains(" 0 failed"));
    let bad = revi(&["gradcheck", "--inject-fault"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn exit_codes() {
    assert_eq!(revi(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(revi(&["census", "--placement", "sideways"]).status.code(), Some(1));
    assert_eq!(revi(&["decompose", "x.pgm", "--out", "y"]).status.code(), Some(1));
    let ws = Workspace::new("");
    assert_eq!(
        revi(&["eval", "--config", &ws.cfg(), "--checkpoint", &ws.s("missing.ckpt")])
            .status
            .code(),
        Some(3)
    );
    assert_eq!(revi(&["train", "--config", &ws.cfg()]).status.code(), Some(1));
    fs::write(ws.path("bad.cfg"), "optim.colour = 3\n").unwrap();
    assert_eq!(revi(&["census", "--config", &ws.s("bad.cfg")]).status.code(), Some(1));
    assert_eq!(revi(&["--help"]).status.code(), Some(0));
}

#[test]
fn diverging_training_aborts_with_the_sample_seed() {
    let ws = Workspace::new("");
    let cfg = ws.cfg();
    ok(&["gen-data", "--config", &cfg]);
    let backbone = revi_core::config::RunConfig::load(&ws.path("run.cfg"))
        .unwrap()
        .backbone;
    let model = revi_core::backbone::Model::new(backbone, &mut stream(1, "t", 0)).unwrap();
    save_model(&ws.path("rand.ckpt"), &model, None).unwrap();
    fs::write(
        ws.path("hot.cfg"),
        fs::read_to_string(ws.path("run.cfg"))
            .unwrap()
            .replace("optim.lr_init = 1e-3", "optim.lr_init = 1e300"),
    )
    .unwrap();
    let out = revi(&[
        "train",
        "--config",
        &ws.s("hot.cfg"),
        "--checkpoint",
        &ws.s("rand.ckpt"),
        "--out",
        &ws.s("hot"),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("seed"), "{err}");
}
