//! End-to-end runs of the `seld` binary and library-level contracts of the
//! training and inference commands.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seld_cli::config::{Augmentations, RunConfig};
use seld_cli::data::{windows, Clip};
use seld_cli::infer::{infer_clip, InferSettings};
use seld_cli::synth::{toy_scene, ToySceneSpec};
use seld_cli::train::{fit, LoopSettings};
use seld_core::features::{extract, MelBank};
use seld_core::model::{Model, ModelConfig, PoolingProfile, Preset, KernelScheme};
use tempfile::TempDir;

const MICRO: &str = "preset=small
n_classes=4
channels=4
n_cst=1
pooling=front
ule_kernels=10x4
fc_hidden=8
dropout=0
input_frames=250
batch_size=2
epochs=2
max_steps=2
lr_peak=1e-3
seed=5
";

fn seld(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seld")).args(args).output().expect("run seld")
}

fn ok(args: &[&str]) -> String {
    let out = seld(args);
    assert!(
        out.status.success(),
        "seld {args:?} failed: {}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    seld(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a config for a run rooted at `dir`, with extra `key=value` lines.
fn write_config(dir: &Path, data: &Path, extra: &str) -> PathBuf {
    let text = format!(
        "{MICRO}data_dir={}\nlabels_dir={}\ncheckpoint_dir={}\nreport_dir={}\n{extra}",
        data.display(),
        data.display(),
        dir.join("ckpt").display(),
        dir.join("reports").display()
    );
    let path = dir.join("run.config");
    std::fs::write(&path, text).unwrap();
    path
}

/// Loss CSV rows without the config echo, which names run-specific paths.
fn loss_rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().filter(|l| !l.starts_with('#')).map(String::from).collect()
}

#[test]
fn pipeline_runs_end_to_end_and_deterministically() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    ok(&["synth", "--out", s(&data), "--count", "2", "--seed", "3"]);
    assert!(data.join("toy_000.wav").exists() && data.join("toy_001.csv").exists());

    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        std::fs::create_dir_all(dir).unwrap();
        let cfg = write_config(dir, &data, "");
        ok(&["train", "--config", s(&cfg)]);
    }
    let (la, lb) = (loss_rows(&a.join("reports/train_loss.csv")), loss_rows(&b.join("reports/train_loss.csv")));
    assert_eq!(la[0], "step,epoch,lr,loss,augmentation");
    assert_eq!(la.len(), 3);
    assert_eq!(la, lb, "same seed must give identical loss curves");
    assert!(a.join("ckpt/epoch_001.ckpt").exists() && a.join("ckpt/epoch_002.ckpt").exists());

    let ckpt = a.join("ckpt/final.ckpt");
    let cfg = a.join("run.config");

    // zero finetuning steps leave the checkpoint unchanged
    let tuned = a.join("tuned.ckpt");
    ok(&["finetune-vtm", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&tuned), "--steps", "0"]);
    let (m0, m1) = (Model::<f32>::load(&ckpt).unwrap(), Model::<f32>::load(&tuned).unwrap());
    assert_eq!(m0.params, m1.params);

    // inference from audio and from cached features agree
    let pred = a.join("pred");
    ok(&["infer", "--checkpoint", s(&ckpt), "--out", s(&pred), s(&data)]);
    let feats = a.join("feats");
    ok(&["features", "--input", s(&data), "--out", s(&feats)]);
    let pred_feat = a.join("pred_feat");
    ok(&["infer", "--checkpoint", s(&ckpt), "--out", s(&pred_feat), s(&feats)]);
    for name in ["toy_000.csv", "toy_001.csv"] {
        let body = |d: &Path| loss_rows(&d.join(name));
        assert_eq!(body(&pred), body(&pred_feat));
        assert!(pred.join(name.replace(".csv", ".accdoa.csv")).exists());
    }
    ok(&["infer", "--checkpoint", s(&ckpt), "--out", s(&a.join("pred_tta")), "--io", "--ctai", "--acs-count", "3", s(&data)]);

    // scoring predictions runs; scoring the references against themselves is perfect
    ok(&["eval", "--pred", s(&pred), "--ref", s(&data), "--classes", "4"]);
    let report = a.join("metrics.csv");
    let text = ok(&["eval", "--pred", s(&data), "--ref", s(&data), "--classes", "4", "--out", s(&report)]);
    assert!(text.contains("SELD score 0.0000"), "{text}");
    assert!(report.exists());

    let analysis = a.join("analysis");
    let labels = data.join("toy_000.csv");
    ok(&["analyze", "--checkpoint", s(&ckpt), "--input", s(&data.join("toy_000.wav")), "--labels", s(&labels), "--out", s(&analysis)]);
    for f in ["attention_map.csv", "attention_map_perturbed.csv", "similarity.csv", "similarity_perturbed.csv", "analysis.csv"] {
        let text = std::fs::read_to_string(analysis.join(f)).unwrap();
        assert!(text.starts_with('#'), "{f} lacks the config echo");
    }
}

#[test]
fn exit_codes_follow_error_kind() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    ok(&["synth", "--out", s(&data), "--count", "1", "--seed", "1"]);

    // usage and configuration errors
    assert_eq!(code(&["train"]), 2);
    let bad = tmp.path().join("bad.config");
    std::fs::write(&bad, "no_such_key=1\n").unwrap();
    assert_eq!(code(&["train", "--config", s(&bad)]), 2);
    let dir = tmp.path().join("cfg");
    std::fs::create_dir_all(&dir).unwrap();
    let frames = write_config(&dir, &data, "seq_len_s=7\n");
    assert_eq!(code(&["train", "--config", s(&frames)]), 2);

    // data errors
    let missing = tmp.path().join("missing");
    std::fs::create_dir_all(&missing).unwrap();
    let empty = write_config(&missing, &missing, "");
    assert_eq!(code(&["train", "--config", s(&empty)]), 3);
    assert_eq!(code(&["eval", "--pred", s(&missing), "--ref", s(&missing), "--classes", "4"]), 3);

    // numeric failure: a diverging learning rate
    let div = tmp.path().join("div");
    std::fs::create_dir_all(&div).unwrap();
    let cfg = write_config(&div, &data, "").to_path_buf();
    let text = std::fs::read_to_string(&cfg).unwrap().replace("lr_peak=1e-3", "lr_peak=1e30").replace("max_steps=2", "max_steps=20");
    std::fs::write(&cfg, text.replace("epochs=2", "epochs=20")).unwrap();
    assert_eq!(code(&["train", "--config", s(&cfg)]), 4);
}

fn micro_model(input_frames: usize) -> ModelConfig {
    let mut m = ModelConfig::preset(Preset::Small, KernelScheme::Uniscale, 4);
    m.channels = 4;
    m.n_cst = 1;
    m.pooling = PoolingProfile::Front;
    m.ule_kernels = vec![(10, 4)];
    m.fc_hidden = 8;
    m.dropout = 0.0;
    m.input_frames = input_frames;
    m
}

fn toy_clips(n: u64, duration_s: f64) -> Vec<Clip> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let bank = MelBank::standard();
    (0..n)
        .map(|i| {
            let scene = toy_scene(&ToySceneSpec { duration_s, ..Default::default() }, &mut rng);
            Clip { name: format!("c{i}"), feat: extract(&scene.render(i), &bank).unwrap(), labels: scene.labels() }
        })
        .collect()
}

#[test]
fn zero_learning_rate_keeps_parameters_bit_identical() {
    let mut cfg = RunConfig::from_model(micro_model(250));
    cfg.batch_size = 2;
    cfg.epochs = 2;
    let data = windows(&toy_clips(3, 5.0), 250, cfg.model.layout()).unwrap();
    let mut model = Model::<f32>::init(cfg.model.clone(), 0).unwrap();
    let before = model.params.clone();
    let mut settings = LoopSettings::pretraining(&cfg, data.len());
    settings.schedule = None;
    settings.constant_lr = 0.0;
    let report = fit(&mut model, &data, &cfg, &settings).unwrap();
    assert_eq!(report.log.len(), 4);
    assert!(report.log.iter().all(|l| l.loss.is_finite()));
    assert_eq!(model.params, before);
}

#[test]
fn ten_second_window_on_ten_second_clip_is_one_pass() {
    let mut cfg = RunConfig::from_model(micro_model(500));
    cfg.seq_len_s = 10;
    cfg.augment = Augmentations::none();
    cfg.validate().unwrap();
    let settings = InferSettings::from_config(&cfg);
    assert_eq!((settings.seq_s, settings.hop_s), (10.0, 10.0));
    let clip = toy_clips(1, 10.0).remove(0);
    assert_eq!(clip.feat.frames(), 500);
    let model = Model::<f32>::init(cfg.model.clone(), 4).unwrap();
    let res = infer_clip(&model, &clip.feat, &settings).unwrap();
    let whole = model.predict(&[&clip.feat]).unwrap().remove(0);
    assert_eq!(res.output, whole);
    assert!(res.ctai_survivors.is_empty());
}
