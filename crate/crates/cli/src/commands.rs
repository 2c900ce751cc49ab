//! Subcommand implementations. Every written artifact starts with the run
//! configuration as `# key=value` comment lines.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use seld_core::decode::events_to_csv;
use seld_core::evalmetrics::{compute_metrics, MetricReport};
use seld_core::features::{write_wav, FeatureTensor, MelBank};
use seld_core::infertools::AcsTransform;
use seld_core::model::{column_cosine_similarity, export_channel_attention, within_cross_similarity, Model, ReshapedAttention};
use seld_core::objective::{read_labels, write_labels, EventLabel};
use seld_core::MultiAccdoa;
use seld_tensor::{DType, Scalar};

use crate::config::RunConfig;
use crate::data::{list_inputs, load_clips, load_features, stem, windows};
use crate::error::{CliError, Result};
use crate::infer::{infer_clip, ClipInference, InferSettings};
use crate::synth::{parse_scene, toy_scene, SyntheticScene, ToySceneSpec};
use crate::train::{fit, write_text, LoopSettings, TrainReport};

/// The configuration as `# key=value` lines.
pub fn echo_header(cfg: &RunConfig) -> String {
    cfg.to_kv().iter().map(|(k, v)| format!("# {k}={v}\n")).collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Use the model configuration stored in a checkpoint. A configuration given
/// explicitly must agree with it.
pub fn reconcile(cfg: Option<RunConfig>, checkpoint: &Path) -> Result<RunConfig> {
    let stored = Model::<f32>::load(checkpoint)?.config;
    match cfg {
        None => {
            let cfg = RunConfig::from_model(stored);
            cfg.validate()?;
            Ok(cfg)
        }
        Some(c) if c.model == stored => Ok(c),
        Some(c) => Err(CliError::Config(format!(
            "model configuration does not match checkpoint {}: config {:?}, checkpoint {:?}",
            checkpoint.display(),
            c.model.to_kv(),
            stored.to_kv()
        ))),
    }
}

#[derive(Clone, Debug)]
pub struct SynthArgs {
    pub out_dir: PathBuf,
    /// Scene description file; random toy scenes when absent.
    pub scene: Option<PathBuf>,
    pub count: usize,
    pub seed: u64,
    pub toy: ToySceneSpec,
    pub n_tracks: usize,
}

fn write_scene(scene: &SyntheticScene, seed: u64, out_dir: &Path, name: &str) -> Result<PathBuf> {
    let wav = out_dir.join(format!("{name}.wav"));
    write_wav(&wav, &scene.render(seed))?;
    write_labels(&out_dir.join(format!("{name}.csv")), &scene.labels())?;
    Ok(wav)
}

/// Render FoA clips (`<name>.wav`) and their labels (`<name>.csv`).
pub fn cmd_synth(a: &SynthArgs) -> Result<Vec<PathBuf>> {
    create_dir(&a.out_dir)?;
    if let Some(path) = &a.scene {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let scene = parse_scene(&text)?;
        scene.validate(a.toy.n_classes, a.n_tracks)?;
        return Ok(vec![write_scene(&scene, a.seed, &a.out_dir, &stem(path))?]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let scenes: Vec<SyntheticScene> = (0..a.count).map(|_| toy_scene(&a.toy, &mut rng)).collect();
    scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| write_scene(s, a.seed.wrapping_add(i as u64), &a.out_dir, &format!("toy_{i:03}")))
        .collect()
}

/// Extract and cache features (`<stem>.feat`) for every clip of `input_dir`.
pub fn cmd_features(input_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(out_dir)?;
    let bank = MelBank::standard();
    list_inputs(input_dir)?
        .par_iter()
        .map(|p| {
            let out = out_dir.join(format!("{}.feat", stem(p)));
            load_features(p, &bank)?.save(&out)?;
            Ok(out)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
}

fn training_set(cfg: &RunConfig) -> Result<Vec<crate::augment::Example>> {
    let clips = load_clips(&cfg.data_dir, &cfg.labels_dir)?;
    windows(&clips, cfg.model.input_frames, cfg.model.layout())
}

fn finish_run<S: Scalar>(
    cfg: &RunConfig,
    model: &Model<S>,
    report: TrainReport,
    checkpoint: &Path,
    loss_name: &str,
) -> Result<TrainOutcome> {
    model.save(checkpoint)?;
    write_text(&checkpoint.with_extension("config"), &cfg.to_string())?;
    let loss_csv = cfg.report_dir.join(loss_name);
    write_text(&loss_csv, &format!("{}{}", echo_header(cfg), report.to_csv()))?;
    Ok(TrainOutcome { report, checkpoint: checkpoint.to_path_buf(), loss_csv })
}

fn train_typed<S: Scalar>(cfg: &RunConfig) -> Result<TrainOutcome> {
    let data = training_set(cfg)?;
    let mut model = Model::<S>::init(cfg.model.clone(), cfg.seed)?;
    let report = fit(&mut model, &data, cfg, &LoopSettings::pretraining(cfg, data.len()))?;
    finish_run(cfg, &model, report, &cfg.checkpoint_dir.join("final.ckpt"), "train_loss.csv")
}

/// Train from scratch with ADPIT; writes per-epoch checkpoints,
/// `final.ckpt` and the loss curve.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    match cfg.dtype {
        DType::F32 => train_typed::<f32>(cfg),
        DType::F64 => train_typed::<f64>(cfg),
    }
}

fn finetune_typed<S: Scalar>(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<TrainOutcome> {
    let mut model = Model::<S>::load(checkpoint)?;
    let data = training_set(cfg)?;
    let report = fit(&mut model, &data, cfg, &LoopSettings::finetune(cfg))?;
    finish_run(cfg, &model, report, out, "vtm_loss.csv")
}

/// Continue training a checkpoint with the VTM loss for `vtm_steps` steps.
pub fn cmd_finetune_vtm(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    match cfg.dtype {
        DType::F32 => finetune_typed::<f32>(cfg, checkpoint, out),
        DType::F64 => finetune_typed::<f64>(cfg, checkpoint, out),
    }
}

/// Inputs given as files or directories, expanded and sorted.
pub fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            out.extend(list_inputs(p)?);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(CliError::Data("no inputs".into()));
    }
    Ok(out)
}

pub fn accdoa_csv(out: &MultiAccdoa) -> String {
    let l = out.layout;
    let mut s = String::from("frame_index");
    for c in 0..l.n_classes {
        for k in 0..l.n_tracks {
            for d in ["x", "y", "z"] {
                let _ = write!(s, ",c{c}_t{k}_{d}");
            }
        }
    }
    s.push('\n');
    for t in 0..out.frames {
        s.push_str(&t.to_string());
        for v in out.frame(t) {
            let _ = write!(s, ",{v:.6}");
        }
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
pub struct InferredClip {
    pub name: String,
    pub result: ClipInference,
    pub events_csv: PathBuf,
}

fn infer_typed<S: Scalar>(cfg: &RunConfig, checkpoint: &Path, inputs: &[PathBuf], out_dir: &Path) -> Result<Vec<InferredClip>> {
    let model = Model::<S>::load(checkpoint)?;
    let settings = InferSettings::from_config(cfg);
    let bank = MelBank::standard();
    create_dir(out_dir)?;
    let header = echo_header(cfg);
    expand_inputs(inputs)?
        .iter()
        .map(|p| {
            let name = stem(p);
            let result = infer_clip(&model, &load_features(p, &bank)?, &settings)?;
            write_text(&out_dir.join(format!("{name}.accdoa.csv")), &format!("{header}{}", accdoa_csv(&result.output)))?;
            let events_csv = out_dir.join(format!("{name}.csv"));
            write_text(&events_csv, &format!("{header}{}", events_to_csv(&result.events)))?;
            Ok(InferredClip { name, result, events_csv })
        })
        .collect()
}

/// Decode every input clip into `<out_dir>/<stem>.csv` (events) and
/// `<stem>.accdoa.csv` (raw output).
pub fn cmd_infer(cfg: &RunConfig, checkpoint: &Path, inputs: &[PathBuf], out_dir: &Path) -> Result<Vec<InferredClip>> {
    cfg.validate()?;
    match cfg.dtype {
        DType::F32 => infer_typed::<f32>(cfg, checkpoint, inputs, out_dir),
        DType::F64 => infer_typed::<f64>(cfg, checkpoint, inputs, out_dir),
    }
}

fn label_files(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let rd = std::fs::read_dir(path).map_err(|e| CliError::io(path, e))?;
    let mut v: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|x| x.to_str()) == Some("csv"))
        .filter(|p| !p.to_string_lossy().ends_with(".accdoa.csv"))
        .collect();
    v.sort();
    Ok(v)
}

/// Concatenate clips into one timeline so frames of different clips never
/// coincide.
pub fn pool_clips(clips: &[(Vec<EventLabel>, Vec<EventLabel>)]) -> (Vec<EventLabel>, Vec<EventLabel>) {
    let (mut p, mut r) = (Vec::new(), Vec::new());
    let mut offset = 0;
    for (pred, refs) in clips {
        let len = pred.iter().chain(refs).map(|l| l.frame + 1).max().unwrap_or(0);
        p.extend(pred.iter().map(|l| EventLabel { frame: l.frame + offset, ..l.clone() }));
        r.extend(refs.iter().map(|l| EventLabel { frame: l.frame + offset, ..l.clone() }));
        offset += len;
    }
    (p, r)
}

/// Score predictions against references. Both paths are label CSVs, or
/// directories whose reference files are matched to predictions by name.
pub fn cmd_eval(pred: &Path, reference: &Path, n_classes: usize, out: Option<&Path>) -> Result<MetricReport> {
    let refs = label_files(reference)?;
    if refs.is_empty() {
        return Err(CliError::Data(format!("no reference CSVs in {}", reference.display())));
    }
    let mut clips = Vec::new();
    for r in &refs {
        let p = if pred.is_dir() { pred.join(r.file_name().expect("file")) } else { pred.to_path_buf() };
        clips.push((read_labels(&p)?, read_labels(r)?));
    }
    let (p, r) = pool_clips(&clips);
    let report = compute_metrics(&p, &r, n_classes)?;
    if let Some(out) = out {
        let header = format!("# pred={}\n# ref={}\n# n_classes={n_classes}\n", pred.display(), reference.display());
        write_text(out, &format!("{header}{}", report.to_csv()))?;
    }
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct AnalysisReport {
    pub original: ReshapedAttention,
    pub perturbed: ReshapedAttention,
    pub similarity: Vec<f64>,
    pub similarity_perturbed: Vec<f64>,
    pub frobenius_distance: f64,
    /// Largest `|S_ij - S_ji|` and `|S_ii - 1|` of both similarity matrices.
    pub symmetry_error: f64,
    /// Column segment labels and the mean within/cross similarity, when
    /// reference labels are given.
    pub column_labels: Option<Vec<usize>>,
    pub within_cross: Option<(f64, f64)>,
}

/// Dominant class of each of `patches` equal time spans over `frames`
/// label frames; `n_classes` marks spans without events.
pub fn patch_labels(labels: &[EventLabel], patches: usize, frames: usize, n_classes: usize) -> Vec<usize> {
    (0..patches)
        .map(|g| {
            let (f0, f1) = (g * frames / patches, (g + 1) * frames / patches);
            let mut counts = vec![0usize; n_classes];
            for l in labels.iter().filter(|l| l.frame >= f0 && l.frame < f1 && l.class < n_classes) {
                counts[l.class] += 1;
            }
            let (best, &n) = counts.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0))).expect("classes");
            if n == 0 {
                n_classes
            } else {
                best
            }
        })
        .collect()
}

pub fn matrix_csv(data: &[f64], rows: usize, cols: usize) -> String {
    let mut s = String::from("row");
    for j in 0..cols {
        let _ = write!(s, ",c{j}");
    }
    s.push('\n');
    for i in 0..rows {
        s.push_str(&i.to_string());
        for j in 0..cols {
            let _ = write!(s, ",{:.8}", data[i * cols + j]);
        }
        s.push('\n');
    }
    s
}

fn symmetry_error(sim: &[f64], n: usize) -> f64 {
    let mut e: f64 = 0.0;
    for i in 0..n {
        e = e.max((sim[i * n + i] - 1.0).abs());
        for j in 0..n {
            e = e.max((sim[i * n + j] - sim[j * n + i]).abs());
        }
    }
    e
}

/// Channel-attention analysis of one window (the model's input length) of
/// a clip, and of the same window under the location perturbation.
pub fn analyze<S: Scalar>(model: &Model<S>, feat: &FeatureTensor, labels: Option<&[EventLabel]>) -> Result<AnalysisReport> {
    let frames = model.config.input_frames;
    let window = feat.fit_frames(frames);
    let run = |f: &FeatureTensor| -> Result<ReshapedAttention> {
        let (_, bundle) = model.predict_with_attention(&[f], true)?;
        Ok(export_channel_attention(&bundle.ok_or_else(|| CliError::Data("no attention captured".into()))?)?)
    };
    let original = run(&window)?;
    let perturbed = run(&AcsTransform::PERTURB.apply_features(&window))?;
    let similarity = column_cosine_similarity(&original);
    let similarity_perturbed = column_cosine_similarity(&perturbed);
    let n = original.cols;
    let symmetry_error = symmetry_error(&similarity, n).max(symmetry_error(&similarity_perturbed, n));
    let (column_labels, within_cross) = match labels {
        None => (None, None),
        Some(ls) => {
            let patches = original.col_time.iter().max().map_or(1, |m| m + 1);
            let frames_out = frames / crate::augment::FEATURE_FRAMES_PER_LABEL;
            let pl = patch_labels(ls, patches, frames_out, model.config.n_classes);
            let cl: Vec<usize> = original.col_time.iter().map(|&g| pl[g]).collect();
            let wc = within_cross_similarity(&similarity, &cl);
            (Some(cl), Some(wc))
        }
    };
    Ok(AnalysisReport {
        frobenius_distance: original.frobenius_distance(&perturbed),
        original,
        perturbed,
        similarity,
        similarity_perturbed,
        symmetry_error,
        column_labels,
        within_cross,
    })
}

fn analyze_typed<S: Scalar>(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: &Path,
    labels: Option<&Path>,
    out_dir: &Path,
) -> Result<AnalysisReport> {
    let model = Model::<S>::load(checkpoint)?;
    let feat = load_features(input, &MelBank::standard())?;
    let ls = labels.map(read_labels).transpose()?;
    let r = analyze(&model, &feat, ls.as_deref())?;
    create_dir(out_dir)?;
    let h = echo_header(cfg);
    let m = |a: &ReshapedAttention| format!("{h}{}", matrix_csv(&a.data, a.rows, a.cols));
    write_text(&out_dir.join("attention_map.csv"), &m(&r.original))?;
    write_text(&out_dir.join("attention_map_perturbed.csv"), &m(&r.perturbed))?;
    let n = r.original.cols;
    write_text(&out_dir.join("similarity.csv"), &format!("{h}{}", matrix_csv(&r.similarity, n, n)))?;
    write_text(&out_dir.join("similarity_perturbed.csv"), &format!("{h}{}", matrix_csv(&r.similarity_perturbed, n, n)))?;
    let mut summary = format!("{h}metric,value\nfrobenius_distance,{:.8}\nsymmetry_error,{:.3e}\n", r.frobenius_distance, r.symmetry_error);
    if let Some((w, x)) = r.within_cross {
        let _ = write!(summary, "within_similarity,{w:.8}\ncross_similarity,{x:.8}\n");
    }
    write_text(&out_dir.join("analysis.csv"), &summary)?;
    Ok(r)
}

/// Write attention maps, similarity matrices (original and perturbed) and a
/// summary to `out_dir`.
pub fn cmd_analyze(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: &Path,
    labels: Option<&Path>,
    out_dir: &Path,
) -> Result<AnalysisReport> {
    match cfg.dtype {
        DType::F32 => analyze_typed::<f32>(cfg, checkpoint, input, labels, out_dir),
        DType::F64 => analyze_typed::<f64>(cfg, checkpoint, input, labels, out_dir),
    }
}
