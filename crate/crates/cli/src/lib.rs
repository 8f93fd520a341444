//! The `red` command line: corpus generation, training, threshold tuning,
//! detection, evaluation, split analysis and spectrogram export.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use red_core::autodiff::{load_checkpoint, save_checkpoint};
use red_core::cwt::{cwt_with, write_spectrogram, CwtConfig, CwtMethod, MorletBank};
use red_core::detector::{self, predict_recording, per_sample_probs, TuneCase, TuneResult};
use red_core::evalkit::{aggregate, default_iou_grid, evaluate_recording, MetricsReport};
use red_core::postproc::EventKind;
use red_core::redmodel::{ModelConfig, Network, Variant};
use red_core::sigio::{
    self, read_events, read_manifest, read_signal, write_events, write_signal, EventList, Recording, Signal,
};
use red_core::splitkit::{self, fit_gaussian, kpca_project, Ellipse, Gaussian2D};
use red_core::synthgen::{self, read_corpus, CorpusManifest, SynthConfig};
use red_core::trainer::{self, TrainConfig};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "RED_THREADS";

#[derive(Debug, Parser)]
#[command(name = "red", version, about = "Sleep EEG event detection with recurrent networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus with train/val/test membership.
    Synth(SynthArgs),
    /// Train a detector for one event type.
    Train(TrainArgs),
    /// Choose the output threshold on a corpus split.
    Tune(TuneArgs),
    /// Predict and postprocess events in recordings.
    Detect(DetectArgs),
    /// Score predicted events against annotations.
    Eval(EvalArgs),
    /// Band-power projection and per-recording Gaussians of a corpus.
    Split(SplitArgs),
    /// Export the CWT spectrogram of a signal.
    Cwt(CwtArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON file with generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    train: usize,
    #[arg(long, default_value_t = 3)]
    val: usize,
    #[arg(long, default_value_t = 4)]
    test: usize,
    /// Recording length in seconds.
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    event: EventKind,
    #[arg(long)]
    variant: Option<Variant>,
    /// JSON file with optional `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TuneArgs {
    /// Checkpoint stem written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Splits to tune on, comma separated.
    #[arg(long, default_value = "train,val")]
    split: String,
    #[arg(long)]
    event: Option<EventKind>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DetectArgs {
    #[arg(long)]
    model: PathBuf,
    /// Recording manifests or raw signal files.
    #[arg(long = "input")]
    inputs: Vec<PathBuf>,
    /// Detect every recording of `--split` in this corpus.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, conflicts_with = "tuned")]
    threshold: Option<f64>,
    /// `threshold.json` written by `tune`.
    #[arg(long)]
    tuned: Option<PathBuf>,
    #[arg(long)]
    event: Option<EventKind>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    truth: Vec<PathBuf>,
    #[arg(long)]
    pred: Vec<PathBuf>,
    /// Score `--split` of this corpus against predictions in `--pred-dir`.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    pred_dir: Option<PathBuf>,
    #[arg(long)]
    event: Option<EventKind>,
    #[arg(long, default_value_t = 0.2)]
    iou: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = splitkit::DEFAULT_GAMMA)]
    gamma: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CwtArgs {
    #[arg(long)]
    signal: PathBuf,
    /// JSON file with wavelet settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, value_parser = parse_method, default_value = "fft")]
    method: CwtMethod,
    /// Output stem; `.json` and `.bin` are appended.
    #[arg(long)]
    out: PathBuf,
}

fn parse_method(s: &str) -> std::result::Result<CwtMethod, String> {
    match s {
        "direct" => Ok(CwtMethod::Direct),
        "fft" => Ok(CwtMethod::Fft),
        _ => Err(format!("unknown method '{s}' (expected direct or fft)")),
    }
}

/// Run with full argv (program name first) and return the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Tune(a) => tune(a),
        Command::Detect(a) => detect(a),
        Command::Eval(a) => eval(a),
        Command::Split(a) => split(a),
        Command::Cwt(a) => spectrogram(a),
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Overlay the keys of `patch` onto `base`, recursing into objects.
/// Overlay `patch` on a serialized default config. Keys missing from the
/// defaults are rejected rather than silently dropped.
fn merge(base: &mut Value, patch: &Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let key = format!("{path}{k}");
                let Some(slot) = b.get_mut(k) else {
                    bail!("unknown config key '{key}'");
                };
                merge(slot, v, &format!("{key}."))?;
            }
        }
        (b, p) => *b = p.clone(),
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut value = serde_json::to_value(SynthConfig::default())?;
    if let Some(path) = &a.config {
        merge(&mut value, &read_json(path)?, "")?;
    }
    let mut cfg: SynthConfig = serde_json::from_value(value).context("invalid generator settings")?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(d) = a.duration {
        cfg.duration_sec = d;
    }
    let corpus = synthgen::write_corpus(&a.out, &cfg, (a.train, a.val, a.test))?;
    eprintln!(
        "wrote {} recordings to {}",
        corpus.all().count(),
        a.out.display()
    );
    Ok(())
}

/// Recordings of one split, or of a comma-separated list of splits, loaded
/// from their manifests.
fn load_split(corpus_path: &Path, split: &str) -> Result<(CorpusManifest, Vec<(String, Recording)>)> {
    let corpus = read_corpus(corpus_path)?;
    let dir = corpus_path.parent().unwrap_or(Path::new("."));
    let mut files = Vec::new();
    for name in split.split(',').map(str::trim) {
        files.extend(corpus.split(name)?.iter().cloned());
    }
    let recs = files
        .iter()
        .map(|file| {
            let path = dir.join(file);
            let rec = read_manifest(&path)?.load(&path)?;
            Ok((recording_name(&path), rec))
        })
        .collect::<Result<_>>()?;
    Ok((corpus, recs))
}

fn recording_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "recording".into())
}

/// Everything `train` stores next to the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub event: EventKind,
    pub global_std: f64,
    pub best_iteration: usize,
    pub best_val_loss: f64,
}

/// Resolve model and training settings: flags override the config file,
/// which overrides the defaults of the chosen variant.
fn train_settings(a: &TrainArgs) -> Result<(ModelConfig, TrainConfig)> {
    let file = match &a.config {
        Some(p) => read_json(p)?,
        None => Value::Object(Default::default()),
    };
    if let Some(extra) = file.as_object().and_then(|o| o.keys().find(|k| *k != "model" && *k != "train")) {
        bail!("unknown config section '{extra}' (expected 'model' or 'train')");
    }
    let file_variant = file
        .pointer("/model/variant")
        .map(|v| serde_json::from_value::<Variant>(v.clone()))
        .transpose()
        .context("invalid model.variant")?;
    let variant = a.variant.or(file_variant).unwrap_or(Variant::Time);
    let mut model = serde_json::to_value(ModelConfig::for_variant(variant))?;
    if let Some(m) = file.get("model") {
        merge(&mut model, m, "model.")?;
    }
    model["variant"] = serde_json::to_value(variant)?;
    let model: ModelConfig = serde_json::from_value(model).context("invalid model settings")?;
    let mut tc = serde_json::to_value(TrainConfig::default())?;
    if let Some(t) = file.get("train") {
        merge(&mut tc, t, "train.")?;
    }
    let mut tc: TrainConfig = serde_json::from_value(tc).context("invalid training settings")?;
    if let Some(seed) = a.seed {
        tc.seed = seed;
    }
    if a.max_iterations.is_some() {
        tc.max_iterations = a.max_iterations;
    }
    model.validate()?;
    tc.validate()?;
    Ok((model, tc))
}

fn train(a: TrainArgs) -> Result<()> {
    let (model_cfg, tc) = train_settings(&a)?;
    let (_, train_raw) = load_split(&a.corpus, "train")?;
    let (_, val_raw) = load_split(&a.corpus, "val")?;
    let train_raw: Vec<Recording> = train_raw.into_iter().map(|r| r.1).collect();
    let val_raw: Vec<Recording> = val_raw.into_iter().map(|r| r.1).collect();
    // the normalization scale comes from all non-testing recordings
    let all: Vec<Recording> = train_raw.iter().chain(&val_raw).cloned().collect();
    let (_, scale) = sigio::prepare_recordings(&all, None)?;
    let (train_set, _) = sigio::prepare_recordings(&train_raw, Some(scale))?;
    let (val_set, _) = sigio::prepare_recordings(&val_raw, Some(scale))?;

    let net = Network::<f64>::build(model_cfg.clone(), tc.seed)?;
    eprintln!(
        "training {} detector ({:?} variant, {} parameters)",
        a.event,
        model_cfg.variant,
        net.store.num_trainable()
    );
    let outcome = trainer::train(net, &train_set, &val_set, a.event.key(), &tc, |row| {
        if let Some(v) = row.val_loss {
            eprintln!("iteration {:>6}  val loss {v:.5}  lr {:.2e}", row.iteration, row.lr);
        }
    })?;
    create_dir(&a.out)?;
    let meta = ModelMeta {
        model: model_cfg,
        train: tc,
        event: a.event,
        global_std: scale,
        best_iteration: outcome.best_iteration,
        best_val_loss: outcome.best_val_loss,
    };
    save_checkpoint(
        &a.out.join("model"),
        &outcome.network.store,
        outcome.iterations as u64,
        serde_json::to_value(&meta)?,
    )?;
    trainer::write_log(&a.out.join("train_log.csv"), &outcome.log)?;
    write_json(
        &a.out.join("train_summary.json"),
        &serde_json::json!({
            "iterations": outcome.iterations,
            "halvings": outcome.halvings,
            "stop": outcome.stop,
            "initial_val_loss": outcome.initial_val_loss,
            "best_val_loss": outcome.best_val_loss,
            "best_iteration": outcome.best_iteration,
            "uniform_fallback": outcome.uniform_fallback,
            "lr_trace": outcome.lr_trace(),
        }),
    )?;
    eprintln!(
        "best validation loss {:.5} at iteration {} of {}",
        outcome.best_val_loss, outcome.best_iteration, outcome.iterations
    );
    Ok(())
}

/// Network and metadata from a checkpoint stem.
pub fn load_model(stem: &Path) -> Result<(Network<f64>, ModelMeta)> {
    let (store, manifest) = load_checkpoint::<f64>(stem)?;
    let meta: ModelMeta =
        serde_json::from_value(manifest.extra).with_context(|| format!("{} has no model metadata", stem.display()))?;
    let net = Network::from_store(meta.model.clone(), &store)?;
    Ok((net, meta))
}

fn check_event(requested: Option<EventKind>, meta: &ModelMeta) -> Result<EventKind> {
    match requested {
        Some(e) if e != meta.event => bail!("model was trained for {} but --event is {e}", meta.event),
        _ => Ok(meta.event),
    }
}

/// Per-sample probabilities of a preprocessed recording.
fn probabilities(net: &Network<f64>, rec: &Recording) -> Result<Vec<f64>> {
    let coarse = predict_recording(net, rec.signal.samples())?;
    Ok(per_sample_probs(&coarse, rec.signal.len()))
}

fn tune(a: TuneArgs) -> Result<()> {
    let (net, meta) = load_model(&a.model)?;
    let event = check_event(a.event, &meta)?;
    let (_, recs) = load_split(&a.corpus, &a.split)?;
    let raw: Vec<Recording> = recs.into_iter().map(|r| r.1).collect();
    let (prepared, _) = sigio::prepare_recordings(&raw, Some(meta.global_std))?;
    let cases = prepared
        .into_iter()
        .map(|rec| {
            Ok(TuneCase {
                probs: probabilities(&net, &rec)?,
                truth: rec.events(event.key())?.clone(),
                signal: rec.signal,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let result = detector::tune_threshold(&cases, event, &default_iou_grid())?;
    create_dir(&a.out)?;
    write_json(&a.out.join("threshold.json"), &result)?;
    let mut csv = String::from("threshold,af1\n");
    for (mu, af1) in &result.curve {
        csv.push_str(&format!("{mu:.2},{af1:.6}\n"));
    }
    fs::write(a.out.join("tune_curve.csv"), csv)?;
    println!("threshold {:.2} (mean AF1 {:.4})", result.threshold, result.af1);
    Ok(())
}

/// A recording manifest, or a bare signal file without annotations.
fn load_input(path: &Path) -> Result<Recording> {
    let is_manifest = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_manifest {
        Ok(read_manifest(path)?.load(path)?)
    } else {
        let signal = read_signal(path)?;
        let epochs = Recording::tile_epochs(signal.duration(), sigio::EPOCH_SECONDS);
        Ok(Recording::new(signal, epochs, BTreeMap::new())?)
    }
}

fn detect(a: DetectArgs) -> Result<()> {
    let (net, meta) = load_model(&a.model)?;
    let event = check_event(a.event, &meta)?;
    let threshold = match (&a.tuned, a.threshold) {
        (Some(path), _) => {
            let t: TuneResult = serde_json::from_value(read_json(path)?).context("invalid threshold file")?;
            t.threshold
        }
        (None, Some(t)) => t,
        (None, None) => 0.5,
    };
    if !(0.0..1.0).contains(&threshold) {
        bail!("threshold must lie in [0, 1), got {threshold}");
    }
    let mut inputs: Vec<(String, Recording)> = Vec::new();
    if let Some(c) = &a.corpus {
        inputs.extend(load_split(c, &a.split)?.1);
    }
    for p in &a.inputs {
        inputs.push((recording_name(p), load_input(p)?));
    }
    if inputs.is_empty() {
        bail!("nothing to detect: pass --input or --corpus");
    }
    create_dir(&a.out)?;
    for (name, raw) in inputs {
        let (mut prepared, _) = sigio::prepare_recordings(std::slice::from_ref(&raw), Some(meta.global_std))?;
        let rec = prepared.remove(0);
        let probs = probabilities(&net, &rec)?;
        let events = detector::detect_events(&probs, &rec.signal, threshold, event)?;
        write_events(&a.out.join(format!("{name}.{}.pred.csv", event.key())), &events)?;
        write_signal(
            &a.out.join(format!("{name}.{}.probs.sig", event.key())),
            &Signal::new(probs, rec.signal.fs())?,
        )?;
        eprintln!("{name}: {} events", events.len());
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    if !(a.iou > 0.0 && a.iou <= 1.0) {
        bail!("--iou must lie in (0, 1], got {}", a.iou);
    }
    let mut pairs: Vec<(String, EventList, EventList)> = Vec::new();
    if a.truth.len() != a.pred.len() {
        bail!("got {} --truth files but {} --pred files", a.truth.len(), a.pred.len());
    }
    for (t, p) in a.truth.iter().zip(&a.pred) {
        pairs.push((recording_name(t), read_events(t)?, read_events(p)?));
    }
    if let Some(c) = &a.corpus {
        let event = a.event.ok_or_else(|| anyhow!("--corpus needs --event"))?;
        let dir = a.pred_dir.as_ref().ok_or_else(|| anyhow!("--corpus needs --pred-dir"))?;
        for (name, rec) in load_split(c, &a.split)?.1 {
            let pred = read_events(&dir.join(format!("{name}.{}.pred.csv", event.key())))?;
            pairs.push((name, rec.events(event.key())?.clone(), pred));
        }
    }
    if pairs.is_empty() {
        bail!("nothing to evaluate: pass --truth/--pred or --corpus");
    }
    let mut grid = default_iou_grid();
    if !grid.iter().any(|g| (g - a.iou).abs() < 1e-9) {
        grid.push(a.iou);
        grid.sort_by(f64::total_cmp);
    }
    let reports = pairs
        .iter()
        .map(|(name, truth, pred)| evaluate_recording(name, truth, pred, &grid))
        .collect();
    let report = aggregate(reports, &grid)?;
    let at = report.at(a.iou).expect("iou is on the grid");
    println!(
        "F1 {:.4}  recall {:.4}  precision {:.4}  at IoU {:.2}; AF1 {:.4}",
        at.f1, at.recall, at.precision, a.iou, report.af1
    );
    if let Some(out) = &a.out {
        write_report(out, &report)?;
    }
    Ok(())
}

fn write_report(out: &Path, report: &MetricsReport) -> Result<()> {
    create_dir(out)?;
    write_json(&out.join("report.json"), report)?;
    fs::write(out.join("f1_curve.csv"), report.curve_csv())?;
    let mut hist = String::from("recording,iou\n");
    for r in &report.recordings {
        for v in &r.matched_iou {
            hist.push_str(&format!("{},{v:.6}\n", r.name));
        }
    }
    fs::write(out.join("matched_iou.csv"), hist)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct RecordingSummary {
    recording: String,
    split: String,
    gaussian: Gaussian2D,
    ellipse: Ellipse,
}

fn split(a: SplitArgs) -> Result<()> {
    let corpus = read_corpus(&a.corpus)?;
    let mut rows = Vec::new();
    let mut owners = Vec::new();
    let mut names = Vec::new();
    for split in ["train", "val", "test"] {
        for (name, rec) in load_split(&a.corpus, split)?.1 {
            let feats = splitkit::recording_features(&rec)?;
            for (i, f) in feats.into_iter().enumerate() {
                rows.push(f);
                owners.push((names.len(), rec.epochs[i].0));
            }
            names.push((name, split.to_string()));
        }
    }
    drop(corpus);
    let z = splitkit::standardize(&rows)?;
    let proj = kpca_project(&z, a.gamma)?;
    create_dir(&a.out)?;
    let mut feat_csv = String::from("recording,epoch_start,b1,b2,b3,b4,b5\n");
    let mut proj_csv = String::from("recording,split,epoch_start,x,y\n");
    for (k, (&(r, start), f)) in owners.iter().zip(&rows).enumerate() {
        let (name, split) = &names[r];
        let cols: Vec<String> = f.iter().map(|v| format!("{v:.6}")).collect();
        feat_csv.push_str(&format!("{name},{start},{}\n", cols.join(",")));
        proj_csv.push_str(&format!("{name},{split},{start},{:.6},{:.6}\n", proj[k][0], proj[k][1]));
    }
    fs::write(a.out.join("features.csv"), feat_csv)?;
    fs::write(a.out.join("projection.csv"), proj_csv)?;
    let summaries = names
        .iter()
        .enumerate()
        .map(|(r, (name, split))| {
            let pts: Vec<[f64; 2]> = owners.iter().zip(&proj).filter(|(o, _)| o.0 == r).map(|(_, p)| *p).collect();
            let g = fit_gaussian(&pts).with_context(|| format!("fitting {name}"))?;
            Ok(RecordingSummary {
                recording: name.clone(),
                split: split.clone(),
                gaussian: g,
                ellipse: splitkit::ellipse_95(&g),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_json(&a.out.join("gaussians.json"), &summaries)?;
    eprintln!("projected {} epochs of {} recordings", rows.len(), names.len());
    Ok(())
}

fn spectrogram(a: CwtArgs) -> Result<()> {
    let mut value = serde_json::to_value(CwtConfig::default())?;
    if let Some(p) = &a.config {
        merge(&mut value, &read_json(p)?, "")?;
    }
    let mut cfg: CwtConfig = serde_json::from_value(value).context("invalid wavelet settings")?;
    if let Some(b) = a.beta {
        cfg.beta = b;
    }
    let signal = read_signal(&a.signal)?;
    // zero padding so the spectrogram spans the whole signal
    let pad = MorletBank::new(&cfg, signal.fs())?.max_half_support();
    let mut x = vec![0.0; pad];
    x.extend_from_slice(signal.samples());
    x.resize(signal.len() + 2 * pad, 0.0);
    cfg.border = pad;
    let sp = cwt_with(&Signal::new(x, signal.fs())?, &cfg, a.method)?;
    write_spectrogram(&a.out, &sp)?;
    eprintln!("{} scales x {} samples", sp.n_scales(), sp.n_times);
    Ok(())
}
