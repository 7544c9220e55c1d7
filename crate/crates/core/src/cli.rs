//! `cxr` command line.
//!
//! Reports go to stdout, diagnostics to stderr. Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | internal error |
//! | 2 | file missing or unreadable/unwritable |
//! | 3 | weight file malformed or inconsistent with its architecture |
//! | 4 | bad data: undecodable image, invalid or empty manifest, duplicate paths |
//! | 5 | bad configuration or usage |

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentConfig;
use crate::evalmetrics::{macro_metrics, stratified_split, EvalReport, Manifest, MetricsError, NUM_CLASSES};
use crate::imagecore::{
    decode_image, encode_gray_png, inference_stages, ClaheParams, GrayImage, ImageError, NormalizationStats,
    PreprocessStages,
};
use crate::models::{fixture_weights, Architecture, Model, ModelError, CLASS_LABELS};
use crate::nn::NnError;
use crate::service::{self, ApiError, ExplainParams, ExplainSettings, Overrides, ServiceConfig};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  internal error
  2  file missing or unreadable/unwritable
  3  weight file malformed or inconsistent with its architecture
  4  bad data (undecodable image, invalid or empty manifest, duplicate paths)
  5  bad configuration or usage";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("weight file: {0}")]
    Weights(String),
    #[error("{0}")]
    Data(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Internal(_) => 1,
            CliError::File { .. } => 2,
            CliError::Weights(_) => 3,
            CliError::Data(_) => 4,
            CliError::Config(_) | CliError::Usage(_) => 5,
        }
    }

    fn file(path: &Path, source: std::io::Error) -> Self {
        CliError::File { path: path.to_path_buf(), source }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ApiError> for CliError {
    fn from(e: ApiError) -> Self {
        match e.code {
            "unsupported_image_format" | "malformed_image" | "image_too_small" => CliError::Data(e.message),
            "internal_error" => CliError::Internal(e.message),
            _ => CliError::Usage(e.message),
        }
    }
}

fn image_error(path: &Path, e: ImageError) -> CliError {
    match e {
        ImageError::InvalidParam(m) => CliError::Config(m),
        e => CliError::Data(format!("{}: {e}", path.display())),
    }
}

fn model_error(path: &Path, e: ModelError) -> CliError {
    match e {
        ModelError::Nn(NnError::Io(source)) => CliError::file(path, source),
        e => CliError::Weights(format!("{}: {e}", path.display())),
    }
}

/// TOML configuration. Every section is optional; flags override values
/// read here.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub augment: AugmentConfig,
    pub clahe: ClaheParams,
    pub normalization: NormalizationStats,
    pub service: ServiceConfig,
}

impl CliConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let c: CliConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::file(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |m: String| CliError::Config(m);
        self.augment.validate().map_err(|e| cfg(e.to_string()))?;
        self.clahe.validate().map_err(|e| cfg(e.to_string()))?;
        self.normalization.validate().map_err(|e| cfg(e.to_string()))?;
        self.service.validate().map_err(cfg)?;
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "cxr", version, about = "Chest X-ray classification toolkit", after_help = EXIT_CODES)]
pub struct Cli {
    /// TOML configuration file
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct ClaheFlags {
    /// CLAHE clip limit, overrides the config file
    #[arg(long)]
    pub clahe_clip: Option<f64>,
    /// CLAHE grid as `X,Y`, overrides the config file
    #[arg(long, value_parser = parse_grid)]
    pub clahe_grid: Option<(usize, usize)>,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (x, y) = s.split_once(',').ok_or("expected `X,Y`")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| e.to_string());
    Ok((p(x)?, p(y)?))
}

fn parse_ratios(s: &str) -> Result<(f64, f64, f64), String> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
    match v[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err("expected `TRAIN,VAL,TEST`".into()),
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print class probabilities and the prediction for one image
    Classify {
        model: PathBuf,
        image: PathBuf,
        /// Emit the classify response JSON instead of text
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        clahe: ClaheFlags,
    },
    /// Write heatmap.png and overlay.png for one image
    Explain {
        model: PathBuf,
        image: PathBuf,
        #[arg(long, default_value = "gap_head")]
        method: String,
        /// Layer to explain (score_cam only; defaults to the last feature map)
        #[arg(long)]
        layer: Option<String>,
        #[arg(long)]
        top_k: Option<usize>,
        /// Class label to explain; defaults to the prediction
        #[arg(long)]
        target: Option<String>,
        /// Heatmap opacity in the overlay
        #[arg(long)]
        alpha: Option<f64>,
        /// Output directory
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[command(flatten)]
        clahe: ClaheFlags,
    },
    /// Evaluate a model on a JSONL manifest; image paths resolve relative to the manifest
    Evaluate {
        model: PathBuf,
        manifest: PathBuf,
        /// Where to write the JSON report
        #[arg(long, default_value = "report.json")]
        report: PathBuf,
        #[command(flatten)]
        clahe: ClaheFlags,
    },
    /// Stratified train/val/test split of a manifest
    Split {
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "0.8,0.1,0.1", value_parser = parse_ratios)]
        ratios: (f64, f64, f64),
        /// Directory receiving train.jsonl, val.jsonl and test.jsonl
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the preprocessing tensor after stage N (1 clahe, 2 resize,
    /// 3 center_crop, 4 minmax_scale, 5 replicate_channels, 6 channel_normalize)
    Preprocess {
        image: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=6))]
        stage: u8,
        /// `.png` (stages 1-3) or `.json` (any stage)
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        clahe: ClaheFlags,
    },
    /// Write a deterministic random-weight CXRW file
    Fixture {
        #[arg(long, value_parser = parse_arch)]
        arch: Architecture,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = CLASS_LABELS.len())]
        classes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HTTP service
    Serve {
        #[arg(long, env = "CXR_MODEL_PATH")]
        model: Option<PathBuf>,
        #[arg(long)]
        host: Option<String>,
        #[arg(long, env = "CXR_PORT")]
        port: Option<u16>,
        #[arg(long, env = "CXR_MAX_BODY_MB")]
        max_body_mb: Option<usize>,
        #[arg(long, env = "CXR_SCORECAM_BATCH")]
        scorecam_batch: Option<usize>,
    },
}

fn parse_arch(s: &str) -> Result<Architecture, String> {
    s.parse().map_err(|e: ModelError| e.to_string())
}

impl ClaheFlags {
    fn apply(&self, base: &ClaheParams) -> Result<ClaheParams, CliError> {
        let mut p = *base;
        if let Some(c) = self.clahe_clip {
            p.clip_limit = c;
        }
        if let Some(g) = self.clahe_grid {
            p.grid = g;
        }
        p.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(p)
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 5 } else { 0 };
            if code == 0 {
                let _ = write!(stdout, "{e}");
            } else {
                eprint!("{e}");
            }
            return code;
        }
    };
    match run(cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    let wr = |e: std::io::Error| CliError::Internal(format!("writing output: {e}"));
    match cli.command {
        Command::Classify { model, image, json, clahe } => {
            let clahe = clahe.apply(&config.clahe)?;
            let m = Model::load(&model).map_err(|e| model_error(&model, e))?;
            let bytes = read_file(&image)?;
            let resp = service::classify_bytes(&m, &bytes, &Overrides::default(), &clahe, &config.normalization)
                .map_err(|e| with_path(&image, e))?;
            if json {
                writeln!(out, "{}", serde_json::to_string_pretty(&resp).expect("serializable")).map_err(wr)?;
            } else {
                for (label, p) in &resp.probabilities {
                    writeln!(out, "{label:<12} {p:.6}").map_err(wr)?;
                }
                writeln!(out, "predicted: {}", resp.predicted).map_err(wr)?;
            }
        }
        Command::Explain { model, image, method, layer, top_k, target, alpha, out: dir, clahe } => {
            let clahe = clahe.apply(&config.clahe)?;
            let m = Model::load(&model).map_err(|e| model_error(&model, e))?;
            let params = ExplainParams { method: Some(method), layer, top_k, alpha, target };
            let settings = ExplainSettings::parse(&params, &m.graph.class_labels)?;
            let bytes = read_file(&image)?;
            let resp = service::explain_bytes(
                &m,
                &bytes,
                &Overrides::default(),
                &settings,
                &clahe,
                &config.normalization,
                config.service.scorecam_batch,
            )
            .map_err(|e| with_path(&image, e))?;
            std::fs::create_dir_all(&dir).map_err(|e| CliError::file(&dir, e))?;
            for (name, b64) in [("heatmap.png", &resp.heatmap_png), ("overlay.png", &resp.overlay_png)] {
                let path = dir.join(name);
                let png = service::decode_b64(b64).map_err(|e| CliError::Internal(e.message))?;
                std::fs::write(&path, png).map_err(|e| CliError::file(&path, e))?;
            }
            writeln!(
                out,
                "predicted: {}\nexplained: {} ({} at {})\nwrote {} and {}",
                resp.classification.predicted,
                resp.cam.target,
                resp.cam.method.as_str(),
                resp.cam.layer,
                dir.join("heatmap.png").display(),
                dir.join("overlay.png").display()
            )
            .map_err(wr)?;
        }
        Command::Evaluate { model, manifest, report, clahe } => {
            let clahe = clahe.apply(&config.clahe)?;
            let m = Model::load(&model).map_err(|e| model_error(&model, e))?;
            let man = read_manifest(&manifest)?;
            let rep = evaluate(&m, &man, manifest.parent().unwrap_or(Path::new("")), &clahe, &config.normalization)?;
            let json = serde_json::to_string_pretty(&rep).expect("serializable");
            std::fs::write(&report, json + "\n").map_err(|e| CliError::file(&report, e))?;
            write!(out, "{}", render_report(&m.graph.architecture, &rep)).map_err(wr)?;
        }
        Command::Split { manifest, seed, ratios, out: dir } => {
            let man = read_manifest(&manifest)?;
            let split = stratified_split(&man, ratios, seed)?;
            for w in &split.warnings {
                log::warn!("{w}");
            }
            std::fs::create_dir_all(&dir).map_err(|e| CliError::file(&dir, e))?;
            for (name, part) in [("train.jsonl", &split.train), ("val.jsonl", &split.val), ("test.jsonl", &split.test)] {
                let path = dir.join(name);
                std::fs::write(&path, part.to_jsonl()).map_err(|e| CliError::file(&path, e))?;
            }
            write!(out, "{}", render_split(&split.counts())).map_err(wr)?;
        }
        Command::Preprocess { image, stage, out: path, clahe } => {
            let clahe = clahe.apply(&config.clahe)?;
            let img = load_image(&image)?;
            let stages = inference_stages(&img, &clahe, &config.normalization).map_err(|e| image_error(&image, e))?;
            let bytes = dump_stage(&stages, stage as usize, &path)?;
            std::fs::write(&path, bytes).map_err(|e| CliError::file(&path, e))?;
            writeln!(out, "stage {stage} ({}) -> {}", PreprocessStages::stage_name(stage as usize), path.display())
                .map_err(wr)?;
        }
        Command::Fixture { arch, seed, classes, out: path } => {
            if classes == 0 {
                return Err(CliError::Usage("--classes must be at least 1".into()));
            }
            let mut g = arch.build(classes);
            if classes == CLASS_LABELS.len() {
                g.class_labels = CLASS_LABELS.iter().map(|s| s.to_string()).collect();
            }
            let store = fixture_weights(&g, seed);
            let bytes = store.to_bytes();
            std::fs::write(&path, &bytes).map_err(|e| CliError::file(&path, e))?;
            writeln!(
                out,
                "{} seed {seed}: {} tensors, {} parameters -> {} (sha256 {})",
                arch.as_str(),
                store.len(),
                g.count_params(),
                path.display(),
                crate::nn::weight_digest(&bytes)
            )
            .map_err(wr)?;
        }
        Command::Serve { model, host, port, max_body_mb, scorecam_batch } => {
            let mut sc = config.service.clone();
            if model.is_some() {
                sc.model_path = model;
            }
            if let Some(h) = host {
                sc.host = h;
            }
            if let Some(p) = port {
                sc.port = p;
            }
            if let Some(m) = max_body_mb {
                sc.max_body_mb = m;
            }
            if let Some(b) = scorecam_batch {
                sc.scorecam_batch = b;
            }
            sc.validate().map_err(CliError::Config)?;
            let state = service::AppState::load(sc, config.clahe, config.normalization);
            let rt = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .map_err(|e| CliError::Internal(e.to_string()))?;
            rt.block_on(service::serve(state)).map_err(|e| CliError::Internal(format!("server: {e}")))?;
        }
    }
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::file(path, e))
}

fn load_image(path: &Path) -> Result<GrayImage, CliError> {
    decode_image(&read_file(path)?).map_err(|e| image_error(path, e))
}

fn with_path(path: &Path, e: ApiError) -> CliError {
    match CliError::from(e) {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        e => e,
    }
}

fn read_manifest(path: &Path) -> Result<Manifest, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::file(path, e))?;
    let m = Manifest::from_jsonl(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if m.is_empty() {
        return Err(MetricsError::EmptyManifest.into());
    }
    Ok(m)
}

/// Classifies every manifest image (in parallel, reduced in manifest order)
/// and computes the report.
pub fn evaluate(
    model: &Model,
    manifest: &Manifest,
    root: &Path,
    clahe: &ClaheParams,
    stats: &NormalizationStats,
) -> Result<EvalReport, CliError> {
    if model.graph.num_classes() != NUM_CLASSES {
        return Err(CliError::Usage(format!(
            "evaluation needs a {NUM_CLASSES}-class model, got {}",
            model.graph.num_classes()
        )));
    }
    if manifest.is_empty() {
        return Err(MetricsError::EmptyManifest.into());
    }
    let probs: Vec<[f64; NUM_CLASSES]> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let path = root.join(&e.path);
            let bytes = std::fs::read(&path)
                .map_err(|err| CliError::Data(format!("unreadable image {}: {err}", path.display())))?;
            let img = decode_image(&bytes)
                .map_err(|err| CliError::Data(format!("unreadable image {}: {err}", path.display())))?;
            let x = crate::imagecore::inference_preprocess(&img, clahe, stats).map_err(|err| image_error(&path, err))?;
            let p = model.predict(&x).map_err(|err| CliError::Internal(err.to_string()))?;
            Ok(std::array::from_fn(|c| p[c]))
        })
        .collect::<Result<_, CliError>>()?;
    Ok(macro_metrics(&probs, &manifest.label_indices())?)
}

/// Text table in the column order `Acc. Recall Precision Auc F1 score`.
/// The model row carries top-1 accuracy and macro-averaged scores; class
/// rows carry one-vs-rest values.
pub fn render_report(model: &str, r: &EvalReport) -> String {
    let mut s = format!(
        "{:<14} {:>8} {:>8} {:>10} {:>8} {:>9}\n",
        "", "Acc.", "Recall", "Precision", "Auc", "F1 score"
    );
    let m = &r.macro_avg;
    let row = |name: &str, acc: f64, rec: f64, prec: f64, auc: f64, f1: f64| {
        format!("{name:<14} {:>7.2}% {rec:>8.4} {prec:>10.4} {auc:>8.4} {f1:>9.4}\n", acc * 100.0)
    };
    s += &row(model, r.top1_accuracy, m.recall, m.precision, m.auc, m.f1);
    for (name, c) in &r.per_class {
        let mut line = row(&format!("  {name}"), c.accuracy, c.recall, c.precision, c.auc, c.f1);
        if !c.degenerate.is_empty() {
            line.insert_str(line.len() - 1, &format!("  (undefined: {})", c.degenerate.join(", ")));
        }
        s += &line;
    }
    s += &format!("samples: {}, macro one-vs-rest accuracy: {:.2}%\n", r.sample_count, m.accuracy * 100.0);
    s
}

/// Count grid with a row per split plus totals.
pub fn render_split(counts: &[[usize; NUM_CLASSES]; 3]) -> String {
    let mut s = format!("{:<11}", "");
    for l in CLASS_LABELS {
        s += &format!(" {l:>10}");
    }
    s += &format!(" {:>7}\n", "total");
    let mut totals = [0usize; NUM_CLASSES];
    let line = |name: &str, c: &[usize; NUM_CLASSES]| {
        let mut l = format!("{name:<11}");
        for v in c {
            l += &format!(" {v:>10}");
        }
        l + &format!(" {:>7}\n", c.iter().sum::<usize>())
    };
    for (name, c) in ["train", "validation", "test"].iter().zip(counts) {
        for k in 0..NUM_CLASSES {
            totals[k] += c[k];
        }
        s += &line(name, c);
    }
    s + &line("total", &totals)
}

#[derive(Serialize)]
struct StageDump<'a> {
    stage: usize,
    name: &'a str,
    /// `[channels, height, width]`
    shape: [usize; 3],
    data: &'a [f32],
}

fn dump_stage(stages: &PreprocessStages, n: usize, path: &Path) -> Result<Vec<u8>, CliError> {
    let t = stages.stage(n).ok_or_else(|| CliError::Usage(format!("no stage {n}")))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => {
            if n > 3 {
                return Err(CliError::Usage(format!(
                    "stage {n} holds non-8-bit values; write it as .json"
                )));
            }
            let img = GrayImage::from_tensor(&t).map_err(|e| CliError::Internal(e.to_string()))?;
            Ok(encode_gray_png(&img))
        }
        Some("json") => {
            let d = StageDump {
                stage: n,
                name: PreprocessStages::stage_name(n),
                shape: [t.channels(), t.height(), t.width()],
                data: t.data(),
            };
            Ok(serde_json::to_vec(&d).expect("serializable"))
        }
        _ => Err(CliError::Usage(format!("{}: output must end in .png or .json", path.display()))),
    }
}
