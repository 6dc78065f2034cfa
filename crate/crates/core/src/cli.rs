//! Command-line pipeline: synth, preprocess, train, eval, explain.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::data::netpbm::{read_pgm, write_pgm, write_ppm, GrayImage};
use crate::data::{
    gamma_correct_u8, load_manifest, read_manifest, synth_generate, write_manifest, Dataset, GammaSpec, Plane,
    SynthSpec,
};
use crate::error::{Error, Result};
use crate::explain::{colorize, grad_cam, overlay, ColorMap};
use crate::metrics::{MetricsReport, DEFAULT_THRESHOLD};
use crate::model::{load_checkpoint, save_checkpoint, ModelConfig, SNeurodCnn, TrainingMetadata};
use crate::tensor::{set_num_threads, Prng};
use crate::training::{evaluate, fit, split_dataset, SplitSpec, TrainConfig};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub const THREADS_ENV: &str = "SNEUROD_THREADS";

#[derive(Debug, Parser)]
#[command(name = "sneurod", version, about = "MCI vs AD slice classifier with Grad-CAM maps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labelled slice dataset.
    Synth(SynthArgs),
    /// Write gamma-corrected copies of every image plus a manifest.
    Preprocess(PreprocessArgs),
    /// Train, then report metrics on the held-out test split.
    Train(TrainArgs),
    /// Score a checkpoint on the test split (or the whole manifest).
    Eval(EvalArgs),
    /// Grad-CAM heatmaps and overlays for individual images.
    Explain(ExplainArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 96)]
    pub height: usize,
    #[arg(long, default_value_t = 96)]
    pub width: usize,
    #[arg(long, default_value_t = 0.8, allow_negative_numbers = true)]
    pub cue_strength: f64,
    /// Global intensity multiplier in (0, 1].
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub brightness: f64,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config's manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub image_root: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Overrides output.directory.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Defaults to `<output>/model.sndc`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Defaults to `<output>/eval`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Evaluate every manifest row instead of the test split.
    #[arg(long)]
    pub all: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// PGM images to explain.
    #[arg(long = "image", required = true)]
    pub images: Vec<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub class: usize,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    /// Defaults to `<output>/explain`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

fn default_gamma() -> Option<f64> {
    Some(GammaSpec::default().gamma)
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub manifest: PathBuf,
    /// Defaults to the manifest's directory.
    #[serde(default)]
    pub image_root: Option<PathBuf>,
    #[serde(default)]
    pub plane: Option<Plane>,
    /// `null` disables gamma correction.
    #[serde(default = "default_gamma")]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default)]
    pub subject_grouped: bool,
    #[serde(default = "default_true")]
    pub stratify: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub directory: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { directory: PathBuf::from("run") }
    }
}

/// JSON run description. Relative paths resolve against the directory of
/// the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub output: OutputSection,
}

impl RunConfig {
    /// Parse from JSON text. `l2_lambda` may be given in either the model
    /// or the train section; when given in both the values must agree.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let lookup = |v: &serde_json::Value, section: &str| v.get(section).and_then(|s| s.get("l2_lambda")).cloned();
        let (m, t) = (lookup(&value, "model"), lookup(&value, "train"));
        match (&m, &t) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::Config(format!("model.l2_lambda ({a}) and train.l2_lambda ({b}) disagree")))
            }
            (Some(x), None) | (None, Some(x)) => {
                for section in ["model", "train"] {
                    let obj = value
                        .as_object_mut()
                        .ok_or_else(|| Error::Config("config must be a JSON object".into()))?
                        .entry(section)
                        .or_insert_with(|| serde_json::json!({}));
                    if let Some(o) = obj.as_object_mut() {
                        o.insert("l2_lambda".into(), x.clone());
                    }
                }
            }
            _ => {}
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        self.data.manifest = join(&self.data.manifest);
        self.data.image_root = self.data.image_root.as_deref().map(join);
        self.output.directory = join(&self.output.directory);
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.model.l2_lambda != self.train.l2_lambda {
            return Err(Error::Config("model.l2_lambda and train.l2_lambda disagree".into()));
        }
        if self.model.num_classes != 2 {
            return Err(Error::Config("the pipeline is binary; model.num_classes must be 2".into()));
        }
        if let Some(g) = self.data.gamma {
            GammaSpec::new(g).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn image_root(&self) -> PathBuf {
        self.data
            .image_root
            .clone()
            .unwrap_or_else(|| self.data.manifest.parent().unwrap_or(Path::new(".")).to_path_buf())
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            seed: self.data.split_seed,
            stratify: self.data.stratify,
            group_by_subject: self.data.subject_grouped,
            ..SplitSpec::default()
        }
    }

    /// Manifest rows, plane-filtered and gamma-corrected.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let mut ds = load_manifest(&self.data.manifest, self.image_root())?;
        if let Some(plane) = self.data.plane {
            ds = ds.filter_plane(plane);
        }
        match self.data.gamma {
            Some(g) => ds.gamma_corrected(&GammaSpec::new(g)?),
            None => Ok(ds),
        }
    }
}

/// Failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Parameter(_) => EXIT_CONFIG,
            Error::Numeric(_) => EXIT_NUMERIC,
            Error::Shape(_)
            | Error::Data(_)
            | Error::Manifest { .. }
            | Error::Image(_)
            | Error::Checkpoint(_)
            | Error::Io { .. } => EXIT_DATA,
        };
        CliError { code, message: e.to_string() }
    }
}

fn usage(message: String) -> CliError {
    CliError { code: EXIT_USAGE, message }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Refuse to replace existing artifacts unless `force` is set.
fn guard_outputs(paths: &[PathBuf], force: bool) -> CliResult<()> {
    if force {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(usage(format!("{} already exists (pass --force to overwrite)", p.display()))),
        None => Ok(()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn threads_from_env() -> CliResult<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().ok().filter(|&n| n >= 1).ok_or_else(|| CliError {
            code: EXIT_CONFIG,
            message: format!("{THREADS_ENV} must be a positive integer, got {v:?}"),
        })?;
        set_num_threads(n);
    }
    Ok(())
}

/// Parse `args` (including the program name) and run. Returns the exit
/// status; diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match threads_from_env().and_then(|_| dispatch(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Explain(a) => explain(a),
    }
}

fn synth(a: SynthArgs) -> CliResult<()> {
    let spec = SynthSpec {
        seed: a.seed,
        n: a.n,
        height: a.height,
        width: a.width,
        cue_strength: a.cue_strength,
        brightness: a.brightness,
        ..SynthSpec::default()
    };
    spec.validate()?;
    guard_outputs(&[a.out.join("manifest.csv"), a.out.join("images")], a.force)?;
    let ds = synth_generate(&spec, &a.out)?;
    info!("wrote {} images to {}", ds.len(), a.out.display());
    Ok(())
}

fn preprocess(a: PreprocessArgs) -> CliResult<()> {
    let cfg = a.config.as_deref().map(RunConfig::load).transpose()?;
    let manifest_path = a
        .manifest
        .or_else(|| cfg.as_ref().map(|c| c.data.manifest.clone()))
        .ok_or_else(|| usage("preprocess needs --manifest or --config".into()))?;
    let root = a
        .image_root
        .or_else(|| cfg.as_ref().map(|c| c.image_root()))
        .unwrap_or_else(|| manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf());
    let gamma = match a.gamma {
        Some(g) => g,
        None => cfg
            .as_ref()
            .map_or(default_gamma(), |c| c.data.gamma)
            .ok_or_else(|| usage("gamma is disabled in the config; pass --gamma".into()))?,
    };
    let spec = GammaSpec::new(gamma)?;
    let manifest = read_manifest(&manifest_path)?;
    let out_manifest = a.out.join("manifest.csv");
    let mut targets = vec![out_manifest.clone()];
    targets.extend(manifest.rows.iter().map(|r| a.out.join(&r.path)));
    guard_outputs(&targets, a.force)?;

    let mut corrected = Vec::with_capacity(manifest.rows.len());
    for (row, r) in manifest.rows.iter().enumerate() {
        if r.path.is_absolute() || r.path.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
            return Err(Error::Manifest { row, reason: "preprocess needs paths inside the image root".into() }.into());
        }
        let img = read_pgm(root.join(&r.path))
            .map_err(|e| Error::Manifest { row, reason: format!("cannot read image: {e}") })?;
        let pixels = gamma_correct_u8(&img.pixels, &spec)?;
        corrected.push(GrayImage { pixels, ..img });
    }
    for (r, img) in manifest.rows.iter().zip(&corrected) {
        let dest = a.out.join(&r.path);
        if let Some(parent) = dest.parent() {
            create_dir(parent)?;
        }
        write_pgm(img, &dest)?;
    }
    create_dir(&a.out)?;
    write_manifest(&manifest, &out_manifest)?;
    info!("gamma {gamma}: wrote {} images to {}", corrected.len(), a.out.display());
    Ok(())
}

struct Splits {
    train: Dataset,
    validation: Dataset,
    test: Dataset,
}

fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let ds = cfg.load_dataset()?;
    let (train, validation, test) = split_dataset(&ds, &cfg.split_spec())?;
    Ok(Splits { train, validation, test })
}

/// Metrics JSON and ROC CSV text for a model on a dataset.
fn score(model: &SNeurodCnn, ds: &Dataset, batch_size: usize) -> Result<(String, Option<String>)> {
    let ev = evaluate(model, ds, batch_size)?;
    let (report, curve) = MetricsReport::from_scores(&ev.positive_scores(), &ds.labels(), DEFAULT_THRESHOLD)?;
    Ok((report.to_json() + "\n", curve.map(|c| c.to_csv())))
}

fn write_scores(dir: &Path, json: &str, roc: Option<&str>) -> Result<()> {
    write_text(&dir.join("metrics.json"), json)?;
    if let Some(roc) = roc {
        write_text(&dir.join("roc.csv"), roc)?;
    }
    Ok(())
}

fn train(a: TrainArgs) -> CliResult<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.max_epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(o) = a.output {
        cfg.output.directory = o;
    }
    cfg.validate()?;
    let out = cfg.output.directory.clone();
    let artifacts = ["model.sndc", "history.csv", "metrics.json", "roc.csv"].map(|f| out.join(f));
    guard_outputs(&artifacts, a.force)?;

    let splits = load_splits(&cfg)?;
    info!(
        "split sizes: train {}, validation {}, test {}",
        splits.train.len(),
        splits.validation.len(),
        splits.test.len()
    );
    let mut model = SNeurodCnn::build(cfg.model.clone(), &mut Prng::new(cfg.train.seed))?;
    let history = fit(&mut model, &splits.train, &splits.validation, &cfg.train)?;
    let (json, roc) = score(&model, &splits.test, cfg.train.batch_size)?;

    create_dir(&out)?;
    let meta = TrainingMetadata {
        epoch: history.best_epoch.unwrap_or(history.epochs_run()),
        best_val_loss: history.best_record().map(|r| r.val_loss),
    };
    save_checkpoint(&model, &meta, out.join("model.sndc"))?;
    write_text(&out.join("history.csv"), &history.to_csv())?;
    write_scores(&out, &json, roc.as_deref())?;
    info!("wrote model, history and test metrics to {}", out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let cfg = RunConfig::load(&a.config)?;
    let ckpt = a.checkpoint.unwrap_or_else(|| cfg.output.directory.join("model.sndc"));
    let out = a.out.unwrap_or_else(|| cfg.output.directory.join("eval"));
    guard_outputs(&[out.join("metrics.json"), out.join("roc.csv")], a.force)?;
    let model = load_checkpoint(&ckpt)?.model;
    if model.config().input_height != cfg.model.input_height || model.config().input_width != cfg.model.input_width {
        return Err(Error::Config(format!(
            "checkpoint expects {}x{} inputs, config says {}x{}",
            model.config().input_height,
            model.config().input_width,
            cfg.model.input_height,
            cfg.model.input_width
        ))
        .into());
    }
    let ds = if a.all { cfg.load_dataset()? } else { load_splits(&cfg)?.test };
    let (json, roc) = score(&model, &ds, cfg.train.batch_size)?;
    create_dir(&out)?;
    write_scores(&out, &json, roc.as_deref())?;
    info!("wrote metrics for {} samples to {}", ds.len(), out.display());
    Ok(())
}

fn explain(a: ExplainArgs) -> CliResult<()> {
    let cfg = RunConfig::load(&a.config)?;
    let ckpt = a.checkpoint.unwrap_or_else(|| cfg.output.directory.join("model.sndc"));
    let out = a.out.unwrap_or_else(|| cfg.output.directory.join("explain"));
    if !(0.0..=1.0).contains(&a.alpha) {
        return Err(Error::Parameter(format!("alpha must be in [0, 1], got {}", a.alpha)).into());
    }
    let mut jobs = Vec::with_capacity(a.images.len());
    for path in &a.images {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| usage(format!("cannot name outputs for {}", path.display())))?;
        jobs.push((path, out.join(format!("{stem}_heatmap.pgm")), out.join(format!("{stem}_overlay.ppm"))));
    }
    let targets: Vec<PathBuf> = jobs.iter().flat_map(|(_, h, o)| [h.clone(), o.clone()]).collect();
    guard_outputs(&targets, a.force)?;

    let model = load_checkpoint(&ckpt)?.model;
    let gamma = cfg.data.gamma.map(GammaSpec::new).transpose()?;
    let cmap = ColorMap::default();
    let mut rendered = Vec::with_capacity(jobs.len());
    for (path, _, _) in &jobs {
        let gray = read_pgm(path)?;
        let mut x = gray.to_tensor();
        if let Some(g) = &gamma {
            x = crate::data::gamma_correct(&x, g)?;
        }
        let x = x.into_shape(&[1, 1, gray.height, gray.width])?;
        let heat = grad_cam(&model, &x, a.class)?;
        let over = overlay(&colorize(&heat, &cmap), &gray, a.alpha)?;
        rendered.push((heat.to_gray()?, over));
    }
    create_dir(&out)?;
    for ((_, hp, op), (heat, over)) in jobs.iter().zip(&rendered) {
        write_pgm(heat, hp)?;
        write_ppm(over, op)?;
    }
    info!("wrote {} explanations to {}", rendered.len(), out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = RunConfig::from_json(r#"{"data": {"manifest": "m.csv"}}"#).unwrap();
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.data.gamma, Some(0.2));
        assert!(cfg.data.stratify);
        let none = RunConfig::from_json(r#"{"data": {"manifest": "m.csv", "gamma": null}}"#).unwrap();
        assert_eq!(none.data.gamma, None);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        for text in [
            r#"{"data": {"manifest": "m.csv"}, "extra": 1}"#,
            r#"{"data": {"manifest": "m.csv", "colour": true}}"#,
            r#"{"data": {"manifest": "m.csv"}, "train": {"lr": 0.1}}"#,
            r#"{"data": {"manifest": "m.csv", "gamma": 0}}"#,
            r#"{"data": {"manifest": "m.csv"}, "train": {"batch_size": 0}}"#,
            r#"{"data": {}}"#,
            "not json",
        ] {
            assert!(matches!(RunConfig::from_json(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn l2_lambda_is_shared_between_sections() {
        let one = RunConfig::from_json(r#"{"data": {"manifest": "m"}, "train": {"l2_lambda": 0.5}}"#).unwrap();
        assert_eq!((one.model.l2_lambda, one.train.l2_lambda), (0.5, 0.5));
        let both = r#"{"data": {"manifest": "m"}, "model": {"l2_lambda": 0.1}, "train": {"l2_lambda": 0.2}}"#;
        assert!(matches!(RunConfig::from_json(both), Err(Error::Config(_))));
    }

    #[test]
    fn paths_resolve_against_config_directory() {
        let mut cfg =
            RunConfig::from_json(r#"{"data": {"manifest": "d/m.csv"}, "output": {"directory": "/abs/out"}}"#).unwrap();
        cfg.resolve_paths(Path::new("/cfgdir"));
        assert_eq!(cfg.data.manifest, PathBuf::from("/cfgdir/d/m.csv"));
        assert_eq!(cfg.image_root(), PathBuf::from("/cfgdir/d"));
        assert_eq!(cfg.output.directory, PathBuf::from("/abs/out"));
    }

    #[test]
    fn error_kinds_map_to_exit_codes() {
        let code = |e: Error| CliError::from(e).code;
        assert_eq!(code(Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(code(Error::Parameter("x".into())), EXIT_CONFIG);
        assert_eq!(code(Error::Data("x".into())), EXIT_DATA);
        assert_eq!(code(Error::Numeric("x".into())), EXIT_NUMERIC);
        assert_eq!(run(["sneurod", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["sneurod", "train"]), EXIT_USAGE);
    }
}
