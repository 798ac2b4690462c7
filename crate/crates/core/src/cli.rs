//! The `rtxnet` command-line front end.
//!
//! Configuration is resolved in layers: preset defaults, then the TOML file
//! given with `--config` (relative paths resolved against the file), then
//! `RTXNET_OUTPUT_DIR`, then `--set section.key=value` and the subcommand's
//! own flags. The resolved configuration is hashed (SHA-256 of its canonical
//! TOML form) and every command prints that hash.
//!
//! Exit codes: 0 success, 1 failed gradient check, 2 usage or configuration
//! error, 3 runtime abort.

use std::ffi::OsString;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::datasets::{load_manifest, select_subset, write_manifest, Manifest, ManifestRow, Split};
use crate::degradation::{degrade, sample_exposure_factor, DegradeParams};
use crate::error::{Error, Result};
use crate::imageio::{load_rgb, load_thermal, save_image, save_thermal, Image, ThermalImage};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{Checkpoint, ModelConfig, Network, Variant};
use crate::training::gradcheck::{gradient_check_network, GradCheckOptions};
use crate::training::{train, TrainConfig};

pub const OUTPUT_DIR_ENV: &str = "RTXNET_OUTPUT_DIR";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const LOCK_FILE: &str = ".rtxnet.lock";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// About 0.65M parameters.
    #[default]
    Full,
    /// About 8.6k parameters, for quick experiments.
    Desk,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Full => ModelConfig::default(),
            Preset::Desk => ModelConfig::desk(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradeConfig {
    pub shot_coeff: f64,
    pub read_coeff: f64,
    pub exposure_low: f64,
    pub exposure_high: f64,
    /// Fixed factor for every image instead of a random draw.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exposure_factor: Option<f64>,
    pub seed: u64,
    /// Keep every `stride`-th input image (sorted by file name).
    pub stride: usize,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self {
            shot_coeff: crate::degradation::DEFAULT_SHOT_COEFF,
            read_coeff: crate::degradation::DEFAULT_READ_COEFF,
            exposure_low: crate::degradation::EXPOSURE_RANGE.0,
            exposure_high: crate::degradation::EXPOSURE_RANGE.1,
            exposure_factor: None,
            seed: 0,
            stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    pub tolerance: f64,
    pub step: f64,
    pub size: usize,
    pub max_entries_per_param: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        let d = GradCheckOptions::default();
        Self {
            tolerance: d.tolerance,
            step: d.step,
            size: d.size,
            max_entries_per_param: d.max_entries_per_param,
            seed: d.seed,
        }
    }
}

/// The fully resolved configuration of one invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
    pub degrade: DegradeConfig,
    pub gradcheck: GradcheckConfig,
}

impl RunConfig {
    pub fn defaults(preset: Preset) -> Self {
        Self {
            preset,
            model: preset.model(),
            train: TrainConfig::default(),
            paths: PathsConfig {
                train_manifest: None,
                test_manifest: None,
                checkpoint: None,
                output_dir: PathBuf::from("rtxnet-out"),
            },
            degrade: DegradeConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate_for(self.train.ablation_mode)?;
        self.train.validate()?;
        let d = &self.degrade;
        if !(d.exposure_low < d.exposure_high) {
            return Err(Error::Config("degrade.exposure_low must be below exposure_high".into()));
        }
        if d.stride == 0 {
            return Err(Error::Config("degrade.stride must be at least 1".into()));
        }
        let g = &self.gradcheck;
        if !(g.tolerance > 0.0 && g.step > 0.0) || g.size < 1 || g.max_entries_per_param == 0 {
            return Err(Error::Config("gradcheck settings must be positive".into()));
        }
        Ok(())
    }

    /// Canonical TOML text; the input to [`RunConfig::hash`].
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn grad_options(&self) -> GradCheckOptions {
        GradCheckOptions {
            tolerance: self.gradcheck.tolerance,
            step: self.gradcheck.step,
            size: self.gradcheck.size,
            max_entries_per_param: self.gradcheck.max_entries_per_param,
            seed: self.gradcheck.seed,
            variant: self.train.ablation_mode,
        }
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses `section.key=value`; the value is read as TOML and falls back to
/// a plain string.
pub fn parse_override(s: &str) -> Result<Table> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok(nest(key.trim(), value))
}

fn nest(key: &str, value: Value) -> Table {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().unwrap_or_default();
    let mut t = Table::new();
    t.insert(last.to_string(), value);
    for p in parts.into_iter().rev() {
        let mut outer = Table::new();
        outer.insert(p.to_string(), Value::Table(t));
        t = outer;
    }
    t
}

fn path_value(p: &Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

fn resolve_file_paths(t: &mut Table, base: &Path) {
    if let Some(Value::Table(paths)) = t.get_mut("paths") {
        let keys: Vec<String> = paths.keys().cloned().collect();
        for k in keys {
            if let Some(Value::String(s)) = paths.get(&k) {
                let p = Path::new(s.as_str());
                if p.is_relative() {
                    let resolved = path_value(&base.join(p));
                    paths.insert(k, resolved);
                }
            }
        }
    }
}

/// Builds the resolved configuration from its layers.
pub fn resolve_config(file: Option<&Path>, env_output_dir: Option<PathBuf>, overrides: &[Table]) -> Result<RunConfig> {
    let mut layers = Table::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut t: Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        resolve_file_paths(&mut t, dir);
        merge(&mut layers, t);
    }
    if let Some(dir) = env_output_dir {
        merge(&mut layers, nest("paths.output_dir", path_value(&dir)));
    }
    for o in overrides {
        merge(&mut layers, o.clone());
    }
    let preset: Preset = match layers.get("preset") {
        Some(v) => v
            .clone()
            .try_into()
            .map_err(|e| Error::Config(format!("preset: {e}")))?,
        None => Preset::default(),
    };
    let mut base = Table::try_from(RunConfig::defaults(preset)).map_err(|e| Error::Config(e.to_string()))?;
    merge(&mut base, layers);
    let cfg: RunConfig = Value::Table(base)
        .try_into()
        .map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Parser, Debug)]
#[command(name = "rtxnet", version, about = "RGB-thermal low-light image enhancement")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set train.iterations=100`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Model size preset.
    #[arg(long, global = true)]
    pub preset: Option<Preset>,
    /// Worker threads; computation is single-threaded, so only 1 is accepted.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Enhance one aligned RGB/thermal pair.
    Enhance(EnhanceArgs),
    /// Score a checkpoint on a manifest and write a CSV report.
    #[command(alias = "eval")]
    Evaluate(EvalArgs),
    /// Synthesize low-exposure inputs from a directory of references.
    Degrade(DegradeArgs),
    /// Train and evaluate all three architecture variants.
    Ablate(AblateArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub ablation_mode: Option<String>,
}

#[derive(Args, Debug)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub rgb: PathBuf,
    #[arg(long)]
    pub thermal: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Force the illumination map to 1.
    #[arg(long)]
    pub unit_illumination: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub unit_illumination: bool,
}

#[derive(Args, Debug)]
pub struct DegradeArgs {
    #[arg(long)]
    pub input_dir: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory of thermal frames with the same file names as the inputs.
    #[arg(long)]
    pub thermal_dir: Option<PathBuf>,
    #[arg(long)]
    pub factor: Option<f64>,
    #[arg(long)]
    pub no_noise: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub train_manifest: Option<PathBuf>,
    #[arg(long)]
    pub test_manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub ablation_mode: Option<String>,
    /// Scale the parameter gradients of layers under this name prefix by
    /// 1.5, to demonstrate that the check catches a broken backward pass.
    #[arg(long, value_name = "PREFIX")]
    pub inject_fault: Option<String>,
}

/// A failure carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: e.to_string(),
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_RUNTIME,
        message: e.to_string(),
    }
}

/// Exit code for an error raised while a command is executing.
fn classify(e: Error) -> Failure {
    match e {
        Error::NonFinite(_) | Error::Rank(_) => runtime(e),
        Error::Io { .. } | Error::Checkpoint(_) => runtime(e),
        _ => usage(e),
    }
}

type CmdResult = std::result::Result<i32, Failure>;

fn set<T: Serialize>(overrides: &mut Vec<Table>, key: &str, v: Option<T>) -> std::result::Result<(), Failure> {
    if let Some(v) = v {
        let value = Value::try_from(v).map_err(usage)?;
        overrides.push(nest(key, value));
    }
    Ok(())
}

fn set_path(overrides: &mut Vec<Table>, key: &str, p: &Option<PathBuf>) {
    if let Some(p) = p {
        overrides.push(nest(key, path_value(p)));
    }
}

fn command_overrides(cmd: &Command) -> std::result::Result<Vec<Table>, Failure> {
    let mut o = Vec::new();
    match cmd {
        Command::Train(a) => {
            set_path(&mut o, "paths.train_manifest", &a.manifest);
            set_path(&mut o, "paths.output_dir", &a.out);
            set(&mut o, "train.iterations", a.iterations)?;
            set(&mut o, "train.seed", a.seed)?;
            set(&mut o, "train.ablation_mode", a.ablation_mode.clone())?;
        }
        Command::Enhance(a) => set_path(&mut o, "paths.checkpoint", &a.checkpoint),
        Command::Evaluate(a) => {
            set_path(&mut o, "paths.checkpoint", &a.checkpoint);
            set_path(&mut o, "paths.test_manifest", &a.manifest);
        }
        Command::Degrade(a) => {
            set_path(&mut o, "paths.output_dir", &a.out);
            set(&mut o, "degrade.exposure_factor", a.factor)?;
            set(&mut o, "degrade.seed", a.seed)?;
            set(&mut o, "degrade.stride", a.stride)?;
            if a.no_noise {
                set(&mut o, "degrade.shot_coeff", Some(0.0))?;
                set(&mut o, "degrade.read_coeff", Some(0.0))?;
            }
        }
        Command::Ablate(a) => {
            set_path(&mut o, "paths.train_manifest", &a.train_manifest);
            set_path(&mut o, "paths.test_manifest", &a.test_manifest);
            set_path(&mut o, "paths.output_dir", &a.out);
            set(&mut o, "train.iterations", a.iterations)?;
            set(&mut o, "train.seed", a.seed)?;
        }
        Command::Gradcheck(a) => {
            set(&mut o, "gradcheck.tolerance", a.tolerance)?;
            set(&mut o, "gradcheck.seed", a.seed)?;
            set(&mut o, "train.ablation_mode", a.ablation_mode.clone())?;
        }
    }
    Ok(o)
}

/// Exclusive claim on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self { path })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn lock(dir: &Path) -> std::result::Result<OutputLock, Failure> {
    OutputLock::acquire(dir).map_err(|e| {
        usage(format!(
            "cannot lock output directory {} (is another run using it?): {e}",
            dir.display()
        ))
    })
}

fn snapshot(cfg: &RunConfig, dir: &Path) -> std::result::Result<(), Failure> {
    let path = dir.join(CONFIG_SNAPSHOT);
    let text = cfg.to_toml().map_err(usage)?;
    std::fs::write(&path, text).map_err(|e| runtime(Error::io(&path, e)))
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(cli: Cli) -> CmdResult {
    if cli.threads != 1 {
        return Err(usage("only --threads 1 is supported"));
    }
    let mut overrides = Vec::new();
    if let Some(p) = cli.preset {
        set(&mut overrides, "preset", Some(p))?;
    }
    for s in &cli.set {
        overrides.push(parse_override(s).map_err(usage)?);
    }
    overrides.extend(command_overrides(&cli.command)?);
    let env_dir = std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from);
    let cfg = resolve_config(cli.config.as_deref(), env_dir, &overrides).map_err(usage)?;
    let hash = cfg.hash().map_err(usage)?;
    println!("config hash {hash}");
    match cli.command {
        Command::Train(_) => cmd_train(&cfg),
        Command::Enhance(a) => cmd_enhance(&cfg, &a),
        Command::Evaluate(a) => cmd_eval(&cfg, &a, &hash),
        Command::Degrade(a) => cmd_degrade(&cfg, &a),
        Command::Ablate(_) => cmd_ablate(&cfg, &hash),
        Command::Gradcheck(a) => cmd_gradcheck(&cfg, &a),
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> std::result::Result<&'a PathBuf, Failure> {
    p.as_ref().ok_or_else(|| usage(format!("no {what} given")))
}

fn cmd_train(cfg: &RunConfig) -> CmdResult {
    let manifest_path = required(&cfg.paths.train_manifest, "training manifest (paths.train_manifest or --manifest)")?;
    let manifest = load_manifest(manifest_path).map_err(usage)?;
    let out = &cfg.paths.output_dir;
    let _lock = lock(out)?;
    snapshot(cfg, out)?;
    let outcome = train(&manifest, cfg.model, cfg.train, out).map_err(classify)?;
    println!("checkpoint {}", outcome.checkpoint.display());
    println!("metrics {}", outcome.metrics_log.display());
    if let Some(l) = outcome.final_loss {
        println!("final loss {l}");
    }
    Ok(EXIT_OK)
}

fn load_model(cfg: &RunConfig, unit_illumination: bool) -> std::result::Result<(Checkpoint, Network), Failure> {
    let path = required(&cfg.paths.checkpoint, "checkpoint (paths.checkpoint or --checkpoint)")?;
    let ck = Checkpoint::load(path).map_err(usage)?;
    let mut net = ck.network().map_err(usage)?;
    net.set_unit_illumination(unit_illumination);
    Ok((ck, net))
}

fn cmd_enhance(cfg: &RunConfig, a: &EnhanceArgs) -> CmdResult {
    let (ck, net) = load_model(cfg, a.unit_illumination)?;
    let rgb = load_rgb(&a.rgb).map_err(usage)?;
    let thermal = load_thermal(&a.thermal).map_err(usage)?;
    if rgb.height() != thermal.height() || rgb.width() != thermal.width() {
        return Err(usage(format!(
            "RGB is {}x{} but thermal is {}x{}",
            rgb.height(),
            rgb.width(),
            thermal.height(),
            thermal.width()
        )));
    }
    let start = Instant::now();
    let out = net.enhance(&ck.params, &ck.pca, &rgb, &thermal).map_err(classify)?;
    let elapsed = start.elapsed();
    save_image(&out, &a.out).map_err(classify)?;
    println!("enhanced {} in {:.1} ms", a.out.display(), elapsed.as_secs_f64() * 1e3);
    Ok(EXIT_OK)
}

fn cmd_eval(cfg: &RunConfig, a: &EvalArgs, hash: &str) -> CmdResult {
    let manifest_path = required(&cfg.paths.test_manifest, "evaluation manifest (paths.test_manifest or --manifest)")?;
    let manifest = load_manifest(manifest_path).map_err(usage)?;
    let (ck, net) = load_model(cfg, a.unit_illumination)?;
    let report = evaluate(&manifest, ck.variant.as_str(), hash, |rgb, th| {
        net.enhance(&ck.params, &ck.pca, rgb, th)
    });
    report.write_csv(&a.report).map_err(classify)?;
    print_summary(&report);
    Ok(EXIT_OK)
}

fn print_summary(r: &EvalReport) {
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "{}: {} rows, {} failed, mean PSNR {} dB, mean SSIM {}",
        r.method,
        r.rows.len(),
        r.failed(),
        fmt(r.mean_psnr()),
        fmt(r.mean_ssim())
    );
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

/// Channel-mean stand-in for a missing thermal frame.
fn luminance_surrogate(img: &Image) -> Result<ThermalImage> {
    ThermalImage::from_fn(img.height(), img.width(), |y, x| {
        (img.get(y, x, 0) + img.get(y, x, 1) + img.get(y, x, 2)) / 3.0
    })
}

fn cmd_degrade(cfg: &RunConfig, a: &DegradeArgs) -> CmdResult {
    let d = &cfg.degrade;
    let inputs = list_pngs(&a.input_dir).map_err(usage)?;
    if inputs.is_empty() {
        return Err(usage(format!("no PNG files in {}", a.input_dir.display())));
    }
    let inputs = select_subset(&inputs, d.stride).map_err(usage)?;
    let out = &cfg.paths.output_dir;
    let _lock = lock(out)?;
    snapshot(cfg, out)?;
    let low_dir = out.join("low");
    std::fs::create_dir_all(&low_dir).map_err(|e| runtime(Error::io(&low_dir, e)))?;
    let thermal_dir = out.join("thermal");
    let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
    let mut rows = Vec::with_capacity(inputs.len());
    for (i, path) in inputs.iter().enumerate() {
        let name = path.file_name().expect("listed files have names");
        let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
        let reference = load_rgb(path).map_err(usage)?;
        let factor = match d.exposure_factor {
            Some(f) => f,
            None => sample_exposure_factor(&mut rng, d.exposure_low, d.exposure_high).map_err(usage)?,
        };
        let params = DegradeParams {
            exposure_factor: factor,
            shot_coeff: d.shot_coeff,
            read_coeff: d.read_coeff,
            seed: d.seed,
            image_index: i as u64,
        };
        let low = degrade(&reference, &params).map_err(usage)?;
        let low_path = low_dir.join(name);
        save_image(&low, &low_path).map_err(classify)?;
        let thermal_path = match &a.thermal_dir {
            Some(dir) => {
                let p = dir.join(name);
                if !p.is_file() {
                    return Err(usage(format!("missing thermal frame {}", p.display())));
                }
                std::fs::canonicalize(&p).unwrap_or(p)
            }
            None => {
                std::fs::create_dir_all(&thermal_dir).map_err(|e| runtime(Error::io(&thermal_dir, e)))?;
                let p = thermal_dir.join(name);
                save_thermal(&luminance_surrogate(&reference).map_err(usage)?, &p).map_err(classify)?;
                p
            }
        };
        let mut row = ManifestRow::new(
            stem,
            low_path,
            thermal_path,
            std::fs::canonicalize(path).unwrap_or_else(|_| path.clone()),
        );
        row.exposure_factor = Some(factor);
        rows.push(row);
        println!("{} factor {factor}", name.to_string_lossy());
    }
    let manifest = Manifest::new(Split::Train, rows).map_err(usage)?;
    let mpath = out.join("manifest.jsonl");
    write_manifest(&manifest, &mpath).map_err(classify)?;
    println!("manifest {} ({} rows)", mpath.display(), manifest.rows.len());
    Ok(EXIT_OK)
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub mode: String,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    let mut s = String::from("mode,psnr_db,ssim\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.mode, fmt(r.psnr_db), fmt(r.ssim)));
    }
    s
}

fn cmd_ablate(cfg: &RunConfig, hash: &str) -> CmdResult {
    let train_path = required(&cfg.paths.train_manifest, "training manifest (paths.train_manifest)")?;
    let train_manifest = load_manifest(train_path).map_err(usage)?;
    let test_manifest = match &cfg.paths.test_manifest {
        Some(p) => load_manifest(p).map_err(usage)?,
        None => train_manifest.clone(),
    };
    for v in Variant::ALL {
        cfg.model.validate_for(v).map_err(usage)?;
    }
    let out = &cfg.paths.output_dir;
    let _lock = lock(out)?;
    snapshot(cfg, out)?;

    let baseline = evaluate(&test_manifest, "input", hash, |rgb, _| Ok(rgb.clone()));
    let mut rows = Vec::new();
    for mode in Variant::ALL {
        let dir = out.join(mode.as_str());
        let tcfg = TrainConfig {
            ablation_mode: mode,
            ..cfg.train
        };
        let outcome = train(&train_manifest, cfg.model, tcfg, &dir).map_err(classify)?;
        let ck = Checkpoint::load(&outcome.checkpoint).map_err(classify)?;
        let net = ck.network().map_err(classify)?;
        let report = evaluate(&test_manifest, mode.as_str(), hash, |rgb, th| net.enhance(&ck.params, &ck.pca, rgb, th));
        report.write_csv(dir.join("report.csv")).map_err(classify)?;
        print_summary(&report);
        rows.push(AblationRow {
            mode: mode.as_str().to_string(),
            psnr_db: report.mean_psnr(),
            ssim: report.mean_ssim(),
        });
    }
    let table = ablation_table(&rows);
    let path = out.join("ablation.csv");
    std::fs::write(&path, &table).map_err(|e| runtime(Error::io(&path, e)))?;
    print!("{table}");
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "input baseline: PSNR {} dB, SSIM {}",
        fmt(baseline.mean_psnr()),
        fmt(baseline.mean_ssim())
    );
    Ok(EXIT_OK)
}

fn cmd_gradcheck(cfg: &RunConfig, a: &GradcheckArgs) -> CmdResult {
    let opts = cfg.grad_options();
    let (mut net, mut store) = Network::new(cfg.model, opts.variant).map_err(usage)?;
    if let Some(prefix) = &a.inject_fault {
        let n = net.inject_gradient_fault(prefix, 1.5);
        if n == 0 {
            return Err(usage(format!("no layer matches {prefix:?}")));
        }
        println!("injected fault into {n} layer(s) under {prefix}");
    }
    let start = Instant::now();
    let report = gradient_check_network(&net, &mut store, &opts).map_err(classify)?;
    println!("{report}");
    println!(
        "rows {} parameters {} in {:.1} s",
        report.rows.len(),
        store.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(if report.passed() { EXIT_OK } else { EXIT_CHECK_FAILED })
}
