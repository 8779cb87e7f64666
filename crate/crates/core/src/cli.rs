//! The `cin` command line: argument grammar, config files and the
//! subcommands.
//!
//! Exit codes: 0 on success, 1 on usage errors (bad flags, unreadable or
//! invalid config), 2 on runtime failures (missing inputs, divergence).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use log::LevelFilter;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data_synth::{generate_domain_pair, DomainDataset, GeneratorConfig};
use crate::gradsuite::{run_suite, GRAD_TOLERANCE};
use crate::nets::Checkpoint;
use crate::pipeline::{
    ablation_run, evaluate, export_feature_projection, run_from_pretrained, AdaptationConfig, Precision, Pretrained,
    Variant, FORMAT_VERSION,
};
use crate::tensor::Real;
use crate::Error;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "CIN_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "cin-out";

pub const SOURCE_FILE: &str = "source.cindata";
pub const TARGET_FILE: &str = "target.cindata";
pub const DATASET_SIDECAR: &str = "dataset.json";
pub const BASE_CHECKPOINT: &str = "base.ckpt";
pub const EXAMINER_CHECKPOINT: &str = "examiner.ckpt";
pub const CONFIG_ECHO: &str = "config.json";

#[derive(Parser, Debug)]
#[command(
    name = "cin",
    version,
    about = "Cross-inferential networks for source-free domain adaptation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Directory for every artifact this command writes.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = DEFAULT_OUT_DIR)]
    pub out: PathBuf,
    /// More log output on standard error (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only warnings and errors on standard error.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a labeled source / unlabeled target dataset pair.
    GenData(GenDataArgs),
    /// Train the base network (and the examiner for cin_pretrained) on the source domain.
    Pretrain(PretrainArgs),
    /// Adapt to the target domain and write a run report.
    Adapt(AdaptArgs),
    /// Accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Full / w/o AC / w/o CMC / baseline table over several seeds.
    Ablate(AblateArgs),
    /// Finite-difference check of every op and loss.
    GradCheck(GradCheckArgs),
    /// Two-component PCA of a checkpoint's features, as CSV.
    Project(ProjectArgs),
}

/// Hyperparameter overrides, named after the `AdaptationConfig` fields.
#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// JSON object or `key=value` lines; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub source_epochs: Option<usize>,
    #[arg(long)]
    pub source_lr: Option<f64>,
    #[arg(long)]
    pub holdout_fraction: Option<f64>,
    #[arg(long)]
    pub adapt_epochs: Option<usize>,
    #[arg(long)]
    pub adapt_lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub examiner_lr: Option<f64>,
    #[arg(long)]
    pub examiner_passes: Option<usize>,
    #[arg(long)]
    pub examiner_pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub total_stages: Option<usize>,
    #[arg(long)]
    pub triplets_per_batch: Option<usize>,
    /// Disable correlation-matrix consistency.
    #[arg(long)]
    pub no_cmc: bool,
    /// Disable attention consistency.
    #[arg(long)]
    pub no_ac: bool,
    #[arg(long)]
    pub stop_grad_examiner: bool,
    /// Let the correlation term update the examiner too.
    #[arg(long)]
    pub cmc_updates_examiner: bool,
    /// Initialise the cin_pretrained examiner encoder independently.
    #[arg(long)]
    pub no_examiner_init_from_base: bool,
    #[arg(long)]
    pub eq4_literal: bool,
    #[arg(long)]
    pub no_rescale_cosine: bool,
    #[arg(long)]
    pub symmetrize_examiner_corr: bool,
    #[arg(long)]
    pub precision: Option<Precision>,
}

/// Dataset generator overrides.
#[derive(Args, Debug, Default)]
pub struct DataArgs {
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub n_source: Option<usize>,
    #[arg(long)]
    pub n_target: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub rotation_deg: Option<f64>,
    #[arg(long)]
    pub blur_sigma: Option<f64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub intensity_scale: Option<f64>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Generator seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct AdaptArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Directory written by `pretrain`; pre-trains from scratch when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum Split {
    Source,
    Target,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Base network checkpoint file.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "target")]
    pub split: Split,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Comma-separated seeds (at least three).
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    /// Random points per op.
    #[arg(long, default_value_t = 10)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ProjectArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "target")]
    pub split: Split,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("unknown precision `{s}` (expected f32 or f64)"))),
        }
    }
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::command()
        .try_get_matches_from(argv)
        .and_then(|m| Cli::from_arg_matches(&m))
    {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose, cli.quiet);
    match execute(&cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn init_logging(verbose: u8, quiet: bool) {
    let level = match (quiet, verbose) {
        (true, _) => LevelFilter::Warn,
        (false, 0) => LevelFilter::Info,
        (false, 1) => LevelFilter::Debug,
        _ => LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .try_init();
}

fn execute(cli: &Cli) -> CliResult<()> {
    let out = &cli.out;
    match &cli.command {
        Command::GenData(a) => gen_data(a, out),
        Command::Pretrain(a) => pretrain(a, out),
        Command::Adapt(a) => adapt(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Ablate(a) => ablate(a, out),
        Command::GradCheck(a) => grad_check(a, out),
        Command::Project(a) => project(a, out),
    }
}

/// Reads a config file: a JSON object, or `key=value` lines where values
/// are JSON literals or bare strings and dotted keys address nested fields.
pub fn parse_config_text(text: &str) -> Result<Value, String> {
    if text.trim_start().starts_with('{') {
        let v: Value = serde_json::from_str(text).map_err(|e| format!("invalid JSON config: {e}"))?;
        return Ok(v);
    }
    let mut root = Value::Object(Default::default());
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, raw) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value, got `{line}`", n + 1))?;
        let raw = raw.trim();
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let parts: Vec<&str> = key.trim().split('.').collect();
        insert_path(&mut root, &parts, value)
            .map_err(|()| format!("line {}: `{key}` nests into a non-object value", n + 1))?;
    }
    Ok(root)
}

fn insert_path(node: &mut Value, parts: &[&str], value: Value) -> Result<(), ()> {
    let obj = node.as_object_mut().ok_or(())?;
    match parts {
        [last] => {
            obj.insert(last.to_string(), value);
            Ok(())
        }
        [head, rest @ ..] => {
            let child = obj
                .entry(head.to_string())
                .or_insert_with(|| Value::Object(Default::default()));
            insert_path(child, rest, value)
        }
        [] => Err(()),
    }
}

fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

fn patched<T: Serialize + for<'de> Deserialize<'de>>(default: &T, patch: Option<&Value>, what: &str) -> CliResult<T> {
    let mut v = serde_json::to_value(default).map_err(usage)?;
    if let Some(p) = patch {
        merge(&mut v, p);
    }
    serde_json::from_value(v).map_err(|e| usage(format!("{what} config: {e}")))
}

/// Splits a config file into its adaptation part and its `data` part.
fn load_config_file(path: Option<&Path>) -> CliResult<(Option<Value>, Option<Value>)> {
    let Some(path) = path else { return Ok((None, None)) };
    let text =
        std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut v = parse_config_text(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let obj = v
        .as_object_mut()
        .ok_or_else(|| usage(format!("{}: config must be an object", path.display())))?;
    let data = obj.remove("data");
    Ok((Some(v), data))
}

fn set<T: Copy>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl ConfigArgs {
    /// Default config, then the file, then flags.
    fn resolve(&self, data_patch: &mut Option<Value>) -> CliResult<AdaptationConfig> {
        let (file, data) = load_config_file(self.config.as_deref())?;
        if data.is_some() {
            *data_patch = data;
        }
        let mut c: AdaptationConfig = patched(&AdaptationConfig::default(), file.as_ref(), "adaptation")?;
        set(&mut c.variant, self.variant);
        set(&mut c.seed, self.seed);
        set(&mut c.batch_size, self.batch_size);
        set(&mut c.source_epochs, self.source_epochs);
        set(&mut c.source_lr, self.source_lr);
        set(&mut c.holdout_fraction, self.holdout_fraction);
        set(&mut c.adapt_epochs, self.adapt_epochs);
        set(&mut c.adapt_lr, self.adapt_lr);
        set(&mut c.momentum, self.momentum);
        set(&mut c.examiner_lr, self.examiner_lr);
        set(&mut c.examiner_passes, self.examiner_passes);
        set(&mut c.examiner_pretrain_epochs, self.examiner_pretrain_epochs);
        set(&mut c.lambda1, self.lambda1);
        set(&mut c.lambda2, self.lambda2);
        set(&mut c.precision, self.precision);
        if self.total_stages.is_some() {
            c.total_stages = self.total_stages;
        }
        if self.triplets_per_batch.is_some() {
            c.triplets_per_batch = self.triplets_per_batch;
        }
        c.enable_cmc &= !self.no_cmc;
        c.enable_ac &= !self.no_ac;
        c.stop_grad_examiner |= self.stop_grad_examiner;
        c.cmc_updates_examiner |= self.cmc_updates_examiner;
        c.examiner_init_from_base &= !self.no_examiner_init_from_base;
        c.eq4_literal |= self.eq4_literal;
        c.rescale_cosine &= !self.no_rescale_cosine;
        c.symmetrize_examiner_corr |= self.symmetrize_examiner_corr;
        c.validate().map_err(usage)?;
        Ok(c)
    }
}

impl DataArgs {
    fn resolve(&self, patch: Option<&Value>, seed: Option<u64>) -> CliResult<GeneratorConfig> {
        let mut g: GeneratorConfig = patched(&GeneratorConfig::benchmark(0), patch, "data")?;
        set(&mut g.num_classes, self.num_classes);
        set(&mut g.n_source, self.n_source);
        set(&mut g.n_target, self.n_target);
        set(&mut g.height, self.height);
        set(&mut g.width, self.width);
        set(&mut g.shift.rotation_deg, self.rotation_deg);
        set(&mut g.shift.blur_sigma, self.blur_sigma);
        set(&mut g.shift.noise_sigma, self.noise_sigma);
        set(&mut g.shift.intensity_scale, self.intensity_scale);
        set(&mut g.seed, seed);
        g.shift.validate().map_err(usage)?;
        Ok(g)
    }
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(Error::io(dir, e)))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    std::fs::write(path, text).map_err(|e| Failure::Runtime(Error::io(path, e)))
}

/// Writes the config echo that reproduces this invocation.
fn echo(out: &Path, command: &str, body: Value) -> CliResult<()> {
    let mut v = json!({
        "format_version": FORMAT_VERSION,
        "crate_version": env!("CARGO_PKG_VERSION"),
        "command": command,
    });
    merge(&mut v, &body);
    write_json(&out.join(CONFIG_ECHO), &v)
}

#[derive(Serialize, Deserialize)]
struct DatasetSidecar {
    format_version: u32,
    generator: GeneratorConfig,
    source: String,
    target: String,
}

fn gen_data(a: &GenDataArgs, out: &Path) -> CliResult<()> {
    let (_, data_patch) = load_config_file(a.config.as_deref())?;
    let g = a.data.resolve(data_patch.as_ref(), a.seed)?;
    ensure_dir(out)?;
    let (source, target) = generate_domain_pair(&g)?;
    source.save(&out.join(SOURCE_FILE))?;
    target.save(&out.join(TARGET_FILE))?;
    let sidecar = DatasetSidecar {
        format_version: FORMAT_VERSION,
        generator: g.clone(),
        source: SOURCE_FILE.into(),
        target: TARGET_FILE.into(),
    };
    write_json(&out.join(DATASET_SIDECAR), &sidecar)?;
    echo(out, "gen-data", json!({ "data": g }))?;
    println!(
        "gen-data: {} source / {} target images, {} classes -> {}",
        source.len(),
        target.len(),
        g.num_classes,
        out.display()
    );
    Ok(())
}

fn load_split(dir: &Path, split: Split) -> CliResult<DomainDataset> {
    let file = match split {
        Split::Source => SOURCE_FILE,
        Split::Target => TARGET_FILE,
    };
    Ok(DomainDataset::load(&dir.join(file))?)
}

fn pretrained_net<T: Real>(source: &DomainDataset, cfg: &AdaptationConfig, out: &Path) -> CliResult<Pretrained<T>> {
    let pre = Pretrained::<T>::train(source, cfg)?;
    pre.base.to_checkpoint().save(&out.join(BASE_CHECKPOINT))?;
    if let Some(ex) = &pre.examiner {
        ex.to_checkpoint().save(&out.join(EXAMINER_CHECKPOINT))?;
    }
    Ok(pre)
}

fn pretrain(a: &PretrainArgs, out: &Path) -> CliResult<()> {
    let cfg = a.cfg.resolve(&mut None)?;
    let source = load_split(&a.data, Split::Source)?;
    ensure_dir(out)?;
    let acc = match cfg.precision {
        Precision::F32 => pretrained_net::<f32>(&source, &cfg, out)?.source_accuracy,
        Precision::F64 => pretrained_net::<f64>(&source, &cfg, out)?.source_accuracy,
    };
    write_json(
        &out.join("pretrain.json"),
        &json!({ "format_version": FORMAT_VERSION, "config": cfg, "source_accuracy": acc }),
    )?;
    echo(out, "pretrain", json!({ "config": cfg, "data": a.data }))?;
    println!(
        "pretrain: held-out source accuracy {:.4} -> {}",
        acc.unwrap_or(f64::NAN),
        out.join(BASE_CHECKPOINT).display()
    );
    Ok(())
}

fn load_pretrained<T: Real>(dir: &Path, target: &DomainDataset, cfg: &AdaptationConfig) -> CliResult<Pretrained<T>> {
    let hw = target.image_hw();
    let base = Checkpoint::load(&dir.join(BASE_CHECKPOINT))?.to_base::<T>(hw)?;
    let examiner = if cfg.variant == Variant::CinPretrained {
        let path = dir.join(EXAMINER_CHECKPOINT);
        Some(Checkpoint::load(&path)?.to_examiner::<T>(hw, target.num_classes)?)
    } else {
        None
    };
    Ok(Pretrained {
        base,
        source_accuracy: None,
        examiner,
    })
}

fn adapt_typed<T: Real>(a: &AdaptArgs, cfg: &AdaptationConfig, out: &Path) -> CliResult<crate::pipeline::RunReport> {
    let target = load_split(&a.data, Split::Target)?;
    let pre = match &a.checkpoint {
        Some(dir) => load_pretrained::<T>(dir, &target, cfg)?,
        None => pretrained_net::<T>(&load_split(&a.data, Split::Source)?, cfg, out)?,
    };
    let run = run_from_pretrained(&pre, &target, cfg)?;
    run.base.to_checkpoint().save(&out.join("adapted.ckpt"))?;
    if let Some(ex) = &run.examiner {
        ex.to_checkpoint().save(&out.join("adapted-examiner.ckpt"))?;
    }
    Ok(run.report)
}

fn adapt(a: &AdaptArgs, out: &Path) -> CliResult<()> {
    let cfg = a.cfg.resolve(&mut None)?;
    ensure_dir(out)?;
    let report = match cfg.precision {
        Precision::F32 => adapt_typed::<f32>(a, &cfg, out)?,
        Precision::F64 => adapt_typed::<f64>(a, &cfg, out)?,
    };
    report.save(&out.join("report.json"))?;
    echo(
        out,
        "adapt",
        json!({ "config": cfg, "data": a.data, "checkpoint": a.checkpoint }),
    )?;
    println!(
        "adapt {}: target accuracy {:.4} (before adaptation {:.4}) -> {}",
        cfg.variant.name(),
        report.final_accuracy,
        report.initial_accuracy,
        out.join("report.json").display()
    );
    Ok(())
}

fn eval(a: &EvalArgs, out: &Path) -> CliResult<()> {
    let ds = load_split(&a.data, a.split)?;
    let net = Checkpoint::load(&a.checkpoint)?.to_base::<f32>(ds.image_hw())?;
    let e = evaluate(&net, &ds)?;
    ensure_dir(out)?;
    write_json(
        &out.join("eval.json"),
        &json!({ "format_version": FORMAT_VERSION, "evaluation": e }),
    )?;
    echo(
        out,
        "eval",
        json!({ "data": a.data, "checkpoint": a.checkpoint, "split": format!("{:?}", a.split) }),
    )?;
    println!("eval: accuracy {:.4} on {} {:?} images", e.accuracy, ds.len(), a.split);
    Ok(())
}

fn ablate(a: &AblateArgs, out: &Path) -> CliResult<()> {
    if a.seeds.len() < 3 {
        return Err(usage(format!("--seeds needs at least 3 seeds, got {}", a.seeds.len())));
    }
    let mut data_patch = None;
    let mut cfg = a.cfg.resolve(&mut data_patch)?;
    if a.cfg.variant.is_none() && cfg.variant == AdaptationConfig::default().variant {
        cfg.variant = Variant::CinPretrained;
    }
    let g = a.data.resolve(data_patch.as_ref(), None)?;
    ensure_dir(out)?;
    let table = match cfg.precision {
        Precision::F32 => ablation_run::<f32>(&g, &cfg, &a.seeds)?,
        Precision::F64 => ablation_run::<f64>(&g, &cfg, &a.seeds)?,
    };
    table.save(out)?;
    echo(out, "ablate", json!({ "config": cfg, "data": g, "seeds": a.seeds }))?;
    println!(
        "source-only {:.4} +- {:.4}",
        table.source_only.mean, table.source_only.std
    );
    for r in &table.rows {
        println!("{:<10} {:.4} +- {:.4}", r.name, r.mean, r.std);
    }
    Ok(())
}

fn grad_check(a: &GradCheckArgs, out: &Path) -> CliResult<()> {
    if a.points == 0 {
        return Err(usage("--points must be at least 1"));
    }
    let results = run_suite(a.points, a.seed)?;
    let mut failed = Vec::new();
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<28} max rel error {:.3e}  {verdict}", r.name, r.max_rel_error);
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    ensure_dir(out)?;
    write_json(&out.join("grad-check.json"), &results)?;
    if failed.is_empty() {
        println!("grad-check: all {} checks below {GRAD_TOLERANCE:e}", results.len());
        Ok(())
    } else {
        Err(Failure::Runtime(Error::InvalidArgument {
            op: "grad-check",
            reason: format!("relative error above {GRAD_TOLERANCE:e} for {}", failed.join(", ")),
        }))
    }
}

fn project(a: &ProjectArgs, out: &Path) -> CliResult<()> {
    let ds = load_split(&a.data, a.split)?;
    let net = Checkpoint::load(&a.checkpoint)?.to_base::<f32>(ds.image_hw())?;
    ensure_dir(out)?;
    let path = out.join("projection.csv");
    let p = export_feature_projection(&net, &ds, &path)?;
    echo(
        out,
        "project",
        json!({ "data": a.data, "checkpoint": a.checkpoint, "split": format!("{:?}", a.split) }),
    )?;
    println!(
        "project: {} rows, component variances {:.4} / {:.4} -> {}",
        p.coords.len(),
        p.variance[0],
        p.variance[1],
        path.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_value_config_parses_nested_keys_and_literals() {
        let v =
            parse_config_text("# comment\nlambda1 = 3.5\nvariant=shot\nenable_ac=false\ndata.num_classes=3\n").unwrap();
        assert_eq!(v["lambda1"], json!(3.5));
        assert_eq!(v["variant"], json!("shot"));
        assert_eq!(v["enable_ac"], json!(false));
        assert_eq!(v["data"]["num_classes"], json!(3));
        assert!(parse_config_text("just words").is_err());
    }

    #[test]
    fn json_and_key_value_configs_agree() {
        let a = parse_config_text(r#"{"seed": 4, "augment": {"noise_sigma": 0.0}}"#).unwrap();
        let b = parse_config_text("seed=4\naugment.noise_sigma=0.0").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let patch = json!({ "lambda3": 1.0 });
        assert!(patched(&AdaptationConfig::default(), Some(&patch), "adaptation").is_err());
        let patch = json!({ "shift": { "twist": 1.0 } });
        assert!(patched(&GeneratorConfig::benchmark(0), Some(&patch), "data").is_err());
    }

    #[test]
    fn flags_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.cfg");
        std::fs::write(&path, "lambda1=2\nseed=9\n").unwrap();
        let args = ConfigArgs {
            config: Some(path),
            lambda1: Some(10.0),
            no_ac: true,
            ..ConfigArgs::default()
        };
        let c = args.resolve(&mut None).unwrap();
        assert_eq!(c.lambda1, 10.0);
        assert_eq!(c.seed, 9);
        assert!(!c.enable_ac);
    }

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run(["cin", "frobnicate"]), 1);
        assert_eq!(run(["cin", "adapt", "--data", "x", "--lambda1", "ten"]), 1);
        assert_eq!(run(["cin", "--help"]), 0);
    }
}
