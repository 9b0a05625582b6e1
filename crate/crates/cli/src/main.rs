//! `wsp`: generate data, pretrain, probe, project, gradcheck and sweep.

mod config;
mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use wsp_core::data::{generate_synthetic_dataset, load_dataset, save_dataset, PreparedDataset};
use wsp_core::encoders::{Arch, EncoderCheckpoint, EncoderConfig};
use wsp_core::evaluation::{
    extract_representations, mean_std, pca_project, random_checkpoint, run_probe_protocol, sigma_sweep,
    write_embeddings_csv, write_metrics_csv, write_pca_csv, DEFAULT_SWEEP_SIGMAS,
};
use wsp_core::gradcheck::{gradcheck_all, GRADCHECK_TOLERANCE};
use wsp_core::losses::LossKind;
use wsp_core::trainer::{pretrain, write_loss_curve};
use wsp_core::{exec, WspError};

use config::RunConfig;

/// Bad flags or configuration, reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(name = "wsp", version, about = "Weakly-supervised positional contrastive pretraining")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a deterministic synthetic dataset.
    Generate(GenerateArgs),
    /// Contrastive pretraining; writes a checkpoint and its loss curve.
    Pretrain(PretrainArgs),
    /// Cross-validated linear probe of frozen representations.
    Probe(ProbeArgs),
    /// PCA projection of the representations, optionally as SVG.
    Project(ProjectArgs),
    /// Compare analytic loss gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Pretrain and probe across kernel bandwidths.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory [default: config output_dir].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of volumes (one per patient) [default: 60].
    #[arg(long)]
    volumes: Option<usize>,
    /// Slices per volume [default: 24].
    #[arg(long)]
    slices: Option<usize>,
    /// Slice size as HxW [default: 32x32].
    #[arg(long)]
    size: Option<String>,
    /// Weak-label noise rate [default: 0.1].
    #[arg(long)]
    noise: Option<f64>,
    /// [default: config seed, 0].
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainFlags {
    /// Loss: wsp, supcon, depth or infonce [default: wsp].
    #[arg(long)]
    loss: Option<LossKind>,
    /// Depth-kernel bandwidth [default: 0.1].
    #[arg(long)]
    sigma: Option<f64>,
    /// Temperature [default: 0.1].
    #[arg(long)]
    tau: Option<f64>,
    /// [default: 30].
    #[arg(long)]
    epochs: Option<usize>,
    /// Slices per batch, two views each [default: 32].
    #[arg(long)]
    batch: Option<usize>,
    /// Learning rate [default: 1e-4].
    #[arg(long)]
    lr: Option<f64>,
    /// tiny_cnn or mlp [default: tiny_cnn].
    #[arg(long)]
    arch: Option<Arch>,
    /// [default: config seed, 0].
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PretrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path [default: <output_dir>/checkpoint.wspc].
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file, or `random` for an untrained encoder.
    #[arg(long)]
    ckpt: String,
    /// [default: 5].
    #[arg(long)]
    folds: Option<usize>,
    /// metrics.csv path [default: <output_dir>/metrics.csv].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the representation table here.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Method label in metrics.csv [default: checkpoint loss kind, or random].
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ProjectArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file, or `random`.
    #[arg(long)]
    ckpt: String,
    /// pca.csv path [default: <output_dir>/pca.csv].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    svg: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    batches: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated bandwidths.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SWEEP_SIGMAS)]
    sigmas: Vec<f64>,
    /// Summary CSV, one row per sigma [default: <output_dir>/sigma_sweep.csv].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-fold metrics in metrics.csv format.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    folds: Option<usize>,
    #[command(flatten)]
    train: TrainFlags,
}

fn output_path(explicit: Option<PathBuf>, cfg: &RunConfig, default_name: &str) -> Result<PathBuf> {
    match (explicit, &cfg.output_dir) {
        (Some(p), _) => Ok(p),
        (None, Some(dir)) => Ok(dir.join(default_name)),
        (None, None) => Err(usage(format!("no --out given and no output_dir configured for {default_name}"))),
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parent_dir(path).join(format!("{stem}{suffix}"))
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| usage(format!("--size must look like 32x32, got '{s}'")))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| usage(format!("bad size component '{v}'")));
    Ok((parse(h)?, parse(w)?))
}

fn load_prepared(dir: &Path, cfg: &RunConfig) -> Result<PreparedDataset> {
    let ds = load_dataset(dir)?;
    Ok(PreparedDataset::new(&ds, &cfg.data.prep)?)
}

fn encoder_for(cfg: &RunConfig, ds: &PreparedDataset) -> EncoderConfig {
    EncoderConfig {
        input_shape: [1, ds.height, ds.width],
        ..cfg.encoder.clone()
    }
}

fn apply_train_flags(cfg: &mut RunConfig, f: &TrainFlags) {
    if let Some(s) = f.seed {
        cfg.seed = s;
    }
    if let Some(k) = f.loss {
        cfg.loss.kind = k;
    }
    if let Some(s) = f.sigma {
        cfg.loss.sigma = s;
    }
    if let Some(t) = f.tau {
        cfg.loss.tau = t;
    }
    if let Some(e) = f.epochs {
        cfg.optim.epochs = e;
    }
    if let Some(b) = f.batch {
        cfg.optim.batch_size = b;
    }
    if let Some(lr) = f.lr {
        cfg.optim.lr = lr;
    }
    if let Some(a) = f.arch {
        cfg.encoder.arch = a;
    }
    cfg.resolve();
}

fn load_checkpoint(spec: &str, cfg: &RunConfig, ds: &PreparedDataset) -> Result<EncoderCheckpoint> {
    if spec == "random" {
        return Ok(random_checkpoint(ds, &encoder_for(cfg, ds))?);
    }
    Ok(EncoderCheckpoint::load(Path::new(spec))?)
}

fn cmd_generate(mut cfg: RunConfig, a: GenerateArgs) -> Result<()> {
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let g = &mut cfg.data.generator;
    if let Some(v) = a.volumes {
        g.n_volumes = v;
    }
    if let Some(s) = a.slices {
        g.slices_per_volume = s;
    }
    if let Some(size) = &a.size {
        (g.height, g.width) = parse_size(size)?;
    }
    if let Some(r) = a.noise {
        g.label_noise = r;
    }
    cfg.resolve();
    let out = match (a.out, &cfg.output_dir) {
        (Some(p), _) => p,
        (None, Some(d)) => d.clone(),
        (None, None) => return Err(usage("generate needs --out or output_dir")),
    };
    let ds = generate_synthetic_dataset(&cfg.data.generator, cfg.seed)?;
    save_dataset(&out, &ds)?;
    cfg.echo(&out)?;
    println!("wrote {} volumes to {}", ds.volumes.len(), out.display());
    Ok(())
}

fn cmd_pretrain(mut cfg: RunConfig, a: PretrainArgs) -> Result<()> {
    apply_train_flags(&mut cfg, &a.train);
    if a.train.sigma.is_some() && !cfg.loss.kind.uses_sigma() {
        eprintln!("warning: --sigma is ignored by the {} loss", cfg.loss.kind.name());
    }
    let ckpt_path = output_path(a.out, &cfg, "checkpoint.wspc")?;
    let ds = load_prepared(&a.data, &cfg)?;
    let enc = encoder_for(&cfg, &ds);
    let out = match pretrain(&ds, &enc, &cfg.optim) {
        Ok(out) => out,
        Err(e @ WspError::NonFinite { .. }) => {
            let dump = sibling(&ckpt_path, ".nonfinite.txt");
            std::fs::create_dir_all(parent_dir(&dump)).ok();
            std::fs::write(&dump, format!("{e}\n")).with_context(|| format!("writing {}", dump.display()))?;
            return Err(anyhow::Error::new(e).context(format!("batch dump written to {}", dump.display())));
        }
        Err(e) => return Err(e.into()),
    };
    if out.used_fallback {
        eprintln!("note: cohort too small for one slice per patient; used the balanced fallback sampler");
    }
    let dir = parent_dir(&ckpt_path);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    out.checkpoint.save(&ckpt_path)?;
    write_loss_curve(&sibling(&ckpt_path, ".loss.csv"), &out.curve)?;
    cfg.echo(&dir)?;
    let last = out.curve.last().map(|e| e.mean_loss).unwrap_or(f64::NAN);
    println!(
        "{}: {} steps, final epoch loss {last:.6}, checkpoint {}",
        cfg.loss.kind.name(),
        out.checkpoint.step,
        ckpt_path.display()
    );
    Ok(())
}

fn cmd_probe(mut cfg: RunConfig, a: ProbeArgs) -> Result<()> {
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(k) = a.folds {
        cfg.probe.folds = k;
    }
    cfg.resolve();
    let out = output_path(a.out, &cfg, "metrics.csv")?;
    let ds = load_prepared(&a.data, &cfg)?;
    let ckpt = load_checkpoint(&a.ckpt, &cfg, &ds)?;
    let table = extract_representations(&ckpt, &ds)?;
    let method = a.method.unwrap_or_else(|| match ckpt.loss_kind {
        Some(k) => k.name().to_string(),
        None => "random".to_string(),
    });
    let report = run_probe_protocol(&table, &method, None, &cfg.probe)?;
    let dir = parent_dir(&out);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_metrics_csv(&out, std::slice::from_ref(&report))?;
    if let Some(path) = &a.embeddings {
        write_embeddings_csv(path, &table)?;
    }
    cfg.echo(&dir)?;
    println!(
        "{method}: patient AUC {:.4} ± {:.4}, bACC {:.4} ± {:.4} over {} folds",
        report.mean_auc, report.std_auc, report.mean_bacc, report.std_bacc, cfg.probe.folds
    );
    Ok(())
}

fn cmd_project(mut cfg: RunConfig, a: ProjectArgs) -> Result<()> {
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.resolve();
    let out = output_path(a.out, &cfg, "pca.csv")?;
    let ds = load_prepared(&a.data, &cfg)?;
    let ckpt = load_checkpoint(&a.ckpt, &cfg, &ds)?;
    let table = extract_representations(&ckpt, &ds)?;
    let pca = pca_project(&table.features, 2)?;
    let dir = parent_dir(&out);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_pca_csv(&out, &table, &pca)?;
    if let Some(path) = &a.svg {
        std::fs::write(path, svg::scatter(&table, &pca)).with_context(|| format!("writing {}", path.display()))?;
    }
    cfg.echo(&dir)?;
    println!(
        "explained variance: pc1 {:.4}, pc2 {:.4}; {} rows",
        pca.explained[0],
        pca.explained[1],
        table.rows.len()
    );
    Ok(())
}

fn cmd_gradcheck(cfg: RunConfig, a: GradcheckArgs) -> Result<()> {
    if a.batches == 0 {
        return Err(usage("--batches must be >= 1"));
    }
    let results = gradcheck_all(a.seed, a.batches, &cfg.loss)?;
    let mut failed = Vec::new();
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{:12} max rel err {:.3e} over {} batches  {verdict}", r.kind.name(), r.max_error, r.batches);
        if !r.passed() {
            failed.push(format!("{} ({:.3e})", r.kind.name(), r.max_error));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(WspError::NonFinite {
            step: 0,
            location: "gradcheck".into(),
            detail: format!("relative error above {GRADCHECK_TOLERANCE:e}: {}", failed.join(", ")),
        }
        .into())
    }
}

fn cmd_sweep(mut cfg: RunConfig, a: SweepArgs) -> Result<()> {
    if a.sigmas.is_empty() {
        return Err(usage("--sigmas must list at least one bandwidth"));
    }
    apply_train_flags(&mut cfg, &a.train);
    if let Some(k) = a.folds {
        cfg.probe.folds = k;
    }
    let out = output_path(a.out, &cfg, "sigma_sweep.csv")?;
    let ds = load_prepared(&a.data, &cfg)?;
    let enc = encoder_for(&cfg, &ds);
    let reports = sigma_sweep(&ds, &enc, &cfg.optim, &a.sigmas, &cfg.probe)?;
    let mut text = String::from("sigma,auc_mean,auc_std,bacc_mean,bacc_std\n");
    for (s, r) in a.sigmas.iter().zip(&reports) {
        text.push_str(&format!("{s},{},{},{},{}\n", r.mean_auc, r.std_auc, r.mean_bacc, r.std_bacc));
        println!("sigma {s}: patient AUC {:.4} ± {:.4}", r.mean_auc, r.std_auc);
    }
    let dir = parent_dir(&out);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(&out, text).with_context(|| format!("writing {}", out.display()))?;
    if let Some(path) = &a.metrics {
        write_metrics_csv(path, &reports)?;
    }
    let aucs: Vec<f64> = reports.iter().map(|r| r.mean_auc).collect();
    let (m, s) = mean_std(&aucs);
    println!("across sigmas: {m:.4} ± {s:.4}");
    cfg.echo(&dir)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<WspError>() {
            return match e {
                WspError::Config(_) => EXIT_USAGE,
                WspError::NonFinite { .. } | WspError::Degenerate(_) | WspError::Domain(_) => EXIT_NUMERICAL,
                _ => EXIT_DATA,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_DATA;
        }
    }
    EXIT_DATA
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Generate(a) => cmd_generate(cfg, a),
        Command::Pretrain(a) => cmd_pretrain(cfg, a),
        Command::Probe(a) => cmd_probe(cfg, a),
        Command::Project(a) => cmd_project(cfg, a),
        Command::Gradcheck(a) => cmd_gradcheck(cfg, a),
        Command::Sweep(a) => cmd_sweep(cfg, a),
    }
}

fn main() -> ExitCode {
    if let Ok(v) = std::env::var("WSP_THREADS") {
        match v.parse::<usize>() {
            Ok(n) => exec::init_threads(Some(n)),
            Err(_) => {
                eprintln!("error: WSP_THREADS must be a positive integer, got '{v}'");
                return ExitCode::from(EXIT_USAGE);
            }
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
