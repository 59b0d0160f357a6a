//! `vitlens` command line: model and dataset setup, precompute, serving and
//! export.

mod export;

use std::ffi::OsString;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use vitlens_core::autoencoder::AeConfig;
use vitlens_core::embed::EmbeddingConfig;
use vitlens_core::patterns::{classify_pattern, ClassifierThresholds};
use vitlens_core::precompute::{precompute, PatternRecord, PrecomputeConfig};
use vitlens_core::store::{generate_synthetic, init_model, load_model, save_model, Cache, Dataset, Key, Kind};
use vitlens_core::ModelConfig;
use vitlens_server::{ApiState, ServerConfig};

pub use export::{export, ExportWhat};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
        }
    }
}

impl From<vitlens_core::Error> for CliError {
    fn from(e: vitlens_core::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "vitlens", version, about = "Attention-head analysis workbench for small Vision Transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded, randomly initialized model weight file.
    InitModel(InitModelArgs),
    /// Write a labeled dataset of synthetic shape images.
    GenSynthetic(GenSyntheticArgs),
    /// Fill an analysis cache from a model and a dataset.
    Precompute(PrecomputeArgs),
    /// Serve the JSON API over a cache.
    Serve(ServeArgs),
    /// Write embeddings, importance summaries or the pattern census as
    /// delimited text.
    Export(ExportArgs),
    /// Print the pattern tags of one head on one image.
    Classify(ClassifyArgs),
}

#[derive(Debug, Args)]
pub struct InitModelArgs {
    /// Image side in pixels.
    #[arg(long, default_value_t = ModelConfig::TINY.image_size)]
    pub w: usize,
    /// Patch side in pixels.
    #[arg(long, default_value_t = ModelConfig::TINY.patch_size)]
    pub pz: usize,
    /// Embedding width.
    #[arg(long, default_value_t = ModelConfig::TINY.embed_dim)]
    pub h: usize,
    /// Number of layers.
    #[arg(long, default_value_t = ModelConfig::TINY.layers)]
    pub l: usize,
    /// Heads per layer.
    #[arg(long, default_value_t = ModelConfig::TINY.heads)]
    pub n: usize,
    /// Number of output classes.
    #[arg(long, default_value_t = ModelConfig::TINY.num_classes)]
    pub classes: usize,
    /// Weight initialization seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Destination weight file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenSyntheticArgs {
    /// Destination directory (images plus manifest.csv).
    #[arg(long)]
    pub out: PathBuf,
    /// Number of images.
    #[arg(long, default_value_t = 50)]
    pub count: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = ModelConfig::TINY.image_size)]
    pub side: usize,
    /// Shape, color and placement seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PrecomputeArgs {
    /// Model weight file.
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory containing manifest.csv.
    #[arg(long)]
    pub data: PathBuf,
    /// Cache directory.
    #[arg(long, visible_alias = "cache", env = "VITLENS_CACHE")]
    pub out: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Fraction of patch-to-patch cells kept when binarizing.
    #[arg(long)]
    pub bin_ratio: Option<f64>,
    /// Autoencoder latent size.
    #[arg(long)]
    pub ae_latent: Option<usize>,
    /// Autoencoder training epochs.
    #[arg(long)]
    pub ae_epochs: Option<usize>,
    /// Autoencoder minibatch size.
    #[arg(long)]
    pub ae_batch: Option<usize>,
    /// Autoencoder learning rate.
    #[arg(long)]
    pub ae_lr: Option<f64>,
    /// Autoencoder initialization and shuffling seed.
    #[arg(long)]
    pub ae_seed: Option<u64>,
    /// t-SNE perplexity.
    #[arg(long)]
    pub perplexity: Option<f64>,
    /// t-SNE iterations.
    #[arg(long)]
    pub tsne_iterations: Option<usize>,
    /// t-SNE initialization seed.
    #[arg(long)]
    pub tsne_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Model weight file the cache was built with.
    #[arg(long)]
    pub model: PathBuf,
    /// Cache directory.
    #[arg(long, env = "VITLENS_CACHE")]
    pub cache: PathBuf,
    /// Dataset directory; enables live pruning.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Listen address.
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    /// Listen port.
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Allowed CORS origin, or `*` for any.
    #[arg(long)]
    pub cors_origin: Option<String>,
    /// Live-prune forwards allowed at once.
    #[arg(long, default_value_t = 2)]
    pub prune_workers: usize,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Cache directory.
    #[arg(long, env = "VITLENS_CACHE")]
    pub cache: PathBuf,
    /// What to write.
    #[arg(long, value_enum, default_value_t = ExportWhat::All)]
    pub what: ExportWhat,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Field delimiter (a single ASCII character).
    #[arg(long, default_value = ",")]
    pub delimiter: char,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    /// Cache directory.
    #[arg(long, env = "VITLENS_CACHE")]
    pub cache: PathBuf,
    /// Image id as listed in the dataset manifest.
    #[arg(long)]
    pub image: String,
    /// Layer index, from 0.
    #[arg(long)]
    pub layer: usize,
    /// Head index within the layer, from 0.
    #[arg(long)]
    pub head: usize,
}

fn require_path(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    // a second call in the same process keeps the first subscriber
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging();
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::InitModel(a) => init_model_cmd(&a),
        Command::GenSynthetic(a) => gen_synthetic_cmd(&a),
        Command::Precompute(a) => precompute_cmd(&a),
        Command::Serve(a) => serve_cmd(&a),
        Command::Export(a) => {
            require_path(&a.cache, "cache")?;
            if !a.delimiter.is_ascii() {
                return Err(CliError::Usage(format!("delimiter `{}` is not ASCII", a.delimiter)));
            }
            let cache = Cache::open(&a.cache)?;
            for path in export(&cache, a.what, &a.out, a.delimiter as u8)? {
                println!("{}", path.display());
            }
            Ok(())
        }
        Command::Classify(a) => classify_cmd(&a),
    }
}

fn init_model_cmd(a: &InitModelArgs) -> CliResult<()> {
    let config = ModelConfig {
        image_size: a.w,
        patch_size: a.pz,
        embed_dim: a.h,
        layers: a.l,
        heads: a.n,
        num_classes: a.classes,
    };
    config.validate().map_err(CliError::Usage)?;
    let model = init_model(config, a.seed)?;
    save_model(&a.out, &model)?;
    println!("{}", a.out.display());
    Ok(())
}

fn gen_synthetic_cmd(a: &GenSyntheticArgs) -> CliResult<()> {
    if a.count == 0 || a.side == 0 {
        return Err(CliError::Usage("--count and --side must be positive".into()));
    }
    let data = generate_synthetic(&a.out, a.count, a.side, a.seed)?;
    println!("{} images in {}", data.entries.len(), a.out.display());
    Ok(())
}

/// The precompute settings implied by the override flags.
pub fn precompute_config(a: &PrecomputeArgs) -> CliResult<PrecomputeConfig> {
    let mut cfg = PrecomputeConfig::default();
    let ae: &mut AeConfig = &mut cfg.ae;
    if let Some(v) = a.ae_latent {
        ae.latent = v;
    }
    if let Some(v) = a.ae_epochs {
        ae.epochs = v;
    }
    if let Some(v) = a.ae_batch {
        ae.batch = v;
    }
    if let Some(v) = a.ae_lr {
        ae.lr = v;
    }
    if let Some(v) = a.ae_seed {
        ae.seed = v;
    }
    let emb: &mut EmbeddingConfig = &mut cfg.embedding;
    if let Some(v) = a.perplexity {
        emb.perplexity = v;
    }
    if let Some(v) = a.tsne_iterations {
        // keep the exaggeration and momentum phases at their share of the run
        let half = v / 2;
        emb.iterations = v;
        emb.exaggeration_iterations = emb.exaggeration_iterations.min(half);
        emb.momentum_switch = emb.momentum_switch.min(half);
    }
    if let Some(v) = a.tsne_seed {
        emb.seed = v;
    }
    if let Some(v) = a.bin_ratio {
        if !(v > 0.0 && v <= 1.0) {
            return Err(CliError::Usage(format!("--bin-ratio {v} not in (0, 1]")));
        }
        cfg.binarize_ratio = v;
    }
    if ae.latent == 0 || ae.batch == 0 || ae.lr.is_nan() || ae.lr <= 0.0 {
        return Err(CliError::Usage("autoencoder latent, batch and lr must be positive".into()));
    }
    emb.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if a.jobs == Some(0) {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    Ok(cfg)
}

fn precompute_cmd(a: &PrecomputeArgs) -> CliResult<()> {
    require_path(&a.model, "model")?;
    require_path(&a.data, "dataset")?;
    let cfg = precompute_config(a)?;
    let model = load_model(&a.model)?;
    let data = Dataset::open(&a.data)?;
    let report = precompute(&model, &data, &a.out, &cfg, a.jobs)?;
    println!(
        "{} keys computed, {} already cached, {} failed",
        report.computed,
        report.skipped,
        report.failed.len()
    );
    if report.failed.is_empty() {
        Ok(())
    } else {
        for f in &report.failed {
            eprintln!("failed {}: {}", f.key, f.error);
        }
        Err(CliError::Data(format!("{} cache keys could not be computed", report.failed.len())))
    }
}

fn serve_cmd(a: &ServeArgs) -> CliResult<()> {
    require_path(&a.model, "model")?;
    require_path(&a.cache, "cache")?;
    if let Some(d) = &a.data {
        require_path(d, "dataset")?;
    }
    let model = load_model(&a.model)?;
    let cache = Cache::open(&a.cache)?;
    let data = a.data.as_deref().map(Dataset::open).transpose()?;
    let config = ServerConfig {
        cors_origin: a.cors_origin.clone(),
        prune_workers: a.prune_workers,
    };
    let state = ApiState::new(model, cache, data, config).map_err(|e| CliError::Data(e.to_string()))?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Data(format!("runtime: {e}")))?;
    runtime
        .block_on(vitlens_server::serve(state, SocketAddr::new(a.host, a.port)))
        .map_err(|e| CliError::Data(format!("serve: {e}")))
}

/// Tags of one head recomputed from its cached binarized pattern with the
/// cache's classifier thresholds.
pub fn classify_cached(cache: &Cache, image: &str, layer: usize, head: usize) -> CliResult<Vec<String>> {
    let meta = cache.meta();
    if !meta.images.iter().any(|i| i.image_id == image) {
        return Err(CliError::Usage(format!("unknown image `{image}`")));
    }
    if layer >= meta.config.layers || head >= meta.config.heads {
        return Err(CliError::Usage(format!("no head ({layer}, {head}) in this model")));
    }
    let thresholds: ClassifierThresholds = meta
        .settings
        .get("thresholds")
        .cloned()
        .map(serde_json::from_value)
        .transpose()
        .map_err(|e| CliError::Data(format!("cache thresholds: {e}")))?
        .unwrap_or_default();
    let key = Key::image_head(Kind::Pattern, image, layer, head);
    let rec: PatternRecord = cache
        .read_one(&key)?
        .ok_or_else(|| CliError::Data(format!("cache has no {key}; run precompute")))?;
    Ok(classify_pattern(&rec.a_patch_bin, &thresholds)?
        .into_iter()
        .map(|t| t.to_string())
        .collect())
}

fn classify_cmd(a: &ClassifyArgs) -> CliResult<()> {
    require_path(&a.cache, "cache")?;
    let cache = Cache::open(&a.cache)?;
    let tags = classify_cached(&cache, &a.image, a.layer, a.head)?;
    if tags.is_empty() {
        println!("none");
    } else {
        println!("{}", tags.join(" "));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn precompute_args(extra: &[&str]) -> PrecomputeArgs {
        let mut argv = vec!["vitlens", "precompute", "--model", "m", "--data", "d", "--out", "c"];
        argv.extend_from_slice(extra);
        match Cli::try_parse_from(argv).unwrap().command {
            Command::Precompute(a) => a,
            other => panic!("parsed {other:?}"),
        }
    }

    #[test]
    fn overrides_reach_the_config() {
        let cfg = precompute_config(&precompute_args(&[
            "--ae-epochs", "7", "--ae-lr", "0.01", "--perplexity", "5", "--tsne-iterations", "80", "--bin-ratio", "0.05",
        ]))
        .unwrap();
        assert_eq!(cfg.ae.epochs, 7);
        assert_eq!(cfg.ae.lr, 0.01);
        assert_eq!(cfg.embedding.perplexity, 5.0);
        assert_eq!(cfg.embedding.iterations, 80);
        assert_eq!(cfg.embedding.exaggeration_iterations, 40);
        assert_eq!(cfg.binarize_ratio, 0.05);
        assert_eq!(precompute_config(&precompute_args(&[])).unwrap(), PrecomputeConfig::default());
    }

    #[test]
    fn invalid_overrides_are_usage_errors() {
        for bad in [&["--bin-ratio", "0"][..], &["--ae-batch", "0"], &["--jobs", "0"], &["--ae-lr=-1"]] {
            let err = precompute_config(&precompute_args(bad)).unwrap_err();
            assert_eq!(err.exit_code(), EXIT_USAGE, "{bad:?}");
        }
    }
}
