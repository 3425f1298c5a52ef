//! `esd`: command line front end for the embedding pipeline.
//!
//! Stages hand data to each other through files only: dataset -> checkpoint
//! -> tiles -> metric CSVs. Every subcommand writes a `manifest` JSON next to
//! its output echoing the resolved configuration and seed, so a run can be
//! reproduced from the manifest alone. Exit codes: 0 success, 1 validation
//! error (arguments, configs, malformed inputs), 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use esd_core::eval::{
    ablation_csv, ablation_run, confusion_csv, denoising_score, extract_features, few_shot_csv,
    few_shot_curve, fit_predict_probe, probe_csv, recon_csv, recon_metrics, AblationKnob,
    FeatureMode, ProbeAlgorithm, ProbeResult,
};
use esd_core::model::{EsdNet, LatentCodeSequence, ModelConfig, ModelError};
use esd_core::synth::{inject_cloud_spikes, GeneratorConfig, SyntheticDataset};
use esd_core::tile::{
    load_tile, pack_tile, save_tile, unpack_tile, volume_report, EmbeddingTile, BYTES_PER_GIB,
    BYTES_PER_MIB, BYTES_PER_TIB,
};
use esd_core::train::{train, write_csv_log_file, TrainConfig};

#[derive(Parser)]
#[command(name = "esd", version, about = "Reflectance time-series embedding pipeline")]
struct Cli {
    /// Master seed; all randomness in a run flows from it.
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,

    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Chattier logging.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labelled dataset (optionally a validation split).
    GenData(GenDataArgs),
    /// Train a model on a dataset file and save a checkpoint directory.
    Train(TrainArgs),
    /// Encode a dataset into a quantized embedding tile.
    Encode(EncodeArgs),
    /// Decode an embedding tile back to reflectance series.
    Decode(DecodeArgs),
    /// Pack a JSON tile description into the binary tile format.
    PackTile(PackTileArgs),
    /// Unpack a binary tile into JSON.
    UnpackTile(UnpackTileArgs),
    /// Reconstruction fidelity of a checkpoint on a dataset.
    EvalRecon(EvalReconArgs),
    /// Frozen-feature transfer: probes across feature sources and classifiers.
    EvalTransfer(EvalTransferArgs),
    /// Probe accuracy as a function of training-set size.
    FewShot(FewShotArgs),
    /// Sweep one architecture knob, training one model per value.
    Ablate(AblateArgs),
    /// Storage accounting versus a daily-reflectance baseline.
    VolumeReport(VolumeReportArgs),
    /// Spike-injection denoising score for a checkpoint.
    DenoiseTest(DenoiseTestArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of land-cover classes to draw from (leading subset).
    #[arg(long, default_value_t = 9)]
    classes: usize,
    /// Samples per class in the training file.
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    /// Samples per class in the validation file (with --val-out).
    #[arg(long, default_value_t = 20)]
    val_per_class: usize,
    #[arg(long, default_value = "dataset.esds")]
    out: PathBuf,
    /// Also write an independent validation split here.
    #[arg(long)]
    val_out: Option<PathBuf>,
    /// Generator config JSON; overrides the built-in class profiles.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Validation dataset file (adds a val MAE column to the log).
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long, default_value = "model")]
    out_dir: PathBuf,
    /// Reconstruction-only training (classification and index heads off).
    #[arg(long)]
    unsupervised: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Latent sequence length (4, 6, 8, 12, or 24).
    #[arg(long)]
    t_lat: Option<usize>,
    /// Residual blocks per coder half.
    #[arg(long)]
    m_res: Option<usize>,
    /// Warm-start from a checkpoint directory written by a previous run;
    /// the architecture comes from the checkpoint (only the loss weights
    /// from --unsupervised/--config still apply).
    #[arg(long, conflicts_with_all = ["t_lat", "m_res"])]
    init_from: Option<PathBuf>,
    /// JSON with {"model": {...}, "train": {...}}; overrides the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EncodeArgs {
    /// Checkpoint directory from `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "tiles")]
    out_dir: PathBuf,
    #[arg(long, default_value = "SYNTH000")]
    tile_id: String,
    #[arg(long, default_value_t = 2022)]
    year: u16,
    /// Tile grid height; defaults to 1 row of all samples.
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// DEFLATE the payload.
    #[arg(long)]
    compress: bool,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Tile file from `encode` or `pack-tile`.
    #[arg(long)]
    tile: PathBuf,
    /// Raw little-endian f32 output, day-major per pixel.
    #[arg(long, default_value = "decoded.f32")]
    out: PathBuf,
}

#[derive(Args)]
struct PackTileArgs {
    /// Tile as JSON: tile_id, year, t_lat, height, width, fsq_levels, codes.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "tile.esd")]
    out: PathBuf,
    #[arg(long)]
    compress: bool,
}

#[derive(Args)]
struct UnpackTileArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "tile.json")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalReconArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset with clean references (the generator keeps them).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "recon.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalTransferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    train_data: PathBuf,
    #[arg(long)]
    test_data: PathBuf,
    /// Comma list of codes, pooled, raw, composite.
    #[arg(long, default_value = "codes,raw,composite")]
    features: String,
    /// Comma list of linear, ridge, knn1, knn3, random_forest.
    #[arg(long, default_value = "linear,knn1,knn3,random_forest")]
    algorithms: String,
    /// Label task: annual, static, or crop.
    #[arg(long, default_value = "annual")]
    task: String,
    #[arg(long, default_value = "transfer")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct FewShotArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    train_data: PathBuf,
    #[arg(long)]
    test_data: PathBuf,
    /// Comma list of training sizes.
    #[arg(long, default_value = "100,300,1000")]
    sizes: String,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value = "linear")]
    algorithm: String,
    #[arg(long, default_value = "codes,raw")]
    features: String,
    #[arg(long, default_value = "fewshot.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// temporal_dim, codebook, residual_layers, or supervision.
    #[arg(long)]
    knob: String,
    /// Comma list of knob values.
    #[arg(long)]
    values: String,
    #[arg(long)]
    train_data: PathBuf,
    #[arg(long)]
    val_data: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Residual blocks in the base configuration.
    #[arg(long)]
    m_res: Option<usize>,
    #[arg(long, default_value = "ablate.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct VolumeReportArgs {
    /// Baseline daily-reflectance volume per tile-year, GiB.
    #[arg(long, default_value_t = 45.6)]
    baseline_gb: f64,
    /// Stored embedding volume per tile-year, MiB.
    #[arg(long, default_value_t = 136.3)]
    tile_mb: f64,
    #[arg(long, default_value_t = 18_466)]
    global_tiles: u64,
    #[arg(long, default_value_t = 1)]
    region_tiles: u64,
    #[arg(long, default_value = "volume_report.json")]
    out: PathBuf,
}

#[derive(Args)]
struct DenoiseTestArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Per-day probability of an injected cloud spike.
    #[arg(long, default_value_t = 0.05)]
    rate: f64,
    #[arg(long, default_value = "denoise.json")]
    out: PathBuf,
}

enum CliError {
    /// Bad arguments, configs, or malformed inputs.
    Validation(String),
    /// Failures once real work has started.
    Runtime(String),
}

impl CliError {
    fn validation(e: impl std::fmt::Display) -> Self {
        CliError::Validation(e.to_string())
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{e}");
                    ExitCode::from(1)
                }
            };
        }
    };

    env_logger::Builder::from_env(
        env_logger::Env::default()
            .default_filter_or(if cli.verbose { "debug" } else { "info" }),
    )
    .init();

    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let seed = cli.seed;
    let threads = cli.threads;
    match cli.command {
        Command::GenData(a) => gen_data(a, seed, threads),
        Command::Train(a) => cmd_train(a, seed, threads),
        Command::Encode(a) => cmd_encode(a, seed, threads),
        Command::Decode(a) => cmd_decode(a, seed, threads),
        Command::PackTile(a) => cmd_pack_tile(a, seed, threads),
        Command::UnpackTile(a) => cmd_unpack_tile(a, seed, threads),
        Command::EvalRecon(a) => eval_recon(a, seed, threads),
        Command::EvalTransfer(a) => eval_transfer(a, seed, threads),
        Command::FewShot(a) => few_shot(a, seed, threads),
        Command::Ablate(a) => ablate(a, seed, threads),
        Command::VolumeReport(a) => cmd_volume_report(a, seed, threads),
        Command::DenoiseTest(a) => denoise_test(a, seed, threads),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

/// Recursive JSON object merge: fields present in `over` replace `base`.
fn merge_json(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge_json(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// Applies a partial JSON config file on top of flag-resolved values.
fn overlay_config<T: Serialize + DeserializeOwned>(
    base: &T,
    path: &Path,
) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
    let over: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
    let mut merged = serde_json::to_value(base).map_err(CliError::runtime)?;
    merge_json(&mut merged, &over);
    serde_json::from_value(merged)
        .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))
}

fn write_manifest(path: &Path, body: Value) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(CliError::runtime)?;
        }
    }
    let text = serde_json::to_string_pretty(&body).map_err(CliError::runtime)?;
    std::fs::write(path, text + "\n").map_err(CliError::runtime)
}

/// Manifest location: `<out>.manifest.json` for file outputs.
fn manifest_for(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(CliError::runtime)?;
        }
    }
    std::fs::write(path, bytes).map_err(CliError::runtime)
}

fn load_dataset(path: &Path) -> Result<SyntheticDataset, CliError> {
    SyntheticDataset::load(path)
        .map_err(|e| CliError::Validation(format!("dataset {}: {e}", path.display())))
}

fn load_model(dir: &Path) -> Result<EsdNet, CliError> {
    EsdNet::load(dir)
        .map_err(|e| CliError::Validation(format!("checkpoint {}: {e}", dir.display())))
}

fn parse_list<T: FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    let items: Result<Vec<T>, _> = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(T::from_str)
        .collect();
    let items = items.map_err(|e| CliError::Validation(format!("{what}: {e}")))?;
    if items.is_empty() {
        return Err(CliError::Validation(format!("{what}: empty list")));
    }
    Ok(items)
}

/// Reconstruction of every sample in a dataset, day-major per sample.
fn reconstruct_all(net: &EsdNet, ds: &SyntheticDataset) -> Result<Vec<Vec<f64>>, CliError> {
    ds.samples
        .par_iter()
        .map(|s| net.decode(&net.encode(s)?))
        .collect::<Result<_, ModelError>>()
        .map_err(CliError::runtime)
}

fn task_labels(
    ds: &SyntheticDataset,
    task: &str,
) -> Result<(Vec<usize>, usize, Vec<String>), CliError> {
    let k = ds.class_names.len();
    match task {
        "annual" => Ok((
            ds.samples.iter().map(|s| s.labels.annual_class).collect(),
            k,
            ds.class_names.clone(),
        )),
        "static" => Ok((
            ds.samples.iter().map(|s| s.labels.static_class).collect(),
            k,
            ds.class_names.clone(),
        )),
        "crop" => Ok((
            ds.samples.iter().map(|s| usize::from(s.labels.crop)).collect(),
            2,
            vec!["other".into(), "crop".into()],
        )),
        other => Err(CliError::Validation(format!(
            "unknown task {other:?}; expected annual, static, or crop"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn gen_data(a: GenDataArgs, seed: u64, threads: Option<usize>) -> Result<(), CliError> {
    let mut cfg = GeneratorConfig::default();
    if let Some(path) = &a.config {
        cfg = overlay_config(&cfg, path)?;
    }
    if a.classes == 0 || a.classes > cfg.profiles.len() {
        return Err(CliError::Validation(format!(
            "--classes {} outside 1..={}",
            a.classes,
            cfg.profiles.len()
        )));
    }
    cfg.profiles.truncate(a.classes);
    cfg.validate().map_err(CliError::validation)?;

    let n_train = a.per_class * a.classes;
    if a.val_out.is_some() {
        let n_val = a.val_per_class * a.classes;
        let (train_set, val_set) =
            SyntheticDataset::generate_pair(&cfg, n_train, n_val, seed).map_err(CliError::runtime)?;
        train_set.save(&a.out).map_err(CliError::runtime)?;
        let val_path = a.val_out.as_ref().unwrap();
        val_set.save(val_path).map_err(CliError::runtime)?;
        log::info!(
            "wrote {} ({} samples) and {} ({} samples)",
            a.out.display(),
            train_set.len(),
            val_path.display(),
            val_set.len()
        );
    } else {
        let ds = SyntheticDataset::generate(&cfg, n_train, seed).map_err(CliError::runtime)?;
        ds.save(&a.out).map_err(CliError::runtime)?;
        log::info!("wrote {} ({} samples)", a.out.display(), ds.len());
    }

    write_manifest(
        &manifest_for(&a.out),
        json!({
            "command": "gen-data",
            "seed": seed,
            "threads": threads,
            "classes": a.classes,
            "per_class": a.per_class,
            "val_per_class": a.val_per_class,
            "outputs": {
                "train": a.out,
                "val": a.val_out,
            },
            "generator": cfg,
        }),
    )
}

fn cmd_train(a: TrainArgs, seed: u64, threads: Option<usize>) -> Result<(), CliError> {
    let mut model_cfg = ModelConfig::default();
    if let Some(t) = a.t_lat {
        model_cfg = ModelConfig::for_t_lat(t).ok_or_else(|| {
            CliError::Validation(format!("--t-lat {t}: supported values are 4, 6, 8, 12, 24"))
        })?;
    }
    if let Some(m) = a.m_res {
        model_cfg.m_res = m;
    }
    if a.unsupervised {
        model_cfg.loss = esd_core::model::LossWeights::unsupervised();
    }

    let mut train_cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    if let Some(e) = a.epochs {
        train_cfg.epochs = e;
    }
    if let Some(b) = a.batch_size {
        train_cfg.batch_size = b;
    }
    if let Some(lr) = a.learning_rate {
        train_cfg.learning_rate = lr;
    }

    if let Some(path) = &a.config {
        #[derive(Serialize, serde::Deserialize)]
        struct FullConfig {
            model: ModelConfig,
            train: TrainConfig,
        }
        let merged = overlay_config(
            &FullConfig { model: model_cfg, train: train_cfg },
            path,
        )?;
        model_cfg = merged.model;
        train_cfg = merged.train;
    }
    model_cfg.validate().map_err(CliError::validation)?;

    let train_set = load_dataset(&a.data)?;
    let val_set = match &a.val {
        Some(p) => Some(load_dataset(p)?),
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = match &a.init_from {
        Some(dir) => {
            let mut net = load_model(dir)?;
            net.set_loss_weights(model_cfg.loss.clone());
            net
        }
        None => EsdNet::new(model_cfg.clone(), &mut rng).map_err(CliError::validation)?,
    };
    let model_cfg = net.config().clone();
    log::info!(
        "training {} params for {} epochs on {} samples",
        net.param_count(),
        train_cfg.epochs,
        train_set.len()
    );
    let stats = train(&mut net, &train_set, val_set.as_ref(), &train_cfg)
        .map_err(CliError::runtime)?;

    std::fs::create_dir_all(&a.out_dir).map_err(CliError::runtime)?;
    net.save(&a.out_dir).map_err(CliError::runtime)?;
    write_csv_log_file(&a.out_dir.join("log.csv"), &stats).map_err(CliError::runtime)?;
    if let Some(last) = stats.last() {
        log::info!(
            "final epoch: total {:.5}, recon {:.5}, val MAE {}",
            last.total,
            last.reconstruction,
            last.val_mae.map_or("n/a".into(), |v| format!("{v:.5}")),
        );
    }

    write_manifest(
        &a.out_dir.join("manifest.json"),
        json!({
            "command": "train",
            "seed": seed,
            "threads": threads,
            "inputs": { "data": a.data, "val": a.val },
            "outputs": {
                "checkpoint": a.out_dir,
                "log": a.out_dir.join("log.csv"),
            },
            "model": model_cfg,
            "train": train_cfg,
        }),
    )
}

fn cmd_encode(a: EncodeArgs, seed: u64, threads: Option<usize>) -> Result<(), CliError> {
    let net = load_model(&a.model)?;
    let ds = load_dataset(&a.data)?;
    let n = ds.len();
    let (height, width) = match (a.height, a.width) {
        (Some(h), Some(w)) => (h, w),
        (None, None) => (1, n),
        _ => {
            return Err(CliError::Validation(
                "--height and --width must be given together".into(),
            ))
        }
    };
    if height * width != n {
        return Err(CliError::Validation(format!(
            "grid {height}x{width} does not hold {n} samples"
        )));
    }

    let sequences: Vec<LatentCodeSequence> = ds
        .samples
        .par_iter()
        .map(|s| net.encode(s))
        .collect::<Result<_, ModelError>>()
        .map_err(CliError::runtime)?;
    let t_lat = net.config().t_lat;
    let mut codes = Vec::with_capacity(t_lat * n);
    for t in 0..t_lat {
        for seq in &sequences {
            codes.push(seq.codes[t]);
        }
    }
    let tile = EmbeddingTile::new(
        a.tile_id.clone(),
        a.year,
        t_lat,
        height,
        width,
        net.fsq().levels().to_vec(),
        codes,
    )
    .map_err(CliError::runtime)?;
    let path = save_tile(&a.out_dir, &tile, a.compress).map_err(CliError::runtime)?;
    log::info!("wrote {} ({} codes)", path.display(), tile.codes.len());

    write_manifest(
        &a.out_dir.join("manifest.json"),
        json!({
            "command": "encode",
            "seed": seed,
            "threads": threads,
            "inputs": { "model": a.model, "data": a.data },
            "outputs": { "tile": path },
            "tile": {
                "tile_id": a.tile_id,
                "year": a.year,
                "t_lat": t_lat,
                "height": height,
                "width": width,
                "compress": a.compress,
            },
        }),
    )
}

fn cmd_decode(a: DecodeArgs, seed: u64, threads: Option<usize>) -> Result<(), CliError> {
    let net = load_model(&a.model)?;
    let tile = load_tile(&a.tile)
        .map_err(|e| CliError::Validation(format!("tile {}: {e}", a.tile.display())))?;
    if tile.fsq_levels != net.fsq().levels() {
        return Err(CliError::Validation(format!(
            "tile levels {:?} do not match the checkpoint's {:?}",
            tile.fsq_levels,
            net.fsq().levels()
        )));
    }
    if tile.t_lat != net.config().t_lat {
        return Err(CliError::Validation(format!(
            "tile T {} does not match the checkpoint's {}",
            tile.t_lat,
            net.config().t_lat
        )));
    }

    let pixels = tile.height * tile.width;
    let series: Vec<Vec<f64>> = (0..pixels)
        .into_par_iter()
        .map(|p| {
            let codes: Vec<u16> = (0..tile.t_lat)
                .map(|t| tile.codes[t * pixels + p])
                .collect();
            net.decode(&LatentCodeSequence { codes })
        })
        .collect::<Result<_, ModelError>>()
        .map_err(CliError::runtime)?;

    let mut bytes = Vec::with_capacity(pixels * series[0].len() * 4);
    for s in &series {
        for &v in s {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_output(&a.out, &bytes)?;
    log::info!("wrote {} ({} pixels)", a.out.display(), pixels);

    write_manifest(
        &manifest_for(&a.out),
        json!({
            "command": "decode",
            "seed": seed,
            "threads": threads,
            "inputs": { "model": a.model, "tile": a.tile },
            "outputs": { "series": a.out },
            "layout": {
                "pixels": pixels,
                "days": 365,
                "bands": 6,
                "dtype": "f32 little-endian, day-major per pixel",
            },
        }),
    )
}

fn cmd_pack_tile(a: PackTileArgs, seed: u64, threads: Option<usize>) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&a.input)
        .map_err(|e| CliError::Validation(format!("{}: {e}", a.input.display())))?;
    let tile: EmbeddingTile = serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", a.input.display())))?;
    let bytes = pack_tile(&tile, a.compress).map_err(CliError::validation)?;
    write_output(&a.out, &bytes)?;
    log::info!("wrote {} ({} bytes)", a.out.display(), bytes.len());

    write_manifest(
        &manifest_for(&a.out),
        json!({
            "command": "pack-tile",
            "seed": seed,
            "threads": threads,
            "inputs": { "tile_json": a.input },
            "outputs": { "tile": a.out },
            "compress": a.compress,
        }),
    )
}

fn cmd_unpack_tile(a: UnpackTileArgs, seed: u64, threads: Option<usize>) -> Result<(), CliError> {
    let bytes = std::fs::read(&a.input)
        .map_err(|e| CliError::Validation(format!("{}: {e}", a.input.display())))?;
    let tile = unpack_tile(&bytes)
        .map_err(|e| CliError::Validation(format!("{}: {e}", a.input.display())))?;
    let text = serde_json::to_string_pretty(&tile).map_err(CliError::runtime)?;
    write_output(&a.out, text.as_bytes())?;
    log::info!(
        "wrote {} ([{}, {}, {}] codes)",
        a.out.display(),
        tile.t_lat,
        tile.height,
        tile.width
    );

    write_manifest(
        &manifest_for(&a.out),
        json!({
            "command": "unpack-tile",
            "seed": seed,
            "threads": threads,
            "inputs": { "tile": a.input },
            "outputs": { "tile_json": a.out },
        }),
    )
}

fn eval_recon(a: EvalReconArgs, seed: u64, threads: Option<usize>) -> Result<(), CliError> {
    let net = load_model(&a.model)?;
    let ds = load_dataset(&a.data)?;
    let preds = reconstruct_all(&net, &ds)?;
    let metrics = recon_metrics(&ds.clean, &preds).map_err(CliError::runtime)?;
    write_output(&a.out, recon_csv(&metrics).as_bytes())?;
    log::info!(
        "mean MAE {:.5}, RMSE {:.5}, CC {:.4} over {} samples",
        metrics.mean_mae,
        metrics.mean_rmse,
        metrics.mean_cc,
        ds.len()
    );
    println!(
        "mae {:.6} rmse {:.6} cc {:.6}",
        metrics.mean_mae, metrics.mean_rmse, metrics.mean_cc
    );

    write_manifest(
        &manifest_for(&a.out),
        json!({
            "command": "eval-recon",
            "seed": seed,
            "threads": threads,
            "inputs": { "model": a.model, "data": a.data },
            "outputs": { "csv": a.out },
            "metrics": metrics,
        }),
    )
}

fn eval_transfer(a: EvalTransferArgs, seed: u64, threads: Option<usize>) -> Result<(), CliError> {
    let net = load_model(&a.model)?;
    let train_set = load_dataset(&a.train_data)?;
    let test_set = load_dataset(&a.test_data)?;
    let features: Vec<FeatureMode> = parse_list(&a.features, "--features")?;
    let algorithms: Vec<ProbeAlgorithm> = parse_list(&a.algorithms, "--algorithms")?;
    let (train_y, k, names) = task_labels(&train_set, &a.task)?;
    let (test_y, _, _) = task_labels(&test_set, &a.task)?;

    std::fs::create_dir_all(&a.out_dir).map_err(CliError::runtime)?;
    let mut results: Vec<ProbeResult> = Vec::new();
    for &mode in &features {
        let train_x = extract_features(&net, &train_set.samples, mode).map_err(CliError::runtime)?;
        let test_x = extract_features(&net, &test_set.samples, mode).map_err(CliError::runtime)?;
        for &algo in &algorithms {
            let r = fit_predict_probe(
                &train_x, &train_y, &test_x, &test_y, k, algo, mode.name(), seed,
            )
            .map_err(CliError::runtime)?;
            log::info!("{} on {}: OA {:.4}", r.classifier, r.feature_source, r.oa);
            let cm_path = a
                .out_dir
                .join(format!("confusion_{}_{}.csv", mode.name(), r.classifier));
            write_output(&cm_path, confusion_csv(&r.confusion, &names).as_bytes())?;
            results.push(r);
        }
    }
    let csv_path = a.out_dir.join("transfer.csv");
    write_output(&csv_path, probe_csv(&results).as_bytes())?;

    let summary: Vec<Value> = results
        .iter()
        .map(|r| json!({ "classifier": r.classifier, "features": r.feature_source, "oa": r.oa }))
        .collect();
    write_manifest(
        &a.out_dir.join("manifest.json"),
        json!({
            "command": "eval-transfer",
            "seed": seed,
            "threads": threads,
            "inputs": { "model": a.model, "train": a.train_data, "test": a.test_data },
            "outputs": { "csv": csv_path },
            "task": a.task,
            "results": summary,
        }),
    )
}

fn few_shot(a: FewShotArgs, seed: u64, threads: Option<usize>) -> Result<(), CliError> {
    let net = load_model(&a.model)?;
    let train_set = load_dataset(&a.train_data)?;
    let test_set = load_dataset(&a.test_data)?;
    let sizes: Vec<usize> = parse_list(&a.sizes, "--sizes")?;
    let features: Vec<FeatureMode> = parse_list(&a.features, "--features")?;
    let algorithm: ProbeAlgorithm = a
        .algorithm
        .parse()
        .map_err(|e: String| CliError::Validation(format!("--algorithm: {e}")))?;
    let (train_y, k, _) = task_labels(&train_set, "annual")?;
    let (test_y, _, _) = task_labels(&test_set, "annual")?;

    let mut curves = Vec::new();
    for &mode in &features {
        let train_x = extract_features(&net, &train_set.samples, mode).map_err(CliError::runtime)?;
        let test_x = extract_features(&net, &test_set.samples, mode).map_err(CliError::runtime)?;
        let points = few_shot_curve(
            &train_x, &train_y, &test_x, &test_y, k, &sizes, a.repeats, algorithm,
            mode.name(), seed,
        )
        .map_err(CliError::runtime)?;
        for p in &points {
            log::info!("{} n={}: mean OA {:.4}", mode.name(), p.size, p.mean_oa);
        }
        curves.push((mode.name().to_string(), points));
    }
    write_output(&a.out, few_shot_csv(&curves).as_bytes())?;

    write_manifest(
        &manifest_for(&a.out),
        json!({
            "command": "few-shot",
            "seed": seed,
            "threads": threads,
            "inputs": { "model": a.model, "train": a.train_data, "test": a.test_data },
            "outputs": { "csv": a.out },
            "sizes": sizes,
            "repeats": a.repeats,
            "algorithm": a.algorithm,
            "curves": curves.iter().map(|(name, points)| {
                json!({ "features": name, "points": points })
            }).collect::<Vec<_>>(),
        }),
    )
}

fn ablate(a: AblateArgs, seed: u64, threads: Option<usize>) -> Result<(), CliError> {
    let knob: AblationKnob = a
        .knob
        .parse()
        .map_err(|e: String| CliError::Validation(format!("--knob: {e}")))?;
    let values: Vec<String> = parse_list(&a.values, "--values")?;
    let train_set = load_dataset(&a.train_data)?;
    let val_set = load_dataset(&a.val_data)?;

    let mut base = ModelConfig::default();
    if let Some(m) = a.m_res {
        base.m_res = m;
    }
    let mut tcfg = TrainConfig { seed, ..TrainConfig::default() };
    if let Some(e) = a.epochs {
        tcfg.epochs = e;
    }
    if let Some(b) = a.batch_size {
        tcfg.batch_size = b;
    }
    if let Some(lr) = a.learning_rate {
        tcfg.learning_rate = lr;
    }

    // Validate every value before spending minutes training the first one.
    for v in &values {
        esd_core::eval::apply_knob(&base, knob, v).map_err(CliError::validation)?;
    }

    let rows = ablation_run(&base, knob, &values, &train_set, &val_set, &tcfg, seed)
        .map_err(CliError::runtime)?;
    for r in &rows {
        log::info!(
            "{} = {}: MAE {:.5}, CC {:.4}, probe OA {:.4}",
            r.knob, r.value, r.mae, r.cc, r.probe_oa
        );
    }
    write_output(&a.out, ablation_csv(&rows).as_bytes())?;

    write_manifest(
        &manifest_for(&a.out),
        json!({
            "command": "ablate",
            "seed": seed,
            "threads": threads,
            "inputs": { "train": a.train_data, "val": a.val_data },
            "outputs": { "csv": a.out },
            "knob": knob.name(),
            "values": values,
            "train": tcfg,
            "rows": rows,
        }),
    )
}

fn cmd_volume_report(a: VolumeReportArgs, seed: u64, threads: Option<usize>) -> Result<(), CliError> {
    let report = volume_report(
        a.tile_mb * BYTES_PER_MIB,
        a.region_tiles,
        a.global_tiles,
        a.baseline_gb * BYTES_PER_GIB,
    )
    .map_err(CliError::validation)?;
    println!(
        "compression ratio {:.1} (baseline {:.1} GiB vs {:.1} MiB per tile-year)",
        report.compression_ratio,
        report.baseline_tile_bytes / BYTES_PER_GIB,
        report.stored_tile_bytes / BYTES_PER_MIB,
    );
    println!(
        "global: {} tiles, {:.2} TiB stored vs {:.1} TiB baseline",
        report.global_tiles,
        report.global_total_bytes / BYTES_PER_TIB,
        report.baseline_global_bytes / BYTES_PER_TIB,
    );
    let text = serde_json::to_string_pretty(&report).map_err(CliError::runtime)?;
    write_output(&a.out, (text + "\n").as_bytes())?;

    write_manifest(
        &manifest_for(&a.out),
        json!({
            "command": "volume-report",
            "seed": seed,
            "threads": threads,
            "outputs": { "report": a.out },
            "baseline_gb": a.baseline_gb,
            "tile_mb": a.tile_mb,
            "region_tiles": a.region_tiles,
            "global_tiles": a.global_tiles,
        }),
    )
}

fn denoise_test(a: DenoiseTestArgs, seed: u64, threads: Option<usize>) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&a.rate) {
        return Err(CliError::Validation(format!(
            "--rate {} outside [0, 1]",
            a.rate
        )));
    }
    let net = load_model(&a.model)?;
    let ds = load_dataset(&a.data)?;

    let corrupted: Vec<_> = ds
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let spike_seed = seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            inject_cloud_spikes(s, a.rate, spike_seed)
        })
        .collect();
    let corrupted_series: Vec<Vec<f64>> =
        corrupted.iter().map(|(s, _)| s.reflectance.clone()).collect();
    let day_lists: Vec<Vec<u16>> = corrupted.iter().map(|(_, d)| d.clone()).collect();
    let recon: Vec<Vec<f64>> = corrupted
        .par_iter()
        .map(|(s, _)| net.decode(&net.encode(s)?))
        .collect::<Result<_, ModelError>>()
        .map_err(CliError::runtime)?;

    let score = denoising_score(&ds.clean, &corrupted_series, &recon, &day_lists)
        .map_err(CliError::runtime)?;
    let total_days: usize = day_lists.iter().map(Vec::len).sum();
    log::info!("spike attenuation {score:.4} over {total_days} corrupted days");
    println!("attenuation {score:.6}");

    let body = json!({
        "rate": a.rate,
        "attenuation": score,
        "samples": ds.len(),
        "corrupted_days": total_days,
    });
    let text = serde_json::to_string_pretty(&body).map_err(CliError::runtime)?;
    write_output(&a.out, (text + "\n").as_bytes())?;

    write_manifest(
        &manifest_for(&a.out),
        json!({
            "command": "denoise-test",
            "seed": seed,
            "threads": threads,
            "inputs": { "model": a.model, "data": a.data },
            "outputs": { "report": a.out },
            "rate": a.rate,
            "attenuation": score,
        }),
    )
}
