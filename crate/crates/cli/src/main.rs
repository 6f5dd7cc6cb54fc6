//! `msvlad` command-line driver.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use msvlad_core::gradcheck::{self, GradCheckDims};
use msvlad_core::io::load_manifest;
use msvlad_core::netvlad::kmeans::DEFAULT_MAX_ITERS;
use msvlad_core::netvlad::{calibrate_alpha, kmeans, sample_columns};
use msvlad_core::retrieval::DescriptorIndex;
use msvlad_core::trainer::IterationLog;
use msvlad_core::{
    build_index, describe_image, evaluate, query_index, Checkpoint, DatasetManifest, FeatureMap,
    PoolingMode, TrainConfig, Trainer, TrainingSet, VladParams,
};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "msvlad",
    version,
    about = "Multi-scale pooled NetVLAD descriptors"
)]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Shared {
    /// Dataset manifest (JSON lines).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Pooling mode: 2x2, 3x3 or both.
    #[arg(long, global = true)]
    pooling: Option<PoolingMode>,
    /// Comma-separated input resolutions.
    #[arg(long, global = true, value_delimiter = ',')]
    resolutions: Option<Vec<u32>>,
    /// Signed square-root normalization of retrieval descriptors.
    #[arg(
        long,
        global = true,
        num_args = 0..=1,
        default_missing_value = "true",
        value_name = "BOOL"
    )]
    power_norm: Option<bool>,
}

#[derive(Subcommand)]
enum Command {
    /// Initialize NetVLAD parameters by k-means on training columns.
    KmeansInit {
        /// Number of clusters.
        #[arg(long, short = 'k', default_value_t = 64)]
        clusters: usize,
        /// Column features sampled for clustering.
        #[arg(long, default_value_t = 50_000)]
        sample_size: usize,
        /// Lloyd iteration cap.
        #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
        max_iters: usize,
        /// Triplet margin recorded in the checkpoint.
        #[arg(long, default_value_t = 0.1)]
        margin: f64,
    },
    /// Train from a checkpoint; streams a CSV log.
    Train {
        /// TOML training configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output checkpoint directory; defaults to --checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Total iteration count, overriding the configuration.
        #[arg(long)]
        iterations: Option<u64>,
        /// Write the CSV log here and a JSON summary to stdout.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Build the gallery index and report mAP over the query split.
    Evaluate {
        /// Also save the gallery index to this directory.
        #[arg(long)]
        save_index: Option<PathBuf>,
    },
    /// Rank the gallery for query feature files.
    Query {
        /// Saved gallery index; built from --manifest when absent.
        #[arg(long)]
        index: Option<PathBuf>,
        /// Number of results per query; all when absent.
        #[arg(long)]
        top_k: Option<usize>,
        /// Query feature maps (.msvf).
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        columns: usize,
        #[arg(long, default_value_t = 5)]
        dim: usize,
        #[arg(long, default_value_t = 3)]
        clusters: usize,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Multiplies the analytic weight gradient, as a negative control.
        #[arg(long, hide = true, default_value_t = 1.0)]
        inject_bug: f64,
    },
}

/// Bad flags or inputs; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_status(&err))
        }
    }
}

fn exit_status(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<msvlad_core::Error>() {
            return if e.is_validation() { 2 } else { 1 };
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn run(cli: Cli) -> Result<ExitCode> {
    let shared = cli.shared;
    if let Some(threads) = shared.threads {
        if threads == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    if let Some(resolutions) = &shared.resolutions {
        if resolutions.is_empty() {
            return Err(usage("--resolutions needs at least one value"));
        }
    }
    match cli.command {
        Command::KmeansInit {
            clusters,
            sample_size,
            max_iters,
            margin,
        } => kmeans_init(&shared, clusters, sample_size, max_iters, margin),
        Command::Train {
            config,
            out,
            iterations,
            log,
        } => train(&shared, config.as_deref(), out, iterations, log.as_deref()),
        Command::Evaluate { save_index } => cmd_evaluate(&shared, save_index.as_deref()),
        Command::Query {
            index,
            top_k,
            files,
        } => query(&shared, index.as_deref(), top_k, &files),
        Command::Gradcheck {
            columns,
            dim,
            clusters,
            instances,
            inject_bug,
        } => grad_check(
            &shared,
            GradCheckDims {
                columns,
                dim,
                clusters,
                instances,
            },
            inject_bug,
        ),
    }
}

fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| usage(format!("{flag} is required")))
}

fn manifest(shared: &Shared) -> Result<DatasetManifest> {
    let path = require(&shared.manifest, "--manifest")?;
    Ok(load_manifest(path)?)
}

fn load_checkpoint(shared: &Shared) -> Result<Checkpoint> {
    let path = require(&shared.checkpoint, "--checkpoint")?;
    if !path.join("meta.json").is_file() {
        return Err(usage(format!("no checkpoint at {}", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

/// A single training resolution, from --resolutions or the manifest.
fn single_resolution(
    shared: &Shared,
    manifest: &DatasetManifest,
    fallback: Option<u32>,
) -> Result<u32> {
    match shared.resolutions.as_deref() {
        Some([r]) => Ok(*r),
        Some(_) => Err(usage("this command takes a single --resolutions value")),
        None => match (fallback, manifest.resolutions().as_slice()) {
            (Some(r), _) => Ok(r),
            (None, [r]) => Ok(*r),
            (None, _) => Err(usage(
                "manifest has several resolutions; pass --resolutions",
            )),
        },
    }
}

fn kmeans_init(
    shared: &Shared,
    clusters: usize,
    sample_size: usize,
    max_iters: usize,
    margin: f64,
) -> Result<ExitCode> {
    let out = require(&shared.checkpoint, "--checkpoint")?.to_path_buf();
    if clusters < 2 {
        return Err(usage("--clusters must be at least 2"));
    }
    if sample_size == 0 {
        return Err(usage("--sample-size must be positive"));
    }
    let manifest = manifest(shared)?;
    let pooling = shared.pooling.unwrap_or_default();
    let seed = shared.seed.unwrap_or(0);
    let resolution = single_resolution(shared, &manifest, None)?;
    let data = TrainingSet::from_manifest(&manifest, resolution, pooling)?;
    let samples = sample_columns(&data.columns, sample_size, seed)?;
    info!(
        "clustering {} columns of dimension {} into {clusters}",
        samples.count(),
        samples.dim()
    );
    let result = kmeans(&samples, clusters, seed, max_iters)?;
    let alpha = calibrate_alpha(&samples, &result.centers);
    let params = VladParams::from_centers(clusters, samples.dim(), result.centers, alpha);
    Checkpoint::initial(params, pooling, margin, seed, Some(alpha)).save(&out)?;
    print_json(&json!({
        "checkpoint": out,
        "clusters": clusters,
        "dim": samples.dim(),
        "samples": samples.count(),
        "alpha": alpha,
        "sse": result.sse,
        "iterations": result.iterations,
    }))?;
    Ok(ExitCode::SUCCESS)
}

fn train(
    shared: &Shared,
    config_path: Option<&Path>,
    out: Option<PathBuf>,
    iterations: Option<u64>,
    log_path: Option<&Path>,
) -> Result<ExitCode> {
    let mut config = match config_path {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
            toml::from_str::<TrainConfig>(&text)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = shared.seed {
        config.seed = seed;
    }
    if let Some(pooling) = shared.pooling {
        config.pooling = pooling;
    }
    if let Some(n) = iterations {
        config.iterations = n;
    }
    let checkpoint = load_checkpoint(shared)?;
    let out = out.unwrap_or_else(|| {
        shared
            .checkpoint
            .clone()
            .expect("checked by load_checkpoint")
    });
    config.validate()?;
    let manifest = manifest(shared)?;
    config.resolution = single_resolution(shared, &manifest, Some(config.resolution))?;
    let data = TrainingSet::from_manifest(&manifest, config.resolution, config.pooling)?;
    info!(
        "training on {} images at resolution {}",
        data.len(),
        config.resolution
    );

    let mut trainer = if checkpoint.meta.progress.is_some() {
        Trainer::resume(&data, config, checkpoint)?
    } else {
        Trainer::new(&data, config, checkpoint.params)?
    };

    let mut sink: Box<dyn Write> = match log_path {
        Some(path) => Box::new(BufWriter::new(
            File::create(path).with_context(|| format!("creating {}", path.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    };
    writeln!(sink, "{}", IterationLog::CSV_HEADER)?;
    let start = trainer.iteration();
    let mut last_loss = None;
    let mut write_err = None;
    trainer.run(
        |log| {
            last_loss = Some(log.loss);
            if let Err(e) = writeln!(sink, "{}", log.csv_line()) {
                write_err.get_or_insert(e);
            }
        },
        |ckpt| ckpt.save(&out),
    )?;
    if let Some(e) = write_err {
        return Err(e).context("writing the training log");
    }
    sink.flush()?;
    drop(sink);
    info!(
        "finished at iteration {} after {} mining rounds",
        trainer.iteration(),
        trainer.mining_rounds()
    );
    if log_path.is_some() {
        print_json(&json!({
            "checkpoint": out,
            "start_iteration": start,
            "iteration": trainer.iteration(),
            "mining_rounds": trainer.mining_rounds(),
            "final_loss": last_loss,
        }))?;
    }
    Ok(ExitCode::SUCCESS)
}

struct Retrieval {
    params: VladParams,
    pooling: PoolingMode,
    power_norm: bool,
}

fn retrieval_setup(shared: &Shared) -> Result<Retrieval> {
    let checkpoint = load_checkpoint(shared)?;
    Ok(Retrieval {
        pooling: shared.pooling.unwrap_or(checkpoint.meta.pooling),
        params: checkpoint.params,
        power_norm: shared.power_norm.unwrap_or(true),
    })
}

fn index_resolutions(shared: &Shared, manifest: &DatasetManifest) -> Vec<u32> {
    shared
        .resolutions
        .clone()
        .unwrap_or_else(|| manifest.resolutions())
}

fn cmd_evaluate(shared: &Shared, save_index: Option<&Path>) -> Result<ExitCode> {
    let setup = retrieval_setup(shared)?;
    let manifest = manifest(shared)?;
    let resolutions = index_resolutions(shared, &manifest);
    let index = build_index(
        &manifest,
        &setup.params,
        setup.pooling,
        &resolutions,
        setup.power_norm,
    )?;
    if let Some(dir) = save_index {
        index.save(dir)?;
    }
    let report = evaluate(
        &manifest,
        &index,
        &setup.params,
        setup.pooling,
        &resolutions,
        setup.power_norm,
    )?;
    info!(
        "mAP {:.4} over {} queries",
        report.map,
        report.query_count()
    );
    print_json(&json!({
        "map": report.map,
        "queries": report.query_count(),
        "pooling": setup.pooling.to_string(),
        "resolutions": resolutions,
        "power_norm": setup.power_norm,
        "per_query": report.per_query,
    }))?;
    Ok(ExitCode::SUCCESS)
}

fn query(
    shared: &Shared,
    index_dir: Option<&Path>,
    top_k: Option<usize>,
    files: &[PathBuf],
) -> Result<ExitCode> {
    let setup = retrieval_setup(shared)?;
    let maps = files
        .iter()
        .map(|path| {
            FeatureMap::load(path).with_context(|| format!("reading query {}", path.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let index = match index_dir {
        Some(dir) => DescriptorIndex::load(dir)?,
        None => {
            let manifest = manifest(shared)?;
            let resolutions = index_resolutions(shared, &manifest);
            build_index(
                &manifest,
                &setup.params,
                setup.pooling,
                &resolutions,
                setup.power_norm,
            )?
        }
    };
    if index.dim() != setup.params.descriptor_len() {
        bail!(usage(format!(
            "index has dimension {}, checkpoint produces {}",
            index.dim(),
            setup.params.descriptor_len()
        )));
    }
    let mut results = Vec::with_capacity(files.len());
    for (path, map) in files.iter().zip(maps) {
        let descriptor = describe_image(
            std::slice::from_ref(&map),
            setup.pooling,
            &setup.params,
            setup.power_norm,
        )
        .with_context(|| format!("describing {}", path.display()))?;
        let ranking: Vec<_> = query_index(&index, &descriptor, top_k)?
            .into_iter()
            .map(|(id, score)| json!({"id": id, "score": score}))
            .collect();
        results.push(json!({"query": path, "ranking": ranking}));
    }
    print_json(&json!({ "results": results }))?;
    Ok(ExitCode::SUCCESS)
}

fn grad_check(shared: &Shared, dims: GradCheckDims, inject_bug: f64) -> Result<ExitCode> {
    if dims.columns == 0 || dims.dim == 0 || dims.clusters < 2 || dims.instances == 0 {
        return Err(usage(
            "gradcheck needs positive sizes and at least 2 clusters",
        ));
    }
    let report = gradcheck::run_all(shared.seed.unwrap_or(0), dims, inject_bug)?;
    eprint!("{}", report.table());
    print_json(&serde_json::to_value(&report)?)?;
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
