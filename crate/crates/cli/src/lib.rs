//! `crn` command implementations.

pub mod config;

use std::fmt::Display;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use crn_core::cascade::CascadeConfig;
use crn_core::checkpoint::{AnyModel, ModelConfig};
use crn_core::layout::{save_label_map, save_rgb_png};
use crn_core::perceiver::convert_torchvision_vgg19;
use crn_core::toy::toy_dataset;
use crn_core::trainer::{memorization_report, synthesize, train, KSelect, LossKind};
use crn_study::server::{serve_study, StudyState};
use crn_study::store::read_responses;
use crn_study::{aggregate, make_batch, render_table, ConditionSet, ResponseStore, StudyBatch};

use config::{read_json, resolve, LoadedMapping, MappingConfig, RunConfig, StudyConfig};

/// A failed command. Usage failures (bad config, missing or corrupt inputs)
/// exit with 2, everything else with 1.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn usage(e: impl Display) -> Self {
        Failure {
            code: 2,
            message: e.to_string(),
        }
    }

    pub fn runtime(e: impl Display) -> Self {
        Failure {
            code: 1,
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "crn", version, about = "Semantic layout to image synthesis with cascaded refinement networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a dataset manifest
    Train(TrainArgs),
    /// Synthesize images for label maps with a trained checkpoint
    Synth(SynthArgs),
    /// Build, serve and report pairwise realism studies
    #[command(subcommand)]
    Study(StudyCommand),
    /// Perceiver weight utilities
    #[command(subcommand)]
    Perceiver(PerceiverCommand),
    /// Print the parameter count of a model config
    Params(ParamsArgs),
    /// Dataset preparation
    #[command(subcommand)]
    Data(DataCommand),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run config (JSON with model, perceiver, dataset and train sections)
    #[arg(long)]
    pub config: PathBuf,
    /// Seed for initialization and data order; overrides train.seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Loss: eq1 (feature matching), eq2 (best of k), eq3 (best of k per class), eq4 (pixel L1)
    #[arg(long)]
    pub loss: Option<LossKind>,
    /// Number of output images; overrides both the model and train.k
    #[arg(long)]
    pub k: Option<usize>,
    /// Output directory for logs and checkpoints
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Checkpoint directory
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Label map PNGs, or directories of them
    #[arg(long, num_args = 1.., required = true)]
    pub layouts: Vec<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Write all k outputs, or only the one closest to a reference
    #[arg(long, default_value = "all")]
    pub select: KSelect,
    /// Reference images, one per layout, for --select best
    #[arg(long, num_args = 1..)]
    pub references: Vec<PathBuf>,
    /// Label id handling: identity, cityscapes, or a path to a JSON remap table
    #[arg(long, default_value = "identity")]
    pub labels: String,
}

#[derive(Debug, Subcommand)]
pub enum StudyCommand {
    /// Build a randomized trial batch
    Make {
        /// Study config (conditions manifest, layouts, pairs, sentinels, timing)
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Batch file to write
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve a batch over HTTP, appending responses to a log
    Serve {
        #[arg(long)]
        batch: PathBuf,
        /// Response log (JSONL), created if missing
        #[arg(long)]
        responses: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        /// Sentinel failures that exclude a session
        #[arg(long, default_value_t = 2)]
        threshold: u64,
    },
    /// Print preference rates for a response log
    Report {
        #[arg(long)]
        batch: PathBuf,
        #[arg(long)]
        responses: PathBuf,
        /// Sentinel failures that exclude a session
        #[arg(long, default_value_t = 2)]
        threshold: u64,
        /// Print the full result as JSON instead of a table
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum PerceiverCommand {
    /// Convert torchvision VGG-19 weights (safetensors) into a weight archive
    Convert {
        #[arg(long)]
        safetensors: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// Model config or run config
    #[arg(long, conflicts_with = "full_scale")]
    pub config: Option<PathBuf>,
    /// Use the nine-module 1024x2048 cascade
    #[arg(long)]
    pub full_scale: bool,
    /// Number of semantic classes for --full-scale
    #[arg(long, default_value_t = 20)]
    pub classes: usize,
    /// Number of output images for --full-scale
    #[arg(long, default_value_t = 1)]
    pub k: usize,
}

#[derive(Debug, Subcommand)]
pub enum DataCommand {
    /// Write a seeded synthetic dataset of label maps, images and a manifest
    Toy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Synth(args) => cmd_synth(&args),
        Command::Study(cmd) => cmd_study(cmd),
        Command::Perceiver(PerceiverCommand::Convert { safetensors, out }) => {
            let p = convert_torchvision_vgg19(&safetensors, &out).map_err(Failure::usage)?;
            println!("wrote {} ({} tensors) to {}", p.spec().tap_names().join(","), p.params().len(), out.display());
            Ok(())
        }
        Command::Params(args) => cmd_params(&args),
        Command::Data(DataCommand::Toy {
            out,
            count,
            height,
            width,
            classes,
            seed,
        }) => cmd_toy(&out, count, height, width, classes, seed),
    }
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Loads a run config and applies command-line overrides.
pub fn load_run_config(args: &TrainArgs) -> Result<RunConfig, Failure> {
    let mut cfg: RunConfig = read_json(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(loss) = args.loss {
        cfg.train.loss = loss;
    }
    if let Some(k) = args.k {
        cfg.train.k = k;
        cfg.model.set_output_multiplicity(k);
    }
    cfg.model.param_count().map_err(|e| Failure::usage(format!("model: {e}")))?;
    cfg.train.validate().map_err(|e| Failure::usage(format!("train: {e}")))?;
    Ok(cfg)
}

fn cmd_train(args: &TrainArgs) -> Result<(), Failure> {
    let cfg = load_run_config(args)?;
    let base = base_dir(&args.config);
    let perceiver = cfg.load_perceiver(&base)?;
    let dataset = cfg.load_dataset(&base)?;
    let mut model = AnyModel::build(&cfg.model, cfg.train.seed).map_err(Failure::usage)?;
    fs::create_dir_all(&args.out).map_err(|e| Failure::usage(format!("{}: {e}", args.out.display())))?;
    let resolved = serde_json::to_string_pretty(&cfg).expect("config serializes");
    fs::write(args.out.join("config.json"), resolved + "\n").map_err(Failure::runtime)?;
    let outcome = train(&mut model, &perceiver, &dataset, &cfg.train, Some(&args.out)).map_err(|e| match e {
        crn_core::error::CrnError::Dimension(_) | crn_core::error::CrnError::Argument(_) => Failure::usage(e),
        other => Failure::runtime(other),
    })?;
    let report = memorization_report(&model, &dataset).map_err(Failure::runtime)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(args.out.join("memorization.json"), text + "\n").map_err(Failure::runtime)?;
    let first = outcome.records.first().map(|r| r.total).unwrap_or(f64::NAN);
    let last = outcome.records.last().map(|r| r.total).unwrap_or(f64::NAN);
    println!(
        "{} steps, loss {first:.6} -> {last:.6}, pixel L1 {:.4} (mean-image baseline {:.4}); checkpoint {}",
        outcome.state.step,
        report.mean_l1,
        report.mean_baseline,
        outcome
            .final_checkpoint
            .as_deref()
            .map(|p| p.display().to_string())
            .unwrap_or_default()
    );
    Ok(())
}

fn label_mapping_arg(arg: &str) -> Result<LoadedMapping, Failure> {
    let cfg = match arg {
        "identity" => MappingConfig::Identity,
        "cityscapes" => MappingConfig::Cityscapes,
        path => MappingConfig::Table(PathBuf::from(path)),
    };
    LoadedMapping::load(&cfg, false, Path::new(""))
}

/// Files given directly, plus the sorted PNGs of any directories.
fn expand_layouts(paths: &[PathBuf]) -> Result<Vec<PathBuf>, Failure> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "png"))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(Failure::usage("no layout files found"));
    }
    Ok(out)
}

fn cmd_synth(args: &SynthArgs) -> Result<(), Failure> {
    let (model, _) = AnyModel::load_checkpoint(&args.checkpoint)
        .map_err(|e| Failure::usage(format!("checkpoint {}: {e}", args.checkpoint.display())))?;
    let layouts = expand_layouts(&args.layouts)?;
    let mapping = label_mapping_arg(&args.labels)?;
    let references = (!args.references.is_empty()).then_some(args.references.as_slice());
    let written = synthesize(&model, &layouts, mapping.as_mapping(), &args.out, args.select, references)
        .map_err(Failure::usage)?;
    for w in &written {
        println!("{}", w.display());
    }
    Ok(())
}

fn cmd_study(cmd: StudyCommand) -> Result<(), Failure> {
    match cmd {
        StudyCommand::Make { config, seed, out } => {
            let cfg: StudyConfig = read_json(&config)?;
            let set = ConditionSet::load(&resolve(&base_dir(&config), &cfg.conditions)).map_err(Failure::usage)?;
            let layouts = match cfg.layouts {
                Some(l) => l,
                None => set.common_layout_ids().map_err(Failure::usage)?,
            };
            let batch = make_batch(
                &set,
                cfg.pairs.as_deref(),
                &layouts,
                cfg.sentinels.as_ref(),
                cfg.timing,
                seed,
            )
            .map_err(Failure::usage)?;
            batch.save(&out).map_err(Failure::runtime)?;
            println!("{} trials, fingerprint {}", batch.trials.len(), batch.fingerprint());
            Ok(())
        }
        StudyCommand::Serve {
            batch,
            responses,
            bind,
            threshold,
        } => {
            let batch = StudyBatch::load(&batch).map_err(Failure::usage)?;
            let store = ResponseStore::open(&responses).map_err(Failure::usage)?;
            let state = Arc::new(StudyState {
                batch,
                store,
                exclusion_threshold: threshold,
            });
            let runtime = tokio::runtime::Runtime::new().map_err(Failure::runtime)?;
            runtime
                .block_on(serve_study(state, bind, |addr| println!("serving on http://{addr}")))
                .map_err(Failure::runtime)
        }
        StudyCommand::Report {
            batch,
            responses,
            threshold,
            json,
        } => {
            let batch = StudyBatch::load(&batch).map_err(Failure::usage)?;
            let responses = read_responses(&responses).map_err(Failure::usage)?;
            let result = aggregate(&batch, &responses, threshold).map_err(Failure::usage)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&result).expect("result serializes"));
            } else {
                print!("{}", render_table(&result));
            }
            Ok(())
        }
    }
}

fn cmd_params(args: &ParamsArgs) -> Result<(), Failure> {
    let model = match &args.config {
        Some(path) => {
            let value: serde_json::Value = read_json(path)?;
            let model = if value.get("model").is_some() {
                serde_json::from_value::<RunConfig>(value).map(|r| r.model)
            } else {
                serde_json::from_value::<ModelConfig>(value)
            };
            model.map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?
        }
        None if args.full_scale => ModelConfig::Crn(CascadeConfig::full_scale(args.classes, args.k)),
        None => return Err(Failure::usage("pass --config or --full-scale")),
    };
    let n = model.param_count().map_err(Failure::usage)?;
    println!("{n}");
    Ok(())
}

fn cmd_toy(out: &Path, count: usize, height: usize, width: usize, classes: usize, seed: u64) -> Result<(), Failure> {
    let ds = toy_dataset(count, height, width, classes, seed).map_err(Failure::usage)?;
    let io = |e: crn_core::error::CrnError| Failure::runtime(e);
    fs::create_dir_all(out.join("labels")).map_err(Failure::runtime)?;
    fs::create_dir_all(out.join("images")).map_err(Failure::runtime)?;
    let mut manifest = String::new();
    for p in ds.pairs() {
        save_label_map(&p.labels, &out.join("labels").join(format!("{}.png", p.name))).map_err(io)?;
        save_rgb_png(p.image.tensor(), &out.join("images").join(format!("{}.png", p.name))).map_err(io)?;
        manifest.push_str(&format!(
            "{{\"layout\":\"labels/{0}.png\",\"image\":\"images/{0}.png\"}}\n",
            p.name
        ));
    }
    fs::write(out.join("train.jsonl"), manifest).map_err(Failure::runtime)?;
    println!("{} pairs in {}", ds.len(), out.display());
    Ok(())
}
