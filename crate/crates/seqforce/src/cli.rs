//! Command-line interface: synthesize data, train, evaluate, export force
//! traces and attention maps, and gradient-check the building blocks.

use crate::checkpoint;
use crate::data::{self, RecordingSet, SynthConfig};
use crate::error::{Error, Result};
use crate::eval;
use crate::gradcheck;
use crate::model::{Model, ModelConfig, Variant};
use crate::training::{train, TrainConfig};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "seqforce",
    about = "Interaction force estimation from image sequences",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of press recordings
    Synth(SynthArgs),
    /// Train a model on the training split of a dataset
    Train(TrainArgs),
    /// Evaluate a checkpoint and print a JSON metrics report
    Eval(EvalArgs),
    /// Write the per-frame force trace of one recording as CSV
    Trace(TraceArgs),
    /// Export spatial attention maps of one recording as CSV matrices
    Attnmap(AttnmapArgs),
    /// Verify analytic gradients of every block against central differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for the generated dataset
    #[arg(long)]
    out: PathBuf,
    /// Optional TOML config file (section [synth])
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    sets: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    /// Square frame side length in pixels
    #[arg(long)]
    size: Option<usize>,
    /// Additive pixel noise amplitude
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ModelArgs {
    /// baseline | ssam | scam | se | cbam
    #[arg(long)]
    variant: Option<Variant>,
    /// Architecture scale: full | small | tiny
    #[arg(long)]
    preset: Option<String>,
    /// Frames per attention stack
    #[arg(long)]
    k: Option<usize>,
    /// Channel-attention reduction ratio
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    hidden_size: Option<usize>,
    #[arg(long)]
    fc_size: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest (manifest.csv)
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file to write
    #[arg(long)]
    out: PathBuf,
    /// CSV loss log to write
    #[arg(long)]
    log: Option<PathBuf>,
    /// Optional TOML config file (sections [model] and [train])
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train on all sets instead of the training split
    #[arg(long)]
    no_split: bool,
    /// Seed of the train/test split
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to evaluate
    #[arg(long)]
    ckpt: PathBuf,
    /// Second checkpoint; predictions of both are averaged
    #[arg(long)]
    ensemble: Option<PathBuf>,
    /// Window length (frames per prediction)
    #[arg(long, default_value_t = 20)]
    window: usize,
    /// Evaluate on: test | train | all
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Write the JSON report here instead of stdout
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    ensemble: Option<PathBuf>,
    /// Recording set name (its path in the manifest)
    #[arg(long)]
    set: String,
    #[arg(long, default_value_t = 20)]
    window: usize,
    /// Output CSV (frame,predicted_newtons,actual_newtons)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AttnmapArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    set: String,
    #[arg(long, default_value_t = 20)]
    window: usize,
    /// Output directory for attn_NNNNN.csv files
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

// ---------------------------------------------------------------------------
// TOML config file

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    model: Option<ModelSection>,
    train: Option<TrainSection>,
    synth: Option<SynthSection>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    variant: Option<String>,
    preset: Option<String>,
    k: Option<usize>,
    r: Option<usize>,
    hidden_size: Option<usize>,
    fc_size: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    epochs: Option<usize>,
    batch_size: Option<usize>,
    window: Option<usize>,
    base_lr: Option<f64>,
    lr_decay_every: Option<usize>,
    lr_decay_factor: Option<f64>,
    seed: Option<u64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SynthSection {
    sets: Option<usize>,
    frames_per_set: Option<usize>,
    image_size: Option<usize>,
    fps: Option<f64>,
    force_hz: Option<f64>,
    noise: Option<f64>,
    seed: Option<u64>,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Io(format!("reading {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn preset_config(preset: &str, variant: Variant) -> Result<ModelConfig> {
    match preset {
        "full" => Ok(ModelConfig::full(variant)),
        "small" => Ok(ModelConfig::small(variant)),
        "tiny" => Ok(ModelConfig::tiny(variant)),
        other => Err(Error::Config(format!(
            "unknown preset '{other}' (expected full, small, or tiny)"
        ))),
    }
}

fn resolve_model_config(args: &ModelArgs, file: &Option<ModelSection>) -> Result<ModelConfig> {
    let def = ModelSection::default();
    let file = file.as_ref().unwrap_or(&def);
    let variant = match (&args.variant, &file.variant) {
        (Some(v), _) => *v,
        (None, Some(s)) => s.parse()?,
        (None, None) => Variant::Baseline,
    };
    let preset = args
        .preset
        .clone()
        .or_else(|| file.preset.clone())
        .unwrap_or_else(|| "small".into());
    let mut cfg = preset_config(&preset, variant)?;
    if let Some(k) = args.k.or(file.k) {
        cfg.k = k;
    }
    if let Some(r) = args.r.or(file.r) {
        cfg.r = r;
    }
    if let Some(h) = args.hidden_size.or(file.hidden_size) {
        cfg.hidden_size = h;
    }
    if let Some(f) = args.fc_size.or(file.fc_size) {
        cfg.fc_size = f;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_train_config(args: &TrainArgs, file: &Option<TrainSection>) -> Result<TrainConfig> {
    let def = TrainSection::default();
    let file = file.as_ref().unwrap_or(&def);
    let base = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: args.epochs.or(file.epochs).unwrap_or(base.epochs),
        batch_size: args.batch_size.or(file.batch_size).unwrap_or(base.batch_size),
        window: args.window.or(file.window).unwrap_or(base.window),
        base_lr: args.lr.or(file.base_lr).unwrap_or(base.base_lr),
        lr_decay_every: file.lr_decay_every.unwrap_or(base.lr_decay_every),
        lr_decay_factor: file.lr_decay_factor.unwrap_or(base.lr_decay_factor),
        seed: args.seed.or(file.seed).unwrap_or(base.seed),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_synth_config(args: &SynthArgs, file: &Option<SynthSection>) -> SynthConfig {
    let def = SynthSection::default();
    let file = file.as_ref().unwrap_or(&def);
    let base = SynthConfig::default();
    SynthConfig {
        sets: args.sets.or(file.sets).unwrap_or(base.sets),
        frames_per_set: args.frames.or(file.frames_per_set).unwrap_or(base.frames_per_set),
        image_size: args.size.or(file.image_size).unwrap_or(base.image_size),
        fps: file.fps.unwrap_or(base.fps),
        force_hz: file.force_hz.unwrap_or(base.force_hz),
        noise: args.noise.or(file.noise).unwrap_or(base.noise),
        seed: args.seed.or(file.seed).unwrap_or(base.seed),
    }
}

// ---------------------------------------------------------------------------
// Verbs

fn load_split(
    manifest: &Path,
    input_size: usize,
    split: &str,
    split_seed: u64,
) -> Result<Vec<RecordingSet>> {
    let sets = data::load_dataset(manifest, input_size)?;
    if split == "all" {
        return Ok(sets);
    }
    let conditions: Vec<_> = sets.iter().map(|s| s.condition).collect();
    let (train_idx, test_idx) = data::split_indices(&conditions, split_seed);
    let keep = match split {
        "train" => train_idx,
        "test" => test_idx,
        other => {
            return Err(Error::Config(format!(
                "unknown split '{other}' (expected train, test, or all)"
            )))
        }
    };
    let mut sets: Vec<Option<RecordingSet>> = sets.into_iter().map(Some).collect();
    Ok(keep.into_iter().map(|i| sets[i].take().unwrap()).collect())
}

fn find_set(sets: Vec<RecordingSet>, name: &str) -> Result<RecordingSet> {
    let names: Vec<String> = sets.iter().map(|s| s.name.clone()).collect();
    sets.into_iter().find(|s| s.name == name).ok_or_else(|| {
        Error::Contract(format!(
            "no recording set named '{name}' (have: {})",
            names.join(", ")
        ))
    })
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let file = load_file_config(args.config.as_deref())?;
    let cfg = resolve_synth_config(&args, &file.synth);
    let manifest = data::synth_generate(&cfg, &args.out)?;
    println!(
        "wrote {} sets of {} frames ({}x{} px) under {}",
        cfg.sets,
        cfg.frames_per_set,
        cfg.image_size,
        cfg.image_size,
        manifest.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let file = load_file_config(args.config.as_deref())?;
    let model_cfg = resolve_model_config(&args.model, &file.model)?;
    let train_cfg = resolve_train_config(&args, &file.train)?;
    let split = if args.no_split { "all" } else { "train" };
    let sets = load_split(&args.data, model_cfg.backbone.input_size, split, args.split_seed)?;
    let mut model = Model::init(&model_cfg, train_cfg.seed)?;
    let report = match &args.log {
        Some(p) => {
            let mut log = std::io::BufWriter::new(
                std::fs::File::create(p)
                    .map_err(|e| Error::Io(format!("creating {}: {e}", p.display())))?,
            );
            train(&mut model, &sets, &train_cfg, &mut log)?
        }
        None => train(&mut model, &sets, &train_cfg, &mut std::io::sink())?,
    };
    checkpoint::save(&args.out, &model.config, &model.params)?;
    println!(
        "trained {} for {} epochs on {} sets, final loss {:.6}; checkpoint: {}",
        model.config.variant,
        report.epochs_run,
        sets.len(),
        report.final_loss,
        args.out.display()
    );
    Ok(())
}

fn load_pair(args_ckpt: &Path, ensemble: &Option<PathBuf>) -> Result<(Model, Option<Model>)> {
    let model = checkpoint::load_model(args_ckpt)?;
    let second = match ensemble {
        Some(p) => {
            let m = checkpoint::load_model(p)?;
            if m.config.backbone.input_size != model.config.backbone.input_size {
                return Err(Error::Contract(
                    "ensemble checkpoints must share the input size".into(),
                ));
            }
            Some(m)
        }
        None => None,
    };
    Ok((model, second))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (model, second) = load_pair(&args.ckpt, &args.ensemble)?;
    let sets = load_split(
        &args.data,
        model.config.backbone.input_size,
        &args.split,
        args.split_seed,
    )?;
    if sets.is_empty() {
        return Err(Error::Contract(format!("split '{}' holds no sets", args.split)));
    }
    let report = match &second {
        None => eval::evaluate(&model, &sets, args.window)?,
        Some(m2) => {
            let mut pred_n = Vec::new();
            let mut gt_n = Vec::new();
            for set in &sets {
                let trace = eval::predict_trace_ensemble(&model, m2, set, args.window)?;
                pred_n.extend(trace.iter().map(|&p| data::denormalize_force(p)));
                gt_n.extend_from_slice(&set.forces);
            }
            let name = format!("{}+{}", model.config.variant, m2.config.variant);
            eval::report(name, sets.len(), &pred_n, &gt_n)?
        }
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Io(format!("encoding report: {e}")))?;
    match &args.json {
        Some(p) => std::fs::write(p, &json)
            .map_err(|e| Error::Io(format!("writing {}: {e}", p.display())))?,
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_trace(args: TraceArgs) -> Result<()> {
    let (model, second) = load_pair(&args.ckpt, &args.ensemble)?;
    let sets = load_split(&args.data, model.config.backbone.input_size, "all", 0)?;
    let set = find_set(sets, &args.set)?;
    let trace = match &second {
        None => eval::predict_trace(&model, &set, args.window)?,
        Some(m2) => eval::predict_trace_ensemble(&model, m2, &set, args.window)?,
    };
    let mut text = String::from("frame,predicted_newtons,actual_newtons\n");
    for (i, p) in trace.iter().enumerate() {
        text.push_str(&format!(
            "{i},{:.6},{:.6}\n",
            data::denormalize_force(*p),
            set.forces[i]
        ));
    }
    std::fs::write(&args.out, text)
        .map_err(|e| Error::Io(format!("writing {}: {e}", args.out.display())))?;
    println!("wrote {} predictions to {}", trace.len(), args.out.display());
    Ok(())
}

fn cmd_attnmap(args: AttnmapArgs) -> Result<()> {
    let model = checkpoint::load_model(&args.ckpt)?;
    let sets = load_split(&args.data, model.config.backbone.input_size, "all", 0)?;
    let set = find_set(sets, &args.set)?;
    let n = eval::export_attention_maps(&model, &set, args.window, &args.out)?;
    println!("wrote {n} attention maps to {}", args.out.display());
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let reports = gradcheck::run_all(args.seed)?;
    println!("{:<14} {:>8} {:>14}  result", "block", "scalars", "max rel err");
    for r in &reports {
        println!(
            "{:<14} {:>8} {:>14.3e}  {}",
            r.name,
            r.scalar_count,
            r.max_rel_err,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    if gradcheck::all_passed(&reports) {
        println!("all {} blocks passed", reports.len());
        Ok(())
    } else {
        Err(Error::Numerical(
            "gradient check failed for at least one block".into(),
        ))
    }
}

/// Entry point used by the binary; returns the process exit code.
pub fn cli_main() -> i32 {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Trace(args) => cmd_trace(args),
        Command::Attnmap(args) => cmd_attnmap(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
