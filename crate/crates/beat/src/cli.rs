//! Subcommands of the `beat` binary.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use beat_core::ablation::{run_ablation, AblationMatrix};
use beat_core::config::TrainConfig;
use beat_core::data::{generate_synthetic, PairDataset, SyntheticSpec};
use beat_core::eval::evaluate_dataset;
use beat_core::export::{global_embeddings, heatmap};
use beat_core::model::Model;
use beat_core::train::{StepRecord, Trainer};
use beat_core::BeatError;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::dataset::{load_dataset, save_dataset, ImageStorage};
use crate::error::{CliError, CliResult};
use crate::manifest::{unix_now, RunManifest, RunRecord};
use crate::report::{self, ReportRow};
use crate::settings::load_config;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.csv";
pub const REPORT_TABLE: &str = "report.txt";
pub const REPORT_CSV: &str = "report.csv";
pub const HEATMAP_FILE: &str = "heatmap.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const DIVERGENCE_FILE: &str = "divergence.json";
pub const DIVERGENCE_CHECKPOINT: &str = "divergence.bin";

#[derive(Debug, Parser)]
#[command(name = "beat", version, about = "Text-to-image person retrieval with bi-directional one-to-many embedding")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config value, e.g. `--set m=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        identities: usize,
        #[arg(long, default_value_t = 4)]
        images_per_id: usize,
        #[arg(long, default_value_t = 4)]
        texts_per_id: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        /// Store pixels inside the record file instead of PNG files.
        #[arg(long)]
        inline: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train a model and write a checkpoint with its loss history.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint until `epochs` epochs are done.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Text-to-image recall of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate one model per row of an experiment matrix.
    Ablate {
        /// spaces, losses, granularities or m_sweep.
        matrix: String,
        #[arg(long)]
        data: PathBuf,
        /// Held-out evaluation set; defaults to the training set.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Cosine grid between a text and every cell of an image's feature map.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Image sample id.
        #[arg(long)]
        image: usize,
        /// Text sample id.
        #[arg(long)]
        text: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Global features of every sample, for external plotting.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Heatmap { .. } => "heatmap",
            Command::ExportEmbeddings { .. } => "export-embeddings",
        }
    }
}

fn config_of(args: &ConfigArgs) -> CliResult<TrainConfig> {
    load_config(args.config.as_deref(), &args.overrides)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

/// Loads a dataset against a checkpoint's vocabulary and text length.
fn dataset_for(ckpt: &Checkpoint, path: &Path) -> CliResult<PairDataset> {
    load_dataset(path, ckpt.model.config.max_len, Some(&ckpt.vocab))
}

/// What a command leaves behind for the manifest.
struct Outcome {
    config: TrainConfig,
    artifacts: Vec<String>,
}

pub fn run(cli: Cli, args: Vec<String>) -> CliResult<()> {
    let started = unix_now();
    let name = cli.command.name();
    let (out, outcome) = match cli.command {
        Command::Synth { out, identities, images_per_id, texts_per_id, noise, inline, config } => {
            let cfg = config_of(&config)?;
            let o = synth(&out, &cfg, identities, images_per_id, texts_per_id, noise, inline)?;
            (out, o)
        }
        Command::Train { data, out, resume, config } => {
            let o = train(&data, &out, resume.as_deref(), &config)?;
            (out, o)
        }
        Command::Eval { checkpoint, data, out } => {
            let o = eval(&checkpoint, &data, &out)?;
            (out, o)
        }
        Command::Ablate { matrix, data, eval_data, out, config } => {
            let cfg = config_of(&config)?;
            let o = ablate(&matrix, &data, eval_data.as_deref(), &out, cfg)?;
            (out, o)
        }
        Command::Heatmap { checkpoint, data, image, text, out } => {
            let o = heatmap_cmd(&checkpoint, &data, image, text, &out)?;
            (out, o)
        }
        Command::ExportEmbeddings { checkpoint, data, out } => {
            let o = export(&checkpoint, &data, &out)?;
            (out, o)
        }
    };
    let mut record = RunRecord::new(name, args, &outcome.config, started);
    record.finished_unix = unix_now();
    record.artifacts = outcome.artifacts;
    RunManifest::append(&out, record)
}

fn synth(
    out: &Path,
    cfg: &TrainConfig,
    identities: usize,
    images_per_id: usize,
    texts_per_id: usize,
    noise: f64,
    inline: bool,
) -> CliResult<Outcome> {
    let spec = SyntheticSpec {
        image_height: cfg.image_height,
        image_width: cfg.image_width,
        max_len: cfg.max_len,
        ..SyntheticSpec::new(identities, images_per_id, texts_per_id, noise, cfg.seed)
    };
    let ds = generate_synthetic(&spec)?;
    create_dir(out)?;
    let storage = if inline { ImageStorage::Inline } else { ImageStorage::Png };
    save_dataset(&ds, out, storage)?;
    let mut artifacts = vec![crate::dataset::DATASET_FILE.to_string(), crate::dataset::VOCAB_FILE.to_string()];
    if !inline {
        artifacts.push("images/".to_string());
    }
    println!(
        "wrote {} pairs ({} images, {} texts, {} identities) to {}",
        ds.pairs.len(),
        ds.images.len(),
        ds.texts.len(),
        ds.num_identities,
        out.display()
    );
    Ok(Outcome { config: cfg.clone(), artifacts })
}

/// Losses are summed over the batch for optimization and logged per sample.
fn history_line(r: &StepRecord, batch: usize) -> String {
    let b = batch as f64;
    format!("{},{},{},{},{}\n", r.step, r.id / b, r.cr / b, r.total / b, r.lr)
}

#[derive(Serialize)]
struct DivergenceDump<'a> {
    step: u64,
    epoch: usize,
    detail: &'a str,
    config: &'a TrainConfig,
    recent: &'a [StepRecord],
    epoch_start_checkpoint: &'a str,
}

fn train(data: &Path, out: &Path, resume: Option<&Path>, args: &ConfigArgs) -> CliResult<Outcome> {
    let (ds, mut trainer) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if args.config.is_some() {
                return Err(BeatError::Config("--config cannot be combined with --resume; use --set".into()).into());
            }
            let mut cfg = ckpt.model.config.clone();
            for o in &args.overrides {
                let (k, v) = crate::settings::split_assignment(o)?;
                cfg.set(k, v)?;
            }
            cfg.validate()?;
            let ds = dataset_for(&ckpt, data)?;
            let model = Model::from_params(cfg, ckpt.model.dims, ckpt.model.params)?;
            let mut optimizer = ckpt.optimizer;
            optimizer.lr = model.config.lr;
            let trainer = Trainer::resume(&ds, model, optimizer, ckpt.rng, ckpt.epoch)?;
            (ds, trainer)
        }
        None => {
            let cfg = config_of(args)?;
            let ds = load_dataset(data, cfg.max_len, None)?;
            let trainer = Trainer::new(&ds, cfg)?;
            (ds, trainer)
        }
    };
    create_dir(out)?;
    let history_path = out.join(HISTORY_FILE);
    let append = resume.is_some() && history_path.exists();
    let mut history = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&history_path)
        .map_err(|e| CliError::io(&history_path, e))?;
    if !append {
        history.write_all(b"step,L_id,L_cr,L_total,lr\n").map_err(|e| CliError::io(&history_path, e))?;
    }
    let mut recent: Vec<StepRecord> = Vec::new();
    let mut io_error = None;
    let batch = trainer.model.config.batch_size;
    while trainer.epoch() < trainer.model.config.epochs {
        let before = Checkpoint::from_trainer(&trainer, &ds.vocab);
        let (mut sum, mut n) = (0.0, 0usize);
        let result = trainer.run_epoch_with(&ds, |r| {
            sum += r.total;
            n += 1;
            if io_error.is_none() {
                io_error = history.write_all(history_line(r, batch).as_bytes()).err();
            }
            recent.push(*r);
            if recent.len() > 20 {
                recent.remove(0);
            }
        });
        if let Some(e) = io_error.take() {
            return Err(CliError::io(&history_path, e));
        }
        match result {
            Ok(()) => {
                println!("epoch {} loss {:.4}", trainer.epoch(), sum / (n.max(1) * batch) as f64);
            }
            Err(BeatError::Diverged { step, detail }) => {
                before.save(&out.join(DIVERGENCE_CHECKPOINT))?;
                let dump = DivergenceDump {
                    step,
                    epoch: trainer.epoch(),
                    detail: &detail,
                    config: &trainer.model.config,
                    recent: &recent,
                    epoch_start_checkpoint: DIVERGENCE_CHECKPOINT,
                };
                let json = serde_json::to_string_pretty(&dump).expect("dump serializes");
                write(&out.join(DIVERGENCE_FILE), json + "\n")?;
                return Err(BeatError::Diverged { step, detail }.into());
            }
            Err(e) => return Err(e.into()),
        }
    }
    Checkpoint::from_trainer(&trainer, &ds.vocab).save(&out.join(CHECKPOINT_FILE))?;
    Ok(Outcome {
        config: trainer.model.config.clone(),
        artifacts: vec![CHECKPOINT_FILE.to_string(), HISTORY_FILE.to_string()],
    })
}

fn write_report(out: &Path, rows: &[ReportRow<'_>]) -> CliResult<Vec<String>> {
    let table = report::table(rows);
    print!("{table}");
    write(&out.join(REPORT_TABLE), table)?;
    write(&out.join(REPORT_CSV), report::csv(rows))?;
    Ok(vec![REPORT_TABLE.to_string(), REPORT_CSV.to_string()])
}

fn eval(checkpoint: &Path, data: &Path, out: &Path) -> CliResult<Outcome> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let ds = dataset_for(&ckpt, data)?;
    let rep = evaluate_dataset(&ckpt.model, &ds)?;
    create_dir(out)?;
    let row = ReportRow { exp_id: "eval", label: "checkpoint", config: &ckpt.model.config, report: &rep };
    let artifacts = write_report(out, &[row])?;
    Ok(Outcome { config: ckpt.model.config, artifacts })
}

fn ablate(matrix: &str, data: &Path, eval_data: Option<&Path>, out: &Path, cfg: TrainConfig) -> CliResult<Outcome> {
    let matrix = AblationMatrix::parse(matrix)?;
    let train_set = load_dataset(data, cfg.max_len, None)?;
    let eval_set = match eval_data {
        Some(p) => load_dataset(p, cfg.max_len, Some(&train_set.vocab))?,
        None => train_set.clone(),
    };
    create_dir(out)?;
    let results = run_ablation(&train_set, &eval_set, &cfg, matrix, |r| {
        println!("{} ({}) R@1 {:.2}", r.row.exp_id, r.row.label, r.report.r1());
    })?;
    let rows: Vec<ReportRow<'_>> = results.iter().map(ReportRow::from).collect();
    let artifacts = write_report(out, &rows)?;
    Ok(Outcome { config: cfg, artifacts })
}

fn heatmap_cmd(checkpoint: &Path, data: &Path, image: usize, text: usize, out: &Path) -> CliResult<Outcome> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let ds = dataset_for(&ckpt, data)?;
    let img = ds.images.get(image).ok_or_else(|| BeatError::Argument(format!("no image sample {image}")))?;
    let txt = ds.texts.get(text).ok_or_else(|| BeatError::Argument(format!("no text sample {text}")))?;
    let grid = heatmap(&ckpt.model, img, txt)?;
    let (h, w) = (grid.dim(0), grid.dim(1));
    let mut s = String::new();
    for i in 0..h {
        let row: Vec<String> = grid.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(s, "{}", row.join(",")).unwrap();
    }
    create_dir(out)?;
    write(&out.join(HEATMAP_FILE), s)?;
    println!("wrote {h}x{w} grid to {}", out.join(HEATMAP_FILE).display());
    Ok(Outcome { config: ckpt.model.config, artifacts: vec![HEATMAP_FILE.to_string()] })
}

fn export(checkpoint: &Path, data: &Path, out: &Path) -> CliResult<Outcome> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let ds = dataset_for(&ckpt, data)?;
    let rows = global_embeddings(&ckpt.model, &ds)?;
    let dim = rows.first().map_or(0, |r| r.values.len());
    let mut s = String::from("sample_id,modality,identity");
    for i in 0..dim {
        write!(s, ",f{i}").unwrap();
    }
    s.push('\n');
    for r in &rows {
        write!(s, "{},{},{}", r.sample_id, r.kind.tag(), r.identity).unwrap();
        for v in &r.values {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    create_dir(out)?;
    write(&out.join(EMBEDDINGS_FILE), s)?;
    println!("wrote {} rows to {}", rows.len(), out.join(EMBEDDINGS_FILE).display());
    Ok(Outcome { config: ckpt.model.config, artifacts: vec![EMBEDDINGS_FILE.to_string()] })
}
