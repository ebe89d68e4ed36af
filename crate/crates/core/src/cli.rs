//! Command-line entry points.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for configuration, data
//! and runtime errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use egmf_tensor::checkpoint::{load_checkpoint, save_checkpoint};

use crate::config::EgmfConfig;
use crate::data::Split;
use crate::error::{EgmfError, Result};
use crate::pipeline::{ablation_csv, default_arms, run_ablation, Pipeline, RunDir};
use crate::synthetic::generate_synthetic;
use crate::train::{evaluate, train};
use crate::vocab::Vocab;

#[derive(Debug, Parser)]
#[command(name = "egmf", version, about = "Expert-guided multimodal fusion with a LoRA-adapted toy LM")]
struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for all inputs and outputs.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Dataset directory; defaults to `<out>/data`.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset (manifest, vocabulary, JSONL splits).
    GenerateData,
    /// Pretrain the toy LM and write `lm.ckpt`.
    PretrainLm,
    /// Train the full model on the train split and write `model.ckpt`.
    Train,
    /// Evaluate a model checkpoint and write `metrics.json` / `metrics.txt`.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Train and evaluate every ablation arm; write `ablation.csv`.
    Ablate,
    /// Dump gate diagnostics and attention maps for one utterance.
    Inspect {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let Some(config) = cli.config.clone() else {
        eprintln!("error: --config PATH is required\n\nUsage: egmf --config PATH [--seed N] [--out DIR] <COMMAND>");
        return 1;
    };
    match run(&cli, &config) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| EgmfError::io(path, e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn run(cli: &Cli, config: &Path) -> Result<()> {
    let mut cfg = EgmfConfig::load(config)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    let dir = RunDir::new(&cli.out);
    let data_dir = cli.data.clone().unwrap_or_else(|| dir.data());
    std::fs::create_dir_all(&dir.root).map_err(|e| EgmfError::io(&dir.root, e))?;
    let open = || Pipeline::open(&cfg, &data_dir);
    let lm_weights = || -> Result<egmf_tensor::ParamStore> {
        let path = dir.lm_checkpoint();
        if !path.exists() {
            return Err(EgmfError::Data(format!(
                "{} not found; run `pretrain-lm` first",
                path.display()
            )));
        }
        Ok(load_checkpoint(&path)?.1)
    };

    match &cli.command {
        Command::GenerateData => {
            let vocab = Vocab::standard(cfg.lm.vocab_size)?;
            let m = generate_synthetic(&cfg.data, &vocab, &data_dir)?;
            cfg.save(&dir.file("config.json"))?;
            println!(
                "wrote {} ({} train / {} valid / {} test) to {}",
                m.name,
                m.splits.train,
                m.splits.valid,
                m.splits.test,
                data_dir.display()
            );
        }
        Command::PretrainLm => {
            let p = open()?;
            let (store, losses) = p.pretrain()?;
            save_checkpoint(&dir.lm_checkpoint(), &store, cfg.train.seed, Some(&cfg.hash()))?;
            write_json(&dir.file("pretrain_log.json"), &losses)?;
            println!(
                "pretrained LM for {} steps, final loss {:.4}; wrote {}",
                losses.len(),
                losses.last().copied().unwrap_or(f64::NAN),
                dir.lm_checkpoint().display()
            );
        }
        Command::Train => {
            let p = open()?;
            let lm = lm_weights()?;
            let mut model = p.build_model(&lm, &cfg.train.ablation)?;
            let train_set = p.load_split(Split::Train)?;
            let log = train(&mut model, &train_set)?;
            p.save_model(&model, &dir.model_checkpoint())?;
            write_json(&dir.file("train_log.json"), &log)?;
            println!(
                "trained {} steps, final loss {:.4}; wrote {}",
                log.steps,
                log.step_losses.last().copied().unwrap_or(f64::NAN),
                dir.model_checkpoint().display()
            );
        }
        Command::Eval { checkpoint, split } => {
            let p = open()?;
            let path = checkpoint.clone().unwrap_or_else(|| dir.model_checkpoint());
            let model = p.load_model(&path)?;
            let data = p.load_split((*split).into())?;
            let report = evaluate(&model, &data)?;
            write_json(&dir.file("metrics.json"), &report)?;
            let table = report.to_table();
            write_text(&dir.file("metrics.txt"), &table)?;
            print!("{table}");
        }
        Command::Ablate => {
            let p = open()?;
            let lm = lm_weights()?;
            let train_set = p.load_split(Split::Train)?;
            let test_set = p.load_split(Split::Test)?;
            let results = run_ablation(&p, &lm, &train_set, &test_set, &default_arms(&cfg.train.ablation))?;
            let csv = ablation_csv(&results);
            write_text(&dir.file("ablation.csv"), &csv)?;
            write_json(&dir.file("ablation.json"), &results)?;
            print!("{csv}");
        }
        Command::Inspect {
            checkpoint,
            split,
            index,
        } => {
            let p = open()?;
            let path = checkpoint.clone().unwrap_or_else(|| dir.model_checkpoint());
            let model = p.load_model(&path)?;
            let data = p.load_split((*split).into())?;
            let u = data.get(*index).ok_or_else(|| {
                EgmfError::Data(format!("index {index} out of range for a split of {} records", data.len()))
            })?;
            let diag = model.diagnostics(u)?;
            write_json(&dir.file("inspect.json"), &diag)?;
            println!("{}", serde_json::to_string_pretty(&diag)?);
        }
    }
    Ok(())
}
