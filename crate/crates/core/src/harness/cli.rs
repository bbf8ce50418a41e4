//! Command line front end. Every subcommand reads an optional TOML config,
//! applies `--set key=value` overrides and writes the resolved config next
//! to its outputs. Failures print one JSON line on stderr.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use super::config::{parse_macro_spec, ExperimentConfig};
use super::experiment::{
    derive_from_checkpoint, eval_features_stage, eval_model_stage, gen_data_stage, read_genotype, search_stage,
    train_stage, write_genotype, GENOTYPE_FILE,
};
use crate::archspace::count_params_flops;
use crate::error::{Error, Result};
use crate::retrieval::read_labeled;
use crate::supernet::load_checkpoint;

#[derive(Parser, Debug)]
#[command(name = "autoreid", version, about = "Architecture search and training for person re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set search.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for `--set out_dir=DIR`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        if let Some(o) = &self.out {
            overrides.push(format!("out_dir={}", toml_string(&o.to_string_lossy())));
        }
        ExperimentConfig::load(self.config.as_deref(), &overrides)
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic dataset as PNG folders.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Search a cell genotype with the supernet.
    Search {
        #[command(flatten)]
        common: Common,
    },
    /// Derive the genotype stored in a supernet checkpoint.
    Derive {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        alpha: PathBuf,
        /// Output file; defaults to `<out_dir>/genotype.json`.
        #[arg(long)]
        genotype: Option<PathBuf>,
    },
    /// Train the network of a genotype from scratch.
    Train {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out_dir>/search/genotype.json`.
        #[arg(long)]
        genotype: Option<PathBuf>,
    },
    /// Score a trained checkpoint, or a pair of feature dumps.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out_dir>/train/best.ckpt`.
        #[arg(long, conflicts_with_all = ["query", "gallery"])]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "gallery")]
        query: Option<PathBuf>,
        #[arg(long, requires = "query")]
        gallery: Option<PathBuf>,
    },
    /// Print parameter and multiply-accumulate counts of a genotype.
    Count {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        genotype: PathBuf,
        /// Compact macro override such as `C=64,l=2.2.2.2,hw=384x128`.
        #[arg(long = "macro")]
        macro_spec: Option<String>,
    },
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::InvalidArgument(_) => "invalid_argument",
        Error::Parse { .. } => "parse",
        Error::Diverged { .. } => "diverged",
        Error::Io { .. } => "io",
        Error::Image { .. } => "image",
        Error::Config(_) => "config",
    }
}

/// Runs the command line `argv` (program name first) and returns the exit
/// code: 0 on success, 2 for usage errors, 1 otherwise.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("{}", json!({ "error": "usage", "message": first }));
            return 2;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", json!({ "error": error_kind(&e), "message": e.to_string() }));
            1
        }
    }
}

fn stage_dir(cfg: &ExperimentConfig, name: &str) -> Result<PathBuf> {
    let dir = cfg.out_dir.join(name);
    cfg.write_resolved(&dir)?;
    Ok(dir)
}

fn print_json(v: serde_json::Value) {
    println!("{v}");
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { common } => {
            let cfg = common.load()?;
            stage_dir(&cfg, "gen-data")?;
            let (root, n) = gen_data_stage(&cfg)?;
            print_json(json!({ "root": root, "images": n }));
        }
        Command::Search { common } => {
            let cfg = common.load()?;
            let dir = stage_dir(&cfg, "search")?;
            let out = search_stage(&cfg, &dir)?;
            print_json(json!({
                "genotype": dir.join(GENOTYPE_FILE),
                "epochs": cfg.search.epochs,
                "final_train_loss": out.state.train_loss.last(),
                "cells": out.genotype.render(),
            }));
        }
        Command::Derive {
            common,
            alpha,
            genotype,
        } => {
            let cfg = common.load()?;
            stage_dir(&cfg, "derive")?;
            let g = derive_from_checkpoint(&alpha)?;
            let path = genotype.unwrap_or_else(|| cfg.out_dir.join(GENOTYPE_FILE));
            write_genotype(&path, &g)?;
            print_json(json!({ "genotype": path, "cells": g.render() }));
        }
        Command::Train { common, genotype } => {
            let cfg = common.load()?;
            let dir = stage_dir(&cfg, "train")?;
            let path = genotype.unwrap_or_else(|| cfg.out_dir.join("search").join(GENOTYPE_FILE));
            let g = read_genotype(&path)?;
            let out = train_stage(&cfg, &g, &dir)?;
            print_json(json!({
                "checkpoint": dir.join("best.ckpt"),
                "best_epoch": out.best_epoch,
                "final_loss": out.log.last().map(|r| r.loss),
            }));
        }
        Command::Eval {
            common,
            checkpoint,
            query,
            gallery,
        } => {
            let cfg = common.load()?;
            let dir = stage_dir(&cfg, "eval")?;
            let (_, report) = match (query, gallery) {
                (Some(q), Some(g)) => eval_features_stage(&cfg, &read_labeled(&q)?, &read_labeled(&g)?, &dir)?,
                _ => {
                    let path = checkpoint.unwrap_or_else(|| cfg.out_dir.join("train").join("best.ckpt"));
                    let model = load_checkpoint(&path)?.to_model()?;
                    if model.net.alpha.is_some() {
                        return Err(Error::invalid(format!("{} is a supernet checkpoint", path.display())));
                    }
                    check_input(&cfg, model.net.macro_cfg.input_hw)?;
                    eval_model_stage(&cfg, &model, &dir)?
                }
            };
            print_json(serde_json::to_value(&report).map_err(|e| Error::invalid(e.to_string()))?);
        }
        Command::Count {
            common,
            genotype,
            macro_spec,
        } => {
            let cfg = common.load()?;
            stage_dir(&cfg, "count")?;
            let g = read_genotype(&genotype)?;
            let mut m = match macro_spec {
                Some(s) => parse_macro_spec(&s, &cfg.macro_cfg)?,
                None => cfg.macro_cfg.clone(),
            };
            m.blocks = g.blocks();
            let cost = count_params_flops(&g, &m)?;
            print_json(json!({ "params": cost.params, "macs": cost.macs }));
        }
    }
    Ok(())
}

fn check_input(cfg: &ExperimentConfig, hw: [usize; 2]) -> Result<()> {
    if hw != cfg.macro_cfg.input_hw {
        return Err(Error::Config(format!(
            "checkpoint expects {hw:?} inputs but macro.input_hw is {:?}",
            cfg.macro_cfg.input_hw
        )));
    }
    Ok(())
}

