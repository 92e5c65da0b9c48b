//! Argument definitions and dispatch.

use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use sslf_core::{TrainConfig, VariantKind};

use crate::commands::{self, Session, Split, TrainOptions};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "sslf", version, about = "Self-supervised U-Net pretraining and fusion classification")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory for every artifact.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

/// Overrides for the training stage a command runs.
#[derive(Debug, Args, Default)]
pub struct StageFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Dataset directory containing labels.csv.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
}

impl StageFlags {
    fn apply(&self, cfg: &mut RunConfig, stage: fn(&mut RunConfig) -> &mut TrainConfig) {
        let t = stage(cfg);
        if let Some(e) = self.epochs {
            t.epochs = e;
        }
        if let Some(lr) = self.lr {
            t.learning_rate = lr;
        }
        if let Some(b) = self.batch_size {
            t.batch_size = b;
        }
        if let Some(d) = &self.data {
            cfg.data.dir = Some(d.clone());
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic texture dataset under <out>/data.
    Synth {
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Pretrain one U-Net per configured corruption.
    Pretrain(StageFlags),
    /// Pick the pretext with the lowest validation MSE.
    Select {
        #[arg(required = true, value_name = "REPORT")]
        reports: Vec<PathBuf>,
    },
    /// Train classifier variants.
    Train {
        /// unet, efficient, fusion, fusion-attention or all.
        #[arg(long)]
        variant: Option<String>,
        /// U-Net checkpoint to initialize from.
        #[arg(long, value_name = "PATH")]
        pretrained: Option<PathBuf>,
        #[arg(long, value_name = "BOOL")]
        freeze_encoder: Option<bool>,
        #[command(flatten)]
        stage: StageFlags,
    },
    /// Evaluate a classifier checkpoint.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of every op and the full pipelines.
    Gradcheck {
        /// Negate one backward rule (negative control).
        #[arg(long, hide = true, value_name = "OP")]
        inject_fault: Option<String>,
    },
}

pub fn parse_variants(name: &str) -> CliResult<Vec<VariantKind>> {
    if name == "all" {
        return Ok(VariantKind::ALL.to_vec());
    }
    VariantKind::from_str(name).map(|v| vec![v]).map_err(|_| {
        let names: Vec<_> = VariantKind::ALL.iter().map(|v| v.cli_name()).collect();
        CliError::config(format!("unknown variant {name:?}; valid: {}, all", names.join(", ")))
    })
}

fn base_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    let mut cfg = base_config(&cli)?;
    let verbose = !cli.quiet;
    match cli.command {
        Command::Synth { per_class, image_size } => {
            if let Some(n) = per_class {
                cfg.data.synthetic.per_class = n;
                cfg.data.synthetic.counts = None;
            }
            if let Some(n) = image_size {
                cfg.data.synthetic.size = n;
            }
            commands::cmd_synth(&Session::new(cfg, verbose)?, out)?;
        }
        Command::Pretrain(flags) => {
            flags.apply(&mut cfg, |c| &mut c.pretrain);
            commands::cmd_pretrain(&Session::new(cfg, verbose)?, out)?;
        }
        Command::Select { reports } => {
            commands::cmd_select(&Session::new(cfg, verbose)?, &reports, out)?;
        }
        Command::Train {
            variant,
            pretrained,
            freeze_encoder,
            stage,
        } => {
            let variants = match &variant {
                Some(v) => parse_variants(v)?,
                None => vec![cfg.fusion.variant],
            };
            stage.apply(&mut cfg, |c| &mut c.classify);
            if let Some(f) = freeze_encoder {
                cfg.fusion.freeze_unet = f;
            }
            let opts = TrainOptions { variants, pretrained };
            commands::cmd_train(&Session::new(cfg, verbose)?, &opts, out)?;
        }
        Command::Eval { checkpoint, split, data } => {
            if let Some(d) = data {
                cfg.data.dir = Some(d);
            }
            commands::cmd_eval(&Session::new(cfg, verbose)?, &checkpoint, split, out)?;
        }
        Command::Gradcheck { inject_fault } => {
            let fault = inject_fault.as_deref().map(commands::parse_op).transpose()?;
            commands::cmd_gradcheck(&cfg.out_dir, fault, out)?;
        }
    }
    Ok(())
}
