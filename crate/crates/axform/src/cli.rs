//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::commands::{self, Metric, CONFIG_FILE};
use crate::config::RunConfig;
use crate::error::{read_file, AppError, AppResult};
use crate::exec::Pool;

#[derive(Debug, Parser)]
#[command(name = "axform", version, about = "Attention-based point cloud decoding, completion and segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Worker threads; 1 gives bitwise-reproducible output.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score predictions against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, requires = "data", conflicts_with_all = ["pred", "gt"])]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory of predicted clouds (with --gt).
        #[arg(long, requires = "gt")]
        pred: Option<PathBuf>,
        /// Directory of ground-truth clouds (with --pred).
        #[arg(long, requires = "pred")]
        gt: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "cd-l1,cd-l2,fscore")]
        metrics: Vec<String>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Complete a partial cloud; writes coarse.pcf and final.pcf.
    Complete {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip the refinement and output the coarse cloud with the partial input.
        #[arg(long)]
        vanilla: bool,
    },
    /// Label a cloud's points through a branch map.
    Segment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Derive a branch map from one labeled reference cloud.
    Assign {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out_map: PathBuf,
        /// Comma-separated names for label ids 0, 1, ...
        #[arg(long, value_delimiter = ',')]
        label_names: Option<Vec<String>>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Complete { common, .. }
            | Command::Segment { common, .. }
            | Command::Assign { common, .. } => common,
        }
    }

    fn checkpoint(&self) -> Option<&Path> {
        match self {
            Command::Eval { checkpoint, .. } => checkpoint.as_deref(),
            Command::Complete { checkpoint, .. } | Command::Segment { checkpoint, .. } | Command::Assign { checkpoint, .. } => {
                Some(checkpoint)
            }
            _ => None,
        }
    }
}

/// Loads `--config`, else the `config.txt` written beside the checkpoint,
/// else the defaults; then applies `--set` and `--threads`.
fn resolve_config(cmd: &Command) -> AppResult<RunConfig> {
    let common = cmd.common();
    let path = common.config.clone().or_else(|| {
        let side = cmd.checkpoint()?.parent()?.join(CONFIG_FILE);
        side.is_file().then_some(side)
    });
    let mut cfg = match &path {
        Some(p) => {
            let bytes = read_file(p)?;
            let text = String::from_utf8(bytes).map_err(|e| {
                AppError::parse(p, crate::error::FormatError::new(e.utf8_error().valid_up_to() as u64, "invalid UTF-8"))
            })?;
            RunConfig::parse(&text).map_err(|e| AppError::parse(p, e))?
        }
        None => RunConfig::default(),
    };
    for kv in &common.set {
        cfg.apply_override(kv).map_err(|e| AppError::Usage(format!("--set {kv}: {e}")))?;
    }
    if let Some(t) = common.threads {
        if t == 0 {
            return Err(AppError::Usage("--threads must be at least 1".into()));
        }
        cfg.threads = t;
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> AppResult<()> {
    let cfg = resolve_config(&cli.command)?;
    let pool = Pool::new(cfg.threads).map_err(|e| AppError::Usage(format!("--threads: {e}")))?;
    match &cli.command {
        Command::GenData { out_dir, .. } => {
            let n = commands::gen_data(&cfg, out_dir, &pool)?;
            eprintln!("wrote {n} shapes to {}", out_dir.display());
        }
        Command::Train { data, out, resume, .. } => {
            let s = commands::train_run(&cfg, data, out, resume.as_deref(), &pool)?;
            if let (Some(t), Some(v)) = (s.train_loss.last(), s.val_loss.last()) {
                eprintln!("epoch {}: train {t:.6e} val {v:.6e}", s.epochs);
            }
        }
        Command::Eval { checkpoint, data, pred, gt, metrics, report, .. } => {
            let metrics = metrics
                .iter()
                .map(|m| Metric::parse(m).ok_or_else(|| AppError::Usage(format!("--metrics: unknown metric {m:?}"))))
                .collect::<AppResult<Vec<_>>>()?;
            let set = match (checkpoint, data, pred, gt) {
                (Some(c), Some(d), None, None) => commands::eval_set_from_model(&cfg, c, d, &pool)?,
                (None, _, Some(p), Some(g)) => commands::eval_set_from_dirs(p, g)?,
                _ => return Err(AppError::Usage("--checkpoint with --data, or --pred with --gt, is required".into())),
            };
            let rows = commands::evaluate_metrics(&cfg, &set, &metrics, &pool)?;
            commands::write_report(report, &rows)?;
        }
        Command::Complete { checkpoint, input, out, vanilla, .. } => {
            commands::complete_cloud(&cfg, checkpoint, input, out, *vanilla)?;
        }
        Command::Segment { checkpoint, map, input, out, .. } => {
            commands::segment_cloud(&cfg, checkpoint, map, input, out)?;
        }
        Command::Assign { checkpoint, reference, out_map, label_names, .. } => {
            let map = commands::assign_map(&cfg, checkpoint, reference, out_map, label_names.clone())?;
            if !map.degenerate_branches.is_empty() {
                eprintln!("warning: degenerate branches {:?}", map.degenerate_branches);
            }
        }
    }
    Ok(())
}

/// Parses and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
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
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
