//! Command-line entry points: `fuse`, `train`, `eval`, `selftest`.
//!
//! Exit codes: 0 success, 1 usage/config, 2 I/O, 3 numeric failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::imaging::{self, load_gray, load_pair, save_png};
use crate::metrics::{metric_row, MetricsReport};
use crate::net;
use crate::selftest::{self, Overrides};
use crate::synth;
use crate::training::{self, load_checkpoint, TrainConfig};
use crate::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "sfdfusion",
    version,
    about = "Infrared/visible image fusion: spatial + frequency domain network, trainer, and metrics"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblationFlag {
    /// Disable the spatial refinement branch.
    NoDmrm,
    /// Disable the frequency fusion branch.
    NoFdfm,
    /// Keep the architecture but drop the frequency loss term.
    NoLfre,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fuse one registered IR/VIS pair, or a directory of pairs matched by
    /// file stem.
    Fuse {
        /// Trained checkpoint (.sfdf).
        #[arg(long)]
        ckpt: PathBuf,
        /// IR image or directory.
        #[arg(long)]
        ir: PathBuf,
        /// Visible image or directory.
        #[arg(long)]
        vis: PathBuf,
        /// Output PNG path, or directory in batch mode.
        #[arg(long)]
        out: PathBuf,
        /// Optional saliency mask (file or directory); validated against the
        /// pair dimensions.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Write the fused luma instead of recombined color.
        #[arg(long)]
        gray: bool,
    },
    /// Train on a `<root>/ir`, `<root>/vis`[, `<root>/mask`] dataset.
    Train {
        /// Flat key=value config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra key=value overrides, applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Branch/loss ablations (repeatable).
        #[arg(long, value_enum)]
        ablation: Vec<AblationFlag>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        crop: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        dataset_root: Option<PathBuf>,
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
    },
    /// Compute EN/SD/SF/MI/VIF/Qabf for fused images against their sources.
    Eval {
        #[arg(long)]
        fused_dir: PathBuf,
        #[arg(long)]
        ir_dir: PathBuf,
        #[arg(long)]
        vis_dir: PathBuf,
        /// Report CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in oracle suites (FFT, conv, gradients, metrics).
    Selftest,
}

/// Executes a parsed invocation.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fuse {
            ckpt,
            ir,
            vis,
            out,
            mask,
            gray,
        } => cmd_fuse(&ckpt, &ir, &vis, &out, mask.as_deref(), gray),
        Command::Train {
            config,
            set,
            ablation,
            epochs,
            batch_size,
            crop,
            seed,
            lr,
            dataset_root,
            checkpoint_dir,
        } => cmd_train(TrainCliArgs {
            config,
            set,
            ablation,
            epochs,
            batch_size,
            crop,
            seed,
            lr,
            dataset_root,
            checkpoint_dir,
        }),
        Command::Eval {
            fused_dir,
            ir_dir,
            vis_dir,
            out,
        } => cmd_eval(&fused_dir, &ir_dir, &vis_dir, &out),
        Command::Selftest => cmd_selftest(),
    }
}

// ---- fuse ---------------------------------------------------------------------

fn fuse_one(
    params: &net::FusionNetParams,
    ir_path: &Path,
    vis_path: &Path,
    mask_path: Option<&Path>,
    out_path: &Path,
    gray: bool,
) -> Result<()> {
    let pair = load_pair(ir_path, vis_path)?;
    if let Some(mp) = mask_path {
        // Masks are not consumed at inference time; validate registration only.
        imaging::load_or_generate_mask(&pair, Some(mp))?;
    }
    let img = if gray {
        net::infer(params, &pair)?
    } else {
        net::fuse_to_rgb(params, &pair)?
    };
    save_png(out_path, &img)
}

pub fn cmd_fuse(
    ckpt: &Path,
    ir: &Path,
    vis: &Path,
    out: &Path,
    mask: Option<&Path>,
    gray: bool,
) -> Result<()> {
    let (params, _) = load_checkpoint(ckpt)?;
    if ir.is_dir() {
        if !vis.is_dir() {
            return Err(Error::Config(
                "--ir is a directory but --vis is not".into(),
            ));
        }
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let index = imaging::dataset_index(ir, vis, None)?;
        for entry in &index.pairs {
            let mask_path = mask.map(|d| d.join(format!("{}.png", entry.id)));
            let mask_ref = mask_path.as_deref().filter(|p| p.is_file());
            let out_path = out.join(format!("{}.png", entry.id));
            fuse_one(&params, &entry.ir, &entry.vis, mask_ref, &out_path, gray)?;
            log::info!("fused {}", entry.id);
        }
        println!("fused {} pairs into {}", index.pairs.len(), out.display());
        Ok(())
    } else {
        fuse_one(&params, ir, vis, mask, out, gray)?;
        println!("wrote {}", out.display());
        Ok(())
    }
}

// ---- train --------------------------------------------------------------------

struct TrainCliArgs {
    config: Option<PathBuf>,
    set: Vec<String>,
    ablation: Vec<AblationFlag>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    crop: Option<usize>,
    seed: Option<u64>,
    lr: Option<f32>,
    dataset_root: Option<PathBuf>,
    checkpoint_dir: Option<PathBuf>,
}

fn cmd_train(args: TrainCliArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    for kv in &args.set {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{}'", kv)))?;
        config.apply_kv(key.trim(), value.trim())?;
    }
    if let Some(v) = args.epochs {
        config.epochs = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.crop {
        config.crop = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.lr {
        config.lr = v;
    }
    if let Some(v) = args.dataset_root {
        config.dataset_root = v;
    }
    if let Some(v) = args.checkpoint_dir {
        config.checkpoint_dir = v;
    }
    for flag in &args.ablation {
        match flag {
            AblationFlag::NoDmrm => config.net.ablation.use_dmrm = false,
            AblationFlag::NoFdfm => config.net.ablation.use_fdfm = false,
            AblationFlag::NoLfre => config.net.ablation.use_lfre = false,
        }
    }

    let params = net::FusionNetParams::init(config.net, config.seed)?;
    println!(
        "training: {} parameters (d={}, c={}), {} epochs, batch {}, crop {}, seed {}",
        params.param_count(),
        config.net.d,
        config.net.c,
        config.epochs,
        config.batch_size,
        config.crop,
        config.seed
    );
    let outcome = training::train(&config)?;
    println!(
        "done: {} steps, first-epoch loss {:.4}, final-epoch loss {:.4}",
        outcome.steps,
        outcome.epoch_means.first().copied().unwrap_or(0.0),
        outcome.epoch_means.last().copied().unwrap_or(0.0)
    );
    println!("checkpoint: {}", outcome.final_checkpoint.display());
    println!("log: {}", outcome.log_path.display());
    Ok(())
}

// ---- eval ---------------------------------------------------------------------

pub fn cmd_eval(fused_dir: &Path, ir_dir: &Path, vis_dir: &Path, out: &Path) -> Result<()> {
    let sources = imaging::dataset_index(ir_dir, vis_dir, None)?;
    let mut report = MetricsReport {
        label: fused_dir.display().to_string(),
        rows: Vec::new(),
    };
    let mut missing = 0usize;
    for entry in &sources.pairs {
        let fused_path = fused_dir.join(format!("{}.png", entry.id));
        if !fused_path.is_file() {
            log::warn!("no fused image for '{}'", entry.id);
            missing += 1;
            continue;
        }
        let fused = load_gray(&fused_path)?;
        let ir = load_gray(&entry.ir)?;
        let vis = load_gray(&entry.vis)?;
        if fused.shape() != ir.shape() || ir.shape() != vis.shape() {
            return Err(Error::Registration(format!(
                "'{}': fused {:?} vs ir {:?} vs vis {:?}",
                entry.id,
                fused.shape(),
                ir.shape(),
                vis.shape()
            )));
        }
        report.push(metric_row(&entry.id, &fused, &ir, &vis));
    }
    if report.rows.is_empty() {
        return Err(Error::Dataset(format!(
            "no fused images in {} match the source pairs",
            fused_dir.display()
        )));
    }
    report.write_csv(out)?;
    let mean = report.means();
    println!(
        "evaluated {} images ({} missing): EN {:.3} SD {:.3} SF {:.3} MI {:.3} VIF {:.3} Qabf {:.3}",
        report.rows.len(),
        missing,
        mean.en,
        mean.sd,
        mean.sf,
        mean.mi,
        mean.vif,
        mean.qabf
    );
    println!("report: {}", out.display());
    Ok(())
}

// ---- selftest -------------------------------------------------------------------

pub fn cmd_selftest() -> Result<()> {
    let results = selftest::run(&Overrides::default());
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut all_ok = true;
    for r in &results {
        println!(
            "{:width$}  {}  {}",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.detail,
            width = width
        );
        all_ok &= r.passed;
    }
    if all_ok {
        Ok(())
    } else {
        Err(Error::Numeric("selftest failures (see table above)".into()))
    }
}

// ---- synthetic data tool ----------------------------------------------------------

/// Arguments of the `sfd-synth` dataset generator binary.
#[derive(Parser, Debug)]
#[command(
    name = "sfd-synth",
    version,
    about = "Generate a synthetic IR/VIS/mask PNG dataset for training and evaluation"
)]
pub struct SynthCli {
    /// Output root; ir/, vis/, and mask/ subdirectories are created.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub pairs: usize,
    #[arg(long, default_value_t = 96)]
    pub width: usize,
    #[arg(long, default_value_t = 96)]
    pub height: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run_synth(cli: SynthCli) -> Result<()> {
    let spec = synth::SynthSpec {
        width: cli.width,
        height: cli.height,
        pairs: cli.pairs,
        seed: cli.seed,
    };
    synth::write_dataset(&cli.out, &spec)?;
    println!(
        "wrote {} pairs ({}x{}) under {}",
        cli.pairs,
        cli.width,
        cli.height,
        cli.out.display()
    );
    Ok(())
}
