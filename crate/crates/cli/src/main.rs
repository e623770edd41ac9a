//! `des`: train, evaluate, run and inspect DES toy detectors.

mod commands;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "des", version, about = "Single-shot detector with segmentation activation and global activation gates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network; writes loss.csv, checkpoints and config.json to --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset manifest (JSON).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Print a loss line every N iterations (0 = silent).
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
    /// Evaluate a checkpoint on a dataset and write a JSON report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        score_thresh: f64,
    },
    /// Detect objects in one PPM image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        score_thresh: f64,
        /// Write the image with detection outlines here.
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Train and evaluate the ablation arms over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        /// Training manifest; synthetic data is generated when absent.
        #[arg(long, requires = "test_data")]
        data: Option<PathBuf>,
        #[arg(long, requires = "data")]
        test_data: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        train_count: usize,
        #[arg(long, default_value_t = 100)]
        test_count: usize,
        /// Seed of the generated training set; the test set uses seed + 1.
        #[arg(long, default_value_t = 1000)]
        data_seed: u64,
        /// Also write the table as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference check of every layer and the full objective.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Rasterize an annotation into the weak segmentation grid (PGM + JSON).
    RasterizeGt {
        /// VOC XML or JSON annotation.
        #[arg(long)]
        annotation: PathBuf,
        /// Object class names in id order, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        classes: Vec<String>,
        #[arg(long, default_value_t = 300)]
        input_size: usize,
        #[arg(long, default_value_t = 8)]
        stride: usize,
        /// Output PGM; the label map goes to `<out>.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write X, Z and X⊙Z channel slices of the first source layer as PGMs.
    DumpActivation {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of leading channels to dump.
        #[arg(long, default_value_t = 4)]
        channels: usize,
    },
    /// Generate a synthetic shapes dataset with a manifest.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Train {
            config,
            data,
            out,
            log_every,
        } => commands::train(&config, &data, &out, log_every),
        Command::Eval {
            ckpt,
            data,
            report,
            score_thresh,
        } => commands::eval(&ckpt, &data, &report, score_thresh),
        Command::Infer {
            ckpt,
            image,
            score_thresh,
            overlay,
        } => commands::infer(&ckpt, &image, score_thresh, overlay.as_deref()),
        Command::Ablate {
            config,
            seeds,
            data,
            test_data,
            train_count,
            test_count,
            data_seed,
            report,
        } => commands::ablate(commands::AblateArgs {
            config,
            seeds,
            data: data.zip(test_data),
            train_count,
            test_count,
            data_seed,
            report,
        }),
        Command::Gradcheck { seed } => commands::gradcheck(seed),
        Command::RasterizeGt {
            annotation,
            classes,
            input_size,
            stride,
            out,
        } => commands::rasterize_gt(&annotation, &classes, input_size, stride, &out),
        Command::DumpActivation {
            ckpt,
            image,
            out,
            channels,
        } => commands::dump_activation(&ckpt, &image, &out, channels),
        Command::GenSynthetic {
            out,
            count,
            seed,
            classes,
            size,
        } => commands::gen_synthetic(&out, count, seed, classes, size),
    }
}
