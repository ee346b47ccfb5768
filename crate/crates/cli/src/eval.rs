use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;

use dmckn::dataio::{load_checkpoint, load_dataset};
use dmckn::training::{evaluate, write_metrics_csv, MetricsReport, Protocol};

use crate::run::create_out_dir;
use crate::Status;

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Cell feature file.
    #[arg(long)]
    pub features: PathBuf,

    /// Label file matching the features.
    #[arg(long)]
    pub labels: PathBuf,

    /// Vocabulary (default: the label path with `.vocab` appended).
    #[arg(long)]
    pub vocab: Option<PathBuf>,

    /// Assign each image its k best labels.
    #[arg(long, conflicts_with = "threshold")]
    pub topk: Option<usize>,

    /// Assign every label with a positive score (the default).
    #[arg(long)]
    pub threshold: bool,

    /// Directory for `metrics.csv`; nothing is written without it.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

pub fn print_report(r: &MetricsReport, protocol: Protocol) {
    println!("protocol  {protocol}");
    println!("CP {:.4}  CR {:.4}  CF1 {:.4}", r.precision, r.recall, r.cf1);
    println!(
        "OP {:.4}  OR {:.4}  OF1 {:.4}",
        r.overall_precision, r.overall_recall, r.of1
    );
    println!("mAP {:.4}  ({} contributing labels)", r.map, r.contributing);
}

pub fn run(args: EvalArgs) -> Result<Status> {
    let protocol = match args.topk {
        Some(k) => Protocol::TopK(k),
        None => Protocol::Threshold,
    };
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let data = load_dataset(&args.features, &args.labels, args.vocab.as_deref())?;
    if data.is_empty() {
        bail!("{}: no images to evaluate", args.features.display());
    }
    if data.vocab != ckpt.vocab {
        bail!(
            "vocabulary of {} differs from the checkpoint's ({} vs {} labels)",
            args.labels.display(),
            data.vocab.len(),
            ckpt.vocab.len()
        );
    }
    if data.grid != ckpt.network.grid || data.visual_dim() != ckpt.network.visual_dim {
        bail!(
            "{} holds {} grids with {} features per cell; the checkpoint expects {} with {}",
            args.features.display(),
            data.grid,
            data.visual_dim(),
            ckpt.network.grid,
            ckpt.network.visual_dim
        );
    }
    let params = ckpt.params()?;
    let report = evaluate(&params, &ckpt.partition, &data, protocol)?;
    print_report(&report, protocol);
    if let Some(out) = &args.out {
        create_out_dir(out)?;
        write_metrics_csv(&out.join("metrics.csv"), &report, &data.vocab)?;
    }
    Ok(Status::Ok)
}
