use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;

use dmckn::dataio::{synth_dataset, vocab_path_for, write_features, write_labels, write_vocab, LabelRule, SynthConfig};
use dmckn::grid::GridSpec;
use dmckn::training::ablation::write_csv;

use crate::run::create_out_dir;
use crate::Status;

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Grid height.
    #[arg(long, default_value_t = 4)]
    pub rows: usize,

    /// Grid width.
    #[arg(long, default_value_t = 5)]
    pub cols: usize,

    /// Number of images.
    #[arg(long, default_value_t = 500)]
    pub images: usize,

    /// Label count (at least 4); a third each are context and long-range
    /// relations, the rest content labels.
    #[arg(long, default_value_t = 12)]
    pub labels: usize,

    /// Features per cell.
    #[arg(long, default_value_t = 16)]
    pub dim: usize,

    /// Feature noise standard deviation.
    #[arg(long)]
    pub sigma: Option<f64>,

    /// Output directory for `features.bin`, `labels.tsv` and its vocabulary.
    #[arg(long, short, default_value = "out")]
    pub out: PathBuf,
}

/// Pattern ids are 0-based indices into the non-background patterns.
#[derive(Serialize)]
struct RuleRow {
    label: String,
    kind: &'static str,
    pattern_a: usize,
    pattern_b: Option<usize>,
    min_steps: Option<usize>,
    max_steps: Option<usize>,
}

fn rule_row(label: &str, rule: &LabelRule) -> RuleRow {
    let (kind, a, b, min, max) = match *rule {
        LabelRule::Content { pattern } => ("content", pattern, None, None, None),
        LabelRule::Adjacent { a, b } => ("adjacent", a, Some(b), Some(1), Some(1)),
        LabelRule::Distance { a, b, min, max } => ("distance", a, Some(b), Some(min), Some(max)),
    };
    RuleRow {
        label: label.to_string(),
        kind,
        pattern_a: a,
        pattern_b: b,
        min_steps: min,
        max_steps: max,
    }
}

pub fn run(args: SynthArgs) -> Result<Status> {
    let grid = GridSpec::new(args.rows, args.cols)?;
    let mut config = SynthConfig::new(args.seed, grid, args.images, args.labels);
    config.visual_dim = args.dim;
    if let Some(s) = args.sigma {
        config.sigma = s;
    }
    let set = synth_dataset(&config)?;
    let out = &args.out;
    create_out_dir(out)?;
    let labels = out.join("labels.tsv");
    write_features(&out.join("features.bin"), &set.dataset.feature_set())?;
    write_labels(&labels, &set.dataset)?;
    write_vocab(&vocab_path_for(&labels), &set.dataset.vocab)?;
    let snapshot = out.join("synth.toml");
    fs::write(&snapshot, toml::to_string(&config)?).with_context(|| format!("writing {}", snapshot.display()))?;
    let rules: Vec<RuleRow> = set
        .rules
        .iter()
        .zip(&set.dataset.vocab)
        .map(|(r, l)| rule_row(l, r))
        .collect();
    write_csv(&out.join("rules.csv"), &rules)?;
    println!(
        "wrote {} images with {} labels to {}",
        set.dataset.len(),
        set.rules.len(),
        out.display()
    );
    Ok(Status::Ok)
}
