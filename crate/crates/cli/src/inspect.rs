use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;

use dmckn::dataio::{load_checkpoint, read_features};
use dmckn::grid::Direction;
use dmckn::network::cell_impacts;
use dmckn::training::ablation::write_csv;

use crate::run::create_out_dir;
use crate::Status;

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Cell feature file holding the image.
    #[arg(long)]
    pub features: PathBuf,

    /// Image id within the feature file.
    #[arg(long)]
    pub id: String,

    /// Output directory for `impacts.csv` and `walks.csv`.
    #[arg(long, short, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct ImpactRow {
    cell: usize,
    row: usize,
    col: usize,
    impact: f64,
}

#[derive(Serialize)]
struct WalkRow {
    layer: usize,
    direction: &'static str,
    order: usize,
    cell: usize,
    neighbor: usize,
    neighbor_row: usize,
    neighbor_col: usize,
    probability: f64,
}

pub fn run(args: InspectArgs) -> Result<Status> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let set = read_features(&args.features)?;
    let Some(i) = set.ids.iter().position(|x| *x == args.id) else {
        bail!("image {:?} not found in {}", args.id, args.features.display());
    };
    let grid = ckpt.network.grid;
    if set.grid != grid || set.dim != ckpt.network.visual_dim {
        bail!(
            "{} holds {} grids with {} features per cell; the checkpoint expects {} with {}",
            args.features.display(),
            set.grid,
            set.dim,
            grid,
            ckpt.network.visual_dim
        );
    }
    let params = ckpt.params()?;
    let (impacts, contexts) = cell_impacts(&params, &set.features[i])?;

    let impact_rows: Vec<ImpactRow> = impacts
        .iter()
        .enumerate()
        .map(|(cell, &impact)| {
            let (row, col) = grid.coords(cell);
            ImpactRow { cell, row, col, impact }
        })
        .collect();
    let mut walk_rows = Vec::new();
    for (layer, ctx) in contexts.iter().enumerate() {
        for dir in Direction::ALL {
            for order in 1..=ctx.max_order() {
                for cell in 0..ctx.rows() {
                    let e = ctx.entry(cell, dir, order);
                    for (&neighbor, &probability) in e.indices.iter().zip(&e.probs) {
                        let (neighbor_row, neighbor_col) = grid.coords(neighbor);
                        walk_rows.push(WalkRow {
                            layer: layer + 1,
                            direction: dir.name(),
                            order,
                            cell,
                            neighbor,
                            neighbor_row,
                            neighbor_col,
                            probability,
                        });
                    }
                }
            }
        }
    }
    create_out_dir(&args.out)?;
    write_csv(&args.out.join("impacts.csv"), &impact_rows).context("writing impacts.csv")?;
    write_csv(&args.out.join("walks.csv"), &walk_rows).context("writing walks.csv")?;
    let (max_cell, max) = impacts
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |a, (c, &v)| if v > a.1 { (c, v) } else { a });
    println!(
        "{}: {} cells, {} walk entries; largest impact {max:.4e} at cell {max_cell}",
        args.id,
        impacts.len(),
        walk_rows.len()
    );
    Ok(Status::Ok)
}
