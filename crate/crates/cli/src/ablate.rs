use anyhow::{bail, Context, Result};
use clap::Args;

use dmckn::training::ablation::{ablation_arms, ablation_run, summarize, write_csv, AblationAxis};

use crate::run::{create_out_dir, load_data, write_snapshot, RunArgs};
use crate::Status;

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,

    /// Axis to vary: ca, lg, depth, order or thres. Repeat together with
    /// --values; every axis is varied on its own around the base run.
    #[arg(long, required = true)]
    pub axis: Vec<String>,

    /// Comma-separated values of the matching --axis.
    #[arg(long, required = true)]
    pub values: Vec<String>,

    /// Comma-separated training seeds; medians are taken over them.
    #[arg(long, default_value = "1")]
    pub seeds: String,
}

fn parse_list<T: std::str::FromStr>(what: &str, text: &str) -> Result<Vec<T>>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    text.split(',')
        .map(|s| s.trim().parse::<T>().with_context(|| format!("bad {what} value {s:?}")))
        .collect()
}

pub fn run(args: AblateArgs) -> Result<Status> {
    if args.axis.len() != args.values.len() {
        bail!("every --axis needs exactly one --values list");
    }
    let mut axes = Vec::with_capacity(args.axis.len());
    for (name, values) in args.axis.iter().zip(&args.values) {
        let axis: AblationAxis = name.parse()?;
        axes.push((name.clone(), axis, parse_list::<f64>(name, values)?));
    }
    let seeds: Vec<u64> = parse_list("seed", &args.seeds)?;
    let config = args.run.resolve()?;
    let arm_sets = axes
        .iter()
        .map(|(_, axis, values)| ablation_arms(&config.network, &config.train, &[(*axis, values.clone())]))
        .collect::<dmckn::Result<Vec<_>>>()?;

    let (train, test) = load_data(&config)?;
    let Some(test) = test else {
        bail!("ablation needs a test set (data.test_features or synthetic test images)");
    };
    let out = &args.run.out;
    create_out_dir(out)?;
    write_snapshot(out, &config)?;
    for ((name, _, _), arms) in axes.iter().zip(&arm_sets) {
        let rows = ablation_run(&train, &test, arms, &seeds, config.eval.protocol)?;
        let summary = summarize(&rows);
        write_csv(&out.join(format!("ablation_{name}.csv")), &summary)?;
        write_csv(&out.join(format!("ablation_{name}_runs.csv")), &rows)?;
        println!("axis {name}:");
        for s in &summary {
            println!(
                "  ca={} lg={} depth={} order={} thres={}  median CF1 {:.4}  OF1 {:.4}  mAP {:.4}",
                s.ca, s.lg, s.depth, s.order, s.thres, s.median_cf1, s.median_of1, s.median_map
            );
        }
    }
    Ok(Status::Ok)
}
