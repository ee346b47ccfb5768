use std::path::PathBuf;

use anyhow::Result;
use clap::Args;

use dmckn::dataio::{save_checkpoint, vocab_path_for, write_features, write_labels, write_vocab, Checkpoint};
use dmckn::training::{evaluate, fit, write_history_csv, write_metrics_csv};

use crate::run::{create_out_dir, load_data, write_snapshot, RunArgs};
use crate::Status;

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,

    /// Skip writing the test split to `<out>/data`.
    #[arg(long)]
    pub no_data_export: bool,
}

pub fn run(args: TrainArgs) -> Result<Status> {
    let config = args.run.resolve()?;
    let (train, test) = load_data(&config)?;
    let out = &args.run.out;
    create_out_dir(out)?;
    write_snapshot(out, &config)?;

    let outcome = fit(&train, None, &config.network, &config.train)?;
    let ckpt = Checkpoint::new(&outcome.params, &outcome.partition, &train.vocab, outcome.state);
    save_checkpoint(&out.join("model.ckpt"), &ckpt)?;
    write_history_csv(&out.join("history.csv"), &outcome.history)?;
    println!(
        "trained {} epochs, best epoch {} (validation macro F1 {:.4})",
        outcome.history.len(),
        outcome.best_epoch,
        outcome.best_val_cf1
    );

    if let Some(test) = test {
        if config.data.synth.is_some() && !args.no_data_export {
            let dir: PathBuf = out.join("data");
            create_out_dir(&dir)?;
            let labels = dir.join("test.tsv");
            write_features(&dir.join("test.bin"), &test.feature_set())?;
            write_labels(&labels, &test)?;
            write_vocab(&vocab_path_for(&labels), &test.vocab)?;
        }
        let report = evaluate(&outcome.params, &outcome.partition, &test, config.eval.protocol)?;
        write_metrics_csv(&out.join("metrics.csv"), &report, &test.vocab)?;
        crate::eval::print_report(&report, config.eval.protocol);
    }
    Ok(Status::Ok)
}
