//! Run description shared by `train` and `ablate`: a TOML file (or the
//! built-in synthetic setup) with command-line overrides on top.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;

use dmckn::config::{DataConfig, EvalConfig, RunConfig};
use dmckn::dataio::{load_dataset, synth_dataset, LabeledDataset, SynthConfig};
use dmckn::grid::GridSpec;
use dmckn::network::{Activation, LayerConfig, NetworkConfig};
use dmckn::training::{Protocol, TrainConfig};

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run description (TOML). Without it the built-in synthetic setup is
    /// used.
    #[arg(long, short)]
    pub config: Option<PathBuf>,

    /// Use synthetic data even when the config names feature files.
    #[arg(long)]
    pub synth: bool,

    /// Seed of training (and of the synthetic data).
    #[arg(long)]
    pub seed: Option<u64>,

    /// Number of layers; every layer copies the first one.
    #[arg(long)]
    pub depth: Option<usize>,

    /// Highest neighborhood order of every layer.
    #[arg(long)]
    pub orders: Option<usize>,

    /// Context weight γ of every layer.
    #[arg(long)]
    pub gamma: Option<f64>,

    /// Random-walk threshold of every layer.
    #[arg(long)]
    pub thres: Option<f64>,

    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,

    /// Peak learning rate.
    #[arg(long)]
    pub lr: Option<f64>,

    /// Images per optimizer step.
    #[arg(long)]
    pub batch_size: Option<usize>,

    /// Label groups; 0 trains a single head.
    #[arg(long)]
    pub groups: Option<usize>,

    /// Evaluate with the top-k protocol.
    #[arg(long, conflicts_with = "threshold")]
    pub topk: Option<usize>,

    /// Evaluate by thresholding scores at zero.
    #[arg(long)]
    pub threshold: bool,

    /// Output directory.
    #[arg(long, short, default_value = "out")]
    pub out: PathBuf,
}

/// Small synthetic problem that trains in seconds.
pub fn default_config() -> RunConfig {
    let grid = GridSpec::new(4, 5).expect("valid grid");
    let visual_dim = 16;
    let mut network = NetworkConfig::uniform(grid, visual_dim, 1, LayerConfig::new(2, 16, 0.1, 0.62));
    network.pos_dim = 2;
    network.key_dim = 8;
    network.activation = Activation::Ramp;
    let mut synth = SynthConfig::new(0, grid, 1000, 12);
    synth.visual_dim = visual_dim;
    RunConfig {
        data: DataConfig {
            synth: Some(synth),
            synth_test_images: 200,
            ..DataConfig::default()
        },
        train: TrainConfig {
            epochs: 20,
            batch_size: 32,
            max_lr: 1e-2,
            min_lr: 1e-4,
            early_stop_patience: 0,
            protocol: Protocol::Threshold,
            ..TrainConfig::default()
        },
        eval: EvalConfig {
            protocol: Protocol::Threshold,
        },
        network,
    }
}

impl RunArgs {
    pub fn protocol(&self) -> Option<Protocol> {
        if self.threshold {
            Some(Protocol::Threshold)
        } else {
            self.topk.map(Protocol::TopK)
        }
    }

    /// Base description with every override applied, validated.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => default_config(),
        };
        if self.synth && c.data.synth.is_none() {
            let mut s = SynthConfig::new(0, c.network.grid, 1000, 12);
            s.visual_dim = c.network.visual_dim;
            c.data.synth = Some(s);
            c.data.synth_test_images = 200;
        }
        if self.synth {
            c.data.features = None;
            c.data.labels = None;
            c.data.vocab = None;
            c.data.test_features = None;
            c.data.test_labels = None;
        }
        if let Some(seed) = self.seed {
            c.train.seed = seed;
            if let Some(s) = c.data.synth.as_mut() {
                s.seed = seed;
            }
        }
        let Some(template) = c.network.layers.first().cloned() else {
            bail!("the network needs at least one layer");
        };
        if let Some(d) = self.depth {
            if d == 0 {
                bail!("--depth must be at least 1");
            }
            c.network.layers = vec![template; d];
        }
        for l in &mut c.network.layers {
            if let Some(o) = self.orders {
                l.max_order = o;
            }
            if let Some(g) = self.gamma {
                l.gamma = g;
            }
            if let Some(t) = self.thres {
                l.thres = t;
            }
        }
        if let Some(e) = self.epochs {
            c.train.epochs = e;
        }
        if let Some(lr) = self.lr {
            c.train.max_lr = lr;
            c.train.min_lr = c.train.min_lr.min(lr);
        }
        if let Some(b) = self.batch_size {
            c.train.batch_size = b;
        }
        match self.groups {
            Some(0) => c.train.label_grouping = false,
            Some(g) => {
                c.train.label_grouping = true;
                c.train.groups = g;
            }
            None => {}
        }
        if let Some(p) = self.protocol() {
            c.eval.protocol = p;
            c.train.protocol = p;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Training data and the optional test set of a run.
pub fn load_data(c: &RunConfig) -> Result<(LabeledDataset, Option<LabeledDataset>)> {
    let d = &c.data;
    if let (Some(f), Some(l)) = (&d.features, &d.labels) {
        let train = load_dataset(f, l, d.vocab.as_deref())?;
        let test = match (&d.test_features, &d.test_labels) {
            (Some(f), Some(l)) => Some(load_dataset(f, l, d.vocab.as_deref())?),
            _ => None,
        };
        if let Some(t) = &test {
            if t.vocab != train.vocab {
                bail!("training and test vocabularies differ");
            }
        }
        return Ok((train, test));
    }
    let Some(s) = &d.synth else {
        bail!("the run names neither feature files nor synthetic data");
    };
    let set = synth_dataset(s)?;
    if d.synth_test_images == 0 {
        return Ok((set.dataset, None));
    }
    if d.synth_test_images >= s.n_images {
        bail!(
            "synth_test_images ({}) must be below n_images ({})",
            d.synth_test_images,
            s.n_images
        );
    }
    let (train, test) = set.split_at(s.n_images - d.synth_test_images);
    Ok((train, Some(test)))
}

pub fn create_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Writes the resolved description next to the outputs.
pub fn write_snapshot(dir: &Path, c: &RunConfig) -> Result<()> {
    let path = dir.join("config.toml");
    fs::write(&path, c.to_toml_string()?).with_context(|| format!("writing {}", path.display()))
}
