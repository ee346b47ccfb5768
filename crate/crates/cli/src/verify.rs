//! Self-contained numerical checks on random instances.

use anyhow::{bail, Result};
use clap::Args;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dmckn::autodiff::{check_gradients, Tape, Tensor, Var};
use dmckn::grid::{Direction, GridSpec, NeighborhoodSystem};
use dmckn::kernel::{explicit_map_step, gram_iterate, ContextMapState};
use dmckn::network::{Activation, LayerConfig, ModelParams, NetworkConfig};
use dmckn::training::{head_targets, loss_on_tape, sample_negatives, GroupPartition};

use crate::Status;

#[derive(Debug, Args)]
pub struct GramcheckArgs {
    /// Random instances to check.
    #[arg(long, default_value_t = 50)]
    pub instances: usize,

    /// Largest grid height.
    #[arg(long, default_value_t = 4)]
    pub max_rows: usize,

    /// Largest grid width.
    #[arg(long, default_value_t = 5)]
    pub max_cols: usize,

    /// Largest number of stacked images.
    #[arg(long, default_value_t = 2)]
    pub max_images: usize,

    /// Largest base feature width.
    #[arg(long, default_value_t = 6)]
    pub max_dim: usize,

    /// Largest number of unfolded layers.
    #[arg(long, default_value_t = 3)]
    pub max_layers: usize,

    /// Context weight γ of every instance.
    #[arg(long, default_value_t = 0.3)]
    pub gamma: f64,

    /// Seed of the first instance; instance i uses seed + i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Largest accepted error relative to max(1, max |K|).
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,

    /// Perturb one neighborhood weight on the Gram side only (a negative
    /// control; the check must then fail).
    #[arg(long, hide_short_help = true)]
    pub inject_fault: bool,
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

struct GramInstance {
    seed: u64,
    rows: usize,
    cols: usize,
    images: usize,
    dim: usize,
    layers: usize,
    error: f64,
}

fn gram_instance(a: &GramcheckArgs, seed: u64) -> Result<GramInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.random_range(1..=a.max_rows);
    let cols = rng.random_range(1..=a.max_cols);
    let images = rng.random_range(1..=a.max_images);
    let dim = rng.random_range(1..=a.max_dim);
    let layers = rng.random_range(1..=a.max_layers);
    let grid = GridSpec::new(rows, cols)?;
    let weights = (0..Direction::COUNT)
        .map(|_| random_matrix(&mut rng, grid.n(), 1))
        .collect();
    let ns = NeighborhoodSystem::with_weights(&grid, weights)?;
    let phi0 = random_matrix(&mut rng, grid.n() * images, dim);

    let mut state = ContextMapState::new(phi0.clone(), a.gamma)?;
    for _ in 0..layers {
        state = explicit_map_step(&state, &ns)?;
    }
    let mut gram_side = ns.clone();
    if a.inject_fault {
        if let Some(x) = (0..grid.n()).find(|&x| ns.links(Direction::Right)[x].is_some()) {
            gram_side.weights_mut(Direction::Right)[[x, 0]] += 0.25;
        } else if let Some(x) = (0..grid.n()).find(|&x| ns.links(Direction::Down)[x].is_some()) {
            gram_side.weights_mut(Direction::Down)[[x, 0]] += 0.25;
        }
    }
    let s = phi0.dot(&phi0.t());
    let k = gram_iterate(&s, &gram_side, a.gamma, layers)?;
    let map = state.gram();
    let scale = k.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    let error = map.iter().zip(&k).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale;
    Ok(GramInstance {
        seed,
        rows,
        cols,
        images,
        dim,
        layers,
        error,
    })
}

pub fn gramcheck(a: GramcheckArgs) -> Result<Status> {
    if a.instances == 0
        || a.max_rows == 0
        || a.max_cols == 0
        || a.max_images == 0
        || a.max_dim == 0
        || a.max_layers == 0
    {
        bail!("instance counts and size limits must be at least 1");
    }
    if a.gamma.is_nan() || a.gamma < 0.0 {
        bail!("--gamma must be >= 0");
    }
    let mut worst: Option<GramInstance> = None;
    for i in 0..a.instances {
        let inst = gram_instance(&a, a.seed.wrapping_add(i as u64))?;
        if worst.as_ref().is_none_or(|w| inst.error > w.error) {
            worst = Some(inst);
        }
    }
    let w = worst.expect("at least one instance");
    println!(
        "gramcheck: {} instances, max relative Gram error {:e}",
        a.instances, w.error
    );
    if w.error <= a.tol {
        return Ok(Status::Ok);
    }
    eprintln!(
        "FAILED: error {:e} > tol {:e}; worst instance seed {} grid {}x{} images {} dim {} layers {} gamma {}",
        w.error, a.tol, w.seed, w.rows, w.cols, w.images, w.dim, w.layers, a.gamma
    );
    Ok(Status::Failed)
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random networks to check.
    #[arg(long, default_value_t = 4)]
    pub instances: usize,

    /// Seed of the first instance; instance i uses seed + i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Grid height of every instance.
    #[arg(long, default_value_t = 2)]
    pub rows: usize,

    /// Grid width of every instance.
    #[arg(long, default_value_t = 2)]
    pub cols: usize,

    /// Layers of every instance.
    #[arg(long, default_value_t = 2)]
    pub depth: usize,

    /// Highest neighborhood order of every instance.
    #[arg(long, default_value_t = 2)]
    pub orders: usize,

    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,

    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

fn grad_instance(a: &GradcheckArgs, seed: u64) -> Result<(f64, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = GridSpec::new(a.rows, a.cols)?;
    let visual_dim = 3;
    let mut net = NetworkConfig::uniform(grid, visual_dim, a.depth, LayerConfig::new(a.orders, 3, 0.2, 0.5));
    net.pos_dim = 2;
    net.key_dim = 2;
    // Kinks of the ramp are measure-zero but a finite difference can
    // straddle one; the identity activation keeps the check exact.
    net.activation = Activation::Identity;
    let partition = GroupPartition::from_parts(4, vec![vec![0, 2], vec![1, 3]], vec![0.8, 1.5])?;
    let params = ModelParams::init(&net, &partition.group_sizes(), seed)?;
    let images: Vec<Tensor> = (0..2).map(|_| random_matrix(&mut rng, grid.n(), visual_dim)).collect();
    let refs: Vec<&Tensor> = images.iter().collect();
    let labels = Array2::from_shape_fn((2, 4), |_| if rng.random_bool(0.5) { 1.0 } else { -1.0 });
    let mask = sample_negatives(&labels, 1, seed);
    let (t, w) = head_targets(&partition, &labels, &mask);
    let report = check_gradients(
        |tape: &mut Tape, vars: &[Var]| {
            loss_on_tape(tape, &params, vars, &refs, t.clone(), w.clone(), 0.5).map(|(l, _)| l)
        },
        params.tensors(),
        a.step,
        a.tol,
    )?;
    let at = report
        .worst
        .map(|(p, r, c)| format!("{}[{r},{c}]", params.names()[p]))
        .unwrap_or_default();
    Ok((report.max_rel_error, at))
}

pub fn gradcheck(a: GradcheckArgs) -> Result<Status> {
    if a.instances == 0 {
        bail!("--instances must be at least 1");
    }
    if a.step.is_nan() || a.step <= 0.0 {
        bail!("--step must be positive");
    }
    let mut worst = (0.0f64, String::new(), a.seed);
    for i in 0..a.instances {
        let seed = a.seed.wrapping_add(i as u64);
        let (err, at) = grad_instance(&a, seed)?;
        if err >= worst.0 {
            worst = (err, at, seed);
        }
    }
    println!(
        "gradcheck: {} instances, max relative gradient error {:e}",
        a.instances, worst.0
    );
    if worst.0 <= a.tol {
        return Ok(Status::Ok);
    }
    eprintln!(
        "FAILED: error {:e} > tol {:e} at {} (instance seed {}, grid {}x{}, depth {}, orders {})",
        worst.0, a.tol, worst.1, worst.2, a.rows, a.cols, a.depth, a.orders
    );
    Ok(Status::Failed)
}
