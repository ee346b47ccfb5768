//! The unfolded multi-order context-aware kernel network.
//!
//! Layer `t` maps the cell features `Φ⁽ᵗ⁾` (one row per cell) to
//!
//! ```text
//! pre = ( Φ⁽ᵗ⁾ ‖ √γ·P_1 Φ_1⁽ᵗ⁾ ‖ … ‖ √γ·P_C Φ_C⁽ᵗ⁾ )
//! Φ⁽ᵗ⁺¹⁾ = act( pre · C_t )
//! ```
//!
//! where the direction block `Φ_c⁽ᵗ⁾` concatenates the order-1 neighbor
//! features with the order-2.. random-walk features, `C_t` is the per-cell
//! (1×1 convolution) projection and `act` is the identity unless the ramp
//! is enabled. Images are pooled with learned per-cell weights and scored
//! by one linear head per label group.
//!
//! On the grid each `P_c` row has a single support entry, so `P_c` acts on
//! row `x` as a move to the neighbor followed by a scale by `w_c[x]`. The
//! order-2.. features are already indexed by the target cell (they
//! aggregate `N_c^(p)(x)`), so they only receive the scale.

use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{positional_encoding, Direction, GridSpec, NeighborhoodSystem};
use crate::kernel::spectral_rescale;
use crate::multiorder::{
    direction_orders_on_tape, first_order_probs, AttentionParams, AttentionVars, MultiOrderContext,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Identity,
    Ramp,
}

/// How the layer projection `C_t` is laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    /// One map over the whole stacked vector.
    #[default]
    Stacked,
    /// One map per direction block (plus one for the identity block); the
    /// projected pieces are concatenated.
    PerDirection,
}

/// First block of each layer's stacked output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentityBlock {
    /// The layer input `Φ⁽ᵗ⁾`.
    #[default]
    Input,
    /// The network input `Φ⁽⁰⁾`, as in the first-order map recursion.
    Base,
}

fn default_true() -> bool {
    true
}

fn default_pos_dim() -> usize {
    16
}

fn default_key_dim() -> usize {
    64
}

fn default_rho() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    /// 1 = first order only, 2 = second-order context, 3 = third-order.
    pub max_order: usize,
    pub d_out: usize,
    pub gamma: f64,
    pub thres: f64,
    /// `false` bypasses `C_t`.
    #[serde(default = "default_true")]
    pub project: bool,
}

impl LayerConfig {
    pub fn new(max_order: usize, d_out: usize, gamma: f64, thres: f64) -> Self {
        LayerConfig {
            max_order,
            d_out,
            gamma,
            thres,
            project: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub grid: GridSpec,
    pub visual_dim: usize,
    /// Positional encoding width; 0 disables it.
    #[serde(default = "default_pos_dim")]
    pub pos_dim: usize,
    #[serde(default = "default_key_dim")]
    pub key_dim: usize,
    pub layers: Vec<LayerConfig>,
    #[serde(default)]
    pub share_attention: bool,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub projection: ProjectionMode,
    #[serde(default)]
    pub identity_block: IdentityBlock,
    /// Contraction margin enforced on `{P_c}`.
    #[serde(default = "default_rho")]
    pub rho: f64,
}

impl NetworkConfig {
    /// `depth` identical layers.
    pub fn uniform(grid: GridSpec, visual_dim: usize, depth: usize, layer: LayerConfig) -> Self {
        NetworkConfig {
            grid,
            visual_dim,
            pos_dim: default_pos_dim(),
            key_dim: default_key_dim(),
            layers: vec![layer; depth],
            share_attention: false,
            activation: Activation::Identity,
            projection: ProjectionMode::Stacked,
            identity_block: IdentityBlock::Input,
            rho: default_rho(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.visual_dim == 0 {
            return bad("visual_dim must be positive".into());
        }
        if !self.pos_dim.is_multiple_of(2) {
            return bad(format!("pos_dim must be even, got {}", self.pos_dim));
        }
        if self.key_dim == 0 {
            return bad("key_dim must be positive".into());
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad(format!("rho must lie in (0, 1), got {}", self.rho));
        }
        for (t, l) in self.layers.iter().enumerate() {
            if l.max_order == 0 || l.d_out == 0 {
                return bad(format!("layer {t}: max_order and d_out must be at least 1"));
            }
            if !(l.gamma >= 0.0 && l.gamma.is_finite()) {
                return bad(format!("layer {t}: gamma must be finite and >= 0"));
            }
            if !(0.0..=1.0).contains(&l.thres) {
                return bad(format!("layer {t}: thres must lie in [0, 1]"));
            }
            if l.project && self.projection == ProjectionMode::PerDirection && l.d_out <= Direction::COUNT {
                return bad(format!(
                    "layer {t}: per-direction projection needs d_out > {}",
                    Direction::COUNT
                ));
            }
        }
        Ok(())
    }

    /// Width of the network input: visual plus positional.
    pub fn d0(&self) -> usize {
        self.visual_dim + self.pos_dim
    }

    pub fn layer_input_width(&self, t: usize) -> usize {
        if t == 0 {
            self.d0()
        } else {
            self.layer_output_width(t - 1)
        }
    }

    fn identity_width(&self, t: usize) -> usize {
        match self.identity_block {
            IdentityBlock::Input => self.layer_input_width(t),
            IdentityBlock::Base => self.d0(),
        }
    }

    /// Width of one direction block: every order contributes `d_in`.
    pub fn direction_block_width(&self, t: usize) -> usize {
        self.layers[t].max_order * self.layer_input_width(t)
    }

    /// `d_id + C·Σ_p d_v(p)`.
    pub fn pre_projection_width(&self, t: usize) -> usize {
        self.identity_width(t) + Direction::COUNT * self.direction_block_width(t)
    }

    pub fn layer_output_width(&self, t: usize) -> usize {
        let l = &self.layers[t];
        if l.project {
            l.d_out
        } else {
            self.pre_projection_width(t)
        }
    }

    /// Embedding width.
    pub fn output_width(&self) -> usize {
        if self.layers.is_empty() {
            self.d0()
        } else {
            self.layer_output_width(self.layers.len() - 1)
        }
    }

    /// Largest γ over the layers; governs the contraction constraint.
    pub fn max_gamma(&self) -> f64 {
        self.layers.iter().map(|l| l.gamma).fold(0.0, f64::max)
    }

    fn attention_slots(&self) -> usize {
        if self.share_attention {
            1
        } else {
            Direction::COUNT
        }
    }

    /// Per-direction projection piece widths `(identity, each direction)`.
    fn split_widths(&self, t: usize) -> (usize, usize) {
        let d_out = self.layers[t].d_out;
        let r = d_out / (Direction::COUNT + 1);
        (d_out - Direction::COUNT * r, r)
    }

    /// Names and shapes of every learnable tensor, in storage order.
    pub fn parameter_shapes(&self, group_sizes: &[usize]) -> Vec<(String, (usize, usize))> {
        let n = self.grid.n();
        let mut out = vec![
            ("input.shift".to_string(), (1, self.visual_dim)),
            ("input.scale".to_string(), (1, self.visual_dim)),
        ];
        for d in Direction::ALL {
            out.push((format!("neighborhood.{d}"), (n, 1)));
        }
        for (t, l) in self.layers.iter().enumerate() {
            let d_in = self.layer_input_width(t);
            for p in 2..=l.max_order {
                for slot in 0..self.attention_slots() {
                    let tag = if self.share_attention {
                        "shared".to_string()
                    } else {
                        Direction::ALL[slot].to_string()
                    };
                    out.push((format!("layer{t}.order{p}.{tag}.wq"), (d_in, self.key_dim)));
                    out.push((format!("layer{t}.order{p}.{tag}.wk"), (d_in, self.key_dim)));
                    out.push((format!("layer{t}.order{p}.{tag}.wv"), (d_in, d_in)));
                }
            }
            if l.project {
                match self.projection {
                    ProjectionMode::Stacked => {
                        out.push((format!("layer{t}.projection"), (self.pre_projection_width(t), l.d_out)));
                    }
                    ProjectionMode::PerDirection => {
                        let (r0, r) = self.split_widths(t);
                        out.push((format!("layer{t}.projection.identity"), (self.identity_width(t), r0)));
                        for d in Direction::ALL {
                            out.push((format!("layer{t}.projection.{d}"), (self.direction_block_width(t), r)));
                        }
                    }
                }
            }
        }
        out.push(("pool".to_string(), (n, 1)));
        for (g, &size) in group_sizes.iter().enumerate() {
            out.push((format!("head{g}"), (self.output_width(), size)));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerLayout {
    /// `[order − 2][slot] → (wq, wk, wv)`
    attention: Vec<Vec<[usize; 3]>>,
    projection: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    /// Fixed per-channel shift and scale of the visual features.
    input: [usize; 2],
    neighborhood: Vec<usize>,
    layers: Vec<LayerLayout>,
    pool: usize,
    heads: Vec<usize>,
}

impl Layout {
    fn build(config: &NetworkConfig, group_count: usize) -> Layout {
        let mut next = 0usize;
        let mut take = || {
            next += 1;
            next - 1
        };
        let input = [take(), take()];
        let neighborhood = (0..Direction::COUNT).map(|_| take()).collect();
        let mut layers = Vec::new();
        for l in &config.layers {
            let attention = (2..=l.max_order)
                .map(|_| {
                    (0..config.attention_slots())
                        .map(|_| [take(), take(), take()])
                        .collect()
                })
                .collect();
            let projection = if !l.project {
                Vec::new()
            } else {
                match config.projection {
                    ProjectionMode::Stacked => vec![take()],
                    ProjectionMode::PerDirection => (0..=Direction::COUNT).map(|_| take()).collect(),
                }
            };
            layers.push(LayerLayout { attention, projection });
        }
        let pool = take();
        let heads = (0..group_count).map(|_| take()).collect();
        Layout {
            input,
            neighborhood,
            layers,
            pool,
            heads,
        }
    }
}

/// Every learnable tensor of a model, stored flat in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: NetworkConfig,
    group_sizes: Vec<usize>,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    layout: Layout,
}

impl ModelParams {
    /// Fresh parameters: identity input normalization, neighborhood weights
    /// equal to the masks (then rescaled to the contraction margin), pooling
    /// weights `1/n`, and `N(0, 1/fan_in)` entries everywhere else.
    pub fn init(config: &NetworkConfig, group_sizes: &[usize], seed: u64) -> Result<Self> {
        config.validate()?;
        let shapes = config.parameter_shapes(group_sizes);
        let layout = Layout::build(config, group_sizes.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ns = NeighborhoodSystem::init(&config.grid);
        let n = config.grid.n();
        let mut tensors = Vec::with_capacity(shapes.len());
        for (i, (_, (r, c))) in shapes.iter().enumerate() {
            let t = if let Some(d) = layout.neighborhood.iter().position(|&k| k == i) {
                ns.weights(Direction::ALL[d]).clone()
            } else if i == layout.pool {
                Array2::from_elem((n, 1), 1.0 / n as f64)
            } else if i == layout.input[0] {
                Array2::zeros((*r, *c))
            } else if i == layout.input[1] {
                Array2::ones((*r, *c))
            } else {
                let normal = Normal::new(0.0, 1.0 / (*r as f64).sqrt()).expect("positive scale");
                Array2::from_shape_simple_fn((*r, *c), || normal.sample(&mut rng))
            };
            tensors.push(t);
        }
        let mut params = ModelParams {
            config: config.clone(),
            group_sizes: group_sizes.to_vec(),
            names: shapes.into_iter().map(|(n, _)| n).collect(),
            tensors,
            layout,
        };
        params.constrain()?;
        Ok(params)
    }

    /// Rebuilds parameters from named tensors, checking every name and shape
    /// against the configuration.
    pub fn from_named(config: &NetworkConfig, group_sizes: &[usize], named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let shapes = config.parameter_shapes(group_sizes);
        if named.len() != shapes.len() {
            let missing = shapes
                .iter()
                .find(|(n, _)| !named.iter().any(|(m, _)| m == n))
                .map(|(n, _)| n.clone())
                .or_else(|| {
                    named
                        .iter()
                        .find(|(m, _)| !shapes.iter().any(|(n, _)| n == m))
                        .map(|(m, _)| m.clone())
                })
                .unwrap_or_default();
            return Err(Error::Config(format!(
                "expected {} tensors, found {} (first mismatch: {missing:?})",
                shapes.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(shapes.len());
        for ((name, shape), (got_name, t)) in shapes.iter().zip(named) {
            if *name != got_name {
                return Err(Error::Config(format!("expected tensor {name:?}, found {got_name:?}")));
            }
            if t.dim() != *shape {
                return Err(Error::TensorShape {
                    name: got_name,
                    expected: *shape,
                    found: t.dim(),
                });
            }
            tensors.push(t);
        }
        Ok(ModelParams {
            config: config.clone(),
            group_sizes: group_sizes.to_vec(),
            names: shapes.into_iter().map(|(n, _)| n).collect(),
            tensors,
            layout: Layout::build(config, group_sizes.len()),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn group_sizes(&self) -> &[usize] {
        &self.group_sizes
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Whether tensor `i` is a neighborhood or pooling weight (no weight
    /// decay applies to those).
    pub fn is_structural(&self, i: usize) -> bool {
        self.layout.neighborhood.contains(&i) || i == self.layout.pool
    }

    /// Whether tensor `i` is held fixed during training.
    pub fn is_frozen(&self, i: usize) -> bool {
        self.layout.input.contains(&i)
    }

    /// Per-channel `(shift, scale)` applied as `(x − shift)·scale` to the
    /// visual features before anything else.
    pub fn input_normalization(&self) -> (&Tensor, &Tensor) {
        (&self.tensors[self.layout.input[0]], &self.tensors[self.layout.input[1]])
    }

    pub fn set_input_normalization(&mut self, shift: &[f64], scale: &[f64]) -> Result<()> {
        let d = self.config.visual_dim;
        if shift.len() != d || scale.len() != d {
            return Err(Error::invalid(format!(
                "normalization has {} shifts and {} scales for {d} channels",
                shift.len(),
                scale.len()
            )));
        }
        if shift.iter().chain(scale).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                op: "set_input_normalization",
            });
        }
        let [a, b] = self.layout.input;
        self.tensors[a] = Array2::from_shape_vec((1, d), shift.to_vec()).expect("sized");
        self.tensors[b] = Array2::from_shape_vec((1, d), scale.to_vec()).expect("sized");
        Ok(())
    }

    fn normalize_input(&self, input: &mut Tensor) {
        let (shift, scale) = self.input_normalization();
        let d = self.config.visual_dim;
        for mut row in input.rows_mut() {
            for j in 0..d {
                row[j] = (row[j] - shift[[0, j]]) * scale[[0, j]];
            }
        }
    }

    pub fn neighborhood(&self) -> NeighborhoodSystem {
        let w = self
            .layout
            .neighborhood
            .iter()
            .map(|&i| self.tensors[i].clone())
            .collect();
        NeighborhoodSystem::with_weights(&self.config.grid, w).expect("shapes fixed by layout")
    }

    pub fn set_neighborhood(&mut self, ns: &NeighborhoodSystem) {
        for (d, &i) in self.layout.neighborhood.iter().enumerate() {
            self.tensors[i] = ns.weights(Direction::ALL[d]).clone();
        }
    }

    /// Attention parameters of `(layer, order, direction)`.
    pub fn attention(&self, layer: usize, order: usize, dir: Direction) -> AttentionParams {
        let slots = &self.layout.layers[layer].attention[order - 2];
        let [q, k, v] = if slots.len() == 1 { slots[0] } else { slots[dir.index()] };
        AttentionParams {
            wq: self.tensors[q].clone(),
            wk: self.tensors[k].clone(),
            wv: self.tensors[v].clone(),
        }
    }

    pub fn pool_weights(&self) -> &Tensor {
        &self.tensors[self.layout.pool]
    }

    pub fn pool_weights_mut(&mut self) -> &mut Tensor {
        &mut self.tensors[self.layout.pool]
    }

    pub fn head(&self, g: usize) -> &Tensor {
        &self.tensors[self.layout.heads[g]]
    }

    pub fn head_mut(&mut self, g: usize) -> &mut Tensor {
        let i = self.layout.heads[g];
        &mut self.tensors[i]
    }

    pub fn head_indices(&self) -> &[usize] {
        &self.layout.heads
    }

    pub fn projection_mut(&mut self, layer: usize) -> Vec<&mut Tensor> {
        let idx = self.layout.layers[layer].projection.clone();
        self.tensors
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| idx.contains(i))
            .map(|(_, t)| t)
            .collect()
    }

    /// Re-imposes the structural constraints after an update: zero weights
    /// off the grid and `γ_max·Σ_c‖P_c‖₂² ≤ ρ`.
    pub fn constrain(&mut self) -> Result<()> {
        let ns = self.neighborhood();
        let gamma = self.config.max_gamma();
        let ns = spectral_rescale(&ns, gamma, self.config.rho)?;
        self.set_neighborhood(&ns);
        Ok(())
    }

    /// Registers every tensor as a leaf, in storage order.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Frobenius norm of every tensor, for diagnostics.
    pub fn norms(&self) -> Vec<(String, f64)> {
        self.named()
            .map(|(n, t)| (n.to_string(), t.iter().map(|x| x * x).sum::<f64>().sqrt()))
            .collect()
    }
}

/// Per-layer walk contexts recorded during a forward pass.
pub type LayerContexts = Vec<MultiOrderContext>;

/// Nodes produced by [`forward_batch`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Final cell features, `B·n × d_T`.
    pub cells: Var,
    /// Pooled image embeddings, `B × d_T`.
    pub embeddings: Var,
    /// Group-head scores, `B × Σ_g |g|` in head order.
    pub logits: Var,
    /// Walk contexts per layer when recording was requested.
    pub contexts: Option<LayerContexts>,
    /// Pre-projection widths per layer (bookkeeping).
    pub pre_widths: Vec<usize>,
}

/// Visual features of a batch with the positional encoding appended.
pub fn network_input(config: &NetworkConfig, features: &[&Tensor]) -> Result<Tensor> {
    let n = config.grid.n();
    for (b, f) in features.iter().enumerate() {
        if f.dim() != (n, config.visual_dim) {
            return Err(Error::invalid(format!(
                "image {b}: expected {n} cells x {} features, got {:?}",
                config.visual_dim,
                f.dim()
            )));
        }
    }
    let pe = if config.pos_dim > 0 {
        Some(positional_encoding(&config.grid, config.pos_dim)?.table)
    } else {
        None
    };
    let mut out = Array2::zeros((n * features.len(), config.d0()));
    for (b, f) in features.iter().enumerate() {
        let mut block = out.slice_mut(ndarray::s![b * n..(b + 1) * n, ..]);
        block.slice_mut(ndarray::s![.., ..config.visual_dim]).assign(*f);
        if let Some(pe) = &pe {
            block.slice_mut(ndarray::s![.., config.visual_dim..]).assign(pe);
        }
    }
    Ok(out)
}

struct LayerCtx<'a> {
    params: &'a ModelParams,
    vars: &'a [Var],
    images: usize,
    record: bool,
}

fn tiled_links(ns: &NeighborhoodSystem, dir: Direction, images: usize) -> Arc<Vec<Option<usize>>> {
    let n = ns.grid().n();
    let links = ns.links(dir);
    Arc::new((0..images * n).map(|r| links[r % n].map(|y| (r - r % n) + y)).collect())
}

/// Direction block of layer `t` before the `P_c` scale: the neighbor's
/// features (order 1) followed by the order-2.. walk features.
pub fn direction_block(
    tape: &mut Tape,
    params: &ModelParams,
    vars: &[Var],
    t: usize,
    dir: Direction,
    phi: Var,
    record: bool,
) -> Result<(Var, Option<Vec<Vec<crate::multiorder::ContextEntry>>>)> {
    let ctx = LayerCtx {
        params,
        vars,
        images: tape.shape(phi).0 / params.config.grid.n(),
        record,
    };
    direction_block_inner(tape, &ctx, t, dir, phi)
}

fn direction_block_inner(
    tape: &mut Tape,
    ctx: &LayerCtx<'_>,
    t: usize,
    dir: Direction,
    phi: Var,
) -> Result<(Var, Option<Vec<Vec<crate::multiorder::ContextEntry>>>)> {
    let config = &ctx.params.config;
    let layer = &config.layers[t];
    let ns = ctx.params.neighborhood();
    let n = config.grid.n();
    let order1 = tape.gather_rows(phi, tiled_links(&ns, dir, ctx.images))?;
    let first: Vec<Vec<usize>> = ns.links(dir).iter().map(|l| l.iter().copied().collect()).collect();
    let w = ns.weights(dir);
    let wlists: Vec<Vec<f64>> = ns
        .links(dir)
        .iter()
        .enumerate()
        .map(|(x, l)| l.iter().map(|_| w[[x, 0]]).collect())
        .collect();
    let first_probs = first_order_probs(&first, &wlists);
    let lay = &ctx.params.layout.layers[t];
    let attention: Vec<AttentionVars> = lay
        .attention
        .iter()
        .map(|slots| {
            let [q, k, v] = if slots.len() == 1 { slots[0] } else { slots[dir.index()] };
            AttentionVars {
                wq: ctx.vars[q],
                wk: ctx.vars[k],
                wv: ctx.vars[v],
            }
        })
        .collect();
    let orders = direction_orders_on_tape(
        tape,
        phi,
        n,
        &first,
        &first_probs,
        &attention,
        layer.max_order,
        layer.thres,
        ctx.record,
    )?;
    let mut parts = vec![order1];
    parts.extend(orders.features);
    Ok((tape.concat_cols(&parts)?, orders.entries))
}

/// Layer `t`: stacking, projection and activation.
pub fn layer_forward(
    tape: &mut Tape,
    params: &ModelParams,
    vars: &[Var],
    t: usize,
    phi: Var,
    phi0: Var,
    record: bool,
) -> Result<(Var, usize, Option<MultiOrderContext>)> {
    let config = &params.config;
    let d_in = config.layer_input_width(t);
    if tape.shape(phi).1 != d_in {
        return Err(Error::Shape {
            op: "layer_forward",
            lhs: tape.shape(phi),
            rhs: (tape.shape(phi).0, d_in),
        });
    }
    let n = config.grid.n();
    let rows = tape.shape(phi).0;
    let ctx = LayerCtx {
        params,
        vars,
        images: rows / n,
        record,
    };
    let layer = &config.layers[t];
    let lay = &params.layout.layers[t];
    let identity = match config.identity_block {
        IdentityBlock::Input => phi,
        IdentityBlock::Base => phi0,
    };
    let root = layer.gamma.sqrt();
    let block_width = config.direction_block_width(t);

    // With γ = 0 every direction block is exactly zero, as are the
    // gradients flowing into it; skip building it.
    let context_off = layer.gamma == 0.0;
    let mut blocks = Vec::with_capacity(Direction::COUNT);
    let mut recorded = Vec::new();
    for dir in Direction::ALL {
        if context_off {
            blocks.push(None);
            continue;
        }
        let (block, entries) = direction_block_inner(tape, &ctx, t, dir, phi)?;
        if let Some(e) = entries {
            recorded.push(e);
        }
        let scaled = tape.scale_rows(block, vars[params.layout.neighborhood[dir.index()]])?;
        blocks.push(Some(tape.scale(scaled, root)?));
    }
    let pre_width = config.pre_projection_width(t);

    let out = match (layer.project, config.projection) {
        (true, ProjectionMode::PerDirection) => {
            let (_, r) = config.split_widths(t);
            let mut pieces = vec![tape.matmul(identity, vars[lay.projection[0]])?];
            for (c, b) in blocks.iter().enumerate() {
                pieces.push(match b {
                    Some(b) => tape.matmul(*b, vars[lay.projection[c + 1]])?,
                    None => tape.leaf(Array2::zeros((rows, r))),
                });
            }
            tape.concat_cols(&pieces)?
        }
        (project, _) => {
            let mut pieces = vec![identity];
            if context_off {
                pieces.push(tape.leaf(Array2::zeros((rows, Direction::COUNT * block_width))));
            } else {
                pieces.extend(blocks.iter().map(|b| b.expect("context on")));
            }
            let pre = tape.concat_cols(&pieces)?;
            debug_assert_eq!(tape.shape(pre).1, pre_width);
            if project {
                tape.matmul(pre, vars[lay.projection[0]])?
            } else {
                pre
            }
        }
    };
    let out = match config.activation {
        Activation::Identity => out,
        Activation::Ramp => tape.relu(out)?,
    };
    let contexts = if record {
        let entries = if context_off {
            Direction::ALL
                .iter()
                .map(|_| vec![vec![Default::default(); rows]; layer.max_order])
                .collect()
        } else {
            recorded
        };
        Some(MultiOrderContext::from_entries(layer.max_order, entries))
    } else {
        None
    };
    Ok((out, pre_width, contexts))
}

/// Full forward pass over a batch of images.
pub fn forward_batch(
    tape: &mut Tape,
    params: &ModelParams,
    vars: &[Var],
    features: &[&Tensor],
    record: bool,
) -> Result<ForwardPass> {
    let config = &params.config;
    if features.is_empty() {
        return Err(Error::invalid("forward pass over an empty batch"));
    }
    let mut input = network_input(config, features)?;
    params.normalize_input(&mut input);
    let phi0 = tape.leaf(input);
    let mut phi = phi0;
    let mut contexts = record.then(Vec::new);
    let mut pre_widths = Vec::new();
    for t in 0..config.layers.len() {
        let (out, pre, ctx) = layer_forward(tape, params, vars, t, phi, phi0, record)?;
        phi = out;
        pre_widths.push(pre);
        if let (Some(all), Some(c)) = (contexts.as_mut(), ctx) {
            all.push(c);
        }
    }
    let embeddings = tape.cell_pool(phi, vars[params.layout.pool])?;
    let heads: Vec<Var> = params
        .layout
        .heads
        .iter()
        .map(|&h| tape.matmul(embeddings, vars[h]))
        .collect::<Result<_>>()?;
    let logits = if heads.is_empty() {
        tape.leaf(Array2::zeros((features.len(), 0)))
    } else {
        tape.concat_cols(&heads)?
    };
    Ok(ForwardPass {
        cells: phi,
        embeddings,
        logits,
        contexts,
        pre_widths,
    })
}

/// Aggregated embedding `Σ_i w_i φ̃(x_i)` of one image.
pub fn embed(params: &ModelParams, features: &Tensor) -> Result<Array1<f64>> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let fp = forward_batch(&mut tape, params, &vars, &[features], false)?;
    Ok(tape.value(fp.embeddings).row(0).to_owned())
}

/// Head scores of a batch, `B × Σ_g |g|`.
pub fn predict_logits(params: &ModelParams, features: &[&Tensor]) -> Result<Tensor> {
    // Intermediate checks are skipped; a non-finite value anywhere reaches
    // the logits.
    let mut tape = Tape::with_strict(false);
    let vars = params.register(&mut tape);
    let fp = forward_batch(&mut tape, params, &vars, features, false)?;
    let logits = tape.value(fp.logits);
    if !logits.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite { op: "predict_logits" });
    }
    Ok(logits.clone())
}

/// Image kernel: inner product of two embeddings.
pub fn image_kernel(a: &Array1<f64>, b: &Array1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "image_kernel",
            lhs: (1, a.len()),
            rhs: (1, b.len()),
        });
    }
    Ok(a.dot(b))
}

/// Gram matrix of image embeddings (rows of `embeddings`).
pub fn embedding_gram(embeddings: &Tensor) -> Tensor {
    embeddings.dot(&embeddings.t())
}

/// Norm of each cell's contribution `w_i φ̃(x_i)` to the embedding.
pub fn cell_impacts(params: &ModelParams, features: &Tensor) -> Result<(Vec<f64>, LayerContexts)> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let fp = forward_batch(&mut tape, params, &vars, &[features], true)?;
    let cells = tape.value(fp.cells);
    let w = params.pool_weights();
    let impacts = cells
        .axis_iter(Axis(0))
        .enumerate()
        .map(|(i, row)| (w[[i, 0]] * row.dot(&row).sqrt()).abs())
        .collect();
    Ok((impacts, fp.contexts.unwrap_or_default()))
}
