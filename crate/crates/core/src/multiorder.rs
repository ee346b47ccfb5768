//! Higher-order contextual features built by an attention-scored random
//! walk along one direction.
//!
//! For a target cell `x` the order-1 neighborhood comes from `P_c`. Order
//! `p ≥ 2` candidates are the first-order neighbors of the cells that
//! survived order `p − 1` (never `x` itself). Candidates are scored by
//! scaled query/key dot products, normalized by a single softmax into
//! transition probabilities, pruned by a relative threshold, and the
//! survivors' value projections are averaged with the renormalized
//! probabilities.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{softmax, PairList, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{Direction, NeighborhoodSystem};

/// Query, key and value projections for one (layer, order[, direction]).
/// Features are rows, so a projection is `φ·W`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

impl AttentionParams {
    pub fn new(wq: Tensor, wk: Tensor, wv: Tensor) -> Result<Self> {
        let d_in = wq.nrows();
        if wk.nrows() != d_in || wv.nrows() != d_in || wq.ncols() != wk.ncols() || wq.ncols() == 0 {
            return Err(Error::invalid(format!(
                "attention shapes disagree: wq {:?}, wk {:?}, wv {:?}",
                wq.dim(),
                wk.dim(),
                wv.dim()
            )));
        }
        Ok(AttentionParams { wq, wk, wv })
    }

    /// Entries drawn from `N(0, 1/d_in)`.
    pub fn random<R: Rng>(d_in: usize, d_key: usize, d_value: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (d_in as f64).sqrt();
        let normal = Normal::new(0.0, scale).expect("positive scale");
        let mut draw = |r, c| Array2::from_shape_simple_fn((r, c), || normal.sample(rng));
        AttentionParams {
            wq: draw(d_in, d_key),
            wk: draw(d_in, d_key),
            wv: draw(d_in, d_value),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.wq.nrows()
    }

    pub fn key_dim(&self) -> usize {
        self.wq.ncols()
    }

    pub fn value_dim(&self) -> usize {
        self.wv.ncols()
    }
}

/// Raw scaled dot products `⟨W_qᵀφ(x), W_kᵀφ(x'')⟩/√d` for every row of
/// `neighbors`. No normalization happens here; see [`transition_probs`].
pub fn attention_scores(target: ArrayView1<f64>, neighbors: ArrayView2<f64>, ap: &AttentionParams) -> Result<Vec<f64>> {
    if target.len() != ap.input_dim() || neighbors.ncols() != ap.input_dim() {
        return Err(Error::Shape {
            op: "attention_scores",
            lhs: (neighbors.nrows(), neighbors.ncols()),
            rhs: (ap.input_dim(), ap.key_dim()),
        });
    }
    let q = target.dot(&ap.wq);
    let keys = neighbors.dot(&ap.wk);
    let scale = 1.0 / (ap.key_dim() as f64).sqrt();
    Ok(keys.rows().into_iter().map(|k| scale * q.dot(&k)).collect())
}

/// Softmax of the scores: the walk's transition probabilities.
pub fn transition_probs(scores: &[f64]) -> Vec<f64> {
    softmax(scores)
}

/// Candidate cells of one (cell, direction, order) with their transition
/// probabilities. Indices are row indices into the feature matrix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContextEntry {
    pub indices: Vec<usize>,
    pub probs: Vec<f64>,
}

impl ContextEntry {
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }
}

/// Positions (within `probs`) of the cells whose max-normalized
/// probability reaches `thres`. The arg-max always qualifies.
pub fn surviving_positions(probs: &[f64], thres: f64) -> Vec<usize> {
    let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p / max >= thres)
        .map(|(i, _)| i)
        .collect()
}

/// Drops cells with `p / max p < thres` and renormalizes the survivors.
pub fn random_walk_filter(entry: &ContextEntry, thres: f64) -> Result<ContextEntry> {
    if !(0.0..=1.0).contains(&thres) {
        return Err(Error::invalid(format!("threshold must lie in [0, 1], got {thres}")));
    }
    if entry.indices.len() != entry.probs.len() {
        return Err(Error::invalid(
            "context entry indices and probabilities differ in length",
        ));
    }
    if entry.is_empty() {
        return Ok(entry.clone());
    }
    let keep = surviving_positions(&entry.probs, thres);
    if keep.len() == entry.len() {
        return Ok(entry.clone());
    }
    let total: f64 = keep.iter().map(|&i| entry.probs[i]).sum();
    Ok(ContextEntry {
        indices: keep.iter().map(|&i| entry.indices[i]).collect(),
        probs: keep.iter().map(|&i| entry.probs[i] / total).collect(),
    })
}

/// Surviving walk entries for every (direction, order, cell).
#[derive(Debug, Clone, PartialEq)]
pub struct MultiOrderContext {
    max_order: usize,
    /// `[direction][order − 1][row]`
    entries: Vec<Vec<Vec<ContextEntry>>>,
}

impl MultiOrderContext {
    pub(crate) fn from_entries(max_order: usize, entries: Vec<Vec<Vec<ContextEntry>>>) -> Self {
        MultiOrderContext { max_order, entries }
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    pub fn rows(&self) -> usize {
        self.entries.first().and_then(|d| d.first()).map_or(0, Vec::len)
    }

    pub fn entry(&self, row: usize, dir: Direction, order: usize) -> &ContextEntry {
        &self.entries[dir.index()][order - 1][row]
    }
}

/// Probability-weighted sum of value-projected neighbor features; zero
/// when the entry is empty.
pub fn order_context(
    row: usize,
    dir: Direction,
    order: usize,
    phis: &Tensor,
    ap: &AttentionParams,
    ctx: &MultiOrderContext,
) -> Result<Array1<f64>> {
    if order == 0 || order > ctx.max_order() || row >= ctx.rows() {
        return Err(Error::invalid(format!("no context entry for row {row}, order {order}")));
    }
    if phis.ncols() != ap.input_dim() {
        return Err(Error::Shape {
            op: "order_context",
            lhs: phis.dim(),
            rhs: ap.wv.dim(),
        });
    }
    let entry = ctx.entry(row, dir, order);
    let mut acc = Array1::zeros(ap.value_dim());
    for (&j, &p) in entry.indices.iter().zip(&entry.probs) {
        acc.scaled_add(p, &phis.row(j).dot(&ap.wv));
    }
    Ok(acc)
}

/// Attention parameters of one direction on a tape, one per order ≥ 2.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

/// Output of [`direction_orders_on_tape`].
#[derive(Debug, Clone)]
pub struct OrderFeatures {
    /// One `rows × d_v` node per order `2..=max_order`.
    pub features: Vec<Var>,
    /// Recorded entries `[order − 1][row]` including order 1.
    pub entries: Option<Vec<Vec<ContextEntry>>>,
}

/// Orders `2..=max_order` of one direction, differentiably.
///
/// `phis` stacks `rows / n` images of `n` cells. `first[x]` lists the
/// first-order neighbors of local cell `x`, with `first_probs[x]` their
/// order-1 weights (only recorded, not used in the features). The
/// survivor sets are selected from forward values and then held fixed;
/// gradients flow through the scores, probabilities and values of the
/// survivors.
#[allow(clippy::too_many_arguments)]
pub fn direction_orders_on_tape(
    tape: &mut Tape,
    phis: Var,
    n: usize,
    first: &[Vec<usize>],
    first_probs: &[Vec<f64>],
    attention: &[AttentionVars],
    max_order: usize,
    thres: f64,
    record: bool,
) -> Result<OrderFeatures> {
    if max_order == 0 {
        return Err(Error::invalid("max_order must be at least 1"));
    }
    if !(0.0..=1.0).contains(&thres) {
        return Err(Error::invalid(format!("threshold must lie in [0, 1], got {thres}")));
    }
    if attention.len() + 1 < max_order {
        return Err(Error::invalid(format!(
            "{} attention parameter sets for max_order {max_order}",
            attention.len()
        )));
    }
    let rows = tape.shape(phis).0;
    if n == 0 || !rows.is_multiple_of(n) || first.len() != n || first_probs.len() != n {
        return Err(Error::invalid(format!(
            "neighborhood lists cover {} cells, feature rows {rows}, cells per image {n}",
            first.len()
        )));
    }

    let mut survivors: Vec<Vec<usize>> = (0..rows)
        .map(|r| {
            let base = r - r % n;
            first[r % n].iter().map(|&y| base + y).collect()
        })
        .collect();
    let mut entries = record.then(|| {
        vec![(0..rows)
            .map(|r| ContextEntry {
                indices: survivors[r].clone(),
                probs: first_probs[r % n].clone(),
            })
            .collect::<Vec<_>>()]
    });

    let mut features = Vec::with_capacity(max_order.saturating_sub(1));
    for order in 2..=max_order {
        let ap = attention[order - 2];
        let d_value = tape.shape(ap.wv).1;
        let candidates: Vec<Vec<usize>> = (0..rows)
            .map(|r| {
                let base = r - r % n;
                let mut c: Vec<usize> = survivors[r]
                    .iter()
                    .flat_map(|&y| first[y % n].iter().map(move |&z| base + z))
                    .filter(|&z| z != r)
                    .collect();
                c.sort_unstable();
                c.dedup();
                c
            })
            .collect();

        if candidates.iter().all(Vec::is_empty) {
            features.push(tape.leaf(Array2::zeros((rows, d_value))));
            survivors = candidates;
            if let Some(e) = entries.as_mut() {
                e.push(vec![ContextEntry::default(); rows]);
            }
            continue;
        }

        let cand_pairs = Arc::new(PairList::from_groups(&candidates));
        let needs_attention = candidates.iter().any(|c| c.len() > 1);
        let (kept, weights) = if needs_attention {
            let scale = 1.0 / (tape.shape(ap.wq).1 as f64).sqrt();
            let q = tape.matmul(phis, ap.wq)?;
            let k = tape.matmul(phis, ap.wk)?;
            let scores = tape.pair_dots(q, k, cand_pairs.clone(), scale)?;
            let probs = tape.segment_softmax(scores, cand_pairs.clone())?;
            let pv = tape.value(probs);
            let kept: Vec<Vec<usize>> = (0..rows)
                .map(|r| {
                    let range = cand_pairs.range(r);
                    let local: Vec<f64> = range.clone().map(|j| pv[[j, 0]]).collect();
                    surviving_positions(&local, thres)
                        .into_iter()
                        .map(|i| candidates[r][i])
                        .collect()
                })
                .collect();
            let pruned = kept.iter().zip(&candidates).any(|(k, c)| k.len() != c.len());
            if pruned {
                let kept_pairs = Arc::new(PairList::from_groups(&kept));
                let scores = tape.pair_dots(q, k, kept_pairs.clone(), scale)?;
                let probs = tape.segment_softmax(scores, kept_pairs)?;
                (kept, probs)
            } else {
                (kept, probs)
            }
        } else {
            let ones = tape.leaf(Array2::ones((cand_pairs.len(), 1)));
            (candidates, ones)
        };

        let pairs = Arc::new(PairList::from_groups(&kept));
        let values = tape.matmul(phis, ap.wv)?;
        features.push(tape.weighted_gather(values, weights, pairs.clone())?);

        if let Some(e) = entries.as_mut() {
            let wv = tape.value(weights);
            e.push(
                (0..rows)
                    .map(|r| ContextEntry {
                        indices: kept[r].clone(),
                        probs: pairs.range(r).map(|j| wv[[j, 0]]).collect(),
                    })
                    .collect(),
            );
        }
        survivors = kept;
    }
    Ok(OrderFeatures { features, entries })
}

/// Order-1 weights of a grid neighborhood, normalized per cell for
/// reporting: `|w| / Σ|w|`, uniform when all weights vanish.
pub fn first_order_probs(first: &[Vec<usize>], weights: &[Vec<f64>]) -> Vec<Vec<f64>> {
    first
        .iter()
        .zip(weights)
        .map(|(set, w)| {
            let total: f64 = w.iter().map(|x| x.abs()).sum();
            if set.is_empty() {
                Vec::new()
            } else if total > 0.0 {
                w.iter().map(|x| x.abs() / total).collect()
            } else {
                vec![1.0 / set.len() as f64; set.len()]
            }
        })
        .collect()
}

fn grid_first_order(ns: &NeighborhoodSystem, dir: Direction) -> (Vec<Vec<usize>>, Vec<Vec<f64>>) {
    let w = ns.weights(dir);
    let first: Vec<Vec<usize>> = ns.links(dir).iter().map(|l| l.iter().copied().collect()).collect();
    let weights: Vec<Vec<f64>> = ns
        .links(dir)
        .iter()
        .enumerate()
        .map(|(x, l)| l.iter().map(|_| w[[x, 0]]).collect())
        .collect();
    let probs = first_order_probs(&first, &weights);
    (first, probs)
}

/// Builds the surviving walk entries for general first-order sets
/// (`first[dir][cell]`). `attention[order − 2]` holds either one shared
/// parameter set or one per direction.
pub fn build_multiorder_general(
    phis: &Tensor,
    first: &[Vec<Vec<usize>>],
    first_probs: &[Vec<Vec<f64>>],
    attention: &[Vec<AttentionParams>],
    max_order: usize,
    thres: f64,
) -> Result<MultiOrderContext> {
    let n = phis.nrows();
    let mut tape = Tape::new();
    let x = tape.leaf(phis.clone());
    let mut entries = Vec::with_capacity(first.len());
    for (d, (dir_first, dir_probs)) in first.iter().zip(first_probs).enumerate() {
        let vars: Vec<AttentionVars> = attention
            .iter()
            .take(max_order.saturating_sub(1))
            .map(|per_dir| {
                let ap = if per_dir.len() == 1 { &per_dir[0] } else { &per_dir[d] };
                AttentionVars {
                    wq: tape.leaf(ap.wq.clone()),
                    wk: tape.leaf(ap.wk.clone()),
                    wv: tape.leaf(ap.wv.clone()),
                }
            })
            .collect();
        let out = direction_orders_on_tape(&mut tape, x, n, dir_first, dir_probs, &vars, max_order, thres, true)?;
        entries.push(out.entries.expect("recorded"));
    }
    Ok(MultiOrderContext { max_order, entries })
}

/// Surviving walk entries of one image on the grid of `ns`.
pub fn build_multiorder(
    phis: &Tensor,
    ns: &NeighborhoodSystem,
    attention: &[Vec<AttentionParams>],
    max_order: usize,
    thres: f64,
) -> Result<MultiOrderContext> {
    if phis.nrows() != ns.grid().n() {
        return Err(Error::invalid(format!(
            "feature matrix has {} rows for a grid of {} cells",
            phis.nrows(),
            ns.grid().n()
        )));
    }
    let (first, probs): (Vec<_>, Vec<_>) = Direction::ALL.iter().map(|&d| grid_first_order(ns, d)).unzip();
    build_multiorder_general(phis, &first, &probs, attention, max_order, thres)
}
