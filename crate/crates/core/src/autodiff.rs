//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every value lives on a [`Tape`] as a node; operations append new nodes
//! that remember their inputs, so the tape order is already a topological
//! order. [`Tape::backward`] walks it in reverse and accumulates gradients
//! additively across fan-out.
//!
//! ```
//! use dmckn::autodiff::{Tape, Tensor};
//! use ndarray::array;
//!
//! let mut tape = Tape::new();
//! let a = tape.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
//! let loss = tape.sq_frobenius(a).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(&tape, a), array![[2.0, 4.0], [6.0, 8.0]]);
//! ```
//!
//! A tape is single-writer. Data-parallel evaluation uses one tape per
//! worker over read-only parameter snapshots and sums the gradients.

use std::ops::Range;
use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};

/// Dense row-major matrix. Column vectors are `n×1`, scalars `1×1`.
pub type Tensor = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Compressed list of `(target row, source row)` pairs grouped by target.
///
/// Pairs for target `i` occupy positions `offsets[i]..offsets[i + 1]`.
/// Used for neighborhood gathers, attention scores and segment softmax.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairList {
    offsets: Vec<usize>,
    sources: Vec<usize>,
}

impl PairList {
    pub fn from_groups<I, G>(groups: I) -> Self
    where
        I: IntoIterator<Item = G>,
        G: AsRef<[usize]>,
    {
        let mut offsets = vec![0];
        let mut sources = Vec::new();
        for g in groups {
            sources.extend_from_slice(g.as_ref());
            offsets.push(sources.len());
        }
        PairList { offsets, sources }
    }

    /// Number of target rows.
    pub fn targets(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Total number of pairs.
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn range(&self, target: usize) -> Range<usize> {
        self.offsets[target]..self.offsets[target + 1]
    }

    pub fn sources(&self) -> &[usize] {
        &self.sources
    }

    pub fn group(&self, target: usize) -> &[usize] {
        &self.sources[self.range(target)]
    }

    fn max_source(&self) -> Option<usize> {
        self.sources.iter().copied().max()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    RowSum(Var),
    Sum(Var),
    ElemMul(Var, Var),
    Sigmoid(Var),
    Relu(Var),
    RowSoftmax(Var),
    LogisticLoss {
        logits: Var,
        targets: Arc<Tensor>,
        weights: Arc<Tensor>,
    },
    SqFrobenius(Var),
    GatherRows {
        src: Var,
        index: Arc<Vec<Option<usize>>>,
    },
    ScaleRows {
        src: Var,
        scale: Var,
    },
    CellPool {
        src: Var,
        weights: Var,
    },
    PairDots {
        query: Var,
        key: Var,
        pairs: Arc<PairList>,
        scale: f64,
    },
    SegmentSoftmax {
        scores: Var,
        pairs: Arc<PairList>,
    },
    WeightedGather {
        values: Var,
        weights: Var,
        pairs: Arc<PairList>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation for one reverse pass.
#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    strict: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape(t: &Tensor) -> (usize, usize) {
    t.dim()
}

fn all_finite(t: &Tensor) -> bool {
    match t.as_slice_memory_order() {
        // Summing lets the compiler vectorize; NaN or Inf survives the sum.
        Some(s) => s.chunks(64).all(|c| (c.iter().map(|x| x * 0.0).sum::<f64>()) == 0.0),
        None => t.iter().all(|x| x.is_finite()),
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let mut out = xs.to_vec();
    softmax_in_place(&mut out);
    out
}

impl Tape {
    /// A tape in strict mode: every op checks its output for NaN/Inf.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            strict: true,
        }
    }

    pub fn with_strict(strict: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            strict,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if self.strict && !all_finite(&value) {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Inputs, parameters and constants all enter the tape as leaves.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(Error::Shape {
                op: "matmul",
                lhs: shape(av),
                rhs: shape(bv),
            });
        }
        let out = av.dot(bv);
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape { op, lhs: sa, rhs: sb });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a) * factor;
        self.push(out, Op::Scale(a, factor), "scale")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).t().to_owned();
        self.push(out, Op::Transpose(a), "transpose")
    }

    /// Stacks inputs vertically; all must share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows of zero inputs"))?;
        let cols = self.shape(*first).1;
        for p in parts {
            if self.shape(*p).1 != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.shape(*first),
                    rhs: self.shape(*p),
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("checked shapes");
        self.push(out, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    /// Stacks inputs horizontally; all must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols of zero inputs"))?;
        let rows = self.shape(*first).0;
        for p in parts {
            if self.shape(*p).0 != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.shape(*first),
                    rhs: self.shape(*p),
                });
            }
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let total: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let v = self.value(*p);
                match v.row(r).to_slice() {
                    Some(row) => data.extend_from_slice(row),
                    None => data.extend(v.row(r).iter().copied()),
                }
            }
        }
        let out = Array2::from_shape_vec((rows, total), data).expect("checked shapes");
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Row sums as an `n×1` column.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::RowSum(a), "row_sum")
    }

    /// Sum of all entries as a `1×1` scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), total), Op::Sum(a), "sum")
    }

    pub fn elementwise_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("elementwise_mul", a, b)?;
        let out = self.value(a) * self.value(b);
        self.push(out, Op::ElemMul(a, b), "elementwise_mul")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a), "sigmoid")
    }

    /// Ramp nonlinearity `max(x, 0)`.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(out, Op::Relu(a), "relu")
    }

    /// Softmax along each row, stabilized by subtracting the row maximum.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let slice = row.as_slice_mut().expect("standard layout");
            softmax_in_place(slice);
        }
        self.push(out, Op::RowSoftmax(a), "row_softmax")
    }

    /// `Σ w·(softplus(z) − t·z)`: weighted binary cross-entropy on logits `z`
    /// with targets `t ∈ [0, 1]`.
    pub fn logistic_loss(&mut self, logits: Var, targets: Tensor, weights: Tensor) -> Result<Var> {
        let z = self.value(logits);
        if targets.dim() != z.dim() || weights.dim() != z.dim() {
            return Err(Error::Shape {
                op: "logistic_loss",
                lhs: shape(z),
                rhs: if targets.dim() != z.dim() {
                    targets.dim()
                } else {
                    weights.dim()
                },
            });
        }
        let mut total = 0.0;
        Zip::from(z).and(&targets).and(&weights).for_each(|&z, &t, &w| {
            if w != 0.0 {
                total += w * (softplus(z) - t * z);
            }
        });
        self.push(
            Array2::from_elem((1, 1), total),
            Op::LogisticLoss {
                logits,
                targets: Arc::new(targets),
                weights: Arc::new(weights),
            },
            "logistic_loss",
        )
    }

    /// Squared Frobenius norm as a `1×1` scalar.
    pub fn sq_frobenius(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).iter().map(|x| x * x).sum();
        self.push(Array2::from_elem((1, 1), total), Op::SqFrobenius(a), "sq_frobenius")
    }

    /// Row `i` of the output is row `index[i]` of `src`, or zeros for `None`.
    pub fn gather_rows(&mut self, src: Var, index: Arc<Vec<Option<usize>>>) -> Result<Var> {
        let sv = self.value(src);
        let cols = sv.ncols();
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= sv.nrows()) {
            return Err(Error::invalid(format!(
                "gather_rows: index {bad} out of range for {} rows",
                sv.nrows()
            )));
        }
        let mut out = Array2::zeros((index.len(), cols));
        for (i, idx) in index.iter().enumerate() {
            if let Some(j) = idx {
                out.row_mut(i).assign(&sv.row(*j));
            }
        }
        self.push(out, Op::GatherRows { src, index }, "gather_rows")
    }

    /// Scales row `r` of `src` by `scale[r mod m]` where `scale` is `m×1`.
    /// With `m` equal to the cell count this applies one per-cell weight to
    /// every image of a stacked batch.
    pub fn scale_rows(&mut self, src: Var, scale: Var) -> Result<Var> {
        let (sv, wv) = (self.value(src), self.value(scale));
        let period = wv.nrows();
        if wv.ncols() != 1 || period == 0 || sv.nrows() % period != 0 {
            return Err(Error::Shape {
                op: "scale_rows",
                lhs: shape(sv),
                rhs: shape(wv),
            });
        }
        let mut out = sv.clone();
        for (r, mut row) in out.rows_mut().into_iter().enumerate() {
            row *= wv[[r % period, 0]];
        }
        self.push(out, Op::ScaleRows { src, scale }, "scale_rows")
    }

    /// Weighted per-image pooling: `src` stacks `B` blocks of `n` rows and
    /// `weights` is `n×1`; output row `b` is `Σ_i w_i · src[b·n + i]`.
    pub fn cell_pool(&mut self, src: Var, weights: Var) -> Result<Var> {
        let (sv, wv) = (self.value(src), self.value(weights));
        let n = wv.nrows();
        if wv.ncols() != 1 || n == 0 || sv.nrows() % n != 0 {
            return Err(Error::Shape {
                op: "cell_pool",
                lhs: shape(sv),
                rhs: shape(wv),
            });
        }
        let images = sv.nrows() / n;
        let w = wv.column(0);
        let mut out = Array2::zeros((images, sv.ncols()));
        for b in 0..images {
            let block = sv.slice(s![b * n..(b + 1) * n, ..]);
            out.row_mut(b).assign(&block.t().dot(&w));
        }
        self.push(out, Op::CellPool { src, weights }, "cell_pool")
    }

    /// Scaled dot products `scale·⟨query[t], key[s]⟩` for every pair, as an
    /// `m×1` column in pair order.
    pub fn pair_dots(&mut self, query: Var, key: Var, pairs: Arc<PairList>, scale: f64) -> Result<Var> {
        let (qv, kv) = (self.value(query), self.value(key));
        if qv.ncols() != kv.ncols() || pairs.targets() > qv.nrows() {
            return Err(Error::Shape {
                op: "pair_dots",
                lhs: shape(qv),
                rhs: shape(kv),
            });
        }
        if pairs.max_source().is_some_and(|m| m >= kv.nrows()) {
            return Err(Error::invalid("pair_dots: source index out of range"));
        }
        let mut out = Array2::zeros((pairs.len(), 1));
        for t in 0..pairs.targets() {
            let q = qv.row(t);
            for j in pairs.range(t) {
                out[[j, 0]] = scale * q.dot(&kv.row(pairs.sources[j]));
            }
        }
        self.push(
            out,
            Op::PairDots {
                query,
                key,
                pairs,
                scale,
            },
            "pair_dots",
        )
    }

    /// Softmax of an `m×1` score column within each target's segment.
    pub fn segment_softmax(&mut self, scores: Var, pairs: Arc<PairList>) -> Result<Var> {
        let sv = self.value(scores);
        if sv.dim() != (pairs.len(), 1) {
            return Err(Error::Shape {
                op: "segment_softmax",
                lhs: shape(sv),
                rhs: (pairs.len(), 1),
            });
        }
        let mut out = sv.clone();
        {
            let col = out.as_slice_mut().expect("standard layout");
            for t in 0..pairs.targets() {
                softmax_in_place(&mut col[pairs.range(t)]);
            }
        }
        self.push(out, Op::SegmentSoftmax { scores, pairs }, "segment_softmax")
    }

    /// Output row `t` is `Σ_j weights[j] · values[source_j]` over the pairs
    /// of target `t`; targets with no pairs get a zero row.
    pub fn weighted_gather(&mut self, values: Var, weights: Var, pairs: Arc<PairList>) -> Result<Var> {
        let (vv, wv) = (self.value(values), self.value(weights));
        if wv.dim() != (pairs.len(), 1) {
            return Err(Error::Shape {
                op: "weighted_gather",
                lhs: shape(wv),
                rhs: (pairs.len(), 1),
            });
        }
        if pairs.max_source().is_some_and(|m| m >= vv.nrows()) {
            return Err(Error::invalid("weighted_gather: source index out of range"));
        }
        let mut out = Array2::zeros((pairs.targets(), vv.ncols()));
        for t in 0..pairs.targets() {
            let mut row = out.row_mut(t);
            for j in pairs.range(t) {
                row.scaled_add(wv[[j, 0]], &vv.row(pairs.sources[j]));
            }
        }
        self.push(out, Op::WeightedGather { values, weights, pairs }, "weighted_gather")
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_shape = self.shape(root);
        if root_shape != (1, 1) {
            return Err(Error::NonScalarRoot(root_shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Array2::ones((1, 1)));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, g * *f),
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let rows = self.shape(*p).0;
                        let piece = g.slice(s![start..start + rows, ..]).to_owned();
                        accumulate(&mut grads, *p, piece);
                        start += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let cols = self.shape(*p).1;
                        let piece = g.slice(s![.., start..start + cols]).to_owned();
                        accumulate(&mut grads, *p, piece);
                        start += cols;
                    }
                }
                Op::RowSum(a) => {
                    let (r, c) = self.shape(*a);
                    let ga = g.broadcast((r, c)).expect("n×1 broadcasts").to_owned();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::ElemMul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = Zip::from(&g).and(y).map_collect(|&g, &y| g * y * (1.0 - y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let ga = Zip::from(&g).and(x).map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = Array2::zeros(y.dim());
                    for ((gy, yy), mut out) in g.rows().into_iter().zip(y.rows()).zip(ga.rows_mut()) {
                        let inner = gy.dot(&yy);
                        Zip::from(&mut out)
                            .and(&gy)
                            .and(&yy)
                            .for_each(|o, &gi, &yi| *o = yi * (gi - inner));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogisticLoss {
                    logits,
                    targets,
                    weights,
                } => {
                    let seed = g[[0, 0]];
                    let ga = Zip::from(self.value(*logits))
                        .and(targets.as_ref())
                        .and(weights.as_ref())
                        .map_collect(|&z, &t, &w| seed * w * (sigmoid(z) - t));
                    accumulate(&mut grads, *logits, ga);
                }
                Op::SqFrobenius(a) => {
                    let ga = self.value(*a) * (2.0 * g[[0, 0]]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows { src, index } => {
                    let gs = grad_slot(&mut grads, *src, self.shape(*src));
                    for (i, idx) in index.iter().enumerate() {
                        if let Some(j) = idx {
                            let mut row = gs.row_mut(*j);
                            row += &g.row(i);
                        }
                    }
                }
                Op::ScaleRows { src, scale } => {
                    let sv = self.value(*src);
                    let wv = self.value(*scale);
                    let period = wv.nrows();
                    let mut gsrc = g.clone();
                    let mut gw = Array2::zeros((period, 1));
                    for (r, mut row) in gsrc.rows_mut().into_iter().enumerate() {
                        gw[[r % period, 0]] += row.dot(&sv.row(r));
                        row *= wv[[r % period, 0]];
                    }
                    accumulate(&mut grads, *src, gsrc);
                    accumulate(&mut grads, *scale, gw);
                }
                Op::CellPool { src, weights } => {
                    let sv = self.value(*src);
                    let wv = self.value(*weights);
                    let n = wv.nrows();
                    let images = sv.nrows() / n;
                    let mut gsrc = Array2::zeros(sv.dim());
                    let mut gw = Array2::zeros((n, 1));
                    for b in 0..images {
                        let gb = g.row(b);
                        let block = sv.slice(s![b * n..(b + 1) * n, ..]);
                        let contrib = block.dot(&gb);
                        let mut gblock = gsrc.slice_mut(s![b * n..(b + 1) * n, ..]);
                        for i in 0..n {
                            gw[[i, 0]] += contrib[i];
                            gblock.row_mut(i).scaled_add(wv[[i, 0]], &gb);
                        }
                    }
                    accumulate(&mut grads, *src, gsrc);
                    accumulate(&mut grads, *weights, gw);
                }
                Op::PairDots {
                    query,
                    key,
                    pairs,
                    scale,
                } => {
                    let qv = self.value(*query);
                    let kv = self.value(*key);
                    let mut gq = Array2::zeros(qv.dim());
                    let mut gk = Array2::zeros(kv.dim());
                    for t in 0..pairs.targets() {
                        for j in pairs.range(t) {
                            let src = pairs.sources[j];
                            let c = g[[j, 0]] * scale;
                            gq.row_mut(t).scaled_add(c, &kv.row(src));
                            gk.row_mut(src).scaled_add(c, &qv.row(t));
                        }
                    }
                    accumulate(&mut grads, *query, gq);
                    accumulate(&mut grads, *key, gk);
                }
                Op::SegmentSoftmax { scores, pairs } => {
                    let y = &node.value;
                    let mut gs = Array2::zeros(y.dim());
                    for t in 0..pairs.targets() {
                        let r = pairs.range(t);
                        let inner: f64 = r.clone().map(|j| g[[j, 0]] * y[[j, 0]]).sum();
                        for j in r {
                            gs[[j, 0]] = y[[j, 0]] * (g[[j, 0]] - inner);
                        }
                    }
                    accumulate(&mut grads, *scores, gs);
                }
                Op::WeightedGather { values, weights, pairs } => {
                    let vv = self.value(*values);
                    let wv = self.value(*weights);
                    let mut gv = Array2::zeros(vv.dim());
                    let mut gw = Array2::zeros(wv.dim());
                    for t in 0..pairs.targets() {
                        let gt = g.row(t);
                        for j in pairs.range(t) {
                            let src = pairs.sources[j];
                            gw[[j, 0]] = gt.dot(&vv.row(src));
                            gv.row_mut(src).scaled_add(wv[[j, 0]], &gt);
                        }
                    }
                    accumulate(&mut grads, *values, gv);
                    accumulate(&mut grads, *weights, gw);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

fn grad_slot(grads: &mut [Option<Tensor>], v: Var, dim: (usize, usize)) -> &mut Tensor {
    grads[v.0].get_or_insert_with(|| Array2::zeros(dim))
}

/// Accumulated gradients of leaves after [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` when the leaf does not reach the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, zero-filled when unreachable.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(tape.shape(v)))
    }
}

/// Outcome of [`check_gradients`].
#[derive(Debug, Clone)]
pub struct GradReport {
    /// Max relative error per parameter, in input order.
    pub per_param: Vec<f64>,
    pub max_rel_error: f64,
    /// `(parameter, row, col)` of the worst entry.
    pub worst: Option<(usize, usize, usize)>,
    pub tol: f64,
    pub passed: bool,
}

/// Denominator floor of the relative error, so entries whose true gradient
/// is (near) zero are judged on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// `|a − b| / max(|a|, |b|, REL_ERROR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Compares analytic gradients of `loss_fn` against central differences.
///
/// `loss_fn` receives a fresh tape and one leaf per parameter and must
/// return a scalar node. It is evaluated twice at the base point; any
/// difference is reported as [`Error::NonDeterministic`].
pub fn check_gradients<F>(loss_fn: F, params: &[Tensor], step: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let root = loss_fn(&mut tape, &vars)?;
        if tape.shape(root) != (1, 1) {
            return Err(Error::NonScalarRoot(tape.shape(root)));
        }
        Ok(tape.scalar(root))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = loss_fn(&mut tape, &vars)?;
    let first = tape.scalar(root);
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let grads = tape.backward(root)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel_error = 0.0f64;
    let mut worst = None;
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(&tape, *var);
        let mut param_max = 0.0f64;
        let (rows, cols) = params[pi].dim();
        for r in 0..rows {
            for c in 0..cols {
                let base = params[pi][[r, c]];
                work[pi][[r, c]] = base + step;
                let plus = eval(&work)?;
                work[pi][[r, c]] = base - step;
                let minus = eval(&work)?;
                work[pi][[r, c]] = base;
                let numeric = (plus - minus) / (2.0 * step);
                let err = relative_error(analytic[[r, c]], numeric);
                if err > param_max {
                    param_max = err;
                }
                if err > max_rel_error {
                    max_rel_error = err;
                    worst = Some((pi, r, c));
                }
            }
        }
        per_param.push(param_max);
    }
    Ok(GradReport {
        per_param,
        max_rel_error,
        worst,
        tol,
        passed: max_rel_error <= tol,
    })
}
