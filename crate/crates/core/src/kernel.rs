//! First-order context-aware kernel: the Gram recursion
//! `K ← S + γ Σ_c P_c K P_cᵀ`, its fixed point, and the explicit map
//! `Φ ← (Φ₀ ‖ √γ P_1 Φ ‖ … ‖ √γ P_C Φ)` whose Gram matrix reproduces it.
//!
//! Gram matrices range over the cells of a stack of images that share one
//! grid; `P_c` acts block-diagonally on the stack. The Gram side is dense
//! and only meant for verification; the network runs on the map side.

use ndarray::{s, Array2, Axis};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::grid::{Direction, NeighborhoodSystem};

fn check_square(op: &'static str, s: &Tensor, ns: &NeighborhoodSystem) -> Result<usize> {
    let n = ns.grid().n();
    let (r, c) = s.dim();
    if r != c || r % n != 0 {
        return Err(Error::Shape {
            op,
            lhs: (r, c),
            rhs: (n, n),
        });
    }
    Ok(r / n)
}

/// L2-normalizes every row; a zero row is an error.
pub fn normalize_rows(features: &Tensor) -> Result<Tensor> {
    let mut out = features.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: "base_similarity" });
        }
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroRow { row: i });
        }
        row /= norm;
    }
    Ok(out)
}

/// Context-free similarity: the linear kernel of L2-normalized cell
/// features, so the diagonal is 1.
pub fn base_similarity(features: &Tensor) -> Result<Tensor> {
    let phi = normalize_rows(features)?;
    Ok(phi.dot(&phi.t()))
}

fn context_term(k: &Tensor, dense: &[Tensor]) -> Tensor {
    let mut acc = Array2::zeros(k.dim());
    for p in dense {
        acc += &p.dot(k).dot(&p.t());
    }
    acc
}

fn dense_operators(ns: &NeighborhoodSystem, images: usize) -> Vec<Tensor> {
    Direction::ALL.iter().map(|&d| ns.block_matrix(d, images)).collect()
}

/// Exactly `iterations` applications of the recursion starting at `K⁽⁰⁾ = S`.
pub fn gram_iterate(s: &Tensor, ns: &NeighborhoodSystem, gamma: f64, iterations: usize) -> Result<Tensor> {
    if gamma < 0.0 {
        return Err(Error::invalid(format!("gamma must be >= 0, got {gamma}")));
    }
    let images = check_square("gram_iterate", s, ns)?;
    let dense = dense_operators(ns, images);
    let mut k = s.clone();
    for _ in 0..iterations {
        k = s + &(context_term(&k, &dense) * gamma);
        if !k.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { op: "gram_iterate" });
        }
    }
    Ok(k)
}

/// Converged Gram matrix with its iteration trace.
#[derive(Debug, Clone)]
pub struct FixedPoint {
    pub gram: Tensor,
    pub iterations: usize,
    /// `‖K⁽ᵗ⁺¹⁾ − K⁽ᵗ⁾‖_F` per iteration.
    pub residuals: Vec<f64>,
}

impl FixedPoint {
    /// Successive residual ratios `r_{t+1} / r_t`.
    pub fn ratios(&self) -> Vec<f64> {
        decay_ratios(&self.residuals)
    }
}

fn decay_ratios(residuals: &[f64]) -> Vec<f64> {
    residuals
        .windows(2)
        .map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 })
        .collect()
}

/// Iterates until `‖K⁽ᵗ⁺¹⁾ − K⁽ᵗ⁾‖_F ≤ tol`.
pub fn gram_fixed_point(
    s: &Tensor,
    ns: &NeighborhoodSystem,
    gamma: f64,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPoint> {
    if gamma < 0.0 {
        return Err(Error::invalid(format!("gamma must be >= 0, got {gamma}")));
    }
    let images = check_square("gram_fixed_point", s, ns)?;
    let dense = dense_operators(ns, images);
    let mut k = s.clone();
    let mut residuals = Vec::new();
    for it in 1..=max_iter {
        let next = s + &(context_term(&k, &dense) * gamma);
        let diff = &next - &k;
        let res = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !res.is_finite() {
            return Err(Error::Divergence {
                iters: it,
                ratios: decay_ratios(&residuals),
            });
        }
        residuals.push(res);
        k = next;
        if res <= tol {
            return Ok(FixedPoint {
                gram: k,
                iterations: it,
                residuals,
            });
        }
    }
    Err(Error::Divergence {
        iters: max_iter,
        ratios: decay_ratios(&residuals),
    })
}

/// Applies `P_dir` to every image block of a stacked map (rows = cells).
pub fn apply_neighborhood(ns: &NeighborhoodSystem, dir: Direction, map: &Tensor) -> Tensor {
    let n = ns.grid().n();
    let links = ns.links(dir);
    let w = ns.weights(dir);
    let mut out = Array2::zeros(map.dim());
    for r in 0..map.nrows() {
        let (b, x) = (r / n, r % n);
        if let Some(y) = links[x] {
            out.row_mut(r).scaled_add(w[[x, 0]], &map.row(b * n + y));
        }
    }
    out
}

/// State of the explicit map recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextMapState {
    base: Tensor,
    current: Tensor,
    layer: usize,
    gamma: f64,
}

impl ContextMapState {
    /// `base` holds one row per cell (a stack of whole images).
    pub fn new(base: Tensor, gamma: f64) -> Result<Self> {
        if gamma < 0.0 {
            return Err(Error::invalid(format!("gamma must be >= 0, got {gamma}")));
        }
        Ok(ContextMapState {
            current: base.clone(),
            base,
            layer: 0,
            gamma,
        })
    }

    pub fn base(&self) -> &Tensor {
        &self.base
    }

    pub fn current(&self) -> &Tensor {
        &self.current
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Gram matrix of the current map.
    pub fn gram(&self) -> Tensor {
        self.current.dot(&self.current.t())
    }

    /// Column count after `t` steps: `d_{t+1} = d₀ + C·d_t`.
    pub fn width_after(d0: usize, steps: usize) -> usize {
        (0..steps).fold(d0, |d, _| d0 + Direction::COUNT * d)
    }
}

/// One step of the map recursion.
pub fn explicit_map_step(state: &ContextMapState, ns: &NeighborhoodSystem) -> Result<ContextMapState> {
    let n = ns.grid().n();
    if !state.current.nrows().is_multiple_of(n) || state.current.nrows() != state.base.nrows() {
        return Err(Error::Shape {
            op: "explicit_map_step",
            lhs: state.current.dim(),
            rhs: (n, state.base.ncols()),
        });
    }
    let root = state.gamma.sqrt();
    let mut blocks = vec![state.base.clone()];
    for d in Direction::ALL {
        blocks.push(apply_neighborhood(ns, d, &state.current) * root);
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let current = ndarray::concatenate(Axis(1), &views).expect("equal row counts");
    Ok(ContextMapState {
        base: state.base.clone(),
        current,
        layer: state.layer + 1,
        gamma: state.gamma,
    })
}

/// Shrinks all neighborhood weights uniformly so that
/// `γ·Σ_c ‖P_c‖₂² ≤ rho`; a no-op when the bound already holds.
pub fn spectral_rescale(ns: &NeighborhoodSystem, gamma: f64, rho: f64) -> Result<NeighborhoodSystem> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::invalid(format!("rho must lie in (0, 1), got {rho}")));
    }
    let mut out = ns.clone();
    let factor = ns.contraction_factor(gamma);
    if factor > rho {
        // The squared norms scale quadratically; shave one part in 1e12 so
        // rounding cannot land just above the bound.
        out.scale((rho / factor).sqrt() * (1.0 - 1e-12));
    }
    Ok(out)
}

/// Rescales in place; returns the applied factor (1 when untouched).
pub fn spectral_rescale_in_place(ns: &mut NeighborhoodSystem, gamma: f64, rho: f64) -> Result<f64> {
    let rescaled = spectral_rescale(ns, gamma, rho)?;
    let before = ns.contraction_factor(gamma);
    let after = rescaled.contraction_factor(gamma);
    *ns = rescaled;
    Ok(if before > 0.0 { (after / before).sqrt() } else { 1.0 })
}

/// Extracts the `n×n` diagonal block of image `b` from a stacked Gram.
pub fn image_block(k: &Tensor, n: usize, b: usize) -> Tensor {
    k.slice(s![b * n..(b + 1) * n, b * n..(b + 1) * n]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use ndarray::array;

    #[test]
    fn gamma_zero_is_context_free() {
        let g = build_grid(2, 2).unwrap();
        let ns = NeighborhoodSystem::init(&g);
        let s = base_similarity(&array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, 0.5]]).unwrap();
        for t in 0..5 {
            assert_eq!(gram_iterate(&s, &ns, 0.0, t).unwrap(), s);
        }
        let fp = gram_fixed_point(&s, &ns, 0.0, 1e-12, 10).unwrap();
        assert_eq!(fp.iterations, 1);
    }

    #[test]
    fn one_iteration_by_hand_on_one_by_two() {
        let g = build_grid(1, 2).unwrap();
        let ns = NeighborhoodSystem::init(&g);
        let s = Array2::eye(2);
        let k = gram_iterate(&s, &ns, 0.1, 1).unwrap();
        // P_right = [[0,1],[0,0]] → P Pᵀ = diag(1, 0); P_left → diag(0, 1).
        assert_eq!(k, array![[1.1, 0.0], [0.0, 1.1]]);
    }

    #[test]
    fn base_similarity_cases() {
        let s = base_similarity(&array![[1.0, 0.0], [3.0, 0.0], [0.0, 2.0]]).unwrap();
        assert!((s[[0, 1]] - 1.0).abs() < 1e-15);
        assert_eq!(s[[0, 2]], 0.0);
        assert!(matches!(
            base_similarity(&array![[1.0, 0.0], [0.0, 0.0]]),
            Err(Error::ZeroRow { row: 1 })
        ));
    }

    #[test]
    fn map_width_arithmetic() {
        assert_eq!(ContextMapState::width_after(3, 1), 15);
        let g = build_grid(2, 2).unwrap();
        let ns = NeighborhoodSystem::init(&g);
        let st = ContextMapState::new(Array2::ones((4, 3)), 0.1).unwrap();
        let st = explicit_map_step(&st, &ns).unwrap();
        assert_eq!(st.current().ncols(), 15);
        assert_eq!(st.layer(), 1);
    }

    #[test]
    fn gamma_zero_map_gram_is_base() {
        let g = build_grid(2, 2).unwrap();
        let ns = NeighborhoodSystem::init(&g);
        let phi0 = array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8], [1.0, 0.0]];
        let mut st = ContextMapState::new(phi0.clone(), 0.0).unwrap();
        for _ in 0..3 {
            st = explicit_map_step(&st, &ns).unwrap();
        }
        assert_eq!(st.gram(), phi0.dot(&phi0.t()));
    }

    #[test]
    fn rescale_cases() {
        let g = build_grid(3, 3).unwrap();
        let zero = NeighborhoodSystem::with_weights(&g, vec![Array2::zeros((9, 1)); 4]).unwrap();
        assert_eq!(spectral_rescale(&zero, 0.1, 0.9).unwrap(), zero);
        let mut ns = NeighborhoodSystem::init(&g);
        ns.scale(2.0);
        let r = spectral_rescale(&ns, 0.1, 0.9).unwrap();
        assert!(r.contraction_factor(0.1) <= 0.9);
        ns.scale(2.0);
        let r = spectral_rescale(&ns, 0.1, 0.9).unwrap();
        assert!(r.contraction_factor(0.1) <= 0.9);
        assert!(spectral_rescale(&ns, 0.1, 1.0).is_err());
        // Already satisfied: untouched.
        let fresh = NeighborhoodSystem::init(&g);
        assert_eq!(spectral_rescale(&fresh, 0.1, 0.9).unwrap(), fresh);
    }

    #[test]
    fn divergence_is_reported() {
        let g = build_grid(3, 3).unwrap();
        let mut ns = NeighborhoodSystem::init(&g);
        ns.scale(3.0);
        let s = Array2::eye(9);
        match gram_fixed_point(&s, &ns, 1.0, 1e-10, 20) {
            Err(Error::Divergence { iters, ratios }) => {
                assert_eq!(iters, 20);
                assert!(!ratios.is_empty());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
