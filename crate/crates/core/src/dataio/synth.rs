//! Synthetic images whose labels depend on cell arrangement.
//!
//! Every cell holds one pattern from a small bank (pattern 0 is the
//! background) and carries that pattern's prototype vector plus Gaussian
//! noise. Three label families are generated:
//!
//! - content: a pattern appears anywhere;
//! - context: two patterns occupy 4-adjacent cells;
//! - long range: two patterns sit in one row or column 2 or 3 steps apart.
//!
//! Relational labels are planted positive or as a hard negative (both
//! patterns present, wrong arrangement) so a bag of cells cannot tell them
//! apart. Final labels always come from scanning the finished grid.

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::grid::{Direction, GridSpec};

fn default_dim() -> usize {
    32
}
fn default_sigma() -> f64 {
    0.1
}
fn default_half() -> f64 {
    0.5
}
fn default_relation_rate() -> f64 {
    1.0 / 3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub grid: GridSpec,
    pub n_images: usize,
    pub n_labels: usize,
    #[serde(default = "default_dim")]
    pub visual_dim: usize,
    /// Feature noise standard deviation.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Chance that a relational label is planted positive.
    #[serde(default = "default_relation_rate")]
    pub relation_rate: f64,
    /// Chance of a hard negative (both patterns, wrong placement) when a
    /// relation is not planted positive. Below 1 the mere presence of the
    /// patterns carries some evidence.
    #[serde(default = "default_half")]
    pub distractor_rate: f64,
    /// Chance that each content pattern is planted on its own.
    #[serde(default = "default_half")]
    pub content_rate: f64,
    /// Exactly one content pattern per image and nothing else.
    #[serde(default)]
    pub single_pattern: bool,
}

impl SynthConfig {
    pub fn new(seed: u64, grid: GridSpec, n_images: usize, n_labels: usize) -> Self {
        SynthConfig {
            seed,
            grid,
            n_images,
            n_labels,
            visual_dim: default_dim(),
            sigma: default_sigma(),
            relation_rate: default_relation_rate(),
            distractor_rate: default_half(),
            content_rate: 0.5,
            single_pattern: false,
        }
    }

    /// `(content, context, long range)` label counts.
    pub fn family_sizes(&self) -> (usize, usize, usize) {
        let rel = self.n_labels / 3;
        (self.n_labels - 2 * rel, rel, rel)
    }

    /// Patterns used by relational labels; every relation owns its pair.
    pub fn relational_patterns(&self) -> usize {
        let (_, context, long) = self.family_sizes();
        2 * (context + long)
    }

    /// Non-background patterns in the bank: content patterns first.
    pub fn pattern_count(&self) -> usize {
        self.family_sizes().0 + self.relational_patterns()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelRule {
    Content { pattern: usize },
    Adjacent { a: usize, b: usize },
    Distance { a: usize, b: usize, min: usize, max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelFamily {
    Content,
    Context,
    LongRange,
}

impl LabelRule {
    pub fn family(&self) -> LabelFamily {
        match self {
            LabelRule::Content { .. } => LabelFamily::Content,
            LabelRule::Adjacent { .. } => LabelFamily::Context,
            LabelRule::Distance { .. } => LabelFamily::LongRange,
        }
    }

    pub fn name(&self) -> String {
        match *self {
            LabelRule::Content { pattern } => format!("content_{pattern}"),
            LabelRule::Adjacent { a, b } => format!("adjacent_{a}_{b}"),
            LabelRule::Distance { a, b, .. } => format!("distance_{a}_{b}"),
        }
    }

    /// Whether the rule holds on a grid of pattern ids (1-based; 0 is
    /// background).
    pub fn holds(&self, grid: &GridSpec, cells: &[usize]) -> bool {
        let (steps, a, b) = match *self {
            LabelRule::Content { pattern } => return cells.contains(&(pattern + 1)),
            LabelRule::Adjacent { a, b } => (1..=1, a, b),
            LabelRule::Distance { a, b, min, max } => (min..=max, a, b),
        };
        let (a, b) = (a + 1, b + 1);
        (0..grid.n()).any(|x| {
            cells[x] == a
                && Direction::ALL.iter().any(|&d| {
                    steps
                        .clone()
                        .any(|s| walk(grid, x, d, s).is_some_and(|y| cells[y] == b))
                })
        })
    }
}

fn walk(grid: &GridSpec, mut x: usize, dir: Direction, steps: usize) -> Option<usize> {
    for _ in 0..steps {
        x = grid.neighbor(x, dir)?;
    }
    Some(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub dataset: LabeledDataset,
    /// Pattern id per cell per image (0 = background).
    pub cells: Vec<Vec<usize>>,
    pub rules: Vec<LabelRule>,
    /// Prototype per pattern id, row 0 the background.
    pub prototypes: Tensor,
}

impl SynthDataset {
    pub fn labels_of(&self, family: LabelFamily) -> Vec<usize> {
        self.rules
            .iter()
            .enumerate()
            .filter(|(_, r)| r.family() == family)
            .map(|(i, _)| i)
            .collect()
    }

    /// First `n` images and the rest.
    pub fn split_at(&self, n: usize) -> (LabeledDataset, LabeledDataset) {
        let total = self.dataset.len();
        let first: Vec<usize> = (0..n.min(total)).collect();
        let rest: Vec<usize> = (n.min(total)..total).collect();
        (self.dataset.subset(&first), self.dataset.subset(&rest))
    }
}

fn place_pair(
    rng: &mut ChaCha8Rng,
    grid: &GridSpec,
    cells: &mut [usize],
    a: usize,
    b: usize,
    accept: impl Fn(usize, usize) -> bool,
    offsets: Option<(usize, usize)>,
) {
    for _ in 0..40 {
        let x = rng.random_range(0..grid.n());
        let y = match offsets {
            Some((lo, hi)) => {
                let d = Direction::ALL[rng.random_range(0..Direction::COUNT)];
                match walk(grid, x, d, rng.random_range(lo..=hi)) {
                    Some(y) => y,
                    None => continue,
                }
            }
            None => rng.random_range(0..grid.n()),
        };
        if x == y || cells[x] != 0 || cells[y] != 0 || !accept(x, y) {
            continue;
        }
        let (p, q) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
        cells[x] = p + 1;
        cells[y] = q + 1;
        return;
    }
}

fn line_distance(grid: &GridSpec, x: usize, y: usize) -> Option<usize> {
    let (r1, c1) = grid.coords(x);
    let (r2, c2) = grid.coords(y);
    if r1 == r2 {
        Some(c1.abs_diff(c2))
    } else if c1 == c2 {
        Some(r1.abs_diff(r2))
    } else {
        None
    }
}

/// Generates a dataset; see the module docs for the label families.
pub fn synth_dataset(config: &SynthConfig) -> Result<SynthDataset> {
    if config.n_labels < 4 {
        return Err(Error::invalid(format!(
            "n_labels must be at least 4, got {}",
            config.n_labels
        )));
    }
    if config.visual_dim == 0 || config.sigma.is_nan() || config.sigma < 0.0 {
        return Err(Error::invalid("visual_dim must be positive and sigma non-negative"));
    }
    for p in [config.relation_rate, config.distractor_rate, config.content_rate] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("rate {p} outside [0, 1]")));
        }
    }
    let grid = config.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let k = config.pattern_count();
    let prototypes = Array2::from_shape_simple_fn((k + 1, config.visual_dim), || rng.random::<f64>());

    let (n_content, n_context, n_long) = config.family_sizes();
    let pairs: Vec<(usize, usize)> = (n_content..k).step_by(2).map(|a| (a, a + 1)).collect();
    let mut rules: Vec<LabelRule> = (0..n_content).map(|pattern| LabelRule::Content { pattern }).collect();
    rules.extend(pairs[..n_context].iter().map(|&(a, b)| LabelRule::Adjacent { a, b }));
    rules.extend(
        pairs[n_context..n_context + n_long]
            .iter()
            .map(|&(a, b)| LabelRule::Distance { a, b, min: 2, max: 3 }),
    );

    let n = grid.n();
    let mut all_cells = Vec::with_capacity(config.n_images);
    let mut features = Vec::with_capacity(config.n_images);
    let mut labels = Array2::from_elem((config.n_images, rules.len()), -1.0);
    for img in 0..config.n_images {
        let mut cells = vec![0usize; n];
        if config.single_pattern {
            let p = rng.random_range(0..n_content);
            cells[rng.random_range(0..n)] = p + 1;
        } else {
            let mut relational: Vec<usize> = (n_content..rules.len()).collect();
            relational.shuffle(&mut rng);
            for r in relational {
                let positive = rng.random_bool(config.relation_rate);
                if !positive && !rng.random_bool(config.distractor_rate) {
                    continue;
                }
                match rules[r] {
                    LabelRule::Adjacent { a, b } => {
                        if positive {
                            place_pair(&mut rng, &grid, &mut cells, a, b, |_, _| true, Some((1, 1)));
                        } else {
                            let g = grid;
                            place_pair(
                                &mut rng,
                                &grid,
                                &mut cells,
                                a,
                                b,
                                move |x, y| line_distance(&g, x, y) != Some(1),
                                None,
                            );
                        }
                    }
                    LabelRule::Distance { a, b, min, max } => {
                        if positive {
                            place_pair(&mut rng, &grid, &mut cells, a, b, |_, _| true, Some((min, max)));
                        } else {
                            let g = grid;
                            place_pair(
                                &mut rng,
                                &grid,
                                &mut cells,
                                a,
                                b,
                                move |x, y| !line_distance(&g, x, y).is_some_and(|d| (min..=max).contains(&d)),
                                None,
                            );
                        }
                    }
                    LabelRule::Content { .. } => unreachable!(),
                }
            }
            for p in 0..n_content {
                if rng.random_bool(config.content_rate) {
                    let free: Vec<usize> = (0..n).filter(|&x| cells[x] == 0).collect();
                    if let Some(&x) = free.choose(&mut rng) {
                        cells[x] = p + 1;
                    }
                }
            }
        }
        let mut f = Array2::zeros((n, config.visual_dim));
        for x in 0..n {
            let proto = prototypes.row(cells[x]);
            for j in 0..config.visual_dim {
                let noise: f64 = StandardNormal.sample(&mut rng);
                f[[x, j]] = proto[j] + config.sigma * noise;
            }
        }
        for (r, rule) in rules.iter().enumerate() {
            if rule.holds(&grid, &cells) {
                labels[[img, r]] = 1.0;
            }
        }
        all_cells.push(cells);
        features.push(f);
    }
    let ids = (0..config.n_images).map(|i| format!("img{i:05}")).collect();
    let vocab = rules.iter().map(LabelRule::name).collect();
    Ok(SynthDataset {
        dataset: LabeledDataset::new(grid, ids, features, labels, vocab)?,
        cells: all_cells,
        rules,
        prototypes,
    })
}
