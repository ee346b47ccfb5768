//! Co-occurrence label grouping.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower and upper clip of the per-group loss weight.
pub const GROUP_WEIGHT_CLIP: (f64, f64) = (0.5, 2.0);

/// Assignment of labels to classifier heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPartition {
    n_labels: usize,
    /// Label indices per group, ascending.
    groups: Vec<Vec<usize>>,
    /// Loss weight `C_g` per group.
    weights: Vec<f64>,
}

impl GroupPartition {
    /// All labels in one head with weight 1 (grouping disabled).
    pub fn single(n_labels: usize) -> Self {
        GroupPartition {
            n_labels,
            groups: vec![(0..n_labels).collect()],
            weights: vec![1.0],
        }
    }

    pub fn from_parts(n_labels: usize, groups: Vec<Vec<usize>>, weights: Vec<f64>) -> Result<Self> {
        let p = GroupPartition {
            n_labels,
            groups,
            weights,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.len() != self.weights.len() || self.groups.is_empty() {
            return Err(Error::invalid("group and weight counts differ or are zero"));
        }
        let mut seen = vec![false; self.n_labels];
        for g in &self.groups {
            if g.is_empty() {
                return Err(Error::invalid("empty label group"));
            }
            for &l in g {
                if l >= self.n_labels || seen[l] {
                    return Err(Error::invalid(format!("label {l} out of range or in two groups")));
                }
                seen[l] = true;
            }
        }
        if let Some(l) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!("label {l} is in no group")));
        }
        if self.weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::invalid("group weights must be positive"));
        }
        Ok(())
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    /// Group id of every label.
    pub fn assignment(&self) -> Vec<usize> {
        let mut a = vec![0; self.n_labels];
        for (g, labels) in self.groups.iter().enumerate() {
            for &l in labels {
                a[l] = g;
            }
        }
        a
    }

    /// Label of each logit column (heads concatenated in group order).
    pub fn column_labels(&self) -> Vec<usize> {
        self.groups.iter().flatten().copied().collect()
    }

    /// `C_g` of each logit column.
    pub fn column_weights(&self) -> Vec<f64> {
        self.groups
            .iter()
            .zip(&self.weights)
            .flat_map(|(g, &w)| std::iter::repeat_n(w, g.len()))
            .collect()
    }

    /// Reorders head-ordered columns into label order.
    pub fn to_label_order(&self, columns: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((columns.nrows(), self.n_labels));
        for (j, l) in self.column_labels().into_iter().enumerate() {
            out.column_mut(l).assign(&columns.column(j));
        }
        out
    }

    /// Reorders label-ordered columns into head order.
    pub fn to_column_order(&self, labels: &Array2<f64>) -> Array2<f64> {
        labels.select(ndarray::Axis(1), &self.column_labels())
    }
}

/// Positive-pair counts between labels; the diagonal holds frequencies.
/// `labels` is `N × L` with entries ±1.
pub fn cooccurrence(labels: &Array2<f64>) -> Array2<usize> {
    let l = labels.ncols();
    let mut co = Array2::zeros((l, l));
    for row in labels.rows() {
        let pos: Vec<usize> = (0..l).filter(|&k| row[k] > 0.0).collect();
        for &a in &pos {
            for &b in &pos {
                co[[a, b]] += 1;
            }
        }
    }
    co
}

/// Greedy co-occurrence grouping into `g` heads.
///
/// Labels are visited by decreasing frequency (ties by index) and each joins
/// the group with the largest summed co-occurrence with its members; ties go
/// to the smaller group, then the lower group index. When the labels left
/// would not fill the remaining empty groups, the label opens an empty one.
pub fn group_labels(labels: &Array2<f64>, g: usize) -> Result<GroupPartition> {
    let l = labels.ncols();
    if g == 0 {
        return Err(Error::invalid("group count must be at least 1"));
    }
    if g > l {
        return Err(Error::invalid(format!("{g} groups requested for {l} labels")));
    }
    let co = cooccurrence(labels);
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| co[[b, b]].cmp(&co[[a, a]]).then(a.cmp(&b)));

    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); g];
    for (visited, &label) in order.iter().enumerate() {
        let remaining = l - visited;
        let empty = groups.iter().filter(|m| m.is_empty()).count();
        let target = if remaining <= empty {
            groups.iter().position(Vec::is_empty).expect("an empty group")
        } else {
            let score = |m: &Vec<usize>| m.iter().map(|&o| co[[label, o]]).sum::<usize>();
            (0..g)
                .max_by(|&a, &b| {
                    score(&groups[a])
                        .cmp(&score(&groups[b]))
                        .then(groups[b].len().cmp(&groups[a].len()))
                        .then(b.cmp(&a))
                })
                .expect("g >= 1")
        };
        groups[target].push(label);
    }
    for m in &mut groups {
        m.sort_unstable();
    }
    let n = labels.nrows() as f64;
    let weights = groups
        .iter()
        .map(|m| {
            let positives: usize = m.iter().map(|&k| co[[k, k]]).sum();
            let w = n / (g as f64 * positives as f64);
            if w.is_nan() {
                1.0
            } else {
                w.clamp(GROUP_WEIGHT_CLIP.0, GROUP_WEIGHT_CLIP.1)
            }
        })
        .collect();
    GroupPartition::from_parts(l, groups, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(rows: &[&[usize]], l: usize) -> Array2<f64> {
        let mut y = Array2::from_elem((rows.len(), l), -1.0);
        for (i, r) in rows.iter().enumerate() {
            for &k in *r {
                y[[i, k]] = 1.0;
            }
        }
        y
    }

    #[test]
    fn single_group_holds_everything() {
        let y = labels(&[&[0, 1], &[2], &[]], 3);
        let p = group_labels(&y, 1).unwrap();
        assert_eq!(p.groups(), &[vec![0, 1, 2]]);
        let w = p.weights()[0];
        assert!((0.5..=2.0).contains(&w));
        assert_eq!(p.column_labels(), vec![0, 1, 2]);
    }

    #[test]
    fn too_many_groups_is_an_error() {
        let y = labels(&[&[0]], 2);
        assert!(group_labels(&y, 3).is_err());
        assert!(group_labels(&y, 0).is_err());
    }

    #[test]
    fn every_group_nonempty_even_without_cooccurrence() {
        let row: &[usize] = &[0, 1, 2, 3];
        let y = labels(&[row; 4], 4);
        let p = group_labels(&y, 3).unwrap();
        assert!(p.groups().iter().all(|g| !g.is_empty()));
        p.validate().unwrap();
    }

    #[test]
    fn weights_follow_frequency_and_clip() {
        // 10 images; label 0 in all, label 1 in one.
        let rows: Vec<&[usize]> = (0..10).map(|i| if i == 0 { &[0, 1][..] } else { &[0][..] }).collect();
        let p = group_labels(&labels(&rows, 2), 2).unwrap();
        // group of label 0: 10/(2·10) = 0.5; group of label 1: 10/2 → 2.
        assert_eq!(p.groups(), &[vec![0], vec![1]]);
        assert_eq!(p.weights(), &[0.5, 2.0]);
    }

    #[test]
    fn column_reordering_round_trips() {
        let p = GroupPartition::from_parts(3, vec![vec![2], vec![0, 1]], vec![1.0, 1.0]).unwrap();
        let y = ndarray::array![[1.0, 2.0, 3.0]];
        let cols = p.to_column_order(&y);
        assert_eq!(cols, ndarray::array![[3.0, 1.0, 2.0]]);
        assert_eq!(p.to_label_order(&cols), y);
        assert_eq!(p.assignment(), vec![1, 1, 0]);
    }
}
