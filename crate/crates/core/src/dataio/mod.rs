//! Datasets, file formats and the synthetic context task.

mod checkpoint;
mod features;
mod labels;
pub mod synth;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::grid::GridSpec;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, TrainState};
pub use features::{decode_features, encode_features, read_features, write_features, FeatureSet};
pub use labels::{
    encode_labels, encode_vocab, load_dataset, parse_labels, parse_vocab, read_vocab, vocab_path_for, write_labels,
    write_vocab, Vocab,
};
pub use synth::{synth_dataset, LabelRule, SynthConfig, SynthDataset};

/// Images with cell features and ±1 label vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub grid: GridSpec,
    pub ids: Vec<String>,
    /// One `n × d` matrix per image.
    pub features: Vec<Tensor>,
    /// `N × L`, entries ±1.
    pub labels: Array2<f64>,
    pub vocab: Vec<String>,
}

impl LabeledDataset {
    pub fn new(
        grid: GridSpec,
        ids: Vec<String>,
        features: Vec<Tensor>,
        labels: Array2<f64>,
        vocab: Vec<String>,
    ) -> Result<Self> {
        if ids.len() != features.len() || labels.nrows() != ids.len() || labels.ncols() != vocab.len() {
            return Err(Error::invalid(format!(
                "dataset parts disagree: {} ids, {} feature maps, labels {:?}, {} vocabulary entries",
                ids.len(),
                features.len(),
                labels.dim(),
                vocab.len()
            )));
        }
        let d = features.first().map_or(0, |f| f.ncols());
        if let Some(i) = features.iter().position(|f| f.dim() != (grid.n(), d)) {
            return Err(Error::invalid(format!(
                "image {:?}: feature map {:?}",
                ids[i],
                features[i].dim()
            )));
        }
        if labels.iter().any(|&y| y != 1.0 && y != -1.0) {
            return Err(Error::invalid("labels must be +1 or -1"));
        }
        Ok(LabeledDataset {
            grid,
            ids,
            features,
            labels,
            vocab,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_labels(&self) -> usize {
        self.vocab.len()
    }

    pub fn visual_dim(&self) -> usize {
        self.features.first().map_or(0, |f| f.ncols())
    }

    pub fn feature_refs(&self) -> Vec<&Tensor> {
        self.features.iter().collect()
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            grid: self.grid,
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            labels: self.labels.select(ndarray::Axis(0), indices),
            vocab: self.vocab.clone(),
        }
    }

    /// Splits off `fraction` of the images (at least one, by seed) as a
    /// held-out part; returns `(rest, held_out)`.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        if !(fraction > 0.0 && fraction < 1.0) || self.len() < 2 {
            return Err(Error::invalid(format!(
                "cannot split {} images with fraction {fraction}",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let held = ((self.len() as f64 * fraction).round() as usize).clamp(1, self.len() - 1);
        let (mut a, mut b) = (idx[held..].to_vec(), idx[..held].to_vec());
        a.sort_unstable();
        b.sort_unstable();
        Ok((self.subset(&a), self.subset(&b)))
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn feature_set(&self) -> FeatureSet {
        FeatureSet {
            grid: self.grid,
            dim: self.visual_dim(),
            ids: self.ids.clone(),
            features: self.features.clone(),
        }
    }

    /// Positive label indices of image `i`.
    pub fn positives(&self, i: usize) -> Vec<usize> {
        (0..self.n_labels()).filter(|&k| self.labels[[i, k]] > 0.0).collect()
    }

    /// Mean and population standard deviation of every visual channel
    /// over all cells of all images.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.visual_dim();
        let mut mean = vec![0.0; d];
        let mut count = 0usize;
        for f in &self.features {
            for row in f.rows() {
                for (m, x) in mean.iter_mut().zip(row) {
                    *m += x;
                }
            }
            count += f.nrows();
        }
        if count == 0 {
            return (mean, vec![0.0; d]);
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        // Second pass around the mean avoids cancellation.
        let mut var = vec![0.0; d];
        for f in &self.features {
            for row in f.rows() {
                for j in 0..d {
                    let e = row[j] - mean[j];
                    var[j] += e * e;
                }
            }
        }
        let std = var.iter().map(|v| (v / count as f64).sqrt()).collect();
        (mean, std)
    }
}
