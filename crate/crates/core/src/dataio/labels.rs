//! Text label files and vocabularies.
//!
//! A vocabulary lists one label per line; its line order fixes the label
//! indices. A label file holds `image_id<TAB>label,label,...` per line, one
//! line per image of the paired feature file.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::features::read_features;
use super::LabeledDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            check_label(l).map_err(|m| Error::Line {
                context: "vocabulary".into(),
                line: i + 1,
                message: m,
            })?;
            if index.insert(l.clone(), i).is_some() {
                return Err(Error::Line {
                    context: "vocabulary".into(),
                    line: i + 1,
                    message: format!("duplicate label {l:?}"),
                });
            }
        }
        Ok(Vocab { labels, index })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }
}

fn check_label(l: &str) -> std::result::Result<(), String> {
    if l.is_empty() || l.trim() != l || l.contains([',', '\t']) {
        Err(format!("invalid label {l:?}"))
    } else {
        Ok(())
    }
}

/// Parses a vocabulary; blank lines are not allowed since they would
/// shift indices silently.
pub fn parse_vocab(text: &str, context: &str) -> Result<Vocab> {
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if let Err(m) = check_label(line) {
            return Err(Error::Line {
                context: context.into(),
                line: i + 1,
                message: m,
            });
        }
        labels.push(line.to_string());
    }
    Vocab::new(labels).map_err(|e| match e {
        Error::Line { line, message, .. } => Error::Line {
            context: context.into(),
            line,
            message,
        },
        e => e,
    })
}

pub fn encode_vocab(vocab: &[String]) -> String {
    vocab.iter().map(|l| format!("{l}\n")).collect()
}

/// Parses label lines into `(id, label indices)` pairs in file order.
pub fn parse_labels(text: &str, vocab: &Vocab, context: &str) -> Result<Vec<(String, Vec<usize>)>> {
    let mut out = Vec::new();
    let mut seen = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        let line_err = |m: String| Error::Line {
            context: context.into(),
            line: n,
            message: m,
        };
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| line_err("expected image_id<TAB>labels".into()))?;
        if id.is_empty() {
            return Err(line_err("empty image id".into()));
        }
        if let Some(prev) = seen.insert(id.to_string(), n) {
            return Err(line_err(format!("image {id:?} already listed on line {prev}")));
        }
        let mut labels = Vec::new();
        if !rest.is_empty() {
            for name in rest.split(',') {
                let k = vocab.get(name).ok_or_else(|| Error::UnknownLabel {
                    context: context.into(),
                    line: n,
                    label: name.to_string(),
                })?;
                if !labels.contains(&k) {
                    labels.push(k);
                }
            }
        }
        labels.sort_unstable();
        out.push((id.to_string(), labels));
    }
    Ok(out)
}

pub fn encode_labels(ids: &[String], labels: &Array2<f64>, vocab: &[String]) -> String {
    let mut s = String::new();
    for (i, id) in ids.iter().enumerate() {
        let names: Vec<&str> = (0..vocab.len())
            .filter(|&k| labels[[i, k]] > 0.0)
            .map(|k| vocab[k].as_str())
            .collect();
        s.push_str(id);
        s.push('\t');
        s.push_str(&names.join(","));
        s.push('\n');
    }
    s
}

/// `labels.tsv` → `labels.tsv.vocab`.
pub fn vocab_path_for(labels: &Path) -> PathBuf {
    let mut s = labels.as_os_str().to_owned();
    s.push(".vocab");
    PathBuf::from(s)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    parse_vocab(&read_text(path)?, &path.display().to_string())
}

pub fn write_vocab(path: &Path, vocab: &[String]) -> Result<()> {
    std::fs::write(path, encode_vocab(vocab)).map_err(|e| Error::io(path, e))
}

pub fn write_labels(path: &Path, ds: &LabeledDataset) -> Result<()> {
    std::fs::write(path, encode_labels(&ds.ids, &ds.labels, &ds.vocab)).map_err(|e| Error::io(path, e))
}

/// Loads a feature file with its label file; the vocabulary defaults to
/// the label path with `.vocab` appended.
pub fn load_dataset(features: &Path, labels: &Path, vocab: Option<&Path>) -> Result<LabeledDataset> {
    let fs = read_features(features)?;
    let vocab_path = vocab.map_or_else(|| vocab_path_for(labels), Path::to_path_buf);
    let vocab = read_vocab(&vocab_path)?;
    let context = labels.display().to_string();
    let entries = parse_labels(&read_text(labels)?, &vocab, &context)?;
    assemble(fs, entries, vocab, &context)
}

pub(crate) fn assemble(
    fs: super::FeatureSet,
    entries: Vec<(String, Vec<usize>)>,
    vocab: Vocab,
    context: &str,
) -> Result<LabeledDataset> {
    let position: HashMap<&str, usize> = fs.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut y = Array2::from_elem((fs.ids.len(), vocab.len()), -1.0);
    let mut covered = vec![false; fs.ids.len()];
    for (line, (id, labels)) in entries.iter().enumerate() {
        let i = *position.get(id.as_str()).ok_or_else(|| Error::MissingId {
            context: context.into(),
            line: line + 1,
            id: id.clone(),
        })?;
        covered[i] = true;
        for &k in labels {
            y[[i, k]] = 1.0;
        }
    }
    if let Some(i) = covered.iter().position(|c| !c) {
        return Err(Error::Line {
            context: context.into(),
            line: entries.len() + 1,
            message: format!("no label line for image {:?}", fs.ids[i]),
        });
    }
    LabeledDataset::new(fs.grid, fs.ids, fs.features, y, vocab.labels)
}
