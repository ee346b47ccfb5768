//! Ablation grids over context, grouping, depth, order and walk threshold.

use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use super::{evaluate, fit, Protocol, TrainConfig};
use crate::dataio::LabeledDataset;
use crate::error::{Error, Result};
use crate::network::NetworkConfig;

/// γ used when context is switched on for a template whose γ is 0.
pub const DEFAULT_GAMMA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    /// Context awareness on (1) or off (0, γ = 0 everywhere).
    Context,
    /// Label grouping on (1) or a single head (0).
    Grouping,
    Depth,
    Order,
    Thres,
}

pub const AXIS_NAMES: [&str; 5] = ["ca", "lg", "depth", "order", "thres"];

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ca" => Ok(AblationAxis::Context),
            "lg" => Ok(AblationAxis::Grouping),
            "depth" => Ok(AblationAxis::Depth),
            "order" => Ok(AblationAxis::Order),
            "thres" => Ok(AblationAxis::Thres),
            _ => Err(Error::invalid(format!(
                "unknown ablation axis {s:?}; valid axes: {}",
                AXIS_NAMES.join(", ")
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AblationSetting {
    pub ca: bool,
    pub lg: bool,
    pub depth: usize,
    pub order: usize,
    pub thres: f64,
}

#[derive(Debug, Clone)]
pub struct AblationArm {
    pub setting: AblationSetting,
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

fn as_count(axis: &str, v: f64) -> Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 && v < 64.0 {
        Ok(v as usize)
    } else {
        Err(Error::invalid(format!("{axis} values must be integers >= 1, got {v}")))
    }
}

fn as_switch(axis: &str, v: f64) -> Result<bool> {
    match v {
        0.0 => Ok(false),
        1.0 => Ok(true),
        _ => Err(Error::invalid(format!("{axis} values must be 0 or 1, got {v}"))),
    }
}

fn build(base_net: &NetworkConfig, base_train: &TrainConfig, s: AblationSetting) -> AblationArm {
    let template = base_net.layers[0].clone();
    let gamma = if s.ca {
        if template.gamma > 0.0 {
            template.gamma
        } else {
            DEFAULT_GAMMA
        }
    } else {
        0.0
    };
    let mut network = base_net.clone();
    network.layers = (0..s.depth)
        .map(|_| {
            let mut l = template.clone();
            l.max_order = s.order;
            l.thres = s.thres;
            l.gamma = gamma;
            l
        })
        .collect();
    let mut train = base_train.clone();
    train.label_grouping = s.lg;
    AblationArm {
        setting: s,
        network,
        train,
    }
}

/// Cross product of the axis values; axes not listed keep the base
/// configuration (first layer as the template for every layer).
pub fn ablation_arms(
    base_net: &NetworkConfig,
    base_train: &TrainConfig,
    axes: &[(AblationAxis, Vec<f64>)],
) -> Result<Vec<AblationArm>> {
    let Some(first) = base_net.layers.first() else {
        return Err(Error::Config(
            "ablation needs at least one layer in the base network".into(),
        ));
    };
    let base = AblationSetting {
        ca: base_net.max_gamma() > 0.0,
        lg: base_train.label_grouping,
        depth: base_net.layers.len(),
        order: first.max_order,
        thres: first.thres,
    };
    let mut settings = vec![base];
    for (axis, values) in axes {
        if values.is_empty() {
            return Err(Error::invalid("ablation axis without values"));
        }
        let mut next = Vec::with_capacity(settings.len() * values.len());
        for s in &settings {
            for &v in values {
                let mut t = *s;
                match axis {
                    AblationAxis::Context => t.ca = as_switch("ca", v)?,
                    AblationAxis::Grouping => t.lg = as_switch("lg", v)?,
                    AblationAxis::Depth => t.depth = as_count("depth", v)?,
                    AblationAxis::Order => t.order = as_count("order", v)?,
                    AblationAxis::Thres => {
                        if !(0.0..=1.0).contains(&v) {
                            return Err(Error::invalid(format!("thres values must lie in [0, 1], got {v}")));
                        }
                        t.thres = v;
                    }
                }
                next.push(t);
            }
        }
        settings = next;
    }
    let arms: Vec<AblationArm> = settings.into_iter().map(|s| build(base_net, base_train, s)).collect();
    for a in &arms {
        a.network.validate()?;
        a.train.validate()?;
    }
    Ok(arms)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub ca: bool,
    pub lg: bool,
    pub depth: usize,
    pub order: usize,
    pub thres: f64,
    pub seed: u64,
    pub cf1: f64,
    pub of1: f64,
    pub map: f64,
    pub precision: f64,
    pub recall: f64,
    pub best_epoch: usize,
}

/// Trains every arm with every seed and scores it on `test`.
pub fn ablation_run(
    train: &LabeledDataset,
    test: &LabeledDataset,
    arms: &[AblationArm],
    seeds: &[u64],
    protocol: Protocol,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(arms.len() * seeds.len());
    for arm in arms {
        for &seed in seeds {
            let mut tc = arm.train.clone();
            tc.seed = seed;
            let out = fit(train, None, &arm.network, &tc)?;
            let r = evaluate(&out.params, &out.partition, test, protocol)?;
            let s = arm.setting;
            log::info!(
                "ablation ca={} lg={} depth={} order={} thres={} seed={seed}: cf1 {:.4}",
                s.ca,
                s.lg,
                s.depth,
                s.order,
                s.thres,
                r.cf1
            );
            rows.push(AblationRow {
                ca: s.ca,
                lg: s.lg,
                depth: s.depth,
                order: s.order,
                thres: s.thres,
                seed,
                cf1: r.cf1,
                of1: r.of1,
                map: r.map,
                precision: r.precision,
                recall: r.recall,
                best_epoch: out.best_epoch,
            });
        }
    }
    Ok(rows)
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationSummary {
    pub ca: bool,
    pub lg: bool,
    pub depth: usize,
    pub order: usize,
    pub thres: f64,
    pub seeds: usize,
    pub median_cf1: f64,
    pub median_of1: f64,
    pub median_map: f64,
}

/// Per-setting medians over seeds, in first-appearance order.
pub fn summarize(rows: &[AblationRow]) -> Vec<AblationSummary> {
    let key = |r: &AblationRow| (r.ca, r.lg, r.depth, r.order, r.thres.to_bits());
    let mut keys = Vec::new();
    for r in rows {
        if !keys.contains(&key(r)) {
            keys.push(key(r));
        }
    }
    keys.into_iter()
        .map(|k| {
            let group: Vec<&AblationRow> = rows.iter().filter(|r| key(r) == k).collect();
            let pick = |f: fn(&AblationRow) -> f64| median(&group.iter().map(|r| f(r)).collect::<Vec<_>>());
            AblationSummary {
                ca: k.0,
                lg: k.1,
                depth: k.2,
                order: k.3,
                thres: f64::from_bits(k.4),
                seeds: group.len(),
                median_cf1: pick(|r| r.cf1),
                median_of1: pick(|r| r.of1),
                median_map: pick(|r| r.map),
            }
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
