use ndarray::Array2;
use proptest::prelude::*;

use dmckn::autodiff::Tape;
use dmckn::dataio::{synth_dataset, LabeledDataset, SynthConfig};
use dmckn::grid::GridSpec;
use dmckn::network::{Activation, LayerConfig, ModelParams, NetworkConfig};
use dmckn::training::{
    fit, group_labels, head_targets, sample_negatives, total_loss, GroupPartition, Protocol, TrainConfig,
};

fn small_task(seed: u64, images: usize) -> (LabeledDataset, LabeledDataset) {
    let grid = GridSpec::new(3, 4).unwrap();
    let mut cfg = SynthConfig::new(seed, grid, images, 6);
    cfg.visual_dim = 8;
    synth_dataset(&cfg).unwrap().split_at(images * 3 / 4)
}

fn small_net(grid: GridSpec, visual_dim: usize) -> NetworkConfig {
    let mut net = NetworkConfig::uniform(grid, visual_dim, 1, LayerConfig::new(2, 8, 0.1, 0.5));
    net.pos_dim = 2;
    net.key_dim = 4;
    net.activation = Activation::Ramp;
    net
}

fn quick(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        max_lr: 1e-2,
        min_lr: 1e-3,
        early_stop_patience: 0,
        seed,
        groups: 2,
        chunk_size: 8,
        protocol: Protocol::Threshold,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let (train, val) = small_task(1, 48);
    let net = small_net(train.grid, train.visual_dim());
    let mut cfg = quick(3, 3);
    cfg.max_lr = 0.0;
    cfg.min_lr = 0.0;
    let out = fit(&train, Some(&val), &net, &cfg).unwrap();

    let partition = group_labels(&train.labels, cfg.groups).unwrap();
    let mut init = ModelParams::init(&net, &partition.group_sizes(), cfg.seed).unwrap();
    let (mean, std) = train.channel_stats();
    let scale: Vec<f64> = std.iter().map(|&s| if s > 0.0 { 1.0 / s } else { 1.0 }).collect();
    init.set_input_normalization(&mean, &scale).unwrap();
    for ((name, a), (_, b)) in out.params.named().zip(init.named()) {
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()), "{name} moved");
    }
    assert_eq!(out.history.len(), 3);
    assert!(out.history.windows(2).all(|w| w[0].val_cf1 == w[1].val_cf1));
}

#[test]
fn zero_heads_give_ln2_per_weighted_term() {
    let (train, _) = small_task(2, 20);
    let net = small_net(train.grid, train.visual_dim());
    let partition = group_labels(&train.labels, 2).unwrap();
    let mut params = ModelParams::init(&net, &partition.group_sizes(), 5).unwrap();
    for g in 0..partition.n_groups() {
        params.head_mut(g).fill(0.0);
    }
    let mask = sample_negatives(&train.labels, 1, 9);
    let (_, w) = head_targets(&partition, &train.labels, &mask);
    let loss = total_loss(&params, &partition, &train.feature_refs(), &train.labels, &mask).unwrap();
    let expected = w.sum() * std::f64::consts::LN_2;
    assert!((loss - expected).abs() < 1e-10 * expected, "{loss} vs {expected}");
}

#[test]
fn confident_logits_and_masked_terms_leave_only_regularization() {
    let mut tape = Tape::new();
    let targets = ndarray::array![[1.0, 0.0], [0.0, 1.0]];
    let logits = tape.leaf(ndarray::array![[60.0, -60.0], [-60.0, 60.0]]);
    let ce = tape.logistic_loss(logits, targets, Array2::ones((2, 2))).unwrap();
    assert!(tape.scalar(ce) < 1e-25);

    // With every term masked out the objective is ½‖W‖².
    let (train, _) = small_task(4, 12);
    let net = small_net(train.grid, train.visual_dim());
    let partition = GroupPartition::single(train.n_labels());
    let params = ModelParams::init(&net, &partition.group_sizes(), 1).unwrap();
    let all = Array2::ones(train.labels.dim());
    let loss = total_loss(&params, &partition, &train.feature_refs(), &train.labels, &all).unwrap();
    let reg = 0.5 * params.head(0).iter().map(|x| x * x).sum::<f64>();
    assert!(loss > reg);
    let no_weight = Array2::zeros(train.labels.dim());
    let only_reg = total_loss(&params, &partition, &train.feature_refs(), &train.labels, &no_weight).unwrap();
    assert!((only_reg - reg).abs() < 1e-12 * reg.max(1.0));
}

#[test]
fn training_loss_falls_over_ten_epochs() {
    let mut ratios = Vec::new();
    for seed in 1..=5 {
        let (train, val) = small_task(10 + seed, 96);
        let net = small_net(train.grid, train.visual_dim());
        let out = fit(&train, Some(&val), &net, &quick(seed, 10)).unwrap();
        let h = &out.history;
        assert_eq!(h.len(), 10);
        ratios.push(h[9].train_loss / h[0].train_loss);
    }
    ratios.sort_by(f64::total_cmp);
    assert!(ratios[2] < 0.9, "median loss ratio {ratios:?}");
}

#[test]
fn cosine_schedule_runs_from_max_to_min() {
    let cfg = TrainConfig {
        max_lr: 0.1,
        min_lr: 0.01,
        ..TrainConfig::default()
    };
    assert_eq!(cfg.learning_rate(0, 100), 0.1);
    assert!((cfg.learning_rate(100, 100) - 0.01).abs() < 1e-15);
    assert!((cfg.learning_rate(50, 100) - 0.055).abs() < 1e-12);
    let lrs: Vec<f64> = (0..=100).map(|s| cfg.learning_rate(s, 100)).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(cfg.learning_rate(7, 0), 0.1);
}

#[test]
fn invalid_configs_are_rejected() {
    let base = TrainConfig::default();
    let cases = [
        TrainConfig {
            batch_size: 0,
            ..base.clone()
        },
        TrainConfig {
            min_lr: 1.0,
            max_lr: 0.1,
            ..base.clone()
        },
        TrainConfig {
            beta1: 1.0,
            ..base.clone()
        },
        TrainConfig {
            eps: 0.0,
            ..base.clone()
        },
        TrainConfig {
            weight_decay: -1.0,
            ..base.clone()
        },
        TrainConfig {
            groups: 0,
            ..base.clone()
        },
        TrainConfig {
            validation_fraction: 1.0,
            ..base.clone()
        },
        TrainConfig {
            ema_decay: Some(1.0),
            ..base.clone()
        },
        TrainConfig {
            protocol: Protocol::TopK(0),
            ..base.clone()
        },
    ];
    for c in cases {
        assert!(c.validate().is_err(), "{c:?}");
    }
    base.validate().unwrap();
}

#[test]
fn mismatched_dataset_is_a_config_error() {
    let (train, val) = small_task(1, 16);
    let net = small_net(GridSpec::new(4, 4).unwrap(), train.visual_dim());
    assert!(matches!(
        fit(&train, Some(&val), &net, &quick(1, 1)),
        Err(dmckn::Error::Config(_))
    ));
}

fn label_matrix() -> impl Strategy<Value = Array2<f64>> {
    (1usize..10, 1usize..12).prop_flat_map(|(n, l)| {
        prop::collection::vec(prop::bool::weighted(0.3), n * l)
            .prop_map(move |b| Array2::from_shape_fn((n, l), |(i, k)| if b[i * l + k] { 1.0 } else { -1.0 }))
    })
}

proptest! {
    #[test]
    fn negative_sampling_keeps_positives_and_counts(y in label_matrix(), ratio in 0usize..5, seed in any::<u64>()) {
        let mask = sample_negatives(&y, ratio, seed);
        prop_assert_eq!(mask.dim(), y.dim());
        prop_assert_eq!(&mask, &sample_negatives(&y, ratio, seed));
        for (row_y, row_m) in y.rows().into_iter().zip(mask.rows()) {
            prop_assert!(row_m.iter().all(|&m| m == 0.0 || m == 1.0));
            let pos = row_y.iter().filter(|&&v| v > 0.0).count();
            let neg = row_y.len() - pos;
            let kept_neg = row_y.iter().zip(row_m).filter(|(&v, &m)| v < 0.0 && m == 1.0).count();
            prop_assert!(row_y.iter().zip(row_m).all(|(&v, &m)| v < 0.0 || m == 1.0));
            let expected = if ratio == 0 {
                neg
            } else if pos == 0 {
                ratio.min(neg).max(1).min(neg)
            } else {
                (ratio * pos).min(neg)
            };
            prop_assert_eq!(kept_neg, expected);
        }
    }
}
