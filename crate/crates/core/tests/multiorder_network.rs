use nalgebra::DMatrix;
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dmckn::grid::{build_grid, higher_order_neighbors, Direction, NeighborhoodSystem};
use dmckn::multiorder::{build_multiorder, order_context, AttentionParams};
use dmckn::network::{
    cell_impacts, embed, embedding_gram, image_kernel, predict_logits, Activation, LayerConfig, ModelParams,
    NetworkConfig,
};

fn attention(d: usize, orders: usize, seed: u64) -> Vec<Vec<AttentionParams>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (2..=orders)
        .map(|_| vec![AttentionParams::random(d, 3, d, &mut rng)])
        .collect()
}

fn random_features(n: usize, d: usize, seed: u64) -> Array2<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
}

/// Cell `steps` moves away in `dir`, by coordinates.
fn walk(rows: usize, cols: usize, cell: usize, dir: Direction, steps: usize) -> Option<usize> {
    let (r, c) = ((cell / cols) as isize, (cell % cols) as isize);
    let (dr, dc) = dir.offset();
    let (r2, c2) = (r + dr * steps as isize, c + dc * steps as isize);
    (r2 >= 0 && c2 >= 0 && (r2 as usize) < rows && (c2 as usize) < cols).then(|| r2 as usize * cols + c2 as usize)
}

#[test]
fn chain_of_four_reaches_exactly_p_steps() {
    let grid = build_grid(1, 4).unwrap();
    let ns = NeighborhoodSystem::init(&grid);
    let phis = random_features(4, 2, 1);
    let att = attention(2, 3, 2);
    let ctx = build_multiorder(&phis, &ns, &att, 3, 0.5).unwrap();
    for x in 0..4 {
        for p in 1..=3 {
            let right = ctx.entry(x, Direction::Right, p);
            let expected: Vec<usize> = (x + p < 4).then_some(x + p).into_iter().collect();
            assert_eq!(right.indices, expected, "cell {x} order {p}");
            if !right.is_empty() {
                assert_eq!(right.probs, vec![1.0]);
            }
            assert!(ctx.entry(x, Direction::Up, p).is_empty());
            assert!(ctx.entry(x, Direction::Down, p).is_empty());
        }
    }
    // Off-grid walks contribute exact zeros; on-grid ones the value row.
    for p in 2..=3 {
        let ap = &att[p - 2][0];
        for x in 0..4 {
            let v = order_context(x, Direction::Right, p, &phis, ap, &ctx).unwrap();
            if x + p < 4 {
                let expected = phis.row(x + p).dot(&ap.wv);
                assert!(v.iter().zip(&expected).all(|(a, b)| (a - b).abs() < 1e-15));
            } else {
                assert!(v.iter().all(|&a| a == 0.0));
            }
        }
    }
    assert!(order_context(0, Direction::Right, 4, &phis, &att[0][0], &ctx).is_err());
}

#[test]
fn permuting_images_permutes_logits() {
    let grid = build_grid(3, 3).unwrap();
    let mut net = NetworkConfig::uniform(grid, 3, 2, LayerConfig::new(2, 4, 0.2, 0.5));
    net.pos_dim = 2;
    net.key_dim = 3;
    net.activation = Activation::Ramp;
    let params = ModelParams::init(&net, &[2, 3], 8).unwrap();
    let images: Vec<Array2<f64>> = (0..5).map(|i| random_features(9, 3, 100 + i)).collect();
    let refs: Vec<&Array2<f64>> = images.iter().collect();
    let logits = predict_logits(&params, &refs).unwrap();
    let order = [3, 0, 4, 1, 2];
    let permuted: Vec<&Array2<f64>> = order.iter().map(|&i| &images[i]).collect();
    let plogits = predict_logits(&params, &permuted).unwrap();
    for (row, &i) in order.iter().enumerate() {
        assert_eq!(plogits.row(row), logits.row(i));
    }
    // Batching does not change an image's scores.
    for (i, img) in images.iter().enumerate() {
        let alone = predict_logits(&params, &[img]).unwrap();
        let diff = alone
            .row(0)
            .iter()
            .zip(logits.row(i))
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff < 1e-12);
    }
}

#[test]
fn identical_images_have_identical_embeddings_and_psd_gram() {
    let grid = build_grid(2, 3).unwrap();
    let mut net = NetworkConfig::uniform(grid, 4, 1, LayerConfig::new(3, 5, 0.1, 0.3));
    net.pos_dim = 2;
    net.key_dim = 2;
    let params = ModelParams::init(&net, &[3], 2).unwrap();
    let a = random_features(6, 4, 9);
    let ea = embed(&params, &a).unwrap();
    assert_eq!(embed(&params, &a.clone()).unwrap(), ea);
    assert!((image_kernel(&ea, &ea).unwrap() - ea.dot(&ea)).abs() < 1e-15);

    let rows: Vec<_> = (0..6)
        .map(|i| embed(&params, &random_features(6, 4, 20 + i)).unwrap())
        .collect();
    let e = Array2::from_shape_fn((6, rows[0].len()), |(i, j)| rows[i][j]);
    let g = embedding_gram(&e);
    let gm = DMatrix::from_fn(6, 6, |i, j| g[[i, j]]);
    let scale = g.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    assert!(gm.symmetric_eigen().eigenvalues.min() > -1e-10 * scale);
    assert!(image_kernel(&ea, &ndarray::Array1::zeros(ea.len() + 1)).is_err());
}

#[test]
fn uniform_image_without_context_spreads_impact_by_pool_weight_only() {
    let grid = build_grid(3, 4).unwrap();
    let mut net = NetworkConfig::uniform(grid, 3, 2, LayerConfig::new(2, 4, 0.0, 0.5));
    net.pos_dim = 0;
    net.key_dim = 2;
    let params = ModelParams::init(&net, &[2], 5).unwrap();
    let x = Array2::from_shape_fn((12, 3), |(_, j)| 0.3 + j as f64);
    let (impacts, contexts) = cell_impacts(&params, &x).unwrap();
    assert_eq!((impacts.len(), contexts.len()), (12, 2));
    let w = params.pool_weights();
    let per_weight: Vec<f64> = impacts.iter().enumerate().map(|(i, v)| v / w[[i, 0]].abs()).collect();
    assert!(per_weight[0] > 0.0);
    for v in &per_weight {
        assert!((v - per_weight[0]).abs() <= 1e-12 * per_weight[0], "{per_weight:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn grid_walk_entries_match_coordinates(rows in 1usize..5, cols in 1usize..5, order in 1usize..4, thres in 0.0f64..=1.0, seed in 0u64..1000) {
        let grid = build_grid(rows, cols).unwrap();
        let ns = NeighborhoodSystem::init(&grid);
        let n = rows * cols;
        let phis = random_features(n, 3, seed);
        let ctx = build_multiorder(&phis, &ns, &attention(3, order, seed), order, thres).unwrap();
        for dir in Direction::ALL {
            for p in 1..=order {
                let sets = higher_order_neighbors(&grid, dir, p).unwrap();
                prop_assert_eq!(sets.len(), n);
                for (x, set) in sets.iter().enumerate() {
                    let expected: Vec<usize> = walk(rows, cols, x, dir, p).into_iter().collect();
                    prop_assert_eq!(&ctx.entry(x, dir, p).indices, &expected);
                    prop_assert_eq!(set.iter().copied().collect::<Vec<_>>(), expected);
                }
            }
        }
    }
}
