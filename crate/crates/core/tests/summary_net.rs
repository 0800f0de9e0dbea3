mod common;

use hbmc::autodiff::{Pooling, Tape};
use hbmc::rng::substream;
use hbmc::summary::{DatasetMeta, HierarchicalDataset, InputScaling, StackedBatch, SummaryConfig, SummaryNet};
use proptest::prelude::*;
use rand::Rng;

fn small_config(pooling: Pooling) -> SummaryConfig {
    SummaryConfig {
        input_dim: 2,
        num_models: 3,
        level1_equivariant: 1,
        level2_equivariant: 1,
        hidden: 16,
        pooled_dim: 8,
        equivariant_dim: 8,
        summary_dim: 8,
        head_hidden: 16,
        pooling,
        input_scaling: None,
    }
}

fn net(pooling: Pooling, seed: u64) -> SummaryNet {
    SummaryNet::new(small_config(pooling), &mut substream(seed, &[])).unwrap()
}

fn random_dataset(seed: u64, groups: usize, max_n: usize) -> HierarchicalDataset {
    let mut r = substream(seed, &[1]);
    let nested = (0..groups)
        .map(|_| {
            let n = r.random_range(1..=max_n);
            (0..n)
                .map(|_| vec![r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)])
                .collect()
        })
        .collect();
    HierarchicalDataset::new(nested, DatasetMeta::default()).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nested_permutations_leave_output_unchanged(seed in 0u64..10_000, groups in 1usize..8, max_n in 1usize..10) {
        let d = random_dataset(seed, groups, max_n);
        let p = common::nested_permutation(&d, seed);
        for pooling in [Pooling::Mean, Pooling::Sum] {
            let n = net(pooling, seed);
            let a = n.predict_one(&d).unwrap();
            let b = n.predict_one(&p).unwrap();
            prop_assert!(max_abs_diff(&a, &b) < 1e-9);
            let za = n.hierarchical_summary(&[&d]).unwrap();
            let zb = n.hierarchical_summary(&[&p]).unwrap();
            prop_assert!(max_abs_diff(&za[0], &zb[0]) < 1e-9);
        }
    }

    #[test]
    fn masked_rows_are_equivalent_to_deleted_rows(seed in 0u64..10_000, groups in 1usize..6) {
        let d = random_dataset(seed, groups, 8);
        let mut r = substream(seed, &[3]);
        let mask: Vec<Vec<bool>> = (0..d.num_groups())
            .map(|m| {
                let n = d.group_size(m);
                let keep = r.random_range(0..n);
                (0..n).map(|i| i == keep || r.random::<bool>()).collect()
            })
            .collect();
        let deleted: Vec<Vec<Vec<f64>>> = (0..d.num_groups())
            .map(|m| d.group_rows(m).zip(&mask[m]).filter(|(_, &k)| k).map(|(x, _)| x.to_vec()).collect())
            .collect();
        let deleted = HierarchicalDataset::new(deleted, DatasetMeta::default()).unwrap();
        let mut masked = d.clone();
        masked.set_mask(mask).unwrap();
        let n = net(Pooling::Mean, seed);
        let a = n.predict_one(&masked).unwrap();
        let b = n.predict_one(&deleted).unwrap();
        prop_assert!(max_abs_diff(&a, &b) < 1e-9);
    }
}

#[test]
fn permuting_rows_across_groups_changes_output() {
    let d = HierarchicalDataset::new(
        vec![
            vec![vec![1.0, 0.0], vec![1.5, 0.2]],
            vec![vec![-1.0, 0.5], vec![-2.0, -0.3]],
        ],
        DatasetMeta::default(),
    )
    .unwrap();
    let swapped = HierarchicalDataset::new(
        vec![
            vec![vec![1.0, 0.0], vec![-2.0, -0.3]],
            vec![vec![-1.0, 0.5], vec![1.5, 0.2]],
        ],
        DatasetMeta::default(),
    )
    .unwrap();
    let n = net(Pooling::Mean, 5);
    let a = n.predict_one(&d).unwrap();
    let b = n.predict_one(&swapped).unwrap();
    assert!(max_abs_diff(&a, &b) > 1e-6);
}

#[test]
fn duplicating_groups_doubles_sum_pooled_level_two() {
    let mut cfg = small_config(Pooling::Sum);
    cfg.level2_equivariant = 0;
    let n = SummaryNet::new(cfg, &mut substream(6, &[])).unwrap();
    let d = random_dataset(6, 4, 5);
    let mut doubled: Vec<usize> = (0..4).collect();
    doubled.extend(0..4);
    let dd = d.select_groups(&doubled).unwrap();
    let pooled = |x: &HierarchicalDataset| {
        let batch = StackedBatch::new(&[x]).unwrap();
        let mut tape = Tape::new(n.params());
        let f = n.forward(&mut tape, &batch).unwrap();
        tape.value(f.level2_pooled).data().to_vec()
    };
    let (a, b) = (pooled(&d), pooled(&dd));
    for (x, y) in a.iter().zip(&b) {
        assert!((2.0 * x - y).abs() < 1e-9 * (1.0 + y.abs()));
    }
}

#[test]
fn fully_masked_group_is_rejected() {
    let mut d = random_dataset(7, 3, 4);
    let mask: Vec<Vec<bool>> = (0..3).map(|m| vec![m != 1; d.group_size(m)]).collect();
    assert!(d.set_mask(mask).is_err());
}

#[test]
fn gradients_reach_every_layer_at_initialization() {
    let n = net(Pooling::Mean, 8);
    let data: Vec<HierarchicalDataset> = (0..16).map(|s| random_dataset(100 + s, 5, 6)).collect();
    let refs: Vec<&HierarchicalDataset> = data.iter().collect();
    let labels: Vec<usize> = (0..16).map(|i| i % 3).collect();
    let (_, g) = n.loss_and_grad(&refs, &labels).unwrap();
    for (li, spec) in n.params().layers().iter().enumerate() {
        let w = n.params().weight_range(li);
        let norm: f64 = g[w].iter().map(|v| v * v).sum();
        assert!(norm > 0.0, "no gradient reaches {}", spec.block);
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let n = net(Pooling::Mean, 9)
        .with_models(vec!["a".into(), "b".into(), "c".into()])
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    n.save(dir.path(), None).unwrap();
    let back = SummaryNet::load(dir.path()).unwrap();
    assert_eq!(back, n);
    let d = random_dataset(9, 3, 4);
    assert_eq!(back.predict_one(&d).unwrap(), n.predict_one(&d).unwrap());
}

fn affine(d: &HierarchicalDataset, shift: &[f64], scale: &[f64]) -> HierarchicalDataset {
    let groups = (0..d.num_groups())
        .map(|m| {
            d.group_rows(m)
                .map(|r| r.iter().zip(shift).zip(scale).map(|((v, a), b)| (v - a) / b).collect())
                .collect()
        })
        .collect();
    HierarchicalDataset::new(groups, d.meta.clone()).unwrap()
}

#[test]
fn fitted_scaling_standardizes_observed_rows() {
    let data: Vec<_> = (0..20)
        .map(|i| affine(&random_dataset(100 + i, 4, 6), &[-3.0, 0.0], &[0.1, 4.0]))
        .collect();
    let s = InputScaling::fit(&data).unwrap();
    for k in 0..2 {
        let col: Vec<f64> = data
            .iter()
            .flat_map(|d| (0..d.num_groups()).flat_map(move |m| d.group_rows(m).map(move |r| r[k])))
            .collect();
        let (mu, var) = (hbmc::stats::mean(&col), hbmc::stats::variance(&col));
        assert!((s.shift[k] - mu).abs() < 1e-9 * mu.abs().max(1.0));
        assert!((s.scale[k] - var.sqrt()).abs() < 1e-9 * var.sqrt());
    }
}

#[test]
fn fitted_scaling_ignores_masked_rows_and_constant_features() {
    let mut d = HierarchicalDataset::new(
        vec![vec![vec![1.0, 7.0], vec![3.0, 7.0], vec![1e6, 7.0]]],
        DatasetMeta::default(),
    )
    .unwrap();
    d.set_mask(vec![vec![true, true, false]]).unwrap();
    let s = InputScaling::fit(&[d]).unwrap();
    assert_eq!(s.shift, vec![2.0, 7.0]);
    assert!((s.scale[0] - 2f64.sqrt()).abs() < 1e-12);
    assert_eq!(s.scale[1], 1.0);
}

#[test]
fn scaling_equals_transforming_the_data() {
    let (shift, scale) = (vec![0.5, -1.0], vec![2.0, 0.25]);
    let plain = net(Pooling::Mean, 21);
    let mut cfg = small_config(Pooling::Mean);
    cfg.input_scaling = Some(InputScaling {
        shift: shift.clone(),
        scale: scale.clone(),
    });
    let scaled = SummaryNet::from_params(cfg, plain.params().clone()).unwrap();
    for i in 0..5 {
        let d = random_dataset(200 + i, 3, 5);
        let a = scaled.predict_one(&d).unwrap();
        let b = plain.predict_one(&affine(&d, &shift, &scale)).unwrap();
        assert!(max_abs_diff(&a, &b) < 1e-12);
    }
    let dir = tempfile::tempdir().unwrap();
    scaled.save(dir.path(), None).unwrap();
    assert_eq!(SummaryNet::load(dir.path()).unwrap(), scaled);
}

#[test]
fn invalid_scaling_is_rejected() {
    for (shift, scale) in [
        (vec![0.0], vec![1.0]),
        (vec![0.0, 0.0], vec![1.0, 0.0]),
        (vec![f64::NAN, 0.0], vec![1.0, 1.0]),
    ] {
        let mut cfg = small_config(Pooling::Mean);
        cfg.input_scaling = Some(InputScaling { shift, scale });
        assert!(matches!(
            SummaryNet::new(cfg, &mut substream(1, &[])),
            Err(hbmc::Error::Config(_))
        ));
    }
}
