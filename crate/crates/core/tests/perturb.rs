use hbmc::perturb::*;
use hbmc::rng::substream;
use hbmc::simulators::{EamSettings, Family};
use hbmc::summary::{DatasetMeta, HierarchicalDataset, SummaryConfig, SummaryNet};

fn net() -> SummaryNet {
    let cfg = SummaryConfig {
        hidden: 8,
        pooled_dim: 4,
        equivariant_dim: 4,
        summary_dim: 4,
        head_hidden: 8,
        ..Default::default()
    };
    SummaryNet::new(cfg, &mut substream(31, &[])).unwrap()
}

fn data() -> HierarchicalDataset {
    Family::NormalM2
        .simulate(&[20; 6], &EamSettings::default(), 0, &mut substream(32, &[]))
        .unwrap()
}

#[test]
fn mask_sweep_report_structure() {
    let (n, d) = (net(), data());
    let r = perturb(&n, &d, PerturbMode::MaskSweep, 10, 1).unwrap();
    let labels: Vec<&str> = r.rows.iter().map(|x| x.label.as_str()).collect();
    assert_eq!(
        labels,
        ["0.00", "0.05", "0.10", "0.15", "0.20", "0.25", "0.30", "0.35", "0.40"]
    );
    // The zero-fraction row reproduces the unperturbed prediction exactly.
    assert_eq!(r.rows[0].mean, r.unperturbed);
    assert!(r.rows[0].sd.iter().all(|&s| s == 0.0));
    for row in &r.rows {
        assert_eq!(row.repetitions, 10);
        assert!((row.argmax_freq.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert_eq!(r, perturb(&n, &d, PerturbMode::MaskSweep, 10, 1).unwrap());
}

#[test]
fn mask_fraction_hides_the_rounded_share() {
    let d = data();
    let masked = mask_fraction(&d, 0.25, &mut substream(33, &[])).unwrap();
    for m in 0..d.num_groups() {
        assert_eq!(masked.observed_count(m), 15);
    }
    assert_eq!(mask_fraction(&d, 0.0, &mut substream(33, &[])).unwrap(), d);
    assert!(mask_fraction(&d, 1.0, &mut substream(33, &[])).is_err());
    // Tiny groups always keep one observation.
    let tiny = HierarchicalDataset::from_flat(1, vec![vec![1.0, 2.0]; 3], DatasetMeta::default()).unwrap();
    let m = mask_fraction(&tiny, 0.9, &mut substream(34, &[])).unwrap();
    assert!((0..3).all(|g| m.observed_count(g) == 1));
}

#[test]
fn leave_one_out_and_bootstrap_rows() {
    let (n, d) = (net(), data());
    let logo = perturb(&n, &d, PerturbMode::LeaveOneGroupOut, 0, 0).unwrap();
    assert_eq!(logo.rows.len(), 6);
    assert!(logo.rows.iter().all(|r| r.repetitions == 1));
    let boot = perturb(&n, &d, PerturbMode::BootstrapGroups, 25, 2).unwrap();
    assert_eq!(boot.rows.len(), 1);
    assert_eq!(boot.rows[0].repetitions, 25);
    // Identical groups make every bootstrap copy equal to the original.
    let same = HierarchicalDataset::from_flat(1, vec![vec![0.3, -0.1, 0.8]; 5], DatasetMeta::default()).unwrap();
    let b = perturb(&n, &same, PerturbMode::BootstrapGroups, 10, 3).unwrap();
    for (x, y) in b.rows[0].mean.iter().zip(&b.unperturbed) {
        assert!((x - y).abs() < 1e-12);
    }
    assert!(perturb(&n, &d, PerturbMode::BootstrapGroups, 0, 0).is_err());
}

#[test]
fn unanimous_repetitions_give_frequency_exactly_one() {
    for n in [3, 10, 49, 100] {
        let row = PerturbRow::from_pmps("0.10".into(), &vec![vec![0.2, 0.7, 0.1]; n]);
        assert_eq!(row.argmax_freq, vec![0.0, 1.0, 0.0]);
    }
}
