//! Helpers shared by integration tests and the acceptance harness.
#![allow(dead_code)]

use hbmc::autodiff::Pooling;
use hbmc::rng::substream;
use hbmc::summary::{DatasetMeta, HierarchicalDataset, SummaryConfig, SummaryNet};
use rand::seq::SliceRandom;
use rand::Rng;

/// A small network with randomly drawn depth, widths and pooling.
pub fn random_net(seed: u64) -> SummaryNet {
    let mut r = substream(seed, &[1]);
    let cfg = SummaryConfig {
        input_dim: r.random_range(1..=3),
        num_models: r.random_range(2..=4),
        level1_equivariant: r.random_range(0..=2),
        level2_equivariant: r.random_range(0..=2),
        hidden: r.random_range(3..=8),
        pooled_dim: r.random_range(2..=5),
        equivariant_dim: r.random_range(2..=5),
        summary_dim: r.random_range(2..=5),
        head_hidden: r.random_range(3..=8),
        pooling: if r.random::<bool>() {
            Pooling::Mean
        } else {
            Pooling::Sum
        },
        input_scaling: None,
    };
    let mut net = SummaryNet::new(cfg, &mut r).unwrap();
    // Non-zero biases keep ReLU kinks away from the origin.
    let biases: Vec<_> = (0..net.params().layers().len())
        .map(|l| net.params().bias_range(l))
        .collect();
    for range in biases {
        for b in &mut net.params_mut().values_mut()[range] {
            *b = r.random_range(-0.3..0.3);
        }
    }
    net
}

/// Random ragged dataset of the given dimension.
pub fn random_dataset(dim: usize, seed: u64) -> HierarchicalDataset {
    let mut r = substream(seed, &[2]);
    let groups = (0..r.random_range(1..=5))
        .map(|_| {
            (0..r.random_range(1..=6) * dim)
                .map(|_| r.random_range(-2.0..2.0))
                .collect()
        })
        .collect();
    HierarchicalDataset::from_flat(dim, groups, DatasetMeta::default()).unwrap()
}

/// Relative error `|g - fd| / |fd|` (Euclidean norms) between the reverse-mode
/// gradient of the batch loss and central finite differences.
pub fn gradient_relative_error(net: &SummaryNet, data: &[HierarchicalDataset], labels: &[usize]) -> f64 {
    let refs: Vec<&HierarchicalDataset> = data.iter().collect();
    let (_, g) = net.loss_and_grad(&refs, labels).unwrap();
    let h = 1e-6;
    let mut probe = net.clone();
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, gi) in g.iter().enumerate() {
        let x = net.params().values()[i];
        probe.params_mut().values_mut()[i] = x + h;
        let up = probe.loss(&refs, labels).unwrap();
        probe.params_mut().values_mut()[i] = x - h;
        let down = probe.loss(&refs, labels).unwrap();
        probe.params_mut().values_mut()[i] = x;
        let fd = (up - down) / (2.0 * h);
        num += (gi - fd).powi(2);
        den += fd * fd;
    }
    (num / den).sqrt()
}

/// One random network/input configuration for the gradient check. Draws
/// whose softmax saturates (flat loss, zero gradient) are redrawn.
pub fn gradient_case(seed: u64) -> f64 {
    for attempt in 0.. {
        let s = seed * 1000 + attempt;
        let net = random_net(s);
        let dim = net.config().input_dim;
        let j = net.config().num_models;
        let data: Vec<HierarchicalDataset> = (0..3).map(|b| random_dataset(dim, s * 10 + b)).collect();
        let refs: Vec<&HierarchicalDataset> = data.iter().collect();
        let saturated = net
            .predict(&refs)
            .unwrap()
            .iter()
            .flatten()
            .any(|&p| !(1e-6..=1.0 - 1e-6).contains(&p));
        if saturated {
            continue;
        }
        let labels: Vec<usize> = (0..3).map(|b| (s as usize + b) % j).collect();
        return gradient_relative_error(&net, &data, &labels);
    }
    unreachable!()
}

/// Shuffles rows within every group and then the groups themselves.
pub fn nested_permutation(d: &HierarchicalDataset, seed: u64) -> HierarchicalDataset {
    let mut r = substream(seed, &[3]);
    let mut groups: Vec<Vec<Vec<f64>>> = (0..d.num_groups())
        .map(|m| {
            let mut rows: Vec<Vec<f64>> = d.group_rows(m).map(|x| x.to_vec()).collect();
            rows.shuffle(&mut r);
            rows
        })
        .collect();
    groups.shuffle(&mut r);
    HierarchicalDataset::new(groups, DatasetMeta::default()).unwrap()
}
