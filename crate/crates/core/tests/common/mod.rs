#![allow(dead_code)]

use kcrf::chain::{sequence_windows, LabelAlphabet, LabeledSequence};
use kcrf::data::Dataset;
use kcrf::kernels::{Anchor, KernelSpec};
use kcrf::objective::Coefficients;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn alphabet(n: usize) -> LabelAlphabet {
    LabelAlphabet::new((0..n).map(|i| format!("y{i}"))).unwrap()
}

/// Random labeled dataset with features scaled by `scale`.
pub fn random_dataset(
    rng: &mut ChaCha8Rng,
    n_seq: usize,
    max_len: usize,
    feature_dim: usize,
    n_labels: usize,
    scale: f64,
) -> Dataset {
    let sequences = (0..n_seq)
        .map(|i| {
            let len = rng.random_range(1..=max_len);
            let features = (0..len)
                .map(|_| (0..feature_dim).map(|_| scale * normal(rng)).collect())
                .collect();
            let labels = (0..len).map(|_| rng.random_range(0..n_labels)).collect();
            LabeledSequence::new(format!("r{i}"), features, Some(labels)).unwrap()
        })
        .collect();
    Dataset::new(sequences, alphabet(n_labels)).unwrap()
}

/// Dataset with no sequences but a declared feature dimension.
pub fn empty_dataset(feature_dim: usize, n_labels: usize) -> Dataset {
    Dataset {
        sequences: Vec::new(),
        alphabet: alphabet(n_labels),
        feature_dim,
    }
}

/// Up to `max` anchors drawn from the data windows with random labels.
pub fn random_anchors(rng: &mut ChaCha8Rng, data: &Dataset, spec: &KernelSpec, max: usize) -> Vec<Anchor> {
    let windows: Vec<_> = data
        .sequences
        .iter()
        .enumerate()
        .flat_map(|(i, s)| sequence_windows(s, i, spec.window_radius))
        .collect();
    (0..max.min(windows.len() * data.n_labels()))
        .map(|_| {
            let w = windows[rng.random_range(0..windows.len())].clone();
            Anchor::new(w, rng.random_range(0..data.n_labels()))
        })
        .collect()
}

pub fn random_coefficients(rng: &mut ChaCha8Rng, n_anchors: usize, n_labels: usize, scale: f64) -> Coefficients {
    Coefficients {
        emission: DVector::from_fn(n_anchors, |_, _| scale * normal(rng)),
        transition: DMatrix::from_fn(n_labels, n_labels, |_, _| scale * normal(rng)),
    }
}

pub fn rel_close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + abs
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.clone().symmetric_eigen().eigenvalues.min()
}
