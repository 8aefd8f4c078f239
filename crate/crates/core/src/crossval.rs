//! k-fold cross-validation over whole sequences.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Metrics};
use crate::model::{fit, FitOutcome};

/// Test indices of each fold. Position `p` in the (optionally shuffled)
/// order goes to fold `p mod k`.
pub fn fold_indices(n: usize, k: usize, seed: Option<u64>) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n {
        return Err(Error::Config(format!(
            "fold count must satisfy 2 <= k <= {n} (number of sequences), got {k}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let mut folds = vec![Vec::new(); k];
    for (p, i) in order.into_iter().enumerate() {
        folds[p % k].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    pub test_indices: Vec<usize>,
    pub metrics: Metrics,
    pub outcome: FitOutcome,
}

#[derive(Clone, Debug)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub mean_accuracy: f64,
    /// Sample standard deviation across folds.
    pub sd_accuracy: f64,
}

pub fn cross_validate(data: &Dataset, config: &TrainConfig, k: usize, seed: Option<u64>) -> Result<CvReport> {
    config.validate()?;
    data.require_labeled()?;
    let folds = fold_indices(data.len(), k, seed)?;
    let results = folds
        .par_iter()
        .enumerate()
        .map(|(fold, test)| {
            let train: Vec<usize> = (0..data.len()).filter(|i| test.binary_search(i).is_err()).collect();
            let outcome = fit(&data.subset(&train), config)?;
            let test_data = data.subset(test);
            let predicted = outcome.model.predict_dataset(&test_data)?;
            let gold: Vec<Vec<usize>> = test_data
                .sequences
                .iter()
                .map(|s| s.require_labels().map(<[usize]>::to_vec))
                .collect::<Result<_>>()?;
            let metrics = evaluate(&gold, &predicted, &data.alphabet)?;
            Ok(FoldResult {
                fold,
                test_indices: test.clone(),
                metrics,
                outcome,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let acc: Vec<f64> = results.iter().map(|r| r.metrics.token_accuracy).collect();
    let mean = acc.iter().sum::<f64>() / k as f64;
    let var = acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    Ok(CvReport {
        folds: results,
        mean_accuracy: mean,
        sd_accuracy: var.sqrt(),
    })
}

impl fmt::Display for CvReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "fold\ttest_sequences\ttoken_accuracy\tsequence_accuracy\tconverged\tobjective")?;
        for r in &self.folds {
            writeln!(
                f,
                "{}\t{}\t{:.6}\t{:.6}\t{}\t{:.6}",
                r.fold,
                r.test_indices.len(),
                r.metrics.token_accuracy,
                r.metrics.sequence_accuracy,
                r.outcome.state.converged,
                r.outcome.state.final_objective().unwrap_or(f64::NAN),
            )?;
        }
        writeln!(f, "mean_accuracy\t{:.6}", self.mean_accuracy)?;
        writeln!(f, "sd_accuracy\t{:.6}", self.sd_accuracy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn modulo_split() {
        assert_eq!(fold_indices(5, 2, None).unwrap(), vec![vec![0, 2, 4], vec![1, 3]]);
    }

    #[test]
    fn leave_one_out() {
        let f = fold_indices(4, 4, None).unwrap();
        assert_eq!(f, vec![vec![0], vec![1], vec![2], vec![3]]);
    }

    #[test]
    fn invalid_k() {
        assert!(matches!(fold_indices(3, 1, None), Err(Error::Config(_))));
        assert!(matches!(fold_indices(3, 4, None), Err(Error::Config(_))));
    }

    #[test]
    fn seeded_shuffle_is_reproducible() {
        assert_eq!(fold_indices(30, 5, Some(9)).unwrap(), fold_indices(30, 5, Some(9)).unwrap());
        assert_ne!(fold_indices(30, 5, Some(9)).unwrap(), fold_indices(30, 5, None).unwrap());
    }

    proptest! {
        #[test]
        fn folds_partition(n in 2usize..60, k_raw in 2usize..60, seed in proptest::option::of(any::<u64>())) {
            let k = 2 + k_raw % (n - 1);
            let folds = fold_indices(n, k, seed).unwrap();
            prop_assert_eq!(folds.len(), k);
            let mut all: Vec<usize> = folds.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert!(folds.iter().all(|f| !f.is_empty()));
        }
    }
}
