//! Sparse greedy basis selection by incomplete Cholesky factorization of the
//! emission Gram matrix, pivoting on the largest diagonal residual.
//!
//! Gram columns are evaluated lazily, one per selected pivot, so a rank-`r`
//! factor of `n` candidates costs `O(n r)` kernel evaluations and `O(n r²)`
//! arithmetic; the full `n x n` matrix is never formed.

use std::collections::HashSet;
use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::chain::sequence_windows;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{Anchor, KernelSpec};
use crate::objective::BasisSet;

/// Residuals below this (in absolute value) after an update are treated as round-off.
const ROUND_OFF: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Tolerance {
    Absolute(f64),
    /// Fraction of the largest initial diagonal entry.
    Relative(f64),
}

impl Tolerance {
    fn resolve(self, initial_max: f64) -> f64 {
        match self {
            Tolerance::Absolute(t) => t,
            Tolerance::Relative(r) => r * initial_max,
        }
    }
}

/// Diagnostics of one pivot selection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PivotStep {
    pub pivot: usize,
    /// Residual of the pivot just before it was selected.
    pub residual: f64,
    /// Share of the initial trace captured after this step.
    pub captured_fraction: f64,
}

/// Partial pivoted Cholesky factor `K ≈ L Lᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct CholeskyFactor {
    pub pivots: Vec<usize>,
    /// `n x r`; row `pivots[j]` has zeros past column `j`.
    pub factor: DMatrix<f64>,
    pub residual_diag: DVector<f64>,
    pub initial_trace: f64,
    pub steps: Vec<PivotStep>,
}

impl CholeskyFactor {
    pub fn rank(&self) -> usize {
        self.pivots.len()
    }

    pub fn len(&self) -> usize {
        self.factor.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.factor.nrows() == 0
    }

    pub fn captured_fraction(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.captured_fraction)
    }

    /// Smallest rank whose captured trace fraction reaches `fraction`, if any.
    pub fn rank_for_fraction(&self, fraction: f64) -> Option<usize> {
        self.steps
            .iter()
            .position(|s| s.captured_fraction >= fraction)
            .map(|i| i + 1)
    }

    /// The factor after its first `rank` steps. Greedy steps never depend on
    /// later ones, so the prefix is itself a valid factorization.
    pub fn truncated(&self, rank: usize) -> Self {
        let rank = rank.min(self.rank());
        let factor = self.factor.columns(0, rank).into_owned();
        let mut residual_diag = self.residual_diag.clone();
        // restore residuals removed by the discarded columns
        for j in rank..self.rank() {
            for i in 0..self.len() {
                residual_diag[i] += self.factor[(i, j)] * self.factor[(i, j)];
            }
        }
        for &p in &self.pivots[..rank] {
            residual_diag[p] = 0.0;
        }
        Self {
            pivots: self.pivots[..rank].to_vec(),
            factor,
            residual_diag,
            initial_trace: self.initial_trace,
            steps: self.steps[..rank].to_vec(),
        }
    }

    /// Tab-separated per-step dump: step, pivot, residual, captured fraction.
    pub fn write_report<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "step\tpivot\tresidual\tcaptured_fraction")?;
        for (i, s) in self.steps.iter().enumerate() {
            writeln!(
                out,
                "{}\t{}\t{:.12e}\t{:.12}",
                i + 1,
                s.pivot,
                s.residual,
                s.captured_fraction
            )?;
        }
        Ok(())
    }
}

/// Greedy pivoted Cholesky of an implicit PSD matrix given by `entry(i, j)`.
///
/// Picks the largest residual each step (ties go to the smallest index) and
/// stops at `rank_budget` or once the largest residual falls below the tolerance.
pub fn pivoted_cholesky<F>(
    n: usize,
    entry: F,
    rank_budget: usize,
    tolerance: Tolerance,
) -> Result<CholeskyFactor>
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    if n == 0 {
        return Err(Error::Input("no candidates to factorize".into()));
    }
    if rank_budget == 0 {
        return Err(Error::Config("rank_budget must be >= 1".into()));
    }
    let mut residual: Vec<f64> = (0..n).map(|i| entry(i, i)).collect();
    let initial_max = residual.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(initial_max > 0.0) {
        return Err(Error::DegenerateKernel(initial_max));
    }
    let initial_trace: f64 = residual.iter().sum();
    let tol = tolerance.resolve(initial_max);

    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut pivots: Vec<usize> = Vec::new();
    let mut is_pivot = vec![false; n];
    let mut steps = Vec::new();
    let mut remaining = initial_trace;

    while pivots.len() < rank_budget.min(n) {
        let (pivot, max_residual) = residual
            .iter()
            .enumerate()
            .filter(|(i, _)| !is_pivot[*i])
            .fold((usize::MAX, f64::NEG_INFINITY), |best, (i, &r)| {
                if r > best.1 {
                    (i, r)
                } else {
                    best
                }
            });
        if pivot == usize::MAX || !(max_residual > 0.0) || max_residual < tol {
            break;
        }

        let root = max_residual.sqrt();
        let column: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                if i == pivot {
                    root
                } else if is_pivot[i] {
                    0.0
                } else {
                    let mut v = entry(i, pivot);
                    for c in &columns {
                        v -= c[i] * c[pivot];
                    }
                    v / root
                }
            })
            .collect();

        for (i, r) in residual.iter_mut().enumerate() {
            if i == pivot {
                *r = 0.0;
            } else if !is_pivot[i] {
                *r -= column[i] * column[i];
                if *r < 0.0 && *r > -ROUND_OFF {
                    *r = 0.0;
                }
            }
        }
        is_pivot[pivot] = true;
        pivots.push(pivot);
        columns.push(column);

        let now: f64 = residual.iter().sum();
        remaining = now.min(remaining);
        steps.push(PivotStep {
            pivot,
            residual: max_residual,
            captured_fraction: (1.0 - remaining / initial_trace).clamp(0.0, 1.0),
        });
    }

    let rank = pivots.len();
    let factor = DMatrix::from_fn(n, rank, |i, j| columns[j][i]);
    Ok(CholeskyFactor {
        pivots,
        factor,
        residual_diag: DVector::from_vec(residual),
        initial_trace,
        steps,
    })
}

/// Every (window, label) pair over all training positions and all labels,
/// with bitwise-identical pairs kept once.
pub fn candidate_anchors(data: &Dataset, spec: &KernelSpec) -> Vec<Anchor> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, seq) in data.sequences.iter().enumerate() {
        for window in sequence_windows(seq, i, spec.window_radius) {
            for label in 0..data.n_labels() {
                let anchor = Anchor::new(window.clone(), label);
                if seen.insert(anchor.key()) {
                    out.push(anchor);
                }
            }
        }
    }
    out
}

pub fn incomplete_cholesky(
    candidates: &[Anchor],
    spec: &KernelSpec,
    n_labels: usize,
    rank_budget: usize,
    tolerance: Tolerance,
) -> Result<CholeskyFactor> {
    let labels = spec.label_kernel(n_labels)?;
    if let Some(first) = candidates.first() {
        if let Some(bad) = candidates.iter().find(|a| a.window.len() != first.window.len()) {
            return Err(Error::dim(first.window.len(), bad.window.len()));
        }
    }
    pivoted_cholesky(
        candidates.len(),
        |i, j| {
            let (a, b) = (&candidates[i], &candidates[j]);
            labels.value(a.label, b.label) * spec.poly(a.window.as_slice(), b.window.as_slice())
        },
        rank_budget,
        tolerance,
    )
}

/// Basis whose anchors are the pivots, in pivot order, with zero coefficients.
pub fn basis_from_factor(
    factor: &CholeskyFactor,
    candidates: &[Anchor],
    n_labels: usize,
) -> Result<BasisSet> {
    if factor.rank() == 0 {
        return Err(Error::Input("factor has rank 0".into()));
    }
    let anchors = factor
        .pivots
        .iter()
        .map(|&p| {
            candidates.get(p).cloned().ok_or(Error::Index {
                index: p,
                len: candidates.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    BasisSet::zeros(anchors, n_labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{LabelAlphabet, LabeledSequence};
    use crate::kernels::{gram_matrix, WindowVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_anchors(rng: &mut ChaCha8Rng, n: usize, dim: usize, labels: usize) -> Vec<Anchor> {
        (0..n)
            .map(|_| {
                let v = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                Anchor::new(WindowVector::new(v), rng.random_range(0..labels))
            })
            .collect()
    }

    #[test]
    fn orthogonal_case() {
        let k = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let f = pivoted_cholesky(2, |i, j| k[(i, j)], 1, Tolerance::Absolute(0.0)).unwrap();
        assert_eq!(f.pivots, vec![0]);
        assert_eq!(f.residual_diag.as_slice(), &[0.0, 1.0]);
        assert!((f.captured_fraction() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ties_go_to_smallest_index() {
        let f = pivoted_cholesky(3, |i, j| if i == j { 1.0 } else { 0.0 }, 3, Tolerance::Absolute(0.0))
            .unwrap();
        assert_eq!(f.pivots, vec![0, 1, 2]);
    }

    #[test]
    fn degenerate_kernel() {
        let err = pivoted_cholesky(3, |_, _| 0.0, 2, Tolerance::Absolute(0.0)).unwrap_err();
        assert!(matches!(err, Error::DegenerateKernel(_)));
    }

    #[test]
    fn duplicate_candidate_never_picked_twice() {
        let a = Anchor::new(WindowVector::new(vec![1.0, 0.5]), 0);
        let b = Anchor::new(WindowVector::new(vec![-0.3, 0.8]), 0);
        let candidates = vec![a.clone(), b, a];
        let spec = KernelSpec::polynomial(2, 1.0);
        let f = incomplete_cholesky(&candidates, &spec, 2, 3, Tolerance::Relative(1e-9)).unwrap();
        let picked: HashSet<usize> = f.pivots.iter().copied().collect();
        assert_eq!(picked.len(), f.rank());
        assert!(!(picked.contains(&0) && picked.contains(&2)));
        assert_eq!(f.rank(), 2);
    }

    #[test]
    fn full_rank_reconstructs_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for degree in 1..=3 {
            let anchors = random_anchors(&mut rng, 30, 3, 2);
            let spec = KernelSpec::polynomial(degree, 1.0);
            let gram = gram_matrix(&anchors, &spec, 2).unwrap();
            let f = incomplete_cholesky(&anchors, &spec, 2, anchors.len(), Tolerance::Absolute(1e-12))
                .unwrap();
            let approx = &f.factor * f.factor.transpose();
            let err = (&approx - &gram).abs().max();
            assert!(err <= 1e-8, "degree {degree}: max error {err}");
        }
    }

    #[test]
    fn greedy_rule_and_trace_decrease() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let anchors = random_anchors(&mut rng, 40, 4, 3);
        let spec = KernelSpec::polynomial(2, 1.0);
        let gram = gram_matrix(&anchors, &spec, 3).unwrap();
        let f = incomplete_cholesky(&anchors, &spec, 3, 25, Tolerance::Absolute(0.0)).unwrap();
        // Replay: recompute residuals from the factor prefix and check each pick.
        let mut prev_trace = gram.trace();
        for (r, step) in f.steps.iter().enumerate() {
            let prefix = f.factor.columns(0, r);
            let resid: Vec<f64> = (0..40)
                .map(|i| gram[(i, i)] - prefix.row(i).norm_squared())
                .collect();
            for (i, &v) in resid.iter().enumerate() {
                if !f.pivots[..r].contains(&i) {
                    assert!(step.residual >= v - 1e-10, "step {r}: {i} has {v} > {}", step.residual);
                }
            }
            assert!((resid[step.pivot] - step.residual).abs() < 1e-10);
            let col = f.factor.column(r);
            let trace_after: f64 = (0..40)
                .map(|i| gram[(i, i)] - f.factor.columns(0, r + 1).row(i).norm_squared())
                .sum();
            assert!(trace_after < prev_trace);
            // The trace drops by the squared column norm, which includes the pivot residual.
            assert!((prev_trace - trace_after - col.norm_squared()).abs() < 1e-9);
            assert!(col.norm_squared() >= step.residual - 1e-12);
            prev_trace = trace_after;
        }
        // pivot rows are lower-trapezoidal and their residuals are zero
        for (j, &p) in f.pivots.iter().enumerate() {
            assert_eq!(f.residual_diag[p], 0.0);
            for c in j + 1..f.rank() {
                assert_eq!(f.factor[(p, c)], 0.0);
            }
        }
        assert!(f.residual_diag.iter().all(|&r| r >= -1e-10));
    }

    #[test]
    fn truncation_matches_shorter_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let anchors = random_anchors(&mut rng, 25, 3, 2);
        let spec = KernelSpec::polynomial(2, 1.0);
        let long = incomplete_cholesky(&anchors, &spec, 2, 12, Tolerance::Absolute(0.0)).unwrap();
        let short = incomplete_cholesky(&anchors, &spec, 2, 5, Tolerance::Absolute(0.0)).unwrap();
        let cut = long.truncated(5);
        assert_eq!(cut.pivots, short.pivots);
        assert!((&cut.factor - &short.factor).abs().max() < 1e-12);
        assert!((&cut.residual_diag - &short.residual_diag).abs().max() < 1e-10);
    }

    #[test]
    fn candidates_cover_positions_times_labels() {
        let alphabet = LabelAlphabet::new(["a", "b"]).unwrap();
        let seq = LabeledSequence::new(
            "s",
            vec![vec![1.0], vec![2.0], vec![3.0]],
            Some(vec![0, 1, 0]),
        )
        .unwrap();
        let data = Dataset::new(vec![seq], alphabet).unwrap();
        let spec = KernelSpec::default().with_window_radius(1);
        assert_eq!(candidate_anchors(&data, &spec).len(), 6);

        let alphabet = LabelAlphabet::new(["a", "b", "c"]).unwrap();
        let s1 = LabeledSequence::new("1", vec![vec![1.0], vec![2.0]], None).unwrap();
        let s2 = LabeledSequence::new("2", vec![vec![3.0], vec![4.0], vec![5.0], vec![6.0]], None)
            .unwrap();
        let data = Dataset::new(vec![s1, s2], alphabet).unwrap();
        assert_eq!(candidate_anchors(&data, &spec).len(), 18);
    }

    #[test]
    fn candidates_are_deduplicated() {
        let alphabet = LabelAlphabet::new(["a", "b"]).unwrap();
        // radius 0: both positions have the same window [1.0]
        let seq = LabeledSequence::new("s", vec![vec![1.0], vec![1.0]], None).unwrap();
        let data = Dataset::new(vec![seq], alphabet).unwrap();
        let spec = KernelSpec::default().with_window_radius(0);
        assert_eq!(candidate_anchors(&data, &spec).len(), 2);
    }

    #[test]
    fn basis_keeps_pivot_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let anchors = random_anchors(&mut rng, 20, 3, 2);
        let spec = KernelSpec::polynomial(3, 1.0);
        let f = incomplete_cholesky(&anchors, &spec, 2, 5, Tolerance::Absolute(0.0)).unwrap();
        let basis = basis_from_factor(&f, &anchors, 2).unwrap();
        assert_eq!(basis.len(), 5);
        assert!(basis.coefficients().emission.iter().all(|&a| a == 0.0));
        assert!(basis.coefficients().transition.iter().all(|&a| a == 0.0));
        for (a, &p) in basis.anchors().iter().zip(&f.pivots) {
            assert_eq!(a, &anchors[p]);
        }
    }
}
