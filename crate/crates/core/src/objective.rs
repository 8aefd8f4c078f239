//! Negative log-posterior in dual coefficients, its gradient, and the
//! block-Jacobi Hessian blocks.
//!
//! The parameter is `θ = Σ_b α_b Φ_em(w_b, y_b) + Σ_{y,y'} α_tr[y][y'] Φ_tr(y, y')`,
//! with every emission clique tied to one block and every transition clique
//! tied to another. Scores, the regularizer `‖θ‖²` and all derivatives are
//! evaluated through kernel values only.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::chain::{extract_window, sequence_windows, CliqueKind, LabeledSequence};
use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::{forward_backward, CliqueMarginals, ScoreTable};
use crate::kernels::{Anchor, KernelSpec, LabelKernel};

/// Dual coefficients of the two tied blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Coefficients {
    /// One coefficient per emission anchor.
    pub emission: DVector<f64>,
    /// `|Y| x |Y|`.
    pub transition: DMatrix<f64>,
}

impl Coefficients {
    pub fn zeros(n_anchors: usize, n_labels: usize) -> Self {
        Self {
            emission: DVector::zeros(n_anchors),
            transition: DMatrix::zeros(n_labels, n_labels),
        }
    }

    pub fn n_labels(&self) -> usize {
        self.transition.nrows()
    }

    pub fn block(&self, block: CliqueKind) -> DVector<f64> {
        match block {
            CliqueKind::Emission => self.emission.clone(),
            CliqueKind::Transition => flatten(&self.transition),
        }
    }

    /// `self += step * direction` on one block.
    pub fn axpy_block(&mut self, block: CliqueKind, step: f64, direction: &DVector<f64>) {
        match block {
            CliqueKind::Emission => self.emission.axpy(step, direction, 1.0),
            CliqueKind::Transition => {
                let l = self.n_labels();
                for (i, d) in direction.iter().enumerate() {
                    self.transition[(i / l, i % l)] += step * d;
                }
            }
        }
    }

    fn is_finite(&self) -> bool {
        self.emission.iter().chain(self.transition.iter()).all(|v| v.is_finite())
    }
}

/// Row-major flattening of a transition matrix: index `y * |Y| + y'`.
pub fn flatten(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.len(), m.transpose().iter().copied())
}

/// Dual representation of the parameter: emission anchors with coefficients,
/// plus the transition coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisSet {
    anchors: Vec<Anchor>,
    coefficients: Coefficients,
}

impl BasisSet {
    /// Builds a basis, merging duplicate anchors by summing their coefficients.
    pub fn new(
        anchors: Vec<Anchor>,
        emission: Vec<f64>,
        transition: DMatrix<f64>,
    ) -> Result<Self> {
        if anchors.len() != emission.len() {
            return Err(Error::dim(anchors.len(), emission.len()));
        }
        let l = transition.nrows();
        if transition.ncols() != l {
            return Err(Error::dim(l, transition.ncols()));
        }
        let dim = anchors.first().map(|a| a.window.len());
        let mut merged: Vec<Anchor> = Vec::with_capacity(anchors.len());
        let mut coeffs: Vec<f64> = Vec::with_capacity(anchors.len());
        let mut index = HashMap::new();
        for (anchor, c) in anchors.into_iter().zip(emission) {
            if anchor.label >= l {
                return Err(Error::Index {
                    index: anchor.label,
                    len: l,
                });
            }
            if Some(anchor.window.len()) != dim {
                return Err(Error::dim(dim.unwrap_or(0), anchor.window.len()));
            }
            match index.entry(anchor.key()) {
                std::collections::hash_map::Entry::Occupied(e) => coeffs[*e.get()] += c,
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(merged.len());
                    merged.push(anchor);
                    coeffs.push(c);
                }
            }
        }
        let coefficients = Coefficients {
            emission: DVector::from_vec(coeffs),
            transition,
        };
        if !coefficients.is_finite() {
            return Err(Error::Input("basis coefficients must be finite".into()));
        }
        Ok(Self {
            anchors: merged,
            coefficients,
        })
    }

    /// Anchors with all coefficients zero.
    pub fn zeros(anchors: Vec<Anchor>, n_labels: usize) -> Result<Self> {
        let n = anchors.len();
        Self::new(anchors, vec![0.0; n], DMatrix::zeros(n_labels, n_labels))
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn coefficients(&self) -> &Coefficients {
        &self.coefficients
    }

    pub fn n_labels(&self) -> usize {
        self.coefficients.n_labels()
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Replaces the coefficients; the anchor set is unchanged.
    pub fn set_coefficients(&mut self, coefficients: Coefficients) -> Result<()> {
        if coefficients.emission.len() != self.anchors.len() {
            return Err(Error::dim(self.anchors.len(), coefficients.emission.len()));
        }
        if coefficients.transition.shape() != self.coefficients.transition.shape() {
            return Err(Error::dim(self.n_labels(), coefficients.transition.nrows()));
        }
        if !coefficients.is_finite() {
            return Err(Error::Input("basis coefficients must be finite".into()));
        }
        self.coefficients = coefficients;
        Ok(())
    }
}

/// Gradient of the negative log-posterior with respect to the dual coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    /// Aligned with the basis anchors.
    pub emission: DVector<f64>,
    /// `|Y| x |Y|`.
    pub transition: DMatrix<f64>,
    pub block_norms: BlockValues,
}

impl GradientReport {
    pub fn block(&self, block: CliqueKind) -> DVector<f64> {
        match block {
            CliqueKind::Emission => self.emission.clone(),
            CliqueKind::Transition => flatten(&self.transition),
        }
    }
}

/// One value per tied block.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BlockValues {
    pub emission: f64,
    pub transition: f64,
}

impl BlockValues {
    pub fn get(&self, block: CliqueKind) -> f64 {
        match block {
            CliqueKind::Emission => self.emission,
            CliqueKind::Transition => self.transition,
        }
    }

    pub fn set(&mut self, block: CliqueKind, value: f64) {
        match block {
            CliqueKind::Emission => self.emission = value,
            CliqueKind::Transition => self.transition = value,
        }
    }

    pub fn sum(&self) -> f64 {
        self.emission + self.transition
    }
}

/// Objective value together with the inference results it was computed from.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub value: f64,
    pub regularizer: f64,
    pub negative_log_likelihood: f64,
    pub marginals: Vec<CliqueMarginals>,
}

/// The negative log-posterior over a labeled dataset and a fixed anchor set.
///
/// Base-kernel values between every data window and every anchor are cached
/// at construction, so evaluating at new coefficients costs one matrix
/// product plus inference.
#[derive(Clone, Debug)]
pub struct Objective {
    n_labels: usize,
    sigma_squared: f64,
    label_table: DMatrix<f64>,
    anchor_labels: Vec<usize>,
    labels: Vec<Vec<usize>>,
    offsets: Vec<usize>,
    /// positions x anchors: `k(w_t, w_b)` without the label factor.
    cross: DMatrix<f64>,
    /// anchors x anchors: emission Gram matrix, label factor included.
    gram: DMatrix<f64>,
}

impl Objective {
    pub fn new(
        data: &Dataset,
        anchors: &[Anchor],
        spec: &KernelSpec,
        sigma_squared: f64,
    ) -> Result<Self> {
        if !(sigma_squared > 0.0 && sigma_squared.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_squared must be positive, got {sigma_squared}"
            )));
        }
        let n_labels = data.n_labels();
        let label_kernel: LabelKernel = spec.label_kernel(n_labels)?;
        let window_dim = (2 * spec.window_radius + 1) * data.feature_dim;
        for a in anchors {
            if a.window.len() != window_dim {
                return Err(Error::dim(window_dim, a.window.len()));
            }
            if a.label >= n_labels {
                return Err(Error::Index {
                    index: a.label,
                    len: n_labels,
                });
            }
        }

        let mut labels = Vec::with_capacity(data.len());
        let mut offsets = Vec::with_capacity(data.len() + 1);
        let mut windows = Vec::with_capacity(data.n_positions());
        offsets.push(0);
        for (i, seq) in data.sequences.iter().enumerate() {
            labels.push(seq.require_labels()?.to_vec());
            windows.extend(sequence_windows(seq, i, spec.window_radius));
            offsets.push(windows.len());
        }

        let n = anchors.len();
        // column-major storage: anchor b occupies one contiguous column
        let columns: Vec<f64> = anchors
            .par_iter()
            .flat_map_iter(|anchor| {
                windows
                    .iter()
                    .map(|w| spec.poly(w.as_slice(), anchor.window.as_slice()))
            })
            .collect();
        let cross = DMatrix::from_vec(windows.len(), n, columns);

        let mut gram = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = label_kernel.value(anchors[i].label, anchors[j].label)
                    * spec.poly(anchors[i].window.as_slice(), anchors[j].window.as_slice());
                gram[(i, j)] = v;
                gram[(j, i)] = v;
            }
        }

        Ok(Self {
            n_labels,
            sigma_squared,
            label_table: label_kernel.table(n_labels),
            anchor_labels: anchors.iter().map(|a| a.label).collect(),
            labels,
            offsets,
            cross,
            gram,
        })
    }

    pub fn n_anchors(&self) -> usize {
        self.anchor_labels.len()
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn n_sequences(&self) -> usize {
        self.labels.len()
    }

    pub fn sigma_squared(&self) -> f64 {
        self.sigma_squared
    }

    /// Emission Gram matrix of the anchors.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn block_dim(&self, block: CliqueKind) -> usize {
        match block {
            CliqueKind::Emission => self.n_anchors(),
            CliqueKind::Transition => self.n_labels * self.n_labels,
        }
    }

    fn check(&self, c: &Coefficients) -> Result<()> {
        if c.emission.len() != self.n_anchors() {
            return Err(Error::dim(self.n_anchors(), c.emission.len()));
        }
        if c.transition.shape() != (self.n_labels, self.n_labels) {
            return Err(Error::dim(self.n_labels, c.transition.nrows()));
        }
        Ok(())
    }

    /// Score tables of every training sequence.
    pub fn score_tables(&self, c: &Coefficients) -> Result<Vec<ScoreTable>> {
        self.check(c)?;
        // weights[b][y] = α_b · L(y_b, y)
        let weights = DMatrix::from_fn(self.n_anchors(), self.n_labels, |b, y| {
            c.emission[b] * self.label_table[(self.anchor_labels[b], y)]
        });
        let emission = &self.cross * weights;
        Ok(self
            .offsets
            .windows(2)
            .map(|w| ScoreTable {
                emission: emission.rows(w[0], w[1] - w[0]).into_owned(),
                transition: c.transition.clone(),
            })
            .collect())
    }

    pub fn regularizer(&self, c: &Coefficients) -> f64 {
        let quad = c.emission.dot(&(&self.gram * &c.emission));
        0.5 / self.sigma_squared * (quad + c.transition.norm_squared())
    }

    pub fn evaluate(&self, c: &Coefficients) -> Result<Evaluation> {
        let tables = self.score_tables(c)?;
        let marginals = tables
            .par_iter()
            .map(forward_backward)
            .collect::<Result<Vec<_>>>()?;
        let mut nll = 0.0;
        for ((table, m), y) in tables.iter().zip(&marginals).zip(&self.labels) {
            nll += m.log_partition - table.labeling_score(y)?;
        }
        let regularizer = self.regularizer(c);
        let value = regularizer + nll;
        if !value.is_finite() {
            return Err(Error::Numerical(format!("objective evaluated to {value}")));
        }
        Ok(Evaluation {
            value,
            regularizer,
            negative_log_likelihood: nll,
            marginals,
        })
    }

    pub fn value(&self, c: &Coefficients) -> Result<f64> {
        Ok(self.evaluate(c)?.value)
    }

    pub fn gradient(&self, c: &Coefficients) -> Result<GradientReport> {
        let eval = self.evaluate(c)?;
        Ok(self.gradient_at(c, &eval))
    }

    /// Gradient at `c`, reusing the marginals of an evaluation at the same point.
    pub fn gradient_at(&self, c: &Coefficients, eval: &Evaluation) -> GradientReport {
        let l = self.n_labels;
        let inv_s2 = 1.0 / self.sigma_squared;

        // residual[pos][c] = Σ_y (μ_t(y) − δ(y, y_t)) L(y, c)
        let mut residual = DMatrix::zeros(self.cross.nrows(), l);
        let mut transition = DMatrix::zeros(l, l);
        for ((m, y), &start) in eval.marginals.iter().zip(&self.labels).zip(&self.offsets) {
            for (t, &label) in y.iter().enumerate() {
                for col in 0..l {
                    let mut r = 0.0;
                    for lab in 0..l {
                        let observed = if lab == label { 1.0 } else { 0.0 };
                        r += (m.unary[(t, lab)] - observed) * self.label_table[(lab, col)];
                    }
                    residual[(start + t, col)] = r;
                }
            }
            for (t, pair) in y.windows(2).enumerate() {
                transition += &m.pairwise[t];
                transition[(pair[0], pair[1])] -= 1.0;
            }
        }
        transition += &c.transition * inv_s2;

        let per_label = self.cross.tr_mul(&residual);
        let prior = &self.gram * &c.emission;
        let emission = DVector::from_fn(self.n_anchors(), |b, _| {
            per_label[(b, self.anchor_labels[b])] + inv_s2 * prior[b]
        });

        let block_norms = BlockValues {
            emission: emission.norm(),
            transition: transition.norm(),
        };
        GradientReport {
            emission,
            transition,
            block_norms,
        }
    }

    /// Block-Jacobi Hessian block: prior term plus the per-clique covariance of
    /// the block's sufficient statistics, summed over every clique of every
    /// sequence. Covariances across blocks and across positions are dropped.
    pub fn hessian_block_at(&self, eval: &Evaluation, block: CliqueKind) -> DMatrix<f64> {
        let inv_s2 = 1.0 / self.sigma_squared;
        let l = self.n_labels;
        let mut h = match block {
            CliqueKind::Emission => {
                let n = self.n_anchors();
                let n_pos = self.cross.nrows();
                let mut h = &self.gram * inv_s2;
                if n > 0 && n_pos > 0 {
                    // Cov_t[b, b'] = k(w_t, w_b) k(w_t, w_b') C_t[y_b, y_b'], where C_t is the
                    // covariance of the label-kernel columns L(y, ·) under μ_t. Anchors are
                    // grouped by label so each label pair is one weighted product.
                    let mut label_cov = DMatrix::zeros(n_pos, l * l);
                    for (m, &start) in eval.marginals.iter().zip(&self.offsets) {
                        for t in 0..m.unary.nrows() {
                            for a in 0..l {
                                for c in 0..=a {
                                    let (mut second, mut mean_a, mut mean_c) = (0.0, 0.0, 0.0);
                                    for y in 0..l {
                                        let p = m.unary[(t, y)];
                                        let (la, lc) = (self.label_table[(y, a)], self.label_table[(y, c)]);
                                        second += p * la * lc;
                                        mean_a += p * la;
                                        mean_c += p * lc;
                                    }
                                    label_cov[(start + t, a * l + c)] = second - mean_a * mean_c;
                                }
                            }
                        }
                    }
                    let groups: Vec<Vec<usize>> = (0..l)
                        .map(|a| (0..n).filter(|&b| self.anchor_labels[b] == a).collect())
                        .collect();
                    let columns: Vec<DMatrix<f64>> =
                        groups.iter().map(|g| self.cross.select_columns(g)).collect();
                    for a in 0..l {
                        for c in 0..=a {
                            if groups[a].is_empty() || groups[c].is_empty() {
                                continue;
                            }
                            let mut weighted = columns[a].clone();
                            for (t, mut row) in weighted.row_iter_mut().enumerate() {
                                row *= label_cov[(t, a * l + c)];
                            }
                            let block = weighted.transpose() * &columns[c];
                            for (i, &bi) in groups[a].iter().enumerate() {
                                for (j, &bj) in groups[c].iter().enumerate() {
                                    h[(bi, bj)] += block[(i, j)];
                                    if a != c {
                                        h[(bj, bi)] += block[(i, j)];
                                    }
                                }
                            }
                        }
                    }
                }
                h
            }
            CliqueKind::Transition => {
                let d = l * l;
                let mut h = DMatrix::identity(d, d) * inv_s2;
                for m in &eval.marginals {
                    for pair in &m.pairwise {
                        let nu = flatten(pair);
                        for i in 0..d {
                            h[(i, i)] += nu[i];
                        }
                        h.ger(-1.0, &nu, &nu, 1.0);
                    }
                }
                h
            }
        };
        symmetrize(&mut h);
        h
    }

    pub fn hessian_block(&self, c: &Coefficients, block: CliqueKind) -> Result<DMatrix<f64>> {
        let eval = self.evaluate(c)?;
        Ok(self.hessian_block_at(&eval, block))
    }
}

/// Copies the lower triangle onto the upper one so the matrix is exactly symmetric.
fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in j + 1..n {
            m[(j, i)] = m[(i, j)];
        }
    }
}

/// Scores of one sequence under a basis, computed from kernel evaluations.
pub fn build_score_table(
    seq: &LabeledSequence,
    basis: &BasisSet,
    spec: &KernelSpec,
) -> Result<ScoreTable> {
    let l = basis.n_labels();
    let labels = spec.label_kernel(l)?;
    let window_dim = (2 * spec.window_radius + 1) * seq.feature_dim();
    if let Some(a) = basis.anchors().iter().find(|a| a.window.len() != window_dim) {
        return Err(Error::dim(a.window.len(), window_dim));
    }
    let alpha = &basis.coefficients().emission;
    let mut emission = DMatrix::zeros(seq.len(), l);
    for t in 0..seq.len() {
        let w = extract_window(seq, t, spec.window_radius)?;
        for (anchor, &coef) in basis.anchors().iter().zip(alpha.iter()) {
            if coef == 0.0 {
                continue;
            }
            let k = spec.poly(w.as_slice(), anchor.window.as_slice());
            for y in 0..l {
                emission[(t, y)] += coef * labels.value(y, anchor.label) * k;
            }
        }
    }
    ScoreTable::new(emission, basis.coefficients().transition.clone())
}

fn objective_for(data: &Dataset, basis: &BasisSet, config: &TrainConfig, spec: &KernelSpec) -> Result<Objective> {
    if basis.n_labels() != data.n_labels() {
        return Err(Error::dim(data.n_labels(), basis.n_labels()));
    }
    Objective::new(data, basis.anchors(), spec, config.sigma_squared)
}

/// `(1/2σ²)‖θ‖² − Σ_i log p(y^i | x^i; θ)`.
pub fn negative_log_posterior(
    data: &Dataset,
    basis: &BasisSet,
    spec: &KernelSpec,
    config: &TrainConfig,
) -> Result<f64> {
    objective_for(data, basis, config, spec)?.value(basis.coefficients())
}

pub fn gradient(
    data: &Dataset,
    basis: &BasisSet,
    spec: &KernelSpec,
    config: &TrainConfig,
) -> Result<GradientReport> {
    objective_for(data, basis, config, spec)?.gradient(basis.coefficients())
}

pub fn hessian_block(
    data: &Dataset,
    basis: &BasisSet,
    spec: &KernelSpec,
    config: &TrainConfig,
    block: CliqueKind,
) -> Result<DMatrix<f64>> {
    objective_for(data, basis, config, spec)?.hessian_block(basis.coefficients(), block)
}
