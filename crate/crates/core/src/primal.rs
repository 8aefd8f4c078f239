//! Explicit-feature trainer for the degree-1 kernel.
//!
//! With `k(u, v) = ⟨u, v⟩ + c` the emission feature map is `φ(w) = (w, √c)`,
//! so the parameter can be held directly: one weight row per label (or a
//! single shared row for centered binary labels) plus the transition matrix.
//! This gives an independent route to the same objective as the dual
//! trainer, used to cross-check it.

use nalgebra::{DMatrix, DVector};

use crate::chain::{extract_window, LabeledSequence};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::{forward_backward, viterbi, ScoreTable};
use crate::kernels::{KernelSpec, LabelKernel};
use crate::objective::BasisSet;

const FD_STEP: f64 = 1e-5;

/// Primal parameter for a degree-1 kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimalModel {
    pub spec: KernelSpec,
    pub label_kernel: LabelKernel,
    /// `|Y| x (D + 1)` for the delta label kernel, `1 x (D + 1)` when centered.
    pub emission: DMatrix<f64>,
    pub transition: DMatrix<f64>,
}

fn check_linear(spec: &KernelSpec) -> Result<()> {
    spec.validate()?;
    if spec.degree != 1 {
        return Err(Error::Config(format!(
            "explicit features are only available for degree 1, got {}",
            spec.degree
        )));
    }
    Ok(())
}

/// `φ(w) = (w, √c)`.
pub fn feature_map(window: &[f64], spec: &KernelSpec) -> DVector<f64> {
    DVector::from_iterator(
        window.len() + 1,
        window.iter().copied().chain(std::iter::once(spec.offset.sqrt())),
    )
}

fn sequence_features(seq: &LabeledSequence, spec: &KernelSpec) -> Result<DMatrix<f64>> {
    let rows = (0..seq.len())
        .map(|t| extract_window(seq, t, spec.window_radius).map(|w| feature_map(w.as_slice(), spec).transpose()))
        .collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_rows(&rows))
}

fn signs(n_labels: usize) -> Vec<f64> {
    (0..n_labels).map(|y| LabelKernel::Signed.value(y, 0)).collect()
}

impl PrimalModel {
    pub fn zeros(spec: &KernelSpec, n_labels: usize, feature_dim: usize) -> Result<Self> {
        check_linear(spec)?;
        let label_kernel = spec.label_kernel(n_labels)?;
        let rows = match label_kernel {
            LabelKernel::Delta => n_labels,
            LabelKernel::Signed => 1,
        };
        let dim = (2 * spec.window_radius + 1) * feature_dim + 1;
        Ok(Self {
            spec: *spec,
            label_kernel,
            emission: DMatrix::zeros(rows, dim),
            transition: DMatrix::zeros(n_labels, n_labels),
        })
    }

    /// Materializes `θ = Σ_b α_b Φ(w_b, y_b)` from a dual basis.
    pub fn from_dual(basis: &BasisSet, spec: &KernelSpec, feature_dim: usize) -> Result<Self> {
        let l = basis.n_labels();
        let mut model = Self::zeros(spec, l, feature_dim)?;
        let s = signs(l);
        for (anchor, &a) in basis.anchors().iter().zip(basis.coefficients().emission.iter()) {
            let phi = feature_map(anchor.window.as_slice(), spec);
            if phi.len() != model.emission.ncols() {
                return Err(Error::dim(model.emission.ncols(), phi.len()));
            }
            let (row, scale) = match model.label_kernel {
                LabelKernel::Delta => (anchor.label, a),
                LabelKernel::Signed => (0, a * s[anchor.label]),
            };
            let mut r = model.emission.row_mut(row);
            r += scale * phi.transpose();
        }
        model.transition = basis.coefficients().transition.clone();
        Ok(model)
    }

    pub fn n_labels(&self) -> usize {
        self.transition.nrows()
    }

    fn scores_from_features(&self, phi: &DMatrix<f64>) -> Result<ScoreTable> {
        let raw = phi * self.emission.transpose();
        let emission = match self.label_kernel {
            LabelKernel::Delta => raw,
            LabelKernel::Signed => {
                let s = signs(self.n_labels());
                DMatrix::from_fn(phi.nrows(), self.n_labels(), |t, y| s[y] * raw[(t, 0)])
            }
        };
        ScoreTable::new(emission, self.transition.clone())
    }

    pub fn score_table(&self, seq: &LabeledSequence) -> Result<ScoreTable> {
        let phi = sequence_features(seq, &self.spec)?;
        if phi.ncols() != self.emission.ncols() {
            return Err(Error::dim(self.emission.ncols(), phi.ncols()));
        }
        self.scores_from_features(&phi)
    }

    pub fn predict(&self, seq: &LabeledSequence) -> Result<Vec<usize>> {
        viterbi(&self.score_table(seq)?)
    }

    fn pack(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.emission.len() + self.transition.len(),
            self.emission.iter().chain(self.transition.iter()).copied(),
        )
    }

    fn unpack(&self, v: &DVector<f64>) -> Self {
        let mut out = self.clone();
        let n = self.emission.len();
        out.emission.copy_from_slice(&v.as_slice()[..n]);
        out.transition.copy_from_slice(&v.as_slice()[n..]);
        out
    }
}

/// Result of [`PrimalTrainer::train`].
#[derive(Clone, Debug)]
pub struct PrimalFit {
    pub model: PrimalModel,
    pub objective: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Regularized negative log-likelihood over explicit features.
pub struct PrimalTrainer {
    features: Vec<DMatrix<f64>>,
    labels: Vec<Vec<usize>>,
    sigma_squared: f64,
    template: PrimalModel,
}

impl PrimalTrainer {
    pub fn new(data: &Dataset, spec: &KernelSpec, sigma_squared: f64) -> Result<Self> {
        if !(sigma_squared > 0.0 && sigma_squared.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_squared must be positive, got {sigma_squared}"
            )));
        }
        let template = PrimalModel::zeros(spec, data.n_labels(), data.feature_dim)?;
        let features = data
            .sequences
            .iter()
            .map(|s| sequence_features(s, spec))
            .collect::<Result<Vec<_>>>()?;
        let labels = data
            .sequences
            .iter()
            .map(|s| s.require_labels().map(<[usize]>::to_vec))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            features,
            labels,
            sigma_squared,
            template,
        })
    }

    pub fn zero_model(&self) -> PrimalModel {
        self.template.clone()
    }

    pub fn objective(&self, model: &PrimalModel) -> Result<f64> {
        let mut value =
            0.5 / self.sigma_squared * (model.emission.norm_squared() + model.transition.norm_squared());
        for (phi, y) in self.features.iter().zip(&self.labels) {
            let table = model.scores_from_features(phi)?;
            value += forward_backward(&table)?.log_partition - table.labeling_score(y)?;
        }
        Ok(value)
    }

    /// Analytic gradient, flattened in the same order as the parameters.
    pub fn gradient(&self, model: &PrimalModel) -> Result<DVector<f64>> {
        let l = model.n_labels();
        let s = signs(l);
        let inv = 1.0 / self.sigma_squared;
        let mut g_em = &model.emission * inv;
        let mut g_tr = &model.transition * inv;
        for (phi, y) in self.features.iter().zip(&self.labels) {
            let table = model.scores_from_features(phi)?;
            let m = forward_backward(&table)?;
            for (t, &label) in y.iter().enumerate() {
                let x = phi.row(t);
                for c in 0..l {
                    let r = m.unary[(t, c)] - if c == label { 1.0 } else { 0.0 };
                    match model.label_kernel {
                        LabelKernel::Delta => {
                            let mut row = g_em.row_mut(c);
                            row += r * x;
                        }
                        LabelKernel::Signed => {
                            let mut row = g_em.row_mut(0);
                            row += r * s[c] * x;
                        }
                    }
                }
            }
            for (t, pair) in y.windows(2).enumerate() {
                g_tr += &m.pairwise[t];
                g_tr[(pair[0], pair[1])] -= 1.0;
            }
        }
        Ok(DVector::from_iterator(
            g_em.len() + g_tr.len(),
            g_em.iter().chain(g_tr.iter()).copied(),
        ))
    }

    /// Newton's method with a central-difference Hessian of the analytic
    /// gradient and backtracking on the objective.
    pub fn train(&self, max_iterations: usize, gradient_tolerance: f64) -> Result<PrimalFit> {
        let mut model = self.zero_model();
        let mut value = self.objective(&model)?;
        let mut grad = self.gradient(&model)?;
        let mut iterations = 0;
        while iterations < max_iterations && grad.norm() >= gradient_tolerance {
            let x = model.pack();
            let n = x.len();
            let mut hessian = DMatrix::zeros(n, n);
            for j in 0..n {
                let mut plus = x.clone();
                let mut minus = x.clone();
                plus[j] += FD_STEP;
                minus[j] -= FD_STEP;
                let col = (self.gradient(&model.unpack(&plus))? - self.gradient(&model.unpack(&minus))?)
                    / (2.0 * FD_STEP);
                hessian.set_column(j, &col);
            }
            hessian = (&hessian + hessian.transpose()) * 0.5;
            let direction = match hessian.clone().cholesky() {
                Some(ch) => -ch.solve(&grad),
                None => -&grad,
            };
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..=40 {
                let candidate = model.unpack(&(&x + step * &direction));
                let v = self.objective(&candidate)?;
                if v < value {
                    accepted = Some((candidate, v));
                    break;
                }
                step *= 0.5;
            }
            iterations += 1;
            match accepted {
                Some((m, v)) => {
                    model = m;
                    value = v;
                    grad = self.gradient(&model)?;
                }
                None => break,
            }
        }
        let gradient_norm = grad.norm();
        Ok(PrimalFit {
            model,
            objective: value,
            gradient_norm,
            iterations,
            converged: gradient_norm < gradient_tolerance,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate, SyntheticSpec, SyntheticTask};

    fn small() -> Dataset {
        let mut spec = SyntheticSpec::new(SyntheticTask::Linear, 6, 4);
        spec.feature_dim = 2;
        spec.max_len = 5;
        generate(&spec).unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data = small();
        for spec in [KernelSpec::polynomial(1, 1.0).with_window_radius(1), KernelSpec::polynomial(1, 0.5).centered(true)] {
            let trainer = PrimalTrainer::new(&data, &spec, 2.0).unwrap();
            let mut model = trainer.zero_model();
            for (i, v) in model.emission.iter_mut().enumerate() {
                *v = 0.1 * (i as f64).sin();
            }
            model.transition[(0, 1)] = 0.3;
            let g = trainer.gradient(&model).unwrap();
            let x = model.pack();
            for j in 0..x.len() {
                let h = 1e-6;
                let mut p = x.clone();
                let mut m = x.clone();
                p[j] += h;
                m[j] -= h;
                let fd = (trainer.objective(&model.unpack(&p)).unwrap() - trainer.objective(&model.unpack(&m)).unwrap())
                    / (2.0 * h);
                assert!((fd - g[j]).abs() <= 1e-5 * g[j].abs().max(1e-3), "coord {j}: {fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn training_reaches_stationarity() {
        let data = small();
        let spec = KernelSpec::polynomial(1, 1.0).with_window_radius(0);
        let trainer = PrimalTrainer::new(&data, &spec, 1.0).unwrap();
        let fit = trainer.train(50, 1e-8).unwrap();
        assert!(fit.converged);
        assert!(fit.objective < trainer.objective(&trainer.zero_model()).unwrap());
    }

    #[test]
    fn rejects_higher_degree() {
        assert!(PrimalModel::zeros(&KernelSpec::polynomial(2, 1.0), 2, 3).is_err());
    }
}
