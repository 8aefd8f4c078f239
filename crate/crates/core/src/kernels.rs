//! Clique-local kernels.
//!
//! The joint kernel on labeled sequences is a sum of two clique kernels, one
//! over emission cliques `(x_t, y_t)` and one over transition cliques
//! `(y_t, y_{t+1})`. Cliques that touch only the input are never built: they
//! cancel out of the conditional distribution.
//!
//! Emission kernel: `k((u, y), (v, y')) = L(y, y') * (<u, v> + c)^d`, where the
//! label factor `L` is the Kronecker delta, or `s(y) s(y')` with `s = ±1` when
//! binary labels are centered. Transition kernel: Kronecker delta on label pairs,
//! so the transition parameter collapses to one coefficient per label pair.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::chain::{extract_window, LabeledSequence};
use crate::error::{Error, Result};

/// Polynomial base kernel plus the clique/label options that shape the joint kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub degree: u32,
    pub offset: f64,
    pub window_radius: usize,
    pub center_labels: bool,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            degree: 1,
            offset: 1.0,
            window_radius: 2,
            center_labels: false,
        }
    }
}

impl KernelSpec {
    pub fn polynomial(degree: u32, offset: f64) -> Self {
        Self {
            degree,
            offset,
            ..Self::default()
        }
    }

    pub fn with_window_radius(mut self, radius: usize) -> Self {
        self.window_radius = radius;
        self
    }

    pub fn centered(mut self, center: bool) -> Self {
        self.center_labels = center;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.degree < 1 {
            return Err(Error::Config(format!(
                "kernel degree must be >= 1, got {}",
                self.degree
            )));
        }
        if !(self.offset >= 0.0 && self.offset.is_finite()) {
            return Err(Error::Config(format!(
                "kernel offset must be finite and >= 0, got {}",
                self.offset
            )));
        }
        Ok(())
    }

    /// Label factor for an alphabet of `n_labels` labels.
    pub fn label_kernel(&self, n_labels: usize) -> Result<LabelKernel> {
        self.validate()?;
        if self.center_labels {
            if n_labels != 2 {
                return Err(Error::Config(format!(
                    "label centering requires exactly 2 labels, alphabet has {n_labels}"
                )));
            }
            Ok(LabelKernel::Signed)
        } else {
            Ok(LabelKernel::Delta)
        }
    }

    #[inline]
    pub(crate) fn poly(&self, u: &[f64], v: &[f64]) -> f64 {
        let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
        (dot + self.offset).powi(self.degree as i32)
    }
}

/// Label part of the emission kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelKernel {
    /// `δ(y, y')`: one copy of the input feature space per label.
    Delta,
    /// `s(y) s(y')` with label 0 ↦ +1 and label 1 ↦ −1 (centered binary labels).
    Signed,
}

impl LabelKernel {
    #[inline]
    pub fn value(self, a: usize, b: usize) -> f64 {
        match self {
            LabelKernel::Delta => {
                if a == b {
                    1.0
                } else {
                    0.0
                }
            }
            LabelKernel::Signed => sign(a) * sign(b),
        }
    }

    /// Dense `|Y| x |Y|` table of label factors.
    pub fn table(self, n_labels: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n_labels, n_labels, |a, b| self.value(a, b))
    }
}

#[inline]
fn sign(label: usize) -> f64 {
    if label == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Where a window was read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WindowOrigin {
    pub sequence: usize,
    pub position: usize,
}

/// Concatenated features of positions `t - r ..= t + r`, zero-padded past the ends.
///
/// Equality compares `values` only; `origin` is bookkeeping.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WindowVector {
    pub values: Vec<f64>,
    #[serde(skip)]
    pub origin: Option<WindowOrigin>,
}

impl PartialEq for WindowVector {
    fn eq(&self, other: &Self) -> bool {
        self.values == other.values
    }
}

impl WindowVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self {
            values,
            origin: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

impl AsRef<[f64]> for WindowVector {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

/// One emission clique configuration: a window paired with a label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub window: WindowVector,
    pub label: usize,
}

impl Anchor {
    pub fn new(window: WindowVector, label: usize) -> Self {
        Self { window, label }
    }

    /// Bitwise identity key; two anchors with equal keys are the same clique configuration.
    pub(crate) fn key(&self) -> (Vec<u64>, usize) {
        (
            self.window.values.iter().map(|v| v.to_bits()).collect(),
            self.label,
        )
    }
}

/// `(<u, v> + offset)^degree`.
pub fn base_kernel(u: &[f64], v: &[f64], spec: &KernelSpec) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::dim(u.len(), v.len()));
    }
    Ok(spec.poly(u, v))
}

pub fn emission_kernel(a: &Anchor, b: &Anchor, spec: &KernelSpec, n_labels: usize) -> Result<f64> {
    let labels = spec.label_kernel(n_labels)?;
    for label in [a.label, b.label] {
        if label >= n_labels {
            return Err(Error::Index {
                index: label,
                len: n_labels,
            });
        }
    }
    let factor = labels.value(a.label, b.label);
    let base = base_kernel(a.window.as_slice(), b.window.as_slice(), spec)?;
    Ok(factor * base)
}

pub fn transition_kernel(p: (usize, usize), q: (usize, usize)) -> f64 {
    if p == q {
        1.0
    } else {
        0.0
    }
}

/// Joint kernel between two labeled sequences: the double sum over emission
/// clique pairs plus the double sum over transition clique pairs.
pub fn joint_kernel(
    first: (&LabeledSequence, &[usize]),
    second: (&LabeledSequence, &[usize]),
    spec: &KernelSpec,
    n_labels: usize,
) -> Result<f64> {
    let (seq_a, y_a) = first;
    let (seq_b, y_b) = second;
    if y_a.len() != seq_a.len() {
        return Err(Error::dim(seq_a.len(), y_a.len()));
    }
    if y_b.len() != seq_b.len() {
        return Err(Error::dim(seq_b.len(), y_b.len()));
    }
    if let Some(&bad) = y_a.iter().chain(y_b).find(|&&y| y >= n_labels) {
        return Err(Error::Index {
            index: bad,
            len: n_labels,
        });
    }

    let windows_a = (0..seq_a.len())
        .map(|t| extract_window(seq_a, t, spec.window_radius))
        .collect::<Result<Vec<_>>>()?;
    let windows_b = (0..seq_b.len())
        .map(|t| extract_window(seq_b, t, spec.window_radius))
        .collect::<Result<Vec<_>>>()?;

    let mut total = 0.0;
    for (wa, &la) in windows_a.iter().zip(y_a) {
        let a = Anchor::new(wa.clone(), la);
        for (wb, &lb) in windows_b.iter().zip(y_b) {
            total += emission_kernel(&a, &Anchor::new(wb.clone(), lb), spec, n_labels)?;
        }
    }
    for pa in y_a.windows(2) {
        for pb in y_b.windows(2) {
            total += transition_kernel((pa[0], pa[1]), (pb[0], pb[1]));
        }
    }
    Ok(total)
}

/// Emission Gram matrix over a set of anchors.
pub fn gram_matrix(anchors: &[Anchor], spec: &KernelSpec, n_labels: usize) -> Result<DMatrix<f64>> {
    let labels = spec.label_kernel(n_labels)?;
    let n = anchors.len();
    if let Some(first) = anchors.first() {
        let dim = first.window.len();
        for a in anchors {
            if a.window.len() != dim {
                return Err(Error::dim(dim, a.window.len()));
            }
            if a.label >= n_labels {
                return Err(Error::Index {
                    index: a.label,
                    len: n_labels,
                });
            }
        }
    }
    let mut gram = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let value = labels.value(anchors[i].label, anchors[j].label)
                * spec.poly(anchors[i].window.as_slice(), anchors[j].window.as_slice());
            gram[(i, j)] = value;
            gram[(j, i)] = value;
        }
    }
    Ok(gram)
}
