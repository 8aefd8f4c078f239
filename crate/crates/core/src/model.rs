//! Trained models, their JSON file format, and the end-to-end fitting pipeline.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::atomic::write_atomic;
use crate::chain::{LabelAlphabet, LabeledSequence};
use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::{viterbi, ScoreTable};
use crate::kernels::{Anchor, KernelSpec, WindowVector};
use crate::lowrank::{basis_from_factor, candidate_anchors, incomplete_cholesky, CholeskyFactor, Tolerance};
use crate::objective::{build_score_table, BasisSet};
use crate::optimizer::{train, TrainState};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// A self-contained predictor: everything needed to score new sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub kernel: KernelSpec,
    pub alphabet: LabelAlphabet,
    pub feature_dim: usize,
    pub sigma_squared: f64,
    pub basis: BasisSet,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    kernel: KernelSpec,
    alphabet: LabelAlphabet,
    feature_dim: usize,
    sigma_squared: f64,
    anchors: Vec<AnchorRecord>,
    /// Row-major `|Y| x |Y|`.
    transition: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnchorRecord {
    window: Vec<f64>,
    label: usize,
    coefficient: f64,
}

impl Model {
    pub fn n_labels(&self) -> usize {
        self.alphabet.len()
    }

    fn check_sequence(&self, seq: &LabeledSequence) -> Result<()> {
        if seq.feature_dim() != self.feature_dim {
            return Err(Error::FeatureMismatch {
                model: self.feature_dim,
                data: seq.feature_dim(),
            });
        }
        Ok(())
    }

    pub fn score_table(&self, seq: &LabeledSequence) -> Result<ScoreTable> {
        self.check_sequence(seq)?;
        build_score_table(seq, &self.basis, &self.kernel)
    }

    pub fn predict(&self, seq: &LabeledSequence) -> Result<Vec<usize>> {
        viterbi(&self.score_table(seq)?)
    }

    pub fn predict_dataset(&self, data: &Dataset) -> Result<Vec<Vec<usize>>> {
        if !data.is_empty() && data.feature_dim != self.feature_dim {
            return Err(Error::FeatureMismatch {
                model: self.feature_dim,
                data: data.feature_dim,
            });
        }
        data.sequences.iter().map(|s| self.predict(s)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let coeffs = self.basis.coefficients();
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            kernel: self.kernel,
            alphabet: self.alphabet.clone(),
            feature_dim: self.feature_dim,
            sigma_squared: self.sigma_squared,
            anchors: self
                .basis
                .anchors()
                .iter()
                .zip(coeffs.emission.iter())
                .map(|(a, &c)| AnchorRecord {
                    window: a.window.values.clone(),
                    label: a.label,
                    coefficient: c,
                })
                .collect(),
            transition: coeffs
                .transition
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::Input(e.to_string()))
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let json_err = |source| Error::Json {
            path: origin.to_path_buf(),
            source,
        };
        let file: ModelFile = serde_json::from_str(text).map_err(json_err)?;
        let schema = |msg: String| Error::Schema {
            path: origin.to_path_buf(),
            msg,
        };
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(schema(format!(
                "unsupported model format_version {} (expected {MODEL_FORMAT_VERSION})",
                file.format_version
            )));
        }
        file.kernel.validate()?;
        let alphabet = LabelAlphabet::new(file.alphabet.names().to_vec())?;
        let l = alphabet.len();
        if file.transition.len() != l || file.transition.iter().any(|r| r.len() != l) {
            return Err(schema(format!("transition matrix must be {l}x{l}")));
        }
        let window_dim = (2 * file.kernel.window_radius + 1) * file.feature_dim;
        if let Some(a) = file.anchors.iter().find(|a| a.window.len() != window_dim) {
            return Err(schema(format!(
                "anchor window has length {}, expected {window_dim}",
                a.window.len()
            )));
        }
        let transition = DMatrix::from_fn(l, l, |i, j| file.transition[i][j]);
        let (anchors, coeffs): (Vec<Anchor>, Vec<f64>) = file
            .anchors
            .into_iter()
            .map(|a| (Anchor::new(WindowVector::new(a.window), a.label), a.coefficient))
            .unzip();
        let basis = BasisSet::new(anchors, coeffs, transition)?;
        Ok(Self {
            kernel: file.kernel,
            alphabet,
            feature_dim: file.feature_dim,
            sigma_squared: file.sigma_squared,
            basis,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }
}

/// Everything produced by [`fit`].
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub model: Model,
    pub state: TrainState,
    pub factor: CholeskyFactor,
}

/// Candidate anchors, incomplete Cholesky, then training on the pivots.
pub fn fit(data: &Dataset, config: &TrainConfig) -> Result<FitOutcome> {
    config.validate()?;
    data.require_labeled()?;
    if data.is_empty() {
        return Err(Error::Input("cannot train on an empty dataset".into()));
    }
    let spec = config.kernel_spec();
    let candidates = candidate_anchors(data, &spec);
    let factor = incomplete_cholesky(
        &candidates,
        &spec,
        data.n_labels(),
        config.rank_budget,
        Tolerance::Relative(config.residual_tol),
    )?;
    let basis = basis_from_factor(&factor, &candidates, data.n_labels())?;
    let (model, state) = fit_with_basis(data, config, basis)?;
    Ok(FitOutcome {
        model,
        state,
        factor,
    })
}

/// Trains on a caller-chosen anchor set (for instance every candidate).
pub fn fit_with_basis(data: &Dataset, config: &TrainConfig, basis: BasisSet) -> Result<(Model, TrainState)> {
    let spec = config.kernel_spec();
    let state = train(data, basis, &spec, config, config.schedule)?;
    let model = Model {
        kernel: spec,
        alphabet: data.alphabet.clone(),
        feature_dim: data.feature_dim,
        sigma_squared: config.sigma_squared,
        basis: state.basis.clone(),
    };
    Ok((model, state))
}
