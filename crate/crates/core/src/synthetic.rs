//! Synthetic labeled sequences drawn exactly from known chain models.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::chain::{LabelAlphabet, LabeledSequence};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::{forward_backward, ScoreTable};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticTask {
    /// Emission score linear in the features of the current position.
    Linear,
    /// Binary labels whose emission score is `s(y) · x_0 · x_1`; invisible to a
    /// linear kernel.
    Quadratic,
    /// Linear emissions with no transition structure.
    IidLabels,
    /// Binary labels fixed by the sign of a linear score, with a margin.
    Separable,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub task: SyntheticTask,
    pub n_sequences: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub feature_dim: usize,
    pub n_labels: usize,
    pub emission_scale: f64,
    pub transition_scale: f64,
    /// Minimum `|⟨w, x⟩|` for [`SyntheticTask::Separable`].
    pub margin: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(task: SyntheticTask, n_sequences: usize, seed: u64) -> Self {
        Self {
            task,
            n_sequences,
            min_len: 4,
            max_len: 10,
            feature_dim: 3,
            n_labels: 2,
            emission_scale: 2.0,
            transition_scale: 1.0,
            margin: 0.5,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "invalid sequence length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        if self.n_labels < 2 {
            return Err(Error::Config("at least two labels are required".into()));
        }
        let binary_only = matches!(self.task, SyntheticTask::Quadratic | SyntheticTask::Separable);
        if binary_only && self.n_labels != 2 {
            return Err(Error::Config(format!("{:?} task needs exactly two labels", self.task)));
        }
        let min_dim = if self.task == SyntheticTask::Quadratic { 2 } else { 1 };
        if self.feature_dim < min_dim {
            return Err(Error::Config(format!(
                "{:?} task needs at least {min_dim} features",
                self.task
            )));
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// The hidden chain model: per-label weights and transition scores.
struct Truth {
    weights: DMatrix<f64>,
    transition: DMatrix<f64>,
}

impl Truth {
    fn draw(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Self {
        let l = spec.n_labels;
        let mut weights = DMatrix::from_fn(l, spec.feature_dim, |_, _| normal(rng));
        if spec.task == SyntheticTask::Separable {
            // one direction, opposite signs for the two labels
            let w = weights.row(0).normalize();
            weights.set_row(0, &w);
            weights.set_row(1, &(-w));
        }
        let transition = match spec.task {
            SyntheticTask::IidLabels | SyntheticTask::Separable => DMatrix::zeros(l, l),
            _ => DMatrix::from_fn(l, l, |_, _| spec.transition_scale * normal(rng)),
        };
        Self { weights, transition }
    }

    fn emission(&self, spec: &SyntheticSpec, x: &[f64]) -> Vec<f64> {
        (0..spec.n_labels)
            .map(|y| match spec.task {
                SyntheticTask::Quadratic => {
                    let sign = if y == 0 { 1.0 } else { -1.0 };
                    spec.emission_scale * sign * x[0] * x[1]
                }
                _ => spec.emission_scale * self.weights.row(y).iter().zip(x).map(|(w, v)| w * v).sum::<f64>(),
            })
            .collect()
    }
}

fn sample_categorical(rng: &mut ChaCha8Rng, probs: impl Iterator<Item = f64>) -> usize {
    let probs: Vec<f64> = probs.collect();
    let total: f64 = probs.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, p) in probs.iter().enumerate() {
        if u < *p {
            return i;
        }
        u -= p;
    }
    probs.len() - 1
}

/// Exact sample from the chain: first label from its marginal, then each
/// next label from the conditional `P(y_t, y_{t+1}) / P(y_t)`.
fn sample_chain(scores: &ScoreTable, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let m = forward_backward(scores)?;
    let mut labels = Vec::with_capacity(scores.len());
    labels.push(sample_categorical(rng, m.unary.row(0).iter().copied()));
    for pair in &m.pairwise {
        let prev = *labels.last().expect("non-empty");
        labels.push(sample_categorical(rng, pair.row(prev).iter().copied()));
    }
    Ok(labels)
}

fn draw_features(spec: &SyntheticSpec, truth: &Truth, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let x: Vec<f64> = (0..spec.feature_dim).map(|_| normal(rng)).collect();
        if spec.task != SyntheticTask::Separable {
            return x;
        }
        let s: f64 = truth.weights.row(0).iter().zip(&x).map(|(w, v)| w * v).sum();
        if s.abs() >= spec.margin {
            return x;
        }
    }
}

/// Generates a labeled dataset; the same spec always yields the same data.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let truth = Truth::draw(spec, &mut rng);
    let alphabet = LabelAlphabet::new((0..spec.n_labels).map(|y| format!("L{y}")))?;
    let mut sequences = Vec::with_capacity(spec.n_sequences);
    for i in 0..spec.n_sequences {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let features: Vec<Vec<f64>> = (0..len).map(|_| draw_features(spec, &truth, &mut rng)).collect();
        let labels = if spec.task == SyntheticTask::Separable {
            features
                .iter()
                .map(|x| {
                    let s: f64 = truth.weights.row(0).iter().zip(x).map(|(w, v)| w * v).sum();
                    usize::from(s < 0.0)
                })
                .collect()
        } else {
            let emission = DMatrix::from_fn(len, spec.n_labels, |t, y| truth.emission(spec, &features[t])[y]);
            let table = ScoreTable::new(emission, truth.transition.clone())?;
            sample_chain(&table, &mut rng)?
        };
        sequences.push(LabeledSequence::new(format!("synthetic:{i}"), features, Some(labels))?);
    }
    Dataset::new(sequences, alphabet)
}
