//! Linear-chain structure: sequences, label alphabet, cliques, windows and
//! the stationarity tying of clique parameters.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{WindowOrigin, WindowVector};

/// One instance: `T x F` features and, when known, one label per position.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSequence {
    pub id: String,
    features: Vec<Vec<f64>>,
    labels: Option<Vec<usize>>,
}

impl LabeledSequence {
    pub fn new(
        id: impl Into<String>,
        features: Vec<Vec<f64>>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Input("sequence must have at least one position".into()));
        }
        let dim = features[0].len();
        if let Some(row) = features.iter().find(|r| r.len() != dim) {
            return Err(Error::dim(dim, row.len()));
        }
        if let Some(y) = &labels {
            if y.len() != features.len() {
                return Err(Error::dim(features.len(), y.len()));
            }
        }
        Ok(Self {
            id: id.into(),
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Labels, or an input error naming the sequence.
    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Input(format!("sequence '{}' is unlabeled", self.id)))
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::dim(self.len(), labels.len()));
        }
        self.labels = Some(labels);
        Ok(self)
    }
}

/// Ordered set of label names; a label's id is its position.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelAlphabet {
    names: Vec<String>,
}

impl LabelAlphabet {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Input("label alphabet is empty".into()));
        }
        let mut seen = HashMap::new();
        for (i, n) in names.iter().enumerate() {
            if let Some(prev) = seen.insert(n.as_str(), i) {
                return Err(Error::Input(format!(
                    "duplicate label '{n}' at positions {prev} and {i}"
                )));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Id of `name`, appending it if new.
    pub(crate) fn intern(&mut self, name: &str) -> usize {
        match self.id(name) {
            Some(id) => id,
            None => {
                self.names.push(name.to_owned());
                self.names.len() - 1
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CliqueKind {
    Emission,
    Transition,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CliqueIndex {
    pub kind: CliqueKind,
    pub position: usize,
}

/// All `T` emission cliques followed by all `T - 1` transition cliques.
pub fn enumerate_cliques(seq: &LabeledSequence) -> Vec<CliqueIndex> {
    let t = seq.len();
    let emissions = (0..t).map(|position| CliqueIndex {
        kind: CliqueKind::Emission,
        position,
    });
    let transitions = (0..t.saturating_sub(1)).map(|position| CliqueIndex {
        kind: CliqueKind::Transition,
        position,
    });
    emissions.chain(transitions).collect()
}

/// Features of positions `t - radius ..= t + radius` concatenated, zero rows outside `[0, T)`.
pub fn extract_window(seq: &LabeledSequence, t: usize, radius: usize) -> Result<WindowVector> {
    if t >= seq.len() {
        return Err(Error::Index {
            index: t,
            len: seq.len(),
        });
    }
    let dim = seq.feature_dim();
    let mut values = Vec::with_capacity((2 * radius + 1) * dim);
    for offset in 0..=2 * radius {
        // position = t + offset - radius, computed without underflow
        match (t + offset).checked_sub(radius) {
            Some(pos) if pos < seq.len() => values.extend_from_slice(&seq.features[pos]),
            _ => values.extend(std::iter::repeat_n(0.0, dim)),
        }
    }
    Ok(WindowVector {
        values,
        origin: None,
    })
}

/// All windows of a sequence, tagged with their origin.
pub fn sequence_windows(
    seq: &LabeledSequence,
    sequence_index: usize,
    radius: usize,
) -> Vec<WindowVector> {
    (0..seq.len())
        .map(|t| {
            let mut w = extract_window(seq, t, radius).expect("position in range");
            w.origin = Some(WindowOrigin {
                sequence: sequence_index,
                position: t,
            });
            w
        })
        .collect()
}

/// A set of cliques sharing one parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TiedBlock {
    pub kind: CliqueKind,
    /// Whether every clique of this kind shares the parameter regardless of position.
    pub tied_across_positions: bool,
    /// Number of clique configurations when the block is finite-dimensional.
    pub configurations: Option<usize>,
}

/// The emission block and the `|Y|^2`-dimensional transition block.
pub fn tied_parameter_blocks(alphabet: &LabelAlphabet) -> Vec<TiedBlock> {
    vec![
        TiedBlock {
            kind: CliqueKind::Emission,
            tied_across_positions: true,
            configurations: None,
        },
        TiedBlock {
            kind: CliqueKind::Transition,
            tied_across_positions: true,
            configurations: Some(alphabet.len() * alphabet.len()),
        },
    ]
}
