//! Token and sequence level scores for predicted labelings.

use std::fmt;

use crate::chain::LabelAlphabet;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LabelMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold occurrences.
    pub support: usize,
    pub predicted: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub token_accuracy: f64,
    pub sequence_accuracy: f64,
    pub n_tokens: usize,
    pub n_sequences: usize,
    pub per_label: Vec<LabelMetrics>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Scores `predicted` against `gold`. Precision (recall) of a label that is
/// never predicted (never gold) is reported as 0.
pub fn evaluate(gold: &[Vec<usize>], predicted: &[Vec<usize>], alphabet: &LabelAlphabet) -> Result<Metrics> {
    if gold.len() != predicted.len() {
        return Err(Error::dim(gold.len(), predicted.len()));
    }
    let l = alphabet.len();
    let mut correct = 0usize;
    let mut tokens = 0usize;
    let mut exact = 0usize;
    let mut true_pos = vec![0usize; l];
    let mut gold_count = vec![0usize; l];
    let mut pred_count = vec![0usize; l];
    for (g, p) in gold.iter().zip(predicted) {
        if g.len() != p.len() {
            return Err(Error::dim(g.len(), p.len()));
        }
        let mut all = true;
        for (&a, &b) in g.iter().zip(p) {
            if a >= l || b >= l {
                return Err(Error::Index { index: a.max(b), len: l });
            }
            tokens += 1;
            gold_count[a] += 1;
            pred_count[b] += 1;
            if a == b {
                correct += 1;
                true_pos[a] += 1;
            } else {
                all = false;
            }
        }
        if all {
            exact += 1;
        }
    }
    let per_label = (0..l)
        .map(|y| {
            let precision = ratio(true_pos[y], pred_count[y]);
            let recall = ratio(true_pos[y], gold_count[y]);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            LabelMetrics {
                label: alphabet.name(y).unwrap_or_default().to_owned(),
                precision,
                recall,
                f1,
                support: gold_count[y],
                predicted: pred_count[y],
            }
        })
        .collect();
    Ok(Metrics {
        token_accuracy: ratio(correct, tokens),
        sequence_accuracy: ratio(exact, gold.len()),
        n_tokens: tokens,
        n_sequences: gold.len(),
        per_label,
    })
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "tokens\t{}", self.n_tokens)?;
        writeln!(f, "sequences\t{}", self.n_sequences)?;
        writeln!(f, "token_accuracy\t{:.6}", self.token_accuracy)?;
        writeln!(f, "sequence_accuracy\t{:.6}", self.sequence_accuracy)?;
        writeln!(f, "label\tprecision\trecall\tf1\tsupport")?;
        for m in &self.per_label {
            writeln!(
                f,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{}",
                m.label, m.precision, m.recall, m.f1, m.support
            )?;
        }
        Ok(())
    }
}
