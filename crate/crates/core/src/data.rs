//! Datasets and the plain-text sequence format.
//!
//! One position per line, `label<TAB>f1<TAB>f2...`; a blank line ends a
//! sequence; the label `?` marks an unlabeled position.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::chain::{LabelAlphabet, LabeledSequence};
use crate::error::{Error, Result};

/// Label used for positions whose label is unknown.
pub const UNLABELED: &str = "?";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<LabeledSequence>,
    pub alphabet: LabelAlphabet,
    pub feature_dim: usize,
}

impl Dataset {
    pub fn new(sequences: Vec<LabeledSequence>, alphabet: LabelAlphabet) -> Result<Self> {
        let feature_dim = sequences.first().map_or(0, LabeledSequence::feature_dim);
        for seq in &sequences {
            if seq.feature_dim() != feature_dim {
                return Err(Error::dim(feature_dim, seq.feature_dim()));
            }
            if let Some(&bad) = seq.labels().into_iter().flatten().find(|&&y| y >= alphabet.len()) {
                return Err(Error::Index {
                    index: bad,
                    len: alphabet.len(),
                });
            }
        }
        Ok(Self {
            sequences,
            alphabet,
            feature_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn n_labels(&self) -> usize {
        self.alphabet.len()
    }

    pub fn n_positions(&self) -> usize {
        self.sequences.iter().map(LabeledSequence::len).sum()
    }

    /// Sequences at `indices`, in that order, sharing this dataset's alphabet.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            sequences: indices.iter().map(|&i| self.sequences[i].clone()).collect(),
            alphabet: self.alphabet.clone(),
            feature_dim: self.feature_dim,
        }
    }

    /// Errors unless every sequence carries labels.
    pub fn require_labeled(&self) -> Result<()> {
        for seq in &self.sequences {
            seq.require_labels()?;
        }
        Ok(())
    }

    /// Serializes in the line format; unlabeled sequences get `?` labels.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, seq) in self.sequences.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            for (t, row) in seq.features().iter().enumerate() {
                let label = seq
                    .labels()
                    .and_then(|y| self.alphabet.name(y[t]))
                    .unwrap_or(UNLABELED);
                out.push_str(label);
                for v in row {
                    let _ = write!(out, "\t{v}");
                }
                out.push('\n');
            }
        }
        out
    }
}

/// How an input line maps onto the parsed sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LineSlot {
    Blank,
    Position { sequence: usize, position: usize },
}

/// A parsed file together with its line layout, so outputs can mirror it.
#[derive(Clone, Debug)]
pub struct ParsedFile {
    pub dataset: Dataset,
    pub layout: Vec<LineSlot>,
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    Ok(load_file(path, None)?.dataset)
}

/// Loads a file whose labels (if any) must come from `alphabet`.
pub fn load_dataset_with_alphabet(
    path: impl AsRef<Path>,
    alphabet: &LabelAlphabet,
) -> Result<Dataset> {
    Ok(load_file(path, Some(alphabet))?.dataset)
}

pub fn load_file(path: impl AsRef<Path>, alphabet: Option<&LabelAlphabet>) -> Result<ParsedFile> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, path, alphabet)
}

struct PendingRow {
    line: usize,
    label: Option<String>,
    features: Vec<f64>,
}

pub fn parse_dataset(text: &str, path: &Path, alphabet: Option<&LabelAlphabet>) -> Result<ParsedFile> {
    let mut builder = Builder {
        path: path.to_path_buf(),
        alphabet: alphabet.cloned().unwrap_or_default(),
        fixed_alphabet: alphabet.is_some(),
        feature_dim: None,
        sequences: Vec::new(),
    };
    let mut layout = Vec::new();
    let mut pending: Vec<PendingRow> = Vec::new();
    let mut blank_run = 0usize;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            if pending.is_empty() && blank_run > 0 {
                log::warn!("{}:{line_no}: empty sequence block skipped", path.display());
            }
            if !pending.is_empty() {
                builder.finish(std::mem::take(&mut pending))?;
            }
            blank_run += 1;
            layout.push(LineSlot::Blank);
            continue;
        }
        blank_run = 0;
        let row = parse_row(line, line_no, path)?;
        layout.push(LineSlot::Position {
            sequence: builder.sequences.len(),
            position: pending.len(),
        });
        pending.push(row);
    }
    if !pending.is_empty() {
        builder.finish(pending)?;
    }
    if builder.sequences.is_empty() {
        return Err(Error::EmptyDataset(path.to_path_buf()));
    }

    let feature_dim = builder.feature_dim.unwrap_or(0);
    Ok(ParsedFile {
        dataset: Dataset {
            sequences: builder.sequences,
            alphabet: builder.alphabet,
            feature_dim,
        },
        layout,
    })
}

fn parse_row(line: &str, line_no: usize, path: &Path) -> Result<PendingRow> {
    let parse_err = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: line_no,
        msg,
    };
    let mut fields = line.split('\t');
    let label = fields.next().unwrap_or_default().trim();
    if label.is_empty() {
        return Err(parse_err("missing label".into()));
    }
    let features = fields
        .enumerate()
        .map(|(i, f)| {
            let f = f.trim();
            f.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(format!("feature {} is not a finite number: '{f}'", i + 1)))
        })
        .collect::<Result<Vec<f64>>>()?;
    if features.is_empty() {
        return Err(parse_err("no features after the label".into()));
    }
    Ok(PendingRow {
        line: line_no,
        label: (label != UNLABELED).then(|| label.to_owned()),
        features,
    })
}

struct Builder {
    path: PathBuf,
    alphabet: LabelAlphabet,
    fixed_alphabet: bool,
    feature_dim: Option<usize>,
    sequences: Vec<LabeledSequence>,
}

impl Builder {
    fn finish(&mut self, rows: Vec<PendingRow>) -> Result<()> {
        let first_line = rows[0].line;
        let labeled = rows[0].label.is_some();
        let mut labels = Vec::with_capacity(rows.len());
        let mut features = Vec::with_capacity(rows.len());
        for row in rows {
            let dim = *self.feature_dim.get_or_insert(row.features.len());
            if row.features.len() != dim {
                return Err(Error::Schema {
                    path: self.path.clone(),
                    msg: format!(
                        "line {}: expected {dim} features, found {}",
                        row.line,
                        row.features.len()
                    ),
                });
            }
            match (&row.label, labeled) {
                (Some(name), true) => labels.push(self.label_id(name, row.line)?),
                (None, false) => {}
                _ => {
                    return Err(Error::Parse {
                        path: self.path.clone(),
                        line: row.line,
                        msg: "sequence mixes labeled and unlabeled ('?') positions".into(),
                    })
                }
            }
            features.push(row.features);
        }
        let id = format!("{}:{first_line}", self.path.display());
        let seq = LabeledSequence::new(id, features, labeled.then_some(labels))?;
        self.sequences.push(seq);
        Ok(())
    }

    fn label_id(&mut self, name: &str, line: usize) -> Result<usize> {
        if self.fixed_alphabet {
            self.alphabet.id(name).ok_or_else(|| Error::Parse {
                path: self.path.clone(),
                line,
                msg: format!("label '{name}' is not in the model alphabet"),
            })
        } else {
            Ok(self.alphabet.intern(name))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ParsedFile> {
        parse_dataset(text, Path::new("mem.txt"), None)
    }

    #[test]
    fn two_blocks() {
        let parsed = parse("A\t1\t2\nB\t3\t4\n\nB\t5\t6\n").unwrap();
        let d = parsed.dataset;
        assert_eq!(d.len(), 2);
        assert_eq!(d.feature_dim, 2);
        assert_eq!(d.alphabet.names(), ["A", "B"]);
        assert_eq!(d.sequences[0].labels(), Some(&[0, 1][..]));
        assert_eq!(d.sequences[1].labels(), Some(&[1][..]));
        assert_eq!(parsed.layout.len(), 4);
        assert_eq!(parsed.layout[2], LineSlot::Blank);
    }

    #[test]
    fn empty_file() {
        assert!(matches!(parse(""), Err(Error::EmptyDataset(_))));
        assert!(matches!(parse("\n\n"), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn unlabeled_uses_given_alphabet() {
        let alphabet = LabelAlphabet::new(["x", "y"]).unwrap();
        let parsed = parse_dataset("?\t1\n?\t2\n", Path::new("p"), Some(&alphabet)).unwrap();
        assert_eq!(parsed.dataset.sequences[0].labels(), None);
        assert_eq!(parsed.dataset.alphabet, alphabet);
    }

    #[test]
    fn unknown_label_against_fixed_alphabet() {
        let alphabet = LabelAlphabet::new(["x"]).unwrap();
        let err = parse_dataset("z\t1\n", Path::new("p"), Some(&alphabet)).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse("A\t1\nA\tnope\n").unwrap_err();
        match err {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 2);
                assert!(msg.contains("nope"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse("A\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn inconsistent_feature_count() {
        let err = parse("A\t1\t2\n\nA\t1\n").unwrap_err();
        assert!(matches!(err, Error::Schema { .. }), "{err}");
    }

    #[test]
    fn mixed_labels_rejected() {
        assert!(matches!(parse("A\t1\n?\t2\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn extra_blank_lines_are_preserved_in_layout() {
        let parsed = parse("A\t1\n\n\n\nB\t2\n").unwrap();
        assert_eq!(parsed.dataset.len(), 2);
        assert_eq!(parsed.layout.len(), 5);
    }

    #[test]
    fn text_round_trip() {
        let parsed = parse("A\t0.1\t-2.5\nB\t3e-7\t4\n\nB\t5\t6\n").unwrap();
        let text = parsed.dataset.to_text();
        let again = parse(&text).unwrap().dataset;
        assert_eq!(again.alphabet, parsed.dataset.alphabet);
        for (a, b) in again.sequences.iter().zip(&parsed.dataset.sequences) {
            assert_eq!(a.features(), b.features());
            assert_eq!(a.labels(), b.labels());
        }
    }
}
