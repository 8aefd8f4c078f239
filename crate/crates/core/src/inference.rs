//! Exact inference on a linear chain: log-partition, clique marginals and
//! MAP decoding. Everything runs in log space.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Largest number of labelings the enumeration oracle will visit.
pub const BRUTE_FORCE_BUDGET: f64 = 1e6;

/// Clique scores of one sequence under a fixed parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    /// `T x |Y|`: score of label `y` at position `t`.
    pub emission: DMatrix<f64>,
    /// `|Y| x |Y|`: score of the adjacent pair `(y, y')`, shared by every position.
    pub transition: DMatrix<f64>,
}

impl ScoreTable {
    pub fn new(emission: DMatrix<f64>, transition: DMatrix<f64>) -> Result<Self> {
        let table = Self {
            emission,
            transition,
        };
        table.validate()?;
        Ok(table)
    }

    pub fn zeros(len: usize, n_labels: usize) -> Self {
        Self {
            emission: DMatrix::zeros(len, n_labels),
            transition: DMatrix::zeros(n_labels, n_labels),
        }
    }

    pub fn len(&self) -> usize {
        self.emission.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.emission.nrows() == 0
    }

    pub fn n_labels(&self) -> usize {
        self.emission.ncols()
    }

    fn validate(&self) -> Result<()> {
        if self.emission.nrows() == 0 {
            return Err(Error::Input("score table has no positions".into()));
        }
        let l = self.emission.ncols();
        if l == 0 {
            return Err(Error::Input("score table has no labels".into()));
        }
        if self.transition.shape() != (l, l) {
            return Err(Error::dim(l, self.transition.nrows()));
        }
        if self.emission.iter().chain(self.transition.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Input("score table contains a non-finite entry".into()));
        }
        Ok(())
    }

    /// Unnormalized log score of a complete labeling.
    pub fn labeling_score(&self, labels: &[usize]) -> Result<f64> {
        if labels.len() != self.len() {
            return Err(Error::dim(self.len(), labels.len()));
        }
        let l = self.n_labels();
        if let Some(&bad) = labels.iter().find(|&&y| y >= l) {
            return Err(Error::Index { index: bad, len: l });
        }
        let mut score = 0.0;
        for (t, &y) in labels.iter().enumerate() {
            score += self.emission[(t, y)];
        }
        for pair in labels.windows(2) {
            score += self.transition[(pair[0], pair[1])];
        }
        Ok(score)
    }
}

/// Log-partition value and exact clique marginals of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct CliqueMarginals {
    pub log_partition: f64,
    /// `T x |Y|`.
    pub unary: DMatrix<f64>,
    /// `T - 1` matrices of shape `|Y| x |Y|`; entry `(y, y')` is `P(y_t = y, y_{t+1} = y')`.
    pub pairwise: Vec<DMatrix<f64>>,
}

#[inline]
fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn forward_backward(scores: &ScoreTable) -> Result<CliqueMarginals> {
    scores.validate()?;
    let t_len = scores.len();
    let l = scores.n_labels();
    let em = &scores.emission;
    let tr = &scores.transition;

    let mut alpha = DMatrix::zeros(t_len, l);
    for y in 0..l {
        alpha[(0, y)] = em[(0, y)];
    }
    for t in 1..t_len {
        for y in 0..l {
            let incoming = log_sum_exp((0..l).map(|p| alpha[(t - 1, p)] + tr[(p, y)]));
            alpha[(t, y)] = em[(t, y)] + incoming;
        }
    }

    let mut beta = DMatrix::zeros(t_len, l);
    for t in (0..t_len - 1).rev() {
        for y in 0..l {
            beta[(t, y)] =
                log_sum_exp((0..l).map(|n| tr[(y, n)] + em[(t + 1, n)] + beta[(t + 1, n)]));
        }
    }

    let log_partition = log_sum_exp((0..l).map(|y| alpha[(t_len - 1, y)]));
    if !log_partition.is_finite() {
        return Err(Error::Numerical(format!(
            "log-partition evaluated to {log_partition}"
        )));
    }

    let unary = DMatrix::from_fn(t_len, l, |t, y| {
        (alpha[(t, y)] + beta[(t, y)] - log_partition).exp().min(1.0)
    });
    let pairwise = (0..t_len - 1)
        .map(|t| {
            DMatrix::from_fn(l, l, |y, n| {
                (alpha[(t, y)] + tr[(y, n)] + em[(t + 1, n)] + beta[(t + 1, n)] - log_partition)
                    .exp()
                    .min(1.0)
            })
        })
        .collect();

    Ok(CliqueMarginals {
        log_partition,
        unary,
        pairwise,
    })
}

/// Enumeration oracle with the same contract as [`forward_backward`].
pub fn brute_force_marginals(scores: &ScoreTable) -> Result<CliqueMarginals> {
    scores.validate()?;
    let t_len = scores.len();
    let l = scores.n_labels();
    let states = (l as f64).powi(t_len as i32);
    if states > BRUTE_FORCE_BUDGET {
        return Err(Error::Size {
            states,
            budget: BRUTE_FORCE_BUDGET,
        });
    }

    let labelings = all_labelings(t_len, l);
    let log_scores: Vec<f64> = labelings
        .iter()
        .map(|y| scores.labeling_score(y))
        .collect::<Result<_>>()?;
    let log_partition = log_sum_exp(log_scores.iter().copied());

    let mut unary = DMatrix::zeros(t_len, l);
    let mut pairwise = vec![DMatrix::zeros(l, l); t_len - 1];
    for (y, s) in labelings.iter().zip(&log_scores) {
        let p = (s - log_partition).exp();
        for (t, &label) in y.iter().enumerate() {
            unary[(t, label)] += p;
        }
        for (t, pair) in y.windows(2).enumerate() {
            pairwise[t][(pair[0], pair[1])] += p;
        }
    }
    Ok(CliqueMarginals {
        log_partition,
        unary,
        pairwise,
    })
}

/// Every labeling of length `len` over `n_labels` labels, in lexicographic order.
pub fn all_labelings(len: usize, n_labels: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = vec![0usize; len];
    loop {
        out.push(current.clone());
        let mut pos = len;
        loop {
            if pos == 0 {
                return out;
            }
            pos -= 1;
            current[pos] += 1;
            if current[pos] < n_labels {
                break;
            }
            current[pos] = 0;
        }
    }
}

/// Highest-scoring labeling; among ties, the lexicographically smallest one.
pub fn viterbi(scores: &ScoreTable) -> Result<Vec<usize>> {
    scores.validate()?;
    let t_len = scores.len();
    let l = scores.n_labels();
    let em = &scores.emission;
    let tr = &scores.transition;

    // best[t][y]: best score of positions t.. given y_t = y
    let mut best = DMatrix::zeros(t_len, l);
    for y in 0..l {
        best[(t_len - 1, y)] = em[(t_len - 1, y)];
    }
    for t in (0..t_len - 1).rev() {
        for y in 0..l {
            let tail = (0..l)
                .map(|n| tr[(y, n)] + best[(t + 1, n)])
                .fold(f64::NEG_INFINITY, f64::max);
            best[(t, y)] = em[(t, y)] + tail;
        }
    }

    // Walking forward and taking the first maximizer at each step yields the
    // lexicographically smallest optimal labeling.
    let mut labels = Vec::with_capacity(t_len);
    labels.push(first_argmax((0..l).map(|y| best[(0, y)])));
    for t in 1..t_len {
        let prev = labels[t - 1];
        labels.push(first_argmax((0..l).map(|n| tr[(prev, n)] + best[(t, n)])));
    }
    Ok(labels)
}

fn first_argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    for (i, v) in values.enumerate() {
        if v > best {
            best = v;
            arg = i;
        }
    }
    arg
}

/// `log p(y | x)`: labeling score minus the log-partition.
pub fn sequence_log_prob(scores: &ScoreTable, labels: &[usize]) -> Result<f64> {
    let score = scores.labeling_score(labels)?;
    let marginals = forward_backward(scores)?;
    Ok((score - marginals.log_partition).min(0.0))
}
