//! Linear-chain CRF over frozen token embeddings.
//!
//! Unary potentials are an affine map of each token vector; pairwise
//! potentials come from a label-transition table, with explicit start and end
//! score vectors. Everything runs in log space.
//!
//! A sequence `y` of length `n` scores
//!
//! ```text
//! start[y0] + Σi (W[yi]·xi + b[yi]) + Σi≥1 T[y(i-1)][yi] + end[y(n-1)]
//! ```
//!
//! and `P(y|x) = exp(score(y) − logZ(x))`.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, sidecar_path, CheckpointMeta, CHECKPOINT_MAGIC};
pub use train::{train, Example, TrainConfig, TrainReport};

use crate::error::{Error, Result};

/// Parameters are kept in one flat buffer in checkpoint order:
/// emission weights (L×D, row-major), emission bias (L), transitions
/// (L×L, `from` major), start (L), end (L).
#[derive(Debug, Clone, PartialEq)]
pub struct CrfModel {
    labels: usize,
    dim: usize,
    params: Vec<f64>,
}

/// Per-position label posteriors, `n × L`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalTable {
    rows: Vec<Vec<f64>>,
}

impl MarginalTable {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        MarginalTable { rows }
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViterbiPath {
    pub labels: Vec<usize>,
    pub score: f64,
}

/// Gradient in the same flat layout as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(pub Vec<f64>);

/// Unary scores for one sequence, shared by the inference routines.
struct Lattice<'m> {
    model: &'m CrfModel,
    unary: Vec<Vec<f64>>,
}

impl CrfModel {
    pub fn zeros(labels: usize, dim: usize) -> Self {
        assert!(labels >= 1, "a CRF needs at least one label");
        CrfModel {
            labels,
            dim,
            params: vec![0.0; Self::param_count(labels, dim)],
        }
    }

    pub fn from_params(labels: usize, dim: usize, params: Vec<f64>) -> Result<Self> {
        if labels == 0 {
            return Err(Error::Checkpoint("label count must be positive".into()));
        }
        let expected = Self::param_count(labels, dim);
        if params.len() != expected {
            return Err(Error::DimMismatch {
                expected,
                found: params.len(),
                key: None,
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(CrfModel { labels, dim, params })
    }

    pub fn param_count(labels: usize, dim: usize) -> usize {
        labels * dim + labels + labels * labels + 2 * labels
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn bias_offset(&self) -> usize {
        self.labels * self.dim
    }

    fn trans_offset(&self) -> usize {
        self.bias_offset() + self.labels
    }

    fn start_offset(&self) -> usize {
        self.trans_offset() + self.labels * self.labels
    }

    fn end_offset(&self) -> usize {
        self.start_offset() + self.labels
    }

    pub fn emission_row(&self, label: usize) -> &[f64] {
        &self.params[label * self.dim..(label + 1) * self.dim]
    }

    pub fn emission_bias(&self) -> &[f64] {
        &self.params[self.bias_offset()..self.trans_offset()]
    }

    pub fn transition(&self, from: usize, to: usize) -> f64 {
        self.params[self.trans_offset() + from * self.labels + to]
    }

    pub fn start_scores(&self) -> &[f64] {
        &self.params[self.start_offset()..self.end_offset()]
    }

    pub fn end_scores(&self) -> &[f64] {
        &self.params[self.end_offset()..]
    }

    pub fn set_emission(&mut self, label: usize, feature: usize, value: f64) {
        self.params[label * self.dim + feature] = value;
    }

    pub fn set_bias(&mut self, label: usize, value: f64) {
        let o = self.bias_offset();
        self.params[o + label] = value;
    }

    pub fn set_transition(&mut self, from: usize, to: usize, value: f64) {
        let o = self.trans_offset();
        self.params[o + from * self.labels + to] = value;
    }

    pub fn set_start(&mut self, label: usize, value: f64) {
        let o = self.start_offset();
        self.params[o + label] = value;
    }

    pub fn set_end(&mut self, label: usize, value: f64) {
        let o = self.end_offset();
        self.params[o + label] = value;
    }

    /// Whether a parameter index belongs to the emission map (vs CRF table).
    pub fn is_emission_param(&self, index: usize) -> bool {
        index < self.trans_offset()
    }

    pub fn is_emission_weight(&self, index: usize) -> bool {
        index < self.bias_offset()
    }

    /// `n × L` unary scores.
    pub fn emissions<E: AsRef<[f64]>>(&self, emb: &[E]) -> Result<Vec<Vec<f64>>> {
        emb.iter()
            .map(|x| {
                let x = x.as_ref();
                if x.len() != self.dim {
                    return Err(Error::DimMismatch {
                        expected: self.dim,
                        found: x.len(),
                        key: None,
                    });
                }
                let bias = self.emission_bias();
                Ok((0..self.labels)
                    .map(|c| dot(self.emission_row(c), x) + bias[c])
                    .collect())
            })
            .collect()
    }

    fn lattice<E: AsRef<[f64]>>(&self, emb: &[E]) -> Result<Lattice<'_>> {
        if emb.is_empty() {
            return Err(Error::EmptyInput("CRF input sequence is empty".into()));
        }
        Ok(Lattice {
            model: self,
            unary: self.emissions(emb)?,
        })
    }

    /// Unnormalized log score of one label sequence.
    pub fn score<E: AsRef<[f64]>>(&self, emb: &[E], labels: &[usize]) -> Result<f64> {
        let lat = self.lattice(emb)?;
        self.check_labels(labels, emb.len())?;
        Ok(lat.path_score(labels))
    }

    pub fn log_partition<E: AsRef<[f64]>>(&self, emb: &[E]) -> Result<f64> {
        let lat = self.lattice(emb)?;
        let alpha = lat.forward();
        Ok(lat.finish(&alpha))
    }

    pub fn marginals<E: AsRef<[f64]>>(&self, emb: &[E]) -> Result<MarginalTable> {
        let lat = self.lattice(emb)?;
        let alpha = lat.forward();
        let beta = lat.backward();
        let log_z = lat.finish(&alpha);
        let rows = alpha
            .iter()
            .zip(&beta)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x + y - log_z).exp()).collect())
            .collect();
        Ok(MarginalTable { rows })
    }

    /// Highest-scoring label sequence; ties go to the lowest label id.
    pub fn viterbi<E: AsRef<[f64]>>(&self, emb: &[E]) -> Result<ViterbiPath> {
        let lat = self.lattice(emb)?;
        let l = self.labels;
        let n = lat.unary.len();
        let mut delta: Vec<f64> = (0..l).map(|c| self.start_scores()[c] + lat.unary[0][c]).collect();
        let mut back = vec![vec![0usize; l]; n];
        for (i, ptr) in back.iter_mut().enumerate().skip(1) {
            let mut next = vec![0.0; l];
            for c in 0..l {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for (p, d) in delta.iter().enumerate() {
                    let s = d + self.transition(p, c);
                    if s > best {
                        best = s;
                        arg = p;
                    }
                }
                next[c] = best + lat.unary[i][c];
                ptr[c] = arg;
            }
            delta = next;
        }
        let mut best = f64::NEG_INFINITY;
        let mut last = 0;
        for (c, d) in delta.iter().enumerate() {
            let s = d + self.end_scores()[c];
            if s > best {
                best = s;
                last = c;
            }
        }
        let mut labels = vec![0; n];
        labels[n - 1] = last;
        for i in (1..n).rev() {
            labels[i - 1] = back[i][labels[i]];
        }
        Ok(ViterbiPath { labels, score: best })
    }

    /// Negative log-likelihood of `gold` and its gradient.
    pub fn nll_and_gradient<E: AsRef<[f64]>>(&self, emb: &[E], gold: &[usize]) -> Result<(f64, Gradient)> {
        let lat = self.lattice(emb)?;
        self.check_labels(gold, emb.len())?;
        let l = self.labels;
        let n = gold.len();
        let alpha = lat.forward();
        let beta = lat.backward();
        let log_z = lat.finish(&alpha);
        let raw = log_z - lat.path_score(gold);
        // rounding can push a near-certain path slightly negative; NaN passes through
        let loss = if raw < 0.0 { 0.0 } else { raw };

        let mut grad = vec![0.0; self.params.len()];
        let (bo, to, so, eo) = (
            self.bias_offset(),
            self.trans_offset(),
            self.start_offset(),
            self.end_offset(),
        );
        for i in 0..n {
            let x = emb[i].as_ref();
            for c in 0..l {
                let mut coeff = (alpha[i][c] + beta[i][c] - log_z).exp();
                if gold[i] == c {
                    coeff -= 1.0;
                }
                if coeff == 0.0 {
                    continue;
                }
                let row = &mut grad[c * self.dim..(c + 1) * self.dim];
                for (g, xv) in row.iter_mut().zip(x) {
                    *g += coeff * xv;
                }
                grad[bo + c] += coeff;
                if i == 0 {
                    grad[so + c] += coeff;
                }
                if i == n - 1 {
                    grad[eo + c] += coeff;
                }
            }
        }
        for i in 1..n {
            for p in 0..l {
                for c in 0..l {
                    let pair = (alpha[i - 1][p] + self.transition(p, c) + lat.unary[i][c] + beta[i][c] - log_z).exp();
                    grad[to + p * l + c] += pair;
                }
            }
            grad[to + gold[i - 1] * l + gold[i]] -= 1.0;
        }
        Ok((loss, Gradient(grad)))
    }

    fn check_labels(&self, labels: &[usize], n: usize) -> Result<()> {
        if labels.len() != n {
            return Err(Error::DimMismatch {
                expected: n,
                found: labels.len(),
                key: None,
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.labels) {
            return Err(Error::InvalidLabel {
                label: bad,
                count: self.labels,
            });
        }
        Ok(())
    }
}

impl Lattice<'_> {
    fn path_score(&self, labels: &[usize]) -> f64 {
        let m = self.model;
        let mut s = m.start_scores()[labels[0]] + m.end_scores()[labels[labels.len() - 1]];
        for (i, &y) in labels.iter().enumerate() {
            s += self.unary[i][y];
            if i > 0 {
                s += m.transition(labels[i - 1], y);
            }
        }
        s
    }

    fn forward(&self) -> Vec<Vec<f64>> {
        let m = self.model;
        let l = m.labels;
        let mut alpha = Vec::with_capacity(self.unary.len());
        alpha.push(
            (0..l)
                .map(|c| m.start_scores()[c] + self.unary[0][c])
                .collect::<Vec<_>>(),
        );
        let mut buf = vec![0.0; l];
        for i in 1..self.unary.len() {
            let prev = &alpha[i - 1];
            let row = (0..l)
                .map(|c| {
                    for p in 0..l {
                        buf[p] = prev[p] + m.transition(p, c);
                    }
                    log_sum_exp(&buf) + self.unary[i][c]
                })
                .collect();
            alpha.push(row);
        }
        alpha
    }

    fn backward(&self) -> Vec<Vec<f64>> {
        let m = self.model;
        let l = m.labels;
        let n = self.unary.len();
        let mut beta = vec![vec![0.0; l]; n];
        beta[n - 1].copy_from_slice(m.end_scores());
        let mut buf = vec![0.0; l];
        for i in (0..n - 1).rev() {
            for p in 0..l {
                for c in 0..l {
                    buf[c] = m.transition(p, c) + self.unary[i + 1][c] + beta[i + 1][c];
                }
                beta[i][p] = log_sum_exp(&buf);
            }
        }
        beta
    }

    fn finish(&self, alpha: &[Vec<f64>]) -> f64 {
        let last = alpha.last().expect("non-empty lattice");
        let terms: Vec<f64> = last.iter().zip(self.model.end_scores()).map(|(a, e)| a + e).collect();
        log_sum_exp(&terms)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests;
