//! Prediction, label distributions and the perplexity-regularised objective.
//!
//! Two label distributions are compared per prompt position:
//!
//! * `Q`, a soft label from the cosine similarity between each prompt vector
//!   and every row of the embedding table;
//! * `P`, the tied LM head's output distribution at the same position.
//!
//! Both are restricted to the top-`k` indices of one of them and
//! renormalised, and the two restricted pairs are pulled together by
//! `exp(KL/2)` in both directions.

mod objective;

pub use objective::{build_objective, Objective, ObjectiveVars};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::fmt::sig17;
use crate::model::{PromptContext, VocabEmbedding};
use crate::numerics::{self, argmax, cosine_similarity_matrix, gather, kl_row, topk_indices, Matrix};

/// Tolerance for "sums to one".
pub const DISTRIBUTION_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlppConfig {
    /// Weight of the whole regulariser.
    pub lambda: f64,
    /// Share of the regulariser given to the `Q`-indexed pair.
    pub alpha: f64,
    pub k: usize,
    /// Temperature of the class prediction softmax.
    pub tau: f64,
    /// Temperature of the soft prompt labels.
    pub tau_q: f64,
    /// Probability floor inside logarithms.
    pub epsilon: f64,
}

impl Default for PlppConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            alpha: 0.2,
            k: 5,
            tau: 0.07,
            tau_q: 1.0,
            epsilon: 1e-8,
        }
    }
}

impl PlppConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        ensure!(
            self.lambda >= 0.0 && self.lambda.is_finite(),
            Parameter,
            "lambda must be a finite non-negative number, got {}",
            self.lambda
        );
        ensure!(
            (0.0..=1.0).contains(&self.alpha),
            Parameter,
            "alpha must lie in [0, 1], got {}",
            self.alpha
        );
        ensure!(
            self.k >= 1 && self.k <= vocab_size,
            Parameter,
            "k = {} outside 1..={vocab_size}",
            self.k
        );
        for (name, v) in [("tau", self.tau), ("tau_q", self.tau_q), ("epsilon", self.epsilon)] {
            ensure!(v > 0.0 && v.is_finite(), Parameter, "{name} must be positive, got {v}");
        }
        Ok(())
    }
}

/// One probability row per prompt position.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDistribution {
    pub probs: Matrix,
}

impl TokenDistribution {
    pub fn new(probs: Matrix) -> Result<Self> {
        for (i, row) in probs.row_iter().enumerate() {
            check_distribution(row).map_err(|e| Error::Contract(format!("row {i}: {e}")))?;
        }
        Ok(Self { probs })
    }

    pub fn positions(&self) -> usize {
        self.probs.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.cols()
    }
}

/// Which distribution's top-`k` indices select the support.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TopKSource {
    FromQ,
    FromP,
}

/// `Q` and `P` restricted to shared per-row indices, each row renormalised.
#[derive(Clone, Debug, PartialEq)]
pub struct TopKPair {
    pub indices: Vec<Vec<usize>>,
    pub q: Matrix,
    pub p: Matrix,
    pub source: TopKSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub ppl: f64,
    pub ippl: f64,
    pub total: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub k: usize,
}

impl LossBreakdown {
    pub const CSV_HEADER: [&'static str; 8] =
        ["step", "ce", "ppl", "ippl", "total", "lambda", "alpha", "k"];

    pub fn csv_record(&self, step: usize) -> [String; 8] {
        [
            step.to_string(),
            sig17(self.ce),
            sig17(self.ppl),
            sig17(self.ippl),
            sig17(self.total),
            sig17(self.lambda),
            sig17(self.alpha),
            self.k.to_string(),
        ]
    }
}

fn check_distribution(v: &[f64]) -> Result<()> {
    ensure!(
        v.iter().all(|x| x.is_finite() && *x >= 0.0),
        Contract,
        "entries must be finite and non-negative"
    );
    let total: f64 = v.iter().sum();
    ensure!(
        (total - 1.0).abs() <= DISTRIBUTION_TOL,
        Contract,
        "sums to {total}, not 1"
    );
    Ok(())
}

/// `softmax_i(<text_i, image> / tau)` for unit-norm features.
pub fn prediction_probabilities(text_features: &Matrix, image_feature: &[f64], tau: f64) -> Result<Vec<f64>> {
    ensure!(tau > 0.0, Parameter, "tau must be positive, got {tau}");
    ensure!(
        text_features.cols() == image_feature.len(),
        Dimension,
        "text width {} vs image width {}",
        text_features.cols(),
        image_feature.len()
    );
    let image = Matrix::row_vector(image_feature);
    let sims = numerics::matmul(&image, &text_features.transpose())?;
    Ok(numerics::row_softmax(&sims, tau)?.into_values())
}

/// `-ln(max(probs[label], epsilon))`.
pub fn cross_entropy_alignment(probs: &[f64], label: usize, epsilon: f64) -> Result<f64> {
    let p = probs.get(label).ok_or_else(|| {
        Error::Parameter(format!("label {label} out of range for {} classes", probs.len()))
    })?;
    Ok(-p.max(epsilon).ln())
}

/// Per position, the vocabulary index most cosine-similar to the prompt vector.
pub fn hard_prompt_labels(prompt: &PromptContext, embedding: &VocabEmbedding) -> Result<Vec<usize>> {
    let sims = cosine_similarity_matrix(&prompt.vectors, embedding.table())?;
    Ok(sims
        .row_iter()
        .map(|r| argmax(r).expect("non-empty vocabulary"))
        .collect())
}

/// `Q[m] = softmax(cos(v_m, E) / tau_q)`.
pub fn soft_prompt_labels(prompt: &PromptContext, embedding: &VocabEmbedding, tau_q: f64) -> Result<TokenDistribution> {
    let sims = cosine_similarity_matrix(&prompt.vectors, embedding.table())?;
    TokenDistribution::new(numerics::row_softmax(&sims, tau_q)?)
}

/// `P[m] = softmax(logits[m])`.
pub fn output_distribution(logits: &Matrix) -> Result<TokenDistribution> {
    TokenDistribution::new(numerics::row_softmax(logits, 1.0)?)
}

fn renormalize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let total: f64 = v.iter().sum();
    ensure!(total > 0.0, Degenerate, "top-k mass is zero");
    for x in &mut v {
        *x /= total;
    }
    Ok(v)
}

/// Restricts both distributions to the top-`k` indices of the one named by `source`.
pub fn topk_pair(q: &TokenDistribution, p: &TokenDistribution, k: usize, source: TopKSource) -> Result<TopKPair> {
    ensure!(
        q.probs.shape() == p.probs.shape(),
        Dimension,
        "Q {:?} vs P {:?}",
        q.probs.shape(),
        p.probs.shape()
    );
    let mut indices = Vec::with_capacity(q.positions());
    let mut q_rows = Vec::with_capacity(q.positions() * k);
    let mut p_rows = Vec::with_capacity(q.positions() * k);
    for m in 0..q.positions() {
        let (qr, pr) = (q.probs.row(m), p.probs.row(m));
        let idx = match source {
            TopKSource::FromQ => topk_indices(qr, k)?,
            TopKSource::FromP => topk_indices(pr, k)?,
        };
        q_rows.extend(renormalize(gather(qr, &idx)?)?);
        p_rows.extend(renormalize(gather(pr, &idx)?)?);
        indices.push(idx);
    }
    Ok(TopKPair {
        q: Matrix::from_vec(indices.len(), k, q_rows)?,
        p: Matrix::from_vec(indices.len(), k, p_rows)?,
        indices,
        source,
    })
}

/// `sum_i q_i ln(q_i / max(p_i, epsilon))`, with `0 ln 0 = 0`.
pub fn kl_divergence(q: &[f64], p: &[f64], epsilon: f64) -> Result<f64> {
    check_pair(q, p)?;
    Ok(kl_row(q, p, epsilon))
}

/// `exp(H(q, p))` with `H(q, p) = -sum_i q_i ln(max(p_i, epsilon))`.
pub fn perplexity(q: &[f64], p: &[f64], epsilon: f64) -> Result<f64> {
    check_pair(q, p)?;
    let cross_entropy: f64 = q
        .iter()
        .zip(p)
        .filter(|(&qv, _)| qv > 0.0)
        .map(|(&qv, &pv)| -qv * pv.max(epsilon).ln())
        .sum();
    Ok(cross_entropy.exp())
}

fn check_pair(q: &[f64], p: &[f64]) -> Result<()> {
    ensure!(q.len() == p.len(), Contract, "lengths {} and {}", q.len(), p.len());
    check_distribution(q).map_err(|e| Error::Contract(format!("q {e}")))?;
    check_distribution(p).map_err(|e| Error::Contract(format!("p {e}")))?;
    Ok(())
}

/// `exp(KL(q || p) / 2) + exp(KL(p || q) / 2)`, each KL averaged over every row
/// of every pair before exponentiation.
pub fn mutual_ppl_loss(pairs: &[TopKPair], epsilon: f64) -> Result<f64> {
    let mut forward = 0.0;
    let mut reverse = 0.0;
    let mut rows = 0usize;
    for pair in pairs {
        for m in 0..pair.q.rows() {
            let (q, p) = (pair.q.row(m), pair.p.row(m));
            forward += kl_divergence(q, p, epsilon)?;
            reverse += kl_divergence(p, q, epsilon)?;
            rows += 1;
        }
    }
    ensure!(rows > 0, Contract, "no rows to compare");
    let n = rows as f64;
    Ok((0.5 * (forward / n)).exp() + (0.5 * (reverse / n)).exp())
}

/// `ce + lambda * (alpha * ppl + (1 - alpha) * ippl)`.
pub fn total_loss(ce: f64, ppl: f64, ippl: f64, config: &PlppConfig) -> Result<LossBreakdown> {
    ensure!(
        ce.is_finite() && ppl.is_finite() && ippl.is_finite(),
        Contract,
        "loss components must be finite: ce={ce} ppl={ppl} ippl={ippl}"
    );
    let PlppConfig { lambda, alpha, k, .. } = *config;
    Ok(LossBreakdown {
        ce,
        ppl,
        ippl,
        total: ce + lambda * (alpha * ppl + (1.0 - alpha) * ippl),
        lambda,
        alpha,
        k,
    })
}

#[cfg(test)]
mod tests;
