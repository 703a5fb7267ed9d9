//! Rank-N-Contrast loss.
//!
//! For anchor `i` and partner `j` the softmax denominator runs over every
//! `k != i` whose label distance from `i` is at least that of `j`. The batch
//! loss averages `-log(exp(s_ij/τ) / Σ_{k∈S_ij} exp(s_ik/τ))` over all ordered
//! pairs, with `s = -‖v_i - v_k‖₂`.
//!
//! Per anchor the candidate sets are nested (they shrink as `d(i, j)` grows),
//! so sorting partners by label distance lets each denominator be built
//! incrementally with a running log-sum-exp. That keeps the cost at
//! `O(M² log M)` and stabilizes every denominator by its own maximum.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, invalid, Error, Result};
use crate::tensor::{axpy, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LabelDistance {
    #[default]
    L1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSimilarity {
    #[default]
    NegativeL2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RncConfig {
    pub temperature: f64,
    #[serde(default)]
    pub label_distance: LabelDistance,
    #[serde(default)]
    pub feature_similarity: FeatureSimilarity,
}

impl Default for RncConfig {
    fn default() -> Self {
        Self {
            temperature: 2.0,
            label_distance: LabelDistance::L1,
            feature_similarity: FeatureSimilarity::NegativeL2,
        }
    }
}

impl RncConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature > 0.0 && self.temperature.is_finite() {
            Ok(())
        } else {
            Err(invalid("temperature", "must be positive and finite"))
        }
    }
}

/// Embeddings and their labels, row-aligned.
#[derive(Debug, Clone, Copy)]
pub struct RncBatch<'a> {
    embeddings: &'a Matrix,
    labels: &'a [f64],
}

impl<'a> RncBatch<'a> {
    pub fn new(embeddings: &'a Matrix, labels: &'a [f64]) -> Result<Self> {
        ensure_len("rnc labels", embeddings.rows(), labels.len())?;
        if labels.len() < 2 {
            return Err(invalid("batch", "Rank-N-Contrast needs at least two samples"));
        }
        if !embeddings.is_finite() || labels.iter().any(|y| !y.is_finite()) {
            return Err(Error::NonFinite("rnc batch"));
        }
        Ok(Self { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RncLossOutput {
    pub value: f64,
    /// d value / d embeddings, same shape as the batch embeddings.
    pub grad: Matrix,
}

/// Indices `k != i` with `|y_i - y_k| >= |y_i - y_j|`, ascending.
pub fn candidate_set(i: usize, j: usize, labels: &[f64]) -> Result<Vec<usize>> {
    if i == j {
        return Err(invalid("j", "anchor and partner must differ"));
    }
    if i >= labels.len() || j >= labels.len() {
        return Err(invalid("index", "out of range"));
    }
    let dj = (labels[i] - labels[j]).abs();
    Ok((0..labels.len())
        .filter(|&k| k != i && (labels[i] - labels[k]).abs() >= dj)
        .collect())
}

/// Running log-sum-exp.
#[derive(Clone, Copy)]
struct LogSumExp {
    max: f64,
    sum: f64,
}

impl LogSumExp {
    fn new() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }

    fn push(&mut self, x: f64) {
        if x > self.max {
            self.sum = self.sum * (self.max - x).exp() + 1.0;
            self.max = x;
        } else {
            self.sum += (x - self.max).exp();
        }
    }

    fn value(&self) -> f64 {
        self.max + self.sum.ln()
    }
}

/// Groups of equal label distance over `order` (already sorted by distance).
fn tie_groups<'a>(order: &'a [usize], dist: &'a [f64]) -> impl Iterator<Item = &'a [usize]> + 'a {
    order.chunk_by(move |&a, &b| dist[a] == dist[b])
}

pub fn rnc_loss(batch: &RncBatch<'_>, config: &RncConfig) -> Result<RncLossOutput> {
    config.validate()?;
    let m = batch.len();
    let emb = batch.embeddings;
    let labels = batch.labels;
    let inv_tau = 1.0 / config.temperature;
    let scale = 1.0 / (m as f64 * (m - 1) as f64);

    let mut grad = Matrix::zeros(m, emb.cols());
    let mut diff = vec![0.0; emb.cols()];
    let mut value = 0.0;

    // per-anchor scratch, indexed by sample
    let mut dist = vec![0.0; m];
    let mut logit = vec![0.0; m];
    let mut radius = vec![0.0; m];
    let mut log_denom = vec![0.0; m];
    let mut coeff = vec![0.0; m];

    for i in 0..m {
        let vi = emb.row(i);
        let mut order: Vec<usize> = (0..m).filter(|&k| k != i).collect();
        for &k in &order {
            dist[k] = (labels[i] - labels[k]).abs();
            let r = crate::tensor::sq_dist(vi, emb.row(k)).sqrt();
            radius[k] = r;
            logit[k] = -r * inv_tau;
        }
        // farthest first: S_ij grows as d(i, j) shrinks
        order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));

        let mut lse = LogSumExp::new();
        for group in tie_groups(&order, &dist) {
            for &k in group {
                lse.push(logit[k]);
            }
            let denom = lse.value();
            for &j in group {
                log_denom[j] = denom;
                value += (denom - logit[j]).max(0.0);
            }
        }

        // d(loss_i)/d(logit_k) = Σ_{j: d_j <= d_k} softmax_ij(k) - 1
        let mut acc = LogSumExp::new();
        for group in tie_groups(&order, &dist).collect::<Vec<_>>().into_iter().rev() {
            for &j in group {
                acc.push(-log_denom[j]);
            }
            let log_a = acc.value();
            for &k in group {
                coeff[k] = (logit[k] + log_a).exp() - 1.0;
            }
        }

        for &k in &order {
            if radius[k] == 0.0 {
                continue;
            }
            // logit = -r/τ, dr/dv_i = (v_i - v_k)/r
            let g = -scale * coeff[k] * inv_tau / radius[k];
            for (d, (a, b)) in diff.iter_mut().zip(vi.iter().zip(emb.row(k))) {
                *d = a - b;
            }
            axpy(g, &diff, grad.row_mut(i));
            axpy(-g, &diff, grad.row_mut(k));
        }
    }

    Ok(RncLossOutput {
        value: value * scale,
        grad,
    })
}
