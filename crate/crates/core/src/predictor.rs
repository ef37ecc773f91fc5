//! Dual-pathway scoring, multi-task loss and ranking metrics.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fm;
use crate::manifold::{log_o, sq_lorentz_dist, Geometry, LorentzPoint};
use crate::params::{Linear, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{log_sum_exp, NodeId, Tape};
use crate::tensor::Tensor;

/// Metric cutoffs reported everywhere.
pub const CUTOFFS: [usize; 3] = [1, 5, 10];

/// `-sqrt(d_L^2(e, c)) / tau` per candidate.
pub fn score_hyperbolic(e: &LorentzPoint, candidates: &[LorentzPoint], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(alloc::format!("temperature must be positive, got {tau}")));
    }
    candidates.iter().map(|c| Ok(-fm::sqrt(sq_lorentz_dist(e, c)?.max(0.0)) / tau)).collect()
}

/// `W log_o(e) + b` with `weights` stored `K x d`.
pub fn score_tangent(e: &LorentzPoint, weights: &Tensor, bias: &[f64]) -> Result<Vec<f64>> {
    let v = log_o(e)?;
    if weights.cols != v.spatial.len() {
        return Err(Error::Dimension { expected: weights.cols, got: v.spatial.len() });
    }
    if bias.len() != weights.rows {
        return Err(Error::Dimension { expected: weights.rows, got: bias.len() });
    }
    Ok((0..weights.rows).map(|k| fm::dot(weights.row(k), &v.spatial) + bias[k]).collect())
}

/// `alpha * tangent + (1 - alpha) * hyperbolic`.
pub fn mix_scores(tangent: &[f64], hyperbolic: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if tangent.len() != hyperbolic.len() {
        return Err(Error::Dimension { expected: tangent.len(), got: hyperbolic.len() });
    }
    Ok(tangent.iter().zip(hyperbolic).map(|(t, h)| alpha * t + (1.0 - alpha) * h).collect())
}

/// Softmax cross-entropy of one score row.
pub fn cross_entropy(scores: &[f64], label: usize) -> Result<f64> {
    if label >= scores.len() {
        return Err(Error::Lookup { kind: "label", index: label });
    }
    Ok(log_sum_exp(scores) - scores[label])
}

/// Sum of the POI, category and region cross-entropies for one query.
pub fn multitask_loss(scores: [&[f64]; 3], labels: [usize; 3]) -> Result<f64> {
    let mut total = 0.0;
    for (s, y) in scores.iter().zip(labels) {
        total += cross_entropy(s, y)?;
    }
    Ok(total)
}

/// One-based rank of `label`; ties go to the lower candidate index.
pub fn rank_of(scores: &[f64], label: usize) -> Result<usize> {
    let target = *scores.get(label).ok_or(Error::Lookup { kind: "label", index: label })?;
    if !target.is_finite() {
        return Err(Error::NonFinite("target score"));
    }
    let ahead = scores.iter().enumerate().filter(|(j, s)| **s > target || (**s == target && *j < label)).count();
    Ok(ahead + 1)
}

/// `1/log2(rank + 1)` within the cutoff, else 0.
pub fn ndcg_at(rank: usize, k: usize) -> f64 {
    if rank <= k {
        core::f64::consts::LN_2 / fm::ln(rank as f64 + 1.0)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RankMetrics {
    pub queries: usize,
    pub ks: Vec<usize>,
    pub ndcg: Vec<f64>,
    pub acc: Vec<f64>,
    pub mrr: f64,
}

impl RankMetrics {
    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&c| c == k).map(|i| self.ndcg[i])
    }

    pub fn acc_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&c| c == k).map(|i| self.acc[i])
    }
}

/// Aggregate metrics over one-based ranks.
pub fn metrics_from_ranks(ranks: &[usize], ks: &[usize]) -> Result<RankMetrics> {
    if ranks.is_empty() {
        return Err(Error::Data("no queries to evaluate".into()));
    }
    if let Some(&r) = ranks.iter().find(|r| **r == 0) {
        return Err(Error::Input(alloc::format!("rank {r} is not one-based")));
    }
    let n = ranks.len() as f64;
    let ndcg = ks.iter().map(|&k| ranks.iter().map(|&r| ndcg_at(r, k)).sum::<f64>() / n).collect();
    let acc = ks.iter().map(|&k| ranks.iter().filter(|&&r| r <= k).count() as f64 / n).collect();
    let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
    Ok(RankMetrics { queries: ranks.len(), ks: ks.to_vec(), ndcg, acc, mrr })
}

/// Ranks every score list against its label and aggregates.
pub fn rank_metrics(scores: &[Vec<f64>], labels: &[usize], ks: &[usize]) -> Result<RankMetrics> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension { expected: scores.len(), got: labels.len() });
    }
    let ranks = scores.iter().zip(labels).map(|(s, &y)| rank_of(s, y)).collect::<Result<Vec<_>>>()?;
    metrics_from_ranks(&ranks, ks)
}

/// Learned head parameters shared by the three tasks.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Head {
    /// `tau = exp(log_tau)`.
    pub log_tau: ParamId,
    /// `alpha = sigmoid(alpha_raw)`.
    pub alpha_raw: ParamId,
    /// Tangent decoders for POI, category and region.
    pub decoders: [Linear; 3],
}

impl Head {
    pub fn new(store: &mut ParamStore, d: usize, counts: [usize; 3], rng: &mut Rng) -> Self {
        let log_tau = store.add("head.log_tau", Tensor::scalar(0.0));
        let alpha_raw = store.add("head.alpha_raw", Tensor::scalar(0.0));
        let names = ["head.poi", "head.cat", "head.reg"];
        let decoders = [0, 1, 2].map(|i| Linear::new(store, names[i], d, counts[i], true, rng));
        Head { log_tau, alpha_raw, decoders }
    }

    pub fn tau(&self, store: &ParamStore) -> f64 {
        fm::exp(store.get(self.log_tau).item())
    }

    pub fn alpha(&self, store: &ParamStore) -> f64 {
        fm::sigmoid(store.get(self.alpha_raw).item())
    }

    /// Mixed scores `N x K` for trajectory points `e` (spatial rows) against
    /// candidate points `cands` (spatial rows) for task `task`.
    pub fn record(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        geometry: Geometry,
        e: NodeId,
        cands: NodeId,
        task: usize,
    ) -> Result<NodeId> {
        let dist = geometry.neg_dist(tape, e, cands)?;
        let log_tau = tape.param(store, self.log_tau);
        let neg = tape.scale(log_tau, -1.0);
        let inv_tau = tape.exp(neg);
        let hyp = tape.mul_scalar(dist, inv_tau)?;
        let tan_in = geometry.log_o(tape, e);
        let tan = self.decoders[task].forward(tape, store, tan_in)?;
        let raw = tape.param(store, self.alpha_raw);
        let alpha = tape.sigmoid(raw);
        let diff = tape.sub(tan, hyp)?;
        let scaled = tape.mul_scalar(diff, alpha)?;
        tape.add(hyp, scaled)
    }
}
