//! Scene-switching analysis over a split.

use gtr_core::data::{balance_subsets, SwitchSubset, Trajectory};
use gtr_core::model::GtrModel;
use gtr_core::train::{scene_record, SceneRecord};

use crate::error::Result;

pub const SUBSETS: [SwitchSubset; 3] = [SwitchSubset::Low, SwitchSubset::Medium, SwitchSubset::High];
pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct SubsetSummary {
    pub subset: SwitchSubset,
    pub trajectories: usize,
    pub acc5: f64,
    pub acc10: f64,
    /// Mean absolute rank change across transition points.
    pub change_rate: f64,
    pub transition_points: usize,
    pub mean_step: f64,
    /// Counts of per-step step sizes over the shared bin edges.
    pub histogram: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneReport {
    pub records: Vec<SceneRecord>,
    /// Indices into `records` kept after balancing, per subset.
    pub balanced: [Vec<usize>; 3],
    /// Histogram bin edges, `HISTOGRAM_BINS + 1` values.
    pub edges: Vec<f64>,
    pub subsets: Vec<SubsetSummary>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Profiles every trajectory with two or more steps, balances the subsets,
/// and summarises each one.
pub fn analyze(model: &GtrModel, trajs: &[Trajectory], balance: bool) -> Result<SceneReport> {
    let usable: Vec<&Trajectory> = trajs.iter().filter(|t| t.len() >= 2).collect();
    let records = usable.iter().map(|t| scene_record(model, t)).collect::<gtr_core::Result<Vec<_>>>()?;
    let balanced = if balance {
        let lengths: Vec<usize> = usable.iter().map(|t| t.len()).collect();
        let labels: Vec<SwitchSubset> = records.iter().map(|r| r.subset).collect();
        balance_subsets(&lengths, &labels)
    } else {
        SUBSETS.map(|s| (0..records.len()).filter(|&i| records[i].subset == s).collect())
    };
    let all_steps: Vec<f64> = records.iter().flat_map(|r| r.steps.iter().copied()).collect();
    let lo = all_steps.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all_steps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (0.0, 1.0) };
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    let edges: Vec<f64> = (0..=HISTOGRAM_BINS).map(|i| lo + width * i as f64).collect();
    let subsets = SUBSETS
        .iter()
        .zip(&balanced)
        .map(|(&subset, idx)| {
            let rs: Vec<&SceneRecord> = idx.iter().map(|&i| &records[i]).collect();
            let mut histogram = vec![0usize; HISTOGRAM_BINS];
            for s in rs.iter().flat_map(|r| r.steps.iter()) {
                let b = (((s - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
                histogram[b] += 1;
            }
            let points: usize = rs.iter().map(|r| r.change_points).sum();
            let change: f64 = rs.iter().map(|r| r.change_sum).sum();
            SubsetSummary {
                subset,
                trajectories: rs.len(),
                acc5: mean(rs.iter().map(|r| f64::from(u8::from(r.last_rank <= 5)))),
                acc10: mean(rs.iter().map(|r| f64::from(u8::from(r.last_rank <= 10)))),
                change_rate: if points == 0 { f64::NAN } else { change / points as f64 },
                transition_points: points,
                mean_step: mean(rs.iter().map(|r| r.mean_step)),
                histogram,
            }
        })
        .collect();
    Ok(SceneReport { records, balanced, edges, subsets })
}
