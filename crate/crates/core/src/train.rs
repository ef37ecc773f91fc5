//! End-to-end training, evaluation and scene analysis.

use alloc::string::ToString;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::data::{switching_profile, Trajectory};
use crate::error::{Error, Result};
use crate::model::GtrModel;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::predictor::{metrics_from_ranks, rank_of, RankMetrics, CUTOFFS};
use crate::rng;
use crate::tape::Tape;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 50, batch_size: 128, lr: 1e-3, clip_norm: Some(5.0) }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip_norm must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, clip_norm: self.clip_norm, ..AdamConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean loss per prediction over the epoch.
    pub train_loss: f64,
    /// POI metrics on the validation split, when one was given.
    pub val: Option<RankMetrics>,
}

/// Optimizer state and history; enough to resume training exactly.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainState {
    /// Number of completed epochs.
    pub epoch: usize,
    pub adam: AdamState,
    pub best_epoch: Option<usize>,
    pub best_mrr: f64,
    /// Parameters at the best validation MRR.
    pub best_params: Option<ParamStore>,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(model: &GtrModel) -> Self {
        TrainState {
            epoch: 0,
            adam: AdamState::new(&model.store),
            best_epoch: None,
            best_mrr: f64::NEG_INFINITY,
            best_params: None,
            history: Vec::new(),
        }
    }
}

/// Runs one shuffled pass over `train` and returns the mean loss per
/// prediction. The shuffle depends only on `(seed, epoch)`.
pub fn train_epoch(
    model: &mut GtrModel,
    state: &mut TrainState,
    train: &[Trajectory],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    cfg.validate()?;
    let epoch = state.epoch;
    let mut order: Vec<usize> = (0..train.len()).filter(|&i| train[i].len() >= 2).collect();
    if order.is_empty() {
        return Err(Error::Data("no training trajectory has two or more steps".into()));
    }
    order.shuffle(&mut rng::stream(seed, rng::tags::TRAIN_SHUFFLE, epoch as u64));
    let adam = cfg.adam();
    let mut total = 0.0;
    let mut count = 0usize;
    for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let trajs: Vec<&Trajectory> = chunk.iter().map(|&i| &train[i]).collect();
        let mut tape = Tape::new();
        let (loss, n) = model.record_loss(&mut tape, &trajs)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Diverged { epoch, batch, what: "training loss".to_string() });
        }
        let grads = tape.param_grads(loss, model.store.len())?;
        adam_step(&mut model.store, &grads, &adam, &mut state.adam).map_err(|e| match e {
            Error::NanGradient(name) => Error::Diverged { epoch, batch, what: alloc::format!("gradient of {name}") },
            other => other,
        })?;
        total += value * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

/// Trains until `cfg.epochs` epochs have completed, continuing from
/// `state.epoch`. `on_epoch` sees every new record.
pub fn fit(
    model: &mut GtrModel,
    state: &mut TrainState,
    train: &[Trajectory],
    val: &[Trajectory],
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<()> {
    while state.epoch < cfg.epochs {
        let train_loss = train_epoch(model, state, train, cfg, seed)?;
        let val_metrics = if val.is_empty() { None } else { Some(evaluate(model, val)?.poi) };
        let mrr = val_metrics.as_ref().map_or(-train_loss, |m| m.mrr);
        if mrr > state.best_mrr {
            state.best_mrr = mrr;
            state.best_epoch = Some(state.epoch);
            state.best_params = Some(model.store.clone());
        }
        let record = EpochRecord { epoch: state.epoch, train_loss, val: val_metrics };
        on_epoch(&record);
        state.history.push(record);
        state.epoch += 1;
    }
    Ok(())
}

/// Ranks of the true next POI, category and region at every position.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRanks {
    /// `[poi, category, region]`, each with `len - 1` entries.
    pub ranks: [Vec<usize>; 3],
}

/// Teacher-forced ranks for every prediction in one trajectory.
pub fn step_ranks(model: &GtrModel, traj: &Trajectory) -> Result<StepRanks> {
    if traj.len() < 2 {
        return Err(Error::Input("ranking needs at least two check-ins".into()));
    }
    let mut tape = Tape::new();
    let cands = model.record_candidates(&mut tape);
    let fwd = model.record(&mut tape, traj)?;
    let rows: Vec<usize> = (0..traj.len() - 1).collect();
    let e = tape.gather(fwd.out, &rows)?;
    let scores = model.record_scores(&mut tape, e, &cands)?;
    let next = &traj.steps[1..];
    let mut ranks: [Vec<usize>; 3] = Default::default();
    for (k, r) in ranks.iter_mut().enumerate() {
        let s = tape.value(scores[k]);
        for (i, step) in next.iter().enumerate() {
            let label = [step.poi, step.category, step.region][k];
            r.push(rank_of(s.row(i), label)?);
        }
    }
    Ok(StepRanks { ranks })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub poi: RankMetrics,
    pub category: RankMetrics,
    pub region: RankMetrics,
    /// POI rank per query.
    pub poi_ranks: Vec<usize>,
}

fn collect(ranks: &[Vec<usize>; 3]) -> Result<Evaluation> {
    Ok(Evaluation {
        poi: metrics_from_ranks(&ranks[0], &CUTOFFS)?,
        category: metrics_from_ranks(&ranks[1], &CUTOFFS)?,
        region: metrics_from_ranks(&ranks[2], &CUTOFFS)?,
        poi_ranks: ranks[0].clone(),
    })
}

/// Predicts the last check-in of each trajectory from the ones before it.
pub fn evaluate(model: &GtrModel, trajs: &[Trajectory]) -> Result<Evaluation> {
    let mut ranks: [Vec<usize>; 3] = Default::default();
    for t in trajs.iter().filter(|t| t.len() >= 2) {
        let mut prefix = t.clone();
        prefix.steps.pop();
        let scores = model.score_next(&[&prefix])?;
        let last = t.steps[t.len() - 1];
        for (k, label) in [last.poi, last.category, last.region].into_iter().enumerate() {
            ranks[k].push(rank_of(&scores[0][k], label)?);
        }
    }
    collect(&ranks)
}

/// Metrics over every teacher-forced prediction, not just the last.
pub fn evaluate_all_steps(model: &GtrModel, trajs: &[Trajectory]) -> Result<Evaluation> {
    let mut ranks: [Vec<usize>; 3] = Default::default();
    for t in trajs.iter().filter(|t| t.len() >= 2) {
        let r = step_ranks(model, t)?;
        for k in 0..3 {
            ranks[k].extend_from_slice(&r.ranks[k]);
        }
    }
    collect(&ranks)
}

/// Transition scores at or above this mark a transition point.
pub const TRANSITION_SCORE: f64 = 2.0 / 3.0;

/// Mean absolute change in the true item's rank across transition points.
///
/// `ranks[i]` is the rank of check-in `i + 1` predicted at step `i`, and
/// `scores[i]` the switching score of transition `i -> i + 1`. A transition
/// point `i` compares the prediction that crosses it (`ranks[i - 1]`, made
/// before the switch) with the first one made after it (`ranks[i]`).
/// Returns the sum of differences and the number of points.
pub fn rank_changes(ranks: &[usize], scores: &[f64], threshold: f64) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0;
    for i in 1..ranks.len().min(scores.len()) {
        if scores[i] >= threshold {
            sum += ranks[i].abs_diff(ranks[i - 1]) as f64;
            n += 1;
        }
    }
    (sum, n)
}

/// Per-trajectory summary used by scene analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub frequency: f64,
    pub subset: crate::data::SwitchSubset,
    /// Step size averaged over steps, layers and channels.
    pub mean_step: f64,
    /// Per-step mean step sizes.
    pub steps: Vec<f64>,
    /// Rank of the final check-in.
    pub last_rank: usize,
    pub change_sum: f64,
    pub change_points: usize,
}

pub fn scene_record(model: &GtrModel, traj: &Trajectory) -> Result<SceneRecord> {
    let profile = switching_profile(traj, model.config.local_time)?;
    let steps = model.mean_step_sizes(traj)?;
    let mean_step = if steps.is_empty() { f64::NAN } else { steps.iter().sum::<f64>() / steps.len() as f64 };
    let ranks = step_ranks(model, traj)?;
    let (change_sum, change_points) = rank_changes(&ranks.ranks[0], &profile.scores, TRANSITION_SCORE);
    Ok(SceneRecord {
        frequency: profile.frequency,
        subset: profile.subset,
        mean_step,
        steps,
        last_rank: *ranks.ranks[0].last().ok_or(Error::State("no predictions"))?,
        change_sum,
        change_points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_change_fixture() {
        // transitions 1 and 3 are switch points
        let ranks = [4, 1, 2, 6, 5];
        let scores = [0.0, 1.0, 1.0 / 3.0, 2.0 / 3.0, 0.0];
        assert_eq!(rank_changes(&ranks, &scores, TRANSITION_SCORE), (3.0 + 4.0, 2));
        assert_eq!(rank_changes(&[1], &[1.0], TRANSITION_SCORE), (0.0, 0));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
    }
}
