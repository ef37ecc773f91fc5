//! Entity tables, the relation graph, rotation-aligned contrastive
//! pretraining, and semantic fusion in the tangent space.
//!
//! Entities are stored as tangent vectors at the origin and materialised
//! with `exp_o`, so plain Adam applies and every point stays on the manifold.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::data::{Trajectory, SECONDS_PER_HOUR};
use crate::error::{Error, Result};
use crate::fm;
use crate::manifold::{exp_o, log_o, rotate, sq_lorentz_dist, LorentzPoint, RotationParams, TangentVector};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::{normal_tensor, ParamId, ParamStore};
use crate::rng::{self, Rng};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum EntityKind {
    User,
    Poi,
    Category,
    Region,
}

impl EntityKind {
    pub const ALL: [EntityKind; 4] = [EntityKind::User, EntityKind::Poi, EntityKind::Category, EntityKind::Region];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            EntityKind::User => "user",
            EntityKind::Poi => "poi",
            EntityKind::Category => "category",
            EntityKind::Region => "region",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        EntityKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum EdgeType {
    UserPoi,
    PoiPoi,
    CategoryCategory,
    RegionRegion,
}

impl EdgeType {
    pub const ALL: [EdgeType; 4] =
        [EdgeType::UserPoi, EdgeType::PoiPoi, EdgeType::CategoryCategory, EdgeType::RegionRegion];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            EdgeType::UserPoi => "up",
            EdgeType::PoiPoi => "pp",
            EdgeType::CategoryCategory => "cc",
            EdgeType::RegionRegion => "rr",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        EdgeType::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn source(self) -> EntityKind {
        match self {
            EdgeType::UserPoi => EntityKind::User,
            EdgeType::PoiPoi => EntityKind::Poi,
            EdgeType::CategoryCategory => EntityKind::Category,
            EdgeType::RegionRegion => EntityKind::Region,
        }
    }

    pub fn target(self) -> EntityKind {
        match self {
            EdgeType::UserPoi | EdgeType::PoiPoi => EntityKind::Poi,
            EdgeType::CategoryCategory => EntityKind::Category,
            EdgeType::RegionRegion => EntityKind::Region,
        }
    }
}

/// Distinct `(source, target)` pairs of one type, sorted, with counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeSet {
    pub edge_type: EdgeType,
    pub pairs: Vec<(usize, usize)>,
    pub multiplicity: Vec<u32>,
}

impl EdgeSet {
    fn from_counts(edge_type: EdgeType, counts: BTreeMap<(usize, usize), u32>) -> Self {
        let (pairs, multiplicity) = counts.into_iter().unzip();
        EdgeSet { edge_type, pairs, multiplicity }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// One [`EdgeSet`] per [`EdgeType`], indexed by `EdgeType::index`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeSets {
    pub sets: [EdgeSet; 4],
}

impl EdgeSets {
    pub fn get(&self, t: EdgeType) -> &EdgeSet {
        &self.sets[t.index()]
    }

    pub fn total(&self) -> usize {
        self.sets.iter().map(|s| s.len()).sum()
    }
}

/// User-POI edges for every visit, POI-POI edges for consecutive visits of
/// one user at most `pp_gap_hours` apart, and the category and region edges
/// those transitions induce.
pub fn build_edges(trajs: &[Trajectory], pp_gap_hours: f64) -> Result<EdgeSets> {
    for t in trajs {
        t.check_sorted()?;
    }
    let gap = (pp_gap_hours * SECONDS_PER_HOUR as f64) as i64;
    let mut by_user: BTreeMap<usize, Vec<_>> = BTreeMap::new();
    for t in trajs {
        by_user.entry(t.user).or_default().extend(t.steps.iter().copied());
    }
    let mut counts: [BTreeMap<(usize, usize), u32>; 4] = Default::default();
    for (user, mut steps) in by_user {
        steps.sort_by_key(|s| s.timestamp);
        for s in &steps {
            *counts[0].entry((user, s.poi)).or_default() += 1;
        }
        for w in steps.windows(2) {
            if w[1].timestamp - w[0].timestamp <= gap {
                *counts[1].entry((w[0].poi, w[1].poi)).or_default() += 1;
                *counts[2].entry((w[0].category, w[1].category)).or_default() += 1;
                *counts[3].entry((w[0].region, w[1].region)).or_default() += 1;
            }
        }
    }
    let [up, pp, cc, rr] = counts;
    Ok(EdgeSets {
        sets: [
            EdgeSet::from_counts(EdgeType::UserPoi, up),
            EdgeSet::from_counts(EdgeType::PoiPoi, pp),
            EdgeSet::from_counts(EdgeType::CategoryCategory, cc),
            EdgeSet::from_counts(EdgeType::RegionRegion, rr),
        ],
    })
}

/// Tangent vectors and biases for one entity kind.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EntityTable {
    pub kind: EntityKind,
    /// `count x n`.
    pub vectors: Tensor,
    pub biases: Vec<f64>,
}

impl EntityTable {
    pub fn len(&self) -> usize {
        self.vectors.rows
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows == 0
    }

    pub fn point(&self, i: usize) -> Result<LorentzPoint> {
        if i >= self.len() {
            return Err(Error::Lookup { kind: self.kind.name(), index: i });
        }
        exp_o(&TangentVector::new(self.vectors.row(i).to_vec()))
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EntityTables {
    /// Indexed by `EntityKind::index`.
    pub tables: [EntityTable; 4],
}

impl EntityTables {
    /// Tangent vectors drawn from `Normal(0, std^2)`, zero biases.
    pub fn random(counts: [usize; 4], dim: usize, std: f64, rng: &mut Rng) -> Self {
        let tables = EntityKind::ALL.map(|kind| EntityTable {
            kind,
            vectors: normal_tensor(counts[kind.index()], dim, std, rng),
            biases: vec![0.0; counts[kind.index()]],
        });
        EntityTables { tables }
    }

    pub fn get(&self, kind: EntityKind) -> &EntityTable {
        &self.tables[kind.index()]
    }

    pub fn dim(&self) -> usize {
        self.tables[0].vectors.cols
    }

    pub fn counts(&self) -> [usize; 4] {
        EntityKind::ALL.map(|k| self.get(k).len())
    }
}

/// Pretraining output: tables and one rotation per edge type.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Pretrained {
    pub tables: EntityTables,
    /// Indexed by `EdgeType::index`.
    pub rotations: [RotationParams; 4],
}

/// `-max(d_L^2(R src, dst), 0) + b_src + b_dst`.
pub fn score_edge(src: &LorentzPoint, dst: &LorentzPoint, rot: &RotationParams, b_src: f64, b_dst: f64) -> Result<f64> {
    let d2 = sq_lorentz_dist(&rotate(src, rot), dst)?;
    Ok(-d2.max(0.0) + b_src + b_dst)
}

/// `-(sum log sigmoid(pos) + sum log sigmoid(-neg))`.
pub fn edge_loss(pos: &[f64], neg: &[f64]) -> f64 {
    -(pos.iter().map(|s| fm::log_sigmoid(*s)).sum::<f64>() + neg.iter().map(|s| fm::log_sigmoid(-s)).sum::<f64>())
}

/// `count` indices drawn uniformly from `0..n` excluding `exclude`.
pub fn sample_negatives(n: usize, exclude: usize, count: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::Config(alloc::format!("cannot draw a negative from {n} entities")));
    }
    Ok((0..count)
        .map(|_| {
            // shift past the excluded index so no resampling loop is needed
            let j = rng.random_range(0..n - 1);
            if j >= exclude {
                j + 1
            } else {
                j
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub negatives: usize,
    pub pp_gap_hours: f64,
    pub init_std: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 50, batch_size: 1024, lr: 0.01, negatives: 5, pp_gap_hours: 6.0, init_std: 0.02 }
    }
}

/// Parameter ids of the pretraining problem.
#[derive(Debug, Clone)]
pub struct PretrainParams {
    pub tables: [ParamId; 4],
    pub biases: [ParamId; 4],
    pub rotations: [ParamId; 4],
}

impl PretrainParams {
    pub fn register(store: &mut ParamStore, pre: &Pretrained) -> Self {
        let tables =
            EntityKind::ALL.map(|k| store.add(alloc::format!("table.{}", k.name()), pre.tables.get(k).vectors.clone()));
        let biases = EntityKind::ALL.map(|k| {
            let b = &pre.tables.get(k).biases;
            store.add(alloc::format!("bias.{}", k.name()), Tensor::from_vec(b.len(), 1, b.clone()))
        });
        let rotations = EdgeType::ALL.map(|t| {
            store.add(alloc::format!("rotation.{}", t.name()), Tensor::vector(pre.rotations[t.index()].angles.clone()))
        });
        PretrainParams { tables, biases, rotations }
    }

    pub fn extract(&self, store: &ParamStore) -> Pretrained {
        let tables = EntityKind::ALL.map(|kind| EntityTable {
            kind,
            vectors: store.get(self.tables[kind.index()]).clone(),
            biases: store.get(self.biases[kind.index()]).data.clone(),
        });
        let rotations =
            EdgeType::ALL.map(|t| RotationParams { angles: store.get(self.rotations[t.index()]).data.clone() });
        Pretrained { tables: EntityTables { tables }, rotations }
    }

    /// Scores for `(src, dst)` index pairs of type `t`, `N x 1`.
    pub fn record_scores(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        t: EdgeType,
        src: &[usize],
        dst: &[usize],
    ) -> Result<NodeId> {
        let (sk, tk) = (t.source().index(), t.target().index());
        let st = tape.param(store, self.tables[sk]);
        let s = tape.gather(st, src)?;
        let s = tape.exp_o(s);
        let angles = tape.param(store, self.rotations[t.index()]);
        let s = tape.rotate(s, angles)?;
        let dt = tape.param(store, self.tables[tk]);
        let d = tape.gather(dt, dst)?;
        let d = tape.exp_o(d);
        let d2 = tape.sq_dist_rows(s, d)?;
        let d2 = tape.relu(d2);
        let neg = tape.scale(d2, -1.0);
        let sb = tape.param(store, self.biases[sk]);
        let sb = tape.gather(sb, src)?;
        let db = tape.param(store, self.biases[tk]);
        let db = tape.gather(db, dst)?;
        let b = tape.add(sb, db)?;
        tape.add(neg, b)
    }

    /// Weighted contrastive loss over `edges` of type `t`; `negatives` holds
    /// `k` targets per edge, edge-major.
    #[allow(clippy::too_many_arguments)]
    pub fn record_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        t: EdgeType,
        src: &[usize],
        dst: &[usize],
        weights: &[f64],
        negatives: &[usize],
    ) -> Result<NodeId> {
        let k = negatives.len() / src.len().max(1);
        let pos = self.record_scores(tape, store, t, src, dst)?;
        let w = tape.constant(Tensor::from_vec(weights.len(), 1, weights.to_vec()));
        let lp = tape.log_sigmoid(pos);
        let lp = tape.mul(lp, w)?;
        let rep_src: Vec<usize> = src.iter().flat_map(|&s| core::iter::repeat_n(s, k)).collect();
        let rep_w: Vec<f64> = weights.iter().flat_map(|&x| core::iter::repeat_n(x, k)).collect();
        let neg = self.record_scores(tape, store, t, &rep_src, negatives)?;
        let neg = tape.scale(neg, -1.0);
        let ln = tape.log_sigmoid(neg);
        let wn = tape.constant(Tensor::from_vec(rep_w.len(), 1, rep_w));
        let ln = tape.mul(ln, wn)?;
        let a = tape.sum(lp);
        let b = tape.sum(ln);
        let s = tape.add(a, b)?;
        Ok(tape.scale(s, -1.0))
    }
}

/// Negative targets for every edge of a set, edge-major.
fn draw_negatives(set: &EdgeSet, idx: &[usize], n_targets: usize, k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(idx.len() * k);
    for &e in idx {
        out.extend(sample_negatives(n_targets, set.pairs[e].1, k, rng)?);
    }
    Ok(out)
}

/// Contrastive loss of the whole graph under `pre`, negatives from `rng`.
pub fn contrastive_loss(edges: &EdgeSets, pre: &Pretrained, negatives: usize, rng: &mut Rng) -> Result<f64> {
    let mut store = ParamStore::new();
    let ids = PretrainParams::register(&mut store, pre);
    let mut tape = Tape::new();
    let mut total = 0.0;
    for t in EdgeType::ALL {
        let set = edges.get(t);
        if set.is_empty() {
            continue;
        }
        let idx: Vec<usize> = (0..set.len()).collect();
        let n_targets = pre.tables.get(t.target()).len();
        let neg = draw_negatives(set, &idx, n_targets, negatives, rng)?;
        let src: Vec<usize> = set.pairs.iter().map(|p| p.0).collect();
        let dst: Vec<usize> = set.pairs.iter().map(|p| p.1).collect();
        let w: Vec<f64> = set.multiplicity.iter().map(|&m| m as f64).collect();
        let l = ids.record_loss(&mut tape, &store, t, &src, &dst, &w, &neg)?;
        total += tape.scalar(l);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub pretrained: Pretrained,
    /// Weighted mean loss per edge for each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Fresh tables and identity rotations.
pub fn initial_pretrained(counts: [usize; 4], dim: usize, std: f64, seed: u64) -> Pretrained {
    let tables = EntityTables::random(counts, dim, std, &mut rng::stream(seed, rng::tags::INIT, 0));
    Pretrained { tables, rotations: EdgeType::ALL.map(|_| RotationParams::identity(dim)) }
}

/// Minimises the contrastive loss with Adam over shuffled edge batches.
pub fn pretrain(
    edges: &EdgeSets,
    counts: [usize; 4],
    dim: usize,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainReport> {
    if cfg.batch_size == 0 || cfg.negatives == 0 {
        return Err(Error::Config("pretraining needs batch_size >= 1 and negatives >= 1".into()));
    }
    for t in EdgeType::ALL {
        let set = edges.get(t);
        if set.is_empty() {
            continue;
        }
        let (ns, nt) = (counts[t.source().index()], counts[t.target().index()]);
        if nt < 2 {
            return Err(Error::Config(alloc::format!("edge type {} has a single target entity", t.name())));
        }
        if let Some(&(s, d)) = set.pairs.iter().find(|(s, d)| *s >= ns || *d >= nt) {
            return Err(Error::Lookup { kind: t.name(), index: s.max(d) });
        }
    }
    let init = initial_pretrained(counts, dim, cfg.init_std, seed);
    let mut store = ParamStore::new();
    let ids = PretrainParams::register(&mut store, &init);
    let adam = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut state = AdamState::new(&store);
    let all: Vec<(EdgeType, usize)> =
        EdgeType::ALL.iter().flat_map(|&t| (0..edges.get(t).len()).map(move |i| (t, i))).collect();
    let total_weight: f64 = edges.sets.iter().flat_map(|s| s.multiplicity.iter()).map(|&m| m as f64).sum();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order = all.clone();
        order.shuffle(&mut rng::stream(seed, rng::tags::PRETRAIN_SHUFFLE, epoch as u64));
        let mut neg_rng = rng::stream(seed, rng::tags::NEGATIVES, epoch as u64);
        let mut epoch_loss = 0.0;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let mut parts = Vec::new();
            for t in EdgeType::ALL {
                let idx: Vec<usize> = chunk.iter().filter(|(et, _)| *et == t).map(|(_, i)| *i).collect();
                if idx.is_empty() {
                    continue;
                }
                let set = edges.get(t);
                let src: Vec<usize> = idx.iter().map(|&i| set.pairs[i].0).collect();
                let dst: Vec<usize> = idx.iter().map(|&i| set.pairs[i].1).collect();
                let w: Vec<f64> = idx.iter().map(|&i| set.multiplicity[i] as f64).collect();
                let neg = draw_negatives(set, &idx, counts[t.target().index()], cfg.negatives, &mut neg_rng)?;
                parts.push(ids.record_loss(&mut tape, &store, t, &src, &dst, &w, &neg)?);
            }
            let mut loss = parts[0];
            for &p in &parts[1..] {
                loss = tape.add(loss, p)?;
            }
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, batch, what: "pretraining loss".into() });
            }
            epoch_loss += value;
            let grads = tape.param_grads(loss, store.len())?;
            adam_step(&mut store, &grads, &adam, &mut state)?;
        }
        epoch_losses.push(if total_weight > 0.0 { epoch_loss / total_weight } else { 0.0 });
    }
    Ok(PretrainReport { pretrained: ids.extract(&store), epoch_losses })
}

/// Weights of the four tangent terms in the semantic vector.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct FusionWeights {
    pub user: f64,
    pub poi: f64,
    pub category: f64,
    pub region: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        FusionWeights { user: 0.5, poi: 0.3, category: 0.1, region: 0.1 }
    }
}

impl FusionWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.user, self.poi, self.category, self.region]
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("fusion weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Per-step `sum_k w_k log_o(E_k)` over user, POI, category and region.
pub fn fuse_semantics(traj: &Trajectory, tables: &EntityTables, w: &FusionWeights) -> Result<Vec<TangentVector>> {
    let weights = w.as_array();
    let n = tables.dim();
    traj.steps
        .iter()
        .map(|s| {
            let idx = [traj.user, s.poi, s.category, s.region];
            let mut v = vec![0.0; n];
            for k in EntityKind::ALL {
                let t = log_o(&tables.get(k).point(idx[k.index()])?)?;
                v.iter_mut().zip(&t.spatial).for_each(|(a, b)| *a += weights[k.index()] * b);
            }
            Ok(TangentVector::new(v))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Step;

    fn step(poi: usize, category: usize, region: usize, hour: i64) -> Step {
        Step { poi, category, region, timestamp: hour * SECONDS_PER_HOUR, tz_offset_min: 0 }
    }

    #[test]
    fn edges_from_two_visits() {
        let t = Trajectory { user: 0, steps: vec![step(0, 1, 2, 10), step(1, 0, 2, 12)] };
        let e = build_edges(core::slice::from_ref(&t), 6.0).unwrap();
        assert_eq!(e.get(EdgeType::UserPoi).pairs, vec![(0, 0), (0, 1)]);
        assert_eq!(e.get(EdgeType::PoiPoi).pairs, vec![(0, 1)]);
        assert_eq!(e.get(EdgeType::CategoryCategory).pairs, vec![(1, 0)]);
        assert_eq!(e.get(EdgeType::RegionRegion).pairs, vec![(2, 2)]);
        let far = Trajectory { user: 0, steps: vec![step(0, 1, 2, 10), step(1, 0, 2, 17)] };
        assert!(build_edges(&[far], 6.0).unwrap().get(EdgeType::PoiPoi).is_empty());
        assert_eq!(build_edges(&[], 6.0).unwrap().total(), 0);
        let bad = Trajectory { user: 0, steps: vec![step(0, 0, 0, 5), step(1, 0, 0, 4)] };
        assert!(matches!(build_edges(&[bad], 6.0), Err(Error::Ordering(1))));
    }

    #[test]
    fn repeated_pairs_accumulate() {
        let t =
            Trajectory { user: 3, steps: vec![step(0, 0, 0, 0), step(1, 0, 0, 1), step(0, 0, 0, 2), step(1, 0, 0, 3)] };
        let e = build_edges(&[t], 6.0).unwrap();
        let pp = e.get(EdgeType::PoiPoi);
        assert_eq!(pp.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(pp.multiplicity, vec![2, 1]);
        assert_eq!(e.get(EdgeType::UserPoi).multiplicity, vec![2, 2]);
    }

    #[test]
    fn score_edge_examples() {
        let o = LorentzPoint::origin(2);
        let id = RotationParams::identity(2);
        assert_eq!(score_edge(&o, &o, &id, 0.0, 0.0).unwrap(), 0.0);
        assert_eq!(score_edge(&o, &o, &id, 1.0, 2.0).unwrap(), 3.0);
        let p = exp_o(&TangentVector::new(vec![1.0, 0.0])).unwrap();
        let want = -2.0 * (fm::cosh(1.0) - 1.0);
        assert!((score_edge(&p, &o, &id, 0.0, 0.0).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn edge_loss_examples() {
        assert!((edge_loss(&[0.0], &[0.0]) - 2.0 * core::f64::consts::LN_2).abs() < 1e-15);
        assert!(edge_loss(&[50.0], &[-50.0]) < 1e-20);
    }

    #[test]
    fn negatives_skip_the_target() {
        let mut r = rng::stream(1, 2, 3);
        let n = sample_negatives(3, 1, 500, &mut r).unwrap();
        assert!(n.iter().all(|&j| j != 1 && j < 3));
        assert!(n.contains(&0) && n.contains(&2));
        assert!(sample_negatives(1, 0, 1, &mut r).is_err());
    }

    #[test]
    fn fusion_selects_and_vanishes() {
        let mut tables = EntityTables::random([1, 2, 1, 1], 3, 0.5, &mut rng::stream(0, 0, 0));
        let t = Trajectory { user: 0, steps: vec![step(1, 0, 0, 0)] };
        let only_poi = FusionWeights { user: 0.0, poi: 1.0, category: 0.0, region: 0.0 };
        let v = fuse_semantics(&t, &tables, &only_poi).unwrap();
        for (a, b) in v[0].spatial.iter().zip(tables.get(EntityKind::Poi).vectors.row(1)) {
            assert!((a - b).abs() < 1e-12);
        }
        for tab in tables.tables.iter_mut() {
            tab.vectors.data.iter_mut().for_each(|x| *x = 0.0);
        }
        let z = fuse_semantics(&t, &tables, &FusionWeights::default()).unwrap();
        assert!(z[0].spatial.iter().all(|x| *x == 0.0));
        let bad = Trajectory { user: 5, steps: vec![step(0, 0, 0, 0)] };
        assert!(fuse_semantics(&bad, &tables, &FusionWeights::default()).is_err());
    }

    #[test]
    fn zero_epochs_returns_initialisation() {
        let t = Trajectory { user: 0, steps: vec![step(0, 0, 0, 0), step(1, 1, 1, 1), step(2, 0, 1, 2)] };
        let e = build_edges(&[t], 6.0).unwrap();
        let cfg = PretrainConfig { epochs: 0, ..PretrainConfig::default() };
        let r = pretrain(&e, [1, 3, 2, 2], 4, &cfg, 9).unwrap();
        assert_eq!(r.pretrained, initial_pretrained([1, 3, 2, 2], 4, cfg.init_std, 9));
    }
}
