//! The full recommender: semantic fusion, spatio-temporal context,
//! cross-manifold attention, stacked selective layers and the dual head.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{feature_time, Trajectory};
use crate::embeddings::{EntityKind, EntityTables, FusionWeights};
use crate::error::{Error, Result};
use crate::manifold::Geometry;
use crate::params::{normal_tensor, ParamId, ParamStore};
use crate::predictor::Head;
use crate::rng;
use crate::ssm::{record_stack, SsmLayer};
use crate::stchannel::{CrossAttention, GeoConfig, GeoEncoder, GeoState, TimeEncoder, TimeState};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ModelConfig {
    pub dim: usize,
    pub d_geo: usize,
    pub d_time: usize,
    pub heads: usize,
    pub layers: usize,
    pub geo: GeoConfig,
    pub time_freqs: usize,
    pub max_gap_hours: f64,
    pub fusion: FusionWeights,
    /// Calendar features from local time instead of UTC.
    pub local_time: bool,
    /// Weights of the POI, category and region losses.
    pub loss_weights: [f64; 3],
    /// Standard deviation of fresh entity tangent vectors.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            d_geo: 16,
            d_time: 24,
            heads: 4,
            layers: 2,
            geo: GeoConfig::default(),
            time_freqs: 8,
            max_gap_hours: 168.0,
            fusion: FusionWeights::default(),
            local_time: false,
            loss_weights: [1.0; 3],
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("d_geo", self.d_geo),
            ("d_time", self.d_time),
            ("heads", self.heads),
            ("layers", self.layers),
            ("time_freqs", self.time_freqs),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(alloc::format!("{name} must be positive")));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(alloc::format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        if !(self.max_gap_hours > 0.0) {
            return Err(Error::Config("max_gap_hours must be positive".into()));
        }
        if self.loss_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if !(self.init_std >= 0.0) {
            return Err(Error::Config("init_std must be nonnegative".into()));
        }
        self.fusion.validate()
    }

    pub fn ctx_dim(&self) -> usize {
        self.d_geo + self.d_time
    }
}

/// Components that can be switched off for ablation runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct Ablations {
    /// Bypass the selective layers.
    pub no_ssm: bool,
    /// Ignore pretrained tables and start from random ones.
    pub no_pretrain: bool,
    /// Run everything in Euclidean space.
    pub no_hyperbolic: bool,
    /// Zero spatio-temporal context and a constant 0.5 gate.
    pub no_stc: bool,
    /// Skip attention; the layers see the semantic points directly.
    pub no_attention: bool,
    /// Zero context and unit gate inside the selective layers only.
    pub no_context: bool,
}

impl Ablations {
    pub const NAMES: [&'static str; 6] =
        ["no_ssm", "no_pretrain", "no_hyperbolic", "no_stc", "no_attention", "no_context"];

    pub fn enable(&mut self, name: &str) -> Result<()> {
        let flag = match name {
            "no_ssm" => &mut self.no_ssm,
            "no_pretrain" => &mut self.no_pretrain,
            "no_hyperbolic" => &mut self.no_hyperbolic,
            "no_stc" => &mut self.no_stc,
            "no_attention" => &mut self.no_attention,
            "no_context" => &mut self.no_context,
            _ => {
                return Err(Error::Config(alloc::format!(
                    "unknown ablation `{name}` (expected one of {})",
                    Self::NAMES.join(", ")
                )))
            }
        };
        *flag = true;
        Ok(())
    }

    fn flags(&self) -> [bool; 6] {
        [self.no_ssm, self.no_pretrain, self.no_hyperbolic, self.no_stc, self.no_attention, self.no_context]
    }

    /// `full`, or the enabled names joined by `+`.
    pub fn label(&self) -> String {
        let on: Vec<&str> = Self::NAMES.iter().zip(self.flags()).filter(|(_, f)| *f).map(|(n, _)| *n).collect();
        if on.is_empty() {
            "full".into()
        } else {
            on.join("+")
        }
    }

    pub fn geometry(&self) -> Geometry {
        if self.no_hyperbolic {
            Geometry::Euclidean
        } else {
            Geometry::Lorentz
        }
    }
}

/// Everything a forward pass needs besides the trajectory.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GtrModel {
    pub config: ModelConfig,
    pub ablations: Ablations,
    pub store: ParamStore,
    /// Entity tangent tables, indexed by `EntityKind::index`.
    pub tables: [ParamId; 4],
    pub poi_coords: Vec<(f64, f64)>,
    pub geo_state: GeoState,
    pub time_state: TimeState,
    pub geo: GeoEncoder,
    pub time: TimeEncoder,
    pub attention: CrossAttention,
    pub layers: Vec<SsmLayer>,
    pub head: Head,
}

/// Recorded nodes of one trajectory.
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    /// `L x d` trajectory points (spatial part).
    pub out: NodeId,
    /// `L x d` step sizes per layer.
    pub step_sizes: Vec<NodeId>,
    /// `L x 1` decay gates.
    pub gamma: NodeId,
}

impl GtrModel {
    /// Builds a model. `counts` are user/POI/category/region sizes,
    /// `anchor_points` the unit vectors the RBF anchors are fitted on, and
    /// `init` optional pretrained tables.
    pub fn new(
        config: ModelConfig,
        ablations: Ablations,
        counts: [usize; 4],
        poi_coords: Vec<(f64, f64)>,
        anchor_points: &[[f64; 3]],
        init: Option<&EntityTables>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if poi_coords.len() != counts[EntityKind::Poi.index()] {
            return Err(Error::Dimension { expected: counts[1], got: poi_coords.len() });
        }
        if counts.contains(&0) {
            return Err(Error::Data("every entity kind needs at least one member".into()));
        }
        let d = config.dim;
        let mut store = ParamStore::new();
        let mut table_rng = rng::stream(seed, rng::tags::INIT, 0);
        let tables = EntityKind::ALL.map(|k| {
            let value = match init {
                Some(t) if !ablations.no_pretrain => t.get(k).vectors.clone(),
                _ => normal_tensor(counts[k.index()], d, config.init_std, &mut table_rng),
            };
            store.add(alloc::format!("table.{}", k.name()), value)
        });
        if let Some(t) = init.filter(|_| !ablations.no_pretrain) {
            if t.counts() != counts || t.dim() != d {
                return Err(Error::Config("pretrained tables do not match the vocabulary or dimension".into()));
            }
        }
        let mut rng = rng::stream(seed, rng::tags::INIT, 1);
        let geo_state = GeoState::fit(anchor_points, &config.geo, seed)?;
        let time_state = TimeState::new(config.time_freqs, config.max_gap_hours)?;
        let geo = GeoEncoder::new(&mut store, &geo_state, config.d_geo, &mut rng);
        let time = TimeEncoder::new(&mut store, &time_state, config.d_time, &mut rng);
        let attention = CrossAttention::new(&mut store, d, config.ctx_dim(), config.heads, &mut rng)?;
        let layers = (0..config.layers)
            .map(|i| SsmLayer::new(&mut store, &alloc::format!("ssm{i}"), d, config.ctx_dim(), &mut rng))
            .collect();
        let head = Head::new(&mut store, d, [counts[1], counts[2], counts[3]], &mut rng);
        Ok(GtrModel {
            config,
            ablations,
            store,
            tables,
            poi_coords,
            geo_state,
            time_state,
            geo,
            time,
            attention,
            layers,
            head,
        })
    }

    pub fn counts(&self) -> [usize; 4] {
        self.tables.map(|t| self.store.get(t).rows)
    }

    pub fn geometry(&self) -> Geometry {
        self.ablations.geometry()
    }

    /// Current entity tables with zero biases.
    pub fn entity_tables(&self) -> EntityTables {
        let tables = EntityKind::ALL.map(|kind| {
            let vectors = self.store.get(self.tables[kind.index()]).clone();
            crate::embeddings::EntityTable { kind, biases: vec![0.0; vectors.rows], vectors }
        });
        EntityTables { tables }
    }

    fn check_indices(&self, traj: &Trajectory) -> Result<()> {
        let c = self.counts();
        if traj.user >= c[0] {
            return Err(Error::Lookup { kind: "user", index: traj.user });
        }
        for s in &traj.steps {
            for (k, i) in [(1, s.poi), (2, s.category), (3, s.region)] {
                if i >= c[k] {
                    return Err(Error::Lookup { kind: EntityKind::ALL[k].name(), index: i });
                }
            }
        }
        Ok(())
    }

    /// Semantic tangent rows `sum_k w_k v_k`. Tables hold tangent vectors, so
    /// `log_o(exp_o(v)) = v` is taken directly.
    fn record_semantics(&self, tape: &mut Tape, traj: &Trajectory) -> Result<NodeId> {
        let w = self.config.fusion.as_array();
        let n = traj.len();
        let idx: [Vec<usize>; 4] = [
            vec![traj.user; n],
            traj.steps.iter().map(|s| s.poi).collect(),
            traj.steps.iter().map(|s| s.category).collect(),
            traj.steps.iter().map(|s| s.region).collect(),
        ];
        let mut acc: Option<NodeId> = None;
        for k in 0..4 {
            let t = tape.param(&self.store, self.tables[k]);
            let rows = tape.gather(t, &idx[k])?;
            let term = tape.scale(rows, w[k]);
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
        acc.ok_or(Error::State("no entity tables"))
    }

    /// `(context, gamma)` from the spatio-temporal channel.
    fn record_context(&self, tape: &mut Tape, traj: &Trajectory) -> Result<(NodeId, NodeId)> {
        let n = traj.len();
        if self.ablations.no_stc {
            let ctx = tape.constant(Tensor::zeros(n, self.config.ctx_dim()));
            let gamma = tape.constant(Tensor::from_vec(n, 1, vec![0.5; n]));
            return Ok((ctx, gamma));
        }
        let mut fourier = Tensor::zeros(n, self.geo_state.n_fourier());
        let mut rbf = Tensor::zeros(n, self.geo_state.n_anchors());
        for (i, s) in traj.steps.iter().enumerate() {
            let (lat, lon) = self.poi_coords[s.poi];
            let (f, r) = self.geo_state.raw_features(lat, lon)?;
            fourier.row_mut(i).copy_from_slice(&f);
            rbf.row_mut(i).copy_from_slice(&r);
        }
        let utc: Vec<i64> = traj.steps.iter().map(|s| s.timestamp).collect();
        let cal: Vec<i64> = traj.steps.iter().map(|s| feature_time(s, self.config.local_time)).collect();
        let feats = self.time_state.features(&utc, &cal)?;
        let f = tape.constant(fourier);
        let r = tape.constant(rbf);
        let geo = self.geo.record(tape, &self.store, f, r, None)?;
        let tf = tape.constant(feats);
        let (et, gamma) = self.time.record(tape, &self.store, tf)?;
        let ctx = tape.concat_cols(geo, et)?;
        Ok((ctx, gamma))
    }

    /// Forward pass over every step of `traj`.
    pub fn record(&self, tape: &mut Tape, traj: &Trajectory) -> Result<ForwardNodes> {
        if traj.is_empty() {
            return Err(Error::Input("empty trajectory".into()));
        }
        self.check_indices(traj)?;
        let g = self.geometry();
        let sem = self.record_semantics(tape, traj)?;
        let (ctx, gamma) = self.record_context(tape, traj)?;
        let q = if self.ablations.no_attention {
            g.exp_o(tape, sem)
        } else {
            self.attention.record(tape, &self.store, g, sem, ctx)?
        };
        if self.ablations.no_ssm {
            return Ok(ForwardNodes { out: q, step_sizes: Vec::new(), gamma });
        }
        let (ssm_ctx, ssm_gamma) = if self.ablations.no_context {
            let n = traj.len();
            (
                tape.constant(Tensor::zeros(n, self.config.ctx_dim())),
                tape.constant(Tensor::from_vec(n, 1, vec![1.0; n])),
            )
        } else {
            (ctx, gamma)
        };
        let (out, nodes) = record_stack(&self.layers, tape, &self.store, g, q, ssm_ctx, ssm_gamma)?;
        Ok(ForwardNodes { out, step_sizes: nodes.iter().map(|n| n.dt).collect(), gamma })
    }

    /// Candidate points for POI, category and region.
    pub fn record_candidates(&self, tape: &mut Tape) -> [NodeId; 3] {
        let g = self.geometry();
        [1, 2, 3].map(|k| {
            let t = tape.param(&self.store, self.tables[k]);
            g.exp_o(tape, t)
        })
    }

    /// Mixed score matrices for the rows of `e`.
    pub fn record_scores(&self, tape: &mut Tape, e: NodeId, cands: &[NodeId; 3]) -> Result<[NodeId; 3]> {
        let g = self.geometry();
        let p = self.head.record(tape, &self.store, g, e, cands[0], 0)?;
        let c = self.head.record(tape, &self.store, g, e, cands[1], 1)?;
        let r = self.head.record(tape, &self.store, g, e, cands[2], 2)?;
        Ok([p, c, r])
    }

    /// Teacher-forced loss: step `t` predicts step `t+1`. Returns the mean
    /// weighted loss per prediction and the number of predictions.
    pub fn record_loss(&self, tape: &mut Tape, batch: &[&Trajectory]) -> Result<(NodeId, usize)> {
        let cands = self.record_candidates(tape);
        let mut total: Option<NodeId> = None;
        let mut n_pred = 0;
        for traj in batch {
            if traj.len() < 2 {
                continue;
            }
            let fwd = self.record(tape, traj)?;
            let rows: Vec<usize> = (0..traj.len() - 1).collect();
            let e = tape.gather(fwd.out, &rows)?;
            let scores = self.record_scores(tape, e, &cands)?;
            let next = &traj.steps[1..];
            let labels: [Vec<usize>; 3] = [
                next.iter().map(|s| s.poi).collect(),
                next.iter().map(|s| s.category).collect(),
                next.iter().map(|s| s.region).collect(),
            ];
            for k in 0..3 {
                let ce = tape.softmax_ce(scores[k], &labels[k])?;
                let ce = tape.scale(ce, self.config.loss_weights[k]);
                total = Some(match total {
                    Some(t) => tape.add(t, ce)?,
                    None => ce,
                });
            }
            n_pred += rows.len();
        }
        let total = total.ok_or_else(|| Error::Data("batch has no trajectory with two or more steps".into()))?;
        Ok((tape.scale(total, 1.0 / n_pred as f64), n_pred))
    }

    /// Scores for the item following each trajectory's last step.
    pub fn score_next(&self, batch: &[&Trajectory]) -> Result<Vec<[Vec<f64>; 3]>> {
        let mut tape = Tape::new();
        let cands = self.record_candidates(&mut tape);
        let mut out = Vec::with_capacity(batch.len());
        for traj in batch {
            let fwd = self.record(&mut tape, traj)?;
            let e = tape.gather(fwd.out, &[traj.len() - 1])?;
            let s = self.record_scores(&mut tape, e, &cands)?;
            out.push(s.map(|n| tape.value(n).data.clone()));
        }
        Ok(out)
    }

    /// Step sizes averaged over layers and channels, one per step.
    pub fn mean_step_sizes(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let fwd = self.record(&mut tape, traj)?;
        if fwd.step_sizes.is_empty() {
            return Ok(Vec::new());
        }
        let mut acc = vec![0.0; traj.len()];
        let mut count = 0usize;
        for &n in &fwd.step_sizes {
            let t = tape.value(n);
            for (i, a) in acc.iter_mut().enumerate() {
                *a += t.row(i).iter().sum::<f64>();
            }
            count += t.cols;
        }
        Ok(acc.into_iter().map(|a| a / count as f64).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Step;

    fn toy(ablations: Ablations) -> (GtrModel, Trajectory) {
        let cfg = ModelConfig {
            dim: 4,
            d_geo: 4,
            d_time: 4,
            heads: 2,
            layers: 2,
            geo: GeoConfig { anchors: 3, top_k: 2, ..GeoConfig::default() },
            time_freqs: 2,
            ..ModelConfig::default()
        };
        let coords = vec![(40.70, -74.0), (40.72, -73.99), (40.75, -73.95)];
        let pts: Vec<[f64; 3]> = coords.iter().map(|(a, b)| crate::data::unit_vector(*a, *b)).collect();
        let m = GtrModel::new(cfg, ablations, [1, 3, 2, 2], coords, &pts, None, 5).unwrap();
        let steps = (0..4)
            .map(|i| Step {
                poi: i % 3,
                category: i % 2,
                region: (i / 2) % 2,
                timestamp: 1000 + 3600 * i as i64,
                tz_offset_min: 0,
            })
            .collect();
        (m, Trajectory { user: 0, steps })
    }

    #[test]
    fn loss_is_finite_for_every_ablation() {
        for name in Ablations::NAMES {
            let mut a = Ablations::default();
            a.enable(name).unwrap();
            let (m, t) = toy(a);
            let mut tape = Tape::new();
            let (loss, n) = m.record_loss(&mut tape, &[&t]).unwrap();
            assert_eq!(n, 3);
            assert!(tape.scalar(loss).is_finite(), "{name}");
        }
        assert!(Ablations::default().enable("nope").is_err());
    }

    #[test]
    fn labels_and_flags() {
        let mut a = Ablations::default();
        assert_eq!(a.label(), "full");
        a.enable("no_stc").unwrap();
        a.enable("no_ssm").unwrap();
        assert_eq!(a.label(), "no_ssm+no_stc");
    }

    #[test]
    fn outputs_lie_on_manifold_and_are_causal() {
        let (m, t) = toy(Ablations::default());
        let mut tape = Tape::new();
        let full = m.record(&mut tape, &t).unwrap();
        let mut short = t.clone();
        short.steps.truncate(2);
        let part = m.record(&mut tape, &short).unwrap();
        for i in 0..2 {
            assert_eq!(tape.value(full.out).row(i), tape.value(part.out).row(i));
        }
        assert_eq!(m.mean_step_sizes(&t).unwrap().len(), 4);
    }

    #[test]
    fn bad_index_is_a_lookup_error() {
        let (m, mut t) = toy(Ablations::default());
        t.steps[1].poi = 9;
        assert!(matches!(m.record(&mut Tape::new(), &t), Err(Error::Lookup { .. })));
    }
}
