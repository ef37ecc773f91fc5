//! Euclidean spatio-temporal context: geographic kernel features, temporal
//! features with a decay gate, and the attention that fuses them with the
//! semantic tangent vectors.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::{calendar, unit_vector};
use crate::error::{Error, Result};
use crate::fm;
use crate::kmeans::kmeans;
use crate::manifold::{Geometry, LorentzPoint, TangentVector};
use crate::params::{normal_tensor, Linear, ParamId, ParamStore};
use crate::rng::{self, Rng};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const HOURS_PER_WEEK: f64 = 168.0;

/// Unit vector for validated latitude/longitude in degrees.
pub fn sphere_map(lat: f64, lon: f64) -> Result<[f64; 3]> {
    if !(-90.0..=90.0).contains(&lat) {
        return Err(Error::Input(alloc::format!("latitude {lat} out of range")));
    }
    if !(-180.0..=180.0).contains(&lon) {
        return Err(Error::Input(alloc::format!("longitude {lon} out of range")));
    }
    Ok(unit_vector(lat, lon))
}

/// Longitude folded into `[-180, 180)`.
pub fn wrap_longitude(lon: f64) -> f64 {
    let w = fm::rem_euclid(lon + 180.0, 360.0) - 180.0;
    if w.is_finite() {
        w
    } else {
        lon
    }
}

/// Great-circle angle between unit vectors.
pub fn arc_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let cross = [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
    fm::atan2(fm::sqrt(fm::norm_sq(&cross)), fm::dot(a, b))
}

/// Fixed geographic encoder state: Fourier frequencies and RBF anchors.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GeoState {
    /// `3 x (scales * per_scale)`; column block `s` has std `scales[s]`.
    pub freqs: Tensor,
    /// `r x 3` unit vectors.
    pub anchors: Tensor,
    /// Kernel width in radians.
    pub sigma: f64,
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct GeoConfig {
    pub scales: Vec<f64>,
    pub per_scale: usize,
    pub anchors: usize,
    pub top_k: usize,
    pub kmeans_iters: usize,
}

impl Default for GeoConfig {
    fn default() -> Self {
        GeoConfig { scales: vec![1.0, 4.0, 16.0, 64.0], per_scale: 8, anchors: 50, top_k: 8, kmeans_iters: 100 }
    }
}

impl GeoState {
    /// Samples frequencies and fits anchors by k-means on `points` (unit
    /// vectors). The anchor count is capped at the number of distinct points.
    pub fn fit(points: &[[f64; 3]], cfg: &GeoConfig, seed: u64) -> Result<Self> {
        if cfg.scales.is_empty() || cfg.per_scale == 0 {
            return Err(Error::Config("geographic encoder needs at least one frequency".into()));
        }
        if cfg.anchors == 0 || cfg.top_k == 0 {
            return Err(Error::Config("geographic encoder needs anchors and top_k >= 1".into()));
        }
        let mut distinct: Vec<[f64; 3]> = points.to_vec();
        distinct.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
        distinct.dedup();
        if distinct.is_empty() {
            return Err(Error::Data("no coordinates to place anchors".into()));
        }
        let r = cfg.anchors.min(distinct.len());
        let pts: Vec<Vec<f64>> = points.iter().map(|p| p.to_vec()).collect();
        let km = kmeans(&pts, r, cfg.kmeans_iters, &mut rng::stream(seed, rng::tags::KMEANS, 1))?;
        let mut anchors = Tensor::zeros(r, 3);
        for (i, c) in km.centroids.iter().enumerate() {
            let n = fm::sqrt(fm::norm_sq(c));
            let row = anchors.row_mut(i);
            if n > 0.0 {
                row.iter_mut().zip(c).for_each(|(a, b)| *a = b / n);
            } else {
                row[0] = 1.0;
            }
        }
        let freqs = Self::sample_freqs(&cfg.scales, cfg.per_scale, &mut rng::stream(seed, rng::tags::FOURIER, 0));
        let sigma = median_arc(&anchors);
        Ok(GeoState { freqs, anchors, sigma, top_k: cfg.top_k.min(r) })
    }

    pub fn sample_freqs(scales: &[f64], per_scale: usize, rng: &mut Rng) -> Tensor {
        let mut freqs = Tensor::zeros(3, scales.len() * per_scale);
        for (s, &std) in scales.iter().enumerate() {
            let block = normal_tensor(3, per_scale, std, rng);
            for i in 0..3 {
                for j in 0..per_scale {
                    freqs.set(i, s * per_scale + j, block.get(i, j));
                }
            }
        }
        freqs
    }

    pub fn n_fourier(&self) -> usize {
        2 * self.freqs.cols
    }

    pub fn n_anchors(&self) -> usize {
        self.anchors.rows
    }

    fn anchor(&self, j: usize) -> [f64; 3] {
        let r = self.anchors.row(j);
        [r[0], r[1], r[2]]
    }

    /// `[cos(W^T u); sin(W^T u)]`.
    pub fn fourier_features(&self, u: &[f64; 3]) -> Vec<f64> {
        let m = self.freqs.cols;
        let mut out = vec![0.0; 2 * m];
        for j in 0..m {
            let phase = (0..3).map(|i| self.freqs.get(i, j) * u[i]).sum::<f64>();
            out[j] = fm::cos(phase);
            out[m + j] = fm::sin(phase);
        }
        out
    }

    /// Gaussian responses `exp(-(arc/sigma)^2)` to every anchor.
    pub fn dense_rbf(&self, u: &[f64; 3]) -> Vec<f64> {
        (0..self.n_anchors())
            .map(|j| {
                let z = arc_distance(u, &self.anchor(j)) / self.sigma;
                fm::exp(-z * z)
            })
            .collect()
    }

    /// Dense responses with all but the `top_k` largest zeroed; ties keep the
    /// lower anchor index.
    pub fn rbf_features(&self, u: &[f64; 3]) -> Vec<f64> {
        let dense = self.dense_rbf(u);
        keep_top_k(&dense, self.top_k)
    }

    /// Raw geographic inputs for one coordinate pair; longitude is wrapped.
    pub fn raw_features(&self, lat: f64, lon: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let u = sphere_map(lat, wrap_longitude(lon))?;
        Ok((self.fourier_features(&u), self.rbf_features(&u)))
    }
}

pub fn keep_top_k(x: &[f64], k: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[b].partial_cmp(&x[a]).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut out = vec![0.0; x.len()];
    for &i in order.iter().take(k) {
        out[i] = x[i];
    }
    out
}

/// Median pairwise arc distance between anchors; 1 when undefined.
fn median_arc(anchors: &Tensor) -> f64 {
    let r = anchors.rows;
    let mut d = Vec::with_capacity(r * r.saturating_sub(1) / 2);
    for i in 0..r {
        for j in i + 1..r {
            let a = [anchors.get(i, 0), anchors.get(i, 1), anchors.get(i, 2)];
            let b = [anchors.get(j, 0), anchors.get(j, 1), anchors.get(j, 2)];
            d.push(arc_distance(&a, &b));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    let m = if d.len() % 2 == 1 { d[d.len() / 2] } else { 0.5 * (d[d.len() / 2 - 1] + d[d.len() / 2]) };
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Learned part of the geographic encoder.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GeoEncoder {
    pub rff_proj: Linear,
    pub rbf_proj: Linear,
    pub gate: Linear,
    pub out: Linear,
}

impl GeoEncoder {
    pub fn new(store: &mut ParamStore, state: &GeoState, d_geo: usize, rng: &mut Rng) -> Self {
        GeoEncoder {
            rff_proj: Linear::new(store, "geo.rff_proj", state.n_fourier(), d_geo, true, rng),
            rbf_proj: Linear::new(store, "geo.rbf_proj", state.n_anchors(), d_geo, true, rng),
            gate: Linear::new(store, "geo.gate", 2 * d_geo, 2, true, rng),
            out: Linear::new(store, "geo.out", d_geo, d_geo, true, rng),
        }
    }

    /// `L x d_geo` features from raw Fourier (`L x 2m`) and RBF (`L x r`)
    /// rows. `forced_gate` pins the softmax weights.
    pub fn record(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        fourier: NodeId,
        rbf: NodeId,
        forced_gate: Option<[f64; 2]>,
    ) -> Result<NodeId> {
        let global = self.rff_proj.forward(tape, store, fourier)?;
        let local = self.rbf_proj.forward(tape, store, rbf)?;
        let w = match forced_gate {
            Some(g) => {
                let rows = tape.value(global).rows;
                let v = tape.constant(Tensor::vector(g.to_vec()));
                tape.repeat_row(v, rows)
            }
            None => {
                let both = tape.concat_cols(global, local)?;
                let logits = self.gate.forward(tape, store, both)?;
                tape.softmax_rows(logits)
            }
        };
        let w1 = tape.column(w, 0)?;
        let w2 = tape.column(w, 1)?;
        let a = tape.mul_col(global, w1)?;
        let b = tape.mul_col(local, w2)?;
        let mix = tape.add(a, b)?;
        self.out.forward(tape, store, mix)
    }
}

fn raw_geo(points: &[(f64, f64)], state: &GeoState) -> Result<(Tensor, Tensor)> {
    let mut f = Tensor::zeros(points.len(), state.n_fourier());
    let mut r = Tensor::zeros(points.len(), state.n_anchors());
    for (i, &(lat, lon)) in points.iter().enumerate() {
        let (a, b) = state.raw_features(lat, lon)?;
        f.row_mut(i).copy_from_slice(&a);
        r.row_mut(i).copy_from_slice(&b);
    }
    Ok((f, r))
}

/// Geographic features for a sequence of coordinates.
pub fn encode_geo(
    points: &[(f64, f64)],
    state: &GeoState,
    enc: &GeoEncoder,
    store: &ParamStore,
    forced_gate: Option<[f64; 2]>,
) -> Result<Vec<Vec<f64>>> {
    let (f, r) = raw_geo(points, state)?;
    let mut tape = Tape::new();
    let fi = tape.constant(f);
    let ri = tape.constant(r);
    let out = enc.record(&mut tape, store, fi, ri, forced_gate)?;
    Ok(tape.value(out).to_rows())
}

/// Temporal frequencies: `M` periods log-spaced from 1 hour to one week.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TimeState {
    /// Radians per hour, strictly increasing.
    pub omega: Vec<f64>,
    pub max_gap_hours: f64,
}

impl TimeState {
    pub fn new(m: usize, max_gap_hours: f64) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("need at least one temporal frequency".into()));
        }
        let (lo, hi) = (fm::ln(1.0), fm::ln(HOURS_PER_WEEK));
        let mut omega: Vec<f64> = (0..m)
            .map(|i| {
                let t = if m == 1 { 0.0 } else { i as f64 / (m - 1) as f64 };
                let period = fm::exp(lo + t * (hi - lo));
                2.0 * core::f64::consts::PI / period
            })
            .collect();
        omega.reverse();
        Ok(TimeState { omega, max_gap_hours })
    }

    /// `1 + 2M + 7 + 24`.
    pub fn n_features(&self) -> usize {
        1 + 2 * self.omega.len() + 7 + 24
    }

    /// Feature rows `[gap/max; sin(w gap); cos(w gap); dow; hour]`. Gaps come
    /// from `utc`, calendar fields from `calendar_ts` (UTC or local).
    pub fn features(&self, utc: &[i64], calendar_ts: &[i64]) -> Result<Tensor> {
        if utc.len() != calendar_ts.len() {
            return Err(Error::Dimension { expected: utc.len(), got: calendar_ts.len() });
        }
        let m = self.omega.len();
        let mut t = Tensor::zeros(utc.len(), self.n_features());
        for i in 0..utc.len() {
            let gap = if i == 0 {
                0.0
            } else {
                if utc[i] < utc[i - 1] {
                    return Err(Error::Ordering(i));
                }
                ((utc[i] - utc[i - 1]) as f64 / 3600.0).clamp(0.0, self.max_gap_hours)
            };
            let (dow, hour) = calendar(calendar_ts[i]);
            let row = t.row_mut(i);
            row[0] = gap / self.max_gap_hours;
            for (j, w) in self.omega.iter().enumerate() {
                row[1 + j] = fm::sin(w * gap);
                row[1 + m + j] = fm::cos(w * gap);
            }
            row[1 + 2 * m + dow] = 1.0;
            row[1 + 2 * m + 7 + hour] = 1.0;
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TimeEncoder {
    pub proj: Linear,
    /// `1 x d_time`.
    pub gate: ParamId,
}

impl TimeEncoder {
    pub fn new(store: &mut ParamStore, state: &TimeState, d_time: usize, rng: &mut Rng) -> Self {
        let proj = Linear::new(store, "time.proj", state.n_features(), d_time, true, rng);
        let bound = 1.0 / fm::sqrt(d_time as f64);
        let gate = store.add("time.gate", crate::params::uniform_tensor(1, d_time, bound, rng));
        TimeEncoder { proj, gate }
    }

    /// `(E_t, gamma)` with shapes `L x d_time` and `L x 1`.
    pub fn record(&self, tape: &mut Tape, store: &ParamStore, feats: NodeId) -> Result<(NodeId, NodeId)> {
        let e = self.proj.forward(tape, store, feats)?;
        let w = tape.param(store, self.gate);
        let z = tape.affine(e, w, None)?;
        Ok((e, tape.sigmoid(z)))
    }
}

/// Temporal features and decay gates for UTC timestamps.
pub fn encode_time(
    timestamps: &[i64],
    state: &TimeState,
    enc: &TimeEncoder,
    store: &ParamStore,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let feats = state.features(timestamps, timestamps)?;
    let mut tape = Tape::new();
    let f = tape.constant(feats);
    let (e, g) = enc.record(&mut tape, store, f)?;
    Ok((tape.value(e).to_rows(), tape.value(g).data.clone()))
}

/// Causal multi-head attention from semantic queries to context keys and
/// values, fused back onto the manifold.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CrossAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, d: usize, ctx_dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(alloc::format!("dimension {d} is not divisible by {heads} heads")));
        }
        Ok(CrossAttention {
            query: Linear::new(store, "att.query", d, d, true, rng),
            key: Linear::new(store, "att.key", ctx_dim, d, true, rng),
            value: Linear::new(store, "att.value", ctx_dim, d, true, rng),
            out: Linear::new(store, "att.out", d, d, true, rng),
            heads,
        })
    }

    /// Attention output before the final projection, `L x d`.
    pub fn record_mix(&self, tape: &mut Tape, store: &ParamStore, sem: NodeId, ctx: NodeId) -> Result<NodeId> {
        let q = self.query.forward(tape, store, sem)?;
        let k = self.key.forward(tape, store, ctx)?;
        let v = self.value.forward(tape, store, ctx)?;
        tape.attention(q, k, v, self.heads)
    }

    /// `exp_o(sem) ⊕ exp_o(out(mix))` as spatial rows.
    pub fn record(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        geometry: Geometry,
        sem: NodeId,
        ctx: NodeId,
    ) -> Result<NodeId> {
        let mix = self.record_mix(tape, store, sem, ctx)?;
        let o = self.out.forward(tape, store, mix)?;
        let base = geometry.exp_o(tape, sem);
        let shift = geometry.exp_o(tape, o);
        geometry.add(tape, base, shift)
    }
}

/// Fused manifold inputs for the sequence layer.
pub fn cross_manifold_attention(
    sem: &[TangentVector],
    ctx: &[Vec<f64>],
    att: &CrossAttention,
    store: &ParamStore,
) -> Result<Vec<LorentzPoint>> {
    if sem.len() != ctx.len() {
        return Err(Error::Dimension { expected: sem.len(), got: ctx.len() });
    }
    if sem.is_empty() {
        return Ok(Vec::new());
    }
    let d = sem[0].spatial.len();
    let c = ctx[0].len();
    let mut s = Tensor::zeros(sem.len(), d);
    let mut u = Tensor::zeros(ctx.len(), c);
    for i in 0..sem.len() {
        if sem[i].spatial.len() != d || ctx[i].len() != c {
            return Err(Error::Dimension { expected: d, got: sem[i].spatial.len() });
        }
        s.row_mut(i).copy_from_slice(&sem[i].spatial);
        u.row_mut(i).copy_from_slice(&ctx[i]);
    }
    let mut tape = Tape::new();
    let sn = tape.constant(s);
    let un = tape.constant(u);
    let q = att.record(&mut tape, store, Geometry::Lorentz, sn, un)?;
    let v = tape.value(q);
    Ok((0..v.rows).map(|i| LorentzPoint::from_spatial(v.row(i))).collect())
}
