//! Tangent-routed selective state-space layer.
//!
//! Per step `t` with context `u_t` and decay gate `g_t`:
//!
//! ```text
//! dt_t  = softplus(A_proj(u_t) * dt_weight + dt_bias) * g_t
//! Abar  = exp(dt_t * a)              a = -ln(1), -ln(2), ..., -ln(d)
//! Bbar  = (exp(dt_t * a) - 1) / a    Taylor form near dt_t * a = 0
//! Bmod  = Bbar * B_proj(u_t) * sigmoid(C_proj(u_t))
//! h_t   = Abar * h_{t-1} + Bmod * log_o(q_t),   h_0 = 0
//! H_t   = exp_o(h_t) ⊕ exp_o(anchor),           H_0 = exp_o(anchor)
//! out_t = H_{t-1} ⊕ W H_t
//! ```
//!
//! `W H_t` multiplies the spatial coordinates and re-derives the time
//! coordinate, which the tape does implicitly.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fm;
use crate::manifold::{Geometry, LorentzPoint};
use crate::params::{Linear, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{self, NodeId, Tape};
use crate::tensor::Tensor;

/// Diagonal of the fixed state matrix: `a_i = -ln(i + 1)`.
pub fn decay_rates(d: usize) -> Vec<f64> {
    (1..=d).map(|i| -fm::ln(i as f64)).collect()
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SsmLayer {
    pub rates: Vec<f64>,
    pub a_proj: Linear,
    pub dt_weight: ParamId,
    pub dt_bias: ParamId,
    pub b_proj: Linear,
    pub c_proj: Linear,
    pub anchor: ParamId,
    pub out: ParamId,
}

/// Recorded nodes of one layer application.
#[derive(Debug, Clone, Copy)]
pub struct LayerNodes {
    /// `L x d` step sizes.
    pub dt: NodeId,
    /// `L x d` tangent states `h_1..h_L`.
    pub state: NodeId,
    /// `L x d` re-projected states `H_1..H_L` (spatial part).
    pub anchored: NodeId,
    /// `L x d` layer outputs (spatial part).
    pub out: NodeId,
}

impl SsmLayer {
    /// Fresh layer: identity output map, zero anchor, `B_proj` bias at 1 so
    /// the input gain starts near the plain discretised value.
    pub fn new(store: &mut ParamStore, name: &str, d: usize, ctx_dim: usize, rng: &mut Rng) -> Self {
        let a_proj = Linear::new(store, &alloc::format!("{name}.a_proj"), ctx_dim, d, true, rng);
        let b_proj = Linear::new(store, &alloc::format!("{name}.b_proj"), ctx_dim, d, true, rng);
        let c_proj = Linear::new(store, &alloc::format!("{name}.c_proj"), ctx_dim, d, true, rng);
        if let Some(b) = b_proj.bias {
            store.get_mut(b).data.iter_mut().for_each(|v| *v = 1.0);
        }
        let dt_weight = store.add(alloc::format!("{name}.dt_weight"), Tensor::from_vec(1, d, vec![1.0; d]));
        let dt_bias = store.add(alloc::format!("{name}.dt_bias"), Tensor::zeros(1, d));
        let anchor = store.add(alloc::format!("{name}.anchor"), Tensor::zeros(1, d));
        let mut eye = Tensor::zeros(d, d);
        for i in 0..d {
            eye.set(i, i, 1.0);
        }
        let out = store.add(alloc::format!("{name}.out"), eye);
        SsmLayer { rates: decay_rates(d), a_proj, dt_weight, dt_bias, b_proj, c_proj, anchor, out }
    }

    pub fn dim(&self) -> usize {
        self.rates.len()
    }

    /// `softplus(A_proj(ctx) * dt_weight + dt_bias) * gamma`, `L x d`.
    pub fn record_step_size(&self, tape: &mut Tape, store: &ParamStore, ctx: NodeId, gamma: NodeId) -> Result<NodeId> {
        let proj = self.a_proj.forward(tape, store, ctx)?;
        let w = tape.param(store, self.dt_weight);
        let b = tape.param(store, self.dt_bias);
        let pre = tape.mul_row(proj, w)?;
        let pre = tape.add_row(pre, b)?;
        let sp = tape.softplus(pre);
        tape.mul_col(sp, gamma)
    }

    /// `(Abar, Bbar)` for recorded step sizes.
    pub fn record_discretize(&self, tape: &mut Tape, dt: NodeId) -> Result<(NodeId, NodeId)> {
        let rates = tape.constant(Tensor::vector(self.rates.clone()));
        let x = tape.mul_row(dt, rates)?;
        let abar = tape.exp(x);
        let bbar = tape.zoh_input(dt, &self.rates)?;
        Ok((abar, bbar))
    }

    /// `Bbar * B_proj(ctx) * sigmoid(C_proj(ctx))`.
    pub fn record_modulate(&self, tape: &mut Tape, store: &ParamStore, bbar: NodeId, ctx: NodeId) -> Result<NodeId> {
        let b = self.b_proj.forward(tape, store, ctx)?;
        let c = self.c_proj.forward(tape, store, ctx)?;
        let gate = tape.sigmoid(c);
        let m = tape.mul(bbar, b)?;
        tape.mul(m, gate)
    }

    /// Full layer over `q` (`L x d` points), `ctx` (`L x c`) and `gamma`
    /// (`L x 1`).
    pub fn record(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        geometry: Geometry,
        q: NodeId,
        ctx: NodeId,
        gamma: NodeId,
    ) -> Result<LayerNodes> {
        let len = tape.value(q).rows;
        let dt = self.record_step_size(tape, store, ctx, gamma)?;
        let (abar, bbar) = self.record_discretize(tape, dt)?;
        let gain = self.record_modulate(tape, store, bbar, ctx)?;
        let lq = geometry.log_o(tape, q);
        let drive = tape.mul(gain, lq)?;
        let state = tape.recurrence(abar, drive)?;
        let lifted = geometry.exp_o(tape, state);
        let anchor_t = tape.param(store, self.anchor);
        let anchor = geometry.exp_o(tape, anchor_t);
        let anchors = tape.repeat_row(anchor, len);
        let anchored = geometry.add(tape, lifted, anchors)?;
        let prev = tape.shift_down(anchored, anchor)?;
        let w = tape.param(store, self.out);
        let mapped = tape.affine(anchored, w, None)?;
        let out = geometry.add(tape, prev, mapped)?;
        Ok(LayerNodes { dt, state, anchored, out })
    }
}

/// Applies layers in order, feeding each output sequence to the next.
pub fn record_stack(
    layers: &[SsmLayer],
    tape: &mut Tape,
    store: &ParamStore,
    geometry: Geometry,
    q: NodeId,
    ctx: NodeId,
    gamma: NodeId,
) -> Result<(NodeId, Vec<LayerNodes>)> {
    if layers.is_empty() {
        return Err(Error::Config("a layer stack needs at least one layer".into()));
    }
    let mut x = q;
    let mut nodes = Vec::with_capacity(layers.len());
    for layer in layers {
        let n = layer.record(tape, store, geometry, x, ctx, gamma)?;
        x = n.out;
        nodes.push(n);
    }
    Ok((x, nodes))
}

fn rows_tensor(rows: &[Vec<f64>], cols: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        if r.len() != cols {
            return Err(Error::Dimension { expected: cols, got: r.len() });
        }
        data.extend_from_slice(r);
    }
    Ok(Tensor::from_vec(rows.len(), cols, data))
}

fn points_tensor(points: &[LorentzPoint], d: usize) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = points.iter().map(|p| p.spatial().to_vec()).collect();
    rows_tensor(&rows, d)
}

fn to_points(t: &Tensor) -> Vec<LorentzPoint> {
    (0..t.rows).map(|i| LorentzPoint::from_spatial(t.row(i))).collect()
}

fn check_finite(t: &Tensor, what: &'static str) -> Result<()> {
    for i in 0..t.rows {
        if t.row(i).iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericAtStep { step: i + 1, what });
        }
    }
    Ok(())
}

/// Step sizes for one context vector.
pub fn step_size(ctx: &[f64], gamma: f64, layer: &SsmLayer, store: &ParamStore) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::vector(ctx.to_vec()));
    let g = tape.constant(Tensor::scalar(gamma));
    let dt = layer.record_step_size(&mut tape, store, c, g)?;
    Ok(tape.value(dt).data.clone())
}

/// Zero-order-hold discretisation per channel.
pub fn discretize(dt: &[f64], rates: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if dt.len() != rates.len() {
        return Err(Error::Dimension { expected: rates.len(), got: dt.len() });
    }
    if let Some(&bad) = dt.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Domain { what: "step size", value: bad });
    }
    let abar = dt.iter().zip(rates).map(|(t, a)| fm::exp(t * a)).collect();
    let bbar = dt.iter().zip(rates).map(|(t, a)| tape::zoh_gain(*t, *a)).collect();
    Ok((abar, bbar))
}

/// Context-modulated input gain for one step.
pub fn modulate_input(bbar: &[f64], ctx: &[f64], layer: &SsmLayer, store: &ParamStore) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let b = tape.constant(Tensor::vector(bbar.to_vec()));
    let c = tape.constant(Tensor::vector(ctx.to_vec()));
    let m = layer.record_modulate(&mut tape, store, b, c)?;
    Ok(tape.value(m).data.clone())
}

/// Intermediate sequences of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanTrace {
    pub step_sizes: Vec<Vec<f64>>,
    pub states: Vec<Vec<f64>>,
    pub anchored: Vec<LorentzPoint>,
    pub outputs: Vec<LorentzPoint>,
}

/// Runs one layer and returns every intermediate sequence.
pub fn scan_trace(
    q: &[LorentzPoint],
    ctx: &[Vec<f64>],
    gamma: &[f64],
    layer: &SsmLayer,
    store: &ParamStore,
) -> Result<ScanTrace> {
    if q.is_empty() {
        return Err(Error::Input("scan needs at least one step".into()));
    }
    if ctx.len() != q.len() || gamma.len() != q.len() {
        return Err(Error::Dimension { expected: q.len(), got: ctx.len().min(gamma.len()) });
    }
    let d = layer.dim();
    let mut tape = Tape::new();
    let qn = tape.constant(points_tensor(q, d)?);
    let cn = tape.constant(rows_tensor(ctx, ctx[0].len())?);
    let gn = tape.constant(Tensor::from_vec(gamma.len(), 1, gamma.to_vec()));
    let n = layer.record(&mut tape, store, Geometry::Lorentz, qn, cn, gn)?;
    check_finite(tape.value(n.state), "tangent state")?;
    check_finite(tape.value(n.out), "layer output")?;
    Ok(ScanTrace {
        step_sizes: tape.value(n.dt).to_rows(),
        states: tape.value(n.state).to_rows(),
        anchored: to_points(tape.value(n.anchored)),
        outputs: to_points(tape.value(n.out)),
    })
}

/// Layer outputs for a sequence of points.
pub fn scan(
    q: &[LorentzPoint],
    ctx: &[Vec<f64>],
    gamma: &[f64],
    layer: &SsmLayer,
    store: &ParamStore,
) -> Result<Vec<LorentzPoint>> {
    Ok(scan_trace(q, ctx, gamma, layer, store)?.outputs)
}

/// Stacked layers for a sequence of points.
pub fn stack(
    layers: &[SsmLayer],
    q: &[LorentzPoint],
    ctx: &[Vec<f64>],
    gamma: &[f64],
    store: &ParamStore,
) -> Result<Vec<LorentzPoint>> {
    if layers.is_empty() {
        return Err(Error::Config("a layer stack needs at least one layer".into()));
    }
    let mut x = q.to_vec();
    for layer in layers {
        x = scan(&x, ctx, gamma, layer, store)?;
    }
    Ok(x)
}
