//! Lorentz-model hyperbolic geometry with curvature fixed at `c = 1`.
//!
//! Points are stored time-coordinate first. All maps are based at the origin
//! `o = (1, 0, ..., 0)`.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fm;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Curvature parameter `c`. Recorded in table headers; the math assumes 1.
pub const CURVATURE: f64 = 1.0;

/// Relative tolerance for the hyperboloid constraint `<x,x>_L = -1`.
pub const MANIFOLD_TOL: f64 = 1e-6;

/// Below this tangent norm `exp_o` uses the first-order expansion.
pub const SMALL_NORM: f64 = 1e-7;

/// Lower clamp for arguments of `arccosh`.
pub const ACOSH_CLAMP: f64 = 1.0 + 1e-12;

/// A point on the hyperboloid, time coordinate first.
#[derive(Debug, Clone, PartialEq)]
pub struct LorentzPoint {
    coords: Vec<f64>,
}

/// A tangent vector at the origin, stored by its spatial part.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    pub spatial: Vec<f64>,
}

/// Angles of a block-diagonal rotation acting on spatial coordinates, one
/// per consecutive `2 x 2` block. An odd trailing coordinate is left alone.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RotationParams {
    pub angles: Vec<f64>,
}

impl LorentzPoint {
    /// Validates the hyperboloid constraint before wrapping `coords`.
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::Dimension { expected: 2, got: coords.len() });
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("LorentzPoint"));
        }
        let p = LorentzPoint { coords };
        p.check()?;
        Ok(p)
    }

    pub fn origin(n: usize) -> Self {
        let mut coords = alloc::vec![0.0; n + 1];
        coords[0] = fm::sqrt(CURVATURE);
        LorentzPoint { coords }
    }

    /// Lifts spatial coordinates onto the hyperboloid.
    pub fn from_spatial(spatial: &[f64]) -> Self {
        let mut coords = Vec::with_capacity(spatial.len() + 1);
        coords.push(fm::sqrt(CURVATURE + fm::norm_sq(spatial)));
        coords.extend_from_slice(spatial);
        LorentzPoint { coords }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn time(&self) -> f64 {
        self.coords[0]
    }

    pub fn spatial(&self) -> &[f64] {
        &self.coords[1..]
    }

    /// Manifold dimension `n` (one less than the number of coordinates).
    pub fn dim(&self) -> usize {
        self.coords.len() - 1
    }

    fn check(&self) -> Result<()> {
        let inner = lorentz_inner_unchecked(&self.coords, &self.coords);
        let scale = self.coords[0] * self.coords[0];
        if self.coords[0] <= 0.0 || fm::abs(inner + CURVATURE) > MANIFOLD_TOL * scale.max(1.0) {
            return Err(Error::OffManifold { inner });
        }
        Ok(())
    }
}

impl TangentVector {
    pub fn new(spatial: Vec<f64>) -> Self {
        TangentVector { spatial }
    }

    pub fn zeros(n: usize) -> Self {
        TangentVector { spatial: alloc::vec![0.0; n] }
    }

    pub fn norm(&self) -> f64 {
        fm::sqrt(fm::norm_sq(&self.spatial))
    }

    /// The `(n+1)`-vector `(0, spatial)`.
    pub fn to_ambient(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.spatial.len() + 1);
        v.push(0.0);
        v.extend_from_slice(&self.spatial);
        v
    }
}

impl RotationParams {
    pub fn identity(n: usize) -> Self {
        RotationParams { angles: alloc::vec![0.0; n / 2] }
    }

    /// Rotates spatial coordinates in place.
    pub fn apply(&self, spatial: &mut [f64]) {
        for (k, &theta) in self.angles.iter().enumerate() {
            let (i, j) = (2 * k, 2 * k + 1);
            if j >= spatial.len() {
                break;
            }
            let (s, c) = (fm::sin(theta), fm::cos(theta));
            let (a, b) = (spatial[i], spatial[j]);
            spatial[i] = c * a - s * b;
            spatial[j] = s * a + c * b;
        }
    }
}

fn lorentz_inner_unchecked(x: &[f64], y: &[f64]) -> f64 {
    -x[0] * y[0] + fm::dot(&x[1..], &y[1..])
}

/// `-x_0 y_0 + sum_{i>=1} x_i y_i`.
pub fn lorentz_inner(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension { expected: x.len(), got: y.len() });
    }
    if x.len() < 2 {
        return Err(Error::Dimension { expected: 2, got: x.len() });
    }
    Ok(lorentz_inner_unchecked(x, y))
}

/// Squared Lorentz distance `-2c - 2<x,y>_L`.
///
/// Evaluated as `|s-t|^2 - (x_0-y_0)^2` with `x_0 - y_0` rewritten through the
/// spatial parts, which avoids the cancellation of the textbook form for
/// nearby points far from the origin.
pub fn sq_lorentz_dist(x: &LorentzPoint, y: &LorentzPoint) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::Dimension { expected: x.dim(), got: y.dim() });
    }
    x.check()?;
    y.check()?;
    Ok(sq_dist_spatial(x.spatial(), y.spatial()))
}

/// Squared Lorentz distance between the lifts of two spatial vectors.
pub fn sq_dist_spatial(s: &[f64], t: &[f64]) -> f64 {
    let x0 = fm::sqrt(1.0 + fm::norm_sq(s));
    let y0 = fm::sqrt(1.0 + fm::norm_sq(t));
    let mut diff_sq = 0.0;
    let mut cross = 0.0;
    for (a, b) in s.iter().zip(t) {
        let d = a - b;
        diff_sq += d * d;
        cross += d * (a + b);
    }
    let dt = cross / (x0 + y0);
    (diff_sq - dt * dt).max(0.0)
}

/// Exponential map at the origin.
pub fn exp_o(v: &TangentVector) -> Result<LorentzPoint> {
    if v.spatial.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("exp_o input"));
    }
    let r = v.norm();
    if r < SMALL_NORM {
        return Ok(LorentzPoint::from_spatial(&v.spatial));
    }
    let scale = fm::sinh(r) / r;
    let mut coords = Vec::with_capacity(v.spatial.len() + 1);
    coords.push(fm::cosh(r));
    coords.extend(v.spatial.iter().map(|x| x * scale));
    Ok(LorentzPoint { coords })
}

/// Logarithmic map at the origin.
///
/// On the hyperboloid `arccosh(x_0) = asinh(|s|)`; the second form is used
/// because it keeps full relative precision next to the origin.
pub fn log_o(x: &LorentzPoint) -> Result<TangentVector> {
    let arg = x.time() / fm::sqrt(CURVATURE);
    if arg < 1.0 - MANIFOLD_TOL {
        return Err(Error::Domain { what: "arccosh", value: arg });
    }
    x.check()?;
    let s = x.spatial();
    let rho = fm::sqrt(fm::norm_sq(s));
    if rho == 0.0 {
        return Ok(TangentVector::zeros(s.len()));
    }
    let scale = fm::asinh(rho) / rho;
    Ok(TangentVector { spatial: s.iter().map(|c| c * scale).collect() })
}

/// Lorentz point to the Poincaré ball: `s / (x_0 + sqrt c)`.
pub fn to_poincare(x: &LorentzPoint) -> Vec<f64> {
    let denom = x.time() + fm::sqrt(CURVATURE);
    x.spatial().iter().map(|c| c / denom).collect()
}

/// Poincaré ball to Lorentz point. Fails outside the open unit ball.
pub fn from_poincare(p: &[f64]) -> Result<LorentzPoint> {
    let n2 = fm::norm_sq(p);
    if n2 >= 1.0 / CURVATURE || !n2.is_finite() {
        return Err(Error::Domain { what: "Poincaré ball", value: n2 });
    }
    let denom = 1.0 - CURVATURE * n2;
    let sc = fm::sqrt(CURVATURE);
    let spatial: Vec<f64> = p.iter().map(|c| 2.0 * sc * c / denom).collect();
    Ok(LorentzPoint::from_spatial(&spatial))
}

/// Möbius addition on the Poincaré ball of curvature `-1`.
pub fn poincare_mobius_add(x: &[f64], y: &[f64]) -> Vec<f64> {
    let c = CURVATURE;
    let xy = fm::dot(x, y);
    let x2 = fm::norm_sq(x);
    let y2 = fm::norm_sq(y);
    let a = 1.0 + 2.0 * c * xy + c * y2;
    let b = 1.0 - c * x2;
    let d = 1.0 + 2.0 * c * xy + c * c * x2 * y2;
    x.iter().zip(y).map(|(xi, yi)| (a * xi + b * yi) / d).collect()
}

/// Möbius addition of two Lorentz points, evaluated on the Poincaré ball.
///
/// The conformal factors `1 - |p|^2 = 2/(1+x_0)` are read from the
/// hyperboloid coordinates and the result's factor uses the gyro identity
/// `1 - |p ⊕ q|^2 = (1-|p|^2)(1-|q|^2)/D`, so nothing is lost to cancellation
/// near the ball boundary.
pub fn mobius_add(x: &LorentzPoint, y: &LorentzPoint) -> Result<LorentzPoint> {
    if x.dim() != y.dim() {
        return Err(Error::Dimension { expected: x.dim(), got: y.dim() });
    }
    let p = to_poincare(x);
    let q = to_poincare(y);
    let ap = 2.0 / (1.0 + x.time());
    let aq = 2.0 / (1.0 + y.time());
    let pq = fm::dot(&p, &q);
    let p2 = fm::norm_sq(&p);
    let q2 = fm::norm_sq(&q);
    let a = 1.0 + 2.0 * pq + q2;
    let d = 1.0 + 2.0 * pq + p2 * q2;
    let conformal = ap * aq / d;
    let spatial: Vec<f64> = p.iter().zip(&q).map(|(pi, qi)| 2.0 * ((a * pi + ap * qi) / d) / conformal).collect();
    if spatial.iter().any(|c| c.is_nan()) {
        return Err(Error::NonFinite("mobius_add"));
    }
    Ok(LorentzPoint::from_spatial(&spatial))
}

/// Keeps the spatial part of `raw` and recomputes the time coordinate.
pub fn project_to_hyperboloid(raw: &[f64]) -> Result<LorentzPoint> {
    if raw.len() < 2 {
        return Err(Error::Dimension { expected: 2, got: raw.len() });
    }
    Ok(LorentzPoint::from_spatial(&raw[1..]))
}

/// Block-diagonal rotation of the spatial coordinates, then projection.
pub fn rotate(p: &LorentzPoint, r: &RotationParams) -> LorentzPoint {
    let mut c = p.coords().to_vec();
    // spatial norm is preserved, so the time coordinate carries over
    r.apply(&mut c[1..]);
    LorentzPoint { coords: c }
}

/// Applies `weights` (`n_out x n_in`) to the spatial coordinates and lifts the
/// result back onto the hyperboloid.
pub fn lorentz_linear(x: &LorentzPoint, weights: &Tensor) -> Result<LorentzPoint> {
    if weights.cols != x.dim() {
        return Err(Error::Dimension { expected: weights.cols, got: x.dim() });
    }
    let s = x.spatial();
    let out: Vec<f64> = (0..weights.rows).map(|i| fm::dot(weights.row(i), s)).collect();
    Ok(LorentzPoint::from_spatial(&out))
}

/// Euclidean norm of the Poincaré image, `tanh(d_L(o,x)/2)`.
pub fn poincare_radius(x: &LorentzPoint) -> f64 {
    fm::sqrt(fm::norm_sq(&to_poincare(x)))
}

/// Which geometry the model runs in. `Euclidean` replaces the origin maps by
/// identities, Möbius addition by vector addition and distances by L2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Geometry {
    #[default]
    Lorentz,
    Euclidean,
}

impl Geometry {
    pub fn exp_o(self, tape: &mut Tape, m: NodeId) -> NodeId {
        match self {
            Geometry::Lorentz => tape.exp_o(m),
            Geometry::Euclidean => m,
        }
    }

    pub fn log_o(self, tape: &mut Tape, m: NodeId) -> NodeId {
        match self {
            Geometry::Lorentz => tape.log_o(m),
            Geometry::Euclidean => m,
        }
    }

    pub fn add(self, tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
        match self {
            Geometry::Lorentz => tape.mobius(a, b),
            Geometry::Euclidean => tape.add(a, b),
        }
    }

    /// Negative distance from every row of `e` to every row of `c`.
    pub fn neg_dist(self, tape: &mut Tape, e: NodeId, c: NodeId) -> Result<NodeId> {
        match self {
            Geometry::Lorentz => tape.dist_scores(e, c),
            Geometry::Euclidean => tape.euclid_scores(e, c),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        fm::abs(a - b) <= tol
    }

    #[test]
    fn inner_product_examples() {
        assert_eq!(lorentz_inner(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap(), -1.0);
        assert_eq!(lorentz_inner(&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(lorentz_inner(&[2.0, 1.0, 1.0], &[1.0, 1.0, 0.0]).unwrap(), -1.0);
        assert!(matches!(lorentz_inner(&[1.0, 0.0], &[1.0, 0.0, 0.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn distance_examples() {
        let o = LorentzPoint::origin(2);
        assert_eq!(sq_lorentz_dist(&o, &o).unwrap(), 0.0);
        let y = LorentzPoint::new(vec![fm::cosh(1.0), fm::sinh(1.0), 0.0]).unwrap();
        let d = sq_lorentz_dist(&o, &y).unwrap();
        assert!(close(d, 2.0 * (fm::cosh(1.0) - 1.0), 1e-12));
        assert!(close(d, 1.0862, 1e-4));
        assert!(LorentzPoint::new(vec![1.0, 1.0, 0.0]).is_err());
    }

    #[test]
    fn exp_log_examples() {
        let o = exp_o(&TangentVector::zeros(3)).unwrap();
        assert_eq!(o, LorentzPoint::origin(3));
        let p = exp_o(&TangentVector::new(vec![1.0, 0.0])).unwrap();
        assert!(close(p.coords()[0], fm::cosh(1.0), 1e-15));
        assert!(close(p.coords()[1], fm::sinh(1.0), 1e-15));
        let x = LorentzPoint::new(vec![fm::cosh(2.0), fm::sinh(2.0), 0.0]).unwrap();
        let v = log_o(&x).unwrap();
        assert!(close(v.spatial[0], 2.0, 1e-12) && v.spatial[1] == 0.0);
        assert_eq!(log_o(&LorentzPoint::origin(4)).unwrap(), TangentVector::zeros(4));
    }

    #[test]
    fn log_rejects_points_below_the_origin_sheet() {
        let bad = LorentzPoint { coords: vec![0.5, 0.0, 0.0] };
        assert!(matches!(log_o(&bad), Err(Error::Domain { .. })));
    }

    #[test]
    fn small_norm_guard_is_continuous() {
        let v = TangentVector::new(vec![3e-8, -4e-8]);
        let p = exp_o(&v).unwrap();
        assert!(close(p.spatial()[0], 3e-8, 1e-20));
        let w = TangentVector::new(vec![3e-7, -4e-7]);
        let q = exp_o(&w).unwrap();
        assert!(close(q.spatial()[0], 3e-7, 1e-18));
    }

    #[test]
    fn scalar_mobius_example() {
        let r = poincare_mobius_add(&[0.3], &[0.4]);
        assert!(close(r[0], 0.625, 1e-12));
    }

    #[test]
    fn mobius_identities() {
        let x = exp_o(&TangentVector::new(vec![0.7, -1.2, 0.3])).unwrap();
        let o = LorentzPoint::origin(3);
        let a = mobius_add(&o, &x).unwrap();
        let b = mobius_add(&x, &o).unwrap();
        for i in 0..4 {
            assert!(close(a.coords()[i], x.coords()[i], 1e-12));
            assert!(close(b.coords()[i], x.coords()[i], 1e-12));
        }
    }

    #[test]
    fn lorentz_mobius_matches_ball_route() {
        let x = exp_o(&TangentVector::new(vec![0.5, 0.1])).unwrap();
        let y = exp_o(&TangentVector::new(vec![-0.2, 0.9])).unwrap();
        let direct = mobius_add(&x, &y).unwrap();
        let ball = poincare_mobius_add(&to_poincare(&x), &to_poincare(&y));
        let via = from_poincare(&ball).unwrap();
        for i in 0..3 {
            assert!(close(direct.coords()[i], via.coords()[i], 1e-12));
        }
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_to_hyperboloid(&[7.0, 0.0, 0.0]).unwrap(), LorentzPoint::origin(2));
        let p = project_to_hyperboloid(&[0.0, 3.0, 4.0]).unwrap();
        assert_eq!(p.time(), fm::sqrt(26.0));
        let q = project_to_hyperboloid(p.coords()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn rotation_examples() {
        let p = exp_o(&TangentVector::new(vec![1.0, 0.0])).unwrap();
        assert_eq!(rotate(&p, &RotationParams::identity(2)), p);
        let q = rotate(&p, &RotationParams { angles: vec![core::f64::consts::FRAC_PI_2] });
        assert!(close(q.spatial()[0], 0.0, 1e-15));
        assert!(close(q.spatial()[1], fm::sinh(1.0), 1e-15));
        assert!(close(q.time(), p.time(), 1e-15));
    }

    #[test]
    fn lorentz_linear_examples() {
        let x = exp_o(&TangentVector::new(vec![0.3, -0.8])).unwrap();
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(lorentz_linear(&x, &eye).unwrap(), x);
        assert_eq!(lorentz_linear(&x, &Tensor::zeros(2, 2)).unwrap(), LorentzPoint::origin(2));
        assert!(lorentz_linear(&x, &Tensor::zeros(2, 3)).is_err());
    }

    #[test]
    fn poincare_radius_of_radius_two_point() {
        let x = LorentzPoint::new(vec![fm::cosh(2.0), fm::sinh(2.0), 0.0]).unwrap();
        assert!(close(poincare_radius(&x), libm::tanh(1.0), 1e-15));
    }
}
