// Float math through libm so results do not depend on the platform libm.

/// Euclidean remainder, always in `[0, m)` for positive `m`.
#[inline]
pub fn rem_euclid(x: f64, m: f64) -> f64 {
    let r = libm::fmod(x, m);
    if r < 0.0 {
        r + m
    } else {
        r
    }
}

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn expm1(x: f64) -> f64 {
    libm::expm1(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn ln1p(x: f64) -> f64 {
    libm::log1p(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn cosh(x: f64) -> f64 {
    libm::cosh(x)
}

#[inline]
pub fn sinh(x: f64) -> f64 {
    libm::sinh(x)
}

#[inline]
pub fn asinh(x: f64) -> f64 {
    libm::asinh(x)
}

#[inline]
pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}

#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

#[inline]
pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

#[inline]
pub fn atan2(y: f64, x: f64) -> f64 {
    libm::atan2(y, x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + ln1p(exp(-x))
    } else {
        ln1p(exp(x))
    }
}

/// `log(sigmoid(x))` without overflow for large `|x|`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -ln1p(exp(-x))
    } else {
        x - ln1p(exp(x))
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// `sinh(r)/r` and `(r cosh r - sinh r)/r^3`, with series below `r = 1e-3`.
#[inline]
pub fn sinhc_pair(r: f64) -> (f64, f64) {
    if r < 1e-3 {
        let r2 = r * r;
        (1.0 + r2 / 6.0 + r2 * r2 / 120.0, 1.0 / 3.0 + r2 / 30.0)
    } else {
        let s = sinh(r);
        let c = cosh(r);
        (s / r, (r * c - s) / (r * r * r))
    }
}

/// `asinh(r)/r` and `(r/sqrt(1+r^2) - asinh r)/r^3`, with series below `r = 1e-3`.
#[inline]
pub fn asinhc_pair(r: f64) -> (f64, f64) {
    if r < 1e-3 {
        let r2 = r * r;
        (1.0 - r2 / 6.0 + 3.0 * r2 * r2 / 40.0, -1.0 / 3.0 + 0.3 * r2)
    } else {
        let a = asinh(r);
        (a / r, (r / sqrt(1.0 + r * r) - a) / (r * r * r))
    }
}
