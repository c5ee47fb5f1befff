//! Brownian-bridge primitives: conditional point sampling, the closed-form
//! linear-boundary crossing probability, and exact sampling of the bridge
//! minimum below its chord.
//!
//! All formulas are for a Brownian path with diffusion coefficient
//! `sigma2` over an interval of length `dt`, conditioned on its endpoints.

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Probability that a Brownian bridge touches a boundary with (positive,
/// same-side) endpoint clearances `d0`, `d1` over a span `dt`:
/// `exp(-2 d0 d1 / (sigma2 dt))`. Returns 1 when either clearance is
/// nonpositive (an endpoint is on or past the boundary).
pub fn crossing_probability<T: Float>(d0: T, d1: T, dt: T, sigma2: T) -> T {
    if d0 <= T::zero() || d1 <= T::zero() {
        return T::one();
    }
    if dt <= T::zero() {
        return T::zero();
    }
    (-T::from(2.0).unwrap() * d0 * d1 / (sigma2 * dt)).exp()
}

/// Sample the bridge at interior time `t`, given endpoints
/// `(t0, x0)` and `(t1, x1)`.
pub fn sample_point<R: Rng>(
    t0: f64,
    x0: f64,
    t1: f64,
    x1: f64,
    t: f64,
    sigma2: f64,
    rng: &mut R,
) -> f64 {
    debug_assert!(t0 <= t && t <= t1);
    let span = t1 - t0;
    if span <= 0.0 {
        return x0;
    }
    let frac = (t - t0) / span;
    let mean = x0 + frac * (x1 - x0);
    let var = sigma2 * (t - t0) * (t1 - t) / span;
    let g: f64 = StandardNormal.sample(rng);
    mean + var.sqrt() * g
}

/// Sample the exact minimum of a bridge from `x0` to `x1` over a span `dt`.
///
/// Inverse transform of `P(min <= m) = exp(-2 (x0 - m)(x1 - m) / (sigma2 dt))`
/// for `m <= min(x0, x1)`.
pub fn sample_min<R: Rng>(x0: f64, x1: f64, dt: f64, sigma2: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    min_from_uniform(x0, x1, dt, sigma2, u)
}

/// Deterministic inverse transform behind [`sample_min`], for callers that
/// manage the uniform draw themselves.
pub fn min_from_uniform(x0: f64, x1: f64, dt: f64, sigma2: f64, u: f64) -> f64 {
    if dt <= 0.0 {
        return x0.min(x1);
    }
    let c = -sigma2 * dt * u.ln() / 2.0;
    let d = x0 - x1;
    0.5 * ((x0 + x1) - (d * d + 4.0 * c).sqrt())
}

/// Sample the exact maximum of a bridge (mirror of [`sample_min`]).
pub fn sample_max<R: Rng>(x0: f64, x1: f64, dt: f64, sigma2: f64, rng: &mut R) -> f64 {
    -sample_min(-x0, -x1, dt, sigma2, rng)
}

/// Knot values of a Bessel(3) bridge from `alpha > 0` down to `0` over
/// `[0, total]`, evaluated at the (strictly increasing, interior) `times`.
///
/// Realized as the norm of a 3-dimensional Brownian bridge from
/// `(alpha, 0, 0)` to the origin; this is the law of the distance to the
/// boundary of a Brownian path conditioned on first passage at `total`.
pub fn bes3_bridge_knots<R: Rng>(
    alpha: f64,
    total: f64,
    times: &[f64],
    sigma2: f64,
    rng: &mut R,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(times.len());
    // Sequential conditional sampling of the three independent components.
    let mut prev_t = 0.0;
    let mut prev = [alpha, 0.0, 0.0];
    for &t in times {
        debug_assert!(t > prev_t && t < total);
        let mut cur = [0.0; 3];
        for (k, slot) in cur.iter_mut().enumerate() {
            *slot = sample_point(prev_t, prev[k], total, 0.0, t, sigma2, rng);
        }
        out.push((cur[0] * cur[0] + cur[1] * cur[1] + cur[2] * cur[2]).sqrt());
        prev_t = t;
        prev = cur;
    }
    out
}
