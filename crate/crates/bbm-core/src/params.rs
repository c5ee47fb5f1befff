//! Deterministic parameter calculus for the level-set large deviation
//! problem.
//!
//! Everything here is a closed form in the user inputs `(x, a)`: the tilt
//! `theta`, the optimal branch-time fraction `p`, the slope `b`, the rate
//! `I(x, a)`, the log-Laplace data `(kappa, psi'(kappa), psi''(kappa))`,
//! the conditional variance, and the conditioned speed `v`. The module is
//! generic over the scalar type; `LdpParams` at the crate root is the `f64`
//! alias used by the simulation layers.

use num_traits::Float;
use serde::Serialize;

use crate::error::{Error, Result};

fn c<T: Float>(v: f64) -> T {
    T::from(v).expect("constant representable in scalar type")
}

/// All derived scalars for an admissible pair `(x, a)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LdpParamsT<T> {
    pub x: T,
    pub a: T,
    /// Tilt `theta = 2(1-a)/x`, in `(0, sqrt(2))`.
    pub theta: T,
    /// Optimal time fraction, in `(0, 1-a)`.
    pub p: T,
    /// Slope `b = 2/theta = x/(1-a)`.
    pub b: T,
    /// Rate `I(x, a) = x^2 / (2(1-a)) - 1`.
    #[serde(rename = "rate_I")]
    pub rate_i: T,
    /// Largest zero of `psi`: `kappa = 2/theta^2`.
    pub kappa: T,
    /// `psi'(kappa) = 1 - theta^2/2`.
    pub dpsi_kappa: T,
    /// `psi''(kappa) = theta^2`.
    pub ddpsi_kappa: T,
    /// `(1-p) / (1-p + 2p/theta^2)`.
    pub sigma2_cond: T,
    /// Conditioned ballistic speed `v = b p + sqrt(2)(1-p)`.
    pub v_speed: T,
}

impl<T: Float> LdpParamsT<T> {
    /// Derive every scalar from `(x, a)` with the default admissibility
    /// margin `1e-9`.
    pub fn derive(x: T, a: T) -> Result<Self> {
        Self::derive_with_margin(x, a, c(1e-9))
    }

    /// Derive with an explicit strictness margin `eps`: admissibility
    /// requires `x > 0` and `(1 - x^2/2)_+ + eps < a < 1 - eps`.
    pub fn derive_with_margin(x: T, a: T, eps: T) -> Result<Self> {
        let two = c::<T>(2.0);
        let one = T::one();
        if !(x > T::zero()) {
            return Err(Error::Domain(format!(
                "x must be > 0 (got {})",
                x.to_f64().unwrap_or(f64::NAN)
            )));
        }
        let lower = (one - x * x / two).max(T::zero());
        if !(a > lower + eps) {
            return Err(Error::Domain(format!(
                "a must exceed (1 - x^2/2)_+ = {} (got a = {})",
                lower.to_f64().unwrap_or(f64::NAN),
                a.to_f64().unwrap_or(f64::NAN)
            )));
        }
        if !(a < one - eps) {
            return Err(Error::Domain(format!(
                "a must be below 1 (got a = {})",
                a.to_f64().unwrap_or(f64::NAN)
            )));
        }
        let theta = two * (one - a) / x;
        let p = (one - a) * (x * x - two * (one - a)) / (x * x - two * (one - a) * (one - a));
        let b = two / theta;
        let rate_i = x * x / (two * (one - a)) - one;
        let kappa = two / (theta * theta);
        let dpsi_kappa = one - theta * theta / two;
        let ddpsi_kappa = theta * theta;
        let sigma2_cond = (one - p) / (one - p + two * p / (theta * theta));
        let v_speed = b * p + two.sqrt() * (one - p);
        Ok(Self {
            x,
            a,
            theta,
            p,
            b,
            rate_i,
            kappa,
            dpsi_kappa,
            ddpsi_kappa,
            sigma2_cond,
            v_speed,
        })
    }

    /// Log-Laplace transform of the transformed one-particle system:
    /// `psi(lambda) = (theta^2 lambda / 2 - 1)(lambda - 1)`.
    pub fn psi(&self, lambda: T) -> T {
        (self.theta * self.theta * lambda / c(2.0) - T::one()) * (lambda - T::one())
    }

    /// Optimal space-time curve `F_t(r) = t f(r/t)` with
    /// `f(l) = x - 1{a + l <= 1} sqrt(2(1-l)(1-l-a))`.
    pub fn curve_f(&self, t: T, r: T) -> Result<T> {
        self.check_time(t, r)?;
        if t == T::zero() {
            return Ok(T::zero());
        }
        let l = r / t;
        let one = T::one();
        let f = if self.a + l <= one {
            self.x - (c::<T>(2.0) * (one - l) * (one - l - self.a)).sqrt()
        } else {
            self.x
        };
        Ok(t * f)
    }

    /// Tangent line to the curve at `(pt, bpt)`:
    /// `L_t(r) = (theta^2/2 + 1)(r - pt)/theta + b p t`.
    pub fn line_l(&self, t: T, r: T) -> Result<T> {
        self.check_time(t, r)?;
        let s = self.p * t;
        Ok((self.theta * self.theta / c(2.0) + T::one()) * (r - s) / self.theta + self.b * s)
    }

    /// Slope of the tangent line, `(theta^2/2 + 1)/theta`.
    pub fn line_slope(&self) -> T {
        (self.theta * self.theta / c(2.0) + T::one()) / self.theta
    }

    /// Time fraction of the horizon: `s = p t`.
    pub fn s(&self, t: T) -> T {
        self.p * t
    }

    /// Shifted first-passage level for the V process: `-psi'(kappa) p t + z`.
    pub fn v_level(&self, t: T, z: T) -> T {
        -self.dpsi_kappa * self.p * t + z
    }

    /// The constant `C_star(x, a)` of the precise large deviation estimate,
    /// given an externally estimated martingale tail constant `c_w`.
    pub fn c_star(&self, c_w: T) -> T {
        let pref = self.sigma2_cond.sqrt();
        let base = self.theta * (c::<T>(2.0) * c(std::f64::consts::PI) * (T::one() - self.p)).sqrt();
        pref * c_w / base.powf(self.kappa)
    }

    /// Leading-order prediction of
    /// `P(L_t(xt) >= y e^{at}/sqrt(t)) ~ C_star y^{-2/theta^2} e^{-I t}`.
    pub fn ldp_prediction(&self, t: T, y: T, c_w: T) -> T {
        self.c_star(c_w) * y.powf(-self.kappa) * (-self.rate_i * t).exp()
    }

    /// Alternative form for the unscaled threshold,
    /// `P(L_t(xt) >= y e^{at}) ~ C_star y^{-2/theta^2} t^{-1/theta^2} e^{-I t}`.
    /// Agrees with [`Self::ldp_prediction`] at `y -> y sqrt(t)`.
    pub fn ldp_prediction_unscaled(&self, t: T, y: T, c_w: T) -> T {
        self.c_star(c_w)
            * y.powf(-self.kappa)
            * t.powf(-T::one() / (self.theta * self.theta))
            * (-self.rate_i * t).exp()
    }

    fn check_time(&self, t: T, r: T) -> Result<()> {
        if r < T::zero() || r > t {
            return Err(Error::Range(format!(
                "r = {} outside [0, t = {}]",
                r.to_f64().unwrap_or(f64::NAN),
                t.to_f64().unwrap_or(f64::NAN)
            )));
        }
        Ok(())
    }
}

/// Leading-order expected level-set size
/// `E[L_t(xt)] ~ exp((1 - x^2/2) t) / (x sqrt(2 pi t))`.
pub fn expected_level_count<T: Float>(x: T, t: T) -> T {
    let one = T::one();
    ((one - x * x / c(2.0)) * t).exp() / (x * (c::<T>(2.0) * c::<T>(std::f64::consts::PI) * t).sqrt())
}
