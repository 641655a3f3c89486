//! The periodic corrugation pair `(Γ1, Γ2)`.
//!
//! The profile is the Kuiper ansatz
//! `(1 + ∂tΓ1, ∂tΓ2) = σ (cos(α cos t), sin(α cos t))` with `σ = √(1+s²)` and
//! `α = α(s)` fixed by `J0(α) = 1/σ`, which makes both integrands mean-free.
//! The `t`-integrals are evaluated through the Jacobi–Anger expansion
//!
//! ```text
//! Γ1 = σ Σ_{k≥1} (-1)^k J_{2k}(α) sin(2kt) / k
//! Γ2 = 2σ Σ_{k≥0} (-1)^k J_{2k+1}(α) sin((2k+1)t) / (2k+1)
//! ```
//!
//! so periodicity holds term by term.

use alloc::vec::Vec;
use num_traits::Float;

use crate::bessel::{self, J0_FIRST_ZERO};
use crate::error::{Error, Result};

/// Default amplitude bound.
pub const DELTA_STAR: f64 = 1.0;
/// Samples in the amplitude lookup table.
pub const AMPLITUDE_SAMPLES: usize = 1024;
/// Bessel orders kept in the series; `J_m(α(1)) < 1e-19` beyond this.
pub const SERIES_TERMS: usize = 26;
/// Bisection stopping width.
pub const BISECTION_TOL: f64 = 1e-13;

/// Solve `J0(α) = 1/√(1+s²)` on `[0, j_{0,1})` by bisection.
pub fn amplitude_bisect(s: f64) -> f64 {
    if s == 0.0 {
        return 0.0;
    }
    let sigma = (1.0 + s * s).sqrt();
    // 1 - 1/σ written without cancellation.
    let target = s * s / (sigma * (sigma + 1.0));
    let (mut lo, mut hi) = (0.0f64, J0_FIRST_ZERO);
    while hi - lo > BISECTION_TOL {
        let mid = 0.5 * (lo + hi);
        if bessel::one_minus_j0(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `dα/ds = s / (σ³ J1(α))`, with the limit `√2` at `s = 0`.
pub fn amplitude_slope(s: f64, alpha: f64) -> f64 {
    if s == 0.0 || alpha == 0.0 {
        return core::f64::consts::SQRT_2;
    }
    let sigma = (1.0 + s * s).sqrt();
    s / (sigma * sigma * sigma * bessel::j1(alpha))
}

/// Values and first partials needed by a corrugation step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GammaJet {
    pub g1: f64,
    pub g2: f64,
    pub dt1: f64,
    pub dt2: f64,
    pub ds1: f64,
    pub ds2: f64,
}

/// `∂t^k Γ` and optionally `∂s ∂t^k Γ` at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaPartials {
    pub t_order: usize,
    pub dt: [f64; 2],
    pub ds: Option<[f64; 2]>,
}

/// Immutable corrugation profile with a tabulated amplitude.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrugationProfile {
    delta_star: f64,
    alpha: Vec<f64>,
    slope: Vec<f64>,
    series_terms: usize,
}

impl Default for CorrugationProfile {
    fn default() -> Self {
        CorrugationProfile::new(DELTA_STAR).expect("default amplitude bound is admissible")
    }
}

impl CorrugationProfile {
    /// Tabulate `α` on `[0, delta_star]`.
    pub fn new(delta_star: f64) -> Result<Self> {
        if !(delta_star > 0.0 && delta_star.is_finite()) {
            return Err(Error::InvalidParameter(alloc::format!("amplitude bound {delta_star} must be positive")));
        }
        let step = delta_star / (AMPLITUDE_SAMPLES - 1) as f64;
        let mut alpha = Vec::with_capacity(AMPLITUDE_SAMPLES);
        let mut slope = Vec::with_capacity(AMPLITUDE_SAMPLES);
        for i in 0..AMPLITUDE_SAMPLES {
            let s = i as f64 * step;
            let a = amplitude_bisect(s);
            alpha.push(a);
            slope.push(amplitude_slope(s, a));
        }
        Ok(CorrugationProfile { delta_star, alpha, slope, series_terms: SERIES_TERMS })
    }

    pub fn delta_star(&self) -> f64 {
        self.delta_star
    }

    pub fn series_terms(&self) -> usize {
        self.series_terms
    }

    fn check(&self, s: f64) -> Result<()> {
        if !(0.0..=self.delta_star).contains(&s) {
            return Err(Error::AmplitudeOutOfDomain { value: s, limit: self.delta_star });
        }
        Ok(())
    }

    /// `α(s)` and `dα/ds` by cubic Hermite interpolation of the table.
    #[inline]
    fn lookup(&self, s: f64) -> (f64, f64) {
        let step = self.delta_star / (AMPLITUDE_SAMPLES - 1) as f64;
        let x = s / step;
        let i = (x.floor() as usize).min(AMPLITUDE_SAMPLES - 2);
        let t = x - i as f64;
        let (p0, p1) = (self.alpha[i], self.alpha[i + 1]);
        let (m0, m1) = (self.slope[i] * step, self.slope[i + 1] * step);
        let t2 = t * t;
        let t3 = t2 * t;
        let a = (2.0 * t3 - 3.0 * t2 + 1.0) * p0
            + (t3 - 2.0 * t2 + t) * m0
            + (-2.0 * t3 + 3.0 * t2) * p1
            + (t3 - t2) * m1;
        let da = ((6.0 * t2 - 6.0 * t) * p0
            + (3.0 * t2 - 4.0 * t + 1.0) * m0
            + (-6.0 * t2 + 6.0 * t) * p1
            + (3.0 * t2 - 2.0 * t) * m1)
            / step;
        (a, da)
    }

    /// `α(s)` from the table.
    pub fn amplitude(&self, s: f64) -> Result<f64> {
        self.check(s)?;
        Ok(self.lookup(s).0)
    }

    /// `(Γ1, Γ2)(s, t)`.
    pub fn gamma(&self, s: f64, t: f64) -> Result<(f64, f64)> {
        self.check(s)?;
        let j = self.jet_unchecked(s, t);
        Ok((j.g1, j.g2))
    }

    /// `∂t^k Γ` for `k <= 2`, plus `∂s ∂t^k Γ` when `with_s`.
    pub fn gamma_partials(&self, s: f64, t: f64, k: usize, with_s: bool) -> Result<GammaPartials> {
        if k > 2 {
            return Err(Error::UnsupportedOrder { order: k, max: 2 });
        }
        self.check(s)?;
        if k == 0 {
            let j = self.jet_unchecked(s, t);
            return Ok(GammaPartials { t_order: 0, dt: [j.g1, j.g2], ds: with_s.then_some([j.ds1, j.ds2]) });
        }
        let (alpha, da) = self.lookup(s);
        let sigma = (1.0 + s * s).sqrt();
        let dsigma = s / sigma;
        let (st, ct) = t.sin_cos();
        let phase = alpha * ct;
        let (sp, cp) = phase.sin_cos();
        let (dt, ds) = if k == 1 {
            let dt = [sigma * cp - 1.0, sigma * sp];
            let ds = [dsigma * cp - sigma * sp * ct * da, dsigma * sp + sigma * cp * ct * da];
            (dt, ds)
        } else {
            let dt = [sigma * alpha * st * sp, -sigma * alpha * st * cp];
            let lead = dsigma * alpha + sigma * da;
            let ds = [
                lead * st * sp + sigma * alpha * st * cp * ct * da,
                -lead * st * cp + sigma * alpha * st * sp * ct * da,
            ];
            (dt, ds)
        };
        Ok(GammaPartials { t_order: k, dt, ds: with_s.then_some(ds) })
    }

    /// Everything a step needs at `(s, t)`; `s` must already be in range.
    ///
    /// At `s = 0` all entries vanish except `∂sΓ2 = √2 sin t`.
    pub fn jet_unchecked(&self, s: f64, t: f64) -> GammaJet {
        let (st, ct) = t.sin_cos();
        if s == 0.0 {
            return GammaJet { ds2: core::f64::consts::SQRT_2 * st, ..GammaJet::default() };
        }
        let (alpha, da) = self.lookup(s);
        let sigma = (1.0 + s * s).sqrt();
        let dsigma = s / sigma;
        let mut jm = [0.0; SERIES_TERMS + 2];
        bessel::jn_sequence(alpha, &mut jm);

        // sin(mt) by the Chebyshev recurrence.
        let mut s_prev = 0.0;
        let mut s_cur = st;
        let two_c = 2.0 * ct;
        let (mut e_sum, mut e_dsum) = (0.0, 0.0);
        let (mut o_sum, mut o_dsum) = (0.0, 0.0);
        for m in 1..=self.series_terms {
            let djm = 0.5 * (jm[m - 1] - jm[m + 1]);
            if m % 2 == 0 {
                let k = m / 2;
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                e_sum += sign * jm[m] * s_cur / k as f64;
                e_dsum += sign * djm * s_cur / k as f64;
            } else {
                let k = (m - 1) / 2;
                let sign = if k % 2 == 0 { 2.0 } else { -2.0 };
                o_sum += sign * jm[m] * s_cur / m as f64;
                o_dsum += sign * djm * s_cur / m as f64;
            }
            let next = two_c * s_cur - s_prev;
            s_prev = s_cur;
            s_cur = next;
        }
        let (sp, cp) = (alpha * ct).sin_cos();
        GammaJet {
            g1: sigma * e_sum,
            g2: sigma * o_sum,
            dt1: sigma * cp - 1.0,
            dt2: sigma * sp,
            ds1: dsigma * e_sum + sigma * da * e_dsum,
            ds2: dsigma * o_sum + sigma * da * o_dsum,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_amplitude_gives_zero_profile() {
        let p = CorrugationProfile::default();
        assert_eq!(amplitude_bisect(0.0), 0.0);
        for t in [0.0, 0.7, 3.0, 5.5] {
            assert_eq!(p.gamma(0.0, t).unwrap(), (0.0, 0.0));
        }
    }

    #[test]
    fn table_matches_bisection() {
        let p = CorrugationProfile::default();
        for s in [0.0, 1e-3, 0.123_456, 0.3, 0.77, 1.0] {
            assert!((p.amplitude(s).unwrap() - amplitude_bisect(s)).abs() < 1e-12, "s = {s}");
        }
    }

    #[test]
    fn rejects_amplitude_outside_domain() {
        let p = CorrugationProfile::default();
        assert!(matches!(p.amplitude(1.01), Err(Error::AmplitudeOutOfDomain { .. })));
        assert!(p.gamma(-0.1, 0.0).is_err());
        assert!(matches!(p.gamma_partials(0.3, 0.0, 3, false), Err(Error::UnsupportedOrder { .. })));
    }

    #[test]
    fn jet_matches_partials() {
        let p = CorrugationProfile::default();
        let j = p.jet_unchecked(0.4, 1.3);
        let d1 = p.gamma_partials(0.4, 1.3, 1, true).unwrap();
        let d0 = p.gamma_partials(0.4, 1.3, 0, true).unwrap();
        assert!((j.dt1 - d1.dt[0]).abs() < 1e-15 && (j.dt2 - d1.dt[1]).abs() < 1e-15);
        assert_eq!(d0.ds.unwrap(), [j.ds1, j.ds2]);
    }
}
