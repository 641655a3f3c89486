//! Empirical calibration of the step and stage constants.
//!
//! The constants `c0`, `K0` and `M̄` exist by proof but carry no value. They
//! are measured here on a fixed suite (flat base, `n = 2`, three amplitude
//! shapes) and the frozen values in [`crate::convex`] must dominate the
//! measurements.

use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;

use crate::convex::{check_pinching, stage, step_unchecked, ImmersionJet, PrimitiveTerm, StepParams, C0};
use crate::corrugation::CorrugationProfile;
use crate::error::{Error, Result};
use crate::fields::{Grid, ScalarField};

use core::f64::consts::{FRAC_1_SQRT_2, PI};

/// Fixed calibration suite on the unit square.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSuite {
    pub grid: Grid,
    /// Peak amplitude of every shape.
    pub amplitude: f64,
    pub eps: f64,
    pub gamma: f64,
    pub m: f64,
    /// Derivative scale of the shapes; also `θ = θ̃`.
    pub theta: f64,
    /// Bisection steps per constant.
    pub iterations: usize,
}

impl Default for CalibrationSuite {
    fn default() -> Self {
        CalibrationSuite {
            grid: Grid::cube(2, 0.0, 1.0, 257).expect("unit grid"),
            amplitude: 0.5,
            eps: 0.5,
            gamma: 2.0,
            m: 12.0,
            theta: PI,
            iterations: 8,
        }
    }
}

impl CalibrationSuite {
    /// The three `(a, ν)` pairs: a ridge along `e1`, a bump along the
    /// diagonal and a sharper bump along `e2`. All vanish to first order on
    /// `x1 ∈ {0, 1}` and the bumps on the whole boundary, so the copied nodes
    /// carry no Jacobian jump. All meet the step bounds with `M = 12`,
    /// `θ = θ̃ = π`.
    pub fn shapes(&self) -> Vec<(ScalarField, [f64; 2])> {
        let a = self.amplitude;
        let s2 = |t: f64| (PI * t).sin().powi(2);
        vec![
            (ScalarField::from_fn(&self.grid, |x| a * s2(x[0])), [1.0, 0.0]),
            (ScalarField::from_fn(&self.grid, |x| a * s2(x[0]) * s2(x[1])), [FRAC_1_SQRT_2, FRAC_1_SQRT_2]),
            (ScalarField::from_fn(&self.grid, |x| a * s2(x[0]).powi(2) * s2(x[1])), [0.0, 1.0]),
        ]
    }
}

/// Measured constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    /// Smallest `c` with `λ = c (δ/ε)^{1/2} θ̃` keeping every suite step
    /// pinched in `[1/(2γ), 2γ]`.
    pub c0: f64,
    pub c1: f64,
    /// Smallest stage ratio whose stages strictly reduce the defect of the
    /// deficits `a² Id`; `None` when no resolvable ratio works.
    pub k0: Option<f64>,
    /// `max ‖v − u‖_j / (ε^{1/2} λ^{j−1})` over the suite at `c = C0`.
    pub m_bar: f64,
}

/// A failed construction counts as a failed trial; other errors propagate.
fn trial(r: Result<bool>) -> Result<bool> {
    match r {
        Err(e) if matches!(
            e.root(),
            Error::ShortnessViolation { .. } | Error::Precondition(_) | Error::AmplitudeOutOfDomain { .. } | Error::FrequencyCap { .. }
        ) =>
        {
            Ok(false)
        }
        r => r,
    }
}

fn bisect(mut lo: f64, mut hi: f64, iterations: usize, mut ok: impl FnMut(f64) -> Result<bool>) -> Result<Option<f64>> {
    let mut ok = move |x| trial(ok(x));
    if !ok(hi)? {
        return Ok(None);
    }
    if ok(lo)? {
        return Ok(Some(lo));
    }
    // Geometric bisection: the constants are scale parameters.
    for _ in 0..iterations {
        let mid = (lo * hi).sqrt();
        if ok(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Some(hi))
}

fn step_passes(suite: &CalibrationSuite, shapes: &[(ScalarField, [f64; 2])], c: f64, profile: &CorrugationProfile) -> Result<bool> {
    let u = ImmersionJet::flat(&suite.grid);
    let lambda = c * suite.theta;
    for (a, nu) in shapes {
        let r = step_unchecked(&u, a, nu, lambda, suite.gamma, profile)?;
        if check_pinching(&r.v.metric(), 0.5 / suite.gamma, 2.0 * suite.gamma).is_err() {
            return Ok(false);
        }
    }
    Ok(true)
}

fn stage_passes(suite: &CalibrationSuite, shapes: &[(ScalarField, [f64; 2])], k: f64, profile: &CorrugationProfile) -> Result<bool> {
    let grid = suite.grid;
    let n = grid.dim();
    let u = ImmersionJet::flat(&grid);
    let p = StepParams::new(suite.m, suite.gamma, suite.eps, suite.eps, suite.theta, suite.theta, 0.0);
    for (rho, _) in shapes {
        // ρ² Id along the coordinate axes: n steps, so the top frequency
        // θ K^n stays resolvable for larger K.
        let terms: Vec<PrimitiveTerm> = (0..n)
            .map(|d| {
                let mut e = vec![0.0; n];
                e[d] = 1.0;
                PrimitiveTerm { amplitude: rho.clone(), direction: e }
            })
            .collect();
        let r = stage(&u, &terms, &p, k, profile)?;
        if !(r.error_norm() < rho.max_abs().powi(2)) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Run the suite and measure `c0`, `c1 = c0`, `K0` and `M̄`.
///
/// `c0` is searched in `[1/16, 16]`; `K0` in `[1, k_max]` where `k_max`
/// keeps the last stage frequency below the grid's cap.
pub fn calibrate(suite: &CalibrationSuite, profile: &CorrugationProfile) -> Result<Calibration> {
    let shapes = suite.shapes();
    let c0 = bisect(1.0 / 16.0, 16.0, suite.iterations, |c| step_passes(suite, &shapes, c, profile))?.unwrap_or(f64::INFINITY);

    let u = ImmersionJet::flat(&suite.grid);
    let lambda = C0 * suite.theta;
    let mut m_bar = 0.0f64;
    for (a, nu) in &shapes {
        let r = step_unchecked(&u, a, nu, lambda, suite.gamma, profile)?;
        for (j, d) in r.diagnostics.displacement.iter().enumerate() {
            m_bar = m_bar.max(d / (suite.eps.sqrt() * lambda.powi(j as i32 - 1)));
        }
    }

    let cap = crate::convex::frequency_cap(&suite.grid);
    let k_max = (cap / suite.theta).powf(1.0 / suite.grid.dim() as f64);
    let k0 = bisect(1.0, k_max, suite.iterations, |k| stage_passes(suite, &shapes, k, profile))?;
    Ok(Calibration { c0, c1: c0, k0, m_bar })
}
