//! Corrugated steps, stages and the conformal-deficit stage.
//!
//! Immersions are carried as [`ImmersionJet`]s: the sampled map together with
//! its Jacobian. A step updates the Jacobian with the exact chain-rule
//! expression `∇v = ∇u + A + E1 + E2`, where only the slowly varying factors
//! (frames and amplitude) are differentiated numerically. Differencing the
//! corrugated map itself would alias at the frequencies of interest.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;

use crate::corrugation::CorrugationProfile;
use crate::decomposition::DirectionFrame;
use crate::error::{Error, Result};
use crate::fields::{
    gradient_with, holder_norm, mollify, mollify_with, pullback_from_jacobian, Extension, Grid, ImmersionField,
    JacobianField, SampledField, ScalarField, Stencil, SymTensorField, VectorField,
};
use crate::linalg::{self, sym_idx, sym_len, MAX_AMBIENT, MAX_DIM, MAX_SYM};

// The frozen constants dominate the values measured by
// `calibration::calibrate` on its default suite.

/// Frequency threshold constant of the step condition `λ ≥ c0 (δ/ε)^{1/2} θ̃`.
pub const C0: f64 = 1.0;
/// Stage condition `K ≥ c1 θ̃/θ`; `c1 = c0` makes the first step satisfy
/// the step condition and every later one reduces to `K ≥ c0`.
pub const C1: f64 = C0;
/// Smallest ratio accepted by [`add_conformal_deficit`].
pub const K0: f64 = 5.0;
/// Step constant in `‖v − u‖_j ≤ M̄ ε^{1/2} λ^{j−1}`.
pub const M_BAR: f64 = 5.0;
/// Support radius of the step mollifier in units of `1/λ`.
pub const MOLLIFIER_RATIO: f64 = 0.25;
/// Fewest samples per corrugation period.
pub const SAMPLES_PER_PERIOD: f64 = 8.0;

/// Largest frequency the grid resolves with [`SAMPLES_PER_PERIOD`].
pub fn frequency_cap(grid: &Grid) -> f64 {
    2.0 * core::f64::consts::PI / (SAMPLES_PER_PERIOD * grid.max_spacing())
}

/// An immersion sampled together with its Jacobian.
#[derive(Debug, Clone, PartialEq)]
pub struct ImmersionJet {
    pub value: ImmersionField,
    pub jacobian: JacobianField,
}

impl ImmersionJet {
    /// Jet with the Jacobian taken by fourth-order differences.
    pub fn from_field(value: ImmersionField) -> Self {
        let jacobian = gradient_with(&value, Stencil::Fourth);
        ImmersionJet { value, jacobian }
    }

    pub fn from_parts(value: ImmersionField, jacobian: JacobianField) -> Result<Self> {
        if value.grid != jacobian.grid || jacobian.rows != value.grid.dim() + 1 {
            return Err(Error::ShapeMismatch("jet value and Jacobian disagree".into()));
        }
        Ok(ImmersionJet { value, jacobian })
    }

    /// `(x1, …, xn, 0)`.
    pub fn flat(grid: &Grid) -> Self {
        let n = grid.dim();
        let mut j = JacobianField::zeros(grid, n + 1);
        for idx in 0..grid.len() {
            for a in 0..n {
                j.values[idx * (n + 1) * n + a * n + a] = 1.0;
            }
        }
        ImmersionJet { value: ImmersionField::flat(grid), jacobian: j }
    }

    pub fn grid(&self) -> &Grid {
        &self.value.grid
    }

    /// `∇uᵀ∇u` from the carried Jacobian.
    pub fn metric(&self) -> SymTensorField {
        pullback_from_jacobian(&self.jacobian)
    }

    /// Largest second derivative, `max |∂_a ∂_b u|`.
    pub fn second_derivative_norm(&self) -> f64 {
        jacobian_derivative_norm(&self.jacobian)
    }
}

/// `max_{node, a, b} |∂_b J_{·a}|` with fourth-order differences.
pub fn jacobian_derivative_norm(j: &JacobianField) -> f64 {
    jacobian_derivative_norm_on(j, None)
}

/// [`jacobian_derivative_norm`] over the nodes where `mask` is set.
pub fn jacobian_derivative_norm_on(j: &JacobianField, mask: Option<&[bool]>) -> f64 {
    let n = j.grid.dim();
    let rows = j.rows;
    let d = gradient_with(j, Stencil::Fourth);
    let c = rows * n * n;
    let mut best = 0.0f64;
    for (idx, node) in d.values.chunks_exact(c).enumerate() {
        if mask.is_some_and(|m| !m[idx]) {
            continue;
        }
        for a in 0..n {
            for b in 0..n {
                let s: f64 = (0..rows).map(|r| node[(r * n + a) * n + b].powi(2)).sum();
                best = best.max(s);
            }
        }
    }
    best.sqrt()
}

/// Constants of a single step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepParams {
    pub m: f64,
    pub gamma: f64,
    pub eps: f64,
    pub delta: f64,
    pub theta: f64,
    pub theta_tilde: f64,
    pub lambda: f64,
    pub c0: f64,
    /// Enforce the derivative bounds on the input. Structural conditions
    /// (pinching, radius, frequency cap) are always enforced.
    pub enforce_bounds: bool,
}

impl StepParams {
    /// Parameters with `c0 = C0`; `lambda` is set by the caller or a stage.
    pub fn new(m: f64, gamma: f64, eps: f64, delta: f64, theta: f64, theta_tilde: f64, lambda: f64) -> Self {
        StepParams { m, gamma, eps, delta, theta, theta_tilde, lambda, c0: C0, enforce_bounds: true }
    }

    /// Scalar inequalities among the constants.
    pub fn validate(&self) -> Result<()> {
        let fail = |s: String| Err(Error::Precondition(s));
        if !(self.m >= 1.0 && self.gamma >= 1.0) {
            return fail(format!("need M, γ ≥ 1 (M = {}, γ = {})", self.m, self.gamma));
        }
        if !(self.eps > 0.0 && self.eps <= self.delta && self.delta <= 1.0) {
            return fail(format!("need 0 < ε ≤ δ ≤ 1 (ε = {}, δ = {})", self.eps, self.delta));
        }
        if !(self.theta > 0.0 && self.theta <= self.theta_tilde) {
            return fail(format!("need 0 < θ ≤ θ̃ (θ = {}, θ̃ = {})", self.theta, self.theta_tilde));
        }
        let need = self.c0 * (self.delta / self.eps).sqrt() * self.theta_tilde;
        if !(self.lambda >= need) {
            return fail(format!("frequency condition λ ≥ c0 (δ/ε)^1/2 θ̃ fails: λ = {}, bound = {need}", self.lambda));
        }
        Ok(())
    }
}

/// The two normal-ish frames of a step at every node.
#[derive(Debug, Clone, PartialEq)]
pub struct Frames {
    /// `ξ = ξ̃ / |ξ̃|²` with `ξ̃ = ∇ũ (∇ũᵀ∇ũ)^{-1} ν`.
    pub xi: VectorField,
    /// `ζ = ζ̃ / (|ξ̃| |ζ̃|)` with `ζ̃` the generalised cross product of the columns.
    pub zeta: VectorField,
    pub xi_tilde_norm: ScalarField,
}

/// Frames of an immersion (Jacobian by fourth-order differences).
pub fn compute_frames(u: &ImmersionField, nu: &[f64], gamma: f64) -> Result<Frames> {
    frames_from_jacobian(&gradient_with(u, Stencil::Fourth), nu, gamma)
}

/// Frames from a Jacobian field; the metric must lie in `[1/(2γ), 2γ]`.
pub fn frames_from_jacobian(j: &JacobianField, nu: &[f64], gamma: f64) -> Result<Frames> {
    frames_on(j, nu, gamma, None)
}

/// [`frames_from_jacobian`] with the pinching checked only where `mask` is set.
pub fn frames_on(j: &JacobianField, nu: &[f64], gamma: f64, mask: Option<&[bool]>) -> Result<Frames> {
    let grid = j.grid;
    let n = grid.dim();
    let q = n + 1;
    if nu.len() != n || j.rows != q {
        return Err(Error::ShapeMismatch("direction or Jacobian has the wrong size".into()));
    }
    let mut xi = VectorField::zeros(&grid, q);
    let mut zeta = VectorField::zeros(&grid, q);
    let mut norm = ScalarField::zeros(&grid);
    let (lo, hi) = (0.5 / gamma, 2.0 * gamma);
    for idx in 0..grid.len() {
        let jm = j.matrix(idx);
        let f = node_frame(n, jm, nu);
        let checked = mask.is_none_or(|m| m[idx]);
        if checked && !(f.eig.0 >= lo && f.eig.1 <= hi) {
            let value = if f.eig.0 < lo { f.eig.0 } else { f.eig.1 };
            return Err(Error::ShortnessViolation { node: idx, value, lo, hi });
        }
        xi.values[idx * q..(idx + 1) * q].copy_from_slice(&f.xi[..q]);
        zeta.values[idx * q..(idx + 1) * q].copy_from_slice(&f.zeta[..q]);
        norm.values[idx] = f.xi_tilde_norm;
    }
    Ok(Frames { xi, zeta, xi_tilde_norm: norm })
}

struct NodeFrame {
    xi: [f64; MAX_AMBIENT],
    zeta: [f64; MAX_AMBIENT],
    xi_tilde_norm: f64,
    eig: (f64, f64),
}

fn node_frame(n: usize, jm: &[f64], nu: &[f64]) -> NodeFrame {
    let q = n + 1;
    let mut g = [0.0; MAX_SYM];
    linalg::gram(q, n, jm, &mut g);
    let eig = linalg::sym_extreme_eigenvalues(n, &g);
    let mut dense = [0.0; MAX_DIM * MAX_DIM];
    linalg::sym_unpack(n, &g, &mut dense);
    let mut w = [0.0; MAX_DIM];
    w[..n].copy_from_slice(nu);
    linalg::solve_in_place(n, &mut dense[..n * n], &mut w[..n]);
    let mut xt = [0.0; MAX_AMBIENT];
    for r in 0..q {
        xt[r] = (0..n).map(|a| jm[r * n + a] * w[a]).sum();
    }
    let xn2: f64 = xt[..q].iter().map(|x| x * x).sum();
    let xn = xn2.sqrt();
    let mut zt = [0.0; MAX_AMBIENT];
    let mut minor = [0.0; MAX_DIM * MAX_DIM];
    for i in 0..q {
        let mut k = 0;
        for r in (0..q).filter(|&r| r != i) {
            minor[k * n..(k + 1) * n].copy_from_slice(&jm[r * n..(r + 1) * n]);
            k += 1;
        }
        let sign = if (i + n) % 2 == 0 { 1.0 } else { -1.0 };
        zt[i] = sign * linalg::det(n, &minor[..n * n]);
    }
    let zn: f64 = zt[..q].iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut out = NodeFrame { xi: [0.0; MAX_AMBIENT], zeta: [0.0; MAX_AMBIENT], xi_tilde_norm: xn, eig };
    for r in 0..q {
        out.xi[r] = xt[r] / xn2;
        out.zeta[r] = zt[r] / (xn * zn);
    }
    out
}

/// Per-step norms; matrix norms are Frobenius, maxima over nodes.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepDiagnostics {
    pub index: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub amplitude_max: f64,
    pub a_norm: f64,
    pub e1_norm: f64,
    pub e2_1_norm: f64,
    pub e2_2_norm: f64,
    /// `max |∇vᵀ∇v − ∇uᵀ∇u − a² ν⊗ν|` (operator norm).
    pub residual: f64,
    /// `‖v − u‖_j` for `j = 0, 1, 2`.
    pub displacement: [f64; 3],
    /// Second-derivative size of the output.
    pub v_second: f64,
    pub below_resolution: bool,
    pub changed_nodes: usize,
}

impl StepDiagnostics {
    pub const CSV_HEADER: &'static str = "step,lambda,gamma,amplitude_max,A,E1,E2_1,E2_2,residual,dv0,dv1,dv2,v2,below_resolution,changed_nodes";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{},{}",
            self.index,
            self.lambda,
            self.gamma,
            self.amplitude_max,
            self.a_norm,
            self.e1_norm,
            self.e2_1_norm,
            self.e2_2_norm,
            self.residual,
            self.displacement[0],
            self.displacement[1],
            self.displacement[2],
            self.v_second,
            self.below_resolution,
            self.changed_nodes
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub v: ImmersionJet,
    pub diagnostics: StepDiagnostics,
}

/// Add the primitive metric `a² ν⊗ν` to `∇uᵀ∇u` up to a controlled error.
///
/// `v = u + (Γ1(ã, λ x·ν) ξ + Γ2(ã, λ x·ν) ζ)/λ` with the frames of `u`
/// mollified at scale `MOLLIFIER_RATIO/λ`. Nodes with `a = 0` are copied unchanged.
pub fn step(
    u: &ImmersionJet,
    a: &ScalarField,
    nu: &[f64],
    p: &StepParams,
    profile: &CorrugationProfile,
) -> Result<StepResult> {
    let grid = *u.grid();
    let n = grid.dim();
    check_direction(nu, n)?;
    if a.grid != grid {
        return Err(Error::ShapeMismatch("amplitude and immersion live on different grids".into()));
    }
    p.validate()?;
    let cap = frequency_cap(&grid);
    if p.lambda > cap {
        return Err(Error::FrequencyCap { lambda: p.lambda, cap });
    }
    if let Some(i) = a.values.iter().position(|&v| !(v >= 0.0)) {
        return Err(Error::InvalidData(format!("amplitude must be nonnegative, found {} at node {i}", a.values[i])));
    }
    // The construction reads u only on supp a widened by the mollifier and
    // the difference stencils, so the conditions on u are checked there.
    let reach = step_reach(&grid, p.lambda);
    let support: Vec<bool> = a.values.iter().map(|&v| v != 0.0).collect();
    let mask = dilate(&grid, &support, &reach);
    check_pinching_on(&u.metric(), 1.0 / p.gamma, p.gamma, Some(&mask))?;
    if !p.enforce_bounds {
        return step_unchecked(u, a, nu, p.lambda, p.gamma, profile);
    }
    let u2 = jacobian_derivative_norm_on(&u.jacobian, Some(&mask));
    let bound = p.m * p.delta.sqrt() * p.theta;
    if u2 > bound {
        return Err(Error::Precondition(format!("‖u‖_2 = {u2} exceeds M δ^1/2 θ = {bound}")));
    }
    let bounds = [
        (0.5 * p.gamma * p.eps).sqrt(),
        p.m * p.eps.sqrt() * p.theta,
        p.m * p.eps.sqrt() * p.theta * p.theta_tilde,
    ];
    for (j, b) in bounds.iter().enumerate() {
        let norm = holder_norm(a, j, 0.0)?;
        if norm > *b {
            return Err(Error::Precondition(format!("‖a‖_{j} = {norm} exceeds {b}")));
        }
    }
    step_unchecked(u, a, nu, p.lambda, p.gamma, profile)
}

/// Nodes per axis within which a step at frequency `lambda` reads its input.
fn step_reach(grid: &Grid, lambda: f64) -> [usize; MAX_DIM] {
    let mut r = [0; MAX_DIM];
    for (axis, h) in grid.spacing().iter().enumerate() {
        r[axis] = (MOLLIFIER_RATIO / (lambda * h)).floor() as usize + 4;
    }
    r
}

/// Box dilation of a node mask by `radius[axis]` nodes along each axis.
pub fn dilate(grid: &Grid, mask: &[bool], radius: &[usize]) -> Vec<bool> {
    let mut cur = mask.to_vec();
    for axis in 0..grid.dim() {
        let s = grid.strides()[axis];
        let m = grid.resolution()[axis];
        let r = radius[axis];
        let mut next = vec![false; cur.len()];
        for idx in 0..grid.len() {
            if !cur[idx] {
                continue;
            }
            let k = (idx / s) % m;
            let lo = k.saturating_sub(r);
            let hi = (k + r).min(m - 1);
            for kk in lo..=hi {
                next[idx - k * s + kk * s] = true;
            }
        }
        cur = next;
    }
    cur
}

fn check_direction(nu: &[f64], n: usize) -> Result<()> {
    if nu.len() != n {
        return Err(Error::ShapeMismatch(format!("direction has {} entries, expected {n}", nu.len())));
    }
    let len: f64 = nu.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (len - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidParameter(format!("direction has length {len}")));
    }
    Ok(())
}

/// Every eigenvalue of `g` within `[lo, hi]`.
pub fn check_pinching(g: &SymTensorField, lo: f64, hi: f64) -> Result<()> {
    check_pinching_on(g, lo, hi, None)
}

/// [`check_pinching`] restricted to the nodes where `mask` is set.
pub fn check_pinching_on(g: &SymTensorField, lo: f64, hi: f64, mask: Option<&[bool]>) -> Result<()> {
    let n = g.grid.dim();
    for idx in 0..g.grid.len() {
        if mask.is_some_and(|m| !m[idx]) {
            continue;
        }
        let (a, b) = linalg::sym_extreme_eigenvalues(n, g.at(idx));
        if !(a >= lo && b <= hi) {
            let value = if a < lo { a } else { b };
            return Err(Error::ShortnessViolation { node: idx, value, lo, hi });
        }
    }
    Ok(())
}

/// The step construction without the analytic preconditions.
///
/// Still enforces the amplitude domain of the profile and the post-step
/// pinching `[1/(2γ), 2γ]`.
pub fn step_unchecked(
    u: &ImmersionJet,
    a: &ScalarField,
    nu: &[f64],
    lambda: f64,
    gamma: f64,
    profile: &CorrugationProfile,
) -> Result<StepResult> {
    let grid = *u.grid();
    let n = grid.dim();
    let q = n + 1;
    let active: Vec<usize> = (0..grid.len()).filter(|&i| a.values[i] != 0.0).collect();
    let mut diag = StepDiagnostics { lambda, gamma, ..Default::default() };
    diag.changed_nodes = active.len();
    if active.is_empty() {
        diag.v_second = u.second_derivative_norm();
        return Ok(StepResult { v: u.clone(), diagnostics: diag });
    }
    let smooth = mollify_with(&u.jacobian, MOLLIFIER_RATIO / lambda, Extension::Even);
    diag.below_resolution = smooth.below_resolution;
    let mut near = vec![false; grid.len()];
    for &i in &active {
        near[i] = true;
    }
    let near = dilate(&grid, &near, &[2; MAX_DIM]);
    let frames = frames_on(&smooth.field, nu, gamma, Some(&near))?;
    let mut at = ScalarField::zeros(&grid);
    for &i in &active {
        at.values[i] = frames.xi_tilde_norm.values[i] * a.values[i];
    }
    let ds = profile.delta_star();
    for &i in &active {
        if at.values[i] > ds {
            return Err(Error::AmplitudeOutOfDomain { value: at.values[i], limit: ds });
        }
    }
    diag.amplitude_max = at.max_abs();
    let dat = gradient_with(&at, Stencil::Fourth);
    let dxi = gradient_with(&frames.xi, Stencil::Fourth);
    let dzeta = gradient_with(&frames.zeta, Stencil::Fourth);

    let mut v = u.clone();
    let (mut na, mut ne1, mut ne21, mut ne22) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut resid = 0.0f64;
    let mut dv0 = 0.0f64;
    let mut dv1 = 0.0f64;
    let inv = 1.0 / lambda;
    let (plo, phi) = (0.5 / gamma, 2.0 * gamma);
    let qn = q * n;
    for &i in &active {
        let x = grid.point(i);
        let t = lambda * (0..n).map(|k| x[k] * nu[k]).sum::<f64>();
        let jet = profile.jet_unchecked(at.values[i], t);
        let xi = &frames.xi.values[i * q..(i + 1) * q];
        let ze = &frames.zeta.values[i * q..(i + 1) * q];
        let ga = &dat.values[i * n..(i + 1) * n];
        let gxi = &dxi.values[i * qn..(i + 1) * qn];
        let gze = &dzeta.values[i * qn..(i + 1) * qn];
        let mut d0 = 0.0;
        for r in 0..q {
            let d = inv * (jet.g1 * xi[r] + jet.g2 * ze[r]);
            v.value.values[i * q + r] += d;
            d0 += d * d;
        }
        dv0 = dv0.max(d0.sqrt());
        let ju = &u.jacobian.values[i * qn..(i + 1) * qn];
        let jv = &mut v.jacobian.values[i * qn..(i + 1) * qn];
        let (mut sa, mut s1, mut s21, mut s22, mut sd) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for r in 0..q {
            for c in 0..n {
                let ta = (jet.dt1 * xi[r] + jet.dt2 * ze[r]) * nu[c];
                let t1 = inv * (jet.g1 * gxi[r * n + c] + jet.g2 * gze[r * n + c]);
                let t21 = inv * jet.ds1 * xi[r] * ga[c];
                let t22 = inv * jet.ds2 * ze[r] * ga[c];
                let d = ta + t1 + t21 + t22;
                jv[r * n + c] = ju[r * n + c] + d;
                sa += ta * ta;
                s1 += t1 * t1;
                s21 += t21 * t21;
                s22 += t22 * t22;
                sd += d * d;
            }
        }
        na = na.max(sa);
        ne1 = ne1.max(s1);
        ne21 = ne21.max(s21);
        ne22 = ne22.max(s22);
        dv1 = dv1.max(sd);
        let mut gu = [0.0; MAX_SYM];
        let mut gv = [0.0; MAX_SYM];
        linalg::gram(q, n, ju, &mut gu);
        linalg::gram(q, n, jv, &mut gv);
        let (lo, hi) = linalg::sym_extreme_eigenvalues(n, &gv);
        if !(lo >= plo && hi <= phi) {
            let value = if lo < plo { lo } else { hi };
            return Err(Error::ShortnessViolation { node: i, value, lo: plo, hi: phi });
        }
        let a2 = a.values[i] * a.values[i];
        let mut r = [0.0; MAX_SYM];
        for b in 0..n {
            for c in b..n {
                let e = sym_idx(n, b, c);
                r[e] = gv[e] - gu[e] - a2 * nu[b] * nu[c];
            }
        }
        resid = resid.max(linalg::sym_op_norm(n, &r));
    }
    let ddj = JacobianField { grid, rows: q, values: v.jacobian.values.iter().zip(&u.jacobian.values).map(|(x, y)| x - y).collect() };
    diag.a_norm = na.sqrt();
    diag.e1_norm = ne1.sqrt();
    diag.e2_1_norm = ne21.sqrt();
    diag.e2_2_norm = ne22.sqrt();
    diag.residual = resid;
    let dv1 = dv1.sqrt();
    let dv2 = jacobian_derivative_norm(&ddj);
    diag.displacement = [dv0, dv0 + dv1, dv0 + dv1 + dv2];
    diag.v_second = v.second_derivative_norm();
    Ok(StepResult { v, diagnostics: diag })
}

/// One primitive term `a² ν⊗ν` of a stage.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveTerm {
    pub amplitude: ScalarField,
    pub direction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageResult {
    pub v: ImmersionJet,
    /// `∇vᵀ∇v − ∇uᵀ∇u − (added deficit)`.
    pub error: SymTensorField,
    pub steps: Vec<StepDiagnostics>,
    /// `‖v − u‖_j` for `j = 0, 1, 2`.
    pub displacement: [f64; 3],
    pub v_second: f64,
    pub frequencies: Vec<f64>,
}

impl StageResult {
    pub fn error_norm(&self) -> f64 {
        self.error.max_op_norm()
    }
}

/// Frequencies `λ_k = λ_1 K^{k−1}` with `λ_1 = θ K (δ/ε)^{1/2}`.
pub fn stage_frequencies(p: &StepParams, k: f64, steps: usize) -> Vec<f64> {
    let l1 = p.theta * k * (p.delta / p.eps).sqrt();
    (0..steps).map(|i| l1 * k.powi(i as i32)).collect()
}

/// Run one step per nonzero term with geometrically growing frequencies.
///
/// `p.lambda` is ignored. Terms whose amplitude vanishes identically are
/// skipped and do not consume a frequency.
pub fn stage(
    u: &ImmersionJet,
    terms: &[PrimitiveTerm],
    p: &StepParams,
    k: f64,
    profile: &CorrugationProfile,
) -> Result<StageResult> {
    let active: Vec<&PrimitiveTerm> = terms.iter().filter(|t| t.amplitude.values.iter().any(|&v| v != 0.0)).collect();
    let freqs = stage_frequencies(p, k, active.len());
    if !active.is_empty() && !(k >= C1.max(p.c0) * p.theta_tilde / p.theta) {
        return Err(Error::Precondition(format!("stage ratio K = {k} below c1 θ̃/θ")));
    }
    let mut cur = u.clone();
    let mut steps = Vec::with_capacity(active.len());
    let mut gamma = p.gamma;
    for (s, term) in active.iter().enumerate() {
        let sp = if s == 0 {
            StepParams { lambda: freqs[0], ..*p }
        } else {
            StepParams {
                m: p.m + 2.0 * M_BAR,
                gamma,
                eps: p.eps,
                delta: p.eps,
                theta: freqs[s - 1],
                theta_tilde: freqs[s - 1],
                lambda: freqs[s],
                c0: p.c0,
                enforce_bounds: p.enforce_bounds,
            }
        };
        let r = step(&cur, &term.amplitude, &term.direction, &sp, profile)
            .map_err(|e| Error::InStep { step: s + 1, source: alloc::boxed::Box::new(e) })?;
        let mut d = r.diagnostics;
        d.index = s + 1;
        steps.push(d);
        cur = r.v;
        gamma *= 2.0;
    }
    let error = stage_error(u, &cur, terms);
    let grid = *u.grid();
    let q = grid.dim() + 1;
    let dv0 = cur.value.values.chunks_exact(q).zip(u.value.values.chunks_exact(q))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let dj = JacobianField { grid, rows: q, values: cur.jacobian.values.iter().zip(&u.jacobian.values).map(|(x, y)| x - y).collect() };
    let dv1 = dj.max_norm();
    let dv2 = jacobian_derivative_norm(&dj);
    let v_second = steps.last().map(|d| d.v_second).unwrap_or_else(|| u.second_derivative_norm());
    Ok(StageResult { v: cur, error, steps, displacement: [dv0, dv0 + dv1, dv0 + dv1 + dv2], v_second, frequencies: freqs })
}

/// `∇vᵀ∇v − ∇uᵀ∇u − Σ a_k² ν_k⊗ν_k`.
fn stage_error(u: &ImmersionJet, v: &ImmersionJet, terms: &[PrimitiveTerm]) -> SymTensorField {
    let gu = u.metric();
    let gv = v.metric();
    let n = u.grid().dim();
    let m = sym_len(n);
    let mut e = gv.sub(&gu);
    for t in terms {
        for (idx, &a) in t.amplitude.values.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for b in 0..n {
                for c in b..n {
                    e.values[idx * m + sym_idx(n, b, c)] -= a * a * t.direction[b] * t.direction[c];
                }
            }
        }
    }
    e
}

/// Add `ρ²(Id + G)` to the metric of `u` by one stage.
///
/// `G` is mollified at scale `1/θ` before decomposing `Id + G̃` in `frame`;
/// `ρ` is used as given so that `v = u` exactly where `ρ = 0`. The returned
/// error is `∇vᵀ∇v − ∇uᵀ∇u − ρ²(Id + G)` and so includes `ρ²(G̃ − G)`.
pub fn add_conformal_deficit(
    u: &ImmersionJet,
    rho: &ScalarField,
    g: &SymTensorField,
    p: &StepParams,
    k: f64,
    frame: &DirectionFrame,
    profile: &CorrugationProfile,
) -> Result<StageResult> {
    let grid = *u.grid();
    let n = grid.dim();
    let m = sym_len(n);
    if rho.grid != grid || g.grid != grid || frame.dim() != n {
        return Err(Error::ShapeMismatch("deficit fields do not match the immersion".into()));
    }
    if !(k >= K0) {
        return Err(Error::Precondition(format!("K = {k} below K0 = {K0}")));
    }
    let rho0 = rho.max_abs();
    let rho_bound = (0.5 * p.gamma * p.eps).sqrt();
    if rho0 > rho_bound {
        return Err(Error::Precondition(format!("‖ρ‖_0 = {rho0} exceeds (γε/2)^1/2 = {rho_bound}")));
    }
    let rho1 = holder_norm(rho, 1, 0.0)?;
    if p.enforce_bounds && rho1 > p.m * p.eps.sqrt() * p.theta {
        return Err(Error::Precondition(format!("‖ρ‖_1 = {rho1} exceeds M ε^1/2 θ")));
    }
    let g_ops = g.op_norms();
    if let Some((node, &value)) = g_ops.values.iter().enumerate().find(|(i, &v)| rho.values[*i] != 0.0 && v > frame.r0()) {
        return Err(Error::OutOfRadius { index: node, value });
    }
    let g1 = holder_norm(g, 1, 0.0)?;
    if p.enforce_bounds && g1 > p.m * p.theta {
        return Err(Error::Precondition(format!("‖G‖_1 = {g1} exceeds M θ")));
    }
    let gs = mollify(g, 1.0 / p.theta).field;
    let mut amps = vec![ScalarField::zeros(&grid); m];
    let mut p_id = [0.0; MAX_SYM];
    for idx in 0..grid.len() {
        let r = rho.values[idx];
        if r == 0.0 {
            continue;
        }
        for (e, x) in p_id.iter_mut().enumerate().take(m) {
            *x = gs.values[idx * m + e];
        }
        for d in 0..n {
            p_id[sym_idx(n, d, d)] += 1.0;
        }
        let c = frame.coefficients(&p_id);
        for (kk, amp) in amps.iter_mut().enumerate() {
            if c[kk] < -1e-14 {
                return Err(Error::OutOfRadius { index: idx, value: c[kk] });
            }
            amp.values[idx] = r * c[kk].max(0.0).sqrt();
        }
    }
    let terms: Vec<PrimitiveTerm> = amps
        .into_iter()
        .enumerate()
        .map(|(kk, amplitude)| PrimitiveTerm { amplitude, direction: frame.direction(kk).to_vec() })
        .collect();
    let sp = StepParams { gamma: 2.0 * n as f64 * p.gamma, theta_tilde: k / K0 * p.theta, ..*p };
    let mut res = stage(u, &terms, &sp, k, profile)?;
    // The terms add ρ²(Id + G̃); report against ρ²(Id + G).
    for idx in 0..grid.len() {
        let r2 = rho.values[idx] * rho.values[idx];
        if r2 == 0.0 {
            continue;
        }
        for e in 0..m {
            res.error.values[idx * m + e] += r2 * (gs.values[idx * m + e] - g.values[idx * m + e]);
        }
    }
    Ok(res)
}
