//! Inductive scheme from an adapted short immersion towards an isometry.
//!
//! Each iterate cuts the deficit off where `ρ_q ≥ (7/4) ε_{q+1}^{1/2}`,
//! hands the part above `ε_{q+1} Id` to one conformal-deficit stage and keeps
//! the rest, so the deficit is driven down level set by level set while
//! nodes where `ρ_q` is small, and in particular the boundary, are never
//! touched.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;

use crate::convex::{add_conformal_deficit, frequency_cap, stage_frequencies, StepDiagnostics, StepParams};
use crate::corrugation::CorrugationProfile;
use crate::decomposition::DirectionFrame;
use crate::error::{Error, Result};
use crate::extension::AdaptedShortState;
use crate::fields::{gradient_with, ScalarField, SampledField, Stencil, SymTensorField};
use crate::linalg::{self, sym_idx, sym_len, MAX_SYM};

/// Number of primitive directions `n(n+1)/2` for chart dimension `n`.
pub fn n_star(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Hölder exponent ceiling `1/(n(n+1)+1)` of the scheme.
pub fn alpha_limit(n: usize) -> f64 {
    1.0 / (2 * n_star(n) + 1) as f64
}

/// `ε_q = ε0 A^{−2aq}` and `θ_q = A^{(n*+a)q+3a}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub eps0: f64,
    pub a: f64,
    pub big_a: f64,
    pub alpha: f64,
    pub n: usize,
}

impl Schedule {
    /// Rejects `a ∉ (0, 1/2)`, `A ≤ 1` and `α ∉ [0, 1/(n(n+1)+1))`.
    pub fn new(eps0: f64, a: f64, big_a: f64, alpha: f64, n: usize) -> Result<Self> {
        let bad = |s: String| Err(Error::InvalidParameter(s));
        if !(a > 0.0 && a < 0.5) {
            return bad(format!("a = {a} outside (0, 1/2)"));
        }
        if !(big_a > 1.0 && big_a.is_finite()) {
            return bad(format!("A = {big_a} must exceed 1"));
        }
        if !(eps0 > 0.0 && eps0.is_finite()) {
            return bad(format!("ε0 = {eps0} must be positive"));
        }
        let limit = alpha_limit(n);
        if !(alpha >= 0.0 && alpha < limit) {
            return bad(format!(
                "α = {alpha} not below 1/(n(n+1)+1) = {limit:.6}: no C^{{1,α}} isometric extension is constructed beyond this exponent"
            ));
        }
        Ok(Schedule { eps0, a, big_a, alpha, n })
    }

    /// `ε0 = max(max ρ0², 1)`.
    pub fn default_eps0(rho: &ScalarField) -> f64 {
        rho.max_abs().powi(2).max(1.0)
    }

    pub fn n_star(&self) -> usize {
        n_star(self.n)
    }

    pub fn eps(&self, q: usize) -> f64 {
        self.eps0 * self.big_a.powf(-2.0 * self.a * q as f64)
    }

    pub fn theta(&self, q: usize) -> f64 {
        self.big_a.powf((self.n_star() as f64 + self.a) * q as f64 + 3.0 * self.a)
    }

    /// `a/(n* + a)`: the largest `α` for which the increments are summable.
    pub fn alpha_ceiling(&self) -> f64 {
        self.a / (self.n_star() as f64 + self.a)
    }

    /// Message when `α` reaches the summability ceiling.
    pub fn alpha_warning(&self) -> Option<String> {
        (self.alpha >= self.alpha_ceiling()).then(|| {
            format!(
                "α = {} ≥ a/(n*+a) = {:.6}: C^{{1,α}} summability of the increments is not expected",
                self.alpha,
                self.alpha_ceiling()
            )
        })
    }

    /// Same schedule with `A` replaced.
    pub fn with_big_a(&self, big_a: f64) -> Result<Self> {
        Schedule::new(self.eps0, self.a, big_a, self.alpha, self.n)
    }

    /// Expected defect ratio per iterate, `A^{−2a}`.
    pub fn defect_rate(&self) -> f64 {
        self.big_a.powf(-2.0 * self.a)
    }

    /// Expected ratio of successive `C^{1,α}` increments, `A^{(n*+a)α − a}`.
    pub fn increment_rate(&self, alpha: f64) -> f64 {
        self.big_a.powf((self.n_star() as f64 + self.a) * alpha - self.a)
    }

    /// `2 M ε0^{1/2} A^{−n*−2a}`.
    pub fn displacement_bound(&self, m: f64) -> f64 {
        2.0 * m * self.eps0.sqrt() * self.big_a.powf(-(self.n_star() as f64) - 2.0 * self.a)
    }
}

/// Level sets `Ω_j^{(q)} = {ρ_q > (9/8) ε_{j+1}^{1/2}}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSets {
    /// Mask of `Ω_j`, `j = 0..masks.len()`.
    pub masks: Vec<Vec<bool>>,
}

impl LevelSets {
    /// Masks for `j = 0..=j_max`.
    pub fn new(rho: &ScalarField, sched: &Schedule, j_max: usize) -> Self {
        let masks = (0..=j_max)
            .map(|j| {
                let t = 9.0 / 8.0 * sched.eps(j + 1).sqrt();
                rho.values.iter().map(|&r| r > t).collect()
            })
            .collect();
        LevelSets { masks }
    }

    pub fn is_nested(&self) -> bool {
        self.masks.windows(2).all(|w| w[0].iter().zip(&w[1]).all(|(a, b)| !a || *b))
    }
}

/// Smallest `j` with `ρ > (9/8) ε_{j+1}^{1/2}`, if any below `j_cap`.
fn first_level(rho: f64, sched: &Schedule, j_cap: usize) -> Option<usize> {
    if !(rho > 0.0) {
        return None;
    }
    (0..j_cap).find(|&j| rho > 9.0 / 8.0 * sched.eps(j + 1).sqrt())
}

/// Fixed smooth ramp: 0 for `s ≤ 7/4`, 1 for `s ≥ 2`.
pub fn ramp(s: f64) -> f64 {
    let t = (s - 1.75) * 4.0;
    if t <= 0.0 {
        0.0
    } else if t >= 1.0 {
        1.0
    } else {
        let a = (-1.0 / t).exp();
        let b = (-1.0 / (1.0 - t)).exp();
        a / (a + b)
    }
}

/// `φ_q = χ(ρ_q/ε_{q+1}^{1/2})` and `ψ_q = χ(4ρ_q/(3ε_{q+1}^{1/2}))`.
#[derive(Debug, Clone, PartialEq)]
pub struct CutoffPair {
    pub phi: ScalarField,
    pub psi: ScalarField,
}

impl CutoffPair {
    pub fn new(rho: &ScalarField, eps_next: f64) -> Self {
        let s = eps_next.sqrt();
        CutoffPair { phi: rho.map(|r| ramp(r / s)), psi: rho.map(|r| ramp(4.0 * r / (3.0 * s))) }
    }
}

/// Worst margins of the inductive conditions at one `q`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AdaptedCheck {
    /// `max |G_q|` over `ρ_q > 0`, against `r2`.
    pub g_max: f64,
    pub r2: f64,
    /// `max ρ_q / (4 ε_q^{1/2})`.
    pub rho_ratio: f64,
    /// `max |G_q|` where `0 < ρ_q ≤ 2ε_{q+1}^{1/2}`, against `r1`.
    pub g_small: f64,
    pub r1: f64,
    /// Worst ratios of `|∇²v|`, `|∇ρ|`, `|∇G|` to their level-set bounds.
    pub level_ratios: [f64; 3],
    /// Nodes attaining the failures of conditions 1, 2 and 3.
    pub worst_nodes: [Option<usize>; 3],
}

impl AdaptedCheck {
    pub fn cond1(&self) -> bool {
        self.g_max <= self.r2 && self.rho_ratio <= 1.0
    }
    pub fn cond2(&self) -> bool {
        self.g_small <= self.r1
    }
    pub fn cond3(&self) -> bool {
        self.level_ratios.iter().all(|&r| r <= 1.0)
    }
    pub fn passed(&self) -> bool {
        self.cond1() && self.cond2() && self.cond3()
    }

    /// Failed conditions as text.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.cond1() {
            out.push(format!(
                "(1): |G| = {:.3e} vs r2 = {:.3e}, ρ/(4ε^1/2) = {:.3e}",
                self.g_max, self.r2, self.rho_ratio
            ));
        }
        if !self.cond2() {
            out.push(format!("(2): |G| = {:.3e} vs r1 = {:.3e} near the zero set", self.g_small, self.r1));
        }
        if !self.cond3() {
            out.push(format!("(3): level-set ratios {:.3e} {:.3e} {:.3e}", self.level_ratios[0], self.level_ratios[1], self.level_ratios[2]));
        }
        out
    }
}

/// Evaluate conditions (1)_q–(3)_q of the inductive scheme nodewise.
pub fn verify_adapted(state: &AdaptedShortState, sched: &Schedule, q: usize, m: f64, frame: &DirectionFrame) -> AdaptedCheck {
    let grid = *state.v.grid();
    let n = grid.dim();
    let q1 = n + 1;
    let hess = gradient_with(&state.v.jacobian, Stencil::Fourth);
    let drho = gradient_with(&state.rho, Stencil::Fourth);
    let dg = gradient_with(&state.big_g, Stencil::Fourth);
    let m_sym = sym_len(n);
    let eps_q = sched.eps(q);
    let small = 2.0 * sched.eps(q + 1).sqrt();
    let mut c = AdaptedCheck { r1: frame.r1(), r2: frame.r2(), ..Default::default() };
    let mut worst1 = 0.0f64;
    let mut p = [0.0; MAX_SYM];
    // Beyond this many levels the bounds only grow, so deeper levels add nothing.
    let j_cap = q + 200;
    for idx in 0..grid.len() {
        let r = state.rho.values[idx];
        if !(r > 0.0) {
            continue;
        }
        let g = linalg::sym_op_norm(n, state.big_g.at(idx));
        let rr = r / (4.0 * eps_q.sqrt());
        c.g_max = c.g_max.max(g);
        c.rho_ratio = c.rho_ratio.max(rr);
        let fail1 = (g / c.r2).max(rr);
        if fail1 > worst1 && fail1 > 1.0 {
            worst1 = fail1;
            c.worst_nodes[0] = Some(idx);
        }
        if r <= small && g > c.g_small {
            c.g_small = g;
            if g > c.r1 {
                c.worst_nodes[1] = Some(idx);
            }
        }
        let Some(j0) = first_level(r, sched, j_cap) else { continue };
        let j = j0.max(q);
        let hm = hess.matrix(idx);
        let mut h2 = 0.0f64;
        for a in 0..n {
            for b in 0..n {
                h2 = h2.max((0..q1).map(|row| hm[(row * n + a) * n + b].powi(2)).sum::<f64>());
            }
        }
        let gr = drho.matrix(idx).iter().map(|x| x * x).sum::<f64>().sqrt();
        let dgm = dg.matrix(idx);
        let mut dgn = 0.0f64;
        for b in 0..n {
            for (e, pe) in p.iter_mut().enumerate().take(m_sym) {
                *pe = dgm[e * n + b];
            }
            dgn = dgn.max(linalg::sym_op_norm(n, &p));
        }
        let ratios = [
            h2.sqrt() / (m * sched.eps(j).sqrt() * sched.theta(j)),
            gr / (m * sched.eps(j + 1).sqrt() * sched.theta(j)),
            dgn / (m * sched.theta(j)),
        ];
        for (k, &x) in ratios.iter().enumerate() {
            if x > c.level_ratios[k] {
                c.level_ratios[k] = x;
                if x > 1.0 {
                    c.worst_nodes[2] = Some(idx);
                }
            }
        }
    }
    c
}

/// The part of the deficit handed to one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct DeficitSplit {
    pub cutoffs: CutoffPair,
    /// `ρ̃_q = φ_q (ρ_q² − ε_{q+1})^{1/2}`.
    pub rho: ScalarField,
    /// `G̃_q = ψ_q ρ_q² G_q / (ρ_q² − ε_{q+1})`.
    pub big_g: SymTensorField,
    /// Unclamped `G̃_q` where it differs from `big_g`.
    pub target: Option<SymTensorField>,
    /// `max |G̃_q|` before clamping.
    pub g_max: f64,
    pub clamped_nodes: usize,
    pub grad_rho: f64,
}

/// Split `(g − ∇v_qᵀ∇v_q − ε_{q+1} Id) φ_q² = ρ̃_q² (Id + G̃_q)`.
///
/// Fails when `|G̃_q|` leaves the decomposition radius of `frame`, unless
/// `clamp` is set, in which case offending nodes are scaled back onto the
/// radius and the difference is carried in `target`.
pub fn deficit_split(
    state: &AdaptedShortState,
    sched: &Schedule,
    q: usize,
    frame: &DirectionFrame,
    clamp: bool,
) -> Result<DeficitSplit> {
    let grid = *state.v.grid();
    let n = grid.dim();
    let m = sym_len(n);
    let eps_next = sched.eps(q + 1);
    let cutoffs = CutoffPair::new(&state.rho, eps_next);
    let mut rho = ScalarField::zeros(&grid);
    let mut big_g = SymTensorField::zeros(&grid);
    for idx in 0..grid.len() {
        let r2 = state.rho.values[idx].powi(2);
        let phi = cutoffs.phi.values[idx];
        let psi = cutoffs.psi.values[idx];
        if phi > 0.0 {
            rho.values[idx] = phi * (r2 - eps_next).sqrt();
        }
        if psi > 0.0 {
            let f = psi * r2 / (r2 - eps_next);
            for e in 0..m {
                big_g.values[idx * m + e] = f * state.big_g.values[idx * m + e];
            }
        }
    }
    let norms = big_g.op_norms();
    let g_max = norms.max_abs();
    let r0 = frame.r0();
    let mut target = None;
    let mut clamped_nodes = 0;
    if g_max > r0 {
        if !clamp {
            let node = norms.values.iter().position(|&v| v > r0).unwrap_or(0);
            return Err(Error::OutOfRadius { index: node, value: g_max });
        }
        let orig = big_g.clone();
        // Land strictly inside so rounding cannot push a coefficient negative.
        let edge = r0 * (1.0 - 1e-9);
        for (idx, &v) in norms.values.iter().enumerate() {
            if v > edge {
                clamped_nodes += 1;
                for x in &mut big_g.values[idx * m..(idx + 1) * m] {
                    *x *= edge / v;
                }
            }
        }
        target = Some(orig);
    }
    let grad_rho = gradient_with(&rho, Stencil::Fourth).max_norm();
    Ok(DeficitSplit { cutoffs, rho, big_g, target, g_max, clamped_nodes, grad_rho })
}

/// Constants shared by all iterates.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationConfig {
    pub k: f64,
    pub m: f64,
    pub gamma: f64,
    pub frame: DirectionFrame,
}

impl IterationConfig {
    pub fn new(n: usize, k: f64, m: f64, gamma: f64) -> Result<Self> {
        Ok(IterationConfig { k, m, gamma, frame: DirectionFrame::balanced(n)? })
    }
}

/// One iterate and its diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Iterate {
    pub state: AdaptedShortState,
    pub steps: Vec<StepDiagnostics>,
    pub frequencies: Vec<f64>,
    /// `max |ℰ|`.
    pub error: f64,
    /// `max |G̃_q|` before any clamping and the number of clamped nodes.
    pub g_tilde: f64,
    pub clamped_nodes: usize,
    /// `max |ℰ| / ε_{q+1}` over `supp φ_q`.
    pub relative_error: f64,
    /// `max |v_{q+1} − v_q|`, `max |∇v_{q+1} − ∇v_q|`, `max |∇²(v_{q+1} − v_q)|`.
    pub increment: [f64; 3],
    pub changed_nodes: usize,
    /// Nodes outside `supp φ_q` whose triple changed; must be zero.
    pub leaked_nodes: usize,
    /// `max |g − ∇vᵀ∇v − ρ²(Id + G)|` of the new triple.
    pub identity_residual: f64,
}

/// Largest stage frequency of iterate `q`.
pub fn iterate_top_frequency(sched: &Schedule, cfg: &IterationConfig, q: usize) -> f64 {
    let eps = sched.eps(q);
    let p = StepParams::new(cfg.m, cfg.gamma, eps, eps, sched.theta(q), sched.theta(q), 0.0);
    stage_frequencies(&p, cfg.k, cfg.frame.len()).last().copied().unwrap_or(0.0)
}

/// Build `(v_{q+1}, ρ_{q+1}, G_{q+1})` from `(v_q, ρ_q, G_q)`.
///
/// With `lenient` set, `G̃_q` is clamped onto the decomposition radius and
/// the derivative bounds of the steps are not enforced; the bookkeeping
/// identity still holds exactly.
pub fn iterate_once(
    state: &AdaptedShortState,
    sched: &Schedule,
    q: usize,
    cfg: &IterationConfig,
    profile: &CorrugationProfile,
    lenient: bool,
) -> Result<Iterate> {
    let grid = *state.v.grid();
    let n = grid.dim();
    let m = sym_len(n);
    let nq = n + 1;
    let split = deficit_split(state, sched, q, &cfg.frame, lenient)?;
    let eps = sched.eps(q);
    let eps_next = sched.eps(q + 1);
    let p = StepParams {
        enforce_bounds: !lenient,
        ..StepParams::new(cfg.m, cfg.gamma, eps, eps, sched.theta(q), sched.theta(q), 0.0)
    };
    let res = add_conformal_deficit(&state.v, &split.rho, &split.big_g, &p, cfg.k, &cfg.frame, profile)?;
    let phi = &split.cutoffs.phi;

    let mut rho = state.rho.clone();
    let mut big_g = state.big_g.clone();
    let mut error = 0.0f64;
    let mut relative = 0.0f64;
    let mut leaked = 0;
    for idx in 0..grid.len() {
        // ℰ = −(stage error): the stage reports ∇v_{q+1}ᵀ∇v_{q+1} − ∇v_qᵀ∇v_q − h_q.
        // A clamped G̃ leaves ρ̃²(G̃ − G̃_used) of the deficit behind.
        let mut e = [0.0; MAX_SYM];
        let r2t = split.rho.values[idx].powi(2);
        for k in 0..m {
            e[k] = -res.error.values[idx * m + k];
            if let Some(t) = &split.target {
                e[k] += r2t * (t.values[idx * m + k] - split.big_g.values[idx * m + k]);
            }
        }
        let en = linalg::sym_op_norm(n, &e);
        error = error.max(en);
        let f2 = phi.values[idx] * phi.values[idx];
        if f2 == 0.0 {
            let moved = state.v.value.at(idx) != res.v.value.at(idx);
            if en != 0.0 || moved {
                leaked += 1;
            }
            continue;
        }
        relative = relative.max(en / eps_next);
        let r2q = state.rho.values[idx].powi(2);
        let r2 = r2q * (1.0 - f2) + eps_next * f2;
        rho.values[idx] = r2.sqrt();
        for k in 0..m {
            big_g.values[idx * m + k] = (r2q * state.big_g.values[idx * m + k] * (1.0 - f2) + e[k]) / r2;
        }
    }

    let v = res.v;
    let mut residual = 0.0f64;
    let metric = v.metric();
    let mut pk = [0.0; MAX_SYM];
    for idx in 0..grid.len() {
        let r2 = rho.values[idx].powi(2);
        let (g, mm, gg) = (state.g.at(idx), metric.at(idx), big_g.at(idx));
        for k in 0..m {
            pk[k] = g[k] - mm[k] - r2 * gg[k];
        }
        for d in 0..n {
            pk[sym_idx(n, d, d)] -= r2;
        }
        residual = residual.max(linalg::sym_op_norm(n, &pk));
    }
    let dj = v.jacobian.sub(&state.v.jacobian);
    let dv0 = (0..grid.len())
        .map(|i| (0..nq).map(|r| (v.value.values[i * nq + r] - state.v.value.values[i * nq + r]).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let dv1 = dj.max_norm();
    let dv2 = crate::convex::jacobian_derivative_norm(&dj);
    let changed = (0..grid.len()).filter(|&i| phi.values[i] > 0.0).count();
    let mut next = AdaptedShortState {
        g: state.g.clone(),
        v,
        rho,
        big_g,
        resolved: state.resolved.clone(),
        tau: state.tau,
        report: Default::default(),
    };
    next.report = crate::extension::definition_report(&next.g, &next.v, &next.rho, &next.big_g, &next.resolved);
    Ok(Iterate {
        state: next,
        steps: res.steps,
        frequencies: res.frequencies,
        error,
        g_tilde: split.g_max,
        clamped_nodes: split.clamped_nodes,
        relative_error: relative,
        increment: [dv0, dv1, dv2],
        changed_nodes: changed,
        leaked_nodes: leaked,
        identity_residual: residual,
    })
}

/// Sup of the operator norm of `g − ∇vᵀ∇v`.
pub fn metric_defect(state: &AdaptedShortState) -> f64 {
    state.g.sub(&state.v.metric()).max_op_norm()
}

/// Driver settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub q_max: usize,
    pub tol: f64,
    /// Abort on a violated inductive condition instead of recording it.
    pub strict: bool,
    /// Times `A` is doubled after a strict failure.
    pub retries: usize,
    /// Stop when the defect falls by less than 1% over two iterates.
    pub stop_on_stall: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { q_max: 4, tol: 0.0, strict: true, retries: 3, stop_on_stall: true }
    }
}

/// Per-iterate row of the convergence report.
#[derive(Debug, Clone, PartialEq)]
pub struct IterateRow {
    pub q: usize,
    pub eps: f64,
    pub theta: f64,
    pub top_frequency: f64,
    /// Sup defect after this iterate.
    pub defect: f64,
    /// `‖v_q − v_{q−1}‖_j`, `j = 0, 1, 2`.
    pub increment: [f64; 3],
    pub error: f64,
    pub relative_error: f64,
    pub changed_nodes: usize,
    pub leaked_nodes: usize,
    pub identity_residual: f64,
    pub g_max: f64,
    pub violations: Vec<String>,
}

impl IterateRow {
    pub const CSV_HEADER: &'static str =
        "q,eps,theta,top_frequency,defect,dv0,dv1,dv2,error,relative_error,changed_nodes,leaked_nodes,identity_residual,g_max,violations";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{},{},{:.17e},{:.17e},{}",
            self.q,
            self.eps,
            self.theta,
            self.top_frequency,
            self.defect,
            self.increment[0],
            self.increment[1],
            self.increment[2],
            self.error,
            self.relative_error,
            self.changed_nodes,
            self.leaked_nodes,
            self.identity_residual,
            self.g_max,
            self.violations.join("; ")
        )
    }

    /// `‖·‖_0 + ‖·‖_1 + ‖·‖_1^{1−α} ‖·‖_2^α`.
    pub fn holder_increment(&self, alpha: f64) -> f64 {
        let [d0, d1, d2] = self.increment;
        d0 + d1 + d1.powf(1.0 - alpha) * d2.powf(alpha)
    }
}

/// Why the driver stopped.
#[derive(Debug, Clone, PartialEq)]
pub enum StopReason {
    /// Initial state already isometric.
    Isometric,
    Tolerance,
    MaxIterates,
    FrequencyCap { q: usize, lambda: f64, cap: f64 },
    Stall { q: usize },
    /// Lenient mode only: iterate `q` could not be built.
    Breakdown { q: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub schedule: Schedule,
    pub initial_defect: f64,
    pub rows: Vec<IterateRow>,
    pub stop: StopReason,
    /// `max |v_Q − v_0|`.
    pub displacement: f64,
    pub displacement_bound: f64,
    /// Max over Σ of `|v_Q − v_0|`.
    pub boundary_drift: f64,
    /// Values of `A` tried before this run.
    pub escalations: Vec<f64>,
    pub warnings: Vec<String>,
}

impl ConvergenceReport {
    /// `defect_q / defect_{q−1}`, starting from the initial defect.
    pub fn defect_ratios(&self) -> Vec<f64> {
        let mut prev = self.initial_defect;
        self.rows
            .iter()
            .map(|r| {
                let x = r.defect / prev;
                prev = r.defect;
                x
            })
            .collect()
    }

    /// Geometric rate fitted to the defects by least squares in `log`.
    pub fn fitted_defect_rate(&self) -> f64 {
        let mut pts = vec![(0.0, self.initial_defect)];
        pts.extend(self.rows.iter().map(|r| ((r.q + 1) as f64, r.defect)));
        fitted_rate(&pts)
    }

    pub fn holder_increments(&self, alpha: f64) -> Vec<f64> {
        self.rows.iter().map(|r| r.holder_increment(alpha)).collect()
    }

    /// Geometric rate fitted to the `C^{1,α}` increments.
    pub fn fitted_increment_rate(&self, alpha: f64) -> f64 {
        let pts: Vec<(f64, f64)> = self.rows.iter().map(|r| (r.q as f64, r.holder_increment(alpha))).collect();
        fitted_rate(&pts)
    }

    /// Ratios of successive increments `‖v_{q+1} − v_q‖ / ‖v_q − v_{q−1}‖`
    /// in `C^{1,α}`; a geometric tail is Cauchy when these stay below 1.
    pub fn tail_ratios(&self, alpha: f64) -> Vec<f64> {
        self.holder_increments(alpha).windows(2).map(|w| w[1] / w[0]).collect()
    }
}

/// `exp` of the least-squares slope of `log y` against `x`.
pub fn fitted_rate(pts: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = pts.iter().filter(|p| p.1 > 0.0).map(|&(x, y)| (x, y.ln())).collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    (sxy / sxx).exp()
}

/// Final iterate and the convergence report.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub state: AdaptedShortState,
    pub report: ConvergenceReport,
}

/// Iterate until the defect drops below `tol`, `q_max` iterates are done,
/// the next stage would exceed the frequency cap, or progress stalls.
///
/// In strict mode a violated inductive condition or a radius failure
/// restarts the run with `A` doubled, at most `run.retries` times.
pub fn run(
    state0: &AdaptedShortState,
    sched: &Schedule,
    cfg: &IterationConfig,
    run: &RunConfig,
    profile: &CorrugationProfile,
) -> Result<RunResult> {
    run_observed(state0, sched, cfg, run, profile, |_, _| {})
}

/// [`run`] calling `observe(q + 1, v_{q+1} state)` after every accepted
/// iterate. After an escalation the iterates of the new attempt are
/// reported again from `q = 1`.
pub fn run_observed(
    state0: &AdaptedShortState,
    sched: &Schedule,
    cfg: &IterationConfig,
    run: &RunConfig,
    profile: &CorrugationProfile,
    mut observe: impl FnMut(usize, &AdaptedShortState),
) -> Result<RunResult> {
    let mut sched = *sched;
    let mut tried = Vec::new();
    loop {
        match run_once(state0, &sched, cfg, run, profile, &mut observe) {
            Ok(mut r) => {
                r.report.escalations = tried;
                return Ok(r);
            }
            Err(e) if run.strict && escalates(&e) => {
                tried.push(sched.big_a);
                if tried.len() > run.retries {
                    return Err(Error::Precondition(format!("escalation exhausted (A tried: {tried:?}): {e}")));
                }
                sched = sched.with_big_a(2.0 * sched.big_a)?;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Errors that a larger `A` may cure.
pub fn escalates(e: &Error) -> bool {
    matches!(e.root(), Error::OutOfRadius { .. } | Error::Precondition(_))
}

fn run_once(
    state0: &AdaptedShortState,
    sched: &Schedule,
    cfg: &IterationConfig,
    run: &RunConfig,
    profile: &CorrugationProfile,
    observe: &mut impl FnMut(usize, &AdaptedShortState),
) -> Result<RunResult> {
    let grid = *state0.v.grid();
    let cap = frequency_cap(&grid);
    let initial_defect = metric_defect(state0);
    let mut warnings: Vec<String> = sched.alpha_warning().into_iter().collect();
    let check0 = verify_adapted(state0, sched, 0, cfg.m, &cfg.frame);
    if !check0.passed() {
        let v = check0.violations().join("; ");
        if run.strict {
            return Err(Error::Precondition(format!("initial state violates the inductive conditions ({v}); raise A")));
        }
        warnings.push(format!("q = 0: {v}"));
    }
    let mut state = state0.clone();
    let mut rows: Vec<IterateRow> = Vec::new();
    let stop = if state0.rho.max_abs() == 0.0 {
        StopReason::Isometric
    } else {
        let mut stop = StopReason::MaxIterates;
        for q in 0..run.q_max {
            let top = iterate_top_frequency(sched, cfg, q);
            if top > cap {
                stop = StopReason::FrequencyCap { q, lambda: top, cap };
                break;
            }
            let it = match iterate_once(&state, sched, q, cfg, profile, !run.strict) {
                Ok(it) => it,
                Err(e) if !run.strict => {
                    stop = StopReason::Breakdown { q, reason: format!("{e}") };
                    break;
                }
                Err(e) => return Err(e),
            };
            let check = verify_adapted(&it.state, sched, q + 1, cfg.m, &cfg.frame);
            let mut violations = check.violations();
            if it.g_tilde > 5.0 * cfg.frame.r2() {
                violations.push(format!("|G̃| = {:.3e} exceeds 5 r2 = {:.3e}", it.g_tilde, 5.0 * cfg.frame.r2()));
            }
            for (j, &d) in it.increment.iter().enumerate() {
                let b = cfg.m * sched.eps(q).sqrt() * sched.theta(q).powi(j as i32 - 1);
                if d > b {
                    violations.push(format!("‖v_{{q+1}} − v_q‖_{j} = {d:.3e} exceeds {b:.3e}"));
                }
            }
            if it.clamped_nodes > 0 {
                violations.push(format!("|G̃| = {:.3e} clamped to r0 at {} nodes", it.g_tilde, it.clamped_nodes));
            }
            if run.strict && !violations.is_empty() {
                return Err(Error::Precondition(format!(
                    "iterate {} violates {}; raise A",
                    q + 1,
                    violations.join("; ")
                )));
            }
            let defect = metric_defect(&it.state);
            rows.push(IterateRow {
                q,
                eps: sched.eps(q),
                theta: sched.theta(q),
                top_frequency: top,
                defect,
                increment: it.increment,
                error: it.error,
                relative_error: it.relative_error,
                changed_nodes: it.changed_nodes,
                leaked_nodes: it.leaked_nodes,
                identity_residual: it.identity_residual,
                g_max: check.g_max,
                violations,
            });
            state = it.state;
            observe(q + 1, &state);
            if defect <= run.tol {
                stop = StopReason::Tolerance;
                break;
            }
            let k = rows.len();
            if run.stop_on_stall && k >= 2 && q + 1 < run.q_max {
                let before = if k >= 3 { rows[k - 3].defect } else { initial_defect };
                if rows[k - 1].defect > 0.99 * before {
                    stop = StopReason::Stall { q };
                    break;
                }
            }
        }
        stop
    };
    let nq = grid.dim() + 1;
    let mut displacement = 0.0f64;
    let mut boundary = 0.0f64;
    for i in 0..grid.len() {
        let d = (0..nq).map(|r| (state.v.value.values[i * nq + r] - state0.v.value.values[i * nq + r]).powi(2)).sum::<f64>().sqrt();
        displacement = displacement.max(d);
        if grid.coord(i, grid.dim() - 1) == grid.lo()[grid.dim() - 1] {
            boundary = boundary.max(d);
        }
    }
    let report = ConvergenceReport {
        schedule: *sched,
        initial_defect,
        rows,
        stop,
        displacement,
        displacement_bound: sched.displacement_bound(cfg.m),
        boundary_drift: boundary,
        escalations: Vec::new(),
        warnings,
    };
    Ok(RunResult { state, report })
}
