//! One-sided adapted short extension of a boundary immersion.
//!
//! Charts are grids whose last axis is the distance `x_n ≥ 0` to the boundary
//! `Σ = {x_n = 0}`, so the metric is expected in geodesic form
//! `g_{in} = δ_{in}`. Boundary samples live at the nodes with last index 0.
//!
//! The construction starts from the ansatz `u = f + μ x_n − μ x_n²`, whose
//! deficit `g − ∇uᵀ∇u` grows linearly away from Σ, splits `deficit − τρ² Id`
//! over dyadic layers `d_{q+1} < x_n < d_{q−1}` and adds it back with one
//! stage per layer: odd layers from `u`, then even layers on top. The layers
//! are disjoint within each parity, so each stage runs from the same base and
//! the results are merged nodewise.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;

use crate::convex::{frequency_cap, stage, stage_frequencies, ImmersionJet, PrimitiveTerm, StepDiagnostics, StepParams};
use crate::corrugation::CorrugationProfile;
use crate::decomposition::{decompose_global, GlobalPath, RHO_FLOOR};
use crate::error::{Error, Result};
use crate::fields::{
    bump, gradient_with, Grid, ImmersionField, JacobianField, SampledField, ScalarField, Stencil, SymTensorField,
    VectorField, MIN_RESOLUTION,
};
use crate::linalg::{self, sym_idx, sym_len, MAX_DIM, MAX_SYM};

/// Allowed deviation of `|μ|` from 1.
pub const UNIT_TOLERANCE: f64 = 1e-12;
/// Allowed deviation of `g_{in}` from `δ_{in}`.
pub const GEODESIC_TOLERANCE: f64 = 1e-12;
/// Fewest grid spacings an admissible depth may span.
pub const MIN_DEPTH_NODES: usize = 8;
/// Fewest grid spacings across the deepest resolved layer depth `d_Q`.
pub const MIN_LAYER_NODES: f64 = 4.0;
/// Fewest layers a usable decomposition of the depth must have.
pub const MIN_LAYERS: usize = 3;
/// Nodes with `Σ χ_q² ≥ 1 − PARTITION_TOLERANCE` count as resolved.
pub const PARTITION_TOLERANCE: f64 = 1e-12;

/// Number of boundary nodes of a chart grid.
pub fn sigma_count(grid: &Grid) -> usize {
    grid.len() / depth_resolution(grid)
}

/// Grid index of boundary node `j`.
pub fn sigma_node(grid: &Grid, j: usize) -> usize {
    j * depth_resolution(grid)
}

fn depth_resolution(grid: &Grid) -> usize {
    grid.resolution()[grid.dim() - 1]
}

/// Index of a node along the depth axis.
fn depth_index(grid: &Grid, idx: usize) -> usize {
    idx % depth_resolution(grid)
}

fn depth_spacing(grid: &Grid) -> f64 {
    grid.spacing()[grid.dim() - 1]
}

/// Largest spacing along the boundary axes.
fn sigma_spacing(grid: &Grid) -> f64 {
    grid.spacing()[..grid.dim() - 1].iter().fold(0.0, |a, &b| a.max(b))
}

/// Boundary immersion `f`, unit normal `μ` and ambient metric on a chart.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryData {
    pub grid: Grid,
    /// `f` at the boundary nodes, `n + 1` components each.
    pub f: Vec<f64>,
    /// `μ` at the boundary nodes, `n + 1` components each.
    pub mu: Vec<f64>,
    pub g: SymTensorField,
    /// Requested depth of the extension.
    pub d0: f64,
}

impl BoundaryData {
    pub fn new(grid: Grid, f: Vec<f64>, mu: Vec<f64>, g: SymTensorField, d0: f64) -> Result<Self> {
        let data = BoundaryData { grid, f, mu, g, d0 };
        data.validate()?;
        Ok(data)
    }

    /// Sample `f` and `μ` at the boundary nodes and `g` everywhere.
    ///
    /// `f` and `μ` receive the boundary coordinates `x′`.
    pub fn from_fn(
        grid: Grid,
        f: impl Fn(&[f64], &mut [f64]),
        mu: impl Fn(&[f64], &mut [f64]),
        g: impl FnMut(&[f64], &mut [f64]),
        d0: f64,
    ) -> Result<Self> {
        let n = grid.dim();
        let q = n + 1;
        let ns = sigma_count(&grid);
        let mut fv = vec![0.0; ns * q];
        let mut mv = vec![0.0; ns * q];
        for j in 0..ns {
            let x = grid.point(sigma_node(&grid, j));
            f(&x[..n - 1], &mut fv[j * q..(j + 1) * q]);
            mu(&x[..n - 1], &mut mv[j * q..(j + 1) * q]);
        }
        let g = SymTensorField::from_fn(&grid, g);
        BoundaryData::new(grid, fv, mv, g, d0)
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    /// Shapes, unit normal, geodesic form, normality and isometry of `f`.
    pub fn validate(&self) -> Result<()> {
        let grid = &self.grid;
        let n = grid.dim();
        let q = n + 1;
        let ns = sigma_count(grid);
        let bad = |s: String| Err(Error::InvalidData(s));
        if grid.lo()[n - 1] != 0.0 {
            return bad(format!("depth axis starts at {} instead of 0", grid.lo()[n - 1]));
        }
        if self.f.len() != ns * q || self.mu.len() != ns * q {
            return Err(Error::ShapeMismatch(format!("boundary samples need {} values", ns * q)));
        }
        if self.g.grid != *grid {
            return Err(Error::ShapeMismatch("metric lives on a different grid".into()));
        }
        if !(self.d0 > 0.0 && self.d0 <= grid.hi()[n - 1]) {
            return bad(format!("depth {} outside (0, {}]", self.d0, grid.hi()[n - 1]));
        }
        if !(self.f.iter().chain(&self.mu).all(|v| v.is_finite()) && self.g.all_finite()) {
            return bad("non-finite sample".into());
        }
        for j in 0..ns {
            let len = self.mu[j * q..(j + 1) * q].iter().map(|x| x * x).sum::<f64>().sqrt();
            if (len - 1.0).abs() > UNIT_TOLERANCE {
                return bad(format!("|μ| = {len} at boundary node {j}"));
            }
        }
        for idx in 0..grid.len() {
            let gi = self.g.at(idx);
            for i in 0..n {
                let want = if i == n - 1 { 1.0 } else { 0.0 };
                let have = gi[sym_idx(n, i, n - 1)];
                if (have - want).abs() > GEODESIC_TOLERANCE {
                    return bad(format!("metric not in geodesic form at node {idx}: g[{i}][{}] = {have}", n - 1));
                }
            }
        }
        let h = sigma_spacing(grid);
        let tol = 2.0 * h * h;
        let (df, _) = sigma_derivatives(grid, &self.f, q);
        let t = n - 1;
        for j in 0..ns {
            let d = &df[j * q * t..(j + 1) * q * t];
            let mu = &self.mu[j * q..(j + 1) * q];
            let gi = self.g.at(sigma_node(grid, j));
            for a in 0..t {
                let dot: f64 = (0..q).map(|r| mu[r] * d[r * t + a]).sum();
                if dot.abs() > tol {
                    return bad(format!("μ not normal at boundary node {j}: μ·∂_{a} f = {dot:e}"));
                }
                for b in a..t {
                    let gab: f64 = (0..q).map(|r| d[r * t + a] * d[r * t + b]).sum();
                    let err = (gab - gi[sym_idx(n, a, b)]).abs();
                    if err > tol {
                        return bad(format!("f not isometric at boundary node {j}: error {err:e}"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// First and second tangential derivatives of boundary samples.
///
/// Returns per boundary node `comps × (n−1)` first and
/// `comps × (n−1) × (n−1)` second derivatives, taken on a thin slab into
/// which the samples are extruded.
fn sigma_derivatives(grid: &Grid, vals: &[f64], comps: usize) -> (Vec<f64>, Vec<f64>) {
    let n = grid.dim();
    let t = n - 1;
    let slab = grid.truncate_axis(n - 1, MIN_RESOLUTION).expect("depth axis holds at least the minimum resolution");
    let mut ext = Vec::with_capacity(slab.len() * comps);
    for idx in 0..slab.len() {
        let j = idx / MIN_RESOLUTION;
        ext.extend_from_slice(&vals[j * comps..(j + 1) * comps]);
    }
    let field = VectorField { grid: slab, dim: comps, values: ext };
    let d1 = gradient_with(&field, Stencil::Fourth);
    let d2 = gradient_with(&d1, Stencil::Fourth);
    let ns = sigma_count(grid);
    let mut first = vec![0.0; ns * comps * t];
    let mut second = vec![0.0; ns * comps * t * t];
    for j in 0..ns {
        let idx = j * MIN_RESOLUTION;
        let m1 = d1.matrix(idx);
        let m2 = d2.matrix(idx);
        for r in 0..comps {
            for a in 0..t {
                first[(j * comps + r) * t + a] = m1[r * n + a];
                for b in 0..t {
                    second[((j * comps + r) * t + a) * t + b] = m2[(r * n + a) * n + b];
                }
            }
        }
    }
    (first, second)
}

/// Boundary quantities shared by the condition check and the ansatz.
struct SigmaJets {
    df: Vec<f64>,
    dmu: Vec<f64>,
    /// `⟨μ, ∂²_ij f⟩`, packed over the boundary axes.
    second_form: Vec<f64>,
    /// `∂_n g_ij` at `x_n = 0`, packed over all axes.
    dng: Vec<f64>,
}

impl SigmaJets {
    fn new(data: &BoundaryData) -> Self {
        let grid = &data.grid;
        let n = grid.dim();
        let q = n + 1;
        let t = n - 1;
        let ts = sym_len(t);
        let m = sym_len(n);
        let ns = sigma_count(grid);
        let (df, d2f) = sigma_derivatives(grid, &data.f, q);
        let (dmu, _) = sigma_derivatives(grid, &data.mu, q);
        let mut second_form = vec![0.0; ns * ts];
        let mut dng = vec![0.0; ns * m];
        let h = depth_spacing(grid);
        for j in 0..ns {
            let mu = &data.mu[j * q..(j + 1) * q];
            for a in 0..t {
                for b in a..t {
                    second_form[j * ts + sym_idx(t, a, b)] =
                        (0..q).map(|r| mu[r] * d2f[((j * q + r) * t + a) * t + b]).sum();
                }
            }
            let i0 = sigma_node(grid, j);
            let (g0, g1, g2) = (data.g.at(i0), data.g.at(i0 + 1), data.g.at(i0 + 2));
            for e in 0..m {
                dng[j * m + e] = (-3.0 * g0[e] + 4.0 * g1[e] - g2[e]) / (2.0 * h);
            }
        }
        SigmaJets { df, dmu, second_form, dng }
    }

    /// `⟨μ, ∂²f⟩ − L` with `L_ij = −½ ∂_n g_ij`, packed over the boundary axes.
    fn condition_matrix(&self, n: usize, j: usize) -> [f64; MAX_SYM] {
        let t = n - 1;
        let ts = sym_len(t);
        let m = sym_len(n);
        let mut out = [0.0; MAX_SYM];
        for a in 0..t {
            for b in a..t {
                out[sym_idx(t, a, b)] =
                    self.second_form[j * ts + sym_idx(t, a, b)] + 0.5 * self.dng[j * m + sym_idx(n, a, b)];
            }
        }
        out
    }
}

/// Result of the boundary convexity check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginReport {
    /// Smallest eigenvalue of `⟨μ, ∂²f⟩ − L` over the boundary.
    pub margin: f64,
    /// Boundary node attaining it.
    pub sigma_node: usize,
    pub point: [f64; MAX_DIM],
}

impl MarginReport {
    pub fn admissible(&self) -> bool {
        self.margin > 0.0
    }
}

/// Smallest eigenvalue of `⟨μ, ∂²_ij f⟩ − L_ij`, `L_ij = −½ ∂_n g_ij(x′, 0)`.
pub fn check_condition(data: &BoundaryData) -> Result<MarginReport> {
    data.validate()?;
    let jets = SigmaJets::new(data);
    Ok(margin_from(data, &jets))
}

fn margin_from(data: &BoundaryData, jets: &SigmaJets) -> MarginReport {
    let grid = &data.grid;
    let n = grid.dim();
    let mut best = MarginReport { margin: f64::INFINITY, sigma_node: 0, point: [0.0; MAX_DIM] };
    for j in 0..sigma_count(grid) {
        let b = jets.condition_matrix(n, j);
        let (lo, _) = linalg::sym_extreme_eigenvalues(n - 1, &b);
        if lo < best.margin {
            best = MarginReport { margin: lo, sigma_node: j, point: grid.point(sigma_node(grid, j)) };
        }
    }
    best
}

/// The quadratic ansatz cropped to an admissible depth.
#[derive(Debug, Clone, PartialEq)]
pub struct ShortAnsatz {
    pub u: ImmersionJet,
    pub g: SymTensorField,
    /// `g − ∇uᵀ∇u`.
    pub deficit: SymTensorField,
    /// Depth after shrinking, a grid node.
    pub d0: f64,
    pub margin: MarginReport,
    /// `max |deficit − x_n P1| / x_n²` with `P1 = blockdiag(2⟨μ, ∂²f⟩ + ∂_n g, 4)`.
    pub remainder: f64,
}

/// `u = f + μ x_n − μ x_n²`, with the depth halved until the deficit is
/// positive definite on `0 < x_n ≤ d0`.
pub fn short_ansatz(data: &BoundaryData) -> Result<ShortAnsatz> {
    data.validate()?;
    let jets = SigmaJets::new(data);
    let margin = margin_from(data, &jets);
    if !margin.admissible() {
        return Err(Error::MarginViolation { node: sigma_node(&data.grid, margin.sigma_node), value: margin.margin });
    }
    let grid = data.grid;
    let n = grid.dim();
    let h = depth_spacing(&grid);
    let mut count = ((data.d0 / h + 1e-9).floor() as usize + 1).min(depth_resolution(&grid));
    let full = grid.truncate_axis(n - 1, count.max(MIN_RESOLUTION))?;
    let g_full = crop_sym(&data.g, &full);
    let u_full = ansatz_on(&full, data, &jets);
    let deficit_full = deficit(&g_full, &u_full);
    if let Some(bad) = first_indefinite(&deficit_full, count) {
        while count > bad {
            count = (count - 1) / 2 + 1;
        }
    }
    if count - 1 < MIN_DEPTH_NODES {
        return Err(Error::Resolution(format!(
            "no admissible depth above {MIN_DEPTH_NODES} grid spacings (deficit indefinite at x_n = {})",
            (count - 1) as f64 * h
        )));
    }
    let cropped = grid.truncate_axis(n - 1, count)?;
    let g = crop_sym(&g_full, &cropped);
    let u = ansatz_on(&cropped, data, &jets);
    let deficit = deficit(&g, &u);
    let remainder = ansatz_remainder(&deficit, &jets);
    Ok(ShortAnsatz { u, g, deficit, d0: (count - 1) as f64 * h, margin, remainder })
}

/// Smallest depth index in `1..count` where the deficit is not positive definite.
fn first_indefinite(s: &SymTensorField, count: usize) -> Option<usize> {
    let grid = &s.grid;
    let n = grid.dim();
    let mut first: Option<usize> = None;
    for idx in 0..grid.len() {
        let k = depth_index(grid, idx);
        if k == 0 || k >= count || first.is_some_and(|f| k >= f) {
            continue;
        }
        let (lo, _) = linalg::sym_extreme_eigenvalues(n, s.at(idx));
        if !(lo > 0.0) {
            first = Some(k);
        }
    }
    first
}

fn ansatz_on(grid: &Grid, data: &BoundaryData, jets: &SigmaJets) -> ImmersionJet {
    let n = grid.dim();
    let q = n + 1;
    let t = n - 1;
    let mut value = ImmersionField { grid: *grid, values: vec![0.0; grid.len() * q] };
    let mut jac = JacobianField::zeros(grid, q);
    let rn = depth_resolution(grid);
    for idx in 0..grid.len() {
        let j = idx / rn;
        let x = grid.coord(idx, n - 1);
        let s = x - x * x;
        let f = &data.f[j * q..(j + 1) * q];
        let mu = &data.mu[j * q..(j + 1) * q];
        for r in 0..q {
            value.values[idx * q + r] = f[r] + mu[r] * s;
            let row = &mut jac.values[(idx * q + r) * n..(idx * q + r + 1) * n];
            for a in 0..t {
                row[a] = jets.df[(j * q + r) * t + a] + jets.dmu[(j * q + r) * t + a] * s;
            }
            row[n - 1] = mu[r] * (1.0 - 2.0 * x);
        }
    }
    ImmersionJet { value, jacobian: jac }
}

fn deficit(g: &SymTensorField, u: &ImmersionJet) -> SymTensorField {
    g.sub(&u.metric())
}

fn ansatz_remainder(s: &SymTensorField, jets: &SigmaJets) -> f64 {
    let grid = &s.grid;
    let n = grid.dim();
    let t = n - 1;
    let ts = sym_len(t);
    let m = sym_len(n);
    let rn = depth_resolution(grid);
    let mut worst = 0.0f64;
    let mut p = [0.0; MAX_SYM];
    for idx in 0..grid.len() {
        let k = idx % rn;
        if k == 0 {
            continue;
        }
        let j = idx / rn;
        let x = grid.coord(idx, n - 1);
        for a in 0..n {
            for b in a..n {
                let lin = if b == n - 1 {
                    if a == n - 1 {
                        4.0
                    } else {
                        0.0
                    }
                } else {
                    2.0 * jets.second_form[j * ts + sym_idx(t, a, b)] + jets.dng[j * m + sym_idx(n, a, b)]
                };
                p[sym_idx(n, a, b)] = s.at(idx)[sym_idx(n, a, b)] - x * lin;
            }
        }
        worst = worst.max(linalg::sym_op_norm(n, &p) / (x * x));
    }
    worst
}

/// Values of `vals` on the nodes of `new`, a depth truncation of `old`.
fn crop_values(old: &Grid, new: &Grid, comps: usize, vals: &[f64]) -> Vec<f64> {
    let ro = depth_resolution(old);
    let rn = depth_resolution(new);
    let mut out = Vec::with_capacity(new.len() * comps);
    for row in vals.chunks_exact(ro * comps) {
        out.extend_from_slice(&row[..rn * comps]);
    }
    out
}

fn crop_sym(f: &SymTensorField, new: &Grid) -> SymTensorField {
    let m = sym_len(new.dim());
    SymTensorField { grid: *new, values: crop_values(&f.grid, new, m, &f.values) }
}

/// Partition function `χ_q` as a function of `s = log₂(d0/x_n)`.
///
/// `χ_q = β(s − q) / (Σ_p β(s − p)²)^{1/2}` with the bump `β`, so
/// `supp χ_q = (q − 1, q + 1)` in `s` and `Σ_q χ_q² = 1`.
pub fn layer_profile(q: i32, s: f64) -> f64 {
    let beta = bump(s - q as f64);
    if beta == 0.0 {
        return 0.0;
    }
    let p = s.floor();
    let norm = (bump(s - p).powi(2) + bump(s - p - 1.0).powi(2)).sqrt();
    beta / norm
}

/// `χ_q(x_n)` together with its first two `x_n` derivatives.
fn layer_jet(q: i32, d0: f64, x: f64) -> [f64; 3] {
    if !(x > 0.0) {
        return [0.0; 3];
    }
    let ln2 = core::f64::consts::LN_2;
    let s = (d0 / x).log2();
    let hs = 1e-4;
    let (c0, cp, cm) = (layer_profile(q, s), layer_profile(q, s + hs), layer_profile(q, s - hs));
    let d1 = (cp - cm) / (2.0 * hs);
    let d2 = (cp - 2.0 * c0 + cm) / (hs * hs);
    [c0, -d1 / (x * ln2), d2 / (x * ln2).powi(2) + d1 / (x * x * ln2)]
}

/// Dyadic layers `d_{q+1} < x_n < d_{q−1}`, `d_q = 2^{−q} d0`, with their
/// partition of unity.
#[derive(Debug, Clone, PartialEq)]
pub struct WhitneyLayers {
    pub d0: f64,
    /// `d_q` for `q = 0..=Q`.
    pub depths: Vec<f64>,
    pub chi: Vec<ScalarField>,
    /// `d_q^j max |∂^j χ_q|` for `j = 1, 2`.
    pub derivative_constants: Vec<[f64; 2]>,
    /// `max |Σ χ_q² − 1|` over `x_n ≥ d_Q`.
    pub partition_error: f64,
    /// `max |χ_q χ_{q+2}|`.
    pub overlap: f64,
}

impl WhitneyLayers {
    pub fn len(&self) -> usize {
        self.chi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chi.is_empty()
    }

    /// Deepest layer index `Q`.
    pub fn deepest(&self) -> usize {
        self.chi.len() - 1
    }

    /// Smallest `C` with `‖χ_q‖_{C^j} ≤ C d_q^{−j}` for all layers and `j ≤ 2`.
    pub fn constant(&self) -> f64 {
        self.derivative_constants.iter().flat_map(|c| c.iter().copied()).fold(1.0, f64::max)
    }

    /// Ratio of the largest to the smallest first-derivative constant over `q ≥ 1`.
    pub fn spread(&self) -> f64 {
        let c: Vec<f64> = self.derivative_constants.iter().skip(1).map(|c| c[0]).collect();
        let hi = c.iter().copied().fold(0.0, f64::max);
        let lo = c.iter().copied().fold(f64::INFINITY, f64::min);
        if lo > 0.0 {
            hi / lo
        } else {
            f64::INFINITY
        }
    }

    /// `Σ_q χ_q²` over the kept layers.
    pub fn coverage(&self) -> ScalarField {
        let mut out = ScalarField::zeros(&self.chi[0].grid);
        for chi in &self.chi {
            for (o, c) in out.values.iter_mut().zip(&chi.values) {
                *o += c * c;
            }
        }
        out
    }

    /// Keep layers `0..=q_max`.
    pub fn truncate(&mut self, q_max: usize) {
        let keep = (q_max + 1).min(self.chi.len());
        self.depths.truncate(keep);
        self.chi.truncate(keep);
        self.derivative_constants.truncate(keep);
    }
}

/// Layers down to the deepest `d_Q ≥ 4` depth spacings.
pub fn build_layers(d0: f64, grid: &Grid) -> Result<WhitneyLayers> {
    if !(d0 > 0.0) {
        return Err(Error::InvalidParameter(format!("depth {d0} must be positive")));
    }
    let n = grid.dim();
    let h = depth_spacing(grid);
    let ratio = d0 / (MIN_LAYER_NODES * h);
    if !(ratio >= 1.0) {
        return Err(Error::Resolution(format!("depth {d0} spans fewer than {MIN_LAYER_NODES} spacings")));
    }
    let deepest = (ratio.log2() + 1e-12).floor() as usize;
    if deepest + 1 < MIN_LAYERS {
        return Err(Error::Resolution(format!(
            "only {} layers resolvable, need {MIN_LAYERS}",
            deepest + 1
        )));
    }
    let rn = depth_resolution(grid);
    let xs: Vec<f64> = (0..rn).map(|k| grid.lo()[n - 1] + k as f64 * h).collect();
    let mut depths = Vec::new();
    let mut chi = Vec::new();
    let mut constants = Vec::new();
    let mut profiles = Vec::new();
    for q in 0..=deepest {
        let dq = d0 * 0.5f64.powi(q as i32);
        let jets: Vec<[f64; 3]> = xs.iter().map(|&x| layer_jet(q as i32, d0, x)).collect();
        let c1 = jets.iter().map(|j| j[1].abs()).fold(0.0, f64::max) * dq;
        let c2 = jets.iter().map(|j| j[2].abs()).fold(0.0, f64::max) * dq * dq;
        let profile: Vec<f64> = jets.iter().map(|j| j[0]).collect();
        let values = (0..grid.len()).map(|idx| profile[idx % rn]).collect();
        depths.push(dq);
        chi.push(ScalarField { grid: *grid, values });
        constants.push([c1, c2]);
        profiles.push(profile);
    }
    let d_last = depths[deepest];
    let mut partition_error = 0.0f64;
    let mut overlap = 0.0f64;
    for (k, &x) in xs.iter().enumerate() {
        if x >= d_last * (1.0 - 1e-12) {
            let s: f64 = profiles.iter().map(|p| p[k] * p[k]).sum();
            partition_error = partition_error.max((s - 1.0).abs());
        }
        for q in 0..profiles.len().saturating_sub(2) {
            overlap = overlap.max((profiles[q][k] * profiles[q + 2][k]).abs());
        }
    }
    Ok(WhitneyLayers { d0, depths, chi, derivative_constants: constants, partition_error, overlap })
}

/// Nodewise check of `g − ∇vᵀ∇v = ρ²(Id + G)` and its bounds.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DefinitionReport {
    /// Nodes examined.
    pub nodes: usize,
    /// `max |G|`.
    pub r: f64,
    /// `max` of the four scaled quantities below.
    pub m: f64,
    /// `max |∇²v| ρ²`, `max |∇ρ| ρ`, `max |∇G| ρ³`.
    pub terms: [f64; 3],
    /// `max |g − ∇vᵀ∇v − ρ²(Id + G)|`.
    pub identity_residual: f64,
}

/// Evaluate the adapted-short bounds on the nodes where `mask` is set.
pub fn definition_report(
    g: &SymTensorField,
    v: &ImmersionJet,
    rho: &ScalarField,
    big_g: &SymTensorField,
    mask: &[bool],
) -> DefinitionReport {
    let grid = *v.grid();
    let n = grid.dim();
    let m = sym_len(n);
    let q = n + 1;
    let hess = gradient_with(&v.jacobian, Stencil::Fourth);
    let drho = gradient_with(rho, Stencil::Fourth);
    let dg = gradient_with(big_g, Stencil::Fourth);
    let metric = v.metric();
    let mut rep = DefinitionReport::default();
    let mut p = [0.0; MAX_SYM];
    for idx in 0..grid.len() {
        if !mask[idx] {
            continue;
        }
        rep.nodes += 1;
        let r = rho.values[idx];
        let r2 = r * r;
        let gi = big_g.at(idx);
        rep.r = rep.r.max(linalg::sym_op_norm(n, gi));
        let hm = hess.matrix(idx);
        let mut h2 = 0.0f64;
        for a in 0..n {
            for b in 0..n {
                let s: f64 = (0..q).map(|rr| hm[(rr * n + a) * n + b].powi(2)).sum();
                h2 = h2.max(s);
            }
        }
        rep.terms[0] = rep.terms[0].max(h2.sqrt() * r2);
        let gr = drho.matrix(idx).iter().map(|x| x * x).sum::<f64>().sqrt();
        rep.terms[1] = rep.terms[1].max(gr * r);
        let dgm = dg.matrix(idx);
        let mut dgn = 0.0f64;
        for b in 0..n {
            for (e, pe) in p.iter_mut().enumerate().take(m) {
                *pe = dgm[e * n + b];
            }
            dgn = dgn.max(linalg::sym_op_norm(n, &p));
        }
        rep.terms[2] = rep.terms[2].max(dgn * r2 * r);
        let (gg, mm) = (g.at(idx), metric.at(idx));
        for e in 0..m {
            p[e] = gg[e] - mm[e] - r2 * gi[e];
        }
        for d in 0..n {
            p[sym_idx(n, d, d)] -= r2;
        }
        rep.identity_residual = rep.identity_residual.max(linalg::sym_op_norm(n, &p));
    }
    rep.m = rep.terms.iter().copied().fold(0.0, f64::max);
    rep
}

/// An immersion short by the conformal-ish factor `ρ²(Id + G)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedShortState {
    pub g: SymTensorField,
    pub v: ImmersionJet,
    pub rho: ScalarField,
    pub big_g: SymTensorField,
    /// Nodes where the bounds are claimed.
    pub resolved: Vec<bool>,
    /// Fraction of the ansatz deficit kept as the conformal part.
    pub tau: f64,
    pub report: DefinitionReport,
}

impl AdaptedShortState {
    pub fn m(&self) -> f64 {
        self.report.m
    }

    pub fn r(&self) -> f64 {
        self.report.r
    }

    /// State with `ρ² = tr(g − ∇vᵀ∇v)/n` and `G = (g − ∇vᵀ∇v)/ρ² − Id`.
    ///
    /// Resolved nodes are those with `ρ > 0` at least two spacings from the
    /// boundary.
    pub fn from_deficit(g: SymTensorField, v: ImmersionJet) -> Result<Self> {
        let grid = *v.grid();
        if g.grid != grid {
            return Err(Error::ShapeMismatch("metric and immersion live on different grids".into()));
        }
        let n = grid.dim();
        let m = sym_len(n);
        let h = g.sub(&v.metric());
        let mut rho = ScalarField::zeros(&grid);
        let mut big_g = SymTensorField::zeros(&grid);
        let mut resolved = vec![false; grid.len()];
        for idx in 0..grid.len() {
            let hi = h.at(idx);
            let r2 = linalg::sym_trace(n, hi) / n as f64;
            if depth_index(&grid, idx) == 0 || !(r2 > RHO_FLOOR * RHO_FLOOR) {
                continue;
            }
            rho.values[idx] = r2.sqrt();
            for e in 0..m {
                big_g.values[idx * m + e] = hi[e] / r2;
            }
            for d in 0..n {
                big_g.values[idx * m + sym_idx(n, d, d)] -= 1.0;
            }
            resolved[idx] = depth_index(&grid, idx) >= 2;
        }
        let report = definition_report(&g, &v, &rho, &big_g, &resolved);
        Ok(AdaptedShortState { g, v, rho, big_g, resolved, tau: 1.0, report })
    }
}

/// Parameters of [`adapted_extension`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtensionConfig {
    /// Stage frequency ratio `K`.
    pub k: f64,
    pub m: f64,
    pub gamma: f64,
    /// Exponent of the per-layer interpolated increments.
    pub alpha0: f64,
    /// Process no layer deeper than this.
    pub max_layer: Option<usize>,
}

impl Default for ExtensionConfig {
    fn default() -> Self {
        ExtensionConfig { k: 2.0, m: 32.0, gamma: 16.0, alpha0: 0.25, max_layer: None }
    }
}

/// Diagnostics of one layer's stage.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub q: usize,
    pub depth: f64,
    pub theta: f64,
    pub frequencies: Vec<f64>,
    pub steps: Vec<StepDiagnostics>,
    pub changed_nodes: usize,
    /// `max |v − u|`, `max |∇v − ∇u|`, `max |∇²(v − u)|` over the layer.
    pub increment: [f64; 3],
    /// `‖v − u‖_0 + ‖v − u‖_1 + ‖v − u‖_1^{1−α0} ‖v − u‖_2^{α0}` over the layer.
    pub interpolated: f64,
    /// `max |G|` over the resolved nodes of the layer.
    pub g_max: f64,
}

/// Output of [`adapted_extension`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedExtension {
    pub state: AdaptedShortState,
    pub k: f64,
    pub ansatz: ShortAnsatz,
    /// Processed layers `0..=Q`.
    pub layers: WhitneyLayers,
    /// Deepest layer the grid spacing resolves.
    pub resolvable_layers: usize,
    pub path: GlobalPath,
    pub direction_count: usize,
    pub layer_reports: Vec<LayerReport>,
    /// Bounds over the unprocessed sliver next to the boundary.
    pub sliver: DefinitionReport,
    /// `min` and `max` of `ρ²/x_n` over resolved nodes.
    pub rho_ratio: (f64, f64),
    /// `max |v − f|` over the boundary.
    pub boundary_trace: f64,
    pub frequency_cap: f64,
    pub max_frequency: f64,
}

fn layer_params(cfg: &ExtensionConfig, q: usize, depth: f64, terms: usize) -> StepParams {
    let theta = if q % 2 == 1 { 1.0 / depth } else { cfg.k.powi(terms as i32) / depth };
    StepParams::new(cfg.m, cfg.gamma, depth, 1.0, theta, theta, 0.0)
}

/// Extend `data` to an adapted short immersion on the resolvable layers.
pub fn adapted_extension(
    data: &BoundaryData,
    cfg: &ExtensionConfig,
    profile: &CorrugationProfile,
) -> Result<AdaptedExtension> {
    let ansatz = short_ansatz(data)?;
    let grid = *ansatz.u.grid();
    let n = grid.dim();
    let m = sym_len(n);
    let q = n + 1;
    let s = &ansatz.deficit;

    let mut rho2 = ScalarField::zeros(&grid);
    let mut tau = f64::INFINITY;
    for idx in 0..grid.len() {
        if depth_index(&grid, idx) == 0 {
            continue;
        }
        let r2 = (linalg::sym_trace(n, s.at(idx)) / n as f64).max(0.0);
        rho2.values[idx] = r2;
        let (lo, _) = linalg::sym_extreme_eigenvalues(n, s.at(idx));
        tau = tau.min(lo / (2.0 * r2));
    }
    // Largest τ with deficit ≥ 2τρ² Id, halved.
    let tau = 0.5 * tau;
    let rho = rho2.map(f64::sqrt);
    let dec = decompose_global(s, &rho, tau)?;
    let count = dec.count();

    let mut layers = build_layers(ansatz.d0, &grid)?;
    let resolvable = layers.deepest();
    let cap = frequency_cap(&grid);
    let mut last = resolvable.min(cfg.max_layer.unwrap_or(usize::MAX));
    let mut max_frequency = 0.0f64;
    for qq in 0..=last {
        let p = layer_params(cfg, qq, layers.depths[qq], count);
        let top = stage_frequencies(&p, cfg.k, count).last().copied().unwrap_or(0.0);
        if top > cap {
            last = qq.saturating_sub(1);
            break;
        }
        max_frequency = max_frequency.max(top);
        if qq == last {
            break;
        }
    }
    if last + 1 < MIN_LAYERS {
        return Err(Error::Resolution(format!(
            "only {} layers fit below the frequency cap {cap:.3e} at K = {}",
            last + 1,
            cfg.k
        )));
    }
    layers.truncate(last);

    let u = &ansatz.u;
    let mut w = u.clone();
    let mut v = u.clone();
    let mut reports: Vec<LayerReport> = Vec::new();
    for parity in [1usize, 0] {
        let base = if parity == 1 { u.clone() } else { w.clone() };
        for qq in (0..=last).filter(|qq| qq % 2 == parity) {
            let chi = &layers.chi[qq];
            let terms: Vec<PrimitiveTerm> = (0..count)
                .map(|k| {
                    let b = &dec.coefficients[k];
                    let values = (0..grid.len()).map(|i| chi.values[i] * rho.values[i] * b.values[i]).collect();
                    PrimitiveTerm { amplitude: ScalarField { grid, values }, direction: dec.direction(k).to_vec() }
                })
                .collect();
            let p = layer_params(cfg, qq, layers.depths[qq], count);
            let res = stage(&base, &terms, &p, cfg.k, profile)?;
            let target = if parity == 1 { &mut w } else { &mut v };
            let mut changed = 0;
            for i in 0..grid.len() {
                if terms.iter().any(|t| t.amplitude.values[i] != 0.0) {
                    changed += 1;
                    target.value.values[i * q..(i + 1) * q].copy_from_slice(&res.v.value.values[i * q..(i + 1) * q]);
                    let c = q * n;
                    target.jacobian.values[i * c..(i + 1) * c]
                        .copy_from_slice(&res.v.jacobian.values[i * c..(i + 1) * c]);
                }
            }
            reports.push(LayerReport {
                q: qq,
                depth: layers.depths[qq],
                theta: p.theta,
                frequencies: res.frequencies.clone(),
                steps: res.steps.clone(),
                changed_nodes: changed,
                increment: [0.0; 3],
                interpolated: 0.0,
                g_max: 0.0,
            });
        }
        if parity == 1 {
            v = w.clone();
        }
    }
    reports.sort_by_key(|r| r.q);

    // Assemble ρ_out and G from the achieved metric.
    let coverage = layers.coverage();
    let h = ansatz.g.sub(&v.metric());
    let mut rho_out = ScalarField::zeros(&grid);
    let mut big_g = SymTensorField::zeros(&grid);
    let mut resolved = vec![false; grid.len()];
    let mut sliver = vec![false; grid.len()];
    let mut ratio = (f64::INFINITY, 0.0f64);
    for idx in 0..grid.len() {
        let k = depth_index(&grid, idx);
        if k == 0 {
            continue;
        }
        let cov = coverage.values[idx].min(1.0);
        let r2 = tau * rho2.values[idx] * cov + (1.0 - cov) * rho2.values[idx];
        if !(r2 > 0.0) {
            continue;
        }
        rho_out.values[idx] = r2.sqrt();
        let hi = h.at(idx);
        for e in 0..m {
            big_g.values[idx * m + e] = hi[e] / r2;
        }
        for d in 0..n {
            big_g.values[idx * m + sym_idx(n, d, d)] -= 1.0;
        }
        if coverage.values[idx] >= 1.0 - PARTITION_TOLERANCE {
            resolved[idx] = true;
            let x = grid.coord(idx, n - 1);
            ratio = (ratio.0.min(r2 / x), ratio.1.max(r2 / x));
        } else if k >= 2 {
            sliver[idx] = true;
        }
    }
    let report = definition_report(&ansatz.g, &v, &rho_out, &big_g, &resolved);
    let sliver_report = definition_report(&ansatz.g, &v, &rho_out, &big_g, &sliver);

    // Per-layer increments over Ω_q.
    let dj = v.jacobian.sub(&u.jacobian);
    let d2 = gradient_with(&dj, Stencil::Fourth);
    let g_ops = big_g.op_norms();
    for rep in reports.iter_mut() {
        let lo = rep.depth / 2.0;
        let hi = rep.depth * 2.0;
        let mut inc = [0.0f64; 3];
        for idx in 0..grid.len() {
            let x = grid.coord(idx, n - 1);
            if !(x > lo && x < hi) {
                continue;
            }
            let d0 = (0..q).map(|r| (v.value.values[idx * q + r] - u.value.values[idx * q + r]).powi(2)).sum::<f64>();
            inc[0] = inc[0].max(d0.sqrt());
            inc[1] = inc[1].max(dj.matrix(idx).iter().map(|x| x * x).sum::<f64>().sqrt());
            inc[2] = inc[2].max(d2.matrix(idx).iter().fold(0.0, |a: f64, b| a.max(b.abs())));
            if resolved[idx] {
                rep.g_max = rep.g_max.max(g_ops.values[idx]);
            }
        }
        rep.increment = inc;
        rep.interpolated = inc[0] + inc[1] + inc[1].powf(1.0 - cfg.alpha0) * inc[2].powf(cfg.alpha0);
    }

    let mut trace = 0.0f64;
    for j in 0..sigma_count(&grid) {
        let idx = sigma_node(&grid, j);
        for r in 0..q {
            trace = trace.max((v.value.values[idx * q + r] - data.f[j * q + r]).abs());
        }
    }

    let state = AdaptedShortState { g: ansatz.g.clone(), v, rho: rho_out, big_g, resolved, tau, report };
    Ok(AdaptedExtension {
        state,
        k: cfg.k,
        path: dec.path,
        direction_count: count,
        layers,
        resolvable_layers: resolvable,
        layer_reports: reports,
        sliver: sliver_report,
        rho_ratio: ratio,
        boundary_trace: trace,
        frequency_cap: cap,
        max_frequency,
        ansatz,
    })
}

/// Run [`adapted_extension`] for each `K` in turn and return the first whose
/// reported `M` stays within `m_limit`.
pub fn extension_sweep(
    data: &BoundaryData,
    ks: &[f64],
    cfg: &ExtensionConfig,
    m_limit: f64,
    profile: &CorrugationProfile,
) -> Result<AdaptedExtension> {
    let mut worst = String::new();
    for &k in ks {
        let ext = adapted_extension(data, &ExtensionConfig { k, ..*cfg }, profile)?;
        if ext.state.report.m <= m_limit {
            return Ok(ext);
        }
        worst = format!("K = {k}: M = {:.3e} exceeds {m_limit:.3e}", ext.state.report.m);
    }
    Err(Error::ExtensionFailure(if worst.is_empty() { "empty K sweep".into() } else { worst }))
}

/// Ready-made boundary data and states on two-dimensional charts.
pub mod demo {
    use super::*;

    fn chart(half_width: f64, depth: f64, res: [usize; 2]) -> Result<Grid> {
        Grid::new(&[-half_width, 0.0], &[half_width, depth], &res)
    }

    /// Arc of radius `r` in the plane `x3 = 0`, flat metric.
    ///
    /// `inward` selects the normal pointing to the centre, which satisfies
    /// the convexity condition with margin `1/r`.
    pub fn arc(r: f64, half_width: f64, depth: f64, res: [usize; 2], inward: bool) -> Result<BoundaryData> {
        let sign = if inward { -1.0 } else { 1.0 };
        BoundaryData::from_fn(
            chart(half_width, depth, res)?,
            |x, out| {
                let t = x[0] / r;
                out.copy_from_slice(&[r * t.cos(), r * t.sin(), 0.0]);
            },
            |x, out| {
                let t = x[0] / r;
                out.copy_from_slice(&[sign * t.cos(), sign * t.sin(), 0.0]);
            },
            |_, g| g.copy_from_slice(&[1.0, 0.0, 1.0]),
            depth,
        )
    }

    /// Straight segment with an in-plane normal, flat metric: margin zero.
    pub fn line(half_width: f64, depth: f64, res: [usize; 2]) -> Result<BoundaryData> {
        BoundaryData::from_fn(
            chart(half_width, depth, res)?,
            |x, out| out.copy_from_slice(&[x[0], 0.0, 0.0]),
            |_, out| out.copy_from_slice(&[0.0, 1.0, 0.0]),
            |_, g| g.copy_from_slice(&[1.0, 0.0, 1.0]),
            depth,
        )
    }

    /// `v = e^{−x2}(cos x1, sin x1, 0)` with its exact Jacobian.
    ///
    /// Conformal with factor `e^{−2x2}`, so against the flat metric it is
    /// adapted short with `ρ² = 1 − e^{−2x2}` and `G = 0`, and it restricts
    /// to the unit arc on the boundary.
    pub fn conformal_arc_jet(grid: &Grid) -> Result<ImmersionJet> {
        if grid.dim() != 2 {
            return Err(Error::InvalidGrid("conformal arc needs a two-dimensional chart".into()));
        }
        let mut value = ImmersionField { grid: *grid, values: vec![0.0; grid.len() * 3] };
        let mut jac = JacobianField::zeros(grid, 3);
        for idx in 0..grid.len() {
            let x = grid.point(idx);
            let e = (-x[1]).exp();
            let (s, c) = x[0].sin_cos();
            value.values[idx * 3..idx * 3 + 3].copy_from_slice(&[e * c, e * s, 0.0]);
            jac.values[idx * 6..idx * 6 + 6].copy_from_slice(&[-e * s, -e * c, e * c, -e * s, 0.0, 0.0]);
        }
        ImmersionJet::from_parts(value, jac)
    }

    /// [`conformal_arc_jet`] as an adapted short state against the flat metric.
    pub fn conformal_arc(grid: &Grid) -> Result<AdaptedShortState> {
        let v = conformal_arc_jet(grid)?;
        AdaptedShortState::from_deficit(SymTensorField::identity(grid), v)
    }
}
