//! Primitive-metric decompositions `P = Σ a_k² ν_k ⊗ ν_k`.
//!
//! A [`DirectionFrame`] fixes `n* = n(n+1)/2` unit directions whose rank-one
//! matrices span the symmetric matrices, so the coefficients `c_k = a_k²` are
//! linear functionals of `P`. Two frames are provided:
//!
//! * [`DirectionFrame::standard`]: `{e_i} ∪ {(e_i+e_j)/√2}`. The identity has
//!   coefficients `(1, …, 1, 0, …, 0)`, so its admissible radius is zero.
//! * [`DirectionFrame::balanced`]: the diagonal directions are tilted to
//!   `e_i − β Σ_{j≠i} e_j` (normalised), which puts the identity strictly
//!   inside the coefficient cone and gives a positive radius.
//!
//! [`decompose_global`] handles matrix fields far from the identity.

use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;

use crate::error::{Error, Result};
use crate::fields::{ScalarField, SymTensorField};
use crate::linalg::{self, sym_idx, sym_len, MAX_DIM, MAX_SYM};

/// Coefficients below this (relative to the trace) are rounded to zero.
const ROUNDING_FLOOR: f64 = 1e-14;

/// Which construction produced a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameKind {
    Standard,
    Balanced { beta_milli: u32 },
}

/// `n*` unit directions with the inverse of their coefficient map.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionFrame {
    n: usize,
    kind: FrameKind,
    directions: Vec<f64>,
    inverse: Vec<f64>,
    r0: f64,
}

impl DirectionFrame {
    /// `{e_i} ∪ {(e_i + e_j)/√2 : i < j}`.
    pub fn standard(n: usize) -> Result<Self> {
        check_dim(n)?;
        let mut dirs = Vec::with_capacity(sym_len(n) * n);
        for i in 0..n {
            dirs.extend((0..n).map(|k| if k == i { 1.0 } else { 0.0 }));
        }
        push_cross_directions(n, &mut dirs);
        DirectionFrame::from_directions(n, FrameKind::Standard, dirs)
    }

    /// Tilted frame with the tilt chosen to maximise the admissible radius
    /// over a fixed sweep.
    pub fn balanced(n: usize) -> Result<Self> {
        check_dim(n)?;
        let upper = if n > 2 { (2.0 / (n as f64 - 2.0)).min(2.0) } else { 2.0 };
        let mut best: Option<DirectionFrame> = None;
        for i in 1..200 {
            let beta = upper * i as f64 / 200.0;
            if let Ok(f) = DirectionFrame::tilted(n, beta) {
                if best.as_ref().is_none_or(|b| f.r0 > b.r0) {
                    best = Some(f);
                }
            }
        }
        best.ok_or_else(|| Error::InvalidParameter("no admissible tilt".into()))
    }

    /// Balanced-type frame with an explicit tilt `beta`.
    pub fn tilted(n: usize, beta: f64) -> Result<Self> {
        check_dim(n)?;
        let mut dirs = Vec::with_capacity(sym_len(n) * n);
        let norm = (1.0 + beta * beta * (n as f64 - 1.0)).sqrt();
        for i in 0..n {
            dirs.extend((0..n).map(|k| if k == i { 1.0 / norm } else { -beta / norm }));
        }
        push_cross_directions(n, &mut dirs);
        let kind = FrameKind::Balanced { beta_milli: (beta * 1000.0).round() as u32 };
        DirectionFrame::from_directions(n, kind, dirs)
    }

    /// Frame from explicit unit directions (row `k` of `dirs` is `ν_k`).
    pub fn from_directions(n: usize, kind: FrameKind, dirs: Vec<f64>) -> Result<Self> {
        let m = sym_len(n);
        if dirs.len() != m * n {
            return Err(Error::ShapeMismatch("frame needs n(n+1)/2 directions".into()));
        }
        // a[e][k] = (ν_k ν_kᵀ)_e
        let mut a = vec![0.0; m * m];
        for k in 0..m {
            let v = &dirs[k * n..(k + 1) * n];
            for i in 0..n {
                for j in i..n {
                    a[sym_idx(n, i, j) * m + k] = v[i] * v[j];
                }
            }
        }
        let mut inverse = vec![0.0; m * m];
        for e in 0..m {
            let mut lhs = a.clone();
            let mut rhs = vec![0.0; m];
            rhs[e] = 1.0;
            if !linalg::solve_in_place(m, &mut lhs, &mut rhs) {
                return Err(Error::InvalidParameter("rank-one directions are linearly dependent".into()));
            }
            for k in 0..m {
                inverse[k * m + e] = rhs[k];
            }
        }
        let mut frame = DirectionFrame { n, kind, directions: dirs, inverse, r0: 0.0 };
        frame.r0 = frame.calibrate_radius();
        Ok(frame)
    }

    pub fn dim(&self) -> usize {
        self.n
    }
    pub fn kind(&self) -> FrameKind {
        self.kind
    }
    /// Number of directions `n*`.
    pub fn len(&self) -> usize {
        sym_len(self.n)
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    /// Direction `ν_k`.
    pub fn direction(&self, k: usize) -> &[f64] {
        &self.directions[k * self.n..(k + 1) * self.n]
    }
    /// Admissible radius `r0`.
    pub fn r0(&self) -> f64 {
        self.r0
    }
    /// `r1 = r0 / 25`.
    pub fn r1(&self) -> f64 {
        self.r0 / 25.0
    }
    /// `r2 = 5 r1`.
    pub fn r2(&self) -> f64 {
        self.r0 / 5.0
    }

    /// Linear coefficients `c_k(P)` with `Σ c_k ν_k ν_kᵀ = P`.
    #[inline]
    pub fn coefficients(&self, p: &[f64]) -> [f64; MAX_SYM] {
        let m = sym_len(self.n);
        let mut c = [0.0; MAX_SYM];
        for (k, ck) in c.iter_mut().enumerate().take(m) {
            let row = &self.inverse[k * m..(k + 1) * m];
            *ck = row.iter().zip(&p[..m]).map(|(a, b)| a * b).sum();
        }
        c
    }

    /// `a_k = √c_k(P)`; a negative coefficient means `P` is outside the radius.
    pub fn decompose_near_identity(&self, p: &[f64]) -> Result<Vec<f64>> {
        let m = sym_len(self.n);
        let c = self.coefficients(p);
        let scale = linalg::sym_trace(self.n, p).abs().max(1.0);
        let mut out = Vec::with_capacity(m);
        for (k, &ck) in c.iter().enumerate().take(m) {
            if ck < -ROUNDING_FLOOR * scale {
                return Err(Error::OutOfRadius { index: k, value: ck });
            }
            out.push(ck.max(0.0).sqrt());
        }
        Ok(out)
    }

    /// `Σ c_k ν_k ν_kᵀ`, packed.
    pub fn reconstruct(&self, c: &[f64]) -> [f64; MAX_SYM] {
        let n = self.n;
        let mut p = [0.0; MAX_SYM];
        for (k, &ck) in c.iter().enumerate().take(sym_len(n)) {
            let v = self.direction(k);
            for i in 0..n {
                for j in i..n {
                    p[sym_idx(n, i, j)] += ck * v[i] * v[j];
                }
            }
        }
        p
    }

    /// Gram matrix of functional `c_k` under the Frobenius pairing.
    fn functional_matrix(&self, k: usize) -> [f64; MAX_SYM] {
        let n = self.n;
        let m = sym_len(n);
        let mut b = [0.0; MAX_SYM];
        for i in 0..n {
            for j in i..n {
                let e = sym_idx(n, i, j);
                let w = self.inverse[k * m + e];
                b[e] = if i == j { w } else { 0.5 * w };
            }
        }
        b
    }

    /// Largest `r` with `c_k(P) >= 0` whenever `|P - Id| <= r`, halved.
    ///
    /// The minimum of `c_k(Id + H)` over `|H| <= r` is `c_k(Id) - r ‖B_k‖_*`
    /// with `B_k` the functional's matrix and `‖·‖_*` the nuclear norm.
    fn calibrate_radius(&self) -> f64 {
        let n = self.n;
        let id = identity_packed(n);
        let c = self.coefficients(&id);
        let mut r = f64::INFINITY;
        for (k, &ck) in c.iter().enumerate().take(sym_len(n)) {
            let (vals, _) = linalg::sym_eigen(n, &self.functional_matrix(k));
            let nuclear: f64 = vals[..n].iter().map(|v| v.abs()).sum();
            let rk = if ck <= ROUNDING_FLOOR { 0.0 } else { ck / nuclear };
            r = r.min(rk);
        }
        (0.5 * r).min(0.99)
    }
}

fn check_dim(n: usize) -> Result<()> {
    if !(2..=MAX_DIM).contains(&n) {
        return Err(Error::InvalidParameter(alloc::format!("dimension {n} outside [2, {MAX_DIM}]")));
    }
    Ok(())
}

fn push_cross_directions(n: usize, dirs: &mut Vec<f64>) {
    let h = core::f64::consts::FRAC_1_SQRT_2;
    for i in 0..n {
        for j in (i + 1)..n {
            dirs.extend((0..n).map(|k| if k == i || k == j { h } else { 0.0 }));
        }
    }
}

/// Packed identity matrix.
pub fn identity_packed(n: usize) -> [f64; MAX_SYM] {
    let mut p = [0.0; MAX_SYM];
    for i in 0..n {
        p[sym_idx(n, i, i)] = 1.0;
    }
    p
}

/// The standard frame `{e_i} ∪ {(e_i+e_j)/√2}`.
pub fn standard_frame(n: usize) -> Result<DirectionFrame> {
    DirectionFrame::standard(n)
}

/// Coefficients `a_k` of `P` in `frame`.
pub fn decompose_near_identity(p: &[f64], frame: &DirectionFrame) -> Result<Vec<f64>> {
    frame.decompose_near_identity(p)
}

/// Branch taken by [`decompose_global`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlobalPath {
    /// Standard frame with every coefficient either identically zero or
    /// bounded away from zero.
    Standard,
    /// Balanced frame around the identity, scaled by the mean eigenvalue.
    NearIdentity,
    /// Covering of the normalised matrices by base points with a partition
    /// of unity in matrix space.
    Covering,
}

/// `S/ρ² − τ Id = Σ_k b̄_k² ϖ_k ⊗ ϖ_k` on `{ρ > 0}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDecomposition {
    pub n: usize,
    /// Row `k` is `ϖ_k`.
    pub directions: Vec<f64>,
    pub coefficients: Vec<ScalarField>,
    pub tau: f64,
    pub path: GlobalPath,
    pub base_points: usize,
}

impl GlobalDecomposition {
    pub fn count(&self) -> usize {
        self.coefficients.len()
    }
    pub fn direction(&self, k: usize) -> &[f64] {
        &self.directions[k * self.n..(k + 1) * self.n]
    }
    /// `Σ_k b̄_k² ϖ_k ⊗ ϖ_k` at every node.
    pub fn reconstruct(&self) -> SymTensorField {
        let grid = *self.coefficients.first().map(|c| &c.grid).expect("non-empty");
        let n = self.n;
        let mut out = SymTensorField::zeros(&grid);
        let m = sym_len(n);
        for (k, b) in self.coefficients.iter().enumerate() {
            let v = self.direction(k);
            for idx in 0..grid.len() {
                let w = b.values[idx] * b.values[idx];
                if w == 0.0 {
                    continue;
                }
                for i in 0..n {
                    for j in i..n {
                        out.values[idx * m + sym_idx(n, i, j)] += w * v[i] * v[j];
                    }
                }
            }
        }
        out
    }
}

/// Smallest `ρ` treated as nonzero.
pub const RHO_FLOOR: f64 = 2.0 * f64::EPSILON;
/// Relative size below which a standard-frame coefficient counts as absent;
/// sits above the difference noise of sampled Jacobians.
pub const ZERO_COLUMN: f64 = 1e-6;
/// Relative coefficient margin required for the standard branch.
pub const STANDARD_MARGIN: f64 = 0.05;

/// Decompose `S/ρ² − τ Id` into primitive metrics with fixed directions.
pub fn decompose_global(s: &SymTensorField, rho: &ScalarField, tau: f64) -> Result<GlobalDecomposition> {
    let grid = s.grid;
    let n = grid.dim();
    let m = sym_len(n);
    if rho.grid != grid {
        return Err(Error::ShapeMismatch("S and ρ live on different grids".into()));
    }
    let active: Vec<usize> = (0..grid.len()).filter(|&i| rho.values[i] > RHO_FLOOR).collect();
    let mut q = vec![0.0; grid.len() * m];
    for &i in &active {
        let r2 = rho.values[i] * rho.values[i];
        let qi = &mut q[i * m..(i + 1) * m];
        for (e, v) in qi.iter_mut().enumerate() {
            *v = s.values[i * m + e] / r2;
        }
        for d in 0..n {
            qi[sym_idx(n, d, d)] -= tau;
        }
        let (lo, _) = linalg::sym_extreme_eigenvalues(n, qi);
        if !(lo > 0.0) {
            return Err(Error::MarginViolation { node: i, value: lo });
        }
    }
    let shifted = Shifted { q: &q, n };
    let qi = |i: usize| shifted.at(i);
    let mean = |i: usize| shifted.mean(i);

    let standard = DirectionFrame::standard(n)?;
    if let Some(d) = try_frame_columns(&standard, &active, &shifted, grid.len(), tau, GlobalPath::Standard)? {
        return Ok(d.with_grid(&grid));
    }
    let balanced = DirectionFrame::balanced(n)?;
    let near = active.iter().all(|&i| {
        let lb = mean(i);
        let mut p = [0.0; MAX_SYM];
        for e in 0..m {
            p[e] = qi(i)[e] / lb;
        }
        for d in 0..n {
            p[sym_idx(n, d, d)] -= 1.0;
        }
        linalg::sym_op_norm(n, &p) <= balanced.r0()
    });
    if near {
        let d = try_frame_columns(&balanced, &active, &shifted, grid.len(), tau, GlobalPath::NearIdentity)?
            .expect("coefficients are nonnegative inside the radius");
        return Ok(d.with_grid(&grid));
    }
    covering(&balanced, &active, &shifted, grid.len(), tau).map(|d| d.with_grid(&grid))
}

/// Packed `S/ρ² − τ Id` per node.
struct Shifted<'a> {
    q: &'a [f64],
    n: usize,
}

impl Shifted<'_> {
    fn at(&self, i: usize) -> &[f64] {
        let m = sym_len(self.n);
        &self.q[i * m..(i + 1) * m]
    }
    fn mean(&self, i: usize) -> f64 {
        linalg::sym_trace(self.n, self.at(i)) / self.n as f64
    }
}

struct RawDecomposition {
    n: usize,
    directions: Vec<f64>,
    coefficients: Vec<Vec<f64>>,
    tau: f64,
    path: GlobalPath,
    base_points: usize,
}

impl RawDecomposition {
    fn with_grid(self, grid: &crate::fields::Grid) -> GlobalDecomposition {
        GlobalDecomposition {
            n: self.n,
            directions: self.directions,
            coefficients: self
                .coefficients
                .into_iter()
                .map(|values| ScalarField { grid: *grid, values })
                .collect(),
            tau: self.tau,
            path: self.path,
            base_points: self.base_points,
        }
    }
}

/// Decompose every active node in one frame, dropping identically zero columns.
///
/// For [`GlobalPath::Standard`] the frame is accepted only if each column is
/// identically zero or bounded below by [`STANDARD_MARGIN`] times the mean
/// eigenvalue; `None` is returned otherwise.
fn try_frame_columns(
    frame: &DirectionFrame,
    active: &[usize],
    q: &Shifted,
    len: usize,
    tau: f64,
    path: GlobalPath,
) -> Result<Option<RawDecomposition>> {
    let n = frame.dim();
    let m = frame.len();
    let mut cols = vec![vec![0.0; len]; m];
    let mut zero = vec![true; m];
    let mut margin_ok = vec![true; m];
    for &i in active {
        let c = frame.coefficients(q.at(i));
        let lb = q.mean(i);
        for k in 0..m {
            let rel = c[k] / lb;
            if rel.abs() > ZERO_COLUMN {
                zero[k] = false;
            }
            if rel < STANDARD_MARGIN {
                margin_ok[k] = false;
            }
            if path != GlobalPath::Standard && rel < -ROUNDING_FLOOR {
                return Err(Error::OutOfRadius { index: k, value: c[k] });
            }
            cols[k][i] = c[k].max(0.0).sqrt();
        }
    }
    if path == GlobalPath::Standard && (0..m).any(|k| !zero[k] && !margin_ok[k]) {
        return Ok(None);
    }
    let mut directions = Vec::new();
    let mut coefficients = Vec::new();
    for k in 0..m {
        if zero[k] && path == GlobalPath::Standard {
            continue;
        }
        directions.extend_from_slice(frame.direction(k));
        coefficients.push(core::mem::take(&mut cols[k]));
    }
    Ok(Some(RawDecomposition { n, directions, coefficients, tau, path, base_points: 1 }))
}

/// Smooth step: 1 on `[0, 1/2]`, 0 on `[1, ∞)`.
fn cover_weight(t: f64) -> f64 {
    let h = |x: f64| if x > 0.0 { (-1.0 / x).exp() } else { 0.0 };
    let a = h(1.0 - t);
    let b = h(t - 0.5);
    if a + b == 0.0 {
        0.0
    } else {
        a / (a + b)
    }
}

struct BasePoint {
    inv_sqrt: [f64; MAX_DIM * MAX_DIM],
    directions: Vec<f64>,
    weights: Vec<f64>,
}

impl BasePoint {
    fn new(frame: &DirectionFrame, b: &[f64]) -> Self {
        let n = frame.dim();
        let mut root = [0.0; MAX_DIM * MAX_DIM];
        let mut inv_sqrt = [0.0; MAX_DIM * MAX_DIM];
        linalg::sym_sqrt(n, b, &mut root);
        linalg::sym_inv_sqrt(n, b, &mut inv_sqrt);
        let mut directions = Vec::new();
        let mut weights = Vec::new();
        for k in 0..frame.len() {
            let v = frame.direction(k);
            let mut w = [0.0; MAX_DIM];
            for i in 0..n {
                w[i] = (0..n).map(|j| root[i * n + j] * v[j]).sum();
            }
            let norm2: f64 = w[..n].iter().map(|x| x * x).sum();
            let norm = norm2.sqrt();
            directions.extend(w[..n].iter().map(|x| x / norm));
            weights.push(norm2);
        }
        BasePoint { inv_sqrt, directions, weights }
    }

    /// `B^{-1/2} P B^{-1/2}` and its distance from the identity ray.
    fn transform(&self, n: usize, p: &[f64]) -> ([f64; MAX_SYM], f64) {
        let mut full = [0.0; MAX_DIM * MAX_DIM];
        linalg::sym_unpack(n, p, &mut full);
        let r = &self.inv_sqrt;
        let mut t = [0.0; MAX_DIM * MAX_DIM];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for a in 0..n {
                    for b in 0..n {
                        s += r[i * n + a] * full[a * n + b] * r[b * n + j];
                    }
                }
                t[i * n + j] = s;
            }
        }
        let mut packed = [0.0; MAX_SYM];
        linalg::sym_pack(n, &t, &mut packed);
        let scale = linalg::sym_trace(n, &packed) / n as f64;
        let mut dev = [0.0; MAX_SYM];
        for e in 0..sym_len(n) {
            dev[e] = packed[e] / scale;
        }
        for d in 0..n {
            dev[sym_idx(n, d, d)] -= 1.0;
        }
        (packed, linalg::sym_op_norm(n, &dev))
    }
}

fn covering(
    frame: &DirectionFrame,
    active: &[usize],
    q: &Shifted,
    len: usize,
    tau: f64,
) -> Result<RawDecomposition> {
    let n = frame.dim();
    let m = frame.len();
    let r0 = frame.r0();
    let mut bases: Vec<BasePoint> = Vec::new();
    for &i in active {
        let covered = bases.iter().any(|b| b.transform(n, q.at(i)).1 <= 0.5 * r0);
        if !covered {
            let lb = q.mean(i);
            let mut p = [0.0; MAX_SYM];
            for e in 0..m {
                p[e] = q.at(i)[e] / lb;
            }
            bases.push(BasePoint::new(frame, &p));
        }
    }
    let mut cols = vec![vec![0.0; len]; m * bases.len()];
    let mut weights = vec![0.0; bases.len()];
    let mut transformed = vec![[0.0; MAX_SYM]; bases.len()];
    for &i in active {
        let mut total = 0.0;
        for (b, base) in bases.iter().enumerate() {
            let (p, d) = base.transform(n, q.at(i));
            weights[b] = cover_weight(d / r0);
            transformed[b] = p;
            total += weights[b];
        }
        for (b, base) in bases.iter().enumerate() {
            if weights[b] == 0.0 {
                continue;
            }
            let psi2 = weights[b] / total;
            let c = frame.coefficients(&transformed[b]);
            for k in 0..m {
                if c[k] < -ROUNDING_FLOOR * q.mean(i) {
                    return Err(Error::OutOfRadius { index: b * m + k, value: c[k] });
                }
                cols[b * m + k][i] = (psi2 * c[k].max(0.0) * base.weights[k]).sqrt();
            }
        }
    }
    let directions = bases.iter().flat_map(|b| b.directions.iter().copied()).collect();
    Ok(RawDecomposition { n, directions, coefficients: cols, tau, path: GlobalPath::Covering, base_points: bases.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_frame_has_zero_radius() {
        let f = DirectionFrame::standard(2).unwrap();
        assert_eq!(f.len(), 3);
        assert_eq!(f.r0(), 0.0);
    }

    #[test]
    fn balanced_frame_has_positive_radius() {
        for n in 2..=4 {
            let f = DirectionFrame::balanced(n).unwrap();
            assert!(f.r0() > 0.05 && f.r0() < 1.0, "n = {n}: r0 = {}", f.r0());
            assert!(f.r1() <= f.r2() / 5.0 + 1e-15 && f.r2() / 5.0 <= f.r0() / 25.0 + 1e-15);
        }
    }

    #[test]
    fn cover_weight_plateaus() {
        assert_eq!(cover_weight(0.2), 1.0);
        assert_eq!(cover_weight(1.0), 0.0);
        let mid = cover_weight(0.75);
        assert!(mid > 0.0 && mid < 1.0);
    }
}
