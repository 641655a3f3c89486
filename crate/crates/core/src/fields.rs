//! Grid-sampled fields over a rectangular chart.
//!
//! Every field stores its samples node-major: the components of one node are
//! contiguous, and nodes are enumerated row-major with the last axis fastest.
//! Derivatives are finite differences, mollification is a discrete convolution
//! with a compactly supported smooth kernel, and Hölder norms are estimated
//! over node pairs.

use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;

use crate::error::{Error, Result};
use crate::linalg::{self, MAX_DIM};

/// Minimum number of samples per axis.
pub const MIN_RESOLUTION: usize = 9;

/// Rectangular sampling lattice `lo[i] + k * spacing[i]`, `k < resolution[i]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    n: usize,
    lo: [f64; MAX_DIM],
    hi: [f64; MAX_DIM],
    res: [usize; MAX_DIM],
    spacing: [f64; MAX_DIM],
    strides: [usize; MAX_DIM],
    len: usize,
}

impl Grid {
    /// Build a grid; `lo`, `hi` and `res` must all have length `n`.
    pub fn new(lo: &[f64], hi: &[f64], res: &[usize]) -> Result<Self> {
        let n = lo.len();
        if n < 2 || n > MAX_DIM {
            return Err(Error::InvalidGrid(alloc::format!(
                "dimension {n} outside [2, {MAX_DIM}]"
            )));
        }
        if hi.len() != n || res.len() != n {
            return Err(Error::InvalidGrid("bounds and resolution lengths differ".into()));
        }
        let mut g = Grid {
            n,
            lo: [0.0; MAX_DIM],
            hi: [0.0; MAX_DIM],
            res: [1; MAX_DIM],
            spacing: [0.0; MAX_DIM],
            strides: [0; MAX_DIM],
            len: 1,
        };
        for i in 0..n {
            if !(lo[i].is_finite() && hi[i].is_finite() && lo[i] < hi[i]) {
                return Err(Error::InvalidGrid(alloc::format!("axis {i}: need finite lo < hi")));
            }
            if res[i] < MIN_RESOLUTION {
                return Err(Error::InvalidGrid(alloc::format!(
                    "axis {i}: resolution {} below {MIN_RESOLUTION}",
                    res[i]
                )));
            }
            g.lo[i] = lo[i];
            g.hi[i] = hi[i];
            g.res[i] = res[i];
            g.spacing[i] = (hi[i] - lo[i]) / (res[i] - 1) as f64;
        }
        let mut stride = 1;
        for i in (0..n).rev() {
            g.strides[i] = stride;
            stride *= res[i];
        }
        g.len = stride;
        Ok(g)
    }

    /// Square grid `[lo, hi]^n` with `res` samples per axis.
    pub fn cube(n: usize, lo: f64, hi: f64, res: usize) -> Result<Self> {
        Grid::new(&vec![lo; n], &vec![hi; n], &vec![res; n])
    }

    pub fn dim(&self) -> usize {
        self.n
    }
    pub fn len(&self) -> usize {
        self.len
    }
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
    pub fn lo(&self) -> &[f64] {
        &self.lo[..self.n]
    }
    pub fn hi(&self) -> &[f64] {
        &self.hi[..self.n]
    }
    pub fn resolution(&self) -> &[usize] {
        &self.res[..self.n]
    }
    pub fn spacing(&self) -> &[f64] {
        &self.spacing[..self.n]
    }
    pub fn strides(&self) -> &[usize] {
        &self.strides[..self.n]
    }
    pub fn max_spacing(&self) -> f64 {
        self.spacing().iter().fold(0.0, |a, &b| a.max(b))
    }
    pub fn min_spacing(&self) -> f64 {
        self.spacing().iter().fold(f64::INFINITY, |a, &b| a.min(b))
    }

    /// Per-axis indices of a node.
    #[inline]
    pub fn multi_index(&self, mut idx: usize) -> [usize; MAX_DIM] {
        let mut m = [0; MAX_DIM];
        for i in (0..self.n).rev() {
            m[i] = idx % self.res[i];
            idx /= self.res[i];
        }
        m
    }

    /// Flat index of per-axis indices.
    #[inline]
    pub fn flat_index(&self, m: &[usize]) -> usize {
        (0..self.n).map(|i| m[i] * self.strides[i]).sum()
    }

    /// Coordinate of node `idx` along `axis`.
    #[inline]
    pub fn coord(&self, idx: usize, axis: usize) -> f64 {
        let k = (idx / self.strides[axis]) % self.res[axis];
        self.lo[axis] + k as f64 * self.spacing[axis]
    }

    /// Chart coordinates of node `idx`.
    #[inline]
    pub fn point(&self, idx: usize) -> [f64; MAX_DIM] {
        let m = self.multi_index(idx);
        let mut x = [0.0; MAX_DIM];
        for i in 0..self.n {
            x[i] = self.lo[i] + m[i] as f64 * self.spacing[i];
        }
        x
    }

    /// True when the node lies on the boundary of the box.
    pub fn is_boundary(&self, idx: usize) -> bool {
        let m = self.multi_index(idx);
        (0..self.n).any(|i| m[i] == 0 || m[i] + 1 == self.res[i])
    }

    /// Same grid restricted to the first `count` samples of `axis`.
    pub fn truncate_axis(&self, axis: usize, count: usize) -> Result<Self> {
        let mut hi = [0.0; MAX_DIM];
        let mut res = [0; MAX_DIM];
        hi[..self.n].copy_from_slice(self.hi());
        res[..self.n].copy_from_slice(self.resolution());
        res[axis] = count;
        hi[axis] = self.lo[axis] + (count as f64 - 1.0) * self.spacing[axis];
        Grid::new(self.lo(), &hi[..self.n], &res[..self.n])
    }
}

/// Common interface of all sampled fields.
pub trait SampledField: Sized + Clone {
    fn grid(&self) -> &Grid;
    /// Number of real components per node.
    fn components(&self) -> usize;
    fn values(&self) -> &[f64];
    fn values_mut(&mut self) -> &mut [f64];
    /// Field of the same shape holding `values`.
    fn with_values(&self, values: Vec<f64>) -> Self;

    /// Components of node `idx`.
    #[inline]
    fn at(&self, idx: usize) -> &[f64] {
        let c = self.components();
        &self.values()[idx * c..(idx + 1) * c]
    }

    /// Largest Euclidean norm of a node value.
    fn max_norm(&self) -> f64 {
        let c = self.components();
        self.values()
            .chunks_exact(c)
            .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Componentwise difference `self - other`.
    fn sub(&self, other: &Self) -> Self {
        let v = self.values().iter().zip(other.values()).map(|(a, b)| a - b).collect();
        self.with_values(v)
    }

    /// Componentwise sum `self + other`.
    fn add(&self, other: &Self) -> Self {
        let v = self.values().iter().zip(other.values()).map(|(a, b)| a + b).collect();
        self.with_values(v)
    }

    /// Multiply every component by `s`.
    fn scale(&self, s: f64) -> Self {
        self.with_values(self.values().iter().map(|a| a * s).collect())
    }

    fn all_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

macro_rules! impl_sampled {
    ($t:ty, $comps:expr) => {
        impl SampledField for $t {
            fn grid(&self) -> &Grid {
                &self.grid
            }
            fn components(&self) -> usize {
                #[allow(clippy::redundant_closure_call)]
                ($comps)(self)
            }
            fn values(&self) -> &[f64] {
                &self.values
            }
            fn values_mut(&mut self) -> &mut [f64] {
                &mut self.values
            }
            fn with_values(&self, values: Vec<f64>) -> Self {
                debug_assert_eq!(values.len(), self.values.len());
                let mut out = self.clone_shape();
                out.values = values;
                out
            }
        }
    };
}

/// One real value per node.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: Grid,
    pub values: Vec<f64>,
}

/// A map from the chart into `R^{n+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImmersionField {
    pub grid: Grid,
    pub values: Vec<f64>,
}

/// A vector-valued field of arbitrary dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub grid: Grid,
    pub dim: usize,
    pub values: Vec<f64>,
}

/// A symmetric `n` x `n` matrix per node, packed upper triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct SymTensorField {
    pub grid: Grid,
    pub values: Vec<f64>,
}

/// A `rows` x `n` matrix per node (row-major): the derivative of a field with
/// `rows` components.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianField {
    pub grid: Grid,
    pub rows: usize,
    pub values: Vec<f64>,
}

impl ScalarField {
    fn clone_shape(&self) -> Self {
        ScalarField { grid: self.grid, values: Vec::new() }
    }
    pub fn zeros(grid: &Grid) -> Self {
        ScalarField { grid: *grid, values: vec![0.0; grid.len()] }
    }
    pub fn constant(grid: &Grid, c: f64) -> Self {
        ScalarField { grid: *grid, values: vec![c; grid.len()] }
    }
    pub fn from_fn(grid: &Grid, mut f: impl FnMut(&[f64]) -> f64) -> Self {
        let n = grid.dim();
        let values = (0..grid.len()).map(|i| f(&grid.point(i)[..n])).collect();
        ScalarField { grid: *grid, values }
    }
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |a, &b| a.max(b.abs()))
    }
    /// Nodewise product.
    pub fn mul(&self, other: &ScalarField) -> ScalarField {
        let v = self.values.iter().zip(&other.values).map(|(a, b)| a * b).collect();
        ScalarField { grid: self.grid, values: v }
    }
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> ScalarField {
        ScalarField { grid: self.grid, values: self.values.iter().map(|&v| f(v)).collect() }
    }
}
impl_sampled!(ScalarField, |_s: &ScalarField| 1);

impl ImmersionField {
    fn clone_shape(&self) -> Self {
        ImmersionField { grid: self.grid, values: Vec::new() }
    }
    /// Codomain dimension `n + 1`.
    pub fn codim_dim(&self) -> usize {
        self.grid.dim() + 1
    }
    pub fn from_fn(grid: &Grid, mut f: impl FnMut(&[f64], &mut [f64])) -> Self {
        let n = grid.dim();
        let q = n + 1;
        let mut values = vec![0.0; grid.len() * q];
        for i in 0..grid.len() {
            f(&grid.point(i)[..n], &mut values[i * q..(i + 1) * q]);
        }
        ImmersionField { grid: *grid, values }
    }
    /// The flat inclusion `x -> (x, 0)`.
    pub fn flat(grid: &Grid) -> Self {
        let n = grid.dim();
        ImmersionField::from_fn(grid, |x, out| {
            out[..n].copy_from_slice(x);
            out[n] = 0.0;
        })
    }
}
impl_sampled!(ImmersionField, |s: &ImmersionField| s.grid.dim() + 1);

impl VectorField {
    fn clone_shape(&self) -> Self {
        VectorField { grid: self.grid, dim: self.dim, values: Vec::new() }
    }
    pub fn zeros(grid: &Grid, dim: usize) -> Self {
        VectorField { grid: *grid, dim, values: vec![0.0; grid.len() * dim] }
    }
}
impl_sampled!(VectorField, |s: &VectorField| s.dim);

impl SymTensorField {
    fn clone_shape(&self) -> Self {
        SymTensorField { grid: self.grid, values: Vec::new() }
    }
    pub fn zeros(grid: &Grid) -> Self {
        SymTensorField { grid: *grid, values: vec![0.0; grid.len() * linalg::sym_len(grid.dim())] }
    }
    /// The same packed matrix at every node.
    pub fn constant(grid: &Grid, packed: &[f64]) -> Self {
        let c = linalg::sym_len(grid.dim());
        let mut values = Vec::with_capacity(grid.len() * c);
        for _ in 0..grid.len() {
            values.extend_from_slice(&packed[..c]);
        }
        SymTensorField { grid: *grid, values }
    }
    /// Identity matrix at every node.
    pub fn identity(grid: &Grid) -> Self {
        let n = grid.dim();
        let mut p = [0.0; linalg::MAX_SYM];
        for i in 0..n {
            p[linalg::sym_idx(n, i, i)] = 1.0;
        }
        SymTensorField::constant(grid, &p)
    }
    pub fn from_fn(grid: &Grid, mut f: impl FnMut(&[f64], &mut [f64])) -> Self {
        let n = grid.dim();
        let c = linalg::sym_len(n);
        let mut values = vec![0.0; grid.len() * c];
        for i in 0..grid.len() {
            f(&grid.point(i)[..n], &mut values[i * c..(i + 1) * c]);
        }
        SymTensorField { grid: *grid, values }
    }
    /// Largest operator norm over the nodes.
    pub fn max_op_norm(&self) -> f64 {
        let n = self.grid.dim();
        self.values
            .chunks_exact(linalg::sym_len(n))
            .map(|p| linalg::sym_op_norm(n, p))
            .fold(0.0, f64::max)
    }
    /// Operator norm at every node.
    pub fn op_norms(&self) -> ScalarField {
        let n = self.grid.dim();
        let values = self
            .values
            .chunks_exact(linalg::sym_len(n))
            .map(|p| linalg::sym_op_norm(n, p))
            .collect();
        ScalarField { grid: self.grid, values }
    }
}
impl_sampled!(SymTensorField, |s: &SymTensorField| linalg::sym_len(s.grid.dim()));

impl JacobianField {
    fn clone_shape(&self) -> Self {
        JacobianField { grid: self.grid, rows: self.rows, values: Vec::new() }
    }
    pub fn zeros(grid: &Grid, rows: usize) -> Self {
        JacobianField { grid: *grid, rows, values: vec![0.0; grid.len() * rows * grid.dim()] }
    }
    /// Matrix of node `idx`, row-major `rows` x `n`.
    #[inline]
    pub fn matrix(&self, idx: usize) -> &[f64] {
        let c = self.rows * self.grid.dim();
        &self.values[idx * c..(idx + 1) * c]
    }
    /// Field of row `r` differentiated along `axis`.
    pub fn partial(&self, row: usize, axis: usize) -> ScalarField {
        let n = self.grid.dim();
        let c = self.rows * n;
        let values = (0..self.grid.len()).map(|i| self.values[i * c + row * n + axis]).collect();
        ScalarField { grid: self.grid, values }
    }
    /// Field whose components are all rows differentiated along `axis`.
    pub fn along(&self, axis: usize) -> VectorField {
        let n = self.grid.dim();
        let c = self.rows * n;
        let mut values = Vec::with_capacity(self.grid.len() * self.rows);
        for i in 0..self.grid.len() {
            for r in 0..self.rows {
                values.push(self.values[i * c + r * n + axis]);
            }
        }
        VectorField { grid: self.grid, dim: self.rows, values }
    }
}
impl_sampled!(JacobianField, |s: &JacobianField| s.rows * s.grid.dim());

/// Finite-difference stencil family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// Centered second order inside, one-sided first order on the boundary.
    Second,
    /// Centered fourth order where the stencil fits, second order elsewhere
    /// (including second-order one-sided boundary formulas).
    Fourth,
}

/// Gradient by finite differences with the [`Stencil::Second`] scheme.
pub fn gradient<F: SampledField>(f: &F) -> JacobianField {
    gradient_with(f, Stencil::Second)
}

/// Gradient by finite differences with an explicit stencil family.
pub fn gradient_with<F: SampledField>(f: &F, stencil: Stencil) -> JacobianField {
    let grid = *f.grid();
    let n = grid.dim();
    let rows = f.components();
    let vals = f.values();
    let mut out = vec![0.0; grid.len() * rows * n];
    for axis in 0..n {
        let s = grid.strides()[axis];
        let m = grid.resolution()[axis];
        let h = grid.spacing()[axis];
        for idx in 0..grid.len() {
            let k = (idx / s) % m;
            for r in 0..rows {
                let at = |off: isize| vals[((idx as isize + off * s as isize) as usize) * rows + r];
                let d = match stencil {
                    Stencil::Second => {
                        if k == 0 {
                            (at(1) - at(0)) / h
                        } else if k + 1 == m {
                            (at(0) - at(-1)) / h
                        } else {
                            (at(1) - at(-1)) / (2.0 * h)
                        }
                    }
                    Stencil::Fourth => {
                        if k == 0 {
                            (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h)
                        } else if k + 1 == m {
                            (3.0 * at(0) - 4.0 * at(-1) + at(-2)) / (2.0 * h)
                        } else if k == 1 || k + 2 == m {
                            (at(1) - at(-1)) / (2.0 * h)
                        } else {
                            (-at(2) + 8.0 * at(1) - 8.0 * at(-1) + at(-2)) / (12.0 * h)
                        }
                    }
                };
                out[idx * rows * n + r * n + axis] = d;
            }
        }
    }
    JacobianField { grid, rows, values: out }
}

/// How samples are continued past the edge of the grid before convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extension {
    /// Repeat the edge value.
    Constant,
    /// Mirror about the edge node.
    Even,
    /// Point reflection about the edge value; reproduces affine data exactly.
    Odd,
}

/// Result of a mollification.
#[derive(Debug, Clone, PartialEq)]
pub struct Mollified<F> {
    pub field: F,
    /// Set when the length scale is below the spacing on some axis, which is
    /// then left untouched.
    pub below_resolution: bool,
}

/// Unnormalised one-dimensional bump `exp(-1/(1-y^2))` on `(-1, 1)`.
#[inline]
pub fn bump(y: f64) -> f64 {
    if y.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - y * y)).exp()
    }
}

/// Discrete unit-mass weights of the scaled bump for spacing `h`.
pub fn kernel_weights(ell: f64, h: f64) -> Vec<f64> {
    let r = (ell / h).floor() as usize;
    let mut w: Vec<f64> = (0..=2 * r)
        .map(|k| bump((k as f64 - r as f64) * h / ell))
        .collect();
    let total: f64 = w.iter().sum();
    for x in &mut w {
        *x /= total;
    }
    w
}

/// Mollify with the constant edge extension.
pub fn mollify<F: SampledField>(f: &F, ell: f64) -> Mollified<F> {
    mollify_with(f, ell, Extension::Constant)
}

/// Convolve with the tensor-product bump kernel of radius `ell`.
///
/// Each axis with spacing above `ell` is skipped and flagged in the result.
pub fn mollify_with<F: SampledField>(f: &F, ell: f64, ext: Extension) -> Mollified<F> {
    let grid = *f.grid();
    let c = f.components();
    let mut data = f.values().to_vec();
    let mut below = false;
    let mut line = Vec::new();
    for axis in 0..grid.dim() {
        let h = grid.spacing()[axis];
        if !(ell >= h) {
            below = true;
            continue;
        }
        let w = kernel_weights(ell, h);
        let r = (w.len() - 1) / 2;
        let m = grid.resolution()[axis];
        let s = grid.strides()[axis];
        line.resize((m + 2 * r) * c, 0.0);
        let mut out = vec![0.0; data.len()];
        for start in 0..grid.len() {
            if (start / s) % m != 0 {
                continue;
            }
            for j in 0..(m + 2 * r) {
                let jj = j as isize - r as isize;
                for comp in 0..c {
                    line[j * c + comp] = extended(&data, start, s, m, c, comp, jj, ext);
                }
            }
            for k in 0..m {
                let dst = (start + k * s) * c;
                for comp in 0..c {
                    let mut acc = 0.0;
                    for (t, wt) in w.iter().enumerate() {
                        acc += wt * line[(k + t) * c + comp];
                    }
                    out[dst + comp] = acc;
                }
            }
        }
        data = out;
    }
    Mollified { field: f.with_values(data), below_resolution: below }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn extended(data: &[f64], start: usize, s: usize, m: usize, c: usize, comp: usize, j: isize, ext: Extension) -> f64 {
    let last = m as isize - 1;
    let get = |k: isize| data[(start + k.clamp(0, last) as usize * s) * c + comp];
    if (0..=last).contains(&j) {
        return get(j);
    }
    match ext {
        Extension::Constant => get(j),
        Extension::Even => {
            if j < 0 {
                get(-j)
            } else {
                get(2 * last - j)
            }
        }
        Extension::Odd => {
            if j < 0 {
                2.0 * get(0) - get(-j)
            } else {
                2.0 * get(last) - get(2 * last - j)
            }
        }
    }
}

/// Sampling policy for discrete Hölder seminorms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HolderSampling {
    /// All node pairs are compared while the node count is at most this.
    pub exhaustive_nodes: usize,
}

impl Default for HolderSampling {
    fn default() -> Self {
        HolderSampling { exhaustive_nodes: 65 * 65 }
    }
}

/// Derivative fields `∂^β f` for all `|β| = order`, `order <= 2`.
pub fn derivatives<F: SampledField>(f: &F, order: usize) -> Result<Vec<VectorField>> {
    let grid = *f.grid();
    let n = grid.dim();
    let base = VectorField { grid, dim: f.components(), values: f.values().to_vec() };
    match order {
        0 => Ok(vec![base]),
        1 => {
            let j = gradient(&base);
            Ok((0..n).map(|a| j.along(a)).collect())
        }
        2 => {
            let j = gradient(&base);
            let mut out = Vec::new();
            for a in 0..n {
                let ja = gradient(&j.along(a));
                for b in a..n {
                    out.push(ja.along(b));
                }
            }
            Ok(out)
        }
        _ => Err(Error::UnsupportedOrder { order, max: 2 }),
    }
}

/// Discrete Hölder seminorm `sup |g(x) - g(y)| / |x - y|^α`.
///
/// Pairs are all pairs of a (possibly strided) node subset plus every pair of
/// axis neighbours of the full grid.
pub fn holder_seminorm(g: &VectorField, alpha: f64, sampling: HolderSampling) -> f64 {
    if alpha == 0.0 {
        return 0.0;
    }
    let grid = g.grid;
    let n = grid.dim();
    let mut stride = 1usize;
    loop {
        let count: usize = grid.resolution().iter().map(|&m| m.div_ceil(stride)).product();
        if count <= sampling.exhaustive_nodes {
            break;
        }
        stride += 1;
    }
    let sample: Vec<usize> = (0..grid.len())
        .filter(|&i| {
            let m = grid.multi_index(i);
            (0..n).all(|a| m[a] % stride == 0)
        })
        .collect();
    let quotient = |i: usize, j: usize| -> f64 {
        let (pi, pj) = (grid.point(i), grid.point(j));
        let mut d2 = 0.0;
        for a in 0..n {
            d2 += (pi[a] - pj[a]) * (pi[a] - pj[a]);
        }
        let (vi, vj) = (g.at(i), g.at(j));
        let mut diff = 0.0;
        for c in 0..g.dim {
            diff += (vi[c] - vj[c]) * (vi[c] - vj[c]);
        }
        diff.sqrt() / d2.sqrt().powf(alpha)
    };
    let mut best = 0.0f64;
    for (a, &i) in sample.iter().enumerate() {
        for &j in &sample[a + 1..] {
            best = best.max(quotient(i, j));
        }
    }
    if stride > 1 {
        for i in 0..grid.len() {
            let m = grid.multi_index(i);
            for a in 0..n {
                if m[a] + 1 < grid.resolution()[a] {
                    best = best.max(quotient(i, i + grid.strides()[a]));
                }
            }
        }
    }
    best
}

/// `‖f‖_m + [∂^m f]_α` with the default pair sampling.
pub fn holder_norm<F: SampledField>(f: &F, m: usize, alpha: f64) -> Result<f64> {
    holder_norm_with(f, m, alpha, HolderSampling::default())
}

/// `‖f‖_m + [∂^m f]_α`, where `‖f‖_m` sums the largest derivative norms of each
/// order up to `m`.
pub fn holder_norm_with<F: SampledField>(f: &F, m: usize, alpha: f64, sampling: HolderSampling) -> Result<f64> {
    if m > 2 {
        return Err(Error::UnsupportedOrder { order: m, max: 2 });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParameter(alloc::format!("Hölder exponent {alpha} outside [0, 1]")));
    }
    let mut total = 0.0;
    for order in 0..=m {
        let ds = derivatives(f, order)?;
        total += ds.iter().map(|d| d.max_norm()).fold(0.0, f64::max);
        if order == m && alpha > 0.0 {
            total += ds.iter().map(|d| holder_seminorm(d, alpha, sampling)).fold(0.0, f64::max);
        }
    }
    Ok(total)
}

/// `∇uᵀ∇u` from a Jacobian field, exactly symmetric.
pub fn pullback_from_jacobian(j: &JacobianField) -> SymTensorField {
    let n = j.grid.dim();
    let c = linalg::sym_len(n);
    let mut values = vec![0.0; j.grid.len() * c];
    for i in 0..j.grid.len() {
        linalg::gram(j.rows, n, j.matrix(i), &mut values[i * c..(i + 1) * c]);
    }
    SymTensorField { grid: j.grid, values }
}

/// Relative eigenvalue floor below which a Jacobian counts as rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-12;

/// Pullback metric `∇uᵀ∇u` of a sampled immersion.
///
/// Fails with the first interior node whose Jacobian has rank below `n`.
pub fn pullback_metric(u: &ImmersionField) -> Result<SymTensorField> {
    let g = pullback_from_jacobian(&gradient(u));
    let n = u.grid.dim();
    for i in 0..u.grid.len() {
        if u.grid.is_boundary(i) {
            continue;
        }
        let (lo, hi) = linalg::sym_extreme_eigenvalues(n, g.at(i));
        if lo <= RANK_TOLERANCE * hi.max(1.0) {
            return Err(Error::ImmersionFailure { node: i, rank: n });
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_spacing_formula_is_exact() {
        let g = Grid::new(&[0.0, -1.0], &[1.0, 2.0], &[11, 31]).unwrap();
        assert_eq!(g.spacing()[0], 1.0 / 10.0);
        assert_eq!(g.spacing()[1], 3.0 / 30.0);
        assert_eq!(g.len(), 11 * 31);
        assert_eq!(g.strides(), &[31, 1]);
    }

    #[test]
    fn grid_rejects_coarse_or_degenerate_input() {
        assert!(Grid::new(&[0.0, 0.0], &[1.0, 1.0], &[8, 9]).is_err());
        assert!(Grid::new(&[0.0], &[1.0], &[9]).is_err());
        assert!(Grid::new(&[0.0, 1.0], &[1.0, 1.0], &[9, 9]).is_err());
    }

    #[test]
    fn multi_index_round_trips() {
        let g = Grid::new(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0], &[9, 10, 11]).unwrap();
        for idx in [0, 17, 500, g.len() - 1] {
            assert_eq!(g.flat_index(&g.multi_index(idx)), idx);
        }
    }

    #[test]
    fn kernel_has_unit_mass() {
        for (ell, h) in [(0.1, 0.01), (0.05, 0.02), (1.0, 0.3)] {
            let s: f64 = kernel_weights(ell, h).iter().sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn odd_extension_preserves_affine_data() {
        let g = Grid::cube(2, 0.0, 1.0, 33).unwrap();
        let f = ScalarField::from_fn(&g, |x| 3.0 * x[0] - 2.0 * x[1] + 0.5);
        let m = mollify_with(&f, 0.2, Extension::Odd);
        assert!(!m.below_resolution);
        for (a, b) in m.field.values.iter().zip(&f.values) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn mollify_below_spacing_is_identity() {
        let g = Grid::cube(2, 0.0, 1.0, 11).unwrap();
        let f = ScalarField::from_fn(&g, |x| x[0] * x[1]);
        let m = mollify(&f, 0.01);
        assert!(m.below_resolution);
        assert_eq!(m.field, f);
    }
}
