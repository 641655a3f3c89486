//! File formats: state bundle directories, boundary CSV, OBJ meshes and CSV tables.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;

use serde::{Deserialize, Serialize};
use std::path::Path;

use isoext::convex::ImmersionJet;
use isoext::extension::{definition_report, sigma_count, sigma_node, AdaptedShortState, BoundaryData};
use isoext::fields::{Grid, ImmersionField, JacobianField, ScalarField, SymTensorField};
use isoext::linalg::sym_len;

use crate::CliError;

const BUNDLE_FORMAT: &str = "isoext-state-1";

/// Manifest of a state bundle directory.
///
/// Fields live in sibling files of raw little-endian `f64`: `v.bin` (values
/// then Jacobian), `rho.bin`, `G.bin` and the metric `g.bin`; the resolved
/// mask is one byte per node in `resolved.bin`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub dim: usize,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub resolution: Vec<usize>,
    pub tau: f64,
    /// Reported bounds `(M, r)` and the identity residual at write time.
    pub m: f64,
    pub r: f64,
    pub identity_residual: f64,
}

fn write_floats(path: &Path, xs: &[f64]) -> Result<(), CliError> {
    let mut out = Vec::with_capacity(xs.len() * 8);
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| CliError::io(path, e))
}

pub fn write_bundle(dir: &Path, s: &AdaptedShortState) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let grid = *s.v.grid();
    let manifest = Manifest {
        format: BUNDLE_FORMAT.into(),
        dim: grid.dim(),
        lo: grid.lo().to_vec(),
        hi: grid.hi().to_vec(),
        resolution: grid.resolution().to_vec(),
        tau: s.tau,
        m: s.report.m,
        r: s.report.r,
        identity_residual: s.report.identity_residual,
    };
    let text = toml::to_string(&manifest).map_err(|e| CliError::validation(format!("manifest: {e}")))?;
    write_text(&dir.join("manifest.toml"), &text)?;
    let mut v = s.v.value.values.clone();
    v.extend_from_slice(&s.v.jacobian.values);
    write_floats(&dir.join("v.bin"), &v)?;
    write_floats(&dir.join("rho.bin"), &s.rho.values)?;
    write_floats(&dir.join("G.bin"), &s.big_g.values)?;
    write_floats(&dir.join("g.bin"), &s.g.values)?;
    let mask: Vec<u8> = s.resolved.iter().map(|&b| b as u8).collect();
    let p = dir.join("resolved.bin");
    fs::write(&p, mask).map_err(|e| CliError::io(&p, e))
}

fn read_bytes(dir: &Path, name: &str, count: usize) -> Result<Vec<u8>, CliError> {
    let p = dir.join(name);
    let bytes = fs::read(&p).map_err(|e| CliError::io(&p, e))?;
    if bytes.len() != count {
        return Err(CliError::validation(format!(
            "bundle field `{name}`: {} bytes, expected {count}",
            bytes.len()
        )));
    }
    Ok(bytes)
}

fn read_floats(dir: &Path, name: &str, count: usize) -> Result<Vec<f64>, CliError> {
    let bytes = read_bytes(dir, name, count * 8)?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

pub fn read_bundle(dir: &Path) -> Result<AdaptedShortState, CliError> {
    let mp = dir.join("manifest.toml");
    let text = fs::read_to_string(&mp).map_err(|e| CliError::io(&mp, e))?;
    let mf: Manifest = toml::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", mp.display())))?;
    if mf.format != BUNDLE_FORMAT {
        return Err(CliError::validation(format!("bundle field `format`: `{}`, expected `{BUNDLE_FORMAT}`", mf.format)));
    }
    if mf.lo.len() != mf.dim || mf.hi.len() != mf.dim || mf.resolution.len() != mf.dim {
        return Err(CliError::validation(format!("bundle fields `lo`, `hi`, `resolution` need {} entries", mf.dim)));
    }
    if !(mf.tau > 0.0) {
        return Err(CliError::validation(format!("bundle field `tau` = {} must be positive", mf.tau)));
    }
    let grid = Grid::new(&mf.lo, &mf.hi, &mf.resolution)?;
    let nodes = grid.len();
    let (n, q) = (mf.dim, mf.dim + 1);
    let m = sym_len(n);
    let mut v = read_floats(dir, "v.bin", nodes * q * (n + 1))?;
    let jac = v.split_off(nodes * q);
    let value = ImmersionField { grid, values: v };
    let jacobian = JacobianField { grid, rows: q, values: jac };
    let rho = ScalarField { grid, values: read_floats(dir, "rho.bin", nodes)? };
    let big_g = SymTensorField { grid, values: read_floats(dir, "G.bin", nodes * m)? };
    let g = SymTensorField { grid, values: read_floats(dir, "g.bin", nodes * m)? };
    let resolved: Vec<bool> = read_bytes(dir, "resolved.bin", nodes)?.iter().map(|&b| b != 0).collect();
    let v = ImmersionJet::from_parts(value, jacobian)?;
    let report = definition_report(&g, &v, &rho, &big_g, &resolved);
    Ok(AdaptedShortState { g, v, rho, big_g, resolved, tau: mf.tau, report })
}

const BOUNDARY_COLUMNS: [&str; 7] = ["x1", "f1", "f2", "f3", "mu1", "mu2", "mu3"];

/// Boundary samples for a two-dimensional chart under the flat metric.
///
/// Rows must list the boundary nodes in order; `x1` must match the chart.
pub fn read_boundary_csv(path: &Path, grid: Grid, d0: f64) -> Result<BoundaryData, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').map(str::trim).collect();
    if header != BOUNDARY_COLUMNS {
        let missing = BOUNDARY_COLUMNS.iter().find(|c| !header.contains(c));
        return Err(CliError::validation(match missing {
            Some(c) => format!("{}: missing column `{c}`", path.display()),
            None => format!("{}: columns must be {}", path.display(), BOUNDARY_COLUMNS.join(",")),
        }));
    }
    let ns = sigma_count(&grid);
    let mut f = Vec::with_capacity(ns * 3);
    let mut mu = Vec::with_capacity(ns * 3);
    let mut rows = 0;
    for (row, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != BOUNDARY_COLUMNS.len() {
            return Err(CliError::validation(format!("{}: row {} has {} fields, expected 7", path.display(), row + 1, cells.len())));
        }
        let mut vals = [0.0; 7];
        for (k, c) in cells.iter().enumerate() {
            vals[k] = c.parse().map_err(|_| {
                CliError::validation(format!("{}: row {} field `{}`: `{c}` is not a number", path.display(), row + 1, BOUNDARY_COLUMNS[k]))
            })?;
        }
        if row < ns {
            let x = grid.coord(sigma_node(&grid, row), 0);
            if (vals[0] - x).abs() > 1e-9 * (1.0 + x.abs()) {
                return Err(CliError::validation(format!(
                    "{}: row {} field `x1` = {} does not match boundary node {x}",
                    path.display(),
                    row + 1,
                    vals[0]
                )));
            }
        }
        f.extend_from_slice(&vals[1..4]);
        mu.extend_from_slice(&vals[4..7]);
        rows += 1;
    }
    if rows != ns {
        return Err(CliError::validation(format!("{}: {rows} rows, the chart has {ns} boundary nodes", path.display())));
    }
    let g = SymTensorField::identity(&grid);
    Ok(BoundaryData::new(grid, f, mu, g, d0)?)
}

/// Triangulated OBJ of a two-dimensional immersion, every `stride`-th node.
///
/// Vertex coordinates are written in shortest round-trip form, so each
/// vertex is bitwise the sample it came from.
pub fn obj_mesh(v: &ImmersionField, stride: usize) -> String {
    let grid = v.grid;
    let res = grid.resolution();
    let pick = |n: usize| -> Vec<usize> {
        let mut ix: Vec<usize> = (0..n).step_by(stride).collect();
        if *ix.last().expect("nonempty axis") != n - 1 {
            ix.push(n - 1);
        }
        ix
    };
    let (ia, ib) = (pick(res[0]), pick(res[1]));
    let mut s = String::new();
    for &i in &ia {
        for &j in &ib {
            let idx = grid.flat_index(&[i, j]);
            let p = &v.values[idx * 3..idx * 3 + 3];
            writeln!(s, "v {} {} {}", p[0], p[1], p[2]).expect("string write");
        }
    }
    let w = ib.len();
    for a in 0..ia.len() - 1 {
        for b in 0..w - 1 {
            let k = a * w + b + 1;
            writeln!(s, "f {} {} {}", k, k + w, k + w + 1).expect("string write");
            writeln!(s, "f {} {} {}", k, k + w + 1, k + 1).expect("string write");
        }
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))
}

/// CSV with `header` and one line per row.
pub fn write_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<(), CliError> {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    write_text(path, &s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use isoext::extension::demo;

    fn arc_state() -> AdaptedShortState {
        let grid = Grid::new(&[-0.1, 0.0], &[0.1, 0.2], &[21, 17]).unwrap();
        demo::conformal_arc(&grid).unwrap()
    }

    #[test]
    fn bundle_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let s = arc_state();
        write_bundle(dir.path(), &s).unwrap();
        let r = read_bundle(dir.path()).unwrap();
        assert_eq!(r, s);
    }

    #[test]
    fn bundle_schema_errors_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), &arc_state()).unwrap();
        let mp = dir.path().join("manifest.toml");
        let text = fs::read_to_string(&mp).unwrap();
        let no_tau: String = text.lines().filter(|l| !l.starts_with("tau")).map(|l| format!("{l}\n")).collect();
        fs::write(&mp, no_tau).unwrap();
        let e = read_bundle(dir.path()).unwrap_err();
        assert_eq!(e.code, 2);
        assert!(e.message.contains("tau"), "{}", e.message);

        fs::write(&mp, &text).unwrap();
        fs::write(dir.path().join("rho.bin"), [0u8; 16]).unwrap();
        let e = read_bundle(dir.path()).unwrap_err();
        assert_eq!(e.code, 2);
        assert!(e.message.contains("rho.bin"), "{}", e.message);
    }

    #[test]
    fn mesh_vertices_are_the_samples() {
        let s = arc_state();
        let v = &s.v.value;
        for stride in [1, 3] {
            let obj = obj_mesh(v, stride);
            let verts: Vec<[f64; 3]> = obj
                .lines()
                .filter_map(|l| l.strip_prefix("v "))
                .map(|l| {
                    let p: Vec<f64> = l.split(' ').map(|x| x.parse().unwrap()).collect();
                    [p[0], p[1], p[2]]
                })
                .collect();
            let ia: Vec<usize> = (0..21).step_by(stride).chain((20 % stride != 0).then_some(20)).collect();
            let ib: Vec<usize> = (0..17).step_by(stride).chain((16 % stride != 0).then_some(16)).collect();
            assert_eq!(verts.len(), ia.len() * ib.len());
            let mut k = 0;
            for &i in &ia {
                for &j in &ib {
                    let idx = v.grid.flat_index(&[i, j]);
                    for c in 0..3 {
                        assert_eq!(verts[k][c].to_bits(), v.values[idx * 3 + c].to_bits());
                    }
                    k += 1;
                }
            }
            let faces = obj.lines().filter(|l| l.starts_with("f ")).count();
            assert_eq!(faces, 2 * (ia.len() - 1) * (ib.len() - 1));
        }
    }
}
