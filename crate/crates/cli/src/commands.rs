use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use isoext::calibration::{calibrate, Calibration, CalibrationSuite};
use isoext::convex::{add_conformal_deficit, step_unchecked, ImmersionJet, StepDiagnostics, StepParams, C0, K0, M_BAR};
use isoext::corrugation::{CorrugationProfile, DELTA_STAR};
use isoext::decomposition::{decompose_global, DirectionFrame};
use isoext::extension::{
    adapted_extension, check_condition, demo, short_ansatz, AdaptedShortState, BoundaryData, ExtensionConfig,
};
use isoext::fields::{Grid, ScalarField, SymTensorField};
use isoext::iteration::{self, IterateRow, IterationConfig, RunConfig, Schedule, StopReason};
use isoext::linalg::{sym_extreme_eigenvalues, sym_frobenius, sym_len, sym_trace};

use crate::config::{BoundaryPreset, CalibrationMode, Config, StartState};
use crate::io::{obj_mesh, read_boundary_csv, read_bundle, write_bundle, write_csv, write_text};
use crate::CliError;

fn out(cfg: &Config, name: &str) -> PathBuf {
    cfg.output.dir.join(name)
}

fn e(x: f64) -> String {
    format!("{x:.17e}")
}

pub fn demo_corrugation(cfg: &Config) -> Result<(), CliError> {
    let profile = CorrugationProfile::default();
    let (ns, nt) = (cfg.corrugation.s_samples, cfg.corrugation.t_samples);
    if ns < 2 || nt < 1 {
        return Err(CliError::validation("corrugation needs s_samples >= 2 and t_samples >= 1".into()));
    }
    let mut rows = Vec::with_capacity(ns * nt);
    let mut worst = 0.0f64;
    for i in 0..ns {
        let s = DELTA_STAR * i as f64 / (ns - 1) as f64;
        for j in 0..nt {
            let t = 2.0 * PI * j as f64 / nt as f64;
            let (g1, g2) = profile.gamma(s, t)?;
            let d = profile.gamma_partials(s, t, 1, false)?.dt;
            let r = ((1.0 + d[0]).powi(2) + d[1] * d[1] - (1.0 + s * s)).abs();
            worst = worst.max(r);
            rows.push(format!("{},{},{},{},{}", e(s), e(t), e(g1), e(g2), e(r)));
        }
    }
    write_csv(&out(cfg, "corrugation.csv"), "s,t,gamma1,gamma2,residual", rows)?;
    println!("corrugation: {} rows, max residual {worst:e}", ns * nt);
    Ok(())
}

fn boundary_data(cfg: &Config) -> Result<BoundaryData, CliError> {
    let g = &cfg.grid;
    let b = &cfg.boundary;
    let mut data = match b.preset {
        BoundaryPreset::Arc => demo::arc(b.radius, g.half_width, g.depth, g.resolution, b.inward)?,
        BoundaryPreset::Line => demo::line(g.half_width, g.depth, g.resolution)?,
        BoundaryPreset::File => {
            let grid = Grid::new(&[-g.half_width, 0.0], &[g.half_width, g.depth], &g.resolution)?;
            let path = b.file.as_deref().expect("validated");
            read_boundary_csv(path, grid, b.d0.unwrap_or(g.depth))?
        }
    };
    if let Some(d0) = b.d0 {
        data.d0 = d0;
    }
    Ok(data)
}

/// Check the convexity condition, writing its report; a nonpositive margin
/// is a mathematical failure.
fn checked_boundary(cfg: &Config) -> Result<BoundaryData, CliError> {
    let data = boundary_data(cfg)?;
    let rep = check_condition(&data)?;
    let text = format!(
        "margin = {}\nsigma_node = {}\npoint = [{}, {}]\nadmissible = {}\n",
        e(rep.margin),
        rep.sigma_node,
        e(rep.point[0]),
        e(rep.point[1]),
        rep.admissible()
    );
    write_text(&out(cfg, "margin.txt"), &text)?;
    if !rep.admissible() {
        return Err(CliError::math(format!(
            "boundary condition fails: margin {:e} at boundary node {} (x1 = {})",
            rep.margin, rep.sigma_node, rep.point[0]
        )));
    }
    Ok(data)
}

pub fn decompose(cfg: &Config) -> Result<(), CliError> {
    let data = checked_boundary(cfg)?;
    let ansatz = short_ansatz(&data)?;
    let s = &ansatz.deficit;
    let grid = s.grid;
    let n = grid.dim();
    let m = sym_len(n);
    let mut rho = ScalarField::zeros(&grid);
    let mut tau = f64::INFINITY;
    for idx in 0..grid.len() {
        if grid.coord(idx, n - 1) == grid.lo()[n - 1] {
            continue;
        }
        let p = &s.values[idx * m..(idx + 1) * m];
        let r2 = (sym_trace(n, p) / n as f64).max(0.0);
        if r2 > 0.0 {
            rho.values[idx] = r2.sqrt();
            tau = tau.min(sym_extreme_eigenvalues(n, p).0 / (2.0 * r2));
        }
    }
    let tau = 0.5 * tau;
    let dec = decompose_global(s, &rho, tau)?;

    // Σ b̄_k² ϖ_k⊗ϖ_k + τ Id against S/ρ².
    let rec = dec.reconstruct();
    let mut worst = 0.0f64;
    let mut diff = vec![0.0; m];
    for idx in 0..grid.len() {
        let r2 = rho.values[idx].powi(2);
        if r2 == 0.0 {
            continue;
        }
        let p = &s.values[idx * m..(idx + 1) * m];
        for (k, d) in diff.iter_mut().enumerate() {
            *d = rec.values[idx * m + k] - p[k] / r2;
        }
        for i in 0..n {
            diff[isoext::linalg::sym_idx(n, i, i)] += tau;
        }
        worst = worst.max(sym_frobenius(n, &diff) / (sym_frobenius(n, p) / r2));
    }
    let rows = (0..dec.count()).map(|k| {
        let b = &dec.coefficients[k];
        let dir: Vec<String> = dec.direction(k).iter().map(|&x| e(x)).collect();
        let lo = b.values.iter().zip(&rho.values).filter(|(_, &r)| r > 0.0).map(|(&v, _)| v).fold(f64::INFINITY, f64::min);
        format!("{k},{},{},{}", dir.join(","), e(lo), e(b.max_abs()))
    });
    let header = format!("k,{},coefficient_min,coefficient_max", (1..=n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(","));
    write_csv(&out(cfg, "decomposition.csv"), &header, rows)?;
    let summary = format!(
        "path = \"{:?}\"\ndirections = {}\nbase_points = {}\ntau = {}\nreconstruction_error = {}\n",
        dec.path,
        dec.count(),
        dec.base_points,
        e(tau),
        e(worst)
    );
    write_text(&out(cfg, "decomposition.txt"), &summary)?;
    println!("decompose: {:?} path, {} directions, relative reconstruction error {worst:e}", dec.path, dec.count());
    Ok(())
}

fn write_mesh(cfg: &Config, name: &str, v: &ImmersionJet) -> Result<(), CliError> {
    if cfg.output.meshes && v.grid().dim() == 2 {
        write_text(&out(cfg, name), &obj_mesh(&v.value, cfg.output.mesh_stride))?;
    }
    Ok(())
}

pub fn step_demo(cfg: &Config) -> Result<(), CliError> {
    let sc = &cfg.step;
    let grid = Grid::cube(2, 0.0, 1.0, sc.resolution)?;
    let u = ImmersionJet::flat(&grid);
    let a = ScalarField::from_fn(&grid, |x| sc.amplitude * (PI * x[0]).sin());
    let norm = sc.direction[0].hypot(sc.direction[1]);
    if !(norm > 0.0) {
        return Err(CliError::validation("step.direction must be nonzero".into()));
    }
    let nu = [sc.direction[0] / norm, sc.direction[1] / norm];
    let profile = CorrugationProfile::default();
    let mut rows = Vec::new();
    let mut last = None;
    for (i, &lambda) in sc.lambdas.iter().enumerate() {
        let mut r = step_unchecked(&u, &a, &nu, lambda, 2.0, &profile)?;
        r.diagnostics.index = i;
        println!("step λ = {lambda}: residual {:e}", r.diagnostics.residual);
        rows.push(r.diagnostics.csv_row());
        last = Some(r.v);
    }
    write_csv(&out(cfg, "step.csv"), StepDiagnostics::CSV_HEADER, rows)?;
    if let Some(v) = last {
        write_mesh(cfg, "step.obj", &v)?;
    }
    Ok(())
}

pub fn stage_demo(cfg: &Config) -> Result<(), CliError> {
    let sc = &cfg.stage;
    let grid = Grid::cube(2, 0.0, 1.0, sc.resolution)?;
    let u = ImmersionJet::flat(&grid);
    let s2 = |t: f64| (PI * t).sin().powi(2);
    let rho = ScalarField::from_fn(&grid, |x| sc.rho * s2(x[0]) * s2(x[1]));
    let g = SymTensorField::zeros(&grid);
    let frame = DirectionFrame::balanced(2)?;
    let profile = CorrugationProfile::default();
    let p = StepParams::new(sc.m, sc.gamma, sc.eps, sc.eps, sc.theta, sc.theta, 0.0);
    let mut rows = Vec::new();
    let mut last = None;
    for &k in &sc.ks {
        let r = add_conformal_deficit(&u, &rho, &g, &p, k, &frame, &profile)?;
        let freqs: Vec<String> = r.frequencies.iter().map(|&f| e(f)).collect();
        println!("stage K = {k}: error {:e}", r.error_norm());
        rows.push(format!(
            "{},{},{},{},{},{},{}",
            e(k),
            r.steps.len(),
            e(r.error_norm()),
            e(r.displacement[0]),
            e(r.displacement[1]),
            e(r.displacement[2]),
            freqs.join(" ")
        ));
        last = Some(r.v);
    }
    write_csv(&out(cfg, "stage.csv"), "K,steps,error,dv0,dv1,dv2,frequencies", rows)?;
    if let Some(v) = last {
        write_mesh(cfg, "stage.obj", &v)?;
    }
    Ok(())
}

pub fn extend(cfg: &Config) -> Result<(), CliError> {
    let data = checked_boundary(cfg)?;
    let x = &cfg.extension;
    let ecfg = ExtensionConfig { k: x.k, m: x.m, gamma: x.gamma, alpha0: x.alpha0, max_layer: x.max_layer };
    let ext = adapted_extension(&data, &ecfg, &CorrugationProfile::default())?;
    write_bundle(&out(cfg, "state"), &ext.state)?;
    let rep = &ext.state.report;
    let mut s = String::new();
    let _ = writeln!(s, "M = {}", e(rep.m));
    let _ = writeln!(s, "r = {}", e(rep.r));
    let _ = writeln!(s, "terms = [{}, {}, {}]", e(rep.terms[0]), e(rep.terms[1]), e(rep.terms[2]));
    let _ = writeln!(s, "identity_residual = {}", e(rep.identity_residual));
    let _ = writeln!(s, "resolved_nodes = {}", rep.nodes);
    let _ = writeln!(s, "sliver_M = {}", e(ext.sliver.m));
    let _ = writeln!(s, "sliver_r = {}", e(ext.sliver.r));
    let _ = writeln!(s, "rho_ratio = [{}, {}]", e(ext.rho_ratio.0), e(ext.rho_ratio.1));
    let _ = writeln!(s, "boundary_trace = {}", e(ext.boundary_trace));
    let _ = writeln!(s, "tau = {}", e(ext.state.tau));
    let _ = writeln!(s, "path = \"{:?}\"", ext.path);
    let _ = writeln!(s, "directions = {}", ext.direction_count);
    let _ = writeln!(s, "layers = {}", ext.layer_reports.len());
    let _ = writeln!(s, "resolvable_layers = {}", ext.resolvable_layers);
    let _ = writeln!(s, "frequency_cap = {}", e(ext.frequency_cap));
    let _ = writeln!(s, "max_frequency = {}", e(ext.max_frequency));
    write_text(&out(cfg, "extension.txt"), &s)?;
    let rows = ext.layer_reports.iter().map(|l| {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            l.q,
            e(l.depth),
            e(l.theta),
            l.steps.len(),
            l.changed_nodes,
            e(l.increment[0]),
            e(l.increment[1]),
            e(l.increment[2]),
            e(l.interpolated),
            e(l.g_max)
        )
    });
    write_csv(&out(cfg, "layers.csv"), "q,depth,theta,steps,changed_nodes,dv0,dv1,dv2,interpolated,g_max", rows)?;
    write_mesh(cfg, "extension.obj", &ext.state.v)?;
    println!(
        "extend: M = {:.4e}, r = {:.4e}, {} layers, boundary trace {:e}",
        rep.m,
        rep.r,
        ext.layer_reports.len(),
        ext.boundary_trace
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct CachedCalibration {
    c0: f64,
    c1: f64,
    k0: Option<f64>,
    m_bar: f64,
}

/// Measured constants, or `None` in frozen mode. Cached results are keyed
/// by dimension, resolution, `γ` and `M`.
fn calibration(cfg: &Config, n: usize) -> Result<Option<Calibration>, CliError> {
    let c = &cfg.calibration;
    if c.mode == CalibrationMode::Frozen {
        return Ok(None);
    }
    let key = format!("calibration-n{n}-res{}-gamma{}-m{}.toml", c.resolution, c.gamma, c.m);
    let path = out(cfg, &key);
    if c.mode == CalibrationMode::Cached && path.exists() {
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let k: CachedCalibration =
            toml::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        return Ok(Some(Calibration { c0: k.c0, c1: k.c1, k0: k.k0, m_bar: k.m_bar }));
    }
    let suite = CalibrationSuite {
        grid: Grid::cube(n, 0.0, 1.0, c.resolution)?,
        gamma: c.gamma,
        m: c.m,
        ..CalibrationSuite::default()
    };
    let cal = calibrate(&suite, &CorrugationProfile::default())?;
    let cached = CachedCalibration { c0: cal.c0, c1: cal.c1, k0: cal.k0, m_bar: cal.m_bar };
    let text = toml::to_string(&cached).map_err(|e| CliError::validation(format!("calibration cache: {e}")))?;
    write_text(&path, &text)?;
    Ok(Some(cal))
}

fn start_state(cfg: &Config) -> Result<AdaptedShortState, CliError> {
    match cfg.iteration.start {
        StartState::ConformalArc => {
            let g = &cfg.grid;
            let grid = Grid::new(&[-g.half_width, 0.0], &[g.half_width, g.depth], &g.resolution)?;
            Ok(demo::conformal_arc(&grid)?)
        }
        StartState::Bundle => {
            let path = cfg.iteration.bundle.clone().unwrap_or_else(|| out(cfg, "state"));
            if !path.join("manifest.toml").exists() {
                return Err(CliError::validation(format!(
                    "no state bundle at {} (run `extend` first or set iteration.bundle)",
                    path.display()
                )));
            }
            read_bundle(&path)
        }
    }
}

fn eps0(cfg: &Config, rho: &ScalarField) -> f64 {
    let s = &cfg.schedule;
    match (s.eps0, s.eps0_ratio) {
        (Some(e), _) => e,
        (None, Some(r)) => rho.max_abs().powi(2) / r,
        (None, None) => Schedule::default_eps0(rho),
    }
}

fn mesh_name(q: usize) -> String {
    format!("iterate_{q:03}.obj")
}

pub fn iterate(cfg: &Config) -> Result<(), CliError> {
    let state0 = start_state(cfg)?;
    let grid = *state0.v.grid();
    let n = grid.dim();
    let s = &cfg.schedule;
    let sched = Schedule::new(eps0(cfg, &state0.rho), s.a, s.big_a, s.alpha, n)?;
    if let Some(w) = sched.alpha_warning() {
        eprintln!("warning: {w}");
    }
    let it = &cfg.iteration;
    if let Some(cal) = calibration(cfg, n)? {
        println!(
            "calibration: c0 = {:.4} (frozen {C0}), K0 = {} (frozen {K0}), M̄ = {:.4} (frozen {M_BAR})",
            cal.c0,
            cal.k0.map_or("unresolvable".into(), |k| format!("{k:.4}")),
            cal.m_bar
        );
        if cal.k0.is_some_and(|k0| it.k < k0) {
            eprintln!("warning: iteration.k = {} is below the measured K0", it.k);
        }
    }
    let icfg = IterationConfig::new(n, it.k, it.m, it.gamma)?;
    let rcfg = RunConfig { q_max: s.q_max, tol: s.tol, strict: it.strict, retries: it.retries, stop_on_stall: it.stop_on_stall };
    let profile = CorrugationProfile::default();

    write_mesh(cfg, &mesh_name(0), &state0.v)?;
    let mut mesh_err = None;
    let result = iteration::run_observed(&state0, &sched, &icfg, &rcfg, &profile, |q, st| {
        if mesh_err.is_none() {
            mesh_err = write_mesh(cfg, &mesh_name(q), &st.v).err();
        }
    });
    if let Some(err) = mesh_err {
        return Err(err);
    }
    let result = match result {
        Ok(r) => r,
        Err(err) if rcfg.strict && iteration::escalates(&err) => return Err(CliError::stall(err.to_string())),
        Err(err) => return Err(err.into()),
    };
    let rep = &result.report;
    write_csv(&out(cfg, "iterations.csv"), IterateRow::CSV_HEADER, rep.rows.iter().map(IterateRow::csv_row))?;
    write_bundle(&out(cfg, "final"), &result.state)?;

    let final_defect = rep.rows.last().map_or(rep.initial_defect, |r| r.defect);
    let mut t = String::new();
    let _ = writeln!(t, "stop = \"{:?}\"", rep.stop);
    let _ = writeln!(t, "iterates = {}", rep.rows.len());
    let _ = writeln!(t, "eps0 = {}", e(rep.schedule.eps0));
    let _ = writeln!(t, "big_a = {}", e(rep.schedule.big_a));
    let _ = writeln!(t, "escalations = {:?}", rep.escalations);
    let _ = writeln!(t, "initial_defect = {}", e(rep.initial_defect));
    let _ = writeln!(t, "final_defect = {}", e(final_defect));
    let _ = writeln!(t, "fitted_defect_rate = {}", e(rep.fitted_defect_rate()));
    let _ = writeln!(t, "predicted_defect_rate = {}", e(rep.schedule.defect_rate()));
    let _ = writeln!(t, "alpha = {}", e(rep.schedule.alpha));
    let _ = writeln!(t, "alpha_ceiling = {}", e(rep.schedule.alpha_ceiling()));
    let _ = writeln!(t, "fitted_increment_rate = {}", e(rep.fitted_increment_rate(rep.schedule.alpha)));
    let _ = writeln!(t, "displacement = {}", e(rep.displacement));
    let _ = writeln!(t, "displacement_bound = {}", e(rep.displacement_bound));
    let _ = writeln!(t, "boundary_drift = {}", e(rep.boundary_drift));
    for w in &rep.warnings {
        let _ = writeln!(t, "# warning: {w}");
    }
    write_text(&out(cfg, "summary.txt"), &t)?;
    println!(
        "iterate: {} iterates, defect {:e} -> {:e}, stop {:?}",
        rep.rows.len(),
        rep.initial_defect,
        final_defect,
        rep.stop
    );
    match &rep.stop {
        StopReason::Stall { q } => Err(CliError::stall(format!("iteration stalled at q = {q}"))),
        StopReason::Breakdown { q, reason } => Err(CliError::math(format!("iterate {q} could not be built: {reason}"))),
        _ => Ok(()),
    }
}
