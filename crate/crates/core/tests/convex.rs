use std::f64::consts::PI;

use isoext::convex::*;
use isoext::corrugation::{amplitude_bisect, CorrugationProfile};
use isoext::decomposition::DirectionFrame;
use isoext::fields::*;
use isoext::linalg::sym_extreme_eigenvalues;
use proptest::prelude::*;

fn loglog_slope(pts: &[(f64, f64)]) -> f64 {
    let k = pts.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = pts.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// `Γ(s, t)` by Simpson quadrature of `√(1+s²)(cos(α cos τ), sin(α cos τ)) − (1, 0)`.
fn gamma_quadrature(s: f64, t: f64) -> (f64, f64) {
    let alpha = amplitude_bisect(s);
    let sigma = (1.0 + s * s).sqrt();
    let n = 4000;
    let h = t / n as f64;
    let (mut a, mut b) = (0.0, 0.0);
    for i in 0..=n {
        let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        let ph = alpha * (i as f64 * h).cos();
        a += w * (sigma * ph.cos() - 1.0);
        b += w * sigma * ph.sin();
    }
    (a * h / 3.0, b * h / 3.0)
}

/// `max |∇ũᵀζ|` over interior nodes, with `∇ũ` by second-order differences.
fn normal_residual(u: &ImmersionField, f: &Frames) -> f64 {
    let g = u.grid;
    let j = gradient(u);
    let mut worst = 0.0f64;
    for idx in (0..g.len()).filter(|&i| !g.is_boundary(i)) {
        let m = j.matrix(idx);
        let z = &f.zeta.values[idx * 3..idx * 3 + 3];
        for c in 0..2 {
            worst = worst.max((0..3).map(|r| m[r * 2 + c] * z[r]).sum::<f64>().abs());
        }
    }
    worst
}

fn metric_gap(v: &ImmersionJet, target: impl Fn(usize) -> [f64; 3]) -> f64 {
    let m = v.metric();
    (0..m.grid.len())
        .map(|i| {
            let (p, t) = (m.at(i), target(i));
            (p[0] - t[0]).abs().max((p[1] - t[1]).abs()).max((p[2] - t[2]).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn flat_inclusion_frames() {
    let g = Grid::cube(2, 0.0, 1.0, 17).unwrap();
    let nu = [0.6, 0.8];
    let f = compute_frames(&ImmersionField::flat(&g), &nu, 1.0).unwrap();
    for idx in 0..g.len() {
        let xi = &f.xi.values[idx * 3..idx * 3 + 3];
        let z = &f.zeta.values[idx * 3..idx * 3 + 3];
        assert!((xi[0] - 0.6).abs() < 1e-14 && (xi[1] - 0.8).abs() < 1e-14 && xi[2].abs() < 1e-14);
        assert!(z[0].abs() < 1e-14 && z[1].abs() < 1e-14 && (z[2].abs() - 1.0).abs() < 1e-14);
        assert!((f.xi_tilde_norm.values[idx] - 1.0).abs() < 1e-14);
    }
}

#[test]
fn cylinder_frame_is_the_radial_normal() {
    let g = Grid::new(&[0.0, 0.0], &[2.0 * PI, 1.0], &[129, 17]).unwrap();
    let h = g.max_spacing();
    let u = ImmersionField::from_fn(&g, |x, out| out.copy_from_slice(&[x[0].cos(), x[0].sin(), x[1]]));
    let f = compute_frames(&u, &[1.0, 0.0], 1.0).unwrap();
    // Two nodes in from the ends the fourth-order stencil is centred.
    for idx in (0..g.len()).filter(|&i| (2..127).contains(&g.multi_index(i)[0])) {
        let t = g.coord(idx, 0);
        let z = &f.zeta.values[idx * 3..idx * 3 + 3];
        let dot = z[0] * t.cos() + z[1] * t.sin();
        assert!((dot.abs() - 1.0).abs() < 1e-4 && z[2].abs() < 1e-4, "node {idx}: {z:?}");
    }
    let r = normal_residual(&u, &f);
    assert!(r <= 2.0 * h * h, "{r} vs {}", 2.0 * h * h);
}

#[test]
fn constant_amplitude_adds_the_primitive_metric_exactly() {
    let g = Grid::cube(2, 0.0, 1.0, 129).unwrap();
    let u = ImmersionJet::flat(&g);
    let c = 0.5;
    let lambda = 16.0 * PI;
    let r = step_unchecked(&u, &ScalarField::constant(&g, c), &[1.0, 0.0], lambda, 2.0, &CorrugationProfile::default()).unwrap();
    let gap = metric_gap(&r.v, |_| [1.0 + c * c, 0.0, 1.0]);
    assert!(gap < 1e-8, "{gap}");
    assert_eq!(r.diagnostics.e1_norm, 0.0);

    // Closed form: v = (x1 + Γ1/λ, x2, ±Γ2/λ).
    let sign = r.v.value.values[3 * 5 + 2].signum() * gamma_quadrature(c, lambda * g.coord(5, 0)).1.signum();
    for idx in (0..g.len()).step_by(97) {
        let x = g.point(idx);
        let (g1, g2) = gamma_quadrature(c, lambda * x[0]);
        let v = &r.v.value.values[idx * 3..idx * 3 + 3];
        assert!((v[0] - x[0] - g1 / lambda).abs() < 1e-10, "node {idx}");
        assert!((v[1] - x[1]).abs() < 1e-15);
        assert!((v[2] - sign * g2 / lambda).abs() < 1e-10, "node {idx}");
    }
}

#[test]
fn zero_amplitude_leaves_the_map_unchanged() {
    let g = Grid::cube(2, 0.0, 1.0, 33).unwrap();
    let u = ImmersionJet::from_field(ImmersionField::from_fn(&g, |x, o| o.copy_from_slice(&[x[0], x[1], 0.1 * x[0] * x[1]])));
    let p = StepParams::new(4.0, 2.0, 0.1, 0.1, 1.0, 1.0, 10.0);
    let r = step(&u, &ScalarField::zeros(&g), &[0.0, 1.0], &p, &CorrugationProfile::default()).unwrap();
    assert_eq!(r.v, u);
}

#[test]
fn step_residual_decays_like_inverse_frequency() {
    let g = Grid::cube(2, 0.0, 1.0, 513).unwrap();
    let u = ImmersionJet::flat(&g);
    let a = ScalarField::from_fn(&g, |x| 0.2 * (PI * x[0]).sin().max(0.0));
    let prof = CorrugationProfile::default();
    let pts: Vec<(f64, f64)> = [64.0, 128.0, 256.0]
        .iter()
        .map(|&lam| {
            let p = StepParams::new(4.0, 1.0, 0.08, 1.0, PI, PI, lam);
            let r = step(&u, &a, &[1.0, 0.0], &p, &prof).unwrap();
            // Independent residual: pullback of the returned Jacobian.
            let gap = metric_gap(&r.v, |i| [1.0 + a.values[i].powi(2), 0.0, 1.0]);
            assert!((gap - r.diagnostics.residual).abs() <= 1e-12 + 1e-6 * gap);
            (lam, gap)
        })
        .collect();
    let s = loglog_slope(&pts);
    assert!((s + 1.0).abs() <= 0.25, "slope {s}, {pts:?}");
}

#[test]
fn step_rejects_violated_preconditions() {
    let g = Grid::cube(2, 0.0, 1.0, 65).unwrap();
    let u = ImmersionJet::flat(&g);
    let prof = CorrugationProfile::default();
    let a = ScalarField::constant(&g, 0.1);
    // λ below c0 (δ/ε)^{1/2} θ̃.
    let p = StepParams::new(4.0, 1.0, 0.1, 0.4, 2.0, 2.0, 3.0);
    let e = step(&u, &a, &[1.0, 0.0], &p, &prof).unwrap_err().to_string();
    assert!(e.contains("frequency condition"), "{e}");
    // ‖a‖_0 above (γε/2)^{1/2}.
    let p = StepParams::new(4.0, 1.0, 0.01, 0.01, 1.0, 1.0, 10.0);
    let e = step(&u, &a, &[1.0, 0.0], &p, &prof).unwrap_err().to_string();
    assert!(e.contains("‖a‖_0"), "{e}");
    // Above the frequency cap.
    let p = StepParams::new(4.0, 1.0, 0.1, 0.1, 1.0, 1.0, 1e3);
    assert!(matches!(step(&u, &a, &[1.0, 0.0], &p, &prof), Err(isoext::error::Error::FrequencyCap { .. })));
}

#[test]
fn empty_stage_is_the_identity() {
    let g = Grid::cube(2, 0.0, 1.0, 17).unwrap();
    let u = ImmersionJet::flat(&g);
    let p = StepParams::new(1.0, 1.0, 0.1, 0.1, 1.0, 1.0, 0.0);
    let r = stage(&u, &[], &p, 8.0, &CorrugationProfile::default()).unwrap();
    assert_eq!(r.v, u);
    assert!(r.error.values.iter().all(|&e| e == 0.0));
    assert!(r.steps.is_empty());
}

#[test]
fn single_term_stage_is_one_step() {
    let g = Grid::cube(2, 0.0, 1.0, 129).unwrap();
    let u = ImmersionJet::flat(&g);
    let a = ScalarField::from_fn(&g, |x| 0.1 * (PI * x[1]).sin().powi(2));
    let nu = [0.0, 1.0];
    let prof = CorrugationProfile::default();
    let p = StepParams::new(8.0, 1.0, 0.02, 0.02, 2.0, 2.0, 0.0);
    let r = stage(&u, &[PrimitiveTerm { amplitude: a.clone(), direction: nu.to_vec() }], &p, 8.0, &prof).unwrap();
    assert_eq!(r.frequencies, vec![16.0]);
    let s = step(&u, &a, &nu, &StepParams { lambda: 16.0, ..p }, &prof).unwrap();
    assert_eq!(r.v, s.v);
    let gm = s.v.metric();
    for i in 0..g.len() {
        let e = r.error.at(i);
        let want = [gm.at(i)[0] - 1.0, gm.at(i)[1], gm.at(i)[2] - 1.0 - a.values[i].powi(2)];
        assert!((0..3).all(|k| (e[k] - want[k]).abs() < 1e-15), "node {i}");
    }
}

/// `0.05 Id` as three constant primitive terms in the balanced frame.
fn balanced_terms(g: &Grid) -> Vec<PrimitiveTerm> {
    let f = DirectionFrame::balanced(2).unwrap();
    let c = f.coefficients(&[0.05, 0.0, 0.05]);
    (0..3)
        .map(|k| PrimitiveTerm { amplitude: ScalarField::constant(g, c[k].sqrt()), direction: f.direction(k).to_vec() })
        .collect()
}

#[test]
fn stage_error_decays_like_inverse_ratio() {
    let g = Grid::cube(2, 0.0, 1.0, 513).unwrap();
    let u = ImmersionJet::flat(&g);
    let terms = balanced_terms(&g);
    assert!(terms.iter().all(|t| t.amplitude.values[0] > 0.0));
    let prof = CorrugationProfile::default();
    let pts: Vec<(f64, f64)> = [8.0, 16.0, 32.0]
        .iter()
        .map(|&k| {
            // Same first frequency for every K; the top one stays resolved.
            let theta = 0.9 * frequency_cap(&g) / (32.0 * 32.0 * k);
            let mut p = StepParams::new(1.0, 1.0, 0.2, 0.2, theta, theta, 0.0);
            p.enforce_bounds = false;
            let r = stage(&u, &terms, &p, k, &prof).unwrap();
            assert_eq!(r.steps.len(), 3);
            (k, r.error_norm())
        })
        .collect();
    let s = loglog_slope(&pts);
    assert!((s + 1.0).abs() <= 0.25, "slope {s}, {pts:?}");
}

#[test]
fn zero_conformal_factor_leaves_the_map_unchanged() {
    let g = Grid::cube(2, 0.0, 1.0, 33).unwrap();
    let u = ImmersionJet::flat(&g);
    let p = StepParams::new(1.0, 1.0, 0.2, 0.2, 1.0, 1.0, 0.0);
    let r = add_conformal_deficit(&u, &ScalarField::zeros(&g), &SymTensorField::zeros(&g), &p, 8.0, &DirectionFrame::standard(2).unwrap(), &CorrugationProfile::default()).unwrap();
    assert_eq!(r.v, u);
    assert!(r.error.values.iter().all(|&e| e == 0.0));
}

#[test]
fn conformal_deficit_scales_the_flat_metric() {
    let g = Grid::cube(2, 0.0, 0.3, 401).unwrap();
    let u = ImmersionJet::flat(&g);
    let c2: f64 = 0.05;
    let rho = ScalarField::constant(&g, c2.sqrt());
    let prof = CorrugationProfile::default();
    let frame = DirectionFrame::standard(2).unwrap();
    let p = StepParams::new(1.0, 1.0, 0.2, 0.2, 1.0, 1.0, 0.0);
    let k = 16.0;
    let r = add_conformal_deficit(&u, &rho, &SymTensorField::zeros(&g), &p, k, &frame, &prof).unwrap();
    let gap = metric_gap(&r.v, |_| [1.0 + c2, 0.0, 1.0 + c2]);
    // Frozen from the K-sweep: ‖ℰ‖_0 K/ε stays below 1.1.
    assert!(gap <= 1.1 * p.eps / k, "{gap}");
    assert!((gap - r.error_norm()).abs() < 1e-12);
}

#[test]
fn conformal_deficit_rejects_large_g_and_small_ratio() {
    let g = Grid::cube(2, 0.0, 1.0, 33).unwrap();
    let u = ImmersionJet::flat(&g);
    let rho = ScalarField::constant(&g, 0.1);
    let frame = DirectionFrame::balanced(2).unwrap();
    let prof = CorrugationProfile::default();
    let p = StepParams::new(1.0, 1.0, 0.2, 0.2, 1.0, 1.0, 0.0);
    let mut big = SymTensorField::zeros(&g);
    for i in 0..g.len() {
        big.values[i * 3] = 2.0 * frame.r0();
    }
    assert!(matches!(add_conformal_deficit(&u, &rho, &big, &p, 8.0, &frame, &prof), Err(isoext::error::Error::OutOfRadius { .. })));
    let e = add_conformal_deficit(&u, &rho, &SymTensorField::zeros(&g), &p, 4.0, &frame, &prof).unwrap_err();
    assert!(e.to_string().contains("K0"), "{e}");
}

/// Smooth bump supported in the disc of radius `r` about `c`.
fn bump(g: &Grid, c: [f64; 2], r: f64, h: f64) -> ScalarField {
    ScalarField::from_fn(g, |x| {
        let d2 = ((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)) / (r * r);
        if d2 < 1.0 { h * (1.0 - 1.0 / (1.0 - d2)).exp() } else { 0.0 }
    })
}

fn gently_bent(g: &Grid, b: f64) -> ImmersionJet {
    ImmersionJet::from_field(ImmersionField::from_fn(g, |x, o| {
        o.copy_from_slice(&[x[0] + b * (x[1] * PI).sin() * 0.1, x[1], b * x[0] * x[1]])
    }))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn perturbed_frames_stay_normal(a in -0.1..0.1f64, b in -0.1..0.1f64, c in -0.2..0.2f64, th in 0.0..PI) {
        let g = Grid::cube(2, 0.0, 1.0, 65).unwrap();
        let h = g.max_spacing();
        let u = ImmersionField::from_fn(&g, |x, o| {
            o.copy_from_slice(&[x[0] + a * x[1] * x[1], x[1] + b * x[0] * x[0], c * (x[0] * x[1] + 0.5 * x[0] * x[0])]);
        });
        let nu = [th.cos(), th.sin()];
        let f = compute_frames(&u, &nu, 2.0).unwrap();
        prop_assert!(normal_residual(&u, &f) <= 10.0 * h * h);
        // ∇ũᵀξ = ν/|ξ̃|².
        let j = gradient_with(&u, Stencil::Fourth);
        for idx in (0..g.len()).step_by(37) {
            let m = j.matrix(idx);
            let xi = &f.xi.values[idx * 3..idx * 3 + 3];
            let s = f.xi_tilde_norm.values[idx].powi(2);
            for col in 0..2 {
                let d: f64 = (0..3).map(|r| m[r * 2 + col] * xi[r]).sum();
                prop_assert!((d * s - nu[col]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn steps_are_local(cx in 0.3..0.7f64, cy in 0.3..0.7f64, r in 0.05..0.25f64, amp in 0.01..0.3f64,
                       lam in 16.0..64.0f64, th in 0.0..PI, bend in 0.0..0.2f64) {
        let g = Grid::cube(2, 0.0, 1.0, 129).unwrap();
        let u = gently_bent(&g, bend);
        let a = bump(&g, [cx, cy], r, amp);
        let res = step_unchecked(&u, &a, &[th.cos(), th.sin()], lam, 4.0, &CorrugationProfile::default()).unwrap();
        for i in (0..g.len()).filter(|&i| a.values[i] == 0.0) {
            prop_assert!(res.v.value.values[i * 3..i * 3 + 3] == u.value.values[i * 3..i * 3 + 3]);
            prop_assert!(res.v.jacobian.values[i * 6..i * 6 + 6] == u.jacobian.values[i * 6..i * 6 + 6]);
        }
    }

    #[test]
    fn admissible_steps_keep_the_metric_pinched(amp in 0.05..0.4f64, bend in 0.0..0.2f64, th in 0.0..PI, ratio in 1.0..4.0f64) {
        let g = Grid::cube(2, 0.0, 1.0, 257).unwrap();
        let u = gently_bent(&g, bend);
        let a = bump(&g, [0.5, 0.5], 0.4, amp);
        let gamma = 1.5;
        let eps = 2.01 * amp * amp / gamma;
        let theta = 8.0;
        let p = StepParams::new(16.0, gamma, eps.min(1.0), 1.0f64.max(eps), theta, theta, 0.0);
        let lam = (ratio * (p.delta / p.eps).sqrt() * theta).min(frequency_cap(&g));
        prop_assume!(lam >= (p.delta / p.eps).sqrt() * theta);
        let r = step(&u, &a, &[th.cos(), th.sin()], &StepParams { lambda: lam, ..p }, &CorrugationProfile::default()).unwrap();
        let m = r.v.metric();
        for i in 0..g.len() {
            let (lo, hi) = sym_extreme_eigenvalues(2, m.at(i));
            prop_assert!(lo >= 0.5 / gamma && hi <= 2.0 * gamma, "node {} eig {} {}", i, lo, hi);
        }
    }

    #[test]
    fn decomposed_gap_is_absorbed(c2 in 0.01..0.08f64, k in 5.0..20.0f64) {
        let g = Grid::cube(2, 0.0, 0.3, 201).unwrap();
        let u = ImmersionJet::flat(&g);
        let rho = ScalarField::constant(&g, c2.sqrt());
        let p = StepParams::new(1.0, 1.0, 0.2, 0.2, 1.0, 1.0, 0.0);
        let r = add_conformal_deficit(&u, &rho, &SymTensorField::zeros(&g), &p, k, &DirectionFrame::standard(2).unwrap(), &CorrugationProfile::default()).unwrap();
        let before = metric_gap(&u, |_| [1.0 + c2, 0.0, 1.0 + c2]);
        let after = metric_gap(&r.v, |_| [1.0 + c2, 0.0, 1.0 + c2]);
        prop_assert!(after < before, "{} -> {}", before, after);
    }

    #[test]
    fn displacement_norms_scale_with_frequency(amp in 0.05..0.3f64, lam in 24.0..48.0f64) {
        let g = Grid::cube(2, 0.0, 1.0, 257).unwrap();
        let u = ImmersionJet::flat(&g);
        let a = ScalarField::from_fn(&g, |x| amp * (PI * x[0]).sin() * (PI * x[1]).sin());
        for l in [lam, 2.0 * lam] {
            let d = step_unchecked(&u, &a, &[1.0, 0.0], l, 2.0, &CorrugationProfile::default()).unwrap().diagnostics.displacement;
            // Displacement holds cumulative C^j norms; split them back.
            let (d0, d1, d2) = (d[0], d[1] - d[0], d[2] - d[1]);
            prop_assert!((0.25..=4.0).contains(&(d0 * l / d1)), "{} {} {}", d0, d1, l);
            prop_assert!((0.25..=4.0).contains(&(d2 / l / d1)), "{} {} {}", d2, d1, l);
        }
    }
}
