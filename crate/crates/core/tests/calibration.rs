use isoext::calibration::{calibrate, CalibrationSuite};
use isoext::convex::{C0, C1, K0, M_BAR};
use isoext::corrugation::CorrugationProfile;

#[test]
fn frozen_constants_cover_the_measured_ones() {
    let c = calibrate(&CalibrationSuite::default(), &CorrugationProfile::default()).unwrap();
    assert!(c.c0.is_finite() && c.c0 <= C0, "c0 = {}", c.c0);
    assert_eq!(c.c1, c.c0);
    assert!(c.c1 <= C1);
    let k0 = c.k0.expect("a resolvable stage ratio");
    assert!(k0 <= K0, "K0 = {k0}");
    assert!(c.m_bar > 0.0 && c.m_bar <= M_BAR, "M̄ = {}", c.m_bar);
}

#[test]
fn suite_shapes_vanish_on_the_boundary() {
    let s = CalibrationSuite::default();
    let g = s.grid;
    let last = g.resolution()[0] - 1;
    for (k, (a, nu)) in s.shapes().into_iter().enumerate() {
        assert!((nu[0].hypot(nu[1]) - 1.0).abs() < 1e-15);
        assert!((a.max_abs() - s.amplitude).abs() < 1e-3);
        for i in (0..g.len()).filter(|&i| g.is_boundary(i)) {
            let m = g.multi_index(i);
            // The ridge is constant in x2.
            if k > 0 || m[0] == 0 || m[0] == last {
                assert!(a.values[i].abs() < 1e-12, "shape {k} node {m:?}");
            }
        }
    }
}
