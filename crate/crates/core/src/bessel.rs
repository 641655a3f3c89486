//! Bessel functions of the first kind, integer order.
//!
//! Power series on `|x| <= 12`, leading Hankel asymptotics beyond. The engine
//! only evaluates on `[0, j_{0,1}]`, where the series is accurate to a few ulp.

use num_traits::Float;

/// First positive zero of `J0`.
pub const J0_FIRST_ZERO: f64 = 2.404_825_557_695_773;

const SERIES_LIMIT: f64 = 12.0;
const FRAC_2_PI: f64 = core::f64::consts::FRAC_2_PI;
const FRAC_PI_4: f64 = core::f64::consts::FRAC_PI_4;

/// `J_m(x)` by its power series.
pub fn jn_series(m: usize, x: f64) -> f64 {
    let half = 0.5 * x;
    let mut term = 1.0;
    for k in 1..=m {
        term *= half / k as f64;
    }
    let q = -half * half;
    let mut sum = term;
    let mut k = 0usize;
    loop {
        k += 1;
        term *= q / (k as f64 * (k + m) as f64);
        sum += term;
        if term.abs() <= 1e-17 * sum.abs() || k > 200 {
            return sum;
        }
    }
}

/// `1 - J0(x)` without cancellation for small `x`.
pub fn one_minus_j0(x: f64) -> f64 {
    if x.abs() > SERIES_LIMIT {
        return 1.0 - j0(x);
    }
    let q = -0.25 * x * x;
    let mut term = 1.0;
    let mut sum = 0.0;
    let mut k = 0usize;
    loop {
        k += 1;
        term *= q / (k * k) as f64;
        sum += term;
        if term.abs() <= 1e-17 * sum.abs() || k > 200 {
            return -sum;
        }
    }
}

/// Order-zero Bessel function.
pub fn j0(x: f64) -> f64 {
    let ax = x.abs();
    if ax <= SERIES_LIMIT {
        return jn_series(0, ax);
    }
    let chi = ax - FRAC_PI_4;
    let p = 1.0 - 9.0 / (128.0 * ax * ax);
    let q = -1.0 / (8.0 * ax) + 75.0 / (1024.0 * ax * ax * ax);
    (FRAC_2_PI / ax).sqrt() * (p * chi.cos() - q * chi.sin())
}

/// Order-one Bessel function.
pub fn j1(x: f64) -> f64 {
    let ax = x.abs();
    let v = if ax <= SERIES_LIMIT {
        jn_series(1, ax)
    } else {
        let chi = ax - 3.0 * FRAC_PI_4;
        let p = 1.0 + 15.0 / (128.0 * ax * ax);
        let q = 3.0 / (8.0 * ax) - 105.0 / (1024.0 * ax * ax * ax);
        (FRAC_2_PI / ax).sqrt() * (p * chi.cos() - q * chi.sin())
    };
    if x < 0.0 {
        -v
    } else {
        v
    }
}

/// Fill `out[m] = J_m(x)` for `m < out.len()`; `x` in the series range.
pub fn jn_sequence(x: f64, out: &mut [f64]) {
    let half = 0.5 * x;
    let q = -half * half;
    let mut lead = 1.0;
    for (m, slot) in out.iter_mut().enumerate() {
        if m > 0 {
            lead *= half / m as f64;
        }
        if lead == 0.0 {
            *slot = 0.0;
            continue;
        }
        let mut term = lead;
        let mut sum = lead;
        let mut k = 0usize;
        loop {
            k += 1;
            term *= q / (k as f64 * (k + m) as f64);
            sum += term;
            if term.abs() <= 1e-17 * sum.abs() || k > 200 {
                break;
            }
        }
        *slot = sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_is_a_root() {
        assert!(j0(J0_FIRST_ZERO).abs() < 1e-15);
    }

    #[test]
    fn matches_reference_values() {
        // Abramowitz & Stegun table 9.1.
        assert!((j0(1.0) - 0.765_197_686_557_966_6).abs() < 1e-15);
        assert!((j1(1.0) - 0.440_050_585_744_933_5).abs() < 1e-15);
        assert!((j0(5.0) + 0.177_596_771_314_338_3).abs() < 1e-13);
        assert!((jn_series(2, 1.0) - 0.114_903_484_931_900_5).abs() < 1e-15);
    }

    #[test]
    fn asymptotic_branch_is_continuous() {
        let a = jn_series(0, SERIES_LIMIT);
        let b = j0(SERIES_LIMIT + 1e-9);
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn sequence_matches_single_orders() {
        let mut s = [0.0; 8];
        jn_sequence(1.7, &mut s);
        for (m, v) in s.iter().enumerate() {
            assert!((v - jn_series(m, 1.7)).abs() < 1e-16);
        }
    }
}
