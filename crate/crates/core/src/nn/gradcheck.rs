//! Central finite-difference verification of analytic gradients.

/// Absolute floor applied to the denominator of the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Worst coordinate found by [`grad_check_detailed`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares `analytic` against `(f(x+ε) - f(x-ε)) / 2ε` for each coordinate
/// listed in `coords` (all coordinates when `None`) and returns the maximum
/// relative error.
pub fn grad_check(f: impl FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64], eps: f64, coords: Option<&[usize]>) -> f64 {
    grad_check_detailed(f, x, analytic, eps, coords).max_rel_err
}

pub fn grad_check_detailed(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    eps: f64,
    coords: Option<&[usize]>,
) -> GradCheckReport {
    assert_eq!(x.len(), analytic.len());
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut xp = x.to_vec();
    let mut worst = GradCheckReport::default();
    for &i in coords {
        let orig = xp[i];
        xp[i] = orig + eps;
        let up = f(&xp);
        xp[i] = orig - eps;
        let down = f(&xp);
        xp[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = rel_error(analytic[i], numeric, REL_ERR_FLOOR);
        if err > worst.max_rel_err {
            worst = GradCheckReport { max_rel_err: err, index: i, analytic: analytic[i], numeric };
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_gradient_passes_and_corrupted_fails() {
        let f = |x: &[f64]| x[0] * x[0] * x[1] + x[1].sin();
        let x = [0.7f64, -1.3];
        let g = [2.0 * x[0] * x[1], x[0] * x[0] + x[1].cos()];
        assert!(grad_check(f, &x, &g, 1e-5, None) < 1e-8);
        let bad = [g[0] * 1.01, g[1]];
        assert!(grad_check(f, &x, &bad, 1e-5, None) > 1e-3);
    }
}
