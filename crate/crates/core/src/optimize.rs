//! Bracketed maximization of a smooth one-dimensional objective on a closed
//! interval.
//!
//! The interval is scanned on a grid that is denser near the lower end,
//! every sign change of the derivative from positive to non-positive is
//! refined with Brent-Dekker root finding, and the best of those stationary
//! points and the two endpoints wins. Endpoints are always candidates, so a
//! boundary maximum such as a zero variance component is representable.

/// Number of grid cells used to bracket stationary points.
const GRID_CELLS: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarMax {
    pub argmax: f64,
    pub value: f64,
    /// Objective plus derivative evaluations.
    pub evaluations: usize,
}

/// Maximizes `objective` on `[lo, hi]` given its derivative.
///
/// `xtol` is the absolute tolerance on the location of interior maxima.
pub fn maximize_on_interval<F, D>(objective: F, derivative: D, lo: f64, hi: f64, xtol: f64) -> ScalarMax
where
    F: Fn(f64) -> f64,
    D: Fn(f64) -> f64,
{
    assert!(lo <= hi, "empty interval [{lo}, {hi}]");
    let mut evaluations = 0usize;
    let score = |x: f64, evals: &mut usize| {
        *evals += 1;
        derivative(x)
    };

    let grid: Vec<f64> = (0..=GRID_CELLS)
        .map(|k| {
            let t = k as f64 / GRID_CELLS as f64;
            if k == GRID_CELLS {
                hi
            } else {
                lo + (hi - lo) * t * t
            }
        })
        .collect();
    let scores: Vec<f64> = grid.iter().map(|&x| score(x, &mut evaluations)).collect();

    let mut candidates = vec![lo, hi];
    for k in 0..GRID_CELLS {
        let (a, b) = (grid[k], grid[k + 1]);
        let (fa, fb) = (scores[k], scores[k + 1]);
        if fa > 0.0 && fb <= 0.0 {
            if fb == 0.0 {
                candidates.push(b);
                continue;
            }
            let (root, used) = find_root(&derivative, a, b, fa, fb, xtol);
            evaluations += used;
            candidates.push(root);
        }
    }

    let mut best = ScalarMax {
        argmax: lo,
        value: f64::NEG_INFINITY,
        evaluations: 0,
    };
    for x in candidates {
        evaluations += 1;
        let v = objective(x);
        let v = if v.is_nan() { f64::NEG_INFINITY } else { v };
        if v > best.value || (v == best.value && x < best.argmax) {
            best.argmax = x;
            best.value = v;
        }
    }
    best.evaluations = evaluations;
    best
}

/// Brent-Dekker root finding on a bracket with `f(a)` and `f(b)` of
/// opposite sign. Returns the root and the number of evaluations spent.
pub fn find_root<D>(f: &D, a: f64, b: f64, fa: f64, fb: f64, xtol: f64) -> (f64, usize)
where
    D: Fn(f64) -> f64,
{
    let (mut a, mut b, mut fa, mut fb) = (a, b, fa, fb);
    let mut c = a;
    let mut fc = fa;
    let mut d = b - a;
    let mut e = d;
    let mut evals = 0usize;

    for _ in 0..200 {
        if (fb > 0.0) == (fc > 0.0) {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol = 2.0 * f64::EPSILON * b.abs() + 0.5 * xtol;
        let m = 0.5 * (c - b);
        if m.abs() <= tol || fb == 0.0 {
            return (b, evals);
        }
        if e.abs() >= tol && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                // secant
                p = 2.0 * m * s;
                q = 1.0 - s;
            } else {
                // inverse quadratic interpolation
                let qa = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * m * qa * (qa - r) - (b - a) * (r - 1.0));
                q = (qa - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            } else {
                p = -p;
            }
            if 2.0 * p < (3.0 * m * q - (tol * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = m;
                e = m;
            }
        } else {
            d = m;
            e = m;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol { d } else { tol.copysign(m) };
        fb = f(b);
        evals += 1;
    }
    (b, evals)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interior_quadratic_maximum() {
        let r = maximize_on_interval(|x| -(x - 0.3).powi(2), |x| -2.0 * (x - 0.3), 0.0, 2.0, 1e-12);
        assert!((r.argmax - 0.3).abs() < 1e-12, "{r:?}");
    }

    #[test]
    fn boundary_maximum_at_lower_end() {
        let r = maximize_on_interval(|x| -x, |_| -1.0, 0.0, 5.0, 1e-12);
        assert_eq!(r.argmax, 0.0);
    }

    #[test]
    fn boundary_maximum_at_upper_end() {
        let r = maximize_on_interval(|x| x, |_| 1.0, 0.0, 5.0, 1e-12);
        assert_eq!(r.argmax, 5.0);
    }

    #[test]
    fn picks_global_of_two_local_maxima() {
        // maxima near 1 and 3, the latter higher
        let f = |x: f64| -(x - 1.0).powi(2) * (x - 3.0).powi(2) + 0.1 * x;
        let df = |x: f64| {
            -2.0 * (x - 1.0) * (x - 3.0).powi(2) - 2.0 * (x - 1.0).powi(2) * (x - 3.0) + 0.1
        };
        let r = maximize_on_interval(f, df, 0.0, 4.0, 1e-12);
        assert!((r.argmax - 3.0).abs() < 0.05, "{r:?}");
        assert!(df(r.argmax).abs() < 1e-9);
    }

    #[test]
    fn root_of_cubic() {
        let f = |x: f64| x * x * x - 2.0;
        let (r, _) = find_root(&f, 0.0, 2.0, f(0.0), f(2.0), 1e-14);
        assert!((r - 2f64.cbrt()).abs() < 1e-13);
    }
}
