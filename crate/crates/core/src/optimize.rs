//! Golden-section line searches and the alternating two-parameter ascent
//! used to maximize location-model likelihoods.

const INV_PHI: f64 = 0.618_033_988_749_894_9;

fn finite_or_neg_inf(v: f64) -> f64 {
    if v.is_nan() {
        f64::NEG_INFINITY
    } else {
        v
    }
}

/// Maximizes a unimodal `f` on `[lo, hi]` until the bracket is narrower than
/// `tol`. Returns `(argmax, max)`. The interval endpoints are checked at the
/// end so optima sitting on a bound come back exactly on it.
pub fn golden_section_max(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64, tol: f64) -> (f64, f64) {
    debug_assert!(lo <= hi);
    let mut eval = |x: f64| finite_or_neg_inf(f(x));
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = eval(c);
    let mut fd = eval(d);
    while b - a > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = eval(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = eval(d);
        }
    }
    let (mut best_x, mut best) = if fc >= fd { (c, fc) } else { (d, fd) };
    for edge in [lo, hi] {
        if (edge == a || edge == b) && edge != best_x {
            let v = eval(edge);
            if v > best {
                best = v;
                best_x = edge;
            }
        }
    }
    (best_x, best)
}

/// Settings of the alternating ascent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AscentConfig {
    pub x_bounds: (f64, f64),
    pub y_bounds: (f64, f64),
    /// The `x` step searches along `x - shear * y = const`, so a shear that
    /// follows the ridge of `f` cuts the number of sweeps.
    pub shear: f64,
    /// Starting value of `y`; the first sweep optimizes `x` at this `y`.
    pub y_start: f64,
    /// Line-search bracket width.
    pub line_tol: f64,
    /// Stop once both coordinates move less than this within a sweep.
    pub move_tol: f64,
    pub max_sweeps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AscentResult {
    pub x: f64,
    pub y: f64,
    pub value: f64,
    pub sweeps: usize,
    pub evaluations: usize,
}

/// Coordinate ascent alternating golden-section searches on `x` and `y`.
///
/// With a nonzero shear the first search of each sweep runs over `u = x -
/// shear * y` at fixed `y`, and the second over `y` at fixed `u`, clipped so
/// that `x` stays inside its bounds. Both searches are line searches of `f`
/// inside the feasible box.
pub fn alternating_golden_max(mut f: impl FnMut(f64, f64) -> f64, cfg: &AscentConfig) -> AscentResult {
    let mut evaluations = 0usize;
    let k = cfg.shear;
    let (xlo, xhi) = cfg.x_bounds;
    let mut y = cfg.y_start;
    let mut x = f64::NAN;
    let mut value = f64::NEG_INFINITY;
    let mut sweeps = 0;
    while sweeps < cfg.max_sweeps {
        sweeps += 1;
        let (nu, _) = golden_section_max(
            |u| {
                evaluations += 1;
                f((u + k * y).clamp(xlo, xhi), y)
            },
            xlo - k * y,
            xhi - k * y,
            cfg.line_tol,
        );
        let nx = (nu + k * y).clamp(xlo, xhi);
        let u = nx - k * y;
        let (mut lo, mut hi) = cfg.y_bounds;
        if k > 0.0 {
            lo = lo.max((xlo - u) / k);
            hi = hi.min((xhi - u) / k);
        } else if k < 0.0 {
            lo = lo.max((xhi - u) / k);
            hi = hi.min((xlo - u) / k);
        }
        let (lo, hi) = (lo.min(y), hi.max(y));
        let (mut ny, mut v) = golden_section_max(
            |t| {
                evaluations += 1;
                f((u + k * t).clamp(xlo, xhi), t)
            },
            lo,
            hi,
            cfg.line_tol,
        );
        let nx2 = (u + k * ny).clamp(xlo, xhi);
        let stopped_by_x =
            (ny - lo <= cfg.line_tol && lo > cfg.y_bounds.0) || (hi - ny <= cfg.line_tol && hi < cfg.y_bounds.1);
        if stopped_by_x {
            // The sheared line ran into an `x` bound; continue along plain `y`.
            let (py, pv) = golden_section_max(
                |t| {
                    evaluations += 1;
                    f(nx2, t)
                },
                cfg.y_bounds.0,
                cfg.y_bounds.1,
                cfg.line_tol,
            );
            if pv > v {
                ny = py;
                v = pv;
            }
        }
        let converged = (nx2 - x).abs() < cfg.move_tol && (ny - y).abs() < cfg.move_tol;
        x = nx2;
        y = ny;
        value = v;
        if converged {
            break;
        }
    }
    AscentResult { x, y, value, sweeps, evaluations }
}
