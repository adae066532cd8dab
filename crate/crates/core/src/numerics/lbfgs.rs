//! Limited-memory BFGS with a strong-Wolfe line search.

use std::collections::VecDeque;

use super::BoxedFunction;
use crate::error::{Error, Result};

const C1: f64 = 1e-4;
const C2: f64 = 0.9;
const MAX_BISECTIONS: usize = 40;
const MAX_EXPANSIONS: usize = 40;

#[derive(Clone, Copy, Debug)]
pub struct LbfgsOptions {
    pub tol_grad: f64,
    pub max_iter: usize,
    pub memory: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            tol_grad: super::DEFAULT_TOL_GRAD,
            max_iter: super::DEFAULT_MAX_ITER,
            memory: 10,
        }
    }
}

/// Result of a minimization. `converged` is false when `max_iter` ran out;
/// `x` is then the best iterate seen.
#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value at every accepted iterate, starting with `x0`.
    pub trace: Vec<f64>,
}

pub fn lbfgs_minimize(
    f: &BoxedFunction<'_>,
    x0: &[f64],
    tol_grad: f64,
    max_iter: usize,
) -> Result<Minimum> {
    lbfgs_minimize_with(
        f,
        x0,
        LbfgsOptions {
            tol_grad,
            max_iter,
            ..LbfgsOptions::default()
        },
    )
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Point {
    alpha: f64,
    f: f64,
    slope: f64,
    x: Vec<f64>,
    g: Vec<f64>,
}

pub fn lbfgs_minimize_with(
    f: &BoxedFunction<'_>,
    x0: &[f64],
    opts: LbfgsOptions,
) -> Result<Minimum> {
    if !(opts.tol_grad > 0.0) {
        return Err(Error::Invalid(format!(
            "gradient tolerance must be positive, got {}",
            opts.tol_grad
        )));
    }
    let (mut fx, mut g) = f.eval(x0)?;
    let mut x = x0.to_vec();
    let mut trace = vec![fx];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut restarted = false;

    for iter in 0..opts.max_iter {
        let gnorm = inf_norm(&g);
        if gnorm <= opts.tol_grad {
            return Ok(Minimum {
                grad_norm: gnorm,
                x,
                f: fx,
                grad: g,
                iterations: iter,
                converged: true,
                trace,
            });
        }

        let mut dir = two_loop(&g, &pairs);
        let mut slope = dot(&dir, &g);
        if !(slope < 0.0) {
            pairs.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = dot(&dir, &g);
        }
        let alpha0 = if pairs.is_empty() {
            (1.0 / inf_norm(&dir)).min(1.0)
        } else {
            1.0
        };

        let step = line_search(f, &x, fx, &dir, slope, alpha0);
        let point = match step {
            Some(p) => p,
            None if !pairs.is_empty() && !restarted => {
                // Stale curvature pairs can produce a poor direction; retry
                // once from steepest descent before giving up.
                pairs.clear();
                restarted = true;
                continue;
            }
            None => {
                return Err(Error::Stagnation {
                    x,
                    f: fx,
                    iterations: iter,
                    reason: "line search failed to satisfy the Wolfe conditions".into(),
                })
            }
        };
        restarted = false;

        let s: Vec<f64> = point.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = point.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-16 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if pairs.len() == opts.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        x = point.x;
        fx = point.f;
        g = point.g;
        trace.push(fx);
    }

    let gnorm = inf_norm(&g);
    Ok(Minimum {
        converged: gnorm <= opts.tol_grad,
        grad_norm: gnorm,
        x,
        f: fx,
        grad: g,
        iterations: opts.max_iter,
        trace,
    })
}

fn two_loop(g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in &mut q {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

fn probe(f: &BoxedFunction<'_>, x: &[f64], dir: &[f64], alpha: f64) -> Option<Point> {
    let xn: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a + alpha * d).collect();
    let (fv, g) = f.eval(&xn).ok()?;
    Some(Point {
        alpha,
        f: fv,
        slope: dot(&g, dir),
        x: xn,
        g,
    })
}

/// Bracketing phase followed by zoom (cubic interpolation, bisection
/// fallback). Returns `None` when no acceptable point is found.
fn line_search(
    f: &BoxedFunction<'_>,
    x: &[f64],
    f0: f64,
    dir: &[f64],
    slope0: f64,
    alpha0: f64,
) -> Option<Point> {
    let armijo = |p: &Point| p.f <= f0 + C1 * p.alpha * slope0;
    let curvature = |p: &Point| p.slope.abs() <= -C2 * slope0;

    let mut prev = Point {
        alpha: 0.0,
        f: f0,
        slope: slope0,
        x: x.to_vec(),
        g: Vec::new(),
    };
    let mut alpha = alpha0;
    let mut best: Option<Point> = None;
    for i in 0..MAX_EXPANSIONS {
        let Some(cur) = probe(f, x, dir, alpha) else {
            // Non-finite evaluation: step back toward the last good point.
            alpha = 0.5 * (prev.alpha + alpha);
            continue;
        };
        if !armijo(&cur) || (i > 0 && cur.f >= prev.f) {
            return zoom(f, x, f0, dir, slope0, prev, cur, &mut best);
        }
        if curvature(&cur) {
            return Some(cur);
        }
        if cur.slope >= 0.0 {
            return zoom(f, x, f0, dir, slope0, cur, prev, &mut best);
        }
        alpha = 2.0 * cur.alpha;
        if cur.f < f0 {
            best = Some(Point {
                alpha: cur.alpha,
                f: cur.f,
                slope: cur.slope,
                x: cur.x.clone(),
                g: cur.g.clone(),
            });
        }
        prev = cur;
    }
    None
}

#[allow(clippy::too_many_arguments)]
fn zoom(
    f: &BoxedFunction<'_>,
    x: &[f64],
    f0: f64,
    dir: &[f64],
    slope0: f64,
    mut lo: Point,
    mut hi: Point,
    best: &mut Option<Point>,
) -> Option<Point> {
    for _ in 0..MAX_BISECTIONS {
        let (a, b) = (lo.alpha.min(hi.alpha), lo.alpha.max(hi.alpha));
        let width = b - a;
        if width <= f64::EPSILON * b.max(1e-300) {
            break;
        }
        let mut trial = cubic_min(&lo, &hi);
        if !(trial > a + 0.1 * width && trial < b - 0.1 * width) {
            trial = 0.5 * (lo.alpha + hi.alpha);
        }
        let Some(cur) = probe(f, x, dir, trial) else {
            hi = Point {
                alpha: trial,
                f: f64::INFINITY,
                slope: 0.0,
                x: Vec::new(),
                g: Vec::new(),
            };
            continue;
        };
        if cur.f < f0 && best.as_ref().is_none_or(|p| cur.f < p.f) {
            *best = Some(Point {
                alpha: cur.alpha,
                f: cur.f,
                slope: cur.slope,
                x: cur.x.clone(),
                g: cur.g.clone(),
            });
        }
        if cur.f > f0 + C1 * cur.alpha * slope0 || cur.f >= lo.f {
            // Sufficient decrease can fail purely from rounding once the
            // objective has flattened; accept a non-increasing point that
            // meets the curvature condition.
            if cur.f <= f0 && cur.slope.abs() <= -C2 * slope0 && cur.f <= lo.f {
                return Some(cur);
            }
            hi = cur;
        } else {
            if cur.slope.abs() <= -C2 * slope0 {
                return Some(cur);
            }
            if cur.slope * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
    }
    best.take()
}

/// Minimizer of the cubic interpolating value and slope at both ends.
fn cubic_min(p: &Point, q: &Point) -> f64 {
    if !q.f.is_finite() || !p.f.is_finite() {
        return f64::NAN;
    }
    let d1 = p.slope + q.slope - 3.0 * (p.f - q.f) / (p.alpha - q.alpha);
    let disc = d1 * d1 - p.slope * q.slope;
    if disc < 0.0 {
        return f64::NAN;
    }
    let d2 = (q.alpha - p.alpha).signum() * disc.sqrt();
    q.alpha - (q.alpha - p.alpha) * (q.slope + d2 - d1) / (q.slope - p.slope + 2.0 * d2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::DualScalar;

    fn rosenbrock() -> BoxedFunction<'static> {
        BoxedFunction::from_dual(2, |x| {
            let a = DualScalar::constant(1.0) - &x[0];
            let b = x[1].clone() - x[0].clone() * &x[0];
            a.clone() * &a + b.clone() * &b * 100.0
        })
    }

    #[test]
    fn shifted_quadratic() {
        let f = BoxedFunction::new(2, |x| {
            let d = [x[0] - 1.0, x[1] - 2.0];
            (d[0] * d[0] + d[1] * d[1], vec![2.0 * d[0], 2.0 * d[1]])
        });
        let m = lbfgs_minimize(&f, &[0.0, 0.0], 1e-9, 100).unwrap();
        assert!(m.converged);
        assert!((m.x[0] - 1.0).abs() < 1e-9 && (m.x[1] - 2.0).abs() < 1e-9);
        assert!(m.f < 1e-18);
    }

    #[test]
    fn rosenbrock_from_standard_start() {
        let m = lbfgs_minimize(&rosenbrock(), &[-1.2, 1.0], 1e-9, 5000).unwrap();
        assert!(m.converged, "{m:?}");
        assert!(m.f <= 1e-10);
        assert!((m.x[0] - 1.0).abs() < 1e-5 && (m.x[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn objective_never_increases() {
        let m = lbfgs_minimize(&rosenbrock(), &[-1.2, 1.0], 1e-9, 5000).unwrap();
        assert!(m.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn linear_objective_stagnates() {
        let f = BoxedFunction::new(2, |x| (x[0] + 2.0 * x[1], vec![1.0, 2.0]));
        match lbfgs_minimize(&f, &[0.0, 0.0], 1e-9, 100) {
            Err(Error::Stagnation { x, .. }) => assert_eq!(x.len(), 2),
            other => panic!("expected stagnation, got {other:?}"),
        }
    }

    #[test]
    fn max_iter_returns_best_iterate_unconverged() {
        let m = lbfgs_minimize(&rosenbrock(), &[-1.2, 1.0], 1e-12, 3).unwrap();
        assert!(!m.converged);
        assert_eq!(m.iterations, 3);
        assert!(m.f < 24.2);
    }
}
