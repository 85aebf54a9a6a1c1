//! Projected L-BFGS for box-constrained minimization.

use std::collections::VecDeque;

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iters: usize,
    /// Stop when `|Δf| < f_tol·(1 + |f|)` on an accepted step.
    pub f_tol: f64,
    /// Stop when the projected gradient's ∞-norm drops below this.
    pub g_tol: f64,
    pub max_backtracks: usize,
    pub armijo: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iters: 200,
            f_tol: 1e-6,
            g_tol: 1e-5,
            max_backtracks: 40,
            armijo: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub projected_grad_norm: f64,
    /// Objective at the start point and after every accepted step.
    pub trace: Vec<f64>,
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// ∞-norm of `x − P(x − g)`.
pub fn projected_gradient_norm(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    (0..x.len())
        .map(|i| (x[i] - (x[i] - g[i]).clamp(lo[i], hi[i])).abs())
        .fold(0.0, f64::max)
}

/// Minimizes `f` over the box `[lo, hi]`. The objective returns `None` for
/// points where it cannot be evaluated; the line search treats those as
/// infinitely bad. Returns `None` only if the start point fails.
pub fn minimize<F>(mut f: F, x0: &[f64], lo: &[f64], hi: &[f64], opts: &LbfgsOptions) -> Option<LbfgsResult>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    assert!(lo.len() == n && hi.len() == n, "bounds must match the start point");
    let mut x = x0.to_vec();
    project(&mut x, lo, hi);
    let (mut fx, mut g) = f(&x).filter(|(v, gr)| v.is_finite() && gr.iter().all(|d| d.is_finite()))?;
    let mut trace = vec![fx];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>)> = VecDeque::new();
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iters {
        if projected_gradient_norm(&x, &g, lo, hi) < opts.g_tol {
            converged = true;
            break;
        }
        let free: Vec<bool> = (0..n)
            .map(|i| lo[i] < hi[i] && !((x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0)))
            .collect();
        let mask = |v: &[f64]| -> Vec<f64> { v.iter().zip(&free).map(|(a, &m)| if m { *a } else { 0.0 }).collect() };
        let gf = mask(&g);

        // two-loop recursion restricted to the free variables
        let mut q = gf.clone();
        let masked: Vec<(Vec<f64>, Vec<f64>)> = pairs.iter().map(|(s, y)| (mask(s), mask(y))).collect();
        let mut alphas = Vec::with_capacity(masked.len());
        for (s, y) in masked.iter().rev() {
            let sy = dot(s, y);
            if sy <= 0.0 {
                alphas.push(0.0);
                continue;
            }
            let a = dot(s, &q) / sy;
            for i in 0..n {
                q[i] -= a * y[i];
            }
            alphas.push(a);
        }
        let gamma = match masked.last() {
            Some((s, y)) if dot(s, y) > 0.0 && dot(y, y) > 0.0 => dot(s, y) / dot(y, y),
            _ => 1.0 / inf_norm(&gf).max(1.0),
        };
        for v in q.iter_mut() {
            *v *= gamma;
        }
        for ((s, y), a) in masked.iter().zip(alphas.iter().rev()) {
            let sy = dot(s, y);
            if sy <= 0.0 {
                continue;
            }
            let b = dot(y, &q) / sy;
            for i in 0..n {
                q[i] += (a - b) * s[i];
            }
        }
        let mut d: Vec<f64> = mask(&q).iter().map(|v| -v).collect();
        let gd = dot(&gf, &d);
        if !(gd < -1e-12 * dot(&d, &d).sqrt() * dot(&gf, &gf).sqrt()) {
            let scale = 1.0 / inf_norm(&gf).max(1.0);
            d = gf.iter().map(|v| -v * scale).collect();
            pairs.clear();
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let mut xn: Vec<f64> = (0..n).map(|i| x[i] + t * d[i]).collect();
            project(&mut xn, lo, hi);
            let step: Vec<f64> = (0..n).map(|i| xn[i] - x[i]).collect();
            if inf_norm(&step) == 0.0 {
                break;
            }
            let decrease = dot(&g, &step);
            if let Some((fnew, gnew)) = f(&xn) {
                if fnew.is_finite() && gnew.iter().all(|v| v.is_finite()) && fnew <= fx + opts.armijo * decrease {
                    accepted = Some((xn, fnew, gnew));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            break;
        };
        let s: Vec<f64> = (0..n).map(|i| xn[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| gnew[i] - g[i]).collect();
        if dot(&s, &y) > 1e-10 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if pairs.len() == opts.memory {
                pairs.pop_front();
            }
            if opts.memory > 0 {
                pairs.push_back((s, y));
            }
        }
        let df = fx - fnew;
        x = xn;
        fx = fnew;
        g = gnew;
        trace.push(fx);
        iterations += 1;
        if df.abs() < opts.f_tol * (1.0 + fx.abs()) {
            converged = true;
            break;
        }
    }
    let projected_grad_norm = projected_gradient_norm(&x, &g, lo, hi);
    if projected_grad_norm < opts.g_tol {
        converged = true;
    }
    Some(LbfgsResult {
        x,
        f: fx,
        grad: g,
        iterations,
        converged,
        projected_grad_norm,
        trace,
    })
}
