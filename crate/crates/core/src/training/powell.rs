//! Powell's conjugate-direction search with bounded golden-section line
//! minimization, and its use for tuning the reservoir group's (α, ρ).

use crate::error::{Error, Result};
use crate::reservoir::ReservoirConfig;

const GOLDEN: f64 = 0.618_033_988_749_894_9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowellOptions {
    pub max_evals: usize,
    /// relative decrease per sweep below which the search stops
    pub tol: f64,
    /// absolute width at which a line search stops
    pub line_tol: f64,
}

impl Default for PowellOptions {
    fn default() -> Self {
        Self {
            max_evals: 5000,
            tol: 1e-12,
            line_tol: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PowellResult {
    pub point: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    /// false when the evaluation budget ran out first
    pub converged: bool,
}

struct Budget<F> {
    f: F,
    evals: usize,
    max: usize,
    best: (Vec<f64>, f64),
}

impl<F: FnMut(&[f64]) -> f64> Budget<F> {
    fn eval(&mut self, x: &[f64]) -> Option<f64> {
        if self.evals >= self.max {
            return None;
        }
        self.evals += 1;
        let v = (self.f)(x);
        let v = if v.is_nan() { f64::INFINITY } else { v };
        if v < self.best.1 {
            self.best = (x.to_vec(), v);
        }
        Some(v)
    }
}

fn along(x: &[f64], d: &[f64], t: f64, bounds: &[(f64, f64)]) -> Vec<f64> {
    x.iter()
        .zip(d)
        .zip(bounds)
        .map(|((xi, di), (lo, hi))| (xi + t * di).clamp(*lo, *hi))
        .collect()
}

/// Step interval `[a, b]` keeping `x + t·d` inside the box.
fn feasible_interval(x: &[f64], d: &[f64], bounds: &[(f64, f64)]) -> (f64, f64) {
    let (mut a, mut b) = (f64::NEG_INFINITY, f64::INFINITY);
    for ((xi, di), (lo, hi)) in x.iter().zip(d).zip(bounds) {
        if di.abs() < 1e-300 {
            continue;
        }
        let (t1, t2) = ((lo - xi) / di, (hi - xi) / di);
        a = a.max(t1.min(t2));
        b = b.min(t1.max(t2));
    }
    (a, b)
}

/// Golden-section minimization along `d`; returns the new point only when it
/// strictly improves on `fx`.
fn line_minimize<F: FnMut(&[f64]) -> f64>(
    budget: &mut Budget<F>,
    x: &[f64],
    fx: f64,
    d: &[f64],
    bounds: &[(f64, f64)],
    tol: f64,
) -> Option<(Vec<f64>, f64)> {
    let (mut a, mut b) = feasible_interval(x, d, bounds);
    if !(a.is_finite() && b.is_finite()) || b - a <= tol {
        return Some((x.to_vec(), fx));
    }
    let mut c = b - GOLDEN * (b - a);
    let mut e = a + GOLDEN * (b - a);
    let mut fc = budget.eval(&along(x, d, c, bounds))?;
    let mut fe = budget.eval(&along(x, d, e, bounds))?;
    while b - a > tol {
        if fc <= fe {
            b = e;
            e = c;
            fe = fc;
            c = b - GOLDEN * (b - a);
            fc = budget.eval(&along(x, d, c, bounds))?;
        } else {
            a = c;
            c = e;
            fc = fe;
            e = a + GOLDEN * (b - a);
            fe = budget.eval(&along(x, d, e, bounds))?;
        }
    }
    let (t, ft) = if fc <= fe { (c, fc) } else { (e, fe) };
    if ft < fx {
        Some((along(x, d, t, bounds), ft))
    } else {
        Some((x.to_vec(), fx))
    }
}

/// Minimizes `objective` over the box `bounds` from `start` (clamped).
pub fn powell_search<F>(
    objective: F,
    start: &[f64],
    bounds: &[(f64, f64)],
    options: PowellOptions,
) -> Result<PowellResult>
where
    F: FnMut(&[f64]) -> f64,
{
    let n = start.len();
    if n == 0 || bounds.len() != n {
        return Err(Error::dim("start point and bounds must have equal, nonzero length"));
    }
    if bounds.iter().any(|(lo, hi)| !(lo <= hi)) {
        return Err(Error::Range("every bound needs lo <= hi".into()));
    }
    let mut budget = Budget {
        f: objective,
        evals: 0,
        max: options.max_evals.max(1),
        best: (Vec::new(), f64::INFINITY),
    };
    let mut x: Vec<f64> = start
        .iter()
        .zip(bounds)
        .map(|(s, (lo, hi))| s.clamp(*lo, *hi))
        .collect();
    let mut fx = budget.eval(&x).expect("budget is at least one evaluation");
    budget.best = (x.clone(), fx);
    let mut dirs: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let converged = 'outer: loop {
        let (x0, f0) = (x.clone(), fx);
        let (mut biggest, mut biggest_at) = (0.0, 0);
        for (i, d) in dirs.iter().enumerate() {
            let Some((nx, nf)) = line_minimize(&mut budget, &x, fx, d, bounds, options.line_tol) else {
                break 'outer false;
            };
            if fx - nf > biggest {
                biggest = fx - nf;
                biggest_at = i;
            }
            x = nx;
            fx = nf;
        }
        if 2.0 * (f0 - fx) <= options.tol * (f0.abs() + fx.abs()) + 1e-300 {
            break true;
        }
        let shift: Vec<f64> = x.iter().zip(&x0).map(|(a, b)| a - b).collect();
        let len = shift.iter().map(|v| v * v).sum::<f64>().sqrt();
        if len == 0.0 {
            continue;
        }
        let extrapolated = along(&x, &shift, 1.0, bounds);
        let Some(fe) = budget.eval(&extrapolated) else {
            break false;
        };
        if fe < f0 {
            let lhs = 2.0 * (f0 - 2.0 * fx + fe) * (f0 - fx - biggest).powi(2);
            let rhs = biggest * (f0 - fe).powi(2);
            if lhs < rhs {
                let d: Vec<f64> = shift.iter().map(|v| v / len).collect();
                let Some((nx, nf)) = line_minimize(&mut budget, &x, fx, &d, bounds, options.line_tol) else {
                    break false;
                };
                x = nx;
                fx = nf;
                dirs.remove(biggest_at);
                dirs.push(d);
            }
        }
    };
    let (point, value) = budget.best.clone();
    Ok(PowellResult {
        point,
        value,
        evals: budget.evals,
        converged,
    })
}

/// Moves the group's (α, ρ) centre to `(alpha, rho)`, keeping each member's
/// offset from the group mean.
pub fn recenter_group(configs: &[ReservoirConfig], alpha: f64, rho: f64) -> Vec<ReservoirConfig> {
    let n = configs.len().max(1) as f64;
    let mean_alpha = configs.iter().map(|c| c.leaky_alpha).sum::<f64>() / n;
    let mean_rho = configs.iter().map(|c| c.spectral_radius).sum::<f64>() / n;
    configs
        .iter()
        .map(|c| ReservoirConfig {
            leaky_alpha: (alpha + c.leaky_alpha - mean_alpha).clamp(0.0, 1.0),
            spectral_radius: (rho + c.spectral_radius - mean_rho).clamp(1e-3, 1.5),
            ..c.clone()
        })
        .collect()
}

/// Bounds of the (α, ρ) search.
pub const ALPHA_RHO_BOUNDS: [(f64, f64); 2] = [(0.0, 1.0), (1e-3, 1.5)];

/// Tunes the group centre with `objective` (e.g. validation loss after a
/// short training run).
pub fn tune_group<F>(
    configs: &[ReservoirConfig],
    mut objective: F,
    options: PowellOptions,
) -> Result<(Vec<ReservoirConfig>, PowellResult)>
where
    F: FnMut(&[ReservoirConfig]) -> f64,
{
    let n = configs.len().max(1) as f64;
    let start = [
        configs.iter().map(|c| c.leaky_alpha).sum::<f64>() / n,
        configs.iter().map(|c| c.spectral_radius).sum::<f64>() / n,
    ];
    let result = powell_search(
        |p| objective(&recenter_group(configs, p[0], p[1])),
        &start,
        &ALPHA_RHO_BOUNDS,
        options,
    )?;
    Ok((recenter_group(configs, result.point[0], result.point[1]), result))
}
