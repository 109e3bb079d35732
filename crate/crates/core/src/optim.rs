//! Limited-memory BFGS with a strong-Wolfe line search.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LbfgsConfig {
    pub max_iterations: usize,
    /// History length.
    pub memory: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    /// Stop when the gradient infinity norm falls below this.
    pub gradient_tolerance: f64,
    /// Stop when `(f_k - f_{k+1}) / max(|f_k|, 1)` falls below this. With 0
    /// the run continues into the rounding floor of the objective, where
    /// steps that raise it by at most 1e-12 relative are accepted on
    /// gradient evidence.
    pub relative_decrease_tolerance: f64,
    /// Trial steps per line search before giving up.
    pub max_line_search_steps: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            max_iterations: 100,
            memory: 10,
            c1: 1e-4,
            c2: 0.9,
            gradient_tolerance: 1e-6,
            relative_decrease_tolerance: 1e-12,
            max_line_search_steps: 40,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::Config(format!(
                "line-search constants need 0 < c1 < c2 < 1, got c1 = {}, c2 = {}",
                self.c1, self.c2
            )));
        }
        if self.memory == 0 {
            return Err(Error::Config("L-BFGS memory must be at least 1".into()));
        }
        if !(self.gradient_tolerance >= 0.0 && self.relative_decrease_tolerance >= 0.0) {
            return Err(Error::Config("tolerances must be nonnegative".into()));
        }
        if self.max_line_search_steps == 0 {
            return Err(Error::Config("line search needs at least one step".into()));
        }
        Ok(())
    }
}

/// Why an optimization run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    RelativeDecrease,
    IterationCap,
    LineSearchFailure,
    /// Nothing to optimize.
    NoFreeParameters,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Objective at the start and after every accepted step.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

/// Relative decrease below which the objective counts as flat.
const FLAT_DECREASE: f64 = 1e-12;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

struct Point {
    alpha: f64,
    x: Vec<f64>,
    value: f64,
    gradient: Vec<f64>,
    slope: f64,
}

struct LineSearch<'a, F> {
    objective: &'a mut F,
    evaluations: &'a mut usize,
    x: &'a [f64],
    direction: &'a [f64],
    f0: f64,
    slope0: f64,
    c1: f64,
    c2: f64,
    budget: usize,
    /// Lowest trial point satisfying sufficient decrease.
    best: Option<Point>,
}

impl<F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>> LineSearch<'_, F> {
    /// Evaluates the objective along the ray; failures and non-finite values
    /// count as +inf so the search backs off.
    fn probe(&mut self, alpha: f64) -> Result<Point> {
        if self.budget == 0 {
            return Err(Error::Numeric("line-search budget exhausted".into()));
        }
        self.budget -= 1;
        *self.evaluations += 1;
        let x: Vec<f64> = self.x.iter().zip(self.direction).map(|(a, d)| a + alpha * d).collect();
        let (value, gradient) = match (self.objective)(&x) {
            Ok((v, g)) if v.is_finite() && g.iter().all(|x| x.is_finite()) => (v, g),
            Ok(_) | Err(Error::Numeric(_)) => (f64::INFINITY, vec![0.0; x.len()]),
            Err(e) => return Err(e),
        };
        let slope = dot(&gradient, self.direction);
        let point = Point {
            alpha,
            x,
            value,
            gradient,
            slope,
        };
        if self.armijo(&point) && self.best.as_ref().is_none_or(|b| point.value < b.value) {
            self.best = Some(Point {
                x: point.x.clone(),
                gradient: point.gradient.clone(),
                ..point
            });
        }
        Ok(point)
    }

    fn armijo(&self, p: &Point) -> bool {
        p.value <= self.f0 + self.c1 * p.alpha * self.slope0 && p.value < self.f0
    }

    fn curvature(&self, p: &Point) -> bool {
        p.slope.abs() <= -self.c2 * self.slope0
    }

    /// Near the optimum the change in value drops to the rounding error of
    /// the objective; there a strongly reduced slope is accepted instead.
    fn approximate_wolfe(&self, p: &Point) -> bool {
        (p.value - self.f0).abs() <= FLAT_DECREASE * self.f0.abs()
            && p.slope >= self.c2 * self.slope0
            && p.slope <= -(1.0 - 2.0 * self.c1) * self.slope0
    }

    /// Returns a strong-Wolfe point, `Ok(None)` when the budget runs out.
    fn search(&mut self, initial: f64) -> Result<Option<Point>> {
        let mut prev = Point {
            alpha: 0.0,
            x: Vec::new(),
            value: self.f0,
            gradient: Vec::new(),
            slope: self.slope0,
        };
        let mut alpha = initial;
        let mut first = true;
        loop {
            let p = match self.probe(alpha) {
                Ok(p) => p,
                Err(Error::Numeric(_)) => return Ok(None),
                Err(e) => return Err(e),
            };
            if self.approximate_wolfe(&p) {
                return Ok(Some(p));
            }
            if !self.armijo(&p) || (!first && p.value >= prev.value) {
                return self.zoom(prev, p);
            }
            if self.curvature(&p) {
                return Ok(Some(p));
            }
            if p.slope >= 0.0 {
                return self.zoom(p, prev);
            }
            first = false;
            alpha = 2.0 * p.alpha;
            prev = p;
        }
    }

    fn zoom(&mut self, mut lo: Point, mut hi: Point) -> Result<Option<Point>> {
        loop {
            let alpha = interpolate(&lo, &hi);
            if (hi.alpha - lo.alpha).abs() <= f64::EPSILON * lo.alpha.abs().max(1e-12) {
                return Ok(None);
            }
            let p = match self.probe(alpha) {
                Ok(p) => p,
                Err(Error::Numeric(_)) => return Ok(None),
                Err(e) => return Err(e),
            };
            if self.approximate_wolfe(&p) {
                return Ok(Some(p));
            }
            if !self.armijo(&p) || p.value >= lo.value {
                hi = p;
            } else {
                if self.curvature(&p) {
                    return Ok(Some(p));
                }
                if p.slope * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = p;
            }
        }
    }
}

/// Safeguarded cubic interpolation between two bracket ends, falling back to bisection.
fn interpolate(lo: &Point, hi: &Point) -> f64 {
    let (a, b) = (lo.alpha, hi.alpha);
    let mid = 0.5 * (a + b);
    if !hi.value.is_finite() {
        return mid;
    }
    let d1 = lo.slope + hi.slope - 3.0 * (lo.value - hi.value) / (a - b);
    let disc = d1 * d1 - lo.slope * hi.slope;
    if disc < 0.0 {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let denom = hi.slope - lo.slope + 2.0 * d2;
    if denom == 0.0 {
        return mid;
    }
    let t = b - (b - a) * (hi.slope + d2 - d1) / denom;
    let (low, high) = (a.min(b), a.max(b));
    let margin = 0.1 * (high - low);
    if t.is_finite() && t > low + margin && t < high - margin {
        t
    } else {
        mid
    }
}

/// Minimizes `objective` (returning value and gradient) from `x0`.
pub fn lbfgs_minimize<F>(mut objective: F, x0: &[f64], config: &LbfgsConfig) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    config.validate()?;
    let mut evaluations = 1;
    let (mut value, mut gradient) = objective(x0)?;
    if !value.is_finite() || gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("objective is not finite at the starting point".into()));
    }
    if gradient.len() != x0.len() {
        return Err(Error::Shape("gradient length differs from the parameter count".into()));
    }
    let mut x = x0.to_vec();
    let mut trace = vec![value];
    let finish = |x, value, gradient, trace, iterations, evaluations, termination| {
        Ok(LbfgsResult {
            x,
            value,
            gradient,
            trace,
            iterations,
            evaluations,
            termination,
        })
    };
    if x.is_empty() {
        return finish(x, value, gradient, trace, 0, evaluations, Termination::NoFreeParameters);
    }
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(config.memory);
    let mut iterations = 0;
    loop {
        if inf_norm(&gradient) < config.gradient_tolerance {
            return finish(x, value, gradient, trace, iterations, evaluations, Termination::GradientTolerance);
        }
        if iterations >= config.max_iterations {
            return finish(x, value, gradient, trace, iterations, evaluations, Termination::IterationCap);
        }
        let mut direction = two_loop(&history, &gradient);
        let mut slope = dot(&direction, &gradient);
        if !(slope < 0.0) {
            history.clear();
            direction = gradient.iter().map(|g| -g).collect();
            slope = dot(&direction, &gradient);
        }
        let initial = if history.is_empty() {
            (1.0 / inf_norm(&direction)).min(1.0)
        } else {
            1.0
        };
        let mut search = LineSearch {
            objective: &mut objective,
            evaluations: &mut evaluations,
            x: &x,
            direction: &direction,
            f0: value,
            slope0: slope,
            c1: config.c1,
            c2: config.c2,
            budget: config.max_line_search_steps,
            best: None,
        };
        let accepted = match search.search(initial)? {
            Some(p) => p,
            None => match search.best.take() {
                Some(p) => p,
                None => {
                    return finish(x, value, gradient, trace, iterations, evaluations, Termination::LineSearchFailure)
                }
            },
        };
        if accepted.value > value && config.relative_decrease_tolerance > 0.0 {
            return finish(x, value, gradient, trace, iterations, evaluations, Termination::RelativeDecrease);
        }
        iterations += 1;
        let s: Vec<f64> = accepted.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = accepted.gradient.iter().zip(&gradient).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if history.len() == config.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let previous = value;
        x = accepted.x;
        value = accepted.value;
        gradient = accepted.gradient;
        trace.push(value);
        if (previous - value) / previous.abs().max(1.0) < config.relative_decrease_tolerance {
            return finish(x, value, gradient, trace, iterations, evaluations, Termination::RelativeDecrease);
        }
    }
}

fn two_loop(history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>, gradient: &[f64]) -> Vec<f64> {
    let mut q = gradient.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}
