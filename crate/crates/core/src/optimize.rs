//! Limited-memory BFGS with a halving strong-Wolfe line search.
//!
//! Everything is generic over [`Vector`] so the same code drives the dense
//! test problems and the momentum fields of the regression.

use std::collections::VecDeque;

use crate::error::{GdrError, Result};

/// Curvature pairs with `<y, s>` at or below this are discarded.
pub const CURVATURE_GUARD: f64 = 1e-12;

pub trait Vector: Clone {
    fn dot(&self, other: &Self) -> f64;
    /// `self += alpha * x`
    fn axpy(&mut self, alpha: f64, x: &Self);
    fn scale(&mut self, alpha: f64);

    fn norm(&self) -> f64 {
        self.dot(self).max(0.0).sqrt()
    }

    fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.scale(alpha);
        out
    }

    /// `self - other`
    fn minus(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }
}

impl Vector for Vec<f64> {
    fn dot(&self, other: &Self) -> f64 {
        self.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    fn axpy(&mut self, alpha: f64, x: &Self) {
        for (a, b) in self.iter_mut().zip(x) {
            *a += alpha * b;
        }
    }

    fn scale(&mut self, alpha: f64) {
        for a in self.iter_mut() {
            *a *= alpha;
        }
    }
}

#[derive(Debug, Clone)]
struct Pair<X> {
    s: X,
    y: X,
    rho: f64,
}

/// Ring buffer of the most recent `m` curvature pairs.
#[derive(Debug, Clone)]
pub struct LbfgsHistory<X> {
    m: usize,
    pairs: VecDeque<Pair<X>>,
}

impl<X: Vector> LbfgsHistory<X> {
    pub fn new(m: usize) -> Self {
        LbfgsHistory { m: m.max(1), pairs: VecDeque::with_capacity(m.max(1)) }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn clear(&mut self) {
        self.pairs.clear();
    }

    /// Stores `(s, y)` unless it fails the curvature guard; returns whether
    /// the pair was kept.
    pub fn push(&mut self, s: X, y: X) -> bool {
        let sy = s.dot(&y);
        if !(sy > CURVATURE_GUARD) || !sy.is_finite() {
            return false;
        }
        if self.pairs.len() == self.m {
            self.pairs.pop_front();
        }
        self.pairs.push_back(Pair { s, y, rho: 1.0 / sy });
        true
    }

    /// Two-loop recursion; `None` when the history is empty.
    pub fn direction(&self, g: &X) -> Option<X> {
        let newest = self.pairs.back()?;
        let mut q = g.clone();
        let mut alpha = vec![0.0; self.pairs.len()];
        for (i, p) in self.pairs.iter().enumerate().rev() {
            alpha[i] = p.rho * p.s.dot(&q);
            q.axpy(-alpha[i], &p.y);
        }
        let gamma = newest.s.dot(&newest.y) / newest.y.dot(&newest.y);
        let mut r = q.scaled(gamma);
        for (i, p) in self.pairs.iter().enumerate() {
            let beta = p.rho * p.y.dot(&r);
            r.axpy(alpha[i] - beta, &p.s);
        }
        r.scale(-1.0);
        Some(r)
    }
}

/// L-BFGS direction, falling back to steepest descent for an empty history.
pub fn lbfgs_direction<X: Vector>(history: &LbfgsHistory<X>, g: &X) -> X {
    history.direction(g).unwrap_or_else(|| g.scaled(-1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WolfeParams {
    pub c1: f64,
    pub c2: f64,
    pub initial_step: f64,
    pub max_halvings: usize,
}

impl Default for WolfeParams {
    fn default() -> Self {
        WolfeParams { c1: 1e-4, c2: 0.9, initial_step: 1.0, max_halvings: 30 }
    }
}

/// A cost/gradient evaluation with whatever else the caller wants to keep.
#[derive(Debug, Clone)]
pub struct Evaluation<X, P> {
    pub cost: f64,
    pub grad: X,
    pub payload: P,
}

#[derive(Debug, Clone)]
pub struct Step<X, P> {
    pub s: f64,
    pub x: X,
    pub eval: Evaluation<X, P>,
    /// Number of trial steps evaluated, including the accepted one.
    pub trials: usize,
}

#[derive(Debug, Clone)]
pub enum LineSearch<X, P> {
    Accepted(Step<X, P>),
    /// No step satisfied both conditions; carries the lowest-cost trial that
    /// still decreased the cost, if any.
    Exhausted(Option<Step<X, P>>),
}

/// Checks both strong Wolfe inequalities for a step.
pub fn wolfe_conditions(f0: f64, slope0: f64, f: f64, slope: f64, s: f64, p: &WolfeParams) -> (bool, bool) {
    (f <= f0 + p.c1 * s * slope0, slope.abs() <= (p.c2 * slope0).abs())
}

/// Halving line search from `initial_step`. Evaluation errors that mark an
/// infeasible trial (see [`GdrError::is_infeasible_flow`]) count as infinite
/// cost; other errors are returned.
pub fn wolfe_line_search<X, P, F>(
    mut eval: F,
    x: &X,
    f0: f64,
    g: &X,
    z: &X,
    params: &WolfeParams,
) -> Result<LineSearch<X, P>>
where
    X: Vector,
    F: FnMut(&X) -> Result<Evaluation<X, P>>,
{
    let slope0 = z.dot(g);
    if !(slope0 < 0.0) {
        return Err(GdrError::NotDescent(slope0));
    }
    let mut s = params.initial_step;
    let mut best: Option<Step<X, P>> = None;
    for trial in 1..=params.max_halvings + 1 {
        let mut xt = x.clone();
        xt.axpy(s, z);
        match eval(&xt) {
            Ok(e) if e.cost.is_finite() => {
                let slope = z.dot(&e.grad);
                let (armijo, curvature) = wolfe_conditions(f0, slope0, e.cost, slope, s, params);
                log::trace!("line search s={s:.3e} cost={:.9e} armijo={armijo} curvature={curvature}", e.cost);
                let step = Step { s, x: xt, eval: e, trials: trial };
                if armijo && curvature {
                    return Ok(LineSearch::Accepted(step));
                }
                if step.eval.cost < f0 && best.as_ref().map_or(true, |b| step.eval.cost < b.eval.cost) {
                    best = Some(step);
                }
            }
            Ok(_) => log::debug!("line search s={s:.3e}: non-finite cost"),
            Err(err) if err.is_infeasible_flow() => log::debug!("line search s={s:.3e}: {err}"),
            Err(err) => return Err(err),
        }
        s *= 0.5;
    }
    Ok(LineSearch::Exhausted(best))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub m: usize,
    pub warmup: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub wolfe: WolfeParams,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions { m: 3, warmup: 0, max_iters: 200, grad_tol: 1e-8, wolfe: WolfeParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcceptedStep {
    pub s: f64,
    pub f0: f64,
    pub slope0: f64,
    pub f: f64,
    pub slope: f64,
}

#[derive(Debug, Clone)]
pub struct Minimum<X> {
    pub x: X,
    pub cost: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub steps: Vec<AcceptedStep>,
}

/// Minimizes a smooth function given a cost-and-gradient oracle.
pub fn minimize<X, F>(oracle: F, x0: X, opts: &LbfgsOptions) -> Result<Minimum<X>>
where
    X: Vector,
    F: FnMut(&X) -> Result<(f64, X)>,
{
    minimize_with_initial_step(oracle, x0, opts, |_: &X, _: &X, _: &X| opts.wolfe.initial_step)
}

/// As [`minimize`], with the first trial step of each line search chosen by
/// `initial_step(x, g, z)`. Halving then proceeds as usual, so accepted
/// steps still satisfy both Wolfe conditions. With the exact minimiser
/// along `z` this gives exact line searches on quadratics.
pub fn minimize_with_initial_step<X, F, S>(
    mut oracle: F,
    x0: X,
    opts: &LbfgsOptions,
    mut initial_step: S,
) -> Result<Minimum<X>>
where
    X: Vector,
    F: FnMut(&X) -> Result<(f64, X)>,
    S: FnMut(&X, &X, &X) -> f64,
{
    let mut x = x0;
    let (mut f, mut g) = oracle(&x)?;
    let mut history = LbfgsHistory::new(opts.m);
    let mut steps = Vec::new();
    for iter in 0..opts.max_iters {
        let gn = g.norm();
        if gn < opts.grad_tol {
            return Ok(Minimum { x, cost: f, grad_norm: gn, iterations: iter, converged: true, steps });
        }
        let mut z = if iter < opts.warmup { g.scaled(-1.0) } else { lbfgs_direction(&history, &g) };
        if !(z.dot(&g) < 0.0) {
            history.clear();
            z = g.scaled(-1.0);
        }
        let slope0 = z.dot(&g);
        let s0 = initial_step(&x, &g, &z);
        let wolfe = WolfeParams {
            initial_step: if s0 > 0.0 && s0.is_finite() { s0 } else { opts.wolfe.initial_step },
            ..opts.wolfe
        };
        let ls = wolfe_line_search(
            |xt: &X| oracle(xt).map(|(cost, grad)| Evaluation { cost, grad, payload: () }),
            &x,
            f,
            &g,
            &z,
            &wolfe,
        )?;
        let step = match ls {
            LineSearch::Accepted(step) => step,
            LineSearch::Exhausted(best) => {
                log::warn!("line search exhausted at iteration {iter}");
                if let Some(b) = best {
                    x = b.x;
                    f = b.eval.cost;
                    g = b.eval.grad;
                }
                let grad_norm = g.norm();
                return Ok(Minimum { x, cost: f, grad_norm, iterations: iter + 1, converged: false, steps });
            }
        };
        steps.push(AcceptedStep { s: step.s, f0: f, slope0, f: step.eval.cost, slope: z.dot(&step.eval.grad) });
        history.push(step.x.minus(&x), step.eval.grad.minus(&g));
        x = step.x;
        f = step.eval.cost;
        g = step.eval.grad;
    }
    let grad_norm = g.norm();
    Ok(Minimum { x, cost: f, grad_norm, iterations: opts.max_iters, converged: grad_norm < opts.grad_tol, steps })
}
