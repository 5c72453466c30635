//! First- and quasi-second-order optimizers shared by training and inversion.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::params::ParamBox;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const LBFGS_MEMORY: usize = 20;
const WOLFE_C1: f64 = 1e-4;
const WOLFE_C2: f64 = 0.9;
pub const GRAD_TOL: f64 = 1e-10;

/// Objective returning value and gradient.
pub trait Objective {
    fn eval(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl<F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>> Objective for F {
    fn eval(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of steps taken so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One bias-corrected Adam update of `x` in place.
pub fn adam_step(x: &mut [f64], g: &[f64], state: &mut AdamState, lr: f64) {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for i in 0..x.len() {
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g[i];
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g[i] * g[i];
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        x[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn axpy(x: &[f64], a: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(x, d)| x + a * d).collect()
}

/// Limited-memory inverse-Hessian approximation (two-loop recursion).
#[derive(Debug, Clone, Default)]
struct Memory {
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    cap: usize,
}

impl Memory {
    fn new(cap: usize) -> Self {
        Memory { pairs: VecDeque::with_capacity(cap), cap }
    }

    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) -> bool {
        let sy = dot(&s, &y);
        // Curvature condition; skipping keeps H positive definite.
        if !(sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt()) {
            return false;
        }
        if self.pairs.len() == self.cap {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
        true
    }

    fn apply(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let mut alpha = vec![0.0; self.pairs.len()];
        for (k, (s, y, rho)) in self.pairs.iter().enumerate().rev() {
            alpha[k] = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(q, y)| *q -= alpha[k] * y);
        }
        if let Some((s, y, _)) = self.pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|q| *q *= gamma);
        }
        for (k, (s, y, rho)) in self.pairs.iter().enumerate() {
            let beta = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(q, s)| *q += (alpha[k] - beta) * s);
        }
        q
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Progress,
    /// Gradient below tolerance; nothing left to do.
    Converged,
    /// No acceptable step; the iterate is unchanged.
    LineSearchFailed,
}

/// L-BFGS with a strong-Wolfe line search, advanced one iteration at a time.
pub struct Lbfgs {
    pub x: Vec<f64>,
    pub f: f64,
    pub g: Vec<f64>,
    memory: Memory,
    iterations: usize,
}

impl Lbfgs {
    pub fn new(x0: Vec<f64>, obj: &mut dyn Objective) -> Result<Self> {
        let (f, g) = obj.eval(&x0)?;
        check_finite(f, &g)?;
        Ok(Lbfgs { x: x0, f, g, memory: Memory::new(LBFGS_MEMORY), iterations: 0 })
    }

    pub fn step(&mut self, obj: &mut dyn Objective) -> Result<StepOutcome> {
        if inf_norm(&self.g) < GRAD_TOL {
            return Ok(StepOutcome::Converged);
        }
        let mut d: Vec<f64> = self.memory.apply(&self.g).into_iter().map(|x| -x).collect();
        let mut dg = dot(&d, &self.g);
        if !(dg < 0.0) {
            self.memory = Memory::new(LBFGS_MEMORY);
            d = self.g.iter().map(|x| -x).collect();
            dg = dot(&d, &self.g);
        }
        let a0 = if self.memory.pairs.is_empty() { (1.0 / dot(&self.g, &self.g).sqrt()).min(1.0) } else { 1.0 };
        let Some((a, f, g)) = strong_wolfe(obj, &self.x, self.f, dg, &d, a0)? else {
            if self.memory.pairs.is_empty() {
                return Ok(StepOutcome::LineSearchFailed);
            }
            // Retry once along steepest descent with a fresh memory.
            self.memory = Memory::new(LBFGS_MEMORY);
            return self.step(obj);
        };
        let x_new = axpy(&self.x, a, &d);
        let s: Vec<f64> = x_new.iter().zip(&self.x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g.iter().zip(&self.g).map(|(a, b)| a - b).collect();
        self.memory.push(s, y);
        self.x = x_new;
        self.f = f;
        self.g = g;
        self.iterations += 1;
        Ok(StepOutcome::Progress)
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }
}

fn check_finite(f: f64, g: &[f64]) -> Result<()> {
    if !f.is_finite() || g.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("non-finite objective or gradient"));
    }
    Ok(())
}

/// Strong-Wolfe line search by bracketing and zooming with safeguarded
/// cubic interpolation. Returns `(step, f, g)` or `None` when no point
/// satisfying the conditions was found.
fn strong_wolfe(
    obj: &mut dyn Objective,
    x: &[f64],
    f0: f64,
    dg0: f64,
    d: &[f64],
    a_init: f64,
) -> Result<Option<(f64, f64, Vec<f64>)>> {
    const MAX_EVALS: usize = 30;
    let mut phi = |a: f64| -> Result<(f64, f64, Vec<f64>)> {
        let (f, g) = obj.eval(&axpy(x, a, d))?;
        Ok((f, dot(&g, d), g))
    };
    let (mut a_prev, mut f_prev, mut dg_prev) = (0.0, f0, dg0);
    let mut a = a_init;
    let mut evals = 0;
    loop {
        let (f, dg, g) = phi(a)?;
        evals += 1;
        let finite = f.is_finite() && dg.is_finite();
        if !finite || f > f0 + WOLFE_C1 * a * dg0 || (evals > 1 && f >= f_prev) {
            // Non-finite values are treated as overshoot.
            let (fh, dgh) = if finite { (f, dg) } else { (f64::INFINITY, f64::NAN) };
            return zoom(&mut phi, f0, dg0, (a_prev, f_prev, dg_prev), (a, fh, dgh), MAX_EVALS - evals);
        }
        if dg.abs() <= -WOLFE_C2 * dg0 {
            return Ok(Some((a, f, g)));
        }
        if dg >= 0.0 {
            return zoom(&mut phi, f0, dg0, (a, f, dg), (a_prev, f_prev, dg_prev), MAX_EVALS - evals);
        }
        if evals >= MAX_EVALS {
            return Ok(None);
        }
        (a_prev, f_prev, dg_prev) = (a, f, dg);
        a *= 2.0;
    }
}

type Phi<'a> = dyn FnMut(f64) -> Result<(f64, f64, Vec<f64>)> + 'a;

fn zoom(
    phi: &mut Phi,
    f0: f64,
    dg0: f64,
    mut lo: (f64, f64, f64),
    mut hi: (f64, f64, f64),
    budget: usize,
) -> Result<Option<(f64, f64, Vec<f64>)>> {
    for _ in 0..budget {
        let (a_lo, a_hi) = (lo.0, hi.0);
        let width = (a_hi - a_lo).abs();
        if width < 1e-16 * a_lo.abs().max(1.0) {
            break;
        }
        let a = interpolate(lo, hi).unwrap_or(0.5 * (a_lo + a_hi));
        // Keep the trial well inside the bracket.
        let (l, h) = (a_lo.min(a_hi), a_lo.max(a_hi));
        let a = a.clamp(l + 0.1 * width, h - 0.1 * width);
        let (f, dg, g) = phi(a)?;
        if !f.is_finite() || f > f0 + WOLFE_C1 * a * dg0 || f >= lo.1 {
            hi = (a, if f.is_finite() { f } else { f64::INFINITY }, dg);
        } else {
            if dg.abs() <= -WOLFE_C2 * dg0 {
                return Ok(Some((a, f, g)));
            }
            if dg * (hi.0 - lo.0) >= 0.0 {
                hi = lo;
            }
            lo = (a, f, dg);
        }
    }
    // Accept the best point found if it still decreases sufficiently.
    if lo.0 > 0.0 && lo.1 <= f0 + WOLFE_C1 * lo.0 * dg0 {
        let (f, _, g) = phi(lo.0)?;
        return Ok(Some((lo.0, f, g)));
    }
    Ok(None)
}

/// Minimizer of the cubic through two points with slopes, if well defined.
fn interpolate(a: (f64, f64, f64), b: (f64, f64, f64)) -> Option<f64> {
    let (x0, f0, d0) = a;
    let (x1, f1, d1) = b;
    if !(f1.is_finite() && d1.is_finite()) {
        return None;
    }
    let d1c = d0 + d1 - 3.0 * (f0 - f1) / (x0 - x1);
    let disc = d1c * d1c - d0 * d1;
    if disc < 0.0 {
        return None;
    }
    let d2 = (x1 - x0).signum() * disc.sqrt();
    let x = x1 - (x1 - x0) * (d1 + d2 - d1c) / (d1 - d0 + 2.0 * d2);
    x.is_finite().then_some(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    /// Set when the line search gave up before `max_epochs`.
    pub line_search_failed: bool,
}

/// Unconstrained minimization for at most `max_epochs` iterations.
pub fn lbfgs_refine(obj: &mut dyn Objective, x0: Vec<f64>, max_epochs: usize) -> Result<LbfgsResult> {
    let mut opt = Lbfgs::new(x0, obj)?;
    let mut failed = false;
    for _ in 0..max_epochs {
        match opt.step(obj)? {
            StepOutcome::Progress => {}
            StepOutcome::Converged => break,
            StepOutcome::LineSearchFailed => {
                log::warn!("L-BFGS line search failed after {} iterations", opt.iterations());
                failed = true;
                break;
            }
        }
    }
    Ok(LbfgsResult { iterations: opt.iterations(), x: opt.x, f: opt.f, line_search_failed: failed })
}

/// Projected L-BFGS on a box, one iteration at a time: the quasi-Newton
/// direction is restricted to free coordinates and the step backtracks
/// along the projected path under an Armijo condition.
pub struct ProjectedLbfgs<'b> {
    pub x: Vec<f64>,
    pub f: f64,
    pub g: Vec<f64>,
    bounds: &'b ParamBox,
    memory: Memory,
}

impl<'b> ProjectedLbfgs<'b> {
    pub fn new(x0: &[f64], bounds: &'b ParamBox, obj: &mut dyn Objective) -> Result<Self> {
        let x = bounds.project(x0);
        let (f, g) = obj.eval(&x)?;
        check_finite(f, &g)?;
        Ok(ProjectedLbfgs { x, f, g, bounds, memory: Memory::new(LBFGS_MEMORY) })
    }

    /// Whether coordinate `i` sits on a bound with the gradient pushing outward.
    fn pinned(&self, i: usize) -> bool {
        let (x, g) = (self.x[i], self.g[i]);
        (x <= self.bounds.lo[i] && g > 0.0) || (x >= self.bounds.hi[i] && g < 0.0)
    }

    fn projected_gradient_norm(&self) -> f64 {
        (0..self.x.len()).filter(|&i| !self.pinned(i)).fold(0.0, |m, i| m.max(self.g[i].abs()))
    }

    pub fn step(&mut self, obj: &mut dyn Objective) -> Result<StepOutcome> {
        if self.projected_gradient_norm() < GRAD_TOL {
            return Ok(StepOutcome::Converged);
        }
        let free: Vec<bool> = (0..self.x.len()).map(|i| !self.pinned(i)).collect();
        let masked = |v: &[f64]| -> Vec<f64> { v.iter().zip(&free).map(|(x, &f)| if f { *x } else { 0.0 }).collect() };
        let gf = masked(&self.g);
        let mut d: Vec<f64> = masked(&self.memory.apply(&gf)).into_iter().map(|x| -x).collect();
        if !(dot(&d, &gf) < 0.0) {
            self.memory = Memory::new(LBFGS_MEMORY);
            d = gf.iter().map(|x| -x).collect();
        }
        let mut a = if self.memory.pairs.is_empty() { (1.0 / dot(&gf, &gf).sqrt()).min(1.0) } else { 1.0 };
        for _ in 0..40 {
            let trial = self.bounds.project(&axpy(&self.x, a, &d));
            let step: Vec<f64> = trial.iter().zip(&self.x).map(|(a, b)| a - b).collect();
            let decrease = dot(&self.g, &step);
            let (f, g) = obj.eval(&trial)?;
            if f.is_finite() && g.iter().all(|x| x.is_finite()) && f <= self.f + WOLFE_C1 * decrease && decrease < 0.0 {
                let y: Vec<f64> = g.iter().zip(&self.g).map(|(a, b)| a - b).collect();
                self.memory.push(step, y);
                self.x = trial;
                self.f = f;
                self.g = g;
                return Ok(StepOutcome::Progress);
            }
            a *= 0.5;
        }
        Ok(StepOutcome::LineSearchFailed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(h: Vec<Vec<f64>>) -> impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)> {
        move |x: &[f64]| {
            let hx: Vec<f64> = h.iter().map(|r| dot(r, x)).collect();
            Ok((0.5 * dot(x, &hx), hx))
        }
    }

    fn spd5() -> Vec<Vec<f64>> {
        // B Bᵀ + I with a fixed B.
        let b = [
            [1.0, 0.2, -0.3, 0.0, 0.5],
            [0.0, 2.0, 0.1, 0.4, -0.2],
            [0.3, -0.1, 1.5, 0.0, 0.0],
            [0.0, 0.6, 0.2, 0.8, 0.1],
            [-0.4, 0.0, 0.0, 0.3, 1.2],
        ];
        (0..5)
            .map(|i| (0..5).map(|j| dot(&b[i], &b[j]) + if i == j { 1.0 } else { 0.0 }).collect())
            .collect()
    }

    pub(crate) fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Ok((f, g))
    }

    #[test]
    fn adam_first_step_is_lr_sign() {
        let mut x = vec![0.0, 1.0, -2.0];
        let g = [3.0, -1e-3, 50.0];
        let mut st = AdamState::new(3);
        adam_step(&mut x, &g, &mut st, 0.01);
        let deltas = [x[0], x[1] - 1.0, x[2] + 2.0];
        for (d, g) in deltas.iter().zip(&g) {
            assert!(d.abs() >= 0.999 * 0.01 && d.abs() <= 0.01);
            assert_eq!(d.signum(), -g.signum());
        }
    }

    #[test]
    fn adam_zero_gradient_decays_moments() {
        let mut x = vec![1.0, 2.0];
        let mut st = AdamState { m: vec![0.5, -0.5], v: vec![0.1, 0.2], t: 3 };
        let mut st2 = st.clone();
        adam_step(&mut x, &[0.0, 0.0], &mut st, 0.1);
        assert_eq!(st.m, vec![0.45, -0.45]);
        assert!((st.v[0] - 0.0999).abs() < 1e-15);
        // With nonzero moments the parameters still move; with fresh state they do not.
        let mut y = vec![1.0, 2.0];
        let mut fresh = AdamState::new(2);
        adam_step(&mut y, &[0.0, 0.0], &mut fresh, 0.1);
        assert_eq!(y, vec![1.0, 2.0]);
        let mut x2 = vec![1.0, 2.0];
        adam_step(&mut x2, &[0.0, 0.0], &mut st2, 0.1);
        assert_eq!(x2, x);
    }

    #[test]
    fn lbfgs_solves_quadratic() {
        let mut obj = quadratic(spd5());
        let r = lbfgs_refine(&mut obj, vec![1.0, -2.0, 0.5, 3.0, -1.0], 25).unwrap();
        assert!(dot(&r.x, &r.x).sqrt() < 1e-8, "{:?}", r);
    }

    #[test]
    fn lbfgs_rosenbrock() {
        let mut obj = rosenbrock;
        let r = lbfgs_refine(&mut obj, vec![-1.2, 1.0], 500).unwrap();
        assert!(r.f < 1e-10, "{:?}", r);
    }

    #[test]
    fn lbfgs_stationary_start_returns_immediately() {
        let mut calls = 0;
        let mut obj = |x: &[f64]| {
            calls += 1;
            Ok((x[0] * x[0], vec![2.0 * x[0]]))
        };
        let r = lbfgs_refine(&mut obj, vec![0.0], 10).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(calls, 1);
    }

    #[test]
    fn lbfgs_is_monotone() {
        let mut obj = rosenbrock;
        let mut opt = Lbfgs::new(vec![-1.2, 1.0], &mut obj).unwrap();
        let mut last = opt.f;
        for _ in 0..60 {
            if opt.step(&mut obj).unwrap() != StepOutcome::Progress {
                break;
            }
            assert!(opt.f <= last);
            last = opt.f;
        }
    }

    #[test]
    fn projected_lbfgs_hits_active_bound() {
        // Minimum of (x−2)² + (y+0.5)² over [−1,1]² is (1, −0.5).
        let b = ParamBox::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let mut obj = |x: &[f64]| Ok(((x[0] - 2.0).powi(2) + (x[1] + 0.5).powi(2), vec![2.0 * (x[0] - 2.0), 2.0 * (x[1] + 0.5)]));
        let mut opt = ProjectedLbfgs::new(&[0.0, 0.9], &b, &mut obj).unwrap();
        for _ in 0..30 {
            if opt.step(&mut obj).unwrap() != StepOutcome::Progress {
                break;
            }
            assert!(b.contains(&opt.x));
        }
        assert!((opt.x[0] - 1.0).abs() < 1e-12 && (opt.x[1] + 0.5).abs() < 1e-8, "{:?}", opt.x);
    }
}
