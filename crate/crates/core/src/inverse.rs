//! Multi-start inversion of an observed signal through a surrogate.
//!
//! Everything here works in *search coordinates*: for a trained surrogate
//! these are the normalized parameters, whose box is the affine image of the
//! physical one. Results are mapped back to physical units for reporting.

use std::time::Instant;

use rayon::prelude::*;

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::ldnet::{SurrogateModel, Want};
use crate::optim::{adam_step, AdamState, ProjectedLbfgs, StepOutcome};
use crate::params::ParamBox;
use crate::pecg::PecgSignal;

/// A misfit `𝒥(p)` with its gradient.
pub trait Misfit: Sync {
    fn eval(&self, p: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn value(&self, p: &[f64]) -> Result<f64> {
        self.eval(p).map(|r| r.0)
    }
}

/// Surrogate misfit against a normalized, lead-major observation.
pub struct SurrogateMisfit<'a> {
    model: &'a SurrogateModel,
    observed: Vec<f64>,
    omega: f64,
}

impl<'a> SurrogateMisfit<'a> {
    /// Physical-unit observation; resampled onto the surrogate's time grid
    /// when the sample counts differ.
    pub fn new(model: &'a SurrogateModel, observed: &PecgSignal, omega: f64) -> Result<Self> {
        if observed.n_leads() != model.n_leads {
            return Err(Error::invalid(format!(
                "observation has {} leads, the surrogate {}",
                observed.n_leads(),
                model.n_leads
            )));
        }
        let sig = if observed.n_times() == model.n_t { observed.clone() } else { observed.resample(model.n_t)? };
        let flat = sig.values.concat().into_iter().map(|v| model.signal_norm.normalize(v)).collect();
        Self::normalized(model, flat, omega)
    }

    pub fn normalized(model: &'a SurrogateModel, observed: Vec<f64>, omega: f64) -> Result<Self> {
        if observed.len() != model.n_leads * model.n_t {
            return Err(Error::invalid("observation shape does not match the surrogate"));
        }
        if !(omega >= 0.0) {
            return Err(Error::invalid("omega must be ≥ 0"));
        }
        Ok(SurrogateMisfit { model, observed, omega })
    }

    /// Admissible box in search coordinates.
    pub fn search_box(&self) -> ParamBox {
        self.model.param_norm.normalize_box(&self.model.bounds)
    }

    pub fn to_physical(&self, q: &[f64]) -> Vec<f64> {
        self.model.param_norm.denormalize(q)
    }
}

impl Misfit for SurrogateMisfit<'_> {
    fn eval(&self, p: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.model.misfit_grad_p(p, &self.observed, self.omega)
    }

    fn value(&self, p: &[f64]) -> Result<f64> {
        let none = Want { theta: false, p: false };
        Ok(self.model.sample_loss_grad(&self.model.theta, p, &self.observed, self.omega, none)?.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGrid {
    pub subdivisions: Vec<usize>,
    /// Subdomain centers; the first axis varies slowest.
    pub points: Vec<Vec<f64>>,
}

impl CandidateGrid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Centers of the uniform `subdivisions[0] × subdivisions[1] × …` split of `domain`.
pub fn partition_candidates(domain: &ParamBox, subdivisions: &[usize]) -> Result<CandidateGrid> {
    if subdivisions.len() != domain.dim() || subdivisions.iter().any(|&n| n == 0) {
        return Err(Error::invalid(format!(
            "need {} subdivision counts ≥ 1, got {subdivisions:?}",
            domain.dim()
        )));
    }
    let axes: Vec<Vec<f64>> = subdivisions
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let (lo, hi) = (domain.lo[k], domain.hi[k]);
            (0..n).map(|i| lo + (hi - lo) * (i as f64 + 0.5) / n as f64).collect()
        })
        .collect();
    let mut points = vec![Vec::new()];
    for axis in &axes {
        points = points
            .iter()
            .flat_map(|p| {
                axis.iter().map(move |&x| {
                    let mut q = p.clone();
                    q.push(x);
                    q
                })
            })
            .collect();
    }
    Ok(CandidateGrid { subdivisions: subdivisions.to_vec(), points })
}

/// Clamp onto the box; the Euclidean projection for axis-aligned boxes.
pub fn project(p: &[f64], domain: &ParamBox) -> Vec<f64> {
    domain.project(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Screened {
    pub index: usize,
    pub p: Vec<f64>,
    pub misfit: f64,
}

/// Argmin over candidates, ties to the lowest index. Candidates whose
/// evaluation fails count as infinitely bad.
fn argmin(values: Vec<(Vec<f64>, f64)>) -> Result<Screened> {
    let mut best: Option<Screened> = None;
    for (index, (p, misfit)) in values.into_iter().enumerate() {
        if misfit.is_finite() && best.as_ref().map_or(true, |b| misfit < b.misfit) {
            best = Some(Screened { index, p, misfit });
        }
    }
    best.ok_or_else(|| Error::numeric("misfit is non-finite at every candidate"))
}

fn finite_or_inf(r: Result<f64>) -> f64 {
    r.ok().filter(|v| v.is_finite()).unwrap_or(f64::INFINITY)
}

pub fn screen(misfit: &dyn Misfit, candidates: &CandidateGrid) -> Result<Screened> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidates to screen"));
    }
    let values = candidates
        .points
        .par_iter()
        .map(|p| (p.clone(), finite_or_inf(misfit.value(p))))
        .collect();
    argmin(values)
}

/// Projected Adam from `p0`; returns the best iterate seen (start included).
fn projected_adam(misfit: &dyn Misfit, domain: &ParamBox, p0: &[f64], n: usize, lr: f64) -> Result<(Vec<f64>, f64)> {
    let mut p = domain.project(p0);
    let (mut f, mut g) = misfit.eval(&p)?;
    let mut best = (p.clone(), f);
    let mut state = AdamState::new(p.len());
    for _ in 0..n {
        adam_step(&mut p, &g, &mut state, lr);
        p = domain.project(&p);
        (f, g) = misfit.eval(&p)?;
        if !f.is_finite() {
            break;
        }
        if f < best.1 {
            best = (p.clone(), f);
        }
    }
    Ok(best)
}

/// Screening after `n_adam` projected-Adam iterations from every candidate.
pub fn screen_with_warmup(
    misfit: &dyn Misfit,
    domain: &ParamBox,
    candidates: &CandidateGrid,
    n_adam: usize,
    lr: f64,
) -> Result<Screened> {
    if n_adam == 0 {
        return screen(misfit, candidates);
    }
    if candidates.is_empty() {
        return Err(Error::invalid("no candidates to screen"));
    }
    let values = candidates
        .points
        .par_iter()
        .map(|p| projected_adam(misfit, domain, p, n_adam, lr).unwrap_or_else(|_| (p.clone(), f64::INFINITY)))
        .collect();
    argmin(values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InverseOptions {
    pub adam_epochs: Vec<usize>,
    pub adam_lrs: Vec<f64>,
    pub qn_epochs: usize,
    /// Spectral weight of the misfit.
    pub omega: f64,
}

impl Default for InverseOptions {
    fn default() -> Self {
        InverseOptions { adam_epochs: vec![20, 20], adam_lrs: vec![1e-2, 1e-3], qn_epochs: 20, omega: 0.0 }
    }
}

impl InverseOptions {
    pub fn validate(&self) -> Result<()> {
        if self.adam_epochs.len() != self.adam_lrs.len() {
            return Err(Error::invalid("one learning rate per Adam stage is required"));
        }
        if self.adam_lrs.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) || !(self.omega >= 0.0) {
            return Err(Error::invalid("learning rates must be positive and omega ≥ 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    Screen,
    Warmup { n_adam: usize, lr: f64 },
}

impl Default for Strategy {
    fn default() -> Self {
        Strategy::Warmup { n_adam: 30, lr: 1e-2 }
    }
}

impl Strategy {
    pub fn parse(name: &str, n_adam: usize, lr: f64) -> Result<Self> {
        match name {
            "screen" => Ok(Strategy::Screen),
            "warmup" => Ok(Strategy::Warmup { n_adam, lr }),
            other => Err(Error::invalid(format!("unknown strategy `{other}` (expected screen or warmup)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TracePoint {
    pub stage: String,
    pub p: Vec<f64>,
    pub misfit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InverseResult {
    /// Best iterate of the trace.
    pub p: Vec<f64>,
    pub misfit: f64,
    /// Starting point and its misfit.
    pub start: Screened,
    pub trace: Vec<TracePoint>,
    pub line_search_failed: bool,
    pub seconds: f64,
}

impl InverseResult {
    /// Trace as CSV; `names` label the coordinates.
    pub fn trace_csv(&self, names: &[&str], map: impl Fn(&[f64]) -> Vec<f64>) -> String {
        let mut s = format!("step,stage,{},misfit\n", names.join(","));
        for (i, t) in self.trace.iter().enumerate() {
            let p: Vec<String> = map(&t.p).iter().map(|x| format!("{x:e}")).collect();
            s.push_str(&format!("{i},{},{},{:e}\n", t.stage, p.join(","), t.misfit));
        }
        s
    }
}

/// Adam stages then projected L-BFGS from `start`, projecting after every
/// update and returning the best iterate.
pub fn invert(misfit: &dyn Misfit, domain: &ParamBox, start: Screened, opts: &InverseOptions) -> Result<InverseResult> {
    opts.validate()?;
    if !domain.contains(&start.p) {
        return Err(Error::invalid(format!("start {:?} is outside the admissible box", start.p)));
    }
    let clock = Instant::now();
    let mut trace: Vec<TracePoint> = Vec::new();
    let fail = |trace: &[TracePoint], e: Error| {
        let last = trace.last().map(|t| format!("{:?}", t.p)).unwrap_or_default();
        e.context(format!("inversion stopped after {} steps (last p = {last})", trace.len()))
    };
    let mut p = start.p.clone();
    let (mut f, mut g) = misfit.eval(&p).map_err(|e| fail(&trace, e))?;
    trace.push(TracePoint { stage: "start".into(), p: p.clone(), misfit: f });
    let mut state = AdamState::new(p.len());
    for (k, (&n, &lr)) in opts.adam_epochs.iter().zip(&opts.adam_lrs).enumerate() {
        let stage = format!("adam{}", k + 1);
        for _ in 0..n {
            adam_step(&mut p, &g, &mut state, lr);
            p = domain.project(&p);
            (f, g) = misfit.eval(&p).map_err(|e| fail(&trace, e))?;
            if !f.is_finite() || g.iter().any(|x| !x.is_finite()) {
                return Err(fail(&trace, Error::numeric("non-finite misfit")));
            }
            trace.push(TracePoint { stage: stage.clone(), p: p.clone(), misfit: f });
        }
    }
    let mut line_search_failed = false;
    if opts.qn_epochs > 0 {
        let mut obj = |x: &[f64]| misfit.eval(x);
        let mut qn = ProjectedLbfgs::new(&p, domain, &mut obj).map_err(|e| fail(&trace, e))?;
        for _ in 0..opts.qn_epochs {
            match qn.step(&mut obj).map_err(|e| fail(&trace, e))? {
                StepOutcome::Progress => trace.push(TracePoint { stage: "qn".into(), p: qn.x.clone(), misfit: qn.f }),
                StepOutcome::Converged => break,
                StepOutcome::LineSearchFailed => {
                    line_search_failed = true;
                    break;
                }
            }
        }
    }
    let best = trace
        .iter()
        .enumerate()
        .fold(0, |b, (i, t)| if t.misfit < trace[b].misfit { i } else { b });
    Ok(InverseResult {
        p: trace[best].p.clone(),
        misfit: trace[best].misfit,
        start,
        trace,
        line_search_failed,
        seconds: clock.elapsed().as_secs_f64(),
    })
}

/// Partition, screen (optionally with warm-up), then refine.
pub fn solve(
    misfit: &dyn Misfit,
    domain: &ParamBox,
    subdivisions: &[usize],
    strategy: Strategy,
    opts: &InverseOptions,
) -> Result<InverseResult> {
    let clock = Instant::now();
    let candidates = partition_candidates(domain, subdivisions)?;
    let start = match strategy {
        Strategy::Screen => screen(misfit, &candidates)?,
        Strategy::Warmup { n_adam, lr } => screen_with_warmup(misfit, domain, &candidates, n_adam, lr)?,
    };
    let mut r = invert(misfit, domain, start, opts)?;
    r.seconds = clock.elapsed().as_secs_f64();
    Ok(r)
}

/// Per-sample outcome in physical coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub index: usize,
    pub p_true: Vec<f64>,
    pub p_hat: Vec<f64>,
    pub misfit: f64,
    pub start_misfit: f64,
    /// Distance between true and estimated locations.
    pub loc_error: f64,
    /// `|r̂ − r| / r` when the case has a radius parameter.
    pub radius_rel_error: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct InverseBatchStats {
    pub outcomes: Vec<SampleOutcome>,
    /// `(sample index, message)` of failed inversions.
    pub failures: Vec<(usize, String)>,
    pub min_misfit: f64,
    pub mean_misfit: f64,
    pub std_misfit: f64,
    pub mean_seconds: f64,
    /// Mean of squared localization errors.
    pub loc_mse: f64,
    pub median_loc_error: f64,
    pub median_radius_rel_error: Option<f64>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

impl InverseBatchStats {
    pub fn from_outcomes(outcomes: Vec<SampleOutcome>, failures: Vec<(usize, String)>) -> Self {
        let n = outcomes.len() as f64;
        if outcomes.is_empty() {
            return InverseBatchStats { failures, ..Default::default() };
        }
        let misfits: Vec<f64> = outcomes.iter().map(|o| o.misfit).collect();
        let mean = misfits.iter().sum::<f64>() / n;
        let var = misfits.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n;
        let errors: Vec<f64> = outcomes.iter().map(|o| o.loc_error).collect();
        let radius: Vec<f64> = outcomes.iter().filter_map(|o| o.radius_rel_error).collect();
        InverseBatchStats {
            min_misfit: misfits.iter().copied().fold(f64::INFINITY, f64::min),
            mean_misfit: mean,
            std_misfit: var.sqrt(),
            mean_seconds: outcomes.iter().map(|o| o.seconds).sum::<f64>() / n,
            loc_mse: errors.iter().map(|e| e * e).sum::<f64>() / n,
            median_loc_error: median(&errors),
            median_radius_rel_error: (!radius.is_empty()).then(|| median(&radius)),
            outcomes,
            failures,
        }
    }

    /// Per-sample table as CSV.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,p_true,p_hat,misfit,start_misfit,loc_error,radius_rel_error,seconds\n");
        let fmt = |p: &[f64]| p.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
        for o in &self.outcomes {
            let r = o.radius_rel_error.map(|r| format!("{r:e}")).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{:e},{:e},{:e},{r},{:.3}\n",
                o.index,
                fmt(&o.p_true),
                fmt(&o.p_hat),
                o.misfit,
                o.start_misfit,
                o.loc_error,
                o.seconds
            ));
        }
        s
    }

    /// `key = value` summary lines (deterministic apart from timings).
    pub fn summary(&self) -> Vec<(String, String)> {
        let mut v = vec![
            ("samples".to_string(), self.outcomes.len().to_string()),
            ("failures".to_string(), self.failures.len().to_string()),
            ("min_misfit".to_string(), format!("{:e}", self.min_misfit)),
            ("mean_misfit".to_string(), format!("{:e}", self.mean_misfit)),
            ("std_misfit".to_string(), format!("{:e}", self.std_misfit)),
            ("median_loc_error".to_string(), format!("{:e}", self.median_loc_error)),
            ("loc_mse".to_string(), format!("{:e}", self.loc_mse)),
            ("mean_seconds".to_string(), format!("{:.3}", self.mean_seconds)),
        ];
        if let Some(r) = self.median_radius_rel_error {
            v.push(("median_radius_rel_error".to_string(), format!("{r:e}")));
        }
        v
    }
}

/// One observation to invert.
pub struct Problem<M> {
    pub index: usize,
    /// Physical ground truth.
    pub p_true: Vec<f64>,
    pub misfit: M,
}

/// How search coordinates map to physical quantities for error reporting.
pub struct Reporting<'a> {
    pub to_physical: &'a (dyn Fn(&[f64]) -> Vec<f64> + Sync),
    /// Physical location of a physical parameter vector.
    pub locate: &'a (dyn Fn(&[f64]) -> Result<[f64; 3]> + Sync),
    /// Index of a radius coordinate, if any.
    pub radius_axis: Option<usize>,
}

/// Solves every problem in parallel; failures are recorded and skipped.
pub fn invert_problems<M: Misfit + Send>(
    problems: &[Problem<M>],
    domain: &ParamBox,
    subdivisions: &[usize],
    strategy: Strategy,
    opts: &InverseOptions,
    report: &Reporting,
) -> Result<InverseBatchStats> {
    if problems.is_empty() {
        return Err(Error::invalid("nothing to invert"));
    }
    partition_candidates(domain, subdivisions)?;
    opts.validate()?;
    let results: Vec<Result<SampleOutcome>> = problems
        .par_iter()
        .map(|pr| {
            let r = solve(&pr.misfit, domain, subdivisions, strategy, opts)?;
            let p_hat = (report.to_physical)(&r.p);
            let (a, b) = ((report.locate)(&pr.p_true)?, (report.locate)(&p_hat)?);
            let loc_error = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let radius_rel_error = report.radius_axis.map(|k| (p_hat[k] - pr.p_true[k]).abs() / pr.p_true[k].abs());
            Ok(SampleOutcome {
                index: pr.index,
                p_true: pr.p_true.clone(),
                p_hat,
                misfit: r.misfit,
                start_misfit: r.start.misfit,
                loc_error,
                radius_rel_error,
                seconds: r.seconds,
            })
        })
        .collect();
    let (mut outcomes, mut failures) = (Vec::new(), Vec::new());
    for (pr, r) in problems.iter().zip(results) {
        match r {
            Ok(o) => outcomes.push(o),
            Err(e) => {
                log::warn!("inversion of sample {} failed: {e}", pr.index);
                failures.push((pr.index, e.to_string()));
            }
        }
    }
    Ok(InverseBatchStats::from_outcomes(outcomes, failures))
}

/// Inverts every signal of a dataset split through the surrogate.
pub fn invert_batch(
    model: &SurrogateModel,
    ds: &Dataset,
    split: Split,
    subdivisions: &[usize],
    strategy: Strategy,
    opts: &InverseOptions,
    locate: &(dyn Fn(&[f64]) -> Result<[f64; 3]> + Sync),
) -> Result<InverseBatchStats> {
    if ds.n_leads != model.n_leads || ds.n_t != model.n_t || ds.param_dim() != model.n_p {
        return Err(Error::invalid("dataset shape does not match the surrogate"));
    }
    let problems = ds
        .range(split)
        .map(|i| {
            let observed = ds.normalize_signal(&ds.signals[i]);
            Ok(Problem { index: i, p_true: ds.params[i].clone(), misfit: SurrogateMisfit::normalized(model, observed, opts.omega)? })
        })
        .collect::<Result<Vec<_>>>()?;
    let domain = model.param_norm.normalize_box(&model.bounds);
    let to_physical = |q: &[f64]| model.param_norm.denormalize(q);
    let radius_axis = (model.case == crate::forward::CaseKind::IschemiaRadius2d).then_some(2);
    let report = Reporting { to_physical: &to_physical, locate, radius_axis };
    invert_problems(&problems, &domain, subdivisions, strategy, opts, &report)
}
