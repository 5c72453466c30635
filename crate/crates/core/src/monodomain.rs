//! IMEX time stepping of the monodomain equation
//! `χ C_m M dv/dt + A v + M I_ion = M I_app`.

use std::path::Path;

use rayon::prelude::*;

use crate::binio::{BinReader, BinWriter};
use crate::error::{Error, Result};
use crate::fem::grid::dist;
use crate::fem::{SparseSpdMatrix, StructuredGrid};
use crate::ionic::{implicit_reaction_step, IonicModel, IonicParamField};

pub trait Preconditioner: Sync {
    /// `z = P⁻¹ r`.
    fn apply(&self, r: &[f64], z: &mut [f64]);
}

/// Diagonal preconditioner.
#[derive(Debug, Clone)]
pub struct Jacobi {
    inv_diag: Vec<f64>,
}

impl Jacobi {
    pub fn new(a: &SparseSpdMatrix) -> Result<Self> {
        let inv_diag = a
            .diag()
            .into_iter()
            .map(|d| if d > 0.0 { Ok(1.0 / d) } else { Err(Error::numeric("non-positive diagonal in SPD solve")) })
            .collect::<Result<_>>()?;
        Ok(Jacobi { inv_diag })
    }
}

impl Preconditioner for Jacobi {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        for ((zi, ri), d) in z.iter_mut().zip(r).zip(&self.inv_diag) {
            *zi = ri * d;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgReport {
    pub iterations: usize,
    /// Final relative residual `‖b − Ax‖ / ‖b‖`.
    pub residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi-preconditioned CG from a zero initial guess.
pub fn cg_solve(a: &SparseSpdMatrix, b: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let pc = Jacobi::new(a)?;
    let mut x = vec![0.0; b.len()];
    cg_solve_with(a, b, &mut x, &pc, tol, max_iter)?;
    Ok(x)
}

/// Preconditioned CG starting from the contents of `x`.
pub fn cg_solve_with(
    a: &SparseSpdMatrix,
    b: &[f64],
    x: &mut [f64],
    pc: &dyn Preconditioner,
    tol: f64,
    max_iter: usize,
) -> Result<CgReport> {
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::invalid("CG tolerance must lie in (0, 1)"));
    }
    if b.len() != a.n() || x.len() != a.n() {
        return Err(Error::invalid("CG dimension mismatch"));
    }
    let bnorm = dot(b, b).sqrt();
    if !bnorm.is_finite() {
        return Err(Error::numeric("non-finite right-hand side"));
    }
    if bnorm == 0.0 {
        x.fill(0.0);
        return Ok(CgReport { iterations: 0, residual: 0.0 });
    }
    let n = b.len();
    let mut r = a.matvec(x);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut rnorm = dot(&r, &r).sqrt();
    if rnorm <= tol * bnorm {
        return Ok(CgReport { iterations: 0, residual: rnorm / bnorm });
    }
    let mut z = vec![0.0; n];
    pc.apply(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 1..=max_iter {
        a.matvec_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::numeric(format!(
                "CG breakdown (pᵀAp = {pap:.3e}) at iteration {it}, residual {:.3e}",
                rnorm / bnorm
            )));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        rnorm = dot(&r, &r).sqrt();
        if rnorm <= tol * bnorm {
            return Ok(CgReport { iterations: it, residual: rnorm / bnorm });
        }
        pc.apply(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::numeric(format!(
        "CG did not converge in {max_iter} iterations (relative residual {:.3e})",
        rnorm / bnorm
    )))
}

/// `χC_m/Δt · M + A`.
pub fn system_matrix(mass: &SparseSpdMatrix, stiffness: &SparseSpdMatrix, chi_cm: f64, dt: f64) -> Result<SparseSpdMatrix> {
    if !(dt > 0.0) || !(chi_cm > 0.0) {
        return Err(Error::invalid("dt and χC_m must be positive"));
    }
    mass.linear_combination(chi_cm / dt, stiffness, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub t: f64,
    pub v: Vec<f64>,
    /// Node-major gating values, `n_gating` per node.
    pub w: Vec<f64>,
    /// Node-major concentrations, `n_conc` per node.
    pub c: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StimulusShape {
    /// `|x − center| ≤ radius`.
    Ball,
    /// `|x_axis − center_axis| ≤ radius`: a planar front.
    Slab { axis: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StimulusProtocol {
    pub center: [f64; 3],
    pub radius: f64,
    /// Applied current density, same units as `I_ion`.
    pub amplitude: f64,
    pub onset: f64,
    pub duration: f64,
    pub shape: StimulusShape,
    /// Width of a smoothstep band around the boundary; 0 gives a sharp mask.
    pub taper: f64,
}

impl StimulusProtocol {
    pub fn ball(center: [f64; 3], radius: f64, amplitude: f64, onset: f64, duration: f64) -> Self {
        StimulusProtocol {
            center,
            radius,
            amplitude,
            onset,
            duration,
            shape: StimulusShape::Ball,
            taper: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude >= 0.0) || !(self.duration > 0.0) || !(self.radius > 0.0) || !(self.taper >= 0.0) {
            return Err(Error::invalid("stimulus needs amplitude ≥ 0, duration > 0, radius > 0 and taper ≥ 0"));
        }
        if let StimulusShape::Slab { axis } = self.shape {
            if axis > 2 {
                return Err(Error::invalid("slab axis must be 0, 1 or 2"));
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: &[f64; 3]) -> bool {
        self.weight(x) > 0.0
    }

    /// Fraction of the amplitude applied at `x`.
    pub fn weight(&self, x: &[f64; 3]) -> f64 {
        let d = match self.shape {
            StimulusShape::Ball => dist(x, &self.center),
            StimulusShape::Slab { axis } => (x[axis] - self.center[axis]).abs(),
        };
        if self.taper <= 0.0 {
            return if d <= self.radius { 1.0 } else { 0.0 };
        }
        let t = ((self.radius + 0.5 * self.taper - d) / self.taper).clamp(0.0, 1.0);
        t * t * (3.0 - 2.0 * t)
    }

    /// Whether step start time `t` lies in the active window; the half-step
    /// margin keeps the count of active steps at `round(duration/dt)`.
    pub fn active(&self, t: f64, dt: f64) -> bool {
        t >= self.onset - 0.5 * dt && t < self.onset + self.duration - 0.5 * dt
    }
}

pub const DEFAULT_CG_TOL: f64 = 1e-8;

/// Cached operators for repeated IMEX steps at a fixed `dt`.
pub struct Simulator<'a> {
    model: &'a dyn IonicModel,
    params: &'a IonicParamField,
    mass: &'a SparseSpdMatrix,
    system: SparseSpdMatrix,
    precond: Jacobi,
    chi_cm: f64,
    dt: f64,
    stimulus: Option<(StimulusProtocol, Vec<f64>)>,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
}

impl<'a> Simulator<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        grid: &StructuredGrid,
        mass: &'a SparseSpdMatrix,
        stiffness: &SparseSpdMatrix,
        chi_cm: f64,
        model: &'a dyn IonicModel,
        params: &'a IonicParamField,
        stimulus: Option<&StimulusProtocol>,
        dt: f64,
    ) -> Result<Self> {
        let n = grid.n_nodes();
        if mass.n() != n || stiffness.n() != n || params.n_nodes() != n {
            return Err(Error::invalid("operator or parameter dimensions do not match grid"));
        }
        if params.n_params() != model.param_names().len() {
            return Err(Error::invalid("parameter field does not match ionic model"));
        }
        let system = system_matrix(mass, stiffness, chi_cm, dt)?;
        let precond = Jacobi::new(&system)?;
        let stimulus = match stimulus {
            Some(s) => {
                s.validate()?;
                let mask: Vec<f64> = grid.nodes().iter().map(|x| s.weight(x)).collect();
                if !mask.iter().any(|&m| m > 0.0) {
                    return Err(Error::invalid("stimulus region contains no grid nodes"));
                }
                Some((s.clone(), mask))
            }
            None => None,
        };
        Ok(Simulator {
            model,
            params,
            mass,
            system,
            precond,
            chi_cm,
            dt,
            stimulus,
            cg_tol: DEFAULT_CG_TOL,
            cg_max_iter: 10 * n + 100,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn system(&self) -> &SparseSpdMatrix {
        &self.system
    }

    pub fn n_nodes(&self) -> usize {
        self.mass.n()
    }

    /// Resting state of every node at `t = 0`.
    pub fn initial_state(&self) -> SimState {
        let n = self.n_nodes();
        let mut state = SimState {
            t: 0.0,
            v: Vec::with_capacity(n),
            w: Vec::with_capacity(n * self.model.n_gating()),
            c: Vec::with_capacity(n * self.model.n_conc()),
        };
        for i in 0..n {
            let (v, w, c) = self.model.rest_state(self.params.node(i));
            state.v.push(v);
            state.w.extend(w);
            state.c.extend(c);
        }
        state
    }

    /// One IMEX step: implicit reaction at frozen `v^n`, then the parabolic solve.
    pub fn step(&self, state: &SimState) -> Result<SimState> {
        let n = self.n_nodes();
        let (sw, sc) = (self.model.n_gating(), self.model.n_conc());
        if state.v.len() != n || state.w.len() != n * sw || state.c.len() != n * sc {
            return Err(Error::invalid("state dimensions do not match the simulator"));
        }
        let dt = self.dt;
        let stim = self
            .stimulus
            .as_ref()
            .filter(|(s, _)| s.active(state.t, dt))
            .map(|(s, mask)| (s.amplitude, mask));
        let local: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..n)
            .into_par_iter()
            .with_min_len(256)
            .map(|i| {
                let p = self.params.node(i);
                let v = state.v[i];
                let mut w = vec![0.0; sw];
                let mut c = vec![0.0; sc];
                implicit_reaction_step(
                    self.model,
                    v,
                    &state.w[i * sw..(i + 1) * sw],
                    &state.c[i * sc..(i + 1) * sc],
                    dt,
                    p,
                    &mut w,
                    &mut c,
                )
                .map_err(|e| e.context(&format!("node {i}")))?;
                let mut dw = vec![0.0; sw];
                let mut dc = vec![0.0; sc];
                let i_ion = self.model.rhs(v, &w, &c, p, &mut dw, &mut dc);
                if !i_ion.is_finite() {
                    return Err(Error::numeric(format!("node {i}: non-finite ionic current")));
                }
                let i_app = stim.map_or(0.0, |(amp, mask)| amp * mask[i]);
                Ok((w, c, self.chi_cm / dt * v - i_ion + i_app))
            })
            .collect::<Result<_>>()?;
        let mut next = SimState {
            t: state.t + dt,
            v: state.v.clone(),
            w: Vec::with_capacity(n * sw),
            c: Vec::with_capacity(n * sc),
        };
        let mut rhs_local = Vec::with_capacity(n);
        for (w, c, r) in local {
            next.w.extend(w);
            next.c.extend(c);
            rhs_local.push(r);
        }
        let rhs = self.mass.matvec(&rhs_local);
        cg_solve_with(&self.system, &rhs, &mut next.v, &self.precond, self.cg_tol, self.cg_max_iter)?;
        if next.v.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric("non-finite potential after solve"));
        }
        Ok(next)
    }
}

/// Single IMEX step with freshly assembled system matrix.
#[allow(clippy::too_many_arguments)]
pub fn imex_step(
    state: &SimState,
    dt: f64,
    grid: &StructuredGrid,
    mass: &SparseSpdMatrix,
    stiffness: &SparseSpdMatrix,
    chi_cm: f64,
    model: &dyn IonicModel,
    params: &IonicParamField,
    stimulus: Option<&StimulusProtocol>,
) -> Result<SimState> {
    Simulator::new(grid, mass, stiffness, chi_cm, model, params, stimulus, dt)?.step(state)
}

/// Number of steps covering `[0, t_end]`; `t_end` must be a multiple of `dt`.
pub fn step_count(t_end: f64, dt: f64) -> Result<usize> {
    if !(t_end >= 0.0) || !(dt > 0.0) {
        return Err(Error::invalid("need T ≥ 0 and dt > 0"));
    }
    let n = (t_end / dt).round();
    if (n * dt - t_end).abs() > 1e-9 * t_end.max(dt) {
        return Err(Error::invalid(format!("T = {t_end} is not a multiple of dt = {dt}")));
    }
    Ok(n as usize)
}

/// Advances from rest to `t_end`, handing every `save_every`-th state
/// (including `t = 0`) to `observer`.
pub fn run_simulation<F>(sim: &Simulator, t_end: f64, save_every: usize, mut observer: F) -> Result<()>
where
    F: FnMut(&SimState) -> Result<()>,
{
    if save_every == 0 {
        return Err(Error::invalid("save_every must be at least 1"));
    }
    let steps = step_count(t_end, sim.dt())?;
    let mut state = sim.initial_state();
    observer(&state)?;
    for n in 0..steps {
        state = sim.step(&state).map_err(|e| e.context(&format!("step {n}")))?;
        // Time from the step index avoids accumulated drift.
        state.t = (n + 1) as f64 * sim.dt();
        if (n + 1) % save_every == 0 {
            observer(&state)?;
        }
    }
    Ok(())
}

/// Saved `v` snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub snapshots: Vec<Vec<f64>>,
}

impl Trajectory {
    const MAGIC: &'static [u8; 8] = b"ECGLTRAJ";

    pub fn collect(sim: &Simulator, t_end: f64, save_every: usize) -> Result<Self> {
        let mut traj = Trajectory { times: vec![], snapshots: vec![] };
        run_simulation(sim, t_end, save_every, |s| {
            traj.times.push(s.t);
            traj.snapshots.push(s.v.clone());
            Ok(())
        })?;
        Ok(traj)
    }

    pub fn n_nodes(&self) -> usize {
        self.snapshots.first().map_or(0, Vec::len)
    }

    /// First time each node crosses `threshold` upward, linearly interpolated
    /// between snapshots.
    pub fn activation_times(&self, threshold: f64) -> Vec<Option<f64>> {
        (0..self.n_nodes())
            .map(|i| {
                if self.snapshots[0][i] >= threshold {
                    return Some(self.times[0]);
                }
                self.snapshots.windows(2).zip(self.times.windows(2)).find_map(|(s, t)| {
                    let (a, b) = (s[0][i], s[1][i]);
                    (a < threshold && b >= threshold).then(|| t[0] + (threshold - a) / (b - a) * (t[1] - t[0]))
                })
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BinWriter::new(Self::MAGIC, 1);
        w.u64(self.n_nodes() as u64).u64(self.times.len() as u64).f64s(&self.times);
        for s in &self.snapshots {
            w.f64s(s);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = BinReader::open(bytes, Self::MAGIC, 1)?;
        let n = r.count(bytes.len() / 8)?;
        let m = r.count(bytes.len() / 8)?;
        if n.saturating_mul(m) > bytes.len() / 8 {
            return Err(Error::corrupt("trajectory dimensions exceed payload"));
        }
        let times = r.f64s(m)?;
        let snapshots = (0..m).map(|_| r.f64s(n)).collect::<Result<_>>()?;
        r.finish()?;
        Ok(Trajectory { times, snapshots })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::binio::write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{assemble_mass, assemble_stiffness, build_rect_grid, ConductivityField, Tensor};
    use crate::ionic::{AlievPanfilov, PassiveMembrane};
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cg_identity_single_iteration() {
        let a = SparseSpdMatrix::identity(5);
        let b = vec![1.0, -2.0, 3.0, 0.5, 7.0];
        let mut x = vec![0.0; 5];
        let rep = cg_solve_with(&a, &b, &mut x, &Jacobi::new(&a).unwrap(), 1e-12, 10).unwrap();
        assert_eq!(rep.iterations, 1);
        assert_eq!(x, b);
    }

    #[test]
    fn cg_diagonal_by_hand() {
        let a = SparseSpdMatrix::diagonal(&[1.0, 2.0, 4.0]);
        let x = cg_solve(&a, &[1.0, 2.0, 4.0], 1e-12, 10).unwrap();
        assert_eq!(x, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn cg_random_spd_against_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 50;
        let b_mat = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let dense = b_mat.transpose() * &b_mat + DMatrix::identity(n, n);
        let triplets = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| (i, j, dense[(i, j)])).collect();
        let a = SparseSpdMatrix::from_triplets(n, triplets);
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = cg_solve(&a, &b, 1e-10, 500).unwrap();
        let r: Vec<f64> = a.matvec(&x).iter().zip(&b).map(|(ax, bi)| ax - bi).collect();
        assert!(dot(&r, &r).sqrt() <= 1e-10 * dot(&b, &b).sqrt());
        let oracle = dense.cholesky().unwrap().solve(&DVector::from_vec(b.clone()));
        let err = x.iter().zip(oracle.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-7, "max error {err}");
    }

    #[test]
    fn cg_reports_exhaustion() {
        let a = SparseSpdMatrix::diagonal(&[1.0, 10.0, 100.0]);
        let err = cg_solve_with(&a, &[1.0, 1.0, 1.0], &mut [0.0; 3], &IdentityPc, 1e-14, 1).unwrap_err();
        assert!(matches!(err, Error::NumericFailure(ref m) if m.contains("residual")));
    }

    struct IdentityPc;
    impl Preconditioner for IdentityPc {
        fn apply(&self, r: &[f64], z: &mut [f64]) {
            z.copy_from_slice(r);
        }
    }

    struct Setup {
        grid: StructuredGrid,
        mass: SparseSpdMatrix,
        stiffness: SparseSpdMatrix,
    }

    fn setup(nx: usize, ny: usize, lx: f64, ly: f64, sigma: f64) -> Setup {
        let grid = build_rect_grid(nx, ny, lx, ly).unwrap();
        let mass = assemble_mass(&grid);
        let stiffness = assemble_stiffness(&grid, &ConductivityField::uniform(&grid, Tensor::scalar(2, sigma))).unwrap();
        Setup { grid, mass, stiffness }
    }

    fn passive() -> PassiveMembrane {
        PassiveMembrane { g: 0.0, v_rest: -80.0 }
    }

    #[test]
    fn constant_field_is_preserved() {
        let s = setup(8, 4, 1.0, 0.5, 1e-3);
        let model = passive();
        let params = IonicParamField::uniform(&model, s.grid.n_nodes());
        let state = SimState { t: 0.0, v: vec![-42.0; s.grid.n_nodes()], w: vec![], c: vec![] };
        let next = imex_step(&state, 0.05, &s.grid, &s.mass, &s.stiffness, 1.0, &model, &params, None).unwrap();
        assert!(next.v.iter().all(|&v| v == -42.0));
    }

    #[test]
    fn pure_source_advances_uniformly() {
        let s = setup(8, 4, 1.0, 0.5, 1e-3);
        let zero_a = s.stiffness.linear_combination(0.0, &s.stiffness, 0.0).unwrap();
        let model = passive();
        let params = IonicParamField::uniform(&model, s.grid.n_nodes());
        let stim = StimulusProtocol::ball([0.5, 0.25, 0.0], 10.0, 7.0, 0.0, 1.0);
        let (chi_cm, dt) = (2.0, 0.05);
        let state = SimState { t: 0.0, v: vec![-80.0; s.grid.n_nodes()], w: vec![], c: vec![] };
        let next = imex_step(&state, dt, &s.grid, &s.mass, &zero_a, chi_cm, &model, &params, Some(&stim)).unwrap();
        let expect = -80.0 + dt * 7.0 / chi_cm;
        assert!(next.v.iter().all(|&v| (v - expect).abs() < 1e-8 * 80.0));
    }

    #[test]
    fn rest_is_steady() {
        let s = setup(16, 4, 1.0, 0.25, 1e-3);
        let model = AlievPanfilov::default();
        let params = IonicParamField::uniform(&model, s.grid.n_nodes());
        let sim = Simulator::new(&s.grid, &s.mass, &s.stiffness, 1.0, &model, &params, None, 0.05).unwrap();
        let s0 = sim.initial_state();
        let s1 = sim.step(&s0).unwrap();
        assert!(s0.v.iter().zip(&s1.v).all(|(a, b)| (a - b).abs() < 1e-10));
        assert!(s0.w.iter().zip(&s1.w).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn empty_run_and_bad_inputs() {
        let s = setup(4, 2, 1.0, 0.5, 1e-3);
        let model = AlievPanfilov::default();
        let params = IonicParamField::uniform(&model, s.grid.n_nodes());
        let sim = Simulator::new(&s.grid, &s.mass, &s.stiffness, 1.0, &model, &params, None, 0.05).unwrap();
        let traj = Trajectory::collect(&sim, 0.0, 1).unwrap();
        assert_eq!(traj.times, vec![0.0]);
        assert_eq!(traj.snapshots[0], sim.initial_state().v);
        assert!(Trajectory::collect(&sim, 1.0, 0).is_err());
        assert!(Trajectory::collect(&sim, 1.01, 1).is_err());
        let far = StimulusProtocol::ball([0.6, 0.1, 0.0], 0.01, 1.0, 0.0, 1.0);
        assert!(Simulator::new(&s.grid, &s.mass, &s.stiffness, 1.0, &model, &params, Some(&far), 0.05).is_err());
    }

    #[test]
    fn diffusion_dissipates_heat() {
        let s = setup(16, 8, 1.0, 0.5, 5e-3);
        let model = passive();
        let params = IonicParamField::uniform(&model, s.grid.n_nodes());
        let sim = Simulator::new(&s.grid, &s.mass, &s.stiffness, 1.0, &model, &params, None, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut state = SimState {
            t: 0.0,
            v: (0..s.grid.n_nodes()).map(|_| rng.gen_range(-80.0..20.0)).collect(),
            w: vec![],
            c: vec![],
        };
        let mut heat = s.mass.quadratic_form(&state.v);
        for _ in 0..200 {
            state = sim.step(&state).unwrap();
            let h = s.mass.quadratic_form(&state.v);
            assert!(h <= heat * (1.0 + 1e-8), "{h} > {heat}");
            heat = h;
        }
    }

    #[test]
    fn system_cache_is_bitwise_reproducible() {
        let s = setup(16, 4, 1.0, 0.25, 1e-3);
        let a = system_matrix(&s.mass, &s.stiffness, 1.0, 0.05).unwrap();
        let b = system_matrix(&s.mass, &s.stiffness, 1.0, 0.05).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    fn ap_run(s: &Setup, stim: &StimulusProtocol, dt: f64, t_end: f64, save_every: usize) -> Trajectory {
        let model = AlievPanfilov::default();
        let params = IonicParamField::uniform(&model, s.grid.n_nodes());
        let sim = Simulator::new(&s.grid, &s.mass, &s.stiffness, 1.0, &model, &params, Some(stim), dt).unwrap();
        Trajectory::collect(&sim, t_end, save_every).unwrap()
    }

    #[test]
    fn runs_are_deterministic_and_symmetric() {
        let s = setup(20, 10, 1.0, 0.5, 2e-3);
        let stim = StimulusProtocol::ball([0.5, 0.25, 0.0], 0.12, 100.0, 0.0, 1.0);
        let a = ap_run(&s, &stim, 0.05, 20.0, 20);
        let b = ap_run(&s, &stim, 0.05, 20.0, 20);
        assert_eq!(a.to_bytes(), b.to_bytes());
        let (nx, ny) = (20, 10);
        for snap in &a.snapshots {
            for j in 0..=ny {
                for i in 0..=nx {
                    let v = snap[j * (nx + 1) + i];
                    let mx = snap[j * (nx + 1) + (nx - i)];
                    let my = snap[(ny - j) * (nx + 1) + i];
                    assert!((v - mx).abs() < 1e-8 && (v - my).abs() < 1e-8);
                }
            }
        }
        // The wave has spread beyond the stimulus.
        assert!(a.snapshots.last().unwrap().iter().filter(|&&v| v > -30.0).count() > 30);
    }

    #[test]
    fn trajectory_round_trip() {
        let t = Trajectory { times: vec![0.0, 1.0], snapshots: vec![vec![1.0, 2.0], vec![3.0, 4.0]] };
        assert_eq!(Trajectory::from_bytes(&t.to_bytes()).unwrap(), t);
        let mut bytes = t.to_bytes();
        bytes[20] ^= 1;
        assert!(Trajectory::from_bytes(&bytes).is_err());
    }

    #[test]
    fn activation_interpolates() {
        let t = Trajectory { times: vec![0.0, 1.0, 2.0], snapshots: vec![vec![-80.0], vec![-60.0], vec![20.0]] };
        assert_eq!(t.activation_times(-20.0), vec![Some(1.5)]);
        assert_eq!(t.activation_times(50.0), vec![None]);
    }
}
