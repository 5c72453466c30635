//! Local reaction dynamics `I_ion`, `R`, `C` and spatial parameter fields.
//!
//! The shipped model is the two-variable Aliev–Panfilov model. Its normalized
//! potential `u ∈ [0, 1]` is mapped to millivolts by `v = v_rest + v_amp·u`,
//! and its nondimensional time to milliseconds by `time_scale`.

use crate::error::{Error, Result};
use crate::fem::StructuredGrid;

/// Reaction terms of the monodomain system.
///
/// Gating and concentration ODEs read `dw/dt = R(v, w)` and
/// `dc/dt = C(v, w, c)`; `I_ion` enters as `χ C_m dv/dt = −I_ion + …`.
pub trait IonicModel: Sync + Send {
    /// Gating dimension `s_w`.
    fn n_gating(&self) -> usize;
    /// Concentration dimension `s_c`.
    fn n_conc(&self) -> usize;
    fn param_names(&self) -> &[&'static str];
    fn baseline(&self) -> Vec<f64>;
    /// Per-parameter admissible `[lo, hi]`.
    fn param_bounds(&self) -> Vec<[f64; 2]>;
    /// Resting `(v₀, w₀, c₀)` for a node with parameters `p`.
    fn rest_state(&self, p: &[f64]) -> (f64, Vec<f64>, Vec<f64>);
    /// Returns `I_ion` and writes `dw/dt`, `dc/dt`.
    fn rhs(&self, v: f64, w: &[f64], c: &[f64], p: &[f64], dw: &mut [f64], dc: &mut [f64]) -> f64;

    /// Jacobian of `(R, C)` with respect to `(w, c)` at fixed `v`, row-major.
    /// The default uses central differences.
    fn reaction_jacobian(&self, v: f64, w: &[f64], c: &[f64], p: &[f64], jac: &mut [f64]) {
        let (sw, sc) = (self.n_gating(), self.n_conc());
        let n = sw + sc;
        let mut y: Vec<f64> = w.iter().chain(c).copied().collect();
        let mut fp = vec![0.0; n];
        let mut fm = vec![0.0; n];
        for j in 0..n {
            let h = 1e-7 * (1.0 + y[j].abs());
            let orig = y[j];
            y[j] = orig + h;
            eval_reaction(self, v, &y, p, &mut fp);
            y[j] = orig - h;
            eval_reaction(self, v, &y, p, &mut fm);
            y[j] = orig;
            for i in 0..n {
                jac[i * n + j] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
    }

    /// Documented `[lo, hi]` band for `v` (mV) along trajectories from rest.
    fn potential_bounds(&self) -> [f64; 2];
}

fn eval_reaction<M: IonicModel + ?Sized>(m: &M, v: f64, y: &[f64], p: &[f64], out: &mut [f64]) {
    let sw = m.n_gating();
    let (w, c) = y.split_at(sw);
    let (dw, dc) = out.split_at_mut(sw);
    m.rhs(v, w, c, p, dw, dc);
}

/// Outputs of [`ionic_rhs`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReactionRates {
    pub i_ion: f64,
    pub dw: Vec<f64>,
    pub dc: Vec<f64>,
}

/// Checked evaluation of the reaction terms.
pub fn ionic_rhs(model: &dyn IonicModel, v: f64, w: &[f64], c: &[f64], p: &[f64]) -> Result<ReactionRates> {
    if w.len() != model.n_gating() || c.len() != model.n_conc() || p.len() != model.param_names().len() {
        return Err(Error::invalid("state or parameter dimensions do not match the model"));
    }
    if !v.is_finite() || w.iter().chain(c).chain(p).any(|x| !x.is_finite()) {
        return Err(Error::numeric("non-finite ionic input"));
    }
    let mut dw = vec![0.0; w.len()];
    let mut dc = vec![0.0; c.len()];
    let i_ion = model.rhs(v, w, c, p, &mut dw, &mut dc);
    if !i_ion.is_finite() || dw.iter().chain(&dc).any(|x| !x.is_finite()) {
        return Err(Error::numeric("non-finite ionic output"));
    }
    Ok(ReactionRates { i_ion, dw, dc })
}

const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_ITER: usize = 50;
const NEWTON_MAX_HALVINGS: usize = 5;

/// Backward-Euler update of `(w, c)` at frozen `v`:
/// `w' − Δt R(v, w') = w`, `c' − Δt C(v, w', c') = c`, by damped Newton.
pub fn implicit_reaction_step(
    model: &dyn IonicModel,
    v: f64,
    w: &[f64],
    c: &[f64],
    dt: f64,
    p: &[f64],
    w_out: &mut [f64],
    c_out: &mut [f64],
) -> Result<()> {
    if !(dt > 0.0) {
        return Err(Error::invalid("dt must be positive"));
    }
    let sw = model.n_gating();
    let n = sw + model.n_conc();
    if n == 0 {
        return Ok(());
    }
    let y0: Vec<f64> = w.iter().chain(c).copied().collect();
    let mut y = y0.clone();
    let mut f = vec![0.0; n];
    let mut jac = vec![0.0; n * n];
    let residual = |y: &[f64], f: &mut [f64]| -> f64 {
        eval_reaction(model, v, y, p, f);
        let mut norm: f64 = 0.0;
        for i in 0..n {
            f[i] = y[i] - y0[i] - dt * f[i];
            norm = norm.max(f[i].abs());
        }
        norm
    };
    let mut res = residual(&y, &mut f);
    let mut iter = 0;
    while res >= NEWTON_TOL {
        if iter == NEWTON_MAX_ITER || !res.is_finite() {
            return Err(Error::numeric(format!(
                "reaction Newton did not converge (residual {res:.3e} after {iter} iterations)"
            )));
        }
        iter += 1;
        // G(y) = I − Δt ∂(R, C)/∂y
        model.reaction_jacobian(v, &y[..sw], &y[sw..], p, &mut jac);
        for i in 0..n {
            for j in 0..n {
                jac[i * n + j] = if i == j { 1.0 } else { 0.0 } - dt * jac[i * n + j];
            }
        }
        let step = solve_dense(&mut jac, &f, n)
            .ok_or_else(|| Error::numeric("singular reaction Jacobian"))?;
        let mut lambda = 1.0;
        let mut trial = vec![0.0; n];
        let mut ftrial = vec![0.0; n];
        let mut accepted = false;
        for _ in 0..=NEWTON_MAX_HALVINGS {
            for i in 0..n {
                trial[i] = y[i] - lambda * step[i];
            }
            let r = residual(&trial, &mut ftrial);
            if r.is_finite() && r < res {
                y.copy_from_slice(&trial);
                f.copy_from_slice(&ftrial);
                res = r;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            // Accept the most damped step anyway; the iteration cap bounds the loop.
            y.copy_from_slice(&trial);
            res = residual(&y, &mut f);
        }
    }
    w_out.copy_from_slice(&y[..sw]);
    c_out.copy_from_slice(&y[sw..]);
    Ok(())
}

/// Gaussian elimination with partial pivoting on a small dense system.
fn solve_dense(a: &mut [f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut x = b.to_vec();
    if n == 1 {
        return (a[0] != 0.0).then(|| vec![x[0] / a[0]]);
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if a[piv * n + col] == 0.0 {
            return None;
        }
        if piv != col {
            for k in 0..n {
                a.swap(piv * n + k, col * n + k);
            }
            x.swap(piv, col);
        }
        for row in (col + 1)..n {
            let factor = a[row * n + col] / a[col * n + col];
            for k in col..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
            x[row] -= factor * x[col];
        }
    }
    for col in (0..n).rev() {
        let mut s = x[col];
        for k in (col + 1)..n {
            s -= a[col * n + k] * x[k];
        }
        x[col] = s / a[col * n + col];
    }
    Some(x)
}

/// Aliev–Panfilov two-variable model in tissue current units.
#[derive(Debug, Clone, PartialEq)]
pub struct AlievPanfilov {
    /// Milliseconds per model time unit.
    pub time_scale: f64,
    pub v_rest: f64,
    pub v_amp: f64,
    /// `χ·C_m`, converting `dv/dt` (mV/ms) into a current density.
    pub chi_cm: f64,
    pub k: f64,
    pub a: f64,
    pub eps0: f64,
    pub mu1: f64,
    pub mu2: f64,
}

impl Default for AlievPanfilov {
    fn default() -> Self {
        AlievPanfilov {
            time_scale: 12.9,
            v_rest: -80.0,
            v_amp: 100.0,
            chi_cm: 1.0,
            k: 8.0,
            a: 0.15,
            eps0: 0.002,
            mu1: 0.2,
            mu2: 0.3,
        }
    }
}

pub mod ap_param {
    pub const K: usize = 0;
    pub const A: usize = 1;
    pub const EPS0: usize = 2;
    pub const MU1: usize = 3;
    pub const MU2: usize = 4;
    pub const EXCITABILITY_SCALE: usize = 5;
    pub const REST_SHIFT: usize = 6;
}

const AP_PARAM_NAMES: [&str; 7] = ["k", "a", "eps0", "mu1", "mu2", "excitability_scale", "rest_shift"];

impl AlievPanfilov {
    /// Normalized potential for a node with rest shift `s`.
    #[inline]
    pub fn normalized(&self, v: f64, shift: f64) -> f64 {
        (v - self.v_rest) / self.v_amp - shift
    }
}

impl IonicModel for AlievPanfilov {
    fn n_gating(&self) -> usize {
        1
    }

    fn n_conc(&self) -> usize {
        0
    }

    fn param_names(&self) -> &[&'static str] {
        &AP_PARAM_NAMES
    }

    fn baseline(&self) -> Vec<f64> {
        vec![self.k, self.a, self.eps0, self.mu1, self.mu2, 1.0, 0.0]
    }

    fn param_bounds(&self) -> Vec<[f64; 2]> {
        vec![
            [1e-3, 100.0],
            [1e-3, 0.5],
            [1e-6, 1.0],
            [0.0, 10.0],
            [1e-3, 10.0],
            [0.0, 1.0],
            [-0.5, 0.5],
        ]
    }

    fn rest_state(&self, p: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        (self.v_rest + self.v_amp * p[ap_param::REST_SHIFT], vec![0.0], vec![])
    }

    fn rhs(&self, v: f64, w: &[f64], _c: &[f64], p: &[f64], dw: &mut [f64], _dc: &mut [f64]) -> f64 {
        use ap_param::*;
        let u = self.normalized(v, p[REST_SHIFT]);
        let (k, a) = (p[K], p[A]);
        let w0 = w[0];
        let eps = p[EPS0] + p[MU1] * w0 / (u + p[MU2]);
        dw[0] = eps * (-w0 - k * u * (u - a - 1.0)) / self.time_scale;
        let du = p[EXCITABILITY_SCALE] * k * u * (u - a) * (u - 1.0) + u * w0;
        self.chi_cm * self.v_amp * du / self.time_scale
    }

    fn reaction_jacobian(&self, v: f64, w: &[f64], _c: &[f64], p: &[f64], jac: &mut [f64]) {
        use ap_param::*;
        let u = self.normalized(v, p[REST_SHIFT]);
        let w0 = w[0];
        let denom = u + p[MU2];
        let eps = p[EPS0] + p[MU1] * w0 / denom;
        let g = -w0 - p[K] * u * (u - p[A] - 1.0);
        jac[0] = (p[MU1] / denom * g - eps) / self.time_scale;
    }

    fn potential_bounds(&self) -> [f64; 2] {
        [self.v_rest - 0.05 * self.v_amp, self.v_rest + 1.05 * self.v_amp]
    }
}

/// Linear leak `I_ion = g (v − v_rest)` with no gating; `g = 0` disables reaction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassiveMembrane {
    pub g: f64,
    pub v_rest: f64,
}

impl IonicModel for PassiveMembrane {
    fn n_gating(&self) -> usize {
        0
    }

    fn n_conc(&self) -> usize {
        0
    }

    fn param_names(&self) -> &[&'static str] {
        &[]
    }

    fn baseline(&self) -> Vec<f64> {
        vec![]
    }

    fn param_bounds(&self) -> Vec<[f64; 2]> {
        vec![]
    }

    fn rest_state(&self, _p: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        (self.v_rest, vec![], vec![])
    }

    fn rhs(&self, v: f64, _w: &[f64], _c: &[f64], _p: &[f64], _dw: &mut [f64], _dc: &mut [f64]) -> f64 {
        self.g * (v - self.v_rest)
    }

    fn potential_bounds(&self) -> [f64; 2] {
        [f64::NEG_INFINITY, f64::INFINITY]
    }
}

/// Per-node parameter vectors, with the baseline kept for blending.
#[derive(Debug, Clone, PartialEq)]
pub struct IonicParamField {
    n_nodes: usize,
    names: Vec<&'static str>,
    baseline: Vec<f64>,
    values: Vec<f64>,
}

impl IonicParamField {
    pub fn uniform(model: &dyn IonicModel, n_nodes: usize) -> Self {
        let baseline = model.baseline();
        let values = baseline.iter().copied().cycle().take(baseline.len() * n_nodes).collect();
        IonicParamField {
            n_nodes,
            names: model.param_names().to_vec(),
            baseline,
            values,
        }
    }

    pub fn n_params(&self) -> usize {
        self.baseline.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn node(&self, i: usize) -> &[f64] {
        let np = self.n_params();
        &self.values[i * np..(i + 1) * np]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| *n == name)
    }

    pub fn names(&self) -> &[&'static str] {
        &self.names
    }

    /// Checks every node against the model's documented bounds.
    pub fn validate(&self, model: &dyn IonicModel) -> Result<()> {
        let bounds = model.param_bounds();
        for i in 0..self.n_nodes() {
            for (j, (&v, b)) in self.node(i).iter().zip(&bounds).enumerate() {
                if !(v >= b[0] && v <= b[1]) {
                    return Err(Error::invalid(format!(
                        "node {i}: parameter `{}` = {v} outside [{}, {}]",
                        self.names[j], b[0], b[1]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Disc (2D) or ball (3D) of modified ionic parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct IschemiaRegion {
    pub center: [f64; 3],
    pub radius: f64,
    /// Named parameter values imposed inside the region.
    pub overrides: Vec<(String, f64)>,
    /// Width of a smooth transition band; 0 gives sharp nodal membership.
    pub smoothing: f64,
}

impl IschemiaRegion {
    /// Region with the default overrides: reduced excitability, elevated rest.
    pub fn with_defaults(center: [f64; 3], radius: f64, excitability_scale: f64, rest_shift: f64) -> Self {
        IschemiaRegion {
            center,
            radius,
            overrides: vec![
                ("excitability_scale".to_string(), excitability_scale),
                ("rest_shift".to_string(), rest_shift),
            ],
            smoothing: 0.0,
        }
    }

    /// Weight in `[0, 1]` of the override at distance `d` from the center.
    pub fn weight(&self, d: f64) -> f64 {
        if self.smoothing <= 0.0 {
            return if d <= self.radius { 1.0 } else { 0.0 };
        }
        let t = ((self.radius + 0.5 * self.smoothing - d) / self.smoothing).clamp(0.0, 1.0);
        t * t * (3.0 - 2.0 * t)
    }
}

/// Overrides parameters at nodes inside the region; others keep their values.
pub fn apply_ischemia(
    field: &IonicParamField,
    region: &IschemiaRegion,
    grid: &StructuredGrid,
) -> Result<IonicParamField> {
    if !(region.radius > 0.0) || !region.radius.is_finite() {
        return Err(Error::invalid("ischemia radius must be positive"));
    }
    if !(region.smoothing >= 0.0) {
        return Err(Error::invalid("smoothing width must be non-negative"));
    }
    if field.n_nodes() != grid.n_nodes() {
        return Err(Error::invalid("parameter field does not match grid"));
    }
    let (lo, hi) = grid.bounding_box();
    for d in 0..grid.dim() {
        if region.center[d] < lo[d] || region.center[d] > hi[d] {
            return Err(Error::invalid("ischemia center outside the domain bounding box"));
        }
    }
    let overrides = region
        .overrides
        .iter()
        .map(|(name, v)| {
            field
                .index_of(name)
                .map(|i| (i, *v))
                .ok_or_else(|| Error::invalid(format!("unknown ionic parameter override `{name}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = field.clone();
    let np = field.n_params();
    for (n, x) in grid.nodes().iter().enumerate() {
        let d = crate::fem::grid::dist(x, &region.center);
        let wgt = region.weight(d);
        if wgt <= 0.0 {
            continue;
        }
        for &(i, v) in &overrides {
            let base = field.baseline[i];
            out.values[n * np + i] = if wgt >= 1.0 { v } else { base + wgt * (v - base) };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::build_rect_grid;
    use proptest::prelude::*;

    fn model() -> AlievPanfilov {
        AlievPanfilov::default()
    }

    #[test]
    fn rest_is_fixed_point() {
        let m = model();
        for shift in [0.0, 0.1, -0.05] {
            let mut p = m.baseline();
            p[ap_param::REST_SHIFT] = shift;
            let (v0, w0, c0) = m.rest_state(&p);
            let r = ionic_rhs(&m, v0, &w0, &c0, &p).unwrap();
            assert!(r.i_ion.abs() < 1e-10 && r.dw[0].abs() < 1e-10);
        }
    }

    #[test]
    fn recovery_activates_above_threshold() {
        let m = model();
        let p = m.baseline();
        let r = ionic_rhs(&m, m.v_rest + 50.0, &[0.0], &[], &p).unwrap();
        assert!(r.dw[0] > 0.0);
    }

    #[test]
    fn zero_excitability_leaves_linear_leak() {
        let m = model();
        let mut p = m.baseline();
        p[ap_param::EXCITABILITY_SCALE] = 0.0;
        let w = [0.7];
        let i = |v: f64| ionic_rhs(&m, v, &w, &[], &p).unwrap().i_ion;
        // Affine in v with zero at rest: I(v) = g (v − v_rest).
        let g = m.chi_cm * w[0] / m.time_scale;
        for v in [-80.0, -60.0, -10.0, 15.0] {
            assert!((i(v) - g * (v - m.v_rest)).abs() < 1e-12);
        }
    }

    #[test]
    fn nan_input_rejected() {
        let m = model();
        let p = m.baseline();
        assert!(matches!(ionic_rhs(&m, f64::NAN, &[0.0], &[], &p), Err(Error::NumericFailure(_))));
        assert!(ionic_rhs(&m, 0.0, &[], &[], &p).is_err());
    }

    /// `dw/dt = −k w`, exactly linear.
    struct LinearDecay(f64);

    impl IonicModel for LinearDecay {
        fn n_gating(&self) -> usize {
            1
        }
        fn n_conc(&self) -> usize {
            0
        }
        fn param_names(&self) -> &[&'static str] {
            &[]
        }
        fn baseline(&self) -> Vec<f64> {
            vec![]
        }
        fn param_bounds(&self) -> Vec<[f64; 2]> {
            vec![]
        }
        fn rest_state(&self, _: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
            (0.0, vec![0.0], vec![])
        }
        fn rhs(&self, _v: f64, w: &[f64], _c: &[f64], _p: &[f64], dw: &mut [f64], _dc: &mut [f64]) -> f64 {
            dw[0] = -self.0 * w[0];
            0.0
        }
        fn potential_bounds(&self) -> [f64; 2] {
            [-1.0, 1.0]
        }
    }

    #[test]
    fn implicit_step_linear_and_null() {
        let mut w = [0.0];
        implicit_reaction_step(&LinearDecay(3.0), 0.0, &[2.0], &[], 0.1, &[], &mut w, &mut []).unwrap();
        // Residual tolerance 1e-10 on (1 + dt k) w = w_n.
        assert!((w[0] - 2.0 / 1.3).abs() < 1e-10);
        implicit_reaction_step(&LinearDecay(0.0), 0.0, &[2.0], &[], 0.1, &[], &mut w, &mut []).unwrap();
        assert_eq!(w[0], 2.0);
        assert!(implicit_reaction_step(&LinearDecay(1.0), 0.0, &[2.0], &[], 0.0, &[], &mut w, &mut []).is_err());
    }

    #[test]
    fn implicit_step_is_first_order() {
        // Oracle: RK4 with 10⁴ substeps of the frozen-v gating ODE.
        let m = model();
        let p = m.baseline();
        let v = m.v_rest + 60.0;
        let w0 = 0.3;
        let f = |w: f64| {
            let mut dw = [0.0];
            m.rhs(v, &[w], &[], &p, &mut dw, &mut []);
            dw[0]
        };
        let oracle = |dt: f64| {
            let n = 10_000;
            let h = dt / n as f64;
            let mut w = w0;
            for _ in 0..n {
                let k1 = f(w);
                let k2 = f(w + 0.5 * h * k1);
                let k3 = f(w + 0.5 * h * k2);
                let k4 = f(w + h * k3);
                w += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
            w
        };
        let mut prev: Option<(f64, f64)> = None;
        let mut increments = Vec::new();
        for dt in [4.0, 2.0, 1.0, 0.5] {
            let mut w = [0.0];
            implicit_reaction_step(&m, v, &[w0], &[], dt, &p, &mut w, &mut []).unwrap();
            increments.push((w[0] - w0).abs());
            // Local error of one backward-Euler step scales as O(dt²); the
            // global order after T/dt steps is one lower.
            let err = (w[0] - oracle(dt)).abs();
            if let Some((pdt, perr)) = prev {
                let local_order = (perr / err).ln() / (pdt / dt).ln();
                assert!(local_order - 1.0 >= 0.9, "observed order {}", local_order - 1.0);
            }
            prev = Some((dt, err));
        }
        // Consistency: the increment itself is O(dt).
        for pair in increments.windows(2) {
            let ratio = pair[0] / pair[1];
            assert!((ratio - 2.0).abs() < 0.2, "increment ratio {ratio}");
        }
    }

    #[test]
    fn single_cell_stays_in_band() {
        // Explicit-v / implicit-w cell integration over 400 model time units.
        let m = model();
        let p = m.baseline();
        let [lo, hi] = m.potential_bounds();
        let dt = 0.05;
        let steps = (400.0 * m.time_scale / dt) as usize;
        let (mut v, mut w, _) = m.rest_state(&p);
        for n in 0..steps {
            let mut w_new = [0.0];
            implicit_reaction_step(&m, v, &w, &[], dt, &p, &mut w_new, &mut []).unwrap();
            w = w_new.to_vec();
            let i = ionic_rhs(&m, v, &w, &[], &p).unwrap().i_ion;
            let stim = if (n as f64) * dt < 1.0 { 60.0 } else { 0.0 };
            v += dt * (stim - i) / m.chi_cm;
            assert!(v >= lo && v <= hi, "v = {v} at step {n}");
        }
    }

    #[test]
    fn ischemia_membership() {
        let grid = build_rect_grid(256, 48, 5.12, 0.96).unwrap();
        let m = model();
        let field = IonicParamField::uniform(&m, grid.n_nodes());
        let region = IschemiaRegion::with_defaults([2.56, 0.48, 0.0], 0.31, 0.5, 0.1);
        let out = apply_ischemia(&field, &region, &grid).unwrap();
        let idx = ap_param::EXCITABILITY_SCALE;
        let changed = (0..grid.n_nodes()).filter(|&n| out.node(n)[idx] != 1.0).count();
        // Integer lattice oracle in units of h = 0.02: di² + dj² ≤ (0.31/0.02)² = 240.25.
        let mut brute = 0;
        for dj in -24i64..=24 {
            for di in -128i64..=128 {
                if di * di + dj * dj <= 240 {
                    brute += 1;
                }
            }
        }
        assert_eq!(changed, brute);
        assert!(brute > 700);
        out.validate(&m).unwrap();

        // Idempotent.
        assert_eq!(apply_ischemia(&out, &region, &grid).unwrap(), out);

        // Tiny radius: unchanged. Huge radius: everything changed.
        let tiny = IschemiaRegion::with_defaults([2.565, 0.485, 0.0], 1e-4, 0.5, 0.1);
        assert_eq!(apply_ischemia(&field, &tiny, &grid).unwrap(), field);
        let all = IschemiaRegion::with_defaults([2.56, 0.48, 0.0], 10.0, 0.5, 0.1);
        let out = apply_ischemia(&field, &all, &grid).unwrap();
        assert!((0..grid.n_nodes()).all(|n| out.node(n)[idx] == 0.5));
    }

    #[test]
    fn ischemia_rejects_unknown_key_and_bad_region() {
        let grid = build_rect_grid(4, 2, 1.0, 0.5).unwrap();
        let field = IonicParamField::uniform(&model(), grid.n_nodes());
        let mut region = IschemiaRegion::with_defaults([0.5, 0.25, 0.0], 0.2, 0.5, 0.1);
        region.overrides.push(("g_na".into(), 1.0));
        assert!(matches!(apply_ischemia(&field, &region, &grid), Err(Error::InvalidArgument(_))));
        let outside = IschemiaRegion::with_defaults([5.0, 0.25, 0.0], 0.2, 0.5, 0.1);
        assert!(apply_ischemia(&field, &outside, &grid).is_err());
        let zero = IschemiaRegion::with_defaults([0.5, 0.25, 0.0], 0.0, 0.5, 0.1);
        assert!(apply_ischemia(&field, &zero, &grid).is_err());
    }

    proptest! {
        #[test]
        fn ischemia_only_inside_disc(cx in 0.0f64..2.0, cy in 0.0f64..1.0, r in 0.01f64..1.5) {
            let grid = build_rect_grid(20, 10, 2.0, 1.0).unwrap();
            let field = IonicParamField::uniform(&model(), grid.n_nodes());
            let region = IschemiaRegion::with_defaults([cx, cy, 0.0], r, 0.4, 0.05);
            let out = apply_ischemia(&field, &region, &grid).unwrap();
            for (n, x) in grid.nodes().iter().enumerate() {
                let inside = ((x[0] - cx).powi(2) + (x[1] - cy).powi(2)).sqrt() <= r;
                prop_assert_eq!(out.node(n) != field.node(n), inside);
            }
        }
    }
}
