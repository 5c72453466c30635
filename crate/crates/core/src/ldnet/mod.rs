//! Latent-dynamics surrogate: a forward-Euler latent ODE driven by `NN_dyn`
//! and a per-time reconstruction network `NN_rec`.

pub mod loss;
pub mod mlp;
pub mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio::{BinReader, BinWriter};
use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::forward::CaseKind;
use crate::params::{ParamBox, ParamNorm, SignalNorm};
use crate::pecg::PecgSignal;

pub use loss::{loss_fft, loss_mse, metrics, Metrics};
pub use mlp::{Mlp, MlpTape};
pub use train::{evaluate, train, History, TrainSchedule};

const MAGIC: &[u8; 8] = b"ECGLLDNT";
const VERSION: u32 = 1;

/// Latent states larger than this are reported as divergence.
pub const LATENT_LIMIT: f64 = 1e3;

#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub n_s: usize,
    pub dyn_hidden: Vec<usize>,
    pub rec_hidden: Vec<usize>,
    /// Latent Euler step; `None` ties it to `1/(N_t − 1)`.
    pub dt: Option<f64>,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture { n_s: 8, dyn_hidden: vec![4, 8], rec_hidden: vec![17; 4], dt: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    pub case: CaseKind,
    pub n_s: usize,
    pub n_p: usize,
    pub n_leads: usize,
    pub n_t: usize,
    /// Latent Euler step.
    pub dt: f64,
    pub dyn_net: Mlp,
    pub rec_net: Mlp,
    /// `[θ_dyn, θ_rec]`.
    pub theta: Vec<f64>,
    pub bounds: ParamBox,
    pub param_norm: ParamNorm,
    pub signal_norm: SignalNorm,
    /// Physical time axis of the signals (ms).
    pub t0: f64,
    pub signal_dt: f64,
}

/// Scratch buffers for one rollout and its reverse pass.
#[derive(Default)]
struct Workspace {
    states: Vec<Vec<f64>>,
    dyn_tapes: Vec<MlpTape>,
    rec_tapes: Vec<MlpTape>,
    pred: Vec<f64>,
    gpred: Vec<f64>,
    z: Vec<f64>,
    scratch: Vec<f64>,
}

/// Which gradients a reverse pass should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Want {
    pub theta: bool,
    pub p: bool,
}

impl SurrogateModel {
    /// Fresh model with Glorot-initialized weights, sized from a dataset.
    pub fn new(arch: &Architecture, ds: &Dataset, seed: u64) -> Result<Self> {
        Self::with_meta(
            arch,
            ds.case,
            ds.n_leads,
            ds.n_t,
            ds.bounds.clone(),
            ds.param_norm.clone(),
            ds.signal_norm,
            (ds.t0, ds.dt),
            seed,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_meta(
        arch: &Architecture,
        case: CaseKind,
        n_leads: usize,
        n_t: usize,
        bounds: ParamBox,
        param_norm: ParamNorm,
        signal_norm: SignalNorm,
        time_axis: (f64, f64),
        seed: u64,
    ) -> Result<Self> {
        if arch.n_s == 0 || n_t < 2 || n_leads == 0 {
            return Err(Error::invalid("surrogate needs n_s ≥ 1, N_t ≥ 2 and at least one lead"));
        }
        let n_p = bounds.dim();
        if param_norm.dim() != n_p {
            return Err(Error::invalid("normalization and box dimensions differ"));
        }
        let dt = arch.dt.unwrap_or(1.0 / (n_t - 1) as f64);
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::invalid("latent dt must be positive"));
        }
        let mut dw = vec![arch.n_s + n_p];
        dw.extend(&arch.dyn_hidden);
        dw.push(arch.n_s);
        let mut rw = vec![arch.n_s];
        rw.extend(&arch.rec_hidden);
        rw.push(n_leads);
        let dyn_net = Mlp::new(dw)?;
        let rec_net = Mlp::new(rw)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = dyn_net.init(&mut rng);
        theta.extend(rec_net.init(&mut rng));
        Ok(SurrogateModel {
            case,
            n_s: arch.n_s,
            n_p,
            n_leads,
            n_t,
            dt,
            dyn_net,
            rec_net,
            theta,
            bounds,
            param_norm,
            signal_norm,
            t0: time_axis.0,
            signal_dt: time_axis.1,
        })
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    fn split_theta<'a>(&self, theta: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        theta.split_at(self.dyn_net.n_params())
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_params() {
            return Err(Error::invalid(format!("expected {} parameters, got {}", self.n_params(), theta.len())));
        }
        Ok(())
    }

    /// Forward pass filling `ws`: latent states and lead-major predictions.
    fn run(&self, theta: &[f64], p: &[f64], ws: &mut Workspace) -> Result<()> {
        if p.len() != self.n_p {
            return Err(Error::invalid(format!("expected {} parameters, got {}", self.n_p, p.len())));
        }
        let (td, tr) = self.split_theta(theta);
        let (n_s, n_t, nl) = (self.n_s, self.n_t, self.n_leads);
        ws.states.resize(n_t, Vec::new());
        ws.dyn_tapes.resize_with(n_t - 1, MlpTape::default);
        ws.rec_tapes.resize_with(n_t, MlpTape::default);
        ws.pred.clear();
        ws.pred.resize(nl * n_t, 0.0);
        ws.states[0].clear();
        ws.states[0].resize(n_s, 0.0);
        for n in 0..n_t {
            self.rec_net.forward_tape(tr, &ws.states[n], &mut ws.rec_tapes[n]);
            for (l, y) in ws.rec_tapes[n].output().iter().enumerate() {
                ws.pred[l * n_t + n] = *y;
            }
            if n + 1 == n_t {
                break;
            }
            ws.z.clear();
            ws.z.extend_from_slice(&ws.states[n]);
            ws.z.extend_from_slice(p);
            self.dyn_net.forward_tape(td, &ws.z, &mut ws.dyn_tapes[n]);
            let (cur, next) = ws.states.split_at_mut(n + 1);
            let f = ws.dyn_tapes[n].output();
            next[0].clear();
            next[0].extend(cur[n].iter().zip(f).map(|(s, f)| s + self.dt * f));
            if next[0].iter().any(|x| !x.is_finite() || x.abs() > LATENT_LIMIT) {
                return Err(Error::numeric(format!("latent state diverged at step {}", n + 1)));
            }
        }
        if ws.pred.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric("non-finite surrogate output"));
        }
        Ok(())
    }

    /// Reverse pass for upstream gradient `ws.gpred`; accumulates into `gtheta`
    /// and `gp` as requested.
    fn reverse(&self, theta: &[f64], ws: &mut Workspace, want: Want, gtheta: &mut [f64], gp: &mut [f64]) {
        let (td, tr) = self.split_theta(theta);
        let nd = self.dyn_net.n_params();
        let (n_s, n_t, nl) = (self.n_s, self.n_t, self.n_leads);
        let mut sink_rec = vec![0.0; if want.theta { 0 } else { self.rec_net.n_params() }];
        let mut sink_dyn = vec![0.0; if want.theta { 0 } else { nd }];
        let (gd, gr) = gtheta.split_at_mut(if want.theta { nd } else { 0 });
        let mut lambda = vec![0.0; n_s];
        let mut gy = vec![0.0; nl];
        let mut gs = vec![0.0; n_s];
        let mut gz = vec![0.0; n_s + self.n_p];
        let mut scaled = vec![0.0; n_s];
        for n in (0..n_t).rev() {
            // Contribution of the reconstruction at time n.
            for l in 0..nl {
                gy[l] = ws.gpred[l * n_t + n];
            }
            let grec: &mut [f64] = if want.theta { &mut *gr } else { &mut sink_rec };
            self.rec_net.backward(tr, &ws.rec_tapes[n], &gy, grec, &mut gs, &mut ws.scratch);
            if n + 1 < n_t {
                // s_{n+1} = s_n + dt·f(s_n, p): λ_n = λ_{n+1} + dt·J_sᵀλ_{n+1}.
                scaled.iter_mut().zip(&lambda).for_each(|(a, l)| *a = self.dt * l);
                let gdyn: &mut [f64] = if want.theta { &mut *gd } else { &mut sink_dyn };
                self.dyn_net.backward(td, &ws.dyn_tapes[n], &scaled, gdyn, &mut gz, &mut ws.scratch);
                for i in 0..n_s {
                    lambda[i] += gz[i];
                }
                if want.p {
                    for (g, z) in gp.iter_mut().zip(&gz[n_s..]) {
                        *g += z;
                    }
                }
            }
            for i in 0..n_s {
                lambda[i] += gs[i];
            }
        }
    }

    /// Latent trajectory `N_t × n_s` for a normalized parameter.
    pub fn rollout(&self, p_norm: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut ws = Workspace::default();
        self.run(&self.theta, p_norm, &mut ws)?;
        Ok(ws.states)
    }

    /// Lead-major normalized prediction.
    pub fn predict_normalized(&self, p_norm: &[f64]) -> Result<Vec<f64>> {
        let mut ws = Workspace::default();
        self.run(&self.theta, p_norm, &mut ws)?;
        Ok(ws.pred)
    }

    /// Physical-unit signal for a physical parameter.
    pub fn predict(&self, p: &[f64]) -> Result<PecgSignal> {
        let y = self.predict_normalized(&self.param_norm.normalize(p))?;
        let values = y
            .chunks(self.n_t)
            .map(|row| row.iter().map(|&v| self.signal_norm.denormalize(v)).collect())
            .collect();
        PecgSignal::new(values, self.t0, self.signal_dt)
    }

    /// Per-sample data loss with gradients; `target` is normalized, lead-major.
    pub fn sample_loss_grad(
        &self,
        theta: &[f64],
        p_norm: &[f64],
        target: &[f64],
        omega: f64,
        want: Want,
    ) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        self.check_theta(theta)?;
        if target.len() != self.n_leads * self.n_t {
            return Err(Error::invalid("target shape does not match the model"));
        }
        let mut ws = Workspace::default();
        self.run(theta, p_norm, &mut ws)?;
        let loss = loss_fft(&ws.pred, target, self.n_leads, omega)?;
        ws.gpred.resize(ws.pred.len(), 0.0);
        loss::loss_fft_grad(&ws.pred, target, self.n_leads, omega, &mut ws.gpred);
        let mut gt = vec![0.0; if want.theta { theta.len() } else { 0 }];
        let mut gp = vec![0.0; if want.p { self.n_p } else { 0 }];
        if want.theta || want.p {
            self.reverse(theta, &mut ws, want, &mut gt, &mut gp);
        }
        Ok((loss, gt, gp))
    }

    /// Mean data loss over `batch` plus `α‖θ‖²`, with its θ-gradient.
    /// Per-sample work runs in parallel; the reduction is in sample order.
    pub fn batch_loss_grad(&self, theta: &[f64], batch: &[Sample], alpha: f64, omega: f64) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let want = Want { theta: true, p: false };
        let parts = batch
            .par_iter()
            .map(|s| self.sample_loss_grad(theta, &s.p, &s.y, omega, want))
            .collect::<Result<Vec<_>>>()?;
        let inv = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; theta.len()];
        for (l, g, _) in parts {
            loss += l * inv;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += inv * b);
        }
        if alpha > 0.0 {
            loss += alpha * theta.iter().map(|t| t * t).sum::<f64>();
            grad.iter_mut().zip(theta).for_each(|(g, t)| *g += 2.0 * alpha * t);
        }
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::numeric("non-finite training loss or gradient"));
        }
        Ok((loss, grad))
    }

    /// Mean data loss over `batch` (no weight decay).
    pub fn batch_loss(&self, theta: &[f64], batch: &[Sample], omega: f64) -> Result<f64> {
        let want = Want { theta: false, p: false };
        let losses = batch
            .par_iter()
            .map(|s| self.sample_loss_grad(theta, &s.p, &s.y, omega, want).map(|r| r.0))
            .collect::<Result<Vec<_>>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
    }

    /// Misfit to a normalized observation and its gradient in normalized `p`.
    pub fn misfit_grad_p(&self, p_norm: &[f64], observed: &[f64], omega: f64) -> Result<(f64, Vec<f64>)> {
        let (l, _, gp) = self.sample_loss_grad(&self.theta, p_norm, observed, omega, Want { theta: false, p: true })?;
        Ok((l, gp))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BinWriter::new(MAGIC, VERSION);
        w.u8(self.case.code());
        for n in [self.n_s, self.n_p, self.n_leads, self.n_t] {
            w.u64(n as u64);
        }
        w.f64(self.dt);
        for net in [&self.dyn_net, &self.rec_net] {
            w.u64(net.widths.len() as u64);
            for &x in &net.widths {
                w.u64(x as u64);
            }
        }
        self.bounds.write(&mut w);
        self.param_norm.write(&mut w);
        w.f64(self.signal_norm.center).f64(self.signal_norm.halfrange).f64(self.t0).f64(self.signal_dt);
        w.u64(self.theta.len() as u64).f64s(&self.theta);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const LIMIT: usize = 1 << 20;
        let mut r = BinReader::open(bytes, MAGIC, VERSION)?;
        let case = CaseKind::from_code(r.u8()?)?;
        let n_s = r.count(LIMIT)?;
        let n_p = r.count(16)?;
        let n_leads = r.count(LIMIT)?;
        let n_t = r.count(1 << 24)?;
        let dt = r.f64()?;
        let mut nets = Vec::with_capacity(2);
        for _ in 0..2 {
            let k = r.count(64)?;
            let widths = (0..k).map(|_| r.count(LIMIT)).collect::<Result<Vec<_>>>()?;
            nets.push(Mlp::new(widths).map_err(|e| Error::corrupt(e.to_string()))?);
        }
        let rec_net = nets.pop().unwrap();
        let dyn_net = nets.pop().unwrap();
        let bounds = ParamBox::read(&mut r)?;
        let param_norm = ParamNorm::read(&mut r)?;
        let signal_norm = SignalNorm { center: r.f64()?, halfrange: r.f64()? };
        let (t0, signal_dt) = (r.f64()?, r.f64()?);
        let n_theta = r.count(1 << 28)?;
        let theta = r.f64s(n_theta)?;
        r.finish()?;
        let consistent = dyn_net.input_dim() == n_s + n_p
            && dyn_net.output_dim() == n_s
            && rec_net.input_dim() == n_s
            && rec_net.output_dim() == n_leads
            && bounds.dim() == n_p
            && param_norm.dim() == n_p
            && case.param_dim() == n_p
            && n_t >= 2
            && n_theta == dyn_net.n_params() + rec_net.n_params()
            && dt > 0.0
            && signal_norm.halfrange > 0.0;
        if !consistent {
            return Err(Error::corrupt("model header dims disagree with array lengths"));
        }
        Ok(SurrogateModel {
            case,
            n_s,
            n_p,
            n_leads,
            n_t,
            dt,
            dyn_net,
            rec_net,
            theta,
            bounds,
            param_norm,
            signal_norm,
            t0,
            signal_dt,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::binio::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::from(e).context(path.display()))?;
        Self::from_bytes(&bytes).map_err(|e| e.context(path.display()))
    }
}
