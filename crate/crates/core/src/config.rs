//! Run configuration: one TOML file per run.
//!
//! Parsing overlays the user's file on the defaults of the selected case,
//! so every key is optional except `case`. Unknown keys and type mismatches
//! are rejected with the full dotted key in the message.
//!
//! ```toml
//! case = "stimulus-2d"     # stimulus-2d | stimulus-3d | ischemia-2d | ischemia-radius-2d
//! seed = 0                 # dataset sampling; the surrogate init uses seed + 1
//!
//! [grid]                   # rect: nx, ny, lx, ly; shell: ni, nj, nk, a, b, c, theta, phi, z_mode
//! [tissue]                 # chi (1/cm), cm (µF/cm²), sigma_{il,it,el,et} (S/cm), conductivity_scale
//! [ionic]                  # Aliev–Panfilov: time_scale (ms), v_rest, v_amp (mV), k, a, eps0, mu1, mu2
//! [ischemia]               # excitability_scale, rest_shift, radius, radius_range, conductivity_scale
//! [stimulus]               # radius, amplitude (mA/cm³), onset, duration (ms), taper, center
//! [leads]                  # count, height, offset_y, sphere_radius, sigma_b, quadrature
//! [simulation]             # dt, t_end (ms), save_every, lumped_mass, center_margin ([] = stimulus radius)
//! [dataset]                # n_train, n_val, n_test, n_t
//! [surrogate]              # n_s, dyn_hidden, rec_hidden, latent_dt (0 = 1/(n_t − 1))
//! [training]               # adam_epochs, adam_lrs, qn_epochs, alpha, omega
//! [inverse]                # subdivisions, strategy, warmup_epochs, warmup_lr, adam_epochs, adam_lrs, qn_epochs, omega
//! ```
//!
//! `RunConfig::default_for(case)` lists every default; `ecgli config --case <kind>`
//! prints them.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::dataset::DatasetSpec;
use crate::error::{Error, Result};
use crate::fem::{EllipsoidGeometry, ZMode};
use crate::forward::{CaseKind, ForwardConfig, GridSpec, IschemiaSpec, LeadSpec, StimulusSpec, TissueParams};
use crate::inverse::{InverseOptions, Strategy};
use crate::ionic::AlievPanfilov;
use crate::ldnet::{Architecture, TrainSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub case: String,
    pub seed: u64,
    pub grid: GridConfig,
    pub tissue: TissueConfig,
    pub ionic: IonicConfig,
    pub ischemia: IschemiaConfig,
    pub stimulus: StimulusConfig,
    pub leads: LeadsConfig,
    pub simulation: SimulationConfig,
    pub dataset: DatasetConfig,
    pub surrogate: SurrogateConfig,
    pub training: TrainingConfig,
    pub inverse: InverseConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridConfig {
    Rect {
        nx: usize,
        ny: usize,
        lx: f64,
        ly: f64,
    },
    Shell {
        ni: usize,
        nj: usize,
        nk: usize,
        a: [f64; 2],
        b: [f64; 2],
        c: [f64; 2],
        theta: [f64; 2],
        phi: [f64; 2],
        /// "standard" or "literal".
        z_mode: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TissueConfig {
    pub chi: f64,
    pub cm: f64,
    pub sigma_il: f64,
    pub sigma_it: f64,
    pub sigma_el: f64,
    pub sigma_et: f64,
    pub conductivity_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IonicConfig {
    pub time_scale: f64,
    pub v_rest: f64,
    pub v_amp: f64,
    pub k: f64,
    pub a: f64,
    pub eps0: f64,
    pub mu1: f64,
    pub mu2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IschemiaConfig {
    pub excitability_scale: f64,
    pub rest_shift: f64,
    pub radius: f64,
    pub radius_range: [f64; 2],
    pub smoothing: f64,
    pub conductivity_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StimulusConfig {
    pub radius: f64,
    pub amplitude: f64,
    pub onset: f64,
    pub duration: f64,
    pub taper: f64,
    pub center: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeadsConfig {
    pub count: usize,
    pub height: f64,
    pub offset_y: f64,
    pub sphere_radius: f64,
    pub sigma_b: f64,
    pub quadrature: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub dt: f64,
    pub t_end: f64,
    pub save_every: usize,
    pub lumped_mass: bool,
    /// Empty for the default (stimulus radius on both axes).
    pub center_margin: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_t: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateConfig {
    pub n_s: usize,
    pub dyn_hidden: Vec<usize>,
    pub rec_hidden: Vec<usize>,
    /// 0 ties the latent step to `1/(n_t − 1)`.
    pub latent_dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub adam_epochs: Vec<usize>,
    pub adam_lrs: Vec<f64>,
    pub qn_epochs: usize,
    pub alpha: f64,
    pub omega: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InverseConfig {
    pub subdivisions: Vec<usize>,
    /// "screen" or "warmup".
    pub strategy: String,
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
    pub adam_epochs: Vec<usize>,
    pub adam_lrs: Vec<f64>,
    pub qn_epochs: usize,
    pub omega: f64,
}

impl RunConfig {
    /// Every default for a case.
    pub fn default_for(case: CaseKind) -> Self {
        let f = ForwardConfig::default_for(case);
        let grid = match f.grid {
            GridSpec::Rect { nx, ny, lx, ly } => GridConfig::Rect { nx, ny, lx, ly },
            GridSpec::Shell { ni, nj, nk, geometry: g } => GridConfig::Shell {
                ni,
                nj,
                nk,
                a: g.a,
                b: g.b,
                c: g.c,
                theta: g.theta,
                phi: g.phi,
                z_mode: "standard".into(),
            },
        };
        let t = f.tissue;
        let io = f.ionic;
        let is = f.ischemia;
        let st = f.stimulus;
        let l = f.leads;
        let ds = DatasetSpec::default();
        let arch = Architecture::default();
        let sched = TrainSchedule::default();
        let inv = InverseOptions::default();
        let (warmup_epochs, warmup_lr) = match Strategy::default() {
            Strategy::Warmup { n_adam, lr } => (n_adam, lr),
            Strategy::Screen => (0, 1e-2),
        };
        RunConfig {
            case: case.name().into(),
            seed: 0,
            grid,
            tissue: TissueConfig {
                chi: t.chi,
                cm: t.cm,
                sigma_il: t.sigma_il,
                sigma_it: t.sigma_it,
                sigma_el: t.sigma_el,
                sigma_et: t.sigma_et,
                conductivity_scale: t.conductivity_scale,
            },
            ionic: IonicConfig {
                time_scale: io.time_scale,
                v_rest: io.v_rest,
                v_amp: io.v_amp,
                k: io.k,
                a: io.a,
                eps0: io.eps0,
                mu1: io.mu1,
                mu2: io.mu2,
            },
            ischemia: IschemiaConfig {
                excitability_scale: is.excitability_scale,
                rest_shift: is.rest_shift,
                radius: is.radius,
                radius_range: is.radius_range,
                smoothing: is.smoothing,
                conductivity_scale: is.conductivity_scale,
            },
            stimulus: StimulusConfig {
                radius: st.radius,
                amplitude: st.amplitude,
                onset: st.onset,
                duration: st.duration,
                taper: st.taper,
                center: st.center,
            },
            leads: LeadsConfig {
                count: l.count,
                height: l.height,
                offset_y: l.offset_y,
                sphere_radius: l.sphere_radius,
                sigma_b: l.sigma_b,
                quadrature: l.quadrature,
            },
            simulation: SimulationConfig {
                dt: f.dt,
                t_end: f.t_end,
                save_every: f.save_every,
                lumped_mass: f.lumped_mass,
                center_margin: Vec::new(),
            },
            dataset: DatasetConfig { n_train: ds.n_train, n_val: ds.n_val, n_test: ds.n_test, n_t: ds.n_t },
            surrogate: SurrogateConfig {
                n_s: arch.n_s,
                dyn_hidden: arch.dyn_hidden,
                rec_hidden: arch.rec_hidden,
                latent_dt: 0.0,
            },
            training: TrainingConfig {
                adam_epochs: sched.adam_epochs,
                adam_lrs: sched.adam_lrs,
                qn_epochs: sched.qn_epochs,
                alpha: sched.alpha,
                omega: sched.omega,
            },
            inverse: InverseConfig {
                subdivisions: if case.is_3d() { vec![4, 1, 4] } else if case.param_dim() == 3 { vec![8, 4, 2] } else { vec![8, 4] },
                strategy: "warmup".into(),
                warmup_epochs,
                warmup_lr,
                adam_epochs: inv.adam_epochs,
                adam_lrs: inv.adam_lrs,
                qn_epochs: inv.qn_epochs,
                omega: inv.omega,
            },
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let user: Table = text.parse().map_err(|e: toml::de::Error| Error::config("<file>", e.message().to_string()))?;
        let case_name = match user.get("case") {
            Some(Value::String(s)) => s.clone(),
            Some(_) => return Err(Error::config("case", "expected a string")),
            None => return Err(Error::config("case", "missing required key")),
        };
        let case: CaseKind = case_name.parse().map_err(|e: Error| Error::config("case", e.to_string()))?;
        let defaults = Value::try_from(RunConfig::default_for(case)).expect("defaults serialize");
        let Value::Table(mut merged) = defaults else { unreachable!() };
        overlay(&mut merged, user, "")?;
        let cfg: RunConfig = Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("<file>", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).context(path.display()))?;
        Self::parse(&text).map_err(|e| e.context(path.display()))
    }

    /// Canonical TOML with every default spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn case_kind(&self) -> CaseKind {
        self.case.parse().expect("validated case")
    }

    pub fn validate(&self) -> Result<()> {
        let case: CaseKind = self.case.parse().map_err(|e: Error| Error::config("case", e.to_string()))?;
        let positive = [
            ("tissue.chi", self.tissue.chi),
            ("tissue.cm", self.tissue.cm),
            ("tissue.sigma_il", self.tissue.sigma_il),
            ("tissue.sigma_it", self.tissue.sigma_it),
            ("tissue.sigma_el", self.tissue.sigma_el),
            ("tissue.sigma_et", self.tissue.sigma_et),
            ("tissue.conductivity_scale", self.tissue.conductivity_scale),
            ("ionic.time_scale", self.ionic.time_scale),
            ("ionic.v_amp", self.ionic.v_amp),
            ("ischemia.radius", self.ischemia.radius),
            ("ischemia.conductivity_scale", self.ischemia.conductivity_scale),
            ("stimulus.radius", self.stimulus.radius),
            ("stimulus.duration", self.stimulus.duration),
            ("leads.sigma_b", self.leads.sigma_b),
            ("simulation.dt", self.simulation.dt),
            ("inverse.warmup_lr", self.inverse.warmup_lr),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("expected a positive number, got {v}")));
            }
        }
        let non_negative = [
            ("simulation.t_end", self.simulation.t_end),
            ("stimulus.taper", self.stimulus.taper),
            ("stimulus.onset", self.stimulus.onset),
            ("training.alpha", self.training.alpha),
            ("training.omega", self.training.omega),
            ("inverse.omega", self.inverse.omega),
            ("surrogate.latent_dt", self.surrogate.latent_dt),
        ];
        for (key, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("expected a number ≥ 0, got {v}")));
            }
        }
        for (key, n) in [
            ("simulation.save_every", self.simulation.save_every),
            ("leads.count", self.leads.count),
            ("dataset.n_val", self.dataset.n_val),
            ("surrogate.n_s", self.surrogate.n_s),
        ] {
            if n == 0 {
                return Err(Error::config(key, "expected an integer ≥ 1"));
            }
        }
        if self.dataset.n_train < 2 {
            return Err(Error::config("dataset.n_train", "expected an integer ≥ 2"));
        }
        if self.dataset.n_t < 2 {
            return Err(Error::config("dataset.n_t", "expected an integer ≥ 2"));
        }
        if !self.simulation.center_margin.is_empty() && self.simulation.center_margin.len() != 2 {
            return Err(Error::config("simulation.center_margin", "expected [] or two numbers"));
        }
        if self.training.adam_epochs.len() != self.training.adam_lrs.len() {
            return Err(Error::config("training.adam_lrs", "expected one learning rate per Adam stage"));
        }
        if self.inverse.adam_epochs.len() != self.inverse.adam_lrs.len() {
            return Err(Error::config("inverse.adam_lrs", "expected one learning rate per Adam stage"));
        }
        for (key, lrs) in [("training.adam_lrs", &self.training.adam_lrs), ("inverse.adam_lrs", &self.inverse.adam_lrs)] {
            if lrs.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
                return Err(Error::config(key, "expected positive learning rates"));
            }
        }
        if self.inverse.subdivisions.len() != case.param_dim() || self.inverse.subdivisions.contains(&0) {
            return Err(Error::config(
                "inverse.subdivisions",
                format!("expected {} counts ≥ 1", case.param_dim()),
            ));
        }
        if self.surrogate.dyn_hidden.contains(&0) || self.surrogate.rec_hidden.contains(&0) {
            return Err(Error::config("surrogate", "layer widths must be ≥ 1"));
        }
        Strategy::parse(&self.inverse.strategy, 0, 1.0).map_err(|e| Error::config("inverse.strategy", e.to_string()))?;
        if let GridConfig::Shell { z_mode, .. } = &self.grid {
            if z_mode != "standard" && z_mode != "literal" {
                return Err(Error::config("grid.z_mode", "expected \"standard\" or \"literal\""));
            }
        }
        match (&self.grid, case.is_3d()) {
            (GridConfig::Rect { .. }, true) => return Err(Error::config("grid", "stimulus-3d needs a shell grid")),
            (GridConfig::Shell { .. }, false) => return Err(Error::config("grid", "2D cases need a rectangular grid")),
            _ => {}
        }
        // Remaining cross-field checks (ionic override bounds, step counts).
        self.forward()?.validate().map_err(|e| Error::config("<forward model>", e.to_string()))
    }

    pub fn forward(&self) -> Result<ForwardConfig> {
        let case: CaseKind = self.case.parse()?;
        let grid = match &self.grid {
            GridConfig::Rect { nx, ny, lx, ly } => GridSpec::Rect { nx: *nx, ny: *ny, lx: *lx, ly: *ly },
            GridConfig::Shell { ni, nj, nk, a, b, c, theta, phi, z_mode } => GridSpec::Shell {
                ni: *ni,
                nj: *nj,
                nk: *nk,
                geometry: EllipsoidGeometry {
                    a: *a,
                    b: *b,
                    c: *c,
                    theta: *theta,
                    phi: *phi,
                    z_mode: if z_mode == "literal" { ZMode::Literal } else { ZMode::Standard },
                },
            },
        };
        let t = &self.tissue;
        let i = &self.ionic;
        let is = &self.ischemia;
        let st = &self.stimulus;
        let l = &self.leads;
        let s = &self.simulation;
        Ok(ForwardConfig {
            case,
            grid,
            lumped_mass: s.lumped_mass,
            tissue: TissueParams {
                chi: t.chi,
                cm: t.cm,
                sigma_il: t.sigma_il,
                sigma_it: t.sigma_it,
                sigma_el: t.sigma_el,
                sigma_et: t.sigma_et,
                conductivity_scale: t.conductivity_scale,
            },
            ionic: AlievPanfilov {
                time_scale: i.time_scale,
                v_rest: i.v_rest,
                v_amp: i.v_amp,
                chi_cm: AlievPanfilov::default().chi_cm,
                k: i.k,
                a: i.a,
                eps0: i.eps0,
                mu1: i.mu1,
                mu2: i.mu2,
            },
            ischemia: IschemiaSpec {
                excitability_scale: is.excitability_scale,
                rest_shift: is.rest_shift,
                radius: is.radius,
                radius_range: is.radius_range,
                smoothing: is.smoothing,
                conductivity_scale: is.conductivity_scale,
            },
            stimulus: StimulusSpec {
                radius: st.radius,
                amplitude: st.amplitude,
                onset: st.onset,
                duration: st.duration,
                taper: st.taper,
                center: st.center,
            },
            dt: s.dt,
            t_end: s.t_end,
            save_every: s.save_every,
            leads: LeadSpec {
                count: l.count,
                height: l.height,
                offset_y: l.offset_y,
                sphere_radius: l.sphere_radius,
                sigma_b: l.sigma_b,
                quadrature: l.quadrature,
            },
            center_margin: match s.center_margin.as_slice() {
                [x, y] => Some([*x, *y]),
                _ => None,
            },
        })
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        let d = &self.dataset;
        DatasetSpec { n_train: d.n_train, n_val: d.n_val, n_test: d.n_test, n_t: d.n_t, seed: self.seed }
    }

    pub fn architecture(&self) -> Architecture {
        let s = &self.surrogate;
        Architecture {
            n_s: s.n_s,
            dyn_hidden: s.dyn_hidden.clone(),
            rec_hidden: s.rec_hidden.clone(),
            dt: (s.latent_dt > 0.0).then_some(s.latent_dt),
        }
    }

    /// Seed of the surrogate's weight initialization.
    pub fn init_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn schedule(&self) -> TrainSchedule {
        let t = &self.training;
        TrainSchedule {
            adam_epochs: t.adam_epochs.clone(),
            adam_lrs: t.adam_lrs.clone(),
            qn_epochs: t.qn_epochs,
            alpha: t.alpha,
            omega: t.omega,
        }
    }

    pub fn inverse_options(&self) -> InverseOptions {
        let i = &self.inverse;
        InverseOptions { adam_epochs: i.adam_epochs.clone(), adam_lrs: i.adam_lrs.clone(), qn_epochs: i.qn_epochs, omega: i.omega }
    }

    pub fn strategy(&self) -> Strategy {
        Strategy::parse(&self.inverse.strategy, self.inverse.warmup_epochs, self.inverse.warmup_lr).expect("validated strategy")
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "a string",
        Value::Integer(_) => "an integer",
        Value::Float(_) => "a number",
        Value::Boolean(_) => "a boolean",
        Value::Datetime(_) => "a datetime",
        Value::Array(_) => "an array",
        Value::Table(_) => "a table",
    }
}

/// Replaces default values with user values, checking names and types.
fn overlay(base: &mut Table, user: Table, prefix: &str) -> Result<()> {
    for (k, v) in user {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let Some(slot) = base.get_mut(&k) else {
            return Err(Error::config(key, "unknown key"));
        };
        *slot = match (std::mem::replace(slot, Value::Boolean(false)), v) {
            (Value::Table(mut b), Value::Table(u)) => {
                overlay(&mut b, u, &key)?;
                Value::Table(b)
            }
            (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
            (Value::Array(b), Value::Array(u)) => {
                let elem = b.first().cloned();
                let items = u
                    .into_iter()
                    .map(|x| match (&elem, x) {
                        (Some(Value::Float(_)), Value::Integer(i)) => Ok(Value::Float(i as f64)),
                        (Some(e), x) if std::mem::discriminant(e) != std::mem::discriminant(&x) => {
                            Err(Error::config(key.clone(), format!("expected array elements to be {}", type_name(e))))
                        }
                        (_, x) => Ok(x),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Value::Array(items)
            }
            (b, u) if std::mem::discriminant(&b) == std::mem::discriminant(&u) => u,
            (b, u) => {
                return Err(Error::config(key, format!("expected {}, got {}", type_name(&b), type_name(&u))));
            }
        };
    }
    Ok(())
}
