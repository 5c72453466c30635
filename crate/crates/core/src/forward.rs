//! The high-fidelity forward map `p ↦ pECG(p)`: grid, operators, ionic
//! parameters and lead transfer vectors for each case kind.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fem::{
    assemble_lumped_mass, assemble_mass, assemble_stiffness, build_ellipsoid_grid, build_rect_grid, default_fibers,
    ellipsoid_map, ConductivityField, EllipsoidGeometry, SparseSpdMatrix, StructuredGrid,
};
use crate::ionic::{apply_ischemia, AlievPanfilov, IonicModel, IonicParamField, IschemiaRegion};
use crate::monodomain::{run_simulation, SimState, Simulator, StimulusProtocol};
use crate::params::ParamBox;
use crate::pecg::{LeadSet, PecgRecorder, PecgSignal, TransferMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CaseKind {
    /// `p = (x, y)`: stimulus center on the rectangle.
    Stimulus2d,
    /// `p = (θ, r, φ)`: stimulus center on the ellipsoidal shell.
    Stimulus3d,
    /// `p = (x, y)`: center of a fixed-radius ischemic disc.
    Ischemia2d,
    /// `p = (x, y, r)`: center and radius of an ischemic disc.
    IschemiaRadius2d,
}

impl CaseKind {
    pub const ALL: [CaseKind; 4] = [
        CaseKind::Stimulus2d,
        CaseKind::Stimulus3d,
        CaseKind::Ischemia2d,
        CaseKind::IschemiaRadius2d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CaseKind::Stimulus2d => "stimulus-2d",
            CaseKind::Stimulus3d => "stimulus-3d",
            CaseKind::Ischemia2d => "ischemia-2d",
            CaseKind::IschemiaRadius2d => "ischemia-radius-2d",
        }
    }

    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            CaseKind::Stimulus2d | CaseKind::Ischemia2d => &["x", "y"],
            CaseKind::Stimulus3d => &["theta", "r", "phi"],
            CaseKind::IschemiaRadius2d => &["x", "y", "radius"],
        }
    }

    pub fn param_dim(self) -> usize {
        self.param_names().len()
    }

    pub fn is_3d(self) -> bool {
        self == CaseKind::Stimulus3d
    }

    pub fn code(self) -> u8 {
        match self {
            CaseKind::Stimulus2d => 0,
            CaseKind::Stimulus3d => 1,
            CaseKind::Ischemia2d => 2,
            CaseKind::IschemiaRadius2d => 3,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.code() == c)
            .ok_or_else(|| Error::corrupt(format!("unknown case code {c}")))
    }
}

impl fmt::Display for CaseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CaseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown case kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GridSpec {
    Rect { nx: usize, ny: usize, lx: f64, ly: f64 },
    Shell { ni: usize, nj: usize, nk: usize, geometry: EllipsoidGeometry },
}

impl GridSpec {
    pub fn build(&self) -> Result<StructuredGrid> {
        match self {
            GridSpec::Rect { nx, ny, lx, ly } => build_rect_grid(*nx, *ny, *lx, *ly),
            GridSpec::Shell { ni, nj, nk, geometry } => build_ellipsoid_grid(*ni, *nj, *nk, geometry),
        }
    }
}

/// Units: length cm, time ms, potential mV, conductivity S/cm,
/// `χ` in 1/cm, `C_m` in µF/cm².
#[derive(Debug, Clone, PartialEq)]
pub struct TissueParams {
    pub chi: f64,
    pub cm: f64,
    pub sigma_il: f64,
    pub sigma_it: f64,
    pub sigma_el: f64,
    pub sigma_et: f64,
    /// Uniform multiplier on both conductivity tensors, for coarse meshes.
    pub conductivity_scale: f64,
}

impl Default for TissueParams {
    fn default() -> Self {
        TissueParams {
            chi: 1e3,
            cm: 1.0,
            sigma_il: 3e-3,
            sigma_it: 3.1525e-4,
            sigma_el: 2e-3,
            sigma_et: 1.3514e-3,
            conductivity_scale: 1.0,
        }
    }
}

impl TissueParams {
    /// `χ C_m` in mF/cm³, the coefficient of `dv/dt` in mA/cm³ per mV/ms.
    pub fn chi_cm(&self) -> f64 {
        self.chi * self.cm * 1e-3
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IschemiaSpec {
    pub excitability_scale: f64,
    pub rest_shift: f64,
    /// Disc radius for the fixed-radius case (cm).
    pub radius: f64,
    /// Sampling range of the radius for the variable-radius case (cm).
    pub radius_range: [f64; 2],
    pub smoothing: f64,
    /// Multiplier on `D_i` inside the disc; 1 leaves conduction unchanged.
    pub conductivity_scale: f64,
}

impl Default for IschemiaSpec {
    fn default() -> Self {
        IschemiaSpec {
            excitability_scale: 0.5,
            rest_shift: 0.1,
            radius: 0.5,
            radius_range: [1.80, 3.33],
            smoothing: 0.0,
            conductivity_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StimulusSpec {
    pub radius: f64,
    /// Tissue current density (mA/cm³).
    pub amplitude: f64,
    pub onset: f64,
    pub duration: f64,
    /// Smoothstep band width at the stimulus boundary.
    pub taper: f64,
    /// Site used by the ischemia cases, where `p` describes the disc.
    pub center: [f64; 3],
}

impl Default for StimulusSpec {
    fn default() -> Self {
        StimulusSpec {
            radius: 0.05,
            amplitude: 100.0,
            onset: 0.0,
            duration: 1.0,
            taper: 0.0,
            center: [0.0, 0.48, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeadSpec {
    pub count: usize,
    /// Height of the 2D lead line above the tissue plane.
    pub height: f64,
    /// `y` coordinate of the 2D lead line.
    pub offset_y: f64,
    /// Radius of the lead sphere around the shell.
    pub sphere_radius: f64,
    pub sigma_b: f64,
    pub quadrature: usize,
}

impl Default for LeadSpec {
    fn default() -> Self {
        LeadSpec {
            count: 24,
            height: 2.0,
            offset_y: 0.0,
            sphere_radius: 10.0,
            sigma_b: 1.0,
            quadrature: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardConfig {
    pub case: CaseKind,
    pub grid: GridSpec,
    pub lumped_mass: bool,
    pub tissue: TissueParams,
    pub ionic: AlievPanfilov,
    pub ischemia: IschemiaSpec,
    pub stimulus: StimulusSpec,
    pub dt: f64,
    pub t_end: f64,
    pub save_every: usize,
    pub leads: LeadSpec,
    /// Per-axis distance of sampled 2D centers from the boundary; defaults
    /// to the stimulus radius on both axes.
    pub center_margin: Option<[f64; 2]>,
}

impl ForwardConfig {
    /// Desk-scale defaults for a case kind.
    pub fn default_for(case: CaseKind) -> Self {
        let grid = if case.is_3d() {
            GridSpec::Shell { ni: 12, nj: 8, nk: 3, geometry: EllipsoidGeometry::default() }
        } else {
            GridSpec::Rect { nx: 64, ny: 12, lx: 5.12, ly: 0.96 }
        };
        let mut leads = LeadSpec::default();
        if case.is_3d() {
            leads.count = 23;
        }
        ForwardConfig {
            case,
            grid,
            lumped_mass: false,
            tissue: TissueParams::default(),
            ionic: AlievPanfilov::default(),
            ischemia: IschemiaSpec::default(),
            stimulus: StimulusSpec::default(),
            dt: 0.05,
            t_end: 400.0,
            save_every: 20,
            leads,
            center_margin: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let is_shell = matches!(self.grid, GridSpec::Shell { .. });
        if is_shell != self.case.is_3d() {
            return Err(Error::invalid(format!("case {} does not match the grid kind", self.case)));
        }
        let t = &self.tissue;
        for (name, v) in [
            ("chi", t.chi),
            ("cm", t.cm),
            ("sigma_il", t.sigma_il),
            ("sigma_it", t.sigma_it),
            ("sigma_el", t.sigma_el),
            ("sigma_et", t.sigma_et),
            ("conductivity_scale", t.conductivity_scale),
            ("dt", self.dt),
            ("stimulus radius", self.stimulus.radius),
            ("stimulus duration", self.stimulus.duration),
            ("sigma_b", self.leads.sigma_b),
            ("time_scale", self.ionic.time_scale),
            ("v_amp", self.ionic.v_amp),
            ("ischemia conductivity_scale", self.ischemia.conductivity_scale),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(self.stimulus.taper >= 0.0) {
            return Err(Error::invalid("stimulus taper must be ≥ 0"));
        }
        if !(self.t_end >= 0.0) || self.save_every == 0 {
            return Err(Error::invalid("t_end must be ≥ 0 and save_every ≥ 1"));
        }
        crate::monodomain::step_count(self.t_end, self.dt)?;
        if self.leads.count == 0 {
            return Err(Error::invalid("at least one lead is required"));
        }
        // Ischemic override values must lie within the model's bounds.
        let g = build_rect_grid(1, 1, 1.0, 1.0)?;
        let region = IschemiaRegion::with_defaults([0.0; 3], 2.0, self.ischemia.excitability_scale, self.ischemia.rest_shift);
        apply_ischemia(&IonicParamField::uniform(&self.ionic, g.n_nodes()), &region, &g)?.validate(&self.ionic)?;
        let rr = self.ischemia.radius_range;
        if !(rr[0] > 0.0 && rr[1] > rr[0]) || !(self.ischemia.radius > 0.0) {
            return Err(Error::invalid("ischemia radius and radius range must be positive and ordered"));
        }
        Ok(())
    }

    /// Admissible parameter box. 2D centers keep `center_margin` (by default
    /// one stimulus radius) from the boundary; the 3D box is the full
    /// curvilinear box.
    pub fn param_box(&self) -> Result<ParamBox> {
        match (&self.grid, self.case) {
            (GridSpec::Rect { lx, ly, .. }, case) => {
                let r = self.stimulus.radius;
                let [mx, my] = self.center_margin.unwrap_or([r, r]);
                if mx < r || my < r {
                    return Err(Error::invalid("center margin must be at least the stimulus radius"));
                }
                let mut lo = vec![mx, my];
                let mut hi = vec![lx - mx, ly - my];
                if case == CaseKind::IschemiaRadius2d {
                    lo.push(self.ischemia.radius_range[0]);
                    hi.push(self.ischemia.radius_range[1]);
                }
                ParamBox::new(lo, hi)
            }
            (GridSpec::Shell { geometry, .. }, _) => {
                let b = geometry.parameter_box();
                ParamBox::new(b.iter().map(|r| r[0]).collect(), b.iter().map(|r| r[1]).collect())
            }
        }
    }
}

/// Physical location described by a parameter vector (stimulus or disc center).
pub fn location(case: CaseKind, grid: &GridSpec, p: &[f64]) -> Result<[f64; 3]> {
    match (case, grid) {
        (CaseKind::Stimulus3d, GridSpec::Shell { geometry, .. }) => ellipsoid_map(p[1], p[0], p[2], geometry),
        (CaseKind::Stimulus3d, _) => Err(Error::invalid("3D case needs a shell grid")),
        _ => Ok([p[0], p[1], 0.0]),
    }
}

/// Per-sample inputs derived from `p`.
pub struct SampleSetup {
    pub stimulus: StimulusProtocol,
    pub params: IonicParamField,
    /// Replacement operators when the ischemic disc alters `D_i`.
    pub operators: Option<(SparseSpdMatrix, TransferMatrix)>,
}

/// Assembled operators reused by every sample of a configuration.
pub struct HighFidelity {
    pub config: ForwardConfig,
    pub grid: StructuredGrid,
    pub mass: SparseSpdMatrix,
    pub di: ConductivityField,
    pub de: ConductivityField,
    pub stiffness: SparseSpdMatrix,
    pub leads: LeadSet,
    pub transfer: TransferMatrix,
    pub model: AlievPanfilov,
    pub base_params: IonicParamField,
}

impl HighFidelity {
    pub fn build(config: &ForwardConfig) -> Result<Self> {
        config.validate()?;
        let grid = config.grid.build()?;
        let fibers = default_fibers(&grid);
        let t = &config.tissue;
        let s = t.conductivity_scale;
        let di = ConductivityField::transversely_isotropic(&grid, t.sigma_il * s, t.sigma_it * s, &fibers)?;
        let de = ConductivityField::transversely_isotropic(&grid, t.sigma_el * s, t.sigma_et * s, &fibers)?;
        let dm = ConductivityField::monodomain(&di, &de)?;
        let mass = if config.lumped_mass { assemble_lumped_mass(&grid) } else { assemble_mass(&grid) };
        let stiffness = assemble_stiffness(&grid, &dm)?;
        let leads = Self::lead_set(config, &grid)?;
        let transfer = TransferMatrix::assemble(&grid, &di, &leads, config.leads.quadrature)?;
        let mut model = config.ionic.clone();
        model.chi_cm = t.chi_cm();
        let base_params = IonicParamField::uniform(&model, grid.n_nodes());
        Ok(HighFidelity {
            config: config.clone(),
            grid,
            mass,
            di,
            de,
            stiffness,
            leads,
            transfer,
            model,
            base_params,
        })
    }

    fn lead_set(config: &ForwardConfig, grid: &StructuredGrid) -> Result<LeadSet> {
        let l = &config.leads;
        match &config.grid {
            GridSpec::Rect { lx, .. } => LeadSet::line(l.count, 0.0, *lx, l.offset_y, l.height, l.sigma_b),
            GridSpec::Shell { .. } => {
                let (lo, hi) = grid.bounding_box();
                let center = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])];
                LeadSet::sphere(l.count, center, l.sphere_radius, l.sigma_b)
            }
        }
    }

    pub fn param_box(&self) -> Result<ParamBox> {
        self.config.param_box()
    }

    pub fn sample_setup(&self, p: &[f64]) -> Result<SampleSetup> {
        let case = self.config.case;
        if p.len() != case.param_dim() || p.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("{case} expects {} finite parameters", case.param_dim())));
        }
        let st = &self.config.stimulus;
        let site = location(case, &self.config.grid, p)?;
        let center = match case {
            CaseKind::Stimulus2d | CaseKind::Stimulus3d => site,
            _ => st.center,
        };
        let mut stimulus = StimulusProtocol::ball(center, st.radius, st.amplitude, st.onset, st.duration);
        stimulus.taper = st.taper;
        let (params, operators) = match case {
            CaseKind::Ischemia2d | CaseKind::IschemiaRadius2d => {
                let isch = &self.config.ischemia;
                let radius = if case == CaseKind::IschemiaRadius2d { p[2] } else { isch.radius };
                let mut region = IschemiaRegion::with_defaults(site, radius, isch.excitability_scale, isch.rest_shift);
                region.smoothing = isch.smoothing;
                let params = apply_ischemia(&self.base_params, &region, &self.grid)?;
                let operators = if isch.conductivity_scale != 1.0 {
                    Some(self.ischemic_operators(&region, isch.conductivity_scale)?)
                } else {
                    None
                };
                (params, operators)
            }
            _ => (self.base_params.clone(), None),
        };
        Ok(SampleSetup { stimulus, params, operators })
    }

    /// Stiffness and transfer vectors with `D_i` scaled on elements whose
    /// centroid lies in the disc.
    fn ischemic_operators(&self, region: &IschemiaRegion, scale: f64) -> Result<(SparseSpdMatrix, TransferMatrix)> {
        let mut di = self.di.clone();
        for (e, t) in di.tensors.iter_mut().enumerate() {
            let c = self.grid.centroid(e);
            if crate::fem::grid::dist(&c, &region.center) <= region.radius {
                *t = t.scaled(scale);
            }
        }
        let dm = ConductivityField::monodomain(&di, &self.de)?;
        let stiffness = assemble_stiffness(&self.grid, &dm)?;
        let transfer = TransferMatrix::assemble(&self.grid, &di, &self.leads, self.config.leads.quadrature)?;
        Ok((stiffness, transfer))
    }

    /// Runs one simulation, handing every saved state and its lead readings to `observer`.
    pub fn run<F>(&self, p: &[f64], mut observer: F) -> Result<PecgSignal>
    where
        F: FnMut(&SimState) -> Result<()>,
    {
        let setup = self.sample_setup(p)?;
        let (stiffness, transfer) = match &setup.operators {
            Some((a, z)) => (a, z),
            None => (&self.stiffness, &self.transfer),
        };
        let sim = Simulator::new(
            &self.grid,
            &self.mass,
            stiffness,
            self.config.tissue.chi_cm(),
            &self.model as &dyn IonicModel,
            &setup.params,
            Some(&setup.stimulus),
            self.config.dt,
        )?;
        let mut rec = PecgRecorder::new(transfer);
        run_simulation(&sim, self.config.t_end, self.config.save_every, |s| {
            rec.push(s.t, &s.v)?;
            observer(s)
        })?;
        rec.finish()
    }

    pub fn simulate(&self, p: &[f64]) -> Result<PecgSignal> {
        self.run(p, |_| Ok(()))
    }
}
