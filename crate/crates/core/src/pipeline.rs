//! Stage drivers shared by the CLI and the end-to-end pipeline, plus the
//! per-directory run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{generate_dataset, Dataset, Split};
use crate::error::{Error, Result};
use crate::forward::{location, HighFidelity};
use crate::inverse::{invert_batch, InverseBatchStats};
use crate::ldnet::{evaluate, train, History, Metrics, SurrogateModel};
use crate::monodomain::Trajectory;
use crate::pecg::PecgSignal;

pub const MANIFEST: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    /// "complete" or "failed".
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Artifact name → path relative to the output directory.
    pub artifacts: BTreeMap<String, String>,
    /// Stage → wall seconds.
    pub timings: BTreeMap<String, f64>,
    /// Scalar results (metrics, hashes, statistics) as strings.
    pub results: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            status: "running".into(),
            failed_stage: None,
            error: None,
            artifacts: BTreeMap::new(),
            timings: BTreeMap::new(),
            results: BTreeMap::new(),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.status == "complete"
    }

    pub fn path(dir: &Path) -> PathBuf {
        dir.join(MANIFEST)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::invalid(e.to_string()))?;
        crate::binio::write_atomic(&Self::path(dir), text.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(Self::path(dir))?;
        toml::from_str(&text).map_err(|e| Error::corrupt(format!("manifest: {}", e.message())))
    }

    pub fn artifact(&mut self, name: &str, file: &str) {
        self.artifacts.insert(name.to_string(), file.to_string());
    }

    pub fn result(&mut self, key: &str, value: impl ToString) {
        self.results.insert(key.to_string(), value.to_string());
    }

    /// Runs `f` as stage `name`, timing it; on error the manifest is saved
    /// as failed at that stage before the error is returned.
    pub fn stage<T>(&mut self, dir: &Path, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let clock = Instant::now();
        log::info!("stage {name}");
        match f(self) {
            Ok(v) => {
                self.timings.insert(name.to_string(), clock.elapsed().as_secs_f64());
                Ok(v)
            }
            Err(e) => {
                self.status = "failed".into();
                self.failed_stage = Some(name.to_string());
                self.error = Some(e.to_string());
                if let Err(save) = self.save(dir) {
                    log::error!("could not write the failure manifest: {save}");
                }
                Err(e.context(format!("stage {name}")))
            }
        }
    }

    pub fn finish(&mut self, dir: &Path) -> Result<()> {
        self.status = "complete".into();
        self.save(dir)
    }
}

pub fn metrics_results(m: &mut RunManifest, prefix: &str, x: &Metrics) {
    m.result(&format!("{prefix}_mse"), format!("{:e}", x.mse));
    m.result(&format!("{prefix}_nrmse"), format!("{:e}", x.normalized_rmse));
    m.result(&format!("{prefix}_pearson_dissimilarity"), format!("{:e}", x.pearson_dissimilarity));
}

/// Centre of the admissible box, the default parameter for `simulate`.
pub fn default_parameter(cfg: &RunConfig) -> Result<Vec<f64>> {
    let b = cfg.forward()?.param_box()?;
    Ok(b.lo.iter().zip(&b.hi).map(|(l, h)| 0.5 * (l + h)).collect())
}

/// One high-fidelity run: trajectory and pseudo-ECG.
pub fn simulate(cfg: &RunConfig, p: &[f64]) -> Result<(Trajectory, PecgSignal)> {
    let hf = HighFidelity::build(&cfg.forward()?)?;
    let mut traj = Trajectory { times: vec![], snapshots: vec![] };
    let sig = hf.run(p, |s| {
        traj.times.push(s.t);
        traj.snapshots.push(s.v.clone());
        Ok(())
    })?;
    Ok((traj, sig))
}

pub fn make_dataset(cfg: &RunConfig) -> Result<Dataset> {
    generate_dataset(&cfg.forward()?, &cfg.dataset_spec(), &cfg.hash())
}

pub fn train_model(cfg: &RunConfig, ds: &Dataset) -> Result<(SurrogateModel, History)> {
    let mut model = SurrogateModel::new(&cfg.architecture(), ds, cfg.init_seed())?;
    let history = train(&mut model, ds, &cfg.schedule())?;
    Ok((model, history))
}

/// Localization map of the configured geometry.
pub fn locator(cfg: &RunConfig) -> Result<impl Fn(&[f64]) -> Result<[f64; 3]> + Sync> {
    let f = cfg.forward()?;
    let (case, grid) = (f.case, f.grid);
    Ok(move |p: &[f64]| location(case, &grid, p))
}

pub fn invert_split(cfg: &RunConfig, model: &SurrogateModel, ds: &Dataset, split: Split, subdivisions: &[usize]) -> Result<InverseBatchStats> {
    let locate = locator(cfg)?;
    invert_batch(model, ds, split, subdivisions, cfg.strategy(), &cfg.inverse_options(), &locate)
}

/// Ground truth and reconstruction of one dataset sample, physical units.
pub fn reconstruction(model: &SurrogateModel, ds: &Dataset, index: usize) -> Result<(PecgSignal, PecgSignal)> {
    let truth = ds.signal(index)?;
    let pred = model.predict(&ds.params[index])?;
    Ok((truth, pred))
}

/// Full chain gen-dataset → train → invert → eval into `dir`. A complete
/// manifest for the same configuration short-circuits unless `force`.
pub fn run_pipeline(cfg: &RunConfig, dir: &Path, force: bool) -> Result<RunManifest> {
    std::fs::create_dir_all(dir)?;
    if !force && RunManifest::path(dir).exists() {
        if let Ok(m) = RunManifest::load(dir) {
            if m.is_complete() && m.command == "run" && m.config_hash == cfg.hash() {
                log::info!("{} is up to date", dir.display());
                return Ok(m);
            }
        }
    }
    let mut man = RunManifest::new("run", cfg);
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    man.artifact("config", "config.toml");
    let ds = man.stage(dir, "gen-dataset", |m| {
        let ds = make_dataset(cfg)?;
        ds.save(&dir.join("dataset.bin"))?;
        m.artifact("dataset", "dataset.bin");
        m.result("dataset_hash", ds.content_hash());
        Ok(ds)
    })?;
    let model = man.stage(dir, "train", |m| {
        let (model, history) = train_model(cfg, &ds)?;
        model.save(&dir.join("model.bin"))?;
        crate::binio::write_atomic(&dir.join("history.csv"), history.to_csv().as_bytes())?;
        m.artifact("model", "model.bin");
        m.artifact("history", "history.csv");
        m.result("best_epoch", history.best_epoch);
        m.result("best_val_mse", format!("{:e}", history.best_val));
        if let Some(reason) = &history.aborted {
            m.result("train_aborted", reason);
        }
        Ok(model)
    })?;
    man.stage(dir, "invert", |m| {
        let stats = invert_split(cfg, &model, &ds, Split::Test, &cfg.inverse.subdivisions)?;
        crate::binio::write_atomic(&dir.join("inverse.csv"), stats.to_csv().as_bytes())?;
        m.artifact("inverse", "inverse.csv");
        for (k, v) in stats.summary() {
            m.result(&format!("inverse_{k}"), v);
        }
        Ok(())
    })?;
    man.stage(dir, "eval", |m| {
        for (name, split) in [("val", Split::Val), ("test", Split::Test)] {
            metrics_results(m, name, &evaluate(&model, &ds, split)?);
        }
        let i = ds.range(Split::Test).start;
        let (truth, pred) = reconstruction(&model, &ds, i)?;
        crate::binio::write_atomic(&dir.join("test0.svg"), crate::plot::render_svg(&[truth, pred])?.as_bytes())?;
        m.artifact("plot", "test0.svg");
        Ok(())
    })?;
    man.finish(dir)?;
    Ok(man)
}
