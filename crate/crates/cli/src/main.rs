use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ecgli::config::RunConfig;
use ecgli::dataset::{Dataset, Split};
use ecgli::forward::CaseKind;
use ecgli::inverse::{solve, Strategy, SurrogateMisfit};
use ecgli::ldnet::{evaluate, SurrogateModel};
use ecgli::pecg::PecgSignal;
use ecgli::pipeline::{self, RunManifest};
use ecgli::{Error, Result};

/// Pseudo-ECG simulation, latent-dynamics surrogates and inverse localization.
#[derive(Parser)]
#[command(name = "ecgli", version)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "ECGLI_JOBS")]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// One high-fidelity simulation: trajectory and pseudo-ECG.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated parameter vector (default: centre of the box).
        #[arg(long, value_delimiter = ',')]
        param: Option<Vec<f64>>,
    },
    /// Sample parameters and simulate a train/val/test dataset.
    GenDataset {
        #[arg(long)]
        case: CaseKind,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a surrogate on a dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Latent dimension (overrides the config).
        #[arg(long)]
        latent: Option<usize>,
        /// Config providing the architecture and training schedule.
        #[arg(long)]
        schedule: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recover parameters from observed signals through a surrogate.
    Invert(InvertArgs),
    /// Surrogate metrics on a dataset split, with per-sample predictions.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Overlay signal CSVs as SVG; the first is drawn dashed.
    Plot {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// gen-dataset → train → invert → eval in one output directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Recompute even when a complete manifest exists.
        #[arg(long)]
        force: bool,
    },
    /// Print the fully defaulted configuration of a case.
    Config {
        #[arg(long)]
        case: CaseKind,
    },
}

#[derive(Args)]
struct InvertArgs {
    #[arg(long)]
    model: PathBuf,
    /// Signal CSV, or a dataset file together with `--index` or `--split`.
    #[arg(long)]
    observed: PathBuf,
    #[arg(long)]
    index: Option<usize>,
    /// Invert a whole dataset split instead of one signal.
    #[arg(long, conflicts_with = "index")]
    split: Option<String>,
    #[arg(long)]
    case: CaseKind,
    /// Candidate subdivisions per axis, e.g. 8,4 or 4,1,4.
    #[arg(long, value_delimiter = ',')]
    subdiv: Option<Vec<usize>>,
    #[arg(long)]
    strategy: Option<String>,
    /// Config providing inverse options and geometry.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn prepare(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::from(e).context(out.display()))
}

fn config_or_default(path: Option<&Path>, case: CaseKind) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let c = RunConfig::load(p)?;
            if c.case_kind() != case {
                return Err(Error::Config { key: "case".into(), message: format!("config is {}, expected {case}", c.case) });
            }
            Ok(c)
        }
        None => Ok(RunConfig::default_for(case)),
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Simulate { config, out, param } => {
            let cfg = RunConfig::load(&config)?;
            prepare(&out)?;
            let mut man = RunManifest::new("simulate", &cfg);
            let p = match param {
                Some(p) => p,
                None => pipeline::default_parameter(&cfg)?,
            };
            man.result("param", format!("{p:?}"));
            man.stage(&out, "simulate", |m| {
                let (traj, sig) = pipeline::simulate(&cfg, &p)?;
                traj.save(&out.join("trajectory.bin"))?;
                sig.save_csv(&out.join("pecg.csv"))?;
                m.artifact("trajectory", "trajectory.bin");
                m.artifact("pecg", "pecg.csv");
                Ok(())
            })?;
            man.finish(&out)
        }
        Cmd::GenDataset { case, config, seed, out } => {
            let mut cfg = config_or_default(config.as_deref(), case)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            prepare(&out)?;
            let mut man = RunManifest::new("gen-dataset", &cfg);
            man.stage(&out, "gen-dataset", |m| {
                let ds = pipeline::make_dataset(&cfg)?;
                ds.save(&out.join("dataset.bin"))?;
                m.artifact("dataset", "dataset.bin");
                m.result("dataset_hash", ds.content_hash());
                for (k, v) in ds.describe() {
                    m.result(&k, v);
                }
                Ok(())
            })?;
            man.finish(&out)
        }
        Cmd::Train { dataset, latent, schedule, seed, out } => {
            let ds = Dataset::load(&dataset).map_err(|e| e.context(dataset.display()))?;
            let mut cfg = config_or_default(schedule.as_deref(), ds.case)?;
            if let Some(n) = latent {
                cfg.surrogate.n_s = n;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            prepare(&out)?;
            let mut man = RunManifest::new("train", &cfg);
            man.result("dataset_hash", ds.content_hash());
            man.stage(&out, "train", |m| {
                let (model, history) = pipeline::train_model(&cfg, &ds)?;
                model.save(&out.join("model.bin"))?;
                ecgli::binio::write_atomic(&out.join("history.csv"), history.to_csv().as_bytes())?;
                m.artifact("model", "model.bin");
                m.artifact("history", "history.csv");
                m.result("best_epoch", history.best_epoch);
                m.result("best_val_mse", format!("{:e}", history.best_val));
                if let Some(r) = &history.aborted {
                    m.result("train_aborted", r);
                }
                pipeline::metrics_results(m, "val", &evaluate(&model, &ds, Split::Val)?);
                Ok(())
            })?;
            man.finish(&out)
        }
        Cmd::Invert(a) => invert(a),
        Cmd::Eval { model, dataset, split, out } => {
            let model = SurrogateModel::load(&model)?;
            let ds = Dataset::load(&dataset)?;
            let split = Split::parse(&split)?;
            let cfg = RunConfig::default_for(ds.case);
            prepare(&out)?;
            let mut man = RunManifest::new("eval", &cfg);
            man.config_hash = ds.config_hash.clone();
            man.seed = ds.seed;
            man.stage(&out, "eval", |m| {
                pipeline::metrics_results(m, "eval", &evaluate(&model, &ds, split)?);
                for (k, i) in ds.range(split).enumerate() {
                    let (_, pred) = pipeline::reconstruction(&model, &ds, i)?;
                    let name = format!("pred_{k:03}.csv");
                    pred.save_csv(&out.join(&name))?;
                    ds.signal(i)?.save_csv(&out.join(format!("true_{k:03}.csv")))?;
                    m.artifact(&format!("pred_{k:03}"), &name);
                }
                Ok(())
            })?;
            man.finish(&out)
        }
        Cmd::Plot { inputs, out } => {
            let paths: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
            ecgli::plot::plot_signals(&paths, &out)
        }
        Cmd::Run { config, out, force } => {
            let cfg = RunConfig::load(&config)?;
            let man = pipeline::run_pipeline(&cfg, &out, force)?;
            for (k, v) in &man.results {
                println!("{k} = {v}");
            }
            Ok(())
        }
        Cmd::Config { case } => {
            print!("{}", RunConfig::default_for(case).to_toml());
            Ok(())
        }
    }
}

fn invert(a: InvertArgs) -> Result<()> {
    let model = SurrogateModel::load(&a.model)?;
    if model.case != a.case {
        return Err(Error::InvalidArgument(format!("model was trained for {}, not {}", model.case, a.case)));
    }
    let mut cfg = config_or_default(a.config.as_deref(), a.case)?;
    if let Some(s) = a.subdiv {
        cfg.inverse.subdivisions = s;
    }
    if let Some(s) = a.strategy {
        cfg.inverse.strategy = s;
    }
    cfg.validate()?;
    prepare(&a.out)?;
    let mut man = RunManifest::new("invert", &cfg);
    let is_csv = a.observed.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if let Some(split) = a.split {
        let ds = Dataset::load(&a.observed)?;
        let split = Split::parse(&split)?;
        return man.stage(&a.out, "invert", |m| {
            let stats = pipeline::invert_split(&cfg, &model, &ds, split, &cfg.inverse.subdivisions)?;
            ecgli::binio::write_atomic(&a.out.join("inverse.csv"), stats.to_csv().as_bytes())?;
            m.artifact("inverse", "inverse.csv");
            for (k, v) in stats.summary() {
                m.result(&k, v);
            }
            Ok(())
        })
        .and_then(|_| man.finish(&a.out));
    }
    let (observed, truth) = if is_csv {
        (PecgSignal::load_csv(&a.observed)?, None)
    } else {
        let ds = Dataset::load(&a.observed)?;
        let i = a.index.ok_or_else(|| Error::InvalidArgument("a dataset observation needs --index".into()))?;
        if i >= ds.len() {
            return Err(Error::InvalidArgument(format!("index {i} out of range ({} samples)", ds.len())));
        }
        (ds.signal(i)?, Some(ds.params[i].clone()))
    };
    let strategy: Strategy = cfg.strategy();
    man.stage(&a.out, "invert", |m| {
        let misfit = SurrogateMisfit::new(&model, &observed, cfg.inverse.omega)?;
        let r = solve(&misfit, &misfit.search_box(), &cfg.inverse.subdivisions, strategy, &cfg.inverse_options())?;
        let p_hat = misfit.to_physical(&r.p);
        let csv = r.trace_csv(a.case.param_names(), |q| misfit.to_physical(q));
        ecgli::binio::write_atomic(&a.out.join("trace.csv"), csv.as_bytes())?;
        m.artifact("trace", "trace.csv");
        m.result("p_hat", format!("{p_hat:?}"));
        m.result("misfit", format!("{:e}", r.misfit));
        m.result("screen_misfit", format!("{:e}", r.start.misfit));
        m.result("screen_index", r.start.index);
        m.result("seconds", format!("{:.3}", r.seconds));
        if let Some(p) = truth {
            let locate = pipeline::locator(&cfg)?;
            let (x, y) = (locate(&p)?, locate(&p_hat)?);
            let err = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            m.result("p_true", format!("{p:?}"));
            m.result("loc_error", format!("{err:e}"));
        }
        println!("p_hat = {p_hat:?}  misfit = {:e}", r.misfit);
        Ok(())
    })?;
    man.finish(&a.out)
}
