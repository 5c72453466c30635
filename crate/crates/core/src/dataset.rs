//! Sampled `(p, pECG(p))` pairs with train/validation/test splits and the
//! normalization fitted on the training split.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio::{sha256_hex, BinReader, BinWriter};
use crate::error::{Error, Result};
use crate::forward::{CaseKind, ForwardConfig, HighFidelity};
use crate::params::{ParamBox, ParamNorm, SignalNorm};
use crate::pecg::PecgSignal;

const MAGIC: &[u8; 8] = b"ECGLDSET";
const VERSION: u32 = 1;
const MAX_SAMPLES: usize = 1 << 24;
const MAX_LEADS: usize = 1 << 16;
const MAX_TIMES: usize = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split `{name}` (expected train, val or test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Signal samples per lead fed to the surrogate.
    pub n_t: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec { n_train: 32, n_val: 8, n_test: 16, n_t: 200, seed: 0 }
    }
}

impl DatasetSpec {
    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }
}

/// I.i.d. uniform draws over the box from a ChaCha8 stream seeded by `seed`.
pub fn sample_parameters(bounds: &ParamBox, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            bounds
                .lo
                .iter()
                .zip(&bounds.hi)
                .map(|(l, h)| l + (h - l) * rng.gen::<f64>())
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub case: CaseKind,
    pub seed: u64,
    pub config_hash: String,
    pub bounds: ParamBox,
    pub n_leads: usize,
    pub n_t: usize,
    pub t0: f64,
    pub dt: f64,
    /// Sample counts of train, val and test, stored in that order.
    pub split_sizes: [usize; 3],
    /// Physical parameters.
    pub params: Vec<Vec<f64>>,
    /// Raw signals, lead-major (`lead * n_t + time`).
    pub signals: Vec<Vec<f64>>,
    pub param_norm: ParamNorm,
    pub signal_norm: SignalNorm,
}

/// A normalized training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub p: Vec<f64>,
    /// Lead-major normalized signal.
    pub y: Vec<f64>,
}

/// Runs the forward model for every sampled parameter, in parallel; results
/// are ordered by sample index whatever the worker count.
pub fn generate_dataset(cfg: &ForwardConfig, spec: &DatasetSpec, config_hash: &str) -> Result<Dataset> {
    if spec.n_train < 2 || spec.n_t < 2 {
        return Err(Error::invalid("need at least 2 training samples and n_t ≥ 2"));
    }
    let hf = HighFidelity::build(cfg)?;
    let bounds = hf.param_box()?;
    let params = sample_parameters(&bounds, spec.total(), spec.seed)?;
    let signals = params
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let sig = hf
                .simulate(p)
                .and_then(|s| s.resample(spec.n_t))
                .map_err(|e| e.context(format!("sample {i} at p = {p:?}")))?;
            log::debug!("sample {i} done");
            Ok(sig)
        })
        .collect::<Result<Vec<PecgSignal>>>()?;
    Dataset::from_signals(cfg.case, spec, config_hash, bounds, params, signals)
}

impl Dataset {
    pub fn from_signals(
        case: CaseKind,
        spec: &DatasetSpec,
        config_hash: &str,
        bounds: ParamBox,
        params: Vec<Vec<f64>>,
        signals: Vec<PecgSignal>,
    ) -> Result<Self> {
        let first = signals.first().ok_or_else(|| Error::invalid("empty dataset"))?;
        let (n_leads, n_t, t0, dt) = (first.n_leads(), first.n_times(), first.t0, first.dt);
        if signals.len() != spec.total() || params.len() != spec.total() {
            return Err(Error::invalid("sample count does not match split sizes"));
        }
        if signals.iter().any(|s| s.n_leads() != n_leads || s.n_times() != n_t) {
            return Err(Error::invalid("signals have inconsistent shapes"));
        }
        let flat: Vec<Vec<f64>> = signals.iter().map(|s| s.values.concat()).collect();
        let train = &params[..spec.n_train];
        let param_norm = ParamNorm::fit(train)?;
        let signal_norm = SignalNorm::fit(flat[..spec.n_train].iter().flatten())?;
        Ok(Dataset {
            case,
            seed: spec.seed,
            config_hash: config_hash.to_string(),
            bounds,
            n_leads,
            n_t,
            t0,
            dt,
            split_sizes: [spec.n_train, spec.n_val, spec.n_test],
            params,
            signals: flat,
            param_norm,
            signal_norm,
        })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param_dim(&self) -> usize {
        self.bounds.dim()
    }

    pub fn range(&self, split: Split) -> std::ops::Range<usize> {
        let [a, b, c] = self.split_sizes;
        match split {
            Split::Train => 0..a,
            Split::Val => a..a + b,
            Split::Test => a + b..a + b + c,
        }
    }

    pub fn signal(&self, i: usize) -> Result<PecgSignal> {
        let values = self.signals[i].chunks(self.n_t).map(<[f64]>::to_vec).collect();
        PecgSignal::new(values, self.t0, self.dt)
    }

    pub fn normalize_signal(&self, flat: &[f64]) -> Vec<f64> {
        flat.iter().map(|&x| self.signal_norm.normalize(x)).collect()
    }

    pub fn sample(&self, i: usize) -> Sample {
        Sample {
            p: self.param_norm.normalize(&self.params[i]),
            y: self.normalize_signal(&self.signals[i]),
        }
    }

    pub fn samples(&self, split: Split) -> Vec<Sample> {
        self.range(split).map(|i| self.sample(i)).collect()
    }

    /// Physical parameters of a split.
    pub fn split_params(&self, split: Split) -> Vec<Vec<f64>> {
        self.params[self.range(split)].to_vec()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BinWriter::new(MAGIC, VERSION);
        w.u8(self.case.code()).u64(self.seed).str(&self.config_hash);
        self.bounds.write(&mut w);
        self.param_norm.write(&mut w);
        w.f64(self.signal_norm.center).f64(self.signal_norm.halfrange);
        w.u64(self.n_leads as u64).u64(self.n_t as u64).f64(self.t0).f64(self.dt);
        for s in self.split_sizes {
            w.u64(s as u64);
        }
        for (p, y) in self.params.iter().zip(&self.signals) {
            w.f64s(p).f64s(y);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = BinReader::open(bytes, MAGIC, VERSION)?;
        let case = CaseKind::from_code(r.u8()?)?;
        let seed = r.u64()?;
        let config_hash = r.str()?;
        let bounds = ParamBox::read(&mut r)?;
        let param_norm = ParamNorm::read(&mut r)?;
        let signal_norm = SignalNorm { center: r.f64()?, halfrange: r.f64()? };
        if bounds.dim() != case.param_dim() || param_norm.dim() != case.param_dim() {
            return Err(Error::corrupt("parameter dimension does not match the case kind"));
        }
        if !(signal_norm.halfrange > 0.0) {
            return Err(Error::corrupt("degenerate signal normalization"));
        }
        let n_leads = r.count(MAX_LEADS)?;
        let n_t = r.count(MAX_TIMES)?;
        let (t0, dt) = (r.f64()?, r.f64()?);
        let mut split_sizes = [0usize; 3];
        for s in &mut split_sizes {
            *s = r.count(MAX_SAMPLES)?;
        }
        let n: usize = split_sizes.iter().sum();
        if n_leads == 0 || n_t < 2 || split_sizes[0] == 0 {
            return Err(Error::corrupt("empty dataset dimensions"));
        }
        let d = bounds.dim();
        let mut params = Vec::with_capacity(n);
        let mut signals = Vec::with_capacity(n);
        for _ in 0..n {
            params.push(r.f64s(d)?);
            signals.push(r.f64s(n_leads * n_t)?);
        }
        r.finish()?;
        Ok(Dataset {
            case,
            seed,
            config_hash,
            bounds,
            n_leads,
            n_t,
            t0,
            dt,
            split_sizes,
            params,
            signals,
            param_norm,
            signal_norm,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::binio::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::from(e).context(path.display()))?;
        Self::from_bytes(&bytes).map_err(|e| e.context(path.display()))
    }

    /// SHA-256 of the serialized dataset.
    pub fn content_hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    /// Key-value summary for run manifests.
    pub fn describe(&self) -> Vec<(String, String)> {
        let [a, b, c] = self.split_sizes;
        vec![
            ("case".into(), self.case.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("config_hash".into(), self.config_hash.clone()),
            ("n_train".into(), a.to_string()),
            ("n_val".into(), b.to_string()),
            ("n_test".into(), c.to_string()),
            ("n_leads".into(), self.n_leads.to_string()),
            ("n_t".into(), self.n_t.to_string()),
            ("signal_dt_ms".into(), self.dt.to_string()),
            ("param_lo".into(), join(&self.param_norm.lo)),
            ("param_hi".into(), join(&self.param_norm.hi)),
            ("signal_center".into(), self.signal_norm.center.to_string()),
            ("signal_halfrange".into(), self.signal_norm.halfrange.to_string()),
            ("dataset_hash".into(), self.content_hash()),
        ]
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::GridSpec;

    fn smoke_config() -> ForwardConfig {
        let mut c = ForwardConfig::default_for(CaseKind::Stimulus2d);
        c.grid = GridSpec::Rect { nx: 8, ny: 2, lx: 1.6, ly: 0.4 };
        c.tissue.conductivity_scale = 16.0;
        c.stimulus.radius = 0.15;
        c.stimulus.taper = 0.1;
        c.t_end = 20.0;
        c.dt = 0.1;
        c.save_every = 5;
        c.leads.count = 3;
        c
    }

    fn smoke_spec() -> DatasetSpec {
        DatasetSpec { n_train: 4, n_val: 2, n_test: 2, n_t: 16, seed: 7 }
    }

    #[test]
    fn sampling_is_seeded_and_in_box() {
        let b = ParamBox::new(vec![0.0, -1.0], vec![2.0, 1.0]).unwrap();
        let a = sample_parameters(&b, 50, 3).unwrap();
        assert_eq!(a, sample_parameters(&b, 50, 3).unwrap());
        assert_ne!(a, sample_parameters(&b, 50, 4).unwrap());
        assert!(a.iter().all(|p| b.contains(p)));
        assert!(sample_parameters(&b, 0, 3).is_err());
    }

    #[test]
    fn smoke_dataset_round_trips() {
        let ds = generate_dataset(&smoke_config(), &smoke_spec(), "abc").unwrap();
        assert_eq!(ds.len(), 8);
        assert_eq!((ds.n_leads, ds.n_t), (3, 16));
        let bytes = ds.to_bytes();
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes(), bytes);
        // Training parameters span [−1, 1] on every coordinate.
        let train = ds.samples(Split::Train);
        for k in 0..2 {
            let lo = train.iter().map(|s| s.p[k]).fold(f64::INFINITY, f64::min);
            let hi = train.iter().map(|s| s.p[k]).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!((lo, hi), (-1.0, 1.0));
        }
        let total: usize = [Split::Train, Split::Val, Split::Test].iter().map(|&s| ds.range(s).len()).sum();
        assert_eq!(total, ds.len());
        assert!(Split::parse("holdout").is_err());
    }

    #[test]
    fn loader_rejects_inconsistent_header() {
        let ds = generate_dataset(&smoke_config(), &smoke_spec(), "abc").unwrap();
        let mut bytes = ds.to_bytes();
        // Bump n_t in the header and re-seal the checksum: the payload is too short.
        let body_len = bytes.len() - 32;
        let needle = 16u64.to_le_bytes();
        let pos = bytes[..body_len].windows(8).position(|w| w == needle).unwrap();
        bytes[pos..pos + 8].copy_from_slice(&17u64.to_le_bytes());
        bytes.truncate(body_len);
        let mut w = BinWriter::new(MAGIC, VERSION);
        w.bytes(&bytes[12..]);
        let resealed = w.finish();
        assert!(matches!(Dataset::from_bytes(&resealed), Err(Error::CorruptData(_))));
        let mut flipped = ds.to_bytes();
        flipped[40] ^= 1;
        assert!(matches!(Dataset::from_bytes(&flipped), Err(Error::CorruptData(_))));
    }
}
