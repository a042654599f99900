//! Chain driver, posterior snapshots, completed datasets, traces and
//! checkpoints.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::MixedDataset;
use crate::model::{self, Model, ModelState, Params};
use crate::rng::StreamKey;

use super::{active_components, gibbs_sweep, SamplerError, SweepOptions, Workspace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Visit component locations in a random order each sweep.
    pub permute_locations: bool,
    /// Number of completed datasets to emit.
    pub n_completed: usize,
    /// Where to write a checkpoint if the chain aborts, and periodically
    /// when `checkpoint_every` is set.
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_every: Option<usize>,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            iterations: 2000,
            burn_in: 1000,
            thin: 1,
            seed: 1,
            permute_locations: false,
            n_completed: 10,
            checkpoint: None,
            checkpoint_every: None,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let bad = |m: &str| Err(SamplerError::Config(m.to_string()));
        if self.burn_in >= self.iterations {
            return bad("burn_in must be smaller than iterations");
        }
        if self.thin == 0 {
            return bad("thin must be at least 1");
        }
        if self.n_completed == 0 {
            return bad("at least one completed dataset is required");
        }
        if self.n_completed > self.iterations - self.burn_in {
            return bad("more completed datasets than post-burn-in sweeps");
        }
        Ok(())
    }

    /// Sweeps (1-based) after which a completed dataset is taken.
    pub fn completion_sweeps(&self) -> Vec<usize> {
        let post = self.iterations - self.burn_in;
        (1..=self.n_completed)
            .map(|j| self.burn_in + (j * post).div_ceil(self.n_completed))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub alpha: f64,
    pub tau2: Vec<f64>,
    pub active: usize,
}

#[derive(Debug, Clone)]
pub struct Draws {
    /// Post-burn-in thinned parameter snapshots with their sweep numbers.
    pub snapshots: Vec<(usize, Params)>,
    /// Datasets with every missing cell filled in.
    pub completed: Vec<MixedDataset>,
    pub trace: Vec<TraceRow>,
    pub final_state: ModelState,
}

impl Draws {
    pub fn params(&self) -> impl Iterator<Item = &Params> {
        self.snapshots.iter().map(|(_, p)| p)
    }

    pub fn write_trace<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        let k = self.trace.first().map_or(0, |t| t.tau2.len());
        let mut header = vec!["iteration".to_string(), "alpha".to_string()];
        header.extend((1..=k).map(|m| format!("tau2_{m}")));
        header.push("active".into());
        w.write_record(&header)?;
        for t in &self.trace {
            let mut rec = vec![t.iteration.to_string(), format!("{:?}", t.alpha)];
            rec.extend(t.tau2.iter().map(|x| format!("{x:?}")));
            rec.push(t.active.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs one chain from the default initial state.
pub fn run_chain(model: &Model, cfg: &ChainConfig) -> Result<Draws, SamplerError> {
    let state = model::init_state(model, cfg.seed)?;
    run_chain_from(model, cfg, state, 0)
}

/// Continues a chain from `state`, which was produced by `done` sweeps.
pub fn run_chain_from(model: &Model, cfg: &ChainConfig, mut state: ModelState, done: usize) -> Result<Draws, SamplerError> {
    cfg.validate()?;
    model::check_dimensions(model, &state)?;
    let key = StreamKey::new(cfg.seed);
    let opts = SweepOptions {
        permute_locations: cfg.permute_locations,
    };
    let mut ws = Workspace::new(model, &state)?;
    let completion = cfg.completion_sweeps();
    let mut draws = Draws {
        snapshots: Vec::new(),
        completed: Vec::new(),
        trace: Vec::with_capacity(cfg.iterations),
        final_state: state.clone(),
    };
    for t in done + 1..=cfg.iterations {
        let before = cfg.checkpoint.as_ref().map(|_| state.clone());
        if let Err(e) = gibbs_sweep(model, &mut state, &mut ws, &key, t as u64, opts) {
            if let (Some(path), Some(good)) = (&cfg.checkpoint, before) {
                save_checkpoint(path, cfg.seed, t as u64 - 1, &good)?;
            }
            return Err(e);
        }
        draws.trace.push(TraceRow {
            iteration: t,
            alpha: state.params.alpha,
            tau2: state.params.tau2.clone(),
            active: active_components(&state),
        });
        if t > cfg.burn_in && (t - cfg.burn_in) % cfg.thin == 0 {
            draws.snapshots.push((t, state.params.clone()));
        }
        if completion.contains(&t) {
            draws.completed.push(model.completed_dataset(&state));
        }
        if let (Some(path), Some(every)) = (&cfg.checkpoint, cfg.checkpoint_every) {
            if every > 0 && t % every == 0 {
                save_checkpoint(path, cfg.seed, t as u64, &state)?;
            }
        }
    }
    draws.final_state = state;
    Ok(draws)
}

/// Independent chains in parallel; chain `c` uses a seed derived from
/// `cfg.seed` and `c`.
pub fn run_chains(model: &Model, cfg: &ChainConfig, n_chains: usize) -> Result<Vec<Draws>, SamplerError> {
    let base = StreamKey::new(cfg.seed);
    (0..n_chains)
        .into_par_iter()
        .map(|c| {
            let cfg = ChainConfig {
                seed: base.derive(c as u64).seed(),
                checkpoint: cfg.checkpoint.as_ref().map(|p| p.with_extension(format!("chain{c}"))),
                ..cfg.clone()
            };
            run_chain(model, &cfg)
        })
        .collect()
}

/// Potential scale reduction factor of equally long chains (longer chains
/// are truncated to the shortest).
pub fn gelman_rubin(chains: &[Vec<f64>]) -> f64 {
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    let m = chains.len();
    if m < 2 || n < 2 {
        return f64::NAN;
    }
    let means: Vec<f64> = chains.iter().map(|c| c[..n].iter().sum::<f64>() / n as f64).collect();
    let vars: Vec<f64> = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c[..n].iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1) as f64)
        .collect();
    let w = vars.iter().sum::<f64>() / m as f64;
    let grand = means.iter().sum::<f64>() / m as f64;
    let b_over_n = means.iter().map(|x| (x - grand).powi(2)).sum::<f64>() / (m - 1) as f64;
    let var_plus = (n - 1) as f64 / n as f64 * w + b_over_n;
    (var_plus / w).sqrt()
}

const MAGIC: &[u8; 8] = b"CMMCKPT\0";
const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn f64(&mut self, x: f64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn mat(&mut self, m: &DMatrix<f64>) {
        m.iter().for_each(|x| self.f64(*x));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], SamplerError> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(SamplerError::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64, SamplerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize, SamplerError> {
        Ok(self.u64()? as usize)
    }
    fn f64(&mut self) -> Result<f64, SamplerError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn vec(&mut self, n: usize) -> Result<Vec<f64>, SamplerError> {
        (0..n).map(|_| self.f64()).collect()
    }
    fn mat(&mut self, r: usize, c: usize) -> Result<DMatrix<f64>, SamplerError> {
        Ok(DMatrix::from_vec(r, c, self.vec(r * c)?))
    }
}

/// Binary snapshot of a full sampler state. All numbers are little-endian;
/// floats are stored bit-exactly so a resumed chain continues identically.
pub fn encode_state(seed: u64, sweep: u64, state: &ModelState) -> Vec<u8> {
    let prm = &state.params;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.0.extend_from_slice(&VERSION.to_le_bytes());
    w.u64(seed);
    w.u64(sweep);
    let n_comp = prm.stick_logits.len();
    let (k, p) = prm.beta0.shape();
    let q = prm.locations.first().map_or(0, Vec::len);
    let cats: Vec<usize> = prm.psi.first().map_or(vec![], |c| c.iter().map(Vec::len).collect());
    for d in [n_comp, k, p, q, cats.len(), state.alloc.len()] {
        w.u64(d as u64);
    }
    cats.iter().for_each(|d| w.u64(*d as u64));
    prm.stick_logits.iter().for_each(|x| w.f64(*x));
    prm.locations.iter().flatten().for_each(|x| w.f64(*x));
    prm.beta.iter().for_each(|b| w.mat(b));
    prm.sigma.iter().for_each(|s| w.mat(s));
    prm.psi.iter().flatten().flatten().for_each(|x| w.f64(*x));
    w.f64(prm.alpha);
    w.mat(&prm.beta0);
    prm.tau2.iter().for_each(|x| w.f64(*x));
    w.mat(&prm.scale);
    state.alloc.iter().for_each(|h| w.u64(*h as u64));
    state.latent.iter().flatten().for_each(|x| w.f64(*x));
    state.nominal.iter().flatten().for_each(|x| w.u64(u64::from(*x)));
    w.0
}

/// Inverse of [`encode_state`]: returns `(seed, sweep, state)`.
pub fn decode_state(buf: &[u8]) -> Result<(u64, u64, ModelState), SamplerError> {
    if buf.len() < 12 || &buf[..8] != MAGIC {
        return Err(SamplerError::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(SamplerError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut r = Reader { buf, pos: 12 };
    let seed = r.u64()?;
    let sweep = r.u64()?;
    let (n_comp, k, p, q, p_n, n) = (r.usize()?, r.usize()?, r.usize()?, r.usize()?, r.usize()?, r.usize()?);
    let cats: Vec<usize> = (0..p_n).map(|_| r.usize()).collect::<Result<_, _>>()?;
    let stick_logits = r.vec(n_comp)?;
    let locations = (0..n_comp).map(|_| r.vec(q)).collect::<Result<_, _>>()?;
    let beta = (0..n_comp).map(|_| r.mat(k, p)).collect::<Result<_, _>>()?;
    let sigma = (0..n_comp).map(|_| r.mat(p, p)).collect::<Result<_, _>>()?;
    let psi = (0..n_comp)
        .map(|_| cats.iter().map(|d| r.vec(*d)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<_, _>>()?;
    let alpha = r.f64()?;
    let beta0 = r.mat(k, p)?;
    let tau2 = r.vec(k)?;
    let scale = r.mat(p, p)?;
    let alloc = (0..n).map(|_| r.usize()).collect::<Result<_, _>>()?;
    let latent = (0..n).map(|_| r.vec(p)).collect::<Result<_, _>>()?;
    let nominal = (0..n)
        .map(|_| (0..p_n).map(|_| Ok(r.u64()? as u32)).collect::<Result<Vec<u32>, SamplerError>>())
        .collect::<Result<_, _>>()?;
    if r.pos != buf.len() {
        return Err(SamplerError::Checkpoint("trailing bytes".into()));
    }
    Ok((
        seed,
        sweep,
        ModelState {
            params: Params {
                stick_logits,
                locations,
                beta,
                sigma,
                psi,
                alpha,
                beta0,
                tau2,
                scale,
            },
            alloc,
            latent,
            nominal,
        },
    ))
}

pub fn save_checkpoint(path: &Path, seed: u64, sweep: u64, state: &ModelState) -> Result<(), SamplerError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_state(seed, sweep, state))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(u64, u64, ModelState), SamplerError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_state(&buf)
}

/// Parameter snapshots as a length-prefixed sequence of state records with
/// no observations attached.
pub fn encode_snapshots(seed: u64, snapshots: &[(usize, Params)]) -> Vec<u8> {
    let mut out = (snapshots.len() as u64).to_le_bytes().to_vec();
    for (sweep, params) in snapshots {
        let state = ModelState {
            params: params.clone(),
            alloc: vec![],
            latent: vec![],
            nominal: vec![],
        };
        let rec = encode_state(seed, *sweep as u64, &state);
        out.extend_from_slice(&(rec.len() as u64).to_le_bytes());
        out.extend_from_slice(&rec);
    }
    out
}

pub fn decode_snapshots(buf: &[u8]) -> Result<Vec<(usize, Params)>, SamplerError> {
    let truncated = || SamplerError::Checkpoint("truncated snapshot file".into());
    let word = |pos: usize| -> Result<usize, SamplerError> {
        let b = buf.get(pos..pos + 8).ok_or_else(truncated)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()) as usize)
    };
    let count = word(0)?;
    let mut pos = 8;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = word(pos)?;
        let rec = buf.get(pos + 8..pos + 8 + len).ok_or_else(truncated)?;
        let (_, sweep, state) = decode_state(rec)?;
        out.push((sweep as usize, state.params));
        pos += 8 + len;
    }
    if pos != buf.len() {
        return Err(SamplerError::Checkpoint("trailing bytes".into()));
    }
    Ok(out)
}

/// Resumes a chain from a checkpoint written by [`run_chain`].
pub fn resume_chain(model: &Model, cfg: &ChainConfig, path: &Path) -> Result<Draws, SamplerError> {
    let (seed, sweep, state) = load_checkpoint(path)?;
    if seed != cfg.seed {
        return Err(SamplerError::Checkpoint(format!(
            "checkpoint seed {seed} differs from configured seed {}",
            cfg.seed
        )));
    }
    run_chain_from(model, cfg, state, sweep as usize)
}
