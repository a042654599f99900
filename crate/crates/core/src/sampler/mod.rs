//! Blocked Gibbs sampler: full conditionals, sweeps, chains and the
//! joint-distribution (Geweke) check.

pub mod chain;
pub mod conditionals;
pub mod geweke;
pub mod reference;
mod sweep;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::dist::{self, LinalgError, LN_2PI};
use crate::model::{Model, ModelError, ModelState, Params};

pub use chain::{
    decode_snapshots, encode_snapshots, encode_state, gelman_rubin, run_chain, run_chains, ChainConfig, Draws, TraceRow,
};
pub use sweep::{gibbs_sweep, SweepOptions};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("observation {0} has an empty neighborhood")]
    EmptyNeighborhood(usize),
    #[error("invalid chain configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Factorized kernel covariance of one component.
#[derive(Debug, Clone)]
pub struct KernelCache {
    pub precision: DMatrix<f64>,
    pub log_det: f64,
}

impl KernelCache {
    pub fn new(sigma: &DMatrix<f64>) -> Result<Self, LinalgError> {
        let c = dist::cholesky(sigma, "kernel covariance")?;
        Ok(KernelCache {
            log_det: dist::log_det_chol(&c),
            precision: dist::symmetrize(&c.inverse()),
        })
    }

    pub fn log_pdf(&self, x: &[f64], mean: &[f64]) -> f64 {
        let p = x.len();
        let mut q = 0.0;
        for a in 0..p {
            let ra = x[a] - mean[a];
            let mut row = 0.0;
            for b in 0..p {
                row += self.precision[(a, b)] * (x[b] - mean[b]);
            }
            q += ra * row;
        }
        -0.5 * (p as f64 * LN_2PI + self.log_det + q)
    }
}

/// Quantities derived from the state that the updates share: kernel
/// factorizations, design rows and neighborhoods.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub kernels: Vec<KernelCache>,
    pub design: Vec<Vec<f64>>,
    pub neighborhoods: Vec<Vec<usize>>,
}

impl Workspace {
    pub fn new(model: &Model, state: &ModelState) -> Result<Self, SamplerError> {
        let mut ws = Workspace {
            kernels: Vec::new(),
            design: vec![vec![0.0; model.k()]; model.n()],
            neighborhoods: Vec::new(),
        };
        ws.refresh(model, state)?;
        Ok(ws)
    }

    pub fn refresh(&mut self, model: &Model, state: &ModelState) -> Result<(), SamplerError> {
        self.refresh_kernels(&state.params)?;
        for i in 0..model.n() {
            model.design_row(i, &state.nominal[i], &mut self.design[i]);
        }
        self.neighborhoods = model.fixed.iter().map(|f| model.neighborhood(f, &state.params.locations)).collect();
        Ok(())
    }

    pub fn refresh_kernels(&mut self, params: &Params) -> Result<(), LinalgError> {
        self.kernels = params.sigma.iter().map(KernelCache::new).collect::<Result<_, _>>()?;
        Ok(())
    }
}

/// Number of components with at least one allocated row.
pub fn active_components(state: &ModelState) -> usize {
    let mut seen: Vec<usize> = state.alloc.clone();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_model;
    use crate::model::{init_state, validate};
    use crate::rng::StreamKey;

    fn run(model: &Model, seed: u64, sweeps: u64) -> ModelState {
        let mut s = init_state(model, seed).unwrap();
        let mut ws = Workspace::new(model, &s).unwrap();
        let key = StreamKey::new(seed);
        for t in 1..=sweeps {
            gibbs_sweep(model, &mut s, &mut ws, &key, t, SweepOptions::default()).unwrap();
            assert_eq!(validate(model, &s), vec![], "sweep {t}");
        }
        s
    }

    #[test]
    fn invariants_hold_over_smoke_run() {
        run(&tiny_model(3, 0.5), 1, 500);
    }

    #[test]
    fn members_only_mode_keeps_invariants() {
        let mut m = tiny_model(3, 0.5);
        m.hyper.location_update = crate::model::LocationUpdate::MembersOnly;
        run(&m, 2, 200);
    }

    #[test]
    fn fixed_seed_reproduces_trajectory() {
        let m = tiny_model(3, 0.5);
        assert_eq!(run(&m, 7, 50), run(&m, 7, 50));
        assert_ne!(run(&m, 7, 50), run(&m, 8, 50));
    }

    #[test]
    fn workspace_stays_consistent() {
        let m = tiny_model(3, 0.5);
        let mut s = init_state(&m, 3).unwrap();
        let mut ws = Workspace::new(&m, &s).unwrap();
        let key = StreamKey::new(3);
        for t in 1..=20 {
            gibbs_sweep(&m, &mut s, &mut ws, &key, t, SweepOptions { permute_locations: true }).unwrap();
            let fresh = Workspace::new(&m, &s).unwrap();
            assert_eq!(ws.neighborhoods, fresh.neighborhoods);
            assert_eq!(ws.design, fresh.design);
        }
    }

    #[test]
    fn global_radius_matches_reference_path() {
        let m = tiny_model(3, 1.0);
        let key = StreamKey::new(5);
        let mut a = init_state(&m, 5).unwrap();
        let mut b = a.clone();
        let mut wa = Workspace::new(&m, &a).unwrap();
        let mut wb = wa.clone();
        for t in 1..=100 {
            gibbs_sweep(&m, &mut a, &mut wa, &key, t, SweepOptions::default()).unwrap();
            reference::reference_sweep(&m, &mut b, &mut wb, &key, t).unwrap();
            assert_eq!(a, b, "sweep {t}");
        }
    }
}
