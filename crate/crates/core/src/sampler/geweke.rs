//! Joint-distribution test of the sampler.
//!
//! Marginal-conditional draws simulate parameters from the prior and data
//! from the model. Successive-conditional draws alternate a Gibbs sweep
//! with re-simulation of the data given the parameters. Both target the
//! same joint distribution, so the moments of any test function must agree
//! when the sweep leaves the posterior invariant.

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;

use crate::dist;
use crate::model::{self, log_local_weights, Model, ModelState};
use crate::rng::{StreamKey, Tag};

use super::{gibbs_sweep, SamplerError, SweepOptions, Workspace};

pub const TEST_FUNCTIONS: [&str; 6] = ["alpha", "tau2_1", "mean_w1", "alpha^2", "tau2_1^2", "mean_w1^2"];

/// `(alpha, tau2_1, mean of the first latent coordinate)` and their squares.
pub fn test_functions(state: &ModelState) -> [f64; 6] {
    let a = state.params.alpha;
    let t = state.params.tau2[0];
    let w = state.latent.iter().map(|x| x[0]).sum::<f64>() / state.latent.len() as f64;
    [a, t, w, a * a, t * t, w * w]
}

/// Draws everything else given parameters: allocations, nominal levels and
/// latent vectors, then writes the observed cells of `model.data`.
fn simulate_given_params<R: Rng + ?Sized>(model: &mut Model, state: &mut ModelState, rng: &mut R, keep_missing_x: bool) {
    let p = model.p();
    let mut d = vec![0.0; model.k()];
    for i in 0..model.n() {
        let h = state.alloc[i];
        for (j, &col) in model.layout.nominal.iter().enumerate() {
            if keep_missing_x && model.data.is_missing(i, col) {
                continue;
            }
            let logp: Vec<f64> = state.params.psi[h][j].iter().map(|x| x.ln()).collect();
            state.nominal[i][j] = dist::categorical_log(rng, &logp) as u32 + 1;
        }
        model.design_row(i, &state.nominal[i], &mut d);
        let mean = DVector::from_vec(model.kernel_mean(&d, &state.params.beta[h]));
        let l = dist::cholesky(&state.params.sigma[h], "kernel covariance")
            .expect("prior covariances are positive definite")
            .unpack();
        let w = dist::mvn_sample_chol(rng, &mean, &l);
        state.latent[i] = w.iter().copied().collect();
        for r in 0..p {
            let col = model.layout.latent_column(r);
            if model.data.is_missing(i, col) {
                continue;
            }
            let v = if r < model.p_o() {
                f64::from(model.level_of(r, w[r]))
            } else {
                w[r]
            };
            model.data.set_observed(i, col, v).expect("simulated value fits the schema");
        }
        for (j, &col) in model.layout.nominal.iter().enumerate() {
            if !model.data.is_missing(i, col) {
                model
                    .data
                    .set_observed(i, col, f64::from(state.nominal[i][j]))
                    .expect("simulated level fits the schema");
            }
        }
    }
}

/// One draw from the joint prior of parameters and data. The missingness
/// pattern of `template.data` is kept.
pub fn simulate_joint(template: &Model, key: &StreamKey, index: u64) -> Result<(Model, ModelState), SamplerError> {
    let mut rng = key.stream(index, Tag::Prior, 0);
    let params = model::sample_prior_params(template, &mut rng, 100_000)?;
    let alloc = template
        .fixed
        .iter()
        .map(|f| {
            let eta = template.neighborhood(f, &params.locations);
            eta[dist::categorical_log(&mut rng, &log_local_weights(&params.stick_logits, &eta))]
        })
        .collect();
    let mut state = ModelState {
        params,
        alloc,
        latent: vec![vec![0.0; template.p()]; template.n()],
        nominal: vec![vec![1; template.p_n()]; template.n()],
    };
    let mut m = template.clone();
    simulate_given_params(&mut m, &mut state, &mut rng, false);
    Ok((m, state))
}

/// Test-function values of `n` independent joint draws.
pub fn marginal_conditional(template: &Model, n: usize, seed: u64) -> Result<Vec<[f64; 6]>, SamplerError> {
    let key = StreamKey::new(seed);
    (0..n as u64)
        .into_par_iter()
        .map(|t| simulate_joint(template, &key, t).map(|(_, s)| test_functions(&s)))
        .collect()
}

/// Test-function values along `n` successive-conditional steps.
pub fn successive_conditional(template: &Model, n: usize, seed: u64) -> Result<Vec<[f64; 6]>, SamplerError> {
    let key = StreamKey::new(seed);
    let (mut m, mut state) = simulate_joint(template, &key.derive(1), 0)?;
    let mut ws = Workspace::new(&m, &state)?;
    let mut out = Vec::with_capacity(n);
    for t in 1..=n as u64 {
        gibbs_sweep(&m, &mut state, &mut ws, &key, t, SweepOptions::default())?;
        let mut rng = key.stream(t, Tag::Data, 0);
        simulate_given_params(&mut m, &mut state, &mut rng, true);
        ws.refresh(&m, &state)?;
        out.push(test_functions(&state));
    }
    Ok(out)
}

/// Mean and batch-means standard error of a series.
pub fn batch_mean_se(x: &[f64], batches: usize) -> (f64, f64) {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let b = batches.min(n).max(2);
    let size = n / b;
    let means: Vec<f64> = (0..b)
        .map(|j| x[j * size..(j + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let mm = means.iter().sum::<f64>() / b as f64;
    let var = means.iter().map(|v| (v - mm).powi(2)).sum::<f64>() / (b - 1) as f64;
    (mean, (var / b as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GewekeReport {
    pub marginal: Vec<(f64, f64)>,
    pub successive: Vec<(f64, f64)>,
    pub z: Vec<f64>,
}

impl GewekeReport {
    pub fn passes(&self, bound: f64) -> bool {
        self.z.iter().all(|z| z.abs() < bound)
    }
}

pub fn compare(marginal: &[[f64; 6]], successive: &[[f64; 6]], batches: usize) -> GewekeReport {
    let mut report = GewekeReport {
        marginal: Vec::new(),
        successive: Vec::new(),
        z: Vec::new(),
    };
    for f in 0..6 {
        let a: Vec<f64> = marginal.iter().map(|v| v[f]).collect();
        let b: Vec<f64> = successive.iter().map(|v| v[f]).collect();
        let (ma, sa) = batch_mean_se(&a, batches);
        let (mb, sb) = batch_mean_se(&b, batches);
        report.marginal.push((ma, sa));
        report.successive.push((mb, sb));
        report.z.push((ma - mb) / (sa * sa + sb * sb).sqrt());
    }
    report
}

pub fn geweke_test(template: &Model, draws: usize, seed: u64) -> Result<GewekeReport, SamplerError> {
    let mc = marginal_conditional(template, draws, seed)?;
    let sc = successive_conditional(template, draws, seed.wrapping_add(1))?;
    Ok(compare(&mc, &sc, 50))
}
