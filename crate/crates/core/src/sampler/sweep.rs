use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::gower;
use crate::model::{LocationUpdate, Model, ModelState};
use crate::rng::{StreamKey, Tag, MAX_INDEX};

use super::conditionals as cond;
use super::{KernelCache, SamplerError, Workspace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SweepOptions {
    /// Visit component locations in a random order each sweep.
    pub permute_locations: bool,
}

/// One full pass: latents and nominal imputations, allocations, sticks,
/// locations, atoms (beta, Sigma, psi) and hyperparameters
/// (beta0, tau2, S, alpha). `ws` must be consistent with `state` on entry
/// and is kept consistent.
pub fn gibbs_sweep(
    model: &Model,
    state: &mut ModelState,
    ws: &mut Workspace,
    key: &StreamKey,
    sweep: u64,
    opts: SweepOptions,
) -> Result<(), SamplerError> {
    update_rows(model, state, ws, key, sweep);
    update_allocations(model, state, ws, key, sweep)?;
    update_sticks(model, state, ws, key, sweep);
    update_locations(model, state, ws, key, sweep, opts);
    update_atoms(model, state, ws, key, sweep)?;
    update_hypers(model, state, ws, key, sweep)
}

/// Latent coordinates, missing continuous values and missing nominal
/// levels of every row.
pub(crate) fn update_rows(model: &Model, state: &mut ModelState, ws: &mut Workspace, key: &StreamKey, sweep: u64) {
    let ModelState {
        params,
        alloc,
        latent,
        nominal,
    } = state;
    let kernels = &ws.kernels;
    let p = model.p();
    latent
        .par_iter_mut()
        .zip(nominal.par_iter_mut())
        .zip(ws.design.par_iter_mut())
        .enumerate()
        .for_each(|(i, ((w, x), d))| {
            let h = alloc[i];
            let kernel = &kernels[h];
            let mean = model.kernel_mean(d, &params.beta[h]);
            let mut rng = key.stream(sweep, Tag::Latent, i as u64);
            for r in 0..p {
                if model.continuous_observed(i, r) {
                    continue;
                }
                w[r] = cond::latent_raw(model, i, r, w, &mean, kernel).sample(&mut rng);
            }
            let mut rng = key.stream(sweep, Tag::Nominal, i as u64);
            for (j, &col) in model.layout.nominal.iter().enumerate() {
                if !model.data.is_missing(i, col) {
                    continue;
                }
                let c = cond::nominal_raw(model, i, j, w, x, params, h, kernel).sample(&mut rng);
                x[j] = c as u32 + 1;
                if model.design_reads_nominal[j] {
                    model.design_row(i, x, d);
                }
            }
        });
}

fn update_allocations(
    model: &Model,
    state: &mut ModelState,
    ws: &Workspace,
    key: &StreamKey,
    sweep: u64,
) -> Result<(), SamplerError> {
    let st: &ModelState = state;
    let alloc = (0..model.n())
        .into_par_iter()
        .map(|i| {
            let eta = &ws.neighborhoods[i];
            let c = cond::allocation(model, st, ws, i)?;
            let mut rng = key.stream(sweep, Tag::Allocation, i as u64);
            Ok(eta[c.sample(&mut rng)])
        })
        .collect::<Result<Vec<usize>, SamplerError>>()?;
    state.alloc = alloc;
    Ok(())
}

fn update_sticks(model: &Model, state: &mut ModelState, ws: &Workspace, key: &StreamKey, sweep: u64) {
    let conds = cond::sticks(model, state, ws);
    for (h, c) in conds.iter().enumerate() {
        let mut rng = key.stream(sweep, Tag::Stick, h as u64);
        state.params.stick_logits[h] = c.sample(&mut rng);
    }
}

pub(crate) fn draw_location_from_prior(model: &Model, state: &mut ModelState, key: &StreamKey, sweep: u64, h: usize) {
    let mut rng = key.stream(sweep, Tag::Location, h as u64);
    for (l, kind) in model.hyper.distance.kinds.iter().enumerate() {
        state.params.locations[h][l] = cond::prior_coord(&mut rng, kind);
    }
}

fn update_locations(
    model: &Model,
    state: &mut ModelState,
    ws: &mut Workspace,
    key: &StreamKey,
    sweep: u64,
    opts: SweepOptions,
) {
    let n_comp = model.n_components();
    if model.q() == 0 {
        return;
    }
    let spec = &model.hyper.distance;
    if spec.dstar >= 1.0 {
        // Every location is within reach of every row.
        for h in 0..n_comp {
            draw_location_from_prior(model, state, key, sweep, h);
        }
        return;
    }
    let mut order: Vec<usize> = (0..n_comp).collect();
    if opts.permute_locations {
        order.shuffle(&mut key.stream(sweep, Tag::Location, MAX_INDEX));
    }
    for h in order {
        let rows: Vec<usize> = (0..model.n()).filter(|&i| state.alloc[i] == h).collect();
        if rows.is_empty() && model.hyper.location_update == LocationUpdate::MembersOnly {
            draw_location_from_prior(model, state, key, sweep, h);
        } else {
            let gains = cond::location_gains(model, state, ws, h);
            let mut rng = key.stream(sweep, Tag::Location, h as u64);
            for l in 0..model.q() {
                let c = cond::location_coord(model, state, h, l, &gains);
                let Some(v) = c.sample(&mut rng) else { continue };
                let old = state.params.locations[h][l];
                state.params.locations[h][l] = v;
                let loc = &state.params.locations[h];
                let ok = rows
                    .iter()
                    .all(|&i| gower::within(gower::distance_unchecked(&model.fixed[i], loc, spec), spec.dstar));
                if !ok {
                    state.params.locations[h][l] = old;
                }
            }
        }
        let loc = &state.params.locations[h];
        for (f, eta) in model.fixed.iter().zip(ws.neighborhoods.iter_mut()) {
            let member = gower::within(gower::distance_unchecked(f, loc, spec), spec.dstar);
            match (eta.binary_search(&h), member) {
                (Ok(pos), false) => {
                    eta.remove(pos);
                }
                (Err(pos), true) => eta.insert(pos, h),
                _ => {}
            }
        }
    }
}

pub(crate) fn update_atoms(
    model: &Model,
    state: &mut ModelState,
    ws: &mut Workspace,
    key: &StreamKey,
    sweep: u64,
) -> Result<(), SamplerError> {
    let n_comp = model.n_components();
    let members = cond::members(n_comp, &state.alloc);
    let st: &ModelState = state;
    let wsr: &Workspace = ws;
    let updated = (0..n_comp)
        .into_par_iter()
        .map(|h| {
            let rows = &members[h];
            let mut beta = st.params.beta[h].clone();
            let omega = &wsr.kernels[h].precision;
            let mut rng = key.stream(sweep, Tag::Beta, h as u64);
            for r in 0..model.p() {
                let c = cond::beta_column_raw(model, st, wsr, rows, &beta, omega, r);
                let col = c.sample(&mut rng)?;
                beta.set_column(r, &col);
            }
            let mut rng = key.stream(sweep, Tag::Sigma, h as u64);
            let sigma = cond::sigma_raw(model, st, wsr, rows, &beta).sample(&mut rng)?;
            let kernel = KernelCache::new(&sigma)?;
            let mut rng = key.stream(sweep, Tag::Psi, h as u64);
            let psi: Vec<Vec<f64>> = (0..model.p_n())
                .map(|j| cond::psi_raw(model, st, rows, j).sample(&mut rng))
                .collect();
            Ok((beta, sigma, psi, kernel))
        })
        .collect::<Result<Vec<_>, SamplerError>>()?;
    for (h, (beta, sigma, psi, kernel)) in updated.into_iter().enumerate() {
        state.params.beta[h] = beta;
        state.params.sigma[h] = sigma;
        state.params.psi[h] = psi;
        ws.kernels[h] = kernel;
    }
    Ok(())
}

pub(crate) fn update_hypers(
    model: &Model,
    state: &mut ModelState,
    ws: &Workspace,
    key: &StreamKey,
    sweep: u64,
) -> Result<(), SamplerError> {
    let (k, p) = (model.k(), model.p());
    let mut rng = key.stream(sweep, Tag::Beta0, 0);
    for m in 0..k {
        for r in 0..p {
            let c = cond::beta0(model, state, m, r);
            state.params.beta0[(m, r)] = c.sample(&mut rng);
        }
    }
    let mut rng = key.stream(sweep, Tag::Tau, 0);
    for m in 0..k {
        let c = cond::tau2(model, state, m);
        state.params.tau2[m] = c.sample(&mut rng);
    }
    let mut rng = key.stream(sweep, Tag::Scale, 0);
    state.params.scale = cond::scale(model, ws)?.sample(&mut rng)?;
    let mut rng = key.stream(sweep, Tag::Alpha, 0);
    state.params.alpha = cond::alpha(model, state).sample(&mut rng);
    Ok(())
}
