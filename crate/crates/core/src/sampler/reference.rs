//! Sweep of a plain globally truncated Dirichlet process mixture.
//!
//! Allocations range over all components with the ordinary stick-breaking
//! weights and the sticks use the standard global counts. Locations play no
//! role and are redrawn from their prior. When every neighborhood contains
//! every component (`d* >= 1` or no fixed variables) the local model reduces
//! to this one, and with shared random streams the two paths produce the
//! same trajectory.

use rayon::prelude::*;

use crate::model::{Model, ModelState};
use crate::rng::{StreamKey, Tag};

use super::conditionals::{allocation_over, BetaCond};
use super::sweep::{draw_location_from_prior, update_atoms, update_hypers, update_rows};
use super::{SamplerError, Workspace};

pub fn reference_sweep(
    model: &Model,
    state: &mut ModelState,
    ws: &mut Workspace,
    key: &StreamKey,
    sweep: u64,
) -> Result<(), SamplerError> {
    let n_comp = model.n_components();
    update_rows(model, state, ws, key, sweep);

    let all: Vec<usize> = (0..n_comp).collect();
    let st: &ModelState = state;
    let wsr: &Workspace = ws;
    state.alloc = (0..model.n())
        .into_par_iter()
        .map(|i| {
            let c = allocation_over(model, &st.params, wsr, i, &st.latent[i], &st.nominal[i], &all);
            let mut rng = key.stream(sweep, Tag::Allocation, i as u64);
            all[c.sample(&mut rng)]
        })
        .collect();

    let mut at = vec![0usize; n_comp];
    for &h in &state.alloc {
        at[h] += 1;
    }
    let mut above = 0usize;
    let mut beyond = vec![0usize; n_comp];
    for h in (0..n_comp).rev() {
        beyond[h] = above;
        above += at[h];
    }
    for h in 0..n_comp {
        // The last component takes the remaining mass and never counts as
        // a success.
        let succ = if h + 1 < n_comp { at[h] } else { 0 };
        let c = BetaCond {
            a: 1.0 + succ as f64,
            b: state.params.alpha + beyond[h] as f64,
        };
        let mut rng = key.stream(sweep, Tag::Stick, h as u64);
        state.params.stick_logits[h] = c.sample(&mut rng);
    }

    if model.q() > 0 {
        for h in 0..n_comp {
            draw_location_from_prior(model, state, key, sweep, h);
        }
    }
    update_atoms(model, state, ws, key, sweep)?;
    update_hypers(model, state, ws, key, sweep)
}
