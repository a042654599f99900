//! Full conditional distributions of every Gibbs block.
//!
//! Each function returns a small distribution object that can both be
//! sampled and evaluated (up to a constant), so that the updates can be
//! checked against the joint density.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::dist::{self, LinalgError};
use crate::gower::{self, FixedKind};
use crate::model::{ln_stick, ln_stick_rest, log_local_weights, LocationUpdate, Model, ModelState, Params};

use super::{KernelCache, SamplerError, Workspace};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncNormal {
    pub mean: f64,
    pub var: f64,
    pub lo: f64,
    pub hi: f64,
}

impl TruncNormal {
    pub fn log_density(&self, x: f64) -> f64 {
        if x > self.lo && x <= self.hi {
            dist::normal_logpdf(x, self.mean, self.var)
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        dist::truncated_normal(rng, self.mean, self.var, self.lo, self.hi)
    }
}

/// Finite discrete distribution given by unnormalized log weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Discrete {
    pub log_weights: Vec<f64>,
}

impl Discrete {
    pub fn probabilities(&self) -> Vec<f64> {
        dist::normalize_log(&self.log_weights)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        dist::categorical_log(rng, &self.log_weights)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalCond {
    pub mean: f64,
    pub var: f64,
}

impl NormalCond {
    pub fn log_density(&self, x: f64) -> f64 {
        dist::normal_logpdf(x, self.mean, self.var)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        use rand_distr::{Distribution, StandardNormal};
        let z: f64 = StandardNormal.sample(rng);
        self.mean + self.var.sqrt() * z
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaCond {
    pub shape: f64,
    pub rate: f64,
}

impl GammaCond {
    pub fn log_density(&self, x: f64) -> f64 {
        dist::log_gamma_pdf(x, self.shape, self.rate)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        dist::gamma_shape_rate(rng, self.shape, self.rate)
    }
}

/// Beta distribution of a stick proportion. Values are exchanged as logits;
/// densities are with respect to the proportion itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaCond {
    pub a: f64,
    pub b: f64,
}

impl BetaCond {
    pub fn log_density(&self, logit: f64) -> f64 {
        dist::log_beta_pdf_logit(logit, self.a, self.b)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        dist::beta_logit(rng, self.a, self.b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncInvGamma {
    pub shape: f64,
    pub scale: f64,
    pub max: f64,
}

impl TruncInvGamma {
    pub fn log_density(&self, x: f64) -> f64 {
        if x > 0.0 && x <= self.max {
            dist::log_inv_gamma_pdf(x, self.shape, self.scale)
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        dist::truncated_inv_gamma(rng, self.shape, self.scale, self.max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirichletCond {
    pub conc: Vec<f64>,
}

impl DirichletCond {
    pub fn log_density(&self, p: &[f64]) -> f64 {
        dist::log_dirichlet_pdf(p, &self.conc)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        dist::dirichlet(rng, &self.conc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvWishartCond {
    pub df: f64,
    pub scale: DMatrix<f64>,
}

impl InvWishartCond {
    pub fn log_density(&self, x: &DMatrix<f64>) -> f64 {
        dist::log_inv_wishart_pdf(x, self.df, &self.scale).unwrap_or(f64::NEG_INFINITY)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DMatrix<f64>, LinalgError> {
        dist::inv_wishart(rng, self.df, &self.scale)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WishartCond {
    pub df: f64,
    pub scale: DMatrix<f64>,
}

impl WishartCond {
    pub fn log_density(&self, x: &DMatrix<f64>) -> f64 {
        dist::log_wishart_pdf(x, self.df, &self.scale).unwrap_or(f64::NEG_INFINITY)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DMatrix<f64>, LinalgError> {
        dist::wishart(rng, self.df, &self.scale)
    }
}

/// Gaussian in canonical form: precision `P` and `b = P mean`.
#[derive(Debug, Clone, PartialEq)]
pub struct MvnCond {
    pub precision: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl MvnCond {
    pub fn mean(&self) -> Result<DVector<f64>, LinalgError> {
        Ok(dist::cholesky(&self.precision, "posterior precision")?.solve(&self.b))
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let m = match self.mean() {
            Ok(m) => m,
            Err(_) => return f64::NAN,
        };
        let r = DVector::from_iterator(x.len(), x.iter().zip(m.iter()).map(|(a, b)| a - b));
        -0.5 * (r.transpose() * &self.precision * &r)[(0, 0)]
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>, LinalgError> {
        dist::mvn_from_precision(rng, &self.precision, &self.b)
    }
}

/// Piece of a piecewise-constant density on a continuous coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub lo: f64,
    pub hi: f64,
    pub log_weight: f64,
}

/// Full conditional of one location coordinate.
#[derive(Debug, Clone, PartialEq)]
pub enum LocationCond {
    /// The coordinate does not affect the model; draw from its prior.
    Prior(FixedKind),
    Discrete { values: Vec<f64>, dist: Discrete },
    Continuous { segments: Vec<Segment> },
}

impl LocationCond {
    pub fn log_density(&self, v: f64) -> f64 {
        match self {
            LocationCond::Prior(_) => 0.0,
            LocationCond::Discrete { values, dist } => values
                .iter()
                .position(|x| *x == v)
                .map_or(f64::NEG_INFINITY, |i| dist.log_weights[i]),
            LocationCond::Continuous { segments } => segments
                .iter()
                .find(|s| v >= s.lo && v <= s.hi)
                .map_or(f64::NEG_INFINITY, |s| s.log_weight),
        }
    }

    /// Draws a value; `None` when the admissible set is numerically empty
    /// (the caller then keeps the current value).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<f64> {
        match self {
            LocationCond::Prior(kind) => Some(prior_coord(rng, kind)),
            LocationCond::Discrete { values, dist } => Some(values[dist.sample(rng)]),
            LocationCond::Continuous { segments } => {
                let live: Vec<&Segment> = segments
                    .iter()
                    .filter(|s| s.hi > s.lo && s.log_weight > f64::NEG_INFINITY)
                    .collect();
                if live.is_empty() {
                    return None;
                }
                let lw: Vec<f64> = live.iter().map(|s| (s.hi - s.lo).ln() + s.log_weight).collect();
                let s = live[dist::categorical_log(rng, &lw)];
                Some(s.lo + (s.hi - s.lo) * rng.random::<f64>())
            }
        }
    }
}

pub(crate) fn prior_coord<R: Rng + ?Sized>(rng: &mut R, kind: &FixedKind) -> f64 {
    match *kind {
        FixedKind::Ordinal { levels } => f64::from(rng.random_range(1..=levels)),
        FixedKind::Nominal { categories } => f64::from(rng.random_range(1..=categories)),
        FixedKind::Continuous { min, max } => min + (max - min) * rng.random::<f64>(),
    }
}

/// Mean and variance of coordinate `r` of `N(mean, Omega^{-1})` given the
/// other coordinates of `x`.
pub(crate) fn conditional_normal(x: &[f64], mean: &[f64], precision: &DMatrix<f64>, r: usize) -> (f64, f64) {
    let orr = precision[(r, r)];
    let mut s = 0.0;
    for (l, (xl, ml)) in x.iter().zip(mean).enumerate() {
        if l != r {
            s += precision[(r, l)] * (xl - ml);
        }
    }
    (mean[r] - s / orr, 1.0 / orr)
}

pub(crate) fn latent_raw(model: &Model, i: usize, r: usize, w: &[f64], mean: &[f64], kernel: &KernelCache) -> TruncNormal {
    let (m, v) = conditional_normal(w, mean, &kernel.precision, r);
    let (lo, hi) = model.latent_interval(i, r);
    TruncNormal { mean: m, var: v, lo, hi }
}

/// Latent coordinate `r` of row `i`.
pub fn latent(model: &Model, state: &ModelState, ws: &Workspace, i: usize, r: usize) -> TruncNormal {
    let h = state.alloc[i];
    let mean = model.kernel_mean(&ws.design[i], &state.params.beta[h]);
    latent_raw(model, i, r, &state.latent[i], &mean, &ws.kernels[h])
}

pub(crate) fn nominal_raw(
    model: &Model,
    i: usize,
    j: usize,
    w: &[f64],
    x: &[u32],
    params: &Params,
    h: usize,
    kernel: &KernelCache,
) -> Discrete {
    let d_j = model.nominal_categories[j];
    let mut levels = x.to_vec();
    let mut d = vec![0.0; model.k()];
    let log_weights = (0..d_j)
        .map(|c| {
            let mut lw = params.psi[h][j][c].ln();
            if model.design_reads_nominal[j] {
                levels[j] = c as u32 + 1;
                model.design_row(i, &levels, &mut d);
                lw += kernel.log_pdf(w, &model.kernel_mean(&d, &params.beta[h]));
            }
            lw
        })
        .collect();
    Discrete { log_weights }
}

/// Missing nominal cell `(i, j)`; outcome index `c` means level `c + 1`.
pub fn nominal(model: &Model, state: &ModelState, ws: &Workspace, i: usize, j: usize) -> Discrete {
    let h = state.alloc[i];
    nominal_raw(model, i, j, &state.latent[i], &state.nominal[i], &state.params, h, &ws.kernels[h])
}

/// Allocation of row `i`; outcome index `c` means component
/// `ws.neighborhoods[i][c]`.
pub fn allocation(model: &Model, state: &ModelState, ws: &Workspace, i: usize) -> Result<Discrete, SamplerError> {
    let eta = &ws.neighborhoods[i];
    if eta.is_empty() {
        return Err(SamplerError::EmptyNeighborhood(i));
    }
    Ok(allocation_over(model, &state.params, ws, i, &state.latent[i], &state.nominal[i], eta))
}

pub(crate) fn allocation_over(
    model: &Model,
    params: &Params,
    ws: &Workspace,
    i: usize,
    w: &[f64],
    x: &[u32],
    members: &[usize],
) -> Discrete {
    let mut log_weights = log_local_weights(&params.stick_logits, members);
    for (lw, &h) in log_weights.iter_mut().zip(members) {
        *lw += ws.kernels[h].log_pdf(w, &model.kernel_mean(&ws.design[i], &params.beta[h]));
        for (j, &l) in x.iter().enumerate() {
            *lw += params.psi[h][j][l as usize - 1].ln();
        }
    }
    Discrete { log_weights }
}

/// Stick counts `(successes, failures)` per component.
pub fn stick_counts(n_comp: usize, alloc: &[usize], neighborhoods: &[Vec<usize>]) -> (Vec<usize>, Vec<usize>) {
    let mut succ = vec![0; n_comp];
    let mut fail = vec![0; n_comp];
    for (&hi, eta) in alloc.iter().zip(neighborhoods) {
        if eta.last() != Some(&hi) {
            succ[hi] += 1;
        }
        for &g in eta.iter().take_while(|&&g| g < hi) {
            fail[g] += 1;
        }
    }
    (succ, fail)
}

pub fn sticks(model: &Model, state: &ModelState, ws: &Workspace) -> Vec<BetaCond> {
    let (succ, fail) = stick_counts(model.n_components(), &state.alloc, &ws.neighborhoods);
    succ.iter()
        .zip(&fail)
        .map(|(s, f)| BetaCond {
            a: 1.0 + *s as f64,
            b: state.params.alpha + *f as f64,
        })
        .collect()
}

/// Change in the log stick weight of row `i` (allocated to `H_i`) when
/// component `h` joins its neighborhood.
pub(crate) fn membership_gain(stick_logits: &[f64], eta: &[usize], hi: usize, h: usize) -> f64 {
    if h < hi {
        ln_stick_rest(stick_logits[h])
    } else if eta.iter().any(|&g| g > hi && g != h) {
        0.0
    } else {
        ln_stick(stick_logits[hi])
    }
}

/// Per-row gains for component `h` (zero for its own members).
pub fn location_gains(model: &Model, state: &ModelState, ws: &Workspace, h: usize) -> Vec<f64> {
    if model.hyper.location_update == LocationUpdate::MembersOnly {
        return vec![0.0; model.n()];
    }
    state
        .alloc
        .iter()
        .zip(&ws.neighborhoods)
        .map(|(&hi, eta)| {
            if hi == h {
                0.0
            } else {
                membership_gain(&state.params.stick_logits, eta, hi, h)
            }
        })
        .collect()
}

/// Coordinate `l` of location `h` given everything else, with `gains` from
/// [`location_gains`].
pub fn location_coord(model: &Model, state: &ModelState, h: usize, l: usize, gains: &[f64]) -> LocationCond {
    let spec = &model.hyper.distance;
    let kind = spec.kinds[l];
    let w_l = spec.weights[l];
    let has_members = state.alloc.contains(&h);
    if w_l == 0.0 || spec.dstar >= 1.0 || (!has_members && gains.iter().all(|g| *g == 0.0)) {
        return LocationCond::Prior(kind);
    }
    let current = &state.params.locations[h];
    match kind {
        FixedKind::Ordinal { levels } | FixedKind::Nominal { categories: levels } => {
            let values: Vec<f64> = (1..=levels).map(f64::from).collect();
            let mut cand = current.clone();
            let log_weights = values
                .iter()
                .map(|&v| {
                    cand[l] = v;
                    let mut lw = 0.0;
                    for (i, f) in model.fixed.iter().enumerate() {
                        let member = gower::within(gower::distance_unchecked(f, &cand, spec), spec.dstar);
                        if state.alloc[i] == h {
                            if !member {
                                return f64::NEG_INFINITY;
                            }
                        } else if member {
                            lw += gains[i];
                        }
                    }
                    lw
                })
                .collect();
            LocationCond::Discrete {
                values,
                dist: Discrete { log_weights },
            }
        }
        FixedKind::Continuous { min, max } => {
            let range = max - min;
            let mut lo = min;
            let mut hi = max;
            let mut events: Vec<(f64, f64)> = Vec::new();
            let mut pending: Vec<(f64, f64, f64)> = Vec::new();
            for (i, f) in model.fixed.iter().enumerate() {
                let is_member = state.alloc[i] == h;
                if !is_member && gains[i] == 0.0 {
                    continue;
                }
                let rest: f64 = (0..spec.weights.len())
                    .filter(|&m| m != l && spec.weights[m] > 0.0)
                    .map(|m| spec.weights[m] * spec.kinds[m].component(f[m], current[m]))
                    .sum();
                let slack = (spec.dstar - rest) / w_l;
                if slack < 0.0 {
                    if is_member {
                        return LocationCond::Continuous { segments: vec![] };
                    }
                    continue;
                }
                let centre = f[l].clamp(min, max);
                let half = range * slack;
                if is_member {
                    let shrunk = half * (1.0 - 1e-12);
                    lo = lo.max(centre - shrunk);
                    hi = hi.min(centre + shrunk);
                } else {
                    pending.push((centre - half, centre + half, gains[i]));
                }
            }
            if lo > hi {
                return LocationCond::Continuous { segments: vec![] };
            }
            for (a, b, g) in pending {
                let (a, b) = (a.max(lo), b.min(hi));
                if a < b {
                    events.push((a, g));
                    events.push((b, -g));
                }
            }
            events.sort_by(|x, y| x.0.total_cmp(&y.0));
            let mut segments = Vec::with_capacity(events.len() + 1);
            let mut pos = lo;
            let mut cur = 0.0;
            for (at, delta) in events {
                if at > pos {
                    segments.push(Segment {
                        lo: pos,
                        hi: at,
                        log_weight: cur,
                    });
                    pos = at;
                }
                cur += delta;
            }
            segments.push(Segment {
                lo: pos,
                hi,
                log_weight: cur,
            });
            LocationCond::Continuous { segments }
        }
    }
}

/// Rows allocated to each component.
pub fn members(n_comp: usize, alloc: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); n_comp];
    for (i, &h) in alloc.iter().enumerate() {
        out[h].push(i);
    }
    out
}

pub(crate) fn beta_column_raw(
    model: &Model,
    state: &ModelState,
    ws: &Workspace,
    rows: &[usize],
    beta_h: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    r: usize,
) -> MvnCond {
    let k = model.k();
    let prm = &state.params;
    let mut precision = DMatrix::zeros(k, k);
    let mut b = DVector::zeros(k);
    for m in 0..k {
        precision[(m, m)] = 1.0 / prm.tau2[m];
        b[m] = prm.beta0[(m, r)] / prm.tau2[m];
    }
    let orr = omega[(r, r)];
    for &i in rows {
        let d = &ws.design[i];
        let mean = model.kernel_mean(d, beta_h);
        let (cm, _) = conditional_normal(&state.latent[i], &mean, omega, r);
        // Offset of the conditional mean that does not involve column r.
        let target = state.latent[i][r] - (cm - mean[r]);
        for a in 0..k {
            b[a] += orr * d[a] * target;
            for c in 0..k {
                precision[(a, c)] += orr * d[a] * d[c];
            }
        }
    }
    MvnCond { precision, b }
}

/// Column `r` of `beta_h` given the other columns.
pub fn beta_column(model: &Model, state: &ModelState, ws: &Workspace, h: usize, r: usize) -> MvnCond {
    let rows = members(model.n_components(), &state.alloc).swap_remove(h);
    beta_column_raw(model, state, ws, &rows, &state.params.beta[h], &ws.kernels[h].precision, r)
}

pub(crate) fn sigma_raw(model: &Model, state: &ModelState, ws: &Workspace, rows: &[usize], beta_h: &DMatrix<f64>) -> InvWishartCond {
    let p = model.p();
    let mut scale = state.params.scale.clone();
    for &i in rows {
        let mean = model.kernel_mean(&ws.design[i], beta_h);
        for a in 0..p {
            let ra = state.latent[i][a] - mean[a];
            for c in 0..p {
                scale[(a, c)] += ra * (state.latent[i][c] - mean[c]);
            }
        }
    }
    InvWishartCond {
        df: model.hyper.nu + rows.len() as f64,
        scale,
    }
}

pub fn sigma(model: &Model, state: &ModelState, ws: &Workspace, h: usize) -> InvWishartCond {
    let rows = members(model.n_components(), &state.alloc).swap_remove(h);
    sigma_raw(model, state, ws, &rows, &state.params.beta[h])
}

pub(crate) fn psi_raw(model: &Model, state: &ModelState, rows: &[usize], j: usize) -> DirichletCond {
    let mut conc = model.hyper.dirichlet[j].clone();
    for &i in rows {
        conc[state.nominal[i][j] as usize - 1] += 1.0;
    }
    DirichletCond { conc }
}

pub fn psi(model: &Model, state: &ModelState, h: usize, j: usize) -> DirichletCond {
    let rows = members(model.n_components(), &state.alloc).swap_remove(h);
    psi_raw(model, state, &rows, j)
}

/// Element `(m, r)` of `beta0`.
pub fn beta0(model: &Model, state: &ModelState, m: usize, r: usize) -> NormalCond {
    let prm = &state.params;
    let n = model.n_components() as f64;
    let t = prm.tau2[m];
    let var = 1.0 / (1.0 / model.hyper.h + n / t);
    let sum: f64 = prm.beta.iter().map(|b| b[(m, r)]).sum();
    NormalCond { mean: var * sum / t, var }
}

pub fn tau2(model: &Model, state: &ModelState, m: usize) -> TruncInvGamma {
    let prm = &state.params;
    let h = &model.hyper;
    let p = model.p();
    let mut ss = 0.0;
    for b in &prm.beta {
        for r in 0..p {
            ss += (b[(m, r)] - prm.beta0[(m, r)]).powi(2);
        }
    }
    TruncInvGamma {
        shape: h.a_tau + (model.n_components() * p) as f64 / 2.0,
        scale: h.b_tau + 0.5 * ss,
        max: h.tau2_bound(),
    }
}

pub fn scale(model: &Model, ws: &Workspace) -> Result<WishartCond, LinalgError> {
    let h = &model.hyper;
    let mut inv = dist::spd_inverse(&h.b_s_matrix(), "b_s")?;
    for k in &ws.kernels {
        inv += &k.precision;
    }
    Ok(WishartCond {
        df: model.n_components() as f64 * h.nu + h.a_s,
        scale: dist::spd_inverse(&inv, "scale posterior")?,
    })
}

pub fn alpha(model: &Model, state: &ModelState) -> GammaCond {
    let h = &model.hyper;
    let s: f64 = state.params.stick_logits.iter().map(|x| ln_stick_rest(*x)).sum();
    GammaCond {
        shape: h.a_alpha + model.n_components() as f64,
        rate: h.b_alpha - s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DesignConfig, MixedDataset, Role, Schema, VariableSpec};
    use crate::gower::DistanceSpec;
    use crate::model::tests::tiny_model;
    use crate::model::{default_hyperpriors_with, init_state};
    use crate::rng::{StreamKey, Tag};

    fn setup(seed: u64) -> (Model, ModelState, Workspace) {
        let m = tiny_model(3, 0.5);
        let s = init_state(&m, seed).unwrap();
        let ws = Workspace::new(&m, &s).unwrap();
        (m, s, ws)
    }

    /// One continuous random variable, intercept-only design, one component.
    fn scalar_model(values: Vec<Option<f64>>) -> Model {
        let schema = Schema::new(vec![
            VariableSpec::continuous("z", Role::Random),
            VariableSpec::ordinal("f", Role::Fixed, 2),
        ])
        .unwrap();
        let n = values.len();
        let data = MixedDataset::from_standardized(schema, vec![values, vec![Some(1.0); n]], None).unwrap();
        let mut hyper = default_hyperpriors_with(&data, DistanceSpec::equal_weights(&data, 1.0));
        hyper.n_components = 1;
        Model::new(data, &DesignConfig::intercept_only(), hyper).unwrap()
    }

    #[test]
    fn empty_component_beta_is_base() {
        let (m, mut s, ws) = setup(1);
        s.alloc = vec![0; 4];
        let c = beta_column(&m, &s, &ws, 2, 1);
        let mean = c.mean().unwrap();
        for a in 0..m.k() {
            assert!((mean[a] - s.params.beta0[(a, 1)]).abs() < 1e-12);
            assert!((c.precision[(a, a)] - 1.0 / s.params.tau2[a]).abs() < 1e-12);
        }
        assert_eq!(c.precision[(0, 1)], 0.0);
    }

    #[test]
    fn conjugate_normal_mean_limit() {
        let m = scalar_model(vec![Some(2.0)]);
        let mut s = init_state(&m, 3).unwrap();
        s.params.tau2 = vec![1e8];
        s.params.beta0.fill(0.0);
        s.params.sigma[0] = nalgebra::DMatrix::from_element(1, 1, 1.0);
        let ws = Workspace::new(&m, &s).unwrap();
        let c = beta_column(&m, &s, &ws, 0, 0);
        let mean = c.mean().unwrap()[0];
        let var = 1.0 / c.precision[(0, 0)];
        assert!((mean - 2.0).abs() < 1e-7 && (var - 1.0).abs() < 1e-7);
    }

    #[test]
    fn beta_draw_moments_match_closed_form() {
        let m = tiny_model(1, 1.0);
        let s = init_state(&m, 5).unwrap();
        let ws = Workspace::new(&m, &s).unwrap();
        let c = beta_column(&m, &s, &ws, 0, 0);
        let mean = c.mean().unwrap();
        let cov = crate::dist::spd_inverse(&c.precision, "test").unwrap();
        let n = 100_000;
        let mut rng = StreamKey::new(1).stream(0, Tag::Beta, 0);
        let mut acc = DVector::zeros(2);
        let mut acc2 = DMatrix::zeros(2, 2);
        for _ in 0..n {
            let x = c.sample(&mut rng).unwrap();
            acc += &x;
            acc2 += &x * x.transpose();
        }
        let emp = &acc / n as f64;
        let emp_cov = &acc2 / n as f64 - &emp * emp.transpose();
        for a in 0..2 {
            let se = (cov[(a, a)] / n as f64).sqrt();
            assert!((emp[a] - mean[a]).abs() < 3.0 * se, "mean {a}");
            for b in 0..2 {
                // Sample covariance SE: sqrt((s_aa s_bb + s_ab^2) / n).
                let se = ((cov[(a, a)] * cov[(b, b)] + cov[(a, b)].powi(2)) / n as f64).sqrt();
                assert!((emp_cov[(a, b)] - cov[(a, b)]).abs() < 3.0 * se, "cov {a}{b}");
            }
        }
    }

    #[test]
    fn scalar_sigma_is_inverse_gamma() {
        let m = scalar_model(vec![Some(1.0), Some(-0.5), Some(2.0)]);
        let s = init_state(&m, 2).unwrap();
        let ws = Workspace::new(&m, &s).unwrap();
        let c = sigma(&m, &s, &ws, 0);
        let mean = s.params.beta[0][(0, 0)];
        let rss: f64 = [1.0, -0.5, 2.0].iter().map(|z| (z - mean).powi(2)).sum();
        let shape = (m.hyper.nu + 3.0) / 2.0;
        let scale = (s.params.scale[(0, 0)] + rss) / 2.0;
        let at = |x: f64| c.log_density(&DMatrix::from_element(1, 1, x));
        for x in [0.3, 1.0, 2.5] {
            let d = at(x) - at(1.7);
            let want = dist::log_inv_gamma_pdf(x, shape, scale) - dist::log_inv_gamma_pdf(1.7, shape, scale);
            assert!((d - want).abs() < 1e-10);
        }
    }

    #[test]
    fn psi_counts_substitute() {
        let (m, mut s, _) = setup(1);
        s.alloc = vec![0, 0, 0, 1];
        s.nominal = vec![vec![1], vec![1], vec![2], vec![2]];
        assert_eq!(psi(&m, &s, 0, 0).conc, vec![3.0, 2.0]);
        assert_eq!(psi(&m, &s, 2, 0).conc, vec![1.0, 1.0]);
    }

    #[test]
    fn dirichlet_posterior_mean() {
        let c = DirichletCond { conc: vec![4.0, 3.0] };
        let mut rng = StreamKey::new(3).stream(0, Tag::Psi, 0);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| c.sample(&mut rng)[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = 4.0 * 3.0 / (49.0 * 8.0);
        assert!((mean - 4.0 / 7.0).abs() < 3.0 * (var / n as f64).sqrt());
    }

    #[test]
    fn allocation_cases() {
        let (m, mut s, mut ws) = setup(2);
        ws.neighborhoods[0] = vec![1];
        let c = allocation(&m, &s, &ws, 0).unwrap();
        assert_eq!(c.probabilities(), vec![1.0]);

        // Identical atoms: the likelihood cancels.
        for h in 1..3 {
            s.params.beta[h] = s.params.beta[0].clone();
            s.params.sigma[h] = s.params.sigma[0].clone();
            s.params.psi[h] = s.params.psi[0].clone();
        }
        let ws = Workspace::new(&m, &s).unwrap();
        ws.neighborhoods.iter().enumerate().for_each(|(i, eta)| {
            let p = allocation(&m, &s, &ws, i).unwrap().probabilities();
            let want: Vec<f64> = log_local_weights(&s.params.stick_logits, eta).iter().map(|x| x.exp()).collect();
            for (a, b) in p.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        });

        let mut ws2 = ws.clone();
        ws2.neighborhoods[1].clear();
        assert!(matches!(allocation(&m, &s, &ws2, 1), Err(SamplerError::EmptyNeighborhood(1))));
    }

    #[test]
    fn allocation_matches_brute_force() {
        let (m, s, mut ws) = setup(4);
        ws.neighborhoods[2] = vec![0, 1, 2];
        let got = allocation(&m, &s, &ws, 2).unwrap().probabilities();
        let v: Vec<f64> = s.params.stick_logits.iter().map(|x| crate::model::stick_from_logit(*x)).collect();
        let weights = [v[0], (1.0 - v[0]) * v[1], (1.0 - v[0]) * (1.0 - v[1])];
        let mut d = vec![0.0; m.k()];
        m.design_row(2, &s.nominal[2], &mut d);
        let un: Vec<f64> = (0..3)
            .map(|h| {
                let mean = m.kernel_mean(&d, &s.params.beta[h]);
                let dens = dist::mvn_logpdf(&s.latent[2], &mean, &s.params.sigma[h]).unwrap().exp();
                weights[h] * dens * s.params.psi[h][0][s.nominal[2][0] as usize - 1]
            })
            .collect();
        let tot: f64 = un.iter().sum();
        for h in 0..3 {
            assert!((got[h] - un[h] / tot).abs() < 1e-12);
        }
    }

    #[test]
    fn stick_counts_hand_instance() {
        let alloc = [0, 2, 1, 2];
        let etas = vec![vec![0, 2], vec![0, 2], vec![1], vec![1, 2]];
        let (succ, fail) = stick_counts(3, &alloc, &etas);
        // Row 0: H=0 not last -> success for 0. Row 1: H=2 last, fails 0.
        // Row 2: H=1 is the only (last) member. Row 3: H=2 last, fails 1.
        assert_eq!(succ, vec![1, 0, 0]);
        assert_eq!(fail, vec![1, 1, 0]);
    }

    #[test]
    fn alpha_substitution() {
        let (mut m, mut s, _) = setup(1);
        m.hyper.n_components = 20;
        let v = 1.0 - (-0.5f64).exp();
        s.params.stick_logits = vec![crate::model::stick_logit(v); 20];
        let c = alpha(&m, &s);
        assert!((c.shape - 20.5).abs() < 1e-12 && (c.rate - 10.5).abs() < 1e-12);
    }

    #[test]
    fn beta0_prior_limit_and_tau_zero_residual() {
        let (m, mut s, _) = setup(1);
        s.params.tau2 = vec![1e300, 1e300];
        let c = beta0(&m, &s, 0, 0);
        assert!(c.mean.abs() < 1e-250 && (c.var - m.hyper.h).abs() < 1e-12);
        for h in 0..3 {
            s.params.beta[h] = s.params.beta0.clone();
        }
        let t = tau2(&m, &s, 1);
        assert_eq!(t.scale, m.hyper.b_tau);
        assert_eq!(t.shape, m.hyper.a_tau + 3.0);
        assert_eq!(t.max, 6.0);
    }

    #[test]
    fn nominal_ignores_kernel_when_design_does_not_read_it() {
        let base = tiny_model(3, 0.5);
        let design = DesignConfig::intercept_only();
        let m = Model::new(base.data.clone(), &design, base.hyper.clone()).unwrap();
        let s = init_state(&m, 1).unwrap();
        let ws = Workspace::new(&m, &s).unwrap();
        let p = nominal(&m, &s, &ws, 3, 0).probabilities();
        let psi = &s.params.psi[s.alloc[3]][0];
        assert!((p[0] - psi[0]).abs() < 1e-12 && (p[1] - psi[1]).abs() < 1e-12);
    }

    #[test]
    fn latent_single_ordinal_example() {
        let (m, s, ws) = setup(1);
        let c = latent(&m, &s, &ws, 1, 0);
        assert_eq!((c.lo, c.hi), (-3.0, 3.0));
        let c = latent(&m, &s, &ws, 2, 0);
        assert_eq!((c.lo, c.hi), (f64::NEG_INFINITY, f64::INFINITY));
    }

    #[test]
    fn location_draws_respect_members() {
        let (m, s, ws) = setup(6);
        for h in 0..3 {
            let gains = location_gains(&m, &s, &ws, h);
            for l in 0..2 {
                let c = location_coord(&m, &s, h, l, &gains);
                let mut rng = StreamKey::new(h as u64).stream(l as u64, Tag::Location, 0);
                for _ in 0..2000 {
                    let Some(v) = c.sample(&mut rng) else { continue };
                    let mut loc = s.params.locations[h].clone();
                    loc[l] = v;
                    for (i, f) in m.fixed.iter().enumerate() {
                        if s.alloc[i] == h {
                            let d = crate::gower::gower_distance(f, &loc, &m.hyper.distance).unwrap();
                            assert!(d <= m.hyper.distance.dstar, "h={h} l={l} v={v}");
                        }
                    }
                }
            }
        }
    }
}
