//! Hyperpriors, parameter state, initialization, invariant checks and the
//! complete-data joint density.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CompiledDesign, DataError, DesignConfig, Kind, Layout, MixedDataset};
use crate::dist::{self, LinalgError};
use crate::gower::{self, DistanceSpec, FixedKind, GowerError};
use crate::rng::{StreamKey, Tag};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Distance(#[from] GowerError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("invalid hyperpriors: {0}")]
    InvalidHyper(String),
    #[error("no location configuration covering every observation after {0} attempts")]
    InitFailure(usize),
    #[error("observation {0} has an empty neighborhood")]
    EmptyNeighborhood(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// How component locations are resampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LocationUpdate {
    /// Full conditional of the joint model, including the effect of a
    /// location on the stick weights of observations allocated elsewhere.
    #[default]
    Exact,
    /// Only the allocated members constrain the location (uniform over the
    /// region keeping every member within the radius).
    MembersOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperpriors {
    /// Global truncation `N`.
    pub n_components: usize,
    pub a_alpha: f64,
    pub b_alpha: f64,
    pub a_tau: f64,
    pub b_tau: f64,
    /// Upper truncation of every `tau2`; `None` for the untruncated prior.
    pub tau2_max: Option<f64>,
    /// Prior variance of each element of `beta0`.
    pub h: f64,
    pub nu: f64,
    pub a_s: f64,
    /// Wishart scale of `S`, row-major `p x p`.
    pub b_s: Vec<Vec<f64>>,
    /// Dirichlet concentrations, one vector per nominal random variable.
    pub dirichlet: Vec<Vec<f64>>,
    /// Interior cutoffs `gamma_1 < ... < gamma_{k-1}`, one vector per
    /// ordinal random variable.
    pub cutoffs: Vec<Vec<f64>>,
    pub distance: DistanceSpec,
    #[serde(default)]
    pub location_update: LocationUpdate,
}

impl Hyperpriors {
    pub fn b_s_matrix(&self) -> DMatrix<f64> {
        let p = self.b_s.len();
        DMatrix::from_fn(p, p, |r, c| self.b_s[r][c])
    }

    pub fn tau2_bound(&self) -> f64 {
        self.tau2_max.unwrap_or(f64::INFINITY)
    }
}

/// Interior cutoffs equally spaced on `[-3, 3]`; a binary variable gets 0.
pub fn default_cutoffs(levels: u32) -> Vec<f64> {
    match levels {
        0 | 1 => vec![],
        2 => vec![0.0],
        k => (0..k - 1).map(|l| -3.0 + 6.0 * l as f64 / (k - 2) as f64).collect(),
    }
}

/// Target marginal variance of each latent coordinate.
pub const DEFAULT_V: f64 = 2.25;
/// Default fraction of other observations sharing a neighborhood.
pub const DEFAULT_NEIGHBOR_FRACTION: f64 = 0.2;

/// Default hyperpriors. The distance uses equal weights over the fixed
/// variables with `d*` set so that on average 20% of other observations
/// fall within it; with no fixed variables `d* = 1`.
pub fn default_hyperpriors(data: &MixedDataset) -> Hyperpriors {
    let distance = if data.schema().layout().fixed.is_empty() {
        DistanceSpec {
            weights: vec![],
            kinds: vec![],
            dstar: 1.0,
        }
    } else {
        let spec = DistanceSpec::equal_weights(data, 1.0);
        let dstar = gower::solve_dstar(data, &spec, DEFAULT_NEIGHBOR_FRACTION);
        DistanceSpec { dstar, ..spec }
    };
    default_hyperpriors_with(data, distance)
}

pub fn default_hyperpriors_with(data: &MixedDataset, distance: DistanceSpec) -> Hyperpriors {
    let schema = data.schema();
    let layout = schema.layout();
    let p = layout.latent_dim();
    let v = DEFAULT_V;
    let a_tau = 3.0;
    let nu = p as f64 + 2.0;
    let a_s = p as f64 + 2.0;
    let diag = (nu - p as f64 - 1.0) / (3.0 * a_s) * v;
    let b_s = (0..p)
        .map(|r| (0..p).map(|c| if r == c { diag } else { 0.0 }).collect())
        .collect();
    Hyperpriors {
        n_components: 50,
        a_alpha: 0.5,
        b_alpha: 0.5,
        a_tau,
        b_tau: (a_tau - 1.0) * v / 3.0,
        tau2_max: Some(6.0),
        h: v / 3.0,
        nu,
        a_s,
        b_s,
        dirichlet: layout
            .nominal
            .iter()
            .map(|&j| vec![1.0; schema.variables[j].kind.level_count().unwrap() as usize])
            .collect(),
        cutoffs: layout
            .ordinal
            .iter()
            .map(|&j| default_cutoffs(schema.variables[j].kind.level_count().unwrap()))
            .collect(),
        distance,
        location_update: LocationUpdate::Exact,
    }
}

/// Component parameters and global hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// Stick proportions `V_h`, stored as logits so that both `ln V` and
    /// `ln(1 - V)` stay accurate when `V` is close to 0 or 1.
    pub stick_logits: Vec<f64>,
    /// Locations `Gamma_h` in fixed-variable space (model scale).
    pub locations: Vec<Vec<f64>>,
    /// `k x p` regression matrices.
    pub beta: Vec<DMatrix<f64>>,
    /// `p x p` kernel covariances.
    pub sigma: Vec<DMatrix<f64>>,
    /// `psi[h][j][c]`: probability of category `c + 1` of nominal `j`.
    pub psi: Vec<Vec<Vec<f64>>>,
    pub alpha: f64,
    pub beta0: DMatrix<f64>,
    pub tau2: Vec<f64>,
    pub scale: DMatrix<f64>,
}

/// Full sampler state: parameters plus allocations and completions.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub params: Params,
    /// Component index (0-based) of each observation.
    pub alloc: Vec<usize>,
    /// `latent[i]` holds `(W_i, Z_i)`; observed `Z` entries equal the data.
    pub latent: Vec<Vec<f64>>,
    /// Current (observed or imputed) nominal levels, `nominal[i][j]` in
    /// `1..=d_j`.
    pub nominal: Vec<Vec<u32>>,
}

pub fn stick_from_logit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn stick_logit(v: f64) -> f64 {
    v.ln() - (-v).ln_1p()
}

/// `ln V` from the logit of `V`.
pub fn ln_stick(x: f64) -> f64 {
    -dist::softplus(-x)
}

/// `ln(1 - V)` from the logit of `V`.
pub fn ln_stick_rest(x: f64) -> f64 {
    -dist::softplus(x)
}

/// Log local stick weights of the members of a neighborhood (ascending
/// global indices). The last member receives the remainder.
pub fn log_local_weights(stick_logits: &[f64], members: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(members.len());
    let mut log_rest = 0.0;
    for (pos, &h) in members.iter().enumerate() {
        if pos + 1 == members.len() {
            out.push(log_rest);
        } else {
            out.push(log_rest + ln_stick(stick_logits[h]));
            log_rest += ln_stick_rest(stick_logits[h]);
        }
    }
    out
}

/// Data, design and hyperpriors of one fit.
#[derive(Debug, Clone)]
pub struct Model {
    pub data: MixedDataset,
    pub layout: Layout,
    pub design: CompiledDesign,
    pub hyper: Hyperpriors,
    /// Fixed-variable vectors of each row.
    pub fixed: Vec<Vec<f64>>,
    pub ordinal_levels: Vec<u32>,
    pub nominal_categories: Vec<usize>,
    /// Nominal index of a dataset column, if it is a nominal random one.
    nominal_of_column: Vec<Option<usize>>,
    /// Whether the design reads nominal random variable `j`.
    pub design_reads_nominal: Vec<bool>,
}

impl Model {
    pub fn new(data: MixedDataset, design: &DesignConfig, hyper: Hyperpriors) -> Result<Self, ModelError> {
        let schema = data.schema();
        let layout = schema.layout();
        let compiled = design.compile(schema)?;
        let fixed: Vec<Vec<f64>> = (0..data.n_rows()).map(|i| data.fixed_vector(i)).collect();
        let ordinal_levels: Vec<u32> = layout
            .ordinal
            .iter()
            .map(|&j| schema.variables[j].kind.level_count().unwrap())
            .collect();
        let nominal_categories: Vec<usize> = layout
            .nominal
            .iter()
            .map(|&j| schema.variables[j].kind.level_count().unwrap() as usize)
            .collect();
        let mut nominal_of_column = vec![None; schema.len()];
        for (jn, &col) in layout.nominal.iter().enumerate() {
            nominal_of_column[col] = Some(jn);
        }
        let design_reads_nominal = layout.nominal.iter().map(|&c| compiled.references(c)).collect();
        let model = Model {
            data,
            layout,
            design: compiled,
            hyper,
            fixed,
            ordinal_levels,
            nominal_categories,
            nominal_of_column,
            design_reads_nominal,
        };
        model.check_hyper()?;
        Ok(model)
    }

    fn check_hyper(&self) -> Result<(), ModelError> {
        let h = &self.hyper;
        let p = self.p();
        let bad = |m: String| Err(ModelError::InvalidHyper(m));
        if h.n_components == 0 {
            return bad("n_components must be at least 1".into());
        }
        for (name, v) in [
            ("a_alpha", h.a_alpha),
            ("b_alpha", h.b_alpha),
            ("a_tau", h.a_tau),
            ("b_tau", h.b_tau),
            ("h", h.h),
            ("a_s", h.a_s),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if let Some(m) = h.tau2_max {
            if !(m > 0.0) {
                return bad(format!("tau2_max must be positive, got {m}"));
            }
        }
        if !(h.nu > p as f64 + 1.0) {
            return bad(format!("nu must exceed p + 1 = {}, got {}", p + 1, h.nu));
        }
        if h.a_s <= p as f64 - 1.0 {
            return bad(format!("a_s must exceed p - 1 = {}", p as f64 - 1.0));
        }
        if h.b_s.len() != p || h.b_s.iter().any(|r| r.len() != p) {
            return bad(format!("b_s must be {p} x {p}"));
        }
        dist::cholesky(&h.b_s_matrix(), "b_s")?;
        if h.dirichlet.len() != self.nominal_categories.len()
            || h.dirichlet
                .iter()
                .zip(&self.nominal_categories)
                .any(|(a, d)| a.len() != *d || a.iter().any(|x| !(*x > 0.0)))
        {
            return bad("dirichlet concentrations do not match the nominal variables".into());
        }
        if h.cutoffs.len() != self.ordinal_levels.len() {
            return bad("one cutoff vector per ordinal variable is required".into());
        }
        for (c, k) in h.cutoffs.iter().zip(&self.ordinal_levels) {
            if c.len() != *k as usize - 1 || c.windows(2).any(|w| !(w[0] < w[1])) || c.iter().any(|x| !x.is_finite()) {
                return bad(format!("cutoffs {c:?} invalid for {k} levels"));
            }
        }
        if h.distance.kinds.len() != self.layout.fixed.len() {
            return bad("distance metadata does not match the fixed variables".into());
        }
        h.distance.validate()?;
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.data.n_rows()
    }

    /// Latent dimension `p_o + p_c`.
    pub fn p(&self) -> usize {
        self.layout.latent_dim()
    }

    pub fn p_o(&self) -> usize {
        self.layout.ordinal.len()
    }

    pub fn p_n(&self) -> usize {
        self.layout.nominal.len()
    }

    /// Design length.
    pub fn k(&self) -> usize {
        self.design.len()
    }

    pub fn q(&self) -> usize {
        self.layout.fixed.len()
    }

    pub fn n_components(&self) -> usize {
        self.hyper.n_components
    }

    /// `(gamma_{l-1}, gamma_l]` for level `l` of ordinal `j`.
    pub fn cutoff_interval(&self, j: usize, level: u32) -> (f64, f64) {
        let c = &self.hyper.cutoffs[j];
        let l = level as usize;
        let lo = if l <= 1 { f64::NEG_INFINITY } else { c[l - 2] };
        let hi = if l >= c.len() + 1 { f64::INFINITY } else { c[l - 1] };
        (lo, hi)
    }

    /// Ordinal level implied by a latent value.
    pub fn level_of(&self, j: usize, w: f64) -> u32 {
        1 + self.hyper.cutoffs[j].partition_point(|g| *g < w) as u32
    }

    /// Observed ordinal level of row `i`, ordinal variable `j`.
    pub fn observed_level(&self, i: usize, j: usize) -> Option<u32> {
        self.data.level(i, self.layout.ordinal[j])
    }

    /// Whether latent coordinate `r` of row `i` is pinned to an observed
    /// continuous value.
    pub fn continuous_observed(&self, i: usize, r: usize) -> bool {
        r >= self.p_o() && !self.data.is_missing(i, self.layout.continuous[r - self.p_o()])
    }

    /// Truncation interval of latent coordinate `r` of row `i`.
    pub fn latent_interval(&self, i: usize, r: usize) -> (f64, f64) {
        if r < self.p_o() {
            if let Some(l) = self.observed_level(i, r) {
                return self.cutoff_interval(r, l);
            }
        }
        (f64::NEG_INFINITY, f64::INFINITY)
    }

    /// Design vector of row `i` given its current nominal levels.
    pub fn design_row(&self, i: usize, nominal: &[u32], out: &mut [f64]) {
        let lookup = |col: usize| match self.nominal_of_column[col] {
            Some(j) => Some(f64::from(nominal[j])),
            None => self.data.value(i, col),
        };
        self.design
            .fill(&lookup, out)
            .expect("design only reads fixed and nominal columns");
    }

    /// Design vector for an arbitrary fixed vector and nominal levels.
    pub fn design_for(&self, fixed: &[f64], nominal: &[u32]) -> Vec<f64> {
        let mut fixed_pos = vec![None; self.data.n_cols()];
        for (pos, &col) in self.layout.fixed.iter().enumerate() {
            fixed_pos[col] = Some(pos);
        }
        let lookup = |col: usize| match (self.nominal_of_column[col], fixed_pos[col]) {
            (Some(j), _) => Some(f64::from(nominal[j])),
            (None, Some(pos)) => Some(fixed[pos]),
            _ => None,
        };
        let mut out = vec![0.0; self.k()];
        self.design.fill(&lookup, &mut out).expect("design only reads fixed and nominal columns");
        out
    }

    /// Kernel mean `D beta_h` as a length-`p` vector.
    pub fn kernel_mean(&self, d: &[f64], beta: &DMatrix<f64>) -> Vec<f64> {
        (0..self.p())
            .map(|r| d.iter().enumerate().map(|(m, x)| x * beta[(m, r)]).sum())
            .collect()
    }

    pub fn neighborhood(&self, f: &[f64], locations: &[Vec<f64>]) -> Vec<usize> {
        gower::neighborhood(f, locations, &self.hyper.distance)
    }

    /// Uniform prior draw of one location coordinate.
    pub fn prior_location_coord<R: Rng + ?Sized>(&self, rng: &mut R, l: usize) -> f64 {
        match self.hyper.distance.kinds[l] {
            FixedKind::Ordinal { levels } => f64::from(rng.random_range(1..=levels)),
            FixedKind::Nominal { categories } => f64::from(rng.random_range(1..=categories)),
            FixedKind::Continuous { min, max } => min + (max - min) * rng.random::<f64>(),
        }
    }

    pub fn log_location_prior(&self, loc: &[f64]) -> f64 {
        self.hyper
            .distance
            .kinds
            .iter()
            .zip(loc)
            .map(|(k, v)| match *k {
                FixedKind::Ordinal { levels } => {
                    if v.fract() == 0.0 && *v >= 1.0 && *v <= f64::from(levels) {
                        -f64::from(levels).ln()
                    } else {
                        f64::NEG_INFINITY
                    }
                }
                FixedKind::Nominal { categories } => {
                    if v.fract() == 0.0 && *v >= 1.0 && *v <= f64::from(categories) {
                        -f64::from(categories).ln()
                    } else {
                        f64::NEG_INFINITY
                    }
                }
                FixedKind::Continuous { min, max } => {
                    if *v >= min && *v <= max {
                        -(max - min).ln()
                    } else {
                        f64::NEG_INFINITY
                    }
                }
            })
            .sum()
    }

    /// Current values of row `i` on the model scale, with completions from
    /// `state` in place of missing cells.
    pub fn completed_row(&self, state: &ModelState, i: usize) -> Vec<f64> {
        let mut row: Vec<f64> = (0..self.data.n_cols())
            .map(|c| self.data.value(i, c).unwrap_or(f64::NAN))
            .collect();
        for (j, &col) in self.layout.ordinal.iter().enumerate() {
            row[col] = f64::from(self.level_of(j, state.latent[i][j]));
        }
        for (j, &col) in self.layout.continuous.iter().enumerate() {
            row[col] = state.latent[i][self.p_o() + j];
        }
        for (j, &col) in self.layout.nominal.iter().enumerate() {
            row[col] = f64::from(state.nominal[i][j]);
        }
        row
    }

    /// A copy of the dataset with every missing cell filled from `state`.
    pub fn completed_dataset(&self, state: &ModelState) -> MixedDataset {
        let mut out = self.data.clone();
        for i in 0..self.n() {
            let row = self.completed_row(state, i);
            for c in 0..self.data.n_cols() {
                if out.is_missing(i, c) {
                    out.set_observed(i, c, row[c]).expect("completion respects the schema");
                }
            }
        }
        out
    }
}

/// Draws every parameter from its prior. Locations are redrawn until every
/// observation has a nonempty neighborhood (at most `retries` times).
pub fn sample_prior_params<R: Rng + ?Sized>(
    model: &Model,
    rng: &mut R,
    retries: usize,
) -> Result<Params, ModelError> {
    let h = &model.hyper;
    let (n_comp, k, p) = (h.n_components, model.k(), model.p());
    let alpha = dist::gamma_shape_rate(rng, h.a_alpha, h.b_alpha);
    let stick_logits = (0..n_comp).map(|_| dist::beta_logit(rng, 1.0, alpha)).collect();
    let mut locations = Vec::new();
    let mut covered = false;
    for _ in 0..retries.max(1) {
        locations = (0..n_comp)
            .map(|_| (0..model.q()).map(|l| model.prior_location_coord(rng, l)).collect())
            .collect();
        if model.fixed.iter().all(|f| !model.neighborhood(f, &locations).is_empty()) {
            covered = true;
            break;
        }
    }
    if !covered {
        return Err(ModelError::InitFailure(retries));
    }
    let beta0 = DMatrix::from_fn(k, p, |_, _| h.h.sqrt() * standard_normal(rng));
    let tau2: Vec<f64> = (0..k)
        .map(|_| dist::truncated_inv_gamma(rng, h.a_tau, h.b_tau, h.tau2_bound()))
        .collect();
    let scale = dist::wishart(rng, h.a_s, &h.b_s_matrix())?;
    let mut beta = Vec::with_capacity(n_comp);
    let mut sigma = Vec::with_capacity(n_comp);
    let mut psi = Vec::with_capacity(n_comp);
    for _ in 0..n_comp {
        beta.push(DMatrix::from_fn(k, p, |m, r| beta0[(m, r)] + tau2[m].sqrt() * standard_normal(rng)));
        sigma.push(dist::inv_wishart(rng, h.nu, &scale)?);
        psi.push(h.dirichlet.iter().map(|a| dist::dirichlet(rng, a)).collect());
    }
    Ok(Params {
        stick_logits,
        locations,
        beta,
        sigma,
        psi,
        alpha,
        beta0,
        tau2,
        scale,
    })
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    StandardNormal.sample(rng)
}

const INIT_RETRIES: usize = 200;

/// Initial state: hyperparameters at prior means, sticks and atoms from the
/// base distributions, locations from their prior with repair of uncovered
/// observations, uniform allocations within neighborhoods, hot-deck starts
/// for missing cells and latent values drawn from the kernel of the
/// allocated component.
pub fn init_state(model: &Model, seed: u64) -> Result<ModelState, ModelError> {
    let key = StreamKey::new(seed);
    let mut rng = key.stream(0, Tag::Init, 0);
    let h = &model.hyper;
    let (n_comp, k, p, n) = (h.n_components, model.k(), model.p(), model.n());

    let alpha = h.a_alpha / h.b_alpha;
    let stick_logits: Vec<f64> = (0..n_comp).map(|_| dist::beta_logit(&mut rng, 1.0, alpha)).collect();
    let beta0 = DMatrix::zeros(k, p);
    let tau_mean = h.b_tau / (h.a_tau - 1.0);
    let tau2 = vec![tau_mean.min(h.tau2_bound()); k];
    let scale = h.b_s_matrix() * h.a_s;
    let mut beta = Vec::with_capacity(n_comp);
    let mut sigma = Vec::with_capacity(n_comp);
    let mut psi = Vec::with_capacity(n_comp);
    for _ in 0..n_comp {
        beta.push(DMatrix::from_fn(k, p, |m, r| beta0[(m, r)] + tau2[m].sqrt() * standard_normal(&mut rng)));
        sigma.push(dist::inv_wishart(&mut rng, h.nu, &scale)?);
        psi.push(h.dirichlet.iter().map(|a| dist::dirichlet(&mut rng, a)).collect::<Vec<_>>());
    }
    let locations = init_locations(model, &mut rng)?;

    let alloc: Vec<usize> = model
        .fixed
        .iter()
        .map(|f| {
            let eta = model.neighborhood(f, &locations);
            eta[rng.random_range(0..eta.len())]
        })
        .collect();

    let nominal: Vec<Vec<u32>> = (0..n)
        .map(|i| {
            model
                .layout
                .nominal
                .iter()
                .enumerate()
                .map(|(j, &col)| match model.data.level(i, col) {
                    Some(l) => l,
                    None => hot_deck_level(model, col, model.nominal_categories[j] as u32, &mut rng),
                })
                .collect()
        })
        .collect();

    let mut latent = vec![vec![0.0; p]; n];
    let mut d = vec![0.0; k];
    for i in 0..n {
        model.design_row(i, &nominal[i], &mut d);
        let mean = model.kernel_mean(&d, &beta[alloc[i]]);
        let s = &sigma[alloc[i]];
        for r in 0..p {
            latent[i][r] = if r >= model.p_o() {
                match model.data.value(i, model.layout.continuous[r - model.p_o()]) {
                    Some(z) => z,
                    None => mean[r] + s[(r, r)].sqrt() * standard_normal(&mut rng),
                }
            } else {
                let (lo, hi) = model.latent_interval(i, r);
                dist::truncated_normal(&mut rng, mean[r], s[(r, r)], lo, hi)
            };
        }
    }

    Ok(ModelState {
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
    })
}

fn hot_deck_level<R: Rng + ?Sized>(model: &Model, col: usize, k: u32, rng: &mut R) -> u32 {
    let observed: Vec<u32> = (0..model.n()).filter_map(|i| model.data.level(i, col)).collect();
    if observed.is_empty() {
        rng.random_range(1..=k)
    } else {
        observed[rng.random_range(0..observed.len())]
    }
}

fn init_locations<R: Rng + ?Sized>(model: &Model, rng: &mut R) -> Result<Vec<Vec<f64>>, ModelError> {
    let n_comp = model.n_components();
    let mut locations: Vec<Vec<f64>> = (0..n_comp)
        .map(|_| (0..model.q()).map(|l| model.prior_location_coord(rng, l)).collect())
        .collect();
    for _ in 0..INIT_RETRIES {
        let uncovered: Vec<usize> = (0..model.n())
            .filter(|&i| model.neighborhood(&model.fixed[i], &locations).is_empty())
            .collect();
        if uncovered.is_empty() {
            return Ok(locations);
        }
        // Move a component that covers nobody onto an uncovered row; if all
        // components cover someone, move a random one.
        let idle: Vec<usize> = (0..n_comp)
            .filter(|&h| {
                model
                    .fixed
                    .iter()
                    .all(|f| !gower::within(gower::gower_distance(f, &locations[h], &model.hyper.distance).unwrap_or(1.0), model.hyper.distance.dstar))
            })
            .collect();
        let target = uncovered[rng.random_range(0..uncovered.len())];
        let h = if idle.is_empty() {
            rng.random_range(0..n_comp)
        } else {
            idle[rng.random_range(0..idle.len())]
        };
        locations[h] = model.fixed[target].clone();
    }
    Err(ModelError::InitFailure(INIT_RETRIES))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    EmptyNeighborhood { row: usize },
    AllocationOutsideNeighborhood { row: usize, component: usize },
    LatentIntervalViolation { row: usize, coord: usize },
    ObservedValueChanged { row: usize, coord: usize },
    ImputedLevelOutOfRange { row: usize, var: usize },
    ObservedLevelChanged { row: usize, var: usize },
    StickOutOfRange { component: usize },
    SimplexViolation { component: usize, var: usize },
    NotPositiveDefinite { component: Option<usize> },
    TauOutOfRange { coef: usize },
    AlphaNotPositive,
    NonFinite(&'static str),
}

/// Checks every state invariant; an empty list means the state is valid.
pub fn validate(model: &Model, state: &ModelState) -> Vec<Violation> {
    let mut out = Vec::new();
    let prm = &state.params;
    for i in 0..model.n() {
        let eta = model.neighborhood(&model.fixed[i], &prm.locations);
        if eta.is_empty() {
            out.push(Violation::EmptyNeighborhood { row: i });
        } else if !eta.contains(&state.alloc[i]) {
            out.push(Violation::AllocationOutsideNeighborhood {
                row: i,
                component: state.alloc[i],
            });
        }
        for r in 0..model.p() {
            let x = state.latent[i][r];
            if !x.is_finite() {
                out.push(Violation::NonFinite("latent"));
                continue;
            }
            let (lo, hi) = model.latent_interval(i, r);
            if !(x > lo && x <= hi) {
                out.push(Violation::LatentIntervalViolation { row: i, coord: r });
            }
            if model.continuous_observed(i, r) {
                let col = model.layout.continuous[r - model.p_o()];
                if model.data.value(i, col) != Some(x) {
                    out.push(Violation::ObservedValueChanged { row: i, coord: r });
                }
            }
        }
        for (j, &col) in model.layout.nominal.iter().enumerate() {
            let l = state.nominal[i][j];
            if l < 1 || l as usize > model.nominal_categories[j] {
                out.push(Violation::ImputedLevelOutOfRange { row: i, var: j });
            }
            if let Some(obs) = model.data.level(i, col) {
                if obs != l {
                    out.push(Violation::ObservedLevelChanged { row: i, var: j });
                }
            }
        }
    }
    for (h, x) in prm.stick_logits.iter().enumerate() {
        if !x.is_finite() {
            out.push(Violation::StickOutOfRange { component: h });
        }
    }
    for (h, comp) in prm.psi.iter().enumerate() {
        for (j, p) in comp.iter().enumerate() {
            if (p.iter().sum::<f64>() - 1.0).abs() > 1e-12 || p.iter().any(|x| *x < 0.0) {
                out.push(Violation::SimplexViolation { component: h, var: j });
            }
        }
    }
    for (h, s) in prm.sigma.iter().enumerate() {
        if !is_spd(s) {
            out.push(Violation::NotPositiveDefinite { component: Some(h) });
        }
    }
    if !is_spd(&prm.scale) {
        out.push(Violation::NotPositiveDefinite { component: None });
    }
    let bound = model.hyper.tau2_bound();
    for (m, t) in prm.tau2.iter().enumerate() {
        if !(*t > 0.0 && *t <= bound) {
            out.push(Violation::TauOutOfRange { coef: m });
        }
    }
    if !(prm.alpha > 0.0 && prm.alpha.is_finite()) {
        out.push(Violation::AlphaNotPositive);
    }
    if prm.beta.iter().any(|b| b.iter().any(|x| !x.is_finite())) || prm.beta0.iter().any(|x| !x.is_finite()) {
        out.push(Violation::NonFinite("beta"));
    }
    out
}

fn is_spd(m: &DMatrix<f64>) -> bool {
    let symmetric = (m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0);
    symmetric && nalgebra::Cholesky::new(m.clone()).is_some()
}

/// Log density of the complete-data joint model at `state`, up to a constant
/// that does not depend on the state. Terms are written out directly from
/// the model definition; it serves as an independent reference for the
/// full conditionals.
pub fn log_joint(model: &Model, state: &ModelState) -> f64 {
    let h = &model.hyper;
    let prm = &state.params;
    let (k, p) = (model.k(), model.p());
    let mut lp = dist::log_gamma_pdf(prm.alpha, h.a_alpha, h.b_alpha);
    for x in &prm.stick_logits {
        lp += dist::log_beta_pdf_logit(*x, 1.0, prm.alpha);
    }
    for loc in &prm.locations {
        lp += model.log_location_prior(loc);
    }
    for m in 0..k {
        for r in 0..p {
            lp += dist::normal_logpdf(prm.beta0[(m, r)], 0.0, h.h);
        }
        let t = prm.tau2[m];
        lp += if t <= h.tau2_bound() {
            dist::log_inv_gamma_pdf(t, h.a_tau, h.b_tau)
        } else {
            f64::NEG_INFINITY
        };
    }
    lp += dist::log_wishart_pdf(&prm.scale, h.a_s, &h.b_s_matrix()).unwrap_or(f64::NEG_INFINITY);
    for c in 0..h.n_components {
        for m in 0..k {
            for r in 0..p {
                lp += dist::normal_logpdf(prm.beta[c][(m, r)], prm.beta0[(m, r)], prm.tau2[m]);
            }
        }
        lp += dist::log_inv_wishart_pdf(&prm.sigma[c], h.nu, &prm.scale).unwrap_or(f64::NEG_INFINITY);
        for (j, a) in h.dirichlet.iter().enumerate() {
            lp += dist::log_dirichlet_pdf(&prm.psi[c][j], a);
        }
    }
    let mut d = vec![0.0; k];
    for i in 0..model.n() {
        let eta = model.neighborhood(&model.fixed[i], &prm.locations);
        let hi = state.alloc[i];
        let Some(pos) = eta.iter().position(|x| *x == hi) else {
            return f64::NEG_INFINITY;
        };
        // Stick weight of the allocated component, written out directly.
        for &prev in &eta[..pos] {
            lp += ln_stick_rest(prm.stick_logits[prev]);
        }
        if pos + 1 < eta.len() {
            lp += ln_stick(prm.stick_logits[hi]);
        }
        for r in 0..model.p_o() {
            let (lo, up) = model.latent_interval(i, r);
            let x = state.latent[i][r];
            if !(x > lo && x <= up) {
                return f64::NEG_INFINITY;
            }
        }
        model.design_row(i, &state.nominal[i], &mut d);
        let mean = model.kernel_mean(&d, &prm.beta[hi]);
        lp += dist::mvn_logpdf(&state.latent[i], &mean, &prm.sigma[hi]).unwrap_or(f64::NEG_INFINITY);
        for j in 0..model.p_n() {
            lp += prm.psi[hi][j][state.nominal[i][j] as usize - 1].ln();
        }
    }
    lp
}

/// Checks that a state has the dimensions implied by the model.
pub fn check_dimensions(model: &Model, state: &ModelState) -> Result<(), ModelError> {
    let prm = &state.params;
    let (nc, k, p, n) = (model.n_components(), model.k(), model.p(), model.n());
    let ok = prm.stick_logits.len() == nc
        && prm.locations.len() == nc
        && prm.locations.iter().all(|l| l.len() == model.q())
        && prm.beta.len() == nc
        && prm.beta.iter().all(|b| b.shape() == (k, p))
        && prm.sigma.len() == nc
        && prm.sigma.iter().all(|s| s.shape() == (p, p))
        && prm.psi.len() == nc
        && prm.psi.iter().all(|c| {
            c.len() == model.p_n() && c.iter().zip(&model.nominal_categories).all(|(v, d)| v.len() == *d)
        })
        && prm.beta0.shape() == (k, p)
        && prm.tau2.len() == k
        && prm.scale.shape() == (p, p)
        && state.alloc.len() == n
        && state.alloc.iter().all(|h| *h < nc)
        && state.latent.len() == n
        && state.latent.iter().all(|l| l.len() == p)
        && state.nominal.len() == n
        && state.nominal.iter().all(|x| x.len() == model.p_n());
    if ok {
        Ok(())
    } else {
        Err(ModelError::Checkpoint("state dimensions do not match the model".into()))
    }
}

/// Kind of a random column, used by callers that need per-variable metadata.
pub fn random_kind(model: &Model, col: usize) -> Kind {
    model.data.schema().variables[col].kind
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::{Role, Schema, VariableSpec};

    /// n = 4, one ordinal (k = 3), one continuous, one binary nominal random
    /// variable; fixed variables: one ordinal (k = 3) and one continuous.
    pub(crate) fn tiny_model(n_components: usize, dstar: f64) -> Model {
        let schema = Schema::new(vec![
            VariableSpec::ordinal("y", Role::Random, 3),
            VariableSpec::continuous("z", Role::Random),
            VariableSpec::nominal("x", Role::Random, 2),
            VariableSpec::ordinal("f1", Role::Fixed, 3),
            VariableSpec::continuous("f2", Role::Fixed),
        ])
        .unwrap();
        let cols = vec![
            vec![Some(1.0), Some(2.0), None, Some(3.0)],
            vec![Some(-0.5), None, Some(0.7), Some(1.1)],
            vec![Some(1.0), Some(2.0), Some(2.0), None],
            vec![Some(1.0), Some(2.0), Some(3.0), Some(2.0)],
            vec![Some(0.0), Some(0.4), Some(1.0), Some(0.8)],
        ];
        let data = MixedDataset::from_standardized(schema.clone(), cols, None).unwrap();
        let design = DesignConfig {
            terms: vec![crate::data::DesignTerm::Intercept, crate::data::DesignTerm::dummy("x", 2)],
        };
        let mut hyper = default_hyperpriors_with(&data, DistanceSpec::equal_weights(&data, dstar));
        hyper.n_components = n_components;
        Model::new(data, &design, hyper).unwrap()
    }

    #[test]
    fn default_hyperprior_values() {
        let m = tiny_model(3, 0.5);
        let h = &m.hyper;
        assert_eq!((h.a_alpha, h.b_alpha), (0.5, 0.5));
        assert!((h.b_tau - 1.5).abs() < 1e-15);
        assert!((h.h - 0.75).abs() < 1e-15);
        assert_eq!(h.dirichlet, vec![vec![1.0, 1.0]]);
        assert_eq!(h.cutoffs, vec![vec![-3.0, 3.0]]);
        assert_eq!(h.tau2_max, Some(6.0));
        // Prior mean of each diagonal of Sigma_h: E[S] / (nu - p - 1) with
        // E[S] = a_S B_S.
        let es = h.b_s_matrix() * h.a_s;
        for r in 0..m.p() {
            assert!((es[(r, r)] / (h.nu - m.p() as f64 - 1.0) - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn cutoff_spacing() {
        assert_eq!(default_cutoffs(2), vec![0.0]);
        assert_eq!(default_cutoffs(3), vec![-3.0, 3.0]);
        assert_eq!(default_cutoffs(5), vec![-3.0, -1.0, 1.0, 3.0]);
    }

    #[test]
    fn levels_and_intervals() {
        let m = tiny_model(3, 0.5);
        assert_eq!(m.cutoff_interval(0, 1), (f64::NEG_INFINITY, -3.0));
        assert_eq!(m.cutoff_interval(0, 2), (-3.0, 3.0));
        assert_eq!(m.cutoff_interval(0, 3), (3.0, f64::INFINITY));
        assert_eq!(m.level_of(0, -3.0), 1);
        assert_eq!(m.level_of(0, -2.9), 2);
        assert_eq!(m.level_of(0, 3.0), 2);
        assert_eq!(m.level_of(0, 3.1), 3);
    }

    #[test]
    fn local_weights_sum_to_one() {
        let v: Vec<f64> = [0.3, 0.6, 0.2, 0.9].iter().map(|v| stick_logit(*v)).collect();
        for members in [vec![0, 1, 2, 3], vec![1, 3], vec![2]] {
            let w = log_local_weights(&v, &members);
            let s: f64 = w.iter().map(|x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-15, "{members:?}");
        }
        let w: Vec<f64> = log_local_weights(&v, &[1, 3]).iter().map(|x| x.exp()).collect();
        assert!((w[0] - 0.6).abs() < 1e-15 && (w[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn init_is_valid_and_deterministic() {
        let m = tiny_model(3, 0.5);
        let a = init_state(&m, 11).unwrap();
        let b = init_state(&m, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(validate(&m, &a), vec![]);
        assert!(log_joint(&m, &a).is_finite());

        let full = tiny_model(3, 1.0);
        let s = init_state(&full, 3).unwrap();
        assert_eq!(validate(&full, &s), vec![]);

        let one = tiny_model(1, 1.0);
        let s = init_state(&one, 5).unwrap();
        assert!(s.alloc.iter().all(|h| *h == 0));

        // A single narrow component cannot cover rows at opposite corners.
        let narrow = tiny_model(1, 0.3);
        assert!(matches!(init_state(&narrow, 5), Err(ModelError::InitFailure(_))));
    }

    #[test]
    fn validate_reports_injected_violations() {
        let m = tiny_model(3, 0.3);
        let mut s = init_state(&m, 2).unwrap();
        // Move row 0 to a component outside its neighborhood, if any.
        let eta = m.neighborhood(&m.fixed[0], &s.params.locations);
        if let Some(h) = (0..3).find(|h| !eta.contains(h)) {
            s.alloc[0] = h;
            assert_eq!(
                validate(&m, &s),
                vec![Violation::AllocationOutsideNeighborhood { row: 0, component: h }]
            );
        }
        let mut s = init_state(&m, 2).unwrap();
        s.latent[0][0] = 0.0; // observed Y = 1 requires W <= -3
        assert_eq!(validate(&m, &s), vec![Violation::LatentIntervalViolation { row: 0, coord: 0 }]);
    }

    #[test]
    fn base_draw_variance_matches_tau() {
        let m = tiny_model(3, 1.0);
        let key = StreamKey::new(1);
        let mut rng = key.stream(0, Tag::Prior, 0);
        let mut prm = sample_prior_params(&m, &mut rng, 10).unwrap();
        prm.beta0.fill(0.0);
        prm.tau2 = vec![0.5, 2.0];
        let n = 40_000;
        let mut acc = [[0.0; 2]; 2];
        for _ in 0..n {
            for mm in 0..2 {
                for r in 0..2 {
                    let x: f64 = prm.beta0[(mm, r)] + prm.tau2[mm].sqrt() * standard_normal(&mut rng);
                    acc[mm][r] += x * x;
                }
            }
        }
        for mm in 0..2 {
            for r in 0..2 {
                let var = acc[mm][r] / n as f64;
                assert!((var / prm.tau2[mm] - 1.0).abs() < 0.03);
            }
        }
    }

    #[test]
    fn completed_dataset_has_no_missing() {
        let m = tiny_model(3, 0.5);
        let s = init_state(&m, 4).unwrap();
        let c = m.completed_dataset(&s);
        for col in 0..c.n_cols() {
            assert_eq!(c.missing_count(col), 0);
        }
        assert_eq!(c.value(0, 1), m.data.value(0, 1));
    }
}
