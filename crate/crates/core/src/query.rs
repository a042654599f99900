//! Posterior functionals of the conditional mixture: joint and marginal
//! densities of the latent block, nominal and ordinal probabilities,
//! marginalization of unspecified nominal coordinates, per-draw summaries
//! and multiple-imputation combining rules.
//!
//! Every functional works on the model scale: continuous fixed values and
//! continuous targets are standardized, levels are 1-based.

use std::num::NonZeroUsize;
use std::sync::OnceLock;

use gauss_quad::GaussLegendre;
use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

use crate::dist::{self, LinalgError};
use crate::model::{log_local_weights, Model, Params};
use crate::rng::{StreamKey, Tag};

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("no component location lies within the radius of the query point")]
    EmptyNeighborhood,
    #[error("{0} posterior draws supplied, at least 10 are required")]
    TooFewDraws(usize),
    #[error("at least two estimates are required, got {0}")]
    TooFewEstimates(usize),
    #[error("invalid query: {0}")]
    Invalid(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Conditioning arguments of a functional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPoint {
    /// Fixed-variable vector (model scale).
    pub f: Vec<f64>,
    /// Nominal random levels; `None` entries are averaged out.
    #[serde(default)]
    pub x: Vec<Option<u32>>,
    /// Values of the latent coordinates the functional is evaluated at.
    #[serde(default)]
    pub target: Option<Vec<f64>>,
}

impl QueryPoint {
    pub fn new(f: Vec<f64>) -> Self {
        QueryPoint { f, x: Vec::new(), target: None }
    }

    pub fn with_x(mut self, x: Vec<Option<u32>>) -> Self {
        self.x = x;
        self
    }

    pub fn with_target(mut self, target: Vec<f64>) -> Self {
        self.target = Some(target);
        self
    }
}

/// A posterior functional evaluated per parameter draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Functional {
    /// Density of the full `(W, Z, X)` block at `target` and `x`.
    JointDensity,
    /// Density of the latent coordinates `coords` at `target` given `x`
    /// and `f`.
    Density { coords: Vec<usize> },
    /// `Pr(X = x | f)`; unspecified coordinates are summed out.
    PrX,
    /// `Pr(Y = levels | x, f)`.
    PrY { levels: Vec<u32> },
}

/// Monte Carlo settings for ordinal probabilities with three or more
/// ordinal variables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McOptions {
    /// Number of antithetic pairs.
    pub samples: usize,
    pub seed: u64,
}

impl Default for McOptions {
    fn default() -> Self {
        McOptions { samples: 20_000, seed: 1 }
    }
}

/// A functional value with a Monte Carlo standard error when it was
/// estimated by simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: Option<f64>,
}

impl Estimate {
    fn exact(value: f64) -> Self {
        Estimate { value, se: None }
    }
}

/// Component indices and mixture weights `p_l(f)` at a fixed vector.
pub fn local_mixture(model: &Model, params: &Params, f: &[f64]) -> Result<Vec<(usize, f64)>, QueryError> {
    if f.len() != model.q() {
        return Err(QueryError::Invalid(format!("f has {} values, expected {}", f.len(), model.q())));
    }
    let eta = model.neighborhood(f, &params.locations);
    if eta.is_empty() {
        return Err(QueryError::EmptyNeighborhood);
    }
    let w = log_local_weights(&params.stick_logits, &eta);
    Ok(eta.into_iter().zip(w.into_iter().map(f64::exp)).collect())
}

fn check_levels(model: &Model, x: &[u32]) -> Result<(), QueryError> {
    if x.len() != model.p_n() {
        return Err(QueryError::Invalid(format!("x has {} values, expected {}", x.len(), model.p_n())));
    }
    for (j, (&l, &d)) in x.iter().zip(&model.nominal_categories).enumerate() {
        if l < 1 || l as usize > d {
            return Err(QueryError::Invalid(format!("x[{j}] = {l} outside 1..={d}")));
        }
    }
    Ok(())
}

fn sub_matrix(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |a, b| m[(idx[a], idx[b])])
}

/// `f(w, z, x | f)`: the mixture of kernel densities times nominal masses.
pub fn joint_conditional_density(
    model: &Model,
    params: &Params,
    f: &[f64],
    x: &[u32],
    target: &[f64],
) -> Result<f64, QueryError> {
    check_levels(model, x)?;
    if target.len() != model.p() {
        return Err(QueryError::Invalid(format!("target has {} values, expected {}", target.len(), model.p())));
    }
    let d = model.design_for(f, x);
    let mut total = 0.0;
    for (h, w) in local_mixture(model, params, f)? {
        let mean = model.kernel_mean(&d, &params.beta[h]);
        let mut lp = dist::mvn_logpdf(target, &mean, &params.sigma[h])?;
        for (j, &l) in x.iter().enumerate() {
            lp += params.psi[h][j][l as usize - 1].ln();
        }
        total += w * lp.exp();
    }
    Ok(total)
}

/// `f(target on coords | x, f)`: mixture of the kernel marginals with
/// weights `p_l(f)`.
pub fn conditional_density(
    model: &Model,
    params: &Params,
    f: &[f64],
    x: &[u32],
    coords: &[usize],
    target: &[f64],
) -> Result<f64, QueryError> {
    check_levels(model, x)?;
    if coords.is_empty() || coords.len() != target.len() || coords.iter().any(|&c| c >= model.p()) {
        return Err(QueryError::Invalid("coordinates and target do not match the latent block".into()));
    }
    let d = model.design_for(f, x);
    let mut total = 0.0;
    for (h, w) in local_mixture(model, params, f)? {
        let mean = model.kernel_mean(&d, &params.beta[h]);
        let mu: Vec<f64> = coords.iter().map(|&c| mean[c]).collect();
        total += w * dist::mvn_logpdf(target, &mu, &sub_matrix(&params.sigma[h], coords))?.exp();
    }
    Ok(total)
}

/// `Pr(X = x | f)` for the specified coordinates of `x`; `None` entries
/// are summed out.
pub fn pr_x_given_f(model: &Model, params: &Params, f: &[f64], x: &[Option<u32>]) -> Result<f64, QueryError> {
    if x.len() != model.p_n() {
        return Err(QueryError::Invalid(format!("x has {} values, expected {}", x.len(), model.p_n())));
    }
    let mut total = 0.0;
    for (h, w) in local_mixture(model, params, f)? {
        let mut prod = w;
        for (j, l) in x.iter().enumerate() {
            if let Some(l) = *l {
                let d = model.nominal_categories[j];
                if l < 1 || l as usize > d {
                    return Err(QueryError::Invalid(format!("x[{j}] = {l} outside 1..={d}")));
                }
                prod *= params.psi[h][j][l as usize - 1];
            }
        }
        total += prod;
    }
    Ok(total)
}

fn gauss_legendre_64() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(NonZeroUsize::new(64).unwrap()))
}

/// `Pr(a < W <= b)` for a bivariate normal. The first coordinate is mapped
/// to its probability scale and the conditional probability of the second
/// is integrated with 64-node Gauss-Legendre quadrature.
pub fn bivariate_rectangle(mean: [f64; 2], cov: [[f64; 2]; 2], lo: [f64; 2], hi: [f64; 2]) -> f64 {
    let s1 = cov[0][0].sqrt();
    let s2 = cov[1][1].sqrt();
    let rho = (cov[0][1] / (s1 * s2)).clamp(-1.0, 1.0);
    let u_lo = dist::phi((lo[0] - mean[0]) / s1);
    let u_hi = dist::phi((hi[0] - mean[0]) / s1);
    if u_hi <= u_lo {
        return 0.0;
    }
    let sc = s2 * (1.0 - rho * rho).sqrt();
    let a2 = lo[1] - mean[1];
    let b2 = hi[1] - mean[1];
    let inner = |u: f64| {
        let t = dist::phi_inv(u);
        let m = rho * s2 * t;
        if sc == 0.0 {
            return if m > a2 && m <= b2 { 1.0 } else { 0.0 };
        }
        dist::phi((b2 - m) / sc) - dist::phi((a2 - m) / sc)
    };
    gauss_legendre_64().integrate(u_lo, u_hi, inner)
}

/// `Pr(Y = levels | x, f)`. Exact for one ordinal variable, quadrature for
/// two, antithetic Monte Carlo (with a standard error) beyond that. The
/// simulated draws are shared by every level combination, so the
/// estimates over all combinations sum to one.
pub fn pr_y_given_xf(
    model: &Model,
    params: &Params,
    f: &[f64],
    x: &[u32],
    levels: &[u32],
    mc: &McOptions,
) -> Result<Estimate, QueryError> {
    check_levels(model, x)?;
    let po = model.p_o();
    if levels.len() != po || po == 0 {
        return Err(QueryError::Invalid(format!("{} levels given for {po} ordinal variables", levels.len())));
    }
    for (j, (&l, &k)) in levels.iter().zip(&model.ordinal_levels).enumerate() {
        if l < 1 || l > k {
            return Err(QueryError::Invalid(format!("level {l} of ordinal {j} outside 1..={k}")));
        }
    }
    let bounds: Vec<(f64, f64)> = levels.iter().enumerate().map(|(j, &l)| model.cutoff_interval(j, l)).collect();
    let d = model.design_for(f, x);
    let mix = local_mixture(model, params, f)?;
    let idx: Vec<usize> = (0..po).collect();
    match po {
        1 => {
            let mut total = 0.0;
            for (h, w) in mix {
                let mu = model.kernel_mean(&d, &params.beta[h])[0];
                let s = params.sigma[h][(0, 0)].sqrt();
                let (lo, hi) = bounds[0];
                total += w * (dist::phi((hi - mu) / s) - dist::phi((lo - mu) / s));
            }
            Ok(Estimate::exact(total))
        }
        2 => {
            let mut total = 0.0;
            for (h, w) in mix {
                let mean = model.kernel_mean(&d, &params.beta[h]);
                let s = &params.sigma[h];
                total += w * bivariate_rectangle(
                    [mean[0], mean[1]],
                    [[s[(0, 0)], s[(0, 1)]], [s[(1, 0)], s[(1, 1)]]],
                    [bounds[0].0, bounds[1].0],
                    [bounds[0].1, bounds[1].1],
                );
            }
            Ok(Estimate::exact(total))
        }
        _ => {
            if mc.samples < 2 {
                return Err(QueryError::Invalid("at least two Monte Carlo pairs are required".into()));
            }
            let comps: Vec<(f64, Vec<f64>, DMatrix<f64>)> = mix
                .iter()
                .map(|&(h, w)| {
                    let mean = model.kernel_mean(&d, &params.beta[h]);
                    let l = dist::cholesky(&sub_matrix(&params.sigma[h], &idx), "kernel covariance")?.unpack();
                    Ok((w, mean[..po].to_vec(), l))
                })
                .collect::<Result<_, LinalgError>>()?;
            let inside = |w: &[f64]| w.iter().zip(&bounds).all(|(v, (lo, hi))| v > lo && v <= hi);
            let mut rng = StreamKey::new(mc.seed).stream(0, Tag::Query, 0);
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            let mut z = vec![0.0; po];
            let mut plus = vec![0.0; po];
            let mut minus = vec![0.0; po];
            for _ in 0..mc.samples {
                for v in z.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                let mut pair = 0.0;
                for (w, mu, l) in &comps {
                    for a in 0..po {
                        let dz: f64 = (0..=a).map(|b| l[(a, b)] * z[b]).sum();
                        plus[a] = mu[a] + dz;
                        minus[a] = mu[a] - dz;
                    }
                    let hits = f64::from(u8::from(inside(&plus))) + f64::from(u8::from(inside(&minus)));
                    pair += w * 0.5 * hits;
                }
                sum += pair;
                sum_sq += pair * pair;
            }
            let n = mc.samples as f64;
            let mean = sum / n;
            let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
            Ok(Estimate {
                value: mean,
                se: Some((var / n).sqrt()),
            })
        }
    }
}

/// `Pr(X_j = c | f) = sum_l p_l(f) psi^(j)_{l,c}` for every category `c`.
pub fn nominal_marginal(model: &Model, params: &Params, f: &[f64], j: usize) -> Result<Vec<f64>, QueryError> {
    let mut out = vec![0.0; model.nominal_categories[j]];
    for (h, w) in local_mixture(model, params, f)? {
        for (o, p) in out.iter_mut().zip(&params.psi[h][j]) {
            *o += w * p;
        }
    }
    Ok(out)
}

/// Averages `g(x)` over the unspecified coordinates of `partial`, each
/// weighted by its marginal `Pr(X_j = c | f)` independently of the others.
pub fn marginalize_nominal<G>(
    model: &Model,
    params: &Params,
    f: &[f64],
    partial: &[Option<u32>],
    mut g: G,
) -> Result<Estimate, QueryError>
where
    G: FnMut(&[u32]) -> Result<Estimate, QueryError>,
{
    if partial.len() != model.p_n() {
        return Err(QueryError::Invalid(format!("x has {} values, expected {}", partial.len(), model.p_n())));
    }
    let free: Vec<usize> = (0..partial.len()).filter(|&j| partial[j].is_none()).collect();
    let marginals: Vec<Vec<f64>> = free
        .iter()
        .map(|&j| nominal_marginal(model, params, f, j))
        .collect::<Result<_, _>>()?;
    let mut x: Vec<u32> = partial.iter().map(|l| l.unwrap_or(1)).collect();
    if free.is_empty() {
        return g(&x);
    }
    let mut counter = vec![0usize; free.len()];
    let mut value = 0.0;
    let mut var = None::<f64>;
    loop {
        let mut weight = 1.0;
        for (slot, (&j, &c)) in free.iter().zip(&counter).enumerate() {
            x[j] = c as u32 + 1;
            weight *= marginals[slot][c];
        }
        if weight > 0.0 {
            let e = g(&x)?;
            value += weight * e.value;
            if let Some(se) = e.se {
                *var.get_or_insert(0.0) += (weight * se).powi(2);
            }
        }
        let mut pos = 0;
        loop {
            if pos == free.len() {
                return Ok(Estimate {
                    value,
                    se: var.map(f64::sqrt),
                });
            }
            counter[pos] += 1;
            if counter[pos] < model.nominal_categories[free[pos]] {
                break;
            }
            counter[pos] = 0;
            pos += 1;
        }
    }
}

/// Evaluates a functional at one parameter draw.
pub fn evaluate(
    model: &Model,
    params: &Params,
    point: &QueryPoint,
    functional: &Functional,
    mc: &McOptions,
) -> Result<Estimate, QueryError> {
    let x = if point.x.is_empty() {
        vec![None; model.p_n()]
    } else {
        point.x.clone()
    };
    let target = || {
        point
            .target
            .as_deref()
            .ok_or_else(|| QueryError::Invalid("this functional needs target values".into()))
    };
    match functional {
        Functional::JointDensity => {
            let full: Option<Vec<u32>> = x.iter().copied().collect();
            let full = full.ok_or_else(|| QueryError::Invalid("the joint density needs every nominal level".into()))?;
            joint_conditional_density(model, params, &point.f, &full, target()?).map(Estimate::exact)
        }
        Functional::Density { coords } => {
            let t = target()?;
            marginalize_nominal(model, params, &point.f, &x, |xx| {
                conditional_density(model, params, &point.f, xx, coords, t).map(Estimate::exact)
            })
        }
        Functional::PrX => pr_x_given_f(model, params, &point.f, &x).map(Estimate::exact),
        Functional::PrY { levels } => marginalize_nominal(model, params, &point.f, &x, |xx| {
            pr_y_given_xf(model, params, &point.f, xx, levels, mc)
        }),
    }
}

/// Posterior mean, equal-tailed credible interval and per-draw values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub values: Vec<f64>,
}

/// Sample quantile with linear interpolation between order statistics
/// (`(n - 1) p` positioning).
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * p;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize_values(values: Vec<f64>, level: f64) -> Result<PosteriorSummary, QueryError> {
    if values.len() < 10 {
        return Err(QueryError::TooFewDraws(values.len()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(QueryError::Invalid(format!("credible level {level} outside (0, 1)")));
    }
    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);
    // Rounding in the sum must not push the mean outside the sample range.
    let mean = (values.iter().sum::<f64>() / values.len() as f64).clamp(sorted[0], sorted[sorted.len() - 1]);
    let tail = (1.0 - level) / 2.0;
    Ok(PosteriorSummary {
        mean,
        lower: quantile(&sorted, tail).min(mean),
        upper: quantile(&sorted, 1.0 - tail).max(mean),
        level,
        values,
    })
}

/// Applies a functional to every draw (in parallel, results kept in draw
/// order) and summarizes. Draw `t` uses Monte Carlo stream `t` of
/// `mc.seed`.
pub fn summarize_over_draws(
    model: &Model,
    draws: &[Params],
    point: &QueryPoint,
    functional: &Functional,
    level: f64,
    mc: &McOptions,
) -> Result<PosteriorSummary, QueryError> {
    if draws.len() < 10 {
        return Err(QueryError::TooFewDraws(draws.len()));
    }
    let key = StreamKey::new(mc.seed);
    let values: Vec<f64> = draws
        .par_iter()
        .enumerate()
        .map(|(t, p)| {
            let local = McOptions {
                seed: key.derive(t as u64).seed(),
                ..*mc
            };
            evaluate(model, p, point, functional, &local).map(|e| e.value)
        })
        .collect::<Result<_, _>>()?;
    summarize_values(values, level)
}

/// Degrees-of-freedom rule for combined multiple-imputation inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum DfRule {
    /// `(m - 1)(1 + 1/r)^2` with `r = (1 + 1/m) B / U`.
    #[default]
    Classic,
    /// Small-sample adjustment using the complete-data degrees of freedom.
    BarnardRubin { complete_df: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RubinResult {
    pub estimate: f64,
    pub within: f64,
    pub between: f64,
    pub total: f64,
    pub df: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Combines per-imputation estimates and their variances.
pub fn rubin_combine(estimates: &[f64], within: &[f64], level: f64, rule: DfRule) -> Result<RubinResult, QueryError> {
    let m = estimates.len();
    if m < 2 {
        return Err(QueryError::TooFewEstimates(m));
    }
    if within.len() != m {
        return Err(QueryError::Invalid("one within-imputation variance per estimate is required".into()));
    }
    let mf = m as f64;
    let qbar = estimates.iter().sum::<f64>() / mf;
    let ubar = within.iter().sum::<f64>() / mf;
    let b = estimates.iter().map(|q| (q - qbar).powi(2)).sum::<f64>() / (mf - 1.0);
    let inflated = (1.0 + 1.0 / mf) * b;
    let total = ubar + inflated;
    let mut df = if inflated > 0.0 {
        (mf - 1.0) * (1.0 + ubar / inflated).powi(2)
    } else {
        f64::INFINITY
    };
    if let DfRule::BarnardRubin { complete_df } = rule {
        let lambda = if total > 0.0 { inflated / total } else { 0.0 };
        let observed = (complete_df + 1.0) / (complete_df + 3.0) * complete_df * (1.0 - lambda);
        df = if df.is_finite() { 1.0 / (1.0 / df + 1.0 / observed) } else { observed };
    }
    let p = 0.5 + level / 2.0;
    let crit = if df.is_finite() && df < 1e7 {
        StudentsT::new(0.0, 1.0, df).map_err(|e| QueryError::Invalid(e.to_string()))?.inverse_cdf(p)
    } else {
        Normal::standard().inverse_cdf(p)
    };
    let half = crit * total.sqrt();
    Ok(RubinResult {
        estimate: qbar,
        within: ubar,
        between: b,
        total,
        df,
        lower: qbar - half,
        upper: qbar + half,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DesignConfig, DesignTerm, MixedDataset, Role, Schema, VariableSpec};
    use crate::gower::DistanceSpec;
    use crate::model::{default_hyperpriors_with, stick_logit, Model};

    /// `n_ord` ordinal variables with 3 levels, one continuous, two nominal
    /// (2 and 3 categories), one binary fixed variable. The design reads the
    /// first nominal variable.
    fn model(n_ord: usize, n_comp: usize, dstar: f64) -> Model {
        let mut vars: Vec<VariableSpec> = (0..n_ord).map(|j| VariableSpec::ordinal(format!("y{j}"), Role::Random, 3)).collect();
        vars.push(VariableSpec::continuous("z", Role::Random));
        vars.push(VariableSpec::nominal("x1", Role::Random, 2));
        vars.push(VariableSpec::nominal("x2", Role::Random, 3));
        vars.push(VariableSpec::nominal("g", Role::Fixed, 2));
        let schema = Schema::new(vars).unwrap();
        let mut cols: Vec<Vec<Option<f64>>> = (0..n_ord).map(|_| vec![Some(1.0), Some(2.0)]).collect();
        cols.push(vec![Some(0.0), Some(1.0)]);
        cols.push(vec![Some(1.0), Some(2.0)]);
        cols.push(vec![Some(1.0), Some(3.0)]);
        cols.push(vec![Some(1.0), Some(2.0)]);
        let data = MixedDataset::from_standardized(schema, cols, None).unwrap();
        let design = DesignConfig {
            terms: vec![DesignTerm::Intercept, DesignTerm::dummy("x1", 2)],
        };
        let mut hyper = default_hyperpriors_with(&data, DistanceSpec::equal_weights(&data, dstar));
        hyper.n_components = n_comp;
        Model::new(data, &design, hyper).unwrap()
    }

    /// Hand-built parameters: component `h` has location `locs[h]`.
    fn params(m: &Model, v: &[f64], locs: &[f64]) -> Params {
        let p = m.p();
        let n = v.len();
        Params {
            stick_logits: v.iter().map(|x| stick_logit(*x)).collect(),
            locations: locs.iter().map(|l| vec![*l]).collect(),
            beta: (0..n)
                .map(|h| DMatrix::from_fn(m.k(), p, |a, r| 0.3 * (h as f64 + 1.0) * (a as f64 - 0.5) + 0.1 * r as f64))
                .collect(),
            sigma: (0..n)
                .map(|h| DMatrix::from_fn(p, p, |a, b| if a == b { 1.0 + 0.2 * h as f64 } else { 0.3 }))
                .collect(),
            psi: (0..n)
                .map(|h| {
                    let a = 0.2 + 0.25 * h as f64;
                    vec![vec![a, 1.0 - a], vec![0.5 - a / 2.0, 0.3, 0.2 + a / 2.0]]
                })
                .collect(),
            alpha: 1.0,
            beta0: DMatrix::zeros(m.k(), p),
            tau2: vec![1.0; p],
            scale: DMatrix::identity(p, p),
        }
    }

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn single_component_density_factorizes() {
        let m = model(1, 1, 0.5);
        let prm = params(&m, &[0.4], &[1.0]);
        let x = [2, 3];
        let t = [0.2, -0.4];
        let d = m.design_for(&[1.0], &x);
        let mean = m.kernel_mean(&d, &prm.beta[0]);
        let want = dist::mvn_logpdf(&t, &mean, &prm.sigma[0]).unwrap().exp() * prm.psi[0][0][1] * prm.psi[0][1][2];
        close(joint_conditional_density(&m, &prm, &[1.0], &x, &t).unwrap(), want, 1e-15);
    }

    #[test]
    fn identical_components_collapse() {
        let m = model(1, 2, 1.0);
        let mut two = params(&m, &[0.3, 0.5], &[1.0, 2.0]);
        for field in [&mut two.beta, &mut two.sigma] {
            field[1] = field[0].clone();
        }
        two.psi[1] = two.psi[0].clone();
        let one = params(&m, &[0.3], &[1.0]);
        let mut one_model = m.clone();
        one_model.hyper.n_components = 1;
        let a = joint_conditional_density(&m, &two, &[1.0], &[1, 2], &[0.1, 0.2]).unwrap();
        let b = joint_conditional_density(&one_model, &one, &[1.0], &[1, 2], &[0.1, 0.2]).unwrap();
        close(a, b, 1e-15);
    }

    #[test]
    fn three_component_density_matches_term_sum() {
        let m = model(1, 3, 1.0);
        let v = [0.3, 0.6, 0.5];
        let prm = params(&m, &v, &[1.0, 2.0, 1.0]);
        let (x, t) = ([2u32, 1u32], [0.5, -1.0]);
        // Stick weights by hand: 0.3, 0.7 * 0.6, 0.7 * 0.4.
        let w = [0.3, 0.42, 0.28];
        let d = m.design_for(&[2.0], &x);
        let mut want = 0.0;
        for h in 0..3 {
            let mean = m.kernel_mean(&d, &prm.beta[h]);
            let dens = dist::mvn_logpdf(&t, &mean, &prm.sigma[h]).unwrap().exp();
            want += w[h] * dens * prm.psi[h][0][1] * prm.psi[h][1][0];
        }
        close(joint_conditional_density(&m, &prm, &[2.0], &x, &t).unwrap(), want, 1e-15);
    }

    #[test]
    fn nominal_probabilities_normalize() {
        let m = model(1, 3, 0.5);
        let prm = params(&m, &[0.3, 0.6, 0.5], &[1.0, 2.0, 1.0]);
        for f in [1.0, 2.0] {
            let mut s = 0.0;
            for a in 1..=2 {
                for b in 1..=3 {
                    s += pr_x_given_f(&m, &prm, &[f], &[Some(a), Some(b)]).unwrap();
                }
            }
            close(s, 1.0, 1e-12);
        }
        // f = 1 reaches components 0 and 2 with weights 0.3, 0.7.
        let want = 0.3 * prm.psi[0][0][0] * prm.psi[0][1][2] + 0.7 * prm.psi[2][0][0] * prm.psi[2][1][2];
        close(pr_x_given_f(&m, &prm, &[1.0], &[Some(1), Some(3)]).unwrap(), want, 1e-15);
        let marg = 0.3 * prm.psi[0][0][0] + 0.7 * prm.psi[2][0][0];
        close(pr_x_given_f(&m, &prm, &[1.0], &[Some(1), None]).unwrap(), marg, 1e-15);
    }

    #[test]
    fn empty_neighborhood_is_reported() {
        let m = model(1, 1, 0.5);
        let prm = params(&m, &[0.5], &[1.0]);
        assert!(matches!(pr_x_given_f(&m, &prm, &[2.0], &[None, None]), Err(QueryError::EmptyNeighborhood)));
    }

    #[test]
    fn single_ordinal_probabilities_match_normal_cdf() {
        let m = model(1, 1, 1.0);
        let mut prm = params(&m, &[0.5], &[1.0]);
        prm.beta[0].fill(0.0);
        prm.sigma[0] = DMatrix::identity(2, 2);
        let mc = McOptions::default();
        let p2 = pr_y_given_xf(&m, &prm, &[1.0], &[1, 1], &[2], &mc).unwrap();
        let p1 = pr_y_given_xf(&m, &prm, &[1.0], &[1, 1], &[1], &mc).unwrap();
        let n = Normal::standard();
        close(p2.value, n.cdf(3.0) - n.cdf(-3.0), 1e-12);
        close(p1.value, n.cdf(-3.0), 1e-12);
        close(p2.value, 0.997300, 5e-7);
        close(p1.value, 0.001350, 5e-7);
        assert!(p1.se.is_none());
    }

    #[test]
    fn bivariate_rectangles_match_independent_product_and_sum_to_one() {
        let n = Normal::standard();
        let p = bivariate_rectangle([0.3, -0.2], [[1.5, 0.0], [0.0, 0.7]], [-0.5, -1.0], [1.0, 0.4]);
        let want = (n.cdf(0.7 / 1.5f64.sqrt()) - n.cdf(-0.8 / 1.5f64.sqrt()))
            * (n.cdf(0.6 / 0.7f64.sqrt()) - n.cdf(-0.8 / 0.7f64.sqrt()));
        close(p, want, 1e-12);

        let m = model(2, 2, 1.0);
        let prm = params(&m, &[0.4, 0.5], &[1.0, 2.0]);
        let mc = McOptions::default();
        let mut s = 0.0;
        for a in 1..=3 {
            for b in 1..=3 {
                s += pr_y_given_xf(&m, &prm, &[1.0], &[2, 1], &[a, b], &mc).unwrap().value;
            }
        }
        close(s, 1.0, 1e-12);
    }

    #[test]
    fn correlated_rectangle_matches_simulation() {
        use rand::SeedableRng;
        let cov = [[1.0, 0.8], [0.8, 2.0]];
        let (lo, hi) = ([-0.2, -1.0], [1.3, 0.5]);
        let q = bivariate_rectangle([0.1, 0.2], cov, lo, hi);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let l = [[1.0, 0.0], [0.8, (2.0f64 - 0.64).sqrt()]];
        let n = 400_000;
        let mut hits = 0usize;
        for _ in 0..n {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            let w = [0.1 + l[0][0] * a, 0.2 + l[1][0] * a + l[1][1] * b];
            if w[0] > lo[0] && w[0] <= hi[0] && w[1] > lo[1] && w[1] <= hi[1] {
                hits += 1;
            }
        }
        let est = hits as f64 / n as f64;
        let se = (est * (1.0 - est) / n as f64).sqrt();
        assert!((q - est).abs() < 4.0 * se, "{q} vs {est}");
    }

    #[test]
    fn monte_carlo_ordinal_probabilities_sum_to_one() {
        let m = model(3, 2, 1.0);
        let prm = params(&m, &[0.4, 0.5], &[1.0, 2.0]);
        let mc = McOptions { samples: 5_000, seed: 3 };
        let mut s = 0.0;
        let mut var = 0.0;
        for a in 1..=3 {
            for b in 1..=3 {
                for c in 1..=3 {
                    let e = pr_y_given_xf(&m, &prm, &[2.0], &[1, 2], &[a, b, c], &mc).unwrap();
                    s += e.value;
                    var += e.se.unwrap().powi(2);
                }
            }
        }
        assert!((s - 1.0).abs() < 1e-12 || (s - 1.0).abs() < 3.0 * var.sqrt(), "{s}");
    }

    #[test]
    fn marginalization_cases() {
        let m = model(1, 2, 1.0);
        let mut prm = params(&m, &[0.4, 0.5], &[1.0, 2.0]);
        let mc = McOptions::default();
        let f = [1.0];
        let direct = pr_y_given_xf(&m, &prm, &f, &[2, 3], &[2], &mc).unwrap();
        let same = marginalize_nominal(&m, &prm, &f, &[Some(2), Some(3)], |x| pr_y_given_xf(&m, &prm, &f, x, &[2], &mc)).unwrap();
        assert_eq!(direct, same);

        // Two-slice oracle over x1 (which the design reads).
        let w1 = 0.4 * prm.psi[0][0][0] + 0.6 * prm.psi[1][0][0];
        let s1 = pr_y_given_xf(&m, &prm, &f, &[1, 3], &[2], &mc).unwrap().value;
        let s2 = pr_y_given_xf(&m, &prm, &f, &[2, 3], &[2], &mc).unwrap().value;
        let got = marginalize_nominal(&m, &prm, &f, &[None, Some(3)], |x| pr_y_given_xf(&m, &prm, &f, x, &[2], &mc)).unwrap();
        close(got.value, w1 * s1 + (1.0 - w1) * s2, 1e-15);

        // Degenerate weight puts all mass on x1 = 1.
        for h in 0..2 {
            prm.psi[h][0] = vec![1.0, 0.0];
        }
        let s1 = pr_y_given_xf(&m, &prm, &f, &[1, 3], &[2], &mc).unwrap().value;
        let got = marginalize_nominal(&m, &prm, &f, &[None, Some(3)], |x| pr_y_given_xf(&m, &prm, &f, x, &[2], &mc)).unwrap();
        close(got.value, s1, 1e-15);
    }

    #[test]
    fn one_dimensional_density_integrates_to_one() {
        let m = model(1, 2, 1.0);
        let prm = params(&m, &[0.4, 0.5], &[1.0, 2.0]);
        let rule = GaussLegendre::new(NonZeroUsize::new(200).unwrap());
        let total = rule.integrate(-15.0, 15.0, |z| conditional_density(&m, &prm, &[2.0], &[1, 2], &[1], &[z]).unwrap());
        close(total, 1.0, 1e-10);
    }

    #[test]
    fn global_radius_makes_functionals_constant_in_f() {
        let m = model(2, 3, 1.0);
        let prm = params(&m, &[0.4, 0.5, 0.6], &[1.0, 2.0, 2.0]);
        let mc = McOptions::default();
        let p = QueryPoint::new(vec![1.0]).with_x(vec![None, Some(2)]).with_target(vec![0.1]);
        let q = QueryPoint { f: vec![2.0], ..p.clone() };
        for func in [
            Functional::PrX,
            Functional::PrY { levels: vec![2, 1] },
            Functional::Density { coords: vec![2] },
        ] {
            assert_eq!(evaluate(&m, &prm, &p, &func, &mc).unwrap(), evaluate(&m, &prm, &q, &func, &mc).unwrap());
        }
    }

    #[test]
    fn summaries() {
        let values: Vec<f64> = (1..=100).map(f64::from).collect();
        let s = summarize_values(values.clone(), 0.90).unwrap();
        // Order-statistic positions 1 + 99 * 0.05 = 5.95 and 1 + 99 * 0.95 =
        // 95.05 on the 1-based scale.
        close(s.lower, 5.95, 1e-12);
        close(s.upper, 95.05, 1e-12);
        close(s.mean, values.iter().sum::<f64>() / 100.0, 1e-12);

        let c = summarize_values(vec![0.25; 12], 0.9).unwrap();
        assert_eq!((c.lower, c.upper), (0.25, 0.25));
        assert!(matches!(summarize_values(vec![1.0; 9], 0.9), Err(QueryError::TooFewDraws(9))));
    }

    #[test]
    fn summary_over_draws_of_constant_functional() {
        let m = model(1, 1, 1.0);
        let draws = vec![params(&m, &[0.5], &[1.0]); 12];
        let s = summarize_over_draws(
            &m,
            &draws,
            &QueryPoint::new(vec![1.0]).with_x(vec![Some(1), Some(2)]),
            &Functional::PrX,
            0.9,
            &McOptions::default(),
        )
        .unwrap();
        assert_eq!(s.lower, s.upper);
        close(s.mean, draws[0].psi[0][0][0] * draws[0].psi[0][1][1], 1e-15);
    }

    #[test]
    fn rubin_rules() {
        let r = rubin_combine(&[0.0, 0.0], &[1.0, 1.0], 0.95, DfRule::Classic).unwrap();
        assert_eq!((r.estimate, r.between, r.total), (0.0, 0.0, 1.0));
        close(r.upper, 1.959_963_984_540_054, 1e-9);

        // qbar = 1, B = ((0-1)^2 + (2-1)^2) / 1 = 2, T = 1 + 1.5 * 2 = 4,
        // df = 1 * (1 + 1/3)^2 = 16/9.
        let r = rubin_combine(&[0.0, 2.0], &[1.0, 1.0], 0.95, DfRule::Classic).unwrap();
        close(r.estimate, 1.0, 1e-15);
        close(r.between, 2.0, 1e-15);
        close(r.total, 4.0, 1e-15);
        close(r.df, 16.0 / 9.0, 1e-15);

        let r = rubin_combine(&[1.0, 2.0, 4.0], &[0.0; 3], 0.95, DfRule::Classic).unwrap();
        // Mean 7/3, squared deviations 16/9 + 1/9 + 25/9, B = 7/3.
        close(r.total, 4.0 / 3.0 * 7.0 / 3.0, 1e-12);

        assert!(matches!(rubin_combine(&[1.0], &[1.0], 0.95, DfRule::Classic), Err(QueryError::TooFewEstimates(1))));
        let br = rubin_combine(&[0.0, 2.0], &[1.0, 1.0], 0.95, DfRule::BarnardRubin { complete_df: 50.0 }).unwrap();
        assert!(br.df < 16.0 / 9.0);
    }
}
