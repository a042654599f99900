//! Data-fusion simulation: a synthetic block of shared variables `A`,
//! outcomes `(Z, Y, X)` generated independently given `A`, three-way
//! blanking that mimics three databases, several completion methods and
//! coverage/error evaluation of the completed data.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, DesignConfig, DesignTerm, MixedDataset, Role, Schema, VariableSpec};
use crate::dist;
use crate::gower::DistanceSpec;
use crate::infosel;
use crate::model::{default_hyperpriors, default_hyperpriors_with, Model, ModelError};
use crate::query::{self, DfRule, QueryError};
use crate::rng::{StreamKey, Tag};
use crate::sampler::{run_chain, ChainConfig, SamplerError};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("three-way blanking needs at least 3 rows, got {0}")]
    TooFewRows(usize),
    #[error("no donor observes `{0}`")]
    NoDonor(String),
    #[error("invalid study configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Query(#[from] QueryError),
}

/// One column of the synthetic shared block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AColumn {
    pub name: String,
    #[serde(default)]
    pub nominal: bool,
    /// Marginal probabilities of levels `1..=probs.len()`.
    pub probs: Vec<f64>,
}

/// Gaussian-copula generator of the shared block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AConfig {
    pub n: usize,
    pub columns: Vec<AColumn>,
    /// Common latent correlation, used unless `correlation` is given.
    pub rho: f64,
    pub correlation: Option<Vec<Vec<f64>>>,
}

impl Default for AConfig {
    /// Six ordinal and five nominal columns shaped like a reader survey.
    fn default() -> Self {
        let col = |name: &str, nominal: bool, probs: &[f64]| AColumn {
            name: name.to_string(),
            nominal,
            probs: probs.to_vec(),
        };
        AConfig {
            n: 600,
            columns: vec![
                col("age", false, &[0.15, 0.2, 0.25, 0.25, 0.15]),
                col("passion_books", false, &[0.1, 0.25, 0.35, 0.3]),
                col("reading_hours", false, &[0.15, 0.25, 0.25, 0.2, 0.15]),
                col("income", false, &[0.12, 0.18, 0.22, 0.18, 0.14, 0.09, 0.07]),
                col("passion_internet", false, &[0.1, 0.2, 0.4, 0.3]),
                col("romance", false, &[0.3, 0.3, 0.25, 0.15]),
                col("work_status", true, &[0.55, 0.25, 0.2]),
                col("challenge", true, &[0.4, 0.6]),
                col("laptop", true, &[0.35, 0.65]),
                col("ebook", true, &[0.7, 0.3]),
                col("audiobook", true, &[0.8, 0.2]),
            ],
            rho: 0.2,
            correlation: None,
        }
    }
}

impl AConfig {
    pub fn schema(&self) -> Result<Schema, DataError> {
        Schema::new(
            self.columns
                .iter()
                .map(|c| {
                    let k = c.probs.len() as u32;
                    if c.nominal {
                        VariableSpec::nominal(&c.name, Role::Fixed, k)
                    } else {
                        VariableSpec::ordinal(&c.name, Role::Fixed, k)
                    }
                })
                .collect(),
        )
    }

    fn validate(&self) -> Result<(), FusionError> {
        let bad = |m: String| Err(FusionError::Config(m));
        for c in &self.columns {
            let s: f64 = c.probs.iter().sum();
            if c.probs.len() < 2 || c.probs.iter().any(|p| !(*p > 0.0)) || (s - 1.0).abs() > 1e-9 {
                return bad(format!("probabilities of `{}` must be positive and sum to 1", c.name));
            }
        }
        let q = self.columns.len() as f64;
        if !(self.rho >= 0.0 && self.rho < 1.0) && self.correlation.is_none() {
            return bad(format!("rho must lie in [0, 1), got {}", self.rho));
        }
        if self.correlation.is_none() && q == 0.0 {
            return bad("at least one shared column is required".into());
        }
        Ok(())
    }
}

/// Draws the shared block; `columns[j][i]` is the level of column `j` in
/// row `i`.
pub fn generate_a<R: Rng + ?Sized>(cfg: &AConfig, rng: &mut R) -> Result<Vec<Vec<f64>>, FusionError> {
    cfg.validate()?;
    let q = cfg.columns.len();
    let chol = match &cfg.correlation {
        Some(r) => {
            if r.len() != q || r.iter().any(|row| row.len() != q) {
                return Err(FusionError::Config(format!("correlation must be {q} x {q}")));
            }
            let m = DMatrix::from_fn(q, q, |a, b| r[a][b]);
            Some(
                dist::cholesky(&m, "copula correlation")
                    .map_err(|e| FusionError::Config(e.to_string()))?
                    .unpack(),
            )
        }
        None => None,
    };
    let thresholds: Vec<Vec<f64>> = cfg
        .columns
        .iter()
        .map(|c| {
            let mut cum = 0.0;
            c.probs[..c.probs.len() - 1]
                .iter()
                .map(|p| {
                    cum += p;
                    dist::phi_inv(cum)
                })
                .collect()
        })
        .collect();
    let mut cols = vec![Vec::with_capacity(cfg.n); q];
    let mut e = vec![0.0; q];
    for _ in 0..cfg.n {
        for v in e.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let u: Vec<f64> = match &chol {
            Some(l) => (0..q).map(|a| (0..=a).map(|b| l[(a, b)] * e[b]).sum()).collect(),
            None => {
                let g: f64 = StandardNormal.sample(rng);
                e.iter().map(|x| cfg.rho.sqrt() * g + (1.0 - cfg.rho).sqrt() * x).collect()
            }
        };
        for j in 0..q {
            let level = 1 + thresholds[j].partition_point(|t| *t < u[j]);
            cols[j].push(level as f64);
        }
    }
    Ok(cols)
}

/// A linear predictor in terms of the shared columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    pub intercept: f64,
    #[serde(default)]
    pub effects: Vec<Effect>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Effect {
    pub term: DesignTerm,
    pub coef: f64,
}

impl Predictor {
    pub fn constant(intercept: f64) -> Self {
        Predictor {
            intercept,
            effects: vec![],
        }
    }

    fn design(&self) -> DesignConfig {
        let mut terms = vec![DesignTerm::Intercept];
        terms.extend(self.effects.iter().map(|e| e.term.clone()));
        DesignConfig { terms }
    }

    fn coefs(&self) -> Vec<f64> {
        let mut c = vec![self.intercept];
        c.extend(self.effects.iter().map(|e| e.coef));
        c
    }

    /// Values of the predictor at every row of the shared block.
    pub fn evaluate(&self, schema: &Schema, a: &[Vec<f64>]) -> Result<Vec<f64>, FusionError> {
        let rows = design_rows(&self.design(), schema, a)?;
        let c = self.coefs();
        Ok(rows.iter().map(|d| d.iter().zip(&c).map(|(x, b)| x * b).sum()).collect())
    }
}

fn design_rows(design: &DesignConfig, schema: &Schema, a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, FusionError> {
    let compiled = design.compile(schema)?;
    let n = a.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| {
            let row: Vec<Option<f64>> = a.iter().map(|c| Some(c[i])).collect();
            compiled.build(&row, schema).map_err(FusionError::from)
        })
        .collect()
}

/// Generators of the three outcome variables given the shared block: a
/// normal regression for `Z`, a probit for `Y` and a multinomial logit for
/// `X` (one predictor per category after the first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub z: Predictor,
    pub z_sd: f64,
    pub y: Predictor,
    pub y_cutoffs: Vec<f64>,
    pub x: Vec<Predictor>,
}

impl Default for GenConfig {
    fn default() -> Self {
        let eff = |term: DesignTerm, coef: f64| Effect { term, coef };
        let hours = || DesignTerm::linear("reading_hours");
        let laptop = || DesignTerm::dummy("laptop", 2);
        GenConfig {
            z: Predictor {
                intercept: -1.0,
                effects: vec![
                    eff(hours(), 0.3),
                    eff(laptop(), 0.6),
                    eff(DesignTerm::interaction(hours(), laptop()), 0.2),
                    eff(DesignTerm::linear("age"), -0.15),
                ],
            },
            z_sd: 1.0,
            y: Predictor {
                intercept: -1.4,
                effects: vec![
                    eff(hours(), 0.35),
                    eff(DesignTerm::dummy("challenge", 2), 0.5),
                    eff(DesignTerm::linear("income"), 0.12),
                ],
            },
            y_cutoffs: vec![-0.3, 0.8],
            x: vec![
                Predictor {
                    intercept: -0.8,
                    effects: vec![eff(laptop(), 0.9), eff(hours(), 0.2)],
                },
                Predictor {
                    intercept: -1.5,
                    effects: vec![eff(hours(), 0.3), eff(DesignTerm::dummy("ebook", 2), 0.7)],
                },
            ],
        }
    }
}

impl GenConfig {
    pub fn y_levels(&self) -> u32 {
        self.y_cutoffs.len() as u32 + 1
    }

    pub fn x_categories(&self) -> u32 {
        self.x.len() as u32 + 1
    }

    fn validate(&self) -> Result<(), FusionError> {
        if !(self.z_sd > 0.0) {
            return Err(FusionError::Config("z_sd must be positive".into()));
        }
        if self.y_cutoffs.is_empty() || self.y_cutoffs.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(FusionError::Config("y_cutoffs must be nonempty and increasing".into()));
        }
        if self.x.is_empty() {
            return Err(FusionError::Config("X needs at least two categories".into()));
        }
        Ok(())
    }
}

/// Conditional distributions of the outcomes at every row.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub z_mean: Vec<f64>,
    pub z_sd: f64,
    pub y_probs: Vec<Vec<f64>>,
    pub x_probs: Vec<Vec<f64>>,
}

impl Truth {
    pub fn new(gen: &GenConfig, schema: &Schema, a: &[Vec<f64>]) -> Result<Self, FusionError> {
        gen.validate()?;
        let z_mean = gen.z.evaluate(schema, a)?;
        let y_eta = gen.y.evaluate(schema, a)?;
        let x_eta: Vec<Vec<f64>> = gen.x.iter().map(|p| p.evaluate(schema, a)).collect::<Result<_, _>>()?;
        let k = gen.y_levels() as usize;
        let y_probs = y_eta
            .iter()
            .map(|eta| {
                (0..k)
                    .map(|l| {
                        let hi = gen.y_cutoffs.get(l).map_or(1.0, |g| dist::phi(g - eta));
                        let lo = if l == 0 { 0.0 } else { dist::phi(gen.y_cutoffs[l - 1] - eta) };
                        hi - lo
                    })
                    .collect()
            })
            .collect();
        let x_probs = (0..z_mean.len())
            .map(|i| {
                let mut logits = vec![0.0];
                logits.extend(x_eta.iter().map(|e| e[i]));
                dist::normalize_log(&logits)
            })
            .collect();
        Ok(Truth {
            z_mean,
            z_sd: gen.z_sd,
            y_probs,
            x_probs,
        })
    }

    fn draw_z<R: Rng + ?Sized>(&self, rng: &mut R, i: usize) -> f64 {
        let e: f64 = StandardNormal.sample(rng);
        self.z_mean[i] + self.z_sd * e
    }

    fn draw_level<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> f64 {
        let logp: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        (dist::categorical_log(rng, &logp) + 1) as f64
    }
}

/// A complete replicate: the shared block followed by `z`, `y`, `x`
/// (original scale), with the generating distributions.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub schema: Schema,
    pub columns: Vec<Vec<f64>>,
    pub truth: Truth,
}

impl Replicate {
    pub fn q(&self) -> usize {
        self.columns.len() - 3
    }

    pub fn z_col(&self) -> usize {
        self.q()
    }

    pub fn y_col(&self) -> usize {
        self.q() + 1
    }

    pub fn x_col(&self) -> usize {
        self.q() + 2
    }

    pub fn n(&self) -> usize {
        self.columns[0].len()
    }

    pub fn dataset(&self) -> Result<MixedDataset, FusionError> {
        Ok(MixedDataset::from_raw(
            self.schema.clone(),
            self.columns.iter().map(|c| c.iter().map(|v| Some(*v)).collect()).collect(),
        )?)
    }
}

/// Appends `(Z, Y, X)` drawn independently given the shared block.
pub fn generate_fusion_replicate<R: Rng + ?Sized>(
    a_schema: &Schema,
    a: &[Vec<f64>],
    gen: &GenConfig,
    rng: &mut R,
) -> Result<Replicate, FusionError> {
    let truth = Truth::new(gen, a_schema, a)?;
    let n = truth.z_mean.len();
    let mut z = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n);
    for i in 0..n {
        z.push(truth.draw_z(rng, i));
        y.push(Truth::draw_level(rng, &truth.y_probs[i]));
        x.push(Truth::draw_level(rng, &truth.x_probs[i]));
    }
    let mut vars = a_schema.variables.clone();
    vars.push(VariableSpec::continuous("z", Role::Random));
    vars.push(VariableSpec::ordinal("y", Role::Random, gen.y_levels()));
    vars.push(VariableSpec::nominal("x", Role::Random, gen.x_categories()));
    let mut columns = a.to_vec();
    columns.extend([z, y, x]);
    Ok(Replicate {
        schema: Schema::new(vars)?,
        columns,
        truth,
    })
}

/// Masks `(x, z)` in the first third of the rows, `(x, y)` in the second
/// and `(y, z)` in the rest. Other columns stay observed.
pub fn blank_three_way(data: &MixedDataset, x: usize, y: usize, z: usize) -> Result<MixedDataset, FusionError> {
    let n = data.n_rows();
    if n < 3 {
        return Err(FusionError::TooFewRows(n));
    }
    let block = n / 3;
    let mut out = data.clone();
    for i in 0..n {
        let cols = match (i / block).min(2) {
            0 => [x, z],
            1 => [x, y],
            _ => [y, z],
        };
        for c in cols {
            out.set_missing(i, c)?;
        }
    }
    Ok(out)
}

/// Hot-deck completion: every missing cell of the `targets` columns is
/// copied from a uniformly chosen donor among the rows that observe it at
/// minimal Hamming distance on the `keys` columns.
pub fn statistical_matching(
    data: &MixedDataset,
    keys: &[usize],
    targets: &[usize],
    key: &StreamKey,
    draw: u64,
) -> Result<MixedDataset, FusionError> {
    let mut out = data.clone();
    let n = data.n_rows();
    let mut best = Vec::new();
    for (t, &col) in targets.iter().enumerate() {
        let donors: Vec<usize> = (0..n).filter(|&i| !data.is_missing(i, col)).collect();
        if donors.is_empty() {
            return Err(FusionError::NoDonor(data.schema().variables[col].name.clone()));
        }
        for i in (0..n).filter(|&i| data.is_missing(i, col)) {
            best.clear();
            let mut min = usize::MAX;
            for &d in &donors {
                let dist = keys.iter().filter(|&&k| data.value(i, k) != data.value(d, k)).count();
                if dist < min {
                    min = dist;
                    best.clear();
                }
                if dist == min {
                    best.push(d);
                }
            }
            let mut rng = key.stream(draw, Tag::Matching, (i * targets.len() + t) as u64);
            let donor = best[rng.random_range(0..best.len())];
            out.set_observed(i, col, data.value(donor, col).expect("donors observe the column"))?;
        }
    }
    Ok(out)
}

/// How a blanked replicate is completed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    /// Conditional mixture with the shared block as fixed variables; the
    /// distance uses equal weights over `features` and radius `dstar`.
    Conditional {
        name: String,
        features: Vec<String>,
        dstar: f64,
    },
    /// Every variable random, no fixed variables, intercept-only design.
    Joint,
    /// Nearest-neighbor hot deck on the shared block.
    Matching,
    /// The pre-missing data: every completion equals the true values.
    Oracle,
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::Conditional { name, .. } => name.clone(),
            Method::Joint => "joint".into(),
            Method::Matching => "matching".into(),
            Method::Oracle => "oracle".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub a: AConfig,
    pub generator: GenConfig,
    pub methods: Vec<Method>,
    pub replications: usize,
    /// Completed datasets per method and replication.
    pub m: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub n_components: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            a: AConfig::default(),
            generator: GenConfig::default(),
            methods: vec![
                Method::Conditional {
                    name: "conditional".into(),
                    features: vec!["reading_hours".into(), "laptop".into()],
                    dstar: 0.125,
                },
                Method::Joint,
                Method::Matching,
                Method::Oracle,
            ],
            replications: 10,
            m: 5,
            iterations: 1500,
            burn_in: 500,
            n_components: 30,
            level: 0.95,
            seed: 2024,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        let bad = |m: &str| Err(FusionError::Config(m.to_string()));
        if self.replications == 0 {
            return bad("at least one replication is required");
        }
        if self.m < 2 {
            return bad("at least two completed datasets are required");
        }
        if self.burn_in >= self.iterations || self.m > self.iterations - self.burn_in {
            return bad("iterations must exceed burn_in by at least m");
        }
        if self.methods.is_empty() {
            return bad("no methods configured");
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad("level must lie in (0, 1)");
        }
        self.a.validate()?;
        self.generator.validate()
    }
}

/// A tracked bivariate cell `Pr(V = level, A_j = a_level)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    /// Outcome column in the replicate.
    pub outcome: usize,
    pub level: u32,
    pub a_col: usize,
    pub a_level: u32,
    pub truth: f64,
}

/// All `(X, A_j)` and `(Y, A_j)` cells with their true probabilities given
/// the shared block: `(1/n) sum_i Pr(V_i = v | A_i) 1(A_ij = a)`.
pub fn tracked_cells(rep: &Replicate) -> Vec<Cell> {
    let n = rep.n() as f64;
    let mut cells = Vec::new();
    for (outcome, probs) in [(rep.x_col(), &rep.truth.x_probs), (rep.y_col(), &rep.truth.y_probs)] {
        let k = probs[0].len();
        for a_col in 0..rep.q() {
            let levels = rep.schema.variables[a_col].kind.level_count().unwrap();
            for a_level in 1..=levels {
                for level in 1..=k {
                    let truth = (0..rep.n())
                        .filter(|&i| rep.columns[a_col][i] == f64::from(a_level))
                        .map(|i| probs[i][level - 1])
                        .sum::<f64>()
                        / n;
                    cells.push(Cell {
                        outcome,
                        level: level as u32,
                        a_col,
                        a_level,
                        truth,
                    });
                }
            }
        }
    }
    cells
}

fn column(data: &MixedDataset, col: usize) -> Vec<f64> {
    (0..data.n_rows())
        .map(|i| data.raw_value(i, col).expect("completed data have no missing cells"))
        .collect()
}

/// Original-scale columns of `m` completed datasets.
pub type Completed = Vec<Vec<Vec<f64>>>;

/// Conditional-mixture model of a blanked replicate: the shared block is
/// fixed, the distance uses equal weights over `features`, and the design
/// dummy-codes every shared column.
pub fn conditional_model(
    blanked: &MixedDataset,
    features: &[String],
    dstar: f64,
    n_components: usize,
) -> Result<Model, FusionError> {
    let schema = blanked.schema();
    let fixed: Vec<usize> = schema.layout().fixed;
    let mut weights = vec![0.0; fixed.len()];
    for name in features {
        let pos = fixed
            .iter()
            .position(|&c| schema.variables[c].name == *name)
            .ok_or_else(|| FusionError::Config(format!("unknown feature `{name}`")))?;
        weights[pos] = 1.0 / features.len() as f64;
    }
    let mut terms = vec![DesignTerm::Intercept];
    for &c in &fixed {
        let v = &schema.variables[c];
        match v.kind {
            crate::data::Kind::Nominal { categories } | crate::data::Kind::Ordinal { levels: categories } => {
                terms.extend((2..=categories).map(|l| DesignTerm::dummy(&v.name, l)));
            }
            _ => terms.push(DesignTerm::linear(&v.name)),
        }
    }
    let mut hyper = default_hyperpriors_with(blanked, DistanceSpec::with_weights(blanked, weights, dstar));
    hyper.n_components = n_components;
    Ok(Model::new(blanked.clone(), &DesignConfig { terms }, hyper)?)
}

fn fit_and_complete(model: &Model, cfg: &StudyConfig, seed: u64) -> Result<Completed, FusionError> {
    let chain = ChainConfig {
        iterations: cfg.iterations,
        burn_in: cfg.burn_in,
        thin: cfg.iterations,
        seed,
        n_completed: cfg.m,
        ..ChainConfig::default()
    };
    let draws = run_chain(model, &chain)?;
    Ok(draws
        .completed
        .iter()
        .map(|d| (0..d.n_cols()).map(|c| column(d, c)).collect())
        .collect())
}

fn complete_joint(blanked: &MixedDataset, cfg: &StudyConfig, seed: u64) -> Result<Completed, FusionError> {
    let mut vars = blanked.schema().variables.clone();
    for v in vars.iter_mut() {
        v.role = Role::Random;
    }
    let schema = Schema::new(vars)?;
    let n = blanked.n_rows();
    let values = (0..blanked.n_cols())
        .map(|c| (0..n).map(|i| blanked.raw_value(i, c)).collect())
        .collect();
    let data = MixedDataset::from_raw(schema, values)?;
    let mut hyper = default_hyperpriors(&data);
    hyper.n_components = cfg.n_components;
    let model = Model::new(data, &DesignConfig::intercept_only(), hyper)?;
    fit_and_complete(&model, cfg, seed)
}

fn complete_oracle(rep: &Replicate, m: usize) -> Completed {
    vec![rep.columns.clone(); m]
}

fn complete_matching(blanked: &MixedDataset, rep: &Replicate, m: usize, key: &StreamKey) -> Result<Completed, FusionError> {
    let keys: Vec<usize> = (0..rep.q()).collect();
    let targets = [rep.z_col(), rep.y_col(), rep.x_col()];
    (0..m)
        .map(|t| {
            let d = statistical_matching(blanked, &keys, &targets, key, t as u64)?;
            Ok((0..d.n_cols()).map(|c| column(&d, c)).collect())
        })
        .collect()
}

/// Ordinary least squares: coefficients and their sampling variances.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let (n, k) = x.shape();
    let xtx = x.transpose() * x;
    let inv = dist::spd_inverse(&xtx, "normal equations").unwrap_or_else(|_| {
        let jitter = DMatrix::identity(k, k) * 1e-8 * xtx.diagonal().max().max(1.0);
        dist::spd_inverse(&(&xtx + jitter), "normal equations").expect("ridge-stabilized normal equations")
    });
    let beta = &inv * (x.transpose() * y);
    let resid = y - x * &beta;
    let sigma2 = resid.norm_squared() / (n.saturating_sub(k)).max(1) as f64;
    let var = inv.diagonal() * sigma2;
    (beta, var)
}

/// Regression of `z` on `x` and `y` dummies and the terms that generate
/// `z`; returns labels, design matrix and the true coefficients.
fn cross_block_design(rep: &Replicate, gen: &GenConfig, cols: &[Vec<f64>]) -> Result<(Vec<String>, DMatrix<f64>, Vec<f64>), FusionError> {
    let n = rep.n();
    let a_schema = Schema::new(rep.schema.variables[..rep.q()].to_vec())?;
    let a_rows = design_rows(&gen.z.design(), &a_schema, &cols[..rep.q()])?;
    let mut labels = vec!["(intercept)".to_string()];
    let mut truth = vec![gen.z.intercept];
    let xk = gen.x_categories();
    let yk = gen.y_levels();
    labels.extend((2..=xk).map(|l| format!("x={l}")));
    labels.extend((2..=yk).map(|l| format!("y={l}")));
    truth.extend(std::iter::repeat_n(0.0, (xk + yk - 2) as usize));
    for e in &gen.z.effects {
        labels.push(e.term.label());
        truth.push(e.coef);
    }
    let k = labels.len();
    let mut x = DMatrix::zeros(n, k);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        let mut c = 1;
        for l in 2..=xk {
            x[(i, c)] = f64::from(u8::from(cols[rep.x_col()][i] == f64::from(l)));
            c += 1;
        }
        for l in 2..=yk {
            x[(i, c)] = f64::from(u8::from(cols[rep.y_col()][i] == f64::from(l)));
            c += 1;
        }
        for v in &a_rows[i][1..] {
            x[(i, c)] = *v;
            c += 1;
        }
    }
    Ok((labels, x, truth))
}

/// Plug-in conditional mutual information between `x` and quartile bins of
/// `z` given the full shared-block vector. Sparse strata bias it upward by
/// the same amount for every completion of the same rows, so it is read
/// comparatively.
pub fn conditional_mi(rep: &Replicate, cols: &[Vec<f64>]) -> f64 {
    use std::collections::BTreeMap;
    let zb = infosel::discretize(&cols[rep.z_col()].iter().map(|v| Some(*v)).collect::<Vec<_>>(), 4);
    let n = rep.n() as f64;
    let stratum = |i: usize| -> Vec<u32> { (0..rep.q()).map(|j| cols[j][i] as u32).collect() };
    let mut xza: BTreeMap<(u32, u32, Vec<u32>), f64> = BTreeMap::new();
    let mut xa: BTreeMap<(u32, Vec<u32>), f64> = BTreeMap::new();
    let mut za: BTreeMap<(u32, Vec<u32>), f64> = BTreeMap::new();
    let mut aa: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
    for i in 0..rep.n() {
        let a = stratum(i);
        let x = cols[rep.x_col()][i] as u32;
        let z = zb[i].expect("complete column");
        *xza.entry((x, z, a.clone())).or_default() += 1.0;
        *xa.entry((x, a.clone())).or_default() += 1.0;
        *za.entry((z, a.clone())).or_default() += 1.0;
        *aa.entry(a).or_default() += 1.0;
    }
    let cmi: f64 = xza
        .iter()
        .map(|((xv, zv, a), &c)| c / n * (c * aa[a] / (xa[&(*xv, a.clone())] * za[&(*zv, a.clone())])).ln())
        .sum();
    cmi.max(0.0)
}

/// Results of one method on one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub covered: Vec<bool>,
    pub abs_error: Vec<f64>,
    pub regression: Vec<CoefficientResult>,
    pub cmi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientResult {
    pub term: String,
    pub truth: f64,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

impl CoefficientResult {
    pub fn covers(&self) -> bool {
        self.lower <= self.truth && self.truth <= self.upper
    }

    /// Whether the coefficient links the blocks that were never observed
    /// together (`x` or `y` effects on `z`).
    pub fn is_cross_block(&self) -> bool {
        self.term.starts_with("x=") || self.term.starts_with("y=")
    }
}

/// Scores `m` completed datasets of a replicate.
pub fn evaluate_completed(
    rep: &Replicate,
    cells: &[Cell],
    gen: &GenConfig,
    completed: &Completed,
    level: f64,
) -> Result<MethodOutcome, FusionError> {
    let n = rep.n() as f64;
    let mut covered = Vec::with_capacity(cells.len());
    let mut abs_error = Vec::with_capacity(cells.len());
    for cell in cells {
        let (est, var): (Vec<f64>, Vec<f64>) = completed
            .iter()
            .map(|cols| {
                // The shared block is fixed, so the count is binomial
                // within the stratum `A_j = a` only.
                let stratum: Vec<usize> = (0..rep.n()).filter(|&i| cols[cell.a_col][i] == f64::from(cell.a_level)).collect();
                let count = stratum.iter().filter(|&&i| cols[cell.outcome][i] == f64::from(cell.level)).count() as f64;
                let size = stratum.len() as f64;
                let rate = if size > 0.0 { count / size } else { 0.0 };
                (count / n, size * rate * (1.0 - rate) / (n * n))
            })
            .unzip();
        let r = query::rubin_combine(&est, &var, level, DfRule::Classic)?;
        covered.push(r.lower <= cell.truth && cell.truth <= r.upper);
        abs_error.push((r.estimate - cell.truth).abs());
    }

    let mut per_draw = Vec::with_capacity(completed.len());
    let mut labels = Vec::new();
    let mut truth = Vec::new();
    for cols in completed {
        let (l, x, t) = cross_block_design(rep, gen, cols)?;
        let y = DVector::from_column_slice(&cols[rep.z_col()]);
        per_draw.push(ols(&x, &y));
        labels = l;
        truth = t;
    }
    let mut regression = Vec::with_capacity(labels.len());
    for (c, term) in labels.into_iter().enumerate() {
        let est: Vec<f64> = per_draw.iter().map(|(b, _)| b[c]).collect();
        let var: Vec<f64> = per_draw.iter().map(|(_, v)| v[c]).collect();
        let r = query::rubin_combine(&est, &var, level, DfRule::Classic)?;
        regression.push(CoefficientResult {
            term,
            truth: truth[c],
            estimate: r.estimate,
            lower: r.lower,
            upper: r.upper,
        });
    }
    let cmi = completed.iter().map(|cols| conditional_mi(rep, cols)).sum::<f64>() / completed.len() as f64;
    Ok(MethodOutcome {
        covered,
        abs_error,
        regression,
        cmi,
    })
}

/// Completes a blanked replicate with one method.
pub fn complete_with(
    method: &Method,
    rep: &Replicate,
    blanked: &MixedDataset,
    cfg: &StudyConfig,
    key: &StreamKey,
) -> Result<Completed, FusionError> {
    match method {
        Method::Conditional { features, dstar, .. } => {
            let model = conditional_model(blanked, features, *dstar, cfg.n_components)?;
            fit_and_complete(&model, cfg, key.seed())
        }
        Method::Joint => complete_joint(blanked, cfg, key.seed()),
        Method::Matching => complete_matching(blanked, rep, cfg.m, key),
        Method::Oracle => Ok(complete_oracle(rep, cfg.m)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    /// Share of tracked-cell intervals containing the truth, averaged over
    /// replications.
    pub coverage: f64,
    /// Monte Carlo standard error of `coverage` across replications.
    pub coverage_se: f64,
    pub mean_abs_error: f64,
    pub p25_abs_error: f64,
    pub p75_abs_error: f64,
    /// Share of (replication, cross-block coefficient) intervals that
    /// contain zero.
    pub cross_block_zero_coverage: f64,
    /// Share of all regression intervals containing the true coefficient.
    pub regression_coverage: f64,
    pub regression_abs_error: f64,
    pub cmi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionRow {
    pub method: String,
    pub term: String,
    pub truth: f64,
    pub mean_estimate: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub replications: usize,
    pub cells: usize,
    pub methods: Vec<MethodSummary>,
    pub regression: Vec<RegressionRow>,
}

impl FusionReport {
    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == name)
    }

    /// One row per (method, metric).
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "metric", "value"])?;
        for m in &self.methods {
            for (metric, v) in [
                ("coverage", m.coverage),
                ("coverage_se", m.coverage_se),
                ("mean_abs_error", m.mean_abs_error),
                ("p25_abs_error", m.p25_abs_error),
                ("p75_abs_error", m.p75_abs_error),
                ("cross_block_zero_coverage", m.cross_block_zero_coverage),
                ("regression_coverage", m.regression_coverage),
                ("regression_abs_error", m.regression_abs_error),
                ("cmi", m.cmi),
            ] {
                w.write_record([m.method.as_str(), metric, &format!("{v:?}")])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_regression_csv<W: std::io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "term", "truth", "mean_estimate", "coverage"])?;
        for r in &self.regression {
            w.write_record([
                r.method.as_str(),
                &r.term,
                &format!("{:?}", r.truth),
                &format!("{:?}", r.mean_estimate),
                &format!("{:?}", r.coverage),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn summarize(method: &Method, outcomes: &[MethodOutcome]) -> (MethodSummary, Vec<RegressionRow>) {
    let cov: Vec<f64> = outcomes
        .iter()
        .map(|o| o.covered.iter().filter(|&&c| c).count() as f64 / o.covered.len() as f64)
        .collect();
    let r = cov.len() as f64;
    let coverage = mean(&cov);
    let coverage_se = if cov.len() > 1 {
        (cov.iter().map(|c| (c - coverage).powi(2)).sum::<f64>() / (r - 1.0) / r).sqrt()
    } else {
        f64::NAN
    };
    let pct = |p: f64| {
        mean(
            &outcomes
                .iter()
                .map(|o| {
                    let mut e = o.abs_error.clone();
                    e.sort_by(f64::total_cmp);
                    query::quantile(&e, p)
                })
                .collect::<Vec<_>>(),
        )
    };
    let coefs: Vec<&CoefficientResult> = outcomes.iter().flat_map(|o| &o.regression).collect();
    let cross: Vec<&&CoefficientResult> = coefs.iter().filter(|c| c.is_cross_block()).collect();
    let share = |v: &[bool]| v.iter().filter(|&&b| b).count() as f64 / v.len().max(1) as f64;
    let name = method.name();
    let summary = MethodSummary {
        method: name.clone(),
        coverage,
        coverage_se,
        mean_abs_error: mean(&outcomes.iter().map(|o| mean(&o.abs_error)).collect::<Vec<_>>()),
        p25_abs_error: pct(0.25),
        p75_abs_error: pct(0.75),
        cross_block_zero_coverage: share(&cross.iter().map(|c| c.lower <= 0.0 && 0.0 <= c.upper).collect::<Vec<_>>()),
        regression_coverage: share(&coefs.iter().map(|c| c.covers()).collect::<Vec<_>>()),
        regression_abs_error: mean(&coefs.iter().map(|c| (c.estimate - c.truth).abs()).collect::<Vec<_>>()),
        cmi: mean(&outcomes.iter().map(|o| o.cmi).collect::<Vec<_>>()),
    };
    let rows = outcomes[0]
        .regression
        .iter()
        .enumerate()
        .map(|(c, first)| {
            let all: Vec<&CoefficientResult> = outcomes.iter().map(|o| &o.regression[c]).collect();
            RegressionRow {
                method: name.clone(),
                term: first.term.clone(),
                truth: first.truth,
                mean_estimate: mean(&all.iter().map(|r| r.estimate).collect::<Vec<_>>()),
                coverage: share(&all.iter().map(|r| r.covers()).collect::<Vec<_>>()),
            }
        })
        .collect();
    (summary, rows)
}

/// Runs one replication for every method.
pub fn run_replication(cfg: &StudyConfig, a: &[Vec<f64>], r: usize) -> Result<Vec<MethodOutcome>, FusionError> {
    let key = StreamKey::new(cfg.seed);
    let a_schema = cfg.a.schema()?;
    let mut rng = key.derive(1).stream(0, Tag::Fusion, r as u64);
    let rep = generate_fusion_replicate(&a_schema, a, &cfg.generator, &mut rng)?;
    let cells = tracked_cells(&rep);
    let blanked = blank_three_way(&rep.dataset()?, rep.x_col(), rep.y_col(), rep.z_col())?;
    cfg.methods
        .iter()
        .enumerate()
        .map(|(k, method)| {
            let mkey = key.derive(2 + k as u64).derive(r as u64);
            let completed = complete_with(method, &rep, &blanked, cfg, &mkey)?;
            evaluate_completed(&rep, &cells, &cfg.generator, &completed, cfg.level)
        })
        .collect()
}

/// The full study: one shared block, `replications` outcome draws, every
/// method on each, summarized per method.
pub fn run_fusion_study(cfg: &StudyConfig) -> Result<FusionReport, FusionError> {
    cfg.validate()?;
    let key = StreamKey::new(cfg.seed);
    let a = generate_a(&cfg.a, &mut key.derive(0).stream(0, Tag::Fusion, 0))?;
    let per_rep: Vec<Vec<MethodOutcome>> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| run_replication(cfg, &a, r))
        .collect::<Result<_, _>>()?;
    let mut methods = Vec::new();
    let mut regression = Vec::new();
    for (k, method) in cfg.methods.iter().enumerate() {
        let outcomes: Vec<MethodOutcome> = per_rep.iter().map(|o| o[k].clone()).collect();
        let (s, rows) = summarize(method, &outcomes);
        methods.push(s);
        regression.extend(rows);
    }
    Ok(FusionReport {
        replications: cfg.replications,
        cells: per_rep[0][0].covered.len(),
        methods,
        regression,
    })
}
