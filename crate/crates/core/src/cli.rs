//! Command-line driver. Every subcommand reads a run configuration (TOML,
//! or JSON when the file ends in `.json`) and writes plain files into the
//! output directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, DataError, DesignConfig, MixedDataset, Role, Schema};
use crate::fusion::{self, FusionError, StudyConfig};
use crate::gower::{self, DistanceSpec, GowerError};
use crate::infosel::{self, MiReport, SelectionConfig};
use crate::model::{self, Hyperpriors, LocationUpdate, Model, ModelError};
use crate::query::{self, Functional, McOptions, QueryError, QueryPoint};
use crate::sampler::{self, gelman_rubin, ChainConfig, Draws, SamplerError};

pub const OUTPUT_DIR_ENV: &str = "CMM_MIX_OUTPUT_DIR";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Distance(#[from] GowerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "cmm-mix", version, about = "Conditional mixture models for mixed-type data")]
pub struct Cli {
    /// Overrides the chain and study seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Number of independent chains for `fit` and `impute`.
    #[arg(long, global = true)]
    pub chains: Option<usize>,
    /// Size of the worker pool (defaults to the number of cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, env = OUTPUT_DIR_ENV)]
    pub output_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rank fixed variables by mutual information and set distance weights.
    SelectFeatures { config: PathBuf },
    /// Run the sampler and write traces, snapshots and completed datasets.
    Fit { config: PathBuf },
    /// Run the sampler and write completed datasets only.
    Impute { config: PathBuf },
    /// Evaluate posterior functionals over the snapshots of a previous fit.
    Query { config: PathBuf },
    /// Run the data-fusion simulation study.
    FuseSim { config: Option<PathBuf> },
    /// Summarize the traces of a previous fit.
    Report { config: PathBuf },
    /// Print the resolved configuration with every default filled in.
    ShowConfig {
        config: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

/// How the regression design is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DesignChoice {
    /// Intercept plus dummies, see [`DesignConfig::default_for`].
    Default {
        #[serde(default)]
        ordinal_fixed_linear: bool,
    },
    Terms(DesignConfig),
}

impl Default for DesignChoice {
    fn default() -> Self {
        DesignChoice::Default {
            ordinal_fixed_linear: false,
        }
    }
}

/// Distance weights and radius. Weights come from `weights`, else from a
/// feature selection when `[selection]` is present, else are equal. The
/// radius is `dstar`, else solved so that `neighbor_fraction` of the other
/// observations fall within it on average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistanceChoice {
    pub weights: Option<Vec<f64>>,
    pub dstar: Option<f64>,
    pub neighbor_fraction: f64,
}

impl Default for DistanceChoice {
    fn default() -> Self {
        DistanceChoice {
            weights: None,
            dstar: None,
            neighbor_fraction: model::DEFAULT_NEIGHBOR_FRACTION,
        }
    }
}

/// Optional replacements for individual hyperparameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperOverrides {
    pub n_components: Option<usize>,
    pub a_alpha: Option<f64>,
    pub b_alpha: Option<f64>,
    pub a_tau: Option<f64>,
    pub b_tau: Option<f64>,
    pub tau2_max: Option<f64>,
    /// Removes the upper truncation of `tau2`.
    pub tau2_untruncated: bool,
    pub h: Option<f64>,
    pub nu: Option<f64>,
    pub a_s: Option<f64>,
    pub b_s: Option<Vec<Vec<f64>>>,
    pub dirichlet: Option<Vec<Vec<f64>>>,
    pub cutoffs: Option<Vec<Vec<f64>>>,
    pub location_update: Option<LocationUpdate>,
}

impl HyperOverrides {
    pub fn apply(&self, h: &mut Hyperpriors) {
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = &self.$f {
                    h.$f = v.clone();
                }
            )*};
        }
        set!(n_components, a_alpha, b_alpha, a_tau, b_tau, h, nu, a_s, b_s, dirichlet, cutoffs, location_update);
        if let Some(v) = self.tau2_max {
            h.tau2_max = Some(v);
        }
        if self.tau2_untruncated {
            h.tau2_max = None;
        }
    }
}

/// One named posterior query. `fixed` gives every fixed variable on its
/// original scale; `x` gives nominal random levels by name (missing names
/// are averaged or summed out); `target` is on the model scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEntry {
    pub name: String,
    pub fixed: BTreeMap<String, f64>,
    #[serde(default)]
    pub x: BTreeMap<String, u32>,
    #[serde(default)]
    pub target: Option<Vec<f64>>,
    pub functional: Functional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuerySpec {
    pub level: f64,
    pub mc: McOptions,
    pub queries: Vec<QueryEntry>,
}

impl Default for QuerySpec {
    fn default() -> Self {
        QuerySpec {
            level: 0.95,
            mc: McOptions::default(),
            queries: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub chains: usize,
    pub design: DesignChoice,
    pub selection: Option<SelectionConfig>,
    pub distance: DistanceChoice,
    pub hyper: HyperOverrides,
    pub chain: ChainConfig,
    pub query: QuerySpec,
    pub fusion: StudyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            schema: None,
            output_dir: PathBuf::from("cmm-mix-out"),
            chains: 1,
            design: DesignChoice::default(),
            selection: None,
            distance: DistanceChoice::default(),
            hyper: HyperOverrides::default(),
            chain: ChainConfig::default(),
            query: QuerySpec::default(),
            fusion: StudyConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a configuration; relative data and schema paths are resolved
    /// against the directory of the file.
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let mut cfg: RunConfig = if is_json {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        }
        .map_err(|message| CliError::Parse {
            path: path.to_path_buf(),
            message,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data, &mut cfg.schema].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.chains == 0 {
            return Err(CliError::Config("at least one chain is required".into()));
        }
        if !(self.distance.neighbor_fraction > 0.0 && self.distance.neighbor_fraction <= 1.0) {
            return Err(CliError::Config("neighbor_fraction must lie in (0, 1]".into()));
        }
        if !(self.query.level > 0.0 && self.query.level < 1.0) {
            return Err(CliError::Config("query level must lie in (0, 1)".into()));
        }
        self.chain.validate()?;
        Ok(())
    }

    fn input_paths(&self) -> Result<(&Path, &Path), CliError> {
        fn need<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, CliError> {
            let p = p
                .as_deref()
                .ok_or_else(|| CliError::Config(format!("`{what}` is not set in the configuration")))?;
            if !p.exists() {
                return Err(CliError::Config(format!("{what} file {} does not exist", p.display())));
            }
            Ok(p)
        }
        Ok((need(&self.data, "data")?, need(&self.schema, "schema")?))
    }

    pub fn load_data(&self) -> Result<MixedDataset, CliError> {
        let (data, schema) = self.input_paths()?;
        let schema = Schema::from_path(schema)?;
        Ok(data::load_csv(data, &schema)?)
    }

    pub fn design(&self, schema: &Schema) -> DesignConfig {
        match &self.design {
            DesignChoice::Default { ordinal_fixed_linear } => DesignConfig::default_for(schema, *ordinal_fixed_linear),
            DesignChoice::Terms(d) => d.clone(),
        }
    }

    /// Distance specification and, when weights came from a selection run,
    /// its report.
    pub fn distance(&self, data: &MixedDataset) -> Result<(DistanceSpec, Option<MiReport>), CliError> {
        if data.schema().layout().fixed.is_empty() {
            let spec = DistanceSpec {
                weights: vec![],
                kinds: vec![],
                dstar: 1.0,
            };
            return Ok((spec, None));
        }
        let (weights, report) = match (&self.distance.weights, &self.selection) {
            (Some(w), _) => (w.clone(), None),
            (None, Some(sel)) => {
                let r = infosel::select_features(data, sel);
                (r.weights.clone(), Some(r))
            }
            (None, None) => (DistanceSpec::equal_weights(data, 1.0).weights, None),
        };
        let spec = DistanceSpec::with_weights(data, weights, 1.0);
        let dstar = match self.distance.dstar {
            Some(d) => d,
            None => gower::solve_dstar(data, &spec, self.distance.neighbor_fraction),
        };
        let spec = DistanceSpec { dstar, ..spec };
        spec.validate()?;
        Ok((spec, report))
    }

    pub fn build_model(&self) -> Result<Model, CliError> {
        let data = self.load_data()?;
        let (distance, _) = self.distance(&data)?;
        let mut hyper = model::default_hyperpriors_with(&data, distance);
        self.hyper.apply(&mut hyper);
        let design = self.design(data.schema());
        Ok(Model::new(data, &design, hyper)?)
    }
}

/// Applies command-line overrides. The output directory precedence is
/// flag or environment variable, then the configuration file.
pub fn resolve(cli: &Cli, config: Option<&Path>) -> Result<RunConfig, CliError> {
    let mut cfg = match config {
        Some(p) => RunConfig::from_path(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.chain.seed = seed;
        cfg.fusion.seed = seed;
    }
    if let Some(c) = cli.chains {
        cfg.chains = c;
    }
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<fs::File, CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::File::create(path).map_err(io_err(path))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    create(path)?.write_all(bytes).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn write_dataset(path: &Path, data: &MixedDataset) -> Result<(), CliError> {
    data.write_csv(create(path)?)?;
    Ok(())
}

fn chain_dir(out: &Path, c: usize) -> PathBuf {
    out.join(format!("chain{c}"))
}

/// Writes `mi_report.json` and a per-candidate `mi_report.csv`.
pub fn cmd_select_features(cfg: &RunConfig) -> Result<MiReport, CliError> {
    let data = cfg.load_data()?;
    let sel = cfg.selection.unwrap_or_default();
    let report = infosel::select_features(&data, &sel);
    let out = &cfg.output_dir;
    write_json(&out.join("mi_report.json"), &report)?;
    let path = out.join("mi_report.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["candidate", "i_max", "i_max_normalized", "weight", "selection_step"])?;
    let schema = data.schema();
    let fixed: Vec<&str> = schema
        .variables
        .iter()
        .filter(|v| v.role == Role::Fixed)
        .map(|v| v.name.as_str())
        .collect();
    let order = report.selected();
    for (l, name) in fixed.iter().enumerate() {
        let step = order.iter().position(|&s| s == l).map(|s| (s + 1).to_string()).unwrap_or_default();
        w.write_record([
            name.to_string(),
            format!("{:?}", report.i_max[l]),
            format!("{:?}", report.i_max_normalized[l]),
            format!("{:?}", report.weights[l]),
            step,
        ])?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub chains: usize,
    pub seeds: Vec<u64>,
    pub design_terms: Vec<String>,
    pub distance: DistanceSpec,
    pub final_active_components: Vec<usize>,
    pub posterior_mean_alpha: Vec<f64>,
    /// Potential scale reduction of `alpha`, present with two or more chains.
    pub rhat_alpha: Option<f64>,
}

fn run_configured_chains(cfg: &RunConfig, model: &Model) -> Result<Vec<Draws>, CliError> {
    Ok(if cfg.chains == 1 {
        vec![sampler::run_chain(model, &cfg.chain)?]
    } else {
        sampler::run_chains(model, &cfg.chain, cfg.chains)?
    })
}

/// Chain seeds in the same order as [`sampler::run_chains`] derives them.
fn chain_seeds(cfg: &RunConfig) -> Vec<u64> {
    if cfg.chains == 1 {
        return vec![cfg.chain.seed];
    }
    let base = crate::rng::StreamKey::new(cfg.chain.seed);
    (0..cfg.chains as u64).map(|c| base.derive(c).seed()).collect()
}

/// Per chain: `trace.csv`, `snapshots.bin`, `final_state.bin` and
/// `completed_<j>.csv`; plus `fit_summary.json`.
pub fn cmd_fit(cfg: &RunConfig) -> Result<FitSummary, CliError> {
    let model = cfg.build_model()?;
    let draws = run_configured_chains(cfg, &model)?;
    let seeds = chain_seeds(cfg);
    for (c, d) in draws.iter().enumerate() {
        let dir = chain_dir(&cfg.output_dir, c);
        let trace = dir.join("trace.csv");
        d.write_trace(create(&trace)?)?;
        write_bytes(&dir.join("snapshots.bin"), &sampler::encode_snapshots(seeds[c], &d.snapshots))?;
        let sweeps = cfg.chain.iterations as u64;
        write_bytes(&dir.join("final_state.bin"), &sampler::encode_state(seeds[c], sweeps, &d.final_state))?;
        for (j, data) in d.completed.iter().enumerate() {
            write_dataset(&dir.join(format!("completed_{}.csv", j + 1)), data)?;
        }
    }
    let alphas: Vec<Vec<f64>> = draws.iter().map(|d| d.params().map(|p| p.alpha).collect()).collect();
    let summary = FitSummary {
        chains: draws.len(),
        seeds,
        design_terms: model.design.labels().to_vec(),
        distance: model.hyper.distance.clone(),
        final_active_components: draws.iter().map(|d| sampler::active_components(&d.final_state)).collect(),
        posterior_mean_alpha: alphas.iter().map(|a| a.iter().sum::<f64>() / a.len() as f64).collect(),
        rhat_alpha: (alphas.len() > 1 && alphas.iter().all(|a| a.len() > 1)).then(|| gelman_rubin(&alphas)),
    };
    write_json(&cfg.output_dir.join("fit_summary.json"), &summary)?;
    Ok(summary)
}

/// Writes `completed_<chain>_<j>.csv` for every chain and completion.
pub fn cmd_impute(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let model = cfg.build_model()?;
    let draws = run_configured_chains(cfg, &model)?;
    let mut paths = Vec::new();
    for (c, d) in draws.iter().enumerate() {
        for (j, data) in d.completed.iter().enumerate() {
            let path = cfg.output_dir.join(format!("completed_{}_{}.csv", c + 1, j + 1));
            write_dataset(&path, data)?;
            paths.push(path);
        }
    }
    Ok(paths)
}

fn load_snapshots(out: &Path, chains: usize) -> Result<Vec<model::Params>, CliError> {
    let mut all = Vec::new();
    for c in 0..chains {
        let path = chain_dir(out, c).join("snapshots.bin");
        let buf = fs::read(&path).map_err(io_err(&path))?;
        all.extend(sampler::decode_snapshots(&buf)?.into_iter().map(|(_, p)| p));
    }
    Ok(all)
}

/// Converts a named query into model-scale conditioning arguments.
pub fn query_point(model: &Model, entry: &QueryEntry) -> Result<QueryPoint, CliError> {
    let schema = model.data.schema();
    let layout = schema.layout();
    let bad = |m: String| CliError::Config(format!("query `{}`: {m}", entry.name));
    for name in entry.fixed.keys().chain(entry.x.keys()) {
        if schema.index_of(name).is_none() {
            return Err(bad(format!("unknown variable `{name}`")));
        }
    }
    let f = layout
        .fixed
        .iter()
        .map(|&c| {
            let name = &schema.variables[c].name;
            let v = *entry.fixed.get(name).ok_or_else(|| bad(format!("fixed variable `{name}` is not set")))?;
            Ok(match model.data.standardization(c) {
                Some(s) => s.apply(v),
                None => v,
            })
        })
        .collect::<Result<Vec<f64>, CliError>>()?;
    let x = layout
        .nominal
        .iter()
        .map(|&c| entry.x.get(&schema.variables[c].name).copied())
        .collect();
    let mut point = QueryPoint::new(f).with_x(x);
    point.target = entry.target.clone();
    Ok(point)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub name: String,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub draws: usize,
}

/// Writes `query_summary.csv` (one row per query) and `query_draws.csv`
/// (one row per query and draw).
pub fn cmd_query(cfg: &RunConfig) -> Result<Vec<QueryRow>, CliError> {
    if cfg.query.queries.is_empty() {
        return Err(CliError::Config("no [[query.queries]] entries".into()));
    }
    let model = cfg.build_model()?;
    let params = load_snapshots(&cfg.output_dir, cfg.chains)?;
    let mut rows = Vec::new();
    let draws_path = cfg.output_dir.join("query_draws.csv");
    let mut dw = csv::Writer::from_writer(create(&draws_path)?);
    dw.write_record(["name", "draw", "value"])?;
    for entry in &cfg.query.queries {
        let point = query_point(&model, entry)?;
        let s = query::summarize_over_draws(&model, &params, &point, &entry.functional, cfg.query.level, &cfg.query.mc)?;
        for (t, v) in s.values.iter().enumerate() {
            dw.write_record([entry.name.clone(), (t + 1).to_string(), format!("{v:?}")])?;
        }
        rows.push(QueryRow {
            name: entry.name.clone(),
            mean: s.mean,
            lower: s.lower,
            upper: s.upper,
            level: s.level,
            draws: s.values.len(),
        });
    }
    dw.flush().map_err(io_err(&draws_path))?;
    let path = cfg.output_dir.join("query_summary.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(rows)
}

/// Writes `fusion_report.csv`, `fusion_report.json` and
/// `fusion_regression.csv`.
pub fn cmd_fuse_sim(cfg: &RunConfig) -> Result<fusion::FusionReport, CliError> {
    let report = fusion::run_fusion_study(&cfg.fusion)?;
    let out = &cfg.output_dir;
    report.write_csv(create(&out.join("fusion_report.csv"))?)?;
    report.write_regression_csv(create(&out.join("fusion_regression.csv"))?)?;
    write_json(&out.join("fusion_report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub chain: String,
    pub quantity: String,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Summarizes post-burn-in traces into `report.csv`: posterior mean and
/// 95% interval of `alpha` and of the active component count per chain,
/// plus the potential scale reduction of `alpha` across chains.
pub fn cmd_report(cfg: &RunConfig) -> Result<Vec<ReportRow>, CliError> {
    let mut rows = Vec::new();
    let mut alphas = Vec::new();
    for c in 0..cfg.chains {
        let path = chain_dir(&cfg.output_dir, c).join("trace.csv");
        let mut r = csv::Reader::from_reader(fs::File::open(&path).map_err(io_err(&path))?);
        let headers = r.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| CliError::Config(format!("{}: no `{name}` column", path.display())))
        };
        let (ci, ca, cn) = (col("iteration")?, col("alpha")?, col("active")?);
        let num = |s: &str| s.parse::<f64>().map_err(|e| CliError::Config(format!("{}: {e}", path.display())));
        let (mut alpha, mut active) = (Vec::new(), Vec::new());
        for rec in r.records() {
            let rec = rec?;
            if num(&rec[ci])? as usize > cfg.chain.burn_in {
                alpha.push(num(&rec[ca])?);
                active.push(num(&rec[cn])?);
            }
        }
        for (quantity, values) in [("alpha", &alpha), ("active_components", &active)] {
            let s = query::summarize_values(values.clone(), 0.95)?;
            rows.push(ReportRow {
                chain: (c + 1).to_string(),
                quantity: quantity.into(),
                mean: s.mean,
                lower: s.lower,
                upper: s.upper,
            });
        }
        alphas.push(alpha);
    }
    if alphas.len() > 1 {
        let r = gelman_rubin(&alphas);
        rows.push(ReportRow {
            chain: "all".into(),
            quantity: "rhat_alpha".into(),
            mean: r,
            lower: r,
            upper: r,
        });
    }
    let path = cfg.output_dir.join("report.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(rows)
}

pub fn show_config(cfg: &RunConfig, json: bool) -> Result<String, CliError> {
    if json {
        serde_json::to_string_pretty(cfg).map_err(|e| CliError::Config(e.to_string()))
    } else {
        toml::to_string(cfg).map_err(|e| CliError::Config(e.to_string()))
    }
}

/// Runs a parsed command line, printing a short account to stdout.
pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(t) = cli.threads {
        // A pool may already exist when called twice in one process; the
        // first size then stays in effect.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match &cli.command {
        Command::SelectFeatures { config } => {
            let cfg = resolve(&cli, Some(config))?;
            let r = cmd_select_features(&cfg)?;
            println!("selected {:?} ({:?}); weights {:?}", r.selected(), r.stop, r.weights);
        }
        Command::Fit { config } => {
            let cfg = resolve(&cli, Some(config))?;
            let s = cmd_fit(&cfg)?;
            println!(
                "{} chain(s) written to {}; active components {:?}",
                s.chains,
                cfg.output_dir.display(),
                s.final_active_components
            );
        }
        Command::Impute { config } => {
            let cfg = resolve(&cli, Some(config))?;
            let paths = cmd_impute(&cfg)?;
            println!("{} completed dataset(s) written to {}", paths.len(), cfg.output_dir.display());
        }
        Command::Query { config } => {
            let cfg = resolve(&cli, Some(config))?;
            for r in cmd_query(&cfg)? {
                println!("{}: {:.6} [{:.6}, {:.6}]", r.name, r.mean, r.lower, r.upper);
            }
        }
        Command::FuseSim { config } => {
            let cfg = resolve(&cli, config.as_deref())?;
            let report = cmd_fuse_sim(&cfg)?;
            for m in &report.methods {
                println!(
                    "{:<12} coverage {:.3}  mean abs error {:.4}  cross-block zero coverage {:.3}",
                    m.method, m.coverage, m.mean_abs_error, m.cross_block_zero_coverage
                );
            }
        }
        Command::Report { config } => {
            let cfg = resolve(&cli, Some(config))?;
            for r in cmd_report(&cfg)? {
                println!("chain {} {}: {:.4} [{:.4}, {:.4}]", r.chain, r.quantity, r.mean, r.lower, r.upper);
            }
        }
        Command::ShowConfig { config, json } => {
            let cfg = resolve(&cli, config.as_deref())?;
            println!("{}", show_config(&cfg, *json)?);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCHEMA: &str = r#"
[[variables]]
name = "g"
role = "fixed"
kind = "nominal"
categories = 2

[[variables]]
name = "y"
role = "random"
kind = "ordinal"
levels = 3

[[variables]]
name = "x"
role = "random"
kind = "nominal"
categories = 2
"#;

    fn fixture(dir: &Path, extra: &str) -> PathBuf {
        fs::write(dir.join("schema.toml"), SCHEMA).unwrap();
        let mut csv = String::from("g,y,x\n");
        for i in 0..60 {
            let g = 1 + i % 2;
            let y = if i % 7 == 0 { "NA".to_string() } else { (1 + (i * 5 + g) % 3).to_string() };
            let x = if i % 5 == 0 { "NA".to_string() } else { (1 + (i / 2 + g) % 2).to_string() };
            csv.push_str(&format!("{g},{y},{x}\n"));
        }
        fs::write(dir.join("data.csv"), csv).unwrap();
        let cfg = format!(
            "data = \"data.csv\"\nschema = \"schema.toml\"\noutput_dir = \"{}\"\n{extra}\n[chain]\niterations = 40\nburn_in = 10\nthin = 2\nseed = 3\nn_completed = 2\n[hyper]\nn_components = 5\n",
            dir.join("out").display()
        );
        let path = dir.join("run.toml");
        fs::write(&path, cfg).unwrap();
        path
    }

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("cmm-mix").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn show_config_round_trips() {
        let cfg = RunConfig::default();
        let text = show_config(&cfg, false).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let json = show_config(&cfg, true).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.toml");
        fs::write(&p, "itertions = 5\n").unwrap();
        assert!(matches!(RunConfig::from_path(&p), Err(CliError::Parse { .. })));
    }

    #[test]
    fn burn_in_error_before_compute() {
        let dir = tempfile::tempdir().unwrap();
        let path = fixture(dir.path(), "");
        let text = fs::read_to_string(&path).unwrap().replace("burn_in = 10", "burn_in = 40");
        fs::write(&path, text).unwrap();
        let cli = parse(&["fit", path.to_str().unwrap()]);
        assert!(matches!(run(cli), Err(CliError::Sampler(SamplerError::Config(_)))));
        assert!(!dir.path().join("out").exists());
    }

    #[test]
    fn flags_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = fixture(dir.path(), "");
        let cli = parse(&["--seed", "77", "--chains", "3", "--output-dir", "elsewhere", "fit", path.to_str().unwrap()]);
        let cfg = resolve(&cli, Some(&path)).unwrap();
        assert_eq!((cfg.chain.seed, cfg.fusion.seed, cfg.chains), (77, 77, 3));
        assert_eq!(cfg.output_dir, PathBuf::from("elsewhere"));
        assert_eq!(cfg.data.unwrap(), dir.path().join("data.csv"));
    }

    #[test]
    fn fit_is_byte_identical_on_rerun_and_query_sums_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let queries = "[[query.queries]]\nname = \"x1\"\nfixed = { g = 1 }\nx = { x = 1 }\nfunctional = { kind = \"pr_x\" }\n\
                       [[query.queries]]\nname = \"x2\"\nfixed = { g = 1 }\nx = { x = 2 }\nfunctional = { kind = \"pr_x\" }\n";
        let path = fixture(dir.path(), queries);
        let cfg = RunConfig::from_path(&path).unwrap();
        cmd_fit(&cfg).unwrap();
        let trace = dir.path().join("out/chain0/trace.csv");
        let first = fs::read(&trace).unwrap();
        let snaps = fs::read(dir.path().join("out/chain0/snapshots.bin")).unwrap();
        cmd_fit(&cfg).unwrap();
        assert_eq!(fs::read(&trace).unwrap(), first);
        assert_eq!(fs::read(dir.path().join("out/chain0/snapshots.bin")).unwrap(), snaps);
        assert!(dir.path().join("out/chain0/completed_2.csv").exists());

        let rows = cmd_query(&cfg).unwrap();
        assert!((rows[0].mean + rows[1].mean - 1.0).abs() < 1e-12);
        assert_eq!(rows[0].draws, 15);

        let report = cmd_report(&cfg).unwrap();
        assert_eq!(report.len(), 2);
        assert!(report.iter().all(|r| r.lower <= r.mean && r.mean <= r.upper));
    }

    #[test]
    fn impute_emits_only_completed_data() {
        let dir = tempfile::tempdir().unwrap();
        let path = fixture(dir.path(), "");
        let mut cfg = RunConfig::from_path(&path).unwrap();
        cfg.chains = 2;
        let paths = cmd_impute(&cfg).unwrap();
        assert_eq!(paths.len(), 4);
        let mut names: Vec<String> = fs::read_dir(dir.path().join("out"))
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        assert_eq!(names, ["completed_1_1.csv", "completed_1_2.csv", "completed_2_1.csv", "completed_2_2.csv"]);
        let text = fs::read_to_string(&paths[0]).unwrap();
        assert!(!text.contains("NA"));
    }

    #[test]
    fn selection_sets_weights() {
        let dir = tempfile::tempdir().unwrap();
        let path = fixture(dir.path(), "[selection]\nt1 = 0.0\nt2 = 1.0\nbins = 4\n");
        let cfg = RunConfig::from_path(&path).unwrap();
        let report = cmd_select_features(&cfg).unwrap();
        assert_eq!(report.weights, vec![1.0]);
        let table = fs::read_to_string(dir.path().join("out/mi_report.csv")).unwrap();
        assert!(table.lines().nth(1).unwrap().starts_with("g,"));
    }
}
