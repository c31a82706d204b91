//! TOML run configurations. Unknown keys are rejected everywhere.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use subgroup_ate::analysis::AnalysisSpec;
use subgroup_ate::data::{ClusterWeighting, CsvSchema, DesignSpec, Mechanism, Structure};
use subgroup_ate::linear_fit::{Centering, CovariateModel};
use subgroup_ate::simulation::{default_variants, ErrorDist, SimConfig, DEFAULT_SEED};
use subgroup_ate::variance::Variant;
use subgroup_ate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
    #[default]
    Both,
}

impl ReportFormat {
    pub fn json(self) -> bool {
        self != ReportFormat::Csv
    }

    pub fn csv(self) -> bool {
        self != ReportFormat::Json
    }
}

pub fn load<C: for<'de> Deserialize<'de>>(path: &Path) -> Result<C, Error> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        e => e,
    })
}

pub fn parse<C: for<'de> Deserialize<'de>>(text: &str) -> Result<C, Error> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

/// Column bindings for the input CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Columns {
    pub y: String,
    pub treatment: String,
    pub subgroup: String,
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub block: Option<String>,
    #[serde(default)]
    pub cluster: Option<String>,
    #[serde(default)]
    pub responded: Option<String>,
    #[serde(default)]
    pub weight: Option<String>,
    #[serde(default)]
    pub covariates: Vec<String>,
}

impl Columns {
    pub fn schema(&self) -> CsvSchema {
        CsvSchema {
            id: self.id.clone(),
            y: self.y.clone(),
            t: self.treatment.clone(),
            subgroup: self.subgroup.clone(),
            block: self.block.clone(),
            cluster: self.cluster.clone(),
            responded: self.responded.clone(),
            weight: self.weight.clone(),
            covariates: self.covariates.clone(),
        }
    }
}

fn default_mechanism() -> Mechanism {
    Mechanism::Complete
}

fn default_structure() -> Structure {
    Structure::Simple
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    pub p: f64,
    #[serde(default = "default_mechanism")]
    pub mechanism: Mechanism,
    #[serde(default = "default_structure")]
    pub structure: Structure,
    /// Per-block assignment rates; blocks not listed use `p`.
    #[serde(default)]
    pub block_p: BTreeMap<String, f64>,
    #[serde(default)]
    pub cluster_weighting: ClusterWeighting,
}

impl DesignConfig {
    pub fn spec(&self) -> DesignSpec {
        DesignSpec {
            mechanism: self.mechanism,
            structure: self.structure,
            p: self.p,
            block_p: self.block_p.clone(),
            cluster_weighting: self.cluster_weighting,
        }
    }
}

fn default_analysis_variants() -> Vec<Variant> {
    AnalysisSpec::default().variants
}

fn default_primary() -> Variant {
    Variant::DbActualPhi1
}

fn default_alpha() -> f64 {
    0.05
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisOptions {
    #[serde(default)]
    pub covariate_model: Option<CovariateModel>,
    #[serde(default)]
    pub centering: Centering,
    #[serde(default = "default_analysis_variants")]
    pub variants: Vec<Variant>,
    #[serde(default = "default_primary")]
    pub primary: Variant,
    /// Shorthand for adding `db_r2` to `variants`.
    #[serde(default)]
    pub r2_adjust: bool,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub null_value: f64,
    #[serde(default)]
    pub normal_df: bool,
    #[serde(default = "yes")]
    pub nonresponse_weighting: bool,
    #[serde(default)]
    pub cluster_level_subgroups: bool,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        parse("").expect("all fields have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeConfig {
    pub columns: Columns,
    pub design: DesignConfig,
    #[serde(default)]
    pub analysis: AnalysisOptions,
    #[serde(default)]
    pub format: ReportFormat,
}

impl AnalyzeConfig {
    /// Resolves defaults that depend on the data: covariates present means a
    /// pooled model unless one is named.
    pub fn resolve(&mut self) {
        let a = &mut self.analysis;
        if a.covariate_model.is_none() {
            a.covariate_model = Some(if self.columns.covariates.is_empty() {
                CovariateModel::None
            } else {
                CovariateModel::Pooled
            });
        }
        if a.r2_adjust && !a.variants.contains(&Variant::DbR2) {
            a.variants.push(Variant::DbR2);
        }
        a.r2_adjust = a.variants.contains(&Variant::DbR2);
    }

    pub fn analysis_spec(&self) -> AnalysisSpec {
        let a = &self.analysis;
        AnalysisSpec {
            covariates: a.covariate_model.unwrap_or_default(),
            centering: a.centering,
            variants: a.variants.clone(),
            primary: a.primary,
            alpha: a.alpha,
            null_value: a.null_value,
            normal_df: a.normal_df,
            nonresponse_weighting: a.nonresponse_weighting,
            cluster_level_subgroups: a.cluster_level_subgroups,
        }
    }
}

fn default_p() -> f64 {
    0.5
}

fn default_draws() -> usize {
    5
}

fn default_reps() -> usize {
    10_000
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

/// `(n, pi1, v)` triples, or the scalar keys `n`, `pi1`, `v` for a single one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default)]
    pub specs: Vec<(usize, f64, usize)>,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub pi1: Option<f64>,
    #[serde(default)]
    pub v: Option<usize>,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_draws")]
    pub n_draws: usize,
    #[serde(default = "default_reps")]
    pub n_reps: usize,
    #[serde(default)]
    pub error_dist: ErrorDist,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "yes")]
    pub heterogeneity: bool,
    #[serde(default)]
    pub format: ReportFormat,
}

impl SimulateConfig {
    /// Folds the scalar form into `specs` and clears it.
    pub fn resolve(&mut self) -> Result<(), Error> {
        match (self.n, self.pi1, self.v) {
            (None, None, None) => {}
            (Some(n), Some(pi1), v) => {
                self.specs.push((n, pi1, v.unwrap_or(0)));
                self.n = None;
                self.pi1 = None;
                self.v = None;
            }
            _ => return Err(Error::Config("give both `n` and `pi1` (and optionally `v`), or `specs`".into())),
        }
        if self.specs.is_empty() {
            return Err(Error::Config("no simulation specifications given".into()));
        }
        Ok(())
    }

    pub fn sim_configs(&self) -> Vec<SimConfig> {
        self.specs
            .iter()
            .map(|&(n, pi1, v)| SimConfig {
                n,
                pi1,
                p: self.p,
                v,
                n_draws: self.n_draws,
                n_reps: self.n_reps,
                error_dist: self.error_dist,
                variants: self.variants.clone(),
                seed: self.seed,
                alpha: self.alpha,
                heterogeneity: self.heterogeneity,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanelA {
    pub n: u64,
    pub n_k: u64,
    /// Treatment count; defaults to `round(n * p)`.
    #[serde(default)]
    pub n1: Option<u64>,
    #[serde(default = "default_p")]
    pub p: f64,
    /// Relative deviation bounds; defaults to 0, .01, ..., .5.
    #[serde(default)]
    pub c_grid: Option<Vec<f64>>,
}

fn default_phi() -> f64 {
    1.1
}

fn default_theta() -> f64 {
    0.05
}

fn default_delta_share() -> f64 {
    0.2
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanelB {
    pub n_k: u64,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_phi")]
    pub phi: f64,
    #[serde(default = "default_theta")]
    pub theta: f64,
    /// delta1 ranges over `|delta1| <= delta_share * n_k * p`.
    #[serde(default = "default_delta_share")]
    pub delta_share: f64,
    #[serde(default = "one")]
    pub delta_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default)]
    pub panel_a: Vec<PanelA>,
    #[serde(default)]
    pub panel_b: Vec<PanelB>,
}
