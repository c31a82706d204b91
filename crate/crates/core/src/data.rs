//! Trial records, the randomization design, validation and CSV I/O.
//!
//! Labels (subgroups, blocks, clusters) are arbitrary strings interned to
//! dense indices in order of first appearance. Nonrespondents stay in the
//! dataset so subgroup response rates can be computed, but they never enter
//! an estimation sample.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    /// A fixed number of units (or clusters) is drawn for treatment.
    Complete,
    /// Each unit is treated independently with probability `p`.
    Bernoulli,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    Simple,
    Blocked,
    Clustered,
    BlockedClustered,
}

impl Structure {
    pub fn has_blocks(self) -> bool {
        matches!(self, Structure::Blocked | Structure::BlockedClustered)
    }

    pub fn has_clusters(self) -> bool {
        matches!(self, Structure::Clustered | Structure::BlockedClustered)
    }
}

/// How clusters are weighted when forming subgroup means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterWeighting {
    /// Clusters count in proportion to their subgroup membership (per-person effects).
    #[default]
    SubgroupSize,
    /// Every cluster counts once (per-cluster effects).
    EqualCluster,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DesignSpec {
    pub mechanism: Mechanism,
    pub structure: Structure,
    /// Assignment rate used when a block has no entry in `block_p`.
    pub p: f64,
    pub block_p: BTreeMap<String, f64>,
    pub cluster_weighting: ClusterWeighting,
}

impl DesignSpec {
    pub fn simple(p: f64) -> Self {
        Self {
            mechanism: Mechanism::Complete,
            structure: Structure::Simple,
            p,
            block_p: BTreeMap::new(),
            cluster_weighting: ClusterWeighting::SubgroupSize,
        }
    }

    pub fn with_structure(mut self, structure: Structure) -> Self {
        self.structure = structure;
        self
    }

    pub fn with_mechanism(mut self, mechanism: Mechanism) -> Self {
        self.mechanism = mechanism;
        self
    }

    pub fn with_block_rate(mut self, block: &str, p: f64) -> Self {
        self.block_p.insert(block.to_string(), p);
        self
    }

    pub fn with_cluster_weighting(mut self, w: ClusterWeighting) -> Self {
        self.cluster_weighting = w;
        self
    }

    /// The design assignment rate for a block (or the whole trial).
    pub fn rate_for(&self, block: Option<&str>) -> f64 {
        block
            .and_then(|b| self.block_p.get(b).copied())
            .unwrap_or(self.p)
    }
}

/// One analysis unit.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord<T> {
    pub id: String,
    /// Observed outcome; NaN is allowed only for nonrespondents.
    pub y: T,
    pub treated: bool,
    pub subgroup: usize,
    pub block: Option<usize>,
    pub cluster: Option<usize>,
    pub x: Vec<T>,
    pub responded: Option<bool>,
    pub w_r: Option<T>,
}

impl<T> UnitRecord<T> {
    /// Whether the unit belongs to the estimation sample.
    pub fn is_respondent(&self) -> bool {
        self.responded != Some(false)
    }
}

/// Label-based input for [`Dataset::push`].
#[derive(Debug, Clone)]
pub struct UnitInput<'a, T> {
    pub id: Option<&'a str>,
    pub y: T,
    pub treated: bool,
    pub subgroup: &'a str,
    pub block: Option<&'a str>,
    pub cluster: Option<&'a str>,
    pub x: Vec<T>,
    pub responded: Option<bool>,
    pub w_r: Option<T>,
}

impl<'a, T: Scalar> UnitInput<'a, T> {
    pub fn new(y: T, treated: bool, subgroup: &'a str) -> Self {
        Self {
            id: None,
            y,
            treated,
            subgroup,
            block: None,
            cluster: None,
            x: Vec::new(),
            responded: None,
            w_r: None,
        }
    }

    pub fn block(mut self, b: &'a str) -> Self {
        self.block = Some(b);
        self
    }

    pub fn cluster(mut self, c: &'a str) -> Self {
        self.cluster = Some(c);
        self
    }

    pub fn covariates(mut self, x: Vec<T>) -> Self {
        self.x = x;
        self
    }

    pub fn response(mut self, responded: bool, w_r: Option<T>) -> Self {
        self.responded = Some(responded);
        self.w_r = w_r;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub records: Vec<UnitRecord<T>>,
    pub subgroup_levels: Vec<String>,
    pub block_levels: Vec<String>,
    pub cluster_levels: Vec<String>,
    pub covariate_names: Vec<String>,
    pub design: DesignSpec,
}

fn intern(levels: &mut Vec<String>, index: &mut HashMap<String, usize>, label: &str) -> usize {
    if let Some(&i) = index.get(label) {
        return i;
    }
    levels.push(label.to_string());
    index.insert(label.to_string(), levels.len() - 1);
    levels.len() - 1
}

fn find(levels: &[String], label: &str) -> Option<usize> {
    levels.iter().position(|l| l == label)
}

impl<T: Scalar> Dataset<T> {
    pub fn new(design: DesignSpec, covariate_names: Vec<String>) -> Self {
        Self {
            records: Vec::new(),
            subgroup_levels: Vec::new(),
            block_levels: Vec::new(),
            cluster_levels: Vec::new(),
            covariate_names,
            design,
        }
    }

    /// Appends a unit, interning its labels.
    pub fn push(&mut self, u: UnitInput<'_, T>) {
        let subgroup = match find(&self.subgroup_levels, u.subgroup) {
            Some(i) => i,
            None => {
                self.subgroup_levels.push(u.subgroup.to_string());
                self.subgroup_levels.len() - 1
            }
        };
        let block = u.block.map(|b| match find(&self.block_levels, b) {
            Some(i) => i,
            None => {
                self.block_levels.push(b.to_string());
                self.block_levels.len() - 1
            }
        });
        let cluster = u.cluster.map(|c| match find(&self.cluster_levels, c) {
            Some(i) => i,
            None => {
                self.cluster_levels.push(c.to_string());
                self.cluster_levels.len() - 1
            }
        });
        let id = u
            .id
            .map(str::to_string)
            .unwrap_or_else(|| (self.records.len() + 1).to_string());
        self.records.push(UnitRecord {
            id,
            y: u.y,
            treated: u.treated,
            subgroup,
            block,
            cluster,
            x: u.x,
            responded: u.responded,
            w_r: u.w_r,
        });
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn n_subgroups(&self) -> usize {
        self.subgroup_levels.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    /// `n_k` for every subgroup, counting nonrespondents.
    pub fn subgroup_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_subgroups()];
        for r in &self.records {
            sizes[r.subgroup] += 1;
        }
        sizes
    }

    /// Whether any record carries a response flag.
    pub fn has_response_data(&self) -> bool {
        self.records.iter().any(|r| r.responded.is_some())
    }

    pub fn block_label(&self, r: &UnitRecord<T>) -> Option<&str> {
        r.block.map(|b| self.block_levels[b].as_str())
    }

    pub fn rate_of(&self, r: &UnitRecord<T>) -> f64 {
        self.design.rate_for(self.block_label(r))
    }
}

/// A violated dataset or design invariant. Violations are data: [`validate`]
/// collects all of them rather than stopping at the first.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    InvalidRate { block: Option<String>, p: f64 },
    UnknownRateBlock { block: String },
    NonIntegralArmSize { block: Option<String>, units: usize, p: f64 },
    MissingBlock { id: String },
    UnexpectedBlock { id: String },
    MissingCluster { id: String },
    UnexpectedCluster { id: String },
    MixedClusterAssignment { cluster: String },
    ClusterSpansBlocks { cluster: String },
    CovariateDimension { id: String, expected: usize, found: usize },
    NonFiniteCovariate { id: String },
    NonFiniteOutcome { id: String },
    NonPositiveWeight { id: String },
    EmptyCell { subgroup: String, arm: &'static str },
    SingletonCell { subgroup: String, arm: &'static str },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        let block_name = |b: &Option<String>| match b {
            Some(b) => format!("block '{b}'"),
            None => "the trial".to_string(),
        };
        match self {
            InvalidRate { block, p } => {
                write!(f, "assignment rate {p} for {} is outside (0, 1)", block_name(block))
            }
            UnknownRateBlock { block } => write!(f, "rate given for unknown block '{block}'"),
            NonIntegralArmSize { block, units, p } => write!(
                f,
                "non-integral arm size: {units} units x p = {p} in {} under complete randomization",
                block_name(block)
            ),
            MissingBlock { id } => write!(f, "record {id} has no block label"),
            UnexpectedBlock { id } => write!(f, "record {id} has a block label but the design is unblocked"),
            MissingCluster { id } => write!(f, "record {id} has no cluster label"),
            UnexpectedCluster { id } => {
                write!(f, "record {id} has a cluster label but the design is not clustered")
            }
            MixedClusterAssignment { cluster } => {
                write!(f, "cluster '{cluster}' mixes treated and control units")
            }
            ClusterSpansBlocks { cluster } => write!(f, "cluster '{cluster}' spans several blocks"),
            CovariateDimension { id, expected, found } => {
                write!(f, "record {id} has {found} covariates, expected {expected}")
            }
            NonFiniteCovariate { id } => write!(f, "record {id} has a missing or non-finite covariate"),
            NonFiniteOutcome { id } => write!(f, "record {id} has a missing or non-finite outcome"),
            NonPositiveWeight { id } => {
                write!(f, "respondent {id} lacks a positive nonresponse weight")
            }
            EmptyCell { subgroup, arm } => {
                write!(f, "empty {arm} cell for subgroup '{subgroup}'")
            }
            SingletonCell { subgroup, arm } => write!(
                f,
                "single-unit {arm} cell for subgroup '{subgroup}' (variance needs at least 2)"
            ),
        }
    }
}

fn arm_name(treated: bool) -> &'static str {
    if treated {
        "treatment"
    } else {
        "control"
    }
}

fn is_integral(v: f64) -> bool {
    (v - v.round()).abs() <= 1e-9 * v.abs().max(1.0)
}

/// Checks every dataset and design invariant. Pure; an empty list means valid.
pub fn validate<T: Scalar>(ds: &Dataset<T>) -> Vec<Violation> {
    let mut out = Vec::new();
    let design = &ds.design;

    if !(design.p > 0.0 && design.p < 1.0) {
        out.push(Violation::InvalidRate { block: None, p: design.p });
    }
    for (b, &p) in &design.block_p {
        if !(p > 0.0 && p < 1.0) {
            out.push(Violation::InvalidRate { block: Some(b.clone()), p });
        }
        if !ds.block_levels.contains(b) {
            out.push(Violation::UnknownRateBlock { block: b.clone() });
        }
    }

    let v = ds.n_covariates();
    for r in &ds.records {
        match (design.structure.has_blocks(), r.block.is_some()) {
            (true, false) => out.push(Violation::MissingBlock { id: r.id.clone() }),
            (false, true) => out.push(Violation::UnexpectedBlock { id: r.id.clone() }),
            _ => {}
        }
        match (design.structure.has_clusters(), r.cluster.is_some()) {
            (true, false) => out.push(Violation::MissingCluster { id: r.id.clone() }),
            (false, true) => out.push(Violation::UnexpectedCluster { id: r.id.clone() }),
            _ => {}
        }
        if r.x.len() != v {
            out.push(Violation::CovariateDimension {
                id: r.id.clone(),
                expected: v,
                found: r.x.len(),
            });
        } else if r.x.iter().any(|x| !x.is_finite()) {
            out.push(Violation::NonFiniteCovariate { id: r.id.clone() });
        }
        if r.is_respondent() {
            if !r.y.is_finite() {
                out.push(Violation::NonFiniteOutcome { id: r.id.clone() });
            }
            if r.responded == Some(true) && !r.w_r.is_some_and(|w| w > T::zero() && w.is_finite()) {
                out.push(Violation::NonPositiveWeight { id: r.id.clone() });
            }
        }
    }

    // Cluster coherence: one arm and one block per cluster.
    if design.structure.has_clusters() {
        let mut arm: HashMap<usize, bool> = HashMap::new();
        let mut block: HashMap<usize, Option<usize>> = HashMap::new();
        let mut mixed = vec![false; ds.cluster_levels.len()];
        let mut spans = vec![false; ds.cluster_levels.len()];
        for r in &ds.records {
            let Some(c) = r.cluster else { continue };
            if *arm.entry(c).or_insert(r.treated) != r.treated {
                mixed[c] = true;
            }
            if *block.entry(c).or_insert(r.block) != r.block {
                spans[c] = true;
            }
        }
        for (c, name) in ds.cluster_levels.iter().enumerate() {
            if mixed[c] {
                out.push(Violation::MixedClusterAssignment { cluster: name.clone() });
            }
            if spans[c] {
                out.push(Violation::ClusterSpansBlocks { cluster: name.clone() });
            }
        }
    }

    // Complete randomization needs an integral number of treated units (or
    // clusters) in every randomization stratum.
    if design.mechanism == Mechanism::Complete {
        let blocked = design.structure.has_blocks();
        let n_strata = if blocked { ds.block_levels.len() } else { 1 };
        let mut units = vec![0usize; n_strata.max(1)];
        let mut seen_cluster = vec![false; ds.cluster_levels.len()];
        for r in &ds.records {
            let s = if blocked { r.block.unwrap_or(0) } else { 0 };
            if s >= units.len() {
                continue;
            }
            if design.structure.has_clusters() {
                if let Some(c) = r.cluster {
                    if !seen_cluster[c] {
                        seen_cluster[c] = true;
                        units[s] += 1;
                    }
                }
            } else {
                units[s] += 1;
            }
        }
        for (s, &u) in units.iter().enumerate() {
            let label = blocked.then(|| ds.block_levels.get(s).cloned()).flatten();
            let p = design.rate_for(label.as_deref());
            if u > 0 && !is_integral(u as f64 * p) {
                out.push(Violation::NonIntegralArmSize { block: label, units: u, p });
            }
        }
    }

    // Estimation cells: respondents by subgroup and arm.
    let k = ds.n_subgroups();
    let mut cells = vec![[0usize; 2]; k];
    for r in ds.records.iter().filter(|r| r.is_respondent()) {
        cells[r.subgroup][r.treated as usize] += 1;
    }
    for (s, c) in cells.iter().enumerate() {
        for treated in [true, false] {
            let count = c[treated as usize];
            let subgroup = ds.subgroup_levels[s].clone();
            let arm = arm_name(treated);
            if count == 0 {
                out.push(Violation::EmptyCell { subgroup, arm });
            } else if count == 1 {
                out.push(Violation::SingletonCell { subgroup, arm });
            }
        }
    }
    out
}

/// Binds CSV columns to record fields.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct CsvSchema {
    pub id: Option<String>,
    pub y: String,
    pub t: String,
    pub subgroup: String,
    pub block: Option<String>,
    pub cluster: Option<String>,
    pub responded: Option<String>,
    pub weight: Option<String>,
    pub covariates: Vec<String>,
}

impl CsvSchema {
    pub fn new(y: &str, t: &str, subgroup: &str) -> Self {
        Self {
            y: y.into(),
            t: t.into(),
            subgroup: subgroup.into(),
            ..Default::default()
        }
    }

    /// The schema [`write_csv`] uses for a dataset.
    pub fn for_dataset<T: Scalar>(ds: &Dataset<T>) -> Self {
        let any = |f: &dyn Fn(&UnitRecord<T>) -> bool| ds.records.iter().any(f);
        Self {
            id: Some("id".into()),
            y: "y".into(),
            t: "t".into(),
            subgroup: "subgroup".into(),
            block: any(&|r| r.block.is_some()).then(|| "block".into()),
            cluster: any(&|r| r.cluster.is_some()).then(|| "cluster".into()),
            responded: any(&|r| r.responded.is_some()).then(|| "responded".into()),
            weight: any(&|r| r.w_r.is_some()).then(|| "weight".into()),
            covariates: ds.covariate_names.clone(),
        }
    }
}

pub fn read_csv<T: Scalar>(
    path: impl AsRef<Path>,
    schema: &CsvSchema,
    design: DesignSpec,
) -> Result<Dataset<T>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_csv_from(file, schema, design)
}

pub fn read_csv_from<T: Scalar, R: Read>(
    reader: R,
    schema: &CsvSchema,
    design: DesignSpec,
) -> Result<Dataset<T>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Config(format!("cannot read CSV header: {e}")))?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("unknown column '{name}' in CSV header")))
    };
    let opt_col = |name: &Option<String>| name.as_deref().map(col).transpose();

    let y_col = col(&schema.y)?;
    let t_col = col(&schema.t)?;
    let g_col = col(&schema.subgroup)?;
    let id_col = opt_col(&schema.id)?;
    let b_col = opt_col(&schema.block)?;
    let c_col = opt_col(&schema.cluster)?;
    let r_col = opt_col(&schema.responded)?;
    let w_col = opt_col(&schema.weight)?;
    let x_cols = schema
        .covariates
        .iter()
        .map(|c| col(c))
        .collect::<Result<Vec<_>>>()?;

    let mut ds = Dataset::new(design, schema.covariates.clone());
    let mut subgroup_index = HashMap::new();
    let mut block_index = HashMap::new();
    let mut cluster_index = HashMap::new();

    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        let cell = |c: usize| rec.get(c).unwrap_or("");
        let err = |c: usize, message: String| Error::Parse {
            row,
            column: headers.get(c).unwrap_or("").to_string(),
            message,
        };
        let binary = |c: usize| -> Result<bool> {
            match cell(c).parse::<f64>() {
                Ok(v) if v == 0.0 => Ok(false),
                Ok(v) if v == 1.0 => Ok(true),
                _ => Err(err(c, format!("expected 0 or 1, found '{}'", cell(c)))),
            }
        };
        let real = |c: usize| -> Result<T> {
            cell(c)
                .parse::<T>()
                .map_err(|_| err(c, format!("malformed number '{}'", cell(c))))
        };
        let label = |c: usize| -> Result<&str> {
            let s = cell(c);
            if s.is_empty() {
                Err(err(c, "empty label".into()))
            } else {
                Ok(s)
            }
        };

        let treated = binary(t_col)?;
        let responded = r_col.map(binary).transpose()?;
        let nonrespondent = responded == Some(false);
        let y = if nonrespondent && cell(y_col).is_empty() {
            T::nan()
        } else {
            real(y_col)?
        };
        let w_r = match w_col {
            Some(c) if !(nonrespondent && cell(c).is_empty()) => Some(real(c)?),
            _ => None,
        };
        let x = x_cols.iter().map(|&c| real(c)).collect::<Result<Vec<T>>>()?;

        let subgroup = intern(&mut ds.subgroup_levels, &mut subgroup_index, label(g_col)?);
        let block = b_col
            .map(|c| label(c).map(|l| intern(&mut ds.block_levels, &mut block_index, l)))
            .transpose()?;
        let cluster = c_col
            .map(|c| label(c).map(|l| intern(&mut ds.cluster_levels, &mut cluster_index, l)))
            .transpose()?;
        let id = id_col.map(|c| cell(c).to_string()).unwrap_or_else(|| row.to_string());

        ds.records.push(UnitRecord {
            id,
            y,
            treated,
            subgroup,
            block,
            cluster,
            x,
            responded,
            w_r,
        });
    }
    Ok(ds)
}

/// Writes a dataset with the [`CsvSchema::for_dataset`] column layout.
pub fn write_csv<T: Scalar, W: Write>(ds: &Dataset<T>, writer: W) -> Result<()> {
    let schema = CsvSchema::for_dataset(ds);
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io {
        path: "<csv writer>".into(),
        source: std::io::Error::other(e),
    };

    let mut header = vec!["id".to_string(), "y".into(), "t".into(), "subgroup".into()];
    for (name, present) in [
        ("block", schema.block.is_some()),
        ("cluster", schema.cluster.is_some()),
        ("responded", schema.responded.is_some()),
        ("weight", schema.weight.is_some()),
    ] {
        if present {
            header.push(name.into());
        }
    }
    header.extend(ds.covariate_names.iter().cloned());
    w.write_record(&header).map_err(io)?;

    let fmt_real = |v: T| if v.is_nan() { String::new() } else { v.to_string() };
    for r in &ds.records {
        let mut row = vec![
            r.id.clone(),
            fmt_real(r.y),
            (r.treated as u8).to_string(),
            ds.subgroup_levels[r.subgroup].clone(),
        ];
        if schema.block.is_some() {
            row.push(r.block.map(|b| ds.block_levels[b].clone()).unwrap_or_default());
        }
        if schema.cluster.is_some() {
            row.push(r.cluster.map(|c| ds.cluster_levels[c].clone()).unwrap_or_default());
        }
        if schema.responded.is_some() {
            row.push(r.responded.map(|b| (b as u8).to_string()).unwrap_or_default());
        }
        if schema.weight.is_some() {
            row.push(r.w_r.map(fmt_real).unwrap_or_default());
        }
        row.extend(r.x.iter().map(|&x| x.to_string()));
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: "<csv writer>".into(),
        source,
    })?;
    Ok(())
}
