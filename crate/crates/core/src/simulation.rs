//! Finite-population Monte Carlo for subgroup estimators.
//!
//! Each draw fixes a population of potential outcomes; each replication
//! re-randomizes treatment and re-estimates. Random streams are keyed by
//! `(seed, draw, replication, stream)` so every replication is independent
//! of scheduling, and replications are reduced in index order, which makes
//! reports bit-identical for any thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Mechanism;
use crate::error::{Error, Result};
use crate::inference::{equal_effects_test, subgroup_test};
use crate::linear_fit::{fit, CovariateModel, Fit, ModelSpec, Sample};
use crate::variance::{self, Variant, VarianceEstimate};

/// Give up after this many consecutive rejected randomizations.
pub const MAX_REJECTIONS: u64 = 1_000_000;

/// Smallest admissible subgroup x arm cell in a kept randomization.
pub const MIN_CELL: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorDist {
    #[default]
    Normal,
    /// Standardized one-degree-of-freedom chi-square: `(z^2 - 1) / sqrt(2)`.
    ChiSquaredMatched,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimConfig {
    pub n: usize,
    /// Share of units in subgroup 1.
    pub pi1: f64,
    pub p: f64,
    /// Covariates used in the analysis model (0 or 2).
    pub v: usize,
    pub n_draws: usize,
    pub n_reps: usize,
    pub error_dist: ErrorDist,
    pub variants: Vec<Variant>,
    pub seed: u64,
    pub alpha: f64,
    /// When false the unit-level effects are forced to zero.
    pub heterogeneity: bool,
}

impl SimConfig {
    pub fn new(n: usize, pi1: f64, v: usize) -> Self {
        Self {
            n,
            pi1,
            p: 0.5,
            v,
            n_draws: 5,
            n_reps: 10_000,
            error_dist: ErrorDist::Normal,
            variants: default_variants(),
            seed: DEFAULT_SEED,
            alpha: 0.05,
            heterogeneity: true,
        }
    }

    fn subgroup1_size(&self) -> usize {
        (self.n as f64 * self.pi1).round() as usize
    }

    fn treated_size(&self) -> usize {
        (self.n as f64 * self.p).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let integral = |v: f64| (v - v.round()).abs() < 1e-9;
        if self.n < 4 {
            return Err(Error::Config(format!("n = {} is too small", self.n)));
        }
        if !(self.p > 0.0 && self.p < 1.0) || !integral(self.n as f64 * self.p) {
            return Err(Error::Config(format!("n * p = {} x {} must be an integer with 0 < p < 1", self.n, self.p)));
        }
        if !(self.pi1 > 0.0 && self.pi1 < 1.0) || !integral(self.n as f64 * self.pi1) {
            return Err(Error::Config(format!("n * pi1 = {} x {} must be an integer with 0 < pi1 < 1", self.n, self.pi1)));
        }
        if self.v > 2 {
            return Err(Error::Config(format!("the outcome model has two covariates; v = {} requested", self.v)));
        }
        if self.n_draws == 0 || self.n_reps == 0 {
            return Err(Error::Config("n_draws and n_reps must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha = {} outside (0, 1)", self.alpha)));
        }
        if self.variants.contains(&Variant::Crse) {
            return Err(Error::Config("crse needs a clustered design; the simulation is unit-randomized".into()));
        }
        Ok(())
    }

    /// Requested variants that apply to this specification.
    pub fn active_variants(&self) -> Vec<Variant> {
        self.variants
            .iter()
            .copied()
            .filter(|&v| v != Variant::DbR2 || self.v > 0)
            .collect()
    }
}

/// Fixed before any results were seen.
pub const DEFAULT_SEED: u64 = 2023;

pub fn default_variants() -> Vec<Variant> {
    vec![
        Variant::DbActualPhi1,
        Variant::DbExpectedPhi1,
        Variant::DbActualPhiadj,
        Variant::DbExpectedPhiadj,
        Variant::DbHeteroLb,
        Variant::DbR2,
        Variant::BmDf,
        Variant::Hw,
        Variant::Fs,
    ]
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const STREAM_POPULATION: u64 = 1;
const STREAM_ASSIGNMENT: u64 = 2;

/// A ChaCha8 generator keyed by `(seed, draw, rep, stream)`.
pub fn keyed_rng(seed: u64, draw: u64, rep: u64, stream: u64) -> ChaCha8Rng {
    let k0 = splitmix64(seed);
    let k1 = splitmix64(k0 ^ draw);
    let k2 = splitmix64(k1 ^ rep);
    let k3 = splitmix64(k2 ^ stream);
    let mut key = [0u8; 32];
    for (chunk, k) in key.chunks_exact_mut(8).zip([k0, k1, k2, k3]) {
        chunk.copy_from_slice(&k.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Potential outcomes of one simulated trial population.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinitePopulation {
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    /// Row-major, two covariates per unit.
    pub x: Vec<f64>,
    /// 0 for subgroup 1, 1 for subgroup 2.
    pub subgroup: Vec<usize>,
    pub tau: [f64; 2],
}

impl FinitePopulation {
    /// Mean unit effect per subgroup, recomputed from the potential outcomes.
    pub fn subgroup_effects(&self) -> [f64; 2] {
        let mut sum = [0.0; 2];
        let mut count = [0usize; 2];
        for i in 0..self.y0.len() {
            sum[self.subgroup[i]] += self.y1[i] - self.y0[i];
            count[self.subgroup[i]] += 1;
        }
        [sum[0] / count[0] as f64, sum[1] / count[1] as f64]
    }
}

/// Draws a population from the two-subgroup outcome model:
///
/// `Y(0) = G1 + 2 G2 + .4 G1 x1 + .8 G1 x2 + .7 G2 x1 + .5 G2 x2 + e` and
/// `Y(1) = Y(0) + G1 theta1 + G2 theta2` with `theta1 ~ N(0, .5)`,
/// `theta2 ~ N(0, .4)`. The first `n pi1` units form subgroup 1.
pub fn generate_population(cfg: &SimConfig, draw: usize) -> FinitePopulation {
    let mut rng = keyed_rng(cfg.seed, draw as u64, u64::MAX, STREAM_POPULATION);
    let n1 = cfg.subgroup1_size();
    let noise = |rng: &mut ChaCha8Rng| -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        match cfg.error_dist {
            ErrorDist::Normal => z,
            ErrorDist::ChiSquaredMatched => (z * z - 1.0) / std::f64::consts::SQRT_2,
        }
    };
    let mut pop = FinitePopulation {
        y0: Vec::with_capacity(cfg.n),
        y1: Vec::with_capacity(cfg.n),
        x: Vec::with_capacity(2 * cfg.n),
        subgroup: Vec::with_capacity(cfg.n),
        tau: [0.0; 2],
    };
    for i in 0..cfg.n {
        let g1 = i < n1;
        let x1 = noise(&mut rng);
        let x2 = noise(&mut rng);
        let e = noise(&mut rng);
        let z: f64 = rng.sample(StandardNormal);
        let (base, sd) = if g1 {
            (1.0 + 0.4 * x1 + 0.8 * x2, 0.5f64.sqrt())
        } else {
            (2.0 + 0.7 * x1 + 0.5 * x2, 0.4f64.sqrt())
        };
        let theta = if cfg.heterogeneity { sd * z } else { 0.0 };
        let y0 = base + e;
        pop.y0.push(y0);
        pop.y1.push(y0 + theta);
        pop.x.extend([x1, x2]);
        pop.subgroup.push(if g1 { 0 } else { 1 });
    }
    pop.tau = pop.subgroup_effects();
    pop
}

/// A complete randomization of `n p` units, redrawn until every subgroup x
/// arm cell holds at least [`MIN_CELL`] units. Returns the assignment and
/// the number of rejected draws.
pub fn draw_assignment(pop: &FinitePopulation, cfg: &SimConfig, draw: usize, rep: usize) -> Result<(Vec<bool>, u64)> {
    let n = pop.y0.len();
    let n_t = cfg.treated_size();
    let mut rng = keyed_rng(cfg.seed, draw as u64, rep as u64, STREAM_ASSIGNMENT);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rejected = 0u64;
    loop {
        for i in 0..n_t {
            let j = rng.random_range(i..n);
            order.swap(i, j);
        }
        let mut treated = vec![false; n];
        for &i in &order[..n_t] {
            treated[i] = true;
        }
        let mut cells = [[0usize; 2]; 2];
        for i in 0..n {
            cells[pop.subgroup[i]][treated[i] as usize] += 1;
        }
        if cells.iter().flatten().all(|&c| c >= MIN_CELL) {
            return Ok((treated, rejected));
        }
        rejected += 1;
        if rejected > MAX_REJECTIONS {
            return Err(Error::Config(format!(
                "more than {MAX_REJECTIONS} consecutive randomizations left a subgroup cell below {MIN_CELL} units"
            )));
        }
    }
}

fn variant_estimate(f: &Fit<f64>, k: usize, variant: Variant) -> Result<VarianceEstimate<f64>> {
    match variant {
        Variant::Hw => variance::var_huber_white(f, k),
        Variant::Crse => variance::var_crse(f, k),
        Variant::Fs => variance::var_finite_sample(f, k, Mechanism::Complete),
        v => variance::var_design_based(f, k, &v.options().expect("design-based variant")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct VariantOutcome {
    se: f64,
    covered: bool,
    reject_f: bool,
}

#[derive(Debug, Clone, PartialEq)]
struct RepRecord {
    tau1: f64,
    outcomes: Vec<VariantOutcome>,
    rejected: u64,
}

fn run_rep(pop: &FinitePopulation, cfg: &SimConfig, variants: &[Variant], draw: usize, rep: usize) -> Result<RepRecord> {
    let (treated, rejected) = draw_assignment(pop, cfg, draw, rep)?;
    let y: Vec<f64> = (0..pop.y0.len())
        .map(|i| if treated[i] { pop.y1[i] } else { pop.y0[i] })
        .collect();
    let x = if cfg.v > 0 {
        pop.x.chunks(2).flat_map(|r| r[..cfg.v].iter().copied()).collect()
    } else {
        Vec::new()
    };
    let sample = Sample::simple(y, treated, pop.subgroup.clone(), x, cfg.v, cfg.p, 2);
    let model = if cfg.v > 0 { CovariateModel::Pooled } else { CovariateModel::None };
    let f = fit(sample, ModelSpec::new(model))?;
    let tau_hat = [f.subgroup_tau(0), f.subgroup_tau(1)];
    let mut outcomes = Vec::with_capacity(variants.len());
    for &variant in variants {
        let est = [variant_estimate(&f, 0, variant)?, variant_estimate(&f, 1, variant)?];
        let se = [est[0].variance.sqrt(), est[1].variance.sqrt()];
        let (t, _) = subgroup_test(tau_hat[0], se[0], est[0].df, pop.tau[0], cfg.alpha)?;
        let reject_f = match equal_effects_test(
            &[(tau_hat[0], se[0], est[0].df), (tau_hat[1], se[1], est[1].df)],
            Some(&pop.tau),
        ) {
            Ok(test) => test.f_pooled.p_value < cfg.alpha,
            // A zero standard error makes any nonzero contrast infinitely significant.
            Err(_) => (tau_hat[0] - pop.tau[0]) != (tau_hat[1] - pop.tau[1]),
        };
        outcomes.push(VariantOutcome {
            se: se[0],
            covered: t.p_value >= cfg.alpha,
            reject_f,
        });
    }
    Ok(RepRecord {
        tau1: tau_hat[0],
        outcomes,
        rejected,
    })
}

/// One row of the report: a specification x variance variant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub n: usize,
    pub pi1: f64,
    pub v: usize,
    pub error_dist: ErrorDist,
    pub variant: String,
    pub bias: f64,
    pub coverage: f64,
    pub true_se: f64,
    pub mean_est_se: f64,
    pub type1_t: f64,
    pub type1_f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DrawSummary {
    pub draw: usize,
    pub tau: [f64; 2],
    pub rejected_randomizations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpecMetadata {
    pub config: SimConfig,
    pub draws: Vec<DrawSummary>,
    pub skipped_variants: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct SimulationReport {
    pub rows: Vec<ReportRow>,
    pub specs: Vec<SpecMetadata>,
}

pub const CSV_HEADER: [&str; 11] = [
    "n",
    "pi1",
    "v",
    "error_dist",
    "variant",
    "bias",
    "coverage",
    "true_se",
    "mean_est_se",
    "type1_t",
    "type1_f",
];

impl SimulationReport {
    pub fn merge(&mut self, other: SimulationReport) {
        self.rows.extend(other.rows);
        self.specs.extend(other.specs);
    }

    pub fn row(&self, n: usize, pi1: f64, v: usize, variant: Variant) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.n == n && r.pi1 == pi1 && r.v == v && r.variant == variant.name())
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| Error::Io {
            path: "<simulation csv>".into(),
            source: std::io::Error::other(e),
        };
        w.write_record(CSV_HEADER).map_err(io)?;
        for r in &self.rows {
            let dist = match r.error_dist {
                ErrorDist::Normal => "normal",
                ErrorDist::ChiSquaredMatched => "chi_squared_matched",
            };
            w.write_record([
                r.n.to_string(),
                r.pi1.to_string(),
                r.v.to_string(),
                dist.to_string(),
                r.variant.clone(),
                r.bias.to_string(),
                r.coverage.to_string(),
                r.true_se.to_string(),
                r.mean_est_se.to_string(),
                r.type1_t.to_string(),
                r.type1_f.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|source| Error::Io {
            path: "<simulation csv>".into(),
            source,
        })
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    s / n as f64
}

/// Runs every draw and replication of one specification.
pub fn run_simulation(cfg: &SimConfig) -> Result<SimulationReport> {
    cfg.validate()?;
    let variants = cfg.active_variants();
    let skipped = cfg
        .variants
        .iter()
        .filter(|v| !variants.contains(v))
        .map(|v| v.name().to_string())
        .collect();

    let n_var = variants.len();
    // Per variant, per draw: (coverage, mean se, type-1 F).
    let mut per_draw = vec![Vec::with_capacity(cfg.n_draws); n_var];
    let mut bias = Vec::with_capacity(cfg.n_draws);
    let mut sds = Vec::with_capacity(cfg.n_draws);
    let mut draws = Vec::with_capacity(cfg.n_draws);

    for draw in 0..cfg.n_draws {
        let pop = generate_population(cfg, draw);
        let records: Vec<RepRecord> = (0..cfg.n_reps)
            .into_par_iter()
            .map(|rep| {
                run_rep(&pop, cfg, &variants, draw, rep).map_err(|e| Error::Replication {
                    draw,
                    rep,
                    source: Box::new(e),
                })
            })
            .collect::<Result<_>>()?;

        let reps = records.len() as f64;
        let m = mean(records.iter().map(|r| r.tau1));
        let var = records.iter().map(|r| (r.tau1 - m).powi(2)).sum::<f64>() / (reps - 1.0).max(1.0);
        bias.push(m - pop.tau[0]);
        sds.push(var.sqrt());
        for (j, slot) in per_draw.iter_mut().enumerate() {
            let cover = mean(records.iter().map(|r| r.outcomes[j].covered as u8 as f64));
            let se = mean(records.iter().map(|r| r.outcomes[j].se));
            let f = mean(records.iter().map(|r| r.outcomes[j].reject_f as u8 as f64));
            slot.push((cover, se, f));
        }
        draws.push(DrawSummary {
            draw,
            tau: pop.tau,
            rejected_randomizations: records.iter().map(|r| r.rejected).sum(),
        });
    }

    let bias = mean(bias.into_iter());
    let true_se = mean(sds.into_iter());
    let rows = variants
        .iter()
        .zip(&per_draw)
        .map(|(v, d)| {
            let coverage = mean(d.iter().map(|x| x.0));
            ReportRow {
                n: cfg.n,
                pi1: cfg.pi1,
                v: cfg.v,
                error_dist: cfg.error_dist,
                variant: v.name().to_string(),
                bias,
                coverage,
                true_se,
                mean_est_se: mean(d.iter().map(|x| x.1)),
                type1_t: 1.0 - coverage,
                type1_f: mean(d.iter().map(|x| x.2)),
            }
        })
        .collect();
    Ok(SimulationReport {
        rows,
        specs: vec![SpecMetadata {
            config: cfg.clone(),
            draws,
            skipped_variants: skipped,
        }],
    })
}
