//! Variance estimators for subgroup effects.
//!
//! The design-based family shares one two-arm kernel: residual sums of
//! squares per arm, divided by degrees-of-freedom denominators
//! `n^t - V p_t pi^t - 1`, then by realized or expected arm sizes. Unit,
//! weighted, blocked and cluster versions differ only in what they feed it,
//! which is what makes the singleton-cluster, single-block and unit-weight
//! reductions exact.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::Mechanism;
use crate::design_math::{self, AllocationLaw, Arm};
use crate::error::{Error, Result};
use crate::linear_fit::Fit;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Sizes {
    #[default]
    Actual,
    Expected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DfRule {
    #[default]
    DesignBased,
    BellMcCaffrey,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct VarianceOptions {
    pub sizes: Sizes,
    /// Subtract `pi^t` instead of one in the residual variance denominators.
    pub phi_adjust: bool,
    /// Subtract the heterogeneity lower bound `(s(1) - s(0))^2 / n_k`.
    pub heterogeneity_bound: bool,
    /// Inflate by `1 / (1 - R^2)` of the treatment column on the others.
    pub r2_adjust: bool,
    pub df_rule: DfRule,
}

impl VarianceOptions {
    pub fn sizes(mut self, sizes: Sizes) -> Self {
        self.sizes = sizes;
        self
    }

    pub fn phi_adjust(mut self, on: bool) -> Self {
        self.phi_adjust = on;
        self
    }

    pub fn heterogeneity_bound(mut self, on: bool) -> Self {
        self.heterogeneity_bound = on;
        self
    }

    pub fn r2_adjust(mut self, on: bool) -> Self {
        self.r2_adjust = on;
        self
    }

    pub fn df_rule(mut self, rule: DfRule) -> Self {
        self.df_rule = rule;
        self
    }
}

/// The standard-error variants reported side by side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    DbActualPhi1,
    DbExpectedPhi1,
    DbActualPhiadj,
    DbExpectedPhiadj,
    DbHeteroLb,
    DbR2,
    BmDf,
    Fs,
    Hw,
    Crse,
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::DbActualPhi1,
        Variant::DbExpectedPhi1,
        Variant::DbActualPhiadj,
        Variant::DbExpectedPhiadj,
        Variant::DbHeteroLb,
        Variant::DbR2,
        Variant::BmDf,
        Variant::Fs,
        Variant::Hw,
        Variant::Crse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::DbActualPhi1 => "db_actual_phi1",
            Variant::DbExpectedPhi1 => "db_expected_phi1",
            Variant::DbActualPhiadj => "db_actual_phiadj",
            Variant::DbExpectedPhiadj => "db_expected_phiadj",
            Variant::DbHeteroLb => "db_hetero_lb",
            Variant::DbR2 => "db_r2",
            Variant::BmDf => "bm_df",
            Variant::Fs => "fs",
            Variant::Hw => "hw",
            Variant::Crse => "crse",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == name)
    }

    /// Options of the design-based variants; `None` for sandwich and
    /// finite-sample variants.
    pub fn options(self) -> Option<VarianceOptions> {
        let base = VarianceOptions::default();
        Some(match self {
            Variant::DbActualPhi1 => base,
            Variant::DbExpectedPhi1 => base.sizes(Sizes::Expected),
            Variant::DbActualPhiadj => base.phi_adjust(true),
            Variant::DbExpectedPhiadj => base.sizes(Sizes::Expected).phi_adjust(true),
            Variant::DbHeteroLb => base.heterogeneity_bound(true),
            Variant::DbR2 => base.r2_adjust(true),
            Variant::BmDf => base.df_rule(DfRule::BellMcCaffrey),
            Variant::Fs | Variant::Hw | Variant::Crse => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ArmResidualStats<T> {
    pub s2: T,
    pub df_denominator: f64,
    pub cell_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceEstimate<T> {
    pub variance: T,
    /// `f64::INFINITY` under the normal rule.
    pub df: f64,
    /// The heterogeneity bound drove the estimate below zero.
    pub clamped: bool,
}

/// What the two-arm kernel needs about one arm of one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmInput<T> {
    /// Sum of squared (scaled) residuals.
    pub ss: T,
    pub count: usize,
    /// `pi^t`: the cell's share of its arm.
    pub share: f64,
    /// `V p_t` (times the block share in blocked designs).
    pub covariate_load: f64,
    /// Expected arm size of the cell.
    pub expected: f64,
}

pub fn arm_stats<T: Scalar>(a: &ArmInput<T>, phi_adjust: bool, cell: &str) -> Result<ArmResidualStats<T>> {
    let tail = if phi_adjust { a.share } else { 1.0 };
    let den = a.count as f64 - a.covariate_load * a.share - tail;
    if !(den > 0.0) {
        return Err(Error::InsufficientCell {
            cell: cell.to_string(),
            denominator: den,
        });
    }
    Ok(ArmResidualStats {
        s2: a.ss / T::of(den),
        df_denominator: den,
        cell_size: a.count,
    })
}

/// `s2(1)/D1 + s2(0)/D0` with the optional bound and collinearity factor.
/// Arms are indexed `[control, treated]`.
pub fn two_arm_variance<T: Scalar>(
    arms: &[ArmInput<T>; 2],
    n_total: f64,
    opts: &VarianceOptions,
    r2: Option<T>,
    cell: &str,
) -> Result<(T, bool)> {
    let s0 = arm_stats(&arms[0], opts.phi_adjust, cell)?;
    let s1 = arm_stats(&arms[1], opts.phi_adjust, cell)?;
    let (d0, d1) = match opts.sizes {
        Sizes::Actual => (arms[0].count as f64, arms[1].count as f64),
        Sizes::Expected => (arms[0].expected, arms[1].expected),
    };
    let mut v = s1.s2 / T::of(d1) + s0.s2 / T::of(d0);
    let mut clamped = false;
    if opts.heterogeneity_bound {
        let gap = s1.s2.sqrt() - s0.s2.sqrt();
        v = v - gap * gap / T::of(n_total);
        if v < T::zero() {
            v = T::zero();
            clamped = true;
        }
    }
    if let Some(r2) = r2 {
        v = v / (T::one() - r2);
    }
    Ok((v, clamped))
}

/// `n_k - V (n_k / n) - 2h`.
pub fn design_df(n_k: usize, n: usize, v: usize, h: usize) -> f64 {
    n_k as f64 - v as f64 * (n_k as f64 / n as f64) - 2.0 * h as f64
}

/// Welch-type degrees of freedom weighting the smaller arm more heavily.
pub fn bell_mccaffrey_df(n_k1: f64, n_k0: f64, v: f64, p: f64, pi_k1: f64, pi_k0: f64) -> Result<f64> {
    let a = n_k1 - v * p * pi_k1 - 1.0;
    let b = n_k0 - v * (1.0 - p) * pi_k0 - 1.0;
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::Domain(format!(
            "Bell-McCaffrey denominators must be positive (got {a}, {b})"
        )));
    }
    let n = n_k1 + n_k0;
    Ok(n * n * a * b / (n_k1 * n_k1 * a + n_k0 * n_k0 * b))
}

fn pick_df(
    opts: &VarianceOptions,
    design: f64,
    counts: [usize; 2],
    totals: [usize; 2],
    v: usize,
    p: f64,
) -> Result<f64> {
    match opts.df_rule {
        DfRule::DesignBased => Ok(design),
        DfRule::Normal => Ok(f64::INFINITY),
        DfRule::BellMcCaffrey => bell_mccaffrey_df(
            counts[1] as f64,
            counts[0] as f64,
            v as f64,
            p,
            counts[1] as f64 / totals[1] as f64,
            counts[0] as f64 / totals[0] as f64,
        ),
    }
}

fn arm_totals_by_block<T: Scalar>(f: &Fit<T>) -> Vec<[usize; 2]> {
    let s = &f.sample;
    let blocks = if f.spec.blocked { s.n_blocks() } else { 1 };
    let mut t = vec![[0; 2]; blocks];
    for i in 0..s.n() {
        let b = if f.spec.blocked { s.block[i] } else { 0 };
        t[b][s.treated[i] as usize] += 1;
    }
    t
}

fn members_of<T: Scalar>(f: &Fit<T>, cell: usize) -> Vec<usize> {
    (0..f.sample.n()).filter(|&i| f.design.unit_cell[i] == cell).collect()
}

/// Residual variance inputs of one unit-level cell.
fn unit_cell_inputs<T: Scalar>(f: &Fit<T>, cell: usize, totals: &[[usize; 2]]) -> [ArmInput<T>; 2] {
    let s = &f.sample;
    let c = &f.design.cells[cell];
    let members = members_of(f, cell);
    let wbar = match &s.weight {
        None => T::one(),
        Some(w) => members.iter().map(|&i| w[i]).sum::<T>() / T::of_count(members.len()),
    };
    let mut ss = [T::zero(); 2];
    for &i in &members {
        let r = s.w(i) / wbar * f.residuals[i];
        ss[s.treated[i] as usize] = ss[s.treated[i] as usize] + r * r;
    }
    let p = s.block_rate[c.block];
    let n_block: usize = totals[c.block].iter().sum();
    let q = if totals.len() == 1 { 1.0 } else { n_block as f64 / s.n() as f64 };
    let v = f.n_covariates() as f64;
    let size = c.size() as f64;
    let arm = |t: usize, pt: f64| ArmInput {
        ss: ss[t],
        count: c.counts[t],
        share: c.counts[t] as f64 / totals[c.block][t] as f64,
        covariate_load: v * pt * q,
        expected: size * pt,
    };
    [arm(0, 1.0 - p), arm(1, p)]
}

fn cell_label<T: Scalar>(f: &Fit<T>, cell: usize) -> String {
    let c = &f.design.cells[cell];
    if f.spec.blocked {
        format!("{}:{}", f.sample.block_labels[c.block], f.sample.subgroup_labels[c.subgroup])
    } else {
        f.sample.subgroup_labels[c.subgroup].clone()
    }
}

/// Pools per-block variances: `sum n_bk^2 Var_bk / (sum n_bk)^2`.
pub fn pool_block_variances<T: Scalar>(parts: &[(usize, T)]) -> T {
    if let [(_, v)] = parts {
        return *v;
    }
    let n: usize = parts.iter().map(|(n, _)| n).sum();
    let num: T = parts
        .iter()
        .map(|&(nb, v)| T::of_count(nb) * T::of_count(nb) * v)
        .sum();
    num / (T::of_count(n) * T::of_count(n))
}

/// Design-based variance of subgroup `k` from unit-level residuals.
///
/// Blocked fits compute each included block's variance with block-level
/// denominators and pool them; weighted fits scale residuals by
/// `w_i / wbar` within each cell.
pub fn var_design_based<T: Scalar>(f: &Fit<T>, k: usize, opts: &VarianceOptions) -> Result<VarianceEstimate<T>> {
    let totals = arm_totals_by_block(f);
    let cells = f.included_cells(k);
    let mut parts = Vec::with_capacity(cells.len());
    let mut clamped = false;
    let mut failures = Vec::new();
    for &c in &cells {
        let arms = unit_cell_inputs(f, c, &totals);
        let r2 = if opts.r2_adjust {
            let col = f.design.cells[c].tau_col.expect("included cell");
            Some(f.column_r2(col))
        } else {
            None
        };
        match two_arm_variance(&arms, f.design.cells[c].size() as f64, opts, r2, &cell_label(f, c)) {
            Ok((v, cl)) => {
                clamped |= cl;
                parts.push((f.design.cells[c].size(), v));
            }
            Err(e) => failures.push(e),
        }
    }
    if let Some(first) = failures.into_iter().next() {
        return Err(first);
    }
    let variance = pool_block_variances(&parts);

    let mut counts = [0; 2];
    for &c in &cells {
        counts[0] += f.design.cells[c].counts[0];
        counts[1] += f.design.cells[c].counts[1];
    }
    let v = f.n_covariates();
    let design = design_df(counts[0] + counts[1], f.sample.n(), v, cells.len());
    let p = if let [only] = cells[..] {
        f.sample.block_rate[f.design.cells[only].block]
    } else {
        let n_k = (counts[0] + counts[1]) as f64;
        cells
            .iter()
            .map(|&c| f.design.cells[c].size() as f64 * f.sample.block_rate[f.design.cells[c].block])
            .sum::<f64>()
            / n_k
    };
    let df = pick_df(opts, design, counts, f.sample.arm_totals(), v, p)?;
    Ok(VarianceEstimate { variance, df, clamped })
}

/// Heteroskedasticity-robust sandwich with `g = n / (n - l)`.
pub fn var_huber_white<T: Scalar>(f: &Fit<T>, k: usize) -> Result<VarianceEstimate<T>> {
    let b = f.bread_times(&f.subgroup_contrast(k));
    let n = f.sample.n();
    let l = f.design.ncols();
    if n <= l {
        return Err(Error::Domain(format!("sandwich needs n > l (n = {n}, l = {l})")));
    }
    let meat: T = (0..n)
        .map(|i| {
            let s = f.design.w[i] * f.design.row_dot(i, &b) * f.residuals[i];
            s * s
        })
        .sum();
    let g = T::of_count(n) / T::of_count(n - l);
    Ok(VarianceEstimate {
        variance: g * meat,
        df: (n - l) as f64,
        clamped: false,
    })
}

fn clusters_of<T: Scalar>(f: &Fit<T>) -> Result<&[usize]> {
    f.sample
        .cluster
        .as_deref()
        .ok_or_else(|| Error::Config("cluster variance requested for data without clusters".into()))
}

/// Cluster-robust sandwich with `g = m/(m-1) (n-1)/(n-l)`; df `m - 1`.
pub fn var_crse<T: Scalar>(f: &Fit<T>, k: usize) -> Result<VarianceEstimate<T>> {
    let clusters = clusters_of(f)?;
    let b = f.bread_times(&f.subgroup_contrast(k));
    let n = f.sample.n();
    let l = f.design.ncols();
    let mut slot = HashMap::new();
    let mut scores: Vec<T> = Vec::new();
    for i in 0..n {
        let j = *slot.entry(clusters[i]).or_insert_with(|| {
            scores.push(T::zero());
            scores.len() - 1
        });
        scores[j] = scores[j] + f.design.w[i] * f.design.row_dot(i, &b) * f.residuals[i];
    }
    let m = scores.len();
    if m < 2 || n <= l {
        return Err(Error::Domain(format!("cluster sandwich needs m >= 2 and n > l (m = {m}, n = {n}, l = {l})")));
    }
    let g = T::of_count(m) / T::of_count(m - 1) * (T::of_count(n - 1) / T::of_count(n - l));
    let meat: T = scores.iter().map(|&s| s * s).sum();
    Ok(VarianceEstimate {
        variance: g * meat,
        df: (m - 1) as f64,
        clamped: false,
    })
}

/// Per-cluster summary of one subgroup's residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResidual<T> {
    pub cluster: usize,
    pub treated: bool,
    /// Total fit weight of the subgroup's members in the cluster.
    pub weight: T,
    /// Weighted mean residual.
    pub mean_residual: T,
}

/// Groups subgroup `k`'s residuals by cluster, in order of first appearance.
pub fn cluster_residuals<T: Scalar>(f: &Fit<T>, k: usize) -> Result<Vec<ClusterResidual<T>>> {
    let clusters = clusters_of(f)?;
    let s = &f.sample;
    let mut slot = HashMap::new();
    let mut acc: Vec<(usize, bool, T, T)> = Vec::new();
    for i in (0..s.n()).filter(|&i| s.subgroup[i] == k) {
        let j = *slot.entry(clusters[i]).or_insert_with(|| {
            acc.push((clusters[i], s.treated[i], T::zero(), T::zero()));
            acc.len() - 1
        });
        let w = s.w(i);
        acc[j].2 = acc[j].2 + w;
        acc[j].3 = acc[j].3 + w * f.residuals[i];
    }
    Ok(acc
        .into_iter()
        .map(|(cluster, treated, w, we)| ClusterResidual {
            cluster,
            treated,
            weight: w,
            mean_residual: we / w,
        })
        .collect())
}

/// Distinct clusters per arm over the whole sample, `[control, treated]`.
fn cluster_arm_totals<T: Scalar>(f: &Fit<T>) -> Result<[usize; 2]> {
    let clusters = clusters_of(f)?;
    let mut seen = HashMap::new();
    for i in 0..f.sample.n() {
        seen.entry(clusters[i]).or_insert(f.sample.treated[i]);
    }
    let t = seen.values().filter(|&&t| t).count();
    Ok([seen.len() - t, t])
}

/// Number of distinct clusters in the sample.
pub fn cluster_count<T: Scalar>(f: &Fit<T>) -> Result<usize> {
    Ok(cluster_arm_totals(f)?.iter().sum())
}

fn cluster_inputs<T: Scalar>(
    f: &Fit<T>,
    k: usize,
    squared_factor: impl Fn(&ClusterResidual<T>, &[ClusterResidual<T>]) -> T,
) -> Result<([ArmInput<T>; 2], usize, [usize; 2], usize)> {
    if f.spec.blocked {
        return Err(Error::Config("cluster design-based variance expects an unblocked fit".into()));
    }
    let groups = cluster_residuals(f, k)?;
    let totals = cluster_arm_totals(f)?;
    let m_k = groups.len();
    let mut ss = [T::zero(); 2];
    let mut counts = [0usize; 2];
    for g in &groups {
        let r = squared_factor(g, &groups) * g.mean_residual * g.mean_residual;
        ss[g.treated as usize] = ss[g.treated as usize] + r;
        counts[g.treated as usize] += 1;
    }
    for t in [1, 0] {
        if counts[t] == 0 {
            return Err(Error::EmptyCell {
                cell: f.sample.subgroup_labels[k].clone(),
                arm: if t == 1 { "treatment" } else { "control" },
            });
        }
    }
    let p = f.sample.block_rate[0];
    let v = f.n_covariates() as f64;
    let arm = |t: usize, pt: f64| ArmInput {
        ss: ss[t],
        count: counts[t],
        share: counts[t] as f64 / totals[t] as f64,
        covariate_load: v * pt,
        expected: m_k as f64 * pt,
    };
    Ok(([arm(0, 1.0 - p), arm(1, p)], m_k, counts, totals[0] + totals[1]))
}

/// Design-based variance for a clustered trial with unit-level subgroups.
///
/// Cluster residual means are scaled by `w_jk / wbar_k`, the cluster's
/// subgroup weight over its mean across the clusters containing subgroup
/// `k`. With singleton clusters this is the unit-level estimator exactly.
pub fn var_cluster_design_based<T: Scalar>(
    f: &Fit<T>,
    k: usize,
    opts: &VarianceOptions,
) -> Result<VarianceEstimate<T>> {
    let (arms, m_k, counts, m) = cluster_inputs(f, k, |g, all| {
        let wbar = all.iter().map(|c| c.weight).sum::<T>() / T::of_count(all.len());
        let r = g.weight / wbar;
        r * r
    })?;
    let r2 = if opts.r2_adjust {
        Some(f.column_r2(f.design.cells[f.included_cells(k)[0]].tau_col.expect("included")))
    } else {
        None
    };
    let label = f.sample.subgroup_labels[k].clone();
    let (variance, clamped) = two_arm_variance(&arms, m_k as f64, opts, r2, &label)?;
    let v = f.n_covariates();
    let totals = cluster_arm_totals(f)?;
    let df = pick_df(opts, design_df(m_k, m, v, 1), counts, totals, v, f.sample.block_rate[0])?;
    Ok(VarianceEstimate { variance, df, clamped })
}

/// Design-based variance when subgroups are defined at the cluster level.
///
/// Cluster residual means are weighted by `w_j^2 / mean(w^2)` and the result
/// carries the cluster-level subgroup correction `(m_k - 1)/(m_k - m_k/m)`.
/// The denominators always subtract one; `phi_adjust` is not used here
/// because the correction is applied as a factor.
pub fn var_cluster_level_subgroup<T: Scalar>(
    f: &Fit<T>,
    k: usize,
    opts: &VarianceOptions,
) -> Result<VarianceEstimate<T>> {
    let (arms, m_k, counts, m) = cluster_inputs(f, k, |g, all| {
        let mean_sq = all.iter().map(|c| c.weight * c.weight).sum::<T>() / T::of_count(all.len());
        g.weight * g.weight / mean_sq
    })?;
    let opts_inner = VarianceOptions { phi_adjust: false, ..*opts };
    let r2 = if opts.r2_adjust {
        Some(f.column_r2(f.design.cells[f.included_cells(k)[0]].tau_col.expect("included")))
    } else {
        None
    };
    let label = f.sample.subgroup_labels[k].clone();
    let (raw, clamped) = two_arm_variance(&arms, m_k as f64, &opts_inner, r2, &label)?;
    let phi = design_math::phi_correction(m_k as f64, m_k as f64 / m as f64);
    let v = f.n_covariates();
    let totals = cluster_arm_totals(f)?;
    let df = pick_df(opts, design_df(m_k, m, v, 1), counts, totals, v, f.sample.block_rate[0])?;
    Ok(VarianceEstimate {
        variance: raw * T::of(phi),
        df,
        clamped,
    })
}

/// `E(1/n_k^1) s2(1) + E(1/n_k^0) s2(0)`.
pub fn finite_sample_variance<T: Scalar>(inv: [f64; 2], s2: [T; 2]) -> T {
    T::of(inv[1]) * s2[1] + T::of(inv[0]) * s2[0]
}

/// Variance averaging the inverse arm sizes over the allocation law
/// (hypergeometric under complete randomization, binomial under Bernoulli),
/// truncated to splits with both arms nonempty.
pub fn var_finite_sample<T: Scalar>(f: &Fit<T>, k: usize, mechanism: Mechanism) -> Result<VarianceEstimate<T>> {
    if f.spec.blocked {
        return Err(Error::Config("the finite-sample variance is defined for unblocked designs".into()));
    }
    let totals = arm_totals_by_block(f);
    let cell = f.included_cells(k)[0];
    let arms = unit_cell_inputs(f, cell, &totals);
    let label = cell_label(f, cell);
    let s0 = arm_stats(&arms[0], false, &label)?;
    let s1 = arm_stats(&arms[1], false, &label)?;
    let n_k = f.design.cells[cell].size() as u64;
    let p = f.sample.block_rate[0];
    let inv = match mechanism {
        Mechanism::Complete => {
            let [n0, n1] = f.sample.arm_totals();
            let law = AllocationLaw::new((n0 + n1) as u64, n1 as u64, n_k)?;
            [
                design_math::expected_inverse_arm_size(&law, Arm::Control)?,
                design_math::expected_inverse_arm_size(&law, Arm::Treatment)?,
            ]
        }
        Mechanism::Bernoulli => [
            design_math::expected_inverse_arm_size_bernoulli(n_k, p, Arm::Control)?,
            design_math::expected_inverse_arm_size_bernoulli(n_k, p, Arm::Treatment)?,
        ],
    };
    Ok(VarianceEstimate {
        variance: finite_sample_variance(inv, [s0.s2, s1.s2]),
        df: design_df(n_k as usize, f.sample.n(), f.n_covariates(), 1),
        clamped: false,
    })
}
