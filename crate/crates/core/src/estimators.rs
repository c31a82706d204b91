//! Point estimators of subgroup average treatment effects.
//!
//! Every estimator reduces to a fit of the subgroup design on some estimation
//! sample: respondents only, possibly weighted, possibly aggregated to
//! cluster x subgroup means. The per-subgroup effect is read from the fitted
//! cell means and slopes; blocked fits pool cells with weights `n_bk`.

use serde::Serialize;

use crate::data::{ClusterWeighting, Dataset};
use crate::error::{Error, Result};
use crate::linear_fit::{adjusted_difference, cell_means, fit, CovariateModel, Fit, ModelSpec, Sample};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    DiffInMeans,
    CovariateAdjusted,
    Interacted,
    Blocked,
    BlockedRestricted,
    ClusteredIndividual,
    ClusteredClusterLevel,
    NonresponseWeighted,
    Poststratified,
}

impl EstimatorKind {
    pub fn for_model(covariates: CovariateModel) -> Self {
        match covariates {
            CovariateModel::None => EstimatorKind::DiffInMeans,
            CovariateModel::Pooled => EstimatorKind::CovariateAdjusted,
            CovariateModel::Interacted => EstimatorKind::Interacted,
        }
    }
}

/// One standard-error variant with its test and interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeEntry<T> {
    pub variant: String,
    pub variance: T,
    pub se: T,
    /// `f64::INFINITY` for normal-theory tests.
    #[serde(serialize_with = "serialize_df")]
    pub df: f64,
    pub statistic: f64,
    pub p_value: f64,
    pub ci: [T; 2],
    /// Set when the heterogeneity bound was clamped at zero.
    pub clamped: bool,
}

pub(crate) fn serialize_df<S: serde::Serializer>(df: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if df.is_finite() {
        s.serialize_f64(*df)
    } else {
        s.serialize_str("inf")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubgroupEstimate<T> {
    pub subgroup: String,
    pub kind: EstimatorKind,
    pub tau_hat: T,
    /// Estimation units in the subgroup (respondents, or cluster rows).
    pub n_k: usize,
    pub n_k1: usize,
    pub n_k0: usize,
    /// Trial share `n_k / n`.
    pub pi_k: f64,
    pub se_menu: Vec<SeEntry<T>>,
    /// Interval and p-value of the primary variant.
    pub ci: Option<[T; 2]>,
    pub p_value: Option<f64>,
}

impl<T: Scalar> SubgroupEstimate<T> {
    fn bare(subgroup: String, kind: EstimatorKind, tau_hat: T, counts: [usize; 2], pi_k: f64) -> Self {
        Self {
            subgroup,
            kind,
            tau_hat,
            n_k: counts[0] + counts[1],
            n_k1: counts[1],
            n_k0: counts[0],
            pi_k,
            se_menu: Vec::new(),
            ci: None,
            p_value: None,
        }
    }

    pub fn se(&self, variant: &str) -> Option<&SeEntry<T>> {
        self.se_menu.iter().find(|e| e.variant == variant)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockEstimate<T> {
    pub block: String,
    pub subgroup: String,
    pub tau_hat_bk: Option<T>,
    pub n_bk: usize,
    pub n_bk1: usize,
    pub included: bool,
}

fn population_share<T: Scalar>(sample: &Sample<T>, k: usize) -> f64 {
    let n: usize = sample.population_sizes.iter().sum();
    sample.population_sizes[k] as f64 / n as f64
}

/// Subgroup difference in arm means of an estimation sample.
pub fn diff_in_means_sample<T: Scalar>(sample: &Sample<T>, k: usize) -> Result<SubgroupEstimate<T>> {
    let members: Vec<usize> = (0..sample.n()).filter(|&i| sample.subgroup[i] == k).collect();
    let counts = sample.arm_counts()[k];
    for t in [1, 0] {
        if counts[t] == 0 {
            return Err(Error::EmptyCell {
                cell: sample.subgroup_labels[k].clone(),
                arm: if t == 1 { "treatment" } else { "control" },
            });
        }
    }
    let tau = adjusted_difference(&cell_means(sample, &members), None);
    Ok(SubgroupEstimate::bare(
        sample.subgroup_labels[k].clone(),
        EstimatorKind::DiffInMeans,
        tau,
        counts,
        population_share(sample, k),
    ))
}

/// `ybar_k^1 - ybar_k^0` over respondents.
pub fn diff_in_means<T: Scalar>(ds: &Dataset<T>, k: usize) -> Result<SubgroupEstimate<T>> {
    if k >= ds.n_subgroups() {
        return Err(Error::MissingSubgroup(k.to_string()));
    }
    diff_in_means_sample(&Sample::from_dataset(ds, false), k)
}

/// Per-subgroup estimates from a fit (pooled over blocks when blocked).
pub fn estimates_from_fit<T: Scalar>(f: &Fit<T>, kind: EstimatorKind) -> Vec<SubgroupEstimate<T>> {
    let counts = f.sample.arm_counts();
    (0..f.sample.n_subgroups())
        .map(|k| {
            let mut c = [0, 0];
            for &ci in &f.included_cells(k) {
                let cell = &f.design.cells[ci];
                c[0] += cell.counts[0];
                c[1] += cell.counts[1];
            }
            if !f.spec.blocked {
                c = counts[k];
            }
            SubgroupEstimate::bare(
                f.sample.subgroup_labels[k].clone(),
                kind,
                f.subgroup_tau(k),
                c,
                population_share(&f.sample, k),
            )
        })
        .collect()
}

/// Regression-adjusted estimates with slopes shared across subgroups.
pub fn covariate_adjusted<T: Scalar>(ds: &Dataset<T>) -> Result<Vec<SubgroupEstimate<T>>> {
    let f = fit(Sample::from_dataset(ds, false), ModelSpec::new(CovariateModel::Pooled))?;
    Ok(estimates_from_fit(&f, EstimatorKind::CovariateAdjusted))
}

/// Estimates with slopes varying by subgroup and arm.
pub fn interacted_adjusted<T: Scalar>(ds: &Dataset<T>) -> Result<Vec<SubgroupEstimate<T>>> {
    let f = fit(Sample::from_dataset(ds, false), ModelSpec::new(CovariateModel::Interacted))?;
    Ok(estimates_from_fit(&f, EstimatorKind::Interacted))
}

/// Per block x subgroup estimates of a blocked fit.
pub fn block_estimates<T: Scalar>(f: &Fit<T>) -> Vec<BlockEstimate<T>> {
    f.design
        .cells
        .iter()
        .zip(&f.cell_tau)
        .map(|(c, &tau)| BlockEstimate {
            block: f.sample.block_labels[c.block].clone(),
            subgroup: f.sample.subgroup_labels[c.subgroup].clone(),
            tau_hat_bk: tau,
            n_bk: c.size(),
            n_bk1: c.counts[1],
            included: c.included,
        })
        .collect()
}

/// Blocked estimates: per-cell effects and their `n_bk`-weighted pools.
pub fn blocked_estimates<T: Scalar>(
    ds: &Dataset<T>,
    covariates: CovariateModel,
) -> Result<(Vec<BlockEstimate<T>>, Vec<SubgroupEstimate<T>>)> {
    let f = fit(Sample::from_dataset(ds, false), ModelSpec::new(covariates).blocked(true))?;
    Ok((block_estimates(&f), estimates_from_fit(&f, EstimatorKind::Blocked)))
}

/// `sum w tau / sum w` with weights `n_bk p_bk^1 (1 - p_bk^1)`.
pub fn restricted_pool<T: Scalar>(blocks: &[BlockEstimate<T>], subgroup: &str) -> Option<T> {
    let (mut num, mut den) = (T::zero(), T::zero());
    for b in blocks.iter().filter(|b| b.included && b.subgroup == subgroup) {
        let n = b.n_bk as f64;
        let p1 = b.n_bk1 as f64 / n;
        let w = T::of(n * p1 * (1.0 - p1));
        num = num + w * b.tau_hat_bk?;
        den = den + w;
    }
    (den > T::zero()).then(|| num / den)
}

/// Precision-weighted blocked estimates (point estimates only).
pub fn blocked_restricted_from_fit<T: Scalar>(f: &Fit<T>) -> Vec<SubgroupEstimate<T>> {
    let blocks = block_estimates(f);
    estimates_from_fit(f, EstimatorKind::BlockedRestricted)
        .into_iter()
        .map(|mut e| {
            e.tau_hat = restricted_pool(&blocks, &e.subgroup).expect("every subgroup has an included block");
            e
        })
        .collect()
}

pub fn blocked_restricted<T: Scalar>(ds: &Dataset<T>, covariates: CovariateModel) -> Result<Vec<SubgroupEstimate<T>>> {
    if covariates == CovariateModel::Interacted {
        return Err(Error::Config("the restricted blocked estimator takes pooled covariates at most".into()));
    }
    let f = fit(Sample::from_dataset(ds, false), ModelSpec::new(covariates).blocked(true))?;
    Ok(blocked_restricted_from_fit(&f))
}

/// Collapses units to one row per cluster x subgroup.
///
/// Outcomes and covariates become weighted means. The row weight is the sum
/// of unit weights under `SubgroupSize` (so per-person estimands are kept)
/// and their mean under `EqualCluster` (every cluster counts once).
pub fn aggregate_to_clusters<T: Scalar>(sample: &Sample<T>, weighting: ClusterWeighting) -> Result<Sample<T>> {
    let clusters = sample
        .cluster
        .as_ref()
        .ok_or_else(|| Error::Config("cluster aggregation needs cluster labels".into()))?;
    let v = sample.n_covariates;
    let k_count = sample.n_subgroups();
    let mut slot = std::collections::HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in 0..sample.n() {
        let key = clusters[i] * k_count + sample.subgroup[i];
        let g = *slot.entry(key).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    let mut out = Sample {
        y: Vec::with_capacity(groups.len()),
        treated: Vec::new(),
        subgroup: Vec::new(),
        block: Vec::new(),
        cluster: Some(Vec::new()),
        x: Vec::new(),
        n_covariates: v,
        weight: Some(Vec::new()),
        block_rate: sample.block_rate.clone(),
        subgroup_labels: sample.subgroup_labels.clone(),
        block_labels: sample.block_labels.clone(),
        cluster_labels: sample.cluster_labels.clone(),
        covariate_names: sample.covariate_names.clone(),
        population_sizes: sample.population_sizes.clone(),
    };
    for g in &groups {
        let first = g[0];
        let sw: T = g.iter().map(|&i| sample.w(i)).sum();
        let mean = |val: &dyn Fn(usize) -> T| g.iter().map(|&i| sample.w(i) * val(i)).sum::<T>() / sw;
        out.y.push(mean(&|i| sample.y[i]));
        for c in 0..v {
            out.x.push(mean(&|i| sample.x_row(i)[c]));
        }
        out.treated.push(sample.treated[first]);
        out.subgroup.push(sample.subgroup[first]);
        out.block.push(sample.block[first]);
        out.cluster.as_mut().unwrap().push(clusters[first]);
        let w = match weighting {
            ClusterWeighting::SubgroupSize => sw,
            ClusterWeighting::EqualCluster => sw / T::of_count(g.len()),
        };
        out.weight.as_mut().unwrap().push(w);
    }
    Ok(out)
}

/// Clustered design, individual-level subgroups. Under `EqualCluster` the
/// fit runs on cluster x subgroup means.
pub fn clustered_individual<T: Scalar>(ds: &Dataset<T>, covariates: CovariateModel) -> Result<Vec<SubgroupEstimate<T>>> {
    let sample = Sample::from_dataset(ds, ds.has_response_data());
    let sample = match ds.design.cluster_weighting {
        ClusterWeighting::SubgroupSize => sample,
        ClusterWeighting::EqualCluster => aggregate_to_clusters(&sample, ClusterWeighting::EqualCluster)?,
    };
    let f = fit(sample, ModelSpec::new(covariates))?;
    Ok(estimates_from_fit(&f, EstimatorKind::ClusteredIndividual))
}

/// Checks that every cluster lies inside one subgroup.
pub fn check_cluster_level_subgroups<T: Scalar>(sample: &Sample<T>) -> Result<()> {
    let clusters = sample
        .cluster
        .as_ref()
        .ok_or_else(|| Error::Config("cluster-level subgroups need cluster labels".into()))?;
    let mut owner = vec![usize::MAX; sample.n_clusters()];
    for i in 0..sample.n() {
        let o = &mut owner[clusters[i]];
        if *o == usize::MAX {
            *o = sample.subgroup[i];
        } else if *o != sample.subgroup[i] {
            return Err(Error::Config(format!(
                "cluster '{}' spans several subgroups; subgroups are not cluster-level",
                sample.cluster_labels[clusters[i]]
            )));
        }
    }
    Ok(())
}

/// Clustered design with subgroups defined by a cluster characteristic.
pub fn clustered_cluster_level<T: Scalar>(ds: &Dataset<T>, covariates: CovariateModel) -> Result<Vec<SubgroupEstimate<T>>> {
    let sample = Sample::from_dataset(ds, ds.has_response_data());
    check_cluster_level_subgroups(&sample)?;
    let f = fit(sample, ModelSpec::new(covariates))?;
    Ok(estimates_from_fit(&f, EstimatorKind::ClusteredClusterLevel))
}

/// Response rate and mean respondent weight per subgroup.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResponseSummary {
    pub subgroup: String,
    pub n_k: usize,
    pub respondents: usize,
    pub response_rate: f64,
    pub mean_weight: f64,
}

pub fn response_summary<T: Scalar>(ds: &Dataset<T>) -> Vec<ResponseSummary> {
    (0..ds.n_subgroups())
        .map(|k| {
            let members: Vec<_> = ds.records.iter().filter(|r| r.subgroup == k).collect();
            let resp: Vec<_> = members.iter().filter(|r| r.is_respondent()).collect();
            let wsum: f64 = resp.iter().map(|r| r.w_r.map_or(1.0, |w| w.to_f64_lossy())).sum();
            ResponseSummary {
                subgroup: ds.subgroup_levels[k].clone(),
                n_k: members.len(),
                respondents: resp.len(),
                response_rate: resp.len() as f64 / members.len() as f64,
                mean_weight: if resp.is_empty() { f64::NAN } else { wsum / resp.len() as f64 },
            }
        })
        .collect()
}

/// Weighted fit on respondents with the nonresponse weights.
pub fn nonresponse_weighted<T: Scalar>(
    ds: &Dataset<T>,
    covariates: CovariateModel,
) -> Result<(Vec<SubgroupEstimate<T>>, Vec<ResponseSummary>)> {
    let f = fit(Sample::from_dataset(ds, true), ModelSpec::new(covariates))?;
    Ok((estimates_from_fit(&f, EstimatorKind::NonresponseWeighted), response_summary(ds)))
}

/// Overall effect `sum pi_k tau_k` with variances combined as independent:
/// each variant present for every subgroup gets `sum pi_k^2 Var_k` and df
/// `sum df_k`. The returned entries carry variance, se and df only.
pub fn poststratified_overall<T: Scalar>(
    estimates: &[SubgroupEstimate<T>],
    subgroup_levels: &[String],
) -> Result<SubgroupEstimate<T>> {
    let mut ordered = Vec::with_capacity(subgroup_levels.len());
    for level in subgroup_levels {
        ordered.push(
            estimates
                .iter()
                .find(|e| &e.subgroup == level)
                .ok_or_else(|| Error::MissingSubgroup(level.clone()))?,
        );
    }
    let tau = ordered.iter().map(|e| T::of(e.pi_k) * e.tau_hat).sum();
    let mut menu = Vec::new();
    if let Some(first) = ordered.first() {
        for entry in &first.se_menu {
            let parts: Option<Vec<&SeEntry<T>>> = ordered.iter().map(|e| e.se(&entry.variant)).collect();
            let Some(parts) = parts else { continue };
            let variance: T = parts
                .iter()
                .zip(&ordered)
                .map(|(p, e)| T::of(e.pi_k * e.pi_k) * p.variance)
                .sum();
            menu.push(SeEntry {
                variant: entry.variant.clone(),
                variance,
                se: variance.sqrt(),
                df: parts.iter().map(|p| p.df).sum(),
                statistic: f64::NAN,
                p_value: f64::NAN,
                ci: [T::nan(), T::nan()],
                clamped: parts.iter().any(|p| p.clamped),
            });
        }
    }
    Ok(SubgroupEstimate {
        subgroup: "overall".into(),
        kind: EstimatorKind::Poststratified,
        tau_hat: tau,
        n_k: ordered.iter().map(|e| e.n_k).sum(),
        n_k1: ordered.iter().map(|e| e.n_k1).sum(),
        n_k0: ordered.iter().map(|e| e.n_k0).sum(),
        pi_k: 1.0,
        se_menu: menu,
        ci: None,
        p_value: None,
    })
}
