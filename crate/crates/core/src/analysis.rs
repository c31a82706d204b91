//! One-call analysis of a trial dataset.
//!
//! Chooses the estimation sample and model from the design (respondents,
//! nonresponse weights, cluster aggregation, blocks), fits once, and then
//! evaluates every requested standard-error variant with its test and
//! interval.

use serde::Serialize;

use crate::data::{validate, ClusterWeighting, Dataset, Mechanism, Structure};
use crate::error::{Error, Result};
use crate::estimators::{
    aggregate_to_clusters, block_estimates, blocked_restricted_from_fit, check_cluster_level_subgroups,
    estimates_from_fit, poststratified_overall, response_summary, BlockEstimate, EstimatorKind, ResponseSummary,
    SeEntry, SubgroupEstimate,
};
use crate::inference::{equal_effects_test, subgroup_test, EqualEffectsTest};
use crate::linear_fit::{fit, Centering, CovariateModel, Fit, ModelSpec, Sample};
use crate::scalar::Scalar;
use crate::variance::{self, DfRule, Variant, VarianceEstimate};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisSpec {
    pub covariates: CovariateModel,
    pub centering: Centering,
    pub variants: Vec<Variant>,
    /// Variant whose interval and p-value are copied onto each estimate.
    pub primary: Variant,
    pub alpha: f64,
    pub null_value: f64,
    /// Test every variant against the normal instead of t.
    pub normal_df: bool,
    /// Use nonresponse weights when the data carry response flags.
    pub nonresponse_weighting: bool,
    /// Subgroups are defined by a cluster characteristic.
    pub cluster_level_subgroups: bool,
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        Self {
            covariates: CovariateModel::Pooled,
            centering: Centering::Centered,
            variants: vec![
                Variant::DbActualPhi1,
                Variant::DbExpectedPhi1,
                Variant::DbActualPhiadj,
                Variant::DbExpectedPhiadj,
                Variant::BmDf,
                Variant::Hw,
            ],
            primary: Variant::DbActualPhi1,
            alpha: 0.05,
            null_value: 0.0,
            normal_df: false,
            nonresponse_weighting: true,
            cluster_level_subgroups: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EqualEffectsEntry {
    pub variant: String,
    pub test: EqualEffectsTest,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisMetadata {
    pub estimator: EstimatorKind,
    /// `unit` or `cluster_subgroup` (rows are cluster x subgroup means).
    pub analysis_level: String,
    pub estimation_rows: usize,
    pub weighted: bool,
    pub design_columns: Vec<String>,
    pub skipped_variants: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisResult<T> {
    pub estimates: Vec<SubgroupEstimate<T>>,
    pub overall: SubgroupEstimate<T>,
    pub equal_effects: Vec<EqualEffectsEntry>,
    pub blocks: Vec<BlockEstimate<T>>,
    /// Precision-weighted blocked estimates; point estimates only.
    pub restricted: Vec<SubgroupEstimate<T>>,
    pub response: Vec<ResponseSummary>,
    pub warnings: Vec<String>,
    pub metadata: AnalysisMetadata,
}

/// Rejects option combinations that cannot be evaluated.
pub fn check_spec<T: Scalar>(ds: &Dataset<T>, spec: &AnalysisSpec) -> Result<()> {
    let has_covariates = spec.covariates != CovariateModel::None && ds.n_covariates() > 0;
    if spec.variants.contains(&Variant::DbR2) && !has_covariates {
        return Err(Error::Config("r2_adjust requires covariates".into()));
    }
    if !(spec.alpha > 0.0 && spec.alpha < 1.0) {
        return Err(Error::Config(format!("alpha = {} outside (0, 1)", spec.alpha)));
    }
    if !spec.variants.contains(&spec.primary) {
        return Err(Error::Config(format!("primary variant '{}' is not among the requested variants", spec.primary.name())));
    }
    if spec.cluster_level_subgroups && ds.design.structure != Structure::Clustered {
        return Err(Error::Config("cluster-level subgroups need a clustered, unblocked design".into()));
    }
    Ok(())
}

enum Route {
    Unit,
    Cluster,
    ClusterLevel,
}

fn variance_for<T: Scalar>(
    f: &Fit<T>,
    k: usize,
    variant: Variant,
    route: &Route,
    mechanism: Mechanism,
    normal: bool,
) -> Result<VarianceEstimate<T>> {
    let mut est = match variant {
        Variant::Hw => variance::var_huber_white(f, k)?,
        Variant::Crse => variance::var_crse(f, k)?,
        Variant::Fs => variance::var_finite_sample(f, k, mechanism)?,
        v => {
            let mut opts = v.options().expect("design-based variant");
            if normal {
                opts.df_rule = DfRule::Normal;
            }
            match route {
                Route::Unit => variance::var_design_based(f, k, &opts)?,
                Route::Cluster => variance::var_cluster_design_based(f, k, &opts)?,
                Route::ClusterLevel => variance::var_cluster_level_subgroup(f, k, &opts)?,
            }
        }
    };
    if normal {
        est.df = f64::INFINITY;
    }
    Ok(est)
}

fn entry<T: Scalar>(variant: Variant, tau: T, est: VarianceEstimate<T>, null: f64, alpha: f64) -> Result<SeEntry<T>> {
    let se = est.variance.sqrt();
    let (test, ci) = subgroup_test(tau.to_f64_lossy(), se.to_f64_lossy(), est.df, null, alpha)?;
    Ok(SeEntry {
        variant: variant.name().to_string(),
        variance: est.variance,
        se,
        df: est.df,
        statistic: test.statistic,
        p_value: test.p_value,
        ci: [T::of(ci[0]), T::of(ci[1])],
        clamped: est.clamped,
    })
}

/// Validates, fits and evaluates every requested variant.
pub fn analyze<T: Scalar>(ds: &Dataset<T>, spec: &AnalysisSpec) -> Result<AnalysisResult<T>> {
    let violations = validate(ds);
    if !violations.is_empty() {
        return Err(Error::Invalid(violations));
    }
    check_spec(ds, spec)?;

    let structure = ds.design.structure;
    let weighted = spec.nonresponse_weighting && ds.has_response_data();
    let mut sample = Sample::from_dataset(ds, weighted);
    let aggregate = structure == Structure::BlockedClustered
        || (structure == Structure::Clustered && ds.design.cluster_weighting == ClusterWeighting::EqualCluster);
    if aggregate {
        sample = aggregate_to_clusters(&sample, ds.design.cluster_weighting)?;
    }
    if spec.cluster_level_subgroups {
        check_cluster_level_subgroups(&sample)?;
    }
    let blocked = structure.has_blocks();
    let model = ModelSpec {
        covariates: spec.covariates,
        blocked,
        centering: spec.centering,
    };
    let f = fit(sample, model)?;
    let mut warnings = f.design.warnings.clone();

    let route = match structure {
        Structure::Clustered if spec.cluster_level_subgroups => Route::ClusterLevel,
        Structure::Clustered => Route::Cluster,
        _ => Route::Unit,
    };
    let kind = match structure {
        Structure::Blocked | Structure::BlockedClustered => EstimatorKind::Blocked,
        Structure::Clustered if spec.cluster_level_subgroups => EstimatorKind::ClusteredClusterLevel,
        Structure::Clustered => EstimatorKind::ClusteredIndividual,
        Structure::Simple if weighted => EstimatorKind::NonresponseWeighted,
        Structure::Simple => EstimatorKind::for_model(spec.covariates),
    };

    let mut skipped = Vec::new();
    let variants: Vec<Variant> = spec
        .variants
        .iter()
        .copied()
        .filter(|&v| {
            let ok = match v {
                Variant::Crse => f.sample.cluster.is_some(),
                Variant::Fs => structure == Structure::Simple && !weighted,
                _ => true,
            };
            if !ok {
                skipped.push(v.name().to_string());
            }
            ok
        })
        .collect();
    for s in &skipped {
        warnings.push(format!("variant '{s}' does not apply to this design and was skipped"));
    }
    if !variants.contains(&spec.primary) {
        return Err(Error::Config(format!("primary variant '{}' does not apply to this design", spec.primary.name())));
    }

    let mut estimates = estimates_from_fit(&f, kind);
    for (k, e) in estimates.iter_mut().enumerate() {
        for &v in &variants {
            let est = variance_for(&f, k, v, &route, ds.design.mechanism, spec.normal_df)?;
            if est.clamped {
                warnings.push(format!(
                    "{} for subgroup '{}': heterogeneity bound exceeded the variance; clamped to 0",
                    v.name(),
                    e.subgroup
                ));
            }
            e.se_menu.push(entry(v, e.tau_hat, est, spec.null_value, spec.alpha)?);
        }
        let (ci, p) = e
            .se(spec.primary.name())
            .map(|s| (s.ci, s.p_value))
            .expect("primary variant evaluated");
        e.ci = Some(ci);
        e.p_value = Some(p);
    }

    if matches!(route, Route::Cluster) {
        let clusters = variance::cluster_count(&f)?;
        for (k, e) in estimates.iter().enumerate() {
            let present = variance::cluster_residuals(&f, k)?.len();
            if present < clusters {
                warnings.push(format!(
                    "subgroup '{}' is absent from {} of {} clusters; its cluster variance uses only the {} clusters containing it",
                    e.subgroup,
                    clusters - present,
                    clusters,
                    present
                ));
            }
        }
    }

    let mut overall = poststratified_overall(&estimates, &f.sample.subgroup_labels)?;
    for e in overall.se_menu.iter_mut() {
        let (test, ci) = subgroup_test(
            overall.tau_hat.to_f64_lossy(),
            e.se.to_f64_lossy(),
            e.df,
            spec.null_value,
            spec.alpha,
        )?;
        e.statistic = test.statistic;
        e.p_value = test.p_value;
        e.ci = [T::of(ci[0]), T::of(ci[1])];
    }
    if let Some((ci, p)) = overall.se(spec.primary.name()).map(|s| (s.ci, s.p_value)) {
        overall.ci = Some(ci);
        overall.p_value = Some(p);
    }

    let mut equal_effects = Vec::new();
    if estimates.len() >= 2 {
        for &v in &variants {
            let rows: Vec<(f64, f64, f64)> = estimates
                .iter()
                .map(|e| {
                    let s = e.se(v.name()).expect("variant evaluated");
                    (e.tau_hat.to_f64_lossy(), s.se.to_f64_lossy(), s.df)
                })
                .collect();
            match equal_effects_test(&rows, None) {
                Ok(test) => equal_effects.push(EqualEffectsEntry {
                    variant: v.name().to_string(),
                    test,
                }),
                Err(e) => warnings.push(format!("equal-effects test for '{}' skipped: {e}", v.name())),
            }
        }
    }

    let (blocks, restricted) = if blocked {
        let restricted = if spec.covariates == CovariateModel::Interacted {
            Vec::new()
        } else {
            blocked_restricted_from_fit(&f)
        };
        (block_estimates(&f), restricted)
    } else {
        (Vec::new(), Vec::new())
    };

    Ok(AnalysisResult {
        estimates,
        overall,
        equal_effects,
        blocks,
        restricted,
        response: if ds.has_response_data() { response_summary(ds) } else { Vec::new() },
        warnings,
        metadata: AnalysisMetadata {
            estimator: kind,
            analysis_level: if aggregate { "cluster_subgroup" } else { "unit" }.to_string(),
            estimation_rows: f.sample.n(),
            weighted,
            design_columns: f.column_names(),
            skipped_variants: skipped,
        },
    })
}
