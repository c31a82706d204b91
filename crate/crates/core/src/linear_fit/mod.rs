//! Estimation samples, subgroup design matrices and weighted least squares.
//!
//! The design has, in order: one `G_k (T - p)` column per estimable cell
//! (a cell is a subgroup, or a block x subgroup pair in blocked models), one
//! intercept per cell, then covariate columns. There is no grand intercept;
//! the cell intercepts span it.

pub mod qr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use qr::Qr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateModel {
    #[default]
    None,
    /// One slope per covariate shared by all subgroups and arms.
    Pooled,
    /// Separate slopes for every subgroup x arm.
    Interacted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Centering {
    /// Treatment centered at the design rate, covariates at cell means.
    #[default]
    Centered,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ModelSpec {
    pub covariates: CovariateModel,
    pub blocked: bool,
    pub centering: Centering,
}

impl ModelSpec {
    pub fn new(covariates: CovariateModel) -> Self {
        Self {
            covariates,
            ..Default::default()
        }
    }

    pub fn blocked(mut self, blocked: bool) -> Self {
        self.blocked = blocked;
        self
    }

    pub fn centering(mut self, centering: Centering) -> Self {
        self.centering = centering;
        self
    }
}

/// The units that enter estimation, in flat arrays.
///
/// Unblocked data carry a single block; unclustered data carry no cluster
/// vector. `x` is row-major with `n_covariates` entries per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub y: Vec<T>,
    pub treated: Vec<bool>,
    pub subgroup: Vec<usize>,
    pub block: Vec<usize>,
    pub cluster: Option<Vec<usize>>,
    pub x: Vec<T>,
    pub n_covariates: usize,
    pub weight: Option<Vec<T>>,
    pub block_rate: Vec<f64>,
    pub subgroup_labels: Vec<String>,
    pub block_labels: Vec<String>,
    pub cluster_labels: Vec<String>,
    pub covariate_names: Vec<String>,
    /// Subgroup sizes in the whole trial, nonrespondents included.
    pub population_sizes: Vec<usize>,
}

impl<T: Scalar> Sample<T> {
    /// An unblocked, unclustered, unweighted sample.
    pub fn simple(
        y: Vec<T>,
        treated: Vec<bool>,
        subgroup: Vec<usize>,
        x: Vec<T>,
        n_covariates: usize,
        p: f64,
        n_subgroups: usize,
    ) -> Self {
        let mut population_sizes = vec![0; n_subgroups];
        for &k in &subgroup {
            population_sizes[k] += 1;
        }
        Self {
            block: vec![0; y.len()],
            y,
            treated,
            subgroup,
            cluster: None,
            x,
            n_covariates,
            weight: None,
            block_rate: vec![p],
            subgroup_labels: (1..=n_subgroups).map(|k| k.to_string()).collect(),
            block_labels: vec!["all".into()],
            cluster_labels: Vec::new(),
            covariate_names: (1..=n_covariates).map(|v| format!("x{v}")).collect(),
            population_sizes,
        }
    }

    /// Respondents of a dataset. With `weighted`, nonresponse weights become
    /// fit weights (units without a response flag get weight one).
    pub fn from_dataset(ds: &Dataset<T>, weighted: bool) -> Self {
        let blocked = ds.design.structure.has_blocks();
        let clustered = ds.design.structure.has_clusters();
        let keep: Vec<_> = ds.records.iter().filter(|r| r.is_respondent()).collect();
        let block_labels = if blocked {
            ds.block_levels.clone()
        } else {
            vec!["all".into()]
        };
        let block_rate = if blocked {
            block_labels.iter().map(|b| ds.design.rate_for(Some(b))).collect()
        } else {
            vec![ds.design.p]
        };
        Self {
            y: keep.iter().map(|r| r.y).collect(),
            treated: keep.iter().map(|r| r.treated).collect(),
            subgroup: keep.iter().map(|r| r.subgroup).collect(),
            block: keep
                .iter()
                .map(|r| if blocked { r.block.unwrap_or(0) } else { 0 })
                .collect(),
            cluster: clustered.then(|| keep.iter().map(|r| r.cluster.unwrap_or(0)).collect()),
            x: keep.iter().flat_map(|r| r.x.iter().copied()).collect(),
            n_covariates: ds.n_covariates(),
            weight: weighted.then(|| keep.iter().map(|r| r.w_r.unwrap_or(T::one())).collect()),
            block_rate,
            subgroup_labels: ds.subgroup_levels.clone(),
            block_labels,
            cluster_labels: if clustered { ds.cluster_levels.clone() } else { Vec::new() },
            covariate_names: ds.covariate_names.clone(),
            population_sizes: ds.subgroup_sizes(),
        }
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_subgroups(&self) -> usize {
        self.subgroup_labels.len()
    }

    pub fn n_blocks(&self) -> usize {
        self.block_labels.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_labels.len()
    }

    pub fn rate(&self, i: usize) -> f64 {
        self.block_rate[self.block[i]]
    }

    pub fn w(&self, i: usize) -> T {
        self.weight.as_ref().map_or(T::one(), |w| w[i])
    }

    pub fn x_row(&self, i: usize) -> &[T] {
        &self.x[i * self.n_covariates..(i + 1) * self.n_covariates]
    }

    /// `[n_k^0, n_k^1]` per subgroup.
    pub fn arm_counts(&self) -> Vec<[usize; 2]> {
        let mut c = vec![[0; 2]; self.n_subgroups()];
        for i in 0..self.n() {
            c[self.subgroup[i]][self.treated[i] as usize] += 1;
        }
        c
    }

    /// `[n^0, n^1]` over the whole sample.
    pub fn arm_totals(&self) -> [usize; 2] {
        let t = self.treated.iter().filter(|&&t| t).count();
        [self.n() - t, t]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum ColumnRole {
    Tau { cell: usize },
    Intercept { cell: usize },
    Slope { covariate: usize, subgroup: Option<usize>, treated: Option<bool> },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Column {
    pub name: String,
    pub role: ColumnRole,
}

/// A subgroup (or block x subgroup) cell of the design.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub block: usize,
    pub subgroup: usize,
    /// `[control, treated]` unit counts.
    pub counts: [usize; 2],
    /// Both arms nonempty, so the cell has its own treatment column.
    pub included: bool,
    pub tau_col: Option<usize>,
    pub intercept_col: usize,
}

impl Cell {
    pub fn size(&self) -> usize {
        self.counts[0] + self.counts[1]
    }
}

#[derive(Debug, Clone)]
pub struct Design<T> {
    /// Column-major, unscaled by the weights.
    pub columns: Vec<Vec<T>>,
    pub column_map: Vec<Column>,
    pub cells: Vec<Cell>,
    /// Cell index of every unit.
    pub unit_cell: Vec<usize>,
    pub y: Vec<T>,
    pub w: Vec<T>,
    pub warnings: Vec<String>,
}

impl<T: Scalar> Design<T> {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn ncols(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> Vec<T> {
        self.columns.iter().map(|c| c[i]).collect()
    }

    pub fn row_dot(&self, i: usize, b: &[T]) -> T {
        self.columns.iter().zip(b).map(|(c, &b)| c[i] * b).sum()
    }
}

fn cell_name(sample_blocks: &[String], subgroups: &[String], blocked: bool, c: &Cell) -> String {
    if blocked {
        format!("{}:{}", sample_blocks[c.block], subgroups[c.subgroup])
    } else {
        subgroups[c.subgroup].clone()
    }
}

/// Weighted mean of `values` with weights `w`.
pub fn weighted_mean<T: Scalar>(pairs: impl Iterator<Item = (T, T)>) -> T {
    let (mut sw, mut swv) = (T::zero(), T::zero());
    for (w, v) in pairs {
        sw = sw + w;
        swv = swv + w * v;
    }
    swv / sw
}

fn arm_label(t: usize) -> &'static str {
    if t == 1 {
        "treatment"
    } else {
        "control"
    }
}

/// Builds the subgroup design for `spec`.
pub fn build_design<T: Scalar>(sample: &Sample<T>, spec: &ModelSpec) -> Result<Design<T>> {
    let n = sample.n();
    let n_sub = sample.n_subgroups();
    let n_blocks = if spec.blocked { sample.n_blocks() } else { 1 };
    let v_dim = sample.n_covariates;
    let block_of = |i: usize| if spec.blocked { sample.block[i] } else { 0 };

    let mut counts = vec![[0usize; 2]; n_blocks * n_sub];
    for i in 0..n {
        counts[block_of(i) * n_sub + sample.subgroup[i]][sample.treated[i] as usize] += 1;
    }

    let mut cells = Vec::new();
    let mut slot = vec![usize::MAX; n_blocks * n_sub];
    let mut warnings = Vec::new();
    for b in 0..n_blocks {
        for k in 0..n_sub {
            let c = counts[b * n_sub + k];
            if c[0] + c[1] == 0 {
                continue;
            }
            slot[b * n_sub + k] = cells.len();
            cells.push(Cell {
                block: b,
                subgroup: k,
                counts: c,
                included: c[0] > 0 && c[1] > 0,
                tau_col: None,
                intercept_col: 0,
            });
        }
    }
    for k in 0..n_sub {
        let label = &sample.subgroup_labels[k];
        let mine: Vec<&Cell> = cells.iter().filter(|c| c.subgroup == k).collect();
        if mine.is_empty() {
            return Err(Error::EmptyCell { cell: label.clone(), arm: "treatment" });
        }
        if !mine.iter().any(|c| c.included) {
            let t = mine.iter().all(|c| c.counts[1] == 0) as usize;
            return Err(Error::EmptyCell { cell: label.clone(), arm: arm_label(t) });
        }
        for c in mine.iter().filter(|c| !c.included) {
            warnings.push(format!(
                "block '{}' excluded for subgroup '{}': empty {} arm",
                sample.block_labels[c.block],
                label,
                arm_label((c.counts[1] == 0) as usize)
            ));
        }
    }
    let unit_cell: Vec<usize> = (0..n).map(|i| slot[block_of(i) * n_sub + sample.subgroup[i]]).collect();

    let w: Vec<T> = (0..n).map(|i| sample.w(i)).collect();
    let mut columns: Vec<Vec<T>> = Vec::new();
    let mut column_map = Vec::new();
    let name = |c: &Cell| cell_name(&sample.block_labels, &sample.subgroup_labels, spec.blocked, c);

    for ci in 0..cells.len() {
        if !cells[ci].included {
            continue;
        }
        let col = (0..n)
            .map(|i| {
                if unit_cell[i] != ci {
                    T::zero()
                } else {
                    let t = if sample.treated[i] { T::one() } else { T::zero() };
                    match spec.centering {
                        Centering::Centered => t - T::of(sample.rate(i)),
                        Centering::Raw => t,
                    }
                }
            })
            .collect();
        cells[ci].tau_col = Some(columns.len());
        column_map.push(Column {
            name: format!("tau[{}]", name(&cells[ci])),
            role: ColumnRole::Tau { cell: ci },
        });
        columns.push(col);
    }
    for ci in 0..cells.len() {
        let col = (0..n)
            .map(|i| if unit_cell[i] == ci { T::one() } else { T::zero() })
            .collect();
        cells[ci].intercept_col = columns.len();
        column_map.push(Column {
            name: format!("alpha[{}]", name(&cells[ci])),
            role: ColumnRole::Intercept { cell: ci },
        });
        columns.push(col);
    }

    if spec.covariates != CovariateModel::None && v_dim > 0 {
        let centers: Vec<Vec<T>> = (0..cells.len())
            .map(|ci| {
                (0..v_dim)
                    .map(|v| {
                        weighted_mean(
                            (0..n)
                                .filter(|&i| unit_cell[i] == ci)
                                .map(|i| (w[i], sample.x_row(i)[v])),
                        )
                    })
                    .collect()
            })
            .collect();
        let xt = |i: usize, v: usize| match spec.centering {
            Centering::Centered => sample.x_row(i)[v] - centers[unit_cell[i]][v],
            Centering::Raw => sample.x_row(i)[v],
        };
        match spec.covariates {
            CovariateModel::Pooled => {
                for v in 0..v_dim {
                    columns.push((0..n).map(|i| xt(i, v)).collect());
                    column_map.push(Column {
                        name: format!("beta[{}]", sample.covariate_names[v]),
                        role: ColumnRole::Slope { covariate: v, subgroup: None, treated: None },
                    });
                }
            }
            CovariateModel::Interacted => {
                for k in 0..n_sub {
                    for t in [false, true] {
                        for v in 0..v_dim {
                            columns.push(
                                (0..n)
                                    .map(|i| {
                                        if sample.subgroup[i] == k && sample.treated[i] == t {
                                            xt(i, v)
                                        } else {
                                            T::zero()
                                        }
                                    })
                                    .collect(),
                            );
                            column_map.push(Column {
                                name: format!(
                                    "beta[{}|{}|{}]",
                                    sample.covariate_names[v],
                                    sample.subgroup_labels[k],
                                    arm_label(t as usize)
                                ),
                                role: ColumnRole::Slope {
                                    covariate: v,
                                    subgroup: Some(k),
                                    treated: Some(t),
                                },
                            });
                        }
                    }
                }
            }
            CovariateModel::None => unreachable!(),
        }
    }

    Ok(Design {
        columns,
        column_map,
        cells,
        unit_cell,
        y: sample.y.clone(),
        w,
        warnings,
    })
}

/// Weighted least-squares solution with unweighted residuals.
#[derive(Debug, Clone)]
pub struct LeastSquares<T> {
    pub coef: Vec<T>,
    pub residuals: Vec<T>,
    /// Factorization of `sqrt(W) X`.
    pub qr: Qr<T>,
}

/// Minimizes `sum w_i (y_i - X_i b)^2` by Householder QR of `sqrt(W) X`.
pub fn solve_least_squares<T: Scalar>(
    columns: &[Vec<T>],
    names: &[String],
    y: &[T],
    w: &[T],
) -> Result<LeastSquares<T>> {
    let sw: Vec<T> = w.iter().map(|w| w.sqrt()).collect();
    let scaled: Vec<Vec<T>> = columns
        .iter()
        .map(|c| c.iter().zip(&sw).map(|(&x, &s)| x * s).collect())
        .collect();
    let qr = Qr::new(scaled);
    let bad = qr.deficient_columns(T::rank_tolerance());
    if !bad.is_empty() {
        return Err(Error::SingularDesign {
            columns: bad.into_iter().map(|j| names[j].clone()).collect(),
        });
    }
    let ys: Vec<T> = y.iter().zip(&sw).map(|(&y, &s)| y * s).collect();
    let coef = qr.solve(&ys);
    let residuals = (0..y.len())
        .map(|i| y[i] - columns.iter().zip(&coef).map(|(c, &b)| c[i] * b).sum::<T>())
        .collect();
    Ok(LeastSquares { coef, residuals, qr })
}

/// Arm means of a cell used by the closed-form effect estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct CellMeans<T> {
    /// `[control, treated]` weighted outcome means.
    pub y: [T; 2],
    /// `[control, treated]` weighted covariate means.
    pub x: [Vec<T>; 2],
    /// Weighted covariate means over the whole cell.
    pub x_all: Vec<T>,
}

pub fn cell_means<T: Scalar>(sample: &Sample<T>, members: &[usize]) -> CellMeans<T> {
    let arm = |t: bool| members.iter().copied().filter(move |&i| sample.treated[i] == t);
    let v_dim = sample.n_covariates;
    let ym = |t| weighted_mean(arm(t).map(|i| (sample.w(i), sample.y[i])));
    let xm = |t| {
        (0..v_dim)
            .map(|v| weighted_mean(arm(t).map(|i| (sample.w(i), sample.x_row(i)[v]))))
            .collect::<Vec<T>>()
    };
    CellMeans {
        y: [ym(false), ym(true)],
        x: [xm(false), xm(true)],
        x_all: (0..v_dim)
            .map(|v| weighted_mean(members.iter().map(|&i| (sample.w(i), sample.x_row(i)[v]))))
            .collect(),
    }
}

/// `[ybar^1 - (xbar^1 - xbar) b^1] - [ybar^0 - (xbar^0 - xbar) b^0]`.
pub fn adjusted_difference<T: Scalar>(m: &CellMeans<T>, slopes: Option<[&[T]; 2]>) -> T {
    let mut tau = m.y[1] - m.y[0];
    if let Some([b0, b1]) = slopes {
        for v in 0..m.x_all.len() {
            tau = tau - ((m.x[1][v] - m.x_all[v]) * b1[v] - (m.x[0][v] - m.x_all[v]) * b0[v]);
        }
    }
    tau
}

/// A fitted subgroup model.
#[derive(Debug, Clone)]
pub struct Fit<T> {
    pub sample: Sample<T>,
    pub spec: ModelSpec,
    pub design: Design<T>,
    pub coef: Vec<T>,
    pub residuals: Vec<T>,
    pub qr: Qr<T>,
    /// Effect estimate per cell (`None` for excluded cells).
    pub cell_tau: Vec<Option<T>>,
    /// Coefficient vector `c` with `tau_cell = c' coef`, per cell.
    pub cell_contrast: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Fit<T> {
    pub fn n_covariates(&self) -> usize {
        match self.spec.covariates {
            CovariateModel::None => 0,
            _ => self.sample.n_covariates,
        }
    }

    pub fn cells(&self) -> &[Cell] {
        &self.design.cells
    }

    pub fn column_names(&self) -> Vec<String> {
        self.design.column_map.iter().map(|c| c.name.clone()).collect()
    }

    fn coefs_with(&self, pick: impl Fn(&ColumnRole) -> bool) -> Vec<T> {
        self.design
            .column_map
            .iter()
            .zip(&self.coef)
            .filter(|(c, _)| pick(&c.role))
            .map(|(_, &b)| b)
            .collect()
    }

    /// Treatment-column coefficients, one per included cell.
    pub fn tau_hat(&self) -> Vec<T> {
        self.coefs_with(|r| matches!(r, ColumnRole::Tau { .. }))
    }

    pub fn alpha_hat(&self) -> Vec<T> {
        self.coefs_with(|r| matches!(r, ColumnRole::Intercept { .. }))
    }

    pub fn beta_hat(&self) -> Vec<T> {
        self.coefs_with(|r| matches!(r, ColumnRole::Slope { .. }))
    }

    /// Included cells belonging to subgroup `k`.
    pub fn included_cells(&self, k: usize) -> Vec<usize> {
        (0..self.design.cells.len())
            .filter(|&c| self.design.cells[c].subgroup == k && self.design.cells[c].included)
            .collect()
    }

    /// Pooled subgroup effect: `sum n_bk tau_bk / sum n_bk` over included cells.
    pub fn subgroup_tau(&self, k: usize) -> T {
        let cells = self.included_cells(k);
        if let [only] = cells[..] {
            return self.cell_tau[only].expect("included cell has an estimate");
        }
        let (mut num, mut den) = (T::zero(), T::zero());
        for c in cells {
            let nb = T::of_count(self.design.cells[c].size());
            num = num + nb * self.cell_tau[c].expect("included cell has an estimate");
            den = den + nb;
        }
        num / den
    }

    /// Contrast vector of the pooled subgroup effect.
    pub fn subgroup_contrast(&self, k: usize) -> Vec<T> {
        let cells = self.included_cells(k);
        let total: usize = cells.iter().map(|&c| self.design.cells[c].size()).sum();
        let mut out = vec![T::zero(); self.design.ncols()];
        for c in cells {
            let f = T::of_count(self.design.cells[c].size()) / T::of_count(total);
            for (o, &a) in out.iter_mut().zip(self.cell_contrast[c].as_ref().unwrap()) {
                *o = *o + f * a;
            }
        }
        out
    }

    /// `(X'WX)^{-1} c`.
    pub fn bread_times(&self, c: &[T]) -> Vec<T> {
        self.qr.gram_inverse_times(c)
    }

    /// Centered weighted R^2 from regressing column `col` on the other columns.
    pub fn column_r2(&self, col: usize) -> T {
        let d = &self.design;
        let others: Vec<Vec<T>> = (0..d.ncols())
            .filter(|&j| j != col)
            .map(|j| d.columns[j].clone())
            .collect();
        let names: Vec<String> = vec![String::new(); others.len()];
        let target = &d.columns[col];
        let ls = match solve_least_squares(&others, &names, target, &d.w) {
            Ok(ls) => ls,
            Err(_) => return T::zero(),
        };
        let mean = weighted_mean(d.w.iter().copied().zip(target.iter().copied()));
        let ssr: T = ls.residuals.iter().zip(&d.w).map(|(&r, &w)| w * r * r).sum();
        let tss: T = target.iter().zip(&d.w).map(|(&x, &w)| w * (x - mean) * (x - mean)).sum();
        if tss == T::zero() {
            T::zero()
        } else {
            T::one() - ssr / tss
        }
    }
}

/// Fits the subgroup model `spec` to `sample`.
pub fn fit<T: Scalar>(sample: Sample<T>, spec: ModelSpec) -> Result<Fit<T>> {
    let design = build_design(&sample, &spec)?;
    let names: Vec<String> = design.column_map.iter().map(|c| c.name.clone()).collect();
    let ls = solve_least_squares(&design.columns, &names, &design.y, &design.w)?;

    let v_dim = if spec.covariates == CovariateModel::None { 0 } else { sample.n_covariates };
    // Slope coefficients by (subgroup, arm).
    let slope = |k: usize, t: bool| -> Vec<T> {
        (0..v_dim)
            .map(|v| {
                design
                    .column_map
                    .iter()
                    .position(|c| match c.role {
                        ColumnRole::Slope { covariate, subgroup, treated } => {
                            covariate == v
                                && subgroup.is_none_or(|s| s == k)
                                && treated.is_none_or(|a| a == t)
                        }
                        _ => false,
                    })
                    .map(|j| ls.coef[j])
                    .unwrap_or(T::zero())
            })
            .collect()
    };

    let mut members = vec![Vec::new(); design.cells.len()];
    for (i, &c) in design.unit_cell.iter().enumerate() {
        members[c].push(i);
    }
    let mut cell_tau = Vec::with_capacity(design.cells.len());
    let mut cell_contrast = Vec::with_capacity(design.cells.len());
    for (ci, cell) in design.cells.iter().enumerate() {
        let Some(tau_col) = cell.tau_col else {
            cell_tau.push(None);
            cell_contrast.push(None);
            continue;
        };
        let means = cell_means(&sample, &members[ci]);
        let (b0, b1) = (slope(cell.subgroup, false), slope(cell.subgroup, true));
        let slopes = (v_dim > 0).then_some([b0.as_slice(), b1.as_slice()]);
        cell_tau.push(Some(adjusted_difference(&means, slopes)));

        let mut c = vec![T::zero(); design.ncols()];
        c[tau_col] = T::one();
        if spec.centering == Centering::Raw && spec.covariates == CovariateModel::Interacted {
            for (j, col) in design.column_map.iter().enumerate() {
                if let ColumnRole::Slope { covariate, subgroup: Some(s), treated: Some(t) } = col.role {
                    if s == cell.subgroup {
                        let xbar = means.x_all[covariate];
                        c[j] = if t { xbar } else { -xbar };
                    }
                }
            }
        }
        cell_contrast.push(Some(c));
    }

    Ok(Fit {
        sample,
        spec,
        design,
        coef: ls.coef,
        residuals: ls.residuals,
        qr: ls.qr,
        cell_tau,
        cell_contrast,
    })
}
