//! Closed-form design quantities under complete randomization.
//!
//! With `n1` of `n` units treated, the number of subgroup members landing in
//! treatment, `n_k^1`, is hypergeometric. Everything here is a sum over that
//! law, evaluated in log space so large trials do not overflow.

use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Treatment,
    Control,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Treatment => "treatment",
            Arm::Control => "control",
        }
    }
}

/// The hypergeometric law of `n_k^1` given `n`, `n1` and `n_k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AllocationLaw {
    pub n: u64,
    pub n1: u64,
    pub n_k: u64,
}

fn ln_choose(n: u64, k: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

fn choose_exact(n: u64, k: u64) -> Option<u128> {
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        // c * (n - i) is divisible by (i + 1) at every step.
        c = c.checked_mul((n - i) as u128)? / (i + 1) as u128;
    }
    Some(c)
}

impl AllocationLaw {
    pub fn new(n: u64, n1: u64, n_k: u64) -> Result<Self> {
        if n < 2 || n1 < 1 || n1 > n - 1 {
            return Err(Error::Domain(format!(
                "treatment size n1 = {n1} must lie in 1..={} for n = {n}",
                n.saturating_sub(1)
            )));
        }
        if n_k < 1 || n_k > n {
            return Err(Error::Domain(format!("subgroup size n_k = {n_k} must lie in 1..={n}")));
        }
        Ok(Self { n, n1, n_k })
    }

    pub fn n0(&self) -> u64 {
        self.n - self.n1
    }

    /// Smallest and largest attainable `n_k^1`.
    pub fn support(&self) -> (u64, u64) {
        (self.n_k.saturating_sub(self.n0()), self.n_k.min(self.n1))
    }

    /// `(n_k^1, probability)` over the support, normalized to sum to one.
    /// Exact integer counts are used while they fit in a `u128`.
    pub fn pmf(&self) -> Vec<(u64, f64)> {
        let (lo, hi) = self.support();
        if let Some(total) = choose_exact(self.n, self.n_k) {
            let counts: Option<Vec<u128>> = (lo..=hi)
                .map(|j| choose_exact(self.n1, j)?.checked_mul(choose_exact(self.n0(), self.n_k - j)?))
                .collect();
            if let Some(counts) = counts {
                return (lo..=hi).zip(counts).map(|(j, c)| (j, c as f64 / total as f64)).collect();
            }
        }
        let logs: Vec<f64> = (lo..=hi)
            .map(|j| ln_choose(self.n1, j) + ln_choose(self.n0(), self.n_k - j))
            .collect();
        let peak = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mass: Vec<f64> = logs.iter().map(|l| (l - peak).exp()).collect();
        let total: f64 = mass.iter().sum();
        (lo..=hi).zip(mass.into_iter().map(|m| m / total)).collect()
    }

    fn arm_count(&self, n_k1: u64, arm: Arm) -> u64 {
        match arm {
            Arm::Treatment => n_k1,
            Arm::Control => self.n_k - n_k1,
        }
    }

    fn arm_size(&self, arm: Arm) -> u64 {
        match arm {
            Arm::Treatment => self.n1,
            Arm::Control => self.n0(),
        }
    }
}

/// P(n_k^1 > 0 and n_k^0 > 0).
pub fn split_probability(law: &AllocationLaw) -> f64 {
    law.pmf()
        .into_iter()
        .filter(|&(j, _)| j > 0 && j < law.n_k)
        .map(|(_, p)| p)
        .sum()
}

/// P(|pi_k^t - pi_k| / pi_k <= c), where `pi_k^t = n_k^t / n^t` and `pi_k = n_k / n`.
pub fn relative_deviation_probability(law: &AllocationLaw, arm: Arm, c: f64) -> Result<f64> {
    if !(c >= 0.0) {
        return Err(Error::Domain(format!("deviation bound c = {c} must be nonnegative")));
    }
    // |n_k^t n - n_k n^t| <= c n_k n^t, compared in integers where possible.
    let n_t = law.arm_size(arm) as f64;
    let bound = c * law.n_k as f64 * n_t;
    let slack = 1e-9 * bound.max(1.0);
    Ok(law
        .pmf()
        .into_iter()
        .filter(|&(j, _)| {
            let lhs = (law.arm_count(j, arm) as i128 * law.n as i128
                - law.n_k as i128 * law.arm_size(arm) as i128)
                .unsigned_abs() as f64;
            lhs <= bound + slack
        })
        .map(|(_, p)| p)
        .sum())
}

/// The subgroup correction (n_k - 1)/(n_k - pi_k).
pub fn phi_correction(n_k: f64, pi_k: f64) -> f64 {
    (n_k - 1.0) / (n_k - pi_k)
}

fn truncated_inverse_mean(pmf: impl Iterator<Item = (u64, f64)>, n_k: u64, arm: Arm) -> Result<f64> {
    let mut mass = 0.0;
    let mut acc = 0.0;
    for (j, p) in pmf.filter(|&(j, _)| j > 0 && j < n_k) {
        let count = match arm {
            Arm::Treatment => j,
            Arm::Control => n_k - j,
        };
        mass += p;
        acc += p / count as f64;
    }
    if mass <= 0.0 {
        return Err(Error::Domain(format!(
            "subgroup of size {n_k} can never be split across both arms"
        )));
    }
    Ok(acc / mass)
}

/// E(1 / n_k^t) under the law truncated to both arms nonempty.
pub fn expected_inverse_arm_size(law: &AllocationLaw, arm: Arm) -> Result<f64> {
    if law.n_k == law.n {
        // No allocation randomness: n_k^t is the arm size itself.
        return Ok(1.0 / law.arm_size(arm) as f64);
    }
    truncated_inverse_mean(law.pmf().into_iter(), law.n_k, arm)
}

/// Binomial law of `n_k^1` under Bernoulli assignment with probability `p`.
pub fn bernoulli_pmf(n_k: u64, p: f64) -> Vec<(u64, f64)> {
    let (lp, lq) = (p.ln(), (1.0 - p).ln());
    (0..=n_k)
        .map(|j| (j, (ln_choose(n_k, j) + j as f64 * lp + (n_k - j) as f64 * lq).exp()))
        .collect()
}

/// E(1 / n_k^t) under Bernoulli assignment, truncated to both arms nonempty.
pub fn expected_inverse_arm_size_bernoulli(n_k: u64, p: f64, arm: Arm) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("assignment rate {p} outside (0, 1)")));
    }
    truncated_inverse_mean(bernoulli_pmf(n_k, p).into_iter(), n_k, arm)
}

/// Ratio of the standard error with realized arm sizes to the one with
/// expected sizes, for `n_k^1 = n_k p + delta1`.
///
/// `phi_var` is the treatment-to-control residual variance ratio and
/// `theta_het` the heterogeneity variance relative to the control residual
/// variance.
pub fn se_ratio_actual_vs_expected(
    n_k: f64,
    p: f64,
    delta1: f64,
    phi_var: f64,
    theta_het: f64,
) -> Result<f64> {
    if !(n_k >= 2.0 && p > 0.0 && p < 1.0 && phi_var > 0.0 && theta_het >= 0.0) {
        return Err(Error::Domain(format!(
            "invalid ratio parameters n_k = {n_k}, p = {p}, phi = {phi_var}, theta = {theta_het}"
        )));
    }
    let n1 = n_k * p + delta1;
    let n0 = n_k - n1;
    if !(n1 >= 1.0 && n0 >= 1.0) {
        return Err(Error::Domain(format!(
            "delta1 = {delta1} leaves an arm with fewer than one unit"
        )));
    }
    let het = theta_het / n_k;
    let actual = phi_var / n1 + 1.0 / n0 - het;
    let expected = phi_var / (n_k * p) + 1.0 / (n_k * (1.0 - p)) - het;
    if !(actual > 0.0 && expected > 0.0) {
        return Err(Error::Domain("heterogeneity term exceeds the sampling variance".into()));
    }
    Ok((actual / expected).sqrt())
}

/// One row of the relative-deviation curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationPoint {
    pub c: f64,
    pub arm: Arm,
    pub probability: f64,
}

pub fn deviation_curve(law: &AllocationLaw, grid: &[f64]) -> Result<Vec<DeviationPoint>> {
    let mut out = Vec::with_capacity(grid.len() * 2);
    for arm in [Arm::Treatment, Arm::Control] {
        for &c in grid {
            out.push(DeviationPoint {
                c,
                arm,
                probability: relative_deviation_probability(law, arm, c)?,
            });
        }
    }
    Ok(out)
}

/// The default deviation grid 0, .01, ..., .5.
pub fn default_c_grid() -> Vec<f64> {
    (0..=50).map(|i| i as f64 / 100.0).collect()
}
