//! Balance and outcome diagnostics.
//!
//! Balance of a covariate is assessed with the score test at `β = 0` of a
//! univariate proportional-hazards model for time to treatment, optionally
//! stratified by matched pair. For a binary covariate this is the log-rank
//! test. Outcomes are compared with the Wilcoxon signed-rank test on matched
//! pairs or the rank-sum test between groups.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::matcher::{quantile_sorted, MatchSet};
use crate::registry::Registry;
use crate::splinefit::CurveSet;

/// Largest number of nonzero differences handled by exact enumeration.
pub const SIGNED_RANK_EXACT_MAX: usize = 20;
/// Largest combined sample size handled by exact enumeration.
pub const RANK_SUM_EXACT_MAX: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovariateRef {
    TimeVarying(usize),
    Baseline(usize),
}

impl CovariateRef {
    pub fn resolve(registry: &Registry, name: &str) -> Result<Self> {
        if let Some(k) = registry.covariate_names.iter().position(|n| n == name) {
            return Ok(CovariateRef::TimeVarying(k));
        }
        if let Some(j) = registry.baseline_names.iter().position(|n| n == name) {
            return Ok(CovariateRef::Baseline(j));
        }
        Err(Error::UnknownCovariate(name.to_string()))
    }

    fn value(self, registry: &Registry, curves: &CurveSet, i: usize, t: f64) -> Result<f64> {
        match self {
            CovariateRef::TimeVarying(k) => curves.value_on_horizon(i, k, t),
            CovariateRef::Baseline(j) => Ok(registry.subjects[i].baseline[j]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceResult {
    pub covariate: String,
    pub method: String,
    pub statistic: f64,
    pub p_value: f64,
    /// Number of strata holding at least one event.
    pub strata: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeResult {
    pub method: String,
    pub median_difference: f64,
    pub p_value: f64,
    pub statistic: f64,
    pub n_treated: usize,
    pub n_control: usize,
    pub exact: bool,
}

/// Upper tail of the chi-square distribution with one degree of freedom.
pub fn chi2_1_sf(stat: f64) -> f64 {
    if stat <= 0.0 {
        1.0
    } else {
        erfc((stat / 2.0).sqrt()).clamp(0.0, 1.0)
    }
}

/// Two-sided normal p-value for a standardized statistic.
fn normal_two_sided(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

/// Score statistic pieces `(U, V, contributing strata)` summed over strata.
pub fn stratified_score(
    registry: &Registry,
    curves: &CurveSet,
    covariate: CovariateRef,
    strata: &[Vec<usize>],
) -> Result<(f64, f64, usize)> {
    let mut score = 0.0;
    let mut variance = 0.0;
    let mut contributing = 0;
    for stratum in strata {
        let mut times: Vec<f64> = stratum
            .iter()
            .filter(|&&i| registry.subjects[i].treated_before_horizon)
            .map(|&i| registry.subjects[i].restricted_time)
            .collect();
        if times.is_empty() {
            continue;
        }
        contributing += 1;
        times.sort_by(f64::total_cmp);
        times.dedup();
        for t in times {
            let mut n = 0.0;
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            let mut d = 0.0;
            let mut event_sum = 0.0;
            for &l in stratum {
                let s = &registry.subjects[l];
                if s.restricted_time < t {
                    continue;
                }
                let x = covariate.value(registry, curves, l, t)?;
                n += 1.0;
                sum += x;
                sum_sq += x * x;
                if s.treated_before_horizon && s.restricted_time == t {
                    d += 1.0;
                    event_sum += x;
                }
            }
            let mean = sum / n;
            score += event_sum - d * mean;
            variance += d * (sum_sq / n - mean * mean).max(0.0);
        }
    }
    Ok((score, variance, contributing))
}

fn strata_from_matches(registry: &Registry, set: &MatchSet) -> Result<Vec<Vec<usize>>> {
    let index: HashMap<&str, usize> = registry.subject_index();
    set.pairs
        .iter()
        .map(|p| {
            let t = *index
                .get(p.treated_id.as_str())
                .ok_or_else(|| Error::UnknownSubject(p.treated_id.clone()))?;
            let c = *index
                .get(p.control_id.as_str())
                .ok_or_else(|| Error::UnknownSubject(p.control_id.clone()))?;
            Ok(vec![t, c])
        })
        .collect()
}

/// Score (log-rank type) test of one covariate's effect on time to treatment.
/// Unstratified over the whole registry when `strata` is `None`, otherwise
/// with risk sets formed inside each matched pair.
pub fn balance_test(
    registry: &Registry,
    curves: &CurveSet,
    covariate: &str,
    strata: Option<&MatchSet>,
) -> Result<BalanceResult> {
    let cov = CovariateRef::resolve(registry, covariate)?;
    let groups = match strata {
        None => vec![(0..registry.n_subjects()).collect()],
        Some(set) => strata_from_matches(registry, set)?,
    };
    let (score, variance, contributing) = stratified_score(registry, curves, cov, &groups)?;
    if contributing == 0 {
        return Err(Error::DegenerateStrata);
    }
    let statistic = if variance > 0.0 { score * score / variance } else { 0.0 };
    Ok(BalanceResult {
        covariate: covariate.to_string(),
        method: if strata.is_some() { "matched" } else { "prior" }.to_string(),
        statistic,
        p_value: chi2_1_sf(statistic),
        strata: contributing,
    })
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}

/// Ranks `1..=n` with ties given their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let avg = (start + 1 + end) as f64 / 2.0;
        for &o in &order[start..end] {
            ranks[o] = avg;
        }
        start = end;
    }
    ranks
}

fn tie_sizes(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mut sizes = Vec::new();
    let mut start = 0;
    while start < v.len() {
        let mut end = start + 1;
        while end < v.len() && v[end] == v[start] {
            end += 1;
        }
        sizes.push((end - start) as f64);
        start = end;
    }
    sizes
}

fn two_sided_from_counts(counts: &[f64], observed: usize) -> f64 {
    let total: f64 = counts.iter().sum();
    let lower: f64 = counts[..=observed].iter().sum();
    let upper: f64 = counts[observed..].iter().sum();
    (2.0 * lower.min(upper) / total).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PValueMethod {
    Exact,
    Normal,
}

/// Two-sided signed-rank p-value on the nonzero differences, plus `W⁺`.
pub fn signed_rank_p_value(diffs: &[f64], method: PValueMethod) -> (f64, f64) {
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    if nonzero.is_empty() {
        return (0.0, 1.0);
    }
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = nonzero
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let n = nonzero.len() as f64;
    let p = match method {
        PValueMethod::Exact => {
            // Doubled ranks are integers; count sign patterns by doubled W⁺.
            let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
            let max: usize = doubled.iter().sum();
            let mut counts = vec![0.0f64; max + 1];
            counts[0] = 1.0;
            let mut reach = 0;
            for &r in &doubled {
                for s in (0..=reach).rev() {
                    if counts[s] > 0.0 {
                        counts[s + r] += counts[s];
                    }
                }
                reach += r;
            }
            two_sided_from_counts(&counts, (2.0 * w_plus).round() as usize)
        }
        PValueMethod::Normal => {
            let mean = n * (n + 1.0) / 4.0;
            let ties: f64 = tie_sizes(&abs).iter().map(|t| t * t * t - t).sum();
            let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - ties / 48.0;
            if var <= 0.0 {
                1.0
            } else {
                let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
                normal_two_sided(z)
            }
        }
    };
    (w_plus, p)
}

/// Wilcoxon signed-rank test on pair differences `Y_treated − Y_control`.
/// Exact zeros are dropped; the reported median uses all differences.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> OutcomeResult {
    let nonzero = diffs.iter().filter(|d| **d != 0.0).count();
    let exact = nonzero <= SIGNED_RANK_EXACT_MAX;
    let method = if exact { PValueMethod::Exact } else { PValueMethod::Normal };
    let (w, p) = signed_rank_p_value(diffs, method);
    let median_difference = if nonzero == 0 { 0.0 } else { median(diffs) };
    OutcomeResult {
        method: "signed_rank".into(),
        median_difference,
        p_value: p,
        statistic: w,
        n_treated: diffs.len(),
        n_control: diffs.len(),
        exact,
    }
}

/// Two-sided rank-sum p-value and the rank sum of `a`.
pub fn rank_sum_p_value(a: &[f64], b: &[f64], method: PValueMethod) -> (f64, f64) {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = average_ranks(&pooled);
    let r_a: f64 = ranks[..a.len()].iter().sum();
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let total = na + nb;
    let p = match method {
        PValueMethod::Exact => {
            let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
            let max: usize = doubled.iter().sum();
            // counts[k][s]: subsets of size k with doubled rank sum s.
            let mut counts = vec![vec![0.0f64; max + 1]; a.len() + 1];
            counts[0][0] = 1.0;
            for &r in &doubled {
                for k in (1..=a.len()).rev() {
                    for s in (r..=max).rev() {
                        let prev = counts[k - 1][s - r];
                        if prev > 0.0 {
                            counts[k][s] += prev;
                        }
                    }
                }
            }
            two_sided_from_counts(&counts[a.len()], (2.0 * r_a).round() as usize)
        }
        PValueMethod::Normal => {
            let mean = na * (total + 1.0) / 2.0;
            let ties: f64 = tie_sizes(&pooled).iter().map(|t| t * t * t - t).sum();
            let var = na * nb / 12.0 * ((total + 1.0) - ties / (total * (total - 1.0)));
            if var <= 0.0 {
                1.0
            } else {
                let z = ((r_a - mean).abs() - 0.5).max(0.0) / var.sqrt();
                normal_two_sided(z)
            }
        }
    };
    (r_a, p)
}

/// Wilcoxon rank-sum test; the median difference is `median(a) − median(b)`.
pub fn wilcoxon_rank_sum(group_a: &[f64], group_b: &[f64]) -> Result<OutcomeResult> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(Error::config("rank_sum", "both groups must be nonempty"));
    }
    let exact = group_a.len() + group_b.len() <= RANK_SUM_EXACT_MAX;
    let method = if exact { PValueMethod::Exact } else { PValueMethod::Normal };
    let (r, p) = rank_sum_p_value(group_a, group_b, method);
    Ok(OutcomeResult {
        method: "rank_sum".into(),
        median_difference: median(group_a) - median(group_b),
        p_value: p,
        statistic: r,
        n_treated: group_a.len(),
        n_control: group_b.len(),
        exact,
    })
}
