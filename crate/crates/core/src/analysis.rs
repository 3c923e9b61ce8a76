//! End-to-end analysis of one registry: smoothing, time-to-treatment model,
//! paths, matching and diagnostics for each comparison method.

use serde::{Deserialize, Serialize};

use crate::coxfit::{fit_cox, CoxModel, CoxOptions, ModelSpec};
use crate::diagnostics::{balance_test, wilcoxon_rank_sum, wilcoxon_signed_rank, BalanceResult, OutcomeResult};
use crate::error::{Error, Result};
use crate::matcher::{sequential_match, MatchCriterion, MatchOptions, MatchSet};
use crate::process::{build_paths, PropensityPath, TimeGrid, DEFAULT_GRID_POINTS};
use crate::registry::Registry;
use crate::splinefit::{
    fit_all, predict_curves, quantile_knots, BasisSpec, CurveSet, Penalty, SplineModel, DEFAULT_DEGREE,
    DEFAULT_INTERIOR_KNOTS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Treated versus never-treated, no matching.
    Naive,
    /// Matching on a baseline-only propensity function.
    Pf,
    /// Matching on the full linear predictor at the treatment time only.
    Gps,
    /// Matching on the integrated squared distance between full paths.
    Pp,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Naive, Method::Pf, Method::Gps, Method::Pp];

    pub fn label(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Pf => "pf",
            Method::Gps => "gps",
            Method::Pp => "pp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| Error::config("method", format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BasisOptions {
    pub degree: usize,
    /// Explicit interior knots; when absent, `n_knots` quantiles of the
    /// pooled visit times are used.
    pub interior_knots: Option<Vec<f64>>,
    pub n_knots: usize,
}

impl Default for BasisOptions {
    fn default() -> Self {
        BasisOptions {
            degree: DEFAULT_DEGREE,
            interior_knots: None,
            n_knots: DEFAULT_INTERIOR_KNOTS,
        }
    }
}

impl BasisOptions {
    pub fn resolve(&self, registry: &Registry) -> Result<BasisSpec> {
        let knots = match &self.interior_knots {
            Some(k) => k.clone(),
            None => quantile_knots(registry, self.n_knots),
        };
        BasisSpec::new(self.degree, knots, registry.horizon)
    }
}

/// Covariate channels entering the hazard model of the `gps` and `pp` methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channels {
    /// Time-varying and baseline covariates.
    #[default]
    Full,
    TimeVarying,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisOptions {
    pub basis: BasisOptions,
    pub channels: Channels,
    pub penalty: Penalty,
    pub grid_points: usize,
    pub max_q: Option<f64>,
    pub cox: CoxOptions,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            basis: BasisOptions::default(),
            channels: Channels::default(),
            penalty: Penalty::default(),
            grid_points: DEFAULT_GRID_POINTS,
            max_q: None,
            cox: CoxOptions::default(),
        }
    }
}

/// Smoothed covariate histories shared by every method.
#[derive(Debug, Clone)]
pub struct Smoothed {
    pub models: Vec<SplineModel>,
    pub curves: CurveSet,
}

pub fn smooth(registry: &Registry, options: &AnalysisOptions) -> Result<Smoothed> {
    if registry.subjects.is_empty() {
        return Err(Error::EmptyRegistry);
    }
    let basis = options.basis.resolve(registry).map_err(|e| e.in_stage("smooth"))?;
    let specs = vec![basis; registry.n_covariates()];
    let models = fit_all(registry, &specs, &options.penalty).map_err(|e| e.in_stage("smooth"))?;
    let curves = predict_curves(&models, registry).map_err(|e| e.in_stage("smooth"))?;
    Ok(Smoothed { models, curves })
}

#[derive(Debug, Clone)]
pub struct MethodResult {
    pub method: Method,
    pub cox: Option<CoxModel>,
    pub paths: Vec<PropensityPath>,
    pub matches: Option<MatchSet>,
    pub balance: Vec<BalanceResult>,
    pub outcome: OutcomeResult,
    /// Matched pairs left out of the outcome test for a missing outcome.
    pub pairs_without_outcome: usize,
}

fn covariate_names(registry: &Registry) -> Vec<String> {
    registry
        .covariate_names
        .iter()
        .chain(&registry.baseline_names)
        .cloned()
        .collect()
}

fn balance_all(registry: &Registry, curves: &CurveSet, matches: Option<&MatchSet>) -> Result<Vec<BalanceResult>> {
    covariate_names(registry)
        .iter()
        .map(|name| balance_test(registry, curves, name, matches))
        .collect()
}

fn matched_outcome(registry: &Registry, set: &MatchSet) -> Result<(OutcomeResult, usize)> {
    let index = registry.subject_index();
    let outcome = |id: &str| {
        index
            .get(id)
            .map(|&i| registry.subjects[i].outcome)
            .ok_or_else(|| Error::UnknownSubject(id.to_string()))
    };
    let mut diffs = Vec::with_capacity(set.len());
    let mut skipped = 0;
    for pair in &set.pairs {
        match (outcome(&pair.treated_id)?, outcome(&pair.control_id)?) {
            (Some(y_t), Some(y_c)) => diffs.push(y_t - y_c),
            _ => skipped += 1,
        }
    }
    if diffs.is_empty() {
        return Err(Error::DegenerateStrata);
    }
    Ok((wilcoxon_signed_rank(&diffs), skipped))
}

fn naive_outcome(registry: &Registry) -> Result<OutcomeResult> {
    let (mut treated, mut untreated) = (Vec::new(), Vec::new());
    for s in &registry.subjects {
        if let Some(y) = s.outcome {
            if s.treated_before_horizon {
                treated.push(y);
            } else {
                untreated.push(y);
            }
        }
    }
    wilcoxon_rank_sum(&treated, &untreated).map_err(|_| Error::DegenerateStrata)
}

pub fn run_method(
    registry: &Registry,
    smoothed: &Smoothed,
    method: Method,
    options: &AnalysisOptions,
) -> Result<MethodResult> {
    if method == Method::Naive {
        return Ok(MethodResult {
            method,
            cox: None,
            paths: Vec::new(),
            matches: None,
            balance: balance_all(registry, &smoothed.curves, None).map_err(|e| e.in_stage("balance"))?,
            outcome: naive_outcome(registry).map_err(|e| e.in_stage("outcome"))?,
            pairs_without_outcome: 0,
        });
    }
    let full = match options.channels {
        Channels::Full => ModelSpec::full(registry),
        Channels::TimeVarying => ModelSpec::time_varying_only(registry),
    };
    let (spec, criterion) = match method {
        Method::Pf => {
            if registry.n_baseline() == 0 {
                return Err(Error::MissingChannel {
                    method: method.label().into(),
                    channel: "baseline".into(),
                }
                .in_stage("fit"));
            }
            (ModelSpec::baseline_only(registry), MatchCriterion::IntegratedPath)
        }
        Method::Gps => (full, MatchCriterion::PointAtMatchTime),
        _ => (full, MatchCriterion::IntegratedPath),
    };
    let cox = fit_cox(registry, &smoothed.curves, &spec, &options.cox).map_err(|e| e.in_stage("fit"))?;
    let grid = TimeGrid::new(registry.horizon, options.grid_points).map_err(|e| e.in_stage("paths"))?;
    let paths = build_paths(&cox, &smoothed.curves, registry, &grid).map_err(|e| e.in_stage("paths"))?;
    let match_options = MatchOptions {
        criterion,
        max_q: options.max_q,
    };
    let matches = sequential_match(&paths, registry, &match_options).map_err(|e| e.in_stage("match"))?;
    let balance = balance_all(registry, &smoothed.curves, Some(&matches)).map_err(|e| e.in_stage("balance"))?;
    let (outcome, pairs_without_outcome) = matched_outcome(registry, &matches).map_err(|e| e.in_stage("outcome"))?;
    Ok(MethodResult {
        method,
        cox: Some(cox),
        paths,
        matches: Some(matches),
        balance,
        outcome,
        pairs_without_outcome,
    })
}

/// Smooths once and runs each requested method.
pub fn analyze(registry: &Registry, methods: &[Method], options: &AnalysisOptions) -> Result<(Smoothed, Vec<MethodResult>)> {
    let smoothed = smooth(registry, options)?;
    let results = methods
        .iter()
        .map(|&m| run_method(registry, &smoothed, m, options))
        .collect::<Result<_>>()?;
    Ok((smoothed, results))
}
