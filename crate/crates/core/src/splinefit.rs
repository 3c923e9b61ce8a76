//! Per-covariate spline mixed model for longitudinal covariates.
//!
//! Each time-varying covariate `k` is modelled as
//! `X_ijk = b(t_ij)ᵀγ_k + b(t_ij)ᵀα_ik + ε_ijk` with a truncated power basis
//! `b`. Estimation is two-stage: `γ_k` by pooled least squares over every
//! observed `(i, j)`, then each `α_ik` by ridge regression of that subject's
//! residuals, which shrinks individual deviations towards the population
//! curve.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::registry::Registry;

pub const DEFAULT_DEGREE: usize = 3;
pub const DEFAULT_INTERIOR_KNOTS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub degree: usize,
    pub interior_knots: Vec<f64>,
    /// Right boundary `L`; the left boundary is 0.
    pub horizon: f64,
}

impl BasisSpec {
    pub fn new(degree: usize, interior_knots: Vec<f64>, horizon: f64) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::config("basis.horizon", "must be a positive real"));
        }
        for w in interior_knots.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::config("basis.interior_knots", "knots must be strictly increasing"));
            }
        }
        if interior_knots.iter().any(|&k| !(k > 0.0 && k < horizon)) {
            return Err(Error::config("basis.interior_knots", "knots must lie strictly inside (0, L)"));
        }
        Ok(BasisSpec {
            degree,
            interior_knots,
            horizon,
        })
    }

    pub fn dim(&self) -> usize {
        self.degree + 1 + self.interior_knots.len()
    }

    /// Writes `b(t)` into `out` without a domain check. Time is measured in
    /// units of the horizon, `u = t/L`, so every column stays in `[0, 1]` and
    /// the ridge penalty acts evenly on all coefficients.
    pub(crate) fn fill(&self, t: f64, out: &mut [f64]) {
        let u = t / self.horizon;
        let mut power = 1.0;
        for slot in out.iter_mut().take(self.degree + 1) {
            *slot = power;
            power *= u;
        }
        for (slot, &knot) in out[self.degree + 1..].iter_mut().zip(&self.interior_knots) {
            let v = knot / self.horizon;
            *slot = if u > v { (u - v).powi(self.degree as i32) } else { 0.0 };
        }
    }

    pub(crate) fn dot(&self, t: f64, coef: &[f64]) -> f64 {
        let u = t / self.horizon;
        let mut acc = 0.0;
        let mut power = 1.0;
        for c in &coef[..=self.degree] {
            acc += c * power;
            power *= u;
        }
        for (c, &knot) in coef[self.degree + 1..].iter().zip(&self.interior_knots) {
            let v = knot / self.horizon;
            if u > v {
                acc += c * (u - v).powi(self.degree as i32);
            }
        }
        acc
    }
}

/// Truncated power basis `(1, u, …, u^deg, (u−κ₁/L)₊^deg, …)` with `u = t/L`,
/// at `t ∈ [0, L]`.
pub fn basis_eval(t: f64, spec: &BasisSpec) -> Result<Vec<f64>> {
    if !(0.0..=spec.horizon).contains(&t) {
        return Err(Error::OutOfDomain {
            t,
            upper: spec.horizon,
        });
    }
    let mut out = vec![0.0; spec.dim()];
    spec.fill(t, &mut out);
    Ok(out)
}

/// Interior knots at equally spaced quantiles of the pooled visit times.
/// Duplicates and knots on the boundary are dropped.
pub fn quantile_knots(registry: &Registry, count: usize) -> Vec<f64> {
    let mut times: Vec<f64> = registry.visits.iter().map(|v| v.time).collect();
    if times.is_empty() || count == 0 {
        return Vec::new();
    }
    times.sort_by(f64::total_cmp);
    let n = times.len();
    let mut knots: Vec<f64> = Vec::with_capacity(count);
    for j in 1..=count {
        let p = j as f64 / (count + 1) as f64;
        let pos = p * (n - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let q = times[lo] + (pos - lo as f64) * (times[hi] - times[lo]);
        if q > 0.0 && q < registry.horizon && knots.last().is_none_or(|&last| q > last) {
            knots.push(q);
        }
    }
    knots
}

pub fn default_lambda_grid() -> Vec<f64> {
    (0..=12).map(|j| 10f64.powf(-3.0 + 0.5 * j as f64)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplineModel {
    pub covariate: usize,
    pub name: String,
    pub basis: BasisSpec,
    pub fixed: Vec<f64>,
    pub random: BTreeMap<String, Vec<f64>>,
    pub noise_var: f64,
    pub lambda: f64,
}

#[derive(Serialize, Deserialize)]
struct SplineModelWire {
    k: usize,
    name: String,
    degree: usize,
    knots: Vec<f64>,
    horizon: f64,
    gamma: Vec<f64>,
    alpha: BTreeMap<String, Vec<f64>>,
    sigma2: f64,
    lambda: f64,
}

impl Serialize for SplineModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        SplineModelWire {
            k: self.covariate,
            name: self.name.clone(),
            degree: self.basis.degree,
            knots: self.basis.interior_knots.clone(),
            horizon: self.basis.horizon,
            gamma: self.fixed.clone(),
            alpha: self.random.clone(),
            sigma2: self.noise_var,
            lambda: self.lambda,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SplineModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let w = SplineModelWire::deserialize(d)?;
        let basis = BasisSpec::new(w.degree, w.knots, w.horizon).map_err(serde::de::Error::custom)?;
        Ok(SplineModel {
            covariate: w.k,
            name: w.name,
            basis,
            fixed: w.gamma,
            random: w.alpha,
            noise_var: w.sigma2,
            lambda: w.lambda,
        })
    }
}

/// Observed `(t, x)` pairs of one covariate, grouped by subject.
struct Observations {
    per_subject: Vec<Vec<(f64, f64)>>,
    total: usize,
}

fn collect_observations(registry: &Registry, k: usize) -> Observations {
    let groups = registry.visits_by_subject();
    let mut total = 0;
    let per_subject = groups
        .iter()
        .map(|idx| {
            let obs: Vec<(f64, f64)> = idx
                .iter()
                .filter_map(|&v| {
                    let visit = &registry.visits[v];
                    visit.values.get(k).copied().flatten().map(|x| (visit.time, x))
                })
                .collect();
            total += obs.len();
            obs
        })
        .collect();
    Observations { per_subject, total }
}

/// Least squares through an SVD of the column-scaled design. Returns `None`
/// when the design is numerically rank deficient.
fn least_squares(design: &DMatrix<f64>, y: &DVector<f64>) -> Option<DVector<f64>> {
    let d = design.ncols();
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            let n = design.column(j).norm();
            if n > 0.0 {
                n
            } else {
                1.0
            }
        })
        .collect();
    let mut scaled = design.clone();
    for (j, s) in scale.iter().enumerate() {
        scaled.column_mut(j).unscale_mut(*s);
    }
    let svd = scaled.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = 1e-10 * smax;
    if smax <= 0.0 || svd.singular_values.iter().any(|&s| s <= tol) {
        return None;
    }
    let mut coef = svd.solve(y, tol).ok()?;
    for (j, s) in scale.iter().enumerate() {
        coef[j] /= s;
    }
    Some(coef)
}

/// Pooled first stage, shared by every ridge penalty tried.
struct PooledStage {
    fixed: Vec<f64>,
    /// Per subject: design rows and residuals after the population fit.
    designs: Vec<(DMatrix<f64>, DVector<f64>)>,
    total: usize,
}

fn pooled_stage(registry: &Registry, k: usize, spec: &BasisSpec) -> Result<PooledStage> {
    let name = registry
        .covariate_names
        .get(k)
        .cloned()
        .ok_or_else(|| Error::UnknownCovariate(format!("index {k}")))?;
    let obs = collect_observations(registry, k);
    let d = spec.dim();
    if obs.total < d {
        return Err(Error::InsufficientData {
            covariate: name,
            message: format!("{} observations for a basis of dimension {d}", obs.total),
        });
    }
    let mut design = DMatrix::zeros(obs.total, d);
    let mut y = DVector::zeros(obs.total);
    let mut row = 0;
    let mut buf = vec![0.0; d];
    for subject in &obs.per_subject {
        for &(t, x) in subject {
            if !(0.0..=spec.horizon).contains(&t) {
                return Err(Error::OutOfDomain { t, upper: spec.horizon });
            }
            spec.fill(t, &mut buf);
            for j in 0..d {
                design[(row, j)] = buf[j];
            }
            y[row] = x;
            row += 1;
        }
    }
    let fixed = least_squares(&design, &y).ok_or_else(|| Error::InsufficientData {
        covariate: name,
        message: "pooled spline design is rank deficient".into(),
    })?;

    let designs = obs
        .per_subject
        .iter()
        .map(|subject| {
            let m = subject.len();
            let mut b = DMatrix::zeros(m, d);
            let mut r = DVector::zeros(m);
            for (row, &(t, x)) in subject.iter().enumerate() {
                spec.fill(t, &mut buf);
                for j in 0..d {
                    b[(row, j)] = buf[j];
                }
                r[row] = x - spec.dot(t, fixed.as_slice());
            }
            (b, r)
        })
        .collect();
    Ok(PooledStage {
        fixed: fixed.iter().copied().collect(),
        designs,
        total: obs.total,
    })
}

/// Ridge solution `(BᵀB + λI)⁻¹ Bᵀ r` and the trace of the hat matrix.
fn ridge(b: &DMatrix<f64>, r: &DVector<f64>, lambda: f64) -> (DVector<f64>, f64) {
    let d = b.ncols();
    if b.nrows() == 0 {
        return (DVector::zeros(d), 0.0);
    }
    let gram = b.transpose() * b;
    let mut system = gram.clone();
    for j in 0..d {
        system[(j, j)] += lambda;
    }
    let chol = system
        .cholesky()
        .expect("ridge system is positive definite for lambda > 0");
    let alpha = chol.solve(&(b.transpose() * r));
    let trace = chol.solve(&gram).trace();
    (alpha, trace)
}

struct RandomStage {
    random: Vec<Vec<f64>>,
    rss: f64,
    df: f64,
}

fn random_stage(pooled: &PooledStage, lambda: f64) -> RandomStage {
    let fits = par::map_slice(&pooled.designs, |(b, r)| {
        let (alpha, trace) = ridge(b, r, lambda);
        let resid = r - b * &alpha;
        (alpha.iter().copied().collect::<Vec<_>>(), resid.norm_squared(), trace)
    });
    let mut rss = 0.0;
    let mut df = pooled.fixed.len() as f64;
    let mut random = Vec::with_capacity(fits.len());
    for (alpha, r2, trace) in fits {
        rss += r2;
        df += trace;
        random.push(alpha);
    }
    RandomStage { random, rss, df }
}

fn assemble(
    registry: &Registry,
    k: usize,
    spec: &BasisSpec,
    pooled: PooledStage,
    stage: RandomStage,
    lambda: f64,
) -> SplineModel {
    let random = registry
        .subjects
        .iter()
        .zip(stage.random)
        .map(|(s, a)| (s.id.clone(), a))
        .collect();
    SplineModel {
        covariate: k,
        name: registry.covariate_names[k].clone(),
        basis: spec.clone(),
        fixed: pooled.fixed,
        random,
        noise_var: stage.rss / pooled.total as f64,
        lambda,
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::config("lambda", "ridge penalty must be a positive real"));
    }
    Ok(())
}

pub fn fit_covariate_model(registry: &Registry, k: usize, spec: &BasisSpec, lambda: f64) -> Result<SplineModel> {
    check_lambda(lambda)?;
    let pooled = pooled_stage(registry, k, spec)?;
    let stage = random_stage(&pooled, lambda);
    Ok(assemble(registry, k, spec, pooled, stage, lambda))
}

/// Generalized cross-validation score `N·RSS / (N − df)²` for each penalty
/// in `grid`; infinite when the effective degrees of freedom reach `N`.
pub fn gcv_scores(registry: &Registry, k: usize, spec: &BasisSpec, grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    let pooled = pooled_stage(registry, k, spec)?;
    grid.iter()
        .map(|&lambda| {
            check_lambda(lambda)?;
            let stage = random_stage(&pooled, lambda);
            Ok((lambda, gcv(pooled.total, stage.rss, stage.df)))
        })
        .collect()
}

fn gcv(n: usize, rss: f64, df: f64) -> f64 {
    let n = n as f64;
    let resid_df = n - df;
    if resid_df <= 1e-8 {
        f64::INFINITY
    } else {
        n * rss / (resid_df * resid_df)
    }
}

/// Fits with the penalty minimizing GCV over `grid`. Ties keep the larger
/// penalty.
pub fn fit_covariate_model_gcv(registry: &Registry, k: usize, spec: &BasisSpec, grid: &[f64]) -> Result<SplineModel> {
    if grid.is_empty() {
        return Err(Error::config("lambda_grid", "must not be empty"));
    }
    let pooled = pooled_stage(registry, k, spec)?;
    let mut best: Option<(f64, f64, RandomStage)> = None;
    for &lambda in grid {
        check_lambda(lambda)?;
        let stage = random_stage(&pooled, lambda);
        let score = gcv(pooled.total, stage.rss, stage.df);
        let better = match &best {
            None => true,
            Some((_, s, _)) => score <= *s,
        };
        if better {
            best = Some((lambda, score, stage));
        }
    }
    let (lambda, _, stage) = best.expect("grid is nonempty");
    Ok(assemble(registry, k, spec, pooled, stage, lambda))
}

/// How far beyond a subject's own follow-up its curve may be evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalDomain {
    /// `[0, U_i]`
    Native,
    /// `[0, L]`
    Horizon,
}

/// Interpolated treatment-free covariate curves `X̂_ik(t) = b(t)ᵀ(γ̂_k + α̂_ik)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSet {
    horizon: f64,
    domain: EvalDomain,
    ids: Vec<String>,
    restricted: Vec<f64>,
    bases: Vec<BasisSpec>,
    /// `coef[i][k]` is the combined coefficient vector of subject `i`.
    coef: Vec<Vec<Vec<f64>>>,
}

impl CurveSet {
    /// Builds curves from explicit coefficients, one basis per covariate.
    pub fn from_coefficients(
        horizon: f64,
        ids: Vec<String>,
        restricted: Vec<f64>,
        bases: Vec<BasisSpec>,
        coef: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        if ids.len() != restricted.len() || ids.len() != coef.len() {
            return Err(Error::EvaluationFailure("curve set dimensions disagree".into()));
        }
        for per_subject in &coef {
            if per_subject.len() != bases.len()
                || per_subject.iter().zip(&bases).any(|(c, b)| c.len() != b.dim())
            {
                return Err(Error::EvaluationFailure("coefficient length does not match basis".into()));
            }
        }
        Ok(CurveSet {
            horizon,
            domain: EvalDomain::Native,
            ids,
            restricted,
            bases,
            coef,
        })
    }

    pub fn with_domain(mut self, domain: EvalDomain) -> Self {
        self.domain = domain;
        self
    }

    pub fn domain(&self) -> EvalDomain {
        self.domain
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_subjects(&self) -> usize {
        self.ids.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.bases.len()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    /// Evaluates `X̂_ik(t)` under the configured domain.
    pub fn value(&self, i: usize, k: usize, t: f64) -> Result<f64> {
        let upper = match self.domain {
            EvalDomain::Native => self.restricted[i],
            EvalDomain::Horizon => self.horizon,
        };
        self.value_within(i, k, t, upper)
    }

    /// Evaluates anywhere on `[0, L]`, regardless of the configured domain.
    /// Risk-set and path construction need controls' curves past their last
    /// visit.
    pub fn value_on_horizon(&self, i: usize, k: usize, t: f64) -> Result<f64> {
        self.value_within(i, k, t, self.horizon)
    }

    fn value_within(&self, i: usize, k: usize, t: f64, upper: f64) -> Result<f64> {
        if !(0.0..=upper).contains(&t) {
            return Err(Error::OutOfDomain { t, upper });
        }
        let basis = self
            .bases
            .get(k)
            .ok_or_else(|| Error::EvaluationFailure(format!("no curve for covariate {k}")))?;
        let coef = self
            .coef
            .get(i)
            .ok_or_else(|| Error::EvaluationFailure(format!("no curves for subject {i}")))?;
        Ok(basis.dot(t, &coef[k]))
    }
}

/// Combines fitted models into per-subject curves. Subjects absent from a
/// model's random-effect map fall back to the population curve.
pub fn predict_curves(models: &[SplineModel], registry: &Registry) -> Result<CurveSet> {
    if models.len() != registry.n_covariates() {
        return Err(Error::EvaluationFailure(format!(
            "{} spline models for {} time-varying covariates",
            models.len(),
            registry.n_covariates()
        )));
    }
    let mut ordered: Vec<&SplineModel> = models.iter().collect();
    ordered.sort_by_key(|m| m.covariate);
    let coef = registry
        .subjects
        .iter()
        .map(|s| {
            ordered
                .iter()
                .map(|m| match m.random.get(&s.id) {
                    Some(a) => m.fixed.iter().zip(a).map(|(g, a)| g + a).collect(),
                    None => m.fixed.clone(),
                })
                .collect()
        })
        .collect();
    CurveSet::from_coefficients(
        registry.horizon,
        registry.subjects.iter().map(|s| s.id.clone()).collect(),
        registry.subjects.iter().map(|s| s.restricted_time).collect(),
        ordered.iter().map(|m| m.basis.clone()).collect(),
        coef,
    )
}

/// How the ridge penalty is chosen for each covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Penalty {
    Fixed(f64),
    Gcv(Vec<f64>),
}

impl Default for Penalty {
    fn default() -> Self {
        Penalty::Gcv(default_lambda_grid())
    }
}

/// Fits every time-varying covariate, in parallel over covariates.
pub fn fit_all(registry: &Registry, specs: &[BasisSpec], penalty: &Penalty) -> Result<Vec<SplineModel>> {
    if specs.len() != registry.n_covariates() {
        return Err(Error::config("basis", "one basis per time-varying covariate is required"));
    }
    par::try_map_range(specs.len(), |k| match penalty {
        Penalty::Fixed(lambda) => fit_covariate_model(registry, k, &specs[k], *lambda),
        Penalty::Gcv(grid) => fit_covariate_model_gcv(registry, k, &specs[k], grid),
    })
}
