//! Proportional-hazards model for time to treatment,
//! `h(t | X_t) = h₀(t)·exp(βᵀX_t)`, fitted by Newton–Raphson on the Breslow
//! partial likelihood. Time-varying covariates are read from interpolated
//! curves at every event time for every subject still at risk; `h₀` is never
//! estimated.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::registry::Registry;
use crate::splinefit::CurveSet;

/// Which covariate channels enter the linear predictor. Time-varying
/// covariates come first in the coefficient vector, then baseline ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub time_varying: Vec<usize>,
    pub baseline: Vec<usize>,
}

impl ModelSpec {
    pub fn full(registry: &Registry) -> Self {
        ModelSpec {
            time_varying: (0..registry.n_covariates()).collect(),
            baseline: (0..registry.n_baseline()).collect(),
        }
    }

    pub fn time_varying_only(registry: &Registry) -> Self {
        ModelSpec {
            time_varying: (0..registry.n_covariates()).collect(),
            baseline: Vec::new(),
        }
    }

    pub fn baseline_only(registry: &Registry) -> Self {
        ModelSpec {
            time_varying: Vec::new(),
            baseline: (0..registry.n_baseline()).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.time_varying.len() + self.baseline.len()
    }

    pub fn names(&self, registry: &Registry) -> Vec<String> {
        self.time_varying
            .iter()
            .map(|&k| registry.covariate_names[k].clone())
            .chain(self.baseline.iter().map(|&j| registry.baseline_names[j].clone()))
            .collect()
    }

    pub fn check(&self, registry: &Registry) -> Result<()> {
        if let Some(&k) = self.time_varying.iter().find(|&&k| k >= registry.n_covariates()) {
            return Err(Error::UnknownCovariate(format!("time-varying index {k}")));
        }
        if let Some(&j) = self.baseline.iter().find(|&&j| j >= registry.n_baseline()) {
            return Err(Error::UnknownCovariate(format!("baseline index {j}")));
        }
        Ok(())
    }

    /// Covariate row of subject `i` at time `t`, written into `out`.
    pub(crate) fn row(
        &self,
        registry: &Registry,
        curves: &CurveSet,
        i: usize,
        t: f64,
        out: &mut [f64],
    ) -> Result<()> {
        for (slot, &k) in out.iter_mut().zip(&self.time_varying) {
            *slot = curves.value_on_horizon(i, k, t).map_err(|e| {
                Error::EvaluationFailure(format!("subject {} covariate {k} at t={t}: {e}", registry.subjects[i].id))
            })?;
        }
        let offset = self.time_varying.len();
        for (slot, &j) in out[offset..].iter_mut().zip(&self.baseline) {
            *slot = registry.subjects[i].baseline[j];
        }
        Ok(())
    }
}

/// One distinct event time: the subjects treated then and everyone at risk.
#[derive(Debug, Clone)]
pub struct EventBlock {
    pub time: f64,
    /// Subject indices at risk, `U_l ≥ time`.
    pub members: Vec<usize>,
    /// Positions within `members` of the subjects treated at `time`.
    pub events: Vec<usize>,
    /// Row-major `members.len() × q` covariate matrix evaluated at `time`.
    pub x: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RiskSetView {
    pub q: usize,
    pub blocks: Vec<EventBlock>,
}

impl RiskSetView {
    pub fn build(registry: &Registry, curves: &CurveSet, spec: &ModelSpec) -> Result<Self> {
        spec.check(registry)?;
        let q = spec.dim();
        let mut events: Vec<(f64, usize)> = registry
            .treated()
            .map(|(i, s)| (s.restricted_time, i))
            .collect();
        if events.is_empty() {
            return Err(Error::NoEvents);
        }
        events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut groups: Vec<(f64, Vec<usize>)> = Vec::new();
        for (t, i) in events {
            match groups.last_mut() {
                Some((gt, members)) if *gt == t => members.push(i),
                _ => groups.push((t, vec![i])),
            }
        }
        let blocks = par::try_map_range(groups.len(), |g| {
            let (time, treated) = &groups[g];
            let members: Vec<usize> = registry
                .subjects
                .iter()
                .enumerate()
                .filter(|(_, s)| s.restricted_time >= *time)
                .map(|(l, _)| l)
                .collect();
            let mut x = vec![0.0; members.len() * q];
            for (pos, &l) in members.iter().enumerate() {
                spec.row(registry, curves, l, *time, &mut x[pos * q..(pos + 1) * q])?;
            }
            let events = treated
                .iter()
                .map(|i| members.binary_search(i).expect("event subject is in its own risk set"))
                .collect();
            Ok(EventBlock {
                time: *time,
                members,
                events,
                x,
            })
        })?;
        Ok(RiskSetView { q, blocks })
    }

    pub fn n_events(&self) -> usize {
        self.blocks.iter().map(|b| b.events.len()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct LikelihoodTerms {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

fn block_terms(block: &EventBlock, beta: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let q = beta.len();
    let rows = block.x.chunks_exact(q.max(1));
    let eta: Vec<f64> = if q == 0 {
        vec![0.0; block.members.len()]
    } else {
        rows.map(|r| r.iter().zip(beta).map(|(a, b)| a * b).sum()).collect()
    };
    let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s0 = 0.0;
    let mut s1 = vec![0.0; q];
    let mut s2 = vec![0.0; q * q];
    for (pos, &e) in eta.iter().enumerate() {
        let w = (e - shift).exp();
        s0 += w;
        let row = &block.x[pos * q..(pos + 1) * q];
        for a in 0..q {
            s1[a] += w * row[a];
            for b in 0..=a {
                s2[a * q + b] += w * row[a] * row[b];
            }
        }
    }
    let d = block.events.len() as f64;
    let mut value = -d * (shift + s0.ln());
    let mut grad = vec![0.0; q];
    for &e in &block.events {
        value += eta[e];
        let row = &block.x[e * q..(e + 1) * q];
        for a in 0..q {
            grad[a] += row[a];
        }
    }
    let mean: Vec<f64> = s1.iter().map(|v| v / s0).collect();
    for a in 0..q {
        grad[a] -= d * mean[a];
    }
    let mut hess = vec![0.0; q * q];
    for a in 0..q {
        for b in 0..=a {
            let h = -d * (s2[a * q + b] / s0 - mean[a] * mean[b]);
            hess[a * q + b] = h;
            hess[b * q + a] = h;
        }
    }
    (value, grad, hess)
}

/// Breslow log partial likelihood with exact gradient and Hessian.
pub fn partial_loglik_view(view: &RiskSetView, beta: &[f64]) -> LikelihoodTerms {
    assert_eq!(beta.len(), view.q, "coefficient length");
    let q = view.q;
    let parts = par::map_slice(&view.blocks, |b| block_terms(b, beta));
    let mut value = 0.0;
    let mut gradient = DVector::zeros(q);
    let mut hessian = DMatrix::zeros(q, q);
    // Sequential reduction keeps results bit-identical across thread counts.
    for (v, g, h) in parts {
        value += v;
        for a in 0..q {
            gradient[a] += g[a];
            for b in 0..q {
                hessian[(a, b)] += h[a * q + b];
            }
        }
    }
    LikelihoodTerms {
        value,
        gradient,
        hessian,
    }
}

pub fn partial_loglik(
    beta: &[f64],
    registry: &Registry,
    curves: &CurveSet,
    spec: &ModelSpec,
) -> Result<LikelihoodTerms> {
    if beta.len() != spec.dim() {
        return Err(Error::config("beta", format!("expected {} coefficients", spec.dim())));
    }
    let view = RiskSetView::build(registry, curves, spec)?;
    Ok(partial_loglik_view(&view, beta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoxOptions {
    pub gradient_tol: f64,
    pub step_tol: f64,
    pub max_iter: usize,
    /// Sup-norm bound on β beyond which the fit is declared divergent.
    pub max_norm: f64,
}

impl Default for CoxOptions {
    fn default() -> Self {
        CoxOptions {
            gradient_tol: 1e-8,
            step_tol: 1e-12,
            max_iter: 100,
            max_norm: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxModel {
    pub beta: Vec<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub covariate_names: Vec<String>,
    pub model_spec: ModelSpec,
    pub gradient_norm: f64,
    /// Observed information `−∇²ℓ(β̂)`, row-major.
    pub information: Vec<Vec<f64>>,
    /// Log partial likelihood after each accepted iterate, starting at β = 0.
    pub trace: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

fn sup_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn newton_step(terms: &LikelihoodTerms) -> Result<DVector<f64>> {
    let info = -&terms.hessian;
    if let Some(chol) = info.clone().cholesky() {
        return Ok(chol.solve(&terms.gradient));
    }
    let mut jittered = info;
    for a in 0..jittered.nrows() {
        jittered[(a, a)] += 1e-10;
    }
    jittered
        .cholesky()
        .map(|c| c.solve(&terms.gradient))
        .ok_or(Error::SingularInformation)
}

pub fn fit_cox_view(view: &RiskSetView, names: Vec<String>, spec: ModelSpec, options: &CoxOptions) -> Result<CoxModel> {
    let q = view.q;
    let mut beta = DVector::zeros(q);
    let mut terms = partial_loglik_view(view, beta.as_slice());
    let mut trace = vec![terms.value];
    let mut iterations = 0;
    let mut converged = false;
    let mut diagnostic = None;

    while iterations < options.max_iter {
        if sup_norm(&terms.gradient) < options.gradient_tol {
            converged = true;
            break;
        }
        let step = newton_step(&terms)?;
        let mut scale = 1.0;
        let accepted = loop {
            let candidate = &beta + &step * scale;
            let next = partial_loglik_view(view, candidate.as_slice());
            if next.value >= terms.value {
                break Some((candidate, next));
            }
            scale *= 0.5;
            if sup_norm(&step) * scale < options.step_tol {
                break None;
            }
        };
        let Some((candidate, next)) = accepted else {
            converged = true;
            break;
        };
        iterations += 1;
        let moved = sup_norm(&(&candidate - &beta));
        beta = candidate;
        terms = next;
        trace.push(terms.value);
        if sup_norm(&beta) > options.max_norm {
            diagnostic = Some(format!(
                "coefficient sup-norm exceeded {} (monotone likelihood); estimates are not finite",
                options.max_norm
            ));
            break;
        }
        if moved < options.step_tol {
            converged = true;
            break;
        }
    }
    if !converged && diagnostic.is_none() {
        diagnostic = Some(format!("no convergence after {} iterations", options.max_iter));
    }
    let info = -&terms.hessian;
    Ok(CoxModel {
        beta: beta.iter().copied().collect(),
        loglik: terms.value,
        converged,
        iterations,
        covariate_names: names,
        model_spec: spec,
        gradient_norm: sup_norm(&terms.gradient),
        information: (0..q).map(|a| (0..q).map(|b| info[(a, b)]).collect()).collect(),
        trace,
        diagnostic,
    })
}

pub fn fit_cox(registry: &Registry, curves: &CurveSet, spec: &ModelSpec, options: &CoxOptions) -> Result<CoxModel> {
    let view = RiskSetView::build(registry, curves, spec)?;
    fit_cox_view(&view, spec.names(registry), spec.clone(), options)
}
