//! Propensity-process paths `θ̂_i(s) = β̂ᵀX̂_i(s)` on a uniform time grid and
//! the integrated squared distance between two paths.
//!
//! Paths live on the linear-predictor scale. The baseline hazard adds the
//! same `log h₀(s)` to every subject, so it cancels from every path
//! difference and never needs to be estimated.

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coxfit::CoxModel;
use crate::error::{Error, Result};
use crate::par;
use crate::registry::Registry;
use crate::splinefit::CurveSet;

pub const DEFAULT_GRID_POINTS: usize = 200;

/// Uniform grid `0 = s₀ < … < s_G = L` with `G` cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    cells: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, cells: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::config("grid.horizon", "must be a positive real"));
        }
        if cells < 2 {
            return Err(Error::config("grid", "at least 2 cells are required"));
        }
        Ok(TimeGrid { horizon, cells })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.cells as f64
    }

    pub fn point(&self, g: usize) -> f64 {
        if g == self.cells {
            self.horizon
        } else {
            g as f64 * self.step()
        }
    }

    pub fn points(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.cells).map(|g| self.point(g))
    }

    /// Index of the last grid point at or before `t`, and the offset of `t`
    /// past it.
    fn locate(&self, t: f64) -> (usize, f64) {
        let g = ((t / self.step()).floor() as usize).min(self.cells);
        // Guard against rounding putting `t` just before point(g).
        let g = if g > 0 && self.point(g) > t { g - 1 } else { g };
        (g, t - self.point(g))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropensityPath {
    pub subject_id: String,
    pub grid: TimeGrid,
    pub values: Vec<f64>,
    /// `U_i`: the path is backed by observed history up to here and by
    /// interpolated curves up to `L`.
    pub native_until: f64,
}

impl PropensityPath {
    pub fn new(subject_id: impl Into<String>, grid: TimeGrid, values: Vec<f64>, native_until: f64) -> Self {
        assert_eq!(values.len(), grid.cells() + 1, "one value per grid point");
        PropensityPath {
            subject_id: subject_id.into(),
            grid,
            values,
            native_until,
        }
    }

    /// Path sampled from a function of time.
    pub fn from_fn(subject_id: impl Into<String>, grid: TimeGrid, f: impl Fn(f64) -> f64) -> Self {
        let values = grid.points().map(f).collect();
        PropensityPath::new(subject_id, grid, values, grid.horizon())
    }

    /// Linear interpolation between grid points; `t` is clamped to `[0, L]`.
    pub fn value_at(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, self.grid.horizon());
        let (g, offset) = self.grid.locate(t);
        if g == self.grid.cells() || offset == 0.0 {
            return self.values[g];
        }
        let frac = offset / self.grid.step();
        self.values[g] + frac * (self.values[g + 1] - self.values[g])
    }
}

pub fn build_paths(model: &CoxModel, curves: &CurveSet, registry: &Registry, grid: &TimeGrid) -> Result<Vec<PropensityPath>> {
    let spec = &model.model_spec;
    spec.check(registry)?;
    if model.beta.len() != spec.dim() {
        return Err(Error::EvaluationFailure("coefficient length does not match model covariates".into()));
    }
    let q = spec.dim();
    par::try_map_range(registry.n_subjects(), |i| {
        let mut row = vec![0.0; q];
        let mut values = Vec::with_capacity(grid.cells() + 1);
        for s in grid.points() {
            spec.row(registry, curves, i, s, &mut row)?;
            values.push(row.iter().zip(&model.beta).map(|(x, b)| x * b).sum());
        }
        let subject = &registry.subjects[i];
        Ok(PropensityPath::new(subject.id.clone(), *grid, values, subject.restricted_time))
    })
}

/// Trapezoid rule for `∫₀^upto f(s) ds` where `f` is known at grid points
/// through `at(g)`; the last partial cell uses the linearly interpolated
/// endpoint value `at_end`.
fn trapezoid(grid: &TimeGrid, upto: f64, at: impl Fn(usize) -> f64, at_end: f64) -> f64 {
    let (g_end, offset) = grid.locate(upto);
    let h = grid.step();
    let mut sum = 0.0;
    for g in 0..g_end {
        sum += 0.5 * (grid.point(g + 1) - grid.point(g)) * (at(g) + at(g + 1));
    }
    if offset > 0.0 && g_end < grid.cells() {
        sum += 0.5 * offset * (at(g_end) + at_end);
    }
    debug_assert!(offset <= h * (1.0 + 1e-9) || g_end == grid.cells());
    sum
}

/// `Q = ∫₀^{t*} (θ̂_a − θ̂_b)² dt` by the trapezoid rule on the shared grid.
pub fn path_distance(a: &PropensityPath, b: &PropensityPath, upto: f64) -> Result<f64> {
    if a.grid != b.grid {
        return Err(Error::GridMismatch);
    }
    let horizon = a.grid.horizon();
    if !(0.0..=horizon).contains(&upto) {
        return Err(Error::OutOfDomain { t: upto, upper: horizon });
    }
    Ok(squared_distance(a, b, upto))
}

pub(crate) fn squared_distance(a: &PropensityPath, b: &PropensityPath, upto: f64) -> f64 {
    let sq = |g: usize| {
        let d = a.values[g] - b.values[g];
        d * d
    };
    let end = a.value_at(upto) - b.value_at(upto);
    trapezoid(&a.grid, upto, sq, end * end)
}

/// Treatment-assignment density implied by a hazard path,
/// `θ(t)·exp{−∫₀ᵗ θ(s) ds}`.
pub fn density_factorization_check(theta: &PropensityPath, t: f64) -> Result<f64> {
    let horizon = theta.grid.horizon();
    if !(0.0..=horizon).contains(&t) {
        return Err(Error::OutOfDomain { t, upper: horizon });
    }
    let (g_end, _) = theta.grid.locate(t);
    let at_t = theta.value_at(t);
    for (g, &v) in theta.values.iter().enumerate().take(g_end + 1) {
        if v < 0.0 {
            return Err(Error::NegativeHazard {
                time: theta.grid.point(g),
                value: v,
            });
        }
    }
    if at_t < 0.0 {
        return Err(Error::NegativeHazard { time: t, value: at_t });
    }
    let cumulative = trapezoid(&theta.grid, t, |g| theta.values[g], at_t);
    Ok(at_t * (-cumulative).exp())
}

/// Long-format `id,s,theta` export.
pub fn write_paths_csv(paths: &[PropensityPath], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    w.write_record(["id", "s", "theta"]).map_err(err)?;
    for p in paths {
        for (s, v) in p.grid.points().zip(&p.values) {
            w.write_record([p.subject_id.as_str(), &s.to_string(), &v.to_string()])
                .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
