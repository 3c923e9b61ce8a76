//! Synthetic registries with time-dependent confounding and known truth.
//!
//! Each subject has baseline covariates `Z` and treatment-free covariate
//! trajectories `X*_k(s) = a + b·s + c·s²`. Treatment time is drawn from
//! `h(s) = h₀(s)·exp(βᵀX*(s) + β_zᵀZ)` by inverting the cumulative hazard.
//! Potential outcomes are
//!
//! `Y*_t = μ + Δ·1{t < L} + Σ w_h·∫₀ᴸ X*_k ds + Σ w_c·X*_k(L) + Σ w_z·Z + ε`
//!
//! and the observed outcome is `Y = Y*_U`. Every subject draws from its own
//! counter-based random streams, one per purpose, so the treatment-time draw
//! never touches the outcome noise stream.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::analysis::{analyze, AnalysisOptions, Method};
use crate::error::{Error, Result};
use crate::par;
use crate::process::{density_factorization_check, PropensityPath, TimeGrid};
use crate::registry::{Registry, Subject, VisitRecord};
use crate::splinefit::{BasisSpec, CurveSet};

/// Minimum number of cells of the cumulative-hazard grid per horizon.
pub const MIN_SIM_CELLS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: f64,
    pub sd: f64,
}

impl Gaussian {
    pub const fn fixed(mean: f64) -> Self {
        Gaussian { mean, sd: 0.0 }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        self.mean + self.sd * z
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub name: String,
    pub intercept: Gaussian,
    pub slope: Gaussian,
    #[serde(default = "zero_gaussian")]
    pub curvature: Gaussian,
    /// Added to the intercept: `Σ_j loading_j·Z_j`.
    #[serde(default)]
    pub baseline_loading: Vec<f64>,
    #[serde(default)]
    pub measurement_sd: f64,
}

fn zero_gaussian() -> Gaussian {
    Gaussian::fixed(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineDist {
    Normal { mean: f64, sd: f64 },
    Bernoulli { p: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub name: String,
    pub dist: BaselineDist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineHazard {
    Constant { rate: f64 },
    /// `rates[j]` applies on `[breaks[j-1], breaks[j])` with `breaks[-1] = 0`;
    /// the last rate continues past the last break.
    PiecewiseConstant { breaks: Vec<f64>, rates: Vec<f64> },
}

impl BaselineHazard {
    pub fn at(&self, s: f64) -> f64 {
        match self {
            BaselineHazard::Constant { rate } => *rate,
            BaselineHazard::PiecewiseConstant { breaks, rates } => {
                let j = breaks.partition_point(|&b| b <= s);
                rates[j.min(rates.len() - 1)]
            }
        }
    }

    fn check(&self) -> Result<()> {
        match self {
            BaselineHazard::Constant { rate } if !(*rate > 0.0 && rate.is_finite()) => {
                Err(Error::config("baseline_hazard.rate", "must be positive"))
            }
            BaselineHazard::PiecewiseConstant { breaks, rates } => {
                if rates.len() != breaks.len() + 1 {
                    return Err(Error::config("baseline_hazard.rates", "need one more rate than breaks"));
                }
                if rates.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
                    return Err(Error::config("baseline_hazard.rates", "must be positive"));
                }
                if breaks.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::config("baseline_hazard.breaks", "must be strictly increasing"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VisitKind {
    /// Gaps between visits are Exponential(rate).
    Poisson { rate: f64 },
    /// Visit `k` at `k·spacing + Uniform(−jitter, jitter)`.
    JitteredRegular { spacing: f64, jitter: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitSchedule {
    pub kind: VisitKind,
    /// Per-covariate probability that a value is not recorded at a visit.
    #[serde(default)]
    pub missing_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    /// True treatment effect `Δ`.
    #[serde(default)]
    pub effect: f64,
    #[serde(default)]
    pub intercept: f64,
    /// Weights on `∫₀ᴸ X*_k(s) ds`.
    #[serde(default)]
    pub history_weights: Vec<f64>,
    /// Weights on `X*_k(L)`.
    #[serde(default)]
    pub current_weights: Vec<f64>,
    #[serde(default)]
    pub baseline_weights: Vec<f64>,
    #[serde(default)]
    pub noise_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    #[serde(rename = "horizon_L")]
    pub horizon: f64,
    #[serde(default = "default_unit")]
    pub time_unit: String,
    pub covariates: Vec<TrajectorySpec>,
    #[serde(default)]
    pub baseline: Vec<BaselineSpec>,
    pub beta: Vec<f64>,
    #[serde(default)]
    pub beta_baseline: Vec<f64>,
    pub baseline_hazard: BaselineHazard,
    pub visits: VisitSchedule,
    pub outcome: OutcomeModel,
    #[serde(default = "default_sim_cells")]
    pub sim_cells: usize,
    #[serde(default = "default_truth_cells")]
    pub truth_cells: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_unit() -> String {
    "months".into()
}

fn default_sim_cells() -> usize {
    4000
}

fn default_truth_cells() -> usize {
    200
}

fn weights_ok(w: &[f64], len: usize) -> bool {
    w.is_empty() || w.len() == len
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::config("n", "at least 2 subjects are required"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::config("horizon_L", "must be a positive real"));
        }
        let p = self.covariates.len();
        let p0 = self.baseline.len();
        if self.beta.len() != p {
            return Err(Error::config("beta", "one coefficient per time-varying covariate"));
        }
        if !weights_ok(&self.beta_baseline, p0) {
            return Err(Error::config("beta_baseline", "one coefficient per baseline covariate"));
        }
        for c in &self.covariates {
            if !weights_ok(&c.baseline_loading, p0) {
                return Err(Error::config("covariates.baseline_loading", "one loading per baseline covariate"));
            }
            if c.measurement_sd < 0.0 || c.intercept.sd < 0.0 || c.slope.sd < 0.0 || c.curvature.sd < 0.0 {
                return Err(Error::config("covariates", "standard deviations must be nonnegative"));
            }
        }
        for b in &self.baseline {
            match b.dist {
                BaselineDist::Bernoulli { p } if !(0.0..=1.0).contains(&p) => {
                    return Err(Error::config("baseline.p", "probability must lie in [0, 1]"))
                }
                BaselineDist::Normal { sd, .. } if sd < 0.0 => {
                    return Err(Error::config("baseline.sd", "must be nonnegative"))
                }
                _ => {}
            }
        }
        self.baseline_hazard.check()?;
        match self.visits.kind {
            VisitKind::Poisson { rate } if !(rate > 0.0) => {
                return Err(Error::config("visits.rate", "must be positive"))
            }
            VisitKind::JitteredRegular { spacing, jitter } if !(spacing > 0.0) || jitter < 0.0 => {
                return Err(Error::config("visits.spacing", "spacing must be positive, jitter nonnegative"))
            }
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.visits.missing_prob) {
            return Err(Error::config("visits.missing_prob", "probability must lie in [0, 1]"));
        }
        let o = &self.outcome;
        if !weights_ok(&o.history_weights, p) || !weights_ok(&o.current_weights, p) {
            return Err(Error::config("outcome", "one weight per time-varying covariate"));
        }
        if !weights_ok(&o.baseline_weights, p0) {
            return Err(Error::config("outcome.baseline_weights", "one weight per baseline covariate"));
        }
        if o.noise_sd < 0.0 {
            return Err(Error::config("outcome.noise_sd", "must be nonnegative"));
        }
        if self.sim_cells < MIN_SIM_CELLS {
            return Err(Error::config("sim_cells", format!("must be at least {MIN_SIM_CELLS}")));
        }
        if self.truth_cells < 2 {
            return Err(Error::config("truth_cells", "must be at least 2"));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        })
    }
}

#[derive(Debug, Clone, Copy)]
#[repr(u64)]
enum Stream {
    Covariates = 0,
    Treatment = 1,
    Visits = 2,
    Outcome = 3,
}

fn subject_rng(seed: u64, subject: usize, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((subject as u64) << 2) | stream as u64);
    rng
}

/// Seed of replicate `r` derived from a base seed (SplitMix64 finalizer).
pub fn replicate_seed(seed: u64, replicate: usize) -> u64 {
    let mut z = seed ^ (replicate as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Cumulative hazard tabulated by the trapezoid rule on a uniform grid.
#[derive(Debug, Clone)]
pub struct CumulativeHazard {
    step: f64,
    horizon: f64,
    values: Vec<f64>,
}

impl CumulativeHazard {
    pub fn from_fn(horizon: f64, cells: usize, hazard: impl Fn(f64) -> f64) -> Self {
        let step = horizon / cells as f64;
        let mut values = Vec::with_capacity(cells + 1);
        let mut acc = 0.0;
        let mut prev = hazard(0.0);
        values.push(0.0);
        for g in 1..=cells {
            let s = if g == cells { horizon } else { g as f64 * step };
            let h = hazard(s);
            acc += 0.5 * step * (prev + h);
            values.push(acc);
            prev = h;
        }
        CumulativeHazard { step, horizon, values }
    }

    pub fn total(&self) -> f64 {
        *self.values.last().expect("grid has points")
    }

    /// Time at which the cumulative hazard reaches `level`, or `None` when it
    /// is not reached by the horizon. Linear within a cell.
    pub fn invert(&self, level: f64) -> Option<f64> {
        if level >= self.total() {
            return None;
        }
        let g = self.values.partition_point(|&v| v <= level);
        let (lo, hi) = (self.values[g - 1], self.values[g]);
        let frac = if hi > lo { (level - lo) / (hi - lo) } else { 0.0 };
        let start = (g - 1) as f64 * self.step;
        Some((start + frac * self.step).min(self.horizon))
    }

    /// Inverse-transform draw: `T = H⁻¹(E)` with `E ~ Exp(1)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<f64> {
        let e: f64 = Exp1.sample(rng);
        self.invert(e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubjectTruth {
    pub id: String,
    pub baseline: Vec<f64>,
    /// `[intercept, slope, curvature]` per time-varying covariate.
    pub trajectories: Vec<[f64; 3]>,
    /// Latent treatment time; `None` when the cumulative hazard does not reach
    /// the drawn level by `L`.
    pub treatment_time: Option<f64>,
    /// `Y*_t` for any `t < L`.
    pub outcome_if_treated: f64,
    /// `Y*_{L+}`.
    pub outcome_if_untreated: f64,
}

impl SubjectTruth {
    pub fn covariate(&self, k: usize, s: f64) -> f64 {
        let [a, b, c] = self.trajectories[k];
        a + s * (b + s * c)
    }

    /// `Y*_t` on the potential-outcome family; `t ≥ L` means untreated.
    pub fn potential_outcome(&self, t: f64, horizon: f64) -> f64 {
        if t < horizon {
            self.outcome_if_treated
        } else {
            self.outcome_if_untreated
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimTruth {
    pub horizon: f64,
    pub subjects: Vec<SubjectTruth>,
    /// True linear-predictor paths `βᵀX*(s) + β_zᵀZ`.
    pub paths: Vec<PropensityPath>,
}

impl SimTruth {
    /// The analytic trajectories as a curve set (quadratic basis, no knots).
    pub fn true_curves(&self, registry: &Registry) -> Result<CurveSet> {
        let p = self.subjects.first().map_or(0, |s| s.trajectories.len());
        let basis = BasisSpec::new(2, vec![], self.horizon)?;
        CurveSet::from_coefficients(
            self.horizon,
            self.subjects.iter().map(|s| s.id.clone()).collect(),
            registry.subjects.iter().map(|s| s.restricted_time).collect(),
            vec![basis; p],
            self.subjects
                .iter()
                .map(|s| {
                    s.trajectories
                        .iter()
                        .map(|[a, b, c]| vec![*a, b * self.horizon, c * self.horizon * self.horizon])
                        .collect()
                })
                .collect(),
        )
    }

    pub fn write_csv(&self, covariate_names: &[String], path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut header = vec![
            "id".to_string(),
            "latent_treatment_time".into(),
            "outcome_if_treated".into(),
            "outcome_if_untreated".into(),
        ];
        for name in covariate_names {
            for part in ["intercept", "slope", "curvature"] {
                header.push(format!("{name}_{part}"));
            }
        }
        w.write_record(&header).map_err(err)?;
        for s in &self.subjects {
            let mut row = vec![
                s.id.clone(),
                s.treatment_time.map(|t| t.to_string()).unwrap_or_default(),
                s.outcome_if_treated.to_string(),
                s.outcome_if_untreated.to_string(),
            ];
            for t in &s.trajectories {
                row.extend(t.iter().map(|v| v.to_string()));
            }
            w.write_record(&row).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn dot(w: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

fn subject_id(i: usize) -> String {
    format!("S{:05}", i + 1)
}

struct Simulated {
    subject: Subject,
    visits: Vec<VisitRecord>,
    truth: SubjectTruth,
    path: PropensityPath,
}

fn simulate_subject(config: &SimConfig, i: usize, truth_grid: TimeGrid) -> Simulated {
    let horizon = config.horizon;
    let id = subject_id(i);

    let mut rng = subject_rng(config.seed, i, Stream::Covariates);
    let baseline: Vec<f64> = config
        .baseline
        .iter()
        .map(|b| match b.dist {
            BaselineDist::Normal { mean, sd } => Gaussian { mean, sd }.sample(&mut rng),
            BaselineDist::Bernoulli { p } => f64::from(u8::from(rng.random::<f64>() < p)),
        })
        .collect();
    let trajectories: Vec<[f64; 3]> = config
        .covariates
        .iter()
        .map(|c| {
            let a = c.intercept.sample(&mut rng) + dot(&c.baseline_loading, &baseline);
            [a, c.slope.sample(&mut rng), c.curvature.sample(&mut rng)]
        })
        .collect();
    let covariate = |k: usize, s: f64| {
        let [a, b, c] = trajectories[k];
        a + s * (b + s * c)
    };
    let baseline_eta = dot(&config.beta_baseline, &baseline);
    let eta = |s: f64| {
        (0..trajectories.len()).map(|k| config.beta[k] * covariate(k, s)).sum::<f64>() + baseline_eta
    };

    let cumulative = CumulativeHazard::from_fn(horizon, config.sim_cells, |s| {
        config.baseline_hazard.at(s) * eta(s).exp()
    });
    let mut rng = subject_rng(config.seed, i, Stream::Treatment);
    let treatment_time = cumulative.sample(&mut rng);

    let subject_record = Subject::new(id.clone(), treatment_time, None, baseline.clone(), horizon);
    let restricted = subject_record.restricted_time;

    let mut rng = subject_rng(config.seed, i, Stream::Visits);
    let mut times = vec![0.0];
    match config.visits.kind {
        VisitKind::Poisson { rate } => {
            let mut t = 0.0;
            loop {
                let gap: f64 = Exp1.sample(&mut rng);
                t += gap / rate;
                if t > restricted {
                    break;
                }
                times.push(t);
            }
        }
        VisitKind::JitteredRegular { spacing, jitter } => {
            let mut k = 1.0;
            while k * spacing - jitter <= restricted {
                let t = k * spacing + jitter * (2.0 * rng.random::<f64>() - 1.0);
                if t <= restricted && t > *times.last().expect("baseline visit") {
                    times.push(t);
                }
                k += 1.0;
            }
        }
    }
    let visits = times
        .iter()
        .map(|&t| VisitRecord {
            subject_id: id.clone(),
            time: t,
            values: config
                .covariates
                .iter()
                .enumerate()
                .map(|(k, c)| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    let value = covariate(k, t) + c.measurement_sd * noise;
                    let missing = config.visits.missing_prob > 0.0 && rng.random::<f64>() < config.visits.missing_prob;
                    (!missing).then_some(value)
                })
                .collect(),
        })
        .collect();

    let o = &config.outcome;
    let mut structural = o.intercept + dot(&o.baseline_weights, &baseline);
    for (k, [a, b, c]) in trajectories.iter().enumerate() {
        let integral = horizon * (a + horizon * (b / 2.0 + horizon * c / 3.0));
        structural += o.history_weights.get(k).copied().unwrap_or(0.0) * integral;
        structural += o.current_weights.get(k).copied().unwrap_or(0.0) * covariate(k, horizon);
    }
    let mut rng = subject_rng(config.seed, i, Stream::Outcome);
    let noise: f64 = StandardNormal.sample(&mut rng);
    let untreated = structural + o.noise_sd * noise;
    let treated = untreated + o.effect;
    let observed = if subject_record.treated_before_horizon { treated } else { untreated };
    let subject = Subject {
        outcome: Some(observed),
        ..subject_record
    };

    let path = PropensityPath::from_fn(id.clone(), truth_grid, eta);
    Simulated {
        subject,
        visits,
        truth: SubjectTruth {
            id,
            baseline,
            trajectories,
            treatment_time,
            outcome_if_treated: treated,
            outcome_if_untreated: untreated,
        },
        path,
    }
}

pub fn simulate_registry(config: &SimConfig) -> Result<(Registry, SimTruth)> {
    config.validate()?;
    let truth_grid = TimeGrid::new(config.horizon, config.truth_cells)?;
    let sims = par::map_range(config.n, |i| simulate_subject(config, i, truth_grid));
    let mut subjects = Vec::with_capacity(config.n);
    let mut visits = Vec::new();
    let mut truths = Vec::with_capacity(config.n);
    let mut paths = Vec::with_capacity(config.n);
    for s in sims {
        subjects.push(s.subject);
        visits.extend(s.visits);
        truths.push(s.truth);
        paths.push(s.path);
    }
    let registry = Registry {
        subjects,
        visits,
        horizon: config.horizon,
        time_unit: config.time_unit.clone(),
        covariate_names: config.covariates.iter().map(|c| c.name.clone()).collect(),
        baseline_names: config.baseline.iter().map(|b| b.name.clone()).collect(),
    };
    Ok((
        registry,
        SimTruth {
            horizon: config.horizon,
            subjects: truths,
            paths,
        },
    ))
}

/// Kolmogorov–Smirnov distance between a sample and a continuous CDF.
pub fn ks_distance(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(j, &x)| {
            let f = cdf(x);
            (f - j as f64 / n).abs().max(((j + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GofReport {
    /// Draws that fell before the horizon and entered the comparison.
    pub n: usize,
    pub ks_distance: Option<f64>,
    /// Reference probability of treatment before the horizon.
    pub reference_mass: f64,
}

/// Compares treatment-time draws with the distribution implied by a hazard
/// path through `f(t) = θ(t)·exp{−∫₀ᵗθ}`. The reference CDF is the running
/// trapezoid integral of that density, conditioned on treatment before `L`.
pub fn sampler_density_check(hazard: &PropensityPath, draws: &[f64]) -> Result<GofReport> {
    let grid = hazard.grid;
    let density: Vec<f64> = grid
        .points()
        .map(|s| density_factorization_check(hazard, s))
        .collect::<Result<_>>()?;
    let mut cdf = vec![0.0; density.len()];
    for g in 1..density.len() {
        cdf[g] = cdf[g - 1] + 0.5 * (grid.point(g) - grid.point(g - 1)) * (density[g - 1] + density[g]);
    }
    let mass = *cdf.last().expect("grid has points");
    let inside: Vec<f64> = draws.iter().copied().filter(|&t| t < grid.horizon()).collect();
    if inside.is_empty() || mass <= 0.0 {
        return Ok(GofReport {
            n: 0,
            ks_distance: None,
            reference_mass: mass,
        });
    }
    let reference = PropensityPath::new("cdf", grid, cdf, grid.horizon());
    let ks = ks_distance(&inside, |t| reference.value_at(t) / mass);
    Ok(GofReport {
        n: inside.len(),
        ks_distance: Some(ks),
        reference_mass: mass,
    })
}

/// A two-covariate scenario with strong time-dependent confounding: the
/// hazard rises with the current covariate values and the outcome depends on
/// each trajectory's integral over the whole horizon.
pub fn confounded_scenario(n: usize, effect: f64, seed: u64) -> SimConfig {
    SimConfig {
        n,
        horizon: 18.0,
        time_unit: default_unit(),
        covariates: vec![
            TrajectorySpec {
                name: "x1".into(),
                intercept: Gaussian { mean: 0.0, sd: 1.0 },
                slope: Gaussian { mean: 0.0, sd: 0.1 },
                curvature: Gaussian { mean: 0.0, sd: 0.005 },
                baseline_loading: vec![0.5],
                measurement_sd: 0.2,
            },
            TrajectorySpec {
                name: "x2".into(),
                intercept: Gaussian { mean: 0.0, sd: 1.0 },
                slope: Gaussian { mean: 0.0, sd: 0.1 },
                curvature: Gaussian { mean: 0.0, sd: 0.005 },
                baseline_loading: vec![0.0],
                measurement_sd: 0.2,
            },
        ],
        baseline: vec![BaselineSpec {
            name: "z".into(),
            dist: BaselineDist::Normal { mean: 0.0, sd: 1.0 },
        }],
        beta: vec![1.0, -0.5],
        beta_baseline: vec![0.5],
        baseline_hazard: BaselineHazard::Constant { rate: 0.005 },
        visits: VisitSchedule {
            kind: VisitKind::Poisson { rate: 0.5 },
            missing_prob: 0.1,
        },
        outcome: OutcomeModel {
            effect,
            intercept: 0.0,
            history_weights: vec![0.1, -0.05],
            current_weights: vec![],
            baseline_weights: vec![],
            noise_sd: 3.0,
        },
        sim_cells: default_sim_cells(),
        truth_cells: default_truth_cells(),
        seed,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub method: Method,
    pub n_treated: usize,
    pub n_pairs: usize,
    /// Median-difference estimate of the treatment effect.
    pub estimate: f64,
    /// `estimate − Δ`.
    pub bias: f64,
    pub p_value: f64,
    /// Balance-test p-value per covariate.
    pub balance: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    pub replicates: usize,
    pub mean_estimate: f64,
    pub mean_bias: f64,
    pub mean_abs_bias: f64,
    /// Share of replicates whose outcome test rejects at `alpha`.
    pub rejection_rate: f64,
    /// Per covariate, share of replicates whose balance test rejects.
    pub balance_rejection: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub alpha: f64,
    pub effect: f64,
    pub records: Vec<ReplicateRecord>,
    pub summary: Vec<MethodSummary>,
}

fn replicate_records(
    config: &SimConfig,
    r: usize,
    methods: &[Method],
    options: &AnalysisOptions,
) -> Result<Vec<ReplicateRecord>> {
    let cfg = SimConfig {
        seed: replicate_seed(config.seed, r),
        ..config.clone()
    };
    let (registry, _) = simulate_registry(&cfg)?;
    let (_, results) = analyze(&registry, methods, options)?;
    let n_treated = registry.treated().count();
    Ok(results
        .into_iter()
        .map(|res| ReplicateRecord {
            replicate: r,
            method: res.method,
            n_treated,
            n_pairs: res.matches.as_ref().map_or(0, |m| m.len()),
            estimate: res.outcome.median_difference,
            bias: res.outcome.median_difference - config.outcome.effect,
            p_value: res.outcome.p_value,
            balance: res.balance.into_iter().map(|b| (b.covariate, b.p_value)).collect(),
        })
        .collect())
}

fn summarize(records: &[ReplicateRecord], method: Method, alpha: f64) -> MethodSummary {
    let rows: Vec<&ReplicateRecord> = records.iter().filter(|r| r.method == method).collect();
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&ReplicateRecord) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
    let mut balance_rejection = BTreeMap::new();
    for r in &rows {
        for (name, &p) in &r.balance {
            *balance_rejection.entry(name.clone()).or_insert(0.0) += f64::from(u8::from(p < alpha)) / n;
        }
    }
    MethodSummary {
        method,
        replicates: rows.len(),
        mean_estimate: mean(&|r| r.estimate),
        mean_bias: mean(&|r| r.bias),
        mean_abs_bias: mean(&|r| r.bias.abs()),
        rejection_rate: mean(&|r| f64::from(u8::from(r.p_value < alpha))),
        balance_rejection,
    }
}

/// Runs every method on `replicates` independent registries drawn from
/// `config`. Replicate `r` uses the seed `replicate_seed(config.seed, r)`,
/// so the records do not depend on how replicates are scheduled.
pub fn method_comparison(
    config: &SimConfig,
    replicates: usize,
    methods: &[Method],
    options: &AnalysisOptions,
    alpha: f64,
) -> Result<Comparison> {
    config.validate()?;
    if replicates == 0 {
        return Err(Error::config("replicates", "at least one replicate is required"));
    }
    if methods.is_empty() {
        return Err(Error::config("methods", "at least one method is required"));
    }
    let per_replicate = par::try_map_range(replicates, |r| replicate_records(config, r, methods, options))?;
    let records: Vec<ReplicateRecord> = per_replicate.into_iter().flatten().collect();
    let summary = methods.iter().map(|&m| summarize(&records, m, alpha)).collect();
    Ok(Comparison {
        alpha,
        effect: config.outcome.effect,
        records,
        summary,
    })
}
