//! Command implementations behind the `propproc` binary. Every command reads
//! its inputs from files and writes self-describing CSV/JSON artifacts to an
//! output directory, so stages can be rerun and audited independently.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{analyze, AnalysisOptions, Method, MethodResult};
use crate::diagnostics::BalanceResult;
use crate::error::{Error, Result};
use crate::matcher::{match_report, write_matches_csv};
use crate::process::write_paths_csv;
use crate::registry::{load_registry, read_registry, save_ingest_config, save_registry, validate, IngestConfig, Registry, ValidationReport};
use crate::simgen::{confounded_scenario, method_comparison, simulate_registry, Comparison, SimConfig};

pub const DEFAULT_SIMULATED_SUBJECTS: usize = 400;

fn default_replicates() -> usize {
    1
}

fn default_alpha() -> f64 {
    0.05
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub subjects: Option<PathBuf>,
    #[serde(default)]
    pub visits: Option<PathBuf>,
    /// Ingest settings; when absent, `ingest.json` next to the subjects file
    /// is used.
    #[serde(default)]
    pub ingest: Option<IngestConfig>,
    #[serde(default)]
    pub analysis: AnalysisOptions,
    #[serde(default)]
    pub simulation: Option<SimConfig>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            subjects: None,
            visits: None,
            ingest: None,
            analysis: AnalysisOptions::default(),
            simulation: None,
            replicates: default_replicates(),
            alpha: default_alpha(),
            methods: default_methods(),
            out: None,
            seed: None,
        }
    }
}

/// Command-line overrides shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct GlobalArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub grid: Option<usize>,
}

impl PipelineConfig {
    /// Reads the config file, resolving relative paths against its directory.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: PipelineConfig = serde_json::from_str(&text).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.subjects, &mut config.visits, &mut config.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    /// Config file (if any) with command-line flags applied on top.
    pub fn resolve(args: &GlobalArgs) -> Result<Self> {
        let mut config = match &args.config {
            Some(path) => PipelineConfig::from_json_file(path)?,
            None => PipelineConfig::default(),
        };
        if args.seed.is_some() {
            config.seed = args.seed;
        }
        if args.out.is_some() {
            config.out = args.out.clone();
        }
        if let Some(g) = args.grid {
            config.analysis.grid_points = g;
        }
        config.check()?;
        Ok(config)
    }

    pub fn check(&self) -> Result<()> {
        if self.analysis.grid_points < 2 {
            return Err(Error::config("grid", "at least 2 grid cells are required"));
        }
        if self.replicates == 0 {
            return Err(Error::config("replicates", "at least one replicate is required"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config("alpha", "must lie in (0, 1)"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("methods", "at least one method is required"));
        }
        if let Some(q) = self.analysis.max_q {
            if !(q >= 0.0) {
                return Err(Error::config("analysis.max_q", "must be nonnegative"));
            }
        }
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    /// Simulation settings with the seed override applied; the built-in
    /// confounded scenario when none is configured.
    pub fn simulation(&self) -> SimConfig {
        let mut sim = self
            .simulation
            .clone()
            .unwrap_or_else(|| confounded_scenario(DEFAULT_SIMULATED_SUBJECTS, 0.0, 0));
        if let Some(seed) = self.seed {
            sim.seed = seed;
        }
        sim
    }

    fn registry_paths(&self) -> Option<(&Path, &Path)> {
        Some((self.subjects.as_deref()?, self.visits.as_deref()?))
    }

    fn ingest_for(&self, subjects: &Path) -> Result<IngestConfig> {
        if let Some(ingest) = &self.ingest {
            ingest.check()?;
            return Ok(ingest.clone());
        }
        let sidecar = subjects.parent().unwrap_or(Path::new("")).join("ingest.json");
        if sidecar.exists() {
            return IngestConfig::from_json_file(&sidecar);
        }
        Err(Error::config(
            "ingest",
            "no ingest settings in the config and no ingest.json beside the subjects file",
        ))
    }

    fn load(&self) -> Result<Registry> {
        let (subjects, visits) = self
            .registry_paths()
            .ok_or_else(|| Error::config("subjects", "registry files `subjects` and `visits` are required"))?;
        let ingest = self.ingest_for(subjects)?;
        load_registry(subjects, visits, &ingest).map_err(|e| e.in_stage("ingest"))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn strings<const N: usize>(items: [&str; N]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

pub fn cmd_simulate(config: &PipelineConfig) -> Result<PathBuf> {
    let sim = config.simulation();
    let (registry, truth) = simulate_registry(&sim).map_err(|e| e.in_stage("simulate"))?;
    let out = config.out_dir();
    create_dir(&out)?;
    save_registry(&registry, &out.join("subjects.csv"), &out.join("visits.csv"))?;
    let ingest = IngestConfig {
        time_unit: registry.time_unit.clone(),
        ..IngestConfig::new(registry.horizon)
    };
    save_ingest_config(&ingest, &out.join("ingest.json"))?;
    truth.write_csv(&registry.covariate_names, &out.join("truth.csv"))?;
    write_json(&sim, &out.join("simulation.json"))?;
    Ok(out)
}

fn balance_rows(balance: &[BalanceResult]) -> Vec<Vec<String>> {
    balance
        .iter()
        .map(|b| {
            vec![
                b.covariate.clone(),
                b.method.clone(),
                b.statistic.to_string(),
                b.p_value.to_string(),
                b.strata.to_string(),
            ]
        })
        .collect()
}

fn outcome_row(label: &str, r: &MethodResult) -> Vec<String> {
    let o = &r.outcome;
    vec![
        label.to_string(),
        o.method.clone(),
        o.median_difference.to_string(),
        o.p_value.to_string(),
        o.statistic.to_string(),
        o.n_treated.to_string(),
        o.n_control.to_string(),
        o.exact.to_string(),
    ]
}

fn outcome_header() -> Vec<String> {
    strings(["method", "test", "median_difference", "p_value", "statistic", "n_treated", "n_control", "exact"])
}

#[derive(Serialize)]
struct OutcomeReport<'a> {
    method: &'static str,
    #[serde(flatten)]
    outcome: &'a crate::diagnostics::OutcomeResult,
    pairs_without_outcome: usize,
}

pub fn cmd_analyze(config: &PipelineConfig, method: Method) -> Result<PathBuf> {
    let registry = config.load()?;
    let (smoothed, results) = analyze(&registry, &[method], &config.analysis)?;
    let result = &results[0];
    let out = config.out_dir();
    create_dir(&out)?;
    write_json(&smoothed.models, &out.join("spline_models.json"))?;
    if let Some(cox) = &result.cox {
        write_json(cox, &out.join("cox_model.json"))?;
    }
    if !result.paths.is_empty() {
        write_paths_csv(&result.paths, &out.join("paths.csv"))?;
    }
    if let Some(set) = &result.matches {
        write_matches_csv(set, &out.join("matches.csv"))?;
        write_json(&match_report(set), &out.join("matches.json"))?;
    }
    write_csv(
        &out.join("balance.csv"),
        &strings(["covariate", "method", "statistic", "p_value", "strata"]),
        &balance_rows(&result.balance),
    )?;
    write_json(&result.balance, &out.join("balance.json"))?;
    write_csv(&out.join("outcome.csv"), &outcome_header(), &[outcome_row(method.label(), result)])?;
    write_json(
        &OutcomeReport {
            method: method.label(),
            outcome: &result.outcome,
            pairs_without_outcome: result.pairs_without_outcome,
        },
        &out.join("outcome.json"),
    )?;
    Ok(out)
}

fn method_header(first: &str, methods: &[Method]) -> Vec<String> {
    std::iter::once(first.to_string())
        .chain(methods.iter().map(|m| m.label().to_string()))
        .collect()
}

/// Rows = covariates, columns = methods.
fn write_balance_table(
    path: &Path,
    covariates: &[String],
    methods: &[Method],
    value: impl Fn(&str, Method) -> Option<f64>,
) -> Result<()> {
    let rows: Vec<Vec<String>> = covariates
        .iter()
        .map(|c| {
            std::iter::once(c.clone())
                .chain(methods.iter().map(|&m| value(c, m).map(|v| v.to_string()).unwrap_or_default()))
                .collect()
        })
        .collect();
    write_csv(path, &method_header("covariate", methods), &rows)
}

fn single_dataset_tables(registry: &Registry, config: &PipelineConfig, out: &Path) -> Result<()> {
    let (_, results) = analyze(registry, &config.methods, &config.analysis)?;
    let covariates: Vec<String> = registry
        .covariate_names
        .iter()
        .chain(&registry.baseline_names)
        .cloned()
        .collect();
    let p_value = |c: &str, m: Method| {
        results
            .iter()
            .find(|r| r.method == m)
            .and_then(|r| r.balance.iter().find(|b| b.covariate == c))
            .map(|b| b.p_value)
    };
    write_balance_table(&out.join("balance_table.csv"), &covariates, &config.methods, p_value)?;
    let rows: Vec<Vec<String>> = results.iter().map(|r| outcome_row(r.method.label(), r)).collect();
    write_csv(&out.join("outcome_table.csv"), &outcome_header(), &rows)
}

fn comparison_tables(cmp: &Comparison, covariates: &[String], methods: &[Method], out: &Path) -> Result<()> {
    let summary = |m: Method| cmp.summary.iter().find(|s| s.method == m);
    write_balance_table(&out.join("balance_table.csv"), covariates, methods, |c, m| {
        summary(m).and_then(|s| s.balance_rejection.get(c).copied())
    })?;
    let rows: Vec<Vec<String>> = cmp
        .summary
        .iter()
        .map(|s| {
            let pairs: Vec<f64> = cmp
                .records
                .iter()
                .filter(|r| r.method == s.method)
                .map(|r| r.n_pairs as f64)
                .collect();
            vec![
                s.method.label().to_string(),
                s.replicates.to_string(),
                s.mean_estimate.to_string(),
                s.mean_bias.to_string(),
                s.mean_abs_bias.to_string(),
                s.rejection_rate.to_string(),
                (pairs.iter().sum::<f64>() / pairs.len() as f64).to_string(),
            ]
        })
        .collect();
    write_csv(
        &out.join("outcome_table.csv"),
        &strings(["method", "replicates", "mean_estimate", "mean_bias", "mean_abs_bias", "rejection_rate", "mean_pairs"]),
        &rows,
    )?;

    let mut long = Vec::with_capacity(cmp.records.len());
    for r in &cmp.records {
        let mut row = vec![
            r.replicate.to_string(),
            r.method.label().to_string(),
            r.n_treated.to_string(),
            r.n_pairs.to_string(),
            r.estimate.to_string(),
            r.bias.to_string(),
            r.p_value.to_string(),
        ];
        row.extend(covariates.iter().map(|c| r.balance.get(c).map(|p| p.to_string()).unwrap_or_default()));
        long.push(row);
    }
    let mut header = strings(["replicate", "method", "n_treated", "n_pairs", "estimate", "bias", "p_value"]);
    header.extend(covariates.iter().map(|c| format!("balance_p_{c}")));
    write_csv(&out.join("replicates.csv"), &header, &long)?;
    write_json(cmp, &out.join("comparison.json"))?;

    let mut by_replicate: BTreeMap<usize, Vec<_>> = BTreeMap::new();
    for r in &cmp.records {
        by_replicate.entry(r.replicate).or_default().push(r);
    }
    for (rep, records) in by_replicate {
        let dir = out.join("replicates").join(format!("r{:04}", rep + 1));
        create_dir(&dir)?;
        let find = |m: Method| records.iter().find(|r| r.method == m);
        write_balance_table(&dir.join("balance_table.csv"), covariates, methods, |c, m| {
            find(m).and_then(|r| r.balance.get(c).copied())
        })?;
        let rows: Vec<Vec<String>> = records
            .iter()
            .map(|r| {
                vec![
                    r.method.label().to_string(),
                    r.estimate.to_string(),
                    r.p_value.to_string(),
                    r.n_pairs.to_string(),
                ]
            })
            .collect();
        write_csv(
            &dir.join("outcome_table.csv"),
            &strings(["method", "median_difference", "p_value", "n_pairs"]),
            &rows,
        )?;
    }
    Ok(())
}

/// Single-dataset mode when registry files are configured, otherwise a
/// Monte Carlo comparison over `replicates` simulated registries.
pub fn cmd_compare(config: &PipelineConfig) -> Result<PathBuf> {
    let out = config.out_dir();
    if config.registry_paths().is_some() {
        let registry = config.load()?;
        create_dir(&out)?;
        single_dataset_tables(&registry, config, &out)?;
        return Ok(out);
    }
    let sim = config.simulation();
    let covariates: Vec<String> = sim
        .covariates
        .iter()
        .map(|c| c.name.clone())
        .chain(sim.baseline.iter().map(|b| b.name.clone()))
        .collect();
    let cmp = method_comparison(&sim, config.replicates, &config.methods, &config.analysis, config.alpha)?;
    create_dir(&out)?;
    comparison_tables(&cmp, &covariates, &config.methods, &out)?;
    write_json(&sim, &out.join("simulation.json"))?;
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct ValidationSummary {
    pub subjects: usize,
    pub visits: usize,
    pub report: ValidationReport,
}

/// Lenient read plus invariant check. Violations are reported, and turned
/// into a data error only by the caller.
pub fn cmd_validate(config: &PipelineConfig) -> Result<ValidationSummary> {
    let (subjects, visits) = config
        .registry_paths()
        .ok_or_else(|| Error::config("subjects", "registry files `subjects` and `visits` are required"))?;
    let ingest = config.ingest_for(subjects)?;
    let registry = read_registry(subjects, visits, &ingest).map_err(|e| e.in_stage("ingest"))?;
    let summary = ValidationSummary {
        subjects: registry.n_subjects(),
        visits: registry.visits.len(),
        report: validate(&registry),
    };
    if let Some(out) = &config.out {
        create_dir(out)?;
        write_json(&summary, &out.join("validation.json"))?;
    }
    Ok(summary)
}
