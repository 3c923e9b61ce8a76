//! Observational registry: subjects with a (possibly absent) treatment time,
//! an outcome and baseline covariates, plus visit-level time-varying
//! covariate records.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    /// Latent treatment time `T`; `None` when never treated during follow-up.
    pub treatment_time: Option<f64>,
    /// `U = min(T, L)`.
    pub restricted_time: f64,
    pub treated_before_horizon: bool,
    pub outcome: Option<f64>,
    pub baseline: Vec<f64>,
}

impl Subject {
    /// Builds a subject with `U` and the treatment indicator derived from the
    /// horizon. A treatment time equal to `L` counts as untreated in study.
    pub fn new(
        id: impl Into<String>,
        treatment_time: Option<f64>,
        outcome: Option<f64>,
        baseline: Vec<f64>,
        horizon: f64,
    ) -> Self {
        let treated = matches!(treatment_time, Some(t) if t < horizon);
        let restricted_time = match treatment_time {
            Some(t) => t.min(horizon),
            None => horizon,
        };
        Subject {
            id: id.into(),
            treatment_time,
            restricted_time,
            treated_before_horizon: treated,
            outcome,
            baseline,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisitRecord {
    pub subject_id: String,
    pub time: f64,
    /// One entry per time-varying covariate; `None` when not measured.
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IngestConfig {
    #[serde(rename = "horizon_L")]
    pub horizon: f64,
    #[serde(default = "default_time_unit")]
    pub time_unit: String,
    #[serde(rename = "truncate_at_U", default)]
    pub truncate_at_u: bool,
}

fn default_time_unit() -> String {
    "months".to_string()
}

impl IngestConfig {
    pub fn new(horizon: f64) -> Self {
        IngestConfig {
            horizon,
            time_unit: default_time_unit(),
            truncate_at_u: false,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: IngestConfig = serde_json::from_str(&text).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        })?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::config("horizon_L", "must be a positive real"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Registry {
    pub subjects: Vec<Subject>,
    pub visits: Vec<VisitRecord>,
    pub horizon: f64,
    pub time_unit: String,
    pub covariate_names: Vec<String>,
    pub baseline_names: Vec<String>,
}

impl Registry {
    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn n_baseline(&self) -> usize {
        self.baseline_names.len()
    }

    pub fn subject_index(&self) -> HashMap<&str, usize> {
        self.subjects
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect()
    }

    /// Visit indices grouped by subject position, in file order. Visits that
    /// reference unknown subjects are skipped.
    pub fn visits_by_subject(&self) -> Vec<Vec<usize>> {
        let index = self.subject_index();
        let mut out = vec![Vec::new(); self.subjects.len()];
        for (v, visit) in self.visits.iter().enumerate() {
            if let Some(&i) = index.get(visit.subject_id.as_str()) {
                out[i].push(v);
            }
        }
        out
    }

    pub fn visit_counts(&self) -> Vec<usize> {
        self.visits_by_subject().iter().map(Vec::len).collect()
    }

    pub fn treated(&self) -> impl Iterator<Item = (usize, &Subject)> {
        self.subjects
            .iter()
            .enumerate()
            .filter(|(_, s)| s.treated_before_horizon)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Violation {
    UnknownSubject,
    DuplicateSubject,
    NonMonotoneVisits,
    PostTreatmentVisit,
    NegativeTime,
    NoVisits,
    RestrictedTimeMismatch,
    DimensionMismatch,
}

/// Per-invariant violation counts. Empty exactly when every registry
/// invariant holds.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: BTreeMap<Violation, usize>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, kind: Violation) -> usize {
        self.violations.get(&kind).copied().unwrap_or(0)
    }

    fn record(&mut self, kind: Violation) {
        *self.violations.entry(kind).or_insert(0) += 1;
    }
}

pub fn validate(registry: &Registry) -> ValidationReport {
    let mut report = ValidationReport::default();
    let horizon = registry.horizon;
    let p0 = registry.n_baseline();
    let p = registry.n_covariates();

    let mut seen = HashMap::new();
    for s in &registry.subjects {
        if seen.insert(s.id.as_str(), ()).is_some() {
            report.record(Violation::DuplicateSubject);
        }
        let expected_u = s.treatment_time.map_or(horizon, |t| t.min(horizon));
        let expected_treated = matches!(s.treatment_time, Some(t) if t < horizon);
        let negative = matches!(s.treatment_time, Some(t) if t < 0.0);
        if negative
            || s.restricted_time != expected_u
            || s.treated_before_horizon != expected_treated
        {
            report.record(Violation::RestrictedTimeMismatch);
        }
        if s.baseline.len() != p0 {
            report.record(Violation::DimensionMismatch);
        }
    }

    let index = registry.subject_index();
    let mut last_time: Vec<Option<f64>> = vec![None; registry.subjects.len()];
    for v in &registry.visits {
        if v.values.len() != p {
            report.record(Violation::DimensionMismatch);
        }
        if v.time < 0.0 {
            report.record(Violation::NegativeTime);
        }
        let Some(&i) = index.get(v.subject_id.as_str()) else {
            report.record(Violation::UnknownSubject);
            continue;
        };
        if v.time > registry.subjects[i].restricted_time {
            report.record(Violation::PostTreatmentVisit);
        }
        if let Some(prev) = last_time[i] {
            if v.time <= prev {
                report.record(Violation::NonMonotoneVisits);
            }
        }
        last_time[i] = Some(v.time);
    }
    for seen in &last_time {
        if seen.is_none() {
            report.record(Violation::NoVisits);
        }
    }
    report
}

fn parse_optional(file: &str, line: usize, field: &str) -> Result<Option<f64>> {
    let field = field.trim();
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .map(Some)
        .ok_or_else(|| Error::BadNumber {
            file: file.to_string(),
            line,
            value: field.to_string(),
        })
}

fn parse_required(file: &str, line: usize, field: &str, column: &str) -> Result<f64> {
    parse_optional(file, line, field)?.ok_or_else(|| Error::MalformedRow {
        file: file.to_string(),
        line,
        message: format!("empty value in required column `{column}`"),
    })
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn headers(reader: &mut csv::Reader<File>, path: &Path) -> Result<Vec<String>> {
    Ok(reader
        .headers()
        .map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?
        .iter()
        .map(str::to_string)
        .collect())
}

fn expect_prefix(file: &str, header: &[String], columns: &[&str]) -> Result<()> {
    for (pos, col) in columns.iter().enumerate() {
        if header.get(pos).map(String::as_str) != Some(*col) {
            return Err(Error::MissingColumn {
                file: file.to_string(),
                column: col.to_string(),
            });
        }
    }
    Ok(())
}

/// Parses both registry files without checking cross-record invariants. Use
/// [`validate`] on the result, or [`load_registry`] for strict loading.
pub fn read_registry(subjects_path: &Path, visits_path: &Path, config: &IngestConfig) -> Result<Registry> {
    config.check()?;
    let horizon = config.horizon;
    let sfile = subjects_path.display().to_string();
    let mut reader = open_csv(subjects_path)?;
    let header = headers(&mut reader, subjects_path)?;
    expect_prefix(&sfile, &header, &["id", "treatment_time", "outcome"])?;
    let baseline_names = header[3..].to_vec();

    let mut subjects = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|source| Error::Csv {
            path: subjects_path.to_path_buf(),
            source,
        })?;
        if record.len() != header.len() {
            return Err(Error::MalformedRow {
                file: sfile.clone(),
                line,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(Error::MalformedRow {
                file: sfile.clone(),
                line,
                message: "empty subject id".into(),
            });
        }
        let treatment_time = parse_optional(&sfile, line, &record[1])?;
        if matches!(treatment_time, Some(t) if t < 0.0) {
            return Err(Error::MalformedRow {
                file: sfile.clone(),
                line,
                message: "negative treatment time".into(),
            });
        }
        let outcome = parse_optional(&sfile, line, &record[2])?;
        let baseline = (3..header.len())
            .map(|c| parse_required(&sfile, line, &record[c], &header[c]))
            .collect::<Result<Vec<_>>>()?;
        subjects.push(Subject::new(id, treatment_time, outcome, baseline, horizon));
    }

    let vfile = visits_path.display().to_string();
    let mut reader = open_csv(visits_path)?;
    let header = headers(&mut reader, visits_path)?;
    expect_prefix(&vfile, &header, &["id", "time"])?;
    let covariate_names = header[2..].to_vec();

    let mut visits = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|source| Error::Csv {
            path: visits_path.to_path_buf(),
            source,
        })?;
        if record.len() != header.len() {
            return Err(Error::MalformedRow {
                file: vfile.clone(),
                line,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let time = parse_required(&vfile, line, &record[1], "time")?;
        let values = (2..header.len())
            .map(|c| parse_optional(&vfile, line, &record[c]))
            .collect::<Result<Vec<_>>>()?;
        visits.push(VisitRecord {
            subject_id: record[0].to_string(),
            time,
            values,
        });
    }

    Ok(Registry {
        subjects,
        visits,
        horizon,
        time_unit: config.time_unit.clone(),
        covariate_names,
        baseline_names,
    })
}

/// Loads and checks a registry. Post-treatment visits are rejected unless
/// `truncate_at_U` is set, in which case they are dropped.
pub fn load_registry(subjects_path: &Path, visits_path: &Path, config: &IngestConfig) -> Result<Registry> {
    let mut registry = read_registry(subjects_path, visits_path, config)?;
    check_strict(&mut registry, config.truncate_at_u)?;
    Ok(registry)
}

fn check_strict(registry: &mut Registry, truncate: bool) -> Result<()> {
    let index: HashMap<String, usize> = registry
        .subjects
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.clone(), i))
        .collect();
    if index.len() != registry.subjects.len() {
        let mut seen = HashMap::new();
        for s in &registry.subjects {
            if seen.insert(s.id.as_str(), ()).is_some() {
                return Err(Error::DuplicateSubject(s.id.clone()));
            }
        }
    }

    let mut kept = Vec::with_capacity(registry.visits.len());
    let mut last: Vec<Option<f64>> = vec![None; registry.subjects.len()];
    for v in registry.visits.drain(..) {
        let &i = index
            .get(&v.subject_id)
            .ok_or_else(|| Error::UnknownSubject(v.subject_id.clone()))?;
        let subject = &registry.subjects[i];
        if v.time < 0.0 {
            return Err(Error::OutOfDomain {
                t: v.time,
                upper: registry.horizon,
            });
        }
        if v.time > subject.restricted_time {
            if truncate {
                continue;
            }
            return Err(Error::PostTreatmentVisit {
                id: v.subject_id,
                time: v.time,
                restricted: subject.restricted_time,
            });
        }
        if let Some(prev) = last[i] {
            if v.time <= prev {
                return Err(Error::NonMonotoneVisits {
                    id: v.subject_id,
                    time: v.time,
                });
            }
        }
        last[i] = Some(v.time);
        kept.push(v);
    }
    registry.visits = kept;
    if let Some(i) = last.iter().position(Option::is_none) {
        return Err(Error::NoVisits(registry.subjects[i].id.clone()));
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes the two registry files. Numbers use the shortest representation
/// that parses back to the same `f64`, so loading the output reproduces the
/// registry exactly.
pub fn save_registry(registry: &Registry, subjects_path: &Path, visits_path: &Path) -> Result<()> {
    let mut w = csv_writer(subjects_path)?;
    let mut header = vec!["id".to_string(), "treatment_time".into(), "outcome".into()];
    header.extend(registry.baseline_names.iter().cloned());
    w.write_record(&header).map_err(csv_err(subjects_path))?;
    for s in &registry.subjects {
        let mut row = vec![s.id.clone(), fmt_opt(s.treatment_time), fmt_opt(s.outcome)];
        row.extend(s.baseline.iter().map(|x| x.to_string()));
        w.write_record(&row).map_err(csv_err(subjects_path))?;
    }
    w.flush().map_err(|e| Error::io(subjects_path, e))?;

    let mut w = csv_writer(visits_path)?;
    let mut header = vec!["id".to_string(), "time".into()];
    header.extend(registry.covariate_names.iter().cloned());
    w.write_record(&header).map_err(csv_err(visits_path))?;
    for v in &registry.visits {
        let mut row = vec![v.subject_id.clone(), v.time.to_string()];
        row.extend(v.values.iter().map(|x| fmt_opt(*x)));
        w.write_record(&row).map_err(csv_err(visits_path))?;
    }
    w.flush().map_err(|e| Error::io(visits_path, e))?;
    Ok(())
}

pub fn save_ingest_config(config: &IngestConfig, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(config).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })?;
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{text}").map_err(|e| Error::io(path, e))
}
