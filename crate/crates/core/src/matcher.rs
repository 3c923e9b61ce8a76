//! Sequential greedy 1:1 matching without replacement.
//!
//! Treated subjects are visited in order of treatment time. Each is paired
//! with the not-yet-used subject, still untreated at that time, whose path is
//! closest over `[0, T]`. Subjects consumed as controls are skipped when
//! their own turn as treated would come.

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::process::{squared_distance, PropensityPath};
use crate::registry::Registry;

/// Distance between a treated subject and a candidate control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchCriterion {
    /// `∫₀^T (θ̂_i − θ̂_l)² dt` over the whole path.
    #[default]
    IntegratedPath,
    /// `(θ̂_i(T) − θ̂_l(T))²`, the scalar score at the treatment time only.
    PointAtMatchTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchOptions {
    pub criterion: MatchCriterion,
    /// Caliper: a best match with `Q` above this leaves the treated subject
    /// unmatched.
    pub max_q: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    /// 1-based pair counter `m`.
    pub m: usize,
    pub treated_id: String,
    pub control_id: String,
    pub match_time: f64,
    #[serde(rename = "Q")]
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchSet {
    pub pairs: Vec<MatchedPair>,
    pub unmatched_treated: Vec<String>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn check_inputs(paths: &[PropensityPath], registry: &Registry) -> Result<()> {
    if registry.subjects.is_empty() {
        return Err(Error::EmptyRegistry);
    }
    if paths.len() != registry.n_subjects() {
        return Err(Error::EvaluationFailure(format!(
            "{} paths for {} subjects",
            paths.len(),
            registry.n_subjects()
        )));
    }
    for (p, s) in paths.iter().zip(&registry.subjects) {
        if p.subject_id != s.id {
            return Err(Error::EvaluationFailure(format!(
                "path for `{}` found where `{}` was expected",
                p.subject_id, s.id
            )));
        }
        if p.grid != paths[0].grid {
            return Err(Error::GridMismatch);
        }
    }
    Ok(())
}

pub(crate) fn distance(criterion: MatchCriterion, a: &PropensityPath, b: &PropensityPath, t: f64) -> f64 {
    match criterion {
        MatchCriterion::IntegratedPath => squared_distance(a, b, t),
        MatchCriterion::PointAtMatchTime => {
            let d = a.value_at(t) - b.value_at(t);
            d * d
        }
    }
}

/// Treated subjects in processing order: increasing treatment time, then id.
pub fn treatment_order(registry: &Registry) -> Vec<usize> {
    let mut order: Vec<usize> = registry.treated().map(|(i, _)| i).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (&registry.subjects[a], &registry.subjects[b]);
        sa.restricted_time
            .total_cmp(&sb.restricted_time)
            .then_with(|| sa.id.cmp(&sb.id))
    });
    order
}

pub fn sequential_match(paths: &[PropensityPath], registry: &Registry, options: &MatchOptions) -> Result<MatchSet> {
    check_inputs(paths, registry)?;
    let n = registry.n_subjects();
    let mut used = vec![false; n];
    let mut set = MatchSet::default();

    for i in treatment_order(registry) {
        if used[i] {
            continue;
        }
        let t = registry.subjects[i].restricted_time;
        let eligible: Vec<usize> = (0..n)
            .filter(|&l| l != i && !used[l] && registry.subjects[l].restricted_time > t)
            .collect();
        let best = par::argmin_by(
            &eligible,
            |&l| distance(options.criterion, &paths[i], &paths[l], t),
            |(a, qa), (b, qb)| {
                qa.total_cmp(qb)
                    .then_with(|| registry.subjects[eligible[*a]].id.cmp(&registry.subjects[eligible[*b]].id))
            },
        );
        match best {
            Some((pos, q)) if options.max_q.is_none_or(|cap| q <= cap) => {
                let l = eligible[pos];
                used[i] = true;
                used[l] = true;
                set.pairs.push(MatchedPair {
                    m: set.pairs.len() + 1,
                    treated_id: registry.subjects[i].id.clone(),
                    control_id: registry.subjects[l].id.clone(),
                    match_time: t,
                    distance: q,
                });
            }
            _ => set.unmatched_treated.push(registry.subjects[i].id.clone()),
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceSummary {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchReport {
    #[serde(rename = "M")]
    pub pairs: usize,
    pub unmatched: usize,
    pub distance: Option<DistanceSummary>,
    pub table: Vec<MatchedPair>,
}

/// Linear-interpolation quantile of sorted data (`0 ≤ p ≤ 1`).
pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn match_report(set: &MatchSet) -> MatchReport {
    let mut q: Vec<f64> = set.pairs.iter().map(|p| p.distance).collect();
    q.sort_by(f64::total_cmp);
    let distance = (!q.is_empty()).then(|| DistanceSummary {
        min: q[0],
        q25: quantile_sorted(&q, 0.25),
        median: quantile_sorted(&q, 0.5),
        q75: quantile_sorted(&q, 0.75),
        max: q[q.len() - 1],
        mean: q.iter().sum::<f64>() / q.len() as f64,
    });
    MatchReport {
        pairs: set.pairs.len(),
        unmatched: set.unmatched_treated.len(),
        distance,
        table: set.pairs.clone(),
    }
}

pub fn write_matches_csv(set: &MatchSet, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    w.write_record(["m", "treated_id", "control_id", "match_time", "Q"])
        .map_err(err)?;
    for p in &set.pairs {
        w.write_record([
            p.m.to_string(),
            p.treated_id.clone(),
            p.control_id.clone(),
            p.match_time.to_string(),
            p.distance.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
