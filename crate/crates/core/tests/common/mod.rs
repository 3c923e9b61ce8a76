#![allow(dead_code)]

use propproc::registry::{Registry, Subject, VisitRecord};
use propproc::splinefit::{BasisSpec, CurveSet};

/// Registry with one baseline visit per subject. `times[i] = None` means
/// never treated; `baseline[i]` holds the baseline covariates.
pub fn small_registry(horizon: f64, times: &[Option<f64>], baseline: &[Vec<f64>], n_tv: usize) -> Registry {
    let subjects: Vec<Subject> = times
        .iter()
        .zip(baseline)
        .enumerate()
        .map(|(i, (t, z))| Subject::new(format!("s{i:02}"), *t, Some(0.0), z.clone(), horizon))
        .collect();
    let visits = subjects
        .iter()
        .map(|s| VisitRecord {
            subject_id: s.id.clone(),
            time: 0.0,
            values: vec![Some(0.0); n_tv],
        })
        .collect();
    Registry {
        subjects,
        visits,
        horizon,
        time_unit: "months".into(),
        covariate_names: (0..n_tv).map(|k| format!("x{}", k + 1)).collect(),
        baseline_names: (0..baseline.first().map_or(0, Vec::len)).map(|j| format!("z{}", j + 1)).collect(),
    }
}

/// Straight-line curves `x_ik(t) = lines[i][k].0 + lines[i][k].1·t`.
pub fn line_curves(registry: &Registry, lines: &[Vec<(f64, f64)>]) -> CurveSet {
    let horizon = registry.horizon;
    let p = lines.first().map_or(0, Vec::len);
    let basis = BasisSpec::new(1, vec![], horizon).unwrap();
    CurveSet::from_coefficients(
        horizon,
        registry.subjects.iter().map(|s| s.id.clone()).collect(),
        registry.subjects.iter().map(|s| s.restricted_time).collect(),
        vec![basis; p],
        lines
            .iter()
            .map(|per| per.iter().map(|&(a, b)| vec![a, b * horizon]).collect())
            .collect(),
    )
    .unwrap()
}

/// Breslow log partial likelihood by direct summation over distinct event
/// times, for line curves followed by baseline covariates.
pub fn breslow_direct(registry: &Registry, lines: &[Vec<(f64, f64)>], beta: &[f64]) -> f64 {
    let eta = |i: usize, t: f64| {
        let mut x: Vec<f64> = lines[i].iter().map(|&(a, b)| a + b * t).collect();
        x.extend(&registry.subjects[i].baseline);
        x.iter().zip(beta).map(|(x, b)| x * b).sum::<f64>()
    };
    let mut times: Vec<f64> = registry
        .subjects
        .iter()
        .filter(|s| s.treated_before_horizon)
        .map(|s| s.restricted_time)
        .collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let mut ll = 0.0;
    for t in times {
        let mut d = 0.0;
        let mut denom = 0.0;
        for (i, s) in registry.subjects.iter().enumerate() {
            if s.restricted_time >= t {
                denom += eta(i, t).exp();
            }
            if s.treated_before_horizon && s.restricted_time == t {
                ll += eta(i, t);
                d += 1.0;
            }
        }
        ll -= d * denom.ln();
    }
    ll
}

/// All subsets of `0..n` as bit masks.
pub fn masks(n: usize) -> impl Iterator<Item = u32> {
    0..(1u32 << n)
}

/// Two-sided exact p-value from the full null distribution of a statistic
/// given as integer-valued (doubled) outcomes.
pub fn two_sided(null: &[i64], observed: i64) -> f64 {
    let total = null.len() as f64;
    let lower = null.iter().filter(|&&v| v <= observed).count() as f64;
    let upper = null.iter().filter(|&&v| v >= observed).count() as f64;
    (2.0 * lower.min(upper) / total).min(1.0)
}

/// Doubled average ranks computed by counting, independent of sorting.
pub fn doubled_ranks(values: &[f64]) -> Vec<i64> {
    values
        .iter()
        .map(|&v| {
            let below = values.iter().filter(|&&w| w < v).count() as i64;
            let equal = values.iter().filter(|&&w| w == v).count() as i64;
            2 * below + equal + 1
        })
        .collect()
}

/// Signed-rank p-value by enumerating every sign pattern of the nonzero
/// differences.
pub fn signed_rank_oracle(diffs: &[f64]) -> f64 {
    let nz: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    if nz.is_empty() {
        return 1.0;
    }
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let r = doubled_ranks(&abs);
    let observed: i64 = nz.iter().zip(&r).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let null: Vec<i64> = masks(nz.len())
        .map(|m| (0..nz.len()).filter(|j| m >> j & 1 == 1).map(|j| r[j]).sum())
        .collect();
    two_sided(&null, observed)
}

/// Rank-sum p-value by enumerating every assignment of `a.len()` pooled
/// observations to the first group.
pub fn rank_sum_oracle(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let r = doubled_ranks(&pooled);
    let observed: i64 = r[..a.len()].iter().sum();
    let null: Vec<i64> = masks(pooled.len())
        .filter(|m| m.count_ones() as usize == a.len())
        .map(|m| (0..pooled.len()).filter(|j| m >> j & 1 == 1).map(|j| r[j]).sum())
        .collect();
    two_sided(&null, observed)
}

pub fn bin_path() -> &'static str {
    env!("CARGO_BIN_EXE_propproc")
}
