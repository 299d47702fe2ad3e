//! Safety report aggregation: KPI summary tables per class and per fault
//! variant, importance-weighted failure statistics, and the overall
//! pass/fail recommendation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::to_canonical_json_pretty;
use crate::genscen::TestScenario;
use crate::simulate::{ControllerParams, KpiThresholds, SensorConfig, SimulationResult};

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("results and batch do not align: {0}")]
    IdMismatch(String),
}

/// Min / median / max of one KPI over a result group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpiSummary {
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

fn summarize(mut values: Vec<f64>) -> Option<KpiSummary> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite KPI values"));
    let n = values.len();
    let median = if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    };
    Some(KpiSummary {
        min: values[0],
        median,
        max: values[n - 1],
    })
}

/// Aggregated statistics of one group of results (a class, a fault variant,
/// or the whole batch).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub scenarios: usize,
    pub failures: usize,
    pub collisions: usize,
    /// Self-normalized importance-weighted failure probability estimate.
    pub weighted_failure_estimate: f64,
    /// Summary over runs with a finite TTC; absent when no run ever closed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_ttc: Option<KpiSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_distance: Option<KpiSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_decel: Option<KpiSummary>,
}

fn group_stats(entries: &[(&SimulationResult, f64)]) -> GroupStats {
    let failures = entries.iter().filter(|(r, _)| !r.kpis.pass).count();
    let collisions = entries.iter().filter(|(r, _)| r.kpis.collision).count();
    let w_total: f64 = entries.iter().map(|(_, w)| w).sum();
    let w_fail: f64 = entries
        .iter()
        .filter(|(r, _)| !r.kpis.pass)
        .map(|(_, w)| w)
        .sum();
    GroupStats {
        scenarios: entries.len(),
        failures,
        collisions,
        weighted_failure_estimate: if w_total > 0.0 { w_fail / w_total } else { 0.0 },
        min_ttc: summarize(
            entries
                .iter()
                .filter_map(|(r, _)| r.kpis.min_ttc)
                .collect(),
        ),
        min_distance: summarize(
            entries
                .iter()
                .map(|(r, _)| r.kpis.min_distance)
                .filter(|d| d.is_finite() && *d < f64::MAX)
                .collect(),
        ),
        max_decel: summarize(entries.iter().map(|(r, _)| r.kpis.max_decel).collect()),
    }
}

/// Configuration echoed into the report for auditability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub sensor: SensorConfig,
    pub controller: ControllerParams,
    pub thresholds: KpiThresholds,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyReport {
    pub n_scenarios: usize,
    /// None when the batch was empty (undetermined).
    pub overall_pass: Option<bool>,
    pub weighted_failure_estimate: f64,
    pub pooled: GroupStats,
    pub per_class: BTreeMap<String, GroupStats>,
    /// Keyed by variant label ("nominal", "blackout", ...).
    pub per_variant: BTreeMap<String, GroupStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ConfigEcho>,
    /// Assessor-authored qualitative judgment, passed through verbatim.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judgment: Option<String>,
}

/// Joins results with their scenarios (1:1 by id) and aggregates KPI
/// statistics pooled, per class, and per fault variant.
pub fn aggregate(
    results: &[SimulationResult],
    batch: &[TestScenario],
    judgment: Option<String>,
) -> Result<SafetyReport, ReportError> {
    let mut by_id: BTreeMap<&str, &TestScenario> = BTreeMap::new();
    for ts in batch {
        if by_id.insert(ts.id.as_str(), ts).is_some() {
            return Err(ReportError::IdMismatch(format!(
                "duplicate scenario id '{}' in batch",
                ts.id
            )));
        }
    }
    if results.len() != batch.len() {
        return Err(ReportError::IdMismatch(format!(
            "{} results for {} scenarios",
            results.len(),
            batch.len()
        )));
    }
    let mut joined: Vec<(&SimulationResult, f64)> = Vec::with_capacity(results.len());
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for r in results {
        let ts = by_id.get(r.scenario_id.as_str()).ok_or_else(|| {
            ReportError::IdMismatch(format!("result for unknown scenario '{}'", r.scenario_id))
        })?;
        *seen.entry(r.scenario_id.as_str()).or_insert(0) += 1;
        joined.push((r, ts.importance_weight));
    }
    if seen.values().any(|&c| c > 1) {
        return Err(ReportError::IdMismatch(
            "multiple results for the same scenario".to_string(),
        ));
    }

    let mut per_class: BTreeMap<String, Vec<(&SimulationResult, f64)>> = BTreeMap::new();
    let mut per_variant: BTreeMap<String, Vec<(&SimulationResult, f64)>> = BTreeMap::new();
    for &(r, w) in &joined {
        let ts = by_id[r.scenario_id.as_str()];
        per_class
            .entry(ts.class_ref.clone())
            .or_default()
            .push((r, w));
        per_variant.entry(r.variant.clone()).or_default().push((r, w));
    }
    let pooled = group_stats(&joined);
    Ok(SafetyReport {
        n_scenarios: joined.len(),
        overall_pass: if joined.is_empty() {
            None
        } else {
            Some(pooled.failures == 0)
        },
        weighted_failure_estimate: pooled.weighted_failure_estimate,
        pooled,
        per_class: per_class
            .into_iter()
            .map(|(k, v)| (k, group_stats(&v)))
            .collect(),
        per_variant: per_variant
            .into_iter()
            .map(|(k, v)| (k, group_stats(&v)))
            .collect(),
        config: results.first().map(|r| ConfigEcho {
            sensor: r.sensor.clone(),
            controller: r.controller.clone(),
            thresholds: r.thresholds.clone(),
            dt: r.dt,
        }),
        judgment,
    })
}

/// Canonical JSON rendering; byte-stable for fixed inputs.
pub fn render_json(report: &SafetyReport) -> String {
    #[derive(Serialize)]
    struct Versioned<'a> {
        v: u32,
        #[serde(flatten)]
        body: &'a SafetyReport,
    }
    to_canonical_json_pretty(&Versioned { v: 1, body: report }).expect("report serializes")
}

fn fmt_opt(summary: &Option<KpiSummary>) -> (String, String, String) {
    match summary {
        None => ("-".to_string(), "-".to_string(), "-".to_string()),
        Some(s) => (
            format!("{:.3}", s.min),
            format!("{:.3}", s.median),
            format!("{:.3}", s.max),
        ),
    }
}

fn render_group(out: &mut String, name: &str, g: &GroupStats) {
    out.push_str(&format!(
        "{:<28} {:>5} {:>5} {:>5} {:>9.4}\n",
        name, g.scenarios, g.failures, g.collisions, g.weighted_failure_estimate
    ));
    for (label, summary) in [
        ("min TTC [s]", &g.min_ttc),
        ("min distance [m]", &g.min_distance),
        ("max decel [m/s^2]", &g.max_decel),
    ] {
        let (min, med, max) = fmt_opt(summary);
        out.push_str(&format!(
            "  {:<26} min {:>9}  med {:>9}  max {:>9}\n",
            label, min, med, max
        ));
    }
}

/// 80-column plain-text rendering with per-class and per-variant tables and
/// the recommendation line.
pub fn render_text(report: &SafetyReport) -> String {
    let mut out = String::new();
    let rule: String = "=".repeat(72);
    out.push_str(&rule);
    out.push_str("\nSAFETY ASSESSMENT REPORT\n");
    out.push_str(&rule);
    out.push('\n');
    if report.n_scenarios == 0 {
        out.push_str("zero scenarios executed; pass undetermined\n");
        return out;
    }
    out.push_str(&format!("scenarios executed: {}\n", report.n_scenarios));
    out.push_str(&format!(
        "weighted failure estimate: {:.6}\n\n",
        report.weighted_failure_estimate
    ));
    out.push_str(&format!(
        "{:<28} {:>5} {:>5} {:>5} {:>9}\n",
        "group", "runs", "fail", "coll", "w-fail"
    ));
    out.push_str(&format!("{}\n", "-".repeat(56)));
    render_group(&mut out, "all", &report.pooled);
    out.push_str("\nper class\n");
    for (name, g) in &report.per_class {
        render_group(&mut out, name, g);
    }
    out.push_str("\nper variant\n");
    for (name, g) in &report.per_variant {
        render_group(&mut out, name, g);
    }
    if let Some(j) = &report.judgment {
        out.push_str(&format!("\nassessor judgment: {j}\n"));
    }
    out.push('\n');
    out.push_str(&format!(
        "RECOMMENDATION: {}\n",
        match report.overall_pass {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "UNDETERMINED",
        }
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::KpiReport;

    fn scenario(id: &str, class: &str, weight: f64) -> TestScenario {
        TestScenario {
            id: id.to_string(),
            class_ref: class.to_string(),
            road: crate::road::builtin_library().remove(0),
            objects: vec![],
            ego: crate::genscen::EgoAssignment {
                route: vec!["l0".to_string()],
                v_max: 30.0,
                initial_s: 0.0,
                initial_v: 20.0,
                directives: vec![],
            },
            nominal_ego: crate::genscen::ObjectTrajectory {
                actor: "ego".to_string(),
                points: vec![crate::genscen::TrajectoryPoint {
                    t: 0.0,
                    x: 0.0,
                    y: 0.0,
                    v: 20.0,
                    heading: 0.0,
                }],
            },
            importance_weight: weight,
            seed: 0,
            horizon: 10.0,
            variant: "nominal".to_string(),
            faults: None,
            slot_params: vec![],
        }
    }

    fn result(id: &str, variant: &str, pass: bool) -> SimulationResult {
        SimulationResult {
            scenario_id: id.to_string(),
            variant: variant.to_string(),
            seed: 0,
            kpis: KpiReport {
                scenario_id: id.to_string(),
                min_ttc: Some(if pass { 4.0 } else { 0.5 }),
                min_distance: if pass { 12.0 } else { 0.0 },
                collision: !pass,
                max_decel: 3.0,
                v_max_violation: false,
                ttc_pass: pass,
                collision_pass: pass,
                comfort_pass: true,
                pass,
            },
            steps: 100,
            sensor: SensorConfig::default(),
            controller: ControllerParams::default(),
            thresholds: KpiThresholds::default(),
            dt: 0.02,
        }
    }

    #[test]
    fn all_pass_reports_zero_estimate() {
        let batch = vec![scenario("a", "c1", 1.0), scenario("b", "c1", 2.0)];
        let results = vec![result("a", "nominal", true), result("b", "nominal", true)];
        let report = aggregate(&results, &batch, None).unwrap();
        assert_eq!(report.overall_pass, Some(true));
        assert_eq!(report.weighted_failure_estimate, 0.0);
    }

    #[test]
    fn weighted_estimate_formula() {
        let batch = vec![scenario("a", "c1", 1.0), scenario("b", "c1", 3.0)];
        let results = vec![result("a", "nominal", true), result("b", "nominal", false)];
        let report = aggregate(&results, &batch, None).unwrap();
        assert_eq!(report.overall_pass, Some(false));
        assert!((report.weighted_failure_estimate - 0.75).abs() < 1e-12);
    }

    #[test]
    fn uniform_weights_reduce_to_frequency() {
        let batch: Vec<_> = (0..5)
            .map(|i| scenario(&format!("s{i}"), "c1", 1.0))
            .collect();
        let results: Vec<_> = (0..5)
            .map(|i| result(&format!("s{i}"), "nominal", i >= 2))
            .collect();
        let report = aggregate(&results, &batch, None).unwrap();
        assert!((report.weighted_failure_estimate - 2.0 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn id_mismatch_detected() {
        let batch = vec![scenario("a", "c1", 1.0)];
        let results = vec![result("zz", "nominal", true)];
        assert!(matches!(
            aggregate(&results, &batch, None),
            Err(ReportError::IdMismatch(_))
        ));
        assert!(matches!(
            aggregate(&[], &batch, None),
            Err(ReportError::IdMismatch(_))
        ));
    }

    #[test]
    fn aggregation_is_permutation_invariant() {
        let batch = vec![
            scenario("a", "c1", 1.0),
            scenario("b", "c2", 2.0),
            scenario("c", "c1", 0.5),
        ];
        let mut results = vec![
            result("a", "nominal", true),
            result("b", "blackout", false),
            result("c", "nominal", true),
        ];
        let forward = aggregate(&results, &batch, None).unwrap();
        results.reverse();
        let backward = aggregate(&results, &batch, None).unwrap();
        assert_eq!(forward, backward);
    }

    #[test]
    fn variant_sections_and_stable_rendering() {
        let batch = vec![scenario("a", "c1", 1.0), scenario("b", "c1", 1.0)];
        let results = vec![
            result("a", "nominal", true),
            result("b", "blackout", false),
        ];
        let report = aggregate(&results, &batch, Some("review pending".to_string())).unwrap();
        assert_eq!(report.per_variant.len(), 2);
        assert!(report.per_variant.contains_key("blackout"));
        let t1 = render_text(&report);
        let t2 = render_text(&report);
        assert_eq!(t1, t2);
        assert!(t1.lines().all(|l| l.len() <= 80), "80-column limit");
        assert!(t1.contains("RECOMMENDATION: FAIL"));
        let j1 = render_json(&report);
        assert_eq!(j1, render_json(&report));
        assert!(j1.contains("\"v\": 1"));
    }

    #[test]
    fn empty_batch_is_undetermined() {
        let report = aggregate(&[], &[], None).unwrap();
        assert_eq!(report.overall_pass, None);
        let text = render_text(&report);
        assert!(text.contains("undetermined"));
    }
}
