//! Raw driving-log ingestion: CSV parsing into canonical fixed-rate tracks,
//! outlier cleaning, and resampling.
//!
//! Input CSV schema (one row per actor-sample):
//! `t,actor_id,is_ego,x,y,v,a,heading,lane_index`, header mandatory,
//! '.' decimal separator, UTF-8. `heading` may be left empty; it is then
//! derived from successive positions.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("missing column '{0}' in header")]
    MissingColumn(String),
    #[error("no actor is flagged as ego")]
    NoEgoActor,
    #[error("more than one actor is flagged as ego")]
    MultipleEgoActors,
    #[error("track '{actor}' has {fraction:.0}% outliers, above the {ceiling:.0}% ceiling")]
    TooManyOutliers {
        actor: String,
        fraction: f64,
        ceiling: f64,
    },
    #[error("track '{0}' is empty")]
    EmptyTrack(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// One kinematic sample of an actor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub a: f64,
    pub heading: f64,
    pub lane_index: i32,
}

/// Fixed-rate kinematic track of one actor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorTrack {
    pub actor: String,
    pub is_ego: bool,
    pub samples: Vec<Sample>,
}

impl ActorTrack {
    pub fn t_start(&self) -> f64 {
        self.samples.first().map(|s| s.t).unwrap_or(0.0)
    }

    pub fn t_end(&self) -> f64 {
        self.samples.last().map(|s| s.t).unwrap_or(0.0)
    }

    /// Sample value at time `t` by linear interpolation (nearest neighbor
    /// for `lane_index`). Clamps outside the track span.
    pub fn interpolate(&self, t: f64, dt: f64) -> Sample {
        let samples = &self.samples;
        if samples.len() == 1 {
            return samples[0];
        }
        let t0 = samples[0].t;
        let idx = ((t - t0) / dt).floor();
        let i = (idx.max(0.0) as usize).min(samples.len() - 2);
        let left = &samples[i];
        let right = &samples[i + 1];
        let frac = ((t - left.t) / (right.t - left.t)).clamp(0.0, 1.0);
        let lerp = |a: f64, b: f64| a + frac * (b - a);
        Sample {
            t,
            x: lerp(left.x, right.x),
            y: lerp(left.y, right.y),
            v: lerp(left.v, right.v),
            a: lerp(left.a, right.a),
            heading: lerp_angle(left.heading, right.heading, frac),
            lane_index: if frac < 0.5 {
                left.lane_index
            } else {
                right.lane_index
            },
        }
    }
}

fn lerp_angle(a: f64, b: f64, frac: f64) -> f64 {
    let diff = wrap_angle(b - a);
    wrap_angle(a + frac * diff)
}

fn wrap_angle(a: f64) -> f64 {
    let mut x = a;
    while x > std::f64::consts::PI {
        x -= 2.0 * std::f64::consts::PI;
    }
    while x < -std::f64::consts::PI {
        x += 2.0 * std::f64::consts::PI;
    }
    x
}

/// Canonical multi-actor driving log with a fixed sample period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrivingLog {
    pub dt: f64,
    pub source_id: String,
    pub actors: Vec<ActorTrack>,
    /// Optional semantic metadata attached at recording time, e.g.
    /// {"weather": "rain", "road": "motorway"}; consumed by auto-tagging.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl DrivingLog {
    pub fn ego(&self) -> &ActorTrack {
        self.actors
            .iter()
            .find(|a| a.is_ego)
            .expect("log invariant: exactly one ego actor")
    }

    pub fn actor(&self, id: &str) -> Option<&ActorTrack> {
        self.actors.iter().find(|a| a.actor == id)
    }

    pub fn t_start(&self) -> f64 {
        self.actors
            .iter()
            .map(ActorTrack::t_start)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn t_end(&self) -> f64 {
        self.actors
            .iter()
            .map(ActorTrack::t_end)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

// Physical plausibility bounds applied during cleaning.
pub const MAX_ABS_ACCEL: f64 = 15.0;
pub const MAX_SPEED: f64 = 70.0;

/// Outlier removal policy: rolling median +- k median absolute deviations,
/// with an absolute MAD floor so that noise-free tracks are never flagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleaningPolicy {
    pub window: usize,
    pub k: f64,
    pub mad_floor: f64,
    /// Error out when more than this fraction of a track's samples are
    /// outliers on any channel.
    pub max_outlier_fraction: f64,
}

impl Default for CleaningPolicy {
    fn default() -> Self {
        Self {
            window: 9,
            k: 5.0,
            mad_floor: 0.02,
            max_outlier_fraction: 0.2,
        }
    }
}

/// Replacement counts per channel, per actor.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub replacements: BTreeMap<String, BTreeMap<String, usize>>,
}

impl CleaningReport {
    pub fn total(&self) -> usize {
        self.replacements
            .values()
            .flat_map(|m| m.values())
            .sum()
    }
}

/// Parses a driving log CSV file.
pub fn parse_log(path: &Path, source_id: &str) -> Result<DrivingLog, IngestError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    parse_log_reader(&mut reader, source_id)
}

/// Parses a driving log from CSV text.
pub fn parse_log_str(csv_text: &str, source_id: &str) -> Result<DrivingLog, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(csv_text.as_bytes());
    parse_log_reader(&mut reader, source_id)
}

const COLUMNS: [&str; 9] = [
    "t",
    "actor_id",
    "is_ego",
    "x",
    "y",
    "v",
    "a",
    "heading",
    "lane_index",
];

fn parse_log_reader<R: std::io::Read>(
    reader: &mut csv::Reader<R>,
    source_id: &str,
) -> Result<DrivingLog, IngestError> {
    let header = reader.headers()?.clone();
    let mut col: BTreeMap<&str, usize> = BTreeMap::new();
    for name in COLUMNS {
        let idx = header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IngestError::MissingColumn(name.to_string()))?;
        col.insert(name, idx);
    }

    let mut tracks: BTreeMap<String, ActorTrack> = BTreeMap::new();
    let mut heading_missing: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (row_idx, row) in reader.records().enumerate() {
        let line = row_idx + 2; // 1-based, after the header
        let row = row?;
        let field = |name: &str| -> &str { row.get(col[name]).unwrap_or("") };
        let num = |name: &str| -> Result<f64, IngestError> {
            field(name)
                .parse::<f64>()
                .map_err(|_| IngestError::MalformedRow {
                    line,
                    reason: format!("cannot parse column '{name}' value '{}'", field(name)),
                })
        };
        let t = num("t")?;
        let actor_id = field("actor_id").to_string();
        if actor_id.is_empty() {
            return Err(IngestError::MalformedRow {
                line,
                reason: "empty actor_id".to_string(),
            });
        }
        let is_ego = matches!(field("is_ego"), "1" | "true" | "yes");
        let heading_raw = field("heading");
        let heading = if heading_raw.is_empty() {
            f64::NAN
        } else {
            num("heading")?
        };
        let lane_index = field("lane_index")
            .parse::<i32>()
            .map_err(|_| IngestError::MalformedRow {
                line,
                reason: format!("cannot parse lane_index '{}'", field("lane_index")),
            })?;
        let sample = Sample {
            t,
            x: num("x")?,
            y: num("y")?,
            v: num("v")?,
            a: num("a")?,
            heading,
            lane_index,
        };
        let track = tracks.entry(actor_id.clone()).or_insert_with(|| ActorTrack {
            actor: actor_id.clone(),
            is_ego: false,
            samples: Vec::new(),
        });
        if let Some(last) = track.samples.last() {
            if t <= last.t {
                return Err(IngestError::MalformedRow {
                    line,
                    reason: format!("non-monotone timestamp {t} for actor '{actor_id}'"),
                });
            }
        }
        if heading.is_nan() {
            heading_missing
                .entry(actor_id.clone())
                .or_default()
                .push(track.samples.len());
        }
        track.is_ego |= is_ego;
        track.samples.push(sample);
    }

    // Derive missing headings from successive positions.
    for (actor, indices) in heading_missing {
        let track = tracks.get_mut(&actor).expect("actor exists");
        let samples = &mut track.samples;
        for idx in indices {
            let (i0, i1) = if idx + 1 < samples.len() {
                (idx, idx + 1)
            } else if idx > 0 {
                (idx - 1, idx)
            } else {
                samples[idx].heading = 0.0;
                continue;
            };
            let dx = samples[i1].x - samples[i0].x;
            let dy = samples[i1].y - samples[i0].y;
            samples[idx].heading = if dx == 0.0 && dy == 0.0 {
                0.0
            } else {
                dy.atan2(dx)
            };
        }
    }

    let ego_count = tracks.values().filter(|t| t.is_ego).count();
    match ego_count {
        0 => return Err(IngestError::NoEgoActor),
        1 => {}
        _ => return Err(IngestError::MultipleEgoActors),
    }

    // Infer dt from the ego track and check uniformity across all tracks.
    let ego = tracks.values().find(|t| t.is_ego).expect("checked above");
    if ego.samples.len() < 2 {
        return Err(IngestError::EmptyTrack(ego.actor.clone()));
    }
    let dt = ego.samples[1].t - ego.samples[0].t;
    for track in tracks.values() {
        for pair in track.samples.windows(2) {
            let step = pair[1].t - pair[0].t;
            if (step - dt).abs() > 1e-6 {
                return Err(IngestError::MalformedRow {
                    line: 0,
                    reason: format!(
                        "actor '{}' steps by {step} at t={}, expected {dt}",
                        track.actor, pair[0].t
                    ),
                });
            }
        }
    }

    Ok(DrivingLog {
        dt,
        source_id: source_id.to_string(),
        actors: tracks.into_values().collect(),
        metadata: BTreeMap::new(),
    })
}

/// Serializes a log back to the canonical CSV schema.
pub fn log_to_csv(log: &DrivingLog) -> String {
    let mut out = String::from("t,actor_id,is_ego,x,y,v,a,heading,lane_index\n");
    for track in &log.actors {
        for s in &track.samples {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                s.t,
                track.actor,
                if track.is_ego { 1 } else { 0 },
                s.x,
                s.y,
                s.v,
                s.a,
                s.heading,
                s.lane_index
            ));
        }
    }
    out
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Flags indices whose value deviates from the centered rolling median by
/// more than `k` MADs (with an absolute floor), or violates `bounds`.
fn outlier_mask(
    values: &[f64],
    policy: &CleaningPolicy,
    bounds: Option<(f64, f64)>,
) -> Vec<bool> {
    let n = values.len();
    let half = policy.window / 2;
    let mut mask = vec![false; n];
    for i in 0..n {
        if let Some((lo, hi)) = bounds {
            if values[i] < lo || values[i] > hi {
                mask[i] = true;
                continue;
            }
        }
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(n);
        let mut window: Vec<f64> = values[lo..hi].to_vec();
        let med = median(&mut window);
        let mut deviations: Vec<f64> = window.iter().map(|v| (v - med).abs()).collect();
        let mad = median(&mut deviations).max(policy.mad_floor);
        if (values[i] - med).abs() > policy.k * mad {
            mask[i] = true;
        }
    }
    mask
}

/// Replaces masked values by linear interpolation between the nearest
/// unmasked neighbors (nearest unmasked value at the track edges).
fn interpolate_masked(values: &mut [f64], mask: &[bool]) {
    let n = values.len();
    let clean: Vec<usize> = (0..n).filter(|&i| !mask[i]).collect();
    if clean.is_empty() {
        return;
    }
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let prev = clean.iter().rev().find(|&&j| j < i).copied();
        let next = clean.iter().find(|&&j| j > i).copied();
        values[i] = match (prev, next) {
            (Some(p), Some(q)) => {
                let frac = (i - p) as f64 / (q - p) as f64;
                values[p] + frac * (values[q] - values[p])
            }
            (Some(p), None) => values[p],
            (None, Some(q)) => values[q],
            (None, None) => values[i],
        };
    }
}

const CHANNELS: [&str; 5] = ["x", "y", "v", "a", "heading"];

fn channel_values(track: &ActorTrack, channel: &str) -> Vec<f64> {
    track
        .samples
        .iter()
        .map(|s| match channel {
            "x" => s.x,
            "y" => s.y,
            "v" => s.v,
            "a" => s.a,
            "heading" => s.heading,
            _ => unreachable!(),
        })
        .collect()
}

fn set_channel_values(track: &mut ActorTrack, channel: &str, values: &[f64]) {
    for (s, &v) in track.samples.iter_mut().zip(values) {
        match channel {
            "x" => s.x = v,
            "y" => s.y = v,
            "v" => s.v = v,
            "a" => s.a = v,
            "heading" => s.heading = v,
            _ => unreachable!(),
        }
    }
}

/// Removes implausible and statistically outlying samples, replacing them by
/// linear interpolation of their neighbors. Idempotent on already-clean logs.
pub fn clean_log(
    log: &DrivingLog,
    policy: &CleaningPolicy,
) -> Result<(DrivingLog, CleaningReport), IngestError> {
    let mut cleaned = log.clone();
    let mut report = CleaningReport::default();
    for track in &mut cleaned.actors {
        let n = track.samples.len();
        if n == 0 {
            return Err(IngestError::EmptyTrack(track.actor.clone()));
        }
        for channel in CHANNELS {
            let bounds = match channel {
                "v" => Some((0.0, MAX_SPEED)),
                "a" => Some((-MAX_ABS_ACCEL, MAX_ABS_ACCEL)),
                _ => None,
            };
            let mut values = channel_values(track, channel);
            let mask = outlier_mask(&values, policy, bounds);
            let count = mask.iter().filter(|&&m| m).count();
            if count as f64 > policy.max_outlier_fraction * n as f64 {
                return Err(IngestError::TooManyOutliers {
                    actor: track.actor.clone(),
                    fraction: 100.0 * count as f64 / n as f64,
                    ceiling: 100.0 * policy.max_outlier_fraction,
                });
            }
            if count > 0 {
                interpolate_masked(&mut values, &mask);
                set_channel_values(track, channel, &values);
                report
                    .replacements
                    .entry(track.actor.clone())
                    .or_default()
                    .insert(channel.to_string(), count);
            }
        }
    }
    Ok((cleaned, report))
}

/// Resamples all tracks onto a uniform grid with period `dt_target`, by
/// linear interpolation (nearest neighbor for lane index).
pub fn resample_log(log: &DrivingLog, dt_target: f64) -> Result<DrivingLog, IngestError> {
    assert!(dt_target > 0.0, "dt_target must be positive");
    let mut out = log.clone();
    out.dt = dt_target;
    for track in &mut out.actors {
        if track.samples.is_empty() {
            return Err(IngestError::EmptyTrack(track.actor.clone()));
        }
        let t0 = track.t_start();
        let t1 = track.t_end();
        let steps = ((t1 - t0) / dt_target + 1e-9).floor() as usize;
        let mut samples = Vec::with_capacity(steps + 1);
        for k in 0..=steps {
            let t = t0 + k as f64 * dt_target;
            samples.push(track.interpolate(t, log.dt));
        }
        track.samples = samples;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "t,actor_id,is_ego,x,y,v,a,heading,lane_index\n";

    fn constant_velocity_csv() -> String {
        let mut s = HEADER.to_string();
        for k in 0..3 {
            let t = k as f64 * 0.1;
            s.push_str(&format!("{t},ego,1,{},0,10,0,0,1\n", 10.0 * t));
        }
        s
    }

    #[test]
    fn parse_single_actor() {
        let log = parse_log_str(&constant_velocity_csv(), "test").unwrap();
        assert_eq!(log.actors.len(), 1);
        assert_eq!(log.actors[0].samples.len(), 3);
        assert!(log.actors[0].samples.iter().all(|s| s.v == 10.0));
        assert!((log.dt - 0.1).abs() < 1e-12);
    }

    #[test]
    fn parse_without_ego_fails() {
        let csv = constant_velocity_csv().replace(",ego,1,", ",ego,0,");
        assert!(matches!(
            parse_log_str(&csv, "test"),
            Err(IngestError::NoEgoActor)
        ));
    }

    #[test]
    fn parse_non_monotone_timestamps_fails() {
        let mut csv = HEADER.to_string();
        csv.push_str("0.0,ego,1,0,0,10,0,0,1\n");
        csv.push_str("0.1,ego,1,1,0,10,0,0,1\n");
        csv.push_str("0.1,ego,1,2,0,10,0,0,1\n");
        match parse_log_str(&csv, "test") {
            Err(IngestError::MalformedRow { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected MalformedRow, got {other:?}"),
        }
    }

    #[test]
    fn missing_column_detected() {
        let csv = "t,actor_id,is_ego,x,y,v,a,lane_index\n0,ego,1,0,0,1,0,1\n";
        assert!(matches!(
            parse_log_str(csv, "test"),
            Err(IngestError::MissingColumn(c)) if c == "heading"
        ));
    }

    #[test]
    fn heading_derived_from_positions() {
        let mut csv = HEADER.to_string();
        csv.push_str("0.0,ego,1,0,0,10,0,,1\n");
        csv.push_str("0.1,ego,1,0,1,10,0,,1\n");
        let log = parse_log_str(&csv, "test").unwrap();
        let h = log.actors[0].samples[0].heading;
        assert!((h - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    fn straight_track(n: usize, dt: f64) -> DrivingLog {
        let samples: Vec<Sample> = (0..n)
            .map(|k| {
                let t = k as f64 * dt;
                Sample {
                    t,
                    x: 10.0 * t,
                    y: 0.0,
                    v: 10.0,
                    a: 0.0,
                    heading: 0.0,
                    lane_index: 1,
                }
            })
            .collect();
        DrivingLog {
            dt,
            source_id: "synthetic".to_string(),
            actors: vec![ActorTrack {
                actor: "ego".to_string(),
                is_ego: true,
                samples,
            }],
            metadata: BTreeMap::new(),
        }
    }

    #[test]
    fn clean_is_noop_on_clean_track() {
        let log = straight_track(50, 0.1);
        let (cleaned, report) = clean_log(&log, &CleaningPolicy::default()).unwrap();
        assert_eq!(cleaned, log);
        assert_eq!(report.total(), 0);
    }

    #[test]
    fn spike_replaced_by_neighbor_midpoint() {
        let mut log = straight_track(50, 0.1);
        let clean_value = log.actors[0].samples[25].x;
        log.actors[0].samples[25].x += 100.0;
        let (cleaned, report) = clean_log(&log, &CleaningPolicy::default()).unwrap();
        // Linear motion: the interpolated midpoint of the two neighbors is
        // exactly the original value.
        assert!((cleaned.actors[0].samples[25].x - clean_value).abs() < 1e-9);
        assert_eq!(report.replacements["ego"]["x"], 1);
    }

    #[test]
    fn half_spiked_track_rejected() {
        let mut log = straight_track(40, 0.1);
        for (k, s) in log.actors[0].samples.iter_mut().enumerate() {
            if k % 2 == 0 {
                s.v = 100.0; // above the physical plausibility bound
            }
        }
        assert!(matches!(
            clean_log(&log, &CleaningPolicy::default()),
            Err(IngestError::TooManyOutliers { .. })
        ));
    }

    #[test]
    fn clean_idempotent_with_spikes() {
        let mut log = straight_track(80, 0.1);
        log.actors[0].samples[10].x += 40.0;
        log.actors[0].samples[41].v = 100.0; // plausibility bound violation
        let policy = CleaningPolicy::default();
        let (once, _) = clean_log(&log, &policy).unwrap();
        let (twice, report) = clean_log(&once, &policy).unwrap();
        assert_eq!(once, twice);
        assert_eq!(report.total(), 0);
    }

    #[test]
    fn resample_identity_when_dt_matches() {
        let log = straight_track(30, 0.1);
        let out = resample_log(&log, 0.1).unwrap();
        for (a, b) in log.actors[0].samples.iter().zip(&out.actors[0].samples) {
            assert!((a.x - b.x).abs() < 1e-9);
            assert!((a.t - b.t).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_ramp_exact_under_resampling() {
        let mut log = straight_track(30, 0.1);
        for s in &mut log.actors[0].samples {
            s.v = s.t; // v(t) = t
        }
        let out = resample_log(&log, 0.04).unwrap();
        for s in &out.actors[0].samples {
            assert!((s.v - s.t).abs() < 1e-12, "v({}) = {}", s.t, s.v);
        }
    }

    #[test]
    fn sine_resampling_error_bound() {
        // x(t) = sin t sampled at dt, resampled to dt/2: linear interpolation
        // error is bounded by (dt^2 / 8) * max|x''| with max|x''| = 1.
        let dt = 0.1;
        let mut log = straight_track(200, dt);
        for s in &mut log.actors[0].samples {
            s.x = s.t.sin();
        }
        let out = resample_log(&log, dt / 2.0).unwrap();
        let bound = dt * dt / 8.0;
        for s in &out.actors[0].samples {
            assert!(
                (s.x - s.t.sin()).abs() <= bound + 1e-12,
                "error {} above bound {bound}",
                (s.x - s.t.sin()).abs()
            );
        }
    }

    #[test]
    fn resample_preserves_endpoints() {
        let log = straight_track(30, 0.1);
        let out = resample_log(&log, 0.07).unwrap();
        assert!((out.actors[0].t_start() - log.actors[0].t_start()).abs() < 1e-12);
        assert!(log.actors[0].t_end() - out.actors[0].t_end() < 0.07 + 1e-12);
    }

    #[test]
    fn csv_round_trip_exact() {
        let log = parse_log_str(&constant_velocity_csv(), "test").unwrap();
        let text = log_to_csv(&log);
        let back = parse_log_str(&text, "test").unwrap();
        assert_eq!(log, back);
    }
}
