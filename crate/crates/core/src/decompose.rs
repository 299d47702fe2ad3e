//! Scenario decomposition: per-actor, per-channel mode detection with
//! hysteresis, segmentation of inter-event activities, and activity
//! parametrization.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{ActorTrack, DrivingLog};
use crate::scenario::{Activity, ActivityParams, Channel, Event, Mode};

#[derive(Debug, Error, PartialEq)]
pub enum DecomposeError {
    #[error("inconsistent event sequence: {0}")]
    InconsistentEvents(String),
}

/// Thresholds of the hysteretic mode detectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeThresholds {
    /// Acceleration magnitude to enter accelerating/braking \[m/s^2\].
    pub a_on: f64,
    /// Acceleration magnitude to fall back to cruising \[m/s^2\]; must be
    /// below `a_on` (hysteresis).
    pub a_off: f64,
    /// Lateral-velocity threshold for lane-change candidates \[m/s\].
    pub lat_rate_on: f64,
    /// Mode intervals shorter than this are merged into the longer
    /// neighbor \[s\].
    pub min_duration: f64,
}

impl Default for ModeThresholds {
    fn default() -> Self {
        Self {
            a_on: 0.5,
            a_off: 0.2,
            lat_rate_on: 0.3,
            min_duration: 0.5,
        }
    }
}

impl ModeThresholds {
    pub fn validate(&self) -> bool {
        self.a_on > 0.0
            && self.a_off > 0.0
            && self.a_off < self.a_on
            && self.lat_rate_on > 0.0
            && self.min_duration >= 0.0
    }
}

/// Half-open sample-index interval labeled with a mode.
#[derive(Debug, Clone, Copy, PartialEq)]
struct ModeInterval {
    mode: Mode,
    start: usize,
    end: usize,
}

fn intervals_from_modes(modes: &[Mode]) -> Vec<ModeInterval> {
    let mut intervals: Vec<ModeInterval> = Vec::new();
    for (i, &mode) in modes.iter().enumerate() {
        match intervals.last_mut() {
            Some(last) if last.mode == mode => last.end = i + 1,
            _ => intervals.push(ModeInterval {
                mode,
                start: i,
                end: i + 1,
            }),
        }
    }
    intervals
}

fn coalesce(intervals: &mut Vec<ModeInterval>) {
    let mut merged: Vec<ModeInterval> = Vec::new();
    for iv in intervals.drain(..) {
        match merged.last_mut() {
            Some(last) if last.mode == iv.mode => last.end = iv.end,
            _ => merged.push(iv),
        }
    }
    *intervals = merged;
}

/// Repeatedly merges the shortest interval below `min_duration` into its
/// longer neighbor until all remaining intervals are long enough.
fn merge_short_intervals(mut intervals: Vec<ModeInterval>, dt: f64, min_duration: f64) -> Vec<ModeInterval> {
    loop {
        if intervals.len() <= 1 {
            return intervals;
        }
        let mut shortest: Option<(usize, f64)> = None;
        for (k, iv) in intervals.iter().enumerate() {
            let dur = (iv.end - iv.start) as f64 * dt;
            if dur < min_duration && shortest.map_or(true, |(_, d)| dur < d) {
                shortest = Some((k, dur));
            }
        }
        let Some((k, _)) = shortest else {
            return intervals;
        };
        let absorb_into = if k == 0 {
            1
        } else if k == intervals.len() - 1 {
            k - 1
        } else {
            let left = intervals[k - 1].end - intervals[k - 1].start;
            let right = intervals[k + 1].end - intervals[k + 1].start;
            if left >= right {
                k - 1
            } else {
                k + 1
            }
        };
        intervals[k].mode = intervals[absorb_into].mode;
        coalesce(&mut intervals);
    }
}

fn events_from_intervals(
    intervals: &[ModeInterval],
    track: &ActorTrack,
    channel: Channel,
) -> Vec<Event> {
    intervals
        .windows(2)
        .map(|pair| Event {
            actor: track.actor.clone(),
            time: track.samples[pair[1].start].t,
            channel,
            from_mode: pair[0].mode,
            to_mode: pair[1].mode,
        })
        .collect()
}

fn lon_initial_mode(a: f64, th: &ModeThresholds) -> Mode {
    if a > th.a_on {
        Mode::Accelerating
    } else if a < -th.a_on {
        Mode::Braking
    } else {
        Mode::Cruising
    }
}

fn lon_next_mode(prev: Mode, a: f64, th: &ModeThresholds) -> Mode {
    match prev {
        Mode::Cruising => lon_initial_mode(a, th),
        Mode::Accelerating => {
            if a <= th.a_off {
                if a < -th.a_on {
                    Mode::Braking
                } else {
                    Mode::Cruising
                }
            } else {
                Mode::Accelerating
            }
        }
        Mode::Braking => {
            if a >= -th.a_off {
                if a > th.a_on {
                    Mode::Accelerating
                } else {
                    Mode::Cruising
                }
            } else {
                Mode::Braking
            }
        }
        _ => unreachable!("longitudinal state machine"),
    }
}

fn longitudinal_intervals(track: &ActorTrack, dt: f64, th: &ModeThresholds) -> Vec<ModeInterval> {
    let mut modes = Vec::with_capacity(track.samples.len());
    let mut state = lon_initial_mode(track.samples[0].a, th);
    modes.push(state);
    for s in &track.samples[1..] {
        state = lon_next_mode(state, s.a, th);
        modes.push(state);
    }
    merge_short_intervals(intervals_from_modes(&modes), dt, th.min_duration)
}

/// Hysteretic 3-mode detector over the longitudinal acceleration signal.
pub fn detect_longitudinal_events(
    track: &ActorTrack,
    dt: f64,
    th: &ModeThresholds,
) -> Vec<Event> {
    if track.samples.is_empty() {
        return Vec::new();
    }
    let intervals = longitudinal_intervals(track, dt, th);
    events_from_intervals(&intervals, track, Channel::Longitudinal)
}

/// Window (in seconds) of the rolling heading fit used to estimate the path
/// direction against which cross-track motion is measured.
pub const HEADING_FIT_WINDOW: f64 = 1.0;

/// Cross-track (lateral) velocity of each sample: the component of the
/// centrally-differenced position velocity perpendicular to the rolling-mean
/// heading. Positive values point left of the path.
pub fn lateral_velocity(track: &ActorTrack, dt: f64) -> Vec<f64> {
    let samples = &track.samples;
    let n = samples.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let half = ((HEADING_FIT_WINDOW / dt / 2.0).round() as usize).max(1);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(n);
        // Circular mean of heading over the window.
        let (mut sx, mut sy) = (0.0, 0.0);
        for s in &samples[lo..hi] {
            sx += s.heading.cos();
            sy += s.heading.sin();
        }
        let path_heading = sy.atan2(sx);
        let (i0, i1) = if i == 0 {
            (0, 1)
        } else if i == n - 1 {
            (n - 2, n - 1)
        } else {
            (i - 1, i + 1)
        };
        let span = samples[i1].t - samples[i0].t;
        let vx = (samples[i1].x - samples[i0].x) / span;
        let vy = (samples[i1].y - samples[i0].y) / span;
        out.push(-path_heading.sin() * vx + path_heading.cos() * vy);
    }
    out
}

/// Cumulative cross-track offset (trapezoidal integral of the lateral
/// velocity), used to parametrize lane-change displacement.
pub fn cross_track_offset(track: &ActorTrack, dt: f64) -> Vec<f64> {
    let v_lat = lateral_velocity(track, dt);
    let mut offset = Vec::with_capacity(v_lat.len());
    let mut acc = 0.0;
    offset.push(0.0);
    for i in 1..v_lat.len() {
        let span = track.samples[i].t - track.samples[i - 1].t;
        acc += 0.5 * (v_lat[i - 1] + v_lat[i]) * span;
        offset.push(acc);
    }
    offset
}

fn lateral_intervals(track: &ActorTrack, dt: f64, th: &ModeThresholds) -> Vec<ModeInterval> {
    let v_lat = lateral_velocity(track, dt);
    let modes: Vec<Mode> = v_lat
        .iter()
        .map(|&v| {
            if v > th.lat_rate_on {
                Mode::LaneChangeLeft
            } else if v < -th.lat_rate_on {
                Mode::LaneChangeRight
            } else {
                Mode::LaneFollowing
            }
        })
        .collect();
    let mut intervals = merge_short_intervals(intervals_from_modes(&modes), dt, th.min_duration);
    // Lane gate: a candidate only counts as a lane change when the lane
    // index actually changes across the interval; the change direction
    // (decrement = left) fixes the label.
    let n = track.samples.len();
    for iv in &mut intervals {
        if !iv.mode.is_lane_change() {
            continue;
        }
        let lane_before = track.samples[iv.start.saturating_sub(1)].lane_index;
        let lane_after = track.samples[(iv.end).min(n - 1)].lane_index;
        iv.mode = match lane_after.cmp(&lane_before) {
            std::cmp::Ordering::Less => Mode::LaneChangeLeft,
            std::cmp::Ordering::Greater => Mode::LaneChangeRight,
            std::cmp::Ordering::Equal => Mode::LaneFollowing,
        };
    }
    coalesce(&mut intervals);
    intervals
}

/// Lane-change detector over the cross-track velocity signal, gated on an
/// actual lane index change.
pub fn detect_lateral_events(track: &ActorTrack, dt: f64, th: &ModeThresholds) -> Vec<Event> {
    if track.samples.is_empty() {
        return Vec::new();
    }
    let intervals = lateral_intervals(track, dt, th);
    events_from_intervals(&intervals, track, Channel::Lateral)
}

/// Tiles the track span into activities bounded by the given (sorted,
/// single-channel) events. `n` events yield `n + 1` activities.
pub fn segment_activities(
    events: &[Event],
    track: &ActorTrack,
    channel: Channel,
    dt: f64,
    th: &ModeThresholds,
) -> Result<Vec<Activity>, DecomposeError> {
    for pair in events.windows(2) {
        if pair[1].time <= pair[0].time {
            return Err(DecomposeError::InconsistentEvents(
                "events not strictly ordered in time".to_string(),
            ));
        }
        if pair[0].to_mode != pair[1].from_mode {
            return Err(DecomposeError::InconsistentEvents(format!(
                "event at {} leaves mode {} but next event at {} starts from {}",
                pair[0].time, pair[0].to_mode, pair[1].time, pair[1].from_mode
            )));
        }
    }
    let t_start = track.t_start();
    let t_end = track.t_end();
    let mut boundaries = vec![t_start];
    boundaries.extend(events.iter().map(|e| e.time));
    boundaries.push(t_end);
    let mut modes: Vec<Mode> = Vec::new();
    if events.is_empty() {
        modes.push(constant_mode(track, channel, th));
    } else {
        modes.push(events[0].from_mode);
        modes.extend(events.iter().map(|e| e.to_mode));
    }
    let mut activities = Vec::new();
    for (k, mode) in modes.iter().enumerate() {
        let (a, b) = (boundaries[k], boundaries[k + 1]);
        if b <= a {
            return Err(DecomposeError::InconsistentEvents(format!(
                "empty activity interval [{a}, {b}]"
            )));
        }
        let mut activity = Activity {
            actor: track.actor.clone(),
            channel,
            mode: *mode,
            t_start: a,
            t_end: b,
            params: ActivityParams::default(),
        };
        activity.params = parametrize_activity(&activity, track, dt);
        activities.push(activity);
    }
    Ok(activities)
}

/// Mode assigned to an event-free track on the given channel.
fn constant_mode(track: &ActorTrack, channel: Channel, th: &ModeThresholds) -> Mode {
    match channel {
        Channel::Longitudinal => {
            let mean_a =
                track.samples.iter().map(|s| s.a).sum::<f64>() / track.samples.len() as f64;
            lon_initial_mode(mean_a, th)
        }
        Channel::Lateral => Mode::LaneFollowing,
    }
}

fn sample_index(track: &ActorTrack, t: f64, dt: f64) -> usize {
    let idx = ((t - track.t_start()) / dt).round();
    (idx.max(0.0) as usize).min(track.samples.len() - 1)
}

/// Endpoint-difference parametrization of an activity.
pub fn parametrize_activity(activity: &Activity, track: &ActorTrack, dt: f64) -> ActivityParams {
    let duration = activity.t_end - activity.t_start;
    let i0 = sample_index(track, activity.t_start, dt);
    let i1 = sample_index(track, activity.t_end, dt);
    match activity.channel {
        Channel::Longitudinal => {
            let v_start = track.samples[i0].v;
            let delta_v = track.samples[i1].v - v_start;
            ActivityParams::longitudinal(duration, v_start, delta_v)
        }
        Channel::Lateral => {
            if activity.mode.is_lane_change() {
                // The thresholded interval clips the low-rate tails of the
                // maneuver; extend the measurement window (up to 1 s per
                // side) while cross-track motion continues in the maneuver
                // direction, so the recovered displacement covers the full
                // lane offset.
                let v_lat = lateral_velocity(track, dt);
                let offset = cross_track_offset(track, dt);
                let dir = if activity.mode == Mode::LaneChangeLeft {
                    1.0
                } else {
                    -1.0
                };
                let max_ext = (1.0 / dt).round() as usize;
                let n = track.samples.len();
                let mut j0 = i0;
                while j0 > 0 && i0 - j0 < max_ext && dir * v_lat[j0 - 1] > 0.02 {
                    j0 -= 1;
                }
                let mut j1 = i1;
                while j1 + 1 < n && j1 - i1 < max_ext && dir * v_lat[j1 + 1] > 0.02 {
                    j1 += 1;
                }
                ActivityParams::lane_change(duration, offset[j1] - offset[j0])
            } else {
                ActivityParams::lane_following(duration)
            }
        }
    }
}

/// Events and activities of one actor, both channels merged and sorted.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ActorDecomposition {
    pub events: Vec<Event>,
    pub activities: Vec<Activity>,
}

/// Decomposition of a whole log.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LogDecomposition {
    pub log_id: String,
    pub actors: BTreeMap<String, ActorDecomposition>,
}

impl LogDecomposition {
    pub fn activities_of(&self, actor: &str, channel: Channel) -> Vec<&Activity> {
        self.actors
            .get(actor)
            .map(|d| {
                d.activities
                    .iter()
                    .filter(|a| a.channel == channel)
                    .collect()
            })
            .unwrap_or_default()
    }
}

/// Runs both detectors and the segmentation over every actor of a log.
pub fn decompose_log(log: &DrivingLog, th: &ModeThresholds) -> Result<LogDecomposition, DecomposeError> {
    let mut out = LogDecomposition {
        log_id: log.source_id.clone(),
        actors: BTreeMap::new(),
    };
    for track in &log.actors {
        let lon_events = detect_longitudinal_events(track, log.dt, th);
        let lat_events = detect_lateral_events(track, log.dt, th);
        let mut activities = segment_activities(&lon_events, track, Channel::Longitudinal, log.dt, th)?;
        activities.extend(segment_activities(&lat_events, track, Channel::Lateral, log.dt, th)?);
        activities.sort_by(|a, b| {
            a.t_start
                .partial_cmp(&b.t_start)
                .expect("finite times")
                .then(a.channel.cmp(&b.channel))
        });
        let mut events = lon_events;
        events.extend(lat_events);
        events.sort_by(|a, b| {
            a.time
                .partial_cmp(&b.time)
                .expect("finite times")
                .then(a.channel.cmp(&b.channel))
        });
        out.actors.insert(
            track.actor.clone(),
            ActorDecomposition { events, activities },
        );
    }
    Ok(out)
}

/// Debug dump of per-actor activity timelines, one row per activity.
pub fn timeline_csv(decomp: &LogDecomposition) -> String {
    let mut out = String::from("actor,channel,mode,t_start,t_end,duration,v_start,delta_v,lateral_displacement\n");
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (actor, d) in &decomp.actors {
        for a in &d.activities {
            out.push_str(&format!(
                "{},{:?},{},{},{},{},{},{},{}\n",
                actor,
                a.channel,
                a.mode,
                a.t_start,
                a.t_end,
                fmt(a.params.duration()),
                fmt(a.params.v_start()),
                fmt(a.params.delta_v()),
                fmt(a.params.lateral_displacement()),
            ));
        }
    }
    out
}
