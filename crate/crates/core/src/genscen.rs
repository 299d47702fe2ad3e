//! Test scenario generation: sampling activity parameters from a class's
//! fitted densities, synthesizing executable trajectories on a road network,
//! and filtering the batch down to safety-critical scenarios plus their
//! fault-injection variants.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::content_id;
use crate::ingest::{ActorTrack, DrivingLog, Sample};
use crate::mining::ClassDocument;
use crate::rng::derive_seed;
use crate::road::{select_road, RoadError, RoadNetwork};
use crate::scenario::{ActorRole, Channel, Mode};
use crate::simulate::{FaultInjection, FaultKind};
use crate::tags::{TagQuery, Taxonomy};

#[derive(Debug, Error)]
pub enum GenError {
    #[error("infeasible parameters: {0}")]
    InfeasibleParameters(String),
    #[error("off road: {0}")]
    OffRoad(String),
    #[error("slot {slot} has no fitted density")]
    MissingDensity { slot: usize },
    #[error("rejection budget exhausted: {got}/{wanted} scenarios after {attempts} attempts")]
    RejectionBudgetExhausted {
        wanted: usize,
        got: usize,
        attempts: usize,
    },
    #[error(transparent)]
    Road(#[from] RoadError),
    #[error(transparent)]
    Serialization(#[from] serde_json::Error),
}

/// Maximum acceleration magnitude a sampled longitudinal activity may imply.
pub const MAX_SYNTH_ACCEL: f64 = 8.0;

/// Quintic minimum-jerk step: 0 -> 1 on u in [0, 1], zero first and second
/// derivative at both ends.
pub fn quintic_step(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTrajectory {
    pub actor: String,
    pub points: Vec<TrajectoryPoint>,
}

impl ObjectTrajectory {
    /// Linear interpolation of the trajectory, clamped at the ends.
    pub fn state_at(&self, t: f64) -> TrajectoryPoint {
        let pts = &self.points;
        if pts.len() == 1 || t <= pts[0].t {
            return TrajectoryPoint { t, ..pts[0] };
        }
        if t >= pts[pts.len() - 1].t {
            return TrajectoryPoint {
                t,
                ..pts[pts.len() - 1]
            };
        }
        let dt = pts[1].t - pts[0].t;
        let i = (((t - pts[0].t) / dt).floor() as usize).min(pts.len() - 2);
        let (a, b) = (&pts[i], &pts[i + 1]);
        let f = ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0);
        let lerp = |p: f64, q: f64| p + f * (q - p);
        TrajectoryPoint {
            t,
            x: lerp(a.x, b.x),
            y: lerp(a.y, b.y),
            v: lerp(a.v, b.v),
            heading: a.heading + f * crate::genscen::wrap_angle(b.heading - a.heading),
        }
    }
}

pub(crate) fn wrap_angle(a: f64) -> f64 {
    let mut x = a;
    while x > std::f64::consts::PI {
        x -= 2.0 * std::f64::consts::PI;
    }
    while x < -std::f64::consts::PI {
        x += 2.0 * std::f64::consts::PI;
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneSide {
    Left,
    Right,
}

/// A forced lane change the ego vehicle must execute when reaching the given
/// arclength position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaneChangeDirective {
    pub at_s: f64,
    pub side: LaneSide,
    pub duration: f64,
}

/// Ego vehicle parameters: route, speed cap, initial state, and forced
/// maneuvers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoAssignment {
    /// Lane ids the ego occupies, in order.
    pub route: Vec<String>,
    pub v_max: f64,
    pub initial_s: f64,
    pub initial_v: f64,
    pub directives: Vec<LaneChangeDirective>,
}

/// One executable test scenario: a road, open-loop object trajectories, the
/// ego assignment, and the sampling provenance (weight, seed, parameters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestScenario {
    /// Content-addressed id over all other fields.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub id: String,
    pub class_ref: String,
    pub road: RoadNetwork,
    pub objects: Vec<ObjectTrajectory>,
    pub ego: EgoAssignment,
    /// Open-loop reference trajectory of the ego realizing its slot
    /// activities; used for criticality screening, not by the simulator.
    pub nominal_ego: ObjectTrajectory,
    pub importance_weight: f64,
    pub seed: u64,
    pub horizon: f64,
    /// "nominal", or the fault kind of an injected variant.
    pub variant: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub faults: Option<FaultInjection>,
    /// Sampled parameter rows, one per class slot, in slot field order.
    pub slot_params: Vec<Vec<f64>>,
}

impl TestScenario {
    /// Recomputes the content-addressed id from the remaining fields.
    pub fn with_identity(mut self) -> Result<Self, serde_json::Error> {
        self.id = String::new();
        self.id = content_id(&self)?;
        Ok(self)
    }
}

/// Knobs of trajectory synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    /// Output sample period \[s\].
    pub dt: f64,
    /// Cruise padding before the first slot \[s\].
    pub lead_in: f64,
    /// Cruise padding after the last slot \[s\].
    pub lead_out: f64,
    /// Idle time between consecutive slots \[s\].
    pub slot_gap: f64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            dt: 0.02,
            lead_in: 2.0,
            lead_out: 2.0,
            slot_gap: 1.0,
        }
    }
}

/// One slot with its sampled parameters resolved.
#[derive(Debug, Clone)]
struct SlotSpec {
    role: ActorRole,
    channel: Channel,
    mode: Mode,
    duration: f64,
    v_start: Option<f64>,
    delta_v: Option<f64>,
    t0: f64,
}

fn parse_slots(class: &ClassDocument, rows: &[Vec<f64>], cfg: &SynthesisConfig) -> Result<Vec<SlotSpec>, GenError> {
    if rows.len() != class.slots.len() {
        return Err(GenError::InfeasibleParameters(format!(
            "{} parameter rows for {} slots",
            rows.len(),
            class.slots.len()
        )));
    }
    let mut out = Vec::with_capacity(rows.len());
    let mut cursor = cfg.lead_in;
    for (j, (slot, row)) in class.slots.iter().zip(rows).enumerate() {
        if row.len() != slot.field_names.len() {
            return Err(GenError::InfeasibleParameters(format!(
                "slot {j}: row length {} != {} fields",
                row.len(),
                slot.field_names.len()
            )));
        }
        let field = |name: &str| {
            slot.field_names
                .iter()
                .position(|f| f == name)
                .map(|i| row[i])
        };
        let duration = field("duration").unwrap_or(0.0);
        if !(duration > 0.1) {
            return Err(GenError::InfeasibleParameters(format!(
                "slot {j}: duration {duration} too short"
            )));
        }
        let delta_v = field("delta_v");
        if let Some(dv) = delta_v {
            if dv.abs() / duration > MAX_SYNTH_ACCEL {
                return Err(GenError::InfeasibleParameters(format!(
                    "slot {j}: |delta_v|/duration = {:.2} exceeds {MAX_SYNTH_ACCEL} m/s^2",
                    dv.abs() / duration
                )));
            }
        }
        // Lateral displacement is validated for sign/plausibility; the
        // synthesized lane change itself always spans the full lane offset.
        if let Some(d) = field("lateral_displacement") {
            let sign_ok = match slot.mode {
                Mode::LaneChangeLeft => d > 0.0,
                Mode::LaneChangeRight => d < 0.0,
                _ => true,
            };
            if !sign_ok || !(1.0..=7.0).contains(&d.abs()) {
                return Err(GenError::InfeasibleParameters(format!(
                    "slot {j}: lateral displacement {d} inconsistent with {}",
                    slot.mode
                )));
            }
        }
        out.push(SlotSpec {
            role: slot.role,
            channel: slot.channel,
            mode: slot.mode,
            duration,
            v_start: field("v_start"),
            delta_v,
            t0: cursor,
        });
        cursor += duration + cfg.slot_gap;
    }
    Ok(out)
}

/// Closed-form piecewise-constant-acceleration longitudinal profile.
struct LonProfile {
    /// (t_break, v, s, a) at the start of each constant-acceleration piece.
    pieces: Vec<(f64, f64, f64, f64)>,
}

impl LonProfile {
    fn build(v0: f64, windows: &[(f64, f64, f64)]) -> Result<Self, GenError> {
        // windows: sorted (t0, t1, a); a = 0 elsewhere.
        let mut breaks = vec![0.0];
        for &(t0, t1, _) in windows {
            breaks.push(t0);
            breaks.push(t1);
        }
        breaks.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
        breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        let mut pieces = Vec::with_capacity(breaks.len());
        let (mut v, mut s) = (v0, 0.0);
        let mut prev = 0.0;
        let mut prev_a = 0.0;
        for &tb in &breaks {
            let span = tb - prev;
            s += v * span + 0.5 * prev_a * span * span;
            v += prev_a * span;
            let a = windows
                .iter()
                .find(|&&(t0, t1, _)| tb >= t0 - 1e-12 && tb < t1 - 1e-12)
                .map(|&(_, _, a)| a)
                .unwrap_or(0.0);
            pieces.push((tb, v, s, a));
            if !(0.0..=crate::ingest::MAX_SPEED).contains(&v) {
                return Err(GenError::InfeasibleParameters(format!(
                    "speed {v:.2} m/s at t={tb:.2} outside [0, {}]",
                    crate::ingest::MAX_SPEED
                )));
            }
            prev = tb;
            prev_a = a;
        }
        Ok(Self { pieces })
    }

    fn at(&self, t: f64) -> (f64, f64, f64) {
        let i = self
            .pieces
            .partition_point(|&(tb, _, _, _)| tb <= t + 1e-12)
            .saturating_sub(1);
        let (tb, v, s, a) = self.pieces[i];
        let dt = t - tb;
        (s + v * dt + 0.5 * a * dt * dt, v + a * dt, a)
    }
}

/// A lane occupancy change of one actor.
#[derive(Debug, Clone)]
struct LaneShift {
    t0: f64,
    t1: f64,
    from: String,
    to: String,
}

/// Picks the first lane (by id order) from which the actor's lane-change
/// sequence is executable; returns the visited lane sequence.
fn plan_lanes(
    road: &RoadNetwork,
    changes: &[Mode],
) -> Option<Vec<String>> {
    let mut lane_ids: Vec<&str> = road.lanes.iter().map(|l| l.id.as_str()).collect();
    lane_ids.sort();
    'start: for start in &lane_ids {
        let mut seq = vec![start.to_string()];
        let mut current = start.to_string();
        for mode in changes {
            let left = *mode == Mode::LaneChangeLeft;
            match road.adjacent_lane(&current, left) {
                Some(next) => {
                    current = next.id.clone();
                    seq.push(current.clone());
                }
                None => continue 'start,
            }
        }
        return Some(seq);
    }
    None
}

/// Synthesizes one actor's trajectory from its slots.
fn synthesize_actor(
    actor: &str,
    slots: &[&SlotSpec],
    road: &RoadNetwork,
    s0: f64,
    v0: f64,
    horizon: f64,
    cfg: &SynthesisConfig,
) -> Result<(ObjectTrajectory, Vec<LaneShift>, LonProfile, Vec<String>), GenError> {
    let lon_windows: Vec<(f64, f64, f64)> = slots
        .iter()
        .filter(|s| s.channel == Channel::Longitudinal)
        .map(|s| (s.t0, s.t0 + s.duration, s.delta_v.unwrap_or(0.0) / s.duration))
        .collect();
    let profile = LonProfile::build(v0, &lon_windows)?;

    let change_modes: Vec<Mode> = slots
        .iter()
        .filter(|s| s.mode.is_lane_change())
        .map(|s| s.mode)
        .collect();
    let lane_seq = plan_lanes(road, &change_modes).ok_or_else(|| {
        GenError::OffRoad(format!(
            "no lane on '{}' supports the lane-change sequence {change_modes:?}",
            road.id
        ))
    })?;
    let mut shifts = Vec::new();
    let mut k = 0;
    for slot in slots.iter().filter(|s| s.mode.is_lane_change()) {
        shifts.push(LaneShift {
            t0: slot.t0,
            t1: slot.t0 + slot.duration,
            from: lane_seq[k].clone(),
            to: lane_seq[k + 1].clone(),
        });
        k += 1;
    }

    let (end_s, _, _) = profile.at(horizon);
    let lane_len = road.lane(&lane_seq[0])?.length();
    if s0 < 0.0 || s0 + end_s > lane_len {
        return Err(GenError::OffRoad(format!(
            "actor '{actor}' runs past the {lane_len} m lane (needs {:.1} m)",
            s0 + end_s
        )));
    }

    let n = (horizon / cfg.dt).round() as usize + 1;
    let mut points = Vec::with_capacity(n);
    let start_lane = road.lane(&lane_seq[0])?;
    for step in 0..n {
        let t = step as f64 * cfg.dt;
        let (s_rel, v, _) = profile.at(t);
        let s = s0 + s_rel;
        let shift = shifts.iter().find(|sh| t >= sh.t0 && t <= sh.t1);
        let (x, y, heading) = match shift {
            None => {
                // Last completed shift decides the current lane.
                let lane_id = shifts
                    .iter()
                    .rev()
                    .find(|sh| t > sh.t1)
                    .map(|sh| sh.to.as_str())
                    .unwrap_or(start_lane.id.as_str());
                let lane = road.lane(lane_id)?;
                let p = lane.point_at(s);
                (p[0], p[1], lane.heading_at(s))
            }
            Some(sh) => {
                let from = road.lane(&sh.from)?;
                let to = road.lane(&sh.to)?;
                let q = quintic_step((t - sh.t0) / (sh.t1 - sh.t0));
                let pf = from.point_at(s);
                let pt = to.point_at(s);
                let hf = from.heading_at(s);
                let ht = to.heading_at(s);
                (
                    pf[0] + q * (pt[0] - pf[0]),
                    pf[1] + q * (pt[1] - pf[1]),
                    hf + q * wrap_angle(ht - hf),
                )
            }
        };
        points.push(TrajectoryPoint { t, x, y, v, heading });
    }
    Ok((
        ObjectTrajectory {
            actor: actor.to_string(),
            points,
        },
        shifts,
        profile,
        lane_seq,
    ))
}

const DEFAULT_EGO_SPEED: f64 = 20.0;
const EGO_START_S: f64 = 60.0;

/// Initial placement of the target relative to the ego, by pattern shape.
fn target_placement(pattern: &str, ego_v: f64) -> (f64, f64) {
    match pattern {
        // Overtaker approaches from behind, faster.
        "overtake-of-ego" => (-25.0, ego_v + 6.0),
        // Lead vehicle ahead at matched speed.
        "lead-braking" | "cut-in" => (30.0, ego_v),
        _ => (30.0, ego_v),
    }
}

/// Realizes one sampled parameter vector as executable trajectories on the
/// road. Longitudinal slots become constant-acceleration segments, lane
/// changes quintic lateral blends between adjacent lane centerlines; slots
/// are laid out sequentially with cruise padding around them.
pub fn synthesize_trajectories(
    class: &ClassDocument,
    slot_rows: &[Vec<f64>],
    road: &RoadNetwork,
    cfg: &SynthesisConfig,
) -> Result<TestScenario, GenError> {
    let slots = parse_slots(class, slot_rows, cfg)?;
    let horizon = slots
        .iter()
        .map(|s| s.t0 + s.duration)
        .fold(0.0, f64::max)
        + cfg.lead_out;

    let ego_slots: Vec<&SlotSpec> = slots.iter().filter(|s| s.role == ActorRole::Ego).collect();
    let target_slots: Vec<&SlotSpec> = slots
        .iter()
        .filter(|s| s.role == ActorRole::Target)
        .collect();

    let ego_v0 = ego_slots
        .iter()
        .find_map(|s| s.v_start)
        .unwrap_or(DEFAULT_EGO_SPEED);
    let (ego_traj, ego_shifts, ego_profile, ego_lane_seq) =
        synthesize_actor("ego", &ego_slots, road, EGO_START_S, ego_v0, horizon, cfg)?;

    let mut objects = Vec::new();
    let mut target_lane_seq: Vec<String> = Vec::new();
    if !target_slots.is_empty() {
        let (ds, default_v) = target_placement(&class.pattern, ego_v0);
        let v0 = target_slots
            .iter()
            .find_map(|s| s.v_start)
            .unwrap_or(default_v);
        let (traj, _, _, seq) = synthesize_actor(
            "target",
            &target_slots,
            road,
            EGO_START_S + ds,
            v0,
            horizon,
            cfg,
        )?;
        target_lane_seq = seq;
        objects.push(traj);
    }

    // An actor without lane changes shares the other actor's final lane so
    // that the pattern's interaction actually happens. Re-synthesize the ego
    // when its planned lane disagrees.
    let (ego_traj, ego_shifts, ego_lane_seq) = if ego_slots
        .iter()
        .all(|s| !s.mode.is_lane_change())
        && !target_lane_seq.is_empty()
        && ego_lane_seq[0] != *target_lane_seq.last().expect("non-empty")
    {
        let lane = target_lane_seq.last().expect("non-empty").clone();
        let lane_ref = road.lane(&lane)?;
        let mut points = Vec::with_capacity(ego_traj.points.len());
        for p in &ego_traj.points {
            let (s_rel, v, _) = ego_profile.at(p.t);
            let s = EGO_START_S + s_rel;
            let q = lane_ref.point_at(s);
            points.push(TrajectoryPoint {
                t: p.t,
                x: q[0],
                y: q[1],
                v,
                heading: lane_ref.heading_at(s),
            });
        }
        (
            ObjectTrajectory {
                actor: "ego".to_string(),
                points,
            },
            ego_shifts,
            vec![lane],
        )
    } else {
        (ego_traj, ego_shifts, ego_lane_seq)
    };

    let v_max = ego_profile
        .pieces
        .iter()
        .map(|&(_, v, _, _)| v)
        .fold(ego_v0, f64::max)
        + 0.5;
    let directives = ego_shifts
        .iter()
        .map(|sh| {
            let (s_rel, _, _) = ego_profile.at(sh.t0);
            LaneChangeDirective {
                at_s: EGO_START_S + s_rel,
                side: if road
                    .adjacent_lane(&sh.from, true)
                    .is_some_and(|l| l.id == sh.to)
                {
                    LaneSide::Left
                } else {
                    LaneSide::Right
                },
                duration: sh.t1 - sh.t0,
            }
        })
        .collect();

    Ok(TestScenario {
        id: String::new(),
        class_ref: class.class.name.clone(),
        road: road.clone(),
        objects,
        ego: EgoAssignment {
            route: ego_lane_seq,
            v_max,
            initial_s: EGO_START_S,
            initial_v: ego_v0,
            directives,
        },
        nominal_ego: ego_traj,
        importance_weight: 1.0,
        seed: 0,
        horizon,
        variant: "nominal".to_string(),
        faults: None,
        slot_params: slot_rows.to_vec(),
    })
}

/// Nearest lane of the road at a point; used when projecting trajectories
/// back into log form.
fn nearest_lane_index(road: &RoadNetwork, x: f64, y: f64) -> i32 {
    let mut lane_ids: Vec<usize> = (0..road.lanes.len()).collect();
    lane_ids.sort_by(|&a, &b| road.lanes[a].id.cmp(&road.lanes[b].id));
    let mut best = (0, f64::INFINITY);
    for (ordinal, &li) in lane_ids.iter().enumerate() {
        let lane = &road.lanes[li];
        let d = lane
            .centerline
            .windows(2)
            .map(|w| point_segment_distance([x, y], w[0], w[1]))
            .fold(f64::INFINITY, f64::min);
        if d < best.1 {
            best = (ordinal, d);
        }
    }
    best.0 as i32
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let c = [a[0] + t * ab[0], a[1] + t * ab[1]];
    ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt()
}

fn trajectory_to_track(
    traj: &ObjectTrajectory,
    road: &RoadNetwork,
    is_ego: bool,
) -> ActorTrack {
    let pts = &traj.points;
    let samples = pts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (i0, i1) = if i == 0 {
                (0, 1.min(pts.len() - 1))
            } else if i == pts.len() - 1 {
                (pts.len() - 2, pts.len() - 1)
            } else {
                (i - 1, i + 1)
            };
            let span = (pts[i1].t - pts[i0].t).max(1e-12);
            Sample {
                t: p.t,
                x: p.x,
                y: p.y,
                v: p.v,
                a: (pts[i1].v - pts[i0].v) / span,
                heading: p.heading,
                lane_index: nearest_lane_index(road, p.x, p.y),
            }
        })
        .collect();
    ActorTrack {
        actor: traj.actor.clone(),
        is_ego,
        samples,
    }
}

/// Projects a test scenario back into driving-log form (finite-difference
/// acceleration, nearest-lane index), so the decomposition and mining
/// machinery can be run on synthesized trajectories.
pub fn to_driving_log(ts: &TestScenario, dt: f64) -> DrivingLog {
    let mut actors = vec![trajectory_to_track(&ts.nominal_ego, &ts.road, true)];
    for obj in &ts.objects {
        actors.push(trajectory_to_track(obj, &ts.road, false));
    }
    DrivingLog {
        dt,
        source_id: format!("synth-{}", ts.id),
        actors,
        metadata: Default::default(),
    }
}

/// Draws `n` feasible test scenarios from the class densities with
/// tail-inflation `c`, each carrying its importance weight and a sub-seed
/// derived from the batch seed. Infeasible draws are rejected and redrawn,
/// up to `100 * n` attempts.
pub fn generate_batch(
    class: &ClassDocument,
    road_query: &TagQuery,
    library: &[RoadNetwork],
    taxonomy: &Taxonomy,
    n: usize,
    c: f64,
    seed: u64,
    cfg: &SynthesisConfig,
) -> Result<Vec<TestScenario>, GenError> {
    let road = select_road(road_query, library, taxonomy)?;
    for (j, slot) in class.slots.iter().enumerate() {
        if slot.density.is_none() {
            return Err(GenError::MissingDensity { slot: j });
        }
    }
    let budget = 100 * n;
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n && attempts < budget {
        let sub_seed = derive_seed(seed, attempts as u64);
        attempts += 1;
        let mut rows = Vec::with_capacity(class.slots.len());
        let mut weight = 1.0;
        for (j, slot) in class.slots.iter().enumerate() {
            let density = slot.density.as_ref().expect("checked above");
            let draw = density
                .sample_tail_biased(1, c, derive_seed(sub_seed, j as u64))
                .remove(0);
            weight *= draw.weight;
            rows.push(draw.point);
        }
        match synthesize_trajectories(class, &rows, road, cfg) {
            Ok(mut ts) => {
                ts.importance_weight = weight;
                ts.seed = sub_seed;
                out.push(ts.with_identity()?);
            }
            Err(GenError::InfeasibleParameters(_)) | Err(GenError::OffRoad(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    if out.len() < n {
        return Err(GenError::RejectionBudgetExhausted {
            wanted: n,
            got: out.len(),
            attempts,
        });
    }
    Ok(out)
}

/// Criticality screening and fault-variant expansion configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    /// Scenarios whose nominal minimum TTC exceeds this are discarded \[s\].
    pub ttc_threshold: f64,
    /// Fault kinds to append as variants of each retained scenario.
    pub fault_kinds: Vec<FaultKind>,
    /// Fault window opens this long before the critical instant \[s\].
    pub fault_lead: f64,
    /// ... and closes this long after it \[s\].
    pub fault_lag: f64,
    /// Forward-range bias magnitude for bias faults \[m\].
    pub bias_magnitude: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            ttc_threshold: 10.0,
            fault_kinds: vec![FaultKind::Blackout],
            fault_lead: 3.0,
            fault_lag: 2.0,
            bias_magnitude: 5.0,
        }
    }
}

/// Nominal minimum TTC of a scenario (open-loop ego reference vs. object
/// trajectories) and the instant it occurs. `None` when never closing on a
/// same-lane forward object.
pub fn nominal_min_ttc(ts: &TestScenario) -> Option<(f64, f64)> {
    const STEP: f64 = 0.05;
    const EGO_LENGTH: f64 = 4.5;
    let mut best: Option<(f64, f64)> = None;
    let mut t = 0.0;
    while t <= ts.horizon {
        let e = ts.nominal_ego.state_at(t);
        for obj in &ts.objects {
            let o = obj.state_at(t);
            let (cos_h, sin_h) = (e.heading.cos(), e.heading.sin());
            let rel_x = cos_h * (o.x - e.x) + sin_h * (o.y - e.y);
            let rel_y = -sin_h * (o.x - e.x) + cos_h * (o.y - e.y);
            let gap = rel_x - EGO_LENGTH;
            let closing = e.v - o.v;
            if rel_x > 0.0 && rel_y.abs() < 2.0 && closing > 1e-9 && gap > 0.0 {
                let ttc = gap / closing;
                if best.is_none_or(|(b, _)| ttc < b) {
                    best = Some((ttc, t));
                }
            }
        }
        t += STEP;
    }
    best
}

/// Keeps the safety-critical subset of the batch (nominal minimum TTC at or
/// below the threshold) and appends one fault-injection variant per
/// configured fault kind to each retained scenario.
pub fn verify_scenarios(
    batch: &[TestScenario],
    cfg: &VerifyConfig,
) -> Result<Vec<TestScenario>, GenError> {
    let mut out = Vec::new();
    for ts in batch {
        let Some((ttc, t_crit)) = nominal_min_ttc(ts) else {
            continue;
        };
        if ttc > cfg.ttc_threshold {
            continue;
        }
        out.push(ts.clone());
        for kind in &cfg.fault_kinds {
            let mut variant = ts.clone();
            variant.variant = kind.to_string();
            variant.faults = Some(FaultInjection {
                kind: *kind,
                t_start: (t_crit - cfg.fault_lead).max(0.0),
                t_end: (t_crit + cfg.fault_lag).min(ts.horizon),
                magnitude: cfg.bias_magnitude,
            });
            out.push(variant.with_identity()?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decompose::{decompose_log, ModeThresholds};
    use crate::density::ParameterDensity;
    use crate::mining::{ClassDocument, SlotData};
    use crate::road::builtin_library;
    use crate::scenario::{ActivityParams, ScenarioClass};
    use crate::tags::default_taxonomy;

    fn lon_class(mode: Mode, rows: Vec<Vec<f64>>) -> ClassDocument {
        let field_names: Vec<String> = ActivityParams::field_names(mode)
            .iter()
            .map(|s| s.to_string())
            .collect();
        let density = ParameterDensity::fit(field_names.clone(), rows.clone()).ok();
        ClassDocument {
            class: ScenarioClass {
                name: "test-class".to_string(),
                required_tags: Default::default(),
                activity_pattern: vec![(ActorRole::Target, Channel::Longitudinal, mode)],
            },
            pattern: "lead-braking".to_string(),
            scenario_ids: vec![],
            slots: vec![SlotData {
                role: ActorRole::Target,
                channel: Channel::Longitudinal,
                mode,
                field_names,
                rows,
                density,
            }],
        }
    }

    fn braking_rows() -> Vec<Vec<f64>> {
        // Columns: delta_v, duration, v_start.
        vec![
            vec![-8.0, 4.0, 22.0],
            vec![-6.0, 3.0, 20.0],
            vec![-10.0, 5.0, 24.0],
            vec![-7.0, 3.5, 21.0],
        ]
    }

    #[test]
    fn braking_slot_travels_closed_form_distance() {
        let class = lon_class(Mode::Braking, braking_rows());
        let road = &builtin_library()[0];
        let cfg = SynthesisConfig::default();
        let ts =
            synthesize_trajectories(&class, &[vec![-10.0, 4.0, 20.0]], road, &cfg).unwrap();
        let obj = &ts.objects[0];
        // During [lead_in, lead_in + 4]: s = v0 t + a t^2 / 2 = 80 - 20 = 60 m.
        let p0 = obj.state_at(cfg.lead_in);
        let p1 = obj.state_at(cfg.lead_in + 4.0);
        let travelled = ((p1.x - p0.x).powi(2) + (p1.y - p0.y).powi(2)).sqrt();
        assert!((travelled - 60.0).abs() < 1e-6, "travelled {travelled}");
        assert!((p1.v - 10.0).abs() < 1e-9);
    }

    #[test]
    fn lane_change_midpoint_is_half_displacement() {
        let mode = Mode::LaneChangeLeft;
        let field_names: Vec<String> = ActivityParams::field_names(mode)
            .iter()
            .map(|s| s.to_string())
            .collect();
        let rows = vec![vec![4.0, 3.5], vec![3.0, 3.4], vec![5.0, 3.6]];
        let class = ClassDocument {
            class: ScenarioClass {
                name: "lc".to_string(),
                required_tags: Default::default(),
                activity_pattern: vec![(ActorRole::Target, Channel::Lateral, mode)],
            },
            pattern: "cut-in".to_string(),
            scenario_ids: vec![],
            slots: vec![SlotData {
                role: ActorRole::Target,
                channel: Channel::Lateral,
                mode,
                field_names: field_names.clone(),
                rows: rows.clone(),
                density: ParameterDensity::fit(field_names, rows).ok(),
            }],
        };
        let road = &builtin_library()[0];
        let cfg = SynthesisConfig::default();
        let ts = synthesize_trajectories(&class, &[vec![4.0, 3.5]], road, &cfg).unwrap();
        let obj = &ts.objects[0];
        let y0 = obj.state_at(cfg.lead_in).y;
        let y_mid = obj.state_at(cfg.lead_in + 2.0).y;
        let y1 = obj.state_at(cfg.lead_in + 4.0).y;
        assert!((y1 - y0).abs() > 3.0, "lane change moved {} m", y1 - y0);
        assert!(
            ((y_mid - y0) - 0.5 * (y1 - y0)).abs() < 1e-9,
            "quintic midpoint symmetry"
        );
    }

    #[test]
    fn excessive_acceleration_rejected() {
        let class = lon_class(Mode::Braking, braking_rows());
        let road = &builtin_library()[0];
        let err = synthesize_trajectories(
            &class,
            &[vec![-24.0, 2.0, 20.0]],
            road,
            &SynthesisConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, GenError::InfeasibleParameters(_)));
    }

    #[test]
    fn velocity_is_continuous_at_joints() {
        let class = lon_class(Mode::Braking, braking_rows());
        let road = &builtin_library()[0];
        let cfg = SynthesisConfig::default();
        let ts =
            synthesize_trajectories(&class, &[vec![-9.0, 4.5, 23.0]], road, &cfg).unwrap();
        let pts = &ts.objects[0].points;
        for w in pts.windows(2) {
            let dv = (w[1].v - w[0].v).abs();
            assert!(dv <= MAX_SYNTH_ACCEL * cfg.dt + 1e-9, "v jump {dv}");
            let ds = ((w[1].x - w[0].x).powi(2) + (w[1].y - w[0].y).powi(2)).sqrt();
            assert!(ds <= (w[0].v.max(w[1].v) + 2.0) * cfg.dt, "x jump {ds}");
        }
    }

    #[test]
    fn synthesized_braking_decomposes_back() {
        let class = lon_class(Mode::Braking, braking_rows());
        let road = &builtin_library()[0];
        let cfg = SynthesisConfig::default();
        let row = vec![-10.0, 4.0, 20.0];
        let ts = synthesize_trajectories(&class, &[row.clone()], road, &cfg).unwrap();
        let log = to_driving_log(&ts, cfg.dt);
        let decomp = decompose_log(&log, &ModeThresholds::default()).unwrap();
        let braking: Vec<_> = decomp
            .activities_of("target", Channel::Longitudinal)
            .into_iter()
            .filter(|a| a.mode == Mode::Braking)
            .collect();
        assert_eq!(braking.len(), 1);
        let p = &braking[0].params;
        assert!((p.duration().unwrap() - 4.0).abs() <= 2.0 * cfg.dt);
        assert!((p.v_start().unwrap() - 20.0).abs() <= 0.1);
        assert!((p.delta_v().unwrap() + 10.0).abs() <= 0.1);
    }

    #[test]
    fn batch_generation_is_reproducible_and_weighted() {
        let class = lon_class(Mode::Braking, braking_rows());
        let library = builtin_library();
        let taxonomy = default_taxonomy();
        let q = TagQuery::tag("road", "motorway");
        let cfg = SynthesisConfig::default();
        let a = generate_batch(&class, &q, &library, &taxonomy, 5, 2.0, 42, &cfg).unwrap();
        let b = generate_batch(&class, &q, &library, &taxonomy, 5, 2.0, 42, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        for ts in &a {
            assert!(ts.importance_weight > 0.0);
            assert!(!ts.id.is_empty());
            // Weight oracle: product of per-slot density ratios.
            let slot = &class.slots[0];
            let d = slot.density.as_ref().unwrap();
            let expected = d.eval(&ts.slot_params[0]) / d.eval_proposal(&ts.slot_params[0], 2.0);
            assert!((ts.importance_weight - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn infeasible_training_data_exhausts_budget() {
        // All training rows imply ~12 m/s^2.
        let rows = vec![
            vec![-24.0, 2.0, 30.0],
            vec![-25.0, 2.0, 31.0],
            vec![-23.0, 1.9, 30.0],
        ];
        let class = lon_class(Mode::Braking, rows);
        let library = builtin_library();
        let taxonomy = default_taxonomy();
        let q = TagQuery::tag("road", "motorway");
        let err = generate_batch(
            &class,
            &q,
            &library,
            &taxonomy,
            3,
            1.0,
            7,
            &SynthesisConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, GenError::RejectionBudgetExhausted { .. }));
    }

    #[test]
    fn verify_retains_critical_and_appends_fault_variant() {
        let class = lon_class(Mode::Braking, braking_rows());
        let road = &builtin_library()[0];
        let cfg = SynthesisConfig::default();
        let ts = synthesize_trajectories(&class, &[vec![-12.0, 4.0, 20.0]], road, &cfg)
            .unwrap()
            .with_identity()
            .unwrap();
        let (ttc, _) = nominal_min_ttc(&ts).expect("lead braking ahead of ego must close");
        assert!(ttc.is_finite());
        let vcfg = VerifyConfig {
            ttc_threshold: ttc + 1.0,
            ..VerifyConfig::default()
        };
        let verified = verify_scenarios(std::slice::from_ref(&ts), &vcfg).unwrap();
        assert_eq!(verified.len(), 2);
        assert_eq!(verified[0].variant, "nominal");
        assert_eq!(verified[1].variant, "blackout");
        assert!(verified[1].faults.is_some());
        assert_ne!(verified[0].id, verified[1].id);

        // Tighter threshold discards everything.
        let strict = VerifyConfig {
            ttc_threshold: ttc * 0.5,
            ..VerifyConfig::default()
        };
        assert!(verify_scenarios(std::slice::from_ref(&ts), &strict)
            .unwrap()
            .is_empty());
    }
}
