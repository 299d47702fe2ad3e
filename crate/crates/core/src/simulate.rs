//! Closed-loop execution of test scenarios against a modeled vehicle under
//! test: ego-frame transformation, noisy sensor with fault injection, a
//! reference time-gap controller with emergency braking, point-mass ego
//! dynamics, and KPI computation.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::genscen::{quintic_step, LaneSide, TestScenario};
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("non-finite state at t={0}")]
    NumericalDivergence(f64),
    #[error("scenario references unknown lane '{0}'")]
    UnknownLane(String),
}

/// Planar state of the vehicle under test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub v: f64,
    pub a: f64,
}

/// Perception model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    /// Detection range \[m\].
    pub range: f64,
    /// Half field of view about the heading \[rad\].
    pub fov: f64,
    pub pos_noise_sigma: f64,
    pub vel_noise_sigma: f64,
    pub dropout_prob: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            range: 150.0,
            fov: 60f64.to_radians(),
            pos_noise_sigma: 0.2,
            vel_noise_sigma: 0.2,
            dropout_prob: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    /// Sensor reports nothing during the fault window.
    Blackout,
    /// Sensor repeats the last pre-fault detections.
    Stuck,
    /// Forward range biased by `magnitude` meters.
    Bias,
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FaultKind::Blackout => "blackout",
            FaultKind::Stuck => "stuck",
            FaultKind::Bias => "bias",
        })
    }
}

/// A component failure injected over a time window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultInjection {
    pub kind: FaultKind,
    pub t_start: f64,
    pub t_end: f64,
    /// Bias magnitude \[m\]; unused by blackout/stuck.
    pub magnitude: f64,
}

impl FaultInjection {
    pub fn active(&self, t: f64) -> bool {
        t >= self.t_start && t < self.t_end
    }
}

/// One sensed object, in the ego frame (x forward, y left).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub actor: String,
    pub x: f64,
    pub y: f64,
    /// Estimated absolute speed of the object \[m/s\].
    pub v: f64,
}

/// Rotates and translates a world-frame position/velocity into the ego
/// frame (translation by -(x, y), rotation by -heading).
pub fn to_ego_frame(ego: &EgoState, x: f64, y: f64, vx: f64, vy: f64) -> (f64, f64, f64, f64) {
    let (sin_h, cos_h) = ego.heading.sin_cos();
    let (dx, dy) = (x - ego.x, y - ego.y);
    (
        cos_h * dx + sin_h * dy,
        -sin_h * dx + cos_h * dy,
        cos_h * vx + sin_h * vy,
        -sin_h * vx + cos_h * vy,
    )
}

/// Ground-truth world state of one object at a step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub actor: String,
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub heading: f64,
}

/// Stateful sensor: keeps the last pre-fault detections for stuck faults.
#[derive(Debug, Clone)]
pub struct Sensor {
    pub cfg: SensorConfig,
    pub fault: Option<FaultInjection>,
    last_healthy: Vec<Detection>,
}

impl Sensor {
    pub fn new(cfg: SensorConfig, fault: Option<FaultInjection>) -> Self {
        Self {
            cfg,
            fault,
            last_healthy: Vec::new(),
        }
    }

    /// Range/FOV gating, dropout, Gaussian noise, then fault application.
    pub fn sense<R: Rng>(
        &mut self,
        ego: &EgoState,
        objects: &[ObjectState],
        t: f64,
        rng: &mut R,
    ) -> Vec<Detection> {
        let pos_noise = Normal::new(0.0, self.cfg.pos_noise_sigma.max(0.0)).expect("sigma >= 0");
        let vel_noise = Normal::new(0.0, self.cfg.vel_noise_sigma.max(0.0)).expect("sigma >= 0");
        let mut detections = Vec::new();
        for obj in objects {
            let (vx, vy) = (obj.v * obj.heading.cos(), obj.v * obj.heading.sin());
            let (rx, ry, _, _) = to_ego_frame(ego, obj.x, obj.y, vx, vy);
            let dist = (rx * rx + ry * ry).sqrt();
            if dist > self.cfg.range || ry.atan2(rx).abs() > self.cfg.fov {
                continue;
            }
            if rng.random::<f64>() < self.cfg.dropout_prob {
                continue;
            }
            detections.push(Detection {
                actor: obj.actor.clone(),
                x: rx + pos_noise.sample(rng),
                y: ry + pos_noise.sample(rng),
                v: (obj.v + vel_noise.sample(rng)).max(0.0),
            });
        }
        match self.fault {
            Some(f) if f.active(t) => match f.kind {
                FaultKind::Blackout => Vec::new(),
                FaultKind::Stuck => self.last_healthy.clone(),
                FaultKind::Bias => {
                    for d in &mut detections {
                        d.x += f.magnitude;
                    }
                    detections
                }
            },
            _ => {
                self.last_healthy = detections.clone();
                detections
            }
        }
    }
}

/// Reference controller parameters: constant time-gap car following with
/// speed tracking and emergency braking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerParams {
    /// Standstill gap \[m\].
    pub d0: f64,
    /// Time gap \[s\].
    pub time_gap: f64,
    /// Gap error gain \[1/s^2\].
    pub k_gap: f64,
    /// Speed error gain \[1/s\].
    pub k_speed: f64,
    pub accel_min: f64,
    pub accel_max: f64,
    /// Estimated-TTC threshold for emergency braking \[s\].
    pub aeb_ttc: f64,
}

impl Default for ControllerParams {
    fn default() -> Self {
        Self {
            d0: 2.0,
            time_gap: 1.5,
            k_gap: 0.3,
            k_speed: 0.8,
            accel_min: -8.0,
            accel_max: 2.0,
            aeb_ttc: 1.2,
        }
    }
}

/// Vehicle footprint used for gap and collision computations.
pub const VEHICLE_LENGTH: f64 = 4.5;
pub const VEHICLE_WIDTH: f64 = 1.8;
/// Lateral half-window for "same lane" classification in the ego frame \[m\].
pub const SAME_LANE_HALF_WIDTH: f64 = 2.0;

/// Commanded acceleration from the sensed environment: car following
/// against the nearest same-lane forward detection, free-speed tracking
/// toward `v_max` otherwise, overridden by emergency braking when the
/// estimated TTC falls below the threshold.
pub fn ego_controller(
    detections: &[Detection],
    v: f64,
    v_max: f64,
    p: &ControllerParams,
) -> f64 {
    let lead = detections
        .iter()
        .filter(|d| d.x > 0.0 && d.y.abs() < SAME_LANE_HALF_WIDTH)
        .min_by(|a, b| a.x.partial_cmp(&b.x).expect("finite detections"));
    let free = p.k_speed * (v_max - v);
    let mut cmd = match lead {
        None => free,
        Some(d) => {
            let gap = d.x - VEHICLE_LENGTH;
            let closing = v - d.v;
            if closing > 0.0 && gap > 0.0 && gap / closing < p.aeb_ttc {
                return p.accel_min;
            }
            if gap <= 0.0 {
                return p.accel_min;
            }
            let desired = p.d0 + p.time_gap * v;
            (p.k_gap * (gap - desired) + p.k_speed * (d.v - v)).min(free)
        }
    };
    cmd = cmd.clamp(p.accel_min, p.accel_max);
    cmd
}

/// Hard and soft KPI thresholds. Collision is always a hard failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpiThresholds {
    /// Minimum acceptable TTC \[s\] (hard).
    pub min_ttc_pass: f64,
    /// Comfort deceleration bound \[m/s^2\] (soft flag).
    pub comfort_decel: f64,
}

impl Default for KpiThresholds {
    fn default() -> Self {
        Self {
            min_ttc_pass: 2.0,
            comfort_decel: 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpiReport {
    pub scenario_id: String,
    /// None encodes "never closing" (infinite TTC).
    pub min_ttc: Option<f64>,
    pub min_distance: f64,
    pub collision: bool,
    pub max_decel: f64,
    pub v_max_violation: bool,
    pub ttc_pass: bool,
    pub collision_pass: bool,
    pub comfort_pass: bool,
    /// Overall: all hard criteria pass.
    pub pass: bool,
}

/// One step of the ground-truth trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: f64,
    pub ego: EgoState,
    pub objects: Vec<ObjectState>,
    pub detections: usize,
    pub command: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub scenario_id: String,
    pub variant: String,
    pub seed: u64,
    pub kpis: KpiReport,
    pub steps: usize,
    pub sensor: SensorConfig,
    pub controller: ControllerParams,
    pub thresholds: KpiThresholds,
    pub dt: f64,
}

// ---- rectangle geometry ----

pub fn rect_corners(x: f64, y: f64, heading: f64, length: f64, width: f64) -> [[f64; 2]; 4] {
    let (s, c) = heading.sin_cos();
    let (hl, hw) = (length / 2.0, width / 2.0);
    let corner = |dx: f64, dy: f64| [x + c * dx - s * dy, y + s * dx + c * dy];
    [
        corner(hl, hw),
        corner(hl, -hw),
        corner(-hl, -hw),
        corner(-hl, hw),
    ]
}

fn project(corners: &[[f64; 2]; 4], axis: [f64; 2]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in corners {
        let d = p[0] * axis[0] + p[1] * axis[1];
        lo = lo.min(d);
        hi = hi.max(d);
    }
    (lo, hi)
}

/// Separating-axis overlap test for two oriented rectangles.
pub fn rects_overlap(a: &[[f64; 2]; 4], b: &[[f64; 2]; 4]) -> bool {
    for rect in [a, b] {
        for i in 0..2 {
            let edge = [rect[i + 1][0] - rect[i][0], rect[i + 1][1] - rect[i][1]];
            let axis = [-edge[1], edge[0]];
            let (a_lo, a_hi) = project(a, axis);
            let (b_lo, b_hi) = project(b, axis);
            if a_hi < b_lo || b_hi < a_lo {
                return false;
            }
        }
    }
    true
}

fn segment_distance(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> f64 {
    fn point_seg(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
        let ab = [b[0] - a[0], b[1] - a[1]];
        let len2 = ab[0] * ab[0] + ab[1] * ab[1];
        let t = if len2 > 0.0 {
            (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let c = [a[0] + t * ab[0], a[1] + t * ab[1]];
        ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt()
    }
    fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
        (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    }
    // Proper intersection means distance zero.
    let (d1, d2) = (orient(p1, p2, q1), orient(p1, p2, q2));
    let (d3, d4) = (orient(q1, q2, p1), orient(q1, q2, p2));
    if d1 * d2 < 0.0 && d3 * d4 < 0.0 {
        return 0.0;
    }
    point_seg(p1, q1, q2)
        .min(point_seg(p2, q1, q2))
        .min(point_seg(q1, p1, p2))
        .min(point_seg(q2, p1, p2))
}

/// Minimum distance between two oriented rectangles (0 when overlapping).
pub fn rect_distance(a: &[[f64; 2]; 4], b: &[[f64; 2]; 4]) -> f64 {
    if rects_overlap(a, b) {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for i in 0..4 {
        for j in 0..4 {
            best = best.min(segment_distance(
                a[i],
                a[(i + 1) % 4],
                b[j],
                b[(j + 1) % 4],
            ));
        }
    }
    best
}

/// KPI extraction from a ground-truth trace.
pub fn compute_kpis(
    trace: &[TraceStep],
    scenario_id: &str,
    v_max: f64,
    th: &KpiThresholds,
) -> KpiReport {
    let mut min_ttc: Option<f64> = None;
    let mut min_distance = f64::INFINITY;
    let mut collision = false;
    let mut max_decel: f64 = 0.0;
    let mut v_max_violation = false;
    for step in trace {
        let ego = &step.ego;
        let ego_rect = rect_corners(ego.x, ego.y, ego.heading, VEHICLE_LENGTH, VEHICLE_WIDTH);
        max_decel = max_decel.max(-ego.a);
        if ego.v > v_max + 0.1 {
            v_max_violation = true;
        }
        for obj in &step.objects {
            let (rx, ry, _, _) = to_ego_frame(ego, obj.x, obj.y, 0.0, 0.0);
            let gap = rx - VEHICLE_LENGTH;
            let closing = ego.v - obj.v;
            if rx > 0.0 && ry.abs() < SAME_LANE_HALF_WIDTH && closing > 0.0 && gap > 0.0 {
                let ttc = gap / closing;
                if min_ttc.is_none_or(|m| ttc < m) {
                    min_ttc = Some(ttc);
                }
            }
            let obj_rect =
                rect_corners(obj.x, obj.y, obj.heading, VEHICLE_LENGTH, VEHICLE_WIDTH);
            let d = rect_distance(&ego_rect, &obj_rect);
            min_distance = min_distance.min(d);
            if d == 0.0 {
                collision = true;
            }
        }
    }
    if min_distance == f64::INFINITY {
        min_distance = f64::MAX;
    }
    let ttc_pass = min_ttc.is_none_or(|t| t >= th.min_ttc_pass);
    let collision_pass = !collision;
    let comfort_pass = max_decel <= th.comfort_decel;
    KpiReport {
        scenario_id: scenario_id.to_string(),
        min_ttc,
        min_distance,
        collision,
        max_decel,
        v_max_violation,
        ttc_pass,
        collision_pass,
        comfort_pass,
        pass: ttc_pass && collision_pass,
    }
}

/// Ego lateral bookkeeping during a scripted lane change.
struct LaneChangeState {
    from: String,
    to: String,
    t0: f64,
    duration: f64,
}

/// Fixed-step closed-loop run of one scenario. Deterministic for a given
/// (scenario, configs, seed); terminates at the horizon or on collision.
pub fn run_scenario(
    ts: &TestScenario,
    sensor_cfg: &SensorConfig,
    ctrl: &ControllerParams,
    th: &KpiThresholds,
    dt: f64,
    seed: u64,
) -> Result<(SimulationResult, Vec<TraceStep>), SimError> {
    let run_seed = derive_seed(seed, ts.seed);
    let mut rng = rng_from_seed(run_seed);
    let mut sensor = Sensor::new(sensor_cfg.clone(), ts.faults);

    let road = &ts.road;
    let first_lane = ts
        .ego
        .route
        .first()
        .ok_or_else(|| SimError::UnknownLane("<empty route>".to_string()))?;
    road.lane(first_lane)
        .map_err(|_| SimError::UnknownLane(first_lane.clone()))?;

    let mut s = ts.ego.initial_s;
    let mut v = ts.ego.initial_v;
    let mut current_lane = first_lane.clone();
    let mut pending: Vec<_> = ts.ego.directives.clone();
    pending.sort_by(|a, b| a.at_s.partial_cmp(&b.at_s).expect("finite directive"));
    let mut active_lc: Option<LaneChangeState> = None;

    let n_steps = (ts.horizon / dt).round() as usize;
    let mut trace = Vec::with_capacity(n_steps + 1);
    let mut last_a = 0.0;

    for step in 0..=n_steps {
        let t = step as f64 * dt;

        // Start a scripted lane change when its trigger position is reached.
        if active_lc.is_none() {
            if let Some(idx) = pending.iter().position(|d| s >= d.at_s) {
                let d = pending.remove(idx);
                let left = d.side == LaneSide::Left;
                if let Some(target) = road.adjacent_lane(&current_lane, left) {
                    active_lc = Some(LaneChangeState {
                        from: current_lane.clone(),
                        to: target.id.clone(),
                        t0: t,
                        duration: d.duration,
                    });
                }
            }
        }
        if let Some(lc) = &active_lc {
            if t >= lc.t0 + lc.duration {
                current_lane = lc.to.clone();
                active_lc = None;
            }
        }

        // Ego pose from lane geometry plus the quintic lateral blend.
        let (x, y, heading) = match &active_lc {
            None => {
                let lane = road
                    .lane(&current_lane)
                    .map_err(|_| SimError::UnknownLane(current_lane.clone()))?;
                let p = lane.point_at(s);
                (p[0], p[1], lane.heading_at(s))
            }
            Some(lc) => {
                let from = road
                    .lane(&lc.from)
                    .map_err(|_| SimError::UnknownLane(lc.from.clone()))?;
                let to = road
                    .lane(&lc.to)
                    .map_err(|_| SimError::UnknownLane(lc.to.clone()))?;
                let q = quintic_step((t - lc.t0) / lc.duration);
                let pf = from.point_at(s);
                let pt = to.point_at(s);
                let hf = from.heading_at(s);
                (
                    pf[0] + q * (pt[0] - pf[0]),
                    pf[1] + q * (pt[1] - pf[1]),
                    hf,
                )
            }
        };

        let ego = EgoState {
            x,
            y,
            heading,
            v,
            a: last_a,
        };
        if !(ego.x.is_finite() && ego.y.is_finite() && ego.v.is_finite()) {
            return Err(SimError::NumericalDivergence(t));
        }

        let objects: Vec<ObjectState> = ts
            .objects
            .iter()
            .map(|obj| {
                let p = obj.state_at(t);
                ObjectState {
                    actor: obj.actor.clone(),
                    x: p.x,
                    y: p.y,
                    v: p.v,
                    heading: p.heading,
                }
            })
            .collect();

        let detections = sensor.sense(&ego, &objects, t, &mut rng);
        let cmd = ego_controller(&detections, v, ts.ego.v_max, ctrl);

        trace.push(TraceStep {
            t,
            ego,
            objects: objects.clone(),
            detections: detections.len(),
            command: cmd,
        });

        // Stop at first collision.
        let ego_rect = rect_corners(x, y, heading, VEHICLE_LENGTH, VEHICLE_WIDTH);
        let collided = objects.iter().any(|o| {
            rects_overlap(
                &ego_rect,
                &rect_corners(o.x, o.y, o.heading, VEHICLE_LENGTH, VEHICLE_WIDTH),
            )
        });
        if collided {
            break;
        }

        // Semi-implicit Euler; no reverse driving.
        let a = cmd.max(-v / dt);
        v += a * dt;
        s += v * dt;
        last_a = a;
    }

    let kpis = compute_kpis(&trace, &ts.id, ts.ego.v_max, th);
    Ok((
        SimulationResult {
            scenario_id: ts.id.clone(),
            variant: ts.variant.clone(),
            seed: run_seed,
            kpis,
            steps: trace.len(),
            sensor: sensor_cfg.clone(),
            controller: ctrl.clone(),
            thresholds: th.clone(),
            dt,
        },
        trace,
    ))
}

/// Runs a batch in parallel. Result order is (scenario id, variant),
/// independent of scheduling.
pub fn run_batch(
    batch: &[TestScenario],
    sensor_cfg: &SensorConfig,
    ctrl: &ControllerParams,
    th: &KpiThresholds,
    dt: f64,
    seed: u64,
) -> Result<Vec<SimulationResult>, SimError> {
    let mut results = batch
        .par_iter()
        .map(|ts| run_scenario(ts, sensor_cfg, ctrl, th, dt, seed).map(|(r, _)| r))
        .collect::<Result<Vec<_>, _>>()?;
    results.sort_by(|a, b| {
        a.scenario_id
            .cmp(&b.scenario_id)
            .then(a.variant.cmp(&b.variant))
    });
    Ok(results)
}

/// Per-step trace dump for plotting.
pub fn trace_csv(trace: &[TraceStep]) -> String {
    let mut out = String::from("t,ego_x,ego_y,ego_v,ego_a,detections,command\n");
    for s in trace {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.t, s.ego.x, s.ego.y, s.ego.v, s.ego.a, s.detections, s.command
        ));
    }
    out
}
