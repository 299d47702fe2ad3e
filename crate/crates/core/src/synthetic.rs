//! Built-in synthetic driving logs. The centerpiece is a 30 s, 3-actor
//! re-creation of the classic two-consecutive-overtakes situation: a station
//! wagon overtakes the ego vehicle, then the ego overtakes a slower pickup.
//! The construction is tuned so that the decomposition recovers the designed
//! event times exactly on the 0.1 s grid.

use std::collections::BTreeMap;

use crate::ingest::{ActorTrack, DrivingLog, Sample};

pub const TWO_OVERTAKES_DT: f64 = 0.1;
pub const TWO_OVERTAKES_HORIZON: f64 = 30.0;
/// Designed boundary between the two mined scenarios \[s\].
pub const TWO_OVERTAKES_BOUNDARY: f64 = 16.0;

const LANE_WIDTH: f64 = 3.5;

/// Lateral ramp between lanes, linear in time. The ramp is shifted half a
/// sample early so that the centrally-differenced lateral velocity crosses
/// the detection threshold exactly at the designed first and last instants.
struct LaneRamp {
    t0: f64,
    t1: f64,
    /// +1 = left (towards +y, decreasing lane index), -1 = right.
    dir: f64,
}

fn lateral_state(ramps: &[LaneRamp], start_lane: i32, t: f64) -> (f64, i32) {
    let base_y = |lane: i32| LANE_WIDTH * (1 - lane) as f64;
    let mut lane = start_lane;
    let mut y = base_y(start_lane);
    for r in ramps {
        let shift = TWO_OVERTAKES_DT / 2.0;
        let u = ((t - (r.t0 - shift)) / (r.t1 - r.t0)).clamp(0.0, 1.0);
        y += r.dir * LANE_WIDTH * u;
        if u >= 0.5 {
            lane -= r.dir as i32;
        }
    }
    (y, lane)
}

/// Piecewise-constant acceleration longitudinal profile.
fn longitudinal_state(x0: f64, v0: f64, pulses: &[(f64, f64, f64)], t: f64) -> (f64, f64, f64) {
    // pulses: (t_on, t_off, a). Assumed disjoint and sorted.
    let mut x = x0;
    let mut v = v0;
    let mut prev = 0.0;
    for &(on, off, a) in pulses {
        if t <= on {
            break;
        }
        x += v * (on - prev);
        prev = on;
        let end = off.min(t);
        let span = end - prev;
        x += v * span + 0.5 * a * span * span;
        v += a * span;
        prev = end;
        if t <= off {
            // The acceleration column is active on [t_on, t_off).
            return (x, v, if t < off { a } else { 0.0 });
        }
    }
    x += v * (t - prev);
    let a = pulses
        .iter()
        .find(|&&(on, off, _)| t >= on && t < off)
        .map(|&(_, _, a)| a)
        .unwrap_or(0.0);
    (x, v, a)
}

fn build_track(
    actor: &str,
    is_ego: bool,
    x0: f64,
    v0: f64,
    pulses: &[(f64, f64, f64)],
    start_lane: i32,
    ramps: &[LaneRamp],
) -> ActorTrack {
    let n = (TWO_OVERTAKES_HORIZON / TWO_OVERTAKES_DT).round() as usize + 1;
    let samples = (0..n)
        .map(|k| {
            let t = k as f64 * TWO_OVERTAKES_DT;
            let (x, v, a) = longitudinal_state(x0, v0, pulses, t);
            let (y, lane_index) = lateral_state(ramps, start_lane, t);
            Sample {
                t,
                x,
                y,
                v,
                a,
                // Road-aligned heading: the vehicle crabs across lanes, so
                // the cross-track drift is visible to the lateral detector.
                heading: 0.0,
                lane_index,
            }
        })
        .collect();
    ActorTrack {
        actor: actor.to_string(),
        is_ego,
        samples,
    }
}

/// The two-consecutive-overtakes log.
///
/// Designed timeline (all instants on the 0.1 s grid):
/// - ego: cruises at 20 m/s in the right lane; accelerates at 2 m/s^2 on
///   [16, 20] to 28 m/s; lane change left [17, 21]; lane change right
///   [24, 28] — overtaking the pickup.
/// - station wagon: starts 40 m behind the ego at 26 m/s; lane change left
///   [3, 6]; lane change right [12, 16] — overtaking the ego. Its lateral
///   channel therefore carries exactly 4 events.
/// - pickup: starts 70 m ahead of the ego, cruising at 17 m/s throughout.
///
/// The first mined scenario (the wagon's overtake) ends at t = 16 s, the
/// instant its merge completes and the ego's own overtake begins.
pub fn two_overtakes_log() -> DrivingLog {
    let ego = build_track(
        "ego",
        true,
        0.0,
        20.0,
        &[(16.0, 20.0, 2.0)],
        1,
        &[
            LaneRamp {
                t0: 17.0,
                t1: 21.0,
                dir: 1.0,
            },
            LaneRamp {
                t0: 24.0,
                t1: 28.0,
                dir: -1.0,
            },
        ],
    );
    let wagon = build_track(
        "station-wagon",
        false,
        -40.0,
        26.0,
        &[],
        1,
        &[
            LaneRamp {
                t0: 3.0,
                t1: 6.0,
                dir: 1.0,
            },
            LaneRamp {
                t0: 12.0,
                t1: 16.0,
                dir: -1.0,
            },
        ],
    );
    let pickup = build_track("pickup", false, 70.0, 17.0, &[], 1, &[]);
    DrivingLog {
        dt: TWO_OVERTAKES_DT,
        source_id: "two-overtakes".to_string(),
        actors: vec![ego, wagon, pickup],
        metadata: BTreeMap::from([
            ("road".to_string(), "motorway-2lane".to_string()),
            ("weather".to_string(), "clear".to_string()),
        ]),
    }
}

/// Single-actor constant-velocity log; mines to zero scenarios.
pub fn constant_velocity_log() -> DrivingLog {
    let ego = build_track("ego", true, 0.0, 15.0, &[], 1, &[]);
    DrivingLog {
        dt: TWO_OVERTAKES_DT,
        source_id: "constant-velocity".to_string(),
        actors: vec![ego],
        metadata: BTreeMap::new(),
    }
}
