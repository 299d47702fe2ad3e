//! Scenario mining: matching activity patterns against decomposed logs,
//! resolving overlapping matches, auto-tagging the mined scenarios, and
//! grouping them into classes with per-slot parameter matrices and fitted
//! densities.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decompose::LogDecomposition;
use crate::density::{DensityError, ParameterDensity};
use crate::ingest::{ActorTrack, DrivingLog};
use crate::scenario::{
    ActivityParams, ActorRole, Channel, Mode, ScenarioClass, ScenarioError, ScenarioRecord,
    StaticEnvironment,
};
use crate::scenario::Activity;
use crate::tags::{TagError, TagRef, Taxonomy};

#[derive(Debug, Error)]
pub enum MiningError {
    #[error("no scenarios to extract a class from")]
    EmptyInput,
    #[error("scenarios mix patterns: expected '{expected}', found '{found}'")]
    HeterogeneousPattern { expected: String, found: String },
    #[error(transparent)]
    Tag(#[from] TagError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Density(#[from] DensityError),
}

/// Targets further away from the ego vehicle than this at the start of a
/// matched activity are not considered part of the ego's environment.
pub const RELEVANCE_RADIUS: f64 = 100.0;

/// Position of the matched actor relative to the ego vehicle (projected on
/// the ego heading) at the start or end of the matched activity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionPredicate {
    Any,
    StartsBehind,
    StartsAhead,
    EndsBehind,
    EndsAhead,
}

/// One slot of an activity pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternElement {
    pub role: ActorRole,
    pub channel: Channel,
    /// Modes accepted in this slot.
    pub modes: Vec<Mode>,
    pub position: PositionPredicate,
}

/// An ordered multi-slot activity pattern. All `Target` slots must be filled
/// by the same target actor; slot start times must be non-decreasing, and
/// the overall match span must not exceed `max_span` seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityPattern {
    pub name: String,
    pub elements: Vec<PatternElement>,
    pub max_span: f64,
}

/// The pattern library shipped with the toolkit.
pub fn default_patterns() -> Vec<ActivityPattern> {
    use Mode::*;
    let target = |modes: Vec<Mode>, channel, position| PatternElement {
        role: ActorRole::Target,
        channel,
        modes,
        position,
    };
    let ego = |modes: Vec<Mode>, channel| PatternElement {
        role: ActorRole::Ego,
        channel,
        modes,
        position: PositionPredicate::Any,
    };
    vec![
        ActivityPattern {
            name: "cut-in".to_string(),
            elements: vec![target(
                vec![LaneChangeLeft, LaneChangeRight],
                Channel::Lateral,
                PositionPredicate::EndsAhead,
            )],
            max_span: 10.0,
        },
        ActivityPattern {
            name: "lead-braking".to_string(),
            elements: vec![target(
                vec![Braking],
                Channel::Longitudinal,
                PositionPredicate::StartsAhead,
            )],
            max_span: 15.0,
        },
        ActivityPattern {
            name: "overtake-of-ego".to_string(),
            elements: vec![
                target(
                    vec![LaneChangeLeft],
                    Channel::Lateral,
                    PositionPredicate::StartsBehind,
                ),
                target(
                    vec![LaneChangeRight],
                    Channel::Lateral,
                    PositionPredicate::EndsAhead,
                ),
            ],
            max_span: 20.0,
        },
        ActivityPattern {
            name: "ego-overtake".to_string(),
            elements: vec![
                ego(vec![Accelerating], Channel::Longitudinal),
                ego(vec![LaneChangeLeft], Channel::Lateral),
                ego(vec![LaneChangeRight], Channel::Lateral),
            ],
            max_span: 15.0,
        },
    ]
}

/// A pattern instance found in a log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternMatch {
    pub pattern: String,
    /// The target actor bound to the pattern's `Target` slots, if any.
    pub target: Option<String>,
    pub t_start: f64,
    pub t_end: f64,
    /// Matched activities in pattern element order.
    pub slots: Vec<Activity>,
}

/// Signed distance of `track` ahead of the ego vehicle at time `t`,
/// projected on the ego heading.
fn relative_position(ego: &ActorTrack, track: &ActorTrack, t: f64, dt: f64) -> f64 {
    let e = ego.interpolate(t, dt);
    let a = track.interpolate(t, dt);
    e.heading.cos() * (a.x - e.x) + e.heading.sin() * (a.y - e.y)
}

fn distance_to_ego(ego: &ActorTrack, track: &ActorTrack, t: f64, dt: f64) -> f64 {
    let e = ego.interpolate(t, dt);
    let a = track.interpolate(t, dt);
    ((a.x - e.x).powi(2) + (a.y - e.y).powi(2)).sqrt()
}

fn position_ok(
    pred: PositionPredicate,
    ego: &ActorTrack,
    track: &ActorTrack,
    activity: &Activity,
    dt: f64,
) -> bool {
    match pred {
        PositionPredicate::Any => true,
        PositionPredicate::StartsBehind => relative_position(ego, track, activity.t_start, dt) < 0.0,
        PositionPredicate::StartsAhead => relative_position(ego, track, activity.t_start, dt) > 0.0,
        PositionPredicate::EndsBehind => relative_position(ego, track, activity.t_end, dt) < 0.0,
        PositionPredicate::EndsAhead => relative_position(ego, track, activity.t_end, dt) > 0.0,
    }
}

fn element_candidates<'a>(
    element: &PatternElement,
    actor_track: &ActorTrack,
    ego: &ActorTrack,
    decomp: &'a LogDecomposition,
    dt: f64,
) -> Vec<&'a Activity> {
    let Some(actor_decomp) = decomp.actors.get(&actor_track.actor) else {
        return Vec::new();
    };
    actor_decomp
        .activities
        .iter()
        .filter(|a| a.channel == element.channel && element.modes.contains(&a.mode))
        .filter(|a| position_ok(element.position, ego, actor_track, a, dt))
        .filter(|a| {
            element.role == ActorRole::Ego
                || distance_to_ego(ego, actor_track, a.t_start, dt) <= RELEVANCE_RADIUS
        })
        .collect()
}

/// Depth-first enumeration of slot assignments with non-decreasing start
/// times and the span bound.
fn enumerate_matches(
    pattern: &ActivityPattern,
    ego: &ActorTrack,
    target: Option<&ActorTrack>,
    decomp: &LogDecomposition,
    dt: f64,
    out: &mut Vec<PatternMatch>,
) {
    let candidates: Vec<Vec<&Activity>> = pattern
        .elements
        .iter()
        .map(|el| {
            let track = match el.role {
                ActorRole::Ego => Some(ego),
                ActorRole::Target => target,
            };
            track
                .map(|tr| element_candidates(el, tr, ego, decomp, dt))
                .unwrap_or_default()
        })
        .collect();
    if candidates.iter().any(|c| c.is_empty()) {
        return;
    }
    let mut chosen: Vec<&Activity> = Vec::with_capacity(pattern.elements.len());
    fn recurse<'a>(
        k: usize,
        candidates: &[Vec<&'a Activity>],
        chosen: &mut Vec<&'a Activity>,
        pattern: &ActivityPattern,
        target: Option<&ActorTrack>,
        out: &mut Vec<PatternMatch>,
    ) {
        if k == candidates.len() {
            let t_start = chosen.iter().map(|a| a.t_start).fold(f64::INFINITY, f64::min);
            let t_end = chosen.iter().map(|a| a.t_end).fold(f64::NEG_INFINITY, f64::max);
            if t_end - t_start <= pattern.max_span {
                out.push(PatternMatch {
                    pattern: pattern.name.clone(),
                    target: target.map(|t| t.actor.clone()),
                    t_start,
                    t_end,
                    slots: chosen.iter().map(|a| (*a).clone()).collect(),
                });
            }
            return;
        }
        for cand in &candidates[k] {
            if let Some(prev) = chosen.last() {
                if cand.t_start < prev.t_start || std::ptr::eq(*prev, *cand) {
                    continue;
                }
            }
            chosen.push(cand);
            recurse(k + 1, candidates, chosen, pattern, target, out);
            chosen.pop();
        }
    }
    recurse(0, &candidates, &mut chosen, pattern, target, out);
}

/// All raw matches of the given patterns in a decomposed log, before
/// overlap resolution.
pub fn find_matches(
    log: &DrivingLog,
    decomp: &LogDecomposition,
    patterns: &[ActivityPattern],
) -> Vec<PatternMatch> {
    let ego = log.ego();
    let mut out = Vec::new();
    for pattern in patterns {
        let needs_target = pattern
            .elements
            .iter()
            .any(|el| el.role == ActorRole::Target);
        if needs_target {
            for track in log.actors.iter().filter(|t| !t.is_ego) {
                enumerate_matches(pattern, ego, Some(track), decomp, log.dt, &mut out);
            }
        } else {
            enumerate_matches(pattern, ego, None, decomp, log.dt, &mut out);
        }
    }
    out
}

/// Keeps a non-overlapping subset of matches: sorted by start time (longer
/// spans win ties), a match is kept when its open interior is disjoint from
/// every already-kept match. Matches may share a boundary instant.
pub fn resolve_overlaps(mut matches: Vec<PatternMatch>) -> Vec<PatternMatch> {
    const EPS: f64 = 1e-9;
    matches.sort_by(|a, b| {
        a.t_start
            .partial_cmp(&b.t_start)
            .expect("finite times")
            .then(
                (b.t_end - b.t_start)
                    .partial_cmp(&(a.t_end - a.t_start))
                    .expect("finite times"),
            )
            .then(a.pattern.cmp(&b.pattern))
    });
    let mut kept: Vec<PatternMatch> = Vec::new();
    for m in matches {
        let overlaps = kept
            .iter()
            .any(|k| m.t_start < k.t_end - EPS && k.t_start < m.t_end - EPS);
        if !overlaps {
            kept.push(m);
        }
    }
    kept
}

/// Tags implied by the matched pattern and by log metadata. Metadata values
/// that do not resolve against the taxonomy are silently skipped.
pub fn auto_tag(
    pattern: &str,
    metadata: &std::collections::BTreeMap<String, String>,
    taxonomy: &Taxonomy,
) -> BTreeSet<TagRef> {
    let mut tags = BTreeSet::new();
    let maneuver = match pattern {
        "cut-in" => Some("cut-in"),
        "lead-braking" => Some("deceleration"),
        "overtake-of-ego" => Some("overtaking"),
        _ => None,
    };
    if let Some(tag) = maneuver {
        tags.insert(TagRef::new("target-maneuver", tag));
    }
    for (key, value) in metadata {
        let candidate = TagRef::new(key.clone(), value.clone());
        if taxonomy.resolve(&candidate).is_ok() {
            tags.insert(candidate);
        }
    }
    tags
}

/// Clips an activity to `[t0, t1]`, rescaling its duration parameter.
fn clip_activity(activity: &Activity, t0: f64, t1: f64) -> Activity {
    let mut clipped = activity.clone();
    clipped.t_start = activity.t_start.max(t0);
    clipped.t_end = activity.t_end.min(t1);
    clipped
        .params
        .0
        .insert("duration".to_string(), clipped.t_end - clipped.t_start);
    clipped
}

fn build_record(
    log: &DrivingLog,
    decomp: &LogDecomposition,
    m: &PatternMatch,
    taxonomy: &Taxonomy,
) -> ScenarioRecord {
    const EPS: f64 = 1e-9;
    let ego = log.ego();
    // The scenario's dynamic environment: every actor that comes within the
    // relevance radius of the ego during the match span.
    let mut actors = vec![ego.actor.clone()];
    for track in log.actors.iter().filter(|t| !t.is_ego) {
        let mut t = m.t_start;
        let relevant = loop {
            if t > m.t_end {
                break false;
            }
            if distance_to_ego(ego, track, t, log.dt) <= RELEVANCE_RADIUS {
                break true;
            }
            t += 1.0;
        };
        if relevant {
            actors.push(track.actor.clone());
        }
    }
    let mut activities = Vec::new();
    let mut events = Vec::new();
    for actor in &actors {
        let Some(d) = decomp.actors.get(actor) else {
            continue;
        };
        for a in &d.activities {
            if a.t_start < m.t_end - EPS && a.t_end > m.t_start + EPS {
                activities.push(clip_activity(a, m.t_start, m.t_end));
            }
        }
        events.extend(
            d.events
                .iter()
                .filter(|e| e.time >= m.t_start - EPS && e.time <= m.t_end + EPS)
                .cloned(),
        );
    }
    activities.sort_by(|a, b| {
        a.t_start
            .partial_cmp(&b.t_start)
            .expect("finite times")
            .then(a.actor.cmp(&b.actor))
            .then(a.channel.cmp(&b.channel))
    });
    events.sort_by(|a, b| {
        a.time
            .partial_cmp(&b.time)
            .expect("finite times")
            .then(a.actor.cmp(&b.actor))
            .then(a.channel.cmp(&b.channel))
    });
    let slot_activities = m
        .slots
        .iter()
        .map(|slot| {
            activities
                .iter()
                .position(|a| {
                    a.actor == slot.actor
                        && a.channel == slot.channel
                        && a.mode == slot.mode
                        && (a.t_start - slot.t_start).abs() < EPS
                        && (a.t_end - slot.t_end).abs() < EPS
                })
                .expect("slot activity is inside the match span")
        })
        .collect();
    let static_env = StaticEnvironment {
        road_ref: log.metadata.get("road").cloned().unwrap_or_default(),
        ..StaticEnvironment::default()
    };
    ScenarioRecord {
        id: String::new(),
        ego_actor: ego.actor.clone(),
        actors,
        activities,
        events,
        tags: auto_tag(&m.pattern, &log.metadata, taxonomy),
        t_start: m.t_start,
        t_end: m.t_end,
        source: log.source_id.clone(),
        static_env,
        pattern: Some(m.pattern.clone()),
        slot_activities,
    }
}

/// Mines a decomposed log: matches all patterns, resolves overlapping
/// matches, and builds one auto-tagged scenario record per kept match,
/// ordered by start time.
pub fn mine_scenarios(
    log: &DrivingLog,
    decomp: &LogDecomposition,
    patterns: &[ActivityPattern],
    taxonomy: &Taxonomy,
) -> Result<Vec<ScenarioRecord>, MiningError> {
    let matches = resolve_overlaps(find_matches(log, decomp, patterns));
    let mut records = Vec::with_capacity(matches.len());
    for m in &matches {
        let record = build_record(log, decomp, m, taxonomy);
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

/// Slot-aligned parameter data of a scenario class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotData {
    pub role: ActorRole,
    pub channel: Channel,
    /// Mode of the first scenario's slot activity; other scenarios may use
    /// the mirrored lane-change mode.
    pub mode: Mode,
    pub field_names: Vec<String>,
    /// One row per scenario, columns in `field_names` order.
    pub rows: Vec<Vec<f64>>,
    /// Fitted density, absent when the matrix is too small or degenerate.
    pub density: Option<ParameterDensity>,
}

/// A scenario class with everything needed to generate new instances: the
/// qualitative pattern, the mined parameter matrices, and fitted densities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDocument {
    pub class: ScenarioClass,
    pub pattern: String,
    pub scenario_ids: Vec<String>,
    pub slots: Vec<SlotData>,
}

/// Groups scenarios mined from the same pattern into a class, stacking the
/// slot activity parameters into matrices and fitting a density per slot.
pub fn extract_class(
    name: &str,
    scenarios: &[ScenarioRecord],
) -> Result<ClassDocument, MiningError> {
    let first = scenarios.first().ok_or(MiningError::EmptyInput)?;
    let pattern = first.pattern.clone().unwrap_or_default();
    if pattern.is_empty() {
        return Err(MiningError::HeterogeneousPattern {
            expected: "a mined pattern".to_string(),
            found: "none".to_string(),
        });
    }
    let n_slots = first.slot_activities.len();
    for s in scenarios {
        let found = s.pattern.clone().unwrap_or_default();
        if found != pattern || s.slot_activities.len() != n_slots {
            return Err(MiningError::HeterogeneousPattern {
                expected: pattern,
                found,
            });
        }
    }
    let mut slots = Vec::with_capacity(n_slots);
    let mut class_pattern = Vec::with_capacity(n_slots);
    for j in 0..n_slots {
        let lead = &first.activities[first.slot_activities[j]];
        let field_names: Vec<String> = ActivityParams::field_names(lead.mode)
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut rows = Vec::with_capacity(scenarios.len());
        for s in scenarios {
            let a = &s.activities[s.slot_activities[j]];
            let row = a.params.to_row(a.mode).filter(|_| {
                ActivityParams::field_names(a.mode) == ActivityParams::field_names(lead.mode)
            });
            let Some(row) = row else {
                return Err(MiningError::HeterogeneousPattern {
                    expected: lead.mode.to_string(),
                    found: a.mode.to_string(),
                });
            };
            rows.push(row);
        }
        let density = ParameterDensity::fit(field_names.clone(), rows.clone()).ok();
        let role = if lead.actor == first.ego_actor {
            ActorRole::Ego
        } else {
            ActorRole::Target
        };
        class_pattern.push((role, lead.channel, lead.mode));
        slots.push(SlotData {
            role,
            channel: lead.channel,
            mode: lead.mode,
            field_names,
            rows,
            density,
        });
    }
    // Tags shared by every scenario of the class.
    let required_tags = scenarios
        .iter()
        .skip(1)
        .fold(first.tags.clone(), |acc, s| {
            acc.intersection(&s.tags).cloned().collect()
        });
    Ok(ClassDocument {
        class: ScenarioClass {
            name: name.to_string(),
            required_tags,
            activity_pattern: class_pattern,
        },
        pattern,
        scenario_ids: scenarios.iter().map(|s| s.id.clone()).collect(),
        slots,
    })
}
