//! Core scenario vocabulary: events, activities and their parameters,
//! scenario records, scenario classes, and the static environment.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tags::TagRef;

/// Behavioral channel of an actor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Longitudinal,
    Lateral,
}

/// Behavioral mode. The longitudinal vocabulary is {accelerating, cruising,
/// braking}; the lateral one is {lane-following, lane-change-left,
/// lane-change-right}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Accelerating,
    Cruising,
    Braking,
    LaneFollowing,
    LaneChangeLeft,
    LaneChangeRight,
}

impl Mode {
    pub fn channel(&self) -> Channel {
        match self {
            Mode::Accelerating | Mode::Cruising | Mode::Braking => Channel::Longitudinal,
            Mode::LaneFollowing | Mode::LaneChangeLeft | Mode::LaneChangeRight => Channel::Lateral,
        }
    }

    pub fn is_lane_change(&self) -> bool {
        matches!(self, Mode::LaneChangeLeft | Mode::LaneChangeRight)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mode::Accelerating => "accelerating",
            Mode::Cruising => "cruising",
            Mode::Braking => "braking",
            Mode::LaneFollowing => "lane-following",
            Mode::LaneChangeLeft => "lane-change-left",
            Mode::LaneChangeRight => "lane-change-right",
        };
        f.write_str(s)
    }
}

/// A mode transition of one actor on one channel at a given instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub actor: String,
    pub time: f64,
    pub channel: Channel,
    pub from_mode: Mode,
    pub to_mode: Mode,
}

/// Named real-valued parameters of an activity. Field names are ordered so
/// that rows extracted across scenarios align into a matrix.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActivityParams(pub BTreeMap<String, f64>);

impl ActivityParams {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.get(name).copied()
    }

    pub fn duration(&self) -> Option<f64> {
        self.get("duration")
    }

    pub fn v_start(&self) -> Option<f64> {
        self.get("v_start")
    }

    pub fn delta_v(&self) -> Option<f64> {
        self.get("delta_v")
    }

    pub fn lateral_displacement(&self) -> Option<f64> {
        self.get("lateral_displacement")
    }

    pub fn longitudinal(duration: f64, v_start: f64, delta_v: f64) -> Self {
        Self(BTreeMap::from([
            ("duration".to_string(), duration),
            ("v_start".to_string(), v_start),
            ("delta_v".to_string(), delta_v),
        ]))
    }

    pub fn lane_change(duration: f64, lateral_displacement: f64) -> Self {
        Self(BTreeMap::from([
            ("duration".to_string(), duration),
            ("lateral_displacement".to_string(), lateral_displacement),
        ]))
    }

    pub fn lane_following(duration: f64) -> Self {
        Self(BTreeMap::from([("duration".to_string(), duration)]))
    }

    /// Field names a parametrized activity of `mode` carries, in matrix
    /// column order.
    pub fn field_names(mode: Mode) -> &'static [&'static str] {
        match mode {
            Mode::Accelerating | Mode::Cruising | Mode::Braking => {
                &["delta_v", "duration", "v_start"]
            }
            Mode::LaneChangeLeft | Mode::LaneChangeRight => &["duration", "lateral_displacement"],
            Mode::LaneFollowing => &["duration"],
        }
    }

    /// Flattens the parameters into the canonical column order for `mode`.
    pub fn to_row(&self, mode: Mode) -> Option<Vec<f64>> {
        Self::field_names(mode)
            .iter()
            .map(|f| self.get(f))
            .collect()
    }

    pub fn from_row(mode: Mode, row: &[f64]) -> Option<Self> {
        let names = Self::field_names(mode);
        if names.len() != row.len() {
            return None;
        }
        Some(Self(
            names
                .iter()
                .zip(row)
                .map(|(n, v)| (n.to_string(), *v))
                .collect(),
        ))
    }
}

/// An inter-event interval of one actor on one channel, labeled with the
/// mode that holds on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Activity {
    pub actor: String,
    pub channel: Channel,
    pub mode: Mode,
    pub t_start: f64,
    pub t_end: f64,
    pub params: ActivityParams,
}

impl Activity {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}

/// Static scenario information: road reference plus low-fidelity scenery
/// scalars and tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticEnvironment {
    pub road_ref: String,
    pub friction: f64,
    pub visibility: f64,
    pub scenery_tags: BTreeSet<TagRef>,
}

impl Default for StaticEnvironment {
    fn default() -> Self {
        Self {
            road_ref: String::new(),
            friction: 1.0,
            visibility: 300.0,
            scenery_tags: BTreeSet::new(),
        }
    }
}

impl StaticEnvironment {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(0.0..=1.0).contains(&self.friction) {
            return Err(ScenarioError::InvariantViolation(format!(
                "friction {} outside [0,1]",
                self.friction
            )));
        }
        if self.visibility < 0.0 {
            return Err(ScenarioError::InvariantViolation(format!(
                "visibility {} negative",
                self.visibility
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("scenario invariant violated: {0}")]
    InvariantViolation(String),
}

/// A stored, tagged, parametrized scenario: the quantitative description of
/// the ego vehicle and its dynamic environment over a time span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecord {
    /// Content-addressed id; filled in by the database on store.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub id: String,
    pub ego_actor: String,
    pub actors: Vec<String>,
    pub activities: Vec<Activity>,
    pub events: Vec<Event>,
    pub tags: BTreeSet<TagRef>,
    pub t_start: f64,
    pub t_end: f64,
    pub source: String,
    pub static_env: StaticEnvironment,
    /// Name of the activity pattern this scenario was mined from, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    /// Indices into `activities` of the pattern-matched slot activities,
    /// in pattern element order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub slot_activities: Vec<usize>,
}

impl ScenarioRecord {
    /// Structural invariants that do not need the taxonomy: actor listing,
    /// interval containment, ordering, environment ranges.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !self.actors.contains(&self.ego_actor) {
            return Err(ScenarioError::InvariantViolation(format!(
                "ego actor '{}' not listed in actors",
                self.ego_actor
            )));
        }
        if self.t_end <= self.t_start {
            return Err(ScenarioError::InvariantViolation(format!(
                "span [{}, {}] is empty",
                self.t_start, self.t_end
            )));
        }
        const EPS: f64 = 1e-9;
        for activity in &self.activities {
            if !self.actors.contains(&activity.actor) {
                return Err(ScenarioError::InvariantViolation(format!(
                    "activity actor '{}' not listed in actors",
                    activity.actor
                )));
            }
            if activity.t_end <= activity.t_start {
                return Err(ScenarioError::InvariantViolation(format!(
                    "activity [{}, {}] is empty",
                    activity.t_start, activity.t_end
                )));
            }
            if activity.t_start < self.t_start - EPS || activity.t_end > self.t_end + EPS {
                return Err(ScenarioError::InvariantViolation(format!(
                    "activity [{}, {}] outside scenario span [{}, {}]",
                    activity.t_start, activity.t_end, self.t_start, self.t_end
                )));
            }
        }
        for event in &self.events {
            if !self.actors.contains(&event.actor) {
                return Err(ScenarioError::InvariantViolation(format!(
                    "event actor '{}' not listed in actors",
                    event.actor
                )));
            }
            if event.from_mode == event.to_mode {
                return Err(ScenarioError::InvariantViolation(
                    "event with identical from/to modes".to_string(),
                ));
            }
            if event.time < self.t_start - EPS || event.time > self.t_end + EPS {
                return Err(ScenarioError::InvariantViolation(format!(
                    "event at {} outside scenario span",
                    event.time
                )));
            }
        }
        for idx in &self.slot_activities {
            if *idx >= self.activities.len() {
                return Err(ScenarioError::InvariantViolation(format!(
                    "slot activity index {idx} out of range"
                )));
            }
        }
        self.static_env.validate()
    }
}

/// Qualitative abstraction over similar scenarios: shared tags plus the
/// ordered activity structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioClass {
    pub name: String,
    pub required_tags: BTreeSet<TagRef>,
    /// Ordered slots of (actor role, channel, mode).
    pub activity_pattern: Vec<(ActorRole, Channel, Mode)>,
}

/// Role of an actor relative to the scenario pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorRole {
    Ego,
    Target,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> ScenarioRecord {
        ScenarioRecord {
            id: String::new(),
            ego_actor: "ego".to_string(),
            actors: vec!["ego".to_string(), "t1".to_string()],
            activities: vec![Activity {
                actor: "t1".to_string(),
                channel: Channel::Longitudinal,
                mode: Mode::Braking,
                t_start: 1.0,
                t_end: 4.0,
                params: ActivityParams::longitudinal(3.0, 20.0, -6.0),
            }],
            events: vec![],
            tags: BTreeSet::new(),
            t_start: 0.0,
            t_end: 10.0,
            source: "log-1".to_string(),
            static_env: StaticEnvironment::default(),
            pattern: None,
            slot_activities: vec![],
        }
    }

    #[test]
    fn valid_record_passes() {
        record().validate().unwrap();
    }

    #[test]
    fn activity_outside_span_rejected() {
        let mut r = record();
        r.activities[0].t_end = 12.0;
        assert!(matches!(
            r.validate(),
            Err(ScenarioError::InvariantViolation(_))
        ));
    }

    #[test]
    fn unlisted_actor_rejected() {
        let mut r = record();
        r.activities[0].actor = "ghost".to_string();
        assert!(r.validate().is_err());
    }

    #[test]
    fn params_row_round_trip() {
        let p = ActivityParams::longitudinal(4.0, 20.0, -10.0);
        let row = p.to_row(Mode::Braking).unwrap();
        assert_eq!(row, vec![-10.0, 4.0, 20.0]);
        assert_eq!(ActivityParams::from_row(Mode::Braking, &row).unwrap(), p);
    }

    #[test]
    fn mode_channels() {
        assert_eq!(Mode::Braking.channel(), Channel::Longitudinal);
        assert_eq!(Mode::LaneChangeLeft.channel(), Channel::Lateral);
        assert!(Mode::LaneChangeRight.is_lane_change());
    }
}
