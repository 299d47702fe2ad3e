//! Road networks: lanes with polyline centerlines, used as path references
//! for synthesized trajectories and the ego route. Ships three synthetic
//! networks as stand-ins for a digital map.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use std::collections::BTreeSet;

use crate::tags::{TagError, TagQuery, TagRef, Taxonomy};

#[derive(Debug, Error, PartialEq)]
pub enum RoadError {
    #[error("no road in the library matches the query")]
    NoMatchingRoad,
    #[error("lane '{0}' has fewer than 2 centerline points")]
    DegenerateLane(String),
    #[error("lane '{0}' has non-positive width")]
    BadWidth(String),
    #[error("successor gap between '{0}' and '{1}' exceeds 0.1 m")]
    SuccessorGap(String, String),
    #[error("unknown lane '{0}'")]
    UnknownLane(String),
    #[error(transparent)]
    Tag(#[from] TagError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub id: String,
    /// Centerline vertices (x, y) in meters.
    pub centerline: Vec<[f64; 2]>,
    pub width: f64,
    pub successors: Vec<String>,
}

impl Lane {
    pub fn length(&self) -> f64 {
        self.centerline
            .windows(2)
            .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
            .sum()
    }

    /// Point on the centerline at arclength `s` (clamped to the lane span).
    pub fn point_at(&self, s: f64) -> [f64; 2] {
        let mut remaining = s.max(0.0);
        for w in self.centerline.windows(2) {
            let dx = w[1][0] - w[0][0];
            let dy = w[1][1] - w[0][1];
            let seg = (dx * dx + dy * dy).sqrt();
            if remaining <= seg {
                let f = if seg > 0.0 { remaining / seg } else { 0.0 };
                return [w[0][0] + f * dx, w[0][1] + f * dy];
            }
            remaining -= seg;
        }
        *self.centerline.last().expect("validated: >= 2 points")
    }

    /// Unit tangent of the centerline at arclength `s`.
    pub fn tangent_at(&self, s: f64) -> [f64; 2] {
        let mut remaining = s.max(0.0);
        for w in self.centerline.windows(2) {
            let dx = w[1][0] - w[0][0];
            let dy = w[1][1] - w[0][1];
            let seg = (dx * dx + dy * dy).sqrt();
            if remaining <= seg && seg > 0.0 {
                return [dx / seg, dy / seg];
            }
            remaining -= seg;
        }
        let w = &self.centerline[self.centerline.len() - 2..];
        let dx = w[1][0] - w[0][0];
        let dy = w[1][1] - w[0][1];
        let seg = (dx * dx + dy * dy).sqrt().max(1e-12);
        [dx / seg, dy / seg]
    }

    /// Heading of the centerline at arclength `s`.
    pub fn heading_at(&self, s: f64) -> f64 {
        let t = self.tangent_at(s);
        t[1].atan2(t[0])
    }

    /// Left-pointing unit normal at arclength `s`.
    pub fn normal_at(&self, s: f64) -> [f64; 2] {
        let t = self.tangent_at(s);
        [-t[1], t[0]]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadNetwork {
    pub id: String,
    pub lanes: Vec<Lane>,
    pub tags: BTreeSet<TagRef>,
}

impl RoadNetwork {
    pub fn lane(&self, id: &str) -> Result<&Lane, RoadError> {
        self.lanes
            .iter()
            .find(|l| l.id == id)
            .ok_or_else(|| RoadError::UnknownLane(id.to_string()))
    }

    pub fn validate(&self) -> Result<(), RoadError> {
        for lane in &self.lanes {
            if lane.centerline.len() < 2 {
                return Err(RoadError::DegenerateLane(lane.id.clone()));
            }
            if lane.width <= 0.0 {
                return Err(RoadError::BadWidth(lane.id.clone()));
            }
            for succ_id in &lane.successors {
                let succ = self.lane(succ_id)?;
                let end = lane.centerline.last().expect(">= 2 points");
                let start = succ.centerline[0];
                let gap = ((end[0] - start[0]).powi(2) + (end[1] - start[1]).powi(2)).sqrt();
                if gap >= 0.1 {
                    return Err(RoadError::SuccessorGap(lane.id.clone(), succ_id.clone()));
                }
            }
        }
        Ok(())
    }

    /// Geometric neighbor of `lane_id` one lane to the left (positive
    /// normal direction) or right, if any.
    pub fn adjacent_lane(&self, lane_id: &str, left: bool) -> Option<&Lane> {
        let lane = self.lane(lane_id).ok()?;
        let origin = lane.centerline[0];
        let normal = lane.normal_at(0.0);
        let sign = if left { 1.0 } else { -1.0 };
        let target = [
            origin[0] + sign * lane.width * normal[0],
            origin[1] + sign * lane.width * normal[1],
        ];
        self.lanes.iter().find(|other| {
            if other.id == lane.id {
                return false;
            }
            let p = other.centerline[0];
            let d = ((p[0] - target[0]).powi(2) + (p[1] - target[1]).powi(2)).sqrt();
            d < 0.5 * lane.width
        })
    }
}

fn straight_lane(id: &str, y: f64, length: f64, width: f64) -> Lane {
    Lane {
        id: id.to_string(),
        centerline: vec![[0.0, y], [length, y]],
        width,
        successors: vec![],
    }
}

/// The three synthetic road networks shipped with the toolkit. Lane ids use
/// `l0` for the leftmost lane; left is the positive-normal side.
pub fn builtin_library() -> Vec<RoadNetwork> {
    let width = 3.5;
    let motorway2 = RoadNetwork {
        id: "motorway-2lane".to_string(),
        lanes: vec![
            straight_lane("l0", width, 2000.0, width),
            straight_lane("l1", 0.0, 2000.0, width),
        ],
        tags: [TagRef::new("road", "motorway-2lane")].into_iter().collect(),
    };
    let motorway3 = RoadNetwork {
        id: "motorway-3lane".to_string(),
        lanes: vec![
            straight_lane("l0", 2.0 * width, 2000.0, width),
            straight_lane("l1", width, 2000.0, width),
            straight_lane("l2", 0.0, 2000.0, width),
        ],
        tags: [TagRef::new("road", "motorway-3lane")].into_iter().collect(),
    };
    // T-junction: a straight approach whose end connects to a left-turning
    // branch and a straight continuation.
    let mut approach = straight_lane("approach", 0.0, 200.0, width);
    approach.successors = vec!["left-turn".to_string(), "straight-on".to_string()];
    let left_turn = Lane {
        id: "left-turn".to_string(),
        centerline: vec![
            [200.0, 0.0],
            [205.0, 0.6],
            [209.0, 2.4],
            [212.0, 5.3],
            [213.6, 9.0],
            [214.0, 13.0],
            [214.0, 100.0],
        ],
        width,
        successors: vec![],
    };
    let straight_on = straight_lane("straight-on", 0.0, 200.0, width);
    let straight_on = Lane {
        centerline: vec![[200.0, 0.0], [400.0, 0.0]],
        ..straight_on
    };
    let junction = RoadNetwork {
        id: "urban-t-junction".to_string(),
        lanes: vec![approach, left_turn, straight_on],
        tags: [TagRef::new("road", "t-junction")].into_iter().collect(),
    };
    vec![motorway2, motorway3, junction]
}

/// Selects the first network (by id order) whose tags satisfy the query
/// under subtree semantics.
pub fn select_road<'a>(
    query: &TagQuery,
    library: &'a [RoadNetwork],
    taxonomy: &Taxonomy,
) -> Result<&'a RoadNetwork, RoadError> {
    let mut sorted: Vec<&RoadNetwork> = library.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    for network in sorted {
        if query.eval(taxonomy, &network.tags)? {
            return Ok(network);
        }
    }
    Err(RoadError::NoMatchingRoad)
}
