//! Directed lane-level road network: geometry, topology queries, and location
//! classification for routing, rasterization, the expert, and infraction
//! checks. Immutable after construction.

mod town;

pub use town::{build_town, ControlPattern, RoadProfile, SideLane, TownSpec};

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Polyline, Pose, Vec2};

pub const FORMAT_NAME: &str = "microdrive-town";
pub const FORMAT_VERSION: u32 = 1;

/// Distance before an intersection entry within which a point classifies as
/// `Intersection` (boundary inclusive).
pub const APPROACH_WINDOW_M: f64 = 30.0;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct LaneId(pub u32);

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct IntersectionId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LaneKind {
    Driving,
    Parking,
    Shoulder,
    Bike,
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum Maneuver {
    Left,
    Right,
    Straight,
}

/// Coarse location class of a trigger point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoarseClass {
    Intersection,
    NoIntersection,
    HighwayRamp,
}

/// A point on the lane graph where a scenario is anchored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerPoint {
    pub lane: LaneId,
    pub s: f64,
    pub coarse_class: CoarseClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborRef {
    pub id: LaneId,
    pub same_direction: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lane {
    pub id: LaneId,
    pub centerline: Polyline,
    pub width: f64,
    pub kind: LaneKind,
    pub successors: Vec<LaneId>,
    pub predecessors: Vec<LaneId>,
    pub left: Option<NeighborRef>,
    pub right: Option<NeighborRef>,
    pub speed_limit: f64,
    /// Highway on/off ramp membership.
    pub is_ramp: bool,
    /// Set when this is a connecting lane inside an intersection.
    pub intersection: Option<IntersectionId>,
    pub maneuver: Option<Maneuver>,
}

impl Lane {
    pub fn length(&self) -> f64 {
        self.centerline.length()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Intersection {
    pub id: IntersectionId,
    pub center: Vec2,
    pub incoming: Vec<LaneId>,
    /// Connecting lanes inside the intersection, grouped by maneuver.
    pub connections: BTreeMap<Maneuver, Vec<LaneId>>,
    pub signalized: bool,
    pub has_stop_sign: bool,
    pub has_crossing: bool,
}

/// Traffic signal at the stop line of one incoming lane. `phase_group` 0 and
/// 1 alternate green in a fixed two-phase cycle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignalSpec {
    pub intersection: IntersectionId,
    pub approach: LaneId,
    pub phase_group: u8,
}

/// Stop sign at the stop line (end) of one incoming lane.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StopSpec {
    pub intersection: IntersectionId,
    pub approach: LaneId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LaneGraph {
    pub lanes: Vec<Lane>,
    pub intersections: Vec<Intersection>,
    pub signals: Vec<SignalSpec>,
    pub stop_signs: Vec<StopSpec>,
}

impl LaneGraph {
    pub fn lane(&self, id: LaneId) -> &Lane {
        &self.lanes[id.0 as usize]
    }

    pub fn intersection(&self, id: IntersectionId) -> &Intersection {
        &self.intersections[id.0 as usize]
    }

    /// Pose at arc length `s` along a lane's centerline.
    pub fn point_at(&self, lane: LaneId, s: f64) -> Result<Pose> {
        let l = self.lane(lane);
        if !(0.0..=l.length() + 1e-9).contains(&s) {
            return Err(Error::Domain(format!(
                "arc length {s} out of [0, {}] on lane {}",
                l.length(),
                lane.0
            )));
        }
        Ok(l.centerline.pose_at(s))
    }

    /// Coarse location class of a point: inside/approaching an intersection,
    /// on a highway ramp, or neither. The approach window is boundary
    /// inclusive.
    pub fn classify_location(&self, lane: LaneId, s: f64) -> CoarseClass {
        let l = self.lane(lane);
        if l.intersection.is_some() {
            return CoarseClass::Intersection;
        }
        let remaining = l.length() - s;
        if remaining <= APPROACH_WINDOW_M
            && l.successors
                .iter()
                .any(|&succ| self.lane(succ).intersection.is_some())
        {
            return CoarseClass::Intersection;
        }
        if l.is_ramp {
            return CoarseClass::HighwayRamp;
        }
        CoarseClass::NoIntersection
    }

    /// Distance from (lane, s) forward to the nearest intersection entry
    /// through successor driving lanes, if within `max_dist`.
    pub fn distance_to_intersection_entry(
        &self,
        lane: LaneId,
        s: f64,
        max_dist: f64,
    ) -> Option<f64> {
        let l = self.lane(lane);
        if l.intersection.is_some() {
            return Some(0.0);
        }
        let remaining = l.length() - s;
        if remaining > max_dist {
            return None;
        }
        if l.successors
            .iter()
            .any(|&succ| self.lane(succ).intersection.is_some())
        {
            return Some(remaining);
        }
        None
    }

    /// Structural validation of all type invariants.
    pub fn validate(&self) -> Result<()> {
        for (i, lane) in self.lanes.iter().enumerate() {
            if lane.id.0 as usize != i {
                return Err(Error::Contract(format!(
                    "lane id {} stored at index {i}",
                    lane.id.0
                )));
            }
            if lane.centerline.len() < 2 {
                return Err(Error::Contract(format!(
                    "lane {} centerline has fewer than 2 points",
                    lane.id.0
                )));
            }
            if lane.width <= 0.0 {
                return Err(Error::Contract(format!("lane {} width <= 0", lane.id.0)));
            }
            let cum = lane.centerline.cumulative();
            for w in cum.windows(2) {
                if w[1] <= w[0] {
                    return Err(Error::Contract(format!(
                        "lane {} arc length not strictly increasing",
                        lane.id.0
                    )));
                }
            }
            for &succ in &lane.successors {
                let other = self
                    .lanes
                    .get(succ.0 as usize)
                    .ok_or_else(|| Error::Contract(format!("dangling successor {}", succ.0)))?;
                let gap = lane
                    .centerline
                    .points
                    .last()
                    .unwrap()
                    .dist(other.centerline.points[0]);
                if gap > 0.01 {
                    return Err(Error::Contract(format!(
                        "successor {} starts {gap:.4} m from end of lane {}",
                        succ.0, lane.id.0
                    )));
                }
                if !other.predecessors.contains(&lane.id) {
                    return Err(Error::Contract(format!(
                        "successor {} does not list {} as predecessor",
                        succ.0, lane.id.0
                    )));
                }
            }
            for &pred in &lane.predecessors {
                if self.lanes.get(pred.0 as usize).is_none() {
                    return Err(Error::Contract(format!("dangling predecessor {}", pred.0)));
                }
            }
            // Mutual neighbor consistency for same-direction adjacency.
            if let Some(r) = lane.right {
                if r.same_direction {
                    let other = self.lane(r.id);
                    let back = other.left.ok_or_else(|| {
                        Error::Contract(format!(
                            "lane {} right neighbor {} has no left neighbor",
                            lane.id.0, r.id.0
                        ))
                    })?;
                    if back.id != lane.id {
                        return Err(Error::Contract(format!(
                            "neighbor mismatch between {} and {}",
                            lane.id.0, r.id.0
                        )));
                    }
                }
            }
        }
        for inter in &self.intersections {
            for lanes in inter.connections.values() {
                for &cid in lanes {
                    let conn = self.lane(cid);
                    let feeds_from_incoming = conn
                        .predecessors
                        .iter()
                        .any(|p| inter.incoming.contains(p));
                    if !feeds_from_incoming {
                        return Err(Error::Contract(format!(
                            "connecting lane {} has no incoming predecessor at intersection {}",
                            cid.0, inter.id.0
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct TownFile {
    format: String,
    version: u32,
    graph: LaneGraph,
}

/// Write the graph as a versioned structured-text (JSON) file.
pub fn save_graph(graph: &LaneGraph, path: &Path) -> Result<()> {
    let file = TownFile {
        format: FORMAT_NAME.to_string(),
        version: FORMAT_VERSION,
        graph: graph.clone(),
    };
    let text = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_graph(path: &Path) -> Result<LaneGraph> {
    let text = std::fs::read_to_string(path)?;
    let file: TownFile = serde_json::from_str(&text)?;
    if file.format != FORMAT_NAME {
        return Err(Error::Config(format!(
            "{}: unexpected format {:?}",
            path.display(),
            file.format
        )));
    }
    if file.version != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "unsupported town file version {}",
            file.version
        )));
    }
    file.graph.validate()?;
    Ok(file.graph)
}

pub fn graph_to_string(graph: &LaneGraph) -> Result<String> {
    let file = TownFile {
        format: FORMAT_NAME.to_string(),
        version: FORMAT_VERSION,
        graph: graph.clone(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}
