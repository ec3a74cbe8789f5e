//! Scene, vehicle and goal vocabulary shared by every other module.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, is_simple_polygon, point_in_polygon, polygon_boundary_distance, wrap_angle, Point2, Polyline};
use crate::occlusion::OccludedRegionSet;

pub type LaneId = u32;
pub type VehicleId = u32;

/// Spacing of the sampled footprint edge points used by the visibility test.
pub const FOOTPRINT_EDGE_STEP: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub id: LaneId,
    pub midline: Polyline,
    pub boundary: Vec<Point2>,
    #[serde(default)]
    pub successors: Vec<LaneId>,
    #[serde(default)]
    pub predecessors: Vec<LaneId>,
    #[serde(default)]
    pub junction: Option<u32>,
    #[serde(default)]
    pub priority_rank: u32,
    #[serde(default)]
    pub roundabout: bool,
    #[serde(default)]
    pub slip_road: bool,
}

impl Lane {
    pub fn length(&self) -> f64 {
        self.midline.length()
    }

    pub fn in_junction(&self) -> bool {
        self.junction.is_some()
    }

    /// Net tangent change from start to end of the midline, accumulated per
    /// segment so arcs longer than pi are not folded.
    pub fn heading_change(&self) -> f64 {
        let pts = self.midline.points();
        let mut total = 0.0;
        let mut prev: Option<f64> = None;
        for w in pts.windows(2) {
            if w[0] == w[1] {
                continue;
            }
            let h = (w[1] - w[0]).angle();
            if let Some(p) = prev {
                total += wrap_angle(h - p);
            }
            prev = Some(h);
        }
        total
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Junction {
    pub id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticScene {
    pub scenario_id: String,
    pub lanes: Vec<Lane>,
    #[serde(default)]
    pub junctions: Vec<Junction>,
    #[serde(default)]
    pub obstacles: Vec<Vec<Point2>>,
}

/// A candidate lane for a vehicle pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneMatch {
    pub lane: LaneId,
    pub s: f64,
    pub distance: f64,
    pub angle_diff: f64,
}

/// Lateral tolerance when matching a position to a lane: half a lane plus 2 m.
pub const LANE_MATCH_TOLERANCE: f64 = 3.75;

impl StaticScene {
    /// Sorts lanes by id and checks every invariant.
    pub fn new(
        scenario_id: impl Into<String>,
        mut lanes: Vec<Lane>,
        junctions: Vec<Junction>,
        obstacles: Vec<Vec<Point2>>,
    ) -> Result<Self> {
        lanes.sort_by_key(|l| l.id);
        let scene = StaticScene {
            scenario_id: scenario_id.into(),
            lanes,
            junctions,
            obstacles,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.lanes.windows(2) {
            if w[0].id == w[1].id {
                return Err(Error::Validation(format!("duplicate lane id {}", w[0].id)));
            }
        }
        for lane in &self.lanes {
            if lane.midline.points().len() < 2 {
                return Err(Error::Validation(format!("lane {}: midline needs at least 2 points", lane.id)));
            }
            if !is_simple_polygon(&lane.boundary) {
                return Err(Error::Validation(format!("lane {}: boundary polygon is not simple", lane.id)));
            }
            if let Some(p) = lane.midline.points().iter().find(|p| !point_in_polygon(**p, &lane.boundary) && polygon_boundary_distance(**p, &lane.boundary) > 1e-6) {
                return Err(Error::Validation(format!(
                    "lane {}: midline point ({}, {}) outside boundary",
                    lane.id, p.x, p.y
                )));
            }
            for r in lane.successors.iter().chain(&lane.predecessors) {
                if self.lane(*r).is_none() {
                    return Err(Error::Validation(format!("lane {}: reference to missing lane {}", lane.id, r)));
                }
            }
            if let Some(j) = lane.junction {
                if !self.junctions.iter().any(|jn| jn.id == j) {
                    return Err(Error::Validation(format!("lane {}: reference to missing junction {}", lane.id, j)));
                }
            }
        }
        for (i, ob) in self.obstacles.iter().enumerate() {
            if ob.len() < 3 || !is_simple_polygon(ob) {
                return Err(Error::Validation(format!("obstacle {i}: not a simple polygon with >= 3 vertices")));
            }
        }
        Ok(())
    }

    pub fn lane(&self, id: LaneId) -> Option<&Lane> {
        self.lanes.binary_search_by_key(&id, |l| l.id).ok().map(|i| &self.lanes[i])
    }

    pub(crate) fn lane_unchecked(&self, id: LaneId) -> &Lane {
        self.lane(id).expect("lane ids are validated at scene construction")
    }

    /// Arclength on `to` where a vehicle arriving from the end of `from` starts.
    pub fn entry_offset(&self, from: LaneId, to: LaneId) -> f64 {
        let end = self.lane_unchecked(from).midline.last();
        let pr = self.lane_unchecked(to).midline.project(end);
        if pr.s < 1e-9 {
            0.0
        } else {
            pr.s
        }
    }

    /// All lanes near a pose, preferring ones aligned with the heading.
    /// Sorted by (heading-aligned first, distance, lane id).
    pub fn lane_candidates(&self, pos: Point2, heading: f64) -> Vec<LaneMatch> {
        let mut out: Vec<LaneMatch> = self
            .lanes
            .iter()
            .filter_map(|lane| {
                let pr = lane.midline.project(pos);
                (pr.distance <= LANE_MATCH_TOLERANCE).then(|| LaneMatch {
                    lane: lane.id,
                    s: pr.s,
                    distance: pr.distance,
                    angle_diff: wrap_angle(heading - lane.midline.heading_at(pr.s)).abs(),
                })
            })
            .collect();
        out.sort_by(|a, b| {
            let aa = a.angle_diff < FRAC_PI_2;
            let ba = b.angle_diff < FRAC_PI_2;
            ba.cmp(&aa)
                .then(a.distance.total_cmp(&b.distance))
                .then(a.lane.cmp(&b.lane))
        });
        out
    }

    /// Lanes a vehicle may currently be driving in: heading-aligned candidates
    /// within tolerance. Falls back to the nearest lane of any direction.
    pub fn current_lanes(&self, pos: Point2, heading: f64) -> Vec<LaneMatch> {
        let cands = self.lane_candidates(pos, heading);
        let aligned: Vec<LaneMatch> = cands
            .iter()
            .copied()
            .filter(|m| m.angle_diff < FRAC_PI_2 && m.distance <= 1.75 + 0.5)
            .collect();
        if !aligned.is_empty() {
            return aligned;
        }
        cands.into_iter().take(1).collect()
    }

    pub fn best_lane(&self, pos: Point2, heading: f64) -> Option<LaneMatch> {
        self.lane_candidates(pos, heading).into_iter().next()
    }

    /// Whether a point lies on `lane` with a compatible heading.
    pub fn on_lane(&self, lane: LaneId, pos: Point2, heading: f64) -> Option<f64> {
        let l = self.lane(lane)?;
        let pr = l.midline.project(pos);
        let aligned = wrap_angle(heading - pr.heading).abs() < FRAC_PI_2;
        (pr.distance <= 1.75 && aligned).then_some(pr.s)
    }
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<StaticScene> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scene(&text)
}

pub fn parse_scene(text: &str) -> Result<StaticScene> {
    let raw: StaticScene = serde_json::from_str(text)?;
    StaticScene::new(raw.scenario_id, raw.lanes, raw.junctions, raw.obstacles)
}

pub fn save_scene(scene: &StaticScene, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(scene)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: VehicleId,
    pub time: f64,
    pub position: Point2,
    pub heading: f64,
    pub speed: f64,
    pub acceleration: f64,
    pub length: f64,
    pub width: f64,
}

impl VehicleState {
    pub fn new(
        id: VehicleId,
        time: f64,
        position: Point2,
        heading: f64,
        speed: f64,
        acceleration: f64,
        length: f64,
        width: f64,
    ) -> Result<Self> {
        if !(speed >= 0.0) {
            return Err(Error::Validation(format!("vehicle {id}: negative speed {speed}")));
        }
        if !(length > 0.0 && width > 0.0) {
            return Err(Error::Validation(format!("vehicle {id}: degenerate footprint")));
        }
        Ok(VehicleState {
            id,
            time,
            position,
            heading: wrap_angle(heading),
            speed,
            acceleration,
            length,
            width,
        })
    }

    pub fn footprint(&self) -> [Point2; 4] {
        geometry::rectangle_corners(self.position, self.heading, self.length, self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub time: f64,
    pub ego_id: VehicleId,
    pub visible: BTreeMap<VehicleId, VehicleState>,
}

impl Observation {
    pub fn ego(&self) -> &VehicleState {
        &self.visible[&self.ego_id]
    }
}

/// Builds the ego's observation: every vehicle whose footprint boundary is not
/// entirely inside the occluded region. The ego always sees itself.
pub fn observable_vehicles(
    raw: &BTreeMap<VehicleId, VehicleState>,
    ego: VehicleId,
    occlusions: &OccludedRegionSet,
) -> Result<Observation> {
    let ego_state = raw
        .get(&ego)
        .ok_or_else(|| Error::Contract(format!("ego {ego} not in frame")))?;
    let visible = raw
        .iter()
        .filter(|(id, st)| **id == ego || !occlusions.covers_footprint(st))
        .map(|(id, st)| (*id, st.clone()))
        .collect();
    Ok(Observation {
        time: ego_state.time,
        ego_id: ego,
        visible,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GoalType {
    StraightOn,
    CrossRoad,
    ExitLeft,
    EnterLeft,
    ExitRight,
    EnterRight,
    ExitRoundabout,
}

impl GoalType {
    pub const ALL: [GoalType; 7] = [
        GoalType::StraightOn,
        GoalType::CrossRoad,
        GoalType::ExitLeft,
        GoalType::EnterLeft,
        GoalType::ExitRight,
        GoalType::EnterRight,
        GoalType::ExitRoundabout,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GoalType::StraightOn => "straight-on",
            GoalType::CrossRoad => "cross-road",
            GoalType::ExitLeft => "exit-left",
            GoalType::EnterLeft => "enter-left",
            GoalType::ExitRight => "exit-right",
            GoalType::EnterRight => "enter-right",
            GoalType::ExitRoundabout => "exit-roundabout",
        }
    }
}

impl fmt::Display for GoalType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GoalType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        GoalType::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown goal type '{s}'")))
    }
}

/// A possible goal for a vehicle, with the lane route used to reach it from
/// the vehicle's current lane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub location: Point2,
    pub lane_id: LaneId,
    pub goal_type: GoalType,
    #[serde(default)]
    pub route: Vec<LaneId>,
}

impl Goal {
    /// Same lane, location within 1 m.
    pub fn same_as(&self, other: &Goal) -> bool {
        self.lane_id == other.lane_id && self.location.dist(other.location) <= 1.0
    }
}

/// Heading difference thresholds used across the crate.
pub const STRAIGHT_THRESHOLD: f64 = PI / 8.0;
