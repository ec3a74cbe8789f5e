//! Base features, potentially-missing features and their indicators for a
//! (vehicle, goal) pair.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::wrap_angle;
use crate::goals::{self, downstream_window, priority_conflicts, upstream_window, WindowPiece};
use crate::occlusion::OccludedRegionSet;
use crate::scene::{Goal, GoalType, LaneId, Observation, StaticScene, VehicleId, VehicleState};

/// Distance reported when a scan region is visible and empty.
pub const MAX_DIST: f64 = 100.0;
/// Length of the forward and oncoming scan windows.
pub const SCAN_DISTANCE: f64 = 30.0;
/// Exit lane end within this distance of the entry lane start counts as a U-turn.
pub const UTURN_RADIUS: f64 = 15.0;

pub const N_BASE: usize = 7;
pub const N_MISSING: usize = 8;
pub const N_VALUES: usize = N_BASE + N_MISSING;
pub const N_FEATURES: usize = N_VALUES + N_MISSING;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Scalar,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureGroup {
    Base,
    MaybeMissing,
    Indicator,
}

/// Catalog position of a feature. Order: always-known base features, then
/// potentially missing ones, then one indicator per missing-capable feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Feature(pub usize);

const NAMES: [&str; N_FEATURES] = [
    "angle-in-lane",
    "angle-to-goal",
    "in-correct-lane",
    "path-to-goal-length",
    "junction-heading-change",
    "roundabout-uturn",
    "roundabout-slip-road",
    "roundabout-exit-number",
    "speed",
    "acceleration",
    "heading-change-1-second",
    "distance-to-vehicle-in-front",
    "speed-of-vehicle-in-front",
    "distance-from-oncoming-vehicle",
    "speed-of-oncoming-vehicle",
    "roundabout-exit-number-missing",
    "speed-missing",
    "acceleration-missing",
    "heading-change-1-second-missing",
    "distance-to-vehicle-in-front-missing",
    "speed-of-vehicle-in-front-missing",
    "distance-from-oncoming-vehicle-missing",
    "speed-of-oncoming-vehicle-missing",
];

impl Feature {
    pub const ANGLE_IN_LANE: Feature = Feature(0);
    pub const ANGLE_TO_GOAL: Feature = Feature(1);
    pub const IN_CORRECT_LANE: Feature = Feature(2);
    pub const PATH_TO_GOAL_LENGTH: Feature = Feature(3);
    pub const JUNCTION_HEADING_CHANGE: Feature = Feature(4);
    pub const ROUNDABOUT_UTURN: Feature = Feature(5);
    pub const ROUNDABOUT_SLIP_ROAD: Feature = Feature(6);
    pub const EXIT_NUMBER: Feature = Feature(7);
    pub const SPEED: Feature = Feature(8);
    pub const ACCELERATION: Feature = Feature(9);
    pub const HEADING_CHANGE_1S: Feature = Feature(10);
    pub const DIST_IN_FRONT: Feature = Feature(11);
    pub const SPEED_IN_FRONT: Feature = Feature(12);
    pub const DIST_ONCOMING: Feature = Feature(13);
    pub const SPEED_ONCOMING: Feature = Feature(14);

    pub fn all() -> impl Iterator<Item = Feature> {
        (0..N_FEATURES).map(Feature)
    }

    pub fn name(self) -> &'static str {
        NAMES[self.0]
    }

    pub fn group(self) -> FeatureGroup {
        match self.0 {
            i if i < N_BASE => FeatureGroup::Base,
            i if i < N_VALUES => FeatureGroup::MaybeMissing,
            _ => FeatureGroup::Indicator,
        }
    }

    pub fn kind(self) -> FeatureKind {
        match self {
            Feature::IN_CORRECT_LANE | Feature::ROUNDABOUT_UTURN | Feature::ROUNDABOUT_SLIP_ROAD => FeatureKind::Binary,
            f if f.is_indicator() => FeatureKind::Binary,
            _ => FeatureKind::Scalar,
        }
    }

    pub fn is_indicator(self) -> bool {
        self.group() == FeatureGroup::Indicator
    }

    pub fn may_be_missing(self) -> bool {
        self.group() == FeatureGroup::MaybeMissing
    }

    /// The indicator paired with a potentially missing feature.
    pub fn indicator(self) -> Option<Feature> {
        self.may_be_missing().then(|| Feature(self.0 + N_MISSING))
    }

    /// The feature an indicator reports on.
    pub fn base_of(self) -> Option<Feature> {
        self.is_indicator().then(|| Feature(self.0 - N_MISSING))
    }

    /// Index into the indicator array.
    pub fn indicator_slot(self) -> Option<usize> {
        match self.group() {
            FeatureGroup::MaybeMissing => Some(self.0 - N_BASE),
            FeatureGroup::Indicator => Some(self.0 - N_VALUES),
            FeatureGroup::Base => None,
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Feature {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        NAMES
            .iter()
            .position(|n| *n == s)
            .map(Feature)
            .ok_or_else(|| Error::Validation(format!("unknown feature id '{s}'")))
    }
}

impl Serialize for Feature {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Feature {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Values for every base feature plus the indicator flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: [Option<f64>; N_VALUES],
    pub indicators: [bool; N_MISSING],
}

impl FeatureVector {
    /// Builds a vector and checks it: base features known, binary values in
    /// {0, 1}, and a missing value exactly where its indicator is set.
    pub fn assemble(values: [Option<f64>; N_VALUES], indicators: [bool; N_MISSING]) -> Result<Self> {
        for (i, v) in values.iter().enumerate() {
            let f = Feature(i);
            match (v, f.indicator_slot()) {
                (None, None) => {
                    return Err(Error::Consistency(format!("base feature {f} has no value")));
                }
                (Some(_), Some(slot)) if indicators[slot] => {
                    return Err(Error::Consistency(format!("{f} has a value while its indicator is set")));
                }
                (None, Some(slot)) if !indicators[slot] => {
                    return Err(Error::Consistency(format!("{f} is missing while its indicator is clear")));
                }
                _ => {}
            }
            if let Some(x) = v {
                if !x.is_finite() {
                    return Err(Error::Consistency(format!("{f} is not finite")));
                }
                if f.kind() == FeatureKind::Binary && *x != 0.0 && *x != 1.0 {
                    return Err(Error::Consistency(format!("binary feature {f} has value {x}")));
                }
            }
        }
        Ok(FeatureVector { values, indicators })
    }

    /// Assembles from base values alone, deriving indicators from missingness.
    pub fn from_values(values: [Option<f64>; N_VALUES]) -> Result<Self> {
        let mut ind = [false; N_MISSING];
        for (slot, flag) in ind.iter_mut().enumerate() {
            *flag = values[N_BASE + slot].is_none();
        }
        Self::assemble(values, ind)
    }

    /// Value of any catalog feature; indicators read as 0 or 1.
    pub fn get(&self, f: Feature) -> Option<f64> {
        if f.is_indicator() {
            Some(if self.indicators[f.0 - N_VALUES] { 1.0 } else { 0.0 })
        } else {
            self.values[f.0]
        }
    }

    /// Dense row in catalog order with NaN for missing values.
    pub fn to_row(&self) -> [f64; N_FEATURES] {
        let mut row = [f64::NAN; N_FEATURES];
        for f in Feature::all() {
            if let Some(v) = self.get(f) {
                row[f.0] = v;
            }
        }
        row
    }

    pub fn from_row(row: &[f64]) -> Result<Self> {
        if row.len() != N_FEATURES {
            return Err(Error::Schema(format!("expected {N_FEATURES} feature columns, got {}", row.len())));
        }
        let mut values = [None; N_VALUES];
        for (i, v) in values.iter_mut().enumerate() {
            *v = (!row[i].is_nan()).then_some(row[i]);
        }
        let mut ind = [false; N_MISSING];
        for (i, flag) in ind.iter_mut().enumerate() {
            *flag = row[N_VALUES + i] == 1.0;
        }
        Self::assemble(values, ind)
    }
}

/// Result of scanning a region for the nearest vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Scan {
    Known { distance: f64, speed: f64 },
    Missing,
}

struct Hit {
    distance: f64,
    near_extent: f64,
    speed: f64,
}

fn resolve(nearest: Option<Hit>, first_occluded: Option<f64>) -> Scan {
    match (nearest, first_occluded) {
        (Some(h), Some(o)) if h.near_extent <= o => Scan::Known {
            distance: h.distance,
            speed: h.speed,
        },
        (_, Some(_)) => Scan::Missing,
        (Some(h), None) => Scan::Known {
            distance: h.distance,
            speed: h.speed,
        },
        (None, None) => Scan::Known {
            distance: MAX_DIST,
            speed: 0.0,
        },
    }
}

fn min_by_distance(a: Option<Hit>, b: Hit) -> Option<Hit> {
    match a {
        Some(x) if x.distance <= b.distance => Some(x),
        _ => Some(b),
    }
}

fn fmin(a: Option<f64>, b: f64) -> Option<f64> {
    Some(a.map_or(b, |x| x.min(b)))
}

fn scan_forward(
    scene: &StaticScene,
    pieces: &[WindowPiece],
    target: &VehicleState,
    target_s: f64,
    obs: &Observation,
    occ: &OccludedRegionSet,
) -> Scan {
    let mut nearest: Option<Hit> = None;
    let mut occluded: Option<f64> = None;
    for p in pieces {
        for v in obs.visible.values().filter(|v| v.id != target.id) {
            if let Some(s) = scene.on_lane(p.lane, v.position, v.heading) {
                let ahead = p.offset > 0.0 || s > target_s;
                if ahead && s >= p.s0 && s <= p.s1 {
                    let d = p.offset + (s - p.s0);
                    nearest = min_by_distance(
                        nearest,
                        Hit {
                            distance: d,
                            near_extent: d - v.length / 2.0,
                            speed: v.speed,
                        },
                    );
                }
            }
        }
        if let Some(o) = occ.first_occluded(p.lane, p.s0, p.s1) {
            occluded = fmin(occluded, p.offset + (o - p.s0));
        }
    }
    resolve(nearest, occluded)
}

fn scan_oncoming(
    scene: &StaticScene,
    route: &[LaneId],
    target: &VehicleState,
    obs: &Observation,
    occ: &OccludedRegionSet,
) -> Scan {
    let mut nearest: Option<Hit> = None;
    let mut occluded: Option<f64> = None;
    for c in priority_conflicts(scene, route) {
        for p in upstream_window(scene, c.lane, c.s, SCAN_DISTANCE) {
            for v in obs.visible.values().filter(|v| v.id != target.id) {
                if let Some(s) = scene.on_lane(p.lane, v.position, v.heading) {
                    if s >= p.s0 && s <= p.s1 {
                        let d = p.offset + (p.s1 - s);
                        nearest = min_by_distance(
                            nearest,
                            Hit {
                                distance: d,
                                near_extent: d - v.length / 2.0,
                                speed: v.speed,
                            },
                        );
                    }
                }
            }
            if let Some(o) = occ.last_occluded(p.lane, p.s0, p.s1) {
                occluded = fmin(occluded, p.offset + (p.s1 - o));
            }
        }
    }
    resolve(nearest, occluded)
}

/// First ring lane reached from a non-ring lane through at most two further
/// non-ring lanes.
fn entry_ring_of(scene: &StaticScene, lane: LaneId) -> Option<LaneId> {
    let mut frontier = vec![lane];
    for _ in 0..3 {
        let mut next = Vec::new();
        for l in frontier {
            let ln = scene.lane_unchecked(l);
            if ln.roundabout {
                return None;
            }
            let mut succ = ln.successors.clone();
            succ.sort_unstable();
            if let Some(r) = succ.iter().find(|s| scene.lane_unchecked(**s).roundabout) {
                return Some(*r);
            }
            next.extend(succ);
        }
        frontier = next;
    }
    None
}

/// Latest history entry in which the target was seen approaching the ring,
/// with the lane it was on.
fn last_observed_entry(scene: &StaticScene, history: &[Observation], target: VehicleId) -> Option<LaneId> {
    history.iter().rev().find_map(|o| {
        let st = o.visible.get(&target)?;
        scene
            .current_lanes(st.position, st.heading)
            .into_iter()
            .map(|m| m.lane)
            .find(|l| entry_ring_of(scene, *l).is_some())
    })
}

/// Start of the arm containing `lane`: walk predecessors that are neither
/// ring nor slip lanes.
fn arm_start(scene: &StaticScene, lane: LaneId) -> crate::geometry::Point2 {
    let mut cur = lane;
    for _ in 0..8 {
        let prev = scene.lane_unchecked(cur).predecessors.iter().copied().find(|p| {
            let l = scene.lane_unchecked(*p);
            !l.roundabout && !l.slip_road
        });
        match prev {
            Some(p) => cur = p,
            None => break,
        }
    }
    scene.lane_unchecked(cur).midline.first()
}

/// Ring lanes walked from `from` to `to` inclusive, following ring successors.
fn ring_steps(scene: &StaticScene, from: LaneId, to: LaneId) -> Option<usize> {
    let mut cur = from;
    for n in 1..=16 {
        if cur == to {
            return Some(n);
        }
        cur = *scene
            .lane_unchecked(cur)
            .successors
            .iter()
            .find(|s| scene.lane_unchecked(**s).roundabout)?;
    }
    None
}

fn exit_number(scene: &StaticScene, history: &[Observation], target: &VehicleState, goal: &Goal) -> Option<f64> {
    if goal.goal_type != GoalType::ExitRoundabout {
        return Some(0.0);
    }
    let route = &goal.route;
    let ring = |l: &LaneId| scene.lane_unchecked(*l).roundabout;
    if !ring(&route[0]) {
        // Still approaching, so the entry is observed now. A slip road
        // counts as the first exit.
        return Some(route.iter().filter(|l| ring(l)).count().max(1) as f64);
    }
    let entry = last_observed_entry(scene, history, target.id)?;
    let entry_ring = entry_ring_of(scene, entry)?;
    let last_ring = route.iter().rev().find(|l| ring(l)).copied()?;
    ring_steps(scene, entry_ring, last_ring).map(|n| n as f64)
}

fn uturn(scene: &StaticScene, history: &[Observation], target: &VehicleState, goal: &Goal) -> f64 {
    if goal.goal_type != GoalType::ExitRoundabout {
        return 0.0;
    }
    let first = goal.route[0];
    let entry = if !scene.lane_unchecked(first).roundabout {
        first
    } else {
        match last_observed_entry(scene, history, target.id).or_else(|| {
            let preds = &scene.lane_unchecked(first).predecessors;
            preds.iter().copied().find(|p| !scene.lane_unchecked(*p).roundabout)
        }) {
            Some(e) => e,
            None => return 0.0,
        }
    };
    let end = scene.lane_unchecked(goal.lane_id).midline.last();
    if arm_start(scene, entry).dist(end) <= UTURN_RADIUS {
        1.0
    } else {
        0.0
    }
}

/// Reference observation for one-second differences: the latest one at or
/// before `t - 1`, or the earliest available.
fn one_second_ago(history: &[Observation], t: f64) -> Option<usize> {
    history
        .iter()
        .rposition(|o| o.time <= t - 1.0 + 1e-6)
        .or((!history.is_empty()).then_some(0))
}

/// Base feature values for a visible target and one of its goals. Missing
/// values are `None`.
pub fn extract_base_features(
    history: &[Observation],
    vehicle_id: VehicleId,
    goal: &Goal,
    scene: &StaticScene,
    occlusions: &OccludedRegionSet,
    max_depth: usize,
) -> Result<[Option<f64>; N_VALUES]> {
    let obs = history
        .last()
        .ok_or_else(|| Error::Contract("empty observation history".into()))?;
    let target = obs
        .visible
        .get(&vehicle_id)
        .ok_or_else(|| Error::Contract(format!("vehicle {vehicle_id} not visible at t={}", obs.time)))?;
    if goal.route.is_empty() {
        return Err(Error::Contract("goal has no route".into()));
    }
    let lane0 = scene
        .lane(goal.route[0])
        .ok_or_else(|| Error::Contract(format!("unknown lane {}", goal.route[0])))?;
    let proj = lane0.midline.project(target.position);
    let goal_lane = scene.lane_unchecked(goal.lane_id);
    let goal_s = goal_lane.midline.project(goal.location).s;

    let mut v = [None; N_VALUES];
    v[Feature::ANGLE_IN_LANE.0] = Some(wrap_angle(target.heading - proj.heading));
    v[Feature::ANGLE_TO_GOAL.0] = Some(wrap_angle((goal.location - target.position).angle() - target.heading));
    let correct = scene
        .best_lane(target.position, target.heading)
        .and_then(|m| goals::find_route(scene, m.lane, goal.lane_id, max_depth))
        .is_some();
    v[Feature::IN_CORRECT_LANE.0] = Some(if correct { 1.0 } else { 0.0 });
    // The leg to the projection matters inside junctions, where overlapping
    // lanes can project the vehicle ahead of itself.
    v[Feature::PATH_TO_GOAL_LENGTH.0] = Some(proj.distance + goals::route_length(scene, &goal.route, proj.s, goal_s));
    v[Feature::JUNCTION_HEADING_CHANGE.0] = Some(
        goal.route
            .iter()
            .map(|l| scene.lane_unchecked(*l))
            .filter(|l| l.in_junction())
            .map(|l| l.heading_change())
            .sum(),
    );
    v[Feature::ROUNDABOUT_UTURN.0] = Some(uturn(scene, history, target, goal));
    let slip = goal.route.iter().any(|l| scene.lane_unchecked(*l).slip_road);
    v[Feature::ROUNDABOUT_SLIP_ROAD.0] = Some(if slip { 1.0 } else { 0.0 });
    v[Feature::EXIT_NUMBER.0] = exit_number(scene, history, target, goal);

    // Kinematics need the previous sample; the heading change needs every
    // sample in the last second.
    let prev_visible = history.len() < 2 || history[history.len() - 2].visible.contains_key(&vehicle_id);
    if prev_visible {
        v[Feature::SPEED.0] = Some(target.speed);
        v[Feature::ACCELERATION.0] = Some(target.acceleration);
    }
    if let Some(r) = one_second_ago(history, obs.time) {
        let window = &history[r..history.len() - 1];
        if window.iter().all(|o| o.visible.contains_key(&vehicle_id)) {
            let h0 = window.first().map_or(target.heading, |o| o.visible[&vehicle_id].heading);
            v[Feature::HEADING_CHANGE_1S.0] = Some(wrap_angle(target.heading - h0));
        }
    }

    let pieces = downstream_window(scene, &goal.route, proj.s, SCAN_DISTANCE);
    if let Scan::Known { distance, speed } = scan_forward(scene, &pieces, target, proj.s, obs, occlusions) {
        v[Feature::DIST_IN_FRONT.0] = Some(distance);
        v[Feature::SPEED_IN_FRONT.0] = Some(speed);
    }
    if let Scan::Known { distance, speed } = scan_oncoming(scene, &goal.route, target, obs, occlusions) {
        v[Feature::DIST_ONCOMING.0] = Some(distance);
        v[Feature::SPEED_ONCOMING.0] = Some(speed);
    }
    Ok(v)
}

/// Indicator flags: set exactly where the paired base feature is missing.
pub fn extract_indicators(
    history: &[Observation],
    vehicle_id: VehicleId,
    goal: &Goal,
    scene: &StaticScene,
    occlusions: &OccludedRegionSet,
    max_depth: usize,
) -> Result<[bool; N_MISSING]> {
    let v = extract_base_features(history, vehicle_id, goal, scene, occlusions, max_depth)?;
    Ok(std::array::from_fn(|i| v[N_BASE + i].is_none()))
}

pub fn extract_features(
    history: &[Observation],
    vehicle_id: VehicleId,
    goal: &Goal,
    scene: &StaticScene,
    occlusions: &OccludedRegionSet,
    max_depth: usize,
) -> Result<FeatureVector> {
    let v = extract_base_features(history, vehicle_id, goal, scene, occlusions, max_depth)?;
    FeatureVector::from_values(v)
}
