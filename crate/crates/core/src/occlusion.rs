//! Occluded regions from the ego's point of view.
//!
//! Every obstacle casts a shadow bounded by the two rays from the ego centre
//! through the obstacle vertices that subtend the widest angle. The exported
//! shadow is the quadrilateral (v1, v2, v4, v3) with the far vertices at the
//! sensor range along those rays. Containment tests use the same wedge but do
//! not cut it at the straight far edge, so the thin sector between v3-v4 and
//! the range circle is shadowed as well; beyond the range everything is
//! occluded anyway.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datakit::Recording;
use crate::error::{Error, Result};
use crate::geometry::{point_in_polygon, sample_polygon_boundary, signed_area, Point2};
use crate::scene::{LaneId, StaticScene, VehicleId, VehicleState, FOOTPRINT_EDGE_STEP};

/// Sensor range in metres.
pub const SENSOR_RANGE: f64 = 100.0;

/// Spacing of midline samples when computing occluded lane intervals.
pub const LANE_SAMPLE_STEP: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObstacleKind {
    Static,
    Vehicle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstaclePolygon {
    pub vertices: Vec<Point2>,
    pub kind: ObstacleKind,
    #[serde(default)]
    pub source: Option<VehicleId>,
}

impl ObstaclePolygon {
    pub fn building(vertices: Vec<Point2>) -> Self {
        ObstaclePolygon {
            vertices,
            kind: ObstacleKind::Static,
            source: None,
        }
    }

    pub fn vehicle(state: &VehicleState) -> Self {
        ObstaclePolygon {
            vertices: state.footprint().to_vec(),
            kind: ObstacleKind::Vehicle,
            source: Some(state.id),
        }
    }
}

/// Shadow cast by one obstacle. `vertices` is (v1, v2, v4, v3), counter-clockwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowQuad {
    pub vertices: [Point2; 4],
    pub source: Option<VehicleId>,
    ego: Point2,
}

impl ShadowQuad {
    pub fn near(&self) -> (Point2, Point2) {
        (self.vertices[0], self.vertices[1])
    }

    pub fn far(&self) -> (Point2, Point2) {
        (self.vertices[3], self.vertices[2])
    }

    /// Inside the closed wedge spanned by the two tangent rays and on or
    /// beyond the chord v1-v2.
    pub fn contains(&self, p: Point2) -> bool {
        let (v1, v2) = self.near();
        let e = self.ego;
        let d = p - e;
        // v2 is clockwise from v1, so the wedge interior is right of v1, left of v2
        if (v1 - e).cross(d) > 0.0 || d.cross(v2 - e) > 0.0 {
            return false;
        }
        // beyond the chord: opposite side from the ego (or on it)
        let chord = v2 - v1;
        let side_ego = chord.cross(e - v1);
        let side_p = chord.cross(p - v1);
        side_p * side_ego <= 0.0
    }

    pub fn boundary_distance(&self, p: Point2) -> f64 {
        crate::geometry::polygon_boundary_distance(p, &self.vertices)
    }
}

/// Shadow quadrilateral of `obstacle` seen from `ego`.
pub fn shadow_of(ego: Point2, obstacle: &ObstaclePolygon, sensor_range: f64) -> Result<ShadowQuad> {
    if !(sensor_range > 0.0) {
        return Err(Error::Geometry("sensor range must be positive".into()));
    }
    let verts = &obstacle.vertices;
    if verts.len() < 3 {
        return Err(Error::Geometry("obstacle needs at least 3 vertices".into()));
    }
    if point_in_polygon(ego, verts) {
        return Err(Error::Geometry("ego centre inside obstacle".into()));
    }
    let mut best: Option<(f64, f64, usize, usize)> = None;
    for i in 0..verts.len() {
        for j in (i + 1)..verts.len() {
            let a = verts[i] - ego;
            let b = verts[j] - ego;
            let angle = a.cross(b).abs().atan2(a.dot(b));
            let dist = a.norm() + b.norm();
            let better = match best {
                None => true,
                Some((ba, bd, _, _)) => angle > ba + 1e-12 || ((angle - ba).abs() <= 1e-12 && dist < bd),
            };
            if better {
                best = Some((angle, dist, i, j));
            }
        }
    }
    let (angle, _, i, j) = best.expect("at least one vertex pair");
    if angle < 1e-12 {
        return Err(Error::Geometry("obstacle subtends zero angle".into()));
    }
    let (mut v1, mut v2) = (verts[i], verts[j]);
    if (v1 - ego).cross(v2 - ego) > 0.0 {
        std::mem::swap(&mut v1, &mut v2);
    }
    let extend = |v: Point2| {
        let d = v - ego;
        let n = d.norm();
        if n >= sensor_range {
            v
        } else {
            ego + d * (sensor_range / n)
        }
    };
    let (v3, v4) = (extend(v1), extend(v2));
    let mut quad = [v1, v2, v4, v3];
    if signed_area(&quad) < 0.0 {
        quad = [v2, v1, v3, v4];
    }
    Ok(ShadowQuad {
        vertices: quad,
        source: obstacle.source,
        ego,
    })
}

/// Occluded lane interval in metres along the midline.
pub type Interval = (f64, f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccludedRegionSet {
    pub ego: Point2,
    pub sensor_range: f64,
    pub shadows: Vec<ShadowQuad>,
    pub lane_occlusions: BTreeMap<LaneId, Vec<Interval>>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl OccludedRegionSet {
    pub fn empty(ego: Point2, sensor_range: f64) -> Self {
        OccludedRegionSet {
            ego,
            sensor_range,
            shadows: Vec::new(),
            lane_occlusions: BTreeMap::new(),
            warnings: Vec::new(),
        }
    }

    pub fn out_of_range(&self, p: Point2) -> bool {
        p.dist(self.ego) > self.sensor_range
    }

    pub fn is_occluded(&self, p: Point2) -> bool {
        self.out_of_range(p) || self.shadows.iter().any(|s| s.contains(p))
    }

    /// Occlusion test ignoring the shadow cast by `source` itself.
    pub fn is_occluded_excluding(&self, p: Point2, source: VehicleId) -> bool {
        self.out_of_range(p) || self.shadows.iter().any(|s| s.source != Some(source) && s.contains(p))
    }

    /// True when the vehicle's whole footprint boundary (corners plus edge
    /// samples every 0.2 m) lies in the occluded region.
    pub fn covers_footprint(&self, st: &VehicleState) -> bool {
        sample_polygon_boundary(&st.footprint(), FOOTPRINT_EDGE_STEP)
            .into_iter()
            .all(|p| self.is_occluded_excluding(p, st.id))
    }

    pub fn lane_intervals(&self, lane: LaneId) -> &[Interval] {
        self.lane_occlusions.get(&lane).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Smallest occluded arclength within [s0, s1] on a lane, if any.
    pub fn first_occluded(&self, lane: LaneId, s0: f64, s1: f64) -> Option<f64> {
        self.lane_intervals(lane)
            .iter()
            .filter(|(a, b)| *b >= s0 && *a <= s1)
            .map(|(a, _)| a.max(s0))
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.min(v))))
    }

    /// Largest occluded arclength within [s0, s1] on a lane, if any.
    pub fn last_occluded(&self, lane: LaneId, s0: f64, s1: f64) -> Option<f64> {
        self.lane_intervals(lane)
            .iter()
            .filter(|(a, b)| *b >= s0 && *a <= s1)
            .map(|(_, b)| b.min(s1))
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
    }
}

/// Occluded regions for `ego` in one frame. Static obstacles and every other
/// vehicle footprint cast shadows; obstacles that fail `shadow_of` are
/// skipped with a warning record.
pub fn compute_occluded_regions(
    frame: &BTreeMap<VehicleId, VehicleState>,
    scene: &StaticScene,
    ego: VehicleId,
    sensor_range: f64,
) -> Result<OccludedRegionSet> {
    let ego_state = frame
        .get(&ego)
        .ok_or_else(|| Error::Contract(format!("ego {ego} not present in frame")))?;
    let obstacles = scene
        .obstacles
        .iter()
        .map(|v| ObstaclePolygon::building(v.clone()))
        .chain(frame.values().filter(|s| s.id != ego).map(ObstaclePolygon::vehicle));
    Ok(regions_from_obstacles(ego_state.position, obstacles, scene, sensor_range))
}

pub fn regions_from_obstacles(
    ego: Point2,
    obstacles: impl IntoIterator<Item = ObstaclePolygon>,
    scene: &StaticScene,
    sensor_range: f64,
) -> OccludedRegionSet {
    let mut set = shadows_from_obstacles(ego, obstacles, sensor_range);
    for lane in &scene.lanes {
        let iv = occluded_intervals(&set, &lane.midline);
        if !iv.is_empty() {
            set.lane_occlusions.insert(lane.id, iv);
        }
    }
    set
}

/// Shadows only, without lane intervals. Enough to decide which vehicles
/// are visible.
pub fn compute_shadows(
    frame: &BTreeMap<VehicleId, VehicleState>,
    scene: &StaticScene,
    ego: VehicleId,
    sensor_range: f64,
) -> Result<OccludedRegionSet> {
    let ego_state = frame
        .get(&ego)
        .ok_or_else(|| Error::Contract(format!("ego {ego} not present in frame")))?;
    let obstacles = scene
        .obstacles
        .iter()
        .map(|v| ObstaclePolygon::building(v.clone()))
        .chain(frame.values().filter(|s| s.id != ego).map(ObstaclePolygon::vehicle));
    Ok(shadows_from_obstacles(ego_state.position, obstacles, sensor_range))
}

fn shadows_from_obstacles(
    ego: Point2,
    obstacles: impl IntoIterator<Item = ObstaclePolygon>,
    sensor_range: f64,
) -> OccludedRegionSet {
    let mut set = OccludedRegionSet::empty(ego, sensor_range);
    for ob in obstacles {
        let nearest = ob.vertices.iter().map(|v| v.dist(ego)).fold(f64::INFINITY, f64::min);
        if nearest >= sensor_range {
            continue;
        }
        match shadow_of(ego, &ob, sensor_range) {
            Ok(q) => set.shadows.push(q),
            Err(e) => set.warnings.push(format!("obstacle {:?} skipped: {e}", ob.source)),
        }
    }
    set
}

fn occluded_intervals(set: &OccludedRegionSet, midline: &crate::geometry::Polyline) -> Vec<Interval> {
    let stations = midline.sample_stations(LANE_SAMPLE_STEP);
    let occ: Vec<bool> = stations.iter().map(|s| set.is_occluded(midline.point_at(*s))).collect();
    let refine = |mut inside: f64, mut outside: f64| {
        for _ in 0..40 {
            let mid = 0.5 * (inside + outside);
            if set.is_occluded(midline.point_at(mid)) {
                inside = mid;
            } else {
                outside = mid;
            }
        }
        inside
    };
    let mut out = Vec::new();
    let mut i = 0;
    while i < occ.len() {
        if !occ[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i + 1 < occ.len() && occ[i + 1] {
            i += 1;
        }
        let s0 = if start == 0 { stations[0] } else { refine(stations[start], stations[start - 1]) };
        let s1 = if i + 1 == occ.len() { stations[i] } else { refine(stations[i], stations[i + 1]) };
        out.push((s0, s1));
        i += 1;
    }
    out
}

/// One exported (frame, ego) occlusion record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionRecord {
    pub t: f64,
    pub ego_id: VehicleId,
    pub shadow_quads: Vec<[Point2; 4]>,
    pub lane_occlusions: BTreeMap<LaneId, Vec<[f64; 2]>>,
    pub occluded_vehicles: Vec<VehicleId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionDataset {
    pub scenario_id: String,
    pub sensor_range_m: f64,
    pub frames: Vec<OcclusionRecord>,
}

/// Occlusion records for every vehicle as ego in every frame.
pub fn occlusion_dataset(recording: &Recording, scene: &StaticScene, sensor_range: f64) -> Result<OcclusionDataset> {
    let per_frame: Vec<Result<Vec<OcclusionRecord>>> = recording
        .frames
        .par_iter()
        .map(|frame| {
            frame
                .states
                .keys()
                .map(|&ego| {
                    let regions = compute_occluded_regions(&frame.states, scene, ego, sensor_range)?;
                    let occluded_vehicles = frame
                        .states
                        .values()
                        .filter(|s| s.id != ego && regions.covers_footprint(s))
                        .map(|s| s.id)
                        .collect();
                    Ok(OcclusionRecord {
                        t: frame.time,
                        ego_id: ego,
                        shadow_quads: regions.shadows.iter().map(|q| q.vertices).collect(),
                        lane_occlusions: regions
                            .lane_occlusions
                            .iter()
                            .map(|(k, v)| (*k, v.iter().map(|(a, b)| [*a, *b]).collect()))
                            .collect(),
                        occluded_vehicles,
                    })
                })
                .collect()
        })
        .collect();
    let mut frames = Vec::new();
    for f in per_frame {
        frames.extend(f?);
    }
    Ok(OcclusionDataset {
        scenario_id: scene.scenario_id.clone(),
        sensor_range_m: sensor_range,
        frames,
    })
}

pub fn export_occlusion_dataset(
    recording: &Recording,
    scene: &StaticScene,
    sensor_range: f64,
    out: impl AsRef<Path>,
) -> Result<OcclusionDataset> {
    let ds = occlusion_dataset(recording, scene, sensor_range)?;
    let out = out.as_ref();
    let text = serde_json::to_string(&ds)?;
    std::fs::write(out, text).map_err(|e| Error::io(out, e))?;
    Ok(ds)
}
