//! Recordings, training-sample extraction, feature CSV files and splits.

pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dtree::Dataset;
use crate::error::{Error, Result};
use crate::features::{extract_features, Feature, FeatureVector, N_FEATURES};
use crate::geometry::{wrap_angle, Point2};
use crate::goals::{generate_goals, DEFAULT_MAX_DEPTH};
use crate::occlusion::{compute_occluded_regions, OccludedRegionSet};
use crate::scene::{observable_vehicles, Goal, GoalType, LaneId, Observation, StaticScene, VehicleId, VehicleState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub time: f64,
    pub states: BTreeMap<VehicleId, VehicleState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    pub scenario_id: String,
    pub episode_id: String,
    pub frame_rate: f64,
    pub frames: Vec<Frame>,
}

impl Recording {
    /// Checks that frame times strictly increase and that each vehicle is
    /// present in one contiguous run of frames.
    pub fn new(scenario_id: &str, episode_id: &str, frame_rate: f64, frames: Vec<Frame>) -> Result<Self> {
        if !(frame_rate > 0.0) {
            return Err(Error::Validation(format!("frame rate must be positive, got {frame_rate}")));
        }
        for w in frames.windows(2) {
            if !(w[1].time > w[0].time) {
                return Err(Error::Validation(format!("frame times not increasing at t={}", w[1].time)));
            }
        }
        let mut last_seen: BTreeMap<VehicleId, usize> = BTreeMap::new();
        for (i, f) in frames.iter().enumerate() {
            for id in f.states.keys() {
                if let Some(prev) = last_seen.insert(*id, i) {
                    if prev + 1 != i {
                        return Err(Error::Validation(format!("vehicle {id} reappears after a gap at frame {i}")));
                    }
                }
            }
        }
        Ok(Recording {
            scenario_id: scenario_id.to_string(),
            episode_id: episode_id.to_string(),
            frame_rate,
            frames,
        })
    }

    pub fn vehicle_ids(&self) -> BTreeSet<VehicleId> {
        self.frames.iter().flat_map(|f| f.states.keys().copied()).collect()
    }

    /// Frame indices nearest each whole second of the recording.
    pub fn tick_indices(&self) -> Vec<usize> {
        let (Some(first), Some(last)) = (self.frames.first(), self.frames.last()) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        let mut sec = first.time.ceil();
        while sec <= last.time + 1e-9 {
            let i = self.frames.partition_point(|f| f.time < sec);
            let cand = [i.saturating_sub(1), i.min(self.frames.len() - 1)];
            let best = cand
                .into_iter()
                .min_by(|a, b| {
                    (self.frames[*a].time - sec)
                        .abs()
                        .total_cmp(&(self.frames[*b].time - sec).abs())
                })
                .unwrap();
            if out.last() != Some(&best) {
                out.push(best);
            }
            sec += 1.0;
        }
        out
    }
}

const REQUIRED_COLUMNS: [&str; 7] = ["trackId", "frame", "xCenter", "yCenter", "heading", "width", "length"];

/// Reads an inD-style track CSV. Time is `frame / frame_rate`; headings are
/// in degrees. Speed and acceleration come from the velocity and
/// acceleration columns when present, else from finite differences.
pub fn ingest_csv(path: impl AsRef<Path>, scenario_id: &str, frame_rate: f64) -> Result<Recording> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let episode = path.file_stem().and_then(|s| s.to_str()).unwrap_or("episode").to_string();
    ingest_reader(file, scenario_id, &episode, frame_rate)
}

pub fn ingest_reader(reader: impl std::io::Read, scenario_id: &str, episode_id: &str, frame_rate: f64) -> Result<Recording> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    for name in REQUIRED_COLUMNS {
        if col(name).is_none() {
            return Err(Error::Schema(format!("missing column '{name}'")));
        }
    }
    let c = |name: &str| col(name).unwrap();
    let (c_id, c_frame, c_x, c_y, c_h, c_w, c_l) =
        (c("trackId"), c("frame"), c("xCenter"), c("yCenter"), c("heading"), c("width"), c("length"));
    let vel = col("xVelocity").zip(col("yVelocity"));
    let acc = col("xAcceleration").zip(col("yAcceleration"));

    struct Row {
        frame: i64,
        pos: Point2,
        heading: f64,
        width: f64,
        length: f64,
        speed: Option<f64>,
        accel: Option<f64>,
    }
    let mut tracks: BTreeMap<VehicleId, Vec<Row>> = BTreeMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::Parse(format!("row {}: bad value in column '{}'", line + 2, &headers[i])))
        };
        let id = num(c_id)? as VehicleId;
        let frame = num(c_frame)? as i64;
        let heading = num(c_h)?.to_radians();
        let row = Row {
            frame,
            pos: Point2::new(num(c_x)?, num(c_y)?),
            heading,
            width: num(c_w)?,
            length: num(c_l)?,
            speed: vel.map(|(a, b)| Ok::<_, Error>(num(a)?.hypot(num(b)?))).transpose()?,
            accel: acc
                .map(|(a, b)| Ok::<_, Error>(num(a)? * heading.cos() + num(b)? * heading.sin()))
                .transpose()?,
        };
        let track = tracks.entry(id).or_default();
        if let Some(prev) = track.last() {
            if frame <= prev.frame {
                return Err(Error::Validation(format!("track {id}: frame {frame} after frame {}", prev.frame)));
            }
        }
        track.push(row);
    }
    let mut frames: BTreeMap<i64, BTreeMap<VehicleId, VehicleState>> = BTreeMap::new();
    for (id, rows) in &tracks {
        let n = rows.len();
        let diff_speed = |i: usize| -> f64 {
            let (a, b) = if i + 1 < n { (i, i + 1) } else if i > 0 { (i - 1, i) } else { return 0.0 };
            let dt = (rows[b].frame - rows[a].frame) as f64 / frame_rate;
            rows[a].pos.dist(rows[b].pos) / dt
        };
        let speeds: Vec<f64> = (0..n).map(|i| rows[i].speed.unwrap_or_else(|| diff_speed(i))).collect();
        for (i, r) in rows.iter().enumerate() {
            let accel = r.accel.unwrap_or_else(|| {
                let (a, b) = if i + 1 < n { (i, i + 1) } else if i > 0 { (i - 1, i) } else { return 0.0 };
                let dt = (rows[b].frame - rows[a].frame) as f64 / frame_rate;
                (speeds[b] - speeds[a]) / dt
            });
            let st = VehicleState::new(
                *id,
                r.frame as f64 / frame_rate,
                r.pos,
                wrap_angle(r.heading),
                speeds[i],
                accel,
                r.length,
                r.width,
            )?;
            frames.entry(r.frame).or_default().insert(*id, st);
        }
    }
    let frames = frames
        .into_iter()
        .map(|(f, states)| Frame {
            time: f as f64 / frame_rate,
            states,
        })
        .collect();
    Recording::new(scenario_id, episode_id, frame_rate, frames)
}

/// Writes a recording in the inD-style schema.
pub fn write_csv(rec: &Recording, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "trackId",
        "frame",
        "trackLifetime",
        "xCenter",
        "yCenter",
        "heading",
        "width",
        "length",
        "xVelocity",
        "yVelocity",
        "xAcceleration",
        "yAcceleration",
    ])?;
    let mut first_frame: BTreeMap<VehicleId, i64> = BTreeMap::new();
    let mut rows: Vec<(VehicleId, i64, &VehicleState)> = Vec::new();
    for f in &rec.frames {
        let frame = (f.time * rec.frame_rate).round() as i64;
        for st in f.states.values() {
            first_frame.entry(st.id).or_insert(frame);
            rows.push((st.id, frame, st));
        }
    }
    rows.sort_by_key(|(id, frame, _)| (*id, *frame));
    for (id, frame, st) in rows {
        let (s, c) = st.heading.sin_cos();
        w.write_record(&[
            id.to_string(),
            frame.to_string(),
            (frame - first_frame[&id]).to_string(),
            st.position.x.to_string(),
            st.position.y.to_string(),
            st.heading.to_degrees().to_string(),
            st.width.to_string(),
            st.length.to_string(),
            (st.speed * c).to_string(),
            (st.speed * s).to_string(),
            (st.acceleration * c).to_string(),
            (st.acceleration * s).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// The goal a vehicle actually reached.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueGoal {
    pub goal: Goal,
    pub first_time: f64,
    pub reach_time: f64,
}

/// A vehicle's goal is the goal from its first-frame goal set nearest its
/// final position, provided the trajectory passes within 2 m of it.
pub fn true_goals(rec: &Recording, scene: &StaticScene) -> (BTreeMap<VehicleId, TrueGoal>, usize) {
    let mut tracks: BTreeMap<VehicleId, Vec<&VehicleState>> = BTreeMap::new();
    for f in &rec.frames {
        for st in f.states.values() {
            tracks.entry(st.id).or_default().push(st);
        }
    }
    let mut out = BTreeMap::new();
    let mut skipped = 0;
    for (id, track) in tracks {
        let found = (|| {
            let first = track.first()?;
            let last = track.last()?;
            let gs = generate_goals(first, scene, DEFAULT_MAX_DEPTH).ok()?;
            let goal = gs
                .goals
                .into_iter()
                .min_by(|a, b| a.location.dist(last.position).total_cmp(&b.location.dist(last.position)))?;
            let reach = track.iter().find(|s| s.position.dist(goal.location) <= 2.0)?;
            Some(TrueGoal {
                goal,
                first_time: first.time,
                reach_time: reach.time,
            })
        })();
        match found {
            Some(t) => {
                out.insert(id, t);
            }
            None => skipped += 1,
        }
    }
    (out, skipped)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub scenario_id: String,
    pub episode_id: String,
    pub t: f64,
    pub ego_id: VehicleId,
    pub vehicle_id: VehicleId,
    pub goal_type: GoalType,
    pub goal_lane: LaneId,
    pub is_true_goal: bool,
    pub fraction: f64,
    pub features: FeatureVector,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Extraction {
    pub samples: Vec<Sample>,
    /// Same rows with every value revealed and no occlusion.
    pub oracle: Vec<Sample>,
    pub skipped_vehicles: usize,
    /// (target, time) groups whose goal set lacked the true goal.
    pub groups_without_true_goal: usize,
    pub groups: usize,
}

impl Extraction {
    pub fn merge(&mut self, other: Extraction) {
        self.samples.extend(other.samples);
        self.oracle.extend(other.oracle);
        self.skipped_vehicles += other.skipped_vehicles;
        self.groups_without_true_goal += other.groups_without_true_goal;
        self.groups += other.groups;
    }
}

/// Samples at one-second ticks: every ordered (ego, target) pair with the
/// target visible to the ego, every possible goal of the target, up to the
/// tick at which the target reaches its true goal.
pub fn extract_samples(rec: &Recording, scene: &StaticScene, sensor_range: f64) -> Result<Extraction> {
    let (truth, skipped) = true_goals(rec, scene);
    let ticks = rec.tick_indices();
    let mut histories: BTreeMap<VehicleId, Vec<Observation>> = BTreeMap::new();
    let mut oracle_hist: Vec<Observation> = Vec::new();
    let mut ex = Extraction {
        skipped_vehicles: skipped,
        ..Extraction::default()
    };
    for &fi in &ticks {
        let frame = &rec.frames[fi];
        let t = frame.time;
        // Oracle view: everything visible, no occlusion.
        oracle_hist.push(Observation {
            time: t,
            ego_id: 0,
            visible: frame.states.clone(),
        });
        let per_ego: Vec<(VehicleId, Observation, OccludedRegionSet)> = frame
            .states
            .keys()
            .copied()
            .collect::<Vec<_>>()
            .par_iter()
            .map(|&ego| {
                let occ = compute_occluded_regions(&frame.states, scene, ego, sensor_range)?;
                let obs = observable_vehicles(&frame.states, ego, &occ)?;
                Ok((ego, obs, occ))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut oracle_rows: BTreeMap<VehicleId, Vec<(Goal, FeatureVector)>> = BTreeMap::new();
        for (ego, obs, occ) in per_ego {
            let hist = histories.entry(ego).or_default();
            hist.push(obs);
            let obs = hist.last().unwrap();
            for (&target, st) in &obs.visible {
                if target == ego {
                    continue;
                }
                let Some(tg) = truth.get(&target) else { continue };
                if t > tg.reach_time + 1e-9 {
                    continue;
                }
                let Ok(gs) = generate_goals(st, scene, DEFAULT_MAX_DEPTH) else {
                    continue;
                };
                if gs.goals.is_empty() {
                    continue;
                }
                if !oracle_rows.contains_key(&target) {
                    let open = OccludedRegionSet::empty(st.position, f64::INFINITY);
                    let rows = gs
                        .goals
                        .iter()
                        .map(|g| {
                            extract_features(&oracle_hist, target, g, scene, &open, DEFAULT_MAX_DEPTH)
                                .map(|f| (g.clone(), f))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    oracle_rows.insert(target, rows);
                }
                let span = tg.reach_time - tg.first_time;
                let fraction = if span > 0.0 {
                    ((t - tg.first_time) / span).clamp(0.0, 1.0)
                } else {
                    1.0
                };
                ex.groups += 1;
                if !gs.goals.iter().any(|g| g.same_as(&tg.goal)) {
                    ex.groups_without_true_goal += 1;
                }
                for (g, ofv) in &oracle_rows[&target] {
                    let fv = extract_features(hist, target, g, scene, &occ, DEFAULT_MAX_DEPTH)?;
                    let base = Sample {
                        scenario_id: rec.scenario_id.clone(),
                        episode_id: rec.episode_id.clone(),
                        t,
                        ego_id: ego,
                        vehicle_id: target,
                        goal_type: g.goal_type,
                        goal_lane: g.lane_id,
                        is_true_goal: g.same_as(&tg.goal),
                        fraction,
                        features: fv,
                    };
                    ex.oracle.push(Sample {
                        features: ofv.clone(),
                        ..base.clone()
                    });
                    ex.samples.push(base);
                }
            }
        }
    }
    Ok(ex)
}

/// Extraction over many recordings in parallel, concatenated in input order.
pub fn extract_all(recs: &[(&Recording, &StaticScene)], sensor_range: f64) -> Result<Extraction> {
    let parts: Vec<Result<Extraction>> = recs
        .par_iter()
        .map(|(r, s)| extract_samples(r, s, sensor_range))
        .collect();
    let mut ex = Extraction::default();
    for p in parts {
        ex.merge(p?);
    }
    Ok(ex)
}

/// Training sets per goal type: label is whether the goal is the true one.
pub fn datasets_by_goal_type(samples: &[Sample]) -> BTreeMap<GoalType, Dataset> {
    let mut out: BTreeMap<GoalType, Dataset> = BTreeMap::new();
    for s in samples {
        out.entry(s.goal_type)
            .or_insert_with(|| Dataset::with_features(N_FEATURES))
            .push(&s.features.to_row(), s.is_true_goal);
    }
    out
}

const META_COLUMNS: [&str; 7] = [
    "scenario_id",
    "episode_id",
    "t",
    "ego_id",
    "vehicle_id",
    "goal_type",
    "is_true_goal",
];
const TAIL_COLUMNS: [&str; 2] = ["goal_lane", "fraction_completed"];

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

pub fn write_samples(samples: &[Sample], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<&str> = META_COLUMNS
        .iter()
        .copied()
        .chain(Feature::all().map(Feature::name))
        .chain(TAIL_COLUMNS)
        .collect();
    w.write_record(&header)?;
    for s in samples {
        let mut rec = vec![
            s.scenario_id.clone(),
            s.episode_id.clone(),
            s.t.to_string(),
            s.ego_id.to_string(),
            s.vehicle_id.to_string(),
            s.goal_type.to_string(),
            u8::from(s.is_true_goal).to_string(),
        ];
        rec.extend(s.features.to_row().iter().map(|v| fmt_value(*v)));
        rec.push(s.goal_lane.to_string());
        rec.push(s.fraction.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_samples(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let expected: Vec<&str> = META_COLUMNS
        .iter()
        .copied()
        .chain(Feature::all().map(Feature::name))
        .chain(TAIL_COLUMNS)
        .collect();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Schema(format!("{}: unexpected feature CSV header", path.display())));
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Parse(format!("{} row {}: bad {what}", path.display(), line + 2));
        let num = |i: usize| -> Result<f64> { rec[i].parse::<f64>().map_err(|_| bad(&headers[i])) };
        let mut row = [f64::NAN; N_FEATURES];
        for (k, v) in row.iter_mut().enumerate() {
            let cell = &rec[META_COLUMNS.len() + k];
            if !cell.is_empty() {
                *v = cell.parse().map_err(|_| bad(&headers[META_COLUMNS.len() + k]))?;
            }
        }
        let tail = META_COLUMNS.len() + N_FEATURES;
        out.push(Sample {
            scenario_id: rec[0].to_string(),
            episode_id: rec[1].to_string(),
            t: num(2)?,
            ego_id: num(3)? as VehicleId,
            vehicle_id: num(4)? as VehicleId,
            goal_type: rec[5].parse()?,
            is_true_goal: &rec[6] == "1",
            features: FeatureVector::from_row(&row)?,
            goal_lane: num(tail)? as LaneId,
            fraction: num(tail + 1)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitPolicy {
    /// One test episode, one validation episode, the rest for training.
    HoldOneOutEach,
    /// `k` test episodes, one validation episode, the rest for training.
    HoldK(usize),
    /// 60 : 20 : 20.
    Ratio602020,
}

impl std::str::FromStr for SplitPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hold-one-out-each" => Ok(SplitPolicy::HoldOneOutEach),
            "hold-k" => Ok(SplitPolicy::HoldK(3)),
            "ratio-60-20-20" => Ok(SplitPolicy::Ratio602020),
            other => other
                .strip_prefix("hold-")
                .and_then(|k| k.parse().ok())
                .map(SplitPolicy::HoldK)
                .ok_or_else(|| Error::Config(format!("unknown split policy '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded shuffle, then cut by policy. Every episode lands in exactly one part.
pub fn split_episodes(episodes: &[String], policy: SplitPolicy, seed: u64) -> Result<Split> {
    let n = episodes.len();
    let (n_test, n_val) = match policy {
        SplitPolicy::HoldOneOutEach => (1, 1),
        SplitPolicy::HoldK(k) => (k, 1),
        SplitPolicy::Ratio602020 => {
            let t = (n as f64 * 0.2).round() as usize;
            (t.max(1), t.max(1))
        }
    };
    let needed = n_test + n_val + 1;
    if n < needed {
        return Err(Error::InsufficientEpisodes { needed, have: n });
    }
    let mut eps: Vec<String> = episodes.to_vec();
    eps.sort();
    eps.dedup();
    if eps.len() != n {
        return Err(Error::SplitMismatch("duplicate episode ids".into()));
    }
    eps.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = eps[..n_test].to_vec();
    let val = eps[n_test..n_test + n_val].to_vec();
    let train = eps[n_test + n_val..].to_vec();
    Ok(Split { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        let eps: Vec<String> = (0..5).map(|i| format!("e{i}")).collect();
        let s = split_episodes(&eps, SplitPolicy::HoldOneOutEach, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (3, 1, 1));
        let eps10: Vec<String> = (0..10).map(|i| format!("e{i}")).collect();
        let s = split_episodes(&eps10, SplitPolicy::Ratio602020, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
        assert_eq!(s, split_episodes(&eps10, SplitPolicy::Ratio602020, 1).unwrap());
        assert!(matches!(
            split_episodes(&eps[..2], SplitPolicy::HoldOneOutEach, 1),
            Err(Error::InsufficientEpisodes { .. })
        ));
    }

    #[test]
    fn ingest_two_rows() {
        let csv = "trackId,frame,xCenter,yCenter,heading,width,length\n1,0,0,0,0,1.8,4.5\n1,1,0.4,0,0,1.8,4.5\n";
        let r = ingest_reader(csv.as_bytes(), "s", "e", 25.0).unwrap();
        assert_eq!(r.frames.len(), 2);
        assert!((r.frames[0].states[&1].speed - 10.0).abs() < 1e-9);
    }

    #[test]
    fn ingest_requires_heading() {
        let csv = "trackId,frame,xCenter,yCenter,width,length\n1,0,0,0,1.8,4.5\n";
        assert!(matches!(ingest_reader(csv.as_bytes(), "s", "e", 25.0), Err(Error::Schema(_))));
    }

    #[test]
    fn ingest_rejects_backwards_frames() {
        let csv = "trackId,frame,xCenter,yCenter,heading,width,length\n1,3,0,0,0,1.8,4.5\n1,2,0.4,0,0,1.8,4.5\n";
        assert!(ingest_reader(csv.as_bytes(), "s", "e", 25.0).is_err());
    }

    #[test]
    fn lone_vehicle_gives_no_samples() {
        let scene = synthetic::t_junction_scene();
        let lane = scene.lane(1).unwrap();
        let frames = (0..50)
            .map(|i| {
                let t = i as f64 * 0.04;
                let s = 5.0 + 10.0 * t;
                let st = VehicleState::new(1, t, lane.midline.point_at(s), 0.0, 10.0, 0.0, 4.5, 1.8).unwrap();
                Frame {
                    time: t,
                    states: [(1, st)].into_iter().collect(),
                }
            })
            .collect();
        let rec = Recording::new("t-junction", "e", 25.0, frames).unwrap();
        assert!(extract_samples(&rec, &scene, 100.0).unwrap().samples.is_empty());
    }
}
