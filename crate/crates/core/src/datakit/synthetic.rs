//! Synthetic scenes and scripted drivers.
//!
//! Two layouts: a T-junction with a priority road and a four-arm roundabout
//! with one slip road. Drivers follow lane midlines with an intelligent
//! driver model, slow for curves, queue behind leaders and give way at the
//! stop line to traffic with right of way.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Frame, Recording};
use crate::error::{Error, Result};
use crate::geometry::{Point2, Polyline};
use crate::goals::{self, generate_goals, upstream_window, WindowPiece, DEFAULT_MAX_DEPTH};
use crate::scene::{Goal, GoalType, Junction, Lane, LaneId, StaticScene, VehicleId, VehicleState, STRAIGHT_THRESHOLD};

pub const LANE_WIDTH: f64 = 3.5;
pub const VEHICLE_LENGTH: f64 = 4.5;
pub const VEHICLE_WIDTH: f64 = 1.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    TJunction,
    Roundabout,
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t-junction" => Ok(ScenarioKind::TJunction),
            "roundabout" | "roundabout-4-exit" => Ok(ScenarioKind::Roundabout),
            _ => Err(Error::Config(format!("unknown scenario kind '{s}'"))),
        }
    }
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::TJunction => "t-junction",
            ScenarioKind::Roundabout => "roundabout",
        }
    }

    pub fn scene(self) -> StaticScene {
        match self {
            ScenarioKind::TJunction => t_junction_scene(),
            ScenarioKind::Roundabout => roundabout_scene(),
        }
    }
}

struct LaneSpec {
    id: LaneId,
    points: Vec<Point2>,
    successors: Vec<LaneId>,
    junction: Option<u32>,
    rank: u32,
    roundabout: bool,
    slip: bool,
}

fn lane_spec(id: LaneId, points: Vec<Point2>, successors: Vec<LaneId>, rank: u32) -> LaneSpec {
    LaneSpec {
        id,
        points,
        successors,
        junction: None,
        rank,
        roundabout: false,
        slip: false,
    }
}

fn build(name: &str, specs: Vec<LaneSpec>, junctions: Vec<u32>, obstacles: Vec<Vec<Point2>>) -> Result<StaticScene> {
    let mut preds: BTreeMap<LaneId, Vec<LaneId>> = BTreeMap::new();
    for s in &specs {
        for n in &s.successors {
            preds.entry(*n).or_default().push(s.id);
        }
    }
    let lanes = specs
        .into_iter()
        .map(|s| {
            let midline = Polyline::new(dedup(s.points));
            Lane {
                id: s.id,
                boundary: midline.corridor(LANE_WIDTH),
                midline,
                successors: s.successors,
                predecessors: preds.remove(&s.id).unwrap_or_default(),
                junction: s.junction,
                priority_rank: s.rank,
                roundabout: s.roundabout,
                slip_road: s.slip,
            }
        })
        .collect();
    StaticScene::new(name, lanes, junctions.into_iter().map(|id| Junction { id }).collect(), obstacles)
}

fn dedup(mut pts: Vec<Point2>) -> Vec<Point2> {
    pts.dedup_by(|a, b| a.dist(*b) < 1e-9);
    pts
}

/// Arc from angle `a0` to `a1` (either direction), sampled about every 0.5 m.
fn arc(c: Point2, r: f64, a0: f64, a1: f64) -> Vec<Point2> {
    let n = ((r * (a1 - a0).abs()) / 0.5).ceil().max(2.0) as usize;
    (0..=n)
        .map(|i| c + Point2::from_polar(r, a0 + (a1 - a0) * i as f64 / n as f64))
        .collect()
}

fn bezier(p0: Point2, p1: Point2, p2: Point2, p3: Point2) -> Vec<Point2> {
    let n = 40;
    (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64;
            let u = 1.0 - t;
            p0 * (u * u * u) + p1 * (3.0 * u * u * t) + p2 * (3.0 * u * t * t) + p3 * (t * t * t)
        })
        .collect()
}

fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<Point2> {
    vec![
        Point2::new(x0, y0),
        Point2::new(x1, y0),
        Point2::new(x1, y1),
        Point2::new(x0, y1),
    ]
}

/// Priority road along x with a minor road joining from the south.
///
/// Lanes: 1 west-in, 2 west-out, 3 east-in, 4 east-out, 5 south-in,
/// 6 south-out; connectors 7 W-E, 8 E-W, 9 W-S, 10 E-S, 11 S-E, 12 S-W.
/// Buildings on both corners of the minor road hide the priority road from
/// vehicles approaching on it.
pub fn t_junction_scene() -> StaticScene {
    let p = Point2::new;
    let h = LANE_WIDTH / 2.0;
    let c = |id, pts, succ, rank| {
        let mut s = lane_spec(id, pts, succ, rank);
        s.junction = Some(1);
        s
    };
    let specs = vec![
        lane_spec(1, vec![p(-70.0, -h), p(-8.0, -h)], vec![7, 9], 0),
        lane_spec(2, vec![p(-8.0, h), p(-70.0, h)], vec![], 0),
        lane_spec(3, vec![p(70.0, h), p(8.0, h)], vec![8, 10], 0),
        lane_spec(4, vec![p(8.0, -h), p(70.0, -h)], vec![], 0),
        lane_spec(5, vec![p(h, -70.0), p(h, -8.0)], vec![11, 12], 1),
        lane_spec(6, vec![p(-h, -8.0), p(-h, -70.0)], vec![], 1),
        c(7, vec![p(-8.0, -h), p(8.0, -h)], vec![4], 0),
        c(8, vec![p(8.0, h), p(-8.0, h)], vec![2], 0),
        c(9, arc(p(-8.0, -8.0), 8.0 - h, FRAC_PI_2, 0.0), vec![6], 0),
        c(10, arc(p(8.0, -8.0), 8.0 + h, FRAC_PI_2, PI), vec![6], 0),
        c(11, arc(p(8.0, -8.0), 8.0 - h, PI, FRAC_PI_2), vec![4], 1),
        c(12, arc(p(-8.0, -8.0), 8.0 + h, 0.0, FRAC_PI_2), vec![2], 1),
    ];
    let obstacles = vec![rect(-45.0, -45.0, -6.0, -6.0), rect(6.0, -45.0, 45.0, -6.0)];
    build("t-junction", specs, vec![1], obstacles).expect("t-junction layout is valid")
}

pub const RING_RADIUS: f64 = 20.0;
const ARM_LENGTH: f64 = 70.0;
const ARM_CURVE_START: f64 = 32.0;
const MERGE_ANGLE: f64 = 20.0 * PI / 180.0;

/// Four-arm roundabout with counter-clockwise circulation.
///
/// Lanes: entries 10-13, ring 20-23 (ring lane k runs from exit k to exit
/// k+1), exits 40-43, an approach lane 50 on arm 0 feeding entry 10 and the
/// slip road 51 from arm 0 straight into exit 41.
pub fn roundabout_scene() -> StaticScene {
    let lat = 2.0;
    let mut specs = Vec::new();
    for k in 0..4u32 {
        let th = k as f64 * FRAC_PI_2;
        let u = Point2::from_polar(1.0, th);
        let n = u.perp();
        let kn = (k + 1) % 4;

        let merge = th + MERGE_ANGLE;
        let tau_in = Point2::from_polar(1.0, merge).perp();
        let e0 = u * ARM_CURVE_START + n * lat;
        let e3 = Point2::from_polar(RING_RADIUS, merge);
        let mut entry = if k == 0 { vec![u * 45.0 + n * lat] } else { vec![u * ARM_LENGTH + n * lat] };
        entry.extend(bezier(e0, e0 - u * 5.0, e3 - tau_in * 5.0, e3));
        let mut s = lane_spec(10 + k, entry, vec![20 + k], 1);
        s.rank = 1;
        specs.push(s);

        let split = th - MERGE_ANGLE;
        let tau_out = Point2::from_polar(1.0, split).perp();
        let x0 = Point2::from_polar(RING_RADIUS, split);
        let x3 = u * ARM_CURVE_START - n * lat;
        let mut exit = bezier(x0, x0 + tau_out * 5.0, x3 - u * 5.0, x3);
        exit.push(u * ARM_LENGTH - n * lat);
        specs.push(lane_spec(40 + k, exit, vec![], 1));

        let next_split = th + FRAC_PI_2 - MERGE_ANGLE;
        let mut ring = lane_spec(20 + k, arc(Point2::default(), RING_RADIUS, split, next_split), vec![20 + kn, 40 + kn], 0);
        ring.junction = Some(1);
        ring.roundabout = true;
        specs.push(ring);
    }
    let p = Point2::new;
    specs.push(lane_spec(50, vec![p(ARM_LENGTH, lat), p(45.0, lat)], vec![10, 51], 1));
    let mut slip = lane_spec(51, bezier(p(45.0, lat), p(35.0, lat), p(lat, 35.0), p(lat, 45.0)), vec![41], 1);
    slip.junction = Some(1);
    slip.slip = true;
    specs.push(slip);

    let mut obstacles = vec![(0..8)
        .map(|i| Point2::from_polar(14.0, i as f64 * PI / 4.0 + PI / 8.0))
        .collect::<Vec<_>>()];
    for k in 0..4 {
        let rot = |q: Point2| {
            let (s, c) = (k as f64 * FRAC_PI_2).sin_cos();
            Point2::new(c * q.x - s * q.y, s * q.x + c * q.y)
        };
        obstacles.push(rect(24.0, 24.0, 60.0, 60.0).into_iter().map(rot).collect());
    }
    build("roundabout", specs, vec![1], obstacles).expect("roundabout layout is valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub duration: f64,
    pub frame_rate: f64,
    /// Mean time between spawns on each entry lane.
    pub spawn_mean: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            duration: 45.0,
            frame_rate: 25.0,
            spawn_mean: 5.0,
        }
    }
}

const A_MAX: f64 = 1.5;
const B_COMFORT: f64 = 2.0;
const HEADWAY: f64 = 1.2;
const MIN_GAP: f64 = 2.5;
const LAT_ACCEL: f64 = 2.0;

struct Agent {
    id: VehicleId,
    path: Polyline,
    /// (start, end, speed cap) along the path.
    limits: Vec<(f64, f64, f64)>,
    stop_d: Option<f64>,
    windows: Vec<WindowPiece>,
    committed: bool,
    d: f64,
    v: f64,
    a: f64,
    v_cruise: f64,
    gap_acceptance: f64,
}

impl Agent {
    fn state(&self, t: f64) -> VehicleState {
        VehicleState::new(
            self.id,
            t,
            self.path.point_at(self.d),
            self.path.heading_at(self.d),
            self.v,
            self.a,
            VEHICLE_LENGTH,
            VEHICLE_WIDTH,
        )
        .expect("agent states are valid")
    }

    fn allowed_speed(&self) -> f64 {
        let mut v = self.v_cruise;
        for &(d0, d1, cap) in &self.limits {
            if d1 <= self.d {
                continue;
            }
            let lim = if self.d >= d0 {
                cap
            } else {
                (cap * cap + 2.0 * B_COMFORT * (d0 - self.d)).sqrt()
            };
            v = v.min(lim);
        }
        v
    }
}

fn build_agent(scene: &StaticScene, id: VehicleId, route: &[LaneId], rng: &mut ChaCha8Rng) -> Agent {
    let mut pts = scene.lane_unchecked(route[0]).midline.points().to_vec();
    let mut marks = vec![(route[0], 0.0)];
    let mut acc = scene.lane_unchecked(route[0]).length();
    for w in route.windows(2) {
        let off = scene.entry_offset(w[0], w[1]);
        let lane = scene.lane_unchecked(w[1]);
        marks.push((w[1], acc - off));
        pts.extend(lane.midline.points_from(off));
        acc += lane.length() - off;
    }
    let path = Polyline::new(dedup(pts));
    let v_cruise = rng.gen_range(8.5..11.5);
    let mut limits = Vec::new();
    for (i, (lane_id, start)) in marks.iter().enumerate() {
        let lane = scene.lane_unchecked(*lane_id);
        let dh = lane.heading_change().abs();
        if dh >= STRAIGHT_THRESHOLD {
            let radius = lane.length() / dh;
            let cap = (LAT_ACCEL * radius).sqrt().clamp(3.0, v_cruise);
            let from = if i == 0 { 0.0 } else { start + scene.entry_offset(marks[i - 1].0, *lane_id) };
            limits.push((from, start + lane.length(), cap));
        }
    }
    let conflicts = goals::priority_conflicts(scene, route);
    let ji = route.iter().position(|l| scene.lane_unchecked(*l).in_junction());
    let stop_d = match ji {
        Some(j) if j > 0 && !conflicts.is_empty() => Some(marks[j - 1].1 + scene.lane_unchecked(route[j - 1]).length()),
        _ => None,
    };
    let windows = conflicts
        .iter()
        .flat_map(|c| upstream_window(scene, c.lane, c.s, 45.0))
        .collect();
    Agent {
        id,
        path,
        limits,
        stop_d,
        windows,
        committed: false,
        d: 0.0,
        v: 0.8 * v_cruise,
        a: 0.0,
        v_cruise,
        gap_acceptance: rng.gen_range(3.0..4.5),
    }
}

fn idm(v: f64, v0: f64, gap: Option<(f64, f64)>) -> f64 {
    let v0 = v0.max(0.1);
    let free = 1.0 - (v / v0).powi(4);
    let inter = match gap {
        Some((s, v_lead)) => {
            let s = s.max(0.1);
            let s_star = MIN_GAP + (v * HEADWAY + v * (v - v_lead) / (2.0 * (A_MAX * B_COMFORT).sqrt())).max(0.0);
            (s_star / s).powi(2)
        }
        None => 0.0,
    };
    A_MAX * (free - inter)
}

/// Whether any vehicle with right of way is close to its conflict point.
fn must_yield(scene: &StaticScene, me: &Agent, others: &[(VehicleState, f64)]) -> bool {
    for (st, _) in others {
        for w in &me.windows {
            if let Some(s) = scene.on_lane(w.lane, st.position, st.heading) {
                if s >= w.s0 && s <= w.s1 {
                    let dist = w.offset + (w.s1 - s);
                    if dist < 6.0 + me.gap_acceptance * st.speed {
                        return true;
                    }
                }
            }
        }
    }
    false
}

fn leader_gap(me: &Agent, others: &[(VehicleState, f64)]) -> Option<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    let my_pos = me.path.point_at(me.d);
    for (st, _) in others {
        if st.position.dist(my_pos) > 60.0 {
            continue;
        }
        let pr = me.path.project_within(st.position, me.d, me.d + 60.0);
        let aligned = crate::geometry::wrap_angle(st.heading - pr.heading).abs() < PI / 3.0;
        if pr.distance < 1.6 && aligned && pr.s > me.d {
            let gap = pr.s - me.d - VEHICLE_LENGTH;
            if best.map_or(true, |(g, _)| gap < g) {
                best = Some((gap, st.speed));
            }
        }
    }
    best
}

/// Relative popularity of a route. Drivers mostly go straight at the
/// T-junction and seldom take the first roundabout exit or turn back.
fn route_weight(scene: &StaticScene, goal: &Goal) -> f64 {
    match goal.goal_type {
        GoalType::StraightOn => 1.5,
        GoalType::ExitRoundabout => {
            let ring = goal
                .route
                .iter()
                .filter(|l| scene.lane_unchecked(**l).roundabout)
                .count()
                .max(1);
            match ring {
                1 => 2.0,
                2 => 4.0,
                3 => 3.0,
                _ => 1.0,
            }
        }
        _ => 1.0,
    }
}

/// Entry lanes: lanes without predecessors.
fn spawn_lanes(scene: &StaticScene) -> Vec<LaneId> {
    scene
        .lanes
        .iter()
        .filter(|l| l.predecessors.is_empty() && !l.successors.is_empty())
        .map(|l| l.id)
        .collect()
}

fn exp_sample(rng: &mut ChaCha8Rng, mean: f64) -> f64 {
    let u: f64 = rng.gen_range(1e-12..1.0);
    -mean * u.ln()
}

/// One scripted episode.
pub fn simulate_episode(scene: &StaticScene, episode_id: &str, seed: u64, cfg: &SimConfig) -> Result<Recording> {
    if !(cfg.frame_rate > 0.0 && cfg.duration > 0.0 && cfg.spawn_mean > 0.0) {
        return Err(Error::Config("simulation needs positive duration, frame rate and spawn interval".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = 1.0 / cfg.frame_rate;
    let n_frames = (cfg.duration * cfg.frame_rate).round() as usize;
    let entries = spawn_lanes(scene);
    let mut routes: BTreeMap<LaneId, Vec<(f64, Vec<LaneId>)>> = BTreeMap::new();
    for &l in &entries {
        let lane = scene.lane_unchecked(l);
        let st = VehicleState::new(0, 0.0, lane.midline.point_at(0.5), lane.midline.heading_at(0.5), 1.0, 0.0, 1.0, 1.0)?;
        let gs = generate_goals(&st, scene, DEFAULT_MAX_DEPTH)?;
        routes.insert(l, gs.goals.into_iter().map(|g| (route_weight(scene, &g), g.route)).collect());
    }
    let mut next_spawn: BTreeMap<LaneId, f64> = entries.iter().map(|l| (*l, exp_sample(&mut rng, cfg.spawn_mean) * 0.5)).collect();
    let mut agents: Vec<Agent> = Vec::new();
    let mut next_id: VehicleId = 1;
    let mut frames = Vec::with_capacity(n_frames);

    for step in 0..n_frames {
        let t = step as f64 * dt;
        for &l in &entries {
            if t < next_spawn[&l] {
                continue;
            }
            let start = scene.lane_unchecked(l).midline.first();
            let clear = agents.iter().all(|a| a.path.point_at(a.d).dist(start) > 15.0);
            if clear {
                let options = &routes[&l];
                let total: f64 = options.iter().map(|(w, _)| w).sum();
                let mut u = rng.gen_range(0.0..total);
                let mut pick = options.len() - 1;
                for (i, (w, _)) in options.iter().enumerate() {
                    if u < *w {
                        pick = i;
                        break;
                    }
                    u -= w;
                }
                let route = options[pick].1.clone();
                agents.push(build_agent(scene, next_id, &route, &mut rng));
                next_id += 1;
                next_spawn.insert(l, t + 1.5 + exp_sample(&mut rng, cfg.spawn_mean));
            }
        }
        let states: Vec<(VehicleState, f64)> = agents.iter().map(|a| (a.state(t), a.d)).collect();
        frames.push(Frame {
            time: t,
            states: states.iter().map(|(s, _)| (s.id, s.clone())).collect(),
        });

        let mut accels = Vec::with_capacity(agents.len());
        for (i, a) in agents.iter().enumerate() {
            let others: Vec<(VehicleState, f64)> =
                states.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, s)| s.clone()).collect();
            let mut gap = leader_gap(a, &others);
            let mut commit = a.committed;
            if let (Some(stop), false) = (a.stop_d, a.committed) {
                let to_stop = stop - a.d;
                if to_stop < 40.0 {
                    if must_yield(scene, a, &others) {
                        let g = to_stop - VEHICLE_LENGTH / 2.0;
                        if gap.map_or(true, |(lg, _)| g < lg) {
                            gap = Some((g, 0.0));
                        }
                    } else if to_stop < 2.0 {
                        commit = true;
                    }
                }
                if to_stop <= 0.0 {
                    commit = true;
                }
            }
            let acc = idm(a.v, a.allowed_speed(), gap).clamp(-4.0, 2.0);
            accels.push((acc, commit));
        }
        for (a, (acc, commit)) in agents.iter_mut().zip(accels) {
            let v_new = (a.v + acc * dt).max(0.0);
            a.a = (v_new - a.v) / dt;
            a.d += 0.5 * (a.v + v_new) * dt;
            a.v = v_new;
            a.committed = commit;
        }
        agents.retain(|a| a.d < a.path.length() - 0.5);
    }
    Recording::new(&scene.scenario_id, episode_id, cfg.frame_rate, frames)
}

/// Scene and `n_episodes` seeded recordings.
pub fn generate_synthetic(
    kind: ScenarioKind,
    n_episodes: usize,
    seed: u64,
    cfg: &SimConfig,
) -> Result<(StaticScene, Vec<Recording>)> {
    if n_episodes < 1 {
        return Err(Error::Config("need at least one episode".into()));
    }
    let scene = kind.scene();
    let recs = (0..n_episodes)
        .into_par_iter()
        .map(|i| {
            let ep_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
            simulate_episode(&scene, &format!("{}-{i:03}", kind.name()), ep_seed, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((scene, recs))
}
