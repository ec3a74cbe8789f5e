//! Possible-goal generation over the lane graph and goal-type assignment.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{segment_intersection, wrap_angle, Point2};
use crate::scene::{Goal, GoalType, LaneId, StaticScene, VehicleId, VehicleState, STRAIGHT_THRESHOLD};

/// Lane transitions explored when generating goals.
pub const DEFAULT_MAX_DEPTH: usize = 6;

/// Exit goals sit this far past the last merge into the lane leaving a
/// junction or roundabout.
pub const EXIT_GOAL_OFFSET: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalSet {
    pub vehicle_id: VehicleId,
    pub time: f64,
    pub goals: Vec<Goal>,
}

fn is_exit_lane(scene: &StaticScene, lane: LaneId) -> bool {
    let l = scene.lane_unchecked(lane);
    !l.in_junction()
        && !l.roundabout
        && l.predecessors.iter().any(|p| {
            let pl = scene.lane_unchecked(*p);
            pl.in_junction() || pl.roundabout
        })
}

/// Arclength of the goal on a lane that terminates a search branch.
fn goal_station(scene: &StaticScene, lane: LaneId) -> Option<f64> {
    let l = scene.lane_unchecked(lane);
    if is_exit_lane(scene, lane) {
        // Past the last merge point, so every route to the exit shares one goal.
        let merge = l
            .predecessors
            .iter()
            .map(|p| scene.entry_offset(*p, lane))
            .fold(0.0, f64::max);
        Some((merge + EXIT_GOAL_OFFSET).min(l.length()))
    } else if l.successors.is_empty() {
        Some(l.length())
    } else {
        None
    }
}

/// Arclength of the goal location along its lane.
pub fn goal_arclength(scene: &StaticScene, goal: &Goal) -> f64 {
    scene.lane_unchecked(goal.lane_id).midline.project(goal.location).s
}

/// Length of a lane route from arclength `s0` on its first lane to `goal_s` on
/// its last lane.
pub fn route_length(scene: &StaticScene, route: &[LaneId], s0: f64, goal_s: f64) -> f64 {
    match route.len() {
        0 => 0.0,
        1 => (goal_s - s0).max(0.0),
        n => {
            let mut total = (scene.lane_unchecked(route[0]).length() - s0).max(0.0);
            for i in 1..n - 1 {
                let off = scene.entry_offset(route[i - 1], route[i]);
                total += (scene.lane_unchecked(route[i]).length() - off).max(0.0);
            }
            let off = scene.entry_offset(route[n - 2], route[n - 1]);
            total + (goal_s - off).max(0.0)
        }
    }
}

/// Possible goals of a vehicle: a depth-limited search from each lane the
/// vehicle may occupy, stopping each branch at the first junction exit,
/// roundabout exit or lane end.
pub fn generate_goals(state: &VehicleState, scene: &StaticScene, max_depth: usize) -> Result<GoalSet> {
    if max_depth < 1 {
        return Err(Error::Config("max-depth must be at least 1".into()));
    }
    let starts = scene.current_lanes(state.position, state.heading);
    if starts.is_empty() {
        return Err(Error::OffMap {
            vehicle: state.id,
            x: state.position.x,
            y: state.position.y,
        });
    }
    let mut found: Vec<(Goal, f64)> = Vec::new();
    for m in &starts {
        let mut route = vec![m.lane];
        search(scene, m.s, max_depth, &mut route, &mut found)?;
    }
    let mut goals: Vec<(Goal, f64)> = Vec::new();
    for (g, len) in found {
        match goals.iter_mut().find(|(e, _)| e.same_as(&g)) {
            Some(existing) if len < existing.1 => *existing = (g, len),
            Some(_) => {}
            None => goals.push((g, len)),
        }
    }
    let mut goals: Vec<Goal> = goals.into_iter().map(|(g, _)| g).collect();
    goals.sort_by(|a, b| {
        a.lane_id
            .cmp(&b.lane_id)
            .then(goal_arclength(scene, a).total_cmp(&goal_arclength(scene, b)))
    });
    Ok(GoalSet {
        vehicle_id: state.id,
        time: state.time,
        goals,
    })
}

fn search(
    scene: &StaticScene,
    s0: f64,
    max_depth: usize,
    route: &mut Vec<LaneId>,
    found: &mut Vec<(Goal, f64)>,
) -> Result<()> {
    let lane_id = *route.last().expect("route is never empty");
    let lane = scene.lane_unchecked(lane_id);
    let is_start = route.len() == 1;
    if let Some(station) = goal_station(scene, lane_id) {
        let reachable = !is_start || s0 < station - 0.5;
        if reachable || lane.successors.is_empty() {
            let station = if reachable { station } else { lane.length() };
            let goal = Goal {
                location: lane.midline.point_at(station),
                lane_id,
                goal_type: goal_type_for_route(scene, route)?,
                route: route.clone(),
            };
            found.push((goal, route_length(scene, route, s0, station)));
            return Ok(());
        }
    }
    if route.len() > max_depth {
        return Ok(());
    }
    let mut succ = lane.successors.clone();
    succ.sort_unstable();
    for next in succ {
        if route.contains(&next) {
            continue;
        }
        route.push(next);
        search(scene, s0, max_depth, route, found)?;
        route.pop();
    }
    Ok(())
}

/// Shortest (fewest transitions, then lowest ids) route from `from` to `to`.
pub fn find_route(scene: &StaticScene, from: LaneId, to: LaneId, max_depth: usize) -> Option<Vec<LaneId>> {
    let mut frontier = vec![vec![from]];
    for _ in 0..=max_depth {
        let mut next = Vec::new();
        for r in frontier {
            let last = *r.last().unwrap();
            if last == to {
                return Some(r);
            }
            let mut succ = scene.lane_unchecked(last).successors.clone();
            succ.sort_unstable();
            for s in succ {
                if !r.contains(&s) {
                    let mut nr = r.clone();
                    nr.push(s);
                    next.push(nr);
                }
            }
        }
        frontier = next;
    }
    frontier.into_iter().find(|r| r.last() == Some(&to))
}

/// Goal type of `goal` for a vehicle currently in `current_lane`.
pub fn assign_goal_type(scene: &StaticScene, current_lane: LaneId, goal: &Goal, max_depth: usize) -> Result<GoalType> {
    let route = find_route(scene, current_lane, goal.lane_id, max_depth).ok_or(Error::UnreachableGoal {
        from: current_lane,
        lane: goal.lane_id,
    })?;
    goal_type_for_route(scene, &route)
}

/// Net heading change along a route: start tangent of the first lane to the
/// start tangent of the goal lane.
pub fn route_heading_change(scene: &StaticScene, route: &[LaneId]) -> f64 {
    let first = scene.lane_unchecked(route[0]);
    let last = scene.lane_unchecked(*route.last().unwrap());
    if route.len() == 1 {
        return 0.0;
    }
    wrap_angle(last.midline.start_heading() - first.midline.start_heading())
}

pub fn goal_type_for_route(scene: &StaticScene, route: &[LaneId]) -> Result<GoalType> {
    let goal_lane = scene.lane_unchecked(*route.last().ok_or_else(|| Error::Contract("empty route".into()))?);
    let leaves_roundabout = goal_lane
        .predecessors
        .iter()
        .any(|p| scene.lane_unchecked(*p).roundabout)
        && !goal_lane.roundabout;
    if leaves_roundabout || (route.iter().any(|l| scene.lane_unchecked(*l).roundabout) && !goal_lane.roundabout) {
        return Ok(GoalType::ExitRoundabout);
    }
    let r0 = scene.lane_unchecked(route[0]).priority_rank;
    let r1 = goal_lane.priority_rank;
    let dh = route_heading_change(scene, route);
    Ok(if dh.abs() < STRAIGHT_THRESHOLD {
        let crosses = crossing_points(scene, route)
            .iter()
            .any(|c| scene.lane_unchecked(c.lane).priority_rank < r0);
        if crosses {
            GoalType::CrossRoad
        } else {
            GoalType::StraightOn
        }
    } else if dh > 0.0 {
        if r1 < r0 {
            GoalType::EnterLeft
        } else {
            GoalType::ExitLeft
        }
    } else if r1 < r0 {
        GoalType::EnterRight
    } else {
        GoalType::ExitRight
    })
}

/// A point where another lane meets the route.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conflict {
    pub lane: LaneId,
    /// Arclength on `lane` of the conflict point.
    pub s: f64,
    pub point: Point2,
}

fn first_junction_index(scene: &StaticScene, route: &[LaneId]) -> Option<usize> {
    route.iter().position(|l| scene.lane_unchecked(*l).in_junction())
}

fn crossing_points(scene: &StaticScene, route: &[LaneId]) -> Vec<Conflict> {
    let Some(ji) = first_junction_index(scene, route) else {
        return Vec::new();
    };
    let j = scene.lane_unchecked(route[ji]);
    let jp = j.midline.points();
    let (j_start, j_end) = (j.midline.first(), j.midline.last());
    let mut out = Vec::new();
    for m in &scene.lanes {
        if m.id == j.id || m.junction != j.junction || route.contains(&m.id) {
            continue;
        }
        let mp = m.midline.points();
        let mut hit: Option<Conflict> = None;
        let mut acc_m = 0.0;
        'outer: for b in mp.windows(2) {
            for a in jp.windows(2) {
                if let Some((p, _, u)) = segment_intersection(a[0], a[1], b[0], b[1]) {
                    let near_end = [j_start, j_end, m.midline.first(), m.midline.last()]
                        .iter()
                        .any(|e| e.dist(p) < 1.0);
                    if !near_end {
                        hit = Some(Conflict {
                            lane: m.id,
                            s: acc_m + u * b[0].dist(b[1]),
                            point: p,
                        });
                        break 'outer;
                    }
                }
            }
            acc_m += b[0].dist(b[1]);
        }
        out.extend(hit);
    }
    out
}

/// Lanes with right of way over a vehicle following `route` at its first
/// junction lane, each with the conflict point on that lane.
pub fn priority_conflicts(scene: &StaticScene, route: &[LaneId]) -> Vec<Conflict> {
    let Some(ji) = first_junction_index(scene, route) else {
        return Vec::new();
    };
    let j = scene.lane_unchecked(route[ji]);
    let approach = (ji > 0).then(|| route[ji - 1]);
    let rank = scene.lane_unchecked(approach.unwrap_or(j.id)).priority_rank;
    let j_turns = j.heading_change().abs() >= STRAIGHT_THRESHOLD;

    let mut cands = crossing_points(scene, route);
    for p in &j.predecessors {
        if Some(*p) != approach && !route.contains(p) {
            let l = scene.lane_unchecked(*p);
            cands.push(Conflict {
                lane: *p,
                s: l.length(),
                point: l.midline.last(),
            });
        }
    }
    for succ in &j.successors {
        if !route.contains(succ) {
            continue;
        }
        for p in &scene.lane_unchecked(*succ).predecessors {
            if *p != j.id && !route.contains(p) {
                let l = scene.lane_unchecked(*p);
                cands.push(Conflict {
                    lane: *p,
                    s: l.length(),
                    point: l.midline.last(),
                });
            }
        }
    }
    let mut seen = BTreeSet::new();
    cands
        .into_iter()
        .filter(|c| {
            let m = scene.lane_unchecked(c.lane);
            let m_turns = m.heading_change().abs() >= STRAIGHT_THRESHOLD;
            m.priority_rank < rank || (m.priority_rank == rank && j_turns && !m_turns)
        })
        .filter(|c| seen.insert(c.lane))
        .collect()
}

/// A stretch of lane inside a scan window. `offset` is the window distance
/// at `s0` (downstream windows) or at `s1` (upstream windows).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowPiece {
    pub lane: LaneId,
    pub s0: f64,
    pub s1: f64,
    pub offset: f64,
}

/// Window walking backwards `dist` metres from arclength `s_end` on `lane`,
/// branching into every predecessor.
pub fn upstream_window(scene: &StaticScene, lane: LaneId, s_end: f64, dist: f64) -> Vec<WindowPiece> {
    let mut out = Vec::new();
    let mut visited = BTreeSet::new();
    upstream_rec(scene, lane, s_end, dist, 0.0, &mut out, &mut visited);
    out
}

fn upstream_rec(
    scene: &StaticScene,
    lane: LaneId,
    s_end: f64,
    remaining: f64,
    offset: f64,
    out: &mut Vec<WindowPiece>,
    visited: &mut BTreeSet<LaneId>,
) {
    if remaining <= 0.0 || !visited.insert(lane) {
        return;
    }
    let s0 = (s_end - remaining).max(0.0);
    out.push(WindowPiece {
        lane,
        s0,
        s1: s_end,
        offset,
    });
    let used = s_end - s0;
    if used < remaining {
        for p in &scene.lane_unchecked(lane).predecessors {
            let pl = scene.lane_unchecked(*p);
            upstream_rec(scene, *p, pl.length(), remaining - used, offset + used, out, visited);
        }
    }
}

/// Window `dist` metres forward along a route from arclength `s0` on its
/// first lane.
pub fn downstream_window(scene: &StaticScene, route: &[LaneId], s0: f64, dist: f64) -> Vec<WindowPiece> {
    let mut out = Vec::new();
    let mut start = s0;
    let mut offset = 0.0;
    for (i, lane) in route.iter().enumerate() {
        if offset >= dist {
            break;
        }
        if i > 0 {
            start = scene.entry_offset(route[i - 1], *lane);
        }
        let len = scene.lane_unchecked(*lane).length();
        let end = (start + dist - offset).min(len);
        if end > start {
            out.push(WindowPiece {
                lane: *lane,
                s0: start,
                s1: end,
                offset,
            });
            offset += end - start;
        }
    }
    out
}
