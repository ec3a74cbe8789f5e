//! Accuracy curves over fraction of trajectory completed, and latency.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::datakit::{Recording, Sample};
use crate::dtree::Models;
use crate::error::Result;
use crate::inference::{posterior, run_pipeline_timed, uniform_priors};
use crate::scene::{StaticScene, VehicleId};

pub const N_BINS: usize = 10;

/// One (episode, time, ego, target) goal set, scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub scenario_id: String,
    pub episode_id: String,
    pub t: f64,
    pub ego_id: VehicleId,
    pub vehicle_id: VehicleId,
    pub fraction: f64,
    pub n_goals: usize,
    /// Posterior of the true goal.
    pub p_true: f64,
}

type GroupKey = (String, String, u64, VehicleId, VehicleId);

fn key(s: &Sample) -> GroupKey {
    (s.scenario_id.clone(), s.episode_id.clone(), s.t.to_bits(), s.ego_id, s.vehicle_id)
}

/// Scores every goal set containing its true goal with a likelihood
/// function and uniform priors. Returns the scores and the number of goal
/// sets skipped for lacking the true goal.
pub fn score_groups_with(samples: &[Sample], mut lik: impl FnMut(&Sample) -> Result<f64>) -> Result<(Vec<GroupScore>, usize)> {
    let mut groups: BTreeMap<GroupKey, Vec<&Sample>> = BTreeMap::new();
    for s in samples {
        groups.entry(key(s)).or_default().push(s);
    }
    let mut out = Vec::new();
    let mut skipped = 0;
    for members in groups.values() {
        let Some(true_idx) = members.iter().position(|s| s.is_true_goal) else {
            skipped += 1;
            continue;
        };
        let l = members.iter().map(|s| lik(s)).collect::<Result<Vec<_>>>()?;
        let p = posterior(&l, &uniform_priors(l.len()))?;
        let s = members[0];
        out.push(GroupScore {
            scenario_id: s.scenario_id.clone(),
            episode_id: s.episode_id.clone(),
            t: s.t,
            ego_id: s.ego_id,
            vehicle_id: s.vehicle_id,
            fraction: s.fraction,
            n_goals: members.len(),
            p_true: p[true_idx],
        });
    }
    Ok((out, skipped))
}

pub fn score_groups(models: &Models, samples: &[Sample]) -> Result<(Vec<GroupScore>, usize)> {
    score_groups_with(samples, |s| models.get(s.goal_type)?.likelihood(&s.features))
}

/// The uniform-prior baseline: every goal equally likely.
pub fn uniform_scores(samples: &[Sample]) -> Result<(Vec<GroupScore>, usize)> {
    score_groups_with(samples, |_| Ok(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean: Option<f64>,
}

pub fn bin_index(fraction: f64) -> usize {
    ((fraction * N_BINS as f64).floor().max(0.0) as usize).min(N_BINS - 1)
}

/// Mean true-goal probability in equal-width bins of fraction completed.
pub fn curve(scores: &[GroupScore]) -> Vec<Bin> {
    let mut sums = [0.0; N_BINS];
    let mut counts = [0usize; N_BINS];
    for s in scores {
        let b = bin_index(s.fraction);
        sums[b] += s.p_true;
        counts[b] += 1;
    }
    (0..N_BINS)
        .map(|b| Bin {
            lo: b as f64 / N_BINS as f64,
            hi: (b + 1) as f64 / N_BINS as f64,
            count: counts[b],
            mean: (counts[b] > 0).then(|| sums[b] / counts[b] as f64),
        })
        .collect()
}

/// Mean true-goal probability over goal sets at or beyond a fraction.
pub fn mean_from(scores: &[GroupScore], min_fraction: f64) -> Option<f64> {
    let v: Vec<f64> = scores.iter().filter(|s| s.fraction >= min_fraction).map(|s| s.p_true).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub overall: Vec<Bin>,
    pub by_scenario: BTreeMap<String, Vec<Bin>>,
    pub mean: Option<f64>,
    pub mean_second_half: Option<f64>,
    pub groups: usize,
}

pub fn method_report(method: &str, scores: &[GroupScore]) -> MethodReport {
    let mut per: BTreeMap<String, Vec<GroupScore>> = BTreeMap::new();
    for s in scores {
        per.entry(s.scenario_id.clone()).or_default().push(s.clone());
    }
    MethodReport {
        method: method.to_string(),
        overall: curve(scores),
        by_scenario: per.iter().map(|(k, v)| (k.clone(), curve(v))).collect(),
        mean: mean_from(scores, 0.0),
        mean_second_half: mean_from(scores, 0.5),
        groups: scores.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub calls: usize,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    pub fn from_durations(d: &[Duration]) -> Option<Self> {
        if d.is_empty() {
            return None;
        }
        let mut ms: Vec<f64> = d.iter().map(|x| x.as_secs_f64() * 1e3).collect();
        ms.sort_by(f64::total_cmp);
        let n = ms.len();
        let median = if n % 2 == 1 { ms[n / 2] } else { 0.5 * (ms[n / 2 - 1] + ms[n / 2]) };
        Some(LatencyStats {
            calls: n,
            median_ms: median,
            mean_ms: ms.iter().sum::<f64>() / n as f64,
            max_ms: ms[n - 1],
        })
    }
}

/// Times the full pipeline on (ego, target) pairs at one-second ticks, with
/// the two previous ticks as history. Stops after `max_calls` successful calls.
pub fn measure_latency(
    rec: &Recording,
    scene: &StaticScene,
    models: &Models,
    sensor_range: f64,
    max_calls: usize,
) -> Vec<Duration> {
    let ticks = rec.tick_indices();
    let mut out = Vec::new();
    for w in 2..ticks.len() {
        let frames: Vec<_> = ticks[w - 2..=w].iter().map(|i| rec.frames[*i].states.clone()).collect();
        let current = frames.last().unwrap();
        for &ego in current.keys() {
            for &target in current.keys() {
                if ego == target || out.len() >= max_calls {
                    continue;
                }
                if let (Ok(_), d) = run_pipeline_timed(&frames, ego, target, scene, models, sensor_range) {
                    out.push(d);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub methods: Vec<MethodReport>,
    pub groups_without_true_goal: usize,
    pub latency: Option<LatencyStats>,
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.3}"));
        writeln!(s, "{:<10} {:>7} {:>7} {:>7}", "method", "groups", "mean", "f>=0.5").unwrap();
        for m in &self.methods {
            writeln!(s, "{:<10} {:>7} {:>7} {:>7}", m.method, m.groups, fmt(m.mean), fmt(m.mean_second_half)).unwrap();
        }
        writeln!(s, "\ntrue-goal probability by fraction completed").unwrap();
        write!(s, "{:<10}", "bin").unwrap();
        for m in &self.methods {
            write!(s, " {:>9}", m.method).unwrap();
        }
        writeln!(s).unwrap();
        for b in 0..N_BINS {
            write!(s, "{:<10}", format!("{:.1}-{:.1}", b as f64 / 10.0, (b + 1) as f64 / 10.0)).unwrap();
            for m in &self.methods {
                write!(s, " {:>9}", fmt(m.overall[b].mean)).unwrap();
            }
            writeln!(s).unwrap();
        }
        writeln!(s, "goal sets without their true goal: {}", self.groups_without_true_goal).unwrap();
        if let Some(l) = self.latency {
            writeln!(
                s,
                "inference latency over {} calls: median {:.2} ms, mean {:.2} ms, max {:.2} ms",
                l.calls, l.median_ms, l.mean_ms, l.max_ms
            )
            .unwrap();
        }
        s
    }
}

/// Scores the models, the uniform baseline and optionally the oracle models
/// on their own (fully observed) sample rows.
pub fn evaluate(models: &Models, samples: &[Sample], oracle: Option<(&Models, &[Sample])>) -> Result<EvalReport> {
    let (ours, skipped) = score_groups(models, samples)?;
    let (uni, _) = uniform_scores(samples)?;
    let mut methods = vec![method_report("ogrit", &ours), method_report("uniform", &uni)];
    if let Some((om, os)) = oracle {
        let (o, _) = score_groups(om, os)?;
        methods.push(method_report("oracle", &o));
    }
    Ok(EvalReport {
        methods,
        groups_without_true_goal: skipped,
        latency: None,
    })
}
