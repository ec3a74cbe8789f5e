//! Goal posterior for a target vehicle as seen by an ego vehicle.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::dtree::Models;
use crate::error::{Error, Result};
use crate::features::{extract_features, FeatureVector};
use crate::goals::{generate_goals, DEFAULT_MAX_DEPTH};
use crate::occlusion::{compute_occluded_regions, compute_shadows};
use crate::scene::{observable_vehicles, Goal, Observation, StaticScene, VehicleId, VehicleState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorEntry {
    pub goal: Goal,
    pub prior: f64,
    pub likelihood: f64,
    pub posterior: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalPosterior {
    pub vehicle_id: VehicleId,
    pub time: f64,
    pub entries: Vec<PosteriorEntry>,
}

impl GoalPosterior {
    pub fn probabilities(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.posterior).collect()
    }
}

pub fn uniform_priors(k: usize) -> Vec<f64> {
    vec![1.0 / k as f64; k]
}

/// p_k = L_k * prior_k / sum_j L_j * prior_j.
pub fn posterior(likelihoods: &[f64], priors: &[f64]) -> Result<Vec<f64>> {
    if likelihoods.is_empty() || likelihoods.len() != priors.len() {
        return Err(Error::Config(format!(
            "need equal, non-zero numbers of likelihoods and priors ({} vs {})",
            likelihoods.len(),
            priors.len()
        )));
    }
    if priors.iter().any(|p| !(*p > 0.0)) {
        return Err(Error::Config("priors must be positive".into()));
    }
    let total: f64 = priors.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("priors sum to {total}, not 1")));
    }
    if likelihoods.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Error::Config("likelihoods must be finite and non-negative".into()));
    }
    let joint: Vec<f64> = likelihoods.iter().zip(priors).map(|(l, p)| l * p).collect();
    let z: f64 = joint.iter().sum();
    if !(z > 0.0) {
        return Err(Error::Degenerate("all goals have zero probability mass".into()));
    }
    Ok(joint.into_iter().map(|j| j / z).collect())
}

/// Shannon entropy in bits with 0 log 0 = 0.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|x| **x > 0.0).map(|x| -x * x.log2()).sum()
}

/// Builds the ego's observation history from raw sample frames. Only the
/// visibility of vehicles is needed for past frames.
pub fn observe_history(
    frames: &[BTreeMap<VehicleId, VehicleState>],
    scene: &StaticScene,
    ego: VehicleId,
    sensor_range: f64,
) -> Result<Vec<Observation>> {
    frames
        .iter()
        .filter(|f| f.contains_key(&ego))
        .map(|f| {
            let shadows = compute_shadows(f, scene, ego, sensor_range)?;
            observable_vehicles(f, ego, &shadows)
        })
        .collect()
}

/// Per-goal features and the posterior for a target, given the ego's
/// observation history and the current raw frame.
pub fn infer_from_history(
    history: &[Observation],
    current: &BTreeMap<VehicleId, VehicleState>,
    ego: VehicleId,
    target: VehicleId,
    scene: &StaticScene,
    models: &Models,
    sensor_range: f64,
) -> Result<(GoalPosterior, Vec<FeatureVector>)> {
    let obs = history
        .last()
        .ok_or_else(|| Error::Contract("empty observation history".into()))?;
    let state = obs
        .visible
        .get(&target)
        .ok_or_else(|| Error::Contract(format!("target {target} not visible to ego {ego}")))?;
    let occ = compute_occluded_regions(current, scene, ego, sensor_range)?;
    let goals = generate_goals(state, scene, DEFAULT_MAX_DEPTH)?;
    let mut lik = Vec::with_capacity(goals.goals.len());
    let mut fvs = Vec::with_capacity(goals.goals.len());
    for g in &goals.goals {
        let fv = extract_features(history, target, g, scene, &occ, DEFAULT_MAX_DEPTH)?;
        lik.push(models.get(g.goal_type)?.likelihood(&fv)?);
        fvs.push(fv);
    }
    let priors = uniform_priors(lik.len());
    let post = posterior(&lik, &priors)?;
    let entries = goals
        .goals
        .into_iter()
        .zip(lik)
        .zip(priors)
        .zip(post)
        .map(|(((goal, likelihood), prior), posterior)| PosteriorEntry {
            goal,
            prior,
            likelihood,
            posterior,
        })
        .collect();
    Ok((
        GoalPosterior {
            vehicle_id: target,
            time: obs.time,
            entries,
        },
        fvs,
    ))
}

/// Full pipeline on raw sample frames (oldest first, current last):
/// occlusions, goals, features, tree likelihoods and posterior.
pub fn run_pipeline(
    frames: &[BTreeMap<VehicleId, VehicleState>],
    ego: VehicleId,
    target: VehicleId,
    scene: &StaticScene,
    models: &Models,
    sensor_range: f64,
) -> Result<GoalPosterior> {
    let current = frames
        .last()
        .ok_or_else(|| Error::Contract("no frames given".into()))?;
    let history = observe_history(frames, scene, ego, sensor_range)?;
    infer_from_history(&history, current, ego, target, scene, models, sensor_range).map(|(p, _)| p)
}

/// `run_pipeline` with its wall time.
pub fn run_pipeline_timed(
    frames: &[BTreeMap<VehicleId, VehicleState>],
    ego: VehicleId,
    target: VehicleId,
    scene: &StaticScene,
    models: &Models,
    sensor_range: f64,
) -> (Result<GoalPosterior>, Duration) {
    let start = Instant::now();
    let r = run_pipeline(frames, ego, target, scene, models, sensor_range);
    (r, start.elapsed())
}
