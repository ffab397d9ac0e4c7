//! Interaction-relevant agent selection against the ego's ground-truth path,
//! the masked trajectory distance, and joint-mode assignment.

use serde::{Deserialize, Serialize};

use crate::geometry::{path_min_distance, Point2, Polyline};
use crate::model::{MarginalPredictionSet, SceneHypothesis};
use crate::scene::{gt_spatial_path, Scene};
use crate::{Error, Result};

/// Extra clearance on top of the half-width sum, meters.
pub const DEFAULT_MARGIN: f64 = 0.25;

/// Mean Euclidean error over valid steps.
pub fn masked_distance(pred: &[Point2], gt: &[Point2], valid: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() || gt.len() != valid.len() {
        return Err(Error::validation(format!(
            "trajectory lengths differ: {} / {} / {}",
            pred.len(),
            gt.len(),
            valid.len()
        )));
    }
    let (sum, n) = pred
        .iter()
        .zip(gt)
        .zip(valid)
        .filter(|(_, &v)| v)
        .fold((0.0, 0usize), |(s, n), ((p, g), _)| (s + p.dist(*g), n + 1));
    if n == 0 {
        return Err(Error::validation("masked distance over an all-invalid mask"));
    }
    Ok(sum / n as f64)
}

/// First index of the minimum; `None` for an empty slice.
pub fn argmin(values: &[f64]) -> Option<usize> {
    values
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, b)) if b <= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

/// Which ego ground truth defines the path agents are tested against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EgoCue {
    /// Timed waypoints: current position followed by the future.
    Temporal,
    /// Fixed 2 m arc-length samples.
    Spatial,
}

/// Ego path for the cue, in the scene's frame.
pub fn ego_cue_path(scene: &Scene, cue: EgoCue) -> Vec<Point2> {
    match cue {
        EgoCue::Spatial => gt_spatial_path(&scene.ego),
        EgoCue::Temporal => {
            let mut p = vec![scene.ego.current().position()];
            p.extend(scene.ego.future_points());
            p
        }
    }
}

/// Distance from a trajectory to a point path; a path collapsed to a single
/// point is treated as that point.
pub fn distance_to_path(traj: &[Point2], path: &[Point2]) -> f64 {
    match Polyline::from_points_dedup(path, 1e-9) {
        Ok(line) => path_min_distance(traj, &line),
        Err(_) => traj
            .iter()
            .map(|p| p.dist(path[0]))
            .fold(f64::INFINITY, f64::min),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InteractionEvidence {
    /// Index into the scene's agent list.
    pub agent: usize,
    /// Candidate with the smallest distance to the ego path.
    pub k: usize,
    pub distance: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InteractionSet {
    /// Sorted agent indices.
    pub members: Vec<usize>,
    pub evidence: Vec<InteractionEvidence>,
}

impl InteractionSet {
    pub fn contains(&self, agent: usize) -> bool {
        self.members.binary_search(&agent).is_ok()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Agents with supervised ground truth any of whose marginal candidates
/// passes within `ego half-width + agent half-width + margin` of `ego_path`.
pub fn select_interaction_set(
    scene: &Scene,
    marginal: &MarginalPredictionSet,
    ego_path: &[Point2],
    margin: f64,
) -> Result<InteractionSet> {
    if marginal.candidates.len() != scene.agents.len() {
        return Err(Error::validation(format!(
            "{} marginal sets for {} agents",
            marginal.candidates.len(),
            scene.agents.len()
        )));
    }
    if ego_path.is_empty() {
        return Err(Error::validation("empty ego path"));
    }
    let half_ego = 0.5 * scene.ego.footprint.width;
    let mut set = InteractionSet::default();
    for (i, (agent, cands)) in scene.agents.iter().zip(&marginal.candidates).enumerate() {
        if !agent.has_valid_future() {
            continue;
        }
        let threshold = half_ego + 0.5 * agent.footprint.width + margin;
        let dists: Vec<f64> = cands.iter().map(|c| distance_to_path(c, ego_path)).collect();
        if let Some(k) = argmin(&dists) {
            if dists[k] < threshold {
                set.members.push(i);
                set.evidence.push(InteractionEvidence {
                    agent: i,
                    k,
                    distance: dists[k],
                    threshold,
                });
            }
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentStrategy {
    /// Mode chosen by the ego trajectory error alone.
    EgoCentric,
    /// Mode chosen by the summed error over the ego and all supervised agents.
    AllActor,
}

/// Ground truth of one agent: future points and per-step validity.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentTarget {
    pub points: Vec<Point2>,
    pub valid: Vec<bool>,
}

impl AgentTarget {
    pub fn supervised(&self) -> bool {
        self.valid.iter().any(|&v| v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeAssignment {
    pub m_star: usize,
    /// Best marginal candidate per agent; `None` for unsupervised agents.
    pub k_star: Vec<Option<usize>>,
    /// Per-mode ego distances.
    pub ego_distances: Vec<f64>,
    /// Per-mode criterion minimised by `m_star`.
    pub distances: Vec<f64>,
}

/// Best marginal candidate of each supervised agent.
pub fn best_marginal_modes(marginal: &MarginalPredictionSet, agents: &[AgentTarget]) -> Result<Vec<Option<usize>>> {
    agents
        .iter()
        .zip(&marginal.candidates)
        .map(|(gt, cands)| {
            if !gt.supervised() {
                return Ok(None);
            }
            let d = cands
                .iter()
                .map(|c| masked_distance(c, &gt.points, &gt.valid))
                .collect::<Result<Vec<_>>>()?;
            Ok(argmin(&d))
        })
        .collect()
}

pub fn assign_modes(
    hyps: &[SceneHypothesis],
    ego_gt: &[Point2],
    marginal: &MarginalPredictionSet,
    agents: &[AgentTarget],
    strategy: AssignmentStrategy,
) -> Result<ModeAssignment> {
    if hyps.is_empty() {
        return Err(Error::validation("mode assignment needs at least one hypothesis"));
    }
    let all_valid = vec![true; ego_gt.len()];
    let ego_distances = hyps
        .iter()
        .map(|h| masked_distance(&h.ego_traj, ego_gt, &all_valid))
        .collect::<Result<Vec<_>>>()?;
    let distances = match strategy {
        AssignmentStrategy::EgoCentric => ego_distances.clone(),
        AssignmentStrategy::AllActor => hyps
            .iter()
            .zip(&ego_distances)
            .map(|(h, &de)| {
                let mut total = de;
                for (traj, gt) in h.agent_trajs.iter().zip(agents) {
                    if gt.supervised() {
                        total += masked_distance(traj, &gt.points, &gt.valid)?;
                    }
                }
                Ok(total)
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let m_star = argmin(&distances).expect("non-empty");
    Ok(ModeAssignment {
        m_star,
        k_star: best_marginal_modes(marginal, agents)?,
        ego_distances,
        distances,
    })
}
