//! Closed-loop evaluation: the ego executes the first waypoint of each plan
//! (a kinematic teleport with heading from displacement) and replans every
//! `DT`. Background agents replay their ground truth while it lasts, then
//! follow a gap-keeping rule.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{progress_along, Point2, Pose2};
use crate::reward::{score_comfort, step_contact, Mover};
use crate::scene::{ego_frame_transform, AgentState, ScenarioTag, Scene, DT, H, T_FUT};
use crate::{Error, Result};

/// Default episode length in replanning steps (8 s).
pub const DEFAULT_HORIZON: usize = 16;
/// The goal counts as reached within this distance of the route end, meters.
pub const GOAL_TOLERANCE: f64 = 2.0;
/// Time gap kept by background agents once their script is exhausted, s.
pub const FOLLOW_TIME_GAP: f64 = 2.0;
/// Standstill distance kept by background agents, meters.
pub const FOLLOW_MIN_GAP: f64 = 2.0;
/// Comfortable deceleration bound of background agents, m/s².
pub const FOLLOW_MAX_DECEL: f64 = 4.0;
pub const FOLLOW_MAX_ACCEL: f64 = 1.0;
const COLLISION_MULTIPLIER: f64 = 0.5;
const OFF_ROAD_MULTIPLIER: f64 = 0.7;

/// What the planner sees at one replanning step.
#[derive(Debug, Clone)]
pub struct Observation {
    /// Replanning calls since the episode start.
    pub step: usize,
    /// World pose of the ego; the origin of `scene`.
    pub frame: Pose2,
    /// Current state in the ego frame; futures are unknown and marked invalid.
    pub scene: Scene,
}

/// Produces an ego-frame plan; at least one waypoint must be returned.
pub trait Policy: Sync {
    fn plan(&self, obs: &Observation) -> Result<Vec<Point2>>;
}

/// Replays the recorded expert future, extrapolating at constant velocity
/// once it runs out.
pub struct OraclePolicy<'a> {
    scene: &'a Scene,
}

impl<'a> OraclePolicy<'a> {
    pub fn new(scene: &'a Scene) -> Self {
        Self { scene }
    }
}

impl Policy for OraclePolicy<'_> {
    fn plan(&self, obs: &Observation) -> Result<Vec<Point2>> {
        let gt = self.scene.ego.future_points();
        let n = gt.len();
        let target = if obs.step < n {
            gt[obs.step]
        } else {
            let v = gt[n - 1].sub(gt[n - 2]);
            gt[n - 1].add(v.scale((obs.step + 1 - n) as f64))
        };
        Ok(vec![obs.frame.to_local(target)])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub scene_id: u64,
    pub scenario_tag: ScenarioTag,
    pub success: bool,
    pub collided: bool,
    pub off_road: bool,
    pub goal_reached: bool,
    pub progress_ratio: f64,
    pub steps: usize,
    pub comfort: f64,
    pub driving_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub episodes: usize,
    pub success_rate: f64,
    pub driving_score: f64,
    pub collision_rate: f64,
    pub off_road_rate: f64,
    pub mean_progress: f64,
}

impl Aggregate {
    /// Order-independent summary: values are sorted before summation.
    pub fn of(results: &[EpisodeResult]) -> Self {
        let n = results.len();
        let mean = |f: &dyn Fn(&EpisodeResult) -> f64| {
            let mut v: Vec<f64> = results.iter().map(f).collect();
            v.sort_by(f64::total_cmp);
            v.iter().sum::<f64>() / n.max(1) as f64
        };
        let rate = |f: &dyn Fn(&EpisodeResult) -> bool| {
            results.iter().filter(|r| f(r)).count() as f64 / n.max(1) as f64
        };
        Self {
            episodes: n,
            success_rate: rate(&|r| r.success),
            driving_score: mean(&|r| r.driving_score),
            collision_rate: rate(&|r| r.collided),
            off_road_rate: rate(&|r| r.off_road),
            mean_progress: mean(&|r| r.progress_ratio),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Aggregate,
    pub per_tag: BTreeMap<String, Aggregate>,
    pub episodes: Vec<EpisodeResult>,
}

/// Background agent state during simulation.
#[derive(Debug, Clone)]
struct SimAgent {
    footprint: crate::geometry::Footprint,
    poses: Vec<Pose2>,
    script: Vec<Pose2>,
    speed: f64,
}

impl SimAgent {
    fn new(a: &AgentState) -> Self {
        Self {
            footprint: a.footprint,
            poses: a.history.clone(),
            script: a.gt_future.clone(),
            speed: a.speed(),
        }
    }

    fn current(&self) -> Pose2 {
        *self.poses.last().expect("history is non-empty")
    }
}

/// Gap-keeping acceleration toward `desired_speed` given the bumper gap to
/// the nearest entity ahead; bounded by the comfortable deceleration.
pub fn follow_accel(speed: f64, desired_speed: f64, gap: Option<f64>) -> f64 {
    let free = ((desired_speed - speed) / DT).clamp(-FOLLOW_MAX_DECEL, FOLLOW_MAX_ACCEL);
    match gap {
        Some(g) => {
            let desired = FOLLOW_MIN_GAP + FOLLOW_TIME_GAP * speed;
            if g < desired {
                let brake = -FOLLOW_MAX_DECEL * (1.0 - g.max(0.0) / desired);
                brake.min(free).max(-FOLLOW_MAX_DECEL)
            } else {
                free
            }
        }
        None => free,
    }
}

/// Bumper gap from `me` to the closest entity ahead inside its lane corridor.
fn gap_ahead(me: &Pose2, my_fp: &crate::geometry::Footprint, others: &[(Pose2, crate::geometry::Footprint)]) -> Option<f64> {
    others
        .iter()
        .filter_map(|(p, fp)| {
            let rel = me.to_local(p.position());
            let corridor = 0.5 * (my_fp.width + fp.width) + 0.5;
            (rel.x > 0.0 && rel.y.abs() < corridor)
                .then(|| rel.x - 0.5 * (my_fp.length + fp.length))
        })
        .min_by(f64::total_cmp)
}

struct Simulation<'a> {
    scene: &'a Scene,
    ego_poses: Vec<Pose2>,
    agents: Vec<SimAgent>,
    step: usize,
}

impl<'a> Simulation<'a> {
    fn new(scene: &'a Scene) -> Self {
        Self {
            scene,
            ego_poses: scene.ego.history.clone(),
            agents: scene.agents.iter().map(SimAgent::new).collect(),
            step: 0,
        }
    }

    fn ego(&self) -> Pose2 {
        *self.ego_poses.last().expect("history is non-empty")
    }

    /// Ego-frame observation of the current state; futures are unknown.
    fn observe(&self) -> Observation {
        let last_h = |poses: &[Pose2]| poses[poses.len() - H..].to_vec();
        let mut world = self.scene.clone();
        let ego_now = self.ego();
        world.ego.history = last_h(&self.ego_poses);
        world.ego.gt_future = vec![ego_now; T_FUT];
        for (a, s) in world.agents.iter_mut().zip(&self.agents) {
            a.history = last_h(&s.poses);
            a.gt_future = vec![s.current(); T_FUT];
            a.gt_valid = vec![false; T_FUT];
        }
        Observation {
            step: self.step,
            frame: ego_now,
            scene: ego_frame_transform(&world),
        }
    }

    fn advance_agents(&mut self) -> Vec<Mover> {
        let ego = (self.ego(), self.scene.ego.footprint);
        let currents: Vec<(Pose2, crate::geometry::Footprint)> =
            self.agents.iter().map(|a| (a.current(), a.footprint)).collect();
        let step = self.step;
        let mut movers = Vec::with_capacity(self.agents.len());
        for (i, a) in self.agents.iter_mut().enumerate() {
            let from = a.current();
            let to = if step < a.script.len() {
                let to = a.script[step];
                a.speed = to.position().dist(from.position()) / DT;
                to
            } else {
                let mut others: Vec<_> = currents
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, o)| *o)
                    .collect();
                others.push(ego);
                let gap = gap_ahead(&from, &a.footprint, &others);
                let desired = a.speed.max(0.0);
                let acc = follow_accel(a.speed, desired, gap);
                let v1 = (a.speed + acc * DT).max(0.0);
                let d = 0.5 * (a.speed + v1) * DT;
                a.speed = v1;
                let p = from.position().add(Point2::unit(from.heading).scale(d));
                Pose2::new(p.x, p.y, from.heading)
            };
            a.poses.push(to);
            movers.push(Mover {
                from,
                to,
                footprint: a.footprint,
            });
        }
        movers
    }
}

/// Runs one closed-loop episode of at most `horizon` replanning steps.
pub fn run_episode(scene: &Scene, policy: &dyn Policy, horizon: usize) -> Result<EpisodeResult> {
    let mut sim = Simulation::new(scene);
    let route = &scene.route;
    let route_len = route.length();
    let start_progress = progress_along(route, scene.ego_pose().position());
    let mut collided = false;
    let mut off_road = false;
    let mut goal = false;
    while sim.step < horizon {
        let obs = sim.observe();
        let frame = obs.frame;
        let plan = policy.plan(&obs)?;
        let first = *plan
            .first()
            .ok_or_else(|| Error::validation("policy returned an empty plan"))?;
        if !first.is_finite() {
            return Err(Error::NonFinite {
                context: "policy waypoint".into(),
            });
        }
        let target = frame.to_world(first);
        let disp = target.sub(frame.position());
        let heading = if disp.norm() > 0.05 {
            disp.y.atan2(disp.x)
        } else {
            frame.heading
        };
        let next = Pose2::new(target.x, target.y, heading);
        let movers = sim.advance_agents();
        sim.ego_poses.push(next);
        sim.step += 1;
        if step_contact(&frame, &next, &scene.ego.footprint, &movers, sim.step == 1).is_some() {
            collided = true;
            break;
        }
        if !scene.drivable.contains(next.position()) {
            off_road = true;
            break;
        }
        if progress_along(route, next.position()) >= route_len - GOAL_TOLERANCE {
            goal = true;
            break;
        }
    }
    let end = sim.ego().position();
    let progress_ratio =
        ((progress_along(route, end) - start_progress) / (route_len - start_progress).max(0.1)).max(0.0);
    let executed: Vec<Point2> = sim.ego_poses[H - 2..].iter().map(|p| p.position()).collect();
    let comfort = score_comfort(&executed, DT).score;
    let mut driving_score = progress_ratio.min(1.0);
    if collided {
        driving_score *= COLLISION_MULTIPLIER;
    }
    if off_road {
        driving_score *= OFF_ROAD_MULTIPLIER;
    }
    Ok(EpisodeResult {
        scene_id: scene.scene_id,
        scenario_tag: scene.scenario_tag,
        success: goal && !collided && !off_road,
        collided,
        off_road,
        goal_reached: goal,
        progress_ratio,
        steps: sim.step,
        comfort,
        driving_score,
    })
}

/// Episode with the expert replay policy; used to certify generated scenes.
pub fn oracle_episode(scene: &Scene) -> EpisodeResult {
    run_episode(scene, &OraclePolicy::new(scene), DEFAULT_HORIZON).unwrap_or_else(|_| EpisodeResult {
        scene_id: scene.scene_id,
        scenario_tag: scene.scenario_tag,
        success: false,
        collided: false,
        off_road: false,
        goal_reached: false,
        progress_ratio: 0.0,
        steps: 0,
        comfort: 0.0,
        driving_score: 0.0,
    })
}

/// Closed-loop evaluation over a scene set with per-tag breakdown.
pub fn evaluate(scenes: &[Scene], policy: &dyn Policy, horizon: usize) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::validation("evaluation needs at least one scene"));
    }
    let episodes = scenes
        .par_iter()
        .map(|s| run_episode(s, policy, horizon))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(episodes))
}

pub fn summarize(episodes: Vec<EpisodeResult>) -> EvalReport {
    let mut per_tag = BTreeMap::new();
    for tag in ScenarioTag::ALL {
        let subset: Vec<EpisodeResult> = episodes
            .iter()
            .filter(|e| e.scenario_tag == tag)
            .cloned()
            .collect();
        if !subset.is_empty() {
            per_tag.insert(tag.as_str().to_string(), Aggregate::of(&subset));
        }
    }
    EvalReport {
        overall: Aggregate::of(&episodes),
        per_tag,
        episodes,
    }
}
