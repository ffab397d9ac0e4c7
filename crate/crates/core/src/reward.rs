//! Planning reward for a candidate ego rollout: multiplicative safety
//! penalties (no collision, drivable area, driving direction) times a weighted
//! mean of ego progress, time-to-collision and comfort.
//!
//! Rollouts are `T_FUT` points in the ego frame of the scene, at `DT`
//! spacing after the current pose. Agents follow their ground-truth futures.

use serde::{Deserialize, Serialize};

use crate::geometry::{
    normalize_angle, progress_along, rect_overlap, DrivablePolygon, Footprint, Point2, Polyline,
    Pose2,
};
use crate::scene::{ego_frame_transform, Scene, DT, T_FUT};
use crate::{Error, Result};

pub const W_EP: f64 = 5.0;
pub const W_TTC: f64 = 5.0;
pub const W_COMFORT: f64 = 2.0;
/// Opposite-direction travel tolerated without penalty, meters.
pub const DD_COMPLY: f64 = 2.0;
/// Opposite-direction travel at which the direction score reaches 0, meters.
pub const DD_VIOLATE: f64 = 6.0;
/// Subdivisions of each `DT` step for collision checks (0.1 s grid).
pub const SUBSTEPS: usize = 5;
pub const TTC_HORIZON: f64 = 1.0;
pub const TTC_STEP: f64 = 0.1;
/// Ego speed below which a rear strike is not the ego's fault, m/s.
pub const STATIONARY_SPEED: f64 = 0.1;
/// Rollouts leaving this box (ego frame, meters) are rejected as degenerate.
pub const SANITY_BOX: f64 = 500.0;
/// Lanes farther than this from a rollout segment impose no direction.
pub const LANE_CAPTURE: f64 = 5.0;
/// Headings are held when a step moves less than this, meters.
const HEADING_MIN_STEP: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComfortMetric {
    Accel,
    Decel,
    LateralAccel,
    Jerk,
    YawRate,
    YawAccel,
}

impl ComfortMetric {
    pub const ALL: [ComfortMetric; 6] = [
        ComfortMetric::Accel,
        ComfortMetric::Decel,
        ComfortMetric::LateralAccel,
        ComfortMetric::Jerk,
        ComfortMetric::YawRate,
        ComfortMetric::YawAccel,
    ];

    pub fn threshold(self) -> f64 {
        match self {
            ComfortMetric::Accel => 2.40,
            ComfortMetric::Decel => 4.05,
            ComfortMetric::LateralAccel => 4.89,
            ComfortMetric::Jerk => 8.37,
            ComfortMetric::YawRate => 0.95,
            ComfortMetric::YawAccel => 1.93,
        }
    }

    /// Violation scale `α_k`.
    pub fn alpha(self) -> f64 {
        0.5 * self.threshold()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComfortTerm {
    pub metric: ComfortMetric,
    /// Largest observed magnitude.
    pub peak: f64,
    pub delta: f64,
    pub alpha: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComfortReport {
    pub terms: Vec<ComfortTerm>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub nc: f64,
    pub dac: f64,
    pub dd: f64,
    pub ep: f64,
    pub ttc: f64,
    pub comfort: f64,
    pub d_opp: f64,
    /// First step (1-based) with a projected overlap.
    pub t_ttc: Option<usize>,
    pub comfort_terms: Vec<ComfortTerm>,
    /// Any contact, regardless of fault.
    pub collided: bool,
    pub at_fault: bool,
    pub reward: f64,
}

/// `nc·dac·dd·(5·ep + 5·ttc + 2·comfort)/12`.
pub fn aggregate(nc: f64, dac: f64, dd: f64, ep: f64, ttc: f64, comfort: f64) -> f64 {
    nc * dac * dd * (W_EP * ep + W_TTC * ttc + W_COMFORT * comfort) / (W_EP + W_TTC + W_COMFORT)
}

/// Piecewise-linear direction score of the opposite-direction travel `d_opp`.
pub fn dd_from_distance(d_opp: f64) -> f64 {
    if d_opp <= DD_COMPLY {
        1.0
    } else if d_opp >= DD_VIOLATE {
        0.0
    } else {
        1.0 - (d_opp - DD_COMPLY) / (DD_VIOLATE - DD_COMPLY)
    }
}

/// `min(t_ttc, T)/T`, or 1 without an infraction.
pub fn ttc_from_step(t_ttc: Option<usize>, horizon: usize) -> f64 {
    match t_ttc {
        Some(t) => t.min(horizon) as f64 / horizon as f64,
        None => 1.0,
    }
}

/// Fraction of rollout points inside the drivable polygon.
pub fn score_dac(points: &[Point2], drivable: &DrivablePolygon) -> f64 {
    if points.is_empty() {
        return 1.0;
    }
    let outside = points.iter().filter(|&&p| !drivable.contains(p)).count();
    1.0 - outside as f64 / points.len() as f64
}

/// Direction score of the path `start, points...` against lane directions;
/// returns `(score, d_opp)` where `d_opp` is the largest contiguous run of
/// travel against the nearest lane's tangent.
pub fn score_dd(start: Point2, points: &[Point2], lanes: &[Polyline]) -> (f64, f64) {
    let mut run: f64 = 0.0;
    let mut best: f64 = 0.0;
    let mut prev = start;
    for &p in points {
        let disp = p.sub(prev);
        let mid = prev.lerp(p, 0.5);
        let nearest = lanes
            .iter()
            .map(|l| {
                let (s, d, _) = l.project(mid);
                (d, l.tangent_at(s))
            })
            .min_by(|a, b| a.0.total_cmp(&b.0));
        let along = match nearest {
            Some((d, t)) if d <= LANE_CAPTURE => disp.dot(t),
            _ => 0.0,
        };
        if along < 0.0 {
            run -= along;
            best = best.max(run);
        } else {
            run = 0.0;
        }
        prev = p;
    }
    (dd_from_distance(best), best)
}

/// Continuous comfort score of a point sequence sampled every `dt` seconds.
pub fn score_comfort(points: &[Point2], dt: f64) -> ComfortReport {
    let vel: Vec<Point2> = points
        .windows(2)
        .map(|w| w[1].sub(w[0]).scale(1.0 / dt))
        .collect();
    let speed: Vec<f64> = vel.iter().map(|v| v.norm()).collect();
    // headings of slow steps are carried from the nearest moving step
    let mut heading: Vec<Option<f64>> = vel
        .iter()
        .zip(&speed)
        .map(|(v, &s)| (s * dt > HEADING_MIN_STEP).then(|| v.y.atan2(v.x)))
        .collect();
    let first = heading.iter().flatten().next().copied().unwrap_or(0.0);
    let mut last = first;
    for h in heading.iter_mut() {
        match h {
            Some(v) => last = *v,
            None => *h = Some(last),
        }
    }
    let heading: Vec<f64> = heading.into_iter().flatten().collect();

    let accel: Vec<f64> = speed.windows(2).map(|w| (w[1] - w[0]) / dt).collect();
    let yaw_rate: Vec<f64> = heading
        .windows(2)
        .map(|w| normalize_angle(w[1] - w[0]) / dt)
        .collect();
    let lateral: Vec<f64> = yaw_rate
        .iter()
        .enumerate()
        .map(|(i, w)| 0.5 * (speed[i] + speed[i + 1]) * w)
        .collect();
    let jerk: Vec<f64> = accel.windows(2).map(|w| (w[1] - w[0]) / dt).collect();
    let yaw_accel: Vec<f64> = yaw_rate.windows(2).map(|w| (w[1] - w[0]) / dt).collect();

    let max_of = |xs: &mut dyn Iterator<Item = f64>| xs.fold(0.0_f64, f64::max);
    let terms: Vec<ComfortTerm> = ComfortMetric::ALL
        .into_iter()
        .map(|metric| {
            let peak = match metric {
                ComfortMetric::Accel => max_of(&mut accel.iter().copied()),
                ComfortMetric::Decel => max_of(&mut accel.iter().map(|a| -a)),
                ComfortMetric::LateralAccel => max_of(&mut lateral.iter().map(|a| a.abs())),
                ComfortMetric::Jerk => max_of(&mut jerk.iter().map(|a| a.abs())),
                ComfortMetric::YawRate => max_of(&mut yaw_rate.iter().map(|a| a.abs())),
                ComfortMetric::YawAccel => max_of(&mut yaw_accel.iter().map(|a| a.abs())),
            };
            comfort_term(metric, peak)
        })
        .collect();
    let score = terms.iter().map(|t| t.score).fold(1.0, f64::min);
    ComfortReport { terms, score }
}

/// `s_k = exp(−Δ_k/α_k)` with `Δ_k = max(0, peak − threshold_k)`.
pub fn comfort_term(metric: ComfortMetric, peak: f64) -> ComfortTerm {
    let delta = (peak - metric.threshold()).max(0.0);
    let alpha = metric.alpha();
    ComfortTerm {
        metric,
        peak,
        delta,
        alpha,
        score: (-delta / alpha).exp(),
    }
}

/// Route-progress ratio of the rollout against the reference progress.
pub fn score_ep(route: &Polyline, start: Point2, end: Point2, reference: f64) -> f64 {
    let made = progress_along(route, end) - progress_along(route, start);
    (made / reference.max(0.1)).clamp(0.0, 1.0)
}

/// Poses along `points` starting from `start`; each heading follows the
/// displacement into that point and is held across near-zero steps.
pub fn poses_from_points(start: Pose2, points: &[Point2]) -> Vec<Pose2> {
    let mut out = Vec::with_capacity(points.len() + 1);
    out.push(start);
    let mut heading = start.heading;
    let mut prev = start.position();
    for &p in points {
        let d = p.sub(prev);
        if d.norm() > HEADING_MIN_STEP {
            heading = d.y.atan2(d.x);
        }
        out.push(Pose2::new(p.x, p.y, heading));
        prev = p;
    }
    out
}

/// Linear pose interpolation with shortest-arc heading.
pub fn lerp_pose(a: &Pose2, b: &Pose2, u: f64) -> Pose2 {
    let p = a.position().lerp(b.position(), u);
    Pose2::new(p.x, p.y, a.heading + u * normalize_angle(b.heading - a.heading))
}

/// Another entity moving across one `DT` step.
#[derive(Debug, Clone, Copy)]
pub struct Mover {
    pub from: Pose2,
    pub to: Pose2,
    pub footprint: Footprint,
}

/// First substep `j ∈ 0..=SUBSTEPS` at which the ego touches any mover while
/// both move linearly across one step; `j = 0` is only tested when
/// `include_start` is set. Returns `(j, mover index)`.
pub fn step_contact(
    ego_from: &Pose2,
    ego_to: &Pose2,
    ego_fp: &Footprint,
    movers: &[Mover],
    include_start: bool,
) -> Option<(usize, usize)> {
    let j0 = if include_start { 0 } else { 1 };
    for j in j0..=SUBSTEPS {
        let u = j as f64 / SUBSTEPS as f64;
        let e = lerp_pose(ego_from, ego_to, u);
        for (i, m) in movers.iter().enumerate() {
            let a = lerp_pose(&m.from, &m.to, u);
            if rect_overlap(&e, ego_fp, &a, &m.footprint) {
                return Some((j, i));
            }
        }
    }
    None
}

/// Whether a contact counts against the ego: everything except a strike from
/// behind (bearing within 45° of the rear axis) on a stationary ego.
pub fn at_fault(ego: &Pose2, ego_speed: f64, other: &Pose2) -> bool {
    if ego_speed >= STATIONARY_SPEED {
        return true;
    }
    let rel = ego.to_local(other.position());
    let bearing = rel.y.atan2(rel.x);
    normalize_angle(bearing - std::f64::consts::PI).abs() > std::f64::consts::FRAC_PI_4
}

struct AgentTrack {
    footprint: Footprint,
    /// Current pose followed by `T_FUT` future poses.
    poses: Vec<Pose2>,
    valid: Vec<bool>,
}

/// Precomputed ego-frame view of a scene for repeated rollout scoring.
pub struct RewardContext {
    ego_fp: Footprint,
    ego_start: Pose2,
    prev_point: Point2,
    agents: Vec<AgentTrack>,
    route: Polyline,
    drivable: DrivablePolygon,
    lanes: Vec<Polyline>,
    reference_progress: f64,
}

impl RewardContext {
    pub fn new(scene: &Scene) -> Result<Self> {
        let s = ego_frame_transform(scene);
        let ego_start = s.ego_pose();
        let h = &s.ego.history;
        let prev_point = h[h.len().saturating_sub(2)].position();
        let agents = s
            .agents
            .iter()
            .map(|a| {
                let mut poses = vec![a.current()];
                poses.extend(a.gt_future.iter().copied());
                let mut valid = vec![true];
                valid.extend(a.gt_valid.iter().copied());
                AgentTrack {
                    footprint: a.footprint,
                    poses,
                    valid,
                }
            })
            .collect();
        let gt_end = s.ego.gt_future[T_FUT - 1].position();
        let reference_progress =
            progress_along(&s.route, gt_end) - progress_along(&s.route, ego_start.position());
        Ok(Self {
            ego_fp: s.ego.footprint,
            ego_start,
            prev_point,
            agents,
            route: s.route,
            drivable: s.drivable,
            lanes: s.direction_field,
            reference_progress,
        })
    }

    pub fn reference_progress(&self) -> f64 {
        self.reference_progress
    }

    fn movers(&self, k: usize) -> Vec<Mover> {
        self.agents
            .iter()
            .filter(|a| a.valid[k - 1] && a.valid[k])
            .map(|a| Mover {
                from: a.poses[k - 1],
                to: a.poses[k],
                footprint: a.footprint,
            })
            .collect()
    }

    /// No-collision score on the 0.1 s grid: `(nc, collided, at_fault)`.
    pub fn score_nc(&self, poses: &[Pose2]) -> (f64, bool, bool) {
        let mut collided = false;
        let mut fault = false;
        for k in 1..poses.len() {
            let speed = poses[k].position().dist(poses[k - 1].position()) / DT;
            let movers = self.movers(k);
            for j in (if k == 1 { 0 } else { 1 })..=SUBSTEPS {
                let u = j as f64 / SUBSTEPS as f64;
                let e = lerp_pose(&poses[k - 1], &poses[k], u);
                for m in &movers {
                    let a = lerp_pose(&m.from, &m.to, u);
                    if rect_overlap(&e, &self.ego_fp, &a, &m.footprint) {
                        collided = true;
                        fault |= at_fault(&e, speed, &a);
                    }
                }
            }
        }
        (if fault { 0.0 } else { 1.0 }, collided, fault)
    }

    /// First step whose constant-velocity projection over the TTC horizon overlaps an agent.
    pub fn first_ttc_infraction(&self, poses: &[Pose2]) -> Option<usize> {
        let n_proj = (TTC_HORIZON / TTC_STEP).round() as usize;
        for k in 1..poses.len() {
            let ve = poses[k].position().sub(poses[k - 1].position()).scale(1.0 / DT);
            for a in self.agents.iter().filter(|a| a.valid[k] && a.valid[k - 1]) {
                let va = a.poses[k].position().sub(a.poses[k - 1].position()).scale(1.0 / DT);
                for j in 0..=n_proj {
                    let tau = j as f64 * TTC_STEP;
                    let pe = poses[k].position().add(ve.scale(tau));
                    let pa = a.poses[k].position().add(va.scale(tau));
                    let e = Pose2::new(pe.x, pe.y, poses[k].heading);
                    let o = Pose2::new(pa.x, pa.y, a.poses[k].heading);
                    if rect_overlap(&e, &self.ego_fp, &o, &a.footprint) {
                        return Some(k);
                    }
                }
            }
        }
        None
    }

    /// Scores an ego-frame rollout of `T_FUT` points.
    pub fn score(&self, rollout: &[Point2]) -> Result<RewardBreakdown> {
        if rollout.len() != T_FUT {
            return Err(Error::validation(format!(
                "rollout has {} points, expected {T_FUT}",
                rollout.len()
            )));
        }
        if let Some(p) = rollout
            .iter()
            .find(|p| !p.is_finite() || p.x.abs() > SANITY_BOX || p.y.abs() > SANITY_BOX)
        {
            return Err(Error::validation(format!(
                "rollout point {p:?} leaves the {SANITY_BOX} m sanity box"
            )));
        }
        let poses = poses_from_points(self.ego_start, rollout);
        let (nc, collided, fault) = self.score_nc(&poses);
        let dac = score_dac(rollout, &self.drivable);
        let (dd, d_opp) = score_dd(self.ego_start.position(), rollout, &self.lanes);
        let t_ttc = self.first_ttc_infraction(&poses);
        let ttc = ttc_from_step(t_ttc, T_FUT);
        let mut seq = vec![self.prev_point, self.ego_start.position()];
        seq.extend_from_slice(rollout);
        let comfort = score_comfort(&seq, DT);
        let ep = score_ep(
            &self.route,
            self.ego_start.position(),
            rollout[T_FUT - 1],
            self.reference_progress,
        );
        Ok(RewardBreakdown {
            nc,
            dac,
            dd,
            ep,
            ttc,
            comfort: comfort.score,
            d_opp,
            t_ttc,
            comfort_terms: comfort.terms,
            collided,
            at_fault: fault,
            reward: aggregate(nc, dac, dd, ep, ttc, comfort.score),
        })
    }

    /// Reward for an agent rollout under all-agent alignment: the agent's own
    /// contact-free indicator times its comfort, against the ego's and the
    /// other agents' ground truth. Returns `(reward, collided)`.
    pub fn score_agent(&self, ego_gt: &[Point2], agent: usize, rollout: &[Point2]) -> Result<(f64, bool)> {
        let track = self
            .agents
            .get(agent)
            .ok_or_else(|| Error::validation(format!("no agent {agent}")))?;
        if rollout.len() != T_FUT || rollout.iter().any(|p| !p.is_finite() || p.x.abs() > SANITY_BOX || p.y.abs() > SANITY_BOX) {
            return Err(Error::validation("degenerate agent rollout"));
        }
        let poses = poses_from_points(track.poses[0], rollout);
        let ego_poses = poses_from_points(self.ego_start, ego_gt);
        let mut collided = false;
        for k in 1..poses.len() {
            let mut movers: Vec<Mover> = self
                .agents
                .iter()
                .enumerate()
                .filter(|(i, a)| *i != agent && a.valid[k - 1] && a.valid[k])
                .map(|(_, a)| Mover {
                    from: a.poses[k - 1],
                    to: a.poses[k],
                    footprint: a.footprint,
                })
                .collect();
            movers.push(Mover {
                from: ego_poses[k - 1],
                to: ego_poses[k],
                footprint: self.ego_fp,
            });
            if step_contact(&poses[k - 1], &poses[k], &track.footprint, &movers, k == 1).is_some() {
                collided = true;
                break;
            }
        }
        let mut seq = vec![track.poses[0].position()];
        seq.extend_from_slice(rollout);
        let comfort = score_comfort(&seq, DT).score;
        Ok((if collided { 0.0 } else { comfort }, collided))
    }
}

/// Scores one ego-frame rollout against a scene.
pub fn score_rollout(rollout: &[Point2], scene: &Scene) -> Result<RewardBreakdown> {
    RewardContext::new(scene)?.score(rollout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn straight(n: usize, step: f64) -> Vec<Point2> {
        (0..n).map(|i| Point2::new(i as f64 * step, 0.0)).collect()
    }

    #[test]
    fn aggregate_of_fixture() {
        let r = aggregate(1.0, 1.0, 1.0, 0.8, 1.0, 0.5);
        assert_abs_diff_eq!(r, 10.0 / 12.0, epsilon = 1e-12);
        assert_eq!(aggregate(0.0, 1.0, 1.0, 1.0, 1.0, 1.0), 0.0);
    }

    #[test]
    fn dd_piecewise() {
        assert_eq!(dd_from_distance(0.0), 1.0);
        assert_eq!(dd_from_distance(2.0), 1.0);
        assert_abs_diff_eq!(dd_from_distance(4.0), 0.5, epsilon = 1e-12);
        assert_eq!(dd_from_distance(6.0), 0.0);
        assert_eq!(dd_from_distance(9.0), 0.0);
    }

    #[test]
    fn dd_accumulates_reverse_travel() {
        let lane = Polyline::new(vec![Point2::new(-50.0, 0.0), Point2::new(50.0, 0.0)]).unwrap();
        let fwd = straight(8, 1.0)[1..].to_vec();
        assert_eq!(score_dd(Point2::new(0.0, 0.0), &fwd, std::slice::from_ref(&lane)).1, 0.0);
        let back: Vec<Point2> = (1..=4).map(|i| Point2::new(-(i as f64), 0.0)).collect();
        let (s, d) = score_dd(Point2::new(0.0, 0.0), &back, &[lane]);
        assert_abs_diff_eq!(d, 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn ttc_formula() {
        assert_eq!(ttc_from_step(None, 8), 1.0);
        assert_eq!(ttc_from_step(Some(4), 8), 0.5);
        assert_eq!(ttc_from_step(Some(1), 8), 0.125);
    }

    #[test]
    fn dac_fraction() {
        let r = crate::geometry::rectangle(-1.0, -1.0, 6.5, 1.0).unwrap();
        let pts = straight(8, 1.0)[..].iter().map(|p| p.add(Point2::new(1.0, 0.0))).collect::<Vec<_>>();
        // x = 1..=8, two points beyond 6.5
        assert_abs_diff_eq!(score_dac(&pts, &r), 0.75, epsilon = 1e-12);
    }

    #[test]
    fn comfort_constant_velocity_is_one() {
        let r = score_comfort(&straight(10, 5.0), DT);
        assert_eq!(r.score, 1.0);
        assert!(r.terms.iter().all(|t| t.delta == 0.0));
    }

    #[test]
    fn comfort_single_violation_at_alpha() {
        // speeds 10, 10, 11.8 m/s: peak accel 3.6 = 2.4 + α, jerk 7.2 under threshold
        let pts = [0.0, 5.0, 10.0, 15.9].map(|x| Point2::new(x, 0.0));
        let r = score_comfort(&pts, DT);
        assert_abs_diff_eq!(r.score, (-1.0f64).exp(), epsilon = 1e-9);
    }

    #[test]
    fn at_fault_rules() {
        let ego = Pose2::new(0.0, 0.0, 0.0);
        assert!(!at_fault(&ego, 0.0, &Pose2::new(-4.0, 0.5, 0.0)));
        assert!(at_fault(&ego, 0.0, &Pose2::new(4.0, 0.0, 0.0)));
        assert!(at_fault(&ego, 3.0, &Pose2::new(-4.0, 0.0, 0.0)));
    }
}
