//! Seeded procedural generator for the five scenario templates.
//!
//! Each template scripts vehicle motion along straight lanes at a 0.1 s tick:
//! a longitudinal coordinate integrated from an acceleration law and a
//! lateral offset blended between lane centers. A random cut time splits the
//! episode into history and ground-truth future, so training sees states
//! before, during and after each manoeuvre. The overtake and crossing
//! templates contain a hidden coin (pass side, go or yield) that the history
//! does not reveal when the cut precedes the manoeuvre.
//!
//! Scenes are built in a canonical frame (ego lane along +x), moved by a
//! random rigid transform, and rejected unless the expert future is feasible
//! under the reward and the simulator; rejected draws are regenerated from a
//! derived seed, so the output stays a pure function of `(seed, tag)`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{AgentState, Role, ScenarioTag, Scene, H, T_FUT};
use crate::geometry::{rect_overlap, DrivablePolygon, Footprint, Point2, Polyline, Pose2};
use crate::seed::{self, Purpose};
use crate::{Error, Result};

const TICK: f64 = 0.1;
const TICKS_PER_STEP: usize = 5;
const EPISODE_TICKS: usize = 160;
const X_MIN: f64 = -150.0;
const X_MAX: f64 = 450.0;
const MAX_ATTEMPTS: u64 = 200;
/// Agents farther than this from the ego's current position are unlabelled.
pub const OBSERVATION_RANGE: f64 = 60.0;

/// Dataset generation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub count: usize,
    pub tags: Vec<ScenarioTag>,
}

/// Generates `count` scenes cycling through `tags`; scene `i` is
/// `generate_scene(derive(seed, i), tags[i % len])` with `scene_id = i`.
pub fn generate_set(cfg: &GeneratorConfig) -> Result<Vec<Scene>> {
    if cfg.tags.is_empty() {
        return Err(Error::config("at least one scenario tag is required"));
    }
    (0..cfg.count)
        .map(|i| {
            let s = seed::derive(cfg.seed, Purpose::Generate, &[i as u64]);
            let mut scene = generate_scene(s, cfg.tags[i % cfg.tags.len()])?;
            scene.scene_id = i as u64;
            Ok(scene)
        })
        .collect()
}

/// Deterministic scene for `(seed, tag)`.
pub fn generate_scene(seed_value: u64, tag: ScenarioTag) -> Result<Scene> {
    let tag_index = ScenarioTag::ALL.iter().position(|&t| t == tag).unwrap_or(0) as u64;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = seed::rng(seed_value, Purpose::Generate, &[tag_index, attempt]);
        let Some(ep) = build_episode(&mut rng, tag) else {
            continue;
        };
        if !ep.collision_free() {
            continue;
        }
        let Ok(scene) = ep.into_scene(&mut rng, seed_value, tag) else {
            continue;
        };
        if scene.validate().is_ok() && expert_feasible(&scene) {
            return Ok(scene);
        }
    }
    Err(Error::validation(format!(
        "no feasible {tag} scene after {MAX_ATTEMPTS} attempts for seed {seed_value}"
    )))
}

/// Expert future must be collision-free and on-road under the reward and
/// must succeed when replayed in the simulator.
fn expert_feasible(scene: &Scene) -> bool {
    let ego = super::ego_frame_transform(scene);
    let gt: Vec<Point2> = ego.ego.future_points();
    let Ok(ctx) = crate::reward::RewardContext::new(scene) else {
        return false;
    };
    match ctx.score(&gt) {
        Ok(b) if !b.collided && b.dac == 1.0 && b.nc == 1.0 => {}
        _ => return false,
    }
    crate::simulator::oracle_episode(scene).success
}

#[derive(Debug, Clone, Copy)]
struct Lane {
    origin: Point2,
    dir: Point2,
}

impl Lane {
    fn new(origin: Point2, heading: f64) -> Self {
        Self {
            origin,
            dir: Point2::unit(heading),
        }
    }

    fn heading(&self) -> f64 {
        self.dir.y.atan2(self.dir.x)
    }

    fn at(&self, s: f64, d: f64) -> Point2 {
        let n = Point2::new(-self.dir.y, self.dir.x);
        self.origin.add(self.dir.scale(s)).add(n.scale(d))
    }

    fn centerline(&self, s0: f64, s1: f64) -> Polyline {
        Polyline::new(vec![self.at(s0, 0.0), self.at(s1, 0.0)]).expect("lane extent is positive")
    }
}

/// Longitudinal state per tick.
struct Longitudinal {
    s: Vec<f64>,
    v: Vec<f64>,
}

/// Integrates `accel(tick, s, v)` from `(s0, v0)`; speed never drops below 0.
fn integrate(s0: f64, v0: f64, mut accel: impl FnMut(usize, f64, f64) -> f64) -> Longitudinal {
    let mut s = Vec::with_capacity(EPISODE_TICKS + 1);
    let mut v = Vec::with_capacity(EPISODE_TICKS + 1);
    s.push(s0);
    v.push(v0);
    for k in 0..EPISODE_TICKS {
        let a = accel(k, s[k], v[k]);
        let v1 = (v[k] + a * TICK).max(0.0);
        s.push(s[k] + 0.5 * (v[k] + v1) * TICK);
        v.push(v1);
    }
    Longitudinal { s, v }
}

/// Proportional speed tracking with separate acceleration and braking limits.
fn track_speed(v: f64, target: f64, accel: f64, brake: f64) -> f64 {
    ((target - v) / TICK).clamp(-brake, accel)
}

/// Cosine blend from 0 to 1 over `[t0, t0 + dur]`.
fn blend(t: f64, t0: f64, dur: f64) -> f64 {
    let u = ((t - t0) / dur).clamp(0.0, 1.0);
    0.5 * (1.0 - (std::f64::consts::PI * u).cos())
}

fn tick_time(k: usize) -> f64 {
    k as f64 * TICK
}

#[derive(Debug, Clone)]
struct Vehicle {
    footprint: Footprint,
    poses: Vec<Pose2>,
}

impl Vehicle {
    fn from_lane(lane: &Lane, footprint: Footprint, s: &[f64], d: &[f64]) -> Self {
        let pts: Vec<Point2> = s.iter().zip(d).map(|(&s, &d)| lane.at(s, d)).collect();
        let mut poses = Vec::with_capacity(pts.len());
        let mut heading = lane.heading();
        for k in 0..pts.len() {
            let (a, b) = if k + 1 < pts.len() {
                (pts[k], pts[k + 1])
            } else {
                (pts[k - 1], pts[k])
            };
            let step = b.sub(a);
            if step.norm() > 1e-4 {
                heading = step.y.atan2(step.x);
            }
            poses.push(Pose2::new(pts[k].x, pts[k].y, heading));
        }
        Self { footprint, poses }
    }

    /// Constant-speed vehicle on `lane` whose position at tick `k0` is `s_at_k0`.
    fn cruising(lane: &Lane, footprint: Footprint, s_at_k0: f64, speed: f64, k0: usize) -> Self {
        let s: Vec<f64> = (0..=EPISODE_TICKS)
            .map(|k| s_at_k0 + speed * (tick_time(k) - tick_time(k0)))
            .collect();
        Self::from_lane(lane, footprint, &s, &vec![0.0; s.len()])
    }
}

struct Episode {
    ego: Vehicle,
    agents: Vec<Vehicle>,
    drivable: DrivablePolygon,
    lanes: Vec<Polyline>,
    route_line: Polyline,
    k0: usize,
}

impl Episode {
    fn window(&self) -> std::ops::RangeInclusive<usize> {
        self.k0 - (H - 1) * TICKS_PER_STEP..=self.k0 + T_FUT * TICKS_PER_STEP
    }

    /// No pair of vehicles touches at any tick of the sampled window.
    fn collision_free(&self) -> bool {
        let all: Vec<&Vehicle> = std::iter::once(&self.ego).chain(&self.agents).collect();
        for k in self.window() {
            if !self.drivable.contains(self.ego.poses[k].position()) {
                return false;
            }
            for i in 0..all.len() {
                for j in i + 1..all.len() {
                    let (a, b) = (all[i], all[j]);
                    if rect_overlap(&a.poses[k], &a.footprint, &b.poses[k], &b.footprint) {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn into_scene(self, rng: &mut ChaCha8Rng, seed_value: u64, tag: ScenarioTag) -> Result<Scene> {
        let k0 = self.k0;
        let sample = |v: &Vehicle, id: u32, ego_pos: Point2| -> AgentState {
            let history = (0..H)
                .map(|j| v.poses[k0 - (H - 1 - j) * TICKS_PER_STEP])
                .collect();
            let gt_future: Vec<Pose2> = (1..=T_FUT)
                .map(|j| v.poses[k0 + j * TICKS_PER_STEP])
                .collect();
            let gt_valid = gt_future
                .iter()
                .map(|p| p.position().dist(ego_pos) <= OBSERVATION_RANGE)
                .collect();
            AgentState {
                id,
                footprint: v.footprint,
                history,
                gt_future,
                gt_valid,
                role: Role::Vehicle,
            }
        };
        let ego_pos = self.ego.poses[k0].position();
        let mut ego = sample(&self.ego, 0, ego_pos);
        ego.gt_valid = vec![true; T_FUT];
        let mut order: Vec<usize> = (0..self.agents.len()).collect();
        order.shuffle(rng);
        let agents = order
            .iter()
            .enumerate()
            .map(|(i, &a)| sample(&self.agents[a], i as u32 + 1, ego_pos))
            .collect();

        // route: ego position, then the route line ahead up to the GT end
        let s_ego = self.route_line.project(ego_pos).0;
        let end = ego.gt_future[T_FUT - 1].position();
        let s_end = self.route_line.project(end).0.max(s_ego + 0.5);
        let mut pts = vec![ego_pos];
        let mut s = s_ego + 2.0;
        while s < s_end - 0.5 {
            pts.push(self.route_line.point_at(s));
            s += 2.0;
        }
        pts.push(self.route_line.point_at(s_end));
        let route = Polyline::from_points_dedup(&pts, 1e-3)?;

        let scene = Scene {
            scene_id: 0,
            seed: seed_value,
            scenario_tag: tag,
            ego,
            agents,
            route,
            drivable: self.drivable,
            direction_field: self.lanes,
        };
        // random placement in the world
        let frame = Pose2::new(
            rng.gen_range(-100.0..100.0),
            rng.gen_range(-100.0..100.0),
            rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
        );
        Ok(scene.from_frame(&frame))
    }
}

fn ego_footprint(rng: &mut ChaCha8Rng) -> Footprint {
    Footprint {
        length: rng.gen_range(4.5..5.0),
        width: rng.gen_range(1.8..2.0),
    }
}

fn agent_footprint(rng: &mut ChaCha8Rng) -> Footprint {
    Footprint {
        length: rng.gen_range(4.0..5.2),
        width: rng.gen_range(1.7..2.0),
    }
}

/// Places up to `count` vehicles on `lane`, positioned at tick `k0` inside
/// `[s_lo, s_hi]` with at least `gap` meters between centers.
///
/// The lane's traffic shares one speed profile: cruising at `speed`, and with
/// probability one half switching to a new speed in `[min_speed, 12]` around
/// the cut. The switch is the lane's own intention, independent of the ego,
/// and is hidden from the history whenever it happens after the cut.
fn fill_lane(
    rng: &mut ChaCha8Rng,
    lane: &Lane,
    count: usize,
    (s_lo, s_hi): (f64, f64),
    speed: f64,
    k0: usize,
    min_speed: f64,
) -> Vec<Vehicle> {
    const GAP: f64 = 12.0;
    let mut placed: Vec<f64> = Vec::new();
    for _ in 0..count * 8 {
        if placed.len() == count || s_hi <= s_lo {
            break;
        }
        let s = rng.gen_range(s_lo..s_hi);
        if placed.iter().all(|&q| (q - s).abs() >= GAP) {
            placed.push(s);
        }
    }
    placed.sort_by(f64::total_cmp);
    let profile = if rng.gen_bool(0.5) && min_speed < 12.0 {
        let t_change = rng.gen_range(tick_time(k0) - 1.0..tick_time(k0) + 3.0);
        let target = rng.gen_range(min_speed.max(3.0)..12.0);
        integrate(0.0, speed, |k, _, v| {
            if tick_time(k) < t_change {
                0.0
            } else {
                track_speed(v, target, 1.5, 2.0)
            }
        })
        .s
    } else {
        (0..=EPISODE_TICKS).map(|k| speed * tick_time(k)).collect()
    };
    placed
        .into_iter()
        .map(|s| {
            let track: Vec<f64> = profile.iter().map(|p| s + p - profile[k0]).collect();
            Vehicle::from_lane(lane, agent_footprint(rng), &track, &vec![0.0; track.len()])
        })
        .collect()
}

fn random_k0(rng: &mut ChaCha8Rng, t_lo: f64, t_hi: f64) -> usize {
    let lo = ((t_lo.max(1.5)) / TICK).round() as usize;
    let max_k0 = EPISODE_TICKS - T_FUT * TICKS_PER_STEP;
    let hi = ((t_hi / TICK).round() as usize).clamp(lo, max_k0);
    rng.gen_range(lo..=hi)
}

fn build_episode(rng: &mut ChaCha8Rng, tag: ScenarioTag) -> Option<Episode> {
    let n_agents = rng.gen_range(2..=10usize);
    match tag {
        ScenarioTag::FreeFlow => free_flow(rng, n_agents),
        ScenarioTag::LeadBrake => lead_brake(rng, n_agents),
        ScenarioTag::Overtake => overtake(rng, n_agents),
        ScenarioTag::Crossing => crossing(rng, n_agents),
        ScenarioTag::Merge => merge(rng, n_agents),
    }
}

fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Option<DrivablePolygon> {
    crate::geometry::rectangle(x0, y0, x1, y1).ok()
}

fn free_flow(rng: &mut ChaCha8Rng, n: usize) -> Option<Episode> {
    let w = rng.gen_range(3.0..4.0);
    let right = rng.gen_bool(0.5);
    let ego_lane = Lane::new(Point2::new(0.0, 0.0), 0.0);
    let onc = Lane::new(Point2::new(X_MAX, w), std::f64::consts::PI);
    let rl = Lane::new(Point2::new(0.0, -w), 0.0);

    let v0 = rng.gen_range(3.0..12.0);
    let v1 = rng.gen_range(3.0..12.0);
    let t_change = rng.gen_range(0.0..10.0);
    let lon = integrate(0.0, v0, |k, _, v| {
        let target = if tick_time(k) < t_change { v0 } else { v1 };
        track_speed(v, target, 1.0, 1.5)
    });
    let ego = Vehicle::from_lane(&ego_lane, ego_footprint(rng), &lon.s, &vec![0.0; lon.s.len()]);
    let k0 = random_k0(rng, 1.5, 11.0);
    let se = lon.s[k0];

    let n_onc = if right { rng.gen_range(1..=n.saturating_sub(1).max(1)) } else { n };
    let lane_speed = rng.gen_range(4.0..12.0);
    let mut agents = fill_lane(
        rng,
        &onc,
        n_onc,
        (X_MAX - se - 50.0, X_MAX - se + 40.0),
        lane_speed,
        k0,
        3.0,
    );
    if right {
        let lane_speed = rng.gen_range(3.0..12.0);
        agents.extend(fill_lane(
            rng,
            &rl,
            n - n_onc,
            (se - 40.0, se + 50.0),
            lane_speed,
            k0,
            3.0,
        ));
    }
    if agents.len() < 2 {
        return None;
    }
    let y0 = if right { -1.5 * w } else { -0.5 * w };
    let mut lanes = vec![ego_lane.centerline(X_MIN, X_MAX), onc.centerline(0.0, X_MAX - X_MIN)];
    if right {
        lanes.push(rl.centerline(X_MIN, X_MAX));
    }
    Some(Episode {
        route_line: ego_lane.centerline(X_MIN, X_MAX),
        ego,
        agents,
        drivable: rect(X_MIN, y0, X_MAX, 1.5 * w)?,
        lanes,
        k0,
    })
}

fn lead_brake(rng: &mut ChaCha8Rng, n: usize) -> Option<Episode> {
    let w = rng.gen_range(3.0..4.0);
    let ego_lane = Lane::new(Point2::new(0.0, 0.0), 0.0);
    let onc = Lane::new(Point2::new(X_MAX, w), std::f64::consts::PI);
    let efp = ego_footprint(rng);
    let lfp = agent_footprint(rng);

    let ve = rng.gen_range(6.0..12.0);
    let headway = rng.gen_range(1.2..2.2);
    let gap0 = ve * headway + 4.0;
    let t_brake = rng.gen_range(0.5..7.0);
    let decel = rng.gen_range(2.0..3.5);
    let v_low = rng.gen_range(2.0..4.0);
    let lead = integrate(0.5 * efp.length + gap0 + 0.5 * lfp.length, ve, |k, _, v| {
        let target = if tick_time(k) < t_brake { ve } else { v_low };
        track_speed(v, target, 1.0, decel)
    });
    // intelligent-driver-model follower
    let (a_max, b_comf, t_gap, s0): (f64, f64, f64, f64) = (1.5, 2.5, 1.4, 3.0);
    let ego_lon = integrate(0.0, ve, |k, s, v| {
        let gap = lead.s[k] - s - 0.5 * (efp.length + lfp.length);
        let dv = v - lead.v[k];
        let s_star = s0 + v * t_gap + v * dv / (2.0 * (a_max * b_comf).sqrt());
        let a = a_max * (1.0 - (v / ve).powi(4) - (s_star.max(0.0) / gap.max(0.1)).powi(2));
        a.clamp(-4.0, a_max)
    });
    let ego = Vehicle::from_lane(&ego_lane, efp, &ego_lon.s, &vec![0.0; ego_lon.s.len()]);
    let lead_v = Vehicle::from_lane(&ego_lane, lfp, &lead.s, &vec![0.0; lead.s.len()]);
    let k0 = random_k0(rng, 1.5, 9.0);
    let se = ego_lon.s[k0];
    let mut agents = vec![lead_v];
    let lane_speed = rng.gen_range(4.0..12.0);
    agents.extend(fill_lane(
        rng,
        &onc,
        n - 1,
        (X_MAX - se - 50.0, X_MAX - se + 40.0),
        lane_speed,
        k0,
        3.0,
    ));
    Some(Episode {
        route_line: ego_lane.centerline(X_MIN, X_MAX),
        ego,
        agents,
        drivable: rect(X_MIN, -0.5 * w, X_MAX, 1.5 * w)?,
        lanes: vec![ego_lane.centerline(X_MIN, X_MAX), onc.centerline(0.0, X_MAX - X_MIN)],
        k0,
    })
}

fn overtake(rng: &mut ChaCha8Rng, n: usize) -> Option<Episode> {
    let w = rng.gen_range(3.0..4.0);
    let mid = Lane::new(Point2::new(0.0, 0.0), 0.0);
    let left = Lane::new(Point2::new(0.0, w), 0.0);
    let right = Lane::new(Point2::new(0.0, -w), 0.0);
    let efp = ego_footprint(rng);
    let lfp = agent_footprint(rng);

    let ve = rng.gen_range(8.0..12.0);
    let vl = rng.gen_range(2.0..4.0);
    let dur = rng.gen_range(2.5..3.5);
    let t_lc = rng.gen_range(2.0..5.0);
    let g_lc = (ve - vl) * 0.7 * dur + 3.0;
    let gap0 = g_lc + (ve - vl) * t_lc;
    let s_lead0 = 0.5 * efp.length + gap0 + 0.5 * lfp.length;

    // 0: both sides free (hidden coin), 1: left blocked, 2: right blocked
    let case = match rng.gen_range(0.0..1.0) {
        u if u < 0.5 => 0,
        u if u < 0.75 => 1,
        _ => 2,
    };
    let go_left = match case {
        0 => rng.gen_bool(0.5),
        1 => false,
        _ => true,
    };
    let side = if go_left { w } else { -w };
    let lon = integrate(0.0, ve, |_, _, v| track_speed(v, ve, 1.0, 2.0));
    let d: Vec<f64> = (0..lon.s.len())
        .map(|k| side * blend(tick_time(k), t_lc, dur))
        .collect();
    let ego = Vehicle::from_lane(&mid, efp, &lon.s, &d);
    let lead_lon = integrate(s_lead0, vl, |_, _, _| 0.0);
    let lead = Vehicle::from_lane(&mid, lfp, &lead_lon.s, &vec![0.0; lead_lon.s.len()]);
    let k0 = random_k0(rng, 1.5, t_lc + 2.5);
    let se = lon.s[k0];

    let mut agents = vec![lead];
    if case != 0 {
        let lane = if case == 1 { left } else { right };
        let vb = ve + rng.gen_range(-1.0..1.0);
        let k_mid = ((t_lc + 0.5 * dur) / TICK).round() as usize;
        let s_mid = lon.s[k_mid.min(EPISODE_TICKS)] + rng.gen_range(-3.0..3.0);
        let s_at_k0 = s_mid - vb * (tick_time(k_mid) - tick_time(k0));
        agents.push(Vehicle::cruising(&lane, agent_footprint(rng), s_at_k0, vb, k0));
    }
    let rest = n.saturating_sub(agents.len());
    let n_left = rng.gen_range(0..=rest);
    let fast = ve + rng.gen_range(1.5..3.0);
    let ahead = (se + gap0.max(20.0) + 25.0, se + gap0.max(20.0) + 60.0);
    agents.extend(fill_lane(rng, &left, n_left, ahead, fast, k0, fast));
    agents.extend(fill_lane(rng, &right, rest - n_left, ahead, fast + 0.5, k0, fast + 0.5));
    if agents.len() < 2 {
        return None;
    }
    Some(Episode {
        route_line: mid.centerline(X_MIN, X_MAX),
        ego,
        agents,
        drivable: rect(X_MIN, -1.5 * w, X_MAX, 1.5 * w)?,
        lanes: vec![
            mid.centerline(X_MIN, X_MAX),
            left.centerline(X_MIN, X_MAX),
            right.centerline(X_MIN, X_MAX),
        ],
        k0,
    })
}

fn crossing(rng: &mut ChaCha8Rng, n: usize) -> Option<Episode> {
    use std::f64::consts::FRAC_PI_2;
    let w = rng.gen_range(3.0..4.0);
    let efp = ego_footprint(rng);
    let afp = agent_footprint(rng);
    let ego_lane = Lane::new(Point2::new(0.0, 0.0), 0.0);
    let onc = Lane::new(Point2::new(X_MAX, w), std::f64::consts::PI);

    let ve: f64 = rng.gen_range(6.0..11.0);
    let t_choice = rng.gen_range(2.5..5.0);
    let b_yield = rng.gen_range(2.0..3.5);
    let a_go = rng.gen_range(1.5..2.5);
    let v_max = (ve + 5.0).min(13.0);
    let s_choice = ve * t_choice;
    // stop line ahead of the crossing road, reachable with constant braking
    let x_stop_front = s_choice + 0.5 * efp.length + ve * ve / (2.0 * b_yield);
    let xc = x_stop_front + 0.5 + w;
    let xa = xc + 0.5 * w;
    let north = Lane::new(Point2::new(xa, 0.0), FRAC_PI_2);

    let go = integrate(0.0, ve, |k, _, v| {
        if tick_time(k) < t_choice {
            0.0
        } else {
            track_speed(v, v_max, a_go, 4.0)
        }
    });
    let k_clear = (0..=EPISODE_TICKS)
        .find(|&k| go.s[k] - 0.5 * efp.length > xa + 0.5 * afp.width + 0.5)?;
    let t_arr = tick_time(k_clear) + rng.gen_range(0.3..1.0);
    let va = rng.gen_range(5.0..10.0);
    let y_front_arr = -0.5 * efp.width - 0.5;
    let t_exit = t_arr + (efp.width + 1.0 + afp.length) / va;
    let agent_s: Vec<f64> = (0..=EPISODE_TICKS)
        .map(|k| y_front_arr - 0.5 * afp.length + va * (tick_time(k) - t_arr))
        .collect();
    let agent = Vehicle::from_lane(&north, afp, &agent_s, &vec![0.0; agent_s.len()]);

    let go_first = rng.gen_bool(0.5);
    let lon = if go_first {
        go
    } else {
        let t_release = t_exit + rng.gen_range(0.3..1.0);
        integrate(0.0, ve, |k, s, v| {
            let t = tick_time(k);
            if t < t_choice {
                0.0
            } else if t < t_release {
                // brake so the front stops at the stop line
                let rem = x_stop_front - (s + 0.5 * efp.length);
                if rem <= 0.05 {
                    -v / TICK
                } else {
                    -(v * v / (2.0 * rem)).min(4.0)
                }
            } else {
                track_speed(v, ve, 2.0, 4.0)
            }
        })
    };
    let ego = Vehicle::from_lane(&ego_lane, efp, &lon.s, &vec![0.0; lon.s.len()]);
    let k0 = random_k0(rng, 1.5, t_choice + 2.0);

    let mut agents = vec![agent];
    let rest = n - 1;
    let n_onc = rng.gen_range(0..=rest);
    // oncoming traffic already past the junction, northbound traffic beyond it
    let past = X_MAX - (xc - w - 8.0);
    let lane_speed = rng.gen_range(4.0..12.0);
    agents.extend(fill_lane(
        rng,
        &onc,
        n_onc,
        (past, past + 50.0),
        lane_speed,
        k0,
        3.0,
    ));
    let speed_margin = rng.gen_range(0.5..2.0);
    agents.extend(fill_lane(
        rng,
        &north,
        rest - n_onc,
        (1.5 * w + 12.0, 60.0),
        va + speed_margin,
        k0,
        va + speed_margin,
    ));
    if agents.len() < 2 {
        return None;
    }
    let (hw, far) = (0.5 * w, 150.0);
    let drivable = DrivablePolygon::new(vec![
        Point2::new(X_MIN, -hw),
        Point2::new(xc - w, -hw),
        Point2::new(xc - w, -far),
        Point2::new(xc + w, -far),
        Point2::new(xc + w, -hw),
        Point2::new(X_MAX, -hw),
        Point2::new(X_MAX, 3.0 * hw),
        Point2::new(xc + w, 3.0 * hw),
        Point2::new(xc + w, far),
        Point2::new(xc - w, far),
        Point2::new(xc - w, 3.0 * hw),
        Point2::new(X_MIN, 3.0 * hw),
    ])
    .ok()?;
    let south = Lane::new(Point2::new(xc - 0.5 * w, far), -FRAC_PI_2);
    Some(Episode {
        route_line: ego_lane.centerline(X_MIN, X_MAX),
        ego,
        agents,
        drivable,
        lanes: vec![
            ego_lane.centerline(X_MIN, X_MAX),
            onc.centerline(0.0, X_MAX - X_MIN),
            north.centerline(-far, far),
            south.centerline(0.0, 2.0 * far),
        ],
        k0,
    })
}

fn merge(rng: &mut ChaCha8Rng, n: usize) -> Option<Episode> {
    let w = rng.gen_range(3.0..4.0);
    let efp = ego_footprint(rng);
    let afp = agent_footprint(rng);
    let ego_lane = Lane::new(Point2::new(0.0, 0.0), 0.0);
    let main = Lane::new(Point2::new(0.0, w), 0.0);
    let onc = Lane::new(Point2::new(X_MAX, 2.0 * w), std::f64::consts::PI);

    let ve: f64 = rng.gen_range(6.0..11.0);
    let t_lc = rng.gen_range(2.5..5.0);
    let dur = rng.gen_range(2.0..3.0);
    let yields = rng.gen_bool(0.5);
    let va0 = ve + rng.gen_range(-0.5..0.5);
    let sa0 = rng.gen_range(-4.0..6.0);
    let t_react = rng.gen_range(0.3..1.0);

    let (agent_lon, ego_lon) = if yields {
        let target = (ve - rng.gen_range(2.5..4.0)).max(1.0);
        let b = rng.gen_range(1.2..2.0);
        let a = integrate(sa0, va0, |k, _, v| {
            if tick_time(k) < t_react {
                0.0
            } else {
                track_speed(v, target, 1.0, b)
            }
        });
        let e = integrate(0.0, ve, |_, _, v| track_speed(v, ve + 1.0, 0.8, 2.0));
        (a, e)
    } else {
        let target = ve + rng.gen_range(2.0..4.0);
        let a = integrate(sa0, va0, |k, _, v| {
            if tick_time(k) < t_react {
                0.0
            } else {
                track_speed(v, target, 1.0, 2.0)
            }
        });
        let slow = (ve - 2.5).max(2.0);
        let e = integrate(0.0, ve, |k, _, v| {
            if tick_time(k) < t_react {
                0.0
            } else {
                track_speed(v, slow, 1.0, 1.2)
            }
        });
        (a, e)
    };
    let d: Vec<f64> = (0..ego_lon.s.len())
        .map(|k| w * blend(tick_time(k), t_lc, dur))
        .collect();
    let ego = Vehicle::from_lane(&ego_lane, efp, &ego_lon.s, &d);
    let agent = Vehicle::from_lane(&main, afp, &agent_lon.s, &vec![0.0; agent_lon.s.len()]);
    let k_done = ((t_lc + dur) / TICK).round() as usize;
    let x_end = ego_lon.s[k_done.min(EPISODE_TICKS)] + rng.gen_range(2.0..12.0);
    let k0 = random_k0(rng, t_lc - 0.3, t_lc + dur);
    let sa = agent_lon.s[k0];

    let mut agents = vec![agent];
    let rest = n - 1;
    let n_main = rng.gen_range(0..=rest);
    let v_fast = ve.max(agent_lon.v.iter().cloned().fold(0.0, f64::max)) + 1.0;
    agents.extend(fill_lane(rng, &main, n_main, (sa + 30.0, sa + 70.0), v_fast, k0, v_fast));
    let se = ego_lon.s[k0];
    let lane_speed = rng.gen_range(4.0..12.0);
    agents.extend(fill_lane(
        rng,
        &onc,
        rest - n_main,
        (X_MAX - se - 50.0, X_MAX - se + 40.0),
        lane_speed,
        k0,
        3.0,
    ));
    if agents.len() < 2 {
        return None;
    }
    let hw = 0.5 * w;
    let drivable = DrivablePolygon::new(vec![
        Point2::new(X_MIN, -hw),
        Point2::new(x_end, -hw),
        Point2::new(x_end + 25.0, hw),
        Point2::new(X_MAX, hw),
        Point2::new(X_MAX, 5.0 * hw),
        Point2::new(X_MIN, 5.0 * hw),
    ])
    .ok()?;
    let route_line = Polyline::new(vec![
        Point2::new(X_MIN, 0.0),
        Point2::new(x_end - 20.0, 0.0),
        Point2::new(x_end + 5.0, w),
        Point2::new(X_MAX, w),
    ])
    .ok()?;
    Some(Episode {
        route_line,
        ego,
        agents,
        drivable,
        lanes: vec![
            ego_lane.centerline(X_MIN, x_end),
            main.centerline(X_MIN, X_MAX),
            onc.centerline(0.0, X_MAX - X_MIN),
        ],
        k0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate_scene(7, ScenarioTag::Merge).unwrap();
        let b = generate_scene(7, ScenarioTag::Merge).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn every_template_generates_valid_scenes() {
        for tag in ScenarioTag::ALL {
            for s in 0..5 {
                let scene = generate_scene(s, tag).unwrap();
                scene.validate().unwrap();
                assert!((2..=10).contains(&scene.agents.len()));
                assert_eq!(scene.scenario_tag, tag);
            }
        }
    }

    #[test]
    fn set_cycles_tags_and_numbers_scenes() {
        let cfg = GeneratorConfig {
            seed: 3,
            count: 4,
            tags: vec![ScenarioTag::FreeFlow, ScenarioTag::Crossing],
        };
        let set = generate_set(&cfg).unwrap();
        let tags: Vec<_> = set.iter().map(|s| s.scenario_tag).collect();
        assert_eq!(
            tags,
            [ScenarioTag::FreeFlow, ScenarioTag::Crossing, ScenarioTag::FreeFlow, ScenarioTag::Crossing]
        );
        assert_eq!(set[3].scene_id, 3);
    }
}
