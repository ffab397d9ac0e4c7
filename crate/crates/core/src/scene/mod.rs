//! Driving scenes: map, ego route, agents with histories and ground-truth
//! futures, plus the procedural generator and the line-delimited file format.

mod generator;
mod io;

pub use generator::{generate_scene, generate_set, GeneratorConfig};
pub use io::{
    load_scenes, read_records, read_scenes, save_scenes, to_line, write_records, write_scenes, FORMAT_TAG,
    FORMAT_VERSION,
};

use serde::{Deserialize, Serialize};

use crate::geometry::{DrivablePolygon, Footprint, Point2, Polyline, Pose2};
use crate::{Error, Result};

/// Sample spacing of histories and futures, seconds.
pub const DT: f64 = 0.5;
/// History poses per entity, the last one being the current pose.
pub const H: usize = 4;
/// Future steps per trajectory.
pub const T_FUT: usize = 8;
/// Points in a spatial trajectory.
pub const P_SP: usize = 10;
/// Arc-length spacing of spatial trajectories, meters.
pub const SP_SPACING: f64 = 2.0;
/// Upper bound on agents per scene.
pub const MAX_AGENTS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioTag {
    Merge,
    Crossing,
    LeadBrake,
    Overtake,
    FreeFlow,
}

impl ScenarioTag {
    pub const ALL: [ScenarioTag; 5] = [
        ScenarioTag::Merge,
        ScenarioTag::Crossing,
        ScenarioTag::LeadBrake,
        ScenarioTag::Overtake,
        ScenarioTag::FreeFlow,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioTag::Merge => "merge",
            ScenarioTag::Crossing => "crossing",
            ScenarioTag::LeadBrake => "lead_brake",
            ScenarioTag::Overtake => "overtake",
            ScenarioTag::FreeFlow => "free_flow",
        }
    }
}

impl std::str::FromStr for ScenarioTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown scenario tag '{s}'")))
    }
}

impl std::fmt::Display for ScenarioTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Vehicle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub id: u32,
    pub footprint: Footprint,
    /// `H` poses at `DT` spacing, oldest first; the last is the current pose.
    pub history: Vec<Pose2>,
    /// `T_FUT` poses at `DT` spacing after the current pose.
    pub gt_future: Vec<Pose2>,
    pub gt_valid: Vec<bool>,
    pub role: Role,
}

impl AgentState {
    pub fn current(&self) -> Pose2 {
        self.history[self.history.len() - 1]
    }

    /// Velocity estimated from the last two history poses.
    pub fn velocity(&self) -> Point2 {
        let n = self.history.len();
        if n < 2 {
            return Point2::default();
        }
        self.history[n - 1]
            .position()
            .sub(self.history[n - 2].position())
            .scale(1.0 / DT)
    }

    pub fn speed(&self) -> f64 {
        self.velocity().norm()
    }

    pub fn future_points(&self) -> Vec<Point2> {
        self.gt_future.iter().map(Pose2::position).collect()
    }

    pub fn has_valid_future(&self) -> bool {
        self.gt_valid.iter().any(|&v| v)
    }

    fn map_poses(&self, f: &impl Fn(&Pose2) -> Pose2) -> AgentState {
        AgentState {
            history: self.history.iter().map(f).collect(),
            gt_future: self.gt_future.iter().map(f).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u64,
    pub seed: u64,
    pub scenario_tag: ScenarioTag,
    pub ego: AgentState,
    pub agents: Vec<AgentState>,
    /// Ego intended route centerline.
    pub route: Polyline,
    pub drivable: DrivablePolygon,
    /// Lane centerlines; point order is the allowed travel direction.
    pub direction_field: Vec<Polyline>,
}

impl Scene {
    pub fn ego_pose(&self) -> Pose2 {
        self.ego.current()
    }

    /// Checks the structural invariants of a scene.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::validation(format!("scene {}: {m}", self.scene_id)));
        if self.agents.len() > MAX_AGENTS {
            return bad(format!("{} agents exceeds {MAX_AGENTS}", self.agents.len()));
        }
        for a in std::iter::once(&self.ego).chain(&self.agents) {
            if a.history.len() != H || a.gt_future.len() != T_FUT || a.gt_valid.len() != T_FUT {
                return bad(format!("agent {} has malformed trajectory lengths", a.id));
            }
            let finite = a
                .history
                .iter()
                .chain(&a.gt_future)
                .all(|p| p.x.is_finite() && p.y.is_finite() && p.heading.is_finite());
            if !finite {
                return bad(format!("agent {} has non-finite poses", a.id));
            }
        }
        if !self.drivable.contains(self.ego_pose().position()) {
            return bad("ego current pose outside drivable area".into());
        }
        if self.route.first().dist(self.ego_pose().position()) > 1.0 {
            return bad("route does not start at the ego".into());
        }
        Ok(())
    }

    fn map_frame(&self, f: impl Fn(&Pose2) -> Pose2) -> Result<Scene> {
        let fp = |p: &Point2| f(&Pose2::new(p.x, p.y, 0.0)).position();
        let line = |l: &Polyline| Polyline::new(l.points().iter().map(fp).collect());
        Ok(Scene {
            ego: self.ego.map_poses(&f),
            agents: self.agents.iter().map(|a| a.map_poses(&f)).collect(),
            route: line(&self.route)?,
            drivable: DrivablePolygon::new(self.drivable.vertices().iter().map(fp).collect())?,
            direction_field: self.direction_field.iter().map(line).collect::<Result<_>>()?,
            ..self.clone()
        })
    }

    /// Re-expresses the scene in `frame`'s local coordinates.
    pub fn to_frame(&self, frame: &Pose2) -> Scene {
        self.map_frame(|p| frame.pose_to_local(p))
            .expect("rigid transforms preserve validity")
    }

    /// Inverse of [`Scene::to_frame`].
    pub fn from_frame(&self, frame: &Pose2) -> Scene {
        self.map_frame(|p| frame.pose_to_world(p))
            .expect("rigid transforms preserve validity")
    }
}

/// Expresses every coordinate relative to the ego's current pose; the ego
/// then sits at the origin with zero heading.
pub fn ego_frame_transform(scene: &Scene) -> Scene {
    scene.to_frame(&scene.ego_pose())
}

/// Ground-truth ego spatial trajectory: `P_SP` points at `SP_SPACING` arc
/// length along the ego's current position followed by its GT future,
/// extended straight past the last sample (along the heading if stationary).
pub fn gt_spatial_path(ego: &AgentState) -> Vec<Point2> {
    let cur = ego.current();
    let mut pts = vec![cur.position()];
    pts.extend(ego.future_points());
    let path = Polyline::from_points_dedup(&pts, 1e-3).unwrap_or_else(|_| {
        let ahead = cur.position().add(Point2::unit(cur.heading));
        Polyline::new(vec![cur.position(), ahead]).expect("unit step is non-degenerate")
    });
    (0..P_SP)
        .map(|k| path.point_at(k as f64 * SP_SPACING))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn tag_parse_round_trip() {
        for t in ScenarioTag::ALL {
            assert_eq!(t.as_str().parse::<ScenarioTag>().unwrap(), t);
        }
        assert!(matches!("roundabout".parse::<ScenarioTag>(), Err(Error::Config(_))));
    }

    #[test]
    fn ego_frame_puts_ego_at_origin() {
        let s = generate_scene(11, ScenarioTag::Overtake).unwrap();
        let e = ego_frame_transform(&s);
        let p = e.ego_pose();
        assert_abs_diff_eq!(p.x, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(p.y, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(p.heading, 0.0, epsilon = 1e-9);
        let back = e.from_frame(&s.ego_pose());
        for (a, b) in back.agents.iter().zip(&s.agents) {
            for (p, q) in a.gt_future.iter().zip(&b.gt_future) {
                assert_abs_diff_eq!(p.x, q.x, epsilon = 1e-9);
                assert_abs_diff_eq!(p.y, q.y, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn spatial_path_spacing_on_straight_motion() {
        let pose = |x: f64| Pose2::new(x, 0.0, 0.0);
        let ego = AgentState {
            id: 0,
            footprint: Footprint::new(4.5, 1.9).unwrap(),
            history: (0..H).map(|k| pose(k as f64 * 3.0 - 9.0)).collect(),
            gt_future: (1..=T_FUT).map(|k| pose(3.0 * k as f64)).collect(),
            gt_valid: vec![true; T_FUT],
            role: Role::Vehicle,
        };
        let sp = gt_spatial_path(&ego);
        assert_eq!(sp.len(), P_SP);
        for (k, p) in sp.iter().enumerate() {
            assert_abs_diff_eq!(p.x, 2.0 * k as f64, epsilon = 1e-9);
        }
    }
}
