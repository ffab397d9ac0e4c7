//! The network: a scene encoder over entity and map tokens, marginal heads,
//! learned joint-mode embeddings refined by entity attention and Agent-Mode
//! Attention, and joint heads that decode one scene hypothesis per mode.
//!
//! All inputs are ego-frame scenes. Trajectory heads predict offsets from a
//! constant-velocity anchor, rotated into each entity's heading frame, so a
//! zero-weight head reproduces the anchor exactly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{normalize_angle, progress_along, Point2, Pose2};
use crate::numerics::nn::{AttentionBlock, AttentionConfig, Mlp};
use crate::numerics::{Binder, NumericError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::scene::{AgentState, Scene, DT, H, P_SP, SP_SPACING, T_FUT};
use crate::simulator::{Observation, Policy};
use crate::Result;

/// Per-entity input features.
pub const ENTITY_FEATURES: usize = 17;
/// Map-token input features.
pub const MAP_FEATURES: usize = 27;
/// Head outputs are scaled by this before being added to the anchor, meters.
pub const OFFSET_SCALE: f64 = 4.0;
/// Heading increments of the spatial head are scaled by this, radians.
pub const HEADING_SCALE: f64 = 0.25;
pub const SIGMA_MIN: f64 = 0.05;
pub const SIGMA_MAX: f64 = 5.0;
/// Initial σ of every Gaussian head, meters.
pub const SIGMA_INIT: f64 = 0.5;
const POS_SCALE: f64 = 20.0;
const HIST_SCALE: f64 = 10.0;
const SPEED_SCALE: f64 = 10.0;
const ROUTE_LOOKAHEAD: [f64; 9] = [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0];
const RAY_STATIONS: [f64; 4] = [0.0, 10.0, 20.0, 30.0];
const RAY_MAX: f64 = 10.0;
const FORWARD_RAY_MAX: f64 = 60.0;
const HEAD_GAIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub heads: usize,
    /// Joint scene modes `M`.
    pub joint_modes: usize,
    /// Marginal modes `K` per agent.
    pub marginal_modes: usize,
    pub encoder_layers: usize,
    pub refine_layers: usize,
    /// Whether the joint branch (mode embeddings, refinement, joint heads) exists.
    pub joint: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 64,
            heads: 4,
            joint_modes: 6,
            marginal_modes: 6,
            encoder_layers: 2,
            refine_layers: 2,
            joint: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        AttentionConfig::new(self.width, self.heads)?;
        if self.joint && self.joint_modes < 2 {
            return Err(crate::Error::config("at least 2 joint modes are required"));
        }
        if self.marginal_modes == 0 {
            return Err(crate::Error::config("at least 1 marginal mode is required"));
        }
        Ok(())
    }
}

/// Constant inputs extracted from an ego-frame scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFeatures {
    pub n_agents: usize,
    /// `[(N+1) × ENTITY_FEATURES]`, ego first.
    pub entities: Tensor,
    /// `[1 × MAP_FEATURES]`.
    pub map: Tensor,
    /// Constant-velocity anchors, `T_FUT` points per entity, ego first.
    pub anchors: Vec<Vec<Point2>>,
    /// Current heading per entity, ego first.
    pub headings: Vec<f64>,
}

fn entity_features(a: &AgentState, is_ego: bool) -> Vec<f64> {
    let cur = a.current();
    let mut f = vec![
        cur.x / POS_SCALE,
        cur.y / POS_SCALE,
        cur.heading.cos(),
        cur.heading.sin(),
    ];
    for p in &a.history[..H - 1] {
        let l = cur.to_local(p.position());
        f.push(l.x / HIST_SCALE);
        f.push(l.y / HIST_SCALE);
    }
    let prev = a.history[H - 2];
    let prev2 = a.history[H - 3];
    let v = cur.position().sub(prev.position()).scale(1.0 / DT);
    let v_prev = prev.position().sub(prev2.position()).scale(1.0 / DT);
    let vl = Pose2::new(0.0, 0.0, cur.heading).to_local(v);
    f.push(vl.x / SPEED_SCALE);
    f.push(vl.y / SPEED_SCALE);
    f.push(normalize_angle(cur.heading - prev.heading) / DT);
    f.push((v.norm() - v_prev.norm()) / DT / 4.0);
    f.push(a.footprint.length / 5.0);
    f.push(a.footprint.width / 2.0);
    f.push(if is_ego { 1.0 } else { 0.0 });
    debug_assert_eq!(f.len(), ENTITY_FEATURES);
    f
}

fn map_features(scene: &Scene) -> Vec<f64> {
    let origin = scene.ego_pose().position();
    let s0 = progress_along(&scene.route, origin);
    let mut f = Vec::with_capacity(MAP_FEATURES);
    for d in ROUTE_LOOKAHEAD {
        let p = scene.route.point_at(s0 + d);
        f.push(p.x / POS_SCALE);
        f.push(p.y / POS_SCALE);
    }
    for d in RAY_STATIONS {
        let at = Point2::new(d, 0.0);
        f.push(scene.drivable.ray_cast(at, Point2::new(0.0, 1.0), RAY_MAX) / RAY_MAX);
        f.push(scene.drivable.ray_cast(at, Point2::new(0.0, -1.0), RAY_MAX) / RAY_MAX);
    }
    f.push(scene.drivable.ray_cast(origin, Point2::new(1.0, 0.0), FORWARD_RAY_MAX) / FORWARD_RAY_MAX);
    debug_assert_eq!(f.len(), MAP_FEATURES);
    f
}

/// Current velocity extrapolated over `T_FUT` steps.
pub fn cv_anchor(a: &AgentState) -> Vec<Point2> {
    let cur = a.current().position();
    let v = a.velocity();
    (1..=T_FUT).map(|t| cur.add(v.scale(t as f64 * DT))).collect()
}

impl SceneFeatures {
    /// Features of an ego-frame scene.
    pub fn new(scene: &Scene) -> Self {
        let n = scene.agents.len();
        let mut ent = entity_features(&scene.ego, true);
        let mut anchors = vec![cv_anchor(&scene.ego)];
        let mut headings = vec![scene.ego.current().heading];
        for a in &scene.agents {
            ent.extend(entity_features(a, false));
            anchors.push(cv_anchor(a));
            headings.push(a.current().heading);
        }
        Self {
            n_agents: n,
            entities: Tensor::from_parts(vec![n + 1, ENTITY_FEATURES], ent),
            map: Tensor::from_parts(vec![1, MAP_FEATURES], map_features(scene)),
            anchors,
            headings,
        }
    }
}

/// Planar trajectories on the tape: row `r` is `(x[r, t], y[r, t])`.
#[derive(Debug, Clone, Copy)]
pub struct Traj<'t> {
    pub x: Var<'t>,
    pub y: Var<'t>,
}

impl<'t> Traj<'t> {
    pub fn rows(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<Traj<'t>, NumericError> {
        Ok(Traj {
            x: self.x.select_rows(idx)?,
            y: self.y.select_rows(idx)?,
        })
    }

    /// Row-wise point lists.
    pub fn points(&self) -> Vec<Vec<Point2>> {
        let (xs, ys) = (self.x.value(), self.y.value());
        (0..xs.rows())
            .map(|r| {
                xs.row(r)
                    .iter()
                    .zip(ys.row(r))
                    .map(|(&x, &y)| Point2::new(x, y))
                    .collect()
            })
            .collect()
    }
}

/// Joint-branch outputs on the tape.
#[derive(Debug, Clone, Copy)]
pub struct JointOutput<'t> {
    /// `[M × T]` ego means.
    pub ego_mu: Traj<'t>,
    /// `[M × T]` per-coordinate standard deviations.
    pub ego_sigma: Traj<'t>,
    /// `[1 × M]`.
    pub ego_logits: Var<'t>,
    /// `[N·M × T]`, row `i·M + m`.
    pub agent_trajs: Option<Traj<'t>>,
    /// `[N × M]`.
    pub agent_logits: Option<Var<'t>>,
}

/// All network outputs for one scene.
#[derive(Debug, Clone, Copy)]
pub struct ModelOutput<'t> {
    pub n_agents: usize,
    /// `[N·K × T]`, row `i·K + k`.
    pub marginal_agents: Option<Traj<'t>>,
    /// `[N × K]`.
    pub marginal_logits: Option<Var<'t>>,
    /// `[1 × T]` ego temporal plan.
    pub ego_tp: Traj<'t>,
    /// `[1 × T]` σ of the marginal ego plan (the alignment policy without the joint branch).
    pub ego_tp_sigma: Traj<'t>,
    /// `[1 × (P−1)]` spatial plan after the origin.
    pub ego_sp: Traj<'t>,
    pub joint: Option<JointOutput<'t>>,
}

/// Per-agent marginal candidates and logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalPredictionSet {
    pub candidates: Vec<Vec<Vec<Point2>>>,
    pub logits: Vec<Vec<f64>>,
}

/// One joint scene mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneHypothesis {
    pub mode_index: usize,
    pub ego_traj: Vec<Point2>,
    /// Per-step `(σx, σy)`.
    pub ego_sigma: Vec<Point2>,
    pub agent_trajs: Vec<Vec<Point2>>,
    pub ego_mode_logit: f64,
    pub agent_logits: Vec<f64>,
}

/// Plain-value view of a forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub marginal: MarginalPredictionSet,
    pub ego_tp: Vec<Point2>,
    pub ego_tp_sigma: Vec<Point2>,
    /// `P_SP` points starting at the origin.
    pub ego_sp: Vec<Point2>,
    pub hypotheses: Vec<SceneHypothesis>,
}

impl Prediction {
    /// Mode with the highest ego logit (first on ties).
    pub fn best_mode(&self) -> Option<&SceneHypothesis> {
        self.hypotheses
            .iter()
            .fold(None, |best: Option<&SceneHypothesis>, h| match best {
                Some(b) if b.ego_mode_logit >= h.ego_mode_logit => Some(b),
                _ => Some(h),
            })
    }
}

impl<'t> ModelOutput<'t> {
    pub fn prediction(&self) -> Prediction {
        let n = self.n_agents;
        let mut marginal = MarginalPredictionSet {
            candidates: vec![],
            logits: vec![],
        };
        if let (Some(tr), Some(lg)) = (self.marginal_agents, self.marginal_logits) {
            let pts = tr.points();
            let k = pts.len() / n;
            marginal.candidates = pts.chunks(k).map(|c| c.to_vec()).collect();
            let lv = lg.value();
            marginal.logits = (0..n).map(|i| lv.row(i).to_vec()).collect();
        }
        let mut sp = vec![Point2::new(0.0, 0.0)];
        sp.extend(self.ego_sp.points().remove(0));
        let mut hypotheses = vec![];
        if let Some(j) = &self.joint {
            let mu = j.ego_mu.points();
            let sg = j.ego_sigma.points();
            let logits = j.ego_logits.to_vec();
            let m = mu.len();
            let agent_pts = j.agent_trajs.map(|t| t.points()).unwrap_or_default();
            let agent_lg = j.agent_logits.map(|l| l.value());
            for mode in 0..m {
                hypotheses.push(SceneHypothesis {
                    mode_index: mode,
                    ego_traj: mu[mode].clone(),
                    ego_sigma: sg[mode].clone(),
                    agent_trajs: (0..n).map(|i| agent_pts[i * m + mode].clone()).collect(),
                    ego_mode_logit: logits[mode],
                    agent_logits: (0..n)
                        .map(|i| agent_lg.as_ref().map_or(0.0, |l| l.get2(i, mode)))
                        .collect(),
                });
            }
        }
        Prediction {
            marginal,
            ego_tp: self.ego_tp.points().remove(0),
            ego_tp_sigma: self.ego_tp_sigma.points().remove(0),
            ego_sp: sp,
            hypotheses,
        }
    }
}

/// One refinement layer: attention across entities within each slot, then
/// Agent-Mode Attention within each entity's stack.
#[derive(Debug, Clone, Copy)]
pub struct RefineLayer {
    pub entity: AttentionBlock,
    pub mode: AttentionBlock,
}

/// Network parameter handles; values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct CaadModel {
    pub config: ModelConfig,
    entity_mlp: Mlp,
    map_mlp: Mlp,
    encoder: Vec<AttentionBlock>,
    agent_head: Mlp,
    ego_tp_head: Mlp,
    ego_sp_head: Mlp,
    joint: Option<JointBranch>,
}

#[derive(Debug, Clone)]
struct JointBranch {
    ego_modes: ParamId,
    agent_modes: ParamId,
    refine: Vec<RefineLayer>,
    ego_head: Mlp,
    agent_head: Mlp,
}

/// Bias value giving `SIGMA_INIT` through the bounded σ map.
fn sigma_bias() -> f64 {
    let u = (SIGMA_INIT - SIGMA_MIN) / (SIGMA_MAX - SIGMA_MIN);
    (u / (1.0 - u)).ln()
}

/// `σ = SIGMA_MIN + (SIGMA_MAX − SIGMA_MIN)·sigmoid(raw)`, inside the bounds for any raw value.
pub fn bounded_sigma(raw: Var<'_>) -> Var<'_> {
    raw.sigmoid().scale(SIGMA_MAX - SIGMA_MIN).add_scalar(SIGMA_MIN)
}

/// Sets the bias entries `range` of a head's output layer.
fn set_bias(store: &mut ParamStore, mlp: &Mlp, range: std::ops::Range<usize>, value: f64) {
    let b = store.get_mut(mlp.out.bias);
    for v in &mut b.data_mut()[range] {
        *v = value;
    }
}

impl CaadModel {
    /// Registers all parameters in `store`.
    pub fn new(config: ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = config.width;
        let att = AttentionConfig::new(c, config.heads)?;
        let (k, m, t) = (config.marginal_modes, config.joint_modes, T_FUT);
        let entity_mlp = Mlp::new(store, "encoder.entity", (ENTITY_FEATURES, c, c), 1.0, rng);
        let map_mlp = Mlp::new(store, "encoder.map", (MAP_FEATURES, c, c), 1.0, rng);
        let encoder = (0..config.encoder_layers)
            .map(|l| AttentionBlock::new(store, &format!("encoder.block{l}"), att, rng))
            .collect();
        let agent_head = Mlp::new(store, "marginal.agent", (c, c, 2 * k * t + k), HEAD_GAIN, rng);
        let ego_tp_head = Mlp::new(store, "marginal.ego_tp", (c, c, 4 * t), HEAD_GAIN, rng);
        set_bias(store, &ego_tp_head, 2 * t..4 * t, sigma_bias());
        let ego_sp_head = Mlp::new(store, "marginal.ego_sp", (c, c, P_SP - 1), HEAD_GAIN, rng);
        let joint = if config.joint {
            let ego_modes = store.register_glorot("joint.ego_modes", m, c, 1.0, rng);
            let agent_modes = store.register_glorot("joint.agent_modes", m, c, 1.0, rng);
            let refine = (0..config.refine_layers)
                .map(|l| RefineLayer {
                    entity: AttentionBlock::new(store, &format!("joint.refine{l}.entity"), att, rng),
                    mode: AttentionBlock::new(store, &format!("joint.refine{l}.mode"), att, rng),
                })
                .collect();
            let ego_head = Mlp::new(store, "joint.ego_head", (c, c, 4 * t + 1), HEAD_GAIN, rng);
            set_bias(store, &ego_head, 2 * t..4 * t, sigma_bias());
            let agent_head = Mlp::new(store, "joint.agent_head", (c, c, 2 * t + 1), HEAD_GAIN, rng);
            Some(JointBranch {
                ego_modes,
                agent_modes,
                refine,
                ego_head,
                agent_head,
            })
        } else {
            None
        };
        Ok(Self {
            config,
            entity_mlp,
            map_mlp,
            encoder,
            agent_head,
            ego_tp_head,
            ego_sp_head,
            joint,
        })
    }

    /// Fresh model and parameters from a seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = crate::seed::rng(seed, crate::seed::Purpose::Init, &[]);
        let model = Self::new(config, &mut store, &mut rng)?;
        Ok((model, store))
    }

    /// Parameters of the agent joint head (frozen during ego-scope alignment).
    pub fn agent_joint_head_params(&self) -> Vec<ParamId> {
        self.joint
            .as_ref()
            .map(|j| {
                vec![
                    j.agent_head.hidden.weight,
                    j.agent_head.hidden.bias,
                    j.agent_head.out.weight,
                    j.agent_head.out.bias,
                ]
            })
            .unwrap_or_default()
    }

    /// Joint-mode embedding tables `(ego, agent)`.
    pub fn mode_embedding_params(&self) -> Option<(ParamId, ParamId)> {
        self.joint.as_ref().map(|j| (j.ego_modes, j.agent_modes))
    }

    /// Entity embeddings `[(N+1) × C]` (ego first) and the map token.
    pub fn encode<'t>(&self, b: &Binder<'t, '_>, f: &SceneFeatures) -> Result<Var<'t>> {
        let tape = b.tape();
        let ent = self.entity_mlp.forward(b, tape.constant(f.entities.clone()))?;
        let map = self.map_mlp.forward(b, tape.constant(f.map.clone()))?;
        let mut tokens = tape.concat_rows(&[ent, map])?;
        let groups = vec![(0..f.n_agents + 2).collect::<Vec<_>>()];
        for block in &self.encoder {
            tokens = block.forward(b, tokens, &groups)?;
        }
        Ok(tokens.select_rows(&(0..=f.n_agents).collect::<Vec<_>>())?)
    }

    /// Builds the entity-major mode stacks: row `e·(1+M) + s`, slot 0 the
    /// decoded embedding, slots `1..=M` the embedding plus a mode table row.
    pub fn mode_stacks<'t>(&self, b: &Binder<'t, '_>, emb: Var<'t>, n_agents: usize) -> Result<Var<'t>> {
        let j = self.joint.as_ref().ok_or_else(|| crate::Error::config("model has no joint branch"))?;
        let m = self.config.joint_modes;
        let c = self.config.width;
        let tape = b.tape();
        let idx: Vec<usize> = (0..=n_agents).flat_map(|e| std::iter::repeat(e).take(1 + m)).collect();
        let base = emb.select_rows(&idx)?;
        let zero = tape.constant(Tensor::zeros(&[1, c]));
        let (ze, za) = (b.p(j.ego_modes), b.p(j.agent_modes));
        let mut parts = vec![zero, ze];
        for _ in 0..n_agents {
            parts.push(zero);
            parts.push(za);
        }
        Ok(base.add(tape.concat_rows(&parts)?)?)
    }

    /// Agent-Mode Attention: `block` applied independently within each entity's stack.
    pub fn agent_mode_attention<'t>(
        &self,
        b: &Binder<'t, '_>,
        block: &AttentionBlock,
        stacks: Var<'t>,
        n_entities: usize,
    ) -> Result<Var<'t>> {
        let s = 1 + self.config.joint_modes;
        let groups: Vec<Vec<usize>> = (0..n_entities).map(|e| (e * s..(e + 1) * s).collect()).collect();
        Ok(block.forward(b, stacks, &groups)?)
    }

    /// Two-stage refinement of the mode stacks.
    pub fn refine<'t>(&self, b: &Binder<'t, '_>, mut stacks: Var<'t>, n_agents: usize) -> Result<Var<'t>> {
        let j = self.joint.as_ref().ok_or_else(|| crate::Error::config("model has no joint branch"))?;
        let s = 1 + self.config.joint_modes;
        let ne = n_agents + 1;
        let slot_groups: Vec<Vec<usize>> = (0..s).map(|k| (0..ne).map(|e| e * s + k).collect()).collect();
        for layer in &j.refine {
            stacks = layer.entity.forward(b, stacks, &slot_groups)?;
            stacks = self.agent_mode_attention(b, &layer.mode, stacks, ne)?;
        }
        Ok(stacks)
    }

    fn rotate_offsets<'t>(
        tape: &'t Tape,
        ox: Var<'t>,
        oy: Var<'t>,
        rows: &[(f64, Vec<Point2>)],
        repeat: usize,
    ) -> Result<Traj<'t>> {
        // rows: (heading, anchor) per entity; each offset row holds `repeat` trajectories
        let n = rows.len();
        let w = repeat * T_FUT;
        let mut c = Vec::with_capacity(n * w);
        let mut s = Vec::with_capacity(n * w);
        let mut ax = Vec::with_capacity(n * w);
        let mut ay = Vec::with_capacity(n * w);
        for (h, anchor) in rows {
            for _ in 0..repeat {
                for p in anchor {
                    c.push(h.cos() * OFFSET_SCALE);
                    s.push(h.sin() * OFFSET_SCALE);
                    ax.push(p.x);
                    ay.push(p.y);
                }
            }
        }
        let cst = |d: Vec<f64>| tape.constant(Tensor::from_parts(vec![n, w], d));
        let (c, s, ax, ay) = (cst(c), cst(s), cst(ax), cst(ay));
        let x = ax.add(c.mul(ox)?)?.sub(s.mul(oy)?)?;
        let y = ay.add(s.mul(ox)?)?.add(c.mul(oy)?)?;
        Ok(Traj {
            x: x.reshape(&[n * repeat, T_FUT])?,
            y: y.reshape(&[n * repeat, T_FUT])?,
        })
    }

    /// Marginal heads from decoded embeddings `[(N+1) × C]`.
    #[allow(clippy::type_complexity)]
    pub fn marginal_heads<'t>(
        &self,
        b: &Binder<'t, '_>,
        emb: Var<'t>,
        f: &SceneFeatures,
    ) -> Result<(Option<Traj<'t>>, Option<Var<'t>>, Traj<'t>, Traj<'t>, Traj<'t>)> {
        let tape = b.tape();
        let (k, t, n) = (self.config.marginal_modes, T_FUT, f.n_agents);
        let (agents, logits) = if n > 0 {
            let rows = emb.select_rows(&(1..=n).collect::<Vec<_>>())?;
            let out = self.agent_head.forward(b, rows)?;
            let ox = out.slice_cols(0, k * t)?;
            let oy = out.slice_cols(k * t, k * t)?;
            let lg = out.slice_cols(2 * k * t, k)?;
            let ent: Vec<(f64, Vec<Point2>)> = (1..=n).map(|i| (f.headings[i], f.anchors[i].clone())).collect();
            (Some(Self::rotate_offsets(tape, ox, oy, &ent, k)?), Some(lg))
        } else {
            (None, None)
        };
        let ego = emb.select_rows(&[0])?;
        let out = self.ego_tp_head.forward(b, ego)?;
        let ego_rows = [(f.headings[0], f.anchors[0].clone())];
        let tp = Self::rotate_offsets(tape, out.slice_cols(0, t)?, out.slice_cols(t, t)?, &ego_rows, 1)?;
        let sigma = Traj {
            x: bounded_sigma(out.slice_cols(2 * t, t)?),
            y: bounded_sigma(out.slice_cols(3 * t, t)?),
        };
        let inc = self.ego_sp_head.forward(b, ego)?.scale(HEADING_SCALE);
        let phi = inc.cumsum_last().add_scalar(f.headings[0]);
        let sp = Traj {
            x: phi.cos().scale(SP_SPACING).cumsum_last(),
            y: phi.sin().scale(SP_SPACING).cumsum_last(),
        };
        Ok((agents, logits, tp, sigma, sp))
    }

    /// Joint heads over refined stacks.
    pub fn joint_heads<'t>(&self, b: &Binder<'t, '_>, stacks: Var<'t>, f: &SceneFeatures) -> Result<JointOutput<'t>> {
        let j = self.joint.as_ref().ok_or_else(|| crate::Error::config("model has no joint branch"))?;
        let tape = b.tape();
        let (m, t, n) = (self.config.joint_modes, T_FUT, f.n_agents);
        let s = 1 + m;
        let ego_rows = stacks.select_rows(&(1..=m).collect::<Vec<_>>())?;
        let out = j.ego_head.forward(b, ego_rows)?;
        let ego_ent: Vec<(f64, Vec<Point2>)> = vec![(f.headings[0], f.anchors[0].clone()); m];
        let ego_mu = Self::rotate_offsets(tape, out.slice_cols(0, t)?, out.slice_cols(t, t)?, &ego_ent, 1)?;
        let ego_sigma = Traj {
            x: bounded_sigma(out.slice_cols(2 * t, t)?),
            y: bounded_sigma(out.slice_cols(3 * t, t)?),
        };
        let ego_logits = out.slice_cols(4 * t, 1)?.reshape(&[1, m])?;
        let (agent_trajs, agent_logits) = if n > 0 {
            let idx: Vec<usize> = (1..=n).flat_map(|e| (1..=m).map(move |k| e * s + k)).collect();
            let out = j.agent_head.forward(b, stacks.select_rows(&idx)?)?;
            let ent: Vec<(f64, Vec<Point2>)> = (1..=n)
                .flat_map(|i| std::iter::repeat((f.headings[i], f.anchors[i].clone())).take(m))
                .collect();
            let tr = Self::rotate_offsets(tape, out.slice_cols(0, t)?, out.slice_cols(t, t)?, &ent, 1)?;
            (Some(tr), Some(out.slice_cols(2 * t, 1)?.reshape(&[n, m])?))
        } else {
            (None, None)
        };
        Ok(JointOutput {
            ego_mu,
            ego_sigma,
            ego_logits,
            agent_trajs,
            agent_logits,
        })
    }

    /// Full forward pass over precomputed features.
    pub fn forward<'t>(&self, b: &Binder<'t, '_>, f: &SceneFeatures) -> Result<ModelOutput<'t>> {
        let emb = self.encode(b, f)?;
        let (decoded, joint) = if self.joint.is_some() {
            let stacks = self.mode_stacks(b, emb, f.n_agents)?;
            let refined = self.refine(b, stacks, f.n_agents)?;
            let s = 1 + self.config.joint_modes;
            let slot0: Vec<usize> = (0..=f.n_agents).map(|e| e * s).collect();
            (refined.select_rows(&slot0)?, Some(self.joint_heads(b, refined, f)?))
        } else {
            (emb, None)
        };
        let (marginal_agents, marginal_logits, ego_tp, ego_tp_sigma, ego_sp) = self.marginal_heads(b, decoded, f)?;
        Ok(ModelOutput {
            n_agents: f.n_agents,
            marginal_agents,
            marginal_logits,
            ego_tp,
            ego_tp_sigma,
            ego_sp,
            joint,
        })
    }

    /// Inference on an ego-frame scene.
    pub fn predict(&self, store: &ParamStore, scene: &Scene) -> Result<Prediction> {
        let tape = Tape::new();
        let b = Binder::new(&tape, store);
        let f = SceneFeatures::new(scene);
        Ok(self.forward(&b, &f)?.prediction())
    }
}

/// Which output drives the ego in closed loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanSource {
    /// Mean of the highest-probability joint mode, falling back to the
    /// marginal plan when the model has no joint branch.
    Joint,
    Marginal,
}

/// A trained network acting as a closed-loop policy.
pub struct ModelPolicy<'a> {
    pub model: &'a CaadModel,
    pub params: &'a ParamStore,
    pub source: PlanSource,
}

impl ModelPolicy<'_> {
    pub fn plan_for(&self, scene: &Scene) -> Result<Vec<Point2>> {
        let pred = self.model.predict(self.params, scene)?;
        Ok(match (self.source, pred.best_mode()) {
            (PlanSource::Joint, Some(h)) => h.ego_traj.clone(),
            _ => pred.ego_tp,
        })
    }
}

impl Policy for ModelPolicy<'_> {
    fn plan(&self, obs: &Observation) -> Result<Vec<Point2>> {
        self.plan_for(&obs.scene)
    }
}
