//! End-to-end finite-difference verification of the full training objective.
//!
//! Discrete choices (best marginal candidates, interaction set, joint mode
//! and rollout samples) are fixed at the base point, which leaves the
//! objective smooth in every parameter, so central differences converge to
//! the analytic gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::assignment::{
    assign_modes, best_marginal_modes, AssignmentStrategy, EgoCue, InteractionSet, ModeAssignment,
};
use crate::grpo::{ego_policy, grpo_loss, sample_group, RolloutGroup};
use crate::losses::{e2e_loss, joint_cls_loss, joint_reg_loss, total_loss, LossWeights};
use crate::model::{CaadModel, ModelConfig};
use crate::numerics::gradcheck::{check_params, GradCheckReport, DEFAULT_FLOOR};
use crate::numerics::{Binder, ParamStore, Tape, Var};
use crate::scene::{generate_scene, ScenarioTag, Scene};
use crate::trainer::PreparedScene;
use crate::{Error, Result};

pub const FIXTURE_AGENTS: usize = 3;
pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-3;
const FIXTURE_GROUP: usize = 4;

/// Narrow architecture so that every parameter can be perturbed quickly.
pub fn fixture_model() -> ModelConfig {
    ModelConfig {
        width: 8,
        heads: 2,
        joint_modes: 3,
        marginal_modes: 2,
        encoder_layers: 1,
        refine_layers: 1,
        joint: true,
    }
}

/// A generated scene cut down to its `FIXTURE_AGENTS` nearest agents.
pub fn fixture_scene(seed: u64) -> Result<Scene> {
    for k in 0..64 {
        let tag = ScenarioTag::ALL[(k % ScenarioTag::ALL.len() as u64) as usize];
        let mut s = generate_scene(seed.wrapping_add(k), tag)?;
        if s.agents.len() >= FIXTURE_AGENTS {
            let ego = s.ego.current().position();
            s.agents
                .sort_by(|a, b| a.current().position().dist(ego).total_cmp(&b.current().position().dist(ego)));
            s.agents.truncate(FIXTURE_AGENTS);
            return Ok(s);
        }
    }
    Err(Error::validation("no generated scene has enough agents"))
}

struct Frozen {
    k_star: Vec<Option<usize>>,
    assignment: ModeAssignment,
    interaction: InteractionSet,
    groups: Vec<RolloutGroup>,
}

fn objective<'t>(
    model: &CaadModel,
    b: &Binder<'t, '_>,
    scene: &PreparedScene,
    frozen: &Frozen,
    w: &LossWeights,
) -> Result<Var<'t>> {
    let out = model.forward(b, &scene.features)?;
    let t = &scene.targets;
    let j = out.joint.as_ref().ok_or_else(|| Error::config("gradient fixture needs the joint branch"))?;
    let e2e = e2e_loss(&out, t, &frozen.k_star, w)?;
    let reg = joint_reg_loss(j, out.marginal_agents, &frozen.assignment, &frozen.interaction, t)?;
    let cls = joint_cls_loss(j, out.marginal_logits, &frozen.assignment, &frozen.interaction, w)?;
    let mut groups = frozen.groups.clone();
    let grpo = grpo_loss(&ego_policy(&out), &mut groups, 0.2)?;
    total_loss(e2e, reg, cls, grpo, w)
}

/// Checks the gradient of `e2e + joint_reg + joint_cls + grpo` over every
/// parameter of a freshly initialised model on `scene`.
pub fn gradient_check(config: ModelConfig, scene: &Scene, seed: u64, step: f64) -> Result<GradCheckReport> {
    let prep = PreparedScene::new(scene, EgoCue::Spatial)?;
    let (model, store) = CaadModel::init(config, seed)?;
    let w = LossWeights::default();
    let pred = model.predict(&store, &prep.scene)?;
    let t = &prep.targets;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = vec![];
    for h in &pred.hypotheses {
        let mut g = sample_group(h, FIXTURE_GROUP, &mut rng)?;
        let n = g.len();
        // spread of rewards so that some advantages are non-zero
        let rewards = (0..n).map(|i| i as f64 / n as f64).collect();
        let mut collided = vec![false; n];
        collided[0] = h.mode_index == 0;
        g.set_rewards(rewards, collided, 1e-6)?;
        groups.push(g);
    }
    let frozen = Frozen {
        k_star: best_marginal_modes(&pred.marginal, &t.agents)?,
        assignment: assign_modes(
            &pred.hypotheses,
            &t.ego_tp,
            &pred.marginal,
            &t.agents,
            AssignmentStrategy::EgoCentric,
        )?,
        // both supervision branches are exercised: even agents joint, odd marginal
        interaction: InteractionSet {
            members: (0..t.agents.len()).filter(|i| i % 2 == 0).collect(),
            evidence: vec![],
        },
        groups,
    };

    let analytic = {
        let tape = Tape::new();
        let b = Binder::new(&tape, &store);
        let loss = objective(&model, &b, &prep, &frozen, &w)?;
        let mut g = tape.backward(loss)?;
        b.collect(&mut g)
    };
    let mut failure = None;
    let report = check_params(&store, &analytic, step, DEFAULT_FLOOR, |s: &ParamStore| {
        let tape = Tape::new();
        let b = Binder::new(&tape, s);
        match objective(&model, &b, &prep, &frozen, &w) {
            Ok(v) => v.item(),
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}
