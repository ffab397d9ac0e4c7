//! Supervised objectives: focal mode classification, Gaussian NLL and L2
//! trajectory regression, the marginal (end-to-end) loss and the joint
//! losses partitioned by the interaction set.
//!
//! Each regression term is a mean over its valid elements. Joint losses sum
//! one such term per supervised entity.

use serde::{Deserialize, Serialize};

use crate::assignment::{AgentTarget, InteractionSet, ModeAssignment};
use crate::geometry::Point2;
use crate::model::{JointOutput, ModelOutput, Traj};
use crate::numerics::{Tape, Tensor, Var};
use crate::scene::{gt_spatial_path, Scene};
use crate::{Error, Result};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_joint: f64,
    pub lambda_rl: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_joint: 1.0,
            // the policy-gradient term is two orders of magnitude larger than
            // the imitation gradient at initialisation
            lambda_rl: 0.01,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_joint >= 0.0 && self.lambda_rl >= 0.0) {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if !(self.focal_gamma >= 0.0 && self.focal_alpha > 0.0) {
            return Err(Error::config("focal gamma must be >= 0 and alpha > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub e2e: f64,
    pub joint_reg: f64,
    pub joint_cls: f64,
    pub grpo: f64,
    pub total: f64,
}

impl LossReport {
    /// `total = e2e + λ_joint·(joint_reg + joint_cls) + λ_rl·grpo`.
    pub fn compose(e2e: f64, joint_reg: f64, joint_cls: f64, grpo: f64, w: &LossWeights) -> Self {
        Self {
            e2e,
            joint_reg,
            joint_cls,
            grpo,
            total: e2e + w.lambda_joint * (joint_reg + joint_cls) + w.lambda_rl * grpo,
        }
    }
}

/// Ground truth of an ego-frame scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTargets {
    pub ego_tp: Vec<Point2>,
    /// `P_SP` points starting at the ego position.
    pub ego_sp: Vec<Point2>,
    pub agents: Vec<AgentTarget>,
}

impl SceneTargets {
    pub fn new(scene: &Scene) -> Self {
        Self {
            ego_tp: scene.ego.future_points(),
            ego_sp: gt_spatial_path(&scene.ego),
            agents: scene
                .agents
                .iter()
                .map(|a| AgentTarget {
                    points: a.future_points(),
                    valid: a.gt_valid.clone(),
                })
                .collect(),
        }
    }

    /// Indices of agents with at least one valid step.
    pub fn supervised(&self) -> Vec<usize> {
        (0..self.agents.len()).filter(|&i| self.agents[i].supervised()).collect()
    }
}

/// `−α(1−p_t)^γ log p_t` on plain values.
pub fn focal_value(logits: &[f64], target: usize, gamma: f64, alpha: f64) -> f64 {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    let logp = logits[target] - lse;
    let p = logp.exp();
    let w = if gamma == 0.0 { 1.0 } else { (1.0 - p).powf(gamma) };
    -alpha * w * logp
}

/// Summed focal loss of each row of `logits` (`[R × M]`) at its target.
pub fn focal_loss<'t>(logits: Var<'t>, targets: &[usize], gamma: f64, alpha: f64) -> Result<Var<'t>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != targets.len() || targets.iter().any(|&t| t >= shape[1]) {
        return Err(Error::validation(format!(
            "focal targets {targets:?} do not fit logits {shape:?}"
        )));
    }
    let m = shape[1];
    let mut onehot = vec![0.0; targets.len() * m];
    for (r, &t) in targets.iter().enumerate() {
        onehot[r * m + t] = 1.0;
    }
    let tape = logits.tape();
    let mask = tape.constant(Tensor::from_parts(shape.clone(), onehot));
    let logp = logits.log_softmax(1)?.mul(mask)?.sum_last();
    let weighted = if gamma == 0.0 {
        logp
    } else {
        logp.exp().neg().add_scalar(1.0).powf(gamma).mul(logp)?
    };
    Ok(weighted.sum().scale(-alpha))
}

fn row<'t>(tape: &'t Tape, v: Vec<f64>) -> Var<'t> {
    let n = v.len();
    tape.constant(Tensor::from_parts(vec![1, n], v))
}

fn check_target(traj: &Traj<'_>, target: &[Point2], valid: &[bool]) -> Result<usize> {
    let shape = traj.x.shape();
    if shape != [1, target.len()] || valid.len() != target.len() {
        return Err(Error::validation(format!(
            "regression target of {} steps for trajectory {shape:?}",
            target.len()
        )));
    }
    let n = valid.iter().filter(|&&v| v).count();
    if n == 0 {
        return Err(Error::validation("regression over an all-invalid mask"));
    }
    Ok(n)
}

/// Mean squared coordinate error of a single-row trajectory over valid steps.
pub fn masked_mse<'t>(traj: Traj<'t>, target: &[Point2], valid: &[bool]) -> Result<Var<'t>> {
    let n = check_target(&traj, target, valid)?;
    let tape = traj.x.tape();
    let mask = row(tape, valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect());
    let tx = row(tape, target.iter().map(|p| p.x).collect());
    let ty = row(tape, target.iter().map(|p| p.y).collect());
    let ex = traj.x.sub(tx)?.square().mul(mask)?.sum();
    let ey = traj.y.sub(ty)?.square().mul(mask)?.sum();
    Ok(ex.add(ey)?.scale(0.5 / n as f64))
}

/// Diagonal Gaussian NLL `½((μ−τ)²/σ² + 2 log σ + log 2π)`, mean over valid
/// steps and both coordinates.
pub fn gaussian_nll<'t>(mu: Traj<'t>, sigma: Traj<'t>, target: &[Point2], valid: &[bool]) -> Result<Var<'t>> {
    let n = check_target(&mu, target, valid)?;
    let tape = mu.x.tape();
    let mask = row(tape, valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect());
    let tx = row(tape, target.iter().map(|p| p.x).collect());
    let ty = row(tape, target.iter().map(|p| p.y).collect());
    let term = |m: Var<'t>, s: Var<'t>, t: Var<'t>| -> Result<Var<'t>> {
        let z = m.sub(t)?.div(s)?.square().scale(0.5);
        Ok(z.add(s.ln())?.add_scalar(HALF_LN_2PI).mul(mask)?.sum())
    };
    let total = term(mu.x, sigma.x, tx)?.add(term(mu.y, sigma.y, ty)?)?;
    Ok(total.scale(0.5 / n as f64))
}

/// Plain-value Gaussian NLL matching [`gaussian_nll`].
pub fn gaussian_nll_value(mu: &[Point2], sigma: &[Point2], target: &[Point2], valid: &[bool]) -> Result<f64> {
    let n = valid.iter().filter(|&&v| v).count();
    if n == 0 {
        return Err(Error::validation("regression over an all-invalid mask"));
    }
    let e = |m: f64, s: f64, t: f64| 0.5 * ((m - t) / s).powi(2) + s.ln() + HALF_LN_2PI;
    let sum: f64 = (0..target.len())
        .filter(|&i| valid[i])
        .map(|i| e(mu[i].x, sigma[i].x, target[i].x) + e(mu[i].y, sigma[i].y, target[i].y))
        .sum();
    Ok(sum / (2 * n) as f64)
}

fn zero<'t>(tape: &'t Tape) -> Var<'t> {
    tape.scalar(0.0)
}

/// Marginal objective: winner-takes-all agent regression and focal
/// classification (both averaged over supervised agents) plus ego temporal
/// and spatial plan regression.
pub fn e2e_loss<'t>(
    out: &ModelOutput<'t>,
    targets: &SceneTargets,
    k_star: &[Option<usize>],
    w: &LossWeights,
) -> Result<Var<'t>> {
    let tape = out.ego_tp.x.tape();
    let sup: Vec<(usize, usize)> = k_star
        .iter()
        .enumerate()
        .filter_map(|(i, k)| k.map(|k| (i, k)))
        .collect();
    let mut loss = zero(tape);
    if let (Some(agents), Some(logits), false) = (out.marginal_agents, out.marginal_logits, sup.is_empty()) {
        let kk = agents.rows() / out.n_agents;
        let mut reg = zero(tape);
        for &(i, k) in &sup {
            let t = &targets.agents[i];
            reg = reg.add(masked_mse(agents.select_rows(&[i * kk + k])?, &t.points, &t.valid)?)?;
        }
        let rows: Vec<usize> = sup.iter().map(|&(i, _)| i).collect();
        let ks: Vec<usize> = sup.iter().map(|&(_, k)| k).collect();
        let cls = focal_loss(logits.select_rows(&rows)?, &ks, w.focal_gamma, w.focal_alpha)?;
        loss = reg.add(cls)?.scale(1.0 / sup.len() as f64);
    }
    let all = vec![true; targets.ego_tp.len()];
    let tp = masked_mse(out.ego_tp, &targets.ego_tp, &all)?;
    let sp_t = &targets.ego_sp[1..];
    let sp = masked_mse(out.ego_sp, sp_t, &vec![true; sp_t.len()])?;
    Ok(loss.add(tp)?.add(sp)?)
}

/// Focal terms: ego joint logits at `m*`, interaction agents' joint logits
/// at `m*`, every other supervised agent's marginal logits at its `k*`.
pub fn joint_cls_loss<'t>(
    joint: &JointOutput<'t>,
    marginal_logits: Option<Var<'t>>,
    assignment: &ModeAssignment,
    interaction: &InteractionSet,
    w: &LossWeights,
) -> Result<Var<'t>> {
    let (g, a) = (w.focal_gamma, w.focal_alpha);
    let m = assignment.m_star;
    let mut loss = focal_loss(joint.ego_logits, &[m], g, a)?;
    let (mut int_rows, mut other_rows, mut other_k) = (vec![], vec![], vec![]);
    for (i, k) in assignment.k_star.iter().enumerate() {
        let Some(k) = k else { continue };
        if interaction.contains(i) {
            int_rows.push(i);
        } else {
            other_rows.push(i);
            other_k.push(*k);
        }
    }
    if !int_rows.is_empty() {
        let lg = joint
            .agent_logits
            .ok_or_else(|| Error::validation("interaction agents without joint logits"))?;
        let targets = vec![m; int_rows.len()];
        loss = loss.add(focal_loss(lg.select_rows(&int_rows)?, &targets, g, a)?)?;
    }
    if !other_rows.is_empty() {
        let lg = marginal_logits.ok_or_else(|| Error::validation("agents without marginal logits"))?;
        loss = loss.add(focal_loss(lg.select_rows(&other_rows)?, &other_k, g, a)?)?;
    }
    Ok(loss)
}

/// Ego Gaussian NLL at `m*`, L2 of interaction agents' mode-`m*` joint
/// trajectories, L2 of every other supervised agent's best marginal candidate.
pub fn joint_reg_loss<'t>(
    joint: &JointOutput<'t>,
    marginal_agents: Option<Traj<'t>>,
    assignment: &ModeAssignment,
    interaction: &InteractionSet,
    targets: &SceneTargets,
) -> Result<Var<'t>> {
    let m = assignment.m_star;
    let n_modes = joint.ego_mu.rows();
    let all = vec![true; targets.ego_tp.len()];
    let mut loss = gaussian_nll(
        joint.ego_mu.select_rows(&[m])?,
        joint.ego_sigma.select_rows(&[m])?,
        &targets.ego_tp,
        &all,
    )?;
    for (i, k) in assignment.k_star.iter().enumerate() {
        let Some(k) = *k else { continue };
        let t = &targets.agents[i];
        let traj = if interaction.contains(i) {
            let tr = joint
                .agent_trajs
                .ok_or_else(|| Error::validation("interaction agents without joint trajectories"))?;
            tr.select_rows(&[i * n_modes + m])?
        } else {
            let tr = marginal_agents.ok_or_else(|| Error::validation("agents without marginal trajectories"))?;
            let kk = tr.rows() / targets.agents.len();
            tr.select_rows(&[i * kk + k])?
        };
        loss = loss.add(masked_mse(traj, &t.points, &t.valid)?)?;
    }
    Ok(loss)
}

/// `e2e + λ_joint·(reg + cls) + λ_rl·grpo` on the tape.
pub fn total_loss<'t>(
    e2e: Var<'t>,
    joint_reg: Var<'t>,
    joint_cls: Var<'t>,
    grpo: Var<'t>,
    w: &LossWeights,
) -> Result<Var<'t>> {
    Ok(e2e
        .add(joint_reg.add(joint_cls)?.scale(w.lambda_joint))?
        .add(grpo.scale(w.lambda_rl))?)
}
