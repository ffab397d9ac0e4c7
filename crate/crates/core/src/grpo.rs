//! Group-relative policy alignment of the Gaussian ego planner.
//!
//! For every joint mode a group of rollouts is drawn from the mode's
//! diagonal Gaussian, scored, normalised into advantages and truncated
//! (collisions pinned to −1, everything else floored at 0), then optimised
//! through the clipped ratio surrogate. The sampling-time log-density is the
//! frozen baseline, so the first update sees a ratio of exactly 1.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::Point2;
use crate::model::{ModelOutput, SceneHypothesis, Traj};
use crate::numerics::{Tape, Tensor, Var};
use crate::reward::RewardContext;
use crate::scene::Scene;
use crate::{Error, Result};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Fixed standard deviation of agent rollouts under all-agent alignment.
pub const AGENT_SIGMA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignScope {
    /// Only the ego policy receives the policy-gradient signal.
    Ego,
    /// Agent joint trajectories are aligned as well, each against the other
    /// entities' ground truth.
    AllAgents,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub std_eps: f64,
    pub scope: AlignScope,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_eps: 0.2,
            std_eps: 1e-6,
            scope: AlignScope::Ego,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::config("group size must be at least 2"));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::config("clip epsilon must lie in (0, 1)"));
        }
        if !(self.std_eps > 0.0) {
            return Err(Error::config("std epsilon must be positive"));
        }
        Ok(())
    }
}

/// Rollouts drawn from one row of a Gaussian trajectory policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub mode: usize,
    /// Row of the policy tensors the group was drawn from.
    pub row: usize,
    pub rollouts: Vec<Vec<Point2>>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub truncated: Vec<f64>,
    pub collided: Vec<bool>,
    pub old_logp: Vec<f64>,
    pub new_logp: Vec<f64>,
}

impl RolloutGroup {
    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }

    /// Attaches rewards and derives both advantage vectors.
    pub fn set_rewards(&mut self, rewards: Vec<f64>, collided: Vec<bool>, std_eps: f64) -> Result<()> {
        if rewards.len() != self.len() || collided.len() != self.len() {
            return Err(Error::validation("reward count does not match the group"));
        }
        let (a, t) = compute_advantages(&rewards, &collided, std_eps);
        self.rewards = rewards;
        self.collided = collided;
        self.advantages = a;
        self.truncated = t;
        Ok(())
    }

    /// Keeps only the rollouts at `keep`, preserving order.
    pub fn retain(&mut self, keep: &[usize]) {
        self.rollouts = keep.iter().map(|&i| self.rollouts[i].clone()).collect();
        self.old_logp = keep.iter().map(|&i| self.old_logp[i]).collect();
        self.new_logp.clear();
    }
}

/// Diagonal Gaussian log-density of a trajectory.
pub fn gaussian_logp(points: &[Point2], mu: &[Point2], sigma: &[Point2]) -> f64 {
    let term = |x: f64, m: f64, s: f64| -0.5 * ((x - m) / s).powi(2) - s.ln() - HALF_LN_2PI;
    points
        .iter()
        .zip(mu)
        .zip(sigma)
        .map(|((p, m), s)| term(p.x, m.x, s.x) + term(p.y, m.y, s.y))
        .sum()
}

/// Draws `g` rollouts with every coordinate independent `Normal(μ, σ)`.
pub fn sample_gaussian(
    mode: usize,
    row: usize,
    mu: &[Point2],
    sigma: &[Point2],
    g: usize,
    rng: &mut impl Rng,
) -> Result<RolloutGroup> {
    if mu.len() != sigma.len() || sigma.iter().any(|s| !(s.x > 0.0 && s.y > 0.0 && s.is_finite())) {
        return Err(Error::validation("policy sigma must be positive and match the mean"));
    }
    let rollouts: Vec<Vec<Point2>> = (0..g)
        .map(|_| {
            mu.iter()
                .zip(sigma)
                .map(|(m, s)| {
                    let ex: f64 = rng.sample(StandardNormal);
                    let ey: f64 = rng.sample(StandardNormal);
                    Point2::new(m.x + s.x * ex, m.y + s.y * ey)
                })
                .collect()
        })
        .collect();
    let old_logp = rollouts.iter().map(|r| gaussian_logp(r, mu, sigma)).collect();
    Ok(RolloutGroup {
        mode,
        row,
        rollouts,
        rewards: vec![],
        advantages: vec![],
        truncated: vec![],
        collided: vec![],
        old_logp,
        new_logp: vec![],
    })
}

/// Samples the ego group of one joint hypothesis.
pub fn sample_group(hyp: &SceneHypothesis, g: usize, rng: &mut impl Rng) -> Result<RolloutGroup> {
    sample_gaussian(hyp.mode_index, hyp.mode_index, &hyp.ego_traj, &hyp.ego_sigma, g, rng)
}

/// Population-normalised advantages and their truncation: `−1` for a
/// collided rollout, `max(0, A)` otherwise.
pub fn compute_advantages(rewards: &[f64], collided: &[bool], std_eps: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len().max(1) as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let a: Vec<f64> = rewards.iter().map(|r| (r - mean) / (std + std_eps)).collect();
    let t = a
        .iter()
        .zip(collided)
        .map(|(&a, &c)| if c { -1.0 } else { a.max(0.0) })
        .collect();
    (a, t)
}

/// Per-element clipped objective `min(ρ·Ã, clip(ρ, 1−ε, 1+ε)·Ã)`.
pub fn clipped_objective(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

/// A batch of Gaussian trajectory rows on the tape.
#[derive(Debug, Clone, Copy)]
pub struct GaussianPolicy<'t> {
    pub mu: Traj<'t>,
    pub sigma: Traj<'t>,
}

impl<'t> GaussianPolicy<'t> {
    /// Fixed isotropic standard deviation around `mu`.
    pub fn with_fixed_sigma(mu: Traj<'t>, sigma: f64) -> Self {
        let tape = mu.x.tape();
        let shape = mu.x.shape();
        let s = tape.constant(Tensor::full(&shape, sigma));
        Self {
            mu,
            sigma: Traj { x: s, y: s },
        }
    }

    /// Log-density of every rollout of `groups`, in group-major order (`[S]`).
    pub fn log_prob(&self, groups: &[RolloutGroup]) -> Result<Var<'t>> {
        let tape = self.mu.x.tape();
        let rows: Vec<usize> = groups.iter().flat_map(|g| vec![g.row; g.len()]).collect();
        if rows.is_empty() {
            return Err(Error::validation("no rollouts"));
        }
        let t = self.mu.x.shape()[1];
        let coord = |f: fn(&Point2) -> f64| -> Result<Var<'t>> {
            let mut d = Vec::with_capacity(rows.len() * t);
            for g in groups {
                for r in &g.rollouts {
                    if r.len() != t {
                        return Err(Error::validation("rollout length does not match the policy"));
                    }
                    d.extend(r.iter().map(f));
                }
            }
            Ok(tape.constant(Tensor::new(vec![rows.len(), t], d)?))
        };
        let (sx, sy) = (coord(|p| p.x)?, coord(|p| p.y)?);
        let mu = self.mu.select_rows(&rows)?;
        let sg = self.sigma.select_rows(&rows)?;
        let dim = |s: Var<'t>, m: Var<'t>, sd: Var<'t>| -> Result<Var<'t>> {
            let z = s.sub(m)?.div(sd)?.square().scale(-0.5);
            Ok(z.sub(sd.ln())?.add_scalar(-HALF_LN_2PI).sum_last())
        };
        Ok(dim(sx, mu.x, sg.x)?.add(dim(sy, mu.y, sg.y)?)?)
    }
}

fn flat(groups: &[RolloutGroup], f: impl Fn(&RolloutGroup) -> &Vec<f64>) -> Vec<f64> {
    groups.iter().flat_map(|g| f(g).iter().copied()).collect()
}

/// Clipped surrogate loss averaged over every rollout of `groups`; records
/// the current log-densities in each group's `new_logp`.
pub fn grpo_loss<'t>(policy: &GaussianPolicy<'t>, groups: &mut [RolloutGroup], eps: f64) -> Result<Var<'t>> {
    let tape = policy.mu.x.tape();
    let new = policy.log_prob(groups)?;
    let s = new.shape()[0];
    let vec_const = |v: Vec<f64>| -> Result<Var<'t>> { Ok(tape.constant(Tensor::new(vec![s], v)?)) };
    let old = vec_const(flat(groups, |g| &g.old_logp))?;
    let adv = vec_const(flat(groups, |g| &g.truncated))?;
    let ratio = new.sub(old)?.exp();
    let rv = ratio.to_vec();
    let bad: Vec<usize> = (0..s).filter(|&i| !rv[i].is_finite()).collect();
    if !bad.is_empty() {
        return Err(Error::NonFinite {
            context: format!("policy ratio at rollouts {bad:?}"),
        });
    }
    let nv = new.to_vec();
    let mut off = 0;
    for g in groups.iter_mut() {
        g.new_logp = nv[off..off + g.len()].to_vec();
        off += g.len();
    }
    let surr = ratio.mul(adv)?.minimum(ratio.clamp(1.0 - eps, 1.0 + eps).mul(adv)?)?;
    Ok(surr.sum().scale(-1.0 / s as f64))
}

/// `−mean(Ã·log π)`: the plain policy-gradient surrogate, whose gradient
/// equals the clipped loss's at unit ratio.
pub fn policy_gradient_surrogate<'t>(policy: &GaussianPolicy<'t>, groups: &[RolloutGroup]) -> Result<Var<'t>> {
    let tape = policy.mu.x.tape();
    let logp = policy.log_prob(groups)?;
    let s = logp.shape()[0];
    let adv = tape.constant(Tensor::new(vec![s], flat(groups, |g| &g.truncated))?);
    Ok(logp.mul(adv)?.sum().scale(-1.0 / s as f64))
}

/// The ego policy of a forward pass: joint mode rows when present, else the
/// single marginal plan.
pub fn ego_policy<'t>(out: &ModelOutput<'t>) -> GaussianPolicy<'t> {
    match &out.joint {
        Some(j) => GaussianPolicy {
            mu: j.ego_mu,
            sigma: j.ego_sigma,
        },
        None => GaussianPolicy {
            mu: out.ego_tp,
            sigma: out.ego_tp_sigma,
        },
    }
}

/// Counters of one alignment pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignStats {
    /// Scored ego rollouts.
    pub rollouts: usize,
    pub reward_sum: f64,
    /// Ego rollouts truncated by a collision.
    pub collided: usize,
    /// Rollouts rejected by reward validation.
    pub dropped: usize,
    pub groups_skipped: usize,
}

impl AlignStats {
    pub fn merge(&mut self, o: &AlignStats) {
        self.rollouts += o.rollouts;
        self.reward_sum += o.reward_sum;
        self.collided += o.collided;
        self.dropped += o.dropped;
        self.groups_skipped += o.groups_skipped;
    }

    pub fn mean_reward(&self) -> f64 {
        if self.rollouts == 0 {
            0.0
        } else {
            self.reward_sum / self.rollouts as f64
        }
    }

    pub fn collision_rate(&self) -> f64 {
        if self.rollouts == 0 {
            0.0
        } else {
            self.collided as f64 / self.rollouts as f64
        }
    }
}

pub struct AlignOutcome<'t> {
    /// `None` when every group was skipped.
    pub loss: Option<Var<'t>>,
    pub groups: Vec<RolloutGroup>,
    pub stats: AlignStats,
}

type Scored = Result<(f64, bool)>;

/// Scores sampled groups concurrently, drops invalid rollouts and groups
/// left with fewer than two members.
fn finish_groups(
    groups: Vec<RolloutGroup>,
    score: impl Fn(&RolloutGroup, &[Point2]) -> Scored + Sync,
    cfg: &GrpoConfig,
    stats: &mut AlignStats,
) -> Result<Vec<RolloutGroup>> {
    let scored: Vec<Vec<Scored>> = groups
        .par_iter()
        .map(|g| g.rollouts.par_iter().map(|r| score(g, r)).collect())
        .collect();
    let mut kept = vec![];
    for (mut g, s) in groups.into_iter().zip(scored) {
        let keep: Vec<usize> = (0..s.len()).filter(|&i| s[i].is_ok()).collect();
        stats.dropped += s.len() - keep.len();
        if keep.len() < 2 {
            stats.groups_skipped += 1;
            continue;
        }
        let (r, c): (Vec<f64>, Vec<bool>) = s.into_iter().filter_map(|x| x.ok()).unzip();
        g.retain(&keep);
        g.set_rewards(r, c, cfg.std_eps)?;
        kept.push(g);
    }
    if stats.dropped > 0 {
        log::debug!("dropped {} invalid rollouts", stats.dropped);
    }
    Ok(kept)
}

/// One scene's alignment objective against its forward pass. `scene` is the
/// ego-frame scene the forward pass was computed from.
pub fn align_scene<'t>(
    out: &ModelOutput<'t>,
    scene: &Scene,
    ctx: &RewardContext,
    cfg: &GrpoConfig,
    rng: &mut impl Rng,
) -> Result<AlignOutcome<'t>> {
    let policy = ego_policy(out);
    let mu = policy.mu.points();
    let sigma = policy.sigma.points();
    let mut stats = AlignStats::default();
    let mut ego = vec![];
    for (m, (mu_m, s_m)) in mu.iter().zip(&sigma).enumerate() {
        ego.push(sample_gaussian(m, m, mu_m, s_m, cfg.group_size, rng)?);
    }
    let mut ego = finish_groups(ego, |_, r| ctx.score(r).map(|b| (b.reward, b.collided)), cfg, &mut stats)?;
    for g in &ego {
        stats.rollouts += g.len();
        stats.reward_sum += g.rewards.iter().sum::<f64>();
        stats.collided += g.collided.iter().filter(|&&c| c).count();
    }
    let mut loss = if ego.is_empty() {
        None
    } else {
        Some(grpo_loss(&policy, &mut ego, cfg.clip_eps)?)
    };

    if cfg.scope == AlignScope::AllAgents {
        if let Some(trajs) = out.joint.as_ref().and_then(|j| j.agent_trajs) {
            let n_modes = mu.len();
            let pts = trajs.points();
            let ego_gt = scene.ego.future_points();
            let fixed = vec![Point2::new(AGENT_SIGMA, AGENT_SIGMA); ego_gt.len()];
            let mut agent_groups = vec![];
            for (i, a) in scene.agents.iter().enumerate() {
                if !a.has_valid_future() {
                    continue;
                }
                for m in 0..n_modes {
                    let row = i * n_modes + m;
                    agent_groups.push(sample_gaussian(m, row, &pts[row], &fixed, cfg.group_size, rng)?);
                }
            }
            let mut agent_stats = AlignStats::default();
            // group rows are entity-major, so the owning agent is `row / M`
            let mut groups = finish_groups(
                agent_groups,
                |g, r| ctx.score_agent(&ego_gt, g.row / n_modes, r),
                cfg,
                &mut agent_stats,
            )?;
            stats.dropped += agent_stats.dropped;
            stats.groups_skipped += agent_stats.groups_skipped;
            if !groups.is_empty() {
                let ap = GaussianPolicy::with_fixed_sigma(trajs, AGENT_SIGMA);
                let l = grpo_loss(&ap, &mut groups, cfg.clip_eps)?;
                loss = Some(match loss {
                    Some(e) => e.add(l)?,
                    None => l,
                });
            }
        }
    }
    Ok(AlignOutcome {
        loss,
        groups: ego,
        stats,
    })
}

/// Zero loss on `tape`, for scenes without a usable group.
pub fn zero_loss(tape: &Tape) -> Var<'_> {
    tape.scalar(0.0)
}
