//! Three-stage optimisation: marginal warm-up, joint supervision, then
//! policy alignment at a reduced learning rate.
//!
//! Every random draw comes from a stream derived from the run seed and the
//! (epoch, scene) coordinates, and per-scene gradients are reduced in batch
//! order, so a run is bit-reproducible regardless of thread count.

use std::collections::HashSet;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{
    assign_modes, best_marginal_modes, ego_cue_path, masked_distance, select_interaction_set, AssignmentStrategy,
    EgoCue, DEFAULT_MARGIN,
};
use crate::grpo::{align_scene, AlignScope, AlignStats, GrpoConfig};
use crate::losses::{e2e_loss, joint_cls_loss, joint_reg_loss, total_loss, LossReport, LossWeights, SceneTargets};
use crate::model::{CaadModel, ModelConfig, SceneFeatures};
use crate::numerics::{Binder, ParamGrads, ParamId, ParamStore, Tape, Tensor};
use crate::reward::RewardContext;
use crate::scene::{ego_frame_transform, Scene};
use crate::seed::{self, Purpose};
use crate::{Error, Result};

pub const METRICS_HEADER: &str = "epoch,stage,e2e,joint_reg,joint_cls,grpo,total,mean_group_reward,\
collision_trunc_rate,ego_min_ade,interaction_size_mean";

const CHECKPOINT_MAGIC: &[u8; 8] = b"JDRVCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    /// Epochs of stages 1, 2 and 3.
    pub epochs: [usize; 3],
    /// Learning rates of stages 1, 2 and 3.
    pub learning_rates: [f64; 3],
    pub weight_decay: f64,
    pub batch_size: usize,
    pub loss: LossWeights,
    pub grpo: GrpoConfig,
    pub ego_cue: EgoCue,
    pub assignment: AssignmentStrategy,
    pub interaction_margin: f64,
    /// Keep the supervised objectives alongside the policy loss in stage 3.
    pub stage3_supervised: bool,
    /// Scene file used by the command-line front end.
    pub train_scenes: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            epochs: [10, 20, 10],
            learning_rates: [1e-3, 1e-3, 1e-4],
            weight_decay: 1e-4,
            batch_size: 16,
            loss: LossWeights::default(),
            grpo: GrpoConfig::default(),
            ego_cue: EgoCue::Spatial,
            assignment: AssignmentStrategy::EgoCentric,
            interaction_margin: DEFAULT_MARGIN,
            stage3_supervised: true,
            train_scenes: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.grpo.validate()?;
        if self.learning_rates.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::config("learning rates must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.interaction_margin >= 0.0) {
            return Err(Error::config("interaction margin must be non-negative"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs.iter().sum()
    }

    /// Stage (1-based) of the 0-based global epoch `e`.
    pub fn stage_of(&self, e: usize) -> usize {
        if e < self.epochs[0] {
            1
        } else if e < self.epochs[0] + self.epochs[1] {
            2
        } else {
            3
        }
    }
}

/// First and second moments of decoupled-decay adaptive descent.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update of every parameter not in `frozen`. Parameters without a
    /// gradient are treated as having a zero gradient.
    pub fn apply(
        &mut self,
        store: &mut ParamStore,
        grads: &ParamGrads,
        lr: f64,
        weight_decay: f64,
        frozen: &HashSet<ParamId>,
    ) -> Result<()> {
        if self.m.len() != store.len() || grads.grads.len() != store.len() {
            return Err(Error::validation("optimizer state does not match the parameters"));
        }
        self.step += 1;
        let (c1, c2) = (1.0 - self.beta1.powi(self.step as i32), 1.0 - self.beta2.powi(self.step as i32));
        for id in store.ids().collect::<Vec<_>>() {
            if frozen.contains(&id) {
                continue;
            }
            let p = store.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            if m.len() != p.len() {
                return Err(Error::validation(format!("moment shape mismatch at parameter {}", id.0)));
            }
            let g = grads.get(id);
            if g.is_some_and(|g| g.len() != p.len()) {
                return Err(Error::validation(format!("gradient shape mismatch at parameter {}", id.0)));
            }
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                p[i] -= lr * weight_decay * p[i];
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based global epoch.
    pub epoch: usize,
    pub stage: usize,
    pub e2e: f64,
    pub joint_reg: f64,
    pub joint_cls: f64,
    pub grpo: f64,
    pub total: f64,
    pub mean_group_reward: f64,
    pub collision_trunc_rate: f64,
    pub ego_min_ade: f64,
    pub interaction_size_mean: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.stage,
            self.e2e,
            self.joint_reg,
            self.joint_cls,
            self.grpo,
            self.total,
            self.mean_group_reward,
            self.collision_trunc_rate,
            self.ego_min_ade,
            self.interaction_size_mean
        )
    }

    pub fn is_finite(&self) -> bool {
        [
            self.e2e,
            self.joint_reg,
            self.joint_cls,
            self.grpo,
            self.total,
            self.mean_group_reward,
            self.collision_trunc_rate,
            self.ego_min_ade,
            self.interaction_size_mean,
        ]
        .iter()
        .all(|x| x.is_finite())
    }
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in metrics {
        s.push_str(&m.csv_row());
        s.push('\n');
    }
    s
}

/// A training scene in the ego frame with everything the losses need.
pub struct PreparedScene {
    pub scene: Scene,
    pub features: SceneFeatures,
    pub targets: SceneTargets,
    pub cue_path: Vec<crate::geometry::Point2>,
    pub reward: RewardContext,
}

impl PreparedScene {
    pub fn new(world: &Scene, cue: EgoCue) -> Result<Self> {
        let scene = ego_frame_transform(world);
        Ok(Self {
            features: SceneFeatures::new(&scene),
            targets: SceneTargets::new(&scene),
            cue_path: ego_cue_path(&scene, cue),
            reward: RewardContext::new(world)?,
            scene,
        })
    }
}

pub fn prepare_scenes(scenes: &[Scene], cue: EgoCue) -> Result<Vec<PreparedScene>> {
    scenes.par_iter().map(|s| PreparedScene::new(s, cue)).collect()
}

/// Loss values and side statistics of one scene's forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct SceneStats {
    pub report: LossReport,
    pub align: AlignStats,
    pub ego_min_ade: f64,
    pub interaction_size: usize,
}

/// Forward, loss and backward for one scene at `stage`.
pub fn scene_gradients(
    model: &CaadModel,
    store: &ParamStore,
    scene: &PreparedScene,
    stage: usize,
    config: &TrainConfig,
    rollout_seed: u64,
) -> Result<(ParamGrads, SceneStats)> {
    let tape = Tape::new();
    let b = Binder::new(&tape, store);
    let out = model.forward(&b, &scene.features)?;
    let pred = out.prediction();
    let t = &scene.targets;
    let w = &config.loss;
    let mut stats = SceneStats::default();

    let k_star = best_marginal_modes(&pred.marginal, &t.agents)?;
    let all = vec![true; t.ego_tp.len()];
    stats.ego_min_ade = if pred.hypotheses.is_empty() {
        masked_distance(&pred.ego_tp, &t.ego_tp, &all)?
    } else {
        pred.hypotheses
            .iter()
            .map(|h| masked_distance(&h.ego_traj, &t.ego_tp, &all))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(f64::INFINITY, f64::min)
    };
    let interaction = if pred.marginal.candidates.len() == t.agents.len() && !t.agents.is_empty() {
        select_interaction_set(&scene.scene, &pred.marginal, &scene.cue_path, config.interaction_margin)?
    } else {
        Default::default()
    };
    stats.interaction_size = interaction.len();

    let supervised = stage < 3 || config.stage3_supervised;
    let zero = || tape.scalar(0.0);
    let e2e = if supervised { e2e_loss(&out, t, &k_star, w)? } else { zero() };
    let (reg, cls) = match (&out.joint, stage >= 2 && supervised) {
        (Some(j), true) => {
            let assignment = assign_modes(&pred.hypotheses, &t.ego_tp, &pred.marginal, &t.agents, config.assignment)?;
            (
                joint_reg_loss(j, out.marginal_agents, &assignment, &interaction, t)?,
                joint_cls_loss(j, out.marginal_logits, &assignment, &interaction, w)?,
            )
        }
        _ => (zero(), zero()),
    };
    let grpo = if stage == 3 {
        let mut rng = ChaCha8Rng::seed_from_u64(rollout_seed);
        let o = align_scene(&out, &scene.scene, &scene.reward, &config.grpo, &mut rng)?;
        stats.align = o.stats;
        o.loss.unwrap_or_else(zero)
    } else {
        zero()
    };
    let total = total_loss(e2e, reg, cls, grpo, w)?;
    stats.report = LossReport::compose(e2e.item(), reg.item(), cls.item(), grpo.item(), w);
    if !total.item().is_finite() {
        return Err(Error::NonFinite {
            context: format!("loss of scene {}", scene.scene.scene_id),
        });
    }
    let mut g = tape.backward(total)?;
    let grads = b.collect(&mut g);
    if !grads.all_finite() {
        return Err(Error::NonFinite {
            context: format!("gradients of scene {}", scene.scene.scene_id),
        });
    }
    Ok((grads, stats))
}

/// Model, parameters, optimizer state and metric history of a run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: CaadModel,
    pub store: ParamStore,
    pub optimizer: AdamW,
    /// Number of global epochs already run.
    pub completed: usize,
    pub metrics: Vec<EpochMetrics>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (model, store) = CaadModel::init(config.model, seed::derive(config.seed, Purpose::Init, &[]))?;
        let optimizer = AdamW::new(&store);
        Ok(Self {
            config,
            model,
            store,
            optimizer,
            completed: 0,
            metrics: vec![],
        })
    }

    /// Replaces the configuration while keeping parameters, optimizer state
    /// and progress; the architecture must be unchanged.
    pub fn reconfigure(&mut self, config: TrainConfig) -> Result<()> {
        config.validate()?;
        if config.model != self.config.model {
            return Err(Error::config("cannot change the model architecture of a run"));
        }
        self.config = config;
        Ok(())
    }

    pub fn is_finished(&self) -> bool {
        self.completed >= self.config.total_epochs()
    }

    /// Parameters left untouched by the optimizer at `stage`.
    pub fn frozen_params(&self, stage: usize) -> HashSet<ParamId> {
        if stage == 3 && self.config.grpo.scope == AlignScope::Ego {
            self.model.agent_joint_head_params().into_iter().collect()
        } else {
            HashSet::new()
        }
    }

    /// Runs one global epoch over `scenes`.
    pub fn train_epoch(&mut self, scenes: &[PreparedScene]) -> Result<EpochMetrics> {
        if scenes.is_empty() {
            return Err(Error::validation("no training scenes"));
        }
        let e = self.completed;
        let stage = self.config.stage_of(e);
        let lr = self.config.learning_rates[stage - 1];
        let frozen = self.frozen_params(stage);
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut seed::rng(self.config.seed, Purpose::Shuffle, &[e as u64]));

        let mut sums = EpochMetrics::default();
        let mut align = AlignStats::default();
        for batch in order.chunks(self.config.batch_size) {
            let results: Vec<Result<(ParamGrads, SceneStats)>> = batch
                .par_iter()
                .map(|&i| {
                    let rs = seed::derive(self.config.seed, Purpose::Rollout, &[e as u64, i as u64]);
                    scene_gradients(&self.model, &self.store, &scenes[i], stage, &self.config, rs)
                })
                .collect();
            let mut acc = ParamGrads::zeros_like(&self.store);
            for r in results {
                let (g, s) = r?;
                acc.add_scaled(&g, 1.0 / batch.len() as f64);
                sums.e2e += s.report.e2e;
                sums.joint_reg += s.report.joint_reg;
                sums.joint_cls += s.report.joint_cls;
                sums.grpo += s.report.grpo;
                sums.total += s.report.total;
                sums.ego_min_ade += s.ego_min_ade;
                sums.interaction_size_mean += s.interaction_size as f64;
                align.merge(&s.align);
            }
            self.optimizer
                .apply(&mut self.store, &acc, lr, self.config.weight_decay, &frozen)?;
        }
        let n = scenes.len() as f64;
        let m = EpochMetrics {
            epoch: e + 1,
            stage,
            e2e: sums.e2e / n,
            joint_reg: sums.joint_reg / n,
            joint_cls: sums.joint_cls / n,
            grpo: sums.grpo / n,
            total: sums.total / n,
            mean_group_reward: align.mean_reward(),
            collision_trunc_rate: align.collision_rate(),
            ego_min_ade: sums.ego_min_ade / n,
            interaction_size_mean: sums.interaction_size_mean / n,
        };
        if !m.is_finite() || !self.store.all_finite() {
            return Err(Error::NonFinite {
                context: format!("epoch {}", e + 1),
            });
        }
        self.completed += 1;
        self.metrics.push(m);
        Ok(m)
    }

    /// Trains until the schedule is complete or `max_epochs` more epochs have
    /// run. With `checkpoint` set, the state is saved after every epoch, so a
    /// failure leaves the last good checkpoint in place.
    pub fn run(&mut self, scenes: &[PreparedScene], max_epochs: Option<usize>, checkpoint: Option<&Path>) -> Result<()> {
        let mut budget = max_epochs.unwrap_or(usize::MAX);
        while !self.is_finished() && budget > 0 {
            let m = self.train_epoch(scenes)?;
            log::info!(
                "epoch {} stage {} total {:.5} ego_min_ade {:.4} reward {:.4}",
                m.epoch,
                m.stage,
                m.total,
                m.ego_min_ade,
                m.mean_group_reward
            );
            if let Some(p) = checkpoint {
                self.save(p)?;
            }
            budget -= 1;
        }
        Ok(())
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.metrics)
    }

    pub fn write_metrics(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.metrics_csv().as_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            completed: self.completed,
            metrics: self.metrics.clone(),
            adam_step: self.optimizer.step,
        };
        let mut body = vec![];
        let json = serde_json::to_vec(&header).expect("header serialises");
        put_u64(&mut body, json.len() as u64);
        body.extend_from_slice(&json);
        put_u64(&mut body, self.store.len() as u64);
        for (id, p) in self.store.iter() {
            let name = p.name.as_bytes();
            put_u64(&mut body, name.len() as u64);
            body.extend_from_slice(name);
            put_u64(&mut body, p.value.shape().len() as u64);
            for &d in p.value.shape() {
                put_u64(&mut body, d as u64);
            }
            for src in [p.value.data(), &self.optimizer.m[id.0], &self.optimizer.v[id.0]] {
                for x in src {
                    body.extend_from_slice(&x.to_bits().to_le_bytes());
                }
            }
        }
        let mut out = Vec::with_capacity(body.len() + 28);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&body);
        out.extend_from_slice(&fnv1a(&body).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let body = &bytes[12..bytes.len() - 8];
        let sum = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
        if fnv1a(body) != sum {
            return Err(bad("checksum mismatch"));
        }
        let mut r = body;
        let hlen = get_u64(&mut r)? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(take(&mut r, hlen)?).map_err(|e| bad(&format!("header: {e}")))?;
        let mut t = Trainer::new(header.config)?;
        let n = get_u64(&mut r)? as usize;
        if n != t.store.len() {
            return Err(bad(&format!("{n} parameters, model has {}", t.store.len())));
        }
        for id in t.store.ids().collect::<Vec<_>>() {
            let len = get_u64(&mut r)? as usize;
            let name = std::str::from_utf8(take(&mut r, len)?).map_err(|_| bad("parameter name"))?;
            if name != t.store.name(id) {
                return Err(bad(&format!("parameter {name} where {} expected", t.store.name(id))));
            }
            let nd = get_u64(&mut r)? as usize;
            let shape = (0..nd).map(|_| get_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if shape != t.store.get(id).shape() {
                return Err(bad(&format!("shape mismatch for {name}")));
            }
            let count: usize = shape.iter().product();
            let mut read = || -> Result<Vec<f64>> {
                (0..count)
                    .map(|_| get_u64(&mut r).map(f64::from_bits))
                    .collect()
            };
            let value = read()?;
            t.optimizer.m[id.0] = read()?;
            t.optimizer.v[id.0] = read()?;
            *t.store.get_mut(id) = Tensor::new(shape, value)?;
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        t.optimizer.step = header.adam_step;
        t.completed = header.completed;
        t.metrics = header.metrics;
        Ok(t)
    }

    /// Writes the checkpoint through a temporary file and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = vec![];
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: TrainConfig,
    completed: usize,
    metrics: Vec<EpochMetrics>,
    adam_step: u64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn put_u64(out: &mut Vec<u8>, x: u64) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    let (a, b) = r.split_at(n);
    *r = b;
    Ok(a)
}

fn get_u64(r: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(take(r, 8)?.try_into().expect("8 bytes")))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Mean group reward and collision fraction of fresh rollout groups on
/// `scenes`, drawn with a fixed stream so two parameter sets can be compared
/// on identical noise.
pub fn probe_alignment(
    model: &CaadModel,
    store: &ParamStore,
    scenes: &[PreparedScene],
    grpo: &GrpoConfig,
    probe_seed: u64,
) -> Result<AlignStats> {
    let per: Vec<Result<AlignStats>> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let tape = Tape::new();
            let b = Binder::new(&tape, store);
            let out = model.forward(&b, &s.features)?;
            let mut rng = seed::rng(probe_seed, Purpose::Eval, &[i as u64]);
            Ok(align_scene(&out, &s.scene, &s.reward, grpo, &mut rng)?.stats)
        })
        .collect();
    let mut total = AlignStats::default();
    for s in per {
        total.merge(&s?);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn one_param(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.register("p", Tensor::new(vec![1], vec![v]).unwrap());
        s
    }

    fn grad(v: f64) -> ParamGrads {
        ParamGrads {
            grads: vec![Some(vec![v])],
        }
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut s = one_param(0.7);
        let mut opt = AdamW::new(&s);
        opt.apply(&mut s, &grad(0.0), 0.1, 0.0, &HashSet::new()).unwrap();
        assert_eq!(s.get(ParamId(0)).data()[0], 0.7);
    }

    #[test]
    fn decay_only_scales() {
        let mut s = one_param(1.0);
        let mut opt = AdamW::new(&s);
        for k in 1..=3 {
            opt.apply(&mut s, &grad(0.0), 1.0, 0.1, &HashSet::new()).unwrap();
            assert_abs_diff_eq!(s.get(ParamId(0)).data()[0], 0.9f64.powi(k), epsilon = 1e-15);
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut s = one_param(1.0);
        let mut opt = AdamW::new(&s);
        for _ in 0..200 {
            let p = s.get(ParamId(0)).data()[0];
            opt.apply(&mut s, &grad(2.0 * p), 0.1, 0.0, &HashSet::new()).unwrap();
        }
        assert!(s.get(ParamId(0)).data()[0].abs() < 1e-3);
    }

    #[test]
    fn frozen_params_untouched() {
        let mut s = one_param(1.0);
        let mut opt = AdamW::new(&s);
        let frozen: HashSet<ParamId> = [ParamId(0)].into_iter().collect();
        opt.apply(&mut s, &grad(5.0), 0.1, 0.1, &frozen).unwrap();
        assert_eq!(s.get(ParamId(0)).data()[0], 1.0);
        assert_eq!(opt.m[0][0], 0.0);
    }

    #[test]
    fn stage_schedule() {
        let c = TrainConfig {
            epochs: [1, 2, 1],
            ..TrainConfig::default()
        };
        let stages: Vec<usize> = (0..4).map(|e| c.stage_of(e)).collect();
        assert_eq!(stages, vec![1, 2, 2, 3]);
    }

    #[test]
    fn config_toml_round_trip() {
        let c = TrainConfig {
            seed: 9,
            epochs: [0, 3, 2],
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = TrainConfig::from_toml("seed = 5\nbatch_size = 4\n").unwrap();
        assert_eq!(partial.seed, 5);
        assert_eq!(partial.batch_size, 4);
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        assert!(TrainConfig::from_toml("learning_rates = [0.0, 1e-3, 1e-4]").is_err());
    }
}
