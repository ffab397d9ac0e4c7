//! The six-model component grid and its closed-loop comparison.
//!
//! | model | joint branch | ego cue  | assignment | alignment |
//! |-------|--------------|----------|------------|-----------|
//! | base  | no           | -        | -          | no        |
//! | A     | no           | -        | -          | yes       |
//! | B     | yes          | temporal | ego        | no        |
//! | C     | yes          | spatial  | all actors | no        |
//! | D     | yes          | spatial  | ego        | no        |
//! | E     | yes          | spatial  | ego        | yes       |
//!
//! Runs share work where the schedules coincide: A continues base, B, C and
//! D fork from one joint stage-1 run, and E continues D.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::assignment::{AssignmentStrategy, EgoCue};
use crate::model::{ModelPolicy, PlanSource};
use crate::scene::{generate_set, GeneratorConfig, ScenarioTag, Scene};
use crate::seed::{self, Purpose};
use crate::simulator::{evaluate, Aggregate, DEFAULT_HORIZON};
use crate::trainer::{prepare_scenes, EpochMetrics, TrainConfig, Trainer};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    Base,
    A,
    B,
    C,
    D,
    E,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Variant::Base, Variant::A, Variant::B, Variant::C, Variant::D, Variant::E];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::A => "A",
            Variant::B => "B",
            Variant::C => "C",
            Variant::D => "D",
            Variant::E => "E",
        }
    }

    pub fn joint(self) -> bool {
        !matches!(self, Variant::Base | Variant::A)
    }

    pub fn aligned(self) -> bool {
        matches!(self, Variant::A | Variant::E)
    }

    /// `base` with the variant's component toggles applied.
    pub fn config(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        c.model.joint = self.joint();
        if !self.aligned() {
            c.epochs[2] = 0;
        }
        c.ego_cue = if self == Variant::B { EgoCue::Temporal } else { EgoCue::Spatial };
        c.assignment = if self == Variant::C {
            AssignmentStrategy::AllActor
        } else {
            AssignmentStrategy::EgoCentric
        };
        c
    }

    pub fn plan_source(self) -> PlanSource {
        if self.joint() {
            PlanSource::Joint
        } else {
            PlanSource::Marginal
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown model variant {s:?} (expected base, A, B, C, D or E)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Training seeds; every variant is trained once per seed.
    pub seeds: Vec<u64>,
    pub data_seed: u64,
    pub train_count: usize,
    pub test_count: usize,
    pub horizon: usize,
    /// Schedule and hyper-parameters shared by all variants.
    pub train: TrainConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            data_seed: 2024,
            train_count: 400,
            test_count: 100,
            horizon: DEFAULT_HORIZON,
            train: TrainConfig::default(),
        }
    }
}

impl AblationConfig {
    /// Disjoint training and held-out scene sets.
    pub fn datasets(&self) -> Result<(Vec<Scene>, Vec<Scene>)> {
        let gen = |purpose: u64, count: usize| {
            generate_set(&GeneratorConfig {
                seed: seed::derive(self.data_seed, Purpose::Generate, &[purpose]),
                count,
                tags: ScenarioTag::ALL.to_vec(),
            })
        };
        Ok((gen(0, self.train_count)?, gen(1, self.test_count)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRun {
    pub variant: Variant,
    pub seed: u64,
    pub eval: Aggregate,
    pub per_tag: BTreeMap<String, Aggregate>,
    pub metrics: Vec<EpochMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<VariantRun>,
}

impl AblationReport {
    pub fn success_rates(&self, v: Variant) -> Vec<f64> {
        self.runs.iter().filter(|r| r.variant == v).map(|r| r.eval.success_rate).collect()
    }

    /// Median success rate over seeds, `None` when the variant was not run.
    pub fn median_success(&self, v: Variant) -> Option<f64> {
        median(&self.success_rates(v))
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("variant,seed,success_rate,driving_score,collision_rate,off_road_rate,mean_progress\n");
        for r in &self.runs {
            let e = &r.eval;
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.variant, r.seed, e.success_rate, e.driving_score, e.collision_rate, e.off_road_rate, e.mean_progress
            ));
        }
        s
    }
}

/// Median with the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn record(t: &Trainer, v: Variant, seed: u64, test: &[Scene], horizon: usize) -> Result<VariantRun> {
    let policy = ModelPolicy {
        model: &t.model,
        params: &t.store,
        source: v.plan_source(),
    };
    let report = evaluate(test, &policy, horizon)?;
    log::info!("model {v} seed {seed}: success {:.3}", report.overall.success_rate);
    Ok(VariantRun {
        variant: v,
        seed,
        eval: report.overall,
        per_tag: report.per_tag,
        metrics: t.metrics.clone(),
    })
}

/// Continues `t` under variant `v`'s configuration to the end of its schedule.
fn advance(t: &mut Trainer, v: Variant, base: &TrainConfig, train: &[Scene]) -> Result<()> {
    let cfg = v.config(base);
    let prepared = prepare_scenes(train, cfg.ego_cue)?;
    t.reconfigure(cfg)?;
    t.run(&prepared, None, None)
}

/// Trains and evaluates `variants` for every seed of `cfg`.
pub fn run_ablation(cfg: &AblationConfig, variants: &[Variant]) -> Result<AblationReport> {
    run_ablation_with(cfg, variants, |_, _, _| Ok(()))
}

/// [`run_ablation`] that hands every trained model to `observe` right after
/// its evaluation, before any later stage continues from it.
pub fn run_ablation_with(
    cfg: &AblationConfig,
    variants: &[Variant],
    mut observe: impl FnMut(Variant, u64, &Trainer) -> Result<()>,
) -> Result<AblationReport> {
    if variants.is_empty() {
        return Err(Error::config("no variants requested"));
    }
    let (train, test) = cfg.datasets()?;
    let want = |v: Variant| variants.contains(&v);
    let mut runs = vec![];
    for &s in &cfg.seeds {
        let base = TrainConfig { seed: s, ..cfg.train.clone() };

        if want(Variant::Base) || want(Variant::A) {
            let mut t = Trainer::new(Variant::Base.config(&base))?;
            advance(&mut t, Variant::Base, &base, &train)?;
            if want(Variant::Base) {
                runs.push(record(&t, Variant::Base, s, &test, cfg.horizon)?);
                observe(Variant::Base, s, &t)?;
            }
            if want(Variant::A) {
                advance(&mut t, Variant::A, &base, &train)?;
                runs.push(record(&t, Variant::A, s, &test, cfg.horizon)?);
                observe(Variant::A, s, &t)?;
            }
        }

        let joint: Vec<Variant> = [Variant::B, Variant::C, Variant::D, Variant::E]
            .into_iter()
            .filter(|&v| want(v))
            .collect();
        if joint.is_empty() {
            continue;
        }
        // Stage 1 does not depend on the cue or the assignment rule.
        let mut stage1_cfg = Variant::D.config(&base);
        stage1_cfg.epochs = [base.epochs[0], 0, 0];
        let mut shared = Trainer::new(stage1_cfg.clone())?;
        shared.run(&prepare_scenes(&train, stage1_cfg.ego_cue)?, None, None)?;
        for v in [Variant::B, Variant::C] {
            if want(v) {
                let mut t = shared.clone();
                advance(&mut t, v, &base, &train)?;
                runs.push(record(&t, v, s, &test, cfg.horizon)?);
                observe(v, s, &t)?;
            }
        }
        if want(Variant::D) || want(Variant::E) {
            let mut t = shared;
            advance(&mut t, Variant::D, &base, &train)?;
            if want(Variant::D) {
                runs.push(record(&t, Variant::D, s, &test, cfg.horizon)?);
                observe(Variant::D, s, &t)?;
            }
            if want(Variant::E) {
                advance(&mut t, Variant::E, &base, &train)?;
                runs.push(record(&t, Variant::E, s, &test, cfg.horizon)?);
                observe(Variant::E, s, &t)?;
            }
        }
    }
    Ok(AblationReport { runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_toggles() {
        let b = TrainConfig::default();
        let base = Variant::Base.config(&b);
        assert!(!base.model.joint);
        assert_eq!(base.epochs[2], 0);
        assert_eq!(Variant::A.config(&b).epochs, b.epochs);
        assert_eq!(Variant::B.config(&b).ego_cue, EgoCue::Temporal);
        assert_eq!(Variant::C.config(&b).assignment, AssignmentStrategy::AllActor);
        let d = Variant::D.config(&b);
        let e = Variant::E.config(&b);
        assert_eq!((d.ego_cue, d.assignment), (EgoCue::Spatial, AssignmentStrategy::EgoCentric));
        assert_eq!(TrainConfig { epochs: d.epochs, ..e.clone() }, d);
        assert_eq!("e".parse::<Variant>().unwrap(), Variant::E);
        assert!("F".parse::<Variant>().is_err());
    }

    #[test]
    fn median_values() {
        assert_eq!(median(&[0.3, 0.1, 0.2]), Some(0.2));
        assert_eq!(median(&[0.4, 0.1]), Some(0.25));
        assert_eq!(median(&[]), None);
    }
}
