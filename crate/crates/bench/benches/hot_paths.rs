use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use jointdrive::geometry::rect_overlap;
use jointdrive::grpo::{align_scene, GrpoConfig};
use jointdrive::numerics::{Binder, Tape};
use jointdrive::scene::{generate_scene, ScenarioTag};
use jointdrive::trainer::{scene_gradients, TrainConfig};
use jointdrive::{Footprint, Pose2};
use jointdrive_bench::{model, prepared};

fn model_passes(c: &mut Criterion) {
    let scenes = prepared(5);
    let (joint, store) = model(true);
    let (base, base_store) = model(false);
    let cfg = TrainConfig::default();
    c.bench_function("forward_joint", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let bind = Binder::new(&tape, &store);
            black_box(joint.forward(&bind, &scenes[0].features).unwrap().ego_tp.x.to_vec());
        })
    });
    c.bench_function("scene_gradients_stage2_joint", |b| {
        b.iter(|| black_box(scene_gradients(&joint, &store, &scenes[1], 2, &cfg, 0).unwrap()))
    });
    c.bench_function("scene_gradients_stage2_base", |b| {
        b.iter(|| black_box(scene_gradients(&base, &base_store, &scenes[1], 2, &cfg, 0).unwrap()))
    });
    c.bench_function("align_scene_g8", |b| {
        let grpo = GrpoConfig::default();
        b.iter(|| {
            let tape = Tape::new();
            let bind = Binder::new(&tape, &store);
            let out = joint.forward(&bind, &scenes[2].features).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            black_box(align_scene(&out, &scenes[2].scene, &scenes[2].reward, &grpo, &mut rng).unwrap().stats)
        })
    });
}

fn scoring(c: &mut Criterion) {
    let scenes = prepared(5);
    let gt = scenes[3].targets.ego_tp.clone();
    c.bench_function("reward_score", |b| b.iter(|| black_box(scenes[3].reward.score(&gt).unwrap())));
    let fa = Footprint::new(4.5, 1.9).unwrap();
    let (p, q) = (Pose2::new(0.0, 0.0, 0.3), Pose2::new(3.0, 1.0, -0.4));
    c.bench_function("rect_overlap", |b| b.iter(|| black_box(rect_overlap(&p, &fa, black_box(&q), &fa))));
    c.bench_function("generate_scene", |b| {
        let mut s = 0u64;
        b.iter(|| {
            s += 1;
            black_box(generate_scene(s, ScenarioTag::Crossing).unwrap())
        })
    });
}

criterion_group!(benches, model_passes, scoring);
criterion_main!(benches);
