//! `jointdrive`: scene generation, staged training, policy alignment, reward
//! scoring, closed-loop evaluation, gradient verification and the model
//! ablation grid.
//!
//! Exit status is 0 on success, 1 on a usage error and 2 on a runtime error.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use jointdrive::ablation::{run_ablation, AblationConfig, Variant};
use jointdrive::geometry::Point2;
use jointdrive::model::{ModelPolicy, PlanSource};
use jointdrive::reward::RewardContext;
use jointdrive::scene::{ego_frame_transform, generate_set, load_scenes, save_scenes, GeneratorConfig, ScenarioTag};
use jointdrive::simulator::{evaluate, DEFAULT_HORIZON};
use jointdrive::trainer::{prepare_scenes, write_atomic, AdamW, TrainConfig, Trainer};
use jointdrive::verify::{fixture_model, fixture_scene, gradient_check, FD_STEP, FD_TOLERANCE};

#[derive(Parser, Debug)]
#[command(name = "jointdrive", version, about = "Joint scene-mode driving policy: data, training and evaluation")]
struct Cli {
    /// Base directory for relative input and output paths.
    #[arg(long, global = true, env = "CAAD_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Worker threads for scoring and evaluation (default: all cores).
    #[arg(long, global = true, env = "CAAD_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a scene set as JSON lines.
    Gen(GenArgs),
    /// Run the full three-stage schedule of a config file.
    Train(TrainArgs),
    /// Run only the alignment stage starting from a checkpoint.
    Align(AlignArgs),
    /// Score ego-frame rollouts against a scene.
    Score(ScoreArgs),
    /// Closed-loop evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Finite-difference check of the full objective's gradient.
    Gradcheck(GradcheckArgs),
    /// Train and compare model variants of the component grid.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// Comma-separated scenario tags (default: all).
    #[arg(long, value_delimiter = ',')]
    tags: Vec<ScenarioTag>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML training config; `train_scenes` names the scene file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for checkpoint.bin, metrics.csv and config.toml.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint instead of a fresh initialisation.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many epochs of this invocation.
    #[arg(long)]
    max_epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct AlignArgs {
    /// TOML config; its stage-3 epochs, learning rate and alignment settings apply.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// Scene file (JSON lines).
    #[arg(long)]
    scene: PathBuf,
    /// Index of the scene inside the file.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// JSON lines of `[[x, y], ...]` ego-frame rollouts; defaults to the
    /// ground-truth ego future.
    #[arg(long)]
    rollouts: Option<PathBuf>,
    /// Output JSON lines, one breakdown per rollout (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scenes: PathBuf,
    /// Output JSON report.
    #[arg(long)]
    out: PathBuf,
    /// Plan from the best joint mode or from the marginal plan head.
    #[arg(long, value_parser = ["joint", "marginal"], default_value = "joint")]
    source: String,
    #[arg(long, default_value_t = DEFAULT_HORIZON)]
    horizon: usize,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = FD_STEP)]
    step: f64,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Comma-separated variants among base, A, B, C, D, E (default: all).
    #[arg(long, value_delimiter = ',')]
    grid: Vec<Variant>,
    /// Output directory for summary.csv and report.json.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 400)]
    train_count: usize,
    #[arg(long, default_value_t = 100)]
    test_count: usize,
    #[arg(long, default_value_t = 2024)]
    data_seed: u64,
    /// TOML config providing the shared schedule and hyper-parameters.
    #[arg(long)]
    config: Option<PathBuf>,
}

struct Ctx {
    data_dir: Option<PathBuf>,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        match &self.data_dir {
            Some(d) if p.is_relative() => d.join(p),
            _ => p.to_path_buf(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let ctx = Ctx { data_dir: cli.data_dir };
    match run(&ctx, cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(ctx: &Ctx, command: Command) -> Result<ExitCode> {
    match command {
        Command::Gen(a) => gen(ctx, a)?,
        Command::Train(a) => train(ctx, a)?,
        Command::Align(a) => align(ctx, a)?,
        Command::Score(a) => score(ctx, a)?,
        Command::Eval(a) => eval(ctx, a)?,
        Command::Gradcheck(a) => return gradcheck(a),
        Command::Ablate(a) => ablate(ctx, a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn gen(ctx: &Ctx, a: GenArgs) -> Result<()> {
    let tags = if a.tags.is_empty() { ScenarioTag::ALL.to_vec() } else { a.tags };
    let scenes = generate_set(&GeneratorConfig {
        seed: a.seed,
        count: a.count,
        tags,
    })?;
    let out = ctx.path(&a.out);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    save_scenes(&scenes, &out).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} scenes to {}", scenes.len(), out.display());
    Ok(())
}

fn load_config(ctx: &Ctx, path: &Path) -> Result<TrainConfig> {
    let p = ctx.path(path);
    TrainConfig::load(&p).with_context(|| format!("reading config {}", p.display()))
}

fn train_scenes(ctx: &Ctx, config: &TrainConfig) -> Result<Vec<jointdrive::Scene>> {
    let Some(p) = &config.train_scenes else {
        bail!("config has no train_scenes file");
    };
    let p = ctx.path(p);
    load_scenes(&p).with_context(|| format!("reading scenes {}", p.display()))
}

fn finish_run(t: &Trainer, out: &Path) -> Result<()> {
    t.save(&out.join("checkpoint.bin"))?;
    t.write_metrics(&out.join("metrics.csv"))?;
    write_atomic(&out.join("config.toml"), t.config.to_toml().as_bytes())?;
    if let Some(m) = t.metrics.last() {
        println!("epoch {} stage {}: total {:.6} ego minADE {:.4}", m.epoch, m.stage, m.total, m.ego_min_ade);
    }
    Ok(())
}

fn train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let config = load_config(ctx, &a.config)?;
    let scenes = train_scenes(ctx, &config)?;
    let out = ctx.path(&a.out);
    ensure_dir(&out)?;
    let mut t = match &a.resume {
        Some(p) => {
            let mut t = Trainer::load(&ctx.path(p)).context("loading checkpoint")?;
            t.reconfigure(config)?;
            t
        }
        None => Trainer::new(config)?,
    };
    let prepared = prepare_scenes(&scenes, t.config.ego_cue)?;
    let ckpt = out.join("checkpoint.bin");
    let result = t.run(&prepared, a.max_epochs, Some(&ckpt));
    // metrics of the completed epochs are kept even when a later epoch fails
    t.write_metrics(&out.join("metrics.csv"))?;
    result?;
    finish_run(&t, &out)
}

fn align(ctx: &Ctx, a: AlignArgs) -> Result<()> {
    let mut config = load_config(ctx, &a.config)?;
    config.epochs = [0, 0, config.epochs[2]];
    let scenes = train_scenes(ctx, &config)?;
    let mut t = Trainer::load(&ctx.path(&a.checkpoint)).context("loading checkpoint")?;
    t.reconfigure(config)?;
    t.completed = 0;
    t.metrics.clear();
    t.optimizer = AdamW::new(&t.store);
    let out = ctx.path(&a.out);
    ensure_dir(&out)?;
    let prepared = prepare_scenes(&scenes, t.config.ego_cue)?;
    t.run(&prepared, None, Some(&out.join("checkpoint.bin")))?;
    finish_run(&t, &out)
}

fn read_rollouts(path: &Path) -> Result<Vec<Vec<Point2>>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = vec![];
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pts: Vec<[f64; 2]> =
            serde_json::from_str(&line).with_context(|| format!("rollout on line {}", i + 1))?;
        out.push(pts.into_iter().map(|[x, y]| Point2::new(x, y)).collect());
    }
    Ok(out)
}

fn score(ctx: &Ctx, a: ScoreArgs) -> Result<()> {
    let path = ctx.path(&a.scene);
    let scenes = load_scenes(&path).with_context(|| format!("reading scenes {}", path.display()))?;
    let Some(scene) = scenes.get(a.index) else {
        bail!("scene index {} out of range ({} scenes)", a.index, scenes.len());
    };
    let rollouts = match &a.rollouts {
        Some(p) => read_rollouts(&ctx.path(p))?,
        None => vec![ego_frame_transform(scene).ego.future_points()],
    };
    let rc = RewardContext::new(scene)?;
    let mut text = String::new();
    for (i, r) in rollouts.iter().enumerate() {
        let b = rc.score(r).with_context(|| format!("rollout {i}"))?;
        text.push_str(&serde_json::to_string(&b)?);
        text.push('\n');
    }
    match &a.out {
        Some(p) => write_atomic(&ctx.path(p), text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let t = Trainer::load(&ctx.path(&a.checkpoint)).context("loading checkpoint")?;
    let path = ctx.path(&a.scenes);
    let scenes = load_scenes(&path).with_context(|| format!("reading scenes {}", path.display()))?;
    let source = if a.source == "marginal" { PlanSource::Marginal } else { PlanSource::Joint };
    let policy = ModelPolicy {
        model: &t.model,
        params: &t.store,
        source,
    };
    let report = evaluate(&scenes, &policy, a.horizon)?;
    write_atomic(&ctx.path(&a.out), serde_json::to_string_pretty(&report)?.as_bytes())?;
    let o = &report.overall;
    println!(
        "episodes {} success {:.3} driving score {:.3} collisions {:.3} off-road {:.3}",
        o.episodes, o.success_rate, o.driving_score, o.collision_rate, o.off_road_rate
    );
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let scene = fixture_scene(a.seed)?;
    let report = gradient_check(fixture_model(), &scene, a.seed, a.step)?;
    println!("checked {} parameters, max relative error {:.3e}", report.checked, report.max_rel_error);
    if let Some((name, i, an, nu)) = &report.worst {
        println!("worst: {name}[{i}] analytic {an:.6e} numeric {nu:.6e}");
    }
    Ok(if report.passes(FD_TOLERANCE) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn ablate(ctx: &Ctx, a: AblateArgs) -> Result<()> {
    let train = match &a.config {
        Some(p) => load_config(ctx, p)?,
        None => TrainConfig::default(),
    };
    let cfg = AblationConfig {
        seeds: a.seeds,
        data_seed: a.data_seed,
        train_count: a.train_count,
        test_count: a.test_count,
        train,
        ..AblationConfig::default()
    };
    let grid = if a.grid.is_empty() { Variant::ALL.to_vec() } else { a.grid };
    let report = run_ablation(&cfg, &grid)?;
    let out = ctx.path(&a.out);
    ensure_dir(&out)?;
    write_atomic(&out.join("summary.csv"), report.summary_csv().as_bytes())?;
    write_atomic(&out.join("report.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    for v in grid {
        if let Some(m) = report.median_success(v) {
            println!("{v}: median success {m:.3}");
        }
    }
    Ok(())
}
