//! Command-line driver. Every stage reads the shared config document and
//! writes into `--out`; later stages pick up earlier stages' files.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use tracing::info;

use dlm_remask::artifacts::{generate_samples, read_samples, write_samples, ArtifactPolicy};
use dlm_remask::bench::{
    aggregate, artifact_verdict, eval_prompts, fidelity_verdict, harvest_rollouts, pareto_report, random_verdict,
    read_rows, rollout_auc, run_experiment, write_rows, AblationSummary, Arm, ResultRow, RunOutput,
};
use dlm_remask::checkpoint::{load_denoiser, load_head, Checkpoint};
use dlm_remask::config::{Config, HeadKind};
use dlm_remask::decode::{write_trace, Strategy};
use dlm_remask::denoiser::{train_denoiser, Denoiser, TinyDenoiser};
use dlm_remask::head::{train_head_decoupled, train_joint_baseline, BayesHead, CorrectionHead, LearnedHead};
use dlm_remask::rng::Seed;
use dlm_remask::tasks::{generate_dataset, read_dataset, write_dataset, Instance, TaskSpec};
use dlm_remask::{Error, Result};

#[derive(Parser)]
#[command(name = "dlm-remask", version, about = "Masked diffusion decoding with learned self-correction")]
struct Cli {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replace every seed in the config with ones derived from this value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (defaults to one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write training and evaluation datasets.
    GenData,
    /// Train the tiny denoiser on the training set.
    TrainDenoiser,
    /// Build labeled samples for head training with the configured policy.
    GenArtifacts,
    /// Train a correction head on a frozen denoiser.
    TrainHead,
    /// Train denoiser and head together, one model per configured weight.
    TrainJoint,
    /// Decode the evaluation set with the `decode` section as given.
    Decode,
    /// Sweep strategies and tokens-per-step; write results.csv and pareto.json.
    Bench,
    /// Recompute pareto.json from an existing results.csv.
    Report,
    /// Run the directional ablations and write ablations.json.
    Ablate,
}

struct Ctx {
    cfg: Config,
    spec: TaskSpec,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn denoiser_path(&self) -> PathBuf {
        self.cfg.denoiser.checkpoint.clone().unwrap_or_else(|| self.path("denoiser.ckpt.json"))
    }

    fn head_path(&self, policy: &ArtifactPolicy) -> PathBuf {
        self.cfg.head.checkpoint.clone().unwrap_or_else(|| self.path(&format!("head-{}.ckpt.json", policy.tag())))
    }

    fn artifacts_path(&self, policy: &ArtifactPolicy) -> PathBuf {
        self.path(&format!("artifacts/{}.jsonl", policy.tag()))
    }

    fn joint_path(&self, gamma: f64) -> PathBuf {
        self.path(&format!("joint-g{gamma}.ckpt.json"))
    }

    fn train_data(&self) -> Result<Vec<Instance>> {
        let p = self.path("data/train.jsonl");
        require(&[&p])?;
        read_dataset(BufReader::new(File::open(p)?))
    }

    fn denoiser(&self) -> Result<TinyDenoiser> {
        let p = self.denoiser_path();
        require(&[&p])?;
        let den = load_denoiser(&p)?;
        if den.vocab() != self.spec.vocab {
            return Err(Error::VocabMismatch(format!("checkpoint {} does not match task {}", p.display(), self.spec.name.as_str())));
        }
        Ok(den)
    }

    fn learned_head(&self, den: &TinyDenoiser, policy: &ArtifactPolicy) -> Result<LearnedHead> {
        let p = self.head_path(policy);
        require(&[&p])?;
        load_head(&p, den.vocab(), den.feature_dim())
    }

    fn fresh_model(&self) -> Result<TinyDenoiser> {
        let arch = self.cfg.denoiser.arch_for(&self.spec);
        TinyDenoiser::new(arch, self.spec.vocab, self.cfg.denoiser.train.seed.derive_str("model"))
    }
}

fn require(paths: &[&Path]) -> Result<()> {
    let missing: Vec<String> = paths.iter().filter(|p| !p.exists()).map(|p| p.display().to_string()).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite(missing.join(", ")))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_outputs(ctx: &Ctx, csv_name: &str, run: &RunOutput) -> Result<()> {
    let mut w = create(&ctx.path(csv_name))?;
    write_rows(&mut w, &run.rows)?;
    w.flush()?;
    for (stem, trace) in &run.traces {
        let mut w = create(&ctx.path(&format!("traces/{stem}.jsonl")))?;
        write_trace(&mut w, trace)?;
        w.flush()?;
    }
    Ok(())
}

fn print_rows(rows: &[ResultRow]) {
    for r in rows {
        println!("{:14} {:16} k={} seed={} acc={:.4} iter_avg={:.3}", r.task, r.strategy, r.tokens_per_step, r.seed, r.accuracy, r.iter_avg);
    }
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    let d = &ctx.cfg.denoiser;
    let train = generate_dataset(&ctx.spec, d.n_train, d.data_seed);
    let mut w = create(&ctx.path("data/train.jsonl"))?;
    write_dataset(&mut w, &train)?;
    w.flush()?;
    let seed = ctx.cfg.bench.seeds[0];
    let eval = generate_dataset(&ctx.spec, ctx.cfg.bench.n_eval, Seed(seed).derive_str("eval"));
    let mut w = create(&ctx.path("data/eval.jsonl"))?;
    write_dataset(&mut w, &eval)?;
    w.flush()?;
    info!(train = train.len(), eval = eval.len(), "datasets written");
    Ok(())
}

fn train_den(ctx: &Ctx) -> Result<()> {
    let data = ctx.train_data()?;
    let mut model = ctx.fresh_model()?;
    let report = train_denoiser(&mut model, &data, &ctx.cfg.denoiser.train)?;
    info!(final_loss = report.final_loss, clamped = report.clamped, "denoiser trained");
    Checkpoint::denoiser(&model).save(&ctx.denoiser_path())?;
    write_json(&ctx.path("reports/denoiser.json"), &report)
}

fn gen_artifacts(ctx: &Ctx) -> Result<()> {
    let a = &ctx.cfg.artifacts;
    let data = ctx.train_data()?;
    let den = ctx.denoiser()?;
    let (samples, skipped) = generate_samples(&den, &data, a.policy, a.per_instance, a.seed)?;
    info!(samples = samples.len(), skipped, policy = a.policy.tag(), "artifacts written");
    let mut w = create(&ctx.artifacts_path(&a.policy))?;
    write_samples(&mut w, &samples)?;
    w.flush()?;
    Ok(())
}

fn read_artifacts(ctx: &Ctx, policy: &ArtifactPolicy) -> Result<Vec<dlm_remask::artifacts::LabeledSample>> {
    let p = ctx.artifacts_path(policy);
    require(&[&p])?;
    read_samples(BufReader::new(File::open(p)?))
}

fn train_head(ctx: &Ctx) -> Result<()> {
    if ctx.cfg.head.kind == HeadKind::Bayes {
        println!("bayes head needs no training");
        return Ok(());
    }
    let policy = ctx.cfg.artifacts.policy;
    let den = ctx.denoiser()?;
    let samples = read_artifacts(ctx, &policy)?;
    let (head, report) = train_head_decoupled(&den, &samples, &ctx.cfg.head.train)?;
    info!(auc = ?report.holdout_auc, rows = report.train_rows, "head trained");
    Checkpoint::head(&head, den.vocab()).save(&ctx.head_path(&policy))?;
    write_json(&ctx.path(&format!("reports/head-{}.json", policy.tag())), &report)
}

fn train_joint(ctx: &Ctx) -> Result<()> {
    let data = ctx.train_data()?;
    let policy = ctx.cfg.artifacts.policy;
    let samples = read_artifacts(ctx, &policy)?;
    for &gamma in &ctx.cfg.head.joint_gammas {
        let mut model = ctx.fresh_model()?;
        let dim = model.feature_dim();
        let mut head = LearnedHead::new(dim, ctx.cfg.head.train.width_mult * dim, ctx.cfg.head.train.seed);
        let report = train_joint_baseline(&mut model, &mut head, &data, &samples, &ctx.cfg.joint(gamma))?;
        info!(gamma, "joint model trained");
        Checkpoint::denoiser(&model).save(&ctx.joint_path(gamma))?;
        Checkpoint::head(&head, model.vocab()).save(&ctx.path(&format!("joint-g{gamma}-head.ckpt.json")))?;
        write_json(&ctx.path(&format!("reports/joint-g{gamma}.json")), &report)?;
    }
    Ok(())
}

/// Heads are loaded lazily: only strategies that need one touch the disk.
fn head_for(ctx: &Ctx, den: &TinyDenoiser) -> Result<Box<dyn CorrectionHead>> {
    Ok(match ctx.cfg.head.kind {
        HeadKind::Bayes => Box::new(BayesHead::new(ctx.spec.clone())),
        HeadKind::Learned => Box::new(ctx.learned_head(den, &ctx.cfg.artifacts.policy)?),
    })
}

fn decode(ctx: &Ctx) -> Result<()> {
    let den = ctx.denoiser()?;
    let d = ctx.cfg.decode;
    let head = if d.strategy == Strategy::Dsc { Some(head_for(ctx, &den)?) } else { None };
    let arm = match &head {
        Some(h) => Arm { label: d.strategy.as_str().into(), strategy: d.strategy, head: Some(h.as_ref()) },
        None => Arm::plain(d.strategy),
    };
    let bench = dlm_remask::config::BenchSettings { ks: vec![d.k], clip_budget: false, ..ctx.cfg.bench.clone() };
    let run = run_experiment(&ctx.spec, &den, &[arm], &d, &bench)?;
    write_outputs(ctx, "decode.csv", &run)?;
    print_rows(&run.rows);
    Ok(())
}

fn bench(ctx: &Ctx) -> Result<()> {
    let den = ctx.denoiser()?;
    let needs_head = ctx.cfg.bench.strategies.contains(&Strategy::Dsc);
    let head = if needs_head { Some(head_for(ctx, &den)?) } else { None };
    let arms: Vec<Arm<'_>> = ctx
        .cfg
        .bench
        .strategies
        .iter()
        .map(|&s| match (s, &head) {
            (Strategy::Dsc, Some(h)) => Arm { label: s.as_str().into(), strategy: s, head: Some(h.as_ref()) },
            _ => Arm::plain(s),
        })
        .collect();
    let run = run_experiment(&ctx.spec, &den, &arms, &ctx.cfg.decode, &ctx.cfg.bench)?;
    write_outputs(ctx, "results.csv", &run)?;
    let report = pareto_report(&run.rows);
    write_json(&ctx.path("pareto.json"), &report)?;
    print_rows(&run.rows);
    for s in report.dominance.iter().chain(report.cross_overs.iter().map(|c| &c.statement)) {
        println!("{s}");
    }
    Ok(())
}

fn report(ctx: &Ctx) -> Result<()> {
    let p = ctx.path("results.csv");
    require(&[&p])?;
    let rows = read_rows(File::open(p)?)?;
    let report = pareto_report(&rows);
    write_json(&ctx.path("pareto.json"), &report)?;
    for s in report.dominance.iter().chain(report.cross_overs.iter().map(|c| &c.statement)) {
        println!("{s}");
    }
    Ok(())
}

fn no_remask_rows<D: Denoiser>(ctx: &Ctx, den: &D) -> Result<Vec<ResultRow>> {
    Ok(run_experiment(&ctx.spec, den, &[Arm::plain(Strategy::Confidence)], &ctx.cfg.decode, &quiet(ctx))?.rows)
}

fn quiet(ctx: &Ctx) -> dlm_remask::config::BenchSettings {
    dlm_remask::config::BenchSettings { trace_limit: 0, ..ctx.cfg.bench.clone() }
}

fn ablate(ctx: &Ctx) -> Result<()> {
    let lbc = ctx.cfg.artifacts.policy;
    let uniform = match lbc {
        ArtifactPolicy::Lbc { dt } => ArtifactPolicy::Uniform { rate: dt },
        _ => return Err(Error::InvalidConfig("ablate expects an lbc artifact policy".into())),
    };
    let mut needed = vec![ctx.denoiser_path(), ctx.path(&format!("head-{}.ckpt.json", lbc.tag())), ctx.path(&format!("head-{}.ckpt.json", uniform.tag()))];
    needed.push(ctx.artifacts_path(&lbc));
    needed.extend(ctx.cfg.head.joint_gammas.iter().map(|&g| ctx.joint_path(g)));
    require(&needed.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;

    let den = ctx.denoiser()?;
    let head_lbc = load_head(&needed[1], den.vocab(), den.feature_dim())?;
    let head_uni = load_head(&needed[2], den.vocab(), den.feature_dim())?;

    // (a) fidelity
    let before_params = den.params().to_vec();
    let before = no_remask_rows(ctx, &den)?;
    let samples = read_artifacts(ctx, &lbc)?;
    train_head_decoupled(&den, &samples, &ctx.cfg.head.train)?;
    let after = if den.params() == before_params.as_slice() { no_remask_rows(ctx, &den)? } else { Vec::new() };
    let mut joint = Vec::new();
    for &g in &ctx.cfg.head.joint_gammas {
        let m = load_denoiser(&ctx.joint_path(g))?;
        joint.push((g, no_remask_rows(ctx, &m)?));
    }
    let fidelity = fidelity_verdict(&before, &after, &joint);

    // (b) artifacts and (c) random remasking share one sweep.
    let arms = [
        Arm::plain(Strategy::Confidence),
        Arm::with_head("dsc-lbc", &head_lbc),
        Arm::with_head("dsc-uniform", &head_uni),
        Arm::plain(Strategy::RandomRemask),
    ];
    let run = run_experiment(&ctx.spec, &den, &arms, &ctx.cfg.decode, &quiet(ctx))?;
    let points = aggregate(&run.rows);
    let (mut auc_l, mut auc_u) = (Vec::new(), Vec::new());
    for &s in &ctx.cfg.bench.seeds {
        let prompts = eval_prompts(&ctx.spec, ctx.cfg.bench.n_eval, s);
        let k = ctx.cfg.bench.ks.iter().copied().max().unwrap_or(1);
        let cfg = dlm_remask::decode::DecodeConfig { k, ..ctx.cfg.decode };
        let states = harvest_rollouts(&ctx.spec, &den, &prompts, &cfg, Seed(s).derive_str("rollout"))?;
        auc_l.push(rollout_auc(&den, &head_lbc, &states, &ctx.spec));
        auc_u.push(rollout_auc(&den, &head_uni, &states, &ctx.spec));
    }
    let need = (ctx.cfg.bench.seeds.len() * 4).div_ceil(5);
    let artifacts = artifact_verdict(auc_l, auc_u, &points, "dsc-lbc", "dsc-uniform", need);
    let random = random_verdict(&points, "random-remask", "dsc-lbc", 0.01, 0.10);

    let summary = AblationSummary { fidelity: Some(fidelity), artifacts: Some(artifacts), random: Some(random) };
    let mut w = create(&ctx.path("ablation_results.csv"))?;
    write_rows(&mut w, &run.rows)?;
    w.flush()?;
    write_json(&ctx.path("ablations.json"), &summary)?;
    for (name, pass) in [
        ("fidelity", summary.fidelity.as_ref().is_some_and(|r| r.pass)),
        ("artifacts", summary.artifacts.as_ref().is_some_and(|r| r.pass)),
        ("random-remask", summary.random.as_ref().is_some_and(|r| r.pass)),
    ] {
        println!("{name}: {}", if pass { "pass" } else { "fail" });
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::InvalidConfig(e.to_string()))?;
    }
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.reseed(s);
    }
    cfg.validate()?;
    let spec = TaskSpec::from_config(&cfg.task)?;
    let ctx = Ctx { cfg, spec, out: cli.out };
    fs::create_dir_all(&ctx.out)?;
    match cli.cmd {
        Cmd::GenData => gen_data(&ctx),
        Cmd::TrainDenoiser => train_den(&ctx),
        Cmd::GenArtifacts => gen_artifacts(&ctx),
        Cmd::TrainHead => train_head(&ctx),
        Cmd::TrainJoint => train_joint(&ctx),
        Cmd::Decode => decode(&ctx),
        Cmd::Bench => bench(&ctx),
        Cmd::Report => report(&ctx),
        Cmd::Ablate => ablate(&ctx),
    }
}

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .without_time()
        .init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
