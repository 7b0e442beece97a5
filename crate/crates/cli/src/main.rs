//! `hjc`: train, fine-tune, certify, and deploy safety-filter value
//! functions from the command line.
//!
//! Every command reads an optional JSON config (flags win over config
//! values), writes its outputs into a fresh run directory named
//! `<env>-<command>-<seed>-<timestamp>` under `--out`, and updates a `latest`
//! pointer file. Exit codes: 0 success, 1 config/contract error,
//! 2 verification returned Falsified, 3 verification returned Unknown.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hjc_core::envs::EnvName;
use hjc_core::filter::{rollout, uniform_nominal, write_trajectory_csv, FilterPolicy};
use hjc_core::net::{Critic, ModelFile, PolicyNetwork};
use hjc_core::pipeline::{
    default_slice, emit_safe_set_grid, eval_safe_control_size, eval_safe_set_size, run_pipeline,
    write_run_dir, PipelineConfig,
};
use hjc_core::training::{
    collect_transitions, finetune_round, pretrain, train_policy, CounterexampleSet, REPAIR_MARGIN,
};
use hjc_core::verifier::{
    attack, certify, export_miqcp, value_iteration_oracle, ConditionKind, Verdict, VerdictStatus,
    VerifyTask,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "hjc", version, about = "Safety-filter training and certification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON pipeline config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Environment name (double_integrator, double_integrator_2d, unicycle,
    /// robot_arm).
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (fallback: HJC_THREADS, then all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Base directory for run outputs.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Branch-and-bound node budget.
    #[arg(long)]
    max_boxes: Option<usize>,
    /// Fine-tune/verify round limits.
    #[arg(long)]
    rounds: Option<usize>,
    /// Grid resolution for metrics and grids.
    #[arg(long)]
    res: Option<usize>,
}

#[derive(Args, Clone)]
struct ArtifactArg {
    /// Run directory containing qnet.json and policy.json.
    #[arg(long)]
    artifact: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1: collect transitions and pretrain critic and policy.
    Pretrain(Common),
    /// Stage 2: adversarial fine-tuning of an existing artifact.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        artifact: ArtifactArg,
    },
    /// Stage 3: refit the policy against an existing critic.
    TrainPolicy {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        artifact: ArtifactArg,
    },
    /// Gradient falsification of both conditions; writes counterexamples.
    Attack {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        artifact: ArtifactArg,
    },
    /// Branch-and-bound certification of both conditions.
    Certify {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        artifact: ArtifactArg,
    },
    /// Write the falsification query as an LP-format mixed-integer program.
    ExportMiqcp {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        artifact: ArtifactArg,
        /// Condition to export: constraint or invariance.
        #[arg(long, default_value = "constraint")]
        kind: String,
    },
    /// The full four-stage loop.
    Pipeline(Common),
    /// Safe-set metrics and a plotting grid for an artifact.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        artifact: ArtifactArg,
    },
    /// Closed-loop rollouts with the safety filter.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        artifact: ArtifactArg,
        #[arg(long, default_value_t = 100)]
        rollouts: usize,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        /// Run the nominal stream unfiltered (contrast run).
        #[arg(long)]
        unfiltered: bool,
    },
    /// Grid value-iteration reference for low-dimensional environments.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 11)]
        u_res: usize,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run() -> Result<u8> {
    let cli = Cli::parse();
    match cli.command {
        Command::Pretrain(c) => cmd_pretrain(&c),
        Command::Finetune { common, artifact } => cmd_finetune(&common, &artifact),
        Command::TrainPolicy { common, artifact } => cmd_train_policy(&common, &artifact),
        Command::Attack { common, artifact } => cmd_attack(&common, &artifact),
        Command::Certify { common, artifact } => cmd_certify(&common, &artifact),
        Command::ExportMiqcp { common, artifact, kind } => cmd_export(&common, &artifact, &kind),
        Command::Pipeline(c) => cmd_pipeline(&c),
        Command::Eval { common, artifact } => cmd_eval(&common, &artifact),
        Command::Rollout { common, artifact, rollouts, steps, unfiltered } => {
            cmd_rollout(&common, &artifact, rollouts, steps, unfiltered)
        }
        Command::Oracle { common, u_res } => cmd_oracle(&common, u_res),
    }
}

fn init_threads(c: &Common) {
    let n = c.threads.or_else(|| {
        std::env::var("HJC_THREADS").ok().and_then(|v| v.parse().ok())
    });
    if let Some(n) = n {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn resolve_config(c: &Common) -> Result<PipelineConfig> {
    let env = match &c.env {
        Some(name) => EnvName::parse(name).context("unknown environment")?,
        None => EnvName::DoubleIntegrator,
    };
    let mut cfg = match &c.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str::<PipelineConfig>(&text).context("parsing config")?
        }
        None => PipelineConfig::reference(env, c.seed.unwrap_or(0)),
    };
    if let Some(name) = &c.env {
        let env = EnvName::parse(name).context("unknown environment")?;
        cfg.env = hjc_core::EnvSpec::by_name(env);
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
        cfg.bnb.seed = seed;
    }
    if let Some(mb) = c.max_boxes {
        cfg.bnb.max_boxes = mb;
    }
    if let Some(r) = c.rounds {
        cfg.max_finetune_rounds = r;
        cfg.max_verify_rounds = r;
    }
    if let Some(res) = c.res {
        cfg.grid_metric_res = res;
    }
    cfg.validate()?;
    init_threads(c);
    Ok(cfg)
}

fn make_run_dir(c: &Common, cfg: &PipelineConfig, command: &str) -> Result<PathBuf> {
    let ts = SystemTime::now().duration_since(UNIX_EPOCH)?.as_secs();
    let name = format!("{}-{}-{}-{}", cfg.env.name.as_str(), command, cfg.seed, ts);
    let dir = c.out.join(&name);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(c.out.join("latest"), &name)?;
    Ok(dir)
}

fn load_artifact(dir: &Path) -> Result<(Critic, PolicyNetwork)> {
    let critic = ModelFile::load(&dir.join("qnet.json"))?
        .into_critic()
        .context("loading qnet.json")?;
    let policy = ModelFile::load(&dir.join("policy.json"))?
        .into_policy()
        .context("loading policy.json")?;
    Ok((critic, policy))
}

fn save_artifact(dir: &Path, critic: &Critic, policy: &PolicyNetwork) -> Result<()> {
    ModelFile::from_critic(critic).save(&dir.join("qnet.json"))?;
    ModelFile::from_policy(policy).save(&dir.join("policy.json"))?;
    Ok(())
}

fn write_loss_csv(dir: &Path, name: &str, curve: &[f64]) -> Result<()> {
    let mut csv = String::from("step,loss\n");
    for (i, l) in curve.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(dir.join(name), csv)?;
    Ok(())
}

fn cmd_pretrain(c: &Common) -> Result<u8> {
    let cfg = resolve_config(c)?;
    let dir = make_run_dir(c, &cfg, "pretrain")?;
    let env = &cfg.env;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut critic = if cfg.multiplicative {
        Critic::new_multiplicative(env.state_dim, env.control_dim, &mut rng)
    } else {
        Critic::new_dense(env.state_dim, env.control_dim, &mut rng)
    };
    let mut policy = PolicyNetwork::new(env.state_dim, env.control_box.clone(), &mut rng);
    let mut curve = Vec::new();
    for round in 0..cfg.pretrain_rounds.max(1) {
        let behavior = if round == 0 { None } else { Some(&policy) };
        let data = collect_transitions(env, behavior, cfg.n_transitions, cfg.seed + round as u64);
        let mut tcfg = cfg.train.clone();
        tcfg.seed = cfg.seed.wrapping_add(round as u64);
        curve.extend(pretrain(&mut critic, &policy, &data, &tcfg)?);
        let states: Vec<_> = data.iter().map(|t| t.x.clone()).collect();
        train_policy(&mut policy, &critic, &states, &tcfg)?;
    }
    save_artifact(&dir, &critic, &policy)?;
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    write_loss_csv(&dir, "pretrain_loss.csv", &curve)?;
    println!("pretrained artifact written to {}", dir.display());
    Ok(0)
}

fn cmd_finetune(c: &Common, a: &ArtifactArg) -> Result<u8> {
    let cfg = resolve_config(c)?;
    let dir = make_run_dir(c, &cfg, "finetune")?;
    let (mut critic, mut policy) = load_artifact(&a.artifact)?;
    let env = &cfg.env;
    let data = collect_transitions(env, Some(&policy), cfg.n_transitions, cfg.seed + 101);
    let mut rounds = 0;
    for round in 0..cfg.max_finetune_rounds {
        let mut bnb = cfg.bnb.clone();
        bnb.seed = cfg.seed.wrapping_add(1000 + round as u64);
        let mut cex = CounterexampleSet::default();
        cex.con = attack(&critic, &policy, env, ConditionKind::Constraint, &bnb)?;
        cex.inv = attack(&critic, &policy, env, ConditionKind::Invariance, &bnb)?;
        if cex.is_empty() {
            break;
        }
        rounds += 1;
        let mut tcfg = cfg.train.clone();
        tcfg.seed = cfg.seed.wrapping_add(2000 + round as u64);
        let report = finetune_round(&mut critic, &mut policy, &cex, &data, env, &tcfg)?;
        println!(
            "round {round}: {} counterexamples, repair rate {:.3}",
            cex.len(),
            report.repair_rate
        );
        let mut survivors = cex;
        survivors.drop_repaired(&critic, &policy, env, REPAIR_MARGIN);
    }
    save_artifact(&dir, &critic, &policy)?;
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    println!("{rounds} fine-tune rounds; artifact written to {}", dir.display());
    Ok(0)
}

fn cmd_train_policy(c: &Common, a: &ArtifactArg) -> Result<u8> {
    let cfg = resolve_config(c)?;
    let dir = make_run_dir(c, &cfg, "train-policy")?;
    let (critic, mut policy) = load_artifact(&a.artifact)?;
    let env = &cfg.env;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let states: Vec<_> = (0..cfg.n_transitions).map(|_| env.state_box.sample(&mut rng)).collect();
    let curve = train_policy(&mut policy, &critic, &states, &cfg.train)?;
    save_artifact(&dir, &critic, &policy)?;
    write_loss_csv(&dir, "policy_loss.csv", &curve)?;
    println!("policy refit; artifact written to {}", dir.display());
    Ok(0)
}

fn cmd_attack(c: &Common, a: &ArtifactArg) -> Result<u8> {
    let cfg = resolve_config(c)?;
    let dir = make_run_dir(c, &cfg, "attack")?;
    let (critic, policy) = load_artifact(&a.artifact)?;
    let env = &cfg.env;
    #[derive(serde::Serialize)]
    struct CexOut {
        kind: ConditionKind,
        x: Vec<f64>,
        u: Vec<f64>,
        q: f64,
        residual: f64,
    }
    let mut out = Vec::new();
    for kind in [ConditionKind::Constraint, ConditionKind::Invariance] {
        for cex in attack(&critic, &policy, env, kind, &cfg.bnb)? {
            out.push(CexOut {
                kind,
                x: cex.x.to_vec(),
                u: cex.u.to_vec(),
                q: cex.q,
                residual: cex.residual,
            });
        }
    }
    std::fs::write(dir.join("counterexamples.json"), serde_json::to_string_pretty(&out)?)?;
    println!("{} counterexamples written to {}", out.len(), dir.display());
    Ok(0)
}

fn verdict_exit(verdicts: &[Verdict]) -> u8 {
    if verdicts.iter().any(|v| v.status == VerdictStatus::Falsified) {
        2
    } else if verdicts.iter().any(|v| v.status == VerdictStatus::Unknown) {
        3
    } else {
        0
    }
}

fn cmd_certify(c: &Common, a: &ArtifactArg) -> Result<u8> {
    let cfg = resolve_config(c)?;
    let dir = make_run_dir(c, &cfg, "certify")?;
    let (critic, policy) = load_artifact(&a.artifact)?;
    let env = &cfg.env;
    let mut verdicts = Vec::new();
    for kind in [ConditionKind::Constraint, ConditionKind::Invariance] {
        let task = VerifyTask { kind, critic: &critic, policy: &policy, env };
        let v = certify(&task, &cfg.bnb);
        println!("{kind:?}: {:?} ({} boxes)", v.status, v.boxes_explored);
        verdicts.push(v);
    }
    std::fs::write(dir.join("verdicts.json"), serde_json::to_string_pretty(&verdicts)?)?;
    Ok(verdict_exit(&verdicts))
}

fn cmd_export(c: &Common, a: &ArtifactArg, kind: &str) -> Result<u8> {
    let cfg = resolve_config(c)?;
    let dir = make_run_dir(c, &cfg, "export-miqcp")?;
    let (critic, policy) = load_artifact(&a.artifact)?;
    let kind = match kind {
        "constraint" | "con" => ConditionKind::Constraint,
        "invariance" | "inv" => ConditionKind::Invariance,
        other => bail!("unknown condition kind: {other}"),
    };
    let env = &cfg.env;
    let task = VerifyTask { kind, critic: &critic, policy: &policy, env };
    let path = dir.join("query.lp");
    let summary = export_miqcp(&task, &path)?;
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!(
        "LP written to {} ({} binaries, {} quadratic terms)",
        path.display(),
        summary.relu_binaries + summary.extra_binaries,
        summary.quad_terms
    );
    Ok(0)
}

fn cmd_pipeline(c: &Common) -> Result<u8> {
    let cfg = resolve_config(c)?;
    let dir = make_run_dir(c, &cfg, "pipeline")?;
    let artifact = run_pipeline(&cfg)?;
    write_run_dir(&cfg, &artifact, &dir)?;
    println!(
        "pipeline done: certified={} (finetune rounds {}, verify rounds {}); run dir {}",
        artifact.certified,
        artifact.finetune_rounds_used,
        artifact.verify_rounds_used,
        dir.display()
    );
    if artifact.certified {
        Ok(0)
    } else {
        let code = verdict_exit(&artifact.verdicts);
        Ok(if code == 0 { 3 } else { code })
    }
}

fn cmd_eval(c: &Common, a: &ArtifactArg) -> Result<u8> {
    let cfg = resolve_config(c)?;
    let dir = make_run_dir(c, &cfg, "eval")?;
    let (critic, policy) = load_artifact(&a.artifact)?;
    let env = &cfg.env;
    let res = cfg.grid_metric_res;
    let res_state = match env.state_dim {
        1 | 2 => res,
        3 => res.min(41),
        _ => res.min(21),
    };
    let safe_set = eval_safe_set_size(&critic, &policy, env, res_state);
    let safe_control = eval_safe_control_size(&critic, env, res_state.min(21), 11);
    let mut csv = String::from("stage,safe_set_size,safe_control_size\n");
    csv.push_str(&format!("eval,{safe_set},{safe_control}\n"));
    std::fs::write(dir.join("metrics.csv"), csv)?;
    std::fs::create_dir_all(dir.join("grids"))?;
    emit_safe_set_grid(
        &critic,
        &policy,
        env,
        &default_slice(env),
        101,
        &dir.join("grids").join(format!("{}.csv", env.name.as_str())),
    )?;
    println!("safe_set_size={safe_set} safe_control_size={safe_control}");
    Ok(0)
}

fn cmd_rollout(c: &Common, a: &ArtifactArg, rollouts: usize, steps: usize, unfiltered: bool) -> Result<u8> {
    let cfg = resolve_config(c)?;
    let dir = make_run_dir(c, &cfg, "rollout")?;
    let (critic, policy) = load_artifact(&a.artifact)?;
    let env = cfg.env.clone();
    let fp = FilterPolicy::new(critic, policy, 64)?;
    // start states: seeded samples with Q(x0, pi(x0)) <= 0
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut starts = Vec::new();
    let mut tries = 0;
    while starts.len() < rollouts && tries < rollouts * 10_000 {
        tries += 1;
        let x = env.state_box.sample(&mut rng);
        let u = fp.fallback.forward(&x);
        if fp.critic.forward(&x, &u) <= 0.0 {
            starts.push((x, u));
        }
    }
    if starts.len() < rollouts {
        bail!("could not find {rollouts} verified-safe start states");
    }
    let mut total_violations = 0usize;
    let mut total_interventions = 0usize;
    let mut total_flagged = 0usize;
    let mut first_traj = None;
    for (i, (x0, u0)) in starts.iter().enumerate() {
        let r = rollout(
            &fp, &env, x0, u0,
            uniform_nominal(&env, cfg.seed.wrapping_add(i as u64)),
            steps,
            !unfiltered,
            i == 0,
        )?;
        total_violations += r.violations;
        total_interventions += r.interventions;
        total_flagged += r.flagged;
        if i == 0 {
            first_traj = Some(r);
        }
    }
    #[derive(serde::Serialize)]
    struct Aggregate {
        rollouts: usize,
        steps: usize,
        filtered: bool,
        total_violations: usize,
        total_interventions: usize,
        total_flagged: usize,
    }
    std::fs::write(
        dir.join("rollouts.json"),
        serde_json::to_string_pretty(&Aggregate {
            rollouts,
            steps,
            filtered: !unfiltered,
            total_violations,
            total_interventions,
            total_flagged,
        })?,
    )?;
    if let Some(r) = &first_traj {
        write_trajectory_csv(r, &env, &dir.join("trajectory.csv"))?;
    }
    println!(
        "{rollouts} rollouts x {steps} steps: {total_violations} violations, {total_interventions} interventions"
    );
    Ok(0)
}

fn cmd_oracle(c: &Common, u_res: usize) -> Result<u8> {
    let cfg = resolve_config(c)?;
    let dir = make_run_dir(c, &cfg, "oracle")?;
    let res = cfg.grid_metric_res.max(51);
    let grid = value_iteration_oracle(&cfg.env, res, u_res, 1e-6, 100_000)?;
    std::fs::write(dir.join("oracle.json"), serde_json::to_string(&grid)?)?;
    println!(
        "oracle grid {}^{} converged in {} sweeps; written to {}",
        res,
        cfg.env.state_dim,
        grid.sweeps,
        dir.display()
    );
    Ok(0)
}
