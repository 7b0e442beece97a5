//! The four-stage loop: pretrain, adversarial fine-tune, policy
//! approximation, verify — with counterexample feedback from the verifier —
//! plus the grid metrics reported per stage.

use std::path::Path;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{EnvName, EnvSpec};
use crate::net::{Critic, ModelFile, PolicyNetwork};
use crate::training::{
    collect_transitions, finetune_round, pretrain, train_policy, CounterexampleSet, TrainConfig,
};
use crate::verifier::{attack, certify, BnBConfig, ConditionKind, Verdict, VerdictStatus};
use crate::{CoreError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub env: EnvSpec,
    pub train: TrainConfig,
    pub bnb: BnBConfig,
    /// false selects the dense single-tower critic baseline.
    pub multiplicative: bool,
    pub n_transitions: usize,
    /// Alternations of critic pretraining and policy refitting in stage 1.
    pub pretrain_rounds: usize,
    pub max_finetune_rounds: usize,
    pub max_verify_rounds: usize,
    pub grid_metric_res: usize,
    pub seed: u64,
}

impl PipelineConfig {
    /// Tuned defaults for an environment.
    pub fn reference(env: EnvName, seed: u64) -> PipelineConfig {
        let env = EnvSpec::by_name(env);
        // higher-dimensional joint boxes need more splits near the decision
        // surface before the bounds get tight enough to prune
        let max_boxes = if env.state_dim + env.control_dim > 4 { 2_000_000 } else { 200_000 };
        PipelineConfig {
            env,
            train: TrainConfig { seed, ..Default::default() },
            bnb: BnBConfig { seed, max_boxes, ..Default::default() },
            multiplicative: true,
            n_transitions: 40_000,
            pretrain_rounds: 4,
            max_finetune_rounds: 30,
            max_verify_rounds: 25,
            grid_metric_res: 51,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.max_finetune_rounds < 1 || self.max_verify_rounds < 1 {
            return Err(CoreError::Contract("round limits must be >= 1".into()));
        }
        if self.grid_metric_res < 11 {
            return Err(CoreError::Contract("grid_metric_res must be >= 11".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: String,
    pub safe_set_size: f64,
    pub safe_control_size: f64,
}

/// The pipeline's result: networks, final verdicts, per-stage metrics. The
/// `certified` flag is true only when both conditions came back Certified;
/// uncertified outcomes still carry all metrics for debugging.
pub struct CertifiedArtifact {
    pub critic: Critic,
    pub policy: PolicyNetwork,
    pub verdicts: Vec<Verdict>,
    pub metrics: Vec<StageMetrics>,
    pub certified: bool,
    pub finetune_rounds_used: usize,
    pub verify_rounds_used: usize,
}

/// Fraction of a uniform `res^state_dim` grid with Q(x, pi(x)) <= 0.
pub fn eval_safe_set_size(critic: &Critic, policy: &PolicyNetwork, env: &EnvSpec, res: usize) -> f64 {
    assert!(res >= 2);
    let n: usize = res.pow(env.state_dim as u32);
    let safe: usize = (0..n)
        .into_par_iter()
        .filter(|&flat| {
            let x = grid_node(env, res, flat);
            critic.forward(&x, &policy.forward(&x)) <= 0.0
        })
        .count();
    safe as f64 / n as f64
}

/// Over grid states that admit at least one safe grid control, the mean
/// fraction of grid controls with Q(x, u) <= 0.
pub fn eval_safe_control_size(critic: &Critic, env: &EnvSpec, res_x: usize, res_u: usize) -> f64 {
    assert!(res_x >= 2 && res_u >= 2);
    let controls: Vec<Array1<f64>> = control_grid(env, res_u);
    let n: usize = res_x.pow(env.state_dim as u32);
    let (sum, count) = (0..n)
        .into_par_iter()
        .map(|flat| {
            let x = grid_node(env, res_x, flat);
            let safe = controls
                .iter()
                .filter(|u| critic.forward(&x, u) <= 0.0)
                .count();
            if safe == 0 {
                (0.0, 0usize)
            } else {
                (safe as f64 / controls.len() as f64, 1)
            }
        })
        .reduce(|| (0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Violation buffer used by stage-2 attacks: fine-tuning treats h within
/// this distance of zero as already violating, creating the margin the
/// verifier needs.
const ATTACK_BUFFER: f64 = 0.03;

/// Transitions whose states sit in the outer 2% shell of one non-angular
/// coordinate, where the domain-exit term of h is positive. Uniform
/// sampling almost never covers this thin region, yet certification checks
/// it like everywhere else.
fn boundary_transitions(env: &EnvSpec, n: usize, seed: u64) -> Vec<crate::training::Transition> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angular = env.angular_dims();
    let dims: Vec<usize> = (0..env.state_dim).filter(|d| !angular.contains(d)).collect();
    (0..n)
        .map(|_| {
            let mut x = env.state_box.sample(&mut rng);
            let d = dims[rng.gen_range(0..dims.len())];
            let t: f64 = rng.gen_range(0.975..1.0);
            x[d] = t * if rng.gen_bool(0.5) { env.state_box.hi[d] } else { env.state_box.lo[d] };
            let u = env.control_box.sample(&mut rng);
            let x_next = env.step(&x, &u).expect("sampled inside boxes");
            let h_x = env.constraint(&x) + crate::training::TARGET_MARGIN;
            crate::training::Transition { x, u, x_next, h_x }
        })
        .collect()
}

fn grid_node(env: &EnvSpec, res: usize, mut flat: usize) -> Array1<f64> {
    let d = env.state_dim;
    let mut x = Array1::zeros(d);
    for i in (0..d).rev() {
        let k = flat % res;
        flat /= res;
        x[i] = env.state_box.lo[i] + env.state_box.width(i) * k as f64 / (res - 1) as f64;
    }
    x
}

fn control_grid(env: &EnvSpec, res_u: usize) -> Vec<Array1<f64>> {
    let mut grid: Vec<Array1<f64>> = vec![Array1::zeros(env.control_dim)];
    for i in 0..env.control_dim {
        let mut next = Vec::with_capacity(grid.len() * res_u);
        for base in &grid {
            for k in 0..res_u {
                let mut u = base.clone();
                u[i] = env.control_box.lo[i]
                    + env.control_box.width(i) * k as f64 / (res_u - 1) as f64;
                next.push(u);
            }
        }
        grid = next;
    }
    grid
}

/// Write a 2-D slice of the safe set as CSV with header `c1,c2,q,h`.
/// `slice_spec` fixes every coordinate given as `Some(value)`; exactly two
/// entries must be `None` — those become the plotted axes.
pub fn emit_safe_set_grid(
    critic: &Critic,
    policy: &PolicyNetwork,
    env: &EnvSpec,
    slice_spec: &[Option<f64>],
    res: usize,
    path: &Path,
) -> Result<()> {
    if slice_spec.len() != env.state_dim {
        return Err(CoreError::DimensionMismatch {
            expected: env.state_dim,
            got: slice_spec.len(),
            context: "slice_spec",
        });
    }
    let axes: Vec<usize> = slice_spec
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_none())
        .map(|(i, _)| i)
        .collect();
    if axes.len() != 2 {
        return Err(CoreError::Contract(
            "slice_spec must leave exactly two coordinates free".into(),
        ));
    }
    let mut out = String::from("c1,c2,q,h\n");
    let mut x = Array1::zeros(env.state_dim);
    for (i, s) in slice_spec.iter().enumerate() {
        if let Some(v) = s {
            x[i] = *v;
        }
    }
    let (a, b) = (axes[0], axes[1]);
    for i in 0..res {
        let c1 = env.state_box.lo[a] + env.state_box.width(a) * i as f64 / (res - 1) as f64;
        for j in 0..res {
            let c2 = env.state_box.lo[b] + env.state_box.width(b) * j as f64 / (res - 1) as f64;
            x[a] = c1;
            x[b] = c2;
            let q = critic.forward(&x, &policy.forward(&x));
            let h = env.constraint(&x);
            out.push_str(&format!("{c1},{c2},{q},{h}\n"));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Progress logging, enabled by setting the `HJC_LOG` environment variable.
fn log(msg: impl AsRef<str>) {
    if std::env::var_os("HJC_LOG").is_some() {
        eprintln!("[hjc] {}", msg.as_ref());
    }
}

/// Default plotting slice: first two coordinates free, the rest zero.
pub fn default_slice(env: &EnvSpec) -> Vec<Option<f64>> {
    (0..env.state_dim)
        .map(|i| if i < 2 { None } else { Some(0.0) })
        .collect()
}

/// Run the full loop starting from freshly initialized networks.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<CertifiedArtifact> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let env = &cfg.env;
    let critic = if cfg.multiplicative {
        Critic::new_multiplicative(env.state_dim, env.control_dim, &mut rng)
    } else {
        Critic::new_dense(env.state_dim, env.control_dim, &mut rng)
    };
    let policy = PolicyNetwork::new(env.state_dim, env.control_box.clone(), &mut rng);
    run_pipeline_from(critic, policy, cfg)
}

/// Run the loop from given initial networks (used by tests and warm starts).
pub fn run_pipeline_from(
    mut critic: Critic,
    mut policy: PolicyNetwork,
    cfg: &PipelineConfig,
) -> Result<CertifiedArtifact> {
    cfg.validate()?;
    let env = &cfg.env;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x853c49e6748fea9b);
    let mut metrics = Vec::new();
    let res = cfg.grid_metric_res;
    let (res_x, res_u) = control_metric_res(env, res);

    // Stage 1: alternate critic pretraining with policy refits so the
    // bootstrap target Q(x', pi(x')) tracks the current best control.
    for round in 0..cfg.pretrain_rounds {
        let behavior = if round == 0 { None } else { Some(&policy) };
        let mut data = collect_transitions(env, behavior, cfg.n_transitions, cfg.seed + round as u64);
        data.extend(boundary_transitions(env, cfg.n_transitions / 10, cfg.seed + 50 + round as u64));
        let mut tcfg = TrainConfig {
            seed: cfg.seed.wrapping_add(round as u64),
            ..cfg.train.clone()
        };
        if round > 0 {
            // anneal the discount only once; later rounds train at the end value
            tcfg.gamma.start = tcfg.gamma.end;
        }
        // bootstrapped fitted value iteration near gamma = 1 can go unstable
        // when the behavior policy shifts between rounds; on divergence,
        // restore the snapshot and retry the round at a smaller step size
        let snapshot = critic.clone();
        let mut attempt = 0;
        loop {
            match pretrain(&mut critic, &policy, &data, &tcfg) {
                Ok(_) => break,
                Err(CoreError::Diverged(msg)) if attempt < 2 => {
                    attempt += 1;
                    critic = snapshot.clone();
                    tcfg.lr *= 0.25;
                    log(format!(
                        "pretrain round {round} diverged ({msg}); retry {attempt} at lr {}",
                        tcfg.lr
                    ));
                }
                Err(e) => return Err(e),
            }
        }
        let states: Vec<Array1<f64>> = data.iter().map(|t| t.x.clone()).collect();
        train_policy(&mut policy, &critic, &states, &tcfg)?;
        log(format!("pretrain round {round} done"));
    }
    metrics.push(stage_metrics("pretrain", &critic, &policy, env, res, res_x, res_u));

    // Stage 2: adversarial fine-tuning until an attack round comes up empty
    // and the accumulated backlog is repaired. Counterexamples persist
    // across rounds; the attack runs with a violation buffer so Q is pushed
    // positive on a neighborhood of the violation set, not just on it.
    let mut data = collect_transitions(env, Some(&policy), cfg.n_transitions, cfg.seed + 101);
    data.extend(boundary_transitions(env, cfg.n_transitions / 10, cfg.seed + 102));
    let mut cex = CounterexampleSet::default();
    let mut finetune_rounds_used = 0;
    for round in 0..cfg.max_finetune_rounds {
        let bnb = BnBConfig {
            seed: cfg.seed.wrapping_add(1000 + round as u64),
            falsify_buffer: ATTACK_BUFFER,
            ..cfg.bnb.clone()
        };
        let found_con = attack(&critic, &policy, env, ConditionKind::Constraint, &bnb)?;
        let found_inv = attack(&critic, &policy, env, ConditionKind::Invariance, &bnb)?;
        let found = found_con.len() + found_inv.len();
        log(format!(
            "finetune round {round}: attack found {} con + {} inv, backlog {}",
            found_con.len(),
            found_inv.len(),
            cex.len() + found
        ));
        cex.con.extend(found_con);
        cex.inv.extend(found_inv);
        // repaired items stay in the set as standing constraints: the
        // per-step hinge in finetune_round silences them while they hold and
        // reactivates them if a later repair regresses the fit there
        if found == 0 {
            break;
        }
        finetune_rounds_used += 1;
        let tcfg = TrainConfig {
            seed: cfg.seed.wrapping_add(2000 + round as u64),
            ..cfg.train.clone()
        };
        let rep = finetune_round(&mut critic, &mut policy, &cex, &data, env, &tcfg)?;
        log(format!(
            "finetune round {round}: repair rate {:.2}, anchor loss {:.4}, safe set {:.3}",
            rep.repair_rate,
            rep.anchor_loss,
            eval_safe_set_size(&critic, &policy, env, 21)
        ));
    }
    metrics.push(stage_metrics("finetune", &critic, &policy, env, res, res_x, res_u));

    // Stage 3: final policy approximation.
    let states: Vec<Array1<f64>> = (0..cfg.n_transitions)
        .map(|_| env.state_box.sample(&mut rng))
        .collect();
    train_policy(&mut policy, &critic, &states, &cfg.train)?;

    // Stage 4: certification with counterexample feedback. Constraint
    // satisfaction is checked first; invariance counterexamples are only
    // meaningful once it holds.
    let mut verify_rounds_used = 0;
    let mut last_con: Option<Verdict> = None;
    let mut last_inv: Option<Verdict> = None;
    let mut witnesses = CounterexampleSet::default();
    for round in 0..cfg.max_verify_rounds {
        verify_rounds_used += 1;
        // cheap buffered-attack sweep first, so the expensive search below is
        // only attempted once gradient attacks come up empty
        for sweep in 0..8 {
            let bnb = BnBConfig {
                seed: cfg.seed.wrapping_add(5000 + (round * 16 + sweep) as u64),
                falsify_buffer: ATTACK_BUFFER,
                ..cfg.bnb.clone()
            };
            let fc = attack(&critic, &policy, env, ConditionKind::Constraint, &bnb)?;
            let fi = attack(&critic, &policy, env, ConditionKind::Invariance, &bnb)?;
            log(format!(
                "verify round {round} sweep {sweep}: attack found {} con + {} inv, backlog {}",
                fc.len(),
                fi.len(),
                witnesses.len() + fc.len() + fi.len()
            ));
            let found = fc.len() + fi.len();
            witnesses.con.extend(fc);
            witnesses.inv.extend(fi);
            if found == 0 || witnesses.is_empty() {
                break;
            }
            let tcfg = TrainConfig {
                seed: cfg.seed.wrapping_add(6000 + (round * 16 + sweep) as u64),
                ..cfg.train.clone()
            };
            finetune_round(&mut critic, &mut policy, &witnesses, &data, env, &tcfg)?;
        }
        let task_con = crate::verifier::VerifyTask {
            kind: ConditionKind::Constraint,
            critic: &critic,
            policy: &policy,
            env,
        };
        let vcon = certify(&task_con, &cfg.bnb);
        log(format!(
            "verify round {round}: constraint {:?} ({} boxes)",
            vcon.status, vcon.boxes_explored
        ));
        let witness = vcon.counterexample.clone();
        last_con = Some(vcon);
        if let Some(cex) = witness {
            feed_witness(
                &mut critic, &mut policy, env, &data, cfg, round, true, &cex, &mut witnesses,
            )?;
            continue;
        }
        let task_inv = crate::verifier::VerifyTask {
            kind: ConditionKind::Invariance,
            critic: &critic,
            policy: &policy,
            env,
        };
        let vinv = certify(&task_inv, &cfg.bnb);
        log(format!(
            "verify round {round}: invariance {:?} ({} boxes)",
            vinv.status, vinv.boxes_explored
        ));
        let witness = vinv.counterexample.clone();
        last_inv = Some(vinv);
        if let Some(cex) = witness {
            feed_witness(
                &mut critic, &mut policy, env, &data, cfg, round, false, &cex, &mut witnesses,
            )?;
            continue;
        }
        break;
    }
    metrics.push(stage_metrics("verified", &critic, &policy, env, res, res_x, res_u));

    let certified = matches!(
        (&last_con, &last_inv),
        (Some(c), Some(i))
            if c.status == VerdictStatus::Certified && i.status == VerdictStatus::Certified
    );
    let mut verdicts = Vec::new();
    if let Some(v) = last_con {
        verdicts.push(v);
    }
    if let Some(v) = last_inv {
        verdicts.push(v);
    }
    Ok(CertifiedArtifact {
        critic,
        policy,
        verdicts,
        metrics,
        certified,
        finetune_rounds_used,
        verify_rounds_used,
    })
}

#[allow(clippy::too_many_arguments)]
fn feed_witness(
    critic: &mut Critic,
    policy: &mut PolicyNetwork,
    env: &EnvSpec,
    data: &[crate::training::Transition],
    cfg: &PipelineConfig,
    round: usize,
    is_con: bool,
    cex: &crate::verifier::CexRecord,
    witnesses: &mut CounterexampleSet,
) -> Result<()> {
    let item = crate::training::Counterexample {
        x: Array1::from_vec(cex.x.clone()),
        u: Array1::from_vec(cex.u.clone()),
        q: cex.q,
        residual: cex.violation,
    };
    // widen the witness into a small cloud so the repair covers the box the
    // verifier will re-examine, not just the point; witnesses from earlier
    // rounds stay in the set until repaired
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3000 + round as u64));
    let items: Vec<_> = std::iter::once(item.clone())
        .chain((0..15).map(|_| {
            let mut c = item.clone();
            for i in 0..env.state_dim {
                c.x[i] += rng.gen_range(-0.02..0.02) * env.state_box.width(i);
            }
            for i in 0..env.control_dim {
                c.u[i] += rng.gen_range(-0.02..0.02) * env.control_box.width(i);
            }
            env.state_box.project(&mut c.x);
            env.control_box.project(&mut c.u);
            c
        }))
        .collect();
    if is_con {
        witnesses.con.extend(items);
    } else {
        witnesses.inv.extend(items);
    }
    let tcfg = TrainConfig {
        seed: cfg.seed.wrapping_add(4000 + round as u64),
        ..cfg.train.clone()
    };
    finetune_round(critic, policy, witnesses, data, env, &tcfg)?;
    Ok(())
}

fn control_metric_res(env: &EnvSpec, res: usize) -> (usize, usize) {
    // keep the (x, u) product grid tractable in high dimension
    let res_x = match env.state_dim {
        1 | 2 => res,
        3 => res.min(31),
        _ => res.min(17),
    };
    (res_x, 11)
}

fn stage_metrics(
    stage: &str,
    critic: &Critic,
    policy: &PolicyNetwork,
    env: &EnvSpec,
    res: usize,
    res_x: usize,
    res_u: usize,
) -> StageMetrics {
    let res = match env.state_dim {
        1 | 2 => res,
        3 => res.min(41),
        _ => res.min(21),
    };
    StageMetrics {
        stage: stage.into(),
        safe_set_size: eval_safe_set_size(critic, policy, env, res),
        safe_control_size: eval_safe_control_size(critic, env, res_x, res_u),
    }
}

/// Persist a run: config echo, model files, verdicts, per-stage metrics CSV,
/// and the default safe-set slice grid.
pub fn write_run_dir(cfg: &PipelineConfig, artifact: &CertifiedArtifact, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("grids"))?;
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    ModelFile::from_critic(&artifact.critic).save(&dir.join("qnet.json"))?;
    ModelFile::from_policy(&artifact.policy).save(&dir.join("policy.json"))?;
    #[derive(Serialize)]
    struct VerdictsOut<'a> {
        certified: bool,
        verdicts: &'a [Verdict],
    }
    std::fs::write(
        dir.join("verdicts.json"),
        serde_json::to_string_pretty(&VerdictsOut {
            certified: artifact.certified,
            verdicts: &artifact.verdicts,
        })?,
    )?;
    let mut csv = String::from("stage,safe_set_size,safe_control_size\n");
    for m in &artifact.metrics {
        csv.push_str(&format!("{},{},{}\n", m.stage, m.safe_set_size, m.safe_control_size));
    }
    std::fs::write(dir.join("metrics.csv"), csv)?;
    emit_safe_set_grid(
        &artifact.critic,
        &artifact.policy,
        &cfg.env,
        &default_slice(&cfg.env),
        101,
        &dir.join("grids").join(format!("{}.csv", cfg.env.name.as_str())),
    )?;
    Ok(())
}
