//! Falsification and certification of the two safe-set conditions.
//!
//! `attack` searches for state-control pairs violating either condition with
//! projected gradient ascent; its hits feed fine-tuning. `certify` runs a
//! sound branch-and-bound over the joint state-control box: a box is
//! discarded when the critic is provably nonnegative on it (the condition is
//! vacuous there) or the violation term is provably nonpositive, and split
//! otherwise. `export_miqcp` writes the same feasibility query as an LP-format
//! mixed-integer program with big-M ReLU encodings for cross-checking with
//! external solvers. `value_iteration_oracle` computes a grid reference value
//! function for low-dimensional systems.

use std::io::Write as _;
use std::path::Path;

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{
    box_to_intervals, classify, critic_bounds, mlp_interval, policy_interval, qnet_bounds,
    BoundMethod, NodeStatus,
};
use crate::envs::{EnvName, EnvSpec, Hyperbox};
use crate::net::{Critic, Mlp, PolicyNetwork, EMBED_DIM};
use crate::training::{min_q_control, Counterexample};
use crate::{CoreError, Result};

/// Numeric guard: a falsification only counts when Q is below `-GUARD` and
/// the violation term is above `GUARD`, both under exact re-evaluation.
pub const GUARD: f64 = 1e-9;

/// Which of the two sufficient conditions is being checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    /// Q(x, u) <= 0 implies h(x) <= 0.
    Constraint,
    /// Q(x, u) <= 0 implies some u' with Q(f(x, u), u') <= 0.
    Invariance,
}

/// A certification query over the environment's full state-control box.
pub struct VerifyTask<'a> {
    pub kind: ConditionKind,
    pub critic: &'a Critic,
    pub policy: &'a PolicyNetwork,
    pub env: &'a EnvSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BnBConfig {
    /// Node budget; the search returns Unknown once it is spent.
    pub max_boxes: usize,
    /// Boxes whose largest domain-scaled width falls below this are not
    /// split further.
    pub min_box_width: f64,
    pub method: BoundMethod,
    pub attack_restarts: usize,
    pub attack_steps: usize,
    /// Treat `violation > GUARD - falsify_buffer` as a hit. A positive
    /// buffer makes the attack report near-violations, so fine-tuning pushes
    /// Q positive on a neighborhood of the true violation set — the
    /// geometric gap branch-and-bound needs to terminate. Certification
    /// itself always runs with zero buffer.
    #[serde(default)]
    pub falsify_buffer: f64,
    pub seed: u64,
}

impl Default for BnBConfig {
    fn default() -> Self {
        BnBConfig {
            max_boxes: 200_000,
            min_box_width: 1e-4,
            method: BoundMethod::LinearMccormick,
            attack_restarts: 32,
            attack_steps: 120,
            falsify_buffer: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictStatus {
    Certified,
    Falsified,
    Unknown,
}

/// A concrete violating pair, stored as plain vectors for JSON output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CexRecord {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub q: f64,
    pub violation: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Verdict {
    pub kind: ConditionKind,
    pub status: VerdictStatus,
    pub counterexample: Option<CexRecord>,
    pub boxes_explored: usize,
    pub boxes_pruned: usize,
    pub max_depth: usize,
    /// Boxes left undecided at the width floor or when the budget ran out.
    pub unresolved: usize,
}

/// Q and its input gradients at a point.
fn q_and_grad(critic: &Critic, x: &Array1<f64>, u: &Array1<f64>) -> (f64, Array1<f64>, Array1<f64>) {
    let q = critic.forward(x, u);
    let (_, dx, du) = critic.backward(x, u, 1.0);
    (q, dx, du)
}

/// The violation term of `kind` and its gradients in (x, u). Invariance uses
/// `min Q(f(x,u), u')` over the candidate controls (policy proposal plus
/// control-box center and corners), differentiated at the fixed minimizer.
fn violation_and_grad(
    critic: &Critic,
    policy: &PolicyNetwork,
    env: &EnvSpec,
    kind: ConditionKind,
    x: &Array1<f64>,
    u: &Array1<f64>,
) -> Result<(f64, Array1<f64>, Array1<f64>)> {
    match kind {
        ConditionKind::Constraint => {
            let v = env.constraint(x);
            let (_, _, dhdx) = env.jacobians(x, u)?;
            Ok((v, dhdx, Array1::zeros(u.len())))
        }
        ConditionKind::Invariance => {
            let xn = env.step(x, u)?;
            let (un, v) = min_q_control(critic, policy, &xn);
            let (_, dq_dxn, _) = critic.backward(&xn, &un, 1.0);
            let (dfdx, dfdu, _) = env.jacobians(x, u)?;
            Ok((v, dfdx.t().dot(&dq_dxn), dfdu.t().dot(&dq_dxn)))
        }
    }
}

/// Exact violation value (no gradients) for recheck.
fn violation_at(
    critic: &Critic,
    policy: &PolicyNetwork,
    env: &EnvSpec,
    kind: ConditionKind,
    x: &Array1<f64>,
    u: &Array1<f64>,
) -> Result<f64> {
    match kind {
        ConditionKind::Constraint => Ok(env.constraint(x)),
        ConditionKind::Invariance => {
            let xn = env.step(x, u)?;
            Ok(min_q_control(critic, policy, &xn).1)
        }
    }
}

/// Projected gradient ascent on `min(-Q(x,u), viol(x,u))` with random
/// restarts. Returns exact-rechecked violating pairs, deduplicated by
/// distance.
pub fn attack(
    critic: &Critic,
    policy: &PolicyNetwork,
    env: &EnvSpec,
    kind: ConditionKind,
    cfg: &BnBConfig,
) -> Result<Vec<Counterexample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6c62272e07bb0142);
    let xw: Vec<f64> = (0..env.state_dim).map(|i| env.state_box.width(i)).collect();
    let uw: Vec<f64> = (0..env.control_dim).map(|i| env.control_box.width(i)).collect();
    let mut found: Vec<Counterexample> = Vec::new();
    for _ in 0..cfg.attack_restarts {
        let mut x = env.state_box.sample(&mut rng);
        let mut u = env.control_box.sample(&mut rng);
        let mut lr = 0.05;
        for _ in 0..cfg.attack_steps {
            let (q, qx, qu) = q_and_grad(critic, &x, &u);
            let (v, vx, vu) = violation_and_grad(critic, policy, env, kind, &x, &u)?;
            let v = v + cfg.falsify_buffer;
            // ascend the smaller (active) term
            let (gx, gu) = if -q < v { (-&qx, -&qu) } else { (vx, vu) };
            let gmax = gx
                .iter()
                .chain(gu.iter())
                .fold(0.0f64, |m, g| m.max(g.abs()));
            if gmax < 1e-14 {
                break;
            }
            for i in 0..env.state_dim {
                x[i] += lr * xw[i] * gx[i] / gmax;
            }
            for i in 0..env.control_dim {
                u[i] += lr * uw[i] * gu[i] / gmax;
            }
            env.state_box.project(&mut x);
            env.control_box.project(&mut u);
            lr *= 0.98;
        }
        let q = critic.forward(&x, &u);
        let v = violation_at(critic, policy, env, kind, &x, &u)?;
        if q < -GUARD && v > GUARD - cfg.falsify_buffer {
            let is_new = found.iter().all(|c| {
                let dx: f64 = (&c.x - &x).iter().map(|d| d * d).sum::<f64>().sqrt();
                let du: f64 = (&c.u - &u).iter().map(|d| d * d).sum::<f64>().sqrt();
                dx + du > 0.05
            });
            if is_new {
                found.push(Counterexample { x, u, q, residual: v });
            }
        }
    }
    Ok(found)
}

enum Decision {
    Pruned,
    Falsified(CexRecord),
    TooSmall,
    Split(usize),
}

/// Prove `min_{u' in u_box} Q(x', u') > GUARD` for a fixed x' by recursive
/// splitting of the control box. Conservative: `false` means "not proved",
/// not "disproved".
fn prove_min_positive(critic: &Critic, x: &Array1<f64>, u_box: &Hyperbox, max_nodes: usize) -> bool {
    let x_point = Hyperbox::point(x);
    let mut stack = vec![u_box.clone()];
    let mut nodes = 0;
    while let Some(ub) = stack.pop() {
        nodes += 1;
        if nodes > max_nodes {
            return false;
        }
        if critic.forward(x, &ub.center()) <= GUARD {
            return false;
        }
        let lo = critic_bounds(critic, &x_point, &ub, BoundMethod::LinearMccormick).lo;
        if lo > GUARD {
            continue;
        }
        if ub.max_width() < 1e-5 {
            return false;
        }
        let widest = (0..ub.dim())
            .max_by(|&a, &b| ub.width(a).partial_cmp(&ub.width(b)).unwrap())
            .unwrap();
        let (l, r) = ub.split(widest);
        stack.push(l);
        stack.push(r);
    }
    true
}

fn decide(task: &VerifyTask, cfg: &BnBConfig, joint_widths: &[f64], xb: &Hyperbox, ub: &Hyperbox) -> Decision {
    let env = task.env;
    let qb = critic_bounds(task.critic, xb, ub, cfg.method);
    if qb.lo >= 0.0 {
        return Decision::Pruned;
    }
    match task.kind {
        ConditionKind::Constraint => {
            let (_, h_hi) = env.constraint_range(xb);
            if h_hi <= 0.0 {
                return Decision::Pruned;
            }
        }
        ConditionKind::Invariance => {
            let xn = env.step_interval(xb, ub);
            let un = policy_interval(task.policy, &xn);
            if critic_bounds(task.critic, &xn, &un, cfg.method).hi <= 0.0 {
                return Decision::Pruned;
            }
            // second chance with a single witness control: if a fixed u*
            // keeps Q nonpositive for every x' in the box, some safe control
            // exists there — a much tighter test than bounding Q over the
            // policy's whole output range; pick the candidate control that
            // minimizes Q at the box center
            let (ustar, _) = min_q_control(task.critic, task.policy, &xn.center());
            let ustar = Hyperbox::point(&ustar);
            if critic_bounds(task.critic, &xn, &ustar, cfg.method).hi <= 0.0 {
                return Decision::Pruned;
            }
        }
    }
    // exact probe at the center
    let xc = xb.center();
    let uc = ub.center();
    let q = task.critic.forward(&xc, &uc);
    if q < -GUARD {
        match task.kind {
            ConditionKind::Constraint => {
                let v = env.constraint(&xc);
                if v > GUARD {
                    return Decision::Falsified(CexRecord {
                        x: xc.to_vec(),
                        u: uc.to_vec(),
                        q,
                        violation: v,
                    });
                }
            }
            ConditionKind::Invariance => {
                let xn = env.step(&xc, &uc).expect("center inside boxes");
                let surrogate = min_q_control(task.critic, task.policy, &xn).1;
                if surrogate > 1e-4
                    && prove_min_positive(task.critic, &xn, &env.control_box, 4096)
                {
                    return Decision::Falsified(CexRecord {
                        x: xc.to_vec(),
                        u: uc.to_vec(),
                        q,
                        violation: surrogate,
                    });
                }
            }
        }
    }
    // split the coordinate with the largest width * |dQ/dcoord| at the box
    // center — the dimension whose halving shrinks the critic bound gap the
    // most; fall back to domain-scaled width when the gradient vanishes
    let m = xb.dim();
    let (_, dq_dx, dq_du) = task.critic.backward(&xc, &uc, 1.0);
    let mut widest = 0usize;
    let mut best = -1.0;
    let mut widest_scaled = 0usize;
    let mut best_scaled = -1.0;
    for i in 0..m + ub.dim() {
        let w = if i < m { xb.width(i) } else { ub.width(i - m) };
        let g = if i < m { dq_dx[i].abs() } else { dq_du[i - m].abs() };
        if w * g > best {
            best = w * g;
            widest = i;
        }
        let s = w / joint_widths[i];
        if s > best_scaled {
            best_scaled = s;
            widest_scaled = i;
        }
    }
    if best_scaled < cfg.min_box_width {
        return Decision::TooSmall;
    }
    Decision::Split(if best > 1e-12 { widest } else { widest_scaled })
}

/// Branch-and-bound certification of one condition over the environment's
/// full state-control box. Sound: `Certified` means the condition holds
/// everywhere; `Falsified` comes with an exactly rechecked counterexample.
pub fn certify(task: &VerifyTask, cfg: &BnBConfig) -> Verdict {
    let env = task.env;
    // certification always judges true violations, whatever buffer the
    // caller uses for training-time attacks
    let cfg = &BnBConfig { falsify_buffer: 0.0, ..cfg.clone() };
    // fast path: gradient falsification before any splitting
    if let Ok(cexs) = attack(task.critic, task.policy, env, task.kind, cfg) {
        for c in cexs {
            let genuine = match task.kind {
                ConditionKind::Constraint => true, // guards are exact already
                ConditionKind::Invariance => {
                    let xn = env.step(&c.x, &c.u).expect("attack stays in boxes");
                    prove_min_positive(task.critic, &xn, &env.control_box, 4096)
                }
            };
            if genuine {
                return Verdict {
                    kind: task.kind,
                    status: VerdictStatus::Falsified,
                    counterexample: Some(CexRecord {
                        x: c.x.to_vec(),
                        u: c.u.to_vec(),
                        q: c.q,
                        violation: c.residual,
                    }),
                    boxes_explored: 0,
                    boxes_pruned: 0,
                    max_depth: 0,
                    unresolved: 0,
                };
            }
        }
    }
    let joint = env.joint_box();
    let joint_widths: Vec<f64> = (0..joint.dim()).map(|i| joint.width(i).max(1e-12)).collect();
    let m = env.state_dim;
    let mut frontier: Vec<(Hyperbox, Hyperbox, usize)> =
        vec![(env.state_box.clone(), env.control_box.clone(), 0)];
    let mut explored = 0usize;
    let mut pruned = 0usize;
    let mut max_depth = 0usize;
    let mut unresolved = 0usize;
    while !frontier.is_empty() {
        let budget_left = cfg.max_boxes.saturating_sub(explored);
        if budget_left == 0 {
            unresolved += frontier.len();
            break;
        }
        let wave: Vec<(Hyperbox, Hyperbox, usize)> = if frontier.len() > budget_left {
            let rest = frontier.split_off(budget_left);
            let wave = frontier;
            frontier = rest;
            wave
        } else {
            std::mem::take(&mut frontier)
        };
        explored += wave.len();
        let decisions: Vec<Decision> = wave
            .par_iter()
            .map(|(xb, ub, _)| decide(task, cfg, &joint_widths, xb, ub))
            .collect();
        for ((xb, ub, depth), d) in wave.into_iter().zip(decisions) {
            max_depth = max_depth.max(depth);
            match d {
                Decision::Pruned => pruned += 1,
                Decision::TooSmall => unresolved += 1,
                Decision::Falsified(cex) => {
                    return Verdict {
                        kind: task.kind,
                        status: VerdictStatus::Falsified,
                        counterexample: Some(cex),
                        boxes_explored: explored,
                        boxes_pruned: pruned,
                        max_depth,
                        unresolved,
                    };
                }
                Decision::Split(i) => {
                    let (a, b) = if i < m {
                        let (l, r) = xb.split(i);
                        ((l, ub.clone(), depth + 1), (r, ub, depth + 1))
                    } else {
                        let (l, r) = ub.split(i - m);
                        ((xb.clone(), l, depth + 1), (xb, r, depth + 1))
                    };
                    frontier.push(a);
                    frontier.push(b);
                }
            }
        }
    }
    let status = if unresolved == 0 {
        VerdictStatus::Certified
    } else {
        VerdictStatus::Unknown
    };
    if status == VerdictStatus::Unknown && std::env::var("HJC_LOG").is_ok() {
        for (xb, ub, depth) in frontier.iter().take(6) {
            let qb = critic_bounds(task.critic, xb, ub, cfg.method);
            let (h_lo, h_hi) = env.constraint_range(xb);
            let xc = xb.center();
            let uc = ub.center();
            let q = task.critic.forward(&xc, &uc);
            eprintln!(
                "[hjc] unresolved d={depth} q=[{:.3},{:.3}] qc={q:.3} h=[{h_lo:.3},{h_hi:.3}] x={:?} u={:?}",
                qb.lo, qb.hi,
                (0..xb.dim()).map(|i| (xb.lo[i], xb.hi[i])).collect::<Vec<_>>(),
                (0..ub.dim()).map(|i| (ub.lo[i], ub.hi[i])).collect::<Vec<_>>()
            );
            if task.kind == ConditionKind::Invariance {
                let xn = env.step_interval(xb, ub);
                let (us, _) = min_q_control(task.critic, task.policy, &xn.center());
                let nb = critic_bounds(task.critic, &xn, &Hyperbox::point(&us), cfg.method);
                eprintln!(
                    "[hjc]   next q*=[{:.3},{:.3}] xn={:?}",
                    nb.lo, nb.hi,
                    (0..xn.dim()).map(|i| (xn.lo[i], xn.hi[i])).collect::<Vec<_>>()
                );
            }
        }
    }
    Verdict {
        kind: task.kind,
        status,
        counterexample: None,
        boxes_explored: explored,
        boxes_pruned: pruned,
        max_depth,
        unresolved,
    }
}

/// Counts reported by [`export_miqcp`].
#[derive(Debug, Clone, Serialize)]
pub struct MiqcpSummary {
    /// One binary per unstable ReLU node.
    pub relu_binaries: usize,
    /// Extra binaries from disjunctive constraint encodings.
    pub extra_binaries: usize,
    pub quad_terms: usize,
    pub rows: usize,
}

struct LpWriter {
    rows: Vec<String>,
    bounds: Vec<String>,
    binaries: Vec<String>,
    row_id: usize,
}

impl LpWriter {
    fn new() -> LpWriter {
        LpWriter { rows: Vec::new(), bounds: Vec::new(), binaries: Vec::new(), row_id: 0 }
    }

    fn row(&mut self, body: String) {
        self.row_id += 1;
        self.rows.push(format!(" r{}: {}", self.row_id, body));
    }

    /// Big-M encoding of one MLP; returns the output variable names.
    fn emit_mlp(&mut self, mlp: &Mlp, prefix: &str, inputs: &[String], input_box: &Hyperbox) -> Vec<String> {
        let iv = mlp_interval(mlp, &box_to_intervals(input_box));
        let n_layers = mlp.layers.len();
        let mut prev = inputs.to_vec();
        for (l, layer) in mlp.layers.iter().enumerate() {
            let mut next = Vec::with_capacity(layer.b.len());
            for j in 0..layer.b.len() {
                let a_name = format!("{prefix}a{l}_{j}");
                let mut terms = a_name.clone();
                for (k, p) in prev.iter().enumerate() {
                    let w = layer.w[[j, k]];
                    if w != 0.0 {
                        terms += &format!(" {} {} {}", if w > 0.0 { "-" } else { "+" }, w.abs(), p);
                    }
                }
                self.row(format!("{terms} = {}", layer.b[j]));
                let pre = iv.pre[l][j];
                self.bounds.push(format!(" {} <= {a_name} <= {}", pre.lo, pre.hi));
                if l + 1 == n_layers {
                    next.push(a_name);
                    continue;
                }
                let z_name = format!("{prefix}z{l}_{j}");
                match classify(&pre) {
                    NodeStatus::AlwaysOn => {
                        self.row(format!("{z_name} - {a_name} = 0"));
                        self.bounds.push(format!(" {} <= {z_name} <= {}", pre.lo.max(0.0), pre.hi));
                    }
                    NodeStatus::AlwaysOff => {
                        self.row(format!("{z_name} = 0"));
                        self.bounds.push(format!(" 0 <= {z_name} <= 0"));
                    }
                    NodeStatus::Unstable => {
                        let d_name = format!("{prefix}d{l}_{j}");
                        // z >= a;  z <= a - l(1 - d);  z <= h d;  z >= 0
                        self.row(format!("{z_name} - {a_name} >= 0"));
                        self.row(format!(
                            "{z_name} - {a_name} {} {} {d_name} <= {}",
                            if pre.lo > 0.0 { "-" } else { "+" },
                            pre.lo.abs(),
                            -pre.lo
                        ));
                        self.row(format!(
                            "{z_name} {} {} {d_name} <= 0",
                            if pre.hi > 0.0 { "-" } else { "+" },
                            pre.hi.abs()
                        ));
                        self.bounds.push(format!(" 0 <= {z_name} <= {}", pre.hi.max(0.0)));
                        self.binaries.push(d_name);
                    }
                }
                next.push(z_name);
            }
            prev = next;
        }
        prev
    }

    /// Quadratic row `<out> - [ sum a_i * b_i ] = 0`; returns the term count.
    fn emit_dot(&mut self, out: &str, a: &[String], b: &[String]) -> usize {
        let prods: Vec<String> = a.iter().zip(b).map(|(p, q)| format!("{p} * {q}")).collect();
        self.row(format!("{out} - [ {} ] = 0", prods.join(" + ")));
        prods.len()
    }
}

/// Emit a critic copy over the given input variables/box; returns the name of
/// a scalar variable constrained to equal Q, plus the quadratic term count.
fn emit_critic(
    w: &mut LpWriter,
    critic: &Critic,
    prefix: &str,
    x_vars: &[String],
    u_vars: &[String],
    x_box: &Hyperbox,
    u_box: &Hyperbox,
) -> (String, usize) {
    let q_var = format!("{prefix}q");
    match critic {
        Critic::Multiplicative(qn) => {
            let zx = w.emit_mlp(&qn.x_branch, &format!("{prefix}x_"), x_vars, x_box);
            let mut xu_vars = x_vars.to_vec();
            xu_vars.extend_from_slice(u_vars);
            let zu = w.emit_mlp(&qn.u_branch, &format!("{prefix}u_"), &xu_vars, &x_box.concat(u_box));
            let b = qnet_bounds(qn, x_box, u_box, BoundMethod::Interval);
            w.bounds.push(format!(" {} <= {q_var} <= {}", b.q.lo, b.q.hi));
            let terms = w.emit_dot(&q_var, &zx, &zu);
            debug_assert_eq!(terms, EMBED_DIM.min(zx.len()));
            (q_var, terms)
        }
        Critic::Dense(mlp) => {
            let mut xu_vars = x_vars.to_vec();
            xu_vars.extend_from_slice(u_vars);
            let out = w.emit_mlp(mlp, &format!("{prefix}m_"), &xu_vars, &x_box.concat(u_box));
            w.row(format!("{q_var} - {} = 0", out[0]));
            let b = critic_bounds(critic, x_box, u_box, BoundMethod::Interval);
            w.bounds.push(format!(" {} <= {q_var} <= {}", b.lo, b.hi));
            (q_var, 0)
        }
    }
}

/// Write the falsification query for `task` as an LP-format MIQCP: find
/// (x, u) in the domain with Q(x, u) <= 0 and the violation term >= eps.
/// Infeasibility certifies the condition. ReLU nodes use big-M rows with
/// interval pre-activation bounds and one binary per unstable node only.
///
/// Supported combinations: the constraint condition for environments whose
/// task constraint is linear or quadratic in the state (double integrator,
/// planar double integrator, unicycle); the invariance condition additionally
/// needs affine dynamics (both double integrators). The violation row uses
/// the task constraint; the domain-exit augmentation is not encoded. For
/// invariance, u' = pi(x') is relaxed to u' free in the control box, which
/// over-approximates the violation set, so infeasibility remains a valid
/// certificate.
pub fn export_miqcp(task: &VerifyTask, path: &Path) -> Result<MiqcpSummary> {
    const EPS: f64 = 1e-6;
    let env = task.env;
    let mut w = LpWriter::new();
    let x_vars: Vec<String> = (0..env.state_dim).map(|i| format!("x{i}")).collect();
    let u_vars: Vec<String> = (0..env.control_dim).map(|i| format!("u{i}")).collect();
    for (i, v) in x_vars.iter().enumerate() {
        w.bounds.push(format!(" {} <= {v} <= {}", env.state_box.lo[i], env.state_box.hi[i]));
    }
    for (i, v) in u_vars.iter().enumerate() {
        w.bounds.push(format!(" {} <= {v} <= {}", env.control_box.lo[i], env.control_box.hi[i]));
    }
    let (q_var, mut quad_terms) = emit_critic(
        &mut w, task.critic, "", &x_vars, &u_vars, &env.state_box, &env.control_box,
    );
    w.row(format!("{q_var} <= 0"));
    let mut extra_binaries = 0usize;
    match task.kind {
        ConditionKind::Constraint => match env.name {
            EnvName::DoubleIntegrator => {
                // |x0| >= 0.9 + eps via one disjunction binary
                let r = env.param("hazard_dist");
                w.row(format!("x0 + 2 dcon >= {}", r + EPS));
                w.row(format!("x0 + 2 dcon <= {}", 2.0 - r - EPS));
                w.binaries.push("dcon".into());
                extra_binaries += 1;
            }
            EnvName::DoubleIntegrator2d | EnvName::Unicycle => {
                // ||(x0, x1)|| <= r - eps, i.e. inside the hazard disc
                let r = env.param("hazard_radius");
                w.row(format!("[ x0 ^2 + x1 ^2 ] <= {}", (r - EPS) * (r - EPS)));
            }
            EnvName::RobotArm => {
                return Err(CoreError::Contract(
                    "MIQCP export: robot arm constraint is trigonometric".into(),
                ));
            }
        },
        ConditionKind::Invariance => {
            if !matches!(env.name, EnvName::DoubleIntegrator | EnvName::DoubleIntegrator2d) {
                return Err(CoreError::Contract(
                    "MIQCP export: invariance needs affine dynamics".into(),
                ));
            }
            let dt = env.dt;
            let m = env.state_dim;
            let n = env.control_dim;
            let xn_vars: Vec<String> = (0..m).map(|i| format!("xn{i}")).collect();
            // positions integrate velocities; the last n coords integrate u
            for i in 0..m {
                if i < m - n {
                    w.row(format!("xn{i} - x{i} - {dt} x{} = 0", i + m - n));
                } else {
                    w.row(format!("xn{i} - x{i} - {dt} u{} = 0", i - (m - n)));
                }
            }
            let xn_box = env.step_interval(&env.state_box, &env.control_box);
            for (i, v) in xn_vars.iter().enumerate() {
                w.bounds.push(format!(" {} <= {v} <= {}", xn_box.lo[i], xn_box.hi[i]));
            }
            let un_vars: Vec<String> = (0..n).map(|i| format!("un{i}")).collect();
            for (i, v) in un_vars.iter().enumerate() {
                w.bounds.push(format!(" {} <= {v} <= {}", env.control_box.lo[i], env.control_box.hi[i]));
            }
            let (qn_var, t2) = emit_critic(
                &mut w, task.critic, "n_", &xn_vars, &un_vars, &xn_box, &env.control_box,
            );
            quad_terms += t2;
            w.row(format!("{qn_var} >= {EPS}"));
        }
    }
    let mut out = String::new();
    out.push_str("\\ feasibility query: violation of the ");
    out.push_str(match task.kind {
        ConditionKind::Constraint => "constraint-satisfaction",
        ConditionKind::Invariance => "forward-invariance",
    });
    out.push_str(" condition\nMinimize\n obj: 0\nSubject To\n");
    for r in &w.rows {
        out.push_str(r);
        out.push('\n');
    }
    out.push_str("Bounds\n");
    for b in &w.bounds {
        out.push_str(b);
        out.push('\n');
    }
    if !w.binaries.is_empty() {
        out.push_str("Binaries\n");
        for b in &w.binaries {
            out.push(' ');
            out.push_str(b);
            out.push('\n');
        }
    }
    out.push_str("End\n");
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(MiqcpSummary {
        relu_binaries: w.binaries.len() - extra_binaries,
        extra_binaries,
        quad_terms,
        rows: w.rows.len(),
    })
}

/// Reference value function on a uniform state grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleGrid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub sweeps: usize,
}

impl OracleGrid {
    fn node(&self, mut flat: usize) -> Array1<f64> {
        let d = self.shape.len();
        let mut x = Array1::zeros(d);
        for i in (0..d).rev() {
            let k = flat % self.shape[i];
            flat /= self.shape[i];
            x[i] = self.lo[i] + (self.hi[i] - self.lo[i]) * k as f64 / (self.shape[i] - 1) as f64;
        }
        x
    }

    /// Nearest-node lookup; coordinates are clamped into the grid.
    pub fn lookup(&self, x: &Array1<f64>) -> f64 {
        let mut flat = 0usize;
        for i in 0..self.shape.len() {
            let t = (x[i] - self.lo[i]) / (self.hi[i] - self.lo[i]) * (self.shape[i] - 1) as f64;
            let k = (t.round().max(0.0) as usize).min(self.shape[i] - 1);
            flat = flat * self.shape[i] + k;
        }
        self.values[flat]
    }
}

/// Grid value iteration for the undiscounted safety value
/// `V(x) = max(h(x), min_u V(f(x, u)))` with nearest-node interpolation.
/// Starts at V = h and converges monotonically from below. Only available
/// for state dimension <= 3.
pub fn value_iteration_oracle(
    env: &EnvSpec,
    res: usize,
    u_res: usize,
    tol: f64,
    max_sweeps: usize,
) -> Result<OracleGrid> {
    if env.state_dim > 3 {
        return Err(CoreError::Contract(
            "grid oracle limited to state dimension <= 3".into(),
        ));
    }
    if res < 2 || u_res < 2 {
        return Err(CoreError::Contract("oracle needs res >= 2".into()));
    }
    let shape = vec![res; env.state_dim];
    let n: usize = shape.iter().product();
    let mut grid = OracleGrid {
        lo: env.state_box.lo.to_vec(),
        hi: env.state_box.hi.to_vec(),
        shape,
        values: vec![0.0; n],
        sweeps: 0,
    };
    let nodes: Vec<Array1<f64>> = (0..n).map(|i| grid.node(i)).collect();
    let h: Vec<f64> = nodes.iter().map(|x| env.constraint(x)).collect();
    // product control grid
    let mut controls: Vec<Array1<f64>> = vec![Array1::zeros(env.control_dim)];
    for i in 0..env.control_dim {
        let mut next = Vec::with_capacity(controls.len() * u_res);
        for base in &controls {
            for k in 0..u_res {
                let mut u = base.clone();
                u[i] = env.control_box.lo[i] + env.control_box.width(i) * k as f64 / (u_res - 1) as f64;
                next.push(u);
            }
        }
        controls = next;
    }
    grid.values = h.clone();
    for sweep in 0..max_sweeps {
        let old = grid.values.clone();
        let snapshot = &grid;
        let new: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let x = &nodes[i];
                let best = controls
                    .iter()
                    .map(|u| {
                        let xn = env.step(x, u).expect("grid nodes inside boxes");
                        snapshot.lookup(&xn)
                    })
                    .fold(f64::INFINITY, f64::min);
                h[i].max(best)
            })
            .collect();
        let delta = new
            .iter()
            .zip(&old)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        grid.values = new;
        grid.sweeps = sweep + 1;
        if delta < tol {
            return Ok(grid);
        }
    }
    Err(CoreError::NonConvergence(max_sweeps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::HIDDEN_WIDTH;

    fn constant_critic(m: usize, n: usize, c: f64) -> Critic {
        let mut mlp = Mlp::zeros(&[m + n, HIDDEN_WIDTH, 1]);
        mlp.layers[1].b[0] = c;
        Critic::Dense(mlp)
    }

    fn di() -> EnvSpec {
        EnvSpec::double_integrator()
    }

    #[test]
    fn certify_prunes_nonnegative_critic_immediately() {
        let env = di();
        let critic = constant_critic(2, 1, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let policy = PolicyNetwork::new(2, env.control_box.clone(), &mut rng);
        for kind in [ConditionKind::Constraint, ConditionKind::Invariance] {
            let task = VerifyTask { kind, critic: &critic, policy: &policy, env: &env };
            let v = certify(&task, &BnBConfig::default());
            assert_eq!(v.status, VerdictStatus::Certified);
            assert_eq!(v.boxes_explored, 1);
        }
    }

    #[test]
    fn certify_falsifies_all_negative_critic_on_constraint() {
        let env = di();
        let critic = constant_critic(2, 1, -1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let policy = PolicyNetwork::new(2, env.control_box.clone(), &mut rng);
        let task = VerifyTask {
            kind: ConditionKind::Constraint,
            critic: &critic,
            policy: &policy,
            env: &env,
        };
        let v = certify(&task, &BnBConfig::default());
        assert_eq!(v.status, VerdictStatus::Falsified);
        let cex = v.counterexample.unwrap();
        let x = Array1::from_vec(cex.x);
        let u = Array1::from_vec(cex.u);
        assert!(critic.forward(&x, &u) < -GUARD);
        assert!(env.constraint(&x) > GUARD);
    }

    #[test]
    fn certify_invariance_of_all_negative_critic() {
        // Q == -1 makes every next state certifiably admissible.
        let env = di();
        let critic = constant_critic(2, 1, -1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let policy = PolicyNetwork::new(2, env.control_box.clone(), &mut rng);
        let task = VerifyTask {
            kind: ConditionKind::Invariance,
            critic: &critic,
            policy: &policy,
            env: &env,
        };
        let v = certify(&task, &BnBConfig::default());
        assert_eq!(v.status, VerdictStatus::Certified);
        assert_eq!(v.boxes_explored, 1);
    }

    #[test]
    fn attack_finds_violations_of_negative_critic() {
        let env = di();
        let critic = constant_critic(2, 1, -1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let policy = PolicyNetwork::new(2, env.control_box.clone(), &mut rng);
        let cfg = BnBConfig::default();
        let cexs = attack(&critic, &policy, &env, ConditionKind::Constraint, &cfg).unwrap();
        assert!(!cexs.is_empty());
        for c in &cexs {
            assert!(c.q < -GUARD);
            assert!(env.constraint(&c.x) > GUARD);
            assert!(env.state_box.contains(&c.x, 1e-12));
            assert!(env.control_box.contains(&c.u, 1e-12));
        }
    }

    #[test]
    fn attack_is_deterministic_per_seed() {
        let env = di();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let critic = Critic::new_multiplicative(2, 1, &mut rng);
        let policy = PolicyNetwork::new(2, env.control_box.clone(), &mut rng);
        let cfg = BnBConfig { seed: 11, ..Default::default() };
        let a = attack(&critic, &policy, &env, ConditionKind::Constraint, &cfg).unwrap();
        let b = attack(&critic, &policy, &env, ConditionKind::Constraint, &cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (p, q) in a.iter().zip(&b) {
            assert_eq!(p.x, q.x);
            assert_eq!(p.u, q.u);
        }
    }

    #[test]
    fn certify_agrees_with_dense_sampling_on_random_critics() {
        let env = di();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let policy = PolicyNetwork::new(2, env.control_box.clone(), &mut rng);
        let cfg = BnBConfig { max_boxes: 30_000, ..Default::default() };
        let mut statuses = Vec::new();
        for _ in 0..8 {
            let critic = Critic::new_multiplicative(2, 1, &mut rng);
            let task = VerifyTask {
                kind: ConditionKind::Constraint,
                critic: &critic,
                policy: &policy,
                env: &env,
            };
            let v = certify(&task, &cfg);
            statuses.push(v.status);
            match v.status {
                VerdictStatus::Falsified => {
                    let cex = v.counterexample.unwrap();
                    let x = Array1::from_vec(cex.x);
                    let u = Array1::from_vec(cex.u);
                    assert!(critic.forward(&x, &u) < -GUARD);
                    assert!(env.constraint(&x) > GUARD);
                }
                VerdictStatus::Certified => {
                    // no sampled point may clearly violate
                    for _ in 0..20_000 {
                        let x = env.state_box.sample(&mut rng);
                        let u = env.control_box.sample(&mut rng);
                        assert!(
                            !(critic.forward(&x, &u) < -1e-7 && env.constraint(&x) > 1e-7),
                            "sampled violation in certified instance"
                        );
                    }
                }
                VerdictStatus::Unknown => {}
            }
        }
        assert!(
            statuses.iter().any(|s| *s == VerdictStatus::Falsified),
            "expected at least one falsified random instance"
        );
    }

    #[test]
    fn verdict_round_trips_through_json() {
        let v = Verdict {
            kind: ConditionKind::Invariance,
            status: VerdictStatus::Unknown,
            counterexample: Some(CexRecord {
                x: vec![0.1, -0.2],
                u: vec![0.3],
                q: -0.5,
                violation: 0.25,
            }),
            boxes_explored: 42,
            boxes_pruned: 40,
            max_depth: 7,
            unresolved: 2,
        };
        let s = serde_json::to_string(&v).unwrap();
        let w: Verdict = serde_json::from_str(&s).unwrap();
        assert_eq!(w.status, VerdictStatus::Unknown);
        assert_eq!(w.kind, ConditionKind::Invariance);
        assert_eq!(w.counterexample.unwrap().x, vec![0.1, -0.2]);
        assert!(s.contains("\"invariance\"") && s.contains("\"unknown\""));
    }

    #[test]
    fn miqcp_export_counts_and_structure() {
        let env = di();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let critic = Critic::new_multiplicative(2, 1, &mut rng);
        let policy = PolicyNetwork::new(2, env.control_box.clone(), &mut rng);
        let task = VerifyTask {
            kind: ConditionKind::Constraint,
            critic: &critic,
            policy: &policy,
            env: &env,
        };
        let dir = std::env::temp_dir().join("hjc_miqcp_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("di_con.lp");
        let summary = export_miqcp(&task, &path).unwrap();

        let expected_unstable = match &critic {
            Critic::Multiplicative(q) => {
                qnet_bounds(q, &env.state_box, &env.control_box, BoundMethod::Interval)
                    .unstable_count()
            }
            _ => unreachable!(),
        };
        assert_eq!(summary.relu_binaries, expected_unstable);
        assert_eq!(summary.extra_binaries, 1);
        assert_eq!(summary.quad_terms, EMBED_DIM);

        let text = std::fs::read_to_string(&path).unwrap();
        for section in ["Minimize", "Subject To", "Bounds", "Binaries", "End"] {
            assert!(text.contains(section), "missing section {section}");
        }
        let listed = text
            .split("Binaries")
            .nth(1)
            .unwrap()
            .split("End")
            .next()
            .unwrap()
            .split_whitespace()
            .count();
        assert_eq!(listed, summary.relu_binaries + summary.extra_binaries);
        let quad_row = text.lines().find(|l| l.contains(" q - [ ")).unwrap();
        assert_eq!(quad_row.matches('*').count(), EMBED_DIM);
        assert!(text.lines().any(|l| l.contains("q <= 0")));
    }

    #[test]
    fn miqcp_export_invariance_and_unsupported() {
        let env = di();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let critic = Critic::new_multiplicative(2, 1, &mut rng);
        let policy = PolicyNetwork::new(2, env.control_box.clone(), &mut rng);
        let dir = std::env::temp_dir().join("hjc_miqcp_test");
        std::fs::create_dir_all(&dir).unwrap();
        let task = VerifyTask {
            kind: ConditionKind::Invariance,
            critic: &critic,
            policy: &policy,
            env: &env,
        };
        let summary = export_miqcp(&task, &dir.join("di_inv.lp")).unwrap();
        assert_eq!(summary.quad_terms, 2 * EMBED_DIM);
        let text = std::fs::read_to_string(dir.join("di_inv.lp")).unwrap();
        assert!(text.lines().any(|l| l.contains("n_q >= ")));
        assert!(text.lines().any(|l| l.contains("xn0 - x0 - 0.1 x1 = 0")));

        let arm = EnvSpec::robot_arm();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let critic = Critic::new_multiplicative(4, 2, &mut rng);
        let policy = PolicyNetwork::new(4, arm.control_box.clone(), &mut rng);
        let task = VerifyTask {
            kind: ConditionKind::Constraint,
            critic: &critic,
            policy: &policy,
            env: &arm,
        };
        assert!(export_miqcp(&task, &dir.join("arm.lp")).is_err());
    }

    #[test]
    fn oracle_signs_and_monotonicity_on_double_integrator() {
        let env = di();
        let grid = value_iteration_oracle(&env, 81, 11, 1e-9, 2000).unwrap();
        // everywhere V >= h
        for i in 0..grid.values.len() {
            let x = grid.node(i);
            assert!(grid.values[i] >= env.constraint(&x) - 1e-12);
        }
        // safe near the origin
        assert!(grid.lookup(&ndarray::array![0.0, 0.0]) < 0.0);
        // doomed: close to the wall at full speed towards it
        assert!(grid.lookup(&ndarray::array![0.85, 0.95]) > 0.0);
        // oracle rejects high-dimensional systems
        assert!(value_iteration_oracle(&EnvSpec::robot_arm(), 11, 3, 1e-6, 10).is_err());
    }
}
