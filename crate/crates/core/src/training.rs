//! Training: discounted pretraining, policy fitting, counterexample
//! fine-tuning.
//!
//! Pretraining is fitted value iteration on the discounted target
//! `(1 - gamma) h(x) + gamma * max(h(x), Q(x', pi(x')))` with a frozen target
//! copy of the critic, gamma annealed towards 1. The policy is trained to
//! minimize `Q(x, pi(x))`, making `Q(x', pi(x'))` a sound stand-in for
//! `min_u' Q(x', u')`. Fine-tuning pushes Q up at counterexamples while a
//! Bellman replay term anchors the rest of the landscape, which is what keeps
//! the zero-sublevel set from collapsing.

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::EnvSpec;
use crate::net::{
    accumulate_critic_grads, AdamState, Critic, CriticGrads, PolicyNetwork,
};
use crate::{CoreError, Result};

/// One environment interaction used as a regression sample.
#[derive(Debug, Clone)]
pub struct Transition {
    pub x: Array1<f64>,
    pub u: Array1<f64>,
    pub x_next: Array1<f64>,
    pub h_x: f64,
}

/// Linear discount annealing from `start` to `end` over `anneal_steps`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GammaSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal_steps: usize,
}

impl GammaSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if self.anneal_steps == 0 || step >= self.anneal_steps {
            return self.end;
        }
        let t = step as f64 / self.anneal_steps as f64;
        self.start + (self.end - self.start) * t
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gamma: GammaSchedule,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Weight of the counterexample losses during fine-tuning.
    pub cex_weight: f64,
    /// How many pretrain transitions are replayed as the anchor term.
    pub replay_capacity: usize,
    /// Optimizer steps between target-network refreshes.
    pub target_refresh: usize,
    /// Critic steps per fine-tune round.
    pub finetune_steps: usize,
    /// Policy optimizer steps (per train_policy call).
    pub policy_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: GammaSchedule {
                start: 0.85,
                end: 0.9999,
                anneal_steps: 0, // set from the run length by pretrain
            },
            lr: 1e-3,
            batch_size: 128,
            epochs: 40,
            seed: 0,
            cex_weight: 10.0,
            replay_capacity: 4096,
            target_refresh: 200,
            finetune_steps: 300,
            policy_steps: 1500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.start > 0.0 && self.gamma.start <= self.gamma.end && self.gamma.end < 1.0)
        {
            return Err(CoreError::Contract(
                "gamma schedule must satisfy 0 < start <= end < 1".into(),
            ));
        }
        if self.cex_weight < 0.0 {
            return Err(CoreError::Contract("cex_weight must be >= 0".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(CoreError::Contract("batch_size/epochs must be > 0".into()));
        }
        Ok(())
    }
}

/// A state-control pair violating one of the two conditions, with the
/// residuals observed when it was found.
#[derive(Debug, Clone)]
pub struct Counterexample {
    pub x: Array1<f64>,
    pub u: Array1<f64>,
    /// Q(x, u) at discovery time (negative).
    pub q: f64,
    /// The violation term at discovery time: h(x) for constraint
    /// satisfaction, the next-state Q lower-bound surrogate for invariance.
    pub residual: f64,
}

#[derive(Debug, Clone, Default)]
pub struct CounterexampleSet {
    pub con: Vec<Counterexample>,
    pub inv: Vec<Counterexample>,
}

impl CounterexampleSet {
    pub fn len(&self) -> usize {
        self.con.len() + self.inv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.con.is_empty() && self.inv.is_empty()
    }

    /// Drop items the current networks already handle with margin: a con
    /// item once Q >= margin, an inv item once Q >= margin or the policy
    /// surrogate at the next state is <= -margin.
    pub fn drop_repaired(
        &mut self,
        critic: &Critic,
        policy: &PolicyNetwork,
        env: &EnvSpec,
        margin: f64,
    ) {
        self.con
            .retain(|c| critic.forward(&c.x, &c.u) < margin && c.residual > 0.0);
        self.inv.retain(|c| {
            if critic.forward(&c.x, &c.u) >= margin {
                return false;
            }
            let xn = env.step(&c.x, &c.u).expect("stored cex dims");
            min_q_next(critic, policy, &xn) > -margin
        });
    }
}

/// Margin added to the stored constraint values of collected transitions.
/// Training against `h + TARGET_MARGIN` makes the fitted Q positive on a
/// neighborhood of the true violation set {h > 0}, so the certified
/// conditions hold with a geometric gap instead of touching exactly at the
/// h = 0 surface, where branch-and-bound could never prune. The learned safe
/// set shrinks by the margin, which the size bands absorb.
pub const TARGET_MARGIN: f64 = 0.05;

/// Sample transitions from uniform states with a 50/50 mix of behavior-policy
/// and uniform controls. The stream is deterministic per seed, and a shorter
/// collection is a prefix of a longer one with the same seed. Stored
/// constraint values carry [`TARGET_MARGIN`].
pub fn collect_transitions(
    env: &EnvSpec,
    behavior: Option<&PolicyNetwork>,
    n: usize,
    seed: u64,
) -> Vec<Transition> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x = env.state_box.sample(&mut rng);
            let use_policy = rng.gen_bool(0.5);
            let u = match behavior {
                Some(p) if use_policy => p.forward(&x),
                _ => env.control_box.sample(&mut rng),
            };
            let x_next = env.step(&x, &u).expect("sampled inside boxes");
            let h_x = env.constraint(&x) + TARGET_MARGIN;
            Transition { x, u, x_next, h_x }
        })
        .collect()
}

/// Approximation of `min_u' Q(x', u')` for the Bellman backup: the policy's
/// proposal plus the control-box center and corners. Bang-bang controls are
/// minimizers for the benchmark systems, so the corner sweep keeps the backup
/// meaningful even while the policy is still poor — bootstrapping through the
/// policy alone can inflate Q everywhere and collapse the safe set before the
/// policy gets any signal to improve.
pub fn min_q_control(
    net: &Critic,
    policy: &PolicyNetwork,
    x_next: &Array1<f64>,
) -> (Array1<f64>, f64) {
    let cb = &policy.control_box;
    let mut best_u = policy.forward(x_next);
    let mut best = net.forward(x_next, &best_u);
    let mut u = cb.center();
    let mut consider = |u: &Array1<f64>, best: &mut f64, best_u: &mut Array1<f64>| {
        let q = net.forward(x_next, u);
        if q < *best {
            *best = q;
            best_u.assign(u);
        }
    };
    consider(&u, &mut best, &mut best_u);
    let n = cb.dim();
    for mask in 0..(1usize << n) {
        for i in 0..n {
            u[i] = if mask >> i & 1 == 1 { cb.hi[i] } else { cb.lo[i] };
        }
        consider(&u, &mut best, &mut best_u);
    }
    (best_u, best)
}

fn min_q_next(net: &Critic, policy: &PolicyNetwork, x_next: &Array1<f64>) -> f64 {
    min_q_control(net, policy, x_next).1
}

/// The discounted regression target `(1-gamma) h + gamma max(h, q_next)`.
pub fn pretrain_target(h_x: f64, q_next: f64, gamma: f64) -> f64 {
    debug_assert!(gamma > 0.0 && gamma < 1.0);
    (1.0 - gamma) * h_x + gamma * h_x.max(q_next)
}

/// Fitted value iteration towards the discounted target. Returns per-epoch
/// mean squared Bellman residuals.
pub fn pretrain(
    critic: &mut Critic,
    policy: &PolicyNetwork,
    data: &[Transition],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(CoreError::Contract("pretrain needs nonempty data".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e3779b97f4a7c15);
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut gamma_sched = cfg.gamma;
    if gamma_sched.anneal_steps == 0 {
        gamma_sched.anneal_steps = total_steps / 2;
    }

    let mut adam = AdamState::new(critic.n_params(), cfg.lr);
    let mut target_net = critic.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let mut bad_epochs = 0usize;
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if step % cfg.target_refresh == 0 {
                target_net = critic.clone();
            }
            let gamma = gamma_sched.at(step);
            let mut grads = critic.zero_grads();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let t = &data[i];
                let q_next = min_q_next(&target_net, policy, &t.x_next);
                let target = pretrain_target(t.h_x, q_next, gamma);
                let q = critic.forward(&t.x, &t.u);
                let resid = q - target;
                batch_loss += resid * resid;
                let (g, _, _) = critic.backward(&t.x, &t.u, 2.0 * resid / chunk.len() as f64);
                accumulate_critic_grads(&mut grads, &g, 1.0);
            }
            let flat = Critic::flatten_critic_grads(&grads);
            let mut params = critic.flatten();
            adam.step(&mut params, &flat);
            critic.set_from_flat(&params);
            epoch_loss += batch_loss;
            count += chunk.len();
            step += 1;
        }
        let mean = epoch_loss / count as f64;
        curve.push(mean);
        // floor keeps benign target-shift wobbles near a fixed point from
        // counting as divergence
        if !mean.is_finite() || mean > 10.0 * curve[0].max(0.01) {
            bad_epochs += 1;
            if bad_epochs >= 3 {
                return Err(CoreError::Diverged(format!(
                    "epoch loss {mean} exceeds 10x initial {}",
                    curve[0]
                )));
            }
        } else {
            bad_epochs = 0;
        }
    }
    Ok(curve)
}

/// Gradient descent on mean Q(x, pi(x)) with the critic frozen. Returns the
/// per-step mean loss curve.
pub fn train_policy(
    policy: &mut PolicyNetwork,
    critic: &Critic,
    states: &[Array1<f64>],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if states.is_empty() {
        return Err(CoreError::Contract("train_policy needs states".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5851f42d4c957f2d);
    let mut adam = AdamState::new(policy.flatten().len(), cfg.lr);
    let mut curve = Vec::new();
    for _ in 0..cfg.policy_steps {
        let mut grads = crate::net::zero_like(&policy.net);
        let mut loss = 0.0;
        let bs = cfg.batch_size.min(states.len());
        for _ in 0..bs {
            let x = &states[rng.gen_range(0..states.len())];
            let u = policy.forward(x);
            loss += critic.forward(x, &u);
            let (_, _, du) = critic.backward(x, &u, 1.0 / bs as f64);
            let (g, _) = policy.backward(x, &du);
            crate::net::accumulate_grads(&mut grads, &g, 1.0);
        }
        let mut flat = Vec::new();
        crate::net::flatten_grads(&grads, &mut flat);
        let mut params = policy.flatten();
        adam.step(&mut params, &flat);
        policy.set_from_flat(&params);
        curve.push(loss / bs as f64);
    }
    Ok(curve)
}

/// Values and critic gradients of the two fine-tuning losses.
#[derive(Debug)]
pub struct FinetuneLosses {
    pub l_con: f64,
    pub l_inv: f64,
    pub grads: CriticGrads,
}

/// `L_con = -sum Q(x_con, u_con)`;
/// `L_inv = sum(-Q(x_inv, u_inv) + Q(f(x_inv, u_inv), u'))` where `u'` is the
/// best candidate control at the next state (the policy proposal or a
/// control-box corner/center, whichever minimizes Q) — judging repairs
/// through the policy alone punishes its approximation error and erodes the
/// safe set where a safe control exists but the policy misses it.
pub fn finetune_losses(
    critic: &Critic,
    policy: &PolicyNetwork,
    cex: &CounterexampleSet,
    env: &EnvSpec,
) -> Result<FinetuneLosses> {
    if cex.is_empty() {
        return Err(CoreError::Contract(
            "finetune_losses requires at least one counterexample".into(),
        ));
    }
    let mut grads = critic.zero_grads();
    let mut l_con = 0.0;
    for c in &cex.con {
        l_con -= critic.forward(&c.x, &c.u);
        let (g, _, _) = critic.backward(&c.x, &c.u, -1.0);
        accumulate_critic_grads(&mut grads, &g, 1.0);
    }
    let mut l_inv = 0.0;
    for c in &cex.inv {
        l_inv -= critic.forward(&c.x, &c.u);
        let (g, _, _) = critic.backward(&c.x, &c.u, -1.0);
        accumulate_critic_grads(&mut grads, &g, 1.0);
        let xn = env.step(&c.x, &c.u)?;
        let (un, q_next) = min_q_control(critic, policy, &xn);
        l_inv += q_next;
        let (g, _, _) = critic.backward(&xn, &un, 1.0);
        accumulate_critic_grads(&mut grads, &g, 1.0);
    }
    Ok(FinetuneLosses { l_con, l_inv, grads })
}

#[derive(Debug, Clone)]
pub struct FinetuneReport {
    /// Fraction of the round's counterexamples no longer violating.
    pub repair_rate: f64,
    /// Mean Bellman anchor loss over the round.
    pub anchor_loss: f64,
}

/// Margin used when deciding that a counterexample is repaired; keeping
/// items alive until Q clears this margin leaves slack for the verifier.
pub const REPAIR_MARGIN: f64 = 0.02;

/// Anchor targets closer to zero than this are skipped during fine-tuning;
/// see the comment at the anchor loop.
pub const ANCHOR_DEAD_BAND: f64 = 0.05;

/// One fine-tuning round: descend `cex_weight * (L_con + L_inv) + anchor
/// Bellman MSE` on the critic, then retrain the policy.
pub fn finetune_round(
    critic: &mut Critic,
    policy: &mut PolicyNetwork,
    cex: &CounterexampleSet,
    pretrain_data: &[Transition],
    env: &EnvSpec,
    cfg: &TrainConfig,
) -> Result<FinetuneReport> {
    cfg.validate()?;
    if cex.is_empty() {
        return Err(CoreError::Contract("finetune_round with no counterexamples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa24baed4963ee407);
    let replay: Vec<&Transition> = {
        let mut idx: Vec<usize> = (0..pretrain_data.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(cfg.replay_capacity);
        idx.into_iter().map(|i| &pretrain_data[i]).collect()
    };
    let gamma = cfg.gamma.end;
    let mut adam = AdamState::new(critic.n_params(), cfg.lr);
    let mut target_net = critic.clone();
    let mut anchor_sum = 0.0;
    for step in 0..cfg.finetune_steps {
        if step % cfg.target_refresh == 0 {
            target_net = critic.clone();
        }
        let mut grads = critic.zero_grads();
        // anchor: Bellman MSE on a replay minibatch
        let mut anchor = 0.0;
        if !replay.is_empty() {
            let bs = cfg.batch_size.min(replay.len());
            for _ in 0..bs {
                let t = replay[rng.gen_range(0..replay.len())];
                let target = pretrain_target(t.h_x, min_q_next(&target_net, policy, &t.x_next), gamma);
                // leave a dead band around the zero level set: the Bellman
                // fixed point has no certification margin there, so anchoring
                // it would undo exactly the surgery the counterexample terms
                // perform; everywhere else the anchor prevents collapse
                if target.abs() < ANCHOR_DEAD_BAND {
                    continue;
                }
                let q = critic.forward(&t.x, &t.u);
                let resid = q - target;
                anchor += resid * resid / bs as f64;
                let (g, _, _) = critic.backward(&t.x, &t.u, 2.0 * resid / bs as f64);
                accumulate_critic_grads(&mut grads, &g, 1.0);
            }
        }
        anchor_sum += anchor;
        // counterexample terms, restricted each step to items that still
        // violate: once an item clears the margin the push stops, otherwise
        // the unbounded linear losses blow the critic up far from the data
        let mut active = CounterexampleSet::default();
        active.con = cex
            .con
            .iter()
            .filter(|c| critic.forward(&c.x, &c.u) < REPAIR_MARGIN)
            .cloned()
            .collect();
        active.inv = cex
            .inv
            .iter()
            .filter(|c| {
                if critic.forward(&c.x, &c.u) >= REPAIR_MARGIN {
                    return false;
                }
                let xn = env.step(&c.x, &c.u).expect("stored cex dims");
                min_q_next(critic, policy, &xn) > -REPAIR_MARGIN
            })
            .cloned()
            .collect();
        if !active.is_empty() {
            let fl = finetune_losses(critic, policy, &active, env)?;
            accumulate_critic_grads(&mut grads, &fl.grads, cfg.cex_weight / active.len() as f64);
        }
        let flat = Critic::flatten_critic_grads(&grads);
        let mut params = critic.flatten();
        adam.step(&mut params, &flat);
        critic.set_from_flat(&params);
    }
    // refresh the policy against the updated critic
    let states: Vec<Array1<f64>> = (0..2048).map(|_| env.state_box.sample(&mut rng)).collect();
    let mut pcfg = cfg.clone();
    pcfg.policy_steps = cfg.policy_steps / 3 + 1;
    train_policy(policy, critic, &states, &pcfg)?;

    // measure repairs
    let mut repaired = 0usize;
    for c in &cex.con {
        if critic.forward(&c.x, &c.u) >= 0.0 {
            repaired += 1;
        }
    }
    for c in &cex.inv {
        let q = critic.forward(&c.x, &c.u);
        let xn = env.step(&c.x, &c.u)?;
        let qn = critic.forward(&xn, &policy.forward(&xn));
        if q >= 0.0 || qn <= 0.0 {
            repaired += 1;
        }
    }
    Ok(FinetuneReport {
        repair_rate: repaired as f64 / cex.len() as f64,
        anchor_loss: anchor_sum / cfg.finetune_steps.max(1) as f64,
    })
}
