//! Benchmarks for the hot paths: network evaluation and gradients, output
//! bounds over boxes, box decisions inside branch-and-bound, and training
//! step throughput.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use hjc_core::bounds::{critic_bounds, BoundMethod};
use hjc_core::envs::EnvSpec;
use hjc_core::net::{Critic, PolicyNetwork};
use hjc_core::training::{collect_transitions, pretrain, TrainConfig};
use hjc_core::verifier::{certify, BnBConfig, ConditionKind, VerifyTask};
use hjc_core::Hyperbox;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup(seed: u64) -> (EnvSpec, Critic, PolicyNetwork) {
    let env = EnvSpec::double_integrator();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let critic = Critic::new_multiplicative(env.state_dim, env.control_dim, &mut rng);
    let policy = PolicyNetwork::new(env.state_dim, env.control_box.clone(), &mut rng);
    (env, critic, policy)
}

fn bench_network(c: &mut Criterion) {
    let (env, critic, _) = setup(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = env.state_box.sample(&mut rng);
    let u = env.control_box.sample(&mut rng);
    c.bench_function("critic_forward", |b| b.iter(|| critic.forward(&x, &u)));
    c.bench_function("critic_backward", |b| b.iter(|| critic.backward(&x, &u, 1.0)));
}

fn bench_bounds(c: &mut Criterion) {
    let (env, critic, _) = setup(3);
    let x_box = Hyperbox::from_slices(&[0.1, -0.3], &[0.4, 0.1]);
    let u_box = env.control_box.clone();
    c.bench_function("bounds_interval", |b| {
        b.iter(|| critic_bounds(&critic, &x_box, &u_box, BoundMethod::Interval))
    });
    c.bench_function("bounds_linear_mccormick", |b| {
        b.iter(|| critic_bounds(&critic, &x_box, &u_box, BoundMethod::LinearMccormick))
    });
}

fn bench_certify(c: &mut Criterion) {
    let (env, critic, policy) = setup(4);
    let cfg = BnBConfig { max_boxes: 2_000, attack_restarts: 4, ..Default::default() };
    c.bench_function("certify_constraint_2k_boxes", |b| {
        b.iter(|| {
            let task = VerifyTask {
                kind: ConditionKind::Constraint,
                critic: &critic,
                policy: &policy,
                env: &env,
            };
            certify(&task, &cfg)
        })
    });
}

fn bench_training(c: &mut Criterion) {
    let (env, critic, policy) = setup(5);
    let data = collect_transitions(&env, None, 1024, 6);
    let cfg = TrainConfig { epochs: 1, ..Default::default() };
    c.bench_function("pretrain_epoch_1k", |b| {
        b.iter_batched(
            || critic.clone(),
            |mut critic| pretrain(&mut critic, &policy, &data, &cfg).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_network, bench_bounds, bench_certify, bench_training
}
criterion_main!(benches);
