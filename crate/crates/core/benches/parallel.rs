use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};

use isac_drl::baselines::MrtPolicy;
use isac_drl::env::{feature_len, EnvConfig, Normalizer};
use isac_drl::par::Execution;
use isac_drl::rollout::{eval_positions, evaluate};
use isac_drl::scenario::{Scenario, ScenarioConfig};

fn rollouts(c: &mut Criterion) {
    let cfg = ScenarioConfig::table_defaults(39e9);
    let policy = MrtPolicy { p_max: cfg.p_max };
    let normalizer = Normalizer::new(feature_len(cfg.n_tx, cfg.n_users), 0);
    let scenario = Arc::new(Scenario::new(cfg).unwrap());
    let env_cfg = EnvConfig {
        rho: 0.2,
        steps_per_episode: 20,
        normalizer_warmup: 0,
    };
    let positions = eval_positions(64, 5000);
    let mut group = c.benchmark_group("evaluate_64_episodes");
    for (name, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
        group.bench_function(name, |b| {
            b.iter(|| evaluate(&policy, &scenario, env_cfg, &normalizer, &positions, 0, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = rollouts
}
criterion_main!(benches);
