use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use demolearn::backbone::Backbone;
use demolearn::corpus::synthetic::{generate, SyntheticConfig};
use demolearn::losses::{LossWeights, ObjectiveTerms};
use demolearn::parallel::{self, Execution};
use demolearn::pipeline::{Experiment, LabelMode};
use demolearn::retrieval::{EncodedPool, HashedBowEncoder, Selector};
use demolearn::templating::{EncodedInput, Template};
use demolearn::training::{batch_gradient, split_for_seed, TrainConfig};

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn experiment() -> Experiment {
    let task = generate(&SyntheticConfig::default()).unwrap();
    Experiment::new(
        task.spec,
        Template::parse("{a} it was {mask} .").unwrap(),
        vec!["terrible".into(), "great".into()],
        task.pool,
        task.test,
    )
    .unwrap()
}

fn batch_gradients(c: &mut Criterion) {
    let exp = experiment();
    let split = split_for_seed(&exp, 16, 13).unwrap();
    let prep = exp
        .prepare(&split, Selector::Retrieved, LabelMode::Gold, 13, 128)
        .unwrap();
    let batch: Vec<&EncodedInput> = prep.train.iter().take(16).collect();
    let cfg = TrainConfig::default();
    let bb = Backbone::new(cfg.backbone_config(exp.tokenizer.vocab_size(), 128)).unwrap();
    let weights = LossWeights::default();

    let mut group = c.benchmark_group("batch_gradient_16");
    for (name, mode) in MODES {
        group.bench_function(name, |b| {
            parallel::set_execution(Some(mode));
            b.iter(|| {
                batch_gradient(
                    &bb,
                    black_box(&batch),
                    &exp.verbalizer,
                    &weights,
                    ObjectiveTerms::FULL,
                    None,
                )
                .unwrap()
            });
        });
    }
    group.finish();
    parallel::set_execution(None);
}

fn retrieval(c: &mut Criterion) {
    let task = generate(&SyntheticConfig {
        pool_size: 2000,
        test_size: 500,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let encoder = HashedBowEncoder::default();
    let mut group = c.benchmark_group("retrieval");
    for (name, mode) in MODES {
        group.bench_with_input(
            BenchmarkId::new("select_all_500", name),
            &mode,
            |b, &mode| {
                parallel::set_execution(Some(mode));
                let pool = EncodedPool::new(&task.pool, 2, &encoder);
                b.iter(|| {
                    pool.select_all(black_box(&task.test), Selector::Retrieved, &encoder, 0)
                        .unwrap()
                });
            },
        );
    }
    group.finish();
    parallel::set_execution(None);
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = batch_gradients, retrieval
}
criterion_main!(benches);
