//! Episode construction and meta-gradient evaluation, single-threaded versus
//! the default thread pool. Build with `--no-default-features` to measure the
//! sequential fallback instead.

use criterion::{criterion_group, criterion_main, Criterion};

use meta_debias::meta::{meta_step, MetaConfig};
use meta_debias::splitter::{build_episode, SplitConfig};
use meta_debias::synth::{featurize, generate_biased_dataset, SynthConfig, ToyModel};
use meta_debias::triplet::VideoSample;

fn fixture() -> (meta_debias::synth::SynthTask, SplitConfig) {
    let task = generate_biased_dataset(&SynthConfig {
        n_videos: 600,
        triplets_per_video: 6,
        ..SynthConfig::default()
    })
    .unwrap();
    let split = SplitConfig {
        query_size: 20,
        ..SplitConfig::default()
    };
    (task, split)
}

fn run_with_threads(threads: Option<usize>, f: impl FnOnce() + Send) {
    #[cfg(feature = "parallel")]
    {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            builder = builder.num_threads(n);
        }
        builder.build().unwrap().install(f);
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f();
    }
}

fn variants() -> Vec<(&'static str, Option<usize>)> {
    if meta_debias::par::is_parallel() {
        vec![("one-thread", Some(1)), ("pool", None)]
    } else {
        vec![("sequential", None)]
    }
}

fn bench_episode(c: &mut Criterion) {
    let (task, split) = fixture();
    let mut group = c.benchmark_group("build_episode");
    for (name, threads) in variants() {
        group.bench_function(name, |b| {
            run_with_threads(threads, || b.iter(|| build_episode(&task.train, &split, 0).unwrap()));
        });
    }
    group.finish();
}

fn bench_meta_step(c: &mut Criterion) {
    let (task, split) = fixture();
    let episode = build_episode(&task.train, &split, 0).unwrap();
    let model = ToyModel::for_config(&task.config);
    let d = task.config.feature_dim;
    let support: Vec<&VideoSample> = task.train.lookup(&episode.support_ids[..40]).unwrap();
    let support = featurize(&support, d).unwrap();
    let queries: Vec<_> = episode
        .query_sets
        .iter()
        .map(|q| featurize(&task.train.lookup(&q.videos).unwrap(), d).unwrap())
        .collect();
    let refs: Vec<_> = queries.iter().collect();
    let w = model.init_params(0, 0.1);
    let cfg = MetaConfig::default();

    let mut group = c.benchmark_group("meta_step");
    for (name, threads) in variants() {
        group.bench_function(name, |b| {
            run_with_threads(threads, || b.iter(|| meta_step(&model, &w, &support, &refs, &cfg).unwrap()));
        });
    }
    group.finish();
}

criterion_group!(benches, bench_episode, bench_meta_step);
criterion_main!(benches);
