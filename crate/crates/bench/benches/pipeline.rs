use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use memtrack::featnet::{self, FeatNetParams};
use memtrack::synthetic::{self, Tier};
use memtrack::trainer::{self, OptimizerState};
use memtrack::{tracker, Config, Graph, Model, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn extract(c: &mut Criterion) {
    let cfg = Config::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = FeatNetParams::init(&cfg.featnet, &mut rng);
    let s = cfg.featnet.search_size;
    let patch = Tensor::from_fn([s, s, 3], |_| rng.random_range(0.0..1.0f32));
    c.bench_function("featnet_extract_search", |b| {
        b.iter(|| {
            let g = Graph::<f32>::new();
            let pv = params.map(&mut |t| g.constant(t.clone()));
            featnet::extract(&g, &cfg.featnet, &pv, g.constant(patch.clone())).unwrap()
        })
    });
}

fn track(c: &mut Criterion) {
    let model = Model::new(Config::default()).unwrap();
    let seq = synthetic::generate(&synthetic::tier_spec(Tier::Easy, 0, 40), "easy").unwrap();
    let start = tracker::init(&model, &seq.frames[0], seq.truth[0]).unwrap();
    c.bench_function("tracker_step", |b| {
        let mut i = 0;
        b.iter_batched(
            || start.clone(),
            |mut state| {
                i = i % (seq.frames.len() - 1) + 1;
                tracker::step(&model, &mut state, &seq.frames[i]).unwrap()
            },
            BatchSize::SmallInput,
        )
    });
}

fn train(c: &mut Criterion) {
    let mut cfg = Config::default();
    cfg.train.batch = 1;
    let video = synthetic::generate(&synthetic::tier_spec(Tier::Drift, 1, 24), "drift").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let clip = trainer::sample_clip(&video, &cfg, &mut rng).unwrap();
    let mut model = Model::new(cfg).unwrap();
    let mut opt = OptimizerState::new(&model.params);
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("train_step_one_clip", |b| {
        let mut step = 0;
        b.iter(|| {
            step += 1;
            trainer::train_step(&mut model, &mut opt, std::slice::from_ref(&clip), step).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, extract, track, train);
criterion_main!(benches);
