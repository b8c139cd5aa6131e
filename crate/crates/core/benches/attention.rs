use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ctarnn::cta::{flat_global_attention, CtaParams};
use ctarnn::data::Dataset;
use ctarnn::features::synth::{generate_with, SynthSpec};
use ctarnn::layers::MhsaParams;
use ctarnn::model::{Model, ModelConfig};
use ctarnn::par::Execution;
use ctarnn::trainer::evaluate;
use ctarnn::{Graph, Mask, ParamSet, Tensor};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn spec() -> SynthSpec {
    SynthSpec {
        n_classes: 4,
        n_channels: 4,
        d_e: 8,
        n_sessions: 2,
        speakers_per_session: 2,
        utterances_per_speaker: 16,
        ..SynthSpec::default()
    }
}

fn synth(c: &mut Criterion) {
    let mut group = c.benchmark_group("synth");
    for (name, exec) in MODES {
        group.bench_function(name, |b| b.iter(|| generate_with(&spec(), exec).unwrap()));
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let corpus = generate_with(&spec(), Execution::Sequential).unwrap();
    let ds = Dataset::from_synth(&corpus);
    let cfg = ModelConfig {
        hidden: 16,
        layers: 1,
        heads: 2,
        head_dim: 8,
        ..ModelConfig::default()
    };
    let (model, params): (Model, ParamSet<f32>) = Model::build(&cfg, &ds.stream_dims().unwrap(), 4, 0).unwrap();
    let all: Vec<usize> = (0..ds.len()).collect();
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(name, |b| b.iter(|| evaluate(&model, &params, &ds, &all, 8, exec).unwrap()));
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let (m, d, heads, head_dim, batch) = (100, 32, 2, 32, 4);
    let mut group = c.benchmark_group("attend");
    group.sample_size(10);
    for n in [4, 8, 16] {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let mut ps = ParamSet::new();
        let cta = CtaParams::new(&mut ps, "cta", d, heads, head_dim, &mut rng);
        let mhsa = MhsaParams::new(&mut ps, "flat", d, heads, head_dim, &mut rng);
        let h = Tensor::<f32>::uniform([batch, n, m, d], -1.0, 1.0, &mut rng);
        let mask = Mask::all([batch, m]);
        group.bench_with_input(BenchmarkId::new("cta", n), &n, |b, _| {
            b.iter(|| {
                let mut g = Graph::new();
                let bound = ps.bind_constant(&mut g);
                let hv = g.constant(h.clone());
                cta.attend(&mut g, &bound, hv, &mask).unwrap().v
            })
        });
        group.bench_with_input(BenchmarkId::new("flat", n), &n, |b, _| {
            b.iter(|| {
                let mut g = Graph::new();
                let bound = ps.bind_constant(&mut g);
                let hv = g.constant(h.clone());
                flat_global_attention(&mut g, &bound, hv, &mask, &mhsa).unwrap().v
            })
        });
    }
    group.finish();
}

criterion_group!(benches, synth, evaluation, attention);
criterion_main!(benches);
