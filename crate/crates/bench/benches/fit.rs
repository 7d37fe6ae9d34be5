use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fsa_core::synth::{gen_classification, SynthConfig};
use fsa_core::{fit, Hyperparams, LossKind, LossSpec, Schedule};

fn fits(c: &mut Criterion) {
    let mut g = c.benchmark_group("fit_logistic");
    g.sample_size(10);
    for m in [200, 1000] {
        let data = gen_classification(&SynthConfig::new(1000, m, 10, 3)).unwrap();
        let spec = LossSpec::new(LossKind::Logistic);
        let hp = Hyperparams::new(1.0, 300, 100.0, 10);
        let sched = Schedule::new(m, 10, 100.0, 300).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(m), &data, |b, d| {
            b.iter(|| fit(d, &spec, &hp, &sched).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, fits);
criterion_main!(benches);
