use criterion::{criterion_group, criterion_main, Criterion};
use edgestream::sim::experiments::builtin;
use edgestream::sim::run_scenario;

fn scenarios(c: &mut Criterion) {
    let mut g = c.benchmark_group("sim");
    g.sample_size(10);
    for name in ["table4_reaction", "fig7_scaling", "topology3_activity"] {
        let s = builtin(name).unwrap();
        g.bench_function(name, |b| b.iter(|| run_scenario(&s).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, scenarios);
criterion_main!(benches);
