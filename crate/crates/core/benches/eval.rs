use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use tidyhome_core::eval::{run_phase, ModelSpec, Phase, RunSpec};
use tidyhome_core::fixtures::FixtureSet;

fn bench_phases(c: &mut Criterion) {
    let fixtures = FixtureSet::builtin();
    let mut group = c.benchmark_group("eval_phase");
    group.sample_size(20);
    for phase in Phase::ALL {
        for (label, jobs) in [("sequential", 1usize), ("parallel", 0)] {
            let mut spec = RunSpec::new(
                phase,
                vec![ModelSpec::scripted("qwen_like", "qwen_like"), ModelSpec::scripted("llama_like", "llama_like")],
            );
            spec.ablation = phase == Phase::KnowledgeBase;
            spec.repetitions = 20;
            spec.jobs = jobs;
            group.bench_with_input(BenchmarkId::new(label, phase.as_str()), &spec, |b, spec| {
                b.iter(|| run_phase(spec, &fixtures).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, bench_phases);
criterion_main!(benches);
