//! Evaluation results do not depend on the worker count.

use tidyhome_core::eval::{run_phase, ModelSpec, Phase, RunSpec};
use tidyhome_core::fixtures::FixtureSet;

fn run(phase: Phase, jobs: usize) -> (String, String) {
    let mut spec = RunSpec::new(
        phase,
        vec![ModelSpec::scripted("qwen_like", "qwen_like"), ModelSpec::scripted("llama_like", "llama_like")],
    );
    spec.ablation = phase == Phase::KnowledgeBase;
    spec.jobs = jobs;
    let report = run_phase(&spec, &FixtureSet::builtin()).unwrap();
    (report.to_json(), report.to_csv().unwrap())
}

#[test]
fn sequential_and_parallel_runs_are_byte_identical() {
    for phase in Phase::ALL {
        let seq = run(phase, 1);
        assert_eq!(seq, run(phase, 0), "{phase:?} default pool");
        assert_eq!(seq, run(phase, 3), "{phase:?} three workers");
    }
}

#[test]
fn shipped_scripts_score_as_documented() {
    let csv = run(Phase::KnowledgeBase, 0).1;
    assert!(csv.contains("knowledge_base,qwen_like,total,with_rag,"), "{csv}");
    let total = |model: &str, metric: &str| {
        csv.lines()
            .find(|l| l.starts_with(&format!("knowledge_base,{model},total,{metric},")))
            .and_then(|l| l.rsplit(',').next())
            .unwrap()
            .to_string()
    };
    assert_eq!(total("qwen_like", "with_rag"), "93.8");
    assert_eq!(total("qwen_like", "without_rag"), "56.3");
    assert_eq!(total("llama_like", "with_rag"), "50.0");
    assert_eq!(total("llama_like", "without_rag"), "25.0");
}
