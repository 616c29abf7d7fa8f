//! Offline end-to-end run: synthetic questions, synthetic agent, scoring and a report table.

use std::ops::ControlFlow;

use abstain::modelgw::{
    synthetic_question_set, uniform_knowledge, AgentPolicy, SyntheticAgentConfig,
};
use abstain::protocol::RewardConfig;
use abstain::runner::{
    completer_for, read_records, report, run_experiment, score_run, ModelSource, ReportFormat,
    RunConfig,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let set = synthetic_question_set(3000, 1);
    let mut scored = Vec::new();
    for (label, scheme, noise) in [
        ("A, calibrated", RewardConfig::scheme_a(1.0, 1.0), 0.0),
        ("B, calibrated", RewardConfig::scheme_b(1.0, 1.0, 0.4), 0.0),
        ("B, noisy", RewardConfig::scheme_b(1.0, 1.0, 0.4), 0.15),
    ] {
        let tau = abstain::decision::bayes_threshold(&scheme)?;
        let cfg = RunConfig {
            dataset: set.source().to_string(),
            scheme,
            model: ModelSource::Synthetic {
                agent: SyntheticAgentConfig {
                    knowledge: uniform_knowledge(&set, 1),
                    default_q_true: None,
                    confidence_noise: noise,
                    policy: AgentPolicy::BayesThreshold { tau },
                    seed: 1,
                    emit_logprobs: true,
                },
            },
            output: dir.path().join(format!("{}.jsonl", scored.len())),
            seed: 1,
            limit: None,
            fail_fast: false,
        };
        let completer = completer_for(&cfg)?;
        let summary = run_experiment(&cfg, &set, completer.as_ref(), &mut |_| {
            ControlFlow::Continue(())
        })?;
        eprintln!("{label}: {summary:?}");
        scored.push(score_run(
            &read_records(&cfg.output)?,
            &set,
            &cfg.scheme,
            label,
        )?);
    }
    print!("{}", report(&scored, ReportFormat::Table)?);
    Ok(())
}
