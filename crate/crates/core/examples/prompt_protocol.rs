//! Render the three prompt variants and parse model replies.

use abstain::dataset::QuestionRecord;
use abstain::protocol::{
    evaluated_answer, format_response, parse_response, render_prompt, FirstRound, RewardConfig,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let q = QuestionRecord::new("1", "What is George Rankin's occupation?", ["politician"])?;
    for cfg in [
        RewardConfig::pure_eval(),
        RewardConfig::scheme_a(1.0, 1.0),
        RewardConfig::scheme_b(1.0, 1.0, 0.4).with_norms(true),
    ] {
        println!(
            "===== {} =====\n{}\n",
            cfg.scheme.label(),
            render_prompt(&q, &cfg)?
        );
    }

    let replies = [
        "Answer: politician\nConfidence: 0.82",
        "**Answer:** I don't know\n**Confidence:**\n**Best Guess:** journalist\n**Best Guess Confidence:** 0.3",
        "Confidence: 1.7\nAnswer: lawyer",
        "I am not sure what you mean.",
    ];
    for raw in replies {
        let parsed = parse_response(raw);
        let eval = evaluated_answer(&parsed);
        println!(
            "{raw:?}\n  -> {:?} (clamped: {})\n  -> graded {:?} @ {:?} via {:?}",
            parsed.first_round, parsed.clamped, eval.answer, eval.confidence, eval.channel
        );
    }

    let canonical = format_response(&FirstRound::Abstained {
        best_guess: Some("journalist".into()),
        best_guess_confidence: Some(0.3),
    });
    println!("\ncanonical abstention:\n{canonical}");
    Ok(())
}
