//! Headline metrics from aggregate counts, plus calibration error on synthetic scores.

use abstain::metrics::{
    aer, brier, ece, far_answered, far_overall, prf_bridge, reliability_bins,
    total_reward_from_counts, wald_ci, OutcomeCounts,
};
use abstain::protocol::RewardConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // total, answered, wrong among answered, wrong under forced answering
    let c = OutcomeCounts::from_table(14267, 11982, 5771, 7824);
    let fa = far_answered(&c)?;
    println!(
        "FAR(answered) = {fa:.4} ± {:.4}",
        wald_ci(fa, c.n_answered, 0.95)?
    );
    println!("FAR(overall)  = {:.4}", far_overall(&c)?);
    println!("AER           = {:.4}", aer(&c)?);
    println!(
        "reward (A)    = {}",
        total_reward_from_counts(&c, &RewardConfig::scheme_a(1.0, 1.0))?
    );
    let p = prf_bridge(fa, c.n_answered as f64 / c.n_total as f64);
    println!(
        "P/R/F1        = {:.1} / {:.1} / {:.1}",
        100.0 * p.precision,
        100.0 * p.recall,
        100.0 * p.f1
    );

    // an overconfident reporter: states p, is right with probability p^2
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scores: Vec<(f64, bool)> = (0..5000)
        .map(|_| {
            let p: f64 = rng.gen();
            (p, rng.gen_bool(p * p))
        })
        .collect();
    println!(
        "\nBrier {:.4}  ECE {:.4}",
        brier(&scores)?,
        ece(&scores, 10)?
    );
    for b in reliability_bins(&scores, 10)? {
        println!("  {b:?}");
    }
    Ok(())
}
