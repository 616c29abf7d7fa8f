//! Monte Carlo check that certified thresholds keep the false-answer rate below target.

use abstain::riskctl::{
    monte_carlo_validity, Algorithm, PiecewiseRisk, ThresholdGrid, ValidityConfig,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let trials = std::env::args()
        .nth(1)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(500);
    let (delta, target) = (0.05, 0.1);
    let limit = delta + 3.0 * (delta * (1.0 - delta) / trials as f64).sqrt();
    println!("generator,algorithm,trials,selections,violation_rate,limit");
    for model in [
        PiecewiseRisk::monotone(),
        PiecewiseRisk::flat(0.08),
        PiecewiseRisk::non_monotone(),
    ] {
        for algorithm in [Algorithm::Bonferroni, Algorithm::Multistart { starts: 10 }] {
            let cfg = ValidityConfig {
                algorithm,
                grid: ThresholdGrid::default(),
                risk_target: target,
                delta,
                calibration_size: 1000,
                trials,
                seed: 0,
            };
            let s = monte_carlo_validity(&model, &cfg)?;
            println!(
                "{},{:?},{},{},{:.4},{limit:.4}",
                s.generator, s.algorithm, s.trials, s.selections, s.violation_rate
            );
        }
    }
    Ok(())
}
