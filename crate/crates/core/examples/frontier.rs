//! Coverage and false-answer rate of the Bayes policy as the abstention credit grows.

use abstain::decision::{simulate_frontier, write_frontier_csv, BeliefModel, Calibration};
use abstain::protocol::RewardConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let configs: Vec<RewardConfig> = (0..=10)
        .map(|i| RewardConfig::scheme_b(1.0, 1.0, i as f64 / 10.0))
        .collect();
    let models = [
        ("uniform", BeliefModel::uniform()),
        ("beta(2,5)", BeliefModel::beta(2.0, 5.0)),
        (
            "uniform, overconfident",
            BeliefModel::uniform().with_calibration(Calibration::Power { exponent: 0.5 }),
        ),
    ];
    for (name, model) in models {
        println!("# {name}");
        let rows = simulate_frontier(&model, &configs, 200_000, 7)?;
        write_frontier_csv(&rows, std::io::stdout().lock())?;
    }
    Ok(())
}
