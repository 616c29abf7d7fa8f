//! Certify a confidence threshold with both selection procedures, then check it on held-out data.

use abstain::riskctl::{
    split_calibration, validate_threshold, Algorithm, CalibrationPoint, ThresholdGrid,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // error probability rises with uncertainty u = 1 - confidence
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let points: Vec<CalibrationPoint> = (0..20_000)
        .map(|_| {
            let u: f64 = rng.gen();
            CalibrationPoint::new(u, rng.gen_bool(0.05 + 0.6 * u * u))
        })
        .collect::<Result<_, _>>()?;

    let (cal, val) = split_calibration(&points, 0.2, 0)?;
    let grid = ThresholdGrid::default();
    for alg in [Algorithm::Bonferroni, Algorithm::Multistart { starts: 10 }] {
        let t = alg.select(&cal, &grid, 0.1, 0.05)?;
        let v = validate_threshold(&val, &t);
        println!(
            "{alg:?}: u_hat {:?}, answer when confidence >= {:?}; validation accepts {:.3} with CFAR {:?}",
            t.u_hat(),
            t.confidence_threshold(),
            v.acceptance_rate,
            v.validation_cfar
        );
    }
    Ok(())
}
