//! The answer-or-abstain payoff model: Bayes threshold, expected utilities,
//! and a frontier simulator over populations of agent beliefs.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{ProtocolError, RewardConfig, Scheme};
use crate::riskctl::split_seed;
use crate::special::reg_inc_beta;

#[derive(Debug, Error, PartialEq)]
pub enum DecisionError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

type Result<T> = std::result::Result<T, DecisionError>;

fn triple(cfg: &RewardConfig) -> Result<(f64, f64, f64)> {
    if cfg.scheme == Scheme::PureEval {
        return Err(DecisionError::InvalidConfig(
            "Pure Eval announces no payoffs".into(),
        ));
    }
    cfg.validate()?;
    let (r, b, g) = (
        cfg.reward_correct,
        cfg.penalty_incorrect,
        cfg.abstain_reward(),
    );
    if !(r > 0.0 && b >= 0.0 && g >= 0.0) {
        return Err(DecisionError::InvalidConfig(format!(
            "need R > 0, β ≥ 0, γ ≥ 0; got ({r}, {b}, {g})"
        )));
    }
    Ok((r, b, g))
}

/// `τ = (γ + β) / (R + β)`. Above 1 means always abstain; at or below 0, always answer.
pub fn bayes_threshold(cfg: &RewardConfig) -> Result<f64> {
    let (r, b, g) = triple(cfg)?;
    Ok((g + b) / (r + b))
}

/// `(U_ans, U_abstain) = ((R + β)p − β, γ)`.
pub fn expected_utilities(p: f64, cfg: &RewardConfig) -> Result<(f64, f64)> {
    let (r, b, g) = triple(cfg)?;
    Ok(((r + b) * p - b, g))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Answer,
    Abstain,
}

/// Answer iff `p ≥ τ`; ties answer.
pub fn optimal_action(p: f64, cfg: &RewardConfig) -> Result<Action> {
    Ok(action_at(p, bayes_threshold(cfg)?))
}

fn action_at(p: f64, tau: f64) -> Action {
    if p >= tau {
        Action::Answer
    } else {
        Action::Abstain
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BeliefDistribution {
    Uniform,
    Beta { a: f64, b: f64 },
    Empirical { values: Vec<f64> },
}

/// Monotone map from true correctness probability to reported confidence.
/// Correctness always resolves on the true probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Calibration {
    Identity,
    /// `c = p^k`; `k < 1` overstates confidence.
    Power {
        exponent: f64,
    },
    /// `c = clamp(p + shift, 0, 1)`.
    Shift {
        shift: f64,
    },
}

impl Calibration {
    pub fn report(&self, p: f64) -> f64 {
        match *self {
            Calibration::Identity => p,
            Calibration::Power { exponent } => p.powf(exponent),
            Calibration::Shift { shift } => (p + shift).clamp(0.0, 1.0),
        }
    }

    /// Smallest true `p` whose report clears `tau`, as a cut in belief space:
    /// `≤ 0` answers everything, `> 1` nothing.
    fn belief_cut(&self, tau: f64) -> f64 {
        if tau <= 0.0 {
            return f64::NEG_INFINITY;
        }
        if tau > 1.0 {
            return f64::INFINITY;
        }
        match *self {
            Calibration::Identity => tau,
            Calibration::Power { exponent } => tau.powf(1.0 / exponent),
            Calibration::Shift { shift } => tau - shift,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefModel {
    pub distribution: BeliefDistribution,
    pub calibration: Calibration,
}

impl BeliefModel {
    pub fn uniform() -> Self {
        Self {
            distribution: BeliefDistribution::Uniform,
            calibration: Calibration::Identity,
        }
    }

    pub fn beta(a: f64, b: f64) -> Self {
        Self {
            distribution: BeliefDistribution::Beta { a, b },
            calibration: Calibration::Identity,
        }
    }

    pub fn empirical(values: Vec<f64>) -> Self {
        Self {
            distribution: BeliefDistribution::Empirical { values },
            calibration: Calibration::Identity,
        }
    }

    pub fn with_calibration(mut self, calibration: Calibration) -> Self {
        self.calibration = calibration;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match &self.distribution {
            BeliefDistribution::Uniform => {}
            BeliefDistribution::Beta { a, b } => {
                if !(*a > 0.0 && *b > 0.0 && a.is_finite() && b.is_finite()) {
                    return Err(DecisionError::InvalidConfig(
                        "beta parameters must be positive".into(),
                    ));
                }
            }
            BeliefDistribution::Empirical { values } => {
                if values.is_empty() || values.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(DecisionError::InvalidConfig(
                        "empirical beliefs must be a nonempty list in [0, 1]".into(),
                    ));
                }
            }
        }
        match self.calibration {
            Calibration::Power { exponent } if !(exponent > 0.0 && exponent.is_finite()) => Err(
                DecisionError::InvalidConfig("power exponent must be positive".into()),
            ),
            Calibration::Shift { shift } if !shift.is_finite() => {
                Err(DecisionError::InvalidConfig("shift must be finite".into()))
            }
            _ => Ok(()),
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match &self.distribution {
            BeliefDistribution::Uniform => rng.gen(),
            BeliefDistribution::Beta { a, b } => Beta::new(*a, *b).expect("validated").sample(rng),
            BeliefDistribution::Empirical { values } => values[rng.gen_range(0..values.len())],
        }
    }

    /// `(Pr(p ≥ t), E[p · 1{p ≥ t}])` for a belief-space cut `t ∈ [0, 1]`.
    fn tail_moments(&self, t: f64) -> Option<(f64, f64)> {
        match &self.distribution {
            BeliefDistribution::Uniform => Some((1.0 - t, (1.0 - t * t) / 2.0)),
            BeliefDistribution::Beta { a, b } => {
                let mass = 1.0 - reg_inc_beta(t, *a, *b).ok()?;
                let mean = a / (a + b) * (1.0 - reg_inc_beta(t, a + 1.0, *b).ok()?);
                Some((mass, mean))
            }
            BeliefDistribution::Empirical { values } => {
                let n = values.len() as f64;
                let kept = values.iter().filter(|&&p| p >= t);
                let (count, sum) = kept.fold((0.0, 0.0), |(c, s), p| (c + 1.0, s + p));
                Some((count / n, sum / n))
            }
        }
    }
}

/// Population-level result of thresholding reported confidence at `tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frontier {
    pub coverage: f64,
    /// Absent when nothing is answered.
    pub far_answered: Option<f64>,
    /// Mean payoff per question.
    pub expected_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutcome {
    pub tau: f64,
    pub reward: f64,
    pub penalty: f64,
    pub abstain: f64,
    pub samples: u64,
    pub simulated: Frontier,
    /// Exact population values when the belief model admits them.
    pub closed_form: Option<Frontier>,
}

/// Exact frontier point for `model` under threshold `tau` and payoffs `(R, β, γ)`.
pub fn closed_form_frontier(
    model: &BeliefModel,
    tau: f64,
    r: f64,
    b: f64,
    g: f64,
) -> Option<Frontier> {
    let cut = model.calibration.belief_cut(tau);
    let (mass, mean) = if cut > 1.0 {
        (0.0, 0.0)
    } else if let BeliefDistribution::Empirical { values } = &model.distribution {
        // exact on the actual reports, so clamping at the ends cannot disagree
        let n = values.len() as f64;
        let kept = values
            .iter()
            .filter(|&&p| model.calibration.report(p) >= tau);
        let (c, s) = kept.fold((0.0, 0.0), |(c, s), p| (c + 1.0, s + p));
        (c / n, s / n)
    } else {
        model.tail_moments(cut.clamp(0.0, 1.0))?
    };
    Some(Frontier {
        coverage: mass,
        far_answered: (mass > 0.0).then(|| ((mass - mean) / mass).max(0.0)),
        expected_reward: r * mean - b * (mass - mean) + g * (1.0 - mass),
    })
}

const BLOCK: u64 = 4096;

/// Draws `samples` beliefs per config, answers when the reported confidence
/// clears the Bayes threshold, and resolves correctness on the true belief.
///
/// Sampling runs in fixed blocks with split seeds, so results do not depend
/// on the thread count.
pub fn simulate_frontier(
    model: &BeliefModel,
    configs: &[RewardConfig],
    samples: u64,
    seed: u64,
) -> Result<Vec<PolicyOutcome>> {
    model.validate()?;
    if samples == 0 {
        return Err(DecisionError::InvalidConfig(
            "samples must be at least 1".into(),
        ));
    }
    configs
        .iter()
        .enumerate()
        .map(|(ci, cfg)| {
            let (r, b, g) = triple(cfg)?;
            let tau = (g + b) / (r + b);
            let blocks = samples.div_ceil(BLOCK);
            let (answered, wrong, total) = (0..blocks)
                .into_par_iter()
                .map(|blk| {
                    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(
                        seed ^ split_seed(ci as u64, u64::MAX),
                        blk,
                    ));
                    let n = BLOCK.min(samples - blk * BLOCK);
                    let (mut ans, mut wr, mut pay) = (0u64, 0u64, 0.0f64);
                    for _ in 0..n {
                        let p = model.sample(&mut rng);
                        let correct = rng.gen::<f64>() < p;
                        match action_at(model.calibration.report(p), tau) {
                            Action::Answer => {
                                ans += 1;
                                if correct {
                                    pay += r;
                                } else {
                                    wr += 1;
                                    pay -= b;
                                }
                            }
                            Action::Abstain => pay += g,
                        }
                    }
                    (ans, wr, pay)
                })
                .collect::<Vec<_>>()
                .into_iter()
                .fold((0, 0, 0.0), |acc, x| {
                    (acc.0 + x.0, acc.1 + x.1, acc.2 + x.2)
                });
            Ok(PolicyOutcome {
                tau,
                reward: r,
                penalty: b,
                abstain: g,
                samples,
                simulated: Frontier {
                    coverage: answered as f64 / samples as f64,
                    far_answered: (answered > 0).then(|| wrong as f64 / answered as f64),
                    expected_reward: total / samples as f64,
                },
                closed_form: closed_form_frontier(model, tau, r, b, g),
            })
        })
        .collect()
}

#[derive(Serialize)]
struct FrontierRow {
    tau: f64,
    gamma: f64,
    beta: f64,
    coverage: f64,
    far_answered: Option<f64>,
    expected_reward: f64,
    coverage_exact: Option<f64>,
    far_answered_exact: Option<f64>,
    expected_reward_exact: Option<f64>,
}

/// One row per config: simulated values, then the exact ones when available.
pub fn write_frontier_csv<W: Write>(outcomes: &[PolicyOutcome], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for o in outcomes {
        w.serialize(FrontierRow {
            tau: o.tau,
            gamma: o.abstain,
            beta: o.penalty,
            coverage: o.simulated.coverage,
            far_answered: o.simulated.far_answered,
            expected_reward: o.simulated.expected_reward,
            coverage_exact: o.closed_form.map(|c| c.coverage),
            far_answered_exact: o.closed_form.and_then(|c| c.far_answered),
            expected_reward_exact: o.closed_form.map(|c| c.expected_reward),
        })
        .map_err(std::io::Error::other)?;
    }
    w.flush()
}
