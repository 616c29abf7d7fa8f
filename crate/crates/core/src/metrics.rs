//! Selective-prediction metrics.
//!
//! Counts follow a closed accounting: every question is answered in the first
//! round, abstained, or a parse failure. Abstentions are graded through their
//! best guess for the forced-answer ("overall") metrics; an abstention with no
//! best guess and a parse failure are both wrong overall.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{Channel, RewardConfig, Scheme};

/// Two-sided 97.5% standard normal quantile.
pub const Z_975: f64 = 1.959964;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty denominator for {0}")]
    EmptyDenominator(&'static str),
    #[error("empty input")]
    EmptyInput,
    #[error("need at least {0} points")]
    TooFewPoints(usize),
    #[error("input is constant")]
    ConstantInput,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("log-probability {0} is positive")]
    PositiveLogprob(f64),
    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error("question {0:?} has no graded outcome")]
    MissingOutcome(String),
    #[error("inconsistent counts: {0}")]
    InconsistentCounts(String),
    #[error("{0} has no payoff")]
    NoPayoff(&'static str),
}

type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Answered,
    Abstained,
    ParseFailure,
}

/// One graded question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrial {
    pub question_id: String,
    pub outcome: Outcome,
    pub channel: Channel,
    pub confidence: Option<f64>,
    /// Correctness of the evaluated answer; `None` when there is nothing to grade.
    pub correct: Option<bool>,
    /// Geometric-mean probability of the evaluated answer's tokens.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_conf: Option<f64>,
}

impl ScoredTrial {
    /// Wrong under forced answering. Nothing to grade counts as wrong.
    pub fn incorrect_overall(&self) -> bool {
        self.correct != Some(true)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub n_total: u64,
    pub n_answered: u64,
    pub n_incorrect_answered: u64,
    pub n_incorrect_overall: u64,
    pub n_abstained: u64,
    pub n_parse_failure: u64,
}

impl OutcomeCounts {
    /// Counts for a run with no parse failures, as reported in result tables
    /// (everything not answered is an abstention).
    pub fn from_table(
        n_total: u64,
        n_answered: u64,
        n_incorrect_answered: u64,
        n_incorrect_overall: u64,
    ) -> Self {
        Self {
            n_total,
            n_answered,
            n_incorrect_answered,
            n_incorrect_overall,
            n_abstained: n_total.saturating_sub(n_answered),
            n_parse_failure: 0,
        }
    }

    pub fn from_trials(trials: &[ScoredTrial]) -> Self {
        let mut c = Self::default();
        for t in trials {
            c.n_total += 1;
            match t.outcome {
                Outcome::Answered => {
                    c.n_answered += 1;
                    if t.incorrect_overall() {
                        c.n_incorrect_answered += 1;
                    }
                }
                Outcome::Abstained => c.n_abstained += 1,
                Outcome::ParseFailure => c.n_parse_failure += 1,
            }
            if t.incorrect_overall() {
                c.n_incorrect_overall += 1;
            }
        }
        c
    }

    /// Abstentions whose best guess was wrong (or absent).
    pub fn n_abstain_incorrect(&self) -> u64 {
        self.n_incorrect_overall - self.n_incorrect_answered - self.n_parse_failure
    }

    pub fn check(&self) -> Result<()> {
        let fail = |m: String| Err(MetricsError::InconsistentCounts(m));
        if self.n_answered + self.n_abstained + self.n_parse_failure != self.n_total {
            return fail(format!(
                "answered {} + abstained {} + parse failures {} != total {}",
                self.n_answered, self.n_abstained, self.n_parse_failure, self.n_total
            ));
        }
        if self.n_incorrect_answered > self.n_answered {
            return fail("more incorrect answers than answers".into());
        }
        if self.n_incorrect_overall < self.n_incorrect_answered + self.n_parse_failure {
            return fail("overall errors fewer than answered errors plus parse failures".into());
        }
        if self.n_incorrect_overall
            > self.n_incorrect_answered + self.n_abstained + self.n_parse_failure
        {
            return fail("overall errors exceed possible error sources".into());
        }
        Ok(())
    }
}

fn ratio(num: u64, den: u64, which: &'static str) -> Result<f64> {
    if den == 0 {
        return Err(MetricsError::EmptyDenominator(which));
    }
    Ok(num as f64 / den as f64)
}

pub fn far_answered(c: &OutcomeCounts) -> Result<f64> {
    ratio(c.n_incorrect_answered, c.n_answered, "far_answered")
}

pub fn far_overall(c: &OutcomeCounts) -> Result<f64> {
    ratio(c.n_incorrect_overall, c.n_total, "far_overall")
}

/// `(far_answered, far_overall)`.
pub fn far_rates(c: &OutcomeCounts) -> Result<(f64, f64)> {
    Ok((far_answered(c)?, far_overall(c)?))
}

pub fn coverage(c: &OutcomeCounts) -> Result<f64> {
    ratio(c.n_answered, c.n_total, "coverage")
}

/// Share of forced-answer errors that the model flagged with a first-round
/// abstention. Parse failures are errors but not abstentions.
pub fn aer(c: &OutcomeCounts) -> Result<f64> {
    ratio(c.n_abstain_incorrect(), c.n_incorrect_overall, "aer")
}

/// Upper bound on AER for a single-round prompt: spontaneous "I don't know"
/// replies over those replies plus wrong answers.
pub fn pure_eval_aer_bound(n_incorrect_answered: u64, n_spontaneous_idk: u64) -> Result<f64> {
    ratio(
        n_spontaneous_idk,
        n_incorrect_answered + n_spontaneous_idk,
        "pure_eval_aer_bound",
    )
}

/// Realized payoff summed over questions.
///
/// Scheme B pays `+γ` for every first-round abstention whatever its best
/// guess. Scheme A is scored by forced answering: every question earns `R` if
/// its evaluated answer is right and `-β` otherwise. Parse failures cost `-β`
/// under both.
pub fn total_reward(trials: &[ScoredTrial], cfg: &RewardConfig) -> Result<f64> {
    let (r, b, g) = payoffs(cfg)?;
    let mut sum = 0.0;
    for t in trials {
        if t.correct.is_none() && t.channel != Channel::None {
            return Err(MetricsError::MissingOutcome(t.question_id.clone()));
        }
        let right = t.correct == Some(true);
        sum += match (cfg.scheme, t.outcome) {
            (Scheme::SchemeB, Outcome::Abstained) => g,
            _ if right && t.outcome != Outcome::ParseFailure => r,
            _ => -b,
        };
    }
    Ok(sum)
}

/// [`total_reward`] evaluated from aggregate counts.
pub fn total_reward_from_counts(c: &OutcomeCounts, cfg: &RewardConfig) -> Result<f64> {
    let (r, b, g) = payoffs(cfg)?;
    let n = |x: u64| x as f64;
    Ok(match cfg.scheme {
        Scheme::SchemeB => {
            n(c.n_answered - c.n_incorrect_answered) * r - n(c.n_incorrect_answered) * b
                + n(c.n_abstained) * g
                - n(c.n_parse_failure) * b
        }
        _ => n(c.n_total - c.n_incorrect_overall) * r - n(c.n_incorrect_overall) * b,
    })
}

fn payoffs(cfg: &RewardConfig) -> Result<(f64, f64, f64)> {
    if cfg.scheme == Scheme::PureEval {
        return Err(MetricsError::NoPayoff("pure eval"));
    }
    Ok((
        cfg.reward_correct,
        cfg.penalty_incorrect,
        cfg.abstain_reward(),
    ))
}

fn check_probs(scores: &[(f64, bool)]) -> Result<()> {
    if scores.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    match scores.iter().find(|(p, _)| !(0.0..=1.0).contains(p)) {
        Some(&(p, _)) => Err(MetricsError::InvalidProbability(p)),
        None => Ok(()),
    }
}

fn indicator(y: bool) -> f64 {
    if y {
        1.0
    } else {
        0.0
    }
}

pub fn brier(scores: &[(f64, bool)]) -> Result<f64> {
    check_probs(scores)?;
    let sum: f64 = scores
        .iter()
        .map(|&(p, y)| (p - indicator(y)).powi(2))
        .sum();
    Ok(sum / scores.len() as f64)
}

/// Brier score with a normal-approximation 95% half-width (`1.96 · sd / √n`).
pub fn brier_with_ci(scores: &[(f64, bool)]) -> Result<(f64, f64)> {
    let mean = brier(scores)?;
    let n = scores.len() as f64;
    if scores.len() < 2 {
        return Ok((mean, 0.0));
    }
    let var = scores
        .iter()
        .map(|&(p, y)| ((p - indicator(y)).powi(2) - mean).powi(2))
        .sum::<f64>()
        / (n - 1.0);
    Ok((mean, Z_975 * (var / n).sqrt()))
}

/// One equal-width confidence bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean correctness, `None` for an empty bin.
    pub accuracy: Option<f64>,
    pub mean_confidence: Option<f64>,
}

/// Index of the bin `[k/K, (k+1)/K)` holding `p`; the last bin is closed.
fn bin_index(p: f64, bins: usize) -> usize {
    let k = bins as f64;
    let mut idx = ((p * k).floor() as usize).min(bins - 1);
    // correct floating error at bin edges against the exact bounds
    while idx > 0 && p < idx as f64 / k {
        idx -= 1;
    }
    while idx + 1 < bins && p >= (idx + 1) as f64 / k {
        idx += 1;
    }
    idx
}

pub fn reliability_bins(scores: &[(f64, bool)], bins: usize) -> Result<Vec<ReliabilityBin>> {
    check_probs(scores)?;
    if bins == 0 {
        return Err(MetricsError::EmptyDenominator("bin count"));
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0f64; bins];
    let mut hits = vec![0.0f64; bins];
    for &(p, y) in scores {
        let i = bin_index(p, bins);
        count[i] += 1;
        conf[i] += p;
        hits[i] += indicator(y);
    }
    let k = bins as f64;
    Ok((0..bins)
        .map(|i| {
            let n = count[i] as f64;
            ReliabilityBin {
                lower: i as f64 / k,
                upper: (i + 1) as f64 / k,
                count: count[i],
                accuracy: (count[i] > 0).then(|| hits[i] / n),
                mean_confidence: (count[i] > 0).then(|| conf[i] / n),
            }
        })
        .collect())
}

/// Binned expected calibration error with `bins` equal-width bins.
pub fn ece(scores: &[(f64, bool)], bins: usize) -> Result<f64> {
    let table = reliability_bins(scores, bins)?;
    let n = scores.len() as f64;
    Ok(table
        .iter()
        .filter_map(|b| Some((b.count as f64 / n) * (b.accuracy? - b.mean_confidence?).abs()))
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Correlation {
    pub r: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Sample Pearson correlation with a Fisher-z 95% interval.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(MetricsError::TooFewPoints(3));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::ConstantInput);
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let (ci_low, ci_high) = if x.len() > 3 {
        let z = r.atanh();
        let se = 1.0 / (n - 3.0).sqrt();
        ((z - Z_975 * se).tanh(), (z + Z_975 * se).tanh())
    } else {
        (-1.0, 1.0)
    };
    Ok(Correlation { r, ci_low, ci_high })
}

/// Standard normal quantile, Acklam's rational approximation (relative
/// error below 1.2e-9).
pub fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383_577_518_672_69e2,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    if p < 0.02425 {
        tail((-2.0 * p.ln()).sqrt())
    } else if p > 1.0 - 0.02425 {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// Wald half-width for a proportion at the given two-sided level.
pub fn wald_ci(p_hat: f64, n: u64, level: f64) -> Result<f64> {
    if n == 0 {
        return Err(MetricsError::EmptyDenominator("wald_ci"));
    }
    if !(0.0..=1.0).contains(&p_hat) {
        return Err(MetricsError::InvalidProbability(p_hat));
    }
    let z = if level == 0.95 {
        Z_975
    } else {
        normal_quantile(0.5 + level / 2.0)
    };
    Ok(z * (p_hat * (1.0 - p_hat) / n as f64).sqrt())
}

/// `exp(mean(logprobs))`.
pub fn geo_mean_token_prob(logprobs: &[f64]) -> Result<f64> {
    if logprobs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if let Some(&lp) = logprobs.iter().find(|&&lp| lp > 0.0 || lp.is_nan()) {
        return Err(MetricsError::PositiveLogprob(lp));
    }
    Ok((logprobs.iter().sum::<f64>() / logprobs.len() as f64).exp())
}

/// Precision/recall view of a selective answerer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Surfaced-error rate: wrong answers over all questions.
    pub e_surf: f64,
}

pub fn prf_bridge(far_answered: f64, coverage: f64) -> PrecisionRecall {
    let precision = 1.0 - far_answered;
    let recall = coverage * precision;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    PrecisionRecall {
        precision,
        recall,
        f1,
        e_surf: coverage * far_answered,
    }
}

/// Every scalar reported for one run. Absent values are undefined for the
/// run (an empty denominator, or a metric the scheme does not have).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(flatten)]
    pub counts: OutcomeCounts,
    pub far_answered: Option<f64>,
    pub far_answered_ci: Option<f64>,
    pub far_overall: Option<f64>,
    pub far_overall_ci: Option<f64>,
    pub coverage: Option<f64>,
    pub coverage_ci: Option<f64>,
    pub aer: Option<f64>,
    /// Pure Eval only.
    pub aer_upper_bound: Option<f64>,
    pub total_reward: Option<f64>,
    pub brier_answered: Option<f64>,
    pub brier_answered_ci: Option<f64>,
    pub brier_overall: Option<f64>,
    pub brier_overall_ci: Option<f64>,
    pub ece_answered: Option<f64>,
    pub ece_overall: Option<f64>,
    pub pearson_r: Option<f64>,
    pub pearson_ci_low: Option<f64>,
    pub pearson_ci_high: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub e_surf: Option<f64>,
}

impl MetricReport {
    pub fn compute(trials: &[ScoredTrial], cfg: &RewardConfig, ece_bins: usize) -> Result<Self> {
        let counts = OutcomeCounts::from_trials(trials);
        counts.check()?;
        let far_a = far_answered(&counts).ok();
        let far_o = far_overall(&counts).ok();
        let cov = coverage(&counts).ok();
        let wald = |p: Option<f64>, n: u64| p.and_then(|p| wald_ci(p, n, 0.95).ok());

        let answered: Vec<(f64, bool)> = trials
            .iter()
            .filter(|t| t.outcome == Outcome::Answered)
            .filter_map(|t| Some((t.confidence?, t.correct?)))
            .collect();
        let overall: Vec<(f64, bool)> = trials
            .iter()
            .filter_map(|t| Some((t.confidence?, t.correct?)))
            .collect();
        let brier_a = brier_with_ci(&answered).ok();
        let brier_o = brier_with_ci(&overall).ok();

        let (conf, tok): (Vec<f64>, Vec<f64>) = trials
            .iter()
            .filter_map(|t| Some((t.confidence?, t.token_conf?)))
            .unzip();
        let corr = pearson(&conf, &tok).ok();

        let (aer_value, aer_bound) = if cfg.scheme == Scheme::PureEval {
            (
                None,
                pure_eval_aer_bound(counts.n_incorrect_answered, counts.n_abstained).ok(),
            )
        } else {
            (aer(&counts).ok(), None)
        };
        let total = match cfg.scheme {
            Scheme::PureEval => None,
            _ => Some(total_reward(trials, cfg)?),
        };
        let prf = far_a.zip(cov).map(|(f, c)| prf_bridge(f, c));

        Ok(Self {
            far_answered: far_a,
            far_answered_ci: wald(far_a, counts.n_answered),
            far_overall: far_o,
            far_overall_ci: wald(far_o, counts.n_total),
            coverage: cov,
            coverage_ci: wald(cov, counts.n_total),
            aer: aer_value,
            aer_upper_bound: aer_bound,
            total_reward: total,
            brier_answered: brier_a.map(|b| b.0),
            brier_answered_ci: brier_a.map(|b| b.1),
            brier_overall: brier_o.map(|b| b.0),
            brier_overall_ci: brier_o.map(|b| b.1),
            ece_answered: ece(&answered, ece_bins).ok(),
            ece_overall: ece(&overall, ece_bins).ok(),
            pearson_r: corr.map(|c| c.r),
            pearson_ci_low: corr.map(|c| c.ci_low),
            pearson_ci_high: corr.map(|c| c.ci_high),
            precision: prf.map(|p| p.precision),
            recall: prf.map(|p| p.recall),
            f1: prf.map(|p| p.f1),
            e_surf: prf.map(|p| p.e_surf),
            counts,
        })
    }
}
