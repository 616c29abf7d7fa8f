//! Certified confidence thresholds with finite-sample control of the false
//! answer rate among accepted answers.
//!
//! Every answer carries a reported uncertainty `u = 1 - confidence` and an
//! error bit. A threshold `u` accepts answers with uncertainty at most `u`;
//! its cumulative false-answer rate (CFAR) is the error rate among those.
//! Two selection rules are provided over a grid fixed in advance:
//!
//! * [`select_bonferroni`] computes a one-sided Clopper–Pearson upper bound at
//!   every grid point with level `δ / M` and returns the largest threshold whose
//!   bound is at most the target.
//! * [`select_multistart`] runs fixed-sequence exact binomial tests forward
//!   from `L` prespecified start indices at level `δ / L` each, stopping a path
//!   at its first non-rejection, and returns the largest threshold certified on
//!   any path.
//!
//! With probability at least `1 - δ` over the calibration sample, the true
//! accepted-set error rate at the returned threshold is at most the target.
//!
//! Uncertainties are compared on a fixed-point scale of 1e-9 so that an
//! observed `1 - 0.7` lands on the grid value `0.30`.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::wald_ci;
use crate::special::{beta_inv_quantile, SpecialError};

/// Fixed-point units per 1.0 of uncertainty.
pub const UNITS: u64 = 1_000_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum RiskError {
    #[error(transparent)]
    Special(#[from] SpecialError),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("grid must be strictly increasing within [0, 1]")]
    InvalidGrid,
    #[error("start indices must be nonempty, strictly increasing and inside the grid")]
    InvalidStarts,
    #[error("empty input")]
    EmptyInput,
}

type Result<T> = std::result::Result<T, RiskError>;

/// Fixed-point representation of an uncertainty in `[0, 1]`.
pub fn to_units(u: f64) -> u64 {
    (u.clamp(0.0, 1.0) * UNITS as f64).round() as u64
}

fn from_units(units: u64) -> f64 {
    units as f64 / UNITS as f64
}

/// Reported uncertainty and whether the final answer was wrong.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub u: f64,
    pub e: bool,
}

impl CalibrationPoint {
    pub fn new(u: f64, e: bool) -> Result<Self> {
        if !(0.0..=1.0).contains(&u) {
            return Err(RiskError::InvalidParameter(format!(
                "uncertainty {u} outside [0, 1]"
            )));
        }
        Ok(Self { u, e })
    }

    /// From a stated confidence and a correctness label.
    pub fn from_confidence(confidence: f64, correct: bool) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(RiskError::InvalidParameter(format!(
                "confidence {confidence} outside [0, 1]"
            )));
        }
        Ok(Self {
            u: from_units(UNITS - to_units(confidence)),
            e: !correct,
        })
    }

    fn units(&self) -> u64 {
        to_units(self.u)
    }
}

/// `(n(u), k(u))`: accepted points and accepted errors at cutoff `u`.
pub fn accept_counts(points: &[CalibrationPoint], u: f64) -> (u64, u64) {
    let cut = to_units(u);
    points
        .iter()
        .filter(|p| p.units() <= cut)
        .fold((0, 0), |(n, k), p| (n + 1, k + u64::from(p.e)))
}

/// Error rate among accepted points, zero when nothing is accepted.
pub fn cfar(points: &[CalibrationPoint], u: f64) -> f64 {
    match accept_counts(points, u) {
        (0, _) => 0.0,
        (n, k) => k as f64 / n as f64,
    }
}

/// Sorted view of a calibration set answering `(n, k)` queries in `O(log n)`.
#[derive(Debug, Clone)]
pub struct AcceptanceCurve {
    units: Vec<u64>,
    /// `errors[i]` = errors among the first `i` sorted points.
    errors: Vec<u64>,
}

impl AcceptanceCurve {
    pub fn new(points: &[CalibrationPoint]) -> Self {
        let mut sorted: Vec<(u64, bool)> = points.iter().map(|p| (p.units(), p.e)).collect();
        sorted.sort_unstable();
        let mut errors = Vec::with_capacity(sorted.len() + 1);
        errors.push(0);
        let mut acc = 0;
        for &(_, e) in &sorted {
            acc += u64::from(e);
            errors.push(acc);
        }
        Self {
            units: sorted.into_iter().map(|(u, _)| u).collect(),
            errors,
        }
    }

    fn counts_units(&self, cut: u64) -> (u64, u64) {
        let n = self.units.partition_point(|&u| u <= cut);
        (n as u64, self.errors[n])
    }

    pub fn counts(&self, u: f64) -> (u64, u64) {
        self.counts_units(to_units(u))
    }
}

/// Strictly increasing uncertainty thresholds in `[0, 1]`, chosen before
/// looking at calibration data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdGrid {
    units: Vec<u64>,
}

impl ThresholdGrid {
    /// `{0, 1/steps, …, 1}`.
    pub fn uniform(steps: u32) -> Result<Self> {
        if steps == 0 {
            return Err(RiskError::InvalidGrid);
        }
        let units = (0..=steps as u64)
            .map(|i| i * UNITS / steps as u64)
            .collect();
        Ok(Self { units })
    }

    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(RiskError::InvalidGrid);
        }
        let units: Vec<u64> = values.iter().map(|&v| to_units(v)).collect();
        if units.windows(2).any(|w| w[0] >= w[1]) {
            return Err(RiskError::InvalidGrid);
        }
        Ok(Self { units })
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn value(&self, index: usize) -> f64 {
        from_units(self.units[index])
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.units.iter().map(|&u| from_units(u))
    }

    /// `count` start indices spread evenly from the strictest threshold:
    /// `floor(ℓ · M / count)` for `ℓ = 0 … count-1`.
    pub fn even_starts(&self, count: usize) -> Result<Vec<usize>> {
        let m = self.len();
        if count == 0 || count > m {
            return Err(RiskError::InvalidStarts);
        }
        Ok((0..count).map(|l| l * m / count).collect())
    }
}

impl Default for ThresholdGrid {
    /// `{0, 0.01, …, 1.00}`.
    fn default() -> Self {
        Self::uniform(100).expect("nonzero step count")
    }
}

/// One-sided Clopper–Pearson upper bound at level `1 - alpha` for `k` errors
/// in `n` trials. Saturates at 1 when `n = 0` or `k = n`.
pub fn cp_ucb(k: u64, n: u64, alpha: f64) -> Result<f64> {
    if k > n {
        return Err(RiskError::InvalidParameter(format!(
            "k = {k} exceeds n = {n}"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(RiskError::InvalidParameter(format!(
            "alpha {alpha} outside (0, 1)"
        )));
    }
    if n == 0 || k == n {
        return Ok(1.0);
    }
    Ok(beta_inv_quantile(
        1.0 - alpha,
        (k + 1) as f64,
        (n - k) as f64,
    )?)
}

/// Exact `Pr(B ≤ k)` for `B ~ Binomial(n, r)`; 1 when `n = 0`.
///
/// Sums the probability mass in log space with the ratio recurrence
/// `p(i+1) / p(i) = (n - i) / (i + 1) · r / (1 - r)`.
pub fn binom_pvalue_le(k: u64, n: u64, r: f64) -> Result<f64> {
    if k > n {
        return Err(RiskError::InvalidParameter(format!(
            "k = {k} exceeds n = {n}"
        )));
    }
    if !(0.0..=1.0).contains(&r) {
        return Err(RiskError::InvalidParameter(format!(
            "r = {r} outside [0, 1]"
        )));
    }
    if n == 0 || k == n || r == 0.0 {
        return Ok(1.0);
    }
    if r == 1.0 {
        return Ok(0.0);
    }
    let log_odds = r.ln() - (1.0 - r).ln();
    let mut term = n as f64 * (1.0 - r).ln();
    let mut terms = Vec::with_capacity(k as usize + 1);
    terms.push(term);
    for i in 0..k {
        term += ((n - i) as f64 / (i + 1) as f64).ln() + log_odds;
        terms.push(term);
    }
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    Ok((max + sum.ln()).exp().min(1.0))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    Bonferroni,
    Multistart { starts: Vec<usize> },
}

/// Per-grid-point record of a selection run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridAudit {
    pub u: f64,
    pub n: u64,
    pub k: u64,
    pub cfar: f64,
    /// Bonferroni: Clopper–Pearson bound at level `δ / M`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ucb: Option<f64>,
    /// Multistart: exact binomial p-value, only for points a path tested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
    pub certified: bool,
}

/// One forward scan of the multistart rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathAudit {
    pub start: usize,
    /// Index of the first non-rejection, `None` when the path ran off the grid.
    pub stopped_at: Option<usize>,
    pub certified: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Selection {
    Threshold { index: usize, u_hat: f64 },
    RejectAll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifiedThreshold {
    pub selection: Selection,
    pub risk_target: f64,
    pub delta: f64,
    pub method: Method,
    pub audit: Vec<GridAudit>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub paths: Vec<PathAudit>,
}

impl CertifiedThreshold {
    pub fn u_hat(&self) -> Option<f64> {
        match self.selection {
            Selection::Threshold { u_hat, .. } => Some(u_hat),
            Selection::RejectAll => None,
        }
    }

    /// Minimum confidence to accept, `1 - u_hat`.
    pub fn confidence_threshold(&self) -> Option<f64> {
        self.u_hat().map(|u| from_units(UNITS - to_units(u)))
    }

    /// Deployment rule: accept iff `u ≤ u_hat`.
    pub fn accepts(&self, u: f64) -> bool {
        self.u_hat().is_some_and(|cut| to_units(u) <= to_units(cut))
    }
}

fn check_levels(r: f64, delta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r) {
        return Err(RiskError::InvalidParameter(format!(
            "risk target {r} outside [0, 1]"
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(RiskError::InvalidParameter(format!(
            "delta {delta} outside (0, 1)"
        )));
    }
    Ok(())
}

fn base_audit(curve: &AcceptanceCurve, grid: &ThresholdGrid) -> Vec<GridAudit> {
    grid.units
        .iter()
        .map(|&cut| {
            let (n, k) = curve.counts_units(cut);
            GridAudit {
                u: from_units(cut),
                n,
                k,
                cfar: if n == 0 { 0.0 } else { k as f64 / n as f64 },
                ucb: None,
                p_value: None,
                certified: false,
            }
        })
        .collect()
}

fn select_max(grid: &ThresholdGrid, audit: &[GridAudit]) -> Selection {
    match audit.iter().rposition(|a| a.certified) {
        Some(index) => Selection::Threshold {
            index,
            u_hat: grid.value(index),
        },
        None => Selection::RejectAll,
    }
}

/// Bonferroni CP-UCB selection over the whole grid.
pub fn select_bonferroni(
    points: &[CalibrationPoint],
    grid: &ThresholdGrid,
    r: f64,
    delta: f64,
) -> Result<CertifiedThreshold> {
    check_levels(r, delta)?;
    let alpha = delta / grid.len() as f64;
    let curve = AcceptanceCurve::new(points);
    let mut audit = base_audit(&curve, grid);
    for a in &mut audit {
        let ucb = cp_ucb(a.k, a.n, alpha)?;
        a.ucb = Some(ucb);
        a.certified = ucb <= r;
    }
    Ok(CertifiedThreshold {
        selection: select_max(grid, &audit),
        risk_target: r,
        delta,
        method: Method::Bonferroni,
        audit,
        paths: Vec::new(),
    })
}

/// Multistart fixed-sequence selection from the given 0-based start indices.
pub fn select_multistart(
    points: &[CalibrationPoint],
    grid: &ThresholdGrid,
    r: f64,
    delta: f64,
    starts: &[usize],
) -> Result<CertifiedThreshold> {
    check_levels(r, delta)?;
    if starts.is_empty()
        || starts.windows(2).any(|w| w[0] >= w[1])
        || starts.iter().any(|&s| s >= grid.len())
    {
        return Err(RiskError::InvalidStarts);
    }
    let level = delta / starts.len() as f64;
    let curve = AcceptanceCurve::new(points);
    let mut audit = base_audit(&curve, grid);
    let mut paths = Vec::with_capacity(starts.len());
    for &start in starts {
        let mut path = PathAudit {
            start,
            stopped_at: None,
            certified: Vec::new(),
        };
        #[allow(clippy::needless_range_loop)]
        for j in start..grid.len() {
            let p = match audit[j].p_value {
                Some(p) => p,
                None => {
                    let p = binom_pvalue_le(audit[j].k, audit[j].n, r)?;
                    audit[j].p_value = Some(p);
                    p
                }
            };
            if p <= level {
                audit[j].certified = true;
                path.certified.push(j);
            } else {
                path.stopped_at = Some(j);
                break;
            }
        }
        paths.push(path);
    }
    Ok(CertifiedThreshold {
        selection: select_max(grid, &audit),
        risk_target: r,
        delta,
        method: Method::Multistart {
            starts: starts.to_vec(),
        },
        audit,
        paths,
    })
}

/// Which selection rule to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Algorithm {
    Bonferroni,
    /// `starts` evenly spaced start indices.
    Multistart {
        starts: usize,
    },
}

impl Algorithm {
    pub fn select(
        &self,
        points: &[CalibrationPoint],
        grid: &ThresholdGrid,
        r: f64,
        delta: f64,
    ) -> Result<CertifiedThreshold> {
        match *self {
            Algorithm::Bonferroni => select_bonferroni(points, grid, r, delta),
            Algorithm::Multistart { starts } => {
                select_multistart(points, grid, r, delta, &grid.even_starts(starts)?)
            }
        }
    }
}

fn ceil_share(ratio: f64, n: usize) -> usize {
    let x = ratio * n as f64;
    let nearest = x.round();
    let size = if (x - nearest).abs() < 1e-9 {
        nearest
    } else {
        x.ceil()
    };
    size as usize
}

/// Seeded shuffle; the first `⌈ratio · N⌉` points calibrate, the rest validate.
pub fn split_calibration(
    points: &[CalibrationPoint],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<CalibrationPoint>, Vec<CalibrationPoint>)> {
    if points.is_empty() {
        return Err(RiskError::EmptyInput);
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(RiskError::InvalidParameter(format!(
            "split ratio {ratio} outside (0, 1)"
        )));
    }
    let mut shuffled = points.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let validation = shuffled.split_off(ceil_share(ratio, points.len()));
    Ok((shuffled, validation))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub n_total: u64,
    pub n_accepted: u64,
    pub n_accepted_errors: u64,
    pub acceptance_rate: f64,
    pub acceptance_ci: Option<f64>,
    /// Error rate among accepted answers; absent when none are accepted.
    pub validation_cfar: Option<f64>,
    pub cfar_ci: Option<f64>,
}

/// Applies a certified threshold to held-out points.
pub fn validate_threshold(
    validation: &[CalibrationPoint],
    t: &CertifiedThreshold,
) -> ValidationReport {
    let n_total = validation.len() as u64;
    let (n_accepted, n_accepted_errors) = match t.u_hat() {
        Some(u) => accept_counts(validation, u),
        None => (0, 0),
    };
    let acceptance_rate = if n_total == 0 {
        0.0
    } else {
        n_accepted as f64 / n_total as f64
    };
    let validation_cfar = (n_accepted > 0).then(|| n_accepted_errors as f64 / n_accepted as f64);
    ValidationReport {
        n_total,
        n_accepted,
        n_accepted_errors,
        acceptance_rate,
        acceptance_ci: t
            .u_hat()
            .and_then(|_| wald_ci(acceptance_rate, n_total, 0.95).ok()),
        cfar_ci: validation_cfar.and_then(|c| wald_ci(c, n_accepted, 0.95).ok()),
        validation_cfar,
    }
}

/// A row of an exported CFAR curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub u: f64,
    pub n: u64,
    pub k: u64,
    pub cfar: f64,
    pub ucb: f64,
}

/// Empirical CFAR with Bonferroni CP bounds at level `delta / M` on every grid point.
pub fn cfar_curve(
    points: &[CalibrationPoint],
    grid: &ThresholdGrid,
    delta: f64,
) -> Result<Vec<CurvePoint>> {
    check_levels(0.0, delta)?;
    let alpha = delta / grid.len() as f64;
    let curve = AcceptanceCurve::new(points);
    base_audit(&curve, grid)
        .into_iter()
        .map(|a| {
            Ok(CurvePoint {
                ucb: cp_ucb(a.k, a.n, alpha)?,
                u: a.u,
                n: a.n,
                k: a.k,
                cfar: a.cfar,
            })
        })
        .collect()
}

pub fn write_curve_csv<W: Write>(rows: &[CurvePoint], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(std::io::Error::other)?;
    }
    w.flush()
}

/// A distribution over `(U, E)` with a known accepted-set risk
/// `R(u) = Pr(E = 1 | U ≤ u)`, zero when `Pr(U ≤ u) = 0`.
pub trait RiskModel: Sync {
    fn name(&self) -> &str;
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> CalibrationPoint;
    fn true_risk(&self, u: f64) -> f64;
}

/// `U ~ Uniform(0, 1)` with a piecewise-constant error probability `e(t)`.
///
/// `R(u) = (1/u) ∫₀ᵘ e(t) dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseRisk {
    name: String,
    /// `(upper edge, error rate)` with the last edge at 1.
    segments: Vec<(f64, f64)>,
}

impl PiecewiseRisk {
    pub fn new(name: impl Into<String>, segments: Vec<(f64, f64)>) -> Result<Self> {
        let ok_edges = segments.windows(2).all(|w| w[0].0 < w[1].0)
            && segments.last().is_some_and(|s| s.0 == 1.0);
        let ok_rates = segments
            .iter()
            .all(|s| (0.0..=1.0).contains(&s.1) && s.0 > 0.0);
        if !(ok_edges && ok_rates) {
            return Err(RiskError::InvalidParameter(
                "segments must have increasing edges ending at 1 and rates in [0, 1]".into(),
            ));
        }
        Ok(Self {
            name: name.into(),
            segments,
        })
    }

    /// Error rate rising in steps with uncertainty.
    pub fn monotone() -> Self {
        Self::new(
            "monotone",
            vec![
                (0.2, 0.02),
                (0.4, 0.08),
                (0.6, 0.15),
                (0.8, 0.3),
                (1.0, 0.5),
            ],
        )
        .expect("valid segments")
    }

    pub fn flat(rate: f64) -> Self {
        Self::new(format!("flat({rate})"), vec![(1.0, rate)]).expect("valid segments")
    }

    /// Confidently wrong at low uncertainty, reliable in the middle, poor at the top.
    pub fn non_monotone() -> Self {
        Self::new("non-monotone", vec![(0.1, 0.35), (0.5, 0.03), (1.0, 0.4)])
            .expect("valid segments")
    }

    fn rate_at(&self, t: f64) -> f64 {
        self.segments
            .iter()
            .find(|s| t < s.0)
            .unwrap_or(self.segments.last().unwrap())
            .1
    }
}

impl RiskModel for PiecewiseRisk {
    fn name(&self) -> &str {
        &self.name
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> CalibrationPoint {
        let u: f64 = rng.gen();
        let e = rng.gen::<f64>() < self.rate_at(u);
        CalibrationPoint { u, e }
    }

    fn true_risk(&self, u: f64) -> f64 {
        if u <= 0.0 {
            return 0.0;
        }
        let u = u.min(1.0);
        let mut mass = 0.0;
        let mut lower = 0.0;
        for &(upper, rate) in &self.segments {
            let hi = upper.min(u);
            if hi > lower {
                mass += rate * (hi - lower);
            }
            if upper >= u {
                break;
            }
            lower = upper;
        }
        mass / u
    }
}

/// SplitMix64 finalizer; trial `i` of a run with master seed `s` draws from
/// `ChaCha8Rng::seed_from_u64(split_seed(s, i))`.
pub fn split_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValiditySummary {
    pub generator: String,
    pub algorithm: Algorithm,
    pub trials: u64,
    pub selections: u64,
    pub violations: u64,
    pub violation_rate: f64,
}

/// Settings for [`monte_carlo_validity`].
#[derive(Debug, Clone)]
pub struct ValidityConfig {
    pub algorithm: Algorithm,
    pub grid: ThresholdGrid,
    pub risk_target: f64,
    pub delta: f64,
    pub calibration_size: usize,
    pub trials: u64,
    pub seed: u64,
}

/// Repeats calibration on fresh samples and counts selections whose true
/// risk exceeds the target.
pub fn monte_carlo_validity<M: RiskModel>(
    model: &M,
    cfg: &ValidityConfig,
) -> Result<ValiditySummary> {
    let outcomes = (0..cfg.trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed(cfg.seed, i));
            let points: Vec<_> = (0..cfg.calibration_size)
                .map(|_| model.sample(&mut rng))
                .collect();
            let t = cfg
                .algorithm
                .select(&points, &cfg.grid, cfg.risk_target, cfg.delta)?;
            Ok(t.u_hat().map(|u| model.true_risk(u) > cfg.risk_target))
        })
        .collect::<Result<Vec<_>>>()?;
    let selections = outcomes.iter().filter(|o| o.is_some()).count() as u64;
    let violations = outcomes.iter().filter(|o| **o == Some(true)).count() as u64;
    Ok(ValiditySummary {
        generator: model.name().to_string(),
        algorithm: cfg.algorithm,
        trials: cfg.trials,
        selections,
        violations,
        violation_rate: if cfg.trials == 0 {
            0.0
        } else {
            violations as f64 / cfg.trials as f64
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pts(raw: &[(f64, bool)]) -> Vec<CalibrationPoint> {
        raw.iter()
            .map(|&(u, e)| CalibrationPoint::new(u, e).unwrap())
            .collect()
    }

    /// 20 correct at u = 0.4 and 20 wrong at u = 0.9.
    fn two_cluster() -> Vec<CalibrationPoint> {
        let mut v = vec![CalibrationPoint { u: 0.4, e: false }; 20];
        v.extend(vec![CalibrationPoint { u: 0.9, e: true }; 20]);
        v
    }

    #[test]
    fn accept_counts_examples() {
        let p = pts(&[(0.1, false), (0.2, true), (0.9, true)]);
        assert_eq!(accept_counts(&p, 0.5), (2, 1));
        assert_eq!(accept_counts(&p, 0.0), (0, 0));
        assert_eq!(accept_counts(&p, 1.0), (3, 2));
        assert_eq!(cfar(&p, 0.5), 0.5);
        assert_eq!(cfar(&p, 0.0), 0.0);
        assert_abs_diff_eq!(cfar(&p, 1.0), 2.0 / 3.0);
    }

    #[test]
    fn confidence_lands_on_grid() {
        let p = CalibrationPoint::from_confidence(0.7, true).unwrap();
        assert_eq!(accept_counts(&[p], 0.3), (1, 0));
        // plain subtraction gives 0.30000000000000004 and would miss the cut
        assert_ne!(1.0f64 - 0.7, 0.3);
    }

    #[test]
    fn cp_ucb_examples() {
        assert_eq!(cp_ucb(0, 0, 0.05).unwrap(), 1.0);
        assert_eq!(cp_ucb(5, 5, 0.05).unwrap(), 1.0);
        assert_abs_diff_eq!(
            cp_ucb(0, 10, 0.05).unwrap(),
            0.258_865_550_893_052_3,
            epsilon = 1e-10
        );
        assert!(cp_ucb(6, 5, 0.05).is_err());
    }

    #[test]
    fn pvalue_examples() {
        assert_abs_diff_eq!(
            binom_pvalue_le(0, 10, 0.3).unwrap(),
            0.028_247_524_9,
            epsilon = 1e-12
        );
        assert_eq!(binom_pvalue_le(7, 7, 0.4).unwrap(), 1.0);
        assert_eq!(binom_pvalue_le(0, 0, 0.4).unwrap(), 1.0);
        // scipy binom.cdf(20, 40, 0.2)
        assert_abs_diff_eq!(
            binom_pvalue_le(20, 40, 0.2).unwrap(),
            0.999_994_972_729_657_1,
            epsilon = 1e-12
        );
    }

    #[test]
    fn bonferroni_two_cluster() {
        let grid = ThresholdGrid::from_values(&[0.0, 0.5, 1.0]).unwrap();
        let t = select_bonferroni(&two_cluster(), &grid, 0.2, 0.05).unwrap();
        assert_eq!(t.u_hat(), Some(0.5));
        // scipy: 1 - (0.05/3)^(1/20) and beta.ppf(1 - 0.05/3, 21, 20)
        assert_abs_diff_eq!(
            t.audit[1].ucb.unwrap(),
            0.185_122_291_655_494_6,
            epsilon = 1e-10
        );
        assert_abs_diff_eq!(
            t.audit[2].ucb.unwrap(),
            0.674_063_696_487_376_3,
            epsilon = 1e-10
        );
        assert_eq!(t.audit[0].ucb, Some(1.0));
        assert_abs_diff_eq!(t.confidence_threshold().unwrap(), 0.5);
    }

    #[test]
    fn bonferroni_boundaries() {
        let grid = ThresholdGrid::default();
        let wrong = vec![CalibrationPoint { u: 0.3, e: true }; 50];
        assert_eq!(
            select_bonferroni(&wrong, &grid, 0.5, 0.05)
                .unwrap()
                .selection,
            Selection::RejectAll
        );
        let t = select_bonferroni(&two_cluster(), &grid, 1.0, 0.05).unwrap();
        assert_eq!(t.u_hat(), Some(1.0));
        assert!(select_bonferroni(&wrong, &grid, 0.5, 0.0).is_err());
    }

    #[test]
    fn multistart_two_cluster() {
        let grid = ThresholdGrid::from_values(&[0.0, 0.5, 1.0]).unwrap();
        let t = select_multistart(&two_cluster(), &grid, 0.2, 0.05, &[0, 1, 2]).unwrap();
        assert_eq!(t.u_hat(), Some(0.5));
        assert_eq!(t.paths[0].stopped_at, Some(0));
        assert_eq!(t.paths[1].certified, vec![1]);
        assert_eq!(t.paths[1].stopped_at, Some(2));
        assert_eq!(t.paths[2].stopped_at, Some(2));
        // 0.8^20 at level 0.05 / 3
        assert_abs_diff_eq!(
            t.audit[1].p_value.unwrap(),
            0.8f64.powi(20),
            epsilon = 1e-14
        );
    }

    #[test]
    fn single_start_is_classical_fixed_sequence() {
        let grid = ThresholdGrid::uniform(10).unwrap();
        let mut p = vec![CalibrationPoint { u: 0.05, e: false }; 200];
        p.extend(vec![CalibrationPoint { u: 0.55, e: true }; 100]);
        let t = select_multistart(&p, &grid, 0.1, 0.05, &[0]).unwrap();
        // u = 0 accepts nothing, so a scan from the strictest point stops at once
        assert_eq!(t.selection, Selection::RejectAll);
        let t = select_multistart(&p, &grid, 0.1, 0.05, &[1]).unwrap();
        assert_eq!(t.u_hat(), Some(0.5));
        assert_eq!(t.paths[0].stopped_at, Some(6));
    }

    #[test]
    fn multistart_rejects_bad_starts() {
        let grid = ThresholdGrid::uniform(4).unwrap();
        let p = two_cluster();
        for starts in [vec![], vec![2, 1], vec![0, 5], vec![1, 1]] {
            assert_eq!(
                select_multistart(&p, &grid, 0.2, 0.05, &starts),
                Err(RiskError::InvalidStarts)
            );
        }
        let wrong = vec![CalibrationPoint { u: 0.3, e: true }; 50];
        let starts = grid.even_starts(3).unwrap();
        assert_eq!(
            select_multistart(&wrong, &grid, 0.5, 0.05, &starts)
                .unwrap()
                .selection,
            Selection::RejectAll
        );
    }

    #[test]
    fn even_starts_default() {
        let g = ThresholdGrid::default();
        assert_eq!(g.len(), 101);
        assert_eq!(
            g.even_starts(10).unwrap(),
            vec![0, 10, 20, 30, 40, 50, 60, 70, 80, 90]
        );
        assert!(g.even_starts(0).is_err());
    }

    #[test]
    fn grid_validation() {
        assert!(ThresholdGrid::from_values(&[0.1, 0.1]).is_err());
        assert!(ThresholdGrid::from_values(&[0.2, 0.1]).is_err());
        assert!(ThresholdGrid::from_values(&[0.5, 1.1]).is_err());
        assert!(ThresholdGrid::from_values(&[]).is_err());
        assert_eq!(ThresholdGrid::default().value(37), 0.37);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let p: Vec<_> = (0..10)
            .map(|i| CalibrationPoint {
                u: i as f64 / 10.0,
                e: i % 2 == 0,
            })
            .collect();
        let (c, v) = split_calibration(&p, 0.2, 7).unwrap();
        assert_eq!((c.len(), v.len()), (2, 8));
        assert_eq!(split_calibration(&p, 0.2, 7).unwrap(), (c, v));
        assert_eq!(ceil_share(0.2, 14267), 2854);
        assert_eq!(ceil_share(0.1, 30), 3);
        assert!(split_calibration(&[], 0.2, 1).is_err());
        assert!(split_calibration(&p, 1.0, 1).is_err());
    }

    #[test]
    fn validation_examples() {
        let grid = ThresholdGrid::default();
        let wrong = vec![CalibrationPoint { u: 0.3, e: true }; 10];
        let reject = select_bonferroni(&wrong, &grid, 0.1, 0.05).unwrap();
        let v = validate_threshold(&wrong, &reject);
        assert_eq!(
            (v.acceptance_rate, v.validation_cfar, v.cfar_ci),
            (0.0, None, None)
        );

        let all = CertifiedThreshold {
            selection: Selection::Threshold {
                index: 100,
                u_hat: 1.0,
            },
            risk_target: 1.0,
            delta: 0.05,
            method: Method::Bonferroni,
            audit: vec![],
            paths: vec![],
        };
        let half: Vec<_> = (0..10)
            .map(|i| CalibrationPoint { u: 0.5, e: i < 5 })
            .collect();
        let v = validate_threshold(&half, &all);
        assert_eq!((v.acceptance_rate, v.validation_cfar), (1.0, Some(0.5)));
    }

    #[test]
    fn piecewise_true_risk() {
        let m = PiecewiseRisk::non_monotone();
        assert_eq!(m.true_risk(0.0), 0.0);
        assert_abs_diff_eq!(m.true_risk(0.05), 0.35, epsilon = 1e-15);
        assert_abs_diff_eq!(m.true_risk(0.5), (0.035 + 0.012) / 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(m.true_risk(1.0), (0.035 + 0.012 + 0.2), epsilon = 1e-15);
        assert_abs_diff_eq!(
            PiecewiseRisk::flat(0.2).true_risk(0.37),
            0.2,
            epsilon = 1e-15
        );
    }

    #[test]
    fn zero_risk_generator_never_violates() {
        let cfg = ValidityConfig {
            algorithm: Algorithm::Bonferroni,
            grid: ThresholdGrid::uniform(20).unwrap(),
            risk_target: 0.1,
            delta: 0.05,
            calibration_size: 200,
            trials: 50,
            seed: 3,
        };
        let s = monte_carlo_validity(&PiecewiseRisk::flat(0.0), &cfg).unwrap();
        assert_eq!(s.violations, 0);
        assert_eq!(s.selections, 50);
    }

    #[test]
    fn zero_target_never_selects() {
        let cfg = ValidityConfig {
            algorithm: Algorithm::Multistart { starts: 5 },
            grid: ThresholdGrid::uniform(20).unwrap(),
            risk_target: 0.0,
            delta: 0.05,
            calibration_size: 200,
            trials: 20,
            seed: 9,
        };
        let s = monte_carlo_validity(&PiecewiseRisk::flat(0.1), &cfg).unwrap();
        assert_eq!((s.selections, s.violations), (0, 0));
    }

    #[test]
    fn curve_csv_header() {
        let grid = ThresholdGrid::from_values(&[0.0, 0.5, 1.0]).unwrap();
        let rows = cfar_curve(&two_cluster(), &grid, 0.05).unwrap();
        let mut buf = Vec::new();
        write_curve_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("u,n,k,cfar,ucb\n0.0,0,0,0.0,1.0\n0.5,20,0,0.0,"));
    }

    proptest! {
        #[test]
        fn counts_monotone(raw in proptest::collection::vec((0.0f64..=1.0, any::<bool>()), 0..60)) {
            let p = pts(&raw);
            let curve = AcceptanceCurve::new(&p);
            let mut prev = (0, 0);
            for u in ThresholdGrid::uniform(50).unwrap().values() {
                let c = accept_counts(&p, u);
                prop_assert_eq!(c, curve.counts(u));
                prop_assert!(c.1 <= c.0 && c.0 >= prev.0 && c.1 >= prev.1);
                prev = c;
            }
        }

        #[test]
        fn ucb_dominates_rate_and_shrinks_with_alpha(n in 1u64..400, frac in 0.0f64..1.0, a1 in 0.001f64..0.5, a2 in 0.001f64..0.5) {
            let k = ((n as f64) * frac).floor() as u64;
            let (lo, hi) = if a1 < a2 { (a1, a2) } else { (a2, a1) };
            let u_lo = cp_ucb(k, n, lo).unwrap();
            let u_hi = cp_ucb(k, n, hi).unwrap();
            prop_assert!(u_lo >= k as f64 / n as f64);
            prop_assert!(u_lo + 1e-12 >= u_hi);
        }

        #[test]
        fn bonferroni_selects_max_feasible(raw in proptest::collection::vec((0.0f64..=1.0, proptest::bool::weighted(0.15)), 1..200), r in 0.05f64..0.6) {
            let p = pts(&raw);
            let t = select_bonferroni(&p, &ThresholdGrid::uniform(20).unwrap(), r, 0.05).unwrap();
            if let Selection::Threshold { index, .. } = t.selection {
                prop_assert!(t.audit[index].ucb.unwrap() <= r);
                prop_assert!(t.audit[index + 1..].iter().all(|a| a.ucb.unwrap() > r));
            } else {
                prop_assert!(t.audit.iter().all(|a| a.ucb.unwrap() > r));
            }
        }

        #[test]
        fn multistart_certified_points_pass_their_level(raw in proptest::collection::vec((0.0f64..=1.0, proptest::bool::weighted(0.15)), 1..200), r in 0.05f64..0.6, l in 1usize..8) {
            let p = pts(&raw);
            let grid = ThresholdGrid::uniform(20).unwrap();
            let t = select_multistart(&p, &grid, r, 0.05, &grid.even_starts(l).unwrap()).unwrap();
            let level = 0.05 / l as f64;
            for path in &t.paths {
                for &j in &path.certified {
                    prop_assert!(t.audit[j].p_value.unwrap() <= level);
                }
                if let Some(s) = path.stopped_at {
                    prop_assert!(t.audit[s].p_value.unwrap() > level);
                }
            }
            if let Some(u) = t.u_hat() {
                prop_assert!(t.paths.iter().any(|p| p.certified.iter().any(|&j| grid.value(j) == u)));
            }
        }
    }
}
