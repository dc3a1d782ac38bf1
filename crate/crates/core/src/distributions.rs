//! Categorical distributions, KL / Jensen-Shannon divergences and the
//! natural-parameter view used by the centroid solver.
//!
//! A categorical over `K` classes is written in natural coordinates as the
//! first `K - 1` probabilities `theta`; the last class carries the remainder
//! `1 - sum(theta)`. Its negative entropy `F(theta)` is a convex potential
//! whose gradient map and inverse are available in closed form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities below this are lifted to it (then renormalized) before any
/// logarithm is taken.
pub const CLAMP_EPS: f64 = 1e-12;

/// Tolerance on `sum(probs) == 1` accepted by [`Categorical::new`].
pub const SUM_TOL: f64 = 1e-9;

/// Above this many terms, sums over classes use compensated accumulation.
const COMPENSATED_ABOVE: usize = 64;

/// Sums `terms`, switching to Neumaier compensation for long vectors.
pub(crate) fn class_sum<I: IntoIterator<Item = f64>>(terms: I, len: usize) -> f64 {
    if len <= COMPENSATED_ABOVE {
        return terms.into_iter().sum();
    }
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for t in terms {
        let s = sum + t;
        if sum.abs() >= t.abs() {
            comp += (sum - s) + t;
        } else {
            comp += (t - s) + sum;
        }
        sum = s;
    }
    sum + comp
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Categorical {
    probs: Vec<f64>,
}

impl TryFrom<Vec<f64>> for Categorical {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Categorical::new(v)
    }
}

impl From<Categorical> for Vec<f64> {
    fn from(c: Categorical) -> Self {
        c.probs
    }
}

impl Categorical {
    /// Validates `K >= 2`, finite non-negative entries and unit sum
    /// (within [`SUM_TOL`]).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidDistribution(format!(
                "need at least 2 classes, got {}",
                probs.len()
            )));
        }
        if let Some((i, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0)
        {
            return Err(Error::InvalidDistribution(format!("entry {i} is {p}")));
        }
        let total = class_sum(probs.iter().copied(), probs.len());
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidDistribution(format!("entries sum to {total}")));
        }
        Ok(Self { probs })
    }

    /// Normalizes non-negative weights with a positive total.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total = class_sum(weights.iter().copied(), weights.len());
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::InvalidDistribution(format!(
                "weights must have a positive finite total, got {total}"
            )));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn uniform(k: usize) -> Result<Self> {
        Self::new(vec![1.0 / k as f64; k])
    }

    pub(crate) fn from_vec_unchecked(probs: Vec<f64>) -> Self {
        debug_assert!(probs.len() >= 2);
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Shannon entropy in nats, with `0 log 0 = 0`.
    pub fn entropy(&self) -> f64 {
        -class_sum(
            self.probs.iter().map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 }),
            self.k(),
        )
    }

    /// Lifts entries below [`CLAMP_EPS`] to it and renormalizes. Returns an
    /// identical copy when nothing needs lifting.
    pub fn clamped(&self) -> Categorical {
        if self.probs.iter().all(|&p| p >= CLAMP_EPS) {
            return self.clone();
        }
        let lifted: Vec<f64> = self.probs.iter().map(|&p| p.max(CLAMP_EPS)).collect();
        let total = class_sum(lifted.iter().copied(), lifted.len());
        Categorical::from_vec_unchecked(lifted.into_iter().map(|p| p / total).collect())
    }

    /// Natural-log probabilities of the clamped distribution.
    pub fn log_probs(&self) -> LogProbs {
        LogProbs {
            logits: self.clamped().probs.iter().map(|p| p.ln()).collect(),
        }
    }

    /// Largest absolute coordinate difference.
    pub fn max_abs_diff(&self, other: &Categorical) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Applies a class permutation: output class `i` takes input class `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Categorical {
        Categorical::from_vec_unchecked(perm.iter().map(|&j| self.probs[j]).collect())
    }
}

/// Interior natural parameters of a categorical: `K - 1` strictly positive
/// coordinates with sum strictly below one.
///
/// The remainder mass `1 - sum(theta)` is carried alongside so that
/// coordinates near the last vertex keep full relative precision.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalParams {
    theta: Vec<f64>,
    rest: f64,
}

impl NaturalParams {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        let rest = 1.0 - class_sum(theta.iter().copied(), theta.len());
        Self::with_rest(theta, rest)
    }

    fn with_rest(theta: Vec<f64>, rest: f64) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::BoundaryDistribution("empty natural parameter".into()));
        }
        if let Some((i, t)) = theta
            .iter()
            .enumerate()
            .find(|(_, t)| !(t.is_finite() && **t > 0.0))
        {
            return Err(Error::BoundaryDistribution(format!("theta[{i}] = {t}")));
        }
        if !(rest > 0.0) {
            return Err(Error::BoundaryDistribution(format!(
                "remainder mass {rest} is not positive"
            )));
        }
        Ok(Self { theta, rest })
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// Mass of the last class, `1 - sum(theta)`.
    pub fn remainder(&self) -> f64 {
        self.rest
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    /// Componentwise midpoint, itself interior when both ends are.
    pub fn midpoint(&self, other: &NaturalParams) -> Result<NaturalParams> {
        check_dims(self.dim(), other.dim())?;
        Ok(NaturalParams {
            theta: self
                .theta
                .iter()
                .zip(&other.theta)
                .map(|(a, b)| 0.5 * (a + b))
                .collect(),
            rest: 0.5 * (self.rest + other.rest),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogProbs {
    logits: Vec<f64>,
}

impl LogProbs {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if logits.len() < 2 {
            return Err(Error::InvalidDistribution(format!(
                "need at least 2 logits, got {}",
                logits.len()
            )));
        }
        if let Some((i, l)) = logits.iter().enumerate().find(|(_, l)| !l.is_finite()) {
            return Err(Error::NonFinite(format!("logit {i} is {l}")));
        }
        Ok(Self { logits })
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Divides every logit by `temperature`.
    pub fn scaled(&self, temperature: f64) -> LogProbs {
        LogProbs {
            logits: self.logits.iter().map(|l| l / temperature).collect(),
        }
    }
}

fn check_dims(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// `KL(p || q) = sum_j p_j ln(p_j / q_j)` with `0 ln 0 = 0`.
pub fn kld(p: &Categorical, q: &Categorical) -> Result<f64> {
    check_dims(p.k(), q.k())?;
    if let Some(index) = (0..p.k()).find(|&j| p.probs[j] > 0.0 && q.probs[j] == 0.0) {
        return Err(Error::AbsoluteContinuityViolation {
            index,
            p: p.probs[index],
        });
    }
    let terms = p.probs.iter().zip(&q.probs).map(|(&a, &b)| {
        if a > 0.0 {
            a * (a / b).ln()
        } else {
            0.0
        }
    });
    Ok(class_sum(terms, p.k()).max(0.0))
}

/// Jensen-Shannon divergence on raw probability slices; callers guarantee
/// equal lengths.
pub(crate) fn jsd_slices(p: &[f64], q: &[f64]) -> f64 {
    #[inline]
    fn half_term(a: f64, s: f64) -> f64 {
        if a > 0.0 {
            a * (a / s).ln()
        } else {
            0.0
        }
    }
    let terms = p.iter().zip(q).map(|(&a, &b)| {
        let s = 0.5 * (a + b);
        // summed per class so that swapping p and q is bit-exact
        half_term(a, s) + half_term(b, s)
    });
    (0.5 * class_sum(terms, p.len())).clamp(0.0, std::f64::consts::LN_2)
}

/// `JS(p || q) = KL(p || s) / 2 + KL(q || s) / 2` with `s = (p + q) / 2`.
/// Symmetric and bounded by `ln 2`.
pub fn jsd(p: &Categorical, q: &Categorical) -> Result<f64> {
    check_dims(p.k(), q.k())?;
    Ok(jsd_slices(&p.probs, &q.probs))
}

#[inline]
fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// Negative entropy `F(theta)`; minimal (`-ln K`) at the uniform point.
pub fn neg_entropy(theta: &NaturalParams) -> f64 {
    let terms = theta
        .theta
        .iter()
        .map(|&t| xlogx(t))
        .chain(std::iter::once(xlogx(theta.rest)));
    class_sum(terms, theta.dim() + 1)
}

/// Gradient of [`neg_entropy`]: `eta_k = ln(theta_k / (1 - sum(theta)))`.
pub fn grad_neg_entropy(theta: &NaturalParams) -> Vec<f64> {
    let log_rest = theta.rest.ln();
    theta.theta.iter().map(|t| t.ln() - log_rest).collect()
}

/// Inverse gradient map `theta_k = e^{eta_k} / (1 + sum_j e^{eta_j})`,
/// evaluated with a max shift so large `eta` cannot overflow.
pub fn inv_grad_neg_entropy(eta: &[f64]) -> Result<NaturalParams> {
    if let Some((i, e)) = eta.iter().enumerate().find(|(_, e)| !e.is_finite()) {
        return Err(Error::NonFinite(format!("eta[{i}] = {e}")));
    }
    let shift = eta.iter().copied().fold(0.0f64, f64::max);
    let base = (-shift).exp();
    let exps: Vec<f64> = eta.iter().map(|e| (e - shift).exp()).collect();
    let denom = base + class_sum(exps.iter().copied(), exps.len());
    NaturalParams::with_rest(exps.into_iter().map(|e| e / denom).collect(), base / denom)
}

/// Drops the last coordinate of the clamped distribution.
pub fn to_natural(p: &Categorical) -> Result<NaturalParams> {
    let c = p.clamped();
    let k = c.k();
    NaturalParams::with_rest(c.probs[..k - 1].to_vec(), c.probs[k - 1])
}

/// Appends the remainder mass to `theta`.
pub fn from_natural(theta: &NaturalParams) -> Categorical {
    let mut probs = theta.theta.clone();
    probs.push(theta.rest);
    Categorical::from_vec_unchecked(probs)
}

/// `JS(theta1 || theta2) = (F(theta1) + F(theta2)) / 2 - F((theta1 + theta2) / 2)`.
pub fn jsd_natural(t1: &NaturalParams, t2: &NaturalParams) -> Result<f64> {
    let mid = t1.midpoint(t2)?;
    Ok((0.5 * (neg_entropy(t1) + neg_entropy(t2)) - neg_entropy(&mid)).max(0.0))
}

/// Max-shifted softmax; adding a constant to every logit leaves it unchanged.
pub fn softmax(l: &LogProbs) -> Categorical {
    Categorical::from_vec_unchecked(softmax_slice(&l.logits))
}

pub(crate) fn softmax_slice(logits: &[f64]) -> Vec<f64> {
    let shift = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - shift).exp()).collect();
    let total = class_sum(exps.iter().copied(), exps.len());
    exps.into_iter().map(|e| e / total).collect()
}

/// `log(sum(exp(xs)))` with a max shift.
pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let shift = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if shift == f64::NEG_INFINITY {
        return shift;
    }
    shift + xs.iter().map(|x| (x - shift).exp()).sum::<f64>().ln()
}
