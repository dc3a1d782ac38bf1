//! Combining an ensemble of soft-label views into one distribution per item.
//!
//! Four aggregators are provided:
//!
//! * [`average`]: the arithmetic mean of the members.
//! * [`js_centroid`]: the minimizer of the summed Jensen-Shannon divergence
//!   to the members, found by the concave-convex procedure in natural
//!   coordinates. Writing `F` for the negative entropy, each step solves
//!   `grad F(theta') = mean_m grad F((theta_m + theta) / 2)`, starting from
//!   the average. Every step is non-increasing in the objective.
//! * [`temperature_scaled_average`]: one temperature per view, fitted so the
//!   softened views agree (pairwise JSD) under an L2 penalty on the
//!   temperatures, then averaged.
//! * [`hybrid`]: the same temperatures followed by the centroid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{
    from_natural, grad_neg_entropy, inv_grad_neg_entropy, jsd_slices, softmax_slice, to_natural,
    Categorical, NaturalParams,
};
use crate::error::{Error, Result};

/// `M` aligned views per item over a shared set of `K` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    method_names: Vec<String>,
    item_ids: Vec<String>,
    members: Vec<Vec<Categorical>>,
}

impl Ensemble {
    /// `members[i][m]` is method `m`'s distribution for item `i`.
    pub fn new(
        method_names: Vec<String>,
        item_ids: Vec<String>,
        members: Vec<Vec<Categorical>>,
    ) -> Result<Self> {
        if method_names.is_empty() {
            return Err(Error::Config("an ensemble needs at least one method".into()));
        }
        for (i, name) in method_names.iter().enumerate() {
            if method_names[..i].contains(name) {
                return Err(Error::Config(format!("duplicate method name {name:?}")));
            }
        }
        if item_ids.len() != members.len() {
            return Err(Error::LengthMismatch {
                left: item_ids.len(),
                right: members.len(),
            });
        }
        if item_ids.is_empty() {
            return Err(Error::EmptyInput("ensemble has no items".into()));
        }
        let k = members[0].first().map(Categorical::k).unwrap_or(0);
        for (id, row) in item_ids.iter().zip(&members) {
            if row.len() != method_names.len() {
                return Err(Error::Parse(format!(
                    "item {id:?} has {} distributions for {} methods",
                    row.len(),
                    method_names.len()
                )));
            }
            if let Some(bad) = row.iter().find(|c| c.k() != k) {
                return Err(Error::DimensionMismatch {
                    expected: k,
                    got: bad.k(),
                });
            }
        }
        Ok(Self {
            method_names,
            item_ids,
            members,
        })
    }

    /// Ensemble from per-method columns (`views[m][i]`), all aligned with `item_ids`.
    pub fn from_views(
        method_names: Vec<String>,
        item_ids: Vec<String>,
        views: Vec<Vec<Categorical>>,
    ) -> Result<Self> {
        if views.len() != method_names.len() {
            return Err(Error::LengthMismatch {
                left: method_names.len(),
                right: views.len(),
            });
        }
        for v in &views {
            if v.len() != item_ids.len() {
                return Err(Error::LengthMismatch {
                    left: item_ids.len(),
                    right: v.len(),
                });
            }
        }
        let members = (0..item_ids.len())
            .map(|i| views.iter().map(|v| v[i].clone()).collect())
            .collect();
        Self::new(method_names, item_ids, members)
    }

    pub fn method_names(&self) -> &[String] {
        &self.method_names
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn members(&self) -> &[Vec<Categorical>] {
        &self.members
    }

    pub fn item(&self, i: usize) -> &[Categorical] {
        &self.members[i]
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn n_methods(&self) -> usize {
        self.method_names.len()
    }

    pub fn k(&self) -> usize {
        self.members[0][0].k()
    }

    /// Reorders methods: new method `j` is old method `perm[j]`.
    pub fn permute_methods(&self, perm: &[usize]) -> Result<Ensemble> {
        Ensemble::new(
            perm.iter().map(|&j| self.method_names[j].clone()).collect(),
            self.item_ids.clone(),
            self.members
                .iter()
                .map(|row| perm.iter().map(|&j| row[j].clone()).collect())
                .collect(),
        )
    }

    /// Relabels classes: new class `c` is old class `perm[c]`.
    pub fn permute_classes(&self, perm: &[usize]) -> Result<Ensemble> {
        Ensemble::new(
            self.method_names.clone(),
            self.item_ids.clone(),
            self.members
                .iter()
                .map(|row| row.iter().map(|c| c.permuted(perm)).collect())
                .collect(),
        )
    }
}

/// Mean of the given distributions.
pub fn average_members(members: &[Categorical]) -> Result<Categorical> {
    let first = members
        .first()
        .ok_or_else(|| Error::EmptyInput("no members to average".into()))?;
    let k = first.k();
    let mut acc = vec![0.0; k];
    for m in members {
        if m.k() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: m.k(),
            });
        }
        for (a, p) in acc.iter_mut().zip(m.probs()) {
            *a += p;
        }
    }
    let n = members.len() as f64;
    Ok(Categorical::from_vec_unchecked(
        acc.into_iter().map(|a| a / n).collect(),
    ))
}

/// Per-item arithmetic mean of the views.
pub fn average(e: &Ensemble) -> Vec<Categorical> {
    e.members
        .iter()
        .map(|row| average_members(row).expect("ensemble rows are validated"))
        .collect()
}

/// `sum_m JS(p_m || q)`.
pub fn jsc_objective(q: &Categorical, members: &[Categorical]) -> Result<f64> {
    members.iter().try_fold(0.0, |acc, p| {
        if p.k() != q.k() {
            return Err(Error::DimensionMismatch {
                expected: q.k(),
                got: p.k(),
            });
        }
        Ok(acc + jsd_slices(p.probs(), q.probs()))
    })
}

/// One concave-convex update of the centroid iterate:
/// `theta' = (grad F)^-1( mean_m grad F((theta_m + theta) / 2) )`.
pub fn cccp_step(theta: &NaturalParams, member_thetas: &[NaturalParams]) -> Result<NaturalParams> {
    if member_thetas.is_empty() {
        return Err(Error::EmptyInput("no members for the centroid step".into()));
    }
    let mut eta = vec![0.0; theta.dim()];
    for m in member_thetas {
        let g = grad_neg_entropy(&theta.midpoint(m)?);
        for (e, gk) in eta.iter_mut().zip(g) {
            *e += gk;
        }
    }
    let n = member_thetas.len() as f64;
    eta.iter_mut().for_each(|e| *e /= n);
    inv_grad_neg_entropy(&eta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CccpConfig {
    pub max_iters: usize,
    /// Stop once one step lowers the objective by less than this.
    pub tol: f64,
    pub record_trace: bool,
}

impl Default for CccpConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-10,
            record_trace: false,
        }
    }
}

impl CccpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::Config("cccp max_iters must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("cccp tol must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Centroid {
    pub probs: Categorical,
    /// False when `max_iters` ran out while steps still improved by `tol` or more.
    pub converged: bool,
    pub iterations: usize,
    /// Objective at the initial point and after every step (when requested).
    pub objective_trace: Vec<f64>,
}

/// Jensen-Shannon centroid of one item's members.
pub fn centroid(members: &[Categorical], cfg: &CccpConfig) -> Result<Centroid> {
    cfg.validate()?;
    let clamped: Vec<Categorical> = members.iter().map(Categorical::clamped).collect();
    let thetas = clamped.iter().map(to_natural).collect::<Result<Vec<_>>>()?;
    let mut theta = to_natural(&average_members(&clamped)?)?;
    let mut objective = jsc_objective(&from_natural(&theta), &clamped)?;
    let mut trace = Vec::new();
    if cfg.record_trace {
        trace.push(objective);
    }
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        let next = cccp_step(&theta, &thetas)?;
        let next_objective = jsc_objective(&from_natural(&next), &clamped)?;
        let decrease = objective - next_objective;
        theta = next;
        objective = next_objective;
        iterations += 1;
        if cfg.record_trace {
            trace.push(objective);
        }
        if decrease < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(Centroid {
        probs: from_natural(&theta),
        converged,
        iterations,
        objective_trace: trace,
    })
}

/// Per-item Jensen-Shannon centroids; items are solved independently.
pub fn js_centroid(e: &Ensemble, cfg: &CccpConfig) -> Result<Vec<Centroid>> {
    cfg.validate()?;
    e.members.par_iter().map(|row| centroid(row, cfg)).collect()
}

/// One positive temperature per method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Temperatures {
    pub t: Vec<f64>,
}

impl Temperatures {
    pub fn new(t: Vec<f64>) -> Result<Self> {
        if let Some(bad) = t.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
            return Err(Error::Config(format!("temperature {bad} is not positive")));
        }
        Ok(Self { t })
    }

    pub fn uniform(m: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; m])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TempFitConfig {
    /// Weight of the `sum_m T_m^2` penalty.
    pub lambda: f64,
    pub step_size: f64,
    pub max_steps: usize,
    /// Temperatures are projected onto `[t_min, inf)` after every step.
    pub t_min: f64,
    /// Unused by the deterministic full-batch optimizer; recorded so runs
    /// carry a complete configuration.
    pub seed: u64,
}

impl Default for TempFitConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            step_size: 0.05,
            max_steps: 2000,
            t_min: 0.25,
            seed: 0,
        }
    }
}

impl TempFitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::Config(format!(
                "step_size must be > 0, got {}",
                self.step_size
            )));
        }
        if self.max_steps < 1 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if !(self.t_min > 0.0) || !self.t_min.is_finite() {
            return Err(Error::Config(format!("t_min must be > 0, got {}", self.t_min)));
        }
        Ok(())
    }
}

/// Log-probabilities of the clamped members, `[item][method][class]`.
fn member_logits(e: &Ensemble) -> Vec<Vec<Vec<f64>>> {
    e.members
        .iter()
        .map(|row| row.iter().map(|c| c.log_probs().logits().to_vec()).collect())
        .collect()
}

fn check_temperatures(e: &Ensemble, t: &Temperatures) -> Result<()> {
    if t.t.len() != e.n_methods() {
        return Err(Error::DimensionMismatch {
            expected: e.n_methods(),
            got: t.t.len(),
        });
    }
    Ok(())
}

/// Temperature-fitting objective and its gradient:
/// `mean_i (1/Z) sum_{j<k} JS(p~_ij || p~_ik) + lambda * sum_m T_m^2`,
/// with `Z = M(M-1)/2` and `p~ = softmax(log p / T)`.
fn temperature_objective(
    logits: &[Vec<Vec<f64>>],
    t: &[f64],
    lambda: f64,
    want_grad: bool,
) -> (f64, Vec<f64>) {
    let m = t.len();
    let z = (m * (m - 1) / 2) as f64;
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; m];
    let mut scaled = vec![Vec::new(); m];
    let mut dscaled = vec![Vec::new(); m];
    for item in logits {
        for j in 0..m {
            let zj: Vec<f64> = item[j].iter().map(|l| l / t[j]).collect();
            let p = softmax_slice(&zj);
            if want_grad {
                // d p_c / d T = -(p_c / T^2) (l_c - sum_d p_d l_d)
                let mean: f64 = p.iter().zip(&item[j]).map(|(pc, lc)| pc * lc).sum();
                let t2 = t[j] * t[j];
                dscaled[j] = p
                    .iter()
                    .zip(&item[j])
                    .map(|(pc, lc)| -pc * (lc - mean) / t2)
                    .collect();
            }
            scaled[j] = p;
        }
        let mut item_loss = 0.0;
        for j in 0..m {
            for k in j + 1..m {
                item_loss += jsd_slices(&scaled[j], &scaled[k]);
                if want_grad {
                    // d JS / d p_c = ln(p_c / s_c) / 2
                    let (pj, pk) = (&scaled[j], &scaled[k]);
                    let mut gj = 0.0;
                    let mut gk = 0.0;
                    for c in 0..pj.len() {
                        let s = 0.5 * (pj[c] + pk[c]);
                        if pj[c] > 0.0 {
                            gj += 0.5 * (pj[c] / s).ln() * dscaled[j][c];
                        }
                        if pk[c] > 0.0 {
                            gk += 0.5 * (pk[c] / s).ln() * dscaled[k][c];
                        }
                    }
                    grad[j] += gj / (z * n);
                    grad[k] += gk / (z * n);
                }
            }
        }
        loss += item_loss / (z * n);
    }
    for (g, tm) in grad.iter_mut().zip(t) {
        loss += lambda * tm * tm;
        *g += 2.0 * lambda * tm;
    }
    (loss, grad)
}

/// Value of the temperature-fitting objective at `t`.
pub fn temperature_loss(e: &Ensemble, t: &Temperatures, lambda: f64) -> Result<f64> {
    check_temperatures(e, t)?;
    if e.n_methods() < 2 {
        return Err(Error::Config("temperature fitting needs at least 2 methods".into()));
    }
    Ok(temperature_objective(&member_logits(e), &t.t, lambda, false).0)
}

/// Analytic gradient of [`temperature_loss`] with respect to each temperature.
pub fn temperature_loss_grad(e: &Ensemble, t: &Temperatures, lambda: f64) -> Result<Vec<f64>> {
    check_temperatures(e, t)?;
    if e.n_methods() < 2 {
        return Err(Error::Config("temperature fitting needs at least 2 methods".into()));
    }
    Ok(temperature_objective(&member_logits(e), &t.t, lambda, true).1)
}

/// Projected gradient descent on the temperature objective, starting from
/// `T = 1` (or `t_min` if larger) for every method.
pub fn fit_temperatures(e: &Ensemble, cfg: &TempFitConfig) -> Result<Temperatures> {
    cfg.validate()?;
    if e.n_methods() < 2 {
        return Err(Error::Config(format!(
            "temperature fitting needs at least 2 methods, got {}",
            e.n_methods()
        )));
    }
    let logits = member_logits(e);
    let mut t = vec![1.0f64.max(cfg.t_min); e.n_methods()];
    for _ in 0..cfg.max_steps {
        let (_, grad) = temperature_objective(&logits, &t, cfg.lambda, true);
        let mut moved = 0.0f64;
        for (tm, g) in t.iter_mut().zip(&grad) {
            let next = (*tm - cfg.step_size * g).max(cfg.t_min);
            moved = moved.max((next - *tm).abs());
            *tm = next;
        }
        if !moved.is_finite() {
            return Err(Error::NonFinite("temperature update diverged".into()));
        }
        if moved < 1e-12 {
            break;
        }
    }
    Temperatures::new(t)
}

/// Softens each method's distributions: `p~_m = softmax(log p_m / T_m)`.
pub fn apply_temperatures(e: &Ensemble, t: &Temperatures) -> Result<Ensemble> {
    check_temperatures(e, t)?;
    let members = e
        .members
        .iter()
        .map(|row| {
            row.iter()
                .zip(&t.t)
                .map(|(c, &tm)| {
                    let scaled = c.log_probs().scaled(tm);
                    Categorical::from_vec_unchecked(softmax_slice(scaled.logits()))
                })
                .collect()
        })
        .collect();
    Ok(Ensemble {
        method_names: e.method_names.clone(),
        item_ids: e.item_ids.clone(),
        members,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemperedAverage {
    pub temperatures: Temperatures,
    pub probs: Vec<Categorical>,
}

/// Fits temperatures, applies them, then averages.
pub fn temperature_scaled_average(e: &Ensemble, cfg: &TempFitConfig) -> Result<TemperedAverage> {
    let temperatures = fit_temperatures(e, cfg)?;
    let probs = average(&apply_temperatures(e, &temperatures)?);
    Ok(TemperedAverage {
        temperatures,
        probs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemperedCentroid {
    pub temperatures: Temperatures,
    pub centroids: Vec<Centroid>,
}

/// Fits temperatures, applies them, then takes the Jensen-Shannon centroid.
pub fn hybrid(e: &Ensemble, tcfg: &TempFitConfig, ccfg: &CccpConfig) -> Result<TemperedCentroid> {
    ccfg.validate()?;
    let temperatures = fit_temperatures(e, tcfg)?;
    let centroids = js_centroid(&apply_temperatures(e, &temperatures)?, ccfg)?;
    Ok(TemperedCentroid {
        temperatures,
        centroids,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    Avg,
    Jsc,
    Temp,
    Hybrid,
}

impl Aggregator {
    pub const ALL: [Aggregator; 4] = [Aggregator::Avg, Aggregator::Jsc, Aggregator::Temp, Aggregator::Hybrid];

    pub fn name(&self) -> &'static str {
        match self {
            Aggregator::Avg => "avg",
            Aggregator::Jsc => "jsc",
            Aggregator::Temp => "temp",
            Aggregator::Hybrid => "hybrid",
        }
    }
}

impl std::str::FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Aggregator::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown aggregator {s:?}; expected one of avg, jsc, temp, hybrid")))
    }
}

/// Output of [`aggregate`]: one distribution per item plus per-item
/// convergence flags (always true for the closed-form aggregators).
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub aggregator: Aggregator,
    pub probs: Vec<Categorical>,
    pub converged: Vec<bool>,
    pub temperatures: Option<Temperatures>,
}

pub fn aggregate(
    e: &Ensemble,
    aggregator: Aggregator,
    tcfg: &TempFitConfig,
    ccfg: &CccpConfig,
) -> Result<Aggregate> {
    let all_true = |n| vec![true; n];
    let (probs, converged, temperatures) = match aggregator {
        Aggregator::Avg => (average(e), all_true(e.n_items()), None),
        Aggregator::Jsc => {
            let c = js_centroid(e, ccfg)?;
            let conv = c.iter().map(|x| x.converged).collect();
            (c.into_iter().map(|x| x.probs).collect(), conv, None)
        }
        Aggregator::Temp => {
            let r = temperature_scaled_average(e, tcfg)?;
            (r.probs, all_true(e.n_items()), Some(r.temperatures))
        }
        Aggregator::Hybrid => {
            let r = hybrid(e, tcfg, ccfg)?;
            let conv = r.centroids.iter().map(|x| x.converged).collect();
            (
                r.centroids.into_iter().map(|x| x.probs).collect(),
                conv,
                Some(r.temperatures),
            )
        }
    };
    Ok(Aggregate {
        aggregator,
        probs,
        converged,
        temperatures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::jsd;
    use crate::rng::SeededRng;

    fn cat(v: &[f64]) -> Categorical {
        Categorical::new(v.to_vec()).unwrap()
    }

    fn ensemble(items: Vec<Vec<Categorical>>) -> Ensemble {
        let m = items[0].len();
        Ensemble::new(
            (0..m).map(|j| format!("m{j}")).collect(),
            (0..items.len()).map(|i| format!("i{i}")).collect(),
            items,
        )
        .unwrap()
    }

    fn random_interior(rng: &mut SeededRng, k: usize) -> Categorical {
        let w: Vec<f64> = (0..k).map(|_| 0.02 + rng.uniform()).collect();
        Categorical::from_weights(&w).unwrap()
    }

    fn random_ensemble(rng: &mut SeededRng, n: usize, m: usize, k: usize) -> Ensemble {
        ensemble(
            (0..n)
                .map(|_| (0..m).map(|_| random_interior(rng, k)).collect())
                .collect(),
        )
    }

    /// Independent JSD: direct sum over classes through the mixture.
    fn jsd_ref(p: &[f64], q: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (a, b) in p.iter().zip(q) {
            let s = (a + b) / 2.0;
            if *a > 0.0 {
                acc += 0.5 * a * (a / s).ln();
            }
            if *b > 0.0 {
                acc += 0.5 * b * (b / s).ln();
            }
        }
        acc
    }

    /// Brute-force minimizer of the summed JSD over the 1-simplex.
    fn grid_centroid(members: &[Vec<f64>], step: f64) -> f64 {
        let n = (1.0 / step).round() as usize;
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..=n {
            let q0 = i as f64 * step;
            let q = [q0, 1.0 - q0];
            let obj: f64 = members.iter().map(|p| jsd_ref(p, &q)).sum();
            if obj < best.0 {
                best = (obj, q0);
            }
        }
        best.1
    }

    #[test]
    fn average_examples() {
        let p = cat(&[0.2, 0.3, 0.5]);
        let e = ensemble(vec![vec![p.clone(), p.clone(), p.clone()]]);
        assert!(average(&e)[0].max_abs_diff(&p) < 1e-15);
        let e = ensemble(vec![vec![cat(&[1.0, 0.0]), cat(&[0.0, 1.0])]]);
        assert_eq!(average(&e)[0].probs(), &[0.5, 0.5]);
        let e = ensemble(vec![vec![cat(&[0.9, 0.1]), cat(&[0.5, 0.5]), cat(&[0.1, 0.9])]]);
        assert!(average(&e)[0].max_abs_diff(&cat(&[0.5, 0.5])) < 1e-15);
    }

    #[test]
    fn ensemble_validation() {
        let bad_k = Ensemble::new(
            vec!["a".into(), "b".into()],
            vec!["x".into()],
            vec![vec![cat(&[0.5, 0.5]), cat(&[0.2, 0.3, 0.5])]],
        );
        assert!(matches!(bad_k, Err(Error::DimensionMismatch { .. })));
        let missing = Ensemble::new(
            vec!["a".into(), "b".into()],
            vec!["x".into()],
            vec![vec![cat(&[0.5, 0.5])]],
        );
        assert!(missing.is_err());
        let dup = Ensemble::new(
            vec!["a".into(), "a".into()],
            vec!["x".into()],
            vec![vec![cat(&[0.5, 0.5]), cat(&[0.5, 0.5])]],
        );
        assert!(dup.is_err());
    }

    #[test]
    fn jsc_objective_examples() {
        let p = cat(&[0.3, 0.7]);
        assert_eq!(jsc_objective(&p, std::slice::from_ref(&p)).unwrap(), 0.0);
        // mpmath: 2 * JS([1,0] || [0.5,0.5]) = 0.431523108677671391158828508991
        let v = jsc_objective(&cat(&[0.5, 0.5]), &[cat(&[1.0, 0.0]), cat(&[0.0, 1.0])]).unwrap();
        assert!((v - 0.431_523_108_677_671_4).abs() < 1e-14);
        assert!(jsc_objective(&cat(&[0.5, 0.5]), &[cat(&[0.2, 0.3, 0.5])]).is_err());
    }

    #[test]
    fn cccp_step_fixed_points() {
        let star = to_natural(&cat(&[0.2, 0.3, 0.5])).unwrap();
        let next = cccp_step(&star, &[star.clone(), star.clone()]).unwrap();
        for (a, b) in next.theta().iter().zip(star.theta()) {
            assert!((a - b).abs() < 1e-15);
        }
        let members = [
            to_natural(&cat(&[0.8, 0.2])).unwrap(),
            to_natural(&cat(&[0.2, 0.8])).unwrap(),
        ];
        let start = to_natural(&cat(&[0.5, 0.5])).unwrap();
        let next = cccp_step(&start, &members).unwrap();
        assert!((next.theta()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cccp_step_never_increases_objective() {
        let mut rng = SeededRng::new(31);
        for _ in 0..300 {
            let k = 2 + rng.index(5);
            let m = 2 + rng.index(4);
            let members: Vec<Categorical> = (0..m).map(|_| random_interior(&mut rng, k)).collect();
            let thetas: Vec<_> = members.iter().map(|p| to_natural(p).unwrap()).collect();
            let start = to_natural(&random_interior(&mut rng, k)).unwrap();
            let before = jsc_objective(&from_natural(&start), &members).unwrap();
            let next = cccp_step(&start, &thetas).unwrap();
            let after = jsc_objective(&from_natural(&next), &members).unwrap();
            assert!(after <= before + 1e-12, "{before} -> {after}");
        }
    }

    #[test]
    fn centroid_analytic_cases() {
        let p = cat(&[0.15, 0.25, 0.6]);
        let c = centroid(&[p.clone(), p.clone(), p.clone()], &CccpConfig::default()).unwrap();
        assert!(c.probs.max_abs_diff(&p) < 1e-9);
        assert!(c.converged);
        let c = centroid(&[cat(&[0.8, 0.2]), cat(&[0.2, 0.8])], &CccpConfig::default()).unwrap();
        assert!(c.probs.max_abs_diff(&cat(&[0.5, 0.5])) < 1e-6);
        // boundary members are echoed up to the clamp
        let one_hot = cat(&[1.0, 0.0]);
        let c = centroid(&[one_hot.clone(), one_hot.clone()], &CccpConfig::default()).unwrap();
        assert!(c.probs.max_abs_diff(&one_hot) < 1e-9);
    }

    #[test]
    fn centroid_matches_grid_oracle() {
        let members = [cat(&[0.9, 0.1]), cat(&[0.6, 0.4]), cat(&[0.5, 0.5])];
        let raw: Vec<Vec<f64>> = members.iter().map(|c| c.probs().to_vec()).collect();
        let oracle = grid_centroid(&raw, 1e-4);
        let c = centroid(&members, &CccpConfig::default()).unwrap();
        assert!((c.probs.probs()[0] - oracle).abs() < 2e-4, "{} vs {oracle}", c.probs.probs()[0]);
        // the centroid sits strictly between the average and the nearest hub
        let avg = average_members(&members).unwrap();
        assert!(jsc_objective(&c.probs, &members).unwrap() <= jsc_objective(&avg, &members).unwrap() + 1e-12);
    }

    #[test]
    fn centroid_trace_is_monotone_and_beats_average() {
        let mut rng = SeededRng::new(5);
        let cfg = CccpConfig {
            record_trace: true,
            ..CccpConfig::default()
        };
        for _ in 0..200 {
            let k = 2 + rng.index(6);
            let m = 1 + rng.index(6);
            let members: Vec<Categorical> = (0..m).map(|_| random_interior(&mut rng, k)).collect();
            let c = centroid(&members, &cfg).unwrap();
            for w in c.objective_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12);
            }
            let at_avg = jsc_objective(&average_members(&members).unwrap(), &members).unwrap();
            assert!(jsc_objective(&c.probs, &members).unwrap() <= at_avg + 1e-9);
            assert!((c.probs.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn non_convergence_is_flagged_not_fatal() {
        let cfg = CccpConfig {
            max_iters: 1,
            tol: 1e-300,
            record_trace: false,
        };
        let c = centroid(&[cat(&[0.99, 0.01]), cat(&[0.4, 0.6]), cat(&[0.3, 0.7])], &cfg).unwrap();
        assert!(!c.converged);
        assert_eq!(c.iterations, 1);
    }

    #[test]
    fn js_centroid_over_items() {
        let e = ensemble(vec![
            vec![cat(&[0.8, 0.2]), cat(&[0.2, 0.8])],
            vec![cat(&[0.3, 0.7]), cat(&[0.3, 0.7])],
        ]);
        let out = js_centroid(&e, &CccpConfig::default()).unwrap();
        assert!(out[0].probs.max_abs_diff(&cat(&[0.5, 0.5])) < 1e-6);
        assert!(out[1].probs.max_abs_diff(&cat(&[0.3, 0.7])) < 1e-9);
    }

    #[test]
    fn apply_temperatures_examples() {
        let mut rng = SeededRng::new(8);
        let e = random_ensemble(&mut rng, 10, 3, 4);
        let same = apply_temperatures(&e, &Temperatures::uniform(3, 1.0).unwrap()).unwrap();
        for (a, b) in e.members().iter().flatten().zip(same.members().iter().flatten()) {
            assert!(a.max_abs_diff(b) < 1e-12);
        }
        let hot = apply_temperatures(&e, &Temperatures::uniform(3, 1e6).unwrap()).unwrap();
        for c in hot.members().iter().flatten() {
            assert!(c.max_abs_diff(&Categorical::uniform(4).unwrap()) < 1e-5);
        }
        let mixed = apply_temperatures(&e, &Temperatures::new(vec![0.3, 2.0, 7.5]).unwrap()).unwrap();
        for (a, b) in e.members().iter().flatten().zip(mixed.members().iter().flatten()) {
            assert_eq!(a.argmax(), b.argmax());
        }
        assert!(apply_temperatures(&e, &Temperatures::uniform(2, 1.0).unwrap()).is_err());
        assert!(Temperatures::new(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn identical_members_drive_temperatures_to_floor() {
        let p = cat(&[0.7, 0.2, 0.1]);
        let q = cat(&[0.1, 0.1, 0.8]);
        let e = ensemble(vec![vec![p.clone(); 3], vec![q.clone(); 3]]);
        let cfg = TempFitConfig::default();
        let t = fit_temperatures(&e, &cfg).unwrap();
        assert!(t.t.iter().all(|&x| (x - cfg.t_min).abs() < 1e-12), "{:?}", t.t);
        // and the scaled average is the floor-softened member
        let r = temperature_scaled_average(&e, &cfg).unwrap();
        let softened = crate::distributions::softmax(&p.log_probs().scaled(cfg.t_min));
        assert!(r.probs[0].max_abs_diff(&softened) < 1e-12);
        let h = hybrid(&e, &cfg, &CccpConfig::default()).unwrap();
        assert!(h.centroids[0].probs.max_abs_diff(&softened) < 1e-9);
    }

    #[test]
    fn unregularized_loss_prefers_hot_temperatures() {
        let e = ensemble(vec![vec![cat(&[0.9, 0.1]), cat(&[0.3, 0.7])]]);
        let hot = temperature_loss(&e, &Temperatures::uniform(2, 1000.0).unwrap(), 0.0).unwrap();
        let cold = temperature_loss(&e, &Temperatures::uniform(2, 1.0).unwrap(), 0.0).unwrap();
        assert!(hot < cold);
    }

    #[test]
    fn temperature_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(77);
        let h = 1e-5;
        for trial in 0..40 {
            let m = 2 + rng.index(3);
            let (n, k) = (1 + rng.index(5), 2 + rng.index(4));
            let e = random_ensemble(&mut rng, n, m, k);
            let t: Vec<f64> = (0..m).map(|_| 0.3 + 4.0 * rng.uniform()).collect();
            let lambda = if trial % 2 == 0 { 0.0 } else { 0.05 };
            let g = temperature_loss_grad(&e, &Temperatures::new(t.clone()).unwrap(), lambda).unwrap();
            let mut fd = vec![0.0; m];
            for j in 0..m {
                let mut up = t.clone();
                let mut dn = t.clone();
                up[j] += h;
                dn[j] -= h;
                let fu = temperature_loss(&e, &Temperatures::new(up).unwrap(), lambda).unwrap();
                let fl = temperature_loss(&e, &Temperatures::new(dn).unwrap(), lambda).unwrap();
                fd[j] = (fu - fl) / (2.0 * h);
            }
            let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-8);
            assert!(diff / scale < 1e-5, "rel err {} at {t:?}", diff / scale);
        }
    }

    #[test]
    fn temperature_fit_requires_two_methods() {
        let e = ensemble(vec![vec![cat(&[0.9, 0.1])]]);
        assert!(matches!(fit_temperatures(&e, &TempFitConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn symmetric_pair_hybrid_is_uniform() {
        let e = ensemble(vec![vec![cat(&[0.8, 0.2]), cat(&[0.2, 0.8])]]);
        let h = hybrid(&e, &TempFitConfig::default(), &CccpConfig::default()).unwrap();
        assert!((h.temperatures.t[0] - h.temperatures.t[1]).abs() < 1e-12);
        assert!(h.centroids[0].probs.max_abs_diff(&cat(&[0.5, 0.5])) < 1e-6);
    }

    #[test]
    fn method_order_does_not_matter() {
        let mut rng = SeededRng::new(12);
        let e = random_ensemble(&mut rng, 6, 4, 3);
        let perm = [2, 0, 3, 1];
        let p = e.permute_methods(&perm).unwrap();
        let (tc, cc) = (TempFitConfig::default(), CccpConfig::default());
        for agg in Aggregator::ALL {
            let a = aggregate(&e, agg, &tc, &cc).unwrap();
            let b = aggregate(&p, agg, &tc, &cc).unwrap();
            for (x, y) in a.probs.iter().zip(&b.probs) {
                assert!(x.max_abs_diff(y) < 1e-9, "{agg:?}");
            }
            if let (Some(ta), Some(tb)) = (a.temperatures, b.temperatures) {
                for (j, &src) in perm.iter().enumerate() {
                    assert!((tb.t[j] - ta.t[src]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn class_permutation_is_equivariant() {
        let mut rng = SeededRng::new(13);
        let e = random_ensemble(&mut rng, 6, 3, 4);
        let perm = [3, 1, 0, 2];
        let p = e.permute_classes(&perm).unwrap();
        let (tc, cc) = (TempFitConfig::default(), CccpConfig::default());
        for agg in Aggregator::ALL {
            let a = aggregate(&e, agg, &tc, &cc).unwrap();
            let b = aggregate(&p, agg, &tc, &cc).unwrap();
            for (x, y) in a.probs.iter().zip(&b.probs) {
                assert!(x.permuted(&perm).max_abs_diff(y) < 1e-9, "{agg:?}");
            }
        }
    }

    #[test]
    fn tempered_average_is_softer_for_small_lambda() {
        // Softening every member need not raise the entropy of each item's
        // mixture, so the property is checked on the mean over items.
        let mut rng = SeededRng::new(41);
        let cfg = TempFitConfig {
            lambda: 1e-4,
            ..TempFitConfig::default()
        };
        let mean_entropy = |ps: &[Categorical]| ps.iter().map(Categorical::entropy).sum::<f64>() / ps.len() as f64;
        for _ in 0..10 {
            let e = random_ensemble(&mut rng, 8, 3, 3);
            let t = temperature_scaled_average(&e, &cfg).unwrap();
            assert!(t.temperatures.t.iter().all(|&v| v >= 1.0));
            assert!(mean_entropy(&t.probs) >= mean_entropy(&average(&e)) - 1e-12);
        }
    }

    #[test]
    fn aggregator_names_parse() {
        for a in Aggregator::ALL {
            assert_eq!(a.name().parse::<Aggregator>().unwrap(), a);
        }
        assert!("median".parse::<Aggregator>().is_err());
    }

    #[test]
    fn jsd_reference_agrees_with_library() {
        let p = cat(&[0.2, 0.5, 0.3]);
        let q = cat(&[0.6, 0.1, 0.3]);
        assert!((jsd_ref(p.probs(), q.probs()) - jsd(&p, &q).unwrap()).abs() < 1e-15);
    }
}
