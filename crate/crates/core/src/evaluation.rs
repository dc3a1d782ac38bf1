//! Metrics: macro-F1, negative log-likelihood, calibrated log-likelihood,
//! Pearson correlation and the hub analysis of ensemble members.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::Ensemble;
use crate::distributions::{jsd, log_sum_exp, Categorical};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

fn check_lengths(left: usize, right: usize) -> Result<()> {
    if left != right {
        return Err(Error::LengthMismatch { left, right });
    }
    Ok(())
}

/// Unweighted mean of per-class F1 over every class that occurs in either
/// `preds` or `golds`. A class with `precision + recall == 0` scores 0.
pub fn macro_f1(preds: &[usize], golds: &[usize]) -> Result<f64> {
    check_lengths(preds.len(), golds.len())?;
    if preds.is_empty() {
        return Err(Error::EmptyInput("no predictions to score".into()));
    }
    let mut classes: Vec<usize> = preds.iter().chain(golds).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    let total: f64 = classes
        .iter()
        .map(|&c| {
            let mut tp = 0usize;
            let mut fp = 0usize;
            let mut fn_ = 0usize;
            for (&p, &g) in preds.iter().zip(golds) {
                match (p == c, g == c) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
            let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
            if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / classes.len() as f64)
}

fn check_golds(probs: &[Categorical], golds: &[usize]) -> Result<()> {
    check_lengths(probs.len(), golds.len())?;
    if probs.is_empty() {
        return Err(Error::EmptyInput("no predictions to score".into()));
    }
    for (p, &g) in probs.iter().zip(golds) {
        if g >= p.k() {
            return Err(Error::UnknownLabel(format!("gold index {g} with K = {}", p.k())));
        }
    }
    Ok(())
}

/// `-(1/n) sum ln p_i[gold_i]` on clamped probabilities.
pub fn nll(probs: &[Categorical], golds: &[usize]) -> Result<f64> {
    check_golds(probs, golds)?;
    let total: f64 = probs
        .iter()
        .zip(golds)
        .map(|(p, &g)| -p.clamped().probs()[g].ln())
        .sum();
    Ok(total / probs.len() as f64)
}

/// NLL after dividing the clamped log-probabilities by `t`, over `subset`.
fn scaled_nll(logs: &[Vec<f64>], golds: &[usize], subset: &[usize], t: f64) -> f64 {
    let total: f64 = subset
        .iter()
        .map(|&i| {
            let scaled: Vec<f64> = logs[i].iter().map(|l| l / t).collect();
            log_sum_exp(&scaled) - scaled[golds[i]]
        })
        .sum();
    total / subset.len() as f64
}

fn clamped_logs(probs: &[Categorical]) -> Vec<Vec<f64>> {
    probs
        .iter()
        .map(|p| p.clamped().probs().iter().map(|v| v.ln()).collect())
        .collect()
}

/// Minimizes `f` on `[lo, hi]` by golden-section search until the bracket
/// is narrower than `tol`.
pub fn golden_section<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if b - a <= tol {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CllConfig {
    pub n_splits: usize,
    pub seed: u64,
    pub t_bounds: (f64, f64),
}

impl Default for CllConfig {
    fn default() -> Self {
        Self {
            n_splits: 5,
            seed: 0,
            t_bounds: (0.05, 50.0),
        }
    }
}

impl CllConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_splits < 1 {
            return Err(Error::Config("n_splits must be at least 1".into()));
        }
        let (lo, hi) = self.t_bounds;
        if !(lo > 0.0) || !(hi > lo) || !hi.is_finite() {
            return Err(Error::Config(format!("invalid temperature bounds ({lo}, {hi})")));
        }
        Ok(())
    }
}

const T_TOL: f64 = 1e-7;

/// Temperature minimizing the NLL of `softmax(ln p / T)` within `cfg.t_bounds`.
pub fn fit_cll_temperature(probs: &[Categorical], golds: &[usize], cfg: &CllConfig) -> Result<f64> {
    cfg.validate()?;
    check_golds(probs, golds)?;
    let logs = clamped_logs(probs);
    let all: Vec<usize> = (0..probs.len()).collect();
    Ok(fit_on(&logs, golds, &all, cfg))
}

fn fit_on(logs: &[Vec<f64>], golds: &[usize], subset: &[usize], cfg: &CllConfig) -> f64 {
    let (lo, hi) = cfg.t_bounds;
    golden_section(|t| scaled_nll(logs, golds, subset, t), lo, hi, T_TOL)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CllReport {
    /// Mean test-half log-likelihood (higher is better).
    pub cll: f64,
    /// Temperature-scaled test-half NLL of each split.
    pub split_nll: Vec<f64>,
    /// Temperature fitted on the validation half of each split.
    pub split_temperatures: Vec<f64>,
}

/// For each seeded half/half split: fit a temperature on the validation
/// half, then score the temperature-scaled log-likelihood of the test half.
/// Returns the mean over splits along with per-split values.
pub fn calibrated_log_likelihood(probs: &[Categorical], golds: &[usize], cfg: &CllConfig) -> Result<CllReport> {
    cfg.validate()?;
    check_golds(probs, golds)?;
    let n = probs.len();
    if n < 2 {
        return Err(Error::EmptyInput("calibrated log-likelihood needs at least 2 items".into()));
    }
    let logs = clamped_logs(probs);
    let splits: Vec<(f64, f64)> = (0..cfg.n_splits)
        .into_par_iter()
        .map(|s| {
            let mut order: Vec<usize> = (0..n).collect();
            SeededRng::derived(cfg.seed, s as u64).shuffle(&mut order);
            let (val, test) = order.split_at(n / 2);
            let t = fit_on(&logs, golds, val, cfg);
            (t, scaled_nll(&logs, golds, test, t))
        })
        .collect();
    let split_temperatures: Vec<f64> = splits.iter().map(|s| s.0).collect();
    let split_nll: Vec<f64> = splits.iter().map(|s| s.1).collect();
    let cll = -split_nll.iter().sum::<f64>() / cfg.n_splits as f64;
    Ok(CllReport {
        cll,
        split_nll,
        split_temperatures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_items: usize,
    pub macro_f1: f64,
    pub nll: f64,
    pub cll: f64,
    pub split_nll: Vec<f64>,
    pub split_temperatures: Vec<f64>,
}

/// Macro-F1 of the argmax predictions, raw NLL and calibrated log-likelihood.
pub fn evaluate(probs: &[Categorical], golds: &[usize], cfg: &CllConfig) -> Result<EvalReport> {
    check_golds(probs, golds)?;
    let preds: Vec<usize> = probs.iter().map(Categorical::argmax).collect();
    let report = calibrated_log_likelihood(probs, golds, cfg)?;
    Ok(EvalReport {
        n_items: probs.len(),
        macro_f1: macro_f1(&preds, golds)?,
        nll: nll(probs, golds)?,
        cll: report.cll,
        split_nll: report.split_nll,
        split_temperatures: report.split_temperatures,
    })
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_lengths(xs.len(), ys.len())?;
    if xs.len() < 2 {
        return Err(Error::EmptyInput("Pearson correlation needs at least 2 points".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Pearson input".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ConstantSeries);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HubStats {
    pub method: String,
    /// Mean over items of `JSD(aggregate || member)`.
    pub to_aggregate: f64,
    /// Mean over the other members of the per-item mean pairwise JSD.
    pub to_others: f64,
}

/// Per-method distance to the aggregate and to the other members.
pub fn hub_analysis(e: &Ensemble, aggregate: &[Categorical]) -> Result<Vec<HubStats>> {
    check_lengths(e.n_items(), aggregate.len())?;
    let (n, m) = (e.n_items(), e.n_methods());
    if let Some(q) = aggregate.iter().find(|q| q.k() != e.k()) {
        return Err(Error::DimensionMismatch {
            expected: e.k(),
            got: q.k(),
        });
    }
    let mut to_agg = vec![0.0; m];
    let mut pair = vec![vec![0.0; m]; m];
    for (i, q) in aggregate.iter().enumerate() {
        let members = e.item(i);
        for a in 0..m {
            to_agg[a] += jsd(q, &members[a])?;
            for b in (a + 1)..m {
                let d = jsd(&members[a], &members[b])?;
                pair[a][b] += d;
                pair[b][a] += d;
            }
        }
    }
    Ok((0..m)
        .map(|a| {
            let others = if m > 1 {
                pair[a].iter().sum::<f64>() / n as f64 / (m - 1) as f64
            } else {
                0.0
            };
            HubStats {
                method: e.method_names()[a].clone(),
                to_aggregate: to_agg[a] / n as f64,
                to_others: others,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::{js_centroid, CccpConfig};

    fn cat(v: &[f64]) -> Categorical {
        Categorical::new(v.to_vec()).unwrap()
    }

    /// Random predictive distributions with golds drawn from them.
    fn calibrated(n: usize, k: usize, seed: u64) -> (Vec<Categorical>, Vec<usize>) {
        let mut rng = SeededRng::new(seed);
        let probs: Vec<Categorical> = (0..n).map(|_| Categorical::new(rng.simplex(k)).unwrap()).collect();
        let golds = probs.iter().map(|p| rng.categorical(p.probs())).collect();
        (probs, golds)
    }

    fn sharpen(p: &Categorical, t: f64) -> Categorical {
        let w: Vec<f64> = p.probs().iter().map(|v| v.powf(1.0 / t)).collect();
        Categorical::from_weights(&w).unwrap()
    }

    #[test]
    fn macro_f1_examples() {
        assert_eq!(macro_f1(&[0, 1, 2, 1], &[0, 1, 2, 1]).unwrap(), 1.0);
        assert!((macro_f1(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap() - 0.5).abs() < 1e-15);
        assert!((macro_f1(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(macro_f1(&[0], &[0, 1]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn macro_f1_is_permutation_invariant() {
        let mut rng = SeededRng::new(4);
        for _ in 0..50 {
            let n = 1 + rng.index(30);
            let preds: Vec<usize> = (0..n).map(|_| rng.index(4)).collect();
            let golds: Vec<usize> = (0..n).map(|_| rng.index(4)).collect();
            let perm = [2, 0, 3, 1];
            let f = macro_f1(&preds, &golds).unwrap();
            let pp: Vec<usize> = preds.iter().map(|&c| perm[c]).collect();
            let pg: Vec<usize> = golds.iter().map(|&c| perm[c]).collect();
            assert!((f - macro_f1(&pp, &pg).unwrap()).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&f));
        }
    }

    #[test]
    fn nll_examples() {
        let v = nll(&[cat(&[0.5, 0.5])], &[0]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        let u = Categorical::uniform(4).unwrap();
        let v = nll(&[u.clone(), u.clone(), u], &[0, 3, 1]).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
        let v = nll(&[cat(&[0.0, 1.0, 0.0])], &[1]).unwrap();
        assert!((0.0..1e-11).contains(&v));
        assert!(nll(&[cat(&[0.5, 0.5])], &[0, 1]).is_err());
    }

    #[test]
    fn uniform_predictor_is_temperature_free() {
        let probs = vec![Categorical::uniform(3).unwrap(); 20];
        let golds: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let cfg = CllConfig::default();
        let t = fit_cll_temperature(&probs, &golds, &cfg).unwrap();
        assert!(t >= cfg.t_bounds.0 && t <= cfg.t_bounds.1);
        let r = calibrated_log_likelihood(&probs, &golds, &cfg).unwrap();
        assert!((r.cll + 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn calibrated_predictor_needs_no_scaling() {
        let (probs, golds) = calibrated(10_000, 3, 5);
        let t = fit_cll_temperature(&probs, &golds, &CllConfig::default()).unwrap();
        assert!((t - 1.0).abs() < 0.1, "T = {t}");
    }

    #[test]
    fn sharpened_predictor_is_undone() {
        let (probs, golds) = calibrated(10_000, 3, 5);
        let sharp: Vec<Categorical> = probs.iter().map(|p| sharpen(p, 0.5)).collect();
        let t = fit_cll_temperature(&sharp, &golds, &CllConfig::default()).unwrap();
        assert!((t - 2.0).abs() < 0.1, "T = {t}");
    }

    #[test]
    fn cll_matches_expected_log_likelihood() {
        let (probs, golds) = calibrated(10_000, 3, 5);
        let expected = -probs.iter().map(|p| p.entropy()).sum::<f64>() / probs.len() as f64;
        let cfg = CllConfig { seed: 11, ..CllConfig::default() };
        let r = calibrated_log_likelihood(&probs, &golds, &cfg).unwrap();
        assert!((r.cll - expected).abs() < 0.02, "cll {} expected {}", r.cll, expected);
        assert_eq!(r.split_nll.len(), 5);
        let mean = -r.split_nll.iter().sum::<f64>() / 5.0;
        assert_eq!(r.cll, mean);
        assert_eq!(r, calibrated_log_likelihood(&probs, &golds, &cfg).unwrap());
    }

    #[test]
    fn single_split_has_no_averaging() {
        let (probs, golds) = calibrated(200, 3, 8);
        let cfg = CllConfig { n_splits: 1, ..CllConfig::default() };
        let r = calibrated_log_likelihood(&probs, &golds, &cfg).unwrap();
        assert_eq!(r.cll, -r.split_nll[0]);
    }

    #[test]
    fn golden_section_agrees_with_grid() {
        let mut rng = SeededRng::new(21);
        for trial in 0..5 {
            let (probs, golds) = calibrated(60, 2 + trial % 3, 100 + trial as u64);
            let sharp: Vec<Categorical> = probs.iter().map(|p| sharpen(p, 0.3 + 2.0 * rng.uniform())).collect();
            let cfg = CllConfig { t_bounds: (0.05, 10.0), ..CllConfig::default() };
            let t = fit_cll_temperature(&sharp, &golds, &cfg).unwrap();
            let logs = clamped_logs(&sharp);
            let all: Vec<usize> = (0..sharp.len()).collect();
            let mut best = (f64::INFINITY, 0.0);
            let steps = ((cfg.t_bounds.1 - cfg.t_bounds.0) / 1e-3).round() as usize;
            for s in 0..=steps {
                let g = cfg.t_bounds.0 + s as f64 * 1e-3;
                let v = scaled_nll(&logs, &golds, &all, g);
                if v < best.0 {
                    best = (v, g);
                }
            }
            assert!((t - best.1).abs() < 1e-3, "golden {t}, grid {}", best.1);
        }
    }

    #[test]
    fn cll_rejects_bad_input() {
        let p = vec![cat(&[0.5, 0.5])];
        assert!(matches!(calibrated_log_likelihood(&p, &[0], &CllConfig::default()), Err(Error::EmptyInput(_))));
        assert!(fit_cll_temperature(&[], &[], &CllConfig::default()).is_err());
        let bad = CllConfig { t_bounds: (0.0, 1.0), ..CllConfig::default() };
        assert!(fit_cll_temperature(&p, &[0], &bad).is_err());
    }

    #[test]
    fn pearson_examples() {
        let xs = [1.0, 2.0, 3.0, 4.5];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 3.0).collect();
        assert!((pearson(&xs, &ys).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::ConstantSeries));
        assert!(matches!(pearson(&[1.0], &[1.0, 2.0]), Err(Error::LengthMismatch { .. })));
    }

    fn ensemble(members: Vec<Vec<Categorical>>) -> Ensemble {
        let m = members[0].len();
        let names = (0..m).map(|i| format!("m{i}")).collect();
        let ids = (0..members.len()).map(|i| format!("i{i}")).collect();
        Ensemble::new(names, ids, members).unwrap()
    }

    #[test]
    fn hub_analysis_identical_and_pairs() {
        let p = cat(&[0.2, 0.8]);
        let e = ensemble(vec![vec![p.clone(); 3]; 4]);
        for h in hub_analysis(&e, &vec![p.clone(); 4]).unwrap() {
            assert_eq!((h.to_aggregate, h.to_others), (0.0, 0.0));
        }
        let a = cat(&[0.1, 0.9]);
        let b = cat(&[0.6, 0.4]);
        let c = cat(&[0.3, 0.7]);
        let e = ensemble(vec![vec![a.clone(), b.clone()], vec![c.clone(), a.clone()]]);
        let want = (jsd(&a, &b).unwrap() + jsd(&c, &a).unwrap()) / 2.0;
        let h = hub_analysis(&e, &average_of(&e)).unwrap();
        assert!((h[0].to_others - want).abs() < 1e-15);
        assert!((h[1].to_others - want).abs() < 1e-15);
        assert!(hub_analysis(&e, &[a]).is_err());
    }

    fn average_of(e: &Ensemble) -> Vec<Categorical> {
        crate::aggregation::average(e)
    }

    #[test]
    fn centroid_distances_track_hubness() {
        let mut rng = SeededRng::new(13);
        let mut items = Vec::new();
        for _ in 0..50 {
            let base = rng.simplex(3);
            let mut members: Vec<Categorical> = (0..3)
                .map(|_| {
                    let w: Vec<f64> = base.iter().map(|b| b + 0.02 * rng.uniform()).collect();
                    Categorical::from_weights(&w).unwrap()
                })
                .collect();
            let outlier: Vec<f64> = base.iter().rev().map(|b| b + 0.05).collect();
            members.push(Categorical::from_weights(&outlier).unwrap());
            items.push(members);
        }
        let e = ensemble(items);
        let centres: Vec<Categorical> = js_centroid(&e, &CccpConfig::default())
            .unwrap()
            .into_iter()
            .map(|c| c.probs)
            .collect();
        let h = hub_analysis(&e, &centres).unwrap();
        let xs: Vec<f64> = h.iter().map(|s| s.to_aggregate).collect();
        let ys: Vec<f64> = h.iter().map(|s| s.to_others).collect();
        assert!(pearson(&xs, &ys).unwrap() > 0.9);
    }

    #[test]
    fn evaluate_reports_everything() {
        let probs = vec![cat(&[0.9, 0.1]), cat(&[0.2, 0.8]), cat(&[0.6, 0.4]), cat(&[0.3, 0.7])];
        let golds = [0, 1, 1, 1];
        let r = evaluate(&probs, &golds, &CllConfig::default()).unwrap();
        assert_eq!(r.n_items, 4);
        assert_eq!(r.split_nll.len(), 5);
        assert!((r.macro_f1 - macro_f1(&[0, 1, 0, 1], &golds).unwrap()).abs() < 1e-15);
    }
}
