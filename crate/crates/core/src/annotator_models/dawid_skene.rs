//! Dawid-Skene: one row-stochastic confusion matrix per annotator
//! (row = true class, column = emitted label) and a shared class prior.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    align_annotators, best_restart, normalize_log_scores, AnnotatorModel, EmConfig, MODEL_VERSION,
};
use crate::annotations::{standard_normalize, vote_counts, AnnotationSet, LabelSpace, Record};
use crate::distributions::Categorical;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DawidSkeneModel {
    pub version: u32,
    pub labels: LabelSpace,
    pub items: Vec<String>,
    pub annotators: Vec<String>,
    pub smoothing: f64,
    pub class_prior: Categorical,
    /// `confusion[a][k]` is the label distribution of annotator `a` on items
    /// whose true class is `k`.
    pub confusion: Vec<Vec<Categorical>>,
    pub posteriors: Vec<Categorical>,
    pub log_likelihood_trace: Vec<f64>,
}

struct Params {
    prior: Vec<f64>,
    confusion: Vec<Vec<Vec<f64>>>,
}

impl Params {
    fn log_tables(&self) -> (Vec<f64>, Vec<Vec<Vec<f64>>>) {
        let lp = self.prior.iter().map(|p| p.ln()).collect();
        let lc = self
            .confusion
            .iter()
            .map(|m| m.iter().map(|row| row.iter().map(|p| p.ln()).collect()).collect())
            .collect();
        (lp, lc)
    }

    /// `smoothing * sum(ln parameter)`, the Dirichlet prior term of the
    /// MAP objective.
    fn penalty(&self, smoothing: f64) -> f64 {
        if smoothing == 0.0 {
            return 0.0;
        }
        let prior: f64 = self.prior.iter().map(|p| p.ln()).sum();
        let conf: f64 = self
            .confusion
            .iter()
            .flat_map(|m| m.iter().flatten())
            .map(|p| p.ln())
            .sum();
        smoothing * (prior + conf)
    }
}

/// Posterior per item and the marginal log-likelihood. `annotator_of` maps a
/// record's annotator index into the parameter tables.
fn e_step<F: Fn(usize) -> usize>(
    params: &Params,
    items: &[String],
    by_item: &[Vec<Record>],
    annotator_of: F,
) -> Result<(Vec<Vec<f64>>, f64)> {
    let (log_prior, log_conf) = params.log_tables();
    let mut ll = 0.0;
    let mut post = Vec::with_capacity(by_item.len());
    for (i, recs) in by_item.iter().enumerate() {
        let mut scores = log_prior.clone();
        for r in recs {
            let table = &log_conf[annotator_of(r.annotator)];
            for (k, s) in scores.iter_mut().enumerate() {
                *s += table[k][r.label];
            }
        }
        let lse = normalize_log_scores(&mut scores);
        if !lse.is_finite() {
            return Err(Error::DegenerateInput(format!(
                "item {:?} has zero likelihood under every class",
                items[i]
            )));
        }
        ll += lse;
        post.push(scores);
    }
    Ok((post, ll))
}

fn m_step(post: &[Vec<f64>], records: &[Record], n_annotators: usize, k: usize, s: f64) -> Params {
    let n = post.len() as f64;
    let mut prior = vec![s; k];
    for row in post {
        for (acc, p) in prior.iter_mut().zip(row) {
            *acc += p;
        }
    }
    let total = n + k as f64 * s;
    prior.iter_mut().for_each(|p| *p /= total);

    let mut counts = vec![vec![vec![s; k]; k]; n_annotators];
    for r in records {
        let table = &mut counts[r.annotator];
        for (truth, p) in post[r.item].iter().enumerate() {
            table[truth][r.label] += p;
        }
    }
    for table in counts.iter_mut() {
        for row in table.iter_mut() {
            let z: f64 = row.iter().sum();
            if z > 0.0 {
                row.iter_mut().for_each(|c| *c /= z);
            } else {
                // no evidence for this true class and no smoothing
                row.iter_mut().for_each(|c| *c = 1.0 / k as f64);
            }
        }
    }
    Params {
        prior,
        confusion: counts,
    }
}

struct Run {
    params: Params,
    posteriors: Vec<Vec<f64>>,
    trace: Vec<f64>,
}

fn initial_posteriors(votes: &[Categorical], restart: usize, seed: u64) -> Vec<Vec<f64>> {
    if restart == 0 {
        return votes.iter().map(|v| v.probs().to_vec()).collect();
    }
    let mut rng = SeededRng::derived(seed, restart as u64);
    votes
        .iter()
        .map(|v| {
            let noise = rng.simplex(v.k());
            v.probs()
                .iter()
                .zip(noise)
                .map(|(p, u)| 0.7 * p + 0.3 * u)
                .collect()
        })
        .collect()
}

fn run_em(a: &AnnotationSet, by_item: &[Vec<Record>], init: Vec<Vec<f64>>, cfg: &EmConfig) -> Result<Run> {
    let k = a.k();
    let mut params = m_step(&init, a.records(), a.n_annotators(), k, cfg.smoothing);
    let (mut post, ll) = e_step(&params, a.items(), by_item, |x| x)?;
    let mut trace = vec![ll + params.penalty(cfg.smoothing)];
    for _ in 1..cfg.max_iters {
        params = m_step(&post, a.records(), a.n_annotators(), k, cfg.smoothing);
        let (p, ll) = e_step(&params, a.items(), by_item, |x| x)?;
        post = p;
        let obj = ll + params.penalty(cfg.smoothing);
        let prev = *trace.last().expect("trace is non-empty");
        trace.push(obj);
        if (obj - prev).abs() < cfg.tol {
            break;
        }
    }
    Ok(Run {
        params,
        posteriors: post,
        trace,
    })
}

/// Fits Dawid-Skene by EM. Restart 0 starts from the normalized vote
/// shares; later restarts perturb those shares with seeded noise. The
/// restart with the highest final objective is kept.
pub fn fit_dawid_skene(a: &AnnotationSet, cfg: &EmConfig) -> Result<DawidSkeneModel> {
    cfg.validate()?;
    let votes = standard_normalize(&vote_counts(a))?;
    let by_item = a.records_by_item();
    let runs: Vec<Result<(Run, f64)>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let run = run_em(a, &by_item, initial_posteriors(&votes, r, cfg.seed), cfg)?;
            let obj = *run.trace.last().expect("trace is non-empty");
            Ok((run, obj))
        })
        .collect();
    let best = best_restart(runs)?;

    let to_cat = |v: Vec<f64>| Categorical::new(v);
    Ok(DawidSkeneModel {
        version: MODEL_VERSION,
        labels: a.label_space().clone(),
        items: a.items().to_vec(),
        annotators: a.annotators().to_vec(),
        smoothing: cfg.smoothing,
        class_prior: to_cat(best.params.prior.clone())?,
        confusion: best
            .params
            .confusion
            .iter()
            .map(|m| m.iter().map(|row| to_cat(row.clone())).collect())
            .collect::<Result<_>>()?,
        posteriors: best.posteriors.into_iter().map(to_cat).collect::<Result<_>>()?,
        log_likelihood_trace: best.trace,
    })
}

impl DawidSkeneModel {
    fn params(&self) -> Params {
        Params {
            prior: self.class_prior.probs().to_vec(),
            confusion: self
                .confusion
                .iter()
                .map(|m| m.iter().map(|row| row.probs().to_vec()).collect())
                .collect(),
        }
    }
}

impl AnnotatorModel for DawidSkeneModel {
    fn label_space(&self) -> &LabelSpace {
        &self.labels
    }

    fn items(&self) -> &[String] {
        &self.items
    }

    fn annotators(&self) -> &[String] {
        &self.annotators
    }

    fn posteriors(&self) -> &[Categorical] {
        &self.posteriors
    }

    fn log_likelihood_trace(&self) -> &[f64] {
        &self.log_likelihood_trace
    }

    fn marginal_log_likelihood(&self, a: &AnnotationSet) -> Result<f64> {
        let map = align_annotators(&self.labels, &self.annotators, a)?;
        let (_, ll) = e_step(&self.params(), a.items(), &a.records_by_item(), |x| map[x])?;
        Ok(ll)
    }

    fn log_likelihood(&self, a: &AnnotationSet) -> Result<f64> {
        Ok(self.marginal_log_likelihood(a)? + self.params().penalty(self.smoothing))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{generate_crowd, AnnotatorProfile, SimConfig};

    fn ls(k: usize) -> LabelSpace {
        LabelSpace::new((0..k).map(|i| format!("l{i}")).collect()).unwrap()
    }

    fn assert_monotone(trace: &[f64]) {
        for w in trace.windows(2) {
            assert!(w[1] - w[0] >= -1e-9, "trace decreased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn unanimous_annotators_give_confident_posteriors() {
        let mut recs = Vec::new();
        for i in 0..30 {
            for w in 0..4 {
                recs.push((format!("i{i}"), format!("w{w}"), i % 3));
            }
        }
        let a = AnnotationSet::from_records(ls(3), recs).unwrap();
        let m = fit_dawid_skene(&a, &EmConfig::default()).unwrap();
        for (i, p) in m.posteriors.iter().enumerate() {
            assert_eq!(p.argmax(), i % 3);
            assert!(p.probs()[i % 3] >= 0.99);
        }
        assert_monotone(&m.log_likelihood_trace);
    }

    #[test]
    fn single_annotation_matches_hand_computed_posterior() {
        // One item labelled 1 by one annotator. Initialization puts all
        // responsibility on class 1, so the first M-step gives
        //   prior    = [s, 1 + s] / (1 + 2s)
        //   conf[0]  = [1/2, 1/2]                 (no mass, smoothing only)
        //   conf[1]  = [s, 1 + s] / (1 + 2s)
        // and the E-step posterior of class 1 is
        //   prior[1] * conf[1][1] / (prior[0] * conf[0][1] + prior[1] * conf[1][1]).
        let a = AnnotationSet::from_records(ls(2), [("x", "w", 1)]).unwrap();
        let s = 0.01;
        let cfg = EmConfig {
            max_iters: 1,
            smoothing: s,
            restarts: 1,
            ..EmConfig::default()
        };
        let m = fit_dawid_skene(&a, &cfg).unwrap();
        let z = 1.0 + 2.0 * s;
        let p0 = (s / z) * 0.5;
        let p1 = ((1.0 + s) / z) * ((1.0 + s) / z);
        let want = p1 / (p0 + p1);
        assert!((m.posteriors[0].probs()[1] - want).abs() < 1e-14);
        assert_eq!(m.posteriors[0].argmax(), 1);
        // log-likelihood consistency with the trace
        let ll = m.log_likelihood(&a).unwrap();
        assert!((ll - m.log_likelihood_trace.last().unwrap()).abs() < 1e-12);
        assert!((m.marginal_log_likelihood(&a).unwrap() - (p0 + p1).ln()).abs() < 1e-14);
    }

    #[test]
    fn recovers_simulated_truth() {
        let cfg = SimConfig::new(
            200,
            Categorical::uniform(3).unwrap(),
            vec![AnnotatorProfile::diagonal(3, 0.85).unwrap(); 10],
            5,
            7,
        );
        let sim = generate_crowd(&cfg).unwrap();
        let m = fit_dawid_skene(&sim.annotations, &EmConfig::default()).unwrap();
        let hits = m
            .posteriors
            .iter()
            .zip(&sim.truth)
            .filter(|(p, &t)| p.argmax() == t)
            .count();
        assert!(hits as f64 / 200.0 >= 0.9, "accuracy {}", hits as f64 / 200.0);
        assert_monotone(&m.log_likelihood_trace);
        for table in &m.confusion {
            for row in table {
                assert!((row.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn best_restart_dominates_every_restart() {
        let cfg = SimConfig::new(
            80,
            Categorical::uniform(3).unwrap(),
            vec![AnnotatorProfile::diagonal(3, 0.6).unwrap(); 6],
            3,
            3,
        );
        let sim = generate_crowd(&cfg).unwrap();
        let em = EmConfig {
            restarts: 4,
            seed: 11,
            ..EmConfig::default()
        };
        let best = fit_dawid_skene(&sim.annotations, &em).unwrap();
        let best_ll = best.log_likelihood(&sim.annotations).unwrap();
        let by_item = sim.annotations.records_by_item();
        let votes = standard_normalize(&vote_counts(&sim.annotations)).unwrap();
        for r in 0..4 {
            let run = run_em(&sim.annotations, &by_item, initial_posteriors(&votes, r, 11), &em).unwrap();
            assert!(best_ll >= run.trace.last().unwrap() - 1e-12);
        }
    }

    #[test]
    fn zero_smoothing_stays_finite_on_consistent_data() {
        let a = AnnotationSet::from_records(
            ls(2),
            [("x", "w1", 0), ("x", "w2", 0), ("y", "w1", 1), ("y", "w2", 1)],
        )
        .unwrap();
        let cfg = EmConfig {
            smoothing: 0.0,
            ..EmConfig::default()
        };
        let m = fit_dawid_skene(&a, &cfg).unwrap();
        assert!(m.log_likelihood(&a).unwrap().is_finite());
    }

    #[test]
    fn log_likelihood_rejects_foreign_data() {
        let a = AnnotationSet::from_records(ls(2), [("x", "w1", 0), ("y", "w2", 1)]).unwrap();
        let m = fit_dawid_skene(&a, &EmConfig::default()).unwrap();
        let other = AnnotationSet::from_records(ls(3), [("x", "w1", 0)]).unwrap();
        assert!(matches!(m.log_likelihood(&other), Err(Error::LabelSpaceMismatch(_))));
        let stranger = AnnotationSet::from_records(ls(2), [("x", "w9", 0)]).unwrap();
        assert!(matches!(m.log_likelihood(&stranger), Err(Error::UnknownAnnotator(_))));
    }

    #[test]
    fn serializes_to_json_and_back() {
        let a = AnnotationSet::from_records(ls(2), [("x", "w1", 0), ("y", "w2", 1)]).unwrap();
        let m = fit_dawid_skene(&a, &EmConfig::default()).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        let back: DawidSkeneModel = serde_json::from_str(&text).unwrap();
        assert_eq!(m, back);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["version"], 1);
        assert_eq!(v["labels"], serde_json::json!(["l0", "l1"]));
    }
}
