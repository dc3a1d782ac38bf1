//! MACE-style competence model. For every record a latent switch decides
//! whether the annotator copies the true label (probability `competence`)
//! or spams a label drawn from their own `spam_dist`. The true label has a
//! uniform prior.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    align_annotators, best_restart, normalize_log_scores, AnnotatorModel, EmConfig, MODEL_VERSION,
};
use crate::annotations::{AnnotationSet, LabelSpace, Record};
use crate::distributions::Categorical;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

const INITIAL_COMPETENCE: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaceModel {
    pub version: u32,
    pub labels: LabelSpace,
    pub items: Vec<String>,
    pub annotators: Vec<String>,
    pub smoothing: f64,
    /// Probability that each annotator answers faithfully.
    pub competence: Vec<f64>,
    /// Label distribution of each annotator when spamming.
    pub spam_dist: Vec<Categorical>,
    pub posteriors: Vec<Categorical>,
    pub log_likelihood_trace: Vec<f64>,
}

#[derive(Clone)]
struct Params {
    competence: Vec<f64>,
    spam: Vec<Vec<f64>>,
}

impl Params {
    fn penalty(&self, s: f64) -> f64 {
        if s == 0.0 {
            return 0.0;
        }
        let comp: f64 = self
            .competence
            .iter()
            .map(|c| c.ln() + (1.0 - c).ln())
            .sum();
        let spam: f64 = self.spam.iter().flatten().map(|p| p.ln()).sum();
        s * (comp + spam)
    }
}

/// `P(label | truth)` for one annotator.
#[inline]
fn emission(competence: f64, spam: &[f64], truth: usize, label: usize) -> f64 {
    let faithful = if truth == label { competence } else { 0.0 };
    faithful + (1.0 - competence) * spam[label]
}

struct EStep {
    posteriors: Vec<Vec<f64>>,
    /// Posterior probability that each record (in `a.records()` order) was
    /// answered faithfully.
    faithful: Vec<f64>,
    log_likelihood: f64,
}

fn e_step<F: Fn(usize) -> usize>(
    params: &Params,
    a: &AnnotationSet,
    by_item: &[Vec<Record>],
    annotator_of: F,
) -> Result<EStep> {
    let k = a.k();
    let log_prior = -(k as f64).ln();
    let mut ll = 0.0;
    let mut posteriors = Vec::with_capacity(by_item.len());
    for (i, recs) in by_item.iter().enumerate() {
        let mut scores = vec![log_prior; k];
        for r in recs {
            let m = annotator_of(r.annotator);
            let (c, spam) = (params.competence[m], &params.spam[m]);
            for (truth, s) in scores.iter_mut().enumerate() {
                *s += emission(c, spam, truth, r.label).ln();
            }
        }
        let lse = normalize_log_scores(&mut scores);
        if !lse.is_finite() {
            return Err(Error::DegenerateInput(format!(
                "item {:?} has zero likelihood under every class",
                a.items()[i]
            )));
        }
        ll += lse;
        posteriors.push(scores);
    }
    let faithful = a
        .records()
        .iter()
        .map(|r| {
            let m = annotator_of(r.annotator);
            let c = params.competence[m];
            let marginal = emission(c, &params.spam[m], r.label, r.label);
            if marginal > 0.0 {
                posteriors[r.item][r.label] * c / marginal
            } else {
                0.0
            }
        })
        .collect();
    Ok(EStep {
        posteriors,
        faithful,
        log_likelihood: ll,
    })
}

fn m_step(e: &EStep, a: &AnnotationSet, s: f64) -> Params {
    let (n_ann, k) = (a.n_annotators(), a.k());
    let mut faithful = vec![0.0; n_ann];
    let mut total = vec![0.0; n_ann];
    let mut spam = vec![vec![s; k]; n_ann];
    for (r, f) in a.records().iter().zip(&e.faithful) {
        faithful[r.annotator] += f;
        total[r.annotator] += 1.0;
        spam[r.annotator][r.label] += 1.0 - f;
    }
    let competence = faithful
        .iter()
        .zip(&total)
        .map(|(f, n)| (f + s) / (n + 2.0 * s))
        .collect();
    for row in spam.iter_mut() {
        let z: f64 = row.iter().sum();
        if z > 0.0 {
            row.iter_mut().for_each(|p| *p /= z);
        } else {
            row.iter_mut().for_each(|p| *p = 1.0 / k as f64);
        }
    }
    Params { competence, spam }
}

fn initial_params(n_ann: usize, k: usize, restart: usize, seed: u64) -> Params {
    if restart == 0 {
        return Params {
            competence: vec![INITIAL_COMPETENCE; n_ann],
            spam: vec![vec![1.0 / k as f64; k]; n_ann],
        };
    }
    let mut rng = SeededRng::derived(seed, restart as u64);
    let competence = (0..n_ann)
        .map(|_| INITIAL_COMPETENCE + 0.3 * (rng.uniform() - 0.5))
        .collect();
    let spam = (0..n_ann)
        .map(|_| {
            let w: Vec<f64> = (0..k).map(|_| 1.0 + 0.5 * rng.uniform()).collect();
            let z: f64 = w.iter().sum();
            w.into_iter().map(|x| x / z).collect()
        })
        .collect();
    Params { competence, spam }
}

struct Run {
    params: Params,
    posteriors: Vec<Vec<f64>>,
    trace: Vec<f64>,
}

fn run_em(a: &AnnotationSet, by_item: &[Vec<Record>], init: Params, cfg: &EmConfig) -> Result<Run> {
    let mut params = init;
    let mut e = e_step(&params, a, by_item, |x| x)?;
    let mut trace = vec![e.log_likelihood + params.penalty(cfg.smoothing)];
    for _ in 1..cfg.max_iters {
        params = m_step(&e, a, cfg.smoothing);
        e = e_step(&params, a, by_item, |x| x)?;
        let obj = e.log_likelihood + params.penalty(cfg.smoothing);
        let prev = *trace.last().expect("trace is non-empty");
        trace.push(obj);
        if (obj - prev).abs() < cfg.tol {
            break;
        }
    }
    Ok(Run {
        params,
        posteriors: e.posteriors,
        trace,
    })
}

/// Fits the competence model by EM. Restart 0 starts every annotator at
/// competence 0.8 with a uniform spam distribution; later restarts jitter
/// both from a seeded stream.
pub fn fit_mace(a: &AnnotationSet, cfg: &EmConfig) -> Result<MaceModel> {
    cfg.validate()?;
    let by_item = a.records_by_item();
    let runs: Vec<Result<(Run, f64)>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let init = initial_params(a.n_annotators(), a.k(), r, cfg.seed);
            let run = run_em(a, &by_item, init, cfg)?;
            let obj = *run.trace.last().expect("trace is non-empty");
            Ok((run, obj))
        })
        .collect();
    let best = best_restart(runs)?;
    Ok(MaceModel {
        version: MODEL_VERSION,
        labels: a.label_space().clone(),
        items: a.items().to_vec(),
        annotators: a.annotators().to_vec(),
        smoothing: cfg.smoothing,
        competence: best.params.competence,
        spam_dist: best
            .params
            .spam
            .into_iter()
            .map(Categorical::new)
            .collect::<Result<_>>()?,
        posteriors: best
            .posteriors
            .into_iter()
            .map(Categorical::new)
            .collect::<Result<_>>()?,
        log_likelihood_trace: best.trace,
    })
}

impl MaceModel {
    fn params(&self) -> Params {
        Params {
            competence: self.competence.clone(),
            spam: self.spam_dist.iter().map(|d| d.probs().to_vec()).collect(),
        }
    }
}

impl AnnotatorModel for MaceModel {
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
        let e = e_step(&self.params(), a, &a.records_by_item(), |x| map[x])?;
        Ok(e.log_likelihood)
    }

    fn log_likelihood(&self, a: &AnnotationSet) -> Result<f64> {
        Ok(self.marginal_log_likelihood(a)? + self.params().penalty(self.smoothing))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{annotator_id, generate_crowd, AnnotatorProfile, SimConfig};

    fn ls(k: usize) -> LabelSpace {
        LabelSpace::new((0..k).map(|i| format!("l{i}")).collect()).unwrap()
    }

    fn competence_of(m: &MaceModel, name: &str) -> f64 {
        m.competence[m.annotators.iter().position(|a| a == name).unwrap()]
    }

    #[test]
    fn agreeing_annotators_are_competent() {
        let mut recs = Vec::new();
        for i in 0..40 {
            for w in 0..5 {
                recs.push((format!("i{i}"), format!("w{w}"), (i * 7) % 3));
            }
        }
        let a = AnnotationSet::from_records(ls(3), recs).unwrap();
        let m = fit_mace(&a, &EmConfig::default()).unwrap();
        assert!(m.competence.iter().all(|&c| c >= 0.9), "{:?}", m.competence);
        for w in m.log_likelihood_trace.windows(2) {
            assert!(w[1] - w[0] >= -1e-9);
        }
    }

    #[test]
    fn constant_labeller_falls_below_median() {
        let k = 3;
        let mut profiles = vec![
            AnnotatorProfile::mace(k, 0.8, &Categorical::uniform(k).unwrap()).unwrap();
            8
        ];
        profiles.push(AnnotatorProfile::Spammer(
            Categorical::new(vec![1.0, 0.0, 0.0]).unwrap(),
        ));
        let cfg = SimConfig::new(300, Categorical::uniform(k).unwrap(), profiles, 5, 19);
        let sim = generate_crowd(&cfg).unwrap();
        let m = fit_mace(&sim.annotations, &EmConfig::default()).unwrap();
        let mut sorted = m.competence.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        let constant = competence_of(&m, &annotator_id(8));
        assert!(constant < median, "constant {constant}, median {median}");
        let idx = m.annotators.iter().position(|a| a == &annotator_id(8)).unwrap();
        assert_eq!(m.spam_dist[idx].argmax(), 0);
    }

    #[test]
    fn log_likelihood_equals_last_trace_entry() {
        let cfg = SimConfig::new(
            60,
            Categorical::uniform(2).unwrap(),
            vec![AnnotatorProfile::diagonal(2, 0.8).unwrap(); 4],
            3,
            2,
        );
        let sim = generate_crowd(&cfg).unwrap();
        let m = fit_mace(&sim.annotations, &EmConfig::default()).unwrap();
        let ll = m.log_likelihood(&sim.annotations).unwrap();
        assert!((ll - m.log_likelihood_trace.last().unwrap()).abs() < 1e-9);
        assert!(ll.is_finite());
    }

    #[test]
    fn json_round_trip() {
        let a = AnnotationSet::from_records(ls(2), [("x", "w1", 0), ("x", "w2", 0), ("y", "w1", 1)])
            .unwrap();
        let m = fit_mace(&a, &EmConfig::default()).unwrap();
        let back: MaceModel = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(m, back);
    }
}
