//! Latent-truth models of the crowd. Both models treat each item's true
//! label as a hidden variable and are fitted by (penalized) EM; their
//! per-item posteriors over the true label are the soft-label views.
//!
//! The additive `smoothing` pseudo-count turns every M-step into a MAP
//! update under a symmetric Dirichlet prior. The quantity EM increases is
//! then the marginal log-likelihood plus `smoothing * sum(ln parameter)`;
//! that penalized value is what the trace records. With `smoothing == 0`
//! it is the plain marginal log-likelihood.

mod dawid_skene;
mod mace;

use serde::{Deserialize, Serialize};

pub use dawid_skene::{fit_dawid_skene, DawidSkeneModel};
pub use mace::{fit_mace, MaceModel};

use crate::annotations::{AnnotationSet, LabelSpace};
use crate::distributions::Categorical;
use crate::error::{Error, Result};

/// Serialization format version of fitted models.
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once the objective changes by less than this between iterations.
    pub tol: f64,
    /// Additive pseudo-count on every M-step count statistic.
    pub smoothing: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
            smoothing: 0.01,
            restarts: 5,
            seed: 0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if !(self.smoothing >= 0.0) || !self.smoothing.is_finite() {
            return Err(Error::Config(format!(
                "smoothing must be non-negative, got {}",
                self.smoothing
            )));
        }
        if self.restarts < 1 {
            return Err(Error::Config("restarts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Common surface of fitted latent-truth models.
pub trait AnnotatorModel {
    fn label_space(&self) -> &LabelSpace;
    fn items(&self) -> &[String];
    fn annotators(&self) -> &[String];
    /// Posterior over the true label per item, aligned with [`Self::items`].
    fn posteriors(&self) -> &[Categorical];
    fn log_likelihood_trace(&self) -> &[f64];
    /// Log-likelihood of `a` under the fitted parameters, without the
    /// smoothing prior.
    fn marginal_log_likelihood(&self, a: &AnnotationSet) -> Result<f64>;
    /// The objective EM maximizes: marginal log-likelihood plus the
    /// smoothing prior term. Equals the last trace entry on the training set.
    fn log_likelihood(&self, a: &AnnotationSet) -> Result<f64>;
}

/// Penalized log-likelihood of `a` under `model`; see [`AnnotatorModel::log_likelihood`].
pub fn log_likelihood<M: AnnotatorModel>(model: &M, a: &AnnotationSet) -> Result<f64> {
    model.log_likelihood(a)
}

/// Maps each annotator of `a` to its index in the fitted model.
pub(crate) fn align_annotators(
    labels: &LabelSpace,
    annotators: &[String],
    a: &AnnotationSet,
) -> Result<Vec<usize>> {
    if a.label_space() != labels {
        return Err(Error::LabelSpaceMismatch(format!(
            "model labels {:?}, data labels {:?}",
            labels.labels(),
            a.label_space().labels()
        )));
    }
    a.annotators()
        .iter()
        .map(|name| {
            annotators
                .iter()
                .position(|m| m == name)
                .ok_or_else(|| Error::UnknownAnnotator(name.clone()))
        })
        .collect()
}

/// Normalizes per-class log scores in place and returns their log-sum-exp.
pub(crate) fn normalize_log_scores(scores: &mut [f64]) -> f64 {
    let lse = crate::distributions::log_sum_exp(scores);
    if lse.is_finite() {
        for s in scores.iter_mut() {
            *s = (*s - lse).exp();
        }
    }
    lse
}

/// Picks the restart with the highest final objective; ties keep the
/// earliest restart.
pub(crate) fn best_restart<T>(fits: Vec<Result<(T, f64)>>) -> Result<T> {
    let mut best: Option<(T, f64)> = None;
    let mut last_err = None;
    for fit in fits {
        match fit {
            Ok((m, obj)) => {
                if best.as_ref().is_none_or(|(_, b)| obj > *b) {
                    best = Some((m, obj));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    match (best, last_err) {
        (Some((m, _)), _) => Ok(m),
        (None, Some(e)) => Err(e),
        (None, None) => Err(Error::Config("no restarts were run".into())),
    }
}
