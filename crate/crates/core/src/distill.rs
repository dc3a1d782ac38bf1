//! Distillation of soft labels into a linear softmax classifier trained on
//! `KL(target || prediction)`.

use serde::{Deserialize, Serialize};

use crate::distributions::{log_sum_exp, Categorical};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    item_ids: Vec<String>,
    features: Vec<Vec<f64>>,
    targets: Vec<Categorical>,
    gold: Vec<Option<usize>>,
}

impl FeatureDataset {
    pub fn new(item_ids: Vec<String>, features: Vec<Vec<f64>>, targets: Vec<Categorical>) -> Result<Self> {
        let n = item_ids.len();
        if features.len() != n || targets.len() != n {
            return Err(Error::LengthMismatch {
                left: n,
                right: if features.len() != n { features.len() } else { targets.len() },
            });
        }
        if n == 0 {
            return Err(Error::EmptyInput("feature dataset has no items".into()));
        }
        let d = features[0].len();
        let k = targets[0].k();
        for (id, (x, t)) in item_ids.iter().zip(features.iter().zip(&targets)) {
            if x.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: x.len() });
            }
            if t.k() != k {
                return Err(Error::DimensionMismatch { expected: k, got: t.k() });
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("features of item {id:?}")));
            }
        }
        Ok(Self {
            item_ids,
            features,
            targets,
            gold: vec![None; n],
        })
    }

    pub fn with_gold(mut self, gold: Vec<Option<usize>>) -> Result<Self> {
        if gold.len() != self.len() {
            return Err(Error::LengthMismatch {
                left: self.len(),
                right: gold.len(),
            });
        }
        let k = self.k();
        if let Some(g) = gold.iter().flatten().find(|&&g| g >= k) {
            return Err(Error::UnknownLabel(format!("gold index {g} with K = {k}")));
        }
        self.gold = gold;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn k(&self) -> usize {
        self.targets[0].k()
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn targets(&self) -> &[Categorical] {
        &self.targets
    }

    pub fn gold(&self) -> &[Option<usize>] {
        &self.gold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSoftmaxModel {
    /// `K x D`.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LinearSoftmaxModel {
    pub fn new(weights: Vec<Vec<f64>>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != bias.len() {
            return Err(Error::DimensionMismatch {
                expected: bias.len(),
                got: weights.len(),
            });
        }
        if bias.len() < 2 {
            return Err(Error::Config("model needs at least 2 classes".into()));
        }
        let d = weights[0].len();
        if let Some(row) = weights.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch { expected: d, got: row.len() });
        }
        if weights.iter().flatten().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(k: usize, d: usize) -> Self {
        Self {
            weights: vec![vec![0.0; d]; k],
            bias: vec![0.0; k],
        }
    }

    pub fn k(&self) -> usize {
        self.bias.len()
    }

    pub fn dim(&self) -> usize {
        self.weights[0].len()
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
            .collect()
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: d,
            });
        }
        Ok(())
    }

    fn check_dataset(&self, ds: &FeatureDataset) -> Result<()> {
        self.check_dim(ds.dim())?;
        if ds.k() != self.k() {
            return Err(Error::DimensionMismatch {
                expected: self.k(),
                got: ds.k(),
            });
        }
        Ok(())
    }
}

/// `softmax(W x + b)`.
pub fn predict(m: &LinearSoftmaxModel, x: &[f64]) -> Result<Categorical> {
    m.check_dim(x.len())?;
    let logits = m.logits(x);
    let lse = log_sum_exp(&logits);
    Ok(Categorical::from_vec_unchecked(
        logits.iter().map(|l| (l - lse).exp()).collect(),
    ))
}

/// `KL(target || softmax(z))` from logits, via log-softmax so it stays finite.
fn item_kld(target: &Categorical, logits: &[f64]) -> f64 {
    let lse = log_sum_exp(logits);
    target
        .probs()
        .iter()
        .zip(logits)
        .map(|(&t, &z)| if t > 0.0 { t * (t.ln() - (z - lse)) } else { 0.0 })
        .sum::<f64>()
        .max(0.0)
}

/// Mean `KL(target || prediction)` over the dataset.
pub fn kld_loss(m: &LinearSoftmaxModel, ds: &FeatureDataset) -> Result<f64> {
    m.check_dataset(ds)?;
    let total: f64 = ds
        .features
        .iter()
        .zip(&ds.targets)
        .map(|(x, t)| item_kld(t, &m.logits(x)))
        .sum();
    Ok(total / ds.len() as f64)
}

/// [`kld_loss`] plus `l2 * ||W||^2`.
pub fn objective(m: &LinearSoftmaxModel, ds: &FeatureDataset, l2: f64) -> Result<f64> {
    let penalty: f64 = m.weights.iter().flatten().map(|w| w * w).sum();
    Ok(kld_loss(m, ds)? + l2 * penalty)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

/// Mean gradient over `indices` of the KL term, plus `2 * l2 * W`.
fn gradient_on(m: &LinearSoftmaxModel, ds: &FeatureDataset, indices: &[usize], l2: f64) -> Gradient {
    let (k, d) = (m.k(), m.dim());
    let mut gw = vec![vec![0.0; d]; k];
    let mut gb = vec![0.0; k];
    let scale = 1.0 / indices.len() as f64;
    for &i in indices {
        let x = &ds.features[i];
        let logits = m.logits(x);
        let lse = log_sum_exp(&logits);
        for c in 0..k {
            // d KL / d z_c = prediction_c - target_c
            let delta = ((logits[c] - lse).exp() - ds.targets[i].probs()[c]) * scale;
            gb[c] += delta;
            for (g, xv) in gw[c].iter_mut().zip(x) {
                *g += delta * xv;
            }
        }
    }
    for (grow, wrow) in gw.iter_mut().zip(&m.weights) {
        for (g, w) in grow.iter_mut().zip(wrow) {
            *g += 2.0 * l2 * w;
        }
    }
    Gradient {
        weights: gw,
        bias: gb,
    }
}

/// Exact gradient of [`objective`] with respect to `W` and `b`.
pub fn grad_kld(m: &LinearSoftmaxModel, ds: &FeatureDataset, l2: f64) -> Result<Gradient> {
    m.check_dataset(ds)?;
    let all: Vec<usize> = (0..ds.len()).collect();
    Ok(gradient_on(m, ds, &all, l2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub step_size: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub seed: u64,
    /// Stop once an accepted epoch lowers the objective by less than this.
    pub tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            step_size: 0.5,
            max_epochs: 500,
            batch_size: 32,
            l2: 0.0,
            seed: 0,
            tol: 1e-9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::Config(format!("step_size must be > 0, got {}", self.step_size)));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.max_epochs < 1 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if !(self.l2 >= 0.0) || !self.l2.is_finite() {
            return Err(Error::Config(format!("l2 must be >= 0, got {}", self.l2)));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Config(format!("tol must be >= 0, got {}", self.tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub model: LinearSoftmaxModel,
    /// Objective before training and after every accepted epoch.
    pub loss_trace: Vec<f64>,
    pub epochs: usize,
    pub final_step_size: f64,
}

/// Mini-batch gradient descent from a zero model with a seeded shuffle per
/// epoch. An epoch that would raise the full-data objective is discarded
/// and the step size halved, so the recorded trace never increases.
pub fn train(ds: &FeatureDataset, cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    let mut model = LinearSoftmaxModel::zeros(ds.k(), ds.dim());
    let mut loss = objective(&model, ds, cfg.l2)?;
    let mut trace = vec![loss];
    let mut step = cfg.step_size;
    let mut rng = SeededRng::new(cfg.seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut epochs = 0;
    while epochs < cfg.max_epochs {
        epochs += 1;
        rng.shuffle(&mut order);
        let mut candidate = model.clone();
        for batch in order.chunks(cfg.batch_size) {
            let g = gradient_on(&candidate, ds, batch, cfg.l2);
            for (wrow, grow) in candidate.weights.iter_mut().zip(&g.weights) {
                for (w, gv) in wrow.iter_mut().zip(grow) {
                    *w -= step * gv;
                }
            }
            for (b, gv) in candidate.bias.iter_mut().zip(&g.bias) {
                *b -= step * gv;
            }
        }
        let next = objective(&candidate, ds, cfg.l2)?;
        if !next.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss became {next} in epoch {epochs} (step size {step})"
            )));
        }
        if next <= loss {
            let improvement = loss - next;
            model = candidate;
            loss = next;
            trace.push(loss);
            if improvement < cfg.tol {
                break;
            }
        } else {
            step *= 0.5;
            if step < 1e-12 {
                break;
            }
        }
    }
    Ok(TrainResult {
        model,
        loss_trace: trace,
        epochs,
        final_step_size: step,
    })
}
