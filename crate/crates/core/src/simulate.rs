//! Synthetic crowds with known ground truth.

use serde::{Deserialize, Serialize};

use crate::annotations::{AnnotationSet, LabelSpace};
use crate::distributions::{Categorical, SUM_TOL};
use crate::error::{Error, Result};
use crate::rng::{self, SeededRng};

#[derive(Debug, Clone, PartialEq)]
pub enum AnnotatorProfile {
    /// Row `k` is the label distribution emitted when the true class is `k`.
    Confusion(Vec<Vec<f64>>),
    /// Emits labels from a fixed distribution regardless of the truth.
    Spammer(Categorical),
}

impl AnnotatorProfile {
    /// `accuracy` on the diagonal, the rest spread evenly off the diagonal.
    pub fn diagonal(k: usize, accuracy: f64) -> Result<Self> {
        if k < 2 || !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::Config(format!(
                "diagonal profile needs K >= 2 and accuracy in [0, 1], got K = {k}, accuracy = {accuracy}"
            )));
        }
        let off = (1.0 - accuracy) / (k - 1) as f64;
        Ok(Self::Confusion(
            (0..k)
                .map(|r| (0..k).map(|c| if r == c { accuracy } else { off }).collect())
                .collect(),
        ))
    }

    /// Copies the truth with probability `competence`, otherwise draws from
    /// `spam`.
    pub fn mace(k: usize, competence: f64, spam: &Categorical) -> Result<Self> {
        if spam.k() != k || !(0.0..=1.0).contains(&competence) {
            return Err(Error::Config(format!(
                "competence profile needs a spam distribution over {k} labels and competence in [0, 1]"
            )));
        }
        Ok(Self::Confusion(
            (0..k)
                .map(|r| {
                    (0..k)
                        .map(|c| (1.0 - competence) * spam.probs()[c] + if r == c { competence } else { 0.0 })
                        .collect()
                })
                .collect(),
        ))
    }

    pub fn identity(k: usize) -> Result<Self> {
        Self::diagonal(k, 1.0)
    }

    fn validate(&self, k: usize) -> Result<()> {
        match self {
            AnnotatorProfile::Confusion(m) => {
                if m.len() != k {
                    return Err(Error::Config(format!(
                        "confusion matrix has {} rows, expected {k}",
                        m.len()
                    )));
                }
                for row in m {
                    if row.len() != k
                        || row.iter().any(|p| !p.is_finite() || *p < 0.0)
                        || (row.iter().sum::<f64>() - 1.0).abs() > SUM_TOL
                    {
                        return Err(Error::Config(format!(
                            "confusion row {row:?} is not a distribution over {k} labels"
                        )));
                    }
                }
                Ok(())
            }
            AnnotatorProfile::Spammer(d) if d.k() != k => Err(Error::Config(format!(
                "spam distribution has {} classes, expected {k}",
                d.k()
            ))),
            AnnotatorProfile::Spammer(_) => Ok(()),
        }
    }

    fn emission(&self, truth: usize) -> &[f64] {
        match self {
            AnnotatorProfile::Confusion(m) => &m[truth],
            AnnotatorProfile::Spammer(d) => d.probs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_items: usize,
    pub class_prior: Categorical,
    pub profiles: Vec<AnnotatorProfile>,
    pub annotations_per_item: usize,
    pub seed: u64,
    /// Optional label names; defaults to `c0, c1, ...` zero-padded so that
    /// lexicographic order equals index order.
    pub labels: Option<Vec<String>>,
    /// Dimension of the class-conditional Gaussian features emitted per item;
    /// zero disables features.
    pub feature_dim: usize,
    /// Distance between class means in feature space.
    pub feature_separation: f64,
}

impl SimConfig {
    pub fn new(
        n_items: usize,
        class_prior: Categorical,
        profiles: Vec<AnnotatorProfile>,
        annotations_per_item: usize,
        seed: u64,
    ) -> Self {
        Self {
            n_items,
            class_prior,
            profiles,
            annotations_per_item,
            seed,
            labels: None,
            feature_dim: 0,
            feature_separation: 3.0,
        }
    }

    pub fn k(&self) -> usize {
        self.class_prior.k()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if self.n_items == 0 {
            return Err(Error::Config("n_items must be at least 1".into()));
        }
        if self.annotations_per_item == 0 || self.annotations_per_item > self.profiles.len() {
            return Err(Error::Config(format!(
                "annotations_per_item must be in 1..={}, got {}",
                self.profiles.len(),
                self.annotations_per_item
            )));
        }
        for p in &self.profiles {
            p.validate(k)?;
        }
        if let Some(labels) = &self.labels {
            if labels.len() != k {
                return Err(Error::Config(format!(
                    "{} label names for {k} classes",
                    labels.len()
                )));
            }
        }
        if !self.feature_separation.is_finite() {
            return Err(Error::Config("feature_separation must be finite".into()));
        }
        Ok(())
    }

    pub fn label_space(&self) -> Result<LabelSpace> {
        let names = match &self.labels {
            Some(l) => l.clone(),
            None => {
                let width = (self.k() - 1).to_string().len();
                (0..self.k()).map(|i| format!("c{i:0width$}")).collect()
            }
        };
        LabelSpace::new(names)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub annotations: AnnotationSet,
    /// True label index per item, aligned with `annotations.items()`.
    pub truth: Vec<usize>,
    /// Per-item features (empty vectors when `feature_dim == 0`).
    pub features: Vec<Vec<f64>>,
    pub rng_algorithm: &'static str,
}

/// Item and annotator ids used by the simulator.
pub fn item_id(i: usize) -> String {
    format!("item{i:06}")
}

pub fn annotator_id(a: usize) -> String {
    format!("ann{a:04}")
}

/// Samples a crowd. Per item, in stream order: the true label, the annotator
/// subset (partial Fisher-Yates), one label per chosen annotator, then the
/// feature vector. Class means for the features are drawn first, before any
/// item.
pub fn generate_crowd(cfg: &SimConfig) -> Result<SimOutput> {
    cfg.validate()?;
    let space = cfg.label_space()?;
    let k = cfg.k();
    let mut rng = SeededRng::new(cfg.seed);

    let means: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let v: Vec<f64> = (0..cfg.feature_dim).map(|_| rng.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter()
                .map(|x| 0.5 * cfg.feature_separation * x / norm)
                .collect()
        })
        .collect();

    let mut records = Vec::with_capacity(cfg.n_items * cfg.annotations_per_item);
    let mut truth = Vec::with_capacity(cfg.n_items);
    let mut features = Vec::with_capacity(cfg.n_items);
    for i in 0..cfg.n_items {
        let y = rng.categorical(cfg.class_prior.probs());
        truth.push(y);
        let chosen = rng.sample_without_replacement(cfg.profiles.len(), cfg.annotations_per_item);
        let id = item_id(i);
        for a in chosen {
            let label = rng.categorical(cfg.profiles[a].emission(y));
            records.push((id.clone(), annotator_id(a), label));
        }
        features.push(means[y].iter().map(|m| m + rng.normal()).collect());
    }
    let annotations = AnnotationSet::from_records(space, records)?;
    Ok(SimOutput {
        annotations,
        truth,
        features,
        rng_algorithm: rng::ALGORITHM,
    })
}

/// TOML form of [`SimConfig`] used by the command-line front end.
///
/// ```toml
/// n_items = 200
/// annotations_per_item = 5
/// seed = 7
/// class_prior = [0.3, 0.3, 0.4]
///
/// [[annotators]]
/// kind = "diagonal"
/// accuracy = 0.85
/// count = 10
/// ```
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfigFile {
    pub n_items: usize,
    pub annotations_per_item: usize,
    #[serde(default)]
    pub seed: u64,
    pub class_prior: Vec<f64>,
    #[serde(default)]
    pub labels: Option<Vec<String>>,
    #[serde(default)]
    pub feature_dim: usize,
    #[serde(default = "default_separation")]
    pub feature_separation: f64,
    pub annotators: Vec<AnnotatorSpec>,
}

fn default_separation() -> f64 {
    3.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AnnotatorSpec {
    Diagonal {
        accuracy: f64,
        #[serde(default = "one")]
        count: usize,
    },
    Confusion {
        matrix: Vec<Vec<f64>>,
        #[serde(default = "one")]
        count: usize,
    },
    Spammer {
        dist: Vec<f64>,
        #[serde(default = "one")]
        count: usize,
    },
}

fn one() -> usize {
    1
}

impl SimConfigFile {
    pub fn into_config(self) -> Result<SimConfig> {
        let prior = Categorical::new(self.class_prior)
            .map_err(|e| Error::Config(format!("class_prior: {e}")))?;
        let k = prior.k();
        let mut profiles = Vec::new();
        for spec in self.annotators {
            let (profile, count) = match spec {
                AnnotatorSpec::Diagonal { accuracy, count } => {
                    (AnnotatorProfile::diagonal(k, accuracy)?, count)
                }
                AnnotatorSpec::Confusion { matrix, count } => {
                    (AnnotatorProfile::Confusion(matrix), count)
                }
                AnnotatorSpec::Spammer { dist, count } => (
                    AnnotatorProfile::Spammer(
                        Categorical::new(dist).map_err(|e| Error::Config(format!("spammer: {e}")))?,
                    ),
                    count,
                ),
            };
            profiles.extend(std::iter::repeat_n(profile, count));
        }
        let cfg = SimConfig {
            n_items: self.n_items,
            class_prior: prior,
            profiles,
            annotations_per_item: self.annotations_per_item,
            seed: self.seed,
            labels: self.labels,
            feature_dim: self.feature_dim,
            feature_separation: self.feature_separation,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(k: usize) -> Categorical {
        Categorical::uniform(k).unwrap()
    }

    #[test]
    fn identity_profiles_echo_truth() {
        let cfg = SimConfig::new(
            100,
            uniform(3),
            vec![AnnotatorProfile::identity(3).unwrap(); 4],
            3,
            1,
        );
        let out = generate_crowd(&cfg).unwrap();
        for r in out.annotations.records() {
            assert_eq!(r.label, out.truth[r.item]);
        }
        assert_eq!(out.annotations.n_items(), 100);
        assert_eq!(out.annotations.records().len(), 300);
    }

    #[test]
    fn deterministic_given_seed() {
        let mut cfg = SimConfig::new(
            50,
            uniform(2),
            vec![AnnotatorProfile::diagonal(2, 0.7).unwrap(); 5],
            3,
            99,
        );
        cfg.feature_dim = 4;
        assert_eq!(generate_crowd(&cfg).unwrap(), generate_crowd(&cfg).unwrap());
        let mut other = cfg.clone();
        other.seed = 100;
        assert_ne!(generate_crowd(&cfg).unwrap().truth, generate_crowd(&other).unwrap().truth);
    }

    #[test]
    fn spammer_frequencies_follow_spam_distribution() {
        let cfg = SimConfig::new(
            10_000,
            uniform(2),
            vec![AnnotatorProfile::Spammer(uniform(2))],
            1,
            13,
        );
        let out = generate_crowd(&cfg).unwrap();
        let ones = out.annotations.records().iter().filter(|r| r.label == 1).count();
        let freq = ones as f64 / 10_000.0;
        assert!((freq - 0.5).abs() < 0.02, "freq {freq}");
    }

    #[test]
    fn empirical_confusion_converges() {
        let m = vec![
            vec![0.7, 0.2, 0.1],
            vec![0.1, 0.8, 0.1],
            vec![0.25, 0.25, 0.5],
        ];
        let cfg = SimConfig::new(
            10_000,
            uniform(3),
            vec![AnnotatorProfile::Confusion(m.clone())],
            1,
            21,
        );
        let out = generate_crowd(&cfg).unwrap();
        let mut counts = vec![vec![0.0; 3]; 3];
        for r in out.annotations.records() {
            counts[out.truth[r.item]][r.label] += 1.0;
        }
        for (row, want) in counts.iter().zip(&m) {
            let n: f64 = row.iter().sum();
            for (c, w) in row.iter().zip(want) {
                assert!((c / n - w).abs() < 0.03);
            }
        }
    }

    #[test]
    fn config_errors() {
        let too_many = SimConfig::new(
            10,
            uniform(2),
            vec![AnnotatorProfile::identity(2).unwrap(); 2],
            3,
            0,
        );
        assert!(matches!(generate_crowd(&too_many), Err(Error::Config(_))));
        let bad_row = SimConfig::new(
            10,
            uniform(2),
            vec![AnnotatorProfile::Confusion(vec![vec![0.5, 0.6], vec![0.5, 0.5]])],
            1,
            0,
        );
        assert!(generate_crowd(&bad_row).is_err());
        let no_items = SimConfig::new(0, uniform(2), vec![AnnotatorProfile::identity(2).unwrap()], 1, 0);
        assert!(generate_crowd(&no_items).is_err());
        assert!(AnnotatorProfile::diagonal(3, 1.5).is_err());
    }

    #[test]
    fn default_labels_sort_in_index_order() {
        let cfg = SimConfig::new(1, uniform(12), vec![AnnotatorProfile::identity(12).unwrap()], 1, 0);
        let ls = cfg.label_space().unwrap();
        let mut sorted = ls.labels().to_vec();
        sorted.sort();
        assert_eq!(sorted, ls.labels());
    }

    #[test]
    fn toml_config_expands_counts() {
        let text = r#"
            n_items = 20
            annotations_per_item = 3
            seed = 5
            class_prior = [0.5, 0.5]
            [[annotators]]
            kind = "diagonal"
            accuracy = 0.9
            count = 3
            [[annotators]]
            kind = "spammer"
            dist = [1.0, 0.0]
        "#;
        let file: SimConfigFile = toml::from_str(text).unwrap();
        let cfg = file.into_config().unwrap();
        assert_eq!(cfg.profiles.len(), 4);
        assert!(matches!(cfg.profiles[3], AnnotatorProfile::Spammer(_)));
    }
}
