//! Python bindings. Distributions cross the boundary as plain lists of
//! floats; the `Categorical` class is available for validation and
//! inspection. Input and configuration errors raise `ValueError`, numerical
//! failures on well-formed input raise `ArithmeticError`.

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use crowd_centroid::aggregation::{self, Aggregator, CccpConfig, Ensemble, TempFitConfig};
use crowd_centroid::annotations::{self, AnnotationSet, LabelSpace, VoteCounts};
use crowd_centroid::annotator_models::{self, AnnotatorModel, EmConfig};
use crowd_centroid::distill::{self, FeatureDataset, TrainConfig};
use crowd_centroid::distributions::{self, LogProbs};
use crowd_centroid::evaluation::{self, CllConfig};
use crowd_centroid::simulate::{generate_crowd, AnnotatorProfile, SimConfig};

fn to_py(e: crowd_centroid::Error) -> PyErr {
    if e.is_input_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyArithmeticError::new_err(e.to_string())
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for crowd_centroid::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn cat(p: Vec<f64>) -> PyResult<distributions::Categorical> {
    distributions::Categorical::new(p).py()
}

fn cats(ps: Vec<Vec<f64>>) -> PyResult<Vec<distributions::Categorical>> {
    ps.into_iter().map(cat).collect()
}

fn lists(ps: Vec<distributions::Categorical>) -> Vec<Vec<f64>> {
    ps.into_iter().map(|c| c.into_vec()).collect()
}

/// A validated probability vector.
#[pyclass(name = "Categorical", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyCategorical(distributions::Categorical);

#[pymethods]
impl PyCategorical {
    #[new]
    fn new(probs: Vec<f64>) -> PyResult<Self> {
        cat(probs).map(Self)
    }

    #[staticmethod]
    fn uniform(k: usize) -> PyResult<Self> {
        distributions::Categorical::uniform(k).py().map(Self)
    }

    #[getter]
    fn probs(&self) -> Vec<f64> {
        self.0.probs().to_vec()
    }

    #[getter]
    fn k(&self) -> usize {
        self.0.k()
    }

    fn entropy(&self) -> f64 {
        self.0.entropy()
    }

    fn argmax(&self) -> usize {
        self.0.argmax()
    }

    fn __len__(&self) -> usize {
        self.0.k()
    }

    fn __repr__(&self) -> String {
        format!("Categorical({:?})", self.0.probs())
    }
}

/// Linear softmax classifier: `softmax(W x + b)`.
#[pyclass(name = "LinearSoftmaxModel", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyLinearSoftmaxModel(distill::LinearSoftmaxModel);

#[pymethods]
impl PyLinearSoftmaxModel {
    #[new]
    fn new(weights: Vec<Vec<f64>>, bias: Vec<f64>) -> PyResult<Self> {
        distill::LinearSoftmaxModel::new(weights, bias).py().map(Self)
    }

    #[getter]
    fn weights(&self) -> Vec<Vec<f64>> {
        self.0.weights.clone()
    }

    #[getter]
    fn bias(&self) -> Vec<f64> {
        self.0.bias.clone()
    }

    #[getter]
    fn k(&self) -> usize {
        self.0.k()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn predict(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        distill::predict(&self.0, &x).py().map(|c| c.into_vec())
    }

    fn predict_many(&self, xs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        xs.iter()
            .map(|x| distill::predict(&self.0, x).py().map(|c| c.into_vec()))
            .collect()
    }

    fn __repr__(&self) -> String {
        format!("LinearSoftmaxModel(k={}, dim={})", self.0.k(), self.0.dim())
    }
}

#[pyfunction]
fn kld(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    distributions::kld(&cat(p)?, &cat(q)?).py()
}

#[pyfunction]
fn jsd(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    distributions::jsd(&cat(p)?, &cat(q)?).py()
}

#[pyfunction]
fn softmax(logits: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(distributions::softmax(&LogProbs::new(logits).py()?).into_vec())
}

fn vote_counts(counts: Vec<Vec<u64>>) -> PyResult<VoteCounts> {
    let items = (0..counts.len()).map(|i| i.to_string()).collect();
    VoteCounts::new(items, counts).py()
}

/// Vote counts divided by their row total.
#[pyfunction]
fn standard_normalize(counts: Vec<Vec<u64>>) -> PyResult<Vec<Vec<f64>>> {
    annotations::standard_normalize(&vote_counts(counts)?).py().map(lists)
}

/// Softmax of the raw vote counts.
#[pyfunction]
fn softmax_normalize(counts: Vec<Vec<u64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(lists(annotations::softmax_normalize(&vote_counts(counts)?)))
}

/// `members[i][m]` is method `m`'s distribution for item `i`.
fn ensemble(members: Vec<Vec<Vec<f64>>>) -> PyResult<Ensemble> {
    let n_methods = members.first().map_or(0, Vec::len);
    let names = (0..n_methods).map(|m| format!("m{m}")).collect();
    let ids = (0..members.len()).map(|i| i.to_string()).collect();
    let members = members.into_iter().map(cats).collect::<PyResult<_>>()?;
    Ensemble::new(names, ids, members).py()
}

fn temp_config(lambda: f64, step_size: f64, max_steps: usize, t_min: f64) -> TempFitConfig {
    TempFitConfig {
        lambda,
        step_size,
        max_steps,
        t_min,
        ..TempFitConfig::default()
    }
}

fn cccp_config(max_iters: usize, tol: f64) -> CccpConfig {
    CccpConfig {
        max_iters,
        tol,
        ..CccpConfig::default()
    }
}

/// Per-item arithmetic mean of the members.
#[pyfunction]
fn average(members: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(lists(aggregation::average(&ensemble(members)?)))
}

/// Per-item Jensen-Shannon centroid. Returns `(probs, converged)`.
#[pyfunction]
#[pyo3(signature = (members, max_iters = 200, tol = 1e-10))]
fn js_centroid(members: Vec<Vec<Vec<f64>>>, max_iters: usize, tol: f64) -> PyResult<(Vec<Vec<f64>>, Vec<bool>)> {
    let c = aggregation::js_centroid(&ensemble(members)?, &cccp_config(max_iters, tol)).py()?;
    let converged = c.iter().map(|x| x.converged).collect();
    Ok((c.into_iter().map(|x| x.probs.into_vec()).collect(), converged))
}

/// One temperature per method, fitted jointly over all items.
#[pyfunction]
#[pyo3(signature = (members, lambda_ = 0.01, step_size = 0.05, max_steps = 2000, t_min = 0.25))]
fn fit_temperatures(
    members: Vec<Vec<Vec<f64>>>,
    lambda_: f64,
    step_size: f64,
    max_steps: usize,
    t_min: f64,
) -> PyResult<Vec<f64>> {
    let cfg = temp_config(lambda_, step_size, max_steps, t_min);
    let t = aggregation::fit_temperatures(&ensemble(members)?, &cfg).py()?;
    Ok(t.t)
}

/// Runs one of `avg`, `jsc`, `temp`, `hybrid`. Returns a dict with `probs`,
/// `converged` and `temperatures` (None for the untempered aggregators).
#[pyfunction]
#[pyo3(signature = (
    members, aggregator = "jsc", lambda_ = 0.01, step_size = 0.05, max_steps = 2000,
    t_min = 0.25, cccp_max_iters = 200, cccp_tol = 1e-10
))]
#[allow(clippy::too_many_arguments)]
fn aggregate<'py>(
    py: Python<'py>,
    members: Vec<Vec<Vec<f64>>>,
    aggregator: &str,
    lambda_: f64,
    step_size: f64,
    max_steps: usize,
    t_min: f64,
    cccp_max_iters: usize,
    cccp_tol: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let which: Aggregator = aggregator.parse().py()?;
    let r = aggregation::aggregate(
        &ensemble(members)?,
        which,
        &temp_config(lambda_, step_size, max_steps, t_min),
        &cccp_config(cccp_max_iters, cccp_tol),
    )
    .py()?;
    let d = PyDict::new(py);
    d.set_item("aggregator", which.name())?;
    d.set_item("probs", lists(r.probs))?;
    d.set_item("converged", r.converged)?;
    d.set_item("temperatures", r.temperatures.map(|t| t.t))?;
    Ok(d)
}

/// Builds an annotation set from `(item_id, annotator_id, label)` triples.
/// Without `labels` the label space is the sorted set of observed labels.
fn annotation_set(records: Vec<(String, String, String)>, labels: Option<Vec<String>>) -> PyResult<AnnotationSet> {
    let labels = labels.unwrap_or_else(|| {
        let mut seen: Vec<String> = records.iter().map(|r| r.2.clone()).collect();
        seen.sort();
        seen.dedup();
        seen
    });
    let space = LabelSpace::new(labels).py()?;
    let triples = records
        .iter()
        .map(|(item, annotator, label)| {
            space
                .index_of(label)
                .map(|l| (item.as_str(), annotator.as_str(), l))
                .ok_or_else(|| PyValueError::new_err(format!("label {label:?} is not in the label space")))
        })
        .collect::<PyResult<Vec<_>>>()?;
    AnnotationSet::from_records(space, triples).py()
}

fn model_dict<'py, M: AnnotatorModel>(py: Python<'py>, m: &M) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("labels", m.label_space().labels().to_vec())?;
    d.set_item("items", m.items().to_vec())?;
    d.set_item("annotators", m.annotators().to_vec())?;
    d.set_item("posteriors", lists(m.posteriors().to_vec()))?;
    d.set_item("log_likelihood_trace", m.log_likelihood_trace().to_vec())?;
    Ok(d)
}

/// Dawid-Skene fit. Returns a dict with the posteriors, the class prior and
/// per-annotator confusion matrices.
#[pyfunction]
#[pyo3(signature = (records, labels = None, max_iters = 100, tol = 1e-6, smoothing = 0.01, restarts = 5, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn fit_dawid_skene<'py>(
    py: Python<'py>,
    records: Vec<(String, String, String)>,
    labels: Option<Vec<String>>,
    max_iters: usize,
    tol: f64,
    smoothing: f64,
    restarts: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let a = annotation_set(records, labels)?;
    let cfg = EmConfig {
        max_iters,
        tol,
        smoothing,
        restarts,
        seed,
    };
    let m = annotator_models::fit_dawid_skene(&a, &cfg).py()?;
    let d = model_dict(py, &m)?;
    d.set_item("class_prior", m.class_prior.probs().to_vec())?;
    let confusion: Vec<Vec<Vec<f64>>> = m.confusion.iter().map(|rows| lists(rows.clone())).collect();
    d.set_item("confusion", confusion)?;
    Ok(d)
}

/// MACE fit. Returns a dict with the posteriors, per-annotator competence
/// and spamming distributions.
#[pyfunction]
#[pyo3(signature = (records, labels = None, max_iters = 100, tol = 1e-6, smoothing = 0.01, restarts = 5, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn fit_mace<'py>(
    py: Python<'py>,
    records: Vec<(String, String, String)>,
    labels: Option<Vec<String>>,
    max_iters: usize,
    tol: f64,
    smoothing: f64,
    restarts: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let a = annotation_set(records, labels)?;
    let cfg = EmConfig {
        max_iters,
        tol,
        smoothing,
        restarts,
        seed,
    };
    let m = annotator_models::fit_mace(&a, &cfg).py()?;
    let d = model_dict(py, &m)?;
    d.set_item("competence", m.competence.clone())?;
    d.set_item("spam_dist", lists(m.spam_dist.clone()))?;
    Ok(d)
}

/// Trains a linear softmax model on soft targets. Returns `(model, loss_trace)`.
#[pyfunction]
#[pyo3(signature = (features, targets, step_size = 0.5, max_epochs = 500, batch_size = 32, l2 = 0.0, seed = 0, tol = 1e-9))]
#[allow(clippy::too_many_arguments)]
fn train_distill(
    features: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    step_size: f64,
    max_epochs: usize,
    batch_size: usize,
    l2: f64,
    seed: u64,
    tol: f64,
) -> PyResult<(PyLinearSoftmaxModel, Vec<f64>)> {
    let ids = (0..features.len()).map(|i| i.to_string()).collect();
    let ds = FeatureDataset::new(ids, features, cats(targets)?).py()?;
    let cfg = TrainConfig {
        step_size,
        max_epochs,
        batch_size,
        l2,
        seed,
        tol,
    };
    let r = distill::train(&ds, &cfg).py()?;
    Ok((PyLinearSoftmaxModel(r.model), r.loss_trace))
}

#[pyfunction]
fn macro_f1(preds: Vec<usize>, golds: Vec<usize>) -> PyResult<f64> {
    evaluation::macro_f1(&preds, &golds).py()
}

#[pyfunction]
fn nll(probs: Vec<Vec<f64>>, golds: Vec<usize>) -> PyResult<f64> {
    evaluation::nll(&cats(probs)?, &golds).py()
}

fn cll_config(n_splits: usize, seed: u64, t_low: f64, t_high: f64) -> CllConfig {
    CllConfig {
        n_splits,
        seed,
        t_bounds: (t_low, t_high),
    }
}

/// Temperature minimizing the NLL of `probs` on `golds`.
#[pyfunction]
#[pyo3(signature = (probs, golds, t_low = 0.05, t_high = 50.0))]
fn fit_cll_temperature(probs: Vec<Vec<f64>>, golds: Vec<usize>, t_low: f64, t_high: f64) -> PyResult<f64> {
    evaluation::fit_cll_temperature(&cats(probs)?, &golds, &cll_config(1, 0, t_low, t_high)).py()
}

/// Cross-validated calibrated log-likelihood. Returns a dict with `cll`,
/// `split_nll` and `split_temperatures`.
#[pyfunction]
#[pyo3(signature = (probs, golds, n_splits = 5, seed = 0, t_low = 0.05, t_high = 50.0))]
fn calibrated_log_likelihood<'py>(
    py: Python<'py>,
    probs: Vec<Vec<f64>>,
    golds: Vec<usize>,
    n_splits: usize,
    seed: u64,
    t_low: f64,
    t_high: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = cll_config(n_splits, seed, t_low, t_high);
    let r = evaluation::calibrated_log_likelihood(&cats(probs)?, &golds, &cfg).py()?;
    let d = PyDict::new(py);
    d.set_item("cll", r.cll)?;
    d.set_item("split_nll", r.split_nll)?;
    d.set_item("split_temperatures", r.split_temperatures)?;
    Ok(d)
}

#[pyfunction]
fn pearson(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<f64> {
    evaluation::pearson(&xs, &ys).py()
}

/// Samples a synthetic crowd. Each entry of `accuracies` adds one annotator
/// with that accuracy on the diagonal; each entry of `spammers` adds one
/// annotator emitting labels from that fixed distribution. Returns a dict
/// with `labels`, `records` (`(item, annotator, label)` triples), `items`,
/// `truth` (label indices) and `features`.
#[pyfunction]
#[pyo3(signature = (
    n_items, class_prior, accuracies, annotations_per_item, seed = 0,
    spammers = None, feature_dim = 0, feature_separation = 3.0
))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    n_items: usize,
    class_prior: Vec<f64>,
    accuracies: Vec<f64>,
    annotations_per_item: usize,
    seed: u64,
    spammers: Option<Vec<Vec<f64>>>,
    feature_dim: usize,
    feature_separation: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let prior = cat(class_prior)?;
    let k = prior.k();
    let mut profiles = accuracies
        .into_iter()
        .map(|acc| AnnotatorProfile::diagonal(k, acc).py())
        .collect::<PyResult<Vec<_>>>()?;
    for s in spammers.unwrap_or_default() {
        profiles.push(AnnotatorProfile::Spammer(cat(s)?));
    }
    let mut cfg = SimConfig::new(n_items, prior, profiles, annotations_per_item, seed);
    cfg.feature_dim = feature_dim;
    cfg.feature_separation = feature_separation;
    let out = generate_crowd(&cfg).py()?;
    let a = &out.annotations;
    let space = a.label_space();
    let records: Vec<(String, String, String)> = a
        .records()
        .iter()
        .map(|r| {
            (
                a.items()[r.item].clone(),
                a.annotators()[r.annotator].clone(),
                space.name(r.label).to_string(),
            )
        })
        .collect();
    let d = PyDict::new(py);
    d.set_item("labels", space.labels().to_vec())?;
    d.set_item("items", a.items().to_vec())?;
    d.set_item("records", records)?;
    d.set_item("truth", out.truth)?;
    d.set_item("features", out.features)?;
    Ok(d)
}

#[pymodule]
#[pyo3(name = "crowd_centroid")]
pub fn crowd_centroid_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCategorical>()?;
    m.add_class::<PyLinearSoftmaxModel>()?;
    m.add_function(wrap_pyfunction!(kld, m)?)?;
    m.add_function(wrap_pyfunction!(jsd, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(standard_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(average, m)?)?;
    m.add_function(wrap_pyfunction!(js_centroid, m)?)?;
    m.add_function(wrap_pyfunction!(fit_temperatures, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(fit_dawid_skene, m)?)?;
    m.add_function(wrap_pyfunction!(fit_mace, m)?)?;
    m.add_function(wrap_pyfunction!(train_distill, m)?)?;
    m.add_function(wrap_pyfunction!(macro_f1, m)?)?;
    m.add_function(wrap_pyfunction!(nll, m)?)?;
    m.add_function(wrap_pyfunction!(fit_cll_temperature, m)?)?;
    m.add_function(wrap_pyfunction!(calibrated_log_likelihood, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
