use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::json;

use crowd_centroid::aggregation::{self, Aggregator, CccpConfig, TempFitConfig};
use crowd_centroid::annotations::{load_annotations, softmax_normalize, standard_normalize, vote_counts, LabelSpace};
use crowd_centroid::annotator_models::{fit_dawid_skene, fit_mace, EmConfig};
use crowd_centroid::distill::{self, LinearSoftmaxModel, TrainConfig};
use crowd_centroid::evaluation::{self, CllConfig};
use crowd_centroid::io;
use crowd_centroid::simulate::{generate_crowd, SimConfigFile};

use crate::error::CliError;
use crate::manifest::RunManifest;
use crate::{AggregateArgs, DistillArgs, EvaluateArgs, PredictArgs, SimulateArgs, View, ViewsArgs};

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::read(path, e))
}

/// Writes `path` through a buffered writer, mapping every failure to a
/// usage error that names the file.
fn write_with<F>(path: &Path, f: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<File>) -> crowd_centroid::Result<()>,
{
    let file = File::create(path).map_err(|e| CliError::write(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).map_err(|e| CliError::write(path, e))?;
    w.flush().map_err(|e| CliError::write(path, e))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn read_labels(path: &Path) -> Result<LabelSpace, CliError> {
    LabelSpace::read(open(path)?).map_err(CliError::in_file(path))
}

pub fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.config).map_err(|e| CliError::read(&args.config, e))?;
    let file: SimConfigFile = toml::from_str(&text)
        .map_err(|e| CliError::usage(format!("{}: {e}", args.config.display())))?;
    let cfg = file.into_config().map_err(CliError::in_file(&args.config))?;
    let sim = generate_crowd(&cfg)?;

    fs::create_dir_all(&args.out_dir).map_err(|e| CliError::write(&args.out_dir, e))?;
    let mut manifest = RunManifest::new("simulate", args, Some(cfg.seed))?;
    manifest.input(&args.config)?;

    let annotations = args.out_dir.join("annotations.csv");
    write_with(&annotations, |w| sim.annotations.write_csv(w))?;
    manifest.output(&annotations);

    let space = sim.annotations.label_space();
    let truth: Vec<(String, String)> = sim
        .annotations
        .items()
        .iter()
        .zip(&sim.truth)
        .map(|(id, &y)| (id.clone(), space.name(y).to_string()))
        .collect();
    let truth_path = args.out_dir.join("truth.csv");
    write_with(&truth_path, |w| io::write_gold_csv(w, &truth))?;
    manifest.output(&truth_path);

    let labels = args.out_dir.join("labels.txt");
    write_with(&labels, |w| space.write(w))?;
    manifest.output(&labels);

    if cfg.feature_dim > 0 {
        let features = args.out_dir.join("features.csv");
        write_with(&features, |w| io::write_features_csv(w, sim.annotations.items(), &sim.features))?;
        manifest.output(&features);
    }
    manifest.summary = json!({
        "n_items": sim.annotations.n_items(),
        "n_annotators": sim.annotations.n_annotators(),
        "n_records": sim.annotations.records().len(),
        "k": space.k(),
    });
    manifest.write(&args.out_dir.join("manifest.json"))
}

pub fn views(args: &ViewsArgs) -> Result<(), CliError> {
    if args.methods.is_empty() {
        return Err(CliError::usage("--methods must name at least one of standard, softmax, ds, mace"));
    }
    for (i, m) in args.methods.iter().enumerate() {
        if args.methods[..i].contains(m) {
            return Err(CliError::usage(format!("method {} listed twice", m.name())));
        }
    }
    let mut manifest = RunManifest::new("views", args, Some(args.seed))?;
    let space = args.labels.as_deref().map(read_labels).transpose()?;
    if let Some(p) = &args.labels {
        manifest.input(p)?;
    }
    let raw = load_annotations(open(&args.input)?, space.as_ref()).map_err(CliError::in_file(&args.input))?;
    manifest.input(&args.input)?;
    let a = if args.min_annotations > 1 {
        raw.filter_min_annotations(args.min_annotations)?
    } else {
        raw
    };
    let em = EmConfig {
        max_iters: args.em_max_iters,
        tol: args.em_tol,
        smoothing: args.em_smoothing,
        restarts: args.em_restarts,
        seed: args.seed,
    };
    em.validate()?;
    if let Some(dir) = &args.models_dir {
        fs::create_dir_all(dir).map_err(|e| CliError::write(dir, e))?;
    }

    let counts = vote_counts(&a);
    let mut views = Vec::with_capacity(args.methods.len());
    let mut summary = serde_json::Map::new();
    for &m in &args.methods {
        let dists = match m {
            View::Standard => standard_normalize(&counts)?,
            View::Softmax => softmax_normalize(&counts),
            View::Ds => {
                let model = fit_dawid_skene(&a, &em)?;
                summary.insert("ds_log_likelihood".into(), json!(model.log_likelihood_trace.last()));
                write_model(args, &mut manifest, "ds.json", &model)?;
                model.posteriors
            }
            View::Mace => {
                let model = fit_mace(&a, &em)?;
                summary.insert("mace_log_likelihood".into(), json!(model.log_likelihood_trace.last()));
                write_model(args, &mut manifest, "mace.json", &model)?;
                model.posteriors
            }
        };
        views.push(dists);
    }
    let names = args.methods.iter().map(|m| m.name().to_string()).collect();
    let ensemble = aggregation::Ensemble::from_views(names, a.items().to_vec(), views)?;
    write_with(&args.output, |w| io::write_ensemble_jsonl(w, &ensemble))?;
    manifest.output(&args.output);
    summary.insert("n_items".into(), json!(ensemble.n_items()));
    summary.insert("labels".into(), json!(a.label_space().labels()));
    manifest.summary = summary.into();
    manifest.write(&args.manifest.clone().unwrap_or_else(|| sibling(&args.output, ".manifest.json")))
}

fn write_model<M: serde::Serialize>(
    args: &ViewsArgs,
    manifest: &mut RunManifest,
    name: &str,
    model: &M,
) -> Result<(), CliError> {
    let Some(dir) = &args.models_dir else {
        return Ok(());
    };
    let path = dir.join(name);
    write_with(&path, |w| {
        serde_json::to_writer_pretty(&mut *w, model)?;
        w.write_all(b"\n")?;
        Ok(())
    })?;
    manifest.output(&path);
    Ok(())
}

pub fn aggregate(args: &AggregateArgs) -> Result<(), CliError> {
    let agg: Aggregator = args.aggregator.parse()?;
    let tcfg = TempFitConfig {
        lambda: args.lambda,
        step_size: args.step_size,
        max_steps: args.max_steps,
        t_min: args.t_min,
        seed: args.seed,
    };
    let ccfg = CccpConfig {
        max_iters: args.cccp_max_iters,
        tol: args.cccp_tol,
        record_trace: false,
    };
    tcfg.validate()?;
    ccfg.validate()?;
    let mut manifest = RunManifest::new("aggregate", args, Some(args.seed))?;
    let e = io::read_ensemble_jsonl(open(&args.input)?).map_err(CliError::in_file(&args.input))?;
    manifest.input(&args.input)?;
    let out = aggregation::aggregate(&e, agg, &tcfg, &ccfg)?;
    write_with(&args.output, |w| io::write_aggregate_jsonl(w, e.item_ids(), &out))?;
    manifest.output(&args.output);
    manifest.summary = json!({
        "n_items": e.n_items(),
        "methods": e.method_names(),
        "n_unconverged": out.converged.iter().filter(|c| !**c).count(),
        "temperatures": out.temperatures.as_ref().map(|t| &t.t),
    });
    manifest.write(&args.manifest.clone().unwrap_or_else(|| sibling(&args.output, ".manifest.json")))
}

pub fn distill(args: &DistillArgs) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("distill", args, None)?;
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::read(path, e))?;
            manifest.input(path)?;
            toml::from_str::<TrainConfig>(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    manifest.seed = Some(cfg.seed);

    let (ids, xs) = io::read_features_csv(open(&args.features)?).map_err(CliError::in_file(&args.features))?;
    manifest.input(&args.features)?;
    let targets = io::read_probs_jsonl(open(&args.targets)?).map_err(CliError::in_file(&args.targets))?;
    manifest.input(&args.targets)?;
    let ds = io::join_features_targets(ids, xs, targets)?;
    let result = distill::train(&ds, &cfg)?;

    write_with(&args.model_out, |w| {
        serde_json::to_writer_pretty(&mut *w, &result.model)?;
        w.write_all(b"\n")?;
        Ok(())
    })?;
    manifest.output(&args.model_out);
    let trace_path = args
        .loss_trace
        .clone()
        .unwrap_or_else(|| sibling(&args.model_out, ".loss.csv"));
    write_with(&trace_path, |w| {
        writeln!(w, "step,loss")?;
        for (i, l) in result.loss_trace.iter().enumerate() {
            writeln!(w, "{i},{l}")?;
        }
        Ok(())
    })?;
    manifest.output(&trace_path);
    manifest.summary = json!({
        "n_items": ds.len(),
        "dim": ds.dim(),
        "k": ds.k(),
        "train_config": cfg,
        "epochs": result.epochs,
        "final_loss": result.loss_trace.last(),
        "final_step_size": result.final_step_size,
    });
    manifest.write(&args.manifest.clone().unwrap_or_else(|| sibling(&args.model_out, ".manifest.json")))
}

pub fn predict(args: &PredictArgs) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("predict", args, None)?;
    let model: LinearSoftmaxModel = serde_json::from_reader(open(&args.model)?)
        .map_err(|e| CliError::usage(format!("{}: {e}", args.model.display())))?;
    let model = LinearSoftmaxModel::new(model.weights, model.bias).map_err(CliError::in_file(&args.model))?;
    manifest.input(&args.model)?;
    let (ids, xs) = io::read_features_csv(open(&args.features)?).map_err(CliError::in_file(&args.features))?;
    manifest.input(&args.features)?;
    let rows = ids
        .into_iter()
        .zip(&xs)
        .map(|(id, x)| Ok((id, distill::predict(&model, x)?)))
        .collect::<crowd_centroid::Result<Vec<_>>>()
        .map_err(CliError::in_file(&args.features))?;
    write_with(&args.output, |w| io::write_probs_jsonl(w, &rows))?;
    manifest.output(&args.output);
    manifest.summary = json!({ "n_items": rows.len() });
    manifest.write(&args.manifest.clone().unwrap_or_else(|| sibling(&args.output, ".manifest.json")))
}

pub fn evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let cfg = CllConfig {
        n_splits: args.splits,
        seed: args.seed,
        t_bounds: (args.t_low, args.t_high),
    };
    cfg.validate()?;
    let mut manifest = RunManifest::new("evaluate", args, Some(args.seed))?;
    let space = read_labels(&args.labels)?;
    manifest.input(&args.labels)?;
    let probs = io::read_probs_jsonl(open(&args.probs)?).map_err(CliError::in_file(&args.probs))?;
    manifest.input(&args.probs)?;
    let gold_rows = io::read_gold_csv(open(&args.gold)?).map_err(CliError::in_file(&args.gold))?;
    manifest.input(&args.gold)?;

    let mut gold: HashMap<String, usize> = HashMap::new();
    for (id, label) in gold_rows {
        let idx = space
            .index_of(&label)
            .ok_or_else(|| CliError::usage(format!("{}: unknown label {label:?} for item {id:?}", args.gold.display())))?;
        if gold.insert(id.clone(), idx).is_some() {
            return Err(CliError::usage(format!("{}: duplicate item_id {id:?}", args.gold.display())));
        }
    }
    if gold.len() != probs.len() {
        if let Some(extra) = gold.keys().filter(|id| !probs.iter().any(|(p, _)| p == *id)).min() {
            return Err(CliError::usage(format!("item_id {extra:?} has a gold label but no prediction")));
        }
    }
    let mut dists = Vec::with_capacity(probs.len());
    let mut golds = Vec::with_capacity(probs.len());
    for (id, p) in probs {
        if p.k() != space.k() {
            return Err(CliError::usage(format!(
                "item_id {id:?} has {} probabilities for {} labels",
                p.k(),
                space.k()
            )));
        }
        let g = gold
            .get(&id)
            .ok_or_else(|| CliError::usage(format!("item_id {id:?} has a prediction but no gold label")))?;
        golds.push(*g);
        dists.push(p);
    }
    let report = evaluation::evaluate(&dists, &golds, &cfg)?;
    write_with(&args.output, |w| {
        serde_json::to_writer_pretty(&mut *w, &report)?;
        w.write_all(b"\n")?;
        Ok(())
    })?;
    manifest.output(&args.output);
    if let Some(path) = &args.splits_csv {
        write_with(path, |w| {
            writeln!(w, "split,temperature,nll")?;
            for (s, (t, n)) in report.split_temperatures.iter().zip(&report.split_nll).enumerate() {
                writeln!(w, "{s},{t},{n}")?;
            }
            Ok(())
        })?;
        manifest.output(path);
    }
    manifest.summary = json!({ "macro_f1": report.macro_f1, "cll": report.cll });
    manifest.write(&args.manifest.clone().unwrap_or_else(|| sibling(&args.output, ".manifest.json")))
}
