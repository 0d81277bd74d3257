use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use femnet::autodiff::Graph;
use femnet::data::{denormalize, generate_synthetic, Dataset, Sequence, SplitName};
use femnet::dynamics::{FenModel, MeshArtifacts, Variant};
use femnet::mesh::{delaunay_triangulate, filter_sliver_cells, load_points, MeshFile};
use femnet::training::{self, evaluate, persistence_report, super_resolution_eval, EvalReport};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{CliError, Common};

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    config_hash: String,
    seed: u64,
    #[serde(flatten)]
    body: &'a T,
}

fn stamped<'a, T: Serialize>(config: &RunConfig, body: &'a T) -> Stamped<'a, T> {
    Stamped { config_hash: config.hash(), seed: config.seed, body }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn out_dir(common: &Common) -> Result<PathBuf, CliError> {
    let dir = common.out.clone().ok_or_else(|| CliError::Usage("--out is required".into()))?;
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

#[derive(Serialize)]
struct Meta<'a> {
    command: &'a str,
    version: &'a str,
    config: &'a RunConfig,
}

fn write_meta(dir: &Path, command: &str, config: &RunConfig) -> Result<(), CliError> {
    let meta = Meta { command, version: env!("CARGO_PKG_VERSION"), config };
    write_json(&dir.join("meta.json"), &stamped(config, &meta))
}

fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    require(&dir.join("manifest.json"), "dataset manifest")?;
    Ok(Dataset::load(dir)?)
}

fn load_checkpoint(path: &Path) -> Result<FenModel, CliError> {
    require(&path.with_extension("json"), "checkpoint")?;
    Ok(FenModel::load(path)?)
}

pub fn mesh(common: &Common, points: &Path, no_filter: bool) -> Result<(), CliError> {
    let config = RunConfig::load(common.config.as_deref(), common.seed)?;
    require(points, "point file")?;
    let dir = out_dir(common)?;
    let cloud = load_points(points)?;
    let mut mesh = delaunay_triangulate(&cloud)?;
    let n_delaunay = mesh.n_cells();
    if let (false, Some(deg)) = (no_filter, config.mesh.sliver_threshold_deg) {
        mesh = filter_sliver_cells(&mesh, deg.to_radians())?;
    }
    let file: MeshFile = mesh.to_file();
    write_json(&dir.join("mesh.json"), &stamped(&config, &file))?;
    write_meta(&dir, "mesh", &config)?;
    println!("{} nodes, {} cells ({} removed as slivers)", mesh.n_nodes(), mesh.n_cells(), n_delaunay - mesh.n_cells());
    Ok(())
}

pub fn gen_data(common: &Common, nodes: Option<usize>, stats_from: Option<&Path>) -> Result<(), CliError> {
    let mut config = RunConfig::load(common.config.as_deref(), common.seed)?;
    let spec = config.data.as_mut().ok_or_else(|| CliError::Usage("the config has no data section".into()))?;
    if let Some(n) = nodes {
        spec.n_nodes = n;
    }
    spec.validate()?;
    let spec = spec.clone();
    let reference = stats_from.map(load_dataset).transpose()?;
    let dir = out_dir(common)?;
    let raw = generate_synthetic(&spec)?;
    let mut dataset = match (reference, config.normalize.unwrap_or(true)) {
        (Some(r), _) => {
            let stats = r
                .normalization
                .ok_or_else(|| CliError::Usage("--stats-from dataset is not normalized".into()))?;
            raw.normalized_with(&stats)?
        }
        (None, true) => femnet::data::normalize(&raw)?,
        (None, false) => raw,
    };
    dataset.metadata = config.stamp();
    dataset.save(&dir)?;
    write_meta(&dir, "gen-data", &config)?;
    println!("{} sequences on {} nodes, {} cells", dataset.sequences.len(), dataset.n_nodes(), dataset.mesh.n_cells());
    Ok(())
}

pub fn train(common: &Common, data: &Path, variant: Option<Variant>, hidden_width: Option<usize>, epochs: Option<usize>) -> Result<(), CliError> {
    let mut config = RunConfig::load(common.config.as_deref(), common.seed)?;
    if let Some(v) = variant {
        config.model.variant = v;
    }
    if hidden_width.is_some() {
        config.model.hidden_width = hidden_width;
    }
    if let Some(e) = epochs {
        config.train.max_epochs = e;
    }
    config.train.validate()?;
    let dataset = load_dataset(data)?;
    let dir = out_dir(common)?;
    let model = FenModel::new(config.model.model_config(dataset.m), config.seed)?;
    let mut log = BufWriter::new(File::create(dir.join("train_log.jsonl"))?);
    let outcome = training::train(model, &dataset, &config.train, Some(&mut log))?;
    drop(log);
    let history = &outcome.history;
    for (name, model) in [("best", &outcome.best), ("final", &outcome.last)] {
        let mut extra = config.stamp();
        extra["checkpoint"] = name.into();
        extra["best_epoch"] = serde_json::to_value(history.best_epoch)?;
        extra["best_val_mae"] = history.best_val_mae.into();
        model.save(&dir.join(name), extra)?;
    }
    write_json(&dir.join("history.json"), &stamped(&config, history))?;
    write_meta(&dir, "train", &config)?;
    println!(
        "validation MAE {:.4e} -> {:.4e} after {} epochs",
        history.initial_val_mae,
        history.best_val_mae,
        history.epochs.len()
    );
    Ok(())
}

fn terms_csv(
    model: &FenModel,
    artifacts: &MeshArtifacts,
    times: &[f64],
    states: &[femnet::autodiff::Tensor],
) -> Result<(String, Option<String>), CliError> {
    let m = model.config.m;
    let mut nodes = String::from("time,node,x,y");
    for k in 0..m {
        write!(nodes, ",freeform_{k}").unwrap();
        if model.transport.is_some() {
            write!(nodes, ",transport_{k}").unwrap();
        }
    }
    nodes.push('\n');
    let mut cells = model.transport.as_ref().map(|_| {
        let mut s = String::from("time,cell,cx,cy");
        for k in 0..m {
            write!(s, ",vx_{k},vy_{k}").unwrap();
        }
        s.push('\n');
        s
    });
    let mut graph = Graph::new();
    let bound = model.bind(&mut graph, artifacts, false)?;
    for (&t, y) in times.iter().zip(states) {
        let yv = graph.constant(y.clone())?;
        let terms = bound.terms(&mut graph, t, yv, None)?;
        for (i, p) in artifacts.mesh.points().coords().iter().enumerate() {
            write!(nodes, "{t},{i},{},{}", p[0], p[1]).unwrap();
            for k in 0..m {
                write!(nodes, ",{}", terms.freeform.get(i, k)).unwrap();
                if let Some(tr) = &terms.transport {
                    write!(nodes, ",{}", tr.get(i, k)).unwrap();
                }
            }
            nodes.push('\n');
        }
        if let (Some(out), Some(v)) = (cells.as_mut(), &terms.velocities) {
            for (c, g) in artifacts.geometry.iter().enumerate() {
                write!(out, "{t},{c},{},{}", g.center[0], g.center[1]).unwrap();
                for k in 0..m {
                    write!(out, ",{},{}", v.get(c, k), v.get(c, m + k)).unwrap();
                }
                out.push('\n');
            }
        }
    }
    Ok((nodes, cells))
}

pub fn forecast(
    common: &Common,
    checkpoint: &Path,
    data: &Path,
    sequence: usize,
    start: usize,
    horizon: Option<usize>,
    dump_terms: bool,
) -> Result<(), CliError> {
    let config = RunConfig::load(common.config.as_deref(), common.seed)?;
    let model = load_checkpoint(checkpoint)?;
    let dataset = load_dataset(data)?;
    let seq = dataset
        .sequences
        .get(sequence)
        .ok_or_else(|| CliError::Usage(format!("sequence {sequence} does not exist")))?;
    let horizon = horizon.unwrap_or(config.eval.horizon);
    if start + horizon >= seq.len() {
        return Err(CliError::Usage(format!(
            "start {start} + horizon {horizon} exceeds the {} frames of sequence {sequence}",
            seq.len()
        )));
    }
    let dir = out_dir(common)?;
    let artifacts = MeshArtifacts::new(dataset.mesh.clone())?;
    let times = &seq.times[start..=start + horizon];
    let traj = training::forecast(&model, &artifacts, &seq.states[start], times, &config.train.solver)?;
    let predicted = Sequence::new(traj.times.clone(), traj.states.clone())?;
    predicted.save(&dir.join("trajectory.bin"))?;
    if let Some(stats) = &dataset.normalization {
        denormalize(&predicted, stats).save(&dir.join("trajectory_physical.bin"))?;
    }
    if dump_terms {
        let (nodes, cells) = terms_csv(&model, &artifacts, &traj.times, &traj.states)?;
        std::fs::write(dir.join("terms.csv"), nodes)?;
        if let Some(cells) = cells {
            std::fs::write(dir.join("velocities.csv"), cells)?;
        }
    }
    #[derive(Serialize)]
    struct Summary {
        sequence: usize,
        start: usize,
        horizon: usize,
        nfe: usize,
        checkpoint_seed: u64,
    }
    let summary = Summary { sequence, start, horizon, nfe: traj.nfe, checkpoint_seed: model.seed };
    write_json(&dir.join("forecast.json"), &stamped(&config, &summary))?;
    write_meta(&dir, "forecast", &config)?;
    println!("forecast {horizon} steps with {} function evaluations", traj.nfe);
    Ok(())
}

fn write_reports(dir: &Path, stem: &str, config: &RunConfig, reports: &[EvalReport]) -> Result<(), CliError> {
    let mut csv = String::from(EvalReport::CSV_HEADER);
    csv.push('\n');
    for r in reports {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    std::fs::write(dir.join(format!("{stem}.csv")), csv)?;
    #[derive(Serialize)]
    struct Reports<'a> {
        reports: &'a [EvalReport],
    }
    write_json(&dir.join(format!("{stem}.json")), &stamped(config, &Reports { reports }))
}

pub fn eval(common: &Common, checkpoint: &Path, data: &Path, horizon: Option<usize>, split: Option<SplitName>) -> Result<(), CliError> {
    let config = RunConfig::load(common.config.as_deref(), common.seed)?;
    let model = load_checkpoint(checkpoint)?;
    let dataset = load_dataset(data)?;
    let dir = out_dir(common)?;
    let horizon = horizon.unwrap_or(config.eval.horizon);
    let split = split.unwrap_or(config.eval.split);
    let options = config.train.eval_options();
    let report = evaluate(&model, &dataset, split, horizon, &options)?;
    let persistence = persistence_report(&dataset, split, horizon, &options)?;
    write_reports(&dir, "eval", &config, std::slice::from_ref(&report))?;
    write_json(&dir.join("persistence.json"), &stamped(&config, &persistence))?;
    write_meta(&dir, "eval", &config)?;
    println!(
        "MAE {:.4e} (persistence {:.4e}), NFE {:.1} +- {:.1}",
        report.mae, persistence.mae, report.nfe_mean, report.nfe_std
    );
    Ok(())
}

pub fn superres(common: &Common, checkpoint: &Path, datasets: &[PathBuf], horizon: Option<usize>) -> Result<(), CliError> {
    let config = RunConfig::load(common.config.as_deref(), common.seed)?;
    let model = load_checkpoint(checkpoint)?;
    let datasets = datasets.iter().map(|d| load_dataset(d)).collect::<Result<Vec<_>, _>>()?;
    let dir = out_dir(common)?;
    let horizon = horizon.unwrap_or(config.eval.horizon);
    let mut reports = super_resolution_eval(&model, &datasets, horizon, &config.train.eval_options())?;
    reports.sort_by_key(|r| r.n_nodes);
    write_reports(&dir, "superres", &config, &reports)?;
    write_meta(&dir, "superres", &config)?;
    for r in &reports {
        println!("{:>6} nodes: MAE {:.4e}", r.n_nodes, r.mae);
    }
    Ok(())
}
