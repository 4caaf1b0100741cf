mod config;
mod run;

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde_json::json;

use peghole::adaptation::{adapt_all, AdaptedEstimator};
use peghole::assembly::{
    evaluate_suite, median_ma_p_by_trial, write_jsonl, write_trials_csv, SuiteMethod,
};
use peghole::contact::{Domain, DomainConfig};
use peghole::dataset::{generate_dataset, generate_paired_dataset, Dataset, PairedDataset, Split};
use peghole::estimator::{build_estimator, evaluate, train, write_features_csv, EstimatorNet};
use peghole::geometry::{generate_shape_set, ShapeManifest};
use peghole::seed::mix;

use config::{RunConfig, Scale};
use run::{fail, load_meta, parse_input, Failure, Run};

#[derive(Parser, Debug)]
#[command(name = "peghole", version, about = "Polygon peg-in-hole pose estimation pipeline")]
struct Cli {
    /// TOML config file; absent keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// JSON override of one config key, e.g. `--set training.epochs=20`.
    #[arg(long = "set", global = true, value_name = "KEY=JSON")]
    overrides: Vec<String>,
    /// Global seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root under which run directories are created.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Worker threads. Results do not depend on it.
    #[arg(long, global = true, env = "PEGHOLE_WORKERS")]
    workers: Option<usize>,
    /// Size preset applied before the config file.
    #[arg(long, global = true, value_enum, default_value = "desk")]
    scale: Scale,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the seen and unseen shape sets.
    Shapes,
    /// Generate the misalignment dataset and the sim/pseudo-real paired dataset.
    Dataset {
        #[arg(long)]
        shapes: PathBuf,
    },
    /// Train the pose estimator.
    Train {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Score an estimator on the test split; export features.
    EvalPose {
        #[arg(long)]
        shapes: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        estimator: PathBuf,
    },
    /// Run every adaptation method and the method table.
    Adapt {
        #[arg(long)]
        shapes: PathBuf,
        #[arg(long)]
        estimator: PathBuf,
        #[arg(long)]
        paired: PathBuf,
    },
    /// Closed-loop insertion suite against spiral search.
    Assemble {
        #[arg(long)]
        shapes: PathBuf,
        #[arg(long)]
        estimator: PathBuf,
        /// Adapted estimator, evaluated as an extra method.
        #[arg(long)]
        adapted: Option<PathBuf>,
    },
    /// Merge the tables of several runs into one summary.
    Report {
        #[arg(long = "run", required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
    },
}

const STAGE_SHAPES: u64 = 1;
const STAGE_DATASET: u64 = 2;
const STAGE_PAIRED: u64 = 3;
const STAGE_INIT: u64 = 4;
const STAGE_SUITE: u64 = 7;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            report_error(&anyhow::Error::from(Failure {
                kind: "usage",
                message: e.to_string().trim().to_string(),
                path: None,
            }));
            return ExitCode::from(2);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&e);
            ExitCode::FAILURE
        }
    }
}

fn report_error(e: &anyhow::Error) {
    let (kind, path) = match e.chain().find_map(|c| c.downcast_ref::<Failure>()) {
        Some(f) => (f.kind, f.path.as_ref().map(|p| p.display().to_string())),
        None => (
            e.chain().find_map(|c| c.downcast_ref::<peghole::Error>()).map_or("error", core_kind),
            None,
        ),
    };
    let msg = e.chain().map(|c| c.to_string()).collect::<Vec<_>>().join(": ");
    let doc = json!({ "error": { "kind": kind, "message": msg, "path": path } });
    let _ = writeln!(std::io::stderr(), "{doc}");
}

fn core_kind(e: &peghole::Error) -> &'static str {
    use peghole::Error::*;
    match e {
        InvalidArgument(..) => "invalid_argument",
        ResampleBudget { .. } => "resample_budget",
        OffsetSelfIntersection { .. } => "offset_self_intersection",
        InvalidState(..) => "invalid_state",
        DimensionMismatch { .. } => "dimension_mismatch",
        NonFinite(..) => "non_finite",
        InsufficientData(..) => "insufficient_data",
        Provenance { .. } => "provenance",
        Format(..) => "format",
        Io(..) => "io",
        Json(..) => "json",
    }
}

fn workers(cli: &Cli) -> usize {
    cli.workers
        .filter(|&w| w > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let text = match &cli.config {
        Some(p) => Some(String::from_utf8(run::read_input(p)?).map_err(|e| fail("invalid_input", e.to_string(), Some(p)))?),
        None => None,
    };
    let cfg = RunConfig::resolve(cli.scale, text.as_deref(), &cli.overrides, cli.seed)
        .map_err(|e| fail("config", format!("{e:#}"), cli.config.as_deref()))?;
    let workers = workers(&cli);
    fs::create_dir_all(&cli.out).map_err(|e| fail("io", e.to_string(), Some(&cli.out)))?;
    let (dir, meta) = match &cli.command {
        Command::Shapes => cmd_shapes(&cli.out, &cfg)?,
        Command::Dataset { shapes } => cmd_dataset(&cli.out, &cfg, shapes, workers)?,
        Command::Train { dataset } => cmd_train(&cli.out, &cfg, dataset)?,
        Command::EvalPose {
            shapes,
            dataset,
            estimator,
        } => cmd_eval_pose(&cli.out, &cfg, shapes, dataset, estimator)?,
        Command::Adapt {
            shapes,
            estimator,
            paired,
        } => cmd_adapt(&cli.out, &cfg, shapes, estimator, paired)?,
        Command::Assemble {
            shapes,
            estimator,
            adapted,
        } => cmd_assemble(&cli.out, &cfg, shapes, estimator, adapted.as_deref(), workers)?,
        Command::Report { runs } => cmd_report(&cli.out, &cfg, runs)?,
    };
    let doc = json!({ "run_dir": dir.display().to_string(), "outputs": meta.outputs.keys().collect::<Vec<_>>() });
    println!("{doc}");
    Ok(())
}

fn load_shapes(path: &Path) -> anyhow::Result<ShapeManifest> {
    parse_input(path, |b| Ok(serde_json::from_slice(b)?))
}

fn load_estimator(path: &Path) -> anyhow::Result<EstimatorNet> {
    parse_input(path, EstimatorNet::from_bytes)
}

fn cmd_shapes(out: &Path, cfg: &RunConfig) -> anyhow::Result<(PathBuf, run::RunMeta)> {
    let mut run = Run::begin(out, "shapes", cfg, &[])?;
    let manifest = generate_shape_set(&cfg.geometry, cfg.stage_seed(STAGE_SHAPES))?;
    run.write_json("shapes.json", &manifest)?;
    run.finish()
}

fn cmd_dataset(out: &Path, cfg: &RunConfig, shapes: &Path, workers: usize) -> anyhow::Result<(PathBuf, run::RunMeta)> {
    let manifest = load_shapes(shapes)?;
    let mut run = Run::begin(out, "dataset", cfg, &[("shapes", shapes)])?;
    let ds = generate_dataset(
        &manifest,
        &cfg.dataset,
        &cfg.sim,
        &DomainConfig::sim(),
        cfg.stage_seed(STAGE_DATASET),
        workers,
    )?;
    let paired = generate_paired_dataset(
        &manifest,
        &cfg.paired,
        &cfg.sim,
        &cfg.real_domain,
        cfg.stage_seed(STAGE_PAIRED),
        workers,
    )?;
    run.write("dataset.bin", &ds.to_bytes())?;
    run.write_with("dataset.csv", |w| ds.write_csv(w))?;
    run.write_json("generation.json", &ds.report(&manifest, cfg.stage_seed(STAGE_DATASET)))?;
    run.write("paired.bin", &paired.to_bytes())?;
    run.write_with("paired.csv", |w| paired.write_csv(w))?;
    run.set_hashes(Some(ds.hash()), Some(paired.hash()));
    run.finish()
}

fn cmd_train(out: &Path, cfg: &RunConfig, dataset: &Path) -> anyhow::Result<(PathBuf, run::RunMeta)> {
    let ds = parse_input(dataset, Dataset::from_bytes)?;
    let mut run = Run::begin(out, "train", cfg, &[("dataset", dataset)])?;
    let net = build_estimator(ds.columns, cfg.model.width, cfg.stage_seed(STAGE_INIT))?;
    let mut tc = cfg.training.clone();
    tc.seed = mix(&[cfg.seed, tc.seed]);
    let hash = ds.hash();
    let (net, history) = train(net, &ds.usable(Split::Train), &ds.usable(Split::Val), &ds.stats, &hash, &tc)?;
    run.write("estimator.bin", &net.to_bytes())?;
    let mut csv = String::from("epoch,lr,train_mae,val_mae\n");
    for h in &history {
        let v = h.val_mae.map_or(String::new(), |v| format!("{v:.6}"));
        csv.push_str(&format!("{},{:.8},{:.6},{v}\n", h.epoch, h.lr, h.train_mae));
    }
    run.write("history.csv", csv.as_bytes())?;
    run.set_hashes(Some(hash), None);
    run.finish()
}

fn check_dataset(net: &EstimatorNet, hash: &str, path: &Path) -> anyhow::Result<()> {
    if net.meta.dataset_hash != hash {
        return Err(fail(
            "provenance",
            format!("estimator was trained on dataset {} but this dataset hashes to {hash}", net.meta.dataset_hash),
            Some(path),
        ));
    }
    Ok(())
}

fn cmd_eval_pose(
    out: &Path,
    cfg: &RunConfig,
    shapes: &Path,
    dataset: &Path,
    estimator: &Path,
) -> anyhow::Result<(PathBuf, run::RunMeta)> {
    let manifest = load_shapes(shapes)?;
    let ds = parse_input(dataset, Dataset::from_bytes)?;
    let net = load_estimator(estimator)?;
    let hash = ds.hash();
    check_dataset(&net, &hash, dataset)?;
    let mut run = Run::begin(
        out,
        "eval-pose",
        cfg,
        &[("shapes", shapes), ("dataset", dataset), ("estimator", estimator)],
    )?;
    let test = ds.usable(Split::Test);
    let report = evaluate(&net, &test, &manifest)?;
    run.write_json("eval.json", &report)?;
    run.write_with("table1_pose.csv", |w| report.write_csv(w))?;
    run.write_with("features.csv", |w| write_features_csv(&net, &test, w))?;
    run.set_hashes(Some(hash), None);
    run.finish()
}

fn cmd_adapt(
    out: &Path,
    cfg: &RunConfig,
    shapes: &Path,
    estimator: &Path,
    paired: &Path,
) -> anyhow::Result<(PathBuf, run::RunMeta)> {
    let manifest = load_shapes(shapes)?;
    let net = load_estimator(estimator)?;
    let pd = parse_input(paired, PairedDataset::from_bytes)?;
    if pd.columns != net.columns() {
        return Err(fail(
            "invalid_input",
            format!("paired signatures have {} columns, estimator expects {}", pd.columns, net.columns()),
            Some(paired),
        ));
    }
    let mut run = Run::begin(
        out,
        "adapt",
        cfg,
        &[("shapes", shapes), ("estimator", estimator), ("paired", paired)],
    )?;
    let mut ac = cfg.adaptation.clone();
    ac.seed = mix(&[cfg.seed, ac.seed]);
    let suite = adapt_all(&net, &pd, &ac)?;
    for (name, est) in [
        ("without", &suite.without),
        ("dla", &suite.dla),
        ("fla", &suite.fla),
        ("fine_tuning", &suite.fine_tune),
        ("ours", &suite.ours),
    ] {
        run.write(&format!("adapted_{name}.bin"), &est.to_bytes())?;
    }
    run.write_json("provenance.json", &suite.ours.provenance())?;
    let table = suite.table(&pd, &manifest)?;
    run.write_with("table3_adaptation.csv", |w| table.write_csv(w))?;
    run.set_hashes(Some(net.meta.dataset_hash.clone()), Some(pd.hash()));
    run.finish()
}

fn cmd_assemble(
    out: &Path,
    cfg: &RunConfig,
    shapes: &Path,
    estimator: &Path,
    adapted: Option<&Path>,
    workers: usize,
) -> anyhow::Result<(PathBuf, run::RunMeta)> {
    let manifest = load_shapes(shapes)?;
    let net = load_estimator(estimator)?;
    let adapted_net = match adapted {
        Some(p) => {
            let a = parse_input(p, AdaptedEstimator::from_bytes)?;
            if a.net.meta.dataset_hash != net.meta.dataset_hash {
                return Err(fail(
                    "provenance",
                    "adapted estimator descends from a different training dataset",
                    Some(p),
                ));
            }
            Some(a)
        }
        None => None,
    };
    let mut inputs = vec![("shapes", shapes), ("estimator", estimator)];
    if let Some(p) = adapted {
        inputs.push(("adapted", p));
    }
    let mut run = Run::begin(out, "assemble", cfg, &inputs)?;
    let domain = match cfg.assemble.domain {
        Domain::Sim => DomainConfig::sim(),
        Domain::PseudoReal => cfg.real_domain.clone(),
    };
    let mut methods = vec![SuiteMethod::Estimator {
        name: "PolyFit".into(),
        estimator: &net,
    }];
    if let Some(a) = &adapted_net {
        methods.push(SuiteMethod::Estimator {
            name: "PolyFit w/ AD".into(),
            estimator: a,
        });
    }
    methods.push(SuiteMethod::Spiral);
    let (records, report) = evaluate_suite(
        &manifest,
        &methods,
        &cfg.sim,
        &domain,
        &cfg.assemble.suite,
        cfg.stage_seed(STAGE_SUITE),
        workers,
    )?;
    run.write_with("trials.jsonl", |w| write_jsonl(&records, w))?;
    run.write_with("table1_assembly.csv", |w| report.write_class_csv(w))?;
    run.write_with("table2_trials.csv", |w| write_trials_csv(&records, w))?;
    run.write_with("table4_methods.csv", |w| report.write_method_csv(w))?;
    let series: serde_json::Map<String, serde_json::Value> = methods
        .iter()
        .filter(|m| matches!(m, SuiteMethod::Estimator { .. }))
        .map(|m| (m.name().to_string(), json!(median_ma_p_by_trial(&records, m.name()))))
        .collect();
    run.write_json("suite.json", &json!({ "report": report, "median_ma_p_by_trial": series }))?;
    run.set_hashes(Some(net.meta.dataset_hash.clone()), adapted_net.map(|a| a.paired_hash));
    run.finish()
}

/// CSV tables worth merging; large per-record exports are left out.
fn is_table(name: &str) -> bool {
    name.starts_with("table") && name.ends_with(".csv")
}

fn cmd_report(out: &Path, cfg: &RunConfig, runs: &[PathBuf]) -> anyhow::Result<(PathBuf, run::RunMeta)> {
    let metas = runs
        .iter()
        .map(|d| Ok((d.as_path(), load_meta(d)?)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut seen: Option<(&str, &Path)> = None;
    for (dir, m) in &metas {
        if let Some(h) = m.dataset_hash.as_deref() {
            match seen {
                Some((first, first_dir)) if first != h => {
                    return Err(fail(
                        "provenance",
                        format!(
                            "dataset hash {h} differs from {first} of {}; refusing to merge",
                            first_dir.display()
                        ),
                        Some(dir),
                    ));
                }
                None => seen = Some((h, dir)),
                _ => {}
            }
        }
    }
    let run_files: Vec<PathBuf> = runs.iter().map(|d| d.join("run.json")).collect();
    let inputs: Vec<(String, &Path)> = run_files
        .iter()
        .enumerate()
        .map(|(i, p)| (format!("run{i}"), p.as_path()))
        .collect();
    let input_refs: Vec<(&str, &Path)> = inputs.iter().map(|(n, p)| (n.as_str(), *p)).collect();
    let mut run = Run::begin(out, "report", cfg, &input_refs)?;

    let mut md = String::from("# Run summary\n");
    let mut written = BTreeSet::new();
    for (dir, m) in &metas {
        md.push_str(&format!("\n## {} ({})\n", m.command, &m.key[..16]));
        if let Some(h) = &m.dataset_hash {
            md.push_str(&format!("\ndataset hash: `{h}`\n"));
        }
        for name in m.outputs.keys().filter(|n| is_table(n)) {
            let path = dir.join(name);
            let body = String::from_utf8(run::read_input(&path)?).with_context(|| format!("reading {}", path.display()))?;
            md.push_str(&format!("\n### {name}\n\n```csv\n{body}```\n"));
            let mut target = format!("{}_{name}", m.command);
            let mut k = 1;
            while written.contains(&target) {
                k += 1;
                target = format!("{}{k}_{name}", m.command);
            }
            run.write(&target, body.as_bytes())?;
            written.insert(target);
        }
        if m.outputs.contains_key("history.csv") {
            let body = run::read_input(&dir.join("history.csv"))?;
            run.write("series_training.csv", &body)?;
        }
        if m.outputs.contains_key("suite.json") {
            let path = dir.join("suite.json");
            let doc: serde_json::Value = serde_json::from_slice(&run::read_input(&path)?)
                .map_err(|e| fail("invalid_input", e.to_string(), Some(&path)))?;
            let mut csv = String::from("method,trial,median_ma_p_mm\n");
            if let Some(series) = doc["median_ma_p_by_trial"].as_object() {
                for (method, values) in series {
                    for (t, v) in values.as_array().into_iter().flatten().enumerate() {
                        let cell = v.as_f64().map_or(String::new(), |x| format!("{x:.4}"));
                        csv.push_str(&format!("{method},{},{cell}\n", t + 1));
                    }
                }
            }
            run.write("series_ma_p.csv", csv.as_bytes())?;
        }
    }
    run.write("summary.md", md.as_bytes())?;
    run.set_hashes(seen.map(|(h, _)| h.to_string()), None);
    run.finish()
}
