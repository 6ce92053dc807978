use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde_json::json;

use rcl_core::config::{DataSource, RunConfig};
use rcl_core::container::{load_params, save_params};
use rcl_core::data::{make_windows, DatasetSplit};
use rcl_core::forecaster::{
    eval_indices, evaluate, train_forecaster, write_epoch_log, write_metrics, FreezeMode, Forecaster,
    ForecasterConfig, MetricRow, TransferPlan,
};
use rcl_core::mamba::MambaParams;
use rcl_core::rcl::{pretrain, write_loss_history, BLOCK_PREFIX};
use rcl_core::selectivity::{emit_traces, SelectivityReport, DEFAULT_BINS};
use rcl_core::verify::{run_suite, write_sigma_sweep, Suite};
use rcl_core::{Error, Tensor};

use crate::manifest::{unix_now, Phases, RunManifest};

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Verification(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Verification(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Verification(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

fn io_failure(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Data(format!("{}: {e}", path.display()))
}

pub type Outcome = Result<(), Failure>;

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) if !p.exists() => Err(Failure::Data(format!("config file {} not found", p.display()))),
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::from_json("{}")?),
    }
}

fn resolve_source(arg: Option<&str>, cfg: &RunConfig) -> Result<DataSource, Failure> {
    let text = arg
        .map(str::to_string)
        .or_else(|| cfg.data.clone())
        .ok_or_else(|| Failure::Usage("no data given: pass --data or set `data` in the config".into()))?;
    let source: DataSource = text.parse()?;
    if let DataSource::Csv(p) = &source {
        if !p.exists() {
            return Err(Failure::Data(format!("data file {} not found", p.display())));
        }
    }
    Ok(source)
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(io_failure(dir))
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn scaler_json(split: &DatasetSplit) -> serde_json::Value {
    json!({
        "normalization": "per-channel z-score from train-split statistics; metrics in normalized units",
        "columns": split.columns,
        "mean": split.scaler.mean,
        "std": split.scaler.std,
    })
}

pub fn pretrain_cmd(config: Option<&Path>, data: Option<&str>, out: &Path) -> Outcome {
    let started = unix_now();
    let cfg = load_config(config)?;
    let source = resolve_source(data, &cfg)?;
    let mut phases = Phases::new();
    let split = phases.run("load", || source.load(&cfg.synth))?;
    let windows = make_windows(&split.train, cfg.pretrain_window, 1)?.inputs;
    let outcome = phases.run("pretrain", || pretrain(&cfg.pretrain, &cfg.forecaster.mamba, &windows))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let history = sidecar(out, "loss.csv");
    let manifest_path = sidecar(out, "manifest.json");
    save_params(out, &outcome.to_named())?;
    write_loss_history(&history, &outcome.history)?;
    let last = outcome.history.last();
    let manifest = RunManifest {
        command: "pretrain".into(),
        config: serde_json::to_value(&cfg).expect("config serializes"),
        seed: cfg.pretrain.seed,
        started_unix: started,
        finished_unix: unix_now(),
        inputs: BTreeMap::from([("data".to_string(), source.to_string())]),
        outputs: BTreeMap::from([
            ("params".to_string(), out.to_path_buf()),
            ("loss_history".to_string(), history),
            ("manifest".to_string(), manifest_path.clone()),
        ]),
        metrics: json!({ "final_epoch": last }),
        phases: phases.finish(),
        extra: BTreeMap::from([
            ("windows".to_string(), json!(windows.shape()[0])),
            ("scaler".to_string(), scaler_json(&split)),
        ]),
    };
    manifest.write(&manifest_path).map_err(io_failure(&manifest_path))?;
    match last {
        Some(e) => println!("pretrained {} epochs, final loss {:.6} (intra {:.6}, inter {:.6})", e.epoch, e.total, e.intra, e.inter),
        None => println!("pretrained 0 epochs"),
    }
    println!("wrote {}", out.display());
    Ok(())
}

/// Loads the block stored by `pretrain`, or a bare block container.
fn load_block(path: &Path) -> Result<MambaParams, Failure> {
    if !path.exists() {
        return Err(Failure::Data(format!("parameter file {} not found", path.display())));
    }
    let named = load_params(path)?;
    MambaParams::from_named(&named, BLOCK_PREFIX)
        .or_else(|_| MambaParams::from_named(&named, ""))
        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

pub struct TrainArgs<'a> {
    pub config: Option<&'a Path>,
    pub data: Option<&'a str>,
    pub horizon: usize,
    pub init: Option<&'a Path>,
    pub replace: Option<f64>,
    pub freeze: Option<FreezeMode>,
    pub out: &'a Path,
}

pub fn train_cmd(args: TrainArgs) -> Outcome {
    let started = unix_now();
    let cfg = load_config(args.config)?;
    if args.init.is_none() && (args.replace.is_some() || args.freeze.is_some()) {
        return Err(Failure::Usage("--replace and --freeze require --init".into()));
    }
    let plan = match args.init {
        Some(_) => TransferPlan {
            replace_fraction: args.replace.unwrap_or(cfg.transfer.replace_fraction),
            freeze_mode: args.freeze.unwrap_or(cfg.transfer.freeze_mode),
            scope: cfg.transfer.scope,
        },
        None if cfg.transfer.replace_fraction > 0.0 => {
            return Err(Failure::Usage("the config's transfer plan replaces layers but no --init was given".into()))
        }
        None => TransferPlan::default(),
    };
    let source = resolve_source(args.data, &cfg)?;
    let mut phases = Phases::new();
    let split = phases.run("load", || source.load(&cfg.synth))?;
    let fcfg = forecaster_config(&cfg, &split, args.horizon)?;
    let mut model = Forecaster::build(&fcfg, cfg.train.seed)?;
    if let Some(init) = args.init {
        let block = load_block(init)?;
        model = model.transfer(&block, &plan)?;
    }
    let train = make_windows(&split.train, fcfg.t_in, fcfg.t_out)?;
    let val = make_windows(&split.val, fcfg.t_in, fcfg.t_out)?;
    let test = make_windows(&split.test, fcfg.t_in, fcfg.t_out)?;
    let outcome = phases.run("train", || train_forecaster(&model, &train, &val, &cfg.train))?;
    let metrics = phases.run("evaluate", || {
        evaluate(&outcome.model, &test, &eval_indices(test.len(), None), cfg.train.batch_size)
    })?;

    create_dir(args.out)?;
    let paths = OutputPaths::new(args.out);
    save_params(&paths.params, &outcome.model.params)?;
    write_epoch_log(&paths.epoch_log, &outcome.log)?;
    let row = MetricRow {
        dataset: source.label(),
        horizon: fcfg.t_out,
        plan: plan.label(),
        seed: cfg.train.seed,
        mae: metrics.mae,
        mse: metrics.mse,
    };
    write_metrics(&paths.metrics, &[row])?;
    let mut inputs = BTreeMap::from([("data".to_string(), source.to_string())]);
    if let Some(init) = args.init {
        inputs.insert("init".into(), init.display().to_string());
    }
    let manifest = RunManifest {
        command: "train".into(),
        config: serde_json::to_value(&cfg).expect("config serializes"),
        seed: cfg.train.seed,
        started_unix: started,
        finished_unix: unix_now(),
        inputs,
        outputs: paths.map(),
        metrics: json!({
            "test_mae": metrics.mae,
            "test_mse": metrics.mse,
            "best_epoch": outcome.best_epoch,
        }),
        phases: phases.finish(),
        extra: BTreeMap::from([
            ("forecaster".to_string(), serde_json::to_value(&fcfg).expect("serializes")),
            ("plan".to_string(), serde_json::to_value(plan).expect("serializes")),
            ("frozen".to_string(), json!(outcome.model.frozen)),
            ("scaler".to_string(), scaler_json(&split)),
        ]),
    };
    manifest.write(&paths.manifest).map_err(io_failure(&paths.manifest))?;
    println!(
        "test MAE {:.6} MSE {:.6} (best epoch {:?}, plan {})",
        metrics.mae,
        metrics.mse,
        outcome.best_epoch,
        plan.label()
    );
    Ok(())
}

fn forecaster_config(cfg: &RunConfig, split: &DatasetSplit, horizon: usize) -> Result<ForecasterConfig, Failure> {
    let mut fcfg = cfg.forecaster.clone();
    let f = split.n_features();
    if fcfg.n_features != 0 && fcfg.n_features != f {
        return Err(Failure::Usage(format!(
            "config says n_features = {} but the data has {f} channels",
            fcfg.n_features
        )));
    }
    fcfg.n_features = f;
    fcfg.t_out = horizon;
    fcfg.validate()?;
    Ok(fcfg)
}

struct OutputPaths {
    manifest: PathBuf,
    metrics: PathBuf,
    epoch_log: PathBuf,
    params: PathBuf,
}

impl OutputPaths {
    fn new(dir: &Path) -> Self {
        Self {
            manifest: dir.join("manifest.json"),
            metrics: dir.join("metrics.csv"),
            epoch_log: dir.join("epoch_log.csv"),
            params: dir.join("params.rclp"),
        }
    }

    fn map(&self) -> BTreeMap<String, PathBuf> {
        BTreeMap::from([
            ("manifest".to_string(), self.manifest.clone()),
            ("metrics".to_string(), self.metrics.clone()),
            ("epoch_log".to_string(), self.epoch_log.clone()),
            ("params".to_string(), self.params.clone()),
        ])
    }
}

/// A trained model directory written by `train`.
struct SavedModel {
    config: RunConfig,
    model: Forecaster,
    data: Option<String>,
}

fn load_model(dir: &Path) -> Result<SavedModel, Failure> {
    let paths = OutputPaths::new(dir);
    if !paths.manifest.exists() || !paths.params.exists() {
        return Err(Failure::Data(format!(
            "{} is not a model directory (needs manifest.json and params.rclp)",
            dir.display()
        )));
    }
    let manifest = RunManifest::read(&paths.manifest).map_err(io_failure(&paths.manifest))?;
    let bad = |what: &str| Failure::Data(format!("{}: {what}", paths.manifest.display()));
    let config: RunConfig = serde_json::from_value(manifest.config.clone()).map_err(|e| bad(&e.to_string()))?;
    let fcfg: ForecasterConfig = manifest
        .extra
        .get("forecaster")
        .cloned()
        .ok_or_else(|| bad("missing forecaster config"))
        .and_then(|v| serde_json::from_value(v).map_err(|e| bad(&e.to_string())))?;
    let frozen: BTreeSet<String> = manifest
        .extra
        .get("frozen")
        .cloned()
        .map(|v| serde_json::from_value(v).map_err(|e| bad(&e.to_string())))
        .transpose()?
        .unwrap_or_default();
    let params = load_params(&paths.params)?;
    let model = Forecaster::from_params(&fcfg, params, frozen).map_err(|e| bad(&e.to_string()))?;
    let data = manifest.inputs.get("data").cloned();
    Ok(SavedModel { config, model, data })
}

fn test_windows(saved: &SavedModel, data: Option<&str>) -> Result<(DataSource, rcl_core::data::WindowSet), Failure> {
    let source = resolve_source(data.or(saved.data.as_deref()), &saved.config)?;
    let split = source.load(&saved.config.synth)?;
    let cfg = &saved.model.cfg;
    if split.n_features() != cfg.n_features {
        return Err(Failure::Data(format!(
            "model expects {} channels, data has {}",
            cfg.n_features,
            split.n_features()
        )));
    }
    Ok((source, make_windows(&split.test, cfg.t_in, cfg.t_out)?))
}

pub fn eval_cmd(model_dir: &Path, data: Option<&str>) -> Outcome {
    let saved = load_model(model_dir)?;
    let (source, test) = test_windows(&saved, data)?;
    let m = evaluate(&saved.model, &test, &eval_indices(test.len(), None), saved.config.train.batch_size)?;
    println!(
        "{}",
        json!({ "data": source.to_string(), "horizon": saved.model.cfg.t_out, "mae": m.mae, "mse": m.mse })
    );
    Ok(())
}

pub struct ProbeArgs<'a> {
    pub model: &'a Path,
    pub data: Option<&'a str>,
    pub out: &'a Path,
    pub windows: usize,
    pub layer: usize,
    pub seq: usize,
}

pub fn probe_cmd(args: ProbeArgs) -> Outcome {
    let started = unix_now();
    let saved = load_model(args.model)?;
    let (source, test) = test_windows(&saved, args.data)?;
    if args.layer >= saved.model.cfg.n_layer {
        return Err(Failure::Usage(format!(
            "--layer {} out of range for {} layers",
            args.layer, saved.model.cfg.n_layer
        )));
    }
    let idx = eval_indices(test.len(), Some(args.windows));
    if args.seq >= idx.len() {
        return Err(Failure::Usage(format!("--seq {} out of range for {} probe windows", args.seq, idx.len())));
    }
    let mut phases = Phases::new();
    let (x, _) = test.batch(&idx);
    let capture = phases.run("probe", || saved.model.probe(&x))?;
    let report = SelectivityReport::from_traces(&capture.traces, DEFAULT_BINS)?;
    create_dir(args.out)?;
    let (t, d) = (capture.hidden.shape()[1], capture.hidden.shape()[2]);
    let rows = Tensor::new(vec![t, d], capture.hidden.data()[args.seq * t * d..(args.seq + 1) * t * d].to_vec())?;
    let files = emit_traces(&capture.traces[args.layer], args.seq, &rows, args.out)?;
    let report_path = args.out.join("report.json");
    std::fs::write(&report_path, report.to_json()).map_err(io_failure(&report_path))?;
    let manifest_path = args.out.join("manifest.json");
    let manifest = RunManifest {
        command: "probe".into(),
        config: serde_json::to_value(&saved.config).expect("config serializes"),
        seed: saved.config.train.seed,
        started_unix: started,
        finished_unix: unix_now(),
        inputs: BTreeMap::from([
            ("data".to_string(), source.to_string()),
            ("model".to_string(), args.model.display().to_string()),
        ]),
        outputs: BTreeMap::from([
            ("report".to_string(), report_path),
            ("delta".to_string(), files.delta),
            ("memory".to_string(), files.memory),
            ("heatmap".to_string(), files.heatmap),
            ("manifest".to_string(), manifest_path.clone()),
        ]),
        metrics: serde_json::to_value(&report).expect("report serializes"),
        phases: phases.finish(),
        extra: BTreeMap::from([
            ("windows".to_string(), json!(idx.len())),
            ("layer".to_string(), json!(args.layer)),
            ("seq".to_string(), json!(args.seq)),
        ]),
    };
    manifest.write(&manifest_path).map_err(io_failure(&manifest_path))?;
    println!(
        "SM {} SI {} NR {} FR {:.4} ME {:.4} nats",
        report.n_sm, report.n_si, report.n_nr, report.fr, report.me
    );
    Ok(())
}

pub fn verify_cmd(suite: Suite, seed: u64, out: Option<&Path>) -> Outcome {
    let report = run_suite(suite, seed)?;
    for c in &report.checks {
        println!(
            "{} {} {:e} {} {:e}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.comparison,
            c.threshold
        );
    }
    if let Some(mono) = report.sweep_monotone_increasing {
        println!("INFO sigma sweep monotone increasing: {mono}");
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        let path = dir.join("oracle_report.json");
        std::fs::write(&path, report.to_json()).map_err(io_failure(&path))?;
        if !report.sigma_sweep.is_empty() {
            write_sigma_sweep(&dir.join("sigma_sweep.csv"), &report.sigma_sweep)?;
        }
    }
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err(Failure::Verification(format!("failed checks: {}", failed.join(", "))))
    }
}
