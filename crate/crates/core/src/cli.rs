//! Batch command-line front end: `ingest`, `features`, `train`,
//! `predict`, `evaluate`, `tune`, `compare`, plus a `synth` helper for
//! generating a demo dataset. Intermediate artifacts live in a cache
//! directory guarded by SHA-256 sidecars; any command whose upstream
//! cache no longer matches its recorded checksum refuses to run.

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::arima::{self, ArimaOrder};
use crate::error::{Error, Result};
use crate::evalharness::{
    self, render_comparison, rmse, write_comparison_csv, write_submission, write_trial_log,
    RunReport, SearchSpace, MODEL_NAMES,
};
use crate::featuregen::{self, FeatureSpec};
use crate::gbt::{self, GbtParams};
use crate::ingest::{self, TestRow};
use crate::panel::{
    split_rows, CatalogTables, FeatureMatrix, ItemId, PanelGrid, SalesRecord, ShopId, SplitSpec,
    CLIP_HI, CLIP_LO,
};
use crate::seqnet::{
    self,
    data::{block_keys, build_samples, SampleSet, Scaler},
    SeqNetParams,
};
use crate::synth::{self, SynthConfig};

/// Full run configuration. Defaults mirror the library defaults; a
/// JSON config file, `PF_`-prefixed environment variables, and
/// `--set key=value` flags override in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub output_dir: PathBuf,
    pub features: FeatureSpec,
    pub split: SplitSpec,
    pub gbt: GbtParams,
    pub arima: ArimaOrder,
    pub seqnet: SeqNetParams,
    pub search: SearchSpace,
    pub synth: SynthConfig,
    /// LSTM look-back window, in months.
    pub window: usize,
    pub seed: u64,
    /// Rayon worker count; 0 keeps the library default.
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: "data".into(),
            cache_dir: "cache".into(),
            output_dir: "out".into(),
            features: FeatureSpec::default(),
            split: SplitSpec::default(),
            gbt: GbtParams::default(),
            arima: ArimaOrder::default(),
            seqnet: SeqNetParams::default(),
            search: SearchSpace::default(),
            synth: SynthConfig::default(),
            window: seqnet::data::WINDOW,
            seed: 0,
            jobs: 0,
        }
    }
}

/// Stable per-component seed derived from the global seed, so one
/// config seed pins every stochastic component.
pub fn component_seed(global: u64, component: &str) -> u64 {
    let digest = Sha256::digest(component.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    global ^ u64::from_le_bytes(bytes)
}

fn set_by_path(root: &mut Value, dotted: &str, value: Value) -> Result<()> {
    let mut cursor = root;
    let parts: Vec<&str> = dotted.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(format!("bad override key `{dotted}`")));
        }
        let obj = cursor
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{dotted}` does not address an object field")))?;
        if i + 1 == parts.len() {
            obj.insert((*part).into(), value);
            return Ok(());
        }
        cursor = obj.entry(*part).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("non-empty key path");
}

fn parse_override(kv: &str) -> Result<(String, Value)> {
    let (key, raw) = kv
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{kv}` is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Environment overrides: `PF_SEED=7` sets `seed`, a double underscore
/// descends one level (`PF_SPLIT__TRAIN_END=21` sets
/// `split.train_end`).
fn env_overrides(vars: impl Iterator<Item = (String, String)>) -> Vec<(String, Value)> {
    let mut out: Vec<(String, Value)> = vars
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix("PF_")?;
            let key = rest.to_lowercase().replace("__", ".");
            let value = serde_json::from_str(&v).unwrap_or(Value::String(v));
            Some((key, value))
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Assembles the effective config from defaults, optional JSON file,
/// environment, and `--set` overrides (later sources win).
pub fn build_config(
    config_path: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
    jobs: Option<usize>,
) -> Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default())
        .map_err(|e| Error::Config(format!("serialize defaults: {e}")))?;
    if let Some(path) = config_path {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let overlay: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad config JSON {path:?}: {e}")))?;
        merge(&mut value, overlay);
    }
    for (key, v) in env_overrides(std::env::vars()) {
        set_by_path(&mut value, &key, v)?;
    }
    for kv in sets {
        let (key, v) = parse_override(kv)?;
        set_by_path(&mut value, &key, v)?;
    }
    let mut cfg: RunConfig =
        serde_json::from_value(value).map_err(|e| Error::Config(format!("bad config: {e}")))?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = jobs {
        cfg.jobs = jobs;
    }
    // One global seed drives every component.
    cfg.gbt.seed = component_seed(cfg.seed, "gbt");
    cfg.seqnet.seed = component_seed(cfg.seed, "seqnet");
    cfg.search.seed = component_seed(cfg.seed, "search");
    cfg.synth.seed = component_seed(cfg.seed, "synth");
    cfg.features.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Cache checksums and locking

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    sha256: String,
    inputs: BTreeMap<String, String>,
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".sha256.json");
    path.with_file_name(name)
}

/// Records the artifact's own hash plus the current hash of each input
/// it was derived from.
fn write_sidecar(path: &Path, inputs: &[&Path]) -> Result<()> {
    let mut map = BTreeMap::new();
    for input in inputs {
        map.insert(input.to_string_lossy().into_owned(), file_sha256(input)?);
    }
    let sidecar = Sidecar { sha256: file_sha256(path)?, inputs: map };
    let text = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::Config(format!("serialize sidecar: {e}")))?;
    let sc = sidecar_path(path);
    std::fs::write(&sc, text).map_err(|e| Error::io(&sc, e))
}

/// Refuses to use `path` when it, or anything it was built from, has
/// changed since the sidecar was written. `rebuild_hint` names the
/// command that refreshes it.
fn verify_artifact(path: &Path, rebuild_hint: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::StaleCache(format!(
            "{} is missing; run `{rebuild_hint}` first",
            path.display()
        )));
    }
    let sc = sidecar_path(path);
    let text = std::fs::read_to_string(&sc).map_err(|_| {
        Error::StaleCache(format!(
            "checksum sidecar for {} is missing; run `{rebuild_hint}`",
            path.display()
        ))
    })?;
    let sidecar: Sidecar = serde_json::from_str(&text)
        .map_err(|e| Error::StaleCache(format!("unreadable sidecar {}: {e}", sc.display())))?;
    if file_sha256(path)? != sidecar.sha256 {
        return Err(Error::StaleCache(format!(
            "{} changed since it was written; run `{rebuild_hint}`",
            path.display()
        )));
    }
    for (input, recorded) in &sidecar.inputs {
        let input_path = Path::new(input);
        let current = input_path
            .exists()
            .then(|| file_sha256(input_path))
            .transpose()?
            .unwrap_or_default();
        if &current != recorded {
            return Err(Error::StaleCache(format!(
                "{} is stale: input {input} changed; run `{rebuild_hint}`",
                path.display()
            )));
        }
    }
    Ok(())
}

/// Exclusive advisory lock file; held for the duration of any command
/// that writes into the cache directory.
struct CacheLock {
    path: PathBuf,
}

impl CacheLock {
    fn acquire(cache_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
        let path = cache_dir.join(".lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(CacheLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "cache directory {} is locked by another run (remove {} if that run died)",
                cache_dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for CacheLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

// ---------------------------------------------------------------------------
// Command plumbing

#[derive(Debug, Parser)]
#[command(name = "pf", version, about = "Monthly sales forecasting pipeline")]
struct Cli {
    /// JSON config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set split.train_end=21.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Worker thread count.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Global random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelKind {
    Gbt,
    Arima,
    Lstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalKind {
    Gbt,
    Arima,
    Lstm,
    /// Constant mean-of-train predictor.
    Baseline,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset into the data directory.
    Synth,
    /// Clean the raw CSVs and build the monthly panel grid cache.
    Ingest,
    /// Assemble the lag/aggregate feature matrix cache.
    Features,
    /// Fit one model and serialize it to the output directory.
    Train { model: ModelKind },
    /// Write the submission CSV for a trained model.
    Predict { model: ModelKind },
    /// Print the validation RMSE of a model (or the mean baseline).
    Evaluate { model: EvalKind },
    /// Random-search GBT hyperparameters; write the trial log.
    Tune,
    /// Fit all three models and print the comparison table.
    Compare,
}

/// Entry point; returns the process exit code: 0 success, 1 usage or
/// configuration, 2 data/schema, 3 numeric failure.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match build_config(cli.config.as_deref(), &cli.sets, cli.seed, cli.jobs) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    if cfg.jobs > 0 {
        // A second in-process call (tests) leaves the existing pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build_global();
    }
    let result = match cli.command {
        Command::Synth => cmd_synth(&cfg),
        Command::Ingest => cmd_ingest(&cfg),
        Command::Features => cmd_features(&cfg),
        Command::Train { model } => cmd_train(&cfg, model),
        Command::Predict { model } => cmd_predict(&cfg, model),
        Command::Evaluate { model } => cmd_evaluate(&cfg, model),
        Command::Tune => cmd_tune(&cfg),
        Command::Compare => cmd_compare(&cfg),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

struct RawInputs {
    records: Vec<SalesRecord>,
    catalog: CatalogTables,
    report: ingest::CleaningReport,
}

fn raw_paths(cfg: &RunConfig) -> [PathBuf; 4] {
    [
        cfg.data_dir.join("sales_train.csv"),
        cfg.data_dir.join("items.csv"),
        cfg.data_dir.join("item_categories.csv"),
        cfg.data_dir.join("shops.csv"),
    ]
}

fn load_raw(cfg: &RunConfig) -> Result<RawInputs> {
    let [sales, items, categories, shops] = raw_paths(cfg);
    let (records, report) = ingest::load_sales(&sales)?;
    let catalog = ingest::load_catalog(&items, &categories, &shops)?;
    Ok(RawInputs { records, catalog, report })
}

fn grid_cache(cfg: &RunConfig) -> PathBuf {
    cfg.cache_dir.join("grid.csv")
}

fn features_cache(cfg: &RunConfig) -> PathBuf {
    cfg.cache_dir.join("features.csv")
}

fn load_grid_checked(cfg: &RunConfig) -> Result<PanelGrid> {
    let path = grid_cache(cfg);
    verify_artifact(&path, "pf ingest")?;
    ingest::read_grid_csv(&path)
}

fn load_features_checked(cfg: &RunConfig) -> Result<FeatureMatrix> {
    let path = features_cache(cfg);
    verify_artifact(&path, "pf features")?;
    featuregen::read_matrix_csv(&path)
}

fn load_test_rows(cfg: &RunConfig) -> Result<Vec<TestRow>> {
    ingest::load_test(cfg.data_dir.join("test.csv"))
}

fn ensure_out(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))
}

// ---------------------------------------------------------------------------
// Subcommands

fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let data = synth::generate(&cfg.synth);
    synth::write_dataset(&data, &cfg.data_dir)?;
    println!(
        "synthetic dataset: {} transaction rows, {} shops x {} items x {} months -> {}",
        data.records.len(),
        cfg.synth.n_shops,
        cfg.synth.n_items,
        cfg.synth.n_months,
        cfg.data_dir.display()
    );
    Ok(())
}

fn cmd_ingest(cfg: &RunConfig) -> Result<()> {
    let _lock = CacheLock::acquire(&cfg.cache_dir)?;
    let raw = load_raw(cfg)?;
    let (grid, clip_events) = ingest::build_grid(&raw.records, &raw.catalog, (CLIP_LO, CLIP_HI));
    let path = grid_cache(cfg);
    ingest::write_grid_csv(&grid, &path)?;
    let inputs = raw_paths(cfg);
    write_sidecar(&path, &inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    let r = &raw.report;
    println!(
        "ingest: {} rows read, {} kept, {} dropped, {} prices imputed, {} monthly targets clipped",
        r.rows_read, r.rows_kept, r.rows_dropped, r.values_imputed, clip_events
    );
    println!("grid cache: {} ({} months)", path.display(), grid.n_blocks());
    Ok(())
}

fn cmd_features(cfg: &RunConfig) -> Result<()> {
    let _lock = CacheLock::acquire(&cfg.cache_dir)?;
    let grid = load_grid_checked(cfg)?;
    let raw = load_raw(cfg)?;
    let test_path = cfg.data_dir.join("test.csv");
    let test_rows = if test_path.exists() { Some(load_test_rows(cfg)?) } else { None };
    let matrix = featuregen::assemble(
        &grid,
        &raw.catalog,
        &raw.records,
        &cfg.features,
        &cfg.split,
        test_rows.as_deref(),
    )?;
    let path = features_cache(cfg);
    featuregen::write_matrix_csv(&matrix, &path)?;
    write_sidecar(&path, &[&grid_cache(cfg)])?;
    println!("feature matrix: {} rows x {} columns", matrix.n_rows(), matrix.n_features());
    println!("columns: {}", matrix.feature_names().join(","));
    Ok(())
}

fn gbt_model_path(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("gbt.json")
}

fn lstm_model_path(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("seqnet.json")
}

fn arima_predictions_path(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("arima_predictions.csv")
}

/// Fit GBT on the train partition, score on validation.
fn gbt_fit_eval(
    matrix: &FeatureMatrix,
    split: &SplitSpec,
    params: &GbtParams,
) -> Result<(gbt::GbtModel, f64, f64, Option<f64>)> {
    let (train, val, test) = split_rows(matrix, split)?;
    let (model, log) = gbt::fit(&train, params, Some(&val))?;
    let train_rmse = log.train_rmse.last().copied().unwrap_or(f64::NAN);
    let val_rmse = rmse(&gbt::predict(&model, &val)?, &val.target)?;
    let test_rmse = if test.target.iter().all(|t| t.is_finite()) {
        Some(rmse(&gbt::predict(&model, &test)?, &test.target)?)
    } else {
        None
    };
    Ok((model, train_rmse, val_rmse, test_rmse))
}

/// Bundled sequence-model artifact: network, input scaler, window.
#[derive(Debug, Serialize, Deserialize)]
struct LstmArtifact {
    model: seqnet::SeqNetModel,
    scaler: Scaler,
    window: usize,
}

struct LstmEval {
    artifact: LstmArtifact,
    train_rmse: f64,
    val_rmse: f64,
    test_rmse: Option<f64>,
}

fn lstm_fit_eval(
    grid: &PanelGrid,
    catalog: &CatalogTables,
    records: &[SalesRecord],
    cfg: &RunConfig,
) -> Result<LstmEval> {
    let tables = featuregen::build_tables(grid, catalog, records, &cfg.split)?;
    let burn_in = cfg.features.burn_in_blocks;
    let train_keys: Vec<_> = (burn_in..=cfg.split.train_end.min(grid.n_blocks().saturating_sub(1)))
        .flat_map(|b| block_keys(grid, b))
        .collect();
    if train_keys.is_empty() {
        return Err(Error::EmptyPartition("no LSTM training rows after burn-in".into()));
    }
    let val_keys = block_keys(grid, cfg.split.validation_block);
    if val_keys.is_empty() {
        return Err(Error::EmptyPartition("no LSTM validation rows".into()));
    }
    let mut train = build_samples(grid, catalog, &tables, &train_keys, cfg.window);
    let mut val = build_samples(grid, catalog, &tables, &val_keys, cfg.window);
    let scaler = Scaler::fit(&train.samples);
    scaler.transform(&mut train.samples);
    scaler.transform(&mut val.samples);
    let (model, log) = seqnet::train(&train.samples, &val.samples, &cfg.seqnet)?;
    let train_rmse = log.train_rmse.last().copied().unwrap_or(f64::NAN);
    let val_rmse = log.val_rmse.last().copied().unwrap_or(f64::NAN);
    let test_keys = block_keys(grid, cfg.split.test_block);
    let test_rmse = if !test_keys.is_empty() {
        let mut test = build_samples(grid, catalog, &tables, &test_keys, cfg.window);
        scaler.transform(&mut test.samples);
        let preds = seqnet::forward(&model, &test.samples);
        let targets: Vec<f64> = test.samples.iter().map(|s| s.target).collect();
        Some(rmse(&preds, &targets)?)
    } else {
        None
    };
    Ok(LstmEval {
        artifact: LstmArtifact { model, scaler, window: cfg.window },
        train_rmse,
        val_rmse,
        test_rmse,
    })
}

/// RMSE of `predict(shop, item)` against the targets of one grid
/// block; None when the block is absent or empty.
fn score_block(grid: &PanelGrid, block: usize, predict: impl Fn(ShopId, ItemId) -> f64) -> Option<f64> {
    let cells = grid.block(block)?;
    if cells.is_empty() {
        return None;
    }
    let mut preds = Vec::with_capacity(cells.len());
    let mut targets = Vec::with_capacity(cells.len());
    for &shop in &cells.shops {
        for &item in &cells.items {
            preds.push(predict(shop, item));
            targets.push(grid.target(block, shop, item).unwrap_or(0.0));
        }
    }
    rmse(&preds, &targets).ok()
}

struct ArimaEval {
    panel: arima::ArimaPanel,
    train_rmse: f64,
    val_rmse: f64,
    test_rmse: Option<f64>,
}

fn arima_fit_eval(grid: &PanelGrid, order: ArimaOrder, split: &SplitSpec) -> Result<ArimaEval> {
    let panel = arima::fit_all(grid, order, split)?;
    let val_rmse = score_block(grid, split.validation_block, |s, i| panel.val_prediction(s, i))
        .ok_or_else(|| Error::EmptyPartition("validation block missing from grid".into()))?;
    let test_rmse = if split.test_block < grid.n_blocks() {
        score_block(grid, split.test_block, |s, i| panel.test_prediction(s, i))
    } else {
        None
    };
    // "Train" RMSE: one-step forecast of the last training block from
    // the history before it, via a shifted split.
    let train_rmse = if split.train_end >= 1 {
        let shifted = SplitSpec::new(split.train_end - 1, split.train_end, split.train_end + 1)?;
        let shifted_panel = arima::fit_all(grid, order, &shifted)?;
        score_block(grid, split.train_end, |s, i| shifted_panel.val_prediction(s, i))
            .unwrap_or(f64::NAN)
    } else {
        f64::NAN
    };
    Ok(ArimaEval { panel, train_rmse, val_rmse, test_rmse })
}

fn write_arima_predictions(panel: &arima::ArimaPanel, path: &Path) -> Result<()> {
    let mut keys: Vec<&(ShopId, ItemId)> = panel.predictions.keys().collect();
    keys.sort();
    let mut out = String::from("shop_id,item_id,val_prediction,test_prediction\n");
    for key in keys {
        let (val, test) = panel.predictions[key];
        let _ = writeln!(out, "{},{},{},{}", key.0, key.1, val, test);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_arima_predictions(path: &Path) -> Result<HashMap<(ShopId, ItemId), (f64, f64)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut map = HashMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        let field = |i: usize| -> Result<f64> {
            record
                .get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Validation(format!("bad prediction row in {path:?}")))
        };
        map.insert(
            (field(0)? as ShopId, field(1)? as ItemId),
            (field(2)?, field(3)?),
        );
    }
    Ok(map)
}

fn cmd_train(cfg: &RunConfig, model: ModelKind) -> Result<()> {
    ensure_out(cfg)?;
    match model {
        ModelKind::Gbt => {
            let matrix = load_features_checked(cfg)?;
            let (model, train_rmse, val_rmse, test_rmse) =
                gbt_fit_eval(&matrix, &cfg.split, &cfg.gbt)?;
            let path = gbt_model_path(cfg);
            gbt::save_model(&model, &path)?;
            println!("model: {}", path.display());
            print_report_row(MODEL_NAMES[0], train_rmse, val_rmse, test_rmse);
        }
        ModelKind::Arima => {
            let grid = load_grid_checked(cfg)?;
            let eval = arima_fit_eval(&grid, cfg.arima, &cfg.split)?;
            let diag_path = cfg.output_dir.join("arima_diagnostics.csv");
            arima::write_diagnostics_csv(&eval.panel, cfg.arima, &diag_path)?;
            write_arima_predictions(&eval.panel, &arima_predictions_path(cfg))?;
            let total = eval.panel.diagnostics.len().max(1);
            println!(
                "diagnostics: {} ({} series, fallback rate {:.1}%)",
                diag_path.display(),
                eval.panel.diagnostics.len(),
                100.0 * eval.panel.fallback_count as f64 / total as f64
            );
            print_report_row(MODEL_NAMES[2], eval.train_rmse, eval.val_rmse, eval.test_rmse);
        }
        ModelKind::Lstm => {
            let grid = load_grid_checked(cfg)?;
            let raw = load_raw(cfg)?;
            let eval = lstm_fit_eval(&grid, &raw.catalog, &raw.records, cfg)?;
            let path = lstm_model_path(cfg);
            let json = serde_json::to_string(&eval.artifact)
                .map_err(|e| Error::Validation(format!("serialize LSTM artifact: {e}")))?;
            std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
            println!("model: {}", path.display());
            print_report_row(MODEL_NAMES[1], eval.train_rmse, eval.val_rmse, eval.test_rmse);
        }
    }
    Ok(())
}

fn print_report_row(name: &str, train: f64, val: f64, test: Option<f64>) {
    let test = test.map_or("-".to_string(), |t| format!("{t:.6}"));
    println!("{name}: train_rmse={train:.6} val_rmse={val:.6} test_rmse={test}");
}

/// Cold-start default of 0 for every requested pair, overwritten by
/// whatever the model knows.
fn cold_start_map(test_rows: &[TestRow]) -> HashMap<(ShopId, ItemId), f64> {
    test_rows.iter().map(|r| ((r.shop_id, r.item_id), 0.0)).collect()
}

fn cmd_predict(cfg: &RunConfig, model: ModelKind) -> Result<()> {
    ensure_out(cfg)?;
    let test_rows = load_test_rows(cfg)?;
    let mut preds = cold_start_map(&test_rows);
    match model {
        ModelKind::Gbt => {
            let gbt_model = gbt::load_model(gbt_model_path(cfg))?;
            let matrix = load_features_checked(cfg)?;
            let rows: Vec<usize> = (0..matrix.n_rows())
                .filter(|&r| matrix.date_block[r] == cfg.split.test_block)
                .collect();
            let values = gbt::predict(&gbt_model, &matrix)?;
            for r in rows {
                preds.insert(matrix.row_keys[r], values[r]);
            }
        }
        ModelKind::Arima => {
            let map = read_arima_predictions(&arima_predictions_path(cfg))?;
            for (key, (_, test)) in map {
                preds.insert(key, test);
            }
        }
        ModelKind::Lstm => {
            let path = lstm_model_path(cfg);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let artifact: LstmArtifact = serde_json::from_str(&text)
                .map_err(|e| Error::Validation(format!("parse LSTM artifact {path:?}: {e}")))?;
            let grid = load_grid_checked(cfg)?;
            let raw = load_raw(cfg)?;
            let tables = featuregen::build_tables(&grid, &raw.catalog, &raw.records, &cfg.split)?;
            let keys: Vec<_> = test_rows
                .iter()
                .map(|r| (cfg.split.test_block, r.shop_id, r.item_id))
                .collect();
            let mut set: SampleSet =
                build_samples(&grid, &raw.catalog, &tables, &keys, artifact.window);
            artifact.scaler.transform(&mut set.samples);
            let values = seqnet::forward(&artifact.model, &set.samples);
            for ((_, shop, item), v) in set.keys.iter().zip(values) {
                preds.insert((*shop, *item), v);
            }
        }
    }
    let path = cfg.output_dir.join("submission.csv");
    write_submission(&preds, &test_rows, &path)?;
    println!("submission: {} ({} rows)", path.display(), test_rows.len());
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, model: EvalKind) -> Result<()> {
    let val_rmse = match model {
        EvalKind::Baseline => {
            let grid = load_grid_checked(cfg)?;
            let mut sum = 0.0;
            let mut n = 0.0;
            for cell in grid.iter_cells() {
                if cell.date_block <= cfg.split.train_end {
                    sum += cell.item_cnt_month;
                    n += 1.0;
                }
            }
            if n == 0.0 {
                return Err(Error::EmptyPartition("no training cells".into()));
            }
            let mean = sum / n;
            score_block(&grid, cfg.split.validation_block, |_, _| mean)
                .ok_or_else(|| Error::EmptyPartition("validation block missing".into()))?
        }
        EvalKind::Gbt => {
            let gbt_model = gbt::load_model(gbt_model_path(cfg))?;
            let matrix = load_features_checked(cfg)?;
            let (_, val, _) = split_rows(&matrix, &cfg.split)?;
            rmse(&gbt::predict(&gbt_model, &val)?, &val.target)?
        }
        EvalKind::Arima => {
            let grid = load_grid_checked(cfg)?;
            arima_fit_eval(&grid, cfg.arima, &cfg.split)?.val_rmse
        }
        EvalKind::Lstm => {
            let grid = load_grid_checked(cfg)?;
            let raw = load_raw(cfg)?;
            lstm_fit_eval(&grid, &raw.catalog, &raw.records, cfg)?.val_rmse
        }
    };
    println!("validation rmse: {val_rmse:.6}");
    Ok(())
}

fn apply_search_point(base: &GbtParams, point: &BTreeMap<String, f64>) -> Result<GbtParams> {
    let mut p = *base;
    for (name, &v) in point {
        match name.as_str() {
            "eta" => p.eta = v,
            "max_depth" => p.max_depth = v as usize,
            "min_child_weight" => p.min_child_weight = v,
            "lambda" => p.lambda = v,
            "alpha" => p.alpha = v,
            "gamma" => p.gamma = v,
            "n_rounds" => p.n_rounds = v as usize,
            other => return Err(Error::Config(format!("unknown tunable parameter `{other}`"))),
        }
    }
    Ok(p)
}

fn cmd_tune(cfg: &RunConfig) -> Result<()> {
    ensure_out(cfg)?;
    let matrix = load_features_checked(cfg)?;
    let (train, val, _) = split_rows(&matrix, &cfg.split)?;
    let outcome = evalharness::random_search(&cfg.search, |point| {
        let params = apply_search_point(&cfg.gbt, point)?;
        let (model, log) = gbt::fit(&train, &params, None)?;
        let train_rmse = log.train_rmse.last().copied().unwrap_or(f64::NAN);
        let val_rmse = rmse(&gbt::predict(&model, &val)?, &val.target)?;
        Ok((train_rmse, val_rmse))
    })?;
    let log_path = cfg.output_dir.join("trials.csv");
    write_trial_log(&outcome, &log_path)?;
    let best = outcome.best_trial();
    let params: Vec<String> = best.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
    println!("trial log: {} ({} trials)", log_path.display(), outcome.trials.len());
    println!(
        "best trial {}: val_rmse={:.6} {}",
        best.index,
        best.val_rmse,
        params.join(" ")
    );
    Ok(())
}

fn cmd_compare(cfg: &RunConfig) -> Result<()> {
    ensure_out(cfg)?;
    let grid = load_grid_checked(cfg)?;
    let matrix = load_features_checked(cfg)?;
    let raw = load_raw(cfg)?;

    let gbt_report = match gbt_fit_eval(&matrix, &cfg.split, &cfg.gbt) {
        Ok((_, train, val, test)) => RunReport::new(MODEL_NAMES[0], train, val, test),
        Err(e) => RunReport::failed(MODEL_NAMES[0], e.to_string()),
    };
    let lstm_report = match lstm_fit_eval(&grid, &raw.catalog, &raw.records, cfg) {
        Ok(eval) => RunReport::new(MODEL_NAMES[1], eval.train_rmse, eval.val_rmse, eval.test_rmse),
        Err(e) => RunReport::failed(MODEL_NAMES[1], e.to_string()),
    };
    let arima_report = match arima_fit_eval(&grid, cfg.arima, &cfg.split) {
        Ok(eval) => RunReport::new(MODEL_NAMES[2], eval.train_rmse, eval.val_rmse, eval.test_rmse),
        Err(e) => RunReport::failed(MODEL_NAMES[2], e.to_string()),
    };
    let reports = [gbt_report, lstm_report, arima_report];
    print!("{}", render_comparison(&reports));
    let path = cfg.output_dir.join("report.csv");
    write_comparison_csv(&reports, &path)?;
    println!("report: {}", path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn component_seeds_differ_and_are_stable() {
        let a = component_seed(7, "gbt");
        let b = component_seed(7, "seqnet");
        assert_ne!(a, b);
        assert_eq!(a, component_seed(7, "gbt"));
        assert_ne!(a, component_seed(8, "gbt"));
    }

    #[test]
    fn default_config_roundtrips() {
        let cfg = RunConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        // Seeds are rewritten by build_config, not by serde.
        assert_eq!(cfg, back);
    }

    #[test]
    fn set_override_reaches_nested_field() {
        let cfg = build_config(
            None,
            &["split.train_end=10".into(), "split.validation_block=11".into(),
              "split.test_block=12".into(), "gbt.eta=0.05".into()],
            None,
            None,
        )
        .unwrap();
        assert_eq!(cfg.split.train_end, 10);
        assert_eq!(cfg.gbt.eta, 0.05);
    }

    #[test]
    fn bad_override_is_config_error() {
        let err = build_config(None, &["no_equals_sign".into()], None, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = build_config(None, &["nonexistent_key=1".into()], None, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn flag_seed_wins_and_propagates() {
        let cfg = build_config(None, &["seed=3".into()], Some(9), None).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.gbt.seed, component_seed(9, "gbt"));
        assert_eq!(cfg.search.seed, component_seed(9, "search"));
    }

    #[test]
    fn config_file_overlay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"seed": 42, "gbt": {"max_depth": 3}}"#).unwrap();
        let cfg = build_config(Some(&path), &[], None, None).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.gbt.max_depth, 3);
        // untouched fields keep their defaults
        assert_eq!(cfg.gbt.min_child_weight, 26.0);
    }

    #[test]
    fn env_override_parsing() {
        let vars = vec![
            ("PF_SEED".to_string(), "5".to_string()),
            ("PF_SPLIT__TRAIN_END".to_string(), "20".to_string()),
            ("HOME".to_string(), "/root".to_string()),
            ("PF_DATA_DIR".to_string(), "elsewhere".to_string()),
        ];
        let out = env_overrides(vars.into_iter());
        let keys: Vec<&str> = out.iter().map(|(k, _)| k.as_str()).collect();
        assert_eq!(keys, vec!["data_dir", "seed", "split.train_end"]);
        assert_eq!(out[1].1, serde_json::json!(5));
        assert_eq!(out[0].1, Value::String("elsewhere".into()));
    }

    #[test]
    fn merge_is_recursive() {
        let mut base = serde_json::json!({"a": {"b": 1, "c": 2}, "d": 3});
        merge(&mut base, serde_json::json!({"a": {"c": 9}}));
        assert_eq!(base, serde_json::json!({"a": {"b": 1, "c": 9}, "d": 3}));
    }

    #[test]
    fn sidecar_detects_artifact_and_input_changes() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("input.csv");
        let artifact = dir.path().join("artifact.csv");
        std::fs::write(&input, "in-v1").unwrap();
        std::fs::write(&artifact, "art-v1").unwrap();
        write_sidecar(&artifact, &[&input]).unwrap();
        verify_artifact(&artifact, "pf ingest").unwrap();

        std::fs::write(&input, "in-v2").unwrap();
        let err = verify_artifact(&artifact, "pf ingest").unwrap_err();
        assert!(matches!(err, Error::StaleCache(_)), "{err}");
        assert!(err.to_string().contains("pf ingest"));

        std::fs::write(&input, "in-v1").unwrap();
        verify_artifact(&artifact, "pf ingest").unwrap();
        std::fs::write(&artifact, "art-v2").unwrap();
        assert!(verify_artifact(&artifact, "pf ingest").is_err());
    }

    #[test]
    fn missing_artifact_names_rebuild_command() {
        let dir = tempfile::tempdir().unwrap();
        let err = verify_artifact(&dir.path().join("nope.csv"), "pf features").unwrap_err();
        assert!(err.to_string().contains("pf features"));
    }

    #[test]
    fn cache_lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = CacheLock::acquire(dir.path()).unwrap();
        assert!(CacheLock::acquire(dir.path()).is_err());
        drop(lock);
        CacheLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn exit_codes_by_error_class() {
        assert_eq!(exit_code(&Error::Config("x".into())), 1);
        assert_eq!(exit_code(&Error::Validation("x".into())), 2);
        assert_eq!(exit_code(&Error::StaleCache("x".into())), 2);
        assert_eq!(exit_code(&Error::Numeric("x".into())), 3);
    }

    #[test]
    fn search_point_maps_into_gbt_params() {
        let mut point = BTreeMap::new();
        point.insert("eta".to_string(), 0.2);
        point.insert("max_depth".to_string(), 4.0);
        let p = apply_search_point(&GbtParams::default(), &point).unwrap();
        assert_eq!(p.eta, 0.2);
        assert_eq!(p.max_depth, 4);
        point.insert("bogus".to_string(), 1.0);
        assert!(apply_search_point(&GbtParams::default(), &point).is_err());
    }
}
