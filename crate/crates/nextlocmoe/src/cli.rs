//! Command-line interface.
//!
//! Configuration precedence, lowest to highest: built-in defaults, the
//! `--profile` preset, the `--config` TOML file (sections `[model]`,
//! `[train]`, `[data]`, merged key by key), then explicit flags. Every
//! file-producing command writes a `manifest.json` listing its outputs;
//! reports contain no wall-clock fields, so reruns with the same inputs
//! are byte-identical.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assets::{NUM_FUNCTION_CATEGORIES, NUM_USER_GROUPS};
use crate::backbone::{
    load_checkpoint, save_checkpoint, ForwardOpts, ModelConfig, ModelState, PriorOverrides,
};
use crate::data::io::{load_dataset, save_dataset};
use crate::data::synthetic::{generate_synthetic_city, SyntheticCityConfig};
use crate::data::{
    normalize_coordinates, split_windows as make_split_windows, window_trajectories, Dataset,
    Sample, SplitWindows, DEFAULT_DURATION_CAP,
};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, expert_activation_report, most_frequent_baseline, zero_shot_transfer,
};
use crate::kdtree::KdTree;
use crate::text::load_prior_matrix;
use crate::train::{train, TrainConfig, TrainSink};

#[derive(Parser)]
#[command(
    name = "nextlocmoe",
    version,
    about = "Next-location prediction with dual-level mixture-of-experts routing"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Master seed (also fixes the user split for train/eval commands).
    #[arg(long, global = true, env = "NEXTLOCMOE_SEED")]
    seed: Option<u64>,
    /// Hyperparameter preset: `full` or `desk`.
    #[arg(long, global = true, env = "NEXTLOCMOE_PROFILE", default_value = "desk")]
    profile: String,
    /// TOML file overriding the preset.
    #[arg(long, global = true, env = "NEXTLOCMOE_CONFIG")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short, global = true, env = "NEXTLOCMOE_OUT")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic persona-driven city dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        locations: Option<usize>,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        days: Option<usize>,
        #[arg(long)]
        grid: Option<usize>,
    },
    /// Train on a dataset directory and keep the best-validation checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (as written by gen-data).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        entropy_weight: Option<f64>,
        /// Window stride in records (default: the current-window length).
        #[arg(long)]
        stride: Option<usize>,
        /// Disable the location-semantics expert enhancement.
        #[arg(long)]
        ablate_loc_moe: bool,
        /// Replace the personalized MoE with its frozen base FFN.
        #[arg(long)]
        ablate_persona_moe: bool,
        /// Text-prior matrix for the function experts.
        #[arg(long)]
        function_priors: Option<PathBuf>,
        /// Text-prior matrix for the user-group experts.
        #[arg(long)]
        group_priors: Option<PathBuf>,
    },
    /// Hit@k retrieval evaluation of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        ks: Vec<usize>,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test", "all"])]
        split: String,
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Predict the next location for one user window.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        user: String,
        /// Which of the user's windows to use.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Number of candidate locations to return.
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Zero-shot evaluation on an unseen city (no weight updates).
    TransferEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        ks: Vec<usize>,
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Expert-activation statistics of the personalized MoE.
    ReportRouting {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test", "all"])]
        split: String,
        #[arg(long)]
        stride: Option<usize>,
    },
}

pub fn run() -> Result<()> {
    run_from(std::env::args_os())
}

pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            print!("{e}");
            std::process::exit(0);
        }
        _ => Error::config(e.to_string().lines().next().unwrap_or("bad arguments").to_string()),
    })?;
    match cli.command {
        Command::GenData {
            common,
            locations,
            users,
            days,
            grid,
        } => cmd_gen_data(common, locations, users, days, grid),
        Command::Train {
            common,
            data,
            epochs,
            batch_size,
            lr,
            entropy_weight,
            stride,
            ablate_loc_moe,
            ablate_persona_moe,
            function_priors,
            group_priors,
        } => cmd_train(
            common,
            data,
            epochs,
            batch_size,
            lr,
            entropy_weight,
            stride,
            ablate_loc_moe,
            ablate_persona_moe,
            function_priors,
            group_priors,
        ),
        Command::Eval {
            common,
            model,
            data,
            ks,
            split,
            stride,
        } => cmd_eval(common, model, data, ks, split, stride),
        Command::Predict {
            common,
            model,
            data,
            user,
            index,
            top,
            stride,
        } => cmd_predict(common, model, data, user, index, top, stride),
        Command::TransferEval {
            common,
            model,
            data,
            ks,
            stride,
        } => cmd_transfer(common, model, data, ks, stride),
        Command::ReportRouting {
            common,
            model,
            data,
            split,
            stride,
        } => cmd_report_routing(common, model, data, split, stride),
    }
}

// ---- config plumbing ----------------------------------------------------

fn load_config_table(path: Option<&Path>) -> Result<Option<toml::Table>> {
    let Some(path) = path else { return Ok(None) };
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let table: toml::Table = toml::from_str(&text)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    for key in table.keys() {
        if !["model", "train", "data"].contains(&key.as_str()) {
            return Err(Error::config(format!(
                "{}: unknown section `[{key}]` (expected model, train, or data)",
                path.display()
            )));
        }
    }
    Ok(Some(table))
}

fn merge_value(base: &mut toml::Value, overlay: toml::Value, path: &str) -> Result<()> {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                let child = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge_value(slot, v, &child)?,
                    None => {
                        return Err(Error::config(format!("unknown config key `{child}`")));
                    }
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

fn merged_section<T: Serialize + DeserializeOwned>(
    base: T,
    file: Option<&toml::Table>,
    section: &str,
) -> Result<T> {
    let Some(overlay) = file.and_then(|t| t.get(section)) else {
        return Ok(base);
    };
    let mut value = toml::Value::try_from(base)
        .map_err(|e| Error::config(format!("serializing [{section}] defaults: {e}")))?;
    merge_value(&mut value, overlay.clone(), section)?;
    value
        .try_into()
        .map_err(|e| Error::config(format!("config section [{section}]: {e}")))
}

fn resolve_model_config(common: &Common, file: Option<&toml::Table>) -> Result<ModelConfig> {
    let base = ModelConfig::by_profile(&common.profile)?;
    let cfg: ModelConfig = merged_section(base, file, "model")?;
    cfg.validate()?;
    Ok(cfg)
}

fn config_checksum(path: Option<&Path>) -> Result<Option<String>> {
    let Some(path) = path else { return Ok(None) };
    let bytes = fs::read(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    Ok(Some(hex_digest(&bytes)))
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

// ---- output plumbing ----------------------------------------------------

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

#[derive(Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub profile: String,
    pub config_checksum: Option<String>,
    pub model_checksum: Option<String>,
    pub dataset: Option<String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    fn new(command: &str, common: &Common, seed: u64) -> Result<Self> {
        Ok(RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            profile: common.profile.clone(),
            config_checksum: config_checksum(common.config.as_deref())?,
            model_checksum: None,
            dataset: None,
            outputs: Vec::new(),
        })
    }

    fn write(mut self, dir: &Path) -> Result<()> {
        self.outputs.push("manifest.json".to_string());
        write_json(&dir.join("manifest.json"), &self)
    }
}

fn require_out(common: &Common) -> Result<PathBuf> {
    let out = common
        .out
        .clone()
        .ok_or_else(|| Error::config("this command requires --out"))?;
    fs::create_dir_all(&out)?;
    Ok(out)
}

// ---- shared data loading -------------------------------------------------

fn load_normalized(dir: &Path) -> Result<Dataset> {
    let ds = load_dataset(dir)?;
    if ds.is_normalized() {
        Ok(ds)
    } else {
        normalize_coordinates(&ds, DEFAULT_DURATION_CAP)
    }
}

fn split_windows(ds: &Dataset, cfg: &ModelConfig, stride: usize, seed: u64) -> Result<SplitWindows> {
    make_split_windows(ds, cfg.history_len, cfg.current_len, stride, seed)
}

fn pick_split(windows: SplitWindows, split: &str) -> Vec<Sample> {
    match split {
        "train" => windows.train,
        "val" => windows.val,
        "test" => windows.test,
        _ => {
            let mut all = windows.train;
            all.extend(windows.val);
            all.extend(windows.test);
            all
        }
    }
}

// ---- commands -------------------------------------------------------------

fn cmd_gen_data(
    common: Common,
    locations: Option<usize>,
    users: Option<usize>,
    days: Option<usize>,
    grid: Option<usize>,
) -> Result<()> {
    let out = require_out(&common)?;
    let file = load_config_table(common.config.as_deref())?;
    let mut cfg: SyntheticCityConfig =
        merged_section(SyntheticCityConfig::default(), file.as_ref(), "data")?;
    if let Some(v) = locations {
        cfg.n_locations = v;
    }
    if let Some(v) = users {
        cfg.n_users = v;
    }
    if let Some(v) = days {
        cfg.days = v;
    }
    if let Some(v) = grid {
        cfg.grid = v;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let ds = generate_synthetic_city(&cfg)?;
    save_dataset(&ds, &out)?;
    let mut manifest = RunManifest::new("gen-data", &common, cfg.seed)?;
    manifest.dataset = Some(ds.meta.name.clone());
    manifest.outputs = vec![
        "records.csv".into(),
        "records.jsonl".into(),
        "locations.csv".into(),
        "meta.json".into(),
    ];
    manifest.write(&out)
}

#[derive(Serialize)]
struct TrainArtifact {
    model_config: ModelConfig,
    train_config: TrainConfig,
    stride: usize,
    n_train_windows: usize,
    n_val_windows: usize,
    n_test_windows: usize,
    report: crate::train::TrainReport,
    test_eval: crate::eval::EvalReport,
    baseline_hit_at: std::collections::BTreeMap<usize, f64>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    common: Common,
    data: PathBuf,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    entropy_weight: Option<f64>,
    stride: Option<usize>,
    ablate_loc_moe: bool,
    ablate_persona_moe: bool,
    function_priors: Option<PathBuf>,
    group_priors: Option<PathBuf>,
) -> Result<()> {
    let out = require_out(&common)?;
    let file = load_config_table(common.config.as_deref())?;
    let model_cfg = resolve_model_config(&common, file.as_ref())?;
    let mut train_cfg: TrainConfig =
        merged_section(TrainConfig::default(), file.as_ref(), "train")?;
    let seed = common.seed.unwrap_or(0);
    train_cfg.seed = seed;
    if let Some(v) = epochs {
        train_cfg.epochs = v;
    }
    if let Some(v) = batch_size {
        train_cfg.batch_size = v;
    }
    if let Some(v) = lr {
        train_cfg.lr = v;
    }
    if let Some(v) = entropy_weight {
        train_cfg.entropy_weight = v;
    }
    train_cfg.ablate_function_moe = ablate_loc_moe;
    train_cfg.ablate_persona_moe = ablate_persona_moe;
    train_cfg.validate()?;

    let ds = load_normalized(&data)?;
    let stride = stride.unwrap_or(model_cfg.current_len).max(1);
    let windows = split_windows(&ds, &model_cfg, stride, seed)?;
    if windows.train.is_empty() {
        return Err(Error::data(format!(
            "no training windows: dataset `{}` is too short for history {} + current {}",
            ds.meta.name, model_cfg.history_len, model_cfg.current_len
        )));
    }

    let priors = PriorOverrides {
        function: match &function_priors {
            Some(p) => Some(load_prior_matrix(p, NUM_FUNCTION_CATEGORIES)?.1),
            None => None,
        },
        group: match &group_priors {
            Some(p) => Some(load_prior_matrix(p, NUM_USER_GROUPS)?.1),
            None => None,
        },
    };
    let mut state = ModelState::with_priors(model_cfg.clone(), seed, priors)?;
    state.norm = ds.meta.norm;

    let ckpt_path = out.join("model.ckpt");
    let log_path = out.join("train_log.jsonl");
    let mut log = fs::File::create(&log_path)?;
    let report = train(
        &mut state,
        &windows.train,
        &windows.val,
        &train_cfg,
        TrainSink {
            log: Some(&mut log),
            checkpoint_path: Some(&ckpt_path),
        },
    )?;
    log.sync_all()?;
    if !ckpt_path.exists() {
        save_checkpoint(&state, &ckpt_path)?;
    }

    // Score the best checkpoint on held-out users.
    let best = load_checkpoint(&ckpt_path)?;
    let ks = [1usize, 5, 10];
    let eval_windows = if windows.test.is_empty() {
        &windows.val
    } else {
        &windows.test
    };
    let eval_windows = if eval_windows.is_empty() {
        &windows.train
    } else {
        eval_windows
    };
    let opts = ForwardOpts {
        ablate_function_moe: ablate_loc_moe,
        ablate_persona_moe: ablate_persona_moe,
        ..Default::default()
    };
    let test_eval = evaluate(&best, eval_windows, &ds.locations, &ks, &opts)?;
    let baseline = most_frequent_baseline(&windows.train, eval_windows, &ks)?;

    let artifact = TrainArtifact {
        model_config: model_cfg,
        train_config: train_cfg,
        stride,
        n_train_windows: windows.train.len(),
        n_val_windows: windows.val.len(),
        n_test_windows: windows.test.len(),
        report,
        test_eval,
        baseline_hit_at: baseline,
    };
    write_json(&out.join("train_report.json"), &artifact)?;

    let mut manifest = RunManifest::new("train", &common, seed)?;
    manifest.model_checksum = Some(best.store.checksum());
    manifest.dataset = Some(ds.meta.name.clone());
    manifest.outputs = vec![
        "model.ckpt".into(),
        "train_log.jsonl".into(),
        "train_report.json".into(),
    ];
    manifest.write(&out)
}

fn cmd_eval(
    common: Common,
    model: PathBuf,
    data: PathBuf,
    ks: Vec<usize>,
    split: String,
    stride: Option<usize>,
) -> Result<()> {
    let out = require_out(&common)?;
    let state = load_checkpoint(&model)?;
    let ds = load_normalized(&data)?;
    let seed = common.seed.unwrap_or(0);
    let stride = stride.unwrap_or(state.config.current_len).max(1);
    let windows = split_windows(&ds, &state.config, stride, seed)?;
    let samples = pick_split(windows, &split);
    if samples.is_empty() {
        return Err(Error::data(format!("split `{split}` has no windows")));
    }
    let report = evaluate(&state, &samples, &ds.locations, &ks, &ForwardOpts::default())?;
    write_json(&out.join("eval_report.json"), &report)?;
    let mut manifest = RunManifest::new("eval", &common, seed)?;
    manifest.model_checksum = Some(state.store.checksum());
    manifest.dataset = Some(ds.meta.name.clone());
    manifest.outputs = vec!["eval_report.json".into()];
    manifest.write(&out)
}

#[derive(Serialize)]
struct Candidate {
    loc_id: u64,
    x: f64,
    y: f64,
    d2: f64,
    category: Option<String>,
}

#[derive(Serialize)]
struct Prediction {
    user: String,
    window_index: usize,
    n_windows: usize,
    pred: [f64; 2],
    pred_denormalized: Option<[f64; 2]>,
    target_loc: u64,
    candidates: Vec<Candidate>,
}

fn cmd_predict(
    common: Common,
    model: PathBuf,
    data: PathBuf,
    user: String,
    index: usize,
    top: usize,
    stride: Option<usize>,
) -> Result<()> {
    let state = load_checkpoint(&model)?;
    let ds = load_normalized(&data)?;
    let stride = stride.unwrap_or(state.config.current_len).max(1);
    let all = window_trajectories(&ds, state.config.history_len, state.config.current_len, stride)?;
    let windows: Vec<&Sample> = all.iter().filter(|s| s.user == user).collect();
    if windows.is_empty() {
        return Err(Error::data(format!(
            "user `{user}` has no complete windows in dataset `{}`",
            ds.meta.name
        )));
    }
    let sample = windows.get(index).ok_or_else(|| {
        Error::data(format!(
            "window index {index} out of range: user `{user}` has {} windows",
            windows.len()
        ))
    })?;
    let (pred, _) = crate::backbone::predict(&state, sample)?;
    let tree = KdTree::from_locations(&ds.locations);
    let by_id: std::collections::BTreeMap<u64, &crate::data::Location> =
        ds.locations.iter().map(|l| (l.id, l)).collect();
    let candidates: Vec<Candidate> = tree
        .nearest(pred[0], pred[1], top)
        .into_iter()
        .map(|n| {
            let loc = by_id[&n.id];
            Candidate {
                loc_id: n.id,
                x: loc.x,
                y: loc.y,
                d2: n.d2,
                category: loc.category.clone(),
            }
        })
        .collect();
    let prediction = Prediction {
        user,
        window_index: index,
        n_windows: windows.len(),
        pred,
        pred_denormalized: ds
            .meta
            .norm
            .map(|n| {
                let (x, y) = n.denormalize_xy(pred[0], pred[1]);
                [x, y]
            }),
        target_loc: sample.target.loc,
        candidates,
    };
    let text = serde_json::to_string_pretty(&prediction)?;
    if let Some(outdir) = &common.out {
        fs::create_dir_all(outdir)?;
        write_json(&outdir.join("prediction.json"), &prediction)?;
        let seed = common.seed.unwrap_or(0);
        let mut manifest = RunManifest::new("predict", &common, seed)?;
        manifest.model_checksum = Some(state.store.checksum());
        manifest.dataset = Some(ds.meta.name.clone());
        manifest.outputs = vec!["prediction.json".into()];
        manifest.write(outdir)?;
    } else if let Err(e) = writeln!(std::io::stdout(), "{text}") {
        // A closed pipe (e.g. piping into `head`) is not an error.
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            return Err(e.into());
        }
    }
    Ok(())
}

fn cmd_transfer(
    common: Common,
    model: PathBuf,
    data: PathBuf,
    ks: Vec<usize>,
    stride: Option<usize>,
) -> Result<()> {
    let out = require_out(&common)?;
    let state = load_checkpoint(&model)?;
    let ds = load_normalized(&data)?;
    let stride = stride.unwrap_or(state.config.current_len).max(1);
    let report = zero_shot_transfer(&state, &ds, stride, &ks)?;
    write_json(&out.join("transfer_report.json"), &report)?;
    let seed = common.seed.unwrap_or(0);
    let mut manifest = RunManifest::new("transfer-eval", &common, seed)?;
    manifest.model_checksum = Some(report.checksum.clone());
    manifest.dataset = Some(ds.meta.name.clone());
    manifest.outputs = vec!["transfer_report.json".into()];
    manifest.write(&out)
}

fn cmd_report_routing(
    common: Common,
    model: PathBuf,
    data: PathBuf,
    split: String,
    stride: Option<usize>,
) -> Result<()> {
    let out = require_out(&common)?;
    let state = load_checkpoint(&model)?;
    let ds = load_normalized(&data)?;
    let seed = common.seed.unwrap_or(0);
    let stride = stride.unwrap_or(state.config.current_len).max(1);
    let windows = split_windows(&ds, &state.config, stride, seed)?;
    let samples = pick_split(windows, &split);
    if samples.is_empty() {
        return Err(Error::data(format!("split `{split}` has no windows")));
    }
    let report = expert_activation_report(&state, &samples)?;
    write_json(&out.join("activation_report.json"), &report)?;
    let mut manifest = RunManifest::new("report-routing", &common, seed)?;
    manifest.model_checksum = Some(state.store.checksum());
    manifest.dataset = Some(ds.meta.name.clone());
    manifest.outputs = vec!["activation_report.json".into()];
    manifest.write(&out)
}
