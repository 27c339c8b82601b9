mod heatmap;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;
use swt_core::checkpoint;
use swt_core::data::{export_dataset, gen_dataset, import_dataset, DataConfig, Dataset, Split};
use swt_core::eval::{eval_threads, evaluate};
use swt_core::train::{train, write_history_csv};
use swt_core::{Mode, Model, ModelConfig, TrainConfig};

use crate::manifest::RunManifest;

const CHECKPOINT_FILE: &str = "model.swtf";
const HISTORY_FILE: &str = "history.csv";
const REPORT_FILE: &str = "report.txt";

#[derive(Parser)]
#[command(name = "swtformer", version, about = "Weakly supervised CAM training on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        image_size: usize,
    },
    /// Train a model on the training split
    Train {
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// JSON file with optional "model" and "train" sections
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Train V2 without the contrastive term
        #[arg(long)]
        no_ccl: bool,
    },
    /// Evaluate a checkpoint on one split
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export per-class activation maps and a colour overlay for one sample
    Heatmap {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image_id: u64,
        #[arg(long, value_enum, default_value_t = Which::Cam)]
        which: Which,
        #[arg(long)]
        out: PathBuf,
        /// Dataset holding the sample; without it the sample is regenerated from its id
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    V1,
    V2,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::V1 => Mode::V1,
            ModeArg::V2 => Mode::V2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Which {
    Cam,
    Rcam,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    model: Option<serde_json::Value>,
    train: Option<TrainConfig>,
}

#[derive(Serialize)]
struct TrainSettings<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

/// Maps a failure to the documented exit codes.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<swt_core::Error>() {
            return match e {
                swt_core::Error::NonFinite { .. } | swt_core::Error::NonFiniteLoss { .. } => 3,
                swt_core::Error::Incompatible(_) => 4,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<()> {
    let start = Instant::now();
    let manifest = match command {
        Command::GenData { n, seed, out, image_size } => gen_data(n, seed, &out, image_size)?,
        Command::Train {
            mode,
            data,
            steps,
            seed,
            out,
            config,
            batch_size,
            lr,
            no_ccl,
        } => {
            let overrides = TrainOverrides {
                mode: mode.into(),
                steps,
                seed,
                batch_size,
                lr,
                no_ccl,
            };
            cmd_train(&data, &out, config.as_deref(), overrides)?
        }
        Command::Eval { ckpt, data, split, out } => cmd_eval(&ckpt, &data, &split, &out)?,
        Command::Heatmap {
            ckpt,
            image_id,
            which,
            out,
            data,
        } => heatmap::cmd_heatmap(&ckpt, image_id, which, &out, data.as_deref())?,
    };
    manifest.finish(start.elapsed())
}

fn gen_data(n: usize, seed: u64, out: &Path, image_size: usize) -> Result<RunManifest> {
    if image_size == 0 {
        bail!("--image-size must be positive");
    }
    let cfg = DataConfig::for_image(image_size);
    let data = gen_dataset(n, seed, &cfg)?;
    let manifest = export_dataset(&data, out)?;
    eprintln!("wrote {n} samples to {}", out.display());
    Ok(RunManifest::new(
        "gen-data",
        &json!({ "n": n, "seed": seed, "data": cfg }),
        vec![],
        vec![manifest],
        out,
    ))
}

struct TrainOverrides {
    mode: Mode,
    steps: Option<usize>,
    seed: Option<u64>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    no_ccl: bool,
}

fn read_config(path: Option<&Path>) -> Result<ConfigFile> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_data(dir: &Path) -> Result<Dataset> {
    import_dataset(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn data_image_size(data: &Dataset) -> Option<usize> {
    data.samples.first().map(|s| s.image.shape()[1])
}

fn cmd_train(data_dir: &Path, out: &Path, config: Option<&Path>, o: TrainOverrides) -> Result<RunManifest> {
    let file = read_config(config)?;
    let data = load_data(data_dir)?;
    let samples = data.split(Split::Train);
    let size = data_image_size(&data);

    // the data decides the image size unless the file pins it
    let mut model_cfg: ModelConfig = match &file.model {
        Some(v) => serde_json::from_value(v.clone()).context("model section of the config file")?,
        None => ModelConfig::default(),
    };
    let pinned = file.model.as_ref().and_then(|v| v.get("image_size")).is_some();
    if let (false, Some(s)) = (pinned, size) {
        model_cfg.image_size = s;
    }
    let mut train_cfg = file.train.unwrap_or_default();
    train_cfg.mode = o.mode;
    if let Some(s) = o.steps {
        train_cfg.steps = s;
    }
    if let Some(s) = o.seed {
        train_cfg.seed = s;
        model_cfg.seed = s;
    }
    if let Some(b) = o.batch_size {
        train_cfg.batch_size = b;
    }
    if let Some(lr) = o.lr {
        train_cfg.learning_rate = lr;
    }
    if o.no_ccl {
        train_cfg.use_ccl = false;
    }
    if train_cfg.steps > 0 && samples.is_empty() {
        bail!("{} has no training samples", data_dir.display());
    }

    let (model, mut store) = Model::new::<f32>(&model_cfg, train_cfg.mode)?;
    let every = (train_cfg.steps / 20).max(1);
    let history = train(&model, &mut store, &train_cfg, &samples, |r| {
        if r.step % every == 0 || r.step == train_cfg.steps {
            eprintln!(
                "step {:>5}  cls {:.4}  gsc {:.4}  ccl {:.4}  total {:.4}",
                r.step, r.losses.cls, r.losses.gsc, r.losses.ccl, r.losses.total
            );
        }
    })?;

    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let ckpt = out.join(CHECKPOINT_FILE);
    checkpoint::save(&ckpt, &model, &store)?;
    let hist = out.join(HISTORY_FILE);
    write_history_csv(&hist, &history)?;
    let settings = TrainSettings {
        model: &model_cfg,
        train: &train_cfg,
    };
    Ok(RunManifest::new(
        "train",
        &settings,
        vec![data_dir.to_path_buf()],
        vec![checkpoint::sidecar_path(&ckpt), ckpt, hist],
        out,
    ))
}

/// Refuses data whose image size differs from the checkpoint's.
fn check_image_size(model: &Model, image_size: Option<usize>) -> Result<()> {
    match image_size {
        Some(s) if s != model.config.image_size => Err(swt_core::Error::Incompatible(format!(
            "checkpoint expects {0}x{0} images, data has {s}x{s}",
            model.config.image_size
        ))
        .into()),
        _ => Ok(()),
    }
}

fn cmd_eval(ckpt: &Path, data_dir: &Path, split: &str, out: &Path) -> Result<RunManifest> {
    let split: Split = split.parse()?;
    let data = load_data(data_dir)?;
    let (model, store) = checkpoint::load(ckpt)?.restore()?;
    check_image_size(&model, data_image_size(&data))?;
    let samples = data.split(split);
    let report = evaluate(&model, &store, &samples, eval_threads())?;
    let text = report.to_text();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(REPORT_FILE);
    std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
    print!("{text}");
    Ok(RunManifest::new(
        "eval",
        &json!({ "model": model.config, "mode": model.mode, "split": split.as_str() }),
        vec![ckpt.to_path_buf(), data_dir.to_path_buf()],
        vec![path],
        out,
    ))
}
