//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 on
//! runtime errors.

pub mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::autograd::ParamStore;
use crate::baselines::BaselineModel;
use crate::datagen::{self, MultimodalRecord, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::fusion::model::{IMG_PREFIX, TXT_PREFIX};
use crate::fusion::{count_trainable_params, FusionConfig, PmfModel, TowerShape};
use crate::profiling::{profile_sweep, ProfileSetup};
use crate::rng::stream;
use crate::search::{search, Candidate};
use crate::training::{
    evaluate, load_checkpoint, pretrain_unimodal, save_checkpoint, train_run, Classifier,
    Metrics, TrainConfig, TrainReport,
};

pub use config::{ModelKind, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "pmf", version, about = "Prompt-based fusion of frozen unimodal transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the root seed of the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory receiving every artifact.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train and validation datasets.
    GenData(CommonArgs),
    /// Pretrain both towers on their own bit and save them frozen.
    Pretrain(CommonArgs),
    /// Train PMF or a baseline.
    Train(CommonArgs),
    /// Evaluate a trained checkpoint on the validation data.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Tape statistics over a sweep of Lf or M.
    Profile(CommonArgs),
    /// Budgeted search over (Lf, M).
    Search(CommonArgs),
    /// Closed-form trainable-parameter count.
    CountParams(CountArgs),
}

#[derive(Debug, Args)]
pub struct CountArgs {
    /// Read the towers and fusion settings from a run configuration.
    #[arg(long, conflicts_with_all = ["layers", "d"])]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    /// Text tower depth, defaults to `--layers`.
    #[arg(long)]
    pub layers_txt: Option<usize>,
    /// Text tower width, defaults to `--d`.
    #[arg(long)]
    pub d_txt: Option<usize>,
    /// Fusion start layer, defaults to two layers below the top.
    #[arg(long)]
    pub lf: Option<usize>,
    #[arg(long, default_value_t = 4)]
    pub m: usize,
    #[arg(long)]
    pub bottleneck: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::CountParams(args) => count_params(args),
        Command::GenData(c) => {
            let (cfg, out) = setup(&c)?;
            gen_data(&cfg, &out)
        }
        Command::Pretrain(c) => {
            let (cfg, out) = setup(&c)?;
            pretrain(&cfg, &out)
        }
        Command::Train(c) => {
            let (cfg, out) = setup(&c)?;
            cfg.train_section()?;
            train(&cfg, &out).map(|_| ())
        }
        Command::Eval { common, checkpoint } => {
            let (cfg, out) = setup(&common)?;
            eval(&cfg, &checkpoint, &out)
        }
        Command::Profile(c) => {
            let (cfg, out) = setup(&c)?;
            profile(&cfg, &out)
        }
        Command::Search(c) => {
            let (cfg, out) = setup(&c)?;
            run_search(&cfg, &out)
        }
    }
}

/// Loads and validates the config, creates `--out` and echoes the effective
/// config into it.
fn setup(args: &CommonArgs) -> Result<(RunConfig, PathBuf)> {
    let cfg = RunConfig::load(&args.config)?.materialize(args.seed)?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(
        args.out.join("config.effective.json"),
        serde_json::to_string_pretty(&cfg)? + "\n",
    )?;
    Ok((cfg, args.out.clone()))
}

fn count_params(args: CountArgs) -> Result<()> {
    let (img, txt, fusion) = match &args.config {
        Some(path) => {
            let cfg = RunConfig::load(path)?.materialize(None)?;
            let shape = |e: &crate::encoder::EncoderConfig| TowerShape {
                layers: e.layers,
                d: e.d,
            };
            (shape(&cfg.model.img), shape(&cfg.model.txt), cfg.fusion().clone())
        }
        None => {
            let (Some(layers), Some(d)) = (args.layers, args.d) else {
                return Err(Error::Config(
                    "count-params needs --config or both --layers and --d".into(),
                ));
            };
            let img = TowerShape { layers, d };
            let txt = TowerShape {
                layers: args.layers_txt.unwrap_or(layers),
                d: args.d_txt.unwrap_or(d),
            };
            let lf = args.lf.unwrap_or(layers.saturating_sub(2));
            if lf > img.layers || img.layers - lf > txt.layers {
                return Err(Error::Config(format!("--lf {lf} does not fit the towers")));
            }
            if args.bottleneck == Some(0) || args.classes == 0 {
                return Err(Error::Config("--bottleneck and --classes must be >= 1".into()));
            }
            let fusion = FusionConfig {
                lf_img: lf,
                lf_txt: txt.layers - (img.layers - lf),
                m_qp: args.m,
                m_qcp: args.m,
                m_fcp: args.m,
                bottleneck: args.bottleneck,
                mapping: Default::default(),
                n_classes: args.classes,
                loss: Default::default(),
            };
            (img, txt, fusion)
        }
    };
    let b = count_trainable_params(img, txt, &fusion);
    let report = serde_json::to_string_pretty(&b)?;
    println!("{report}");
    if let Some(out) = args.out {
        std::fs::create_dir_all(&out)?;
        std::fs::write(out.join("params.json"), report + "\n")?;
    }
    Ok(())
}

fn datasets(cfg: &RunConfig) -> Result<(Vec<MultimodalRecord>, Vec<MultimodalRecord>)> {
    let d = &cfg.data;
    let train = match &d.train_path {
        Some(p) => datagen::read_dataset(p)?,
        None => datagen::generate_split(&d.task, d.n_train, cfg.seed, stream::DATA_TRAIN)?,
    };
    let val = match &d.val_path {
        Some(p) => datagen::read_dataset(p)?,
        None => datagen::generate_split(&d.task, d.n_val, cfg.seed, stream::DATA_VAL)?,
    };
    Ok((train, val))
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let d = &cfg.data;
    let train = datagen::generate_split(&d.task, d.n_train, cfg.seed, stream::DATA_TRAIN)?;
    let val = datagen::generate_split(&d.task, d.n_val, cfg.seed, stream::DATA_VAL)?;
    datagen::write_dataset(&train, &out.join("train.jsonl"))?;
    datagen::write_dataset(&val, &out.join("val.jsonl"))?;
    log::info!(
        "wrote {} train and {} val records; analytic decoder accuracy {:.4}",
        train.len(),
        val.len(),
        datagen::decoder_accuracy(&d.task, &val)
    );
    Ok(())
}

fn pretrain(cfg: &RunConfig, out: &Path) -> Result<()> {
    let p = cfg
        .pretrain
        .as_ref()
        .ok_or_else(|| Error::Config("config has no `pretrain` section".into()))?;
    let spec = TaskSpec {
        kind: TaskKind::Multilabel2,
        ..cfg.data.task.clone()
    };
    let train = datagen::generate_split(&spec, p.n_train, cfg.seed, stream::DATA_TRAIN)?;
    let val = datagen::generate_split(&spec, p.n_val, cfg.seed, stream::DATA_VAL)?;
    let mut summary = serde_json::Map::new();
    for (bit, enc, prefix, tcfg, file) in [
        (0, &cfg.model.img, IMG_PREFIX, &p.img, "backbone_img.ckpt"),
        (1, &cfg.model.txt, TXT_PREFIX, &p.txt, "backbone_txt.ckpt"),
    ] {
        let outcome = pretrain_unimodal(
            enc,
            prefix,
            &datagen::single_bit_task(&train, bit)?,
            &datagen::single_bit_task(&val, bit)?,
            tcfg,
            cfg.model.dtype,
            p.max_attempts,
        )?;
        log::info!("{prefix} pretrained to val accuracy {:.4}", outcome.val_accuracy);
        save_checkpoint(
            &out.join(file),
            &outcome.encoder,
            &json!({"encoder": enc, "prefix": prefix, "seed": outcome.seed}),
        )?;
        summary.insert(
            prefix.trim_end_matches('.').to_string(),
            json!({
                "val_accuracy": outcome.val_accuracy,
                "seed": outcome.seed,
                "attempts": outcome.attempts,
                "checkpoint": file,
            }),
        );
    }
    std::fs::write(
        out.join("pretrain.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    Ok(())
}

/// A PMF model or a baseline, built from the config.
pub enum AnyModel {
    Pmf(PmfModel),
    Baseline(BaselineModel),
}

impl AnyModel {
    pub fn build(cfg: &RunConfig, seed: u64) -> Result<Self> {
        let m = &cfg.model;
        let mut model = match m.kind.baseline() {
            None => AnyModel::Pmf(PmfModel::new(&m.img, &m.txt, cfg.fusion(), m.dtype, seed)?),
            Some(kind) => AnyModel::Baseline(BaselineModel::new(
                kind,
                &m.img,
                &m.txt,
                cfg.fusion().n_classes,
                m.dtype,
                seed,
            )?),
        };
        if let Some(paths) = &m.backbones {
            let (img, _) = load_checkpoint(&paths.img)?;
            let (txt, _) = load_checkpoint(&paths.txt)?;
            let img = (&img, IMG_PREFIX);
            let txt = (&txt, TXT_PREFIX);
            match &mut model {
                AnyModel::Pmf(p) => p.load_backbones(img, txt)?,
                AnyModel::Baseline(b) => b.load_backbones(img, txt)?,
            }
        }
        Ok(model)
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            AnyModel::Pmf(m) => m.store(),
            AnyModel::Baseline(m) => m.store(),
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            AnyModel::Pmf(m) => m.store_mut(),
            AnyModel::Baseline(m) => m.store_mut(),
        }
    }

    pub fn train(
        &mut self,
        train: &[MultimodalRecord],
        val: &[MultimodalRecord],
        cfg: &TrainConfig,
        log: Option<&mut dyn Write>,
    ) -> Result<TrainReport> {
        match self {
            AnyModel::Pmf(m) => train_run(m, train, val, cfg, log),
            AnyModel::Baseline(m) => train_run(m, train, val, cfg, log),
        }
    }

    pub fn evaluate(&self, records: &[MultimodalRecord], batch: usize) -> Result<Metrics> {
        match self {
            AnyModel::Pmf(m) => evaluate(m, records, batch),
            AnyModel::Baseline(m) => evaluate(m, records, batch),
        }
    }
}

/// Trains the configured model and writes `metrics.jsonl`, `model.ckpt` and
/// `summary.json`.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainReport> {
    let tcfg = cfg.train_section()?;
    let (train, val) = datasets(cfg)?;
    let mut model = AnyModel::build(cfg, cfg.seed)?;
    let mut log = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
    let report = model.train(&train, &val, tcfg, Some(&mut log))?;
    log.flush()?;
    save_checkpoint(&out.join("model.ckpt"), model.store(), &serde_json::to_value(cfg)?)?;
    let summary = json!({
        "best_epoch": report.best_epoch,
        "best_val": report.best_val,
        "steps": report.steps,
        "trainable_params": model.store().iter()
            .filter(|(_, _, t)| t.requires_grad())
            .map(|(_, _, t)| t.numel())
            .sum::<usize>(),
    });
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(report)
}

fn eval(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let (store, configs) = load_checkpoint(checkpoint)?;
    let trained = RunConfig::from_json(&configs.to_string())?.materialize(None)?;
    let mut model = AnyModel::build(
        &RunConfig {
            model: config::ModelSection {
                backbones: None,
                ..trained.model.clone()
            },
            ..trained.clone()
        },
        trained.seed,
    )?;
    model.store_mut().copy_values_from(&store, "", "")?;
    let (_, val) = datasets(cfg)?;
    let batch = cfg.train.as_ref().map_or(64, |t| t.batch_size);
    let metrics = model.evaluate(&val, batch)?;
    let text = serde_json::to_string_pretty(&metrics)?;
    println!("{text}");
    std::fs::write(out.join("eval.json"), text + "\n")?;
    Ok(())
}

fn profile(cfg: &RunConfig, out: &Path) -> Result<()> {
    let p = cfg
        .profile
        .as_ref()
        .ok_or_else(|| Error::Config("config has no `profile` section".into()))?;
    let batch = datagen::generate_split(&cfg.data.task, p.batch_size, cfg.seed, stream::DATA_TRAIN)?;
    let setup = ProfileSetup {
        img: cfg.model.img.clone(),
        txt: cfg.model.txt.clone(),
        fusion: cfg.fusion().clone(),
        dtype: cfg.model.dtype,
        seed: cfg.seed,
    };
    let result = profile_sweep(p.axis, &p.values, &setup, &batch)?;
    let stem = format!("profile_{}", p.axis.label());
    result.write(&out.join(format!("{stem}.csv")), &out.join(format!("{stem}.json")))?;
    print!("{}", result.to_csv());
    Ok(())
}

fn run_search(cfg: &RunConfig, out: &Path) -> Result<()> {
    let s = cfg
        .search
        .as_ref()
        .ok_or_else(|| Error::Config("config has no `search` section".into()))?;
    let tcfg = TrainConfig {
        epochs: s.epochs,
        ..cfg.train_section()?.clone()
    };
    let train = datagen::generate_split(&cfg.data.task, s.n_train, cfg.seed, stream::DATA_TRAIN)?;
    let val = datagen::generate_split(&cfg.data.task, s.n_val, cfg.seed, stream::DATA_VAL)?;
    let (img, txt) = (&cfg.model.img, &cfg.model.txt);
    let shape = |e: &crate::encoder::EncoderConfig| TowerShape {
        layers: e.layers,
        d: e.d,
    };
    let mut params = Vec::new();
    let objective = |c: Candidate| -> Result<f64> {
        let fused = img.layers - c.lf;
        let fusion = cfg.fusion().clone().with_lf(img, txt, fused).with_prompt_len(c.m);
        let trial = RunConfig {
            model: config::ModelSection {
                kind: ModelKind::Pmf,
                fusion: Some(fusion.clone()),
                ..cfg.model.clone()
            },
            ..cfg.clone()
        };
        let mut model = AnyModel::build(&trial, cfg.seed)?;
        let report = model.train(&train, &val, &tcfg, None)?;
        params.push(count_trainable_params(shape(img), shape(txt), &fusion).total);
        Ok(report.best_val.map_or(0.0, |m| m.accuracy))
    };
    let result = search(&s.space, cfg.seed, objective)?;
    std::fs::write(out.join("search_log.csv"), result.to_csv())?;
    let body = json!({
        "best": result.best,
        "best_score": result.best_score,
        "log": result.log,
        "trainable_params": params,
    });
    std::fs::write(out.join("search.json"), serde_json::to_string_pretty(&body)? + "\n")?;
    println!("best Lf={} M={} score {:.4}", result.best.lf, result.best.m, result.best_score);
    Ok(())
}
