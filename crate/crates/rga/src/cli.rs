//! Command-line entry points.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rga_core::config::{Config, PromptMode};
use rga_core::data::{generate_synthetic, DatasetSplit, Sample};
use rga_core::matching::{evaluate_detailed, rank_gallery, RetrievalEntry};
use rga_core::model::Model;
use rga_core::params::Parameters;
use rga_core::prototypes::PrototypeSet;
use rga_core::train::{self, build_index, prepare_eval, run_experiment, sweep_config, LogRecord, SweepParam};
use serde_json::json;

use crate::dataset::{load_dataset, parse_name, Dataset};
use crate::formats::{
    load_checkpoint, load_config, load_prototypes, read_rgb_png, save_checkpoint, save_prototypes, write_bytes,
    write_label_png,
};
use crate::report::{log_line, sweep_table, write_ranked, MetricsReport, SweepRow};

#[derive(Debug, Parser)]
#[command(name = "rga", version, about = "Region generation and assessment for occluded person re-identification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat `key = value` configuration file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root with train/ query/ gallery/, or `synthetic`.
    #[arg(long)]
    pub data: String,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the prompt context and background embedding to the pseudo masks.
    TrainPrompt(Common),
    /// Joint training; starts from `--init` when given.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the query and gallery splits.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Write the top-k ranked gallery list of every query.
        #[arg(long, value_name = "K")]
        dump_ranked: Option<usize>,
        /// Write argmax region masks as 8-bit PNGs.
        #[arg(long)]
        dump_masks: bool,
    },
    /// Rank the gallery for a single query image.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        query: PathBuf,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
    },
    /// Train and evaluate once per value of one hyperparameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// One of N, gamma, K, m_u.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Write a checkpoint's prototypes as a prototype container.
    ExportPrototypes {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn config_of(common: &Common) -> anyhow::Result<Config> {
    match &common.config {
        Some(p) => Ok(load_config(p)?),
        None => Ok(Config::default()),
    }
}

pub fn load_data(spec: &str, config: &Config) -> anyhow::Result<Dataset> {
    if spec == "synthetic" {
        let s = generate_synthetic(&config.synthetic_config())?;
        return Ok(Dataset {
            train: s.train,
            query: s.query,
            gallery: s.gallery,
            skipped: 0,
        });
    }
    let data = load_dataset(Path::new(spec))?;
    if data.skipped > 0 {
        log::warn!("{} file(s) skipped for malformed names", data.skipped);
    }
    Ok(data)
}

fn imported_prototypes(config: &Config) -> anyhow::Result<Option<PrototypeSet>> {
    if config.prompt_mode != PromptMode::Imported {
        return Ok(None);
    }
    let path = config
        .prototype_file
        .as_deref()
        .context("prompt_mode = imported needs prototype_file")?;
    Ok(Some(load_prototypes(Path::new(path), Some(config.feature_dim))?))
}

struct JsonLog {
    out: BufWriter<File>,
    error: Option<std::io::Error>,
}

impl JsonLog {
    fn create(path: &Path) -> anyhow::Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).with_context(|| parent.display().to_string())?;
        }
        let file = File::create(path).with_context(|| path.display().to_string())?;
        Ok(Self {
            out: BufWriter::new(file),
            error: None,
        })
    }

    fn record(&mut self, rec: &LogRecord) {
        if rec.step == 0 {
            log::info!("{} epoch {}: loss {:.4}", rec.stage, rec.epoch, rec.total);
        }
        if self.error.is_none() {
            if let Err(e) = writeln!(self.out, "{}", log_line(rec)) {
                self.error = Some(e);
            }
        }
    }

    fn finish(mut self) -> anyhow::Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e.into());
        }
        self.out.flush()?;
        Ok(())
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())?;
    Ok(())
}

fn checkpoint_path(explicit: &Option<PathBuf>, out: &Path) -> PathBuf {
    explicit.clone().unwrap_or_else(|| out.join("model.ckpt"))
}

fn load_model(path: &Path) -> anyhow::Result<Model> {
    let ckpt = load_checkpoint(path)?;
    Model::from_checkpoint(&ckpt).with_context(|| format!("{}: incompatible checkpoint", path.display()))
}

/// Data settings come from `--config` when given, otherwise from the
/// checkpoint's own snapshot.
fn data_config(common: &Common, model: &Model) -> anyhow::Result<Config> {
    match &common.config {
        Some(p) => Ok(load_config(p)?),
        None => Ok(model.config.clone()),
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::TrainPrompt(common) => cmd_train_prompt(&common),
        Command::Train { common, init } => cmd_train(&common, init.as_deref()),
        Command::Eval {
            common,
            checkpoint,
            dump_ranked,
            dump_masks,
        } => cmd_eval(&common, &checkpoint, dump_ranked, dump_masks),
        Command::Retrieve {
            common,
            checkpoint,
            query,
            top_k,
        } => cmd_retrieve(&common, &checkpoint, &query, top_k),
        Command::Sweep { common, param, values } => cmd_sweep(&common, &param, &values),
        Command::ExportPrototypes { common, checkpoint } => {
            let model = load_model(&checkpoint_path(&checkpoint, &common.out))?;
            let path = common.out.join("prototypes.bin");
            save_prototypes(&path, &model.prompt.encode()?)?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn cmd_train_prompt(common: &Common) -> anyhow::Result<()> {
    let config = config_of(common)?;
    let data = load_data(&common.data, &config)?;
    let mut model = Model::new(&config, data.train.id_count(), imported_prototypes(&config)?)?;
    let mut log = JsonLog::create(&common.out.join("prompt_log.jsonl"))?;
    let report = train::train_prompt(&mut model, &data.train, &mut |r| log.record(r))?;
    log.finish()?;
    save_checkpoint(&common.out.join("prompt.ckpt"), &model.to_checkpoint())?;
    write_json(
        &common.out.join("prompt_report.json"),
        &json!({
            "initial_seg": report.initial_seg,
            "final_seg": report.final_seg,
            "epoch_seg": report.epoch_seg,
        }),
    )?;
    println!(
        "segmentation loss {:.4} -> {:.4}; wrote {}",
        report.initial_seg,
        report.final_seg,
        common.out.join("prompt.ckpt").display()
    );
    Ok(())
}

fn cmd_train(common: &Common, init: Option<&Path>) -> anyhow::Result<()> {
    let config = config_of(common)?;
    let data = load_data(&common.data, &config)?;
    let mut model = Model::new(&config, data.train.id_count(), imported_prototypes(&config)?)?;
    if let Some(path) = init {
        let ckpt = load_checkpoint(path)?;
        let mut copied = 0usize;
        model.visit_mut(&mut |name, m| {
            if let Some(a) = ckpt.arrays.get(name).filter(|a| a.shape() == m.shape()) {
                *m = a.clone();
                copied += 1;
            }
        });
        if copied == 0 {
            bail!("{}: no parameters match this configuration", path.display());
        }
        log::info!("initialised {copied} parameter arrays from {}", path.display());
    }
    let mut log = JsonLog::create(&common.out.join("train_log.jsonl"))?;
    let report = train::train(&mut model, &data.train, &mut |r| log.record(r))?;
    log.finish()?;
    let path = common.out.join("model.ckpt");
    save_checkpoint(&path, &model.to_checkpoint())?;
    write_json(
        &common.out.join("train_report.json"),
        &json!({
            "epoch_loss": report.epoch_loss,
            "steps": report.steps,
            "admitted": report.admitted,
        }),
    )?;
    println!("trained {} steps; wrote {}", report.steps, path.display());
    Ok(())
}

fn stem_of(sample: &Sample, role: &str, i: usize) -> String {
    sample
        .source
        .as_deref()
        .and_then(|s| Path::new(s).file_stem())
        .and_then(|s| s.to_str())
        .map(String::from)
        .unwrap_or_else(|| format!("{role}_{i:05}_{}_c{}", sample.person_id, sample.camera_id))
}

fn dump_masks(model: &Model, split: &DatasetSplit, dir: &Path, role: &str) -> anyhow::Result<()> {
    let size = model.config.image_size();
    for (i, s) in split.samples().iter().enumerate() {
        let prepared = prepare_eval(s, size)?;
        let e = model.embed(&[&prepared.image])?.remove(0);
        if let Some(masks) = e.masks {
            write_label_png(&dir.join(role).join(format!("{}.png", stem_of(s, role, i))), &masks.argmax())?;
        }
    }
    Ok(())
}

fn cmd_eval(common: &Common, checkpoint: &Option<PathBuf>, ranked: Option<usize>, masks: bool) -> anyhow::Result<()> {
    let model = load_model(&checkpoint_path(checkpoint, &common.out))?;
    let config = data_config(common, &model)?;
    let data = load_data(&common.data, &config)?;
    let q = build_index(&model, &data.query)?;
    let g = build_index(&model, &data.gallery)?;
    let (metrics, results) = evaluate_detailed(&q, &g)?;
    let report = MetricsReport::from(&metrics);
    write_json(&common.out.join("metrics.json"), &report)?;
    if let Some(k) = ranked {
        let path = common.out.join("ranked.jsonl");
        let mut f = BufWriter::new(File::create(&path).with_context(|| path.display().to_string())?);
        write_ranked(&mut f, &q, &g, &results, k)?;
        f.flush()?;
    }
    if masks {
        let dir = common.out.join("masks");
        dump_masks(&model, &data.query, &dir, "query")?;
        dump_masks(&model, &data.gallery, &dir, "gallery")?;
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn cmd_retrieve(common: &Common, checkpoint: &Option<PathBuf>, query: &Path, k: usize) -> anyhow::Result<()> {
    let model = load_model(&checkpoint_path(checkpoint, &common.out))?;
    let config = data_config(common, &model)?;
    let data = load_data(&common.data, &config)?;
    let gallery = build_index(&model, &data.gallery)?;
    let (pid, cam) = query
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(parse_name)
        .unwrap_or((0, 0));
    let sample = Sample {
        image: read_rgb_png(query)?,
        person_id: pid,
        camera_id: cam,
        pseudo_mask: None,
        occlusion_flags: None,
        source: Some(query.display().to_string()),
    };
    let prepared = prepare_eval(&sample, model.config.image_size())?;
    let e = model.embed(&[&prepared.image])?.remove(0);
    let entry = RetrievalEntry {
        global: e.global,
        regions: e.regions,
        w: e.scores.w.clone(),
        person_id: pid,
        camera_id: cam,
        source: sample.source.clone(),
    };
    let ranking = rank_gallery(&entry, &gallery)?;
    let top: Vec<_> = ranking
        .iter()
        .take(k)
        .map(|&(gi, d)| {
            let g = &gallery.entries()[gi];
            json!({
                "gallery": g.source.clone().unwrap_or_else(|| format!("#{gi}")),
                "person_id": g.person_id,
                "camera_id": g.camera_id,
                "distance": d,
            })
        })
        .collect();
    for (rank, t) in top.iter().enumerate() {
        println!("{:>3}  {:.6}  {}", rank + 1, t["distance"].as_f64().unwrap_or(f64::NAN), t["gallery"].as_str().unwrap_or(""));
    }
    write_json(
        &common.out.join("retrieve.json"),
        &json!({
            "query": query.display().to_string(),
            "w": e.scores.w,
            "alpha": e.scores.alpha,
            "beta": e.scores.beta,
            "top": top,
        }),
    )?;
    Ok(())
}

/// One train + evaluate run of a sweep.
pub fn sweep_run(config: &Config, spec: &str, fixed: Option<&Dataset>) -> anyhow::Result<MetricsReport> {
    let owned;
    let data = match fixed {
        Some(d) => d,
        None => {
            owned = load_data(spec, config)?;
            &owned
        }
    };
    let imported = imported_prototypes(config)?;
    let (_, report) = run_experiment(config, &data.train, &data.query, &data.gallery, imported, &mut |_| {})?;
    Ok(MetricsReport::from(&report.metrics))
}

fn cmd_sweep(common: &Common, param: &str, values: &[String]) -> anyhow::Result<()> {
    let base = config_of(common)?;
    let param = SweepParam::parse(param)?;
    // a directory dataset is loaded once; synthetic data follows each config
    let fixed = if common.data == "synthetic" {
        None
    } else {
        Some(load_data(&common.data, &base)?)
    };
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let result = sweep_config(&base, param, value)
            .map_err(anyhow::Error::from)
            .and_then(|cfg| sweep_run(&cfg, &common.data, fixed.as_ref()));
        match result {
            Ok(m) => {
                log::info!("{} = {value}: rank1 {:.4} mAP {:.4}", param.name(), m.rank1, m.map);
                rows.push(SweepRow {
                    value: value.clone(),
                    metrics: Some(m),
                    error: None,
                });
            }
            Err(e) => {
                log::warn!("{} = {value} failed: {e:#}", param.name());
                rows.push(SweepRow {
                    value: value.clone(),
                    metrics: None,
                    error: Some(format!("{e:#}")),
                });
            }
        }
    }
    let table = sweep_table(param.name(), &rows);
    write_bytes(&common.out.join("sweep.tsv"), table.as_bytes())?;
    write_json(&common.out.join("sweep.json"), &json!({ "param": param.name(), "rows": rows }))?;
    print!("{table}");
    Ok(())
}
