//! Command-line experiment runner.
//!
//! Every subcommand reads one [`ExperimentConfig`], writes its artifacts
//! under the configured output root and records a `run.json` with the
//! resolved config, the seed and a content hash of its inputs.

pub mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use clsnav_core::checkpoint::{Checkpoint, MANIFEST_FILE, TENSOR_FILE};
use clsnav_core::config::Mechanism;
use clsnav_core::data::{build_folds, read_dataset, write_dataset, Corpus, FoldSplit, Split};
use clsnav_core::eval::{
    attention_shift, cls_attention_mass, evaluate_boxes, evaluate_model, evaluate_with, evaluate_zoom_in,
};
use clsnav_core::metrics::{EvalReport, IouAccumulator};
use clsnav_core::model::ClsClip;
use clsnav_core::pnm::write_pgm;
use clsnav_core::tensor::Tape;
use clsnav_core::train::{contrastive_pretrain, train_segmentation, write_log};
use clsnav_core::visual::MechanismParams;
use clsnav_core::zoomin::ProposalSource;
use clsnav_core::Error as CoreError;

pub use config::ExperimentConfig;
use config::{blob_hash, run_name};

#[derive(Debug, Parser)]
#[command(name = "clsnav", version, about = "Text [CLS] navigation segmentation experiments")]
pub struct Cli {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root, overriding the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Restrict a multi-arm command to one arm.
    #[arg(long, global = true)]
    pub arm: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate the train, eval and tiny-object corpora.
    GenData,
    /// Contrastive dual-encoder pretraining.
    Pretrain,
    /// Frozen-backbone segmentation training for the configured fold.
    TrainSeg,
    /// Seen/unseen evaluation of a segmentation checkpoint (arms: model, gt-oracle).
    Evaluate,
    /// Replacement-window ablation.
    AblateLayers,
    /// Conditioning-mechanism ablation.
    AblateMechanism,
    /// Plain versus zoom-in evaluation on the tiny-object split.
    ZoominEval,
    /// [CLS]-row attention maps with and without text replacement.
    AttentionDump,
    /// Print the config JSON schema.
    Schema,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pretrain => "pretrain",
            Command::TrainSeg => "train-seg",
            Command::Evaluate => "evaluate",
            Command::AblateLayers => "ablate-layers",
            Command::AblateMechanism => "ablate-mechanism",
            Command::ZoominEval => "zoomin-eval",
            Command::AttentionDump => "attention-dump",
            Command::Schema => "schema",
        }
    }
}

/// Replacement windows compared by `ablate-layers`.
pub const LAYER_ARMS: [(&str, [usize; 3]); 4] = [
    ("0-1-2", [0, 1, 2]),
    ("2-5-8", [2, 5, 8]),
    ("9-10-11", [9, 10, 11]),
    ("2-3-4", [2, 3, 4]),
];

/// Mechanisms compared by `ablate-mechanism`.
pub const MECHANISM_ARMS: [Mechanism; 4] = [
    Mechanism::ReplaceCls,
    Mechanism::ChannelAttention,
    Mechanism::SpatialAttention,
    Mechanism::Vpt,
];

pub fn run(cli: &Cli) -> Result<()> {
    if cli.command == Command::Schema {
        println!("{}", serde_json::to_string_pretty(&config::schema())?);
        return Ok(());
    }
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    }
    .resolve(cli.seed, cli.out.clone())?;
    let arm = cli.arm.as_deref();
    match cli.command {
        Command::GenData => gen_data(&cfg),
        Command::Pretrain => pretrain(&cfg),
        Command::TrainSeg => train_seg(&cfg),
        Command::Evaluate => evaluate(&cfg, arm),
        Command::AblateLayers => ablate_layers(&cfg, arm),
        Command::AblateMechanism => ablate_mechanism(&cfg, arm),
        Command::ZoominEval => zoomin_eval(&cfg),
        Command::AttentionDump => attention_dump(&cfg),
        Command::Schema => unreachable!(),
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    seed: u64,
    input_hash: &'a str,
    inputs: &'a BTreeMap<String, String>,
    config: &'a ExperimentConfig,
}

/// Hash of the path-free config plus the hashes of upstream artifacts.
fn input_hash(cfg: &ExperimentConfig, inputs: &BTreeMap<String, String>) -> String {
    let doc = serde_json::json!({ "config": cfg.content(), "inputs": inputs });
    blob_hash(&serde_json::to_vec(&doc).expect("json serializes"))
}

fn write_run(dir: &Path, command: &str, cfg: &ExperimentConfig, inputs: &BTreeMap<String, String>) -> Result<String> {
    let hash = input_hash(cfg, inputs);
    let rec = RunRecord {
        command,
        seed: cfg.seed,
        input_hash: &hash,
        inputs,
        config: cfg,
    };
    create_dir(dir)?;
    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&rec)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(hash)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!("missing {what}: {} (run the upstream command first)", path.display());
    }
    Ok(())
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(blob_hash(&bytes))
}

fn checkpoint_hashes(dir: &Path, key: &str, inputs: &mut BTreeMap<String, String>) -> Result<()> {
    for f in [MANIFEST_FILE, TENSOR_FILE] {
        inputs.insert(format!("{key}/{f}"), file_hash(&dir.join(f))?);
    }
    Ok(())
}

fn load_split(cfg: &ExperimentConfig, split: Split, inputs: &mut BTreeMap<String, String>) -> Result<Corpus> {
    let dir = cfg.data_dir().join(split.as_str());
    require(&dir.join("manifest.json"), &format!("{} corpus", split.as_str()))?;
    let corpus = read_dataset(&dir)?;
    if corpus.spec != cfg.data || corpus.split != split {
        bail!(
            "corpus at {} was generated from a different data config; rerun gen-data",
            dir.display()
        );
    }
    inputs.insert(
        format!("data/{}", split.as_str()),
        file_hash(&dir.join("manifest.json"))?,
    );
    Ok(corpus)
}

fn load_checkpoint(dir: &Path, what: &str, key: &str, inputs: &mut BTreeMap<String, String>) -> Result<Checkpoint> {
    require(&dir.join(MANIFEST_FILE), what)?;
    let ck = Checkpoint::load(dir)?;
    checkpoint_hashes(dir, key, inputs)?;
    Ok(ck)
}

fn fold_split(cfg: &ExperimentConfig) -> Result<FoldSplit> {
    Ok(build_folds(cfg.data.categories.len(), cfg.data.n_folds)?.swap_remove(cfg.fold))
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn gen_data(cfg: &ExperimentConfig) -> Result<()> {
    let root = cfg.data_dir();
    for split in [Split::Train, Split::Eval, Split::Tiny] {
        let corpus = Corpus::generate_split(&cfg.data, split, cfg.exec)?;
        let dir = root.join(split.as_str());
        write_dataset(&corpus, &dir)?;
        println!("{}: {} samples -> {}", split.as_str(), corpus.len(), dir.display());
    }
    write_run(&root, "gen-data", cfg, &BTreeMap::new())?;
    Ok(())
}

fn pretrain(cfg: &ExperimentConfig) -> Result<()> {
    let mut inputs = BTreeMap::new();
    let train = load_split(cfg, Split::Train, &mut inputs)?;
    let held = load_split(cfg, Split::Eval, &mut inputs)?;
    let out = contrastive_pretrain(&train, &held, &cfg.model, &cfg.pretrain, cfg.seed, cfg.exec)?;
    let dir = cfg.pretrained_dir();
    out.checkpoint.save(&dir)?;
    write_log(&dir.join("log.jsonl"), &out.log)?;
    write_run(&dir, "pretrain", cfg, &inputs)?;
    println!(
        "pretrain: held-out retrieval {:.4} after {} epochs -> {}",
        out.retrieval,
        out.epochs_run,
        dir.display()
    );
    Ok(())
}

/// Trains one segmentation model and saves it to `dir`.
fn train_into(cfg: &ExperimentConfig, dir: &Path) -> Result<ClsClip> {
    let mut inputs = BTreeMap::new();
    let train = load_split(cfg, Split::Train, &mut inputs)?;
    let pre = load_checkpoint(&cfg.pretrained_dir(), "pretrained checkpoint", "pretrain", &mut inputs)?;
    let fold = fold_split(cfg)?;
    let monitor = if cfg.segment.monitor_every > 0 {
        Some(load_split(cfg, Split::Eval, &mut inputs)?)
    } else {
        None
    };
    let out = train_segmentation(
        &train,
        &fold,
        &pre,
        &cfg.model,
        &cfg.segment,
        cfg.seed,
        cfg.exec,
        monitor.as_ref(),
    )?;
    if out.audit.unseen != 0 {
        bail!(
            "sampler audit: {} unseen-category queries in training",
            out.audit.unseen
        );
    }
    out.checkpoint.save(dir)?;
    write_log(&dir.join("log.jsonl"), &out.log)?;
    write_run(dir, "train-seg", cfg, &inputs)?;
    println!(
        "train-seg: fold {} {} final loss {:.4}, {} queries audited -> {}",
        cfg.fold,
        cfg.model.visual.mechanism,
        out.log.last().map_or(f64::NAN, |r| r.loss),
        out.audit.queries,
        dir.display()
    );
    Ok(out.model)
}

fn train_seg(cfg: &ExperimentConfig) -> Result<()> {
    train_into(cfg, &cfg.checkpoint_dir()).map(|_| ())
}

fn load_model(cfg: &ExperimentConfig, inputs: &mut BTreeMap<String, String>) -> Result<ClsClip> {
    let dir = cfg.checkpoint_dir();
    let ck = load_checkpoint(&dir, "segmentation checkpoint", "checkpoint", inputs)?;
    if ck.manifest.stage != "segment" {
        bail!(
            "{} holds a {:?} checkpoint, expected segment",
            dir.display(),
            ck.manifest.stage
        );
    }
    Ok(ClsClip::from_checkpoint(&ck)?)
}

fn report_rows(hash: &str, fold: usize, arm: &str, subset: &str, report: &EvalReport) -> Vec<String> {
    let mut rows: Vec<String> = report
        .per_class
        .iter()
        .map(|(name, v)| format!("{hash},{fold},{arm},{subset},{name},{v}"))
        .collect();
    rows.push(format!("{hash},{fold},{arm},{subset},mIoU,{}", report.miou));
    rows.push(format!("{hash},{fold},{arm},{subset},FB-IoU,{}", report.fb_iou));
    rows
}

fn evaluate(cfg: &ExperimentConfig, arm: Option<&str>) -> Result<()> {
    let arm = arm.unwrap_or("model");
    let mut inputs = BTreeMap::new();
    let eval = load_split(cfg, Split::Eval, &mut inputs)?;
    let fold = fold_split(cfg)?;
    let names = &cfg.data.categories;
    let (seen, unseen) = match arm {
        "model" => {
            let model = load_model(cfg, &mut inputs)?;
            (
                evaluate_model(&model, &eval, &fold.seen, cfg.exec)?,
                evaluate_model(&model, &eval, &fold.unseen, cfg.exec)?,
            )
        }
        "gt-oracle" => {
            let oracle = |s: &clsnav_core::data::SynthSample, c: usize| Ok(s.masks[&c].clone());
            (
                evaluate_with(&eval, &fold.seen, cfg.exec, oracle)?,
                evaluate_with(&eval, &fold.unseen, cfg.exec, oracle)?,
            )
        }
        other => bail!("unknown evaluate arm {other:?} (expected model or gt-oracle)"),
    };
    let dir = cfg.out.join("evaluate");
    let hash = write_run(&dir, "evaluate", cfg, &inputs)?;
    let mech = cfg.model.visual.mechanism.as_str();
    let mut rows = Vec::new();
    for (subset, acc, classes) in [("seen", &seen, &fold.seen), ("unseen", &unseen, &fold.unseen)] {
        let r = EvalReport::from_accumulator(acc, classes, names, cfg.fold, mech)?;
        println!(
            "{arm} {subset}: mIoU {:.4} FB-IoU {:.4} ({} queries)",
            r.miou, r.fb_iou, r.samples
        );
        rows.extend(report_rows(&hash, cfg.fold, arm, subset, &r));
    }
    write_csv(
        &dir.join(format!("eval-fold{}-{arm}.csv", cfg.fold)),
        "config_hash,fold,arm,subset,class,iou",
        &rows,
    )
}

/// Trains and scores one ablation arm; returns its CSV row.
fn ablation_arm(cfg: &ExperimentConfig, arm: &str, eval: &Corpus, fold: &FoldSplit) -> Result<(f64, f64, f64)> {
    let dir = cfg.out.join("segment").join(run_name(cfg.fold, &cfg.model));
    let model = train_into(cfg, &dir)?;
    let seen = evaluate_model(&model, eval, &fold.seen, cfg.exec)?;
    let unseen = evaluate_model(&model, eval, &fold.unseen, cfg.exec)?;
    let r = (seen.miou(&fold.seen)?, unseen.miou(&fold.unseen)?, unseen.fb_iou());
    println!("arm {arm}: seen mIoU {:.4}, unseen mIoU {:.4}", r.0, r.1);
    Ok(r)
}

fn ablate(
    cfg: &ExperimentConfig,
    command: &str,
    arms: Vec<(String, ExperimentConfig)>,
    only: Option<&str>,
) -> Result<()> {
    let selected: Vec<_> = match only {
        Some(a) => {
            let found: Vec<_> = arms.into_iter().filter(|(n, _)| n == a).collect();
            if found.is_empty() {
                bail!("unknown {command} arm {a:?}");
            }
            found
        }
        None => arms,
    };
    let mut inputs = BTreeMap::new();
    let eval = load_split(cfg, Split::Eval, &mut inputs)?;
    let fold = fold_split(cfg)?;
    let dir = cfg.out.join(command);
    let hash = write_run(&dir, command, cfg, &inputs)?;
    let mut rows = Vec::new();
    for (name, arm_cfg) in &selected {
        arm_cfg.validate()?;
        let (seen, unseen, fb) = ablation_arm(arm_cfg, name, &eval, &fold)?;
        rows.push(format!("{hash},{},{},{name},{seen},{unseen},{fb}", cfg.fold, cfg.seed));
    }
    let file = match only {
        Some(a) => format!("{command}-fold{}-{a}.csv", cfg.fold),
        None => format!("{command}-fold{}.csv", cfg.fold),
    };
    write_csv(
        &dir.join(file),
        "config_hash,fold,seed,arm,seen_miou,unseen_miou,unseen_fb_iou",
        &rows,
    )
}

fn ablate_layers(cfg: &ExperimentConfig, only: Option<&str>) -> Result<()> {
    let arms = LAYER_ARMS
        .iter()
        .map(|(name, layers)| {
            let mut c = cfg.clone();
            c.model.visual.mechanism = Mechanism::ReplaceCls;
            c.model.visual.replace_layers = layers.to_vec();
            (name.to_string(), c)
        })
        .collect();
    ablate(cfg, "ablate-layers", arms, only)
}

fn ablate_mechanism(cfg: &ExperimentConfig, only: Option<&str>) -> Result<()> {
    let arms = MECHANISM_ARMS
        .iter()
        .map(|&m| {
            let mut c = cfg.clone();
            c.model.visual.mechanism = m;
            (m.as_str().to_string(), c)
        })
        .collect();
    ablate(cfg, "ablate-mechanism", arms, only)
}

fn zoomin_eval(cfg: &ExperimentConfig) -> Result<()> {
    let mut inputs = BTreeMap::new();
    let tiny = load_split(cfg, Split::Tiny, &mut inputs)?;
    let model = load_model(cfg, &mut inputs)?;
    let fold = fold_split(cfg)?;
    let dir = cfg.out.join("zoomin");
    let hash = write_run(&dir, "zoomin-eval", cfg, &inputs)?;
    let all: Vec<usize> = (0..cfg.data.categories.len()).collect();
    let mut rows = Vec::new();
    for (subset, classes) in [("seen", &fold.seen), ("unseen", &fold.unseen), ("all", &all)] {
        let mut push = |method: &str, acc: IouAccumulator| -> Result<()> {
            let v = acc.miou(classes)?;
            println!("{subset} {method}: mIoU {v:.4}");
            rows.push(format!("{hash},{},{subset},{method},{v}", cfg.fold));
            Ok(())
        };
        push("plain", evaluate_model(&model, &tiny, classes, cfg.exec)?)?;
        for &src in &cfg.zoomin.sources {
            let acc = evaluate_zoom_in(&model, &tiny, classes, src, cfg.zoomin.context, cfg.seed, cfg.exec)?;
            push(&format!("zoomin_{}", src.as_str()), acc)?;
        }
        push(
            "boxes_oracle",
            evaluate_boxes(&tiny, classes, ProposalSource::Oracle, cfg.seed, cfg.exec)?,
        )?;
    }
    write_csv(
        &dir.join(format!("zoomin-fold{}.csv", cfg.fold)),
        "config_hash,fold,subset,method,miou",
        &rows,
    )
}

#[derive(Serialize)]
struct AttentionEntry {
    image: usize,
    category: String,
    layer: usize,
    head: usize,
    with_text: String,
    without_text: String,
    /// In-mask [CLS] attention mass, absent when the mask covers no patch.
    mass_with_text: Option<f64>,
    mass_without_text: Option<f64>,
}

/// [CLS]-row attention of every head at `layer`, `[heads][patches]`.
fn cls_rows(
    model: &ClsClip,
    image: &clsnav_core::tensor::Tensor,
    text: Option<&clsnav_core::text::TextCls>,
    layer: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::with_params(&model.store);
    let out = match text {
        Some(t) => {
            let t = model.bind_text(&mut tape, t)?;
            model.visual.encode(&mut tape, image, &model.mechanism, Some(t))?
        }
        None => model.visual.encode(&mut tape, image, &MechanismParams::None, None)?,
    };
    let (probs, heads, tokens) = out
        .attention_at(&tape, layer)
        .with_context(|| format!("no attention at layer {layer}"))?;
    let off = 1 + out.prompt_count;
    Ok((0..heads)
        .map(|h| probs[h * tokens * tokens + off..h * tokens * tokens + tokens].to_vec())
        .collect())
}

fn write_heatmap(path: &Path, row: &[f64], grid: usize) -> Result<()> {
    let max = row.iter().copied().fold(0.0_f64, f64::max);
    let gray: Vec<u8> = row
        .iter()
        .map(|&v| if max > 0.0 { (255.0 * v / max).round() as u8 } else { 0 })
        .collect();
    write_pgm(path, grid, grid, &gray)?;
    Ok(())
}

fn mass_or_none(r: clsnav_core::Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(CoreError::EmptyMask) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn attention_dump(cfg: &ExperimentConfig) -> Result<()> {
    let mut inputs = BTreeMap::new();
    let eval = load_split(cfg, Split::Eval, &mut inputs)?;
    let model = load_model(cfg, &mut inputs)?;
    let vcfg = &model.config.visual;
    let layer = cfg.attention.layer.unwrap_or_else(|| vcfg.probe_layer());
    if layer >= vcfg.n_layers {
        bail!("config error at /attention/layer: layer {layer} out of range");
    }
    let dir = cfg.out.join("attention");
    write_run(&dir, "attention-dump", cfg, &inputs)?;
    let mut index = Vec::new();
    for s in eval.samples.iter().take(cfg.attention.images) {
        let Some((&c, mask)) = s.masks.iter().next() else {
            continue;
        };
        let text = model.text_cls(c)?;
        let with = cls_rows(&model, &s.image, Some(&text), layer)?;
        let without = cls_rows(&model, &s.image, None, layer)?;
        let mass_with = mass_or_none(cls_attention_mass(&model, &s.image, mask, Some(&text), layer))?;
        let mass_without = mass_or_none(cls_attention_mass(&model, &s.image, mask, None, layer))?;
        for (h, (a, b)) in with.iter().zip(&without).enumerate() {
            let fa = format!("img{:05}-L{layer}-h{h}-text.pgm", s.index);
            let fb = format!("img{:05}-L{layer}-h{h}-plain.pgm", s.index);
            write_heatmap(&dir.join(&fa), a, vcfg.grid())?;
            write_heatmap(&dir.join(&fb), b, vcfg.grid())?;
            index.push(AttentionEntry {
                image: s.index,
                category: cfg.data.categories[c].clone(),
                layer,
                head: h,
                with_text: fa,
                without_text: fb,
                mass_with_text: mass_with,
                mass_without_text: mass_without,
            });
        }
    }
    let shift = attention_shift(&model, &eval, layer, cfg.attention.summary_images, cfg.exec)?;
    println!(
        "layer {layer}: in-mask [CLS] attention {:.4} with text, {:.4} without ({} queries)",
        shift.with_text, shift.without_text, shift.queries
    );
    let doc = serde_json::json!({ "entries": index, "summary": shift });
    let path = dir.join("index.json");
    fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}
