//! The study steps behind each subcommand. Every step reads its inputs from
//! and writes its outputs to one [`Layout`].

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use mmrec_core::ctr::{
    epoch_sweep, freq_bucket_eval, train_ctr, train_frequencies, BucketRow, CtrContext, EpochPoint, MakeAttachment,
    TrainReport, Variant,
};
use mmrec_core::make::{make_pretrain, MakeEpoch};
use mmrec_core::metrics::gauc;
use mmrec_core::retrieval::acc_at_ns;
use mmrec_core::scl::{encode, pretrain, retrieval_set, CheckpointSink, EncoderState, EpochMetrics, PretrainConfig};
use mmrec_core::synth::{
    gen_catalog, gen_impressions, gen_triplets, modal_features, split_last_day, ClickTruth, ImpressionRecord, Item,
    TripletSample,
};
use mmrec_core::Embeddings;
use mmrec_pipeline::ItemEvent;
use mmrec_tensor::ParamSet;
use serde::{Deserialize, Serialize};

use crate::artifacts::{load_params, read_rows, save_params, write_rows, write_run, Layout};
use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub const ITEMS: &str = "items.jsonl";
pub const TRAIN: &str = "train.jsonl";
pub const EVAL: &str = "eval.jsonl";
pub const EVAL_TRUTH: &str = "eval_truth.jsonl";
pub const TRIPLETS_TRAIN: &str = "triplets_train.jsonl";
pub const TRIPLETS_EVAL: &str = "triplets_eval.jsonl";
pub const EVENTS: &str = "events.jsonl";

/// Pretraining ablation arms, weakest first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Arm {
    Untrained,
    Inbatch,
    Moco,
    Full,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Untrained, Arm::Inbatch, Arm::Moco, Arm::Full];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Untrained => "untrained",
            Arm::Inbatch => "inbatch",
            Arm::Moco => "moco",
            Arm::Full => "full",
        }
    }

    pub fn config(self, base: &PretrainConfig) -> PretrainConfig {
        let (use_moco, use_triplet, epochs) = match self {
            Arm::Untrained => (true, true, 0),
            Arm::Inbatch => (false, false, base.epochs),
            Arm::Moco => (true, false, base.epochs),
            Arm::Full => (true, true, base.epochs),
        };
        PretrainConfig {
            use_moco,
            use_triplet,
            epochs,
            ..base.clone()
        }
    }

    /// Checkpoint stem of the arm's final encoder.
    pub fn stem(self) -> String {
        format!("scl_{}", self.name())
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| CliError::Config(format!("unknown arm `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub n_items: usize,
    pub n_clusters: usize,
    pub n_users: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub click_rate: f64,
    pub triplets_train: usize,
    pub triplets_eval: usize,
    pub triplets_skipped: usize,
    /// Held-out GAUC of the true click probability.
    pub bayes_gauc: f64,
    /// Held-out GAUC of the per-item click propensity alone.
    pub id_effect_gauc: f64,
    pub events: usize,
}

/// Everything `gen-data` writes, in memory.
pub struct Data {
    pub manifest: DataManifest,
    pub items: Vec<Item>,
    pub train: Vec<ImpressionRecord>,
    pub eval: Vec<ImpressionRecord>,
    pub eval_truth: Vec<ClickTruth>,
}

impl Data {
    pub fn categories(&self) -> Vec<u64> {
        self.items.iter().map(|i| i.category_id).collect()
    }

    pub fn features(&self) -> Embeddings {
        modal_features(&self.items)
    }
}

pub fn gen_data(cfg: &ExperimentConfig, layout: &Layout) -> Result<DataManifest> {
    let d = &cfg.data;
    let catalog = gen_catalog(&d.catalog)?;
    let log = gen_impressions(&catalog, &d.impressions)?;
    let (tr, ev) = split_last_day(&log.records);
    let pick = |idx: &[usize]| -> Vec<ImpressionRecord> { idx.iter().map(|&i| log.records[i].clone()).collect() };
    let (train, eval) = (pick(&tr), pick(&ev));
    let truth: Vec<ClickTruth> = ev.iter().map(|&i| log.truth[i]).collect();
    let (seed_train, seed_eval) = cfg.triplet_seeds();
    let t_train = gen_triplets(&catalog.items, catalog.n_clusters, d.triplets.n_train, d.triplets.query_noise, seed_train)?;
    let t_eval = gen_triplets(&catalog.items, catalog.n_clusters, d.triplets.n_eval, d.triplets.query_noise, seed_eval)?;
    let events = item_events(&catalog.items, cfg.pipeline.n_events, cfg.pipeline.event_interval_us);

    let labels: Vec<u8> = eval.iter().map(|r| r.label).collect();
    let users: Vec<u64> = eval.iter().map(|r| r.user_id).collect();
    let score = |f: fn(&ClickTruth) -> f64| -> Result<f64> {
        let s: Vec<f64> = truth.iter().map(f).collect();
        Ok(gauc(&s, &labels, &users)?)
    };
    let manifest = DataManifest {
        n_items: catalog.len(),
        n_clusters: catalog.n_clusters,
        n_users: d.impressions.n_users,
        n_train: train.len(),
        n_eval: eval.len(),
        click_rate: log.records.iter().map(|r| r.label as f64).sum::<f64>() / log.records.len().max(1) as f64,
        triplets_train: t_train.samples.len(),
        triplets_eval: t_eval.samples.len(),
        triplets_skipped: t_train.skipped + t_eval.skipped,
        bayes_gauc: score(|t| t.prob)?,
        id_effect_gauc: score(|t| t.id_effect)?,
        events: events.len(),
    };
    write_rows(&layout.data(ITEMS), "items", cfg, &catalog.items)?;
    write_rows(&layout.data(TRAIN), "impressions", cfg, &train)?;
    write_rows(&layout.data(EVAL), "impressions", cfg, &eval)?;
    write_rows(&layout.data(EVAL_TRUTH), "click_truth", cfg, &truth)?;
    write_rows(&layout.data(TRIPLETS_TRAIN), "triplets", cfg, &t_train.samples)?;
    write_rows(&layout.data(TRIPLETS_EVAL), "triplets", cfg, &t_eval.samples)?;
    write_rows(&layout.data(EVENTS), "events", cfg, &events)?;
    write_run(&layout.data("manifest.json"), "data", cfg, &manifest)?;
    info!(
        "data: {} items, {} train / {} eval records, click rate {:.4}, bayes gauc {:.4}",
        manifest.n_items, manifest.n_train, manifest.n_eval, manifest.click_rate, manifest.bayes_gauc
    );
    Ok(manifest)
}

/// One update per event, cycling through the catalog at a fixed interval.
pub fn item_events(items: &[Item], n: usize, interval_us: u64) -> Vec<ItemEvent> {
    if items.is_empty() {
        return Vec::new();
    }
    (0..n)
        .map(|k| {
            let it = &items[k % items.len()];
            ItemEvent {
                item_id: it.item_id,
                modal_feature: it.modal_feature.clone(),
                t_introduced_us: k as u64 * interval_us,
            }
        })
        .collect()
}

pub fn load_manifest(layout: &Layout) -> Result<DataManifest> {
    let path = layout.data("manifest.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Input(format!("{}: {e} (run gen-data first)", path.display())))?;
    serde_json::from_str::<serde_json::Value>(&text)
        .and_then(serde_json::from_value)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn load_data(layout: &Layout) -> Result<Data> {
    let manifest = load_manifest(layout)?;
    Ok(Data {
        items: read_rows(&layout.data(ITEMS), "items")?.1,
        train: read_rows(&layout.data(TRAIN), "impressions")?.1,
        eval: read_rows(&layout.data(EVAL), "impressions")?.1,
        eval_truth: read_rows(&layout.data(EVAL_TRUTH), "click_truth")?.1,
        manifest,
    })
}

pub fn load_triplets(layout: &Layout, name: &str) -> Result<Vec<TripletSample>> {
    Ok(read_rows(&layout.data(name), "triplets")?.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRun {
    pub arm: String,
    pub checkpoint: String,
    pub tau: f64,
    pub history: Vec<EpochMetrics>,
}

/// Trains one arm, writing a checkpoint per epoch and the final encoder.
pub fn pretrain_arm(cfg: &ExperimentConfig, layout: &Layout, arm: Arm, triplets: &[TripletSample]) -> Result<PretrainRun> {
    let pcfg = arm.config(&cfg.pretrain);
    let stem = arm.stem();
    let (state, history) = if pcfg.epochs == 0 {
        let d_raw = triplets
            .first()
            .map(|t| t.query.len())
            .ok_or_else(|| CliError::Input("no training triplets".into()))?;
        (EncoderState::init(d_raw, &pcfg), Vec::new())
    } else {
        let hash = cfg.hash();
        let dir = layout.checkpoints_dir();
        let sink = CheckpointSink {
            dir: &dir,
            config_hash: &hash,
            seed: cfg.seed,
            stem: &stem,
        };
        let out = pretrain(triplets, &pcfg, Some(&sink))?;
        (out.state, out.history)
    };
    save_params(&layout.checkpoint(&stem), &state.to_params(), cfg, &stem)?;
    let run = PretrainRun {
        arm: arm.name().into(),
        checkpoint: stem.clone(),
        tau: state.tau(),
        history,
    };
    write_run(&layout.run(&format!("pretrain_{}", arm.name())), "pretrain", cfg, &run)?;
    info!("pretrain {arm}: tau {:.4}", run.tau);
    Ok(run)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRun {
    pub checkpoint: String,
    pub n_queries: usize,
    pub acc1: f64,
    pub acc5: f64,
    /// `(n, Acc@n)` for every configured cutoff.
    pub acc: Vec<(usize, f64)>,
}

pub fn checkpoint_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Encoder checkpoints in the layout: arm finals and per-epoch snapshots.
pub fn encoder_checkpoints(layout: &Layout) -> Result<Vec<PathBuf>> {
    let dir = layout.checkpoints_dir();
    let mut out: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| CliError::Input(format!("{}: {e} (run pretrain first)", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt") && checkpoint_stem(p).starts_with("scl_"))
        .collect();
    out.sort();
    Ok(out)
}

pub fn eval_retrieval(
    cfg: &ExperimentConfig,
    layout: &Layout,
    checkpoint: &Path,
    triplets: &[TripletSample],
) -> Result<RetrievalRun> {
    let (params, _) = load_params(checkpoint)?;
    let state = EncoderState::from_params(&params, 0.0)?;
    let set = retrieval_set(&state.query, triplets)?;
    let mut ns = cfg.eval.acc_ns.clone();
    ns.extend([1, 5]);
    ns.sort_unstable();
    ns.dedup();
    if let Some(&n) = ns.iter().find(|&&n| n > set.len()) {
        return Err(CliError::Config(format!("Acc@{n} asked of {} queries", set.len())));
    }
    let acc: Vec<(usize, f64)> = ns.iter().copied().zip(acc_at_ns(&set, &ns)).collect();
    let at = |n: usize| acc.iter().find(|a| a.0 == n).map_or(f64::NAN, |a| a.1);
    let stem = checkpoint_stem(checkpoint);
    let run = RetrievalRun {
        checkpoint: stem.clone(),
        n_queries: set.len(),
        acc1: at(1),
        acc5: at(5),
        acc,
    };
    write_run(&layout.run(&format!("retrieval_{stem}")), "retrieval", cfg, &run)?;
    info!("retrieval {stem}: acc@1 {:.4} acc@5 {:.4}", run.acc1, run.acc5);
    Ok(run)
}

/// Representations of every catalog item under an encoder checkpoint.
pub fn item_reps(data: &Data, checkpoint: &Path) -> Result<Embeddings> {
    let (params, _) = load_params(checkpoint)?;
    let state = EncoderState::from_params(&params, 0.0)?;
    Ok(encode(&state.query, &data.features())?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MakeRunDoc {
    pub reps: String,
    pub history: Vec<MakeEpoch>,
}

pub fn make_checkpoint_stem(epoch: usize) -> String {
    format!("make_epoch_{epoch}")
}

/// Pretrains the extractor, saving the parameters after every epoch
/// (including the initialization as epoch 0) and the final ones as `make`.
pub fn make_pretrain_step(cfg: &ExperimentConfig, layout: &Layout, data: &Data, reps_ckpt: &Path) -> Result<MakeRunDoc> {
    let reps = item_reps(data, reps_ckpt)?;
    let run = make_pretrain(&data.train, &data.eval, &reps, &cfg.make)?;
    for (k, snap) in run.snapshots.iter().enumerate() {
        let stem = make_checkpoint_stem(k);
        save_params(&layout.checkpoint(&stem), snap, cfg, &stem)?;
    }
    save_params(&layout.checkpoint("make"), &run.params, cfg, "make")?;
    let doc = MakeRunDoc {
        reps: checkpoint_stem(reps_ckpt),
        history: run.history,
    };
    write_run(&layout.run("make_pretrain"), "make_pretrain", cfg, &doc)?;
    Ok(doc)
}

/// Which extractor a CTR run fuses.
#[derive(Clone, Debug, PartialEq)]
pub enum MakeSource {
    /// Frozen parameters from a checkpoint, with the number of epochs they
    /// were pretrained for when known.
    Frozen(PathBuf, Option<usize>),
    /// Fresh extractor trained together with the CTR model.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtrRunDoc {
    pub tag: String,
    pub reps: Option<String>,
    pub make: Option<String>,
    pub make_epochs: Option<usize>,
    pub report: TrainReport,
    pub curve: Vec<EpochPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketDoc {
    pub tag: String,
    pub base: Variant,
    pub variant: Variant,
    pub rows: Vec<BucketRow>,
}

pub struct CtrRequest<'a> {
    pub variants: &'a [Variant],
    pub reps: Option<&'a Path>,
    pub make: Option<MakeSource>,
    /// Distinguishes runs of the same variant; empty for the main table.
    pub tag: &'a str,
    pub eval_each_epoch: bool,
}

pub fn run_file_stem(variant: Variant, tag: &str) -> String {
    if tag.is_empty() {
        format!("ctr_{variant}")
    } else {
        format!("ctr_{variant}_{tag}")
    }
}

/// Trains each requested variant. When `id_base` is among them, the others
/// get lifts against it and, if the configured bucket variant also ran, the
/// per-frequency-bucket comparison is written too.
pub fn train_ctr_step(cfg: &ExperimentConfig, layout: &Layout, data: &Data, req: &CtrRequest) -> Result<Vec<CtrRunDoc>> {
    let reps = match req.reps {
        Some(p) if req.variants.iter().any(|v| v.needs_reps()) => Some(item_reps(data, p)?),
        _ => None,
    };
    let loaded: Option<(ParamSet, Option<usize>, String)> = match &req.make {
        Some(MakeSource::Frozen(p, e)) => Some((load_params(p)?.0, *e, checkpoint_stem(p))),
        _ => None,
    };
    let attachment = match (&req.make, &loaded) {
        (Some(MakeSource::Joint), _) => Some(MakeAttachment {
            params: None,
            config: &cfg.make,
        }),
        (_, Some((p, _, _))) => Some(MakeAttachment {
            params: Some(p),
            config: &cfg.make,
        }),
        _ => None,
    };
    let categories = data.categories();
    let ctx = CtrContext {
        n_users: data.manifest.n_users,
        categories: &categories,
        n_categories: data.manifest.n_clusters,
        reps: reps.as_ref(),
        make: attachment,
    };
    let hash = cfg.hash();
    let mut order: Vec<Variant> = req.variants.to_vec();
    order.sort_by_key(|&v| v != Variant::IdBase);
    order.dedup();
    let mut base: Option<(TrainReport, Vec<f64>)> = None;
    let mut probs = Vec::new();
    let mut docs = Vec::new();
    for v in order {
        let run = train_ctr(&data.train, &data.eval, v, &cfg.ctr, &ctx, req.eval_each_epoch, &hash)?;
        let mut report = run.report;
        if let Some((b, _)) = &base {
            report = report.with_lifts(b);
        }
        if v == Variant::IdBase {
            base = Some((report.clone(), run.eval_probs.clone()));
        }
        info!("ctr {v}{}: gauc {:.5} auc {:.5}", tag_suffix(req.tag), report.gauc, report.auc);
        let uses_make = v.uses_make();
        let doc = CtrRunDoc {
            tag: req.tag.to_string(),
            reps: req.reps.filter(|_| v.needs_reps()).map(checkpoint_stem),
            make: match (&req.make, &loaded) {
                (Some(MakeSource::Joint), _) if uses_make => Some("joint".into()),
                (_, Some((_, _, stem))) if uses_make => Some(stem.clone()),
                _ => None,
            },
            make_epochs: match &req.make {
                Some(MakeSource::Joint) if uses_make => Some(0),
                Some(MakeSource::Frozen(_, e)) if uses_make => *e,
                _ => None,
            },
            report,
            curve: run.curve,
        };
        write_run(&layout.run(&run_file_stem(v, req.tag)), "ctr", cfg, &doc)?;
        probs.push((v, run.eval_probs));
        docs.push(doc);
    }
    if let Some((_, p_id)) = &base {
        let target = cfg.eval.bucket_variant;
        if let Some((_, p_mm)) = probs.iter().find(|(v, _)| *v == target && target != Variant::IdBase) {
            let freqs = train_frequencies(&data.train, data.items.len());
            let rows = freq_bucket_eval(&freqs, &data.eval, p_id, p_mm, cfg.eval.freq_buckets)?;
            let doc = BucketDoc {
                tag: req.tag.to_string(),
                base: Variant::IdBase,
                variant: target,
                rows,
            };
            let name = if req.tag.is_empty() { "buckets".to_string() } else { format!("buckets_{}", req.tag) };
            write_run(&layout.run(&name), "buckets", cfg, &doc)?;
        }
    }
    Ok(docs)
}

fn tag_suffix(tag: &str) -> String {
    if tag.is_empty() {
        String::new()
    } else {
        format!(" [{tag}]")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveDoc {
    pub variant: Variant,
    pub points: Vec<EpochPoint>,
}

pub fn epoch_sweep_step(
    cfg: &ExperimentConfig,
    layout: &Layout,
    data: &Data,
    variants: &[Variant],
    reps_ckpt: Option<&Path>,
    max_epochs: usize,
) -> Result<Vec<CurveDoc>> {
    let reps = match reps_ckpt {
        Some(p) if variants.iter().any(|v| v.needs_reps()) => Some(item_reps(data, p)?),
        _ => None,
    };
    let categories = data.categories();
    let ctx = CtrContext {
        n_users: data.manifest.n_users,
        categories: &categories,
        n_categories: data.manifest.n_clusters,
        reps: reps.as_ref(),
        make: None,
    };
    let mut out = Vec::new();
    for &v in variants {
        let points = epoch_sweep(&data.train, &data.eval, v, &cfg.ctr, &ctx, max_epochs)?;
        let doc = CurveDoc { variant: v, points };
        write_run(&layout.run(&format!("curve_{v}")), "curve", cfg, &doc)?;
        out.push(doc);
    }
    Ok(out)
}

/// The whole study: data, every pretraining arm, retrieval accuracy for
/// every encoder checkpoint, the extractor, the variant table, the
/// accuracy-vs-lift runs, the extractor-epoch sweep and the epoch curves.
pub fn run_study(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    layout.write_config(cfg)?;
    gen_data(cfg, layout)?;
    let train_t = load_triplets(layout, TRIPLETS_TRAIN)?;
    for arm in Arm::ALL {
        pretrain_arm(cfg, layout, arm, &train_t)?;
    }
    drop(train_t);
    let eval_t = load_triplets(layout, TRIPLETS_EVAL)?;
    for ckpt in encoder_checkpoints(layout)? {
        eval_retrieval(cfg, layout, &ckpt, &eval_t)?;
    }
    drop(eval_t);
    let data = load_data(layout)?;
    let full = layout.checkpoint(&Arm::Full.stem());
    make_pretrain_step(cfg, layout, &data, &full)?;
    let make_final = MakeSource::Frozen(layout.checkpoint("make"), Some(cfg.make.epochs));
    train_ctr_step(
        cfg,
        layout,
        &data,
        &CtrRequest {
            variants: &cfg.eval.variants,
            reps: Some(&full),
            make: Some(make_final),
            tag: "",
            eval_each_epoch: false,
        },
    )?;
    for stem in correlation_checkpoints(cfg) {
        if stem == Arm::Full.stem() && cfg.eval.variants.contains(&cfg.eval.correlation_variant) {
            continue;
        }
        let path = layout.checkpoint(&stem);
        train_ctr_step(
            cfg,
            layout,
            &data,
            &CtrRequest {
                variants: &[cfg.eval.correlation_variant],
                reps: Some(&path),
                make: None,
                tag: &stem,
                eval_each_epoch: false,
            },
        )?;
    }
    for &k in &cfg.eval.make_epochs {
        let source = make_source_for_epochs(layout, k);
        train_ctr_step(
            cfg,
            layout,
            &data,
            &CtrRequest {
                variants: &[cfg.eval.make_sweep_variant],
                reps: Some(&full),
                make: Some(source),
                tag: &format!("make_e{k}"),
                eval_each_epoch: false,
            },
        )?;
    }
    epoch_sweep_step(cfg, layout, &data, &cfg.eval.curve_variants, Some(&full), cfg.eval.curve_epochs)?;
    Ok(())
}

/// Encoder checkpoints whose accuracy is paired with downstream lift.
pub fn correlation_checkpoints(cfg: &ExperimentConfig) -> Vec<String> {
    let mut out: Vec<String> = Arm::ALL.iter().map(|a| a.stem()).collect();
    for &e in &cfg.eval.correlation_epochs {
        if (1..=cfg.pretrain.epochs).contains(&e) {
            out.push(format!("{}_epoch_{e}", Arm::Full.stem()));
        }
    }
    out
}

pub fn make_source_for_epochs(layout: &Layout, epochs: usize) -> MakeSource {
    if epochs == 0 {
        MakeSource::Joint
    } else {
        MakeSource::Frozen(layout.checkpoint(&make_checkpoint_stem(epochs)), Some(epochs))
    }
}
