//! ID-embedding CTR model and its multimodal variants.
//!
//! Every variant shares the ID side (user, item and category embeddings plus
//! target attention over the behavior item embeddings) and appends its own
//! multimodal block before a PReLU MLP head. Rows of the first head layer
//! that read multimodal inputs start at zero, and every other tensor is drawn
//! from a generator keyed by its name, so at initialization every variant
//! computes exactly the ID baseline function.

use std::fmt;
use std::str::FromStr;

use mmrec_tensor::{sigmoid, Adam, AdamConfig, Graph, NodeId, ParamSet, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::batch::{check_reps, gather, pack, Packed};
use crate::error::{CoreError, Result};
use crate::make::{extract_knowledge, init_make, make_batch_nodes, MakeConfig};
use crate::metrics::{auc, gauc, logloss};
use crate::nn::{din_attention, init_din, init_mlp_rows, mlp, normal_tensor, rng_for};
use crate::reps::{dot, Embeddings};
use crate::simtier::{simtier_batch, simtier_feature, TierScaling};
use crate::synth::ImpressionRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    IdBase,
    Vector,
    Simscore,
    Simtier,
    Make,
    SimtierMake,
    /// Target representation plus attention over behavior representations,
    /// without any ID feature.
    MmOnly,
}

impl Variant {
    /// The ladder reported in the variant comparison table.
    pub const LADDER: [Variant; 6] = [
        Variant::IdBase,
        Variant::Vector,
        Variant::Simscore,
        Variant::Simtier,
        Variant::Make,
        Variant::SimtierMake,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::IdBase => "id_base",
            Variant::Vector => "vector",
            Variant::Simscore => "simscore",
            Variant::Simtier => "simtier",
            Variant::Make => "make",
            Variant::SimtierMake => "simtier_make",
            Variant::MmOnly => "mm_only",
        }
    }

    pub fn has_ids(self) -> bool {
        self != Variant::MmOnly
    }

    pub fn needs_reps(self) -> bool {
        self != Variant::IdBase
    }

    pub fn uses_make(self) -> bool {
        matches!(self, Variant::Make | Variant::SimtierMake)
    }

    pub fn blocks(self) -> Vec<Block> {
        let mut b = if self.has_ids() {
            vec![Block::Ids, Block::IdAttention]
        } else {
            vec![]
        };
        b.extend(match self {
            Variant::IdBase => vec![],
            Variant::Vector => vec![Block::TargetRep, Block::MeanRep],
            Variant::Simscore => vec![Block::SimScores],
            Variant::Simtier => vec![Block::SimTier],
            Variant::Make => vec![Block::Knowledge],
            Variant::SimtierMake => vec![Block::SimTier, Block::Knowledge],
            Variant::MmOnly => vec![Block::TargetRep, Block::RepAttention],
        });
        b
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        Variant::LADDER
            .into_iter()
            .chain([Variant::MmOnly])
            .find(|v| v.name() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown variant {s:?}")))
    }
}

/// One segment of the head input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    /// User, item and category embeddings.
    Ids,
    /// Target attention over behavior item embeddings.
    IdAttention,
    TargetRep,
    /// Mean of behavior representations.
    MeanRep,
    /// Similarity of each behavior position to the target, zero padded.
    SimScores,
    SimTier,
    /// Extractor attention output plus its hidden activations.
    Knowledge,
    /// Target attention over behavior representations.
    RepAttention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CtrConfig {
    pub d_id: usize,
    pub oov_buckets: usize,
    pub att_hidden: usize,
    pub head: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub l_max: usize,
    pub tiers: usize,
    pub tier_scaling: TierScaling,
    /// Use the unshifted tier index rule, which drops top-tier scores.
    pub unshifted_tiers: bool,
    pub emb_std: f32,
    pub seed: u64,
}

impl Default for CtrConfig {
    fn default() -> Self {
        Self {
            d_id: 16,
            oov_buckets: 64,
            att_hidden: 32,
            head: vec![128, 64, 1],
            epochs: 1,
            batch_size: 256,
            lr: 1e-3,
            l_max: 50,
            tiers: 20,
            tier_scaling: TierScaling::Normalized,
            unshifted_tiers: false,
            emb_std: 0.05,
            seed: 0,
        }
    }
}

impl CtrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_id == 0 || self.oov_buckets == 0 || self.tiers == 0 || self.batch_size == 0 {
            return Err(CoreError::Config("ctr sizes must be positive".into()));
        }
        if self.head.last() != Some(&1) || self.head.contains(&0) {
            return Err(CoreError::Config("ctr.head must end in a width-1 layer".into()));
        }
        Ok(())
    }
}

/// Embedding rows for ids `0..vocab` followed by `oov` hashed buckets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdSpace {
    pub vocab: usize,
    pub oov: usize,
}

impl IdSpace {
    pub fn rows(&self) -> usize {
        self.vocab + self.oov
    }

    pub fn index(&self, id: i64) -> usize {
        if id >= 0 && (id as usize) < self.vocab {
            return id as usize;
        }
        // splitmix64 finalizer
        let mut z = (id as u64).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
        self.vocab + (z % self.oov as u64) as usize
    }
}

/// Everything a variant may read besides the records themselves.
#[derive(Clone, Copy)]
pub struct CtrContext<'a> {
    pub n_users: usize,
    /// Category of every catalog item, indexed by item id.
    pub categories: &'a [u64],
    pub n_categories: usize,
    pub reps: Option<&'a Embeddings>,
    pub make: Option<MakeAttachment<'a>>,
}

/// Extractor used by the knowledge variants. `params = None` trains a freshly
/// initialized extractor jointly with the model.
#[derive(Clone, Copy)]
pub struct MakeAttachment<'a> {
    pub params: Option<&'a ParamSet>,
    pub config: &'a MakeConfig,
}

impl MakeAttachment<'_> {
    fn joint(&self) -> bool {
        self.params.is_none() || self.config.fine_tune
    }
}

/// Resolved input layout of one variant.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePlan {
    pub variant: Variant,
    pub blocks: Vec<(Block, usize)>,
}

impl FeaturePlan {
    pub fn width(&self) -> usize {
        self.blocks.iter().map(|b| b.1).sum()
    }

    /// Width of the ID part at the front of the input.
    pub fn id_width(&self) -> usize {
        self.blocks
            .iter()
            .take_while(|b| matches!(b.0, Block::Ids | Block::IdAttention))
            .map(|b| b.1)
            .sum()
    }
}

pub fn plan(variant: Variant, cfg: &CtrConfig, d_rep: usize, make: &MakeConfig) -> FeaturePlan {
    let blocks = variant
        .blocks()
        .into_iter()
        .map(|b| {
            let w = match b {
                Block::Ids => 3 * cfg.d_id,
                Block::IdAttention => cfg.d_id,
                Block::TargetRep | Block::MeanRep | Block::RepAttention => d_rep,
                Block::SimScores => cfg.l_max,
                Block::SimTier => cfg.tiers,
                Block::Knowledge => make.knowledge_width(d_rep),
            };
            (b, w)
        })
        .collect();
    FeaturePlan { variant, blocks }
}

/// A variant's parameters plus what is needed to run it.
#[derive(Clone, Debug)]
pub struct CtrModel {
    pub plan: FeaturePlan,
    pub params: ParamSet,
    pub users: IdSpace,
    pub items: IdSpace,
    pub cats: IdSpace,
}

const EMB_USER: &str = "emb.user";
const EMB_ITEM: &str = "emb.item";
const EMB_CAT: &str = "emb.cat";
const ID_ATT: &str = "din";
const REP_ATT: &str = "mm.att";
const HEAD: &str = "head";

fn rep_dim(ctx: &CtrContext) -> usize {
    ctx.reps.map_or(0, Embeddings::dim)
}

fn default_make() -> &'static MakeConfig {
    static DEFAULT: std::sync::OnceLock<MakeConfig> = std::sync::OnceLock::new();
    DEFAULT.get_or_init(MakeConfig::default)
}

pub fn init_model(variant: Variant, cfg: &CtrConfig, ctx: &CtrContext) -> Result<CtrModel> {
    cfg.validate()?;
    if variant.needs_reps() && ctx.reps.is_none() {
        return Err(CoreError::Config(format!("variant {variant} needs item representations")));
    }
    if variant.uses_make() && ctx.make.is_none() {
        return Err(CoreError::Config(format!("variant {variant} needs an extractor")));
    }
    let make_cfg = ctx.make.map_or(default_make(), |m| m.config);
    let plan = plan(variant, cfg, rep_dim(ctx), make_cfg);
    let users = IdSpace { vocab: ctx.n_users, oov: cfg.oov_buckets };
    let items = IdSpace { vocab: ctx.categories.len(), oov: cfg.oov_buckets };
    let cats = IdSpace { vocab: ctx.n_categories, oov: cfg.oov_buckets };
    let mut ps = ParamSet::new();
    let s = cfg.seed;
    if variant.has_ids() {
        ps.insert(EMB_USER, normal_tensor(s, EMB_USER, &[users.rows(), cfg.d_id], cfg.emb_std));
        ps.insert(EMB_ITEM, normal_tensor(s, EMB_ITEM, &[items.rows(), cfg.d_id], cfg.emb_std));
        ps.insert(EMB_CAT, normal_tensor(s, EMB_CAT, &[cats.rows(), cfg.d_id], cfg.emb_std));
        init_din(&mut ps, s, ID_ATT, cfg.d_id, cfg.att_hidden);
    }
    if plan.blocks.iter().any(|b| b.0 == Block::RepAttention) {
        init_din(&mut ps, s, REP_ATT, rep_dim(ctx), cfg.att_hidden);
    }
    if let Some(m) = ctx.make.filter(|m| variant.uses_make() && m.joint()) {
        let init = match m.params {
            Some(p) => p.clone(),
            None => init_make(rep_dim(ctx), m.config),
        };
        ps.extend(init);
    }
    let random_rows = if variant.has_ids() { plan.id_width() } else { plan.width() };
    init_mlp_rows(&mut ps, s, HEAD, plan.width(), &cfg.head, random_rows);
    Ok(CtrModel {
        plan,
        params: ps,
        users,
        items,
        cats,
    })
}

fn category_of(ctx: &CtrContext, item: usize) -> i64 {
    ctx.categories.get(item).map_or(-1, |&c| c as i64)
}

fn input(g: &mut Graph, rows: usize, cols: usize, data: Vec<f32>) -> Result<NodeId> {
    Ok(g.input(Tensor::new(vec![rows, cols], data)?))
}

/// Builds the head input `[B, plan.width()]` for a batch.
pub fn head_input(
    g: &mut Graph,
    model: &CtrModel,
    ps: &ParamSet,
    batch: &Packed,
    ctx: &CtrContext,
    cfg: &CtrConfig,
) -> Result<NodeId> {
    let b = batch.len();
    let mut parts = Vec::with_capacity(model.plan.blocks.len() + 2);
    let mut item_table = None;
    for &(block, width) in &model.plan.blocks {
        match block {
            Block::Ids => {
                let ut = g.param_from(ps, EMB_USER)?;
                let it = g.param_from(ps, EMB_ITEM)?;
                let ct = g.param_from(ps, EMB_CAT)?;
                item_table = Some(it);
                let u: Vec<usize> = batch.users.iter().map(|&u| model.users.index(u as i64)).collect();
                let i: Vec<usize> = batch.targets.iter().map(|&t| model.items.index(t as i64)).collect();
                let c: Vec<usize> = batch
                    .targets
                    .iter()
                    .map(|&t| model.cats.index(category_of(ctx, t)))
                    .collect();
                parts.push(g.gather_rows(ut, u)?);
                parts.push(g.gather_rows(it, i)?);
                parts.push(g.gather_rows(ct, c)?);
            }
            Block::IdAttention => {
                let it = match item_table {
                    Some(t) => t,
                    None => g.param_from(ps, EMB_ITEM)?,
                };
                let seq_idx = batch.seq_items.iter().map(|&i| model.items.index(i as i64)).collect();
                let tgt_idx = batch.targets.iter().map(|&i| model.items.index(i as i64)).collect();
                let seq = g.gather_rows(it, seq_idx)?;
                let tgt = g.gather_rows(it, tgt_idx)?;
                parts.push(din_attention(g, ps, ID_ATT, seq, tgt, &batch.segs)?.pooled);
            }
            Block::TargetRep => {
                let reps = ctx.reps.expect("checked at init");
                parts.push(g.input(gather(reps, &batch.targets)?));
            }
            Block::MeanRep => {
                let reps = ctx.reps.expect("checked at init");
                let d = reps.dim();
                let mut data = vec![0.0f32; b * d];
                for r in 0..b {
                    let range = batch.segs.range(r);
                    let n = range.len();
                    let acc = &mut data[r * d..(r + 1) * d];
                    for p in range {
                        for (a, &v) in acc.iter_mut().zip(reps.row(batch.seq_items[p])) {
                            *a += v / n as f32;
                        }
                    }
                }
                parts.push(input(g, b, d, data)?);
            }
            Block::SimScores => {
                let reps = ctx.reps.expect("checked at init");
                let mut data = vec![0.0f32; b * width];
                for r in 0..b {
                    let t = reps.row(batch.targets[r]);
                    for (j, p) in batch.segs.range(r).take(width).enumerate() {
                        data[r * width + j] = dot(t, reps.row(batch.seq_items[p])).clamp(-1.0, 1.0);
                    }
                }
                parts.push(input(g, b, width, data)?);
            }
            Block::SimTier => {
                let reps = ctx.reps.expect("checked at init");
                let counts = simtier_batch(
                    reps,
                    &batch.targets,
                    &batch.segs,
                    &batch.seq_items,
                    cfg.tiers,
                    cfg.unshifted_tiers,
                )?;
                let mut data = Vec::with_capacity(b * width);
                for (r, c) in counts.iter().enumerate() {
                    data.extend(simtier_feature(c, batch.segs.range(r).len(), cfg.tier_scaling));
                }
                parts.push(input(g, b, width, data)?);
            }
            Block::Knowledge => {
                let reps = ctx.reps.expect("checked at init");
                let m = ctx.make.expect("checked at init");
                if m.joint() {
                    let n = make_batch_nodes(g, ps, reps, batch)?;
                    let mut kv = vec![n.v_make];
                    kv.extend(&n.hidden);
                    parts.push(g.concat(&kv)?);
                } else {
                    let kv = extract_knowledge(m.params.expect("frozen params"), reps, batch)?;
                    parts.push(input(g, b, kv.dim(), kv.into_data())?);
                }
            }
            Block::RepAttention => {
                let reps = ctx.reps.expect("checked at init");
                let seq = g.input(gather(reps, &batch.seq_items)?);
                let tgt = g.input(gather(reps, &batch.targets)?);
                parts.push(din_attention(g, ps, REP_ATT, seq, tgt, &batch.segs)?.pooled);
            }
        }
    }
    let x = g.concat(&parts)?;
    let got = g.value(x).cols();
    if got != model.plan.width() {
        return Err(CoreError::Dim {
            op: "assemble_features",
            expected: model.plan.width(),
            got,
        });
    }
    Ok(x)
}

/// Logit node `[B, 1]` for a batch.
pub fn forward(
    g: &mut Graph,
    model: &CtrModel,
    ps: &ParamSet,
    batch: &Packed,
    ctx: &CtrContext,
    cfg: &CtrConfig,
) -> Result<NodeId> {
    let x = head_input(g, model, ps, batch, ctx, cfg)?;
    let (_, logit) = mlp(g, ps, HEAD, cfg.head.len(), x)?;
    Ok(logit)
}

/// Head input rows for a batch, exactly as the model sees them.
pub fn assemble_features(
    model: &CtrModel,
    batch: &Packed,
    ctx: &CtrContext,
    cfg: &CtrConfig,
) -> Result<Embeddings> {
    let mut g = Graph::new();
    let x = head_input(&mut g, model, &model.params, batch, ctx, cfg)?;
    Embeddings::new(g.value(x).cols(), g.value(x).data().to_vec())
}

pub fn predict(
    model: &CtrModel,
    records: &[ImpressionRecord],
    ctx: &CtrContext,
    cfg: &CtrConfig,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(2048) {
        let batch = pack(chunk, cfg.l_max);
        let mut g = Graph::new();
        let logit = forward(&mut g, model, &model.params, &batch, ctx, cfg)?;
        out.extend(g.value(logit).data().iter().map(|&z| sigmoid(z as f64)));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub gauc: f64,
    pub auc: f64,
    pub logloss: f64,
}

pub fn evaluate(probs: &[f64], records: &[ImpressionRecord]) -> Result<EvalMetrics> {
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    let users: Vec<u64> = records.iter().map(|r| r.user_id).collect();
    Ok(EvalMetrics {
        gauc: gauc(probs, &labels, &users)?,
        auc: auc(probs, &labels)?,
        logloss: logloss(probs, &labels)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lifts {
    pub gauc: f64,
    pub auc: f64,
    pub logloss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: Variant,
    pub gauc: f64,
    pub auc: f64,
    pub logloss: f64,
    /// `metric(variant) - metric(id_base)`, when the baseline is known.
    pub lifts: Option<Lifts>,
    pub seed: u64,
    pub config_hash: String,
    pub epochs: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub train_loss: f64,
}

impl TrainReport {
    pub fn with_lifts(mut self, base: &TrainReport) -> Self {
        self.lifts = Some(Lifts {
            gauc: self.gauc - base.gauc,
            auc: self.auc - base.auc,
            logloss: self.logloss - base.logloss,
        });
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochPoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub gauc: f64,
    pub auc: f64,
    pub logloss: f64,
}

pub struct CtrRun {
    pub model: CtrModel,
    pub report: TrainReport,
    /// Held-out metrics after every epoch (only the last when not requested).
    pub curve: Vec<EpochPoint>,
    /// How many times each training record was used.
    pub visits: Vec<u32>,
    pub eval_probs: Vec<f64>,
}

/// Trains `variant` for `cfg.epochs` shuffled passes over `train` and reports
/// on `eval`. With `eval_each_epoch` the held-out metrics are recorded after
/// every pass.
pub fn train_ctr(
    train: &[ImpressionRecord],
    eval: &[ImpressionRecord],
    variant: Variant,
    cfg: &CtrConfig,
    ctx: &CtrContext,
    eval_each_epoch: bool,
    config_hash: &str,
) -> Result<CtrRun> {
    let mut model = init_model(variant, cfg, ctx)?;
    if let Some(reps) = ctx.reps.filter(|_| variant.needs_reps()) {
        check_reps(train, reps)?;
        check_reps(eval, reps)?;
    }
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    let mut rng = rng_for(cfg.seed, "ctr.shuffle");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut visits = vec![0u32; train.len()];
    let mut curve = Vec::new();
    let mut last_loss = f64::NAN;
    let mut eval_probs = Vec::new();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            for &i in chunk {
                visits[i] += 1;
            }
            let batch = pack(chunk.iter().map(|&i| &train[i]), cfg.l_max);
            let mut g = Graph::new();
            let logit = forward(&mut g, &model, &model.params, &batch, ctx, cfg)?;
            let loss = g.bce_with_logits(logit, &batch.labels_as::<f32>())?;
            let lv = g.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(CoreError::Diverged {
                    epoch,
                    step,
                    detail: format!("{variant}: non-finite loss, last mean loss {last_loss}"),
                });
            }
            let grads = g.backward(loss)?;
            adam.step(&mut model.params, &grads)?;
            sum += lv * batch.len() as f64;
            n += batch.len();
        }
        last_loss = sum / n.max(1) as f64;
        if eval_each_epoch || epoch == cfg.epochs {
            eval_probs = predict(&model, eval, ctx, cfg)?;
            let m = evaluate(&eval_probs, eval)?;
            log::info!("{variant} epoch {epoch}: loss {last_loss:.5} gauc {:.5}", m.gauc);
            curve.push(EpochPoint {
                epoch,
                train_loss: last_loss,
                gauc: m.gauc,
                auc: m.auc,
                logloss: m.logloss,
            });
        }
    }
    if cfg.epochs == 0 {
        eval_probs = predict(&model, eval, ctx, cfg)?;
    }
    let m = evaluate(&eval_probs, eval)?;
    let report = TrainReport {
        variant,
        gauc: m.gauc,
        auc: m.auc,
        logloss: m.logloss,
        lifts: None,
        seed: cfg.seed,
        config_hash: config_hash.to_string(),
        epochs: cfg.epochs,
        n_train: train.len(),
        n_eval: eval.len(),
        train_loss: last_loss,
    };
    Ok(CtrRun {
        model,
        report,
        curve,
        visits,
        eval_probs,
    })
}

/// Held-out metrics after each of `max_epochs` continued passes.
pub fn epoch_sweep(
    train: &[ImpressionRecord],
    eval: &[ImpressionRecord],
    variant: Variant,
    cfg: &CtrConfig,
    ctx: &CtrContext,
    max_epochs: usize,
) -> Result<Vec<EpochPoint>> {
    if max_epochs == 0 {
        return Err(CoreError::Config("epoch sweep needs max_epochs >= 1".into()));
    }
    let cfg = CtrConfig {
        epochs: max_epochs,
        ..cfg.clone()
    };
    Ok(train_ctr(train, eval, variant, &cfg, ctx, true, "")?.curve)
}

/// Number of training records targeting each item id below `n_items`.
pub fn train_frequencies(train: &[ImpressionRecord], n_items: usize) -> Vec<u64> {
    let mut f = vec![0u64; n_items];
    for r in train {
        if let Some(c) = f.get_mut(r.target_item_id as usize) {
            *c += 1;
        }
    }
    f
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    /// 1 = least frequent.
    pub bucket: usize,
    pub n_items: usize,
    pub n_records: usize,
    pub min_freq: u64,
    pub max_freq: u64,
    pub auc_id: Option<f64>,
    pub auc_mm: Option<f64>,
    pub logloss_id: Option<f64>,
    pub logloss_mm: Option<f64>,
    /// `|AUC_mm - AUC_id| / AUC_id`.
    pub auc_lift: Option<f64>,
    /// `|LogLoss_mm - LogLoss_id| / LogLoss_id`.
    pub logloss_lift: Option<f64>,
}

/// Splits all items into `n_buckets` equal groups by ascending training
/// frequency (ties by item id) and compares two models' held-out AUC and log
/// loss on the records targeting each group. Buckets without a defined
/// metric report `None`.
pub fn freq_bucket_eval(
    freqs: &[u64],
    eval: &[ImpressionRecord],
    p_id: &[f64],
    p_mm: &[f64],
    n_buckets: usize,
) -> Result<Vec<BucketRow>> {
    if p_id.len() != eval.len() || p_mm.len() != eval.len() {
        return Err(CoreError::Dim {
            op: "freq_bucket_eval",
            expected: eval.len(),
            got: p_id.len().min(p_mm.len()),
        });
    }
    if n_buckets == 0 {
        return Err(CoreError::Config("n_buckets must be positive".into()));
    }
    let n = freqs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| freqs[a].cmp(&freqs[b]).then(a.cmp(&b)));
    let mut bucket_of = vec![0usize; n];
    let (base, extra) = (n / n_buckets, n % n_buckets);
    let mut bounds = Vec::with_capacity(n_buckets);
    let mut start = 0;
    for b in 0..n_buckets {
        let len = base + usize::from(b < extra);
        for &i in &order[start..start + len] {
            bucket_of[i] = b;
        }
        bounds.push(start..start + len);
        start += len;
    }
    let mut rows = Vec::with_capacity(n_buckets);
    for (b, range) in bounds.into_iter().enumerate() {
        let idx: Vec<usize> = (0..eval.len())
            .filter(|&r| bucket_of.get(eval[r].target_item_id as usize) == Some(&b))
            .collect();
        let labels: Vec<u8> = idx.iter().map(|&r| eval[r].label).collect();
        let pi: Vec<f64> = idx.iter().map(|&r| p_id[r]).collect();
        let pm: Vec<f64> = idx.iter().map(|&r| p_mm[r]).collect();
        let (auc_id, auc_mm) = (auc(&pi, &labels).ok(), auc(&pm, &labels).ok());
        let (ll_id, ll_mm) = (logloss(&pi, &labels).ok(), logloss(&pm, &labels).ok());
        let rel = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(id), Some(mm)) if id != 0.0 => Some((mm - id).abs() / id),
            _ => None,
        };
        let items = &order[range];
        rows.push(BucketRow {
            bucket: b + 1,
            n_items: items.len(),
            n_records: idx.len(),
            min_freq: items.first().map_or(0, |&i| freqs[i]),
            max_freq: items.last().map_or(0, |&i| freqs[i]),
            auc_id,
            auc_mm,
            logloss_id: ll_id,
            logloss_mm: ll_mm,
            auc_lift: rel(auc_id, auc_mm),
            logloss_lift: rel(ll_id, ll_mm),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oov_ids_hash_into_stable_buckets() {
        let s = IdSpace { vocab: 10, oov: 4 };
        assert_eq!(s.index(3), 3);
        for id in [-1i64, 10, 12345, i64::MAX] {
            let i = s.index(id);
            assert!((10..14).contains(&i));
            assert_eq!(i, s.index(id));
        }
    }

    #[test]
    fn widths_follow_block_arithmetic() {
        let cfg = CtrConfig::default();
        let mk = MakeConfig::default();
        assert_eq!(plan(Variant::IdBase, &cfg, 32, &mk).width(), 4 * 16);
        assert_eq!(plan(Variant::Simtier, &cfg, 32, &mk).width(), 64 + 20);
        assert_eq!(plan(Variant::Vector, &cfg, 32, &mk).width(), 64 + 64);
        assert_eq!(plan(Variant::Simscore, &cfg, 32, &mk).width(), 64 + 50);
        assert_eq!(plan(Variant::Make, &cfg, 32, &mk).width(), 64 + 144);
        assert_eq!(plan(Variant::SimtierMake, &cfg, 32, &mk).width(), 64 + 20 + 144);
        assert_eq!(plan(Variant::MmOnly, &cfg, 32, &mk).width(), 64);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::LADDER.into_iter().chain([Variant::MmOnly]) {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("nope".parse::<Variant>().is_err());
    }
}
