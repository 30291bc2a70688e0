//! Minibatch assembly, optimizers and the end-to-end training loop.
//!
//! For a minibatch of `n` (scene, caption) pairs the contrastive term uses
//! fused embeddings only:
//!
//! - anchor `i`: `fuse(I_i, T_i)`
//! - positive `i`: `fuse(I_i, T̃_i)` where `T̃_i` is the motion phrase of
//!   `T_i`, or the anchor fusion recomputed when there is none
//! - negatives of `i`: `fuse(I_i, T_j)` for every `j ≠ i`, plus optionally a
//!   verb-substituted copy of `T_i`
//!
//! The segmentation loss is applied to the original pairs only.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{make_augmented_pairs, verb_substitute_negative, AmbiguityFilter, Caption, Lexicon};
use crate::error::{Error, Result};
use crate::fusion::{seg_loss, FusedFeatures, ModelConfig, ModelGrads, ToyModel};
use crate::grid::BinaryMask;
use crate::losses::{
    combined_loss, false_negative_mask, l2_contrastive_loss, mracl_loss, ntxent_loss_with, BatchGrads, ContrastiveBatch,
    LossHyper, LossOutput, LossReport, Term,
};
use crate::metrics::{metrics_csv, MetricsReport};
use crate::numcore::axpy;
use crate::similarity::SimilarityKind;
use crate::synth::{manifest_hash, Dataset, Sample, SceneConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SegOnly,
    SegPlusNtxentCos,
    SegPlusMracl,
    SegPlusL2,
}

impl LossKind {
    pub fn is_contrastive(self) -> bool {
        self != LossKind::SegOnly
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::SegOnly => "seg_only",
            LossKind::SegPlusNtxentCos => "seg_plus_ntxent_cos",
            LossKind::SegPlusMracl => "seg_plus_mracl",
            LossKind::SegPlusL2 => "seg_plus_l2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// What an anchor without a motion phrase uses as its positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveFallback {
    /// Recompute the anchor fusion; the pair sits at similarity 1.
    #[default]
    SelfPositive,
    /// Leave the anchor out of the contrastive term.
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub loss_kind: LossKind,
    pub hyper: LossHyper,
    /// Hinge margin of the L2 baseline.
    pub l2_margin: f64,
    pub filtering_enabled: bool,
    pub augmentation_enabled: bool,
    pub ambiguity_filter: AmbiguityFilter,
    /// Fraction of anchors that get a verb-substituted extra negative.
    pub neg_mix_ratio: f64,
    /// Keep the contrastive gradient out of both encoders.
    pub freeze_encoders: bool,
    /// Add each motion phrase to the training set as a sample of its own.
    pub phrases_as_samples: bool,
    pub positive_fallback: PositiveFallback,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 20,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::default(),
            loss_kind: LossKind::SegPlusMracl,
            hyper: LossHyper::default(),
            l2_margin: 1.0,
            filtering_enabled: true,
            augmentation_enabled: true,
            ambiguity_filter: AmbiguityFilter::default(),
            neg_mix_ratio: 0.0,
            freeze_encoders: false,
            phrases_as_samples: true,
            positive_fallback: PositiveFallback::default(),
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if self.loss_kind.is_contrastive() && self.batch_size < 2 {
            return Err(Error::config("train.batch_size", "must be >= 2 when a contrastive loss is active"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be >= 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be finite and >= 0"));
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                return Err(Error::config("train.optimizer", "Adam betas must lie in [0, 1)"));
            }
            if !(eps > 0.0) {
                return Err(Error::config("train.optimizer", "Adam eps must be > 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.neg_mix_ratio) {
            return Err(Error::config("train.neg_mix_ratio", "must lie in [0, 1]"));
        }
        if !(self.l2_margin > 0.0) {
            return Err(Error::config("train.l2_margin", "must be > 0"));
        }
        self.hyper.validate()?;
        self.model.validate()
    }

    /// Weight actually applied to the contrastive term.
    pub fn effective_alpha(&self) -> f64 {
        if self.loss_kind.is_contrastive() {
            self.hyper.alpha
        } else {
            0.0
        }
    }
}

/// The eight on/off combinations of augmentation, radial loss and
/// false-negative filtering, labelled `aug=A mracl=M filt=F`. With the
/// radial loss off the contrastive term is cosine NT-Xent.
pub fn factor_grid(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mut cells = Vec::with_capacity(8);
    for aug in [false, true] {
        for radial in [false, true] {
            for filt in [false, true] {
                let cfg = TrainConfig {
                    loss_kind: if radial { LossKind::SegPlusMracl } else { LossKind::SegPlusNtxentCos },
                    augmentation_enabled: aug,
                    filtering_enabled: filt,
                    ..base.clone()
                };
                cells.push((format!("aug={} mracl={} filt={}", aug as u8, radial as u8, filt as u8), cfg));
            }
        }
    }
    cells
}

/// SGD or Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Self {
        let moments = if matches!(kind, OptimizerKind::Adam { .. }) { n_params } else { 0 };
        Optimizer {
            kind,
            lr,
            t: 0,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != grad.len() {
            return Err(Error::DimensionMismatch {
                expected: params.len(),
                got: grad.len(),
            });
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => axpy(-self.lr, grad, params),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for k in 0..params.len() {
                    let g = grad[k];
                    self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * g;
                    self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * g * g;
                    let m_hat = self.m[k] / c1;
                    let v_hat = self.v[k] / c2;
                    params[k] -= self.lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// Lexicon and motion labels needed for augmentation and verb substitution.
#[derive(Debug, Clone)]
pub struct TrainContext {
    pub lexicon: Lexicon,
    pub motions: Vec<String>,
}

impl TrainContext {
    pub fn for_scene(cfg: &SceneConfig) -> Self {
        TrainContext {
            lexicon: cfg.lexicon(),
            motions: cfg.motions.clone(),
        }
    }
}

/// A training sample with its encoder inputs precomputed.
#[derive(Debug, Clone)]
pub struct TrainItem<'a> {
    pub sample: &'a Sample,
    /// Caption this item trains on; a motion phrase for phrase samples.
    pub caption: Caption,
    pub channel_mean: Vec<f64>,
    pub counts: Vec<f64>,
    /// Token counts of the motion phrase, when augmentation produced one.
    pub augmented: Option<Vec<f64>>,
}

/// Pairs each sample with its motion phrase (if any) and, under
/// `phrases_as_samples`, appends one item per phrase.
pub fn prepare_items<'a>(
    model: &ToyModel,
    samples: &'a [Sample],
    cfg: &TrainConfig,
    ctx: &TrainContext,
) -> Result<Vec<TrainItem<'a>>> {
    let mut aug: BTreeMap<String, Caption> = BTreeMap::new();
    if cfg.augmentation_enabled {
        let records: Vec<_> = samples.iter().map(Sample::annotation).collect();
        for r in make_augmented_pairs(&records, &ctx.lexicon, cfg.ambiguity_filter)? {
            if let Some(id) = r.sample_id.strip_suffix("#aug") {
                aug.insert(id.to_string(), Caption::parse(&r.caption));
            }
        }
    }
    let mut items = Vec::with_capacity(samples.len() + aug.len());
    for s in samples {
        let phrase = aug.get(&s.sample_id);
        let channel_mean = s.scene.channel_mean();
        items.push(TrainItem {
            sample: s,
            caption: s.caption.clone(),
            channel_mean: channel_mean.clone(),
            counts: model.vocab.counts(&s.caption.tokens)?,
            augmented: phrase.map(|c| model.vocab.counts(&c.tokens)).transpose()?,
        });
        if let Some(c) = phrase.filter(|_| cfg.phrases_as_samples) {
            items.push(TrainItem {
                sample: s,
                caption: c.clone(),
                channel_mean,
                counts: model.vocab.counts(&c.tokens)?,
                augmented: None,
            });
        }
    }
    Ok(items)
}

/// One fusion `fuse(I_image, text)` inside an assembled batch.
#[derive(Debug, Clone)]
struct FusionNode {
    image: usize,
    counts: Vec<f64>,
    fused: FusedFeatures,
}

/// A contrastive batch plus the bookkeeping to backpropagate through it.
#[derive(Debug, Clone)]
pub struct AssembledBatch {
    pub batch: ContrastiveBatch,
    /// Batch-item index of each anchor row.
    pub rows: Vec<usize>,
    /// Rows whose positive is the anchor itself.
    pub self_positive_rows: usize,
    x_img: Vec<Vec<f64>>,
    anchors: Vec<FusionNode>,
    positives: Vec<FusionNode>,
    negatives: Vec<Vec<FusionNode>>,
}

/// Builds anchors, positives and negatives for `items` under `cfg`.
pub fn assemble_batch<R: Rng + ?Sized>(
    model: &ToyModel,
    items: &[&TrainItem<'_>],
    cfg: &TrainConfig,
    ctx: &TrainContext,
    rng: &mut R,
) -> Result<AssembledBatch> {
    let n = items.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let x_img: Vec<Vec<f64>> = items
        .iter()
        .map(|it| model.pooled_feature(&it.channel_mean))
        .collect::<Result<_>>()?;
    let x_txt: Vec<Vec<f64>> = items
        .iter()
        .map(|it| model.text_encoder.matvec(&it.counts))
        .collect::<Result<_>>()?;
    let node = |image: usize, counts: &[f64], txt: &[f64]| -> Result<FusionNode> {
        Ok(FusionNode {
            image,
            counts: counts.to_vec(),
            fused: model.fuse_features(&x_img[image], txt)?,
        })
    };

    // every anchor takes part in false-negative detection, kept rows or not
    let all_anchors: Vec<FusionNode> = (0..n).map(|i| node(i, &items[i].counts, &x_txt[i])).collect::<Result<_>>()?;
    let keep = if cfg.filtering_enabled {
        let z: Vec<&[f64]> = all_anchors.iter().map(|a| a.fused.z.as_slice()).collect();
        false_negative_mask(&z, cfg.hyper.nu)?
    } else {
        vec![vec![true; n]; n]
    };

    let mut out = AssembledBatch {
        batch: ContrastiveBatch {
            anchors: Vec::new(),
            positives: Vec::new(),
            negatives: Vec::new(),
            mask: Vec::new(),
        },
        rows: Vec::new(),
        self_positive_rows: 0,
        x_img: Vec::new(),
        anchors: Vec::new(),
        positives: Vec::new(),
        negatives: Vec::new(),
    };
    for (i, anchor) in all_anchors.into_iter().enumerate() {
        let positive = match &items[i].augmented {
            Some(aug) => node(i, aug, &model.text_encoder.matvec(aug)?)?,
            None => match cfg.positive_fallback {
                PositiveFallback::SelfPositive => {
                    out.self_positive_rows += 1;
                    node(i, &items[i].counts, &x_txt[i])?
                }
                PositiveFallback::Skip => continue,
            },
        };
        let mut negs = Vec::with_capacity(n);
        let mut mask = Vec::with_capacity(n);
        for j in (0..n).filter(|&j| j != i) {
            negs.push(node(i, &items[j].counts, &x_txt[j])?);
            mask.push(keep[i][j]);
        }
        if cfg.neg_mix_ratio > 0.0 && rng.random_bool(cfg.neg_mix_ratio) {
            let caption = &items[i].caption;
            match verb_substitute_negative(caption, &ctx.lexicon, Some(&ctx.motions), rng) {
                Ok(sub) => {
                    let counts = model.vocab.counts(&sub.tokens)?;
                    negs.push(node(i, &counts, &model.text_encoder.matvec(&counts)?)?);
                    mask.push(true);
                }
                Err(Error::NoVerb) => {}
                Err(e) => return Err(e),
            }
        }
        out.batch.anchors.push(anchor.fused.z.clone());
        out.batch.positives.push(positive.fused.z.clone());
        out.batch.negatives.push(negs.iter().map(|v| v.fused.z.clone()).collect());
        out.batch.mask.push(mask);
        out.rows.push(i);
        out.anchors.push(anchor);
        out.positives.push(positive);
        out.negatives.push(negs);
    }
    out.x_img = x_img;
    Ok(out)
}

impl AssembledBatch {
    /// Backpropagates embedding gradients into model gradients.
    fn backward(&self, model: &ToyModel, items: &[&TrainItem<'_>], g: &BatchGrads, grads: &mut ModelGrads) -> Result<()> {
        let d = model.embed_dim();
        let mut grad_x_img = vec![vec![0.0; d]; self.x_img.len()];
        let mut visit = |nd: &FusionNode, gz: &[f64]| -> Result<()> {
            if gz.iter().all(|&v| v == 0.0) {
                return Ok(());
            }
            let gin = model.fuse_features_backward(&nd.fused, gz, grads)?;
            axpy(1.0, &gin[..d], &mut grad_x_img[nd.image]);
            grads.text_encoder.add_outer(1.0, &gin[d..], &nd.counts);
            Ok(())
        };
        for r in 0..self.rows.len() {
            visit(&self.anchors[r], &g.anchors[r])?;
            visit(&self.positives[r], &g.positives[r])?;
            for (nd, gz) in self.negatives[r].iter().zip(&g.negatives[r]) {
                visit(nd, gz)?;
            }
        }
        for (i, gx) in grad_x_img.iter().enumerate() {
            grads.image_encoder.add_outer(1.0, gx, &items[i].channel_mean);
        }
        Ok(())
    }
}

/// Contrastive loss selected by `cfg.loss_kind` on an assembled batch.
pub fn contrastive_loss(batch: &ContrastiveBatch, cfg: &TrainConfig) -> Result<LossOutput> {
    match cfg.loss_kind {
        LossKind::SegOnly => Err(Error::config("train.loss_kind", "seg_only has no contrastive term")),
        LossKind::SegPlusNtxentCos => {
            ntxent_loss_with(batch, cfg.hyper.tau, SimilarityKind::Cosine, cfg.hyper.denominator)
        }
        LossKind::SegPlusMracl => mracl_loss(batch, &cfg.hyper),
        LossKind::SegPlusL2 => l2_contrastive_loss(batch, cfg.l2_margin),
    }
}

/// Both loss terms with gradients over the flat parameter vector.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub report: LossReport,
    pub seg: Term,
    pub contrastive: Term,
    pub grad: Vec<f64>,
}

/// Mean segmentation loss over `items` and its parameter gradient.
pub fn segmentation_term(model: &ToyModel, items: &[&TrainItem<'_>]) -> Result<Term> {
    if items.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = items.len() as f64;
    let mut grads = model.zero_grads();
    let mut total = 0.0;
    for it in items {
        let s = it.sample;
        let (pixels, pooled) = model.encode_image(&s.scene)?;
        let x_txt = model.text_encoder.matvec(&it.counts)?;
        let fused = model.fuse_features(&pooled, &x_txt)?;
        let logits = model.decode(&pixels, &fused.z)?;
        let (loss, mut g) = seg_loss(&logits, &s.target_mask)?;
        total += loss / n;
        g.iter_mut().for_each(|v| *v /= n);
        let mut grad_z = vec![0.0; fused.z.len()];
        model.decode_backward(&s.scene, &pixels, &fused.z, &g, &mut grad_z, &mut grads);
        let d = model.embed_dim();
        let gin = model.fuse_features_backward(&fused, &grad_z, &mut grads)?;
        grads.image_encoder.add_outer(1.0, &gin[..d], &it.channel_mean);
        grads.text_encoder.add_outer(1.0, &gin[d..], &it.counts);
    }
    Ok(Term {
        value: total,
        grad: grads.flatten(),
    })
}

/// Combined objective `L_seg + α·L_contrastive` and its gradient.
pub fn loss_and_grads<R: Rng + ?Sized>(
    model: &ToyModel,
    items: &[&TrainItem<'_>],
    cfg: &TrainConfig,
    ctx: &TrainContext,
    rng: &mut R,
) -> Result<StepOutput> {
    let seg = segmentation_term(model, items)?;
    let mut masked = 0;
    let mut clamps = 0;
    let contrastive = if cfg.loss_kind.is_contrastive() {
        let assembled = assemble_batch(model, items, cfg, ctx, rng)?;
        if assembled.rows.is_empty() {
            Term {
                value: 0.0,
                grad: vec![0.0; seg.grad.len()],
            }
        } else {
            let out = contrastive_loss(&assembled.batch, cfg)?;
            masked = out.masked_negatives;
            clamps = out.clamp_events;
            let mut grads = model.zero_grads();
            assembled.backward(model, items, &out.grads, &mut grads)?;
            if cfg.freeze_encoders {
                grads.zero_encoders();
            }
            Term {
                value: out.value,
                grad: grads.flatten(),
            }
        }
    } else {
        Term {
            value: 0.0,
            grad: vec![0.0; seg.grad.len()],
        }
    };
    let (mut report, grad) = combined_loss(&seg, &contrastive, cfg.effective_alpha())?;
    report.masked_negative_count = masked;
    report.clamp_event_count = clamps;
    Ok(StepOutput {
        report,
        seg,
        contrastive,
        grad,
    })
}

/// One optimizer update on `items`.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut ToyModel,
    optimizer: &mut Optimizer,
    items: &[&TrainItem<'_>],
    cfg: &TrainConfig,
    ctx: &TrainContext,
    rng: &mut R,
) -> Result<LossReport> {
    if !model.is_finite() {
        return Err(Error::non_finite("model parameters before step"));
    }
    let out = loss_and_grads(model, items, cfg, ctx, rng)?;
    let mut params = model.flatten_params();
    optimizer.step(&mut params, &out.grad)?;
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::non_finite("model parameters after step"));
    }
    model.set_params(&params)?;
    Ok(out.report)
}

/// Fused embedding of a sample's own caption.
pub fn embed(model: &ToyModel, sample: &Sample) -> Result<Vec<f64>> {
    let pooled = model.pooled_feature(&sample.scene.channel_mean())?;
    let x_txt = model.encode_text(&sample.caption.tokens)?;
    Ok(model.fuse_features(&pooled, &x_txt)?.z)
}

pub fn predict(model: &ToyModel, sample: &Sample) -> Result<BinaryMask> {
    let (pixels, pooled) = model.encode_image(&sample.scene)?;
    let x_txt = model.encode_text(&sample.caption.tokens)?;
    let z = model.fuse_features(&pooled, &x_txt)?.z;
    Ok(model.decode(&pixels, &z)?.to_mask())
}

pub fn evaluate(model: &ToyModel, samples: &[Sample]) -> Result<MetricsReport> {
    let pairs = samples
        .par_iter()
        .map(|s| Ok((predict(model, s)?, s.target_mask.clone())))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::compute(&pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub test_static: MetricsReport,
    pub test_motion: MetricsReport,
}

impl EpochRecord {
    /// Model-selection score: mean oIoU over both test splits.
    pub fn selection_score(&self) -> f64 {
        0.5 * (self.test_static.oiou + self.test_motion.oiou)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<LossReport>,
    pub epochs: Vec<EpochRecord>,
    pub steps_per_epoch: usize,
    /// Index into `epochs` of the checkpointed model.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }

    /// `split, mIoU, oIoU, P@0.5, P@0.7, P@0.9, n` for the checkpointed model.
    pub fn final_table(&self) -> String {
        let b = self.best();
        metrics_csv([("test_static", &b.test_static), ("test_motion", &b.test_motion)])
    }

    pub fn epochs_csv(&self) -> String {
        let mut out = format!("epoch,mean_loss,{}\n", MetricsReport::CSV_HEADER);
        for e in &self.epochs {
            for (name, r) in [("test_static", &e.test_static), ("test_motion", &e.test_motion)] {
                out.push_str(&format!("{},{:.6},{}\n", e.epoch, e.mean_loss, r.csv_row(name)));
            }
        }
        out
    }

    pub fn steps_csv(&self) -> String {
        let mut out =
            String::from("step,total,seg_term,contrastive_term,alpha,masked_negative_count,clamp_event_count,grad_norm\n");
        for (k, r) in self.steps.iter().enumerate() {
            out.push_str(&format!(
                "{k},{:.9},{:.9},{:.9},{},{},{},{:.9}\n",
                r.total, r.seg_term, r.contrastive_term, r.alpha, r.masked_negative_count, r.clamp_event_count, r.grad_norm
            ));
        }
        out
    }

    pub fn total_masked_negatives(&self) -> usize {
        self.steps.iter().map(|r| r.masked_negative_count).sum()
    }
}

/// Result of a full run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_model: ToyModel,
    pub final_model: ToyModel,
    pub history: TrainHistory,
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn init_model(dataset: &Dataset, cfg: &TrainConfig) -> Result<ToyModel> {
    let scene = dataset.config();
    ToyModel::init(&cfg.model, scene.channels(), scene.vocabulary(), &mut rng_stream(cfg.seed, 0))
}

/// Trains on `dataset.train`, evaluating both test splits after every epoch,
/// and returns the epoch with the best mean oIoU.
pub fn run_training(dataset: &Dataset, cfg: &TrainConfig) -> Result<(ToyModel, TrainHistory)> {
    let out = train(dataset, cfg, None)?;
    Ok((out.best_model, out.history))
}

pub const DIAGNOSTIC_FILE: &str = "nonfinite_state.json";

/// Full training run. With a run directory, a numeric failure leaves the
/// last finite model and the step history there before returning the error.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, run_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ctx = TrainContext::for_scene(dataset.config());
    let mut model = init_model(dataset, cfg)?;
    let items = prepare_items(&model, &dataset.train, cfg, &ctx)?;
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, model.param_count());
    let mut shuffle_rng = rng_stream(cfg.seed, 1);
    let mut step_rng = rng_stream(cfg.seed, 2);

    let n = cfg.batch_size.min(items.len());
    if cfg.loss_kind.is_contrastive() && n < 2 {
        return Err(Error::config("train.batch_size", "training split too small for a contrastive batch"));
    }
    let steps_per_epoch = items.len() / n;
    let mut history = TrainHistory {
        steps: Vec::new(),
        epochs: Vec::new(),
        steps_per_epoch,
        best_epoch: 0,
    };
    let mut best_model = model.clone();
    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for b in 0..steps_per_epoch {
            let batch: Vec<&TrainItem> = order[b * n..(b + 1) * n].iter().map(|&k| &items[k]).collect();
            let before = model.clone();
            match train_step(&mut model, &mut optimizer, &batch, cfg, &ctx, &mut step_rng) {
                Ok(report) => {
                    loss_sum += report.total;
                    history.steps.push(report);
                }
                Err(e @ Error::NonFinite { .. }) => {
                    let Some(dir) = run_dir else { return Err(e) };
                    let path = dir.join(DIAGNOSTIC_FILE);
                    let dump = serde_json::json!({
                        "error": e.to_string(),
                        "epoch": epoch,
                        "step": history.steps.len(),
                        "batch": batch.iter().map(|it| it.sample.sample_id.clone()).collect::<Vec<_>>(),
                        "recent_steps": history.steps.iter().rev().take(20).collect::<Vec<_>>(),
                        "model": before,
                    });
                    std::fs::create_dir_all(dir)?;
                    std::fs::write(&path, serde_json::to_string_pretty(&dump)?)?;
                    return Err(Error::non_finite(format!("{e}; diagnostic state written to {}", path.display())));
                }
                Err(e) => return Err(e),
            }
        }
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / steps_per_epoch.max(1) as f64,
            test_static: evaluate(&model, &dataset.test_static)?,
            test_motion: evaluate(&model, &dataset.test_motion)?,
        };
        if history.epochs.is_empty() || record.selection_score() > history.best().selection_score() {
            history.best_epoch = history.epochs.len();
            best_model = model.clone();
        }
        history.epochs.push(record);
    }
    Ok(TrainOutcome {
        best_model,
        final_model: model,
        history,
    })
}

/// Writes config snapshot, manifest hash, metric tables and checkpoints.
pub fn write_run_dir(dir: &Path, dataset: &Dataset, cfg: &TrainConfig, outcome: &TrainOutcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    std::fs::write(dir.join("manifest_hash.txt"), manifest_hash(&dataset.manifest)? + "\n")?;
    std::fs::write(dir.join("epochs.csv"), outcome.history.epochs_csv())?;
    std::fs::write(dir.join("steps.csv"), outcome.history.steps_csv())?;
    std::fs::write(dir.join("final_metrics.csv"), outcome.history.final_table())?;
    outcome.best_model.save(&dir.join("checkpoint_best.json"))?;
    outcome.final_model.save(&dir.join("checkpoint_final.json"))?;
    Ok(())
}
