//! Episodic training over the external shape memory, the two-stage few-shot
//! protocol, test-time support insertion, evaluation, and run reports.
//!
//! A training epoch flushes the memory, then for every batch: encodes the
//! depth views, retrieves the top-k nearest stored shapes, fuses them into a
//! prior, decodes the conditioned embedding, inserts hard samples back into
//! the memory, and takes one optimizer step on the combined loss. The
//! two-stage protocol trains on base categories, optionally finetunes on the
//! few-shot support set, and evaluates held-out queries with the support set
//! loaded into the memory.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{s, Array2, Array3, Array4, Array5, ArrayViewMutD};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::SamplePair;
use crate::error::{MpcnError, Result};
use crate::losses::{bce_batch, contrastive_3d_loss, total_loss, ContrastBatch};
use crate::memory::MemoryBank;
use crate::netblocks::{
    probs_row_to_volume, ImageEncoder, ImageEncoderCache, ModelConfig, ShapeDecoder,
    ShapeDecoderCache, ShapeEncoder, ShapeEncoderCache,
};
use crate::nn::{zero_grads, Module, ParamViewMut};
use crate::optim::Adam;
use crate::prior::{concat_condition, split_condition_grad, PriorCache, PriorFusion};
use crate::voxelcore::{iou, voxel_distance, VoxelGrid};

/// Which leg of the two-stage protocol an episode belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Base,
    Finetune,
    Eval,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Finetune => "finetune",
            Stage::Eval => "eval",
        }
    }
}

/// Component switches for the ablation rows of the evaluation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ablation {
    #[default]
    None,
    /// Decode from the image embedding alone; the memory is never used.
    NoPrior,
    /// Replace attention weighting with a uniform average of retrieved shapes.
    AverageFusion,
    /// Give every positive pair weight 1 instead of the distance-based weight.
    UniformNce,
    /// Drop the contrastive term entirely.
    NoNce,
    /// Skip the support-set finetuning stage.
    NoFinetune,
}

impl Ablation {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(match text {
            "none" => Ablation::None,
            "no-prior" => Ablation::NoPrior,
            "average" => Ablation::AverageFusion,
            "uniform-nce" => Ablation::UniformNce,
            "no-nce" => Ablation::NoNce,
            "no-finetune" => Ablation::NoFinetune,
            _ => {
                return Err(MpcnError::config(format!(
                    "unknown ablation {text:?}; expected none, no-prior, average, \
                     uniform-nce, no-nce, or no-finetune"
                )))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoPrior => "no-prior",
            Ablation::AverageFusion => "average",
            Ablation::UniformNce => "uniform-nce",
            Ablation::NoNce => "no-nce",
            Ablation::NoFinetune => "no-finetune",
        }
    }
}

/// Hyperparameters of a single training or evaluation stage.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    pub stage: Stage,
    pub batch: usize,
    pub lr: f64,
    pub delta: f64,
    pub gamma: f64,
    pub k: usize,
    pub tau: f64,
    pub capacity: usize,
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    pub shots: usize,
    pub ablation: Ablation,
    pub iou_threshold: f64,
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(MpcnError::config("batch size must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(MpcnError::config("learning rate must be positive"));
        }
        if !(self.delta >= 0.0) {
            return Err(MpcnError::config("delta must be nonnegative"));
        }
        if !(self.gamma > 0.0) {
            return Err(MpcnError::config("gamma must be positive"));
        }
        if self.k == 0 {
            return Err(MpcnError::config("k must be at least 1"));
        }
        if !(self.tau > 0.0) {
            return Err(MpcnError::config("tau must be positive"));
        }
        if self.capacity == 0 {
            return Err(MpcnError::config("memory capacity must be at least 1"));
        }
        if !(self.lambda >= 0.0) {
            return Err(MpcnError::config("lambda must be nonnegative"));
        }
        if self.lambda > 0.0 && self.delta == 0.0 {
            return Err(MpcnError::config(
                "a positive lambda needs a positive delta so contrastive positives exist",
            ));
        }
        if self.epochs == 0 {
            return Err(MpcnError::config("epochs must be at least 1"));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(MpcnError::config("IoU threshold must lie strictly in (0, 1)"));
        }
        Ok(())
    }

    /// Stable key-value rendering of every field, used in reports.
    pub fn echo(&self) -> Vec<(String, String)> {
        vec![
            ("stage".into(), self.stage.name().into()),
            ("batch".into(), self.batch.to_string()),
            ("lr".into(), self.lr.to_string()),
            ("delta".into(), self.delta.to_string()),
            ("gamma".into(), self.gamma.to_string()),
            ("k".into(), self.k.to_string()),
            ("tau".into(), self.tau.to_string()),
            ("capacity".into(), self.capacity.to_string()),
            ("lambda".into(), self.lambda.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("shots".into(), self.shots.to_string()),
            ("ablation".into(), self.ablation.name().into()),
            ("iou_threshold".into(), self.iou_threshold.to_string()),
        ]
    }
}

/// Hyperparameters of a full two-stage run; stage-specific episode configs
/// are derived through [`ProtocolConfig::episode`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub batch: usize,
    pub lr: f64,
    pub delta: f64,
    pub gamma: f64,
    pub k: usize,
    pub tau: f64,
    pub lambda: f64,
    pub train_capacity: usize,
    pub test_capacity: usize,
    pub base_epochs: usize,
    pub finetune_epochs: usize,
    pub iou_threshold: f64,
    pub shots: usize,
    pub seed: u64,
    pub ablation: Ablation,
}

impl ProtocolConfig {
    /// Reference hyperparameters for the desk-scale setup.
    pub fn desk_defaults(seed: u64, shots: usize) -> Self {
        ProtocolConfig {
            batch: 16,
            lr: 1e-4,
            delta: 0.1,
            gamma: 10.0,
            k: 5,
            tau: 0.1,
            lambda: 1e-3,
            train_capacity: 4000,
            test_capacity: 200,
            base_epochs: 100,
            finetune_epochs: 20,
            iou_threshold: 0.3,
            shots,
            seed,
            ablation: Ablation::None,
        }
    }

    /// Episode view of one stage: training stages use the training memory
    /// capacity, evaluation uses the smaller test capacity.
    pub fn episode(&self, stage: Stage) -> EpisodeConfig {
        let (capacity, epochs) = match stage {
            Stage::Base => (self.train_capacity, self.base_epochs),
            Stage::Finetune => (self.train_capacity, self.finetune_epochs),
            Stage::Eval => (self.test_capacity, 1),
        };
        EpisodeConfig {
            stage,
            batch: self.batch,
            lr: self.lr,
            delta: self.delta,
            gamma: self.gamma,
            k: self.k,
            tau: self.tau,
            capacity,
            lambda: self.lambda,
            epochs,
            seed: self.seed,
            shots: self.shots,
            ablation: self.ablation,
            iou_threshold: self.iou_threshold,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_epochs == 0 {
            return Err(MpcnError::config("base stage needs at least one epoch"));
        }
        self.episode(Stage::Base).validate()?;
        self.episode(Stage::Eval).validate()
    }

    pub fn echo(&self) -> Vec<(String, String)> {
        vec![
            ("batch".into(), self.batch.to_string()),
            ("lr".into(), self.lr.to_string()),
            ("delta".into(), self.delta.to_string()),
            ("gamma".into(), self.gamma.to_string()),
            ("k".into(), self.k.to_string()),
            ("tau".into(), self.tau.to_string()),
            ("lambda".into(), self.lambda.to_string()),
            ("train_capacity".into(), self.train_capacity.to_string()),
            ("test_capacity".into(), self.test_capacity.to_string()),
            ("base_epochs".into(), self.base_epochs.to_string()),
            ("finetune_epochs".into(), self.finetune_epochs.to_string()),
            ("iou_threshold".into(), self.iou_threshold.to_string()),
            ("shots".into(), self.shots.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("ablation".into(), self.ablation.name().into()),
        ]
    }
}

/// The full reconstruction model: image encoder, shape encoder for stored
/// volumes, attention-based prior fusion, and the voxel decoder.
#[derive(Debug, Clone)]
pub struct MpcnModel {
    config: ModelConfig,
    pub encoder: ImageEncoder,
    pub shape_encoder: ShapeEncoder,
    pub decoder: ShapeDecoder,
    pub prior: PriorFusion,
}

impl MpcnModel {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let encoder = ImageEncoder::new(&config.encoder, rng)?;
        let shape_encoder = ShapeEncoder::new(&config.shape_encoder, rng)?;
        let decoder = ShapeDecoder::new(&config.decoder, rng)?;
        let prior = PriorFusion::new(&config.prior, rng)?;
        Ok(MpcnModel {
            config,
            encoder,
            shape_encoder,
            decoder,
            prior,
        })
    }

    /// Builds the model from a single seed; the submodules draw from one
    /// stream in a fixed order, so equal seeds give equal weights.
    pub fn seeded(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::new(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }
}

impl Module for MpcnModel {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ParamViewMut<'_>)) {
        self.encoder.visit_params(&mut |n, p| f(&format!("encoder.{n}"), p));
        self.shape_encoder
            .visit_params(&mut |n, p| f(&format!("shape_encoder.{n}"), p));
        self.decoder.visit_params(&mut |n, p| f(&format!("decoder.{n}"), p));
        self.prior.visit_params(&mut |n, p| f(&format!("prior.{n}"), p));
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.encoder.visit_buffers(&mut |n, b| f(&format!("encoder.{n}"), b));
        self.shape_encoder
            .visit_buffers(&mut |n, b| f(&format!("shape_encoder.{n}"), b));
        self.decoder.visit_buffers(&mut |n, b| f(&format!("decoder.{n}"), b));
        self.prior.visit_buffers(&mut |n, b| f(&format!("prior.{n}"), b));
    }
}

/// Mean losses and memory activity of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean reconstruction loss over the epoch's batches.
    pub rec: f64,
    /// Mean contrastive loss over the epoch's batches.
    pub nce: f64,
    /// Mean combined loss over the epoch's batches.
    pub total: f64,
    /// Samples inserted into the memory this epoch.
    pub insertions: usize,
    /// Memory occupancy at the end of the epoch.
    pub occupancy: usize,
    /// Contrastive queries that had at least one positive.
    pub covered_queries: usize,
    /// Contrastive queries considered in total.
    pub contrast_queries: usize,
}

/// Per-sample evaluation row.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleIou {
    pub category: String,
    pub sample_id: String,
    pub iou: f64,
}

/// Everything a run produces: config echo, loss curves, evaluation scores,
/// and memory statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub config: Vec<(String, String)>,
    pub seed: u64,
    pub base_curve: Vec<EpochMetrics>,
    pub finetune_curve: Vec<EpochMetrics>,
    /// Mean IoU per category, sorted by category name.
    pub per_category: Vec<(String, f64)>,
    /// Mean IoU over all query samples.
    pub overall_iou: f64,
    /// One row per query sample, in evaluation order.
    pub samples: Vec<SampleIou>,
    pub support_inserted: usize,
    pub eval_occupancy: usize,
}

impl RunReport {
    pub fn category_iou(&self, category: &str) -> Option<f64> {
        self.per_category
            .iter()
            .find(|(c, _)| c == category)
            .map(|(_, v)| *v)
    }

    /// Key-value serialization with a stable field order and no timestamps,
    /// so identical runs produce identical bytes.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, value) in &self.config {
            out.push_str(&format!("config.{key}={value}\n"));
        }
        out.push_str(&format!("seed={}\n", self.seed));
        out.push_str(&format!("support_inserted={}\n", self.support_inserted));
        out.push_str(&format!("eval_occupancy={}\n", self.eval_occupancy));
        out.push_str(&format!("queries={}\n", self.samples.len()));
        out.push_str(&format!("overall_iou={}\n", self.overall_iou));
        for (category, value) in &self.per_category {
            out.push_str(&format!("category.{category}={value}\n"));
        }
        for (label, curve) in [("base", &self.base_curve), ("finetune", &self.finetune_curve)] {
            out.push_str(&format!("{label}_epochs={}\n", curve.len()));
            for m in curve {
                let e = m.epoch;
                out.push_str(&format!("{label}.{e}.rec={}\n", m.rec));
                out.push_str(&format!("{label}.{e}.nce={}\n", m.nce));
                out.push_str(&format!("{label}.{e}.total={}\n", m.total));
                out.push_str(&format!("{label}.{e}.insertions={}\n", m.insertions));
                out.push_str(&format!("{label}.{e}.occupancy={}\n", m.occupancy));
                out.push_str(&format!("{label}.{e}.covered={}\n", m.covered_queries));
                out.push_str(&format!(
                    "{label}.{e}.contrast_queries={}\n",
                    m.contrast_queries
                ));
            }
        }
        out
    }

    /// Raw per-sample rows, one line per query in evaluation order.
    pub fn samples_csv(&self) -> String {
        let mut out = String::from("category,sample_id,iou\n");
        for s in &self.samples {
            out.push_str(&format!("{},{},{}\n", s.category, s.sample_id, s.iou));
        }
        out
    }
}

/// Everything the backward pass needs from one forward pass.
struct BatchForward {
    feats: Array2<f64>,
    probs: Array5<f64>,
    enc_cache: ImageEncoderCache,
    dec_cache: ShapeDecoderCache,
    fusion: Option<FusionForward>,
}

struct FusionForward {
    prior_cache: PriorCache,
    shape_cache: Option<ShapeEncoderCache>,
    /// For each (sample, slot): index into the deduplicated volume batch.
    slot_of: Vec<Vec<Option<usize>>>,
    n_unique: usize,
}

fn batch_images(samples: &[&SamplePair], input: usize) -> Array4<f64> {
    let mut x = Array4::zeros((samples.len(), 1, input, input));
    for (i, sample) in samples.iter().enumerate() {
        x.slice_mut(s![i, 0, .., ..]).assign(&sample.image);
    }
    x
}

fn batch_targets(samples: &[&SamplePair], resolution: usize) -> Array5<f64> {
    let r = resolution;
    let mut t = Array5::zeros((samples.len(), 1, r, r, r));
    for (i, sample) in samples.iter().enumerate() {
        let mut dst = t.slice_mut(s![i, 0, .., .., ..]);
        for (d, &v) in dst.iter_mut().zip(sample.voxel.data()) {
            *d = f64::from(v);
        }
    }
    t
}

fn check_compatible(model: &MpcnModel, data: &[SamplePair]) -> Result<()> {
    let input = model.config.encoder.input_size;
    let resolution = model.config.voxel_resolution;
    for sample in data {
        if sample.image.dim() != (input, input) {
            return Err(MpcnError::config(format!(
                "sample {} has image {:?}, model expects {input}x{input}",
                sample.sample_id,
                sample.image.dim()
            )));
        }
        if sample.voxel.resolution() != resolution {
            return Err(MpcnError::config(format!(
                "sample {} has voxel resolution {}, model expects {resolution}",
                sample.sample_id,
                sample.voxel.resolution()
            )));
        }
    }
    Ok(())
}

/// Encode, retrieve, fuse, and decode one batch. Under [`Ablation::NoPrior`]
/// the memory is skipped and the decoder sees a zero prior half.
fn forward_batch(
    model: &mut MpcnModel,
    bank: &MemoryBank,
    images: &Array4<f64>,
    k: usize,
    ablation: Ablation,
    train: bool,
) -> Result<BatchForward> {
    let (feats, enc_cache) = model.encoder.forward(images, train);
    let (b, d_e) = feats.dim();

    if ablation == Ablation::NoPrior {
        let zero_prior = Array2::zeros((b, model.config.prior.embed));
        let cond = concat_condition(&feats, &zero_prior);
        let (probs, dec_cache) = model.decoder.forward(&cond, train);
        return Ok(BatchForward {
            feats,
            probs,
            enc_cache,
            dec_cache,
            fusion: None,
        });
    }

    let retrieved = bank.retrieve(&feats, k)?;
    let mut keys = Array3::zeros((b, k, d_e));
    let mut mask = Array2::from_elem((b, k), false);
    let mut first_of_slot: BTreeMap<usize, &VoxelGrid> = BTreeMap::new();
    for (i, row) in retrieved.iter().enumerate() {
        for (j, hit) in row.iter().enumerate() {
            keys.slice_mut(s![i, j, ..]).assign(&hit.key);
            match hit.slot {
                Some(slot) => {
                    first_of_slot.entry(slot).or_insert(&hit.value);
                }
                None => mask[[i, j]] = true,
            }
        }
    }

    // Each distinct stored shape is encoded once per batch, then its feature
    // row is shared by every retrieval that hit it.
    let position: BTreeMap<usize, usize> = first_of_slot
        .keys()
        .enumerate()
        .map(|(pos, &slot)| (slot, pos))
        .collect();
    let n_unique = position.len();
    let d_v = model.config.prior.value_dim;
    let r = model.config.shape_encoder.input_resolution;
    let mut shape_feats = Array3::zeros((b, k, d_v));
    let mut slot_of = vec![vec![None; k]; b];
    let mut shape_cache = None;
    if n_unique > 0 {
        let mut volumes = Array5::zeros((n_unique, 1, r, r, r));
        for (&slot, grid) in &first_of_slot {
            let mut dst = volumes.slice_mut(s![position[&slot], 0, .., .., ..]);
            for (d, &v) in dst.iter_mut().zip(grid.data()) {
                *d = f64::from(v);
            }
        }
        let (unique_feats, cache) = model.shape_encoder.forward(&volumes);
        for (i, row) in retrieved.iter().enumerate() {
            for (j, hit) in row.iter().enumerate() {
                if let Some(slot) = hit.slot {
                    let pos = position[&slot];
                    shape_feats.slice_mut(s![i, j, ..]).assign(&unique_feats.row(pos));
                    slot_of[i][j] = Some(pos);
                }
            }
        }
        shape_cache = Some(cache);
    }

    // Zero keys make every unmasked slot score identically, which turns the
    // attention into a plain average of the retrieved shapes.
    let attn_keys = if ablation == Ablation::AverageFusion {
        Array3::zeros((b, k, d_e))
    } else {
        keys
    };
    let (prior_feat, prior_cache) = model.prior.fuse_prior(&feats, &attn_keys, &shape_feats, &mask);
    let cond = concat_condition(&feats, &prior_feat);
    let (probs, dec_cache) = model.decoder.forward(&cond, train);
    Ok(BatchForward {
        feats,
        probs,
        enc_cache,
        dec_cache,
        fusion: Some(FusionForward {
            prior_cache,
            shape_cache,
            slot_of,
            n_unique,
        }),
    })
}

/// Backpropagates the reconstruction gradient plus an optional extra gradient
/// on the image features (the weighted contrastive gradient). Stored memory
/// keys are constants, so their gradient is dropped.
fn backward_batch(
    model: &mut MpcnModel,
    fwd: &BatchForward,
    grad_probs: &Array5<f64>,
    extra_feat_grad: Option<&Array2<f64>>,
) {
    let d_e = fwd.feats.dim().1;
    let g_cond = model.decoder.backward(grad_probs, &fwd.dec_cache);
    let (g_image, g_prior) = split_condition_grad(&g_cond, d_e);
    let mut g_feats = g_image;

    if let Some(fusion) = &fwd.fusion {
        let grads = model.prior.backward(&g_prior, &fusion.prior_cache);
        g_feats += &grads.query;
        if let Some(cache) = &fusion.shape_cache {
            let d_v = grads.shape_feats.dim().2;
            let mut g_unique = Array2::zeros((fusion.n_unique, d_v));
            for (i, row) in fusion.slot_of.iter().enumerate() {
                for (j, pos) in row.iter().enumerate() {
                    if let Some(pos) = pos {
                        let mut dst = g_unique.row_mut(*pos);
                        dst += &grads.shape_feats.slice(s![i, j, ..]);
                    }
                }
            }
            model.shape_encoder.backward(&g_unique, cache);
        }
    }

    if let Some(extra) = extra_feat_grad {
        g_feats += extra;
    }
    model.encoder.backward(&g_feats, &fwd.enc_cache);
}

struct ContrastTerm {
    loss: f64,
    grad: Array2<f64>,
    covered: usize,
    total: usize,
}

/// Builds the pairwise ground-truth distance matrix and evaluates the
/// contrastive term. Returns `None` when the term is disabled or the batch
/// is too small to form pairs.
fn contrast_term(
    feats: &Array2<f64>,
    targets: &[&VoxelGrid],
    cfg: &EpisodeConfig,
) -> Result<Option<ContrastTerm>> {
    if cfg.lambda == 0.0 || cfg.ablation == Ablation::NoNce || targets.len() < 2 {
        return Ok(None);
    }
    let n = targets.len();
    let mut distances = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..i {
            let mut d = voxel_distance(targets[i], targets[j])?;
            if cfg.ablation == Ablation::UniformNce && d < cfg.delta {
                d = 0.0;
            }
            distances[[i, j]] = d;
            distances[[j, i]] = d;
        }
    }
    let batch = ContrastBatch::new(feats, distances, cfg.tau, cfg.delta, cfg.gamma)?;
    let out = contrastive_3d_loss(&batch);
    Ok(Some(ContrastTerm {
        loss: out.loss,
        grad: out.grad,
        covered: out.covered_queries,
        total: out.total_queries,
    }))
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Runs one episodic epoch: flush the memory, then for each batch encode,
/// retrieve, fuse, decode, insert hard samples, and take one optimizer step.
/// Batches per epoch is `ceil(|data| / batch)`, the last batch may be short.
pub fn train_epoch(
    model: &mut MpcnModel,
    bank: &mut MemoryBank,
    opt: &mut Adam,
    data: &[SamplePair],
    cfg: &EpisodeConfig,
    epoch: usize,
) -> Result<EpochMetrics> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(MpcnError::config("training data is empty"));
    }
    if bank.capacity() != cfg.capacity {
        return Err(MpcnError::config(format!(
            "memory capacity {} does not match the {} stage capacity {}",
            bank.capacity(),
            cfg.stage.name(),
            cfg.capacity
        )));
    }
    check_compatible(model, data)?;

    bank.flush();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut epoch_rng(cfg.seed, epoch));

    let mut rec_sum = 0.0;
    let mut nce_sum = 0.0;
    let mut total_sum = 0.0;
    let mut insertions = 0;
    let mut covered_queries = 0;
    let mut contrast_queries = 0;
    let mut batches = 0;

    for (batch_idx, chunk) in order.chunks(cfg.batch).enumerate() {
        let samples: Vec<&SamplePair> = chunk.iter().map(|&i| &data[i]).collect();
        let images = batch_images(&samples, model.config.encoder.input_size);
        let targets = batch_targets(&samples, model.config.voxel_resolution);

        let fwd = forward_batch(model, bank, &images, cfg.k, cfg.ablation, true)?;
        let (rec, grad_probs) = bce_batch(&fwd.probs, &targets);
        let gts: Vec<&VoxelGrid> = samples.iter().map(|s| &s.voxel).collect();
        let contrast = contrast_term(&fwd.feats, &gts, cfg)?;
        let nce = contrast.as_ref().map_or(0.0, |c| c.loss);
        let total = total_loss(rec, nce, cfg.lambda);
        if !total.is_finite() {
            return Err(MpcnError::Diverged {
                epoch,
                batch: batch_idx,
                rec,
                nce,
            });
        }

        zero_grads(model);
        let extra = contrast.as_ref().map(|c| &c.grad * cfg.lambda);
        backward_batch(model, &fwd, &grad_probs, extra.as_ref());

        // Hard samples join the memory before the step, keyed by the
        // features that produced the miss.
        if cfg.ablation != Ablation::NoPrior {
            for (i, sample) in samples.iter().enumerate() {
                let pred = probs_row_to_volume(&fwd.probs, i);
                let key = fwd.feats.row(i).to_owned();
                if bank.store_if_hard(key, sample.voxel.clone(), &pred, &sample.voxel, cfg.delta)? {
                    insertions += 1;
                }
            }
        }
        opt.step(model);

        rec_sum += rec;
        nce_sum += nce;
        total_sum += total;
        if let Some(c) = &contrast {
            covered_queries += c.covered;
            contrast_queries += c.total;
        }
        batches += 1;
    }

    let scale = 1.0 / batches as f64;
    Ok(EpochMetrics {
        epoch,
        rec: rec_sum * scale,
        nce: nce_sum * scale,
        total: total_sum * scale,
        insertions,
        occupancy: bank.len(),
        covered_queries,
        contrast_queries,
    })
}

/// Populates a fresh test-capacity memory with the support set (inserted
/// unconditionally, keys encoded once) and reconstructs every query.
/// Model parameters and buffers are left untouched.
pub fn evaluate_fewshot(
    model: &mut MpcnModel,
    support: &[SamplePair],
    query: &[SamplePair],
    cfg: &EpisodeConfig,
) -> Result<RunReport> {
    cfg.validate()?;
    if query.is_empty() {
        return Err(MpcnError::config("query set is empty"));
    }
    check_compatible(model, support)?;
    check_compatible(model, query)?;

    let d_e = model.config.encoder.embed_dim;
    let resolution = model.config.voxel_resolution;
    let mut bank = MemoryBank::new(cfg.capacity, d_e, resolution)?;
    bank.flush();

    let mut support_inserted = 0;
    if cfg.ablation != Ablation::NoPrior {
        for chunk in support.chunks(cfg.batch) {
            let samples: Vec<&SamplePair> = chunk.iter().collect();
            let images = batch_images(&samples, model.config.encoder.input_size);
            let (feats, _) = model.encoder.forward(&images, false);
            for (i, sample) in samples.iter().enumerate() {
                bank.insert(feats.row(i).to_owned(), sample.voxel.clone())?;
                support_inserted += 1;
            }
        }
    }

    let mut rows = Vec::with_capacity(query.len());
    for chunk in query.chunks(cfg.batch) {
        let samples: Vec<&SamplePair> = chunk.iter().collect();
        let images = batch_images(&samples, model.config.encoder.input_size);
        let fwd = forward_batch(model, &bank, &images, cfg.k, cfg.ablation, false)?;
        for (i, sample) in samples.iter().enumerate() {
            let pred = probs_row_to_volume(&fwd.probs, i);
            rows.push(SampleIou {
                category: sample.category.clone(),
                sample_id: sample.sample_id.clone(),
                iou: iou(&pred, &sample.voxel, cfg.iou_threshold)?,
            });
        }
    }

    let mut by_category: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for row in &rows {
        let entry = by_category.entry(row.category.as_str()).or_insert((0.0, 0));
        entry.0 += row.iou;
        entry.1 += 1;
    }
    let per_category = by_category
        .into_iter()
        .map(|(cat, (sum, n))| (cat.to_string(), sum / n as f64))
        .collect();
    let overall_iou = rows.iter().map(|r| r.iou).sum::<f64>() / rows.len() as f64;

    let mut config = vec![("model".to_string(), model.config.name.clone())];
    config.extend(cfg.echo());
    Ok(RunReport {
        config,
        seed: cfg.seed,
        base_curve: Vec::new(),
        finetune_curve: Vec::new(),
        per_category,
        overall_iou,
        samples: rows,
        support_inserted,
        eval_occupancy: bank.len(),
    })
}

fn categories_of(samples: &[SamplePair]) -> BTreeSet<String> {
    samples.iter().map(|s| s.category.clone()).collect()
}

/// Base-category training, optional support-set finetuning, then few-shot
/// evaluation. `shots == 0` skips finetuning and evaluates with an empty
/// support memory.
pub fn run_two_stage(
    model: &mut MpcnModel,
    base: &[SamplePair],
    support: &[SamplePair],
    query: &[SamplePair],
    cfg: &ProtocolConfig,
) -> Result<RunReport> {
    cfg.validate()?;
    if base.is_empty() {
        return Err(MpcnError::config("base training set is empty"));
    }

    let base_categories = categories_of(base);
    let novel_categories: BTreeSet<String> = categories_of(support)
        .union(&categories_of(query))
        .cloned()
        .collect();
    let overlap: Vec<String> = base_categories
        .intersection(&novel_categories)
        .cloned()
        .collect();
    if !overlap.is_empty() {
        return Err(MpcnError::config(format!(
            "base and novel categories overlap: {}",
            overlap.join(", ")
        )));
    }

    if cfg.shots == 0 {
        if !support.is_empty() {
            return Err(MpcnError::config(
                "zero-shot run must use an empty support set",
            ));
        }
    } else {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for sample in support {
            *counts.entry(sample.category.as_str()).or_insert(0) += 1;
        }
        if counts.is_empty() {
            return Err(MpcnError::config("support set is empty but shots > 0"));
        }
        for (category, n) in &counts {
            if *n != cfg.shots {
                return Err(MpcnError::config(format!(
                    "support category {category} has {n} samples, expected {} shots",
                    cfg.shots
                )));
            }
        }
    }

    let d_e = model.config.encoder.embed_dim;
    let resolution = model.config.voxel_resolution;

    let base_cfg = cfg.episode(Stage::Base);
    let mut bank = MemoryBank::new(base_cfg.capacity, d_e, resolution)?;
    let mut opt = Adam::new(base_cfg.lr);
    let mut base_curve = Vec::with_capacity(base_cfg.epochs);
    for epoch in 0..base_cfg.epochs {
        base_curve.push(train_epoch(model, &mut bank, &mut opt, base, &base_cfg, epoch)?);
    }

    let mut finetune_curve = Vec::new();
    let finetune =
        cfg.shots > 0 && cfg.ablation != Ablation::NoFinetune && cfg.finetune_epochs > 0;
    if finetune {
        let ft_cfg = cfg.episode(Stage::Finetune);
        let mut ft_bank = MemoryBank::new(ft_cfg.capacity, d_e, resolution)?;
        let mut ft_opt = Adam::new(ft_cfg.lr);
        for epoch in 0..ft_cfg.epochs {
            finetune_curve.push(train_epoch(
                model,
                &mut ft_bank,
                &mut ft_opt,
                support,
                &ft_cfg,
                epoch,
            )?);
        }
    }

    let mut report = evaluate_fewshot(model, support, query, &cfg.episode(Stage::Eval))?;
    let mut config = vec![("model".to_string(), model.config.name.clone())];
    config.extend(cfg.echo());
    report.config = config;
    report.base_curve = base_curve;
    report.finetune_curve = finetune_curve;
    Ok(report)
}
