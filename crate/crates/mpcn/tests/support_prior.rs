//! Paired-run sanity check: populating the test-time memory with a query's
//! exact ground truth must beat evaluating the same model with an empty bank,
//! in expectation over seeds.
//!
//! The training recipe keeps the reconstruction underfit (six jittered shape
//! families, limited epochs) while a near-zero insertion threshold keeps the
//! memory populated through every epoch, so the decoder keeps seeing
//! value-bearing priors. Duplicated training samples guarantee retrievals at
//! key distance zero whose stored volume is the exact target, which is what
//! teaches the decoder to trust close matches. Queries come from a family the
//! model never trained on, so the image pathway alone extrapolates poorly and
//! the injected ground-truth templates have room to help.

use ndarray::{s, Array4};

use mpcn::datagen::{default_families, generate_dataset, SamplePair};
use mpcn::memory::MemoryBank;
use mpcn::netblocks::{DecoderSpec, EncoderSpec, ModelConfig, ShapeEncoderSpec};
use mpcn::optim::Adam;
use mpcn::prior::PriorConfig;
use mpcn::trainer::{evaluate_fewshot, train_epoch, MpcnModel, ProtocolConfig, Stage};

const RESOLUTION: usize = 16;
const EPOCHS: usize = 60;
const TRAIN_PER_FAMILY: usize = 19;
const DUPLICATES: usize = 3;
const QUERIES: usize = 12;

fn mid_config() -> ModelConfig {
    ModelConfig {
        name: "mid".into(),
        voxel_resolution: RESOLUTION,
        encoder: EncoderSpec {
            input_size: 16,
            backbone_channels: vec![6, 12, 18, 24],
            backbone_strides: vec![2, 2, 1, 1],
            stage_channels: [32, 24, 16],
            pool1: (3, 1),
            pool2: (2, 2),
            embed_dim: 32,
        },
        shape_encoder: ShapeEncoderSpec {
            input_resolution: RESOLUTION,
            kernels: [5, 3, 3, 3],
            channels: [4, 6, 8, 10],
            strides: [2, 1, 1, 1],
        },
        decoder: DecoderSpec {
            input_channels: 64,
            stage_channels: vec![20, 12, 6, 1],
            kernel: 4,
            stride: 2,
            padding: 1,
        },
        prior: PriorConfig {
            embed: 32,
            heads: 2,
            ffn_hidden: 64,
            topk: 1,
            query_dim: 32,
            value_dim: 80,
        },
    }
}

fn build_split(seed: u64) -> (Vec<SamplePair>, Vec<SamplePair>) {
    let mut train = Vec::new();
    let mut query = Vec::new();
    for family in default_families() {
        if family.id == "ring" {
            let ds = generate_dataset(std::slice::from_ref(&family), QUERIES, 1, RESOLUTION, 71 + seed)
                .unwrap();
            query.extend_from_slice(&ds.samples);
            continue;
        }
        let ds = generate_dataset(
            std::slice::from_ref(&family),
            TRAIN_PER_FAMILY,
            1,
            RESOLUTION,
            71 + seed,
        )
        .unwrap();
        for _ in 0..DUPLICATES {
            train.extend_from_slice(&ds.samples);
        }
    }
    (train, query)
}

#[test]
fn support_with_exact_ground_truth_beats_empty_memory() {
    let mut gaps = Vec::new();
    for seed in 0..3u64 {
        let (train, query) = build_split(seed);
        let mut cfg = ProtocolConfig::desk_defaults(81 + seed, 1).episode(Stage::Base);
        cfg.batch = 8;
        cfg.lr = 1e-3;
        cfg.k = 1;
        cfg.capacity = train.len();
        cfg.epochs = EPOCHS;
        cfg.delta = 1e-3;

        let mut model = MpcnModel::seeded(mid_config(), 91 + seed).unwrap();
        let mut bank = MemoryBank::new(cfg.capacity, 32, RESOLUTION).unwrap();
        let mut opt = Adam::new(cfg.lr);
        let mut insertions = 0;
        for epoch in 0..EPOCHS {
            let metrics = train_epoch(&mut model, &mut bank, &mut opt, &train, &cfg, epoch).unwrap();
            insertions = metrics.insertions;
        }
        assert_eq!(
            insertions,
            train.len(),
            "the low threshold should keep every sample inserting through the last epoch"
        );

        let mut eval_cfg = cfg.clone();
        eval_cfg.stage = Stage::Eval;
        eval_cfg.capacity = query.len();
        let with = evaluate_fewshot(&mut model, &query, &query, &eval_cfg).unwrap();
        let without = evaluate_fewshot(&mut model, &[], &query, &eval_cfg).unwrap();
        assert_eq!(with.support_inserted, query.len());
        assert_eq!(without.support_inserted, 0);
        gaps.push(with.overall_iou - without.overall_iou);

        if seed == 0 {
            assert_exact_retrieval(&mut model, &query);
        }
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    assert!(
        mean > 0.0,
        "ground-truth support should raise mean IoU over the paired empty-memory runs, gaps {gaps:?}"
    );
}

/// With the query set itself stored as support, every query's nearest key is
/// its own image feature at distance zero and the retrieved value is its
/// exact ground truth.
fn assert_exact_retrieval(model: &mut MpcnModel, query: &[SamplePair]) {
    let mut images = Array4::zeros((query.len(), 1, RESOLUTION, RESOLUTION));
    for (i, sample) in query.iter().enumerate() {
        images.slice_mut(s![i, 0, .., ..]).assign(&sample.image);
    }
    let (features, _) = model.encoder.forward(&images, false);
    let mut bank = MemoryBank::new(query.len(), 32, RESOLUTION).unwrap();
    for (i, sample) in query.iter().enumerate() {
        bank.insert(features.row(i).to_owned(), sample.voxel.clone()).unwrap();
    }
    let retrieved = bank.retrieve(&features, 1).unwrap();
    for (i, sample) in query.iter().enumerate() {
        let top = &retrieved[i][0];
        assert_eq!(top.distance, 0.0);
        assert_eq!(top.value, sample.voxel);
    }
}
