use std::time::Instant;

use mpcn::datagen::{default_families, generate_dataset, FamilyRole, SamplePair};
use mpcn::voxelcore::ViewAxis;
use mpcn::netblocks::{desk_config, DecoderSpec, EncoderSpec, ModelConfig, ShapeEncoderSpec};
use mpcn::prior::PriorConfig;
use mpcn::trainer::{run_two_stage, Ablation, MpcnModel, ProtocolConfig};

fn probe_config(k: usize) -> ModelConfig {
    if std::env::var("PROBE_DESK").is_ok() {
        let mut cfg = desk_config();
        cfg.prior.topk = k;
        cfg
    } else {
        mid_config(k)
    }
}

fn probe_resolution() -> usize {
    if std::env::var("PROBE_DESK").is_ok() {
        32
    } else {
        16
    }
}

fn mid_config(k: usize) -> ModelConfig {
    ModelConfig {
        name: "mid".into(),
        voxel_resolution: 16,
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
            input_resolution: 16,
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
            topk: k,
            query_dim: 32,
            value_dim: 80,
        },
    }
}

fn arg<T: std::str::FromStr>(n: usize, default: T) -> T
where
    T::Err: std::fmt::Debug,
{
    std::env::args()
        .nth(n)
        .map(|s| s.parse().unwrap())
        .unwrap_or(default)
}

struct Split {
    base: Vec<SamplePair>,
    support_pool: Vec<Vec<SamplePair>>,
    query: Vec<SamplePair>,
}

fn build(seed: u64, n_base: usize, dup: usize, q_per: usize, views: usize) -> Split {
    let mut base = Vec::new();
    let mut support_pool = Vec::new();
    let mut query = Vec::new();
    for fam in default_families() {
        if fam.role == FamilyRole::Novel {
            let ds = generate_dataset(std::slice::from_ref(&fam), 25 + q_per, views, probe_resolution(), 71 + seed)
                .unwrap();
            let (pool, q) = ds.samples.split_at(25 * views);
            if views > 1 {
                support_pool.push(
                    pool.iter().filter(|s| s.view == ViewAxis::X).cloned().collect(),
                );
                query.extend(q.iter().filter(|s| s.view == ViewAxis::X).cloned());
            } else {
                support_pool.push(pool.to_vec());
                query.extend_from_slice(q);
            }
        } else {
            let ds = generate_dataset(std::slice::from_ref(&fam), n_base, views, probe_resolution(), 71 + seed)
                .unwrap();
            for _ in 0..dup {
                base.extend_from_slice(&ds.samples);
            }
        }
    }
    Split {
        base,
        support_pool,
        query,
    }
}

fn support(split: &Split, shots: usize) -> Vec<SamplePair> {
    let mut out = Vec::new();
    for pool in &split.support_pool {
        out.extend_from_slice(&pool[..shots]);
    }
    out
}

fn arm(
    split: &Split,
    cfg: &ProtocolConfig,
    shots: usize,
    ablation: Ablation,
    seed: u64,
) -> mpcn::trainer::RunReport {
    let mut cfg = cfg.clone();
    cfg.shots = shots;
    cfg.ablation = ablation;
    let mut model = MpcnModel::seeded(probe_config(cfg.k), 91 + seed).unwrap();
    run_two_stage(
        &mut model,
        &split.base,
        &support(split, shots),
        &split.query,
        &cfg,
    )
    .unwrap()
}

fn main() {
    let epochs: usize = arg(1, 40);
    let lr: f64 = arg(2, 1e-3);
    let n_base: usize = arg(3, 30);
    let q_per: usize = arg(4, 10);
    let batch: usize = arg(5, 8);
    let k: usize = arg(6, 1);
    let delta: f64 = arg(7, 0.01);
    let dup: usize = arg(8, 1);
    let ft_epochs: usize = arg(9, 20);
    let sweep: bool = arg(10, 0u8) != 0;
    let views: usize = arg(11, 1);
    let with_nce: bool = arg(12, 1u8) != 0;
    let off: u64 = arg(13, 0);
    let lambda: f64 = arg(14, 0.001);

    probe_config(k).validate().unwrap();
    let mut gap_sum = 0.0;
    let mut nce_gaps = [0.0f64; 2];
    let seed_count: u64 = std::env::var("PROBE_SEEDS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(3);
    for s in 0..seed_count {
        let seed = s + off;
        let t0 = Instant::now();
        let split = build(seed, n_base, dup, q_per, views);
        let mut cfg = ProtocolConfig::desk_defaults(81 + seed, 5);
        cfg.batch = batch;
        cfg.lr = lr;
        cfg.k = k;
        cfg.delta = delta;
        cfg.base_epochs = epochs;
        cfg.finetune_epochs = ft_epochs;
        cfg.lambda = lambda;
        cfg.train_capacity = split.base.len();
        cfg.test_capacity = 60;

        let full_rep = arm(&split, &cfg, 5, Ablation::None, seed);
        let noprior_rep = arm(&split, &cfg, 5, Ablation::NoPrior, seed);
        let full = full_rep.overall_iou;
        let noprior = noprior_rep.overall_iou;
        let rec = full_rep.base_curve.last().unwrap().rec;
        let last_ins = full_rep.base_curve.last().unwrap().insertions;
        let ft_ins: usize = full_rep.finetune_curve.iter().map(|m| m.insertions).sum();
        gap_sum += full - noprior;
        let (unif, nonce) = if with_nce {
            let unif = arm(&split, &cfg, 5, Ablation::UniformNce, seed).overall_iou;
            let nonce = arm(&split, &cfg, 5, Ablation::NoNce, seed).overall_iou;
            nce_gaps[0] += full - unif;
            nce_gaps[1] += unif - nonce;
            (unif, nonce)
        } else {
            (f64::NAN, f64::NAN)
        };
        println!(
            "seed {seed}: rec {rec:.4} ins {last_ins}/{ft_ins} full {full:.4} noprior {noprior:.4} gap {:+.4} unif {unif:.4} nonce {nonce:.4} ({:.0}s)",
            full - noprior,
            t0.elapsed().as_secs_f64()
        );
        for rep in [&full_rep, &noprior_rep] {
            let ring = rep.category_iou("ring").unwrap_or(f64::NAN);
            let cross = rep.category_iou("cross").unwrap_or(f64::NAN);
            println!("  ring {ring:.4} cross {cross:.4}");
        }
        if sweep {
            for shots in [1usize, 10, 25] {
                let iou = arm(&split, &cfg, shots, Ablation::None, seed).overall_iou;
                println!("  shots {shots}: {iou:.4}");
            }
        }
    }
    let n = seed_count as f64;
    println!(
        "mean prior gap {:+.5}  full-unif {:+.5}  unif-nonce {:+.5}",
        gap_sum / n,
        nce_gaps[0] / n,
        nce_gaps[1] / n
    );
}
