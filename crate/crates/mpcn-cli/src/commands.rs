use std::fs;
use std::path::{Path, PathBuf};

use mpcn::datagen::{
    default_families, generate_dataset, load_binvox_dataset, save_dataset, Dataset, FamilyRole,
};
use mpcn::checkpoint::{load_module, save_module};
use mpcn::datagen::split_fewshot;
use mpcn::error::{MpcnError, Result};
use mpcn::memory::MemoryBank;
use mpcn::optim::Adam;
use mpcn::trainer::{
    evaluate_fewshot, run_two_stage, train_epoch, Ablation, MpcnModel, RunReport, Stage,
};

use crate::args::{EvalArgs, GenDataArgs, OverrideArgs, PlotShotsArgs, StageArg, TrainArgs};
use crate::config::RunConfig;
use crate::plot;
use crate::rundir::{create_run_dir, run_root};

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    let families: Vec<_> = default_families()
        .into_iter()
        .take(args.families as usize)
        .collect();
    let dataset = generate_dataset(
        &families,
        args.per_family,
        args.views as usize,
        args.resolution,
        args.seed,
    )?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| run_root().join(format!("dataset-seed{}", args.seed)));
    let manifest = save_dataset(&dataset, &out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn effective_config(overrides: &OverrideArgs) -> Result<RunConfig> {
    let mut cfg = match &overrides.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn novel_families(cfg: &RunConfig, dataset: &Dataset) -> Result<Vec<String>> {
    if !cfg.novel.is_empty() {
        return Ok(cfg.novel.clone());
    }
    let mut novel: Vec<String> = dataset.categories();
    novel.retain(|category| {
        dataset
            .samples
            .iter()
            .any(|s| &s.category == category && s.role == FamilyRole::Novel)
    });
    if novel.is_empty() {
        return Err(MpcnError::config(
            "dataset marks no family as novel; set novel = [...] in the config",
        ));
    }
    Ok(novel)
}

fn checkpoint_meta(cfg: &RunConfig, stage: &str) -> serde_json::Value {
    serde_json::json!({
        "model": cfg.model,
        "stage": stage,
        "seed": cfg.seed,
        "shots": cfg.shots,
    })
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<MpcnModel> {
    let mut model = MpcnModel::seeded(cfg.model_config()?, cfg.seed)?;
    let meta = load_module(&mut model, path)?;
    if let Some(name) = meta.get("model").and_then(|v| v.as_str()) {
        if name != cfg.model {
            return Err(MpcnError::config(format!(
                "checkpoint {} holds a {name:?} model but the config says {:?}",
                path.display(),
                cfg.model
            )));
        }
    }
    Ok(model)
}

/// Prepends the run-level context to the report's config echo so a report
/// alone identifies its dataset, split, and stage.
fn stamp_report(report: &mut RunReport, cfg: &RunConfig, stage: &str, novel: &[String]) {
    let dataset = cfg
        .dataset
        .as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default();
    let mut rows = vec![
        ("run_stage".to_string(), stage.to_string()),
        ("dataset".to_string(), dataset),
        ("novel".to_string(), novel.join("+")),
    ];
    rows.append(&mut report.config);
    report.config = rows;
}

fn write_run(kind: &str, cfg: &RunConfig, report: &RunReport) -> Result<PathBuf> {
    let dir = create_run_dir(kind, cfg.seed)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    fs::write(dir.join("report.txt"), report.to_text())?;
    fs::write(dir.join("samples.csv"), report.samples_csv())?;
    Ok(dir)
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let cfg = effective_config(&args.overrides)?;
    let protocol = cfg.protocol()?;
    let dataset = load_binvox_dataset(cfg.dataset_path()?)?;
    let novel = novel_families(&cfg, &dataset)?;
    let split = split_fewshot(&dataset, &novel, cfg.shots, cfg.seed)?;

    if args.stage != StageArg::Finetune && args.from.is_some() {
        return Err(MpcnError::config(
            "--from only applies to --stage finetune; base training starts fresh",
        ));
    }

    let (mut model, mut report, checkpoint_name) = match args.stage {
        StageArg::All => {
            let mut model = MpcnModel::seeded(cfg.model_config()?, cfg.seed)?;
            let report = run_two_stage(
                &mut model,
                &split.base,
                &split.support,
                &split.query,
                &protocol,
            )?;
            (model, report, "checkpoint-final.bin")
        }
        StageArg::Base => {
            let mut model = MpcnModel::seeded(cfg.model_config()?, cfg.seed)?;
            let episode = protocol.episode(Stage::Base);
            let model_config = cfg.model_config()?;
            let mut bank = MemoryBank::new(
                episode.capacity,
                model_config.encoder.embed_dim,
                model_config.voxel_resolution,
            )?;
            let mut opt = Adam::new(episode.lr);
            let mut curve = Vec::with_capacity(episode.epochs);
            for epoch in 0..episode.epochs {
                curve.push(train_epoch(
                    &mut model,
                    &mut bank,
                    &mut opt,
                    &split.base,
                    &episode,
                    epoch,
                )?);
            }
            let mut report =
                evaluate_fewshot(&mut model, &[], &split.query, &protocol.episode(Stage::Eval))?;
            report.base_curve = curve;
            (model, report, "checkpoint-base.bin")
        }
        StageArg::Finetune => {
            let from = args.from.as_ref().ok_or_else(|| {
                MpcnError::config("--stage finetune needs --from <checkpoint-base.bin>")
            })?;
            if cfg.shots == 0 {
                return Err(MpcnError::config("finetuning needs shots > 0"));
            }
            if cfg.ablation()? == Ablation::NoFinetune {
                return Err(MpcnError::config(
                    "the no-finetune ablation skips this stage; run eval on the base checkpoint",
                ));
            }
            let mut model = load_model(&cfg, from)?;
            let episode = protocol.episode(Stage::Finetune);
            let model_config = cfg.model_config()?;
            let mut bank = MemoryBank::new(
                episode.capacity,
                model_config.encoder.embed_dim,
                model_config.voxel_resolution,
            )?;
            let mut opt = Adam::new(episode.lr);
            let mut curve = Vec::with_capacity(episode.epochs);
            for epoch in 0..episode.epochs {
                curve.push(train_epoch(
                    &mut model,
                    &mut bank,
                    &mut opt,
                    &split.support,
                    &episode,
                    epoch,
                )?);
            }
            let mut report = evaluate_fewshot(
                &mut model,
                &split.support,
                &split.query,
                &protocol.episode(Stage::Eval),
            )?;
            report.finetune_curve = curve;
            (model, report, "checkpoint-final.bin")
        }
    };

    // Stage runs carry the protocol-level echo too, so every report names
    // the same config keys regardless of how training was dispatched.
    let mut config = vec![("model".to_string(), cfg.model.clone())];
    config.extend(protocol.echo());
    report.config = config;
    stamp_report(&mut report, &cfg, args.stage.name(), &novel);

    let dir = write_run("train", &cfg, &report)?;
    save_module(
        &mut model,
        &checkpoint_meta(&cfg, args.stage.name()),
        &dir.join(checkpoint_name),
    )?;
    println!("{}", dir.display());
    println!("overall_iou={}", report.overall_iou);
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let cfg = effective_config(&args.overrides)?;
    let protocol = cfg.protocol()?;
    let dataset = load_binvox_dataset(cfg.dataset_path()?)?;
    let novel = novel_families(&cfg, &dataset)?;
    let split = split_fewshot(&dataset, &novel, cfg.shots, cfg.seed)?;

    let mut model = load_model(&cfg, &args.from)?;
    let mut report = evaluate_fewshot(
        &mut model,
        &split.support,
        &split.query,
        &protocol.episode(Stage::Eval),
    )?;
    let mut config = vec![("model".to_string(), cfg.model.clone())];
    config.extend(protocol.echo());
    report.config = config;
    stamp_report(&mut report, &cfg, "eval", &novel);

    let dir = write_run("eval", &cfg, &report)?;
    println!("{}", dir.display());
    println!("overall_iou={}", report.overall_iou);
    Ok(())
}

pub fn plot_shots(args: &PlotShotsArgs) -> Result<()> {
    let points = plot::parse_reports(&args.reports)?;
    plot::check_plottable(&points)?;
    let out = args.out.clone().unwrap_or_else(|| run_root().join("shots.svg"));
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let sidecar = out.with_extension("csv");
    fs::write(&out, plot::render_svg(&points))?;
    fs::write(&sidecar, plot::sidecar_csv(&points))?;
    println!("{}", out.display());
    println!("{}", sidecar.display());
    Ok(())
}
