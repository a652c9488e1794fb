//! Command-line orchestration: data generation, two-stage training,
//! evaluation, ablations, and report emission.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::archive::{Archive, ArchiveWriter};
use crate::cam::{export_cams, train_cam_model};
use crate::config::{ExperimentConfig, Variant, CONFIG_ENV};
use crate::dataset::{
    generate_dataset, label_distribution, split_dataset, DatasetManifest, Split,
};
use crate::error::{Error, Result};
use crate::eval::{
    comparison_table_csv, comparison_table_markdown, majority_minority_aggregate,
    per_label_report, precision_recall_curve, ComparisonReport, LabelAucReport,
};
use crate::pipeline::{
    cam_checkpoint_record, cam_model_from_checkpoint, compute_cam_store, evaluate_stage,
    run_seed, stage_checkpoint_record, stage_from_checkpoint, train_classifier_stage, SeedOutcome,
};
use crate::training::{
    load_checkpoint, save_checkpoint, write_history_csv, EpochStats,
};

/// Resolves the experiment config: explicit path, then `SEMGUIDE_CONFIG`,
/// then the named preset.
pub fn resolve_config(path: Option<&Path>, preset: &str) -> Result<ExperimentConfig> {
    if let Some(p) = path {
        return ExperimentConfig::load(p);
    }
    if let Ok(env_path) = std::env::var(CONFIG_ENV) {
        if !env_path.is_empty() {
            return ExperimentConfig::load(env_path);
        }
    }
    ExperimentConfig::preset(preset)
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// `generate-data`: renders the synthetic dataset and assigns the split.
pub fn cmd_generate_data(
    mut config: ExperimentConfig,
    n: Option<usize>,
    seed: Option<u64>,
    out_dir: &Path,
) -> Result<()> {
    if let Some(n) = n {
        config.dataset.n_samples = n;
    }
    if let Some(seed) = seed {
        config.dataset.scene.seed = seed;
    }
    config.validate()?;
    ensure_dir(out_dir)?;
    let manifest = generate_dataset(&config.dataset.scene, config.dataset.n_samples, out_dir)?;
    let manifest = split_dataset(&manifest, config.dataset.train_fraction)?;
    manifest.save(out_dir)?;
    let dist = label_distribution(&manifest, None)?;
    let train = manifest.ids_for(Split::Train).len();
    let test = manifest.ids_for(Split::Test).len();
    println!(
        "generated {} samples ({} train / {} test) under {}",
        manifest.records.len(),
        train,
        test,
        out_dir.display()
    );
    println!("majority labels (share > 5%): {:?}", dist.majority);
    Ok(())
}

fn renumber(history: &mut [EpochStats], offset: usize) {
    for row in history.iter_mut() {
        row.epoch += offset;
    }
}

/// `train-cam`: trains (or resumes) the activation-map generator.
pub fn cmd_train_cam(config: ExperimentConfig, data_dir: &Path, out_dir: &Path) -> Result<()> {
    config.validate()?;
    ensure_dir(out_dir)?;
    let manifest = DatasetManifest::load(data_dir)?;
    let checkpoint_path = out_dir.join("checkpoint.ten");

    let mut train_cfg = config.cam.train.clone();
    let mut prior_history: Vec<EpochStats> = Vec::new();
    let mut warm_start = None;
    if checkpoint_path.exists() {
        let record = load_checkpoint(&checkpoint_path, Some(manifest.vocabulary.len()))?;
        prior_history = record.history.clone();
        if prior_history.len() >= train_cfg.max_epochs {
            println!(
                "checkpoint already trained for {} epochs (configured {}); nothing to do",
                prior_history.len(),
                train_cfg.max_epochs
            );
            return Ok(());
        }
        train_cfg.max_epochs -= prior_history.len();
        // fresh shuffles for the resumed epochs
        train_cfg.seed = train_cfg.seed.wrapping_add(prior_history.len() as u64);
        warm_start = Some(record);
        println!(
            "resuming from epoch {} ({} epochs remain)",
            prior_history.len(),
            train_cfg.max_epochs
        );
    }

    let (mut model, mut outcome) = match warm_start {
        None => train_cam_model(&manifest, data_dir, &config.cam.backbone, &train_cfg)?,
        Some(record) => {
            // warm start: rebuild, then continue with a fresh optimizer
            let mut model = cam_model_from_checkpoint(&record)?;
            let train_ids = manifest.ids_for(Split::Train);
            let val_ids = manifest.ids_for(Split::Test);
            let store = crate::dataset::ImageStore::preload(
                &manifest,
                data_dir,
                &train_ids.iter().chain(&val_ids).cloned().collect::<Vec<_>>(),
            )?;
            let fetch = |ids: &[String]| -> Result<crate::training::Batch> {
                let (images, targets) = store.batch(ids)?;
                Ok(crate::training::Batch {
                    images,
                    cams: None,
                    targets,
                })
            };
            let outcome =
                crate::training::fit(&mut model, &train_ids, &val_ids, &fetch, &train_cfg)?;
            crate::training::load_params(&mut model, &outcome.best_params)?;
            (model, outcome)
        }
    };
    renumber(&mut outcome.history, prior_history.len());
    let mut full_history = prior_history;
    full_history.extend(outcome.history.clone());
    outcome.history = full_history;

    let record = cam_checkpoint_record(
        &mut model,
        &config.cam.backbone,
        &config.cam.train,
        &outcome,
        manifest.vocabulary.len(),
    )?;
    save_checkpoint(&checkpoint_path, &record)?;
    write_history_csv(out_dir.join("history.csv"), &outcome.history)?;
    println!(
        "trained CAM model: best val loss {:.6} (epoch {:?}); checkpoint at {}",
        outcome.best_val_loss,
        outcome.best_epoch,
        checkpoint_path.display()
    );
    Ok(())
}

/// `export-cams`: writes the frozen model's maps for every sample.
pub fn cmd_export_cams(cam_checkpoint: &Path, data_dir: &Path, out_path: &Path) -> Result<()> {
    let manifest = DatasetManifest::load(data_dir)?;
    let record = load_checkpoint(cam_checkpoint, Some(manifest.vocabulary.len()))?;
    let mut model = cam_model_from_checkpoint(&record)?;
    let count = export_cams(&mut model, &manifest, data_dir, out_path)?;
    println!("exported {count} activation maps to {}", out_path.display());
    Ok(())
}

/// `train-classifier`: wires the variant graph and trains it jointly.
pub fn cmd_train_classifier(
    config: ExperimentConfig,
    data_dir: &Path,
    cam_checkpoint: Option<&Path>,
    out_dir: &Path,
    variant_override: Option<Variant>,
) -> Result<()> {
    let mut config = config;
    if let Some(v) = variant_override {
        config.variant = v;
    }
    config.validate()?;
    ensure_dir(out_dir)?;
    let manifest = DatasetManifest::load(data_dir)?;
    let variant = config.variant;

    let mut cam_model = None;
    let cam_store = if variant.uses_cam() {
        let path = cam_checkpoint.ok_or_else(|| {
            Error::Config(format!("variant {variant} requires --cam-checkpoint"))
        })?;
        let record = load_checkpoint(path, Some(manifest.vocabulary.len()))?;
        let mut model = cam_model_from_checkpoint(&record)?;
        let all_ids: Vec<String> = manifest.records.iter().map(|r| r.id.clone()).collect();
        let store = compute_cam_store(&mut model, &manifest, data_dir, &all_ids)?;
        cam_model = Some(model);
        Some(store)
    } else {
        if cam_checkpoint.is_some() {
            eprintln!("warning: variant rgb_baseline ignores --cam-checkpoint");
        }
        None
    };

    let (mut model, outcome) = train_classifier_stage(
        variant,
        &config,
        &manifest,
        data_dir,
        cam_store.as_ref(),
        &config.classifier.train,
    )?;
    let record = stage_checkpoint_record(
        &mut model,
        cam_model.as_mut(),
        &config,
        &outcome,
        manifest.vocabulary.len(),
    )?;
    let checkpoint_path = out_dir.join("checkpoint.ten");
    save_checkpoint(&checkpoint_path, &record)?;
    write_history_csv(out_dir.join("history.csv"), &outcome.history)?;
    println!(
        "trained {} classifier: best val loss {:.6} (epoch {:?}); checkpoint at {}",
        variant,
        outcome.best_val_loss,
        outcome.best_epoch,
        checkpoint_path.display()
    );
    Ok(())
}

/// Per-evaluation sidecar so reports are self-contained.
#[derive(serde::Serialize, serde::Deserialize)]
struct LabelStats {
    vocabulary: crate::dataset::LabelVocabulary,
    train_shares: Vec<f64>,
    majority: Vec<usize>,
}

/// `evaluate`: prediction dump, per-label report, PR plots.
pub fn cmd_evaluate(checkpoint: &Path, data_dir: &Path, out_dir: &Path) -> Result<()> {
    ensure_dir(out_dir)?;
    let manifest = DatasetManifest::load(data_dir)?;
    let record = load_checkpoint(checkpoint, Some(manifest.vocabulary.len()))?;
    let (mut model, cam_model, config) = stage_from_checkpoint(&record)?;
    let cam_store = match cam_model {
        Some(mut cam) => {
            let test_ids = manifest.ids_for(Split::Test);
            Some(compute_cam_store(&mut cam, &manifest, data_dir, &test_ids)?)
        }
        None => None,
    };
    let (probs, targets, ids) = evaluate_stage(
        &mut model,
        &manifest,
        data_dir,
        cam_store.as_ref(),
        Split::Test,
    )?;
    let report = per_label_report(&probs, &targets, &manifest.vocabulary)?;
    for warning in &report.warnings {
        eprintln!("warning: {warning}");
    }

    // prediction dump
    let mut writer = ArchiveWriter::create(out_dir.join("predictions.ten"))?;
    writer.put_f32("probabilities", &probs.clone().into_dyn())?;
    writer.put_f32("targets", &targets.clone().into_dyn())?;
    writer.put_json(
        "manifest",
        &serde_json::json!({
            "data_dir": data_dir.display().to_string(),
            "split": "test",
            "ids": ids,
            "variant": config.variant.name(),
        }),
    )?;
    writer.finish()?;

    // per-label AUC table
    let mut csv = String::from("label,auc,n_pos\n");
    for l in 0..manifest.vocabulary.len() {
        csv.push_str(&format!(
            "{},{},{}\n",
            manifest.vocabulary.name(l).replace(',', ";"),
            match report.auc[l] {
                Some(a) => format!("{a:.6}"),
                None => "absent".into(),
            },
            report.n_pos[l]
        ));
    }
    std::fs::write(out_dir.join("auc.csv"), csv)
        .map_err(|e| Error::io(out_dir.join("auc.csv"), e))?;

    // machine-readable report + train-split label stats for `report`
    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )
    .map_err(|e| Error::io(out_dir.join("report.json"), e))?;
    let train_dist = label_distribution(&manifest, Some(Split::Train))?;
    let stats = LabelStats {
        vocabulary: manifest.vocabulary.clone(),
        train_shares: train_dist.shares.clone(),
        majority: train_dist.majority.clone(),
    };
    std::fs::write(
        out_dir.join("label_stats.json"),
        serde_json::to_string_pretty(&stats)?,
    )
    .map_err(|e| Error::io(out_dir.join("label_stats.json"), e))?;

    if config.evaluation.render_plots {
        let mut curves = Vec::new();
        for l in 0..manifest.vocabulary.len() {
            if let Some(auc) = report.auc[l] {
                let scores: Vec<f64> = probs.column(l).iter().map(|v| *v as f64).collect();
                let labels: Vec<bool> = targets.column(l).iter().map(|v| *v > 0.5).collect();
                curves.push((
                    precision_recall_curve(&scores, &labels, manifest.vocabulary.name(l))?,
                    auc,
                ));
            }
        }
        crate::plots::render_pr_plots(&curves, out_dir)?;
    }
    println!(
        "evaluated {} ({} test samples); macro PR-AUC {}",
        config.variant,
        ids.len(),
        report
            .macro_auc()
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "absent".into())
    );
    Ok(())
}

fn delta_table_csv(outcome: &SeedOutcome, reference: Variant) -> Result<String> {
    let reference_outcome = outcome
        .get(reference)
        .ok_or_else(|| Error::Eval(format!("missing reference variant {reference}")))?;
    let vocab = &reference_outcome.report.vocabulary;
    let mut csv = String::from("variant");
    for name in &vocab.names {
        csv.push(',');
        csv.push_str(&name.replace(',', ";"));
    }
    csv.push_str(",macro\n");
    for variant in &outcome.variants {
        csv.push_str(variant.variant.name());
        for l in 0..vocab.len() {
            csv.push(',');
            match (variant.report.auc[l], reference_outcome.report.auc[l]) {
                (Some(v), Some(r)) => csv.push_str(&format!("{:+.4}", v - r)),
                _ => csv.push_str("absent"),
            }
        }
        csv.push(',');
        match (variant.macro_auc, reference_outcome.macro_auc) {
            (Some(v), Some(r)) => csv.push_str(&format!("{:+.4}", v - r)),
            _ => csv.push_str("absent"),
        }
        csv.push('\n');
    }
    Ok(csv)
}

/// `ablate`: all five variants under a shared budget for each seed, plus a
/// Table-3-shaped signed delta table per seed and a seed-mean table.
pub fn cmd_ablate(
    config: ExperimentConfig,
    data_dir: &Path,
    out_dir: &Path,
    seeds: &[u64],
) -> Result<()> {
    config.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed required".into()));
    }
    ensure_dir(out_dir)?;
    let manifest = DatasetManifest::load(data_dir)?;
    let variants = [
        Variant::SemanticDeconvD1,
        Variant::ManualReshape,
        Variant::PlainBackbone,
        Variant::SemanticDeconvD3,
        Variant::RgbBaseline,
    ];
    let mut outcomes = Vec::new();
    for &seed in seeds {
        println!("=== seed {seed} ===");
        let outcome = run_seed(&config, &manifest, data_dir, seed, &variants)?;
        let seed_dir = out_dir.join(format!("seed_{seed}"));
        ensure_dir(&seed_dir)?;
        std::fs::write(
            seed_dir.join("table.csv"),
            delta_table_csv(&outcome, Variant::SemanticDeconvD1)?,
        )
        .map_err(|e| Error::io(seed_dir.join("table.csv"), e))?;
        std::fs::write(
            seed_dir.join("outcome.json"),
            serde_json::to_string_pretty(&outcome)?,
        )
        .map_err(|e| Error::io(seed_dir.join("outcome.json"), e))?;
        for v in &outcome.variants {
            println!(
                "  {:<22} macro PR-AUC {}",
                v.variant.name(),
                v.macro_auc.map(|x| format!("{x:.4}")).unwrap_or_else(|| "absent".into())
            );
        }
        outcomes.push(outcome);
    }

    // seed-mean delta table
    let vocab = outcomes[0].variants[0].report.vocabulary.clone();
    let mut csv = String::from("variant");
    for name in &vocab.names {
        csv.push(',');
        csv.push_str(&name.replace(',', ";"));
    }
    csv.push_str(",macro\n");
    for variant in variants {
        csv.push_str(variant.name());
        for l in 0..=vocab.len() {
            let mut deltas = Vec::new();
            for outcome in &outcomes {
                let v = outcome.get(variant).unwrap();
                let r = outcome.get(Variant::SemanticDeconvD1).unwrap();
                let pair = if l < vocab.len() {
                    (v.report.auc[l], r.report.auc[l])
                } else {
                    (v.macro_auc, r.macro_auc)
                };
                if let (Some(a), Some(b)) = pair {
                    deltas.push(a - b);
                }
            }
            csv.push(',');
            if deltas.is_empty() {
                csv.push_str("absent");
            } else {
                csv.push_str(&format!(
                    "{:+.4}",
                    deltas.iter().sum::<f64>() / deltas.len() as f64
                ));
            }
        }
        csv.push('\n');
    }
    std::fs::write(out_dir.join("table.csv"), csv)
        .map_err(|e| Error::io(out_dir.join("table.csv"), e))?;
    std::fs::write(
        out_dir.join("outcomes.json"),
        serde_json::to_string_pretty(&outcomes)?,
    )
    .map_err(|e| Error::io(out_dir.join("outcomes.json"), e))?;
    println!("wrote per-seed tables and seed-mean table under {}", out_dir.display());
    Ok(())
}

/// `report`: merges two evaluation directories (baseline first) into one
/// Markdown report with relative improvement and majority/minority sections.
pub fn cmd_report(input_dirs: &[PathBuf], out_path: &Path) -> Result<()> {
    if input_dirs.len() != 2 {
        return Err(Error::Config(
            "report expects exactly two evaluation directories: <baseline> <candidate>".into(),
        ));
    }
    let load_report = |dir: &Path| -> Result<(LabelAucReport, LabelStats)> {
        let report: LabelAucReport = serde_json::from_str(
            &std::fs::read_to_string(dir.join("report.json"))
                .map_err(|e| Error::io(dir.join("report.json"), e))?,
        )?;
        let stats: LabelStats = serde_json::from_str(
            &std::fs::read_to_string(dir.join("label_stats.json"))
                .map_err(|e| Error::io(dir.join("label_stats.json"), e))?,
        )?;
        Ok((report, stats))
    };
    let (baseline, base_stats) = load_report(&input_dirs[0])?;
    let (candidate, cand_stats) = load_report(&input_dirs[1])?;
    if baseline.vocabulary != candidate.vocabulary {
        return Err(Error::Config("vocabulary mismatch between evaluations".into()));
    }
    if base_stats.train_shares != cand_stats.train_shares {
        eprintln!("warning: evaluations come from different train distributions; using the baseline's");
    }
    let comparison = ComparisonReport::new(baseline, candidate)?;
    let groups = majority_minority_aggregate(&comparison, &base_stats.train_shares)?;

    let mut md = String::from("# Evaluation comparison\n\n");
    md.push_str(&format!(
        "- baseline: `{}`\n- candidate: `{}`\n\n",
        input_dirs[0].display(),
        input_dirs[1].display()
    ));
    md.push_str(&comparison_table_markdown(&comparison, "Per-label PR-AUC"));
    md.push_str("\n## Majority / minority relative improvement\n\n");
    md.push_str(&format!(
        "Majority labels (train-split share > 5%): {}\n\n",
        groups
            .majority_labels
            .iter()
            .map(|l| comparison.baseline.vocabulary.name(*l).to_string())
            .collect::<Vec<_>>()
            .join(", ")
    ));
    md.push_str(&format!(
        "| group | mean relative improvement |\n|---|---|\n| majority | {} |\n| minority | {} |\n",
        groups
            .majority_avg
            .map(|v| format!("{v:.2}%"))
            .unwrap_or_else(|| "absent".into()),
        groups
            .minority_avg
            .map(|v| format!("{v:.2}%"))
            .unwrap_or_else(|| "absent".into()),
    ));
    for w in groups.warnings.iter().chain(&comparison.baseline.warnings) {
        md.push_str(&format!("\n> note: {w}\n"));
    }
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    std::fs::write(out_path, &md).map_err(|e| Error::io(out_path, e))?;

    // CSV twin next to the Markdown
    let csv_path = out_path.with_extension("csv");
    std::fs::write(&csv_path, comparison_table_csv(&comparison))
        .map_err(|e| Error::io(&csv_path, e))?;
    println!("wrote {} and {}", out_path.display(), csv_path.display());
    Ok(())
}

/// Reads a predictions archive back into matrices (used by tests and
/// downstream tooling).
pub fn read_predictions(path: &Path) -> Result<(Array2<f32>, Array2<f32>)> {
    let archive = Archive::open(path)?;
    let probs = archive
        .get_f32("probabilities")?
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| Error::Format("probabilities not rank 2".into()))?
        .to_owned();
    let targets = archive
        .get_f32("targets")?
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| Error::Format("targets not rank 2".into()))?
        .to_owned();
    Ok((probs, targets))
}

/// Stable content hash of a directory tree (file names + bytes), for
/// idempotence checks.
pub fn tree_digest(dir: &Path) -> Result<u64> {
    fn walk(dir: &Path, files: &mut BTreeMap<String, PathBuf>, root: &Path) -> Result<()> {
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let path = entry.path();
            if path.is_dir() {
                walk(&path, files, root)?;
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                files.insert(rel, path);
            }
        }
        Ok(())
    }
    let mut files = BTreeMap::new();
    walk(dir, &mut files, dir)?;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (name, path) in files {
        for b in name.bytes() {
            h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
        }
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        for b in bytes {
            h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
        }
    }
    Ok(h)
}
