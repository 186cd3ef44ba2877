use std::path::{Path, PathBuf};

use log::{info, warn};
use serde_json::json;

use super::ablation::run_ablation;
use super::artifacts::{load_data, model_for, DataArtifact, CHECKPOINT_FILE, DATASET_FILE, LOG_FILE};
use super::{Command, Common, Inputs, RunConfig, OUTPUT_ENV};
use crate::data::events::read_events_file;
use crate::data::registry::FeatureRegistry;
use crate::data::split::{stratified_split, Split};
use crate::data::store::{self, file_sha256, sha256_hex, write_atomic, Manifest};
use crate::data::synth::synth_generate;
use crate::data::{finalize, preprocess_events, read_labels, Dataset, StayLabels, TokenArray};
use crate::eval::{
    auprc, auroc, embeddings, fit_medians, imputation_sweep, linear_probe, median_imputed, predict_logits,
    single_value_reconstruction, ProbeRow, ProbeSummary, RegressionMetrics, ReconReport, SweepMode,
};
use crate::model::Model;
use crate::trainer::{finetune, labelled, write_log_csv, Checkpoint, Pretrainer};
use crate::{Error, Result};

pub(super) fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            common,
            num_samples,
            variant,
        } => {
            let (cfg, out) = setup(&common, "synth", |c| {
                if let Some(n) = num_samples {
                    c.synth.num_samples = n;
                }
                if let Some(v) = variant {
                    c.data.split.variant = v;
                }
                if let Some(s) = common.seed {
                    c.synth.seed = s;
                }
            })?;
            synth(&cfg, &out)
        }
        Command::Preprocess {
            common,
            events,
            labels,
            registry,
            time_format,
            cut_time,
            variant,
        } => {
            let (cfg, out) = setup(&common, "preprocess", |c| {
                let d = &mut c.data;
                d.events = events.or(d.events.take());
                d.labels = labels.or(d.labels.take());
                d.registry = registry.or(d.registry.take());
                d.time_format = time_format.unwrap_or(d.time_format);
                d.split.cut_time = cut_time.or(d.split.cut_time);
                d.split.variant = variant.unwrap_or(d.split.variant);
            })?;
            preprocess(&cfg, &out)
        }
        Command::Pretrain {
            common,
            data,
            epochs,
            mask_a,
            mask_b,
            batch_size,
            resume,
        } => {
            let (cfg, out) = setup(&common, "pretrain", |c| {
                c.schedule.max_epochs = epochs.unwrap_or(c.schedule.max_epochs);
                c.masking.a = mask_a.unwrap_or(c.masking.a);
                c.masking.b = mask_b.unwrap_or(c.masking.b);
                c.pretrain.batch_size = batch_size.unwrap_or(c.pretrain.batch_size);
            })?;
            pretrain(&cfg, &out, &data, resume.then_some(epochs))
        }
        Command::Finetune {
            common,
            inputs,
            task,
            epochs,
            freeze_encoder,
        } => {
            let (cfg, out) = setup(&common, "finetune", |c| {
                c.eval.task = task.unwrap_or(c.eval.task.clone());
                c.finetune.max_epochs = epochs.unwrap_or(c.finetune.max_epochs);
                c.finetune.freeze_encoder |= freeze_encoder;
                eval_overrides(c, &inputs);
            })?;
            finetune_cmd(&cfg, &out, &inputs)
        }
        Command::Probe {
            common,
            inputs,
            task,
            fractions,
            seeds,
            baseline,
        } => {
            let (cfg, out) = setup(&common, "probe", |c| {
                c.eval.task = task.unwrap_or(c.eval.task.clone());
                c.eval.probe.fractions = fractions.unwrap_or(c.eval.probe.fractions.clone());
                c.eval.probe.seeds = seeds.unwrap_or(c.eval.probe.seeds.clone());
                eval_overrides(c, &inputs);
            })?;
            probe(&cfg, &out, &inputs, baseline)
        }
        Command::Reconstruct { common, inputs } => {
            let (cfg, out) = setup(&common, "reconstruct", |c| eval_overrides(c, &inputs))?;
            reconstruct(&cfg, &out, &inputs)
        }
        Command::Sweep {
            common,
            inputs,
            ratios,
            panels,
        } => {
            let (cfg, out) = setup(&common, "sweep", |c| {
                c.eval.ratios = ratios.unwrap_or(c.eval.ratios.clone());
                c.eval.panels = panels.unwrap_or(c.eval.panels.clone());
                eval_overrides(c, &inputs);
            })?;
            sweep(&cfg, &out, &inputs)
        }
        Command::Embed { common, inputs } => {
            let (cfg, out) = setup(&common, "embed", |c| eval_overrides(c, &inputs))?;
            embed(&cfg, &out, &inputs)
        }
        Command::Ablate { common, data, epochs } => {
            let (cfg, out) = setup(&common, "ablate", |c| {
                c.schedule.max_epochs = epochs.unwrap_or(c.schedule.max_epochs);
                if let Some(s) = common.seed {
                    c.synth.seed = s;
                }
            })?;
            ablate(&cfg, &out, data.as_deref())
        }
    }
}

fn eval_overrides(c: &mut RunConfig, inputs: &Inputs) {
    c.eval.batch_size = inputs.batch_size.unwrap_or(c.eval.batch_size);
}

/// Loads the config, applies overrides and creates the output directory.
fn setup(common: &Common, command: &str, overrides: impl FnOnce(&mut RunConfig)) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    overrides(&mut cfg);
    let out = match &common.output_dir {
        Some(d) => d.clone(),
        None => cfg
            .output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(command),
    };
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    info!("{command}: writing to {}", out.display());
    Ok((cfg, out))
}

/// Writes `bytes` to `dir/name` and records its hash in `manifest`.
fn put(manifest: &mut Manifest, dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    write_atomic(&dir.join(name), bytes)?;
    manifest.outputs.insert(name.into(), sha256_hex(bytes));
    Ok(())
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| Error::Data(format!("csv buffer: {e}")))
}

fn metric_cells(m: Option<&RegressionMetrics>) -> [String; 3] {
    match m {
        Some(m) => [m.nrmse.to_string(), m.nmae.to_string(), m.r2.to_string()],
        None => Default::default(),
    }
}

fn dataset_details(data: &Dataset, split: &Split) -> serde_json::Value {
    json!({
        "samples": data.samples.len(),
        "grid_len": data.grid_len(),
        "features": data.layout.features.len(),
        "train": split.train.len(),
        "val": split.val.len(),
        "test": split.test.len(),
    })
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let dataset = synth_generate(&cfg.synth)?;
    let processed = finalize(dataset, cfg.synth.cut_time(), &cfg.data.split, cfg.seed)?;
    let mut manifest = Manifest::new("synth", cfg.seed, cfg.to_value());
    let hash = store::save(&out.join(DATASET_FILE), &processed)?;
    manifest.outputs.insert(DATASET_FILE.into(), hash.clone());
    manifest.details = dataset_details(&processed.dataset, &processed.split);
    manifest.save(out)?;
    println!(
        "synth: {} samples, L={}, dataset sha256 {hash}",
        processed.dataset.samples.len(),
        processed.dataset.grid_len()
    );
    Ok(())
}

fn preprocess(cfg: &RunConfig, out: &Path) -> Result<()> {
    let d = &cfg.data;
    let events_path = d
        .events
        .as_deref()
        .ok_or_else(|| Error::Config("preprocess needs data.events or --events".into()))?;
    let registry = match &d.registry {
        Some(p) => FeatureRegistry::load(p)?,
        None => FeatureRegistry::mimic_iv(),
    };
    let events = read_events_file(events_path, d.time_format)?;
    let mut manifest = Manifest::new("preprocess", cfg.seed, cfg.to_value());
    manifest.inputs.insert("events".into(), file_sha256(events_path)?);
    manifest.inputs.insert("registry".into(), registry.hash());
    let labels: StayLabels = match &d.labels {
        Some(p) => {
            manifest.inputs.insert("labels".into(), file_sha256(p)?);
            read_labels(std::fs::File::open(p).map_err(|e| Error::io(p, e))?)?
        }
        None => StayLabels::new(),
    };
    let (processed, stats) = preprocess_events(&registry, &events, &labels, &d.split, cfg.seed)?;
    let hash = store::save(&out.join(DATASET_FILE), &processed)?;
    manifest.outputs.insert(DATASET_FILE.into(), hash.clone());
    let constant: Vec<&str> = processed
        .normalizer
        .as_ref()
        .map(|n| n.constant_features())
        .unwrap_or_default()
        .into_iter()
        .map(|f| processed.dataset.layout.features[f].name.as_str())
        .collect();
    manifest.details = json!({
        "dataset": dataset_details(&processed.dataset, &processed.split),
        "grid": stats,
        "constant_features": constant,
    });
    manifest.save(out)?;
    println!(
        "preprocess: {} events -> {} samples, L={}, dataset sha256 {hash}",
        events.len(),
        processed.dataset.samples.len(),
        processed.dataset.grid_len()
    );
    Ok(())
}

fn fresh_model(cfg: &RunConfig, data: &Dataset) -> Result<Model> {
    let mut mc = cfg.model.clone();
    if mc.grid_len != 0 && mc.grid_len != data.grid_len() {
        return Err(Error::Config(format!(
            "model.grid_len {} differs from the dataset's {}",
            mc.grid_len,
            data.grid_len()
        )));
    }
    mc.grid_len = data.grid_len();
    Model::new(mc, cfg.seed)
}

/// `resume` carries the `--epochs` override when continuing a run.
fn pretrain(cfg: &RunConfig, out: &Path, data_dir: &Path, resume: Option<Option<usize>>) -> Result<()> {
    let data = load_data(data_dir)?;
    let dataset = &data.processed.dataset;
    let split = &data.processed.split;
    let ck_path = out.join(CHECKPOINT_FILE);
    let mut trainer = match resume {
        Some(epochs) => {
            let mut state = Checkpoint::load(&ck_path)?;
            if let Some(e) = epochs {
                state.config.schedule.max_epochs = e;
            }
            info!("resuming from epoch {}", state.epoch);
            Pretrainer::resume(state, dataset, split)?
        }
        None => Pretrainer::new(fresh_model(cfg, dataset)?, dataset, split, cfg.pretrain_config(), cfg.seed)?,
    };
    let max = trainer.state.config.schedule.max_epochs;
    let every = cfg.pretrain.checkpoint_every.max(1);
    loop {
        let next = (trainer.state.epoch + every).min(max);
        trainer.train(Some(next))?;
        trainer.state.save(&ck_path)?;
        write_log_csv(&out.join(LOG_FILE), &trainer.state.log)?;
        if trainer.state.epoch >= max {
            break;
        }
    }
    let state = &trainer.state;
    let mut manifest = Manifest::new("pretrain", state.seed, cfg.to_value());
    manifest.inputs.insert(DATASET_FILE.into(), data.hash.clone());
    manifest.outputs.insert(CHECKPOINT_FILE.into(), file_sha256(&ck_path)?);
    manifest.outputs.insert(LOG_FILE.into(), file_sha256(&out.join(LOG_FILE))?);
    let last = state.log.last();
    manifest.details = json!({
        "epochs": state.epoch,
        "best_epoch": state.best_epoch,
        "best_val_total": state.best_val,
        "final_train_total": last.map(|l| l.train.total),
        "parameters": state.model.store.num_weights(),
    });
    manifest.save(out)?;
    println!(
        "pretrain: {} epochs, best validation loss {} at epoch {}",
        state.epoch,
        state.best_val.map_or("-".into(), |v| format!("{v:.6}")),
        state.best_epoch.map_or("-".into(), |e| e.to_string())
    );
    Ok(())
}

/// Data, model and upstream hashes shared by the evaluation commands.
struct EvalInputs {
    data: DataArtifact,
    model: Model,
    manifest: Manifest,
}

fn eval_inputs(command: &str, cfg: &RunConfig, inputs: &Inputs) -> Result<EvalInputs> {
    let data = load_data(&inputs.data)?;
    let mut manifest = Manifest::new(command, cfg.seed, cfg.to_value());
    manifest.inputs.insert(DATASET_FILE.into(), data.hash.clone());
    if let Some(dir) = &inputs.checkpoint {
        let ck = Manifest::load(dir)?;
        if let Some(h) = ck.outputs.get(CHECKPOINT_FILE) {
            manifest.inputs.insert(CHECKPOINT_FILE.into(), h.clone());
        }
    } else {
        warn!("{command}: no --checkpoint, using a randomly initialised model");
    }
    let model = model_for(inputs.checkpoint.as_deref(), &data, || fresh_model(cfg, &data.processed.dataset))?;
    Ok(EvalInputs { data, model, manifest })
}

fn task_split(cfg: &RunConfig, data: &Dataset) -> Result<Split> {
    let task = &cfg.eval.task;
    if data.labeled(task).is_empty() {
        return Err(Error::Data(format!("no samples carry a label for task {task:?}")));
    }
    stratified_split(&data.samples, task, cfg.eval.split_fractions, cfg.seed)
}

fn finetune_cmd(cfg: &RunConfig, out: &Path, inputs: &Inputs) -> Result<()> {
    let EvalInputs {
        data,
        mut model,
        mut manifest,
    } = eval_inputs("finetune", cfg, inputs)?;
    let dataset = &data.processed.dataset;
    let task = &cfg.eval.task;
    let split = task_split(cfg, dataset)?;
    let mut ft = cfg.finetune.clone();
    ft.batch_size = ft.batch_size.max(1);
    let report = finetune(&mut model, dataset, &split.train, &split.val, task, &ft, cfg.seed)?;
    let (test_s, test_y) = labelled(dataset, &split.test, task, "test")?;
    let scores = predict_logits(&model, &test_s, cfg.eval.batch_size)?;
    let (test_auroc, test_auprc) = (auroc(&scores, &test_y)?, auprc(&scores, &test_y)?);
    let rows: Vec<Vec<String>> = report
        .history
        .iter()
        .map(|h| vec![h.epoch.to_string(), h.train_loss.to_string(), h.val_auroc.to_string()])
        .collect();
    put(&mut manifest, out, "finetune_log.csv", &csv_bytes(&["epoch", "train_loss", "val_auroc"], &rows)?)?;
    put(&mut manifest, out, "model.json", serde_json::to_string(&model)?.as_bytes())?;
    let metrics = json!({
        "task": task,
        "best_epoch": report.best_epoch,
        "best_val_auroc": report.best_val_auroc,
        "epochs_run": report.epochs_run,
        "test_auroc": test_auroc,
        "test_auprc": test_auprc,
        "n_test": test_y.len(),
    });
    put(&mut manifest, out, "metrics.json", serde_json::to_string_pretty(&metrics)?.as_bytes())?;
    manifest.details = metrics;
    manifest.save(out)?;
    println!("finetune {task}: test AUROC {test_auroc:.4} AUPRC {test_auprc:.4} (best epoch {})", report.best_epoch);
    Ok(())
}

fn probe(cfg: &RunConfig, out: &Path, inputs: &Inputs, baseline: bool) -> Result<()> {
    let EvalInputs {
        data,
        model,
        mut manifest,
    } = eval_inputs("probe", cfg, inputs)?;
    let dataset = &data.processed.dataset;
    let task = &cfg.eval.task;
    let split = task_split(cfg, dataset)?;
    let (train_s, train_y) = labelled(dataset, &split.train, task, "training")?;
    let (test_s, test_y) = labelled(dataset, &split.test, task, "test")?;
    let bs = cfg.eval.batch_size;
    let mut runs: Vec<(&str, Vec<ProbeRow>, Vec<ProbeSummary>)> = Vec::new();
    let (rows, summary) = linear_probe(
        &embeddings(&model, &train_s, bs)?,
        &train_y,
        &embeddings(&model, &test_s, bs)?,
        &test_y,
        &cfg.eval.probe,
    )?;
    runs.push(("embedding", rows, summary));
    if baseline {
        let medians = fit_medians(&train_s);
        let (rows, summary) = linear_probe(
            &median_imputed(&train_s, &medians),
            &train_y,
            &median_imputed(&test_s, &medians),
            &test_y,
            &cfg.eval.probe,
        )?;
        runs.push(("raw_median", rows, summary));
    }
    let mut long = Vec::new();
    let mut short = Vec::new();
    for (features, rows, summary) in &runs {
        for r in rows {
            long.push(vec![
                features.to_string(),
                r.fraction.to_string(),
                r.seed.to_string(),
                r.n_train.to_string(),
                r.auroc.to_string(),
                r.auprc.to_string(),
                r.converged.to_string(),
            ]);
        }
        for s in summary {
            println!("probe {features} {}%: AUROC {} AUPRC {}", s.fraction, s.auroc, s.auprc);
            short.push(vec![
                features.to_string(),
                s.fraction.to_string(),
                s.auroc.mean.to_string(),
                s.auroc.sd.to_string(),
                s.auprc.mean.to_string(),
                s.auprc.sd.to_string(),
                s.auroc.n.to_string(),
            ]);
        }
    }
    let header = ["features", "fraction", "seed", "n_train", "auroc", "auprc", "converged"];
    put(&mut manifest, out, "probe.csv", &csv_bytes(&header, &long)?)?;
    let header = ["features", "fraction", "auroc_mean", "auroc_sd", "auprc_mean", "auprc_sd", "seeds"];
    put(&mut manifest, out, "probe_summary.csv", &csv_bytes(&header, &short)?)?;
    manifest.details = json!({ "task": task, "n_train": train_y.len(), "n_test": test_y.len() });
    manifest.save(out)?;
    Ok(())
}

fn usable(data: &Dataset, idx: &[usize]) -> Vec<usize> {
    idx.iter().copied().filter(|&i| data.samples[i].num_observed() > 0).collect()
}

fn report_rows(setting: &str, report: &ReconReport) -> Vec<Vec<String>> {
    report
        .per_feature
        .iter()
        .map(|f| {
            let mut row = vec![setting.to_string(), f.feature.clone(), f.count.to_string()];
            row.extend(metric_cells(f.metrics.as_ref()));
            row.extend(metric_cells(f.raw.as_ref()));
            row.push(f.note.clone().unwrap_or_default());
            row
        })
        .collect()
}

const FEATURE_HEADER: [&str; 10] = [
    "setting", "feature", "count", "nrmse", "nmae", "r2", "raw_nrmse", "raw_nmae", "raw_r2", "note",
];

fn reconstruct(cfg: &RunConfig, out: &Path, inputs: &Inputs) -> Result<()> {
    let EvalInputs {
        data,
        model,
        mut manifest,
    } = eval_inputs("reconstruct", cfg, inputs)?;
    let p = &data.processed;
    let idx = usable(&p.dataset, &p.split.test);
    let report = single_value_reconstruction(&model, &p.dataset, p.normalizer.as_ref(), &idx, cfg.eval.batch_size)?;
    put(&mut manifest, out, "recon.csv", &csv_bytes(&FEATURE_HEADER, &report_rows("single_value", &report))?)?;
    put(&mut manifest, out, "recon.json", serde_json::to_string_pretty(&report)?.as_bytes())?;
    manifest.details = json!({ "mean": report.mean, "evaluated": report.evaluated, "skipped": report.skipped });
    manifest.save(out)?;
    match report.mean {
        Some(m) => println!("reconstruct: NRMSE {:.4} NMAE {:.4} R2 {:.4} over {} hidden features", m.nrmse, m.nmae, m.r2, report.evaluated),
        None => println!("reconstruct: no feature had defined metrics"),
    }
    Ok(())
}

fn sweep(cfg: &RunConfig, out: &Path, inputs: &Inputs) -> Result<()> {
    let EvalInputs {
        data,
        model,
        mut manifest,
    } = eval_inputs("sweep", cfg, inputs)?;
    let p = &data.processed;
    let idx = usable(&p.dataset, &p.split.test);
    let modes: Vec<SweepMode> = cfg
        .eval
        .ratios
        .iter()
        .map(|&r| SweepMode::Random(r))
        .chain(cfg.eval.panels.iter().cloned().map(SweepMode::Panel))
        .collect();
    let mut rows = Vec::new();
    let mut long = Vec::new();
    for mode in &modes {
        let report = imputation_sweep(&model, &p.dataset, p.normalizer.as_ref(), &idx, mode, cfg.seed, cfg.eval.batch_size)?;
        let label = mode.label();
        let mut row = vec![label.clone(), report.evaluated.to_string(), report.skipped.to_string()];
        row.extend(metric_cells(report.mean.as_ref()));
        println!("sweep {label}: {}", row[3..].join(" "));
        rows.push(row);
        long.extend(report_rows(&label, &report));
    }
    let header = ["setting", "evaluated", "skipped", "nrmse", "nmae", "r2"];
    put(&mut manifest, out, "sweep.csv", &csv_bytes(&header, &rows)?)?;
    put(&mut manifest, out, "sweep_features.csv", &csv_bytes(&FEATURE_HEADER, &long)?)?;
    manifest.save(out)?;
    Ok(())
}

fn embed(cfg: &RunConfig, out: &Path, inputs: &Inputs) -> Result<()> {
    let EvalInputs {
        data,
        model,
        mut manifest,
    } = eval_inputs("embed", cfg, inputs)?;
    let p = &data.processed;
    let mut part = vec!["none"; p.dataset.samples.len()];
    for (name, idx) in [("train", &p.split.train), ("val", &p.split.val), ("test", &p.split.test)] {
        idx.iter().for_each(|&i| part[i] = name);
    }
    let all: Vec<usize> = (0..p.dataset.samples.len()).collect();
    let idx = usable(&p.dataset, &all);
    let samples: Vec<&TokenArray> = idx.iter().map(|&i| &p.dataset.samples[i]).collect();
    let emb = embeddings(&model, &samples, cfg.eval.batch_size)?;
    let d = emb.first().map_or(0, Vec::len);
    let mut header: Vec<String> = ["subject_id", "stay_id", "day_index", "split"].map(String::from).to_vec();
    header.extend((0..d).map(|k| format!("e{k}")));
    let rows: Vec<Vec<String>> = idx
        .iter()
        .zip(&emb)
        .map(|(&i, e)| {
            let s = &p.dataset.samples[i];
            let mut row = vec![s.subject_id.clone(), s.stay_id.clone(), s.day_index.to_string(), part[i].into()];
            row.extend(e.iter().map(f64::to_string));
            row
        })
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    put(&mut manifest, out, "embeddings.csv", &csv_bytes(&header, &rows)?)?;
    manifest.details = json!({ "embedded": idx.len(), "skipped_empty": all.len() - idx.len(), "dim": d });
    manifest.save(out)?;
    println!("embed: {} samples, dimension {d}", idx.len());
    Ok(())
}

fn ablate(cfg: &RunConfig, out: &Path, data_dir: Option<&Path>) -> Result<()> {
    let mut manifest = Manifest::new("ablate", cfg.seed, cfg.to_value());
    let base = match data_dir {
        Some(dir) => {
            let data = load_data(dir)?;
            manifest.inputs.insert(DATASET_FILE.into(), data.hash.clone());
            data.processed
        }
        None => finalize(synth_generate(&cfg.synth)?, cfg.synth.cut_time(), &cfg.data.split, cfg.seed)?,
    };
    let rows = run_ablation(cfg, &base)?;
    let body: Vec<Vec<String>> = rows.iter().map(|r| r.cells()).collect();
    put(&mut manifest, out, "ablation.csv", &csv_bytes(&super::AblationRow::HEADER, &body)?)?;
    manifest.details = json!({ "cells": rows.len() });
    manifest.save(out)?;
    println!("ablate: {} cells written to {}", rows.len(), out.join("ablation.csv").display());
    Ok(())
}
