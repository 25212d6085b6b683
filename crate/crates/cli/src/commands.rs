use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use contextformer::linear::{run_context_sweep, sweep_to_csv};
use contextformer::model::{BaseForecaster, ContextFormerModel, Model, ModelConfig};
use contextformer::synth::{
    gen_arma_sequences, normalize, read_dataset, write_dataset, DatasetSplit,
};
use contextformer::train::{
    evaluate, finetune_context, history_to_csv, load_checkpoint, save_checkpoint, train_base,
    EvalReport,
};

use crate::config::ExperimentConfig;
use crate::output::{write_dir, write_file};

pub const BASE_CHECKPOINT: &str = "base";
pub const CONTEXT_CHECKPOINT: &str = "context";
pub const DATA_DIR: &str = "data";

pub fn synth_gen(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = gen_arma_sequences(&cfg.arma()?)?;
    write_dir(out, |dir| Ok(write_dataset(dir, &data)?))?;
    log::info!(
        "wrote {} train / {} val / {} test sequences to {}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        out.display()
    );
    Ok(())
}

pub fn ar_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let rows = run_context_sweep(&cfg.sweep_config()?)?;
    write_file(out, sweep_to_csv(&rows).as_bytes())?;
    for r in &rows {
        log::info!("q={} mean mse {:.6}", r.q, r.mean_mse);
    }
    Ok(())
}

/// Normalised windows of a dataset directory.
pub fn load_data(dir: &Path) -> Result<DatasetSplit> {
    let (seqs, _) =
        read_dataset(dir).with_context(|| format!("cannot load dataset {}", dir.display()))?;
    Ok(normalize(&seqs.windowed()?)?)
}

fn model_config(cfg: &ExperimentConfig, data: &DatasetSplit) -> ModelConfig {
    ModelConfig {
        arch: cfg.model.clone(),
        lookback: data.info.lookback,
        horizon: data.info.horizon,
        n_channels: data.info.n_channels,
        schema: data.info.schema.clone(),
    }
}

fn check_data_matches(model: &ModelConfig, data: &DatasetSplit) -> Result<()> {
    let i = &data.info;
    ensure!(
        model.lookback == i.lookback
            && model.horizon == i.horizon
            && model.n_channels == i.n_channels
            && model.schema == i.schema,
        "checkpoint expects lookback {} / horizon {} / {} channels / {:?}, dataset has {} / {} / {} / {:?}",
        model.lookback,
        model.horizon,
        model.n_channels,
        model.schema,
        i.lookback,
        i.horizon,
        i.n_channels,
        i.schema
    );
    Ok(())
}

pub fn train_base_cmd(cfg: &ExperimentConfig, data_dir: &Path, run: &Path) -> Result<()> {
    let data = load_data(data_dir)?;
    let tcfg = cfg.train_config();
    let mut model = BaseForecaster::new(model_config(cfg, &data), cfg.model_seed())?;
    let outcome = train_base(&mut model, &data.train, &data.val, &tcfg)?;
    write_file(
        &run.join("base_loss.csv"),
        history_to_csv(&outcome.history).as_bytes(),
    )?;
    let model = Model::Base(model);
    write_dir(&run.join(BASE_CHECKPOINT), |dir| {
        Ok(save_checkpoint(&model, Some(&outcome.optimizer), dir)?)
    })
}

pub fn finetune_cmd(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    base_dir: &Path,
    run: &Path,
) -> Result<()> {
    let data = load_data(data_dir)?;
    let (base, _) = load_checkpoint(base_dir)
        .with_context(|| format!("cannot load base checkpoint {}", base_dir.display()))?;
    let Model::Base(base) = base else {
        bail!(
            "{} holds a context model, not a base model",
            base_dir.display()
        );
    };
    check_data_matches(contextformer::model::Forecaster::config(&base), &data)?;
    let mut model =
        ContextFormerModel::attach(&base, &model_config(cfg, &data), cfg.context_seed())?;
    let outcome = finetune_context(&mut model, &data.train, &data.val, &cfg.train_config())?;
    write_file(
        &run.join("context_loss.csv"),
        history_to_csv(&outcome.history).as_bytes(),
    )?;
    let model = Model::Context(model);
    write_dir(&run.join(CONTEXT_CHECKPOINT), |dir| {
        Ok(save_checkpoint(&model, Some(&outcome.optimizer), dir)?)
    })
}

pub fn method_name(model: &Model) -> &'static str {
    match model {
        Model::Base(_) => "context-agnostic",
        Model::Context(_) => "context-aware",
    }
}

pub fn eval_cmd(
    checkpoint: &Path,
    data_dir: &Path,
    split: &str,
    out: Option<&Path>,
) -> Result<EvalReport> {
    let (model, _) = load_checkpoint(checkpoint)
        .with_context(|| format!("cannot load checkpoint {}", checkpoint.display()))?;
    let data = load_data(data_dir)?;
    check_data_matches(model.as_forecaster().config(), &data)?;
    let samples = data
        .part(split)
        .ok_or_else(|| anyhow!("unknown split {split:?}; expected train, val or test"))?;
    let m = evaluate(model.as_forecaster(), samples)?;
    let report = EvalReport {
        split: split.to_string(),
        method: method_name(&model).to_string(),
        mae: m.mae,
        mse: m.mse,
    };
    let out = match out {
        Some(p) => p.to_path_buf(),
        None => checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval_{}_{split}.json", model.kind())),
    };
    let json = serde_json::to_string_pretty(&report)? + "\n";
    write_file(&out, json.as_bytes())?;
    Ok(report)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Reports found in one run directory, ordered by file name.
fn run_reports(dir: &Path) -> Result<Vec<EvalReport>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot read run directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned());
            name.is_some_and(|n| n.starts_with("eval_") && n.ends_with(".json"))
        })
        .collect();
    paths.sort();
    ensure!(
        !paths.is_empty(),
        "no eval_*.json reports in {}",
        dir.display()
    );
    paths
        .iter()
        .map(|p| {
            let text =
                fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("invalid report {}", p.display()))
        })
        .collect()
}

/// Comparison table `run,method,split,mae,mse`. Repeated run names get `-2`,
/// `-3`, … in order of appearance.
pub fn report_cmd(runs: &[PathBuf], out: &Path) -> Result<()> {
    ensure!(!runs.is_empty(), "no run directories given");
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut csv = String::from("run,method,split,mae,mse\n");
    for dir in runs {
        let base = dir
            .canonicalize()
            .unwrap_or_else(|_| dir.clone())
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let count = seen.entry(base.clone()).or_insert(0);
        *count += 1;
        let name = if *count == 1 {
            base
        } else {
            format!("{base}-{count}")
        };
        for r in run_reports(dir)? {
            csv.push_str(&format!(
                "{},{},{},{:.16e},{:.16e}\n",
                csv_field(&name),
                csv_field(&r.method),
                csv_field(&r.split),
                r.mae,
                r.mse
            ));
        }
    }
    write_file(out, csv.as_bytes())
}
