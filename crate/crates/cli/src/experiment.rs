//! Training runs and tau_max sweeps.

use std::fs;
use std::io::Write;
use std::path::Path;

use adamole::training::routing_entropy_ratio;
use adamole::{train, MixMode, ParamGroup, ToyModel, TrainReport};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mode: MixMode,
    pub n_experts: usize,
    pub lora_rank: usize,
    pub seed: u64,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
    pub chance_accuracy: f64,
    pub majority_baseline: f64,
    pub avg_active_experts: Option<f64>,
    pub routing_entropy_ratio: f64,
    pub trainable_params: usize,
    pub adapter_params: usize,
    pub router_params: usize,
    pub head_params: usize,
}

pub struct RunOutput {
    pub metrics: Metrics,
    pub report: TrainReport,
    pub model: ToyModel,
}

/// Generates the task, builds the model and trains it. Writes nothing.
pub fn run_experiment(cfg: &ExperimentConfig) -> CliResult<RunOutput> {
    cfg.validate()?;
    let task = cfg.task.generate(cfg.train.seed)?;
    let mut model = ToyModel::new(cfg.model.clone())?;
    let report = train(&mut model, &task, &cfg.train)?;
    let metrics = Metrics {
        mode: cfg.model.mode,
        n_experts: cfg.model.n_experts,
        lora_rank: cfg.model.lora_rank,
        seed: cfg.train.seed,
        steps: report.steps,
        initial_loss: report.initial_loss,
        final_loss: report.final_loss,
        val_accuracy: report.val_accuracy,
        val_loss: report.val_loss,
        chance_accuracy: report.chance_accuracy,
        majority_baseline: task.majority_baseline(),
        avg_active_experts: report.avg_active_experts,
        routing_entropy_ratio: routing_entropy_ratio(&model, &task.val, task.n_groups)?,
        trainable_params: report.trainable_params,
        adapter_params: model.group_param_count(ParamGroup::Adapter),
        router_params: model.group_param_count(ParamGroup::Router),
        head_params: model.group_param_count(ParamGroup::Head),
    };
    Ok(RunOutput { metrics, report, model })
}

/// Writes `metrics.json`, `loss.csv`, `activations.csv` and `checkpoint.bin`.
pub fn write_artifacts(cfg: &ExperimentConfig, out: &RunOutput) -> CliResult<()> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut json = serde_json::to_string_pretty(&out.metrics).expect("metrics are plain data");
    json.push('\n');
    write_file(&dir.join("metrics.json"), json.as_bytes())?;
    let mut loss = Vec::new();
    out.report.write_loss_csv(&mut loss)?;
    write_file(&dir.join("loss.csv"), &loss)?;
    let mut acts = Vec::new();
    out.report.activations.write_csv(&mut acts)?;
    write_file(&dir.join("activations.csv"), &acts)?;
    checkpoint::save(&dir.join("checkpoint.bin"), cfg, &out.model)
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau_max: f64,
    pub val_acc: f64,
    pub avg_active_experts: f64,
}

/// Trains one model per `tau_max`. Entries are independent, so the parallel
/// path produces the same rows as the sequential one.
pub fn sweep(cfg: &ExperimentConfig, tau_max_list: &[f64], parallel: bool) -> CliResult<Vec<SweepRow>> {
    if !matches!(cfg.model.mode, MixMode::Adaptive { .. }) {
        return Err(CliError::Usage(format!(
            "sweep needs adamole mode, config has {:?}",
            cfg.model.mode
        )));
    }
    if tau_max_list.is_empty() {
        return Err(CliError::Usage("empty tau_max list".into()));
    }
    let configs: Vec<ExperimentConfig> = tau_max_list
        .iter()
        .map(|&t| {
            let mut c = cfg.clone();
            c.model.mode = MixMode::Adaptive { tau_max: t };
            c.validate().map(|_| c)
        })
        .collect::<CliResult<_>>()?;
    let one = |c: &ExperimentConfig| -> CliResult<SweepRow> {
        let out = run_experiment(c)?;
        let MixMode::Adaptive { tau_max } = c.model.mode else {
            unreachable!("sweep configs are adaptive")
        };
        Ok(SweepRow {
            tau_max,
            val_acc: out.metrics.val_accuracy,
            avg_active_experts: out.metrics.avg_active_experts.unwrap_or(0.0),
        })
    };
    if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = configs.iter().map(|c| s.spawn(move || one(c))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sweep worker panicked"))
                .collect()
        })
    } else {
        configs.iter().map(one).collect()
    }
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> CliResult<()> {
    write_file(path, &sweep_csv(rows).map_err(adamole::Error::from)?)
}

fn sweep_csv(rows: &[SweepRow]) -> csv::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["tau_max", "val_acc", "avg_active_experts"])?;
    for r in rows {
        w.write_record([r.tau_max.to_string(), format!("{:.6}", r.val_acc), format!("{:.4}", r.avg_active_experts)])?;
    }
    w.into_inner().map_err(|e| e.into_error().into())
}
