//! Experiment orchestration: training runs with metrics and checkpoints,
//! evaluation, cost tables and the alignment study.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::diagnostics::{MetricsRecord, MetricsWriter};
use crate::error::{Error, Result};
use crate::harness::checkpoint::{load_checkpoint, save_checkpoint};
use crate::harness::config::{DatasetKind, RunConfig};
use crate::harness::data::{Dataset, Split};
use crate::learning::{evaluate_accuracy, MethodKind, StepCosine, Trainer};
use crate::model::{count_cost, dense_cost, LayerKind, Network, Weight};

pub const METRICS_FILE: &str = "metrics.csv";
pub const STEPS_FILE: &str = "step_alignment.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:04}.ckpt")
}

/// What a training run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub records: Vec<MetricsRecord>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Runs the remaining epochs of `trainer`, streaming metrics to
/// `out_dir/metrics.csv` and checkpointing at epoch ends.
pub fn run_to_end(trainer: &mut Trainer<f32>, data: &Dataset, cfg: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    create_dir(out_dir)?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut writer = MetricsWriter::new(create(&metrics_path)?)?;
    let mut records = Vec::new();
    while !trainer.is_finished() {
        let rec = trainer.train_epoch(data)?;
        writer.write(&rec)?;
        writer.flush()?;
        let done = trainer.epoch;
        if cfg.checkpoint_every > 0 && done.is_multiple_of(cfg.checkpoint_every) && !trainer.is_finished() {
            save_checkpoint(&out_dir.join(epoch_checkpoint_name(done)), trainer, Some(cfg))?;
        }
        records.push(rec);
    }
    if !trainer.step_log.is_empty() {
        write_step_log(&out_dir.join(STEPS_FILE), &trainer.step_log)?;
    }
    let checkpoint_path = out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&checkpoint_path, trainer, Some(cfg))?;
    Ok(RunOutcome {
        records,
        metrics_path,
        checkpoint_path,
    })
}

/// A fresh training run from a config.
pub fn train(cfg: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = cfg.load_dataset()?;
    let mut trainer = Trainer::<f32>::new(cfg.train_config()?, &cfg.network_spec(&data)?)?;
    run_to_end(&mut trainer, &data, cfg, out_dir)
}

/// Continues a run from a checkpoint written by [`run_to_end`].
pub fn resume(checkpoint: &Path, out_dir: &Path) -> Result<RunOutcome> {
    let ck = load_checkpoint::<f32>(checkpoint)?;
    let cfg = ck
        .run_config
        .ok_or_else(|| Error::CorruptCheckpoint("no run config embedded; cannot locate the data".into()))?;
    let data = cfg.load_dataset()?;
    let mut trainer = ck.trainer;
    run_to_end(&mut trainer, &data, &cfg, out_dir)
}

pub fn write_step_log(path: &Path, log: &[StepCosine]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["epoch", "step", "layer", "cosine"])?;
    for s in log {
        w.write_record([
            s.epoch.to_string(),
            s.step.to_string(),
            s.layer.to_string(),
            s.cosine.map(|c| format!("{c:?}")).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Test accuracy of a checkpoint on `dataset`, loaded with the checkpoint's
/// own config otherwise.
pub fn evaluate(checkpoint: &Path, dataset: DatasetKind) -> Result<f64> {
    let ck = load_checkpoint::<f32>(checkpoint)?;
    let mut cfg = ck.run_config.unwrap_or_default();
    cfg.dataset = dataset.name().to_string();
    let data = cfg.load_dataset()?;
    if data.input != ck.trainer.net.input || data.classes != ck.trainer.net.output_dim() {
        return Err(Error::arg(format!(
            "{dataset} has {} inputs and {} classes but the network expects {} and {}",
            data.input.dim(),
            data.classes,
            ck.trainer.net.input.dim(),
            ck.trainer.net.output_dim()
        )));
    }
    evaluate_accuracy(&ck.trainer.net, &data, Split::Test)
}

/// One row of the cost table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRow {
    pub layer: usize,
    pub kind: &'static str,
    /// Weight matrix shape (`K'` for convolutions).
    pub dims: Option<(usize, usize)>,
    pub rank: Option<usize>,
    pub params: u64,
    pub macs: u64,
    /// Parameters of the same layer stored densely.
    pub dense_params: u64,
}

pub fn cost_rows<T: crate::Scalar>(net: &Network<T>) -> Vec<CostRow> {
    let cost = count_cost(net);
    net.layers
        .iter()
        .zip(&cost.layers)
        .enumerate()
        .map(|(i, (l, c))| {
            let kind = match l.kind {
                LayerKind::Dense(_) => "dense",
                LayerKind::Conv { .. } => "conv",
                LayerKind::MaxPool(_) => "maxpool",
            };
            let dense_params = match &l.kind {
                LayerKind::Dense(w) => dense_cost(w.dims().0, w.dims().1).params,
                LayerKind::Conv { geom, .. } => {
                    let (n, ch, kh, kw) = geom.kernel_shape();
                    (n * ch * kh * kw) as u64
                }
                LayerKind::MaxPool(_) => 0,
            };
            CostRow {
                layer: i,
                kind,
                dims: l.weight().map(Weight::dims),
                rank: l.weight().and_then(Weight::rank),
                params: c.params + c.bias_params,
                macs: c.macs,
                dense_params: dense_params + c.bias_params,
            }
        })
        .collect()
}

/// Fixed-width table of per-layer parameters and multiply-accumulates.
pub fn cost_table<T: crate::Scalar>(net: &Network<T>) -> String {
    let rows = cost_rows(net);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>5}  {:<7}  {:>11}  {:>5}  {:>12}  {:>14}  {:>12}",
        "layer", "kind", "shape", "rank", "params", "macs/sample", "dense_params"
    );
    for r in &rows {
        let shape = r.dims.map(|(m, n)| format!("{m}x{n}")).unwrap_or_else(|| "-".into());
        let rank = r.rank.map(|x| x.to_string()).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{:>5}  {:<7}  {:>11}  {:>5}  {:>12}  {:>14}  {:>12}",
            r.layer, r.kind, shape, rank, r.params, r.macs, r.dense_params
        );
    }
    let total = |f: fn(&CostRow) -> u64| rows.iter().map(f).sum::<u64>();
    let _ = writeln!(
        out,
        "{:>5}  {:<7}  {:>11}  {:>5}  {:>12}  {:>14}  {:>12}",
        "total",
        "",
        "",
        "",
        total(|r| r.params),
        total(|r| r.macs),
        total(|r| r.dense_params)
    );
    out
}

pub fn cost_of_checkpoint(checkpoint: &Path) -> Result<String> {
    Ok(cost_table(&load_checkpoint::<f32>(checkpoint)?.trainer.net))
}

/// Methods compared by the alignment study.
pub const DIAGNOSE_METHODS: [MethodKind; 3] = [MethodKind::Ssa, MethodKind::Dfa, MethodKind::Bp];

pub fn diagnose_file(method: MethodKind) -> String {
    format!("alignment_{method}.csv")
}

/// Trains SSA, DFA and BP on `mlp3` with identical seeds and data order and
/// writes one metrics CSV per method. `base` supplies the dataset and
/// hyperparameters; method, architecture, epochs and seed are overridden.
pub fn diagnose(base: &RunConfig, epochs: usize, seed: u64, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut cfg = base.clone();
    cfg.architecture = "mlp3".into();
    cfg.epochs = epochs;
    cfg.seed = seed;
    cfg.validate()?;
    let data = cfg.load_dataset()?;
    create_dir(out_dir)?;
    let mut paths = Vec::new();
    for method in DIAGNOSE_METHODS {
        cfg.method = method.name().into();
        let mut trainer = Trainer::<f32>::new(cfg.train_config()?, &cfg.network_spec(&data)?)?;
        let path = out_dir.join(diagnose_file(method));
        let mut writer = MetricsWriter::new(create(&path)?)?;
        while !trainer.is_finished() {
            writer.write(&trainer.train_epoch(&data)?)?;
        }
        writer.flush()?;
        paths.push(path);
    }
    Ok(paths)
}
