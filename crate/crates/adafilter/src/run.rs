//! Run directories: pre-training cache, fine-tuning runs and strategy comparisons.
//!
//! A run directory contains
//!
//! - `config.resolved`: the full configuration that produced it,
//! - `metrics.csv`: `epoch,split,loss,accuracy`,
//! - `policies.csv`: `epoch,layer,finetune_fraction` (gated strategies),
//! - `policy_dump.csv`: `layer_index,example_id,channel_index,bit` for the
//!   final epoch's evaluation set, with `dump_policies`,
//! - `checkpoint.bin`,
//! - `DONE` on success or `ERROR` holding the failure message.
//!
//! Nothing written depends on wall-clock time, so reruns are byte-identical.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use adafilter_core::checkpoint::Checkpoint;
use adafilter_core::data::Dataset;
use adafilter_core::gate::{policy_stats, PolicyMatrix};
use adafilter_core::train::{apply_strategy, EvalStats, Model, OptimizerState, StrategySpec};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Phase};
use crate::dataset::{PairDir, Split, Task};
use crate::error::{format_err, io_err, Error, Result};

pub const METRICS_SCHEMA: &str = "adafilter.metrics/1";
pub const POLICIES_SCHEMA: &str = "adafilter.policies/1";
pub const DUMP_SCHEMA: &str = "adafilter.policy_dump/1";
pub const CURVES_SCHEMA: &str = "adafilter.curves/1";
pub const HISTOGRAM_SCHEMA: &str = "adafilter.policy_histogram/1";

pub const CONFIG_FILE: &str = "config.resolved";
pub const METRICS_FILE: &str = "metrics.csv";
pub const POLICIES_FILE: &str = "policies.csv";
pub const DUMP_FILE: &str = "policy_dump.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CURVES_FILE: &str = "curves.csv";
pub const HISTOGRAM_FILE: &str = "policy_histogram.csv";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub strategy: StrategySpec,
    pub history: Vec<EpochRecord>,
    /// Per epoch, per gated layer fine-tune fraction on the evaluation set.
    pub policy_fractions: Vec<Vec<f64>>,
    /// Evaluation-set policies of the final epoch, one matrix per gated layer.
    pub final_policies: Vec<PolicyMatrix>,
}

/// Writes a CSV file from scratch: schema comment, header, rows.
pub(crate) fn write_csv<R: Serialize>(path: &Path, schema: &str, header: &[&str], rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut buf = format!("# schema={schema}\n").into_bytes();
    {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(&mut buf);
        w.write_record(header).map_err(|e| format_err(path, e.to_string()))?;
        for row in rows {
            w.serialize(row).map_err(|e| format_err(path, e.to_string()))?;
        }
        w.flush().map_err(io_err(path))?;
    }
    fs::write(path, buf).map_err(io_err(path))
}

/// Reads a CSV written by [`write_csv`], checking its schema line.
pub(crate) fn read_csv<R: for<'de> serde::Deserialize<'de>>(path: &Path, schema: &str) -> Result<Vec<R>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let expected = format!("# schema={schema}");
    if text.lines().next() != Some(expected.as_str()) {
        return Err(format_err(path, format!("expected first line `{expected}`")));
    }
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    r.deserialize()
        .map(|row| row.map_err(|e| format_err(path, e.to_string())))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct PolicyRow {
    pub epoch: usize,
    pub layer: usize,
    pub finetune_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct DumpRow {
    pub layer_index: usize,
    pub example_id: usize,
    pub channel_index: usize,
    pub bit: u8,
}

fn metrics_rows(history: &[EpochRecord]) -> Vec<MetricsRow> {
    history
        .iter()
        .flat_map(|r| {
            [
                MetricsRow {
                    epoch: r.epoch,
                    split: "train".into(),
                    loss: r.train_loss,
                    accuracy: r.train_accuracy,
                },
                MetricsRow {
                    epoch: r.epoch,
                    split: "eval".into(),
                    loss: r.eval_loss,
                    accuracy: r.eval_accuracy,
                },
            ]
        })
        .collect()
}

fn write_metrics(path: &Path, history: &[EpochRecord]) -> Result<()> {
    write_csv(path, METRICS_SCHEMA, &["epoch", "split", "loss", "accuracy"], metrics_rows(history))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    read_csv(path, METRICS_SCHEMA)
}

fn write_policies(path: &Path, fractions: &[Vec<f64>]) -> Result<()> {
    let rows = fractions.iter().enumerate().flat_map(|(e, layers)| {
        layers.iter().enumerate().map(move |(layer, &f)| PolicyRow {
            epoch: e + 1,
            layer,
            finetune_fraction: f,
        })
    });
    write_csv(path, POLICIES_SCHEMA, &["epoch", "layer", "finetune_fraction"], rows)
}

pub fn read_policies(path: &Path) -> Result<Vec<PolicyRow>> {
    read_csv(path, POLICIES_SCHEMA)
}

fn write_dump(path: &Path, policies: &[PolicyMatrix]) -> Result<()> {
    let rows = policies.iter().enumerate().flat_map(|(layer, m)| {
        m.bits.iter().enumerate().map(move |(k, &bit)| DumpRow {
            layer_index: layer,
            example_id: k / m.channels,
            channel_index: k % m.channels,
            bit,
        })
    });
    write_csv(path, DUMP_SCHEMA, &["layer_index", "example_id", "channel_index", "bit"], rows)
}

pub fn read_dump(path: &Path) -> Result<Vec<DumpRow>> {
    read_csv(path, DUMP_SCHEMA)
}

/// Trains `model` for a phase, calling `after_epoch` with each record.
fn train_phase(
    model: &mut Model,
    phase: &Phase,
    seed: u64,
    train: &Dataset,
    eval: &Dataset,
    eval_batch: usize,
    mut after_epoch: impl FnMut(&EpochRecord, &EvalStats) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    let mut opt = OptimizerState::new(phase.optimizer.clone())?;
    let mut history = Vec::with_capacity(phase.epochs);
    for epoch in 0..phase.epochs {
        let tr = model.train_epoch(train, phase.batch_size, seed, epoch, &mut opt)?;
        let ev = model.evaluate(eval, eval_batch)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: tr.loss,
            train_accuracy: tr.accuracy,
            eval_loss: ev.loss,
            eval_accuracy: ev.accuracy,
        };
        history.push(record);
        after_epoch(&record, &ev)?;
    }
    Ok(history)
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Directory caching the pre-trained source model for `cfg`'s pair, keyed by
/// everything that influences it.
pub fn pretrained_dir(cfg: &ExperimentConfig) -> PathBuf {
    #[derive(Serialize)]
    struct Key<'a> {
        backbone: &'a adafilter_core::layers::BackboneSpec,
        pretrain: &'a Phase,
        seed: u64,
        eval_batch_size: usize,
    }
    let key = serde_json::to_vec(&Key {
        backbone: &cfg.source_spec(),
        pretrain: &cfg.pretrain,
        seed: cfg.pretrain_seed,
        eval_batch_size: cfg.eval_batch_size,
    })
    .expect("serializable");
    cfg.data.dir.join("pretrained").join(&hex_digest(&key)[..16])
}

/// Loads the cached pre-trained checkpoint, training it on the source task first if absent.
pub fn ensure_pretrained(cfg: &ExperimentConfig, pair: &PairDir) -> Result<Checkpoint> {
    let dir = pretrained_dir(cfg);
    let path = dir.join(CHECKPOINT_FILE);
    if !dir.join("DONE").exists() {
        let train = pair.load(Task::Source, Split::Train)?;
        let eval = pair.load(Task::Source, Split::Eval)?;
        let mut model = Model::scratch(&cfg.source_spec(), cfg.pretrain_seed)?;
        let history = train_phase(&mut model, &cfg.pretrain, cfg.pretrain_seed, &train, &eval, cfg.eval_batch_size, |_, _| Ok(()))?;
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        write_metrics(&dir.join(METRICS_FILE), &history)?;
        let bytes = Checkpoint::from_store(&model.store).to_bytes();
        fs::write(&path, bytes).map_err(io_err(&path))?;
        fs::write(dir.join("DONE"), b"").map_err(io_err(&dir))?;
    }
    read_checkpoint(&path)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| format_err(path, e.to_string()))
}

fn clear_markers(dir: &Path) -> Result<()> {
    for m in ["DONE", "ERROR"] {
        let p = dir.join(m);
        if p.exists() {
            fs::remove_file(&p).map_err(io_err(&p))?;
        }
    }
    Ok(())
}

/// Pre-trains if needed, fine-tunes with the configured strategy and writes the run directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let out = &cfg.out;
    fs::create_dir_all(out).map_err(io_err(out))?;
    clear_markers(out)?;
    cfg.save(&out.join(CONFIG_FILE))?;
    match fine_tune(cfg) {
        Ok(summary) => {
            fs::write(out.join("DONE"), b"").map_err(io_err(out))?;
            Ok(summary)
        }
        Err(e) => {
            let mut f = fs::File::create(out.join("ERROR")).map_err(io_err(out))?;
            writeln!(f, "{e}").map_err(io_err(out))?;
            Err(e)
        }
    }
}

fn fine_tune(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let out = &cfg.out;
    let pair = PairDir::open_or_generate(&cfg.data.dir, &cfg.data.synth)?;
    let pretrained = ensure_pretrained(cfg, &pair)?;
    let train = pair.load(Task::Target, Split::Train)?;
    let eval = pair.load(Task::Target, Split::Eval)?;
    let mut model = apply_strategy(&cfg.strategy, &pretrained, &cfg.target_spec(), &cfg.transfer_options(), cfg.seed)?;
    let gated = cfg.strategy.is_gated();
    let metrics_path = out.join(METRICS_FILE);
    let policies_path = out.join(POLICIES_FILE);
    write_metrics(&metrics_path, &[])?;
    if gated {
        write_policies(&policies_path, &[])?;
    }
    let mut so_far = Vec::new();
    let mut fractions = Vec::new();
    let mut final_policies = Vec::new();
    let history = train_phase(&mut model, &cfg.finetune, cfg.seed, &train, &eval, cfg.eval_batch_size, |record, ev| {
        so_far.push(*record);
        write_metrics(&metrics_path, &so_far)?;
        if gated {
            fractions.push(policy_stats(&ev.policies)?);
            write_policies(&policies_path, &fractions)?;
        }
        final_policies.clone_from(&ev.policies);
        Ok(())
    })?;
    let ckpt = out.join(CHECKPOINT_FILE);
    fs::write(&ckpt, Checkpoint::from_store(&model.store).to_bytes()).map_err(io_err(&ckpt))?;
    if cfg.dump_policies {
        if !gated {
            return Err(Error::Usage(format!(
                "--dump-policies needs a gated strategy; `{}` produces no policies",
                cfg.strategy.name()
            )));
        }
        if final_policies.is_empty() {
            // No epochs ran: dump the policies of the initial model.
            final_policies = model.evaluate(&eval, cfg.eval_batch_size)?.policies;
        }
        write_dump(&out.join(DUMP_FILE), &final_policies)?;
    }
    Ok(RunSummary {
        dir: out.clone(),
        strategy: cfg.strategy,
        history,
        policy_fractions: fractions,
        final_policies,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct CurveRow {
    pub strategy: String,
    pub epoch: usize,
    pub eval_accuracy: f64,
}

/// Runs each strategy in turn under `out/<strategy>` and writes `out/curves.csv`.
pub fn compare(cfg: &ExperimentConfig, strategies: &[StrategySpec], out: &Path) -> Result<Vec<RunSummary>> {
    if strategies.is_empty() {
        return Err(Error::Usage("compare needs at least one strategy".into()));
    }
    let mut runs = Vec::new();
    for s in strategies {
        let mut c = cfg.clone();
        c.strategy = *s;
        c.out = out.join(s.name());
        c.dump_policies = cfg.dump_policies && s.is_gated();
        runs.push(run_experiment(&c)?);
    }
    let dirs: Vec<PathBuf> = runs.iter().map(|r| r.dir.clone()).collect();
    export_curves(&dirs, &out.join(CURVES_FILE))?;
    Ok(runs)
}

/// Per-epoch evaluation accuracy of each run, keyed by its strategy.
pub fn export_curves(run_dirs: &[PathBuf], path: &Path) -> Result<Vec<CurveRow>> {
    let mut rows = Vec::new();
    for dir in run_dirs {
        let cfg = ExperimentConfig::read_resolved(&dir.join(CONFIG_FILE))?;
        for m in read_metrics(&dir.join(METRICS_FILE))? {
            if m.split == "eval" {
                rows.push(CurveRow {
                    strategy: cfg.strategy.name().into(),
                    epoch: m.epoch,
                    eval_accuracy: m.accuracy,
                });
            }
        }
    }
    write_csv(path, CURVES_SCHEMA, &["strategy", "epoch", "eval_accuracy"], rows.iter())?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct HistogramRow {
    pub layer_index: usize,
    pub finetune_fraction: f64,
}

/// Per-layer fine-tune fractions over the final evaluation pass, recounted
/// from the run's raw policy dump and written to `policy_histogram.csv`.
pub fn export_policy_histogram(run_dir: &Path) -> Result<Vec<HistogramRow>> {
    let cfg = ExperimentConfig::read_resolved(&run_dir.join(CONFIG_FILE))?;
    if !cfg.strategy.is_gated() {
        return Err(Error::Usage(format!(
            "run {} used `{}`, which has no fine-tuning policies; rerun with --strategy adafilter or random_policy and --dump-policies",
            run_dir.display(),
            cfg.strategy.name()
        )));
    }
    let dump = run_dir.join(DUMP_FILE);
    if !dump.exists() {
        return Err(Error::Usage(format!(
            "run {} has no {DUMP_FILE}; rerun with --dump-policies",
            run_dir.display()
        )));
    }
    let rows = read_dump(&dump)?;
    let layers = rows.iter().map(|r| r.layer_index + 1).max().unwrap_or(0);
    let mut matrices = Vec::with_capacity(layers);
    for layer in 0..layers {
        let mine: Vec<&DumpRow> = rows.iter().filter(|r| r.layer_index == layer).collect();
        let channels = mine.iter().map(|r| r.channel_index + 1).max().unwrap_or(0);
        let examples = mine.iter().map(|r| r.example_id + 1).max().unwrap_or(0);
        if mine.len() != channels * examples {
            return Err(format_err(&dump, format!("layer {layer} does not cover every (example, channel) pair")));
        }
        let mut values = vec![0.0; channels * examples];
        for r in mine {
            values[r.example_id * channels + r.channel_index] = f64::from(r.bit);
        }
        let mut m = PolicyMatrix::new(channels);
        m.extend_from(&[examples, channels], &values).map_err(|e| format_err(&dump, e.to_string()))?;
        matrices.push(m);
    }
    let fractions = policy_stats(&matrices).map_err(|e| format_err(&dump, e.to_string()))?;
    let out: Vec<HistogramRow> = fractions
        .into_iter()
        .enumerate()
        .map(|(layer_index, finetune_fraction)| HistogramRow {
            layer_index,
            finetune_fraction,
        })
        .collect();
    write_csv(&run_dir.join(HISTOGRAM_FILE), HISTOGRAM_SCHEMA, &["layer_index", "finetune_fraction"], out.iter())?;
    Ok(out)
}
