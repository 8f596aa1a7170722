//! End-to-end runs on small task pairs: run-directory contents, determinism,
//! policy reports and failure handling.

use std::fs;
use std::path::Path;

use adafilter::config::{desk_shift, ExperimentConfig};
use adafilter::dataset::{PairDir, Split, Task};
use adafilter::run::{
    compare, ensure_pretrained, export_policy_histogram, pretrained_dir, read_checkpoint, read_dump, read_metrics, read_policies, run_experiment,
    CHECKPOINT_FILE, CONFIG_FILE, CURVES_FILE, DUMP_FILE, DUMP_SCHEMA, METRICS_FILE, POLICIES_FILE,
};
use adafilter::Error;
use adafilter_core::checkpoint::Checkpoint;
use adafilter_core::gate::{policy_stats, PolicyMatrix};
use adafilter_core::synth::SynthConfig;
use adafilter_core::train::{apply_strategy, StrategySpec};

fn tiny(root: &Path, strategy: StrategySpec, out: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk(root.join("pair"), 0, desk_shift(0.6), strategy, root.join(out));
    cfg.data.synth = SynthConfig {
        source_train_per_class: 8,
        source_eval_per_class: 2,
        target_train_per_class: 4,
        target_eval_per_class: 3,
        ..cfg.data.synth
    };
    cfg.pretrain.epochs = 1;
    cfg.pretrain.batch_size = 16;
    cfg.finetune.epochs = 2;
    cfg.finetune.batch_size = 16;
    cfg
}

#[test]
fn zero_epochs_leave_empty_metrics_and_initial_checkpoint() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = tiny(root.path(), StrategySpec::Adafilter, "run");
    cfg.finetune.epochs = 0;
    let summary = run_experiment(&cfg).unwrap();
    assert!(summary.history.is_empty());
    assert!(read_metrics(&cfg.out.join(METRICS_FILE)).unwrap().is_empty());
    assert!(read_policies(&cfg.out.join(POLICIES_FILE)).unwrap().is_empty());
    assert!(cfg.out.join("DONE").exists());

    let pair = PairDir::open(&cfg.data.dir).unwrap();
    let pretrained = ensure_pretrained(&cfg, &pair).unwrap();
    let init = apply_strategy(&cfg.strategy, &pretrained, &cfg.target_spec(), &cfg.transfer_options(), cfg.seed).unwrap();
    let saved = read_checkpoint(&cfg.out.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(saved, Checkpoint::from_store(&init.store));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let root = tempfile::tempdir().unwrap();
    let first = tiny(root.path(), StrategySpec::Adafilter, "a");
    let second = ExperimentConfig {
        out: root.path().join("b"),
        ..first.clone()
    };
    run_experiment(&first).unwrap();
    run_experiment(&second).unwrap();
    for file in [METRICS_FILE, POLICIES_FILE, CHECKPOINT_FILE] {
        assert_eq!(fs::read(first.out.join(file)).unwrap(), fs::read(second.out.join(file)).unwrap(), "{file}");
    }
    // The stored config reproduces the run.
    let resolved = ExperimentConfig::read_resolved(&first.out.join(CONFIG_FILE)).unwrap();
    assert_eq!(resolved, first);
}

#[test]
fn pretrained_model_is_cached_per_settings() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny(root.path(), StrategySpec::StandardFinetune, "run");
    run_experiment(&cfg).unwrap();
    let dir = pretrained_dir(&cfg);
    assert!(dir.join("DONE").exists());
    assert_eq!(read_metrics(&dir.join(METRICS_FILE)).unwrap().len(), 2 * cfg.pretrain.epochs);
    let mut other = cfg.clone();
    other.pretrain_seed = 1;
    assert_ne!(pretrained_dir(&other), dir);
    let mut reseeded = cfg.clone();
    reseeded.seed = 9;
    assert_eq!(pretrained_dir(&reseeded), dir);
}

#[test]
fn missing_strategy_is_named() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny(root.path(), StrategySpec::Adafilter, "run");
    let mut json: serde_json::Value = serde_json::to_value(&cfg).unwrap();
    json.as_object_mut().unwrap().remove("strategy");
    let err = ExperimentConfig::parse(&json.to_string()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("strategy"), "{err}");
    json["strategy"] = serde_json::json!({ "name": "ewc" });
    assert!(ExperimentConfig::parse(&json.to_string()).is_err());
}

#[test]
fn compare_emits_curves_on_a_shared_epoch_grid() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny(root.path(), StrategySpec::Adafilter, "unused");
    let out = root.path().join("cmp");
    let runs = compare(&cfg, &[StrategySpec::StandardFinetune, StrategySpec::Adafilter], &out).unwrap();
    assert_eq!(runs.len(), 2);
    let text = fs::read_to_string(out.join(CURVES_FILE)).unwrap();
    let mut grids = std::collections::BTreeMap::<String, Vec<usize>>::new();
    for line in text.lines().skip(2) {
        let cols: Vec<&str> = line.split(',').collect();
        grids.entry(cols[0].to_string()).or_default().push(cols[1].parse().unwrap());
    }
    assert_eq!(grids.len(), 2);
    assert_eq!(grids["standard_finetune"], vec![1, 2]);
    assert_eq!(grids["adafilter"], grids["standard_finetune"]);
    let policies = read_policies(&out.join("adafilter").join(POLICIES_FILE)).unwrap();
    assert_eq!(policies.len(), 2 * 9);
    assert!(policies.iter().all(|p| (0.0..=1.0).contains(&p.finetune_fraction)));
    assert!(!out.join("standard_finetune").join(POLICIES_FILE).exists());
}

#[test]
fn histogram_matches_recount_of_dump() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = tiny(root.path(), StrategySpec::Adafilter, "run");
    cfg.dump_policies = true;
    run_experiment(&cfg).unwrap();
    let rows = export_policy_histogram(&cfg.out).unwrap();
    assert_eq!(rows.len(), 9);

    let dump = read_dump(&cfg.out.join(DUMP_FILE)).unwrap();
    for row in &rows {
        let mine: Vec<_> = dump.iter().filter(|d| d.layer_index == row.layer_index).collect();
        let ones = mine.iter().filter(|d| d.bit == 1).count();
        assert_eq!(row.finetune_fraction, ones as f64 / mine.len() as f64);
    }
    let last: Vec<f64> = read_policies(&cfg.out.join(POLICIES_FILE)).unwrap().into_iter().filter(|p| p.epoch == 2).map(|p| p.finetune_fraction).collect();
    assert_eq!(last, rows.iter().map(|r| r.finetune_fraction).collect::<Vec<_>>());
}

#[test]
fn forced_on_gate_reports_full_fractions() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = tiny(root.path(), StrategySpec::Adafilter, "run");
    cfg.finetune.epochs = 0;
    cfg.dump_policies = true;
    run_experiment(&cfg).unwrap();

    // Rebuild the run's model with every gate head saturated on and dump its policies.
    let pair = PairDir::open(&cfg.data.dir).unwrap();
    let pretrained = ensure_pretrained(&cfg, &pair).unwrap();
    let mut model = apply_strategy(&cfg.strategy, &pretrained, &cfg.target_spec(), &cfg.transfer_options(), cfg.seed).unwrap();
    let heads: Vec<_> = model.net.gate.as_ref().unwrap().layers.iter().map(|l| (l.head.weight, l.head.bias.unwrap())).collect();
    for (w, b) in heads {
        model.store.tensor_mut(w).data_mut().fill(0.0);
        model.store.tensor_mut(b).data_mut().fill(10.0);
    }
    let eval = pair.load(Task::Target, Split::Eval).unwrap();
    let policies: Vec<PolicyMatrix> = model.evaluate(&eval, cfg.eval_batch_size).unwrap().policies;
    assert_eq!(policy_stats(&policies).unwrap(), vec![1.0; 9]);
    let mut text = format!("# schema={DUMP_SCHEMA}\nlayer_index,example_id,channel_index,bit\n");
    for (l, m) in policies.iter().enumerate() {
        for (k, bit) in m.bits.iter().enumerate() {
            text.push_str(&format!("{l},{},{},{bit}\n", k / m.channels, k % m.channels));
        }
    }
    fs::write(cfg.out.join(DUMP_FILE), text).unwrap();
    let rows = export_policy_histogram(&cfg.out).unwrap();
    assert!(rows.iter().all(|r| r.finetune_fraction == 1.0));
}

#[test]
fn ungated_runs_have_no_policy_report() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = tiny(root.path(), StrategySpec::StandardFinetune, "run");
    cfg.finetune.epochs = 0;
    run_experiment(&cfg).unwrap();
    let err = export_policy_histogram(&cfg.out).unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
    assert!(err.to_string().contains("--strategy adafilter"), "{err}");
}

#[test]
fn failed_run_keeps_partial_artifacts_and_error_marker() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = tiny(root.path(), StrategySpec::StandardFinetune, "run");
    cfg.dump_policies = true;
    let err = run_experiment(&cfg).unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
    assert!(!cfg.out.join("DONE").exists());
    assert_eq!(fs::read_to_string(cfg.out.join("ERROR")).unwrap().trim(), err.to_string());
    assert_eq!(read_metrics(&cfg.out.join(METRICS_FILE)).unwrap().len(), 4);

    // A later successful run into the same directory clears the marker.
    cfg.dump_policies = false;
    run_experiment(&cfg).unwrap();
    assert!(!cfg.out.join("ERROR").exists());
    assert!(cfg.out.join("DONE").exists());
}

#[test]
fn diverging_run_names_the_first_non_finite_op() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = tiny(root.path(), StrategySpec::StandardFinetune, "run");
    cfg.finetune.optimizer.lr = 1e300;
    let err = run_experiment(&cfg).unwrap_err();
    assert!(matches!(err, Error::Core(adafilter_core::Error::NonFinite { .. })), "{err}");
    assert!(fs::read_to_string(cfg.out.join("ERROR")).unwrap().contains("non-finite value first produced by"));
}

#[test]
fn adafilter_overfits_a_small_two_class_task() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = tiny(root.path(), StrategySpec::Adafilter, "run");
    cfg.data.synth.target_classes = 2;
    cfg.data.synth.target_train_per_class = 16;
    cfg.finetune.epochs = 50;
    let summary = run_experiment(&cfg).unwrap();
    assert_eq!(summary.history.len(), 50);
    let last = summary.history.last().unwrap();
    assert_eq!(last.train_accuracy, 1.0, "{last:?}");
}
