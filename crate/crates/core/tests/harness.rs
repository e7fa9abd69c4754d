use std::collections::HashSet;
use std::fs;
use std::path::Path;

use gatemem::checkpoint;
use gatemem::harness::{
    ablation_sweep, capacity_sweep, checkpoint_file, emit_curves, evaluate_checkpoint,
    gradcheck_suite, read_records, records_file, run_experiment, ExperimentConfig, SweepAxis,
};
use gatemem::model::{Model, ModelConfig, Variant};
use gatemem::tasks::{TaskConfig, TaskKind};
use gatemem::tensor::Fault;
use gatemem::train::{LossBreakdown, RunRecord, TrainConfig};

/// A copy-task experiment small enough to train in well under a second.
fn tiny(out: &Path, steps: usize) -> ExperimentConfig {
    ExperimentConfig {
        out_dir: out.to_path_buf(),
        seeds: vec![3],
        task: TaskConfig {
            name: TaskKind::Copy,
            payload: 2,
            gap: 1,
            ..TaskConfig::default()
        },
        model: ModelConfig {
            vocab_size: 8,
            embed_dim: 6,
            hidden_dim: 6,
            slots: 4,
            slot_dim: 6,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            max_steps: steps,
            batch_size: 4,
            eval_interval: 5,
            eval_size: 8,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

fn record(step: usize, loss: f64) -> RunRecord {
    RunRecord {
        step,
        loss: LossBreakdown {
            total: loss,
            task: loss,
            write: 0.0,
            forget: 0.0,
        },
        gw_mean: Some(0.5),
        gf_mean: None,
        acc: None,
        ms: 0,
    }
}

#[test]
fn experiment_writes_its_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), 10);
    let summary = run_experiment(&cfg).unwrap();
    assert_eq!(summary.reports.len(), 1);
    for name in [
        "config.toml".to_string(),
        "metrics.csv".to_string(),
        records_file(3),
        checkpoint_file(3),
    ] {
        assert!(dir.path().join(&name).is_file(), "missing {name}");
    }
    let text = fs::read_to_string(dir.path().join(records_file(3))).unwrap();
    assert_eq!(text.lines().count(), 10);
    let records = read_records(&dir.path().join(records_file(3))).unwrap();
    assert_eq!(
        records.iter().map(|r| r.step).collect::<Vec<_>>(),
        (1..=10).collect::<Vec<_>>()
    );

    let snapshot = ExperimentConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(snapshot, cfg);

    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert!(lines
        .next()
        .unwrap()
        .starts_with("task,variant,slots,seed,steps,acc"));
    assert!(lines.next().unwrap().starts_with("copy,gated,4,3,10,"));
    assert!(lines.next().is_none());
}

#[test]
fn rerun_reproduces_metrics_and_checkpoint_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&tiny(a.path(), 12)).unwrap();
    run_experiment(&tiny(b.path(), 12)).unwrap();
    for name in ["metrics.csv".to_string(), checkpoint_file(3)] {
        let x = fs::read(a.path().join(&name)).unwrap();
        let y = fs::read(b.path().join(&name)).unwrap();
        assert!(x == y, "{name} differs between identical runs");
    }
    let ra = read_records(&a.path().join(records_file(3))).unwrap();
    let rb = read_records(&b.path().join(records_file(3))).unwrap();
    assert!(ra.iter().zip(&rb).all(|(x, y)| x.same_trajectory(y)));
}

#[test]
fn saved_checkpoint_round_trips_and_evaluates_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), 8);
    let summary = run_experiment(&cfg).unwrap();
    let path = dir.path().join(checkpoint_file(3));
    let text = fs::read_to_string(&path).unwrap();
    let model: Model = checkpoint::load(&path).unwrap();
    assert_eq!(checkpoint::to_text(&model).unwrap(), text);
    let report = evaluate_checkpoint(&cfg, &model, 3).unwrap();
    assert_eq!(report, summary.reports[0].1);
}

#[test]
fn damaged_checkpoints_are_rejected_with_a_line_number() {
    let model = Model::new(tiny(Path::new("."), 1).model, 0).unwrap();
    let text = checkpoint::to_text(&model).unwrap();
    let err =
        checkpoint::from_text(&text.replacen("gatemem-checkpoint 1", "weights", 1)).unwrap_err();
    assert!(err.to_string().contains("line 1"), "{err}");
    let truncated: String = text.lines().take(4).map(|l| format!("{l}\n")).collect();
    assert!(checkpoint::from_text(&truncated).is_err());
    let mut lines: Vec<&str> = text.lines().collect();
    lines[3] = "0.5 NaN";
    assert!(checkpoint::from_text(&lines.join("\n")).is_err());
}

#[test]
fn unknown_config_key_is_named_with_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    fs::write(
        &path,
        "seeds = [0]\n\n[train]\nlr = 0.01\nlearning_rate = 0.1\n",
    )
    .unwrap();
    let err = ExperimentConfig::load(&path).unwrap_err();
    let msg = err.to_string();
    assert!(err.is_config());
    assert!(msg.contains("learning_rate"), "{msg}");
    assert!(msg.contains("line 5"), "{msg}");
}

#[test]
fn invalid_values_are_config_errors() {
    for text in [
        "seeds = []\n",
        "seeds = [1, 1]\n",
        "workers = 0\n",
        "train.lambda_write = -0.5\n",
        "train.clip_norm = 0.0\n",
        "model.slots = 0\n",
        "[sweep]\ncapacities = [0, 4]\n",
    ] {
        let err = ExperimentConfig::from_toml(text).unwrap_err();
        assert!(err.is_config(), "{text:?} gave {err}");
    }
}

#[test]
fn sweeps_have_one_cell_per_value_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), 3);
    cfg.seeds = vec![0, 1];
    cfg.workers = 2;
    let caps = capacity_sweep(&cfg, &[2, 3, 5]).unwrap();
    assert_eq!(caps.axis, SweepAxis::Capacity);
    assert_eq!(
        caps.rows.iter().map(|r| r.cells.len()).sum::<usize>(),
        3 * 2
    );
    assert_eq!(caps.to_csv().lines().count(), 1 + 3 * 2);
    assert_eq!(caps.median_csv().lines().count(), 1 + 3);
    assert!(caps.rows.iter().all(|r| r.median.is_some()));
    assert!(caps.median_acc("5").is_some());
    assert!(dir.path().join("capacity.csv").is_file());
    assert!(dir.path().join("capacity_median.csv").is_file());

    // attention_only needs slot_dim == hidden_dim, which `tiny` satisfies.
    let ablation = ablation_sweep(&cfg, &Variant::ALL).unwrap();
    assert_eq!(ablation.rows.len(), 4);
    assert_eq!(ablation.to_csv().lines().count(), 1 + 4 * 2);
    assert!(ablation
        .rows
        .iter()
        .flat_map(|r| &r.cells)
        .all(|c| c.outcome.is_ok()));
}

#[test]
fn sweep_cells_do_not_depend_on_order_or_workers() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut cfg = tiny(a.path(), 4);
    cfg.seeds = vec![0, 1];
    let forward = capacity_sweep(&cfg, &[2, 4]).unwrap();
    cfg.out_dir = b.path().to_path_buf();
    cfg.workers = 3;
    let reversed = capacity_sweep(&cfg, &[4, 2]).unwrap();
    for v in ["2", "4"] {
        assert_eq!(forward.row(v), reversed.row(v));
    }
}

#[test]
fn sweep_values_must_be_distinct_and_plural() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), 2);
    assert!(capacity_sweep(&cfg, &[4, 4]).unwrap_err().is_config());
    assert!(capacity_sweep(&cfg, &[4]).unwrap_err().is_config());
    assert!(capacity_sweep(&cfg, &[0, 4]).unwrap_err().is_config());
    assert!(ablation_sweep(&cfg, &[Variant::Gated, Variant::Gated])
        .unwrap_err()
        .is_config());
}

#[test]
fn curves_of_constant_single_and_ramp_runs() {
    let constant: Vec<RunRecord> = (1..=80).map(|s| record(s, 2.0)).collect();
    let csv = emit_curves(&constant).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,smoothed,raw,gw_mean,gf_mean"));
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[1], "2");
        assert_eq!(cols[3], "0.5");
        assert_eq!(cols[4], "");
    }

    let single = emit_curves(&[record(1, 0.25)]).unwrap();
    assert_eq!(single.lines().nth(1), Some("1,0.25,0.25,0.5,"));

    let ramp: Vec<RunRecord> = (1..=200).map(|s| record(s, s as f64)).collect();
    let csv = emit_curves(&ramp).unwrap();
    let smoothed: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    // Away from the edges a centred average leaves a linear ramp unchanged.
    for (i, s) in smoothed.iter().enumerate().take(175).skip(25) {
        assert!((s - (i + 1) as f64).abs() < 1e-9);
    }
    assert!(smoothed.windows(2).all(|w| w[1] >= w[0]));

    assert!(emit_curves(&[]).is_err());
}

#[test]
fn gradcheck_suite_passes_and_lists_each_block_once() {
    let report = gradcheck_suite(11, None).unwrap();
    let failures: Vec<_> = report.failures().collect();
    assert!(report.passed(), "{failures:?}");
    let names: HashSet<&str> = report.blocks.iter().map(|b| b.name.as_str()).collect();
    assert_eq!(names.len(), report.blocks.len());
    for v in Variant::ALL {
        let prefix = format!("{}/", v.name());
        assert!(
            names.iter().any(|n| n.starts_with(&prefix)),
            "no blocks for {prefix}"
        );
    }
    assert!(names.contains("gated/memory.w_write"));
    assert!(names.contains("gated/memory.w_forget"));
    assert!(names.iter().any(|n| n.starts_with("op/")));
}

#[test]
fn gradcheck_suite_flags_an_injected_fault() {
    let report = gradcheck_suite(11, Some(Fault::DoubleSigmoidGrad)).unwrap();
    assert!(!report.passed());
    let failing: HashSet<&str> = report.failures().map(|b| b.name.as_str()).collect();
    assert!(failing.contains("op/sigmoid"), "{failing:?}");
    assert!(failing.contains("gated/memory.w_write"), "{failing:?}");
}
