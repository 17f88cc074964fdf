use std::fs;
use std::path::Path;

use stcnn::dictionary::DictConfig;
use stcnn::eval::EvalReport;
use stcnn::joint::{read_labels, Stage, TrainConfig, TrainTrace};
use stcnn::pipeline::{self, EvalInputs, PipelineError, FINAL_DIR, TRACE_FILE};
use stcnn::volume::{read_map, read_volume4d, Cohort};

fn small_cohort() -> Cohort {
    Cohort {
        frames: 16,
        dims: [8, 8, 8],
        distractors: 1,
        seed: 12,
        ..Cohort::default()
    }
}

fn small_config() -> TrainConfig {
    TrainConfig {
        steps: [4, 4, 4],
        checkpoint_every: 2,
        unet_levels: 2,
        unet_base_channels: 4,
        record_wall_time: false,
        ..TrainConfig::default()
    }
}

fn dict() -> DictConfig {
    DictConfig {
        atoms: 6,
        iters: 5,
        ..DictConfig::default()
    }
}

#[test]
fn cohort_layout() {
    let dir = tempfile::tempdir().unwrap();
    let dirs = pipeline::write_cohort(&small_cohort(), 3, 2, dir.path()).unwrap();
    let names = |d: &Path| {
        let mut v: Vec<String> = fs::read_dir(d)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .filter(|n| n.ends_with(".vol4") && !n.contains(".mask."))
            .collect();
        v.sort();
        v
    };
    assert_eq!(names(&dirs.train()), ["subj000.vol4", "subj001.vol4", "subj002.vol4"]);
    assert_eq!(names(&dirs.test()), ["subj003.vol4", "subj004.vol4"]);
    let vol = read_volume4d(dirs.test().join("subj004.vol4")).unwrap();
    assert_eq!((vol.frames(), vol.dims()), (16, [8, 8, 8]));
    assert!(vol.mask().is_some());
    let truth = read_labels(&dirs.truth(), "subj004").unwrap();
    assert_eq!(truth.series.len(), 16);
    assert_eq!(read_map(dirs.template()).unwrap().dims(), [8, 8, 8]);
    assert!(fs::read_to_string(dir.path().join("cohort.txt")).unwrap().contains("train = 3"));
}

#[test]
fn label_train_infer_eval() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let dirs = pipeline::write_cohort(&small_cohort(), 3, 2, &root.join("c")).unwrap();
    let template = read_map(dirs.template()).unwrap();
    let matches = pipeline::label_dir(&dirs.train(), &template, &dict(), &root.join("labels")).unwrap();
    assert_eq!(matches.len(), 3);
    assert!(root.join("labels/subj001.match.txt").is_file());

    let cfg = small_config();
    let run = root.join("run");
    let trace = pipeline::train_dirs(&dirs.train(), &root.join("labels"), &cfg, &run, &[], None).unwrap();
    assert_eq!(trace.records().len(), 12);
    for s in 1..=3 {
        assert!(run.join(format!("stage{}-step00002", s)).is_dir());
        assert!(run.join(format!("stage{}-final", s)).is_dir());
    }
    let back = TrainTrace::from_csv(&fs::read_to_string(run.join(TRACE_FILE)).unwrap()).unwrap();
    assert_eq!(back.records(), trace.records());

    // resuming stage 3 alone starts from the saved stage snapshots
    let again = pipeline::train_dirs(&dirs.train(), &root.join("labels"), &cfg, &run, &[Stage::JointFinetune], None).unwrap();
    assert_eq!(again.losses(Stage::JointFinetune), trace.losses(Stage::JointFinetune));
    assert!(run.join("trace-stage3.csv").is_file());

    let names = pipeline::infer_path(&run, &dirs.test(), &root.join("pred")).unwrap();
    assert_eq!(names, ["subj003", "subj004"]);
    let single = pipeline::infer_path(&run.join(FINAL_DIR), &dirs.test().join("subj003.vol4"), &root.join("one")).unwrap();
    assert_eq!(single, ["subj003"]);
    assert_eq!(
        fs::read(root.join("one/subj003.map.vol4")).unwrap(),
        fs::read(root.join("pred/subj003.map.vol4")).unwrap()
    );

    let (pred, truth, tpl, test, plots) = (root.join("pred"), dirs.truth(), dirs.template(), dirs.test(), root.join("plots"));
    let inputs = EvalInputs {
        pred: &pred,
        truth: &truth,
        template: &tpl,
        data: Some(&test),
        dict: dict(),
        plots: Some(&plots),
    };
    let report = pipeline::evaluate_dirs(&inputs, &root.join("report.csv")).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert!(report.rows.iter().all(|r| r.supervised_sr_jaccard.is_some() && r.baseline_failed.is_some()));
    let text = fs::read_to_string(root.join("report.csv")).unwrap();
    assert_eq!(EvalReport::from_csv(&text).unwrap(), report);
    assert!(plots.join("subj004.truth.pgm").is_file());

    let lean = EvalInputs { data: None, plots: None, ..inputs };
    let report = pipeline::evaluate_dirs(&lean, &root.join("lean.csv")).unwrap();
    assert!(report.rows.iter().all(|r| r.jaccard_baseline_template.is_none() && r.temporal_pearson.is_some()));
}

#[test]
fn stage_without_predecessor_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let dirs = pipeline::write_cohort(&small_cohort(), 2, 0, &root.join("c")).unwrap();
    let template = read_map(dirs.template()).unwrap();
    pipeline::label_dir(&dirs.train(), &template, &dict(), &root.join("labels")).unwrap();
    let err = pipeline::train_dirs(
        &dirs.train(),
        &root.join("labels"),
        &small_config(),
        &root.join("run"),
        &[Stage::TemporalOnly],
        None,
    )
    .unwrap_err();
    assert!(matches!(err, PipelineError::Input(_)), "{}", err);
}

#[test]
fn empty_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let template = stcnn::volume::NetworkMap::zeros([4, 4, 4], "t");
    assert!(pipeline::label_dir(dir.path(), &template, &dict(), &dir.path().join("out")).is_err());
}
