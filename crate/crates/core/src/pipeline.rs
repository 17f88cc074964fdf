//! File-level steps of the workflow: generate data, label it with the
//! dictionary baseline, train, infer and evaluate. The CLI is a thin shell
//! over these.
//!
//! Directory conventions: data directories hold `<stem>.vol4` volumes;
//! label, prediction and truth directories hold `<stem>.map.vol4` plus a
//! one-row `<stem>.series.csv`.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dictionary::{dict_learn, DictConfig, DictError, DictionaryModel, TemplateMatch};
use crate::eval::{compare_baseline, emit_report, validate_supervised, EvalError, EvalReport, PlotData, Truth, BASELINE_FLOOR};
use crate::joint::{
    label_subject, list_volumes, load_cae, load_dataset, load_unet, read_labels, stem, train_all, write_labels,
    Checkpointer, JointError, Label, Stage, StCnn, TrainConfig, TrainTrace, CAE_FILE, UNET_FILE,
};
use crate::kv::KvMap;
use crate::par::Exec;
use crate::volume::{
    normalize, read_map, read_volume4d, synthesize, write_map, write_series_csv, write_volume4d, Cohort, NetworkMap,
    SyntheticSpec, TimeSeries, VolumeError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Joint(#[from] JointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Dictionary(#[from] DictError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, PipelineError>;

pub const TRACE_FILE: &str = "trace.csv";
pub const FINAL_DIR: &str = "final";
pub const TEMPLATE_FILE: &str = "template.map.vol4";

fn write_label_files(dir: &Path, stem: &str, map: &NetworkMap, series: &TimeSeries) -> Result<()> {
    write_labels(
        dir,
        stem,
        &Label {
            map: map.clone(),
            series: series.clone(),
        },
    )?;
    Ok(())
}

/// Writes `<out>/<name>.vol4`, the target (network 0) truth under
/// `<out>/truth/`, and every planted network under `<out>/planted/`
/// (`<name>.net<g>.map.vol4`, courses one per row in `<name>.courses.csv`).
pub fn write_synthetic(spec: &SyntheticSpec, name: &str, out: &Path) -> Result<()> {
    let syn = synthesize(spec)?;
    fs::create_dir_all(out)?;
    write_volume4d(&syn.volume, out.join(format!("{}.vol4", name)))?;
    if let Some((map, series)) = syn.planted.first() {
        write_label_files(&out.join("truth"), name, map, series)?;
    }
    let planted = out.join("planted");
    fs::create_dir_all(&planted)?;
    for (g, (map, _)) in syn.planted.iter().enumerate() {
        write_map(map, planted.join(format!("{}.net{}.map.vol4", name, g)))?;
    }
    let courses: Vec<TimeSeries> = syn.planted.iter().map(|(_, s)| s.clone()).collect();
    write_series_csv(&courses, planted.join(format!("{}.courses.csv", name)))?;
    Ok(())
}

/// Layout written by [`write_cohort`].
#[derive(Debug, Clone)]
pub struct CohortDirs {
    pub root: PathBuf,
}

impl CohortDirs {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        CohortDirs { root: root.into() }
    }

    pub fn train(&self) -> PathBuf {
        self.root.join("train")
    }

    pub fn test(&self) -> PathBuf {
        self.root.join("test")
    }

    /// Planted target map and course of every subject.
    pub fn truth(&self) -> PathBuf {
        self.root.join("truth")
    }

    pub fn template(&self) -> PathBuf {
        self.root.join(TEMPLATE_FILE)
    }
}

pub fn subject_name(index: usize) -> String {
    format!("subj{:03}", index)
}

/// Subjects `0..n_train` go to `train/`, the next `n_test` to `test/`.
pub fn write_cohort(cohort: &Cohort, n_train: usize, n_test: usize, out: &Path) -> Result<CohortDirs> {
    let dirs = CohortDirs::new(out);
    fs::create_dir_all(dirs.train())?;
    fs::create_dir_all(dirs.test())?;
    write_map(&cohort.template(), dirs.template())?;
    for i in 0..n_train + n_test {
        let syn = synthesize(&cohort.subject(i))?;
        let name = subject_name(i);
        let dir = if i < n_train { dirs.train() } else { dirs.test() };
        write_volume4d(&syn.volume, dir.join(format!("{}.vol4", name)))?;
        let (map, series) = &syn.planted[0];
        write_label_files(&dirs.truth(), &name, map, series)?;
    }
    let mut kv = KvMap::new();
    kv.insert("frames", cohort.frames);
    kv.insert("dims", format!("{} {} {}", cohort.dims[0], cohort.dims[1], cohort.dims[2]));
    kv.insert("noise_sigma", cohort.noise_sigma);
    kv.insert("distractors", cohort.distractors);
    kv.insert("seed", cohort.seed);
    kv.insert("train", n_train);
    kv.insert("test", n_test);
    fs::write(out.join("cohort.txt"), kv.render())?;
    Ok(dirs)
}

/// `key = value` rendering of a template match.
pub fn match_report(m: &TemplateMatch) -> String {
    let mut kv = KvMap::new();
    kv.insert("best_index", m.best_index);
    kv.insert("jaccard", m.jaccard);
    kv.insert("no_match", m.no_match());
    let scores: Vec<String> = m.all_scores.iter().map(|s| s.to_string()).collect();
    kv.insert("all_scores", scores.join(" "));
    kv.render()
}

/// Writes `atoms.csv` (one row per atom), `map<kk>.vol4` per atom and,
/// when matched, `match.txt`.
pub fn write_dictionary(model: &DictionaryModel, matched: Option<&TemplateMatch>, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    write_series_csv(model.atoms(), out.join("atoms.csv"))?;
    for (k, map) in model.maps().iter().enumerate() {
        write_map(map, out.join(format!("map{:02}.vol4", k)))?;
    }
    let mut kv = KvMap::new();
    kv.insert("atoms", model.k());
    kv.insert("lambda", model.lambda());
    kv.insert("objective", model.objective());
    kv.insert("unconverged_voxels", model.unconverged_voxels());
    fs::write(out.join("model.txt"), kv.render())?;
    if let Some(m) = matched {
        fs::write(out.join("match.txt"), match_report(m))?;
    }
    Ok(())
}

/// Labels every volume in `data` with its best-matching dictionary atom,
/// writing `<stem>.map.vol4`, `<stem>.series.csv` and `<stem>.match.txt`.
pub fn label_dir(data: &Path, template: &NetworkMap, cfg: &DictConfig, out: &Path) -> Result<Vec<(String, TemplateMatch)>> {
    let paths = list_volumes(data)?;
    if paths.is_empty() {
        return Err(PipelineError::Input(format!("no volumes in {}", data.display())));
    }
    fs::create_dir_all(out)?;
    let results = Exec::default().map(paths.len(), |i| -> Result<(String, TemplateMatch)> {
        let name = stem(&paths[i]);
        let vol = normalize(&read_volume4d(&paths[i])?);
        let (label, m) = label_subject(&vol, template, cfg)?;
        write_labels(out, &name, &label)?;
        fs::write(out.join(format!("{}.match.txt", name)), match_report(&m))?;
        Ok((name, m))
    });
    results.into_iter().collect()
}

/// Latest saved U-Net and CAE under `dir`: either `dir` itself or the most
/// recent `stage<S>-final/` below `before`.
fn resume(dir: &Path, before: Stage, fresh: StCnn) -> Result<StCnn> {
    let mut model = fresh;
    let mut candidates = vec![dir.to_path_buf()];
    for s in (1..before.number()).rev() {
        candidates.push(dir.join(format!("stage{}-final", s)));
    }
    let mut found = (false, false);
    for c in &candidates {
        if !found.0 && c.join(UNET_FILE).is_file() {
            model.unet = load_unet(&c.join(UNET_FILE))?;
            found.0 = true;
        }
        if !found.1 && c.join(CAE_FILE).is_file() {
            model.cae = load_cae(&c.join(CAE_FILE))?;
            found.1 = true;
        }
    }
    if before >= Stage::TemporalOnly && !found.0 {
        return Err(PipelineError::Input(format!(
            "stage {} needs a trained U-Net; none found in {}",
            before.number(),
            dir.display()
        )));
    }
    if before == Stage::JointFinetune && !found.1 {
        return Err(PipelineError::Input(format!(
            "stage 3 needs a trained CAE; none found in {}",
            dir.display()
        )));
    }
    Ok(model)
}

/// Runs `stages` (all three when empty) and writes checkpoints, the trace
/// and the final model (`<out>/final/`). A run that starts after stage 1
/// resumes from `init` or, failing that, from earlier stage snapshots in
/// `out`.
pub fn train_dirs(
    data: &Path,
    labels: &Path,
    cfg: &TrainConfig,
    out: &Path,
    stages: &[Stage],
    init: Option<&Path>,
) -> Result<TrainTrace> {
    cfg.validate()?;
    let subjects = load_dataset(data, labels)?;
    let frames = subjects[0].volume.frames();
    if subjects.iter().any(|s| s.volume.frames() != frames) {
        return Err(PipelineError::Input("subjects differ in frame count".into()));
    }
    let stages: Vec<Stage> = if stages.is_empty() { Stage::ALL.to_vec() } else { stages.to_vec() };
    let first = *stages.iter().min().expect("non-empty");
    let fresh = StCnn::new(cfg.unet_config(frames), cfg.seed)?;
    let mut model = if first == Stage::SpatialOnly {
        fresh
    } else {
        resume(init.unwrap_or(out), first, fresh)?
    };
    fs::create_dir_all(out)?;
    let ckpt = Checkpointer::new(out, cfg.checkpoint_every);
    let trace = match train_all(&mut model, &subjects, cfg, &stages, Some(&ckpt)) {
        Ok(t) => t,
        Err(JointError::NonFinite { stage, step, trace }) => {
            fs::write(out.join(TRACE_FILE), trace.to_csv())?;
            return Err(JointError::NonFinite { stage, step, trace }.into());
        }
        Err(e) => return Err(e.into()),
    };
    let name = if stages.len() == 3 {
        TRACE_FILE.to_string()
    } else {
        let tags: Vec<String> = stages.iter().map(|s| s.number().to_string()).collect();
        format!("trace-stage{}.csv", tags.join(""))
    };
    fs::write(out.join(name), trace.to_csv())?;
    model.save(&out.join(FINAL_DIR))?;
    Ok(trace)
}

/// A checkpoint directory, or a training output directory holding `final/`.
pub fn load_model(ckpt: &Path) -> Result<StCnn> {
    let dir = if ckpt.join(UNET_FILE).is_file() { ckpt.to_path_buf() } else { ckpt.join(FINAL_DIR) };
    Ok(StCnn::load(&dir)?)
}

/// Predicts map and refined series for one `.vol4` file or every volume in
/// a directory; returns the subject stems.
pub fn infer_path(ckpt: &Path, data: &Path, out: &Path) -> Result<Vec<String>> {
    let model = load_model(ckpt)?;
    let paths = if data.is_dir() { list_volumes(data)? } else { vec![data.to_path_buf()] };
    fs::create_dir_all(out)?;
    let mut names = Vec::new();
    for p in paths {
        let name = stem(&p);
        let vol = normalize(&read_volume4d(&p)?);
        let (mut map, series) = model.infer(&vol)?;
        map.label = "prediction".into();
        write_label_files(out, &name, &map, &series)?;
        names.push(name);
    }
    Ok(names)
}

#[derive(Debug, Clone)]
pub struct EvalInputs<'a> {
    pub pred: &'a Path,
    pub truth: &'a Path,
    pub template: &'a Path,
    /// Data directory; enables the dictionary baseline and the supervised
    /// validation columns.
    pub data: Option<&'a Path>,
    pub dict: DictConfig,
    pub plots: Option<&'a Path>,
}

/// Prediction stems: every `<stem>.map.vol4` in `dir`, sorted.
fn prediction_stems(dir: &Path) -> Result<Vec<String>> {
    let mut out: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".map.vol4")).map(str::to_string))
        .collect();
    out.sort();
    Ok(out)
}

/// Scores every prediction in `pred` and writes the report to `out`.
pub fn evaluate_dirs(inputs: &EvalInputs<'_>, out: &Path) -> Result<EvalReport> {
    let template = read_map(inputs.template)?;
    let names = prediction_stems(inputs.pred)?;
    if names.is_empty() {
        return Err(PipelineError::Input(format!("no predictions in {}", inputs.pred.display())));
    }
    let loaded = names
        .iter()
        .map(|n| Ok((read_labels(inputs.pred, n)?, read_labels(inputs.truth, n)?)))
        .collect::<Result<Vec<_>>>()?;
    let rows = Exec::default().map(names.len(), |i| -> Result<_> {
        let (pred, truth) = &loaded[i];
        let truth = Truth {
            map: &truth.map,
            series: &truth.series,
        };
        let (baseline, sr) = match inputs.data {
            Some(dir) => {
                let vol = normalize(&read_volume4d(dir.join(format!("{}.vol4", names[i])))?);
                let model = dict_learn(&vol, &inputs.dict)?;
                let sr = validate_supervised(&pred.map, &pred.series, &vol, &inputs.dict)?;
                (Some(model), Some(sr))
            }
            None => (None, None),
        };
        let mut row = compare_baseline(
            &names[i],
            &pred.map,
            &pred.series,
            baseline.as_ref(),
            &template,
            Some(truth),
            BASELINE_FLOOR,
        )?;
        row.supervised_sr_jaccard = sr;
        Ok(row)
    });
    let report = EvalReport {
        rows: rows.into_iter().collect::<Result<_>>()?,
    };
    let plots: Vec<PlotData<'_>> = names
        .iter()
        .zip(&loaded)
        .map(|(n, (p, t))| PlotData {
            subject: n,
            map: &p.map,
            series: &p.series,
            truth: Some(Truth {
                map: &t.map,
                series: &t.series,
            }),
        })
        .collect();
    emit_report(&report, out, &plots, inputs.plots)?;
    Ok(report)
}
