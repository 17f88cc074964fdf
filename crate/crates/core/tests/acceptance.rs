//! End-to-end acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the criteria print in
//! order and share the one expensive training run. A failing criterion is
//! reported, not fatal; set `STCNN_ACCEPTANCE_STRICT=1` to exit nonzero on
//! any FAIL.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stcnn::dictionary::{dict_learn, DictConfig};
use stcnn::eval::validate_supervised;
use stcnn::gradcheck::run_suite;
use stcnn::joint::{joint_operator, moving_average, read_labels, Stage, TrainConfig, TrainTrace};
use stcnn::nn::{CaeConfig, CaeModel};
use stcnn::overlap::{jaccard, ThresholdRule};
use stcnn::pipeline::{self, CohortDirs, EvalInputs, TRACE_FILE};
use stcnn::tensor::{Graph, Tensor};
use stcnn::volume::{
    normalize, read_volume4d, synthesize, Blob, Cohort, MaskShape, NetworkMap, NetworkSpec, SyntheticSpec,
    TimeSeries, Volume4D,
};

type Outcome = Result<(bool, String), String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let report = run_suite(2017).map_err(err)?;
    let elapsed = start.elapsed();
    for c in &report.cases {
        println!("    {}", c);
    }
    let ops = report.cases.iter().filter(|c| c.tolerance == 1e-6).count();
    let worst_op = report.cases.iter().filter(|c| c.tolerance == 1e-6).map(|c| c.max_rel_err).fold(0.0, f64::max);
    let worst_net = report.cases.iter().filter(|c| c.tolerance == 1e-5).map(|c| c.max_rel_err).fold(0.0, f64::max);
    let ok = report.passed() && elapsed < Duration::from_secs(120);
    Ok((
        ok,
        format!(
            "{} op cases, worst op rel err {:.2e}, worst network rel err {:.2e}, {:.1}s",
            ops,
            worst_op,
            worst_net,
            elapsed.as_secs_f64()
        ),
    ))
}

fn joint_operator_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_oracle, mut worst_linear) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let t = rng.random_range(2..=8);
        let dims = [rng.random_range(1..=6), rng.random_range(1..=6), rng.random_range(1..=6)];
        let n: usize = dims.iter().product();
        let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-2.0..2.0)).collect() };
        let data = draw(t * n);
        let (m1, m2) = (draw(n), draw(n));
        let vol = Volume4D::new(t, dims, data.clone()).map_err(err)?;
        let map1 = NetworkMap::new(dims, m1.clone(), "").map_err(err)?;
        let map2 = NetworkMap::new(dims, m2.clone(), "").map_err(err)?;
        let out = joint_operator(&vol, &map1).map_err(err)?;
        for f in 0..t {
            let dot: f64 = (0..n).map(|v| data[f * n + v] * m1[v]).sum();
            worst_oracle = worst_oracle.max((out.values()[f] - dot).abs());
        }
        let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let mix: Vec<f64> = m1.iter().zip(&m2).map(|(x, y)| a * x + b * y).collect();
        let lhs = joint_operator(&vol, &NetworkMap::new(dims, mix, "").map_err(err)?).map_err(err)?;
        let o2 = joint_operator(&vol, &map2).map_err(err)?;
        for f in 0..t {
            let rhs = a * out.values()[f] + b * o2.values()[f];
            worst_linear = worst_linear.max((lhs.values()[f] - rhs).abs());
        }
    }
    Ok((
        worst_oracle <= 1e-12 && worst_linear <= 1e-12,
        format!("max |op - oracle| {:.1e}, max linearity gap {:.1e}", worst_oracle, worst_linear),
    ))
}

fn neg_pearson(x: &[f64], y: &[f64]) -> Result<f64, String> {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::from_f64(&[x.len()], x).map_err(err)?);
    let b = g.constant(Tensor::from_f64(&[y.len()], y).map_err(err)?);
    let l = g.neg_pearson_loss(a, b).map_err(err)?;
    Ok(g.value(l.loss).data()[0])
}

fn pearson_loss_conformance() -> Outcome {
    let example = neg_pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0])?;
    let example_gap = (example + 0.8).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut out_of_bounds, mut worst_affine) = (0usize, 0.0f64);
    for _ in 0..1000 {
        let n = rng.random_range(3..=64);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let l = neg_pearson(&x, &y)?;
        if !(-1.0..=1.0).contains(&l) {
            out_of_bounds += 1;
        }
        let (a, b) = (rng.random_range(0.1..10.0), rng.random_range(-5.0..5.0));
        let xt: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        worst_affine = worst_affine.max((neg_pearson(&xt, &y)? - l).abs());
    }
    Ok((
        example_gap <= 1e-12 && out_of_bounds == 0 && worst_affine <= 1e-12,
        format!(
            "example {:.15} (gap {:.1e}), {} of 1000 out of [-1, 1], max affine gap {:.1e}",
            example, example_gap, out_of_bounds, worst_affine
        ),
    ))
}

fn dictionary_recovery() -> Outcome {
    let net = |label: &str, blobs: Vec<[f64; 3]>, onsets: Vec<usize>, dur: usize| NetworkSpec {
        label: label.into(),
        blobs: blobs
            .into_iter()
            .map(|center| Blob {
                center,
                radius: 2.0,
                amplitude: 1.0,
            })
            .collect(),
        durations: vec![dur; onsets.len()],
        onsets,
    };
    let spec = SyntheticSpec {
        frames: 60,
        dims: [12, 12, 12],
        networks: vec![
            net("first", vec![[3.0, 3.0, 3.0], [3.0, 8.0, 8.0]], vec![5, 25, 45], 8),
            net("second", vec![[8.5, 5.0, 3.5], [8.0, 8.5, 8.5]], vec![12, 18, 33, 52], 4),
        ],
        noise_sigma: 0.0,
        seed: 41,
        repetition_time: 1.0,
        mask: MaskShape::Full,
    };
    let syn = synthesize(&spec).map_err(err)?;
    let cfg = DictConfig {
        atoms: 5,
        seed: 9,
        ..DictConfig::default()
    };
    let model = dict_learn(&normalize(&syn.volume), &cfg).map_err(err)?;
    let mut ok = true;
    let mut detail = Vec::new();
    for (map, course) in &syn.planted {
        let (best, corr) = model
            .atoms()
            .iter()
            .enumerate()
            .map(|(i, a)| (i, pearson(a.values(), course.values()).abs()))
            .max_by(|p, q| p.1.total_cmp(&q.1))
            .expect("atoms");
        let support = jaccard(&model.maps()[best], map, ThresholdRule::default()).map_err(err)?.score;
        ok &= corr >= 0.99 && support >= 0.9;
        detail.push(format!("|corr| {:.4} support {:.3}", corr, support));
    }
    let monotone = model.objective_trace().windows(2).all(|w| w[1] <= w[0] + 1e-9 * w[0].max(1.0));
    ok &= monotone;
    Ok((ok, format!("{}; objective monotone: {}", detail.join(", "), monotone)))
}

fn cae_architecture() -> Outcome {
    let arch = CaeModel::<f64>::new(CaeConfig { seed: 0 }).architecture();
    let ok = arch.encoder_kernels == [3, 5, 8] && arch.encoder_channels == [8, 16, 32];
    Ok((
        ok,
        format!(
            "encoder kernels {:?} channels {:?}; decoder kernels {:?} channels {:?}",
            arch.encoder_kernels, arch.encoder_channels, arch.decoder_kernels, arch.decoder_channels
        ),
    ))
}

struct Run {
    trace: TrainTrace,
    report: stcnn::eval::EvalReport,
    null_scores: Vec<f64>,
    elapsed: Duration,
}

fn run_pipeline(root: &Path, cohort: &Cohort, n_train: usize, n_test: usize, cfg: &TrainConfig) -> Result<Run, String> {
    let start = Instant::now();
    let dirs: CohortDirs = pipeline::write_cohort(cohort, n_train, n_test, &root.join("cohort")).map_err(err)?;
    let template = stcnn::volume::read_map(dirs.template()).map_err(err)?;
    let dict = DictConfig::default();
    pipeline::label_dir(&dirs.train(), &template, &dict, &root.join("labels")).map_err(err)?;
    let run = root.join("run");
    let trace = pipeline::train_dirs(&dirs.train(), &root.join("labels"), cfg, &run, &[], None).map_err(err)?;
    pipeline::infer_path(&run, &dirs.test(), &root.join("pred")).map_err(err)?;
    let template_path = dirs.template();
    let truth = dirs.truth();
    let pred = root.join("pred");
    let test = dirs.test();
    let plots = root.join("plots");
    let inputs = EvalInputs {
        pred: &pred,
        truth: &truth,
        template: &template_path,
        data: Some(&test),
        dict: dict.clone(),
        plots: Some(&plots),
    };
    let report = pipeline::evaluate_dirs(&inputs, &root.join("report.csv")).map_err(err)?;
    let elapsed = start.elapsed();

    // null control: a random course as the fixed atom
    let mut null_scores = Vec::new();
    for row in &report.rows {
        let vol = normalize(&read_volume4d(test.join(format!("{}.vol4", row.subject))).map_err(err)?);
        let pred_label = read_labels(&pred, &row.subject).map_err(err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0xbad5eed ^ row.subject.len() as u64 ^ null_scores.len() as u64);
        let noise: Vec<f64> = (0..vol.frames()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let random = TimeSeries::new(noise).map_err(err)?;
        null_scores.push(validate_supervised(&pred_label.map, &random, &vol, &dict).map_err(err)?);
    }
    let trace_back = TrainTrace::from_csv(&fs::read_to_string(run.join(TRACE_FILE)).map_err(err)?).map_err(err)?;
    if trace_back.records() != trace.records() {
        return Err("trace file does not match the in-memory trace".into());
    }
    Ok(Run {
        trace,
        report,
        null_scores,
        elapsed,
    })
}

fn end_to_end(run: &Run) -> Outcome {
    let jac: Vec<f64> = run.report.rows.iter().filter_map(|r| r.jaccard_stcnn_truth).collect();
    let r: Vec<f64> = run.report.rows.iter().filter_map(|r| r.temporal_pearson.map(f64::abs)).collect();
    let base: Vec<f64> = run.report.rows.iter().filter_map(|r| r.jaccard_baseline_truth).collect();
    let (mj, mr) = (mean(&jac), mean(&r));
    let ok = jac.len() == 10 && mj >= 0.5 && mr >= 0.8 && run.elapsed <= Duration::from_secs(30 * 60);
    Ok((
        ok,
        format!(
            "test mean Jaccard {:.3}, mean |r| {:.3} (dictionary baseline Jaccard {:.3}); pipeline {:.0}s",
            mj,
            mr,
            mean(&base),
            run.elapsed.as_secs_f64()
        ),
    ))
}

fn schedule(run: &Run) -> Outcome {
    let ma = |s: Stage| moving_average(&run.trace.losses(s), 20);
    let (m1, m2, m3) = (ma(Stage::SpatialOnly), ma(Stage::TemporalOnly), ma(Stage::JointFinetune));
    if m1.is_empty() || m2.is_empty() || m3.is_empty() {
        return Err("a stage ran fewer than 20 steps".into());
    }
    let last = |m: &[f64]| m[m.len() - 1];
    let r1 = last(&m1) / m1[0];
    // The negative-Pearson loss is bounded below by -1, so progress is
    // measured as distance from a perfect fit, 1 + L.
    let r2 = (1.0 + last(&m2)) / (1.0 + m2[0]);
    let rises = m3.windows(2).filter(|w| w[1] > w[0]).count();
    let largest_rise = m3.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    let ok = r1 < 0.1 && r2 < 0.1 && rises == 0;
    Ok((
        ok,
        format!(
            "stage 1 MA ratio {:.4}; stage 2 (1+L) MA ratio {:.4}; stage 3 MA {:.4} -> {:.4} with {} of {} step-to-step rises (largest {:.1e})",
            r1,
            r2,
            m3[0],
            last(&m3),
            rises,
            m3.len() - 1,
            largest_rise
        ),
    ))
}

fn supervised_validation(run: &Run) -> Outcome {
    let sr: Vec<f64> = run.report.rows.iter().filter_map(|r| r.supervised_sr_jaccard).collect();
    let (ms, mn) = (mean(&sr), mean(&run.null_scores));
    let worst = sr.iter().cloned().fold(f64::MAX, f64::min);
    Ok((
        sr.len() == run.report.rows.len() && ms >= 0.6 && mn < 0.1,
        format!("mean Jaccard {:.3} (min {:.3}); random-atom null {:.3}", ms, worst, mn),
    ))
}

fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap_or_default());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let cohort = Cohort {
        frames: 16,
        dims: [8, 8, 8],
        distractors: 1,
        seed: 5,
        ..Cohort::default()
    };
    let cfg = TrainConfig {
        steps: [10, 10, 10],
        checkpoint_every: 5,
        unet_levels: 2,
        unet_base_channels: 4,
        record_wall_time: false,
        ..TrainConfig::default()
    };
    let mut trees = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(err)?;
        run_pipeline(dir.path(), &cohort, 4, 2, &cfg)?;
        trees.push(tree_bytes(dir.path()));
    }
    let (a, b) = (&trees[0], &trees[1]);
    let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    let checkpoints = a.keys().filter(|k| k.ends_with(".ckpt")).count();
    let has_all = a.contains_key("run/trace.csv") && a.contains_key("report.csv") && checkpoints > 0;
    Ok((
        has_all && a.len() == b.len() && differing.is_empty(),
        format!(
            "{} files ({} checkpoints, trace, report) compared, {} differ",
            a.len(),
            checkpoints,
            differing.len()
        ),
    ))
}

fn print(id: usize, name: &str, outcome: Outcome) -> usize {
    let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {}", e)));
    println!("{} {} {}: {}", if pass { "PASS" } else { "FAIL" }, id, name, detail);
    pass as usize
}

fn main() {
    let mut passed = 0;
    passed += print(1, "gradient suite", gradient_suite());
    passed += print(2, "joint operator oracle", joint_operator_oracle());
    passed += print(3, "pearson loss conformance", pearson_loss_conformance());
    passed += print(4, "dictionary recovery", dictionary_recovery());

    let dir = tempfile::tempdir().expect("temp dir");
    let run = run_pipeline(dir.path(), &Cohort::default(), 40, 10, &TrainConfig::default());
    let shared = |f: fn(&Run) -> Outcome| run.as_ref().map_err(Clone::clone).and_then(f);
    passed += print(5, "end-to-end synthetic", shared(end_to_end));
    passed += print(6, "three-stage schedule", shared(schedule));
    passed += print(7, "supervised validation loop", shared(supervised_validation));
    passed += print(8, "temporal architecture", cae_architecture());
    passed += print(9, "determinism", determinism());
    println!("{} of 9 criteria passed", passed);
    if passed < 9 && std::env::var_os("STCNN_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
