use super::*;
use crate::nn::UNetConfig;
use crate::volume::{normalize, synthesize, Cohort};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_volume(t: usize, dims: [usize; 3], rng: &mut ChaCha8Rng) -> Volume4D {
    let n = t * dims.iter().product::<usize>();
    Volume4D::new(t, dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_map(dims: [usize; 3], rng: &mut ChaCha8Rng) -> NetworkMap {
    let n = dims.iter().product();
    NetworkMap::new(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), "").unwrap()
}

fn tiny_cohort() -> Cohort {
    Cohort {
        frames: 16,
        dims: [8, 8, 8],
        noise_sigma: 0.3,
        distractors: 1,
        seed: 99,
    }
}

/// Subjects labelled with their planted target, to keep tests fast.
fn tiny_subjects(n: usize) -> Vec<Subject> {
    let cohort = tiny_cohort();
    (0..n)
        .map(|i| {
            let syn = synthesize(&cohort.subject(i)).unwrap();
            let (map, series) = syn.planted[0].clone();
            Subject {
                name: format!("sub-{}", i),
                volume: normalize(&syn.volume),
                label: Label { map, series },
            }
        })
        .collect()
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        seed: 3,
        steps: [6, 6, 6],
        unet_levels: 2,
        unet_base_channels: 4,
        checkpoint_every: 4,
        record_wall_time: false,
        ..TrainConfig::default()
    }
}

fn tiny_model(cfg: &TrainConfig) -> StCnn {
    StCnn::new(cfg.unet_config(16), cfg.seed).unwrap()
}

#[test]
fn joint_operator_examples() {
    let ones = Volume4D::new(3, [2, 2, 2], vec![1.0; 24]).unwrap();
    let map = NetworkMap::new([2, 2, 2], vec![1.0; 8], "").unwrap();
    assert_eq!(joint_operator(&ones, &map).unwrap().values(), &[8.0, 8.0, 8.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let vol = random_volume(4, [5, 5, 5], &mut rng);
    let mut delta = NetworkMap::zeros([5, 5, 5], "");
    delta.values_mut()[37] = 1.0;
    assert_eq!(joint_operator(&vol, &delta).unwrap().values(), vol.voxel_series(37).as_slice());

    let bad = NetworkMap::zeros([5, 5, 4], "");
    assert!(matches!(joint_operator(&vol, &bad), Err(JointError::Dimension(_))));
}

#[test]
fn joint_operator_matches_dot_products_and_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let vol = random_volume(4, [5, 5, 5], &mut rng);
    let (m1, m2) = (random_map([5, 5, 5], &mut rng), random_map([5, 5, 5], &mut rng));
    let ts = joint_operator(&vol, &m1).unwrap();
    for t in 0..4 {
        let oracle: f64 = vol.frame(t).iter().zip(m1.values()).map(|(a, b)| a * b).sum();
        assert!((ts.values()[t] - oracle).abs() < 1e-12);
    }
    let a = -1.7;
    let combo = NetworkMap::new(
        [5, 5, 5],
        m1.values().iter().zip(m2.values()).map(|(x, y)| a * x + y).collect(),
        "",
    )
    .unwrap();
    let lhs = joint_operator(&vol, &combo).unwrap();
    let r2 = joint_operator(&vol, &m2).unwrap();
    for t in 0..4 {
        let rhs = a * ts.values()[t] + r2.values()[t];
        assert!((lhs.values()[t] - rhs).abs() < 1e-12);
    }
}

#[test]
fn forward_full_shapes_and_zero_networks() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let vol = random_volume(8, [16, 16, 16], &mut rng);
    let model = StCnn::<f64>::new(UNetConfig::new(8), 5).unwrap();
    let out = model.forward_full(&vol).unwrap();
    assert_eq!(out.map.dims(), [16, 16, 16]);
    assert_eq!((out.raw.len(), out.refined.len()), (8, 8));

    let zero = StCnn::<f64> {
        unet: crate::nn::UNetModel::zeroed(UNetConfig::new(8)).unwrap(),
        cae: crate::nn::CaeModel::zeroed(),
    };
    let out = zero.forward_full(&vol).unwrap();
    assert!(out.map.values().iter().all(|&v| v == 0.0));
    assert!(out.raw.values().iter().all(|&v| v == 0.0));
    assert!(out.refined.values().iter().all(|&v| v == 0.0));
    assert!(out.constant);

    let wrong = random_volume(9, [16, 16, 16], &mut rng);
    assert!(model.forward_full(&wrong).is_err());
}

#[test]
fn temporal_loss_reaches_unet_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = tiny_config();
    let model = tiny_model(&cfg);
    let vol = random_volume(16, [8, 8, 8], &mut rng);
    let target: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss_with = |m: &StCnn| -> (f64, Option<Vec<f64>>) {
        let mut g = Graph::<f64>::new();
        let uv = m.unet.params().bind(&mut g, true);
        let cv = m.cae.params().bind(&mut g, false);
        let x = g.constant(vol.to_tensor());
        let r = m.record(&mut g, &uv, &cv, x).unwrap();
        let y = g.constant(crate::tensor::Tensor::from_f64(&[16], &target).unwrap());
        let loss = g.neg_pearson_loss(r.refined, y).unwrap().loss;
        g.backward(loss).unwrap();
        (g.value(loss).data()[0], g.grad(uv[0]).map(<[f64]>::to_vec))
    };
    let (_, grad) = loss_with(&model);
    let grad = grad.unwrap();
    let (idx, &gmax) = grad
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .unwrap();
    assert!(gmax.abs() > 1e-8, "no gradient reached the U-Net");
    // central difference agrees in sign
    let h = 1e-5;
    let mut plus = model.clone();
    plus.unet.params_mut().tensors_mut()[0].data_mut()[idx] += h;
    let mut minus = model.clone();
    minus.unet.params_mut().tensors_mut()[0].data_mut()[idx] -= h;
    let fd = (loss_with(&plus).0 - loss_with(&minus).0) / (2.0 * h);
    assert_eq!(fd.signum(), gmax.signum());
}

#[test]
fn zero_steps_leave_parameters_unchanged() {
    let mut cfg = tiny_config();
    cfg.steps = [0, 0, 0];
    let data = tiny_subjects(2);
    let mut model = tiny_model(&cfg);
    let before = model.clone();
    let trace = train_all(&mut model, &data, &cfg, &Stage::ALL, None).unwrap();
    assert!(trace.records().is_empty());
    assert_eq!(model, before);
}

#[test]
fn stages_touch_only_their_network() {
    let cfg = tiny_config();
    let data = tiny_subjects(2);
    let mut model = tiny_model(&cfg);
    let before = model.clone();
    train_all(&mut model, &data, &cfg, &[Stage::SpatialOnly], None).unwrap();
    assert_eq!(model.cae, before.cae);
    assert_ne!(model.unet, before.unet);
    let after1 = model.clone();
    train_all(&mut model, &data, &cfg, &[Stage::TemporalOnly], None).unwrap();
    assert_eq!(model.unet, after1.unet);
    assert_ne!(model.cae, after1.cae);
}

#[test]
fn training_is_deterministic_and_checkpointed() {
    let cfg = tiny_config();
    let data = tiny_subjects(3);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut outputs = Vec::new();
    for dir in &dirs {
        let mut model = tiny_model(&cfg);
        let ck = Checkpointer::new(dir.path(), cfg.checkpoint_every);
        let trace = train_all(&mut model, &data, &cfg, &Stage::ALL, Some(&ck)).unwrap();
        outputs.push((trace.to_csv(), model));
    }
    assert_eq!(outputs[0].0, outputs[1].0);
    assert_eq!(outputs[0].1, outputs[1].1);
    for tag in ["stage1-step00004", "stage1-final", "stage2-final", "stage3-step00004", "stage3-final"] {
        for d in &dirs {
            assert!(d.path().join(tag).is_dir(), "missing {}", tag);
        }
        let a = std::fs::read(dirs[0].path().join(tag).join(match tag {
            t if t.starts_with("stage2") => CAE_FILE,
            _ => UNET_FILE,
        }))
        .unwrap();
        let b = std::fs::read(dirs[1].path().join(tag).join(match tag {
            t if t.starts_with("stage2") => CAE_FILE,
            _ => UNET_FILE,
        }))
        .unwrap();
        assert_eq!(a, b);
    }
    let loaded = StCnn::<f64> {
        unet: load_unet(&dirs[0].path().join("stage3-final").join(UNET_FILE)).unwrap(),
        cae: load_cae(&dirs[0].path().join("stage3-final").join(CAE_FILE)).unwrap(),
    };
    assert_eq!(loaded, outputs[0].1);

    let trace = TrainTrace::from_csv(&outputs[0].0).unwrap();
    assert_eq!(trace.header().parse_value::<f64>("w_spatial").unwrap(), 10.0);
    assert_eq!(trace.header().parse_value::<f64>("w_temporal").unwrap(), 1.0);
    let stages: Vec<u8> = trace.records().iter().map(|r| r.stage.number()).collect();
    assert!(stages.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(trace.records().len(), 18);
}

#[test]
fn model_save_load_and_repeatable_inference() {
    let cfg = tiny_config();
    let model = tiny_model(&cfg);
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let back = StCnn::<f64>::load(dir.path()).unwrap();
    assert_eq!(back, model);
    let data = tiny_subjects(1);
    let a = back.infer(&data[0].volume).unwrap();
    let b = back.infer(&data[0].volume).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.0.dims(), data[0].volume.dims());
    assert!(load_cae::<f64>(&dir.path().join(UNET_FILE)).is_err());
}

#[test]
fn joint_stage_without_temporal_weight_moves_unet_like_stage_one() {
    let mut cfg = tiny_config();
    cfg.steps = [1, 0, 1];
    cfg.w_temporal = 0.0;
    cfg.lr = [1e-3, 1e-3, 1e-3];
    let data = tiny_subjects(1);
    let start = tiny_model(&cfg);
    let mut a = start.clone();
    train_stage1(&mut a.unet, &data, &cfg, None).unwrap();
    let mut b = start.clone();
    train_stage3(&mut b, &data, &cfg, None).unwrap();
    let delta = |m: &StCnn| -> Vec<f64> {
        m.unet
            .params()
            .tensors()
            .iter()
            .zip(start.unet.params().tensors())
            .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect::<Vec<_>>())
            .collect()
    };
    let (da, db) = (delta(&a), delta(&b));
    let dot: f64 = da.iter().zip(&db).map(|(x, y)| x * y).sum();
    let na: f64 = da.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = db.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(na > 0.0);
    // Adam's first step is g/(|g| + eps) elementwise; scaling g by the
    // spatial weight only moves the eps term, so directions agree to ~eps/|g|.
    assert!(dot / (na * nb) > 1.0 - 1e-6, "cosine {}", dot / (na * nb));
}

#[test]
fn stage_one_smoke_converges() {
    let mut cfg = tiny_config();
    cfg.steps = [200, 0, 0];
    cfg.lr[0] = 3e-3;
    let data = tiny_subjects(1);
    let mut model = tiny_model(&cfg);
    let trace = train_stage1(&mut model.unet, &data, &cfg, None).unwrap();
    let l = trace.losses(Stage::SpatialOnly);
    assert!(l[199] < 0.1 * l[0], "{} -> {}", l[0], l[199]);
}
