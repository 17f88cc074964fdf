use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{save_cae, save_unet, JointError, Stage, StCnn, Subject, TraceRecord, TrainConfig, TrainTrace, CAE_FILE, UNET_FILE};
use crate::nn::{CaeModel, ParamSet, UNetModel};
use crate::tensor::{Adam, AdamConfig, Graph, Optimizer, Scalar, Tensor, Var};

/// Writes model snapshots to `<dir>/stage<S>-step<NNNNN>/` every `every`
/// steps and to `<dir>/stage<S>-final/` at the end of a stage.
#[derive(Debug, Clone)]
pub struct Checkpointer {
    pub dir: PathBuf,
    pub every: usize,
}

impl Checkpointer {
    pub fn new(dir: impl Into<PathBuf>, every: usize) -> Self {
        Checkpointer { dir: dir.into(), every }
    }

    fn save<S: Scalar>(
        &self,
        tag: &str,
        unet: Option<&UNetModel<S>>,
        cae: Option<&CaeModel<S>>,
    ) -> Result<(), JointError> {
        let dir = self.dir.join(tag);
        std::fs::create_dir_all(&dir)?;
        if let Some(u) = unet {
            save_unet(u, &dir.join(UNET_FILE))?;
        }
        if let Some(c) = cae {
            save_cae(c, &dir.join(CAE_FILE))?;
        }
        Ok(())
    }

    fn periodic<S: Scalar>(
        ckpt: Option<&Self>,
        stage: Stage,
        step: usize,
        last: usize,
        unet: Option<&UNetModel<S>>,
        cae: Option<&CaeModel<S>>,
    ) -> Result<(), JointError> {
        let Some(c) = ckpt else { return Ok(()) };
        if c.every > 0 && step.is_multiple_of(c.every) {
            c.save(&format!("stage{}-step{:05}", stage.number(), step), unet, cae)?;
        }
        if step == last {
            c.save(&format!("stage{}-final", stage.number()), unet, cae)?;
        }
        Ok(())
    }
}

struct Sample<S: Scalar> {
    volume: Tensor<S>,
    map: Tensor<S>,
    series: Tensor<S>,
}

fn prepare<S: Scalar>(data: &[Subject]) -> Vec<Sample<S>> {
    data.iter()
        .map(|s| Sample {
            volume: s.volume.to_tensor(),
            map: s.label.map.to_tensor(),
            series: s.label.series.to_tensor(),
        })
        .collect()
}

/// Subject index for each step: back-to-back seeded permutations.
fn schedule(subjects: usize, steps: usize, seed: u64, stage: Stage) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x5eed_0000 + stage.number() as u64));
    let mut order = Vec::with_capacity(steps + subjects);
    while order.len() < steps {
        let mut epoch: Vec<usize> = (0..subjects).collect();
        epoch.shuffle(&mut rng);
        order.extend(epoch);
    }
    order.truncate(steps);
    order
}

fn grads<S: Scalar>(g: &Graph<S>, vars: &[Var], params: &ParamSet<S>) -> Vec<Vec<S>> {
    vars.iter()
        .zip(params.tensors())
        .map(|(&v, t)| g.grad(v).map(<[S]>::to_vec).unwrap_or_else(|| vec![S::zero(); t.len()]))
        .collect()
}

fn adam<S: Scalar>(cfg: &TrainConfig, stage: Stage) -> Adam<S> {
    Adam::new(AdamConfig {
        lr: cfg.lr(stage),
        ..AdamConfig::default()
    })
}

fn check(data: &[Subject], frames: usize) -> Result<(), JointError> {
    if data.is_empty() {
        return Err(JointError::Config("empty training set".into()));
    }
    if let Some(s) = data.iter().find(|s| s.volume.frames() != frames) {
        return Err(JointError::Dimension(format!(
            "subject {} has {} frames, model expects {}",
            s.name,
            s.volume.frames(),
            frames
        )));
    }
    Ok(())
}

struct Clock {
    start: Instant,
    enabled: bool,
}

impl Clock {
    fn new(cfg: &TrainConfig) -> Self {
        Clock {
            start: Instant::now(),
            enabled: cfg.record_wall_time,
        }
    }

    fn ms(&self) -> f64 {
        if self.enabled {
            self.start.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        }
    }
}

fn finite_or_abort(trace: &mut TrainTrace, rec: TraceRecord) -> Result<(), JointError> {
    let bad = !rec.joint_loss.is_finite();
    let (stage, step) = (rec.stage.number(), rec.step);
    trace.push(rec)?;
    if bad {
        return Err(JointError::NonFinite {
            stage,
            step,
            trace: Box::new(trace.clone()),
        });
    }
    Ok(())
}

/// Stage 1: U-Net alone on the mean squared error to the label maps.
pub fn train_stage1<S: Scalar>(
    unet: &mut UNetModel<S>,
    data: &[Subject],
    cfg: &TrainConfig,
    ckpt: Option<&Checkpointer>,
) -> Result<TrainTrace, JointError> {
    let stage = Stage::SpatialOnly;
    check(data, unet.config().in_channels)?;
    let samples = prepare::<S>(data);
    let steps = cfg.steps(stage);
    let mut opt = adam(cfg, stage);
    let mut trace = TrainTrace::new(cfg.to_kv());
    let clock = Clock::new(cfg);
    for (i, &s) in schedule(samples.len(), steps, cfg.seed, stage).iter().enumerate() {
        let mut g = Graph::new();
        let vars = unet.params().bind(&mut g, true);
        let x = g.constant(samples[s].volume.clone());
        let map = unet.forward(&mut g, &vars, x)?;
        let target = g.constant(samples[s].map.clone());
        let loss = g.mse_loss(map, target)?;
        g.backward(loss)?;
        let value = g.value(loss).data()[0].as_f64();
        let grads = grads(&g, &vars, unet.params());
        drop(g);
        finite_or_abort(
            &mut trace,
            TraceRecord {
                stage,
                step: i + 1,
                spatial_loss: Some(value),
                temporal_loss: None,
                joint_loss: value,
                wall_ms: clock.ms(),
            },
        )?;
        opt.step(unet.params_mut().tensors_mut(), &grads);
        Checkpointer::periodic(ckpt, stage, i + 1, steps, Some(&*unet), None)?;
    }
    Ok(trace)
}

/// Stage 2: CAE alone on the negative Pearson correlation between its
/// output and the label series, fed with the frozen U-Net's joint series.
pub fn train_stage2<S: Scalar>(
    cae: &mut CaeModel<S>,
    unet: &UNetModel<S>,
    data: &[Subject],
    cfg: &TrainConfig,
    ckpt: Option<&Checkpointer>,
) -> Result<TrainTrace, JointError> {
    let stage = Stage::TemporalOnly;
    check(data, unet.config().in_channels)?;
    let samples = prepare::<S>(data);
    // the U-Net is frozen, so each subject's joint series is fixed
    let raw = samples
        .iter()
        .map(|s| {
            let mut g = Graph::new();
            let vars = unet.params().bind(&mut g, false);
            let x = g.constant(s.volume.clone());
            let map = unet.forward(&mut g, &vars, x)?;
            let ts = g.frame_dot(x, map)?;
            Ok(g.value(ts).clone())
        })
        .collect::<Result<Vec<Tensor<S>>, JointError>>()?;
    let steps = cfg.steps(stage);
    let mut opt = adam(cfg, stage);
    let mut trace = TrainTrace::new(cfg.to_kv());
    let clock = Clock::new(cfg);
    for (i, &s) in schedule(samples.len(), steps, cfg.seed, stage).iter().enumerate() {
        let mut g = Graph::new();
        let vars = cae.params().bind(&mut g, true);
        let x = g.constant(raw[s].clone());
        let refined = cae.forward(&mut g, &vars, x)?;
        let target = g.constant(samples[s].series.clone());
        let loss = g.neg_pearson_loss(refined, target)?.loss;
        g.backward(loss)?;
        let value = g.value(loss).data()[0].as_f64();
        let grads = grads(&g, &vars, cae.params());
        drop(g);
        finite_or_abort(
            &mut trace,
            TraceRecord {
                stage,
                step: i + 1,
                spatial_loss: None,
                temporal_loss: Some(value),
                joint_loss: value,
                wall_ms: clock.ms(),
            },
        )?;
        opt.step(cae.params_mut().tensors_mut(), &grads);
        Checkpointer::periodic(ckpt, stage, i + 1, steps, None, Some(&*cae))?;
    }
    Ok(trace)
}

/// Stage 3: both networks on `w_spatial · spatial + w_temporal · temporal`.
pub fn train_stage3<S: Scalar>(
    model: &mut StCnn<S>,
    data: &[Subject],
    cfg: &TrainConfig,
    ckpt: Option<&Checkpointer>,
) -> Result<TrainTrace, JointError> {
    let stage = Stage::JointFinetune;
    check(data, model.unet.config().in_channels)?;
    let samples = prepare::<S>(data);
    let steps = cfg.steps(stage);
    // Adam is element-wise, so one optimiser per network equals one over both.
    let mut opt_u = adam(cfg, stage);
    let mut opt_c = adam(cfg, stage);
    let mut trace = TrainTrace::new(cfg.to_kv());
    let clock = Clock::new(cfg);
    for (i, &s) in schedule(samples.len(), steps, cfg.seed, stage).iter().enumerate() {
        let mut g = Graph::new();
        let uv = model.unet.params().bind(&mut g, true);
        let cv = model.cae.params().bind(&mut g, true);
        let x = g.constant(samples[s].volume.clone());
        let r = model.record(&mut g, &uv, &cv, x)?;
        let target_map = g.constant(samples[s].map.clone());
        let target_series = g.constant(samples[s].series.clone());
        let spatial = g.mse_loss(r.map, target_map)?;
        let temporal = g.neg_pearson_loss(r.refined, target_series)?.loss;
        let ws = g.scale(spatial, S::of(cfg.w_spatial));
        let wt = g.scale(temporal, S::of(cfg.w_temporal));
        let joint = g.add(ws, wt)?;
        g.backward(joint)?;
        let value = |v: Var| g.value(v).data()[0].as_f64();
        let rec = TraceRecord {
            stage,
            step: i + 1,
            spatial_loss: Some(value(spatial)),
            temporal_loss: Some(value(temporal)),
            joint_loss: value(joint),
            wall_ms: clock.ms(),
        };
        let gu = grads(&g, &uv, model.unet.params());
        let gc = grads(&g, &cv, model.cae.params());
        drop(g);
        finite_or_abort(&mut trace, rec)?;
        opt_u.step(model.unet.params_mut().tensors_mut(), &gu);
        opt_c.step(model.cae.params_mut().tensors_mut(), &gc);
        Checkpointer::periodic(ckpt, stage, i + 1, steps, Some(&model.unet), Some(&model.cae))?;
    }
    Ok(trace)
}

/// Runs `stages` in order (all three by default) and concatenates traces.
pub fn train_all<S: Scalar>(
    model: &mut StCnn<S>,
    data: &[Subject],
    cfg: &TrainConfig,
    stages: &[Stage],
    ckpt: Option<&Checkpointer>,
) -> Result<TrainTrace, JointError> {
    cfg.validate()?;
    let mut stages = stages.to_vec();
    stages.sort();
    stages.dedup();
    let mut trace = TrainTrace::new(cfg.to_kv());
    for stage in stages {
        let t = match stage {
            Stage::SpatialOnly => train_stage1(&mut model.unet, data, cfg, ckpt)?,
            Stage::TemporalOnly => train_stage2(&mut model.cae, &model.unet, data, cfg, ckpt)?,
            Stage::JointFinetune => train_stage3(model, data, cfg, ckpt)?,
        };
        trace.extend(t)?;
    }
    Ok(trace)
}
