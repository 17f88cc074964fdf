//! Central finite-difference checks of every differentiable op and of both
//! networks, in 64-bit.
//!
//! Relative error of one instance is `‖a − n‖∞ / ‖n‖∞` over the checked
//! entries (`a` analytic, `n` numeric). An entry whose central differences at `h`
//! and `h / 10` disagree has a ReLU or max-pool switch inside `±h`; it is not a smooth
//! point, so it is skipped and counted.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::{CaeConfig, CaeModel, ModelError, UNetConfig, UNetModel};
use crate::tensor::{Graph, Padding, Tensor, TensorError, Var};

pub const STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-6;
pub const NETWORK_TOLERANCE: f64 = 1e-5;
pub const INSTANCES: usize = 20;
pub const SAMPLED_PARAMS: usize = 10;

/// Relative gap between the two central estimates that marks a kink.
const KINK_GAP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub instances: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < self.tolerance
    }
}

impl fmt::Display for CaseResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<18} instances={:<3} entries={:<6} skipped={:<3} max_rel_err={:.3e} (tol {:.0e})",
            if self.passed() { "ok  " } else { "FAIL" },
            self.name,
            self.instances,
            self.checked,
            self.skipped,
            self.max_rel_err,
            self.tolerance
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct SuiteReport {
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        !self.cases.is_empty() && self.cases.iter().all(CaseResult::passed)
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Check {
    checked: usize,
    skipped: usize,
    rel_err: f64,
}

type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var, TensorError> + 'a;

fn eval(inputs: &[Tensor], build: &Build<'_>) -> Result<f64, TensorError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    Ok(g.value(loss).data()[0])
}

/// Compares analytic and numeric gradients of the scalar `build` output
/// at `entries` (pairs of input index and flat element index).
fn check(inputs: &[Tensor], entries: &[(usize, usize)], build: &Build<'_>) -> Result<Check, TensorError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;

    let mut out = Check::default();
    let (mut diff, mut scale) = (0.0f64, 0.0f64);
    let mut work = inputs.to_vec();
    for &(i, j) in entries {
        let analytic = g.grad(vars[i]).map_or(0.0, |d| d[j]);
        let Some(numeric) = central(&mut work, (i, j), build)? else {
            out.skipped += 1;
            continue;
        };
        diff = diff.max((analytic - numeric).abs());
        scale = scale.max(numeric.abs());
        out.checked += 1;
    }
    out.rel_err = if diff == 0.0 { 0.0 } else { diff / scale.max(f64::MIN_POSITIVE) };
    Ok(out)
}

fn at(work: &mut [Tensor], (i, j): (usize, usize), dx: f64, build: &Build<'_>) -> Result<f64, TensorError> {
    let x = work[i].data()[j];
    work[i].data_mut()[j] = x + dx;
    let f = eval(work, build);
    work[i].data_mut()[j] = x;
    f
}

/// Central difference at `STEP`, or `None` at a kink.
///
/// On smooth points the central estimates at `h = STEP` and `h / 10` agree
/// to O(h²) and the gap between the one-sided slopes shrinks tenfold with
/// `h`. A derivative jump inside `(-h, h)` breaks the first; one inside
/// `(-h/10, h/10)` keeps the one-sided gap from shrinking.
fn central(work: &mut [Tensor], entry: (usize, usize), build: &Build<'_>) -> Result<Option<f64>, TensorError> {
    let f0 = at(work, entry, 0.0, build)?;
    let mut central = [0.0; 2];
    let mut gap = [0.0; 2];
    for (k, h) in [STEP, STEP / 10.0].into_iter().enumerate() {
        let (fp, fm) = (at(work, entry, h, build)?, at(work, entry, -h, build)?);
        central[k] = (fp - fm) / (2.0 * h);
        gap[k] = ((fp - f0) / h - (f0 - fm) / h).abs();
    }
    // rounding noise of a difference quotient at the finer step
    let noise = 64.0 * f64::EPSILON * f0.abs().max(1.0) / (STEP / 10.0);
    let size = central[0].abs().max(central[1].abs());
    let agree = (central[0] - central[1]).abs() <= KINK_GAP * size + noise;
    let shrinks = gap[1] <= 0.5 * gap[0] || gap[1] <= KINK_GAP * size + noise;
    Ok((agree && shrinks).then_some(central[0]))
}

fn all_entries(inputs: &[Tensor]) -> Vec<(usize, usize)> {
    inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect()
}

fn tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Values bounded away from zero, so no ReLU sits on its kink.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = tensor(rng, shape);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + 0.9 * v.abs());
    }
    t
}

/// Pairwise-distinct values (spacing 0.05), so max-pooling has no ties.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut rank: Vec<usize> = (0..n).collect();
    rank.shuffle(rng);
    let data = rank
        .iter()
        .map(|&r| r as f64 * 0.05 - 1.0 + rng.random_range(0.0..0.01))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// `mse(y, target)` for a fixed random target, turning any node into a
/// generic scalar loss.
fn against(g: &mut Graph, y: Var, target: &Tensor) -> Result<Var, TensorError> {
    let t = g.constant(target.clone());
    g.mse_loss(y, t)
}

struct OpCase {
    name: &'static str,
    /// Draws inputs, the fixed target of the outer mse (if any) and the op.
    setup: fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>>),
}

fn spatial(rng: &mut ChaCha8Rng, three_d: bool, lo: usize, hi: usize) -> Vec<usize> {
    if three_d {
        vec![dim(rng, lo, hi), dim(rng, lo, hi), dim(rng, lo, hi)]
    } else {
        vec![dim(rng, lo + 2, hi + 4)]
    }
}

fn any_spatial(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> Vec<usize> {
    let three_d = rng.random_bool(0.5);
    spatial(rng, three_d, lo, hi)
}

fn conv_case(rng: &mut ChaCha8Rng, three_d: bool, padding: Padding) -> (Vec<Tensor>, Box<Build<'static>>) {
    let (ci, co) = (dim(rng, 1, 2), dim(rng, 1, 3));
    let k = [1, 2, 3][rng.random_range(0..3)];
    let ext = spatial(rng, three_d, k.max(2), 4);
    let mut xs = vec![ci];
    xs.extend(&ext);
    let mut ks = vec![co, ci];
    ks.extend(std::iter::repeat_n(k, ext.len()));
    let inputs = vec![tensor(rng, &xs), tensor(rng, &ks)];
    let mut g = Graph::new();
    let (a, b) = (g.constant(inputs[0].clone()), g.constant(inputs[1].clone()));
    let y = if three_d { g.conv3d(a, b, padding) } else { g.conv1d(a, b, padding) }.expect("valid conv");
    let target = tensor(rng, g.value(y).shape());
    let build = move |g: &mut Graph, v: &[Var]| {
        let y = if three_d { g.conv3d(v[0], v[1], padding)? } else { g.conv1d(v[0], v[1], padding)? };
        against(g, y, &target)
    };
    (inputs, Box::new(build))
}

fn shape_of(c: usize, ext: &[usize]) -> Vec<usize> {
    let mut s = vec![c];
    s.extend(ext);
    s
}

fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase { name: "conv3d_same", setup: |r| conv_case(r, true, Padding::Same) },
        OpCase { name: "conv3d_valid", setup: |r| conv_case(r, true, Padding::Valid) },
        OpCase { name: "conv1d_same", setup: |r| conv_case(r, false, Padding::Same) },
        OpCase { name: "conv1d_valid", setup: |r| conv_case(r, false, Padding::Valid) },
        OpCase {
            name: "add_bias",
            setup: |r| {
                let three_d = r.random_bool(0.5);
                let c = dim(r, 1, 3);
                let shape = shape_of(c, &spatial(r, three_d, 1, 3));
                let inputs = vec![tensor(r, &shape), tensor(r, &[c])];
                let target = tensor(r, &shape);
                (inputs, Box::new(move |g, v| {
                    let y = g.add_bias(v[0], v[1])?;
                    against(g, y, &target)
                }))
            },
        },
        OpCase {
            name: "relu",
            setup: |r| {
                let shape = shape_of(dim(r, 1, 3), &any_spatial(r, 1, 3));
                let inputs = vec![off_zero(r, &shape)];
                let target = tensor(r, &shape);
                (inputs, Box::new(move |g, v| {
                    let y = g.relu(v[0]);
                    against(g, y, &target)
                }))
            },
        },
        OpCase {
            name: "add",
            setup: |r| {
                let shape = shape_of(dim(r, 1, 3), &any_spatial(r, 1, 3));
                let inputs = vec![tensor(r, &shape), tensor(r, &shape)];
                let target = tensor(r, &shape);
                (inputs, Box::new(move |g, v| {
                    let y = g.add(v[0], v[1])?;
                    against(g, y, &target)
                }))
            },
        },
        OpCase {
            name: "scale",
            setup: |r| {
                let shape = shape_of(dim(r, 1, 3), &any_spatial(r, 1, 3));
                let factor = r.random_range(-2.0..2.0);
                let inputs = vec![tensor(r, &shape)];
                let target = tensor(r, &shape);
                (inputs, Box::new(move |g, v| {
                    let y = g.scale(v[0], factor);
                    against(g, y, &target)
                }))
            },
        },
        OpCase {
            name: "concat_channels",
            setup: |r| {
                let ext = any_spatial(r, 1, 3);
                let (ca, cb) = (dim(r, 1, 3), dim(r, 1, 3));
                let inputs = vec![tensor(r, &shape_of(ca, &ext)), tensor(r, &shape_of(cb, &ext))];
                let target = tensor(r, &shape_of(ca + cb, &ext));
                (inputs, Box::new(move |g, v| {
                    let y = g.concat_channels(v[0], v[1])?;
                    against(g, y, &target)
                }))
            },
        },
        OpCase {
            name: "maxpool",
            setup: |r| {
                let window = dim(r, 2, 3);
                let shape = shape_of(dim(r, 1, 2), &any_spatial(r, window, 5));
                let inputs = vec![distinct(r, &shape)];
                let mut g = Graph::new();
                let x = g.constant(inputs[0].clone());
                let y = g.maxpool(x, window).expect("valid pool");
                let target = tensor(r, g.value(y).shape());
                (inputs, Box::new(move |g, v| {
                    let y = g.maxpool(v[0], window)?;
                    against(g, y, &target)
                }))
            },
        },
        OpCase {
            name: "upsample",
            setup: |r| {
                let factor = dim(r, 2, 3);
                let ext = any_spatial(r, 1, 2);
                let up: Vec<usize> = ext.iter().map(|n| n * factor).collect();
                let c = dim(r, 1, 2);
                let inputs = vec![tensor(r, &shape_of(c, &ext))];
                let target = tensor(r, &shape_of(c, &up));
                (inputs, Box::new(move |g, v| {
                    let y = g.upsample(v[0], factor)?;
                    against(g, y, &target)
                }))
            },
        },
        OpCase {
            name: "pad_replicate",
            setup: |r| {
                let ext = any_spatial(r, 1, 3);
                let big: Vec<usize> = ext.iter().map(|&n| n + dim(r, 0, 2)).collect();
                let c = dim(r, 1, 2);
                let inputs = vec![tensor(r, &shape_of(c, &ext))];
                let target = tensor(r, &shape_of(c, &big));
                (inputs, Box::new(move |g, v| {
                    let y = g.pad_replicate(v[0], &big)?;
                    against(g, y, &target)
                }))
            },
        },
        OpCase {
            name: "crop",
            setup: |r| {
                let ext = any_spatial(r, 2, 4);
                let small: Vec<usize> = ext.iter().map(|&n| n - dim(r, 0, 1)).collect();
                let c = dim(r, 1, 2);
                let inputs = vec![tensor(r, &shape_of(c, &ext))];
                let target = tensor(r, &shape_of(c, &small));
                (inputs, Box::new(move |g, v| {
                    let y = g.crop(v[0], &small)?;
                    against(g, y, &target)
                }))
            },
        },
        OpCase {
            name: "reshape",
            setup: |r| {
                let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
                let inputs = vec![tensor(r, &[a, b])];
                let target = tensor(r, &[b, a]);
                (inputs, Box::new(move |g, v| {
                    let y = g.reshape(v[0], &[b, a])?;
                    against(g, y, &target)
                }))
            },
        },
        OpCase {
            name: "mse_loss",
            setup: |r| {
                let shape = shape_of(dim(r, 1, 3), &any_spatial(r, 1, 3));
                let inputs = vec![tensor(r, &shape), tensor(r, &shape)];
                (inputs, Box::new(|g, v| g.mse_loss(v[0], v[1])))
            },
        },
        OpCase {
            name: "neg_pearson_loss",
            setup: |r| {
                let n = dim(r, 3, 24);
                let inputs = vec![tensor(r, &[n]), tensor(r, &[n])];
                (inputs, Box::new(|g, v| Ok(g.neg_pearson_loss(v[0], v[1])?.loss)))
            },
        },
        OpCase {
            name: "frame_dot",
            setup: |r| {
                let t = dim(r, 1, 5);
                let ext = spatial(r, true, 1, 3);
                let inputs = vec![tensor(r, &shape_of(t, &ext)), tensor(r, &shape_of(1, &ext))];
                let target = tensor(r, &[t]);
                (inputs, Box::new(move |g, v| {
                    let y = g.frame_dot(v[0], v[1])?;
                    against(g, y, &target)
                }))
            },
        },
        OpCase {
            name: "standardize",
            setup: |r| {
                let n = dim(r, 2, 24);
                let inputs = vec![tensor(r, &[n])];
                let target = tensor(r, &[n]);
                (inputs, Box::new(move |g, v| {
                    let y = g.standardize(v[0]);
                    against(g, y, &target)
                }))
            },
        },
    ]
}

/// Checks every op on [`INSTANCES`] random instances each.
pub fn check_ops(seed: u64) -> Result<Vec<CaseResult>, TensorError> {
    let mut out = Vec::new();
    for (k, case) in op_cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let mut res = CaseResult {
            name: case.name.to_string(),
            instances: INSTANCES,
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
            tolerance: OP_TOLERANCE,
        };
        for _ in 0..INSTANCES {
            let (inputs, build) = (case.setup)(&mut rng);
            let c = check(&inputs, &all_entries(&inputs), build.as_ref())?;
            res.checked += c.checked;
            res.skipped += c.skipped;
            res.max_rel_err = res.max_rel_err.max(c.rel_err);
        }
        out.push(res);
    }
    Ok(out)
}

/// Checks a loss through a whole network at `SAMPLED_PARAMS` parameter
/// entries drawn uniformly over all parameters, redrawing kinked ones.
fn check_network(
    name: &str,
    params: &[Tensor],
    extra: Vec<Tensor>,
    build: &Build<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<CaseResult, TensorError> {
    let mut inputs = params.to_vec();
    inputs.extend(extra);
    let pool: Vec<(usize, usize)> = all_entries(params);
    let mut res = CaseResult {
        name: name.to_string(),
        instances: 1,
        checked: 0,
        skipped: 0,
        max_rel_err: 0.0,
        tolerance: NETWORK_TOLERANCE,
    };
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let mut attempts = 0;
    while res.checked < SAMPLED_PARAMS && attempts < 10 * SAMPLED_PARAMS {
        attempts += 1;
        let entry = pool[rng.random_range(0..pool.len())];
        let c = check(&inputs, &[entry], build)?;
        if c.checked == 0 {
            res.skipped += 1;
            continue;
        }
        res.checked += 1;
        let a = g.grad(vars[entry.0]).map_or(0.0, |d| d[entry.1]);
        let mut work = inputs.clone();
        let n = central(&mut work, entry, build)?.expect("checked entry is smooth");
        analytic.push(a);
        numeric.push(n);
    }
    let diff = analytic.iter().zip(&numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    let scale = numeric.iter().fold(0.0f64, |m, n| m.max(n.abs()));
    res.max_rel_err = if diff == 0.0 { 0.0 } else { diff / scale.max(f64::MIN_POSITIVE) };
    Ok(res)
}

fn model_err(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => TensorError::Usage(other.to_string()),
    }
}

/// `mse(unet(v), target)` for a small U-Net on a volume whose extent is
/// not a multiple of the pooling factor, so padding and cropping are
/// exercised as well.
pub fn check_unet(seed: u64) -> Result<CaseResult, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = UNetConfig {
        levels: 2,
        base_channels: 3,
        ..UNetConfig::new(3)
    };
    let model = UNetModel::<f64>::new(config, seed).map_err(model_err)?;
    let input = tensor(&mut rng, &[3, 5, 6, 5]);
    let target = tensor(&mut rng, &[1, 5, 6, 5]);
    let n = model.params().len();
    let build = |g: &mut Graph, v: &[Var]| {
        let y = model.forward(g, &v[..n], v[n]).map_err(model_err)?;
        against(g, y, &target)
    };
    check_network("unet", model.params().tensors(), vec![input], &build, &mut rng)
}

/// `neg_pearson(cae(s), target)` on a series whose length is not a multiple
/// of four.
pub fn check_cae(seed: u64) -> Result<CaseResult, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = CaeModel::<f64>::new(CaeConfig { seed });
    let input = tensor(&mut rng, &[23]);
    let target = tensor(&mut rng, &[23]);
    let n = model.params().len();
    let build = |g: &mut Graph, v: &[Var]| {
        let y = model.forward(g, &v[..n], v[n]).map_err(model_err)?;
        let t = g.constant(target.clone());
        Ok(g.neg_pearson_loss(y, t)?.loss)
    };
    check_network("cae", model.params().tensors(), vec![input], &build, &mut rng)
}

/// Runs the whole suite.
pub fn run_suite(seed: u64) -> Result<SuiteReport, TensorError> {
    let mut cases = check_ops(seed)?;
    cases.push(check_unet(seed)?);
    cases.push(check_cae(seed)?);
    Ok(SuiteReport { cases })
}
