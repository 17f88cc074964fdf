//! Synthetic 4D data with planted networks.
//!
//! Each network is a set of spherical blobs (its spatial map) driven by a
//! block design convolved with a causal exponential kernel (its time
//! course). The volume is `Σ_g map_g ⊗ course_g` plus white Gaussian noise
//! inside the brain mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{NetworkMap, TimeSeries, Volume4D, VolumeError};
use crate::kv::KvMap;

/// Time constant, in frames, of the smoothing kernel applied to block designs.
pub const COURSE_TAU: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    /// Voxel coordinates `(d, h, w)`.
    pub center: [f64; 3],
    pub radius: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub label: String,
    pub blobs: Vec<Blob>,
    pub onsets: Vec<usize>,
    pub durations: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskShape {
    /// Every voxel is brain.
    Full,
    /// Ellipsoid inscribed in the grid.
    Ellipsoid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub frames: usize,
    pub dims: [usize; 3],
    pub networks: Vec<NetworkSpec>,
    pub noise_sigma: f64,
    pub seed: u64,
    pub repetition_time: f64,
    pub mask: MaskShape,
}

/// Output of [`synthesize`]: the data and the planted truth per network.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub volume: Volume4D,
    pub planted: Vec<(NetworkMap, TimeSeries)>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), VolumeError> {
        if self.frames < 2 {
            return Err(VolumeError::Spec(format!("need at least 2 frames, got {}", self.frames)));
        }
        if self.dims.contains(&0) {
            return Err(VolumeError::Spec(format!("degenerate dims {:?}", self.dims)));
        }
        if self.networks.is_empty() {
            return Err(VolumeError::Spec("at least one network is required".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(VolumeError::Spec(format!("noise sigma {} must be >= 0", self.noise_sigma)));
        }
        for net in &self.networks {
            if net.onsets.len() != net.durations.len() {
                return Err(VolumeError::Spec(format!(
                    "network `{}`: {} onsets but {} durations",
                    net.label,
                    net.onsets.len(),
                    net.durations.len()
                )));
            }
            if let Some(&o) = net.onsets.iter().find(|&&o| o >= self.frames) {
                return Err(VolumeError::Spec(format!(
                    "network `{}`: onset {} beyond {} frames",
                    net.label, o, self.frames
                )));
            }
            for b in &net.blobs {
                for a in 0..3 {
                    let lo = b.center[a] - b.radius;
                    let hi = b.center[a] + b.radius;
                    if b.radius <= 0.0 || lo < -0.5 || hi > self.dims[a] as f64 - 0.5 {
                        return Err(VolumeError::Spec(format!(
                            "network `{}`: blob at {:?} r={} does not fit in {:?}",
                            net.label, b.center, b.radius, self.dims
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn mask(&self) -> Vec<bool> {
        brain_mask(self.dims, self.mask)
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self, VolumeError> {
        let dims: Vec<usize> = kv.parse_list("dims")?;
        if dims.len() != 3 {
            return Err(VolumeError::Spec(format!("dims needs 3 entries, got {}", dims.len())));
        }
        let count: usize = kv.parse_value("networks")?;
        let mut networks = Vec::with_capacity(count);
        for g in 0..count {
            let key = |k: &str| format!("network.{}.{}", g, k);
            let blobs = kv
                .require(&key("blobs"))?
                .split(';')
                .map(|b| {
                    let v: Vec<f64> = b
                        .split_whitespace()
                        .map(|x| x.parse::<f64>())
                        .collect::<Result<_, _>>()
                        .map_err(|_| VolumeError::Spec(format!("bad blob `{}`", b.trim())))?;
                    if v.len() != 5 {
                        return Err(VolumeError::Spec(format!(
                            "blob `{}` needs `d h w radius amplitude`",
                            b.trim()
                        )));
                    }
                    Ok(Blob {
                        center: [v[0], v[1], v[2]],
                        radius: v[3],
                        amplitude: v[4],
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            networks.push(NetworkSpec {
                label: kv.get(&key("label")).unwrap_or("").to_string(),
                blobs,
                onsets: kv.parse_list(&key("onsets"))?,
                durations: kv.parse_list(&key("durations"))?,
            });
        }
        let mask = match kv.get("mask").unwrap_or("full") {
            "full" => MaskShape::Full,
            "ellipsoid" => MaskShape::Ellipsoid,
            other => return Err(VolumeError::Spec(format!("unknown mask `{}`", other))),
        };
        let spec = SyntheticSpec {
            frames: kv.parse_value("frames")?,
            dims: [dims[0], dims[1], dims[2]],
            networks,
            noise_sigma: kv.parse_or("noise_sigma", 0.0)?,
            seed: kv.parse_or("seed", 0)?,
            repetition_time: kv.parse_or("repetition_time", 1.0)?,
            mask,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.insert("frames", self.frames);
        kv.insert("dims", format!("{} {} {}", self.dims[0], self.dims[1], self.dims[2]));
        kv.insert("noise_sigma", self.noise_sigma);
        kv.insert("seed", self.seed);
        kv.insert("repetition_time", self.repetition_time);
        kv.insert(
            "mask",
            match self.mask {
                MaskShape::Full => "full",
                MaskShape::Ellipsoid => "ellipsoid",
            },
        );
        kv.insert("networks", self.networks.len());
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        for (g, n) in self.networks.iter().enumerate() {
            kv.insert(&format!("network.{}.label", g), &n.label);
            let blobs: Vec<String> = n
                .blobs
                .iter()
                .map(|b| {
                    format!(
                        "{} {} {} {} {}",
                        b.center[0], b.center[1], b.center[2], b.radius, b.amplitude
                    )
                })
                .collect();
            kv.insert(&format!("network.{}.blobs", g), blobs.join(" ; "));
            kv.insert(&format!("network.{}.onsets", g), join(&n.onsets));
            kv.insert(&format!("network.{}.durations", g), join(&n.durations));
        }
        kv
    }
}

pub fn brain_mask(dims: [usize; 3], shape: MaskShape) -> Vec<bool> {
    let n: usize = dims.iter().product();
    match shape {
        MaskShape::Full => vec![true; n],
        MaskShape::Ellipsoid => {
            let mut mask = Vec::with_capacity(n);
            for z in 0..dims[0] {
                for y in 0..dims[1] {
                    for x in 0..dims[2] {
                        let p = [z, y, x];
                        let r: f64 = (0..3)
                            .map(|a| {
                                let c = (dims[a] as f64 - 1.0) / 2.0;
                                let s = dims[a] as f64 / 2.0;
                                ((p[a] as f64 - c) / s).powi(2)
                            })
                            .sum();
                        mask.push(r <= 1.0);
                    }
                }
            }
            mask
        }
    }
}

/// Block design smoothed with `exp(-k / τ)`, `k = 0..=5τ`, normalized to unit gain.
pub fn time_course(frames: usize, onsets: &[usize], durations: &[usize]) -> Vec<f64> {
    let mut boxcar = vec![0.0; frames];
    for (&o, &d) in onsets.iter().zip(durations) {
        for v in boxcar.iter_mut().skip(o).take(d) {
            *v = 1.0;
        }
    }
    let taps = (5.0 * COURSE_TAU) as usize;
    let kernel: Vec<f64> = (0..=taps).map(|k| (-(k as f64) / COURSE_TAU).exp()).collect();
    let gain: f64 = kernel.iter().sum();
    (0..frames)
        .map(|t| {
            kernel
                .iter()
                .enumerate()
                .filter(|&(k, _)| k <= t)
                .map(|(k, h)| h * boxcar[t - k])
                .sum::<f64>()
                / gain
        })
        .collect()
}

fn planted_map(dims: [usize; 3], net: &NetworkSpec, mask: &[bool]) -> Vec<f64> {
    let mut values: Vec<f64> = vec![0.0; dims.iter().product()];
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let i = (z * dims[1] + y) * dims[2] + x;
                if !mask[i] {
                    continue;
                }
                let p = [z as f64, y as f64, x as f64];
                for b in &net.blobs {
                    let d2: f64 = (0..3).map(|a| (p[a] - b.center[a]).powi(2)).sum();
                    if d2 <= b.radius * b.radius && b.amplitude.abs() > values[i].abs() {
                        values[i] = b.amplitude;
                    }
                }
            }
        }
    }
    values
}

/// Generates the volume and its planted ground truth; a pure function of `spec`.
pub fn synthesize(spec: &SyntheticSpec) -> Result<Synthetic, VolumeError> {
    spec.validate()?;
    let mask = spec.mask();
    let n: usize = spec.dims.iter().product();
    let mut planted = Vec::with_capacity(spec.networks.len());
    let mut data = vec![0.0; spec.frames * n];
    for net in &spec.networks {
        let map = planted_map(spec.dims, net, &mask);
        let course = time_course(spec.frames, &net.onsets, &net.durations);
        for (t, &c) in course.iter().enumerate() {
            let frame = &mut data[t * n..(t + 1) * n];
            for (x, &m) in frame.iter_mut().zip(&map) {
                *x += m * c;
            }
        }
        planted.push((
            NetworkMap::new(spec.dims, map, net.label.clone())?,
            TimeSeries::new(course)?,
        ));
    }
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.noise_sigma).expect("sigma checked");
        for t in 0..spec.frames {
            for v in 0..n {
                if mask[v] {
                    data[t * n + v] += normal.sample(&mut rng);
                }
            }
        }
    }
    let mut volume = Volume4D::new(spec.frames, spec.dims, data)?;
    volume.repetition_time = spec.repetition_time;
    if spec.mask != MaskShape::Full {
        volume = volume.with_mask(mask)?;
    }
    Ok(Synthetic { volume, planted })
}

/// A population of subjects sharing one target network.
///
/// The target has two blobs at fixed relative positions and a block design
/// shared across subjects; each subject jitters blob centres, radii,
/// amplitudes and onsets. Distractor networks get random positions and
/// random designs per subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub frames: usize,
    pub dims: [usize; 3],
    pub noise_sigma: f64,
    pub distractors: usize,
    pub seed: u64,
}

impl Default for Cohort {
    fn default() -> Self {
        Cohort {
            frames: 64,
            dims: [16, 16, 16],
            noise_sigma: 0.5,
            distractors: 2,
            seed: 2017,
        }
    }
}

pub const TARGET_LABEL: &str = "target";

impl Cohort {
    fn target_radius(&self) -> f64 {
        0.16 * *self.dims.iter().min().unwrap() as f64
    }

    fn target_centers(&self) -> [[f64; 3]; 2] {
        let at = |f: [f64; 3]| {
            [
                f[0] * (self.dims[0] as f64 - 1.0),
                f[1] * (self.dims[1] as f64 - 1.0),
                f[2] * (self.dims[2] as f64 - 1.0),
            ]
        };
        [at([0.5, 0.3, 0.45]), at([0.5, 0.7, 0.55])]
    }

    fn target_design(&self) -> (Vec<usize>, Vec<usize>) {
        let period = (self.frames / 4).max(2);
        let onsets: Vec<usize> = (0..4).map(|i| period / 4 + i * period).filter(|&o| o < self.frames).collect();
        let durations = vec![(period / 2).max(1); onsets.len()];
        (onsets, durations)
    }

    /// The canonical (unjittered) target map with unit amplitude.
    pub fn template(&self) -> NetworkMap {
        let r = self.target_radius();
        let net = NetworkSpec {
            label: "template".into(),
            blobs: self
                .target_centers()
                .iter()
                .map(|&center| Blob {
                    center,
                    radius: r,
                    amplitude: 1.0,
                })
                .collect(),
            onsets: vec![],
            durations: vec![],
        };
        let mask = brain_mask(self.dims, MaskShape::Ellipsoid);
        NetworkMap::new(self.dims, planted_map(self.dims, &net, &mask), "template").expect("valid dims")
    }

    /// Spec of subject `index`; network 0 is the target.
    pub fn subject(&self, index: usize) -> SyntheticSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let r0 = self.target_radius();
        let clamp = |c: f64, r: f64, n: usize| c.max(r - 0.5).min(n as f64 - 0.5 - r);
        let mut blobs = Vec::new();
        for center in self.target_centers() {
            let radius = r0 + rng.random_range(-0.25..=0.25);
            let mut c = [0.0; 3];
            for a in 0..3 {
                let shift = rng.random_range(-1i32..=1) as f64;
                c[a] = clamp(center[a] + shift, radius, self.dims[a]);
            }
            blobs.push(Blob {
                center: c,
                radius,
                amplitude: rng.random_range(0.8..1.2),
            });
        }
        let (onsets, durations) = self.target_design();
        let onsets = onsets
            .iter()
            .map(|&o| (o as i64 + rng.random_range(-1i64..=1)).clamp(0, self.frames as i64 - 1) as usize)
            .collect();
        let mut networks = vec![NetworkSpec {
            label: TARGET_LABEL.into(),
            blobs,
            onsets,
            durations,
        }];

        let mask = brain_mask(self.dims, MaskShape::Ellipsoid);
        let mut taken: Vec<([f64; 3], f64)> = networks[0].blobs.iter().map(|b| (b.center, b.radius)).collect();
        for k in 0..self.distractors {
            let radius = r0 * rng.random_range(0.8..1.2);
            let mut center = [0.0; 3];
            for _attempt in 0..1000 {
                for a in 0..3 {
                    center[a] = rng.random_range(radius - 0.5..self.dims[a] as f64 - 0.5 - radius);
                }
                let idx = |a: usize| center[a].round() as usize;
                let inside = mask[(idx(0) * self.dims[1] + idx(1)) * self.dims[2] + idx(2)];
                let clear = taken.iter().all(|(c, r)| {
                    let d2: f64 = (0..3).map(|a| (c[a] - center[a]).powi(2)).sum();
                    d2.sqrt() > r + radius + 1.5
                });
                if inside && clear {
                    break;
                }
            }
            taken.push((center, radius));
            let (onsets, durations) = random_design(&mut rng, self.frames);
            networks.push(NetworkSpec {
                label: format!("distractor{}", k),
                blobs: vec![Blob {
                    center,
                    radius,
                    amplitude: rng.random_range(0.8..1.2),
                }],
                onsets,
                durations,
            });
        }
        SyntheticSpec {
            frames: self.frames,
            dims: self.dims,
            networks,
            noise_sigma: self.noise_sigma,
            seed: rng.random(),
            repetition_time: 0.72,
            mask: MaskShape::Ellipsoid,
        }
    }
}

fn random_design(rng: &mut ChaCha8Rng, frames: usize) -> (Vec<usize>, Vec<usize>) {
    let blocks = rng.random_range(3..=5usize);
    let mut onsets = Vec::new();
    let mut durations = Vec::new();
    let mut busy = vec![false; frames];
    for _ in 0..blocks * 20 {
        if onsets.len() == blocks {
            break;
        }
        let d = rng.random_range(frames / 16..=frames / 8).max(1);
        let o = rng.random_range(0..frames.saturating_sub(d).max(1));
        let lo = o.saturating_sub(2);
        let hi = (o + d + 2).min(frames);
        if busy[lo..hi].iter().any(|&b| b) {
            continue;
        }
        busy[o..o + d].iter_mut().for_each(|b| *b = true);
        onsets.push(o);
        durations.push(d);
    }
    let mut order: Vec<usize> = (0..onsets.len()).collect();
    order.sort_by_key(|&i| onsets[i]);
    (
        order.iter().map(|&i| onsets[i]).collect(),
        order.iter().map(|&i| durations[i]).collect(),
    )
}
