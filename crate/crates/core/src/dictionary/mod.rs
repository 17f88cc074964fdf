//! Sparse dictionary learning over voxel time series.
//!
//! The data matrix `X` holds one unit-norm in-mask voxel series per column.
//! Learning alternates a per-voxel lasso (ISTA) with an exact
//! block-coordinate update of each unit-norm atom, minimising
//!
//! ```text
//! F(D, A) = ½‖X − D·A‖²_F + λ‖A‖₁
//! ```

mod ista;

pub use ista::{sparse_code, CodeOptions, SparseCodes};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::overlap::{jaccard, ThresholdRule};
use crate::par::Exec;
use crate::volume::{NetworkMap, TimeSeries, Volume4D, VolumeError};

#[derive(Debug, Error)]
pub enum DictError {
    #[error("invalid dictionary configuration: {0}")]
    Config(String),
    #[error("objective increased at outer iteration {iteration}: trace {trace:?}")]
    Convergence { iteration: usize, trace: Vec<f64> },
    #[error("atom {0} does not have unit norm")]
    NotUnitNorm(usize),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Allowed relative increase of the objective between outer iterations.
pub const OBJECTIVE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct DictConfig {
    /// Total atom count, fixed atoms included.
    pub atoms: usize,
    pub lambda: f64,
    /// Outer (code, update) iterations.
    pub iters: usize,
    pub seed: u64,
    pub code: CodeOptions,
    pub exec: Exec,
}

impl Default for DictConfig {
    fn default() -> Self {
        DictConfig {
            atoms: 20,
            lambda: 0.15,
            iters: 30,
            seed: 0,
            code: CodeOptions::default(),
            exec: Exec::default(),
        }
    }
}

/// In-mask voxel series as unit-norm columns of a `T × V` matrix.
#[derive(Debug, Clone)]
pub struct VoxelMatrix {
    dims: [usize; 3],
    voxels: Vec<usize>,
    x: DMatrix<f64>,
}

impl VoxelMatrix {
    /// All-zero series stay zero columns.
    pub fn from_volume(vol: &Volume4D) -> Self {
        let voxels = vol.mask_indices();
        let t = vol.frames();
        let mut x = DMatrix::zeros(t, voxels.len());
        for (j, &v) in voxels.iter().enumerate() {
            let mut col = DVector::from_vec(vol.voxel_series(v));
            let n = col.norm();
            if n > 0.0 {
                col /= n;
            }
            x.set_column(j, &col);
        }
        VoxelMatrix {
            dims: vol.dims(),
            voxels,
            x,
        }
    }

    pub fn frames(&self) -> usize {
        self.x.nrows()
    }

    pub fn columns(&self) -> usize {
        self.x.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// Scatters row `k` of `a` (`K × V`) back onto the frame grid.
    fn map_of(&self, a: &DMatrix<f64>, k: usize, label: String) -> NetworkMap {
        let mut map = NetworkMap::zeros(self.dims, label);
        let values = map.values_mut();
        for (j, &v) in self.voxels.iter().enumerate() {
            values[v] = a[(k, j)];
        }
        map
    }
}

#[derive(Debug, Clone)]
pub struct DictionaryModel {
    atoms: Vec<TimeSeries>,
    maps: Vec<NetworkMap>,
    lambda: f64,
    fixed: usize,
    support: usize,
    objective_trace: Vec<f64>,
    unconverged_voxels: usize,
}

impl DictionaryModel {
    pub fn k(&self) -> usize {
        self.atoms.len()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Number of leading atoms that were held fixed.
    pub fn fixed(&self) -> usize {
        self.fixed
    }

    pub fn atoms(&self) -> &[TimeSeries] {
        &self.atoms
    }

    pub fn maps(&self) -> &[NetworkMap] {
        &self.maps
    }

    /// `F` after initial coding and after each outer iteration.
    pub fn objective_trace(&self) -> &[f64] {
        &self.objective_trace
    }

    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("at least one entry")
    }

    /// Voxels whose final lasso did not reach the KKT tolerance.
    pub fn unconverged_voxels(&self) -> usize {
        self.unconverged_voxels
    }

    /// Fraction of in-mask voxels with a nonzero coefficient for atom `k`.
    pub fn nonzero_fraction(&self, k: usize) -> f64 {
        let nz = self.maps[k].values().iter().filter(|&&v| v != 0.0).count();
        nz as f64 / self.support.max(1) as f64
    }
}

fn objective(x: &DMatrix<f64>, d: &DMatrix<f64>, a: &DMatrix<f64>, lambda: f64) -> f64 {
    let r = x - d * a;
    0.5 * r.norm_squared() + lambda * a.iter().map(|v| v.abs()).sum::<f64>()
}

/// Unsupervised dictionary learning of `cfg.atoms` atoms.
pub fn dict_learn(data: &Volume4D, cfg: &DictConfig) -> Result<DictionaryModel, DictError> {
    supervised_dict_learn(data, &[], cfg)
}

/// Dictionary learning with leading atoms held at `fixed`, centred and
/// unit-normalised here to match z-scored data. The remaining `cfg.atoms − fixed.len()` atoms are learned.
pub fn supervised_dict_learn(
    data: &Volume4D,
    fixed: &[TimeSeries],
    cfg: &DictConfig,
) -> Result<DictionaryModel, DictError> {
    let vm = VoxelMatrix::from_volume(data);
    let (t, v) = (vm.frames(), vm.columns());
    let k = cfg.atoms;
    if k == 0 || k < fixed.len() {
        return Err(DictError::Config(format!(
            "{} atoms cannot hold {} fixed atoms",
            k,
            fixed.len()
        )));
    }
    if k >= v {
        return Err(DictError::Config(format!(
            "K = {} must be below the {} in-mask voxels",
            k, v
        )));
    }
    if !(cfg.lambda >= 0.0 && cfg.lambda.is_finite()) {
        return Err(DictError::Config(format!("lambda = {}", cfg.lambda)));
    }
    let mut d = DMatrix::zeros(t, k);
    for (i, f) in fixed.iter().enumerate() {
        if f.len() != t {
            return Err(DictError::Dimension(format!(
                "fixed atom {} has length {}, data has {} frames",
                i,
                f.len(),
                t
            )));
        }
        let mut col = DVector::from_column_slice(f.values());
        col.add_scalar_mut(-col.mean());
        let n = col.norm();
        if n == 0.0 {
            return Err(DictError::Config(format!("fixed atom {} is constant", i)));
        }
        d.set_column(i, &(col / n));
    }
    init_atoms(&vm.x, &mut d, fixed.len(), cfg.seed);

    let x = &vm.x;
    let mut codes = sparse_code(x, &d, cfg.lambda, None, &cfg.code, cfg.exec)?;
    let mut trace = vec![objective(x, &d, &codes.coefficients, cfg.lambda)];
    for it in 0..cfg.iters {
        update_atoms(x, &mut d, &codes.coefficients, fixed.len());
        codes = sparse_code(x, &d, cfg.lambda, Some(&codes.coefficients), &cfg.code, cfg.exec)?;
        let obj = objective(x, &d, &codes.coefficients, cfg.lambda);
        let prev = *trace.last().unwrap();
        trace.push(obj);
        if obj > prev + OBJECTIVE_SLACK * prev.abs().max(1.0) {
            return Err(DictError::Convergence {
                iteration: it + 1,
                trace,
            });
        }
    }

    let mut a = codes.coefficients;
    for j in fixed.len()..k {
        if a.row(j).sum() < 0.0 {
            d.column_mut(j).neg_mut();
            a.row_mut(j).neg_mut();
        }
    }
    let atoms = (0..k)
        .map(|j| TimeSeries::new(d.column(j).iter().copied().collect()))
        .collect::<Result<Vec<_>, _>>()?;
    let maps = (0..k).map(|j| vm.map_of(&a, j, format!("atom{}", j))).collect();
    Ok(DictionaryModel {
        atoms,
        maps,
        lambda: cfg.lambda,
        fixed: fixed.len(),
        support: v,
        objective_trace: trace,
        unconverged_voxels: codes.unconverged,
    })
}

/// Seeds learnable atoms with distinct data columns (|corr| < 0.99 to every
/// atom so far), topping up with Gaussian directions.
fn init_atoms(x: &DMatrix<f64>, d: &mut DMatrix<f64>, fixed: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..x.ncols()).collect();
    order.shuffle(&mut rng);
    let mut filled = fixed;
    for &c in &order {
        if filled == d.ncols() {
            return;
        }
        let col = x.column(c);
        if col.norm() == 0.0 {
            continue;
        }
        if (0..filled).all(|j| d.column(j).dot(&col).abs() < 0.99) {
            d.set_column(filled, &col);
            filled += 1;
        }
    }
    while filled < d.ncols() {
        let g = DVector::from_fn(d.nrows(), |_, _| StandardNormal.sample(&mut rng));
        d.set_column(filled, &g.normalize());
        filled += 1;
    }
}

/// One pass of exact per-atom minimisation under the unit-norm constraint.
/// Atoms without any coefficient are re-seeded from the worst-fit residual,
/// which leaves the objective unchanged.
fn update_atoms(x: &DMatrix<f64>, d: &mut DMatrix<f64>, a: &DMatrix<f64>, fixed: usize) {
    let xat = x * a.transpose();
    let aat = a * a.transpose();
    let mut dead = Vec::new();
    for k in fixed..d.ncols() {
        if aat[(k, k)] == 0.0 {
            dead.push(k);
            continue;
        }
        let mut u = xat.column(k).into_owned();
        for j in 0..d.ncols() {
            if j != k && aat[(j, k)] != 0.0 {
                u -= d.column(j) * aat[(j, k)];
            }
        }
        let n = u.norm();
        if n > 0.0 {
            d.set_column(k, &(u / n));
        }
    }
    if dead.is_empty() {
        return;
    }

    let residual = x - &*d * a;
    let mut worst: Vec<(f64, usize)> = residual
        .column_iter()
        .enumerate()
        .map(|(c, r)| (r.norm_squared(), c))
        .collect();
    worst.sort_by(|p, q| q.0.total_cmp(&p.0).then(p.1.cmp(&q.1)));
    // orthonormal basis of the live atoms
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for j in 0..d.ncols() {
        if dead.contains(&j) {
            continue;
        }
        let mut b = d.column(j).into_owned();
        for q in &basis {
            b -= q * q.dot(&b);
        }
        let n = b.norm();
        if n > 1e-10 {
            basis.push(b / n);
        }
    }
    let mut candidates = worst.into_iter();
    for k in dead {
        for (_, c) in candidates.by_ref() {
            let mut r = residual.column(c).into_owned();
            for q in &basis {
                r -= q * q.dot(&r);
            }
            let n = r.norm();
            if n > 1e-6 {
                let atom = r / n;
                d.set_column(k, &atom);
                basis.push(atom);
                break;
            }
        }
    }
}

/// Outcome of matching coefficient maps against a template.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateMatch {
    pub best_index: usize,
    pub jaccard: f64,
    pub all_scores: Vec<f64>,
}

impl TemplateMatch {
    /// Every score is zero; `best_index` is then 0 by the tie-break.
    pub fn no_match(&self) -> bool {
        self.all_scores.iter().all(|&s| s == 0.0)
    }
}

/// Jaccard of each binarised coefficient map with the template; the
/// highest score wins, lowest index on ties.
pub fn select_target(
    model: &DictionaryModel,
    template: &NetworkMap,
    rule: ThresholdRule,
) -> Result<TemplateMatch, DictError> {
    let scores = model
        .maps()
        .iter()
        .map(|m| jaccard(m, template, rule).map(|o| o.score))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(argmax_match(scores))
}

pub(crate) fn argmax_match(all_scores: Vec<f64>) -> TemplateMatch {
    let mut best = 0;
    for (i, &s) in all_scores.iter().enumerate() {
        if s > all_scores[best] {
            best = i;
        }
    }
    TemplateMatch {
        best_index: best,
        jaccard: all_scores.get(best).copied().unwrap_or(0.0),
        all_scores,
    }
}
