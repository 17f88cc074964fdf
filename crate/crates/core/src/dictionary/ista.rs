use nalgebra::DMatrix;

use super::DictError;
use crate::par::Exec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodeOptions {
    pub max_iters: usize,
    /// Bound on the per-voxel KKT residual.
    pub kkt_tol: f64,
}

impl Default for CodeOptions {
    fn default() -> Self {
        CodeOptions {
            max_iters: 20_000,
            kkt_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SparseCodes {
    /// `K × V`, one column per voxel.
    pub coefficients: DMatrix<f64>,
    /// Largest KKT residual over voxels.
    pub max_kkt: f64,
    /// Voxels that hit `max_iters` before the tolerance.
    pub unconverged: usize,
}

fn soft(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Largest violation of the lasso optimality conditions, given the
/// correlation `c = Dᵀ(x − D·a)`.
fn kkt(a: &[f64], c: &[f64], lambda: f64) -> f64 {
    a.iter()
        .zip(c)
        .map(|(&ai, &ci)| {
            if ai > 0.0 {
                (ci - lambda).abs()
            } else if ai < 0.0 {
                (ci + lambda).abs()
            } else {
                (ci.abs() - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Solves the optimality system on the support of `a` with its signs held,
/// `G_SS·a_S = b_S − λ·sign(a_S)`. Returns `None` if that flips a sign.
fn polish(g: &DMatrix<f64>, b: &[f64], a: &[f64], lambda: f64) -> Option<Vec<f64>> {
    let support: Vec<usize> = (0..a.len()).filter(|&i| a[i] != 0.0).collect();
    if support.is_empty() {
        return None;
    }
    let gs = DMatrix::from_fn(support.len(), support.len(), |i, j| g[(support[i], support[j])]);
    let rhs = nalgebra::DVector::from_fn(support.len(), |i, _| b[support[i]] - lambda * a[support[i]].signum());
    let sol = gs.cholesky()?.solve(&rhs);
    let mut out = vec![0.0; a.len()];
    for (i, &s) in support.iter().enumerate() {
        if sol[i] == 0.0 || sol[i].signum() != a[s].signum() {
            return None;
        }
        out[s] = sol[i];
    }
    Some(out)
}

/// Solves `min_a ½‖x − D·a‖² + λ‖a‖₁` for every column `x` of `x` by ISTA
/// with step `1/L`, `L` the largest eigenvalue of `DᵀD`.
///
/// Each converged iterate is refined by an exact solve on its support, which
/// is kept only if it does not worsen the KKT residual.
/// Unconverged voxels keep their last iterate, which is also the best one
/// since ISTA is monotone at this step size.
pub fn sparse_code(
    x: &DMatrix<f64>,
    d: &DMatrix<f64>,
    lambda: f64,
    warm: Option<&DMatrix<f64>>,
    opts: &CodeOptions,
    exec: Exec,
) -> Result<SparseCodes, DictError> {
    let (t, k) = d.shape();
    if x.nrows() != t {
        return Err(DictError::Dimension(format!(
            "data has {} frames, atoms have length {}",
            x.nrows(),
            t
        )));
    }
    for j in 0..k {
        if (d.column(j).norm() - 1.0).abs() > 1e-9 {
            return Err(DictError::NotUnitNorm(j));
        }
    }
    if let Some(w) = warm {
        if w.shape() != (k, x.ncols()) {
            return Err(DictError::Dimension(format!(
                "warm start is {:?}, expected {:?}",
                w.shape(),
                (k, x.ncols())
            )));
        }
    }
    let g = d.transpose() * d;
    let l = g.clone().symmetric_eigenvalues().max().max(f64::MIN_POSITIVE);
    let step = 1.0 / l;
    let b = d.transpose() * x;

    let solve = |col: usize| -> (Vec<f64>, f64, bool) {
        let bv = b.column(col);
        let mut a: Vec<f64> = match warm {
            Some(w) => w.column(col).iter().copied().collect(),
            None => vec![0.0; k],
        };
        let mut c = vec![0.0; k];
        let residual = |a: &[f64], c: &mut [f64]| {
            for i in 0..k {
                let mut s = bv[i];
                for (j, &aj) in a.iter().enumerate() {
                    if aj != 0.0 {
                        s -= g[(i, j)] * aj;
                    }
                }
                c[i] = s;
            }
        };
        residual(&a, &mut c);
        let mut viol = kkt(&a, &c, lambda);
        let mut iters = 0;
        while viol > opts.kkt_tol && iters < opts.max_iters {
            for i in 0..k {
                a[i] = soft(a[i] + step * c[i], step * lambda);
            }
            residual(&a, &mut c);
            viol = kkt(&a, &c, lambda);
            iters += 1;
        }
        if let Some(exact) = polish(&g, bv.as_slice(), &a, lambda) {
            residual(&exact, &mut c);
            let v = kkt(&exact, &c, lambda);
            if v <= viol {
                a = exact;
                viol = v;
            }
        }
        (a, viol, viol <= opts.kkt_tol)
    };
    let solved = exec.map(x.ncols(), solve);

    let mut coefficients = DMatrix::zeros(k, x.ncols());
    let mut max_kkt: f64 = 0.0;
    let mut unconverged = 0;
    for (col, (a, viol, ok)) in solved.into_iter().enumerate() {
        coefficients.column_mut(col).copy_from_slice(&a);
        max_kkt = max_kkt.max(viol);
        unconverged += (!ok) as usize;
    }
    Ok(SparseCodes {
        coefficients,
        max_kkt,
        unconverged,
    })
}
