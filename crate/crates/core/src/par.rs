//! Execution policy for the data-parallel kernels.
//!
//! Every parallel loop in the crate partitions *outputs* into independent
//! chunks and evaluates each chunk with a fixed sequential reduction order,
//! so results are bit-identical for any worker count, including the
//! sequential fallback.

/// How data-parallel loops are dispatched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Rayon work-stealing; behaves like `Sequential` when the `parallel`
    /// feature is disabled.
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

/// Sizes the global worker pool; call before any parallel work. Without
/// the `parallel` feature this is a no-op.
pub fn set_threads(n: usize) -> Result<(), String> {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
        Ok(())
    }
}

impl Exec {
    /// Runs `f(chunk_index, chunk)` over consecutive `chunk`-sized pieces of `data`.
    pub fn for_each_chunk<T, F>(self, data: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        if chunk == 0 || data.is_empty() {
            return;
        }
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                data.par_chunks_mut(chunk)
                    .enumerate()
                    .for_each(|(i, c)| f(i, c));
            }
            _ => data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c)),
        }
    }

    /// Evaluates `f(i)` for `i in 0..n`, collecting in index order.
    pub fn map<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_results_match_across_policies() {
        let run = |exec: Exec| {
            let mut v = vec![0.0f64; 97];
            exec.for_each_chunk(&mut v, 10, |i, c| {
                for (j, x) in c.iter_mut().enumerate() {
                    *x = (i * 10 + j) as f64 * 0.1;
                }
            });
            v
        };
        assert_eq!(run(Exec::Sequential), run(Exec::Parallel));
        assert_eq!(
            Exec::Parallel.map(5, |i| i * i),
            Exec::Sequential.map(5, |i| i * i)
        );
    }
}
