//! Data-parallel helpers.
//!
//! With the `parallel` feature (on by default) work is spread over the rayon
//! pool; without it everything runs on the calling thread. Every helper
//! computes each output element with the same sequential arithmetic in both
//! modes, so results are bit-identical regardless of the execution mode.

/// Execution strategy for a data-parallel loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

/// Below this many scalar operations a loop stays on the calling thread.
const MIN_PARALLEL_WORK: usize = 1 << 15;

impl Exec {
    /// The crate-wide default: parallel when compiled in.
    pub const fn auto() -> Self {
        #[cfg(feature = "parallel")]
        {
            Exec::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            Exec::Sequential
        }
    }

    /// `auto()` unless the job is too small to be worth splitting.
    pub fn for_work(work: usize) -> Self {
        if work < MIN_PARALLEL_WORK {
            Exec::Sequential
        } else {
            Exec::auto()
        }
    }

    pub fn is_parallel(self) -> bool {
        self != Exec::Sequential
    }
}

/// Calls `f(chunk_index, chunk)` for every `chunk_len`-sized chunk of `data`.
pub fn chunks_mut<T, F>(exec: Exec, data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    match exec {
        Exec::Sequential => data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c)),
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c))
        }
    }
}

/// Maps `0..n` through `f`, preserving index order in the result.
pub fn map_range<R, F>(exec: Exec, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match exec {
        Exec::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_range_keeps_order() {
        let v = map_range(Exec::auto(), 100, |i| i * 2);
        assert_eq!(v, (0..100).map(|i| i * 2).collect::<Vec<_>>());
    }

    #[test]
    fn chunks_cover_everything() {
        let mut v = vec![0usize; 103];
        chunks_mut(Exec::auto(), &mut v, 10, |ci, c| {
            for (j, x) in c.iter_mut().enumerate() {
                *x = ci * 10 + j;
            }
        });
        assert_eq!(v, (0..103).collect::<Vec<_>>());
    }
}
