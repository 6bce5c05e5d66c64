//! Execution policy for embarrassingly parallel loops.
//!
//! Results are collected in index order, so output never depends on the
//! worker count. Without the `parallel` feature every policy runs inline.

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl std::str::FromStr for Exec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sequential" | "seq" => Ok(Exec::Sequential),
            "parallel" | "par" => Ok(Exec::Parallel),
            other => Err(format!("unknown execution policy `{other}`")),
        }
    }
}

/// `(0..n).map(f)` under the given policy.
pub fn map_indexed<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Like [`map_indexed`] over fixed-size chunks of `0..n`; chunk boundaries
/// depend only on `chunk`, never on the thread pool.
pub fn map_chunks<T, F>(exec: Exec, n: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
{
    let chunk = chunk.max(1);
    let count = n.div_ceil(chunk);
    map_indexed(exec, count, |i| f(i * chunk..((i + 1) * chunk).min(n)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policies_agree() {
        let f = |i: usize| (i as f64).sqrt().to_bits();
        assert_eq!(map_indexed(Exec::Sequential, 1000, f), map_indexed(Exec::Parallel, 1000, f));
        let c = map_chunks(Exec::Parallel, 10, 4, |r| r.len());
        assert_eq!(c, vec![4, 4, 2]);
        assert!(map_chunks(Exec::Sequential, 0, 4, |r| r.len()).is_empty());
    }
}
