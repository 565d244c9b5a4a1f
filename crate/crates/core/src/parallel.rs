//! Order-preserving parallel map bounded by `SKINSEG_NUM_WORKERS`.

use std::thread;

pub const WORKERS_ENV: &str = "SKINSEG_NUM_WORKERS";

/// Worker count: the environment override if it parses as a positive
/// integer, otherwise the available parallelism.
pub fn num_workers() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| thread::available_parallelism().map_or(1, |n| n.get()))
}

/// `items.iter().map(f).collect()`, spread over up to `workers` threads.
/// Output order always matches input order.
pub fn par_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let v: Vec<u64> = (0..103).collect();
        for w in [1, 2, 3, 8, 500] {
            assert_eq!(par_map(&v, w, |x| x * x), v.iter().map(|x| x * x).collect::<Vec<_>>());
        }
        assert!(par_map(&Vec::<u8>::new(), 4, |x| *x).is_empty());
    }
}
