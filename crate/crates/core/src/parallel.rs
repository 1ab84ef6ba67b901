//! Order-preserving data parallelism over scoped threads.

use crate::error::Result;

pub fn threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get()).min(8)
}

/// Maps `f` over `items` on scoped threads, each with its own state from
/// `init`. Results keep input order.
pub fn par_map<T: Sync, S, R: Send>(
    items: &[T],
    init: impl Fn() -> Result<S> + Sync,
    f: impl Fn(&mut S, usize, &T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let n = threads().min(items.len()).max(1);
    let chunk = items.len().div_ceil(n).max(1);
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                let (init, f) = (&init, &f);
                s.spawn(move || {
                    let mut state = init()?;
                    part.iter()
                        .enumerate()
                        .map(|(i, it)| f(&mut state, c * chunk + i, it))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

