//! Deterministic data-parallel helpers over scoped threads.
//!
//! Work is split by index into contiguous chunks, each chunk's result
//! depends only on its index, and reductions happen on the caller side in
//! index order. Output is therefore bit-identical for any thread count,
//! including 1.

/// Thread cap: `CAUSAL_PROBE_THREADS` if set to a positive integer,
/// otherwise the available hardware parallelism.
pub fn max_threads() -> usize {
    if let Ok(v) = std::env::var("CAUSAL_PROBE_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                return n;
            }
        }
    }
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Map `f` over `0..n`, returning results in index order.
pub fn par_map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync,
{
    let threads = max_threads().min(n);
    if threads <= 1 {
        return (0..n).map(f).collect();
    }
    let mut out: Vec<Option<R>> = (0..n).map(|_| None).collect();
    let group = n.div_ceil(threads);
    std::thread::scope(|s| {
        let f = &f;
        for (ti, slots) in out.chunks_mut(group).enumerate() {
            s.spawn(move || {
                let base = ti * group;
                for (j, slot) in slots.iter_mut().enumerate() {
                    *slot = Some(f(base + j));
                }
            });
        }
    });
    out.into_iter().map(|o| o.expect("all chunks filled")).collect()
}

/// Split `data` into consecutive pieces of `chunk` elements (last may be
/// short) and run `f(piece_index, piece)` over them in parallel. Each piece
/// must be computable from its index alone.
pub fn par_for_chunks<R, F>(data: &mut [R], chunk: usize, f: F)
where
    R: Send,
    F: Fn(usize, &mut [R]) + Sync,
{
    assert!(chunk > 0, "chunk size must be positive");
    let pieces: Vec<&mut [R]> = data.chunks_mut(chunk).collect();
    let n = pieces.len();
    let threads = max_threads().min(n);
    if threads <= 1 {
        for (i, piece) in pieces.into_iter().enumerate() {
            f(i, piece);
        }
        return;
    }
    let group = n.div_ceil(threads);
    std::thread::scope(|s| {
        let f = &f;
        let mut iter = pieces.into_iter();
        let mut base = 0;
        loop {
            let batch: Vec<&mut [R]> = iter.by_ref().take(group).collect();
            if batch.is_empty() {
                break;
            }
            s.spawn(move || {
                for (j, piece) in batch.into_iter().enumerate() {
                    f(base + j, piece);
                }
            });
            base += group;
        }
    });
}
