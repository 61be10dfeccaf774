//! Seed derivation and small scoped-thread helpers shared across stages.

/// SplitMix64 finalizer. Used to derive independent stream seeds from a
/// master seed plus structural coordinates (stage tag, prompt index, draw
/// index) without any cross-stream correlation in practice.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derives a child seed from a master seed, a stage tag, and an index.
///
/// The tag keeps seed partitions disjoint (training prompts vs held-out
/// prompts vs trajectory draws) so no two stages ever share a stream.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut h = splitmix64(master ^ 0x5bf0_3635_d1a2_b4c9);
    for &b in tag.as_bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    splitmix64(h ^ index)
}

/// Applies `f` to every index in `0..len`, writing results into a vector in
/// index order. With `threads <= 1` this is a plain sequential loop; with
/// more threads the index range is chunked across scoped threads. Output is
/// bit-identical for any thread count because each task depends only on its
/// index.
pub fn indexed_map<T, F>(len: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    if threads <= 1 || len <= 1 {
        return (0..len).map(f).collect();
    }
    let threads = threads.min(len);
    let mut out: Vec<Option<T>> = Vec::with_capacity(len);
    out.resize_with(len, || None);
    let chunk = len.div_ceil(threads);
    std::thread::scope(|scope| {
        for (t, slot_chunk) in out.chunks_mut(chunk).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (j, slot) in slot_chunk.iter_mut().enumerate() {
                    *slot = Some(f(t * chunk + j));
                }
            });
        }
    });
    out.into_iter().map(|v| v.expect("task completed")).collect()
}
