//! Data-parallel facade. With the `parallel` feature (default) the mapping
//! helpers fan out over rayon; without it, or when the runtime thread count
//! is set to 1, they run sequentially. Results are always collected in input
//! order and reduced sequentially by callers, so parallel and sequential
//! execution produce bit-identical numbers.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL_ENABLED: AtomicBool = AtomicBool::new(true);

/// Runtime switch; `set_parallel(false)` forces sequential execution even
/// when the `parallel` feature is compiled in. Benchmarks toggle this to
/// compare both paths in one binary.
pub fn set_parallel(enabled: bool) {
    PARALLEL_ENABLED.store(enabled, Ordering::SeqCst);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL_ENABLED.load(Ordering::SeqCst)
}

/// Configure the global worker count. A count of 1 disables fan-out.
pub fn set_threads(n: usize) {
    if n <= 1 {
        set_parallel(false);
        return;
    }
    set_parallel(true);
    #[cfg(feature = "parallel")]
    {
        // The global pool can only be sized once per process; later calls
        // just keep the existing pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Ordered map over an index range.
pub fn map_indexed<U: Send>(n: usize, f: impl Fn(usize) -> U + Sync + Send) -> Vec<U> {
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Ordered map over a slice.
pub fn map_slice<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

/// Mean of `n` per-sample scalar losses and their merged parameter
/// gradients. Samples are processed in fixed chunks whose boundaries do not
/// depend on the worker count, and chunk results merge in index order, so
/// the result is bit-identical whether fanned out or sequential.
pub fn batch_grads(
    n: usize,
    per_sample: impl Fn(usize) -> crate::error::Result<avex_nn::Var> + Sync,
) -> crate::error::Result<(f64, avex_nn::Gradients)> {
    const CHUNK: usize = 8;
    let n_chunks = n.div_ceil(CHUNK);
    let chunk_results: Vec<crate::error::Result<(f64, avex_nn::Gradients)>> =
        map_indexed(n_chunks, |ci| {
            let lo = ci * CHUNK;
            let hi = ((ci + 1) * CHUNK).min(n);
            let mut acc = avex_nn::Gradients::default();
            let mut loss_acc = 0.0;
            for i in lo..hi {
                let loss = per_sample(i)?.mul_scalar(1.0 / n as f64);
                loss_acc += loss.value();
                acc.merge(avex_nn::backward(&loss));
            }
            Ok((loss_acc, acc))
        });
    let mut total = avex_nn::Gradients::default();
    let mut loss_total = 0.0;
    for r in chunk_results {
        let (l, g) = r?;
        loss_total += l;
        total.merge(g);
    }
    Ok((loss_total, total))
}
