//! Central finite differences, used as the independent oracle for analytic
//! gradients. Only calls the forward function; never touches the graph.

use crate::var::Arr;

/// Gradient of `f` at `x` by central differences, one evaluation pair per
/// element.
pub fn finite_diff(f: &dyn Fn(&Arr) -> f64, x: &Arr, eps: f64) -> Arr {
    let mut g = Arr::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in ndarray::indices(x.raw_dim()) {
        let orig = probe[&idx];
        probe[&idx] = orig + eps;
        let fp = f(&probe);
        probe[&idx] = orig - eps;
        let fm = f(&probe);
        probe[&idx] = orig;
        g[&idx] = (fp - fm) / (2.0 * eps);
    }
    g
}

/// Central difference for a subset of coordinates, for cheap spot checks on
/// large tensors. Returns `(flat_index, derivative)` pairs.
pub fn finite_diff_at(
    f: &dyn Fn(&Arr) -> f64,
    x: &Arr,
    flat_indices: &[usize],
    eps: f64,
) -> Vec<(usize, f64)> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(flat_indices.len());
    for &fi in flat_indices {
        let orig = probe.as_slice_mut().expect("contiguous")[fi];
        probe.as_slice_mut().unwrap()[fi] = orig + eps;
        let fp = f(&probe);
        probe.as_slice_mut().unwrap()[fi] = orig - eps;
        let fm = f(&probe);
        probe.as_slice_mut().unwrap()[fi] = orig;
        out.push((fi, (fp - fm) / (2.0 * eps)));
    }
    out
}

/// Relative error with an absolute floor, the usual gradient-check metric.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1e-8 + a.abs().max(b.abs()))
}
