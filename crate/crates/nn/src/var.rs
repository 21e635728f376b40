//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Var`] is a node in a dynamically built computation graph. Nodes are
//! immutable once created and reference-counted with `Arc`, so graphs built
//! on worker threads (e.g. parallel rollouts) are `Send + Sync`. Gradients
//! are not stored in the nodes; [`backward`] walks the graph once and returns
//! them in a [`Gradients`] table keyed by node identity and by [`ParamId`].

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};

use crate::param::ParamId;

/// Dynamic-rank f64 tensor, the only element type this crate supports.
pub type Arr = ArrayD<f64>;

type GradFn = Box<dyn Fn(&Arr, &Node) -> Vec<Arr> + Send + Sync>;

pub struct Node {
    data: Arc<Arr>,
    parents: Vec<Var>,
    grad_fn: Option<GradFn>,
    param: Option<ParamId>,
}

/// Handle to a computation-graph node holding an f64 tensor.
#[derive(Clone)]
pub struct Var(Arc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("param", &self.0.param)
            .finish()
    }
}

fn unary(parent: &Var, data: Arr, grad_fn: GradFn) -> Var {
    Var(Arc::new(Node {
        data: Arc::new(data),
        parents: vec![parent.clone()],
        grad_fn: Some(grad_fn),
        param: None,
    }))
}

fn binary(a: &Var, b: &Var, data: Arr, grad_fn: GradFn) -> Var {
    Var(Arc::new(Node {
        data: Arc::new(data),
        parents: vec![a.clone(), b.clone()],
        grad_fn: Some(grad_fn),
        param: None,
    }))
}

impl Node {
    fn parent_data(&self, i: usize) -> &Arr {
        &self.parents[i].0.data
    }
    fn out(&self) -> &Arr {
        &self.data
    }
}

pub(crate) fn as2(a: &Arr) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("expected rank-2 tensor")
}

fn as1(a: &Arr) -> ndarray::ArrayView1<'_, f64> {
    a.view().into_dimensionality::<Ix1>().expect("expected rank-1 tensor")
}

impl Var {
    /// Leaf node with no gradient tracking.
    pub fn constant(data: Arr) -> Var {
        Var(Arc::new(Node {
            data: Arc::new(data),
            parents: Vec::new(),
            grad_fn: None,
            param: None,
        }))
    }

    /// Leaf node sharing `data` (no copy), tagged with a parameter id so
    /// [`backward`] accumulates its gradient under that id.
    pub fn param_leaf(data: Arc<Arr>, id: ParamId) -> Var {
        Var(Arc::new(Node {
            data,
            parents: Vec::new(),
            grad_fn: None,
            param: Some(id),
        }))
    }

    pub fn scalar(v: f64) -> Var {
        Var::constant(Arr::from_elem(IxDyn(&[1]), v))
    }

    pub fn from_vec(v: Vec<f64>, shape: &[usize]) -> Var {
        Var::constant(Arr::from_shape_vec(IxDyn(shape), v).expect("shape mismatch"))
    }

    pub fn data(&self) -> &Arr {
        &self.0.data
    }

    pub fn data_arc(&self) -> Arc<Arr> {
        self.0.data.clone()
    }

    pub fn shape(&self) -> &[usize] {
        self.0.data.shape()
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    /// The unique value of a single-element tensor.
    pub fn value(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "value() requires a single-element tensor");
        *self.0.data.iter().next().expect("empty tensor")
    }

    fn ptr_id(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    /// Cut the graph: same data, no parents, no parameter id.
    pub fn detach(&self) -> Var {
        Var(Arc::new(Node {
            data: self.0.data.clone(),
            parents: Vec::new(),
            grad_fn: None,
            param: None,
        }))
    }

    // ---- elementwise binary ----

    pub fn add(&self, rhs: &Var) -> Var {
        assert_eq!(self.shape(), rhs.shape(), "add: shape mismatch");
        let data = &*self.0.data + &*rhs.0.data;
        binary(self, rhs, data, Box::new(|g, _| vec![g.clone(), g.clone()]))
    }

    pub fn sub(&self, rhs: &Var) -> Var {
        assert_eq!(self.shape(), rhs.shape(), "sub: shape mismatch");
        let data = &*self.0.data - &*rhs.0.data;
        binary(self, rhs, data, Box::new(|g, _| vec![g.clone(), g.mapv(|v| -v)]))
    }

    pub fn mul(&self, rhs: &Var) -> Var {
        assert_eq!(self.shape(), rhs.shape(), "mul: shape mismatch");
        let data = &*self.0.data * &*rhs.0.data;
        binary(
            self,
            rhs,
            data,
            Box::new(|g, n| vec![g * n.parent_data(1), g * n.parent_data(0)]),
        )
    }

    /// `[n, d] + [d]` row-broadcast add.
    pub fn add_bias(&self, bias: &Var) -> Var {
        let x = as2(&self.0.data);
        let b = as1(&bias.0.data);
        assert_eq!(x.ncols(), b.len(), "add_bias: width mismatch");
        let data = (&x + &b).into_dyn();
        binary(
            self,
            bias,
            data,
            Box::new(|g, _| {
                let g2 = as2(g);
                vec![g.clone(), g2.sum_axis(Axis(0)).into_dyn()]
            }),
        )
    }

    // ---- scalar ops ----

    pub fn add_scalar(&self, c: f64) -> Var {
        unary(self, self.0.data.mapv(|v| v + c), Box::new(|g, _| vec![g.clone()]))
    }

    pub fn mul_scalar(&self, c: f64) -> Var {
        unary(self, self.0.data.mapv(|v| v * c), Box::new(move |g, _| vec![g.mapv(|v| v * c)]))
    }

    pub fn neg(&self) -> Var {
        self.mul_scalar(-1.0)
    }

    // ---- matrix products ----

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&self, rhs: &Var) -> Var {
        let a = as2(&self.0.data);
        let b = as2(&rhs.0.data);
        assert_eq!(a.ncols(), b.nrows(), "matmul: inner dim mismatch");
        let data = a.dot(&b).into_dyn();
        binary(
            self,
            rhs,
            data,
            Box::new(|g, n| {
                let g2 = as2(g);
                let a = as2(n.parent_data(0));
                let b = as2(n.parent_data(1));
                vec![g2.dot(&b.t()).into_dyn(), a.t().dot(&g2).into_dyn()]
            }),
        )
    }

    /// `[m, k] x [n, k]^T -> [m, n]`
    pub fn matmul_nt(&self, rhs: &Var) -> Var {
        let a = as2(&self.0.data);
        let b = as2(&rhs.0.data);
        assert_eq!(a.ncols(), b.ncols(), "matmul_nt: inner dim mismatch");
        let data = a.dot(&b.t()).into_dyn();
        binary(
            self,
            rhs,
            data,
            Box::new(|g, n| {
                let g2 = as2(g);
                let a = as2(n.parent_data(0));
                let b = as2(n.parent_data(1));
                vec![g2.dot(&b).into_dyn(), g2.t().dot(&a).into_dyn()]
            }),
        )
    }

    // ---- elementwise unary ----

    pub fn square(&self) -> Var {
        unary(
            self,
            self.0.data.mapv(|v| v * v),
            Box::new(|g, n| vec![g * &n.parent_data(0).mapv(|v| 2.0 * v)]),
        )
    }

    pub fn sqrt(&self) -> Var {
        unary(
            self,
            self.0.data.mapv(f64::sqrt),
            Box::new(|g, n| vec![g * &n.out().mapv(|y| 0.5 / y)]),
        )
    }

    pub fn exp(&self) -> Var {
        unary(self, self.0.data.mapv(f64::exp), Box::new(|g, n| vec![g * n.out()]))
    }

    pub fn ln(&self) -> Var {
        unary(
            self,
            self.0.data.mapv(f64::ln),
            Box::new(|g, n| vec![g * &n.parent_data(0).mapv(|v| 1.0 / v)]),
        )
    }

    pub fn sigmoid(&self) -> Var {
        unary(
            self,
            self.0.data.mapv(sigmoid_f),
            Box::new(|g, n| vec![g * &n.out().mapv(|y| y * (1.0 - y))]),
        )
    }

    pub fn tanh(&self) -> Var {
        unary(
            self,
            self.0.data.mapv(f64::tanh),
            Box::new(|g, n| vec![g * &n.out().mapv(|y| 1.0 - y * y)]),
        )
    }

    pub fn relu(&self) -> Var {
        unary(
            self,
            self.0.data.mapv(|v| v.max(0.0)),
            Box::new(|g, n| vec![g * &n.parent_data(0).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 })]),
        )
    }

    /// Exact GELU, `x * Phi(x)` with the Gaussian CDF.
    pub fn gelu(&self) -> Var {
        unary(
            self,
            self.0.data.mapv(gelu_f),
            Box::new(|g, n| {
                vec![g * &n.parent_data(0).mapv(|x| {
                    let phi = norm_cdf(x);
                    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                    phi + x * pdf
                })]
            }),
        )
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&self) -> Var {
        unary(
            self,
            self.0.data.mapv(softplus_f),
            Box::new(|g, n| vec![g * &n.parent_data(0).mapv(sigmoid_f)]),
        )
    }

    /// Hard clamp; gradient passes through only strictly inside the bounds.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        unary(
            self,
            self.0.data.mapv(|v| v.clamp(lo, hi)),
            Box::new(move |g, n| {
                vec![g * &n.parent_data(0).mapv(|v| if v > lo && v < hi { 1.0 } else { 0.0 })]
            }),
        )
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn min2(&self, rhs: &Var) -> Var {
        assert_eq!(self.shape(), rhs.shape(), "min2: shape mismatch");
        let a = &*self.0.data;
        let b = &*rhs.0.data;
        let mut data = a.clone();
        data.zip_mut_with(b, |x, &y| *x = x.min(y));
        binary(
            self,
            rhs,
            data,
            Box::new(|g, n| {
                let a = n.parent_data(0);
                let b = n.parent_data(1);
                let mut ga = g.clone();
                let mut gb = g.clone();
                ndarray::Zip::from(&mut ga).and(a).and(b).for_each(|gv, &x, &y| {
                    if x > y {
                        *gv = 0.0;
                    }
                });
                ndarray::Zip::from(&mut gb).and(a).and(b).for_each(|gv, &x, &y| {
                    if x <= y {
                        *gv = 0.0;
                    }
                });
                vec![ga, gb]
            }),
        )
    }

    // ---- reductions ----

    pub fn sum(&self) -> Var {
        let s = self.0.data.sum();
        unary(
            self,
            Arr::from_elem(IxDyn(&[1]), s),
            Box::new(|g, n| {
                let gv = g[[0]];
                vec![Arr::from_elem(n.parent_data(0).raw_dim(), gv)]
            }),
        )
    }

    pub fn mean(&self) -> Var {
        let len = self.len() as f64;
        self.sum().mul_scalar(1.0 / len)
    }

    // ---- row softmax family (rank-2 inputs) ----

    /// Row-wise softmax of a `[n, d]` tensor.
    pub fn softmax_rows(&self) -> Var {
        let x = as2(&self.0.data);
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        unary(
            self,
            out.into_dyn(),
            Box::new(|g, n| {
                let y = as2(n.out());
                let g2 = as2(g);
                let mut gx = y.to_owned();
                for i in 0..y.nrows() {
                    let dot: f64 = y.row(i).iter().zip(g2.row(i)).map(|(a, b)| a * b).sum();
                    for j in 0..y.ncols() {
                        gx[[i, j]] = y[[i, j]] * (g2[[i, j]] - dot);
                    }
                }
                vec![gx.into_dyn()]
            }),
        )
    }

    /// Row-wise log-softmax of a `[n, d]` tensor.
    pub fn log_softmax_rows(&self) -> Var {
        let x = as2(&self.0.data);
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
            row.mapv_inplace(|v| v - lse);
        }
        unary(
            self,
            out.into_dyn(),
            Box::new(|g, n| {
                let y = as2(n.out());
                let g2 = as2(g);
                let mut gx = y.to_owned();
                for i in 0..y.nrows() {
                    let gsum: f64 = g2.row(i).sum();
                    for j in 0..y.ncols() {
                        gx[[i, j]] = g2[[i, j]] - y[[i, j]].exp() * gsum;
                    }
                }
                vec![gx.into_dyn()]
            }),
        )
    }

    // ---- layout ops ----

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let shape = shape.to_vec();
        let n: usize = shape.iter().product();
        assert_eq!(n, self.len(), "reshape: element count mismatch");
        let data = self
            .0
            .data
            .view()
            .to_shape(IxDyn(&shape))
            .expect("reshape failed")
            .to_owned();
        unary(
            self,
            data,
            Box::new(|g, n| {
                let src = n.parent_data(0).raw_dim();
                vec![g.view().to_shape(src).expect("reshape back").to_owned()]
            }),
        )
    }

    /// Column slice `[n, d] -> [n, hi - lo]`.
    pub fn slice_cols(&self, lo: usize, hi: usize) -> Var {
        let x = as2(&self.0.data);
        assert!(lo < hi && hi <= x.ncols(), "slice_cols: bad range");
        let data = x.slice(ndarray::s![.., lo..hi]).to_owned().into_dyn();
        unary(
            self,
            data,
            Box::new(move |g, n| {
                let g2 = as2(g);
                let src = as2(n.parent_data(0));
                let mut gx = ndarray::Array2::<f64>::zeros((src.nrows(), src.ncols()));
                gx.slice_mut(ndarray::s![.., lo..hi]).assign(&g2);
                vec![gx.into_dyn()]
            }),
        )
    }

    /// Row slice `[n, d] -> [hi - lo, d]`.
    pub fn slice_rows(&self, lo: usize, hi: usize) -> Var {
        let x = as2(&self.0.data);
        assert!(lo < hi && hi <= x.nrows(), "slice_rows: bad range");
        let data = x.slice(ndarray::s![lo..hi, ..]).to_owned().into_dyn();
        unary(
            self,
            data,
            Box::new(move |g, n| {
                let g2 = as2(g);
                let src = as2(n.parent_data(0));
                let mut gx = ndarray::Array2::<f64>::zeros((src.nrows(), src.ncols()));
                gx.slice_mut(ndarray::s![lo..hi, ..]).assign(&g2);
                vec![gx.into_dyn()]
            }),
        )
    }

    /// One element per row at the given column index: `[n, d] -> [n]`.
    pub fn pick_per_row(&self, idx: &[usize]) -> Var {
        let x = as2(&self.0.data);
        assert_eq!(idx.len(), x.nrows(), "pick_per_row: index count mismatch");
        let idx = idx.to_vec();
        let data = Arr::from_shape_vec(
            IxDyn(&[x.nrows()]),
            idx.iter().enumerate().map(|(i, &j)| x[[i, j]]).collect(),
        )
        .expect("pick shape");
        unary(
            self,
            data,
            Box::new(move |g, n| {
                let src = as2(n.parent_data(0));
                let g1 = as1(g);
                let mut gx = ndarray::Array2::<f64>::zeros((src.nrows(), src.ncols()));
                for (i, &j) in idx.iter().enumerate() {
                    gx[[i, j]] = g1[i];
                }
                vec![gx.into_dyn()]
            }),
        )
    }
}

/// Concatenate rank-2 tensors along columns.
pub fn concat_cols(parts: &[Var]) -> Var {
    assert!(!parts.is_empty());
    let views: Vec<_> = parts.iter().map(|p| as2(p.data())).collect();
    let data = ndarray::concatenate(Axis(1), &views).expect("concat_cols").into_dyn();
    let widths: Vec<usize> = parts.iter().map(|p| as2(p.data()).ncols()).collect();
    Var(Arc::new(Node {
        data: Arc::new(data),
        parents: parts.to_vec(),
        grad_fn: Some(Box::new(move |g, _| {
            let g2 = as2(g);
            let mut out = Vec::with_capacity(widths.len());
            let mut off = 0;
            for &w in &widths {
                out.push(g2.slice(ndarray::s![.., off..off + w]).to_owned().into_dyn());
                off += w;
            }
            out
        })),
        param: None,
    }))
}

/// Concatenate rank-2 tensors along rows.
pub fn concat_rows(parts: &[Var]) -> Var {
    assert!(!parts.is_empty());
    let views: Vec<_> = parts.iter().map(|p| as2(p.data())).collect();
    let data = ndarray::concatenate(Axis(0), &views).expect("concat_rows").into_dyn();
    let heights: Vec<usize> = parts.iter().map(|p| as2(p.data()).nrows()).collect();
    Var(Arc::new(Node {
        data: Arc::new(data),
        parents: parts.to_vec(),
        grad_fn: Some(Box::new(move |g, _| {
            let g2 = as2(g);
            let mut out = Vec::with_capacity(heights.len());
            let mut off = 0;
            for &h in &heights {
                out.push(g2.slice(ndarray::s![off..off + h, ..]).to_owned().into_dyn());
                off += h;
            }
            out
        })),
        param: None,
    }))
}

/// Mean of single-element tensors; the usual way losses are batched here.
pub fn mean_of(parts: &[Var]) -> Var {
    assert!(!parts.is_empty());
    let mut acc = parts[0].clone();
    for p in &parts[1..] {
        acc = acc.add(p);
    }
    acc.mul_scalar(1.0 / parts.len() as f64)
}

/// Per-row layer normalisation of `[n, d]` with learnable gain and bias `[d]`.
pub fn layer_norm(x: &Var, gain: &Var, bias: &Var, eps: f64) -> Var {
    let xd = as2(x.data());
    let g1 = as1(gain.data());
    let b1 = as1(bias.data());
    let d = xd.ncols();
    assert_eq!(g1.len(), d);
    assert_eq!(b1.len(), d);
    let mut out = xd.to_owned();
    for mut row in out.rows_mut() {
        let mu = row.mean().unwrap();
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mu) * inv);
    }
    for (j, mut col) in out.columns_mut().into_iter().enumerate() {
        col.mapv_inplace(|v| v * g1[j] + b1[j]);
    }
    Var(Arc::new(Node {
        data: Arc::new(out.into_dyn()),
        parents: vec![x.clone(), gain.clone(), bias.clone()],
        grad_fn: Some(Box::new(move |g, n| {
            let x = as2(n.parent_data(0));
            let gain = as1(n.parent_data(1));
            let g2 = as2(g);
            let (rows, d) = (x.nrows(), x.ncols());
            let df = d as f64;
            let mut gx = ndarray::Array2::<f64>::zeros((rows, d));
            let mut ggain = ndarray::Array1::<f64>::zeros(d);
            let mut gbias = ndarray::Array1::<f64>::zeros(d);
            for i in 0..rows {
                let row = x.row(i);
                let mu = row.mean().unwrap();
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / df;
                let inv = 1.0 / (var + eps).sqrt();
                // xhat and upstream-through-gain
                let mut dxhat = vec![0.0; d];
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for j in 0..d {
                    let xhat = (row[j] - mu) * inv;
                    let go = g2[[i, j]];
                    ggain[j] += go * xhat;
                    gbias[j] += go;
                    let dxh = go * gain[j];
                    dxhat[j] = dxh;
                    sum_dxhat += dxh;
                    sum_dxhat_xhat += dxh * xhat;
                }
                for j in 0..d {
                    let xhat = (row[j] - mu) * inv;
                    gx[[i, j]] = inv / df * (df * dxhat[j] - sum_dxhat - xhat * sum_dxhat_xhat);
                }
            }
            vec![gx.into_dyn(), ggain.into_dyn(), gbias.into_dyn()]
        })),
        param: None,
    }))
}

/// Unfold a `[h, w, c]` image into `[oh * ow, k * k * c]` patches for
/// convolution by matrix product. Zero padding outside the image.
pub fn im2col(x: &Var, k: usize, stride: usize, pad: usize) -> (Var, usize, usize) {
    let xv = x.data().view().into_dimensionality::<Ix3>().expect("im2col wants [h,w,c]");
    let (h, w, c) = xv.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = ndarray::Array2::<f64>::zeros((oh * ow, k * k * c));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            let mut col = 0;
            for ky in 0..k {
                for kx in 0..k {
                    let sy = (oy * stride + ky) as isize - pad as isize;
                    let sx = (ox * stride + kx) as isize - pad as isize;
                    for ch in 0..c {
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            out[[row, col]] = xv[[sy as usize, sx as usize, ch]];
                        }
                        col += 1;
                    }
                }
            }
        }
    }
    let var = Var(Arc::new(Node {
        data: Arc::new(out.into_dyn()),
        parents: vec![x.clone()],
        grad_fn: Some(Box::new(move |g, n| {
            let xv = n.parent_data(0).view().into_dimensionality::<Ix3>().unwrap();
            let (h, w, c) = xv.dim();
            let g2 = as2(g);
            let mut gx = ndarray::Array3::<f64>::zeros((h, w, c));
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = oy * ow + ox;
                    let mut col = 0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = (oy * stride + ky) as isize - pad as isize;
                            let sx = (ox * stride + kx) as isize - pad as isize;
                            for ch in 0..c {
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                    gx[[sy as usize, sx as usize, ch]] += g2[[row, col]];
                                }
                                col += 1;
                            }
                        }
                    }
                }
            }
            vec![gx.into_dyn()]
        })),
        param: None,
    }));
    (var, oh, ow)
}

/// Gradients produced by one [`backward`] pass.
#[derive(Default)]
pub struct Gradients {
    by_node: HashMap<usize, Arr>,
    by_param: HashMap<ParamId, Arr>,
}

impl Gradients {
    /// Gradient of the root w.r.t. a specific graph node (e.g. an action
    /// input), if that node was on the gradient path.
    pub fn for_node(&self, v: &Var) -> Option<&Arr> {
        self.by_node.get(&v.ptr_id())
    }

    pub fn for_param(&self, id: ParamId) -> Option<&Arr> {
        self.by_param.get(&id)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.by_param.keys().copied()
    }

    /// Accumulate another gradient table into this one (parameter entries
    /// only; node entries are graph-local and dropped).
    pub fn merge(&mut self, other: Gradients) {
        for (id, g) in other.by_param {
            match self.by_param.entry(id) {
                std::collections::hash_map::Entry::Occupied(mut e) => *e.get_mut() += &g,
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(g);
                }
            }
        }
    }

    /// Scale every parameter gradient in place.
    pub fn scale(&mut self, c: f64) {
        for g in self.by_param.values_mut() {
            g.mapv_inplace(|v| v * c);
        }
    }

    /// Global L2 norm over all parameter gradients.
    pub fn global_norm(&self) -> f64 {
        self.by_param
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Run reverse-mode differentiation from a single-element root.
pub fn backward(root: &Var) -> Gradients {
    assert_eq!(root.len(), 1, "backward requires a scalar root");
    // Post-order DFS to get a topological order of the reachable graph.
    let mut order: Vec<Var> = Vec::new();
    let mut visited: HashMap<usize, ()> = HashMap::new();
    let mut stack: Vec<(Var, usize)> = vec![(root.clone(), 0)];
    while let Some((node, child)) = stack.pop() {
        if child == 0 {
            if visited.contains_key(&node.ptr_id()) {
                continue;
            }
            visited.insert(node.ptr_id(), ());
        }
        if child < node.0.parents.len() {
            let next = node.0.parents[child].clone();
            stack.push((node, child + 1));
            if !visited.contains_key(&next.ptr_id()) {
                stack.push((next, 0));
            }
        } else {
            order.push(node);
        }
    }

    let mut grads = Gradients::default();
    grads
        .by_node
        .insert(root.ptr_id(), Arr::from_elem(root.data().raw_dim(), 1.0));

    for node in order.iter().rev() {
        let Some(g) = grads.by_node.get(&node.ptr_id()).cloned() else {
            continue;
        };
        if let Some(id) = node.0.param {
            match grads.by_param.entry(id) {
                std::collections::hash_map::Entry::Occupied(mut e) => *e.get_mut() += &g,
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(g.clone());
                }
            }
        }
        if let Some(f) = &node.0.grad_fn {
            let parent_grads = f(&g, &node.0);
            debug_assert_eq!(parent_grads.len(), node.0.parents.len());
            for (p, pg) in node.0.parents.iter().zip(parent_grads) {
                debug_assert_eq!(p.shape(), pg.shape(), "gradient shape mismatch");
                match grads.by_node.entry(p.ptr_id()) {
                    std::collections::hash_map::Entry::Occupied(mut e) => *e.get_mut() += &pg,
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(pg);
                    }
                }
            }
        }
    }
    grads
}

#[inline]
pub fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus_f(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

#[inline]
pub fn gelu_f(x: f64) -> f64 {
    x * norm_cdf(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff;
    use crate::param::Param;

    fn arr2(v: Vec<f64>, r: usize, c: usize) -> Arr {
        Arr::from_shape_vec(IxDyn(&[r, c]), v).unwrap()
    }

    #[test]
    fn matmul_forward_matches_hand_product() {
        let a = Var::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = Var::from_vec(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]);
        let c = a.matmul(&b);
        assert_eq!(c.data().as_slice().unwrap(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn backward_accumulates_shared_param_use() {
        // y = sum(w) + sum(w) uses the same leaf twice.
        let p = Param::new("w", arr2(vec![1.0, 2.0, 3.0, 4.0], 2, 2));
        let w = p.leaf();
        let y = w.sum().add(&w.sum());
        let g = backward(&y);
        let gw = g.for_param(p.id()).unwrap();
        assert!(gw.iter().all(|&v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn gradcheck_composite_expression() {
        // scalar = mean(gelu(x W + b) softmaxed, picked) through several ops
        let mut rng = crate::param::seeded_rng(7);
        let x = crate::param::randn_arr(&mut rng, &[3, 4], 1.0);
        let w = Param::randn(&mut rng, "w", &[4, 5], 0.5);
        let b = Param::zeros("b", &[5]);
        let f = |xa: &Arr| {
            let xv = Var::constant(xa.clone());
            let h = xv.matmul(&w.leaf()).add_bias(&b.leaf()).gelu();
            let s = h.log_softmax_rows();
            s.pick_per_row(&[0, 2, 4]).mean().value()
        };
        let xv = Var::constant(x.clone());
        let h = xv.matmul(&w.leaf()).add_bias(&b.leaf()).gelu();
        let loss = h.log_softmax_rows().pick_per_row(&[0, 2, 4]).mean();
        let grads = backward(&loss);
        let gx = grads.for_node(&xv).unwrap();
        let fd = finite_diff(&f, &x, 1e-5);
        let max_rel = gx
            .iter()
            .zip(fd.iter())
            .map(|(a, b)| (a - b).abs() / (1e-8 + a.abs().max(b.abs())))
            .fold(0.0, f64::max);
        assert!(max_rel < 1e-6, "max rel err {max_rel}");
    }

    #[test]
    fn layer_norm_gradcheck() {
        let mut rng = crate::param::seeded_rng(9);
        let x = crate::param::randn_arr(&mut rng, &[4, 6], 1.0);
        let g = Param::randn(&mut rng, "g", &[6], 0.3);
        let b = Param::randn(&mut rng, "b", &[6], 0.3);
        let f = |xa: &Arr| {
            let y = layer_norm(&Var::constant(xa.clone()), &g.leaf(), &b.leaf(), 1e-6);
            y.square().mean().value()
        };
        let xv = Var::constant(x.clone());
        let loss = layer_norm(&xv, &g.leaf(), &b.leaf(), 1e-6).square().mean();
        let grads = backward(&loss);
        let gx = grads.for_node(&xv).unwrap();
        let fd = finite_diff(&f, &x, 1e-5);
        for (a, b) in gx.iter().zip(fd.iter()) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn im2col_gradcheck() {
        let mut rng = crate::param::seeded_rng(3);
        let x = crate::param::randn_arr(&mut rng, &[5, 5, 2], 1.0);
        let w = Param::randn(&mut rng, "w", &[18, 3], 0.4);
        let f = |xa: &Arr| {
            let (cols, _, _) = im2col(&Var::constant(xa.clone()), 3, 2, 1);
            cols.matmul(&w.leaf()).square().mean().value()
        };
        let xv = Var::constant(x.clone());
        let (cols, oh, ow) = im2col(&xv, 3, 2, 1);
        assert_eq!((oh, ow), (3, 3));
        let loss = cols.matmul(&w.leaf()).square().mean();
        let grads = backward(&loss);
        let gx = grads.for_node(&xv).unwrap();
        let fd = finite_diff(&f, &x, 1e-5);
        for (a, b) in gx.iter().zip(fd.iter()) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn min2_routes_gradient_to_smaller_side() {
        let a = Var::from_vec(vec![1.0, 5.0], &[2]);
        let b = Var::from_vec(vec![2.0, 3.0], &[2]);
        let pa = Param::new("a", a.data().clone());
        let pb = Param::new("b", b.data().clone());
        let loss = pa.leaf().min2(&pb.leaf()).sum();
        let g = backward(&loss);
        assert_eq!(g.for_param(pa.id()).unwrap().as_slice().unwrap(), &[1.0, 0.0]);
        assert_eq!(g.for_param(pb.id()).unwrap().as_slice().unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn detach_cuts_gradient_flow() {
        let p = Param::new("w", Arr::from_elem(IxDyn(&[2]), 3.0));
        let y = p.leaf().detach().sum();
        let g = backward(&y);
        assert!(g.for_param(p.id()).is_none());
    }
}
