//! Building-block layers: linear, layer norm, MLP, multi-head attention,
//! attention pooling, and a small convolution stack.

use ndarray::Ix2;
use rand_chacha::ChaCha12Rng;

use crate::param::{HasParams, Param};
use crate::var::{concat_cols, im2col, layer_norm, Arr, Var};

/// `y = x W + b` over `[n, in] -> [n, out]`.
pub struct Linear {
    pub w: Param,
    pub b: Option<Param>,
}

impl Linear {
    pub fn new(rng: &mut ChaCha12Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: Param::glorot(rng, format!("{name}.w"), fan_in, fan_out),
            b: Some(Param::zeros(format!("{name}.b"), &[fan_out])),
        }
    }

    pub fn new_no_bias(rng: &mut ChaCha12Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: Param::glorot(rng, format!("{name}.w"), fan_in, fan_out),
            b: None,
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        let y = x.matmul(&self.w.leaf());
        match &self.b {
            Some(b) => y.add_bias(&b.leaf()),
            None => y,
        }
    }

    pub fn out_features(&self) -> usize {
        self.w.shape()[1]
    }
}

impl HasParams for Linear {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.w);
        if let Some(b) = &self.b {
            f(b);
        }
    }
    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        f(&mut self.w);
        if let Some(b) = &mut self.b {
            f(b);
        }
    }
}

pub struct LayerNorm {
    pub gain: Param,
    pub bias: Param,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: Param::full(format!("{name}.gain"), &[dim], 1.0),
            bias: Param::zeros(format!("{name}.bias"), &[dim]),
            eps: 1e-6,
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        layer_norm(x, &self.gain.leaf(), &self.bias.leaf(), self.eps)
    }
}

impl HasParams for LayerNorm {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.gain);
        f(&self.bias);
    }
    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        f(&mut self.gain);
        f(&mut self.bias);
    }
}

/// Stack of linear layers with GELU between them (none after the last).
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists layer widths including input and output, e.g.
    /// `[in, hidden, hidden, out]` builds a 3-layer MLP.
    pub fn new(rng: &mut ChaCha12Rng, name: &str, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(rng, &format!("{name}.l{i}"), w[0], w[1]))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, x: &Var) -> Var {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if i < last {
                h = h.gelu();
            }
        }
        h
    }
}

impl HasParams for Mlp {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        for l in &self.layers {
            l.visit_params(f);
        }
    }
    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        for l in &mut self.layers {
            l.visit_params_mut(f);
        }
    }
}

/// Multi-head scaled dot-product attention. Query and key/value sequences
/// may differ (cross attention); an optional key mask hides padded slots
/// from every query.
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(rng: &mut ChaCha12Rng, name: &str, dim: usize, heads: usize) -> Self {
        assert_eq!(dim % heads, 0, "embed width must divide by head count");
        MultiHeadAttention {
            wq: Linear::new(rng, &format!("{name}.wq"), dim, dim),
            wk: Linear::new(rng, &format!("{name}.wk"), dim, dim),
            wv: Linear::new(rng, &format!("{name}.wv"), dim, dim),
            wo: Linear::new(rng, &format!("{name}.wo"), dim, dim),
            heads,
        }
    }

    /// Returns the attended output `[nq, dim]` and the head-averaged
    /// post-softmax attention `[nq, nk]` (detached, for rollout).
    pub fn forward(&self, queries: &Var, keys_values: &Var, key_mask: Option<&[bool]>) -> (Var, Arr) {
        let dim = self.wq.out_features();
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let q = self.wq.forward(queries);
        let k = self.wk.forward(keys_values);
        let v = self.wv.forward(keys_values);

        let nq = q.shape()[0];
        let nk = k.shape()[0];

        let mask_bias = key_mask.map(|mask| {
            assert_eq!(mask.len(), nk, "key mask length mismatch");
            let mut m = ndarray::Array2::<f64>::zeros((nq, nk));
            for (j, &keep) in mask.iter().enumerate() {
                if !keep {
                    m.column_mut(j).fill(-1e30);
                }
            }
            Var::constant(m.into_dyn())
        });

        let mut head_outs = Vec::with_capacity(self.heads);
        let mut attn_avg = ndarray::Array2::<f64>::zeros((nq, nk));
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = q.slice_cols(lo, hi);
            let kh = k.slice_cols(lo, hi);
            let vh = v.slice_cols(lo, hi);
            let mut scores = qh.matmul_nt(&kh).mul_scalar(scale);
            if let Some(mb) = &mask_bias {
                scores = scores.add(mb);
            }
            let attn = scores.softmax_rows();
            attn_avg += &attn.data().view().into_dimensionality::<Ix2>().unwrap();
            head_outs.push(attn.matmul(&vh));
        }
        attn_avg.mapv_inplace(|v| v / self.heads as f64);
        let merged = concat_cols(&head_outs);
        (self.wo.forward(&merged), attn_avg.into_dyn())
    }
}

impl HasParams for MultiHeadAttention {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.wq.visit_params(f);
        self.wk.visit_params(f);
        self.wv.visit_params(f);
        self.wo.visit_params(f);
    }
    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        self.wq.visit_params_mut(f);
        self.wk.visit_params_mut(f);
        self.wv.visit_params_mut(f);
        self.wo.visit_params_mut(f);
    }
}

/// Pools a variable-length token set into one vector with a learned query
/// attending over the tokens.
pub struct AttentionPool {
    pub query: Param,
    pub attn: MultiHeadAttention,
}

impl AttentionPool {
    pub fn new(rng: &mut ChaCha12Rng, name: &str, dim: usize, heads: usize) -> Self {
        AttentionPool {
            query: Param::randn(rng, format!("{name}.query"), &[1, dim], 0.02),
            attn: MultiHeadAttention::new(rng, &format!("{name}.attn"), dim, heads),
        }
    }

    /// `tokens: [n, dim] -> [1, dim]`; masked slots never contribute.
    pub fn forward(&self, tokens: &Var, mask: Option<&[bool]>) -> Var {
        let (out, _) = self.attn.forward(&self.query.leaf(), tokens, mask);
        out
    }
}

impl HasParams for AttentionPool {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.query);
        self.attn.visit_params(f);
    }
    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        f(&mut self.query);
        self.attn.visit_params_mut(f);
    }
}

/// One convolution layer on a `[h, w, c]` image, `same`-style zero padding.
pub struct Conv2d {
    pub w: Param, // [k*k*cin, cout]
    pub b: Param, // [cout]
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub cout: usize,
}

impl Conv2d {
    pub fn new(
        rng: &mut ChaCha12Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Conv2d {
            w: Param::glorot(rng, format!("{name}.w"), k * k * cin, cout),
            b: Param::zeros(format!("{name}.b"), &[cout]),
            k,
            stride,
            pad,
            cout,
        }
    }

    /// `[h, w, cin] -> [oh, ow, cout]`.
    pub fn forward(&self, x: &Var) -> Var {
        let (cols, oh, ow) = im2col(x, self.k, self.stride, self.pad);
        let y = cols.matmul(&self.w.leaf()).add_bias(&self.b.leaf());
        y.reshape(&[oh, ow, self.cout])
    }
}

impl HasParams for Conv2d {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.w);
        f(&self.b);
    }
    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff;
    use crate::param::{randn_arr, seeded_rng};
    use crate::var::backward;

    #[test]
    fn linear_matches_hand_matvec() {
        let mut rng = seeded_rng(11);
        let lin = Linear::new(&mut rng, "l", 3, 2);
        let x = Var::from_vec(vec![1.0, -2.0, 0.5], &[1, 3]);
        let y = lin.forward(&x);
        let w = lin.w.value();
        let b = lin.b.as_ref().unwrap();
        for j in 0..2 {
            let expect = 1.0 * w[[0, j]] - 2.0 * w[[1, j]] + 0.5 * w[[2, j]] + b.value()[[j]];
            assert!((y.data()[[0, j]] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_mask_hides_padded_keys() {
        let mut rng = seeded_rng(5);
        let mha = MultiHeadAttention::new(&mut rng, "a", 8, 2);
        let q = Var::constant(randn_arr(&mut rng, &[2, 8], 1.0));
        let kv_real = randn_arr(&mut rng, &[3, 8], 1.0);
        let pad = randn_arr(&mut rng, &[2, 8], 1.0);
        let kv_padded =
            ndarray::concatenate(ndarray::Axis(0), &[kv_real.view(), pad.view()]).unwrap();
        let (out_real, _) =
            mha.forward(&q, &Var::constant(kv_real.clone()), Some(&[true, true, true]));
        let (out_padded, _) = mha.forward(
            &q,
            &Var::constant(kv_padded.into_dyn()),
            Some(&[true, true, true, false, false]),
        );
        for (a, b) in out_real.data().iter().zip(out_padded.data().iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_gradcheck_through_heads() {
        let mut rng = seeded_rng(17);
        let mha = MultiHeadAttention::new(&mut rng, "a", 8, 2);
        let x = randn_arr(&mut rng, &[3, 8], 0.7);
        let f = |xa: &crate::var::Arr| {
            let xv = Var::constant(xa.clone());
            let (y, _) = mha.forward(&xv, &xv, None);
            y.square().mean().value()
        };
        let xv = Var::constant(x.clone());
        let (y, _) = mha.forward(&xv, &xv, None);
        let grads = backward(&y.square().mean());
        let gx = grads.for_node(&xv).unwrap();
        let fd = finite_diff(&f, &x, 1e-5);
        for (a, b) in gx.iter().zip(fd.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn conv_output_shape_and_gradcheck() {
        let mut rng = seeded_rng(23);
        let conv = Conv2d::new(&mut rng, "c", 2, 4, 3, 2, 1);
        let x = randn_arr(&mut rng, &[6, 6, 2], 0.8);
        let y = conv.forward(&Var::constant(x.clone()));
        assert_eq!(y.shape(), &[3, 3, 4]);

        let f = |xa: &crate::var::Arr| {
            conv.forward(&Var::constant(xa.clone())).square().mean().value()
        };
        let xv = Var::constant(x.clone());
        let grads = backward(&conv.forward(&xv).square().mean());
        let gx = grads.for_node(&xv).unwrap();
        let fd = finite_diff(&f, &x, 1e-5);
        for (a, b) in gx.iter().zip(fd.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn mlp_param_gradcheck() {
        let mut rng = seeded_rng(29);
        let mlp = Mlp::new(&mut rng, "m", &[4, 8, 8, 2]);
        assert_eq!(mlp.layers.len(), 3);
        let x = randn_arr(&mut rng, &[2, 4], 1.0);
        let loss = mlp.forward(&Var::constant(x.clone())).square().mean();
        let grads = backward(&loss);
        // check gradient of the first weight matrix against finite differences
        let p0 = &mlp.layers[0].w;
        let analytic = grads.for_param(p0.id()).unwrap().clone();
        let base = p0.value().clone();
        let eps = 1e-5;
        for &(i, j) in &[(0usize, 0usize), (1, 3), (3, 7)] {
            let mut plus = base.clone();
            plus[[i, j]] += eps;
            let mut minus = base.clone();
            minus[[i, j]] -= eps;
            let eval = |warr: &crate::var::Arr| {
                let xv = Var::constant(x.clone());
                let h0 = xv
                    .matmul(&Var::constant(warr.clone()))
                    .add_bias(&mlp.layers[0].b.as_ref().unwrap().leaf())
                    .gelu();
                let h1 = mlp.layers[1].forward(&h0).gelu();
                mlp.layers[2].forward(&h1).square().mean().value()
            };
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let an = analytic[[i, j]];
            assert!((fd - an).abs() < 1e-6, "{fd} vs {an}");
        }
    }
}
