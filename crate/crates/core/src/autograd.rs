//! Minimal reverse-mode automatic differentiation over [`Array`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Feature maps are
//! single images laid out `(channels, height, width)`; token matrices are
//! `(rows, columns)`. Batches are handled by running one tape per sample and
//! summing parameter gradients.

use crate::tensor::Array;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    MulScalar {
        x: Var,
        s: Var,
    },
    AddChannel {
        x: Var,
        bias: Var,
    },
    ScaleChannel {
        x: Var,
        scale: Var,
    },
    Silu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Upsample2x(Var),
    ConcatChannels(Var, Var),
    ToTokens(Var),
    FromTokens(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    MseConst {
        x: Var,
        target: Array,
    },
}

struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array> {
        self.grads[v.0].take()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Array, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Array::from_vec(va.shape(), data).unwrap();
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// `s * x` where `s` is a one-element array.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        let k = self.value(s).data()[0];
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v * k).collect();
        let out = Array::from_vec(vx.shape(), data).unwrap();
        self.push(out, Op::MulScalar { x, s }, &[x, s])
    }

    /// Adds a per-channel value to a `(C, H, W)` feature map.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Var {
        let vx = self.value(x);
        let vb = self.value(bias);
        let c = vx.shape()[0];
        assert_eq!(vb.len(), c, "add_channel: bias length");
        let plane = vx.len() / c;
        let mut out = vx.clone();
        for (ch, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let b = vb.data()[ch];
            for v in chunk {
                *v += b;
            }
        }
        self.push(out, Op::AddChannel { x, bias }, &[x, bias])
    }

    /// Multiplies channel `c` of a `(C, H, W)` feature map by `scale[c]`.
    pub fn scale_channel(&mut self, x: Var, scale: Var) -> Var {
        let vx = self.value(x);
        let vs = self.value(scale);
        let c = vx.shape()[0];
        assert_eq!(vs.len(), c, "scale_channel: scale length");
        let plane = vx.len() / c;
        let mut out = vx.clone();
        for (ch, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let k = vs.data()[ch];
            for v in chunk {
                *v *= k;
            }
        }
        self.push(out, Op::ScaleChannel { x, scale }, &[x, scale])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v * sigmoid(v)).collect();
        let out = Array::from_vec(vx.shape(), data).unwrap();
        self.push(out, Op::Silu(x), &[x])
    }

    /// 2-D convolution of a `(Ci, H, W)` map with `(Co, Ci, k, k)` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let g = ConvGeom::new(vx.shape(), vw.shape(), stride, pad);
        let mut out = vec![0.0; g.co * g.ho * g.wo];
        conv_forward(&g, vx.data(), vw.data(), &mut out);
        if let Some(b) = b {
            let vb = self.value(b);
            let plane = g.ho * g.wo;
            for (o, chunk) in out.chunks_mut(plane).enumerate() {
                let bias = vb.data()[o];
                for v in chunk {
                    *v += bias;
                }
            }
        }
        let out = Array::from_vec(&[g.co, g.ho, g.wo], out).unwrap();
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &parents,
        )
    }

    /// Nearest-neighbour 2x upsampling of a `(C, H, W)` map.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (c, h, w) = dims3(vx.shape());
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = vx.data()[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let out = Array::from_vec(&[c, 2 * h, 2 * w], out).unwrap();
        self.push(out, Op::Upsample2x(x), &[x])
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (ca, h, w) = dims3(va.shape());
        let (cb, hb, wb) = dims3(vb.shape());
        assert_eq!((h, w), (hb, wb), "concat_channels: spatial mismatch");
        let mut data = Vec::with_capacity(va.len() + vb.len());
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let out = Array::from_vec(&[ca + cb, h, w], data).unwrap();
        self.push(out, Op::ConcatChannels(a, b), &[a, b])
    }

    /// `(C, H, W)` feature map to `(H*W, C)` token matrix.
    pub fn to_tokens(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (c, h, w) = dims3(vx.shape());
        let out = transpose(vx.data(), c, h * w);
        let out = Array::from_vec(&[h * w, c], out).unwrap();
        self.push(out, Op::ToTokens(x), &[x])
    }

    /// `(H*W, C)` token matrix back to a `(C, H, W)` map.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Var {
        let vx = self.value(x);
        let c = vx.shape()[1];
        assert_eq!(vx.shape()[0], h * w, "from_tokens: token count");
        let out = transpose(vx.data(), h * w, c);
        let out = Array::from_vec(&[c, h, w], out).unwrap();
        self.push(out, Op::FromTokens(x), &[x])
    }

    /// `x W^T + b` for `x: (N, in)`, `W: (out, in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let (n, din) = (vx.shape()[0], vx.shape()[1]);
        let (dout, dwin) = (vw.shape()[0], vw.shape()[1]);
        assert_eq!(din, dwin, "linear: input width");
        let mut out = vec![0.0; n * dout];
        for r in 0..n {
            let xr = &vx.data()[r * din..(r + 1) * din];
            for o in 0..dout {
                let wr = &vw.data()[o * din..(o + 1) * din];
                out[r * dout + o] = dot(xr, wr);
            }
        }
        if let Some(b) = b {
            let vb = self.value(b);
            for r in 0..n {
                for o in 0..dout {
                    out[r * dout + o] += vb.data()[o];
                }
            }
        }
        let out = Array::from_vec(&[n, dout], out).unwrap();
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(out, Op::Linear { x, w, b }, &parents)
    }

    /// Row-wise layer normalization of an `(N, C)` matrix.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let vx = self.value(x);
        let (n, c) = (vx.shape()[0], vx.shape()[1]);
        let (vg, vb) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; n * c];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * c];
        for r in 0..n {
            let row = &vx.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[r * c + j] = xh;
                out[r * c + j] = vg[j] * xh + vb[j];
            }
        }
        let out = Array::from_vec(&[n, c], out).unwrap();
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q: (N, d)`, `k, v: (M, d)`. Keys whose `mask` entry is false receive
    /// exactly zero weight and do not enter the softmax normalizer. At least
    /// one key must be valid.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &[bool]) -> Var {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = (vq.shape()[0], vq.shape()[1]);
        let m = vk.shape()[0];
        assert_eq!(vk.shape()[1], d, "attention: key width");
        assert_eq!(vv.shape(), vk.shape(), "attention: value shape");
        assert_eq!(mask.len(), m, "attention: mask length");
        assert!(mask.iter().any(|&b| b), "attention: no valid keys");
        assert_eq!(d % heads, 0, "attention: heads must divide width");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * n * m];
        let mut out = vec![0.0; n * d];
        let mut scores = vec![0.0; m];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let qi = &vq.data()[i * d + off..i * d + off + dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..m {
                    if mask[j] {
                        let kj = &vk.data()[j * d + off..j * d + off + dh];
                        scores[j] = dot(qi, kj) * scale;
                        max = max.max(scores[j]);
                    }
                }
                let mut z = 0.0;
                for j in 0..m {
                    if mask[j] {
                        scores[j] = (scores[j] - max).exp();
                        z += scores[j];
                    }
                }
                let p = &mut probs[(h * n + i) * m..(h * n + i + 1) * m];
                for j in 0..m {
                    if mask[j] {
                        p[j] = scores[j] / z;
                    }
                }
                let oi = &mut out[i * d + off..i * d + off + dh];
                for j in 0..m {
                    if mask[j] {
                        let vj = &vv.data()[j * d + off..j * d + off + dh];
                        for (o, vval) in oi.iter_mut().zip(vj) {
                            *o += p[j] * vval;
                        }
                    }
                }
            }
        }
        let out = Array::from_vec(&[n, d], out).unwrap();
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Mean squared difference to a constant target, as a one-element array.
    pub fn mse_const(&mut self, x: Var, target: Array) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.shape(), target.shape(), "mse_const: shape mismatch");
        let n = vx.len() as f64;
        let s: f64 = vx
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let out = Array::scalar(s / n);
        self.push(out, Op::MseConst { x, target }, &[x])
    }

    /// Reverse pass from a one-element output.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward: root must be a scalar"
        );
        grads[root.0] = Some(Array::full(self.nodes[root.0].value.shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(&self, grads: &mut [Option<Array>], v: Var, g: Array) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop(&self, node: &Node, g: &Array, grads: &mut [Option<Array>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::MulScalar { x, s } => {
                let k = self.value(*s).data()[0];
                if self.wants(*x) {
                    let mut dx = g.clone();
                    dx.scale_in_place(k);
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*s) {
                    let ds = dot(g.data(), self.value(*x).data());
                    self.accumulate(grads, *s, Array::scalar(ds));
                }
            }
            Op::AddChannel { x, bias } => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*bias) {
                    let c = g.shape()[0];
                    let plane = g.len() / c;
                    let db = g.data().chunks(plane).map(|ch| ch.iter().sum()).collect();
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Array::from_vec(&shape, db).unwrap());
                }
            }
            Op::ScaleChannel { x, scale } => {
                let vx = self.value(*x);
                let vs = self.value(*scale);
                let c = vx.shape()[0];
                let plane = vx.len() / c;
                if self.wants(*x) {
                    let dx = g
                        .data()
                        .chunks(plane)
                        .zip(vs.data())
                        .flat_map(|(ch, k)| ch.iter().map(move |v| v * k))
                        .collect();
                    self.accumulate(grads, *x, Array::from_vec(vx.shape(), dx).unwrap());
                }
                if self.wants(*scale) {
                    let ds = g
                        .data()
                        .chunks(plane)
                        .zip(vx.data().chunks(plane))
                        .map(|(gc, xc)| dot(gc, xc))
                        .collect();
                    self.accumulate(grads, *scale, Array::from_vec(vs.shape(), ds).unwrap());
                }
            }
            Op::Silu(x) => {
                let vx = self.value(*x);
                let dx = vx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| {
                        let s = sigmoid(v);
                        gv * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                self.accumulate(grads, *x, Array::from_vec(vx.shape(), dx).unwrap());
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let vx = self.value(*x);
                let vw = self.value(*w);
                let geom = ConvGeom::new(vx.shape(), vw.shape(), *stride, *pad);
                if self.wants(*x) {
                    let mut dx = vec![0.0; vx.len()];
                    conv_backward_input(&geom, g.data(), vw.data(), &mut dx);
                    self.accumulate(grads, *x, Array::from_vec(vx.shape(), dx).unwrap());
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; vw.len()];
                    conv_backward_weight(&geom, g.data(), vx.data(), &mut dw);
                    self.accumulate(grads, *w, Array::from_vec(vw.shape(), dw).unwrap());
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let plane = geom.ho * geom.wo;
                        let db = g.data().chunks(plane).map(|ch| ch.iter().sum()).collect();
                        self.accumulate(grads, *b, Array::from_vec(&[geom.co], db).unwrap());
                    }
                }
            }
            Op::Upsample2x(x) => {
                let vx = self.value(*x);
                let (c, h, w) = dims3(vx.shape());
                let mut dx = vec![0.0; vx.len()];
                for ch in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[(ch * h + y / 2) * w + xx / 2] +=
                                g.data()[(ch * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, Array::from_vec(vx.shape(), dx).unwrap());
            }
            Op::ConcatChannels(a, b) => {
                let na = self.value(*a).len();
                let da = Array::from_vec(self.value(*a).shape(), g.data()[..na].to_vec()).unwrap();
                let db = Array::from_vec(self.value(*b).shape(), g.data()[na..].to_vec()).unwrap();
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::ToTokens(x) => {
                let (c, h, w) = dims3(self.value(*x).shape());
                let dx = transpose(g.data(), h * w, c);
                self.accumulate(grads, *x, Array::from_vec(&[c, h, w], dx).unwrap());
            }
            Op::FromTokens(x) => {
                let (c, h, w) = dims3(g.shape());
                let dx = transpose(g.data(), c, h * w);
                self.accumulate(grads, *x, Array::from_vec(&[h * w, c], dx).unwrap());
            }
            Op::Linear { x, w, b } => {
                let vx = self.value(*x);
                let vw = self.value(*w);
                let (n, din) = (vx.shape()[0], vx.shape()[1]);
                let dout = vw.shape()[0];
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * din];
                    for r in 0..n {
                        let dxr = &mut dx[r * din..(r + 1) * din];
                        for o in 0..dout {
                            let gv = g.data()[r * dout + o];
                            let wr = &vw.data()[o * din..(o + 1) * din];
                            for (d, wv) in dxr.iter_mut().zip(wr) {
                                *d += gv * wv;
                            }
                        }
                    }
                    self.accumulate(grads, *x, Array::from_vec(&[n, din], dx).unwrap());
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; dout * din];
                    for r in 0..n {
                        let xr = &vx.data()[r * din..(r + 1) * din];
                        for o in 0..dout {
                            let gv = g.data()[r * dout + o];
                            let dwr = &mut dw[o * din..(o + 1) * din];
                            for (d, xv) in dwr.iter_mut().zip(xr) {
                                *d += gv * xv;
                            }
                        }
                    }
                    self.accumulate(grads, *w, Array::from_vec(&[dout, din], dw).unwrap());
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![0.0; dout];
                        for r in 0..n {
                            for o in 0..dout {
                                db[o] += g.data()[r * dout + o];
                            }
                        }
                        self.accumulate(grads, *b, Array::from_vec(&[dout], db).unwrap());
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (n, c) = (g.shape()[0], g.shape()[1]);
                let vg = self.value(*gamma).data();
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * c];
                    for r in 0..n {
                        let gr = &g.data()[r * c..(r + 1) * c];
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..c {
                            let d = gr[j] * vg[j];
                            mean_d += d;
                            mean_dx += d * xh[j];
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        for j in 0..c {
                            let d = gr[j] * vg[j];
                            dx[r * c + j] = rstd[r] * (d - mean_d - xh[j] * mean_dx);
                        }
                    }
                    self.accumulate(grads, *x, Array::from_vec(&[n, c], dx).unwrap());
                }
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for r in 0..n {
                        for j in 0..c {
                            dg[j] += g.data()[r * c + j] * xhat[r * c + j];
                            db[j] += g.data()[r * c + j];
                        }
                    }
                    self.accumulate(grads, *gamma, Array::from_vec(&[c], dg).unwrap());
                    self.accumulate(grads, *beta, Array::from_vec(&[c], db).unwrap());
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, d) = (vq.shape()[0], vq.shape()[1]);
                let m = vk.shape()[0];
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; n * d];
                let mut dk = vec![0.0; m * d];
                let mut dv = vec![0.0; m * d];
                let mut dp = vec![0.0; m];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..n {
                        let p = &probs[(h * n + i) * m..(h * n + i + 1) * m];
                        let gi = &g.data()[i * d + off..i * d + off + dh];
                        let mut weighted = 0.0;
                        for j in 0..m {
                            if p[j] == 0.0 {
                                dp[j] = 0.0;
                                continue;
                            }
                            let vj = &vv.data()[j * d + off..j * d + off + dh];
                            dp[j] = dot(gi, vj);
                            weighted += p[j] * dp[j];
                            let dvj = &mut dv[j * d + off..j * d + off + dh];
                            for (a, b) in dvj.iter_mut().zip(gi) {
                                *a += p[j] * b;
                            }
                        }
                        for j in 0..m {
                            if p[j] == 0.0 {
                                continue;
                            }
                            let ds = p[j] * (dp[j] - weighted) * scale;
                            for t in 0..dh {
                                dq[i * d + off + t] += ds * vk.data()[j * d + off + t];
                                dk[j * d + off + t] += ds * vq.data()[i * d + off + t];
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, Array::from_vec(&[n, d], dq).unwrap());
                self.accumulate(grads, *k, Array::from_vec(&[m, d], dk).unwrap());
                self.accumulate(grads, *v, Array::from_vec(&[m, d], dv).unwrap());
            }
            Op::MseConst { x, target } => {
                let vx = self.value(*x);
                let k = 2.0 * g.data()[0] / vx.len() as f64;
                let dx = vx
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| k * (a - b))
                    .collect();
                self.accumulate(grads, *x, Array::from_vec(vx.shape(), dx).unwrap());
            }
        }
    }
}

pub(crate) fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "expected a (C, H, W) array, got {shape:?}");
    (shape[0], shape[1], shape[2])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &[usize], wt: &[usize], stride: usize, pad: usize) -> Self {
        let (ci, h, w) = dims3(x);
        assert_eq!(wt.len(), 4, "conv2d: weight must be (Co, Ci, k, k)");
        assert_eq!(wt[1], ci, "conv2d: input channel mismatch");
        assert_eq!(wt[2], wt[3], "conv2d: square kernels only");
        let k = wt[2];
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        ConvGeom {
            ci,
            h,
            w,
            co: wt[0],
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    /// Output index range along one axis for which `o*stride + kk - pad` is in `[0, len)`.
    fn valid(&self, kk: usize, len: usize, out_len: usize) -> (usize, usize) {
        let lo = if self.pad > kk {
            (self.pad - kk).div_ceil(self.stride)
        } else {
            0
        };
        let hi = if len + self.pad > kk {
            ((len - 1 + self.pad - kk) / self.stride + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

fn conv_forward(g: &ConvGeom, x: &[f64], wt: &[f64], out: &mut [f64]) {
    for o in 0..g.co {
        for i in 0..g.ci {
            for ky in 0..g.k {
                let (oy_lo, oy_hi) = g.valid(ky, g.h, g.ho);
                for kx in 0..g.k {
                    let wv = wt[((o * g.ci + i) * g.k + ky) * g.k + kx];
                    let (ox_lo, ox_hi) = g.valid(kx, g.w, g.wo);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let xrow = &x[(i * g.h + iy) * g.w..(i * g.h + iy + 1) * g.w];
                        let orow = &mut out[(o * g.ho + oy) * g.wo..(o * g.ho + oy + 1) * g.wo];
                        if g.stride == 1 {
                            let shift = kx as isize - g.pad as isize;
                            let xs = &xrow[(ox_lo as isize + shift) as usize
                                ..(ox_hi as isize + shift) as usize];
                            for (ov, xv) in orow[ox_lo..ox_hi].iter_mut().zip(xs) {
                                *ov += wv * xv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                orow[ox] += wv * xrow[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_input(g: &ConvGeom, dout: &[f64], wt: &[f64], dx: &mut [f64]) {
    for o in 0..g.co {
        for i in 0..g.ci {
            for ky in 0..g.k {
                let (oy_lo, oy_hi) = g.valid(ky, g.h, g.ho);
                for kx in 0..g.k {
                    let wv = wt[((o * g.ci + i) * g.k + ky) * g.k + kx];
                    let (ox_lo, ox_hi) = g.valid(kx, g.w, g.wo);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let drow = &dout[(o * g.ho + oy) * g.wo..(o * g.ho + oy + 1) * g.wo];
                        let xrow = &mut dx[(i * g.h + iy) * g.w..(i * g.h + iy + 1) * g.w];
                        for ox in ox_lo..ox_hi {
                            xrow[ox * g.stride + kx - g.pad] += wv * drow[ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_weight(g: &ConvGeom, dout: &[f64], x: &[f64], dw: &mut [f64]) {
    for o in 0..g.co {
        for i in 0..g.ci {
            for ky in 0..g.k {
                let (oy_lo, oy_hi) = g.valid(ky, g.h, g.ho);
                for kx in 0..g.k {
                    let (ox_lo, ox_hi) = g.valid(kx, g.w, g.wo);
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let drow = &dout[(o * g.ho + oy) * g.wo..(o * g.ho + oy + 1) * g.wo];
                        let xrow = &x[(i * g.h + iy) * g.w..(i * g.h + iy + 1) * g.w];
                        for ox in ox_lo..ox_hi {
                            acc += drow[ox] * xrow[ox * g.stride + kx - g.pad];
                        }
                    }
                    dw[((o * g.ci + i) * g.k + ky) * g.k + kx] += acc;
                }
            }
        }
    }
}
