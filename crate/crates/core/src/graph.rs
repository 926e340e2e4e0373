//! Tape-based reverse-mode autodiff over coarse fused operations.
//!
//! Every op stores what its backward pass needs at construction time. A graph
//! built with `grad = false` skips those saves and is used for sampling.
//! Parameters are read in place from bound [`ParamStore`]s; only tensors marked
//! trainable at bind time receive gradients, but gradients still flow *through*
//! frozen tensors to whatever trainable inputs sit upstream.

use crate::params::{Gradients, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StoreId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Silu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let (oh, ow, k) = (self.out_h(), self.out_w(), self.kernel);
        let hw = oh * ow;
        for c in 0..self.in_c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            dst[oy * ow + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < self.in_h && (ix as usize) < self.in_w {
                                x[(c * self.in_h + iy as usize) * self.in_w + ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let (oh, ow, k) = (self.out_h(), self.out_w(), self.kernel);
        let hw = oh * ow;
        for c in 0..self.in_c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.in_h {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.in_w {
                                dx[(c * self.in_h + iy as usize) * self.in_w + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

enum Op<T> {
    Input,
    Param { store: usize, id: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Act { x: Var, kind: Activation },
    LayerNorm { x: Var, gamma: Option<Var>, beta: Option<Var>, xhat: Vec<T>, rstd: Vec<T> },
    Modulate { x: Var, shift: Var, scale: Var, group: usize },
    GatedAdd { x: Var, h: Var, gate: Var, group: usize },
    Attention { qkv: Var, seq: usize, heads: usize, probs: Vec<T> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<T> },
    SpatialSoftmax { x: Var, channels: usize, height: usize, width: usize, probs: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<Var> },
    SliceCols { x: Var, start: usize },
    RepeatRows { x: Var, times: usize },
    TileAdd { x: Var, tile: Var },
    GroupMax { x: Var, group: usize, argmax: Vec<u32> },
    MaskedMse { pred: Var, target: Vec<T>, mask: Vec<bool>, count: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

struct Bound<'a, T> {
    store: &'a ParamStore<T>,
    trainable: Vec<bool>,
    cache: Vec<Option<Var>>,
}

pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<T>>,
    stores: Vec<Bound<'a, T>>,
    grad: bool,
}

/// `tanh` through a single `exp`; libm's `tanh` dominates GELU cost otherwise.
fn fast_tanh<T: Real>(x: T) -> T {
    T::one() - T::lit(2.0) / ((x + x).exp() + T::one())
}

fn act_fwd<T: Real>(kind: Activation, x: T) -> T {
    match kind {
        Activation::Relu => x.max(T::zero()),
        Activation::Gelu => {
            let c = T::lit(0.797_884_560_802_865_4);
            let inner = c * (x + T::lit(0.044715) * x * x * x);
            T::lit(0.5) * x * (T::one() + fast_tanh(inner))
        }
        Activation::Silu => x / (T::one() + (-x).exp()),
    }
}

fn act_grad<T: Real>(kind: Activation, x: T) -> T {
    match kind {
        Activation::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Activation::Gelu => {
            let c = T::lit(0.797_884_560_802_865_4);
            let a = T::lit(0.044715);
            let inner = c * (x + a * x * x * x);
            let t = fast_tanh(inner);
            let half = T::lit(0.5);
            half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
        }
        Activation::Silu => {
            let s = T::one() / (T::one() + (-x).exp());
            s * (T::one() + x * (T::one() - s))
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice()
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new(grad: bool) -> Self {
        Self { nodes: Vec::with_capacity(512), stores: Vec::new(), grad }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad
    }

    /// Binds a parameter store. `trainable` (aligned with store ids) decides
    /// which tensors collect gradients; `None` means all of them.
    pub fn bind(&mut self, store: &'a ParamStore<T>, trainable: Option<Vec<bool>>) -> StoreId {
        let trainable = trainable.unwrap_or_else(|| vec![true; store.len()]);
        assert_eq!(trainable.len(), store.len());
        self.stores.push(Bound { store, cache: vec![None; store.len()], trainable });
        StoreId(self.stores.len() - 1)
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = self.grad && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn saving(&self, parents: &[Var]) -> bool {
        self.grad && parents.iter().any(|p| self.nodes[p.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match self.nodes[v.0].op {
            Op::Param { store, id } => self.stores[store].store.by_id(id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Input, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, s: StoreId, name: &str) -> Var {
        let b = &self.stores[s.0];
        let id = b.store.id(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        if let Some(v) = b.cache[id] {
            return v;
        }
        let needs_grad = self.grad && b.trainable[id];
        self.nodes.push(Node { value: Tensor { shape: Vec::new(), data: Vec::new() }, op: Op::Param { store: s.0, id }, needs_grad });
        let v = Var(self.nodes.len() - 1);
        self.stores[s.0].cache[id] = Some(v);
        v
    }

    /// `x @ w + b` over the trailing dimension of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (k, n) = (wv.shape[0], wv.shape[1]);
        assert_eq!(xv.cols(), k, "linear input width");
        let r = xv.rows();
        let mut out = vec![T::zero(); r * n];
        if let Some(b) = b {
            let bv = &self.value(b).data;
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bv);
            }
            T::gemm(r, k, n, &xv.data, false, &wv.data, false, T::one(), &mut out);
        } else {
            T::gemm(r, k, n, &xv.data, false, &wv.data, false, T::zero(), &mut out);
        }
        let mut shape = xv.shape.clone();
        *shape.last_mut().unwrap() = n;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(Tensor::new(&shape, out), Op::Linear { x, w, b }, &parents)
    }

    /// Convenience: `linear` with parameters `{prefix}.w` and `{prefix}.b`.
    pub fn dense(&mut self, s: StoreId, prefix: &str, x: Var) -> Var {
        let w = self.param(s, &format!("{prefix}.w"));
        let b = self.param(s, &format!("{prefix}.b"));
        self.linear(x, w, Some(b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.data.len(), bv.data.len(), "add shape mismatch {:?} vs {:?}", av.shape, bv.shape);
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| *x + *y).collect();
        let shape = av.shape.clone();
        self.push(Tensor::new(&shape, data), Op::Add(a, b), &[a, b])
    }

    pub fn act(&mut self, x: Var, kind: Activation) -> Var {
        let xv = self.value(x);
        let data = xv.data.iter().map(|&v| act_fwd(kind, v)).collect();
        let shape = xv.shape.clone();
        self.push(Tensor::new(&shape, data), Op::Act { x, kind }, &[x])
    }

    /// Layer normalisation over the trailing dimension, optionally affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let r = xv.rows();
        let eps = T::lit(1e-5);
        let inv_d = T::lit(1.0 / d as f64);
        let mut xhat = vec![T::zero(); r * d];
        let mut rstd = vec![T::zero(); r];
        for i in 0..r {
            let row = &xv.data[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..d {
                xhat[i * d + j] = (row[j] - mean) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gamma {
            let gv = &self.value(g).data;
            for row in out.chunks_mut(d) {
                for (o, gj) in row.iter_mut().zip(gv) {
                    *o *= *gj;
                }
            }
        }
        if let Some(b) = beta {
            let bv = &self.value(b).data;
            for row in out.chunks_mut(d) {
                for (o, bj) in row.iter_mut().zip(bv) {
                    *o += *bj;
                }
            }
        }
        let shape = xv.shape.clone();
        let mut parents = vec![x];
        parents.extend(gamma);
        parents.extend(beta);
        let save = self.saving(&parents);
        let (xhat, rstd) = if save { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        self.push(Tensor::new(&shape, out), Op::LayerNorm { x, gamma, beta, xhat, rstd }, &parents)
    }

    /// `x * (1 + scale) + shift` where `shift`/`scale` are `[B, D]` and `x` is
    /// `[B * group, D]`.
    pub fn modulate(&mut self, x: Var, shift: Var, scale: Var, group: usize) -> Var {
        let (xv, sh, sc) = (self.value(x), self.value(shift), self.value(scale));
        let d = xv.cols();
        let mut out = xv.data.clone();
        for (r, row) in out.chunks_mut(d).enumerate() {
            let b = r / group;
            let (shr, scr) = (&sh.data[b * d..(b + 1) * d], &sc.data[b * d..(b + 1) * d]);
            for j in 0..d {
                row[j] = row[j] * (T::one() + scr[j]) + shr[j];
            }
        }
        let shape = xv.shape.clone();
        self.push(Tensor::new(&shape, out), Op::Modulate { x, shift, scale, group }, &[x, shift, scale])
    }

    /// `x + gate * h` with `gate` `[B, D]` broadcast over groups of rows.
    pub fn gated_add(&mut self, x: Var, h: Var, gate: Var, group: usize) -> Var {
        let (xv, hv, gv) = (self.value(x), self.value(h), self.value(gate));
        let d = xv.cols();
        let mut out = xv.data.clone();
        for (r, row) in out.chunks_mut(d).enumerate() {
            let b = r / group;
            let g = &gv.data[b * d..(b + 1) * d];
            let hr = &hv.data[r * d..(r + 1) * d];
            for j in 0..d {
                row[j] += g[j] * hr[j];
            }
        }
        let shape = xv.shape.clone();
        self.push(Tensor::new(&shape, out), Op::GatedAdd { x, h, gate, group }, &[x, h, gate])
    }

    /// Full (non-causal) multi-head self-attention over sequences of length
    /// `seq`. `qkv` is `[B * seq, 3 * D]` laid out as `[q | k | v]`.
    pub fn attention(&mut self, qkv: Var, seq: usize, heads: usize) -> Var {
        let v = self.value(qkv);
        let d3 = v.cols();
        let d = d3 / 3;
        let dh = d / heads;
        let batch = v.rows() / seq;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut out = vec![T::zero(); batch * seq * d];
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut scores = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..seq {
                    let q = &v.data[(b * seq + i) * d3 + h * dh..][..dh];
                    let mut mx = T::neg_infinity();
                    for j in 0..seq {
                        let k = &v.data[(b * seq + j) * d3 + d + h * dh..][..dh];
                        let s = q.iter().zip(k).map(|(a, c)| *a * *c).sum::<T>() * scale;
                        scores[j] = s;
                        mx = mx.max(s);
                    }
                    let mut z = T::zero();
                    for s in scores.iter_mut() {
                        *s = (*s - mx).exp();
                        z += *s;
                    }
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    for j in 0..seq {
                        p[j] = scores[j] / z;
                    }
                    let o = &mut out[(b * seq + i) * d + h * dh..][..dh];
                    for j in 0..seq {
                        let vv = &v.data[(b * seq + j) * d3 + 2 * d + h * dh..][..dh];
                        let pj = p[j];
                        for (oo, x) in o.iter_mut().zip(vv) {
                            *oo += pj * *x;
                        }
                    }
                }
            }
        }
        let probs = if self.saving(&[qkv]) { probs } else { Vec::new() };
        self.push(Tensor::new(&[batch * seq, d], out), Op::Attention { qkv, seq, heads, probs }, &[qkv])
    }

    /// Convolution of `x` `[B, C, H, W]` with `w` `[O, C*k*k]` and bias `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let xv = self.value(x);
        let batch = xv.data.len() / (geom.in_c * geom.in_h * geom.in_w);
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let hw = oh * ow;
        let patch = geom.patch();
        let save = self.saving(&[x, w, b]);
        let wv = &self.value(w).data;
        let bv = &self.value(b).data;
        let in_sz = geom.in_c * geom.in_h * geom.in_w;
        let mut out = vec![T::zero(); batch * geom.out_c * hw];
        let mut saved = if save { vec![T::zero(); batch * patch * hw] } else { Vec::new() };
        let mut scratch = vec![T::zero(); patch * hw];
        for s in 0..batch {
            let cols: &mut [T] = if save { &mut saved[s * patch * hw..(s + 1) * patch * hw] } else { &mut scratch };
            geom.im2col(&xv.data[s * in_sz..(s + 1) * in_sz], cols);
            let o = &mut out[s * geom.out_c * hw..(s + 1) * geom.out_c * hw];
            for (c, row) in o.chunks_mut(hw).enumerate() {
                row.iter_mut().for_each(|v| *v = bv[c]);
            }
            T::gemm(geom.out_c, patch, hw, wv, false, cols, false, T::one(), o);
        }
        self.push(Tensor::new(&[batch, geom.out_c, oh, ow], out), Op::Conv2d { x, w, b, geom, cols: saved }, &[x, w, b])
    }

    /// Per-channel softmax over spatial positions followed by expected image
    /// coordinates in `[-1, 1]`. Output `[B, 2C]` as `(x_0, y_0, x_1, y_1, ...)`.
    pub fn spatial_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (batch, channels, height, width) = (xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
        let hw = height * width;
        let mut probs = vec![T::zero(); batch * channels * hw];
        let mut out = vec![T::zero(); batch * channels * 2];
        let (px, py) = coord_grids::<T>(height, width);
        for bc in 0..batch * channels {
            let src = &xv.data[bc * hw..(bc + 1) * hw];
            let mx = src.iter().copied().fold(T::neg_infinity(), T::max);
            let p = &mut probs[bc * hw..(bc + 1) * hw];
            let mut z = T::zero();
            for (pi, s) in p.iter_mut().zip(src) {
                *pi = (*s - mx).exp();
                z += *pi;
            }
            let (mut ex, mut ey) = (T::zero(), T::zero());
            for k in 0..hw {
                p[k] = p[k] / z;
                ex += p[k] * px[k];
                ey += p[k] * py[k];
            }
            out[bc * 2] = ex;
            out[bc * 2 + 1] = ey;
        }
        let probs = if self.saving(&[x]) { probs } else { Vec::new() };
        self.push(Tensor::new(&[batch, channels * 2], out), Op::SpatialSoftmax { x, channels, height, width, probs }, &[x])
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let d = tv.cols();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < tv.rows(), "embedding id {i} out of range");
            out.extend_from_slice(&tv.data[i * d..(i + 1) * d]);
        }
        self.push(Tensor::new(&[ids.len(), d], out), Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    /// Concatenation of 2-D tensors along the trailing dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); rows * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(*p);
            assert_eq!(pv.rows(), rows, "concat row mismatch");
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&pv.data[r * w..(r + 1) * w]);
            }
            off += w;
        }
        self.push(Tensor::new(&[rows, total], out), Op::Concat { parts: parts.to_vec() }, parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        assert!(start + len <= c);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv.data[i * c + start..i * c + start + len]);
        }
        self.push(Tensor::new(&[r, len], out), Op::SliceCols { x, start }, &[x])
    }

    /// `[B, D] -> [B * times, D]`, each row repeated `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let xv = self.value(x);
        let (r, d) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(r * times * d);
        for i in 0..r {
            for _ in 0..times {
                out.extend_from_slice(&xv.data[i * d..(i + 1) * d]);
            }
        }
        self.push(Tensor::new(&[r * times, d], out), Op::RepeatRows { x, times }, &[x])
    }

    /// `x [B * K, D] + tile [K, D]` broadcast over `B`.
    pub fn tile_add(&mut self, x: Var, tile: Var) -> Var {
        let (xv, tv) = (self.value(x), self.value(tile));
        let n = tv.data.len();
        assert_eq!(xv.data.len() % n, 0);
        let data = xv.data.iter().enumerate().map(|(i, v)| *v + tv.data[i % n]).collect();
        let shape = xv.shape.clone();
        self.push(Tensor::new(&shape, data), Op::TileAdd { x, tile }, &[x, tile])
    }

    /// Elementwise max over consecutive groups of `group` rows: `[R, C] -> [R / group, C]`.
    /// Ties resolve to the first row of the group.
    pub fn group_max(&mut self, x: Var, group: usize) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        assert_eq!(r % group, 0, "row count {r} not divisible by group {group}");
        let g = r / group;
        let mut out = vec![T::neg_infinity(); g * c];
        let mut arg = vec![0u32; g * c];
        for gi in 0..g {
            for m in 0..group {
                let row = gi * group + m;
                for j in 0..c {
                    let v = xv.data[row * c + j];
                    if v > out[gi * c + j] {
                        out[gi * c + j] = v;
                        arg[gi * c + j] = row as u32;
                    }
                }
            }
        }
        let arg = if self.saving(&[x]) { arg } else { Vec::new() };
        self.push(Tensor::new(&[g, c], out), Op::GroupMax { x, group, argmax: arg }, &[x])
    }

    /// Mean of squared errors over rows whose mask entry is true.
    pub fn masked_mse(&mut self, pred: Var, target: &[T], mask: &[bool]) -> Var {
        let pv = self.value(pred);
        let a = pv.cols();
        assert_eq!(pv.data.len(), target.len());
        assert_eq!(mask.len(), pv.rows());
        let count = mask.iter().filter(|m| **m).count();
        assert!(count > 0, "masked_mse with every row masked");
        let mut acc = T::zero();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                for j in 0..a {
                    let e = pv.data[r * a + j] - target[r * a + j];
                    acc += e * e;
                }
            }
        }
        let loss = acc / T::lit((count * a) as f64);
        self.push(Tensor::new(&[1], vec![loss]), Op::MaskedMse { pred, target: target.to_vec(), mask: mask.to_vec(), count }, &[pred])
    }

    /// Reverse pass from a scalar. Returns gradients per bound store, in bind order.
    pub fn backward(&self, loss: Var) -> Vec<Gradients<T>> {
        assert!(self.grad, "backward on a graph built without gradients");
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one(); self.value(loss).numel()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            if matches!(node.op, Op::Param { .. }) {
                grads[i] = Some(dy);
                continue;
            }
            self.backward_op(i, &dy, &mut grads);
        }
        let mut out: Vec<Gradients<T>> = self.stores.iter().map(|b| Gradients::empty(b.store.len())).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param { store, id } = node.op {
                if let Some(g) = grads[i].take() {
                    let shape = self.stores[store].store.by_id(id).shape.clone();
                    out[store].grads[id] = Some(Tensor::new(&shape, g));
                }
            }
        }
        out
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_op(&self, i: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        match &self.nodes[i].op {
            Op::Input | Op::Param { .. } => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (k, n) = (wv.shape[0], wv.shape[1]);
                let r = xv.rows();
                if self.ng(*x) {
                    let dx = accumulate(grads, *x, r * k);
                    T::gemm(r, n, k, dy, false, &wv.data, true, T::one(), dx);
                }
                if self.ng(*w) {
                    let dw = accumulate(grads, *w, k * n);
                    T::gemm(k, r, n, &xv.data, true, dy, false, T::one(), dw);
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let db = accumulate(grads, *b, n);
                        for row in dy.chunks(n) {
                            for (d, g) in db.iter_mut().zip(row) {
                                *d += *g;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for p in [a, b] {
                    if self.ng(*p) {
                        let d = accumulate(grads, *p, dy.len());
                        for (d, g) in d.iter_mut().zip(dy) {
                            *d += *g;
                        }
                    }
                }
            }
            Op::Act { x, kind } => {
                if self.ng(*x) {
                    let xv = &self.value(*x).data;
                    let dx = accumulate(grads, *x, dy.len());
                    for ((d, g), xi) in dx.iter_mut().zip(dy).zip(xv) {
                        *d += *g * act_grad(*kind, *xi);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.value(*x).cols();
                let r = rstd.len();
                if let Some(g) = gamma {
                    if self.ng(*g) {
                        let dg = accumulate(grads, *g, d);
                        for row in 0..r {
                            for j in 0..d {
                                dg[j] += dy[row * d + j] * xhat[row * d + j];
                            }
                        }
                    }
                }
                if let Some(b) = beta {
                    if self.ng(*b) {
                        let db = accumulate(grads, *b, d);
                        for row in dy.chunks(d) {
                            for (o, g) in db.iter_mut().zip(row) {
                                *o += *g;
                            }
                        }
                    }
                }
                if self.ng(*x) {
                    let gv = gamma.map(|g| self.value(g).data.clone());
                    let inv_d = T::lit(1.0 / d as f64);
                    let dx = accumulate(grads, *x, r * d);
                    let mut dxh = vec![T::zero(); d];
                    for row in 0..r {
                        for j in 0..d {
                            dxh[j] = dy[row * d + j] * gv.as_ref().map_or(T::one(), |g| g[j]);
                        }
                        let xh = &xhat[row * d..(row + 1) * d];
                        let m1 = dxh.iter().copied().sum::<T>() * inv_d;
                        let m2 = dxh.iter().zip(xh).map(|(a, b)| *a * *b).sum::<T>() * inv_d;
                        for j in 0..d {
                            dx[row * d + j] += rstd[row] * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                }
            }
            Op::Modulate { x, shift, scale, group } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let scv = &self.value(*scale).data;
                if self.ng(*x) {
                    let dx = accumulate(grads, *x, dy.len());
                    for (r, row) in dy.chunks(d).enumerate() {
                        let b = r / group;
                        for j in 0..d {
                            dx[r * d + j] += row[j] * (T::one() + scv[b * d + j]);
                        }
                    }
                }
                if self.ng(*scale) {
                    let ds = accumulate(grads, *scale, scv.len());
                    for (r, row) in dy.chunks(d).enumerate() {
                        let b = r / group;
                        for j in 0..d {
                            ds[b * d + j] += row[j] * xv.data[r * d + j];
                        }
                    }
                }
                if self.ng(*shift) {
                    let dsh = accumulate(grads, *shift, scv.len());
                    for (r, row) in dy.chunks(d).enumerate() {
                        let b = r / group;
                        for j in 0..d {
                            dsh[b * d + j] += row[j];
                        }
                    }
                }
            }
            Op::GatedAdd { x, h, gate, group } => {
                let d = self.value(*x).cols();
                let gv = &self.value(*gate).data;
                if self.ng(*x) {
                    let dx = accumulate(grads, *x, dy.len());
                    for (a, b) in dx.iter_mut().zip(dy) {
                        *a += *b;
                    }
                }
                if self.ng(*h) {
                    let dh = accumulate(grads, *h, dy.len());
                    for (r, row) in dy.chunks(d).enumerate() {
                        let b = r / group;
                        for j in 0..d {
                            dh[r * d + j] += row[j] * gv[b * d + j];
                        }
                    }
                }
                if self.ng(*gate) {
                    let hv = &self.value(*h).data;
                    let dg = accumulate(grads, *gate, gv.len());
                    for (r, row) in dy.chunks(d).enumerate() {
                        let b = r / group;
                        for j in 0..d {
                            dg[b * d + j] += row[j] * hv[r * d + j];
                        }
                    }
                }
            }
            Op::Attention { qkv, seq, heads, probs } => {
                if !self.ng(*qkv) {
                    return;
                }
                let (seq, heads) = (*seq, *heads);
                let v = self.value(*qkv);
                let d3 = v.cols();
                let d = d3 / 3;
                let dh = d / heads;
                let batch = v.rows() / seq;
                let scale = T::lit(1.0 / (dh as f64).sqrt());
                let dq = accumulate(grads, *qkv, v.data.len());
                let mut dp = vec![T::zero(); seq];
                for b in 0..batch {
                    for h in 0..heads {
                        for i in 0..seq {
                            let p = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                            let dout = &dy[(b * seq + i) * d + h * dh..][..dh];
                            for j in 0..seq {
                                let vrow = (b * seq + j) * d3 + 2 * d + h * dh;
                                let mut s = T::zero();
                                for e in 0..dh {
                                    s += dout[e] * v.data[vrow + e];
                                    dq[vrow + e] += p[j] * dout[e];
                                }
                                dp[j] = s;
                            }
                            let dot = p.iter().zip(&dp).map(|(a, b)| *a * *b).sum::<T>();
                            let qrow = (b * seq + i) * d3 + h * dh;
                            for j in 0..seq {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                let krow = (b * seq + j) * d3 + d + h * dh;
                                for e in 0..dh {
                                    dq[qrow + e] += ds * v.data[krow + e];
                                    dq[krow + e] += ds * v.data[qrow + e];
                                }
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (oh, ow) = (geom.out_h(), geom.out_w());
                let hw = oh * ow;
                let patch = geom.patch();
                let out_sz = geom.out_c * hw;
                let batch = dy.len() / out_sz;
                if self.ng(*b) {
                    let db = accumulate(grads, *b, geom.out_c);
                    for s in 0..batch {
                        for c in 0..geom.out_c {
                            db[c] += dy[s * out_sz + c * hw..s * out_sz + (c + 1) * hw].iter().copied().sum::<T>();
                        }
                    }
                }
                if self.ng(*w) {
                    let dw = accumulate(grads, *w, geom.out_c * patch);
                    for s in 0..batch {
                        T::gemm(
                            geom.out_c,
                            hw,
                            patch,
                            &dy[s * out_sz..(s + 1) * out_sz],
                            false,
                            &cols[s * patch * hw..(s + 1) * patch * hw],
                            true,
                            T::one(),
                            dw,
                        );
                    }
                }
                if self.ng(*x) {
                    let wv = self.value(*w).data.clone();
                    let in_sz = geom.in_c * geom.in_h * geom.in_w;
                    let dx = accumulate(grads, *x, batch * in_sz);
                    let mut dcols = vec![T::zero(); patch * hw];
                    for s in 0..batch {
                        T::gemm(patch, geom.out_c, hw, &wv, true, &dy[s * out_sz..(s + 1) * out_sz], false, T::zero(), &mut dcols);
                        geom.col2im(&dcols, &mut dx[s * in_sz..(s + 1) * in_sz]);
                    }
                }
            }
            Op::SpatialSoftmax { x, channels, height, width, probs } => {
                if !self.ng(*x) {
                    return;
                }
                let hw = height * width;
                let (px, py) = coord_grids::<T>(*height, *width);
                let n = probs.len() / hw;
                let out = &self.nodes[i].value.data;
                debug_assert_eq!(n, out.len() / 2);
                let _ = channels;
                let dx = accumulate(grads, *x, probs.len());
                for bc in 0..n {
                    let (gx, gy) = (dy[bc * 2], dy[bc * 2 + 1]);
                    let (ex, ey) = (out[bc * 2], out[bc * 2 + 1]);
                    let p = &probs[bc * hw..(bc + 1) * hw];
                    for k in 0..hw {
                        dx[bc * hw + k] += p[k] * (gx * (px[k] - ex) + gy * (py[k] - ey));
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.ng(*table) {
                    let tv = self.value(*table);
                    let d = tv.cols();
                    let dt = accumulate(grads, *table, tv.data.len());
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += dy[r * d + j];
                        }
                    }
                }
            }
            Op::Concat { parts } => {
                let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
                let total: usize = widths.iter().sum();
                let rows = dy.len() / total;
                let mut off = 0;
                for (p, &w) in parts.iter().zip(&widths) {
                    if self.ng(*p) {
                        let dp = accumulate(grads, *p, rows * w);
                        for r in 0..rows {
                            for j in 0..w {
                                dp[r * w + j] += dy[r * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                if self.ng(*x) {
                    let xv = self.value(*x);
                    let (r, c) = (xv.rows(), xv.cols());
                    let len = dy.len() / r;
                    let dx = accumulate(grads, *x, r * c);
                    for i in 0..r {
                        for j in 0..len {
                            dx[i * c + start + j] += dy[i * len + j];
                        }
                    }
                }
            }
            Op::RepeatRows { x, times } => {
                if self.ng(*x) {
                    let xv = self.value(*x);
                    let d = xv.cols();
                    let dx = accumulate(grads, *x, xv.data.len());
                    for (r, row) in dy.chunks(d).enumerate() {
                        let src = r / times;
                        for j in 0..d {
                            dx[src * d + j] += row[j];
                        }
                    }
                }
            }
            Op::TileAdd { x, tile } => {
                if self.ng(*x) {
                    let dx = accumulate(grads, *x, dy.len());
                    for (a, b) in dx.iter_mut().zip(dy) {
                        *a += *b;
                    }
                }
                if self.ng(*tile) {
                    let n = self.value(*tile).data.len();
                    let dt = accumulate(grads, *tile, n);
                    for (k, g) in dy.iter().enumerate() {
                        dt[k % n] += *g;
                    }
                }
            }
            Op::GroupMax { x, group, argmax } => {
                let _ = group;
                if self.ng(*x) {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let dx = accumulate(grads, *x, xv.data.len());
                    for (k, &row) in argmax.iter().enumerate() {
                        dx[row as usize * c + k % c] += dy[k];
                    }
                }
            }
            Op::MaskedMse { pred, target, mask, count } => {
                if self.ng(*pred) {
                    let pv = self.value(*pred);
                    let a = pv.cols();
                    let s = dy[0] * T::lit(2.0 / (*count * a) as f64);
                    let dp = accumulate(grads, *pred, pv.data.len());
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            for j in 0..a {
                                dp[r * a + j] += s * (pv.data[r * a + j] - target[r * a + j]);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Pixel-centre coordinates in `[-1, 1]`, row-major over `height x width`.
fn coord_grids<T: Real>(height: usize, width: usize) -> (Vec<T>, Vec<T>) {
    let lin = |i: usize, n: usize| T::lit(if n > 1 { -1.0 + 2.0 * i as f64 / (n - 1) as f64 } else { 0.0 });
    let mut px = Vec::with_capacity(height * width);
    let mut py = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            px.push(lin(c, width));
            py.push(lin(r, height));
        }
    }
    (px, py)
}
