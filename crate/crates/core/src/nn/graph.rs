//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass. Nodes
//! are appended in evaluation order, so walking the tape backwards visits each
//! node after all of its consumers. Spatial tensors use the channels-last
//! layout `[batch, height, width, channels]`.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Kernel geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl Conv2dSpec {
    /// Square kernel, unit stride, "same" padding.
    pub fn same(k: usize) -> Self {
        Conv2dSpec {
            kh: k,
            kw: k,
            sh: 1,
            sw: 1,
            ph: k / 2,
            pw: k / 2,
        }
    }

    pub fn strided(k: usize, stride: usize) -> Self {
        Conv2dSpec {
            sh: stride,
            sw: stride,
            ..Conv2dSpec::same(k)
        }
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        assert!(
            h + 2 * self.ph >= self.kh && w + 2 * self.pw >= self.kw,
            "convolution kernel larger than padded input"
        );
        (
            (h + 2 * self.ph - self.kh) / self.sh + 1,
            (w + 2 * self.pw - self.kw) / self.sw + 1,
        )
    }
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
        cols: Vec<f32>,
    },
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Silu(Var),
    Square(Var),
    Scale(Var, f32),
    SumAll(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    AvgPool {
        x: Var,
        kh: usize,
        kw: usize,
    },
    Upsample {
        x: Var,
        fh: usize,
        fw: usize,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// One forward pass worth of recorded operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of a scalar with respect to every node of a graph.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f32>>>,
    params: Vec<(ParamId, Var)>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    /// Gradients of all parameters that took part in the forward pass.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f32])> + '_ {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].as_deref().map(|g| (id, g)))
    }
}

/// `C = alpha * A·B + beta * C` with explicit strides on `A` and `B`; `C` is
/// dense row-major `m × n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe in-bounds views of `a` and `b`, and `c`
    // holds at least m*n elements; all callers construct them from shapes
    // checked against the slice lengths.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const ROW: fn(usize) -> (usize, usize) = |cols| (cols, 1);
const TRANS: fn(usize) -> (usize, usize) = |cols| (1, cols);

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(a.len(), b.len(), "broadcast needs equal ranks: {a:?} vs {b:?}");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(
                x == y || x == 1 || y == 1,
                "incompatible broadcast {a:?} vs {b:?}"
            );
            x.max(y)
        })
        .collect()
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Visit every output element with the matching offsets into both inputs.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob, mut o) = (0usize, 0usize, 0usize);
    for _ in 0..outer {
        for j in 0..inner {
            f(o, oa + j * ia, ob + j * ib);
            o += 1;
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    /// Bring a parameter into the graph. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    /// `x · w + b` over the trailing axis of `x`; `w` is `[k, n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape();
        assert_eq!(ws.len(), 2, "linear weight must be 2-D");
        let (k, n) = (ws[0], ws[1]);
        assert_eq!(*xs.last().unwrap(), k, "linear input width {xs:?} vs weight {ws:?}");
        let m = self.value(x).len() / k;
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), n);
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            m,
            k,
            n,
            1.0,
            self.value(x).data(),
            ROW(k),
            self.value(w).data(),
            ROW(n),
            if b.is_some() { 1.0 } else { 0.0 },
            &mut out,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(shape, out), Op::Linear { x, w, b })
    }

    /// 2-D convolution of `x: [n, h, w, c]` with `w: [kh*kw*c, c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be [n, h, w, c]");
        let (n, h, wd, c) = (xs[0], xs[1], xs[2], xs[3]);
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws[0], spec.kh * spec.kw * c, "conv2d weight rows");
        let cout = ws[1];
        let (ho, wo) = spec.out_dims(h, wd);
        let kcols = spec.kh * spec.kw * c;
        let rows = n * ho * wo;
        let mut cols = vec![0.0f32; rows * kcols];
        let xd = self.value(x).data();
        for b_i in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let r = (b_i * ho + oy) * wo + ox;
                    let dst = &mut cols[r * kcols..(r + 1) * kcols];
                    for dy in 0..spec.kh {
                        let iy = (oy * spec.sh + dy) as isize - spec.ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx in 0..spec.kw {
                            let ix = (ox * spec.sw + dx) as isize - spec.pw as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let src = ((b_i * h + iy as usize) * wd + ix as usize) * c;
                            let off = (dy * spec.kw + dx) * c;
                            dst[off..off + c].copy_from_slice(&xd[src..src + c]);
                        }
                    }
                }
            }
        }
        let mut out = vec![0.0; rows * cout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(cout) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            rows,
            kcols,
            cout,
            1.0,
            &cols,
            ROW(kcols),
            self.value(w).data(),
            ROW(cout),
            if b.is_some() { 1.0 } else { 0.0 },
            &mut out,
        );
        self.push(
            Tensor::new(vec![n, ho, wo, cout], out),
            Op::Conv2d {
                x,
                w,
                b,
                spec,
                cols,
            },
        )
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let f = |x: f32, y: f32| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let out = if sa == sb {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            let data = da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(sa.to_vec(), data)
        } else {
            let shape = broadcast_shape(sa, sb);
            let (ta, tb) = (broadcast_strides(sa, &shape), broadcast_strides(sb, &shape));
            let (da, db) = (self.value(a).data(), self.value(b).data());
            let mut data = vec![0.0; shape.iter().product()];
            for_each_broadcast(&shape, &ta, &tb, |o, ia, ib| data[o] = f(da[ia], db[ib]));
            Tensor::new(shape, data)
        };
        self.push(out, Op::Binary { kind, a, b })
    }

    /// Elementwise sum with size-1 broadcasting on equal-rank operands.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * sigmoid(v)).collect();
        let out = Tensor::new(t.shape().to_vec(), data);
        self.push(out, Op::Silu(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * v).collect());
        self.push(out, Op::Square(x))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * s).collect());
        self.push(out, Op::Scale(x, s))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        // f64 accumulation keeps large reductions stable
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f32)
    }

    /// Group normalization over `[n, ..., c]` with per-channel affine terms.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f32) -> Var {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let n = shape[0];
        let c = *shape.last().unwrap();
        assert!(groups > 0 && c.is_multiple_of(groups), "channels {c} not divisible by {groups} groups");
        let p = t.len() / (n * c);
        let cg = c / groups;
        let m = (p * cg) as f64;
        let xd = t.data();
        let (g_d, b_d) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0f32; xd.len()];
        let mut out = vec![0.0f32; xd.len()];
        let mut rstd = vec![0.0f32; n * groups];
        for b_i in 0..n {
            let base = b_i * p * c;
            for g in 0..groups {
                let (mut sum, mut sq) = (0.0f64, 0.0f64);
                for pos in 0..p {
                    for ch in g * cg..(g + 1) * cg {
                        let v = xd[base + pos * c + ch] as f64;
                        sum += v;
                        sq += v * v;
                    }
                }
                let mean = sum / m;
                let var = (sq / m - mean * mean).max(0.0);
                let r = 1.0 / (var + eps as f64).sqrt();
                rstd[b_i * groups + g] = r as f32;
                for pos in 0..p {
                    for ch in g * cg..(g + 1) * cg {
                        let i = base + pos * c + ch;
                        let xh = ((xd[i] as f64 - mean) * r) as f32;
                        xhat[i] = xh;
                        out[i] = xh * g_d[ch] + b_d[ch];
                    }
                }
            }
        }
        self.push(
            Tensor::new(shape, out),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
        )
    }

    /// Non-overlapping average pooling of `[n, h, w, c]` by `kh × kw`.
    pub fn avg_pool2d(&mut self, x: Var, kh: usize, kw: usize) -> Var {
        let t = self.value(x);
        let s = t.shape();
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        assert!(h % kh == 0 && w % kw == 0, "pooling {kh}x{kw} does not divide {h}x{w}");
        let (ho, wo) = (h / kh, w / kw);
        let xd = t.data();
        let inv = 1.0 / (kh * kw) as f32;
        let mut out = vec![0.0f32; n * ho * wo * c];
        for b_i in 0..n {
            for y in 0..h {
                for xw in 0..w {
                    let src = ((b_i * h + y) * w + xw) * c;
                    let dst = ((b_i * ho + y / kh) * wo + xw / kw) * c;
                    for ch in 0..c {
                        out[dst + ch] += xd[src + ch] * inv;
                    }
                }
            }
        }
        self.push(Tensor::new(vec![n, ho, wo, c], out), Op::AvgPool { x, kh, kw })
    }

    /// Nearest-neighbour upsampling of `[n, h, w, c]` by `fh × fw`.
    pub fn upsample2d(&mut self, x: Var, fh: usize, fw: usize) -> Var {
        let t = self.value(x);
        let s = t.shape();
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h * fh, w * fw);
        let xd = t.data();
        let mut out = vec![0.0f32; n * ho * wo * c];
        for b_i in 0..n {
            for y in 0..ho {
                for xw in 0..wo {
                    let src = ((b_i * h + y / fh) * w + xw / fw) * c;
                    let dst = ((b_i * ho + y) * wo + xw) * c;
                    out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                }
            }
        }
        self.push(Tensor::new(vec![n, ho, wo, c], out), Op::Upsample { x, fh, fw })
    }

    /// Concatenate along the trailing axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        assert_eq!(sa[..sa.len() - 1], sb[..sb.len() - 1], "concat leading dims");
        let (ca, cb) = (ta.last_dim(), tb.last_dim());
        let rows = ta.len() / ca;
        let mut out = Vec::with_capacity(ta.len() + tb.len());
        for r in 0..rows {
            out.extend_from_slice(&ta.data()[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&tb.data()[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        self.push(Tensor::new(shape, out), Op::Concat { a, b })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape.to_vec());
        self.push(t, Op::Reshape(x))
    }

    /// Single-head scaled dot-product self-attention over `[batch, len, dim]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Var {
        let s = self.value(q).shape().to_vec();
        assert_eq!(s.len(), 3, "attention inputs must be [batch, len, dim]");
        assert_eq!(self.value(k).shape(), &s[..]);
        assert_eq!(self.value(v).shape(), &s[..]);
        let (b, l, d) = (s[0], s[1], s[2]);
        let scale = 1.0 / (d as f32).sqrt();
        let mut probs = vec![0.0f32; b * l * l];
        let mut out = vec![0.0f32; b * l * d];
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        for bi in 0..b {
            let qs = &qd[bi * l * d..(bi + 1) * l * d];
            let ks = &kd[bi * l * d..(bi + 1) * l * d];
            let vs = &vd[bi * l * d..(bi + 1) * l * d];
            let p = &mut probs[bi * l * l..(bi + 1) * l * l];
            gemm(l, d, l, scale, qs, ROW(d), ks, TRANS(d), 0.0, p);
            for row in p.chunks_exact_mut(l) {
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0;
                for e in row.iter_mut() {
                    *e = (*e - max).exp();
                    sum += *e;
                }
                for e in row.iter_mut() {
                    *e /= sum;
                }
            }
            let o = &mut out[bi * l * d..(bi + 1) * l * d];
            gemm(l, l, d, 1.0, p, ROW(l), vs, ROW(d), 0.0, o);
        }
        self.push(Tensor::new(s, out), Op::Attention { q, k, v, probs })
    }

    /// Reverse-mode sweep from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f32>>], v: Var, len: usize) -> &mut Vec<f32> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant | Op::Param => {}
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (k, n) = (wv.shape()[0], wv.shape()[1]);
                    let m = xv.len() / k;
                    let dx = acc(&mut grads, *x, xv.len());
                    gemm(m, n, k, 1.0, &g, ROW(n), wv.data(), TRANS(n), 1.0, dx);
                    let dw = acc(&mut grads, *w, wv.len());
                    gemm(k, m, n, 1.0, xv.data(), TRANS(k), &g, ROW(n), 1.0, dw);
                    if let Some(b) = b {
                        let db = acc(&mut grads, *b, n);
                        for row in g.chunks_exact(n) {
                            for (d, r) in db.iter_mut().zip(row) {
                                *d += r;
                            }
                        }
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    spec,
                    cols,
                } => {
                    let xs = self.value(*x).shape().to_vec();
                    let (n, h, wd, c) = (xs[0], xs[1], xs[2], xs[3]);
                    let wv = self.value(*w);
                    let (kcols, cout) = (wv.shape()[0], wv.shape()[1]);
                    let os = node.value.shape();
                    let (ho, wo) = (os[1], os[2]);
                    let rows = n * ho * wo;
                    let dw = acc(&mut grads, *w, wv.len());
                    gemm(kcols, rows, cout, 1.0, cols, TRANS(kcols), &g, ROW(cout), 1.0, dw);
                    if let Some(b) = b {
                        let db = acc(&mut grads, *b, cout);
                        for row in g.chunks_exact(cout) {
                            for (d, r) in db.iter_mut().zip(row) {
                                *d += r;
                            }
                        }
                    }
                    let mut dcols = vec![0.0f32; rows * kcols];
                    gemm(rows, cout, kcols, 1.0, &g, ROW(cout), wv.data(), TRANS(cout), 0.0, &mut dcols);
                    let dx = acc(&mut grads, *x, n * h * wd * c);
                    for b_i in 0..n {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let r = (b_i * ho + oy) * wo + ox;
                                let src = &dcols[r * kcols..(r + 1) * kcols];
                                for dy in 0..spec.kh {
                                    let iy = (oy * spec.sh + dy) as isize - spec.ph as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for dx_ in 0..spec.kw {
                                        let ix = (ox * spec.sw + dx_) as isize - spec.pw as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let dst = ((b_i * h + iy as usize) * wd + ix as usize) * c;
                                        let off = (dy * spec.kw + dx_) * c;
                                        for ch in 0..c {
                                            dx[dst + ch] += src[off + ch];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Binary { kind, a, b } => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let out_shape = node.value.shape();
                    let (la, lb) = (ta.len(), tb.len());
                    let mut ga = vec![0.0f32; la];
                    let mut gb = vec![0.0f32; lb];
                    {
                        let (da, db) = (ta.data(), tb.data());
                        let mut visit = |o: usize, ia: usize, ib: usize| match kind {
                            BinaryKind::Add => {
                                ga[ia] += g[o];
                                gb[ib] += g[o];
                            }
                            BinaryKind::Sub => {
                                ga[ia] += g[o];
                                gb[ib] -= g[o];
                            }
                            BinaryKind::Mul => {
                                ga[ia] += g[o] * db[ib];
                                gb[ib] += g[o] * da[ia];
                            }
                        };
                        if ta.shape() == tb.shape() {
                            for o in 0..g.len() {
                                visit(o, o, o);
                            }
                        } else {
                            let sa = broadcast_strides(ta.shape(), out_shape);
                            let sb = broadcast_strides(tb.shape(), out_shape);
                            for_each_broadcast(out_shape, &sa, &sb, visit);
                        }
                    }
                    for (d, v) in acc(&mut grads, *a, la).iter_mut().zip(&ga) {
                        *d += v;
                    }
                    for (d, v) in acc(&mut grads, *b, lb).iter_mut().zip(&gb) {
                        *d += v;
                    }
                }
                Op::Silu(x) => {
                    let xd = self.value(*x).data();
                    let dx = acc(&mut grads, *x, xd.len());
                    for ((d, &v), &gg) in dx.iter_mut().zip(xd).zip(&g) {
                        let s = sigmoid(v);
                        *d += gg * s * (1.0 + v * (1.0 - s));
                    }
                }
                Op::Square(x) => {
                    let xd = self.value(*x).data();
                    let dx = acc(&mut grads, *x, xd.len());
                    for ((d, &v), &gg) in dx.iter_mut().zip(xd).zip(&g) {
                        *d += 2.0 * v * gg;
                    }
                }
                Op::Scale(x, s) => {
                    let dx = acc(&mut grads, *x, g.len());
                    for (d, &gg) in dx.iter_mut().zip(&g) {
                        *d += gg * s;
                    }
                }
                Op::SumAll(x) => {
                    let len = self.value(*x).len();
                    let dx = acc(&mut grads, *x, len);
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    xhat,
                    rstd,
                } => {
                    let shape = node.value.shape();
                    let n = shape[0];
                    let c = *shape.last().unwrap();
                    let p = node.value.len() / (n * c);
                    let cg = c / groups;
                    let m = (p * cg) as f32;
                    let gamma_d = self.value(*gamma).data().to_vec();
                    {
                        let dgamma = acc(&mut grads, *gamma, c);
                        for (i, (&gg, &xh)) in g.iter().zip(xhat).enumerate() {
                            dgamma[i % c] += gg * xh;
                        }
                    }
                    {
                        let dbeta = acc(&mut grads, *beta, c);
                        for (i, &gg) in g.iter().enumerate() {
                            dbeta[i % c] += gg;
                        }
                    }
                    let dx = acc(&mut grads, *x, g.len());
                    for b_i in 0..n {
                        let base = b_i * p * c;
                        for grp in 0..*groups {
                            let r = rstd[b_i * groups + grp];
                            let (mut s1, mut s2) = (0.0f32, 0.0f32);
                            for pos in 0..p {
                                for ch in grp * cg..(grp + 1) * cg {
                                    let i = base + pos * c + ch;
                                    let dxh = g[i] * gamma_d[ch];
                                    s1 += dxh;
                                    s2 += dxh * xhat[i];
                                }
                            }
                            for pos in 0..p {
                                for ch in grp * cg..(grp + 1) * cg {
                                    let i = base + pos * c + ch;
                                    let dxh = g[i] * gamma_d[ch];
                                    dx[i] += r / m * (m * dxh - s1 - xhat[i] * s2);
                                }
                            }
                        }
                    }
                }
                Op::AvgPool { x, kh, kw } => {
                    let xs = self.value(*x).shape().to_vec();
                    let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
                    let (ho, wo) = (h / kh, w / kw);
                    let inv = 1.0 / (kh * kw) as f32;
                    let dx = acc(&mut grads, *x, n * h * w * c);
                    for b_i in 0..n {
                        for y in 0..h {
                            for xw in 0..w {
                                let dst = ((b_i * h + y) * w + xw) * c;
                                let src = ((b_i * ho + y / kh) * wo + xw / kw) * c;
                                for ch in 0..c {
                                    dx[dst + ch] += g[src + ch] * inv;
                                }
                            }
                        }
                    }
                }
                Op::Upsample { x, fh, fw } => {
                    let xs = self.value(*x).shape().to_vec();
                    let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
                    let (ho, wo) = (h * fh, w * fw);
                    let dx = acc(&mut grads, *x, n * h * w * c);
                    for b_i in 0..n {
                        for y in 0..ho {
                            for xw in 0..wo {
                                let dst = ((b_i * h + y / fh) * w + xw / fw) * c;
                                let src = ((b_i * ho + y) * wo + xw) * c;
                                for ch in 0..c {
                                    dx[dst + ch] += g[src + ch];
                                }
                            }
                        }
                    }
                }
                Op::Concat { a, b } => {
                    let (ca, cb) = (self.value(*a).last_dim(), self.value(*b).last_dim());
                    let rows = g.len() / (ca + cb);
                    {
                        let da = acc(&mut grads, *a, rows * ca);
                        for r in 0..rows {
                            for j in 0..ca {
                                da[r * ca + j] += g[r * (ca + cb) + j];
                            }
                        }
                    }
                    let db = acc(&mut grads, *b, rows * cb);
                    for r in 0..rows {
                        for j in 0..cb {
                            db[r * cb + j] += g[r * (ca + cb) + ca + j];
                        }
                    }
                }
                Op::Reshape(x) => {
                    let dx = acc(&mut grads, *x, g.len());
                    for (d, &gg) in dx.iter_mut().zip(&g) {
                        *d += gg;
                    }
                }
                Op::Attention { q, k, v, probs } => {
                    let s = node.value.shape();
                    let (b, l, d) = (s[0], s[1], s[2]);
                    let scale = 1.0 / (d as f32).sqrt();
                    let (qd, kd, vd) = (
                        self.value(*q).data(),
                        self.value(*k).data(),
                        self.value(*v).data(),
                    );
                    let mut dq = vec![0.0f32; b * l * d];
                    let mut dk = vec![0.0f32; b * l * d];
                    let mut dv = vec![0.0f32; b * l * d];
                    let mut dp = vec![0.0f32; l * l];
                    for bi in 0..b {
                        let r = bi * l * d..(bi + 1) * l * d;
                        let p = &probs[bi * l * l..(bi + 1) * l * l];
                        let go = &g[r.clone()];
                        gemm(l, l, d, 1.0, p, TRANS(l), go, ROW(d), 0.0, &mut dv[r.clone()]);
                        gemm(l, d, l, 1.0, go, ROW(d), &vd[r.clone()], TRANS(d), 0.0, &mut dp);
                        for (prow, dprow) in p.chunks_exact(l).zip(dp.chunks_exact_mut(l)) {
                            let dot: f32 = prow.iter().zip(dprow.iter()).map(|(a, b)| a * b).sum();
                            for (e, &pp) in dprow.iter_mut().zip(prow) {
                                *e = pp * (*e - dot);
                            }
                        }
                        gemm(l, l, d, scale, &dp, ROW(l), &kd[r.clone()], ROW(d), 0.0, &mut dq[r.clone()]);
                        gemm(l, l, d, scale, &dp, TRANS(l), &qd[r.clone()], ROW(d), 0.0, &mut dk[r.clone()]);
                    }
                    for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                        let dst = acc(&mut grads, var, buf.len());
                        for (a, b) in dst.iter_mut().zip(&buf) {
                            *a += b;
                        }
                    }
                }
            }
            grads[i] = Some(g);
        }

        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Grads { grads, params }
    }
}
