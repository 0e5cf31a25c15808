use super::array::{Array, Element};
use super::params::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// 1x1, stride 1, no padding: the image itself is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Matmul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Relu(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Softmax(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    AdaptiveAvgPool {
        x: usize,
        out_h: usize,
        out_w: usize,
    },
    UpsampleNearest {
        x: usize,
        factor: usize,
    },
    MaxPool2 {
        x: usize,
        argmax: Vec<u32>,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Expand(usize),
    Reshape(usize),
    Sum(usize),
    CrossEntropyPixels {
        logits: usize,
        probs: Vec<T>,
        targets: Vec<u32>,
    },
    CrossEntropyDist {
        pred: usize,
        target: Vec<T>,
    },
    MaskedFill {
        x: usize,
        mask: Vec<bool>,
    },
}

struct Node<T> {
    value: Array<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records array operations for reverse-mode differentiation.
///
/// A graph borrows the parameter store read-only; parameters enter through
/// [`Graph::param`] and receive gradients from [`Graph::backward`]. Arrays
/// entering through [`Graph::input`] are constants and never receive gradients.
/// With recording off (see [`Graph::no_grad`]) only values are computed.
pub struct Graph<'s, T: Element> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    recording: bool,
}

const SOFTMAX_FLOOR: f64 = 1e-30;

impl<'s, T: Element> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            recording: true,
        }
    }

    pub fn no_grad(store: &'s ParamStore<T>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn value(&self, v: Var) -> &Array<T> {
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

    fn push(&mut self, value: Array<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let needs_grad = self.recording && inputs.iter().any(|&i| self.nodes[i].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Array<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.store.get(id).clone();
        let needs_grad = self.recording;
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    // ---------------------------------------------------------------- ops

    /// `a @ b` for 2-D operands or batched 3-D operands with equal batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T` (last two axes of `b` swapped).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let dims = matmul_dims(&sa, &sb, trans_b)?;
        let MatDims { batch, m, k, n } = dims;
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.nodes[a.0].value.data();
            let bv = self.nodes[b.0].value.data();
            for bi in 0..batch {
                let a_s = &av[bi * m * k..(bi + 1) * m * k];
                let b_s = &bv[bi * k * n..(bi + 1) * k * n];
                let (rsb, csb) = if trans_b {
                    (1, k as isize)
                } else {
                    (n as isize, 1)
                };
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    a_s,
                    k as isize,
                    1,
                    b_s,
                    rsb,
                    csb,
                    T::zero(),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    n as isize,
                    1,
                );
            }
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let value = Array::from_vec(&shape, out)?;
        Ok(self.push(
            value,
            Op::Matmul {
                a: a.0,
                b: b.0,
                trans_b,
            },
            &[a.0, b.0],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Array::from_vec(av.shape(), data)?;
        Ok(self.push(value, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    /// Element-wise product of equally shaped arrays.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Array::from_vec(av.shape(), data)?;
        Ok(self.push(value, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale(x.0, s), &[x.0])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu(x.0), &[x.0])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} for shape {base:?}"),
            ));
        }
        let mut total = 0;
        for x in xs {
            let s = self.shape(*x);
            let ragged = s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b);
            if ragged {
                return Err(Error::shape(
                    "concat",
                    format!("ragged non-axis dims {:?} vs {:?} (axis {axis})", s, base),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for x in xs {
                let v = self.value(*x);
                let block = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Array::from_vec(&shape, out)?;
        let inputs: Vec<usize> = xs.iter().map(|v| v.0).collect();
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.clone(),
                axis,
            },
            &inputs,
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let last = *v
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", "rank 0 input"))?;
        if last == 0 {
            return Err(Error::shape("softmax", "empty last axis"));
        }
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(last) {
            softmax_row(row);
        }
        let value = Array::from_vec(v.shape(), out)?;
        Ok(self.push(value, Op::Softmax(x.0), &[x.0]))
    }

    /// NCHW convolution with zero padding. `w` is `[cout, cin, kh, kw]`,
    /// `b` is `[cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?}, kernel {ws:?}, stride {stride}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {} output channels", self.shape(b), ws[0]),
                ));
            }
        }
        let (h, wd) = (xs[2], xs[3]);
        if h + 2 * pad < ws[2] || wd + 2 * pad < ws[3] {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {ws:?} larger than input {xs:?}"),
            ));
        }
        let geom = ConvGeom {
            n: xs[0],
            cin: xs[1],
            h,
            w: wd,
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            ho: (h + 2 * pad - ws[2]) / stride + 1,
            wo: (wd + 2 * pad - ws[3]) / stride + 1,
        };
        let needs_grad = self.recording
            && [Some(x), Some(w), b]
                .iter()
                .flatten()
                .any(|v| self.nodes[v.0].needs_grad);
        let (k, p) = (geom.k(), geom.p());
        let img = geom.cin * h * wd;
        let mut out = vec![T::zero(); geom.n * geom.cout * p];
        let keep_cols = needs_grad && !geom.is_pointwise();
        let mut cols = if keep_cols {
            vec![T::zero(); geom.n * k * p]
        } else {
            Vec::new()
        };
        let mut scratch = if !keep_cols && !geom.is_pointwise() {
            vec![T::zero(); k * p]
        } else {
            Vec::new()
        };
        {
            let xv = self.nodes[x.0].value.data();
            let wv = self.nodes[w.0].value.data();
            for ni in 0..geom.n {
                let x_n = &xv[ni * img..(ni + 1) * img];
                let cols_n: &[T] = if geom.is_pointwise() {
                    x_n
                } else if keep_cols {
                    let c = &mut cols[ni * k * p..(ni + 1) * k * p];
                    im2col(x_n, &geom, c);
                    c
                } else {
                    im2col(x_n, &geom, &mut scratch);
                    &scratch
                };
                T::gemm(
                    geom.cout,
                    k,
                    p,
                    T::one(),
                    wv,
                    k as isize,
                    1,
                    cols_n,
                    p as isize,
                    1,
                    T::zero(),
                    &mut out[ni * geom.cout * p..(ni + 1) * geom.cout * p],
                    p as isize,
                    1,
                );
            }
            if let Some(b) = b {
                let bv = self.nodes[b.0].value.data();
                for (chunk_idx, chunk) in out.chunks_mut(p).enumerate() {
                    let bias = bv[chunk_idx % geom.cout];
                    chunk.iter_mut().for_each(|o| *o = *o + bias);
                }
            }
        }
        let value = Array::from_vec(&[geom.n, geom.cout, geom.ho, geom.wo], out)?;
        let mut inputs = vec![x.0, w.0];
        inputs.extend(b.map(|v| v.0));
        let op = Op::Conv2d {
            x: x.0,
            w: w.0,
            b: b.map(|v| v.0),
            geom,
            cols,
        };
        Ok(self.push(value, op, &inputs))
    }

    /// Average pooling of NCHW input onto an `out_h x out_w` grid of bins.
    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || out_h == 0 || out_w == 0 || out_h > s[2] || out_w > s[3] {
            return Err(Error::shape(
                "adaptive_avgpool",
                format!("{s:?} -> {out_h}x{out_w}"),
            ));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); nc * out_h * out_w];
        for c in 0..nc {
            let plane = &xv[c * h * w..(c + 1) * h * w];
            for oy in 0..out_h {
                let (y0, y1) = pool_bin(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1) = pool_bin(ox, w, out_w);
                    let mut acc = T::zero();
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            acc = acc + plane[yy * w + xx];
                        }
                    }
                    let count = T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                    out[(c * out_h + oy) * out_w + ox] = acc / count;
                }
            }
        }
        let value = Array::from_vec(&[s[0], s[1], out_h, out_w], out)?;
        Ok(self.push(
            value,
            Op::AdaptiveAvgPool {
                x: x.0,
                out_h,
                out_w,
            },
            &[x.0],
        ))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(Error::shape("upsample_nearest", format!("{s:?} x{factor}")));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(nc * oh * ow);
        for c in 0..nc {
            for y in 0..oh {
                let row = &xv[c * h * w + (y / factor) * w..c * h * w + (y / factor + 1) * w];
                for xx in 0..ow {
                    out.push(row[xx / factor]);
                }
            }
        }
        let value = Array::from_vec(&[s[0], s[1], oh, ow], out)?;
        Ok(self.push(value, Op::UpsampleNearest { x: x.0, factor }, &[x.0]))
    }

    /// 2x2 max pooling with stride 2 on NCHW input with even spatial dims.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::shape("max_pool2", format!("{s:?}")));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(nc * oh * ow);
        let mut argmax = Vec::with_capacity(nc * oh * ow);
        for c in 0..nc {
            let base = c * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let i0 = base + 2 * y * w + 2 * xx;
                    let mut best = i0;
                    for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                        if xv[cand] > xv[best] {
                            best = cand;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Array::from_vec(&[s[0], s[1], oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2 { x: x.0, argmax }, &[x.0]))
    }

    /// `x @ w + b` over the last axis; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let fan_in = *xs
            .last()
            .ok_or_else(|| Error::shape("linear", "rank 0 input"))?;
        if ws.len() != 2 || ws[0] != fan_in {
            return Err(Error::shape(
                "linear",
                format!("input {xs:?}, weight {ws:?}"),
            ));
        }
        let fan_out = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                return Err(Error::shape("linear", format!("bias {:?}", self.shape(b))));
            }
        }
        let rows = self.value(x).len() / fan_in.max(1);
        let mut out = vec![T::zero(); rows * fan_out];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(fan_out) {
                row.copy_from_slice(bv);
            }
        }
        T::gemm(
            rows,
            fan_in,
            fan_out,
            T::one(),
            self.value(x).data(),
            fan_in as isize,
            1,
            self.value(w).data(),
            fan_out as isize,
            1,
            if b.is_some() { T::one() } else { T::zero() },
            &mut out,
            fan_out as isize,
            1,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = fan_out;
        let value = Array::from_vec(&shape, out)?;
        let mut inputs = vec![x.0, w.0];
        inputs.extend(b.map(|v| v.0));
        Ok(self.push(
            value,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|v| v.0),
            },
            &inputs,
        ))
    }

    /// Repeats size-1 axes of `x` up to `shape`; ranks must match.
    pub fn broadcast_expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != shape.len() || s.iter().zip(shape).any(|(&a, &b)| a != b && a != 1) {
            return Err(Error::shape(
                "broadcast_expand",
                format!("{s:?} -> {shape:?}"),
            ));
        }
        let xv = self.value(x).data();
        let total: usize = shape.iter().product();
        let src_strides = broadcast_strides(&s);
        let mut out = Vec::with_capacity(total);
        for_each_index(shape, |idx| {
            let off: usize = idx.iter().zip(&src_strides).map(|(i, st)| i * st).sum();
            out.push(xv[off]);
        });
        let value = Array::from_vec(shape, out)?;
        Ok(self.push(value, Op::Expand(x.0), &[x.0]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x.0), &[x.0]))
    }

    /// Sum of all elements, as a rank-0 array.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Array::scalar(s), Op::Sum(x.0), &[x.0])
    }

    /// Mean pixel-wise cross-entropy of logits `[N, C, ...]` against class ids
    /// laid out as `[N, ...]`.
    pub fn cross_entropy_pixels(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() < 2 {
            return Err(Error::shape(
                "cross_entropy_pixels",
                format!("logits {s:?}"),
            ));
        }
        let (n, c) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        if targets.len() != n * spatial {
            return Err(Error::shape(
                "cross_entropy_pixels",
                format!("logits {s:?} vs {} targets", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape(
                "cross_entropy_pixels",
                format!("class {bad} >= {c}"),
            ));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = 0.0f64;
        let mut row = vec![T::zero(); c];
        for ni in 0..n {
            for sp in 0..spatial {
                for ci in 0..c {
                    row[ci] = lv[(ni * c + ci) * spatial + sp];
                }
                softmax_row(&mut row);
                let t = targets[ni * spatial + sp];
                let p = row[t].to_f64().max(SOFTMAX_FLOOR);
                total -= p.ln();
                for ci in 0..c {
                    probs[(ni * c + ci) * spatial + sp] = row[ci];
                }
            }
        }
        let count = (n * spatial).max(1);
        let value = Array::scalar(T::from_f64(total / count as f64));
        let targets = targets.iter().map(|&t| t as u32).collect();
        Ok(self.push(
            value,
            Op::CrossEntropyPixels {
                logits: logits.0,
                probs,
                targets,
            },
            &[logits.0],
        ))
    }

    /// Mean over rows of `-sum_c target[c] * ln(pred[c])` for probability rows
    /// `pred`, `target` of shape `[N, C]`.
    pub fn cross_entropy_dist(&mut self, pred: Var, target: &Array<T>) -> Result<Var> {
        let s = self.shape(pred).to_vec();
        if s.len() != 2 || target.shape() != s.as_slice() {
            return Err(Error::shape(
                "cross_entropy_dist",
                format!("prediction {s:?} vs target {:?}", target.shape()),
            ));
        }
        let floor = T::from_f64(SOFTMAX_FLOOR);
        let pv = self.value(pred).data();
        let total: T = pv
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                if t == T::zero() {
                    T::zero()
                } else {
                    -t * p.max(floor).ln()
                }
            })
            .sum();
        let value = Array::scalar(total / T::from_f64(s[0].max(1) as f64));
        let target = target.data().to_vec();
        Ok(self.push(
            value,
            Op::CrossEntropyDist {
                pred: pred.0,
                target,
            },
            &[pred.0],
        ))
    }

    /// Keeps `x` where `mask` is true and writes `value` elsewhere.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(Error::shape(
                "masked_fill",
                format!("mask of {} for input {:?}", mask.len(), xv.shape()),
            ));
        }
        let fill = T::from_f64(value);
        let data = xv
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { v } else { fill })
            .collect();
        let out = Array::from_vec(xv.shape(), data)?;
        Ok(self.push(
            out,
            Op::MaskedFill {
                x: x.0,
                mask: mask.to_vec(),
            },
            &[x.0],
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a one-element `loss`; parameters the loss does not
    /// reach get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(Error::NotRecording);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut param_grads: Vec<Array<T>> = self
            .store
            .ids()
            .map(|id| Array::zeros(self.store.get(id).shape()))
            .collect();
        let mut grads: Vec<Option<Array<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Array::full(lv.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads, &mut param_grads);
        }
        Ok(Gradients::new(param_grads))
    }

    fn accumulate(&self, grads: &mut [Option<Array<T>>], target: usize, delta: Array<T>) {
        if !self.nodes[target].needs_grad {
            return;
        }
        match &mut grads[target] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: &Array<T>,
        grads: &mut [Option<Array<T>>],
        param_grads: &mut [Array<T>],
    ) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => param_grads[id.index()].add_assign(g),
            Op::Matmul { a, b, trans_b } => {
                let (a, b, trans_b) = (*a, *b, *trans_b);
                let av = &self.nodes[a].value;
                let bv = &self.nodes[b].value;
                let MatDims { batch, m, k, n } =
                    matmul_dims(av.shape(), bv.shape(), trans_b).expect("checked in forward");
                if self.wants(a) {
                    let mut da = vec![T::zero(); av.len()];
                    for bi in 0..batch {
                        let g_s = &gd[bi * m * n..(bi + 1) * m * n];
                        let b_s = &bv.data()[bi * k * n..(bi + 1) * k * n];
                        // da = g @ b^T (or g @ b when b was transposed)
                        let (rsb, csb) = if trans_b {
                            (k as isize, 1)
                        } else {
                            (1, n as isize)
                        };
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            g_s,
                            n as isize,
                            1,
                            b_s,
                            rsb,
                            csb,
                            T::zero(),
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            k as isize,
                            1,
                        );
                    }
                    self.accumulate(grads, a, Array::from_vec(av.shape(), da).unwrap());
                }
                if self.wants(b) {
                    let mut db = vec![T::zero(); bv.len()];
                    for bi in 0..batch {
                        let g_s = &gd[bi * m * n..(bi + 1) * m * n];
                        let a_s = &av.data()[bi * m * k..(bi + 1) * m * k];
                        let out = &mut db[bi * k * n..(bi + 1) * k * n];
                        if trans_b {
                            // db [n, k] = g^T @ a
                            T::gemm(
                                n,
                                m,
                                k,
                                T::one(),
                                g_s,
                                1,
                                n as isize,
                                a_s,
                                k as isize,
                                1,
                                T::zero(),
                                out,
                                k as isize,
                                1,
                            );
                        } else {
                            // db [k, n] = a^T @ g
                            T::gemm(
                                k,
                                m,
                                n,
                                T::one(),
                                a_s,
                                1,
                                k as isize,
                                g_s,
                                n as isize,
                                1,
                                T::zero(),
                                out,
                                n as isize,
                                1,
                            );
                        }
                    }
                    self.accumulate(grads, b, Array::from_vec(bv.shape(), db).unwrap());
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.wants(*a) {
                    let d = gd.iter().zip(bv.data()).map(|(&g, &y)| g * y).collect();
                    self.accumulate(grads, *a, Array::from_vec(av.shape(), d).unwrap());
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(av.data()).map(|(&g, &x)| g * x).collect();
                    self.accumulate(grads, *b, Array::from_vec(bv.shape(), d).unwrap());
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Relu(x) => {
                let xv = &self.nodes[*x].value;
                let d = gd
                    .iter()
                    .zip(xv.data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Array::from_vec(xv.shape(), d).unwrap());
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut offset = 0;
                let row = shape[*axis] * inner;
                for &inp in inputs {
                    let s = self.nodes[inp].value.shape();
                    let block = s[*axis] * inner;
                    if self.wants(inp) {
                        let mut d = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            d.extend_from_slice(&gd[o * row + offset..o * row + offset + block]);
                        }
                        self.accumulate(grads, inp, Array::from_vec(s, d).unwrap());
                    }
                    offset += block;
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let last = *node.value.shape().last().unwrap();
                let mut d = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in d.chunks_mut(last).zip(y.chunks(last)).zip(gd.chunks(last)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yy * (gg - dot);
                    }
                }
                self.accumulate(grads, *x, Array::from_vec(node.value.shape(), d).unwrap());
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => self.conv_backward(*x, *w, *b, geom, cols, gd, grads),
            Op::AdaptiveAvgPool { x, out_h, out_w } => {
                let s = self.nodes[*x].value.shape();
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let mut d = vec![T::zero(); nc * h * w];
                for c in 0..nc {
                    for oy in 0..*out_h {
                        let (y0, y1) = pool_bin(oy, h, *out_h);
                        for ox in 0..*out_w {
                            let (x0, x1) = pool_bin(ox, w, *out_w);
                            let count = T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                            let share = gd[(c * out_h + oy) * out_w + ox] / count;
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    let cell = &mut d[c * h * w + yy * w + xx];
                                    *cell = *cell + share;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Array::from_vec(s, d).unwrap());
            }
            Op::UpsampleNearest { x, factor } => {
                let s = self.nodes[*x].value.shape();
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h * factor, w * factor);
                let mut d = vec![T::zero(); nc * h * w];
                for c in 0..nc {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let cell = &mut d[c * h * w + (y / factor) * w + xx / factor];
                            *cell = *cell + gd[c * oh * ow + y * ow + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, Array::from_vec(s, d).unwrap());
            }
            Op::MaxPool2 { x, argmax } => {
                let s = self.nodes[*x].value.shape();
                let mut d = vec![T::zero(); self.nodes[*x].value.len()];
                for (&src, &gg) in argmax.iter().zip(gd) {
                    d[src as usize] = d[src as usize] + gg;
                }
                self.accumulate(grads, *x, Array::from_vec(s, d).unwrap());
            }
            Op::Linear { x, w, b } => {
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                let (fan_in, fan_out) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.len() / fan_in.max(1);
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); xv.len()];
                    T::gemm(
                        rows,
                        fan_out,
                        fan_in,
                        T::one(),
                        gd,
                        fan_out as isize,
                        1,
                        wv.data(),
                        1,
                        fan_out as isize,
                        T::zero(),
                        &mut dx,
                        fan_in as isize,
                        1,
                    );
                    self.accumulate(grads, *x, Array::from_vec(xv.shape(), dx).unwrap());
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); wv.len()];
                    T::gemm(
                        fan_in,
                        rows,
                        fan_out,
                        T::one(),
                        xv.data(),
                        1,
                        fan_in as isize,
                        gd,
                        fan_out as isize,
                        1,
                        T::zero(),
                        &mut dw,
                        fan_out as isize,
                        1,
                    );
                    self.accumulate(grads, *w, Array::from_vec(wv.shape(), dw).unwrap());
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); fan_out];
                        for row in gd.chunks(fan_out) {
                            for (o, &gg) in db.iter_mut().zip(row) {
                                *o = *o + gg;
                            }
                        }
                        self.accumulate(grads, *b, Array::from_vec(&[fan_out], db).unwrap());
                    }
                }
            }
            Op::Expand(x) => {
                let s = self.nodes[*x].value.shape();
                let strides = broadcast_strides(s);
                let mut d = vec![T::zero(); self.nodes[*x].value.len()];
                let mut flat = 0;
                for_each_index(node.value.shape(), |idx| {
                    let off: usize = idx.iter().zip(&strides).map(|(i, st)| i * st).sum();
                    d[off] = d[off] + gd[flat];
                    flat += 1;
                });
                self.accumulate(grads, *x, Array::from_vec(s, d).unwrap());
            }
            Op::Reshape(x) => {
                let s = self.nodes[*x].value.shape();
                self.accumulate(grads, *x, g.clone().reshaped(s).unwrap());
            }
            Op::Sum(x) => {
                let s = self.nodes[*x].value.shape();
                self.accumulate(grads, *x, Array::full(s, g.item()));
            }
            Op::CrossEntropyPixels {
                logits,
                probs,
                targets,
            } => {
                let s = self.nodes[*logits].value.shape();
                let (n, c) = (s[0], s[1]);
                let spatial: usize = s[2..].iter().product();
                let scale = g.item() / T::from_f64((n * spatial).max(1) as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for ni in 0..n {
                    for sp in 0..spatial {
                        let t = targets[ni * spatial + sp] as usize;
                        let cell = &mut d[(ni * c + t) * spatial + sp];
                        *cell = *cell - scale;
                    }
                }
                self.accumulate(grads, *logits, Array::from_vec(s, d).unwrap());
            }
            Op::CrossEntropyDist { pred, target } => {
                let pv = &self.nodes[*pred].value;
                let rows = pv.shape()[0].max(1);
                let scale = g.item() / T::from_f64(rows as f64);
                let floor = T::from_f64(SOFTMAX_FLOOR);
                let d = pv
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| if p > floor { -t / p * scale } else { T::zero() })
                    .collect();
                self.accumulate(grads, *pred, Array::from_vec(pv.shape(), d).unwrap());
            }
            Op::MaskedFill { x, mask } => {
                let d = gd
                    .iter()
                    .zip(mask)
                    .map(|(&gg, &m)| if m { gg } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Array::from_vec(node.value.shape(), d).unwrap());
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: &ConvGeom,
        cols: &[T],
        gd: &[T],
        grads: &mut [Option<Array<T>>],
    ) {
        let (k, p) = (geom.k(), geom.p());
        let img = geom.cin * geom.h * geom.w;
        let xv = &self.nodes[x].value;
        let wv = &self.nodes[w].value;
        let out_n = geom.cout * p;
        if self.wants(w) {
            let mut dw = vec![T::zero(); wv.len()];
            for ni in 0..geom.n {
                let cols_n = if geom.is_pointwise() {
                    &xv.data()[ni * img..(ni + 1) * img]
                } else {
                    &cols[ni * k * p..(ni + 1) * k * p]
                };
                // dw [cout, k] += g_n [cout, p] @ cols_n^T
                T::gemm(
                    geom.cout,
                    p,
                    k,
                    T::one(),
                    &gd[ni * out_n..(ni + 1) * out_n],
                    p as isize,
                    1,
                    cols_n,
                    1,
                    p as isize,
                    T::one(),
                    &mut dw,
                    k as isize,
                    1,
                );
            }
            self.accumulate(grads, w, Array::from_vec(wv.shape(), dw).unwrap());
        }
        if let Some(b) = b {
            if self.wants(b) {
                let mut db = vec![T::zero(); geom.cout];
                for (i, chunk) in gd.chunks(p).enumerate() {
                    let s: T = chunk.iter().copied().sum();
                    db[i % geom.cout] = db[i % geom.cout] + s;
                }
                self.accumulate(grads, b, Array::from_vec(&[geom.cout], db).unwrap());
            }
        }
        if self.wants(x) {
            let mut dx = vec![T::zero(); xv.len()];
            let mut dcols = vec![T::zero(); k * p];
            for ni in 0..geom.n {
                let target: &mut [T] = if geom.is_pointwise() {
                    &mut dx[ni * img..(ni + 1) * img]
                } else {
                    &mut dcols
                };
                // dcols [k, p] = w^T @ g_n
                T::gemm(
                    k,
                    geom.cout,
                    p,
                    T::one(),
                    wv.data(),
                    1,
                    k as isize,
                    &gd[ni * out_n..(ni + 1) * out_n],
                    p as isize,
                    1,
                    T::zero(),
                    target,
                    p as isize,
                    1,
                );
                if !geom.is_pointwise() {
                    col2im(&dcols, geom, &mut dx[ni * img..(ni + 1) * img]);
                }
            }
            self.accumulate(grads, x, Array::from_vec(xv.shape(), dx).unwrap());
        }
    }
}

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_dims(sa: &[usize], sb: &[usize], trans_b: bool) -> Result<MatDims> {
    let bad = || {
        Error::shape(
            "matmul",
            format!("{sa:?} x {sb:?}{}", if trans_b { "^T" } else { "" }),
        )
    };
    let (batch, a2, b2) = match (sa.len(), sb.len()) {
        (2, 2) => (1, sa, sb),
        (3, 3) if sa[0] == sb[0] => (sa[0], &sa[1..], &sb[1..]),
        _ => return Err(bad()),
    };
    let (m, k) = (a2[0], a2[1]);
    let (kb, n) = if trans_b {
        (b2[1], b2[0])
    } else {
        (b2[0], b2[1])
    };
    if k != kb {
        return Err(bad());
    }
    Ok(MatDims { batch, m, k, n })
}

pub(crate) fn softmax_row<T: Element>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

fn pool_bin(i: usize, size: usize, bins: usize) -> (usize, usize) {
    let start = i * size / bins;
    let end = ((i + 1) * size).div_ceil(bins);
    (start, end)
}

fn broadcast_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

fn for_each_index(shape: &[usize], mut f: impl FnMut(&[usize])) {
    let total: usize = shape.iter().product();
    if total == 0 {
        return;
    }
    let mut idx = vec![0; shape.len()];
    for _ in 0..total {
        f(&idx);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                for oh in 0..g.ho {
                    let dst = &mut cols[row + oh * g.wo..row + (oh + 1) * g.wo];
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *d = if iw < 0 || iw >= g.w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oh * g.wo..row + (oh + 1) * g.wo];
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, &v) in src.iter().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] = dst[iw as usize] + v;
                        }
                    }
                }
            }
        }
    }
}
