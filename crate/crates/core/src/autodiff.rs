//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward primitive appends one node. A node is *tracked* when any of
//! its inputs is tracked (or it is a trainable leaf); untracked nodes keep only
//! their value. [`Tape::backward`] walks node indices downwards from the loss,
//! which is a reverse topological order because inputs always precede outputs.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Float, MatRef, Tensor};

/// Cap on power-iteration steps in [`Tape::spectral_normalize`].
const SPECTRAL_MAX_ITERS: usize = 200;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, T),
    BiasAdd(Var, Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    GlobalAvgPool(Var),
    /// `W / σ` with the top singular vectors `u` (rows) and `v` (columns).
    SpectralNorm {
        w: Var,
        sigma: T,
        u: Vec<T>,
        v: Vec<T>,
    },
    /// Normalised values and per-(sample, channel) inverse std.
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    L1(Var),
    L2Sq(Var),
    RbfGram(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// One computation record. A training step owns exactly one tape.
pub struct Tape<T: Float = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar with respect to every tracked node that reaches it.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_or_scalar(a: &[usize], b: &[usize]) -> bool {
    a == b || a.iter().product::<usize>() == 1 || b.iter().product::<usize>() == 1
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn im2col<T: Float>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = g.cols();
    let mut out = vec![T::zero(); g.ckk() * cols];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let orow = &mut out[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let xbase = (n * g.c + c) * g.h * g.w;
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let xrow = &x[xbase + iy as usize * g.w..][..g.w];
                        let dst = &mut orow[(n * g.ho + oy) * g.wo..][..g.wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: Float>(cols_buf: &[T], g: &ConvGeom, dx: &mut [T]) {
    let cols = g.cols();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let crow = &cols_buf[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let xbase = (n * g.c + c) * g.h * g.w;
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &crow[(n * g.ho + oy) * g.wo..][..g.wo];
                        let xrow = &mut dx[xbase + iy as usize * g.w..][..g.w];
                        for (ox, &s) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                xrow[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn softmax_rows<T: Float>(x: &[T], last: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(last).zip(out.chunks_mut(last)) {
        let mx = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mx).exp();
            z += *d;
        }
        for d in dst.iter_mut() {
            *d /= z;
        }
    }
    out
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("{} output", op_name(&op))));
        }
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node {
            value,
            op: if tracked { op } else { Op::Leaf },
            tracked,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), k, n),
            T::zero(),
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// 2-D convolution (cross-correlation) via im2col and one matrix product.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[sw[0]]));
            }
        }
        let (h, wd, kh, kw) = (sx[2], sx[3], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape("conv2d kernel", &sx, &sw));
        }
        let geom = ConvGeom {
            n: sx[0],
            c: sx[1],
            h,
            w: wd,
            o: sw[0],
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let ncols = geom.cols();
        let mut mat = vec![T::zero(); geom.o * ncols];
        gemm(
            MatRef::new(self.value(w).data(), geom.o, geom.ckk()),
            MatRef::new(&cols, geom.ckk(), ncols),
            T::zero(),
            &mut mat,
        );
        let hw = geom.ho * geom.wo;
        let mut out = vec![T::zero(); geom.n * geom.o * hw];
        let bias = b.map(|b| self.value(b).data());
        for o in 0..geom.o {
            let bo = bias.map_or(T::zero(), |bb| bb[o]);
            for n in 0..geom.n {
                let src = &mat[o * ncols + n * hw..][..hw];
                let dst = &mut out[(n * geom.o + o) * hw..][..hw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bo;
                }
            }
        }
        let value = Tensor::new(vec![geom.n, geom.o, geom.ho, geom.wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            &inputs,
        )
    }

    /// Nearest-neighbour upsampling of the two trailing axes by `factor`.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(Error::shape("upsample", &s, &[factor]));
        }
        let (h, w) = (s[2], s[3]);
        let (ho, wo) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); s[0] * s[1] * ho * wo];
        for (plane, dst) in src.chunks(h * w).zip(out.chunks_mut(ho * wo)) {
            for y in 0..ho {
                let srow = &plane[(y / factor) * w..][..w];
                let drow = &mut dst[y * wo..][..wo];
                for (xo, d) in drow.iter_mut().enumerate() {
                    *d = srow[xo / factor];
                }
            }
        }
        let value = Tensor::new(vec![s[0], s[1], ho, wo], out)?;
        self.push(value, Op::Upsample { x, factor }, &[x])
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, ())> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !same_or_scalar(sa, sb) {
            return Err(Error::shape(name, sa, sb));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let value = if va.numel() == vb.numel() {
            let shape = if sa.len() >= sb.len() { sa } else { sb };
            Tensor::new(
                shape.to_vec(),
                va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect(),
            )?
        } else if vb.numel() == 1 {
            let y = vb.item();
            va.map(|x| f(x, y))
        } else {
            let x = va.item();
            vb.map(|y| f(x, y))
        };
        Ok((value, ()))
    }

    /// Elementwise sum; either side may be a single-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, _) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, _) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, _) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddScalar(x), &[x])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -T::one())
    }

    /// Adds `b[c]` along axis 1 of `x` (`[N, C, ...]`).
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() < 2 || sb != [sx[1]] {
            return Err(Error::shape("bias_add", sx, sb));
        }
        let (outer, c, inner) = split_axis(sx, 1);
        let mut value = self.value(x).clone();
        let bias = self.value(b).data();
        let data = value.data_mut();
        for o in 0..outer {
            for (ci, &bv) in bias.iter().enumerate().take(c) {
                for v in &mut data[(o * c + ci) * inner..][..inner] {
                    *v += bv;
                }
            }
        }
        self.push(value, Op::BiasAdd(x, b), &[x, b])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *parts
                    .first()
                    .ok_or_else(|| Error::contract("concat of zero tensors"))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat axis", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut shape = first.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..][..len]);
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape("slice", &s, &[axis, start, len]));
        }
        let (outer, full, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * full + start) * inner..][..len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Slice { x, axis, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu(x), &[x])
    }

    /// Hinge positive part `[x]_+`.
    pub fn hinge(&mut self, x: Var) -> Result<Var> {
        self.relu(x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        let value = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { v * slope });
        self.push(value, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.exp());
        self.push(value, Op::Exp(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let value = Tensor::scalar(v.sum() / T::of(v.numel() as f64));
        self.push(value, Op::Mean(x), &[x])
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", &s, &[4]));
        }
        let hw = s[2] * s[3];
        let inv = T::of(1.0 / hw as f64);
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(vec![s[0], s[1]], out)?;
        self.push(value, Op::GlobalAvgPool(x), &[x])
    }

    /// Divides a weight by its largest singular value, viewing it as a
    /// `shape[0] × rest` matrix. The singular vectors come from a power
    /// iteration started at the normalised all-ones vector and run to
    /// convergence on every call, so the op carries no state between steps.
    /// They are treated as constants in the backward pass, which at
    /// convergence is the exact gradient of `W / ‖W‖₂`.
    pub fn spectral_normalize(&mut self, w: Var) -> Result<Var> {
        let wt = self.value(w);
        let rows = wt.shape().first().copied().unwrap_or(0);
        let cols = wt.numel() / rows.max(1);
        if rows == 0 || cols == 0 {
            return Err(Error::shape("spectral_normalize", wt.shape(), &[1, 1]));
        }
        let a = wt.data();
        let norm = |x: &mut Vec<T>| {
            let n = x.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::min_positive_value());
            x.iter_mut().for_each(|v| *v = *v / n);
            n
        };
        let mut v = vec![T::one(); cols];
        norm(&mut v);
        let mut u = vec![T::zero(); rows];
        let mut sigma = T::zero();
        let tol = T::of(64.0) * T::epsilon();
        for _ in 0..SPECTRAL_MAX_ITERS {
            for (r, ur) in u.iter_mut().enumerate() {
                *ur = a[r * cols..(r + 1) * cols].iter().zip(&v).map(|(&x, &y)| x * y).sum();
            }
            norm(&mut u);
            v.iter_mut().for_each(|x| *x = T::zero());
            for (r, &ur) in u.iter().enumerate() {
                for (vc, &x) in v.iter_mut().zip(&a[r * cols..(r + 1) * cols]) {
                    *vc += ur * x;
                }
            }
            let next = norm(&mut v);
            let done = (next - sigma).abs() <= tol * next;
            sigma = next;
            if done {
                break;
            }
        }
        if sigma <= T::min_positive_value() || !sigma.is_finite() {
            return Err(Error::NonFinite("spectral_normalize: weight has no positive singular value".into()));
        }
        let value = wt.map(|x| x / sigma);
        self.push(value, Op::SpectralNorm { w, sigma, u, v }, &[w])
    }

    /// Instance normalisation of `[B, C, H, W]`: every (sample, channel)
    /// plane is shifted to zero mean and scaled to unit variance (biased
    /// estimate, `eps` added to the variance). No affine parameters.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("instance_norm", &s, &[4]));
        }
        let hw = s[2] * s[3];
        let n = T::of(hw as f64);
        let mut out = Vec::with_capacity(self.value(x).numel());
        let mut inv_std = Vec::with_capacity(s[0] * s[1]);
        for p in self.value(x).data().chunks(hw) {
            let mean = p.iter().copied().sum::<T>() / n;
            let var = p.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + T::of(eps)).sqrt();
            out.extend(p.iter().map(|&v| (v - mean) * inv));
            inv_std.push(inv);
        }
        let value = Tensor::new(s, out)?;
        self.push(value, Op::InstanceNorm { x, inv_std }, &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let last = *v.shape().last().unwrap();
        let value = Tensor::new(v.shape().to_vec(), softmax_rows(v.data(), last))?;
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let last = *v.shape().last().unwrap();
        let mut out = vec![T::zero(); v.numel()];
        for (src, dst) in v.data().chunks(last).zip(out.chunks_mut(last)) {
            let mx = src.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = src.iter().map(|&s| (s - mx).exp()).sum::<T>().ln() + mx;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s - lse;
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        self.push(value, Op::LogSoftmax(x), &[x])
    }

    /// `Σ |x|`.
    pub fn l1(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).data().iter().map(|v| v.abs()).sum());
        self.push(value, Op::L1(x), &[x])
    }

    /// `Σ x²`.
    pub fn l2_squared(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).data().iter().map(|&v| v * v).sum());
        self.push(value, Op::L2Sq(x), &[x])
    }

    /// Off-diagonal RBF Gram matrix of the rows of `x` (`[m, D] -> [m, m]`):
    /// `K[i][j] = (1 - δij) exp(-½‖x_i - x_j‖²)`.
    pub fn rbf_gram(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("rbf_gram", &s, &[2]));
        }
        let (m, d) = (s[0], s[1]);
        let data = self.value(x).data();
        let mut k = vec![T::zero(); m * m];
        let half = T::of(0.5);
        for i in 0..m {
            let xi = &data[i * d..][..d];
            for j in (i + 1)..m {
                let xj = &data[j * d..][..d];
                let d2: T = xi.iter().zip(xj).map(|(&a, &b)| (a - b) * (a - b)).sum();
                let kv = (-half * d2).exp();
                k[i * m + j] = kv;
                k[j * m + i] = kv;
            }
        }
        let value = Tensor::new(vec![m, m], k)?;
        self.push(value, Op::RbfGram(x), &[x])
    }

    /// Gradients of the scalar `loss` with respect to every tracked node.
    ///
    /// The tape is left intact, so several losses may be differentiated over
    /// one shared forward pass.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        if !self.nodes[loss.0].tracked {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_broadcast(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        let target = self.nodes[v.0].value.shape();
        if g.numel() != self.nodes[v.0].value.numel() {
            self.acc(grads, v, Tensor::new(target.to_vec(), vec![g.sum()]).unwrap());
        } else if g.shape() != target {
            self.acc(grads, v, g.reshape(target).unwrap());
        } else {
            self.acc(grads, v, g);
        }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.is_tracked(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(
                        MatRef::new(g.data(), m, n),
                        MatRef::new(vb.data(), k, n).t(),
                        T::zero(),
                        &mut da,
                    );
                    self.acc(grads, *a, Tensor::new(vec![m, k], da).unwrap());
                }
                if self.is_tracked(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(
                        MatRef::new(va.data(), m, k).t(),
                        MatRef::new(g.data(), m, n),
                        T::zero(),
                        &mut db,
                    );
                    self.acc(grads, *b, Tensor::new(vec![k, n], db).unwrap());
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let hw = geom.ho * geom.wo;
                let ncols = geom.cols();
                let mut dmat = vec![T::zero(); geom.o * ncols];
                for n in 0..geom.n {
                    for o in 0..geom.o {
                        let src = &g.data()[(n * geom.o + o) * hw..][..hw];
                        dmat[o * ncols + n * hw..][..hw].copy_from_slice(src);
                    }
                }
                if self.is_tracked(*w) {
                    let mut dw = vec![T::zero(); geom.o * geom.ckk()];
                    gemm(
                        MatRef::new(&dmat, geom.o, ncols),
                        MatRef::new(cols, geom.ckk(), ncols).t(),
                        T::zero(),
                        &mut dw,
                    );
                    self.acc(
                        grads,
                        *w,
                        Tensor::new(self.shape(*w).to_vec(), dw).unwrap(),
                    );
                }
                if let Some(b) = b {
                    if self.is_tracked(*b) {
                        let db = dmat.chunks(ncols).map(|r| r.iter().copied().sum()).collect();
                        self.acc(grads, *b, Tensor::new(vec![geom.o], db).unwrap());
                    }
                }
                if self.is_tracked(*x) {
                    let mut dcols = vec![T::zero(); geom.ckk() * ncols];
                    gemm(
                        MatRef::new(self.value(*w).data(), geom.o, geom.ckk()).t(),
                        MatRef::new(&dmat, geom.o, ncols),
                        T::zero(),
                        &mut dcols,
                    );
                    let mut dx = vec![T::zero(); geom.n * geom.c * geom.h * geom.w];
                    col2im(&dcols, geom, &mut dx);
                    self.acc(
                        grads,
                        *x,
                        Tensor::new(self.shape(*x).to_vec(), dx).unwrap(),
                    );
                }
            }
            Op::Upsample { x, factor } => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let (ho, wo) = (h * factor, w * factor);
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (src, dst) in g.data().chunks(ho * wo).zip(dx.chunks_mut(h * w)) {
                    for y in 0..ho {
                        for xo in 0..wo {
                            dst[(y / factor) * w + xo / factor] += src[y * wo + xo];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(s.to_vec(), dx).unwrap());
            }
            Op::Add(a, b) => {
                self.acc_broadcast(grads, *a, g.clone());
                self.acc_broadcast(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc_broadcast(grads, *a, g.clone());
                self.acc_broadcast(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let times = |other: &Tensor<T>| -> Tensor<T> {
                    if other.numel() == g.numel() {
                        Tensor::new(
                            g.shape().to_vec(),
                            g.data().iter().zip(other.data()).map(|(&x, &y)| x * y).collect(),
                        )
                        .unwrap()
                    } else {
                        let y = other.item();
                        g.map(|x| x * y)
                    }
                };
                if self.is_tracked(*a) {
                    self.acc_broadcast(grads, *a, times(vb));
                }
                if self.is_tracked(*b) {
                    self.acc_broadcast(grads, *b, times(va));
                }
            }
            Op::AddScalar(x) => self.acc(grads, *x, g.clone()),
            Op::Scale(x, c) => {
                let c = *c;
                self.acc(grads, *x, g.map(|v| v * c));
            }
            Op::BiasAdd(x, b) => {
                self.acc(grads, *x, g.clone());
                if self.is_tracked(*b) {
                    let (outer, c, inner) = split_axis(g.shape(), 1);
                    let mut db = vec![T::zero(); c];
                    for o in 0..outer {
                        for (ci, d) in db.iter_mut().enumerate() {
                            *d += g.data()[(o * c + ci) * inner..][..inner]
                                .iter()
                                .copied()
                                .sum::<T>();
                        }
                    }
                    self.acc(grads, *b, Tensor::new(vec![c], db).unwrap());
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.is_tracked(p) {
                        let mut dp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            dp.extend_from_slice(
                                &g.data()[(o * total + offset) * inner..][..len * inner],
                            );
                        }
                        self.acc(grads, p, Tensor::new(self.shape(p).to_vec(), dp).unwrap());
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let s = self.shape(*x);
                let (outer, full, inner) = split_axis(s, *axis);
                let len = out.shape()[*axis];
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for o in 0..outer {
                    dx[(o * full + start) * inner..][..len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..][..len * inner]);
                }
                self.acc(grads, *x, Tensor::new(s.to_vec(), dx).unwrap());
            }
            Op::Reshape(x) => {
                let s = self.shape(*x).to_vec();
                self.acc(grads, *x, g.clone().reshape(&s).unwrap());
            }
            Op::Relu(x) => {
                let dx = zip_map(g, out, |gv, ov| if ov > T::zero() { gv } else { T::zero() });
                self.acc(grads, *x, dx);
            }
            Op::LeakyRelu(x, slope) => {
                let slope = *slope;
                let dx = zip_map(g, self.value(*x), |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else {
                        gv * slope
                    }
                });
                self.acc(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = zip_map(g, out, |gv, s| gv * s * (T::one() - s));
                self.acc(grads, *x, dx);
            }
            Op::Exp(x) => {
                let dx = zip_map(g, out, |gv, e| gv * e);
                self.acc(grads, *x, dx);
            }
            Op::Sum(x) => {
                let gv = g.item();
                self.acc(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let gv = g.item() / T::of(n as f64);
                self.acc(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let inv = T::of(1.0 / hw as f64);
                let mut dx = Vec::with_capacity(self.value(*x).numel());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat(gv * inv).take(hw));
                }
                self.acc(grads, *x, Tensor::new(s.to_vec(), dx).unwrap());
            }
            Op::SpectralNorm { w, sigma, u, v } => {
                // dW = (G − ⟨G, Ŵ⟩ u vᵀ) / σ
                let cols = v.len();
                let gw: T = g.data().iter().zip(out.data()).map(|(&a, &b)| a * b).sum();
                let dx: Vec<T> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| (gv - gw * u[i / cols] * v[i % cols]) / *sigma)
                    .collect();
                let s = self.shape(*w).to_vec();
                self.acc(grads, *w, Tensor::new(s, dx).unwrap());
            }
            Op::InstanceNorm { x, inv_std } => {
                // dx = inv·(g − mean(g) − x̂·mean(g·x̂)) per plane
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let n = T::of(hw as f64);
                let mut dx = Vec::with_capacity(out.numel());
                for ((gp, yp), &inv) in g.data().chunks(hw).zip(out.data().chunks(hw)).zip(inv_std) {
                    let gm = gp.iter().copied().sum::<T>() / n;
                    let gy = gp.iter().zip(yp).map(|(&a, &b)| a * b).sum::<T>() / n;
                    dx.extend(gp.iter().zip(yp).map(|(&a, &b)| inv * (a - gm - b * gy)));
                }
                self.acc(grads, *x, Tensor::new(s.to_vec(), dx).unwrap());
            }
            Op::Softmax(x) => {
                let last = *out.shape().last().unwrap();
                let mut dx = vec![T::zero(); out.numel()];
                for ((s, gr), d) in out
                    .data()
                    .chunks(last)
                    .zip(g.data().chunks(last))
                    .zip(dx.chunks_mut(last))
                {
                    let dot: T = s.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((dv, &sv), &gv) in d.iter_mut().zip(s).zip(gr) {
                        *dv = sv * (gv - dot);
                    }
                }
                self.acc(grads, *x, Tensor::new(out.shape().to_vec(), dx).unwrap());
            }
            Op::LogSoftmax(x) => {
                let last = *out.shape().last().unwrap();
                let mut dx = vec![T::zero(); out.numel()];
                for ((lp, gr), d) in out
                    .data()
                    .chunks(last)
                    .zip(g.data().chunks(last))
                    .zip(dx.chunks_mut(last))
                {
                    let gsum: T = gr.iter().copied().sum();
                    for ((dv, &l), &gv) in d.iter_mut().zip(lp).zip(gr) {
                        *dv = gv - l.exp() * gsum;
                    }
                }
                self.acc(grads, *x, Tensor::new(out.shape().to_vec(), dx).unwrap());
            }
            Op::L1(x) => {
                let gv = g.item();
                let dx = self.value(*x).map(|v| {
                    if v > T::zero() {
                        gv
                    } else if v < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                self.acc(grads, *x, dx);
            }
            Op::L2Sq(x) => {
                let gv = g.item() * T::of(2.0);
                let dx = self.value(*x).map(|v| v * gv);
                self.acc(grads, *x, dx);
            }
            Op::RbfGram(x) => {
                let xv = self.value(*x);
                let (m, d) = (xv.shape()[0], xv.shape()[1]);
                let k = out.data();
                let gd = g.data();
                // S = (G + Gᵀ) ⊙ K;  dX = S·X − diag(rowsum S)·X
                let mut s = vec![T::zero(); m * m];
                for i in 0..m {
                    for j in 0..m {
                        s[i * m + j] = (gd[i * m + j] + gd[j * m + i]) * k[i * m + j];
                    }
                }
                let mut dx = vec![T::zero(); m * d];
                gemm(
                    MatRef::new(&s, m, m),
                    MatRef::new(xv.data(), m, d),
                    T::zero(),
                    &mut dx,
                );
                for i in 0..m {
                    let rs: T = s[i * m..][..m].iter().copied().sum();
                    for (dv, &xvv) in dx[i * d..][..d].iter_mut().zip(&xv.data()[i * d..][..d]) {
                        *dv -= rs * xvv;
                    }
                }
                self.acc(grads, *x, Tensor::new(vec![m, d], dx).unwrap());
            }
        }
    }
}

fn zip_map<T: Float>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .unwrap()
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Conv2d { .. } => "conv2d",
        Op::Upsample { .. } => "upsample",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddScalar(..) => "add_scalar",
        Op::Scale(..) => "scale",
        Op::BiasAdd(..) => "bias_add",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::Reshape(..) => "reshape",
        Op::Relu(..) => "relu",
        Op::LeakyRelu(..) => "leaky_relu",
        Op::Sigmoid(..) => "sigmoid",
        Op::Exp(..) => "exp",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::GlobalAvgPool(..) => "global_avg_pool",
        Op::InstanceNorm { .. } => "instance_norm",
        Op::SpectralNorm { .. } => "spectral_normalize",
        Op::Softmax(..) => "softmax",
        Op::LogSoftmax(..) => "log_softmax",
        Op::L1(..) => "l1",
        Op::L2Sq(..) => "l2_squared",
        Op::RbfGram(..) => "rbf_gram",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_padded() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.constant(t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 4.0, 5.0]);
    }

    #[test]
    fn relu_and_uniform_softmax() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = tape.constant(Tensor::zeros(&[1, 5]));
        let s = tape.softmax(z).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 0.2).abs() < 1e-7);
        }
    }

    #[test]
    fn shape_errors_report_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {:?}", other.map(|_| ())),
        }
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn sum_and_l2_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);

        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let l = tape.l2_squared(x).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let l = tape.sum(z).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 5.0]);
    }

    #[test]
    fn untracked_inputs_record_nothing() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[2], 1.0));
        let y = tape.exp(x).unwrap();
        assert!(!tape.is_tracked(y));
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).is_none());
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let d = tape.detach(x);
        let y = tape.mul(x, d).unwrap();
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[1], 1000.0));
        assert!(matches!(tape.exp(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::<f64>::from_fn(&[2, 2, 5, 4], |i| ((i * 7 % 11) as f64) - 5.0);
        let w = Tensor::<f64>::from_fn(&[3, 2, 3, 3], |i| ((i * 5 % 7) as f64) * 0.1 - 0.3);
        let b = Tensor::<f64>::from_fn(&[3], |i| i as f64);
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xv, wv, Some(bv), 2, 1).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), &[2, 3, 3, 2]);
        for n in 0..2 {
            for o in 0..3 {
                for oy in 0..3 {
                    for ox in 0..2 {
                        let mut acc = b.data()[o];
                        for c in 0..2 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let iy = (oy * 2 + ki) as isize - 1;
                                    let ix = (ox * 2 + kj) as isize - 1;
                                    if iy >= 0 && iy < 5 && ix >= 0 && ix < 4 {
                                        acc += x.data()[((n * 2 + c) * 5 + iy as usize) * 4 + ix as usize]
                                            * w.data()[((o * 2 + c) * 3 + ki) * 3 + kj];
                                    }
                                }
                            }
                        }
                        let got = out.data()[((n * 3 + o) * 3 + oy) * 2 + ox];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
