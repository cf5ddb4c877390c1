use super::kernels::{self, ConvGeom};
use super::mac_counter;
use super::tensor::numel;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: T },
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, shared_b: bool },
    Permute { a: Var, perm: Vec<usize> },
    Reshape { a: Var },
    Narrow { a: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    ZeroPad { a: Var },
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T>, widths: Option<Vec<usize>> },
    Gelu { a: Var },
    Conv2d { x: Var, w: Var, bias: Option<Var>, geom: ConvGeom },
    AvgPool { a: Var, k: usize, stride: usize },
    MaskChannels { a: Var, widths: Vec<usize> },
    ScaleExamples { a: Var, factors: Vec<T> },
    Sum { a: Var },
    SoftCrossEntropy { logits: Var, probs: Vec<T>, targets: Vec<T>, rows: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Ordered record of executed operations supporting reverse-mode
/// differentiation.
///
/// Values are appended in execution order, so every operation's inputs
/// precede it; [`Tape::backward`] walks the record once in reverse.
#[derive(Debug)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn row_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), check_finite: false }
    }

    /// Turns on the NaN/Inf detection hook for every subsequent forward op.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Its `requires_grad` flag decides whether backward
    /// produces a gradient for it.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    /// Records a trainable input.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let rg = inputs.iter().any(|&i| self.requires_grad(i));
        let value = Tensor::new(shape, data)?.with_requires_grad(rg);
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    // ── elementwise ──────────────────────────────────────────────────

    /// `a + b`, where `b` has the shape of `a` or of a trailing suffix of it
    /// (bias and position-table broadcasting).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dim("add", format!("{sa:?} + {sb:?}")));
        }
        let bd = self.data(b);
        let n = bd.len();
        let data: Vec<T> = self.data(a).iter().enumerate().map(|(i, &v)| v + bd[i % n]).collect();
        self.push("add", sa, data, Op::Add { a, b }, &[a, b])
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mul", format!("{:?} * {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push("mul", shape, data, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", shape, data, Op::Scale { a, s }, &[a])
    }

    /// GeLU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| kernels::gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push("gelu", shape, data, Op::Gelu { a }, &[a])
    }

    // ── linear algebra ───────────────────────────────────────────────

    /// Matrix product over the last two axes. `a` is `[..., m, k]`; `b` is
    /// either `[..., k, n]` with the same leading axes, or a shared `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim("matmul", format!("{sa:?} · {sb:?}: operands must be at least 2-D")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared_b = sb.len() == 2;
        let lead_a = &sa[..sa.len() - 2];
        if k != k2 || (!shared_b && lead_a != &sb[..sb.len() - 2]) {
            return Err(Error::dim("matmul", format!("{sa:?} · {sb:?}")));
        }
        let batch = numel(lead_a);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for bi in 0..batch {
                let bslice = if shared_b { bd } else { &bd[bi * k * n..(bi + 1) * k * n] };
                kernels::matmul_acc(
                    &ad[bi * m * k..(bi + 1) * m * k],
                    bslice,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        mac_counter::add((batch * m * k * n) as u64);
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        self.push("matmul", shape, out, Op::MatMul { a, b, batch, m, k, n, shared_b }, &[a, b])
    }

    /// `x · w + bias` with `w: [d_in, d_out]` applied to the last axis.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::dim("transpose", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if perm.len() != sa.len() || perm.iter().any(|&p| p >= sa.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", format!("invalid permutation {perm:?} for {sa:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| sa[p]).collect();
        let data = permute_data(self.data(a), &sa, perm);
        self.push("permute", out_shape, data, Op::Permute { a, perm: perm.to_vec() }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).numel() {
            return Err(Error::dim("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let data = self.data(a).to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape { a }, &[a])
    }

    // ── slicing and padding ──────────────────────────────────────────

    /// Sub-range `[start, start+len)` of one axis.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || len == 0 || start + len > sa[axis] {
            return Err(Error::dim("narrow", format!("axis {axis} range {start}+{len} of {sa:?}")));
        }
        let (outer, ext, inner) = row_layout(&sa, axis);
        let src = self.data(a);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = sa;
        shape[axis] = len;
        self.push("narrow", shape, data, Op::Narrow { a, axis, start }, &[a])
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::dim("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", format!("axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(Error::dim("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = row_layout(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let ext = self.shape(p)[axis];
                let src = self.data(p);
                data.extend_from_slice(&src[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push("concat", shape, data, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    /// Appends zero channels to the last axis up to `target`.
    pub fn zero_pad_channels(&mut self, a: Var, target: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let c = *sa.last().unwrap();
        if target < c {
            return Err(Error::dim("zero_pad_channels", format!("cannot pad {c} channels down to {target}")));
        }
        let rows = self.value(a).numel() / c;
        let src = self.data(a);
        let mut data = vec![T::zero(); rows * target];
        for r in 0..rows {
            data[r * target..r * target + c].copy_from_slice(&src[r * c..(r + 1) * c]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = target;
        self.push("zero_pad_channels", shape, data, Op::ZeroPad { a }, &[a])
    }

    /// Leading `c` channels of the last axis.
    pub fn slice_channels(&mut self, a: Var, c: usize) -> Result<Var> {
        let axis = self.shape(a).len() - 1;
        self.narrow(a, axis, 0, c)
    }

    /// `[B, N, d]` token sequence to a `[B, d, √N, √N]` grid.
    pub fn seq_to_grid(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::dim("seq_to_grid", format!("expected [B, N, d], got {s:?}")));
        }
        let side = perfect_sqrt(s[1]).ok_or_else(|| Error::dim("seq_to_grid", format!("{} tokens is not a square grid", s[1])))?;
        let t = self.permute(a, &[0, 2, 1])?;
        self.reshape(t, &[s[0], s[2], side, side])
    }

    /// `[B, d, H, W]` grid to a `[B, H·W, d]` token sequence.
    pub fn grid_to_seq(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::dim("grid_to_seq", format!("expected [B, d, H, W], got {s:?}")));
        }
        let t = self.reshape(a, &[s[0], s[1], s[2] * s[3]])?;
        self.permute(t, &[0, 2, 1])
    }

    // ── normalisation and activations ────────────────────────────────

    /// Numerically stabilised softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let c = *shape.last().unwrap();
        let mut data = self.data(a).to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            let inv = T::one() / s;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        self.push("softmax_rows", shape, data, Op::Softmax { a }, &[a])
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.layer_norm_impl(x, gamma, beta, eps, None)
    }

    /// Layer normalization whose statistics cover only the first `widths[b]`
    /// channels of every row belonging to example `b` (leading axis).
    ///
    /// Inputs are expected to hold zeros past the active width; outputs are
    /// zeroed there.
    pub fn masked_layer_norm(&mut self, x: Var, widths: &[usize], gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.layer_norm_impl(x, gamma, beta, eps, Some(widths.to_vec()))
    }

    fn layer_norm_impl(&mut self, x: Var, gamma: Var, beta: Var, eps: f64, widths: Option<Vec<usize>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(
                "layer_norm",
                format!("gamma {:?} / beta {:?} for {c} channels", self.shape(gamma), self.shape(beta)),
            ));
        }
        let rows = self.value(x).numel() / c;
        let per_example = if let Some(w) = &widths {
            if w.len() != shape[0] {
                return Err(Error::dim("masked_layer_norm", format!("{} widths for leading extent {}", w.len(), shape[0])));
            }
            if let Some(bad) = w.iter().find(|&&v| v == 0 || v > c) {
                return Err(Error::contract(format!("masked_layer_norm active width {bad} outside 1..={c}")));
            }
            rows / shape[0]
        } else {
            rows
        };
        let width = |r: usize| widths.as_ref().map_or(c, |w| w[r / per_example]);
        let mut out = vec![T::zero(); rows * c];
        let mut xhat = vec![T::zero(); rows * c];
        let mut rstd = vec![T::zero(); rows];
        kernels::layer_norm_forward(
            self.data(x),
            self.data(gamma),
            self.data(beta),
            c,
            T::lit(eps),
            width,
            &mut out,
            &mut xhat,
            &mut rstd,
        );
        self.push("layer_norm", shape, out, Op::LayerNorm { x, gamma, beta, xhat, rstd, widths }, &[x, gamma, beta])
    }

    // ── convolution and pooling ──────────────────────────────────────

    /// Direct 2-D cross-correlation. `x: [B, C_in, H, W]`, `w: [C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || stride == 0 {
            return Err(Error::dim("conv2d", format!("input {sx:?}, weight {sw:?}, stride {stride}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(Error::dim("conv2d", format!("bias {:?} for {} outputs", self.shape(b), sw[0])));
            }
        }
        let k = sw[2];
        let (h, wd) = (sx[2], sx[3]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::dim("conv2d", format!("kernel {k} larger than padded input {h}x{wd} (pad {pad})")));
        }
        let geom = ConvGeom {
            batch: sx[0],
            c_in: sx[1],
            h,
            w: wd,
            c_out: sw[0],
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (wd + 2 * pad - k) / stride + 1,
        };
        let mut out = vec![T::zero(); geom.batch * geom.c_out * geom.h_out * geom.w_out];
        kernels::conv2d_forward(self.data(x), self.data(w), bias.map(|b| self.data(b)), &mut out, &geom);
        mac_counter::add((geom.batch * geom.h_out * geom.w_out * k * k * geom.c_in * geom.c_out) as u64);
        let inputs: Vec<Var> = [Some(x), Some(w), bias].into_iter().flatten().collect();
        self.push(
            "conv2d",
            vec![geom.batch, geom.c_out, geom.h_out, geom.w_out],
            out,
            Op::Conv2d { x, w, bias, geom },
            &inputs,
        )
    }

    /// Window means over `[B, C, H, W]`, no padding.
    pub fn avg_pool2d(&mut self, a: Var, k: usize, stride: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || k == 0 || stride == 0 {
            return Err(Error::dim("avg_pool2d", format!("input {s:?}, kernel {k}, stride {stride}")));
        }
        let (h, w) = (s[2], s[3]);
        if h < k || w < k || !(h - k).is_multiple_of(stride) || !(w - k).is_multiple_of(stride) {
            return Err(Error::dim("avg_pool2d", format!("{h}x{w} does not tile with kernel {k} stride {stride}")));
        }
        let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let src = self.data(a);
        let inv = T::one() / T::lit((k * k) as f64);
        let planes = s[0] * s[1];
        let mut out = vec![T::zero(); planes * ho * wo];
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::zero();
                    for ky in 0..k {
                        for kx in 0..k {
                            acc += plane[(oy * stride + ky) * w + ox * stride + kx];
                        }
                    }
                    out[(p * ho + oy) * wo + ox] = acc * inv;
                }
            }
        }
        self.push("avg_pool2d", vec![s[0], s[1], ho, wo], out, Op::AvgPool { a, k, stride }, &[a])
    }

    // ── per-example masking ──────────────────────────────────────────

    /// Zeroes channels `widths[b]..` of the last axis for every row of example `b`.
    pub fn mask_channels(&mut self, a: Var, widths: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let c = *shape.last().unwrap();
        if widths.len() != shape[0] || widths.iter().any(|&w| w > c) {
            return Err(Error::dim("mask_channels", format!("widths {widths:?} for shape {shape:?}")));
        }
        let per_example = self.value(a).numel() / shape[0];
        let mut data = self.data(a).to_vec();
        for (i, row) in data.chunks_mut(c).enumerate() {
            let w = widths[i * c / per_example];
            row[w..].iter_mut().for_each(|v| *v = T::zero());
        }
        self.push("mask_channels", shape, data, Op::MaskChannels { a, widths: widths.to_vec() }, &[a])
    }

    /// Multiplies every element of example `b` (leading axis) by `factors[b]`.
    pub fn scale_examples(&mut self, a: Var, factors: &[T]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if factors.len() != shape[0] {
            return Err(Error::dim("scale_examples", format!("{} factors for shape {shape:?}", factors.len())));
        }
        let per = self.value(a).numel() / shape[0];
        let data = self.data(a).iter().enumerate().map(|(i, &v)| v * factors[i / per]).collect();
        self.push("scale_examples", shape, data, Op::ScaleExamples { a, factors: factors.to_vec() }, &[a])
    }

    // ── reductions and losses ────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.data(a).iter().copied().sum();
        self.push("sum", vec![1], vec![s], Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// `-(1/R) Σ_r Σ_c target[r,c] · log_softmax(logits[r])[c]` over the
    /// rows of the last axis.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape != targets.shape() {
            return Err(Error::dim("soft_cross_entropy", format!("logits {shape:?} vs targets {:?}", targets.shape())));
        }
        let c = *shape.last().unwrap();
        let rows = targets.numel() / c;
        let mut probs = self.data(logits).to_vec();
        let mut total = T::zero();
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
            let t = &targets.data()[r * c..(r + 1) * c];
            for (v, &tv) in row.iter_mut().zip(t) {
                let logp = *v - lse;
                total -= tv * logp;
                *v = logp.exp();
            }
        }
        let loss = total / T::lit(rows as f64);
        self.push(
            "soft_cross_entropy",
            vec![1],
            vec![loss],
            Op::SoftCrossEntropy { logits, probs, targets: targets.data().to_vec(), rows },
            &[logits],
        )
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Gradients are added into the
    /// `grad` buffer of every value that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].value.requires_grad() {
                self.backward_node(idx, &g, &mut grads);
            }
            self.nodes[idx].value.accumulate_grad(&g)?;
        }
        Ok(())
    }

    /// Clears every gradient buffer on the tape.
    pub fn zero_grads(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    fn backward_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.requires_grad(v) {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.value(v).numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                send(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                let n = self.value(*b).numel();
                send(*b, &mut |d| g.iter().enumerate().for_each(|(i, &y)| d[i % n] += y));
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                send(*a, &mut |d| d.iter_mut().zip(g).zip(bd).for_each(|((x, &y), &bv)| *x += y * bv));
                send(*b, &mut |d| d.iter_mut().zip(g).zip(ad).for_each(|((x, &y), &av)| *x += y * av));
            }
            Op::Scale { a, s } => send(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *s)),
            Op::MatMul { a, b, batch, m, k, n, shared_b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let (m, k, n) = (*m, *k, *n);
                let bslice = |bi: usize| if *shared_b { bd } else { &bd[bi * k * n..(bi + 1) * k * n] };
                send(*a, &mut |d| {
                    for bi in 0..*batch {
                        kernels::matmul_grad_a(
                            &g[bi * m * n..(bi + 1) * m * n],
                            bslice(bi),
                            &mut d[bi * m * k..(bi + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                });
                send(*b, &mut |d| {
                    for bi in 0..*batch {
                        let db = if *shared_b { &mut d[..] } else { &mut d[bi * k * n..(bi + 1) * k * n] };
                        kernels::matmul_grad_b(&ad[bi * m * k..(bi + 1) * m * k], &g[bi * m * n..(bi + 1) * m * n], db, m, k, n);
                    }
                });
            }
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let out_shape = node.value.shape();
                let back = permute_data(g, out_shape, &inv);
                send(*a, &mut |d| d.iter_mut().zip(&back).for_each(|(x, &y)| *x += y));
            }
            Op::Reshape { a } => send(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x += y)),
            Op::Narrow { a, axis, start } => {
                let sa = self.shape(*a);
                let (outer, ext, inner) = row_layout(sa, *axis);
                let len = node.value.shape()[*axis];
                send(*a, &mut |d| {
                    for o in 0..outer {
                        let base = (o * ext + start) * inner;
                        d[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = row_layout(out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let ext = self.shape(p)[*axis];
                    send(p, &mut |d| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + ext) * inner];
                            d[o * ext * inner..(o + 1) * ext * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, &y)| *x += y);
                        }
                    });
                    offset += ext;
                }
            }
            Op::ZeroPad { a } => {
                let c = self.value(*a).last_dim();
                let t = node.value.last_dim();
                send(*a, &mut |d| {
                    for (r, row) in d.chunks_mut(c).enumerate() {
                        row.iter_mut().zip(&g[r * t..r * t + c]).for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let c = node.value.last_dim();
                send(*a, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((x, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *x += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd, widths } => {
                let shape = self.shape(*x);
                let c = *shape.last().unwrap();
                let rows = xhat.len() / c;
                let per_example = rows / shape[0];
                let width = |r: usize| widths.as_ref().map_or(c, |w| w[r / per_example]);
                let gd = self.data(*gamma);
                let mut dx = self.requires_grad(*x).then(|| vec![T::zero(); xhat.len()]);
                let mut dgamma = self.requires_grad(*gamma).then(|| vec![T::zero(); c]);
                let mut dbeta = self.requires_grad(*beta).then(|| vec![T::zero(); c]);
                kernels::layer_norm_backward(
                    g,
                    gd,
                    xhat,
                    rstd,
                    c,
                    width,
                    dx.as_deref_mut(),
                    dgamma.as_deref_mut(),
                    dbeta.as_deref_mut(),
                );
                for (v, buf) in [(*x, dx), (*gamma, dgamma), (*beta, dbeta)] {
                    if let Some(buf) = buf {
                        send(v, &mut |d| d.iter_mut().zip(&buf).for_each(|(a, &b)| *a += b));
                    }
                }
            }
            Op::Gelu { a } => {
                let ad = self.data(*a);
                send(*a, &mut |d| {
                    d.iter_mut().zip(g).zip(ad).for_each(|((x, &y), &v)| *x += y * kernels::gelu_grad(v))
                });
            }
            Op::Conv2d { x, w, bias, geom } => {
                let mut dx = self.requires_grad(*x).then(|| vec![T::zero(); self.value(*x).numel()]);
                let mut dw = self.requires_grad(*w).then(|| vec![T::zero(); self.value(*w).numel()]);
                let mut db = bias.filter(|b| self.requires_grad(*b)).map(|_| vec![T::zero(); geom.c_out]);
                kernels::conv2d_backward(
                    self.data(*x),
                    self.data(*w),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                    geom,
                );
                let mut pending = vec![(*x, dx), (*w, dw)];
                if let Some(b) = bias {
                    pending.push((*b, db));
                }
                for (v, buf) in pending {
                    if let Some(buf) = buf {
                        send(v, &mut |d| d.iter_mut().zip(&buf).for_each(|(a, &b)| *a += b));
                    }
                }
            }
            Op::AvgPool { a, k, stride } => {
                let s = self.shape(*a);
                let (h, w) = (s[2], s[3]);
                let os = node.value.shape();
                let (ho, wo) = (os[2], os[3]);
                let inv = T::one() / T::lit((k * k) as f64);
                let planes = s[0] * s[1];
                send(*a, &mut |d| {
                    for p in 0..planes {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let gv = g[(p * ho + oy) * wo + ox] * inv;
                                for ky in 0..*k {
                                    for kx in 0..*k {
                                        d[p * h * w + (oy * stride + ky) * w + ox * stride + kx] += gv;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::MaskChannels { a, widths } => {
                let c = node.value.last_dim();
                let per_example = node.value.numel() / widths.len();
                send(*a, &mut |d| {
                    for (i, (dr, gr)) in d.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                        let w = widths[i * c / per_example];
                        dr[..w].iter_mut().zip(&gr[..w]).for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::ScaleExamples { a, factors } => {
                let per = node.value.numel() / factors.len();
                send(*a, &mut |d| d.iter_mut().zip(g).enumerate().for_each(|(i, (x, &y))| *x += y * factors[i / per]));
            }
            Op::Sum { a } => send(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::SoftCrossEntropy { logits, probs, targets, rows } => {
                let c = self.value(*logits).last_dim();
                let scale = g[0] / T::lit(*rows as f64);
                send(*logits, &mut |d| {
                    for ((dr, pr), tr) in d.chunks_mut(c).zip(probs.chunks(c)).zip(targets.chunks(c)) {
                        let tsum: T = tr.iter().copied().sum();
                        for ((x, &p), &t) in dr.iter_mut().zip(pr).zip(tr) {
                            *x += scale * (p * tsum - t);
                        }
                    }
                });
            }
        }
    }
}

pub(crate) fn perfect_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

fn permute_data<T: Copy>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..src.len() {
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}
