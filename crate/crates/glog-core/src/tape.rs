//! Reverse-mode autodiff tape over dense tensors.
//!
//! The tape records exactly the operations the segmentation pipeline
//! needs. Every op stores its input node ids and enough saved state to run
//! its backward rule; nodes are appended in topological order, so the
//! backward pass is a single reverse sweep.
//!
//! Conventions:
//! - `conv2d` is cross-correlation (no kernel flip) with zero padding.
//! - GELU is the exact erf form `x * Phi(x)`, not the tanh approximation.
//! - Layer norm and channel softmax normalize over axis 0 (channels),
//!   treating the remaining axes as positions.
//! - Calling [`Tape::backward`] twice without [`Tape::clear_grads`]
//!   accumulates gradients.

use crate::conv;
use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded operation, holding input ids and saved backward state.
#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Sum(NodeId),
    Mean(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: T,
    },
    SoftmaxRows(NodeId),
    SoftmaxChannels(NodeId),
    Conv2d {
        x: NodeId,
        k: NodeId,
        stride: usize,
        pad: usize,
    },
    AddChannelBias {
        x: NodeId,
        b: NodeId,
    },
    ConcatChannels(Vec<NodeId>),
    MeanPool2(NodeId),
    UpsampleNearest2(NodeId),
    CyclicShift {
        x: NodeId,
        dy: i64,
        dx: i64,
    },
    WindowPartition {
        x: NodeId,
        window: usize,
    },
    WindowUnpartition {
        x: NodeId,
        window: usize,
        grid_h: usize,
        grid_w: usize,
    },
    SliceRows {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatRows(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
    },
    SoftDice {
        probs: NodeId,
        labels: Vec<usize>,
        smooth: T,
    },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Reverse-mode tape. One tape per forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf (input or parameter) tensor.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a node, if `backward` has run.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].value.grad()
    }

    /// Drop all accumulated gradients so the next `backward` starts fresh.
    pub fn clear_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    fn require_same_shape(&self, what: &str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!(
                "{what} needs equal shapes, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn data(&self, id: NodeId) -> &[T] {
        self.nodes[id.0].value.data()
    }

    // ── elementwise and reductions ────────────────────────────────────

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.require_same_shape("add", a, b)?;
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Add(a, b)))
    }

    /// Elementwise (Hadamard) product of two same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.require_same_shape("mul", a, b)?;
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Mul(a, b)))
    }

    /// Multiply by a compile-time constant (not a tape value).
    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let out: Vec<T> = self.data(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_vec(shape, out).expect("same shape"), Op::Scale(a, c))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.data(a).iter().fold(T::zero(), |acc, &x| acc + x);
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = cast::<T>(self.data(a).len() as f64);
        let s = self.data(a).iter().fold(T::zero(), |acc, &x| acc + x);
        self.push(Tensor::scalar(s / n), Op::Mean(a))
    }

    // ── dense linear algebra ──────────────────────────────────────────

    /// Matrix product `a[m,k] @ b[k,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch(format!(
                "matmul needs [m,k] @ [k,n], got {sa:?} @ {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        Ok(self.push(Tensor::from_vec(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "transpose needs a 2-D tensor, got {s:?}"
            )));
        }
        let (r, c) = (s[0], s[1]);
        let out = transpose_raw(self.data(a), r, c);
        Ok(self.push(Tensor::from_vec(vec![c, r], out)?, Op::Transpose(a)))
    }

    /// Affine map `x[n,din] @ w[din,dout] + b[dout]` (bias broadcast per row).
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] || sb != [sw[1]] {
            return Err(Error::ShapeMismatch(format!(
                "linear needs [n,din] @ [din,dout] + [dout], got {sx:?}, {sw:?}, {sb:?}"
            )));
        }
        let (n, din, dout) = (sx[0], sx[1], sw[1]);
        let mut out = matmul_raw(self.data(x), self.data(w), n, din, dout);
        let bias = self.data(b);
        for row in out.chunks_exact_mut(dout) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        Ok(self.push(Tensor::from_vec(vec![n, dout], out)?, Op::Linear { x, w, b }))
    }

    // ── activations and normalization ─────────────────────────────────

    /// Exact GELU, `x * Phi(x)` with the standard normal CDF in erf form.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out: Vec<T> = self.data(a).iter().map(|&x| x * normal_cdf(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_vec(shape, out).expect("same shape"), Op::Gelu(a))
    }

    /// Layer norm over the channel axis (axis 0) at every position,
    /// followed by the affine `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: T) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let channels = *sx.first().ok_or_else(|| {
            Error::ShapeMismatch("layer_norm needs at least one axis".to_string())
        })?;
        if self.shape(gain) != [channels] || self.shape(bias) != [channels] {
            return Err(Error::ShapeMismatch(format!(
                "layer_norm affine must be [{channels}], got gain {:?} bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let positions = self.data(x).len() / channels;
        let (xd, gd, bd) = (self.data(x), self.data(gain), self.data(bias));
        let mut out = vec![T::zero(); xd.len()];
        for p in 0..positions {
            let (mean, var) = channel_moments(xd, channels, positions, p);
            let inv_std = (var + eps).sqrt().recip();
            for c in 0..channels {
                let xhat = (xd[c * positions + p] - mean) * inv_std;
                out[c * positions + p] = gd[c] * xhat + bd[c];
            }
        }
        Ok(self.push(
            Tensor::from_vec(sx, out)?,
            Op::LayerNorm { x, gain, bias, eps },
        ))
    }

    /// Softmax over each row of a 2-D tensor.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "softmax_rows needs a 2-D tensor, got {s:?}"
            )));
        }
        let (r, c) = (s[0], s[1]);
        let mut out = self.data(a).to_vec();
        for row in out.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        Ok(self.push(Tensor::from_vec(vec![r, c], out)?, Op::SoftmaxRows(a)))
    }

    /// Softmax over the channel axis (axis 0) at every position.
    pub fn softmax_channels(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        let channels = *s.first().ok_or_else(|| {
            Error::ShapeMismatch("softmax_channels needs at least one axis".to_string())
        })?;
        let positions = self.data(a).len() / channels;
        let xd = self.data(a);
        let mut out = vec![T::zero(); xd.len()];
        let mut col = vec![T::zero(); channels];
        for p in 0..positions {
            for c in 0..channels {
                col[c] = xd[c * positions + p];
            }
            softmax_in_place(&mut col);
            for c in 0..channels {
                out[c * positions + p] = col[c];
            }
        }
        Ok(self.push(Tensor::from_vec(s, out)?, Op::SoftmaxChannels(a)))
    }

    // ── spatial ops ───────────────────────────────────────────────────

    /// "Same" cross-correlation: `x[cin,h,w]` with `kernels[cout,cin,k,k]`,
    /// stride 1, zero padding `(k-1)/2`. `k` must be odd.
    pub fn conv2d(&mut self, x: NodeId, kernels: NodeId) -> Result<NodeId> {
        let k = self.conv_kernel_extent(x, kernels)?;
        if k % 2 == 0 {
            return Err(Error::EvenKernel(k));
        }
        self.conv2d_general(x, kernels, 1, (k - 1) / 2)
    }

    /// General strided, zero-padded cross-correlation. Used by the patch
    /// embedding (stride 2) and patch merging (2x2, stride 2, no pad).
    pub fn conv2d_general(
        &mut self,
        x: NodeId,
        kernels: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let k = self.conv_kernel_extent(x, kernels)?;
        let (sx, sk) = (self.shape(x), self.shape(kernels));
        let (cin, h, w) = (sx[0], sx[1], sx[2]);
        let cout = sk[0];
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::ShapeMismatch(format!(
                "kernel {k} exceeds padded input {h}x{w} (pad {pad})"
            )));
        }
        let oh = conv::out_extent(h, k, stride, pad);
        let ow = conv::out_extent(w, k, stride, pad);
        let mut out = vec![T::zero(); cout * oh * ow];
        conv::forward(
            self.data(x),
            (cin, h, w),
            self.data(kernels),
            (cout, k),
            stride,
            pad,
            &mut out,
        );
        Ok(self.push(
            Tensor::from_vec(vec![cout, oh, ow], out)?,
            Op::Conv2d {
                x,
                k: kernels,
                stride,
                pad,
            },
        ))
    }

    fn conv_kernel_extent(&self, x: NodeId, kernels: NodeId) -> Result<usize> {
        let (sx, sk) = (self.shape(x), self.shape(kernels));
        if sx.len() != 3 || sk.len() != 4 || sk[2] != sk[3] || sk[1] != sx[0] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d needs x[cin,h,w] and kernels[cout,cin,k,k], got {sx:?} and {sk:?}"
            )));
        }
        Ok(sk[2])
    }

    /// Add a per-channel bias `b[c]` to `x[c,h,w]`.
    pub fn add_channel_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || self.shape(b) != [sx[0]] {
            return Err(Error::ShapeMismatch(format!(
                "add_channel_bias needs x[c,h,w] and b[c], got {:?} and {:?}",
                sx,
                self.shape(b)
            )));
        }
        let plane = sx[1] * sx[2];
        let bd = self.data(b).to_vec();
        let mut out = self.data(x).to_vec();
        for (c, &bv) in bd.iter().enumerate() {
            for v in &mut out[c * plane..(c + 1) * plane] {
                *v += bv;
            }
        }
        Ok(self.push(Tensor::from_vec(sx, out)?, Op::AddChannelBias { x, b }))
    }

    /// Concatenate `[ci,h,w]` tensors along the channel axis, in order.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument(
                "concat_channels needs at least one part".to_string(),
            ));
        }
        let first = self.shape(parts[0]).to_vec();
        if first.len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "concat_channels parts must be [c,h,w], got {first:?}"
            )));
        }
        let (h, w) = (first[1], first[2]);
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 3 || s[1] != h || s[2] != w {
                return Err(Error::ShapeMismatch(format!(
                    "concat_channels spatial mismatch: expected [*,{h},{w}], got {s:?}"
                )));
            }
            channels += s[0];
        }
        let mut out = Vec::with_capacity(channels * h * w);
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        Ok(self.push(
            Tensor::from_vec(vec![channels, h, w], out)?,
            Op::ConcatChannels(parts.to_vec()),
        ))
    }

    /// 2x2 spatial mean pooling (dims must be even).
    pub fn mean_pool2(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
            return Err(Error::ShapeMismatch(format!(
                "mean_pool2 needs [c,2m,2n], got {s:?}"
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.data(a);
        let quarter = cast::<T>(0.25);
        let mut out = vec![T::zero(); c * oh * ow];
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = ci * h * w + 2 * oy * w + 2 * ox;
                    out[ci * oh * ow + oy * ow + ox] =
                        (xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1]) * quarter;
                }
            }
        }
        Ok(self.push(Tensor::from_vec(vec![c, oh, ow], out)?, Op::MeanPool2(a)))
    }

    /// 2x nearest-neighbor spatial upsampling.
    pub fn upsample_nearest2(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "upsample_nearest2 needs [c,h,w], got {s:?}"
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let xd = self.data(a);
        let mut out = vec![T::zero(); c * oh * ow];
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[ci * oh * ow + oy * ow + ox] = xd[ci * h * w + (oy / 2) * w + ox / 2];
                }
            }
        }
        Ok(self.push(
            Tensor::from_vec(vec![c, oh, ow], out)?,
            Op::UpsampleNearest2(a),
        ))
    }

    /// Cyclic (wrap-around) spatial shift: `out[c,y,x] = in[c, y+dy mod h, x+dx mod w]`.
    pub fn cyclic_shift(&mut self, a: NodeId, dy: i64, dx: i64) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "cyclic_shift needs [c,h,w], got {s:?}"
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let xd = self.data(a);
        let mut out = vec![T::zero(); xd.len()];
        for ci in 0..c {
            for y in 0..h {
                let sy = (y as i64 + dy).rem_euclid(h as i64) as usize;
                for x in 0..w {
                    let sx = (x as i64 + dx).rem_euclid(w as i64) as usize;
                    out[ci * h * w + y * w + x] = xd[ci * h * w + sy * w + sx];
                }
            }
        }
        Ok(self.push(Tensor::from_vec(s, out)?, Op::CyclicShift { x: a, dy, dx }))
    }

    /// Rearrange `[c,h,w]` into a token matrix `[(h/win)*(w/win)*win*win, c]`
    /// whose rows are grouped window by window (row-major inside each
    /// window, windows in row-major grid order).
    pub fn window_partition(&mut self, a: NodeId, window: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || window == 0 || !s[1].is_multiple_of(window) || !s[2].is_multiple_of(window) {
            return Err(Error::Constraint(format!(
                "window_partition: window {window} must divide token grid {}x{}",
                s.get(1).copied().unwrap_or(0),
                s.get(2).copied().unwrap_or(0)
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let xd = self.data(a);
        let rows = h * w;
        let mut out = vec![T::zero(); rows * c];
        for (r, (y, x)) in WindowOrder::new(h, w, window).enumerate() {
            for ci in 0..c {
                out[r * c + ci] = xd[ci * h * w + y * w + x];
            }
        }
        Ok(self.push(
            Tensor::from_vec(vec![rows, c], out)?,
            Op::WindowPartition { x: a, window },
        ))
    }

    /// Inverse of [`Tape::window_partition`].
    pub fn window_unpartition(
        &mut self,
        a: NodeId,
        window: usize,
        grid_h: usize,
        grid_w: usize,
    ) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] != grid_h * grid_w || !grid_h.is_multiple_of(window) || !grid_w.is_multiple_of(window) {
            return Err(Error::ShapeMismatch(format!(
                "window_unpartition: got {s:?}, expected [{}, c] with window {window}",
                grid_h * grid_w
            )));
        }
        let c = s[1];
        let xd = self.data(a);
        let mut out = vec![T::zero(); c * grid_h * grid_w];
        for (r, (y, x)) in WindowOrder::new(grid_h, grid_w, window).enumerate() {
            for ci in 0..c {
                out[ci * grid_h * grid_w + y * grid_w + x] = xd[r * c + ci];
            }
        }
        Ok(self.push(
            Tensor::from_vec(vec![c, grid_h, grid_w], out)?,
            Op::WindowUnpartition {
                x: a,
                window,
                grid_h,
                grid_w,
            },
        ))
    }

    /// Contiguous row slice of a 2-D tensor.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || start + len > s[0] {
            return Err(Error::ShapeMismatch(format!(
                "slice_rows [{start}, {start}+{len}) out of {s:?}"
            )));
        }
        let c = s[1];
        let out = self.data(a)[start * c..(start + len) * c].to_vec();
        Ok(self.push(
            Tensor::from_vec(vec![len, c], out)?,
            Op::SliceRows { x: a, start, len },
        ))
    }

    /// Stack 2-D tensors with equal column counts, top to bottom.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument(
                "concat_rows needs at least one part".to_string(),
            ));
        }
        let c = self.shape(parts[0]).get(1).copied().unwrap_or(0);
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != c {
                return Err(Error::ShapeMismatch(format!(
                    "concat_rows column mismatch: expected [*, {c}], got {s:?}"
                )));
            }
            rows += s[0];
        }
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        Ok(self.push(
            Tensor::from_vec(vec![rows, c], out)?,
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    /// Contiguous column slice of a 2-D tensor.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::ShapeMismatch(format!(
                "slice_cols [{start}, {start}+{len}) out of {s:?}"
            )));
        }
        let (r, c) = (s[0], s[1]);
        let xd = self.data(a);
        let mut out = Vec::with_capacity(r * len);
        for row in 0..r {
            out.extend_from_slice(&xd[row * c + start..row * c + start + len]);
        }
        Ok(self.push(
            Tensor::from_vec(vec![r, len], out)?,
            Op::SliceCols { x: a, start, len },
        ))
    }

    /// Concatenate 2-D tensors with equal row counts, left to right.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument(
                "concat_cols needs at least one part".to_string(),
            ));
        }
        let r = self.shape(parts[0]).first().copied().unwrap_or(0);
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != r {
                return Err(Error::ShapeMismatch(format!(
                    "concat_cols row mismatch: expected [{r}, *], got {s:?}"
                )));
            }
            cols += s[1];
        }
        let mut out = vec![T::zero(); r * cols];
        let mut off = 0;
        for &p in parts {
            let pc = self.shape(p)[1];
            let pd = self.data(p);
            for row in 0..r {
                out[row * cols + off..row * cols + off + pc]
                    .copy_from_slice(&pd[row * pc..(row + 1) * pc]);
            }
            off += pc;
        }
        Ok(self.push(
            Tensor::from_vec(vec![r, cols], out)?,
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    // ── losses ────────────────────────────────────────────────────────

    /// Mean cross-entropy of `logits[c, ...]` against integer labels (one
    /// per position, `labels.len()` = product of the non-channel axes).
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        let channels = *s.first().ok_or_else(|| {
            Error::ShapeMismatch("softmax_cross_entropy needs at least one axis".to_string())
        })?;
        let positions = self.data(logits).len() / channels;
        if labels.len() != positions {
            return Err(Error::ShapeMismatch(format!(
                "softmax_cross_entropy: {} labels for {positions} positions",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= channels) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {channels} classes"
            )));
        }
        let xd = self.data(logits);
        let mut total = T::zero();
        for (p, &label) in labels.iter().enumerate() {
            let mut max = xd[p];
            for c in 1..channels {
                max = max.max(xd[c * positions + p]);
            }
            let mut lse = T::zero();
            for c in 0..channels {
                lse += (xd[c * positions + p] - max).exp();
            }
            let lse = max + lse.ln();
            total += lse - xd[label * positions + p];
        }
        let loss = total / cast::<T>(positions as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Soft-Dice loss `1 - mean_c dice_c` on class probabilities
    /// `probs[c, ...]` (see [`Tape::dice_loss`] for the logits entry point).
    pub fn soft_dice(&mut self, probs: NodeId, labels: &[usize], smooth: T) -> Result<NodeId> {
        let s = self.shape(probs).to_vec();
        let channels = *s.first().ok_or_else(|| {
            Error::ShapeMismatch("soft_dice needs at least one axis".to_string())
        })?;
        let positions = self.data(probs).len() / channels;
        if labels.len() != positions {
            return Err(Error::ShapeMismatch(format!(
                "soft_dice: {} labels for {positions} positions",
                labels.len()
            )));
        }
        let pd = self.data(probs);
        let mut dice_sum = T::zero();
        for c in 0..channels {
            let (num, den) = dice_terms(pd, labels, c, positions, smooth);
            dice_sum += num / den;
        }
        let loss = T::one() - dice_sum / cast::<T>(channels as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftDice {
                probs,
                labels: labels.to_vec(),
                smooth,
            },
        ))
    }

    /// Soft-Dice loss straight from logits: channel softmax, then soft dice.
    pub fn dice_loss(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let probs = self.softmax_channels(logits)?;
        self.soft_dice(probs, labels, cast::<T>(1e-6))
    }

    // ── backward ──────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node. Adds `d loss / d node` into
    /// every node's gradient buffer; repeated calls accumulate.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(Error::NonScalarLoss { numel });
        }
        let mut adjoint: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        adjoint[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adjoint[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut adjoint);
            adjoint[i] = Some(g);
        }

        for (node, adj) in self.nodes.iter_mut().zip(adjoint) {
            if let Some(adj) = adj {
                for (dst, src) in node.value.grad_mut().iter_mut().zip(adj) {
                    *dst += src;
                }
            }
        }
        Ok(())
    }

    /// Apply the backward rule of node `i`, scattering contributions into
    /// the adjoints of its inputs.
    fn propagate(&self, i: usize, g: &[T], adjoint: &mut [Option<Vec<T>>]) {
        let op = &self.nodes[i].op;
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_into(self.adj(adjoint, *a), g);
                add_into(self.adj(adjoint, *b), g);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let ga = self.adj(adjoint, *a);
                for ((dst, &gv), &bv) in ga.iter_mut().zip(g).zip(bd) {
                    *dst += gv * bv;
                }
                let gb = self.adj(adjoint, *b);
                for ((dst, &gv), &av) in gb.iter_mut().zip(g).zip(ad) {
                    *dst += gv * av;
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                let ga = self.adj(adjoint, *a);
                for (dst, &gv) in ga.iter_mut().zip(g) {
                    *dst += gv * c;
                }
            }
            Op::Sum(a) => {
                let ga = self.adj(adjoint, *a);
                for dst in ga.iter_mut() {
                    *dst += g[0];
                }
            }
            Op::Mean(a) => {
                let n = cast::<T>(self.data(*a).len() as f64);
                let gv = g[0] / n;
                let ga = self.adj(adjoint, *a);
                for dst in ga.iter_mut() {
                    *dst += gv;
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                // dA = G @ B^T, dB = A^T @ G
                let bt = transpose_raw(self.data(*b), k, n);
                let da = matmul_raw(g, &bt, m, n, k);
                add_into(self.adj(adjoint, *a), &da);
                let at = transpose_raw(self.data(*a), m, k);
                let db = matmul_raw(&at, g, k, m, n);
                add_into(self.adj(adjoint, *b), &db);
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let gt = transpose_raw(g, s[1], s[0]);
                add_into(self.adj(adjoint, *a), &gt);
            }
            Op::Linear { x, w, b } => {
                let (n, din) = (self.shape(*x)[0], self.shape(*x)[1]);
                let dout = self.shape(*w)[1];
                let wt = transpose_raw(self.data(*w), din, dout);
                let dx = matmul_raw(g, &wt, n, dout, din);
                add_into(self.adj(adjoint, *x), &dx);
                let xt = transpose_raw(self.data(*x), n, din);
                let dw = matmul_raw(&xt, g, din, n, dout);
                add_into(self.adj(adjoint, *w), &dw);
                let gb = self.adj(adjoint, *b);
                for row in g.chunks_exact(dout) {
                    for (dst, &gv) in gb.iter_mut().zip(row) {
                        *dst += gv;
                    }
                }
            }
            Op::Gelu(a) => {
                let xd = self.data(*a);
                let ga = self.adj(adjoint, *a);
                for ((dst, &gv), &x) in ga.iter_mut().zip(g).zip(xd) {
                    *dst += gv * (normal_cdf(x) + x * normal_pdf(x));
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                self.layer_norm_backward(*x, *gain, *bias, *eps, g, adjoint);
            }
            Op::SoftmaxRows(a) => {
                let c = self.shape(*a)[1];
                let sd = self.nodes[i].value.data();
                let ga = self.adj(adjoint, *a);
                for ((grow, srow), drow) in g
                    .chunks_exact(c)
                    .zip(sd.chunks_exact(c))
                    .zip(ga.chunks_exact_mut(c))
                {
                    let dot = grow
                        .iter()
                        .zip(srow)
                        .fold(T::zero(), |acc, (&gv, &sv)| acc + gv * sv);
                    for ((dst, &sv), &gv) in drow.iter_mut().zip(srow).zip(grow) {
                        *dst += sv * (gv - dot);
                    }
                }
            }
            Op::SoftmaxChannels(a) => {
                let channels = self.shape(*a)[0];
                let positions = self.data(*a).len() / channels;
                let sd = self.nodes[i].value.data();
                let ga = self.adj(adjoint, *a);
                for p in 0..positions {
                    let mut dot = T::zero();
                    for c in 0..channels {
                        dot += g[c * positions + p] * sd[c * positions + p];
                    }
                    for c in 0..channels {
                        let idx = c * positions + p;
                        ga[idx] += sd[idx] * (g[idx] - dot);
                    }
                }
            }
            Op::Conv2d { x, k, stride, pad } => {
                let sx = self.shape(*x);
                let sk = self.shape(*k);
                let dims = (sx[0], sx[1], sx[2]);
                let kd = (sk[0], sk[2]);
                let (stride, pad) = (*stride, *pad);
                {
                    let kernels = self.data(*k);
                    let dx = self.adj(adjoint, *x);
                    conv::input_grad(g, dims, kernels, kd, stride, pad, dx);
                }
                {
                    let xd = self.data(*x);
                    let dk = self.adj(adjoint, *k);
                    conv::kernel_grad(xd, dims, g, kd, stride, pad, dk);
                }
            }
            Op::AddChannelBias { x, b } => {
                add_into(self.adj(adjoint, *x), g);
                let plane = self.shape(*x)[1] * self.shape(*x)[2];
                let gb = self.adj(adjoint, *b);
                for (c, dst) in gb.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for &gv in &g[c * plane..(c + 1) * plane] {
                        acc += gv;
                    }
                    *dst += acc;
                }
            }
            Op::ConcatChannels(parts) => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let n = self.data(p).len();
                    add_into(self.adj(adjoint, p), &g[off..off + n]);
                    off += n;
                }
            }
            Op::MeanPool2(a) => {
                let s = self.shape(*a);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h / 2, w / 2);
                let quarter = cast::<T>(0.25);
                let ga = self.adj(adjoint, *a);
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[ci * oh * ow + oy * ow + ox] * quarter;
                            let base = ci * h * w + 2 * oy * w + 2 * ox;
                            ga[base] += gv;
                            ga[base + 1] += gv;
                            ga[base + w] += gv;
                            ga[base + w + 1] += gv;
                        }
                    }
                }
            }
            Op::UpsampleNearest2(a) => {
                let s = self.shape(*a);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (2 * h, 2 * w);
                let ga = self.adj(adjoint, *a);
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            ga[ci * h * w + (oy / 2) * w + ox / 2] +=
                                g[ci * oh * ow + oy * ow + ox];
                        }
                    }
                }
            }
            Op::CyclicShift { x, dy, dx } => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (dy, dx) = (*dy, *dx);
                let ga = self.adj(adjoint, *x);
                for ci in 0..c {
                    for y in 0..h {
                        let sy = (y as i64 + dy).rem_euclid(h as i64) as usize;
                        for xx in 0..w {
                            let sx = (xx as i64 + dx).rem_euclid(w as i64) as usize;
                            ga[ci * h * w + sy * w + sx] += g[ci * h * w + y * w + xx];
                        }
                    }
                }
            }
            Op::WindowPartition { x, window } => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let window = *window;
                let ga = self.adj(adjoint, *x);
                for (r, (y, xx)) in WindowOrder::new(h, w, window).enumerate() {
                    for ci in 0..c {
                        ga[ci * h * w + y * w + xx] += g[r * c + ci];
                    }
                }
            }
            Op::WindowUnpartition {
                x,
                window,
                grid_h,
                grid_w,
            } => {
                let c = self.shape(*x)[1];
                let (window, grid_h, grid_w) = (*window, *grid_h, *grid_w);
                let ga = self.adj(adjoint, *x);
                for (r, (y, xx)) in WindowOrder::new(grid_h, grid_w, window).enumerate() {
                    for ci in 0..c {
                        ga[r * c + ci] += g[ci * grid_h * grid_w + y * grid_w + xx];
                    }
                }
            }
            Op::SliceRows { x, start, len } => {
                let c = self.shape(*x)[1];
                let (start, len) = (*start, *len);
                let ga = self.adj(adjoint, *x);
                add_into(&mut ga[start * c..(start + len) * c], g);
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let n = self.data(p).len();
                    add_into(self.adj(adjoint, p), &g[off..off + n]);
                    off += n;
                }
            }
            Op::SliceCols { x, start, len } => {
                let s = self.shape(*x);
                let (rows, cols) = (s[0], s[1]);
                let (start, len) = (*start, *len);
                let ga = self.adj(adjoint, *x);
                for row in 0..rows {
                    add_into(
                        &mut ga[row * cols + start..row * cols + start + len],
                        &g[row * len..(row + 1) * len],
                    );
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let rows = self.shape(parts[0])[0];
                let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
                let mut off = 0;
                for p in parts {
                    let pc = self.shape(p)[1];
                    let ga = self.adj(adjoint, p);
                    for row in 0..rows {
                        add_into(
                            &mut ga[row * pc..(row + 1) * pc],
                            &g[row * total + off..row * total + off + pc],
                        );
                    }
                    off += pc;
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let channels = self.shape(*logits)[0];
                let positions = labels.len();
                let xd = self.data(*logits);
                let scale = g[0] / cast::<T>(positions as f64);
                let labels = labels.clone();
                let ga = self.adj(adjoint, *logits);
                let mut col = vec![T::zero(); channels];
                for (p, &label) in labels.iter().enumerate() {
                    for c in 0..channels {
                        col[c] = xd[c * positions + p];
                    }
                    softmax_in_place(&mut col);
                    for c in 0..channels {
                        let y = if c == label { T::one() } else { T::zero() };
                        ga[c * positions + p] += scale * (col[c] - y);
                    }
                }
            }
            Op::SoftDice {
                probs,
                labels,
                smooth,
            } => {
                let channels = self.shape(*probs)[0];
                let positions = labels.len();
                let pd = self.data(*probs);
                let smooth = *smooth;
                let labels = labels.clone();
                let inv_c = cast::<T>(channels as f64).recip();
                let gscale = g[0];
                let ga = self.adj(adjoint, *probs);
                for c in 0..channels {
                    let (num, den) = dice_terms(pd, &labels, c, positions, smooth);
                    let den2 = den * den;
                    for (p, &label) in labels.iter().enumerate() {
                        let y = if label == c { T::one() } else { T::zero() };
                        let two_y = y + y;
                        // d(1 - mean dice)/dp = -(2 y den - num) / den^2 / C
                        ga[c * positions + p] -= gscale * inv_c * (two_y * den - num) / den2;
                    }
                }
            }
        }
    }

    fn layer_norm_backward(
        &self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: T,
        g: &[T],
        adjoint: &mut [Option<Vec<T>>],
    ) {
        let channels = self.shape(x)[0];
        let positions = self.data(x).len() / channels;
        let xd = self.data(x);
        let gd = self.data(gain);
        let cn = cast::<T>(channels as f64);

        let mut dgain = vec![T::zero(); channels];
        let mut dbias = vec![T::zero(); channels];
        {
            let gx = self.adj(adjoint, x);
            for p in 0..positions {
                let (mean, var) = channel_moments(xd, channels, positions, p);
                let inv_std = (var + eps).sqrt().recip();
                let mut sum_dxhat = T::zero();
                let mut sum_dxhat_xhat = T::zero();
                for c in 0..channels {
                    let idx = c * positions + p;
                    let xhat = (xd[idx] - mean) * inv_std;
                    let dxhat = g[idx] * gd[c];
                    dgain[c] += g[idx] * xhat;
                    dbias[c] += g[idx];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                for c in 0..channels {
                    let idx = c * positions + p;
                    let xhat = (xd[idx] - mean) * inv_std;
                    let dxhat = g[idx] * gd[c];
                    gx[idx] +=
                        inv_std * (dxhat - sum_dxhat / cn - xhat * sum_dxhat_xhat / cn);
                }
            }
        }
        add_into(self.adj(adjoint, gain), &dgain);
        add_into(self.adj(adjoint, bias), &dbias);
    }

    /// Workspace adjoint buffer of a node, zero-initialized on first touch.
    fn adj<'a>(&self, adjoint: &'a mut [Option<Vec<T>>], id: NodeId) -> &'a mut [T] {
        let n = self.nodes[id.0].value.numel();
        adjoint[id.0].get_or_insert_with(|| vec![T::zero(); n])
    }
}

/// Iterates token coordinates in window-partition row order.
struct WindowOrder {
    h: usize,
    w: usize,
    window: usize,
    r: usize,
}

impl WindowOrder {
    fn new(h: usize, w: usize, window: usize) -> Self {
        Self { h, w, window, r: 0 }
    }
}

impl Iterator for WindowOrder {
    type Item = (usize, usize);

    fn next(&mut self) -> Option<(usize, usize)> {
        if self.r >= self.h * self.w {
            return None;
        }
        let nwx = self.w / self.window;
        let win_area = self.window * self.window;
        let (wi, inner) = (self.r / win_area, self.r % win_area);
        let (wy, wx) = (wi / nwx, wi % nwx);
        let (iy, ix) = (inner / self.window, inner % self.window);
        self.r += 1;
        Some((wy * self.window + iy, wx * self.window + ix))
    }
}

#[inline]
fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw<T: Scalar>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Numerically stable softmax of one slice.
fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Standard normal CDF via erf.
#[inline]
fn normal_cdf<T: Scalar>(x: T) -> T {
    let half = cast::<T>(0.5);
    half * (T::one() + (x / T::SQRT_2()).erf())
}

/// Standard normal density.
#[inline]
fn normal_pdf<T: Scalar>(x: T) -> T {
    let inv_sqrt_2pi = cast::<T>(0.398_942_280_401_432_7);
    inv_sqrt_2pi * (-(x * x) * cast::<T>(0.5)).exp()
}

/// Mean and population variance of one channel column.
#[inline]
fn channel_moments<T: Scalar>(xd: &[T], channels: usize, positions: usize, p: usize) -> (T, T) {
    let cn = cast::<T>(channels as f64);
    let mut mean = T::zero();
    for c in 0..channels {
        mean += xd[c * positions + p];
    }
    mean /= cn;
    let mut var = T::zero();
    for c in 0..channels {
        let d = xd[c * positions + p] - mean;
        var += d * d;
    }
    (mean, var / cn)
}

/// Soft-dice numerator/denominator for one class.
#[inline]
fn dice_terms<T: Scalar>(
    probs: &[T],
    labels: &[usize],
    class: usize,
    positions: usize,
    smooth: T,
) -> (T, T) {
    let mut inter = T::zero();
    let mut psum = T::zero();
    let mut gsum = T::zero();
    for (p, &label) in labels.iter().enumerate() {
        let pv = probs[class * positions + p];
        psum += pv;
        if label == class {
            inter += pv;
            gsum += T::one();
        }
    }
    (inter + inter + smooth, psum + gsum + smooth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn tensor(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_delta_kernel_is_identity() {
        let mut tape = Tape::new();
        let img: Vec<f64> = (0..25).map(|i| (i as f64) * 0.3 - 2.0).collect();
        let x = tape.leaf(tensor(&[1, 5, 5], &img));
        let mut delta = vec![0.0; 9];
        delta[4] = 1.0;
        let k = tape.leaf(tensor(&[1, 1, 3, 3], &delta));
        let out = tape.conv2d(x, k).unwrap();
        // Exact equality: the delta kernel copies each pixel untouched.
        assert_eq!(tape.value(out).data(), img.as_slice());
    }

    #[test]
    fn conv2d_zero_kernel_gives_zeros() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[1, 4, 4], &[1.0; 16]));
        let k = tape.leaf(Tensor::zeros(vec![2, 1, 3, 3]));
        let out = tape.conv2d(x, k).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.value(out).shape(), &[2, 4, 4]);
    }

    #[test]
    fn conv2d_all_ones_center_tap() {
        // 3x3 input 1..9 with a 3x3 ones kernel: center output is 45.
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[1, 3, 3], &(1..=9).map(f64::from).collect::<Vec<_>>()));
        let k = tape.leaf(tensor(&[1, 1, 3, 3], &[1.0; 9]));
        let out = tape.conv2d(x, k).unwrap();
        assert_eq!(tape.value(out).data()[4], 45.0);
    }

    #[test]
    fn conv2d_rejects_even_kernel_and_bad_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 4, 4]));
        let k_even = tape.leaf(Tensor::zeros(vec![1, 1, 2, 2]));
        assert!(matches!(tape.conv2d(x, k_even), Err(Error::EvenKernel(2))));
        let k_wrong_cin = tape.leaf(Tensor::zeros(vec![1, 3, 3, 3]));
        assert!(tape.conv2d(x, k_wrong_cin).is_err());
    }

    #[test]
    fn gelu_frozen_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[3], &[0.0, 10.0, 1.0]));
        let y = tape.gelu(x);
        let d = tape.value(y).data();
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 10.0).abs() < 1e-9, "gelu(10) = {}", d[1]);
        // x * Phi(x) at x = 1.
        assert!((d[2] - 0.8413447460685429).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_channels_give_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[4], &[2.5; 4]));
        let gain = tape.leaf(tensor(&[4], &[1.0; 4]));
        let bias = tape.leaf(Tensor::zeros(vec![4]));
        let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_two_channel_symmetry() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[2], &[1.0, 3.0]));
        let gain = tape.leaf(tensor(&[2], &[1.0, 1.0]));
        let bias = tape.leaf(Tensor::zeros(vec![2]));
        let y = tape.layer_norm(x, gain, bias, 1e-12).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-6);
        assert!((d[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_affine_matches_direct_formula() {
        // Channels [0,1,2], gain 2, bias 1, computed straight from the
        // definition in this test.
        let xs = [0.0f64, 1.0, 2.0];
        let mean = 1.0f64;
        let var = 2.0f64 / 3.0;
        let eps = 1e-5f64;
        let expect: Vec<f64> = xs
            .iter()
            .map(|x| 2.0 * (x - mean) / (var + eps).sqrt() + 1.0)
            .collect();

        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[3], &xs));
        let gain = tape.leaf(tensor(&[3], &[2.0; 3]));
        let bias = tape.leaf(tensor(&[3], &[1.0; 3]));
        let y = tape.layer_norm(x, gain, bias, eps).unwrap();
        for (a, e) in tape.value(y).data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_channels_single_part_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[2, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]));
        let y = tape.concat_channels(&[x]).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn concat_channels_preserves_order() {
        let mut tape = Tape::new();
        let a = tape.leaf(tensor(&[1, 2, 2], &[1.0; 4]));
        let b = tape.leaf(tensor(&[1, 2, 2], &[2.0; 4]));
        let y = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 2, 2]);
        assert_eq!(&tape.value(y).data()[..4], &[1.0; 4]);
        assert_eq!(&tape.value(y).data()[4..], &[2.0; 4]);
    }

    #[test]
    fn concat_channels_grad_splits_by_part() {
        let mut tape = Tape::new();
        let a = tape.leaf(tensor(&[1, 2, 2], &[1.0; 4]));
        let b = tape.leaf(tensor(&[2, 2, 2], &[2.0; 8]));
        let y = tape.concat_channels(&[a, b]).unwrap();
        let w = tape.leaf(tensor(&[3, 2, 2], &(0..12).map(f64::from).collect::<Vec<_>>()));
        let p = tape.mul(y, w).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        let expect: Vec<f64> = (0..12).map(f64::from).collect();
        assert_eq!(tape.grad(a).unwrap(), &expect[..4]);
        assert_eq!(tape.grad(b).unwrap(), &expect[4..]);
    }

    #[test]
    fn concat_channels_rejects_spatial_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(vec![1, 2, 2]));
        let b = tape.leaf(Tensor::zeros(vec![1, 3, 2]));
        assert!(tape.concat_channels(&[a, b]).is_err());
    }

    #[test]
    fn add_zero_and_mul_one_are_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[4], &[0.5, -1.0, 2.0, 3.0]));
        let zero = tape.leaf(Tensor::zeros(vec![4]));
        let one = tape.leaf(Tensor::full(vec![4], 1.0));
        let a = tape.add(x, zero).unwrap();
        assert_eq!(tape.value(a).data(), tape.value(x).data());
        let m = tape.mul(x, one).unwrap();
        assert_eq!(tape.value(m).data(), tape.value(x).data());
        let short = tape.leaf(Tensor::zeros(vec![3]));
        assert!(tape.add(x, short).is_err());
    }

    #[test]
    fn linear_with_identity_weights_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let mut eye = Tensor::zeros(vec![3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let w = tape.leaf(eye);
        let b = tape.leaf(Tensor::zeros(vec![3]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[4], &[0.5, -1.0, 2.0, 3.0]));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[2], &[1.0, 2.0]));
        assert!(matches!(
            tape.backward(x),
            Err(Error::NonScalarLoss { numel: 2 })
        ));
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[2], &[1.0, 2.0]));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
        tape.clear_grads();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(tensor(&[1, 4, 4], &(0..16).map(|i| i as f64 * 0.17).collect::<Vec<_>>()));
            let k = tape.leaf(tensor(&[1, 1, 3, 3], &[0.3; 9]));
            let c = tape.conv2d(x, k).unwrap();
            let g = tape.gelu(c);
            let s = tape.sum(g);
            tape.value(s).item().unwrap()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[2, 3], &[0.1, 5.0, -3.0, 2.0, 2.0, 2.0]));
        let s = tape.softmax_rows(x).unwrap();
        for row in tape.value(s).data().chunks_exact(3) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_c() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![4, 2, 2]));
        let loss = tape.softmax_cross_entropy(x, &[0, 1, 2, 3]).unwrap();
        let v = tape.value(loss).item().unwrap();
        assert!((v - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dice_loss_on_perfect_one_hot_is_near_zero() {
        // Logits strongly favoring the true class: soft dice ~ 1, loss ~ 0.
        let labels = [0usize, 1];
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[2, 2], &[50.0, -50.0, -50.0, 50.0]));
        let loss = tape.dice_loss(x, &labels).unwrap();
        assert!(tape.value(loss).item().unwrap() < 1e-6);
    }

    #[test]
    fn mean_pool_and_upsample_shapes_and_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.mean_pool2(x).unwrap();
        assert_eq!(tape.value(p).shape(), &[1, 1, 1]);
        assert_eq!(tape.value(p).data()[0], 2.5);
        let u = tape.upsample_nearest2(x).unwrap();
        assert_eq!(tape.value(u).shape(), &[1, 4, 4]);
        assert_eq!(tape.value(u).data()[0], 1.0);
        assert_eq!(tape.value(u).data()[1], 1.0);
        assert_eq!(tape.value(u).data()[3], 2.0);
    }

    #[test]
    fn cyclic_shift_round_trips() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..16).map(f64::from).collect();
        let x = tape.leaf(tensor(&[1, 4, 4], &data));
        let s = tape.cyclic_shift(x, 2, 1).unwrap();
        let back = tape.cyclic_shift(s, -2, -1).unwrap();
        assert_eq!(tape.value(back).data(), data.as_slice());
        assert_ne!(tape.value(s).data(), data.as_slice());
    }

    #[test]
    fn window_partition_round_trips() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..32).map(f64::from).collect();
        let x = tape.leaf(tensor(&[2, 4, 4], &data));
        let part = tape.window_partition(x, 2).unwrap();
        assert_eq!(tape.value(part).shape(), &[16, 2]);
        // First window row = token (0,0): channel-0 value 0, channel-1 value 16.
        assert_eq!(&tape.value(part).data()[..2], &[0.0, 16.0]);
        // Second row = token (0,1) of the same window.
        assert_eq!(&tape.value(part).data()[2..4], &[1.0, 17.0]);
        let back = tape.window_unpartition(part, 2, 4, 4).unwrap();
        assert_eq!(tape.value(back).data(), data.as_slice());
    }

    #[test]
    fn window_partition_rejects_nondividing_window() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 4, 4]));
        assert!(matches!(
            tape.window_partition(x, 3),
            Err(Error::Constraint(_))
        ));
    }
}
