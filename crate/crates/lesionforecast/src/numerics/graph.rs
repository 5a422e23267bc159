use rayon::prelude::*;

use super::kernels::{col2im, conv_out_len, gemm, im2col, sigmoid, softmax_rows};
use super::{NumericsError, Real, Tensor};

pub type NodeId = usize;

/// Recorded operation together with whatever the backward pass needs.
#[derive(Debug, Default)]
enum Op {
    #[default]
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, Real),
    Silu(NodeId),
    /// x: [b,c,h,w] plus a per-sample channel offset [b,c].
    ChannelBias { x: NodeId, bias: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, padding: usize },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        /// (mean, rstd) per (batch, group), interleaved.
        stats: Vec<Real>,
    },
    Attention {
        x: NodeId,
        w_qkv: NodeId,
        w_out: NodeId,
        heads: usize,
        /// [b, tokens, 3*dim] projections saved from the forward pass.
        qkv: Vec<Real>,
        /// [b, heads, tokens, tokens] softmax rows.
        attn: Vec<Real>,
    },
    EmbedLookup { table: NodeId, rows: Vec<usize> },
    NchwToTokens(NodeId),
    TokensToNchw { x: NodeId, height: usize, width: usize },
    Upsample2x(NodeId),
    ConcatChannels(NodeId, NodeId),
    SliceChannels { x: NodeId, start: usize, len: usize },
    Mean(NodeId),
    Sum(NodeId),
}

/// Reverse-mode tape.
///
/// Node ids are issued in execution order, so the tape order is a
/// topological order and the backward pass is a single reverse sweep.
/// A tape is consumed by [`Graph::backward`]; leaf gradients stay
/// readable afterwards.
pub struct Graph {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<Real>>>,
    ops: Vec<Op>,
    requires: Vec<bool>,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
            consumed: false,
        }
    }

    /// Registers a tensor on the tape. Gradient tracking follows
    /// `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        let requires = tensor.requires_grad;
        self.push(tensor, Op::Leaf, requires)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }

    pub fn grad(&self, id: NodeId) -> Option<&[Real]> {
        self.grads[id].as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool) -> NodeId {
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(op);
        self.requires.push(requires);
        self.values.len() - 1
    }

    fn req(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.requires[i])
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.same_shape("add", a, b)?;
        let v = self.values[a].add_scaled(&self.values[b], 1.0);
        Ok(self.push(v, Op::Add(a, b), self.req(&[a, b])))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.same_shape("sub", a, b)?;
        let v = self.values[a].add_scaled(&self.values[b], -1.0);
        Ok(self.push(v, Op::Sub(a, b), self.req(&[a, b])))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.same_shape("mul", a, b)?;
        let data = self.values[a]
            .data()
            .iter()
            .zip(self.values[b].data())
            .map(|(&x, &y)| x * y)
            .collect();
        let v = Tensor::from_vec(self.values[a].shape(), data)?;
        Ok(self.push(v, Op::Mul(a, b), self.req(&[a, b])))
    }

    pub fn scale(&mut self, a: NodeId, factor: Real) -> NodeId {
        let v = self.values[a].map(|x| x * factor);
        let req = self.requires[a];
        self.push(v, Op::Scale(a, factor), req)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a].map(|x| x * sigmoid(x));
        let req = self.requires[a];
        self.push(v, Op::Silu(a), req)
    }

    // ---- reductions ----

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.values[a].numel() as Real;
        let s: Real = self.values[a].data().iter().sum();
        let req = self.requires[a];
        self.push(Tensor::scalar(s / n), Op::Mean(a), req)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: Real = self.values[a].data().iter().sum();
        let req = self.requires[a];
        self.push(Tensor::scalar(s), Op::Sum(a), req)
    }

    // ---- structured ops ----

    /// Cross-correlation of `x` [b,c_in,h,w] with `w` [c_out,c_in,kh,kw]
    /// plus a per-output-channel bias.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, NumericsError> {
        let xs = self.values[x].shape().to_vec();
        let ws = self.values[w].shape().to_vec();
        if xs.len() != 4 {
            return Err(NumericsError::Rank { op: "conv2d", expected: 4, got: xs });
        }
        if ws.len() != 4 {
            return Err(NumericsError::Rank { op: "conv2d", expected: 4, got: ws });
        }
        let (batch, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, kc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if kc != c_in {
            return Err(NumericsError::Dimension { op: "conv2d", axis: 1, expected: c_in, got: kc });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(NumericsError::Config {
                op: "conv2d",
                reason: format!("kernel spatial dims must be odd, got {kh}x{kw}"),
            });
        }
        if self.values[b].shape() != [c_out] {
            return Err(NumericsError::Dimension {
                op: "conv2d",
                axis: 0,
                expected: c_out,
                got: self.values[b].numel(),
            });
        }
        let oh = conv_out_len(h, kh, stride, padding);
        let ow = conv_out_len(wd, kw, stride, padding);
        let ckk = c_in * kh * kw;
        let mut out = vec![0.0; batch * c_out * oh * ow];
        let wdat = self.values[w].data();
        let bdat = self.values[b].data();
        let xdat = self.values[x].data();
        out.par_chunks_mut(c_out * oh * ow)
            .zip(xdat.par_chunks(c_in * h * wd))
            .for_each(|(yi, xi)| {
                let mut cols = vec![0.0; ckk * oh * ow];
                im2col(xi, c_in, h, wd, kh, kw, stride, padding, &mut cols);
                gemm(c_out, ckk, oh * ow, 1.0, wdat, false, &cols, false, 0.0, yi);
                for co in 0..c_out {
                    let bias = bdat[co];
                    for v in &mut yi[co * oh * ow..(co + 1) * oh * ow] {
                        *v += bias;
                    }
                }
            });
        let v = Tensor::from_vec(&[batch, c_out, oh, ow], out)?;
        Ok(self.push(v, Op::Conv2d { x, w, b, stride, padding }, self.req(&[x, w, b])))
    }

    /// y = x·wᵀ + b for x [n, d_in], w [d_out, d_in], b [d_out].
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let xs = self.values[x].shape().to_vec();
        let ws = self.values[w].shape().to_vec();
        if xs.len() != 2 {
            return Err(NumericsError::Rank { op: "linear", expected: 2, got: xs });
        }
        let (n, d_in) = (xs[0], xs[1]);
        let (d_out, wk) = (ws[0], ws[1]);
        if wk != d_in {
            return Err(NumericsError::Dimension { op: "linear", axis: 1, expected: d_in, got: wk });
        }
        let mut out = vec![0.0; n * d_out];
        gemm(n, d_in, d_out, 1.0, self.values[x].data(), false, self.values[w].data(), true, 0.0, &mut out);
        let bdat = self.values[b].data();
        for r in 0..n {
            for (o, bias) in out[r * d_out..(r + 1) * d_out].iter_mut().zip(bdat) {
                *o += bias;
            }
        }
        let v = Tensor::from_vec(&[n, d_out], out)?;
        Ok(self.push(v, Op::Linear { x, w, b }, self.req(&[x, w, b])))
    }

    /// Group normalization with per-channel affine parameters.
    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: Real,
    ) -> Result<NodeId, NumericsError> {
        let xs = self.values[x].shape().to_vec();
        if xs.len() != 4 {
            return Err(NumericsError::Rank { op: "group_norm", expected: 4, got: xs });
        }
        let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if c % groups != 0 {
            return Err(NumericsError::Config {
                op: "group_norm",
                reason: format!("{c} channels not divisible into {groups} groups"),
            });
        }
        let cs = c / groups;
        let m = cs * h * w;
        let xdat = self.values[x].data();
        let gdat = self.values[gamma].data();
        let bdat = self.values[beta].data();
        let mut out = vec![0.0; xdat.len()];
        let mut stats = vec![0.0; batch * groups * 2];
        for bi in 0..batch {
            for g in 0..groups {
                let start = bi * c * h * w + g * cs * h * w;
                let xg = &xdat[start..start + m];
                let mean: Real = xg.iter().sum::<Real>() / m as Real;
                let var: Real = xg.iter().map(|&v| (v - mean) * (v - mean)).sum::<Real>() / m as Real;
                let rstd = 1.0 / (var + eps).sqrt();
                stats[(bi * groups + g) * 2] = mean;
                stats[(bi * groups + g) * 2 + 1] = rstd;
                for ci in 0..cs {
                    let ch = g * cs + ci;
                    let off = start + ci * h * w;
                    for k in 0..h * w {
                        out[off + k] = gdat[ch] * (xdat[off + k] - mean) * rstd + bdat[ch];
                    }
                }
            }
        }
        let v = Tensor::from_vec(&xs, out)?;
        let req = self.req(&[x, gamma, beta]);
        Ok(self.push(v, Op::GroupNorm { x, gamma, beta, groups, stats }, req))
    }

    /// Multi-head self-attention over x [b, tokens, dim] with packed
    /// projections w_qkv [3*dim, dim] and output w_out [dim, dim].
    pub fn self_attention(
        &mut self,
        x: NodeId,
        w_qkv: NodeId,
        w_out: NodeId,
        heads: usize,
    ) -> Result<NodeId, NumericsError> {
        let xs = self.values[x].shape().to_vec();
        if xs.len() != 3 {
            return Err(NumericsError::Rank { op: "self_attention", expected: 3, got: xs });
        }
        let (batch, t, d) = (xs[0], xs[1], xs[2]);
        if d % heads != 0 {
            return Err(NumericsError::Config {
                op: "self_attention",
                reason: format!("dim {d} not divisible by {heads} heads"),
            });
        }
        if self.values[w_qkv].shape() != [3 * d, d] {
            return Err(NumericsError::Dimension {
                op: "self_attention",
                axis: 0,
                expected: 3 * d,
                got: self.values[w_qkv].shape()[0],
            });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as Real).sqrt();
        let xdat = self.values[x].data();
        let wq = self.values[w_qkv].data();
        let wo = self.values[w_out].data();
        let mut qkv = vec![0.0; batch * t * 3 * d];
        let mut attn = vec![0.0; batch * heads * t * t];
        let mut out = vec![0.0; batch * t * d];
        out.par_chunks_mut(t * d)
            .zip(qkv.par_chunks_mut(t * 3 * d))
            .zip(attn.par_chunks_mut(heads * t * t))
            .zip(xdat.par_chunks(t * d))
            .for_each(|(((yi, qkv_i), attn_i), xi)| {
                gemm(t, d, 3 * d, 1.0, xi, false, wq, true, 0.0, qkv_i);
                let mut o = vec![0.0; t * d];
                let mut qh = vec![0.0; t * dh];
                let mut kh = vec![0.0; t * dh];
                let mut vh = vec![0.0; t * dh];
                for head in 0..heads {
                    for row in 0..t {
                        let base = row * 3 * d + head * dh;
                        qh[row * dh..(row + 1) * dh].copy_from_slice(&qkv_i[base..base + dh]);
                        kh[row * dh..(row + 1) * dh]
                            .copy_from_slice(&qkv_i[base + d..base + d + dh]);
                        vh[row * dh..(row + 1) * dh]
                            .copy_from_slice(&qkv_i[base + 2 * d..base + 2 * d + dh]);
                    }
                    let a = &mut attn_i[head * t * t..(head + 1) * t * t];
                    gemm(t, dh, t, scale, &qh, false, &kh, true, 0.0, a);
                    softmax_rows(a, t, t);
                    let mut oh = vec![0.0; t * dh];
                    gemm(t, t, dh, 1.0, a, false, &vh, false, 0.0, &mut oh);
                    for row in 0..t {
                        o[row * d + head * dh..row * d + (head + 1) * dh]
                            .copy_from_slice(&oh[row * dh..(row + 1) * dh]);
                    }
                }
                gemm(t, d, d, 1.0, &o, false, wo, true, 0.0, yi);
            });
        let v = Tensor::from_vec(&xs, out)?;
        let req = self.req(&[x, w_qkv, w_out]);
        Ok(self.push(v, Op::Attention { x, w_qkv, w_out, heads, qkv, attn }, req))
    }

    /// Adds a per-(sample, channel) offset [b,c] across the spatial grid.
    pub fn channel_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, NumericsError> {
        let xs = self.values[x].shape().to_vec();
        if xs.len() != 4 {
            return Err(NumericsError::Rank { op: "channel_bias", expected: 4, got: xs });
        }
        let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if self.values[bias].shape() != [batch, c] {
            return Err(NumericsError::Dimension {
                op: "channel_bias",
                axis: 1,
                expected: c,
                got: *self.values[bias].shape().last().unwrap_or(&0),
            });
        }
        let bdat = self.values[bias].data();
        let mut out = self.values[x].data().to_vec();
        for bi in 0..batch {
            for ci in 0..c {
                let off = (bi * c + ci) * h * w;
                let add = bdat[bi * c + ci];
                for v in &mut out[off..off + h * w] {
                    *v += add;
                }
            }
        }
        let v = Tensor::from_vec(&xs, out)?;
        Ok(self.push(v, Op::ChannelBias { x, bias }, self.req(&[x, bias])))
    }

    /// Row lookup into an embedding table [rows, dim].
    pub fn embed_lookup(&mut self, table: NodeId, rows: &[usize]) -> Result<NodeId, NumericsError> {
        let ts = self.values[table].shape().to_vec();
        if ts.len() != 2 {
            return Err(NumericsError::Rank { op: "embed_lookup", expected: 2, got: ts });
        }
        let (r, d) = (ts[0], ts[1]);
        for &row in rows {
            if row >= r {
                return Err(NumericsError::Dimension { op: "embed_lookup", axis: 0, expected: r, got: row });
            }
        }
        let tdat = self.values[table].data();
        let mut out = vec![0.0; rows.len() * d];
        for (i, &row) in rows.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(&tdat[row * d..(row + 1) * d]);
        }
        let v = Tensor::from_vec(&[rows.len(), d], out)?;
        let req = self.requires[table];
        Ok(self.push(v, Op::EmbedLookup { table, rows: rows.to_vec() }, req))
    }

    /// [b,c,h,w] -> [b, h*w, c] token layout for attention.
    pub fn nchw_to_tokens(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let xs = self.values[x].shape().to_vec();
        if xs.len() != 4 {
            return Err(NumericsError::Rank { op: "nchw_to_tokens", expected: 4, got: xs });
        }
        let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let xdat = self.values[x].data();
        let mut out = vec![0.0; xdat.len()];
        for bi in 0..batch {
            for ci in 0..c {
                for k in 0..h * w {
                    out[bi * h * w * c + k * c + ci] = xdat[(bi * c + ci) * h * w + k];
                }
            }
        }
        let v = Tensor::from_vec(&[batch, h * w, c], out)?;
        let req = self.requires[x];
        Ok(self.push(v, Op::NchwToTokens(x), req))
    }

    /// Inverse of [`Graph::nchw_to_tokens`].
    pub fn tokens_to_nchw(&mut self, x: NodeId, height: usize, width: usize) -> Result<NodeId, NumericsError> {
        let xs = self.values[x].shape().to_vec();
        if xs.len() != 3 {
            return Err(NumericsError::Rank { op: "tokens_to_nchw", expected: 3, got: xs });
        }
        let (batch, t, c) = (xs[0], xs[1], xs[2]);
        if t != height * width {
            return Err(NumericsError::Dimension {
                op: "tokens_to_nchw",
                axis: 1,
                expected: height * width,
                got: t,
            });
        }
        let xdat = self.values[x].data();
        let mut out = vec![0.0; xdat.len()];
        for bi in 0..batch {
            for ci in 0..c {
                for k in 0..t {
                    out[(bi * c + ci) * t + k] = xdat[bi * t * c + k * c + ci];
                }
            }
        }
        let v = Tensor::from_vec(&[batch, c, height, width], out)?;
        let req = self.requires[x];
        Ok(self.push(v, Op::TokensToNchw { x, height, width }, req))
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let xs = self.values[x].shape().to_vec();
        if xs.len() != 4 {
            return Err(NumericsError::Rank { op: "upsample2x", expected: 4, got: xs });
        }
        let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let xdat = self.values[x].data();
        let mut out = vec![0.0; batch * c * 4 * h * w];
        for p in 0..batch * c {
            let src = &xdat[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for i in 0..h {
                for j in 0..w {
                    let v = src[i * w + j];
                    dst[(2 * i) * 2 * w + 2 * j] = v;
                    dst[(2 * i) * 2 * w + 2 * j + 1] = v;
                    dst[(2 * i + 1) * 2 * w + 2 * j] = v;
                    dst[(2 * i + 1) * 2 * w + 2 * j + 1] = v;
                }
            }
        }
        let v = Tensor::from_vec(&[batch, c, 2 * h, 2 * w], out)?;
        let req = self.requires[x];
        Ok(self.push(v, Op::Upsample2x(x), req))
    }

    /// Concatenates two [b,c,h,w] tensors along the channel axis.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let sa = self.values[a].shape().to_vec();
        let sb = self.values[b].shape().to_vec();
        if sa.len() != 4 || sb.len() != 4 {
            return Err(NumericsError::Rank { op: "concat_channels", expected: 4, got: sa });
        }
        for axis in [0, 2, 3] {
            if sa[axis] != sb[axis] {
                return Err(NumericsError::Dimension {
                    op: "concat_channels",
                    axis,
                    expected: sa[axis],
                    got: sb[axis],
                });
            }
        }
        let (batch, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let ad = self.values[a].data();
        let bd = self.values[b].data();
        let mut out = vec![0.0; batch * (ca + cb) * hw];
        for bi in 0..batch {
            let dst = &mut out[bi * (ca + cb) * hw..(bi + 1) * (ca + cb) * hw];
            dst[..ca * hw].copy_from_slice(&ad[bi * ca * hw..(bi + 1) * ca * hw]);
            dst[ca * hw..].copy_from_slice(&bd[bi * cb * hw..(bi + 1) * cb * hw]);
        }
        let v = Tensor::from_vec(&[batch, ca + cb, sa[2], sa[3]], out)?;
        Ok(self.push(v, Op::ConcatChannels(a, b), self.req(&[a, b])))
    }

    /// Extracts channels [start, start+len) of a [b,c,h,w] tensor.
    pub fn slice_channels(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, NumericsError> {
        let xs = self.values[x].shape().to_vec();
        if xs.len() != 4 {
            return Err(NumericsError::Rank { op: "slice_channels", expected: 4, got: xs });
        }
        let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if start + len > c {
            return Err(NumericsError::Dimension {
                op: "slice_channels",
                axis: 1,
                expected: c,
                got: start + len,
            });
        }
        let hw = h * w;
        let xdat = self.values[x].data();
        let mut out = vec![0.0; batch * len * hw];
        for bi in 0..batch {
            let src = &xdat[(bi * c + start) * hw..(bi * c + start + len) * hw];
            out[bi * len * hw..(bi + 1) * len * hw].copy_from_slice(src);
        }
        let v = Tensor::from_vec(&[batch, len, h, w], out)?;
        let req = self.requires[x];
        Ok(self.push(v, Op::SliceChannels { x, start, len }, req))
    }

    // ---- backward ----

    /// Runs the reverse sweep from a scalar loss, populating gradients
    /// for every `requires_grad` node. Consumes the tape.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), NumericsError> {
        if self.consumed {
            return Err(NumericsError::TapeConsumed);
        }
        if !self.values[loss].is_scalar() {
            return Err(NumericsError::NonScalarLoss { got: self.values[loss].shape().to_vec() });
        }
        self.consumed = true;
        self.grads[loss] = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            if self.grads[id].is_none() || matches!(self.ops[id], Op::Leaf) {
                continue;
            }
            let go = self.grads[id].take().expect("grad present");
            let op = std::mem::take(&mut self.ops[id]);
            self.backprop(&op, &go);
        }
        Ok(())
    }

    fn accum(&mut self, id: NodeId, f: impl FnOnce(&mut [Real])) {
        if !self.requires[id] {
            return;
        }
        let n = self.values[id].numel();
        let slot = self.grads[id].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn backprop(&mut self, op: &Op, go: &[Real]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(a, |g| g.iter_mut().zip(go).for_each(|(g, &d)| *g += d));
                self.accum(b, |g| g.iter_mut().zip(go).for_each(|(g, &d)| *g += d));
            }
            Op::Sub(a, b) => {
                self.accum(a, |g| g.iter_mut().zip(go).for_each(|(g, &d)| *g += d));
                self.accum(b, |g| g.iter_mut().zip(go).for_each(|(g, &d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let bv = self.values[b].data().to_vec();
                self.accum(a, |g| {
                    for ((g, &d), &y) in g.iter_mut().zip(go).zip(&bv) {
                        *g += d * y;
                    }
                });
                let av = self.values[a].data().to_vec();
                self.accum(b, |g| {
                    for ((g, &d), &x) in g.iter_mut().zip(go).zip(&av) {
                        *g += d * x;
                    }
                });
            }
            Op::Scale(a, factor) => {
                self.accum(a, |g| g.iter_mut().zip(go).for_each(|(g, &d)| *g += d * factor));
            }
            Op::Silu(a) => {
                let xv = self.values[a].data().to_vec();
                self.accum(a, |g| {
                    for ((g, &d), &x) in g.iter_mut().zip(go).zip(&xv) {
                        let s = sigmoid(x);
                        *g += d * (s * (1.0 + x * (1.0 - s)));
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.values[a].numel() as Real;
                let d = go[0] / n;
                self.accum(a, |g| g.iter_mut().for_each(|g| *g += d));
            }
            Op::Sum(a) => {
                let d = go[0];
                self.accum(a, |g| g.iter_mut().for_each(|g| *g += d));
            }
            Op::ChannelBias { x, bias } => {
                self.accum(x, |g| g.iter_mut().zip(go).for_each(|(g, &d)| *g += d));
                let xs = self.values[x].shape();
                let (batch, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                self.accum(bias, |g| {
                    for bi in 0..batch {
                        for ci in 0..c {
                            let off = (bi * c + ci) * hw;
                            g[bi * c + ci] += go[off..off + hw].iter().sum::<Real>();
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, stride, padding } => {
                self.conv2d_backward(x, w, b, stride, padding, go);
            }
            Op::Linear { x, w, b } => {
                let xs = self.values[x].shape().to_vec();
                let ws = self.values[w].shape().to_vec();
                let (n, d_in, d_out) = (xs[0], xs[1], ws[0]);
                let wv = self.values[w].data().to_vec();
                self.accum(x, |g| gemm(n, d_out, d_in, 1.0, go, false, &wv, false, 1.0, g));
                let xv = self.values[x].data().to_vec();
                self.accum(w, |g| gemm(d_out, n, d_in, 1.0, go, true, &xv, false, 1.0, g));
                self.accum(b, |g| {
                    for r in 0..n {
                        for (gi, &d) in g.iter_mut().zip(&go[r * d_out..(r + 1) * d_out]) {
                            *gi += d;
                        }
                    }
                });
            }
            Op::GroupNorm { x, gamma, beta, groups, ref stats } => {
                self.group_norm_backward(x, gamma, beta, groups, stats, go);
            }
            Op::Attention { x, w_qkv, w_out, heads, ref qkv, ref attn } => {
                self.attention_backward(x, w_qkv, w_out, heads, qkv, attn, go);
            }
            Op::EmbedLookup { table, ref rows } => {
                let d = self.values[table].shape()[1];
                self.accum(table, |g| {
                    for (i, &row) in rows.iter().enumerate() {
                        for (gi, &dv) in g[row * d..(row + 1) * d].iter_mut().zip(&go[i * d..(i + 1) * d]) {
                            *gi += dv;
                        }
                    }
                });
            }
            Op::NchwToTokens(x) => {
                let xs = self.values[x].shape();
                let (batch, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                self.accum(x, |g| {
                    for bi in 0..batch {
                        for ci in 0..c {
                            for k in 0..hw {
                                g[(bi * c + ci) * hw + k] += go[bi * hw * c + k * c + ci];
                            }
                        }
                    }
                });
            }
            Op::TokensToNchw { x, height, width } => {
                let xs = self.values[x].shape();
                let (batch, t, c) = (xs[0], xs[1], xs[2]);
                let hw = height * width;
                debug_assert_eq!(t, hw);
                self.accum(x, |g| {
                    for bi in 0..batch {
                        for ci in 0..c {
                            for k in 0..hw {
                                g[bi * t * c + k * c + ci] += go[(bi * c + ci) * hw + k];
                            }
                        }
                    }
                });
            }
            Op::Upsample2x(x) => {
                let xs = self.values[x].shape();
                let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                self.accum(x, |g| {
                    for p in 0..planes {
                        let src = &go[p * 4 * h * w..(p + 1) * 4 * h * w];
                        let dst = &mut g[p * h * w..(p + 1) * h * w];
                        for i in 0..h {
                            for j in 0..w {
                                dst[i * w + j] += src[(2 * i) * 2 * w + 2 * j]
                                    + src[(2 * i) * 2 * w + 2 * j + 1]
                                    + src[(2 * i + 1) * 2 * w + 2 * j]
                                    + src[(2 * i + 1) * 2 * w + 2 * j + 1];
                            }
                        }
                    }
                });
            }
            Op::ConcatChannels(a, b) => {
                let sa = self.values[a].shape().to_vec();
                let sb = self.values[b].shape().to_vec();
                let (batch, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                self.accum(a, |g| {
                    for bi in 0..batch {
                        let src = &go[bi * (ca + cb) * hw..bi * (ca + cb) * hw + ca * hw];
                        for (gi, &d) in g[bi * ca * hw..(bi + 1) * ca * hw].iter_mut().zip(src) {
                            *gi += d;
                        }
                    }
                });
                self.accum(b, |g| {
                    for bi in 0..batch {
                        let src = &go[bi * (ca + cb) * hw + ca * hw..(bi + 1) * (ca + cb) * hw];
                        for (gi, &d) in g[bi * cb * hw..(bi + 1) * cb * hw].iter_mut().zip(src) {
                            *gi += d;
                        }
                    }
                });
            }
            Op::SliceChannels { x, start, len } => {
                let xs = self.values[x].shape();
                let (batch, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                self.accum(x, |g| {
                    for bi in 0..batch {
                        let dst = &mut g[(bi * c + start) * hw..(bi * c + start + len) * hw];
                        for (gi, &d) in dst.iter_mut().zip(&go[bi * len * hw..(bi + 1) * len * hw]) {
                            *gi += d;
                        }
                    }
                });
            }
        }
    }

    fn conv2d_backward(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
        go: &[Real],
    ) {
        let xs = self.values[x].shape().to_vec();
        let ws = self.values[w].shape().to_vec();
        let (batch, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let oh = conv_out_len(h, kh, stride, padding);
        let ow = conv_out_len(wd, kw, stride, padding);
        let ckk = c_in * kh * kw;
        let need_x = self.requires[x];
        let need_w = self.requires[w];
        let need_b = self.requires[b];
        let xdat = self.values[x].data();
        let wdat = self.values[w].data();

        // Per-sample partials, folded in sample order so accumulation is
        // deterministic regardless of thread count.
        let partials: Vec<(Vec<Real>, Vec<Real>, Vec<Real>)> = (0..batch)
            .into_par_iter()
            .map(|bi| {
                let goi = &go[bi * c_out * oh * ow..(bi + 1) * c_out * oh * ow];
                let xi = &xdat[bi * c_in * h * wd..(bi + 1) * c_in * h * wd];
                let mut dw_i = Vec::new();
                let mut db_i = Vec::new();
                let mut dx_i = Vec::new();
                if need_w || need_x {
                    if need_w {
                        let mut cols = vec![0.0; ckk * oh * ow];
                        im2col(xi, c_in, h, wd, kh, kw, stride, padding, &mut cols);
                        dw_i = vec![0.0; c_out * ckk];
                        gemm(c_out, oh * ow, ckk, 1.0, goi, false, &cols, true, 0.0, &mut dw_i);
                    }
                    if need_x {
                        let mut dcols = vec![0.0; ckk * oh * ow];
                        gemm(ckk, c_out, oh * ow, 1.0, wdat, true, goi, false, 0.0, &mut dcols);
                        dx_i = vec![0.0; c_in * h * wd];
                        col2im(&dcols, c_in, h, wd, kh, kw, stride, padding, &mut dx_i);
                    }
                }
                if need_b {
                    db_i = (0..c_out)
                        .map(|co| goi[co * oh * ow..(co + 1) * oh * ow].iter().sum())
                        .collect();
                }
                (dx_i, dw_i, db_i)
            })
            .collect();

        if need_x {
            self.accum(x, |g| {
                for (bi, (dx_i, _, _)) in partials.iter().enumerate() {
                    let dst = &mut g[bi * c_in * h * wd..(bi + 1) * c_in * h * wd];
                    for (gi, &d) in dst.iter_mut().zip(dx_i) {
                        *gi += d;
                    }
                }
            });
        }
        if need_w {
            self.accum(w, |g| {
                for (_, dw_i, _) in &partials {
                    for (gi, &d) in g.iter_mut().zip(dw_i) {
                        *gi += d;
                    }
                }
            });
        }
        if need_b {
            self.accum(b, |g| {
                for (_, _, db_i) in &partials {
                    for (gi, &d) in g.iter_mut().zip(db_i) {
                        *gi += d;
                    }
                }
            });
        }
    }

    fn group_norm_backward(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        stats: &[Real],
        go: &[Real],
    ) {
        let xs = self.values[x].shape().to_vec();
        let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let cs = c / groups;
        let m = cs * h * w;
        let xdat = self.values[x].data().to_vec();
        let gdat = self.values[gamma].data().to_vec();

        self.accum(gamma, |g| {
            for bi in 0..batch {
                for ch in 0..c {
                    let grp = ch / cs;
                    let mean = stats[(bi * groups + grp) * 2];
                    let rstd = stats[(bi * groups + grp) * 2 + 1];
                    let off = (bi * c + ch) * h * w;
                    let mut s = 0.0;
                    for k in 0..h * w {
                        s += go[off + k] * (xdat[off + k] - mean) * rstd;
                    }
                    g[ch] += s;
                }
            }
        });
        self.accum(beta, |g| {
            for bi in 0..batch {
                for ch in 0..c {
                    let off = (bi * c + ch) * h * w;
                    g[ch] += go[off..off + h * w].iter().sum::<Real>();
                }
            }
        });
        self.accum(x, |g| {
            for bi in 0..batch {
                for grp in 0..groups {
                    let mean = stats[(bi * groups + grp) * 2];
                    let rstd = stats[(bi * groups + grp) * 2 + 1];
                    let start = bi * c * h * w + grp * cs * h * w;
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for ci in 0..cs {
                        let ch = grp * cs + ci;
                        let off = start + ci * h * w;
                        for k in 0..h * w {
                            let dxh = go[off + k] * gdat[ch];
                            let xh = (xdat[off + k] - mean) * rstd;
                            s1 += dxh;
                            s2 += dxh * xh;
                        }
                    }
                    let inv_m = 1.0 / m as Real;
                    for ci in 0..cs {
                        let ch = grp * cs + ci;
                        let off = start + ci * h * w;
                        for k in 0..h * w {
                            let dxh = go[off + k] * gdat[ch];
                            let xh = (xdat[off + k] - mean) * rstd;
                            g[off + k] += rstd * (dxh - (s1 + xh * s2) * inv_m);
                        }
                    }
                }
            }
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &mut self,
        x: NodeId,
        w_qkv: NodeId,
        w_out: NodeId,
        heads: usize,
        qkv: &[Real],
        attn: &[Real],
        go: &[Real],
    ) {
        let xs = self.values[x].shape().to_vec();
        let (batch, t, d) = (xs[0], xs[1], xs[2]);
        let dh = d / heads;
        let scale = 1.0 / (dh as Real).sqrt();
        let xdat = self.values[x].data();
        let wq = self.values[w_qkv].data();
        let wo = self.values[w_out].data();

        let partials: Vec<(Vec<Real>, Vec<Real>, Vec<Real>)> = (0..batch)
            .into_par_iter()
            .map(|bi| {
                let goi = &go[bi * t * d..(bi + 1) * t * d];
                let xi = &xdat[bi * t * d..(bi + 1) * t * d];
                let qkv_i = &qkv[bi * t * 3 * d..(bi + 1) * t * 3 * d];
                let attn_i = &attn[bi * heads * t * t..(bi + 1) * heads * t * t];

                // Recompute the concatenated head outputs for dW_out.
                let mut o = vec![0.0; t * d];
                let mut qh = vec![0.0; t * dh];
                let mut kh = vec![0.0; t * dh];
                let mut vh = vec![0.0; t * dh];
                for head in 0..heads {
                    for row in 0..t {
                        let base = row * 3 * d + head * dh;
                        qh[row * dh..(row + 1) * dh].copy_from_slice(&qkv_i[base..base + dh]);
                        kh[row * dh..(row + 1) * dh].copy_from_slice(&qkv_i[base + d..base + d + dh]);
                        vh[row * dh..(row + 1) * dh]
                            .copy_from_slice(&qkv_i[base + 2 * d..base + 2 * d + dh]);
                    }
                    let a = &attn_i[head * t * t..(head + 1) * t * t];
                    let mut oh = vec![0.0; t * dh];
                    gemm(t, t, dh, 1.0, a, false, &vh, false, 0.0, &mut oh);
                    for row in 0..t {
                        o[row * d + head * dh..row * d + (head + 1) * dh]
                            .copy_from_slice(&oh[row * dh..(row + 1) * dh]);
                    }
                }

                let mut dwout_i = vec![0.0; d * d];
                gemm(d, t, d, 1.0, goi, true, &o, false, 0.0, &mut dwout_i);
                let mut d_o = vec![0.0; t * d];
                gemm(t, d, d, 1.0, goi, false, wo, false, 0.0, &mut d_o);

                let mut dqkv = vec![0.0; t * 3 * d];
                for head in 0..heads {
                    for row in 0..t {
                        let base = row * 3 * d + head * dh;
                        qh[row * dh..(row + 1) * dh].copy_from_slice(&qkv_i[base..base + dh]);
                        kh[row * dh..(row + 1) * dh].copy_from_slice(&qkv_i[base + d..base + d + dh]);
                        vh[row * dh..(row + 1) * dh]
                            .copy_from_slice(&qkv_i[base + 2 * d..base + 2 * d + dh]);
                    }
                    let a = &attn_i[head * t * t..(head + 1) * t * t];
                    let mut doh = vec![0.0; t * dh];
                    for row in 0..t {
                        doh[row * dh..(row + 1) * dh]
                            .copy_from_slice(&d_o[row * d + head * dh..row * d + (head + 1) * dh]);
                    }
                    // dA = dO Vᵀ ; dV = Aᵀ dO
                    let mut da = vec![0.0; t * t];
                    gemm(t, dh, t, 1.0, &doh, false, &vh, true, 0.0, &mut da);
                    let mut dvh = vec![0.0; t * dh];
                    gemm(t, t, dh, 1.0, a, true, &doh, false, 0.0, &mut dvh);
                    // softmax rows backward
                    let mut ds = vec![0.0; t * t];
                    for row in 0..t {
                        let ar = &a[row * t..(row + 1) * t];
                        let dar = &da[row * t..(row + 1) * t];
                        let dot: Real = ar.iter().zip(dar).map(|(&p, &d)| p * d).sum();
                        for col in 0..t {
                            ds[row * t + col] = ar[col] * (dar[col] - dot);
                        }
                    }
                    // dQ = scale * dS K ; dK = scale * dSᵀ Q
                    let mut dqh = vec![0.0; t * dh];
                    gemm(t, t, dh, scale, &ds, false, &kh, false, 0.0, &mut dqh);
                    let mut dkh = vec![0.0; t * dh];
                    gemm(t, t, dh, scale, &ds, true, &qh, false, 0.0, &mut dkh);
                    for row in 0..t {
                        let base = row * 3 * d + head * dh;
                        dqkv[base..base + dh].copy_from_slice(&dqh[row * dh..(row + 1) * dh]);
                        dqkv[base + d..base + d + dh].copy_from_slice(&dkh[row * dh..(row + 1) * dh]);
                        dqkv[base + 2 * d..base + 2 * d + dh]
                            .copy_from_slice(&dvh[row * dh..(row + 1) * dh]);
                    }
                }

                let mut dx_i = vec![0.0; t * d];
                gemm(t, 3 * d, d, 1.0, &dqkv, false, wq, false, 0.0, &mut dx_i);
                let mut dwq_i = vec![0.0; 3 * d * d];
                gemm(3 * d, t, d, 1.0, &dqkv, true, xi, false, 0.0, &mut dwq_i);
                (dx_i, dwq_i, dwout_i)
            })
            .collect();

        self.accum(x, |g| {
            for (bi, (dx_i, _, _)) in partials.iter().enumerate() {
                for (gi, &dv) in g[bi * t * d..(bi + 1) * t * d].iter_mut().zip(dx_i) {
                    *gi += dv;
                }
            }
        });
        self.accum(w_qkv, |g| {
            for (_, dwq_i, _) in &partials {
                for (gi, &dv) in g.iter_mut().zip(dwq_i) {
                    *gi += dv;
                }
            }
        });
        self.accum(w_out, |g| {
            for (_, _, dwo_i) in &partials {
                for (gi, &dv) in g.iter_mut().zip(dwo_i) {
                    *gi += dv;
                }
            }
        });
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), NumericsError> {
        let sa = self.values[a].shape();
        let sb = self.values[b].shape();
        if sa != sb {
            for (axis, (&x, &y)) in sa.iter().zip(sb.iter()).enumerate() {
                if x != y {
                    return Err(NumericsError::Dimension { op, axis, expected: x, got: y });
                }
            }
            return Err(NumericsError::Rank { op, expected: sa.len(), got: sb.to_vec() });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{central_diff, max_rel_err};
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<Real> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn conv2d_one_by_one_identity() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[1, 1, 3, 3], (1..=9).map(|v| v as Real).collect()).unwrap());
        let w = g.leaf(Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap());
        let b = g.leaf(Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
        assert_eq!(g.value(y).shape(), &[1, 1, 3, 3]);
    }

    #[test]
    fn conv2d_zero_kernel_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::randn(&[2, 3, 5, 5], &mut rng));
        let w = g.leaf(Tensor::zeros(&[4, 3, 3, 3]));
        let b = g.leaf(Tensor::zeros(&[4]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    /// Direct nested-loop cross-correlation, independent of the
    /// im2col/GEMM path it checks.
    fn conv_oracle(
        x: &[Real], c_in: usize, h: usize, w: usize,
        k: &[Real], c_out: usize, kh: usize, kw: usize,
        bias: &[Real], stride: usize, pad: usize,
    ) -> Vec<Real> {
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut y = vec![0.0; c_out * oh * ow];
        for co in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..c_in {
                        for u in 0..kh {
                            for v in 0..kw {
                                let iy = (oy * stride + u) as isize - pad as isize;
                                let ix = (ox * stride + v) as isize - pad as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    acc += x[(ci * h + iy as usize) * w + ix as usize]
                                        * k[((co * c_in + ci) * kh + u) * kw + v];
                                }
                            }
                        }
                    }
                    y[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv2d_matches_loop_oracle_on_ramp() {
        // 3x3 kernel over a 5x5 ramp image, same-size padding.
        let x: Vec<Real> = (0..25).map(|v| v as Real).collect();
        let k: Vec<Real> = (0..9).map(|v| 0.25 * (v as Real - 4.0)).collect();
        let bias = vec![0.5];
        let expected = conv_oracle(&x, 1, 5, 5, &k, 1, 3, 3, &bias, 1, 1);

        let mut g = Graph::new();
        let xi = g.leaf(Tensor::from_vec(&[1, 1, 5, 5], x).unwrap());
        let wi = g.leaf(Tensor::from_vec(&[1, 1, 3, 3], k).unwrap());
        let bi = g.leaf(Tensor::from_vec(&[1], bias).unwrap());
        let y = g.conv2d(xi, wi, bi, 1, 1).unwrap();
        for (a, e) in g.value(y).data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn conv2d_matches_loop_oracle_random_strided() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (c_in, h, w, c_out) = (3, 7, 6, 4);
        let x = rand_vec(&mut rng, c_in * h * w);
        let k = rand_vec(&mut rng, c_out * c_in * 9);
        let bias = rand_vec(&mut rng, c_out);
        let expected = conv_oracle(&x, c_in, h, w, &k, c_out, 3, 3, &bias, 2, 1);

        let mut g = Graph::new();
        let xi = g.leaf(Tensor::from_vec(&[1, c_in, h, w], x).unwrap());
        let wi = g.leaf(Tensor::from_vec(&[c_out, c_in, 3, 3], k).unwrap());
        let bi = g.leaf(Tensor::from_vec(&[c_out], bias).unwrap());
        let y = g.conv2d(xi, wi, bi, 2, 1).unwrap();
        for (a, e) in g.value(y).data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-10);
        }
    }

    #[test]
    fn conv2d_rejects_mismatched_channels_and_even_kernels() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 3, 4, 4]));
        let w = g.leaf(Tensor::zeros(&[2, 4, 3, 3]));
        let b = g.leaf(Tensor::zeros(&[2]));
        match g.conv2d(x, w, b, 1, 1) {
            Err(NumericsError::Dimension { op: "conv2d", axis: 1, expected: 3, got: 4 }) => {}
            other => panic!("expected channel mismatch, got {other:?}"),
        }
        let w_even = g.leaf(Tensor::zeros(&[2, 3, 2, 2]));
        assert!(matches!(g.conv2d(x, w_even, b, 1, 0), Err(NumericsError::Config { .. })));
    }

    #[test]
    fn attention_single_token_is_value_projection() {
        // With one token the softmax weight is exactly 1, so the output
        // is W_out · V of that token.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 4;
        let x = rand_vec(&mut rng, d);
        let wqkv = rand_vec(&mut rng, 3 * d * d);
        let wout = rand_vec(&mut rng, d * d);

        let mut g = Graph::new();
        let xi = g.leaf(Tensor::from_vec(&[1, 1, d], x.clone()).unwrap());
        let wq = g.leaf(Tensor::from_vec(&[3 * d, d], wqkv.clone()).unwrap());
        let wo = g.leaf(Tensor::from_vec(&[d, d], wout.clone()).unwrap());
        let y = g.self_attention(xi, wq, wo, 2).unwrap();

        // v = rows 2d..3d of wqkv applied to x; y = wout v
        let mut v = vec![0.0; d];
        for r in 0..d {
            v[r] = (0..d).map(|c| wqkv[(2 * d + r) * d + c] * x[c]).sum();
        }
        let mut expect = vec![0.0; d];
        for r in 0..d {
            expect[r] = (0..d).map(|c| wout[r * d + c] * v[c]).sum();
        }
        for (a, e) in g.value(y).data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_identical_tokens_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 6;
        let token = rand_vec(&mut rng, d);
        let mut x = Vec::new();
        for _ in 0..5 {
            x.extend_from_slice(&token);
        }
        let mut g = Graph::new();
        let xi = g.leaf(Tensor::from_vec(&[1, 5, d], x).unwrap());
        let wq = g.leaf(Tensor::from_vec(&[3 * d, d], rand_vec(&mut rng, 3 * d * d)).unwrap());
        let wo = g.leaf(Tensor::from_vec(&[d, d], rand_vec(&mut rng, d * d)).unwrap());
        let y = g.self_attention(xi, wq, wo, 3).unwrap();
        let out = g.value(y).data();
        for t in 1..5 {
            for c in 0..d {
                assert!((out[t * d + c] - out[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_dense_oracle_three_tokens() {
        // Direct softmax(QKᵀ/√dh)V with explicit loops, single head.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (t, d) = (3, 4);
        let x = rand_vec(&mut rng, t * d);
        let wqkv = rand_vec(&mut rng, 3 * d * d);
        let wout = rand_vec(&mut rng, d * d);

        let matvec = |m: &[Real], rows: usize, cols: usize, v: &[Real], out: &mut Vec<Real>| {
            out.clear();
            for r in 0..rows {
                out.push((0..cols).map(|c| m[r * cols + c] * v[c]).sum());
            }
        };
        let mut q = vec![vec![]; t];
        let mut k = vec![vec![]; t];
        let mut v = vec![vec![]; t];
        for ti in 0..t {
            let tok = &x[ti * d..(ti + 1) * d];
            matvec(&wqkv[..d * d], d, d, tok, &mut q[ti]);
            matvec(&wqkv[d * d..2 * d * d], d, d, tok, &mut k[ti]);
            matvec(&wqkv[2 * d * d..], d, d, tok, &mut v[ti]);
        }
        let mut expect = vec![0.0; t * d];
        for i in 0..t {
            let logits: Vec<Real> = (0..t)
                .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<Real>() / (d as Real).sqrt())
                .collect();
            let mx = logits.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let exps: Vec<Real> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: Real = exps.iter().sum();
            let mut ctx = vec![0.0; d];
            for j in 0..t {
                for c in 0..d {
                    ctx[c] += exps[j] / z * v[j][c];
                }
            }
            let mut proj = vec![];
            matvec(&wout, d, d, &ctx, &mut proj);
            expect[i * d..(i + 1) * d].copy_from_slice(&proj);
        }

        let mut g = Graph::new();
        let xi = g.leaf(Tensor::from_vec(&[1, t, d], x).unwrap());
        let wq = g.leaf(Tensor::from_vec(&[3 * d, d], wqkv).unwrap());
        let wo = g.leaf(Tensor::from_vec(&[d, d], wout).unwrap());
        let y = g.self_attention(xi, wq, wo, 1).unwrap();
        for (a, e) in g.value(y).data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 4, 6]));
        let wq = g.leaf(Tensor::zeros(&[18, 6]));
        let wo = g.leaf(Tensor::zeros(&[6, 6]));
        assert!(matches!(g.self_attention(x, wq, wo, 4), Err(NumericsError::Config { .. })));
    }

    #[test]
    fn backward_of_sum_is_ones_and_square_is_2x() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[3], vec![1.5, -2.0, 0.25]).unwrap().with_grad());
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[3], vec![1.5, -2.0, 0.25]).unwrap().with_grad());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, -4.0, 0.5]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_double_use() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().with_grad());
        assert!(matches!(g.backward(x), Err(NumericsError::NonScalarLoss { .. })));
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(NumericsError::TapeConsumed)));
    }

    /// Harness: builds `op` over leaves with the given shapes, reduces
    /// the output to a scalar with a fixed random weighting, and checks
    /// every analytic input gradient against central differences.
    fn gradcheck_op(
        name: &str,
        shapes: &[&[usize]],
        build: impl Fn(&mut Graph, &[NodeId]) -> NodeId,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(0xf00d);
        let inputs: Vec<Vec<Real>> = shapes
            .iter()
            .map(|s| rand_vec(&mut rng, s.iter().product()))
            .collect();

        // forward once to size the reduction weights
        let mut g = Graph::new();
        let ids: Vec<NodeId> = shapes
            .iter()
            .zip(&inputs)
            .map(|(s, d)| g.leaf(Tensor::from_vec(s, d.clone()).unwrap().with_grad()))
            .collect();
        let out = build(&mut g, &ids);
        let weights = rand_vec(&mut rng, g.value(out).numel());

        let run = |datas: &[Vec<Real>]| -> (Real, Vec<Option<Vec<Real>>>) {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = shapes
                .iter()
                .zip(datas)
                .map(|(s, d)| g.leaf(Tensor::from_vec(s, d.clone()).unwrap().with_grad()))
                .collect();
            let out = build(&mut g, &ids);
            let w = g.leaf(Tensor::from_vec(g.value(out).shape(), weights.clone()).unwrap());
            let prod = g.mul(out, w).unwrap();
            let loss = g.sum(prod);
            g.backward(loss).unwrap();
            let grads = ids.iter().map(|&i| g.grad(i).map(|s| s.to_vec())).collect();
            (g.value(loss).data()[0], grads)
        };

        let (_, analytic) = run(&inputs);
        for (i, input) in inputs.iter().enumerate() {
            let numeric = central_diff(
                |probe: &[Real]| {
                    let mut datas = inputs.clone();
                    datas[i] = probe.to_vec();
                    run(&datas).0
                },
                input,
                1e-5,
            );
            let a = analytic[i].as_ref().unwrap_or_else(|| panic!("{name}: missing grad {i}"));
            let err = max_rel_err(a, &numeric);
            assert!(err < 1e-4, "{name}: input {i} rel err {err}");
        }
    }

    #[test]
    fn gradcheck_elementwise_ops() {
        gradcheck_op("add", &[&[2, 3], &[2, 3]], |g, ids| g.add(ids[0], ids[1]).unwrap());
        gradcheck_op("sub", &[&[2, 3], &[2, 3]], |g, ids| g.sub(ids[0], ids[1]).unwrap());
        gradcheck_op("mul", &[&[2, 3], &[2, 3]], |g, ids| g.mul(ids[0], ids[1]).unwrap());
        gradcheck_op("scale", &[&[2, 3]], |g, ids| g.scale(ids[0], -1.7));
        gradcheck_op("silu", &[&[2, 5]], |g, ids| g.silu(ids[0]));
        gradcheck_op("mean", &[&[3, 4]], |g, ids| g.mean(ids[0]));
        gradcheck_op("sum", &[&[3, 4]], |g, ids| g.sum(ids[0]));
    }

    #[test]
    fn gradcheck_conv2d() {
        gradcheck_op(
            "conv2d s1",
            &[&[2, 3, 5, 5], &[4, 3, 3, 3], &[4]],
            |g, ids| g.conv2d(ids[0], ids[1], ids[2], 1, 1).unwrap(),
        );
        gradcheck_op(
            "conv2d s2",
            &[&[2, 2, 6, 6], &[3, 2, 3, 3], &[3]],
            |g, ids| g.conv2d(ids[0], ids[1], ids[2], 2, 1).unwrap(),
        );
        gradcheck_op(
            "conv2d 1x1",
            &[&[1, 3, 4, 4], &[2, 3, 1, 1], &[2]],
            |g, ids| g.conv2d(ids[0], ids[1], ids[2], 1, 0).unwrap(),
        );
    }

    #[test]
    fn gradcheck_linear_groupnorm_bias() {
        gradcheck_op("linear", &[&[3, 4], &[5, 4], &[5]], |g, ids| {
            g.linear(ids[0], ids[1], ids[2]).unwrap()
        });
        gradcheck_op("group_norm", &[&[2, 4, 3, 3], &[4], &[4]], |g, ids| {
            g.group_norm(ids[0], ids[1], ids[2], 2, 1e-5).unwrap()
        });
        gradcheck_op("channel_bias", &[&[2, 3, 4, 4], &[2, 3]], |g, ids| {
            g.channel_bias(ids[0], ids[1]).unwrap()
        });
    }

    #[test]
    fn gradcheck_attention() {
        gradcheck_op("attention h1", &[&[2, 3, 4], &[12, 4], &[4, 4]], |g, ids| {
            g.self_attention(ids[0], ids[1], ids[2], 1).unwrap()
        });
        gradcheck_op("attention h2", &[&[1, 5, 6], &[18, 6], &[6, 6]], |g, ids| {
            g.self_attention(ids[0], ids[1], ids[2], 2).unwrap()
        });
    }

    #[test]
    fn gradcheck_layout_ops() {
        gradcheck_op("nchw_to_tokens", &[&[2, 3, 2, 2]], |g, ids| g.nchw_to_tokens(ids[0]).unwrap());
        gradcheck_op("tokens_to_nchw", &[&[2, 4, 3]], |g, ids| {
            g.tokens_to_nchw(ids[0], 2, 2).unwrap()
        });
        gradcheck_op("upsample2x", &[&[1, 2, 3, 3]], |g, ids| g.upsample2x(ids[0]).unwrap());
        gradcheck_op("concat", &[&[2, 2, 3, 3], &[2, 3, 3, 3]], |g, ids| {
            g.concat_channels(ids[0], ids[1]).unwrap()
        });
        gradcheck_op("slice", &[&[2, 5, 3, 3]], |g, ids| g.slice_channels(ids[0], 1, 3).unwrap());
        gradcheck_op("embed", &[&[4, 6]], |g, ids| g.embed_lookup(ids[0], &[1, 3, 1]).unwrap());
    }

    /// Composite forward/backward chain run twice in a single-threaded
    /// pool and once in the default pool: all three must agree bitwise.
    #[test]
    fn deterministic_forward_backward() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut g = Graph::new();
            let x = g.leaf(Tensor::randn(&[2, 4, 8, 8], &mut rng).with_grad());
            let w = g.leaf(Tensor::randn(&[4, 4, 3, 3], &mut rng).with_grad());
            let b = g.leaf(Tensor::zeros(&[4]).with_grad());
            let gam = g.leaf(Tensor::filled(&[4], 1.0).with_grad());
            let bet = g.leaf(Tensor::zeros(&[4]).with_grad());
            let wq = g.leaf(Tensor::randn(&[12, 4], &mut rng).with_grad());
            let wo = g.leaf(Tensor::randn(&[4, 4], &mut rng).with_grad());
            let c = g.conv2d(x, w, b, 1, 1).unwrap();
            let n = g.group_norm(c, gam, bet, 2, 1e-5).unwrap();
            let s = g.silu(n);
            let tok = g.nchw_to_tokens(s).unwrap();
            let at = g.self_attention(tok, wq, wo, 2).unwrap();
            let back = g.tokens_to_nchw(at, 8, 8).unwrap();
            let sq = g.mul(back, back).unwrap();
            let loss = g.mean(sq);
            g.backward(loss).unwrap();
            (
                g.value(loss).data()[0],
                g.grad(w).unwrap().to_vec(),
                g.grad(wq).unwrap().to_vec(),
            )
        };
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let a = single.install(run);
        let b = single.install(run);
        let c = run();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
        assert_eq!(a.0.to_bits(), c.0.to_bits());
        assert_eq!(a.1, c.1);
        assert_eq!(a.2, c.2);
    }

    #[test]
    fn forward_values_stay_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::randn(&[2, 4, 6, 6], &mut rng));
        let w = g.leaf(Tensor::randn(&[4, 4, 3, 3], &mut rng));
        let b = g.leaf(Tensor::randn(&[4], &mut rng));
        let c = g.conv2d(x, w, b, 1, 1).unwrap();
        let gam = g.leaf(Tensor::filled(&[4], 1.0));
        let bet = g.leaf(Tensor::zeros(&[4]));
        let n = g.group_norm(c, gam, bet, 4, 1e-5).unwrap();
        let s = g.silu(n);
        assert!(g.value(s).all_finite());
    }
}
