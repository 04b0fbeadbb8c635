//! Forward definitions and vector-Jacobian products of the tensor operations.

use super::kernels::{col2im_add, gemm, im2col, permute};
use super::{Op, Tensor};
use crate::error::{Error, Result};

fn shape_error(op: &str, detail: String) -> Error {
    Error::config(format!("{op}: {detail}"))
}

fn last_dim(t: &Tensor) -> usize {
    *t.shape().last().expect("tensors have rank >= 1")
}

impl Tensor {
    /// Elementwise sum. `rhs` may have a shape equal to a suffix of `self`'s,
    /// in which case it is repeated over the leading axes.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        let (ls, rs) = (self.shape(), rhs.shape());
        if rs.len() > ls.len() || ls[ls.len() - rs.len()..] != *rs {
            return Err(shape_error("add", format!("cannot add {rs:?} onto {ls:?}")));
        }
        let block = rhs.numel();
        let mut out = self.to_vec();
        for chunk in out.chunks_exact_mut(block) {
            chunk.iter_mut().zip(rhs.data()).for_each(|(o, r)| *o += r);
        }
        Ok(Tensor::from_op(ls.to_vec(), out, &[self, rhs], || {
            Op::Add(self.clone(), rhs.clone())
        }))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(shape_error(
                "mul",
                format!("shapes {:?} and {:?} differ", self.shape(), rhs.shape()),
            ));
        }
        let out = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            &[self, rhs],
            || Op::Mul(self.clone(), rhs.clone()),
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let out = self.data().iter().map(|v| v * factor).collect();
        Tensor::from_op(self.shape().to_vec(), out, &[self], || {
            Op::Scale(self.clone(), factor)
        })
    }

    pub fn relu(&self) -> Tensor {
        let out = self.data().iter().map(|&v| v.max(0.0)).collect();
        Tensor::from_op(self.shape().to_vec(), out, &[self], || {
            Op::Relu(self.clone())
        })
    }

    /// Parametric ReLU with one slope per channel of the last axis.
    pub fn prelu(&self, alpha: &Tensor) -> Result<Tensor> {
        let channels = last_dim(self);
        if alpha.shape() != [channels] {
            return Err(shape_error(
                "prelu",
                format!("slopes {:?} for {channels} channels", alpha.shape()),
            ));
        }
        let a = alpha.data();
        let out = self
            .data()
            .chunks_exact(channels)
            .flat_map(|row| {
                row.iter()
                    .zip(a)
                    .map(|(&x, &s)| if x >= 0.0 { x } else { s * x })
            })
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            &[self, alpha],
            || Op::Prelu(self.clone(), alpha.clone()),
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Tensor {
        let n = last_dim(self);
        let mut out = self.to_vec();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            let inv = 1.0 / total;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        Tensor::from_op(self.shape().to_vec(), out, &[self], || {
            Op::Softmax(self.clone())
        })
    }

    /// Normalizes every position over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let d = last_dim(self);
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(shape_error(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} for width {d}",
                    gain.shape(),
                    bias.shape()
                ),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::config("layer_norm: eps must be positive"));
        }
        let rows = self.numel() / d;
        let mut normalized = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; self.numel()];
        let (g, b) = (gain.data(), bias.data());
        for (r, row) in self.data().chunks_exact(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                let xhat = (row[j] - mean) * istd;
                normalized[r * d + j] = xhat;
                out[r * d + j] = xhat * g[j] + b[j];
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            &[self, gain, bias],
            || Op::LayerNorm {
                x: self.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                normalized,
                inv_std,
            },
        ))
    }

    /// `x · weight + bias` over the last axis; `weight` is `d_in × d_out`.
    pub fn linear(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let d_in = last_dim(self);
        let &[w_in, d_out] = weight.shape() else {
            return Err(shape_error(
                "linear",
                format!("weight shape {:?}", weight.shape()),
            ));
        };
        if w_in != d_in {
            return Err(shape_error(
                "linear",
                format!("input width {d_in} vs weight {:?}", weight.shape()),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [d_out] {
                return Err(shape_error("linear", format!("bias shape {:?}", b.shape())));
            }
        }
        let rows = self.numel() / d_in;
        let mut out = vec![0.0; rows * d_out];
        gemm(
            false,
            false,
            rows,
            d_out,
            d_in,
            self.data(),
            weight.data(),
            0.0,
            &mut out,
        );
        if let Some(b) = bias {
            for row in out.chunks_exact_mut(d_out) {
                row.iter_mut().zip(b.data()).for_each(|(o, v)| *o += v);
            }
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = d_out;
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Ok(Tensor::from_op(shape, out, &inputs, || Op::Linear {
            x: self.clone(),
            weight: weight.clone(),
            bias: bias.cloned(),
        }))
    }

    /// Batched matrix product over the last two axes: `[.., m, k] · [.., k, n]`,
    /// or `[.., m, k] · [.., n, k]ᵀ` when `trans_b` is set.
    pub fn matmul(&self, rhs: &Tensor, trans_b: bool) -> Result<Tensor> {
        let (a, b) = (self.shape(), rhs.shape());
        if a.len() < 2 || a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] {
            return Err(shape_error("matmul", format!("shapes {a:?} and {b:?}")));
        }
        let r = a.len();
        let (m, k) = (a[r - 2], a[r - 1]);
        let (kb, n) = if trans_b {
            (b[r - 1], b[r - 2])
        } else {
            (b[r - 2], b[r - 1])
        };
        if k != kb {
            return Err(shape_error("matmul", format!("inner dims {k} vs {kb}")));
        }
        let batch: usize = a[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                false,
                trans_b,
                m,
                n,
                k,
                &self.data()[i * m * k..(i + 1) * m * k],
                &rhs.data()[i * k * n..(i + 1) * k * n],
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let mut shape = a[..r - 2].to_vec();
        shape.extend([m, n]);
        Ok(Tensor::from_op(shape, out, &[self, rhs], || Op::MatMul {
            a: self.clone(),
            b: rhs.clone(),
            trans_b,
        }))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank
            || axes
                .iter()
                .any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
        {
            return Err(shape_error(
                "permute",
                format!("{axes:?} is not a permutation of {rank} axes"),
            ));
        }
        let (out, shape) = permute(self.data(), self.shape(), axes);
        Ok(Tensor::from_op(shape, out, &[self], || {
            Op::Permute(self.clone(), axes.to_vec())
        }))
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&self) -> Result<Tensor> {
        self.permute(&[1, 0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() || shape.contains(&0) {
            return Err(shape_error(
                "reshape",
                format!("{:?} into {shape:?}", self.shape()),
            ));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            &[self],
            || Op::Reshape(self.clone()),
        ))
    }

    pub fn concat(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::config("concat: no inputs"))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(shape_error(
                "concat",
                format!("axis {axis} for rank {rank}"),
            ));
        }
        for t in tensors {
            let s = t.shape();
            let same = s.len() == rank
                && s.iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !same {
                return Err(shape_error(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", s, first.shape()),
                ));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let total: usize = tensors.iter().map(|t| t.shape()[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for t in tensors {
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let refs: Vec<&Tensor> = tensors.iter().collect();
        Ok(Tensor::from_op(shape, out, &refs, || {
            Op::Concat(tensors.to_vec(), axis)
        }))
    }

    /// `len` consecutive entries along `axis`, starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_error(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        Ok(Tensor::from_op(out_shape, out, &[self], || Op::Slice {
            x: self.clone(),
            axis,
            start,
        }))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&self) -> Tensor {
        let total = self.data().iter().sum();
        Tensor::from_op(vec![1], vec![total], &[self], || Op::Sum(self.clone()))
    }

    /// Strided 1-D convolution without padding.
    ///
    /// `self` is `c_in × t`, `weight` is `filters × c_in × k`, `bias` is
    /// `filters`; the result is `filters × (⌊(t − k)/stride⌋ + 1)`.
    pub fn conv1d(&self, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
        let &[c_in, t] = self.shape() else {
            return Err(shape_error(
                "conv1d",
                format!("input shape {:?}", self.shape()),
            ));
        };
        let &[filters, w_in, k] = weight.shape() else {
            return Err(shape_error(
                "conv1d",
                format!("weight shape {:?}", weight.shape()),
            ));
        };
        if w_in != c_in || bias.shape() != [filters] || stride == 0 {
            return Err(shape_error(
                "conv1d",
                format!(
                    "input {:?}, weight {:?}, bias {:?}, stride {stride}",
                    self.shape(),
                    weight.shape(),
                    bias.shape()
                ),
            ));
        }
        if t < k {
            return Err(Error::InputTooShort { len: t, min: k });
        }
        let t_out = (t - k) / stride + 1;
        let cols = im2col(self.data(), c_in, t, k, stride, t_out);
        let mut out = vec![0.0; filters * t_out];
        gemm(
            false,
            true,
            filters,
            t_out,
            c_in * k,
            weight.data(),
            &cols,
            0.0,
            &mut out,
        );
        for (row, b) in out.chunks_exact_mut(t_out).zip(bias.data()) {
            row.iter_mut().for_each(|v| *v += b);
        }
        Ok(Tensor::from_op(
            vec![filters, t_out],
            out,
            &[self, weight, bias],
            || Op::Conv1d {
                x: self.clone(),
                weight: weight.clone(),
                bias: bias.clone(),
                stride,
            },
        ))
    }

    /// Transposed 1-D convolution, the adjoint of [`Tensor::conv1d`]'s linear map.
    ///
    /// `self` is `filters × t'`, `weight` is `filters × c_out × k`; the result
    /// is `c_out × ((t' − 1)·stride + k)`.
    pub fn conv_transpose1d(&self, weight: &Tensor, stride: usize) -> Result<Tensor> {
        let &[filters, t_in] = self.shape() else {
            return Err(shape_error(
                "conv_transpose1d",
                format!("input shape {:?}", self.shape()),
            ));
        };
        let &[w_f, c_out, k] = weight.shape() else {
            return Err(shape_error(
                "conv_transpose1d",
                format!("weight shape {:?}", weight.shape()),
            ));
        };
        if w_f != filters || stride == 0 {
            return Err(shape_error(
                "conv_transpose1d",
                format!(
                    "input {:?}, weight {:?}, stride {stride}",
                    self.shape(),
                    weight.shape()
                ),
            ));
        }
        let t_out = (t_in - 1) * stride + k;
        let mut cols = vec![0.0; t_in * c_out * k];
        gemm(
            true,
            false,
            t_in,
            c_out * k,
            filters,
            self.data(),
            weight.data(),
            0.0,
            &mut cols,
        );
        let mut out = vec![0.0; c_out * t_out];
        col2im_add(&cols, c_out, t_out, k, stride, t_in, &mut out);
        Ok(Tensor::from_op(
            vec![c_out, t_out],
            out,
            &[self, weight],
            || Op::ConvTranspose1d {
                y: self.clone(),
                weight: weight.clone(),
                stride,
            },
        ))
    }

    /// Splits axis 0 into `count` overlapping frames of length `frame`, `hop`
    /// apart. Frame positions past the end of the input read as zero.
    ///
    /// `[t, ..rest]` becomes `[count, frame, ..rest]`.
    pub fn frames(&self, frame: usize, hop: usize, count: usize) -> Result<Tensor> {
        if frame == 0 || hop == 0 || count == 0 {
            return Err(shape_error(
                "frames",
                format!("frame {frame}, hop {hop}, count {count}"),
            ));
        }
        let t = self.shape()[0];
        let inner: usize = self.shape()[1..].iter().product();
        let mut out = vec![0.0; count * frame * inner];
        for j in 0..count {
            let start = j * hop;
            let avail = t.saturating_sub(start).min(frame);
            if avail > 0 {
                out[j * frame * inner..(j * frame + avail) * inner]
                    .copy_from_slice(&self.data()[start * inner..(start + avail) * inner]);
            }
        }
        let mut shape = vec![count, frame];
        shape.extend_from_slice(&self.shape()[1..]);
        Ok(Tensor::from_op(shape, out, &[self], || Op::Frames {
            x: self.clone(),
            frame,
            hop,
        }))
    }

    /// Inverse of [`Tensor::frames`]: sums frames at their hop offsets, divides
    /// each position by the number of frames covering it, and keeps the first
    /// `len` positions.
    ///
    /// `[count, frame, ..rest]` becomes `[len, ..rest]`.
    pub fn overlap_add(&self, hop: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() < 2 || hop == 0 || len == 0 {
            return Err(shape_error(
                "overlap_add",
                format!("input {shape:?}, hop {hop}, len {len}"),
            ));
        }
        let (count, frame) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let coverage = coverage(count, frame, hop, len);
        let mut out = vec![0.0; len * inner];
        for j in 0..count {
            for c in 0..frame {
                let t = j * hop + c;
                if t >= len {
                    break;
                }
                let src = &self.data()[(j * frame + c) * inner..(j * frame + c + 1) * inner];
                out[t * inner..(t + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(o, s)| *o += s);
            }
        }
        for (t, &n) in coverage.iter().enumerate() {
            if n > 1 {
                let n = n as f64;
                out[t * inner..(t + 1) * inner]
                    .iter_mut()
                    .for_each(|v| *v /= n);
            }
        }
        let mut out_shape = vec![len];
        out_shape.extend_from_slice(&shape[2..]);
        Ok(Tensor::from_op(out_shape, out, &[self], || {
            Op::OverlapAdd {
                x: self.clone(),
                hop,
            }
        }))
    }
}

/// Number of frames covering each of the first `len` positions.
fn coverage(count: usize, frame: usize, hop: usize, len: usize) -> Vec<usize> {
    let mut n = vec![0usize; len];
    for j in 0..count {
        for c in 0..frame {
            match n.get_mut(j * hop + c) {
                Some(slot) => *slot += 1,
                None => break,
            }
        }
    }
    n
}

impl Op {
    pub(super) fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::Prelu(a, b) => vec![a, b],
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Softmax(x)
            | Op::Permute(x, _)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Slice { x, .. }
            | Op::Frames { x, .. }
            | Op::OverlapAdd { x, .. } => vec![x],
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::Linear { x, weight, bias } => {
                let mut v = vec![x, weight];
                v.extend(bias);
                v
            }
            Op::MatMul { a, b, .. } => vec![a, b],
            Op::Concat(xs, _) => xs.iter().collect(),
            Op::Conv1d {
                x, weight, bias, ..
            } => vec![x, weight, bias],
            Op::ConvTranspose1d { y, weight, .. } => vec![y, weight],
            Op::Custom { inputs, .. } => inputs.iter().collect(),
        }
    }

    /// Gradients with respect to each input, given the output node and its gradient.
    pub(super) fn vjp<'a>(&'a self, out: &Tensor, g: &[f64]) -> Vec<(&'a Tensor, Vec<f64>)> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) => {
                let mut gb = vec![0.0; b.numel()];
                for chunk in g.chunks_exact(b.numel()) {
                    gb.iter_mut().zip(chunk).for_each(|(acc, v)| *acc += v);
                }
                vec![(a, g.to_vec()), (b, gb)]
            }
            Op::Mul(a, b) => {
                let ga = g.iter().zip(b.data()).map(|(g, y)| g * y).collect();
                let gb = g.iter().zip(a.data()).map(|(g, x)| g * x).collect();
                vec![(a, ga), (b, gb)]
            }
            Op::Scale(x, f) => vec![(x, g.iter().map(|v| v * f).collect())],
            Op::Relu(x) => {
                let gx = g
                    .iter()
                    .zip(x.data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![(x, gx)]
            }
            Op::Prelu(x, alpha) => {
                let c = alpha.numel();
                let a = alpha.data();
                let mut gx = vec![0.0; x.numel()];
                let mut ga = vec![0.0; c];
                for (i, (&xv, &gv)) in x.data().iter().zip(g).enumerate() {
                    let ch = i % c;
                    if xv >= 0.0 {
                        gx[i] = gv;
                    } else {
                        gx[i] = gv * a[ch];
                        ga[ch] += gv * xv;
                    }
                }
                vec![(x, gx), (alpha, ga)]
            }
            Op::Softmax(x) => {
                let n = last_dim(x);
                let mut gx = vec![0.0; x.numel()];
                for ((dst, y), gy) in gx
                    .chunks_exact_mut(n)
                    .zip(out.data().chunks_exact(n))
                    .zip(g.chunks_exact(n))
                {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dst[j] = y[j] * (gy[j] - dot);
                    }
                }
                vec![(x, gx)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let d = gain.numel();
                let gn = gain.data();
                let mut gx = vec![0.0; x.numel()];
                let mut gg = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for (r, (gy, xh)) in g
                    .chunks_exact(d)
                    .zip(normalized.chunks_exact(d))
                    .enumerate()
                {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..d {
                        gg[j] += gy[j] * xh[j];
                        gbias[j] += gy[j];
                        dxhat[j] = gy[j] * gn[j];
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * xh[j];
                    }
                    mean_d /= d as f64;
                    mean_dx /= d as f64;
                    let istd = inv_std[r];
                    for j in 0..d {
                        gx[r * d + j] = istd * (dxhat[j] - mean_d - xh[j] * mean_dx);
                    }
                }
                vec![(x, gx), (gain, gg), (bias, gbias)]
            }
            Op::Linear { x, weight, bias } => {
                let (d_in, d_out) = (weight.shape()[0], weight.shape()[1]);
                let rows = x.numel() / d_in;
                let mut grads = Vec::with_capacity(3);
                if x.requires_grad() {
                    let mut gx = vec![0.0; x.numel()];
                    gemm(
                        false,
                        true,
                        rows,
                        d_in,
                        d_out,
                        g,
                        weight.data(),
                        0.0,
                        &mut gx,
                    );
                    grads.push((x, gx));
                }
                if weight.requires_grad() {
                    let mut gw = vec![0.0; weight.numel()];
                    gemm(true, false, d_in, d_out, rows, x.data(), g, 0.0, &mut gw);
                    grads.push((weight, gw));
                }
                if let Some(b) = bias {
                    let mut gb = vec![0.0; d_out];
                    for row in g.chunks_exact(d_out) {
                        gb.iter_mut().zip(row).for_each(|(acc, v)| *acc += v);
                    }
                    grads.push((b, gb));
                }
                grads
            }
            Op::MatMul { a, b, trans_b } => {
                let sa = a.shape();
                let r = sa.len();
                let (m, k) = (sa[r - 2], sa[r - 1]);
                let n = out.shape()[r - 1];
                let batch = a.numel() / (m * k);
                let mut ga = vec![0.0; a.numel()];
                let mut gb = vec![0.0; b.numel()];
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &a.data()[i * m * k..(i + 1) * m * k];
                    let bi = &b.data()[i * k * n..(i + 1) * k * n];
                    let ga_i = &mut ga[i * m * k..(i + 1) * m * k];
                    let gb_i = &mut gb[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        // b is n×k: da = g·b, db = gᵀ·a
                        gemm(false, false, m, k, n, gi, bi, 0.0, ga_i);
                        gemm(true, false, n, k, m, gi, ai, 0.0, gb_i);
                    } else {
                        // b is k×n: da = g·bᵀ, db = aᵀ·g
                        gemm(false, true, m, k, n, gi, bi, 0.0, ga_i);
                        gemm(true, false, k, n, m, ai, gi, 0.0, gb_i);
                    }
                }
                vec![(a, ga), (b, gb)]
            }
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (gx, _) = permute(g, out.shape(), &inverse);
                vec![(x, gx)]
            }
            Op::Reshape(x) => vec![(x, g.to_vec())],
            Op::Concat(xs, axis) => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut grads: Vec<Vec<f64>> =
                    xs.iter().map(|t| Vec::with_capacity(t.numel())).collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (t, dst) in xs.iter().zip(grads.iter_mut()) {
                        let block = t.shape()[*axis] * inner;
                        dst.extend_from_slice(&g[offset..offset + block]);
                        offset += block;
                    }
                }
                xs.iter().zip(grads).collect()
            }
            Op::Slice { x, axis, start } => {
                let shape = x.shape();
                let len = out.shape()[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut gx = vec![0.0; x.numel()];
                for o in 0..outer {
                    let base = (o * shape[*axis] + start) * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(x, gx)]
            }
            Op::Sum(x) => vec![(x, vec![g[0]; x.numel()])],
            Op::Conv1d {
                x,
                weight,
                bias,
                stride,
            } => {
                let (c_in, t) = (x.shape()[0], x.shape()[1]);
                let (filters, k) = (weight.shape()[0], weight.shape()[2]);
                let t_out = out.shape()[1];
                let width = c_in * k;
                let cols = im2col(x.data(), c_in, t, k, *stride, t_out);
                let mut gw = vec![0.0; weight.numel()];
                gemm(false, false, filters, width, t_out, g, &cols, 0.0, &mut gw);
                let mut gcols = vec![0.0; t_out * width];
                gemm(
                    true,
                    false,
                    t_out,
                    width,
                    filters,
                    g,
                    weight.data(),
                    0.0,
                    &mut gcols,
                );
                let mut gx = vec![0.0; x.numel()];
                col2im_add(&gcols, c_in, t, k, *stride, t_out, &mut gx);
                let gb = g.chunks_exact(t_out).map(|row| row.iter().sum()).collect();
                vec![(x, gx), (weight, gw), (bias, gb)]
            }
            Op::ConvTranspose1d { y, weight, stride } => {
                let (filters, t_in) = (y.shape()[0], y.shape()[1]);
                let (c_out, k) = (weight.shape()[1], weight.shape()[2]);
                let t_out = out.shape()[1];
                let width = c_out * k;
                let gcols = im2col(g, c_out, t_out, k, *stride, t_in);
                let mut gy = vec![0.0; y.numel()];
                gemm(
                    false,
                    true,
                    filters,
                    t_in,
                    width,
                    weight.data(),
                    &gcols,
                    0.0,
                    &mut gy,
                );
                let mut gw = vec![0.0; weight.numel()];
                gemm(
                    false,
                    false,
                    filters,
                    width,
                    t_in,
                    y.data(),
                    &gcols,
                    0.0,
                    &mut gw,
                );
                vec![(y, gy), (weight, gw)]
            }
            Op::Frames { x, frame, hop } => {
                let t = x.shape()[0];
                let inner = x.numel() / t;
                let count = out.shape()[0];
                let mut gx = vec![0.0; x.numel()];
                for j in 0..count {
                    let start = j * hop;
                    let avail = t.saturating_sub(start).min(*frame);
                    let src = &g[j * frame * inner..(j * frame + avail) * inner];
                    gx[start * inner..(start + avail) * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, s)| *d += s);
                }
                vec![(x, gx)]
            }
            Op::OverlapAdd { x, hop } => {
                let (count, frame) = (x.shape()[0], x.shape()[1]);
                let len = out.shape()[0];
                let inner = out.numel() / len;
                let cover = coverage(count, frame, *hop, len);
                let mut gx = vec![0.0; x.numel()];
                for j in 0..count {
                    for c in 0..frame {
                        let t = j * hop + c;
                        if t >= len {
                            break;
                        }
                        let inv = 1.0 / cover[t] as f64;
                        let dst = &mut gx[(j * frame + c) * inner..(j * frame + c + 1) * inner];
                        dst.iter_mut()
                            .zip(&g[t * inner..(t + 1) * inner])
                            .for_each(|(d, s)| *d = s * inv);
                    }
                }
                vec![(x, gx)]
            }
            Op::Custom { inputs, backward } => inputs.iter().zip(backward(g)).collect(),
        }
    }
}
