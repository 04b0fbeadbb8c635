//! Dense kernels over flat row-major slices.

/// `c = op(a) · op(b) + beta · c` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// With `trans_a` the slice `a` holds a row-major `k×m` matrix, and likewise
/// `b` holds `n×k` when `trans_b` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    // SAFETY: the asserts above guarantee every index reachable through the
    // given dimensions and strides is inside the corresponding slice, and `c`
    // is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

/// Gathers sliding windows: `cols[t, c·k + j] = x[c, t·stride + j]` for `t < t_out`.
pub(crate) fn im2col(
    x: &[f64],
    channels: usize,
    t_in: usize,
    k: usize,
    stride: usize,
    t_out: usize,
) -> Vec<f64> {
    let width = channels * k;
    let mut cols = vec![0.0; t_out * width];
    for t in 0..t_out {
        let row = &mut cols[t * width..(t + 1) * width];
        for c in 0..channels {
            let src = &x[c * t_in + t * stride..c * t_in + t * stride + k];
            row[c * k..(c + 1) * k].copy_from_slice(src);
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds windows back onto `out` (`channels × t_in`).
pub(crate) fn col2im_add(
    cols: &[f64],
    channels: usize,
    t_in: usize,
    k: usize,
    stride: usize,
    t_out: usize,
    out: &mut [f64],
) {
    let width = channels * k;
    for t in 0..t_out {
        let row = &cols[t * width..(t + 1) * width];
        for c in 0..channels {
            let dst = &mut out[c * t_in + t * stride..c * t_in + t * stride + k];
            for (d, s) in dst.iter_mut().zip(&row[c * k..(c + 1) * k]) {
                *d += s;
            }
        }
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Reorders axes: output axis `i` is input axis `axes[i]`.
pub(crate) fn permute(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return (out, out_shape);
    }
    let rank = out_shape.len();
    if rank == 0 {
        out.extend_from_slice(data);
        return (out, out_shape);
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut index = vec![0usize; rank - 1];
    let mut offset = 0usize;
    loop {
        if inner_stride == 1 {
            out.extend_from_slice(&data[offset..offset + inner]);
        } else {
            out.extend((0..inner).map(|i| data[offset + i * inner_stride]));
        }
        // odometer over the outer axes
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return (out, out_shape);
            }
            axis -= 1;
            index[axis] += 1;
            offset += src_strides[axis];
            if index[axis] < out_shape[axis] {
                break;
            }
            offset -= src_strides[axis] * out_shape[axis];
            index[axis] = 0;
        }
    }
}
