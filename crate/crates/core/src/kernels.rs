//! Raw tensor kernels shared by forward evaluation and the backward pass.
//!
//! Everything here is a pure function of its inputs. Convolutions route
//! through im2col + matmul so there is a single hot inner loop.

use crate::error::{shape_err, OccError, Result};
use crate::tensor::{broadcast_shapes, next_index, numel_of, strides_of, Real, Tensor};

// ---------------------------------------------------------------------------
// elementwise with trailing-dimension broadcasting
// ---------------------------------------------------------------------------

fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    // Stride 0 over broadcast dimensions.
    let offset = out_shape.len() - shape.len();
    let st = strides_of(shape);
    let mut out = vec![0usize; out_shape.len()];
    for i in 0..shape.len() {
        out[offset + i] = if shape[i] == 1 { 0 } else { st[i] };
    }
    out
}

pub fn binary_op<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data: Vec<T> =
            a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_vec(a.shape().to_vec(), data);
    }
    let out_shape = broadcast_shapes(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let n = numel_of(&out_shape);
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    loop {
        let ia: usize = idx.iter().zip(sa.iter()).map(|(i, s)| i * s).sum();
        let ib: usize = idx.iter().zip(sb.iter()).map(|(i, s)| i * s).sum();
        data.push(f(a.data()[ia], b.data()[ib]));
        if !next_index(&mut idx, &out_shape) {
            break;
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Sum `grad` (shaped like the broadcast output) back down to `shape`.
pub fn reduce_to_shape<T: Real>(grad: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if grad.shape() == shape {
        return Ok(grad.clone());
    }
    let gs = grad.shape();
    let st = broadcast_strides(shape, gs);
    let mut out = vec![T::ZERO; numel_of(shape)];
    let mut idx = vec![0usize; gs.len()];
    let mut flat = 0usize;
    loop {
        let it: usize = idx.iter().zip(st.iter()).map(|(i, s)| i * s).sum();
        out[it] += grad.data()[flat];
        flat += 1;
        if !next_index(&mut idx, gs) {
            break;
        }
    }
    Tensor::from_vec(shape.to_vec(), out)
}

pub fn broadcast_to<T: Real>(t: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let bs = broadcast_shapes(t.shape(), shape)?;
    if bs != shape {
        return Err(shape_err(format!("cannot broadcast {:?} to {shape:?}", t.shape())));
    }
    binary_op(t, &Tensor::zeros(shape), |a, _| a)
}

// ---------------------------------------------------------------------------
// matmul family
// ---------------------------------------------------------------------------

pub fn matmul_raw<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

/// A[m×k] · B[k×n].
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(shape_err(format!(
            "matmul needs rank-2 operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(shape_err(format!("matmul inner dims {k} vs {k2}")));
    }
    Tensor::from_vec(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))
}

pub fn transpose2<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 {
        return Err(shape_err("transpose2 needs rank 2"));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::from_vec(vec![n, m], out)
}

// ---------------------------------------------------------------------------
// permute, concat, slice
// ---------------------------------------------------------------------------

pub fn permute<T: Real>(t: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    if axes.len() != t.rank() {
        return Err(shape_err(format!("permute axes {axes:?} vs rank {}", t.rank())));
    }
    let mut seen = vec![false; axes.len()];
    for &a in axes {
        if a >= axes.len() || seen[a] {
            return Err(shape_err(format!("bad permutation {axes:?}")));
        }
        seen[a] = true;
    }
    let in_shape = t.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let in_strides = strides_of(in_shape);
    let mut out = Vec::with_capacity(t.numel());
    let mut idx = vec![0usize; out_shape.len()];
    if t.numel() == 0 {
        return Tensor::from_vec(out_shape, out);
    }
    loop {
        let src: usize = idx.iter().zip(axes.iter()).map(|(i, &a)| i * in_strides[a]).sum();
        out.push(t.data()[src]);
        if !next_index(&mut idx, &out_shape) {
            break;
        }
    }
    Tensor::from_vec(out_shape, out)
}

pub fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub fn concat<T: Real>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(shape_err("concat of zero tensors"));
    }
    let rank = parts[0].rank();
    if axis >= rank {
        return Err(shape_err(format!("concat axis {axis} vs rank {rank}")));
    }
    let mut out_shape = parts[0].shape().to_vec();
    let mut axis_total = 0usize;
    for p in parts {
        if p.rank() != rank {
            return Err(shape_err("concat rank mismatch"));
        }
        for d in 0..rank {
            if d != axis && p.shape()[d] != out_shape[d] {
                return Err(shape_err(format!(
                    "concat shape mismatch {:?} vs {:?}",
                    p.shape(),
                    out_shape
                )));
            }
        }
        axis_total += p.shape()[axis];
    }
    out_shape[axis] = axis_total;

    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(numel_of(&out_shape));
    for o in 0..outer {
        for p in parts {
            let len = p.shape()[axis] * inner;
            let start = o * len;
            out.extend_from_slice(&p.data()[start..start + len]);
        }
    }
    Tensor::from_vec(out_shape, out)
}

pub fn slice_axis<T: Real>(
    t: &Tensor<T>,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Tensor<T>> {
    if axis >= t.rank() {
        return Err(shape_err(format!("slice axis {axis} vs rank {}", t.rank())));
    }
    if start + len > t.shape()[axis] {
        return Err(OccError::IndexOutOfRange { index: start + len, limit: t.shape()[axis] });
    }
    let outer: usize = t.shape()[..axis].iter().product();
    let inner: usize = t.shape()[axis + 1..].iter().product();
    let axis_len = t.shape()[axis];
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * axis_len * inner + start * inner;
        out.extend_from_slice(&t.data()[base..base + len * inner]);
    }
    let mut shape = t.shape().to_vec();
    shape[axis] = len;
    Tensor::from_vec(shape, out)
}

/// Scatter `grad` back into a zero tensor of `full_shape` at the slice position.
pub fn slice_axis_backward<T: Real>(
    grad: &Tensor<T>,
    full_shape: &[usize],
    axis: usize,
    start: usize,
) -> Result<Tensor<T>> {
    let outer: usize = full_shape[..axis].iter().product();
    let inner: usize = full_shape[axis + 1..].iter().product();
    let axis_len = full_shape[axis];
    let len = grad.shape()[axis];
    let mut out = vec![T::ZERO; numel_of(full_shape)];
    for o in 0..outer {
        let dst = o * axis_len * inner + start * inner;
        let src = o * len * inner;
        out[dst..dst + len * inner].copy_from_slice(&grad.data()[src..src + len * inner]);
    }
    Tensor::from_vec(full_shape.to_vec(), out)
}

// ---------------------------------------------------------------------------
// reductions and softmax
// ---------------------------------------------------------------------------

pub fn sum_all<T: Real>(t: &Tensor<T>) -> T {
    t.data().iter().copied().sum()
}

pub fn sum_axis<T: Real>(t: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= t.rank() {
        return Err(shape_err(format!("sum axis {axis} vs rank {}", t.rank())));
    }
    let outer: usize = t.shape()[..axis].iter().product();
    let inner: usize = t.shape()[axis + 1..].iter().product();
    let axis_len = t.shape()[axis];
    let mut out = vec![T::ZERO; outer * inner];
    for o in 0..outer {
        for j in 0..axis_len {
            let base = (o * axis_len + j) * inner;
            let dst = &mut out[o * inner..(o + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(&t.data()[base..base + inner]) {
                *d += s;
            }
        }
    }
    let mut shape = t.shape().to_vec();
    shape.remove(axis);
    Tensor::from_vec(shape, out)
}

fn lane_apply<T: Real>(
    t: &Tensor<T>,
    axis: usize,
    mut f: impl FnMut(&mut [T]),
) -> Result<Tensor<T>> {
    if axis >= t.rank() {
        return Err(shape_err(format!("axis {axis} vs rank {}", t.rank())));
    }
    let outer: usize = t.shape()[..axis].iter().product();
    let inner: usize = t.shape()[axis + 1..].iter().product();
    let axis_len = t.shape()[axis];
    let mut data = t.to_vec();
    let mut lane = vec![T::ZERO; axis_len];
    for o in 0..outer {
        for i in 0..inner {
            for j in 0..axis_len {
                lane[j] = data[(o * axis_len + j) * inner + i];
            }
            f(&mut lane);
            for j in 0..axis_len {
                data[(o * axis_len + j) * inner + i] = lane[j];
            }
        }
    }
    Tensor::from_vec(t.shape().to_vec(), data)
}

pub fn softmax_axis<T: Real>(t: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    lane_apply(t, axis, |lane| {
        let m = lane.iter().copied().fold(lane[0], T::maxv);
        let mut z = T::ZERO;
        for v in lane.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in lane.iter_mut() {
            *v = *v / z;
        }
    })
}

pub fn log_softmax_axis<T: Real>(t: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    lane_apply(t, axis, |lane| {
        let m = lane.iter().copied().fold(lane[0], T::maxv);
        let z: T = lane.iter().map(|&v| (v - m).exp()).sum();
        let lz = z.ln() + m;
        for v in lane.iter_mut() {
            *v = *v - lz;
        }
    })
}

/// VJP of softmax: dx = s * (dy - sum(dy * s, axis)).
pub fn softmax_backward<T: Real>(
    softmax_out: &Tensor<T>,
    grad: &Tensor<T>,
    axis: usize,
) -> Result<Tensor<T>> {
    let outer: usize = softmax_out.shape()[..axis].iter().product();
    let inner: usize = softmax_out.shape()[axis + 1..].iter().product();
    let axis_len = softmax_out.shape()[axis];
    let s = softmax_out.data();
    let g = grad.data();
    let mut out = vec![T::ZERO; softmax_out.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let mut dot = T::ZERO;
            for j in 0..axis_len {
                let k = (o * axis_len + j) * inner + i;
                dot += g[k] * s[k];
            }
            for j in 0..axis_len {
                let k = (o * axis_len + j) * inner + i;
                out[k] = s[k] * (g[k] - dot);
            }
        }
    }
    Tensor::from_vec(softmax_out.shape().to_vec(), out)
}

/// VJP of log_softmax: dx = dy - softmax * sum(dy, axis).
pub fn log_softmax_backward<T: Real>(
    log_softmax_out: &Tensor<T>,
    grad: &Tensor<T>,
    axis: usize,
) -> Result<Tensor<T>> {
    let outer: usize = log_softmax_out.shape()[..axis].iter().product();
    let inner: usize = log_softmax_out.shape()[axis + 1..].iter().product();
    let axis_len = log_softmax_out.shape()[axis];
    let ls = log_softmax_out.data();
    let g = grad.data();
    let mut out = vec![T::ZERO; log_softmax_out.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let mut gsum = T::ZERO;
            for j in 0..axis_len {
                gsum += g[(o * axis_len + j) * inner + i];
            }
            for j in 0..axis_len {
                let k = (o * axis_len + j) * inner + i;
                out[k] = g[k] - ls[k].exp() * gsum;
            }
        }
    }
    Tensor::from_vec(log_softmax_out.shape().to_vec(), out)
}

// ---------------------------------------------------------------------------
// convolution via im2col (spatial rank 1..3, cross-correlation semantics)
// ---------------------------------------------------------------------------

pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub spatial_in: Vec<usize>,
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
    pub spatial_out: Vec<usize>,
}

pub fn conv_geometry<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: &[usize],
    padding: &[usize],
) -> Result<ConvGeometry> {
    let dims = input.rank().saturating_sub(1);
    if !(1..=3).contains(&dims) {
        return Err(shape_err(format!("conv input rank {} unsupported", input.rank())));
    }
    if kernel.rank() != dims + 2 {
        return Err(shape_err(format!(
            "kernel rank {} does not match input rank {}",
            kernel.rank(),
            input.rank()
        )));
    }
    if stride.len() != dims || padding.len() != dims {
        return Err(shape_err("stride/padding length must match spatial rank"));
    }
    let in_channels = input.shape()[0];
    if kernel.shape()[1] != in_channels {
        return Err(shape_err(format!(
            "kernel expects {} input channels, input has {}",
            kernel.shape()[1],
            in_channels
        )));
    }
    let spatial_in = input.shape()[1..].to_vec();
    let kdims = kernel.shape()[2..].to_vec();
    let mut spatial_out = Vec::with_capacity(dims);
    for i in 0..dims {
        if stride[i] == 0 {
            return Err(shape_err("zero stride"));
        }
        let padded = spatial_in[i] + 2 * padding[i];
        if padded < kdims[i] {
            return Err(shape_err(format!(
                "kernel dim {} exceeds padded input {}",
                kdims[i], padded
            )));
        }
        spatial_out.push((padded - kdims[i]) / stride[i] + 1);
    }
    if spatial_out.iter().any(|&o| o == 0) {
        return Err(shape_err("empty conv output"));
    }
    Ok(ConvGeometry {
        in_channels,
        out_channels: kernel.shape()[0],
        spatial_in,
        kernel: kdims,
        stride: stride.to_vec(),
        padding: padding.to_vec(),
        spatial_out,
    })
}

fn im2col<T: Real>(input: &[T], g: &ConvGeometry) -> Vec<T> {
    let dims = g.spatial_in.len();
    let k_prod: usize = g.kernel.iter().product();
    let out_prod: usize = g.spatial_out.iter().product();
    let in_strides = strides_of(&g.spatial_in);
    let mut col = vec![T::ZERO; g.in_channels * k_prod * out_prod];
    let in_sz: usize = g.spatial_in.iter().product();

    let mut out_idx = vec![0usize; dims];
    let mut col_pos = 0usize;
    // column-major over output positions: col[(ci*k_prod + kf) * out_prod + pos]
    loop {
        let mut k_idx = vec![0usize; dims];
        let mut kf = 0usize;
        loop {
            // source coordinate per dim; skip if out of bounds (zero padding)
            let mut src = 0usize;
            let mut ok = true;
            for d in 0..dims {
                let c = out_idx[d] * g.stride[d] + k_idx[d];
                if c < g.padding[d] || c - g.padding[d] >= g.spatial_in[d] {
                    ok = false;
                    break;
                }
                src += (c - g.padding[d]) * in_strides[d];
            }
            if ok {
                for ci in 0..g.in_channels {
                    col[(ci * k_prod + kf) * out_prod + col_pos] = input[ci * in_sz + src];
                }
            }
            kf += 1;
            if !next_index(&mut k_idx, &g.kernel) {
                break;
            }
        }
        col_pos += 1;
        if !next_index(&mut out_idx, &g.spatial_out) {
            break;
        }
    }
    col
}

fn col2im<T: Real>(col: &[T], g: &ConvGeometry) -> Vec<T> {
    let dims = g.spatial_in.len();
    let k_prod: usize = g.kernel.iter().product();
    let out_prod: usize = g.spatial_out.iter().product();
    let in_strides = strides_of(&g.spatial_in);
    let in_sz: usize = g.spatial_in.iter().product();
    let mut input = vec![T::ZERO; g.in_channels * in_sz];

    let mut out_idx = vec![0usize; dims];
    let mut col_pos = 0usize;
    loop {
        let mut k_idx = vec![0usize; dims];
        let mut kf = 0usize;
        loop {
            let mut src = 0usize;
            let mut ok = true;
            for d in 0..dims {
                let c = out_idx[d] * g.stride[d] + k_idx[d];
                if c < g.padding[d] || c - g.padding[d] >= g.spatial_in[d] {
                    ok = false;
                    break;
                }
                src += (c - g.padding[d]) * in_strides[d];
            }
            if ok {
                for ci in 0..g.in_channels {
                    input[ci * in_sz + src] += col[(ci * k_prod + kf) * out_prod + col_pos];
                }
            }
            kf += 1;
            if !next_index(&mut k_idx, &g.kernel) {
                break;
            }
        }
        col_pos += 1;
        if !next_index(&mut out_idx, &g.spatial_out) {
            break;
        }
    }
    input
}

/// Cross-correlation of `input` (C_in × spatial) with `kernel`
/// (C_out × C_in × k-spatial).
pub fn conv<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: &[usize],
    padding: &[usize],
) -> Result<Tensor<T>> {
    let g = conv_geometry(input, kernel, stride, padding)?;
    let k_prod: usize = g.kernel.iter().product();
    let out_prod: usize = g.spatial_out.iter().product();
    let col = im2col(input.data(), &g);
    let out = matmul_raw(
        kernel.data(),
        &col,
        g.out_channels,
        g.in_channels * k_prod,
        out_prod,
    );
    let mut shape = vec![g.out_channels];
    shape.extend_from_slice(&g.spatial_out);
    Tensor::from_vec(shape, out)
}

/// Gradients of `conv` with respect to (input, kernel).
pub fn conv_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: &[usize],
    padding: &[usize],
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = conv_geometry(input, kernel, stride, padding)?;
    let k_prod: usize = g.kernel.iter().product();
    let out_prod: usize = g.spatial_out.iter().product();
    let ck = g.in_channels * k_prod;

    let col = im2col(input.data(), &g);
    // dW[oc, ck] = sum_pos grad[oc, pos] * col[ck, pos]
    let col_t = {
        let t = Tensor::from_vec(vec![ck, out_prod], col)?;
        transpose2(&t)?
    };
    let dw = matmul_raw(grad_out.data(), col_t.data(), g.out_channels, out_prod, ck);
    // dcol[ck, pos] = sum_oc W[oc, ck] * grad[oc, pos]
    let w_t = transpose2(kernel.reshape(&[g.out_channels, ck])?.as_ref())?;
    let dcol = matmul_raw(w_t.data(), grad_out.data(), ck, g.out_channels, out_prod);
    let dinput = col2im(&dcol, &g);

    Ok((
        Tensor::from_vec(input.shape().to_vec(), dinput)?,
        Tensor::from_vec(kernel.shape().to_vec(), dw)?,
    ))
}

trait AsRefTensor<T> {
    fn as_ref(&self) -> &Self;
}
impl<T> AsRefTensor<T> for Tensor<T> {
    fn as_ref(&self) -> &Self {
        self
    }
}

// ---------------------------------------------------------------------------
// resampling
// ---------------------------------------------------------------------------

/// Nearest-neighbor resize of the trailing `target.len()` spatial dims; the
/// leading dim is treated as channels.
pub fn resize_nearest<T: Real>(t: &Tensor<T>, target: &[usize]) -> Result<Tensor<T>> {
    let dims = target.len();
    if t.rank() != dims + 1 {
        return Err(shape_err(format!(
            "resize_nearest rank {} vs target {target:?}",
            t.rank()
        )));
    }
    let channels = t.shape()[0];
    let src_sp = &t.shape()[1..];
    let src_strides = strides_of(src_sp);
    let src_sz: usize = src_sp.iter().product();
    let dst_sz: usize = target.iter().product();
    let mut out = vec![T::ZERO; channels * dst_sz];
    let mut idx = vec![0usize; dims];
    let mut flat = 0usize;
    loop {
        let mut src = 0usize;
        for d in 0..dims {
            src += (idx[d] * src_sp[d] / target[d]) * src_strides[d];
        }
        for c in 0..channels {
            out[c * dst_sz + flat] = t.data()[c * src_sz + src];
        }
        flat += 1;
        if !next_index(&mut idx, target) {
            break;
        }
    }
    let mut shape = vec![channels];
    shape.extend_from_slice(target);
    Tensor::from_vec(shape, out)
}

pub fn resize_nearest_backward<T: Real>(
    grad: &Tensor<T>,
    src_shape: &[usize],
) -> Result<Tensor<T>> {
    let dims = src_shape.len() - 1;
    let channels = src_shape[0];
    let src_sp = &src_shape[1..];
    let target = &grad.shape()[1..];
    let src_strides = strides_of(src_sp);
    let src_sz: usize = src_sp.iter().product();
    let dst_sz: usize = target.iter().product();
    let mut out = vec![T::ZERO; channels * src_sz];
    let mut idx = vec![0usize; dims];
    let mut flat = 0usize;
    loop {
        let mut src = 0usize;
        for d in 0..dims {
            src += (idx[d] * src_sp[d] / target[d]) * src_strides[d];
        }
        for c in 0..channels {
            out[c * src_sz + src] += grad.data()[c * dst_sz + flat];
        }
        flat += 1;
        if !next_index(&mut idx, target) {
            break;
        }
    }
    Tensor::from_vec(src_shape.to_vec(), out)
}

fn linear_coeffs(dst: usize, src: usize) -> Vec<(usize, usize, f64)> {
    // align-corners mapping: preserves endpoints and linear ramps
    (0..dst)
        .map(|i| {
            if dst == 1 || src == 1 {
                return (0usize, 0usize, 0.0);
            }
            let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Bilinear resize of the last two dims; leading dims are batch/channel-like.
pub fn resize_bilinear<T: Real>(t: &Tensor<T>, th: usize, tw: usize) -> Result<Tensor<T>> {
    if t.rank() < 2 {
        return Err(shape_err("resize_bilinear needs rank >= 2"));
    }
    let (h, w) = (t.shape()[t.rank() - 2], t.shape()[t.rank() - 1]);
    let lead: usize = t.shape()[..t.rank() - 2].iter().product();
    let hc = linear_coeffs(th, h);
    let wc = linear_coeffs(tw, w);
    let mut out = vec![T::ZERO; lead * th * tw];
    for l in 0..lead {
        let src = &t.data()[l * h * w..(l + 1) * h * w];
        let dst = &mut out[l * th * tw..(l + 1) * th * tw];
        for (i, &(y0, y1, fy)) in hc.iter().enumerate() {
            for (j, &(x0, x1, fx)) in wc.iter().enumerate() {
                let v00 = src[y0 * w + x0].to_f64();
                let v01 = src[y0 * w + x1].to_f64();
                let v10 = src[y1 * w + x0].to_f64();
                let v11 = src[y1 * w + x1].to_f64();
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                dst[i * tw + j] = T::of(top + (bot - top) * fy);
            }
        }
    }
    let mut shape = t.shape()[..t.rank() - 2].to_vec();
    shape.push(th);
    shape.push(tw);
    Tensor::from_vec(shape, out)
}

pub fn resize_bilinear_backward<T: Real>(
    grad: &Tensor<T>,
    src_shape: &[usize],
) -> Result<Tensor<T>> {
    let rank = src_shape.len();
    let (h, w) = (src_shape[rank - 2], src_shape[rank - 1]);
    let (th, tw) = (grad.shape()[rank - 2], grad.shape()[rank - 1]);
    let lead: usize = src_shape[..rank - 2].iter().product();
    let hc = linear_coeffs(th, h);
    let wc = linear_coeffs(tw, w);
    let mut out = vec![T::ZERO; lead * h * w];
    for l in 0..lead {
        let g = &grad.data()[l * th * tw..(l + 1) * th * tw];
        let dst = &mut out[l * h * w..(l + 1) * h * w];
        for (i, &(y0, y1, fy)) in hc.iter().enumerate() {
            for (j, &(x0, x1, fx)) in wc.iter().enumerate() {
                let gv = g[i * tw + j].to_f64();
                dst[y0 * w + x0] += T::of(gv * (1.0 - fy) * (1.0 - fx));
                dst[y0 * w + x1] += T::of(gv * (1.0 - fy) * fx);
                dst[y1 * w + x0] += T::of(gv * fy * (1.0 - fx));
                dst[y1 * w + x1] += T::of(gv * fy * fx);
            }
        }
    }
    Tensor::from_vec(src_shape.to_vec(), out)
}

// ---------------------------------------------------------------------------
// weighted trilinear gather (deformable sampling)
// ---------------------------------------------------------------------------

/// out[c, p] = sum_k weights[k, p] * V_c(p + disp_k(p))
///
/// `volume`: C × D × H × W; `disp`: (3K) × D × H × W holding (dz, dy, dx) per
/// point; `weights`: K × D × H × W. Out-of-bounds corners read zero.
pub fn trilinear_gather<T: Real>(
    volume: &Tensor<T>,
    disp: &Tensor<T>,
    weights: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (c, d, h, w) = vol_dims(volume)?;
    let k = check_gather_shapes(volume, disp, weights)?;
    let sz = d * h * w;
    let mut out = vec![T::ZERO; c * sz];
    for p in 0..sz {
        let (pd, ph, pw) = ((p / (h * w)) as f64, ((p / w) % h) as f64, (p % w) as f64);
        for kk in 0..k {
            let wt = weights.data()[kk * sz + p];
            let fd = pd + disp.data()[(3 * kk) * sz + p].to_f64();
            let fh = ph + disp.data()[(3 * kk + 1) * sz + p].to_f64();
            let fw = pw + disp.data()[(3 * kk + 2) * sz + p].to_f64();
            for ci in 0..c {
                let v = trilerp(&volume.data()[ci * sz..(ci + 1) * sz], d, h, w, fd, fh, fw);
                out[ci * sz + p] += wt * T::of(v);
            }
        }
    }
    Tensor::from_vec(volume.shape().to_vec(), out)
}

/// Gradients of `trilinear_gather` w.r.t. (volume, disp, weights).
pub fn trilinear_gather_backward<T: Real>(
    volume: &Tensor<T>,
    disp: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (c, d, h, w) = vol_dims(volume)?;
    let k = check_gather_shapes(volume, disp, weights)?;
    let sz = d * h * w;
    let mut dvol = vec![T::ZERO; c * sz];
    let mut ddisp = vec![T::ZERO; 3 * k * sz];
    let mut dwt = vec![T::ZERO; k * sz];
    for p in 0..sz {
        let (pd, ph, pw) = ((p / (h * w)) as f64, ((p / w) % h) as f64, (p % w) as f64);
        for kk in 0..k {
            let wt = weights.data()[kk * sz + p].to_f64();
            let fd = pd + disp.data()[(3 * kk) * sz + p].to_f64();
            let fh = ph + disp.data()[(3 * kk + 1) * sz + p].to_f64();
            let fw = pw + disp.data()[(3 * kk + 2) * sz + p].to_f64();
            let mut dw_acc = 0.0f64;
            let mut dcoord = [0.0f64; 3];
            for ci in 0..c {
                let g = grad_out.data()[ci * sz + p].to_f64();
                let vol_c = &volume.data()[ci * sz..(ci + 1) * sz];
                let (val, dd, dh2, dw2) = trilerp_with_grad(vol_c, d, h, w, fd, fh, fw);
                dw_acc += g * val;
                dcoord[0] += g * wt * dd;
                dcoord[1] += g * wt * dh2;
                dcoord[2] += g * wt * dw2;
                // scatter into the 8 corners
                scatter_corners(&mut dvol[ci * sz..(ci + 1) * sz], d, h, w, fd, fh, fw, g * wt);
            }
            dwt[kk * sz + p] += T::of(dw_acc);
            ddisp[(3 * kk) * sz + p] += T::of(dcoord[0]);
            ddisp[(3 * kk + 1) * sz + p] += T::of(dcoord[1]);
            ddisp[(3 * kk + 2) * sz + p] += T::of(dcoord[2]);
        }
    }
    Ok((
        Tensor::from_vec(volume.shape().to_vec(), dvol)?,
        Tensor::from_vec(disp.shape().to_vec(), ddisp)?,
        Tensor::from_vec(weights.shape().to_vec(), dwt)?,
    ))
}

fn vol_dims<T: Real>(volume: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    if volume.rank() != 4 {
        return Err(shape_err(format!("volume must be C×D×H×W, got {:?}", volume.shape())));
    }
    let s = volume.shape();
    Ok((s[0], s[1], s[2], s[3]))
}

fn check_gather_shapes<T: Real>(
    volume: &Tensor<T>,
    disp: &Tensor<T>,
    weights: &Tensor<T>,
) -> Result<usize> {
    let sp = &volume.shape()[1..];
    if disp.rank() != 4 || weights.rank() != 4 || &disp.shape()[1..] != sp
        || &weights.shape()[1..] != sp
    {
        return Err(shape_err("disp/weights spatial dims must match volume"));
    }
    let k = weights.shape()[0];
    if disp.shape()[0] != 3 * k {
        return Err(shape_err(format!(
            "disp channels {} must be 3x weight channels {k}",
            disp.shape()[0]
        )));
    }
    Ok(k)
}

#[inline]
fn corner_val(vol: &[f64], _d: usize, h: usize, w: usize, zi: i64, yi: i64, xi: i64, dims: (i64, i64, i64)) -> f64 {
    if zi < 0 || yi < 0 || xi < 0 || zi >= dims.0 || yi >= dims.1 || xi >= dims.2 {
        0.0
    } else {
        vol[(zi as usize) * h * w + (yi as usize) * w + xi as usize]
    }
}

fn trilerp<T: Real>(vol: &[T], d: usize, h: usize, w: usize, fd: f64, fh: f64, fw: f64) -> f64 {
    let (v, _, _, _) = trilerp_impl(vol, d, h, w, fd, fh, fw, false);
    v
}

fn trilerp_with_grad<T: Real>(
    vol: &[T],
    d: usize,
    h: usize,
    w: usize,
    fd: f64,
    fh: f64,
    fw: f64,
) -> (f64, f64, f64, f64) {
    trilerp_impl(vol, d, h, w, fd, fh, fw, true)
}

fn trilerp_impl<T: Real>(
    vol: &[T],
    d: usize,
    h: usize,
    w: usize,
    fd: f64,
    fh: f64,
    fw: f64,
    want_grad: bool,
) -> (f64, f64, f64, f64) {
    let z0 = fd.floor();
    let y0 = fh.floor();
    let x0 = fw.floor();
    let (tz, ty, tx) = (fd - z0, fh - y0, fw - x0);
    let (z0, y0, x0) = (z0 as i64, y0 as i64, x0 as i64);
    let dims = (d as i64, h as i64, w as i64);
    let f64vol: Vec<f64>;
    let volf: &[f64] = {
        f64vol = vol.iter().map(|x| x.to_f64()).collect();
        &f64vol
    };
    let mut val = 0.0;
    let mut gd = 0.0;
    let mut gh = 0.0;
    let mut gw = 0.0;
    for dz in 0..2i64 {
        for dy in 0..2i64 {
            for dx in 0..2i64 {
                let v = corner_val(volf, d, h, w, z0 + dz, y0 + dy, x0 + dx, dims);
                let wz = if dz == 1 { tz } else { 1.0 - tz };
                let wy = if dy == 1 { ty } else { 1.0 - ty };
                let wx = if dx == 1 { tx } else { 1.0 - tx };
                val += v * wz * wy * wx;
                if want_grad {
                    let sz = if dz == 1 { 1.0 } else { -1.0 };
                    let sy = if dy == 1 { 1.0 } else { -1.0 };
                    let sx = if dx == 1 { 1.0 } else { -1.0 };
                    gd += v * sz * wy * wx;
                    gh += v * wz * sy * wx;
                    gw += v * wz * wy * sx;
                }
            }
        }
    }
    (val, gd, gh, gw)
}

#[allow(clippy::too_many_arguments)]
fn scatter_corners<T: Real>(
    dvol: &mut [T],
    d: usize,
    h: usize,
    w: usize,
    fd: f64,
    fh: f64,
    fw: f64,
    g: f64,
) {
    let z0 = fd.floor();
    let y0 = fh.floor();
    let x0 = fw.floor();
    let (tz, ty, tx) = (fd - z0, fh - y0, fw - x0);
    let (z0, y0, x0) = (z0 as i64, y0 as i64, x0 as i64);
    for dz in 0..2i64 {
        for dy in 0..2i64 {
            for dx in 0..2i64 {
                let (zi, yi, xi) = (z0 + dz, y0 + dy, x0 + dx);
                if zi < 0 || yi < 0 || xi < 0 || zi >= d as i64 || yi >= h as i64 || xi >= w as i64
                {
                    continue;
                }
                let wz = if dz == 1 { tz } else { 1.0 - tz };
                let wy = if dy == 1 { ty } else { 1.0 - ty };
                let wx = if dx == 1 { tx } else { 1.0 - tx };
                dvol[(zi as usize) * h * w + (yi as usize) * w + xi as usize] +=
                    T::of(g * wz * wy * wx);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// row gather / embedding lookup
// ---------------------------------------------------------------------------

/// Select rows of a (L × d) matrix.
pub fn gather_rows<T: Real>(t: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    if t.rank() != 2 {
        return Err(shape_err("gather_rows needs rank 2"));
    }
    let (l, dm) = (t.shape()[0], t.shape()[1]);
    let mut out = Vec::with_capacity(ids.len() * dm);
    for &i in ids {
        if i >= l {
            return Err(OccError::IndexOutOfRange { index: i, limit: l });
        }
        out.extend_from_slice(&t.data()[i * dm..(i + 1) * dm]);
    }
    Tensor::from_vec(vec![ids.len(), dm], out)
}

pub fn scatter_rows_backward<T: Real>(
    grad: &Tensor<T>,
    ids: &[usize],
    rows: usize,
) -> Result<Tensor<T>> {
    let dm = grad.shape()[1];
    let mut out = vec![T::ZERO; rows * dm];
    for (j, &i) in ids.iter().enumerate() {
        let src = &grad.data()[j * dm..(j + 1) * dm];
        let dst = &mut out[i * dm..(i + 1) * dm];
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }
    Tensor::from_vec(vec![rows, dm], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn binary_broadcast_matches_hand() {
        let a = t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t64(&[2], &[10.0, 20.0]);
        let c = binary_op(&a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.to_vec(), vec![11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn reduce_to_shape_sums_broadcast_dims() {
        let g = t64(&[2, 3], &[1.0; 6]);
        let r = reduce_to_shape(&g, &[3]).unwrap();
        assert_eq!(r.to_vec(), vec![2.0, 2.0, 2.0]);
        let r2 = reduce_to_shape(&g, &[2, 1]).unwrap();
        assert_eq!(r2.to_vec(), vec![3.0, 3.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let a = t64(&[1, 2], &[1.0, 2.0]);
        let b = t64(&[2, 1], &[3.0, 4.0]);
        assert_eq!(matmul(&a, &b).unwrap().to_vec(), vec![11.0]);
    }

    #[test]
    fn conv_identity_and_zero() {
        // 1x1 kernel of 1.0 is the identity map
        let img = t64(&[1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let k_id = t64(&[1, 1, 1, 1], &[1.0]);
        let out = conv(&img, &k_id, &[1, 1], &[0, 0]).unwrap();
        assert_eq!(out.to_vec(), img.to_vec());
        // all-zero kernel gives all-zero output
        let k0 = t64(&[2, 1, 2, 2], &[0.0; 8]);
        let out0 = conv(&img, &k0, &[1, 1], &[0, 0]).unwrap();
        assert!(out0.to_vec().iter().all(|&v| v == 0.0));
        assert_eq!(out0.shape(), &[2, 1, 2]);
    }

    #[test]
    fn conv_valid_averaging_on_constant() {
        let img = Tensor::<f64>::full(&[1, 4, 4], 3.5);
        let k = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0 / 9.0);
        let out = conv(&img, &k, &[1, 1], &[0, 0]).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2]);
        for v in out.to_vec() {
            assert!((v - 3.5).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_matches_naive_3d() {
        // brute-force cross-correlation on a small 3d case
        let mut rng = crate::rng::RngStream::new(5);
        let input = Tensor::<f64>::randn(&[2, 3, 4, 3], 1.0, &mut rng);
        let kernel = Tensor::<f64>::randn(&[3, 2, 2, 2, 2], 1.0, &mut rng);
        let stride = [1usize, 2, 1];
        let pad = [1usize, 0, 1];
        let out = conv(&input, &kernel, &stride, &pad).unwrap();
        let g = conv_geometry(&input, &kernel, &stride, &pad).unwrap();
        for oc in 0..3 {
            let mut oidx = vec![0usize; 3];
            let mut flat = 0;
            loop {
                let mut acc = 0.0;
                for ic in 0..2 {
                    for kd in 0..2 {
                        for kh in 0..2 {
                            for kw in 0..2 {
                                let zd = oidx[0] * stride[0] + kd;
                                let zh = oidx[1] * stride[1] + kh;
                                let zw = oidx[2] * stride[2] + kw;
                                if zd < pad[0] || zh < pad[1] || zw < pad[2] {
                                    continue;
                                }
                                let (zd, zh, zw) = (zd - pad[0], zh - pad[1], zw - pad[2]);
                                if zd >= 3 || zh >= 4 || zw >= 3 {
                                    continue;
                                }
                                let iv = input.data()[((ic * 3 + zd) * 4 + zh) * 3 + zw];
                                let kv = kernel.data()
                                    [((((oc * 2) + ic) * 2 + kd) * 2 + kh) * 2 + kw];
                                acc += iv * kv;
                            }
                        }
                    }
                }
                let sp: usize = g.spatial_out.iter().product();
                assert!((out.data()[oc * sp + flat] - acc).abs() < 1e-9);
                flat += 1;
                if !next_index(&mut oidx, &g.spatial_out) {
                    break;
                }
            }
        }
    }

    #[test]
    fn bilinear_preserves_ramp() {
        // linear ramp along w stays linear after resize
        let src: Vec<f64> = (0..4).map(|i| i as f64).collect();
        let t = t64(&[1, 1, 4], &src);
        let out = resize_bilinear(&t, 1, 7).unwrap();
        for (j, v) in out.to_vec().iter().enumerate() {
            let expect = j as f64 * 3.0 / 6.0;
            assert!((v - expect).abs() < 1e-12, "{j}: {v} vs {expect}");
        }
    }

    #[test]
    fn trilinear_midpoint_on_ramp() {
        // ramp volume along depth: value = d
        let mut data = vec![0.0f64; 4 * 2 * 2];
        for d in 0..4 {
            for i in 0..4 {
                data[d * 4 + i] = d as f64;
            }
        }
        let vol = t64(&[1, 4, 2, 2], &data);
        // two points: offsets 0 and +1 in depth, each weight 0.5
        let mut disp = vec![0.0f64; 6 * 4 * 2 * 2 / 4]; // (3K=6) x D x H x W with D=4,H=2,W=2
        disp.resize(6 * 16, 0.0);
        for p in 0..16 {
            disp[3 * 16 + p] = 1.0; // second point: dz = +1
        }
        let dispt = t64(&[6, 4, 2, 2], &disp);
        let wt = Tensor::<f64>::full(&[2, 4, 2, 2], 0.5);
        let out = trilinear_gather(&vol, &dispt, &wt).unwrap();
        // interior depths: 0.5*d + 0.5*(d+1) = d + 0.5 ; at d=3 the +1 point falls outside -> 0
        for d in 0..3 {
            for i in 0..4 {
                assert!((out.data()[d * 4 + i] - (d as f64 + 0.5)).abs() < 1e-12);
            }
        }
        for i in 0..4 {
            assert!((out.data()[3 * 4 + i] - 1.5).abs() < 1e-12); // 0.5*3 + 0.5*0
        }
    }

    #[test]
    fn softmax_lanes_sum_to_one() {
        let t = t64(&[2, 3], &[0.1, 1.0, -2.0, 5.0, 5.0, 5.0]);
        let s = softmax_axis(&t, 1).unwrap();
        for lane in 0..2 {
            let sum: f64 = s.data()[lane * 3..(lane + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        assert!((s.data()[3] - 1.0 / 3.0).abs() < 1e-12);
    }
}
