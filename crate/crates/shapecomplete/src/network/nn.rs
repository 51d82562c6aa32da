//! 3D convolution engine: conv3d / transposed conv3d with hand-written
//! backward passes, built on an im2col gather plus GEMM.
//!
//! Every output element is produced by exactly one fixed-order dot
//! product regardless of thread count: work is split over fixed-size
//! column chunks and weight-gradient partials are reduced in chunk
//! order. Results are therefore bitwise deterministic.

use rayon::prelude::*;

use crate::voxel::Shape3;

/// Channel-major dense grid: `[C][L][W][H]`, H fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub shape: Shape3,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(channels: usize, shape: Shape3) -> Self {
        Tensor {
            channels,
            shape,
            data: vec![0.0; channels * shape[0] * shape[1] * shape[2]],
        }
    }

    pub fn from_data(channels: usize, shape: Shape3, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * shape[0] * shape[1] * shape[2]);
        Tensor {
            channels,
            shape,
            data,
        }
    }

    pub fn voxels(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }
}

/// Output length of a strided convolution along one axis.
pub fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Output length of a transposed convolution along one axis.
pub fn tconv_out_dim(n: usize, k: usize, stride: usize, pad: usize, out_pad: usize) -> usize {
    (n - 1) * stride + k + out_pad - 2 * pad
}

fn conv_out_shape(shape: Shape3, k: usize, stride: usize, pad: usize) -> Shape3 {
    [
        conv_out_dim(shape[0], k, stride, pad),
        conv_out_dim(shape[1], k, stride, pad),
        conv_out_dim(shape[2], k, stride, pad),
    ]
}

fn tconv_out_shape(shape: Shape3, k: usize, stride: usize, pad: usize, out_pad: usize) -> Shape3 {
    [
        tconv_out_dim(shape[0], k, stride, pad, out_pad),
        tconv_out_dim(shape[1], k, stride, pad, out_pad),
        tconv_out_dim(shape[2], k, stride, pad, out_pad),
    ]
}

/// How a destination position maps to source positions during the gather.
#[derive(Clone, Copy, Debug, PartialEq)]
enum GatherMode {
    /// `src = dst * stride - pad + k`: the usual convolution input patch.
    Forward,
    /// `src = (dst + pad - k) / stride` where divisible: the adjoint
    /// (transposed-convolution) patch.
    Adjoint,
}

/// Fills `cols` (row-major `[src_ch * k^3][n_cols]`) with the source
/// patches of destination positions `[col_start, col_start + n_cols)`.
#[allow(clippy::too_many_arguments)]
fn gather_cols(
    src: &[f32],
    src_ch: usize,
    src_shape: Shape3,
    dst_shape: Shape3,
    k: usize,
    stride: usize,
    pad: usize,
    mode: GatherMode,
    col_start: usize,
    n_cols: usize,
    cols: &mut [f32],
) {
    let [sl, sw, sh] = src_shape;
    let src_plane = sl * sw * sh;
    let (dw, dh) = (dst_shape[1], dst_shape[2]);
    debug_assert_eq!(cols.len(), src_ch * k * k * k * n_cols);

    let src_index = |axis_len: usize, dst: usize, koff: usize| -> Option<usize> {
        match mode {
            GatherMode::Forward => {
                let s = dst * stride + koff;
                // pad is subtracted; do it in signed space.
                let s = s as i64 - pad as i64;
                (s >= 0 && (s as usize) < axis_len).then_some(s as usize)
            }
            GatherMode::Adjoint => {
                let numer = dst as i64 + pad as i64 - koff as i64;
                if numer < 0 || numer % stride as i64 != 0 {
                    return None;
                }
                let s = (numer / stride as i64) as usize;
                (s < axis_len).then_some(s)
            }
        }
    };

    let mut row = 0;
    for ci in 0..src_ch {
        let src_c = &src[ci * src_plane..(ci + 1) * src_plane];
        for kx in 0..k {
            for ky in 0..k {
                for kz in 0..k {
                    let out_row = &mut cols[row * n_cols..(row + 1) * n_cols];
                    // Decode the flattened dst position incrementally.
                    let mut l = col_start / (dw * dh);
                    let mut rem = col_start % (dw * dh);
                    let mut w = rem / dh;
                    let mut h = rem % dh;
                    let mut sl_idx = src_index(sl, l, kx);
                    let mut sw_idx = src_index(sw, w, ky);
                    for slot in out_row.iter_mut() {
                        let v = match (sl_idx, sw_idx, src_index(sh, h, kz)) {
                            (Some(a), Some(b), Some(c)) => src_c[(a * sw + b) * sh + c],
                            _ => 0.0,
                        };
                        *slot = v;
                        h += 1;
                        if h == dh {
                            h = 0;
                            w += 1;
                            if w == dw {
                                w = 0;
                                l += 1;
                                sl_idx = src_index(sl, l, kx);
                            }
                            sw_idx = src_index(sw, w, ky);
                        }
                    }
                    row += 1;
                    rem = 0;
                    let _ = rem;
                }
            }
        }
    }
}

/// Column-chunk width targeting a ~8 MB gather buffer; a pure function of
/// the row count so chunking never depends on thread scheduling.
fn chunk_cols(rows: usize) -> usize {
    ((8 << 20) / (4 * rows.max(1))).clamp(256, 8192)
}

struct SendPtr(*mut f32);
unsafe impl Send for SendPtr {}
unsafe impl Sync for SendPtr {}

/// `dst[m x n_total] (row-major) columns [c0..c0+n) += or = w_mat[m x rows] * cols`.
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_into(
    m: usize,
    rows: usize,
    n: usize,
    w_mat: &[f32],
    cols: &[f32],
    dst: *mut f32,
    dst_row_stride: usize,
    col_offset: usize,
) {
    matrixmultiply::sgemm(
        m,
        rows,
        n,
        1.0,
        w_mat.as_ptr(),
        rows as isize,
        1,
        cols.as_ptr(),
        n as isize,
        1,
        0.0,
        dst.add(col_offset),
        dst_row_stride as isize,
        1,
    );
}

/// The shared driver: `dst[co, p] = sum_{ci,k} w_mat[co, ci*k^3+k] * patch`,
/// parallel over column chunks, plus optional bias.
#[allow(clippy::too_many_arguments)]
fn gathered_matmul(
    src: &Tensor,
    dst_ch: usize,
    dst_shape: Shape3,
    w_mat: &[f32],
    bias: Option<&[f32]>,
    k: usize,
    stride: usize,
    pad: usize,
    mode: GatherMode,
) -> Tensor {
    let rows = src.channels * k * k * k;
    let n_total = dst_shape[0] * dst_shape[1] * dst_shape[2];
    let mut out = Tensor::zeros(dst_ch, dst_shape);
    let chunk = chunk_cols(rows);
    let n_chunks = n_total.div_ceil(chunk);
    let out_ptr = SendPtr(out.data.as_mut_ptr());
    let out_ref = &out_ptr;

    (0..n_chunks).into_par_iter().for_each(|ci| {
        let c0 = ci * chunk;
        let n = chunk.min(n_total - c0);
        let mut cols = vec![0.0f32; rows * n];
        gather_cols(
            &src.data,
            src.channels,
            src.shape,
            dst_shape,
            k,
            stride,
            pad,
            mode,
            c0,
            n,
            &mut cols,
        );
        unsafe {
            gemm_into(dst_ch, rows, n, w_mat, &cols, out_ref.0, n_total, c0);
        }
    });

    if let Some(bias) = bias {
        for (co, &b) in bias.iter().enumerate() {
            for v in &mut out.data[co * n_total..(co + 1) * n_total] {
                *v += b;
            }
        }
    }
    out
}

/// `dw_mat[dst_ch, rows] = grad[dst_ch, :] * patches(src)^T`, reduced over
/// column chunks in fixed order.
#[allow(clippy::too_many_arguments)]
fn gathered_weight_grad(
    src: &Tensor,
    grad: &Tensor,
    k: usize,
    stride: usize,
    pad: usize,
    mode: GatherMode,
) -> Vec<f32> {
    let rows = src.channels * k * k * k;
    let dst_ch = grad.channels;
    let n_total = grad.voxels();
    let chunk = chunk_cols(rows);
    let n_chunks = n_total.div_ceil(chunk);

    let partials: Vec<Vec<f32>> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let c0 = ci * chunk;
            let n = chunk.min(n_total - c0);
            let mut cols = vec![0.0f32; rows * n];
            gather_cols(
                &src.data,
                src.channels,
                src.shape,
                grad.shape,
                k,
                stride,
                pad,
                mode,
                c0,
                n,
                &mut cols,
            );
            let mut dw = vec![0.0f32; dst_ch * rows];
            // dw[co, r] = sum_j grad[co, c0 + j] * cols[r, j]
            unsafe {
                matrixmultiply::sgemm(
                    dst_ch,
                    n,
                    rows,
                    1.0,
                    grad.data.as_ptr().add(c0),
                    n_total as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    n as isize,
                    0.0,
                    dw.as_mut_ptr(),
                    rows as isize,
                    1,
                )
            };
            dw
        })
        .collect();

    let mut dw = vec![0.0f32; dst_ch * rows];
    for partial in partials {
        for (acc, p) in dw.iter_mut().zip(&partial) {
            *acc += p;
        }
    }
    dw
}

fn bias_grad(grad: &Tensor) -> Vec<f32> {
    let n = grad.voxels();
    (0..grad.channels)
        .map(|co| grad.data[co * n..(co + 1) * n].iter().sum())
        .collect()
}

/// Permutes `[a][b][k^3]` flat weights into `[b][a][k^3]`.
fn permute_ab(w: &[f32], a: usize, b: usize, k3: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; w.len()];
    for ia in 0..a {
        for ib in 0..b {
            let src = (ia * b + ib) * k3;
            let dst = (ib * a + ia) * k3;
            out[dst..dst + k3].copy_from_slice(&w[src..src + k3]);
        }
    }
    out
}

/// Strided 3D convolution, kernel `k`, padding `(k-1)/2`.
///
/// Weights are `[out_ch][in_ch][k^3]` flat; biases per output channel.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub w: Vec<f32>,
    pub b: Vec<f32>,
    pub dw: Vec<f32>,
    pub db: Vec<f32>,
}

impl Conv3d {
    pub fn new(in_ch: usize, out_ch: usize, k: usize, stride: usize) -> Self {
        let k3 = k * k * k;
        Conv3d {
            in_ch,
            out_ch,
            k,
            stride,
            w: vec![0.0; out_ch * in_ch * k3],
            b: vec![0.0; out_ch],
            dw: vec![0.0; out_ch * in_ch * k3],
            db: vec![0.0; out_ch],
        }
    }

    fn pad(&self) -> usize {
        (self.k - 1) / 2
    }

    pub fn out_shape(&self, shape: Shape3) -> Shape3 {
        conv_out_shape(shape, self.k, self.stride, self.pad())
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        debug_assert_eq!(x.channels, self.in_ch);
        gathered_matmul(
            x,
            self.out_ch,
            self.out_shape(x.shape),
            &self.w,
            Some(&self.b),
            self.k,
            self.stride,
            self.pad(),
            GatherMode::Forward,
        )
    }

    /// Accumulates weight/bias grads and returns the input grad.
    pub fn backward(&mut self, x: &Tensor, grad_out: &Tensor) -> Tensor {
        let k3 = self.k * self.k * self.k;
        let dw = gathered_weight_grad(x, grad_out, self.k, self.stride, self.pad(), GatherMode::Forward);
        for (acc, d) in self.dw.iter_mut().zip(&dw) {
            *acc += d;
        }
        for (acc, d) in self.db.iter_mut().zip(bias_grad(grad_out)) {
            *acc += d;
        }
        // dX[ci, q] = sum_{co,k} w[co,ci,k] * grad_out[co, p(q,k)]
        let w2 = permute_ab(&self.w, self.out_ch, self.in_ch, k3);
        gathered_matmul(
            grad_out,
            self.in_ch,
            x.shape,
            &w2,
            None,
            self.k,
            self.stride,
            self.pad(),
            GatherMode::Adjoint,
        )
    }
}

/// Transposed 3D convolution: the adjoint of [`Conv3d`] with the same
/// geometry. Weights are `[in_ch][out_ch][k^3]` flat. With stride 2,
/// `output_padding = 1` so even dimensions double exactly.
#[derive(Clone, Debug)]
pub struct ConvTranspose3d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub w: Vec<f32>,
    pub b: Vec<f32>,
    pub dw: Vec<f32>,
    pub db: Vec<f32>,
}

impl ConvTranspose3d {
    pub fn new(in_ch: usize, out_ch: usize, k: usize, stride: usize) -> Self {
        let k3 = k * k * k;
        ConvTranspose3d {
            in_ch,
            out_ch,
            k,
            stride,
            w: vec![0.0; in_ch * out_ch * k3],
            b: vec![0.0; out_ch],
            dw: vec![0.0; in_ch * out_ch * k3],
            db: vec![0.0; out_ch],
        }
    }

    fn pad(&self) -> usize {
        (self.k - 1) / 2
    }

    fn out_pad(&self) -> usize {
        self.stride - 1
    }

    pub fn out_shape(&self, shape: Shape3) -> Shape3 {
        tconv_out_shape(shape, self.k, self.stride, self.pad(), self.out_pad())
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        debug_assert_eq!(x.channels, self.in_ch);
        let k3 = self.k * self.k * self.k;
        // y[co, q] = sum_{ci,k} w[ci,co,k] * x[ci, p(q,k)]
        let w2 = permute_ab(&self.w, self.in_ch, self.out_ch, k3);
        gathered_matmul(
            x,
            self.out_ch,
            self.out_shape(x.shape),
            &w2,
            Some(&self.b),
            self.k,
            self.stride,
            self.pad(),
            GatherMode::Adjoint,
        )
    }

    pub fn backward(&mut self, x: &Tensor, grad_out: &Tensor) -> Tensor {
        // dW[ci, co*k^3+k] = sum_p x[ci, p] * grad_out[co, p*s - pad + k]:
        // the roles of src and grad swap relative to Conv3d.
        let dw = gathered_weight_grad(
            grad_out,
            x,
            self.k,
            self.stride,
            self.pad(),
            GatherMode::Forward,
        );
        for (acc, d) in self.dw.iter_mut().zip(&dw) {
            *acc += d;
        }
        for (acc, d) in self.db.iter_mut().zip(bias_grad(grad_out)) {
            *acc += d;
        }
        // dX[ci, p] = sum_{co,k} w[ci,co,k] * grad_out[co, p*s - pad + k]:
        // a plain forward-mode gather over grad_out with flat weights.
        gathered_matmul(
            grad_out,
            self.in_ch,
            x.shape,
            &self.w,
            None,
            self.k,
            self.stride,
            self.pad(),
            GatherMode::Forward,
        )
    }
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let data = x.data.iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_data(x.channels, x.shape, data)
}

/// ReLU grad from the layer's own output: pass where the output is > 0.
pub fn relu_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = y
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&y, &g)| if y > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_data(y.channels, y.shape, data)
}

pub fn sigmoid_forward(x: &Tensor) -> Tensor {
    let data = x.data.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
    Tensor::from_data(x.channels, x.shape, data)
}

pub fn sigmoid_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = y
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&y, &g)| g * y * (1.0 - y))
        .collect();
    Tensor::from_data(y.channels, y.shape, data)
}

/// Channel-wise softmax at every voxel.
pub fn softmax_forward(x: &Tensor) -> Tensor {
    let n = x.voxels();
    let c = x.channels;
    let mut out = Tensor::zeros(c, x.shape);
    for i in 0..n {
        let mut max = f32::NEG_INFINITY;
        for ch in 0..c {
            max = max.max(x.data[ch * n + i]);
        }
        let mut sum = 0.0;
        for ch in 0..c {
            let e = (x.data[ch * n + i] - max).exp();
            out.data[ch * n + i] = e;
            sum += e;
        }
        for ch in 0..c {
            out.data[ch * n + i] /= sum;
        }
    }
    out
}

pub fn softmax_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    let n = y.voxels();
    let c = y.channels;
    let mut out = Tensor::zeros(c, y.shape);
    for i in 0..n {
        let mut dot = 0.0;
        for ch in 0..c {
            dot += grad_out.data[ch * n + i] * y.data[ch * n + i];
        }
        for ch in 0..c {
            let yi = y.data[ch * n + i];
            out.data[ch * n + i] = yi * (grad_out.data[ch * n + i] - dot);
        }
    }
    out
}
