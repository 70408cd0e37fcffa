//! Numeric kernels for ResNet-18 inference.
//!
//! All kernels take float32 tensors. Quantized or half-precision tensors
//! are widened with [`Tensor::to_f32`] before they reach this module.
//!
//! Convolution gathers input patches into a `[Cin*kh*kw, H'*W']` column
//! matrix and multiplies it by the `[Cout, Cin*kh*kw]` weight matrix. The
//! product is split into fixed blocks of output channels; the same blocks
//! are used for sequential and parallel execution, so both produce
//! bit-identical results.

use num_traits::Float;

use crate::par::{self, Exec};
use crate::tensor::{fmt_dims, Result, Tensor, TensorError};

/// Output channels per GEMM block.
const ROW_BLOCK: usize = 32;

/// Default batch-norm epsilon.
pub const BN_EPSILON: f32 = 1e-5;

/// Output extent of a sliding window: `floor((n + 2p - k) / s) + 1`.
pub fn window_extent(n: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || k == 0 {
        return None;
    }
    let padded = n + 2 * padding;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

fn shape_err(op: &'static str, expected: impl Into<String>, found: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        expected: expected.into(),
        found: fmt_dims(found),
    }
}

fn arg_err(op: &'static str, reason: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        reason: reason.into(),
    }
}

/// 2-D convolution with zero padding, using the default execution policy.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    conv2d_with(Exec::default(), input, weight, bias, stride, padding)
}

pub fn conv2d_with(
    exec: Exec,
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    const OP: &str = "conv2d";
    let [n, cin, h, w] = input.nchw(OP)?;
    let [cout, wcin, kh, kw] = weight.nchw(OP)?;
    if wcin != cin {
        return Err(shape_err(
            OP,
            format!("weight with {cin} input channels"),
            weight.dims(),
        ));
    }
    if stride == 0 {
        return Err(arg_err(OP, "stride must be positive"));
    }
    let (ho, wo) = match (
        window_extent(h, kh, stride, padding),
        window_extent(w, kw, stride, padding),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(arg_err(
                OP,
                format!("kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}"),
            ))
        }
    };
    let bias = match bias {
        Some(b) => {
            if b.dims() != [cout] {
                return Err(shape_err(OP, format!("bias [{cout}]"), b.dims()));
            }
            Some(b.as_f32()?)
        }
        None => None,
    };
    let x = input.as_f32()?;
    let wt = weight.as_f32()?;

    let k = cin * kh * kw;
    let plane = ho * wo;
    let mut out = vec![0f32; n * cout * plane];
    let pointwise = kh == 1 && kw == 1 && stride == 1 && padding == 0;
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![0f32; k * plane]
    };

    for b in 0..n {
        let img = &x[b * cin * h * w..(b + 1) * cin * h * w];
        let cols: &[f32] = if pointwise {
            img
        } else {
            im2col(
                exec,
                img,
                [cin, h, w],
                [kh, kw],
                stride,
                padding,
                [ho, wo],
                &mut col,
            );
            &col
        };
        let dst = &mut out[b * cout * plane..(b + 1) * cout * plane];
        if let Some(bias) = bias {
            for (o, row) in dst.chunks_mut(plane).enumerate() {
                row.fill(bias[o]);
            }
        }
        par::for_each_chunk_mut(exec, dst, ROW_BLOCK * plane, |blk, rows| {
            let r0 = blk * ROW_BLOCK;
            let m = rows.len() / plane;
            let a = &wt[r0 * k..(r0 + m) * k];
            gemm_accumulate(m, k, plane, a, cols, rows);
        });
    }
    Tensor::from_f32(&[n, cout, ho, wo], out)
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    exec: Exec,
    img: &[f32],
    [_cin, h, w]: [usize; 3],
    [kh, kw]: [usize; 2],
    stride: usize,
    padding: usize,
    [ho, wo]: [usize; 2],
    col: &mut [f32],
) {
    let plane = ho * wo;
    par::for_each_chunk_mut(exec, col, plane, |row, dst| {
        let c = row / (kh * kw);
        let i = (row / kw) % kh;
        let j = row % kw;
        let src = &img[c * h * w..(c + 1) * h * w];
        for y in 0..ho {
            let iy = (y * stride + i) as isize - padding as isize;
            let line = &mut dst[y * wo..(y + 1) * wo];
            if iy < 0 || iy >= h as isize {
                line.fill(0.0);
                continue;
            }
            let srow = &src[iy as usize * w..(iy as usize + 1) * w];
            for (xo, v) in line.iter_mut().enumerate() {
                let ix = (xo * stride + j) as isize - padding as isize;
                *v = if ix < 0 || ix >= w as isize {
                    0.0
                } else {
                    srow[ix as usize]
                };
            }
        }
    });
}

/// `c[m,n] += a[m,k] * b[k,n]`, all row-major.
fn gemm_accumulate(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: slice lengths match the (m, k, n) extents with dense row-major
    // strides, so every access sgemm makes is in bounds.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Inference-mode batch normalization with per-channel running statistics.
pub fn batchnorm_infer(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    epsilon: f32,
) -> Result<Tensor> {
    const OP: &str = "batchnorm_infer";
    let [n, c, h, w] = input.nchw(OP)?;
    for p in [gamma, beta, running_mean, running_var] {
        if p.dims() != [c] {
            return Err(shape_err(
                OP,
                format!("[{c}] per-channel parameter"),
                p.dims(),
            ));
        }
    }
    if !(epsilon >= 0.0) {
        return Err(arg_err(OP, "epsilon must be non-negative"));
    }
    let (g, bt, mean, var) = (
        gamma.as_f32()?,
        beta.as_f32()?,
        running_mean.as_f32()?,
        running_var.as_f32()?,
    );
    if let Some(i) = var
        .iter()
        .position(|&v| !(v >= 0.0) || !(v + epsilon > 0.0))
    {
        return Err(arg_err(
            OP,
            format!("running_var[{i}] + epsilon must be positive"),
        ));
    }
    let x = input.as_f32()?;
    let plane = h * w;
    let mut out = vec![0f32; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let scale = g[ch] / (var[ch] + epsilon).sqrt();
            let off = (b * c + ch) * plane;
            for (o, &v) in out[off..off + plane].iter_mut().zip(&x[off..off + plane]) {
                *o = (v - mean[ch]) * scale + bt[ch];
            }
        }
    }
    Tensor::from_f32(input.dims(), out)
}

pub fn relu(input: &Tensor) -> Result<Tensor> {
    let x = input.as_f32()?;
    Tensor::from_f32(input.dims(), x.iter().map(|&v| v.max(0.0)).collect())
}

/// In-place ReLU for intermediate activations the caller owns.
pub fn relu_inplace(t: &mut Tensor) -> Result<()> {
    for v in t.as_f32_mut()? {
        *v = v.max(0.0);
    }
    Ok(())
}

/// Max pooling with `-inf` padding semantics.
pub fn maxpool2d(input: &Tensor, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
    const OP: &str = "maxpool2d";
    let [n, c, h, w] = input.nchw(OP)?;
    if padding >= kernel {
        return Err(arg_err(OP, "padding must be smaller than the kernel"));
    }
    let (ho, wo) = match (
        window_extent(h, kernel, stride, padding),
        window_extent(w, kernel, stride, padding),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(arg_err(OP, format!("degenerate output extent for {h}x{w}"))),
    };
    let x = input.as_f32()?;
    let mut out = vec![f32::NEG_INFINITY; n * c * ho * wo];
    for (p, dst) in out.chunks_mut(ho * wo).enumerate() {
        let src = &x[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            let y0 = (y * stride) as isize - padding as isize;
            for xo in 0..wo {
                let x0 = (xo * stride) as isize - padding as isize;
                let mut m = f32::NEG_INFINITY;
                for iy in y0.max(0)..(y0 + kernel as isize).min(h as isize) {
                    for ix in x0.max(0)..(x0 + kernel as isize).min(w as isize) {
                        m = m.max(src[iy as usize * w + ix as usize]);
                    }
                }
                dst[y * wo + xo] = m;
            }
        }
    }
    Tensor::from_f32(&[n, c, ho, wo], out)
}

/// Mean over the spatial extent: `[N,C,H,W] -> [N,C]`.
pub fn global_avgpool(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input.nchw("global_avgpool")?;
    let x = input.as_f32()?;
    let plane = h * w;
    let out = x
        .chunks(plane)
        .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
        .collect();
    Tensor::from_f32(&[n, c], out)
}

/// Fully connected layer `x Wᵀ + b` for `x: [N,d]`, `W: [C,d]`, `b: [C]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    const OP: &str = "linear";
    let (n, d) = match input.dims() {
        &[n, d] => (n, d),
        other => return Err(shape_err(OP, "2-D input [N,d]", other)),
    };
    let c = match weight.dims() {
        &[c, wd] if wd == d => c,
        other => return Err(shape_err(OP, format!("weight [C,{d}]"), other)),
    };
    if bias.dims() != [c] {
        return Err(shape_err(OP, format!("bias [{c}]"), bias.dims()));
    }
    let (x, wt, b) = (input.as_f32()?, weight.as_f32()?, bias.as_f32()?);
    let mut out = Vec::with_capacity(n * c);
    for row in x.chunks(d) {
        for (o, wrow) in wt.chunks(d).enumerate() {
            let dot: f32 = row.iter().zip(wrow).map(|(a, w)| a * w).sum();
            out.push(dot + b[o]);
        }
    }
    Tensor::from_f32(&[n, c], out)
}

/// Elementwise sum of equally shaped tensors (the residual skip connection).
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(shape_err("add", fmt_dims(a.dims()), b.dims()));
    }
    let (x, y) = (a.as_f32()?, b.as_f32()?);
    Tensor::from_f32(a.dims(), x.iter().zip(y).map(|(p, q)| p + q).collect())
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax<T: Float>(logits: &[T]) -> Result<Vec<T>> {
    const OP: &str = "softmax";
    if logits.is_empty() {
        return Err(arg_err(OP, "need at least one logit"));
    }
    if let Some(index) = logits.iter().position(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { op: OP, index });
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total = exps.iter().copied().fold(T::zero(), |a, b| a + b);
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Index of the largest value; exact ties resolve to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if !(v > b) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::from_f32(dims, data).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0).unwrap();
        let w = t(&[1, 1, 1, 1], vec![1.0]);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_stem_shape() {
        let x = Tensor::zeros(&[1, 3, 224, 224]).unwrap();
        let w = Tensor::zeros(&[64, 3, 7, 7]).unwrap();
        let y = conv2d(&x, &w, None, 2, 3).unwrap();
        assert_eq!(y.dims(), &[1, 64, 112, 112]);
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::zeros(&[1, 2, 3, 3]).unwrap();
        let w = Tensor::zeros(&[1, 3, 1, 1]).unwrap();
        assert!(matches!(
            conv2d(&x, &w, None, 1, 0),
            Err(TensorError::ShapeMismatch { .. })
        ));
        let w = Tensor::zeros(&[1, 2, 1, 1]).unwrap();
        assert!(conv2d(&x, &w, None, 0, 0).is_err());
        let w = Tensor::zeros(&[1, 2, 5, 5]).unwrap();
        assert!(conv2d(&x, &w, None, 1, 0).is_err());
        let w = Tensor::zeros(&[4, 2, 1, 1]).unwrap();
        let b = Tensor::zeros(&[3]).unwrap();
        assert!(conv2d(&x, &w, Some(&b), 1, 0).is_err());
    }

    #[test]
    fn conv_bias_and_padding() {
        // 3x3 all-ones kernel over a 2x2 all-ones input with padding 1:
        // every output sees the whole input (4 ones).
        let x = Tensor::full(&[1, 1, 2, 2], 1.0).unwrap();
        let w = Tensor::full(&[1, 1, 3, 3], 1.0).unwrap();
        let b = t(&[1], vec![0.5]);
        let y = conv2d(&x, &w, Some(&b), 1, 1).unwrap();
        assert_eq!(y.as_f32().unwrap(), &[4.5; 4]);
    }

    #[test]
    fn conv_parallel_matches_sequential_bitwise() {
        let n = 2 * 70 * 9 * 9;
        let x = t(
            &[2, 70, 9, 9],
            (0..n)
                .map(|i| ((i * 37 % 101) as f32 - 50.0) / 50.0)
                .collect(),
        );
        let wn = 70 * 70 * 9;
        let w = t(
            &[70, 70, 3, 3],
            (0..wn)
                .map(|i| ((i * 53 % 97) as f32 - 48.0) / 97.0)
                .collect(),
        );
        let a = conv2d_with(Exec::Sequential, &x, &w, None, 2, 1).unwrap();
        let b = conv2d_with(Exec::Parallel, &x, &w, None, 2, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batchnorm_identity_and_centering() {
        let x = t(&[1, 2, 1, 2], vec![1.0, -2.0, 3.5, 0.25]);
        let ones = Tensor::full(&[2], 1.0).unwrap();
        let zeros = Tensor::zeros(&[2]).unwrap();
        let y = batchnorm_infer(&x, &ones, &zeros, &zeros, &ones, 0.0).unwrap();
        assert_eq!(y, x);

        let c = Tensor::full(&[1, 2, 2, 2], 3.0).unwrap();
        let mean = Tensor::full(&[2], 3.0).unwrap();
        let y = batchnorm_infer(&c, &ones, &zeros, &mean, &ones, BN_EPSILON).unwrap();
        assert!(y.as_f32().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batchnorm_rejects_channel_mismatch_and_negative_var() {
        let x = Tensor::zeros(&[1, 2, 1, 1]).unwrap();
        let p2 = Tensor::full(&[2], 1.0).unwrap();
        let p3 = Tensor::full(&[3], 1.0).unwrap();
        assert!(batchnorm_infer(&x, &p3, &p2, &p2, &p2, 1e-5).is_err());
        let neg = t(&[2], vec![1.0, -1.0]);
        assert!(batchnorm_infer(&x, &p2, &p2, &p2, &neg, 1e-5).is_err());
    }

    #[test]
    fn relu_cases() {
        let neg = t(&[3], vec![-1.0, -0.5, -3.0]);
        assert!(relu(&neg)
            .unwrap()
            .as_f32()
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        let pos = t(&[3], vec![0.0, 0.5, 3.0]);
        assert_eq!(relu(&pos).unwrap(), pos);
    }

    #[test]
    fn maxpool_spreads_peak() {
        let mut data = vec![0.0; 16];
        data[5] = 9.0; // (1,1)
        let x = t(&[1, 1, 4, 4], data);
        let y = maxpool2d(&x, 3, 2, 1).unwrap();
        assert_eq!(y.dims(), &[1, 1, 2, 2]);
        // Windows: rows/cols {-1..1} and {1..3}; (1,1) lies in all four.
        assert_eq!(y.as_f32().unwrap(), &[9.0; 4]);
    }

    #[test]
    fn maxpool_stem_shape() {
        let x = Tensor::zeros(&[1, 64, 112, 112]).unwrap();
        assert_eq!(maxpool2d(&x, 3, 2, 1).unwrap().dims(), &[1, 64, 56, 56]);
    }

    #[test]
    fn maxpool_negative_values_ignore_padding() {
        let x = Tensor::full(&[1, 1, 2, 2], -4.0).unwrap();
        let y = maxpool2d(&x, 3, 2, 1).unwrap();
        assert_eq!(y.as_f32().unwrap(), &[-4.0]);
    }

    #[test]
    fn avgpool_constant_and_shape() {
        let x = Tensor::full(&[1, 512, 7, 7], 0.75).unwrap();
        let y = global_avgpool(&x).unwrap();
        assert_eq!(y.dims(), &[1, 512]);
        assert!(y.as_f32().unwrap().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn linear_identity_and_bias() {
        let x = t(&[1, 3], vec![1.0, -2.0, 3.0]);
        let eye = t(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let zb = Tensor::zeros(&[3]).unwrap();
        assert_eq!(linear(&x, &eye, &zb).unwrap(), x);

        let z = Tensor::zeros(&[2, 3]).unwrap();
        let b = t(&[3], vec![0.1, 0.2, 0.3]);
        let y = linear(&z, &eye, &b).unwrap();
        assert_eq!(y.as_f32().unwrap(), &[0.1, 0.2, 0.3, 0.1, 0.2, 0.3]);
        let bad = Tensor::zeros(&[3, 4]).unwrap();
        assert!(linear(&x, &bad, &zb).is_err());
    }

    #[test]
    fn add_cases() {
        let a = t(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]);
        let z = Tensor::zeros(&[2, 2]).unwrap();
        assert_eq!(add(&a, &z).unwrap(), a);
        let neg = t(&[2, 2], vec![-1.0, 2.0, -3.0, -0.5]);
        assert!(add(&a, &neg)
            .unwrap()
            .as_f32()
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        assert!(add(&a, &Tensor::zeros(&[4]).unwrap()).is_err());
    }

    #[test]
    fn softmax_uniform_and_shift() {
        let p = softmax(&[0.3f64; 5]).unwrap();
        for v in &p {
            assert!((v - 0.2).abs() < 1e-12);
        }
        let z = [1.0f64, -2.0, 0.5, 3.0, 2.0];
        let shifted: Vec<f64> = z.iter().map(|v| v + 10.0).collect();
        let a = softmax(&z).unwrap();
        let b = softmax(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(
            softmax(&[1.0f32, f32::NAN]),
            Err(TensorError::NonFinite { index: 1, .. })
        ));
        assert!(softmax::<f32>(&[]).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), Some(1));
        assert_eq!(argmax(&[0.2f32; 5]), Some(0));
        assert_eq!(argmax::<f32>(&[]), None);
    }
}
