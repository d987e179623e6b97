//! Differentiable operator library: forward values and exact reverse-mode
//! gradients for every building block of the models.
//!
//! Convolutions use zero ("same") padding and run as im2col plus one GEMM
//! per sample; batch samples are processed in parallel and their weight
//! gradients reduced in sample order, so results do not depend on thread
//! count. Every backward here is validated against central finite
//! differences in `tests/gradcheck.rs`.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::tensor::Tensor;

fn assert_same_shape(a: &Tensor, b: &Tensor, what: &str) {
    assert_eq!(a.shape, b.shape, "{what}: shape mismatch");
}

// ---------------------------------------------------------------------------
// conv2d (stride 1, same padding, odd kernel)
// ---------------------------------------------------------------------------

/// im2col for one (C,H,W) sample: rows are (channel, ki, kj), columns are
/// output pixels.
fn im2col(sample: &[f64], c: usize, h: usize, w: usize, k: usize, out: &mut [f64]) {
    let pad = (k - 1) / 2;
    let plane = h * w;
    let cols = plane;
    debug_assert_eq!(out.len(), c * k * k * cols);
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for i in 0..h {
                    let si = i as isize + ki as isize - pad as isize;
                    let dst_row = &mut dst[i * w..(i + 1) * w];
                    if si < 0 || si >= h as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src = &sample[ci * plane + si as usize * w..ci * plane + (si as usize + 1) * w];
                    let shift = kj as isize - pad as isize;
                    for (j, d) in dst_row.iter_mut().enumerate() {
                        let sj = j as isize + shift;
                        *d = if sj < 0 || sj >= w as isize {
                            0.0
                        } else {
                            src[sj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of im2col: scatters column gradients back onto the input plane.
fn col2im(cols_grad: &[f64], c: usize, h: usize, w: usize, k: usize, out: &mut [f64]) {
    let pad = (k - 1) / 2;
    let plane = h * w;
    out.fill(0.0);
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols_grad[row * plane..(row + 1) * plane];
                for i in 0..h {
                    let si = i as isize + ki as isize - pad as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let src_row = &src[i * w..(i + 1) * w];
                    let dst =
                        &mut out[ci * plane + si as usize * w..ci * plane + (si as usize + 1) * w];
                    let shift = kj as isize - pad as isize;
                    for (j, &g) in src_row.iter().enumerate() {
                        let sj = j as isize + shift;
                        if sj >= 0 && sj < w as isize {
                            dst[sj as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution, stride 1, zero padding that preserves the spatial size.
/// `weight` is [C_out, C_in, k, k], `bias` is [C_out].
pub fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let [n, c, h, w] = input.shape;
    let [c_out, c_in, k, k2] = weight.shape;
    assert_eq!(c, c_in, "conv2d: input channels");
    assert_eq!(k, k2, "conv2d: square kernel");
    assert_eq!(bias.len(), c_out, "conv2d: bias length");
    assert!(k % 2 == 1, "conv2d: odd kernel");
    let plane = h * w;
    let w_mat = ArrayView2::from_shape((c_out, c_in * k * k), &weight.data).unwrap();

    let samples: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|s| {
            let out_mat = if k == 1 {
                w_mat.dot(&input.sample_matrix(s))
            } else {
                let mut col = vec![0.0; c_in * k * k * plane];
                im2col(input.sample(s), c, h, w, k, &mut col);
                let col_mat = ArrayView2::from_shape((c_in * k * k, plane), &col[..]).unwrap();
                w_mat.dot(&col_mat)
            };
            let mut out = out_mat.into_raw_vec_and_offset().0;
            for co in 0..c_out {
                let b = bias.data[co];
                for v in &mut out[co * plane..(co + 1) * plane] {
                    *v += b;
                }
            }
            out
        })
        .collect();

    let mut data = Vec::with_capacity(n * c_out * plane);
    for s in samples {
        data.extend(s);
    }
    Tensor::from_vec([n, c_out, h, w], data)
}

/// Gradients of conv2d: returns (d input, d weight, d bias).
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    out_grad: &Tensor,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = input.shape;
    let [c_out, c_in, k, _] = weight.shape;
    assert_eq!(out_grad.shape, [n, c_out, h, w], "conv2d backward: grad shape");
    let plane = h * w;
    let w_mat = ArrayView2::from_shape((c_out, c_in * k * k), &weight.data).unwrap();

    struct SampleGrads {
        input: Vec<f64>,
        weight: Array2<f64>,
        bias: Vec<f64>,
    }

    let per_sample: Vec<SampleGrads> = (0..n)
        .into_par_iter()
        .map(|s| {
            let g_mat = out_grad.sample_matrix(s);
            let mut bias = vec![0.0; c_out];
            for co in 0..c_out {
                bias[co] = out_grad.sample(s)[co * plane..(co + 1) * plane].iter().sum();
            }
            if k == 1 {
                let x_mat = input.sample_matrix(s);
                let weight_g = g_mat.dot(&x_mat.t());
                let input_g = w_mat.t().dot(&g_mat);
                SampleGrads {
                    input: input_g.into_raw_vec_and_offset().0,
                    weight: weight_g,
                    bias,
                }
            } else {
                let mut col = vec![0.0; c_in * k * k * plane];
                im2col(input.sample(s), c, h, w, k, &mut col);
                let col_mat = ArrayView2::from_shape((c_in * k * k, plane), &col[..]).unwrap();
                let weight_g = g_mat.dot(&col_mat.t());
                let col_grad = w_mat.t().dot(&g_mat);
                let mut input_g = vec![0.0; c * plane];
                col2im(
                    col_grad.as_slice().expect("contiguous"),
                    c,
                    h,
                    w,
                    k,
                    &mut input_g,
                );
                SampleGrads {
                    input: input_g,
                    weight: weight_g,
                    bias,
                }
            }
        })
        .collect();

    let mut input_grad = Vec::with_capacity(n * c * plane);
    let mut weight_grad = vec![0.0; weight.len()];
    let mut bias_grad = vec![0.0; c_out];
    for sg in per_sample {
        input_grad.extend(sg.input);
        for (dst, src) in weight_grad.iter_mut().zip(sg.weight.iter()) {
            *dst += src;
        }
        for (dst, src) in bias_grad.iter_mut().zip(sg.bias.iter()) {
            *dst += src;
        }
    }
    (
        Tensor::from_vec([n, c, h, w], input_grad),
        weight_grad,
        bias_grad,
    )
}

// ---------------------------------------------------------------------------
// relu
// ---------------------------------------------------------------------------

pub fn relu_forward(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.grad = None;
    out.requires_grad = false;
    for v in &mut out.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Gradient masked by the forward output (zero at and below the kink).
pub fn relu_backward(output: &Tensor, out_grad: &Tensor) -> Tensor {
    assert_same_shape(output, out_grad, "relu backward");
    let data = output
        .data
        .iter()
        .zip(&out_grad.data)
        .map(|(&o, &g)| if o > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(out_grad.shape, data)
}

// ---------------------------------------------------------------------------
// maxpool 2x2
// ---------------------------------------------------------------------------

/// 2x2 max pooling with stride 2. Returns the pooled tensor and the argmax
/// index (0..4, row-major within the window, first index wins ties).
pub fn maxpool2_forward(input: &Tensor) -> (Tensor, Vec<u8>) {
    let [n, c, h, w] = input.shape;
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2: even spatial size");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * oh * ow];
    let mut arg = vec![0u8; n * c * oh * ow];
    for nn in 0..n {
        let sample = input.sample(nn);
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let base = ci * h * w + 2 * i * w + 2 * j;
                    let candidates = [
                        sample[base],
                        sample[base + 1],
                        sample[base + w],
                        sample[base + w + 1],
                    ];
                    let mut best = 0usize;
                    for t in 1..4 {
                        if candidates[t] > candidates[best] {
                            best = t;
                        }
                    }
                    let o = ((nn * c + ci) * oh + i) * ow + j;
                    out[o] = candidates[best];
                    arg[o] = best as u8;
                }
            }
        }
    }
    (Tensor::from_vec([n, c, oh, ow], out), arg)
}

/// Routes each pooled gradient to the recorded argmax position.
pub fn maxpool2_backward(input_shape: [usize; 4], arg: &[u8], out_grad: &Tensor) -> Tensor {
    let [n, c, h, w] = input_shape;
    let (oh, ow) = (h / 2, w / 2);
    assert_eq!(out_grad.shape, [n, c, oh, ow], "maxpool2 backward shape");
    let mut grad = vec![0.0; n * c * h * w];
    for nn in 0..n {
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let o = ((nn * c + ci) * oh + i) * ow + j;
                    let offset = match arg[o] {
                        0 => 0,
                        1 => 1,
                        2 => w,
                        _ => w + 1,
                    };
                    let base = nn * c * h * w + ci * h * w + 2 * i * w + 2 * j;
                    grad[base + offset] += out_grad.data[o];
                }
            }
        }
    }
    Tensor::from_vec(input_shape, grad)
}

// ---------------------------------------------------------------------------
// nearest-neighbor 2x upsampling
// ---------------------------------------------------------------------------

pub fn upsample2_forward(input: &Tensor) -> Tensor {
    let [n, c, h, w] = input.shape;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * oh * ow];
    for nn in 0..n {
        let sample = input.sample(nn);
        for ci in 0..c {
            for i in 0..oh {
                let src_row = &sample[ci * h * w + (i / 2) * w..ci * h * w + (i / 2 + 1) * w];
                let dst_base = nn * c * oh * ow + ci * oh * ow + i * ow;
                for j in 0..ow {
                    out[dst_base + j] = src_row[j / 2];
                }
            }
        }
    }
    Tensor::from_vec([n, c, oh, ow], out)
}

pub fn upsample2_backward(input_shape: [usize; 4], out_grad: &Tensor) -> Tensor {
    let [n, c, h, w] = input_shape;
    let (oh, ow) = (2 * h, 2 * w);
    assert_eq!(out_grad.shape, [n, c, oh, ow], "upsample2 backward shape");
    let mut grad = vec![0.0; n * c * h * w];
    for nn in 0..n {
        for ci in 0..c {
            for i in 0..oh {
                let src_base = nn * c * oh * ow + ci * oh * ow + i * ow;
                let dst_row = &mut grad[nn * c * h * w + ci * h * w + (i / 2) * w
                    ..nn * c * h * w + ci * h * w + (i / 2 + 1) * w];
                for j in 0..ow {
                    dst_row[j / 2] += out_grad.data[src_base + j];
                }
            }
        }
    }
    Tensor::from_vec(input_shape, grad)
}

// ---------------------------------------------------------------------------
// channel concatenation and residual addition
// ---------------------------------------------------------------------------

pub fn concat_forward(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape[0], b.shape[0], "concat: batch");
    assert_eq!(a.shape[2], b.shape[2], "concat: height");
    assert_eq!(a.shape[3], b.shape[3], "concat: width");
    let [n, ca, h, w] = a.shape;
    let cb = b.shape[1];
    let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
    for s in 0..n {
        data.extend_from_slice(a.sample(s));
        data.extend_from_slice(b.sample(s));
    }
    Tensor::from_vec([n, ca + cb, h, w], data)
}

pub fn concat_backward(c_a: usize, out_grad: &Tensor) -> (Tensor, Tensor) {
    let [n, c, h, w] = out_grad.shape;
    let c_b = c - c_a;
    let plane = h * w;
    let mut ga = Vec::with_capacity(n * c_a * plane);
    let mut gb = Vec::with_capacity(n * c_b * plane);
    for s in 0..n {
        let sample = out_grad.sample(s);
        ga.extend_from_slice(&sample[..c_a * plane]);
        gb.extend_from_slice(&sample[c_a * plane..]);
    }
    (
        Tensor::from_vec([n, c_a, h, w], ga),
        Tensor::from_vec([n, c_b, h, w], gb),
    )
}

pub fn add_forward(a: &Tensor, b: &Tensor) -> Tensor {
    assert_same_shape(a, b, "residual add");
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Tensor::from_vec(a.shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_1x1_conv_is_identity() {
        let input = Tensor::from_vec([1, 2, 3, 3], (0..18).map(|v| v as f64).collect());
        // 1x1 kernel, identity mapping per channel.
        let mut w = vec![0.0; 4];
        w[0] = 1.0; // out0 <- in0
        w[3] = 1.0; // out1 <- in1
        let weight = Tensor::from_vec([2, 2, 1, 1], w);
        let bias = Tensor::zeros([1, 1, 1, 2]);
        let bias = Tensor::from_vec([1, 1, 1, 2], bias.data);
        let out = conv2d_forward(&input, &weight, &bias);
        assert_eq!(out.data, input.data);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let input = Tensor::from_vec([1, 1, 3, 3], (1..=9).map(|v| v as f64).collect());
        let weight = Tensor::from_vec([1, 1, 3, 3], vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let bias = Tensor::from_vec([1, 1, 1, 1], vec![0.5]);
        let out = conv2d_forward(&input, &weight, &bias);
        for (o, i) in out.data.iter().zip(&input.data) {
            assert_eq!(*o, i + 0.5);
        }
        // Shifting kernel: weight at (0,0) reads the up-left neighbor.
        let weight = Tensor::from_vec([1, 1, 3, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let bias = Tensor::from_vec([1, 1, 1, 1], vec![0.0]);
        let out = conv2d_forward(&input, &weight, &bias);
        assert_eq!(out.data[0], 0.0); // zero padding
        assert_eq!(out.data[4], 1.0); // center sees input[0,0]
        assert_eq!(out.data[8], 5.0);
    }

    #[test]
    fn maxpool_constant_routes_to_first_index() {
        let input = Tensor::from_vec([1, 1, 4, 4], vec![2.5; 16]);
        let (out, arg) = maxpool2_forward(&input);
        assert!(out.data.iter().all(|&v| v == 2.5));
        assert!(arg.iter().all(|&a| a == 0), "tie must pick the first index");
        let g = Tensor::from_vec([1, 1, 2, 2], vec![1.0; 4]);
        let gin = maxpool2_backward([1, 1, 4, 4], &arg, &g);
        assert_eq!(gin.data.iter().sum::<f64>(), 4.0);
        assert_eq!(gin.data[0], 1.0);
        assert_eq!(gin.data[1], 0.0);
    }

    #[test]
    fn upsample_then_pool_is_identity() {
        let input = Tensor::from_vec([1, 2, 2, 2], (0..8).map(|v| v as f64).collect());
        let up = upsample2_forward(&input);
        assert_eq!(up.shape, [1, 2, 4, 4]);
        let (down, _) = maxpool2_forward(&up);
        assert_eq!(down.data, input.data);
    }

    #[test]
    fn concat_split_round_trip() {
        let a = Tensor::from_vec([2, 1, 2, 2], (0..8).map(|v| v as f64).collect());
        let b = Tensor::from_vec([2, 2, 2, 2], (100..116).map(|v| v as f64).collect());
        let cat = concat_forward(&a, &b);
        assert_eq!(cat.shape, [2, 3, 2, 2]);
        let (ga, gb) = concat_backward(1, &cat);
        assert_eq!(ga.data, a.data);
        assert_eq!(gb.data, b.data);
    }
}
