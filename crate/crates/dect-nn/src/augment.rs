//! On-the-fly data augmentation for the two training stages.
//!
//! Sinogram stage: resizing only, along the detector axis so the alternating
//! view structure is untouched. An object scaled by `s` stretches the
//! detector footprint by `s`, multiplies path-length integrals by `s` and
//! raises transmission values to the power `s`; rays that leave the scaled
//! footprint see air (path 0, transmission 1).
//!
//! Image stage: mirroring, rotation, resizing, random cropping, Gaussian
//! blur and brightness, applied identically to the input stack and the
//! target stack. Identity parameters reproduce the input bit-exactly.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const RESIZE_SCALES: [f64; 5] = [0.7, 0.9, 1.0, 1.1, 1.2];
pub const ROTATION_ANGLES_DEG: [f64; 5] = [-30.0, -15.0, 0.0, 15.0, 30.0];
pub const BLUR_KERNELS: [usize; 3] = [1, 3, 5];

// ---------------------------------------------------------------------------
// Sinogram stage
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinoAugmentParams {
    pub scale: f64,
}

impl SinoAugmentParams {
    pub fn identity() -> Self {
        SinoAugmentParams { scale: 1.0 }
    }

    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        SinoAugmentParams {
            scale: RESIZE_SCALES[rng.gen_range(0..RESIZE_SCALES.len())],
        }
    }
}

/// Resample each row about the detector center: out(t) = in(c + (t-c)/s).
fn resize_detector_axis(data: &Array2<f64>, scale: f64, pad: f64) -> Array2<f64> {
    let (v, d) = data.dim();
    let center = (d as f64 - 1.0) / 2.0;
    Array2::from_shape_fn((v, d), |(row, t)| {
        let src = center + (t as f64 - center) / scale;
        if src < 0.0 || src > (d - 1) as f64 {
            return pad;
        }
        let t0 = src.floor() as usize;
        let t1 = (t0 + 1).min(d - 1);
        let frac = src - t0 as f64;
        data[[row, t0]] * (1.0 - frac) + data[[row, t1]] * frac
    })
}

/// Applies a scale draw to a transmission sinogram (values in (0,1]).
pub fn augment_transmission(data: &Array2<f64>, params: SinoAugmentParams) -> Array2<f64> {
    if params.scale == 1.0 {
        return data.clone();
    }
    resize_detector_axis(data, params.scale, 1.0).mapv(|v| v.max(0.0).powf(params.scale))
}

/// Applies the same scale draw to a path-length stack [C x V x D].
pub fn augment_path_stack(stack: &Array3<f64>, params: SinoAugmentParams) -> Array3<f64> {
    if params.scale == 1.0 {
        return stack.clone();
    }
    let (c, v, d) = stack.dim();
    let mut out = Array3::zeros((c, v, d));
    for ch in 0..c {
        let plane = stack.index_axis(ndarray::Axis(0), ch).to_owned();
        let resized = resize_detector_axis(&plane, params.scale, 0.0);
        out.index_axis_mut(ndarray::Axis(0), ch)
            .assign(&(&resized * params.scale));
    }
    out
}

// ---------------------------------------------------------------------------
// Image stage
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageAugmentParams {
    pub mirror: bool,
    pub angle_deg: f64,
    pub scale: f64,
    /// Crop window side as a fraction of the image, with its position.
    pub crop_fraction: f64,
    pub crop_cx: f64,
    pub crop_cy: f64,
    pub blur_kernel: usize,
    pub brightness: f64,
}

impl ImageAugmentParams {
    pub fn identity() -> Self {
        ImageAugmentParams {
            mirror: false,
            angle_deg: 0.0,
            scale: 1.0,
            crop_fraction: 1.0,
            crop_cx: 0.5,
            crop_cy: 0.5,
            blur_kernel: 1,
            brightness: 1.0,
        }
    }

    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        ImageAugmentParams {
            mirror: rng.gen_bool(0.5),
            angle_deg: ROTATION_ANGLES_DEG[rng.gen_range(0..ROTATION_ANGLES_DEG.len())],
            scale: RESIZE_SCALES[rng.gen_range(0..RESIZE_SCALES.len())],
            crop_fraction: rng.gen_range(0.75..=1.0),
            crop_cx: rng.gen_range(0.0..=1.0),
            crop_cy: rng.gen_range(0.0..=1.0),
            blur_kernel: BLUR_KERNELS[rng.gen_range(0..BLUR_KERNELS.len())],
            brightness: rng.gen_range(0.9..=1.1),
        }
    }
}

fn bilinear(img: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = img.dim();
    if y < 0.0 || x < 0.0 || y > (h - 1) as f64 || x > (w - 1) as f64 {
        return 0.0;
    }
    let i0 = y.floor() as usize;
    let j0 = x.floor() as usize;
    let i1 = (i0 + 1).min(h - 1);
    let j1 = (j0 + 1).min(w - 1);
    let fy = y - i0 as f64;
    let fx = x - j0 as f64;
    img[[i0, j0]] * (1.0 - fy) * (1.0 - fx)
        + img[[i0, j1]] * (1.0 - fy) * fx
        + img[[i1, j0]] * fy * (1.0 - fx)
        + img[[i1, j1]] * fy * fx
}

fn mirror_channel(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(i, j)| img[[i, w - 1 - j]])
}

fn rotate_channel(img: &Array2<f64>, angle_deg: f64) -> Array2<f64> {
    let (h, w) = img.dim();
    let theta = angle_deg.to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    Array2::from_shape_fn((h, w), |(i, j)| {
        let dy = i as f64 - cy;
        let dx = j as f64 - cx;
        // Inverse rotation of the output coordinate.
        let sy = cy + dx * sin_t + dy * cos_t;
        let sx = cx + dx * cos_t - dy * sin_t;
        bilinear(img, sy, sx)
    })
}

fn zoom_channel(img: &Array2<f64>, scale: f64) -> Array2<f64> {
    let (h, w) = img.dim();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    Array2::from_shape_fn((h, w), |(i, j)| {
        bilinear(
            img,
            cy + (i as f64 - cy) / scale,
            cx + (j as f64 - cx) / scale,
        )
    })
}

fn crop_channel(img: &Array2<f64>, fraction: f64, cx: f64, cy: f64) -> Array2<f64> {
    let (h, w) = img.dim();
    let fh = (h as f64 * fraction).max(2.0);
    let fw = (w as f64 * fraction).max(2.0);
    let top = cy * (h as f64 - fh);
    let left = cx * (w as f64 - fw);
    Array2::from_shape_fn((h, w), |(i, j)| {
        let sy = top + i as f64 * (fh - 1.0) / (h as f64 - 1.0);
        let sx = left + j as f64 * (fw - 1.0) / (w as f64 - 1.0);
        bilinear(img, sy, sx)
    })
}

fn blur_channel(img: &Array2<f64>, kernel: usize) -> Array2<f64> {
    let radius = (kernel - 1) / 2;
    // OpenCV's kernel-size-to-sigma rule.
    let sigma = 0.3 * ((kernel as f64 - 1.0) * 0.5 - 1.0) + 0.8;
    let taps: Vec<f64> = (-(radius as i64)..=radius as i64)
        .map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp())
        .collect();
    let (h, w) = img.dim();
    let pass = |src: &Array2<f64>, along_cols: bool| {
        Array2::from_shape_fn((h, w), |(i, j)| {
            let (mut acc, mut norm) = (0.0, 0.0);
            for (t, &wt) in taps.iter().enumerate() {
                let off = t as i64 - radius as i64;
                let (qi, qj) = if along_cols {
                    (i as i64, j as i64 + off)
                } else {
                    (i as i64 + off, j as i64)
                };
                if qi < 0 || qi >= h as i64 || qj < 0 || qj >= w as i64 {
                    continue;
                }
                acc += wt * src[[qi as usize, qj as usize]];
                norm += wt;
            }
            acc / norm
        })
    };
    pass(&pass(img, true), false)
}

fn apply_channel(img: &Array2<f64>, p: &ImageAugmentParams) -> Array2<f64> {
    let mut out = if p.mirror {
        mirror_channel(img)
    } else {
        img.clone()
    };
    if p.angle_deg != 0.0 {
        out = rotate_channel(&out, p.angle_deg);
    }
    if p.scale != 1.0 {
        out = zoom_channel(&out, p.scale);
    }
    if p.crop_fraction != 1.0 {
        out = crop_channel(&out, p.crop_fraction, p.crop_cx, p.crop_cy);
    }
    if p.blur_kernel > 1 {
        out = blur_channel(&out, p.blur_kernel);
    }
    if p.brightness != 1.0 {
        out = out.mapv(|v| v * p.brightness);
    }
    out
}

/// Transforms a [C x H x W] stack channel by channel.
pub fn augment_stack(stack: &Array3<f64>, params: &ImageAugmentParams) -> Array3<f64> {
    let (c, h, w) = stack.dim();
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        let plane = stack.index_axis(ndarray::Axis(0), ch).to_owned();
        out.index_axis_mut(ndarray::Axis(0), ch)
            .assign(&apply_channel(&plane, params));
    }
    out
}

/// Transforms input and target consistently (the whole point of stacking
/// them before augmentation).
pub fn augment_image_pair(
    input: &Array3<f64>,
    target: &Array3<f64>,
    params: &ImageAugmentParams,
) -> (Array3<f64>, Array3<f64>) {
    (augment_stack(input, params), augment_stack(target, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn test_stack() -> Array3<f64> {
        Array3::from_shape_fn((2, 16, 16), |(c, i, j)| {
            ((c + 1) * (i * 16 + j)) as f64 / 512.0
        })
    }

    #[test]
    fn identity_params_are_bit_exact() {
        let stack = test_stack();
        let out = augment_stack(&stack, &ImageAugmentParams::identity());
        assert_eq!(out, stack);
        let sino = Array2::from_shape_fn((8, 12), |(i, j)| 1.0 / (1.0 + (i + j) as f64));
        assert_eq!(augment_transmission(&sino, SinoAugmentParams::identity()), sino);
    }

    #[test]
    fn mirror_twice_is_identity() {
        let stack = test_stack();
        let p = ImageAugmentParams {
            mirror: true,
            ..ImageAugmentParams::identity()
        };
        let once = augment_stack(&stack, &p);
        let twice = augment_stack(&once, &p);
        assert_eq!(twice, stack);
    }

    #[test]
    fn draws_are_deterministic_for_a_seed() {
        let mut a = ChaCha8Rng::seed_from_u64(99);
        let mut b = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..16 {
            assert_eq!(ImageAugmentParams::sample(&mut a), ImageAugmentParams::sample(&mut b));
            assert_eq!(SinoAugmentParams::sample(&mut a), SinoAugmentParams::sample(&mut b));
        }
    }

    #[test]
    fn sino_scale_preserves_flat_field() {
        let flat = Array2::from_elem((4, 32), 1.0);
        for &s in &RESIZE_SCALES {
            let out = augment_transmission(&flat, SinoAugmentParams { scale: s });
            assert!(out.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn path_stack_scales_values_and_footprint() {
        let mut stack = Array3::zeros((1, 1, 33));
        for t in 10..23 {
            stack[[0, 0, t]] = 5.0;
        }
        let out = augment_path_stack(&stack, SinoAugmentParams { scale: 1.2 });
        // Interior values multiplied by the scale.
        assert!((out[[0, 0, 16]] - 6.0).abs() < 1e-12);
        // Total mass grows roughly by scale^2 (width and value).
        let before: f64 = stack.iter().sum();
        let after: f64 = out.iter().sum();
        assert!(after > before * 1.3 && after < before * 1.6);
    }

    #[test]
    fn brightness_scales_both_members() {
        let input = test_stack();
        let target = test_stack().mapv(|v| 1.0 - v);
        let p = ImageAugmentParams {
            brightness: 1.1,
            ..ImageAugmentParams::identity()
        };
        let (i2, t2) = augment_image_pair(&input, &target, &p);
        assert!((i2[[0, 3, 3]] - input[[0, 3, 3]] * 1.1).abs() < 1e-12);
        assert!((t2[[1, 5, 7]] - target[[1, 5, 7]] * 1.1).abs() < 1e-12);
    }
}
