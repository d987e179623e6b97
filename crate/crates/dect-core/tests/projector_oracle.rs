//! Dense system-matrix oracle for the streaming projector.
//!
//! The oracle materializes the projection operator as an explicit matrix
//! (one column per pixel, built by the same ray traversal) and applies it as
//! a matrix-vector product. The streaming projector and its adjoint must
//! agree with the dense routes to near machine precision.

use dect_core::geometry::FanBeamGeometry;
use dect_core::projector::{backproject, forward_project, Sinogram, SinogramKind};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Explicit system matrix [views*bins x pixels] from unit-pixel projections.
fn dense_system_matrix(geom: &FanBeamGeometry, views: &[usize]) -> Array2<f64> {
    let (h, w) = geom.image_size_px;
    let rows = views.len() * geom.n_detector_bins;
    let mut a = Array2::zeros((rows, h * w));
    for pix in 0..h * w {
        let mut e = Array2::zeros((h, w));
        e[[pix / w, pix % w]] = 1.0;
        let sino = forward_project(&e, geom, views).unwrap();
        for (r, val) in sino.data.iter().enumerate() {
            a[[r, pix]] = *val;
        }
    }
    a
}

#[test]
fn forward_matches_dense_matrix() {
    let geom = FanBeamGeometry::with_defaults((16, 16), 1.0, 24, 4);
    let views: Vec<usize> = (0..8).collect();
    let a = dense_system_matrix(&geom, &views);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..3 {
        let x = Array2::from_shape_fn((16, 16), |_| rng.gen_range(-1.0..1.0));
        let streamed = forward_project(&x, &geom, &views).unwrap();
        let x_flat: Vec<f64> = x.iter().copied().collect();
        let scale = streamed
            .data
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1.0);
        for (r, &s) in streamed.data.iter().enumerate() {
            let dense: f64 = (0..256).map(|p| a[[r, p]] * x_flat[p]).sum();
            assert!(
                (s - dense).abs() <= 1e-10 * scale,
                "row {r}: streamed {s} vs dense {dense}"
            );
        }
    }
}

#[test]
fn backprojection_matches_dense_transpose() {
    let geom = FanBeamGeometry::with_defaults((16, 16), 1.0, 24, 4);
    let views: Vec<usize> = (0..8).collect();
    let a = dense_system_matrix(&geom, &views);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let y = Array2::from_shape_fn((8, 24), |_| rng.gen_range(-1.0..1.0));
    let sino = Sinogram {
        data: y.clone(),
        view_indices: views.clone(),
        geometry_hash: geom.hash(),
        kind: SinogramKind::PathLengthMm,
    };
    let bp = backproject(&sino, &geom).unwrap();
    let y_flat: Vec<f64> = y.iter().copied().collect();
    let scale = bp.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for (p, &b) in bp.iter().enumerate() {
        let dense: f64 = (0..y_flat.len()).map(|r| a[[r, p]] * y_flat[r]).sum();
        assert!(
            (b - dense).abs() <= 1e-10 * scale,
            "pixel {p}: adjoint {b} vs dense {dense}"
        );
    }
}

#[test]
fn adjoint_identity_via_dense_oracle() {
    let geom = FanBeamGeometry::with_defaults((32, 32), 1.0, 48, 8);
    let views: Vec<usize> = (0..16).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for trial in 0..20 {
        let x = Array2::from_shape_fn((32, 32), |_| rng.gen_range(-1.0..1.0));
        let y = Array2::from_shape_fn((16, 48), |_| rng.gen_range(-1.0..1.0));
        let px = forward_project(&x, &geom, &views).unwrap();
        let spy = Sinogram {
            data: y.clone(),
            view_indices: views.clone(),
            geometry_hash: geom.hash(),
            kind: SinogramKind::PathLengthMm,
        };
        let pty = backproject(&spy, &geom).unwrap();
        let lhs: f64 = px.data.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(pty.iter()).map(|(a, b)| a * b).sum();
        let norm = px.data.iter().map(|v| v * v).sum::<f64>().sqrt()
            * y.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(
            (lhs - rhs).abs() / norm <= 1e-10,
            "trial {trial}: <Px,y>={lhs} <x,Pty>={rhs}"
        );
    }
}
