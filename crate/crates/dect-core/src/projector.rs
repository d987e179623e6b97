//! Fan-beam forward projection, its exact adjoint, material sinogram stacks
//! and the kVp-switching interleaved input layout.
//!
//! Rays run from the source point to each detector bin center and are traced
//! through the pixel grid Siddon-style: the line integral is the sum of exact
//! pixel-intersection lengths (mm) times pixel values. Forward projection and
//! backprojection share the same traversal, so the pair is an exact adjoint
//! up to floating-point summation order.

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::FanBeamGeometry;
use crate::phantom::MaterialMaps;
use crate::spectral::{transmission, AttenuationTable, Spectrum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SinogramKind {
    /// Normalized transmitted intensity in (0, 1].
    Transmission,
    /// Line integrals of a density/fraction image, in mm.
    PathLengthMm,
    /// Line integrals of material volume fractions, in mm.
    MaterialFractionLineIntegral,
}

/// Projection-domain image: one row per view, one column per detector bin.
#[derive(Debug, Clone)]
pub struct Sinogram {
    pub data: Array2<f64>,
    /// Global view indices (into the geometry's angle list) for each row.
    pub view_indices: Vec<usize>,
    pub geometry_hash: String,
    pub kind: SinogramKind,
}

impl Sinogram {
    pub fn n_views(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.data.ncols()
    }

    pub fn validate(&self, geom: &FanBeamGeometry) -> Result<()> {
        if self.data.nrows() != self.view_indices.len() {
            return Err(Error::Dim("sinogram rows must match view index count".into()));
        }
        if self.data.ncols() != geom.n_detector_bins {
            return Err(Error::Dim(format!(
                "sinogram has {} bins, geometry expects {}",
                self.data.ncols(),
                geom.n_detector_bins
            )));
        }
        if self.geometry_hash != geom.hash() {
            return Err(Error::Data("sinogram geometry hash mismatch".into()));
        }
        if self.view_indices.iter().any(|&v| v >= geom.total_views()) {
            return Err(Error::Dim("view index outside geometry".into()));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("sinogram contains non-finite values".into()));
        }
        Ok(())
    }

    /// View angles (radians) for each row.
    pub fn angles(&self, geom: &FanBeamGeometry) -> Vec<f64> {
        let all = geom.angles_rad();
        self.view_indices.iter().map(|&v| all[v]).collect()
    }
}

/// Dilated dual-energy input volume [2 x total_views x bins]: channel 0
/// carries the high-kVp views on odd rows, channel 1 the low-kVp views on
/// even rows (0-based); the remaining rows are zero filler.
#[derive(Debug, Clone)]
pub struct InterleavedSinogram {
    pub data: Array3<f64>,
    pub geometry_hash: String,
}

impl InterleavedSinogram {
    pub fn validate(&self) -> Result<()> {
        let (c, rows, _) = self.data.dim();
        if c != 2 {
            return Err(Error::Dim("interleaved sinogram needs 2 channels".into()));
        }
        if rows % 2 != 0 {
            return Err(Error::Dim("interleaved sinogram needs an even row count".into()));
        }
        for r in (0..rows).step_by(2) {
            if self.data.slice(ndarray::s![0, r, ..]).iter().any(|&v| v != 0.0) {
                return Err(Error::Data(format!("channel 0 row {r} must be zero filler")));
            }
        }
        for r in (1..rows).step_by(2) {
            if self.data.slice(ndarray::s![1, r, ..]).iter().any(|&v| v != 0.0) {
                return Err(Error::Data(format!("channel 1 row {r} must be zero filler")));
            }
        }
        Ok(())
    }
}

/// Source position and detector-bin endpoint for one ray, in mm.
pub fn ray_endpoints(geom: &FanBeamGeometry, angle: f64, bin: usize) -> ([f64; 2], [f64; 2]) {
    let (sin_a, cos_a) = angle.sin_cos();
    let source = [geom.source_to_iso_mm * cos_a, geom.source_to_iso_mm * sin_a];
    let center = [
        source[0] - geom.source_to_detector_mm * cos_a,
        source[1] - geom.source_to_detector_mm * sin_a,
    ];
    let offset = geom.bin_offset_mm(bin);
    let det = [center[0] - offset * sin_a, center[1] + offset * cos_a];
    (source, det)
}

/// Walks a ray through the pixel grid, visiting each intersected pixel with
/// its chord length in mm. Rays missing the grid visit nothing.
pub fn trace_ray(
    geom: &FanBeamGeometry,
    source: [f64; 2],
    det: [f64; 2],
    mut visit: impl FnMut(usize, usize, f64),
) {
    let (h, w) = geom.image_size_px;
    let p = geom.pixel_size_mm;
    let x_min = -(w as f64) / 2.0 * p;
    let y_min = -(h as f64) / 2.0 * p;

    let dir = [det[0] - source[0], det[1] - source[1]];
    let len = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
    if len == 0.0 {
        return;
    }

    // Slab clipping against the grid bounding box.
    let mut t_enter = 0.0f64;
    let mut t_exit = 1.0f64;
    for axis in 0..2 {
        let lo = if axis == 0 { x_min } else { y_min };
        let hi = if axis == 0 { x_min + w as f64 * p } else { y_min + h as f64 * p };
        let s = source[axis];
        let d = dir[axis];
        if d == 0.0 {
            if s < lo || s > hi {
                return;
            }
        } else {
            let (t0, t1) = ((lo - s) / d, (hi - s) / d);
            let (t0, t1) = if t0 <= t1 { (t0, t1) } else { (t1, t0) };
            t_enter = t_enter.max(t0);
            t_exit = t_exit.min(t1);
        }
    }
    if t_enter >= t_exit {
        return;
    }

    // Parametric steps to successive x/y pixel boundaries.
    let setup = |s: f64, d: f64, lo: f64, n: usize| -> (f64, f64) {
        if d == 0.0 {
            return (f64::INFINITY, f64::INFINITY);
        }
        let dt = (p / d).abs();
        let entry_coord = s + t_enter * d;
        let cell = (entry_coord - lo) / p;
        let next_boundary = if d > 0.0 { cell.floor() + 1.0 } else { cell.ceil() - 1.0 };
        let mut t_next = ((lo + next_boundary * p) - s) / d;
        // Guard against the entry point sitting exactly on a boundary.
        while t_next <= t_enter {
            t_next += dt;
        }
        let _ = n;
        (t_next, dt)
    };
    let (mut tx, dtx) = setup(source[0], dir[0], x_min, w);
    let (mut ty, dty) = setup(source[1], dir[1], y_min, h);

    let mut t = t_enter;
    loop {
        let t_next = tx.min(ty).min(t_exit);
        if t_next > t {
            // Segment midpoint identifies the pixel robustly, including on
            // boundary-grazing and axis-parallel rays.
            let mid = 0.5 * (t + t_next);
            let x = source[0] + mid * dir[0];
            let y = source[1] + mid * dir[1];
            let j = ((x - x_min) / p).floor() as isize;
            let i = ((y - y_min) / p).floor() as isize;
            if i >= 0 && (i as usize) < h && j >= 0 && (j as usize) < w {
                visit(i as usize, j as usize, (t_next - t) * len);
            }
        }
        if t_next >= t_exit {
            break;
        }
        if tx <= ty {
            tx += dtx;
        } else {
            ty += dty;
        }
        t = t_next;
    }
}

fn check_image(image: &Array2<f64>, geom: &FanBeamGeometry) -> Result<()> {
    if image.dim() != geom.image_size_px {
        return Err(Error::Dim(format!(
            "image shape {:?} does not match geometry {:?}",
            image.dim(),
            geom.image_size_px
        )));
    }
    if image.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("image contains non-finite values".into()));
    }
    Ok(())
}

fn check_views(views: &[usize], geom: &FanBeamGeometry) -> Result<()> {
    if views.is_empty() {
        return Err(Error::Config("view subset is empty".into()));
    }
    if views.iter().any(|&v| v >= geom.total_views()) {
        return Err(Error::Config("view subset contains out-of-range indices".into()));
    }
    Ok(())
}

/// Line-integral sinogram of `image` over the given view subset, in mm.
pub fn forward_project(
    image: &Array2<f64>,
    geom: &FanBeamGeometry,
    views: &[usize],
) -> Result<Sinogram> {
    check_image(image, geom)?;
    check_views(views, geom)?;
    let angles = geom.angles_rad();
    let d = geom.n_detector_bins;

    let rows: Vec<Vec<f64>> = views
        .par_iter()
        .map(|&v| {
            let angle = angles[v];
            let mut row = vec![0.0; d];
            for (bin, out) in row.iter_mut().enumerate() {
                let (src, det) = ray_endpoints(geom, angle, bin);
                let mut acc = 0.0;
                trace_ray(geom, src, det, |i, j, w| {
                    acc += w * image[[i, j]];
                });
                *out = acc;
            }
            row
        })
        .collect();

    let mut data = Array2::zeros((views.len(), d));
    for (r, row) in rows.into_iter().enumerate() {
        for (bin, val) in row.into_iter().enumerate() {
            data[[r, bin]] = val;
        }
    }
    Ok(Sinogram {
        data,
        view_indices: views.to_vec(),
        geometry_hash: geom.hash(),
        kind: SinogramKind::PathLengthMm,
    })
}

/// Exact adjoint of [`forward_project`]: scatters each sinogram sample back
/// along its ray with the same chord-length weights. Views are accumulated
/// in fixed chunks so the result does not depend on thread count.
pub fn backproject(sino: &Sinogram, geom: &FanBeamGeometry) -> Result<Array2<f64>> {
    sino.validate(geom)?;
    let (h, w) = geom.image_size_px;
    let angles = geom.angles_rad();
    let d = geom.n_detector_bins;

    const CHUNK: usize = 16;
    let row_indices: Vec<usize> = (0..sino.n_views()).collect();
    let partials: Vec<Array2<f64>> = row_indices
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut img = Array2::zeros((h, w));
            for &r in chunk {
                let angle = angles[sino.view_indices[r]];
                for bin in 0..d {
                    let val = sino.data[[r, bin]];
                    if val == 0.0 {
                        continue;
                    }
                    let (src, det) = ray_endpoints(geom, angle, bin);
                    trace_ray(geom, src, det, |i, j, wgt| {
                        img[[i, j]] += wgt * val;
                    });
                }
            }
            img
        })
        .collect();

    let mut out = Array2::zeros((h, w));
    for part in partials {
        out += &part;
    }
    Ok(out)
}

/// Ground-truth material sinograms over all views: [3 x total_views x bins],
/// channel order (adipose, fibroglandular, calcification).
pub fn material_sinogram_stack(maps: &MaterialMaps, geom: &FanBeamGeometry) -> Result<Array3<f64>> {
    maps.validate()?;
    if maps.shape() != geom.image_size_px {
        return Err(Error::Dim("material maps do not match geometry image size".into()));
    }
    let views: Vec<usize> = (0..geom.total_views()).collect();
    let mut stack = Array3::zeros((3, views.len(), geom.n_detector_bins));
    for (m, map) in maps.channels().iter().enumerate() {
        let sino = forward_project(map, geom, &views)?;
        stack.slice_mut(ndarray::s![m, .., ..]).assign(&sino.data);
    }
    Ok(stack)
}

fn stack_rows(stack: &Array3<f64>, rows: &[usize]) -> Array3<f64> {
    let (m, _, d) = stack.dim();
    let mut out = Array3::zeros((m, rows.len(), d));
    for (r_out, &r_in) in rows.iter().enumerate() {
        for mat in 0..m {
            for bin in 0..d {
                out[[mat, r_out, bin]] = stack[[mat, r_in, bin]];
            }
        }
    }
    out
}

/// Simulates an ideal fast kVp-switching acquisition: the low-kVp spectrum
/// sees its view subset, the high-kVp spectrum the complementary one.
/// Returns `(sino_low, sino_high)` transmission sinograms.
pub fn simulate_de_acquisition(
    maps: &MaterialMaps,
    geom: &FanBeamGeometry,
    spec_low: &Spectrum,
    spec_high: &Spectrum,
    att: &AttenuationTable,
) -> Result<(Sinogram, Sinogram)> {
    let stack = material_sinogram_stack(maps, geom)?;
    simulate_de_from_stack(&stack, geom, spec_low, spec_high, att)
}

/// Same as [`simulate_de_acquisition`] but reuses a precomputed all-view
/// material path-length stack.
pub fn simulate_de_from_stack(
    stack: &Array3<f64>,
    geom: &FanBeamGeometry,
    spec_low: &Spectrum,
    spec_high: &Spectrum,
    att: &AttenuationTable,
) -> Result<(Sinogram, Sinogram)> {
    let hash = geom.hash();
    let mut result = Vec::with_capacity(2);
    for (spec, views) in [
        (spec_low, geom.low_kvp_views()),
        (spec_high, geom.high_kvp_views()),
    ] {
        let paths = stack_rows(stack, &views);
        let data = transmission(&paths, spec, att)?;
        result.push(Sinogram {
            data,
            view_indices: views,
            geometry_hash: hash.clone(),
            kind: SinogramKind::Transmission,
        });
    }
    let high = result.pop().unwrap();
    let low = result.pop().unwrap();
    Ok((low, high))
}

/// Core interleave layout on bare arrays: high-kVp view k lands on row 2k+1
/// of channel 0, low-kVp view k on row 2k of channel 1 (0-based); all other
/// rows stay zero.
pub fn interleave_arrays(high: &Array2<f64>, low: &Array2<f64>) -> Array3<f64> {
    assert_eq!(high.dim(), low.dim(), "kVp sinograms must share a shape");
    let (v, d) = high.dim();
    let mut data = Array3::zeros((2, 2 * v, d));
    for k in 0..v {
        for bin in 0..d {
            data[[0, 2 * k + 1, bin]] = high[[k, bin]];
            data[[1, 2 * k, bin]] = low[[k, bin]];
        }
    }
    data
}

/// Builds the dilated two-channel input volume from per-kVp sinograms.
pub fn interleave(sino_high: &Sinogram, sino_low: &Sinogram) -> Result<InterleavedSinogram> {
    if sino_high.data.dim() != sino_low.data.dim() {
        return Err(Error::Dim("kVp sinograms must share a shape".into()));
    }
    if sino_high.geometry_hash != sino_low.geometry_hash {
        return Err(Error::Data("kVp sinograms come from different geometries".into()));
    }
    Ok(InterleavedSinogram {
        data: interleave_arrays(&sino_high.data, &sino_low.data),
        geometry_hash: sino_high.geometry_hash.clone(),
    })
}

/// Extracts the populated rows of an interleaved volume; returns
/// `(high, low)` per-kVp arrays. Inverse of [`interleave`], bit-exact.
pub fn deinterleave(interleaved: &InterleavedSinogram) -> (Array2<f64>, Array2<f64>) {
    let (_, rows, d) = interleaved.data.dim();
    let v = rows / 2;
    let mut high = Array2::zeros((v, d));
    let mut low = Array2::zeros((v, d));
    for k in 0..v {
        for bin in 0..d {
            high[[k, bin]] = interleaved.data[[0, 2 * k + 1, bin]];
            low[[k, bin]] = interleaved.data[[1, 2 * k, bin]];
        }
    }
    (high, low)
}
