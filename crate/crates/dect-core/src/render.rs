//! PNG export of label maps, grayscale images and comparison panels.

use ndarray::Array2;
use std::path::Path;

use crate::error::Result;
use crate::phantom::{label_map, MaterialMaps};

/// Label palette: background black, adipose blue, fibroglandular green,
/// calcification red.
pub const LABEL_PALETTE: [[u8; 3]; 4] = [
    [0, 0, 0],
    [40, 90, 220],
    [50, 180, 75],
    [220, 40, 40],
];

pub fn save_label_png(maps: &MaterialMaps, path: &Path) -> Result<()> {
    let labels = label_map(maps);
    let (h, w) = labels.dim();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let color = LABEL_PALETTE[labels[[i, j]] as usize];
            img.put_pixel(j as u32, i as u32, image::Rgb(color));
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    img.save(path).map_err(|e| crate::Error::Data(e.to_string()))?;
    Ok(())
}

fn to_gray(value: f64, lo: f64, hi: f64) -> u8 {
    if hi <= lo {
        return 0;
    }
    (((value - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Grayscale PNG with the given display window.
pub fn save_gray_png(img: &Array2<f64>, lo: f64, hi: f64, path: &Path) -> Result<()> {
    let (h, w) = img.dim();
    let mut out = image::GrayImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            out.put_pixel(j as u32, i as u32, image::Luma([to_gray(img[[i, j]], lo, hi)]));
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    out.save(path).map_err(|e| crate::Error::Data(e.to_string()))?;
    Ok(())
}

/// Side-by-side panel (ground truth | prediction | signed difference).
/// The difference panel maps negative errors to blue and positive to red.
pub fn save_compare_png(
    gt: &Array2<f64>,
    pred: &Array2<f64>,
    path: &Path,
) -> Result<()> {
    let (h, w) = gt.dim();
    let gap = 2usize;
    let total_w = 3 * w + 2 * gap;
    let mut out = image::RgbImage::from_pixel(total_w as u32, h as u32, image::Rgb([30, 30, 30]));
    let diff_scale = pred
        .iter()
        .zip(gt.iter())
        .map(|(p, g)| (p - g).abs())
        .fold(0.0f64, f64::max)
        .max(1e-6);
    for i in 0..h {
        for j in 0..w {
            let g = to_gray(gt[[i, j]], 0.0, 1.0);
            out.put_pixel(j as u32, i as u32, image::Rgb([g, g, g]));
            let p = to_gray(pred[[i, j]], 0.0, 1.0);
            out.put_pixel((w + gap + j) as u32, i as u32, image::Rgb([p, p, p]));
            let d = (pred[[i, j]] - gt[[i, j]]) / diff_scale;
            let (r, b) = if d >= 0.0 {
                ((d * 255.0) as u8, 0)
            } else {
                (0, (-d * 255.0) as u8)
            };
            out.put_pixel((2 * (w + gap) + j) as u32, i as u32, image::Rgb([r, 60, b]));
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    out.save(path).map_err(|e| crate::Error::Data(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomConfig};

    #[test]
    fn pngs_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let maps = generate_phantom(&PhantomConfig {
            size: (48, 48),
            seed: 5,
            n_fibro_blobs: 2,
            n_calc_specks: 1,
            calc_radius_px: (1.0, 2.0),
            body_radius_fraction: 0.9,
            antialias: false,
        })
        .unwrap();
        let label_path = dir.path().join("labels.png");
        save_label_png(&maps, &label_path).unwrap();
        assert!(label_path.exists());
        let gray_path = dir.path().join("gray.png");
        save_gray_png(&maps.adipose, 0.0, 1.0, &gray_path).unwrap();
        assert!(gray_path.exists());
        let cmp_path = dir.path().join("cmp.png");
        save_compare_png(&maps.adipose, &maps.fibroglandular, &cmp_path).unwrap();
        assert!(cmp_path.exists());
    }
}
