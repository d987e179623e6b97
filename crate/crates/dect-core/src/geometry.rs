//! Circular fan-beam geometry with a flat (equispaced) detector.
//!
//! The source rotates on a circle of radius `source_to_iso_mm` around the
//! isocenter; the detector is a line of `n_detector_bins` equal bins,
//! perpendicular to the source-isocenter axis at distance
//! `source_to_detector_mm` from the source. View angles alternate between the
//! two kVp spectra (fast kVp switching): by default the low-kVp spectrum takes
//! even global view indices and the high-kVp spectrum the odd ones.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvpOrder {
    /// Low kVp on even global view indices, high on odd (default).
    LowFirst,
    /// High kVp on even global view indices, low on odd.
    HighFirst,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FanBeamGeometry {
    pub source_to_iso_mm: f64,
    pub source_to_detector_mm: f64,
    pub n_detector_bins: usize,
    pub detector_bin_width_mm: f64,
    pub n_views_per_kvp: usize,
    pub image_size_px: (usize, usize),
    pub pixel_size_mm: f64,
    pub kvp_order: KvpOrder,
}

impl FanBeamGeometry {
    /// Geometry with detector sized to cover the inscribed circle of the
    /// image with a 10% margin.
    pub fn with_defaults(
        image_size_px: (usize, usize),
        pixel_size_mm: f64,
        n_detector_bins: usize,
        n_views_per_kvp: usize,
    ) -> Self {
        let source_to_iso_mm = 600.0;
        let source_to_detector_mm = 1200.0;
        let r = image_size_px.0.min(image_size_px.1) as f64 / 2.0 * pixel_size_mm;
        let half_fan = (r / source_to_iso_mm).asin();
        let half_width = source_to_detector_mm * half_fan.tan() * 1.1;
        let detector_bin_width_mm = 2.0 * half_width / n_detector_bins as f64;
        FanBeamGeometry {
            source_to_iso_mm,
            source_to_detector_mm,
            n_detector_bins,
            detector_bin_width_mm,
            n_views_per_kvp,
            image_size_px,
            pixel_size_mm,
            kvp_order: KvpOrder::LowFirst,
        }
    }

    pub fn total_views(&self) -> usize {
        2 * self.n_views_per_kvp
    }

    /// All view angles, evenly covering [0, 2pi).
    pub fn angles_rad(&self) -> Vec<f64> {
        let n = self.total_views();
        (0..n)
            .map(|i| 2.0 * std::f64::consts::PI * i as f64 / n as f64)
            .collect()
    }

    /// Global view indices assigned to the low-kVp spectrum.
    pub fn low_kvp_views(&self) -> Vec<usize> {
        let start = match self.kvp_order {
            KvpOrder::LowFirst => 0,
            KvpOrder::HighFirst => 1,
        };
        (start..self.total_views()).step_by(2).collect()
    }

    /// Global view indices assigned to the high-kVp spectrum.
    pub fn high_kvp_views(&self) -> Vec<usize> {
        let start = match self.kvp_order {
            KvpOrder::LowFirst => 1,
            KvpOrder::HighFirst => 0,
        };
        (start..self.total_views()).step_by(2).collect()
    }

    /// Signed detector-bin center offset from the detector midpoint, in mm.
    pub fn bin_offset_mm(&self, bin: usize) -> f64 {
        (bin as f64 - (self.n_detector_bins as f64 - 1.0) / 2.0) * self.detector_bin_width_mm
    }

    /// Radius of the inscribed reconstruction circle, in mm.
    pub fn fov_radius_mm(&self) -> f64 {
        self.image_size_px.0.min(self.image_size_px.1) as f64 / 2.0 * self.pixel_size_mm
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_to_iso_mm <= 0.0 || self.source_to_detector_mm <= 0.0 {
            return Err(Error::Config("geometry distances must be positive".into()));
        }
        if self.source_to_detector_mm <= self.source_to_iso_mm {
            return Err(Error::Config(
                "source_to_detector_mm must exceed source_to_iso_mm".into(),
            ));
        }
        if self.n_detector_bins == 0 || self.n_views_per_kvp == 0 {
            return Err(Error::Config("detector bins and views must be nonzero".into()));
        }
        if self.image_size_px.0 == 0 || self.image_size_px.1 == 0 || self.pixel_size_mm <= 0.0 {
            return Err(Error::Config("image size and pixel size must be positive".into()));
        }
        // Detector must cover the inscribed reconstruction circle.
        let half_fan = (self.fov_radius_mm() / self.source_to_iso_mm).asin();
        let needed = self.source_to_detector_mm * half_fan.tan();
        let have = self.n_detector_bins as f64 / 2.0 * self.detector_bin_width_mm;
        if have < needed {
            return Err(Error::Config(format!(
                "detector half-width {have:.2} mm does not cover the reconstruction circle \
                 (needs {needed:.2} mm)"
            )));
        }
        Ok(())
    }

    /// Stable hash of the canonical geometry JSON; stamped on sinograms and
    /// model checkpoints to catch silent geometry mismatches.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("geometry serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let mut out = String::with_capacity(16);
        for byte in digest.iter().take(8) {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry_is_valid() {
        let g = FanBeamGeometry::with_defaults((128, 128), 0.8, 256, 128);
        g.validate().unwrap();
        assert_eq!(g.total_views(), 256);
        assert_eq!(g.angles_rad().len(), 256);
    }

    #[test]
    fn kvp_views_alternate() {
        let g = FanBeamGeometry::with_defaults((64, 64), 1.0, 96, 8);
        assert_eq!(g.low_kvp_views(), vec![0, 2, 4, 6, 8, 10, 12, 14]);
        assert_eq!(g.high_kvp_views(), vec![1, 3, 5, 7, 9, 11, 13, 15]);
        let mut flipped = g.clone();
        flipped.kvp_order = KvpOrder::HighFirst;
        assert_eq!(flipped.high_kvp_views()[0], 0);
    }

    #[test]
    fn hash_changes_with_geometry() {
        let a = FanBeamGeometry::with_defaults((128, 128), 0.8, 256, 128);
        let mut b = a.clone();
        b.pixel_size_mm = 0.4;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), a.clone().hash());
    }

    #[test]
    fn narrow_detector_rejected() {
        let mut g = FanBeamGeometry::with_defaults((128, 128), 0.8, 256, 128);
        g.detector_bin_width_mm /= 4.0;
        assert!(g.validate().is_err());
    }
}
