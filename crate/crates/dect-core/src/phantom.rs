//! Procedural three-material breast-like phantoms.
//!
//! A phantom is a set of per-material volume-fraction maps (adipose,
//! fibroglandular, calcification). The body outline is a low-order Fourier
//! perturbation of a circle, fibroglandular tissue is a union of smooth
//! anisotropic blobs, and calcifications are small disks placed fully inside
//! fibroglandular regions. Every pixel belongs to at most one material, so
//! fraction maps are binary by default; optional anti-aliasing produces
//! partial fractions on boundaries via subpixel supersampling.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-material volume-fraction maps; the decomposition ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialMaps {
    pub adipose: Array2<f64>,
    pub fibroglandular: Array2<f64>,
    pub calcification: Array2<f64>,
    pub pixel_size_mm: f64,
}

pub const MATERIAL_NAMES: [&str; 3] = ["adipose", "fibroglandular", "calcification"];

impl MaterialMaps {
    pub fn shape(&self) -> (usize, usize) {
        self.adipose.dim()
    }

    pub fn channels(&self) -> [&Array2<f64>; 3] {
        [&self.adipose, &self.fibroglandular, &self.calcification]
    }

    /// Checks the fraction invariants: all maps share a shape, every value is
    /// in [0,1] and per-pixel sums stay within [0,1].
    pub fn validate(&self) -> Result<()> {
        if self.adipose.dim() != self.fibroglandular.dim()
            || self.adipose.dim() != self.calcification.dim()
        {
            return Err(Error::Dim("material maps must share a shape".into()));
        }
        if self.pixel_size_mm <= 0.0 {
            return Err(Error::Config("pixel_size_mm must be positive".into()));
        }
        let eps = 1e-12;
        for ((&a, &f), &c) in self
            .adipose
            .iter()
            .zip(self.fibroglandular.iter())
            .zip(self.calcification.iter())
        {
            for v in [a, f, c] {
                if !v.is_finite() || v < -eps || v > 1.0 + eps {
                    return Err(Error::Numeric(format!("fraction {v} outside [0,1]")));
                }
            }
            let s = a + f + c;
            if s > 1.0 + eps {
                return Err(Error::Numeric(format!("per-pixel fraction sum {s} exceeds 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub size: (usize, usize),
    pub seed: u64,
    pub n_fibro_blobs: usize,
    pub n_calc_specks: usize,
    /// Inclusive radius range for calcification disks, in pixels.
    pub calc_radius_px: (f64, f64),
    /// Body radius as a fraction of the largest inscribed circle.
    pub body_radius_fraction: f64,
    /// Subpixel supersampling of boundaries (partial fractions) when true;
    /// binary 0/1 fractions otherwise.
    pub antialias: bool,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            size: (512, 512),
            seed: 0,
            n_fibro_blobs: 6,
            n_calc_specks: 8,
            calc_radius_px: (1.5, 4.0),
            body_radius_fraction: 0.9,
            antialias: false,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size.0 == 0 || self.size.1 == 0 {
            return Err(Error::Config("phantom size components must be positive".into()));
        }
        if !(self.calc_radius_px.0 > 0.0 && self.calc_radius_px.1 >= self.calc_radius_px.0) {
            return Err(Error::Config("calc_radius_px range is empty".into()));
        }
        if !(self.body_radius_fraction > 0.0 && self.body_radius_fraction <= 1.0) {
            return Err(Error::Config("body_radius_fraction must lie in (0,1]".into()));
        }
        Ok(())
    }
}

/// Smooth closed body outline: circle radius modulated by a few low-order
/// cosine harmonics.
struct BodyOutline {
    base_radius: f64,
    harmonics: Vec<(f64, f64, f64)>, // (order, amplitude, phase)
}

impl BodyOutline {
    fn radius_at(&self, theta: f64) -> f64 {
        let mut r = 1.0;
        for &(k, a, phi) in &self.harmonics {
            r += a * (k * theta + phi).cos();
        }
        self.base_radius * r
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let r = (x * x + y * y).sqrt();
        r <= self.radius_at(y.atan2(x))
    }
}

/// Anisotropic Gaussian blob; the fibroglandular region is the level set
/// sum(blobs) >= 0.5 intersected with the body.
struct Blob {
    cx: f64,
    cy: f64,
    inv_s11: f64,
    inv_s12: f64,
    inv_s22: f64,
}

impl Blob {
    fn field(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let q = self.inv_s11 * dx * dx + 2.0 * self.inv_s12 * dx * dy + self.inv_s22 * dy * dy;
        (-0.5 * q).exp()
    }
}

struct Speck {
    cx: f64,
    cy: f64,
    radius: f64,
}

struct PhantomModel {
    body: BodyOutline,
    blobs: Vec<Blob>,
    specks: Vec<Speck>,
}

impl PhantomModel {
    /// 0 = background, 1 = adipose, 2 = fibroglandular, 3 = calcification.
    /// Calcification wins inside fibro; adipose is the body remainder.
    fn material_at(&self, x: f64, y: f64) -> u8 {
        if !self.body.contains(x, y) {
            return 0;
        }
        let fibro = self.blobs.iter().map(|b| b.field(x, y)).sum::<f64>() >= 0.5;
        if fibro {
            for s in &self.specks {
                let dx = x - s.cx;
                let dy = y - s.cy;
                if dx * dx + dy * dy <= s.radius * s.radius {
                    return 3;
                }
            }
            2
        } else {
            1
        }
    }
}

fn build_model(config: &PhantomConfig, rng: &mut ChaCha8Rng) -> PhantomModel {
    let (h, w) = config.size;
    let max_radius = config.body_radius_fraction * h.min(w) as f64 / 2.0;

    let harmonics: Vec<(f64, f64, f64)> = (2..=5)
        .map(|k| {
            let amp = rng.gen_range(0.0..0.03);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            (k as f64, amp, phase)
        })
        .collect();
    let total_amp: f64 = harmonics.iter().map(|&(_, a, _)| a).sum();
    let body = BodyOutline {
        // Perturbation never pushes the outline past the inscribed circle.
        base_radius: max_radius / (1.0 + total_amp),
        harmonics,
    };

    let blobs: Vec<Blob> = (0..config.n_fibro_blobs)
        .map(|_| {
            let r = body.base_radius * rng.gen_range(0.0..0.6);
            let phi = rng.gen_range(0.0..std::f64::consts::TAU);
            let (cx, cy) = (r * phi.cos(), r * phi.sin());
            let s1 = body.base_radius * rng.gen_range(0.10..0.22);
            let s2 = body.base_radius * rng.gen_range(0.10..0.22);
            let rot = rng.gen_range(0.0..std::f64::consts::PI);
            let (c, s) = (rot.cos(), rot.sin());
            // Inverse covariance of the rotated diagonal (s1^2, s2^2).
            let (i1, i2) = (1.0 / (s1 * s1), 1.0 / (s2 * s2));
            Blob {
                cx,
                cy,
                inv_s11: i1 * c * c + i2 * s * s,
                inv_s12: (i1 - i2) * c * s,
                inv_s22: i1 * s * s + i2 * c * c,
            }
        })
        .collect();

    let mut model = PhantomModel {
        body,
        blobs,
        specks: Vec::new(),
    };

    // Place each speck fully inside fibroglandular tissue; give up on a
    // speck after a bounded number of attempts so generation always ends.
    'specks: for _ in 0..config.n_calc_specks {
        for _attempt in 0..200 {
            if model.blobs.is_empty() {
                continue 'specks;
            }
            let r = model.body.base_radius * rng.gen_range(0.0..0.8);
            let phi = rng.gen_range(0.0..std::f64::consts::TAU);
            let (cx, cy) = (r * phi.cos(), r * phi.sin());
            let radius = rng.gen_range(config.calc_radius_px.0..=config.calc_radius_px.1);
            let clear = [
                (cx, cy),
                (cx + radius, cy),
                (cx - radius, cy),
                (cx, cy + radius),
                (cx, cy - radius),
            ]
            .iter()
            .all(|&(x, y)| model.material_at(x, y) == 2);
            if clear {
                model.specks.push(Speck { cx, cy, radius });
                continue 'specks;
            }
        }
    }

    model
}

/// Generates a phantom; deterministic for a fixed config (seed included).
pub fn generate_phantom(config: &PhantomConfig) -> Result<MaterialMaps> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = build_model(config, &mut rng);

    let (h, w) = config.size;
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let mut adipose = Array2::zeros((h, w));
    let mut fibro = Array2::zeros((h, w));
    let mut calc = Array2::zeros((h, w));

    let ss = if config.antialias { 4 } else { 1 };
    let weight = 1.0 / (ss * ss) as f64;
    for i in 0..h {
        for j in 0..w {
            let (mut fa, mut ff, mut fc) = (0.0, 0.0, 0.0);
            for si in 0..ss {
                for sj in 0..ss {
                    let x = j as f64 - cx + (sj as f64 + 0.5) / ss as f64 - 0.5;
                    let y = i as f64 - cy + (si as f64 + 0.5) / ss as f64 - 0.5;
                    match model.material_at(x, y) {
                        1 => fa += weight,
                        2 => ff += weight,
                        3 => fc += weight,
                        _ => {}
                    }
                }
            }
            adipose[[i, j]] = fa;
            fibro[[i, j]] = ff;
            calc[[i, j]] = fc;
        }
    }

    let maps = MaterialMaps {
        adipose,
        fibroglandular: fibro,
        calcification: calc,
        pixel_size_mm: 1.0,
    };
    maps.validate()?;
    Ok(maps)
}

/// Per-pixel material label: 0 background, 1 adipose, 2 fibroglandular,
/// 3 calcification. Background where the fraction sum is below 0.5; ties go
/// to the higher-priority material (calcification > fibroglandular > adipose).
pub fn label_map(maps: &MaterialMaps) -> Array2<u8> {
    let (h, w) = maps.shape();
    let mut labels = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let a = maps.adipose[[i, j]];
            let f = maps.fibroglandular[[i, j]];
            let c = maps.calcification[[i, j]];
            if a + f + c < 0.5 {
                continue;
            }
            // Scan in priority order; a later material must be strictly
            // larger to displace an earlier one.
            let mut label = 3u8;
            let mut best = c;
            if f > best {
                label = 2;
                best = f;
            }
            if a > best {
                label = 1;
            }
            labels[[i, j]] = label;
        }
    }
    labels
}
