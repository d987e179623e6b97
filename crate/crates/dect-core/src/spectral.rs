//! Energy spectra, attenuation curves and the polyenergetic transmission
//! model.
//!
//! Transmission through per-material path lengths L_m is the spectrum-weighted
//! sum over energy bins of exp(-sum_m mu_m(E) * L_m), with weights normalized
//! to sum 1 so an empty beam path transmits exactly 1. Default 50/80 kVp
//! spectra (filtered Kramers model) and tissue attenuation tables ship with
//! the crate as CSV.

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvpLabel {
    Low,
    High,
}

/// Discretized tube spectrum: relative fluence per energy bin.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub energies_kev: Vec<f64>,
    pub weights: Vec<f64>,
    pub kvp_label: KvpLabel,
    /// Nominal tube voltage; bin energies never exceed it.
    pub nominal_kvp: f64,
}

impl Spectrum {
    pub fn new(
        energies_kev: Vec<f64>,
        weights: Vec<f64>,
        kvp_label: KvpLabel,
        nominal_kvp: f64,
    ) -> Result<Self> {
        let s = Spectrum {
            energies_kev,
            weights,
            kvp_label,
            nominal_kvp,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.energies_kev.len() != self.weights.len() || self.energies_kev.is_empty() {
            return Err(Error::Config("spectrum energies/weights length mismatch".into()));
        }
        if !self.energies_kev.windows(2).all(|w| w[1] > w[0]) {
            return Err(Error::Config("spectrum energies must be strictly ascending".into()));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("spectrum weights must be nonnegative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Config("spectrum weights must sum to a positive value".into()));
        }
        if *self.energies_kev.last().unwrap() > self.nominal_kvp + 1e-9 {
            return Err(Error::Config(format!(
                "spectrum contains energies above the nominal {} kVp",
                self.nominal_kvp
            )));
        }
        Ok(())
    }

    /// Fluence-weighted mean energy in keV.
    pub fn mean_energy_kev(&self) -> f64 {
        let total: f64 = self.weights.iter().sum();
        self.energies_kev
            .iter()
            .zip(&self.weights)
            .map(|(e, w)| e * w)
            .sum::<f64>()
            / total
    }
}

/// Linear attenuation (1/mm) for the three basis materials on a shared
/// energy grid. Row order matches [`crate::phantom::MATERIAL_NAMES`].
#[derive(Debug, Clone)]
pub struct AttenuationTable {
    pub energies_kev: Vec<f64>,
    /// 3 x n_energies, rows (adipose, fibroglandular, calcification).
    pub mu_per_mm: Array2<f64>,
}

impl AttenuationTable {
    pub fn validate(&self) -> Result<()> {
        if self.mu_per_mm.dim() != (3, self.energies_kev.len()) || self.energies_kev.is_empty() {
            return Err(Error::Config("attenuation table shape mismatch".into()));
        }
        if !self.energies_kev.windows(2).all(|w| w[1] > w[0]) {
            return Err(Error::Config("attenuation energies must be strictly ascending".into()));
        }
        for row in self.mu_per_mm.rows() {
            if row.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(Error::Config("attenuation values must be positive".into()));
            }
            if !row.iter().zip(row.iter().skip(1)).all(|(a, b)| b <= a) {
                return Err(Error::Config(
                    "attenuation must be monotone non-increasing over the diagnostic range".into(),
                ));
            }
        }
        Ok(())
    }

    /// Linear interpolation of the material curves onto `energies`, clamped
    /// at the table ends.
    pub fn resample(&self, energies: &[f64]) -> Array2<f64> {
        let mut out = Array2::zeros((3, energies.len()));
        for (k, &e) in energies.iter().enumerate() {
            let grid = &self.energies_kev;
            let (i, t) = if e <= grid[0] {
                (0, 0.0)
            } else if e >= *grid.last().unwrap() {
                (grid.len() - 2, 1.0)
            } else {
                let i = grid.partition_point(|&g| g <= e) - 1;
                let i = i.min(grid.len() - 2);
                (i, (e - grid[i]) / (grid[i + 1] - grid[i]))
            };
            for m in 0..3 {
                out[[m, k]] =
                    self.mu_per_mm[[m, i]] * (1.0 - t) + self.mu_per_mm[[m, i + 1]] * t;
            }
        }
        out
    }
}

fn numeric_field(raw: &str, path: &Path, line: usize) -> Result<f64> {
    raw.trim().parse::<f64>().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("expected a number, found {raw:?}"),
    })
}

/// Parses `energy_keV,weight` CSV rows ('#' comments allowed, header row
/// required) from a string; `path` is used for error reporting only.
pub fn parse_spectrum(content: &str, path: &Path, kvp_label: KvpLabel) -> Result<Spectrum> {
    let mut energies = Vec::new();
    let mut weights = Vec::new();
    let mut header_seen = false;
    for (idx, raw_line) in content.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !header_seen {
            header_seen = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!("expected 2 columns, found {}", fields.len()),
            });
        }
        let e = numeric_field(fields[0], path, line_no)?;
        let w = numeric_field(fields[1], path, line_no)?;
        if let Some(&prev) = energies.last() {
            if e <= prev {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    msg: format!("energies must ascend ({prev} then {e})"),
                });
            }
        }
        if w < 0.0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!("negative weight {w}"),
            });
        }
        energies.push(e);
        weights.push(w);
    }
    if energies.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: content.lines().count(),
            msg: "no data rows".into(),
        });
    }
    let nominal = *energies.last().unwrap();
    Spectrum::new(energies, weights, kvp_label, nominal)
}

pub fn load_spectrum(path: &Path, kvp_label: KvpLabel) -> Result<Spectrum> {
    let content = std::fs::read_to_string(path)?;
    parse_spectrum(&content, path, kvp_label)
}

/// Parses `energy_keV,mu_adipose,mu_fibro,mu_calc` CSV rows (units 1/mm).
pub fn parse_attenuation(content: &str, path: &Path) -> Result<AttenuationTable> {
    let mut energies = Vec::new();
    let mut mu_rows: Vec<[f64; 3]> = Vec::new();
    let mut header_seen = false;
    for (idx, raw_line) in content.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !header_seen {
            header_seen = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!("expected 4 columns, found {}", fields.len()),
            });
        }
        let e = numeric_field(fields[0], path, line_no)?;
        let mut mus = [0.0; 3];
        for (m, field) in fields[1..].iter().enumerate() {
            let v = numeric_field(field, path, line_no)?;
            if v <= 0.0 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    msg: format!("attenuation must be positive, found {v}"),
                });
            }
            mus[m] = v;
        }
        if let Some(&prev) = energies.last() {
            if e <= prev {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    msg: format!("energies must ascend ({prev} then {e})"),
                });
            }
        }
        energies.push(e);
        mu_rows.push(mus);
    }
    if energies.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: content.lines().count(),
            msg: "no data rows".into(),
        });
    }
    let mut mu = Array2::zeros((3, energies.len()));
    for (k, row) in mu_rows.iter().enumerate() {
        for m in 0..3 {
            mu[[m, k]] = row[m];
        }
    }
    let table = AttenuationTable {
        energies_kev: energies,
        mu_per_mm: mu,
    };
    table.validate()?;
    Ok(table)
}

pub fn load_attenuation(path: &Path) -> Result<AttenuationTable> {
    let content = std::fs::read_to_string(path)?;
    parse_attenuation(&content, path)
}

pub const DEFAULT_SPECTRUM_50KVP_CSV: &str = include_str!("../data/spectrum_50kvp.csv");
pub const DEFAULT_SPECTRUM_80KVP_CSV: &str = include_str!("../data/spectrum_80kvp.csv");
pub const DEFAULT_ATTENUATION_CSV: &str = include_str!("../data/attenuation.csv");

/// The bundled 50 kVp (low) spectrum.
pub fn default_spectrum_low() -> Spectrum {
    parse_spectrum(
        DEFAULT_SPECTRUM_50KVP_CSV,
        Path::new("data/spectrum_50kvp.csv"),
        KvpLabel::Low,
    )
    .expect("bundled 50 kVp spectrum parses")
}

/// The bundled 80 kVp (high) spectrum.
pub fn default_spectrum_high() -> Spectrum {
    parse_spectrum(
        DEFAULT_SPECTRUM_80KVP_CSV,
        Path::new("data/spectrum_80kvp.csv"),
        KvpLabel::High,
    )
    .expect("bundled 80 kVp spectrum parses")
}

/// The bundled three-material attenuation table.
pub fn default_attenuation() -> AttenuationTable {
    parse_attenuation(DEFAULT_ATTENUATION_CSV, Path::new("data/attenuation.csv"))
        .expect("bundled attenuation table parses")
}

/// Polyenergetic transmission for a per-material path-length stack
/// [3 x V x D] in mm. Returns normalized transmitted intensity in (0, 1]:
/// zero path lengths transmit exactly 1.
pub fn transmission(
    path_lengths: &Array3<f64>,
    spectrum: &Spectrum,
    att: &AttenuationTable,
) -> Result<Array2<f64>> {
    let (m, v, d) = path_lengths.dim();
    if m != 3 {
        return Err(Error::Dim(format!("expected 3 material channels, found {m}")));
    }
    if path_lengths.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
        return Err(Error::Numeric("path lengths must be finite and nonnegative".into()));
    }
    spectrum.validate()?;
    att.validate()?;

    // Attenuation resampled onto the spectrum grid; weights normalized once.
    let mu = att.resample(&spectrum.energies_kev);
    let total_w: f64 = spectrum.weights.iter().sum();
    let w_norm: Vec<f64> = spectrum.weights.iter().map(|w| w / total_w).collect();
    let n_e = spectrum.energies_kev.len();

    let mut out = Array2::zeros((v, d));
    let rows: Vec<Vec<f64>> = (0..v)
        .into_par_iter()
        .map(|view| {
            let mut row = vec![0.0; d];
            for bin in 0..d {
                let la = path_lengths[[0, view, bin]];
                let lf = path_lengths[[1, view, bin]];
                let lc = path_lengths[[2, view, bin]];
                if la == 0.0 && lf == 0.0 && lc == 0.0 {
                    row[bin] = 1.0;
                    continue;
                }
                let mut intensity = 0.0;
                for k in 0..n_e {
                    let tau = mu[[0, k]] * la + mu[[1, k]] * lf + mu[[2, k]] * lc;
                    intensity += w_norm[k] * (-tau).exp();
                }
                row[bin] = intensity;
            }
            row
        })
        .collect();
    for (view, row) in rows.into_iter().enumerate() {
        for (bin, val) in row.into_iter().enumerate() {
            out[[view, bin]] = val;
        }
    }
    Ok(out)
}

/// Effective attenuation -ln(I)/path in 1/mm; the slope a monoenergetic beam
/// would need to produce transmission `intensity` over `path_mm`.
pub fn effective_mu(intensity: f64, path_mm: f64) -> Result<f64> {
    if !(path_mm > 0.0) {
        return Err(Error::Numeric(format!("path must be positive, got {path_mm}")));
    }
    if !(intensity > 0.0 && intensity <= 1.0) {
        return Err(Error::Numeric(format!("transmission {intensity} outside (0,1]")));
    }
    Ok(-intensity.ln() / path_mm)
}

/// Transmission of a homogeneous slab of a single material.
pub fn slab_transmission(
    material: usize,
    thickness_mm: f64,
    spectrum: &Spectrum,
    att: &AttenuationTable,
) -> Result<f64> {
    let mut paths = Array3::zeros((3, 1, 1));
    paths[[material, 0, 0]] = thickness_mm;
    Ok(transmission(&paths, spectrum, att)?[[0, 0]])
}
