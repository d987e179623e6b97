//! Analytical image-domain multi-material decomposition (AA-MMD).
//!
//! Each pixel of a reconstructed dual-energy image pair carries an effective
//! attenuation value per kVp. Under volume conservation at most three
//! materials occupy a pixel, so for every candidate material triplet the
//! fractions solve the 3x3 system
//!
//! ```text
//! [ mu_low_i  mu_low_j  mu_low_k  ] [f_i]   [v_low ]
//! [ mu_high_i mu_high_j mu_high_k ] [f_j] = [v_high]
//! [ 1         1         1         ] [f_k]   [1     ]
//! ```
//!
//! The best-fit triplet is chosen by feasibility (no meaningfully negative
//! fraction) and then minimal attenuation residual after clamping the
//! fractions to [0,1] and renormalizing to sum 1.

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::spectral::{slab_transmission, AttenuationTable, Spectrum};

/// Fraction tolerance below which a solution counts as feasible.
pub const FEASIBILITY_TOL: f64 = 1e-6;
/// Residuals closer than this are tied; ties go to the lowest triplet index.
pub const RESIDUAL_TIE_EPS: f64 = 1e-12;

/// Library materials with their effective per-kVp attenuation (1/mm).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaterialBasis {
    pub names: Vec<String>,
    pub mu_low: Vec<f64>,
    pub mu_high: Vec<f64>,
}

impl MaterialBasis {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.names.len() != self.mu_low.len() || self.names.len() != self.mu_high.len() {
            return Err(Error::Config("basis vectors must have equal length".into()));
        }
        if self.names.len() < 3 {
            return Err(Error::Config("basis needs at least 3 materials".into()));
        }
        for i in 0..self.len() {
            for j in (i + 1)..self.len() {
                if self.mu_low[i] == self.mu_low[j] && self.mu_high[i] == self.mu_high[j] {
                    return Err(Error::Config(format!(
                        "materials {} and {} have identical attenuation pairs",
                        self.names[i], self.names[j]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Parses `name,mu_low,mu_high` CSV rows ('#' comments allowed, header
    /// row required).
    pub fn parse_csv(content: &str, path: &Path) -> Result<Self> {
        let mut names = Vec::new();
        let mut mu_low = Vec::new();
        let mut mu_high = Vec::new();
        let mut header_seen = false;
        for (idx, raw) in content.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !header_seen {
                header_seen = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    msg: format!("expected 3 columns, found {}", fields.len()),
                });
            }
            let parse = |raw: &str| {
                raw.trim().parse::<f64>().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    msg: format!("expected a number, found {raw:?}"),
                })
            };
            names.push(fields[0].trim().to_string());
            mu_low.push(parse(fields[1])?);
            mu_high.push(parse(fields[2])?);
        }
        let basis = MaterialBasis {
            names,
            mu_low,
            mu_high,
        };
        basis.validate()?;
        Ok(basis)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,mu_low,mu_high\n");
        for i in 0..self.len() {
            out.push_str(&format!(
                "{},{:.12e},{:.12e}\n",
                self.names[i], self.mu_low[i], self.mu_high[i]
            ));
        }
        out
    }
}

/// A candidate triplet with its precomputed inverse system matrix.
#[derive(Debug, Clone)]
pub struct Triplet {
    pub indices: [usize; 3],
    /// Inverse of [[mu_low...], [mu_high...], [1,1,1]].
    inverse: [[f64; 3]; 3],
    pub condition: f64,
}

#[derive(Debug, Clone)]
pub struct TripletLibrary {
    pub triplets: Vec<Triplet>,
    pub n_materials: usize,
}

fn invert_3x3(m: &[[f64; 3]; 3]) -> Option<([[f64; 3]; 3], f64)> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    let inv_det = 1.0 / det;
    let mut inv = [[0.0; 3]; 3];
    inv[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv_det;
    inv[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_det;
    inv[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_det;
    inv[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv_det;
    inv[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_det;
    inv[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_det;
    inv[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv_det;
    inv[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_det;
    inv[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_det;

    // Condition number estimate via max-abs norms of M and M^-1.
    let norm = |a: &[[f64; 3]; 3]| {
        a.iter()
            .flatten()
            .fold(0.0f64, |acc, &v| acc.max(v.abs()))
    };
    Some((inv, norm(m) * norm(&inv)))
}

/// Enumerates all well-conditioned C(n,3) triplets in deterministic
/// lexicographic order.
pub fn build_triplet_library(basis: &MaterialBasis) -> Result<TripletLibrary> {
    build_triplet_library_with_cap(basis, 1e8)
}

pub fn build_triplet_library_with_cap(
    basis: &MaterialBasis,
    condition_cap: f64,
) -> Result<TripletLibrary> {
    basis.validate()?;
    let n = basis.len();
    let mut triplets = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            for k in (j + 1)..n {
                let m = [
                    [basis.mu_low[i], basis.mu_low[j], basis.mu_low[k]],
                    [basis.mu_high[i], basis.mu_high[j], basis.mu_high[k]],
                    [1.0, 1.0, 1.0],
                ];
                if let Some((inverse, condition)) = invert_3x3(&m) {
                    if condition <= condition_cap {
                        triplets.push(Triplet {
                            indices: [i, j, k],
                            inverse,
                            condition,
                        });
                    }
                }
            }
        }
    }
    if triplets.is_empty() {
        return Err(Error::Config("no well-conditioned material triplet".into()));
    }
    Ok(TripletLibrary {
        triplets,
        n_materials: n,
    })
}

struct PixelFit {
    fractions: [f64; 3],
    residual: f64,
    negativity: f64,
}

fn fit_triplet(t: &Triplet, basis: &MaterialBasis, v_low: f64, v_high: f64) -> PixelFit {
    let rhs = [v_low, v_high, 1.0];
    let mut f = [0.0; 3];
    for r in 0..3 {
        f[r] = t.inverse[r][0] * rhs[0] + t.inverse[r][1] * rhs[1] + t.inverse[r][2] * rhs[2];
    }
    let negativity: f64 = f.iter().map(|&x| (-x).max(0.0)).sum();

    // Clamp to [0,1] and renormalize to sum 1 before measuring the residual.
    let mut clamped = [0.0; 3];
    let mut sum = 0.0;
    for r in 0..3 {
        clamped[r] = f[r].clamp(0.0, 1.0);
        sum += clamped[r];
    }
    if sum > 0.0 {
        for c in clamped.iter_mut() {
            *c /= sum;
        }
    } else {
        clamped = [1.0 / 3.0; 3];
    }

    let mut rl = -v_low;
    let mut rh = -v_high;
    for r in 0..3 {
        rl += basis.mu_low[t.indices[r]] * clamped[r];
        rh += basis.mu_high[t.indices[r]] * clamped[r];
    }
    PixelFit {
        fractions: clamped,
        residual: (rl * rl + rh * rh).sqrt(),
        negativity,
    }
}

/// Decomposes one pixel; returns per-basis-material fractions in [0,1]
/// summing exactly to 1.
pub fn decompose_pixel(
    v_low: f64,
    v_high: f64,
    lib: &TripletLibrary,
    basis: &MaterialBasis,
) -> Vec<f64> {
    let mut best: Option<(usize, PixelFit)> = None;
    let mut best_feasible = false;
    for (idx, t) in lib.triplets.iter().enumerate() {
        let fit = fit_triplet(t, basis, v_low, v_high);
        let feasible = fit.negativity <= FEASIBILITY_TOL;
        let better = match &best {
            None => true,
            Some((_, cur)) => {
                if feasible != best_feasible {
                    // Any feasible fit beats every infeasible one.
                    feasible
                } else if feasible {
                    fit.residual < cur.residual - RESIDUAL_TIE_EPS
                } else {
                    fit.negativity < cur.negativity - RESIDUAL_TIE_EPS
                }
            }
        };
        if better {
            best_feasible = feasible;
            best = Some((idx, fit));
        }
    }
    let (idx, fit) = best.expect("library is never empty");
    let mut out = vec![0.0; basis.len()];
    for (r, &mat) in lib.triplets[idx].indices.iter().enumerate() {
        out[mat] = fit.fractions[r];
    }
    // Rewrite the last positive channel as 1 - prefix so the channel-order
    // fold of the vector is exactly 1.0: for prefix >= 0.5 the subtraction
    // is exact (Sterbenz), below that the rounding error stays within the
    // half-ulp window of 1.0. If the correction would go negative (prefix
    // marginally above 1), zero that channel and move one channel left.
    for t in (0..out.len()).rev() {
        if out[t] <= 0.0 {
            continue;
        }
        let prefix = out[..t].iter().fold(0.0f64, |acc, &v| acc + v);
        let v = 1.0 - prefix;
        if v >= 0.0 {
            out[t] = v;
            for z in out[t + 1..].iter_mut() {
                *z = 0.0;
            }
            break;
        }
        out[t] = 0.0;
    }
    out
}

/// Per-pixel best-fit decomposition of a dual-energy effective-attenuation
/// image pair. Returns a [n_materials x H x W] fraction stack.
pub fn aamd_decompose(
    img_low: &Array2<f64>,
    img_high: &Array2<f64>,
    lib: &TripletLibrary,
    basis: &MaterialBasis,
) -> Result<Array3<f64>> {
    if img_low.dim() != img_high.dim() {
        return Err(Error::Dim("kVp images must share a shape".into()));
    }
    if lib.triplets.is_empty() {
        return Err(Error::Config("empty triplet library".into()));
    }
    basis.validate()?;
    let (h, w) = img_low.dim();
    let n = basis.len();

    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|i| {
            let mut row = vec![0.0; n * w];
            for j in 0..w {
                let f = decompose_pixel(img_low[[i, j]], img_high[[i, j]], lib, basis);
                for (m, &val) in f.iter().enumerate() {
                    row[m * w + j] = val;
                }
            }
            row
        })
        .collect();

    let mut out = Array3::zeros((n, h, w));
    for (i, row) in rows.into_iter().enumerate() {
        for m in 0..n {
            for j in 0..w {
                out[[m, i, j]] = row[m * w + j];
            }
        }
    }
    Ok(out)
}

/// Calibrates effective per-kVp attenuation for the three tissue materials by
/// simulating transmission through pure slabs and fitting a single slope
/// -ln(I) ~= mu_eff * L (least squares through the origin). Air is appended
/// as a fourth material so background pixels have a feasible triplet.
pub fn calibrate_basis(
    spec_low: &Spectrum,
    spec_high: &Spectrum,
    att: &AttenuationTable,
    slab_thicknesses_mm: &[f64],
) -> Result<MaterialBasis> {
    if slab_thicknesses_mm.is_empty() {
        return Err(Error::Config("need at least one calibration thickness".into()));
    }
    let mut names: Vec<String> = crate::phantom::MATERIAL_NAMES
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut mu_low = Vec::new();
    let mut mu_high = Vec::new();
    for material in 0..3 {
        for (spec, out) in [(spec_low, &mut mu_low), (spec_high, &mut mu_high)] {
            let mut num = 0.0;
            let mut den = 0.0;
            for &l in slab_thicknesses_mm {
                let i = slab_transmission(material, l, spec, att)?;
                num += l * (-i.ln());
                den += l * l;
            }
            out.push(num / den);
        }
    }
    names.push("air".to_string());
    mu_low.push(0.0);
    mu_high.push(0.0);
    let basis = MaterialBasis {
        names,
        mu_low,
        mu_high,
    };
    basis.validate()?;
    Ok(basis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{default_attenuation, default_spectrum_high, default_spectrum_low};

    fn toy_basis() -> MaterialBasis {
        MaterialBasis {
            names: vec!["a".into(), "b".into(), "c".into()],
            mu_low: vec![0.02, 0.05, 0.30],
            mu_high: vec![0.015, 0.03, 0.12],
        }
    }

    fn four_basis() -> MaterialBasis {
        let mut b = toy_basis();
        b.names.push("air".into());
        b.mu_low.push(0.0);
        b.mu_high.push(0.0);
        b
    }

    #[test]
    fn three_materials_give_one_triplet() {
        let lib = build_triplet_library(&toy_basis()).unwrap();
        assert_eq!(lib.triplets.len(), 1);
        assert_eq!(lib.triplets[0].indices, [0, 1, 2]);
    }

    #[test]
    fn four_materials_give_four_triplets() {
        let lib = build_triplet_library(&four_basis()).unwrap();
        assert_eq!(lib.triplets.len(), 4);
    }

    #[test]
    fn degenerate_triplets_excluded() {
        // Material 3 duplicates material 0's attenuation up to a tiny offset,
        // so triplets containing both are catastrophically conditioned.
        let basis = MaterialBasis {
            names: vec!["a".into(), "b".into(), "c".into(), "a2".into()],
            mu_low: vec![0.02, 0.05, 0.30, 0.02 + 1e-13],
            mu_high: vec![0.015, 0.03, 0.12, 0.015],
        };
        let lib = build_triplet_library(&basis).unwrap();
        for t in &lib.triplets {
            assert!(!(t.indices.contains(&0) && t.indices.contains(&3)));
        }
    }

    #[test]
    fn exact_recovery_from_forward_synthesis() {
        let basis = toy_basis();
        let lib = build_triplet_library(&basis).unwrap();
        let f = [0.2, 0.3, 0.5];
        let v_low: f64 = (0..3).map(|i| f[i] * basis.mu_low[i]).sum();
        let v_high: f64 = (0..3).map(|i| f[i] * basis.mu_high[i]).sum();
        let out = decompose_pixel(v_low, v_high, &lib, &basis);
        for i in 0..3 {
            assert!((out[i] - f[i]).abs() <= 1e-10, "f[{i}] = {}", out[i]);
        }
    }

    #[test]
    fn pure_material_is_a_unit_vector() {
        let basis = toy_basis();
        let lib = build_triplet_library(&basis).unwrap();
        let out = decompose_pixel(basis.mu_low[1], basis.mu_high[1], &lib, &basis);
        assert!((out[1] - 1.0).abs() <= 1e-12);
        assert!(out[0].abs() <= 1e-12 && out[2].abs() <= 1e-12);
    }

    #[test]
    fn air_pixel_maps_to_air() {
        let basis = four_basis();
        let lib = build_triplet_library(&basis).unwrap();
        let out = decompose_pixel(0.0, 0.0, &lib, &basis);
        assert!((out[3] - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn fractions_sum_exactly_to_one() {
        let basis = four_basis();
        let lib = build_triplet_library(&basis).unwrap();
        let img_low = Array2::from_shape_fn((8, 8), |(i, j)| 0.01 * (i as f64) + 0.002 * j as f64);
        let img_high = img_low.mapv(|v| v * 0.6);
        let stack = aamd_decompose(&img_low, &img_high, &lib, &basis).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let sum: f64 = (0..4).map(|m| stack[[m, i, j]]).sum();
                assert_eq!(sum, 1.0);
                for m in 0..4 {
                    let v = stack[[m, i, j]];
                    assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }

    #[test]
    fn channel_permutation_follows_material_order() {
        let basis = four_basis();
        let lib = build_triplet_library(&basis).unwrap();
        // Permute material order and check outputs are permuted identically.
        let perm = [2usize, 0, 3, 1];
        let permuted = MaterialBasis {
            names: perm.iter().map(|&i| basis.names[i].clone()).collect(),
            mu_low: perm.iter().map(|&i| basis.mu_low[i]).collect(),
            mu_high: perm.iter().map(|&i| basis.mu_high[i]).collect(),
        };
        let lib_p = build_triplet_library(&permuted).unwrap();
        for &(v_low, v_high) in &[(0.03, 0.02), (0.2, 0.08), (0.0, 0.0), (0.07, 0.05)] {
            let a = decompose_pixel(v_low, v_high, &lib, &basis);
            let b = decompose_pixel(v_low, v_high, &lib_p, &permuted);
            for (slot, &orig) in perm.iter().enumerate() {
                assert!(
                    (a[orig] - b[slot]).abs() <= 1e-9,
                    "permutation mismatch at {slot}: {} vs {}",
                    a[orig],
                    b[slot]
                );
            }
        }
    }

    #[test]
    fn calibration_orders_materials() {
        let basis = calibrate_basis(
            &default_spectrum_low(),
            &default_spectrum_high(),
            &default_attenuation(),
            &[5.0, 10.0, 20.0, 40.0],
        )
        .unwrap();
        assert_eq!(basis.len(), 4);
        // Calcification attenuates hardest; low kVp sees more contrast.
        assert!(basis.mu_low[2] > basis.mu_low[1] && basis.mu_low[1] > basis.mu_low[0]);
        for m in 0..3 {
            assert!(basis.mu_low[m] > basis.mu_high[m]);
        }
    }

    #[test]
    fn csv_round_trip() {
        let basis = four_basis();
        let parsed = MaterialBasis::parse_csv(&basis.to_csv(), Path::new("basis.csv")).unwrap();
        assert_eq!(parsed.names, basis.names);
        for i in 0..basis.len() {
            assert!((parsed.mu_low[i] - basis.mu_low[i]).abs() < 1e-15);
        }
    }
}
