//! Dataset generation and the manifest tying cases, geometry and spectra
//! together on disk.
//!
//! Layout under the dataset root:
//!
//! ```text
//! manifest.json
//! spectrum_low.csv / spectrum_high.csv / attenuation.csv
//! <split>/case_<id>/{maps,sino_low,sino_high,interleaved,gt_sino}.bin(+.json)
//! ```
//!
//! Generation is resumable: per-case files whose sidecars validate (shape,
//! kind, geometry hash, seed) are never rewritten.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use dect_core::arrayfile::{
    array_is_valid, read_array2, read_array3, write_array2, write_array3, ArraySidecar,
};
use dect_core::error::{Error, Result};
use dect_core::geometry::FanBeamGeometry;
use dect_core::phantom::{generate_phantom, MaterialMaps, PhantomConfig};
use dect_core::projector::{interleave, material_sinogram_stack, simulate_de_from_stack};
use dect_core::spectral::{
    load_attenuation, load_spectrum, AttenuationTable, KvpLabel, Spectrum,
    DEFAULT_ATTENUATION_CSV, DEFAULT_SPECTRUM_50KVP_CSV, DEFAULT_SPECTRUM_80KVP_CSV,
};
use ndarray::Array3;

use crate::config::PipelineConfig;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub seed: u64,
    /// Directory relative to the dataset root.
    pub dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: PipelineConfig,
    pub geometry: FanBeamGeometry,
    pub geometry_hash: String,
    pub gt_sino_scale_mm: f64,
    pub spectrum_low: PathBuf,
    pub spectrum_high: PathBuf,
    pub attenuation: PathBuf,
    pub train: Vec<CaseEntry>,
    pub val: Vec<CaseEntry>,
    pub test: Vec<CaseEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(&self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

impl DatasetManifest {
    pub fn cases(&self, split: Split) -> &[CaseEntry] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

fn case_seed(base: u64, split: Split, idx: usize) -> u64 {
    splitmix64(base ^ (split.tag() << 48) ^ idx as u64)
}

fn phantom_config(cfg: &PipelineConfig, seed: u64) -> PhantomConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fb_lo, fb_hi) = cfg.phantom.fibro_blobs;
    let (cs_lo, cs_hi) = cfg.phantom.calc_specks;
    PhantomConfig {
        size: (cfg.image_size, cfg.image_size),
        seed,
        n_fibro_blobs: rng.gen_range(fb_lo..=fb_hi),
        n_calc_specks: rng.gen_range(cs_lo..=cs_hi),
        calc_radius_px: cfg.phantom.calc_radius_px,
        body_radius_fraction: cfg.phantom.body_radius_fraction,
        antialias: cfg.phantom.antialias,
    }
}

pub struct CaseFiles {
    pub maps: PathBuf,
    pub sino_low: PathBuf,
    pub sino_high: PathBuf,
    pub interleaved: PathBuf,
    pub gt_sino: PathBuf,
}

impl CaseFiles {
    pub fn at(dir: &Path) -> Self {
        CaseFiles {
            maps: dir.join("maps.bin"),
            sino_low: dir.join("sino_low.bin"),
            sino_high: dir.join("sino_high.bin"),
            interleaved: dir.join("interleaved.bin"),
            gt_sino: dir.join("gt_sino.bin"),
        }
    }
}

struct CaseSidecars {
    maps: ArraySidecar,
    sino_low: ArraySidecar,
    sino_high: ArraySidecar,
    interleaved: ArraySidecar,
    gt_sino: ArraySidecar,
}

fn case_sidecars(geom: &FanBeamGeometry, hash: &str, seed: u64) -> CaseSidecars {
    let (h, w) = geom.image_size_px;
    let (v2, vk, d) = (
        geom.total_views(),
        geom.n_views_per_kvp,
        geom.n_detector_bins,
    );
    let make = |shape: &[usize], kind: &str| {
        ArraySidecar::new(shape, kind)
            .with_geometry(hash)
            .with_seed(seed)
    };
    CaseSidecars {
        maps: make(&[3, h, w], "material_maps"),
        sino_low: make(&[vk, d], "sino_transmission_low"),
        sino_high: make(&[vk, d], "sino_transmission_high"),
        interleaved: make(&[2, v2, d], "interleaved_transmission"),
        gt_sino: make(&[3, v2, d], "material_sinogram_stack"),
    }
}

fn case_is_complete(dir: &Path, sidecars: &CaseSidecars) -> bool {
    let files = CaseFiles::at(dir);
    array_is_valid(&files.maps, &sidecars.maps)
        && array_is_valid(&files.sino_low, &sidecars.sino_low)
        && array_is_valid(&files.sino_high, &sidecars.sino_high)
        && array_is_valid(&files.interleaved, &sidecars.interleaved)
        && array_is_valid(&files.gt_sino, &sidecars.gt_sino)
}

fn maps_to_stack(maps: &MaterialMaps) -> Array3<f64> {
    let (h, w) = maps.shape();
    let mut stack = Array3::zeros((3, h, w));
    for (m, ch) in maps.channels().iter().enumerate() {
        stack.index_axis_mut(ndarray::Axis(0), m).assign(ch);
    }
    stack
}

pub fn stack_to_maps(stack: &Array3<f64>, pixel_size_mm: f64) -> MaterialMaps {
    MaterialMaps {
        adipose: stack.index_axis(ndarray::Axis(0), 0).to_owned(),
        fibroglandular: stack.index_axis(ndarray::Axis(0), 1).to_owned(),
        calcification: stack.index_axis(ndarray::Axis(0), 2).to_owned(),
        pixel_size_mm,
    }
}

fn generate_case(
    cfg: &PipelineConfig,
    geom: &FanBeamGeometry,
    spectra: (&Spectrum, &Spectrum),
    att: &AttenuationTable,
    dir: &Path,
    seed: u64,
) -> Result<()> {
    let hash = geom.hash();
    let sidecars = case_sidecars(geom, &hash, seed);
    if case_is_complete(dir, &sidecars) {
        return Ok(());
    }
    let mut maps = generate_phantom(&phantom_config(cfg, seed))?;
    maps.pixel_size_mm = cfg.pixel_size_mm;
    let gt_stack = material_sinogram_stack(&maps, geom)?;
    let (low, high) = simulate_de_from_stack(&gt_stack, geom, spectra.0, spectra.1, att)?;
    let inter = interleave(&high, &low)?;

    let files = CaseFiles::at(dir);
    write_array3(&files.maps, &maps_to_stack(&maps), &sidecars.maps)?;
    write_array2(&files.sino_low, &low.data, &sidecars.sino_low)?;
    write_array2(&files.sino_high, &high.data, &sidecars.sino_high)?;
    write_array3(&files.interleaved, &inter.data, &sidecars.interleaved)?;
    write_array3(&files.gt_sino, &gt_stack, &sidecars.gt_sino)?;
    Ok(())
}

/// Generates (or resumes) the dataset and writes the manifest.
pub fn generate_dataset(cfg: &PipelineConfig, root: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let geom = cfg.geometry();
    let hash = geom.hash();
    std::fs::create_dir_all(root)?;

    // Ship the spectra/attenuation tables next to the data so every input of
    // the simulation is inspectable.
    let spectrum_low = root.join("spectrum_low.csv");
    let spectrum_high = root.join("spectrum_high.csv");
    let attenuation = root.join("attenuation.csv");
    if !spectrum_low.exists() {
        std::fs::write(&spectrum_low, DEFAULT_SPECTRUM_50KVP_CSV)?;
    }
    if !spectrum_high.exists() {
        std::fs::write(&spectrum_high, DEFAULT_SPECTRUM_80KVP_CSV)?;
    }
    if !attenuation.exists() {
        std::fs::write(&attenuation, DEFAULT_ATTENUATION_CSV)?;
    }
    let spec_low = load_spectrum(&spectrum_low, KvpLabel::Low)?;
    let spec_high = load_spectrum(&spectrum_high, KvpLabel::High)?;
    let att = load_attenuation(&attenuation)?;

    let mut manifest = DatasetManifest {
        config: cfg.clone(),
        geometry: geom.clone(),
        geometry_hash: hash.clone(),
        gt_sino_scale_mm: cfg.gt_sino_scale_mm(),
        spectrum_low: PathBuf::from("spectrum_low.csv"),
        spectrum_high: PathBuf::from("spectrum_high.csv"),
        attenuation: PathBuf::from("attenuation.csv"),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };

    for (split, count) in [
        (Split::Train, cfg.splits.0),
        (Split::Val, cfg.splits.1),
        (Split::Test, cfg.splits.2),
    ] {
        for idx in 0..count {
            let seed = case_seed(cfg.seed, split, idx);
            let id = format!("{}_{idx:04}", split.name());
            let rel = PathBuf::from(split.name()).join(format!("case_{idx:04}"));
            generate_case(
                cfg,
                &geom,
                (&spec_low, &spec_high),
                &att,
                &root.join(&rel),
                seed,
            )?;
            let entry = CaseEntry { id, seed, dir: rel };
            match split {
                Split::Train => manifest.train.push(entry),
                Split::Val => manifest.val.push(entry),
                Split::Test => manifest.test.push(entry),
            }
        }
    }

    let tmp = root.join("manifest.json.tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(&manifest)?)?;
    std::fs::rename(&tmp, root.join(MANIFEST_NAME))?;
    Ok(manifest)
}

/// Loads and validates a manifest: every referenced case file must exist
/// with a matching sidecar.
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_NAME);
    let manifest: DatasetManifest = serde_json::from_str(
        &std::fs::read_to_string(&path)
            .map_err(|e| Error::Data(format!("missing manifest {}: {e}", path.display())))?,
    )?;
    let geom = &manifest.geometry;
    if geom.hash() != manifest.geometry_hash {
        return Err(Error::Data("manifest geometry hash mismatch".into()));
    }
    for split in [Split::Train, Split::Val, Split::Test] {
        for case in manifest.cases(split) {
            let sidecars = case_sidecars(geom, &manifest.geometry_hash, case.seed);
            if !case_is_complete(&root.join(&case.dir), &sidecars) {
                return Err(Error::Data(format!(
                    "case {} is missing or inconsistent under {}",
                    case.id,
                    root.display()
                )));
            }
        }
    }
    Ok(manifest)
}

/// Loaded per-case arrays.
pub struct LoadedCase {
    pub maps: Array3<f64>,
    pub sino_low: ndarray::Array2<f64>,
    pub sino_high: ndarray::Array2<f64>,
    pub interleaved: Array3<f64>,
    pub gt_sino: Array3<f64>,
}

pub fn load_case(root: &Path, case: &CaseEntry) -> Result<LoadedCase> {
    let files = CaseFiles::at(&root.join(&case.dir));
    Ok(LoadedCase {
        maps: read_array3(&files.maps)?.0,
        sino_low: read_array2(&files.sino_low)?.0,
        sino_high: read_array2(&files.sino_high)?.0,
        interleaved: read_array3(&files.interleaved)?.0,
        gt_sino: read_array3(&files.gt_sino)?.0,
    })
}
