//! End-to-end pipeline stages: stage training drivers, the two-stage
//! inference path, the analytical baseline and prediction evaluation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use dect_core::arrayfile::{read_array3, write_array3, ArraySidecar};
use dect_core::decomp::{aamd_decompose, build_triplet_library, calibrate_basis, MaterialBasis, TripletLibrary};
use dect_core::error::{Error, Result};
use dect_core::geometry::FanBeamGeometry;
use dect_core::metrics::{evaluate, EvalReport};
use dect_core::phantom::MATERIAL_NAMES;
use dect_core::projector::{Sinogram, SinogramKind};
use dect_core::recon::{fbp, FilterSpec};
use dect_core::render::{save_compare_png, save_gray_png, save_label_png};
use dect_core::spectral::{load_attenuation, load_spectrum, KvpLabel};
use dect_nn::checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
use dect_nn::model::Model;
use dect_nn::models::ModelKind;
use dect_nn::train::{train_stage, ImageCase, SinoCase, Stage, StageData, TrainOutcome};

use crate::config::Method;
use crate::dataset::{load_case, stack_to_maps, CaseEntry, DatasetManifest, Split};

/// Calibration slab thicknesses for the analytical baseline (mm).
pub const CALIBRATION_SLABS_MM: [f64; 5] = [5.0, 10.0, 20.0, 40.0, 80.0];

// ---------------------------------------------------------------------------
// Stage data assembly
// ---------------------------------------------------------------------------

/// Loads stage-one cases: interleaved transmission inputs are built on the
/// fly by the trainer; targets are material sinograms normalized to ~[0,1].
pub fn sino_stage_data(
    root: &Path,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<StageData> {
    let scale = manifest.gt_sino_scale_mm;
    let mut cases = Vec::new();
    for entry in manifest.cases(split) {
        let case = load_case(root, entry)?;
        cases.push(SinoCase {
            low: case.sino_low,
            high: case.sino_high,
            target: case.gt_sino.mapv(|v| v / scale),
        });
    }
    Ok(StageData::Sino(cases))
}

/// FBP of each channel of a material sinogram stack (mm line integrals)
/// onto the image grid.
pub fn fbp_material_stack(
    stack_mm: &Array3<f64>,
    geom: &FanBeamGeometry,
    filter: &FilterSpec,
) -> Result<Array3<f64>> {
    let (c, v, _) = stack_mm.dim();
    if v != geom.total_views() {
        return Err(Error::Dim(format!(
            "material stack has {v} views, geometry wants {}",
            geom.total_views()
        )));
    }
    let (h, w) = geom.image_size_px;
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        let sino = Sinogram {
            data: stack_mm.index_axis(ndarray::Axis(0), ch).to_owned(),
            view_indices: (0..v).collect(),
            geometry_hash: geom.hash(),
            kind: SinogramKind::MaterialFractionLineIntegral,
        };
        out.index_axis_mut(ndarray::Axis(0), ch)
            .assign(&fbp(&sino, geom, filter)?);
    }
    Ok(out)
}

/// Stage-one inference: normalized material sinogram stack for one case.
pub fn predict_material_sinograms(sinonet: &Model, interleaved: &Array3<f64>) -> Array3<f64> {
    let x = dect_nn::Tensor::from_stacks(std::slice::from_ref(interleaved));
    let (y, _) = sinonet.forward(&x);
    y.to_stack(0)
}

/// Builds stage-two cases: inputs are FBP images of predicted (or, for the
/// ablation, ground-truth) material sinograms; targets are the fraction maps.
pub fn image_stage_data(
    root: &Path,
    manifest: &DatasetManifest,
    split: Split,
    sinonet: Option<&Model>,
) -> Result<StageData> {
    let geom = &manifest.geometry;
    let filter = &manifest.config.filter;
    let scale = manifest.gt_sino_scale_mm;
    let mut cases = Vec::new();
    for entry in manifest.cases(split) {
        let case = load_case(root, entry)?;
        let stack_mm = match sinonet {
            Some(model) => predict_material_sinograms(model, &case.interleaved).mapv(|v| v * scale),
            None => case.gt_sino.clone(),
        };
        let input = fbp_material_stack(&stack_mm, geom, filter)?;
        cases.push(ImageCase {
            input,
            target: case.maps,
        });
    }
    Ok(StageData::Image(cases))
}

// ---------------------------------------------------------------------------
// Training drivers
// ---------------------------------------------------------------------------

fn stage_checkpoint(
    outcome: &TrainOutcome,
    kind: ModelKind,
    stage: Stage,
    manifest: &DatasetManifest,
    seed: u64,
) -> CheckpointManifest {
    CheckpointManifest {
        kind,
        stage,
        seed,
        best_epoch: outcome.best_epoch,
        best_val: outcome.best_val,
        history: outcome.history.clone(),
        geometry_hash: manifest.geometry_hash.clone(),
        gt_sino_scale_mm: manifest.gt_sino_scale_mm,
        n_params: outcome.model.params.len(),
    }
}

/// Trains stage one and writes the checkpoint to `ckpt_dir`.
pub fn train_sinonet_cmd(
    root: &Path,
    manifest: &DatasetManifest,
    ckpt_dir: &Path,
) -> Result<CheckpointManifest> {
    let cfg = &manifest.config;
    let train = sino_stage_data(root, manifest, Split::Train)?;
    let val = sino_stage_data(root, manifest, Split::Val)?;
    let model = dect_nn::models::build_sinonet(&cfg.sinonet, cfg.train.seed)?;
    let outcome = train_stage(model, &train, &val, &cfg.train, Stage::Sino)?;
    let manifest_out = stage_checkpoint(
        &outcome,
        ModelKind::SinoNet(cfg.sinonet.clone()),
        Stage::Sino,
        manifest,
        cfg.train.seed,
    );
    save_checkpoint(ckpt_dir, &manifest_out, &outcome.model)?;
    Ok(manifest_out)
}

/// Trains stage two (inputs from the stage-one checkpoint unless the config
/// requests ground-truth sinograms) and writes the checkpoint.
pub fn train_denoisenet_cmd(
    root: &Path,
    manifest: &DatasetManifest,
    sinonet_ckpt: &Path,
    ckpt_dir: &Path,
) -> Result<CheckpointManifest> {
    let cfg = &manifest.config;
    let sinonet = if cfg.stage2_inputs_from_gt {
        None
    } else {
        let (ck, model) = load_checkpoint(sinonet_ckpt)?;
        check_geometry(&ck, manifest)?;
        Some(model)
    };
    let train = image_stage_data(root, manifest, Split::Train, sinonet.as_ref())?;
    let val = image_stage_data(root, manifest, Split::Val, sinonet.as_ref())?;
    let model = dect_nn::models::build_denoisenet(&cfg.denoisenet, cfg.train.seed ^ 0x5eed)?;
    let outcome = train_stage(model, &train, &val, &cfg.train, Stage::Image)?;
    let manifest_out = stage_checkpoint(
        &outcome,
        ModelKind::DenoiseNet(cfg.denoisenet.clone()),
        Stage::Image,
        manifest,
        cfg.train.seed ^ 0x5eed,
    );
    save_checkpoint(ckpt_dir, &manifest_out, &outcome.model)?;
    Ok(manifest_out)
}

fn check_geometry(ck: &CheckpointManifest, manifest: &DatasetManifest) -> Result<()> {
    if ck.geometry_hash != manifest.geometry_hash {
        return Err(Error::Data(format!(
            "checkpoint geometry hash {} does not match dataset {}",
            ck.geometry_hash, manifest.geometry_hash
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Inference paths
// ---------------------------------------------------------------------------

fn clamp_unit(stack: &Array3<f64>) -> Array3<f64> {
    stack.mapv(|v| v.clamp(0.0, 1.0))
}

/// Full two-stage prediction: interleaved input -> material sinograms ->
/// per-material FBP -> refinement -> fractions clamped to [0,1].
pub fn infer_pipeline(
    interleaved: &Array3<f64>,
    sinonet: &Model,
    denoisenet: &Model,
    manifest: &DatasetManifest,
) -> Result<Array3<f64>> {
    let sino = predict_material_sinograms(sinonet, interleaved)
        .mapv(|v| v * manifest.gt_sino_scale_mm);
    let coarse = fbp_material_stack(&sino, &manifest.geometry, &manifest.config.filter)?;
    let x = dect_nn::Tensor::from_stacks(std::slice::from_ref(&coarse));
    let (y, _) = denoisenet.forward(&x);
    if !y.all_finite() {
        return Err(Error::Numeric("refinement produced non-finite values".into()));
    }
    Ok(clamp_unit(&y.to_stack(0)))
}

/// Stage-one-plus-FBP prediction without the refiner.
pub fn infer_sinonet_fbp(
    interleaved: &Array3<f64>,
    sinonet: &Model,
    manifest: &DatasetManifest,
) -> Result<Array3<f64>> {
    let sino = predict_material_sinograms(sinonet, interleaved)
        .mapv(|v| v * manifest.gt_sino_scale_mm);
    let coarse = fbp_material_stack(&sino, &manifest.geometry, &manifest.config.filter)?;
    Ok(clamp_unit(&coarse))
}

/// The analytical baseline operating on per-kVp FBP images.
pub struct AamdContext {
    pub basis: MaterialBasis,
    pub library: TripletLibrary,
}

pub fn aamd_context(root: &Path, manifest: &DatasetManifest) -> Result<AamdContext> {
    let spec_low = load_spectrum(&root.join(&manifest.spectrum_low), KvpLabel::Low)?;
    let spec_high = load_spectrum(&root.join(&manifest.spectrum_high), KvpLabel::High)?;
    let att = load_attenuation(&root.join(&manifest.attenuation))?;
    let basis = calibrate_basis(&spec_low, &spec_high, &att, &CALIBRATION_SLABS_MM)?;
    let library = build_triplet_library(&basis)?;
    Ok(AamdContext { basis, library })
}

/// Per-kVp effective-attenuation image: FBP of -ln(transmission).
pub fn effective_mu_image(
    transmission: &Array2<f64>,
    views: Vec<usize>,
    manifest: &DatasetManifest,
) -> Result<Array2<f64>> {
    let neg_log = transmission.mapv(|v| -(v.max(1e-12)).ln());
    let sino = Sinogram {
        data: neg_log,
        view_indices: views,
        geometry_hash: manifest.geometry_hash.clone(),
        kind: SinogramKind::PathLengthMm,
    };
    fbp(&sino, &manifest.geometry, &manifest.config.filter)
}

/// AA-MMD prediction: tissue fraction channels only (air is dropped).
pub fn infer_aamd(
    sino_low: &Array2<f64>,
    sino_high: &Array2<f64>,
    ctx: &AamdContext,
    manifest: &DatasetManifest,
) -> Result<Array3<f64>> {
    let geom = &manifest.geometry;
    let img_low = effective_mu_image(sino_low, geom.low_kvp_views(), manifest)?;
    let img_high = effective_mu_image(sino_high, geom.high_kvp_views(), manifest)?;
    let full = aamd_decompose(&img_low, &img_high, &ctx.library, &ctx.basis)?;
    let (h, w) = img_low.dim();
    let mut out = Array3::zeros((3, h, w));
    for m in 0..3 {
        out.index_axis_mut(ndarray::Axis(0), m)
            .assign(&full.index_axis(ndarray::Axis(0), m));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Batch decomposition and evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingLog {
    pub method: String,
    pub per_case_ms: Vec<f64>,
    pub mean_ms: f64,
}

pub struct Checkpoints {
    pub sinonet: Option<(CheckpointManifest, Model)>,
    pub denoisenet: Option<(CheckpointManifest, Model)>,
}

pub fn load_method_checkpoints(
    method: Method,
    sinonet_dir: Option<&Path>,
    denoisenet_dir: Option<&Path>,
    manifest: &DatasetManifest,
) -> Result<Checkpoints> {
    let need_sino = matches!(method, Method::Rfast | Method::SinonetFbp);
    let need_denoise = matches!(method, Method::Rfast);
    let load = |dir: Option<&Path>, what: &str| -> Result<(CheckpointManifest, Model)> {
        let dir = dir.ok_or_else(|| {
            Error::Config(format!("method {method:?} requires a {what} checkpoint"))
        })?;
        let (ck, model) = load_checkpoint(dir)?;
        check_geometry(&ck, manifest)?;
        Ok((ck, model))
    };
    Ok(Checkpoints {
        sinonet: if need_sino {
            Some(load(sinonet_dir, "stage-one")?)
        } else {
            None
        },
        denoisenet: if need_denoise {
            Some(load(denoisenet_dir, "stage-two")?)
        } else {
            None
        },
    })
}

pub fn prediction_path(pred_dir: &Path, case: &CaseEntry) -> PathBuf {
    pred_dir.join(format!("{}.bin", case.id))
}

/// Runs one method over the test split, persisting predictions, PNG panels
/// and a per-case timing log.
pub fn decompose_split(
    root: &Path,
    manifest: &DatasetManifest,
    split: Split,
    method: Method,
    ckpts: &Checkpoints,
    out_dir: &Path,
    render: bool,
) -> Result<TimingLog> {
    std::fs::create_dir_all(out_dir)?;
    let aamd = if method == Method::Aamd {
        Some(aamd_context(root, manifest)?)
    } else {
        None
    };
    let mut per_case_ms = Vec::new();
    for entry in manifest.cases(split) {
        let case = load_case(root, entry)?;
        let t0 = Instant::now();
        let pred = match method {
            Method::Aamd => infer_aamd(
                &case.sino_low,
                &case.sino_high,
                aamd.as_ref().unwrap(),
                manifest,
            )?,
            Method::Rfast => infer_pipeline(
                &case.interleaved,
                &ckpts.sinonet.as_ref().unwrap().1,
                &ckpts.denoisenet.as_ref().unwrap().1,
                manifest,
            )?,
            Method::SinonetFbp => infer_sinonet_fbp(
                &case.interleaved,
                &ckpts.sinonet.as_ref().unwrap().1,
                manifest,
            )?,
        };
        per_case_ms.push(t0.elapsed().as_secs_f64() * 1e3);

        let (h, w) = (manifest.config.image_size, manifest.config.image_size);
        let sidecar = ArraySidecar::new(&[3, h, w], "prediction")
            .with_geometry(&manifest.geometry_hash)
            .with_seed(entry.seed);
        write_array3(&prediction_path(out_dir, entry), &pred, &sidecar)?;

        if render {
            let maps = stack_to_maps(&case.maps, manifest.config.pixel_size_mm);
            save_label_png(&maps, &out_dir.join(format!("{}_gt_labels.png", entry.id)))?;
            for (m, name) in MATERIAL_NAMES.iter().enumerate() {
                let gt = case.maps.index_axis(ndarray::Axis(0), m).to_owned();
                let pr = pred.index_axis(ndarray::Axis(0), m).to_owned();
                save_gray_png(
                    &pr,
                    0.0,
                    1.0,
                    &out_dir.join(format!("{}_{}_pred.png", entry.id, name)),
                )?;
                save_compare_png(
                    &gt,
                    &pr,
                    &out_dir.join(format!("{}_{}_panel.png", entry.id, name)),
                )?;
            }
        }
    }
    let mean_ms = per_case_ms.iter().sum::<f64>() / per_case_ms.len().max(1) as f64;
    let log = TimingLog {
        method: method.dir_name().to_string(),
        per_case_ms,
        mean_ms,
    };
    std::fs::write(
        out_dir.join("timings.json"),
        serde_json::to_string_pretty(&log)?,
    )?;
    Ok(log)
}

/// Evaluates persisted predictions for the test split against ground truth.
/// Missing prediction files are reported together in one error.
pub fn evaluate_predictions(
    root: &Path,
    manifest: &DatasetManifest,
    pred_dir: &Path,
) -> Result<EvalReport> {
    let cases = manifest.cases(Split::Test);
    if cases.is_empty() {
        return Err(Error::Data("manifest has no test cases".into()));
    }
    let missing: Vec<String> = cases
        .iter()
        .filter(|c| !prediction_path(pred_dir, c).exists())
        .map(|c| c.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "missing predictions for cases: {}",
            missing.join(", ")
        )));
    }
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for entry in cases {
        let (pred, sidecar) = read_array3(&prediction_path(pred_dir, entry))?;
        if sidecar.geometry_hash.as_deref() != Some(manifest.geometry_hash.as_str()) {
            return Err(Error::Data(format!(
                "prediction {} geometry hash mismatch",
                entry.id
            )));
        }
        // Ground truth passes through the same f32 persistence as the
        // prediction, so comparisons see identical quantization.
        let case = load_case(root, entry)?;
        preds.push(pred);
        gts.push(case.maps);
    }
    evaluate(&preds, &gts, &MATERIAL_NAMES, &manifest.config.train.loss)
}

/// Writes report.csv and report.md next to the predictions; folds in the
/// timing log when present.
pub fn write_report(report: &EvalReport, pred_dir: &Path, title: &str) -> Result<()> {
    std::fs::write(pred_dir.join("report.csv"), report.to_csv())?;
    let mut md = report.to_markdown(title);
    let timing_path = pred_dir.join("timings.json");
    if let Ok(text) = std::fs::read_to_string(&timing_path) {
        if let Ok(log) = serde_json::from_str::<TimingLog>(&text) {
            md.push_str(&format!(
                "\nMean inference time: {:.1} ms/case over {} cases\n",
                log.mean_ms,
                log.per_case_ms.len()
            ));
        }
    }
    std::fs::write(pred_dir.join("report.md"), md)?;
    Ok(())
}
