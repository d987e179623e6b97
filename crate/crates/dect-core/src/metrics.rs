//! Image losses and evaluation metrics.
//!
//! The training loss combines a negative log-PSNR term, a multi-scale SSIM
//! term and an L1 term:
//!
//! ```text
//! L = -alpha * L_PSNR + (1 - alpha) * [beta * (1 - MS-SSIM) + (1 - beta) * L1]
//! ```
//!
//! `psnr_log` is log10(MAX^2 / MSE) without the conventional factor 10; the
//! decibel variant is reported alongside it. MS-SSIM here evaluates the
//! luminance term once with the coarsest Gaussian window and multiplies the
//! contrast-structure terms of every configured window scale, all at full
//! resolution. Every loss has an analytic gradient so the training loop can
//! backpropagate through it; gradients are validated against central finite
//! differences in the tests.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Combination,
    Mse,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub msssim_sigmas: Vec<f64>,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range S of the pixel values.
    pub dynamic_range: f64,
    pub mse_floor_eps: f64,
    pub mode: LossMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            beta: 0.25,
            msssim_sigmas: vec![0.5, 1.0, 2.0, 4.0, 8.0],
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
            mse_floor_eps: 1e-12,
            mode: LossMode::Combination,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config("alpha and beta must lie in [0,1]".into()));
        }
        if self.msssim_sigmas.is_empty()
            || self.msssim_sigmas.iter().any(|&s| s <= 0.0)
            || !self.msssim_sigmas.windows(2).all(|w| w[1] > w[0])
        {
            return Err(Error::Config("msssim sigmas must be positive ascending".into()));
        }
        if self.dynamic_range <= 0.0 || self.mse_floor_eps <= 0.0 {
            return Err(Error::Config("dynamic range and mse floor must be positive".into()));
        }
        Ok(())
    }
}

fn check_same_shape(x: &Array2<f64>, y: &Array2<f64>) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(Error::Dim(format!(
            "image shapes differ: {:?} vs {:?}",
            x.dim(),
            y.dim()
        )));
    }
    Ok(())
}

/// Mean squared error.
pub fn mse(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    check_same_shape(x, y)?;
    let n = x.len() as f64;
    Ok(x.iter()
        .zip(y.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Mean absolute difference.
pub fn l1_loss(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    check_same_shape(x, y)?;
    let n = x.len() as f64;
    Ok(x.iter().zip(y.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}

/// log10(MAX^2 / max(MSE, eps)); the paper-style PSNR without the factor 10.
pub fn psnr_log(x: &Array2<f64>, y: &Array2<f64>, max_value: f64, eps: f64) -> Result<f64> {
    let m = mse(x, y)?;
    Ok((max_value * max_value / m.max(eps)).log10())
}

/// Conventional PSNR in decibels (10x the log form).
pub fn psnr_db(x: &Array2<f64>, y: &Array2<f64>, max_value: f64, eps: f64) -> Result<f64> {
    Ok(10.0 * psnr_log(x, y, max_value, eps)?)
}

/// 1-D Gaussian window truncated at ceil(3 sigma), clamped to the image side.
fn gaussian_taps(sigma: f64, side: usize) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let radius = radius.max(1).min(side.saturating_sub(1));
    let mut taps = Vec::with_capacity(2 * radius + 1);
    for k in -(radius as i64)..=(radius as i64) {
        let t = k as f64 / sigma;
        taps.push((-0.5 * t * t).exp());
    }
    let sum: f64 = taps.iter().sum();
    taps.iter().map(|t| t / sum).collect()
}

/// Separable Gaussian filter with per-position renormalization at borders.
struct GaussFilter {
    taps: Vec<f64>,
    radius: i64,
    /// In-bounds tap mass per index, one vector per axis length.
    z_rows: Vec<f64>,
    z_cols: Vec<f64>,
}

impl GaussFilter {
    fn new(sigma: f64, shape: (usize, usize)) -> Self {
        let side = shape.0.min(shape.1);
        let taps = gaussian_taps(sigma, side);
        let radius = (taps.len() / 2) as i64;
        let z = |n: usize| -> Vec<f64> {
            (0..n as i64)
                .map(|i| {
                    let mut s = 0.0;
                    for (t, &w) in taps.iter().enumerate() {
                        let q = i + t as i64 - radius;
                        if q >= 0 && q < n as i64 {
                            s += w;
                        }
                    }
                    s
                })
                .collect()
        };
        GaussFilter {
            radius,
            z_rows: z(shape.0),
            z_cols: z(shape.1),
            taps,
        }
    }

    fn filter_axis(&self, x: &Array2<f64>, along_cols: bool) -> Array2<f64> {
        let (h, w) = x.dim();
        let mut out = Array2::zeros((h, w));
        let (n, z) = if along_cols {
            (w as i64, &self.z_cols)
        } else {
            (h as i64, &self.z_rows)
        };
        for i in 0..h {
            for j in 0..w {
                let pos = if along_cols { j as i64 } else { i as i64 };
                let mut acc = 0.0;
                for (t, &wt) in self.taps.iter().enumerate() {
                    let q = pos + t as i64 - self.radius;
                    if q < 0 || q >= n {
                        continue;
                    }
                    let v = if along_cols {
                        x[[i, q as usize]]
                    } else {
                        x[[q as usize, j]]
                    };
                    acc += wt * v;
                }
                out[[i, j]] = acc / z[pos as usize];
            }
        }
        out
    }

    /// Adjoint of `filter_axis`: divide by the border mass at the source
    /// position, then correlate with the (symmetric) taps without
    /// renormalization.
    fn adjoint_axis(&self, u: &Array2<f64>, along_cols: bool) -> Array2<f64> {
        let (h, w) = u.dim();
        let z = if along_cols { &self.z_cols } else { &self.z_rows };
        let scaled = Array2::from_shape_fn((h, w), |(i, j)| {
            let pos = if along_cols { j } else { i };
            u[[i, j]] / z[pos]
        });
        let n = if along_cols { w as i64 } else { h as i64 };
        let mut out = Array2::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                let pos = if along_cols { j as i64 } else { i as i64 };
                let mut acc = 0.0;
                for (t, &wt) in self.taps.iter().enumerate() {
                    let q = pos + t as i64 - self.radius;
                    if q < 0 || q >= n {
                        continue;
                    }
                    let v = if along_cols {
                        scaled[[i, q as usize]]
                    } else {
                        scaled[[q as usize, j]]
                    };
                    acc += wt * v;
                }
                out[[i, j]] = acc;
            }
        }
        out
    }

    fn filter(&self, x: &Array2<f64>) -> Array2<f64> {
        self.filter_axis(&self.filter_axis(x, true), false)
    }

    fn adjoint(&self, u: &Array2<f64>) -> Array2<f64> {
        self.adjoint_axis(&self.adjoint_axis(u, false), true)
    }
}

struct ScaleStats {
    mu_x: Array2<f64>,
    mu_y: Array2<f64>,
    /// Contrast-structure map (2 sigma_xy + c2) / (sigma_x^2 + sigma_y^2 + c2).
    cs_map: Array2<f64>,
    /// Its denominator.
    d_map: Array2<f64>,
    cs_mean: f64,
}

fn scale_stats(x: &Array2<f64>, y: &Array2<f64>, filt: &GaussFilter, c2: f64) -> ScaleStats {
    let mu_x = filt.filter(x);
    let mu_y = filt.filter(y);
    let xx = filt.filter(&(x * x));
    let yy = filt.filter(&(y * y));
    let xy = filt.filter(&(x * y));
    let (h, w) = x.dim();
    let mut cs_map = Array2::zeros((h, w));
    let mut d_map = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let var_x = xx[[i, j]] - mu_x[[i, j]] * mu_x[[i, j]];
            let var_y = yy[[i, j]] - mu_y[[i, j]] * mu_y[[i, j]];
            let cov = xy[[i, j]] - mu_x[[i, j]] * mu_y[[i, j]];
            let d = var_x + var_y + c2;
            d_map[[i, j]] = d;
            cs_map[[i, j]] = (2.0 * cov + c2) / d;
        }
    }
    let cs_mean = cs_map.iter().sum::<f64>() / cs_map.len() as f64;
    ScaleStats {
        mu_x,
        mu_y,
        cs_map,
        d_map,
        cs_mean,
    }
}

/// Minimum image side accepted by [`ms_ssim`]; below this the coarsest
/// default window has no meaningful support.
pub const MSSSIM_MIN_SIDE: usize = 16;

/// Multi-scale SSIM in [-1, 1]; exactly 1 for identical images.
pub fn ms_ssim(x: &Array2<f64>, y: &Array2<f64>, cfg: &LossConfig) -> Result<f64> {
    Ok(ms_ssim_impl(x, y, cfg, false)?.0)
}

/// MS-SSIM value and its gradient with respect to `x`.
pub fn ms_ssim_grad(
    x: &Array2<f64>,
    y: &Array2<f64>,
    cfg: &LossConfig,
) -> Result<(f64, Array2<f64>)> {
    let (v, g) = ms_ssim_impl(x, y, cfg, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn ms_ssim_impl(
    x: &Array2<f64>,
    y: &Array2<f64>,
    cfg: &LossConfig,
    with_grad: bool,
) -> Result<(f64, Option<Array2<f64>>)> {
    check_same_shape(x, y)?;
    cfg.validate()?;
    let (h, w) = x.dim();
    if h.min(w) < MSSSIM_MIN_SIDE {
        return Err(Error::Numeric(format!(
            "image side {} too small for the coarsest MS-SSIM window (min {MSSSIM_MIN_SIDE})",
            h.min(w)
        )));
    }
    let s = cfg.dynamic_range;
    let c1 = (cfg.k1 * s) * (cfg.k1 * s);
    let c2 = (cfg.k2 * s) * (cfg.k2 * s);
    let n = (h * w) as f64;

    let filters: Vec<GaussFilter> = cfg
        .msssim_sigmas
        .iter()
        .map(|&sigma| GaussFilter::new(sigma, (h, w)))
        .collect();
    let stats: Vec<ScaleStats> = filters
        .iter()
        .map(|f| scale_stats(x, y, f, c2))
        .collect();

    // Luminance once, with the coarsest window.
    let coarse = stats.last().unwrap();
    let (mut lum_sum, mut l_map) = (0.0, Array2::zeros((h, w)));
    let mut dl_map = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let (mx, my) = (coarse.mu_x[[i, j]], coarse.mu_y[[i, j]]);
            let dl = mx * mx + my * my + c1;
            let l = (2.0 * mx * my + c1) / dl;
            l_map[[i, j]] = l;
            dl_map[[i, j]] = dl;
            lum_sum += l;
        }
    }
    let lum = lum_sum / n;

    let cs_product: f64 = stats.iter().map(|s| s.cs_mean).product();
    let value = lum * cs_product;
    if !with_grad {
        return Ok((value, None));
    }

    // d value / d lum and d value / d cs_j by the product rule.
    let mut grad = Array2::zeros((h, w));

    // Luminance term: (2/N) * adj((mu_y - l * mu_x) / D_l) * cs_product.
    {
        let filt = filters.last().unwrap();
        let inner = Array2::from_shape_fn((h, w), |(i, j)| {
            (coarse.mu_y[[i, j]] - l_map[[i, j]] * coarse.mu_x[[i, j]]) / dl_map[[i, j]]
        });
        let adj = filt.adjoint(&inner);
        grad += &(&adj * (2.0 / n * cs_product));
    }

    // Contrast-structure terms.
    for (scale, stat) in stats.iter().enumerate() {
        let partial: f64 = lum
            * stats
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != scale)
                .map(|(_, s)| s.cs_mean)
                .product::<f64>();
        let filt = &filters[scale];
        let inv_d = stat.d_map.mapv(|d| 1.0 / d);
        let cs_over_d = &stat.cs_map * &inv_d;
        let t1 = y * &filt.adjoint(&inv_d);
        let t2 = filt.adjoint(&(&stat.mu_y * &inv_d));
        let t3 = x * &filt.adjoint(&cs_over_d);
        let t4 = filt.adjoint(&(&stat.mu_x * &cs_over_d));
        // Grouped so that at x == y the pairwise-identical terms cancel
        // exactly and the gradient is bitwise zero.
        let g = ((&t1 - &t3) + (&t4 - &t2)) * (2.0 / n * partial);
        grad += &g;
    }

    Ok((value, Some(grad)))
}

/// Combination loss of the configured mode, on a single image pair.
pub fn combination_loss(x: &Array2<f64>, y: &Array2<f64>, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    match cfg.mode {
        LossMode::Mse => mse(x, y),
        LossMode::Combination => {
            let p = psnr_log(x, y, cfg.dynamic_range, cfg.mse_floor_eps)?;
            let ms = ms_ssim(x, y, cfg)?;
            let l1 = l1_loss(x, y)?;
            Ok(-cfg.alpha * p + (1.0 - cfg.alpha) * (cfg.beta * (1.0 - ms) + (1.0 - cfg.beta) * l1))
        }
    }
}

/// Combination loss and its gradient with respect to `x`.
///
/// Subgradient conventions: the L1 term uses 0 at exact ties and the PSNR
/// term has zero gradient once MSE falls below the floor, so the total
/// gradient at x == y is exactly zero.
pub fn combination_loss_grad(
    x: &Array2<f64>,
    y: &Array2<f64>,
    cfg: &LossConfig,
) -> Result<(f64, Array2<f64>)> {
    cfg.validate()?;
    check_same_shape(x, y)?;
    let n = x.len() as f64;
    match cfg.mode {
        LossMode::Mse => {
            let value = mse(x, y)?;
            let grad = Array2::from_shape_fn(x.dim(), |idx| 2.0 * (x[idx] - y[idx]) / n);
            Ok((value, grad))
        }
        LossMode::Combination => {
            let m = mse(x, y)?;
            let p = (cfg.dynamic_range * cfg.dynamic_range / m.max(cfg.mse_floor_eps)).log10();
            let (ms, ms_grad) = ms_ssim_grad(x, y, cfg)?;
            let l1 = l1_loss(x, y)?;
            let value =
                -cfg.alpha * p + (1.0 - cfg.alpha) * (cfg.beta * (1.0 - ms) + (1.0 - cfg.beta) * l1);

            let mut grad = Array2::zeros(x.dim());
            // -alpha * dP/dx: dP/dMSE = -1/(MSE ln 10) above the floor.
            if m > cfg.mse_floor_eps {
                let scale = cfg.alpha / (m * std::f64::consts::LN_10) * 2.0 / n;
                grad += &Array2::from_shape_fn(x.dim(), |idx| scale * (x[idx] - y[idx]));
            }
            grad += &(&ms_grad * (-(1.0 - cfg.alpha) * cfg.beta));
            let l1_scale = (1.0 - cfg.alpha) * (1.0 - cfg.beta) / n;
            grad += &Array2::from_shape_fn(x.dim(), |idx| {
                let d = x[idx] - y[idx];
                if d > 0.0 {
                    l1_scale
                } else if d < 0.0 {
                    -l1_scale
                } else {
                    0.0
                }
            });
            Ok((value, grad))
        }
    }
}

/// Channel-mean combination loss over [C x H x W] stacks, with gradient.
pub fn combination_loss_stack_grad(
    x: &Array3<f64>,
    y: &Array3<f64>,
    cfg: &LossConfig,
) -> Result<(f64, Array3<f64>)> {
    if x.dim() != y.dim() {
        return Err(Error::Dim("stack shapes differ".into()));
    }
    let (c, h, w) = x.dim();
    let mut total = 0.0;
    let mut grad = Array3::zeros((c, h, w));
    for ch in 0..c {
        let xc = x.index_axis(ndarray::Axis(0), ch).to_owned();
        let yc = y.index_axis(ndarray::Axis(0), ch).to_owned();
        let (v, g) = combination_loss_grad(&xc, &yc, cfg)?;
        total += v;
        grad.index_axis_mut(ndarray::Axis(0), ch)
            .assign(&(&g / c as f64));
    }
    Ok((total / c as f64, grad))
}

// ---------------------------------------------------------------------------
// Evaluation report
// ---------------------------------------------------------------------------

/// Per-case scalar metrics for one material channel.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub rmse: f64,
    pub mae: f64,
    pub neg_psnr_log: f64,
    pub neg_psnr_db: f64,
    pub ssim_dist: f64,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

/// Population mean and standard deviation.
pub fn stat_of(values: &[f64]) -> Stat {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Stat {
        mean,
        std: var.sqrt(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricStats {
    pub rmse: Stat,
    pub mae: Stat,
    pub neg_psnr_log: Stat,
    pub neg_psnr_db: Stat,
    pub ssim_dist: Stat,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// One entry per material, in channel order, plus "averaged" last.
    pub rows: Vec<(String, MetricStats)>,
    pub case_count: usize,
}

fn aggregate(cases: &[CaseMetrics]) -> MetricStats {
    MetricStats {
        rmse: stat_of(&cases.iter().map(|c| c.rmse).collect::<Vec<_>>()),
        mae: stat_of(&cases.iter().map(|c| c.mae).collect::<Vec<_>>()),
        neg_psnr_log: stat_of(&cases.iter().map(|c| c.neg_psnr_log).collect::<Vec<_>>()),
        neg_psnr_db: stat_of(&cases.iter().map(|c| c.neg_psnr_db).collect::<Vec<_>>()),
        ssim_dist: stat_of(&cases.iter().map(|c| c.ssim_dist).collect::<Vec<_>>()),
    }
}

/// Metrics of one predicted channel against its ground truth.
pub fn case_metrics(pred: &Array2<f64>, gt: &Array2<f64>, cfg: &LossConfig) -> Result<CaseMetrics> {
    let rmse = mse(pred, gt)?.sqrt();
    let mae = l1_loss(pred, gt)?;
    let p = psnr_log(pred, gt, cfg.dynamic_range, cfg.mse_floor_eps)?;
    let ssim = ms_ssim(pred, gt, cfg)?;
    Ok(CaseMetrics {
        rmse,
        mae,
        neg_psnr_log: -p,
        neg_psnr_db: -10.0 * p,
        ssim_dist: 1.0 - ssim,
    })
}

/// Evaluates predicted material stacks against ground truth, reporting
/// mean +/- population std per material and averaged across materials.
pub fn evaluate(
    pred_stacks: &[Array3<f64>],
    gt_stacks: &[Array3<f64>],
    material_names: &[&str],
    cfg: &LossConfig,
) -> Result<EvalReport> {
    if pred_stacks.is_empty() {
        return Err(Error::Data("empty case set".into()));
    }
    if pred_stacks.len() != gt_stacks.len() {
        return Err(Error::Dim("prediction/ground-truth case counts differ".into()));
    }
    let n_mat = material_names.len();
    let mut per_material: Vec<Vec<CaseMetrics>> = vec![Vec::new(); n_mat];
    let mut averaged: Vec<CaseMetrics> = Vec::new();
    for (pred, gt) in pred_stacks.iter().zip(gt_stacks) {
        if pred.dim() != gt.dim() || pred.dim().0 != n_mat {
            return Err(Error::Dim("stack shape mismatch".into()));
        }
        let mut acc = CaseMetrics {
            rmse: 0.0,
            mae: 0.0,
            neg_psnr_log: 0.0,
            neg_psnr_db: 0.0,
            ssim_dist: 0.0,
        };
        for m in 0..n_mat {
            let p = pred.index_axis(ndarray::Axis(0), m).to_owned();
            let g = gt.index_axis(ndarray::Axis(0), m).to_owned();
            let cm = case_metrics(&p, &g, cfg)?;
            per_material[m].push(cm);
            acc.rmse += cm.rmse / n_mat as f64;
            acc.mae += cm.mae / n_mat as f64;
            acc.neg_psnr_log += cm.neg_psnr_log / n_mat as f64;
            acc.neg_psnr_db += cm.neg_psnr_db / n_mat as f64;
            acc.ssim_dist += cm.ssim_dist / n_mat as f64;
        }
        averaged.push(acc);
    }
    let mut rows: Vec<(String, MetricStats)> = material_names
        .iter()
        .zip(&per_material)
        .map(|(name, cases)| (name.to_string(), aggregate(cases)))
        .collect();
    rows.push(("averaged".to_string(), aggregate(&averaged)));
    Ok(EvalReport {
        rows,
        case_count: pred_stacks.len(),
    })
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "material,rmse_mean,rmse_std,mae_mean,mae_std,neg_psnr_log_mean,neg_psnr_log_std,\
             neg_psnr_db_mean,neg_psnr_db_std,ssim_dist_mean,ssim_dist_std,n_cases\n",
        );
        for (name, s) in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.4},{:.4},{:.3},{:.3},{:.6},{:.6},{}\n",
                name,
                s.rmse.mean,
                s.rmse.std,
                s.mae.mean,
                s.mae.std,
                s.neg_psnr_log.mean,
                s.neg_psnr_log.std,
                s.neg_psnr_db.mean,
                s.neg_psnr_db.std,
                s.ssim_dist.mean,
                s.ssim_dist.std,
                self.case_count
            ));
        }
        out
    }

    pub fn to_markdown(&self, title: &str) -> String {
        let mut out = format!("### {title}\n\n");
        out.push_str("| material | RMSE | MAE | -PSNR (log) | -PSNR (dB) | SSIM dist |\n");
        out.push_str("|---|---|---|---|---|---|\n");
        for (name, s) in &self.rows {
            out.push_str(&format!(
                "| {} | {:.4} ± {:.4} | {:.4} ± {:.4} | {:.3} ± {:.3} | {:.2} ± {:.2} | {:.4} ± {:.4} |\n",
                name,
                s.rmse.mean,
                s.rmse.std,
                s.mae.mean,
                s.mae.std,
                s.neg_psnr_log.mean,
                s.neg_psnr_log.std,
                s.neg_psnr_db.mean,
                s.neg_psnr_db.std,
                s.ssim_dist.mean,
                s.ssim_dist.std,
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pair(h: usize, w: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((h, w), |_| rng.gen_range(0.0..1.0));
        let y = Array2::from_shape_fn((h, w), |_| rng.gen_range(0.0..1.0));
        (x, y)
    }

    #[test]
    fn psnr_log_closed_forms() {
        let x = Array2::zeros((4, 4));
        // MSE = 0.01, MAX = 1 -> log10(1/0.01) = 2.
        let y = Array2::from_elem((4, 4), 0.1);
        let p = psnr_log(&x, &y, 1.0, 1e-12).unwrap();
        assert!((p - 2.0).abs() < 1e-12);
        // Identical images hit the floor.
        let p_id = psnr_log(&x, &x, 1.0, 1e-12).unwrap();
        assert!((p_id - 12.0).abs() < 1e-12);
    }

    #[test]
    fn losses_match_brute_force_oracles() {
        let (x, y) = random_pair(13, 17, 3);
        let mut mse_acc = 0.0;
        let mut l1_acc = 0.0;
        for i in 0..13 {
            for j in 0..17 {
                let d = x[[i, j]] - y[[i, j]];
                mse_acc += d * d;
                l1_acc += d.abs();
            }
        }
        let n = (13 * 17) as f64;
        assert!((mse(&x, &y).unwrap() - mse_acc / n).abs() < 1e-14);
        assert!((l1_loss(&x, &y).unwrap() - l1_acc / n).abs() < 1e-14);
        let p = psnr_log(&x, &y, 1.0, 1e-12).unwrap();
        assert!((p - (1.0 / (mse_acc / n)).log10()).abs() < 1e-12);
    }

    #[test]
    fn l1_simple_values() {
        let x = Array2::from_elem((3, 3), 1.0);
        let y = Array2::zeros((3, 3));
        assert_eq!(l1_loss(&x, &y).unwrap(), 1.0);
        assert_eq!(l1_loss(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn ms_ssim_identity_is_exactly_one() {
        let (x, _) = random_pair(24, 24, 9);
        let v = ms_ssim(&x, &x, &LossConfig::default()).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn ms_ssim_detects_inversion() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Array2::from_shape_fn((32, 32), |_| rng.gen_range(0.25..0.75));
        let y = x.mapv(|v| 1.0 - v);
        let v = ms_ssim(&x, &y, &LossConfig::default()).unwrap();
        assert!(v < 1.0);
    }

    #[test]
    fn ms_ssim_symmetry() {
        let (x, y) = random_pair(24, 24, 4);
        let cfg = LossConfig::default();
        let a = ms_ssim(&x, &y, &cfg).unwrap();
        let b = ms_ssim(&y, &x, &cfg).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn ms_ssim_rejects_tiny_images() {
        let x = Array2::zeros((8, 8));
        assert!(ms_ssim(&x, &x, &LossConfig::default()).is_err());
    }

    /// Naive O(N W^2) windowed reference: same definition, no separability.
    fn naive_ms_ssim(x: &Array2<f64>, y: &Array2<f64>, cfg: &LossConfig) -> f64 {
        let (h, w) = x.dim();
        let s = cfg.dynamic_range;
        let c1 = (cfg.k1 * s) * (cfg.k1 * s);
        let c2 = (cfg.k2 * s) * (cfg.k2 * s);
        let mut cs_means = Vec::new();
        let mut lum_mean = 0.0;
        for (si, &sigma) in cfg.msssim_sigmas.iter().enumerate() {
            let radius = ((3.0 * sigma).ceil() as i64).max(1).min(h.min(w) as i64 - 1);
            let mut cs_sum = 0.0;
            let mut lum_sum = 0.0;
            for i in 0..h as i64 {
                for j in 0..w as i64 {
                    let mut wsum = 0.0;
                    let (mut mx, mut my) = (0.0, 0.0);
                    let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
                    for di in -radius..=radius {
                        for dj in -radius..=radius {
                            let (qi, qj) = (i + di, j + dj);
                            if qi < 0 || qi >= h as i64 || qj < 0 || qj >= w as i64 {
                                continue;
                            }
                            let wt = (-0.5 * ((di * di + dj * dj) as f64) / (sigma * sigma)).exp();
                            let (a, b) = (x[[qi as usize, qj as usize]], y[[qi as usize, qj as usize]]);
                            wsum += wt;
                            mx += wt * a;
                            my += wt * b;
                            xx += wt * a * a;
                            yy += wt * b * b;
                            xy += wt * a * b;
                        }
                    }
                    mx /= wsum;
                    my /= wsum;
                    let var_x = xx / wsum - mx * mx;
                    let var_y = yy / wsum - my * my;
                    let cov = xy / wsum - mx * my;
                    cs_sum += (2.0 * cov + c2) / (var_x + var_y + c2);
                    if si == cfg.msssim_sigmas.len() - 1 {
                        lum_sum += (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
                    }
                }
            }
            cs_means.push(cs_sum / (h * w) as f64);
            if si == cfg.msssim_sigmas.len() - 1 {
                lum_mean = lum_sum / (h * w) as f64;
            }
        }
        lum_mean * cs_means.iter().product::<f64>()
    }

    #[test]
    fn ms_ssim_matches_naive_window_oracle() {
        let (x, y) = random_pair(32, 32, 21);
        // The separable product over the clipped square support equals the
        // naive 2-D kernel, border renormalization included.
        let cfg = LossConfig {
            msssim_sigmas: vec![0.8, 1.7],
            ..LossConfig::default()
        };
        let fast = ms_ssim(&x, &y, &cfg).unwrap();
        let slow = naive_ms_ssim(&x, &y, &cfg);
        assert!((fast - slow).abs() < 1e-8, "{fast} vs {slow}");
    }

    #[test]
    fn ms_ssim_translation_consistency() {
        // Same content placed at two offsets inside a larger canvas; the
        // crops around the content are identical, so the metric must agree.
        let (x, y) = random_pair(48, 48, 30);
        let embed = |img: &Array2<f64>, oi: usize, oj: usize| {
            let mut canvas = Array2::zeros((64, 64));
            for i in 0..48 {
                for j in 0..48 {
                    canvas[[i + oi, j + oj]] = img[[i, j]];
                }
            }
            canvas
        };
        let crop = |img: &Array2<f64>, oi: usize, oj: usize| {
            Array2::from_shape_fn((48, 48), |(i, j)| img[[i + oi, j + oj]])
        };
        let cfg = LossConfig::default();
        let a = ms_ssim(
            &crop(&embed(&x, 2, 3), 2, 3),
            &crop(&embed(&y, 2, 3), 2, 3),
            &cfg,
        )
        .unwrap();
        let b = ms_ssim(
            &crop(&embed(&x, 9, 5), 9, 5),
            &crop(&embed(&y, 9, 5), 9, 5),
            &cfg,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn combination_loss_composes_its_parts() {
        let (x, y) = random_pair(32, 32, 8);
        let cfg = LossConfig::default();
        let v = combination_loss(&x, &y, &cfg).unwrap();
        let p = psnr_log(&x, &y, 1.0, cfg.mse_floor_eps).unwrap();
        let ms = ms_ssim(&x, &y, &cfg).unwrap();
        let l1 = l1_loss(&x, &y).unwrap();
        let composed =
            -cfg.alpha * p + (1.0 - cfg.alpha) * (cfg.beta * (1.0 - ms) + (1.0 - cfg.beta) * l1);
        assert!((v - composed).abs() < 1e-14);
    }

    #[test]
    fn combination_loss_alpha_zero_boundary() {
        let (x, y) = random_pair(24, 24, 15);
        let cfg = LossConfig {
            alpha: 0.0,
            ..LossConfig::default()
        };
        let v = combination_loss(&x, &y, &cfg).unwrap();
        let ms = ms_ssim(&x, &y, &cfg).unwrap();
        let l1 = l1_loss(&x, &y).unwrap();
        let expected = cfg.beta * (1.0 - ms) + (1.0 - cfg.beta) * l1;
        assert!((v - expected).abs() < 1e-14);
    }

    #[test]
    fn combination_loss_identity_value() {
        let (x, _) = random_pair(24, 24, 2);
        let cfg = LossConfig::default();
        let v = combination_loss(&x, &x, &cfg).unwrap();
        let expected = -cfg.alpha * (1.0f64 / cfg.mse_floor_eps).log10();
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn combination_gradient_zero_at_identity() {
        let (x, _) = random_pair(24, 24, 6);
        let (_, grad) = combination_loss_grad(&x, &x, &LossConfig::default()).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn combination_gradient_matches_finite_differences() {
        let (x, y) = random_pair(20, 20, 41);
        for mode in [LossMode::Combination, LossMode::Mse] {
            let cfg = LossConfig {
                mode,
                msssim_sigmas: vec![0.5, 1.0, 2.0],
                ..LossConfig::default()
            };
            let (_, grad) = combination_loss_grad(&x, &y, &cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let h = 1e-6;
            for _ in 0..24 {
                let i = rng.gen_range(0..20);
                let j = rng.gen_range(0..20);
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (combination_loss(&xp, &y, &cfg).unwrap()
                    - combination_loss(&xm, &y, &cfg).unwrap())
                    / (2.0 * h);
                let g = grad[[i, j]];
                let denom = fd.abs().max(g.abs()).max(1e-8);
                assert!(
                    ((fd - g) / denom).abs() < 1e-3,
                    "mode {mode:?} grad[{i},{j}] = {g}, fd = {fd}"
                );
            }
        }
    }

    #[test]
    fn metric_symmetry_and_identity() {
        let (x, y) = random_pair(24, 24, 10);
        assert_eq!(mse(&x, &y).unwrap(), mse(&y, &x).unwrap());
        assert_eq!(l1_loss(&x, &y).unwrap(), l1_loss(&y, &x).unwrap());
        assert_eq!(mse(&x, &x).unwrap(), 0.0);
        assert_eq!(l1_loss(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn evaluate_on_planted_errors() {
        // Known per-case RMSEs {0.1, 0.2, 0.3}: mean 0.2, population std
        // sqrt(2/300).
        let gt: Vec<Array3<f64>> = (0..3).map(|_| Array3::zeros((1, 16, 16))).collect();
        let preds: Vec<Array3<f64>> = [0.1, 0.2, 0.3]
            .iter()
            .map(|&e| Array3::from_elem((1, 16, 16), e))
            .collect();
        let report = evaluate(&preds, &gt, &["only"], &LossConfig::default()).unwrap();
        let rmse = &report.rows[0].1.rmse;
        assert!((rmse.mean - 0.2).abs() < 1e-12);
        let expected_std = (0.02f64 / 3.0).sqrt();
        assert!((rmse.std - expected_std).abs() < 1e-12);
        // Averaged row equals the single material row here.
        assert!((report.rows[1].1.rmse.mean - 0.2).abs() < 1e-12);
    }

    #[test]
    fn evaluate_identical_predictions() {
        let gt: Vec<Array3<f64>> =
            vec![Array3::from_shape_fn((2, 16, 16), |(c, i, j)| {
                (c + i + j) as f64 / 40.0
            })];
        let report = evaluate(&gt.clone(), &gt, &["m0", "m1"], &LossConfig::default()).unwrap();
        for (_, s) in &report.rows {
            assert_eq!(s.rmse.mean, 0.0);
            assert_eq!(s.mae.mean, 0.0);
            assert_eq!(s.ssim_dist.mean, 0.0);
            assert_eq!(s.rmse.std, 0.0);
        }
    }

    #[test]
    fn evaluate_rejects_empty() {
        let report = evaluate(&[], &[], &["a"], &LossConfig::default());
        assert!(report.is_err());
    }
}
