//! Supervision terms: sliced Wasserstein distance between sorted feature
//! projections, the Rain-Robust contrastive loss, (MS-)SSIM, smooth-L1
//! feature distillation, and the composite constructor / de-weathering
//! objectives.

use crate::error::{Error, Result};
use crate::patchops::{FeatureExtractor, ProjectionMatrix};
use crate::tensor::Tensor;
use ndarray::Array2;

/// Trade-off weights of the composite objectives.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    /// Contrastive temperature.
    pub tau: f64,
    /// Original-label block weight in the CLC-pipeline objective.
    pub lambda1: f64,
    /// SW weight inside the original-label block.
    pub lambda2: f64,
    /// Original-label weight in the CSA-CLC-pipeline objective.
    pub lambda_o: f64,
    /// Distillation weight.
    pub lambda_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            tau: 0.25,
            lambda1: 0.1,
            lambda2: 0.08,
            lambda_o: 0.25,
            lambda_d: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossTerm {
    pub name: &'static str,
    /// Unweighted value of the term.
    pub raw: f64,
    /// Effective weight in the total.
    pub weight: f64,
}

#[derive(Debug, Clone, Default)]
pub struct LossReport {
    pub total: f64,
    pub terms: Vec<LossTerm>,
}

impl LossReport {
    pub fn weighted_sum(&self) -> f64 {
        self.terms.iter().map(|t| t.raw * t.weight).sum()
    }

    pub fn term(&self, name: &str) -> Option<&LossTerm> {
        self.terms.iter().find(|t| t.name == name)
    }
}

/// Accumulates weighted scalar tensors into a total plus a report.
struct LossBuilder {
    parts: Vec<(Tensor, &'static str, f64)>,
}

impl LossBuilder {
    fn new() -> Self {
        LossBuilder { parts: Vec::new() }
    }

    fn push(&mut self, name: &'static str, value: Tensor, weight: f64) {
        self.parts.push((value, name, weight));
    }

    fn finish(self) -> (Tensor, LossReport) {
        assert!(!self.parts.is_empty());
        let mut total: Option<Tensor> = None;
        let mut terms = Vec::new();
        for (value, name, weight) in &self.parts {
            terms.push(LossTerm {
                name,
                raw: value.item(),
                weight: *weight,
            });
            let scaled = value.mul_scalar(*weight);
            total = Some(match total {
                Some(t) => t.add(&scaled),
                None => scaled,
            });
        }
        let total = total.unwrap();
        let report = LossReport {
            total: total.item(),
            terms,
        };
        (total, report)
    }
}

// ---------------------------------------------------------------------------
// Sliced Wasserstein loss
// ---------------------------------------------------------------------------

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidInput(format!(
            "shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Sliced Wasserstein distance between the feature distributions of two
/// images (3 x H x W): extract features, flatten to C x HW, project with the
/// unit-norm random matrix, sort each projected row, and take the mean
/// absolute difference of the sorted values.
pub fn sw_loss(
    out: &Tensor,
    target: &Tensor,
    extractor: &dyn FeatureExtractor,
    proj: &ProjectionMatrix,
) -> Result<Tensor> {
    check_same_shape(out, target)?;
    let u = extractor.extract(out);
    let v = extractor.extract(target);
    let ushape = u.shape();
    let (c, hw) = (ushape[0], ushape[1] * ushape[2]);
    if proj.m.ncols() != c {
        return Err(Error::InvalidInput(format!(
            "projection expects {} channels, features have {c}",
            proj.m.ncols()
        )));
    }
    let m = Tensor::constant(proj.m.clone().into_dyn());
    let up = m.matmul(&u.reshape(&[c, hw])).sort_rows_asc();
    let vp = m.matmul(&v.reshape(&[c, hw])).sort_rows_asc();
    Ok(up.sub(&vp).abs().mean_all())
}

/// Mean of per-sample SW losses over a batch (B x 3 x H x W).
pub fn sw_loss_batch(
    out: &Tensor,
    target: &Tensor,
    extractor: &dyn FeatureExtractor,
    proj: &ProjectionMatrix,
) -> Result<Tensor> {
    check_same_shape(out, target)?;
    let b = out.shape()[0];
    let mut acc: Option<Tensor> = None;
    for bi in 0..b {
        let l = sw_loss(
            &out.select_batch(bi),
            &target.select_batch(bi),
            extractor,
            proj,
        )?;
        acc = Some(match acc {
            Some(t) => t.add(&l),
            None => l,
        });
    }
    Ok(acc.unwrap().mul_scalar(1.0 / b as f64))
}

// ---------------------------------------------------------------------------
// Rain-Robust (InfoNCE) loss
// ---------------------------------------------------------------------------

/// Maps a batch of images (B x 3 x H x W) to flattened feature vectors
/// (B x d). Implemented by the model encoders.
pub trait ImageEncoder {
    fn encode_batch(&self, imgs: &Tensor) -> Tensor;
}

/// InfoNCE over already-encoded feature rows `u` (from degraded inputs) and
/// `v` (from clean references), both N x d with N >= 2 pairs from distinct
/// scenes. Cosine similarities are used; for each anchor the denominator
/// sums the N-1 other pairs' two encodings, excluding the anchor itself and
/// its positive.
pub fn rain_robust_from_features(u: &Tensor, v: &Tensor, tau: f64) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(Error::InvalidConfig("temperature must be > 0".into()));
    }
    let n = u.shape()[0];
    if v.shape()[0] != n || u.shape()[1] != v.shape()[1] {
        return Err(Error::InvalidInput("feature shape mismatch".into()));
    }
    if n < 2 {
        return Err(Error::InvalidInput(
            "rain-robust loss needs at least 2 pairs".into(),
        ));
    }
    let feats = Tensor::concat(&[u.clone(), v.clone()], 0).l2_normalize_rows();
    let sims = feats.matmul(&feats.t2()).mul_scalar(1.0 / tau); // 2N x 2N
    let total = 2 * n;
    let mut mask = Array2::<bool>::from_elem((total, total), true);
    let mut positives = Array2::<f64>::zeros((total, total));
    for i in 0..total {
        let partner = if i < n { i + n } else { i - n };
        mask[[i, i]] = false;
        mask[[i, partner]] = false;
        positives[[i, partner]] = 1.0;
    }
    let lse_sum = sims.masked_lse_rows(&mask).sum_all();
    let pos_sum = sims.mul(&Tensor::constant(positives.into_dyn())).sum_all();
    Ok(lse_sum.sub(&pos_sum).mul_scalar(1.0 / n as f64))
}

/// Rain-Robust loss over image pairs, using `encoder` as the feature
/// extractor for both sides.
pub fn rain_robust_loss(
    degraded: &Tensor,
    clean: &Tensor,
    encoder: &dyn ImageEncoder,
    tau: f64,
) -> Result<Tensor> {
    check_same_shape(degraded, clean)?;
    let u = encoder.encode_batch(degraded);
    let v = encoder.encode_batch(clean);
    rain_robust_from_features(&u, &v, tau)
}

// ---------------------------------------------------------------------------
// (MS-)SSIM
// ---------------------------------------------------------------------------

/// Configuration for the differentiable (MS-)SSIM.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct MsSsimConfig {
    /// Gaussian window width (odd).
    pub window: usize,
    pub sigma: f64,
    /// Number of dyadic scales.
    pub scales: usize,
    /// Value range of the inputs (2.0 in model space [-1, 1], 1.0 for [0, 1]).
    pub data_range: f64,
}

impl MsSsimConfig {
    /// Loss-side default at desk resolutions: a 7-tap window lets 3 scales
    /// fit a 32 px crop (an 11-tap window would need >= 44 px).
    pub fn desk_loss() -> Self {
        MsSsimConfig {
            window: 7,
            sigma: 1.5,
            scales: 3,
            data_range: 2.0,
        }
    }

    /// Canonical single-scale metric settings on [0, 1] images.
    pub fn metric() -> Self {
        MsSsimConfig {
            window: 11,
            sigma: 1.5,
            scales: 1,
            data_range: 1.0,
        }
    }
}

pub(crate) fn gaussian_kernel2(window: usize, sigma: f64) -> Array2<f64> {
    let c = (window as f64 - 1.0) / 2.0;
    let mut g1 = vec![0.0; window];
    let mut sum = 0.0;
    for (i, v) in g1.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp();
        sum += *v;
    }
    for v in g1.iter_mut() {
        *v /= sum;
    }
    let mut k = Array2::<f64>::zeros((window, window));
    for i in 0..window {
        for j in 0..window {
            k[[i, j]] = g1[i] * g1[j];
        }
    }
    k
}

/// Canonical MS-SSIM per-scale weights (Wang et al.), renormalized to the
/// requested scale count.
pub(crate) fn msssim_weights(scales: usize) -> Vec<f64> {
    const FULL: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    assert!((1..=5).contains(&scales));
    let head = &FULL[..scales];
    let sum: f64 = head.iter().sum();
    head.iter().map(|w| w / sum).collect()
}

/// Per-scale luminance * contrast-structure means of one SSIM evaluation.
fn ssim_scale(a: &Tensor, b: &Tensor, kernel: &Array2<f64>, c1: f64, c2: f64) -> (Tensor, Tensor) {
    let mu_a = a.blur_depthwise_valid(kernel);
    let mu_b = b.blur_depthwise_valid(kernel);
    let mu_aa = mu_a.mul(&mu_a);
    let mu_bb = mu_b.mul(&mu_b);
    let mu_ab = mu_a.mul(&mu_b);
    let sigma_aa = a.mul(a).blur_depthwise_valid(kernel).sub(&mu_aa);
    let sigma_bb = b.mul(b).blur_depthwise_valid(kernel).sub(&mu_bb);
    let sigma_ab = a.mul(b).blur_depthwise_valid(kernel).sub(&mu_ab);
    let lum = mu_ab
        .mul_scalar(2.0)
        .add_scalar(c1)
        .div(&mu_aa.add(&mu_bb).add_scalar(c1));
    let cs = sigma_ab
        .mul_scalar(2.0)
        .add_scalar(c2)
        .div(&sigma_aa.add(&sigma_bb).add_scalar(c2));
    (lum.mul(&cs).mean_all(), cs.mean_all())
}

/// Multi-scale SSIM of two batched images (B x C x H x W); higher is better,
/// 1 for identical inputs. Per-scale contrast terms are clamped at 0 before
/// the weighted geometric combination.
pub fn ms_ssim(a: &Tensor, b: &Tensor, cfg: &MsSsimConfig) -> Result<Tensor> {
    check_same_shape(a, b)?;
    let shape = a.shape();
    if shape.len() != 4 {
        return Err(Error::InvalidInput("ms_ssim expects B x C x H x W".into()));
    }
    let (h, w) = (shape[2], shape[3]);
    let factor = 1usize << (cfg.scales - 1);
    let min_size = cfg.window * factor;
    if h < min_size || w < min_size {
        return Err(Error::InvalidInput(format!(
            "{h}x{w} image too small for {} scales with a {}-tap window (needs >= {min_size})",
            cfg.scales, cfg.window
        )));
    }
    if (h % factor != 0) || (w % factor != 0) {
        return Err(Error::InvalidInput(format!(
            "{h}x{w} image not divisible by 2^(scales-1) = {factor}"
        )));
    }
    let kernel = gaussian_kernel2(cfg.window, cfg.sigma);
    let c1 = (0.01 * cfg.data_range).powi(2);
    let c2 = (0.03 * cfg.data_range).powi(2);
    let weights = msssim_weights(cfg.scales);
    let mut cur_a = a.clone();
    let mut cur_b = b.clone();
    let mut result: Option<Tensor> = None;
    for (si, &wgt) in weights.iter().enumerate() {
        let (ssim_mean, cs_mean) = ssim_scale(&cur_a, &cur_b, &kernel, c1, c2);
        let factor_term = if si + 1 == weights.len() {
            ssim_mean
        } else {
            cs_mean
        };
        let powed = factor_term.relu().pow_scalar(wgt);
        result = Some(match result {
            Some(r) => r.mul(&powed),
            None => powed,
        });
        if si + 1 != weights.len() {
            cur_a = cur_a.avg_pool2();
            cur_b = cur_b.avg_pool2();
        }
    }
    Ok(result.unwrap())
}

/// 1 - MS-SSIM; 0 for identical images.
pub fn ms_ssim_loss(a: &Tensor, b: &Tensor, cfg: &MsSsimConfig) -> Result<Tensor> {
    Ok(ms_ssim(a, b, cfg)?.neg().add_scalar(1.0))
}

// ---------------------------------------------------------------------------
// Distillation
// ---------------------------------------------------------------------------

/// Smooth-L1 between the de-weathering bottleneck and the (stop-gradient)
/// aggregated constructor feature. Gradients flow into `g_t` only.
pub fn distill_loss(g_t: &Tensor, f_agg: &Tensor) -> Result<Tensor> {
    check_same_shape(g_t, f_agg)?;
    Ok(g_t.smooth_l1_mean(&f_agg.detach()))
}

// ---------------------------------------------------------------------------
// Composite objectives
// ---------------------------------------------------------------------------

/// Constructor objective: L1 + (1 - MS-SSIM) against the original label.
pub fn clc_objective(
    pseudo: &Tensor,
    gt: &Tensor,
    mss: &MsSsimConfig,
) -> Result<(Tensor, LossReport)> {
    check_same_shape(pseudo, gt)?;
    let mut b = LossBuilder::new();
    b.push("l1_gt", pseudo.l1_mean(gt), 1.0);
    b.push("ms_ssim_gt", ms_ssim_loss(pseudo, gt, mss)?, 1.0);
    Ok(b.finish())
}

/// CSA constructor objective: the CLC terms plus the Rain-Robust loss on
/// (pseudo, gt) pairs encoded by the constructor's own encoder.
pub fn csaclc_objective(
    pseudo: &Tensor,
    gt: &Tensor,
    encoder: &dyn ImageEncoder,
    tau: f64,
    mss: &MsSsimConfig,
) -> Result<(Tensor, LossReport)> {
    check_same_shape(pseudo, gt)?;
    let mut b = LossBuilder::new();
    b.push("l1_gt", pseudo.l1_mean(gt), 1.0);
    b.push("ms_ssim_gt", ms_ssim_loss(pseudo, gt, mss)?, 1.0);
    b.push("rain_robust", rain_robust_loss(pseudo, gt, encoder, tau)?, 1.0);
    Ok(b.finish())
}

/// De-weathering objective for the CLC pipeline:
/// L1(out, pseudo) + lambda1 * (L_R(out, gt) + lambda2 * L_SW(out, gt)).
pub fn ias_clc_objective(
    out: &Tensor,
    pseudo: &Tensor,
    gt: &Tensor,
    encoder: &dyn ImageEncoder,
    extractor: &dyn FeatureExtractor,
    proj: &ProjectionMatrix,
    w: &LossWeights,
) -> Result<(Tensor, LossReport)> {
    check_same_shape(out, pseudo)?;
    check_same_shape(out, gt)?;
    let mut b = LossBuilder::new();
    b.push("l1_pseudo", out.l1_mean(pseudo), 1.0);
    b.push(
        "rain_robust_gt",
        rain_robust_loss(out, gt, encoder, w.tau)?,
        w.lambda1,
    );
    b.push(
        "sw_gt",
        sw_loss_batch(out, gt, extractor, proj)?,
        w.lambda1 * w.lambda2,
    );
    Ok(b.finish())
}

/// De-weathering objective for the CSA-CLC pipeline:
/// [L1 + (1 - MS-SSIM)](out, pseudo)
///   + lambda_o * [L_R + (1 - MS-SSIM)](out, gt)
///   + lambda_d * smooth-L1(G_t, stopgrad(F_agg)).
#[allow(clippy::too_many_arguments)]
pub fn ias_csaclc_objective(
    out: &Tensor,
    pseudo: &Tensor,
    gt: &Tensor,
    g_t: &Tensor,
    f_agg: &Tensor,
    encoder: &dyn ImageEncoder,
    w: &LossWeights,
    mss: &MsSsimConfig,
) -> Result<(Tensor, LossReport)> {
    check_same_shape(out, pseudo)?;
    check_same_shape(out, gt)?;
    let mut b = LossBuilder::new();
    b.push("l1_pseudo", out.l1_mean(pseudo), 1.0);
    b.push("ms_ssim_pseudo", ms_ssim_loss(out, pseudo, mss)?, 1.0);
    b.push(
        "rain_robust_gt",
        rain_robust_loss(out, gt, encoder, w.tau)?,
        w.lambda_o,
    );
    b.push("ms_ssim_gt", ms_ssim_loss(out, gt, mss)?, w.lambda_o);
    b.push("distill", distill_loss(g_t, f_agg)?, w.lambda_d);
    Ok(b.finish())
}
