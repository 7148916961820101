//! Metrics (PSNR, canonical single-scale SSIM), checkpoint evaluation
//! against the aligned oracle or the misaligned label, and the ablation
//! sweeps.

use crate::data_synth::{load_dataset, Image, SceneData, Weather};
use crate::error::{Error, Result};
use crate::losses::gaussian_kernel2;
use crate::models::{from_model_range, read_checkpoint, to_model_range, DewModel};
use crate::training::{
    batch_to_image, images_to_batch, train_constructor, train_dew, Constructor, Stage,
    Supervision, TrainConfig,
};
use std::path::{Path, PathBuf};

/// PSNR in dB on [0, 1] images, capped at 99 dB (the value reported for
/// identical inputs).
pub fn psnr(a: &Image, b: &Image) -> f64 {
    assert_eq!(a.dim(), b.dim(), "psnr shape mismatch");
    let mut mse = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        mse += d * d;
    }
    mse /= a.len() as f64;
    if mse == 0.0 {
        return 99.0;
    }
    (10.0 * (1.0 / mse).log10()).min(99.0)
}

/// Canonical single-scale SSIM: 11-tap Gaussian window (sigma 1.5),
/// k1 = 0.01, k2 = 0.03, data range 1, valid-window mean over channels.
pub fn ssim(a: &Image, b: &Image) -> f64 {
    ssim_windowed(a, b, 11, 1.5)
}

pub fn ssim_windowed(a: &Image, b: &Image, window: usize, sigma: f64) -> f64 {
    assert_eq!(a.dim(), b.dim(), "ssim shape mismatch");
    let (c, h, w) = a.dim();
    assert!(
        h >= window && w >= window,
        "image {h}x{w} smaller than the {window}-tap window"
    );
    let kernel = gaussian_kernel2(window, sigma);
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for oy in 0..=(h - window) {
            for ox in 0..=(w - window) {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut aa = 0.0;
                let mut bb = 0.0;
                let mut ab = 0.0;
                for ky in 0..window {
                    for kx in 0..window {
                        let wgt = kernel[[ky, kx]];
                        let va = a[[ch, oy + ky, ox + kx]];
                        let vb = b[[ch, oy + ky, ox + kx]];
                        mu_a += wgt * va;
                        mu_b += wgt * vb;
                        aa += wgt * va * va;
                        bb += wgt * vb * vb;
                        ab += wgt * va * vb;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
                let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
                total += num / den;
                count += 1;
            }
        }
    }
    total / count as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Against {
    Oracle,
    MisalignedGt,
}

impl std::fmt::Display for Against {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Against::Oracle => write!(f, "oracle"),
            Against::MisalignedGt => write!(f, "misaligned_gt"),
        }
    }
}

impl std::str::FromStr for Against {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Against::Oracle),
            "misaligned_gt" => Ok(Against::MisalignedGt),
            other => Err(Error::InvalidConfig(format!(
                "unknown comparison target '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub scene_id: String,
    pub weather: Weather,
    pub psnr_db: f64,
    pub ssim: f64,
    pub against: Against,
}

/// Per-weather means plus the record-count-weighted overall row.
#[derive(Debug, Clone)]
pub struct SummaryRow {
    /// None marks the overall row.
    pub weather: Option<Weather>,
    pub count: usize,
    pub psnr_db: f64,
    pub ssim: f64,
}

pub fn summarize(records: &[MetricsRecord]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for weather in [Weather::Rain, Weather::Fog, Weather::Snow] {
        let subset: Vec<&MetricsRecord> =
            records.iter().filter(|r| r.weather == weather).collect();
        if subset.is_empty() {
            continue;
        }
        rows.push(SummaryRow {
            weather: Some(weather),
            count: subset.len(),
            psnr_db: subset.iter().map(|r| r.psnr_db).sum::<f64>() / subset.len() as f64,
            ssim: subset.iter().map(|r| r.ssim).sum::<f64>() / subset.len() as f64,
        });
    }
    if !records.is_empty() {
        rows.push(SummaryRow {
            weather: None,
            count: records.len(),
            psnr_db: records.iter().map(|r| r.psnr_db).sum::<f64>() / records.len() as f64,
            ssim: records.iter().map(|r| r.ssim).sum::<f64>() / records.len() as f64,
        });
    }
    rows
}

/// What a checkpoint restores for one scene: the De-W output on the center
/// frame, or the constructor's pseudo-label.
pub fn restored_for_scene(ckpt_path: &Path, scene: &SceneData) -> Result<Image> {
    let ckpt = read_checkpoint(ckpt_path)?;
    match ckpt.stage.as_str() {
        "dew" => {
            let model = DewModel::from_checkpoint(&ckpt, false)?;
            let center = scene.frames.len() / 2;
            let input = to_model_range(&images_to_batch(&[&scene.frames[center]]));
            let out = model.forward(&input, false);
            Ok(batch_to_image(&from_model_range(&out.restored), 0))
        }
        "clc" | "csaclc" => {
            let constructor = Constructor::load(ckpt_path)?;
            let window = crate::data_synth::window_from_scene(
                &scene.frames,
                &scene.gt,
                &scene.gt_aligned,
                constructor.frames_n(),
            )?;
            constructor.pseudo_for_window(&window)
        }
        other => Err(Error::InvalidConfig(format!(
            "cannot evaluate checkpoint stage '{other}'"
        ))),
    }
}

/// Evaluate a checkpoint over every scene of a dataset. Read-only: neither
/// the dataset nor the checkpoint is modified.
pub fn evaluate(
    ckpt_path: &Path,
    dataset_dir: &Path,
    against: Against,
) -> Result<Vec<MetricsRecord>> {
    let scenes = load_dataset(dataset_dir)?;
    if scenes.is_empty() {
        return Err(Error::InvalidInput("dataset has no scenes".into()));
    }
    let mut records = Vec::with_capacity(scenes.len());
    for scene in &scenes {
        let restored = restored_for_scene(ckpt_path, scene)?;
        let target = match against {
            Against::Oracle => &scene.gt_aligned,
            Against::MisalignedGt => &scene.gt,
        };
        records.push(MetricsRecord {
            scene_id: scene.entry.scene_id.clone(),
            weather: scene.entry.weather,
            psnr_db: psnr(&restored, target),
            ssim: ssim(&restored, target),
            against,
        });
    }
    Ok(records)
}

pub fn write_metrics_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let mut out = String::from("scene_id,weather,psnr_db,ssim,against\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.scene_id, r.weather, r.psnr_db, r.ssim, r.against
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_summary_csv(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut out = String::from("weather,count,psnr_db,ssim\n");
    for r in rows {
        let name = r
            .weather
            .map(|w| w.to_string())
            .unwrap_or_else(|| "overall".into());
        out.push_str(&format!("{},{},{},{}\n", name, r.count, r.psnr_db, r.ssim));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Ablation sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Supervision,
    Frames,
    Padding,
    Topk,
    Aggregator,
}

impl std::str::FromStr for SweepKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervision" => Ok(SweepKind::Supervision),
            "frames" => Ok(SweepKind::Frames),
            "padding" => Ok(SweepKind::Padding),
            "topk" => Ok(SweepKind::Topk),
            "aggregator" => Ok(SweepKind::Aggregator),
            other => Err(Error::InvalidConfig(format!("unknown sweep '{other}'"))),
        }
    }
}

impl std::fmt::Display for SweepKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SweepKind::Supervision => "supervision",
            SweepKind::Frames => "frames",
            SweepKind::Padding => "padding",
            SweepKind::Topk => "topk",
            SweepKind::Aggregator => "aggregator",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub sweep: String,
    pub value: String,
    pub seed: u64,
    pub constructor_psnr: f64,
    pub constructor_ssim: f64,
    pub dew_psnr: f64,
    pub dew_ssim: f64,
}

fn mean_metrics(records: &[MetricsRecord]) -> (f64, f64) {
    let n = records.len() as f64;
    (
        records.iter().map(|r| r.psnr_db).sum::<f64>() / n,
        records.iter().map(|r| r.ssim).sum::<f64>() / n,
    )
}

/// Train constructor + De-W for one configuration and evaluate both against
/// the aligned oracle on the held-out scenes.
fn run_cell(
    train_scenes: &[SceneData],
    eval_dir: &Path,
    cfg: &TrainConfig,
    work_dir: &Path,
) -> Result<(f64, f64, f64, f64)> {
    let mut ccfg = *cfg;
    ccfg.stage = Stage::Csaclc;
    let constructor = train_constructor(train_scenes, &ccfg, work_dir)?;
    let mut dcfg = *cfg;
    dcfg.stage = Stage::Dew;
    let dew = train_dew(
        train_scenes,
        Some(&constructor.checkpoint),
        &dcfg,
        work_dir,
    )?;
    let c_records = evaluate(&constructor.checkpoint, eval_dir, Against::Oracle)?;
    let d_records = evaluate(&dew.checkpoint, eval_dir, Against::Oracle)?;
    let (cp, cs) = mean_metrics(&c_records);
    let (dp, ds) = mean_metrics(&d_records);
    Ok((cp, cs, dp, ds))
}

/// Run one ablation sweep with a shared seed. Grids:
/// supervision {original, pseudo, joint}, frames {1, 3, 5} (n in {0, 1, 2}),
/// padding {0, 1, 3}, top-K {1, 2, 3}, aggregator {gat, mean}.
pub fn ablate(
    sweep: SweepKind,
    base_cfg: &TrainConfig,
    train_dir: &Path,
    eval_dir: &Path,
    out_dir: &Path,
) -> Result<PathBuf> {
    let train_scenes = load_dataset(train_dir)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rows: Vec<AblationRow> = Vec::new();
    let mut push_row = |value: String, metrics: (f64, f64, f64, f64)| {
        rows.push(AblationRow {
            sweep: sweep.to_string(),
            value,
            seed: base_cfg.seed,
            constructor_psnr: metrics.0,
            constructor_ssim: metrics.1,
            dew_psnr: metrics.2,
            dew_ssim: metrics.3,
        });
    };

    match sweep {
        SweepKind::Supervision => {
            // One shared constructor; the supervision setting only changes
            // the de-weathering stage.
            let mut ccfg = *base_cfg;
            ccfg.stage = Stage::Csaclc;
            let work = out_dir.join("cells").join("supervision_shared");
            std::fs::create_dir_all(&work).map_err(|e| Error::io(&work, e))?;
            let constructor = train_constructor(&train_scenes, &ccfg, &work)?;
            let c_records = evaluate(&constructor.checkpoint, eval_dir, Against::Oracle)?;
            let (cp, cs) = mean_metrics(&c_records);
            for supervision in [Supervision::Original, Supervision::Pseudo, Supervision::Joint] {
                let name = match supervision {
                    Supervision::Original => "original",
                    Supervision::Pseudo => "pseudo",
                    Supervision::Joint => "joint",
                };
                let cell = out_dir.join("cells").join(format!("supervision_{name}"));
                std::fs::create_dir_all(&cell).map_err(|e| Error::io(&cell, e))?;
                let mut dcfg = *base_cfg;
                dcfg.stage = Stage::Dew;
                dcfg.supervision = supervision;
                let ckpt = if supervision == Supervision::Original {
                    None
                } else {
                    Some(constructor.checkpoint.as_path())
                };
                let dew = train_dew(&train_scenes, ckpt, &dcfg, &cell)?;
                let d_records = evaluate(&dew.checkpoint, eval_dir, Against::Oracle)?;
                let (dp, ds) = mean_metrics(&d_records);
                push_row(name.to_string(), (cp, cs, dp, ds));
            }
        }
        SweepKind::Frames => {
            for n in [0usize, 1, 2] {
                let cell = out_dir.join("cells").join(format!("frames_{}", 2 * n + 1));
                std::fs::create_dir_all(&cell).map_err(|e| Error::io(&cell, e))?;
                let mut cfg = *base_cfg;
                cfg.frames_n = n;
                cfg.match_cfg.n = n;
                let metrics = run_cell(&train_scenes, eval_dir, &cfg, &cell)?;
                push_row((2 * n + 1).to_string(), metrics);
            }
        }
        SweepKind::Padding => {
            for padding in [0usize, 1, 3] {
                let cell = out_dir.join("cells").join(format!("padding_{padding}"));
                std::fs::create_dir_all(&cell).map_err(|e| Error::io(&cell, e))?;
                let mut cfg = *base_cfg;
                cfg.match_cfg.padding = padding;
                let metrics = run_cell(&train_scenes, eval_dir, &cfg, &cell)?;
                push_row(padding.to_string(), metrics);
            }
        }
        SweepKind::Topk => {
            for k in [1usize, 2, 3] {
                let cell = out_dir.join("cells").join(format!("topk_{k}"));
                std::fs::create_dir_all(&cell).map_err(|e| Error::io(&cell, e))?;
                let mut cfg = *base_cfg;
                cfg.match_cfg.k = k;
                let metrics = run_cell(&train_scenes, eval_dir, &cfg, &cell)?;
                push_row(k.to_string(), metrics);
            }
        }
        SweepKind::Aggregator => {
            for kind in ["gat", "mean"] {
                let cell = out_dir.join("cells").join(format!("aggregator_{kind}"));
                std::fs::create_dir_all(&cell).map_err(|e| Error::io(&cell, e))?;
                let mut ccfg = *base_cfg;
                ccfg.stage = Stage::Csaclc;
                // Aggregator choice is wired through the constructor init.
                let agg = if kind == "gat" {
                    crate::models::AggregatorKind::Gat
                } else {
                    crate::models::AggregatorKind::Mean
                };
                let constructor =
                    train_constructor_with_aggregator(&train_scenes, &ccfg, &cell, agg)?;
                let mut dcfg = *base_cfg;
                dcfg.stage = Stage::Dew;
                let dew = train_dew(&train_scenes, Some(&constructor.checkpoint), &dcfg, &cell)?;
                let c_records = evaluate(&constructor.checkpoint, eval_dir, Against::Oracle)?;
                let d_records = evaluate(&dew.checkpoint, eval_dir, Against::Oracle)?;
                let (cp, cs) = mean_metrics(&c_records);
                let (dp, ds) = mean_metrics(&d_records);
                push_row(kind.to_string(), (cp, cs, dp, ds));
            }
        }
    }

    let csv_path = out_dir.join(format!("ablate_{sweep}.csv"));
    let mut out = String::from(
        "sweep,value,seed,constructor_psnr,constructor_ssim,dew_psnr,dew_ssim\n",
    );
    for r in &rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.sweep, r.value, r.seed, r.constructor_psnr, r.constructor_ssim, r.dew_psnr, r.dew_ssim
        ));
    }
    std::fs::write(&csv_path, out).map_err(|e| Error::io(&csv_path, e))?;
    Ok(csv_path)
}

use crate::training::TrainOutcome;

/// `train_constructor` variant that overrides the CSA aggregator.
pub fn train_constructor_with_aggregator(
    scenes: &[SceneData],
    cfg: &TrainConfig,
    out_dir: &Path,
    aggregator: crate::models::AggregatorKind,
) -> Result<TrainOutcome> {
    crate::training::train_constructor_impl(scenes, cfg, out_dir, Some(aggregator))
}
