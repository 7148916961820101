//! Synthetic time-multiplexed scenes with controllable weather degradation
//! and label inconsistencies. Every operation is a pure function of the
//! scene spec and an explicit RNG stream, so dataset bytes are reproducible
//! from the manifest seeds alone.

use crate::error::{Error, Result};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::path::Path;

/// Raster image, channels-first (3 x H x W), values in [0, 1] on disk and
/// in the data pipeline; models remap to [-1, 1] at ingress.
pub type Image = Array3<f64>;

/// Deterministic random stream handed to the degradation operators.
pub type RandomStream = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weather {
    Rain,
    Snow,
    Fog,
}

impl fmt::Display for Weather {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Weather::Rain => write!(f, "rain"),
            Weather::Snow => write!(f, "snow"),
            Weather::Fog => write!(f, "fog"),
        }
    }
}

impl std::str::FromStr for Weather {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rain" => Ok(Weather::Rain),
            "snow" => Ok(Weather::Snow),
            "fog" => Ok(Weather::Fog),
            other => Err(Error::InvalidConfig(format!("unknown weather '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inconsistency {
    ColorShift,
    IlluminationShift,
    ObjectMotion,
    SpatialJitter,
}

impl fmt::Display for Inconsistency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Inconsistency::ColorShift => "color_shift",
            Inconsistency::IlluminationShift => "illumination_shift",
            Inconsistency::ObjectMotion => "object_motion",
            Inconsistency::SpatialJitter => "spatial_jitter",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for Inconsistency {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "color_shift" => Ok(Inconsistency::ColorShift),
            "illumination_shift" => Ok(Inconsistency::IlluminationShift),
            "object_motion" => Ok(Inconsistency::ObjectMotion),
            "spatial_jitter" => Ok(Inconsistency::SpatialJitter),
            other => Err(Error::InvalidConfig(format!(
                "unknown inconsistency '{other}'"
            ))),
        }
    }
}

pub const ALL_INCONSISTENCIES: [Inconsistency; 4] = [
    Inconsistency::ColorShift,
    Inconsistency::IlluminationShift,
    Inconsistency::ObjectMotion,
    Inconsistency::SpatialJitter,
];

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SceneSpec {
    pub scene_id: String,
    /// (H, W) pixels.
    pub canvas: (usize, usize),
    pub num_frames: usize,
    pub weather: Weather,
    /// In [0, 1]; 0 disables the overlay entirely.
    pub weather_density: f64,
    pub inconsistency: Vec<Inconsistency>,
    pub rng_seed: u64,
}

impl SceneSpec {
    /// `patch_size` is the downstream feature-space patch size; the canvas
    /// must stay divisible by it.
    pub fn validate(&self, patch_size: usize) -> Result<()> {
        let (h, w) = self.canvas;
        if h < 16 || w < 16 {
            return Err(Error::InvalidConfig(format!(
                "canvas {h}x{w} below the 16 px minimum"
            )));
        }
        if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
            return Err(Error::InvalidConfig(format!(
                "canvas {h}x{w} not divisible by patch size {patch_size}"
            )));
        }
        if self.num_frames == 0 || self.num_frames % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "num_frames must be odd and >= 1, got {}",
                self.num_frames
            )));
        }
        if !(0.0..=1.0).contains(&self.weather_density) {
            return Err(Error::InvalidConfig(format!(
                "weather density {} outside [0, 1]",
                self.weather_density
            )));
        }
        Ok(())
    }

    pub fn center_frame(&self) -> usize {
        self.num_frames / 2
    }

    pub fn has(&self, kind: Inconsistency) -> bool {
        self.inconsistency.contains(&kind)
    }
}

/// One training sample: an ordered degraded frame window around time t, the
/// single misaligned clean label, and (synthetic-only) the perfectly aligned
/// clean oracle for evaluation.
#[derive(Debug, Clone)]
pub struct FrameWindow {
    pub frames: Vec<Image>,
    pub gt_misaligned: Image,
    pub gt_aligned_oracle: Image,
    pub timestamps: Vec<i64>,
}

// ---------------------------------------------------------------------------
// Procedural scene content
// ---------------------------------------------------------------------------

struct Disc {
    center: (f64, f64),
    radius: f64,
    color: [f64; 3],
}

struct Block {
    top_left: (f64, f64),
    size: (f64, f64),
    color: [f64; 3],
}

struct SceneLayout {
    sky_top: [f64; 3],
    sky_bottom: [f64; 3],
    ground_top: f64,
    ground_color: [f64; 3],
    ground_texture: Array2<f64>,
    blocks: Vec<Block>,
    discs: Vec<Disc>,
    mover: Disc,
    mover_velocity: (f64, f64),
}

fn layout_for(spec: &SceneSpec) -> SceneLayout {
    let (h, w) = spec.canvas;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed ^ 0x5343_454e); // "SCEN"
    let sky_top = [
        rng.random_range(0.35..0.6),
        rng.random_range(0.45..0.7),
        rng.random_range(0.6..0.9),
    ];
    let sky_bottom = [
        rng.random_range(0.6..0.85),
        rng.random_range(0.6..0.85),
        rng.random_range(0.7..0.95),
    ];
    let ground_top = rng.random_range(0.6..0.75);
    let ground_color = [
        rng.random_range(0.25..0.45),
        rng.random_range(0.3..0.5),
        rng.random_range(0.15..0.3),
    ];
    let mut ground_texture = Array2::<f64>::zeros((h, w));
    for v in ground_texture.iter_mut() {
        *v = rng.random_range(-0.06..0.06);
    }
    let n_blocks = rng.random_range(2..4usize);
    let mut blocks = Vec::new();
    for _ in 0..n_blocks {
        blocks.push(Block {
            top_left: (
                rng.random_range(0.2..0.6) * h as f64,
                rng.random_range(0.05..0.8) * w as f64,
            ),
            size: (
                rng.random_range(0.12..0.3) * h as f64,
                rng.random_range(0.1..0.25) * w as f64,
            ),
            color: [
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
            ],
        });
    }
    let n_discs = rng.random_range(1..3usize);
    let mut discs = Vec::new();
    for _ in 0..n_discs {
        discs.push(Disc {
            center: (
                rng.random_range(0.15..0.5) * h as f64,
                rng.random_range(0.1..0.9) * w as f64,
            ),
            radius: rng.random_range(0.05..0.12) * h as f64,
            color: [
                rng.random_range(0.2..1.0),
                rng.random_range(0.2..1.0),
                rng.random_range(0.2..1.0),
            ],
        });
    }
    // The mover exists in every layout; it only moves when object_motion is
    // enabled. Velocity is bounded so it stays on canvas over the window.
    let speed_cap = (h.min(w) as f64 * 0.04).max(1.0);
    let mover = Disc {
        center: (
            rng.random_range(0.35..0.55) * h as f64,
            rng.random_range(0.3..0.7) * w as f64,
        ),
        radius: rng.random_range(0.08..0.13) * h as f64,
        color: [
            rng.random_range(0.6..1.0),
            rng.random_range(0.1..0.4),
            rng.random_range(0.1..0.4),
        ],
    };
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let speed = rng.random_range(0.5..1.0) * speed_cap;
    let mover_velocity = (speed * angle.sin(), speed * angle.cos());
    SceneLayout {
        sky_top,
        sky_bottom,
        ground_top,
        ground_color,
        ground_texture,
        blocks,
        discs,
        mover,
        mover_velocity,
    }
}

fn paint_disc(img: &mut Image, disc: &Disc, offset: (f64, f64)) {
    let (_, h, w) = img.dim();
    let cy = disc.center.0 + offset.0;
    let cx = disc.center.1 + offset.1;
    let r = disc.radius;
    let y0 = ((cy - r).floor().max(0.0)) as usize;
    let y1 = ((cy + r).ceil().min(h as f64 - 1.0)) as usize;
    let x0 = ((cx - r).floor().max(0.0)) as usize;
    let x1 = ((cx + r).ceil().min(w as f64 - 1.0)) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            if dy * dy + dx * dx <= r * r {
                for c in 0..3 {
                    img[[c, y, x]] = disc.color[c];
                }
            }
        }
    }
}

/// Weather-free scene content at time `t`. Deterministic in (spec, t); the
/// moving object only moves when the spec carries `object_motion`, and sits
/// at its base position at the window center so the aligned oracle matches
/// the center frame exactly.
pub fn render_clean_scene(spec: &SceneSpec, t: usize) -> Image {
    assert!(t < spec.num_frames, "t out of range");
    let (h, w) = spec.canvas;
    let layout = layout_for(spec);
    let mut img = Image::zeros((3, h, w));
    let ground_row = (layout.ground_top * h as f64) as usize;
    for y in 0..h {
        let frac = y as f64 / (h - 1) as f64;
        for x in 0..w {
            if y < ground_row {
                for c in 0..3 {
                    img[[c, y, x]] =
                        layout.sky_top[c] * (1.0 - frac) + layout.sky_bottom[c] * frac;
                }
            } else {
                let tex = layout.ground_texture[[y, x]];
                for c in 0..3 {
                    img[[c, y, x]] = (layout.ground_color[c] + tex).clamp(0.0, 1.0);
                }
            }
        }
    }
    for block in &layout.blocks {
        let y0 = block.top_left.0.max(0.0) as usize;
        let x0 = block.top_left.1.max(0.0) as usize;
        let y1 = ((block.top_left.0 + block.size.0) as usize).min(h - 1);
        let x1 = ((block.top_left.1 + block.size.1) as usize).min(w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                for c in 0..3 {
                    img[[c, y, x]] = block.color[c];
                }
            }
        }
    }
    for disc in &layout.discs {
        paint_disc(&mut img, disc, (0.0, 0.0));
    }
    let offset = if spec.has(Inconsistency::ObjectMotion) {
        let dt = t as f64 - spec.center_frame() as f64;
        (layout.mover_velocity.0 * dt, layout.mover_velocity.1 * dt)
    } else {
        (0.0, 0.0)
    };
    paint_disc(&mut img, &layout.mover, offset);
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    img
}

// ---------------------------------------------------------------------------
// Weather overlays
// ---------------------------------------------------------------------------

/// Overlay weather degradation. `density = 0` returns the input unchanged.
pub fn apply_weather(img: &Image, weather: Weather, density: f64, rng: &mut RandomStream) -> Image {
    assert!((0.0..=1.0).contains(&density), "density outside [0, 1]");
    let mut out = img.clone();
    if density == 0.0 {
        return out;
    }
    let (_, h, w) = img.dim();
    match weather {
        Weather::Rain => {
            let count = (density * (h * w) as f64 / 28.0).round() as usize;
            for _ in 0..count {
                let y0 = rng.random_range(0.0..h as f64);
                let x0 = rng.random_range(0.0..w as f64);
                let len = rng.random_range(0.1..0.22) * h as f64;
                let angle: f64 = rng.random_range(1.15..1.45); // radians from horizontal
                let bright = rng.random_range(0.18..0.4);
                let steps = (len * 2.0) as usize;
                for i in 0..steps {
                    let u = i as f64 / 2.0;
                    let y = y0 + u * angle.sin();
                    let x = x0 + u * angle.cos();
                    if y < 0.0 || x < 0.0 {
                        continue;
                    }
                    let (yi, xi) = (y as usize, x as usize);
                    if yi >= h || xi >= w {
                        continue;
                    }
                    for c in 0..3 {
                        out[[c, yi, xi]] = (out[[c, yi, xi]] + bright).min(1.0);
                    }
                }
            }
        }
        Weather::Snow => {
            let count = (density * (h * w) as f64 / 20.0).round() as usize;
            for _ in 0..count {
                let cy = rng.random_range(0.0..h as f64);
                let cx = rng.random_range(0.0..w as f64);
                let r = rng.random_range(0.6..1.6);
                let bright = rng.random_range(0.5..0.95);
                let y0 = (cy - 2.0 * r).floor().max(0.0) as usize;
                let y1 = ((cy + 2.0 * r).ceil() as usize).min(h - 1);
                let x0 = (cx - 2.0 * r).floor().max(0.0) as usize;
                let x1 = ((cx + 2.0 * r).ceil() as usize).min(w - 1);
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        let a = bright * (-d2 / (2.0 * r * r)).exp();
                        for c in 0..3 {
                            out[[c, y, x]] = (out[[c, y, x]] * (1.0 - a) + a).min(1.0);
                        }
                    }
                }
            }
        }
        Weather::Fog => {
            for y in 0..h {
                let alpha = density * (0.4 + 0.3 * y as f64 / (h - 1) as f64);
                for x in 0..w {
                    for c in 0..3 {
                        out[[c, y, x]] = out[[c, y, x]] * (1.0 - alpha) + alpha;
                    }
                }
            }
        }
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

// ---------------------------------------------------------------------------
// Label inconsistencies
// ---------------------------------------------------------------------------

/// Translate with border replication.
fn shift_replicate(img: &Image, dy: isize, dx: isize) -> Image {
    let (c, h, w) = img.dim();
    let mut out = Image::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            let sy = (y as isize - dy).clamp(0, h as isize - 1) as usize;
            for x in 0..w {
                let sx = (x as isize - dx).clamp(0, w as isize - 1) as usize;
                out[[ch, y, x]] = img[[ch, sy, sx]];
            }
        }
    }
    out
}

/// Inject label-side inconsistencies. Magnitudes are bounded by the spec
/// contract (channel gains within [0.85, 1.15], global offset within
/// [-0.1, 0.1], translation <= 2 px) and are drawn away from the identity so
/// a non-empty kind set always produces a measurable change.
pub fn inject_inconsistency(
    img: &Image,
    kinds: &[Inconsistency],
    rng: &mut RandomStream,
) -> Image {
    let mut out = img.clone();
    let (_, h, w) = img.dim();
    if kinds.contains(&Inconsistency::ObjectMotion) {
        // Relocate a block of content: the label was captured at another
        // moment, so one object sits elsewhere.
        let bh = (h / 4).max(4);
        let bw = (w / 4).max(4);
        let sy = rng.random_range(0..h - bh);
        let sx = rng.random_range(0..w - bw);
        let mut dy;
        let mut dx;
        loop {
            dy = rng.random_range(-(bh as i64)..=bh as i64) as isize;
            dx = rng.random_range(-(bw as i64)..=bw as i64) as isize;
            if dy.unsigned_abs() >= 2 || dx.unsigned_abs() >= 2 {
                break;
            }
        }
        let ty = (sy as isize + dy).clamp(0, (h - bh) as isize) as usize;
        let tx = (sx as isize + dx).clamp(0, (w - bw) as isize) as usize;
        let patch: Vec<f64> = (0..3)
            .flat_map(|c| {
                (0..bh).flat_map(move |y| (0..bw).map(move |x| (c, y, x)))
            })
            .map(|(c, y, x)| out[[c, sy + y, sx + x]])
            .collect();
        let mut it = patch.iter();
        for c in 0..3 {
            for y in 0..bh {
                for x in 0..bw {
                    out[[c, ty + y, tx + x]] = *it.next().unwrap();
                }
            }
        }
    }
    if kinds.contains(&Inconsistency::SpatialJitter) {
        let mut dy;
        let mut dx;
        loop {
            dy = rng.random_range(-2i64..=2) as isize;
            dx = rng.random_range(-2i64..=2) as isize;
            if dy != 0 || dx != 0 {
                break;
            }
        }
        out = shift_replicate(&out, dy, dx);
    }
    if kinds.contains(&Inconsistency::ColorShift) {
        for c in 0..3 {
            let mag = rng.random_range(0.03..0.15);
            let factor = if rng.random_bool(0.5) { 1.0 + mag } else { 1.0 - mag };
            for y in 0..h {
                for x in 0..w {
                    out[[c, y, x]] *= factor;
                }
            }
        }
    }
    if kinds.contains(&Inconsistency::IlluminationShift) {
        let mag = rng.random_range(0.03..0.1);
        let offset = if rng.random_bool(0.5) { mag } else { -mag };
        out.mapv_inplace(|v| v + offset);
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

// ---------------------------------------------------------------------------
// Dataset generation and IO
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub scene_id: String,
    pub seed: u64,
    pub weather: Weather,
    pub inconsistencies: Vec<Inconsistency>,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

fn rng_for_frame(seed: u64, t: usize) -> RandomStream {
    ChaCha8Rng::seed_from_u64(seed ^ (0x4652_414d_u64.wrapping_add(t as u64 * 0x9e37_79b9)))
}

fn rng_for_gt(seed: u64) -> RandomStream {
    ChaCha8Rng::seed_from_u64(seed ^ 0x4754_4754)
}

/// Render the full frame stack plus both labels for one scene.
pub fn synthesize_scene(spec: &SceneSpec) -> (Vec<Image>, Image, Image) {
    let mut frames = Vec::with_capacity(spec.num_frames);
    for t in 0..spec.num_frames {
        let clean = render_clean_scene(spec, t);
        let mut rng = rng_for_frame(spec.rng_seed, t);
        frames.push(apply_weather(&clean, spec.weather, spec.weather_density, &mut rng));
    }
    let gt_aligned = render_clean_scene(spec, spec.center_frame());
    let mut gt_rng = rng_for_gt(spec.rng_seed);
    let gt = inject_inconsistency(&gt_aligned, &spec.inconsistency, &mut gt_rng);
    (frames, gt, gt_aligned)
}

/// Window of 2n+1 frames centered on the scene center (where the aligned
/// oracle is exact).
pub fn window_from_scene(
    frames: &[Image],
    gt: &Image,
    oracle: &Image,
    n: usize,
) -> Result<FrameWindow> {
    let center = frames.len() / 2;
    if n > center {
        return Err(Error::InvalidConfig(format!(
            "temporal radius {n} exceeds available frames ({})",
            frames.len()
        )));
    }
    let lo = center - n;
    let hi = center + n;
    Ok(FrameWindow {
        frames: frames[lo..=hi].to_vec(),
        gt_misaligned: gt.clone(),
        gt_aligned_oracle: oracle.clone(),
        timestamps: (lo as i64..=hi as i64).collect(),
    })
}

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let (_, h, w) = img.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (img[[0, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[[1, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[[2, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Image::zeros((3, h as usize, w as usize));
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x, y);
            for c in 0..3 {
                out[[c, y as usize, x as usize]] = px[c] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

fn inconsistencies_to_string(kinds: &[Inconsistency]) -> String {
    if kinds.is_empty() {
        return "none".into();
    }
    kinds
        .iter()
        .map(|k| k.to_string())
        .collect::<Vec<_>>()
        .join("|")
}

fn inconsistencies_from_string(s: &str) -> Result<Vec<Inconsistency>> {
    if s == "none" || s.is_empty() {
        return Ok(Vec::new());
    }
    s.split('|').map(|p| p.parse()).collect()
}

/// Write the on-disk layout:
/// `manifest.csv` plus `scenes/<scene_id>/{frames/NNN.png, gt.png, gt_aligned.png}`.
pub fn generate_dataset(
    specs: &[SceneSpec],
    out_dir: &Path,
    patch_size: usize,
) -> Result<DatasetManifest> {
    for spec in specs {
        spec.validate(patch_size)?;
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = DatasetManifest::default();
    for spec in specs {
        let scene_dir = out_dir.join("scenes").join(&spec.scene_id);
        let frames_dir = scene_dir.join("frames");
        std::fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
        let (frames, gt, oracle) = synthesize_scene(spec);
        for (t, frame) in frames.iter().enumerate() {
            save_image(frame, &frames_dir.join(format!("{t:03}.png")))?;
        }
        save_image(&gt, &scene_dir.join("gt.png"))?;
        save_image(&oracle, &scene_dir.join("gt_aligned.png"))?;
        manifest.entries.push(ManifestEntry {
            scene_id: spec.scene_id.clone(),
            seed: spec.rng_seed,
            weather: spec.weather,
            inconsistencies: spec.inconsistency.clone(),
            num_frames: spec.num_frames,
            height: spec.canvas.0,
            width: spec.canvas.1,
        });
    }
    write_manifest(&manifest, &out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| {
        Error::io(path, std::io::Error::other(e))
    })?;
    wtr.write_record(["scene_id", "seed", "weather", "inconsistencies", "num_frames", "H", "W"])
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    for e in &manifest.entries {
        wtr.write_record([
            e.scene_id.clone(),
            e.seed.to_string(),
            e.weather.to_string(),
            inconsistencies_to_string(&e.inconsistencies),
            e.num_frames.to_string(),
            e.height.to_string(),
            e.width.to_string(),
        ])
        .map_err(|err| Error::io(path, std::io::Error::other(err)))?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let mut entries = Vec::new();
    for record in rdr.records() {
        let r = record.map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        if r.len() != 7 {
            return Err(Error::InvalidInput(format!(
                "manifest row has {} fields, expected 7",
                r.len()
            )));
        }
        let parse_usize = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::InvalidInput(format!("bad integer '{s}' in manifest")))
        };
        entries.push(ManifestEntry {
            scene_id: r[0].to_string(),
            seed: r[1]
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad seed '{}'", &r[1])))?,
            weather: r[2].parse()?,
            inconsistencies: inconsistencies_from_string(&r[3])?,
            num_frames: parse_usize(&r[4])?,
            height: parse_usize(&r[5])?,
            width: parse_usize(&r[6])?,
        });
    }
    Ok(DatasetManifest { entries })
}

/// A scene loaded back from disk.
pub struct SceneData {
    pub entry: ManifestEntry,
    pub frames: Vec<Image>,
    pub gt: Image,
    pub gt_aligned: Image,
}

pub fn load_dataset(dir: &Path) -> Result<Vec<SceneData>> {
    let manifest = read_manifest(&dir.join("manifest.csv"))?;
    let mut scenes = Vec::with_capacity(manifest.entries.len());
    for entry in manifest.entries {
        let scene_dir = dir.join("scenes").join(&entry.scene_id);
        let mut frames = Vec::with_capacity(entry.num_frames);
        for t in 0..entry.num_frames {
            frames.push(load_image(&scene_dir.join("frames").join(format!("{t:03}.png")))?);
        }
        let gt = load_image(&scene_dir.join("gt.png"))?;
        let gt_aligned = load_image(&scene_dir.join("gt_aligned.png"))?;
        scenes.push(SceneData {
            entry,
            frames,
            gt,
            gt_aligned,
        });
    }
    Ok(scenes)
}

/// Mean absolute difference between two images.
pub fn mean_abs_diff(a: &Image, b: &Image) -> f64 {
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        total += (x - y).abs();
    }
    total / a.len() as f64
}
