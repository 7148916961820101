//! Encoder-decoder networks: the multi-encoder pseudo-label constructor
//! (CLC), its cross-frame-aggregation variant (CSA-CLC, shared encoder plus
//! GAT aggregation and GT-feature concatenation), and the single-frame
//! de-weathering model exposing its bottleneck for distillation.
//!
//! Skip connections are concatenations (canonical U-Net); in the
//! multi-frame constructors the decoder takes its skips from the center
//! frame's encoder pass, which keeps the output spatially tied to the frame
//! being labeled.

use crate::error::{Error, Result};
use crate::fcm::{build_graph, MatchConfig};
use crate::graph_agg::{csa_forward, mean_aggregate_baseline, GatLayerParams};
use crate::losses::ImageEncoder;
use crate::tensor::Tensor;
use ndarray::{Array1, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Batch,
    None,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    pub base_channels: usize,
    /// Downsampling stages; the bottleneck sits at H / 2^depth.
    pub depth: usize,
    pub resblocks_per_stage: usize,
    pub norm: NormKind,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            base_channels: 16,
            depth: 2,
            resblocks_per_stage: 1,
            norm: NormKind::Batch,
        }
    }
}

impl BackboneConfig {
    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << self.depth
    }

    /// The bottleneck spatial dims must be divisible by the matching patch
    /// size for the fold in the CSA block to be exact.
    pub fn validate_geometry(&self, h: usize, w: usize, patch_size: usize) -> Result<()> {
        let f = 1usize << self.depth;
        if h % f != 0 || w % f != 0 {
            return Err(Error::InvalidGeometry(format!(
                "input {h}x{w} not divisible by 2^depth = {f}"
            )));
        }
        let (bh, bw) = (h / f, w / f);
        if bh % patch_size != 0 || bw % patch_size != 0 {
            return Err(Error::InvalidGeometry(format!(
                "bottleneck {bh}x{bw} not divisible by patch size {patch_size}"
            )));
        }
        Ok(())
    }
}

/// Map on-disk [0, 1] images into the model's [-1, 1] range.
pub fn to_model_range(t: &Tensor) -> Tensor {
    t.mul_scalar(2.0).add_scalar(-1.0)
}

/// Map model outputs back to [0, 1].
pub fn from_model_range(t: &Tensor) -> Tensor {
    t.add_scalar(1.0).mul_scalar(0.5)
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

fn he_conv(cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng, trainable: bool) -> (Tensor, Tensor) {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    let mut w = Array4::<f64>::zeros((cout, cin, k, k));
    for v in w.iter_mut() {
        *v = normal.sample(rng);
    }
    let b = Array1::<f64>::zeros(cout);
    if trainable {
        (Tensor::param(w.into_dyn()), Tensor::param(b.into_dyn()))
    } else {
        (Tensor::constant(w.into_dyn()), Tensor::constant(b.into_dyn()))
    }
}

struct Conv2d {
    w: Tensor,
    b: Tensor,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    fn new(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng, trainable: bool) -> Conv2d {
        let (w, b) = he_conv(cin, cout, k, rng, trainable);
        Conv2d {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        x.conv2d(&self.w, &self.b, self.stride, self.pad)
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

struct BatchNorm2d {
    gamma: Tensor,
    beta: Tensor,
    running_mean: RefCell<Array1<f64>>,
    running_var: RefCell<Array1<f64>>,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    fn new(c: usize, trainable: bool) -> BatchNorm2d {
        let gamma = Array1::<f64>::ones(c).into_dyn();
        let beta = Array1::<f64>::zeros(c).into_dyn();
        BatchNorm2d {
            gamma: if trainable { Tensor::param(gamma) } else { Tensor::constant(gamma) },
            beta: if trainable { Tensor::param(beta) } else { Tensor::constant(beta) },
            running_mean: RefCell::new(Array1::zeros(c)),
            running_var: RefCell::new(Array1::ones(c)),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn forward(&self, x: &Tensor, training: bool) -> Tensor {
        if training {
            let (y, mean, var) = x.batch_norm_train(&self.gamma, &self.beta, self.eps);
            let mut rm = self.running_mean.borrow_mut();
            let mut rv = self.running_var.borrow_mut();
            ndarray::Zip::from(&mut *rm).and(&mean).for_each(|r, &m| {
                *r = (1.0 - self.momentum) * *r + self.momentum * m;
            });
            ndarray::Zip::from(&mut *rv).and(&var).for_each(|r, &v| {
                *r = (1.0 - self.momentum) * *r + self.momentum * v;
            });
            y
        } else {
            x.batch_norm_eval(
                &self.gamma,
                &self.beta,
                &self.running_mean.borrow(),
                &self.running_var.borrow(),
                self.eps,
            )
        }
    }
}

enum Norm {
    Batch(BatchNorm2d),
    None,
}

impl Norm {
    fn new(kind: NormKind, c: usize, trainable: bool) -> Norm {
        match kind {
            NormKind::Batch => Norm::Batch(BatchNorm2d::new(c, trainable)),
            NormKind::None => Norm::None,
        }
    }

    fn forward(&self, x: &Tensor, training: bool) -> Tensor {
        match self {
            Norm::Batch(bn) => bn.forward(x, training),
            Norm::None => x.clone(),
        }
    }

    fn collect(&self, prefix: &str, params: &mut Vec<(String, Tensor)>) {
        if let Norm::Batch(bn) = self {
            params.push((format!("{prefix}.gamma"), bn.gamma.clone()));
            params.push((format!("{prefix}.beta"), bn.beta.clone()));
        }
    }

    fn collect_stats(&self, prefix: &str, out: &mut Vec<(String, Vec<f64>)>) {
        if let Norm::Batch(bn) = self {
            out.push((format!("{prefix}.running_mean"), bn.running_mean.borrow().to_vec()));
            out.push((format!("{prefix}.running_var"), bn.running_var.borrow().to_vec()));
        }
    }

    fn restore_stats(&self, prefix: &str, stats: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        if let Norm::Batch(bn) = self {
            for (key, cell) in [
                (format!("{prefix}.running_mean"), &bn.running_mean),
                (format!("{prefix}.running_var"), &bn.running_var),
            ] {
                let data = stats.get(&key).ok_or_else(|| {
                    Error::InvalidInput(format!("checkpoint missing stat '{key}'"))
                })?;
                *cell.borrow_mut() = Array1::from_vec(data.clone());
            }
        }
        Ok(())
    }
}

/// conv -> norm -> ReLU
struct ConvBlock {
    conv: Conv2d,
    norm: Norm,
}

impl ConvBlock {
    fn new(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        norm: NormKind,
        rng: &mut ChaCha8Rng,
        trainable: bool,
    ) -> ConvBlock {
        ConvBlock {
            conv: Conv2d::new(cin, cout, k, stride, rng, trainable),
            norm: Norm::new(norm, cout, trainable),
        }
    }

    fn forward(&self, x: &Tensor, training: bool) -> Tensor {
        self.norm.forward(&self.conv.forward(x), training).relu()
    }
}

struct ResBlock {
    c1: Conv2d,
    n1: Norm,
    c2: Conv2d,
    n2: Norm,
}

impl ResBlock {
    fn new(c: usize, norm: NormKind, rng: &mut ChaCha8Rng, trainable: bool) -> ResBlock {
        ResBlock {
            c1: Conv2d::new(c, c, 3, 1, rng, trainable),
            n1: Norm::new(norm, c, trainable),
            c2: Conv2d::new(c, c, 3, 1, rng, trainable),
            n2: Norm::new(norm, c, trainable),
        }
    }

    fn forward(&self, x: &Tensor, training: bool) -> Tensor {
        let h = self.n1.forward(&self.c1.forward(x), training).relu();
        let h = self.n2.forward(&self.c2.forward(&h), training);
        x.add(&h).relu()
    }
}

// ---------------------------------------------------------------------------
// Encoder / decoder
// ---------------------------------------------------------------------------

struct EncStage {
    res: Vec<ResBlock>,
    down: ConvBlock,
}

pub(crate) struct Encoder {
    stem: ConvBlock,
    stages: Vec<EncStage>,
    bottleneck: Vec<ResBlock>,
}

impl Encoder {
    fn new(cfg: &BackboneConfig, rng: &mut ChaCha8Rng, trainable: bool) -> Encoder {
        let stem = ConvBlock::new(3, cfg.base_channels, 3, 1, cfg.norm, rng, trainable);
        let mut stages = Vec::new();
        let mut ch = cfg.base_channels;
        for _ in 0..cfg.depth {
            let res = (0..cfg.resblocks_per_stage)
                .map(|_| ResBlock::new(ch, cfg.norm, rng, trainable))
                .collect();
            let down = ConvBlock::new(ch, ch * 2, 3, 2, cfg.norm, rng, trainable);
            stages.push(EncStage { res, down });
            ch *= 2;
        }
        let bottleneck = (0..cfg.resblocks_per_stage)
            .map(|_| ResBlock::new(ch, cfg.norm, rng, trainable))
            .collect();
        Encoder {
            stem,
            stages,
            bottleneck,
        }
    }

    /// Returns (bottleneck feature, per-stage skip features before each
    /// downsample).
    fn forward(&self, x: &Tensor, training: bool) -> (Tensor, Vec<Tensor>) {
        let mut h = self.stem.forward(x, training);
        let mut skips = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for r in &stage.res {
                h = r.forward(&h, training);
            }
            skips.push(h.clone());
            h = stage.down.forward(&h, training);
        }
        for r in &self.bottleneck {
            h = r.forward(&h, training);
        }
        (h, skips)
    }
}

struct UpStage {
    up: ConvBlock,
    fuse: ConvBlock,
    res: Vec<ResBlock>,
}

pub(crate) struct Decoder {
    ups: Vec<UpStage>,
    final_conv: Conv2d,
    cfg: BackboneConfig,
}

impl Decoder {
    fn new(cfg: &BackboneConfig, rng: &mut ChaCha8Rng, trainable: bool) -> Decoder {
        let mut ups = Vec::new();
        let mut ch = cfg.bottleneck_channels();
        for _ in 0..cfg.depth {
            let up = ConvBlock::new(ch, ch / 2, 3, 1, cfg.norm, rng, trainable);
            let fuse = ConvBlock::new(ch, ch / 2, 3, 1, cfg.norm, rng, trainable);
            let res = (0..cfg.resblocks_per_stage)
                .map(|_| ResBlock::new(ch / 2, cfg.norm, rng, trainable))
                .collect();
            ups.push(UpStage { up, fuse, res });
            ch /= 2;
        }
        let final_conv = Conv2d::new(cfg.base_channels, 3, 3, 1, rng, trainable);
        Decoder {
            ups,
            final_conv,
            cfg: *cfg,
        }
    }

    fn forward(&self, bottleneck: &Tensor, skips: &[Tensor], training: bool) -> Tensor {
        assert_eq!(skips.len(), self.cfg.depth, "skip count mismatch");
        let mut h = bottleneck.clone();
        for (i, stage) in self.ups.iter().enumerate() {
            let skip = &skips[self.cfg.depth - 1 - i];
            h = stage.up.forward(&h.upsample_nearest2(), training);
            h = Tensor::concat(&[h, skip.clone()], 1);
            h = stage.fuse.forward(&h, training);
            for r in &stage.res {
                h = r.forward(&h, training);
            }
        }
        self.final_conv.forward(&h).tanh()
    }
}

// Parameter collection walks modules in a fixed order so checkpoints and
// optimizers see a stable naming scheme.
fn collect_block(prefix: &str, b: &ConvBlock, params: &mut Vec<(String, Tensor)>) {
    b.conv.collect(&format!("{prefix}.conv"), params);
    b.norm.collect(&format!("{prefix}.norm"), params);
}

fn collect_res(prefix: &str, r: &ResBlock, params: &mut Vec<(String, Tensor)>) {
    r.c1.collect(&format!("{prefix}.c1"), params);
    r.n1.collect(&format!("{prefix}.n1"), params);
    r.c2.collect(&format!("{prefix}.c2"), params);
    r.n2.collect(&format!("{prefix}.n2"), params);
}

fn collect_encoder(prefix: &str, e: &Encoder, params: &mut Vec<(String, Tensor)>) {
    collect_block(&format!("{prefix}.stem"), &e.stem, params);
    for (i, st) in e.stages.iter().enumerate() {
        for (j, r) in st.res.iter().enumerate() {
            collect_res(&format!("{prefix}.s{i}.res{j}"), r, params);
        }
        collect_block(&format!("{prefix}.s{i}.down"), &st.down, params);
    }
    for (j, r) in e.bottleneck.iter().enumerate() {
        collect_res(&format!("{prefix}.mid{j}"), r, params);
    }
}

fn collect_decoder(prefix: &str, d: &Decoder, params: &mut Vec<(String, Tensor)>) {
    for (i, st) in d.ups.iter().enumerate() {
        collect_block(&format!("{prefix}.u{i}.up"), &st.up, params);
        collect_block(&format!("{prefix}.u{i}.fuse"), &st.fuse, params);
        for (j, r) in st.res.iter().enumerate() {
            collect_res(&format!("{prefix}.u{i}.res{j}"), r, params);
        }
    }
    d.final_conv.collect(&format!("{prefix}.final"), params);
}

fn stats_block(prefix: &str, b: &ConvBlock, out: &mut Vec<(String, Vec<f64>)>) {
    b.norm.collect_stats(&format!("{prefix}.norm"), out);
}

fn stats_res(prefix: &str, r: &ResBlock, out: &mut Vec<(String, Vec<f64>)>) {
    r.n1.collect_stats(&format!("{prefix}.n1"), out);
    r.n2.collect_stats(&format!("{prefix}.n2"), out);
}

fn stats_encoder(prefix: &str, e: &Encoder, out: &mut Vec<(String, Vec<f64>)>) {
    stats_block(&format!("{prefix}.stem"), &e.stem, out);
    for (i, st) in e.stages.iter().enumerate() {
        for (j, r) in st.res.iter().enumerate() {
            stats_res(&format!("{prefix}.s{i}.res{j}"), r, out);
        }
        stats_block(&format!("{prefix}.s{i}.down"), &st.down, out);
    }
    for (j, r) in e.bottleneck.iter().enumerate() {
        stats_res(&format!("{prefix}.mid{j}"), r, out);
    }
}

fn stats_decoder(prefix: &str, d: &Decoder, out: &mut Vec<(String, Vec<f64>)>) {
    for (i, st) in d.ups.iter().enumerate() {
        stats_block(&format!("{prefix}.u{i}.up"), &st.up, out);
        stats_block(&format!("{prefix}.u{i}.fuse"), &st.fuse, out);
        for (j, r) in st.res.iter().enumerate() {
            stats_res(&format!("{prefix}.u{i}.res{j}"), r, out);
        }
    }
}

fn restore_stats_block(prefix: &str, b: &ConvBlock, stats: &BTreeMap<String, Vec<f64>>) -> Result<()> {
    b.norm.restore_stats(&format!("{prefix}.norm"), stats)
}

fn restore_stats_res(prefix: &str, r: &ResBlock, stats: &BTreeMap<String, Vec<f64>>) -> Result<()> {
    r.n1.restore_stats(&format!("{prefix}.n1"), stats)?;
    r.n2.restore_stats(&format!("{prefix}.n2"), stats)
}

fn restore_stats_encoder(prefix: &str, e: &Encoder, stats: &BTreeMap<String, Vec<f64>>) -> Result<()> {
    restore_stats_block(&format!("{prefix}.stem"), &e.stem, stats)?;
    for (i, st) in e.stages.iter().enumerate() {
        for (j, r) in st.res.iter().enumerate() {
            restore_stats_res(&format!("{prefix}.s{i}.res{j}"), r, stats)?;
        }
        restore_stats_block(&format!("{prefix}.s{i}.down"), &st.down, stats)?;
    }
    for (j, r) in e.bottleneck.iter().enumerate() {
        restore_stats_res(&format!("{prefix}.mid{j}"), r, stats)?;
    }
    Ok(())
}

fn restore_stats_decoder(prefix: &str, d: &Decoder, stats: &BTreeMap<String, Vec<f64>>) -> Result<()> {
    for (i, st) in d.ups.iter().enumerate() {
        restore_stats_block(&format!("{prefix}.u{i}.up"), &st.up, stats)?;
        restore_stats_block(&format!("{prefix}.u{i}.fuse"), &st.fuse, stats)?;
        for (j, r) in st.res.iter().enumerate() {
            restore_stats_res(&format!("{prefix}.u{i}.res{j}"), r, stats)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// De-weathering model
// ---------------------------------------------------------------------------

pub struct DewOutput {
    /// Restored image in [-1, 1].
    pub restored: Tensor,
    /// Bottleneck feature (G_t), the distillation site.
    pub bottleneck: Tensor,
}

pub struct DewModel {
    enc: Encoder,
    dec: Decoder,
    pub cfg: BackboneConfig,
}

impl DewModel {
    pub fn init(cfg: &BackboneConfig, seed: u64) -> DewModel {
        Self::build(cfg, seed, true)
    }

    fn build(cfg: &BackboneConfig, seed: u64, trainable: bool) -> DewModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4445_5721); // "DEW!"
        DewModel {
            enc: Encoder::new(cfg, &mut rng, trainable),
            dec: Decoder::new(cfg, &mut rng, trainable),
            cfg: *cfg,
        }
    }

    /// `frame` is a batch (B, 3, H, W) in [-1, 1].
    pub fn forward(&self, frame: &Tensor, training: bool) -> DewOutput {
        let (bottleneck, skips) = self.enc.forward(frame, training);
        let restored = self.dec.forward(&bottleneck, &skips, training);
        DewOutput {
            restored,
            bottleneck,
        }
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        collect_encoder("enc", &self.enc, &mut out);
        collect_decoder("dec", &self.dec, &mut out);
        out
    }

    pub fn encoder_handle(&self, training: bool) -> DewEncoderHandle<'_> {
        DewEncoderHandle {
            model: self,
            training,
        }
    }
}

/// Flattened-bottleneck encoder view used by the Rain-Robust loss.
pub struct DewEncoderHandle<'a> {
    model: &'a DewModel,
    training: bool,
}

impl ImageEncoder for DewEncoderHandle<'_> {
    fn encode_batch(&self, imgs: &Tensor) -> Tensor {
        let (f, _) = self.model.enc.forward(imgs, self.training);
        let s = f.shape();
        f.reshape(&[s[0], s[1] * s[2] * s[3]])
    }
}

// ---------------------------------------------------------------------------
// CLC: one distinct encoder per frame
// ---------------------------------------------------------------------------

pub struct ClcModel {
    encs: Vec<Encoder>,
    fuse: Conv2d,
    dec: Decoder,
    pub cfg: BackboneConfig,
    pub n: usize,
}

impl ClcModel {
    pub fn init(cfg: &BackboneConfig, n: usize, seed: u64) -> ClcModel {
        Self::build(cfg, n, seed, true)
    }

    fn build(cfg: &BackboneConfig, n: usize, seed: u64, trainable: bool) -> ClcModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x434c_4321); // "CLC!"
        let frames = 2 * n + 1;
        let encs = (0..frames).map(|_| Encoder::new(cfg, &mut rng, trainable)).collect();
        let cb = cfg.bottleneck_channels();
        let fuse = Conv2d::new(cb * frames, cb, 1, 1, &mut rng, trainable);
        let dec = Decoder::new(cfg, &mut rng, trainable);
        ClcModel {
            encs,
            fuse,
            dec,
            cfg: *cfg,
            n,
        }
    }

    /// `frames` is a window of 2n+1 batches (each B x 3 x H x W, [-1, 1]).
    /// Produces the pseudo-label batch in [-1, 1].
    pub fn forward(&self, frames: &[Tensor], training: bool) -> Result<Tensor> {
        if frames.len() != self.encs.len() {
            return Err(Error::InvalidConfig(format!(
                "model built for {} frames, got {}",
                self.encs.len(),
                frames.len()
            )));
        }
        let mut bottlenecks = Vec::with_capacity(frames.len());
        let mut center_skips = None;
        for (i, (frame, enc)) in frames.iter().zip(self.encs.iter()).enumerate() {
            let (f, skips) = enc.forward(frame, training);
            bottlenecks.push(f);
            if i == self.n {
                center_skips = Some(skips);
            }
        }
        let fused = self.fuse.forward(&Tensor::concat(&bottlenecks, 1));
        Ok(self.dec.forward(&fused, &center_skips.unwrap(), training))
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, e) in self.encs.iter().enumerate() {
            collect_encoder(&format!("enc{i}"), e, &mut out);
        }
        self.fuse.collect("fuse", &mut out);
        collect_decoder("dec", &self.dec, &mut out);
        out
    }
}

// ---------------------------------------------------------------------------
// CSA-CLC: shared encoder, cross-frame aggregation, GT-feature concat
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregatorKind {
    Gat,
    Mean,
}

impl std::fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AggregatorKind::Gat => write!(f, "gat"),
            AggregatorKind::Mean => write!(f, "mean"),
        }
    }
}

pub struct CsaClcModel {
    enc: Encoder,
    gat: [GatLayerParams; 2],
    fuse: Conv2d,
    dec: Decoder,
    pub cfg: BackboneConfig,
    pub match_cfg: MatchConfig,
    pub aggregator: AggregatorKind,
}

pub struct CsaClcOutput {
    /// Pseudo-label batch in [-1, 1].
    pub pseudo: Tensor,
    /// Spatiotemporal aggregated bottleneck feature (B, C, h, w).
    pub f_agg: Tensor,
}

impl CsaClcModel {
    pub fn init(cfg: &BackboneConfig, match_cfg: &MatchConfig, seed: u64) -> CsaClcModel {
        Self::build(cfg, match_cfg, AggregatorKind::Gat, seed, true)
    }

    pub fn init_with_aggregator(
        cfg: &BackboneConfig,
        match_cfg: &MatchConfig,
        aggregator: AggregatorKind,
        seed: u64,
    ) -> CsaClcModel {
        Self::build(cfg, match_cfg, aggregator, seed, true)
    }

    fn build(
        cfg: &BackboneConfig,
        match_cfg: &MatchConfig,
        aggregator: AggregatorKind,
        seed: u64,
        trainable: bool,
    ) -> CsaClcModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4353_4121); // "CSA!"
        let enc = Encoder::new(cfg, &mut rng, trainable);
        let d = cfg.bottleneck_channels() * match_cfg.s * match_cfg.s;
        let mk_gat = |seed: u64, trainable: bool| {
            let l = GatLayerParams::init(d, d, seed);
            if trainable {
                l
            } else {
                GatLayerParams {
                    w: l.w.detach(),
                    a: l.a.detach(),
                    negative_slope: l.negative_slope,
                    activation: l.activation,
                }
            }
        };
        let gat = [
            mk_gat(seed ^ 0x6761_7431, trainable),
            mk_gat(seed ^ 0x6761_7432, trainable),
        ];
        let cb = cfg.bottleneck_channels();
        let fuse = Conv2d::new(2 * cb, cb, 1, 1, &mut rng, trainable);
        let dec = Decoder::new(cfg, &mut rng, trainable);
        CsaClcModel {
            enc,
            gat,
            fuse,
            dec,
            cfg: *cfg,
            match_cfg: *match_cfg,
            aggregator,
        }
    }

    /// Shared-encoder forward over the frame window plus the (misaligned)
    /// label, cross-frame aggregation at the bottleneck, GT-feature concat,
    /// and decode. `frames.len()` must be 2 * match_cfg.n + 1.
    pub fn forward(&self, frames: &[Tensor], gt: &Tensor, training: bool) -> Result<CsaClcOutput> {
        if frames.len() != 2 * self.match_cfg.n + 1 {
            return Err(Error::InvalidConfig(format!(
                "expected {} frames, got {}",
                2 * self.match_cfg.n + 1,
                frames.len()
            )));
        }
        let shape = frames[0].shape();
        if gt.shape() != shape {
            return Err(Error::InvalidGeometry(
                "gt and frames must share shape".into(),
            ));
        }
        self.cfg
            .validate_geometry(shape[2], shape[3], self.match_cfg.s)?;
        let batch = shape[0];
        let center = self.match_cfg.n;

        let mut feats = Vec::with_capacity(frames.len());
        let mut center_skips = None;
        for (i, frame) in frames.iter().enumerate() {
            let (f, skips) = self.enc.forward(frame, training);
            feats.push(f);
            if i == center {
                center_skips = Some(skips);
            }
        }
        let (f_gt, _) = self.enc.forward(gt, training);

        // Cross-frame aggregation per sample.
        let mut agg_samples = Vec::with_capacity(batch);
        for b in 0..batch {
            let per_frame: Vec<Tensor> = feats.iter().map(|f| f.select_batch(b)).collect();
            let graph = build_graph(&per_frame, &self.match_cfg)?;
            let f_t = &per_frame[center];
            let agg = match self.aggregator {
                AggregatorKind::Gat => csa_forward(f_t, &graph, &self.gat)?,
                AggregatorKind::Mean => mean_aggregate_baseline(f_t, &graph)?,
            };
            agg_samples.push(agg.f_agg);
        }
        let f_agg = Tensor::stack(&agg_samples);
        let fused = self.fuse.forward(&Tensor::concat(&[f_agg.clone(), f_gt], 1));
        let pseudo = self.dec.forward(&fused, &center_skips.unwrap(), training);
        Ok(CsaClcOutput { pseudo, f_agg })
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        collect_encoder("enc", &self.enc, &mut out);
        if self.aggregator == AggregatorKind::Gat {
            out.push(("gat0.w".into(), self.gat[0].w.clone()));
            out.push(("gat0.a".into(), self.gat[0].a.clone()));
            out.push(("gat1.w".into(), self.gat[1].w.clone()));
            out.push(("gat1.a".into(), self.gat[1].a.clone()));
        }
        self.fuse.collect("fuse", &mut out);
        collect_decoder("dec", &self.dec, &mut out);
        out
    }

    pub fn encoder_handle(&self, training: bool) -> CsaEncoderHandle<'_> {
        CsaEncoderHandle {
            model: self,
            training,
        }
    }
}

/// Flattened-bottleneck view of the shared CSA-CLC encoder.
pub struct CsaEncoderHandle<'a> {
    model: &'a CsaClcModel,
    training: bool,
}

impl ImageEncoder for CsaEncoderHandle<'_> {
    fn encode_batch(&self, imgs: &Tensor) -> Tensor {
        let (f, _) = self.model.enc.forward(imgs, self.training);
        let s = f.shape();
        f.reshape(&[s[0], s[1] * s[2] * s[3]])
    }
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

#[derive(serde::Serialize, serde::Deserialize)]
pub struct ParamData {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Self-describing checkpoint: named parameter arrays plus the configs
/// needed to rebuild the owning model.
#[derive(serde::Serialize, serde::Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub stage: String,
    pub backbone: BackboneConfig,
    pub match_cfg: Option<MatchConfig>,
    pub aggregator: Option<AggregatorKind>,
    pub frames_n: usize,
    pub params: BTreeMap<String, ParamData>,
    pub stats: BTreeMap<String, Vec<f64>>,
}

pub const CHECKPOINT_FORMAT: &str = "deweather-ckpt-v1";

fn params_to_map(params: &[(String, Tensor)]) -> BTreeMap<String, ParamData> {
    params
        .iter()
        .map(|(name, t)| {
            let v = t.to_array();
            (
                name.clone(),
                ParamData {
                    shape: v.shape().to_vec(),
                    data: v.iter().cloned().collect(),
                },
            )
        })
        .collect()
}

fn load_params_into(params: &[(String, Tensor)], map: &BTreeMap<String, ParamData>) -> Result<()> {
    for (name, t) in params {
        let data = map
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("checkpoint missing param '{name}'")))?;
        if data.shape != t.shape() {
            return Err(Error::InvalidInput(format!(
                "param '{name}' shape {:?} != expected {:?}",
                data.shape,
                t.shape()
            )));
        }
        let arr = ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&data.shape), data.data.clone())
            .map_err(|e| Error::InvalidInput(format!("param '{name}': {e}")))?;
        t.set_value(arr);
    }
    Ok(())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let json = serde_json::to_string(ckpt)
        .map_err(|e| Error::Other(format!("checkpoint serialization failed: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&json)
        .map_err(|e| Error::InvalidInput(format!("bad checkpoint {}: {e}", path.display())))?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(Error::InvalidInput(format!(
            "unsupported checkpoint format '{}'",
            ckpt.format
        )));
    }
    Ok(ckpt)
}

impl DewModel {
    pub fn checkpoint(&self) -> Checkpoint {
        let mut stats = Vec::new();
        stats_encoder("enc", &self.enc, &mut stats);
        stats_decoder("dec", &self.dec, &mut stats);
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            stage: "dew".into(),
            backbone: self.cfg,
            match_cfg: None,
            aggregator: None,
            frames_n: 0,
            params: params_to_map(&self.params()),
            stats: stats.into_iter().collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, trainable: bool) -> Result<DewModel> {
        if ckpt.stage != "dew" {
            return Err(Error::InvalidConfig(format!(
                "checkpoint stage '{}' is not a de-weathering model",
                ckpt.stage
            )));
        }
        let model = DewModel::build(&ckpt.backbone, 0, trainable);
        load_params_into(&model.params(), &ckpt.params)?;
        restore_stats_encoder("enc", &model.enc, &ckpt.stats)?;
        restore_stats_decoder("dec", &model.dec, &ckpt.stats)?;
        Ok(model)
    }
}

impl ClcModel {
    pub fn checkpoint(&self) -> Checkpoint {
        let mut stats = Vec::new();
        for (i, e) in self.encs.iter().enumerate() {
            stats_encoder(&format!("enc{i}"), e, &mut stats);
        }
        stats_decoder("dec", &self.dec, &mut stats);
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            stage: "clc".into(),
            backbone: self.cfg,
            match_cfg: None,
            aggregator: None,
            frames_n: self.n,
            params: params_to_map(&self.params()),
            stats: stats.into_iter().collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, trainable: bool) -> Result<ClcModel> {
        if ckpt.stage != "clc" {
            return Err(Error::InvalidConfig(format!(
                "checkpoint stage '{}' is not a CLC model",
                ckpt.stage
            )));
        }
        let model = ClcModel::build(&ckpt.backbone, ckpt.frames_n, 0, trainable);
        load_params_into(&model.params(), &ckpt.params)?;
        for (i, e) in model.encs.iter().enumerate() {
            restore_stats_encoder(&format!("enc{i}"), e, &ckpt.stats)?;
        }
        restore_stats_decoder("dec", &model.dec, &ckpt.stats)?;
        Ok(model)
    }
}

impl CsaClcModel {
    pub fn checkpoint(&self) -> Checkpoint {
        let mut stats = Vec::new();
        stats_encoder("enc", &self.enc, &mut stats);
        stats_decoder("dec", &self.dec, &mut stats);
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            stage: "csaclc".into(),
            backbone: self.cfg,
            match_cfg: Some(self.match_cfg),
            aggregator: Some(self.aggregator),
            frames_n: self.match_cfg.n,
            params: params_to_map(&self.params()),
            stats: stats.into_iter().collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, trainable: bool) -> Result<CsaClcModel> {
        if ckpt.stage != "csaclc" {
            return Err(Error::InvalidConfig(format!(
                "checkpoint stage '{}' is not a CSA-CLC model",
                ckpt.stage
            )));
        }
        let match_cfg = ckpt.match_cfg.ok_or_else(|| {
            Error::InvalidInput("csaclc checkpoint missing match config".into())
        })?;
        let aggregator = ckpt.aggregator.unwrap_or(AggregatorKind::Gat);
        let model = CsaClcModel::build(&ckpt.backbone, &match_cfg, aggregator, 0, trainable);
        load_params_into(&model.params(), &ckpt.params)?;
        restore_stats_encoder("enc", &model.enc, &ckpt.stats)?;
        restore_stats_decoder("dec", &model.dec, &ckpt.stats)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::optim::Adam;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn small_cfg() -> BackboneConfig {
        BackboneConfig {
            base_channels: 4,
            depth: 2,
            resblocks_per_stage: 1,
            norm: NormKind::Batch,
        }
    }

    fn random_batch(b: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = Array4::<f64>::zeros((b, 3, h, w));
        for v in f.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        Tensor::constant(f.into_dyn())
    }

    #[test]
    fn dew_shapes_and_range() {
        let m = DewModel::init(&small_cfg(), 1);
        let x = random_batch(2, 16, 16, 2);
        let out = m.forward(&x, true);
        assert_eq!(out.restored.shape(), vec![2, 3, 16, 16]);
        assert_eq!(out.bottleneck.shape(), vec![2, 16, 4, 4]);
        for v in out.restored.value().iter() {
            assert!(*v > -1.0 && *v < 1.0, "tanh output must be in (-1, 1)");
        }
    }

    #[test]
    fn clc_output_shape_and_sensitivity() {
        let m = ClcModel::init(&small_cfg(), 1, 3);
        let frames: Vec<Tensor> = (0..3).map(|i| random_batch(1, 16, 16, 10 + i)).collect();
        let out = m.forward(&frames, false).unwrap();
        assert_eq!(out.shape(), vec![1, 3, 16, 16]);

        // Perturbing frame t-1 must change the output: the encoders feed a
        // shared decoder.
        let mut bumped = frames[0].to_array();
        bumped[[0, 0, 8, 8]] += 0.5;
        let frames2 = vec![
            Tensor::constant(bumped),
            frames[1].clone(),
            frames[2].clone(),
        ];
        let out2 = m.forward(&frames2, false).unwrap();
        assert_ne!(out.to_array(), out2.to_array());
    }

    #[test]
    fn clc_zeroed_final_layer_outputs_zero() {
        let m = ClcModel::init(&small_cfg(), 1, 4);
        for (name, t) in m.params() {
            if name.starts_with("dec.final") {
                let dim = t.value().raw_dim();
                t.set_value(ndarray::ArrayD::zeros(dim));
            }
        }
        let frames: Vec<Tensor> = (0..3)
            .map(|_| Tensor::constant(Array4::<f64>::zeros((1, 3, 16, 16)).into_dyn()))
            .collect();
        let out = m.forward(&frames, false).unwrap();
        for v in out.value().iter() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn clc_frame_count_mismatch() {
        let m = ClcModel::init(&small_cfg(), 1, 5);
        let frames: Vec<Tensor> = (0..5).map(|i| random_batch(1, 16, 16, 20 + i)).collect();
        assert!(matches!(
            m.forward(&frames, false),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn csaclc_forward_shapes_and_determinism() {
        let mcfg = MatchConfig {
            s: 2,
            padding: 1,
            k: 2,
            n: 1,
        };
        let m = CsaClcModel::init(&small_cfg(), &mcfg, 6);
        let frames: Vec<Tensor> = (0..3).map(|i| random_batch(2, 16, 16, 30 + i)).collect();
        let gt = random_batch(2, 16, 16, 33);
        let out1 = m.forward(&frames, &gt, false).unwrap();
        assert_eq!(out1.pseudo.shape(), vec![2, 3, 16, 16]);
        assert_eq!(out1.f_agg.shape(), vec![2, 16, 4, 4]);
        let out2 = m.forward(&frames, &gt, false).unwrap();
        assert_eq!(out1.pseudo.to_array(), out2.pseudo.to_array());
    }

    #[test]
    fn csaclc_single_frame_self_matching() {
        let mcfg = MatchConfig {
            s: 2,
            padding: 1,
            k: 2,
            n: 0,
        };
        let m = CsaClcModel::init(&small_cfg(), &mcfg, 7);
        let frames = vec![random_batch(1, 16, 16, 40)];
        let gt = random_batch(1, 16, 16, 41);
        let out = m.forward(&frames, &gt, false).unwrap();
        assert_eq!(out.pseudo.shape(), vec![1, 3, 16, 16]);
    }

    #[test]
    fn csaclc_rejects_bad_geometry() {
        let mcfg = MatchConfig {
            s: 3,
            padding: 1,
            k: 2,
            n: 0,
        };
        // 16 / 4 = 4, not divisible by s = 3.
        let m = CsaClcModel::init(&small_cfg(), &mcfg, 8);
        let frames = vec![random_batch(1, 16, 16, 42)];
        let gt = random_batch(1, 16, 16, 43);
        assert!(matches!(
            m.forward(&frames, &gt, false),
            Err(Error::InvalidGeometry(_))
        ));
    }

    #[test]
    fn dew_bottleneck_matches_csaclc_f_agg_shape() {
        let cfg = small_cfg();
        let mcfg = MatchConfig {
            s: 2,
            padding: 1,
            k: 2,
            n: 1,
        };
        let dew = DewModel::init(&cfg, 9);
        let csa = CsaClcModel::init(&cfg, &mcfg, 10);
        let frames: Vec<Tensor> = (0..3).map(|i| random_batch(1, 16, 16, 50 + i)).collect();
        let gt = random_batch(1, 16, 16, 53);
        let csa_out = csa.forward(&frames, &gt, false).unwrap();
        let dew_out = dew.forward(&frames[1], false);
        assert_eq!(dew_out.bottleneck.shape(), csa_out.f_agg.shape());
    }

    #[test]
    fn parameter_count_deterministic_and_shared_encoder() {
        let cfg = small_cfg();
        let mcfg = MatchConfig {
            s: 2,
            padding: 1,
            k: 2,
            n: 1,
        };
        let m1 = CsaClcModel::init(&cfg, &mcfg, 11);
        let m2 = CsaClcModel::init(&cfg, &mcfg, 11);
        let p1 = m1.params();
        let p2 = m2.params();
        assert_eq!(p1.len(), p2.len());
        for ((n1, t1), (n2, t2)) in p1.iter().zip(p2.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.to_array(), t2.to_array());
        }
        // Shared encoder: exactly one "enc." family (the CLC variant would
        // carry enc0/enc1/enc2).
        assert!(p1.iter().any(|(n, _)| n.starts_with("enc.")));
        assert!(!p1.iter().any(|(n, _)| n.starts_with("enc0.")));
    }

    #[test]
    fn one_adam_step_reduces_l1_to_target() {
        // Learning-signal smoke test.
        let cfg = small_cfg();
        let m = DewModel::init(&cfg, 12);
        let x = random_batch(2, 16, 16, 60);
        let target = random_batch(2, 16, 16, 61);
        let params: Vec<Tensor> = m.params().into_iter().map(|(_, t)| t).collect();
        let mut opt = Adam::new(&params, 1e-3, 0.9, 0.999);
        let before = m.forward(&x, true).restored.l1_mean(&target).item();
        for _ in 0..3 {
            opt.zero_grad(&params);
            let loss = m.forward(&x, true).restored.l1_mean(&target);
            loss.backward();
            opt.step(&params);
        }
        let after = m.forward(&x, true).restored.l1_mean(&target).item();
        assert!(after < before, "L1 did not decrease: {before} -> {after}");
    }

    #[test]
    fn checkpoint_roundtrip_bitexact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let mcfg = MatchConfig {
            s: 2,
            padding: 1,
            k: 2,
            n: 1,
        };
        let m = CsaClcModel::init(&cfg, &mcfg, 13);
        let frames: Vec<Tensor> = (0..3).map(|i| random_batch(1, 16, 16, 70 + i)).collect();
        let gt = random_batch(1, 16, 16, 73);
        // run one training pass so BN stats move off their init
        let _ = m.forward(&frames, &gt, true).unwrap();
        let path = dir.path().join("csa.json");
        save_checkpoint(&m.checkpoint(), &path).unwrap();
        let loaded = CsaClcModel::from_checkpoint(&read_checkpoint(&path).unwrap(), false).unwrap();
        for ((n1, t1), (_, t2)) in m.params().iter().zip(loaded.params().iter()) {
            assert_eq!(t1.to_array(), t2.to_array(), "param {n1} differs");
        }
        // Frozen load: parameters are constants.
        assert!(loaded.params().iter().all(|(_, t)| !t.requires_grad()));
        let out1 = m.forward(&frames, &gt, false).unwrap();
        let out2 = loaded.forward(&frames, &gt, false).unwrap();
        assert_eq!(out1.pseudo.to_array(), out2.pseudo.to_array());
    }

    #[test]
    fn checkpoint_stage_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = DewModel::init(&small_cfg(), 14);
        let path = dir.path().join("dew.json");
        save_checkpoint(&m.checkpoint(), &path).unwrap();
        let ckpt = read_checkpoint(&path).unwrap();
        assert!(matches!(
            ClcModel::from_checkpoint(&ckpt, true),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn model_range_mapping_roundtrip() {
        let x = random_batch(1, 16, 16, 80);
        let back = from_model_range(&to_model_range(&x));
        for (a, b) in x.value().iter().zip(back.value().iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }
}
