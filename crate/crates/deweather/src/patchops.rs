//! Sliding-window patch extraction over feature maps, cosine similarity, and
//! the fixed random-convolution feature extractor behind the sliced
//! Wasserstein loss.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use ndarray::{Array1, Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Patches extracted from a `C x H x W` feature map. Each row of `patches`
/// is one `s x s` window flattened column-major (row-in-window fastest, then
/// column, then channel), rows in raster order of window origins.
pub struct PatchSet {
    pub patches: Tensor,
    /// (rows, cols) of the window-origin grid; rows * cols == N.
    pub grid: (usize, usize),
    pub patch_size: usize,
    pub stride: usize,
    /// (C, H, W) of the source feature map.
    pub source_shape: (usize, usize, usize),
}

fn feature_dims(f: &Tensor) -> Result<(usize, usize, usize)> {
    let shape = f.shape();
    if shape.len() != 3 {
        return Err(Error::InvalidGeometry(format!(
            "feature map must be C x H x W, got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2]))
}

/// Extract all `s x s` windows at the given stride.
pub fn unfold(f: &Tensor, s: usize, stride: usize) -> Result<PatchSet> {
    let (c, h, w) = feature_dims(f)?;
    if s == 0 || s > h || s > w {
        return Err(Error::InvalidGeometry(format!(
            "patch size {s} does not fit a {h}x{w} map"
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidGeometry("stride must be >= 1".into()));
    }
    let rows = (h - s) / stride + 1;
    let cols = (w - s) / stride + 1;
    Ok(PatchSet {
        patches: f.unfold_patches(s, stride),
        grid: (rows, cols),
        patch_size: s,
        stride,
        source_shape: (c, h, w),
    })
}

/// Exact inverse of `unfold` for non-overlapping windows (stride == s).
pub fn fold(p: &PatchSet) -> Result<Tensor> {
    if p.stride != p.patch_size {
        return Err(Error::UnsupportedGeometry(format!(
            "fold requires stride == patch size, got stride {} for s {}",
            p.stride, p.patch_size
        )));
    }
    let (c, h, w) = p.source_shape;
    if p.grid.0 * p.patch_size != h || p.grid.1 * p.patch_size != w {
        return Err(Error::UnsupportedGeometry(format!(
            "source {h}x{w} is not tiled exactly by s = {}",
            p.patch_size
        )));
    }
    Ok(p.patches.fold_patches(p.patch_size, p.grid, c))
}

/// Cosine similarity of two vectors; 0 for a zero vector (flagged variant
/// below reports the degeneracy).
pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    cosine_sim_flagged(a, b).0
}

/// Returns (similarity, degenerate). `degenerate` is true when either input
/// has zero norm, in which case the similarity is defined as 0.
pub fn cosine_sim_flagged(a: &[f64], b: &[f64]) -> (f64, bool) {
    assert_eq!(a.len(), b.len(), "cosine_sim length mismatch");
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return (0.0, true);
    }
    (dot / (na.sqrt() * nb.sqrt()), false)
}

/// Random projection matrix with unit-norm rows, used by the sliced
/// Wasserstein loss.
pub struct ProjectionMatrix {
    pub m: Array2<f64>,
    pub seed: u64,
}

impl ProjectionMatrix {
    /// Rows drawn from a spherical normal and normalized to unit length.
    pub fn generate(rows: usize, cols: usize, seed: u64) -> ProjectionMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut m = Array2::<f64>::zeros((rows, cols));
        for mut row in m.rows_mut() {
            loop {
                let mut norm2 = 0.0;
                for v in row.iter_mut() {
                    *v = normal.sample(&mut rng);
                    norm2 += *v * *v;
                }
                if norm2 > 1e-24 {
                    let n = norm2.sqrt();
                    row.mapv_inplace(|v| v / n);
                    break;
                }
            }
        }
        ProjectionMatrix { m, seed }
    }
}

/// Maps an image (3 x H x W, model range) to a feature map (C x H' x W').
/// The default implementation is a frozen random CNN; anything producing a
/// deterministic feature grid (e.g. real VGG19 activations) can be plugged
/// in instead.
pub trait FeatureExtractor {
    fn extract(&self, img: &Tensor) -> Tensor;
    fn out_channels(&self) -> usize;
}

/// Three fixed random 3x3 convolutions, stride 2, LeakyReLU after each.
/// Weights are frozen at construction from the seed.
pub struct RandomConvExtractor {
    layers: Vec<(Tensor, Tensor)>,
    slope: f64,
    channels: Vec<usize>,
}

impl RandomConvExtractor {
    pub fn new(seed: u64) -> RandomConvExtractor {
        Self::with_channels(seed, &[8, 16, 32])
    }

    pub fn with_channels(seed: u64, channels: &[usize]) -> RandomConvExtractor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5357_4645); // "SWFE"
        let mut layers = Vec::new();
        let mut cin = 3usize;
        for &cout in channels {
            let std = (2.0 / (cin as f64 * 9.0)).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            let mut w = Array4::<f64>::zeros((cout, cin, 3, 3));
            for v in w.iter_mut() {
                *v = normal.sample(&mut rng);
            }
            let b = Array1::<f64>::zeros(cout);
            layers.push((Tensor::constant(w.into_dyn()), Tensor::constant(b.into_dyn())));
            cin = cout;
        }
        RandomConvExtractor {
            layers,
            slope: 0.2,
            channels: channels.to_vec(),
        }
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn extract(&self, img: &Tensor) -> Tensor {
        let shape = img.shape();
        assert_eq!(shape.len(), 3, "extractor expects 3 x H x W");
        let mut x = img.reshape(&[1, shape[0], shape[1], shape[2]]);
        for (w, b) in &self.layers {
            x = x.conv2d(w, b, 2, 1).leaky_relu(self.slope);
        }
        let out_shape = x.shape();
        x.reshape(&[out_shape[1], out_shape[2], out_shape[3]])
    }

    fn out_channels(&self) -> usize {
        *self.channels.last().unwrap()
    }
}

/// Feature map used by the sliced Wasserstein loss.
pub fn sw_features(img: &Tensor, extractor: &dyn FeatureExtractor) -> Tensor {
    extractor.extract(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_feature(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = Array3::<f64>::zeros((c, h, w));
        for v in f.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        Tensor::constant(f.into_dyn())
    }

    #[test]
    fn unfold_quadrants() {
        let mut f = Array3::<f64>::zeros((1, 4, 4));
        for (i, v) in f.iter_mut().enumerate() {
            *v = i as f64;
        }
        let t = Tensor::constant(f.clone().into_dyn());
        let p = unfold(&t, 2, 2).unwrap();
        assert_eq!(p.grid, (2, 2));
        assert_eq!(p.patches.shape(), vec![4, 4]);
        let rows = p.patches.to_array();
        // Row 0 holds exactly the top-left quadrant values {0, 1, 4, 5}.
        let mut r0: Vec<f64> = (0..4).map(|j| rows[[0, j]]).collect();
        r0.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(r0, vec![0.0, 1.0, 4.0, 5.0]);
        // Row 3: bottom-right quadrant.
        let mut r3: Vec<f64> = (0..4).map(|j| rows[[3, j]]).collect();
        r3.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(r3, vec![10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn unfold_counts() {
        let f = random_feature(3, 6, 6, 1);
        let p = unfold(&f, 3, 3).unwrap();
        assert_eq!(p.patches.shape(), vec![4, 27]);
        let f2 = random_feature(1, 4, 4, 2);
        assert_eq!(unfold(&f2, 2, 1).unwrap().patches.shape()[0], 9);
    }

    #[test]
    fn fold_is_exact_inverse() {
        let f = random_feature(2, 6, 8, 3);
        let p = unfold(&f, 2, 2).unwrap();
        let back = fold(&p).unwrap();
        assert_eq!(back.to_array(), f.to_array());
    }

    #[test]
    fn fold_rejects_overlap() {
        let f = random_feature(1, 4, 4, 4);
        let p = unfold(&f, 2, 1).unwrap();
        assert!(matches!(fold(&p), Err(Error::UnsupportedGeometry(_))));
    }

    #[test]
    fn fold_detects_permuted_rows() {
        let f = random_feature(1, 4, 4, 5);
        let p = unfold(&f, 2, 2).unwrap();
        let mut swapped = p.patches.to_array();
        for j in 0..4 {
            let tmp = swapped[[0, j]];
            swapped[[0, j]] = swapped[[3, j]];
            swapped[[3, j]] = tmp;
        }
        let p2 = PatchSet {
            patches: Tensor::constant(swapped),
            grid: p.grid,
            patch_size: p.patch_size,
            stride: p.stride,
            source_shape: p.source_shape,
        };
        let back = fold(&p2).unwrap();
        assert_ne!(back.to_array(), f.to_array());
    }

    #[test]
    fn unfold_rejects_oversized_patch() {
        let f = random_feature(1, 3, 3, 6);
        assert!(matches!(unfold(&f, 4, 1), Err(Error::InvalidGeometry(_))));
    }

    #[test]
    fn cosine_basics() {
        let v = [0.3, -1.2, 0.7];
        assert_abs_diff_eq!(cosine_sim(&v, &v), 1.0, epsilon = 1e-12);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert_abs_diff_eq!(cosine_sim(&v, &neg), -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            cosine_sim(&[1.0, 0.0], &[1.0, 1.0]),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-9
        );
        let (s, degenerate) = cosine_sim_flagged(&[0.0, 0.0], &[1.0, 2.0]);
        assert_eq!(s, 0.0);
        assert!(degenerate);
    }

    #[test]
    fn projection_rows_unit_norm() {
        let p = ProjectionMatrix::generate(32, 48, 7);
        for row in p.m.rows() {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert_abs_diff_eq!(n, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn extractor_deterministic_and_sensitive() {
        let ex = RandomConvExtractor::new(11);
        let img = random_feature(3, 16, 16, 8);
        let f1 = ex.extract(&img).to_array();
        let f2 = ex.extract(&img).to_array();
        assert_eq!(f1, f2);
        assert_eq!(f1.shape(), &[32, 2, 2]);

        let mut bumped = img.to_array();
        bumped[[0, 7, 7]] += 0.25;
        let f3 = ex.extract(&Tensor::constant(bumped)).to_array();
        assert_ne!(f1, f3);
    }

    proptest! {
        #[test]
        fn unfold_count_matches_closed_form(
            h in 3usize..12, w in 3usize..12, s in 1usize..4, stride in 1usize..4
        ) {
            prop_assume!(s <= h && s <= w);
            let f = random_feature(2, h, w, (h * 100 + w * 10 + s) as u64);
            let p = unfold(&f, s, stride).unwrap();
            let n = ((h - s) / stride + 1) * ((w - s) / stride + 1);
            prop_assert_eq!(p.patches.shape()[0], n);
        }

        #[test]
        fn cosine_scale_invariance(alpha in 0.01f64..100.0, beta in 0.01f64..100.0) {
            let a = [0.5, -0.25, 1.5, 0.1];
            let b = [-0.75, 0.3, 0.9, -1.1];
            let sa: Vec<f64> = a.iter().map(|x| x * alpha).collect();
            let sb: Vec<f64> = b.iter().map(|x| x * beta).collect();
            prop_assert!((cosine_sim(&sa, &sb) - cosine_sim(&a, &b)).abs() < 1e-6);
        }

        #[test]
        fn fold_unfold_identity_random_shapes(
            rows in 1usize..5, cols in 1usize..5, s in 1usize..4, c in 1usize..4
        ) {
            let f = random_feature(c, rows * s, cols * s, (rows * 7 + cols * 3 + s) as u64);
            let p = unfold(&f, s, s).unwrap();
            let back = fold(&p).unwrap();
            prop_assert_eq!(back.to_array(), f.to_array());
        }
    }
}
