//! Non-local feature aggregation: graph attention over each query's matched
//! neighbors, two stacked layers, reassembly into the feature grid, and
//! element-wise gating against the current frame's features.
//!
//! Layer semantics: layer 1 aggregates raw neighbors into each query node.
//! The neighbor nodes have no incoming edges, so their layer-1 update is the
//! node-wise transform phi(W1 p). Layer 2 then re-attends each updated query
//! over those transformed neighbors with its own (W2, a2); the matching is
//! not recomputed between layers.

use crate::error::{Error, Result};
use crate::fcm::PatchGraphSet;
use crate::tensor::Tensor;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Elu,
    /// Pass-through, used by tests that need the forced identity path.
    Identity,
}

impl Activation {
    fn apply(&self, t: &Tensor) -> Tensor {
        match self {
            Activation::Elu => t.elu(),
            Activation::Identity => t.clone(),
        }
    }
}

/// One graph-attention layer: shared linear map `w` (d_out x d_in),
/// attention vector `a` (2 * d_out), LeakyReLU slope for the logits.
pub struct GatLayerParams {
    pub w: Tensor,
    pub a: Tensor,
    pub negative_slope: f64,
    pub activation: Activation,
}

impl GatLayerParams {
    /// Xavier-initialized trainable layer.
    pub fn init(d_in: usize, d_out: usize, seed: u64) -> GatLayerParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = (2.0 / (d_in + d_out) as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let mut w = Array2::<f64>::zeros((d_out, d_in));
        for v in w.iter_mut() {
            *v = normal.sample(&mut rng);
        }
        let mut a = Array1::<f64>::zeros(2 * d_out);
        let astd = (1.0 / d_out as f64).sqrt();
        let anormal = Normal::new(0.0, astd).unwrap();
        for v in a.iter_mut() {
            *v = anormal.sample(&mut rng);
        }
        GatLayerParams {
            w: Tensor::param(w.into_dyn()),
            a: Tensor::param(a.into_dyn()),
            negative_slope: 0.2,
            activation: Activation::Elu,
        }
    }

    /// W = I, a = 0, identity activation: forces uniform attention and a
    /// pass-through aggregation. Test configuration.
    pub fn identity(d: usize) -> GatLayerParams {
        let w = Array2::<f64>::eye(d);
        GatLayerParams {
            w: Tensor::constant(w.into_dyn()),
            a: Tensor::constant(Array1::<f64>::zeros(2 * d).into_dyn()),
            negative_slope: 0.2,
            activation: Activation::Identity,
        }
    }

    pub fn d_out(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.w.clone(), self.a.clone()]
    }
}

/// Spatiotemporal aggregated output of the CSA block.
pub struct AggregatedFeature {
    /// Same shape as the current frame's feature map.
    pub f_agg: Tensor,
    /// N x d node outputs before fold and gating.
    pub z: Tensor,
}

/// Check that the attention logits are finite before softmax.
fn check_finite_logits(logits: &Tensor) -> Result<()> {
    if logits.value().iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericOverflow(
            "non-finite attention logits".into(),
        ));
    }
    Ok(())
}

/// Batched attention over N queries with K neighbors each.
/// `queries` is N x d_in, `neighbors` is (N*K) x d_in grouped by query.
/// Returns the N x K attention matrix (rows sum to 1).
pub fn attention_coeffs_batched(
    queries: &Tensor,
    neighbors: &Tensor,
    k: usize,
    params: &GatLayerParams,
) -> Result<Tensor> {
    let n = queries.shape()[0];
    if neighbors.shape()[0] != n * k {
        return Err(Error::InvalidConfig(format!(
            "neighbor rows {} != N*K = {}",
            neighbors.shape()[0],
            n * k
        )));
    }
    let d_out = params.d_out();
    // logits[i,k] = leaky(a1 . W q_i + a2 . W p_ik)
    let wq = queries.matmul(&params.w.t2()); // N x d_out
    let wp = neighbors.matmul(&params.w.t2()); // (N*K) x d_out
    let a1 = params.a.narrow(0, 0, d_out).reshape(&[d_out, 1]);
    let a2 = params.a.narrow(0, d_out, d_out).reshape(&[d_out, 1]);
    let q_score = wq.matmul(&a1).reshape(&[n]); // N
    let p_score = wp.matmul(&a2).reshape(&[n, k]); // N x K
    let logits = p_score.add_col_to_rows(&q_score).leaky_relu(params.negative_slope);
    check_finite_logits(&logits)?;
    Ok(logits.softmax_rows())
}

/// Attention coefficients for one query node (Eq.-level API).
pub fn attention_coeffs(
    query: &Tensor,
    neighbors: &Tensor,
    params: &GatLayerParams,
) -> Result<Tensor> {
    let d = query.len();
    let k = neighbors.shape()[0];
    if k == 0 {
        return Err(Error::InvalidConfig("need at least one neighbor".into()));
    }
    let q = query.reshape(&[1, d]);
    let alpha = attention_coeffs_batched(&q, neighbors, k, params)?;
    Ok(alpha.reshape(&[k]))
}

/// Weighted aggregation z = phi(sum_k alpha_k W p_k) for one query.
pub fn aggregate(neighbors: &Tensor, alpha: &Tensor, params: &GatLayerParams) -> Tensor {
    let k = neighbors.shape()[0];
    let wp = neighbors.matmul(&params.w.t2()); // K x d_out
    let a = alpha.reshape(&[1, k]);
    let z = a.matmul(&wp).reshape(&[params.d_out()]);
    params.activation.apply(&z)
}

/// Batched aggregation across all queries.
fn aggregate_batched(
    neighbors_w: &Tensor, // (N*K) x d_out, already W-transformed
    alpha: &Tensor,       // N x K
    params: &GatLayerParams,
) -> Tensor {
    params.activation.apply(&neighbors_w.weighted_sum_rows(alpha))
}

fn gate_with_input(f_t: &Tensor, z: &Tensor, graph: &PatchGraphSet) -> Result<Tensor> {
    let (c, _h, _w) = graph.source_shape;
    let folded = z.fold_patches(graph.patch_size, graph.grid, c);
    if folded.shape() != f_t.shape() {
        return Err(Error::InvalidGeometry(format!(
            "folded nodes {:?} do not match feature map {:?}",
            folded.shape(),
            f_t.shape()
        )));
    }
    Ok(folded.mul(f_t))
}

/// Two-layer graph-attention aggregation followed by fold and element-wise
/// gating with the current frame's feature map.
pub fn csa_forward(
    f_t: &Tensor,
    graph: &PatchGraphSet,
    layers: &[GatLayerParams; 2],
) -> Result<AggregatedFeature> {
    let d = graph.queries.shape()[1];
    if layers[0].d_in() != d {
        return Err(Error::InvalidConfig(format!(
            "layer 1 expects d_in {}, graph provides {d}",
            layers[0].d_in()
        )));
    }
    if layers[0].d_out() != layers[1].d_in() {
        return Err(Error::InvalidConfig(format!(
            "layer widths do not chain: {} -> {}",
            layers[0].d_out(),
            layers[1].d_in()
        )));
    }
    if layers[1].d_out() != d {
        return Err(Error::InvalidConfig(
            "layer 2 must restore d = C*s^2 so the fold matches the feature map".into(),
        ));
    }
    let k = graph.k;

    // Layer 1: attention of raw neighbors into each query.
    let alpha1 = attention_coeffs_batched(&graph.queries, &graph.neighbors, k, &layers[0])?;
    let wp1 = graph.neighbors.matmul(&layers[0].w.t2());
    let z1 = aggregate_batched(&wp1, &alpha1, &layers[0]);
    // Neighbor nodes have no in-edges; their layer-1 update is the node-wise
    // transform.
    let h1 = layers[0].activation.apply(&wp1);

    // Layer 2: re-attend the updated queries over the transformed neighbors.
    let alpha2 = attention_coeffs_batched(&z1, &h1, k, &layers[1])?;
    let wp2 = h1.matmul(&layers[1].w.t2());
    let z2 = aggregate_batched(&wp2, &alpha2, &layers[1]);

    let f_agg = gate_with_input(f_t, &z2, graph)?;
    Ok(AggregatedFeature { f_agg, z: z2 })
}

/// Attention-free comparator: each node output is the arithmetic mean of its
/// raw neighbor patches, with the same fold and gating as `csa_forward`.
pub fn mean_aggregate_baseline(f_t: &Tensor, graph: &PatchGraphSet) -> Result<AggregatedFeature> {
    let n = graph.queries.shape()[0];
    let k = graph.k;
    let uniform = Tensor::constant(Array2::from_elem((n, k), 1.0 / k as f64).into_dyn());
    let z = graph.neighbors.weighted_sum_rows(&uniform);
    let f_agg = gate_with_input(f_t, &z, graph)?;
    Ok(AggregatedFeature { f_agg, z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fcm::{build_graph, MatchConfig};
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2, Array3};
    use rand::{Rng, SeedableRng};

    fn random_feature(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = Array3::<f64>::zeros((c, h, w));
        for v in f.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        Tensor::constant(f.into_dyn())
    }

    #[test]
    fn singleton_softmax_is_one() {
        let p = GatLayerParams::init(3, 3, 1);
        let q = Tensor::constant(arr1(&[0.2, -0.4, 1.0]).into_dyn());
        let nbr = Tensor::constant(arr2(&[[1.0, 0.5, -0.3]]).into_dyn());
        let alpha = attention_coeffs(&q, &nbr, &p).unwrap();
        assert_abs_diff_eq!(alpha.to_array()[[0]], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn identical_neighbors_split_evenly() {
        let p = GatLayerParams::init(3, 3, 2);
        let q = Tensor::constant(arr1(&[0.2, -0.4, 1.0]).into_dyn());
        let nbr = Tensor::constant(arr2(&[[1.0, 0.5, -0.3], [1.0, 0.5, -0.3]]).into_dyn());
        let alpha = attention_coeffs(&q, &nbr, &p).unwrap();
        let v = alpha.to_array();
        assert_abs_diff_eq!(v[[0]], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(v[[1]], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn hand_computed_coefficients() {
        // d_in = 1, W = [1], a = (0, 1), slope 0.2, q = (1),
        // neighbors {(1), (-1)} -> logits (1, -0.2),
        // alpha = (e^1, e^-0.2) / Z ~= (0.7685, 0.2315)
        let p = GatLayerParams {
            w: Tensor::constant(arr2(&[[1.0]]).into_dyn()),
            a: Tensor::constant(arr1(&[0.0, 1.0]).into_dyn()),
            negative_slope: 0.2,
            activation: Activation::Identity,
        };
        let q = Tensor::constant(arr1(&[1.0]).into_dyn());
        let nbr = Tensor::constant(arr2(&[[1.0], [-1.0]]).into_dyn());
        let alpha = attention_coeffs(&q, &nbr, &p).unwrap().to_array();
        let z = 1.0f64.exp() + (-0.2f64).exp();
        assert_abs_diff_eq!(alpha[[0]], 1.0f64.exp() / z, epsilon = 1e-10);
        assert_abs_diff_eq!(alpha[[1]], (-0.2f64).exp() / z, epsilon = 1e-10);
        assert_abs_diff_eq!(alpha[[0]], 0.7685, epsilon = 1e-4);
        assert_abs_diff_eq!(alpha[[1]], 0.2315, epsilon = 1e-4);
    }

    #[test]
    fn non_finite_logits_error() {
        let p = GatLayerParams::init(2, 2, 3);
        let q = Tensor::constant(arr1(&[f64::INFINITY, 0.0]).into_dyn());
        let nbr = Tensor::constant(arr2(&[[1.0, 0.0]]).into_dyn());
        assert!(matches!(
            attention_coeffs(&q, &nbr, &p),
            Err(Error::NumericOverflow(_))
        ));
    }

    #[test]
    fn aggregate_single_neighbor_is_wp() {
        let p = GatLayerParams {
            w: Tensor::constant(arr2(&[[2.0, 0.0], [0.0, 3.0]]).into_dyn()),
            a: Tensor::constant(arr1(&[0.0; 4]).into_dyn()),
            negative_slope: 0.2,
            activation: Activation::Identity,
        };
        let nbr = Tensor::constant(arr2(&[[1.0, -1.0]]).into_dyn());
        let alpha = Tensor::constant(arr1(&[1.0]).into_dyn());
        let z = aggregate(&nbr, &alpha, &p).to_array();
        assert_eq!(z.as_slice().unwrap(), &[2.0, -3.0]);
    }

    #[test]
    fn aggregate_matches_direct_formula() {
        // Independent re-implementation of the weighted aggregation on a
        // random instance.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (k, d) = (4, 5);
        let mut nbr = Array2::<f64>::zeros((k, d));
        for v in nbr.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let mut w = Array2::<f64>::zeros((d, d));
        for v in w.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        let mut alpha = vec![0.0; k];
        let mut sum = 0.0;
        for a in alpha.iter_mut() {
            *a = rng.random_range(0.01..1.0);
            sum += *a;
        }
        for a in alpha.iter_mut() {
            *a /= sum;
        }

        let mut expect = vec![0.0; d];
        for (ki, &ak) in alpha.iter().enumerate() {
            for (out, row) in expect.iter_mut().zip(w.rows()) {
                let mut dot = 0.0;
                for (x, &wv) in nbr.row(ki).iter().zip(row.iter()) {
                    dot += wv * x;
                }
                *out += ak * dot;
            }
        }
        let expect: Vec<f64> = expect.iter().map(|&x| if x >= 0.0 { x } else { x.exp() - 1.0 }).collect();

        let p = GatLayerParams {
            w: Tensor::constant(w.into_dyn()),
            a: Tensor::constant(Array1::zeros(2 * d).into_dyn()),
            negative_slope: 0.2,
            activation: Activation::Elu,
        };
        let z = aggregate(
            &Tensor::constant(nbr.into_dyn()),
            &Tensor::constant(Array1::from_vec(alpha).into_dyn()),
            &p,
        )
        .to_array();
        for (got, want) in z.iter().zip(expect.iter()) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-10);
        }
    }

    #[test]
    fn identity_layers_square_the_feature() {
        // Frames identical, W = I, a = 0, identity activation:
        // z folds back to F_t, so F_agg = F_t * F_t elementwise.
        let f = random_feature(2, 4, 4, 21);
        let frames = vec![
            Tensor::constant(f.to_array()),
            Tensor::constant(f.to_array()),
            Tensor::constant(f.to_array()),
        ];
        let cfg = MatchConfig {
            s: 2,
            padding: 0,
            k: 2,
            n: 1,
        };
        let graph = build_graph(&frames, &cfg).unwrap();
        let d = 2 * 2 * 2;
        let layers = [GatLayerParams::identity(d), GatLayerParams::identity(d)];
        let agg = csa_forward(&frames[1], &graph, &layers).unwrap();
        let f_val = f.to_array();
        let expect = &f_val * &f_val;
        let got = agg.f_agg.to_array();
        for (a, b) in got.iter().zip(expect.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let frames: Vec<Tensor> = (0..3).map(|i| random_feature(2, 6, 6, 30 + i)).collect();
        let cfg = MatchConfig {
            s: 2,
            padding: 2,
            k: 3,
            n: 1,
        };
        let graph = build_graph(&frames, &cfg).unwrap();
        let layer = GatLayerParams::init(8, 8, 5);
        let alpha = attention_coeffs_batched(&graph.queries, &graph.neighbors, 3, &layer)
            .unwrap()
            .to_array();
        for i in 0..alpha.shape()[0] {
            let mut sum = 0.0;
            for j in 0..3 {
                let a = alpha[[i, j]];
                assert!(a > 0.0);
                sum += a;
            }
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn neighbor_permutation_leaves_z_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (k, d) = (4, 6);
        let mut nbr = Array2::<f64>::zeros((k, d));
        for v in nbr.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let mut q = Array1::<f64>::zeros(d);
        for v in q.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let p = GatLayerParams::init(d, d, 10);
        let qt = Tensor::constant(q.into_dyn());

        let run = |order: &[usize]| -> Vec<f64> {
            let permuted = ndarray::Array2::from_shape_fn((k, d), |(i, j)| nbr[[order[i], j]]);
            let nt = Tensor::constant(permuted.into_dyn());
            let alpha = attention_coeffs(&qt, &nt, &p).unwrap();
            aggregate(&nt, &alpha, &p).to_array().iter().cloned().collect()
        };
        let base = run(&[0, 1, 2, 3]);
        let shuffled = run(&[2, 0, 3, 1]);
        for (a, b) in base.iter().zip(shuffled.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn mean_baseline_matches_arithmetic_mean() {
        let frames: Vec<Tensor> = (0..3).map(|i| random_feature(1, 4, 4, 40 + i)).collect();
        let cfg = MatchConfig {
            s: 2,
            padding: 1,
            k: 3,
            n: 1,
        };
        let graph = build_graph(&frames, &cfg).unwrap();
        let agg = mean_aggregate_baseline(&frames[1], &graph).unwrap();
        let nbr = graph.neighbors.to_array();
        let z = agg.z.to_array();
        for qi in 0..4 {
            for j in 0..4 {
                let mean = (0..3).map(|kk| nbr[[qi * 3 + kk, j]]).sum::<f64>() / 3.0;
                assert_abs_diff_eq!(z[[qi, j]], mean, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn mean_baseline_opposite_neighbors_cancel() {
        let v = arr2(&[[1.0, -2.0], [-1.0, 2.0]]);
        let uniform = Tensor::constant(Array2::from_elem((1, 2), 0.5).into_dyn());
        let z = Tensor::constant(v.into_dyn()).weighted_sum_rows(&uniform);
        assert_eq!(z.to_array().as_slice().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn csa_forward_matches_per_subgraph_reference() {
        // Straight-line oracle: loop over sub-graphs, run both layers with
        // scalar math only.
        let frames: Vec<Tensor> = (0..3).map(|i| random_feature(1, 4, 4, 50 + i)).collect();
        let cfg = MatchConfig {
            s: 2,
            padding: 1,
            k: 2,
            n: 1,
        };
        let graph = build_graph(&frames, &cfg).unwrap();
        let d = 4;
        let layers = [GatLayerParams::init(d, d, 60), GatLayerParams::init(d, d, 61)];
        let agg = csa_forward(&frames[1], &graph, &layers).unwrap();
        let z = agg.z.to_array();

        let q = graph.queries.to_array();
        let nbr = graph.neighbors.to_array();
        let w1 = layers[0].w.to_array();
        let a1 = layers[0].a.to_array();
        let w2 = layers[1].w.to_array();
        let a2 = layers[1].a.to_array();
        let matvec = |w: &ndarray::ArrayD<f64>, x: &[f64]| -> Vec<f64> {
            (0..d)
                .map(|i| (0..d).map(|j| w[[i, j]] * x[j]).sum())
                .collect()
        };
        let leaky = |x: f64| if x >= 0.0 { x } else { 0.2 * x };
        let elu = |x: f64| if x >= 0.0 { x } else { x.exp() - 1.0 };
        for qi in 0..q.shape()[0] {
            let qv: Vec<f64> = (0..d).map(|j| q[[qi, j]]).collect();
            let wq = matvec(&w1, &qv);
            let mut logits = Vec::new();
            let mut wps = Vec::new();
            for kk in 0..2 {
                let pv: Vec<f64> = (0..d).map(|j| nbr[[qi * 2 + kk, j]]).collect();
                let wp = matvec(&w1, &pv);
                let mut e = 0.0;
                for j in 0..d {
                    e += a1[[j]] * wq[j] + a1[[d + j]] * wp[j];
                }
                logits.push(leaky(e));
                wps.push(wp);
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
            let zsum: f64 = exps.iter().sum();
            let alpha: Vec<f64> = exps.iter().map(|&e| e / zsum).collect();
            let mut z1 = vec![0.0; d];
            for kk in 0..2 {
                for j in 0..d {
                    z1[j] += alpha[kk] * wps[kk][j];
                }
            }
            let z1: Vec<f64> = z1.iter().map(|&x| elu(x)).collect();
            let h1: Vec<Vec<f64>> = wps.iter().map(|wp| wp.iter().map(|&x| elu(x)).collect()).collect();

            // Layer 2.
            let wz = matvec(&w2, &z1);
            let mut logits2 = Vec::new();
            let mut wh = Vec::new();
            for h in &h1 {
                let whk = matvec(&w2, h);
                let mut e = 0.0;
                for j in 0..d {
                    e += a2[[j]] * wz[j] + a2[[d + j]] * whk[j];
                }
                logits2.push(leaky(e));
                wh.push(whk);
            }
            let m2 = logits2.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps2: Vec<f64> = logits2.iter().map(|&l| (l - m2).exp()).collect();
            let zsum2: f64 = exps2.iter().sum();
            let alpha2: Vec<f64> = exps2.iter().map(|&e| e / zsum2).collect();
            let mut z2 = vec![0.0; d];
            for kk in 0..2 {
                for j in 0..d {
                    z2[j] += alpha2[kk] * wh[kk][j];
                }
            }
            let z2: Vec<f64> = z2.iter().map(|&x| elu(x)).collect();
            for j in 0..d {
                assert_abs_diff_eq!(z[[qi, j]], z2[j], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn layer_width_mismatch_is_invalid_config() {
        let frames: Vec<Tensor> = (0..3).map(|i| random_feature(1, 4, 4, 70 + i)).collect();
        let cfg = MatchConfig {
            s: 2,
            padding: 1,
            k: 2,
            n: 1,
        };
        let graph = build_graph(&frames, &cfg).unwrap();
        let layers = [GatLayerParams::init(4, 6, 1), GatLayerParams::init(4, 4, 2)];
        assert!(matches!(
            csa_forward(&frames[1], &graph, &layers),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn gat_gradients_match_finite_differences() {
        use crate::tensor::gradcheck::check_gradients;
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (n, k, d) = (2, 3, 4);
        let mut qv = Array2::<f64>::zeros((n, d));
        for v in qv.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let mut nv = Array2::<f64>::zeros((n * k, d));
        for v in nv.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let q = Tensor::param(qv.into_dyn());
        let nbr = Tensor::param(nv.into_dyn());
        let layer = GatLayerParams::init(d, d, 16);
        let leaves = vec![q.clone(), nbr.clone(), layer.w.clone(), layer.a.clone()];
        let report = check_gradients(
            &leaves,
            || {
                let alpha = attention_coeffs_batched(&q, &nbr, k, &layer).unwrap();
                let wp = nbr.matmul(&layer.w.t2());
                wp.weighted_sum_rows(&alpha).elu().mul(&wp.weighted_sum_rows(&alpha).elu()).mean_all()
            },
            1e-5,
        );
        assert!(
            report.max_rel_err < 1e-4,
            "gat grad check failed: {}",
            report.max_rel_err
        );
    }
}
