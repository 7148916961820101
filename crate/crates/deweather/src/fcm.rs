//! Flexible Cross-frame Matching: for each query patch of the current
//! frame's features, search a padded stride-1 window in every adjacent
//! frame, rank candidates by cosine similarity, and keep the top-K as a
//! directed (neighbor -> query) graph.

use crate::error::{Error, Result};
use crate::patchops::{cosine_sim, unfold, PatchSet};
use crate::tensor::Tensor;
use ndarray::Array2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MatchConfig {
    /// Patch size in feature space.
    pub s: usize,
    /// Region padding: candidate origins live within +-P of the query origin.
    pub padding: usize,
    /// Neighbors kept per query.
    pub k: usize,
    /// Temporal radius; the window holds 2n+1 frames.
    pub n: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            s: 3,
            padding: 3,
            k: 3,
            n: 1,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.s == 0 {
            return Err(Error::InvalidConfig("patch size must be >= 1".into()));
        }
        if self.k == 0 {
            return Err(Error::InvalidConfig("top-K must be >= 1".into()));
        }
        if self.n == 0 && self.padding == 0 {
            return Err(Error::InvalidConfig(
                "self-matching (n = 0) needs padding >= 1 to have any candidates".into(),
            ));
        }
        Ok(())
    }
}

/// One directed edge of the match graph: a patch in an adjacent frame
/// pointing at the query patch it supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphEdge {
    /// Index of the source frame within the input window.
    pub frame: usize,
    /// Window origin (row, col) of the neighbor patch in that frame.
    pub origin: (usize, usize),
    /// Query index in raster order.
    pub query: usize,
}

/// Matched patch graph over one frame window. Logically a (B, K, N, C*s^2)
/// batch; one `PatchGraphSet` holds a single sample (B = 1), batching is
/// done by the model loop.
pub struct PatchGraphSet {
    /// N x (C*s^2) query patches, raster order, differentiable.
    pub queries: Tensor,
    /// (N*K) x (C*s^2) neighbor patches grouped by query, differentiable.
    pub neighbors: Tensor,
    /// N x K cosine similarities, rows sorted non-increasing.
    pub sims: Array2<f64>,
    pub edges: Vec<GraphEdge>,
    pub k: usize,
    /// Query-origin grid (rows, cols) in the current frame.
    pub grid: (usize, usize),
    pub patch_size: usize,
    /// (C, H, W) of each input feature map.
    pub source_shape: (usize, usize, usize),
}

/// Clamped candidate window origins around `query_origin`, raster order.
fn candidate_origins(
    h: usize,
    w: usize,
    s: usize,
    padding: usize,
    query_origin: (usize, usize),
) -> Vec<(usize, usize)> {
    let (qr, qc) = query_origin;
    let r0 = qr.saturating_sub(padding);
    let r1 = (qr + padding).min(h - s);
    let c0 = qc.saturating_sub(padding);
    let c1 = (qc + padding).min(w - s);
    let mut out = Vec::with_capacity((r1 - r0 + 1) * (c1 - c0 + 1));
    for r in r0..=r1 {
        for c in c0..=c1 {
            out.push((r, c));
        }
    }
    out
}

/// All stride-1 candidate patches of `f_adj` whose origins lie within the
/// padded region around `query_origin` (clamped at the borders).
pub fn candidate_patches(
    f_adj: &Tensor,
    query_origin: (usize, usize),
    cfg: &MatchConfig,
) -> Result<PatchSet> {
    cfg.validate()?;
    let shape = f_adj.shape();
    if shape.len() != 3 {
        return Err(Error::InvalidGeometry(format!(
            "feature map must be C x H x W, got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if cfg.s > h || cfg.s > w {
        return Err(Error::InvalidGeometry(format!(
            "patch size {} does not fit a {h}x{w} map",
            cfg.s
        )));
    }
    let origins = candidate_origins(h, w, cfg.s, cfg.padding, query_origin);
    let all = f_adj.unfold_patches(cfg.s, 1);
    let cols = w - cfg.s + 1;
    let indices: Vec<usize> = origins.iter().map(|&(r, cc)| r * cols + cc).collect();
    let rows_span = origins.last().unwrap().0 - origins[0].0 + 1;
    let cols_span = origins.last().unwrap().1 - origins[0].1 + 1;
    Ok(PatchSet {
        patches: all.select_rows(&indices),
        grid: (rows_span, cols_span),
        patch_size: cfg.s,
        stride: 1,
        source_shape: (c, h, w),
    })
}

/// Indices and similarities of the K candidates most cosine-similar to
/// `query`. Ties resolve to the lower candidate index, which encodes
/// (frame offset ascending, raster origin ascending) for pools assembled by
/// `build_graph`.
pub fn top_k_match(query: &[f64], candidates: &Array2<f64>, k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let m = candidates.nrows();
    if k > m {
        return Err(Error::InvalidConfig(format!(
            "top-K = {k} exceeds candidate count {m}"
        )));
    }
    let mut scored: Vec<(usize, f64)> = candidates
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| (i, cosine_sim(query, row.as_slice().unwrap())))
        .collect();
    // Stable sort by similarity descending keeps the pool order for ties.
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    scored.truncate(k);
    Ok((
        scored.iter().map(|&(i, _)| i).collect(),
        scored.iter().map(|&(_, s)| s).collect(),
    ))
}

/// Build the directed graph set over a window of 2n+1 feature maps
/// (`f_seq[cfg.n]` is the current frame). For n = 0 the candidate pool is
/// the current frame itself minus the query's own window.
pub fn build_graph(f_seq: &[Tensor], cfg: &MatchConfig) -> Result<PatchGraphSet> {
    cfg.validate()?;
    if f_seq.len() != 2 * cfg.n + 1 {
        return Err(Error::InvalidConfig(format!(
            "expected {} frames for n = {}, got {}",
            2 * cfg.n + 1,
            cfg.n,
            f_seq.len()
        )));
    }
    let shape = f_seq[0].shape();
    for f in f_seq.iter().skip(1) {
        if f.shape() != shape {
            return Err(Error::InvalidGeometry(
                "feature maps differ in shape across frames".into(),
            ));
        }
    }
    if shape.len() != 3 {
        return Err(Error::InvalidGeometry(format!(
            "feature map must be C x H x W, got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let s = cfg.s;
    if h % s != 0 || w % s != 0 {
        return Err(Error::InvalidGeometry(format!(
            "feature dims {h}x{w} must be divisible by patch size {s}"
        )));
    }

    let current = cfg.n;
    let query_set = unfold(&f_seq[current], s, s)?;
    let queries_val = query_set.patches.to_array();
    let queries2 = queries_val.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let n_queries = queries2.nrows();

    // Adjacent frames in ascending offset order; n = 0 self-matches.
    let adjacent: Vec<usize> = if cfg.n == 0 {
        vec![0]
    } else {
        (0..f_seq.len()).filter(|&i| i != current).collect()
    };

    // Stride-1 unfolds per adjacent frame (differentiable gather source).
    let mut adj_unfolds: Vec<(usize, Tensor)> = Vec::with_capacity(adjacent.len());
    for &fi in &adjacent {
        adj_unfolds.push((fi, f_seq[fi].unfold_patches(s, 1)));
    }
    let adj_values: Vec<Array2<f64>> = adj_unfolds
        .iter()
        .map(|(_, t)| {
            t.to_array()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
        })
        .collect();
    let stride1_cols = w - s + 1;

    let mut sims = Array2::<f64>::zeros((n_queries, cfg.k));
    let mut edges = Vec::with_capacity(n_queries * cfg.k);
    // Per selected neighbor: (position within adj_unfolds, window row index).
    let mut selected: Vec<(usize, usize)> = Vec::with_capacity(n_queries * cfg.k);

    let q_cols = query_set.grid.1;
    for qi in 0..n_queries {
        let q_origin = ((qi / q_cols) * s, (qi % q_cols) * s);
        // Assemble the candidate pool: frame offset ascending, then raster
        // order of origins within the frame.
        let mut pool: Vec<(usize, usize)> = Vec::new(); // (adj slot, window idx)
        for (slot, (fi, _)) in adj_unfolds.iter().enumerate() {
            for (r, cc) in candidate_origins(h, w, s, cfg.padding, q_origin) {
                if cfg.n == 0 && *fi == current && (r, cc) == q_origin {
                    continue; // self-matching never matches the query itself
                }
                pool.push((slot, r * stride1_cols + cc));
            }
        }
        if cfg.k > pool.len() {
            return Err(Error::InvalidConfig(format!(
                "top-K = {} exceeds candidate count {} (query {qi})",
                cfg.k,
                pool.len()
            )));
        }
        let query_row = queries2.row(qi);
        let q_slice = query_row.as_slice().unwrap();
        let mut scored: Vec<(usize, f64)> = pool
            .iter()
            .enumerate()
            .map(|(pi, &(slot, widx))| {
                let cand = adj_values[slot].row(widx);
                (pi, cosine_sim(q_slice, cand.as_slice().unwrap()))
            })
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        for (kk, &(pi, sim)) in scored.iter().take(cfg.k).enumerate() {
            let (slot, widx) = pool[pi];
            sims[[qi, kk]] = sim;
            let origin = (widx / stride1_cols, widx % stride1_cols);
            edges.push(GraphEdge {
                frame: adj_unfolds[slot].0,
                origin,
                query: qi,
            });
            selected.push((slot, widx));
        }
    }

    // Differentiable gather: per-frame row selection, then reorder into
    // (query-major, k-minor) order.
    let mut per_slot_rows: Vec<Vec<usize>> = vec![Vec::new(); adj_unfolds.len()];
    let mut grouped_pos: Vec<usize> = Vec::with_capacity(selected.len());
    for &(slot, widx) in &selected {
        per_slot_rows[slot].push(widx);
        grouped_pos.push(per_slot_rows[slot].len() - 1);
    }
    let mut slot_base = vec![0usize; adj_unfolds.len()];
    let mut base = 0usize;
    for (i, rows) in per_slot_rows.iter().enumerate() {
        slot_base[i] = base;
        base += rows.len();
    }
    let gathered: Vec<Tensor> = adj_unfolds
        .iter()
        .enumerate()
        .filter(|(i, _)| !per_slot_rows[*i].is_empty())
        .map(|(i, (_, t))| t.select_rows(&per_slot_rows[i]))
        .collect();
    let grouped = Tensor::concat(&gathered, 0);
    let perm: Vec<usize> = selected
        .iter()
        .zip(grouped_pos.iter())
        .map(|(&(slot, _), &pos)| slot_base[slot] + pos)
        .collect();
    let neighbors = grouped.select_rows(&perm);

    Ok(PatchGraphSet {
        queries: query_set.patches,
        neighbors,
        sims,
        edges,
        k: cfg.k,
        grid: query_set.grid,
        patch_size: s,
        source_shape: (c, h, w),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn random_feature(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = Array3::<f64>::zeros((c, h, w));
        for v in f.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        Tensor::constant(f.into_dyn())
    }

    /// Brute-force oracle: enumerate every candidate over all adjacent
    /// frames, compute cosine similarity directly from the feature maps,
    /// sort by (similarity desc, frame asc, raster origin asc).
    pub fn exhaustive_top_k(
        f_seq: &[Tensor],
        cfg: &MatchConfig,
        query_idx: usize,
    ) -> (Vec<(usize, (usize, usize))>, Vec<f64>) {
        let shape = f_seq[0].shape();
        let (_c, h, w) = (shape[0], shape[1], shape[2]);
        let s = cfg.s;
        let cols = w / s;
        let q_origin = ((query_idx / cols) * s, (query_idx % cols) * s);
        let current = cfg.n;
        let frames: Vec<usize> = if cfg.n == 0 {
            vec![0]
        } else {
            (0..f_seq.len()).filter(|&i| i != current).collect()
        };
        let extract = |t: &Tensor, (r, c): (usize, usize)| -> Vec<f64> {
            let v = t.to_array();
            let v3 = v.view().into_dimensionality::<ndarray::Ix3>().unwrap().to_owned();
            let mut out = Vec::with_capacity(shape[0] * s * s);
            for ch in 0..shape[0] {
                for wx in 0..s {
                    for wy in 0..s {
                        out.push(v3[[ch, r + wy, c + wx]]);
                    }
                }
            }
            out
        };
        let q = extract(&f_seq[current], q_origin);
        let mut all: Vec<((usize, (usize, usize)), f64)> = Vec::new();
        for &fi in &frames {
            let r0 = q_origin.0.saturating_sub(cfg.padding);
            let r1 = (q_origin.0 + cfg.padding).min(h - s);
            let c0 = q_origin.1.saturating_sub(cfg.padding);
            let c1 = (q_origin.1 + cfg.padding).min(w - s);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    if cfg.n == 0 && (r, c) == q_origin {
                        continue;
                    }
                    let cand = extract(&f_seq[fi], (r, c));
                    all.push(((fi, (r, c)), cosine_sim(&q, &cand)));
                }
            }
        }
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        all.truncate(cfg.k);
        (
            all.iter().map(|&(key, _)| key).collect(),
            all.iter().map(|&(_, s)| s).collect(),
        )
    }

    #[test]
    fn padding_zero_single_colocated_candidate() {
        let cfg = MatchConfig {
            s: 2,
            padding: 0,
            k: 2,
            n: 1,
        };
        let frames: Vec<Tensor> = (0..3).map(|i| random_feature(2, 4, 4, 40 + i)).collect();
        let g = build_graph(&frames, &cfg).unwrap();
        // Each query has exactly 2 candidates: the co-located windows of
        // frames t-1 and t+1.
        assert_eq!(g.edges.len(), 4 * 2);
        let q_cols = g.grid.1;
        for e in &g.edges {
            let expect = ((e.query / q_cols) * 2, (e.query % q_cols) * 2);
            assert_eq!(e.origin, expect);
            assert!(e.frame == 0 || e.frame == 2);
        }
    }

    #[test]
    fn identical_frames_give_unit_sims() {
        let f = random_feature(2, 6, 6, 50);
        let frames = vec![
            Tensor::constant(f.to_array()),
            Tensor::constant(f.to_array()),
            Tensor::constant(f.to_array()),
        ];
        let cfg = MatchConfig {
            s: 2,
            padding: 1,
            k: 2,
            n: 1,
        };
        let g = build_graph(&frames, &cfg).unwrap();
        for qi in 0..g.sims.nrows() {
            assert_abs_diff_eq!(g.sims[[qi, 0]], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn corner_query_clamps_to_four_candidates() {
        let cfg = MatchConfig {
            s: 2,
            padding: 1,
            k: 1,
            n: 1,
        };
        let frames: Vec<Tensor> = (0..3).map(|i| random_feature(1, 4, 4, 60 + i)).collect();
        let ps = candidate_patches(&frames[0], (0, 0), &cfg).unwrap();
        assert_eq!(ps.patches.shape()[0], 4);
        assert_eq!(ps.grid, (2, 2));
    }

    #[test]
    fn interior_padding3_gives_49_per_frame() {
        let cfg = MatchConfig {
            s: 2,
            padding: 3,
            k: 1,
            n: 1,
        };
        let f = random_feature(1, 12, 12, 70);
        let ps = candidate_patches(&f, (4, 4), &cfg).unwrap();
        assert_eq!(ps.patches.shape()[0], 49);
    }

    #[test]
    fn top_k_finds_exact_copy() {
        let mut cands = Array2::<f64>::zeros((5, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for v in cands.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let query: Vec<f64> = cands.row(3).to_vec();
        let (idx, sims) = top_k_match(&query, &cands, 1).unwrap();
        assert_eq!(idx, vec![3]);
        assert_abs_diff_eq!(sims[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn top_k_tie_break_takes_first() {
        let cands =
            ndarray::arr2(&[[1.0, 0.0], [1.0, 0.0], [2.0, 0.0], [0.0, 1.0]]);
        // All of rows 0..3 have sim 1 with the query; ties keep pool order.
        let (idx, _) = top_k_match(&[3.0, 0.0], &cands, 2).unwrap();
        assert_eq!(idx, vec![0, 1]);
    }

    #[test]
    fn top_k_rejects_oversized_k() {
        let cands = ndarray::arr2(&[[1.0, 0.0]]);
        assert!(matches!(
            top_k_match(&[1.0, 0.0], &cands, 2),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn random_instance_matches_exhaustive_oracle() {
        let cfg = MatchConfig {
            s: 2,
            padding: 1,
            k: 3,
            n: 1,
        };
        let frames: Vec<Tensor> = (0..3).map(|i| random_feature(2, 6, 6, 80 + i)).collect();
        let g = build_graph(&frames, &cfg).unwrap();
        for qi in 0..g.sims.nrows() {
            let (keys, sims) = exhaustive_top_k(&frames, &cfg, qi);
            for kk in 0..cfg.k {
                let e = &g.edges[qi * cfg.k + kk];
                assert_eq!((e.frame, e.origin), keys[kk], "query {qi} k {kk}");
                assert_eq!(g.sims[[qi, kk]], sims[kk]);
            }
        }
    }

    #[test]
    fn self_matching_excludes_own_window() {
        let cfg = MatchConfig {
            s: 2,
            padding: 1,
            k: 2,
            n: 0,
        };
        let f = random_feature(2, 6, 6, 90);
        let g = build_graph(&[f], &cfg).unwrap();
        let q_cols = g.grid.1;
        for e in &g.edges {
            let q_origin = ((e.query / q_cols) * 2, (e.query % q_cols) * 2);
            assert_ne!(e.origin, q_origin, "own window must be excluded");
            assert_eq!(e.frame, 0);
        }
    }

    #[test]
    fn edge_count_is_n_times_k() {
        for k in 1..=3 {
            let cfg = MatchConfig {
                s: 2,
                padding: 2,
                k,
                n: 1,
            };
            let frames: Vec<Tensor> = (0..3).map(|i| random_feature(1, 8, 8, 100 + i)).collect();
            let g = build_graph(&frames, &cfg).unwrap();
            assert_eq!(g.edges.len(), g.sims.nrows() * k);
        }
    }

    #[test]
    fn max_similarity_monotone_in_padding() {
        let frames: Vec<Tensor> = (0..3).map(|i| random_feature(2, 8, 8, 110 + i)).collect();
        let mut last = vec![f64::NEG_INFINITY; 16];
        for padding in [0usize, 1, 2] {
            let cfg = MatchConfig {
                s: 2,
                padding,
                k: 1,
                n: 1,
            };
            let g = build_graph(&frames, &cfg).unwrap();
            for qi in 0..g.sims.nrows() {
                assert!(
                    g.sims[[qi, 0]] >= last[qi] - 1e-12,
                    "best sim decreased with larger padding"
                );
                last[qi] = g.sims[[qi, 0]];
            }
        }
    }

    #[test]
    fn neighbor_rows_match_edge_patches() {
        let cfg = MatchConfig {
            s: 2,
            padding: 2,
            k: 2,
            n: 1,
        };
        let frames: Vec<Tensor> = (0..3).map(|i| random_feature(2, 6, 6, 120 + i)).collect();
        let g = build_graph(&frames, &cfg).unwrap();
        let nbr = g.neighbors.to_array();
        for (row, e) in g.edges.iter().enumerate() {
            let src = frames[e.frame].to_array();
            let src3 = src.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            for ch in 0..2 {
                for wx in 0..2 {
                    for wy in 0..2 {
                        let expect = src3[[ch, e.origin.0 + wy, e.origin.1 + wx]];
                        assert_eq!(nbr[[row, wy + 2 * wx + 4 * ch]], expect);
                    }
                }
            }
        }
    }
}
