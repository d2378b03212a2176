//! Forward passes of the fusion, temporal, shape-filter and keypoint blocks.

use nalgebra::DMatrix;

use super::ops::{check_features, check_same_rows, hconcat, relu, softmax_cols, softmax_rows, FeatureMatrix, Linear};
use super::weights::{BlockWeights, LowRankAttention, MultiHead};
use crate::error::{shape, Result};
use crate::matching::ProjectionMatrix;

/// Query rows handled per tile; keeps the per-tile score block cache resident.
const ROW_TILE: usize = 128;

/// `softmax(q k^T / sqrt(d_h)) v` per head, heads concatenated.
fn scaled_heads(q: &DMatrix<f64>, k: &DMatrix<f64>, v: &DMatrix<f64>, heads: usize) -> DMatrix<f64> {
    let dh = q.ncols() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = DMatrix::zeros(q.nrows(), v.ncols());
    for h in 0..heads {
        let kh_t = k.columns(h * dh, dh).transpose() * scale;
        let vh = v.columns(h * dh, dh);
        for r0 in (0..q.nrows()).step_by(ROW_TILE) {
            let rows = ROW_TILE.min(q.nrows() - r0);
            let scores = q.view((r0, h * dh), (rows, dh)) * &kh_t;
            out.view_mut((r0, h * dh), (rows, dh)).copy_from(&(softmax_rows(&scores) * vh));
        }
    }
    out
}

impl MultiHead {
    pub fn forward(&self, q_in: &DMatrix<f64>, k_in: &DMatrix<f64>, v_in: &DMatrix<f64>) -> DMatrix<f64> {
        let q = self.q.forward(q_in);
        let k = self.k.forward(k_in);
        let v = self.v.forward(v_in);
        self.o.forward(&scaled_heads(&q, &k, &v, self.heads))
    }
}

impl LowRankAttention {
    /// Pooling matrix `X_c = Y_c` (`N x k`), each column a softmax over the
    /// rows of `source`.
    pub fn pooling(&self, source: &DMatrix<f64>) -> DMatrix<f64> {
        softmax_cols(&self.proj.forward(source))
    }

    pub fn forward(
        &self,
        q_in: &DMatrix<f64>,
        k_in: &DMatrix<f64>,
        v_in: &DMatrix<f64>,
        pool_source: &DMatrix<f64>,
    ) -> DMatrix<f64> {
        self.forward_with_pooling(q_in, k_in, v_in, &self.pooling(pool_source))
    }

    /// Attention against the pooled keys `X^T K` and values `X^T V`; the
    /// score matrix is `N x k`.
    pub fn forward_with_pooling(
        &self,
        q_in: &DMatrix<f64>,
        k_in: &DMatrix<f64>,
        v_in: &DMatrix<f64>,
        pool: &DMatrix<f64>,
    ) -> DMatrix<f64> {
        let q = self.q.forward(q_in);
        let k = pool.transpose() * self.k.forward(k_in);
        let v = pool.transpose() * self.v.forward(v_in);
        scaled_heads(&q, &k, &v, self.heads)
    }
}

/// Offset attention with projections shared across modalities:
/// `F_c = phi_c(softmax(Q(I) K(P)^T) V(I) - Q(I))` and the symmetric `F_g`.
pub fn wsa_forward(
    img_feat: &FeatureMatrix,
    pt_feat: &FeatureMatrix,
    w: &BlockWeights,
) -> Result<(FeatureMatrix, FeatureMatrix)> {
    check_features("wsa_forward", img_feat)?;
    check_features("wsa_forward", pt_feat)?;
    check_same_rows("wsa_forward", img_feat, pt_feat)?;
    let a = &w.wsa;
    a.q.check_input("wsa_forward", img_feat)?;
    a.q.check_input("wsa_forward", pt_feat)?;

    let (qi, ki, vi) = (a.q.forward(img_feat), a.k.forward(img_feat), a.v.forward(img_feat));
    let (qp, kp, vp) = (a.q.forward(pt_feat), a.k.forward(pt_feat), a.v.forward(pt_feat));
    let f_c = relu(a.phi_c.forward(&(softmax_rows(&(&qi * kp.transpose())) * vi - &qi)));
    let f_g = relu(a.phi_g.forward(&(softmax_rows(&(&qp * ki.transpose())) * vp - &qp)));
    Ok((f_c, f_g))
}

fn fused_input(f_c: &FeatureMatrix, f_g: &FeatureMatrix, w: &BlockWeights) -> Result<DMatrix<f64>> {
    check_features("lowrank_fusion", f_c)?;
    check_features("lowrank_fusion", f_g)?;
    check_same_rows("lowrank_fusion", f_c, f_g)?;
    let joined = hconcat(f_c, f_g);
    w.fusion.mlp.check_input("lowrank_fusion", &joined)?;
    Ok(relu(w.fusion.mlp.forward(&joined)))
}

/// Low-rank multi-head self-attention over `relu(MLP([F_c | F_g]))`, with
/// the pooling matrix projected from `F_c`. Returns `F_obj` (`N x d`).
pub fn lowrank_fusion(f_c: &FeatureMatrix, f_g: &FeatureMatrix, w: &BlockWeights) -> Result<FeatureMatrix> {
    let fused = fused_input(f_c, f_g, w)?;
    let attn = &w.fusion.attn;
    Ok(attn.forward_with_pooling(&fused, &fused, &fused, &attn.pooling(f_c)))
}

/// [`lowrank_fusion`] with a caller-supplied `N x k` pooling matrix.
pub fn lowrank_fusion_with_pooling(
    f_c: &FeatureMatrix,
    f_g: &FeatureMatrix,
    pool: &DMatrix<f64>,
    w: &BlockWeights,
) -> Result<FeatureMatrix> {
    let fused = fused_input(f_c, f_g, w)?;
    if pool.nrows() != fused.nrows() {
        return Err(shape(
            "lowrank_fusion",
            format!("pooling has {} rows for {} points", pool.nrows(), fused.nrows()),
        ));
    }
    Ok(w.fusion.attn.forward_with_pooling(&fused, &fused, &fused, pool))
}

/// `out[i, c] = max_j (s[i, j] * g[j, c] + r[j, c]) + q[i, c]`.
fn weighted_max_pool(s: &DMatrix<f64>, g: &DMatrix<f64>, r: Option<&DMatrix<f64>>, q: Option<&DMatrix<f64>>) -> DMatrix<f64> {
    let (n, m, d) = (s.nrows(), s.ncols(), g.ncols());
    DMatrix::from_fn(n, d, |i, c| {
        let mut best = f64::NEG_INFINITY;
        for j in 0..m {
            let mut v = s[(i, j)] * g[(j, c)];
            if let Some(r) = r {
                v += r[(j, c)];
            }
            best = best.max(v);
        }
        best + q.map_or(0.0, |q| q[(i, c)])
    })
}

/// Splits a filter over `[a ; b]` into the parts acting on `a` and on `b`.
fn split_filter(l: &Linear, a_dim: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let b_dim = l.input_dim() - a_dim;
    (l.w.rows(0, a_dim).into_owned(), l.w.rows(a_dim, b_dim).into_owned())
}

/// Spatial-temporal filtering encoder.
///
/// `F' = Norm(F + MHA(F, F, F))`, similarity `S = rowsoftmax(F' F_prev^T)`,
/// filtered `f''_i = max_j Filter([S(i,j) f_prev_j ; f_i])` and output
/// `Norm(F'' + MHA(F', F'', F''))`.
pub fn temporal_encode(f_obj_t: &FeatureMatrix, f_obj_prev: &FeatureMatrix, w: &BlockWeights) -> Result<FeatureMatrix> {
    check_features("temporal_encode", f_obj_t)?;
    check_features("temporal_encode", f_obj_prev)?;
    let d = w.config.d;
    if f_obj_t.shape() != f_obj_prev.shape() || f_obj_t.ncols() != d {
        return Err(shape(
            "temporal_encode",
            format!("frames are {:?} and {:?}, d = {d}", f_obj_t.shape(), f_obj_prev.shape()),
        ));
    }
    let t = &w.temporal;
    let f_dot = t.norm1.forward(&(f_obj_t + t.self_attn.forward(f_obj_t, f_obj_t, f_obj_t)));
    let s = softmax_rows(&(&f_dot * f_obj_prev.transpose()));
    let (w_prev, w_curr) = split_filter(&t.filter, d);
    let g = f_obj_prev * w_prev;
    let q = Linear { w: w_curr, b: t.filter.b.clone() }.forward(f_obj_t);
    let f_ddot = weighted_max_pool(&s, &g, None, Some(&q));
    Ok(t.norm2.forward(&(&f_ddot + t.cross_attn.forward(&f_dot, &f_ddot, &f_ddot))))
}

fn check_prior(f_obj_t: &FeatureMatrix, prior_feat: &FeatureMatrix, prior_coords: &DMatrix<f64>, d: usize) -> Result<()> {
    check_features("shape_filter_decode", f_obj_t)?;
    check_features("shape_filter_decode", prior_feat)?;
    check_features("shape_filter_decode", prior_coords)?;
    check_same_rows("shape_filter_decode", prior_feat, prior_coords)?;
    if prior_coords.ncols() != 3 || prior_feat.ncols() != d || f_obj_t.ncols() != d {
        return Err(shape(
            "shape_filter_decode",
            format!(
                "features {}x{}, prior {}x{}, coords {}x{}, d = {d}",
                f_obj_t.nrows(),
                f_obj_t.ncols(),
                prior_feat.nrows(),
                prior_feat.ncols(),
                prior_coords.nrows(),
                prior_coords.ncols()
            ),
        ));
    }
    Ok(())
}

/// Concatenated filter inputs `[S(i,j) f_prior_j ; rho_j]` for query row
/// `i`, one row per prior point.
pub fn shape_filter_inputs(
    f_obj_t: &FeatureMatrix,
    prior_feat: &FeatureMatrix,
    prior_coords: &DMatrix<f64>,
    i: usize,
    w: &BlockWeights,
) -> Result<DMatrix<f64>> {
    check_prior(f_obj_t, prior_feat, prior_coords, w.config.d)?;
    if i >= f_obj_t.nrows() {
        return Err(shape("shape_filter_inputs", format!("row {i} of {}", f_obj_t.nrows())));
    }
    let s = softmax_rows(&(f_obj_t.rows(i, 1) * prior_feat.transpose()));
    let mut weighted = prior_feat.clone();
    for (j, mut row) in weighted.row_iter_mut().enumerate() {
        row *= s[(0, j)];
    }
    Ok(hconcat(&weighted, prior_coords))
}

/// Shape-similarity filtering followed by the augmentation decoder.
///
/// `f'''_i = max_j Filter([S_pr(i,j) f_prior_j ; rho_j])`,
/// `F_aug = Norm(F''' + MHA(F''', F_temp, F_temp))`,
/// output `Norm(F_aug + FFN(F_aug))`.
pub fn shape_filter_decode(
    f_obj_t: &FeatureMatrix,
    f_temp: &FeatureMatrix,
    prior_feat: &FeatureMatrix,
    prior_coords: &DMatrix<f64>,
    w: &BlockWeights,
) -> Result<FeatureMatrix> {
    let d = w.config.d;
    check_prior(f_obj_t, prior_feat, prior_coords, d)?;
    check_features("shape_filter_decode", f_temp)?;
    if f_temp.shape() != f_obj_t.shape() {
        return Err(shape(
            "shape_filter_decode",
            format!("temporal features {:?} vs {:?}", f_temp.shape(), f_obj_t.shape()),
        ));
    }
    let sf = &w.shape;
    let s = softmax_rows(&(f_obj_t * prior_feat.transpose()));
    let (w_feat, w_coord) = split_filter(&sf.filter, d);
    let g = prior_feat * w_feat;
    let r = Linear { w: w_coord, b: sf.filter.b.clone() }.forward(prior_coords);
    let f_triple = weighted_max_pool(&s, &g, Some(&r), None);
    let f_aug = sf.norm1.forward(&(&f_triple + sf.cross_attn.forward(&f_triple, f_temp, f_temp)));
    let ffn = sf.ffn2.forward(&relu(sf.ffn1.forward(&f_aug)));
    Ok(sf.norm2.forward(&(f_aug + ffn)))
}

/// Low-rank attention with `(F_obj, F_temp, F_aug)` as query, key and value,
/// followed by a softmax head that turns learned keypoint queries into an
/// `n x N` projection with unit row sums.
pub fn keypoint_projection_forward(
    f_obj: &FeatureMatrix,
    f_temp: &FeatureMatrix,
    f_aug: &FeatureMatrix,
    w: &BlockWeights,
) -> Result<ProjectionMatrix> {
    for f in [f_obj, f_temp, f_aug] {
        check_features("keypoint_projection_forward", f)?;
        if f.shape() != f_obj.shape() || f.ncols() != w.config.d {
            return Err(shape(
                "keypoint_projection_forward",
                format!("inputs must all be N x {}", w.config.d),
            ));
        }
    }
    let kp = &w.keypoint;
    let h = kp.attn.forward(f_obj, f_temp, f_aug, f_temp);
    let keys = kp.out.forward(&h);
    let scale = 1.0 / (w.config.d as f64).sqrt();
    ProjectionMatrix::new(softmax_rows(&(&kp.queries * keys.transpose() * scale)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::weights::NeuralConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(d: usize, heads: usize, k: usize, n: usize) -> NeuralConfig {
        NeuralConfig { input_dim: 3, d, d_t: 4, heads, lowrank_k: k, keypoints: n }
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn wsa_single_point_reduces_to_value_offset() {
        let w = BlockWeights::seeded(cfg(4, 2, 3, 1), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = rand_mat(&mut rng, 1, 3);
        let pt = rand_mat(&mut rng, 1, 3);
        let (f_c, f_g) = wsa_forward(&img, &pt, &w).unwrap();
        let a = &w.wsa;
        let expect_c = relu(a.phi_c.forward(&(a.v.forward(&img) - a.q.forward(&img))));
        let expect_g = relu(a.phi_g.forward(&(a.v.forward(&pt) - a.q.forward(&pt))));
        assert!((f_c - expect_c).amax() < 1e-15);
        assert!((f_g - expect_g).amax() < 1e-15);
    }

    #[test]
    fn block_output_shapes() {
        let w = BlockWeights::seeded(cfg(8, 2, 5, 3), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in [3, 7, 12] {
            let (f_c, f_g) = wsa_forward(&rand_mat(&mut rng, n, 3), &rand_mat(&mut rng, n, 3), &w).unwrap();
            assert_eq!(f_c.shape(), (n, 8));
            assert_eq!(f_g.shape(), (n, 8));
            let f_obj = lowrank_fusion(&f_c, &f_g, &w).unwrap();
            assert_eq!(f_obj.shape(), (n, 8));
            let f_temp = temporal_encode(&f_obj, &rand_mat(&mut rng, n, 8), &w).unwrap();
            assert_eq!(f_temp.shape(), (n, 8));
            let f_aug = shape_filter_decode(&f_obj, &f_temp, &rand_mat(&mut rng, 5, 8), &rand_mat(&mut rng, 5, 3), &w).unwrap();
            assert_eq!(f_aug.shape(), (n, 8));
            let m = keypoint_projection_forward(&f_obj, &f_temp, &f_aug, &w).unwrap();
            assert_eq!(m.matrix().shape(), (3, n));
        }
    }

    #[test]
    fn shape_errors() {
        let w = BlockWeights::seeded(cfg(8, 2, 5, 3), 3).unwrap();
        let a = DMatrix::zeros(4, 3);
        assert!(wsa_forward(&a, &DMatrix::zeros(5, 3), &w).is_err());
        assert!(wsa_forward(&a, &DMatrix::zeros(4, 2), &w).is_err());
        assert!(temporal_encode(&DMatrix::zeros(4, 8), &DMatrix::zeros(3, 8), &w).is_err());
        let f = DMatrix::from_element(4, 8, 0.1);
        assert!(shape_filter_decode(&f, &f, &DMatrix::zeros(5, 8), &DMatrix::zeros(4, 3), &w).is_err());
        // Fewer points than keypoints.
        let few = DMatrix::from_element(2, 8, 0.1);
        assert!(keypoint_projection_forward(&few, &few, &few, &w).is_err());
    }

    #[test]
    fn temporal_encode_ignores_previous_frame_order() {
        let w = BlockWeights::seeded(cfg(8, 2, 5, 3), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = rand_mat(&mut rng, 6, 8);
        let prev = rand_mat(&mut rng, 6, 8);
        let perm = [3, 0, 5, 1, 4, 2];
        let shuffled = DMatrix::from_fn(6, 8, |i, c| prev[(perm[i], c)]);
        let a = temporal_encode(&f, &prev, &w).unwrap();
        let b = temporal_encode(&f, &shuffled, &w).unwrap();
        assert!((a - b).amax() < 1e-12);
    }

    #[test]
    fn zero_coordinates_only_clear_coordinate_half() {
        let w = BlockWeights::seeded(cfg(8, 2, 5, 3), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = rand_mat(&mut rng, 4, 8);
        let prior = rand_mat(&mut rng, 5, 8);
        let rho = rand_mat(&mut rng, 5, 3);
        let full = shape_filter_inputs(&f, &prior, &rho, 2, &w).unwrap();
        let zeroed = shape_filter_inputs(&f, &prior, &(&rho * 0.0), 2, &w).unwrap();
        assert_eq!(full.columns(0, 8), zeroed.columns(0, 8));
        assert!(zeroed.columns(8, 3).iter().all(|v| *v == 0.0));
        assert!(full.columns(8, 3).iter().any(|v| *v != 0.0));
    }

    #[test]
    fn projection_rows_are_convex_weights() {
        let w = BlockWeights::seeded(cfg(8, 2, 5, 4), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (a, b, c) = (rand_mat(&mut rng, 16, 8), rand_mat(&mut rng, 16, 8), rand_mat(&mut rng, 16, 8));
        let m = keypoint_projection_forward(&a, &b, &c, &w).unwrap();
        for row in m.matrix().row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|v| *v > 0.0));
        }
        let again = keypoint_projection_forward(&a, &b, &c, &w).unwrap();
        assert_eq!(m, again);

        // Keypoints stay inside the bounding box of the cloud.
        let points = rand_mat(&mut rng, 16, 3);
        let kp = crate::matching::project_keypoints(&m, &points).unwrap();
        for col in 0..3 {
            let (lo, hi) = (points.column(col).min(), points.column(col).max());
            assert!(kp.column(col).iter().all(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12));
        }
    }

    #[test]
    fn lowrank_output_bounded_by_pooled_values() {
        let w = BlockWeights::seeded(cfg(8, 2, 5, 3), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f_c = rand_mat(&mut rng, 10, 8);
        let f_g = rand_mat(&mut rng, 10, 8);
        let out = lowrank_fusion(&f_c, &f_g, &w).unwrap();
        let fused = relu(w.fusion.mlp.forward(&hconcat(&f_c, &f_g)));
        let pool = w.fusion.attn.pooling(&f_c);
        let values = pool.transpose() * w.fusion.attn.v.forward(&fused);
        assert!(out.amax() <= values.amax() + 1e-12);
    }
}
