//! Loop-level reference evaluations of the feature blocks, written against
//! plain `Vec<Vec<f64>>` with no shared code paths.
#![allow(dead_code)]

use aeroservo::neural::ops::{LayerNorm, Linear};
use aeroservo::neural::weights::{BlockWeights, LowRankAttention, MultiHead};
use nalgebra::DMatrix;

pub type Mat = Vec<Vec<f64>>;

pub fn to_vec(m: &DMatrix<f64>) -> Mat {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

pub fn max_abs_diff(a: &Mat, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.len(), b.nrows());
    let mut worst = 0.0f64;
    for (i, row) in a.iter().enumerate() {
        assert_eq!(row.len(), b.ncols());
        for (j, v) in row.iter().enumerate() {
            worst = worst.max((v - b[(i, j)]).abs());
        }
    }
    worst
}

fn linear(x: &Mat, l: &Linear) -> Mat {
    x.iter()
        .map(|row| {
            (0..l.w.ncols())
                .map(|o| {
                    let mut acc = l.b[(0, o)];
                    for (c, v) in row.iter().enumerate() {
                        acc += v * l.w[(c, o)];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn relu(x: Mat) -> Mat {
    x.into_iter().map(|r| r.into_iter().map(|v| if v > 0.0 { v } else { 0.0 }).collect()).collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn sub(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p - q).collect()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn layer_norm(x: &Mat, n: &LayerNorm) -> Mat {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            row.iter()
                .enumerate()
                .map(|(c, v)| (v - mean) / (var + 1e-5).sqrt() * n.gamma[(0, c)] + n.beta[(0, c)])
                .collect()
        })
        .collect()
}

/// `softmax(q k^T * scale) v` for one head given explicit matrices.
fn attend(q: &Mat, k: &Mat, v: &Mat, scale: f64) -> Mat {
    q.iter()
        .map(|qi| {
            let scores: Vec<f64> = k.iter().map(|kj| dot(qi, kj) * scale).collect();
            let a = softmax(&scores);
            (0..v[0].len())
                .map(|c| a.iter().zip(v).map(|(w, vj)| w * vj[c]).sum())
                .collect()
        })
        .collect()
}

fn columns(x: &Mat, start: usize, len: usize) -> Mat {
    x.iter().map(|r| r[start..start + len].to_vec()).collect()
}

fn heads_attend(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![Vec::with_capacity(d); q.len()];
    for h in 0..heads {
        let part = attend(
            &columns(q, h * dh, dh),
            &columns(k, h * dh, dh),
            &columns(v, h * dh, dh),
            1.0 / (dh as f64).sqrt(),
        );
        for (o, p) in out.iter_mut().zip(part) {
            o.extend(p);
        }
    }
    out
}

pub fn multi_head(q_in: &Mat, k_in: &Mat, v_in: &Mat, m: &MultiHead) -> Mat {
    let out = heads_attend(&linear(q_in, &m.q), &linear(k_in, &m.k), &linear(v_in, &m.v), m.heads);
    linear(&out, &m.o)
}

/// Column-wise softmax over the rows of `proj(source)`.
fn pooling(source: &Mat, l: &LowRankAttention) -> Mat {
    let p = linear(source, &l.proj);
    let (n, k) = (p.len(), p[0].len());
    let mut out = vec![vec![0.0; k]; n];
    for c in 0..k {
        let col: Vec<f64> = p.iter().map(|r| r[c]).collect();
        for (i, v) in softmax(&col).into_iter().enumerate() {
            out[i][c] = v;
        }
    }
    out
}

/// `pool^T x`.
fn pool_rows(pool: &Mat, x: &Mat) -> Mat {
    let k = pool[0].len();
    (0..k)
        .map(|r| {
            (0..x[0].len())
                .map(|c| pool.iter().zip(x).map(|(p, xi)| p[r] * xi[c]).sum())
                .collect()
        })
        .collect()
}

pub fn low_rank(q_in: &Mat, k_in: &Mat, v_in: &Mat, pool: &Mat, l: &LowRankAttention) -> Mat {
    let k = pool_rows(pool, &linear(k_in, &l.k));
    let v = pool_rows(pool, &linear(v_in, &l.v));
    heads_attend(&linear(q_in, &l.q), &k, &v, l.heads)
}

/// Standard quadratic attention with the same per-head projections.
pub fn quadratic(q_in: &Mat, k_in: &Mat, v_in: &Mat, l: &LowRankAttention) -> Mat {
    heads_attend(&linear(q_in, &l.q), &linear(k_in, &l.k), &linear(v_in, &l.v), l.heads)
}

pub fn wsa(img: &Mat, pt: &Mat, w: &BlockWeights) -> (Mat, Mat) {
    let a = &w.wsa;
    let (qi, ki, vi) = (linear(img, &a.q), linear(img, &a.k), linear(img, &a.v));
    let (qp, kp, vp) = (linear(pt, &a.q), linear(pt, &a.k), linear(pt, &a.v));
    let f_c = relu(linear(&sub(&attend(&qi, &kp, &vi, 1.0), &qi), &a.phi_c));
    let f_g = relu(linear(&sub(&attend(&qp, &ki, &vp, 1.0), &qp), &a.phi_g));
    (f_c, f_g)
}

pub fn fused(f_c: &Mat, f_g: &Mat, w: &BlockWeights) -> Mat {
    let joined: Mat = f_c.iter().zip(f_g).map(|(a, b)| a.iter().chain(b).cloned().collect()).collect();
    relu(linear(&joined, &w.fusion.mlp))
}

pub fn fusion(f_c: &Mat, f_g: &Mat, w: &BlockWeights) -> Mat {
    let x = fused(f_c, f_g, w);
    low_rank(&x, &x, &x, &pooling(f_c, &w.fusion.attn), &w.fusion.attn)
}

pub fn identity_pool(n: usize) -> Mat {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

/// `max_j filter([s_ij * a_j ; b_ij])` with the full concatenated input.
fn filtered_max(s: &Mat, a: &Mat, b: impl Fn(usize, usize) -> Vec<f64>, filter: &Linear) -> Mat {
    (0..s.len())
        .map(|i| {
            let rows: Mat = (0..a.len())
                .map(|j| a[j].iter().map(|v| s[i][j] * v).chain(b(i, j)).collect())
                .collect();
            let mapped = linear(&rows, filter);
            (0..mapped[0].len())
                .map(|c| mapped.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max))
                .collect()
        })
        .collect()
}

fn similarity(a: &Mat, b: &Mat) -> Mat {
    a.iter().map(|ai| softmax(&b.iter().map(|bj| dot(ai, bj)).collect::<Vec<_>>())).collect()
}

pub fn temporal(f: &Mat, prev: &Mat, w: &BlockWeights) -> Mat {
    let t = &w.temporal;
    let f_dot = layer_norm(&add(f, &multi_head(f, f, f, &t.self_attn)), &t.norm1);
    let s = similarity(&f_dot, prev);
    let f_ddot = filtered_max(&s, prev, |i, _| f[i].clone(), &t.filter);
    layer_norm(&add(&f_ddot, &multi_head(&f_dot, &f_ddot, &f_ddot, &t.cross_attn)), &t.norm2)
}

pub fn shape_filter(f: &Mat, f_temp: &Mat, prior: &Mat, rho: &Mat, w: &BlockWeights) -> Mat {
    let sf = &w.shape;
    let s = similarity(f, prior);
    let f3 = filtered_max(&s, prior, |_, j| rho[j].clone(), &sf.filter);
    let f_aug = layer_norm(&add(&f3, &multi_head(&f3, f_temp, f_temp, &sf.cross_attn)), &sf.norm1);
    let ffn = linear(&relu(linear(&f_aug, &sf.ffn1)), &sf.ffn2);
    layer_norm(&add(&f_aug, &ffn), &sf.norm2)
}

/// Seeded weights with the normalization gains and offsets also randomized,
/// so the reference exercises every parameter.
pub fn oracle_weights(config: aeroservo::neural::NeuralConfig, seed: u64) -> BlockWeights {
    use rand::{Rng, SeedableRng};
    let mut w = BlockWeights::seeded(config, seed).expect("valid config");
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (name, t) in w.tensors_mut() {
        if name.contains("norm") {
            t.iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
        }
    }
    w
}

pub fn random_matrix(rng: &mut impl rand::Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}
