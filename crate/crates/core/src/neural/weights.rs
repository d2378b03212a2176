//! Seeded block weights and their binary container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "AESVWT01"
//! count      u32      number of tensors
//! manifest   count x { name_len u32, name utf8, rows u32, cols u32 }
//! payload    f64 values of every tensor in manifest order, row-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{LayerNorm, Linear};
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 8] = b"AESVWT01";

/// Toy-scale dimensions of the feature blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NeuralConfig {
    /// Width of the per-point image and geometry inputs.
    pub input_dim: usize,
    /// Embedding width `d`.
    pub d: usize,
    /// Triplane feature width `d_T`.
    pub d_t: usize,
    /// Attention heads `h`.
    pub heads: usize,
    /// Low-rank context size `k`.
    pub lowrank_k: usize,
    /// Keypoints `n` produced by the projection head.
    pub keypoints: usize,
}

impl Default for NeuralConfig {
    fn default() -> Self {
        Self {
            input_dim: 6,
            d: 64,
            d_t: 32,
            heads: 4,
            lowrank_k: 64,
            keypoints: 16,
        }
    }
}

impl NeuralConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.input_dim,
            self.d,
            self.d_t,
            self.heads,
            self.lowrank_k,
            self.keypoints,
        ];
        if dims.contains(&0) {
            return Err(Error::Domain("neural dimensions must be positive".into()));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Domain(format!(
                "head count {} does not divide d = {}",
                self.heads, self.d
            )));
        }
        Ok(())
    }
}

/// Standard multi-head attention with an output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHead {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

/// Attention against a pooled `k`-row context. The pooling matrix is
/// `softmax over points` of `proj(source)`, one distribution per column.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankAttention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WsaWeights {
    /// Shared by both modalities.
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    /// Output maps (linear + ReLU) for the color and geometry branches.
    pub phi_c: Linear,
    pub phi_g: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights {
    /// MLP over `[F_c | F_g]`.
    pub mlp: Linear,
    pub attn: LowRankAttention,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalWeights {
    pub self_attn: MultiHead,
    pub norm1: LayerNorm,
    /// Filter over `[s * f_prev ; f]`.
    pub filter: Linear,
    pub cross_attn: MultiHead,
    pub norm2: LayerNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeFilterWeights {
    /// Filter over `[s * f_prior ; rho]`.
    pub filter: Linear,
    pub cross_attn: MultiHead,
    pub norm1: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub norm2: LayerNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointHeadWeights {
    pub attn: LowRankAttention,
    pub out: Linear,
    /// One learned query per keypoint, `n x d`.
    pub queries: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriplaneWeights {
    /// Per-plane maps from `[F_obj | F_temp | F_aug]` to `d_T`.
    pub planes: [Linear; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub config: NeuralConfig,
    pub wsa: WsaWeights,
    pub fusion: FusionWeights,
    pub temporal: TemporalWeights,
    pub shape: ShapeFilterWeights,
    pub keypoint: KeypointHeadWeights,
    pub triplane: TriplaneWeights,
}

fn multi_head(d: usize, heads: usize) -> MultiHead {
    MultiHead {
        heads,
        q: Linear::zeros(d, d),
        k: Linear::zeros(d, d),
        v: Linear::zeros(d, d),
        o: Linear::zeros(d, d),
    }
}

fn low_rank(d: usize, heads: usize, k: usize) -> LowRankAttention {
    LowRankAttention {
        heads,
        q: Linear::zeros(d, d),
        k: Linear::zeros(d, d),
        v: Linear::zeros(d, d),
        proj: Linear::zeros(d, k),
    }
}

impl BlockWeights {
    /// All-zero linear maps and identity normalizations of the right shapes.
    pub fn zeros(config: NeuralConfig) -> Result<Self> {
        config.validate()?;
        let NeuralConfig {
            input_dim,
            d,
            d_t,
            heads,
            lowrank_k,
            keypoints,
        } = config;
        Ok(Self {
            config,
            wsa: WsaWeights {
                q: Linear::zeros(input_dim, d),
                k: Linear::zeros(input_dim, d),
                v: Linear::zeros(input_dim, d),
                phi_c: Linear::zeros(d, d),
                phi_g: Linear::zeros(d, d),
            },
            fusion: FusionWeights {
                mlp: Linear::zeros(2 * d, d),
                attn: low_rank(d, heads, lowrank_k),
            },
            temporal: TemporalWeights {
                self_attn: multi_head(d, heads),
                norm1: LayerNorm::new(d),
                filter: Linear::zeros(2 * d, d),
                cross_attn: multi_head(d, heads),
                norm2: LayerNorm::new(d),
            },
            shape: ShapeFilterWeights {
                filter: Linear::zeros(d + 3, d),
                cross_attn: multi_head(d, heads),
                norm1: LayerNorm::new(d),
                ffn1: Linear::zeros(d, 2 * d),
                ffn2: Linear::zeros(2 * d, d),
                norm2: LayerNorm::new(d),
            },
            keypoint: KeypointHeadWeights {
                attn: low_rank(d, heads, lowrank_k),
                out: Linear::zeros(d, d),
                queries: DMatrix::zeros(keypoints, d),
            },
            triplane: TriplaneWeights {
                planes: std::array::from_fn(|_| Linear::zeros(3 * d, d_t)),
            },
        })
    }

    /// Linear maps drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`;
    /// normalization layers start at identity.
    pub fn seeded(config: NeuralConfig, seed: u64) -> Result<Self> {
        let mut w = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, t) in w.tensors_mut() {
            if name.contains("norm") {
                continue;
            }
            // Keypoint queries have no fan-in; scale them by the width.
            let fan_in = if name == "keypoint.queries" {
                t.ncols()
            } else if name.ends_with(".b") {
                continue;
            } else {
                t.nrows()
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            t.iter_mut().for_each(|v| *v = rng.random_range(-bound..=bound));
        }
        // Biases second, bounded by their own width.
        for (name, t) in w.tensors_mut() {
            if name.ends_with(".b") && !name.contains("norm") {
                let bound = 1.0 / (t.ncols() as f64).sqrt();
                t.iter_mut().for_each(|v| *v = rng.random_range(-bound..=bound));
            }
        }
        Ok(w)
    }

    /// Every tensor with a stable dotted name, in a fixed order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut DMatrix<f64>)> {
        let mut out = Vec::new();
        fn lin<'a>(out: &mut Vec<(String, &'a mut DMatrix<f64>)>, p: &str, l: &'a mut Linear) {
            out.push((format!("{p}.w"), &mut l.w));
            out.push((format!("{p}.b"), &mut l.b));
        }
        fn norm<'a>(out: &mut Vec<(String, &'a mut DMatrix<f64>)>, p: &str, n: &'a mut LayerNorm) {
            out.push((format!("{p}.gamma"), &mut n.gamma));
            out.push((format!("{p}.beta"), &mut n.beta));
        }
        fn mha<'a>(out: &mut Vec<(String, &'a mut DMatrix<f64>)>, p: &str, m: &'a mut MultiHead) {
            lin(out, &format!("{p}.q"), &mut m.q);
            lin(out, &format!("{p}.k"), &mut m.k);
            lin(out, &format!("{p}.v"), &mut m.v);
            lin(out, &format!("{p}.o"), &mut m.o);
        }
        fn lra<'a>(out: &mut Vec<(String, &'a mut DMatrix<f64>)>, p: &str, m: &'a mut LowRankAttention) {
            lin(out, &format!("{p}.q"), &mut m.q);
            lin(out, &format!("{p}.k"), &mut m.k);
            lin(out, &format!("{p}.v"), &mut m.v);
            lin(out, &format!("{p}.proj"), &mut m.proj);
        }
        lin(&mut out, "wsa.q", &mut self.wsa.q);
        lin(&mut out, "wsa.k", &mut self.wsa.k);
        lin(&mut out, "wsa.v", &mut self.wsa.v);
        lin(&mut out, "wsa.phi_c", &mut self.wsa.phi_c);
        lin(&mut out, "wsa.phi_g", &mut self.wsa.phi_g);
        lin(&mut out, "fusion.mlp", &mut self.fusion.mlp);
        lra(&mut out, "fusion.attn", &mut self.fusion.attn);
        mha(&mut out, "temporal.self_attn", &mut self.temporal.self_attn);
        norm(&mut out, "temporal.norm1", &mut self.temporal.norm1);
        lin(&mut out, "temporal.filter", &mut self.temporal.filter);
        mha(&mut out, "temporal.cross_attn", &mut self.temporal.cross_attn);
        norm(&mut out, "temporal.norm2", &mut self.temporal.norm2);
        lin(&mut out, "shape.filter", &mut self.shape.filter);
        mha(&mut out, "shape.cross_attn", &mut self.shape.cross_attn);
        norm(&mut out, "shape.norm1", &mut self.shape.norm1);
        lin(&mut out, "shape.ffn1", &mut self.shape.ffn1);
        lin(&mut out, "shape.ffn2", &mut self.shape.ffn2);
        norm(&mut out, "shape.norm2", &mut self.shape.norm2);
        lra(&mut out, "keypoint.attn", &mut self.keypoint.attn);
        lin(&mut out, "keypoint.out", &mut self.keypoint.out);
        out.push(("keypoint.queries".into(), &mut self.keypoint.queries));
        let [p0, p1, p2] = &mut self.triplane.planes;
        lin(&mut out, "triplane.xy", p0);
        lin(&mut out, "triplane.yz", p1);
        lin(&mut out, "triplane.xz", p2);
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut copy = self.clone();
        let c = copy.config;
        let dims = DMatrix::from_row_slice(
            1,
            6,
            &[c.input_dim, c.d, c.d_t, c.heads, c.lowrank_k, c.keypoints].map(|v| v as f64),
        );
        let mut tensors: Vec<(String, DMatrix<f64>)> = vec![("config.dims".into(), dims)];
        tensors.extend(copy.tensors_mut().into_iter().map(|(n, t)| (n, t.clone())));

        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
        }
        for (_, t) in &tensors {
            for r in 0..t.nrows() {
                for c in 0..t.ncols() {
                    out.extend_from_slice(&t[(r, c)].to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic).map_err(|_| truncated())?;
        if &magic != WEIGHTS_MAGIC {
            return Err(Error::Format("not a weights file (bad magic)".into()));
        }
        let count = read_u32(&mut cur)? as usize;
        let mut manifest = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = read_u32(&mut cur)? as usize;
            if len > cur.len() {
                return Err(truncated());
            }
            let name = std::str::from_utf8(&cur[..len])
                .map_err(|_| Error::Format("tensor name is not utf-8".into()))?
                .to_string();
            cur = &cur[len..];
            let rows = read_u32(&mut cur)? as usize;
            let cols = read_u32(&mut cur)? as usize;
            manifest.push((name, rows, cols));
        }
        let mut tensors = Vec::with_capacity(manifest.len());
        for (name, rows, cols) in manifest {
            let need = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(truncated)?;
            if need > cur.len() {
                return Err(truncated());
            }
            let mut t = DMatrix::zeros(rows, cols);
            for r in 0..rows {
                for c in 0..cols {
                    let mut b = [0u8; 8];
                    cur.read_exact(&mut b).map_err(|_| truncated())?;
                    t[(r, c)] = f64::from_le_bytes(b);
                }
            }
            tensors.push((name, t));
        }
        if !cur.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", cur.len())));
        }

        let dims = match tensors.first() {
            Some((n, t)) if n == "config.dims" && t.len() == 6 => t.clone(),
            _ => return Err(Error::Format("missing config.dims tensor".into())),
        };
        let dim = |i: usize| dims[i] as usize;
        let config = NeuralConfig {
            input_dim: dim(0),
            d: dim(1),
            d_t: dim(2),
            heads: dim(3),
            lowrank_k: dim(4),
            keypoints: dim(5),
        };
        let mut w = Self::zeros(config)?;
        let mut slots = w.tensors_mut();
        if slots.len() != tensors.len() - 1 {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                slots.len(),
                tensors.len() - 1
            )));
        }
        for ((name, slot), (file_name, t)) in slots.iter_mut().zip(tensors.into_iter().skip(1)) {
            if *name != file_name {
                return Err(Error::Format(format!("expected tensor {name}, found {file_name}")));
            }
            if slot.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            **slot = t;
        }
        drop(slots);
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn truncated() -> Error {
    Error::Format("weights file is truncated".into())
}

fn read_u32(cur: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    cur.read_exact(&mut b).map_err(|_| truncated())?;
    Ok(u32::from_le_bytes(b))
}
