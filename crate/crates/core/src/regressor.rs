//! The scene-agnostic coordinate regressor `f_θ(e, C) → (y, σ_y)` and its
//! losses.
//!
//! A patch embedding is projected to the model width and refined by a stack
//! of cross-attention blocks that attend over the map-code tokens (keys and
//! values, no positional encoding). A two-layer MLP head without
//! normalization emits the scene coordinate and a log-scale `s`, with
//! `σ_y = exp(clamp(s, −6, 6))`.

use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    cross_attention_with, project_kv, CrossAttentionNodes, Graph, NamedTensors, NodeId, Real, Tensor,
    LOG_SIGMA_CLAMP,
};
use crate::binio::{FormatError, Reader, Writer};
use crate::geometry::{project, Intrinsics, PoseSE3, Z_MIN};
use crate::seeds::{self, stream};
use crate::Error;

pub const MAP_MAGIC: &[u8; 8] = b"ACEGMAP1";
/// Standard deviation of freshly initialized map-code entries.
pub const MAP_CODE_INIT_STD: f64 = 0.01;
/// Reprojection error above which a prediction is treated as invalid.
pub const MAX_REPROJ_PX: f64 = 1000.0;
/// Depth-prior distance when a scene provides none.
pub const DEFAULT_PRIOR_DEPTH: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegressorConfig {
    pub d_feat: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub ffn_ratio: usize,
    pub d_map: usize,
    pub head_hidden: usize,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            d_feat: 32,
            d_model: 64,
            n_blocks: 2,
            n_heads: 2,
            ffn_ratio: 4,
            d_map: 64,
            head_hidden: 64,
        }
    }
}

impl RegressorConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let c = self;
        if c.d_feat == 0 || c.d_model < 2 || c.n_blocks == 0 || c.d_map < 2 || c.head_hidden == 0 || c.ffn_ratio == 0 {
            return Err(Error::Config(format!("degenerate regressor dims {c:?}")));
        }
        if c.n_heads == 0 || c.d_model % c.n_heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide d_model {}", c.n_heads, c.d_model)));
        }
        Ok(())
    }

    /// Parameter names and shapes in canonical order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (dm, dk, ff) = (self.d_model, self.d_map, self.d_model * self.ffn_ratio);
        let mut out = vec![
            ("input.w".to_string(), vec![dm, self.d_feat]),
            ("input.b".to_string(), vec![dm]),
        ];
        for b in 0..self.n_blocks {
            let p = |s: &str| format!("block{b}.{s}");
            out.extend([
                (p("ln_q.g"), vec![dm]),
                (p("ln_q.b"), vec![dm]),
                (p("ln_kv.g"), vec![dk]),
                (p("ln_kv.b"), vec![dk]),
                (p("wq.w"), vec![dm, dm]),
                (p("wq.b"), vec![dm]),
                (p("wk.w"), vec![dm, dk]),
                (p("wk.b"), vec![dm]),
                (p("wv.w"), vec![dm, dk]),
                (p("wv.b"), vec![dm]),
                (p("wo.w"), vec![dm, dm]),
                (p("wo.b"), vec![dm]),
                (p("ln_ff.g"), vec![dm]),
                (p("ln_ff.b"), vec![dm]),
                (p("ff1.w"), vec![ff, dm]),
                (p("ff1.b"), vec![ff]),
                (p("ff2.w"), vec![dm, ff]),
                (p("ff2.b"), vec![dm]),
            ]);
        }
        out.extend([
            ("head.w1".to_string(), vec![self.head_hidden, dm]),
            ("head.b1".to_string(), vec![self.head_hidden]),
            ("head.w2".to_string(), vec![4, self.head_hidden]),
            ("head.b2".to_string(), vec![4]),
        ]);
        out
    }
}

/// θ: every weight of the regressor, in [`RegressorConfig::layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorParams<T> {
    pub config: RegressorConfig,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> RegressorParams<T> {
    pub fn init(config: RegressorConfig, seed: u64) -> Result<Self, Error> {
        config.validate()?;
        let mut rng = seeds::rng(seed, &[stream::PARAMS]);
        let tensors = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with(".g") {
                    Tensor::filled(&shape, T::one())
                } else if shape.len() == 1 {
                    Tensor::zeros(&shape)
                } else {
                    let std = 1.0 / (shape[1] as f64).sqrt();
                    let normal = Normal::new(0.0, std).unwrap();
                    Tensor::from_fn(&shape, |_| T::lit(normal.sample(&mut rng)))
                }
            })
            .collect();
        Ok(Self { config, tensors })
    }

    pub fn names(&self) -> Vec<String> {
        self.config.layout().into_iter().map(|(n, _)| n).collect()
    }

    pub fn cast<U: Real>(&self) -> RegressorParams<U> {
        RegressorParams {
            config: self.config,
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }

    /// Adds θ to the graph, either as trainable parameters or as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> RegressorNodes {
        let ids: Vec<NodeId> = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.leaf(t.clone()) })
            .collect();
        RegressorNodes::from_ids(&self.config, ids)
    }
}

impl RegressorParams<f32> {
    pub fn to_named(&self) -> NamedTensors {
        let mut nt = NamedTensors::new();
        for (name, t) in self.names().into_iter().zip(&self.tensors) {
            nt.push(name, t.clone());
        }
        nt
    }

    /// Rebuilds θ from named tensors; every layout entry must be present with
    /// the expected shape.
    pub fn from_named(config: RegressorConfig, nt: &NamedTensors) -> Result<Self, Error> {
        config.validate()?;
        let mut tensors = Vec::new();
        for (name, shape) in config.layout() {
            let t = nt
                .get(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
            tensors.push(t.clone());
        }
        Ok(Self { config, tensors })
    }

    /// Infers the architecture from tensor shapes (head count is not
    /// recoverable from shapes and must be supplied).
    pub fn infer_config(nt: &NamedTensors, n_heads: usize) -> Result<RegressorConfig, Error> {
        let shape = |n: &str| {
            nt.get(n)
                .map(|t| t.shape().to_vec())
                .ok_or_else(|| Error::Config(format!("checkpoint lacks {n}")))
        };
        let input = shape("input.w")?;
        let wk = shape("block0.wk.w")?;
        let ff1 = shape("block0.ff1.w")?;
        let head = shape("head.w1")?;
        let n_blocks = (0..).take_while(|b| nt.get(&format!("block{b}.wq.w")).is_some()).count();
        Ok(RegressorConfig {
            d_feat: input[1],
            d_model: input[0],
            n_blocks,
            n_heads,
            ffn_ratio: ff1[0] / input[0].max(1),
            d_map: wk[1],
            head_hidden: head[0],
        })
    }
}

#[derive(Debug, Clone)]
pub struct RegressorNodes {
    pub ids: Vec<NodeId>,
    input: (NodeId, NodeId),
    blocks: Vec<CrossAttentionNodes>,
    head: ((NodeId, NodeId), (NodeId, NodeId)),
}

impl RegressorNodes {
    /// Assigns graph nodes, given in layout order, to their roles.
    pub fn from_ids(config: &RegressorConfig, ids: Vec<NodeId>) -> Self {
        let mut it = ids.iter().copied();
        let mut pair = || (it.next().unwrap(), it.next().unwrap());
        let input = pair();
        let blocks = (0..config.n_blocks)
            .map(|_| CrossAttentionNodes {
                heads: config.n_heads,
                ln_q: pair(),
                ln_kv: pair(),
                wq: pair(),
                wk: pair(),
                wv: pair(),
                wo: pair(),
                ln_ff: pair(),
                ff1: pair(),
                ff2: pair(),
            })
            .collect();
        let h1 = pair();
        let h2 = pair();
        RegressorNodes {
            ids,
            input,
            blocks,
            head: (h1, h2),
        }
    }
}

/// Forward pass for `n` embeddings (`[n, d_feat]`) against one map code
/// (`[N_C, d_map]`). Returns `[n, 4]`: xyz followed by the raw log-scale.
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    nodes: &RegressorNodes,
    embeddings: NodeId,
    code: NodeId,
) -> Result<NodeId, Error> {
    let mut x = g.linear(embeddings, nodes.input.0, nodes.input.1)?;
    for block in &nodes.blocks {
        let kv = project_kv(g, code, block)?;
        x = cross_attention_with(g, x, kv, block)?;
    }
    let ((w1, b1), (w2, b2)) = nodes.head;
    let h = g.linear(x, w1, b1)?;
    let h = g.gelu(h)?;
    Ok(g.linear(h, w2, b2)?)
}

/// Scene-specific set of learnable embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct MapCode {
    /// `[N_C, D_map]`; row order carries no meaning.
    pub tokens: Tensor<f32>,
    pub scene_id: String,
    pub iterations: u64,
    /// Length of one scene unit in meters (informational).
    pub units_scale: f64,
}

pub fn init_map_code(n_c: usize, d_map: usize, seed: u64) -> Result<MapCode, Error> {
    if n_c == 0 || d_map == 0 {
        return Err(Error::Config(format!("map code needs N_C, D_map ≥ 1, got {n_c}×{d_map}")));
    }
    let mut rng = seeds::rng(seed, &[stream::CODE]);
    let normal = Normal::new(0.0, MAP_CODE_INIT_STD).unwrap();
    Ok(MapCode {
        tokens: Tensor::from_fn(&[n_c, d_map], |_| normal.sample(&mut rng) as f32),
        scene_id: String::new(),
        iterations: 0,
        units_scale: 1.0,
    })
}

impl MapCode {
    pub fn n_tokens(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn tokens_as<T: Real>(&self) -> Tensor<T> {
        self.tokens.cast()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_magic(MAP_MAGIC);
        w.u32(self.n_tokens() as u32);
        w.u32(self.dim() as u32);
        w.str(&self.scene_id);
        w.f64(self.units_scale);
        w.u64(self.iterations);
        w.f32s(self.tokens.data());
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::expect_magic(bytes, MAP_MAGIC)?;
        let n_c = r.u32()? as usize;
        let d = r.u32()? as usize;
        if n_c == 0 || d == 0 {
            return Err(FormatError::Invalid(format!("empty map code {n_c}×{d}")));
        }
        let scene_id = r.str()?;
        let units_scale = r.f64()?;
        let iterations = r.u64()?;
        let data = r.f32s(n_c * d)?;
        r.finish()?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FormatError::Invalid("non-finite map code entry".into()));
        }
        Ok(Self {
            tokens: Tensor::new(vec![n_c, d], data).map_err(|e| FormatError::Invalid(e.to_string()))?,
            scene_id,
            iterations,
            units_scale,
        })
    }

    /// Size of the token payload in bytes (f32 storage).
    pub fn payload_bytes(&self) -> usize {
        self.tokens.len() * std::mem::size_of::<f32>()
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Ok(Self::from_bytes(&std::fs::read(path)?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordPrediction {
    pub y: Vector3<f64>,
    pub sigma: f64,
}

impl CoordPrediction {
    pub fn from_raw<T: Real>(row: &[T]) -> Self {
        let s = row[3].as_f64().clamp(-LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP);
        Self {
            y: Vector3::new(row[0].as_f64(), row[1].as_f64(), row[2].as_f64()),
            sigma: s.exp(),
        }
    }
}

/// Predictions for every row of `embeddings` (`[n, d_feat]`).
pub fn regress_batch<T: Real>(
    params: &RegressorParams<T>,
    embeddings: &Tensor<T>,
    code: &Tensor<T>,
) -> Result<Vec<CoordPrediction>, Error> {
    let c = params.config;
    let (_, d) = embeddings.as_matrix_dims();
    if d != c.d_feat || code.rank() != 2 || code.shape()[1] != c.d_map {
        return Err(Error::Config(format!(
            "embedding width {d} / code {:?} do not match regressor {}/{}",
            code.shape(),
            c.d_feat,
            c.d_map
        )));
    }
    let mut g = Graph::new();
    let nodes = params.bind(&mut g, false);
    let x = g.leaf(embeddings.clone());
    let cn = g.leaf(code.clone());
    let out = forward(&mut g, &nodes, x, cn)?;
    let v = g.value(out);
    let rows = v.as_matrix_dims().0;
    Ok((0..rows).map(|r| CoordPrediction::from_raw(v.row(r))).collect())
}

pub fn regress<T: Real>(params: &RegressorParams<T>, e: &[T], code: &Tensor<T>) -> Result<CoordPrediction, Error> {
    let x = Tensor::vector(e.to_vec());
    Ok(regress_batch(params, &x, code)?[0])
}

/// `log σ + √2 ‖ŷ − y‖ / σ`
pub fn laplace_nll_3d(pred: &CoordPrediction, y_gt: &Vector3<f64>) -> f64 {
    pred.sigma.ln() + std::f64::consts::SQRT_2 * (pred.y - y_gt).norm() / pred.sigma
}

pub fn laplace_nll_2d(pixel: &Vector2<f64>, sigma_x: f64, pixel_gt: &Vector2<f64>) -> f64 {
    sigma_x.ln() + std::f64::consts::SQRT_2 * (pixel - pixel_gt).norm() / sigma_x
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPrediction {
    pub pixel: Vector2<f64>,
    pub sigma_x: f64,
    pub z_cam: f64,
    pub valid: bool,
}

/// Projects a prediction into the image. The scale is propagated to first
/// order, `σ_x = σ_y · f̄ / max(z, z_min)`; the prediction is valid when it
/// lies in front of the camera and within [`MAX_REPROJ_PX`] of the observed
/// pixel.
pub fn project_prediction(
    pred: &CoordPrediction,
    k: &Intrinsics,
    t_wc: &PoseSE3,
    observed: &Vector2<f64>,
) -> ProjectedPrediction {
    let p = project(k, t_wc, &pred.y);
    let sigma_x = pred.sigma * k.focal_mean() / p.z_cam.max(Z_MIN);
    let err = (p.pixel - observed).norm();
    ProjectedPrediction {
        pixel: p.pixel,
        sigma_x,
        z_cam: p.z_cam,
        valid: p.in_front() && err.is_finite() && err <= MAX_REPROJ_PX,
    }
}

/// Point at depth `d0` along the camera-frame unit ray, in world coordinates.
pub fn depth_prior_target(ray_cam: &Vector3<f64>, t_wc: &PoseSE3, d0: f64) -> Vector3<f64> {
    t_wc.transform_point(&(ray_cam * d0))
}

pub fn depth_prior_loss(pred: &CoordPrediction, ray_cam: &Vector3<f64>, t_wc: &PoseSE3, d0: f64) -> f64 {
    laplace_nll_3d(pred, &depth_prior_target(ray_cam, t_wc, d0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{ReprojLimits, ReprojTarget};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> RegressorConfig {
        RegressorConfig {
            d_feat: 6,
            d_model: 8,
            n_blocks: 2,
            n_heads: 2,
            ffn_ratio: 2,
            d_map: 5,
            head_hidden: 7,
        }
    }

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn permute_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
        let (_, c) = t.as_matrix_dims();
        let data = perm.iter().flat_map(|&r| t.row(r).to_vec()).collect();
        Tensor::new(vec![perm.len(), c], data).unwrap()
    }

    #[test]
    fn permutation_and_duplication_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = RegressorParams::<f64>::init(small(), 3).unwrap();
        for n_c in [1usize, 2, 7, 64] {
            let code = random_tensor(&[n_c, 5], &mut rng);
            let e = random_tensor(&[4, 6], &mut rng);
            let base = regress_batch(&params, &e, &code).unwrap();
            let mut perm: Vec<usize> = (0..n_c).collect();
            for i in (1..n_c).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let permuted = regress_batch(&params, &e, &permute_rows(&code, &perm)).unwrap();
            let doubled: Vec<usize> = (0..n_c).chain(0..n_c).collect();
            let dup = regress_batch(&params, &e, &permute_rows(&code, &doubled)).unwrap();
            for ((a, b), c) in base.iter().zip(&permuted).zip(&dup) {
                let scale = a.y.norm().max(1e-300);
                assert!((a.y - b.y).norm() / scale < 1e-10);
                assert!((a.sigma - b.sigma).abs() / a.sigma < 1e-10);
                assert!((a.y - c.y).norm() / scale < 1e-9);
            }
        }
    }

    #[test]
    fn batched_equals_single_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = RegressorParams::<f64>::init(small(), 4).unwrap();
        let code = random_tensor(&[3, 5], &mut rng);
        let e = random_tensor(&[8, 6], &mut rng);
        let batch = regress_batch(&params, &e, &code).unwrap();
        for (i, b) in batch.iter().enumerate() {
            let one = regress(&params, e.row(i), &code).unwrap();
            assert!((one.y - b.y).norm() < 1e-12);
            assert!((one.sigma - b.sigma).abs() < 1e-12);
            assert!(one.sigma >= (-6f64).exp() && one.sigma <= 6f64.exp());
        }
        assert!(regress(&params, &[0.0; 5], &code).is_err());
    }

    #[test]
    fn map_code_init_statistics_and_size() {
        let a = init_map_code(128, 128, 9).unwrap();
        let b = init_map_code(128, 128, 9).unwrap();
        assert_eq!(a, b);
        let n = a.tokens.len() as f64;
        let mean = a.tokens.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = a.tokens.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!((0.008..=0.012).contains(&var.sqrt()));
        let big = init_map_code(4096, 768, 1).unwrap();
        assert_eq!(big.payload_bytes(), 12_582_912);
        assert!(init_map_code(0, 4, 1).is_err());
    }

    #[test]
    fn map_code_file_roundtrip_and_errors() {
        let mut c = init_map_code(5, 3, 2).unwrap();
        c.scene_id = "scene_0007".into();
        c.iterations = 42;
        let bytes = c.to_bytes();
        assert_eq!(MapCode::from_bytes(&bytes).unwrap(), c);
        assert!(MapCode::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[3] = b'Z';
        assert!(matches!(MapCode::from_bytes(&bad), Err(FormatError::BadMagic { .. })));
    }

    #[test]
    fn laplace_identities() {
        let p = |y: [f64; 3], s: f64| CoordPrediction {
            y: Vector3::from(y),
            sigma: s,
        };
        assert_eq!(laplace_nll_3d(&p([0.0; 3], 1.0), &Vector3::zeros()), 0.0);
        let v = laplace_nll_3d(&p([1.0, 0.0, 0.0], 1.0), &Vector3::zeros());
        assert!((v - std::f64::consts::SQRT_2).abs() < 1e-12);
        let px = Vector2::new(3.0, 4.0);
        assert_eq!(laplace_nll_2d(&px, 1.0, &px), 0.0);
        assert!((laplace_nll_2d(&Vector2::new(0.0, 1.0), 1.0, &Vector2::zeros()) - std::f64::consts::SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn projection_examples() {
        let k = Intrinsics::new(100.0, 100.0, 50.0, 50.0).unwrap();
        let id = PoseSE3::identity();
        let pred = CoordPrediction {
            y: Vector3::new(0.0, 0.0, 2.0),
            sigma: 0.02,
        };
        let pp = project_prediction(&pred, &k, &id, &Vector2::new(50.0, 50.0));
        assert!((pp.sigma_x - 1.0).abs() < 1e-12);
        assert!(pp.valid);
        let behind = CoordPrediction {
            y: Vector3::new(0.0, 0.0, -2.0),
            sigma: 0.02,
        };
        assert!(!project_prediction(&behind, &k, &id, &Vector2::new(50.0, 50.0)).valid);
        let near = CoordPrediction {
            y: Vector3::new(0.0, 0.0, Z_MIN / 2.0),
            sigma: 0.02,
        };
        let pp = project_prediction(&near, &k, &id, &Vector2::new(50.0, 50.0));
        assert!((pp.sigma_x - 0.02 * 100.0 / Z_MIN).abs() < 1e-12);
        assert!(!pp.valid);
        let far_off = CoordPrediction {
            y: Vector3::new(30.0, 0.0, 1.0),
            sigma: 0.02,
        };
        assert!(!project_prediction(&far_off, &k, &id, &Vector2::new(50.0, 50.0)).valid);
    }

    #[test]
    fn depth_prior_examples() {
        let k = Intrinsics::new(100.0, 100.0, 50.0, 50.0).unwrap();
        let ray = k.ray(&Vector2::new(50.0, 50.0));
        let target = depth_prior_target(&ray, &PoseSE3::identity(), 2.0);
        assert!((target - Vector3::new(0.0, 0.0, 2.0)).norm() < 1e-15);
        let pred = CoordPrediction { y: target, sigma: 1.0 };
        assert_eq!(depth_prior_loss(&pred, &ray, &PoseSE3::identity(), 2.0), 0.0);
    }

    #[test]
    fn fused_reprojection_matches_scalar_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let k = Intrinsics::new(110.0, 90.0, 60.0, 40.0).unwrap();
        let pose = PoseSE3::from_axis_angle(Vector3::new(0.1, -0.2, 0.05), Vector3::new(0.3, 0.1, -0.5));
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for i in 0..40 {
            let depth = if i % 5 == 0 { -1.0 } else { rng.gen_range(1.0..4.0) };
            let pc = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), depth);
            let y = pose.transform_point(&pc);
            let s: f64 = rng.gen_range(-2.0..2.0);
            rows.extend([y.x, y.y, y.z, s]);
            let obs = Vector2::new(rng.gen_range(0.0..120.0), rng.gen_range(0.0..80.0));
            let ray = k.ray(&obs);
            let prior = depth_prior_target(&ray, &pose, 2.0);
            targets.push(ReprojTarget {
                pixel: [obs.x, obs.y],
                intrinsics: k.as_array(),
                rotation: std::array::from_fn(|j| pose.rotation[(j / 3, j % 3)]),
                translation: [pose.translation.x, pose.translation.y, pose.translation.z],
                prior: [prior.x, prior.y, prior.z],
            });
        }
        let mut g = Graph::<f64>::new();
        let p = g.leaf(Tensor::matrix(40, 4, rows.clone()).unwrap());
        let limits = ReprojLimits {
            z_min: Z_MIN,
            max_reproj_px: MAX_REPROJ_PX,
        };
        let (l, valid) = g.reprojection_nll(p, &targets, limits).unwrap();
        for (i, tg) in targets.iter().enumerate() {
            let pred = CoordPrediction::from_raw(&rows[i * 4..i * 4 + 4]);
            let obs = Vector2::new(tg.pixel[0], tg.pixel[1]);
            let pp = project_prediction(&pred, &k, &pose, &obs);
            assert_eq!(pp.valid, valid[i]);
            let expect = if pp.valid {
                laplace_nll_2d(&pp.pixel, pp.sigma_x, &obs)
            } else {
                laplace_nll_3d(&pred, &Vector3::from(tg.prior))
            };
            assert!((g.value(l).data()[i] - expect).abs() < 1e-10);
        }
    }
}
