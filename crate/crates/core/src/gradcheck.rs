//! Finite-difference verification of every differentiable graph operation.
//!
//! Each check builds a small random problem in 64-bit precision, contracts
//! the op output with fixed random weights to get a scalar, and compares the
//! reverse-mode gradient of every input against central differences.

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{cross_attention, CrossAttentionNodes, Graph, NodeId, ReprojLimits, ReprojTarget, Tensor};
use crate::geometry::{Intrinsics, PoseSE3, Z_MIN};
use crate::regressor::{forward, RegressorConfig, RegressorNodes, RegressorParams, MAX_REPROJ_PX};
use crate::seeds;
use crate::Error;

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Gradient magnitudes below this are compared in absolute terms.
pub const ABS_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub configs: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub checks: Vec<OpCheck>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.max_rel_err < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }
}

type Builder<'a> = dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, Error> + 'a;

fn scalarize(g: &mut Graph<f64>, out: NodeId, weights: &[f64]) -> Result<NodeId, Error> {
    if g.value(out).len() == 1 {
        return Ok(out);
    }
    let w = g.leaf(Tensor::new(g.value(out).shape().to_vec(), weights.to_vec())?);
    let m = g.mul(out, w)?;
    Ok(g.sum(m)?)
}

fn evaluate(inputs: &[Tensor<f64>], build: &Builder, weights: &[f64]) -> Result<f64, Error> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    let loss = scalarize(&mut g, out, weights)?;
    Ok(g.value(loss).data()[0])
}

/// Largest relative discrepancy between analytic and central-difference
/// gradients over all elements of all inputs.
pub fn max_relative_error(inputs: &[Tensor<f64>], build: &Builder, rng: &mut ChaCha8Rng) -> Result<f64, Error> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    let weights: Vec<f64> = (0..g.value(out).len()).map(|_| rng.gen_range(0.5..1.5)).collect();
    let loss = scalarize(&mut g, out, &weights)?;
    let grads = g.backward(loss)?;
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).expect("registered input").data().to_vec();
        for j in 0..probe[i].len() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + FD_STEP;
            let plus = evaluate(&probe, build, &weights)?;
            probe[i].data_mut()[j] = orig - FD_STEP;
            let minus = evaluate(&probe, build, &weights)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[j];
            let denom = a.abs().max(numeric.abs()).max(ABS_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn block_nodes(ids: &[NodeId], heads: usize) -> CrossAttentionNodes {
    let p = |i: usize| (ids[i], ids[i + 1]);
    CrossAttentionNodes {
        heads,
        ln_q: p(0),
        ln_kv: p(2),
        wq: p(4),
        wk: p(6),
        wv: p(8),
        wo: p(10),
        ln_ff: p(12),
        ff1: p(14),
        ff2: p(16),
    }
}

fn reproj_case(rng: &mut ChaCha8Rng, n: usize) -> (Tensor<f64>, Vec<ReprojTarget<f64>>) {
    let k = Intrinsics::new(rng.gen_range(80.0..120.0), rng.gen_range(80.0..120.0), 64.0, 48.0).unwrap();
    let pose = PoseSE3::from_axis_angle(
        Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)),
        Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
    );
    let mut rows = Vec::with_capacity(n * 4);
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        // every third row lies behind the camera and exercises the depth prior
        let z = if i % 3 == 2 { rng.gen_range(-3.0..-1.0) } else { rng.gen_range(1.0..4.0) };
        let pc = Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), z);
        let y = pose.transform_point(&pc);
        rows.extend([y.x, y.y, y.z, rng.gen_range(-2.0..2.0)]);
        let pixel = [rng.gen_range(0.0..128.0), rng.gen_range(0.0..96.0)];
        let ray = k.ray(&Vector2::new(pixel[0], pixel[1]));
        let prior = pose.transform_point(&(ray * 2.0));
        targets.push(ReprojTarget {
            pixel,
            intrinsics: k.as_array(),
            rotation: std::array::from_fn(|j| pose.rotation[(j / 3, j % 3)]),
            translation: [pose.translation.x, pose.translation.y, pose.translation.z],
            prior: [prior.x, prior.y, prior.z],
        });
    }
    (Tensor::matrix(n, 4, rows).unwrap(), targets)
}

/// Runs every op check over `configs` random configurations.
pub fn run(configs: usize, seed: u64) -> Result<GradcheckReport, Error> {
    let mut rng = seeds::rng(seed, &[0xFD]);
    let mut checks = Vec::new();
    let mut record = |op: &'static str, errs: Vec<f64>| {
        checks.push(OpCheck {
            op,
            configs: errs.len(),
            max_rel_err: errs.into_iter().fold(0.0, f64::max),
        });
    };

    macro_rules! sweep {
        ($name:expr, |$r:ident| $body:expr) => {{
            let mut errs = Vec::with_capacity(configs);
            for _ in 0..configs {
                let $r = &mut rng;
                let (inputs, build): (Vec<Tensor<f64>>, Box<Builder>) = $body;
                errs.push(max_relative_error(&inputs, &*build, $r)?);
            }
            record($name, errs);
        }};
    }

    sweep!("linear", |r| {
        let (n, i, o) = (r.gen_range(1..4), r.gen_range(1..5), r.gen_range(1..5));
        (
            vec![rand_t(r, &[n, i], -1.0, 1.0), rand_t(r, &[o, i], -1.0, 1.0), rand_t(r, &[o], -1.0, 1.0)],
            Box::new(|g: &mut Graph<f64>, x: &[NodeId]| Ok(g.linear(x[0], x[1], x[2])?)),
        )
    });
    sweep!("add_sub_mul_scale", |r| {
        let s = [r.gen_range(1..4), r.gen_range(1..4)];
        let c = r.gen_range(-2.0..2.0);
        (
            vec![rand_t(r, &s, -1.0, 1.0), rand_t(r, &s, -1.0, 1.0), rand_t(r, &s, -1.0, 1.0)],
            Box::new(move |g: &mut Graph<f64>, x: &[NodeId]| {
                let a = g.add(x[0], x[1])?;
                let b = g.sub(a, x[2])?;
                let m = g.mul(b, x[1])?;
                Ok(g.scale(m, c)?)
            }),
        )
    });
    sweep!("exp_log", |r| {
        let s = [r.gen_range(1..4), r.gen_range(1..5)];
        (
            vec![rand_t(r, &s, -1.0, 1.0), rand_t(r, &s, 0.5, 2.0)],
            Box::new(|g: &mut Graph<f64>, x: &[NodeId]| {
                let e = g.exp(x[0])?;
                let l = g.log(x[1])?;
                Ok(g.add(e, l)?)
            }),
        )
    });
    sweep!("gelu", |r| {
        let s = [r.gen_range(1..4), r.gen_range(1..6)];
        (
            vec![rand_t(r, &s, -3.0, 3.0)],
            Box::new(|g: &mut Graph<f64>, x: &[NodeId]| Ok(g.gelu(x[0])?)),
        )
    });
    sweep!("softmax", |r| {
        let s = [r.gen_range(1..4), r.gen_range(1..6)];
        (
            vec![rand_t(r, &s, -3.0, 3.0)],
            Box::new(|g: &mut Graph<f64>, x: &[NodeId]| Ok(g.softmax(x[0])?)),
        )
    });
    sweep!("softmax_cross_entropy", |r| {
        let k = r.gen_range(2..6);
        let target: Vec<f64> = {
            let raw: Vec<f64> = (0..k).map(|_| r.gen_range(0.1..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        };
        (
            vec![rand_t(r, &[k], -2.0, 2.0)],
            Box::new(move |g: &mut Graph<f64>, x: &[NodeId]| {
                let p = g.softmax(x[0])?;
                let lp = g.log(p)?;
                let t = g.leaf(Tensor::vector(target.clone()));
                let m = g.mul(lp, t)?;
                let s = g.sum(m)?;
                Ok(g.scale(s, -1.0)?)
            }),
        )
    });
    sweep!("layer_norm", |r| {
        let (n, d) = (r.gen_range(1..4), r.gen_range(2..9));
        (
            vec![rand_t(r, &[n, d], -2.0, 2.0), rand_t(r, &[d], 0.5, 1.5), rand_t(r, &[d], -0.5, 0.5)],
            Box::new(|g: &mut Graph<f64>, x: &[NodeId]| Ok(g.layer_norm(x[0], x[1], x[2])?)),
        )
    });
    sweep!("attention", |r| {
        let heads = r.gen_range(1..3);
        let d = heads * r.gen_range(1..4);
        let (n, m) = (r.gen_range(1..4), r.gen_range(1..5));
        (
            vec![rand_t(r, &[n, d], -1.0, 1.0), rand_t(r, &[m, d], -1.0, 1.0), rand_t(r, &[m, d], -1.0, 1.0)],
            Box::new(move |g: &mut Graph<f64>, x: &[NodeId]| Ok(g.attention(x[0], x[1], x[2], heads)?)),
        )
    });
    sweep!("cross_attention", |r| {
        let heads = r.gen_range(1..3);
        let d = heads * 2;
        let dk = r.gen_range(2..5);
        let ff = 2 * d;
        let (n, m) = (r.gen_range(1..3), r.gen_range(1..4));
        let shapes: Vec<Vec<usize>> = vec![
            vec![d], vec![d], vec![dk], vec![dk],
            vec![d, d], vec![d], vec![d, dk], vec![d], vec![d, dk], vec![d],
            vec![d, d], vec![d], vec![d], vec![d], vec![ff, d], vec![ff], vec![d, ff], vec![d],
            vec![n, d], vec![m, dk],
        ];
        let inputs = shapes.iter().map(|s| rand_t(r, s, -1.0, 1.0)).collect();
        (
            inputs,
            Box::new(move |g: &mut Graph<f64>, x: &[NodeId]| {
                let b = block_nodes(x, heads);
                Ok(cross_attention(g, x[18], x[19], &b)?)
            }),
        )
    });
    sweep!("sum_mean_select", |r| {
        let n = r.gen_range(2..8);
        let idx: Vec<usize> = (0..n).filter(|i| i % 2 == 0).collect();
        (
            vec![rand_t(r, &[n], -1.0, 1.0)],
            Box::new(move |g: &mut Graph<f64>, x: &[NodeId]| {
                let a = g.sum(x[0])?;
                let b = g.mean(x[0])?;
                let c = g.select_sum(x[0], idx.clone(), 0.7)?;
                let ab = g.add(a, b)?;
                Ok(g.add(ab, c)?)
            }),
        )
    });
    sweep!("laplace_nll_3d", |r| {
        let n = r.gen_range(1..5);
        let target = rand_t(r, &[n, 3], -1.0, 1.0);
        let mut pred = rand_t(r, &[n, 4], -1.0, 1.0);
        for row in pred.data_mut().chunks_exact_mut(4) {
            row[3] = row[3] * 2.0;
        }
        (
            vec![pred],
            Box::new(move |g: &mut Graph<f64>, x: &[NodeId]| Ok(g.laplace_nll(x[0], &target)?)),
        )
    });
    sweep!("reprojection_nll_2d_and_depth_prior", |r| {
        let n = r.gen_range(3..7);
        let (pred, targets) = reproj_case(r, n);
        let limits = ReprojLimits {
            z_min: Z_MIN,
            max_reproj_px: MAX_REPROJ_PX,
        };
        (
            vec![pred],
            Box::new(move |g: &mut Graph<f64>, x: &[NodeId]| Ok(g.reprojection_nll(x[0], &targets, limits)?.0)),
        )
    });
    sweep!("regress_laplace_end_to_end", |r| {
        let cfg = RegressorConfig {
            d_feat: 3,
            d_model: 4,
            n_blocks: r.gen_range(1..3),
            n_heads: 2,
            ffn_ratio: 2,
            d_map: 3,
            head_hidden: 3,
        };
        let params = RegressorParams::<f64>::init(cfg, r.gen()).unwrap();
        let n = r.gen_range(1..4);
        let n_c = r.gen_range(1..4);
        let e = rand_t(r, &[n, cfg.d_feat], -1.0, 1.0);
        let target = rand_t(r, &[n, 3], -1.0, 1.0);
        let mut inputs = params.tensors.clone();
        inputs.push(rand_t(r, &[n_c, cfg.d_map], -0.5, 0.5));
        let np = params.tensors.len();
        (
            inputs,
            Box::new(move |g: &mut Graph<f64>, x: &[NodeId]| {
                let nodes = RegressorNodes::from_ids(&cfg, x[..np].to_vec());
                let en = g.leaf(e.clone());
                let out = forward(g, &nodes, en, x[np])?;
                let l = g.laplace_nll(out, &target)?;
                Ok(g.mean(l)?)
            }),
        )
    });
    Ok(GradcheckReport {
        checks,
        tolerance: TOLERANCE,
    })
}
