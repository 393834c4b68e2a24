use super::tensor::{axpy, dot, Real, Tensor};
use super::AutodiffError;

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Bounds of the log-scale output before exponentiation.
pub const LOG_SIGMA_CLAMP: f64 = 6.0;

const SQRT_2: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Supervision for one row of [`Graph::reprojection_nll`]: a pixel observed by a
/// posed camera plus the constant-depth fallback target.
#[derive(Debug, Clone, Copy)]
pub struct ReprojTarget<T> {
    pub pixel: [T; 2],
    /// fx, fy, cx, cy
    pub intrinsics: [T; 4],
    /// World-from-camera rotation, row-major.
    pub rotation: [T; 9],
    /// World-from-camera translation.
    pub translation: [T; 3],
    /// World point used when the prediction is invalid.
    pub prior: [T; 3],
}

#[derive(Debug, Clone, Copy)]
pub struct ReprojLimits {
    pub z_min: f64,
    pub max_reproj_px: f64,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMulNT { x: NodeId, w: NodeId },
    AddRow { x: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: T },
    Log { x: NodeId },
    Exp { x: NodeId },
    Gelu { x: NodeId },
    Softmax { x: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<T>, rstd: Vec<T> },
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, probs: Vec<T> },
    Sum { x: NodeId },
    Mean { x: NodeId },
    SelectSum { x: NodeId, idx: Vec<usize>, scale: T },
    LaplaceNll { pred: NodeId, cache: Vec<RowGrad<T>> },
    ReprojNll { pred: NodeId, cache: Vec<RowGrad<T>> },
}

/// Per-row local derivative of a fused loss w.r.t. the 4-vector (y, s).
#[derive(Debug, Clone, Copy)]
struct RowGrad<T> {
    d: [T; 4],
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of tensor operations supporting reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order of the computation.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<NodeId>,
}

/// Gradients of a scalar loss w.r.t. every registered parameter.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    entries: Vec<(NodeId, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| *n == id).map(|(_, t)| t)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        let pos = self.entries.iter().position(|(n, _)| *n == id)?;
        Some(self.entries.swap_remove(pos).1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn check_finite<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(), AutodiffError> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(AutodiffError::NonFinite(op))
    }
}

fn clamp_log_sigma<T: Real>(s: T) -> (T, bool) {
    let lim = T::lit(LOG_SIGMA_CLAMP);
    if s > lim {
        (lim, false)
    } else if s < -lim {
        (-lim, false)
    } else {
        (s, true)
    }
}

/// Laplace NLL `log σ + √2 r / σ` for one (y, s) row and its derivative.
fn laplace_row<T: Real>(pred: &[T], target: &[T]) -> (T, RowGrad<T>) {
    let (ls, free) = clamp_log_sigma(pred[3]);
    let sigma = ls.exp();
    let diff = [pred[0] - target[0], pred[1] - target[1], pred[2] - target[2]];
    let r = (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]).sqrt();
    let sq2 = T::lit(SQRT_2);
    let loss = ls + sq2 * r / sigma;
    let mut d = [T::zero(); 4];
    if r > T::zero() {
        let k = sq2 / (sigma * r);
        for i in 0..3 {
            d[i] = k * diff[i];
        }
    }
    if free {
        d[3] = T::one() - sq2 * r / sigma;
    }
    (loss, RowGrad { d })
}

fn reproj_row<T: Real>(pred: &[T], tg: &ReprojTarget<T>, lim: ReprojLimits) -> (T, RowGrad<T>, bool) {
    let r = &tg.rotation;
    let rel = [
        pred[0] - tg.translation[0],
        pred[1] - tg.translation[1],
        pred[2] - tg.translation[2],
    ];
    // camera point = Rᵀ (y − t)
    let pc = [
        r[0] * rel[0] + r[3] * rel[1] + r[6] * rel[2],
        r[1] * rel[0] + r[4] * rel[1] + r[7] * rel[2],
        r[2] * rel[0] + r[5] * rel[1] + r[8] * rel[2],
    ];
    let [fx, fy, cx, cy] = tg.intrinsics;
    let z = pc[2];
    let z_min = T::lit(lim.z_min);
    let mut valid = z > z_min;
    let (mut u, mut v) = (T::zero(), T::zero());
    let mut err = T::zero();
    if valid {
        u = fx * pc[0] / z + cx;
        v = fy * pc[1] / z + cy;
        let du = u - tg.pixel[0];
        let dv = v - tg.pixel[1];
        err = (du * du + dv * dv).sqrt();
        valid = err <= T::lit(lim.max_reproj_px) && err.is_finite();
    }
    if !valid {
        let (l, g) = laplace_row(pred, &tg.prior);
        return (l, g, false);
    }
    let (ls, free) = clamp_log_sigma(pred[3]);
    let f_avg = (fx + fy) * T::lit(0.5);
    let sigma_x = ls.exp() * f_avg / z;
    let sq2 = T::lit(SQRT_2);
    let loss = sigma_x.ln() + sq2 * err / sigma_x;
    let dl_dr = sq2 / sigma_x;
    let dl_dsig = T::one() / sigma_x - sq2 * err / (sigma_x * sigma_x);
    let du = u - tg.pixel[0];
    let dv = v - tg.pixel[1];
    let mut g_pc = [T::zero(); 3];
    if err > T::zero() {
        let gu = dl_dr * du / err;
        let gv = dl_dr * dv / err;
        g_pc[0] = gu * fx / z;
        g_pc[1] = gv * fy / z;
        g_pc[2] = -(gu * fx * pc[0] + gv * fy * pc[1]) / (z * z);
    }
    // σ_x ∝ 1/z
    g_pc[2] = g_pc[2] - dl_dsig * sigma_x / z;
    let mut d = [T::zero(); 4];
    for i in 0..3 {
        d[i] = r[3 * i] * g_pc[0] + r[3 * i + 1] * g_pc[1] + r[3 * i + 2] * g_pc[2];
    }
    if free {
        d[3] = dl_dsig * sigma_x;
    }
    (loss, RowGrad { d }, true)
}

fn gelu<T: Real>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x);
    (y, dy)
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s = s + *v;
    }
    let inv = T::one() / s;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Registered parameter leaves in registration order.
    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[NodeId],
    ) -> Result<NodeId, AutodiffError> {
        check_finite(name, &value)?;
        let rg = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    /// Constant input.
    pub fn leaf(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf, added to the parameter registry.
    pub fn param(&mut self, t: Tensor<T>) -> NodeId {
        let id = self.push(t, Op::Leaf, true);
        self.params.push(id);
        id
    }

    /// `x · wᵀ` where `x` is `[n, i]` (or `[i]`) and `w` is `[o, i]`.
    pub fn matmul_nt(&mut self, x: NodeId, w: NodeId) -> Result<NodeId, AutodiffError> {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        if wv.rank() != 2 {
            return Err(AutodiffError::ShapeMismatch(format!("weight must be rank 2, got {:?}", wv.shape())));
        }
        let (n, i) = xv.as_matrix_dims();
        let (o, wi) = (wv.shape()[0], wv.shape()[1]);
        if xv.rank() == 0 || i != wi {
            return Err(AutodiffError::ShapeMismatch(format!(
                "matmul {:?} x {:?}ᵀ",
                xv.shape(),
                wv.shape()
            )));
        }
        let mut out = vec![T::zero(); n * o];
        let xd = xv.data();
        let wd = wv.data();
        for r in 0..n {
            let xr = &xd[r * i..(r + 1) * i];
            let orow = &mut out[r * o..(r + 1) * o];
            for (c, oc) in orow.iter_mut().enumerate() {
                *oc = dot(xr, &wd[c * i..(c + 1) * i]);
            }
        }
        let shape = if xv.rank() == 1 { vec![o] } else { vec![n, o] };
        let t = Tensor::new(shape, out)?;
        self.push_checked("matmul", t, Op::MatMulNT { x, w }, &[x, w])
    }

    /// Adds `b` (`[d]`) to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[b.0].value;
        let (_, c) = xv.as_matrix_dims();
        if bv.len() != c || xv.rank() == 0 {
            return Err(AutodiffError::ShapeMismatch(format!(
                "bias {:?} vs input {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o = *o + bb;
            }
        }
        self.push_checked("add_row", out, Op::AddRow { x, b }, &[x, b])
    }

    /// Dense layer `W x + b` applied to every row of `x`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let y = self.matmul_nt(x, w)?;
        self.add_row(y, b)
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>, AutodiffError> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if av.shape() != bv.shape() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "{name}: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        self.push_checked("add", t, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push_checked("sub", t, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push_checked("mul", t, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> Result<NodeId, AutodiffError> {
        let xv = &self.nodes[x.0].value;
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| v * c).collect())?;
        self.push_checked("scale", t, Op::Scale { x, c }, &[x])
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let xv = &self.nodes[x.0].value;
        if xv.data().iter().any(|&v| v <= T::zero()) {
            return Err(AutodiffError::InvalidArgument("log of non-positive value".into()));
        }
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v.ln()).collect())?;
        self.push_checked("log", t, Op::Log { x }, &[x])
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let xv = &self.nodes[x.0].value;
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v.exp()).collect())?;
        self.push_checked("exp", t, Op::Exp { x }, &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let xv = &self.nodes[x.0].value;
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| gelu(v).0).collect())?;
        self.push_checked("gelu", t, Op::Gelu { x }, &[x])
    }

    /// Row-wise softmax over the last dimension, max-subtracted.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let xv = &self.nodes[x.0].value;
        if xv.is_empty() || xv.rank() == 0 {
            return Err(AutodiffError::EmptyInput("softmax"));
        }
        let (_, c) = xv.as_matrix_dims();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        self.push_checked("softmax", out, Op::Softmax { x }, &[x])
    }

    /// Row-wise layer normalization followed by the affine `gain`, `bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId, AutodiffError> {
        let xv = &self.nodes[x.0].value;
        let (n, d) = xv.as_matrix_dims();
        if xv.rank() == 0 || d < 2 {
            return Err(AutodiffError::InvalidArgument(format!(
                "layer_norm needs at least 2 features, got {d}"
            )));
        }
        let gv = self.nodes[gain.0].value.data();
        let bv = self.nodes[bias.0].value.data();
        if gv.len() != d || bv.len() != d {
            return Err(AutodiffError::ShapeMismatch("layer_norm affine size".into()));
        }
        let inv_d = T::one() / T::lit(d as f64);
        let eps = T::lit(LAYER_NORM_EPS);
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * d];
        for r in 0..n {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = gv[j] * h + bv[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push_checked(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Multi-head scaled dot-product attention of queries `q` (`[n, d]`) over
    /// keys `k` and values `v` (`[m, d]`). No positional information is used,
    /// so the result does not depend on the order of the key/value rows.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId, AutodiffError> {
        let qv = &self.nodes[q.0].value;
        let kv = &self.nodes[k.0].value;
        let vv = &self.nodes[v.0].value;
        let (n, d) = qv.as_matrix_dims();
        let (m, dk) = kv.as_matrix_dims();
        let (mv, dv) = vv.as_matrix_dims();
        if kv.is_empty() || m == 0 {
            return Err(AutodiffError::EmptyInput("attention keys"));
        }
        if dk != d || dv != d || mv != m || heads == 0 || d % heads != 0 {
            return Err(AutodiffError::ShapeMismatch(format!(
                "attention q {:?} k {:?} v {:?} heads {heads}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut probs = vec![T::zero(); heads * n * m];
        let mut out = vec![T::zero(); n * d];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let qi = &qd[i * d + off..i * d + off + dh];
                let p = &mut probs[(h * n + i) * m..(h * n + i + 1) * m];
                for j in 0..m {
                    p[j] = scale * dot(qi, &kd[j * d + off..j * d + off + dh]);
                }
                softmax_in_place(p);
                let o = &mut out[i * d + off..i * d + off + dh];
                for j in 0..m {
                    axpy(p[j], &vd[j * d + off..j * d + off + dh], o);
                }
            }
        }
        let t = Tensor::new(qv.shape().to_vec(), out)?;
        self.push_checked(
            "attention",
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let s = self.nodes[x.0].value.data().iter().copied().sum();
        self.push_checked("sum", Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let xv = &self.nodes[x.0].value;
        if xv.is_empty() {
            return Err(AutodiffError::EmptyInput("mean"));
        }
        let s = xv.data().iter().copied().sum::<T>() / T::lit(xv.len() as f64);
        self.push_checked("mean", Tensor::scalar(s), Op::Mean { x }, &[x])
    }

    /// `scale · Σ_{i ∈ idx} x_i`; used for trimmed losses where the kept set is
    /// chosen outside the graph.
    pub fn select_sum(&mut self, x: NodeId, idx: Vec<usize>, scale: T) -> Result<NodeId, AutodiffError> {
        let xv = &self.nodes[x.0].value;
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.len()) {
            return Err(AutodiffError::ShapeMismatch(format!(
                "select index {bad} out of range {}",
                xv.len()
            )));
        }
        let s = idx.iter().map(|&i| xv.data()[i]).sum::<T>() * scale;
        self.push_checked("select_sum", Tensor::scalar(s), Op::SelectSum { x, idx, scale }, &[x])
    }

    /// Per-row Laplace NLL of predictions `[n, 4]` (xyz + log-scale) against
    /// `[n, 3]` targets. Returns `[n]`.
    pub fn laplace_nll(&mut self, pred: NodeId, target: &Tensor<T>) -> Result<NodeId, AutodiffError> {
        let pv = &self.nodes[pred.0].value;
        let (n, c) = pv.as_matrix_dims();
        let (tn, tc) = target.as_matrix_dims();
        if c != 4 || tc != 3 || tn != n {
            return Err(AutodiffError::ShapeMismatch(format!(
                "laplace_nll pred {:?} target {:?}",
                pv.shape(),
                target.shape()
            )));
        }
        let mut losses = Vec::with_capacity(n);
        let mut cache = Vec::with_capacity(n);
        for r in 0..n {
            let (l, g) = laplace_row(pv.row(r), target.row(r));
            losses.push(l);
            cache.push(g);
        }
        let t = Tensor::vector(losses);
        self.push_checked(
            "laplace_nll",
            t,
            Op::LaplaceNll {
                pred,
                cache,
            },
            &[pred],
        )
    }

    /// Per-row reprojection NLL in pixel space; rows whose prediction lies
    /// behind the camera or reprojects too far away fall back to the 3D NLL
    /// against the row's constant-depth prior. Returns `([n], valid mask)`.
    pub fn reprojection_nll(
        &mut self,
        pred: NodeId,
        targets: &[ReprojTarget<T>],
        limits: ReprojLimits,
    ) -> Result<(NodeId, Vec<bool>), AutodiffError> {
        let pv = &self.nodes[pred.0].value;
        let (n, c) = pv.as_matrix_dims();
        if c != 4 || targets.len() != n {
            return Err(AutodiffError::ShapeMismatch(format!(
                "reprojection_nll pred {:?} with {} targets",
                pv.shape(),
                targets.len()
            )));
        }
        let mut losses = Vec::with_capacity(n);
        let mut cache = Vec::with_capacity(n);
        let mut valid = Vec::with_capacity(n);
        for (r, tg) in targets.iter().enumerate() {
            let (l, g, ok) = reproj_row(pv.row(r), tg, limits);
            valid.push(ok);
            losses.push(l);
            cache.push(g);
        }
        let t = Tensor::vector(losses);
        let id = self.push_checked("reprojection_nll", t, Op::ReprojNll { pred, cache }, &[pred])?;
        Ok((id, valid))
    }

    /// Reverse pass from a scalar node. Returns gradients for every
    /// registered parameter; intermediate gradients are dropped as soon as
    /// they have been propagated.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, AutodiffError> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
        }
        let mut entries = Vec::with_capacity(self.params.len());
        for &p in &self.params {
            if p.0 > loss.0 {
                continue;
            }
            let shape = self.nodes[p.0].value.shape().to_vec();
            let data = grads[p.0]
                .take()
                .unwrap_or_else(|| vec![T::zero(); self.nodes[p.0].value.len()]);
            let t = Tensor::new(shape, data)?;
            check_finite("gradient", &t)?;
            entries.push((p, t));
        }
        // parameters created after the loss node do not influence it
        for &p in &self.params {
            if p.0 > loss.0 {
                entries.push((p, Tensor::zeros(self.nodes[p.0].value.shape())));
            }
        }
        Ok(Gradients { entries })
    }

    fn accum<'a>(&self, grads: &'a mut [Option<Vec<T>>], id: NodeId) -> Option<&'a mut Vec<T>> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let len = self.nodes[id.0].value.len();
        Some(grads[id.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<(), AutodiffError> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMulNT { x, w } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let (n, i) = xv.as_matrix_dims();
                let o = wv.shape()[0];
                if let Some(gx) = self.accum(grads, *x) {
                    for r in 0..n {
                        let gr = &g[r * o..(r + 1) * o];
                        let dst = &mut gx[r * i..(r + 1) * i];
                        for (c, &gc) in gr.iter().enumerate() {
                            if gc != T::zero() {
                                axpy(gc, &wv.data()[c * i..(c + 1) * i], dst);
                            }
                        }
                    }
                }
                if let Some(gw) = self.accum(grads, *w) {
                    for r in 0..n {
                        let xr = &xv.data()[r * i..(r + 1) * i];
                        for c in 0..o {
                            let gc = g[r * o + c];
                            if gc != T::zero() {
                                axpy(gc, xr, &mut gw[c * i..(c + 1) * i]);
                            }
                        }
                    }
                }
            }
            Op::AddRow { x, b } => {
                if let Some(gx) = self.accum(grads, *x) {
                    axpy(T::one(), g, gx);
                }
                let c = self.nodes[b.0].value.len();
                if let Some(gb) = self.accum(grads, *b) {
                    for row in g.chunks_exact(c) {
                        axpy(T::one(), row, gb);
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = self.accum(grads, *a) {
                    axpy(T::one(), g, ga);
                }
                if let Some(gb) = self.accum(grads, *b) {
                    axpy(T::one(), g, gb);
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = self.accum(grads, *a) {
                    axpy(T::one(), g, ga);
                }
                if let Some(gb) = self.accum(grads, *b) {
                    axpy(-T::one(), g, gb);
                }
            }
            Op::Mul { a, b } => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                if let Some(ga) = self.accum(grads, *a) {
                    for ((d, &gi), &bi) in ga.iter_mut().zip(g).zip(bv) {
                        *d = *d + gi * bi;
                    }
                }
                if let Some(gb) = self.accum(grads, *b) {
                    for ((d, &gi), &ai) in gb.iter_mut().zip(g).zip(av) {
                        *d = *d + gi * ai;
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(gx) = self.accum(grads, *x) {
                    axpy(*c, g, gx);
                }
            }
            Op::Log { x } => {
                let xv = self.nodes[x.0].value.data();
                if let Some(gx) = self.accum(grads, *x) {
                    for ((d, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        *d = *d + gi / xi;
                    }
                }
            }
            Op::Exp { x } => {
                let yv = node.value.data();
                if let Some(gx) = self.accum(grads, *x) {
                    for ((d, &gi), &yi) in gx.iter_mut().zip(g).zip(yv) {
                        *d = *d + gi * yi;
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = self.nodes[x.0].value.data();
                if let Some(gx) = self.accum(grads, *x) {
                    for ((d, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        *d = *d + gi * gelu(xi).1;
                    }
                }
            }
            Op::Softmax { x } => {
                let y = &node.value;
                let (_, c) = y.as_matrix_dims();
                if let Some(gx) = self.accum(grads, *x) {
                    for ((yr, gr), dr) in y.data().chunks_exact(c).zip(g.chunks_exact(c)).zip(gx.chunks_exact_mut(c)) {
                        let s = dot(yr, gr);
                        for j in 0..c {
                            dr[j] = dr[j] + yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.nodes[gain.0].value.data().to_vec();
                let d = gv.len();
                let n = rstd.len();
                if let Some(gg) = self.accum(grads, *gain) {
                    for r in 0..n {
                        for j in 0..d {
                            gg[j] = gg[j] + g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = self.accum(grads, *bias) {
                    for row in g.chunks_exact(d) {
                        axpy(T::one(), row, gb);
                    }
                }
                if let Some(gx) = self.accum(grads, *x) {
                    let inv_d = T::one() / T::lit(d as f64);
                    let mut dxh = vec![T::zero(); d];
                    for r in 0..n {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            dxh[j] = g[r * d + j] * gv[j];
                            m1 = m1 + dxh[j];
                            m2 = m2 + dxh[j] * xhat[r * d + j];
                        }
                        m1 = m1 * inv_d;
                        m2 = m2 * inv_d;
                        for j in 0..d {
                            gx[r * d + j] = gx[r * d + j] + rstd[r] * (dxh[j] - m1 - xhat[r * d + j] * m2);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let qv = self.nodes[q.0].value.data();
                let kv = self.nodes[k.0].value.data();
                let vv = self.nodes[v.0].value.data();
                let (n, d) = self.nodes[q.0].value.as_matrix_dims();
                let m = self.nodes[k.0].value.as_matrix_dims().0;
                let dh = d / heads;
                let scale = T::one() / T::lit(dh as f64).sqrt();
                let mut gq = vec![T::zero(); n * d];
                let mut gk = vec![T::zero(); m * d];
                let mut gvv = vec![T::zero(); m * d];
                let mut dp = vec![T::zero(); m];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..n {
                        let p = &probs[(h * n + i) * m..(h * n + i + 1) * m];
                        let go = &g[i * d + off..i * d + off + dh];
                        let mut s = T::zero();
                        for j in 0..m {
                            let vj = &vv[j * d + off..j * d + off + dh];
                            dp[j] = dot(go, vj);
                            s = s + p[j] * dp[j];
                            axpy(p[j], go, &mut gvv[j * d + off..j * d + off + dh]);
                        }
                        let qi = &qv[i * d + off..i * d + off + dh];
                        for j in 0..m {
                            let ds = p[j] * (dp[j] - s) * scale;
                            if ds != T::zero() {
                                axpy(ds, &kv[j * d + off..j * d + off + dh], &mut gq[i * d + off..i * d + off + dh]);
                                axpy(ds, qi, &mut gk[j * d + off..j * d + off + dh]);
                            }
                        }
                    }
                }
                if let Some(dst) = self.accum(grads, *q) {
                    axpy(T::one(), &gq, dst);
                }
                if let Some(dst) = self.accum(grads, *k) {
                    axpy(T::one(), &gk, dst);
                }
                if let Some(dst) = self.accum(grads, *v) {
                    axpy(T::one(), &gvv, dst);
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = self.accum(grads, *x) {
                    for d in gx.iter_mut() {
                        *d = *d + g[0];
                    }
                }
            }
            Op::Mean { x } => {
                let n = T::lit(self.nodes[x.0].value.len() as f64);
                if let Some(gx) = self.accum(grads, *x) {
                    for d in gx.iter_mut() {
                        *d = *d + g[0] / n;
                    }
                }
            }
            Op::SelectSum { x, idx, scale } => {
                if let Some(gx) = self.accum(grads, *x) {
                    for &i in idx {
                        gx[i] = gx[i] + g[0] * *scale;
                    }
                }
            }
            Op::LaplaceNll { pred, cache } | Op::ReprojNll { pred, cache } => {
                if let Some(gp) = self.accum(grads, *pred) {
                    for (r, rg) in cache.iter().enumerate() {
                        for c in 0..4 {
                            gp[r * 4 + c] = gp[r * 4 + c] + g[r] * rg.d[c];
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
