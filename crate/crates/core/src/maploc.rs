//! Novel-scene map-code optimization, relocalization with uncertainty
//! prefiltering, and pose-accuracy metrics.

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adamw_step, one_cycle_lr, AdamWConfig, Graph, OptimState, ReprojLimits, ReprojTarget, Tensor};
use crate::buffers::NovelSceneBuffer;
use crate::geometry::{pose_error, ransac_pnp, Correspondence2D3D, GeometryError, Intrinsics, PoseSE3, RansacConfig, PNP_MIN_POINTS, Z_MIN};
use crate::pretrain::trim_lowest;
use crate::regressor::{forward, init_map_code, regress_batch, CoordPrediction, MapCode, RegressorParams, MAX_REPROJ_PX};
use crate::seeds::{self, stream};
use crate::synthworld::ViewRender;
use crate::Error;

pub const PREFILTER_P: f64 = 0.1;
pub const PREFILTER_F: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MappingRunConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub dropout: f64,
    pub trim: f64,
    pub n_c: usize,
    pub buffer_cap: usize,
    pub adamw: AdamWConfig,
    pub seed: u64,
}

impl Default for MappingRunConfig {
    fn default() -> Self {
        Preset::Fast.config()
    }
}

impl MappingRunConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.iterations == 0 || self.batch_size == 0 || self.n_c == 0 || self.buffer_cap == 0 {
            return Err(Error::Config("mapping iterations, batch, N_C and cap must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.trim > 0.0 && self.trim <= 1.0) {
            return Err(Error::Config(format!("trim fraction {} outside (0, 1]", self.trim)));
        }
        if !(self.lr_max > 0.0) {
            return Err(Error::Config("lr_max must be positive".into()));
        }
        Ok(())
    }
}

/// Short and long mapping budgets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Fast,
    Thorough,
}

impl Preset {
    pub fn config(self) -> MappingRunConfig {
        let (iterations, batch_size, buffer_cap) = match self {
            Preset::Fast => (600, 256, 100_000),
            Preset::Thorough => (2400, 512, 200_000),
        };
        MappingRunConfig {
            iterations,
            batch_size,
            lr_max: 0.002,
            dropout: 0.1,
            trim: 1.0,
            n_c: 32,
            buffer_cap,
            adamw: AdamWConfig::default(),
            seed: 0,
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "fast" => Ok(Preset::Fast),
            "thorough" => Ok(Preset::Thorough),
            _ => Err(Error::Config(format!("unknown preset {s:?}, expected fast or thorough"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MappingRun {
    pub code: MapCode,
    /// Mean trimmed objective per iteration.
    pub objective: Vec<f64>,
}

/// Optimizes a fresh map code against the reprojection objective with θ
/// frozen. Invalid predictions are pulled towards the buffer's constant-depth
/// prior.
pub fn map_novel_scene(
    params: &RegressorParams<f32>,
    buffer: &NovelSceneBuffer,
    cfg: &MappingRunConfig,
) -> Result<MappingRun, Error> {
    cfg.validate()?;
    if buffer.is_empty() {
        return Err(Error::Config("empty mapping buffer".into()));
    }
    if buffer.d_feat != params.config.d_feat {
        return Err(Error::Config(format!(
            "buffer D_feat {} does not match regressor {}",
            buffer.d_feat, params.config.d_feat
        )));
    }
    let mut code = init_map_code(cfg.n_c, params.config.d_map, seeds::derive(cfg.seed, &[stream::CODE]))?;
    code.scene_id = buffer.scene_id.clone();
    let mut opt = OptimState::for_single(cfg.adamw, &code.tokens);
    let limits = ReprojLimits {
        z_min: Z_MIN,
        max_reproj_px: MAX_REPROJ_PX,
    };
    let d = buffer.d_feat;
    let keep_scale = if cfg.dropout > 0.0 { 1.0 / (1.0 - cfg.dropout) } else { 1.0 };
    let mut objective = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let mut rng = seeds::rng(cfg.seed, &[stream::BATCH, step as u64]);
        let mut drop_rng = seeds::rng(cfg.seed, &[stream::DROPOUT, step as u64]);
        let rows: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..buffer.len())).collect();
        let mut e = Vec::with_capacity(rows.len() * d);
        let mut targets = Vec::with_capacity(rows.len());
        for &r in &rows {
            for &v in buffer.embedding(r) {
                let keep = cfg.dropout == 0.0 || drop_rng.gen::<f64>() >= cfg.dropout;
                e.push(if keep { v * keep_scale as f32 } else { 0.0 });
            }
            targets.push(reproj_target(buffer, r));
        }
        let mut g = Graph::new();
        let theta = params.bind(&mut g, false);
        let c = g.param(code.tokens.clone());
        let x = g.leaf(Tensor::matrix(rows.len(), d, e)?);
        let out = forward(&mut g, &theta, x, c)?;
        let (losses, _valid) = g.reprojection_nll(out, &targets, limits)?;
        let values: Vec<f64> = g.value(losses).data().iter().map(|&v| v as f64).collect();
        let kept = trim_lowest(&values, cfg.trim);
        objective.push(kept.iter().map(|&i| values[i]).sum::<f64>() / kept.len() as f64);
        let n_kept = kept.len();
        let loss = g.select_sum(losses, kept, 1.0 / n_kept as f32)?;
        let mut grads = g.backward(loss)?;
        let gc = grads.take(c).expect("code gradient");
        let lr = one_cycle_lr(step, cfg.iterations, cfg.lr_max)?;
        adamw_step(std::slice::from_mut(&mut code.tokens), std::slice::from_ref(&gc), &mut opt, lr)?;
        code.iterations += 1;
    }
    Ok(MappingRun { code, objective })
}

fn reproj_target(buffer: &NovelSceneBuffer, r: usize) -> ReprojTarget<f32> {
    let f = buffer.frame_of(r);
    let px = buffer.pixels[r];
    let ray = f.intrinsics.ray(&px);
    let prior = f.pose.transform_point(&(ray * buffer.prior_depth));
    let [fx, fy, cx, cy] = f.intrinsics.as_array();
    let rot = f.pose.rotation;
    let t = f.pose.translation;
    ReprojTarget {
        pixel: [px.x as f32, px.y as f32],
        intrinsics: [fx as f32, fy as f32, cx as f32, cy as f32],
        rotation: std::array::from_fn(|i| rot[(i / 3, i % 3)] as f32),
        translation: [t.x as f32, t.y as f32, t.z as f32],
        prior: [prior.x as f32, prior.y as f32, prior.z as f32],
    }
}

/// Query-side inputs for one image: patch pixels and embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryView {
    pub frame_id: usize,
    pub pixels: Vec<Vector2<f64>>,
    pub embeddings: Vec<f32>,
    pub d_feat: usize,
    pub intrinsics: Intrinsics,
    /// Ground-truth world-from-camera pose, when known.
    pub gt_pose: Option<PoseSE3>,
}

impl QueryView {
    pub fn from_render(r: &ViewRender) -> Self {
        let d_feat = r.observations.first().map_or(0, |o| o.embedding.len());
        Self {
            frame_id: r.frame.id,
            pixels: r.observations.iter().map(|o| o.pixel).collect(),
            embeddings: r.observations.iter().flat_map(|o| o.embedding.iter().copied()).collect(),
            d_feat,
            intrinsics: r.frame.intrinsics,
            gt_pose: Some(r.frame.pose),
        }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenePrediction {
    pub pixel: Vector2<f64>,
    pub y: Vector3<f64>,
    pub sigma: f64,
}

pub fn predict_scene_coords(
    params: &RegressorParams<f64>,
    code: &Tensor<f64>,
    view: &QueryView,
) -> Result<Vec<ScenePrediction>, Error> {
    if view.is_empty() {
        return Ok(Vec::new());
    }
    let e = Tensor::matrix(view.len(), view.d_feat, view.embeddings.iter().map(|&v| v as f64).collect())?;
    let preds: Vec<CoordPrediction> = regress_batch(params, &e, code)?;
    Ok(preds
        .into_iter()
        .zip(&view.pixels)
        .map(|(p, px)| ScenePrediction {
            pixel: *px,
            y: p.y,
            sigma: p.sigma,
        })
        .collect())
}

/// Keeps records with `σ < f·Q_p(σ)`, where `Q_p` is the ⌈p·n⌉-th smallest
/// σ. When fewer than six survive, the six lowest-σ records are returned
/// instead. Indices come back in input order.
pub fn prefilter(sigmas: &[f64], p: f64, f: f64) -> Vec<usize> {
    let n = sigmas.len();
    if n == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sigmas[a].total_cmp(&sigmas[b]).then(a.cmp(&b)));
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    let threshold = f * sigmas[order[rank - 1]];
    let kept: Vec<usize> = (0..n).filter(|&i| sigmas[i] < threshold).collect();
    if kept.len() >= PNP_MIN_POINTS.min(n) {
        return kept;
    }
    let mut fallback: Vec<usize> = order.into_iter().take(PNP_MIN_POINTS.min(n)).collect();
    fallback.sort_unstable();
    fallback
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizeConfig {
    pub ransac: RansacConfig,
    pub prefilter: bool,
    pub p: f64,
    pub f: f64,
    pub seed: u64,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            ransac: RansacConfig::default(),
            prefilter: true,
            p: PREFILTER_P,
            f: PREFILTER_F,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizeResult {
    pub frame_id: usize,
    /// `None` when no pose could be estimated.
    pub pose: Option<PoseSE3>,
    pub inliers: usize,
    pub n_before: usize,
    pub n_after: usize,
    pub error: Option<crate::geometry::PoseError>,
}

impl LocalizeResult {
    pub fn succeeded(&self) -> bool {
        self.pose.is_some()
    }
}

pub fn localize(
    params: &RegressorParams<f64>,
    code: &Tensor<f64>,
    view: &QueryView,
    cfg: &LocalizeConfig,
) -> Result<LocalizeResult, Error> {
    if view.len() < PNP_MIN_POINTS {
        return Err(GeometryError::NotEnoughCorrespondences {
            needed: PNP_MIN_POINTS,
            got: view.len(),
        }
        .into());
    }
    let preds = predict_scene_coords(params, code, view)?;
    let kept: Vec<usize> = if cfg.prefilter {
        let sigmas: Vec<f64> = preds.iter().map(|p| p.sigma).collect();
        prefilter(&sigmas, cfg.p, cfg.f)
    } else {
        (0..preds.len()).collect()
    };
    let corrs: Vec<Correspondence2D3D> = kept
        .iter()
        .map(|&i| Correspondence2D3D {
            pixel: preds[i].pixel,
            point: preds[i].y,
            sigma: Some(preds[i].sigma),
        })
        .collect();
    let seed = seeds::derive(cfg.seed, &[stream::RANSAC, view.frame_id as u64]);
    let mut result = LocalizeResult {
        frame_id: view.frame_id,
        pose: None,
        inliers: 0,
        n_before: preds.len(),
        n_after: corrs.len(),
        error: None,
    };
    match ransac_pnp(&corrs, &view.intrinsics, &cfg.ransac, seed) {
        Ok(r) => {
            result.inliers = r.n_inliers;
            result.error = view.gt_pose.map(|gt| pose_error(&r.pose, &gt));
            result.pose = Some(r.pose);
        }
        Err(GeometryError::LocalizationFailed { best_inliers }) => result.inliers = best_inliers,
        Err(GeometryError::NotEnoughCorrespondences { .. } | GeometryError::Degenerate) => {}
        Err(e) => return Err(e.into()),
    }
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub rot_deg: f64,
    pub trans: f64,
}

pub const DEFAULT_THRESHOLDS: [Threshold; 3] = [
    Threshold { rot_deg: 1.0, trans: 0.02 },
    Threshold { rot_deg: 5.0, trans: 0.1 },
    Threshold { rot_deg: 10.0, trans: 0.25 },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frames: usize,
    pub failures: usize,
    pub failure_rate: f64,
    /// Over successful frames; `None` when every frame failed.
    pub median_trans: Option<f64>,
    pub median_rot_deg: Option<f64>,
    pub accuracy: Vec<(Threshold, f64)>,
}

/// Sample median; even counts average the two middle values.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Medians over successes; threshold accuracy counts failures and frames
/// without ground truth as incorrect.
pub fn evaluate(results: &[LocalizeResult], thresholds: &[Threshold]) -> MetricsReport {
    let errors: Vec<_> = results.iter().filter(|r| r.succeeded()).filter_map(|r| r.error).collect();
    let failures = results.iter().filter(|r| !r.succeeded()).count();
    let n = results.len();
    let accuracy = thresholds
        .iter()
        .map(|&t| {
            let ok = errors.iter().filter(|e| e.rot_deg <= t.rot_deg && e.trans <= t.trans).count();
            (t, if n == 0 { 0.0 } else { ok as f64 / n as f64 })
        })
        .collect();
    MetricsReport {
        frames: n,
        failures,
        failure_rate: if n == 0 { 0.0 } else { failures as f64 / n as f64 },
        median_trans: median(&errors.iter().map(|e| e.trans).collect::<Vec<_>>()),
        median_rot_deg: median(&errors.iter().map(|e| e.rot_deg).collect::<Vec<_>>()),
        accuracy,
    }
}

impl MetricsReport {
    pub fn accuracy_at(&self, t: Threshold) -> Option<f64> {
        self.accuracy.iter().find(|(th, _)| *th == t).map(|(_, a)| *a)
    }

    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        let mut s = format!(
            "frames            {}\nfailures          {}\nfailure_rate      {:.4}\nmedian_trans      {}\nmedian_rot_deg    {}\n",
            self.frames,
            self.failures,
            self.failure_rate,
            fmt(self.median_trans),
            fmt(self.median_rot_deg)
        );
        for (t, a) in &self.accuracy {
            s.push_str(&format!("acc@({}deg,{})   {:.4}\n", t.rot_deg, t.trans, a));
        }
        s
    }
}

/// One line per frame: id, status, errors, inlier and correspondence counts.
pub fn frame_records(results: &[LocalizeResult]) -> String {
    let mut s = String::from("frame\tstatus\tt_err\tr_err_deg\tinliers\tn_before\tn_after\n");
    for r in results {
        let (t, rr) = r
            .error
            .map_or(("nan".to_string(), "nan".to_string()), |e| (format!("{:.9}", e.trans), format!("{:.9}", e.rot_deg)));
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.frame_id,
            if r.succeeded() { "ok" } else { "failed" },
            t,
            rr,
            r.inliers,
            r.n_before,
            r.n_after
        ));
    }
    s
}
