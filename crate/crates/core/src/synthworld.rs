//! Synthetic desk-scale worlds: point scenes, orbit trajectories, a feature
//! oracle standing in for an image encoder, view rendering, mapping/query
//! splits and rigid augmentation.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::{FormatError, Reader, Writer};
use crate::geometry::{project, Intrinsics, PoseSE3, Z_MIN};
use crate::seeds::{self, stream};
use crate::Error;

pub const SCENE_MAGIC: &[u8; 8] = b"ACEGSCN1";
pub const SCENE_FORMAT_VERSION: u32 = 1;
/// Minimum number of points every generated frame must observe.
pub const MIN_VISIBLE: usize = 32;
const TRAJECTORY_RETRIES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_points: usize,
    pub box_extent: [f64; 3],
    pub latent_dim: usize,
    pub d_feat: usize,
    pub oracle_hidden: usize,
    /// Weight of the condition-dependent drift.
    pub alpha: f64,
    /// Weight of the view-dependent term.
    pub beta: f64,
    pub sigma_noise: f64,
    /// Per-coordinate scale of the drift map before weighting by `alpha`.
    pub shift_gain: f64,
    /// Number of embedding directions the drift map writes into.
    pub shift_rank: usize,
    pub width: u32,
    pub height: u32,
    pub intrinsics: [f64; 4],
    pub orbit_radius: [f64; 2],
    pub n_frames: usize,
    pub query_condition: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_points: 512,
            box_extent: [4.0, 4.0, 3.0],
            latent_dim: 16,
            d_feat: 32,
            oracle_hidden: 64,
            alpha: 0.5,
            beta: 0.1,
            sigma_noise: 0.05,
            shift_gain: 1.0,
            shift_rank: 32,
            width: 256,
            height: 256,
            intrinsics: [128.0, 128.0, 128.0, 128.0],
            orbit_radius: [4.0, 5.0],
            n_frames: 40,
            query_condition: 1.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_points == 0 {
            return bad("world needs at least one point");
        }
        if self.box_extent.iter().any(|&e| !(e > 0.0)) {
            return bad("box extent must be positive");
        }
        if self.latent_dim == 0 || self.d_feat == 0 || self.oracle_hidden == 0 {
            return bad("oracle dimensions must be positive");
        }
        if self.shift_rank == 0 || self.shift_rank > self.d_feat {
            return bad("shift rank must lie in 1..=d_feat");
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.sigma_noise < 0.0 || self.shift_gain < 0.0 {
            return bad("oracle weights must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.query_condition) {
            return bad("query condition must lie in [0, 1]");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive");
        }
        if !(self.orbit_radius[0] > 0.0 && self.orbit_radius[0] <= self.orbit_radius[1]) {
            return bad("orbit radius range must be positive and ordered");
        }
        if self.n_frames < 4 {
            return bad("a trajectory needs at least 4 frames");
        }
        self.k()?;
        Ok(())
    }

    pub fn k(&self) -> Result<Intrinsics, Error> {
        let [fx, fy, cx, cy] = self.intrinsics;
        Ok(Intrinsics::new(fx, fy, cx, cy)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub seed: u64,
    pub bbox_min: Vector3<f64>,
    pub bbox_max: Vector3<f64>,
    pub points: Vec<Vector3<f64>>,
    pub appearance: Vec<Vec<f64>>,
}

impl Scene {
    pub fn centroid(&self) -> Vector3<f64> {
        (self.bbox_min + self.bbox_max) * 0.5
    }
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_gaussian(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..k).map(|_| gauss(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Uniform points in a box centred at the origin with unit-norm appearance
/// latents.
pub fn gen_scene(cfg: &WorldConfig, id: &str, seed: u64) -> Result<Scene, Error> {
    if cfg.n_points == 0 {
        return Err(Error::Config("scene needs at least one point".into()));
    }
    let half = Vector3::from(cfg.box_extent) * 0.5;
    let mut rng = seeds::rng(seed, &[stream::SCENE]);
    let points = (0..cfg.n_points)
        .map(|_| Vector3::from_fn(|i, _| rng.gen_range(-half[i]..half[i])))
        .collect();
    let appearance = (0..cfg.n_points).map(|_| unit_gaussian(&mut rng, cfg.latent_dim)).collect();
    Ok(Scene {
        id: id.to_string(),
        seed,
        bbox_min: -half,
        bbox_max: half,
        points,
        appearance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraFrame {
    pub id: usize,
    /// World-from-camera.
    pub pose: PoseSE3,
    pub intrinsics: Intrinsics,
    pub width: u32,
    pub height: u32,
}

impl CameraFrame {
    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0 && pixel.y >= 0.0 && pixel.x < self.width as f64 && pixel.y < self.height as f64
    }

    pub fn center(&self) -> Vector3<f64> {
        self.pose.translation
    }
}

/// Camera at `eye` looking at `target`, x right, y down, z forward, with the
/// world z axis as up.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> PoseSE3 {
    let f = (target - eye).normalize();
    let mut x = f.cross(&Vector3::z());
    if x.norm() < 1e-9 {
        x = f.cross(&Vector3::x());
    }
    let x = x.normalize();
    let y = f.cross(&x);
    PoseSE3 {
        rotation: Matrix3::from_columns(&[x, y, f]),
        translation: *eye,
    }
}

fn visible_count(scene: &Scene, frame: &CameraFrame) -> usize {
    scene
        .points
        .iter()
        .filter(|p| {
            let pr = project(&frame.intrinsics, &frame.pose, p);
            pr.z_cam > Z_MIN && frame.contains(&pr.pixel)
        })
        .count()
}

/// A smooth arc around the scene centre. Radius, height and look-at target
/// vary as low-frequency sinusoids with random phases.
pub fn gen_trajectory(scene: &Scene, cfg: &WorldConfig, n_frames: usize, seed: u64) -> Result<Vec<CameraFrame>, Error> {
    if n_frames < 2 {
        return Err(Error::Config("trajectory needs at least 2 frames".into()));
    }
    let k = cfg.k()?;
    let mut rng = seeds::rng(seed, &[stream::TRAJECTORY]);
    let c = scene.centroid();
    let extent = scene.bbox_max - scene.bbox_min;
    for _ in 0..TRAJECTORY_RETRIES {
        let r0 = rng.gen_range(cfg.orbit_radius[0]..=cfg.orbit_radius[1]);
        let start = rng.gen_range(0.0..std::f64::consts::TAU);
        // keep consecutive centres well under a tenth of the radius apart
        let step = rng.gen_range(0.03..0.06);
        let dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let elev = rng.gen_range(0.15..0.6);
        let phases: [f64; 5] = std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU));
        let frames: Vec<CameraFrame> = (0..n_frames)
            .map(|i| {
                let s = i as f64 * step;
                let theta = start + dir * s;
                let r = r0 * (1.0 + 0.05 * (0.7 * s + phases[0]).sin());
                let h = r * (elev + 0.1 * (0.9 * s + phases[1]).sin());
                let eye = c + Vector3::new(r * theta.cos(), r * theta.sin(), h);
                let jitter = Vector3::new(
                    0.1 * extent.x * (1.1 * s + phases[2]).sin(),
                    0.1 * extent.y * (1.3 * s + phases[3]).sin(),
                    0.1 * extent.z * (0.8 * s + phases[4]).sin(),
                );
                CameraFrame {
                    id: i,
                    pose: look_at(&eye, &(c + jitter)),
                    intrinsics: k,
                    width: cfg.width,
                    height: cfg.height,
                }
            })
            .collect();
        if frames.iter().all(|f| visible_count(scene, f) >= MIN_VISIBLE) {
            return Ok(frames);
        }
    }
    Err(Error::Config(format!(
        "no trajectory with at least {MIN_VISIBLE} visible points per frame after {TRAJECTORY_RETRIES} attempts"
    )))
}

/// Random two-layer map `x ↦ s · W₂ tanh(W₁x + b₁)`, with `s` chosen so the
/// output has unit mean-square coordinate over unit-norm inputs.
#[derive(Debug, Clone, PartialEq)]
struct TanhMap {
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    w2: DMatrix<f64>,
}

impl TanhMap {
    fn new(rng: &mut ChaCha8Rng, d_in: usize, hidden: usize, d_out: usize, rank: usize) -> Self {
        let w1 = DMatrix::from_fn(hidden, d_in, |_, _| gauss(rng));
        let b1 = DVector::from_fn(hidden, |_, _| 0.5 * gauss(rng));
        let basis = DMatrix::from_fn(d_out, rank, |_, _| gauss(rng));
        let basis = basis.qr().q();
        let coef = DMatrix::from_fn(rank, hidden, |_, _| gauss(rng));
        let mut map = Self {
            w1,
            b1,
            w2: basis * coef,
        };
        let probes = 512;
        let mut ms = 0.0;
        for _ in 0..probes {
            let x = unit_gaussian(rng, d_in);
            ms += map.apply(&x).norm_squared();
        }
        let scale = (ms / (probes * d_out) as f64).sqrt();
        if scale > 0.0 {
            map.w2 /= scale;
        }
        map
    }

    fn apply(&self, x: &[f64]) -> DVector<f64> {
        let h = (&self.w1 * DVector::from_column_slice(x) + &self.b1).map(f64::tanh);
        &self.w2 * h
    }
}

/// `e = F(a) + α·c·G(a) + β·B(v) + ε`, with `F`, `G`, `B` frozen random maps.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureOracle {
    f: TanhMap,
    g: TanhMap,
    b: TanhMap,
    pub alpha: f64,
    pub beta: f64,
    pub sigma_noise: f64,
    pub shift_gain: f64,
    pub d_feat: usize,
}

impl FeatureOracle {
    pub fn new(cfg: &WorldConfig, seed: u64) -> Result<Self, Error> {
        cfg.validate()?;
        let mut rng = seeds::rng(seed, &[stream::ORACLE]);
        let (k, h, d) = (cfg.latent_dim, cfg.oracle_hidden, cfg.d_feat);
        Ok(Self {
            f: TanhMap::new(&mut rng, k, h, d, d),
            g: TanhMap::new(&mut rng, k, h, d, cfg.shift_rank),
            b: TanhMap::new(&mut rng, 3, h, d, d),
            alpha: cfg.alpha,
            beta: cfg.beta,
            sigma_noise: cfg.sigma_noise,
            shift_gain: cfg.shift_gain,
            d_feat: d,
        })
    }

    pub fn with_alpha(&self, alpha: f64) -> Self {
        Self { alpha, ..self.clone() }
    }

    pub fn embed<R: Rng>(&self, appearance: &[f64], view_dir: &Vector3<f64>, condition: f64, rng: &mut R) -> Vec<f64> {
        let mut e = self.f.apply(appearance);
        if self.alpha != 0.0 && condition != 0.0 {
            e += self.g.apply(appearance) * (self.alpha * self.shift_gain * condition);
        }
        if self.beta != 0.0 {
            e += self.b.apply(view_dir.as_slice()) * self.beta;
        }
        if self.sigma_noise > 0.0 {
            for v in e.iter_mut() {
                *v += self.sigma_noise * gauss(rng);
            }
        }
        e.as_slice().to_vec()
    }

    pub fn embed_seeded(&self, appearance: &[f64], view_dir: &Vector3<f64>, condition: f64, noise_seed: u64) -> Vec<f64> {
        self.embed(appearance, view_dir, condition, &mut seeds::rng(noise_seed, &[]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchObservation {
    pub point_id: u32,
    pub pixel: Vector2<f64>,
    pub embedding: Vec<f32>,
    /// Ground-truth scene coordinate.
    pub y: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewRender {
    pub frame: CameraFrame,
    pub condition: f64,
    pub observations: Vec<PatchObservation>,
}

pub fn render_view(
    scene: &Scene,
    oracle: &FeatureOracle,
    frame: &CameraFrame,
    condition: f64,
    seed: u64,
) -> Result<ViewRender, Error> {
    if !(0.0..=1.0).contains(&condition) {
        return Err(Error::Config(format!("condition {condition} outside [0, 1]")));
    }
    if !frame.pose.is_valid(1e-6) {
        return Err(crate::geometry::GeometryError::InvalidPose("render frame".into()).into());
    }
    let mut rng = seeds::rng(seed, &[stream::RENDER, frame.id as u64]);
    let eye = frame.center();
    let mut observations = Vec::new();
    for (i, p) in scene.points.iter().enumerate() {
        let pr = project(&frame.intrinsics, &frame.pose, p);
        if !(pr.z_cam > Z_MIN) || !frame.contains(&pr.pixel) {
            continue;
        }
        let view_dir = (p - eye).normalize();
        let e = oracle.embed(&scene.appearance[i], &view_dir, condition, &mut rng);
        observations.push(PatchObservation {
            point_id: i as u32,
            pixel: pr.pixel,
            embedding: e.into_iter().map(|v| v as f32).collect(),
            y: *p,
        });
    }
    Ok(ViewRender {
        frame: *frame,
        condition,
        observations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitScheme {
    Interspersed,
    QueryMappingQuery,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub scheme: SplitScheme,
    pub mapping_len: [usize; 2],
    pub query_len: [usize; 2],
    pub random_rotation: bool,
    pub mirror: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            scheme: SplitScheme::Interspersed,
            mapping_len: [4, 10],
            query_len: [2, 6],
            random_rotation: true,
            mirror: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub mapping: Vec<usize>,
    pub query: Vec<usize>,
}

pub fn sample_split(n_frames: usize, cfg: &SplitConfig, seed: u64) -> Result<Split, Error> {
    if n_frames < 4 {
        return Err(Error::Config(format!("split needs at least 4 frames, got {n_frames}")));
    }
    let ok = |r: [usize; 2]| r[0] >= 1 && r[0] <= r[1];
    if !ok(cfg.mapping_len) || !ok(cfg.query_len) {
        return Err(Error::Config("interval length ranges must be ordered and positive".into()));
    }
    let mut rng = seeds::rng(seed, &[stream::SPLIT]);
    let mut split = Split {
        mapping: Vec::new(),
        query: Vec::new(),
    };
    match cfg.scheme {
        SplitScheme::Interspersed => {
            let mut mapping_turn = rng.gen_bool(0.5);
            let mut i = 0;
            while i < n_frames {
                let range = if mapping_turn { cfg.mapping_len } else { cfg.query_len };
                let len = rng.gen_range(range[0]..=range[1]).min(n_frames - i);
                let dst = if mapping_turn { &mut split.mapping } else { &mut split.query };
                dst.extend(i..i + len);
                i += len;
                mapping_turn = !mapping_turn;
            }
        }
        SplitScheme::QueryMappingQuery => {
            let m = rng.gen_range(cfg.mapping_len[0]..=cfg.mapping_len[1]).min(n_frames - 2);
            let start = rng.gen_range(1..=n_frames - m - 1);
            split.query.extend(0..start);
            split.mapping.extend(start..start + m);
            split.query.extend(start + m..n_frames);
        }
    }
    if split.mapping.is_empty() || split.query.is_empty() {
        return Err(Error::Config("split produced an empty mapping or query set".into()));
    }
    Ok(split)
}

/// Uniform random rotation: QR of a Gaussian matrix with the sign of R's
/// diagonal folded into Q, then a determinant fix.
pub fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let a = Matrix3::from_fn(|_, _| gauss(rng));
    let qr = a.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..3 {
        if r[(j, j)] < 0.0 {
            q.set_column(j, &(-q.column(j)));
        }
    }
    if q.determinant() < 0.0 {
        q.set_column(0, &(-q.column(0)));
    }
    q
}

/// A scene with its rendered views: the unit that augmentation acts on.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneInstance {
    pub scene: Scene,
    pub renders: Vec<ViewRender>,
}

impl SceneInstance {
    pub fn rotate(&mut self, q: &Matrix3<f64>) {
        let s = &mut self.scene;
        for p in s.points.iter_mut() {
            *p = q * *p;
        }
        let corners: Vec<Vector3<f64>> = (0..8)
            .map(|c| {
                let pick = |i: usize| if c >> i & 1 == 1 { s.bbox_max[i] } else { s.bbox_min[i] };
                q * Vector3::new(pick(0), pick(1), pick(2))
            })
            .collect();
        s.bbox_min = corners.iter().fold(Vector3::repeat(f64::INFINITY), |m, c| m.inf(c));
        s.bbox_max = corners.iter().fold(Vector3::repeat(f64::NEG_INFINITY), |m, c| m.sup(c));
        for r in self.renders.iter_mut() {
            r.frame.pose = PoseSE3 {
                rotation: q * r.frame.pose.rotation,
                translation: q * r.frame.pose.translation,
            };
            for o in r.observations.iter_mut() {
                o.y = q * o.y;
            }
        }
    }

    /// Reflects the world across x = 0 and the cameras across their own
    /// x axes, which maps each pixel `u` to `2·cx − u`.
    pub fn mirror(&mut self) {
        let m = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0));
        let s = &mut self.scene;
        for p in s.points.iter_mut() {
            p.x = -p.x;
        }
        let (lo, hi) = (s.bbox_min.x, s.bbox_max.x);
        s.bbox_min.x = -hi;
        s.bbox_max.x = -lo;
        for r in self.renders.iter_mut() {
            r.frame.pose = PoseSE3 {
                rotation: m * r.frame.pose.rotation * m,
                translation: m * r.frame.pose.translation,
            };
            let cx = r.frame.intrinsics.cx;
            for o in r.observations.iter_mut() {
                o.y.x = -o.y.x;
                o.pixel.x = 2.0 * cx - o.pixel.x;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentConfig {
    pub rotate: bool,
    pub mirror: bool,
}

pub fn apply_augment(instance: &SceneInstance, cfg: AugmentConfig, seed: u64) -> SceneInstance {
    let mut rng = seeds::rng(seed, &[stream::AUGMENT]);
    let mut out = instance.clone();
    if cfg.mirror && rng.gen_bool(0.5) {
        out.mirror();
    }
    if cfg.rotate {
        out.rotate(&random_rotation(&mut rng));
    }
    out
}

/// One scene split into mapping views (condition 0) and query views.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTuple {
    pub instance: SceneInstance,
    pub split: Split,
    pub seeds: TupleSeeds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TupleSeeds {
    pub scene: u64,
    pub trajectory: u64,
    pub noise: u64,
    pub split: u64,
}

impl TupleSeeds {
    pub fn derive(seed: u64, index: u64) -> Self {
        Self {
            scene: seeds::derive(seed, &[stream::SCENE, index]),
            trajectory: seeds::derive(seed, &[stream::TRAJECTORY, index]),
            noise: seeds::derive(seed, &[stream::RENDER, index]),
            split: seeds::derive(seed, &[stream::SPLIT, index]),
        }
    }
}

impl SceneTuple {
    pub fn generate(
        world: &WorldConfig,
        oracle: &FeatureOracle,
        split_cfg: &SplitConfig,
        id: &str,
        seeds: TupleSeeds,
    ) -> Result<Self, Error> {
        let scene = gen_scene(world, id, seeds.scene)?;
        let frames = gen_trajectory(&scene, world, world.n_frames, seeds.trajectory)?;
        let split = sample_split(frames.len(), split_cfg, seeds.split)?;
        let mut renders = Vec::with_capacity(frames.len());
        for f in &frames {
            let condition = if split.query.contains(&f.id) { world.query_condition } else { 0.0 };
            renders.push(render_view(&scene, oracle, f, condition, seeds.noise)?);
        }
        Ok(Self {
            instance: SceneInstance { scene, renders },
            split,
            seeds,
        })
    }

    pub fn id(&self) -> &str {
        &self.instance.scene.id
    }

    pub fn mapping(&self) -> impl Iterator<Item = &ViewRender> {
        self.split.mapping.iter().map(|&i| &self.instance.renders[i])
    }

    pub fn query(&self) -> impl Iterator<Item = &ViewRender> {
        self.split.query.iter().map(|&i| &self.instance.renders[i])
    }

    /// Mean distance from mapping cameras to the scene centre.
    pub fn mean_camera_distance(&self) -> f64 {
        let c = self.instance.scene.centroid();
        let n = self.split.mapping.len().max(1) as f64;
        self.mapping().map(|r| (r.frame.center() - c).norm()).sum::<f64>() / n
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_magic(SCENE_MAGIC);
        w.u32(SCENE_FORMAT_VERSION);
        let s = &self.instance.scene;
        w.str(&s.id);
        for v in [self.seeds.scene, self.seeds.trajectory, self.seeds.noise, self.seeds.split] {
            w.u64(v);
        }
        w.u64(s.seed);
        w.f64s(s.bbox_min.as_slice());
        w.f64s(s.bbox_max.as_slice());
        let k = s.appearance.first().map_or(0, |a| a.len());
        w.u32(s.points.len() as u32);
        w.u32(k as u32);
        for (p, a) in s.points.iter().zip(&s.appearance) {
            w.f64s(p.as_slice());
            w.f64s(a);
        }
        w.u32(self.instance.renders.len() as u32);
        for r in &self.instance.renders {
            let f = &r.frame;
            w.u32(f.id as u32);
            w.u32(f.width);
            w.u32(f.height);
            w.f64s(&f.intrinsics.as_array());
            w.f64s(f.pose.rotation.transpose().as_slice());
            w.f64s(f.pose.translation.as_slice());
            w.f64(r.condition);
            let d = r.observations.first().map_or(0, |o| o.embedding.len());
            w.u32(r.observations.len() as u32);
            w.u32(d as u32);
            for o in &r.observations {
                w.u32(o.point_id);
                w.f64s(o.pixel.as_slice());
                w.f64s(o.y.as_slice());
                w.f32s(&o.embedding);
            }
        }
        for set in [&self.split.mapping, &self.split.query] {
            w.u32(set.len() as u32);
            for &i in set.iter() {
                w.u32(i as u32);
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::expect_magic(bytes, SCENE_MAGIC)?;
        let version = r.u32()?;
        if version != SCENE_FORMAT_VERSION {
            return Err(FormatError::Invalid(format!("unsupported scene format version {version}")));
        }
        let id = r.str()?;
        let seeds = TupleSeeds {
            scene: r.u64()?,
            trajectory: r.u64()?,
            noise: r.u64()?,
            split: r.u64()?,
        };
        let scene_seed = r.u64()?;
        let v3 = |r: &mut Reader| -> Result<Vector3<f64>, FormatError> { Ok(Vector3::from_vec(r.f64s(3)?)) };
        let bbox_min = v3(&mut r)?;
        let bbox_max = v3(&mut r)?;
        let n = r.u32()? as usize;
        let k = r.u32()? as usize;
        let mut points = Vec::with_capacity(n);
        let mut appearance = Vec::with_capacity(n);
        for _ in 0..n {
            points.push(v3(&mut r)?);
            appearance.push(r.f64s(k)?);
        }
        let n_frames = r.u32()? as usize;
        let mut renders = Vec::with_capacity(n_frames);
        for _ in 0..n_frames {
            let fid = r.u32()? as usize;
            let width = r.u32()?;
            let height = r.u32()?;
            let kk = r.f64s(4)?;
            let intrinsics =
                Intrinsics::new(kk[0], kk[1], kk[2], kk[3]).map_err(|e| FormatError::Invalid(e.to_string()))?;
            let rotation = Matrix3::from_row_slice(&r.f64s(9)?);
            let translation = v3(&mut r)?;
            let condition = r.f64()?;
            let n_obs = r.u32()? as usize;
            let d = r.u32()? as usize;
            let mut observations = Vec::with_capacity(n_obs);
            for _ in 0..n_obs {
                let point_id = r.u32()?;
                let px = r.f64s(2)?;
                let y = v3(&mut r)?;
                let embedding = r.f32s(d)?;
                observations.push(PatchObservation {
                    point_id,
                    pixel: Vector2::new(px[0], px[1]),
                    embedding,
                    y,
                });
            }
            renders.push(ViewRender {
                frame: CameraFrame {
                    id: fid,
                    pose: PoseSE3 { rotation, translation },
                    intrinsics,
                    width,
                    height,
                },
                condition,
                observations,
            });
        }
        let mut sets = [Vec::new(), Vec::new()];
        for set in sets.iter_mut() {
            let m = r.u32()? as usize;
            for _ in 0..m {
                let i = r.u32()? as usize;
                if i >= n_frames {
                    return Err(FormatError::Invalid(format!("split index {i} out of range")));
                }
                set.push(i);
            }
        }
        r.finish()?;
        let [mapping, query] = sets;
        Ok(Self {
            instance: SceneInstance {
                scene: Scene {
                    id,
                    seed: scene_seed,
                    bbox_min,
                    bbox_max,
                    points,
                    appearance,
                },
                renders,
            },
            split: Split { mapping, query },
            seeds,
        })
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Ok(Self::from_bytes(&std::fs::read(path)?)?)
    }
}

/// `n` scene tuples sharing one feature oracle.
pub fn gen_dataset(
    world: &WorldConfig,
    oracle: &FeatureOracle,
    split_cfg: &SplitConfig,
    n: usize,
    seed: u64,
    id_prefix: &str,
) -> Result<Vec<SceneTuple>, Error> {
    (0..n)
        .map(|i| {
            SceneTuple::generate(world, oracle, split_cfg, &format!("{id_prefix}{i:03}"), TupleSeeds::derive(seed, i as u64))
        })
        .collect()
}
