//! Shuffled patch buffers, batch sampling and the dataset manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::binio::{FormatError, Reader, Writer};
use crate::geometry::{Intrinsics, PoseSE3};
use crate::seeds::{self, stream};
use crate::synthworld::{SceneTuple, ViewRender};
use crate::Error;

pub const BUFFER_MAGIC: &[u8; 8] = b"ACEGBUF1";
pub const PRETRAIN_SCHEMA: u8 = 1;
pub const NOVEL_SCHEMA: u8 = 2;
pub const PRETRAIN_CAP: usize = 50_000;
pub const NOVEL_CAP: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Mapping,
    Query,
}

impl Role {
    pub fn tag(self) -> &'static str {
        match self {
            Role::Mapping => "M",
            Role::Query => "Q",
        }
    }

    fn from_u8(v: u8) -> Result<Self, FormatError> {
        match v {
            0 => Ok(Role::Mapping),
            1 => Ok(Role::Query),
            _ => Err(FormatError::Invalid(format!("unknown buffer role {v}"))),
        }
    }

    fn as_u8(self) -> u8 {
        match self {
            Role::Mapping => 0,
            Role::Query => 1,
        }
    }
}

/// Embedding / ground-truth coordinate records of one role of one tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainBuffer {
    pub scene_id: String,
    pub role: Role,
    pub seed: u64,
    pub d_feat: usize,
    /// Source frame of every record.
    pub frame_ids: Vec<u32>,
    pub embeddings: Vec<f32>,
    pub targets: Vec<Vector3<f64>>,
}

impl PretrainBuffer {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn embedding(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.d_feat..(i + 1) * self.d_feat]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_magic(BUFFER_MAGIC);
        w.u8(PRETRAIN_SCHEMA);
        w.u8(self.role.as_u8());
        w.str(&self.scene_id);
        w.u64(self.seed);
        w.u64(self.len() as u64);
        w.u32(self.d_feat as u32);
        for i in 0..self.len() {
            w.u32(self.frame_ids[i]);
            w.f32s(self.embedding(i));
            w.f64s(self.targets[i].as_slice());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::expect_magic(bytes, BUFFER_MAGIC)?;
        let schema = r.u8()?;
        if schema != PRETRAIN_SCHEMA {
            return Err(FormatError::Invalid(format!("expected pretrain buffer schema, got {schema}")));
        }
        let role = Role::from_u8(r.u8()?)?;
        let scene_id = r.str()?;
        let seed = r.u64()?;
        let n = r.u64()? as usize;
        let d_feat = r.u32()? as usize;
        let mut out = Self {
            scene_id,
            role,
            seed,
            d_feat,
            frame_ids: Vec::with_capacity(n.min(r.remaining())),
            embeddings: Vec::new(),
            targets: Vec::new(),
        };
        for _ in 0..n {
            out.frame_ids.push(r.u32()?);
            out.embeddings.extend(r.f32s(d_feat)?);
            out.targets.push(Vector3::from_vec(r.f64s(3)?));
        }
        r.finish()?;
        if out.is_empty() {
            return Err(FormatError::Invalid("empty buffer".into()));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Ok(Self::from_bytes(&std::fs::read(path)?)?)
    }
}

/// Visits every observation of `renders`, shuffles the flat index list and
/// keeps the first `cap` entries.
fn shuffled_records(renders: &[&ViewRender], cap: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut all: Vec<(usize, usize)> = renders
        .iter()
        .enumerate()
        .flat_map(|(f, r)| (0..r.observations.len()).map(move |o| (f, o)))
        .collect();
    let mut rng = seeds::rng(seed, &[stream::BUFFER]);
    all.shuffle(&mut rng);
    all.truncate(cap);
    all
}

fn pretrain_buffer(tuple: &SceneTuple, role: Role, cap: usize, seed: u64) -> Result<PretrainBuffer, Error> {
    let renders: Vec<&ViewRender> = match role {
        Role::Mapping => tuple.mapping().collect(),
        Role::Query => tuple.query().collect(),
    };
    let records = shuffled_records(&renders, cap, seeds::derive(seed, &[role.as_u8() as u64]));
    if records.is_empty() {
        return Err(Error::Config(format!("{} has no {} observations", tuple.id(), role.tag())));
    }
    let d_feat = renders[records[0].0].observations[records[0].1].embedding.len();
    let mut buf = PretrainBuffer {
        scene_id: tuple.id().to_string(),
        role,
        seed,
        d_feat,
        frame_ids: Vec::with_capacity(records.len()),
        embeddings: Vec::with_capacity(records.len() * d_feat),
        targets: Vec::with_capacity(records.len()),
    };
    for (f, o) in records {
        let ob = &renders[f].observations[o];
        buf.frame_ids.push(renders[f].frame.id as u32);
        buf.embeddings.extend_from_slice(&ob.embedding);
        buf.targets.push(ob.y);
    }
    Ok(buf)
}

/// Mapping and query buffers of one tuple.
pub fn build_pretrain_buffers(
    tuple: &SceneTuple,
    cap: usize,
    seed: u64,
) -> Result<(PretrainBuffer, PretrainBuffer), Error> {
    if cap == 0 {
        return Err(Error::Config("buffer cap must be positive".into()));
    }
    Ok((
        pretrain_buffer(tuple, Role::Mapping, cap, seed)?,
        pretrain_buffer(tuple, Role::Query, cap, seed)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BufferFrame {
    pub id: u32,
    pub pose: PoseSE3,
    pub intrinsics: Intrinsics,
}

/// Records for mapping a new scene: embedding, pixel and the index of the
/// posed, calibrated frame it was observed in.
#[derive(Debug, Clone, PartialEq)]
pub struct NovelSceneBuffer {
    pub scene_id: String,
    pub seed: u64,
    pub d_feat: usize,
    /// Constant depth used as the fallback target for invalid predictions.
    pub prior_depth: f64,
    pub frames: Vec<BufferFrame>,
    pub frame_index: Vec<u32>,
    pub embeddings: Vec<f32>,
    pub pixels: Vec<Vector2<f64>>,
}

impl NovelSceneBuffer {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn embedding(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.d_feat..(i + 1) * self.d_feat]
    }

    pub fn frame_of(&self, i: usize) -> &BufferFrame {
        &self.frames[self.frame_index[i] as usize]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_magic(BUFFER_MAGIC);
        w.u8(NOVEL_SCHEMA);
        w.u8(Role::Mapping.as_u8());
        w.str(&self.scene_id);
        w.u64(self.seed);
        w.u64(self.len() as u64);
        w.u32(self.d_feat as u32);
        w.f64(self.prior_depth);
        w.u32(self.frames.len() as u32);
        for f in &self.frames {
            w.u32(f.id);
            w.f64s(&f.intrinsics.as_array());
            w.f64s(f.pose.rotation.transpose().as_slice());
            w.f64s(f.pose.translation.as_slice());
        }
        for i in 0..self.len() {
            w.u32(self.frame_index[i]);
            w.f64s(self.pixels[i].as_slice());
            w.f32s(self.embedding(i));
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::expect_magic(bytes, BUFFER_MAGIC)?;
        let schema = r.u8()?;
        if schema != NOVEL_SCHEMA {
            return Err(FormatError::Invalid(format!("expected novel-scene buffer schema, got {schema}")));
        }
        Role::from_u8(r.u8()?)?;
        let scene_id = r.str()?;
        let seed = r.u64()?;
        let n = r.u64()? as usize;
        let d_feat = r.u32()? as usize;
        let prior_depth = r.f64()?;
        let nf = r.u32()? as usize;
        let mut frames = Vec::with_capacity(nf.min(r.remaining()));
        for _ in 0..nf {
            let id = r.u32()?;
            let k = r.f64s(4)?;
            let intrinsics = Intrinsics::new(k[0], k[1], k[2], k[3]).map_err(|e| FormatError::Invalid(e.to_string()))?;
            let rotation = Matrix3::from_row_slice(&r.f64s(9)?);
            let translation = Vector3::from_vec(r.f64s(3)?);
            let pose = PoseSE3::new(rotation, translation).map_err(|e| FormatError::Invalid(e.to_string()))?;
            frames.push(BufferFrame { id, pose, intrinsics });
        }
        let mut out = Self {
            scene_id,
            seed,
            d_feat,
            prior_depth,
            frames,
            frame_index: Vec::new(),
            embeddings: Vec::new(),
            pixels: Vec::new(),
        };
        for _ in 0..n {
            let fi = r.u32()?;
            if fi as usize >= nf {
                return Err(FormatError::Invalid(format!("frame index {fi} out of range")));
            }
            out.frame_index.push(fi);
            let p = r.f64s(2)?;
            out.pixels.push(Vector2::new(p[0], p[1]));
            out.embeddings.extend(r.f32s(d_feat)?);
        }
        r.finish()?;
        if out.is_empty() {
            return Err(FormatError::Invalid("empty buffer".into()));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Ok(Self::from_bytes(&std::fs::read(path)?)?)
    }
}

pub fn build_novel_buffer(
    scene_id: &str,
    renders: &[&ViewRender],
    prior_depth: f64,
    cap: usize,
    seed: u64,
) -> Result<NovelSceneBuffer, Error> {
    if cap == 0 {
        return Err(Error::Config("buffer cap must be positive".into()));
    }
    if !(prior_depth > 0.0) {
        return Err(Error::Config(format!("prior depth must be positive, got {prior_depth}")));
    }
    let records = shuffled_records(renders, cap, seed);
    if records.is_empty() {
        return Err(Error::Config(format!("{scene_id} has no mapping observations")));
    }
    for r in renders {
        if !r.frame.pose.is_valid(1e-6) {
            return Err(crate::geometry::GeometryError::InvalidPose(format!("frame {}", r.frame.id)).into());
        }
    }
    let d_feat = renders[records[0].0].observations[records[0].1].embedding.len();
    let mut buf = NovelSceneBuffer {
        scene_id: scene_id.to_string(),
        seed,
        d_feat,
        prior_depth,
        frames: renders
            .iter()
            .map(|r| BufferFrame {
                id: r.frame.id as u32,
                pose: r.frame.pose,
                intrinsics: r.frame.intrinsics,
            })
            .collect(),
        frame_index: Vec::with_capacity(records.len()),
        embeddings: Vec::with_capacity(records.len() * d_feat),
        pixels: Vec::with_capacity(records.len()),
    };
    for (f, o) in records {
        let ob = &renders[f].observations[o];
        buf.frame_index.push(f as u32);
        buf.pixels.push(ob.pixel);
        buf.embeddings.extend_from_slice(&ob.embedding);
    }
    Ok(buf)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSpec {
    pub scenes_per_batch: usize,
    pub patches_per_scene: usize,
}

/// Records drawn for one scene; `slot` indexes the caller's scene list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneBatch {
    pub slot: usize,
    pub rows: Vec<usize>,
}

/// Draws `scenes_per_batch` distinct scenes among `eligible` (slot, buffer
/// length) pairs, then `patches_per_scene` rows per scene with replacement.
/// Scenes come back in increasing slot order.
pub fn sample_batch<R: Rng>(eligible: &[(usize, usize)], spec: BatchSpec, rng: &mut R) -> Result<Vec<SceneBatch>, Error> {
    if spec.scenes_per_batch == 0 || spec.patches_per_scene == 0 {
        return Err(Error::Config("batch spec entries must be at least 1".into()));
    }
    if eligible.len() < spec.scenes_per_batch {
        return Err(Error::Config(format!(
            "{} eligible scenes, batch needs {}",
            eligible.len(),
            spec.scenes_per_batch
        )));
    }
    if eligible.iter().any(|&(_, n)| n == 0) {
        return Err(Error::Config("eligible scene with empty buffer".into()));
    }
    let mut picked: Vec<(usize, usize)> = index::sample(rng, eligible.len(), spec.scenes_per_batch)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    picked.sort_unstable();
    Ok(picked
        .into_iter()
        .map(|(slot, n)| SceneBatch {
            slot,
            rows: (0..spec.patches_per_scene).map(|_| rng.gen_range(0..n)).collect(),
        })
        .collect())
}

/// Entry of the dataset manifest: one tuple with its scene file and buffers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub tuple_id: String,
    pub scene: String,
    pub mapping: String,
    pub query: String,
    pub mapping_sha256: String,
    pub query_sha256: String,
}

/// Flat `key = value` text listing buffer files per tuple; paths are
/// relative to the manifest's directory.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub header: BTreeMap<String, String>,
    pub entries: Vec<ManifestEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.header {
            let _ = writeln!(s, "{k} = {v}");
        }
        for e in &self.entries {
            let t = &e.tuple_id;
            let _ = writeln!(s, "tuple.{t}.scene = {}", e.scene);
            let _ = writeln!(s, "tuple.{t}.M = {}", e.mapping);
            let _ = writeln!(s, "tuple.{t}.M.sha256 = {}", e.mapping_sha256);
            let _ = writeln!(s, "tuple.{t}.Q = {}", e.query);
            let _ = writeln!(s, "tuple.{t}.Q.sha256 = {}", e.query_sha256);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, Error> {
        let mut header = BTreeMap::new();
        let mut tuples: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut order = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("manifest line {} lacks '='", n + 1)))?;
            let (k, v) = (k.trim(), v.trim().to_string());
            if let Some(rest) = k.strip_prefix("tuple.") {
                let (id, field) = rest
                    .split_once('.')
                    .ok_or_else(|| Error::Config(format!("malformed manifest key {k}")))?;
                if !tuples.contains_key(id) {
                    order.push(id.to_string());
                }
                tuples.entry(id.to_string()).or_default().insert(field.to_string(), v);
            } else {
                header.insert(k.to_string(), v);
            }
        }
        let mut entries = Vec::with_capacity(order.len());
        for id in order {
            let f = &tuples[&id];
            let get = |key: &str| {
                f.get(key)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("manifest tuple {id} lacks {key}")))
            };
            entries.push(ManifestEntry {
                tuple_id: id.clone(),
                scene: get("scene")?,
                mapping: get("M")?,
                query: get("Q")?,
                mapping_sha256: get("M.sha256")?,
                query_sha256: get("Q.sha256")?,
            });
        }
        Ok(Self { header, entries })
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}
