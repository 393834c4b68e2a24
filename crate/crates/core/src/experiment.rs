//! End-to-end desk experiments: world generation, buffer construction,
//! pre-training and held-out evaluation, shared by the CLI and the
//! acceptance suite.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::buffers::{build_novel_buffer, build_pretrain_buffers, PRETRAIN_CAP};
use crate::maploc::{
    evaluate, localize, map_novel_scene, LocalizeConfig, LocalizeResult, MappingRunConfig, MetricsReport, Preset, QueryView,
    DEFAULT_THRESHOLDS,
};
use crate::pretrain::{PretrainConfig, Pretrainer, TupleBuffers};
use crate::regressor::{MapCode, RegressorConfig, RegressorParams};
use crate::seeds;
use crate::synthworld::{gen_dataset, FeatureOracle, SceneTuple, SplitConfig, ViewRender, WorldConfig};
use crate::Error;

const DESK_HEAD_PERIOD: usize = 1;
const DESK_PRETRAIN_ITERATIONS: usize = 6000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub split: SplitConfig,
    pub n_train: usize,
    pub n_heldout: usize,
    pub buffer_cap: usize,
    pub pretrain: PretrainConfig,
    pub mapping: MappingRunConfig,
    pub localize: LocalizeConfig,
    pub seed: u64,
    /// Where command outputs go; `None` defers to the caller's default.
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            split: SplitConfig::default(),
            n_train: 32,
            n_heldout: 8,
            buffer_cap: PRETRAIN_CAP,
            pretrain: PretrainConfig::default(),
            mapping: MappingRunConfig::default(),
            localize: LocalizeConfig::default(),
            seed: 0,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Calibrated desk-scale study, also shipped as `configs/desk.json`.
    pub fn desk() -> Self {
        let world = WorldConfig {
            n_points: 48,
            box_extent: [2.0, 2.0, 1.5],
            orbit_radius: [2.0, 2.5],
            d_feat: 64,
            shift_rank: 16,
            ..WorldConfig::default()
        };
        let pretrain = PretrainConfig {
            model: RegressorConfig {
                d_feat: 64,
                d_model: 32,
                n_blocks: 2,
                n_heads: 2,
                ffn_ratio: 2,
                d_map: 32,
                head_hidden: 32,
            },
            n_c: 32,
            n_active: 8,
            n_spb: 4,
            n_pps: 64,
            head_period: DESK_HEAD_PERIOD,
            trim: 1.0,
            total_iterations: DESK_PRETRAIN_ITERATIONS,
            log_every: 500,
            ..PretrainConfig::default()
        };
        Self {
            world,
            pretrain,
            mapping: Preset::Fast.config(),
            ..Self::default()
        }
    }

    /// Copy with `seed` as the experiment seed and every stage seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.pretrain.seed = seed;
        c.mapping.seed = seed;
        c.localize.seed = seed;
        c
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.world.validate()?;
        self.pretrain.validate()?;
        self.mapping.validate()?;
        if self.world.d_feat != self.pretrain.model.d_feat {
            return Err(Error::Config("world D_feat and regressor D_feat differ".into()));
        }
        if self.n_train < self.pretrain.n_active {
            return Err(Error::Config("fewer training tuples than active pool slots".into()));
        }
        Ok(())
    }
}

/// Scene tuples of one experiment: the oracle is shared, training and
/// held-out tuples never overlap.
pub struct World {
    pub oracle: FeatureOracle,
    pub train: Vec<SceneTuple>,
    pub heldout: Vec<SceneTuple>,
}

pub fn build_world(cfg: &ExperimentConfig) -> Result<World, Error> {
    let oracle = FeatureOracle::new(&cfg.world, seeds::derive(cfg.seed, &[0]))?;
    let train = gen_dataset(&cfg.world, &oracle, &cfg.split, cfg.n_train, seeds::derive(cfg.seed, &[1]), "train")?;
    let heldout = gen_dataset(&cfg.world, &oracle, &cfg.split, cfg.n_heldout, seeds::derive(cfg.seed, &[2]), "held")?;
    Ok(World { oracle, train, heldout })
}

pub fn pretrain_buffers(tuples: &[SceneTuple], cap: usize, seed: u64) -> Result<Vec<TupleBuffers>, Error> {
    tuples
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let (mapping, query) = build_pretrain_buffers(t, cap, seeds::derive(seed, &[3, i as u64]))?;
            Ok(TupleBuffers { mapping, query })
        })
        .collect()
}

pub fn pretrain<'a>(cfg: &PretrainConfig, data: &'a [TupleBuffers]) -> Result<Pretrainer<'a>, Error> {
    let mut t = Pretrainer::new(*cfg, data)?;
    t.run()?;
    Ok(t)
}

/// Localization results of one held-out tuple after mapping its code.
#[derive(Debug, Clone, PartialEq)]
pub struct TupleEval {
    pub tuple_id: String,
    pub mapping: Vec<LocalizeResult>,
    pub query: Vec<LocalizeResult>,
}

/// Fits one map code per held-out tuple from its mapping views, with d0 set
/// to the tuple's mean mapping-camera distance.
pub fn map_heldout(params: &RegressorParams<f32>, heldout: &[SceneTuple], mapping: &MappingRunConfig) -> Result<Vec<MapCode>, Error> {
    heldout
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let renders: Vec<&ViewRender> = t.mapping().collect();
            let buf = build_novel_buffer(
                t.id(),
                &renders,
                t.mean_camera_distance(),
                mapping.buffer_cap,
                seeds::derive(mapping.seed, &[4, i as u64]),
            )?;
            let mut mcfg = *mapping;
            mcfg.seed = seeds::derive(mapping.seed, &[5, i as u64]);
            Ok(map_novel_scene(params, &buf, &mcfg)?.code)
        })
        .collect()
}

/// Localizes the mapping and query views of each tuple against its code.
pub fn localize_heldout(
    params: &RegressorParams<f32>,
    heldout: &[SceneTuple],
    codes: &[MapCode],
    loc: &LocalizeConfig,
) -> Result<Vec<TupleEval>, Error> {
    if codes.len() != heldout.len() {
        return Err(Error::Config(format!("{} codes for {} tuples", codes.len(), heldout.len())));
    }
    let p64 = params.cast::<f64>();
    heldout
        .iter()
        .zip(codes)
        .map(|(t, c)| {
            let code = c.tokens_as::<f64>();
            let run_views = |views: Vec<&ViewRender>| -> Result<Vec<LocalizeResult>, Error> {
                views.into_iter().map(|r| localize(&p64, &code, &QueryView::from_render(r), loc)).collect()
            };
            Ok(TupleEval {
                tuple_id: t.id().to_string(),
                mapping: run_views(t.mapping().collect())?,
                query: run_views(t.query().collect())?,
            })
        })
        .collect()
}

/// Maps each held-out tuple, then localizes its mapping and query views.
pub fn evaluate_heldout(
    params: &RegressorParams<f32>,
    heldout: &[SceneTuple],
    mapping: &MappingRunConfig,
    loc: &LocalizeConfig,
) -> Result<Vec<TupleEval>, Error> {
    let codes = map_heldout(params, heldout, mapping)?;
    localize_heldout(params, heldout, &codes, loc)
}

pub fn query_report(evals: &[TupleEval]) -> MetricsReport {
    let all: Vec<LocalizeResult> = evals.iter().flat_map(|e| e.query.iter().cloned()).collect();
    evaluate(&all, &DEFAULT_THRESHOLDS)
}

pub fn mapping_report(evals: &[TupleEval]) -> MetricsReport {
    let all: Vec<LocalizeResult> = evals.iter().flat_map(|e| e.mapping.iter().cloned()).collect();
    evaluate(&all, &DEFAULT_THRESHOLDS)
}
