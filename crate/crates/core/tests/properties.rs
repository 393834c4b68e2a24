use aceg_core::autodiff::Tensor;
use aceg_core::buffers::{build_novel_buffer, build_pretrain_buffers};
use aceg_core::experiment::{build_world, pretrain_buffers, ExperimentConfig};
use aceg_core::maploc::{map_novel_scene, median, predict_scene_coords, prefilter, MappingRunConfig, QueryView};
use aceg_core::pretrain::{LogRecord, PretrainConfig, Pretrainer};
use aceg_core::regressor::{regress, RegressorConfig, RegressorParams};
use aceg_core::seeds;
use aceg_core::synthworld::{sample_split, FeatureOracle, SceneTuple, SplitConfig, ViewRender, WorldConfig};
use nalgebra::Vector3;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn small_experiment() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.world.n_points = 40;
    cfg.world.n_frames = 16;
    cfg.world.d_feat = 16;
    cfg.world.latent_dim = 8;
    cfg.world.oracle_hidden = 16;
    cfg.world.shift_rank = 4;
    cfg.split.mapping_len = [2, 4];
    cfg.split.query_len = [1, 3];
    cfg.n_train = 4;
    cfg.n_heldout = 1;
    cfg.buffer_cap = 4000;
    cfg.pretrain.model = RegressorConfig {
        d_feat: 16,
        d_model: 8,
        n_blocks: 1,
        n_heads: 2,
        ffn_ratio: 2,
        d_map: 8,
        head_hidden: 8,
    };
    cfg.pretrain.n_c = 8;
    cfg.mapping.n_c = 8;
    cfg.mapping.iterations = 20;
    cfg.mapping.batch_size = 64;
    cfg
}

fn chi2_critical(df: usize) -> f64 {
    ChiSquared::new(df as f64).unwrap().inverse_cdf(0.999)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn oracle_cross_condition_correlation_falls_as_alpha_grows() {
    let cfg = WorldConfig {
        sigma_noise: 0.0,
        ..WorldConfig::default()
    };
    let oracle = FeatureOracle::new(&cfg, 3).unwrap();
    let mut rng = seeds::rng(8, &[]);
    let appearances: Vec<Vec<f64>> = (0..200)
        .map(|_| (0..cfg.latent_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let view = Vector3::new(0.0, 0.0, 1.0);
    let corr = |alpha: f64| {
        let o = oracle.with_alpha(alpha);
        let (mut base, mut shifted) = (Vec::new(), Vec::new());
        for a in &appearances {
            base.extend(o.embed_seeded(a, &view, 0.0, 0));
            shifted.extend(o.embed_seeded(a, &view, 1.0, 0));
        }
        pearson(&base, &shifted)
    };
    let values: Vec<f64> = [0.0, 0.25, 0.5, 1.0, 2.0].into_iter().map(corr).collect();
    assert!((values[0] - 1.0).abs() < 1e-12, "{values:?}");
    assert!(values.windows(2).all(|w| w[1] < w[0]), "{values:?}");
}

fn runs(indices: &[usize]) -> usize {
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    1 + sorted.windows(2).filter(|w| w[1] != w[0] + 1).count()
}

#[test]
fn interspersed_split_alternates_mapping_and_query() {
    for seed in 0..50 {
        let split = sample_split(40, &SplitConfig::default(), seed).unwrap();
        assert!(runs(&split.mapping) >= 2, "seed {seed}: {:?}", split.mapping);
        assert!(!split.query.is_empty());
    }
}

fn one_tuple() -> SceneTuple {
    let cfg = small_experiment();
    build_world(&cfg).unwrap().train.remove(0)
}

#[test]
fn capped_buffer_draws_records_uniformly_over_frames() {
    let tuple = one_tuple();
    let renders: Vec<&ViewRender> = tuple.mapping().collect();
    let total: usize = renders.iter().map(|r| r.observations.len()).sum();
    let cap = total / 2;
    let mut counts = vec![0f64; renders.len()];
    let trials = 200;
    for s in 0..trials {
        let buf = build_novel_buffer(tuple.id(), &renders, 2.0, cap, s).unwrap();
        assert_eq!(buf.len(), cap);
        for i in 0..buf.len() {
            let f = renders.iter().position(|r| r.frame.id as u32 == buf.frame_of(i).id).unwrap();
            counts[f] += 1.0;
        }
    }
    let stat: f64 = renders
        .iter()
        .zip(&counts)
        .map(|(r, &c)| {
            let expected = trials as f64 * cap as f64 * r.observations.len() as f64 / total as f64;
            (c - expected).powi(2) / expected
        })
        .sum();
    assert!(stat < chi2_critical(renders.len() - 1), "chi-square {stat}");
}

#[test]
fn pretrain_buffers_split_records_by_role() {
    let tuple = one_tuple();
    let (m, q) = build_pretrain_buffers(&tuple, usize::MAX, 1).unwrap();
    let mapping_ids: Vec<u32> = tuple.mapping().map(|r| r.frame.id as u32).collect();
    assert!(m.frame_ids.iter().all(|f| mapping_ids.contains(f)));
    assert!(q.frame_ids.iter().all(|f| !mapping_ids.contains(f)));
    let n_m: usize = tuple.mapping().map(|r| r.observations.len()).sum();
    assert_eq!(m.len(), n_m);
}

fn tiny_pretrain(n_active: usize, budget: [usize; 2], iterations: usize) -> PretrainConfig {
    let mut cfg = small_experiment().pretrain;
    cfg.n_active = n_active;
    cfg.n_spb = n_active.min(2);
    cfg.n_pps = 32;
    cfg.n_qstandby = 1;
    cfg.budget = budget;
    cfg.total_iterations = iterations;
    cfg.log_every = 10;
    cfg
}

#[test]
fn replacement_budgets_are_uniform_over_their_range() {
    let exp = small_experiment();
    let world = build_world(&exp).unwrap();
    let data = pretrain_buffers(&world.train, 500, 0).unwrap();
    let mut t = Pretrainer::new(tiny_pretrain(2, [2, 5], 900), &data).unwrap();
    t.run().unwrap();
    let mut counts = [0f64; 4];
    for &b in &t.budgets_drawn {
        counts[b - 2] += 1.0;
    }
    let n = t.budgets_drawn.len() as f64;
    assert!(n > 200.0, "only {n} budgets drawn");
    let stat: f64 = counts.iter().map(|&c| (c - n / 4.0).powi(2) / (n / 4.0)).sum();
    assert!(stat < chi2_critical(3), "chi-square {stat} for {counts:?}");
}

#[test]
fn single_scene_pretraining_lowers_mapping_nll() {
    let mut exp = small_experiment();
    exp.n_train = 1;
    let world = build_world(&exp).unwrap();
    let data = pretrain_buffers(&world.train, 2000, 0).unwrap();
    let mut cfg = tiny_pretrain(1, [10_000, 10_000], 300);
    cfg.mapping_only = true;
    let mut t = Pretrainer::new(cfg, &data).unwrap();
    t.run().unwrap();
    let nll: Vec<f64> = t
        .log
        .iter()
        .filter_map(|r| match r {
            LogRecord::Scalars { mapping_nll, .. } => Some(*mapping_nll),
            LogRecord::Event { .. } => None,
        })
        .collect();
    let first = nll[0];
    let last = *nll.last().unwrap();
    assert!(last < first - 0.5, "{nll:?}");
    assert!(t.params.is_finite());
}

#[test]
fn mapping_leaves_theta_untouched_and_predictions_match_regress() {
    let exp = small_experiment();
    let tuple = build_world(&exp).unwrap().heldout.remove(0);
    let params = RegressorParams::<f32>::init(exp.pretrain.model, 4).unwrap();
    let before = params.to_named().to_bytes();
    let renders: Vec<&ViewRender> = tuple.mapping().collect();
    let buf = build_novel_buffer(tuple.id(), &renders, tuple.mean_camera_distance(), 5000, 2).unwrap();
    let cfg: MappingRunConfig = exp.mapping;
    let run = map_novel_scene(&params, &buf, &cfg).unwrap();
    assert_eq!(params.to_named().to_bytes(), before);
    assert_eq!(run.objective.len(), cfg.iterations);

    let p64 = params.cast::<f64>();
    let code = run.code.tokens_as::<f64>();
    let view = QueryView::from_render(tuple.query().next().unwrap());
    let preds = predict_scene_coords(&p64, &code, &view).unwrap();
    for (i, p) in preds.iter().enumerate() {
        let e: Vec<f64> = view.embeddings[i * view.d_feat..(i + 1) * view.d_feat].iter().map(|&v| v as f64).collect();
        let single = regress(&p64, &e, &code).unwrap();
        assert!((single.y - p.y).norm() <= 1e-12 * (1.0 + p.y.norm()));
        assert!((single.sigma - p.sigma).abs() <= 1e-12 * p.sigma);
        assert_eq!(p.pixel, view.pixels[i]);
    }
}

#[test]
fn prefilter_keeps_more_as_factor_grows() {
    let mut rng = seeds::rng(12, &[]);
    for _ in 0..50 {
        let n = rng.gen_range(6..300);
        let sigmas: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0f64..3.0).exp()).collect();
        let mut prev: Vec<usize> = Vec::new();
        for f in [1.0, 1.5, 2.0, 4.0, 100.0] {
            let kept = prefilter(&sigmas, 0.1, f);
            assert!(kept.len() >= 6.min(n));
            assert!(prev.iter().all(|i| kept.contains(i)));
            prev = kept;
        }
    }
}

#[test]
fn median_minimizes_absolute_deviation() {
    let mut rng = seeds::rng(13, &[]);
    for _ in 0..100 {
        let n = rng.gen_range(1..40);
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let m = median(&v).unwrap();
        let cost = |c: f64| v.iter().map(|x| (x - c).abs()).sum::<f64>();
        for &x in &v {
            assert!(cost(m) <= cost(x) + 1e-9);
        }
        let below = v.iter().filter(|&&x| x < m).count();
        let above = v.iter().filter(|&&x| x > m).count();
        assert!(below <= n / 2 && above <= n / 2);
    }
    assert_eq!(median(&[]), None);
}

#[test]
fn shipped_desk_config_matches_builtin() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.json");
    let text = std::fs::read_to_string(path).unwrap();
    let cfg: ExperimentConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(cfg, ExperimentConfig::desk());
    ExperimentConfig::desk().validate().unwrap();
}

#[test]
fn tensor_shapes_of_code_follow_config() {
    let exp = ExperimentConfig::desk();
    let code = aceg_core::regressor::init_map_code(exp.mapping.n_c, exp.pretrain.model.d_map, 0).unwrap();
    let t: Tensor<f64> = code.tokens_as();
    assert_eq!(t.shape(), &[exp.mapping.n_c, exp.pretrain.model.d_map]);
}
