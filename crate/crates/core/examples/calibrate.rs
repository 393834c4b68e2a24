//! Runs one desk experiment from a JSON config and prints timings, the
//! pre-training log and held-out accuracies.
//!
//! cargo run --release -p aceg-core --example calibrate -- config.json [mapping-only]

use std::time::Instant;

use aceg_core::autodiff::NamedTensors;
use aceg_core::buffers::build_novel_buffer;
use aceg_core::experiment::{build_world, evaluate_heldout, mapping_report, pretrain, pretrain_buffers, query_report, ExperimentConfig};
use aceg_core::maploc::{map_novel_scene, predict_scene_coords, QueryView};
use aceg_core::regressor::RegressorParams;
use aceg_core::synthworld::{SceneTuple, ViewRender};

/// Fraction of patches whose regressed coordinate lies within each radius.
fn coord_accuracy(p: &RegressorParams<f64>, code: &aceg_core::autodiff::Tensor<f64>, views: Vec<&ViewRender>) -> [f64; 3] {
    let mut hits = [0usize; 3];
    let mut n = 0usize;
    for v in views {
        let preds = predict_scene_coords(p, code, &QueryView::from_render(v)).unwrap();
        for (pr, o) in preds.iter().zip(&v.observations) {
            let err = (pr.y - o.y).norm();
            for (h, r) in hits.iter_mut().zip([0.05, 0.1, 0.3]) {
                if err < r {
                    *h += 1;
                }
            }
            n += 1;
        }
    }
    hits.map(|h| h as f64 / n.max(1) as f64)
}

fn diagnose(cfg: &ExperimentConfig, params: &RegressorParams<f32>, tuples: &[SceneTuple], label: &str) {
    let p64 = params.cast::<f64>();
    for t in tuples {
        let renders: Vec<&ViewRender> = t.mapping().collect();
        let buf = build_novel_buffer(t.id(), &renders, t.mean_camera_distance(), cfg.mapping.buffer_cap, 7).unwrap();
        let run = map_novel_scene(params, &buf, &cfg.mapping).unwrap();
        let code = run.code.tokens_as::<f64>();
        let m = coord_accuracy(&p64, &code, t.mapping().collect());
        let q = coord_accuracy(&p64, &code, t.query().collect());
        let o = &run.objective;
        println!(
            "{label} {}: obj {:.3} -> {:.3}  mapping coords <.05/.1/.3 {:.2}/{:.2}/{:.2}  query {:.2}/{:.2}/{:.2}",
            t.id(),
            o[0],
            o[o.len() - 1],
            m[0],
            m[1],
            m[2],
            q[0],
            q[1],
            q[2]
        );
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg: ExperimentConfig = match args.get(1) {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => ExperimentConfig::default(),
    };
    if args.iter().any(|a| a == "mapping-only") {
        cfg.pretrain.mapping_only = true;
    }
    cfg.validate()?;
    let t0 = Instant::now();
    let world = build_world(&cfg)?;
    let data = pretrain_buffers(&world.train, cfg.buffer_cap, cfg.seed)?;
    let obs: usize = data.iter().map(|d| d.mapping.len()).sum();
    println!("world built in {:.1}s, {} mapping records", t0.elapsed().as_secs_f64(), obs);
    let cache = args.iter().find_map(|a| a.strip_prefix("params="));
    let cached = cache.filter(|c| std::path::Path::new(c).exists());
    let params = match cached {
        Some(c) => RegressorParams::from_named(cfg.pretrain.model, &NamedTensors::load(std::path::Path::new(c))?)?,
        None => {
            let t1 = Instant::now();
            let trainer = pretrain(&cfg.pretrain, &data)?;
            for l in &trainer.log {
                println!("{}", l.to_line());
            }
            println!("pretrain {:.1}s", t1.elapsed().as_secs_f64());
            if let Some(c) = cache {
                trainer.params.to_named().save(std::path::Path::new(c))?;
            }
            trainer.params
        }
    };
    if args.iter().any(|a| a == "noeval") {
        return Ok(());
    }
    diagnose(&cfg, &params, &world.train[..2], "train");
    diagnose(&cfg, &params, &world.heldout, "held");
    if args.iter().any(|a| a == "diag") {
        return Ok(());
    }
    let t2 = Instant::now();
    let evals = evaluate_heldout(&params, &world.heldout, &cfg.mapping, &cfg.localize)?;
    println!("eval {:.1}s", t2.elapsed().as_secs_f64());
    println!("-- mapping frames\n{}", mapping_report(&evals).to_table());
    println!("-- query frames\n{}", query_report(&evals).to_table());
    let mut nf = cfg.localize;
    nf.prefilter = !nf.prefilter;
    let evals2 = evaluate_heldout(&params, &world.heldout, &cfg.mapping, &nf)?;
    println!("-- query frames, prefilter={}\n{}", nf.prefilter, query_report(&evals2).to_table());
    let mut control = cfg.clone();
    control.world.query_condition = 0.0;
    let ctrl = build_world(&control)?;
    let c1 = evaluate_heldout(&params, &ctrl.heldout, &cfg.mapping, &cfg.localize)?;
    let c2 = evaluate_heldout(&params, &ctrl.heldout, &cfg.mapping, &nf)?;
    println!("-- no-gap query frames, prefilter on\n{}", query_report(&c1).to_table());
    println!("-- no-gap query frames, prefilter off\n{}", query_report(&c2).to_table());
    Ok(())
}
