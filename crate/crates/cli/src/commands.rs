use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aceg_core::autodiff::NamedTensors;
use aceg_core::buffers::{build_novel_buffer, sha256_hex, Manifest, ManifestEntry, PretrainBuffer};
use aceg_core::experiment::{build_world, evaluate_heldout, mapping_report, pretrain_buffers, query_report, ExperimentConfig};
use aceg_core::maploc::{evaluate, frame_records, localize as localize_view, map_novel_scene, LocalizeResult, MetricsReport, Preset, QueryView, DEFAULT_THRESHOLDS};
use aceg_core::pretrain::{Pretrainer, TupleBuffers};
use aceg_core::regressor::{MapCode, RegressorParams};
use aceg_core::seeds;
use aceg_core::synthworld::{SceneTuple, ViewRender};
use aceg_core::gradcheck;
use anyhow::{bail, Context, Result};

use crate::config::{load, out_dir, write_resolved};
use crate::{Common, PresetArg, Views};

pub struct PretrainArgs {
    pub manifest: PathBuf,
    pub mapping_only: bool,
    pub resume: Option<PathBuf>,
    pub iterations: Option<usize>,
    pub stop_at: Option<usize>,
    pub log_every: Option<usize>,
    pub checkpoint_every: usize,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn synth(common: &Common, n_train: Option<usize>, n_heldout: Option<usize>) -> Result<ExitCode> {
    let mut cfg = load(common)?;
    if let Some(n) = n_train {
        cfg.n_train = n;
    }
    if let Some(n) = n_heldout {
        cfg.n_heldout = n;
    }
    cfg.validate()?;
    let out = out_dir(common, &cfg, "synth");
    write_resolved(&out, &cfg)?;
    for sub in ["scenes", "buffers", "heldout"] {
        std::fs::create_dir_all(out.join(sub))?;
    }
    let world = build_world(&cfg)?;
    let buffers = pretrain_buffers(&world.train, cfg.buffer_cap, cfg.seed)?;
    let mut manifest = Manifest::default();
    manifest.header.insert("seed".into(), cfg.seed.to_string());
    manifest.header.insert("d_feat".into(), cfg.world.d_feat.to_string());
    manifest.header.insert("n_tuples".into(), world.train.len().to_string());
    for (t, b) in world.train.iter().zip(&buffers) {
        let id = t.id();
        let scene = format!("scenes/{id}.scn");
        t.save(&out.join(&scene))?;
        let (m, q) = (format!("buffers/{id}.M.buf"), format!("buffers/{id}.Q.buf"));
        let (mb, qb) = (b.mapping.to_bytes(), b.query.to_bytes());
        write(&out.join(&m), &mb)?;
        write(&out.join(&q), &qb)?;
        manifest.entries.push(ManifestEntry {
            tuple_id: id.to_string(),
            scene,
            mapping: m,
            query: q,
            mapping_sha256: sha256_hex(&mb),
            query_sha256: sha256_hex(&qb),
        });
    }
    for t in &world.heldout {
        t.save(&out.join(format!("heldout/{}.scn", t.id())))?;
    }
    manifest.save(&out.join("manifest.txt"))?;
    println!(
        "wrote {} training and {} held-out tuples to {}",
        world.train.len(),
        world.heldout.len(),
        out.display()
    );
    println!("manifest digest {}", manifest.digest());
    Ok(ExitCode::SUCCESS)
}

/// Reads every buffer listed in the manifest, checking its digest.
fn load_manifest_buffers(path: &Path) -> Result<Vec<TupleBuffers>> {
    let manifest = Manifest::load(path).with_context(|| format!("loading manifest {}", path.display()))?;
    if manifest.entries.is_empty() {
        bail!("manifest {} lists no tuples", path.display());
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let read = |rel: &str, digest: &str| -> Result<PretrainBuffer> {
        let p = base.join(rel);
        let bytes = std::fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
        if sha256_hex(&bytes) != digest {
            bail!("digest mismatch for {}", p.display());
        }
        Ok(PretrainBuffer::from_bytes(&bytes).with_context(|| format!("decoding {}", p.display()))?)
    };
    manifest
        .entries
        .iter()
        .map(|e| {
            Ok(TupleBuffers {
                mapping: read(&e.mapping, &e.mapping_sha256)?,
                query: read(&e.query, &e.query_sha256)?,
            })
        })
        .collect()
}

pub fn pretrain(common: &Common, args: &PretrainArgs) -> Result<ExitCode> {
    let mut cfg = load(common)?;
    if args.mapping_only {
        cfg.pretrain.mapping_only = true;
    }
    if let Some(n) = args.iterations {
        cfg.pretrain.total_iterations = n;
    }
    if let Some(n) = args.log_every {
        cfg.pretrain.log_every = n;
    }
    let out = out_dir(common, &cfg, "pretrain");
    let data = load_manifest_buffers(&args.manifest)?;
    let mut trainer = match &args.resume {
        Some(dir) => {
            let mut t = Pretrainer::resume(dir, &data, common.workers)
                .with_context(|| format!("resuming from {}", dir.display()))?;
            if let Some(n) = args.iterations {
                t.cfg.total_iterations = n;
            }
            if let Some(n) = args.log_every {
                t.cfg.log_every = n;
            }
            t
        }
        None => Pretrainer::new(cfg.pretrain, &data)?,
    };
    cfg.pretrain = trainer.cfg;
    write_resolved(&out, &cfg)?;
    let ckpt = out.join("checkpoint");
    let stop = args.stop_at.unwrap_or(usize::MAX);
    let mut printed = 0;
    while !trainer.finished() && trainer.iteration < stop {
        let next = if args.checkpoint_every > 0 {
            (trainer.iteration / args.checkpoint_every + 1) * args.checkpoint_every
        } else {
            stop
        };
        trainer.run_until(next.min(stop))?;
        for l in &trainer.log[printed..] {
            println!("{}", l.to_line());
        }
        printed = trainer.log.len();
        if args.checkpoint_every > 0 {
            trainer.save_checkpoint(&ckpt)?;
        }
    }
    trainer.save_checkpoint(&ckpt)?;
    trainer.params.to_named().save(&out.join("theta.prm"))?;
    let log: String = trainer.log.iter().map(|l| l.to_line() + "\n").collect();
    write(&out.join("log.txt"), log)?;
    println!(
        "{} mapping iterations ({} head steps, {} query steps), θ written to {}",
        trainer.iteration,
        trainer.head_steps,
        trainer.query_steps,
        out.join("theta.prm").display()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_theta(path: &Path, cfg: &ExperimentConfig) -> Result<RegressorParams<f32>> {
    let nt = NamedTensors::load(path).with_context(|| format!("loading θ from {}", path.display()))?;
    let model = RegressorParams::<f32>::infer_config(&nt, cfg.pretrain.model.n_heads)?;
    Ok(RegressorParams::from_named(model, &nt)?)
}

fn load_scene(path: &Path) -> Result<SceneTuple> {
    SceneTuple::load(path).with_context(|| format!("loading scene tuple {}", path.display()))
}

fn apply_preset(cfg: &mut ExperimentConfig, preset: Option<PresetArg>) {
    if let Some(p) = preset {
        let seed = cfg.mapping.seed;
        cfg.mapping = match p {
            PresetArg::Fast => Preset::Fast,
            PresetArg::Thorough => Preset::Thorough,
        }
        .config();
        cfg.mapping.seed = seed;
    }
}

pub fn map(common: &Common, theta: &Path, scene: &Path, preset: Option<PresetArg>) -> Result<ExitCode> {
    let mut cfg = load(common)?;
    apply_preset(&mut cfg, preset);
    cfg.mapping.validate()?;
    let out = out_dir(common, &cfg, "map");
    write_resolved(&out, &cfg)?;
    let params = load_theta(theta, &cfg)?;
    let tuple = load_scene(scene)?;
    let renders: Vec<&ViewRender> = tuple.mapping().collect();
    let buf = build_novel_buffer(
        tuple.id(),
        &renders,
        tuple.mean_camera_distance(),
        cfg.mapping.buffer_cap,
        seeds::derive(cfg.mapping.seed, &[4]),
    )?;
    buf.save(&out.join(format!("{}.buf", tuple.id())))?;
    let run = map_novel_scene(&params, &buf, &cfg.mapping)?;
    let code_path = out.join(format!("{}.map", tuple.id()));
    run.code.save(&code_path)?;
    let objective: String = run.objective.iter().map(|v| format!("{v:.9}\n")).collect();
    write(&out.join("objective.txt"), objective)?;
    println!(
        "mapped {} from {} records in {} iterations, final objective {:.4}, code written to {}",
        tuple.id(),
        buf.len(),
        run.objective.len(),
        run.objective.last().copied().unwrap_or(f64::NAN),
        code_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn write_report(out: &Path, stem: &str, results: &[LocalizeResult], report: &MetricsReport) -> Result<()> {
    write(&out.join(format!("{stem}.tsv")), frame_records(results))?;
    write(&out.join(format!("{stem}.txt")), report.to_table())?;
    write(&out.join(format!("{stem}.json")), serde_json::to_string_pretty(report)? + "\n")?;
    Ok(())
}

pub fn localize(common: &Common, theta: &Path, code: &Path, scene: &Path, views: Views, no_prefilter: bool) -> Result<ExitCode> {
    let mut cfg = load(common)?;
    if no_prefilter {
        cfg.localize.prefilter = false;
    }
    let out = out_dir(common, &cfg, "localize");
    write_resolved(&out, &cfg)?;
    let params = load_theta(theta, &cfg)?.cast::<f64>();
    let code = MapCode::load(code).with_context(|| format!("loading map code {}", code.display()))?;
    if code.dim() != params.config.d_map {
        bail!("map code has D_map {} but θ expects {}", code.dim(), params.config.d_map);
    }
    let tuple = load_scene(scene)?;
    let selected: Vec<&ViewRender> = match views {
        Views::Query => tuple.query().collect(),
        Views::Mapping => tuple.mapping().collect(),
        Views::All => tuple.instance.renders.iter().collect(),
    };
    let tokens = code.tokens_as::<f64>();
    let results = selected
        .into_iter()
        .map(|r| localize_view(&params, &tokens, &QueryView::from_render(r), &cfg.localize))
        .collect::<Result<Vec<_>, _>>()?;
    let report = evaluate(&results, &DEFAULT_THRESHOLDS);
    write_report(&out, "frames", &results, &report)?;
    print!("{}", report.to_table());
    Ok(ExitCode::SUCCESS)
}

pub fn eval(common: &Common, theta: &Path, scenes: &Path, preset: Option<PresetArg>, no_prefilter: bool) -> Result<ExitCode> {
    let mut cfg = load(common)?;
    apply_preset(&mut cfg, preset);
    if no_prefilter {
        cfg.localize.prefilter = false;
    }
    let out = out_dir(common, &cfg, "eval");
    write_resolved(&out, &cfg)?;
    let params = load_theta(theta, &cfg)?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(scenes)
        .with_context(|| format!("listing {}", scenes.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "scn"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .scn files in {}", scenes.display());
    }
    let tuples = files.iter().map(|p| load_scene(p)).collect::<Result<Vec<_>>>()?;
    let evals = evaluate_heldout(&params, &tuples, &cfg.mapping, &cfg.localize)?;
    let query: Vec<LocalizeResult> = evals.iter().flat_map(|e| e.query.iter().cloned()).collect();
    let mapping: Vec<LocalizeResult> = evals.iter().flat_map(|e| e.mapping.iter().cloned()).collect();
    for e in &evals {
        write(&out.join(format!("{}.query.tsv", e.tuple_id)), frame_records(&e.query))?;
        write(&out.join(format!("{}.mapping.tsv", e.tuple_id)), frame_records(&e.mapping))?;
    }
    let (qr, mr) = (query_report(&evals), mapping_report(&evals));
    write_report(&out, "query", &query, &qr)?;
    write_report(&out, "mapping", &mapping, &mr)?;
    println!("-- query frames\n{}", qr.to_table());
    println!("-- mapping frames\n{}", mr.to_table());
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(configs: usize, seed: u64) -> Result<ExitCode> {
    let report = gradcheck::run(configs, seed)?;
    for c in &report.checks {
        let status = if c.max_rel_err < report.tolerance { "ok" } else { "FAIL" };
        println!("{:<44} configs={:<3} max_rel_err={:.3e} {status}", c.op, c.configs, c.max_rel_err);
    }
    if report.passed() {
        println!("gradcheck passed, worst {:.3e} < {:e}", report.worst(), report.tolerance);
        Ok(ExitCode::SUCCESS)
    } else {
        println!("gradcheck FAILED, worst {:.3e} ≥ {:e}", report.worst(), report.tolerance);
        Ok(ExitCode::FAILURE)
    }
}
