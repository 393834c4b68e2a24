//! Alternating mapping/query pre-training over a rotating pool of active
//! scenes.

use std::path::Path;

use nalgebra::Matrix3;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adamw_step, AdamWConfig, Graph, NamedTensors, NodeId, OptimState, Tensor};
use crate::buffers::{sample_batch, BatchSpec, PretrainBuffer, SceneBatch};
use crate::regressor::{forward, init_map_code, RegressorConfig, RegressorNodes, RegressorParams};
use crate::seeds::{self, stream};
use crate::synthworld::random_rotation;
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub model: RegressorConfig,
    /// Tokens per map code.
    pub n_c: usize,
    pub n_active: usize,
    pub n_spb: usize,
    pub n_pps: usize,
    pub n_qstandby: usize,
    pub budget: [usize; 2],
    pub head_period: usize,
    pub trim: f64,
    /// Mapping iterations to run; each one steps the codes in its batch.
    pub total_iterations: usize,
    pub lr_net: f64,
    pub lr_code: f64,
    pub adamw: AdamWConfig,
    pub mapping_only: bool,
    pub random_rotation: bool,
    pub seed: u64,
    pub log_every: usize,
    pub max_nonfinite_streak: usize,
    pub workers: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            model: RegressorConfig::default(),
            n_c: 64,
            n_active: 16,
            n_spb: 8,
            n_pps: 128,
            n_qstandby: 150,
            budget: [300, 500],
            head_period: 10,
            trim: 0.3,
            total_iterations: 50_000,
            lr_net: 1e-3,
            lr_code: 1e-2,
            adamw: AdamWConfig::default(),
            mapping_only: false,
            random_rotation: true,
            seed: 0,
            log_every: 100,
            max_nonfinite_streak: 10,
            workers: 1,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.n_c == 0 || self.n_active == 0 || self.n_spb == 0 || self.n_pps == 0 {
            return bad("pool and batch sizes must be at least 1".into());
        }
        if self.n_spb > self.n_active {
            return bad(format!("N_spb {} exceeds N_active {}", self.n_spb, self.n_active));
        }
        if self.budget[0] == 0 || self.budget[0] > self.budget[1] {
            return bad(format!("budget range {:?} must be positive and ordered", self.budget));
        }
        if !(self.trim > 0.0 && self.trim <= 1.0) {
            return bad(format!("trim fraction {} outside (0, 1]", self.trim));
        }
        if self.head_period == 0 {
            return bad("head period must be at least 1".into());
        }
        if !(self.lr_net > 0.0 && self.lr_code > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.log_every == 0 {
            return bad("log cadence must be at least 1".into());
        }
        Ok(())
    }
}

/// Mapping (`M`) and query (`Q`) buffers of one scene tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct TupleBuffers {
    pub mapping: PretrainBuffer,
    pub query: PretrainBuffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActiveScene {
    pub tuple: usize,
    pub code: Tensor<f32>,
    pub code_opt: OptimState<f32>,
    /// Mapping iterations this code has received.
    pub counter: usize,
    pub budget: usize,
    /// Augmentation applied to every target drawn for this slot.
    pub rotation: Matrix3<f64>,
}

impl ActiveScene {
    pub fn eligible_for_query(&self, n_qstandby: usize) -> bool {
        self.counter >= n_qstandby
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    Mapping,
    Query,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// Mean loss over every record in the batch.
    pub nll: f64,
    /// Mean over the kept (trimmed) records; the optimized objective.
    pub objective: f64,
    pub scenes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LogRecord {
    Scalars {
        iteration: usize,
        mapping_nll: f64,
        query_nll: Option<f64>,
        eligible: usize,
        lr_net: f64,
        lr_code: f64,
    },
    Event {
        iteration: usize,
        message: String,
    },
}

impl LogRecord {
    pub fn to_line(&self) -> String {
        match self {
            LogRecord::Scalars {
                iteration,
                mapping_nll,
                query_nll,
                eligible,
                lr_net,
                lr_code,
            } => {
                let q = query_nll.map_or("nan".to_string(), |v| format!("{v:.6}"));
                format!(
                    "iter={iteration} mapping_nll={mapping_nll:.6} query_nll={q} eligible={eligible} lr_net={lr_net:e} lr_code={lr_code:e}"
                )
            }
            LogRecord::Event { iteration, message } => format!("iter={iteration} event={message}"),
        }
    }
}

/// Indices of the `round(frac·n)` smallest values (at least one), ordered
/// by value with ties broken by index.
pub fn trim_lowest(values: &[f64], frac: f64) -> Vec<usize> {
    if values.is_empty() {
        return Vec::new();
    }
    let keep = ((frac * values.len() as f64).round() as usize).clamp(1, values.len());
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    idx.truncate(keep);
    idx
}

struct SceneGraph {
    g: Graph<f32>,
    theta: RegressorNodes,
    code: NodeId,
    losses: NodeId,
}

fn scene_forward(
    params: &RegressorParams<f32>,
    train_theta: bool,
    code: &Tensor<f32>,
    train_code: bool,
    buf: &PretrainBuffer,
    rows: &[usize],
    rotation: &Matrix3<f64>,
) -> Result<SceneGraph, Error> {
    let d = buf.d_feat;
    let mut e = Vec::with_capacity(rows.len() * d);
    let mut y = Vec::with_capacity(rows.len() * 3);
    for &r in rows {
        e.extend_from_slice(buf.embedding(r));
        let t = rotation * buf.targets[r];
        y.extend(t.iter().map(|&v| v as f32));
    }
    let mut g = Graph::new();
    let theta = params.bind(&mut g, train_theta);
    let code = if train_code { g.param(code.clone()) } else { g.leaf(code.clone()) };
    let x = g.leaf(Tensor::matrix(rows.len(), d, e)?);
    let out = forward(&mut g, &theta, x, code)?;
    let losses = g.laplace_nll(out, &Tensor::matrix(rows.len(), 3, y)?)?;
    Ok(SceneGraph { g, theta, code, losses })
}

struct SceneGrads {
    theta: Option<Vec<Tensor<f32>>>,
    code: Option<Tensor<f32>>,
}

fn scene_backward(sg: &mut SceneGraph, kept: Vec<usize>, total_kept: usize) -> Result<SceneGrads, Error> {
    if kept.is_empty() {
        let zeros = |id: NodeId| Tensor::zeros(sg.g.value(id).shape());
        return Ok(SceneGrads {
            theta: sg
                .g
                .requires_grad(sg.theta.ids[0])
                .then(|| sg.theta.ids.iter().map(|&id| zeros(id)).collect()),
            code: sg.g.requires_grad(sg.code).then(|| zeros(sg.code)),
        });
    }
    let loss = sg.g.select_sum(sg.losses, kept, 1.0 / total_kept as f32)?;
    let mut grads = sg.g.backward(loss)?;
    let theta = if sg.g.requires_grad(sg.theta.ids[0]) {
        Some(sg.theta.ids.iter().map(|&id| grads.take(id).expect("bound parameter")).collect())
    } else {
        None
    };
    let code = if sg.g.requires_grad(sg.code) { grads.take(sg.code) } else { None };
    Ok(SceneGrads { theta, code })
}

/// Runs `f` over `items`, in parallel on `pool` when one is given; output
/// order always follows input order.
fn fan_out<I: Sync, O: Send>(
    pool: Option<&rayon::ThreadPool>,
    items: &mut [I],
    f: impl Fn(&mut I) -> O + Sync + Send,
) -> Vec<O>
where
    I: Send,
{
    use rayon::prelude::*;
    match pool {
        Some(p) => p.install(|| items.par_iter_mut().map(&f).collect()),
        None => items.iter_mut().map(f).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SlotState {
    tuple: usize,
    counter: usize,
    budget: usize,
    rotation: [f64; 9],
    opt_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainerState {
    config: PretrainConfig,
    iteration: usize,
    head_steps: usize,
    query_steps: usize,
    replaced: usize,
    opt_step: u64,
    nonfinite_streak: usize,
    slots: Vec<SlotState>,
    budgets_drawn: Vec<usize>,
}

pub struct Pretrainer<'a> {
    pub cfg: PretrainConfig,
    data: &'a [TupleBuffers],
    pub params: RegressorParams<f32>,
    pub opt: OptimState<f32>,
    pub pool: Vec<ActiveScene>,
    /// Completed mapping iterations.
    pub iteration: usize,
    pub head_steps: usize,
    pub query_steps: usize,
    /// Slots refilled so far.
    pub replaced: usize,
    /// Every budget drawn for a slot, in order.
    pub budgets_drawn: Vec<usize>,
    pub log: Vec<LogRecord>,
    nonfinite_streak: usize,
    window_map: (f64, usize),
    window_query: (f64, usize),
    threads: Option<rayon::ThreadPool>,
}

impl<'a> Pretrainer<'a> {
    pub fn new(cfg: PretrainConfig, data: &'a [TupleBuffers]) -> Result<Self, Error> {
        cfg.validate()?;
        if data.len() < cfg.n_active {
            return Err(Error::Config(format!(
                "dataset has {} tuples, pool needs {}",
                data.len(),
                cfg.n_active
            )));
        }
        for t in data {
            if t.mapping.d_feat != cfg.model.d_feat || t.query.d_feat != cfg.model.d_feat {
                return Err(Error::Config(format!("buffers of {} do not match D_feat", t.mapping.scene_id)));
            }
        }
        let params = RegressorParams::init(cfg.model, seeds::derive(cfg.seed, &[stream::PARAMS]))?;
        let opt = OptimState::new(cfg.adamw, &params.tensors);
        let mut t = Self {
            cfg,
            data,
            params,
            opt,
            pool: Vec::with_capacity(cfg.n_active),
            iteration: 0,
            head_steps: 0,
            query_steps: 0,
            replaced: 0,
            budgets_drawn: Vec::new(),
            log: Vec::new(),
            nonfinite_streak: 0,
            window_map: (0.0, 0),
            window_query: (0.0, 0),
            threads: build_threads(cfg.workers)?,
        };
        let mut rng = seeds::rng(cfg.seed, &[stream::POOL, u64::MAX]);
        let initial = index::sample(&mut rng, data.len(), cfg.n_active).into_vec();
        for (slot, tuple) in initial.into_iter().enumerate() {
            let s = t.fresh_slot(tuple, slot)?;
            t.pool.push(s);
        }
        Ok(t)
    }

    fn fresh_slot(&mut self, tuple: usize, slot: usize) -> Result<ActiveScene, Error> {
        let path = [stream::POOL, self.iteration as u64, slot as u64];
        let mut rng = seeds::rng(self.cfg.seed, &path);
        let budget = rng.gen_range(self.cfg.budget[0]..=self.cfg.budget[1]);
        let rotation = if self.cfg.random_rotation {
            random_rotation(&mut rng)
        } else {
            Matrix3::identity()
        };
        let code = init_map_code(self.cfg.n_c, self.cfg.model.d_map, seeds::derive(self.cfg.seed, &path))?.tokens;
        self.budgets_drawn.push(budget);
        Ok(ActiveScene {
            tuple,
            code_opt: OptimState::for_single(self.cfg.adamw, &code),
            code,
            counter: 0,
            budget,
            rotation,
        })
    }

    fn event(&mut self, message: String) {
        self.log.push(LogRecord::Event {
            iteration: self.iteration,
            message,
        });
    }

    pub fn eligible_count(&self) -> usize {
        self.pool.iter().filter(|s| s.eligible_for_query(self.cfg.n_qstandby)).count()
    }

    /// Forward, batch-wide trim and backward for a grouped batch. Returns the
    /// outcome, θ gradient sum (when θ is trained) and per-scene code
    /// gradients (when codes are trained).
    fn batch_gradients(
        &self,
        batch: &[SceneBatch],
        role_query: bool,
        train_theta: bool,
    ) -> Result<(StepOutcome, Option<Vec<Tensor<f32>>>, Vec<Option<Tensor<f32>>>), (usize, Error)> {
        let train_code = !role_query;
        let mut jobs: Vec<&SceneBatch> = batch.iter().collect();
        let fwd = fan_out(self.threads.as_ref(), &mut jobs, |sb| {
            let s = &self.pool[sb.slot];
            let t = &self.data[s.tuple];
            let buf = if role_query { &t.query } else { &t.mapping };
            scene_forward(&self.params, train_theta, &s.code, train_code, buf, &sb.rows, &s.rotation)
        });
        let mut graphs = Vec::with_capacity(fwd.len());
        for (k, r) in fwd.into_iter().enumerate() {
            graphs.push(r.map_err(|e| (batch[k].slot, e))?);
        }
        let mut all = Vec::new();
        let mut owner = Vec::new();
        for (k, sg) in graphs.iter().enumerate() {
            for (row, &l) in sg.g.value(sg.losses).data().iter().enumerate() {
                all.push(l as f64);
                owner.push((k, row));
            }
        }
        let kept = trim_lowest(&all, self.cfg.trim);
        let objective = kept.iter().map(|&i| all[i]).sum::<f64>() / kept.len() as f64;
        let nll = all.iter().sum::<f64>() / all.len() as f64;
        let mut per_scene: Vec<Vec<usize>> = vec![Vec::new(); graphs.len()];
        for &i in &kept {
            per_scene[owner[i].0].push(owner[i].1);
        }
        let total = kept.len();
        let mut work: Vec<(SceneGraph, Vec<usize>)> = graphs.into_iter().zip(per_scene).collect();
        let back = fan_out(self.threads.as_ref(), &mut work, |(sg, keep)| {
            scene_backward(sg, std::mem::take(keep), total)
        });
        let mut theta_sum: Option<Vec<Tensor<f32>>> = None;
        let mut codes = Vec::with_capacity(back.len());
        for (k, r) in back.into_iter().enumerate() {
            let sgr = r.map_err(|e| (batch[k].slot, e))?;
            if let Some(tg) = sgr.theta {
                match theta_sum.as_mut() {
                    None => theta_sum = Some(tg),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&tg) {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += *y;
                            }
                        }
                    }
                }
            }
            codes.push(sgr.code);
        }
        if train_theta && theta_sum.is_none() {
            theta_sum = Some(self.params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect());
        }
        Ok((
            StepOutcome {
                nll,
                objective,
                scenes: batch.len(),
            },
            theta_sum,
            codes,
        ))
    }

    fn nonfinite(&mut self, slot: usize, err: Error) -> Result<Option<StepOutcome>, Error> {
        self.nonfinite_streak += 1;
        let tuple = self.pool[slot].tuple;
        self.event(format!("skipped step, scene {} failed: {err}", self.data[tuple].mapping.scene_id));
        if self.nonfinite_streak > self.cfg.max_nonfinite_streak {
            return Err(Error::Config(format!(
                "aborting after {} consecutive failed steps: {err}",
                self.nonfinite_streak
            )));
        }
        Ok(None)
    }

    /// One mapping iteration: codes in the batch always step, θ only when
    /// `update_head` is set. Returns `None` when the step was skipped.
    pub fn mapping_iteration(&mut self, update_head: bool) -> Result<Option<StepOutcome>, Error> {
        let spec = BatchSpec {
            scenes_per_batch: self.cfg.n_spb,
            patches_per_scene: self.cfg.n_pps,
        };
        let eligible: Vec<(usize, usize)> = self
            .pool
            .iter()
            .enumerate()
            .map(|(i, s)| (i, self.data[s.tuple].mapping.len()))
            .collect();
        let mut rng = seeds::rng(self.cfg.seed, &[stream::BATCH, self.iteration as u64, 0]);
        let batch = sample_batch(&eligible, spec, &mut rng)?;
        let result = self.batch_gradients(&batch, false, update_head);
        self.iteration += 1;
        let (out, theta_grads, code_grads) = match result {
            Ok(v) => v,
            Err((slot, e)) => return self.nonfinite(slot, e),
        };
        self.nonfinite_streak = 0;
        for (sb, g) in batch.iter().zip(code_grads) {
            let s = &mut self.pool[sb.slot];
            let g = g.expect("code gradient in mapping iteration");
            adamw_step(std::slice::from_mut(&mut s.code), std::slice::from_ref(&g), &mut s.code_opt, self.cfg.lr_code)?;
            s.counter += 1;
        }
        if let Some(tg) = theta_grads {
            adamw_step(&mut self.params.tensors, &tg, &mut self.opt, self.cfg.lr_net)?;
            self.head_steps += 1;
        }
        self.window_map.0 += out.nll;
        self.window_map.1 += 1;
        Ok(Some(out))
    }

    /// One query iteration over scenes whose codes have had at least
    /// `n_qstandby` mapping iterations; codes stay frozen.
    pub fn query_iteration(&mut self) -> Result<Option<StepOutcome>, Error> {
        let eligible: Vec<(usize, usize)> = self
            .pool
            .iter()
            .enumerate()
            .filter(|(_, s)| s.eligible_for_query(self.cfg.n_qstandby))
            .map(|(i, s)| (i, self.data[s.tuple].query.len()))
            .collect();
        if eligible.is_empty() {
            self.event("query iteration skipped, no eligible scenes".into());
            return Ok(None);
        }
        let n_spb = self.cfg.n_spb.min(eligible.len());
        if n_spb < self.cfg.n_spb {
            self.event(format!("query batch shrunk to {n_spb} scenes"));
        }
        let spec = BatchSpec {
            scenes_per_batch: n_spb,
            patches_per_scene: self.cfg.n_pps,
        };
        let mut rng = seeds::rng(self.cfg.seed, &[stream::BATCH, self.iteration as u64, 1]);
        let batch = sample_batch(&eligible, spec, &mut rng)?;
        let (out, theta_grads, _) = match self.batch_gradients(&batch, true, true) {
            Ok(v) => v,
            Err((slot, e)) => return self.nonfinite(slot, e),
        };
        self.nonfinite_streak = 0;
        let tg = theta_grads.expect("θ gradient in query iteration");
        adamw_step(&mut self.params.tensors, &tg, &mut self.opt, self.cfg.lr_net)?;
        self.query_steps += 1;
        self.window_query.0 += out.nll;
        self.window_query.1 += 1;
        Ok(Some(out))
    }

    /// Replaces every slot whose counter reached its budget with a freshly
    /// drawn tuple that is not currently active. Returns the replaced slots.
    pub fn rotate_pool(&mut self) -> Result<Vec<usize>, Error> {
        let exhausted: Vec<usize> = (0..self.pool.len()).filter(|&i| self.pool[i].counter >= self.pool[i].budget).collect();
        for &slot in &exhausted {
            let mut rng = seeds::rng(self.cfg.seed, &[stream::POOL, self.iteration as u64, slot as u64, 1]);
            let active: Vec<usize> = self.pool.iter().map(|s| s.tuple).collect();
            let free: Vec<usize> = (0..self.data.len()).filter(|t| !active.contains(t)).collect();
            let tuple = if free.is_empty() {
                self.pool[slot].tuple
            } else {
                free[rng.gen_range(0..free.len())]
            };
            self.pool[slot] = self.fresh_slot(tuple, slot)?;
            self.replaced += 1;
        }
        Ok(exhausted)
    }

    /// One schedule cycle: `head_period − 1` code-only mapping iterations,
    /// one mapping iteration that also steps θ, then one query iteration.
    /// Stops early when the iteration total is reached.
    pub fn cycle(&mut self) -> Result<(), Error> {
        for k in 0..self.cfg.head_period {
            if self.finished() {
                return Ok(());
            }
            self.mapping_iteration(k + 1 == self.cfg.head_period)?;
            if self.iteration % self.cfg.log_every == 0 {
                self.flush_scalars();
            }
        }
        if !self.cfg.mapping_only {
            self.query_iteration()?;
        }
        self.rotate_pool()?;
        Ok(())
    }

    fn flush_scalars(&mut self) {
        let (ms, mn) = std::mem::take(&mut self.window_map);
        let (qs, qn) = std::mem::take(&mut self.window_query);
        self.log.push(LogRecord::Scalars {
            iteration: self.iteration,
            mapping_nll: if mn > 0 { ms / mn as f64 } else { f64::NAN },
            query_nll: (qn > 0).then(|| qs / qn as f64),
            eligible: self.eligible_count(),
            lr_net: self.cfg.lr_net,
            lr_code: self.cfg.lr_code,
        });
    }

    pub fn finished(&self) -> bool {
        self.iteration >= self.cfg.total_iterations
    }

    /// Runs cycles until the iteration total is reached or `stop_at`
    /// mapping iterations have completed, whichever comes first.
    pub fn run_until(&mut self, stop_at: usize) -> Result<(), Error> {
        while !self.finished() && self.iteration < stop_at {
            self.cycle()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<(), Error> {
        self.run_until(usize::MAX)
    }

    fn state(&self) -> TrainerState {
        TrainerState {
            config: self.cfg,
            iteration: self.iteration,
            head_steps: self.head_steps,
            query_steps: self.query_steps,
            replaced: self.replaced,
            opt_step: self.opt.step,
            nonfinite_streak: self.nonfinite_streak,
            slots: self
                .pool
                .iter()
                .map(|s| SlotState {
                    tuple: s.tuple,
                    counter: s.counter,
                    budget: s.budget,
                    rotation: std::array::from_fn(|i| s.rotation[(i / 3, i % 3)]),
                    opt_step: s.code_opt.step,
                })
                .collect(),
            budgets_drawn: self.budgets_drawn.clone(),
        }
    }

    /// Writes `theta.prm` (network weights), `state.prm` (moments and codes)
    /// and `state.json` (counters) into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<(), Error> {
        std::fs::create_dir_all(dir)?;
        self.params.to_named().save(&dir.join("theta.prm"))?;
        let mut nt = NamedTensors::new();
        let names = self.params.names();
        for (i, n) in names.iter().enumerate() {
            nt.push(format!("theta_m/{n}"), self.opt.first[i].clone());
            nt.push(format!("theta_v/{n}"), self.opt.second[i].clone());
        }
        for (i, s) in self.pool.iter().enumerate() {
            nt.push(format!("slot{i}/code"), s.code.clone());
            nt.push(format!("slot{i}/m"), s.code_opt.first[0].clone());
            nt.push(format!("slot{i}/v"), s.code_opt.second[0].clone());
        }
        nt.save(&dir.join("state.prm"))?;
        let json = serde_json::to_string_pretty(&self.state()).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(dir.join("state.json"), json)?;
        Ok(())
    }

    /// Restores a trainer written by [`save_checkpoint`](Self::save_checkpoint).
    /// The run log restarts empty.
    pub fn resume(dir: &Path, data: &'a [TupleBuffers], workers: usize) -> Result<Self, Error> {
        let text = std::fs::read_to_string(dir.join("state.json"))?;
        let st: TrainerState = serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad state.json: {e}")))?;
        let mut cfg = st.config;
        cfg.workers = workers;
        let params = RegressorParams::from_named(cfg.model, &NamedTensors::load(&dir.join("theta.prm"))?)?;
        let state = NamedTensors::load(&dir.join("state.prm"))?;
        let get = |n: &str| {
            state
                .get(n)
                .cloned()
                .ok_or_else(|| Error::Config(format!("checkpoint lacks {n}")))
        };
        let mut opt = OptimState::new(cfg.adamw, &params.tensors);
        opt.step = st.opt_step;
        for (i, n) in params.names().iter().enumerate() {
            opt.first[i] = get(&format!("theta_m/{n}"))?;
            opt.second[i] = get(&format!("theta_v/{n}"))?;
        }
        let mut pool = Vec::with_capacity(st.slots.len());
        for (i, s) in st.slots.iter().enumerate() {
            if s.tuple >= data.len() {
                return Err(Error::Config(format!("checkpoint refers to tuple {} beyond dataset", s.tuple)));
            }
            let code = get(&format!("slot{i}/code"))?;
            let mut code_opt = OptimState::for_single(cfg.adamw, &code);
            code_opt.step = s.opt_step;
            code_opt.first[0] = get(&format!("slot{i}/m"))?;
            code_opt.second[0] = get(&format!("slot{i}/v"))?;
            pool.push(ActiveScene {
                tuple: s.tuple,
                code,
                code_opt,
                counter: s.counter,
                budget: s.budget,
                rotation: Matrix3::from_row_slice(&s.rotation),
            });
        }
        Ok(Self {
            cfg,
            data,
            params,
            opt,
            pool,
            iteration: st.iteration,
            head_steps: st.head_steps,
            query_steps: st.query_steps,
            replaced: st.replaced,
            budgets_drawn: st.budgets_drawn,
            log: Vec::new(),
            nonfinite_streak: st.nonfinite_streak,
            window_map: (0.0, 0),
            window_query: (0.0, 0),
            threads: build_threads(workers)?,
        })
    }
}

fn build_threads(workers: usize) -> Result<Option<rayon::ThreadPool>, Error> {
    if workers <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map(Some)
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::buffers::build_pretrain_buffers;
    use crate::synthworld::{gen_dataset, FeatureOracle, SplitConfig, WorldConfig};

    fn tiny_data(n: usize) -> Vec<TupleBuffers> {
        let world = WorldConfig {
            n_points: 48,
            d_feat: 8,
            latent_dim: 4,
            oracle_hidden: 8,
            shift_rank: 8,
            n_frames: 12,
            ..WorldConfig::default()
        };
        let split = SplitConfig {
            mapping_len: [2, 4],
            query_len: [2, 4],
            ..SplitConfig::default()
        };
        let o = FeatureOracle::new(&world, 1).unwrap();
        gen_dataset(&world, &o, &split, n, 2, "t")
            .unwrap()
            .iter()
            .map(|t| {
                let (mapping, query) = build_pretrain_buffers(t, 1000, 3).unwrap();
                TupleBuffers { mapping, query }
            })
            .collect()
    }

    fn tiny_cfg() -> PretrainConfig {
        PretrainConfig {
            model: RegressorConfig {
                d_feat: 8,
                d_model: 8,
                n_blocks: 1,
                n_heads: 2,
                ffn_ratio: 2,
                d_map: 8,
                head_hidden: 8,
            },
            n_c: 4,
            n_active: 3,
            n_spb: 2,
            n_pps: 8,
            n_qstandby: 3,
            budget: [6, 9],
            head_period: 3,
            total_iterations: 30,
            log_every: 5,
            ..PretrainConfig::default()
        }
    }

    #[test]
    fn trim_keeps_lowest_fraction() {
        let v: Vec<f64> = (1..=10).map(|x| x as f64).rev().collect();
        let mut kept: Vec<f64> = trim_lowest(&v, 0.3).into_iter().map(|i| v[i]).collect();
        kept.sort_by(f64::total_cmp);
        assert_eq!(kept, vec![1.0, 2.0, 3.0]);
        assert_eq!(trim_lowest(&[5.0], 0.3), vec![0]);
    }

    #[test]
    fn code_only_step_leaves_theta_unchanged() {
        let data = tiny_data(4);
        let mut t = Pretrainer::new(tiny_cfg(), &data).unwrap();
        let before = t.params.clone();
        let codes: Vec<_> = t.pool.iter().map(|s| s.code.clone()).collect();
        t.mapping_iteration(false).unwrap().unwrap();
        assert_eq!(t.params, before);
        assert_ne!(codes, t.pool.iter().map(|s| s.code.clone()).collect::<Vec<_>>());
        t.mapping_iteration(true).unwrap().unwrap();
        assert_ne!(t.params, before);
    }

    #[test]
    fn query_step_leaves_codes_unchanged_and_respects_gating() {
        let data = tiny_data(4);
        let mut t = Pretrainer::new(tiny_cfg(), &data).unwrap();
        assert!(t.query_iteration().unwrap().is_none());
        t.pool[1].counter = 3;
        let codes: Vec<_> = t.pool.iter().map(|s| s.code.clone()).collect();
        let out = t.query_iteration().unwrap().unwrap();
        assert_eq!(out.scenes, 1);
        assert_eq!(codes, t.pool.iter().map(|s| s.code.clone()).collect::<Vec<_>>());
    }

    #[test]
    fn schedule_bookkeeping() {
        let data = tiny_data(4);
        let mut cfg = tiny_cfg();
        cfg.total_iterations = 30;
        let mut t = Pretrainer::new(cfg, &data).unwrap();
        t.run().unwrap();
        assert_eq!(t.iteration, 30);
        assert_eq!(t.head_steps, 10);
        assert!(t.query_steps <= 10);
        assert_eq!(t.pool.len(), 3);
        assert!(t.replaced > 0);
        assert!(t.pool.iter().all(|s| s.counter <= s.budget));
        cfg.mapping_only = true;
        let mut m = Pretrainer::new(cfg, &data).unwrap();
        m.run().unwrap();
        assert_eq!(m.query_steps, 0);
    }

    #[test]
    fn runs_are_deterministic_and_resume_exactly() {
        let data = tiny_data(4);
        let cfg = tiny_cfg();
        let mut a = Pretrainer::new(cfg, &data).unwrap();
        a.run().unwrap();
        let mut b = Pretrainer::new(cfg, &data).unwrap();
        b.run_until(12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        b.save_checkpoint(dir.path()).unwrap();
        let mut c = Pretrainer::resume(dir.path(), &data, 1).unwrap();
        c.run().unwrap();
        assert_eq!(a.params, c.params);
        assert_eq!(a.pool, c.pool);
        assert_eq!(a.opt, c.opt);
    }
}
