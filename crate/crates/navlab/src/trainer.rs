//! Optimization loop: demonstration pools with cached renders, trajectory
//! batching, RMSprop updates with global-norm clipping, checkpoints, and
//! training telemetry.
//!
//! Reproducibility contract: every source of randomness is re-derived per
//! update from (config seed, stream, update counter), so a run resumed from
//! a checkpoint at update k produces exactly the updates a straight-through
//! run would have produced.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;
use std::time::Instant;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{render_panorama, EnvError, OccupancyGrid, Panorama, Pose, WorldSpec};
use crate::expert::{demonstrate, sample_tasks, Demonstration, ExpertError};
use crate::model::{
    assemble_images, ActMode, LossBreakdown, LossWeights, ModelConfig, ModelError, NavModel,
    TrainBatch,
};
use crate::nn::standard_normal;

const CHECKPOINT_MAGIC: &[u8; 8] = b"NAVCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Expert(#[from] ExpertError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid config value for `{key}`: {reason}")]
    Config { key: &'static str, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite gradient at update {update}")]
    NonFiniteGrad { update: usize },
    #[error("demonstration pool is empty")]
    EmptyPool,
}

/// Training hyper-parameters plus the data-generation recipe. Defaults
/// follow the reference values where the source material states one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Decay of the squared-gradient moving average.
    pub smoothing_constant: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub grad_clip: f64,
    pub steps_per_update: usize,
    pub trajectories_per_update: usize,
    pub total_updates: usize,
    pub seed: u64,
    pub checkpoint_interval: usize,
    /// Updates between held-out accuracy evaluations (0 disables).
    pub eval_interval: usize,
    /// Fraction of demonstrations held out of training batches.
    pub holdout_fraction: f64,
    /// Cap on held-out steps scored per evaluation.
    pub holdout_max_steps: usize,
    pub weights: LossWeights,
    pub model: ModelConfig,
    // Data recipe.
    pub world_seed: u64,
    pub world_count: usize,
    pub world_width: usize,
    pub world_height: usize,
    pub obstacle_density: f64,
    pub room_count: usize,
    pub task_seed: u64,
    pub tasks_per_world: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-4,
            smoothing_constant: 0.99,
            epsilon: 1e-8,
            grad_clip: 10.0,
            steps_per_update: 60,
            trajectories_per_update: 6,
            total_updates: 2000,
            seed: 0,
            checkpoint_interval: 500,
            eval_interval: 200,
            holdout_fraction: 0.1,
            holdout_max_steps: 400,
            weights: LossWeights::default(),
            model: ModelConfig::default(),
            world_seed: 1000,
            world_count: 10,
            world_width: 12,
            world_height: 12,
            obstacle_density: 0.1,
            room_count: 2,
            task_seed: 2000,
            tasks_per_world: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainerError> {
        let bad = |key: &'static str, reason: &str| {
            Err(TrainerError::Config {
                key,
                reason: reason.to_string(),
            })
        };
        if self.learning_rate <= 0.0 {
            return bad("learning_rate", "must be positive");
        }
        if !(0.0..1.0).contains(&self.smoothing_constant) {
            return bad("smoothing_constant", "must be in [0, 1)");
        }
        if self.epsilon <= 0.0 {
            return bad("epsilon", "must be positive");
        }
        if self.steps_per_update == 0 {
            return bad("steps_per_update", "must be positive");
        }
        if self.trajectories_per_update == 0 {
            return bad("trajectories_per_update", "must be positive");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout_fraction", "must be in [0, 1)");
        }
        if self.world_count == 0 {
            return bad("world_count", "must be positive");
        }
        if self.tasks_per_world == 0 {
            return bad("tasks_per_world", "must be positive");
        }
        self.world_spec().validate()?;
        Ok(())
    }

    pub fn world_spec(&self) -> WorldSpec {
        WorldSpec {
            width: self.world_width,
            height: self.world_height,
            obstacle_density: self.obstacle_density,
            room_count: self.room_count,
        }
    }

    pub fn from_toml(text: &str) -> Result<TrainConfig, TrainerError> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| TrainerError::Config {
            key: "config",
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Demonstrations plus per-world caches of every panorama the pool can
/// touch (each visited pose and each goal pose), rendered once up front.
pub struct DemoPool {
    pub worlds: Vec<OccupancyGrid>,
    train: Vec<(usize, Demonstration)>,
    holdout: Vec<(usize, Demonstration)>,
    renders: Vec<HashMap<(i64, i64, i32), Panorama>>,
}

fn render_key(grid: &OccupancyGrid, pose: &Pose) -> (i64, i64, i32) {
    let (i, j) = grid.pose_cell(pose);
    (i, j, pose.heading.rem_euclid(360))
}

impl DemoPool {
    /// Split demonstrations into train/holdout and pre-render all panoramas.
    /// `demos` pairs each demonstration with its world index.
    pub fn new(
        worlds: Vec<OccupancyGrid>,
        demos: Vec<(usize, Demonstration)>,
        holdout_fraction: f64,
    ) -> DemoPool {
        let mut needed: Vec<HashSet<(i64, i64, i32)>> = vec![HashSet::new(); worlds.len()];
        for (w, demo) in &demos {
            let grid = &worlds[*w];
            for pose in &demo.poses {
                needed[*w].insert(render_key(grid, pose));
            }
            needed[*w].insert(render_key(grid, &demo.task.goal));
        }
        let renders: Vec<HashMap<(i64, i64, i32), Panorama>> = worlds
            .iter()
            .zip(needed)
            .map(|(grid, keys)| {
                let mut keys: Vec<_> = keys.into_iter().collect();
                keys.sort_unstable();
                keys.into_par_iter()
                    .map(|(i, j, h)| {
                        let pose = Pose::at_cell(i as usize, j as usize, h);
                        ((i, j, h), render_panorama(grid, &pose))
                    })
                    .collect()
            })
            .collect();
        // Deterministic interleaved split: every k-th demonstration is held
        // out, where k = round(1 / fraction).
        let stride = if holdout_fraction > 0.0 {
            ((1.0 / holdout_fraction).round() as usize).max(1)
        } else {
            usize::MAX
        };
        let mut train = Vec::new();
        let mut holdout = Vec::new();
        for (idx, entry) in demos.into_iter().enumerate() {
            if stride != usize::MAX && idx % stride == 0 {
                holdout.push(entry);
            } else {
                train.push(entry);
            }
        }
        // Never leave the training split empty.
        if train.is_empty() {
            std::mem::swap(&mut train, &mut holdout);
        }
        DemoPool {
            worlds,
            train,
            holdout,
            renders,
        }
    }

    pub fn n_train(&self) -> usize {
        self.train.len()
    }

    pub fn n_holdout(&self) -> usize {
        self.holdout.len()
    }

    pub fn train_demos(&self) -> impl Iterator<Item = &(usize, Demonstration)> {
        self.train.iter()
    }

    pub fn holdout_demos(&self) -> impl Iterator<Item = &(usize, Demonstration)> {
        self.holdout.iter()
    }

    pub fn panorama(&self, world: usize, pose: &Pose) -> &Panorama {
        &self.renders[world][&render_key(&self.worlds[world], pose)]
    }
}

/// Generate worlds, sample stop-balanced tasks, and demonstrate them.
pub fn build_pool(cfg: &TrainConfig) -> Result<DemoPool, TrainerError> {
    cfg.validate()?;
    let spec = cfg.world_spec();
    let mut worlds = Vec::with_capacity(cfg.world_count);
    for i in 0..cfg.world_count {
        worlds.push(crate::env::generate_world(
            cfg.world_seed + i as u64,
            &spec,
        )?);
    }
    let n_tasks = cfg.tasks_per_world * cfg.world_count;
    let tasks = sample_tasks(&worlds, n_tasks, cfg.task_seed)?;
    let index_of: HashMap<u64, usize> = worlds
        .iter()
        .enumerate()
        .map(|(i, w)| (w.world_seed, i))
        .collect();
    let mut demos = Vec::with_capacity(tasks.len());
    for task in &tasks {
        let w = index_of[&task.world_seed];
        demos.push((w, demonstrate(&worlds[w], task)?));
    }
    Ok(DemoPool::new(worlds, demos, cfg.holdout_fraction))
}

/// Draw trajectories uniformly (with replacement) and concatenate their
/// steps until the batch holds exactly `steps` supervision tuples; the last
/// trajectory is truncated as needed.
pub fn make_batch(
    pool: &DemoPool,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainBatch, TrainerError> {
    if pool.train.is_empty() {
        return Err(TrainerError::EmptyPool);
    }
    let mut panoramas = Vec::with_capacity(steps);
    let mut next_fronts = Vec::with_capacity(steps);
    let mut targets = Vec::with_capacity(steps);
    let mut actions = Vec::with_capacity(steps);
    let mut prev_actions = Vec::with_capacity(steps);
    let mut collision_labels = Vec::with_capacity(steps);
    let mut stop_labels = Vec::with_capacity(steps);
    while actions.len() < steps {
        let (w, demo) = &pool.train[rng.gen_range(0..pool.train.len())];
        let take = demo.len().min(steps - actions.len());
        for i in 0..take {
            let pose = demo.poses[i];
            let next_pose = *demo.poses.get(i + 1).unwrap_or(&pose);
            panoramas.push(pool.panorama(*w, &pose));
            next_fronts.push(&pool.panorama(*w, &next_pose).views[0]);
            targets.push(&pool.panorama(*w, &demo.task.goal).views[0]);
            actions.push(demo.actions[i]);
            prev_actions.push(if i == 0 {
                None
            } else {
                Some(demo.actions[i - 1])
            });
            collision_labels.push(demo.collision_labels[i]);
            stop_labels.push(demo.stop_labels[i]);
        }
    }
    let images = assemble_images(&panoramas, &next_fronts, &targets);
    Ok(TrainBatch {
        images,
        actions,
        prev_actions,
        collision_labels,
        stop_labels,
    })
}

/// RMSprop state: one squared-gradient moving average per parameter tensor,
/// keyed by tensor name.
#[derive(Debug, Clone, Default)]
pub struct RmsProp {
    pub avg: HashMap<String, Vec<f64>>,
}

/// One element of the RMSprop rule; kept free-standing so it can be checked
/// against a scalar oracle.
pub fn rmsprop_update(
    avg: &mut f64,
    g: f64,
    lr: f64,
    smoothing: f64,
    eps: f64,
) -> f64 {
    *avg = smoothing * *avg + (1.0 - smoothing) * g * g;
    lr * g / (avg.sqrt() + eps)
}

impl RmsProp {
    pub fn step(&mut self, model: &mut NavModel, lr: f64, smoothing: f64, eps: f64) {
        model.visit_params(&mut |name, v, g| {
            let avg = self
                .avg
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; v.len()]);
            for i in 0..v.len() {
                v[i] -= rmsprop_update(&mut avg[i], g[i], lr, smoothing, eps);
            }
        });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub update: usize,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    /// Seconds since the run started. Excluded from determinism comparison.
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub update: usize,
    pub holdout_accuracy: f64,
}

/// Append-only training telemetry with a monotone update counter.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub updates: Vec<UpdateRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainLog {
    /// Equality modulo wall-clock, the one non-deterministic field.
    pub fn deterministic_eq(&self, other: &TrainLog) -> bool {
        self.updates.len() == other.updates.len()
            && self.evals == other.evals
            && self
                .updates
                .iter()
                .zip(&other.updates)
                .all(|(a, b)| {
                    a.update == b.update && a.loss == b.loss && a.grad_norm == b.grad_norm
                })
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("update,recon,kl,action_ce,cpm,tcm,total,grad_norm,wall_secs\n");
        for r in &self.updates {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.update,
                r.loss.recon,
                r.loss.kl,
                r.loss.action_ce,
                r.loss.cpm,
                r.loss.tcm,
                r.loss.total,
                r.grad_norm,
                r.wall_secs
            ));
        }
        out
    }

    pub fn summary_json(&self) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            updates: usize,
            final_loss: Option<&'a LossBreakdown>,
            final_holdout_accuracy: Option<f64>,
            evals: &'a [EvalRecord],
        }
        serde_json::to_string_pretty(&Summary {
            updates: self.updates.len(),
            final_loss: self.updates.last().map(|r| &r.loss),
            final_holdout_accuracy: self.evals.last().map(|e| e.holdout_accuracy),
            evals: &self.evals,
        })
        .expect("summary serializes")
    }
}

/// Everything a resumable run carries between updates.
pub struct TrainState {
    pub model: NavModel,
    pub optimizer: RmsProp,
    pub update: usize,
    pub log: TrainLog,
}

/// Fresh state for a config: initialized model with settled spectral-norm
/// estimates (random power-iteration vectors make the initial sigma
/// arbitrary; a few warm-up iterations converge it).
pub fn init_state(cfg: &TrainConfig) -> TrainState {
    let mut model = NavModel::new(cfg.model.clone());
    for _ in 0..30 {
        model.power_iterate();
    }
    TrainState {
        model,
        optimizer: RmsProp::default(),
        update: 0,
        log: TrainLog::default(),
    }
}

fn stream_rng(seed: u64, stream: u64, update: usize) -> ChaCha8Rng {
    let mixed = seed
        ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (update as u64).wrapping_mul(0xd1b5_4a32_d192_ed03);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Run updates `state.update .. cfg.total_updates`, mutating the state in
/// place. Checkpoints land in `out_dir` (if given) every
/// `checkpoint_interval` updates and at the end; `on_update` observes every
/// appended record.
pub fn train(
    cfg: &TrainConfig,
    pool: &DemoPool,
    state: &mut TrainState,
    out_dir: Option<&Path>,
    mut on_update: impl FnMut(&UpdateRecord),
) -> Result<(), TrainerError> {
    cfg.validate()?;
    let started = Instant::now();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        if state.update == 0 {
            save_checkpoint(&dir.join("checkpoint_init.bin"), cfg, state)?;
        }
    }
    while state.update < cfg.total_updates {
        let update = state.update;
        state.model.power_iterate();
        state.model.zero_grads();
        let mut batch_rng = stream_rng(cfg.seed, 1, update);
        let batch = make_batch(pool, cfg.steps_per_update, &mut batch_rng)?;
        let mut noise_rng = stream_rng(cfg.seed, 2, update);
        let noise = standard_normal(&mut noise_rng, (batch.len(), cfg.model.latent_dim));
        let loss = state.model.loss_and_grad(&batch, &noise, &cfg.weights)?;
        let grad_norm = state.model.grad_norm();
        if !grad_norm.is_finite() {
            return Err(TrainerError::NonFiniteGrad { update });
        }
        if cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip {
            state.model.scale_grads(cfg.grad_clip / grad_norm);
        }
        state.optimizer.step(
            &mut state.model,
            cfg.learning_rate,
            cfg.smoothing_constant,
            cfg.epsilon,
        );
        state.update = update + 1;
        let record = UpdateRecord {
            update: state.update,
            loss,
            grad_norm,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        on_update(&record);
        state.log.updates.push(record);
        if cfg.eval_interval > 0
            && (state.update % cfg.eval_interval == 0 || state.update == cfg.total_updates)
        {
            let acc = holdout_accuracy(&state.model, pool, cfg.holdout_max_steps);
            state.log.evals.push(EvalRecord {
                update: state.update,
                holdout_accuracy: acc,
            });
        }
        if let Some(dir) = out_dir {
            if (cfg.checkpoint_interval > 0 && state.update % cfg.checkpoint_interval == 0)
                || state.update == cfg.total_updates
            {
                save_checkpoint(
                    &dir.join(format!("checkpoint_{:06}.bin", state.update)),
                    cfg,
                    state,
                )?;
            }
        }
    }
    Ok(())
}

/// Fraction of held-out demonstration steps where the deterministic policy
/// reproduces the expert action. Falls back to the training split when
/// nothing is held out.
pub fn holdout_accuracy(model: &NavModel, pool: &DemoPool, max_steps: usize) -> f64 {
    let demos: &[(usize, Demonstration)] = if pool.holdout.is_empty() {
        &pool.train
    } else {
        &pool.holdout
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut scored = 0usize;
    let mut correct = 0usize;
    'outer: for (w, demo) in demos {
        let target = &pool.panorama(*w, &demo.task.goal).views[0];
        for i in 0..demo.len() {
            if scored >= max_steps {
                break 'outer;
            }
            let pano = pool.panorama(*w, &demo.poses[i]);
            let prev = if i == 0 {
                None
            } else {
                Some(demo.actions[i - 1])
            };
            let predicted =
                model.act(pano, target, prev, ActMode::Deterministic, &mut rng);
            scored += 1;
            if predicted == demo.actions[i] {
                correct += 1;
            }
        }
    }
    if scored == 0 {
        0.0
    } else {
        correct as f64 / scored as f64
    }
}

// --- checkpoint container ---

fn write_named(buf: &mut Vec<u8>, entries: &[(String, Vec<f64>)]) {
    buf.write_u64::<LittleEndian>(entries.len() as u64).unwrap();
    for (name, data) in entries {
        buf.write_u64::<LittleEndian>(name.len() as u64).unwrap();
        buf.extend_from_slice(name.as_bytes());
        buf.write_u64::<LittleEndian>(data.len() as u64).unwrap();
        for &v in data {
            buf.write_f64::<LittleEndian>(v).unwrap();
        }
    }
}

fn read_named(cur: &mut Cursor<&[u8]>) -> Result<Vec<(String, Vec<f64>)>, TrainerError> {
    let n = cur.read_u64::<LittleEndian>()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = cur.read_u64::<LittleEndian>()? as usize;
        let mut name = vec![0u8; name_len];
        cur.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| TrainerError::Checkpoint("invalid tensor name".into()))?;
        let len = cur.read_u64::<LittleEndian>()? as usize;
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(cur.read_f64::<LittleEndian>()?);
        }
        out.push((name, data));
    }
    Ok(out)
}

/// Serialize config, parameters, spectral-norm estimates, optimizer state,
/// and the update counter. Byte-stable: identical state yields identical
/// bytes (optimizer tensors are emitted in parameter-visit order).
pub fn checkpoint_bytes(cfg: &TrainConfig, state: &mut TrainState) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.write_u32::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
    let cfg_json = serde_json::to_vec(cfg).expect("config serializes");
    buf.write_u64::<LittleEndian>(cfg_json.len() as u64).unwrap();
    buf.extend_from_slice(&cfg_json);

    let mut params = Vec::new();
    state
        .model
        .visit_params(&mut |name, v, _| params.push((name.to_string(), v.to_vec())));
    write_named(&mut buf, &params);

    let mut buffers = Vec::new();
    state
        .model
        .visit_buffers(&mut |name, v| buffers.push((name.to_string(), v.to_vec())));
    write_named(&mut buf, &buffers);

    let opt: Vec<(String, Vec<f64>)> = params
        .iter()
        .filter_map(|(name, _)| {
            state
                .optimizer
                .avg
                .get(name)
                .map(|v| (name.clone(), v.clone()))
        })
        .collect();
    write_named(&mut buf, &opt);

    buf.write_u64::<LittleEndian>(state.update as u64).unwrap();
    buf
}

pub fn save_checkpoint(
    path: &Path,
    cfg: &TrainConfig,
    state: &mut TrainState,
) -> Result<(), TrainerError> {
    let bytes = checkpoint_bytes(cfg, state);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Rebuild a training state from checkpoint bytes. Version or tensor-shape
/// mismatches are rejected with the offending tensor named.
pub fn load_checkpoint_bytes(bytes: &[u8]) -> Result<(TrainConfig, TrainState), TrainerError> {
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    cur.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TrainerError::Checkpoint("bad magic".into()));
    }
    let version = cur.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainerError::Checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let cfg_len = cur.read_u64::<LittleEndian>()? as usize;
    let mut cfg_json = vec![0u8; cfg_len];
    cur.read_exact(&mut cfg_json)?;
    let cfg: TrainConfig = serde_json::from_slice(&cfg_json)
        .map_err(|e| TrainerError::Checkpoint(format!("config: {e}")))?;

    let mut model = NavModel::new(cfg.model.clone());
    let params = read_named(&mut cur)?;
    restore_tensors("parameter", &params, &mut |f| model.visit_params(&mut |n, v, _| f(n, v)))?;
    let buffers = read_named(&mut cur)?;
    restore_tensors("buffer", &buffers, &mut |f| model.visit_buffers(f))?;

    let opt_entries = read_named(&mut cur)?;
    let mut optimizer = RmsProp::default();
    for (name, data) in opt_entries {
        optimizer.avg.insert(name, data);
    }
    let update = cur.read_u64::<LittleEndian>()? as usize;
    Ok((
        cfg,
        TrainState {
            model,
            optimizer,
            update,
            log: TrainLog::default(),
        },
    ))
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainConfig, TrainState), TrainerError> {
    let bytes = fs::read(path)?;
    load_checkpoint_bytes(&bytes)
}

/// Copy named tensors into the model via a visitor, diffing names and
/// shapes against what the model expects.
fn restore_tensors(
    kind: &str,
    entries: &[(String, Vec<f64>)],
    visit: &mut dyn FnMut(&mut dyn FnMut(&str, &mut [f64])),
) -> Result<(), TrainerError> {
    let by_name: HashMap<&str, &Vec<f64>> =
        entries.iter().map(|(n, d)| (n.as_str(), d)).collect();
    let mut problems = Vec::new();
    let mut seen = HashSet::new();
    visit(&mut |name, v| {
        seen.insert(name.to_string());
        match by_name.get(name) {
            Some(data) if data.len() == v.len() => v.copy_from_slice(data),
            Some(data) => problems.push(format!(
                "{kind} `{name}`: expected {} values, checkpoint has {}",
                v.len(),
                data.len()
            )),
            None => problems.push(format!("{kind} `{name}`: missing from checkpoint")),
        }
    });
    for (name, _) in entries {
        if !seen.contains(name) {
            problems.push(format!("{kind} `{name}`: not present in this model"));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(TrainerError::Checkpoint(problems.join("; ")))
    }
}
