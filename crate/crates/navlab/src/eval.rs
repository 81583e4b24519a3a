//! Episode roll-outs and metrics: success rate, SPL, task difficulty,
//! collision curves, the random baseline, and the ablation harness.

use std::collections::HashMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{
    is_success, render_panorama, transition, ActionId, OccupancyGrid, Panorama, Pose,
    ALL_ACTIONS,
};
use crate::expert::{difficulty_ratio, shortest_path, ExpertError, NavTask};
use crate::model::{ActMode, NavModel, Variant};
use crate::trainer::{build_pool, init_state, train, TrainConfig, TrainerError};

/// Episode step budget.
pub const MAX_EPISODE_STEPS: usize = 100;

/// Collision-curve bucket width in steps.
pub const CURVE_BUCKET: usize = 5;

/// Outcome of one episode, including the pose trace for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    /// Actions issued, including a final `Stop`.
    pub steps_taken: usize,
    /// Executed path length p_i in motion/rotation steps (Stop excluded).
    pub executed_length: usize,
    /// Expert shortest-path length l_i in the same unit.
    pub shortest_length: usize,
    pub collisions: usize,
    pub stop_issued: bool,
    pub timeout: bool,
    /// Pose before each action plus the final pose.
    pub poses: Vec<Pose>,
    /// Whether each issued action collided.
    pub collision_flags: Vec<bool>,
}

/// A decision rule evaluated in the environment loop. Implementations are
/// cloned per episode; `reset` receives the episode seed.
pub trait Policy: Clone + Send {
    fn reset(&mut self, grid: &OccupancyGrid, task: &NavTask, seed: u64);
    fn act(
        &mut self,
        panorama: &Panorama,
        target: &Array2<f32>,
        prev: Option<ActionId>,
    ) -> ActionId;
}

/// The learned model as a policy.
#[derive(Clone)]
pub struct ModelPolicy<'a> {
    pub model: &'a NavModel,
    pub mode: ActMode,
    rng: ChaCha8Rng,
}

impl<'a> ModelPolicy<'a> {
    pub fn new(model: &'a NavModel, mode: ActMode) -> ModelPolicy<'a> {
        ModelPolicy {
            model,
            mode,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }
}

impl Policy for ModelPolicy<'_> {
    fn reset(&mut self, _grid: &OccupancyGrid, _task: &NavTask, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    fn act(
        &mut self,
        panorama: &Panorama,
        target: &Array2<f32>,
        prev: Option<ActionId>,
    ) -> ActionId {
        self.model.act(panorama, target, prev, self.mode, &mut self.rng)
    }
}

/// Uniform choice over all seven actions.
#[derive(Clone)]
pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl Default for RandomPolicy {
    fn default() -> RandomPolicy {
        RandomPolicy {
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }
}

impl Policy for RandomPolicy {
    fn reset(&mut self, _grid: &OccupancyGrid, _task: &NavTask, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    fn act(&mut self, _: &Panorama, _: &Array2<f32>, _: Option<ActionId>) -> ActionId {
        ALL_ACTIONS[self.rng.gen_range(0..ALL_ACTIONS.len())]
    }
}

/// Replays the expert plan, ignoring observations. Calibrates the harness:
/// SR = SPL = 1 on any reachable suite.
#[derive(Clone, Default)]
pub struct ExpertPolicy {
    plan: Vec<ActionId>,
    cursor: usize,
}

impl Policy for ExpertPolicy {
    fn reset(&mut self, grid: &OccupancyGrid, task: &NavTask, _seed: u64) {
        self.plan = shortest_path(grid, &task.start, &task.goal)
            .expect("evaluation tasks must be reachable");
        self.cursor = 0;
    }

    fn act(&mut self, _: &Panorama, _: &Array2<f32>, _: Option<ActionId>) -> ActionId {
        let a = self.plan.get(self.cursor).copied().unwrap_or(ActionId::Stop);
        self.cursor += 1;
        a
    }
}

/// Render → act → transition until `Stop` or the step budget. Collisions
/// leave the pose unchanged and do not end the episode; success requires
/// `Stop` issued inside the goal's success set.
pub fn run_episode<P: Policy>(
    grid: &OccupancyGrid,
    task: &NavTask,
    policy: &mut P,
    seed: u64,
) -> EpisodeResult {
    policy.reset(grid, task, seed);
    let target = render_panorama(grid, &task.goal).views[0].clone();
    let shortest_length = shortest_path(grid, &task.start, &task.goal)
        .expect("evaluation tasks must be reachable")
        .len()
        - 1;
    let mut pose = task.start;
    let mut prev = None;
    let mut poses = vec![pose];
    let mut collision_flags = Vec::new();
    let mut collisions = 0;
    let mut stop_issued = false;
    let mut success = false;
    let mut steps_taken = 0;
    while steps_taken < MAX_EPISODE_STEPS {
        let pano = render_panorama(grid, &pose);
        let action = policy.act(&pano, &target, prev);
        steps_taken += 1;
        if action == ActionId::Stop {
            stop_issued = true;
            success = is_success(&pose, &task.goal);
            collision_flags.push(false);
            break;
        }
        let out = transition(grid, &pose, action);
        collision_flags.push(out.collided);
        if out.collided {
            collisions += 1;
        }
        pose = out.next_pose;
        poses.push(pose);
        prev = Some(action);
    }
    let executed_length = if stop_issued {
        steps_taken - 1
    } else {
        steps_taken
    };
    let result = EpisodeResult {
        success,
        steps_taken,
        executed_length,
        shortest_length,
        collisions,
        stop_issued,
        timeout: !stop_issued,
        poses,
        collision_flags,
    };
    // The expert plans to the same success set, so a successful executed
    // path can never beat it.
    if result.success {
        assert!(result.executed_length >= result.shortest_length);
    }
    result
}

/// Run every task with an independently seeded clone of the policy,
/// in parallel, aggregated in task order.
pub fn run_suite<P: Policy + Sync>(
    worlds: &[OccupancyGrid],
    tasks: &[NavTask],
    policy: &P,
    seed: u64,
) -> Vec<EpisodeResult> {
    let by_seed: HashMap<u64, &OccupancyGrid> =
        worlds.iter().map(|w| (w.world_seed, w)).collect();
    tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let grid = by_seed[&task.world_seed];
            let mut p = policy.clone();
            run_episode(grid, task, &mut p, episode_seed(seed, i))
        })
        .collect()
}

fn episode_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// (1/K) · Σ S_i.
pub fn success_rate(results: &[EpisodeResult]) -> f64 {
    assert!(!results.is_empty(), "success_rate of an empty suite");
    results.iter().filter(|r| r.success).count() as f64 / results.len() as f64
}

/// (1/K) · Σ S_i · l_i / max(l_i, p_i); an at-goal success (l = p = 0)
/// contributes 1.
pub fn spl(results: &[EpisodeResult]) -> f64 {
    assert!(!results.is_empty(), "spl of an empty suite");
    let total: f64 = results
        .iter()
        .map(|r| {
            if !r.success {
                0.0
            } else if r.shortest_length == 0 && r.executed_length == 0 {
                1.0
            } else {
                r.shortest_length as f64 / r.shortest_length.max(r.executed_length) as f64
            }
        })
        .sum();
    total / results.len() as f64
}

/// Fraction of tasks whose shortest-path-to-Euclidean ratio lies in
/// [1, 1.1]; lower means a harder suite.
pub fn difficulty_p(worlds: &[OccupancyGrid], tasks: &[NavTask]) -> Result<f64, ExpertError> {
    assert!(!tasks.is_empty());
    let by_seed: HashMap<u64, &OccupancyGrid> =
        worlds.iter().map(|w| (w.world_seed, w)).collect();
    let mut hits = 0;
    for task in tasks {
        let ratio = difficulty_ratio(by_seed[&task.world_seed], task)?;
        if (1.0..=1.1).contains(&ratio) {
            hits += 1;
        }
    }
    Ok(hits as f64 / tasks.len() as f64)
}

/// Percentage of collided actions per time bucket, over the episodes still
/// running in that bucket. Buckets with no running episodes report 0.
pub fn collision_curve(results: &[EpisodeResult], bucket: usize) -> Vec<f64> {
    assert!(bucket >= 1);
    let n_buckets = MAX_EPISODE_STEPS.div_ceil(bucket);
    let mut curve = vec![0.0; n_buckets];
    for (b, slot) in curve.iter_mut().enumerate() {
        let (mut collided, mut total) = (0usize, 0usize);
        for r in results {
            for step in b * bucket..((b + 1) * bucket).min(r.collision_flags.len()) {
                total += 1;
                if r.collision_flags[step] {
                    collided += 1;
                }
            }
        }
        if total > 0 {
            *slot = 100.0 * collided as f64 / total as f64;
        }
    }
    curve
}

/// Mean and standard deviation of the collision curve across several runs
/// (the error bands of the curve figure).
pub fn collision_curve_bands(runs: &[Vec<EpisodeResult>], bucket: usize) -> Vec<(f64, f64)> {
    assert!(!runs.is_empty());
    let curves: Vec<Vec<f64>> = runs.iter().map(|r| collision_curve(r, bucket)).collect();
    let n_buckets = curves[0].len();
    (0..n_buckets)
        .map(|b| {
            let vals: Vec<f64> = curves.iter().map(|c| c[b]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / vals.len() as f64;
            (mean, var.sqrt())
        })
        .collect()
}

/// One episode under the uniform-random policy.
pub fn random_baseline(grid: &OccupancyGrid, task: &NavTask, seed: u64) -> EpisodeResult {
    let mut policy = RandomPolicy::default();
    run_episode(grid, task, &mut policy, seed)
}

/// Aggregated metrics of one suite evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Task count K.
    pub k: usize,
    pub sr: f64,
    pub spl: f64,
    /// Difficulty P of the suite.
    pub p: f64,
    pub mean_collisions: f64,
    /// Collision percentage per 5-step bucket.
    pub curve: Vec<f64>,
    pub seeds: Vec<u64>,
    pub config_hash: String,
}

impl MetricsReport {
    pub fn from_results(
        worlds: &[OccupancyGrid],
        tasks: &[NavTask],
        results: &[EpisodeResult],
        seeds: Vec<u64>,
        config_hash: String,
    ) -> Result<MetricsReport, ExpertError> {
        assert_eq!(tasks.len(), results.len());
        let sr = success_rate(results);
        let spl_v = spl(results);
        assert!(
            spl_v <= sr + 1e-12,
            "SPL {spl_v} must not exceed SR {sr}"
        );
        Ok(MetricsReport {
            k: results.len(),
            sr,
            spl: spl_v,
            p: difficulty_p(worlds, tasks)?,
            mean_collisions: results.iter().map(|r| r.collisions as f64).sum::<f64>()
                / results.len() as f64,
            curve: collision_curve(results, CURVE_BUCKET),
            seeds,
            config_hash,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// FNV-1a hex digest used to stamp reports with their config.
pub fn config_hash(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Train one model per variant with identical seeds and data, then evaluate
/// all of them on the same suite. Returns reports in the order given.
pub fn run_ablation(
    variants: &[Variant],
    base: &TrainConfig,
    suite_worlds: &[OccupancyGrid],
    suite_tasks: &[NavTask],
    episode_seed: u64,
) -> Result<Vec<(Variant, MetricsReport)>, TrainerError> {
    let pool = build_pool(base)?;
    let hash = config_hash(&base.to_toml());
    let mut out = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut cfg = base.clone();
        cfg.model.variant = variant;
        let mut state = init_state(&cfg);
        train(&cfg, &pool, &mut state, None, |_| {})?;
        let policy = ModelPolicy::new(&state.model, ActMode::Deterministic);
        let results = run_suite(suite_worlds, suite_tasks, &policy, episode_seed);
        let report = MetricsReport::from_results(
            suite_worlds,
            suite_tasks,
            &results,
            vec![base.seed, episode_seed],
            hash.clone(),
        )
        .map_err(TrainerError::Expert)?;
        out.push((variant, report));
    }
    Ok(out)
}
