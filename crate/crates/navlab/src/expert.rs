//! Ground-truth supervision: shortest-path demonstrations over the
//! (cell, heading) state graph, per-action collision labels, stop labels,
//! and a stop-balanced task sampler.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{
    is_success, transition, ActionId, OccupancyGrid, Pose, CELL_SIZE, MOTION_ACTIONS,
};

/// Episode step budget; sampled training tasks fit within it.
pub const MAX_STEPS: usize = 100;
/// Target fraction of sampled tasks whose start already satisfies success.
pub const AT_GOAL_FRACTION: f64 = 1.0 / 7.0;

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error("goal unreachable from start")]
    Unreachable,
    #[error("world has fewer than 2 free cells")]
    DegenerateWorld,
    #[error("malformed demonstration record: {0}")]
    Parse(String),
}

/// One navigation task: reach `goal` (given as a viewpoint) from `start`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NavTask {
    pub world_seed: u64,
    pub start: Pose,
    pub goal: Pose,
}

/// An expert trajectory with per-step supervision labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub task: NavTask,
    /// T+1 poses; `poses[0]` is the start.
    pub poses: Vec<Pose>,
    /// T+1 actions ending in `Stop`.
    pub actions: Vec<ActionId>,
    /// Per pose: for each of the 6 motion actions, whether it would collide.
    pub collision_labels: Vec<[bool; 6]>,
    /// Per pose: whether the success criterion holds there.
    pub stop_labels: Vec<bool>,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Motion steps, i.e. path length excluding the final `Stop`.
    pub fn motion_steps(&self) -> usize {
        self.actions.len() - 1
    }
}

/// Discrete search state.
type State = (i64, i64, i32);

fn pose_state(grid: &OccupancyGrid, pose: &Pose) -> State {
    let (i, j) = grid.pose_cell(pose);
    (i, j, pose.heading)
}

fn state_index(grid: &OccupancyGrid, s: State) -> usize {
    ((s.1 as usize * grid.width + s.0 as usize) * 4) + (s.2 / 90) as usize
}

/// Minimum-step action sequence from `start` to the success set of `goal`,
/// terminated by `Stop`. Unit edge costs. The path is the greedy descent of
/// the distance-to-success field with ties broken in canonical action order,
/// so the expert's choice at any state is a deterministic local function of
/// (state, goal) rather than an artifact of search order — supervision that
/// a policy can actually generalize from.
pub fn shortest_path(
    grid: &OccupancyGrid,
    start: &Pose,
    goal: &Pose,
) -> Result<Vec<ActionId>, ExpertError> {
    debug_assert!(grid.is_valid_pose(start) && grid.is_valid_pose(goal));
    if is_success(start, goal) {
        return Ok(vec![ActionId::Stop]);
    }
    let dist = distance_field(grid, goal);
    let s0 = pose_state(grid, start);
    if dist[state_index(grid, s0)] == usize::MAX {
        return Err(ExpertError::Unreachable);
    }
    let mut actions = Vec::new();
    let mut pose = *start;
    while !is_success(&pose, goal) {
        let d = dist[state_index(grid, pose_state(grid, &pose))];
        let mut advanced = false;
        for &action in &MOTION_ACTIONS {
            let out = transition(grid, &pose, action);
            if out.collided {
                continue;
            }
            let ni = state_index(grid, pose_state(grid, &out.next_pose));
            if dist[ni] < d {
                actions.push(action);
                pose = out.next_pose;
                advanced = true;
                break;
            }
        }
        if !advanced {
            debug_assert!(false, "distance field must descend");
            return Err(ExpertError::Unreachable);
        }
    }
    actions.push(ActionId::Stop);
    Ok(actions)
}

/// Steps-to-success-set for every (cell, heading) state, via multi-source
/// BFS from the success set. Every motion action has an inverse with the
/// same collision condition (forward/back, left/right, the two rotations),
/// so the state graph is undirected and forward expansion from the set
/// yields exact distances to it.
fn distance_field(grid: &OccupancyGrid, goal: &Pose) -> Vec<usize> {
    let n = grid.width * grid.height * 4;
    let mut dist = vec![usize::MAX; n];
    let mut queue: VecDeque<Pose> = VecDeque::new();
    for (i, j) in grid.free_cells() {
        for h in [0, 90, 180, 270] {
            let pose = Pose::at_cell(i, j, h);
            if is_success(&pose, goal) {
                dist[state_index(grid, pose_state(grid, &pose))] = 0;
                queue.push_back(pose);
            }
        }
    }
    while let Some(pose) = queue.pop_front() {
        let d = dist[state_index(grid, pose_state(grid, &pose))];
        for &action in &MOTION_ACTIONS {
            let out = transition(grid, &pose, action);
            if out.collided {
                continue;
            }
            let idx = state_index(grid, pose_state(grid, &out.next_pose));
            if dist[idx] == usize::MAX {
                dist[idx] = d + 1;
                queue.push_back(out.next_pose);
            }
        }
    }
    dist
}

/// Per-motion-action collision labels at a pose: entry i is true iff
/// executing `MOTION_ACTIONS[i]` from this pose collides.
pub fn label_collisions(grid: &OccupancyGrid, pose: &Pose) -> [bool; 6] {
    let mut labels = [false; 6];
    for (i, &action) in MOTION_ACTIONS.iter().enumerate() {
        labels[i] = transition(grid, pose, action).collided;
    }
    labels
}

/// Bundle the shortest-path actions with poses and supervision labels.
pub fn demonstrate(grid: &OccupancyGrid, task: &NavTask) -> Result<Demonstration, ExpertError> {
    let actions = shortest_path(grid, &task.start, &task.goal)?;
    let mut poses = vec![task.start];
    for &a in actions.iter().take(actions.len() - 1) {
        let out = transition(grid, poses.last().unwrap(), a);
        debug_assert!(!out.collided, "expert path must be collision-free");
        poses.push(out.next_pose);
    }
    let collision_labels = poses.iter().map(|p| label_collisions(grid, p)).collect();
    let stop_labels = poses.iter().map(|p| is_success(p, &task.goal)).collect();
    Ok(Demonstration {
        task: *task,
        poses,
        actions,
        collision_labels,
        stop_labels,
    })
}

/// Shortest-path-to-Euclidean difficulty ratio of a task. Path length is the
/// translation distance in meters of the cell-level shortest path from the
/// start cell to the goal cell (rotations contribute zero); the Euclidean
/// denominator is floored at one cell size. A task with zero translation
/// reports 1.
pub fn difficulty_ratio(grid: &OccupancyGrid, task: &NavTask) -> Result<f64, ExpertError> {
    let start = grid.pose_cell(&task.start);
    let goal = grid.pose_cell(&task.goal);
    let steps = cell_distance(grid, (start.0, start.1), (goal.0, goal.1))
        .ok_or(ExpertError::Unreachable)?;
    if steps == 0 {
        return Ok(1.0);
    }
    let geodesic = steps as f64 * CELL_SIZE;
    let dx = task.start.x - task.goal.x;
    let dy = task.start.y - task.goal.y;
    let euclid = (dx * dx + dy * dy).sqrt().max(CELL_SIZE);
    Ok(geodesic / euclid)
}

/// 4-connected BFS distance between two free cells, in cells.
fn cell_distance(grid: &OccupancyGrid, from: (i64, i64), to: (i64, i64)) -> Option<usize> {
    if !grid.is_free(from.0, from.1) || !grid.is_free(to.0, to.1) {
        return None;
    }
    let mut dist = vec![usize::MAX; grid.width * grid.height];
    let idx = |c: (i64, i64)| c.1 as usize * grid.width + c.0 as usize;
    dist[idx(from)] = 0;
    let mut queue = std::collections::VecDeque::from([from]);
    while let Some(c) = queue.pop_front() {
        if c == to {
            return Some(dist[idx(c)]);
        }
        for (di, dj) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
            let n = (c.0 + di, c.1 + dj);
            if grid.is_free(n.0, n.1) && dist[idx(n)] == usize::MAX {
                dist[idx(n)] = dist[idx(c)] + 1;
                queue.push_back(n);
            }
        }
    }
    None
}

/// Sample `n` tasks over the given worlds, deterministically for a fixed
/// seed. An exact quota of round(n / 7) tasks starts inside the success set
/// of its goal; the rest are uniform reachable (start, goal) pairs whose
/// shortest path fits in [`MAX_STEPS`].
pub fn sample_tasks(
    worlds: &[OccupancyGrid],
    n: usize,
    seed: u64,
) -> Result<Vec<NavTask>, ExpertError> {
    assert!(n >= 1, "n must be >= 1");
    assert!(!worlds.is_empty(), "need at least one world");
    for w in worlds {
        if w.free_cells().count() < 2 {
            return Err(ExpertError::DegenerateWorld);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_at_goal = ((n as f64 * AT_GOAL_FRACTION).round() as usize).min(n);
    let mut tasks = Vec::with_capacity(n);
    for k in 0..n {
        let at_goal = k < n_at_goal;
        tasks.push(sample_one(worlds, at_goal, &mut rng)?);
    }
    tasks.shuffle(&mut rng);
    Ok(tasks)
}

fn random_free_pose(grid: &OccupancyGrid, rng: &mut ChaCha8Rng) -> Pose {
    let cells: Vec<(usize, usize)> = grid.free_cells().collect();
    let (i, j) = cells[rng.gen_range(0..cells.len())];
    let heading = 90 * rng.gen_range(0..4i32);
    Pose::at_cell(i, j, heading)
}

fn sample_one(
    worlds: &[OccupancyGrid],
    at_goal: bool,
    rng: &mut ChaCha8Rng,
) -> Result<NavTask, ExpertError> {
    for _ in 0..10_000 {
        let grid = &worlds[rng.gen_range(0..worlds.len())];
        let goal = random_free_pose(grid, rng);
        if at_goal {
            // Uniform over the success set of this goal.
            let mut options = Vec::new();
            let (gi, gj) = grid.pose_cell(&goal);
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    if grid.is_free(gi + di, gj + dj) {
                        options.push(Pose::at_cell(
                            (gi + di) as usize,
                            (gj + dj) as usize,
                            goal.heading,
                        ));
                    }
                }
            }
            let start = options[rng.gen_range(0..options.len())];
            debug_assert!(is_success(&start, &goal));
            return Ok(NavTask {
                world_seed: grid.world_seed,
                start,
                goal,
            });
        }
        let start = random_free_pose(grid, rng);
        if is_success(&start, &goal) {
            continue;
        }
        let task = NavTask {
            world_seed: grid.world_seed,
            start,
            goal,
        };
        match shortest_path(grid, &start, &goal) {
            Ok(actions) if actions.len() - 1 < MAX_STEPS => return Ok(task),
            _ => continue,
        }
    }
    Err(ExpertError::Unreachable)
}

// --- line-oriented demonstration record format -------------------------------

impl Demonstration {
    /// Serialize to the line-oriented record format:
    /// `demo <world_seed> <start x y h> <goal x y h>` then one line per step
    /// `<x> <y> <h> <action> <c0..c5> <stop>`. Round-trips bit-exactly
    /// (poses are exact multiples of 0.25 and f64 formatting round-trips).
    pub fn to_record(&self) -> String {
        let t = &self.task;
        let mut out = format!(
            "demo {} {} {} {} {} {} {}\n",
            t.world_seed, t.start.x, t.start.y, t.start.heading, t.goal.x, t.goal.y, t.goal.heading
        );
        for k in 0..self.poses.len() {
            let p = self.poses[k];
            let bits: String = self.collision_labels[k]
                .iter()
                .map(|&b| if b { '1' } else { '0' })
                .collect();
            let _ = writeln!(
                out,
                "{} {} {} {} {} {}",
                p.x,
                p.y,
                p.heading,
                self.actions[k].name(),
                bits,
                if self.stop_labels[k] { 1 } else { 0 }
            );
        }
        out
    }

    pub fn from_record(text: &str) -> Result<Demonstration, ExpertError> {
        let bad = |m: &str| ExpertError::Parse(m.to_string());
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty record"))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 8 || h[0] != "demo" {
            return Err(bad(&format!("bad header: {header}")));
        }
        let f = |s: &str| s.parse::<f64>().map_err(|_| bad("bad float"));
        let i = |s: &str| s.parse::<i32>().map_err(|_| bad("bad int"));
        let task = NavTask {
            world_seed: h[1].parse().map_err(|_| bad("bad seed"))?,
            start: Pose::new(f(h[2])?, f(h[3])?, i(h[4])?),
            goal: Pose::new(f(h[5])?, f(h[6])?, i(h[7])?),
        };
        let mut poses = Vec::new();
        let mut actions = Vec::new();
        let mut collision_labels = Vec::new();
        let mut stop_labels = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let p: Vec<&str> = line.split_whitespace().collect();
            if p.len() != 6 {
                return Err(bad(&format!("bad step line: {line}")));
            }
            poses.push(Pose::new(f(p[0])?, f(p[1])?, i(p[2])?));
            actions.push(ActionId::from_name(p[3]).ok_or_else(|| bad("bad action"))?);
            if p[4].len() != 6 {
                return Err(bad("bad collision bits"));
            }
            let mut labels = [false; 6];
            for (k, c) in p[4].chars().enumerate() {
                labels[k] = c == '1';
            }
            collision_labels.push(labels);
            stop_labels.push(p[5] == "1");
        }
        if poses.is_empty() || actions.last() != Some(&ActionId::Stop) {
            return Err(bad("record must end in stop"));
        }
        Ok(Demonstration {
            task,
            poses,
            actions,
            collision_labels,
            stop_labels,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_world, WorldSpec};

    fn world(seed: u64, w: usize, h: usize, density: f64) -> OccupancyGrid {
        generate_world(
            seed,
            &WorldSpec {
                width: w,
                height: h,
                obstacle_density: density,
                room_count: 1,
            },
        )
        .unwrap()
    }

    #[test]
    fn at_goal_start_yields_stop_only() {
        let g = world(0, 8, 8, 0.0);
        let goal = Pose::at_cell(3, 3, 0);
        let start = Pose::at_cell(4, 3, 0);
        let path = shortest_path(&g, &start, &goal).unwrap();
        assert_eq!(path, vec![ActionId::Stop]);
    }

    #[test]
    fn straight_path_stops_inside_radius() {
        // Goal 3 cells ahead: two forward moves bring the agent to 0.5 m.
        let g = world(0, 10, 6, 0.0);
        let start = Pose::at_cell(1, 2, 0);
        let goal = Pose::at_cell(4, 2, 0);
        let path = shortest_path(&g, &start, &goal).unwrap();
        assert_eq!(
            path,
            vec![ActionId::MoveForward, ActionId::MoveForward, ActionId::Stop]
        );
    }

    #[test]
    fn unreachable_goal_is_reported() {
        // Two rooms, no door: carve manually.
        let text = "grid 7 5 0.5 0\n#######\n#..#..#\n#..#..#\n#..#..#\n#######\n";
        let g = OccupancyGrid::from_text(text).unwrap();
        let start = Pose::at_cell(1, 1, 0);
        let goal = Pose::at_cell(5, 1, 0);
        assert!(matches!(
            shortest_path(&g, &start, &goal),
            Err(ExpertError::Unreachable)
        ));
        let task = NavTask {
            world_seed: 0,
            start,
            goal,
        };
        assert!(matches!(
            difficulty_ratio(&g, &task),
            Err(ExpertError::Unreachable)
        ));
    }

    #[test]
    fn collision_labels_match_transitions() {
        let g = world(5, 12, 12, 0.2);
        for (i, j) in g.free_cells() {
            for h in [0, 90, 180, 270] {
                let pose = Pose::at_cell(i, j, h);
                let labels = label_collisions(&g, &pose);
                for (k, &a) in MOTION_ACTIONS.iter().enumerate() {
                    assert_eq!(labels[k], transition(&g, &pose, a).collided);
                }
                // Rotations never collide.
                assert!(!labels[4] && !labels[5]);
            }
        }
    }

    #[test]
    fn demonstration_replays_exactly() {
        let g = world(3, 12, 12, 0.15);
        let tasks = sample_tasks(std::slice::from_ref(&g), 20, 9).unwrap();
        for task in &tasks {
            let demo = demonstrate(&g, task).unwrap();
            assert_eq!(demo.actions.last(), Some(&ActionId::Stop));
            assert!(*demo.stop_labels.last().unwrap());
            let mut pose = demo.poses[0];
            for (k, &a) in demo.actions.iter().enumerate() {
                assert_eq!(pose, demo.poses[k]);
                let out = transition(&g, &pose, a);
                assert!(!out.collided);
                pose = out.next_pose;
            }
            assert!(is_success(demo.poses.last().unwrap(), &task.goal));
            assert!(demo.len() <= MAX_STEPS);
        }
    }

    #[test]
    fn sampler_is_deterministic_and_balanced() {
        let worlds: Vec<_> = (0..3).map(|s| world(s, 10, 10, 0.1)).collect();
        let a = sample_tasks(&worlds, 700, 11).unwrap();
        let b = sample_tasks(&worlds, 700, 11).unwrap();
        assert_eq!(a, b);
        let at_goal = a.iter().filter(|t| is_success(&t.start, &t.goal)).count();
        let frac = at_goal as f64 / a.len() as f64;
        assert!((0.113..=0.173).contains(&frac), "at-goal fraction {frac}");
        let single = sample_tasks(&worlds, 1, 3).unwrap();
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn difficulty_ratio_cases() {
        let g = world(0, 12, 6, 0.0);
        // Straight corridor task.
        let straight = NavTask {
            world_seed: 0,
            start: Pose::at_cell(1, 2, 0),
            goal: Pose::at_cell(8, 2, 0),
        };
        let r = difficulty_ratio(&g, &straight).unwrap();
        assert!((1.0..=1.1).contains(&r), "ratio {r}");
        // Degenerate start-at-goal task.
        let degenerate = NavTask {
            world_seed: 0,
            start: Pose::at_cell(1, 2, 0),
            goal: Pose::at_cell(1, 2, 90),
        };
        assert_eq!(difficulty_ratio(&g, &degenerate).unwrap(), 1.0);
        // U-shaped detour around a wall.
        let text = "grid 9 7 0.5 0\n\
                    #########\n\
                    #.......#\n\
                    #.......#\n\
                    #...#...#\n\
                    #...#...#\n\
                    #...#...#\n\
                    #########\n";
        let maze = OccupancyGrid::from_text(text).unwrap();
        let detour = NavTask {
            world_seed: 0,
            start: Pose::at_cell(2, 5, 0),
            goal: Pose::at_cell(6, 5, 0),
        };
        let r = difficulty_ratio(&maze, &detour).unwrap();
        assert!(r > 1.1, "ratio {r}");
    }

    #[test]
    fn record_round_trip_is_bit_exact() {
        let g = world(8, 12, 12, 0.2);
        let tasks = sample_tasks(std::slice::from_ref(&g), 10, 21).unwrap();
        for task in &tasks {
            let demo = demonstrate(&g, task).unwrap();
            let text = demo.to_record();
            let back = Demonstration::from_record(&text).unwrap();
            assert_eq!(demo, back);
            assert_eq!(back.to_record(), text);
        }
    }
}
