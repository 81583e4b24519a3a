//! Deterministic gridworld environment.
//!
//! The world is an occupancy grid of square cells (0.5 m). The agent sits at
//! free-cell centers with one of four headings and moves on the resulting
//! lattice with seven discrete actions. Observations are four-view depth
//! panoramas rendered analytically (see [`render`]).

mod render;
mod worldgen;

pub use render::{render_panorama, raycast, Panorama, D_MAX, VIEW_SIZE};
pub use worldgen::{generate_world, WorldSpec};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Side length of one grid cell in meters.
pub const CELL_SIZE: f64 = 0.5;
/// Translation distance of a single move action in meters.
pub const MOVE_DIST: f64 = 0.5;
/// Success radius around the goal position in meters (strict).
pub const SUCCESS_DIST: f64 = 1.0;
/// Maximum heading difference to the goal view in degrees (strict).
pub const SUCCESS_ANGLE: i32 = 90;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("grid spec cannot yield connected free space (seed {seed}, {attempts} attempts)")]
    Disconnected { seed: u64, attempts: u32 },
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error("malformed grid text: {0}")]
    Parse(String),
}

/// The seven control commands. The first six are motion actions; `Stop`
/// terminates the episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionId {
    MoveForward,
    MoveBack,
    MoveLeft,
    MoveRight,
    RotateCcw,
    RotateCw,
    Stop,
}

/// Fixed action order used for tie-breaking and label indexing.
pub const MOTION_ACTIONS: [ActionId; 6] = [
    ActionId::MoveForward,
    ActionId::MoveBack,
    ActionId::MoveLeft,
    ActionId::MoveRight,
    ActionId::RotateCcw,
    ActionId::RotateCw,
];

/// All seven actions in canonical order (motion actions then `Stop`).
pub const ALL_ACTIONS: [ActionId; 7] = [
    ActionId::MoveForward,
    ActionId::MoveBack,
    ActionId::MoveLeft,
    ActionId::MoveRight,
    ActionId::RotateCcw,
    ActionId::RotateCw,
    ActionId::Stop,
];

impl ActionId {
    /// Canonical index in [`ALL_ACTIONS`].
    pub fn index(self) -> usize {
        ALL_ACTIONS.iter().position(|&a| a == self).unwrap()
    }

    pub fn from_index(i: usize) -> Option<ActionId> {
        ALL_ACTIONS.get(i).copied()
    }

    pub fn is_motion(self) -> bool {
        self != ActionId::Stop
    }

    pub fn name(self) -> &'static str {
        match self {
            ActionId::MoveForward => "move_forward",
            ActionId::MoveBack => "move_back",
            ActionId::MoveLeft => "move_left",
            ActionId::MoveRight => "move_right",
            ActionId::RotateCcw => "rotate_ccw",
            ActionId::RotateCw => "rotate_cw",
            ActionId::Stop => "stop",
        }
    }

    pub fn from_name(s: &str) -> Option<ActionId> {
        ALL_ACTIONS.iter().copied().find(|a| a.name() == s)
    }
}

/// Agent pose: position in meters at a free-cell center, heading in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    /// One of 0, 90, 180, 270. Heading 0 points along +x, 90 along +y.
    pub heading: i32,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: i32) -> Pose {
        debug_assert!(matches!(heading, 0 | 90 | 180 | 270));
        Pose { x, y, heading }
    }

    /// Pose at the center of cell (i, j).
    pub fn at_cell(i: usize, j: usize, heading: i32) -> Pose {
        Pose::new(
            (i as f64 + 0.5) * CELL_SIZE,
            (j as f64 + 0.5) * CELL_SIZE,
            heading,
        )
    }

    /// Unit direction of the heading on the cell lattice.
    pub fn heading_dir(self) -> (i64, i64) {
        heading_dir(self.heading)
    }
}

pub(crate) fn heading_dir(heading: i32) -> (i64, i64) {
    match heading.rem_euclid(360) {
        0 => (1, 0),
        90 => (0, 1),
        180 => (-1, 0),
        270 => (0, -1),
        h => panic!("illegal heading {h}"),
    }
}

/// Occupancy grid world. Boundary cells are always occupied.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub width: usize,
    pub height: usize,
    pub cell_size: f64,
    pub world_seed: u64,
    occupied: Vec<bool>,
}

impl OccupancyGrid {
    pub(crate) fn from_cells(
        width: usize,
        height: usize,
        world_seed: u64,
        occupied: Vec<bool>,
    ) -> OccupancyGrid {
        assert_eq!(occupied.len(), width * height);
        OccupancyGrid {
            width,
            height,
            cell_size: CELL_SIZE,
            world_seed,
            occupied,
        }
    }

    pub fn is_occupied(&self, i: i64, j: i64) -> bool {
        if i < 0 || j < 0 || i as usize >= self.width || j as usize >= self.height {
            return true;
        }
        self.occupied[j as usize * self.width + i as usize]
    }

    pub fn is_free(&self, i: i64, j: i64) -> bool {
        !self.is_occupied(i, j)
    }

    /// Cell containing the world point (x, y).
    pub fn cell_of(&self, x: f64, y: f64) -> (i64, i64) {
        (
            (x / self.cell_size).floor() as i64,
            (y / self.cell_size).floor() as i64,
        )
    }

    pub fn pose_cell(&self, pose: &Pose) -> (i64, i64) {
        self.cell_of(pose.x, pose.y)
    }

    /// A pose is valid when it sits at the center of a free cell with a
    /// legal heading.
    pub fn is_valid_pose(&self, pose: &Pose) -> bool {
        if !matches!(pose.heading, 0 | 90 | 180 | 270) {
            return false;
        }
        let (i, j) = self.pose_cell(pose);
        if !self.is_free(i, j) {
            return false;
        }
        let cx = (i as f64 + 0.5) * self.cell_size;
        let cy = (j as f64 + 0.5) * self.cell_size;
        pose.x == cx && pose.y == cy
    }

    pub fn free_cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.height)
            .flat_map(move |j| (0..self.width).map(move |i| (i, j)))
            .filter(move |&(i, j)| self.is_free(i as i64, j as i64))
    }

    /// Serialize to the portable text format: one header line
    /// `grid <width> <height> <cell_size> <seed>` followed by `#`/`.` rows
    /// (row 0 first).
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "grid {} {} {} {}\n",
            self.width, self.height, self.cell_size, self.world_seed
        );
        for j in 0..self.height {
            for i in 0..self.width {
                out.push(if self.occupied[j * self.width + i] {
                    '#'
                } else {
                    '.'
                });
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<OccupancyGrid, EnvError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| EnvError::Parse("empty".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 5 || parts[0] != "grid" {
            return Err(EnvError::Parse(format!("bad header: {header}")));
        }
        let width: usize = parts[1].parse().map_err(|_| EnvError::Parse("width".into()))?;
        let height: usize = parts[2].parse().map_err(|_| EnvError::Parse("height".into()))?;
        let cell_size: f64 = parts[3].parse().map_err(|_| EnvError::Parse("cell_size".into()))?;
        let world_seed: u64 = parts[4].parse().map_err(|_| EnvError::Parse("seed".into()))?;
        if cell_size != CELL_SIZE {
            return Err(EnvError::Parse(format!("unsupported cell_size {cell_size}")));
        }
        let mut occupied = Vec::with_capacity(width * height);
        for _ in 0..height {
            let row = lines.next().ok_or_else(|| EnvError::Parse("truncated rows".into()))?;
            if row.chars().count() != width {
                return Err(EnvError::Parse(format!("row width mismatch: {row}")));
            }
            for c in row.chars() {
                match c {
                    '#' => occupied.push(true),
                    '.' => occupied.push(false),
                    other => return Err(EnvError::Parse(format!("bad cell char {other:?}"))),
                }
            }
        }
        Ok(OccupancyGrid::from_cells(width, height, world_seed, occupied))
    }
}

/// Result of applying one action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub next_pose: Pose,
    pub collided: bool,
    pub terminal: bool,
}

/// Apply one action to a valid pose. A move into an occupied cell collides
/// and leaves the pose unchanged; rotations never collide; `Stop` is terminal.
pub fn transition(grid: &OccupancyGrid, pose: &Pose, action: ActionId) -> StepOutcome {
    debug_assert!(grid.is_valid_pose(pose), "invalid pose {pose:?}");
    match action {
        ActionId::Stop => StepOutcome {
            next_pose: *pose,
            collided: false,
            terminal: true,
        },
        ActionId::RotateCcw | ActionId::RotateCw => {
            let delta = if action == ActionId::RotateCcw { 90 } else { -90 };
            let next = Pose {
                heading: (pose.heading + delta).rem_euclid(360),
                ..*pose
            };
            StepOutcome {
                next_pose: next,
                collided: false,
                terminal: false,
            }
        }
        _ => {
            let (dx, dy) = move_delta(pose.heading, action);
            let (i, j) = grid.pose_cell(pose);
            let (ni, nj) = (i + dx, j + dy);
            if grid.is_free(ni, nj) {
                StepOutcome {
                    next_pose: Pose {
                        x: pose.x + dx as f64 * MOVE_DIST,
                        y: pose.y + dy as f64 * MOVE_DIST,
                        heading: pose.heading,
                    },
                    collided: false,
                    terminal: false,
                }
            } else {
                StepOutcome {
                    next_pose: *pose,
                    collided: true,
                    terminal: false,
                }
            }
        }
    }
}

/// Cell delta of a move action at the given heading. Left is heading + 90°.
pub(crate) fn move_delta(heading: i32, action: ActionId) -> (i64, i64) {
    let dir = match action {
        ActionId::MoveForward => heading,
        ActionId::MoveBack => heading + 180,
        ActionId::MoveLeft => heading + 90,
        ActionId::MoveRight => heading + 270,
        other => panic!("not a move action: {other:?}"),
    };
    heading_dir(dir.rem_euclid(360))
}

/// Success criterion: Euclidean distance strictly below 1 m and circular
/// heading difference strictly below 90°.
pub fn is_success(pose: &Pose, goal: &Pose) -> bool {
    let dx = pose.x - goal.x;
    let dy = pose.y - goal.y;
    let dist = (dx * dx + dy * dy).sqrt();
    let diff = (pose.heading - goal.heading).rem_euclid(360);
    let angle = diff.min(360 - diff);
    dist < SUCCESS_DIST && angle < SUCCESS_ANGLE
}
