//! Procedural world generation: walled rectangle, optional room partitions
//! with door gaps, random obstacles, connectivity enforced by flood fill.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EnvError, OccupancyGrid};

const MAX_ATTEMPTS: u32 = 64;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub width: usize,
    pub height: usize,
    /// Fraction of interior cells turned into obstacles, in [0, 0.4).
    pub obstacle_density: f64,
    /// Number of rooms to partition the interior into (>= 1).
    pub room_count: usize,
}

impl Default for WorldSpec {
    fn default() -> WorldSpec {
        WorldSpec {
            width: 12,
            height: 12,
            obstacle_density: 0.1,
            room_count: 2,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.width < 4 || self.height < 4 {
            return Err(EnvError::InvalidSpec(format!(
                "width and height must be >= 4, got {}x{}",
                self.width, self.height
            )));
        }
        if !(0.0..0.4).contains(&self.obstacle_density) {
            return Err(EnvError::InvalidSpec(format!(
                "obstacle_density must be in [0, 0.4), got {}",
                self.obstacle_density
            )));
        }
        if self.room_count == 0 {
            return Err(EnvError::InvalidSpec("room_count must be >= 1".into()));
        }
        Ok(())
    }
}

/// Generate a connected world. Deterministic for a fixed (seed, spec); each
/// retry derives a fresh stream from the same seed, so determinism holds
/// even when early attempts are rejected.
pub fn generate_world(seed: u64, spec: &WorldSpec) -> Result<OccupancyGrid, EnvError> {
    spec.validate()?;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(attempt as u64 + 1)));
        let grid = build_candidate(seed, spec, &mut rng);
        if is_connected(&grid) {
            return Ok(grid);
        }
    }
    Err(EnvError::Disconnected {
        seed,
        attempts: MAX_ATTEMPTS,
    })
}

fn build_candidate(seed: u64, spec: &WorldSpec, rng: &mut ChaCha8Rng) -> OccupancyGrid {
    let (w, h) = (spec.width, spec.height);
    let mut occ = vec![false; w * h];
    for i in 0..w {
        occ[i] = true;
        occ[(h - 1) * w + i] = true;
    }
    for j in 0..h {
        occ[j * w] = true;
        occ[j * w + w - 1] = true;
    }

    // Room partitions: alternate vertical/horizontal walls, one door each.
    // Door cells are kept clear of obstacles so partitions stay passable.
    let mut doors: Vec<usize> = Vec::new();
    for k in 1..spec.room_count {
        if k % 2 == 1 && w > 6 {
            let x = rng.gen_range(3..w - 3);
            let door = rng.gen_range(1..h - 1);
            for j in 1..h - 1 {
                if j != door {
                    occ[j * w + x] = true;
                }
            }
            doors.push(door * w + x);
        } else if h > 6 {
            let y = rng.gen_range(3..h - 3);
            let door = rng.gen_range(1..w - 1);
            for i in 1..w - 1 {
                if i != door {
                    occ[y * w + i] = true;
                }
            }
            doors.push(y * w + door);
        }
    }

    // Random obstacles over the remaining free interior.
    let free: Vec<usize> = (0..w * h)
        .filter(|&idx| !occ[idx] && !doors.contains(&idx))
        .collect();
    let n_obstacles = (free.len() as f64 * spec.obstacle_density).floor() as usize;
    let mut shuffled = free;
    shuffled.shuffle(rng);
    for &idx in shuffled.iter().take(n_obstacles) {
        occ[idx] = true;
    }

    // Guarantee at least one free cell.
    if occ.iter().all(|&o| o) {
        occ[w + 1] = false;
    }

    OccupancyGrid::from_cells(w, h, seed, occ)
}

/// Free space forms a single 4-connected component.
pub fn is_connected(grid: &OccupancyGrid) -> bool {
    let free: Vec<(usize, usize)> = grid.free_cells().collect();
    let Some(&start) = free.first() else {
        return false;
    };
    let mut seen = vec![false; grid.width * grid.height];
    let mut stack = vec![start];
    seen[start.1 * grid.width + start.0] = true;
    let mut count = 0usize;
    while let Some((i, j)) = stack.pop() {
        count += 1;
        for (di, dj) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
            let (ni, nj) = (i as i64 + di, j as i64 + dj);
            if grid.is_free(ni, nj) && !seen[nj as usize * grid.width + ni as usize] {
                seen[nj as usize * grid.width + ni as usize] = true;
                stack.push((ni as usize, nj as usize));
            }
        }
    }
    count == free.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_density_4x4_is_open_square() {
        let spec = WorldSpec {
            width: 4,
            height: 4,
            obstacle_density: 0.0,
            room_count: 1,
        };
        let g = generate_world(0, &spec).unwrap();
        let free: Vec<_> = g.free_cells().collect();
        assert_eq!(free, vec![(1, 1), (2, 1), (1, 2), (2, 2)]);
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let spec = WorldSpec {
            width: 12,
            height: 12,
            obstacle_density: 0.25,
            room_count: 2,
        };
        let a = generate_world(42, &spec).unwrap();
        let b = generate_world(42, &spec).unwrap();
        assert_eq!(a, b);
        let c = generate_world(43, &spec).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generated_worlds_are_connected() {
        let spec = WorldSpec {
            width: 12,
            height: 12,
            obstacle_density: 0.2,
            room_count: 2,
        };
        for seed in 0..20 {
            let g = generate_world(seed, &spec).unwrap();
            assert!(is_connected(&g), "seed {seed} disconnected");
        }
    }

    #[test]
    fn rejects_bad_spec() {
        let bad = WorldSpec {
            width: 3,
            height: 8,
            obstacle_density: 0.0,
            room_count: 1,
        };
        assert!(generate_world(0, &bad).is_err());
        let bad_density = WorldSpec {
            width: 8,
            height: 8,
            obstacle_density: 0.4,
            room_count: 1,
        };
        assert!(generate_world(0, &bad_density).is_err());
    }
}
