//! Image emitters: top-down world maps with navigation paths, and
//! collision-percentage curves with error bands. Pure functions of their
//! inputs, so identical inputs yield identical PNG bytes.

use image::{Rgb, RgbImage};

use crate::env::{OccupancyGrid, Pose};

/// Pixels per grid cell in map renders.
pub const CELL_PX: u32 = 24;

const COLOR_FREE: Rgb<u8> = Rgb([238, 238, 238]);
const COLOR_WALL: Rgb<u8> = Rgb([60, 60, 60]);
const COLOR_GRIDLINE: Rgb<u8> = Rgb([210, 210, 210]);
const COLOR_START: Rgb<u8> = Rgb([30, 120, 220]);
const COLOR_GOAL: Rgb<u8> = Rgb([220, 160, 20]);
const COLOR_END: Rgb<u8> = Rgb([200, 40, 40]);
const PATH_COLORS: [Rgb<u8>; 5] = [
    Rgb([40, 140, 60]),
    Rgb([150, 60, 180]),
    Rgb([220, 100, 40]),
    Rgb([40, 120, 160]),
    Rgb([160, 40, 80]),
];

/// One drawable trajectory: the pose trace of an episode plus its task
/// endpoints.
pub struct Trace {
    pub start: Pose,
    pub goal: Pose,
    pub poses: Vec<Pose>,
}

/// Top-down map of a world with any number of traces: start and goal drawn
/// as stars, the path as a polyline, the final pose as a filled square.
pub fn render_map(grid: &OccupancyGrid, traces: &[Trace]) -> RgbImage {
    let w = grid.width as u32 * CELL_PX;
    let h = grid.height as u32 * CELL_PX;
    let mut img = RgbImage::new(w, h);
    for j in 0..grid.height {
        for i in 0..grid.width {
            let color = if grid.is_occupied(i as i64, j as i64) {
                COLOR_WALL
            } else {
                COLOR_FREE
            };
            fill_rect(
                &mut img,
                i as u32 * CELL_PX,
                j as u32 * CELL_PX,
                CELL_PX,
                CELL_PX,
                color,
            );
        }
    }
    for x in (0..w).step_by(CELL_PX as usize) {
        draw_line(&mut img, (x as i64, 0), (x as i64, h as i64 - 1), COLOR_GRIDLINE);
    }
    for y in (0..h).step_by(CELL_PX as usize) {
        draw_line(&mut img, (0, y as i64), (w as i64 - 1, y as i64), COLOR_GRIDLINE);
    }
    for (t, trace) in traces.iter().enumerate() {
        let color = PATH_COLORS[t % PATH_COLORS.len()];
        let pts: Vec<(i64, i64)> = trace.poses.iter().map(|p| pose_px(grid, p)).collect();
        for pair in pts.windows(2) {
            draw_line(&mut img, pair[0], pair[1], color);
        }
        if let Some(&last) = pts.last() {
            fill_rect(
                &mut img,
                (last.0 - 3).max(0) as u32,
                (last.1 - 3).max(0) as u32,
                7,
                7,
                COLOR_END,
            );
        }
        draw_star(&mut img, pose_px(grid, &trace.start), COLOR_START);
        draw_star(&mut img, pose_px(grid, &trace.goal), COLOR_GOAL);
    }
    img
}

fn pose_px(grid: &OccupancyGrid, pose: &Pose) -> (i64, i64) {
    let x = pose.x / grid.cell_size * CELL_PX as f64;
    let y = pose.y / grid.cell_size * CELL_PX as f64;
    (x.round() as i64, y.round() as i64)
}

/// Collision-percentage curves (one per labelled run family) with one
/// standard deviation shaded around each mean.
pub fn render_collision_curves(
    curves: &[(String, Vec<(f64, f64)>)],
    bucket: usize,
) -> RgbImage {
    const W: u32 = 640;
    const H: u32 = 400;
    const MARGIN: i64 = 40;
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    // Axes.
    draw_line(
        &mut img,
        (MARGIN, H as i64 - MARGIN),
        (W as i64 - 10, H as i64 - MARGIN),
        COLOR_WALL,
    );
    draw_line(&mut img, (MARGIN, 10), (MARGIN, H as i64 - MARGIN), COLOR_WALL);
    let n = curves.iter().map(|(_, c)| c.len()).max().unwrap_or(0);
    if n == 0 {
        return img;
    }
    let x_of = |i: usize| {
        MARGIN
            + ((i * bucket) as f64 / ((n - 1).max(1) * bucket) as f64
                * (W as i64 - MARGIN - 10) as f64) as i64
    };
    let y_of = |pct: f64| {
        let span = (H as i64 - MARGIN - 10) as f64;
        H as i64 - MARGIN - (pct.clamp(0.0, 100.0) / 100.0 * span) as i64
    };
    for (c, (_, curve)) in curves.iter().enumerate() {
        let color = PATH_COLORS[c % PATH_COLORS.len()];
        let band = Rgb([
            color.0[0].saturating_add(70),
            color.0[1].saturating_add(70),
            color.0[2].saturating_add(70),
        ]);
        for i in 0..curve.len() {
            let (mean, sd) = curve[i];
            let x = x_of(i);
            draw_line(&mut img, (x, y_of(mean - sd)), (x, y_of(mean + sd)), band);
        }
        for i in 1..curve.len() {
            draw_line(
                &mut img,
                (x_of(i - 1), y_of(curve[i - 1].0)),
                (x_of(i), y_of(curve[i].0)),
                color,
            );
        }
        // Legend swatch.
        let ly = 14 + 12 * c as i64;
        draw_line(&mut img, (W as i64 - 110, ly), (W as i64 - 90, ly), color);
    }
    img
}

fn fill_rect(img: &mut RgbImage, x: u32, y: u32, w: u32, h: u32, color: Rgb<u8>) {
    for yy in y..(y + h).min(img.height()) {
        for xx in x..(x + w).min(img.width()) {
            img.put_pixel(xx, yy, color);
        }
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

/// Bresenham line.
fn draw_line(img: &mut RgbImage, from: (i64, i64), to: (i64, i64), color: Rgb<u8>) {
    let (mut x, mut y) = from;
    let dx = (to.0 - x).abs();
    let dy = -(to.1 - y).abs();
    let sx = if x < to.0 { 1 } else { -1 };
    let sy = if y < to.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(img, x, y, color);
        if (x, y) == to {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn draw_star(img: &mut RgbImage, center: (i64, i64), color: Rgb<u8>) {
    let (cx, cy) = center;
    for d in -4..=4i64 {
        put(img, cx + d, cy, color);
        put(img, cx, cy + d, color);
    }
    for d in -2..=2i64 {
        put(img, cx + d, cy + d, color);
        put(img, cx + d, cy - d, color);
    }
}
