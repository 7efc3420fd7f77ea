//! Procedural shape rasterizer.
//!
//! Pixel `(row, col)` covers `[col, col+1) × [row, row+1)`; coverage is the
//! fraction of a 4×4 grid of sub-samples at offsets `(i+0.5)/4` that fall
//! inside the shape. Shapes are defined in normalized coordinates
//! `u = (x − cx)/r`, `v = (y − cy)/r` with `y` pointing down.

/// Number of shapes in the inventory.
pub const SHAPE_COUNT: usize = 15;

pub const SHAPE_NAMES: [&str; SHAPE_COUNT] = [
    "disk",
    "ring",
    "square",
    "square_outline",
    "horizontal_bar",
    "vertical_bar",
    "plus",
    "x_cross",
    "triangle",
    "diamond",
    "diagonal_bar",
    "l_shape",
    "t_shape",
    "half_disk",
    "two_dots",
];

const SUB: usize = 4;

pub fn inside(shape: usize, u: f64, v: f64) -> bool {
    let r2 = u * u + v * v;
    match shape {
        0 => r2 <= 1.0,
        1 => (0.3025..=1.0).contains(&r2),
        2 => u.abs() <= 0.8 && v.abs() <= 0.8,
        3 => {
            let m = u.abs().max(v.abs());
            (0.5..=0.85).contains(&m)
        }
        4 => v.abs() <= 0.3 && u.abs() <= 1.0,
        5 => u.abs() <= 0.3 && v.abs() <= 1.0,
        6 => (u.abs() <= 0.25 && v.abs() <= 1.0) || (v.abs() <= 0.25 && u.abs() <= 1.0),
        7 => ((u - v).abs() <= 0.35 || (u + v).abs() <= 0.35) && r2 <= 1.2,
        8 => (-0.8..=0.8).contains(&v) && u.abs() <= 0.9 * (v + 0.8) / 1.6,
        9 => u.abs() + v.abs() <= 1.0,
        10 => (u - v).abs() <= 0.4 && (u + v).abs() <= 1.6,
        11 => ((u + 0.55).abs() <= 0.25 && v.abs() <= 0.9) || ((v - 0.65).abs() <= 0.25 && u.abs() <= 0.8),
        12 => ((v + 0.65).abs() <= 0.25 && u.abs() <= 0.9) || (u.abs() <= 0.25 && (-0.9..=0.9).contains(&v)),
        13 => r2 <= 1.0 && v >= 0.0,
        14 => (u + 0.5).powi(2) + v * v <= 0.16 || (u - 0.5).powi(2) + v * v <= 0.16,
        _ => false,
    }
}

/// Anti-aliased coverage map (`side × side`, values in [0,1]).
pub fn rasterize(shape: usize, side: usize, cx: f64, cy: f64, radius: f64) -> Vec<f64> {
    let mut out = vec![0.0; side * side];
    let inv = 1.0 / (SUB * SUB) as f64;
    for row in 0..side {
        for col in 0..side {
            let mut hits = 0;
            for sy in 0..SUB {
                for sx in 0..SUB {
                    let x = col as f64 + (sx as f64 + 0.5) / SUB as f64;
                    let y = row as f64 + (sy as f64 + 0.5) / SUB as f64;
                    if inside(shape, (x - cx) / radius, (y - cy) / radius) {
                        hits += 1;
                    }
                }
            }
            out[row * side + col] = hits as f64 * inv;
        }
    }
    out
}
