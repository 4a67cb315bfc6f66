//! Static comparison plots drawn directly into RGB buffers.

use image::{Rgb, RgbImage};

use crate::edit::EditLog;
use crate::field::Field;
use crate::io::is_pixel_grid;

pub const TILE: u32 = 96;
const MARGIN: u32 = 6;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

pub fn palette(i: usize) -> Rgb<u8> {
    Rgb(PALETTE[i % PALETTE.len()])
}

fn to_u8(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// A square thumbnail: pixel grids are upscaled nearest-neighbour, other
/// arrays become a bar chart of their entries over `[-2, 2]`.
pub fn tile(field: &Field) -> RgbImage {
    let mut img = RgbImage::from_pixel(TILE, TILE, BACKGROUND);
    if is_pixel_grid(field) {
        let (h, w) = (field.shape()[0], field.shape()[1]);
        let c = field.shape().get(2).copied().unwrap_or(1);
        let flat: Vec<f64> = field.iter().copied().collect();
        for (x, y, px) in img.enumerate_pixels_mut() {
            let (r, col) = (y as usize * h / TILE as usize, x as usize * w / TILE as usize);
            let base = (r * w + col) * c;
            *px = if c >= 3 {
                Rgb([to_u8(flat[base]), to_u8(flat[base + 1]), to_u8(flat[base + 2])])
            } else {
                let g = to_u8(flat[base]);
                Rgb([g, g, g])
            };
        }
        return img;
    }
    let n = field.len().max(1) as u32;
    let mid = TILE / 2;
    for (i, &v) in field.iter().enumerate() {
        let x0 = i as u32 * TILE / n;
        let x1 = ((i as u32 + 1) * TILE / n).max(x0 + 1);
        let height = ((v.clamp(-2.0, 2.0) / 2.0) * (mid as f64 - 2.0)).round() as i64;
        let color = if v >= 0.0 { palette(0) } else { palette(1) };
        let (lo, hi) = if height >= 0 {
            (mid as i64 - height, mid as i64)
        } else {
            (mid as i64, mid as i64 - height)
        };
        for x in (x0 + 1).min(x1 - 1)..x1.saturating_sub(1).max(x0 + 1) {
            for y in lo.max(0)..hi.min(TILE as i64) {
                img.put_pixel(x, y as u32, color);
            }
        }
    }
    for x in 0..TILE {
        img.put_pixel(x, mid, Rgb([0, 0, 0]));
    }
    frame(&mut img);
    img
}

fn frame(img: &mut RgbImage) {
    let edge = Rgb([190, 190, 190]);
    for i in 0..TILE {
        for (x, y) in [(i, 0), (i, TILE - 1), (0, i), (TILE - 1, i)] {
            img.put_pixel(x, y, edge);
        }
    }
}

/// Tile for a run that produced no image.
pub fn failed_tile() -> RgbImage {
    let mut img = RgbImage::from_pixel(TILE, TILE, Rgb([235, 235, 235]));
    for i in 0..TILE {
        for d in 0..3 {
            let j = (i + d).min(TILE - 1);
            img.put_pixel(i, j, Rgb([200, 0, 0]));
            img.put_pixel(TILE - 1 - i, j, Rgb([200, 0, 0]));
        }
    }
    img
}

/// Lays tiles out on a `rows × cols` grid; `None` cells stay blank.
pub fn grid(cells: &[Vec<Option<RgbImage>>]) -> RgbImage {
    let rows = cells.len().max(1) as u32;
    let cols = cells.iter().map(Vec::len).max().unwrap_or(1).max(1) as u32;
    let mut img = RgbImage::from_pixel(
        cols * (TILE + MARGIN) + MARGIN,
        rows * (TILE + MARGIN) + MARGIN,
        BACKGROUND,
    );
    for (r, row) in cells.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            if let Some(t) = cell {
                let (ox, oy) = (MARGIN + c as u32 * (TILE + MARGIN), MARGIN + r as u32 * (TILE + MARGIN));
                for (x, y, px) in t.enumerate_pixels() {
                    img.put_pixel(ox + x, oy + y, *px);
                }
            }
        }
    }
    img
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
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

/// MSE-to-source against iteration, one coloured line per run (colours
/// follow [`palette`] in the given order; `None` runs are skipped).
pub fn curves(logs: &[Option<&EditLog>]) -> RgbImage {
    let (w, h, pad) = (480u32, 320u32, 24i64);
    let mut img = RgbImage::from_pixel(w, h, BACKGROUND);
    let points = |log: &EditLog| -> Vec<(f64, f64)> {
        log.records
            .iter()
            .filter(|r| r.mse_to_source.is_finite())
            .map(|r| (r.iter as f64, r.mse_to_source))
            .collect()
    };
    let (mut x_max, mut y_max) = (1.0f64, 0.0f64);
    for log in logs.iter().flatten() {
        for (x, y) in points(log) {
            x_max = x_max.max(x);
            y_max = y_max.max(y);
        }
    }
    if y_max <= 0.0 {
        y_max = 1.0;
    }
    let (x_span, y_span) = ((w as i64 - 2 * pad) as f64, (h as i64 - 2 * pad) as f64);
    let map = |(x, y): (f64, f64)| {
        (
            pad + (x / x_max * x_span).round() as i64,
            h as i64 - pad - (y / y_max * y_span).round() as i64,
        )
    };
    let axis = Rgb([0, 0, 0]);
    line(&mut img, (pad, pad), (pad, h as i64 - pad), axis);
    line(&mut img, (pad, h as i64 - pad), (w as i64 - pad, h as i64 - pad), axis);
    for (i, log) in logs.iter().enumerate() {
        let Some(log) = log else { continue };
        let pts = points(log);
        for pair in pts.windows(2) {
            line(&mut img, map(pair[0]), map(pair[1]), palette(i));
        }
        if let [only] = pts[..] {
            let (x, y) = map(only);
            line(&mut img, (x - 1, y), (x + 1, y), palette(i));
        }
    }
    img
}

pub fn png_bytes(img: &RgbImage) -> crate::Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}
