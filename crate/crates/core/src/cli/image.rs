//! PNG output for canvases, overlays and tile grids.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use super::CliError;

/// Part colours in depth-first order; later parts cycle through the tail.
pub const PALETTE: [[u8; 3]; 8] = [
    [40, 90, 230],   // blue
    [220, 40, 40],   // red
    [40, 170, 60],   // green
    [245, 140, 20],  // orange
    [150, 60, 200],  // purple
    [20, 180, 190],  // cyan
    [200, 60, 150],  // magenta
    [130, 110, 40],  // olive
];

pub const COLOR_NAMES: [&str; 8] = ["blue", "red", "green", "orange", "purple", "cyan", "magenta", "olive"];

pub fn color(i: usize) -> [u8; 3] {
    PALETTE[i % PALETTE.len()]
}

pub fn color_name(i: usize) -> &'static str {
    COLOR_NAMES[i % COLOR_NAMES.len()]
}

fn byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

fn write(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<(), CliError> {
    let io = |e: String| CliError::Io(format!("{}: {e}", path.display()));
    let file = File::create(path).map_err(|e| io(e.to_string()))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| io(e.to_string()))?;
    w.write_image_data(data).map_err(|e| io(e.to_string()))?;
    w.finish().map_err(|e| io(e.to_string()))
}

fn upscale<P: Copy>(pixels: &[P], size: usize, zoom: usize) -> Vec<P> {
    let big = size * zoom;
    (0..big * big).map(|i| pixels[(i / big / zoom) * size + (i % big) / zoom]).collect()
}

/// Grayscale square image from values in `[0,1]` (clamped).
pub fn write_gray(path: &Path, values: &[f64], size: usize, zoom: usize) -> Result<(), CliError> {
    let px: Vec<u8> = values.iter().map(|&v| byte(v)).collect();
    write(path, size * zoom, size * zoom, png::ColorType::Grayscale, &upscale(&px, size, zoom))
}

/// Colours each pixel by the part that contributes most to it, scaled by
/// the clamped total intensity. `layers[k]` is part `k` warped onto the
/// canvas.
pub fn overlay(layers: &[Vec<f64>], size: usize) -> Vec<[u8; 3]> {
    (0..size * size)
        .map(|i| {
            let total: f64 = layers.iter().map(|l| l[i].max(0.0)).sum();
            let Some(best) = (0..layers.len()).max_by(|&a, &b| layers[a][i].total_cmp(&layers[b][i])) else {
                return [0; 3];
            };
            if total < 1.0 / 255.0 {
                return [0; 3];
            }
            let k = total.min(1.0);
            color(best).map(|c| (c as f64 * k + 0.5).floor() as u8)
        })
        .collect()
}

pub fn write_rgb(path: &Path, pixels: &[[u8; 3]], size: usize, zoom: usize) -> Result<(), CliError> {
    let flat: Vec<u8> = upscale(pixels, size, zoom).into_iter().flatten().collect();
    write(path, size * zoom, size * zoom, png::ColorType::Rgb, &flat)
}

/// `rows × cols` grid of square grayscale tiles separated by a one-pixel
/// mid-gray gutter. `tiles` is row-major.
pub fn write_grid(path: &Path, tiles: &[Vec<f64>], tile: usize, rows: usize, cols: usize, zoom: usize) -> Result<(), CliError> {
    let t = tile * zoom;
    let (w, h) = (cols * (t + 1) - 1, rows * (t + 1) - 1);
    let mut px = vec![128u8; w * h];
    for (k, values) in tiles.iter().enumerate() {
        let big = upscale(&values.iter().map(|&v| byte(v)).collect::<Vec<_>>(), tile, zoom);
        let (r0, c0) = ((k / cols) * (t + 1), (k % cols) * (t + 1));
        for r in 0..t {
            px[(r0 + r) * w + c0..(r0 + r) * w + c0 + t].copy_from_slice(&big[r * t..(r + 1) * t]);
        }
    }
    write(path, w, h, png::ColorType::Grayscale, &px)
}
