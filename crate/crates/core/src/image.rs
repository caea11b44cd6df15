//! Raster output for 2D projections: graymaps, color-ramped heatmaps and overlays.
//!
//! A projection tensor `[x, y]` is drawn with `x` along the columns and `y`
//! along the rows.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::xai::Projection2D;

const ANCHORS: [(f64, [f64; 3]); 5] = [
    (0.0, [0.0, 0.0, 0.0]),
    (0.25, [84.0, 15.0, 109.0]),
    (0.5, [187.0, 55.0, 84.0]),
    (0.75, [249.0, 142.0, 8.0]),
    (1.0, [252.0, 255.0, 164.0]),
];

/// The fixed 256-entry color ramp (black through purple and orange to pale yellow).
pub fn ramp_table() -> [[u8; 3]; 256] {
    let mut table = [[0u8; 3]; 256];
    for (i, entry) in table.iter_mut().enumerate() {
        let t = i as f64 / 255.0;
        let k = ANCHORS
            .windows(2)
            .position(|w| t <= w[1].0)
            .unwrap_or(ANCHORS.len() - 2);
        let (t0, c0) = ANCHORS[k];
        let (t1, c1) = ANCHORS[k + 1];
        let f = (t - t0) / (t1 - t0);
        for ch in 0..3 {
            entry[ch] = (c0[ch] + f * (c1[ch] - c0[ch])).round() as u8;
        }
    }
    table
}

/// Ramp level of a value in [0, 1]; out-of-range values are clamped.
pub fn level(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [w, h] => Ok((*w, *h)),
        s => Err(Error::Tensor(format!("expected a 2D image, got shape {s:?}"))),
    }
}

/// Row-major 8-bit levels of a 2D tensor whose values lie in [0, 1].
pub fn gray_levels(t: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let (w, h) = dims(t)?;
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            out.push(level(t.data()[x * h + y] as f64));
        }
    }
    Ok((w, h, out))
}

/// Binary portable graymap (P5).
pub fn encode_pgm(t: &Tensor) -> Result<Vec<u8>> {
    let (w, h, px) = gray_levels(t)?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&px);
    Ok(out)
}

pub fn encode_png_rgb(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != width * height * 3 {
        return Err(Error::Tensor(format!(
            "{} bytes for a {width}x{height} RGB image",
            rgb.len()
        )));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Format {
            offset: 0,
            message: e.to_string(),
        })?;
        writer.write_image_data(rgb).map_err(|e| Error::Format {
            offset: 0,
            message: e.to_string(),
        })?;
    }
    Ok(out)
}

/// Heat values in [0, 1] mapped through the color ramp.
pub fn heat_rgb(heat: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let (w, h, levels) = gray_levels(heat)?;
    let table = ramp_table();
    Ok((w, h, levels.iter().flat_map(|&l| table[l as usize]).collect()))
}

/// Min-max scaled base image blended with the ramp color, opacity `alpha · heat`.
pub fn overlay_rgb(p: &Projection2D, alpha: f64) -> Result<(usize, usize, Vec<u8>)> {
    let (w, h) = dims(&p.heat)?;
    if p.base.shape() != p.heat.shape() {
        return Err(Error::Tensor("base and heat extents differ".into()));
    }
    let (lo, hi) = (p.base.min() as f64, p.base.max() as f64);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let table = ramp_table();
    let mut out = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let i = x * h + y;
            let gray = (p.base.data()[i] as f64 - lo) / span * 255.0;
            let heat = (p.heat.data()[i] as f64).clamp(0.0, 1.0);
            let color = table[level(heat) as usize];
            let a = (alpha * heat).clamp(0.0, 1.0);
            for c in color {
                out.push(((1.0 - a) * gray + a * c as f64).round() as u8);
            }
        }
    }
    Ok((w, h, out))
}

/// Nearest-neighbor resize of an RGB raster.
pub fn resize_rgb(w: usize, h: usize, rgb: &[u8], nw: usize, nh: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(nw * nh * 3);
    for y in 0..nh {
        let sy = (y * h / nh).min(h - 1);
        for x in 0..nw {
            let sx = (x * w / nw).min(w - 1);
            let i = (sy * w + sx) * 3;
            out.extend_from_slice(&rgb[i..i + 3]);
        }
    }
    out
}

/// Overlay PNG scaled to `size × size` pixels.
pub fn thumbnail_png(p: &Projection2D, size: usize) -> Result<Vec<u8>> {
    let (w, h, rgb) = overlay_rgb(p, 0.6)?;
    encode_png_rgb(size, size, &resize_rgb(w, h, &rgb, size, size))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `<stem>_heat.pgm`, `<stem>_heat.png` and `<stem>_overlay.png` into `dir`.
pub fn write_projection_images(dir: &Path, stem: &str, p: &Projection2D) -> Result<Vec<std::path::PathBuf>> {
    let pgm = dir.join(format!("{stem}_heat.pgm"));
    write(&pgm, &encode_pgm(&p.heat)?)?;
    let heat = dir.join(format!("{stem}_heat.png"));
    let (w, h, rgb) = heat_rgb(&p.heat)?;
    write(&heat, &encode_png_rgb(w, h, &rgb)?)?;
    let overlay = dir.join(format!("{stem}_overlay.png"));
    let (w, h, rgb) = overlay_rgb(p, 0.6)?;
    write(&overlay, &encode_png_rgb(w, h, &rgb)?)?;
    Ok(vec![pgm, heat, overlay])
}
