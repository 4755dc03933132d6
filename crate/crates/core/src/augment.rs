//! Training-time augmentation: random zoom crop, horizontal flip, head-box
//! jitter, and photometric edits (color jitter, grayscale, autocontrast,
//! sharpness). Geometric transforms move the image and its annotations
//! together; photometric ones touch pixels only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AnnotationRecord, BBox};
use crate::{Error, Result};

/// Smallest bbox edge the jitter is allowed to leave behind.
const MIN_EDGE: f64 = 1e-3;

/// Switches and ranges for the augmentation pipeline. Range fields are
/// half-widths around the identity value unless stated otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugConfig {
    pub enable_crop: bool,
    pub enable_hflip: bool,
    pub enable_bbox_jitter: bool,
    pub enable_photometric: bool,
    /// Cropped area as a fraction of the original, aspect preserved.
    pub crop_scale_range: [f64; 2],
    /// Edge perturbation as a fraction of bbox width/height.
    pub jitter_frac: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue shift in turns of the color wheel.
    pub hue: f64,
    pub grayscale_prob: f64,
    pub autocontrast_prob: f64,
    /// Sharpness blend factor; 1 is identity, below smooths, above sharpens.
    pub sharpness_range: [f64; 2],
    pub rng_seed: u64,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            enable_crop: true,
            enable_hflip: true,
            enable_bbox_jitter: true,
            enable_photometric: true,
            crop_scale_range: [0.5, 1.0],
            jitter_frac: 0.1,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.05,
            grayscale_prob: 0.1,
            autocontrast_prob: 0.2,
            sharpness_range: [0.5, 2.0],
            rng_seed: 0,
        }
    }
}

impl AugConfig {
    /// Everything disabled; the pipeline becomes the identity.
    pub fn off() -> Self {
        AugConfig {
            enable_crop: false,
            enable_hflip: false,
            enable_bbox_jitter: false,
            enable_photometric: false,
            ..AugConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.crop_scale_range;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::config(format!(
                "crop_scale_range [{lo}, {hi}] must satisfy 0 < lo <= hi <= 1"
            )));
        }
        for (name, p) in [
            ("grayscale_prob", self.grayscale_prob),
            ("autocontrast_prob", self.autocontrast_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} {p} outside [0, 1]")));
            }
        }
        for (name, v) in [
            ("jitter_frac", self.jitter_frac),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("hue", self.hue),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{name} {v} must be >= 0")));
            }
        }
        let [slo, shi] = self.sharpness_range;
        if !(0.0 <= slo && slo <= shi) {
            return Err(Error::config(format!(
                "sharpness_range [{slo}, {shi}] must satisfy 0 <= lo <= hi"
            )));
        }
        Ok(())
    }
}

/// An 8-bit RGB image with the annotations that must move with it.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub width: usize,
    pub height: usize,
    /// Row-major interleaved RGB, `(y * width + x) * 3 + channel`.
    pub pixels: Vec<u8>,
    pub bbox: BBox,
    pub gaze_point: Option<(f64, f64)>,
    pub in_frame: bool,
}

impl AnnotatedImage {
    pub fn new(
        width: usize,
        height: usize,
        pixels: Vec<u8>,
        bbox: BBox,
        gaze_point: Option<(f64, f64)>,
        in_frame: bool,
    ) -> Result<Self> {
        let img = AnnotatedImage {
            width,
            height,
            pixels,
            bbox,
            gaze_point,
            in_frame,
        };
        img.validate()?;
        Ok(img)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("image must have nonzero dimensions"));
        }
        if self.pixels.len() != self.width * self.height * 3 {
            return Err(Error::ShapeMismatch {
                op: "annotated_image",
                lhs: vec![self.pixels.len()],
                rhs: vec![self.height, self.width, 3],
            });
        }
        let b = &self.bbox;
        if !(0.0 <= b.x && b.x + b.w <= 1.0 && 0.0 <= b.y && b.y + b.h <= 1.0)
            || b.w <= 0.0
            || b.h <= 0.0
        {
            return Err(Error::config(format!(
                "bbox ({}, {}, {}, {}) outside the unit square",
                b.x, b.y, b.w, b.h
            )));
        }
        if self.in_frame != self.gaze_point.is_some() {
            return Err(Error::config(
                "gaze point must be present exactly for in-frame samples",
            ));
        }
        if let Some((x, y)) = self.gaze_point {
            if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                return Err(Error::config(format!("gaze ({x}, {y}) outside [0,1]²")));
            }
        }
        Ok(())
    }
}

// ── Geometric transforms ────────────────────────────────────────────────

/// Picks a square crop window (normalized origin plus side) of the sampled
/// area fraction that contains the bbox and, when present, the gaze point.
/// `None` after 10 rejected scales.
fn sample_window<R: Rng>(
    bbox: &BBox,
    gaze: Option<(f64, f64)>,
    scale_range: [f64; 2],
    rng: &mut R,
) -> Option<(f64, f64, f64)> {
    for _ in 0..10 {
        let scale = rng.random_range(scale_range[0]..=scale_range[1]);
        let side = scale.sqrt();
        let (mut min_x, mut min_y) = (bbox.x, bbox.y);
        let (mut max_x, mut max_y) = (bbox.x + bbox.w, bbox.y + bbox.h);
        if let Some((gx, gy)) = gaze {
            min_x = min_x.min(gx);
            min_y = min_y.min(gy);
            max_x = max_x.max(gx);
            max_y = max_y.max(gy);
        }
        let lo_x = (max_x - side).max(0.0);
        let hi_x = min_x.min(1.0 - side);
        let lo_y = (max_y - side).max(0.0);
        let hi_y = min_y.min(1.0 - side);
        if lo_x > hi_x || lo_y > hi_y {
            continue;
        }
        let wx = rng.random_range(lo_x..=hi_x);
        let wy = rng.random_range(lo_y..=hi_y);
        return Some((wx, wy, side));
    }
    None
}

fn remap_bbox(bbox: &BBox, wx: f64, wy: f64, side: f64) -> BBox {
    BBox {
        x: (bbox.x - wx) / side,
        y: (bbox.y - wy) / side,
        w: bbox.w / side,
        h: bbox.h / side,
    }
}

fn remap_point(p: (f64, f64), wx: f64, wy: f64, side: f64) -> (f64, f64) {
    ((p.0 - wx) / side, (p.1 - wy) / side)
}

fn bilinear_u8(pixels: &[u8], w: usize, h: usize, x: f64, y: f64, ch: usize) -> f64 {
    let at = |xi: usize, yi: usize| pixels[(yi * w + xi) * 3 + ch] as f64;
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
    let bot = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Crops the normalized window `(wx, wy)` to `(wx+side, wy+side)`, resizes
/// the crop back to the source resolution, and remaps the annotations.
pub fn apply_crop(s: &AnnotatedImage, wx: f64, wy: f64, side: f64) -> Result<AnnotatedImage> {
    if !(side > 0.0 && side <= 1.0 + 1e-12)
        || wx < -1e-12
        || wy < -1e-12
        || wx + side > 1.0 + 1e-9
        || wy + side > 1.0 + 1e-9
    {
        return Err(Error::config(format!(
            "crop window ({wx}, {wy}, side {side}) leaves the unit square"
        )));
    }
    let (w, h) = (s.width, s.height);
    let mut pixels = vec![0u8; w * h * 3];
    for oy in 0..h {
        let sy = (wy + (oy as f64 + 0.5) / h as f64 * side) * h as f64 - 0.5;
        for ox in 0..w {
            let sx = (wx + (ox as f64 + 0.5) / w as f64 * side) * w as f64 - 0.5;
            for ch in 0..3 {
                let v = bilinear_u8(&s.pixels, w, h, sx, sy, ch);
                pixels[(oy * w + ox) * 3 + ch] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(AnnotatedImage {
        width: w,
        height: h,
        pixels,
        bbox: remap_bbox(&s.bbox, wx, wy, side),
        gaze_point: s.gaze_point.map(|p| remap_point(p, wx, wy, side)),
        in_frame: s.in_frame,
    })
}

/// Zooms into a random sub-window whose area fraction is drawn from
/// `scale_range`, keeping the bbox and gaze point fully inside. Falls back
/// to the identity when no containing window fits after 10 attempts.
pub fn random_crop<R: Rng>(
    s: &AnnotatedImage,
    scale_range: [f64; 2],
    rng: &mut R,
) -> Result<AnnotatedImage> {
    match sample_window(&s.bbox, s.gaze_point, scale_range, rng) {
        Some((wx, wy, side)) => apply_crop(s, wx, wy, side),
        None => Ok(s.clone()),
    }
}

fn flip_bbox(b: &BBox) -> BBox {
    BBox {
        x: 1.0 - (b.x + b.w),
        y: b.y,
        w: b.w,
        h: b.h,
    }
}

/// Mirrors pixels left-right and maps every x coordinate to `1 - x`.
pub fn hflip(s: &AnnotatedImage) -> AnnotatedImage {
    let (w, h) = (s.width, s.height);
    let mut pixels = vec![0u8; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let src = (y * w + (w - 1 - x)) * 3;
            let dst = (y * w + x) * 3;
            pixels[dst..dst + 3].copy_from_slice(&s.pixels[src..src + 3]);
        }
    }
    AnnotatedImage {
        width: w,
        height: h,
        pixels,
        bbox: flip_bbox(&s.bbox),
        gaze_point: s.gaze_point.map(|(x, y)| (1.0 - x, y)),
        in_frame: s.in_frame,
    }
}

/// Moves each bbox edge by up to `jitter_frac` of the bbox size, clamped to
/// the unit square. An axis that would collapse below a minimum edge keeps
/// its original bounds. Gaze point and label never change.
fn jitter_bbox<R: Rng>(bbox: &BBox, jitter_frac: f64, rng: &mut R) -> BBox {
    if jitter_frac == 0.0 {
        return *bbox;
    }
    let (jw, jh) = (jitter_frac * bbox.w, jitter_frac * bbox.h);
    // Draw order: left, right, top, bottom.
    let x0 = (bbox.x + rng.random_range(-jw..=jw)).clamp(0.0, 1.0);
    let x1 = (bbox.x + bbox.w + rng.random_range(-jw..=jw)).clamp(0.0, 1.0);
    let y0 = (bbox.y + rng.random_range(-jh..=jh)).clamp(0.0, 1.0);
    let y1 = (bbox.y + bbox.h + rng.random_range(-jh..=jh)).clamp(0.0, 1.0);
    let (x0, x1) = if x1 - x0 < MIN_EDGE {
        (bbox.x, bbox.x + bbox.w)
    } else {
        (x0, x1)
    };
    let (y0, y1) = if y1 - y0 < MIN_EDGE {
        (bbox.y, bbox.y + bbox.h)
    } else {
        (y0, y1)
    };
    BBox {
        x: x0,
        y: y0,
        w: x1 - x0,
        h: y1 - y0,
    }
}

pub fn bbox_jitter<R: Rng>(
    s: &AnnotatedImage,
    jitter_frac: f64,
    rng: &mut R,
) -> Result<AnnotatedImage> {
    if jitter_frac < 0.0 {
        return Err(Error::config(format!(
            "jitter_frac {jitter_frac} must be >= 0"
        )));
    }
    let mut out = s.clone();
    out.bbox = jitter_bbox(&s.bbox, jitter_frac, rng);
    Ok(out)
}

// ── Photometric transforms ──────────────────────────────────────────────

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

/// Color jitter, random grayscale, random autocontrast, random sharpness,
/// in that order. Stages whose config is the identity value draw no
/// randomness and change nothing; pixel math runs in f64 and rounds to u8
/// once at the end. Annotations pass through untouched.
pub fn photometric<R: Rng>(
    s: &AnnotatedImage,
    cfg: &AugConfig,
    rng: &mut R,
) -> Result<AnnotatedImage> {
    cfg.validate()?;
    let (w, h) = (s.width, s.height);
    let mut px: Vec<f64> = s.pixels.iter().map(|&v| v as f64).collect();
    let n = w * h;

    if cfg.brightness > 0.0 {
        let f = 1.0 + rng.random_range(-cfg.brightness..=cfg.brightness);
        for v in &mut px {
            *v *= f;
        }
    }
    if cfg.contrast > 0.0 {
        let f = 1.0 + rng.random_range(-cfg.contrast..=cfg.contrast);
        let mean = (0..n)
            .map(|i| luma(px[3 * i], px[3 * i + 1], px[3 * i + 2]))
            .sum::<f64>()
            / n as f64;
        for v in &mut px {
            *v = mean + (*v - mean) * f;
        }
    }
    if cfg.saturation > 0.0 {
        let f = 1.0 + rng.random_range(-cfg.saturation..=cfg.saturation);
        for i in 0..n {
            let l = luma(px[3 * i], px[3 * i + 1], px[3 * i + 2]);
            for c in 0..3 {
                px[3 * i + c] = l + (px[3 * i + c] - l) * f;
            }
        }
    }
    if cfg.hue > 0.0 {
        let shift = rng.random_range(-cfg.hue..=cfg.hue);
        for i in 0..n {
            let (hh, ss, vv) = rgb_to_hsv(px[3 * i], px[3 * i + 1], px[3 * i + 2]);
            let (r, g, b) = hsv_to_rgb(hh + shift, ss, vv);
            px[3 * i] = r;
            px[3 * i + 1] = g;
            px[3 * i + 2] = b;
        }
    }
    if cfg.grayscale_prob > 0.0 && rng.random_bool(cfg.grayscale_prob) {
        for i in 0..n {
            let l = luma(px[3 * i], px[3 * i + 1], px[3 * i + 2]);
            px[3 * i..3 * i + 3].fill(l);
        }
    }
    if cfg.autocontrast_prob > 0.0 && rng.random_bool(cfg.autocontrast_prob) {
        for c in 0..3 {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for i in 0..n {
                lo = lo.min(px[3 * i + c]);
                hi = hi.max(px[3 * i + c]);
            }
            if hi > lo {
                for i in 0..n {
                    px[3 * i + c] = (px[3 * i + c] - lo) * 255.0 / (hi - lo);
                }
            }
        }
    }
    if cfg.sharpness_range != [1.0, 1.0] {
        let f = if cfg.sharpness_range[0] == cfg.sharpness_range[1] {
            cfg.sharpness_range[0]
        } else {
            rng.random_range(cfg.sharpness_range[0]..=cfg.sharpness_range[1])
        };
        if f != 1.0 && w >= 3 && h >= 3 {
            // 3x3 smoothing kernel, center weight 5, total 13; border pixels
            // stay as they are.
            let orig = px.clone();
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    for c in 0..3 {
                        let mut acc = 0.0;
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let weight = if (dy, dx) == (1, 1) { 5.0 } else { 1.0 };
                                acc += weight * orig[((y + dy - 1) * w + (x + dx - 1)) * 3 + c];
                            }
                        }
                        let smooth = acc / 13.0;
                        px[(y * w + x) * 3 + c] = smooth + (orig[(y * w + x) * 3 + c] - smooth) * f;
                    }
                }
            }
        }
    }

    let pixels = px
        .into_iter()
        .map(|v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    Ok(AnnotatedImage {
        pixels,
        ..s.clone()
    })
}

// ── Pipeline ────────────────────────────────────────────────────────────

/// Full augmentation chain: crop, coin-flip mirror, bbox jitter, then
/// photometric edits, each gated by its enable flag. Deterministic given
/// the RNG state; with every flag off it returns the sample unchanged.
pub fn pipeline<R: Rng>(s: &AnnotatedImage, cfg: &AugConfig, rng: &mut R) -> Result<AnnotatedImage> {
    cfg.validate()?;
    s.validate()?;
    let mut out = s.clone();
    if cfg.enable_crop {
        out = random_crop(&out, cfg.crop_scale_range, rng)?;
    }
    if cfg.enable_hflip && rng.random_bool(0.5) {
        out = hflip(&out);
    }
    if cfg.enable_bbox_jitter {
        out = bbox_jitter(&out, cfg.jitter_frac, rng)?;
    }
    if cfg.enable_photometric {
        out = photometric(&out, cfg, rng)?;
    }
    Ok(out)
}

/// The geometric part of the pipeline applied to a bare annotation record,
/// for pipelines whose features come from an encoder rather than stored
/// pixels. Photometric stages do not apply without pixels and are skipped.
pub fn augment_record<R: Rng>(
    rec: &AnnotationRecord,
    cfg: &AugConfig,
    rng: &mut R,
) -> Result<AnnotationRecord> {
    cfg.validate()?;
    rec.validate()?;
    let mut bbox = rec.bbox;
    let mut gaze = rec.gaze_point.map(|[x, y]| (x, y));

    if cfg.enable_crop {
        if let Some((wx, wy, side)) = sample_window(&bbox, gaze, cfg.crop_scale_range, rng) {
            bbox = remap_bbox(&bbox, wx, wy, side);
            gaze = gaze.map(|p| remap_point(p, wx, wy, side));
        }
    }
    if cfg.enable_hflip && rng.random_bool(0.5) {
        bbox = flip_bbox(&bbox);
        gaze = gaze.map(|(x, y)| (1.0 - x, y));
    }
    if cfg.enable_bbox_jitter {
        bbox = jitter_bbox(&bbox, cfg.jitter_frac, rng);
    }

    Ok(AnnotationRecord {
        bbox,
        gaze_point: gaze.map(|(x, y)| [x, y]),
        ..rec.clone()
    })
}
