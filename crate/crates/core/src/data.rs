//! Annotations, precomputed feature files, ground-truth heatmap targets,
//! and a synthetic encoder that stands in for a frozen image backbone.
//!
//! Annotations are stored one JSON object per line. Features are a small
//! binary container (magic `GMFT`) holding a `[channels, grid, grid]` map
//! of 32-bit floats, widened to f64 in memory.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"GMFT";
pub const FEATURE_VERSION: u32 = 1;

/// Width of the ground-truth Gaussian in heatmap cells.
pub const DEFAULT_TARGET_SIGMA: f64 = 3.0;

/// Axis-aligned head bounding box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

mod int_bool {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(*v as u8)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(serde::de::Error::custom(format!(
                "in_frame must be 0 or 1, got {other}"
            ))),
        }
    }
}

/// One labeled sample: where the head is and where the person looks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub sample_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_path: Option<String>,
    /// Source image width and height in pixels.
    pub image_size: [u32; 2],
    pub bbox: BBox,
    /// Normalized gaze target; present exactly when the target is in frame.
    pub gaze_point: Option<[f64; 2]>,
    #[serde(with = "int_bool")]
    pub in_frame: bool,
}

impl AnnotationRecord {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::config(msg));
        if self.sample_id.is_empty() {
            return fail("sample_id is empty".into());
        }
        if self.image_path.is_none() && self.feature_path.is_none() {
            return fail(format!(
                "{}: neither image_path nor feature_path is set",
                self.sample_id
            ));
        }
        if self.image_size[0] == 0 || self.image_size[1] == 0 {
            return fail(format!("{}: image_size has a zero side", self.sample_id));
        }
        let b = &self.bbox;
        if !(b.area() > 0.0) {
            return fail(format!("{}: bbox area must be > 0", self.sample_id));
        }
        if b.x < 0.0 || b.y < 0.0 || b.x + b.w > 1.0 + 1e-9 || b.y + b.h > 1.0 + 1e-9 {
            return fail(format!("{}: bbox exceeds the unit square", self.sample_id));
        }
        if self.in_frame != self.gaze_point.is_some() {
            return fail(format!(
                "{}: gaze_point must be present exactly when in_frame is 1",
                self.sample_id
            ));
        }
        if let Some([gx, gy]) = self.gaze_point {
            if !(0.0..=1.0).contains(&gx) || !(0.0..=1.0).contains(&gy) {
                return fail(format!(
                    "{}: gaze_point {gx},{gy} outside the unit square",
                    self.sample_id
                ));
            }
        }
        Ok(())
    }
}

/// Reads line-delimited JSON annotations, reporting the first malformed
/// line by number.
pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: AnnotationRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: idx + 1,
                msg: e.to_string(),
            })?;
        record.validate().map_err(|e| Error::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn save_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    for r in records {
        r.validate()?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureHeader {
    /// `[channels, grid_h, grid_w]`.
    pub dims: [usize; 3],
    pub dtype: String,
    /// Producer tag, e.g. `"synthetic"` or an encoder name.
    pub source: String,
}

/// A precomputed encoder output for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub header: FeatureHeader,
    /// Row-major `[channels, grid_h, grid_w]`, widened from f32.
    pub data: Vec<f64>,
}

impl FeatureFile {
    pub fn numel(&self) -> usize {
        self.header.dims.iter().product()
    }

    /// Errors when the stored dims disagree with the model's expectations.
    pub fn check_dims(&self, feature_dim: usize, grid: usize) -> Result<()> {
        if self.header.dims != [feature_dim, grid, grid] {
            return Err(Error::config(format!(
                "feature dims {:?} do not match model config [{feature_dim}, {grid}, {grid}]",
                self.header.dims
            )));
        }
        Ok(())
    }
}

pub fn save_features(path: &Path, f: &FeatureFile) -> Result<()> {
    if f.data.len() != f.numel() {
        return Err(Error::format(format!(
            "feature payload has {} values, dims {:?} require {}",
            f.data.len(),
            f.header.dims,
            f.numel()
        )));
    }
    if f.header.dtype != "f32" {
        return Err(Error::format(format!(
            "unsupported feature dtype {:?}",
            f.header.dtype
        )));
    }
    let header = serde_json::to_vec(&f.header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for &v in &f.data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<FeatureFile> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::format(format!(
            "bad feature file magic {magic:?}, expected {FEATURE_MAGIC:?}"
        )));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != FEATURE_VERSION {
        return Err(Error::format(format!(
            "unsupported feature file version {version}"
        )));
    }
    r.read_exact(&mut word)?;
    let header_len = u32::from_le_bytes(word) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: FeatureHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::format(format!("feature header is not valid JSON: {e}")))?;
    if header.dtype != "f32" {
        return Err(Error::format(format!(
            "unsupported feature dtype {:?}",
            header.dtype
        )));
    }
    let numel: usize = header.dims.iter().product();
    let mut payload = vec![0u8; numel * 4];
    r.read_exact(&mut payload).map_err(|_| {
        Error::format(format!(
            "feature payload truncated: dims {:?} require {numel} values",
            header.dims
        ))
    })?;
    let mut tail = [0u8; 1];
    if r.read(&mut tail)? != 0 {
        return Err(Error::format(
            "feature file has trailing bytes after the payload",
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(FeatureFile { header, data })
}

/// Ground-truth heatmap: an unnormalized Gaussian with peak value 1.0 at
/// the cell center nearest to the gaze point, distances in cell units.
pub fn gaussian_target(gaze: (f64, f64), size: usize, sigma: f64) -> Result<Vec<f64>> {
    let (gx, gy) = gaze;
    if !(0.0..=1.0).contains(&gx) || !(0.0..=1.0).contains(&gy) {
        return Err(Error::config(format!(
            "gaze point ({gx}, {gy}) outside the unit square"
        )));
    }
    if sigma <= 0.0 || size == 0 {
        return Err(Error::config(format!(
            "gaussian_target needs sigma > 0 and size > 0, got sigma={sigma} size={size}"
        )));
    }
    let nearest = |v: f64| ((v * size as f64 - 0.5).round().max(0.0) as usize).min(size - 1);
    let (cx, cy) = (nearest(gx) as f64, nearest(gy) as f64);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut map = vec![0.0; size * size];
    for r in 0..size {
        let dy = r as f64 - cy;
        for c in 0..size {
            let dx = c as f64 - cx;
            map[r * size + c] = (-(dx * dx + dy * dy) * inv).exp();
        }
    }
    Ok(map)
}

/// Shape of the synthetic features and the seed that makes them replayable.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub feature_dim: usize,
    pub grid: usize,
    /// Standard deviation of the filler channels.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            feature_dim: 1024,
            grid: 32,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 4 {
            return Err(Error::config(format!(
                "synthetic features need at least 4 channels for the planted signals, got {}",
                self.feature_dim
            )));
        }
        if self.grid == 0 {
            return Err(Error::config("synthetic grid must be positive"));
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return Err(Error::config(format!(
                "noise_std must be >= 0, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }
}

/// Stable 64-bit FNV-1a, so sample ids hash identically across runs.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Stand-in for a frozen image encoder. The output is deterministic given
/// the record and config: channels 0 and 1 carry the gaze offset from the
/// bbox center, channel 2 flags in/out of frame, channel 3 holds a spatial
/// bump at the gaze position, and the rest is seeded noise keyed on the
/// sample id.
pub fn synthetic_encoder(record: &AnnotationRecord, cfg: &SyntheticConfig) -> Result<FeatureFile> {
    cfg.validate()?;
    record.validate()?;
    let g = cfg.grid;
    let plane = g * g;
    let mut data = vec![0.0f64; cfg.feature_dim * plane];

    let (bcx, bcy) = record.bbox.center();
    let (dx, dy, flag) = match record.gaze_point {
        Some([gx, gy]) => (gx - bcx, gy - bcy, 1.0),
        None => (0.0, 0.0, -1.0),
    };
    data[..plane].fill(dx);
    data[plane..2 * plane].fill(dy);
    data[2 * plane..3 * plane].fill(flag);
    if let Some([gx, gy]) = record.gaze_point {
        let (cx, cy) = (gx * g as f64 - 0.5, gy * g as f64 - 0.5);
        let sigma = 2.0;
        let inv = 1.0 / (2.0 * sigma * sigma);
        for r in 0..g {
            for c in 0..g {
                let (ddx, ddy) = (c as f64 - cx, r as f64 - cy);
                data[3 * plane + r * g + c] = (-(ddx * ddx + ddy * ddy) * inv).exp();
            }
        }
    }

    if cfg.noise_std > 0.0 && cfg.feature_dim > 4 {
        use rand::SeedableRng;
        let mut rng =
            ChaCha8Rng::seed_from_u64(fnv1a(record.sample_id.as_bytes()) ^ cfg.seed);
        let normal = Normal::new(0.0, cfg.noise_std)
            .map_err(|e| Error::numeric(format!("noise distribution: {e}")))?;
        for v in &mut data[4 * plane..] {
            *v = normal.sample(&mut rng) as f32 as f64;
        }
    }

    Ok(FeatureFile {
        header: FeatureHeader {
            dims: [cfg.feature_dim, g, g],
            dtype: "f32".to_string(),
            source: "synthetic".to_string(),
        },
        data,
    })
}

/// Reproducible labeled samples with an exact in-frame/out-of-frame split.
/// `class_balance` is the in-frame fraction.
pub fn synthetic_dataset<R: Rng>(
    n: usize,
    class_balance: f64,
    cfg: &SyntheticConfig,
    rng: &mut R,
) -> Result<Vec<(AnnotationRecord, FeatureFile)>> {
    if n == 0 {
        return Err(Error::config("synthetic dataset size must be positive"));
    }
    if !(0.0 < class_balance && class_balance < 1.0) {
        return Err(Error::config(format!(
            "class_balance must be in (0, 1), got {class_balance}"
        )));
    }
    cfg.validate()?;
    let n_in = ((n as f64) * class_balance).round() as usize;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let in_frame = i < n_in;
        let w = rng.random_range(0.08..0.25);
        let h = rng.random_range(0.08..0.25);
        let x = rng.random_range(0.0..1.0 - w);
        let y = rng.random_range(0.0..1.0 - h);
        let gaze_point = in_frame.then(|| {
            [
                rng.random_range(0.0..=1.0f64),
                rng.random_range(0.0..=1.0f64),
            ]
        });
        let record = AnnotationRecord {
            sample_id: format!("syn-{i:05}"),
            image_path: None,
            feature_path: Some(format!("syn-{i:05}.gmft")),
            image_size: [448, 448],
            bbox: BBox { x, y, w, h },
            gaze_point,
            in_frame,
        };
        let features = synthetic_encoder(&record, cfg)?;
        out.push((record, features));
    }
    Ok(out)
}
