//! Sequence sources: a synthetic moving-target generator and loaders for
//! externally computed feature files with OTB-style annotations.
//!
//! File formats:
//! - features: header `# dim=D frames=N`, then one line per frame with `D`
//!   space-separated decimals.
//! - ground truth: one `x,y,w,h` line per frame (top-left corner and size in
//!   pixels), comma or tab separated.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Per-frame network input: features plus the first-frame location hint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameObservation {
    pub features: Vec<f64>,
    /// Ground truth at frame 0 of a sequence, zeros elsewhere.
    pub location_hint: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceData {
    pub name: String,
    pub frames: Vec<FrameObservation>,
    pub ground_truth: Vec<BBox>,
    pub img_w: f64,
    pub img_h: f64,
}

impl SequenceData {
    /// Builds a sequence, setting the location hint from the first ground-truth box.
    pub fn new(
        name: impl Into<String>,
        features: Vec<Vec<f64>>,
        ground_truth: Vec<BBox>,
        img_w: f64,
        img_h: f64,
    ) -> Result<Self> {
        if features.len() != ground_truth.len() {
            return Err(Error::Data(format!(
                "feature rows ({}) and ground-truth rows ({}) differ",
                features.len(),
                ground_truth.len()
            )));
        }
        let frames = features
            .into_iter()
            .map(|f| FrameObservation {
                features: f,
                location_hint: [0.0; 4],
            })
            .collect();
        let mut seq = SequenceData {
            name: name.into(),
            frames,
            ground_truth,
            img_w,
            img_h,
        };
        seq.reset_hint();
        seq.validate()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.frames.first().map_or(0, |f| f.features.len())
    }

    fn reset_hint(&mut self) {
        for f in &mut self.frames {
            f.location_hint = [0.0; 4];
        }
        if let (Some(f), Some(g)) = (self.frames.first_mut(), self.ground_truth.first()) {
            f.location_hint = g.to_array();
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::Data(format!("sequence `{}` is empty", self.name)));
        }
        if self.frames.len() != self.ground_truth.len() {
            return Err(Error::Data(format!(
                "sequence `{}`: {} frames vs {} ground-truth boxes",
                self.name,
                self.frames.len(),
                self.ground_truth.len()
            )));
        }
        if !(self.img_w > 0.0 && self.img_h > 0.0) {
            return Err(Error::Data(format!(
                "sequence `{}`: image size must be positive",
                self.name
            )));
        }
        let d = self.feature_dim();
        for (t, f) in self.frames.iter().enumerate() {
            if f.features.len() != d {
                return Err(Error::dim(format!("features of frame {t}"), d, f.features.len()));
            }
        }
        if let Some(t) = self.ground_truth.iter().position(|g| !g.is_valid_ground_truth()) {
            return Err(Error::Data(format!(
                "sequence `{}`: ground truth at frame {t} is outside [0,1] or has no area",
                self.name
            )));
        }
        Ok(())
    }

    /// Frames `[start, end)` as a standalone sequence, hint re-seeded at its first frame.
    pub fn slice(&self, start: usize, end: usize) -> Result<SequenceData> {
        if start >= end || end > self.len() {
            return Err(Error::Data(format!(
                "invalid frame range {start}..{end} for sequence `{}` of {} frames",
                self.name,
                self.len()
            )));
        }
        let mut out = SequenceData {
            name: self.name.clone(),
            frames: self.frames[start..end].to_vec(),
            ground_truth: self.ground_truth[start..end].to_vec(),
            img_w: self.img_w,
            img_h: self.img_h,
        };
        out.reset_hint();
        Ok(out)
    }
}

/// Synthetic generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Raster resolution; features have `grid * grid` entries.
    pub grid: usize,
    pub seq_len: usize,
    /// Per-frame velocity components are drawn from `[-velocity_max, velocity_max]`.
    pub velocity_max: f64,
    pub size_min: f64,
    pub size_max: f64,
    /// Per-frame change of width and height, reflected at the size range.
    pub size_drift: f64,
    pub noise_std: f64,
    pub distractors: usize,
    pub img_w: f64,
    pub img_h: f64,
    pub seed: u64,
    /// Fixed initial box instead of a random one.
    pub start: Option<BBox>,
    /// Fixed per-frame center velocity instead of a random one.
    pub velocity: Option<[f64; 2]>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            grid: 8,
            seq_len: 30,
            velocity_max: 0.02,
            size_min: 0.2,
            size_max: 0.4,
            size_drift: 0.0,
            noise_std: 0.05,
            distractors: 0,
            img_w: 320.0,
            img_h: 240.0,
            seed: 0,
            start: None,
            velocity: None,
        }
    }
}

impl SynthConfig {
    pub fn feature_dim(&self) -> usize {
        self.grid * self.grid
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid < 4 {
            return Err(Error::config("synth.grid", format!("must be >= 4, got {}", self.grid)));
        }
        if self.seq_len < 2 {
            return Err(Error::config(
                "synth.seq_len",
                format!("must be >= 2, got {}", self.seq_len),
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("synth.noise_std", "must be finite and >= 0"));
        }
        if !(self.velocity_max >= 0.0 && self.velocity_max.is_finite()) {
            return Err(Error::config("synth.velocity_max", "must be finite and >= 0"));
        }
        if !(self.size_min > 0.0 && self.size_min <= self.size_max && self.size_max < 1.0) {
            return Err(Error::config(
                "synth.size_min",
                "need 0 < size_min <= size_max < 1",
            ));
        }
        if !(self.size_drift >= 0.0 && self.size_drift.is_finite()) {
            return Err(Error::config("synth.size_drift", "must be finite and >= 0"));
        }
        if !(self.img_w > 0.0 && self.img_h > 0.0) {
            return Err(Error::config("synth.img_w", "image size must be positive"));
        }
        if let Some(b) = self.start {
            if !b.is_valid_ground_truth() || b.w >= 1.0 || b.h >= 1.0 {
                return Err(Error::config("synth.start", "box must lie inside the unit square"));
            }
        }
        Ok(())
    }
}

/// A rectangle that moves linearly, bounces off the borders and drifts in size.
#[derive(Debug, Clone)]
struct Mover {
    bbox: BBox,
    vel: [f64; 2],
    drift: [f64; 2],
}

impl Mover {
    fn random(rng: &mut ChaCha8Rng, vmax: f64, size: (f64, f64), drift: f64) -> Self {
        let mut draw = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..hi) } else { lo };
        let w = draw(size.0, size.1);
        let h = draw(size.0, size.1);
        let cx = draw(w / 2.0, 1.0 - w / 2.0);
        let cy = draw(h / 2.0, 1.0 - h / 2.0);
        let vx = draw(-vmax, vmax);
        let vy = draw(-vmax, vmax);
        let sx = if draw(0.0, 1.0) < 0.5 { -drift } else { drift };
        let sy = if draw(0.0, 1.0) < 0.5 { -drift } else { drift };
        Mover {
            bbox: BBox::new(cx, cy, w, h),
            vel: [vx, vy],
            drift: [sx, sy],
        }
    }

    fn advance(&mut self, size: (f64, f64)) {
        let b = &mut self.bbox;
        let [dw, dh] = &mut self.drift;
        bounce(&mut b.w, dw, size.0, size.1);
        bounce(&mut b.h, dh, size.0, size.1);
        let [vx, vy] = &mut self.vel;
        bounce(&mut b.cx, vx, b.w / 2.0, 1.0 - b.w / 2.0);
        bounce(&mut b.cy, vy, b.h / 2.0, 1.0 - b.h / 2.0);
    }
}

/// `value += rate`, mirrored back into `[lo, hi]` with the rate reversed on contact.
fn bounce(value: &mut f64, rate: &mut f64, lo: f64, hi: f64) {
    *value += *rate;
    if *value > hi {
        *value = 2.0 * hi - *value;
        *rate = -*rate;
    }
    if *value < lo {
        *value = 2.0 * lo - *value;
        *rate = -*rate;
    }
    *value = value.clamp(lo, hi);
}

/// Target intensity on the raster; distractors are drawn dimmer.
const TARGET_INTENSITY: f64 = 1.0;
const DISTRACTOR_INTENSITY: f64 = 0.5;

/// Area-coverage rasterization of `b` into a `grid x grid` row-major image, max-combined.
fn rasterize(b: &BBox, grid: usize, intensity: f64, out: &mut [f64]) {
    let (l, t, r, btm) = b.edges();
    let cell = 1.0 / grid as f64;
    for row in 0..grid {
        let y0 = row as f64 * cell;
        let oy = (btm.min(y0 + cell) - t.max(y0)).max(0.0);
        if oy == 0.0 {
            continue;
        }
        for col in 0..grid {
            let x0 = col as f64 * cell;
            let ox = (r.min(x0 + cell) - l.max(x0)).max(0.0);
            let v = intensity * ox * oy / (cell * cell);
            let px = &mut out[row * grid + col];
            *px = px.max(v);
        }
    }
}

/// Deterministic synthetic sequence for `(cfg, seed)`.
pub fn generate_sequence(cfg: &SynthConfig, seed: u64) -> Result<SequenceData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = (cfg.size_min, cfg.size_max);
    let mut target = Mover::random(&mut rng, cfg.velocity_max, size, cfg.size_drift);
    if let Some(start) = cfg.start {
        target.bbox = start;
    }
    if let Some(v) = cfg.velocity {
        target.vel = v;
    }
    // Fixed starts may sit outside the random size range.
    let target_size = (
        size.0.min(target.bbox.w.min(target.bbox.h)),
        size.1.max(target.bbox.w.max(target.bbox.h)),
    );
    let distractor_size = (size.0 * 0.5, size.1 * 0.5);
    let mut distractors: Vec<Mover> = (0..cfg.distractors)
        .map(|_| Mover::random(&mut rng, cfg.velocity_max, distractor_size, 0.0))
        .collect();
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::config("synth.noise_std", e.to_string()))?;

    let d = cfg.feature_dim();
    let mut features = Vec::with_capacity(cfg.seq_len);
    let mut ground_truth = Vec::with_capacity(cfg.seq_len);
    for t in 0..cfg.seq_len {
        if t > 0 {
            target.advance(target_size);
            for m in &mut distractors {
                m.advance(distractor_size);
            }
        }
        let mut img = vec![0.0; d];
        for m in &distractors {
            rasterize(&m.bbox, cfg.grid, DISTRACTOR_INTENSITY, &mut img);
        }
        rasterize(&target.bbox, cfg.grid, TARGET_INTENSITY, &mut img);
        if cfg.noise_std > 0.0 {
            for px in &mut img {
                *px = (*px + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        features.push(img);
        ground_truth.push(target.bbox);
    }
    SequenceData::new(format!("synth_{seed:06}"), features, ground_truth, cfg.img_w, cfg.img_h)
}

/// Training prefix and evaluation part of a sequence.
pub fn split_train_eval(seq: &SequenceData, strict: bool) -> Result<(SequenceData, SequenceData)> {
    if seq.len() < 3 {
        return Err(Error::Data(format!(
            "sequence `{}` has {} frames; at least 3 are needed for the train/eval split",
            seq.name,
            seq.len()
        )));
    }
    let cut = seq.len() / 3;
    let train = seq.slice(0, cut)?;
    let eval = if strict {
        seq.slice(cut, seq.len())?
    } else {
        seq.clone()
    };
    Ok((train, eval))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

/// Parses feature-file text into one row per frame.
pub fn parse_features(path: &Path, text: &str) -> Result<Vec<Vec<f64>>> {
    let mut declared: Option<(usize, usize)> = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim_end_matches('\r').trim();
        if line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('#') {
            if declared.is_none() && rows.is_empty() {
                declared = Some(parse_header(path, lineno, header)?);
            }
            continue;
        }
        let row: Vec<f64> = line
            .split_ascii_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(path, lineno, format!("bad feature value `{tok}`")))
            })
            .collect::<Result<_>>()?;
        let expected = declared.map(|(d, _)| d).or(rows.first().map(Vec::len));
        if let Some(d) = expected {
            if row.len() != d {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("expected {d} values, found {}", row.len()),
                ));
            }
        }
        rows.push(row);
    }
    if let Some((_, n)) = declared {
        if n != rows.len() {
            return Err(parse_err(
                path,
                0,
                format!("header declares {n} frames but file has {}", rows.len()),
            ));
        }
    }
    Ok(rows)
}

fn parse_header(path: &Path, lineno: usize, header: &str) -> Result<(usize, usize)> {
    let mut dim = None;
    let mut frames = None;
    for tok in header.split_ascii_whitespace() {
        let (key, value) = tok
            .split_once('=')
            .ok_or_else(|| parse_err(path, lineno, format!("bad header token `{tok}`")))?;
        let value: usize = value
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad header value `{tok}`")))?;
        match key {
            "dim" => dim = Some(value),
            "frames" => frames = Some(value),
            _ => {}
        }
    }
    match (dim, frames) {
        (Some(d), Some(n)) => Ok((d, n)),
        _ => Err(parse_err(path, lineno, "header must be `# dim=D frames=N`")),
    }
}

/// Slack for boxes written from normalized coordinates and read back.
const PIXEL_SLACK: f64 = 1e-6;

/// Parses OTB-style corner-pixel annotations into normalized center boxes.
pub fn parse_ground_truth(path: &Path, text: &str, img_w: f64, img_h: f64) -> Result<Vec<BBox>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim_end_matches('\r').trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split([',', '\t'])
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(path, lineno, format!("bad box value `{}`", tok.trim())))
            })
            .collect::<Result<_>>()?;
        let [x, y, w, h] = vals[..] else {
            return Err(parse_err(
                path,
                lineno,
                format!("expected 4 values x,y,w,h, found {}", vals.len()),
            ));
        };
        if !(w > 0.0 && h > 0.0) {
            return Err(parse_err(path, lineno, "box width and height must be positive"));
        }
        if x < -PIXEL_SLACK
            || y < -PIXEL_SLACK
            || x + w > img_w + PIXEL_SLACK
            || y + h > img_h + PIXEL_SLACK
        {
            return Err(parse_err(
                path,
                lineno,
                format!("box ({x},{y},{w},{h}) lies outside the {img_w}x{img_h} image"),
            ));
        }
        out.push(BBox::new(
            ((x + w / 2.0) / img_w).clamp(0.0, 1.0),
            ((y + h / 2.0) / img_h).clamp(0.0, 1.0),
            (w / img_w).min(1.0),
            (h / img_h).min(1.0),
        ));
    }
    Ok(out)
}

/// Loads a sequence from a feature file and a ground-truth file.
pub fn load_sequence(features_path: &Path, gt_path: &Path, img_w: f64, img_h: f64) -> Result<SequenceData> {
    if !(img_w > 0.0 && img_h > 0.0) {
        return Err(Error::config("img_w", "image size must be positive"));
    }
    let features = parse_features(features_path, &read_text(features_path)?)?;
    let gt = parse_ground_truth(gt_path, &read_text(gt_path)?, img_w, img_h)?;
    if features.len() != gt.len() || features.is_empty() {
        return Err(Error::Data(format!(
            "{} has {} feature rows but {} has {} ground-truth rows",
            features_path.display(),
            features.len(),
            gt_path.display(),
            gt.len()
        )));
    }
    let name = features_path
        .file_name()
        .and_then(|s| s.to_str())
        .map(|s| s.split('.').next().unwrap_or(s).to_string())
        .unwrap_or_else(|| "sequence".into());
    SequenceData::new(name, features, gt, img_w, img_h)
}

pub fn format_features(seq: &SequenceData) -> String {
    let mut s = format!("# dim={} frames={}\n", seq.feature_dim(), seq.len());
    for f in &seq.frames {
        let row: Vec<String> = f.features.iter().map(|v| v.to_string()).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

pub fn format_ground_truth(seq: &SequenceData) -> String {
    let mut s = String::new();
    for g in &seq.ground_truth {
        let x = (g.cx - g.w / 2.0) * seq.img_w;
        let y = (g.cy - g.h / 2.0) * seq.img_h;
        s.push_str(&format!("{},{},{},{}\n", x, y, g.w * seq.img_w, g.h * seq.img_h));
    }
    s
}

/// Paths written by [`write_sequence`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceFiles {
    pub features: PathBuf,
    pub groundtruth: PathBuf,
}

/// Writes `<name>.features.txt` and `<name>.gt.txt` into `dir`.
pub fn write_sequence(seq: &SequenceData, dir: &Path) -> Result<SequenceFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let features = dir.join(format!("{}.features.txt", seq.name));
    let groundtruth = dir.join(format!("{}.gt.txt", seq.name));
    fs::write(&features, format_features(seq)).map_err(|e| Error::io(&features, e))?;
    fs::write(&groundtruth, format_ground_truth(seq)).map_err(|e| Error::io(&groundtruth, e))?;
    Ok(SequenceFiles {
        features,
        groundtruth,
    })
}

/// One manifest entry; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub frames: usize,
    pub dim: usize,
    pub img_w: f64,
    pub img_h: f64,
    pub features: PathBuf,
    pub groundtruth: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub feature_dim: usize,
    pub sequences: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        serde_json::from_str(&text).map_err(|e| parse_err(path, e.line(), e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Loads every listed sequence, resolving paths against `base`.
    pub fn load_all(&self, base: &Path) -> Result<Vec<SequenceData>> {
        self.sequences
            .iter()
            .map(|e| {
                let mut seq = load_sequence(&base.join(&e.features), &base.join(&e.groundtruth), e.img_w, e.img_h)?;
                seq.name = e.name.clone();
                Ok(seq)
            })
            .collect()
    }
}
