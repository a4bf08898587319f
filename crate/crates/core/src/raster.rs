//! Dense raster containers and their on-disk formats.
//!
//! Three formats are supported, all stable byte-for-byte:
//!
//! ```text
//! mask:     "MSK1 <h> <w> <c>\n" + h*w u8 class indices
//! scores:   "SCR1 <h> <w> <c>\n" + h*w*c f32 little-endian, pixel-major
//! manifest: one "scores_path<TAB>mask_path" per line, '#' starts a comment
//! ```
//!
//! Class indices are 0-based. In memory, scores are kept as `f64`; files use `f32`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MASK_MAGIC: &str = "MSK1";
pub const SCORE_MAGIC: &str = "SCR1";

const MAX_HEADER_LEN: usize = 128;

/// Per-pixel ground-truth class indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, classes: usize, data: Vec<u8>) -> Result<Self> {
        if !(2..=256).contains(&classes) {
            return Err(Error::InvalidDimensions(format!(
                "class count must be in 2..=256, got {classes}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::InvalidDimensions(format!(
                "{height}x{width} mask needs {} labels, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some((pixel, &value)) = data.iter().enumerate().find(|(_, &v)| v as usize >= classes) {
            return Err(Error::ClassOutOfRange { pixel, value: value as usize, classes });
        }
        Ok(Self { height, width, classes, data })
    }

    /// A single-row mask, convenient for flat pixel batches.
    pub fn from_labels(classes: usize, data: Vec<u8>) -> Result<Self> {
        let n = data.len();
        Self::new(1, n, classes, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Label of pixel `i` as a class index.
    pub fn label(&self, i: usize) -> usize {
        self.data[i] as usize
    }

    /// Per-class pixel counts.
    pub fn class_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.classes];
        for &v in &self.data {
            counts[v as usize] += 1;
        }
        counts
    }

    /// Stacks masks of equal width and class count vertically.
    pub fn concat(masks: &[&LabelMask]) -> Result<Self> {
        let first = masks.first().ok_or_else(|| Error::Empty("no masks to concatenate".into()))?;
        let mut data = Vec::with_capacity(masks.iter().map(|m| m.len()).sum());
        let mut height = 0;
        for m in masks {
            if m.width != first.width || m.classes != first.classes {
                return Err(Error::ShapeMismatch(format!(
                    "cannot stack {}x{} (c={}) onto width {} (c={})",
                    m.height, m.width, m.classes, first.width, first.classes
                )));
            }
            height += m.height;
            data.extend_from_slice(&m.data);
        }
        Ok(Self { height, width: first.width, classes: first.classes, data })
    }
}

/// Argmax predictions; same layout as [`LabelMask`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredMask(LabelMask);

impl PredMask {
    pub fn new(mask: LabelMask) -> Self {
        PredMask(mask)
    }

    pub fn as_mask(&self) -> &LabelMask {
        &self.0
    }

    pub fn into_mask(self) -> LabelMask {
        self.0
    }

    pub fn data(&self) -> &[u8] {
        self.0.data()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn classes(&self) -> usize {
        self.0.classes()
    }
}

/// Per-pixel, per-class real scores; pixel-major, then class.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<f64>,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if classes == 0 {
            return Err(Error::InvalidDimensions("score map needs at least one channel".into()));
        }
        if data.len() != height * width * classes {
            return Err(Error::InvalidDimensions(format!(
                "{height}x{width}x{classes} score map needs {} values, got {}",
                height * width * classes,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { height, width, classes, data })
    }

    /// A single-row map of `pixels` pixels.
    pub fn from_pixels(classes: usize, data: Vec<f64>) -> Result<Self> {
        if classes == 0 || data.len() % classes != 0 {
            return Err(Error::InvalidDimensions(format!(
                "{} values do not split into {classes} channels",
                data.len()
            )));
        }
        let n = data.len() / classes;
        Self::new(1, n, classes, data)
    }

    pub fn zeros(height: usize, width: usize, classes: usize) -> Self {
        Self { height, width, classes, data: vec![0.0; height * width * classes] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Number of pixels.
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.classes)
    }

    /// Same dimensions as `mask` (height, width, classes).
    pub fn check_paired(&self, mask: &LabelMask) -> Result<()> {
        if self.height != mask.height() || self.width != mask.width() || self.classes != mask.classes() {
            return Err(Error::ShapeMismatch(format!(
                "scores {}x{}x{} vs mask {}x{}x{}",
                self.height,
                self.width,
                self.classes,
                mask.height(),
                mask.width(),
                mask.classes()
            )));
        }
        Ok(())
    }

    /// Same pixel count and class count as `mask`, ignoring layout.
    pub fn check_pixels(&self, mask: &LabelMask) -> Result<()> {
        if self.pixels() != mask.len() || self.classes != mask.classes() {
            return Err(Error::ShapeMismatch(format!(
                "{} pixels x {} classes vs mask of {} pixels x {} classes",
                self.pixels(),
                self.classes,
                mask.len(),
                mask.classes()
            )));
        }
        Ok(())
    }

    /// Stacks maps of equal width and channel count vertically.
    pub fn concat(maps: &[&ScoreMap]) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::Empty("no score maps to concatenate".into()))?;
        let mut data = Vec::with_capacity(maps.iter().map(|m| m.data.len()).sum());
        let mut height = 0;
        for m in maps {
            if m.width != first.width || m.classes != first.classes {
                return Err(Error::ShapeMismatch("score maps differ in width or channels".into()));
            }
            height += m.height;
            data.extend_from_slice(&m.data);
        }
        Ok(Self { height, width: first.width, classes: first.classes, data })
    }
}

/// Index of the largest score in `row`; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn argmax_predict(scores: &ScoreMap) -> PredMask {
    let data = scores.rows().map(|row| argmax(row) as u8).collect();
    PredMask(LabelMask {
        height: scores.height,
        width: scores.width,
        classes: scores.classes,
        data,
    })
}

fn parse_header<'a>(bytes: &'a [u8], magic: &str) -> Result<([usize; 3], &'a [u8])> {
    let end = bytes
        .iter()
        .take(MAX_HEADER_LEN)
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::MalformedHeader("no header line terminator".into()))?;
    let line = std::str::from_utf8(&bytes[..end])
        .map_err(|_| Error::MalformedHeader("header is not ASCII".into()))?;
    let mut fields = line.split(' ');
    if fields.next() != Some(magic) {
        return Err(Error::MalformedHeader(format!("expected magic {magic}, got {line:?}")));
    }
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        let f = fields
            .next()
            .ok_or_else(|| Error::MalformedHeader(format!("missing dimension in {line:?}")))?;
        *d = f
            .parse()
            .map_err(|_| Error::MalformedHeader(format!("bad dimension {f:?} in {line:?}")))?;
    }
    if fields.next().is_some() {
        return Err(Error::MalformedHeader(format!("trailing fields in {line:?}")));
    }
    Ok((dims, &bytes[end + 1..]))
}

fn check_payload(payload: &[u8], expected: usize) -> Result<()> {
    match payload.len() {
        n if n < expected => Err(Error::Truncated { expected, found: n }),
        n if n > expected => Err(Error::MalformedHeader(format!(
            "{} trailing bytes after {expected}-byte payload",
            n - expected
        ))),
        _ => Ok(()),
    }
}

pub fn encode_mask(mask: &LabelMask) -> Vec<u8> {
    let mut out = format!("{MASK_MAGIC} {} {} {}\n", mask.height, mask.width, mask.classes).into_bytes();
    out.extend_from_slice(&mask.data);
    out
}

/// Parses a mask file image, validating labels against `classes`.
pub fn decode_mask(bytes: &[u8], classes: usize) -> Result<LabelMask> {
    let ([h, w, c], payload) = parse_header(bytes, MASK_MAGIC)?;
    if c != classes {
        return Err(Error::MalformedHeader(format!("header declares {c} classes, expected {classes}")));
    }
    check_payload(payload, h * w)?;
    LabelMask::new(h, w, c, payload.to_vec())
}

/// Reads only the `(h, w, c)` header of a mask file.
pub fn read_mask_header(path: &Path) -> Result<[usize; 3]> {
    use std::io::Read;
    let mut buf = Vec::with_capacity(MAX_HEADER_LEN);
    fs::File::open(path)
        .and_then(|f| f.take(MAX_HEADER_LEN as u64).read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    parse_header(&buf, MASK_MAGIC).map(|(d, _)| d)
}

pub fn load_mask(path: impl AsRef<Path>, classes: usize) -> Result<LabelMask> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mask(&bytes, classes)
}

pub fn save_mask(mask: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if mask.height == 0 || mask.width == 0 {
        return Err(Error::InvalidDimensions("refusing to write an empty mask".into()));
    }
    fs::write(path, encode_mask(mask)).map_err(|e| Error::io(path, e))
}

pub fn encode_scores(scores: &ScoreMap) -> Vec<u8> {
    let mut out = format!("{SCORE_MAGIC} {} {} {}\n", scores.height, scores.width, scores.classes).into_bytes();
    out.reserve(scores.data.len() * 4);
    for &v in &scores.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_scores(bytes: &[u8]) -> Result<ScoreMap> {
    let ([h, w, c], payload) = parse_header(bytes, SCORE_MAGIC)?;
    check_payload(payload, h * w * c * 4)?;
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    ScoreMap::new(h, w, c, data)
}

pub fn load_scores(path: impl AsRef<Path>) -> Result<ScoreMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_scores(&bytes)
}

/// Writes `scores` as `f32`. Values that are not exactly representable in
/// `f32` are rounded; everything loaded from a score file round-trips exactly.
pub fn save_scores(scores: &ScoreMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if scores.height == 0 || scores.width == 0 {
        return Err(Error::InvalidDimensions("refusing to write an empty score map".into()));
    }
    if let Some(i) = scores.data.iter().position(|v| !(*v as f32).is_finite()) {
        return Err(Error::NonFinite(i));
    }
    fs::write(path, encode_scores(scores)).map_err(|e| Error::io(path, e))
}

/// Ordered (scores-or-features, mask) file pairs sharing class count and image size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<(PathBuf, PathBuf)>,
    pub classes: usize,
    pub pixels_per_image: usize,
}

impl DatasetManifest {
    /// Parses manifest text. Relative paths are resolved against `base`.
    pub fn parse_entries(text: &str, base: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
        let mut entries = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Manifest {
                    line: idx + 1,
                    reason: "expected exactly two tab-separated paths".into(),
                });
            };
            if a.is_empty() || b.is_empty() {
                return Err(Error::Manifest { line: idx + 1, reason: "empty path".into() });
            }
            entries.push((base.join(a), base.join(b)));
        }
        Ok(entries)
    }

    /// Reads a manifest and checks every mask header for a common class count and size.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        let entries = Self::parse_entries(&text, base)?;
        Self::from_entries(entries)
    }

    pub fn from_entries(entries: Vec<(PathBuf, PathBuf)>) -> Result<Self> {
        let first = entries.first().ok_or_else(|| Error::Empty("manifest has no entries".into()))?;
        let [h, w, c] = read_mask_header(&first.1)?;
        for (_, mask) in &entries[1..] {
            let [h2, w2, c2] = read_mask_header(mask)?;
            if h2 * w2 != h * w || c2 != c {
                return Err(Error::ShapeMismatch(format!(
                    "{} is {h2}x{w2} (c={c2}), manifest started with {h}x{w} (c={c})",
                    mask.display()
                )));
            }
        }
        Ok(Self { entries, classes: c, pixels_per_image: h * w })
    }

    pub fn load_masks(&self) -> Result<Vec<LabelMask>> {
        self.entries.iter().map(|(_, m)| load_mask(m, self.classes)).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Writes manifest lines with paths relative to the manifest's directory when possible.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[(PathBuf, PathBuf)]) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
    let mut text = String::from("# scores_path\tmask_path\n");
    for (a, b) in entries {
        text.push_str(&format!("{}\t{}\n", rel(a), rel(b)));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
