//! Deterministic synthetic dataset generator plus the annotation file
//! format.
//!
//! Five procedurally textured patch types stand in for the five trait
//! classes: a blob grid (face), concentric rings (iris), broad horizontal
//! lines (palm), short curved arcs (knuckle), and fine vertical ridges
//! (finger). A finger image is a four-slap: four horizontally adjacent,
//! vertically aligned ridge patches, each with its own ground-truth box.
//!
//! Annotation files are line-delimited text, one record per image:
//!
//! ```text
//! # roidet annotations v1
//! <id>\t<image-path>\t<x1>,<y1>,<x2>,<y2>,<label>[,<score>][;<box>...]
//! ```
//!
//! A record with no boxes has only the first two fields. Prediction files
//! use the same grammar with the score field present. Pixels are stored as
//! binary PGM (P5) files referenced by the per-record path, relative to the
//! annotation file.

use crate::autograd::Tensor;
use crate::boxes::{BBox, TraitClass};
use crate::rng::Rng;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

pub const ANNOTATION_HEADER: &str = "# roidet annotations v1";

#[derive(Debug)]
pub enum SynthError {
    Config(String),
    /// A box could not be placed inside the image after bounded retries.
    Placement(String),
    Parse {
        line: usize,
        msg: String,
    },
    Io(std::io::Error),
}

impl fmt::Display for SynthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthError::Config(m) => write!(f, "bad generator config: {m}"),
            SynthError::Placement(m) => write!(f, "placement failed: {m}"),
            SynthError::Parse { line, msg } => write!(f, "annotation line {line}: {msg}"),
            SynthError::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl std::error::Error for SynthError {}

impl From<std::io::Error> for SynthError {
    fn from(e: std::io::Error) -> Self {
        SynthError::Io(e)
    }
}

/// Grayscale image with ground-truth boxes. Pixel values live in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
    pub boxes: Vec<(BBox, TraitClass)>,
}

impl AnnotatedImage {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 1, self.height, self.width], self.pixels.clone()).unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    /// Square image side when `size_range` is off.
    pub image_size: usize,
    /// Draw each side independently from this range instead.
    pub size_range: Option<(usize, usize)>,
    pub count_per_trait: usize,
    /// Fraction of the free placement range actually used, in [0, 1].
    pub position_jitter: f64,
    /// Relative box-size jitter, e.g. 0.12 for +-12%.
    pub scale_jitter: f64,
    pub noise_amplitude: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            image_size: 96,
            size_range: None,
            count_per_trait: 20,
            position_jitter: 1.0,
            scale_jitter: 0.12,
            noise_amplitude: 0.06,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.image_size < 32 {
            return bad(format!("image_size {} < 32", self.image_size));
        }
        if let Some((lo, hi)) = self.size_range {
            if lo < 32 || hi < lo {
                return bad(format!("size_range ({lo}, {hi}) invalid (min 32)"));
            }
        }
        if self.count_per_trait == 0 {
            return bad("count_per_trait must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.position_jitter) {
            return bad("position_jitter must be in [0, 1]".into());
        }
        if !(0.0..=0.5).contains(&self.scale_jitter) {
            return bad("scale_jitter must be in [0, 0.5]".into());
        }
        if !(0.0..=0.3).contains(&self.noise_amplitude) {
            return bad("noise_amplitude must be in [0, 0.3]".into());
        }
        Ok(())
    }
}

// ── textures ─────────────────────────────────────────────────────────

const TAU: f64 = std::f64::consts::TAU;

/// Texture value at local patch coordinates (u, v); `phase` decorrelates
/// instances of the same class.
fn texture(class: TraitClass, u: f64, v: f64, w: f64, h: f64, phase: f64) -> f64 {
    match class {
        TraitClass::Face => {
            // Grid of soft bright blobs. Spacing 10 stays incommensurate
            // with the backbone stride so the grid phase varies per cell.
            let fu = (u + phase) % 10.0 - 5.0;
            let fv = (v + phase) % 10.0 - 5.0;
            let d2 = fu * fu + fv * fv;
            0.28 + 0.66 * (-d2 / (2.0 * 2.6 * 2.6)).exp()
        }
        TraitClass::Iris => {
            // Concentric rings around the patch center, period 6.
            let du = u - w / 2.0;
            let dv = v - h / 2.0;
            let r = (du * du + dv * dv).sqrt();
            0.50 + 0.42 * (TAU * (r + phase) / 6.0).cos()
        }
        TraitClass::Palm => {
            // Broad horizontal lines, period 11.
            0.50 + 0.40 * (TAU * (v + phase) / 11.0).cos()
        }
        TraitClass::Knuckle => {
            // Short curved arcs: horizontal stripes bent by a parabola and
            // sharpened so only narrow bright bands remain.
            let bent = v + 0.05 * (u - w / 2.0) * (u - w / 2.0) + phase;
            let c = (TAU * bent / 7.0).cos();
            let band = ((c + 1.0) / 2.0).powi(3);
            0.28 + 0.55 * band
        }
        TraitClass::Finger => {
            // Fine vertical ridges, period 3.5.
            0.50 + 0.42 * (TAU * (u + phase) / 3.5).cos()
        }
    }
}

/// Typical box extents at the 96-pixel baseline, scaled with image size.
fn base_extent(class: TraitClass, img: f64) -> (f64, f64) {
    let s = img / 96.0;
    match class {
        TraitClass::Face => (40.0 * s, 40.0 * s),
        TraitClass::Iris => (32.0 * s, 32.0 * s),
        TraitClass::Palm => (46.0 * s, 46.0 * s),
        TraitClass::Knuckle => (30.0 * s, 20.0 * s),
        TraitClass::Finger => (13.0 * s, 34.0 * s),
    }
}

fn render_patch(image: &mut [f64], width: usize, bbox: &BBox, class: TraitClass, phase: f64) {
    let (x1, y1, x2, y2) = (
        bbox.x1() as usize,
        bbox.y1() as usize,
        bbox.x2() as usize,
        bbox.y2() as usize,
    );
    let (w, h) = (bbox.width(), bbox.height());
    for y in y1..y2 {
        for x in x1..x2 {
            let u = (x - x1) as f64;
            let v = (y - y1) as f64;
            image[y * width + x] = texture(class, u, v, w, h, phase).clamp(0.0, 1.0);
        }
    }
}

// ── generation ───────────────────────────────────────────────────────

/// Place a w x h box inside the image with jittered position.
fn place_box(
    rng: &mut Rng,
    img_w: usize,
    img_h: usize,
    w: f64,
    h: f64,
    jitter: f64,
) -> Option<BBox> {
    let free_x = img_w as f64 - 2.0 - w;
    let free_y = img_h as f64 - 2.0 - h;
    if free_x < 0.0 || free_y < 0.0 {
        return None;
    }
    let cx = free_x / 2.0 + jitter * free_x * (rng.uniform() - 0.5);
    let cy = free_y / 2.0 + jitter * free_y * (rng.uniform() - 0.5);
    let x1 = (1.0 + cx).floor();
    let y1 = (1.0 + cy).floor();
    BBox::new(x1, y1, x1 + w.round(), y1 + h.round()).ok()
}

fn gen_single(
    cfg: &GenConfig,
    class: TraitClass,
    index: usize,
) -> Result<AnnotatedImage, SynthError> {
    let mut rng = Rng::derive(cfg.seed, ((class.index() as u64) << 32) | index as u64);
    let (img_w, img_h) = match cfg.size_range {
        Some((lo, hi)) => (lo + rng.below(hi - lo + 1), lo + rng.below(hi - lo + 1)),
        None => (cfg.image_size, cfg.image_size),
    };

    let mut pixels = vec![0.0; img_w * img_h];
    for p in pixels.iter_mut() {
        *p = (0.25 + cfg.noise_amplitude * (2.0 * rng.uniform() - 1.0)).clamp(0.0, 1.0);
    }

    let img_ref = img_w.min(img_h) as f64;
    let scale =
        |rng: &mut Rng, base: f64| base * (1.0 + cfg.scale_jitter * (2.0 * rng.uniform() - 1.0));
    let mut boxes: Vec<(BBox, TraitClass)> = Vec::new();

    if class == TraitClass::Finger {
        // Four-slap: four ridge patches side by side, vertically aligned.
        let (bw, bh) = base_extent(class, img_ref);
        let mut placed = false;
        for _ in 0..50 {
            let w = scale(&mut rng, bw).round();
            let h = scale(&mut rng, bh).round();
            let gap = 2.0 + (rng.below(3)) as f64;
            let group_w = 4.0 * w + 3.0 * gap;
            if group_w + 2.0 > img_w as f64 || h + 2.0 > img_h as f64 {
                continue;
            }
            let free_x = img_w as f64 - 2.0 - group_w;
            let free_y = img_h as f64 - 2.0 - h;
            let gx =
                (1.0 + free_x / 2.0 + cfg.position_jitter * free_x * (rng.uniform() - 0.5)).floor();
            let gy =
                (1.0 + free_y / 2.0 + cfg.position_jitter * free_y * (rng.uniform() - 0.5)).floor();
            let mut group = Vec::with_capacity(4);
            for i in 0..4 {
                let x1 = gx + i as f64 * (w + gap);
                match BBox::new(x1, gy, x1 + w, gy + h) {
                    Ok(b) => group.push(b),
                    Err(_) => break,
                }
            }
            if group.len() == 4 {
                for b in &group {
                    boxes.push((*b, class));
                }
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SynthError::Placement(format!(
                "slap group does not fit in {img_w}x{img_h}"
            )));
        }
    } else {
        let (bw, bh) = base_extent(class, img_ref);
        let mut placed = false;
        for _ in 0..50 {
            let w = scale(&mut rng, bw);
            let h = scale(&mut rng, bh);
            if let Some(b) = place_box(&mut rng, img_w, img_h, w, h, cfg.position_jitter) {
                boxes.push((b, class));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SynthError::Placement(format!(
                "{class} box does not fit in {img_w}x{img_h}"
            )));
        }
    }

    for (bbox, class) in &boxes {
        let phase = rng.range(0.0, 20.0);
        render_patch(&mut pixels, img_w, bbox, *class, phase);
    }

    Ok(AnnotatedImage {
        id: format!("{}_{index:04}", class.name()),
        width: img_w,
        height: img_h,
        pixels,
        boxes,
    })
}

/// Generate `count_per_trait` images for each of the five classes. Purely a
/// function of the config; each image's randomness derives from
/// `(seed, class, index)`, independent of generation order.
pub fn generate(cfg: &GenConfig) -> Result<Vec<AnnotatedImage>, SynthError> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.count_per_trait * TraitClass::ALL.len());
    for class in TraitClass::ALL {
        for i in 0..cfg.count_per_trait {
            out.push(gen_single(cfg, class, i)?);
        }
    }
    Ok(out)
}

// ── PGM ──────────────────────────────────────────────────────────────

pub fn save_pgm(
    path: &Path,
    width: usize,
    height: usize,
    pixels: &[f64],
) -> Result<(), SynthError> {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(
        pixels
            .iter()
            .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(fs::write(path, bytes)?)
}

pub fn load_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>), SynthError> {
    let bytes = fs::read(path)?;
    let parse = |msg: &str| SynthError::Parse {
        line: 0,
        msg: format!("{}: {msg}", path.display()),
    };
    // Header: magic, width, height, maxval as whitespace-separated tokens.
    let mut at = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(parse("truncated PGM header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..at]).into_owned());
    }
    at += 1; // single whitespace after maxval
    if tokens[0] != "P5" {
        return Err(parse("not a binary PGM (P5)"));
    }
    let width: usize = tokens[1].parse().map_err(|_| parse("bad width"))?;
    let height: usize = tokens[2].parse().map_err(|_| parse("bad height"))?;
    if tokens[3] != "255" {
        return Err(parse("only maxval 255 supported"));
    }
    let body = bytes.get(at..).ok_or_else(|| parse("missing pixel data"))?;
    if body.len() != width * height {
        return Err(parse("pixel count mismatch"));
    }
    Ok((
        width,
        height,
        body.iter().map(|&b| b as f64 / 255.0).collect(),
    ))
}

// ── annotation records ───────────────────────────────────────────────

/// One labeled box as it appears in annotation and prediction files.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordBox {
    pub bbox: BBox,
    pub label: TraitClass,
    pub score: Option<f64>,
}

/// One annotation-file record: image id, image path, boxes. Pixels are not
/// loaded; see [`load_annotations`] for the pixel-backed variant.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    pub image_path: String,
    pub boxes: Vec<RecordBox>,
}

fn format_box(b: &RecordBox) -> String {
    let mut s = format!(
        "{},{},{},{},{}",
        b.bbox.x1(),
        b.bbox.y1(),
        b.bbox.x2(),
        b.bbox.y2(),
        b.label.name()
    );
    if let Some(score) = b.score {
        s.push(',');
        s.push_str(&format!("{score}"));
    }
    s
}

fn parse_box(field: &str, line: usize) -> Result<RecordBox, SynthError> {
    let parts: Vec<&str> = field.split(',').collect();
    if parts.len() != 5 && parts.len() != 6 {
        return Err(SynthError::Parse {
            line,
            msg: format!("box {field:?} wants x1,y1,x2,y2,label[,score]"),
        });
    }
    let coord = |s: &str| {
        s.parse::<f64>().map_err(|_| SynthError::Parse {
            line,
            msg: format!("bad number {s:?}"),
        })
    };
    let (x1, y1, x2, y2) = (
        coord(parts[0])?,
        coord(parts[1])?,
        coord(parts[2])?,
        coord(parts[3])?,
    );
    let bbox = BBox::new(x1, y1, x2, y2).map_err(|e| SynthError::Parse {
        line,
        msg: e.to_string(),
    })?;
    let label = TraitClass::from_name(parts[4]).ok_or_else(|| SynthError::Parse {
        line,
        msg: format!("unknown label {:?}", parts[4]),
    })?;
    let score = match parts.get(5) {
        Some(s) => {
            let v = coord(s)?;
            if !(0.0..=1.0).contains(&v) {
                return Err(SynthError::Parse {
                    line,
                    msg: format!("score {v} outside [0, 1]"),
                });
            }
            Some(v)
        }
        None => None,
    };
    Ok(RecordBox { bbox, label, score })
}

/// Write records in the annotation grammar. No pixel IO.
pub fn save_records(records: &[Record], path: &Path) -> Result<(), SynthError> {
    let mut out = String::from(ANNOTATION_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.id);
        out.push('\t');
        out.push_str(&r.image_path);
        if !r.boxes.is_empty() {
            out.push('\t');
            let boxes: Vec<String> = r.boxes.iter().map(format_box).collect();
            out.push_str(&boxes.join(";"));
        }
        out.push('\n');
    }
    Ok(fs::write(path, out)?)
}

/// Parse an annotation or prediction file. No pixel IO.
pub fn load_records(path: &Path) -> Result<Vec<Record>, SynthError> {
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(SynthError::Parse {
                line,
                msg: format!("expected 2 or 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let boxes = match fields.get(2) {
            Some(s) if !s.is_empty() => s
                .split(';')
                .map(|b| parse_box(b, line))
                .collect::<Result<Vec<_>, _>>()?,
            _ => Vec::new(),
        };
        records.push(Record {
            id: fields[0].to_string(),
            image_path: fields[1].to_string(),
            boxes,
        });
    }
    Ok(records)
}

/// Write the dataset: annotation file at `path`, pixels as PGM files under
/// `<parent>/images/`.
pub fn save_annotations(dataset: &[AnnotatedImage], path: &Path) -> Result<(), SynthError> {
    let parent = path.parent().unwrap_or(Path::new("."));
    let img_dir = parent.join("images");
    fs::create_dir_all(&img_dir)?;
    let mut records = Vec::with_capacity(dataset.len());
    for img in dataset {
        let rel = format!("images/{}.pgm", img.id);
        save_pgm(
            &img_dir.join(format!("{}.pgm", img.id)),
            img.width,
            img.height,
            &img.pixels,
        )?;
        records.push(Record {
            id: img.id.clone(),
            image_path: rel,
            boxes: img
                .boxes
                .iter()
                .map(|(bbox, label)| RecordBox {
                    bbox: *bbox,
                    label: *label,
                    score: None,
                })
                .collect(),
        });
    }
    save_records(&records, path)
}

/// Read an annotation file and its referenced PGM images.
pub fn load_annotations(path: &Path) -> Result<Vec<AnnotatedImage>, SynthError> {
    let parent = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let records = load_records(path)?;
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let img_path: PathBuf = parent.join(&r.image_path);
        let (width, height, pixels) = load_pgm(&img_path)?;
        out.push(AnnotatedImage {
            id: r.id,
            width,
            height,
            pixels,
            boxes: r.boxes.iter().map(|b| (b.bbox, b.label)).collect(),
        });
    }
    Ok(out)
}
