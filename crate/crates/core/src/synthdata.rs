//! Procedural scenes of coloured shapes with text-form category names,
//! the closed word vocabulary, and on-disk dataset persistence.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
const RESERVED: [&str; 2] = ["<pad>", "<eos>"];

/// Ordered word list; ids are positions. Ids 0 and 1 are PAD and EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from content words; reserved entries are prepended.
    pub fn new<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let all: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.iter().map(|w| w.as_ref().to_string()))
            .collect();
        Self::from_full_list(all)
    }

    /// Rebuilds from a serialized list that already contains the reserved words.
    pub fn from_full_list(words: Vec<String>) -> Result<Self> {
        if words.len() < 2 || words[0] != RESERVED[0] || words[1] != RESERVED[1] {
            return Err(Error::Vocabulary("list must start with <pad>, <eos>".into()));
        }
        let mut ids = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::Vocabulary(format!("invalid word {w:?}")));
            }
            if ids.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Vocabulary(format!("duplicate word {w:?}")));
            }
        }
        Ok(Self { words, ids })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.ids.get(word).copied()
    }

    /// Whitespace-separated words to ids; no end marker is appended.
    pub fn tokenize(&self, name: &str) -> Result<Vec<u32>> {
        name.split_whitespace()
            .map(|w| match self.ids.get(w) {
                Some(&id) if id > EOS => Ok(id),
                _ => Err(Error::Vocabulary(format!("unknown word {w:?}"))),
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&id| {
                if id <= EOS || id as usize >= self.words.len() {
                    Err(Error::Vocabulary(format!("id {id} is reserved or out of range")))
                } else {
                    Ok(self.words[id as usize].as_str())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    /// Like [`Self::detokenize`] but renders invalid ids as `<id>`.
    pub fn render(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| match self.words.get(id as usize) {
                Some(w) if id > EOS => w.clone(),
                _ => format!("<{id}>"),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// `height x width x 3` image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Self {
        Self {
            width,
            height,
            data: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Normalised `(cx, cy, w, h)`.
pub type BoxCxcywh = [f64; 4];

/// One of the eight symmetries of the square: optional transpose, then
/// optional horizontal and vertical flips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Symmetry {
    pub transpose: bool,
    pub flip_x: bool,
    pub flip_y: bool,
}

impl Symmetry {
    pub fn all() -> [Symmetry; 8] {
        std::array::from_fn(|k| Symmetry { transpose: k & 4 != 0, flip_x: k & 1 != 0, flip_y: k & 2 != 0 })
    }

    pub fn apply_box(self, b: &BoxCxcywh) -> BoxCxcywh {
        let [mut cx, mut cy, mut w, mut h] = *b;
        if self.transpose {
            (cx, cy, w, h) = (cy, cx, h, w);
        }
        if self.flip_x {
            cx = 1.0 - cx;
        }
        if self.flip_y {
            cy = 1.0 - cy;
        }
        [cx, cy, w, h]
    }

    /// Transformed image; transposing needs a square image.
    pub fn apply_image(self, image: &Image) -> Result<Image> {
        let (w, h) = (image.width, image.height);
        if self.transpose && w != h {
            return Err(Error::Data(format!("cannot transpose a {w}x{h} image")));
        }
        let mut data = vec![0.0; image.data.len()];
        for y in 0..h {
            for x in 0..w {
                let sx = if self.flip_x { w - 1 - x } else { x };
                let sy = if self.flip_y { h - 1 - y } else { y };
                let (sx, sy) = if self.transpose { (sy, sx) } else { (sx, sy) };
                let o = (y * w + x) * 3;
                data[o..o + 3].copy_from_slice(&image.pixel(sx, sy));
            }
        }
        Ok(Image { width: w, height: h, data })
    }
}

/// Training-time view of a sample: a random symmetry of the square plus
/// grey jitter of at most `noise` (in `[0, 1]` units) on every pixel. Names
/// are unchanged since every shape word is symmetric under these maps.
pub fn augment<R: Rng>(sample: &DetectionSample, rng: &mut R, noise: f64) -> Result<DetectionSample> {
    let sym = if sample.image.width == sample.image.height {
        Symmetry::all()[rng.gen_range(0..8)]
    } else {
        Symmetry { transpose: false, flip_x: rng.gen(), flip_y: rng.gen() }
    };
    let mut image = sym.apply_image(&sample.image)?;
    if noise > 0.0 {
        for px in image.data.chunks_mut(3) {
            let j = rng.gen_range(-noise..=noise);
            for c in px {
                *c = (*c + j).clamp(0.0, 1.0);
            }
        }
    }
    Ok(DetectionSample {
        image,
        boxes: sample.boxes.iter().map(|b| sym.apply_box(b)).collect(),
        names: sample.names.clone(),
        seed: sample.seed,
    })
}

/// One image with its boxes and token-id names (no end marker stored).
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSample {
    pub image: Image,
    pub boxes: Vec<BoxCxcywh>,
    pub names: Vec<Vec<u32>>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Diamond,
}

impl ShapeKind {
    pub fn word(self) -> &'static str {
        match self {
            Self::Circle => "circle",
            Self::Square => "square",
            Self::Triangle => "triangle",
            Self::Diamond => "diamond",
        }
    }

    /// Whether the pixel centred at local `(u, v)` lies inside a shape of side `s`.
    fn covers(self, u: f64, v: f64, s: f64) -> bool {
        let h = s / 2.0;
        match self {
            Self::Square => true,
            Self::Circle => (u - h).powi(2) + (v - h).powi(2) <= h * h,
            Self::Triangle => (u - h).abs() <= h * v / s,
            Self::Diamond => (u - h).abs() + (v - h).abs() <= h,
        }
    }
}

const PALETTE: [(&str, [u8; 3]); 8] = [
    ("red", [220, 40, 40]),
    ("green", [40, 200, 60]),
    ("blue", [50, 80, 230]),
    ("yellow", [230, 220, 40]),
    ("magenta", [210, 50, 210]),
    ("cyan", [40, 210, 220]),
    ("orange", [240, 140, 30]),
    ("white", [235, 235, 235]),
];

fn palette_rgb(name: &str) -> Option<[u8; 3]> {
    PALETTE.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

/// Side-length range in pixels for one size class; `word` is `None` for
/// the unmarked class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeClass {
    pub word: Option<String>,
    pub min_px: usize,
    pub max_px: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub colors: Vec<String>,
    pub shapes: Vec<ShapeKind>,
    pub sizes: Vec<SizeClass>,
    /// Maximum background brightness jitter, in 8-bit levels.
    pub noise: u8,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            min_objects: 1,
            max_objects: 4,
            colors: ["red", "green", "blue", "yellow", "magenta"]
                .map(String::from)
                .to_vec(),
            shapes: vec![ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle],
            sizes: vec![
                SizeClass { word: Some("small".into()), min_px: 10, max_px: 13 },
                SizeClass { word: None, min_px: 17, max_px: 21 },
                SizeClass { word: Some("large".into()), min_px: 25, max_px: 30 },
            ],
            noise: 24,
        }
    }
}

const PLACEMENT_ATTEMPTS: usize = 30;

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad(format!(
                "object count range {}..={} is invalid",
                self.min_objects, self.max_objects
            ));
        }
        if self.colors.len() < 5 {
            return bad(format!("need at least 5 colors, got {}", self.colors.len()));
        }
        if let Some(c) = self.colors.iter().find(|c| palette_rgb(c).is_none()) {
            return bad(format!("unknown color {c:?}"));
        }
        if self.shapes.is_empty() || self.sizes.is_empty() {
            return bad("need at least one shape and one size class".into());
        }
        for s in &self.sizes {
            if s.min_px == 0 || s.min_px > s.max_px || s.max_px > self.image_size {
                return bad(format!("size class {s:?} does not fit the image"));
            }
        }
        Ok(())
    }

    /// Vocabulary covering every name this config can produce.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let mut words: Vec<String> = self.sizes.iter().filter_map(|s| s.word.clone()).collect();
        words.extend(self.colors.iter().cloned());
        words.extend(self.shapes.iter().map(|s| s.word().to_string()));
        Vocabulary::new(&words)
    }

    /// Longest name in words.
    pub fn max_name_len(&self) -> usize {
        2 + usize::from(self.sizes.iter().any(|s| s.word.is_some()))
    }

    /// Every phrase this config can emit.
    pub fn all_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for size in &self.sizes {
            for color in &self.colors {
                for shape in &self.shapes {
                    let mut words: Vec<&str> = size.word.iter().map(String::as_str).collect();
                    words.push(color);
                    words.push(shape.word());
                    out.push(words.join(" "));
                }
            }
        }
        out
    }
}

/// Renders one scene. The same seed and config always give the same sample.
pub fn generate_scene(seed: u64, cfg: &GenConfig, vocab: &Vocabulary) -> Result<DetectionSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.image_size;
    let mut pixels = vec![0u8; size * size * 3];
    for px in pixels.chunks_mut(3) {
        let base = 24 + rng.gen_range(0..=cfg.noise);
        px.copy_from_slice(&[base, base, base]);
    }

    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut placed: Vec<[usize; 4]> = Vec::new();
    let mut boxes = Vec::with_capacity(count);
    let mut names = Vec::with_capacity(count);
    for _ in 0..count {
        let class = &cfg.sizes[rng.gen_range(0..cfg.sizes.len())];
        let side = rng.gen_range(class.min_px..=class.max_px);
        let shape = cfg.shapes[rng.gen_range(0..cfg.shapes.len())];
        let color = &cfg.colors[rng.gen_range(0..cfg.colors.len())];

        let mut origin = (0, 0);
        for _ in 0..PLACEMENT_ATTEMPTS {
            origin = (rng.gen_range(0..=size - side), rng.gen_range(0..=size - side));
            let cand = [origin.0, origin.1, origin.0 + side, origin.1 + side];
            let clear = placed.iter().all(|p| {
                cand[2] < p[0] || p[2] < cand[0] || cand[3] < p[1] || p[3] < cand[1]
            });
            if clear {
                break;
            }
        }
        placed.push([origin.0, origin.1, origin.0 + side, origin.1 + side]);

        let rgb = palette_rgb(color).expect("validated color");
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        for v in 0..side {
            for u in 0..side {
                if !shape.covers(u as f64 + 0.5, v as f64 + 0.5, side as f64) {
                    continue;
                }
                let (x, y) = (origin.0 + u, origin.1 + v);
                let i = (y * size + x) * 3;
                pixels[i..i + 3].copy_from_slice(&rgb);
                x1 = x1.min(x);
                y1 = y1.min(y);
                x2 = x2.max(x + 1);
                y2 = y2.max(y + 1);
            }
        }
        let s = size as f64;
        let (bx1, by1, bx2, by2) = (x1 as f64 / s, y1 as f64 / s, x2 as f64 / s, y2 as f64 / s);
        boxes.push([(bx1 + bx2) / 2.0, (by1 + by2) / 2.0, bx2 - bx1, by2 - by1]);

        let mut phrase: Vec<&str> = class.word.iter().map(String::as_str).collect();
        phrase.push(color);
        phrase.push(shape.word());
        names.push(vocab.tokenize(&phrase.join(" "))?);
    }

    Ok(DetectionSample {
        image: Image::from_rgb8(size, size, &pixels),
        boxes,
        names,
        seed: Some(seed),
    })
}

// ---- persistence ------------------------------------------------------------

pub const ANNOTATION_FILE: &str = "annotations.json";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    image: String,
    boxes: Vec<[f64; 4]>,
    names: Vec<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetRecord {
    version: u32,
    vocab: Vec<String>,
    samples: Vec<SampleRecord>,
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    let mut buf = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    buf.extend_from_slice(&image.to_rgb8());
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    parse_ppm(&bytes).map_err(|(offset, message)| Error::Parse {
        path: path.to_path_buf(),
        line: 1 + bytes[..offset.min(bytes.len())].iter().filter(|&&b| b == b'\n').count(),
        offset,
        message,
    })
}

fn parse_ppm(bytes: &[u8]) -> std::result::Result<Image, (usize, String)> {
    let mut pos = 0;
    let token = |pos: &mut usize| -> std::result::Result<String, (usize, String)> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err((start, "unexpected end of header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic_at = pos;
    if token(&mut pos)? != "P6" {
        return Err((magic_at, "expected P6 magic".into()));
    }
    let mut number = |what: &str| -> std::result::Result<usize, (usize, String)> {
        let at = pos;
        token(&mut pos)?
            .parse()
            .map_err(|_| (at, format!("invalid {what}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err((pos, format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err((pos, "empty image".into()));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err((bytes.len(), format!("raster truncated: need {need} bytes")));
    }
    Ok(Image::from_rgb8(width, height, &bytes[pos..pos + need]))
}

fn image_name(i: usize) -> String {
    format!("{i:05}.ppm")
}

/// Writes images as PPM files plus one JSON annotation/vocabulary file.
pub fn write_dataset(dir: &Path, samples: &[DetectionSample], vocab: &Vocabulary) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = image_name(i);
        write_ppm(&dir.join(&name), &s.image)?;
        records.push(SampleRecord {
            image: name,
            boxes: s.boxes.clone(),
            names: s.names.clone(),
            seed: s.seed,
        });
    }
    let record = DatasetRecord {
        version: DATASET_VERSION,
        vocab: vocab.words().to_vec(),
        samples: records,
    };
    let json = serde_json::to_string_pretty(&record).expect("dataset record serializes");
    fs::write(dir.join(ANNOTATION_FILE), json)?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(Vec<DetectionSample>, Vocabulary)> {
    let path: PathBuf = dir.join(ANNOTATION_FILE);
    let text = fs::read_to_string(&path)?;
    let record: DatasetRecord = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        line: e.line(),
        offset: e.column(),
        message: e.to_string(),
    })?;
    if record.version != DATASET_VERSION {
        return Err(Error::Data(format!("unsupported dataset version {}", record.version)));
    }
    let vocab = Vocabulary::from_full_list(record.vocab)?;
    let mut samples = Vec::with_capacity(record.samples.len());
    for r in record.samples {
        if r.boxes.len() != r.names.len() {
            return Err(Error::Data(format!("{}: {} boxes but {} names", r.image, r.boxes.len(), r.names.len())));
        }
        if let Some(id) = r.names.iter().flatten().find(|&&id| id <= EOS || id as usize >= vocab.len()) {
            return Err(Error::Data(format!("{}: invalid token id {id}", r.image)));
        }
        if r.boxes.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data(format!("{}: box outside the unit square", r.image)));
        }
        samples.push(DetectionSample {
            image: read_ppm(&dir.join(&r.image))?,
            boxes: r.boxes,
            names: r.names,
            seed: r.seed,
        });
    }
    Ok((samples, vocab))
}
