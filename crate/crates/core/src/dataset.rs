//! Corpus ingestion, preprocessing and the per-split image index.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::hash::{Hash, Hasher};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::imageops::{self, FilterType};
use image::{DynamicImage, Rgb32FImage};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alphabet::{AlphabetError, AlphabetTable, Split};
use crate::episodes::Granularity;

/// Side length of every preprocessed image.
pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
/// Floats per preprocessed image (CHW layout).
pub const IMAGE_LEN: usize = CHANNELS * IMAGE_SIZE * IMAGE_SIZE;
pub const DEFAULT_IMAGES_PER_CHAR: usize = 5;
pub const DEFAULT_PATH_PATTERN: &str = "{char}/{instance}.png";

const CACHE_MAGIC: &[u8; 8] = b"FIDXCACH";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("no images found under {0}")]
    NoImages(PathBuf),
    #[error("character {char_label} has {found} images, expected {expected}")]
    WrongCount {
        char_label: u32,
        found: usize,
        expected: usize,
    },
    #[error("{source_name}: char_label {char_label} has no alphabet entry")]
    UnknownChar {
        char_label: u32,
        source_name: String,
    },
    #[error("zero-sized image")]
    EmptyImage,
    #[error("image {source_name} has {found} values, expected {IMAGE_LEN}")]
    BadPixels { source_name: String, found: usize },
    #[error(
        "image {source_name} labels ({row},{col}) disagree with the alphabet for char {char_label}"
    )]
    LabelMismatch {
        source_name: String,
        char_label: u32,
        row: u32,
        col: u32,
    },
    #[error("invalid path pattern {pattern:?}: {reason}")]
    BadPattern { pattern: String, reason: String },
    #[error("invalid index cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Alphabet(#[from] AlphabetError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Bilinear,
    Nearest,
}

impl Interpolation {
    fn filter(self) -> FilterType {
        match self {
            Interpolation::Bilinear => FilterType::Triangle,
            Interpolation::Nearest => FilterType::Nearest,
        }
    }
}

/// Resize and per-channel normalization applied to every raw image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub mean: [f32; 3],
    pub std: [f32; 3],
    #[serde(default)]
    pub interpolation: Interpolation,
}

impl PreprocessConfig {
    /// ImageNet statistics, matching pretrained ResNet weights.
    pub fn imagenet() -> Self {
        PreprocessConfig {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
            interpolation: Interpolation::Bilinear,
        }
    }

    /// Symmetric (0.5, 0.5) normalization for backbones trained from scratch.
    pub fn scratch() -> Self {
        PreprocessConfig {
            mean: [0.5; 3],
            std: [0.5; 3],
            interpolation: Interpolation::Bilinear,
        }
    }

    pub fn identity() -> Self {
        PreprocessConfig {
            mean: [0.0; 3],
            std: [1.0; 3],
            interpolation: Interpolation::Bilinear,
        }
    }
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig::imagenet()
    }
}

/// Resizes to 32x32 RGB with intensities in `[0, 1]`, CHW layout.
///
/// Grayscale input is replicated across channels; transparent pixels are
/// composited over white.
pub fn scale_to_unit(
    raw: &DynamicImage,
    interpolation: Interpolation,
) -> Result<Vec<f32>, DatasetError> {
    if raw.width() == 0 || raw.height() == 0 {
        return Err(DatasetError::EmptyImage);
    }
    let rgb: Rgb32FImage = if raw.color().has_alpha() {
        let rgba = raw.to_rgba32f();
        Rgb32FImage::from_fn(raw.width(), raw.height(), |x, y| {
            let p = rgba.get_pixel(x, y).0;
            let a = p[3];
            image::Rgb([
                p[0] * a + (1.0 - a),
                p[1] * a + (1.0 - a),
                p[2] * a + (1.0 - a),
            ])
        })
    } else {
        raw.to_rgb32f()
    };
    let size = IMAGE_SIZE as u32;
    let resized = if rgb.dimensions() == (size, size) {
        rgb
    } else {
        imageops::resize(&rgb, size, size, interpolation.filter())
    };

    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let mut out = vec![0f32; IMAGE_LEN];
    for (x, y, p) in resized.enumerate_pixels() {
        let offset = y as usize * IMAGE_SIZE + x as usize;
        for c in 0..CHANNELS {
            out[c * plane + offset] = p.0[c].clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Full preprocessing: [`scale_to_unit`] then `(v - mean) / std` per channel.
pub fn preprocess(raw: &DynamicImage, config: &PreprocessConfig) -> Result<Vec<f32>, DatasetError> {
    let mut pixels = scale_to_unit(raw, config.interpolation)?;
    normalize_in_place(&mut pixels, config);
    Ok(pixels)
}

pub fn normalize_in_place(pixels: &mut [f32], config: &PreprocessConfig) {
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    for (c, chunk) in pixels.chunks_mut(plane).enumerate() {
        let (m, s) = (config.mean[c], config.std[c]);
        for v in chunk {
            *v = (*v - m) / s;
        }
    }
}

/// One preprocessed image with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct GlyphImage {
    /// `3 x 32 x 32`, CHW, normalized.
    pub pixels: Arc<[f32]>,
    pub char_label: u32,
    pub row_label: u32,
    pub col_label: u32,
    /// 0-based position within its character (files sorted by name).
    pub instance_id: u8,
    pub split: Split,
    /// File path, or a synthetic identifier.
    pub source: String,
}

impl GlyphImage {
    pub fn label(&self, granularity: Granularity) -> u32 {
        match granularity {
            Granularity::Character => self.char_label,
            Granularity::Row => self.row_label,
            Granularity::Column => self.col_label,
        }
    }
}

/// Pixel data plus character label, before the alphabet fills in the rest.
#[derive(Debug, Clone)]
pub struct RawGlyph {
    pub char_label: u32,
    pub pixels: Vec<f32>,
    pub source: String,
}

/// Where images live on disk and how they become tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestOptions {
    /// Relative path pattern with `{char}` and `{instance}` placeholders and
    /// an optional `{ext}` (png, jpg or jpeg).
    pub path_pattern: String,
    pub images_per_char: usize,
    pub preprocess: PreprocessConfig,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            path_pattern: DEFAULT_PATH_PATTERN.to_string(),
            images_per_char: DEFAULT_IMAGES_PER_CHAR,
            preprocess: PreprocessConfig::default(),
        }
    }
}

fn compile_pattern(pattern: &str) -> Result<Regex, DatasetError> {
    let bad = |reason: &str| DatasetError::BadPattern {
        pattern: pattern.to_string(),
        reason: reason.to_string(),
    };
    if !pattern.contains("{char}") {
        return Err(bad("missing {char} placeholder"));
    }
    let token = Regex::new(r"\{(char|instance|ext)\}").expect("static regex");
    let mut re = String::from("^");
    let mut last = 0;
    for m in token.find_iter(pattern) {
        re.push_str(&regex::escape(&pattern[last..m.start()]));
        re.push_str(match m.as_str() {
            "{char}" => r"(?P<char>\d+)",
            "{instance}" => r"(?P<instance>[^/]+?)",
            _ => r"(?P<ext>(?i:png|jpe?g))",
        });
        last = m.end();
    }
    re.push_str(&regex::escape(&pattern[last..]));
    re.push('$');
    Regex::new(&re).map_err(|e| bad(&e.to_string()))
}

/// Per-split image index. Immutable once built.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    images: Vec<GlyphImage>,
    content_hashes: Vec<u64>,
    by_char: BTreeMap<u32, Vec<usize>>,
    /// `pools[split][granularity]`: label -> image indices.
    pools: [[BTreeMap<u32, Vec<usize>>; 3]; 3],
    images_per_char: usize,
    preprocess: PreprocessConfig,
    expected_split_classes: [usize; 3],
}

/// Scans `root` for images matching the pattern and builds a validated index.
pub fn ingest(
    root: &Path,
    table: &AlphabetTable,
    options: &IngestOptions,
) -> Result<DatasetIndex, DatasetError> {
    let pattern = compile_pattern(&options.path_pattern)?;
    let mut found: BTreeMap<u32, Vec<(String, PathBuf)>> = BTreeMap::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| DatasetError::Io {
            path: root.to_path_buf(),
            source: e.into(),
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry
            .path()
            .strip_prefix(root)
            .unwrap_or(entry.path())
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        let Some(caps) = pattern.captures(&rel) else {
            continue;
        };
        let char_label: u32 = caps["char"]
            .parse()
            .map_err(|_| DatasetError::UnknownChar {
                char_label: 0,
                source_name: rel.clone(),
            })?;
        found
            .entry(char_label)
            .or_default()
            .push((rel, entry.path().to_path_buf()));
    }
    if found.is_empty() {
        return Err(DatasetError::NoImages(root.to_path_buf()));
    }

    let mut raws = Vec::new();
    for (char_label, mut files) in found {
        table
            .entry(char_label)
            .map_err(|_| DatasetError::UnknownChar {
                char_label,
                source_name: files[0].0.clone(),
            })?;
        if files.len() != options.images_per_char {
            return Err(DatasetError::WrongCount {
                char_label,
                found: files.len(),
                expected: options.images_per_char,
            });
        }
        files.sort();
        for (_, path) in files {
            let bytes = fs::read(&path).map_err(|source| DatasetError::Io {
                path: path.clone(),
                source,
            })?;
            let img = image::load_from_memory(&bytes).map_err(|e| DatasetError::Decode {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            let pixels =
                preprocess(&img, &options.preprocess).map_err(|e| DatasetError::Decode {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
            raws.push(RawGlyph {
                char_label,
                pixels,
                source: path.display().to_string(),
            });
        }
    }
    DatasetIndex::from_raw(
        raws,
        table,
        options.images_per_char,
        options.preprocess.clone(),
    )
}

fn hash_pixels(pixels: &[f32]) -> u64 {
    let mut h = DefaultHasher::new();
    for v in pixels {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

impl DatasetIndex {
    /// Builds an index from already-preprocessed pixels. Instance ids follow
    /// the order of `raws` within each character.
    pub fn from_raw(
        raws: Vec<RawGlyph>,
        table: &AlphabetTable,
        images_per_char: usize,
        preprocess: PreprocessConfig,
    ) -> Result<DatasetIndex, DatasetError> {
        if raws.is_empty() {
            return Err(DatasetError::NoImages(PathBuf::new()));
        }
        let mut images = Vec::with_capacity(raws.len());
        let mut counts: HashMap<u32, u8> = HashMap::new();
        for raw in raws {
            let entry = table
                .entry(raw.char_label)
                .map_err(|_| DatasetError::UnknownChar {
                    char_label: raw.char_label,
                    source_name: raw.source.clone(),
                })?;
            if raw.pixels.len() != IMAGE_LEN {
                return Err(DatasetError::BadPixels {
                    source_name: raw.source,
                    found: raw.pixels.len(),
                });
            }
            let n = counts.entry(raw.char_label).or_default();
            let instance_id = *n;
            *n = n.saturating_add(1);
            images.push(GlyphImage {
                pixels: raw.pixels.into(),
                char_label: entry.char_label,
                row_label: entry.row_label,
                col_label: entry.col_label,
                instance_id,
                split: entry.split,
                source: raw.source,
            });
        }
        DatasetIndex::from_images(images, table, images_per_char, preprocess)
    }

    /// Builds an index from fully labelled images, checking every corpus
    /// invariant against `table`.
    pub fn from_images(
        images: Vec<GlyphImage>,
        table: &AlphabetTable,
        images_per_char: usize,
        preprocess: PreprocessConfig,
    ) -> Result<DatasetIndex, DatasetError> {
        let mut by_char: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, img) in images.iter().enumerate() {
            let entry = table
                .entry(img.char_label)
                .map_err(|_| DatasetError::UnknownChar {
                    char_label: img.char_label,
                    source_name: img.source.clone(),
                })?;
            if img.pixels.len() != IMAGE_LEN {
                return Err(DatasetError::BadPixels {
                    source_name: img.source.clone(),
                    found: img.pixels.len(),
                });
            }
            if (img.row_label, img.col_label, img.split)
                != (entry.row_label, entry.col_label, entry.split)
            {
                return Err(DatasetError::LabelMismatch {
                    source_name: img.source.clone(),
                    char_label: img.char_label,
                    row: img.row_label,
                    col: img.col_label,
                });
            }
            by_char.entry(img.char_label).or_default().push(i);
        }
        for e in table.entries() {
            let found = by_char.get(&e.char_label).map_or(0, Vec::len);
            if found != images_per_char {
                return Err(DatasetError::WrongCount {
                    char_label: e.char_label,
                    found,
                    expected: images_per_char,
                });
            }
        }

        let mut pools: [[BTreeMap<u32, Vec<usize>>; 3]; 3] = Default::default();
        for (i, img) in images.iter().enumerate() {
            for g in Granularity::ALL {
                pools[img.split as usize][g as usize]
                    .entry(img.label(g))
                    .or_default()
                    .push(i);
            }
        }
        let content_hashes = images.iter().map(|img| hash_pixels(&img.pixels)).collect();
        let schema = table.schema();
        Ok(DatasetIndex {
            images,
            content_hashes,
            by_char,
            pools,
            images_per_char,
            preprocess,
            expected_split_classes: schema.split_sizes,
        })
    }

    pub fn images(&self) -> &[GlyphImage] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &GlyphImage {
        &self.images[i]
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images_per_char(&self) -> usize {
        self.images_per_char
    }

    pub fn preprocess(&self) -> &PreprocessConfig {
        &self.preprocess
    }

    pub fn num_classes(&self) -> usize {
        self.by_char.len()
    }

    /// Image indices of one character, in instance order.
    pub fn char_images(&self, char_label: u32) -> &[usize] {
        self.by_char.get(&char_label).map_or(&[], Vec::as_slice)
    }

    /// Images of `split` grouped by their label at `granularity`.
    pub fn label_pools(
        &self,
        split: Split,
        granularity: Granularity,
    ) -> &BTreeMap<u32, Vec<usize>> {
        &self.pools[split as usize][granularity as usize]
    }

    pub fn split_images(&self, split: Split) -> impl Iterator<Item = &GlyphImage> {
        self.images.iter().filter(move |img| img.split == split)
    }

    /// Writes a versioned binary cache: magic, version, JSON header, f32 LE pixels.
    pub fn save_cache(&self, path: &Path) -> Result<(), DatasetError> {
        let io_err = |source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        };
        let header = CacheHeader {
            images_per_char: self.images_per_char,
            preprocess: self.preprocess.clone(),
            images: self
                .images
                .iter()
                .map(|img| CacheEntry {
                    char_label: img.char_label,
                    instance_id: img.instance_id,
                    source: img.source.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| DatasetError::Cache(e.to_string()))?;
        let file = fs::File::create(path).map_err(io_err)?;
        let mut w = BufWriter::new(file);
        let write = |w: &mut BufWriter<fs::File>| -> std::io::Result<()> {
            w.write_all(CACHE_MAGIC)?;
            w.write_all(&CACHE_VERSION.to_le_bytes())?;
            w.write_all(&(json.len() as u64).to_le_bytes())?;
            w.write_all(&json)?;
            for img in &self.images {
                for v in img.pixels.iter() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.flush()
        };
        write(&mut w).map_err(io_err)
    }

    pub fn load_cache(path: &Path, table: &AlphabetTable) -> Result<DatasetIndex, DatasetError> {
        let io_err = |source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut r = BufReader::new(fs::File::open(path).map_err(io_err)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != CACHE_MAGIC {
            return Err(DatasetError::Cache("bad magic".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(io_err)?;
        let version = u32::from_le_bytes(word);
        if version != CACHE_VERSION {
            return Err(DatasetError::Cache(format!(
                "unsupported version {version}"
            )));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(io_err)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json).map_err(io_err)?;
        let header: CacheHeader =
            serde_json::from_slice(&json).map_err(|e| DatasetError::Cache(e.to_string()))?;
        let mut raws = Vec::with_capacity(header.images.len());
        let mut buf = vec![0u8; IMAGE_LEN * 4];
        for entry in header.images {
            r.read_exact(&mut buf).map_err(io_err)?;
            let pixels = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            raws.push((
                entry.instance_id,
                RawGlyph {
                    char_label: entry.char_label,
                    pixels,
                    source: entry.source,
                },
            ));
        }
        raws.sort_by_key(|(inst, raw)| (raw.char_label, *inst));
        DatasetIndex::from_raw(
            raws.into_iter().map(|(_, raw)| raw).collect(),
            table,
            header.images_per_char,
            header.preprocess,
        )
    }
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    images_per_char: usize,
    preprocess: PreprocessConfig,
    images: Vec<CacheEntry>,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    char_label: u32,
    instance_id: u8,
    source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Anomaly {
    DuplicateImage {
        first: String,
        second: String,
    },
    SplitTotal {
        split: Split,
        expected: usize,
        found: usize,
    },
}

impl std::fmt::Display for Anomaly {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Anomaly::DuplicateImage { first, second } => {
                write!(f, "duplicate image: {second} is identical to {first}")
            }
            Anomaly::SplitTotal {
                split,
                expected,
                found,
            } => {
                write!(f, "split {split} has {found} images, expected {expected}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub total_images: usize,
    pub num_classes: usize,
    pub train_images: usize,
    pub val_images: usize,
    pub test_images: usize,
    pub anomalies: Vec<Anomaly>,
}

impl ValidationReport {
    pub fn is_healthy(&self) -> bool {
        self.anomalies.is_empty()
    }

    pub fn split_total(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_images,
            Split::Val => self.val_images,
            Split::Test => self.test_images,
        }
    }
}

/// Summarises an index and lists anything that looks wrong. Never fails.
pub fn validate_dataset(index: &DatasetIndex) -> ValidationReport {
    let mut anomalies = Vec::new();
    let mut seen: HashMap<u64, usize> = HashMap::new();
    for (i, &h) in index.content_hashes.iter().enumerate() {
        match seen.get(&h) {
            Some(&j) if index.images[j].pixels == index.images[i].pixels => {
                anomalies.push(Anomaly::DuplicateImage {
                    first: index.images[j].source.clone(),
                    second: index.images[i].source.clone(),
                });
            }
            Some(_) => {}
            None => {
                seen.insert(h, i);
            }
        }
    }
    let totals: Vec<usize> = Split::ALL
        .iter()
        .map(|&s| index.split_images(s).count())
        .collect();
    for split in Split::ALL {
        let expected = index.expected_split_classes[split as usize] * index.images_per_char;
        let found = totals[split as usize];
        if found != expected {
            anomalies.push(Anomaly::SplitTotal {
                split,
                expected,
                found,
            });
        }
    }
    ValidationReport {
        total_images: index.len(),
        num_classes: index.num_classes(),
        train_images: totals[0],
        val_images: totals[1],
        test_images: totals[2],
        anomalies,
    }
}
