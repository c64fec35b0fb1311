//! Parametric stroke glyphs used for smoke runs and tests.
//!
//! Each character is drawn from strokes shared by its row (the "consonant"
//! body) plus strokes shared by its column (the "vowel" mark), so row and
//! column episodes carry real signal, and one stroke of its own. Instances differ by a random affine
//! jitter, control-point wobble and stroke width.

use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use image::{DynamicImage, GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alphabet::{AlphabetEntry, AlphabetSchema, AlphabetTable, Split};
use crate::dataset::{preprocess, DatasetError, DatasetIndex, PreprocessConfig, RawGlyph};
use crate::episodes::{derive_seed, SeedStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub rows: u32,
    pub cols: u32,
    /// Number of rows assigned to train, val and test, in row order.
    pub split_rows: [u32; 3],
    pub images_per_char: usize,
    /// Side length of the rendered canvas.
    pub canvas: u32,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    /// 50 classes: 10 rows x 5 columns, split 30/10/10.
    fn default() -> Self {
        SyntheticConfig {
            rows: 10,
            cols: 5,
            split_rows: [6, 2, 2],
            images_per_char: 5,
            canvas: 32,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn num_chars(&self) -> u32 {
        self.rows * self.cols
    }

    pub fn schema(&self) -> AlphabetSchema {
        let per_row = self.cols as usize;
        AlphabetSchema {
            num_chars: self.num_chars(),
            num_rows: self.rows,
            num_cols: self.cols,
            split_sizes: self.split_rows.map(|r| r as usize * per_row),
            anchors: vec![(1, 1, 1), (self.num_chars(), self.rows, self.cols)],
        }
    }

    /// Row-major full grid, whole rows per split.
    pub fn table(&self) -> AlphabetTable {
        assert_eq!(
            self.split_rows.iter().sum::<u32>(),
            self.rows,
            "split rows must cover all rows"
        );
        let mut entries = Vec::new();
        for row in 1..=self.rows {
            let split = if row <= self.split_rows[0] {
                Split::Train
            } else if row <= self.split_rows[0] + self.split_rows[1] {
                Split::Val
            } else {
                Split::Test
            };
            for col in 1..=self.cols {
                entries.push(AlphabetEntry {
                    char_label: (row - 1) * self.cols + col,
                    row_label: row,
                    col_label: col,
                    split,
                });
            }
        }
        AlphabetTable::from_entries(entries, &self.schema()).expect("synthetic grid is valid")
    }
}

/// A stroke is a quadratic Bezier in unit coordinates ([-1, 1] square).
#[derive(Debug, Clone, Copy)]
struct Stroke([(f32, f32); 3]);

fn random_strokes(rng: &mut ChaCha8Rng, n: usize, extent: f32) -> Vec<Stroke> {
    (0..n)
        .map(|_| {
            let mut p = || {
                (
                    rng.random_range(-extent..extent),
                    rng.random_range(-extent..extent),
                )
            };
            Stroke([p(), p(), p()])
        })
        .collect()
}

fn row_strokes(seed: u64, row: u32) -> Vec<Stroke> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(seed, SeedStream::Init, 0x1000 + row as u64));
    random_strokes(&mut rng, 2, 0.75)
}

fn col_strokes(seed: u64, col: u32) -> Vec<Stroke> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(seed, SeedStream::Init, 0x2000 + col as u64));
    random_strokes(&mut rng, 1, 0.8)
}

fn char_strokes(seed: u64, row: u32, col: u32) -> Vec<Stroke> {
    let key = 0x3000_0000 + ((row as u64) << 12) + col as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SeedStream::Init, key));
    random_strokes(&mut rng, 1, 0.8)
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (cx * cx + cy * cy).sqrt()
}

/// Renders one instance of `(row, col)`; white background, dark strokes.
pub fn render_glyph(seed: u64, row: u32, col: u32, instance: u32, canvas: u32) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        SeedStream::Init,
        ((row as u64) << 40) | ((col as u64) << 20) | instance as u64,
    ));
    let angle = rng.random_range(-10.0f32..10.0) * PI / 180.0;
    let scale = rng.random_range(0.9f32..1.1);
    let shift = (
        rng.random_range(-0.08f32..0.08),
        rng.random_range(-0.08f32..0.08),
    );
    let width = rng.random_range(0.09f32..0.14);
    let (sin, cos) = angle.sin_cos();

    let mut segments = Vec::new();
    let strokes = row_strokes(seed, row)
        .into_iter()
        .chain(col_strokes(seed, col))
        .chain(char_strokes(seed, row, col));
    for stroke in strokes {
        let pts = stroke.0.map(|(x, y)| {
            let (x, y) = (
                x + rng.random_range(-0.05..0.05),
                y + rng.random_range(-0.05..0.05),
            );
            (
                scale * (cos * x - sin * y) + shift.0,
                scale * (sin * x + cos * y) + shift.1,
            )
        });
        let steps = 16;
        let mut prev = pts[0];
        for s in 1..=steps {
            let t = s as f32 / steps as f32;
            let u = 1.0 - t;
            let q = (
                u * u * pts[0].0 + 2.0 * u * t * pts[1].0 + t * t * pts[2].0,
                u * u * pts[0].1 + 2.0 * u * t * pts[1].1 + t * t * pts[2].1,
            );
            segments.push((prev, q));
            prev = q;
        }
    }

    let half_px = 1.0 / canvas as f32;
    GrayImage::from_fn(canvas, canvas, |x, y| {
        let p = (
            (x as f32 + 0.5) / canvas as f32 * 2.0 - 1.0,
            (y as f32 + 0.5) / canvas as f32 * 2.0 - 1.0,
        );
        let d = segments
            .iter()
            .map(|&(a, b)| segment_distance(p, a, b))
            .fold(f32::INFINITY, f32::min);
        let ink = ((width / 2.0 + half_px - d) / (2.0 * half_px)).clamp(0.0, 1.0);
        Luma([((1.0 - ink) * 255.0).round() as u8])
    })
}

/// All rendered images as `(char_label, instance, image)`.
pub fn render_corpus(
    config: &SyntheticConfig,
    table: &AlphabetTable,
) -> Vec<(u32, u32, GrayImage)> {
    let mut out = Vec::new();
    for e in table.entries() {
        for inst in 0..config.images_per_char as u32 {
            out.push((
                e.char_label,
                inst,
                render_glyph(config.seed, e.row_label, e.col_label, inst, config.canvas),
            ));
        }
    }
    out
}

/// Renders and preprocesses straight into an index.
pub fn synthetic_index(
    config: &SyntheticConfig,
    table: &AlphabetTable,
    preprocess_config: &PreprocessConfig,
) -> Result<DatasetIndex, DatasetError> {
    let raws = render_corpus(config, table)
        .into_iter()
        .map(|(char_label, inst, img)| {
            Ok(RawGlyph {
                char_label,
                pixels: preprocess(&DynamicImage::ImageLuma8(img), preprocess_config)?,
                source: format!("synthetic:{char_label}/{inst}"),
            })
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    DatasetIndex::from_raw(
        raws,
        table,
        config.images_per_char,
        preprocess_config.clone(),
    )
}

/// Writes `<root>/<char>/<instance>.png` plus `<root>/manifest.csv`.
pub fn write_corpus(
    config: &SyntheticConfig,
    table: &AlphabetTable,
    root: &Path,
) -> std::io::Result<()> {
    fs::create_dir_all(root)?;
    fs::write(root.join("manifest.csv"), table.to_csv())?;
    for (char_label, inst, img) in render_corpus(config, table) {
        let dir = root.join(char_label.to_string());
        fs::create_dir_all(&dir)?;
        img.save(dir.join(format!("{inst}.png")))
            .map_err(std::io::Error::other)?;
    }
    Ok(())
}

/// Renders the glyph grid for an arbitrary table (e.g. the real alphabet),
/// for tests that need a full-size corpus.
pub fn index_for_table(table: &AlphabetTable, images_per_char: usize) -> DatasetIndex {
    let config = SyntheticConfig {
        rows: table.schema().num_rows,
        cols: table.schema().num_cols,
        images_per_char,
        ..SyntheticConfig::default()
    };
    let cfg = PreprocessConfig::scratch();
    let raws = render_corpus(&config, table)
        .into_iter()
        .map(|(char_label, inst, img)| RawGlyph {
            char_label,
            pixels: preprocess(&DynamicImage::ImageLuma8(img), &cfg).expect("rendered image"),
            source: format!("synthetic:{char_label}/{inst}"),
        })
        .collect();
    DatasetIndex::from_raw(raws, table, images_per_char, cfg).expect("rendered corpus is complete")
}

#[cfg(test)]
pub(crate) fn tiny_index(table: &AlphabetTable, images_per_char: usize) -> DatasetIndex {
    use std::sync::OnceLock;
    static CACHE: OnceLock<DatasetIndex> = OnceLock::new();
    if images_per_char == 5 && table == &AlphabetTable::builtin() {
        return CACHE.get_or_init(|| index_for_table(table, 5)).clone();
    }
    index_for_table(table, images_per_char)
}

/// The default 50-class synthetic corpus, built once per test binary.
#[cfg(test)]
pub(crate) fn small_index() -> &'static DatasetIndex {
    use std::sync::OnceLock;
    static CACHE: OnceLock<DatasetIndex> = OnceLock::new();
    CACHE.get_or_init(|| {
        let cfg = SyntheticConfig::default();
        index_for_table(&cfg.table(), cfg.images_per_char)
    })
}
