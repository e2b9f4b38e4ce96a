//! Label-to-image pipeline: place words on a blank patch grid, rasterize them
//! with the embedded bitmap font, and emit labels that are exact by
//! construction (each word labels the last cell it occupies).

use std::io::Write;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::font::{self, GLYPH_HEIGHT, GLYPH_WIDTH};
use crate::instructions::InstructionChoice;
use crate::label_align::{LabelConfig, LabeledSample, Source, VisionLabel};
use crate::patch_grid::{GridConfig, PatchGrid};
use crate::tokenizer::Vocabulary;

pub type Color = [u8; 3];

/// Channels of the dark color are all below this.
pub const DARK_LIMIT: u8 = 96;
/// Channels of the light color are all above this.
pub const LIGHT_LIMIT: u8 = 160;

/// One dark and one light color; which one becomes the background is a coin
/// flip. Returns (background, foreground).
pub fn pick_colors(seed: u64) -> (Color, Color) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dark: Color = std::array::from_fn(|_| rng.gen_range(0..DARK_LIMIT));
    let light: Color = std::array::from_fn(|_| rng.gen_range(LIGHT_LIMIT + 1..=255));
    if rng.gen_bool(0.5) {
        (dark, light)
    } else {
        (light, dark)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageFormat {
    Ppm,
    Png,
}

impl ImageFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            ImageFormat::Ppm => "ppm",
            ImageFormat::Png => "png",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorMode {
    /// Seeded dark/light pair per document.
    Random,
    Fixed,
}

/// Renderer settings as they appear in the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    /// 0 derives rows from content and the grid budget.
    pub rows: u32,
    /// 0 derives cols from content and the grid budget.
    pub cols: u32,
    pub glyph_scale: u32,
    pub margin_cells: u32,
    pub colors: ColorMode,
    pub fg: Color,
    pub bg: Color,
    pub image_format: ImageFormat,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            rows: 0,
            cols: 0,
            glyph_scale: 1,
            margin_cells: 0,
            colors: ColorMode::Random,
            fg: [0, 0, 0],
            bg: [255, 255, 255],
            image_format: ImageFormat::Ppm,
        }
    }
}

/// Fully resolved parameters for one document.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderSpec {
    pub cell: u32,
    pub rows: u32,
    pub cols: u32,
    pub glyph_scale: u32,
    pub fg: Color,
    pub bg: Color,
    pub margin_cells: u32,
    pub seed: u64,
}

impl RenderSpec {
    pub fn grid(&self) -> PatchGrid {
        PatchGrid::new(self.rows, self.cols, self.cell)
    }

    pub fn glyph_height(&self) -> u32 {
        GLYPH_HEIGHT * self.glyph_scale
    }

    pub fn validate(&self) -> Result<()> {
        if self.cell == 0 || self.glyph_scale == 0 {
            return Err(Error::RenderSpec("cell and glyph_scale must be positive".into()));
        }
        if self.glyph_height() > self.cell {
            return Err(Error::RenderSpec(format!(
                "glyph height {} exceeds cell {}",
                self.glyph_height(),
                self.cell
            )));
        }
        if self.fg == self.bg {
            return Err(Error::RenderSpec("foreground equals background".into()));
        }
        if self.cols <= 2 * self.margin_cells || self.rows <= 2 * self.margin_cells {
            return Err(Error::RenderSpec(format!(
                "{}x{} grid leaves no room inside a {}-cell margin",
                self.rows, self.cols, self.margin_cells
            )));
        }
        Ok(())
    }

    /// Resolve config, grid budget and content into a concrete spec.
    pub fn resolve(
        cfg: &RenderConfig,
        grid: &GridConfig,
        words: &[String],
        seed: u64,
    ) -> Result<RenderSpec> {
        let (bg, fg) = match cfg.colors {
            ColorMode::Random => pick_colors(seed),
            ColorMode::Fixed => (cfg.bg, cfg.fg),
        };
        let (rows, cols) = if cfg.rows > 0 && cfg.cols > 0 {
            (cfg.rows, cfg.cols)
        } else {
            auto_grid(words, grid, cfg.glyph_scale, cfg.margin_cells)?
        };
        let spec = RenderSpec {
            cell: grid.cell,
            rows,
            cols,
            glyph_scale: cfg.glyph_scale,
            fg,
            bg,
            margin_cells: cfg.margin_cells,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Advance width of `word` in pixels.
pub fn word_width(word: &str, glyph_scale: u32) -> u32 {
    word.chars().count() as u32 * GLYPH_WIDTH * glyph_scale
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub word: String,
    /// (row, col)
    pub start_cell: (u32, u32),
    pub span_cells: u32,
    /// (x0, y0, x1, y1), exclusive on the right and bottom.
    pub pixel_box: (u32, u32, u32, u32),
}

/// Number of text lines `words` need on a `cols`-wide grid, or `None` if some
/// word cannot fit on a line at all.
fn lines_needed(words: &[String], cell: u32, scale: u32, cols: u32, margin: u32) -> Option<u32> {
    let usable = cols.checked_sub(2 * margin).filter(|&u| u > 0)?;
    let mut lines = 0;
    let mut col = usable;
    for w in words {
        let span = word_width(w, scale).div_ceil(cell).max(1);
        if span > usable {
            return None;
        }
        if col + span > usable {
            lines += 1;
            col = 0;
        }
        col += span + 1;
    }
    Some(lines)
}

/// Smallest grid that holds the content and satisfies the pixel budget; ties
/// go to the squarer shape, then to fewer columns.
pub fn auto_grid(
    words: &[String],
    grid: &GridConfig,
    glyph_scale: u32,
    margin: u32,
) -> Result<(u32, u32)> {
    grid.validate()?;
    let cell = grid.cell;
    let area = u64::from(cell) * u64::from(cell);
    let min_tokens = grid.min_pixels / area;
    let max_tokens = grid.max_pixels / area;
    let widest = words
        .iter()
        .map(|w| word_width(w, glyph_scale).div_ceil(cell).max(1))
        .max()
        .unwrap_or(1);
    let min_cols = widest + 2 * margin;
    let mut best: Option<(u64, u64, u32, u32)> = None;
    for cols in min_cols..=u32::try_from(max_tokens).unwrap_or(u32::MAX) {
        let Some(lines) = lines_needed(words, cell, glyph_scale, cols, margin) else {
            continue;
        };
        let content_rows = u64::from(lines.max(1) + 2 * margin);
        let rows = content_rows.max(min_tokens.div_ceil(u64::from(cols)));
        let tokens = rows * u64::from(cols);
        if tokens > max_tokens || tokens < min_tokens {
            continue;
        }
        let key = (tokens, rows.abs_diff(u64::from(cols)), cols, rows as u32);
        if best.is_none_or(|b| (key.0, key.1, key.2) < (b.0, b.1, b.2)) {
            best = Some(key);
        }
    }
    match best {
        Some((_, _, cols, rows)) => Ok((rows, cols)),
        None => {
            let word = words
                .iter()
                .max_by_key(|w| word_width(w, glyph_scale))
                .cloned()
                .unwrap_or_default();
            Err(Error::RenderSpec(format!(
                "no grid within {}..={} tokens fits the content (widest word {word:?})",
                min_tokens, max_tokens
            )))
        }
    }
}

/// Place words left to right, one blank cell between words, wrapping at the
/// right margin. Each word starts at a cell's left edge and sits vertically
/// centered in its cell row.
pub fn layout(words: &[String], spec: &RenderSpec) -> Result<Vec<Placement>> {
    spec.validate()?;
    let m = spec.margin_cells;
    let right = spec.cols - m;
    let bottom = spec.rows - m;
    let usable_px = (spec.cols - 2 * m) * spec.cell;
    let y_pad = (spec.cell - spec.glyph_height()) / 2;
    let (mut row, mut col) = (m, m);
    let mut out = Vec::with_capacity(words.len());
    for word in words {
        let width = word_width(word, spec.glyph_scale);
        if width > usable_px {
            return Err(Error::WordTooWide {
                word: word.clone(),
                width,
                available: usable_px,
            });
        }
        let span = width.div_ceil(spec.cell).max(1);
        if col + span > right {
            row += 1;
            col = m;
        }
        if row >= bottom {
            return Err(Error::LayoutOverflow { rows: spec.rows });
        }
        let x0 = col * spec.cell;
        let y0 = row * spec.cell + y_pad;
        out.push(Placement {
            word: word.clone(),
            start_cell: (row, col),
            span_cells: span,
            pixel_box: (x0, y0, x0 + width, y0 + spec.glyph_height()),
        });
        col += span + 1;
    }
    Ok(out)
}

/// Rasterize placements onto a background-filled image.
pub fn render(placements: &[Placement], spec: &RenderSpec) -> RgbImage {
    let grid = spec.grid();
    let mut img = RgbImage::from_pixel(grid.width, grid.height, Rgb(spec.bg));
    let s = spec.glyph_scale;
    for p in placements {
        let (x0, y0, _, _) = p.pixel_box;
        for (i, ch) in p.word.chars().enumerate() {
            let gx0 = x0 + i as u32 * GLYPH_WIDTH * s;
            for gy in 0..GLYPH_HEIGHT {
                for gx in 0..GLYPH_WIDTH {
                    if !font::ink(ch, gx, gy) {
                        continue;
                    }
                    for dy in 0..s {
                        for dx in 0..s {
                            img.put_pixel(gx0 + gx * s + dx, y0 + gy * s + dy, Rgb(spec.fg));
                        }
                    }
                }
            }
        }
    }
    img
}

/// One label per placement, on the last cell the word occupies.
pub fn labels_from_layout(
    placements: &[Placement],
    cols: u32,
    vocab: &Vocabulary,
    cfg: &LabelConfig,
) -> Vec<VisionLabel> {
    placements
        .iter()
        .map(|p| {
            let (row, col) = p.start_cell;
            VisionLabel {
                token_index: (row * cols + col + p.span_cells - 1) as usize,
                word: p.word.clone(),
                first_token_id: cfg.first_token(vocab, &p.word),
            }
        })
        .collect()
}

/// One line of the documents input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocRecord {
    pub doc_id: String,
    pub text: String,
    pub question: String,
    pub answer: String,
}

impl DocRecord {
    pub fn words(&self) -> Vec<String> {
        self.text.split_whitespace().map(str::to_string).collect()
    }
}

#[derive(Debug, Clone)]
pub struct RenderedDoc {
    pub sample: LabeledSample,
    pub placements: Vec<Placement>,
    pub image: RgbImage,
    pub spec: RenderSpec,
}

/// Lay out, rasterize and label one document. `image_ref` is recorded in the
/// sample as-is.
pub fn render_document(
    doc: &DocRecord,
    spec: &RenderSpec,
    vocab: &Vocabulary,
    label_cfg: &LabelConfig,
    instruction: InstructionChoice,
    image_ref: &str,
) -> Result<RenderedDoc> {
    let words = doc.words();
    let placements = layout(&words, spec)?;
    let image = render(&placements, spec);
    let vision_labels = labels_from_layout(&placements, spec.cols, vocab, label_cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let sample = LabeledSample {
        sample_id: doc.doc_id.clone(),
        image_ref: image_ref.to_string(),
        grid: spec.grid(),
        prompt: instruction.apply(&doc.question, &mut rng),
        response: doc.answer.clone(),
        response_tokens: vocab.token_len(&doc.answer),
        vision_labels,
        source: Source::LabelToImage,
    };
    Ok(RenderedDoc {
        sample,
        placements,
        image,
        spec: spec.clone(),
    })
}

/// Binary PPM (P6) bytes.
pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.as_raw());
    out
}

pub fn write_image(path: &Path, img: &RgbImage, format: ImageFormat) -> Result<()> {
    match format {
        ImageFormat::Ppm => {
            let mut f = std::fs::File::create(path)?;
            f.write_all(&encode_ppm(img))?;
        }
        ImageFormat::Png => img
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image(e.to_string()))?,
    }
    Ok(())
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    Ok(img.to_rgb8())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(rows: u32, cols: u32) -> RenderSpec {
        RenderSpec {
            cell: 32,
            rows,
            cols,
            glyph_scale: 1,
            fg: [0, 0, 0],
            bg: [255, 255, 255],
            margin_cells: 0,
            seed: 0,
        }
    }

    fn words(ws: &[&str]) -> Vec<String> {
        ws.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn colors_respect_bounds_and_seed() {
        let (bg, fg) = pick_colors(0);
        assert_eq!(pick_colors(0), (bg, fg));
        let mut dark_bg = 0;
        for seed in 0..500 {
            let (bg, fg) = pick_colors(seed);
            let (dark, light) = if bg.iter().all(|&c| c < DARK_LIMIT) {
                dark_bg += 1;
                (bg, fg)
            } else {
                (fg, bg)
            };
            assert!(dark.iter().all(|&c| c < 96), "{dark:?}");
            assert!(light.iter().all(|&c| c > 160), "{light:?}");
            let min_light = *light.iter().min().unwrap();
            let max_dark = *dark.iter().max().unwrap();
            assert!(u32::from(min_light) > u32::from(max_dark) + 64);
        }
        assert!((200..300).contains(&dark_bg), "coin looks biased: {dark_bg}/500");
    }

    #[test]
    fn layout_examples() {
        let p = layout(&words(&["a", "b"]), &spec(2, 8)).unwrap();
        assert_eq!(p[0].start_cell, (0, 0));
        assert_eq!(p[1].start_cell, (0, 2));

        // "abcde" is 40px = 2 cells and still fits after "abcd" and its separator
        let p = layout(&words(&["abcd", "abcde", "xy"]), &spec(3, 4)).unwrap();
        assert_eq!(p[1].start_cell, (0, 2));
        assert_eq!(p[1].span_cells, 2);
        assert_eq!(p[2].start_cell, (1, 0));

        assert!(layout(&[], &spec(2, 8)).unwrap().is_empty());
    }

    #[test]
    fn layout_wraps_to_margin() {
        let mut s = spec(5, 8);
        s.margin_cells = 1;
        let p = layout(&words(&["abcdefgh", "abcdefghijklmnop", "a"]), &s).unwrap();
        assert_eq!(p[0].start_cell, (1, 1));
        assert_eq!(p[1].start_cell, (2, 1));
        assert_eq!(p[1].span_cells, 4);
        assert_eq!(p[2].start_cell, (2, 6));
    }

    #[test]
    fn layout_errors() {
        let err = layout(&words(&["abcdefghijklmnopqrstuvwxyz0123456789"]), &spec(2, 8));
        assert!(matches!(err, Err(Error::WordTooWide { ref word, .. }) if word.starts_with("abc")));
        let many: Vec<String> = (0..20).map(|_| "abcd".to_string()).collect();
        assert!(matches!(layout(&many, &spec(2, 8)), Err(Error::LayoutOverflow { .. })));
        let mut tall = spec(2, 8);
        tall.glyph_scale = 3;
        assert!(layout(&words(&["a"]), &tall).is_err());
    }

    #[test]
    fn labels_examples() {
        let v = Vocabulary::bytes_only(0);
        let lc = LabelConfig::default();
        let p = vec![Placement {
            word: "a".into(),
            start_cell: (0, 0),
            span_cells: 1,
            pixel_box: (0, 8, 8, 24),
        }];
        assert_eq!(labels_from_layout(&p, 8, &v, &lc)[0].token_index, 0);
        let p = vec![Placement {
            word: "abcdefghij".into(),
            start_cell: (1, 2),
            span_cells: 3,
            pixel_box: (64, 40, 144, 56),
        }];
        let l = labels_from_layout(&p, 8, &v, &lc);
        assert_eq!(l[0].token_index, 12);
        assert_eq!(l[0].first_token_id, u32::from(b'a'));

        let p = layout(&words(&["hi", "there"]), &spec(2, 8)).unwrap();
        let l = labels_from_layout(&p, 8, &v, &lc);
        assert_ne!(l[0].token_index, l[1].token_index);
    }

    #[test]
    fn blank_render_is_uniform() {
        let s = spec(2, 3);
        let img = render(&[], &s);
        assert_eq!(img.dimensions(), (96, 64));
        assert!(img.pixels().all(|p| p.0 == s.bg));
    }

    #[test]
    fn single_word_ink_inside_box() {
        let s = spec(2, 8);
        let p = layout(&words(&["Hello"]), &s).unwrap();
        let img = render(&p, &s);
        let (x0, y0, x1, y1) = p[0].pixel_box;
        let mut ink = 0;
        for (x, y, px) in img.enumerate_pixels() {
            if px.0 != s.bg {
                ink += 1;
                assert_eq!(px.0, s.fg);
                assert!(x >= x0 && x < x1 && y >= y0 && y < y1, "({x},{y}) outside");
                assert!(x < 64 && y < 32, "outside span cells");
            }
        }
        assert!(ink > 20);
        assert_eq!(encode_ppm(&img), encode_ppm(&render(&p, &s)));
    }

    #[test]
    fn scaled_glyphs_stay_in_box() {
        let mut s = spec(3, 6);
        s.glyph_scale = 2;
        let p = layout(&words(&["ab", "c"]), &s).unwrap();
        let img = render(&p, &s);
        for (x, y, px) in img.enumerate_pixels() {
            if px.0 != s.bg {
                assert!(p.iter().any(|pl| {
                    let (x0, y0, x1, y1) = pl.pixel_box;
                    x >= x0 && x < x1 && y >= y0 && y < y1
                }));
            }
        }
    }

    #[test]
    fn auto_grid_picks_smallest_fitting() {
        let budget = GridConfig {
            cell: 32,
            min_pixels: 32 * 32 * 4,
            max_pixels: 32 * 32 * 400,
        };
        let (rows, cols) = auto_grid(&[], &budget, 1, 0).unwrap();
        assert_eq!((rows, cols), (2, 2));
        // 33 chars = 264px = 9 cells wide; needs at least 9 columns
        let long = words(&["abcdefghijklmnopqrstuvwxyz0123456"]);
        let (rows, cols) = auto_grid(&long, &budget, 1, 0).unwrap();
        assert_eq!((rows, cols), (1, 9));
        let exact = GridConfig::exact_tokens(32, 12);
        let (rows, cols) = auto_grid(&words(&["ab", "cd", "ef"]), &exact, 1, 0).unwrap();
        assert_eq!(rows * cols, 12);
        assert_eq!((rows, cols), (4, 3));
        assert!(auto_grid(&long, &GridConfig::exact_tokens(32, 7), 1, 0).is_err());
    }

    #[test]
    fn render_document_labels_every_word() {
        let doc = DocRecord {
            doc_id: "d1".into(),
            text: "the  quick brown\nfox".into(),
            question: "Which animal?".into(),
            answer: "fox".into(),
        };
        let words = doc.words();
        let s = RenderSpec::resolve(&RenderConfig::default(), &GridConfig::default(), &words, 3)
            .unwrap();
        let v = Vocabulary::bytes_only(0);
        let r = render_document(&doc, &s, &v, &LabelConfig::default(), InstructionChoice::None, "d1.ppm")
            .unwrap();
        assert_eq!(r.sample.vision_labels.len(), 4);
        assert_eq!(r.sample.response_tokens, 3);
        assert_eq!(r.sample.source, Source::LabelToImage);
        r.sample.check_invariants().unwrap();
        assert_eq!(r.image.dimensions(), (s.cols * 32, s.rows * 32));
    }

    #[test]
    fn ppm_header() {
        let img = RgbImage::from_pixel(2, 1, Rgb([1, 2, 3]));
        assert_eq!(encode_ppm(&img), b"P6\n2 1\n255\n\x01\x02\x03\x01\x02\x03".to_vec());
    }
}
