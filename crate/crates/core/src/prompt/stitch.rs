//! Stitches a class's exemplar images into one labeled grid.
//!
//! Layout, top to bottom: a white label bar with the candidate's display name
//! in an 8x8 bitmap font drawn at 2x, then `rows x cols` square cells
//! separated by a `GAP`-pixel white gutter. Each exemplar is resized with a
//! triangle filter to fit its cell while keeping its aspect ratio, and
//! centered on white.

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use super::PromptError;
use crate::data_model::{ClassId, ExemplarSet};

pub const DEFAULT_CELL_SIZE: u32 = 224;
pub const DEFAULT_MAX_COLS: u32 = 4;
pub const GAP: u32 = 4;
pub const GLYPH_SCALE: u32 = 2;
pub const LINE_HEIGHT: u32 = 8 * GLYPH_SCALE + 4;
pub const MAX_LABEL_LINES: usize = 3;
pub const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
pub const INK: Rgb<u8> = Rgb([0, 0, 0]);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridLayout {
    pub rows: u32,
    pub cols: u32,
}

impl GridLayout {
    pub fn for_shots(m: u32, max_cols: u32) -> Self {
        let cols = m.min(max_cols.max(1));
        Self {
            rows: m.div_ceil(cols),
            cols,
        }
    }

    pub fn cells(&self) -> u32 {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone)]
pub struct StitchedGrid {
    pub class_id: ClassId,
    pub image: RgbImage,
    pub layout: GridLayout,
    pub cell_size: u32,
    pub label_lines: Vec<String>,
}

impl StitchedGrid {
    /// Top-left corner of cell `(row, col)` in grid pixels.
    pub fn cell_origin(&self, row: u32, col: u32) -> (u32, u32) {
        cell_origin(self.label_bar_height(), self.cell_size, row, col)
    }

    pub fn label_bar_height(&self) -> u32 {
        label_bar_height(self.label_lines.len())
    }
}

pub fn label_bar_height(lines: usize) -> u32 {
    lines as u32 * LINE_HEIGHT + GAP
}

fn cell_origin(bar: u32, cell: u32, row: u32, col: u32) -> (u32, u32) {
    (GAP + col * (cell + GAP), bar + GAP + row * (cell + GAP))
}

/// Grid canvas size for a layout: `(width, height)`.
pub fn grid_dimensions(layout: GridLayout, cell: u32, label_lines: usize) -> (u32, u32) {
    (
        layout.cols * cell + (layout.cols + 1) * GAP,
        layout.rows * cell + (layout.rows + 1) * GAP + label_bar_height(label_lines),
    )
}

/// Size and offset of an aspect-preserving fit of `w x h` into a square cell:
/// `(new_w, new_h, x_offset, y_offset)`.
pub fn letterbox_geometry(w: u32, h: u32, cell: u32) -> (u32, u32, u32, u32) {
    let scale = (cell as f64 / w as f64).min(cell as f64 / h as f64);
    let nw = ((w as f64 * scale).round() as u32).clamp(1, cell);
    let nh = ((h as f64 * scale).round() as u32).clamp(1, cell);
    (nw, nh, (cell - nw) / 2, (cell - nh) / 2)
}

/// One cell's content: `img` letterboxed onto a white square.
pub fn letterbox(img: &RgbImage, cell: u32) -> RgbImage {
    let (nw, nh, x, y) = letterbox_geometry(img.width(), img.height(), cell);
    let resized = imageops::resize(img, nw, nh, FilterType::Triangle);
    let mut out = RgbImage::from_pixel(cell, cell, BACKGROUND);
    imageops::replace(&mut out, &resized, x as i64, y as i64);
    out
}

fn ascii_fold(text: &str) -> String {
    text.nfkd()
        .filter(|c| !is_combining_mark(*c))
        .map(|c| {
            if c.is_ascii() && !c.is_ascii_control() {
                c
            } else {
                '?'
            }
        })
        .collect()
}

/// Greedy word wrap into lines of at most `width` chars; the last allowed
/// line is cut with `...` when text remains.
pub fn wrap_label(text: &str, width: usize, max_lines: usize) -> Vec<String> {
    let width = width.max(4);
    let mut lines: Vec<String> = Vec::new();
    let mut current = String::new();
    for word in ascii_fold(text).split_whitespace() {
        let mut word = word.to_string();
        while word.len() > width {
            if !current.is_empty() {
                lines.push(std::mem::take(&mut current));
            }
            lines.push(word[..width].to_string());
            word = word[width..].to_string();
        }
        if current.is_empty() {
            current = word;
        } else if current.len() + 1 + word.len() <= width {
            current.push(' ');
            current.push_str(&word);
        } else {
            lines.push(std::mem::replace(&mut current, word));
        }
    }
    if !current.is_empty() {
        lines.push(current);
    }
    if lines.is_empty() {
        lines.push(String::new());
    }
    if lines.len() > max_lines {
        lines.truncate(max_lines);
        let last = &mut lines[max_lines - 1];
        last.truncate(width - 3);
        last.push_str("...");
    }
    lines
}

/// Draws ASCII `text` with its top-left corner at `(x, y)`.
pub fn draw_text(canvas: &mut RgbImage, x: u32, y: u32, text: &str) {
    for (i, ch) in text.chars().enumerate() {
        let glyph = font8x8::legacy::BASIC_LEGACY
            .get(ch as usize)
            .copied()
            .unwrap_or(font8x8::legacy::BASIC_LEGACY[b'?' as usize]);
        let gx = x + i as u32 * 8 * GLYPH_SCALE;
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..8u32 {
                if bits >> col & 1 == 1 {
                    for dy in 0..GLYPH_SCALE {
                        for dx in 0..GLYPH_SCALE {
                            let px = gx + col * GLYPH_SCALE + dx;
                            let py = y + row as u32 * GLYPH_SCALE + dy;
                            if px < canvas.width() && py < canvas.height() {
                                canvas.put_pixel(px, py, INK);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Builds the labeled grid for one exemplar set.
pub fn stitch_exemplars(
    exemplars: &ExemplarSet,
    label: &str,
    cell_size: u32,
    max_cols: u32,
) -> Result<StitchedGrid, PromptError> {
    if exemplars.shots.is_empty() {
        return Err(PromptError::ZeroExemplars(exemplars.class_id));
    }
    let images = exemplars
        .shots
        .iter()
        .map(|shot| {
            image::open(&shot.resolved_path)
                .map(|img| img.to_rgb8())
                .map_err(|e| PromptError::DecodeFailure {
                    image_id: shot.image_id.clone(),
                    detail: e.to_string(),
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(stitch_images(
        exemplars.class_id,
        &images,
        label,
        cell_size,
        max_cols,
    ))
}

/// Grid assembly over already-decoded images.
pub fn stitch_images(
    class_id: ClassId,
    images: &[RgbImage],
    label: &str,
    cell_size: u32,
    max_cols: u32,
) -> StitchedGrid {
    let layout = GridLayout::for_shots(images.len() as u32, max_cols);
    let (width, _) = grid_dimensions(layout, cell_size, 1);
    let chars_per_line = ((width - 2 * GAP) / (8 * GLYPH_SCALE)) as usize;
    let label_lines = wrap_label(label, chars_per_line, MAX_LABEL_LINES);
    let (width, height) = grid_dimensions(layout, cell_size, label_lines.len());
    let mut canvas = RgbImage::from_pixel(width, height, BACKGROUND);
    for (i, line) in label_lines.iter().enumerate() {
        draw_text(&mut canvas, GAP, GAP + i as u32 * LINE_HEIGHT, line);
    }
    let bar = label_bar_height(label_lines.len());
    for (i, img) in images.iter().enumerate() {
        let (row, col) = (i as u32 / layout.cols, i as u32 % layout.cols);
        let (x, y) = cell_origin(bar, cell_size, row, col);
        imageops::replace(&mut canvas, &letterbox(img, cell_size), x as i64, y as i64);
    }
    StitchedGrid {
        class_id,
        image: canvas,
        layout,
        cell_size,
        label_lines,
    }
}
