//! Grid tiling of grayscale images.
//!
//! An image is cut into an `rows x cols` grid of equal, non-overlapping tiles
//! anchored at the top-left corner. Rows partition the height and columns the
//! width; pixels left over by the integer division are dropped from the right
//! and bottom edges.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid dimensions must be positive, got {rows}x{cols}"
            )));
        }
        Ok(Self { rows, cols })
    }

    /// The 1x1 grid, i.e. the whole image.
    pub const FULL: GridSpec = GridSpec { rows: 1, cols: 1 };

    pub fn tile_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Grids swept by the `sweep` command, starting with the untiled baseline.
    pub fn sweep_set() -> Vec<GridSpec> {
        [
            (1, 1),
            (1, 2),
            (2, 2),
            (2, 3),
            (3, 3),
            (3, 4),
            (4, 4),
            (4, 5),
            (5, 5),
            (5, 6),
            (6, 6),
            (6, 7),
            (7, 7),
            (7, 8),
            (10, 10),
            (12, 12),
        ]
        .into_iter()
        .map(|(rows, cols)| GridSpec { rows, cols })
        .collect()
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

impl FromStr for GridSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("grid must look like RxC, got {s:?}"));
        let (r, c) = s.trim().split_once(['x', 'X']).ok_or_else(bad)?;
        let rows = r.trim().parse().map_err(|_| bad())?;
        let cols = c.trim().parse().map_err(|_| bad())?;
        GridSpec::new(rows, cols).map_err(|_| bad())
    }
}

/// Pixel rectangle of one grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileRect {
    pub row_index: usize,
    pub col_index: usize,
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl TileRect {
    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y0 + self.height && x >= self.x0 && x < self.x0 + self.width
    }

    pub fn intersects(&self, other: &TileRect) -> bool {
        self.x0 < other.x0 + other.width
            && other.x0 < self.x0 + self.width
            && self.y0 < other.y0 + other.height
            && other.y0 < self.y0 + self.height
    }
}

/// One tile's identity and provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileRecord {
    pub source_id: String,
    pub rect: TileRect,
    pub label: usize,
    pub tile_id: String,
}

/// Formats the positional tile identifier `{source_id}_r{row:02}c{col:02}`.
pub fn encode_tile_id(source_id: &str, row: usize, col: usize) -> String {
    format!("{source_id}_r{row:02}c{col:02}")
}

/// Inverse of [`encode_tile_id`].
pub fn decode_tile_id(tile_id: &str) -> Result<(String, usize, usize)> {
    let bad = || Error::Data(format!("malformed tile id {tile_id:?}"));
    let (source, pos) = tile_id.rsplit_once("_r").ok_or_else(bad)?;
    let (row, col) = pos.split_once('c').ok_or_else(bad)?;
    let digits = |s: &str| -> Result<usize> {
        if s.len() < 2 || !s.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        s.parse().map_err(|_| bad())
    };
    Ok((source.to_string(), digits(row)?, digits(col)?))
}

/// Rectangles of an `grid` partition of a `height x width` image, row-major.
pub fn compute_grid(height: usize, width: usize, grid: GridSpec) -> Result<Vec<TileRect>> {
    if grid.rows == 0 || grid.cols == 0 || grid.rows > height || grid.cols > width {
        return Err(Error::InvalidGrid {
            rows: grid.rows,
            cols: grid.cols,
            height,
            width,
        });
    }
    let tile_h = height / grid.rows;
    let tile_w = width / grid.cols;
    let mut rects = Vec::with_capacity(grid.tile_count());
    for row_index in 0..grid.rows {
        for col_index in 0..grid.cols {
            rects.push(TileRect {
                row_index,
                col_index,
                x0: col_index * tile_w,
                y0: row_index * tile_h,
                width: tile_w,
                height: tile_h,
            });
        }
    }
    Ok(rects)
}

/// Cuts `img` into grid tiles in row-major order. Each tile inherits `label`.
pub fn tile_image(
    img: &GrayImage,
    grid: GridSpec,
    source_id: &str,
    label: usize,
) -> Result<Vec<(TileRecord, GrayImage)>> {
    compute_grid(img.height(), img.width(), grid)?
        .into_iter()
        .map(|rect| {
            let pixels = img.crop(rect.y0, rect.x0, rect.height, rect.width)?;
            let record = TileRecord {
                source_id: source_id.to_string(),
                tile_id: encode_tile_id(source_id, rect.row_index, rect.col_index),
                rect,
                label,
            };
            Ok((record, pixels))
        })
        .collect()
}

/// Reassembles row-major tiles into the retained (cropped) region of the source.
pub fn stitch(tiles: &[GrayImage], grid: GridSpec) -> Result<GrayImage> {
    if tiles.len() != grid.tile_count() || tiles.is_empty() {
        return Err(Error::Shape(format!(
            "expected {} tiles for grid {grid}, got {}",
            grid.tile_count(),
            tiles.len()
        )));
    }
    let (th, tw) = (tiles[0].height(), tiles[0].width());
    if tiles.iter().any(|t| t.height() != th || t.width() != tw) {
        return Err(Error::Shape("tiles differ in size".into()));
    }
    let mut out = GrayImage::filled(th * grid.rows, tw * grid.cols, 0.0);
    for (i, tile) in tiles.iter().enumerate() {
        let (r, c) = (i / grid.cols, i % grid.cols);
        for y in 0..th {
            for x in 0..tw {
                out.set(r * th + y, c * tw + x, tile.get(y, x));
            }
        }
    }
    Ok(out)
}

/// Bilinear resize with corner-aligned sampling.
///
/// Output pixel `(i, j)` samples the source at
/// `(i * (h - 1) / (out_h - 1), j * (w - 1) / (out_w - 1))`; a target extent of
/// one samples coordinate zero.
pub fn resize_bilinear(img: &GrayImage, out_h: usize, out_w: usize) -> Result<GrayImage> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target must be non-empty, got {out_h}x{out_w}"
        )));
    }
    if img.is_empty() {
        return Err(Error::InvalidArgument("cannot resize an empty image".into()));
    }
    if out_h == img.height() && out_w == img.width() {
        return Ok(img.clone());
    }
    let ys = sample_axis(img.height(), out_h);
    let xs = sample_axis(img.width(), out_w);
    let mut data = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        let (r0, r1) = (img.row(y0), img.row(y1));
        for &(x0, x1, fx) in &xs {
            let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
            let bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
            data.push(top + (bottom - top) * fy);
        }
    }
    GrayImage::new(out_h, out_w, data)
}

/// Source index pairs and interpolation fraction for each output coordinate.
pub(crate) fn sample_axis(input: usize, output: usize) -> Vec<(usize, usize, f32)> {
    (0..output)
        .map(|i| {
            if output == 1 || input == 1 {
                return (0, 0, 0.0);
            }
            let pos = (i * (input - 1)) as f64 / (output - 1) as f64;
            let lo = (pos.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, (pos - lo as f64) as f32)
        })
        .collect()
}
