//! Geometry of the visual-token lattice: resizing to a pixel budget, cutting
//! the resized image into square cells, and mapping pixel coordinates to
//! row-major visual-token indices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label_align::WordBox;

/// Effective cell size and pixel budget of the vision tokenizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub cell: u32,
    pub min_pixels: u64,
    pub max_pixels: u64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            cell: 32,
            min_pixels: 32 * 32 * 64,
            max_pixels: 32 * 32 * 2048,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        let area = u64::from(self.cell) * u64::from(self.cell);
        if self.cell == 0 {
            return Err(Error::GridConfig("cell must be positive".into()));
        }
        if self.min_pixels == 0 || self.min_pixels > self.max_pixels {
            return Err(Error::GridConfig(format!(
                "need 0 < min_pixels <= max_pixels, got {} and {}",
                self.min_pixels, self.max_pixels
            )));
        }
        if self.min_pixels % area != 0 || self.max_pixels % area != 0 {
            return Err(Error::GridConfig(format!(
                "min_pixels and max_pixels must be multiples of cell^2 = {area}"
            )));
        }
        Ok(())
    }

    /// A config whose budget admits exactly `tokens` cells.
    pub fn exact_tokens(cell: u32, tokens: u64) -> Self {
        let px = tokens * u64::from(cell) * u64::from(cell);
        GridConfig {
            cell,
            min_pixels: px,
            max_pixels: px,
        }
    }
}

/// The visual-token lattice of a resized image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: u32,
    pub cols: u32,
    pub cell: u32,
    pub height: u32,
    pub width: u32,
}

impl PatchGrid {
    pub fn new(rows: u32, cols: u32, cell: u32) -> Self {
        PatchGrid {
            rows,
            cols,
            cell,
            height: rows * cell,
            width: cols * cell,
        }
    }

    pub fn token_count(&self) -> usize {
        self.rows as usize * self.cols as usize
    }

    /// (row, col) of a token index.
    pub fn cell_of(&self, index: usize) -> (u32, u32) {
        let cols = self.cols as usize;
        ((index / cols) as u32, (index % cols) as u32)
    }
}

/// Smallest multiple `k` (in cells) with `(k*cell)^2 * den >= num`, or the
/// largest with `(k*cell)^2 * den <= num` when `floor` is set. Exact in
/// integers; the float square root only seeds the search.
fn fit_multiple(num: u128, den: u128, cell: u32, floor: bool) -> u64 {
    let c = u128::from(cell);
    let fits = |k: u128| (k * c) * (k * c) * den <= num;
    let reaches = |k: u128| (k * c) * (k * c) * den >= num;
    let seed = ((num as f64 / den as f64).sqrt() / cell as f64).max(0.0) as u128;
    let mut k = seed;
    if floor {
        while fits(k + 1) {
            k += 1;
        }
        while k > 0 && !fits(k) {
            k -= 1;
        }
    } else {
        while k > 0 && reaches(k - 1) {
            k -= 1;
        }
        while !reaches(k) {
            k += 1;
        }
    }
    k as u64
}

/// Resize (h, w) to multiples of `cfg.cell` whose area lies in the budget.
///
/// Dimensions are first rounded to the nearest multiple. If the area is then
/// above `max_pixels` both sides are scaled by `sqrt(max / (h*w))` and floored;
/// if below `min_pixels` they are scaled by `sqrt(min / (h*w))` and ceiled.
pub fn smart_resize(h: u32, w: u32, cfg: &GridConfig) -> Result<(u32, u32)> {
    cfg.validate()?;
    let unsat = |constraint: String| Error::UnsatisfiableBudget {
        height: h,
        width: w,
        constraint,
    };
    if h == 0 || w == 0 {
        return Err(unsat("dimensions must be at least 1".into()));
    }
    let cell = u64::from(cfg.cell);
    let round = |v: u32| {
        let k = (u64::from(v) + cell / 2) / cell;
        k.max(1) * cell
    };
    let (mut hb, mut wb) = (round(h), round(w));
    let (h128, w128) = (u128::from(h), u128::from(w));
    if hb * wb > cfg.max_pixels {
        let max = u128::from(cfg.max_pixels);
        hb = fit_multiple(h128 * max, w128, cfg.cell, true).max(1) * cell;
        wb = fit_multiple(w128 * max, h128, cfg.cell, true).max(1) * cell;
    } else if hb * wb < cfg.min_pixels {
        let min = u128::from(cfg.min_pixels);
        hb = fit_multiple(h128 * min, w128, cfg.cell, false).max(1) * cell;
        wb = fit_multiple(w128 * min, h128, cfg.cell, false).max(1) * cell;
    }
    let area = hb * wb;
    if area > cfg.max_pixels {
        return Err(unsat(format!(
            "max_pixels = {} (closest shape {hb}x{wb} has {area} px; aspect ratio too extreme)",
            cfg.max_pixels
        )));
    }
    if area < cfg.min_pixels {
        return Err(unsat(format!(
            "min_pixels = {} (closest shape {hb}x{wb} has {area} px)",
            cfg.min_pixels
        )));
    }
    let to_u32 = |v: u64| u32::try_from(v).map_err(|_| unsat(format!("side {v} overflows")));
    Ok((to_u32(hb)?, to_u32(wb)?))
}

/// Grid for an already-resized image.
pub fn grid_of(h: u32, w: u32, cell: u32) -> Result<PatchGrid> {
    if cell == 0 || h == 0 || w == 0 || h % cell != 0 || w % cell != 0 {
        return Err(Error::NotCellMultiple {
            height: h,
            width: w,
            cell,
        });
    }
    Ok(PatchGrid::new(h / cell, w / cell, cell))
}

/// Row-major token index of the cell holding point (x, y).
///
/// The point is treated as an exclusive bottom-right corner: a coordinate on a
/// cell boundary belongs to the cell above/left of it.
pub fn token_index(grid: &PatchGrid, x: f64, y: f64) -> Result<usize> {
    let inside = |v: f64, dim: u32| v.is_finite() && v >= 0.0 && v <= f64::from(dim);
    if !inside(x, grid.width) || !inside(y, grid.height) {
        return Err(Error::PointOutOfBounds {
            x,
            y,
            width: grid.width,
            height: grid.height,
        });
    }
    let cell = f64::from(grid.cell);
    let col = (((x - 1.0).max(0.0) / cell).floor() as u32).min(grid.cols - 1);
    let row = (((y - 1.0).max(0.0) / cell).floor() as u32).min(grid.rows - 1);
    Ok(row as usize * grid.cols as usize + col as usize)
}

/// Scale a box from `from` = (h, w) image space to `to` = (h', w').
pub fn scale_box(b: &WordBox, from: (u32, u32), to: (u32, u32)) -> WordBox {
    let sy = f64::from(to.0) / f64::from(from.0);
    let sx = f64::from(to.1) / f64::from(from.1);
    if from == to {
        return b.clone();
    }
    WordBox {
        text: b.text.clone(),
        x0: b.x0 * sx,
        y0: b.y0 * sy,
        x1: b.x1 * sx,
        y1: b.y1 * sy,
        confidence: b.confidence,
    }
}
