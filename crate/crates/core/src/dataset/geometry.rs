use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::ZoomGroup;
use crate::error::{Error, Result};

/// Half-open pixel rectangle `[row0, row1) x [col0, col1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extent {
    pub row0: isize,
    pub row1: isize,
    pub col0: isize,
    pub col1: isize,
}

impl Extent {
    pub fn height(&self) -> usize {
        (self.row1 - self.row0).max(0) as usize
    }

    pub fn width(&self) -> usize {
        (self.col1 - self.col0).max(0) as usize
    }

    pub fn contains(&self, other: &Extent) -> bool {
        self.row0 <= other.row0
            && other.row1 <= self.row1
            && self.col0 <= other.col0
            && other.col1 <= self.col1
    }

    pub fn within(&self, rows: usize, cols: usize) -> bool {
        self.row0 >= 0 && self.col0 >= 0 && self.row1 <= rows as isize && self.col1 <= cols as isize
    }
}

/// Lesion box: nominal size about a centre, plus the extent actually cropped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub center_row: f64,
    pub center_col: f64,
    /// Nominal (pre-clamp) height.
    pub height: usize,
    /// Nominal (pre-clamp) width.
    pub width: usize,
    /// Clamped extent inside the image.
    pub extent: Extent,
}

impl BoundingBox {
    /// Nominal extent about the centre, ignoring image bounds.
    pub fn nominal_extent(&self) -> Extent {
        let row0 = (self.center_row - (self.height as f64 - 1.0) / 2.0).floor() as isize;
        let col0 = (self.center_col - (self.width as f64 - 1.0) / 2.0).floor() as isize;
        Extent {
            row0,
            row1: row0 + self.height as isize,
            col0,
            col1: col0 + self.width as isize,
        }
    }
}

/// Minimal axis-aligned box covering every nonzero pixel of `mask`.
pub fn tight_bbox(mask: &Array2<bool>) -> Result<BoundingBox> {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for ((r, c), &v) in mask.indexed_iter() {
        if v {
            bounds = Some(match bounds {
                None => (r, r, c, c),
                Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r), c0.min(c), c1.max(c)),
            });
        }
    }
    let (r0, r1, c0, c1) = bounds.ok_or(Error::EmptyMask)?;
    Ok(BoundingBox {
        center_row: (r0 + r1) as f64 / 2.0,
        center_col: (c0 + c1) as f64 / 2.0,
        height: r1 - r0 + 1,
        width: c1 - c0 + 1,
        extent: Extent {
            row0: r0 as isize,
            row1: r1 as isize + 1,
            col0: c0 as isize,
            col1: c1 as isize + 1,
        },
    })
}

/// Translates `[start, start+len)` into `[0, limit)`; clips when `len > limit`.
fn clamp_span(start: isize, len: usize, limit: usize) -> (isize, isize) {
    let len = len as isize;
    let limit = limit as isize;
    if len <= limit {
        let s = start.clamp(0, limit - len);
        (s, s + len)
    } else {
        (start.max(0), (start + len).min(limit))
    }
}

/// Scales the nominal box by the group's factor about the same centre and fits it into the image.
pub fn expand_bbox(bbox: &BoundingBox, group: ZoomGroup, image_shape: (usize, usize)) -> BoundingBox {
    let f = group.expansion_factor();
    let mut out = BoundingBox {
        center_row: bbox.center_row,
        center_col: bbox.center_col,
        height: bbox.height * f,
        width: bbox.width * f,
        extent: bbox.extent,
    };
    let nominal = out.nominal_extent();
    let (row0, row1) = clamp_span(nominal.row0, out.height, image_shape.0);
    let (col0, col1) = clamp_span(nominal.col0, out.width, image_shape.1);
    out.extent = Extent {
        row0,
        row1,
        col0,
        col1,
    };
    out
}
