//! Continuous alignment of target pixels onto the latent grid.
//!
//! Target and feature grids are both normalized to [-1, 1] with half-pixel
//! centers. Each target pixel projects to a continuous feature-space index,
//! takes the four surrounding grid corners as supporting points, and carries
//! six position channels: the per-corner offset, the feature/target size
//! ratio, and its own normalized coordinate. Corner weights are the areas of
//! the rectangles spanned by the query and the diagonally opposite corner,
//! which makes them a partition of unity and reduces the whole scheme to
//! bilinear interpolation when the decoder is the identity.

use crate::diffcore::{concat, gather_cells, Element, Tensor};
use crate::encoder::LatentFeature;
use crate::error::{CrmError, Result};

/// Number of position channels prepended to each aligned feature vector.
pub const POSITION_CHANNELS: usize = 6;
/// Supporting corners per query.
pub const CORNERS: usize = 4;
/// Floor applied to raw corner areas before normalization.
const WEIGHT_FLOOR: f64 = 1e-9;

/// Normalized per-axis center coordinates of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordGrid {
    pub ys: Vec<f64>,
    pub xs: Vec<f64>,
}

/// Center coordinate of index `i` on an axis of length `n`: `-1 + (2i+1)/n`.
pub fn axis_coords(n: usize) -> Vec<f64> {
    assert!(n >= 1, "axis length must be >= 1");
    (0..n).map(|i| -1.0 + (2 * i + 1) as f64 / n as f64).collect()
}

/// Build the normalized coordinate grid for an `n_h` x `n_w` target.
pub fn make_coord_grid(n_h: usize, n_w: usize) -> CoordGrid {
    CoordGrid {
        ys: axis_coords(n_h),
        xs: axis_coords(n_w),
    }
}

/// Continuous feature-space index of a normalized coordinate.
///
/// Inverse of the center convention: `u = (x + 1)/2 * n - 0.5`. Results may
/// lie outside `[0, n-1]` by at most half a cell.
pub fn project_axis(coord: f64, n: usize) -> f64 {
    (coord + 1.0) / 2.0 * n as f64 - 0.5
}

/// Per-axis continuous indices of every target pixel on a feature grid.
///
/// For grid pixel `i` of `t` this is `(i + 0.5) * n/t - 0.5`, the fused form
/// of [`project_axis`] over the center coordinates; a same-size projection
/// yields the integer index exactly.
pub fn project(target: &CoordGrid, feat_shape: (usize, usize)) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = feat_shape;
    assert!(h >= 1 && w >= 1, "feature grid must be at least 1 x 1");
    let axis = |t: usize, n: usize| -> Vec<f64> {
        let scale = n as f64 / t as f64;
        (0..t).map(|i| (i as f64 + 0.5) * scale - 0.5).collect()
    };
    (axis(target.ys.len(), h), axis(target.xs.len(), w))
}

/// Supporting corners of one continuous query point.
#[derive(Debug, Clone, Copy)]
pub struct CornerSet {
    /// Flattened latent-grid cells, border-clamped. Order: (y0,x0), (y0,x1),
    /// (y1,x0), (y1,x1).
    pub cells: [usize; CORNERS],
    /// Offset from each (unclamped) corner to the query, in index units;
    /// each component lies in [-1, 1].
    pub rel: [(f64, f64); CORNERS],
    /// Area weights, floored at 1e-9 and normalized to sum exactly 1.
    pub weights: [f64; CORNERS],
}

/// Corner indices, relative offsets and area weights for a query at
/// continuous feature-space position `(u, v)`.
pub fn corner_offsets_and_weights(u: f64, v: f64, feat_shape: (usize, usize)) -> CornerSet {
    let (h, w) = feat_shape;
    let uf = u.floor();
    let vf = v.floor();
    let fu = u - uf; // in [0, 1)
    let fv = v - vf;

    let clamp_cell = |y: f64, x: f64| -> usize {
        let yi = (y as isize).clamp(0, h as isize - 1) as usize;
        let xi = (x as isize).clamp(0, w as isize - 1) as usize;
        yi * w + xi
    };
    let cells = [
        clamp_cell(uf, vf),
        clamp_cell(uf, vf + 1.0),
        clamp_cell(uf + 1.0, vf),
        clamp_cell(uf + 1.0, vf + 1.0),
    ];
    // Offsets to the geometric (unclamped) corners.
    let rel = [
        (fu, fv),
        (fu, fv - 1.0),
        (fu - 1.0, fv),
        (fu - 1.0, fv - 1.0),
    ];
    // Area of the box between the query and the diagonally opposite corner.
    let raw = [
        ((1.0 - fu) * (1.0 - fv)).max(WEIGHT_FLOOR),
        ((1.0 - fu) * fv).max(WEIGHT_FLOOR),
        (fu * (1.0 - fv)).max(WEIGHT_FLOOR),
        (fu * fv).max(WEIGHT_FLOOR),
    ];
    let total: f64 = raw.iter().sum();
    let weights = [
        raw[0] / total,
        raw[1] / total,
        raw[2] / total,
        raw[3] / total,
    ];
    CornerSet { cells, rel, weights }
}

/// Position channels of one query/corner pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionInfo {
    /// Offset from the supporting corner to the query, per axis.
    pub c_r: (f64, f64),
    /// Feature-to-target extent ratio, per axis.
    pub r: (f64, f64),
    /// Normalized target coordinate of the query.
    pub c_t: (f64, f64),
}

impl PositionInfo {
    pub fn channels(&self) -> [f64; POSITION_CHANNELS] {
        [
            self.c_r.0, self.c_r.1, self.r.0, self.r.1, self.c_t.0, self.c_t.1,
        ]
    }
}

/// Aligned features for a run of target pixels.
///
/// `features` holds one row of length C+6 per (pixel, corner) pair in
/// pixel-major, corner-minor order: `[C_r (2), r (2), C_t (2), latent (C)]`.
/// `weights[4i + k]` is the area weight of row `4i + k`, normalized per
/// pixel.
pub struct AlignedQuerySet<T: Element = f32> {
    pub features: Tensor<T>,
    pub weights: Vec<f64>,
    pub target_shape: (usize, usize),
    /// Pixel range of the full target covered by this set.
    pub pixel_range: std::ops::Range<usize>,
}

impl<T: Element> AlignedQuerySet<T> {
    pub fn vector_len(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn pixels(&self) -> usize {
        self.pixel_range.len()
    }

    /// Weights cast to the compute dtype for aggregation.
    pub fn weights_as<U: Element>(&self) -> Vec<U> {
        self.weights.iter().map(|&w| U::from_f64(w)).collect()
    }
}

/// Align every target pixel onto the latent grid.
pub fn assemble<T: Element>(
    latent: &LatentFeature<T>,
    target_shape: (usize, usize),
) -> Result<AlignedQuerySet<T>> {
    let total = target_shape.0 * target_shape.1;
    assemble_range(latent, target_shape, 0..total)
}

/// Align a contiguous run of target pixels (row-major order).
///
/// Chunked assembly bounds peak memory at inference; the rows produced for
/// a pixel do not depend on the chunking.
pub fn assemble_range<T: Element>(
    latent: &LatentFeature<T>,
    target_shape: (usize, usize),
    pixel_range: std::ops::Range<usize>,
) -> Result<AlignedQuerySet<T>> {
    let (th, tw) = target_shape;
    if th == 0 || tw == 0 {
        return Err(CrmError::invalid("assemble: empty target shape"));
    }
    let total = th * tw;
    if pixel_range.end > total || pixel_range.is_empty() {
        return Err(CrmError::invalid(format!(
            "assemble: pixel range {pixel_range:?} out of bounds for {total} pixels"
        )));
    }
    let (gh, gw) = latent.grid_shape();
    let c = latent.channels();

    let target = make_coord_grid(th, tw);
    let (us, vs) = project(&target, (gh, gw));
    let ratio = (gh as f64 / th as f64, gw as f64 / tw as f64);

    let n = pixel_range.len();
    let mut cells = Vec::with_capacity(n * CORNERS);
    let mut weights = Vec::with_capacity(n * CORNERS);
    let mut pos = Vec::with_capacity(n * CORNERS * POSITION_CHANNELS);
    for p in pixel_range.clone() {
        let (iy, ix) = (p / tw, p % tw);
        let corners = corner_offsets_and_weights(us[iy], vs[ix], (gh, gw));
        for k in 0..CORNERS {
            cells.push(corners.cells[k]);
            weights.push(corners.weights[k]);
            let info = PositionInfo {
                c_r: corners.rel[k],
                r: ratio,
                c_t: (target.ys[iy], target.xs[ix]),
            };
            for ch in info.channels() {
                pos.push(T::from_f64(ch));
            }
        }
    }

    let pos_rows = Tensor::from_vec(vec![n * CORNERS, POSITION_CHANNELS], pos);
    let feat_rows = gather_cells(&latent.tensor, &cells)?;
    let features = concat(&[&pos_rows, &feat_rows], 1)?;
    debug_assert_eq!(features.shape(), vec![n * CORNERS, c + POSITION_CHANNELS]);

    Ok(AlignedQuerySet {
        features,
        weights,
        target_shape,
        pixel_range,
    })
}
