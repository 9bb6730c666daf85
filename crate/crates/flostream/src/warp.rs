//! Feature alignment: backward bilinear warping, forward splatting into an
//! enlarged canvas, splitting and merging of the border ring, and the
//! frame-by-frame warp-back chain that aligns a look-ahead feature with the
//! current frame.
//!
//! The border ring is the retention mechanism for content that moves out of
//! frame: forward warping splats values beyond the image border into a margin
//! of `m` pixels per side, the ring is carried alongside the recurrent state,
//! and the warp-back chain merges each ring back just before undoing the step
//! that produced it. For integer translations whose partial cumulative
//! displacement never exceeds `m`, the round trip is exact.

use ndarray::{s, Array2, Array3};

use crate::error::{Error, Result};
use crate::types::FlowField;

/// Hidden feature planes, stored `(channels, height, width)`.
pub type FeatureMap = Array3<f64>;

/// Weight sums below this threshold are treated as holes and output zero.
pub const SPLAT_EPSILON: f64 = 1e-8;

/// Conflict resolution for forward splatting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplatMode {
    /// Accumulate value*weight and weight separately; output their ratio.
    Average,
    /// Plain weighted accumulation without normalization.
    Sum,
}

// ---------------------------------------------------------------------------
// Enlarged canvas and border ring
// ---------------------------------------------------------------------------

/// A feature splatted onto a canvas enlarged by `margin` pixels per side.
/// The interior region `(margin.., margin..)` has the original `H x W` extent.
#[derive(Debug, Clone, PartialEq)]
pub struct EnlargedFeature {
    canvas: Array3<f64>,
    margin: usize,
}

impl EnlargedFeature {
    pub fn new(canvas: Array3<f64>, margin: usize) -> Result<Self> {
        let (_, ch, cw) = dims(&canvas);
        if ch < 2 * margin + 1 || cw < 2 * margin + 1 {
            return Err(Error::shape(format!(
                "canvas {ch}x{cw} too small for margin {margin}"
            )));
        }
        Ok(EnlargedFeature { canvas, margin })
    }

    pub fn margin(&self) -> usize {
        self.margin
    }

    pub fn canvas(&self) -> &Array3<f64> {
        &self.canvas
    }

    /// Shape of the interior region, `(channels, height, width)`.
    pub fn interior_shape(&self) -> (usize, usize, usize) {
        let (c, ch, cw) = dims(&self.canvas);
        (c, ch - 2 * self.margin, cw - 2 * self.margin)
    }

    /// Copies out the interior `H x W` feature.
    pub fn interior(&self) -> FeatureMap {
        let m = self.margin;
        let (_, ih, iw) = self.interior_shape();
        self.canvas.slice(s![.., m..m + ih, m..m + iw]).to_owned()
    }
}

/// The margin region of an enlarged canvas. Stored as a full canvas whose
/// interior is structurally zero; equality is therefore equality of ring
/// pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct BorderRing {
    canvas: Array3<f64>,
    margin: usize,
}

impl BorderRing {
    /// An all-zero ring for an interior of the given shape.
    pub fn zeros(channels: usize, height: usize, width: usize, margin: usize) -> Self {
        BorderRing {
            canvas: Array3::zeros((channels, height + 2 * margin, width + 2 * margin)),
            margin,
        }
    }

    pub fn margin(&self) -> usize {
        self.margin
    }

    pub fn canvas(&self) -> &Array3<f64> {
        &self.canvas
    }

    /// Ring pixels per channel: canvas area minus interior area.
    pub fn ring_pixel_count(&self) -> usize {
        let (_, ch, cw) = dims(&self.canvas);
        let (ih, iw) = (ch - 2 * self.margin, cw - 2 * self.margin);
        ch * cw - ih * iw
    }

    pub fn is_zero(&self) -> bool {
        self.canvas.iter().all(|&v| v == 0.0)
    }

    /// Number of stored elements (used by memory instrumentation).
    pub fn retained_elements(&self) -> usize {
        dims(&self.canvas).0 * self.ring_pixel_count()
    }
}

fn dims(a: &Array3<f64>) -> (usize, usize, usize) {
    let s = a.shape();
    (s[0], s[1], s[2])
}

// ---------------------------------------------------------------------------
// Backward warping (gather)
// ---------------------------------------------------------------------------

/// Bilinearly samples `feat` at positions displaced by `flow`, producing an
/// output on the flow's grid:
///
/// `out(x, y) = feat(x + dx + sample_offset, y + dy + sample_offset)`
///
/// `feat` must be larger than the flow grid by `sample_offset` pixels per
/// side; a nonzero offset is how enlarged canvases are sampled back onto the
/// plain grid. Samples falling outside `feat` contribute zero.
pub fn backward_warp(
    feat: &FeatureMap,
    flow: &FlowField,
    sample_offset: usize,
) -> Result<FeatureMap> {
    let (c, fh, fw) = dims(feat);
    let (h, w) = (flow.height(), flow.width());
    if fh != h + 2 * sample_offset || fw != w + 2 * sample_offset {
        return Err(Error::shape(format!(
            "feature {fh}x{fw} does not match flow grid {h}x{w} with offset {sample_offset}"
        )));
    }
    let off = sample_offset as f64;
    let mut out = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = flow.at(y, x);
            let sx = x as f64 + dx + off;
            let sy = y as f64 + dy + off;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let x0 = x0 as i64;
            let y0 = y0 as i64;
            for ch in 0..c {
                let mut acc = 0.0;
                for (cy, cx, wgt) in corner_weights(y0, x0, fy, fx) {
                    if cy >= 0 && cy < fh as i64 && cx >= 0 && cx < fw as i64 && wgt != 0.0 {
                        acc += wgt * feat[[ch, cy as usize, cx as usize]];
                    }
                }
                out[[ch, y, x]] = acc;
            }
        }
    }
    Ok(out)
}

/// Gradient of [`backward_warp`] with respect to the input feature: scatters
/// each output gradient back to the four sampled corners with the same
/// bilinear weights. Flow values are treated as constants.
pub fn backward_warp_grad(
    feat_shape: (usize, usize, usize),
    flow: &FlowField,
    sample_offset: usize,
    grad_out: &Array3<f64>,
) -> Array3<f64> {
    let (c, fh, fw) = feat_shape;
    let (h, w) = (flow.height(), flow.width());
    let off = sample_offset as f64;
    let mut grad = Array3::zeros((c, fh, fw));
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = flow.at(y, x);
            let sx = x as f64 + dx + off;
            let sy = y as f64 + dy + off;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let x0 = x0 as i64;
            let y0 = y0 as i64;
            for (cy, cx, wgt) in corner_weights(y0, x0, fy, fx) {
                if cy >= 0 && cy < fh as i64 && cx >= 0 && cx < fw as i64 && wgt != 0.0 {
                    for ch in 0..c {
                        grad[[ch, cy as usize, cx as usize]] += wgt * grad_out[[ch, y, x]];
                    }
                }
            }
        }
    }
    grad
}

#[inline]
fn corner_weights(y0: i64, x0: i64, fy: f64, fx: f64) -> [(i64, i64, f64); 4] {
    [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x0 + 1, (1.0 - fy) * fx),
        (y0 + 1, x0, fy * (1.0 - fx)),
        (y0 + 1, x0 + 1, fy * fx),
    ]
}

// ---------------------------------------------------------------------------
// Forward warping (scatter) with border enlargement
// ---------------------------------------------------------------------------

/// Splats each source pixel `(x, y)` to canvas position
/// `(x + dx + m, y + dy + m)` with bilinear weights over the four neighbors.
/// Conflicts are resolved by average splatting: value*weight and weight are
/// accumulated separately and the output is their ratio wherever the weight
/// sum exceeds [`SPLAT_EPSILON`], zero elsewhere. Splats landing outside the
/// enlarged canvas are dropped.
pub fn forward_warp_enlarged(
    feat: &FeatureMap,
    flow: &FlowField,
    margin: usize,
) -> Result<EnlargedFeature> {
    forward_warp_enlarged_with(feat, flow, margin, SplatMode::Average)
}

/// [`forward_warp_enlarged`] with an explicit conflict-resolution mode.
pub fn forward_warp_enlarged_with(
    feat: &FeatureMap,
    flow: &FlowField,
    margin: usize,
    mode: SplatMode,
) -> Result<EnlargedFeature> {
    let (canvas, den) = forward_warp_accumulate(feat, flow, margin)?;
    let canvas = match mode {
        SplatMode::Average => normalize_splat(canvas, &den),
        SplatMode::Sum => canvas,
    };
    EnlargedFeature::new(canvas, margin)
}

/// Raw splat accumulation: returns the unnormalized value canvas and the
/// per-pixel weight sums (shared across channels). Used by both the public
/// warp and the training graph, which needs the weights for its backward pass.
pub(crate) fn forward_warp_accumulate(
    feat: &FeatureMap,
    flow: &FlowField,
    margin: usize,
) -> Result<(Array3<f64>, Array2<f64>)> {
    let (c, h, w) = dims(feat);
    if (flow.height(), flow.width()) != (h, w) {
        return Err(Error::shape(format!(
            "flow grid {}x{} does not match feature {h}x{w}",
            flow.height(),
            flow.width()
        )));
    }
    let (ch, cw) = (h + 2 * margin, w + 2 * margin);
    let mut canvas = Array3::zeros((c, ch, cw));
    let mut den = Array2::zeros((ch, cw));
    let m = margin as f64;
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = flow.at(y, x);
            let tx = x as f64 + dx + m;
            let ty = y as f64 + dy + m;
            let x0 = tx.floor();
            let y0 = ty.floor();
            let fx = tx - x0;
            let fy = ty - y0;
            let x0 = x0 as i64;
            let y0 = y0 as i64;
            for (cy, cx, wgt) in corner_weights(y0, x0, fy, fx) {
                if cy >= 0 && cy < ch as i64 && cx >= 0 && cx < cw as i64 && wgt != 0.0 {
                    let (cy, cx) = (cy as usize, cx as usize);
                    den[[cy, cx]] += wgt;
                    for chan in 0..c {
                        canvas[[chan, cy, cx]] += wgt * feat[[chan, y, x]];
                    }
                }
            }
        }
    }
    Ok((canvas, den))
}

pub(crate) fn normalize_splat(mut canvas: Array3<f64>, den: &Array2<f64>) -> Array3<f64> {
    let (c, ch, cw) = dims(&canvas);
    for chan in 0..c {
        for y in 0..ch {
            for x in 0..cw {
                let d = den[[y, x]];
                canvas[[chan, y, x]] = if d > SPLAT_EPSILON { canvas[[chan, y, x]] / d } else { 0.0 };
            }
        }
    }
    canvas
}

/// Gradient of average-splat forward warping with respect to the source
/// feature. `den` is the weight plane returned by the accumulation pass.
pub(crate) fn forward_warp_grad(
    feat_shape: (usize, usize, usize),
    flow: &FlowField,
    margin: usize,
    den: &Array2<f64>,
    grad_canvas: &Array3<f64>,
) -> Array3<f64> {
    let (c, h, w) = feat_shape;
    let (ch, cw) = (h + 2 * margin, w + 2 * margin);
    let m = margin as f64;
    let mut grad = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = flow.at(y, x);
            let tx = x as f64 + dx + m;
            let ty = y as f64 + dy + m;
            let x0 = tx.floor();
            let y0 = ty.floor();
            let fx = tx - x0;
            let fy = ty - y0;
            let x0 = x0 as i64;
            let y0 = y0 as i64;
            for (cy, cx, wgt) in corner_weights(y0, x0, fy, fx) {
                if cy >= 0 && cy < ch as i64 && cx >= 0 && cx < cw as i64 && wgt != 0.0 {
                    let (cy, cx) = (cy as usize, cx as usize);
                    let d = den[[cy, cx]];
                    if d > SPLAT_EPSILON {
                        let scale = wgt / d;
                        for chan in 0..c {
                            grad[[chan, y, x]] += scale * grad_canvas[[chan, cy, cx]];
                        }
                    }
                }
            }
        }
    }
    grad
}

// ---------------------------------------------------------------------------
// Split / Merge
// ---------------------------------------------------------------------------

/// Splits an enlarged canvas into its border ring and interior feature.
/// Lossless: the pair jointly determines the canvas.
pub fn split_border(e: &EnlargedFeature) -> (BorderRing, FeatureMap) {
    let interior = e.interior();
    let m = e.margin;
    let mut ring_canvas = e.canvas.clone();
    if m > 0 {
        let (_, ih, iw) = e.interior_shape();
        ring_canvas
            .slice_mut(s![.., m..m + ih, m..m + iw])
            .fill(0.0);
    } else {
        ring_canvas.fill(0.0);
    }
    (BorderRing { canvas: ring_canvas, margin: m }, interior)
}

/// Reassembles an enlarged canvas from an interior feature and its ring.
pub fn merge_border(interior: &FeatureMap, ring: &BorderRing) -> Result<EnlargedFeature> {
    let (c, h, w) = dims(interior);
    let m = ring.margin;
    let expect = (c, h + 2 * m, w + 2 * m);
    if dims(&ring.canvas) != expect {
        return Err(Error::shape(format!(
            "ring canvas {:?} does not match interior {:?} with margin {m}",
            dims(&ring.canvas),
            (c, h, w)
        )));
    }
    let mut canvas = ring.canvas.clone();
    canvas
        .slice_mut(s![.., m..m + h, m..m + w])
        .assign(interior);
    EnlargedFeature::new(canvas, m)
}

// ---------------------------------------------------------------------------
// Warp-back chain
// ---------------------------------------------------------------------------

/// Aligns a far look-ahead feature back to the current frame, one step at a
/// time. `rings[i]` and `flows[i]` must be the ring and flow emitted by
/// look-ahead step `i+1` of the chain (oldest first); the flows are the same
/// ones used during forward propagation. Each iteration merges the ring
/// emitted by that step and undoes its warp:
///
/// ```text
/// h' = h_far
/// for i = k..1:  h' = backward_warp(merge(h', rings[i]), flows[i], offset = m)
/// ```
///
/// With empty inputs the feature is returned unchanged; with all-zero rings
/// the chain degenerates to plain backward warping.
pub fn warp_back(
    h_far: &FeatureMap,
    rings: &[BorderRing],
    flows: &[FlowField],
) -> Result<FeatureMap> {
    if rings.len() != flows.len() {
        return Err(Error::shape(format!(
            "warp_back got {} rings but {} flows",
            rings.len(),
            flows.len()
        )));
    }
    let mut current = h_far.clone();
    for (ring, flow) in rings.iter().zip(flows.iter()).rev() {
        let merged = merge_border(&current, ring)?;
        current = backward_warp(merged.canvas(), flow, ring.margin())?;
    }
    Ok(current)
}
