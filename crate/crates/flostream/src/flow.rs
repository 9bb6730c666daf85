//! Optical-flow providers.
//!
//! Flow estimation is pluggable so the pipeline can run with exact synthetic
//! flows during verification, a self-contained block-matching estimator for
//! end-to-end runs, or precomputed flows loaded from disk (the stand-in for a
//! fixed pretrained flow network). Providers are immutable after construction
//! and `estimate_flow` is deterministic for fixed inputs, so flows can be
//! treated as constants by the training graph.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::types::{FlowDirection, FlowField, Frame};

/// Source of per-frame-pair flow fields.
#[derive(Debug, Clone)]
pub enum FlowProvider {
    /// Exact flows for a scene translating by `step` pixels per frame
    /// (motion of frame `t` content toward frame `t+1`). Requests toward the
    /// previous frame return the negated vector.
    GroundTruthTranslation { step: (f64, f64) },
    /// Integer block matching by exhaustive sum-of-absolute-differences
    /// search. `pre_blur` runs a 3x3 box filter over both frames first,
    /// which helps on noisy inputs.
    BlockMatching { block: usize, radius: usize, pre_blur: bool },
    /// Flows stored on disk, one file per (source frame, direction). The
    /// template substitutes `{t}` (1-based source frame index) and `{dir}`
    /// (`fwd` or `bwd`).
    ExternalFile { template: String },
}

impl FlowProvider {
    /// Estimates the flow defined on `src`'s grid pointing toward `dst`'s
    /// coordinates. `src_index` is the 1-based index of the source frame
    /// (used only by the external-file provider); `direction` records which
    /// temporal neighbor `dst` is.
    pub fn estimate_flow(
        &self,
        src: &Frame,
        dst: &Frame,
        src_index: usize,
        direction: FlowDirection,
    ) -> Result<FlowField> {
        if src.shape() != dst.shape() {
            return Err(Error::shape(format!(
                "flow estimation needs equal shapes, got {:?} and {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        match self {
            FlowProvider::GroundTruthTranslation { step } => {
                let (dx, dy) = match direction {
                    FlowDirection::ToNext => *step,
                    FlowDirection::ToPrevious => (-step.0, -step.1),
                };
                Ok(FlowField::constant(src.height(), src.width(), dx, dy, direction))
            }
            FlowProvider::BlockMatching { block, radius, pre_blur } => {
                let flow = block_matching_flow(src, dst, *block, *radius, *pre_blur)?;
                FlowField::new(flow.dx().clone(), flow.dy().clone(), direction)
            }
            FlowProvider::ExternalFile { template } => {
                let path = flow_path(template, src_index, direction);
                let flow = read_flow_file(&path, direction)?;
                if (flow.height(), flow.width()) != (src.height(), src.width()) {
                    return Err(Error::shape(format!(
                        "flow file {} is {}x{}, frame is {}x{}",
                        path.display(),
                        flow.height(),
                        flow.width(),
                        src.height(),
                        src.width()
                    )));
                }
                Ok(flow)
            }
        }
    }
}

/// Constant displacement field, the fixture used to build exactly invertible
/// forward/backward flow pairs.
pub fn translation_flow(
    height: usize,
    width: usize,
    dx: f64,
    dy: f64,
    direction: FlowDirection,
) -> FlowField {
    FlowField::constant(height, width, dx, dy, direction)
}

// ---------------------------------------------------------------------------
// Block matching
// ---------------------------------------------------------------------------

/// Integer flow minimizing per-block sum of absolute differences over an
/// exhaustive `[-radius, radius]^2` search. Ties are broken by smallest
/// `|dx| + |dy|`, then lexicographically by `(dx, dy)`, so flat inputs
/// resolve to zero. The per-block vector is broadcast to its pixels.
///
/// Candidates whose shifted window leaves the frame are skipped; `(0, 0)` is
/// always valid, so every block gets a vector.
pub fn block_matching_flow(
    src: &Frame,
    dst: &Frame,
    block: usize,
    radius: usize,
    pre_blur: bool,
) -> Result<FlowField> {
    if src.shape() != dst.shape() {
        return Err(Error::shape("block matching needs equal frame shapes".to_string()));
    }
    let (c, h, w) = src.shape();
    if block == 0 {
        return Err(Error::config("block size must be >= 1"));
    }
    if block > h || block > w {
        return Err(Error::config(format!(
            "block size {block} larger than frame {h}x{w}"
        )));
    }

    let (src_data, dst_data);
    let (src_planes, dst_planes) = if pre_blur {
        src_data = box_blur_3x3(src);
        dst_data = box_blur_3x3(dst);
        (&src_data, &dst_data)
    } else {
        (src.data(), dst.data())
    };

    // candidate order implements the tie-breaking rule
    let mut candidates: Vec<(i64, i64)> = Vec::new();
    let r = radius as i64;
    for dy in -r..=r {
        for dx in -r..=r {
            candidates.push((dx, dy));
        }
    }
    candidates.sort_by_key(|&(dx, dy)| (dx.abs() + dy.abs(), dx, dy));

    let mut flow_dx = Array2::zeros((h, w));
    let mut flow_dy = Array2::zeros((h, w));
    let mut by = 0;
    while by < h {
        let bh = block.min(h - by);
        let mut bx = 0;
        while bx < w {
            let bw = block.min(w - bx);
            let mut best = f64::INFINITY;
            let mut best_vec = (0i64, 0i64);
            for &(dx, dy) in &candidates {
                let ty = by as i64 + dy;
                let tx = bx as i64 + dx;
                if ty < 0 || tx < 0 || ty + bh as i64 > h as i64 || tx + bw as i64 > w as i64 {
                    continue;
                }
                let (ty, tx) = (ty as usize, tx as usize);
                let mut sad = 0.0;
                'sum: for ch in 0..c {
                    for y in 0..bh {
                        for x in 0..bw {
                            sad += (src_planes[[ch, by + y, bx + x]]
                                - dst_planes[[ch, ty + y, tx + x]])
                                .abs();
                        }
                        if sad >= best {
                            break 'sum;
                        }
                    }
                }
                if sad < best {
                    best = sad;
                    best_vec = (dx, dy);
                }
            }
            for y in by..by + bh {
                for x in bx..bx + bw {
                    flow_dx[[y, x]] = best_vec.0 as f64;
                    flow_dy[[y, x]] = best_vec.1 as f64;
                }
            }
            bx += block;
        }
        by += block;
    }
    FlowField::new(flow_dx, flow_dy, FlowDirection::ToNext)
}

/// 3x3 box filter with edge-aware averaging (mean over in-bounds neighbors).
fn box_blur_3x3(frame: &Frame) -> ndarray::Array3<f64> {
    let (c, h, w) = frame.shape();
    let data = frame.data();
    let mut out = ndarray::Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0;
                let mut count = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                            sum += data[[ch, ny as usize, nx as usize]];
                            count += 1.0;
                        }
                    }
                }
                out[[ch, y, x]] = sum / count;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// External flow files
// ---------------------------------------------------------------------------

const FLOW_MAGIC: &[u8; 5] = b"FLOW1";

/// Resolves a path template by substituting `{t}` and `{dir}`.
pub fn flow_path(template: &str, src_index: usize, direction: FlowDirection) -> PathBuf {
    PathBuf::from(
        template
            .replace("{t}", &src_index.to_string())
            .replace("{dir}", direction.tag()),
    )
}

/// Writes a flow field as raw little-endian binary: magic `FLOW1`, u32
/// height, u32 width, then `H*W` pairs of f32 `(dx, dy)` row-major.
pub fn write_flow_file(path: &Path, flow: &FlowField) -> Result<()> {
    let mut buf = Vec::with_capacity(13 + flow.height() * flow.width() * 8);
    buf.extend_from_slice(FLOW_MAGIC);
    buf.extend_from_slice(&(flow.height() as u32).to_le_bytes());
    buf.extend_from_slice(&(flow.width() as u32).to_le_bytes());
    for y in 0..flow.height() {
        for x in 0..flow.width() {
            let (dx, dy) = flow.at(y, x);
            buf.extend_from_slice(&(dx as f32).to_le_bytes());
            buf.extend_from_slice(&(dy as f32).to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Reads a `FLOW1` file. The direction tag is carried by the file's name
/// rather than its payload, so the caller supplies it.
pub fn read_flow_file(path: &Path, direction: FlowDirection) -> Result<FlowField> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 13 || &bytes[..5] != FLOW_MAGIC {
        return Err(Error::format(format!("{}: not a FLOW1 file", path.display())));
    }
    let h = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let expected = 13 + h * w * 8;
    if bytes.len() != expected {
        return Err(Error::format(format!(
            "{}: expected {expected} bytes for {h}x{w}, got {}",
            path.display(),
            bytes.len()
        )));
    }
    let mut dx = Array2::zeros((h, w));
    let mut dy = Array2::zeros((h, w));
    let mut off = 13;
    for y in 0..h {
        for x in 0..w {
            dx[[y, x]] = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
            dy[[y, x]] = f32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap()) as f64;
            off += 8;
        }
    }
    FlowField::new(dx, dy, direction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warp::backward_warp;
    use ndarray::Array3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_frame(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Frame {
        Frame::new(Array3::from_shape_fn((c, h, w), |_| rng.random_range(0.0..1.0))).unwrap()
    }

    /// Rolls the frame contents by (dx, dy) with wrap-around.
    fn roll_frame(frame: &Frame, dx: i64, dy: i64) -> Frame {
        let (c, h, w) = frame.shape();
        let data = frame.data();
        let mut out = Array3::zeros((c, h, w));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = (y as i64 - dy).rem_euclid(h as i64) as usize;
                    let sx = (x as i64 - dx).rem_euclid(w as i64) as usize;
                    out[[ch, y, x]] = data[[ch, sy, sx]];
                }
            }
        }
        Frame::new(out).unwrap()
    }

    /// Brute-force search over every displacement, written independently of
    /// the production estimator.
    fn oracle_best_vector(
        src: &Frame,
        dst: &Frame,
        by: usize,
        bx: usize,
        bh: usize,
        bw: usize,
        radius: i64,
    ) -> (i64, i64) {
        let (c, h, w) = src.shape();
        let mut results: Vec<((i64, i64), f64)> = Vec::new();
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let (ty, tx) = (by as i64 + dy, bx as i64 + dx);
                if ty < 0 || tx < 0 || ty + bh as i64 > h as i64 || tx + bw as i64 > w as i64 {
                    continue;
                }
                let mut sad = 0.0;
                for ch in 0..c {
                    for y in 0..bh {
                        for x in 0..bw {
                            sad += (src.data()[[ch, by + y, bx + x]]
                                - dst.data()[[ch, ty as usize + y, tx as usize + x]])
                                .abs();
                        }
                    }
                }
                results.push(((dx, dy), sad));
            }
        }
        let min_sad = results.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
        results
            .into_iter()
            .filter(|r| r.1 <= min_sad)
            .map(|r| r.0)
            .min_by_key(|&(dx, dy)| (dx.abs() + dy.abs(), dx, dy))
            .unwrap()
    }

    #[test]
    fn translation_provider_is_constant_and_direction_aware() {
        let provider = FlowProvider::GroundTruthTranslation { step: (2.0, 0.0) };
        let a = Frame::zeros(1, 8, 8);
        let b = Frame::zeros(1, 8, 8);
        let fwd = provider.estimate_flow(&a, &b, 1, FlowDirection::ToNext).unwrap();
        assert!(fwd.dx().iter().all(|&v| v == 2.0));
        assert!(fwd.dy().iter().all(|&v| v == 0.0));
        let bwd = provider.estimate_flow(&a, &b, 2, FlowDirection::ToPrevious).unwrap();
        assert!(bwd.dx().iter().all(|&v| v == -2.0));
        assert_eq!(bwd.direction(), FlowDirection::ToPrevious);
    }

    #[test]
    fn provider_rejects_shape_mismatch() {
        let provider = FlowProvider::GroundTruthTranslation { step: (1.0, 0.0) };
        let a = Frame::zeros(1, 8, 8);
        let b = Frame::zeros(1, 8, 9);
        assert!(provider.estimate_flow(&a, &b, 1, FlowDirection::ToNext).is_err());
    }

    #[test]
    fn translation_flow_fixture() {
        let zero = translation_flow(64, 64, 0.0, 0.0, FlowDirection::ToNext);
        assert!(zero.dx().iter().all(|&v| v == 0.0));
        let f = translation_flow(64, 64, 2.0, -1.0, FlowDirection::ToNext);
        assert!(f.dx().iter().all(|&v| v == 2.0));
        assert!(f.dy().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn inverse_translation_pair_composes_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let feat = Array3::from_shape_fn((1, 10, 10), |_| rng.random_range(0.0..1.0));
        let fwd = translation_flow(10, 10, 2.0, -1.0, FlowDirection::ToNext);
        let bwd = translation_flow(10, 10, -2.0, 1.0, FlowDirection::ToPrevious);
        let once = backward_warp(&feat, &fwd, 0).unwrap();
        let twice = backward_warp(&once, &bwd, 0).unwrap();
        // valid where both shifted samples stayed in bounds
        for y in 1..10 {
            for x in 2..8 {
                assert_eq!(twice[[0, y, x]], feat[[0, y, x]], "pixel ({y},{x})");
            }
        }
    }

    #[test]
    fn block_matching_identical_frames_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let f = rand_frame(&mut rng, 1, 16, 16);
        let flow = block_matching_flow(&f, &f, 4, 3, false).unwrap();
        assert!(flow.dx().iter().all(|&v| v == 0.0));
        assert!(flow.dy().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn block_matching_recovers_global_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let src = rand_frame(&mut rng, 1, 16, 16);
        let dst = roll_frame(&src, 3, 0);
        let flow = block_matching_flow(&src, &dst, 4, 3, false).unwrap();
        // fully-covered blocks away from the wrapped column must see (3, 0)
        for y in 0..16 {
            for x in 0..8 {
                assert_eq!(flow.at(y, x), (3.0, 0.0), "pixel ({y},{x})");
            }
        }
    }

    #[test]
    fn block_matching_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..10 {
            let src = rand_frame(&mut rng, 1, 12, 12);
            let dst = rand_frame(&mut rng, 1, 12, 12);
            let flow = block_matching_flow(&src, &dst, 4, 2, false).unwrap();
            for by in (0..12).step_by(4) {
                for bx in (0..12).step_by(4) {
                    let want = oracle_best_vector(&src, &dst, by, bx, 4, 4, 2);
                    let got = flow.at(by, bx);
                    assert_eq!(got, (want.0 as f64, want.1 as f64), "block ({by},{bx})");
                }
            }
        }
    }

    #[test]
    fn block_matching_flat_frames_tie_break_to_zero() {
        let f = Frame::new(Array3::from_elem((1, 8, 8), 0.5)).unwrap();
        let flow = block_matching_flow(&f, &f, 4, 2, false).unwrap();
        assert!(flow.dx().iter().all(|&v| v == 0.0));
        assert!(flow.dy().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn block_matching_shift_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let src = rand_frame(&mut rng, 1, 16, 16);
        let dst = rand_frame(&mut rng, 1, 16, 16);
        let base = block_matching_flow(&src, &dst, 4, 2, false).unwrap();
        let shifted =
            block_matching_flow(&roll_frame(&src, 4, 4), &roll_frame(&dst, 4, 4), 4, 2, false)
                .unwrap();
        // interior blocks (not spanning the wrap seam) keep their flow
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(base.at(y, x), shifted.at(y + 4, x + 4));
            }
        }
    }

    #[test]
    fn block_matching_rejects_oversized_block() {
        let f = Frame::zeros(1, 8, 8);
        assert!(block_matching_flow(&f, &f, 9, 1, false).is_err());
        assert!(block_matching_flow(&f, &f, 0, 1, false).is_err());
    }

    #[test]
    fn pre_blur_still_finds_exact_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let src = rand_frame(&mut rng, 1, 16, 16);
        let dst = roll_frame(&src, 2, 1);
        let flow = block_matching_flow(&src, &dst, 4, 3, true).unwrap();
        assert_eq!(flow.at(5, 5), (2.0, 1.0));
    }

    #[test]
    fn flow_file_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let dx =
            Array2::from_shape_fn((6, 7), |_| f64::from(rng.random_range(-8i8..8)) / 4.0);
        let dy =
            Array2::from_shape_fn((6, 7), |_| f64::from(rng.random_range(-8i8..8)) / 4.0);
        let flow = FlowField::new(dx, dy, FlowDirection::ToNext).unwrap();
        let template = dir.path().join("flow_{t}_{dir}.flo");
        let path = flow_path(template.to_str().unwrap(), 3, FlowDirection::ToNext);
        assert!(path.to_str().unwrap().contains("flow_3_fwd"));
        write_flow_file(&path, &flow).unwrap();
        let back = read_flow_file(&path, FlowDirection::ToNext).unwrap();
        assert_eq!(back, flow);
    }

    #[test]
    fn external_provider_reads_by_template() {
        let dir = tempfile::tempdir().unwrap();
        let template = dir.path().join("f{t}_{dir}.flo").to_str().unwrap().to_string();
        let flow = FlowField::constant(8, 8, 1.5, -0.5, FlowDirection::ToPrevious);
        write_flow_file(&flow_path(&template, 2, FlowDirection::ToPrevious), &flow).unwrap();
        let provider = FlowProvider::ExternalFile { template };
        let a = Frame::zeros(1, 8, 8);
        let got = provider.estimate_flow(&a, &a, 2, FlowDirection::ToPrevious).unwrap();
        assert_eq!(got, flow);
        // missing file surfaces as an error
        assert!(provider.estimate_flow(&a, &a, 9, FlowDirection::ToNext).is_err());
    }
}
