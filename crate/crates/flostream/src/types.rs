//! Core data types shared by all modules: frames, clips, flow fields, noise
//! specifications and the denoiser configuration.
//!
//! Conventions fixed here and relied on everywhere else:
//!
//! - Intensities live on the `[0, 1]` scale. Noise levels quoted on the
//!   8-bit `[0, 255]` scale are divided by 255 at the [`NoiseSpec`] boundary.
//! - A flow field between frames `a` and `b` is defined on frame `a`'s pixel
//!   grid and points toward frame `b`'s coordinates. Every [`FlowField`]
//!   carries a [`FlowDirection`] tag so misuse is detectable.
//! - Feature maps and frames are stored channel-major `(C, H, W)`.

use ndarray::{Array2, Array3};
use std::collections::BTreeMap;

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Frames and clips
// ---------------------------------------------------------------------------

/// A single image frame, stored as `(channels, height, width)` with f64
/// intensities. Clean and denoised frames lie in `[0, 1]`; noisy frames may
/// exceed that range unless clipped noise is requested.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    data: Array3<f64>,
}

impl Frame {
    /// Wraps an array as a frame, rejecting non-finite values and
    /// channel counts other than 1 (grayscale) or 3 (color).
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let c = data.shape()[0];
        if c != 1 && c != 3 {
            return Err(Error::shape(format!("frame must have 1 or 3 channels, got {c}")));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("frame contains non-finite values".into()));
        }
        Ok(Frame { data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Frame { data: Array3::zeros((channels, height, width)) }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// `(channels, height, width)`
    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2])
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.data
    }

    /// Copy with all values clamped to `[0, 1]`, as done when emitting
    /// denoised frames.
    pub fn clamped(&self) -> Frame {
        Frame { data: self.data.mapv(|v| v.clamp(0.0, 1.0)) }
    }
}

/// An ordered sequence of frames with uniform shape, length `T >= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: Vec<Frame>,
}

impl VideoClip {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::shape("clip must contain at least one frame"))?;
        let shape = first.shape();
        for (i, f) in frames.iter().enumerate() {
            if f.shape() != shape {
                return Err(Error::shape(format!(
                    "frame {i} has shape {:?}, expected {shape:?}",
                    f.shape()
                )));
            }
        }
        Ok(VideoClip { frames })
    }

    /// Number of frames `T`.
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, t: usize) -> &Frame {
        &self.frames[t]
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }

    /// Shape of every frame, `(channels, height, width)`.
    pub fn frame_shape(&self) -> (usize, usize, usize) {
        self.frames[0].shape()
    }
}

// ---------------------------------------------------------------------------
// Optical flow
// ---------------------------------------------------------------------------

/// Which neighbor a flow field points at. `ToNext` is the flow from frame `t`
/// toward frame `t+1` (defined on `t`'s grid); `ToPrevious` points from `t`
/// toward `t-1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowDirection {
    ToNext,
    ToPrevious,
}

impl FlowDirection {
    /// Short tag used in external flow file names.
    pub fn tag(self) -> &'static str {
        match self {
            FlowDirection::ToNext => "fwd",
            FlowDirection::ToPrevious => "bwd",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "fwd" => Ok(FlowDirection::ToNext),
            "bwd" => Ok(FlowDirection::ToPrevious),
            other => Err(Error::format(format!("unknown flow direction tag {other:?}"))),
        }
    }
}

/// Per-pixel displacement field `(dx, dy)` in pixel units, defined on the
/// source frame's grid and pointing toward the target frame's coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    dx: Array2<f64>,
    dy: Array2<f64>,
    direction: FlowDirection,
}

impl FlowField {
    pub fn new(dx: Array2<f64>, dy: Array2<f64>, direction: FlowDirection) -> Result<Self> {
        if dx.dim() != dy.dim() {
            return Err(Error::shape(format!(
                "flow component shapes differ: {:?} vs {:?}",
                dx.dim(),
                dy.dim()
            )));
        }
        if !dx.iter().chain(dy.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("flow contains non-finite values".into()));
        }
        Ok(FlowField { dx, dy, direction })
    }

    /// Constant displacement field of the given shape.
    pub fn constant(
        height: usize,
        width: usize,
        dx: f64,
        dy: f64,
        direction: FlowDirection,
    ) -> Self {
        FlowField {
            dx: Array2::from_elem((height, width), dx),
            dy: Array2::from_elem((height, width), dy),
            direction,
        }
    }

    pub fn zeros(height: usize, width: usize, direction: FlowDirection) -> Self {
        FlowField::constant(height, width, 0.0, 0.0, direction)
    }

    pub fn height(&self) -> usize {
        self.dx.dim().0
    }

    pub fn width(&self) -> usize {
        self.dx.dim().1
    }

    pub fn direction(&self) -> FlowDirection {
        self.direction
    }

    pub fn dx(&self) -> &Array2<f64> {
        &self.dx
    }

    pub fn dy(&self) -> &Array2<f64> {
        &self.dy
    }

    /// Displacement at pixel `(y, x)`.
    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        (self.dx[[y, x]], self.dy[[y, x]])
    }
}

// ---------------------------------------------------------------------------
// Noise specification
// ---------------------------------------------------------------------------

/// Additive Gaussian noise model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    /// Plain additive white Gaussian noise; noisy values may leave `[0, 1]`.
    Awgn,
    /// AWGN followed by clamping to `[0, 1]`.
    ClippedAwgn,
}

impl NoiseKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "awgn" => Ok(NoiseKind::Awgn),
            "clipped-awgn" => Ok(NoiseKind::ClippedAwgn),
            other => Err(Error::config(format!(
                "unknown noise kind {other:?} (expected awgn or clipped-awgn)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::Awgn => "awgn",
            NoiseKind::ClippedAwgn => "clipped-awgn",
        }
    }
}

/// Noise kind plus standard deviation on the `[0, 1]` intensity scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub sigma: f64,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::config(format!("sigma must be >= 0, got {sigma}")));
        }
        Ok(NoiseSpec { kind, sigma })
    }

    /// Builds a spec from a noise level quoted on the 8-bit `[0, 255]` scale.
    pub fn from_sigma_255(kind: NoiseKind, sigma_255: f64) -> Result<Self> {
        NoiseSpec::new(kind, sigma_255 / 255.0)
    }
}

// ---------------------------------------------------------------------------
// Denoiser configuration
// ---------------------------------------------------------------------------

/// Border margin, either absolute pixels per side or a ratio of the smaller
/// frame dimension per side. Validation resolves ratios to pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MarginSpec {
    Pixels(usize),
    Ratio(f64),
}

/// Alignment mechanism used by the look-ahead module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarpMode {
    /// Backward warping between look-ahead steps, no border ring.
    Backward,
    /// Forward warping onto an enlarged canvas; the border ring retains
    /// pixels that splat out of frame.
    ForwardEnlarge,
    /// Forward warping without enlargement; out-of-frame splats are lost.
    ForwardNoEnlarge,
}

impl WarpMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "backward" => Ok(WarpMode::Backward),
            "forward+enlarge" => Ok(WarpMode::ForwardEnlarge),
            "forward-no-enlarge" => Ok(WarpMode::ForwardNoEnlarge),
            other => Err(Error::config(format!(
                "unknown warp mode {other:?} (expected backward, forward+enlarge or forward-no-enlarge)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            WarpMode::Backward => "backward",
            WarpMode::ForwardEnlarge => "forward+enlarge",
            WarpMode::ForwardNoEnlarge => "forward-no-enlarge",
        }
    }
}

/// Structural configuration of the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    /// Look-ahead depth in frames. `k = 0` disables the look-ahead module
    /// entirely and the model degenerates to a plain forward recurrence.
    pub k: usize,
    /// Border margin per side for the enlarged warp canvas.
    pub border_margin: MarginSpec,
    /// Feature channel width `C`.
    pub channels: usize,
    /// Residual blocks per recurrent module.
    pub num_res_blocks: usize,
    /// Concatenate a constant noise-level plane to every frame input.
    pub use_noise_map: bool,
    pub warp_mode: WarpMode,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            k: 3,
            // A 10% total enlargement of the smaller dimension, i.e. 5% per side.
            border_margin: MarginSpec::Ratio(0.05),
            channels: 32,
            num_res_blocks: 3,
            use_noise_map: true,
            warp_mode: WarpMode::ForwardEnlarge,
        }
    }
}

impl DenoiserConfig {
    /// Margin in pixels; errors when the margin has not been resolved yet.
    pub fn margin_pixels(&self) -> Result<usize> {
        match self.border_margin {
            MarginSpec::Pixels(m) => Ok(m),
            MarginSpec::Ratio(r) => Err(Error::config(format!(
                "border margin ratio {r} not resolved; call validate_config first"
            ))),
        }
    }

    /// Margin actually applied during warping: zero unless the warp mode
    /// enlarges the canvas.
    pub fn effective_margin(&self) -> Result<usize> {
        match self.warp_mode {
            WarpMode::ForwardEnlarge => self.margin_pixels(),
            WarpMode::Backward | WarpMode::ForwardNoEnlarge => Ok(0),
        }
    }

    /// Flat `key = value` rendering, parseable by [`ConfigMap`].
    pub fn to_config_text(&self) -> String {
        let margin = match self.border_margin {
            MarginSpec::Pixels(m) => format!("{m}"),
            MarginSpec::Ratio(r) => format!("{r:?}"),
        };
        format!(
            "k = {}\nborder_margin = {}\nchannels = {}\nnum_res_blocks = {}\nuse_noise_map = {}\nwarp_mode = {}\n",
            self.k, margin, self.channels, self.num_res_blocks, self.use_noise_map,
            self.warp_mode.name()
        )
    }

    /// Extracts the denoiser keys from a parsed config map, falling back to
    /// defaults for absent keys.
    pub fn from_map(map: &mut ConfigMap) -> Result<Self> {
        let defaults = DenoiserConfig::default();
        let k = match map.take_i64("k")? {
            Some(v) if v < 0 => return Err(Error::config(format!("k must be >= 0, got {v}"))),
            Some(v) => v as usize,
            None => defaults.k,
        };
        let border_margin = match map.take_raw("border_margin") {
            Some(s) => parse_margin(&s)?,
            None => defaults.border_margin,
        };
        let channels = match map.take_i64("channels")? {
            Some(v) if v <= 0 => {
                return Err(Error::config(format!("channels must be >= 1, got {v}")))
            }
            Some(v) => v as usize,
            None => defaults.channels,
        };
        let num_res_blocks = match map.take_i64("num_res_blocks")? {
            Some(v) if v <= 0 => {
                return Err(Error::config(format!("num_res_blocks must be >= 1, got {v}")))
            }
            Some(v) => v as usize,
            None => defaults.num_res_blocks,
        };
        let use_noise_map = map.take_bool("use_noise_map")?.unwrap_or(defaults.use_noise_map);
        let warp_mode = match map.take_raw("warp_mode") {
            Some(s) => WarpMode::parse(&s)?,
            None => defaults.warp_mode,
        };
        Ok(DenoiserConfig { k, border_margin, channels, num_res_blocks, use_noise_map, warp_mode })
    }
}

fn parse_margin(s: &str) -> Result<MarginSpec> {
    if s.contains('.') {
        let r: f64 = s
            .parse()
            .map_err(|_| Error::config(format!("bad border_margin value {s:?}")))?;
        if !(0.0..1.0).contains(&r) {
            return Err(Error::config(format!("margin ratio must be in [0, 1), got {r}")));
        }
        Ok(MarginSpec::Ratio(r))
    } else {
        let m: i64 = s
            .parse()
            .map_err(|_| Error::config(format!("bad border_margin value {s:?}")))?;
        if m < 0 {
            return Err(Error::config(format!("margin must be >= 0, got {m}")));
        }
        Ok(MarginSpec::Pixels(m as usize))
    }
}

/// Normalizes a configuration against a concrete frame shape: ratio margins
/// are resolved to integer pixels (rounded half-up) and contradictions are
/// rejected rather than silently downgraded.
///
/// Idempotent: validating an already-validated config returns it unchanged.
pub fn validate_config(cfg: &DenoiserConfig, frame_shape: (usize, usize)) -> Result<DenoiserConfig> {
    let (height, width) = frame_shape;
    if height == 0 || width == 0 {
        return Err(Error::config("frame dimensions must be positive"));
    }
    if cfg.channels == 0 {
        return Err(Error::config("channels must be >= 1"));
    }
    if cfg.num_res_blocks == 0 {
        return Err(Error::config("num_res_blocks must be >= 1"));
    }
    let min_dim = height.min(width);
    let margin = match cfg.border_margin {
        MarginSpec::Pixels(m) => m,
        MarginSpec::Ratio(r) => {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::config(format!("margin ratio must be in [0, 1), got {r}")));
            }
            // round half-up
            (r * min_dim as f64 + 0.5).floor() as usize
        }
    };
    if margin >= min_dim.div_ceil(2) && margin > 0 {
        return Err(Error::config(format!(
            "margin {margin} px too large for {height}x{width} frames (must be < min(H,W)/2)"
        )));
    }
    if cfg.warp_mode == WarpMode::ForwardEnlarge && margin == 0 {
        return Err(Error::config(
            "warp mode forward+enlarge requires a border margin > 0; \
             use forward-no-enlarge to warp without a ring",
        ));
    }
    Ok(DenoiserConfig { border_margin: MarginSpec::Pixels(margin), ..cfg.clone() })
}

// ---------------------------------------------------------------------------
// Flat key = value config files
// ---------------------------------------------------------------------------

/// Parsed `key = value` config text. Consumers take keys out of the map;
/// [`ConfigMap::finish`] rejects any leftovers so typos surface as errors.
#[derive(Debug, Clone, Default)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    /// Parses UTF-8 text with one `key = value` pair per line and `#`
    /// comments. Later duplicates override earlier ones.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                return Err(Error::config(format!("line {}: empty key", lineno + 1)));
            }
            entries.insert(key.to_string(), value.to_string());
        }
        Ok(ConfigMap { entries })
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        ConfigMap::parse(&text)
    }

    /// Inserts or overrides a key (used for flag-over-file precedence).
    pub fn set(&mut self, key: &str, value: String) {
        self.entries.insert(key.to_string(), value);
    }

    pub fn take_raw(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn take_i64(&mut self, key: &str) -> Result<Option<i64>> {
        match self.take_raw(key) {
            None => Ok(None),
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|_| Error::config(format!("key {key}: expected integer, got {s:?}"))),
        }
    }

    pub fn take_f64(&mut self, key: &str) -> Result<Option<f64>> {
        match self.take_raw(key) {
            None => Ok(None),
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|_| Error::config(format!("key {key}: expected number, got {s:?}"))),
        }
    }

    pub fn take_bool(&mut self, key: &str) -> Result<Option<bool>> {
        match self.take_raw(key) {
            None => Ok(None),
            Some(s) => match s.as_str() {
                "true" | "on" | "1" => Ok(Some(true)),
                "false" | "off" | "0" => Ok(Some(false)),
                other => Err(Error::config(format!("key {key}: expected boolean, got {other:?}"))),
            },
        }
    }

    /// Errors if any keys were never consumed.
    pub fn finish(self) -> Result<()> {
        if self.entries.is_empty() {
            Ok(())
        } else {
            let keys: Vec<&str> = self.entries.keys().map(|s| s.as_str()).collect();
            Err(Error::config(format!("unknown config keys: {}", keys.join(", "))))
        }
    }
}
