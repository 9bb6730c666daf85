//! The denoising network: two structurally identical recurrent residual
//! stacks (the history module and the look-ahead or backward module), and a
//! two-convolution decoder with a global residual connection from the noisy
//! input frame.
//!
//! Every step exists in two forms: a graph builder used by the pipelines and
//! the trainer (differentiable, operates on [`Graph`] nodes) and a plain
//! value-level wrapper for direct use in tests and small tools.

use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::conv::ConvLayer;
use crate::error::{Error, Result};
use crate::flow::FlowProvider;
use crate::types::{ConfigMap, DenoiserConfig, FlowDirection, FlowField, Frame, WarpMode};
use crate::warp::{BorderRing, FeatureMap};

/// Which recurrent stack to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackSel {
    /// History module, propagating from the first frame onward.
    Forward,
    /// The second module: look-ahead in the streaming model, backward in the
    /// bidirectional baseline. Identical architecture to the forward stack.
    Second,
}

/// State carried by the look-ahead module between steps: the hidden feature,
/// plus the ring and flow emitted by the step that produced it (absent only
/// at the first look-ahead frame).
#[derive(Debug, Clone)]
pub struct LookaheadState {
    pub h: FeatureMap,
    pub ring: Option<BorderRing>,
    pub flow: Option<FlowField>,
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// All convolution parameters, stored flat. Layer order: forward stack
/// (input conv, then conv1/conv2 per block), second stack likewise, then the
/// two decoder convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub channels: usize,
    pub num_res_blocks: usize,
    pub frame_channels: usize,
    pub use_noise_map: bool,
    pub layers: Vec<ConvLayer>,
}

impl ModelParams {
    /// Convolutions per recurrent stack.
    pub fn layers_per_stack(&self) -> usize {
        1 + 2 * self.num_res_blocks
    }

    fn stack_base(&self, sel: StackSel) -> usize {
        match sel {
            StackSel::Forward => 0,
            StackSel::Second => self.layers_per_stack(),
        }
    }

    fn decoder_base(&self) -> usize {
        2 * self.layers_per_stack()
    }

    /// Channels fed to a recurrent stack: frame, optional noise plane,
    /// hidden feature.
    pub fn stack_input_channels(&self) -> usize {
        self.frame_channels + usize::from(self.use_noise_map) + self.channels
    }

    /// Default initialization: fan-in-scaled uniform convolutions with the
    /// final convolution of every residual block and of the decoder zeroed,
    /// so a fresh model is the identity mapping on its input frame.
    pub fn init(cfg: &DenoiserConfig, frame_channels: usize, seed: u64) -> Self {
        Self::init_with(cfg, frame_channels, seed, true)
    }

    /// Initialization with every convolution random (no identity-at-init),
    /// which gradient tests and equivalence checks use to avoid degenerate
    /// zero paths.
    pub fn init_fully_random(cfg: &DenoiserConfig, frame_channels: usize, seed: u64) -> Self {
        Self::init_with(cfg, frame_channels, seed, false)
    }

    fn init_with(cfg: &DenoiserConfig, frame_channels: usize, seed: u64, zero_last: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.channels;
        let n = cfg.num_res_blocks;
        let in_ch = frame_channels + usize::from(cfg.use_noise_map) + c;
        let mut layers = Vec::new();
        for _ in 0..2 {
            layers.push(ConvLayer::init_uniform(c, in_ch, &mut rng));
            for _ in 0..n {
                layers.push(ConvLayer::init_uniform(c, c, &mut rng));
                let last = ConvLayer::init_uniform(c, c, &mut rng);
                layers.push(if zero_last { ConvLayer::zeros(c, c) } else { last });
            }
        }
        layers.push(ConvLayer::init_uniform(c, 2 * c, &mut rng));
        let final_conv = ConvLayer::init_uniform(frame_channels, c, &mut rng);
        layers.push(if zero_last {
            ConvLayer::zeros(frame_channels, c)
        } else {
            final_conv
        });
        ModelParams {
            channels: c,
            num_res_blocks: n,
            frame_channels,
            use_noise_map: cfg.use_noise_map,
            layers,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    /// Same-shaped zeroed parameter set, used as a gradient accumulator.
    pub fn zeros_like(&self) -> Vec<ConvLayer> {
        self.layers.iter().map(|l| l.zeros_like()).collect()
    }

    /// One tensor name per layer, in storage order.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for stack in ["forward", "lookahead"] {
            names.push(format!("{stack}.in"));
            for b in 0..self.num_res_blocks {
                names.push(format!("{stack}.block{b}.conv1"));
                names.push(format!("{stack}.block{b}.conv2"));
            }
        }
        names.push("decoder.conv1".to_string());
        names.push("decoder.conv2".to_string());
        names
    }
}

/// Closed-form parameter count for a model of width `channels`, depth
/// `num_res_blocks` per stack, `frame_channels` input channels and an
/// optional noise plane.
pub fn param_count_formula(
    channels: usize,
    num_res_blocks: usize,
    frame_channels: usize,
    use_noise_map: bool,
) -> usize {
    let c = channels;
    let in_ch = frame_channels + usize::from(use_noise_map) + c;
    let stack = (in_ch * c * 9 + c) + num_res_blocks * 2 * (c * c * 9 + c);
    let decoder = (2 * c * c * 9 + c) + (c * frame_channels * 9 + frame_channels);
    2 * stack + decoder
}

// ---------------------------------------------------------------------------
// Graph-building steps
// ---------------------------------------------------------------------------

/// Constant noise-level plane concatenated to frame inputs.
pub fn noise_plane(height: usize, width: usize, sigma: f64) -> Array3<f64> {
    Array3::from_elem((1, height, width), sigma)
}

/// Applies one recurrent stack: input convolution, then residual blocks
/// (conv, relu, conv, skip add).
pub fn stack_graph(g: &mut Graph, params: &ModelParams, sel: StackSel, input: NodeId) -> NodeId {
    let base = params.stack_base(sel);
    let mut x = g.conv3x3(&params.layers, base, input);
    for b in 0..params.num_res_blocks {
        let c1 = base + 1 + 2 * b;
        let y = g.conv3x3(&params.layers, c1, x);
        let y = g.relu(y);
        let y = g.conv3x3(&params.layers, c1 + 1, y);
        x = g.add(x, y);
    }
    x
}

/// Assembles the stack input: frame planes, optional noise plane, hidden
/// feature.
fn stack_input(
    g: &mut Graph,
    params: &ModelParams,
    frame: &Frame,
    sigma: f64,
    hidden: NodeId,
) -> NodeId {
    let y = g.input(frame.data().clone());
    if params.use_noise_map {
        let nm = g.input(noise_plane(frame.height(), frame.width(), sigma));
        g.concat_channels(&[y, nm, hidden])
    } else {
        g.concat_channels(&[y, hidden])
    }
}

/// One step of the history module. At `t = 1` (no previous frame or hidden
/// state) the hidden input is zeros and no warp is performed; otherwise the
/// previous hidden feature is backward-warped along the flow from `y_t`
/// toward `y_{t-1}` before aggregation.
pub fn forward_step_graph(
    g: &mut Graph,
    params: &ModelParams,
    y_t: &Frame,
    t_index: usize,
    y_prev: Option<&Frame>,
    h_prev: Option<NodeId>,
    provider: &FlowProvider,
    sigma: f64,
) -> Result<NodeId> {
    let hidden = match (y_prev, h_prev) {
        (None, None) => g.zeros(params.channels, y_t.height(), y_t.width()),
        (Some(prev), Some(h)) => {
            let flow = provider.estimate_flow(y_t, prev, t_index, FlowDirection::ToPrevious)?;
            g.backward_warp(h, Rc::new(flow), 0)?
        }
        _ => {
            return Err(Error::State(
                "forward step needs previous frame and hidden state together".into(),
            ))
        }
    };
    let input = stack_input(g, params, y_t, sigma, hidden);
    Ok(stack_graph(g, params, StackSel::Forward, input))
}

/// Ring and flow emitted by a look-ahead step, buffered for the warp-back
/// chain. The ring node is an enlarged canvas with zero interior (an all-zero
/// plain canvas when the warp mode has no margin).
pub type EmittedRing = (NodeId, Rc<FlowField>);

/// One step of the look-ahead module, advancing its hidden feature from the
/// current frame to the next one. The first call (no current frame or state)
/// initializes from zeros and emits nothing; every later call emits the
/// border ring and forward flow consumed later by [`warp_back_graph`].
#[allow(clippy::too_many_arguments)]
pub fn lookahead_step_graph(
    g: &mut Graph,
    params: &ModelParams,
    cfg: &DenoiserConfig,
    y_next: &Frame,
    next_index: usize,
    y_cur: Option<&Frame>,
    h_cur: Option<NodeId>,
    provider: &FlowProvider,
    sigma: f64,
) -> Result<(NodeId, Option<EmittedRing>)> {
    let margin = cfg.effective_margin()?;
    let (h, w) = (y_next.height(), y_next.width());
    let (hidden, emitted) = match (y_cur, h_cur) {
        (None, None) => (g.zeros(params.channels, h, w), None),
        (Some(cur), Some(hc)) => {
            let cur_index = next_index - 1;
            let flow_fwd =
                Rc::new(provider.estimate_flow(cur, y_next, cur_index, FlowDirection::ToNext)?);
            match cfg.warp_mode {
                WarpMode::ForwardEnlarge | WarpMode::ForwardNoEnlarge => {
                    let canvas = g.forward_warp_enlarged(hc, flow_fwd.clone(), margin)?;
                    let ring = g.ring_mask(canvas, margin);
                    let interior = g.interior(canvas, margin);
                    (interior, Some((ring, flow_fwd)))
                }
                WarpMode::Backward => {
                    let flow_bwd = provider.estimate_flow(
                        y_next,
                        cur,
                        next_index,
                        FlowDirection::ToPrevious,
                    )?;
                    let warped = g.backward_warp(hc, Rc::new(flow_bwd), 0)?;
                    let ring = g.zeros(params.channels, h, w);
                    (warped, Some((ring, flow_fwd)))
                }
            }
        }
        _ => {
            return Err(Error::State(
                "look-ahead step needs current frame and state together".into(),
            ))
        }
    };
    let input = stack_input(g, params, y_next, sigma, hidden);
    let new_h = stack_graph(g, params, StackSel::Second, input);
    Ok((new_h, emitted))
}

/// Aligns a far look-ahead feature back to the current frame by merging each
/// buffered ring and undoing its step with the same flow that produced it.
/// `entries` are ordered oldest first. Empty input returns the feature as is.
pub fn warp_back_graph(
    g: &mut Graph,
    h_far: NodeId,
    entries: &[EmittedRing],
    margin: usize,
) -> Result<NodeId> {
    let mut current = h_far;
    for (ring, flow) in entries.iter().rev() {
        let merged = g.merge_border(current, *ring, margin)?;
        current = g.backward_warp(merged, flow.clone(), margin)?;
    }
    Ok(current)
}

/// Decoder: concatenated features through two convolutions, plus the noisy
/// frame as a global residual. Output is left unclamped; emission paths
/// clamp to `[0, 1]`.
pub fn decode_graph(
    g: &mut Graph,
    params: &ModelParams,
    h_f: NodeId,
    h_l: NodeId,
    y_t: &Frame,
) -> NodeId {
    let cat = g.concat_channels(&[h_f, h_l]);
    let base = params.decoder_base();
    let x = g.conv3x3(&params.layers, base, cat);
    let x = g.relu(x);
    let x = g.conv3x3(&params.layers, base + 1, x);
    g.add_const(x, y_t.data())
}

// ---------------------------------------------------------------------------
// Value-level wrappers
// ---------------------------------------------------------------------------

/// Applies one recurrent stack to already-concatenated input planes.
pub fn residual_stack(params: &ModelParams, sel: StackSel, input: &Array3<f64>) -> FeatureMap {
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let out = stack_graph(&mut g, params, sel, x);
    g.value(out).clone()
}

/// Value-level forward step; see [`forward_step_graph`].
pub fn forward_step(
    params: &ModelParams,
    y_t: &Frame,
    t_index: usize,
    y_prev: Option<&Frame>,
    h_prev: Option<&FeatureMap>,
    provider: &FlowProvider,
    sigma: f64,
) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let h_node = h_prev.map(|h| g.input(h.clone()));
    let out = forward_step_graph(&mut g, params, y_t, t_index, y_prev, h_node, provider, sigma)?;
    Ok(g.value(out).clone())
}

/// Value-level look-ahead step; see [`lookahead_step_graph`].
#[allow(clippy::too_many_arguments)]
pub fn lookahead_step(
    params: &ModelParams,
    cfg: &DenoiserConfig,
    y_next: &Frame,
    next_index: usize,
    y_cur: Option<&Frame>,
    state: Option<&LookaheadState>,
    provider: &FlowProvider,
    sigma: f64,
) -> Result<LookaheadState> {
    let mut g = Graph::new();
    let h_node = state.map(|s| g.input(s.h.clone()));
    let (h, emitted) = lookahead_step_graph(
        &mut g, params, cfg, y_next, next_index, y_cur, h_node, provider, sigma,
    )?;
    let margin = cfg.effective_margin()?;
    let (ring, flow) = match emitted {
        None => (None, None),
        Some((ring_node, flow)) => {
            let canvas = g.value(ring_node).clone();
            let ring = ring_from_canvas(canvas, margin);
            (Some(ring), Some((*flow).clone()))
        }
    };
    Ok(LookaheadState { h: g.value(h).clone(), ring, flow })
}

fn ring_from_canvas(canvas: Array3<f64>, margin: usize) -> BorderRing {
    // the graph's ring nodes already have a zero interior; round-trip through
    // split to get a BorderRing with the right invariants
    let e = crate::warp::EnlargedFeature::new(canvas, margin).expect("ring canvas shape");
    crate::warp::split_border(&e).0
}

/// Value-level decode; see [`decode_graph`].
pub fn decode(params: &ModelParams, h_f: &FeatureMap, h_l: &FeatureMap, y_t: &Frame) -> Result<Frame> {
    let mut g = Graph::new();
    let a = g.input(h_f.clone());
    let b = g.input(h_l.clone());
    let out = decode_graph(&mut g, params, a, b, y_t);
    Frame::new(g.value(out).clone())
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 5] = b"FLOP1";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes parameters and their configuration as little-endian binary: magic
/// `FLOP1`, u32 version, a length-prefixed flat config block, then named
/// parameter blobs (length-prefixed UTF-8 name, u32 rank, u32 dims, f32 data
/// row-major).
pub fn save_checkpoint(path: &Path, params: &ModelParams, cfg: &DenoiserConfig) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let mut config_text = cfg.to_config_text();
    config_text.push_str(&format!("frame_channels = {}\n", params.frame_channels));
    buf.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_text.as_bytes());

    let names = params.layer_names();
    buf.extend_from_slice(&((names.len() * 2) as u32).to_le_bytes());
    for (layer, name) in params.layers.iter().zip(&names) {
        write_tensor(
            &mut buf,
            &format!("{name}.weight"),
            layer.weight.shape(),
            layer.weight.as_slice().unwrap(),
        );
        write_tensor(
            &mut buf,
            &format!("{name}.bias"),
            layer.bias.shape(),
            layer.bias.as_slice().unwrap(),
        );
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

fn write_tensor(buf: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f64]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Loads a checkpoint written by [`save_checkpoint`], validating tensor names
/// and shapes against the embedded configuration.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, DenoiserConfig)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?
        .read_to_end(&mut bytes)?;
    let mut r = Cursor { bytes: &bytes, pos: 0 };
    if r.take(5)? != CHECKPOINT_MAGIC {
        return Err(Error::format(format!("{}: not a FLOP1 checkpoint", path.display())));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let config_len = r.u32()? as usize;
    let config_text = std::str::from_utf8(r.take(config_len)?)
        .map_err(|_| Error::format("checkpoint config block is not UTF-8"))?;
    let mut map = ConfigMap::parse(config_text)?;
    let cfg = DenoiserConfig::from_map(&mut map)?;
    let frame_channels = map
        .take_i64("frame_channels")?
        .ok_or_else(|| Error::format("checkpoint config lacks frame_channels"))? as usize;
    map.finish()?;

    let mut params = ModelParams::init(&cfg, frame_channels, 0);
    let names = params.layer_names();
    let num_tensors = r.u32()? as usize;
    if num_tensors != names.len() * 2 {
        return Err(Error::format(format!(
            "checkpoint has {num_tensors} tensors, expected {}",
            names.len() * 2
        )));
    }
    for (layer, name) in params.layers.iter_mut().zip(&names) {
        let wdims = layer.weight.shape().to_vec();
        read_tensor_into(&mut r, &format!("{name}.weight"), layer.weight.as_slice_mut().unwrap(), wdims)?;
        let bdims = layer.bias.shape().to_vec();
        read_tensor_into(&mut r, &format!("{name}.bias"), layer.bias.as_slice_mut().unwrap(), bdims)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::format("trailing bytes after checkpoint tensors"));
    }
    Ok((params, cfg))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format("unexpected end of file"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn read_tensor_into(
    r: &mut Cursor,
    expected_name: &str,
    out: &mut [f64],
    expected_dims: Vec<usize>,
) -> Result<()> {
    let name_len = r.u32()? as usize;
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|_| Error::format("tensor name is not UTF-8"))?;
    if name != expected_name {
        return Err(Error::format(format!(
            "unexpected tensor {name:?}, wanted {expected_name:?}"
        )));
    }
    let rank = r.u32()? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.u32()? as usize);
    }
    if dims != expected_dims {
        return Err(Error::format(format!(
            "tensor {name}: dims {dims:?} do not match expected {expected_dims:?}"
        )));
    }
    let count: usize = dims.iter().product();
    if count != out.len() {
        return Err(Error::format(format!("tensor {name}: element count mismatch")));
    }
    let raw = r.take(count * 4)?;
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        out[i] = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
    }
    Ok(())
}

/// Zero feature plane (the look-ahead input for `k = 0` and the
/// forward-only decode path).
pub fn zero_feature(channels: usize, height: usize, width: usize) -> FeatureMap {
    Array3::zeros((channels, height, width))
}
