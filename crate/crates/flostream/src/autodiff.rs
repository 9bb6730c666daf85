//! Minimal reverse-mode differentiation over `(C, H, W)` feature maps.
//!
//! A [`Graph`] records every operation as it computes values eagerly; the
//! backward pass walks the tape in reverse, accumulating gradients for node
//! values and for convolution parameters (referenced by index into a shared
//! layer slice). Flow fields are constants: warping ops differentiate with
//! respect to feature values only.
//!
//! Losses are not graph nodes. Callers compute scalar losses from output
//! values and seed the backward pass with the corresponding output gradients,
//! which keeps the tape purely tensor-valued.

use std::rc::Rc;

use ndarray::{s, Array2, Array3};

use crate::conv::{conv3x3_forward, conv3x3_grad_input, conv3x3_grad_params, ConvLayer};
use crate::error::{Error, Result};
use crate::types::FlowField;
use crate::warp;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Input,
    Conv { x: NodeId, layer: usize },
    Relu { x: NodeId },
    Add { a: NodeId, b: NodeId },
    ConcatChannels { parts: Vec<(NodeId, usize)> },
    BackwardWarp { x: NodeId, flow: Rc<FlowField>, offset: usize },
    ForwardWarpEnlarged { x: NodeId, flow: Rc<FlowField>, margin: usize, den: Array2<f64> },
    Interior { x: NodeId, margin: usize },
    RingMask { x: NodeId, margin: usize },
    MergeBorder { interior: NodeId, ring: NodeId, margin: usize },
    AddConst { x: NodeId },
}

struct Node {
    value: Array3<f64>,
    op: Op,
}

/// Eager computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array3<f64> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Array3<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant input; no gradient flows past it.
    pub fn input(&mut self, value: Array3<f64>) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn zeros(&mut self, c: usize, h: usize, w: usize) -> NodeId {
        self.input(Array3::zeros((c, h, w)))
    }

    /// 3x3 convolution by `layers[layer]`, stride 1, zero padding 1.
    pub fn conv3x3(&mut self, layers: &[ConvLayer], layer: usize, x: NodeId) -> NodeId {
        let out = conv3x3_forward(&layers[layer], self.value(x));
        self.push(out, Op::Conv { x, layer })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape mismatch");
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add { a, b })
    }

    /// Stacks parts along the channel axis.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let (_, h, w) = self.value(parts[0]).dim();
        let mut meta = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let d = self.value(p).dim();
            assert_eq!((d.1, d.2), (h, w), "concat spatial mismatch");
            meta.push((p, d.0));
            total += d.0;
        }
        let mut out = Array3::zeros((total, h, w));
        let mut offset = 0;
        for &(p, c) in &meta {
            out.slice_mut(s![offset..offset + c, .., ..])
                .assign(self.value(p));
            offset += c;
        }
        self.push(out, Op::ConcatChannels { parts: meta })
    }

    /// Bilinear gather; see [`warp::backward_warp`].
    pub fn backward_warp(
        &mut self,
        x: NodeId,
        flow: Rc<FlowField>,
        offset: usize,
    ) -> Result<NodeId> {
        let out = warp::backward_warp(self.value(x), &flow, offset)?;
        Ok(self.push(out, Op::BackwardWarp { x, flow, offset }))
    }

    /// Average-splat forward warp onto a canvas enlarged by `margin`; see
    /// [`warp::forward_warp_enlarged`].
    pub fn forward_warp_enlarged(
        &mut self,
        x: NodeId,
        flow: Rc<FlowField>,
        margin: usize,
    ) -> Result<NodeId> {
        let (canvas, den) = warp::forward_warp_accumulate(self.value(x), &flow, margin)?;
        let out = warp::normalize_splat(canvas, &den);
        Ok(self.push(out, Op::ForwardWarpEnlarged { x, flow, margin, den }))
    }

    /// Interior crop of an enlarged canvas (one half of a border split).
    pub fn interior(&mut self, x: NodeId, margin: usize) -> NodeId {
        let (c, ch, cw) = self.value(x).dim();
        assert!(ch > 2 * margin && cw > 2 * margin, "canvas too small for margin");
        let out = if margin == 0 {
            self.value(x).clone()
        } else {
            let _ = c;
            self.value(x)
                .slice(s![.., margin..ch - margin, margin..cw - margin])
                .to_owned()
        };
        self.push(out, Op::Interior { x, margin })
    }

    /// Canvas with the interior zeroed (the ring half of a border split).
    pub fn ring_mask(&mut self, x: NodeId, margin: usize) -> NodeId {
        let (_, ch, cw) = self.value(x).dim();
        let mut out = self.value(x).clone();
        if margin == 0 {
            out.fill(0.0);
        } else {
            out.slice_mut(s![.., margin..ch - margin, margin..cw - margin])
                .fill(0.0);
        }
        self.push(out, Op::RingMask { x, margin })
    }

    /// Reassembles a canvas from an interior feature and a zero-interior
    /// ring canvas.
    pub fn merge_border(&mut self, interior: NodeId, ring: NodeId, margin: usize) -> Result<NodeId> {
        let (c, h, w) = self.value(interior).dim();
        let rd = self.value(ring).dim();
        if rd != (c, h + 2 * margin, w + 2 * margin) {
            return Err(Error::shape(format!(
                "merge: ring {rd:?} does not fit interior {:?} with margin {margin}",
                (c, h, w)
            )));
        }
        let mut out = self.value(ring).clone();
        out.slice_mut(s![.., margin..margin + h, margin..margin + w])
            .assign(self.value(interior));
        Ok(self.push(out, Op::MergeBorder { interior, ring, margin }))
    }

    /// `x + c` for a constant `c` (the global residual from the input frame).
    pub fn add_const(&mut self, x: NodeId, c: &Array3<f64>) -> NodeId {
        assert_eq!(self.value(x).dim(), c.dim(), "add_const shape mismatch");
        let out = self.value(x) + c;
        self.push(out, Op::AddConst { x })
    }

    /// Reverse accumulation from the seeded output gradients. Parameter
    /// gradients are added into `grads`, which must mirror `layers` in shape.
    pub fn backward(
        &self,
        seeds: Vec<(NodeId, Array3<f64>)>,
        layers: &[ConvLayer],
        grads: &mut [ConvLayer],
    ) {
        assert_eq!(layers.len(), grads.len());
        let mut node_grads: Vec<Option<Array3<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            assert_eq!(self.value(id).dim(), g.dim(), "seed shape mismatch");
            accumulate(&mut node_grads[id.0], g);
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = node_grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Conv { x, layer } => {
                    conv3x3_grad_params(&self.nodes[x.0].value, &g, &mut grads[*layer]);
                    let gx = conv3x3_grad_input(&layers[*layer], &g);
                    accumulate(&mut node_grads[x.0], gx);
                }
                Op::Relu { x } => {
                    let mut gx = g;
                    gx.zip_mut_with(&self.nodes[x.0].value, |gv, &xv| {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                    accumulate(&mut node_grads[x.0], gx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut node_grads[a.0], g.clone());
                    accumulate(&mut node_grads[b.0], g);
                }
                Op::ConcatChannels { parts } => {
                    let mut offset = 0;
                    for &(p, c) in parts {
                        let gp = g.slice(s![offset..offset + c, .., ..]).to_owned();
                        accumulate(&mut node_grads[p.0], gp);
                        offset += c;
                    }
                }
                Op::BackwardWarp { x, flow, offset } => {
                    let shape = self.nodes[x.0].value.dim();
                    let gx = warp::backward_warp_grad(
                        (shape.0, shape.1, shape.2),
                        flow,
                        *offset,
                        &g,
                    );
                    accumulate(&mut node_grads[x.0], gx);
                }
                Op::ForwardWarpEnlarged { x, flow, margin, den } => {
                    let shape = self.nodes[x.0].value.dim();
                    let gx = warp::forward_warp_grad(
                        (shape.0, shape.1, shape.2),
                        flow,
                        *margin,
                        den,
                        &g,
                    );
                    accumulate(&mut node_grads[x.0], gx);
                }
                Op::Interior { x, margin } => {
                    let (c, ch, cw) = self.nodes[x.0].value.dim();
                    let mut gx = Array3::zeros((c, ch, cw));
                    gx.slice_mut(s![.., *margin..ch - margin, *margin..cw - margin])
                        .assign(&g);
                    accumulate(&mut node_grads[x.0], gx);
                }
                Op::RingMask { x, margin } => {
                    let (_, ch, cw) = self.nodes[x.0].value.dim();
                    let mut gx = g;
                    if *margin == 0 {
                        gx.fill(0.0);
                    } else {
                        gx.slice_mut(s![.., *margin..ch - margin, *margin..cw - margin])
                            .fill(0.0);
                    }
                    accumulate(&mut node_grads[x.0], gx);
                }
                Op::MergeBorder { interior, ring, margin } => {
                    let (c, h, w) = self.nodes[interior.0].value.dim();
                    let _ = c;
                    let gi = g
                        .slice(s![.., *margin..margin + h, *margin..margin + w])
                        .to_owned();
                    accumulate(&mut node_grads[interior.0], gi);
                    let mut gr = g;
                    if *margin > 0 {
                        gr.slice_mut(s![.., *margin..margin + h, *margin..margin + w])
                            .fill(0.0);
                    } else {
                        gr.fill(0.0);
                    }
                    accumulate(&mut node_grads[ring.0], gr);
                }
                Op::AddConst { x } => {
                    accumulate(&mut node_grads[x.0], g);
                }
            }
        }
    }
}

fn accumulate(slot: &mut Option<Array3<f64>>, g: Array3<f64>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => acc.zip_mut_with(&g, |a, b| *a += b),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::FlowDirection;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((c, h, w), |_| rng.random_range(-1.0..1.0))
    }

    /// Builds a small graph touching every op and probes full parameter and
    /// fan-out gradients against central finite differences.
    fn build_loss(layers: &[ConvLayer], input: &Array3<f64>, probe: &Array3<f64>) -> f64 {
        let mut g = Graph::new();
        let (out, _) = build_graph(&mut g, layers, input);
        g.value(out).iter().zip(probe.iter()).map(|(a, b)| a * b).sum()
    }

    fn build_graph(
        g: &mut Graph,
        layers: &[ConvLayer],
        input: &Array3<f64>,
    ) -> (NodeId, NodeId) {
        let (c, h, w) = input.dim();
        let m = 2;
        let flow = Rc::new(FlowField::constant(h, w, 0.7, -0.4, FlowDirection::ToNext));
        let x = g.input(input.clone());
        let c0 = g.conv3x3(layers, 0, x);
        let r = g.relu(c0);
        // fan-out: c0 feeds both the relu and an add
        let a = g.add(r, c0);
        let e = g.forward_warp_enlarged(a, flow.clone(), m).unwrap();
        let ring = g.ring_mask(e, m);
        let interior = g.interior(e, m);
        let c1 = g.conv3x3(layers, 1, interior);
        let merged = g.merge_border(c1, ring, m).unwrap();
        let back = g
            .backward_warp(merged, Rc::new(FlowField::constant(h, w, 0.3, 0.2, FlowDirection::ToNext)), m)
            .unwrap();
        let cat = g.concat_channels(&[back, interior]);
        let c2 = g.conv3x3(layers, 2, cat);
        let out = g.add_const(c2, input);
        let _ = (c, w);
        (out, x)
    }

    #[test]
    fn full_graph_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (c, h, w) = (2, 6, 6);
        let layers = vec![
            ConvLayer::init_uniform(c, c, &mut rng),
            ConvLayer::init_uniform(c, c, &mut rng),
            ConvLayer::init_uniform(c, 2 * c, &mut rng),
        ];
        let input = rand_arr(&mut rng, c, h, w);
        let probe = rand_arr(&mut rng, c, h, w);

        let mut graph = Graph::new();
        let (out, _) = build_graph(&mut graph, &layers, &input);
        let mut grads: Vec<ConvLayer> = layers.iter().map(|l| l.zeros_like()).collect();
        graph.backward(vec![(out, probe.clone())], &layers, &mut grads);

        let step = 1e-5;
        let mut checked = 0;
        for li in 0..layers.len() {
            for _ in 0..12 {
                let idx = (
                    rng.random_range(0..layers[li].c_out()),
                    rng.random_range(0..layers[li].c_in()),
                    rng.random_range(0..3),
                    rng.random_range(0..3),
                );
                let mut plus = layers.clone();
                plus[li].weight[idx] += step;
                let mut minus = layers.clone();
                minus[li].weight[idx] -= step;
                let numeric =
                    (build_loss(&plus, &input, &probe) - build_loss(&minus, &input, &probe))
                        / (2.0 * step);
                let a = grads[li].weight[idx];
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (a - numeric).abs() / denom < 1e-3,
                    "layer {li} weight {idx:?}: analytic {a} vs numeric {numeric}"
                );
                checked += 1;
            }
            // biases too
            let co = rng.random_range(0..layers[li].c_out());
            let mut plus = layers.clone();
            plus[li].bias[co] += step;
            let mut minus = layers.clone();
            minus[li].bias[co] -= step;
            let numeric = (build_loss(&plus, &input, &probe)
                - build_loss(&minus, &input, &probe))
                / (2.0 * step);
            let a = grads[li].bias[co];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            assert!((a - numeric).abs() / denom < 1e-3);
            checked += 1;
        }
        assert!(checked >= 39);
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        // y = relu(x) + x consumed twice; d(sum(y))/d(conv bias) must count
        // both paths.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let layers = vec![ConvLayer::init_uniform(1, 1, &mut rng)];
        let input = rand_arr(&mut rng, 1, 4, 4);

        let loss = |ls: &[ConvLayer]| -> f64 {
            let mut g = Graph::new();
            let x = g.input(input.clone());
            let c = g.conv3x3(ls, 0, x);
            let r = g.relu(c);
            let y = g.add(r, c);
            g.value(y).sum()
        };

        let mut g = Graph::new();
        let x = g.input(input.clone());
        let c = g.conv3x3(&layers, 0, x);
        let r = g.relu(c);
        let y = g.add(r, c);
        let ones = Array3::from_elem(g.value(y).dim(), 1.0);
        let mut grads = vec![layers[0].zeros_like()];
        g.backward(vec![(y, ones)], &layers, &mut grads);

        let step = 1e-6;
        let mut plus = layers.clone();
        plus[0].bias[0] += step;
        let mut minus = layers.clone();
        minus[0].bias[0] -= step;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * step);
        let a = grads[0].bias[0];
        assert!((a - numeric).abs() / numeric.abs().max(1e-8) < 1e-5, "{a} vs {numeric}");
    }

    #[test]
    fn merge_and_split_round_trip_in_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let canvas = rand_arr(&mut rng, 2, 8, 8);
        let mut g = Graph::new();
        let x = g.input(canvas.clone());
        let ring = g.ring_mask(x, 2);
        let interior = g.interior(x, 2);
        let merged = g.merge_border(interior, ring, 2).unwrap();
        assert_eq!(g.value(merged), &canvas);
    }
}
