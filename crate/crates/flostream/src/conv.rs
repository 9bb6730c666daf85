//! 3x3 convolution kernels (stride 1, zero padding 1) with hand-written
//! forward and backward passes.
//!
//! Layout is channel-major `(C, H, W)`; every pass pads its input once and
//! then runs branch-free 9-tap row loops that the compiler can vectorize.
//! Output channels are computed independently, so the rayon split over them
//! is deterministic regardless of thread count.

use ndarray::{Array1, Array3, Array4};
use rand::Rng;
use rayon::prelude::*;

/// Weights `(C_out, C_in, 3, 3)` plus per-output-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

impl ConvLayer {
    /// Fan-in-scaled uniform init: `U(-b, b)` with `b = 1/sqrt(C_in * 9)`,
    /// zero bias.
    pub fn init_uniform(c_out: usize, c_in: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((c_in * 9) as f64).sqrt();
        ConvLayer {
            weight: Array4::from_shape_fn((c_out, c_in, 3, 3), |_| {
                rng.random_range(-bound..bound)
            }),
            bias: Array1::zeros(c_out),
        }
    }

    pub fn zeros(c_out: usize, c_in: usize) -> Self {
        ConvLayer { weight: Array4::zeros((c_out, c_in, 3, 3)), bias: Array1::zeros(c_out) }
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Same-shaped layer with all parameters zero (gradient accumulator).
    pub fn zeros_like(&self) -> ConvLayer {
        ConvLayer::zeros(self.c_out(), self.c_in())
    }

    pub fn scale_in_place(&mut self, factor: f64) {
        self.weight.mapv_inplace(|v| v * factor);
        self.bias.mapv_inplace(|v| v * factor);
    }

    pub fn add_in_place(&mut self, other: &ConvLayer) {
        self.weight.zip_mut_with(&other.weight, |a, b| *a += b);
        self.bias.zip_mut_with(&other.bias, |a, b| *a += b);
    }
}

/// Copies `(C, H, W)` planes into a `(C, H+2, W+2)` zero-padded buffer.
fn pad_planes(input: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = dims(input);
    let mut padded = Array3::zeros((c, h + 2, w + 2));
    padded
        .slice_mut(ndarray::s![.., 1..h + 1, 1..w + 1])
        .assign(input);
    padded
}

fn dims(a: &Array3<f64>) -> (usize, usize, usize) {
    let s = a.shape();
    (s[0], s[1], s[2])
}

/// Work below this many multiply-accumulates stays single-threaded.
const PARALLEL_THRESHOLD: usize = 1 << 17;

/// `out[co] = bias[co] + sum_ci input[ci] * weight[co, ci]` with 3x3 taps.
pub fn conv3x3_forward(layer: &ConvLayer, input: &Array3<f64>) -> Array3<f64> {
    let (c_in, h, w) = dims(input);
    assert_eq!(c_in, layer.c_in(), "conv input channel mismatch");
    let c_out = layer.c_out();
    let padded = pad_planes(input);
    let mut out = Array3::zeros((c_out, h, w));

    let run = |co: usize, out_plane: &mut [f64]| {
        let bias = layer.bias[co];
        let mut acc = vec![0.0f64; w];
        for y in 0..h {
            acc.fill(bias);
            for ci in 0..c_in {
                let wk = layer.weight.slice(ndarray::s![co, ci, .., ..]);
                let taps: [f64; 9] = [
                    wk[[0, 0]], wk[[0, 1]], wk[[0, 2]],
                    wk[[1, 0]], wk[[1, 1]], wk[[1, 2]],
                    wk[[2, 0]], wk[[2, 1]], wk[[2, 2]],
                ];
                let base = ci * (h + 2) * (w + 2);
                let pslice = padded.as_slice().unwrap();
                let r0 = &pslice[base + y * (w + 2)..base + y * (w + 2) + w + 2];
                let r1 = &pslice[base + (y + 1) * (w + 2)..base + (y + 1) * (w + 2) + w + 2];
                let r2 = &pslice[base + (y + 2) * (w + 2)..base + (y + 2) * (w + 2) + w + 2];
                nine_tap_row(&mut acc, r0, r1, r2, &taps);
            }
            out_plane[y * w..(y + 1) * w].copy_from_slice(&acc);
        }
    };

    let plane = h * w;
    let slice = out.as_slice_mut().unwrap();
    if c_out * c_in * plane * 9 >= PARALLEL_THRESHOLD {
        slice
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(co, out_plane)| run(co, out_plane));
    } else {
        for (co, out_plane) in slice.chunks_mut(plane).enumerate() {
            run(co, out_plane);
        }
    }
    out
}

#[inline]
fn nine_tap_row(acc: &mut [f64], r0: &[f64], r1: &[f64], r2: &[f64], taps: &[f64; 9]) {
    let w = acc.len();
    for x in 0..w {
        acc[x] += taps[0] * r0[x] + taps[1] * r0[x + 1] + taps[2] * r0[x + 2]
            + taps[3] * r1[x] + taps[4] * r1[x + 1] + taps[5] * r1[x + 2]
            + taps[6] * r2[x] + taps[7] * r2[x + 1] + taps[8] * r2[x + 2];
    }
}

/// Gradient with respect to the input: correlation of the output gradient
/// with the spatially flipped, channel-transposed kernel. Reuses the forward
/// kernel on a transposed weight copy.
pub fn conv3x3_grad_input(layer: &ConvLayer, grad_out: &Array3<f64>) -> Array3<f64> {
    let c_out = layer.c_out();
    let c_in = layer.c_in();
    let mut flipped = Array4::zeros((c_in, c_out, 3, 3));
    for co in 0..c_out {
        for ci in 0..c_in {
            for ky in 0..3 {
                for kx in 0..3 {
                    flipped[[ci, co, 2 - ky, 2 - kx]] = layer.weight[[co, ci, ky, kx]];
                }
            }
        }
    }
    let transposed = ConvLayer { weight: flipped, bias: Array1::zeros(c_in) };
    conv3x3_forward(&transposed, grad_out)
}

/// Accumulates parameter gradients into `grad`:
/// `dW[co,ci,ky,kx] += sum_{y,x} g[co,y,x] * x_pad[ci,y+ky,x+kx]` and
/// `db[co] += sum g[co]`.
pub fn conv3x3_grad_params(
    input: &Array3<f64>,
    grad_out: &Array3<f64>,
    grad: &mut ConvLayer,
) {
    let (c_in, h, w) = dims(input);
    let c_out = grad_out.shape()[0];
    assert_eq!(grad.c_in(), c_in);
    assert_eq!(grad.c_out(), c_out);
    let padded = pad_planes(input);
    let pslice = padded.as_slice().unwrap();
    let gslice = grad_out.as_slice().unwrap();

    let run = |co: usize, wslab: &mut [f64], db: &mut f64| {
        let gplane = &gslice[co * h * w..(co + 1) * h * w];
        *db += gplane.iter().sum::<f64>();
        for ci in 0..c_in {
            let base = ci * (h + 2) * (w + 2);
            let mut taps = [0.0f64; 9];
            for y in 0..h {
                let grow = &gplane[y * w..(y + 1) * w];
                for ky in 0..3 {
                    let prow = &pslice[base + (y + ky) * (w + 2)..base + (y + ky) * (w + 2) + w + 2];
                    let (mut t0, mut t1, mut t2) = (0.0, 0.0, 0.0);
                    for x in 0..w {
                        let g = grow[x];
                        t0 += g * prow[x];
                        t1 += g * prow[x + 1];
                        t2 += g * prow[x + 2];
                    }
                    taps[ky * 3] += t0;
                    taps[ky * 3 + 1] += t1;
                    taps[ky * 3 + 2] += t2;
                }
            }
            for (k, &t) in taps.iter().enumerate() {
                wslab[ci * 9 + k] += t;
            }
        }
    };

    let wchunk = c_in * 9;
    let weight_slice = grad.weight.as_slice_mut().unwrap();
    let mut biases: Vec<f64> = grad.bias.to_vec();
    if c_out * c_in * h * w * 9 >= PARALLEL_THRESHOLD {
        weight_slice
            .par_chunks_mut(wchunk)
            .zip(biases.par_iter_mut())
            .enumerate()
            .for_each(|(co, (wslab, db))| run(co, wslab, db));
    } else {
        for (co, (wslab, db)) in weight_slice.chunks_mut(wchunk).zip(biases.iter_mut()).enumerate()
        {
            run(co, wslab, db);
        }
    }
    grad.bias = Array1::from_vec(biases);
}
