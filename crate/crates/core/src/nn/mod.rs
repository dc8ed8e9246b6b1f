//! Low-power gaze CNN with exact reverse-mode gradients.
//!
//! Architecture (input is one normalised 3×5 sensor frame):
//!
//! ```text
//! conv 3×3 same, 1→4, relu
//! conv 3×3 same, 4→4, relu
//! flatten (channel, row, col) -> 60
//! dense 60→20 relu, 20→20 relu, 20→20 relu, 20→20 relu
//! dense 20→2 (x_deg, y_deg)
//! ```
//!
//! All parameters live in one flat `f64` vector laid out in [`LAYERS`] order.
//! Convolution kernels are indexed `[out][in][ky][kx]`, dense weights
//! `[out][in]`. Convolutions are cross-correlations with zero padding.

pub mod adam;
pub mod checkpoint;

use std::sync::OnceLock;

use rand::Rng as _;

use crate::array::{COLS, N_SENSORS, ROWS};
use crate::seed;
use crate::synth_eye::GazeSample;
use crate::{Error, Result};

pub use adam::{AdamConfig, AdamState};

pub const CHANNELS: usize = 4;
pub const HIDDEN: usize = 20;
pub const KERNEL: usize = 3;
pub const FLAT: usize = CHANNELS * N_SENSORS;
pub const OUTPUTS: usize = 2;
const TAPS: usize = KERNEL * KERNEL;

/// Parameter budget for the low-power target.
pub const MAX_PARAMS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub name: &'static str,
    pub shape: &'static [usize],
}

impl LayerShape {
    pub const fn len(&self) -> usize {
        let mut n = 1;
        let mut i = 0;
        while i < self.shape.len() {
            n *= self.shape[i];
            i += 1;
        }
        n
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub const LAYERS: [LayerShape; 14] = [
    LayerShape { name: "conv1_w", shape: &[CHANNELS, 1, KERNEL, KERNEL] },
    LayerShape { name: "conv1_b", shape: &[CHANNELS] },
    LayerShape { name: "conv2_w", shape: &[CHANNELS, CHANNELS, KERNEL, KERNEL] },
    LayerShape { name: "conv2_b", shape: &[CHANNELS] },
    LayerShape { name: "fc1_w", shape: &[HIDDEN, FLAT] },
    LayerShape { name: "fc1_b", shape: &[HIDDEN] },
    LayerShape { name: "fc2_w", shape: &[HIDDEN, HIDDEN] },
    LayerShape { name: "fc2_b", shape: &[HIDDEN] },
    LayerShape { name: "fc3_w", shape: &[HIDDEN, HIDDEN] },
    LayerShape { name: "fc3_b", shape: &[HIDDEN] },
    LayerShape { name: "fc4_w", shape: &[HIDDEN, HIDDEN] },
    LayerShape { name: "fc4_b", shape: &[HIDDEN] },
    LayerShape { name: "head_w", shape: &[OUTPUTS, HIDDEN] },
    LayerShape { name: "head_b", shape: &[OUTPUTS] },
];

const fn layer_offsets() -> [usize; LAYERS.len() + 1] {
    let mut out = [0; LAYERS.len() + 1];
    let mut i = 0;
    while i < LAYERS.len() {
        out[i + 1] = out[i] + LAYERS[i].len();
        i += 1;
    }
    out
}

/// Start of each layer in the flat vector; the last entry is the total.
pub const OFFSETS: [usize; LAYERS.len() + 1] = layer_offsets();
pub const N_PARAMS: usize = OFFSETS[LAYERS.len()];

const _: () = assert!(N_PARAMS <= MAX_PARAMS);

/// Weights and biases of the network, flat in [`LAYERS`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    values: Vec<f64>,
}

impl NetworkParams {
    pub fn zeros() -> Self {
        Self {
            values: vec![0.0; N_PARAMS],
        }
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        if values.len() != N_PARAMS {
            return Err(Error::ShapeMismatch(format!(
                "expected {N_PARAMS} parameters, got {}",
                values.len()
            )));
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layer(&self, index: usize) -> &[f64] {
        &self.values[OFFSETS[index]..OFFSETS[index + 1]]
    }

    pub fn layer_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.values[OFFSETS[index]..OFFSETS[index + 1]]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Name of the first layer holding a non-finite value.
    pub fn first_non_finite_layer(&self) -> Option<&'static str> {
        (0..LAYERS.len())
            .find(|&i| self.layer(i).iter().any(|v| !v.is_finite()))
            .map(|i| LAYERS[i].name)
    }
}

/// Gradients share the parameter layout.
pub type Gradients = NetworkParams;

fn fan_in(layer: &LayerShape) -> usize {
    layer.shape[1..].iter().product()
}

/// Uniform weights in `±sqrt(6 / fan_in)`, zero biases.
pub fn init_params(seed: u64) -> NetworkParams {
    let mut rng = seed::rng(seed);
    let mut p = NetworkParams::zeros();
    for (i, layer) in LAYERS.iter().enumerate() {
        if layer.shape.len() < 2 {
            continue;
        }
        let bound = (6.0 / fan_in(layer) as f64).sqrt();
        for w in p.layer_mut(i) {
            *w = rng.random_range(-bound..=bound);
        }
    }
    p
}

/// `(kernel tap, input position)` pairs contributing to each output position
/// of a same-padded 3×3 convolution over the 3×5 map.
fn conv_taps() -> &'static [Vec<(usize, usize)>; N_SENSORS] {
    static TABLE: OnceLock<[Vec<(usize, usize)>; N_SENSORS]> = OnceLock::new();
    TABLE.get_or_init(|| {
        std::array::from_fn(|p| {
            let (y, x) = ((p / COLS) as i64, (p % COLS) as i64);
            let mut taps = Vec::with_capacity(TAPS);
            for ky in 0..KERNEL as i64 {
                for kx in 0..KERNEL as i64 {
                    let (iy, ix) = (y + ky - 1, x + kx - 1);
                    if (0..ROWS as i64).contains(&iy) && (0..COLS as i64).contains(&ix) {
                        taps.push(((ky * KERNEL as i64 + kx) as usize, (iy * COLS as i64 + ix) as usize));
                    }
                }
            }
            taps
        })
    })
}

/// Post-activation values of one forward pass.
#[derive(Debug, Clone)]
struct Activations {
    conv1: [f64; FLAT],
    conv2: [f64; FLAT],
    hidden: [[f64; HIDDEN]; 4],
    out: [f64; OUTPUTS],
}

impl Default for Activations {
    fn default() -> Self {
        Self {
            conv1: [0.0; FLAT],
            conv2: [0.0; FLAT],
            hidden: [[0.0; HIDDEN]; 4],
            out: [0.0; OUTPUTS],
        }
    }
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn dense(w: &[f64], b: &[f64], input: &[f64], out: &mut [f64], rectify: bool) {
    let n_in = input.len();
    for (j, o) in out.iter_mut().enumerate() {
        let row = &w[j * n_in..(j + 1) * n_in];
        let s = b[j] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
        *o = if rectify { relu(s) } else { s };
    }
}

fn forward_acts(p: &NetworkParams, x: &[f64; N_SENSORS], a: &mut Activations) {
    let taps = conv_taps();
    let (w1, b1) = (p.layer(0), p.layer(1));
    for o in 0..CHANNELS {
        let k = &w1[o * TAPS..(o + 1) * TAPS];
        for (pos, t) in taps.iter().enumerate() {
            let s = b1[o] + t.iter().map(|&(tap, q)| k[tap] * x[q]).sum::<f64>();
            a.conv1[o * N_SENSORS + pos] = relu(s);
        }
    }
    let (w2, b2) = (p.layer(2), p.layer(3));
    for o in 0..CHANNELS {
        for (pos, t) in taps.iter().enumerate() {
            let mut s = b2[o];
            for i in 0..CHANNELS {
                let k = &w2[(o * CHANNELS + i) * TAPS..(o * CHANNELS + i + 1) * TAPS];
                let map = &a.conv1[i * N_SENSORS..(i + 1) * N_SENSORS];
                s += t.iter().map(|&(tap, q)| k[tap] * map[q]).sum::<f64>();
            }
            a.conv2[o * N_SENSORS + pos] = relu(s);
        }
    }
    dense(p.layer(4), p.layer(5), &a.conv2, &mut a.hidden[0], true);
    for l in 1..4 {
        let (prev, cur) = a.hidden.split_at_mut(l);
        dense(p.layer(4 + 2 * l), p.layer(5 + 2 * l), &prev[l - 1], &mut cur[0], true);
    }
    dense(p.layer(12), p.layer(13), &a.hidden[3], &mut a.out, false);
}

fn check_input(x: &[f64; N_SENSORS]) -> Result<()> {
    if let Some(v) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("network input contains {v}")));
    }
    Ok(())
}

/// Gaze prediction for one normalised frame.
pub fn forward(params: &NetworkParams, frame: &[f64; N_SENSORS]) -> Result<GazeSample> {
    check_input(frame)?;
    let mut a = Activations::default();
    forward_acts(params, frame, &mut a);
    Ok(GazeSample::new(a.out[0], a.out[1]))
}

pub fn forward_batch(params: &NetworkParams, frames: &[[f64; N_SENSORS]]) -> Result<Vec<GazeSample>> {
    let mut a = Activations::default();
    frames
        .iter()
        .map(|x| {
            check_input(x)?;
            forward_acts(params, x, &mut a);
            Ok(GazeSample::new(a.out[0], a.out[1]))
        })
        .collect()
}

/// Mean over samples of `(dx² + dy²) / 2`, in deg².
pub fn loss(predictions: &[GazeSample], truths: &[GazeSample]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: truths.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::Empty("loss of an empty batch"));
    }
    let sum: f64 = predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| {
            let (dx, dy) = (p.x_deg - t.x_deg, p.y_deg - t.y_deg);
            (dx * dx + dy * dy) / 2.0
        })
        .sum();
    Ok(sum / predictions.len() as f64)
}

/// Accumulates `gw += g ⊗ input`, `gb += g` and optionally `gin = Wᵀ g`.
fn dense_back(w: &[f64], input: &[f64], g: &[f64], gw: &mut [f64], gb: &mut [f64], gin: Option<&mut [f64]>) {
    let n_in = input.len();
    for (j, &gj) in g.iter().enumerate() {
        if gj == 0.0 {
            continue;
        }
        gb[j] += gj;
        for (gwi, xi) in gw[j * n_in..(j + 1) * n_in].iter_mut().zip(input) {
            *gwi += gj * xi;
        }
    }
    if let Some(gin) = gin {
        gin.fill(0.0);
        for (j, &gj) in g.iter().enumerate() {
            if gj == 0.0 {
                continue;
            }
            for (gi, wi) in gin.iter_mut().zip(&w[j * n_in..(j + 1) * n_in]) {
                *gi += gj * wi;
            }
        }
    }
}

fn mask(grad: &mut [f64], act: &[f64]) {
    for (g, a) in grad.iter_mut().zip(act) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Loss and its exact gradient over a batch of normalised frames.
pub fn backward(
    params: &NetworkParams,
    inputs: &[[f64; N_SENSORS]],
    truths: &[GazeSample],
) -> Result<(f64, Gradients)> {
    if inputs.len() != truths.len() {
        return Err(Error::LengthMismatch {
            left: inputs.len(),
            right: truths.len(),
        });
    }
    if inputs.is_empty() {
        return Err(Error::Empty("gradient of an empty batch"));
    }
    let n = inputs.len() as f64;
    let taps = conv_taps();
    let mut grads = NetworkParams::zeros();
    let mut a = Activations::default();
    let mut total = 0.0;
    let mut g_h = [[0.0; HIDDEN]; 4];
    let mut g_c2 = [0.0; FLAT];
    let mut g_c1 = [0.0; FLAT];
    for (x, t) in inputs.iter().zip(truths) {
        check_input(x)?;
        forward_acts(params, x, &mut a);
        let (dx, dy) = (a.out[0] - t.x_deg, a.out[1] - t.y_deg);
        total += (dx * dx + dy * dy) / 2.0;
        let g_out = [dx / n, dy / n];

        let (gw, gb) = split_pair(&mut grads, 12);
        dense_back(params.layer(12), &a.hidden[3], &g_out, gw, gb, Some(&mut g_h[3]));
        mask(&mut g_h[3], &a.hidden[3]);
        for l in (1..4).rev() {
            let (lo, hi) = g_h.split_at_mut(l);
            let (gw, gb) = split_pair(&mut grads, 4 + 2 * l);
            dense_back(params.layer(4 + 2 * l), &a.hidden[l - 1], &hi[0], gw, gb, Some(&mut lo[l - 1]));
            mask(&mut lo[l - 1], &a.hidden[l - 1]);
        }
        let (gw, gb) = split_pair(&mut grads, 4);
        dense_back(params.layer(4), &a.conv2, &g_h[0], gw, gb, Some(&mut g_c2));
        mask(&mut g_c2, &a.conv2);

        let w2 = params.layer(2);
        g_c1.fill(0.0);
        {
            let (gw2, gb2) = split_pair(&mut grads, 2);
            for o in 0..CHANNELS {
                for (pos, tp) in taps.iter().enumerate() {
                    let g = g_c2[o * N_SENSORS + pos];
                    if g == 0.0 {
                        continue;
                    }
                    gb2[o] += g;
                    for i in 0..CHANNELS {
                        let base = (o * CHANNELS + i) * TAPS;
                        for &(tap, q) in tp {
                            gw2[base + tap] += g * a.conv1[i * N_SENSORS + q];
                            g_c1[i * N_SENSORS + q] += g * w2[base + tap];
                        }
                    }
                }
            }
        }
        mask(&mut g_c1, &a.conv1);
        let (gw1, gb1) = split_pair(&mut grads, 0);
        for o in 0..CHANNELS {
            for (pos, tp) in taps.iter().enumerate() {
                let g = g_c1[o * N_SENSORS + pos];
                if g == 0.0 {
                    continue;
                }
                gb1[o] += g;
                for &(tap, q) in tp {
                    gw1[o * TAPS + tap] += g * x[q];
                }
            }
        }
    }
    // backpropagation order: report the layer nearest the output
    if let Some(i) = (0..LAYERS.len()).rev().find(|&i| grads.layer(i).iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!("gradient of layer {}", LAYERS[i].name)));
    }
    Ok((total / n, grads))
}

/// Mutable views of a weight layer and the bias layer that follows it.
fn split_pair(p: &mut NetworkParams, weight_layer: usize) -> (&mut [f64], &mut [f64]) {
    let (a, b) = p.values[OFFSETS[weight_layer]..OFFSETS[weight_layer + 2]]
        .split_at_mut(OFFSETS[weight_layer + 1] - OFFSETS[weight_layer]);
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count() {
        let counts: Vec<usize> = LAYERS.iter().map(LayerShape::len).collect();
        assert_eq!(counts[0] + counts[1], 40);
        assert_eq!(counts[2] + counts[3], 148);
        assert_eq!(counts[4] + counts[5], 1220);
        assert_eq!(counts[12] + counts[13], 42);
        assert_eq!(N_PARAMS, 2710);
        assert_eq!(OFFSETS[12], 2668);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        assert_eq!(init_params(5), init_params(5));
        assert_ne!(init_params(5), init_params(6));
        let p = init_params(11);
        for (i, l) in LAYERS.iter().enumerate() {
            let vals = p.layer(i);
            if l.shape.len() < 2 {
                assert!(vals.iter().all(|v| *v == 0.0));
            } else {
                let bound = (6.0 / fan_in(l) as f64).sqrt();
                assert!(vals.iter().all(|v| v.is_finite() && v.abs() <= bound));
            }
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let g = forward(&NetworkParams::zeros(), &[0.0; N_SENSORS]).unwrap();
        assert_eq!((g.x_deg, g.y_deg), (0.0, 0.0));
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut x = [0.0; N_SENSORS];
        x[4] = f64::NAN;
        assert!(matches!(forward(&init_params(1), &x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn loss_examples() {
        let t = [GazeSample::new(1.0, 2.0)];
        assert_eq!(loss(&t, &t).unwrap(), 0.0);
        assert_eq!(loss(&[GazeSample::new(4.0, 6.0)], &t).unwrap(), 12.5);
        let p2 = [GazeSample::new(7.0, 10.0)];
        assert_eq!(loss(&p2, &t).unwrap(), 50.0);
        assert!(matches!(loss(&[], &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn batch_equals_single() {
        let p = init_params(3);
        let xs: Vec<[f64; N_SENSORS]> = (0..5)
            .map(|i| std::array::from_fn(|k| ((i * 7 + k) as f64 * 0.37).sin()))
            .collect();
        let batch = forward_batch(&p, &xs).unwrap();
        for (x, b) in xs.iter().zip(&batch) {
            assert_eq!(forward(&p, x).unwrap(), *b);
        }
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let p = init_params(4);
        let xs: Vec<[f64; N_SENSORS]> = (0..3).map(|i| [i as f64 * 0.3 - 0.2; N_SENSORS]).collect();
        let truths = forward_batch(&p, &xs).unwrap();
        let (l, g) = backward(&p, &xs, &truths).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let p = init_params(8);
        let xs: Vec<[f64; N_SENSORS]> = (0..4)
            .map(|i| std::array::from_fn(|k| ((i * 3 + k) as f64).cos()))
            .collect();
        let ts: Vec<GazeSample> = (0..4).map(|i| GazeSample::new(i as f64, -2.0)).collect();
        let (l1, g1) = backward(&p, &xs, &ts).unwrap();
        let xs2: Vec<_> = xs.iter().chain(&xs).copied().collect();
        let ts2: Vec<_> = ts.iter().chain(&ts).copied().collect();
        let (l2, g2) = backward(&p, &xs2, &ts2).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.as_slice().iter().zip(g2.as_slice()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn non_finite_gradient_names_layer() {
        let mut p = init_params(2);
        p.layer_mut(12)[0] = f64::INFINITY;
        let err = backward(&p, &[[0.5; N_SENSORS]], &[GazeSample::new(0.0, 0.0)]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref m) if m.contains("head")), "{err}");
    }
}
