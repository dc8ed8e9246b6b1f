//! Oracles shared by the integration tests.
#![allow(dead_code)]

use psog_core::array::{COLS, N_SENSORS, ROWS};
use psog_core::nn::{self, backward, forward_batch, loss, NetworkParams};
use psog_core::seed;
use psog_core::synth_eye::GazeSample;
use rand::Rng;

/// Parameters drawn uniformly in ±0.5, biases included.
pub fn random_params(rng: &mut seed::Rng) -> NetworkParams {
    NetworkParams::from_vec((0..nn::N_PARAMS).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap()
}

pub fn random_frame(rng: &mut seed::Rng) -> [f64; N_SENSORS] {
    std::array::from_fn(|_| rng.random_range(-2.0..2.0))
}

/// Straightforward layer-by-layer evaluation with explicit 4-d indexing.
/// Weight layout: conv `[out][in][ky][kx]`, dense `[out][in]`, flatten
/// channel-major over the 3×5 map.
pub fn oracle_forward(p: &[f64], x: &[f64; N_SENSORS]) -> (f64, f64) {
    let mut off = 0;
    let mut take = |n: usize| {
        let s = &p[off..off + n];
        off += n;
        s.to_vec()
    };
    let c1w = take(4 * 9);
    let c1b = take(4);
    let c2w = take(4 * 4 * 9);
    let c2b = take(4);
    let fc: Vec<(Vec<f64>, Vec<f64>)> = [(20, 60), (20, 20), (20, 20), (20, 20), (2, 20)]
        .iter()
        .map(|&(o, i)| (take(o * i), take(o)))
        .collect();

    let input = vec![x.to_vec()];
    let conv = |maps: &Vec<Vec<f64>>, w: &[f64], b: &[f64]| -> Vec<Vec<f64>> {
        let cin = maps.len();
        let mut out = vec![vec![0.0; ROWS * COLS]; 4];
        for o in 0..4 {
            for y in 0..ROWS as i64 {
                for xx in 0..COLS as i64 {
                    let mut s = b[o];
                    for i in 0..cin {
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let (iy, ix) = (y + ky - 1, xx + kx - 1);
                                if iy < 0 || iy >= ROWS as i64 || ix < 0 || ix >= COLS as i64 {
                                    continue;
                                }
                                let wi = ((o * cin + i) * 3 + ky as usize) * 3 + kx as usize;
                                s += w[wi] * maps[i][iy as usize * COLS + ix as usize];
                            }
                        }
                    }
                    out[o][y as usize * COLS + xx as usize] = s.max(0.0);
                }
            }
        }
        out
    };
    let a1 = conv(&input, &c1w, &c1b);
    let a2 = conv(&a1, &c2w, &c2b);
    let mut h: Vec<f64> = a2.concat();
    for (l, (w, b)) in fc.iter().enumerate() {
        let n_in = h.len();
        let n_out = b.len();
        let mut next = vec![0.0; n_out];
        for j in 0..n_out {
            let mut s = b[j];
            for i in 0..n_in {
                s += w[j * n_in + i] * h[i];
            }
            next[j] = if l < 4 { s.max(0.0) } else { s };
        }
        h = next;
    }
    (h[0], h[1])
}

fn batch_loss(p: &NetworkParams, xs: &[[f64; N_SENSORS]], ys: &[GazeSample]) -> f64 {
    loss(&forward_batch(p, xs).unwrap(), ys).unwrap()
}

/// Worst disagreement between analytic gradients and central differences.
#[derive(Debug, Default, Clone, Copy)]
pub struct GradientCheck {
    pub entries: usize,
    pub failures: usize,
    pub worst_rel: f64,
    pub worst_abs: f64,
}

/// Checks every parameter of `draws` random networks on 8-sample batches.
/// An entry passes with relative error below 1e-4 or absolute error below
/// 1e-8; loss values are O(100) deg², so the difference quotient itself
/// carries about 1e-9 of rounding.
pub fn gradient_check(seed_value: u64, draws: usize, step: f64) -> GradientCheck {
    let mut rng = seed::rng(seed_value);
    let mut out = GradientCheck::default();
    for _ in 0..draws {
        let p = random_params(&mut rng);
        let xs: Vec<[f64; N_SENSORS]> = (0..8).map(|_| random_frame(&mut rng)).collect();
        let ys: Vec<GazeSample> = (0..8)
            .map(|_| GazeSample::new(rng.random_range(-20.0..20.0), rng.random_range(-16.0..16.0)))
            .collect();
        let (l, g) = backward(&p, &xs, &ys).unwrap();
        assert!((l - batch_loss(&p, &xs, &ys)).abs() <= 1e-12 * l.max(1.0));
        for k in 0..nn::N_PARAMS {
            let mut plus = p.clone();
            plus.as_mut_slice()[k] += step;
            let mut minus = p.clone();
            minus.as_mut_slice()[k] -= step;
            let numeric = (batch_loss(&plus, &xs, &ys) - batch_loss(&minus, &xs, &ys)) / (2.0 * step);
            let analytic = g.as_slice()[k];
            let abs_err = (analytic - numeric).abs();
            let rel_err = abs_err / analytic.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
            out.entries += 1;
            if !(rel_err < 1e-4 || abs_err < 1e-8) {
                out.failures += 1;
            }
            if abs_err >= 1e-8 {
                out.worst_rel = out.worst_rel.max(rel_err);
            }
            out.worst_abs = out.worst_abs.max(abs_err);
        }
    }
    out
}

/// Standard-normal CDF from the Abramowitz-Stegun erf approximation
/// (|error| < 1.5e-7), independent of the library's sampler.
pub fn phi(z: f64) -> f64 {
    let x = z.abs() / std::f64::consts::SQRT_2;
    let t = 1.0 / (1.0 + 0.327_591_1 * x);
    let poly = t * (0.254_829_592 + t * (-0.284_496_736 + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
    let erf = 1.0 - poly * (-x * x).exp();
    if z >= 0.0 {
        0.5 * (1.0 + erf)
    } else {
        0.5 * (1.0 - erf)
    }
}
