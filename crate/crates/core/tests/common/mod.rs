//! Independent 64-bit reference implementations used as test oracles.
#![allow(dead_code)]

use pointconv::nn::Dense;
use pointconv::{DensityMode, ParamStore, PointConvLayer};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `max |a - b| / max |b|`.
pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Row-major `[m, k] x [k, n]` by three nested loops.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// `x W + b` for `rows` rows, reading the layer's parameters from `store`.
pub fn dense(store: &ParamStore<f64>, d: &Dense, x: &[f64], rows: usize) -> Vec<f64> {
    let w = store.value(d.weight).data();
    let mut out = matmul(x, w, rows, d.d_in, d.d_out);
    if let Some(b) = d.bias {
        let b = store.value(b).data();
        for r in out.chunks_exact_mut(d.d_out) {
            for (o, bb) in r.iter_mut().zip(b) {
                *o += bb;
            }
        }
    }
    out
}

pub fn relu(v: &mut [f64]) {
    for x in v {
        *x = x.max(0.0);
    }
}

/// `(M, W)` of the WeightNet at `rows` offsets (no hidden BN).
pub fn weight_net(store: &ParamStore<f64>, layer: &PointConvLayer, coords: &[f64], rows: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = coords.to_vec();
    for (d, bn) in &layer.weight_net.hidden {
        assert!(bn.is_none());
        x = dense(store, d, &x, rows);
        relu(&mut x);
    }
    let w = dense(store, &layer.weight_net.h, &x, rows);
    (x, w)
}

/// Density scale per neighbor.
pub fn density_scale(store: &ParamStore<f64>, layer: &PointConvLayer, inv: &[f64]) -> Vec<f64> {
    match layer.config.density {
        DensityMode::Disabled => vec![1.0; inv.len()],
        DensityMode::Raw => inv.to_vec(),
        DensityMode::Mlp => inv
            .iter()
            .map(|&s| {
                let layers = &layer.density_net.as_ref().unwrap().layers;
                let mut x = vec![s];
                for (i, d) in layers.iter().enumerate() {
                    x = dense(store, d, &x, 1);
                    if i + 1 < layers.len() {
                        relu(&mut x);
                    }
                }
                1.0 / (1.0 + (-x[0]).exp())
            })
            .collect(),
    }
}

/// PointConv by explicit loops over (region, k, c_in, c_mid, c_out):
/// `out[r, o] = sum_k sum_c S[r,k] F[r,k,c] (sum_m M[r,k,m] H[m, c*C_out+o] + b[c*C_out+o])`.
pub fn pointconv(
    store: &ParamStore<f64>,
    layer: &PointConvLayer,
    local: &[f64],
    feats: &[f64],
    inv: &[f64],
    regions: usize,
    k: usize,
) -> Vec<f64> {
    let cfg = &layer.config;
    let (c_in, c_mid, c_out) = (cfg.c_in, cfg.c_mid, cfg.c_out);
    let (m, _) = weight_net(store, layer, local, regions * k);
    let s = density_scale(store, layer, inv);
    let h = store.value(layer.weight_net.h.weight).data();
    let hb = layer.weight_net.h.bias.map(|b| store.value(b).data().to_vec());
    let mut out = vec![0.0; regions * c_out];
    for r in 0..regions {
        for kk in 0..k {
            let row = r * k + kk;
            for c in 0..c_in {
                let f = s[row] * feats[row * c_in + c];
                for o in 0..c_out {
                    let col = c * c_out + o;
                    let mut w = hb.as_ref().map_or(0.0, |b| b[col]);
                    for j in 0..c_mid {
                        w += m[row * c_mid + j] * h[j * c_in * c_out + col];
                    }
                    out[r * c_out + o] += f * w;
                }
            }
        }
    }
    out
}

/// Eval-mode BN with fresh running statistics (mean 0, variance 1).
pub fn fresh_bn(x: &mut [f64]) {
    let scale = 1.0 / (1.0 + 1e-5f64).sqrt();
    for v in x {
        *v *= scale;
    }
}

/// Gaussian KDE with self term, written as the textbook double sum.
pub fn kde(pos: &[f64], dim: usize, h: f64) -> Vec<f64> {
    let n = pos.len() / dim;
    let norm = (2.0 * std::f64::consts::PI * h * h).powf(-(dim as f64) / 2.0);
    (0..n)
        .map(|i| {
            let pi = &pos[i * dim..(i + 1) * dim];
            let s: f64 = (0..n).map(|j| (-sq_dist(pi, &pos[j * dim..(j + 1) * dim]) / (2.0 * h * h)).exp()).sum();
            norm * s / n as f64
        })
        .collect()
}

/// Indices sorted by (distance, index) over the whole source set.
pub fn sorted_neighbors(q: &[f64], sources: &[f64], dim: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = sources.chunks_exact(dim).enumerate().map(|(i, p)| (sq_dist(p, q), i)).collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().map(|(_, i)| i).collect()
}
