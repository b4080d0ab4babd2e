//! Shared helpers: small configs and a dense, loop-based re-implementation
//! of one transformer layer used as an oracle.

#![allow(dead_code)]

pub mod checks;

use pmf::autograd::{ParamId, ParamStore};
use pmf::datagen::{self, MultimodalRecord, TaskKind, TaskSpec};
use pmf::encoder::{Encoder, EncoderConfig, InputConfig};
use rand::Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn vision(layers: usize, d: usize, heads: usize) -> EncoderConfig {
    EncoderConfig {
        layers,
        d,
        heads,
        mlp_ratio: 2,
        layer_norm_eps: 1e-5,
        input: InputConfig::Vision {
            height: 32,
            width: 32,
            channels: 1,
            patch: 8,
        },
    }
}

pub fn text(layers: usize, d: usize, heads: usize) -> EncoderConfig {
    EncoderConfig {
        layers,
        d,
        heads,
        mlp_ratio: 2,
        layer_norm_eps: 1e-5,
        input: InputConfig::Text {
            vocab_size: 64,
            max_len: 16,
        },
    }
}

pub fn records(kind: TaskKind, n: usize, seed: u64) -> Vec<MultimodalRecord> {
    datagen::generate_dataset(&TaskSpec::new(kind), n, seed).unwrap()
}

pub fn random_mat(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

pub fn flatten(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn unflatten(v: &[f64], cols: usize) -> Mat {
    v.chunks(cols).map(<[f64]>::to_vec).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn param(store: &ParamStore, id: ParamId, cols: usize) -> Mat {
    unflatten(store.get(id).data(), cols)
}

fn row(store: &ParamStore, id: ParamId) -> Vec<f64> {
    store.get(id).data().to_vec()
}

pub fn dense_matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|ar| {
            (0..n)
                .map(|j| ar.iter().zip(b).map(|(x, br)| x * br[j]).sum())
                .collect()
        })
        .collect()
}

pub fn dense_linear(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    dense_matmul(x, w)
        .into_iter()
        .map(|r| r.iter().zip(b).map(|(a, c)| a + c).collect())
        .collect()
}

fn dense_layer_norm(x: &Mat, g: &[f64], b: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let s = (var + eps).sqrt();
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / s * g[j] + b[j])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// One pre-norm layer on a single sequence. Masked rows are skipped as keys
/// and copied through unchanged.
pub fn dense_layer(store: &ParamStore, enc: &Encoder, l: usize, x: &Mat, mask: &[bool]) -> Mat {
    let cfg = &enc.config;
    let (d, heads) = (cfg.d, cfg.heads);
    let dh = d / heads;
    let hidden = d * cfg.mlp_ratio;
    let lp = &enc.layers[l];
    let eps = cfg.layer_norm_eps;

    let h = dense_layer_norm(x, &row(store, lp.ln1_gain), &row(store, lp.ln1_bias), eps);
    let q = dense_linear(&h, &param(store, lp.wq, d), &row(store, lp.bq));
    let k = dense_linear(&h, &param(store, lp.wk, d), &row(store, lp.bk));
    let v = dense_linear(&h, &param(store, lp.wv, d), &row(store, lp.bv));
    let n = x.len();
    let mut att = vec![vec![0.0; d]; n];
    for hd in 0..heads {
        let cols = hd * dh..(hd + 1) * dh;
        for i in 0..n {
            let scores: Vec<Option<f64>> = (0..n)
                .map(|j| {
                    mask[j].then(|| {
                        cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                    })
                })
                .collect();
            let max = scores.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| s.map_or(0.0, |s| (s - max).exp())).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                att[i][c] = (0..n).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    let o = dense_linear(&att, &param(store, lp.wo, d), &row(store, lp.bo));
    let x1: Mat = (0..n)
        .map(|i| {
            if mask[i] {
                x[i].iter().zip(&o[i]).map(|(a, b)| a + b).collect()
            } else {
                x[i].clone()
            }
        })
        .collect();
    let h2 = dense_layer_norm(&x1, &row(store, lp.ln2_gain), &row(store, lp.ln2_bias), eps);
    let u: Mat = dense_linear(&h2, &param(store, lp.w_up, hidden), &row(store, lp.b_up))
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    let m = dense_linear(&u, &param(store, lp.w_down, d), &row(store, lp.b_down));
    (0..n)
        .map(|i| {
            if mask[i] {
                x1[i].iter().zip(&m[i]).map(|(a, b)| a + b).collect()
            } else {
                x1[i].clone()
            }
        })
        .collect()
}

/// `W2 relu(W1 x + b1) + b2` per row.
pub fn dense_mapping(x: &Mat, w1: &Mat, b1: &[f64], w2: &Mat, b2: &[f64]) -> Mat {
    let h: Mat = dense_linear(x, w1, b1)
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect();
    dense_linear(&h, w2, b2)
}

/// The small two-tower model used across suites: vision d=16, text d=12,
/// four layers each, fusion from layer 2 with two prompts of each kind.
pub fn toy_pmf(dtype: pmf::autograd::DType, seed: u64) -> pmf::fusion::PmfModel {
    let (img, txt) = toy_towers();
    let fusion = toy_fusion(2);
    pmf::fusion::PmfModel::new(&img, &txt, &fusion, dtype, seed).unwrap()
}

pub fn toy_towers() -> (EncoderConfig, EncoderConfig) {
    (vision(4, 16, 2), text(4, 12, 2))
}

pub fn toy_fusion(n_classes: usize) -> pmf::fusion::FusionConfig {
    let (img, txt) = toy_towers();
    pmf::fusion::FusionConfig::deep_two(&img, &txt, 2, n_classes)
}

/// Overwrites every parameter with uniform noise in `[-scale, scale)`.
pub fn scramble(store: &mut ParamStore, seed: u64, scale: f64) {
    use rand::SeedableRng;
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).numel();
        let data = (0..n).map(|_| r.random_range(-scale..scale)).collect();
        store.get_mut(id).set_data(data).unwrap();
    }
}
