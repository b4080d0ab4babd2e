//! Seeded comparisons of library outputs against the dense oracles. Each
//! returns the largest absolute deviation it saw.

use pmf::autograd::{DType, ParamStore, Tape, Var};
use pmf::encoder::TokenSequence;
use pmf::fusion::{fusion_stage, querying_stage, Mapping, MappingKind};
use pmf::rng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{dense_layer, dense_linear, dense_mapping, flatten, max_abs_diff, random_mat, unflatten, Mat};

fn constant(t: &mut Tape, m: &Mat) -> Var {
    t.constant(m.len(), m[0].len(), flatten(m)).unwrap()
}

fn sequence(t: &mut Tape, x: &Mat, batch: usize, mask: Vec<bool>) -> TokenSequence {
    TokenSequence {
        tokens: constant(t, x),
        batch,
        seq_len: x.len() / batch,
        mask,
    }
}

/// First row of every sequence is CLS and always valid.
fn random_mask(r: &mut ChaCha8Rng, batch: usize, len: usize) -> Vec<bool> {
    (0..batch * len).map(|i| i % len == 0 || r.random_bool(0.7)).collect()
}

/// Querying on a random text-tower layer against the per-sequence dense
/// layer over `[z; qcp; qp]`, keeping only the prompt rows.
pub fn querying_error(seed: u64) -> f64 {
    let model = super::toy_pmf(DType::F64, seed);
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (batch, len, d) = (2, r.random_range(2..8), 12);
    let layer = r.random_range(0..4);
    let z = random_mat(&mut r, batch * len, d, 1.0);
    let mask = random_mask(&mut r, batch, len);
    let m_qcp = r.random_range(0..3);
    let qcp = random_mat(&mut r, m_qcp.max(1), d, 1.0);
    let m_qp = r.random_range(1..4);
    let qp = random_mat(&mut r, m_qp, d, 1.0);
    let mut t = Tape::new(DType::F64);
    let zs = sequence(&mut t, &z, batch, mask.clone());
    let qcpv = (m_qcp > 0).then(|| constant(&mut t, &qcp));
    let qpv = constant(&mut t, &qp);
    let out = querying_stage(&mut t, &model.txt, &model.store, layer, &zs, qcpv, qpv).unwrap();

    let mut expect = Vec::new();
    for s in 0..batch {
        let mut full: Mat = z[s * len..(s + 1) * len].to_vec();
        if m_qcp > 0 {
            full.extend(qcp.iter().cloned());
        }
        full.extend(qp.iter().cloned());
        let mut m = mask[s * len..(s + 1) * len].to_vec();
        m.resize(full.len(), true);
        let o = dense_layer(&model.store, &model.txt, layer, &full, &m);
        expect.extend(flatten(&o[full.len() - qp.len()..].to_vec()));
    }
    max_abs_diff(t.value(out), &expect)
}

/// Fusion on a random image-tower layer against the dense layer over
/// `[z; fcp; y_s]`, keeping only the token rows. `y` holds `m_y` rows per
/// sequence.
pub fn fusion_error(seed: u64) -> f64 {
    let model = super::toy_pmf(DType::F64, seed);
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (batch, len, d) = (2, r.random_range(2..8), 16);
    let layer = r.random_range(0..4);
    let z = random_mat(&mut r, batch * len, d, 1.0);
    let mask = random_mask(&mut r, batch, len);
    let (m_fcp, m_y) = (r.random_range(0..3), r.random_range(0..4));
    let fcp = random_mat(&mut r, m_fcp.max(1), d, 1.0);
    let y = random_mat(&mut r, batch * m_y.max(1), d, 1.0);
    let mut t = Tape::new(DType::F64);
    let zs = sequence(&mut t, &z, batch, mask.clone());
    let fv = (m_fcp > 0).then(|| constant(&mut t, &fcp));
    let yv = (m_y > 0).then(|| constant(&mut t, &y));
    let out = fusion_stage(&mut t, &model.img, &model.store, layer, &zs, fv, yv).unwrap();
    assert_eq!(out.mask, mask);

    let mut expect = Vec::new();
    for s in 0..batch {
        let mut full: Mat = z[s * len..(s + 1) * len].to_vec();
        if m_fcp > 0 {
            full.extend(fcp.iter().cloned());
        }
        if m_y > 0 {
            full.extend(y[s * m_y..(s + 1) * m_y].iter().cloned());
        }
        let mut m = mask[s * len..(s + 1) * len].to_vec();
        m.resize(full.len(), true);
        let o = dense_layer(&model.store, &model.img, layer, &full, &m);
        expect.extend(flatten(&o[..len].to_vec()));
    }
    max_abs_diff(t.value(out.tokens), &expect)
}

/// A bottleneck mapping with random sizes against the dense two-layer MLP.
pub fn mapping_error(seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xa11);
    let (d_in, b, d_out, rows) = (
        r.random_range(1..20),
        r.random_range(1..10),
        r.random_range(1..20),
        r.random_range(1..6),
    );
    let mut store = ParamStore::new();
    let m = Mapping::init(MappingKind::Bottleneck, &mut store, "m.", d_in, b, d_out, DType::F64, &mut rng::seeded(seed))
        .unwrap();
    let x = random_mat(&mut r, rows, d_in, 2.0);
    let mut t = Tape::new(DType::F64);
    let xv = constant(&mut t, &x);
    let y = m.map_intermediate(&mut t, &store, xv).unwrap();
    let ids = m.param_ids();
    let get = |i: usize| store.get(ids[i]).data().to_vec();
    let oracle = dense_mapping(&x, &unflatten(&get(0), b), &get(1), &unflatten(&get(2), d_out), &get(3));
    max_abs_diff(t.value(y), &flatten(&oracle))
}

/// Deviation of the averaged dual head from a single head over the
/// concatenated CLS vectors, with `W = [W_img; W_txt] / 2` and the shared
/// bias. Returns `(logit error, gradient error)`, where dual-head gradients
/// are compared with half the single-head ones. The loss is a fixed random
/// linear functional of the logits, so any upstream gradient is covered.
pub fn head_equivalence_error(seed: u64) -> (f64, f64) {
    let mut model = super::toy_pmf(DType::F64, seed);
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x4ead);
    let (hi, ht) = (model.head_img.clone(), model.head_txt.clone());
    let bias: Vec<f64> = model.store.get(hi.b).data().to_vec();
    model.store.get_mut(ht.b).set_data(bias.clone()).unwrap();
    let (di, dt, c) = (hi.d_in, ht.d_in, hi.n_out);
    let batch = r.random_range(1..6);
    let ci = random_mat(&mut r, batch, di, 1.0);
    let ct = random_mat(&mut r, batch, dt, 1.0);
    let coef = random_mat(&mut r, batch, c, 1.0);

    let mut t = Tape::new(DType::F64);
    let (civ, ctv, coefv) = (constant(&mut t, &ci), constant(&mut t, &ct), constant(&mut t, &coef));
    let logits = model.dual_head(&mut t, civ, ctv).unwrap();
    let weighted = t.mul(logits, coefv).unwrap();
    let loss = t.sum(weighted);
    let got = t.value(logits).to_vec();
    let grads = t.backward(loss).unwrap();

    let half = |v: &[f64]| v.iter().map(|x| x / 2.0).collect::<Vec<_>>();
    let mut w = unflatten(&half(model.store.get(hi.w).data()), c);
    w.extend(unflatten(&half(model.store.get(ht.w).data()), c));
    let x: Mat = ci.iter().zip(&ct).map(|(a, b)| a.iter().chain(b).copied().collect()).collect();
    let logit_err = max_abs_diff(&got, &flatten(&dense_linear(&x, &w, &bias)));

    // Single head: dW = x^T coef, db = column sums of coef.
    let dw: Mat = (0..di + dt)
        .map(|i| (0..c).map(|j| (0..batch).map(|n| x[n][i] * coef[n][j]).sum()).collect())
        .collect();
    let db: Vec<f64> = (0..c).map(|j| (0..batch).map(|n| coef[n][j]).sum()).collect();
    let mut grad_err: f64 = 0.0;
    let mut check = |got: &[f64], want: &[f64]| grad_err = grad_err.max(max_abs_diff(got, &half(want)));
    check(grads.param(hi.w).unwrap(), &flatten(&dw[..di].to_vec()));
    check(grads.param(ht.w).unwrap(), &flatten(&dw[di..].to_vec()));
    check(grads.param(hi.b).unwrap(), &db);
    check(grads.param(ht.b).unwrap(), &db);
    (logit_err, grad_err)
}
