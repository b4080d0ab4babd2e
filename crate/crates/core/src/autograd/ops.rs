//! Differentiable operations on [`Tape`] values. All values are matrices;
//! vectors are single rows.

use crate::autograd::tape::{OpKind, Tape, Var};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `c[m x n] = a[m x k] * b[k x n]`
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `g[m x k] = d[m x n] * b[k x n]^T`
fn matmul_nt_kernel(d: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut g = vec![0.0; m * k];
    for i in 0..m {
        let d_row = &d[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            g[i * k + p] = d_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    g
}

/// `g[k x n] = a[m x k]^T * d[m x n]`
fn matmul_tn_kernel(a: &[f64], d: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut g = vec![0.0; k * n];
    for i in 0..m {
        let d_row = &d[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let g_row = &mut g[p * n..(p + 1) * n];
            for (gv, dv) in g_row.iter_mut().zip(d_row) {
                *gv += aip * dv;
            }
        }
    }
    g
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Numerically stable `log(1 + exp(x))`.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of `logits[rows x cols]`.
fn softmax_rows(logits: &[f64], cols: usize) -> Vec<f64> {
    let mut out = logits.to_vec();
    for row in out.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            z += *x;
        }
        row.iter_mut().for_each(|x| *x /= z);
    }
    out
}

/// Attention probabilities for one (sequence, head) block.
fn attention_probs(
    q: &[f64],
    k: &[f64],
    d: usize,
    base: usize,
    seq_len: usize,
    col0: usize,
    dh: usize,
    key_mask: &[bool],
) -> Vec<f64> {
    let scale = 1.0 / (dh as f64).sqrt();
    let mut p = vec![0.0; seq_len * seq_len];
    for i in 0..seq_len {
        let qi = &q[(base + i) * d + col0..(base + i) * d + col0 + dh];
        let row = &mut p[i * seq_len..(i + 1) * seq_len];
        let mut max = f64::NEG_INFINITY;
        for j in 0..seq_len {
            if key_mask[base + j] {
                let kj = &k[(base + j) * d + col0..(base + j) * d + col0 + dh];
                let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                row[j] = s;
                max = max.max(s);
            }
        }
        let mut z = 0.0;
        for j in 0..seq_len {
            if key_mask[base + j] {
                row[j] = (row[j] - max).exp();
                z += row[j];
            } else {
                row[j] = 0.0;
            }
        }
        row.iter_mut().for_each(|x| *x /= z);
    }
    p
}

impl Tape {
    fn rg(&self, v: Var) -> bool {
        self.requires_grad(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} * {k2}x{n}")));
        }
        let c = matmul_kernel(self.value(a), self.value(b), m, k, n);
        let mut saved = Vec::new();
        if self.rg(a) {
            saved.push(b);
        }
        if self.rg(b) {
            saved.push(a);
        }
        Ok(self.emit(OpKind::MatMul, &[a, b], m, n, c, &saved))
    }

    /// `x * w + bias` with `bias` a single row broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, bias)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::shape("add", format!("{da:?} vs {db:?}")));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.emit(OpKind::Add, &[a, b], da.0, da.1, out, &[]))
    }

    /// Adds the single row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(r) != (1, n) {
            return Err(Error::shape("add_row", format!("{m}x{n} + {:?}", self.dims(r))));
        }
        let row = self.value(r);
        let out = self
            .value(a)
            .chunks(n)
            .flat_map(|ar| ar.iter().zip(row).map(|(x, y)| x + y))
            .collect();
        Ok(self.emit(OpKind::AddRow, &[a, r], m, n, out, &[]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::shape("mul", format!("{da:?} vs {db:?}")));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let mut saved = Vec::new();
        if self.rg(a) {
            saved.push(b);
        }
        if self.rg(b) {
            saved.push(a);
        }
        Ok(self.emit(OpKind::Mul, &[a, b], da.0, da.1, out, &saved))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (m, n) = self.dims(a);
        let out = self.value(a).iter().map(|x| x * s).collect();
        self.emit(OpKind::Scale(s), &[a], m, n, out, &[])
    }

    /// Multiplies row `i` by `factors[i]`; used to hold masked rows fixed.
    pub fn scale_rows(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let (m, n) = self.dims(a);
        if factors.len() != m {
            return Err(Error::shape("scale_rows", format!("{m} rows, {} factors", factors.len())));
        }
        let out = self
            .value(a)
            .chunks(n)
            .zip(&factors)
            .flat_map(|(row, f)| row.iter().map(move |x| x * f))
            .collect();
        Ok(self.emit(OpKind::ScaleRows(factors), &[a], m, n, out, &[]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        self.emit(OpKind::Relu, &[a], m, n, out, &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        self.emit(OpKind::Gelu, &[a], m, n, out, &[a])
    }

    /// Row-wise layer normalization with per-column gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.dims(gain) != (1, n) || self.dims(bias) != (1, n) {
            return Err(Error::shape(
                "layer_norm",
                format!("x {m}x{n}, gain {:?}, bias {:?}", self.dims(gain), self.dims(bias)),
            ));
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = Vec::with_capacity(m * n);
        for row in self.value(x).chunks(n) {
            let (mean, rstd) = row_stats(row, eps);
            out.extend(row.iter().zip(g).zip(b).map(|((v, g), b)| (v - mean) * rstd * g + b));
        }
        let mut saved = vec![x];
        if self.rg(x) {
            saved.push(gain);
        }
        Ok(self.emit(OpKind::LayerNorm { eps }, &[x, gain, bias], m, n, out, &saved))
    }

    /// Multi-head scaled dot-product attention over a batch of equal-length
    /// sequences stacked row-wise. `key_mask[r]` false removes row `r` as a
    /// key; each query row still produces an output.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        key_mask: &[bool],
    ) -> Result<Var> {
        let (rows, d) = self.dims(q);
        if self.dims(k) != (rows, d) || self.dims(v) != (rows, d) {
            return Err(Error::shape("attention", "q, k, v must share a shape"));
        }
        if heads == 0 || d % heads != 0 || seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::shape(
                "attention",
                format!("rows {rows}, seq_len {seq_len}, d {d}, heads {heads}"),
            ));
        }
        if key_mask.len() != rows {
            return Err(Error::shape("attention", "key mask length must equal row count"));
        }
        let dh = d / heads;
        let (qd, kd, vd) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![0.0; rows * d];
        for base in (0..rows).step_by(seq_len) {
            if !key_mask[base..base + seq_len].iter().any(|&m| m) {
                return Err(Error::Input("sequence with every key masked".into()));
            }
            for h in 0..heads {
                let col0 = h * dh;
                let p = attention_probs(qd, kd, d, base, seq_len, col0, dh, key_mask);
                for i in 0..seq_len {
                    let o = &mut out[(base + i) * d + col0..(base + i) * d + col0 + dh];
                    for j in 0..seq_len {
                        let pij = p[i * seq_len + j];
                        if pij == 0.0 {
                            continue;
                        }
                        let vj = &vd[(base + j) * d + col0..(base + j) * d + col0 + dh];
                        o.iter_mut().zip(vj).for_each(|(a, b)| *a += pij * b);
                    }
                }
            }
        }
        let op = OpKind::Attention {
            seq_len,
            heads,
            key_mask: key_mask.to_vec(),
        };
        Ok(self.emit(op, &[q, k, v], rows, d, out, &[q, k, v]))
    }

    /// Builds a matrix whose row `i` is row `src[i].1` of `inputs[src[i].0]`.
    /// Inputs must share a column count.
    pub fn gather_rows(&mut self, inputs: &[Var], src: Vec<(u32, u32)>) -> Result<Var> {
        if inputs.is_empty() || src.is_empty() {
            return Err(Error::shape("gather_rows", "no inputs or no rows"));
        }
        let cols = self.dims(inputs[0]).1;
        for &v in inputs {
            if self.dims(v).1 != cols {
                return Err(Error::shape(
                    "gather_rows",
                    format!("column counts differ: {cols} vs {}", self.dims(v).1),
                ));
            }
        }
        let mut out = Vec::with_capacity(src.len() * cols);
        for &(i, r) in &src {
            let v = *inputs
                .get(i as usize)
                .ok_or_else(|| Error::shape("gather_rows", format!("input {i} out of range")))?;
            if r as usize >= self.dims(v).0 {
                return Err(Error::shape("gather_rows", format!("row {r} out of range")));
            }
            out.extend_from_slice(self.row(v, r as usize));
        }
        let rows = src.len();
        Ok(self.emit(OpKind::GatherRows { src }, inputs, rows, cols, out, &[]))
    }

    pub fn concat_rows(&mut self, inputs: &[Var]) -> Result<Var> {
        let src = inputs
            .iter()
            .enumerate()
            .flat_map(|(i, &v)| (0..self.dims(v).0 as u32).map(move |r| (i as u32, r)))
            .collect();
        self.gather_rows(inputs, src)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.gather_rows(&[a], (start..start + len).map(|r| (0, r as u32)).collect())
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((ma, na), (mb, nb)) = (self.dims(a), self.dims(b));
        if ma != mb {
            return Err(Error::shape("concat_cols", format!("{ma} rows vs {mb} rows")));
        }
        let mut out = Vec::with_capacity(ma * (na + nb));
        for r in 0..ma {
            out.extend_from_slice(self.row(a, r));
            out.extend_from_slice(self.row(b, r));
        }
        Ok(self.emit(OpKind::ConcatCols, &[a, b], ma, na + nb, out, &[]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.emit(OpKind::Sum, &[a], 1, 1, vec![s], &[])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.emit(OpKind::Mean, &[a], 1, 1, vec![s], &[])
    }

    /// Mean over rows of `-w[y] * log softmax(logits)[y]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
        let (m, c) = self.dims(logits);
        if labels.len() != m || weights.len() != c {
            return Err(Error::shape(
                "cross_entropy",
                format!("{m}x{c} logits, {} labels, {} weights", labels.len(), weights.len()),
            ));
        }
        let z = self.value(logits);
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        let mut total = 0.0;
        for (row, &y) in z.chunks(c).zip(labels) {
            if y >= c {
                return Err(Error::Input(format!("label {y} >= {c} classes")));
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += weights[y] * (lse - row[y]);
        }
        let op = OpKind::CrossEntropy {
            labels: labels.to_vec(),
            weights: weights.to_vec(),
        };
        Ok(self.emit(op, &[logits], 1, 1, vec![total / m as f64], &[logits]))
    }

    /// Mean over rows and labels of `w[c] * BCE(sigmoid(x), y)`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let (m, c) = self.dims(logits);
        if targets.len() != m * c || weights.len() != c {
            return Err(Error::shape(
                "bce",
                format!("{m}x{c} logits, {} targets, {} weights", targets.len(), weights.len()),
            ));
        }
        let z = self.value(logits);
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        let total: f64 = z
            .iter()
            .zip(targets)
            .enumerate()
            .map(|(i, (&x, &y))| weights[i % c] * (y * softplus(-x) + (1.0 - y) * softplus(x)))
            .sum();
        let op = OpKind::Bce {
            targets: targets.to_vec(),
            weights: weights.to_vec(),
        };
        Ok(self.emit(op, &[logits], 1, 1, vec![total / (m * c) as f64], &[logits]))
    }

    /// Adjoints of `node`'s inputs given the adjoint of its output. `None`
    /// marks inputs that need no gradient.
    pub(crate) fn node_adjoint(
        &self,
        node: &crate::autograd::tape::Node,
        g: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let inp = &node.inputs;
        let want = |i: usize| self.slots[inp[i].0].requires_grad;
        match &node.op {
            OpKind::MatMul => {
                let (m, k) = self.dims(inp[0]);
                let n = self.dims(inp[1]).1;
                let ga = want(0).then(|| matmul_nt_kernel(g, self.value(inp[1]), m, k, n));
                let gb = want(1).then(|| matmul_tn_kernel(self.value(inp[0]), g, m, k, n));
                vec![ga, gb]
            }
            OpKind::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
            OpKind::AddRow => {
                let n = self.dims(inp[1]).1;
                let gr = want(1).then(|| {
                    let mut acc = vec![0.0; n];
                    for row in g.chunks(n) {
                        acc.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    acc
                });
                vec![Some(g.to_vec()), gr]
            }
            OpKind::Mul => {
                let (a, b) = (self.value(inp[0]), self.value(inp[1]));
                let ga = want(0).then(|| g.iter().zip(b).map(|(x, y)| x * y).collect());
                let gb = want(1).then(|| g.iter().zip(a).map(|(x, y)| x * y).collect());
                vec![ga, gb]
            }
            OpKind::Scale(s) => vec![Some(g.iter().map(|x| x * s).collect())],
            OpKind::ScaleRows(f) => {
                let n = self.dims(inp[0]).1;
                let out = g
                    .chunks(n)
                    .zip(f)
                    .flat_map(|(row, f)| row.iter().map(move |x| x * f))
                    .collect();
                vec![Some(out)]
            }
            OpKind::Relu => {
                let x = self.value(inp[0]);
                vec![Some(g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect())]
            }
            OpKind::Gelu => {
                let x = self.value(inp[0]);
                vec![Some(g.iter().zip(x).map(|(g, &x)| g * gelu_grad(x)).collect())]
            }
            OpKind::LayerNorm { eps } => self.layer_norm_adjoint(inp, g, *eps),
            OpKind::Attention {
                seq_len,
                heads,
                key_mask,
            } => self.attention_adjoint(inp, g, *seq_len, *heads, key_mask),
            OpKind::GatherRows { src } => {
                let cols = self.dims(node.output).1;
                let mut out: Vec<Option<Vec<f64>>> = inp
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| want(i).then(|| vec![0.0; self.value(v).len()]))
                    .collect();
                for (row, &(i, r)) in g.chunks(cols).zip(src) {
                    if let Some(acc) = &mut out[i as usize] {
                        let dst = &mut acc[r as usize * cols..(r as usize + 1) * cols];
                        dst.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
                out
            }
            OpKind::ConcatCols => {
                let (m, na) = self.dims(inp[0]);
                let nb = self.dims(inp[1]).1;
                let mut ga = Vec::with_capacity(m * na);
                let mut gb = Vec::with_capacity(m * nb);
                for row in g.chunks(na + nb) {
                    ga.extend_from_slice(&row[..na]);
                    gb.extend_from_slice(&row[na..]);
                }
                vec![Some(ga), Some(gb)]
            }
            OpKind::Sum => vec![Some(vec![g[0]; self.value(inp[0]).len()])],
            OpKind::Mean => {
                let n = self.value(inp[0]).len();
                vec![Some(vec![g[0] / n as f64; n])]
            }
            OpKind::CrossEntropy { labels, weights } => {
                let (m, c) = self.dims(inp[0]);
                let mut p = softmax_rows(self.value(inp[0]), c);
                for (row, &y) in p.chunks_mut(c).zip(labels) {
                    let w = weights[y] * g[0] / m as f64;
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|x| *x *= w);
                }
                vec![Some(p)]
            }
            OpKind::Bce { targets, weights } => {
                let (m, c) = self.dims(inp[0]);
                let scale = g[0] / (m * c) as f64;
                let out = self
                    .value(inp[0])
                    .iter()
                    .zip(targets)
                    .enumerate()
                    .map(|(i, (&x, &y))| weights[i % c] * (sigmoid(x) - y) * scale)
                    .collect();
                vec![Some(out)]
            }
        }
    }

    fn layer_norm_adjoint(&self, inp: &[Var], g: &[f64], eps: f64) -> Vec<Option<Vec<f64>>> {
        let n = self.dims(inp[0]).1;
        let x = self.value(inp[0]);
        let gain = self.value(inp[1]);
        let want_x = self.slots[inp[0].0].requires_grad;
        let mut gx = want_x.then(|| vec![0.0; x.len()]);
        let mut gg = vec![0.0; n];
        let mut gb = vec![0.0; n];
        for (r, (xr, gr)) in x.chunks(n).zip(g.chunks(n)).enumerate() {
            let (mean, rstd) = row_stats(xr, eps);
            let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * rstd).collect();
            for j in 0..n {
                gg[j] += gr[j] * xhat[j];
                gb[j] += gr[j];
            }
            if let Some(gx) = &mut gx {
                // dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
                let dxhat: Vec<f64> = gr.iter().zip(gain).map(|(a, b)| a * b).collect();
                let m1 = dxhat.iter().sum::<f64>() / n as f64;
                let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                let dst = &mut gx[r * n..(r + 1) * n];
                for j in 0..n {
                    dst[j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                }
            }
        }
        vec![gx, Some(gg), Some(gb)]
    }

    fn attention_adjoint(
        &self,
        inp: &[Var],
        g: &[f64],
        seq_len: usize,
        heads: usize,
        key_mask: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (rows, d) = self.dims(inp[0]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(inp[0]), self.value(inp[1]), self.value(inp[2]));
        let mut gq = vec![0.0; rows * d];
        let mut gk = vec![0.0; rows * d];
        let mut gv = vec![0.0; rows * d];
        let mut ds = vec![0.0; seq_len * seq_len];
        for base in (0..rows).step_by(seq_len) {
            for h in 0..heads {
                let col0 = h * dh;
                let at = |r: usize| (base + r) * d + col0..(base + r) * d + col0 + dh;
                let p = attention_probs(qd, kd, d, base, seq_len, col0, dh, key_mask);
                for i in 0..seq_len {
                    let go = &g[at(i)];
                    // dP_ij = dO_i . v_j ; dV_j += P_ij dO_i
                    let mut dot = 0.0;
                    for j in 0..seq_len {
                        let pij = p[i * seq_len + j];
                        if pij == 0.0 {
                            ds[i * seq_len + j] = 0.0;
                            continue;
                        }
                        let dp: f64 = go.iter().zip(&vd[at(j)]).map(|(a, b)| a * b).sum();
                        ds[i * seq_len + j] = dp;
                        dot += pij * dp;
                        gv[at(j)].iter_mut().zip(go).for_each(|(a, b)| *a += pij * b);
                    }
                    for j in 0..seq_len {
                        let pij = p[i * seq_len + j];
                        ds[i * seq_len + j] = pij * (ds[i * seq_len + j] - dot) * scale;
                    }
                }
                for i in 0..seq_len {
                    for j in 0..seq_len {
                        let s = ds[i * seq_len + j];
                        if s == 0.0 {
                            continue;
                        }
                        let (ri, rj) = (at(i), at(j));
                        for c in 0..dh {
                            gq[ri.start + c] += s * kd[rj.start + c];
                            gk[rj.start + c] += s * qd[ri.start + c];
                        }
                    }
                }
            }
        }
        let want = |i: usize| self.slots[inp[i].0].requires_grad;
        vec![
            want(0).then_some(gq),
            want(1).then_some(gk),
            want(2).then_some(gv),
        ]
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}
