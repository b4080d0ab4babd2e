//! Reverse-mode tape.
//!
//! Every value produced during a forward pass lives in the tape's arena and is
//! addressed by a [`Var`]. An operation appends a [`Node`] only while the tape
//! is recording *and* at least one of its inputs requires a gradient; anything
//! else is computed eagerly and treated as a constant by [`Tape::backward`].
//!
//! Each node carries the number of bytes its adjoint needs to keep alive from
//! the forward pass (see [`OpKind`] for the per-op rule). The sum of those
//! counts is the training-memory proxy reported by [`Tape::stats`].

use std::collections::HashMap;

use crate::autograd::tensor::{DType, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value in a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
pub(crate) struct Slot {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub leaf: bool,
}

/// Operation kinds and the inputs each saves for its adjoint.
///
/// | kind           | saved                                                  |
/// |----------------|--------------------------------------------------------|
/// | `matmul`       | `b` if `a` needs a grad, `a` if `b` needs a grad        |
/// | `mul`          | same cross rule as `matmul`                            |
/// | `relu`, `gelu` | the input                                              |
/// | `layer_norm`   | the input, plus the gain when the input needs a grad   |
/// | `attention`    | `q`, `k`, `v` (probabilities are recomputed)            |
/// | `cross_entropy`, `bce` | the logits                                     |
/// | everything else| nothing (adjoint depends on shapes and indices only)   |
#[derive(Debug, Clone)]
pub enum OpKind {
    MatMul,
    Add,
    AddRow,
    Mul,
    Scale(f64),
    ScaleRows(Vec<f64>),
    Relu,
    Gelu,
    LayerNorm {
        eps: f64,
    },
    Attention {
        seq_len: usize,
        heads: usize,
        key_mask: Vec<bool>,
    },
    /// Output row `i` is row `src[i].1` of input `src[i].0`.
    GatherRows {
        src: Vec<(u32, u32)>,
    },
    ConcatCols,
    Sum,
    Mean,
    CrossEntropy {
        labels: Vec<usize>,
        weights: Vec<f64>,
    },
    Bce {
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::AddRow => "add_row",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::ScaleRows(_) => "scale_rows",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::LayerNorm { .. } => "layer_norm",
            OpKind::Attention { .. } => "attention",
            OpKind::GatherRows { .. } => "gather_rows",
            OpKind::ConcatCols => "concat_cols",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::CrossEntropy { .. } => "cross_entropy",
            OpKind::Bce { .. } => "bce",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: OpKind,
    pub inputs: Vec<Var>,
    pub output: Var,
    pub saved_bytes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct TapeStats {
    pub node_count: usize,
    pub saved_bytes: usize,
}

impl std::ops::Add for TapeStats {
    type Output = TapeStats;
    fn add(self, rhs: TapeStats) -> TapeStats {
        TapeStats {
            node_count: self.node_count + rhs.node_count,
            saved_bytes: self.saved_bytes + rhs.saved_bytes,
        }
    }
}

/// Adjoints of the leaves reached by a backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    by_var: HashMap<Var, Vec<f64>>,
    params: Vec<(ParamId, Var)>,
    /// Number of node adjoints evaluated.
    pub adjoint_evals: usize,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.by_var.get(&var).map(Vec::as_slice)
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.get(*v))
    }

    /// Accumulates parameter adjoints into the store's gradient slots.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        for &(id, var) in &self.params {
            if let Some(g) = self.by_var.get(&var) {
                store.get_mut(id).accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct Tape {
    pub(crate) slots: Vec<Slot>,
    nodes: Vec<Node>,
    recording: bool,
    consumed: bool,
    dtype: DType,
    param_vars: HashMap<ParamId, Var>,
}

impl Tape {
    pub fn new(dtype: DType) -> Self {
        Tape {
            slots: Vec::new(),
            nodes: Vec::new(),
            recording: true,
            consumed: false,
            dtype,
            param_vars: HashMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn stats(&self) -> TapeStats {
        TapeStats {
            node_count: self.nodes.len(),
            saved_bytes: self.nodes.iter().map(|n| n.saved_bytes).sum(),
        }
    }

    /// Runs `f` with recording switched off. Values are computed exactly as
    /// when recording; no nodes are appended and outputs carry no gradient.
    pub fn no_grad<T>(&mut self, f: impl FnOnce(&mut Tape) -> T) -> T {
        let prev = std::mem::replace(&mut self.recording, false);
        let out = f(self);
        self.recording = prev;
        out
    }

    fn push_leaf(&mut self, rows: usize, cols: usize, mut data: Vec<f64>, rg: bool) -> Var {
        self.dtype.round_slice(&mut data);
        self.slots.push(Slot {
            rows,
            cols,
            data,
            requires_grad: rg,
            leaf: true,
        });
        Var(self.slots.len() - 1)
    }

    /// A constant input (never receives a gradient).
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        check_len("constant", rows, cols, data.len())?;
        Ok(self.push_leaf(rows, cols, data, false))
    }

    /// A free leaf that receives a gradient when `requires_grad` is set.
    pub fn variable(&mut self, tensor: &Tensor) -> Var {
        let (r, c) = tensor.matrix_dims();
        let rg = tensor.requires_grad();
        self.push_leaf(r, c, tensor.data().to_vec(), rg)
    }

    /// The tape's view of a stored parameter. Repeated calls return the same
    /// leaf, so adjoints from every use accumulate in one place. A tape
    /// serves one store: ids from a second store would alias the first.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.variable(store.get(id));
        self.param_vars.insert(id, v);
        v
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let s = &self.slots[v.0];
        (s.rows, s.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.slots[v.0].data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.slots[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let s = &self.slots[v.0];
        Tensor::new(vec![s.rows, s.cols], self.dtype, s.data.clone()).unwrap()
    }

    /// Row `r` of `v` as a slice.
    pub fn row(&self, v: Var, r: usize) -> &[f64] {
        let s = &self.slots[v.0];
        &s.data[r * s.cols..(r + 1) * s.cols]
    }

    /// Registers the result of an op. `saved` lists the inputs whose buffers
    /// the adjoint needs.
    pub(crate) fn emit(
        &mut self,
        op: OpKind,
        inputs: &[Var],
        rows: usize,
        cols: usize,
        mut data: Vec<f64>,
        saved: &[Var],
    ) -> Var {
        debug_assert_eq!(data.len(), rows * cols);
        self.dtype.round_slice(&mut data);
        let rg = self.recording && inputs.iter().any(|v| self.slots[v.0].requires_grad);
        self.slots.push(Slot {
            rows,
            cols,
            data,
            requires_grad: rg,
            leaf: false,
        });
        let output = Var(self.slots.len() - 1);
        if rg {
            let elem = self.dtype.size_of();
            let saved_bytes = saved
                .iter()
                .map(|v| self.slots[v.0].data.len() * elem)
                .sum();
            self.nodes.push(Node {
                op,
                inputs: inputs.to_vec(),
                output,
                saved_bytes,
            });
        }
        output
    }

    /// Propagates adjoints from a scalar `loss` back to every leaf that
    /// requires a gradient. The tape cannot be replayed afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let (r, c) = self.dims(loss);
        if r * c != 1 {
            return Err(Error::NonScalarLoss(vec![r, c]));
        }
        if !self.slots[loss.0].requires_grad {
            return Err(Error::NoGradPath);
        }
        let first_is_nonfinite = !self.slots[loss.0].data[0].is_finite();
        if first_is_nonfinite {
            return Err(Error::NonFinite("loss".into()));
        }
        self.consumed = true;

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.slots.len()];
        adj[loss.0] = Some(vec![1.0]);
        let mut evals = 0;
        let nodes = std::mem::take(&mut self.nodes);
        for node in nodes.iter().rev() {
            let Some(g_out) = adj[node.output.0].take() else {
                continue;
            };
            evals += 1;
            let grads = self.node_adjoint(node, &g_out);
            for (input, g) in node.inputs.iter().zip(grads) {
                let Some(g) = g else { continue };
                if !self.slots[input.0].requires_grad {
                    continue;
                }
                match &mut adj[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        self.nodes = nodes;

        let mut by_var = HashMap::new();
        for (i, slot) in self.slots.iter().enumerate() {
            if slot.leaf && slot.requires_grad {
                if let Some(g) = adj[i].take() {
                    by_var.insert(Var(i), g);
                }
            }
        }
        let mut params: Vec<_> = self.param_vars.iter().map(|(&p, &v)| (p, v)).collect();
        params.sort();
        Ok(Gradients {
            by_var,
            params,
            adjoint_evals: evals,
        })
    }
}

pub(crate) fn check_len(op: &'static str, rows: usize, cols: usize, len: usize) -> Result<()> {
    if rows == 0 || cols == 0 || rows * cols != len {
        return Err(Error::shape(
            op,
            format!("{rows}x{cols} needs {} values, got {len}", rows * cols),
        ));
    }
    Ok(())
}
