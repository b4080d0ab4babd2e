use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element precision. Buffers are held as `f64`; in `F32` mode every value is
/// rounded to the nearest `f32` after each operation, so results are exactly
/// what single-precision storage would hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    F32,
    F64,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            DType::F32 => x as f32 as f64,
            DType::F64 => x,
        }
    }

    pub fn round_slice(self, xs: &mut [f64]) {
        if self == DType::F32 {
            for x in xs {
                *x = *x as f32 as f64;
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

/// Row-major n-dimensional value with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, dtype: DType, mut data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        dtype.round_slice(&mut data);
        Ok(Tensor {
            shape,
            dtype,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>, dtype: DType) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, dtype, vec![0.0; n]).expect("zeros shape must be non-empty")
    }

    pub fn scalar(value: f64, dtype: DType) -> Self {
        Tensor::new(vec![1], dtype, vec![value]).unwrap()
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.set_requires_grad(requires_grad);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn nbytes(&self) -> usize {
        self.numel() * self.dtype.size_of()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Overwrites the values, rounding to the tensor's dtype.
    pub fn set_data(&mut self, mut data: Vec<f64>) -> Result<()> {
        if data.len() != self.data.len() {
            return Err(Error::shape(
                "set_data",
                format!("expected {} values, got {}", self.data.len(), data.len()),
            ));
        }
        self.dtype.round_slice(&mut data);
        self.data = data;
        Ok(())
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Freezing drops any gradient buffer; a frozen tensor never holds one.
    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Accumulates into the gradient slot. Ignored for frozen tensors.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if !self.requires_grad {
            return Ok(());
        }
        if g.len() != self.data.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("grad has {} values, tensor {}", g.len(), self.data.len()),
            ));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Converts to `dtype`, rounding values when narrowing.
    pub fn cast(&self, dtype: DType) -> Tensor {
        let mut out = self.clone();
        out.dtype = dtype;
        dtype.round_slice(&mut out.data);
        if let Some(g) = &mut out.grad {
            dtype.round_slice(g);
        }
        out
    }

    /// Rows and columns when viewed as a matrix; vectors are a single row.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => {
                let c = *s.last().unwrap();
                (self.numel() / c, c)
            }
        }
    }
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// An ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.index_of(&name).is_none(),
            "duplicate parameter name `{name}`"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn index_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(|id| &mut self.tensors[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Names of parameters with `requires_grad`, in insertion order.
    pub fn trainable_names(&self) -> Vec<String> {
        self.iter()
            .filter(|(_, _, t)| t.requires_grad())
            .map(|(_, n, _)| n.to_string())
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.requires_grad())
            .map(Tensor::numel)
            .sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Sets `requires_grad` on every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            if name.starts_with(prefix) {
                t.set_requires_grad(trainable);
            }
        }
    }

    /// Copies values from `src` for every name under `src_prefix`, renamed to
    /// `dst_prefix`. Shapes must agree. Returns the number of tensors copied.
    pub fn copy_values_from(
        &mut self,
        src: &ParamStore,
        src_prefix: &str,
        dst_prefix: &str,
    ) -> Result<usize> {
        let mut copied = 0;
        for (_, name, t) in src.iter() {
            let Some(rest) = name.strip_prefix(src_prefix) else {
                continue;
            };
            let dst_name = format!("{dst_prefix}{rest}");
            let dst = self
                .by_name_mut(&dst_name)
                .ok_or_else(|| Error::UnknownParam(dst_name.clone()))?;
            if dst.shape() != t.shape() {
                return Err(Error::shape(
                    "copy_values_from",
                    format!("{dst_name}: {:?} vs {:?}", dst.shape(), t.shape()),
                ));
            }
            dst.set_data(t.data().to_vec())?;
            copied += 1;
        }
        Ok(copied)
    }
}
