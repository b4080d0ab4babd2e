use crate::autograd::{DType, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// A linear classifier `x W + b` stored as `<prefix>W` and `<prefix>b`.
#[derive(Debug, Clone)]
pub struct Head {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub n_out: usize,
}

impl Head {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        n_out: usize,
        dtype: DType,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = Tensor::new(vec![d_in, n_out], dtype, rng::uniform_vec(rng, d_in * n_out, bound))
            .unwrap()
            .with_requires_grad(true);
        let b = Tensor::new(vec![1, n_out], dtype, rng::uniform_vec(rng, n_out, bound))
            .unwrap()
            .with_requires_grad(true);
        Head {
            w: store.insert(format!("{prefix}W"), w),
            b: store.insert(format!("{prefix}b"), b),
            d_in,
            n_out,
        }
    }

    pub fn attach(store: &ParamStore, prefix: &str) -> Result<Self> {
        let find = |n: &str| {
            let full = format!("{prefix}{n}");
            store.index_of(&full).ok_or(Error::UnknownParam(full))
        };
        let (w, b) = (find("W")?, find("b")?);
        let shape = store.get(w).shape();
        Ok(Head {
            w,
            b,
            d_in: shape[0],
            n_out: shape[1],
        })
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.linear(x, w, b)
    }
}
