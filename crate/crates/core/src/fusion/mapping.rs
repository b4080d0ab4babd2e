use crate::autograd::{DType, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fusion::config::MappingKind;
use crate::rng::{self, Rng};

/// Carries queried prompts from one tower's hidden space into the other's.
#[derive(Debug, Clone)]
pub enum Mapping {
    /// Two linear layers around a bottleneck, ReLU after the first only.
    Bottleneck {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
        d_src: usize,
        bottleneck: usize,
        d_dst: usize,
    },
    Identity {
        d: usize,
    },
}

impl Mapping {
    /// Registers a mapping under `prefix`. Linear layers use the uniform
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization for weights and
    /// biases.
    pub fn init(
        kind: MappingKind,
        store: &mut ParamStore,
        prefix: &str,
        d_src: usize,
        bottleneck: usize,
        d_dst: usize,
        dtype: DType,
        rng: &mut Rng,
    ) -> Result<Self> {
        if kind == MappingKind::Identity {
            if d_src != d_dst {
                return Err(Error::Config(format!(
                    "identity mapping between {d_src} and {d_dst} dimensions"
                )));
            }
            return Ok(Mapping::Identity { d: d_src });
        }
        let mut add = |name: &str, shape: Vec<usize>, fan_in: usize, rng: &mut Rng| {
            let n = shape.iter().product();
            let bound = 1.0 / (fan_in as f64).sqrt();
            let t = Tensor::new(shape, dtype, rng::uniform_vec(rng, n, bound))
                .unwrap()
                .with_requires_grad(true);
            store.insert(format!("{prefix}{name}"), t)
        };
        Ok(Mapping::Bottleneck {
            w1: add("w1", vec![d_src, bottleneck], d_src, rng),
            b1: add("b1", vec![1, bottleneck], d_src, rng),
            w2: add("w2", vec![bottleneck, d_dst], bottleneck, rng),
            b2: add("b2", vec![1, d_dst], bottleneck, rng),
            d_src,
            bottleneck,
            d_dst,
        })
    }

    pub fn attach(
        kind: MappingKind,
        store: &ParamStore,
        prefix: &str,
        d_src: usize,
        bottleneck: usize,
        d_dst: usize,
    ) -> Result<Self> {
        if kind == MappingKind::Identity {
            return Ok(Mapping::Identity { d: d_src });
        }
        let find = |n: &str| {
            let full = format!("{prefix}{n}");
            store.index_of(&full).ok_or(Error::UnknownParam(full))
        };
        let m = Mapping::Bottleneck {
            w1: find("w1")?,
            b1: find("b1")?,
            w2: find("w2")?,
            b2: find("b2")?,
            d_src,
            bottleneck,
            d_dst,
        };
        if let Mapping::Bottleneck { w1, w2, .. } = &m {
            if store.get(*w1).shape() != [d_src, bottleneck]
                || store.get(*w2).shape() != [bottleneck, d_dst]
            {
                return Err(Error::shape("mapping attach", format!("{prefix} has unexpected shape")));
            }
        }
        Ok(m)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Mapping::Bottleneck { w1, b1, w2, b2, .. } => vec![*w1, *b1, *w2, *b2],
            Mapping::Identity { .. } => Vec::new(),
        }
    }

    pub fn d_src(&self) -> usize {
        match self {
            Mapping::Bottleneck { d_src, .. } => *d_src,
            Mapping::Identity { d } => *d,
        }
    }

    pub fn d_dst(&self) -> usize {
        match self {
            Mapping::Bottleneck { d_dst, .. } => *d_dst,
            Mapping::Identity { d } => *d,
        }
    }

    /// Row-wise `W2 relu(W1 x + b1) + b2`.
    pub fn map_intermediate(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let cols = tape.dims(x).1;
        if cols != self.d_src() {
            return Err(Error::shape(
                "map_intermediate",
                format!("input has {cols} columns, mapping expects {}", self.d_src()),
            ));
        }
        match self {
            Mapping::Identity { .. } => Ok(x),
            Mapping::Bottleneck { w1, b1, w2, b2, .. } => {
                let (w1, b1, w2, b2) = (
                    tape.param(store, *w1),
                    tape.param(store, *b1),
                    tape.param(store, *w2),
                    tape.param(store, *b2),
                );
                let h = tape.linear(x, w1, b1)?;
                let h = tape.relu(h);
                tape.linear(h, w2, b2)
            }
        }
    }
}
