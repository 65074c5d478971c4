use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Array, DiffError, Real, Result};

/// Index of a parameter inside a [`ParamStore`] (registration order).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Initial value rule for a parameter.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamInit {
    /// Normal(0, std) truncated to ±2 std.
    TruncNormal {
        std: f64,
    },
    Zeros,
    Ones,
    Constant(f64),
}

/// Declared shape and initializer of a named parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: ParamInit,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered list of parameter declarations. Ids handed out here match the
/// ids of a [`ParamStore`] materialized from [`ParamLayout::specs`].
#[derive(Debug, Clone, Default)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: ParamInit) -> ParamId {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn numel(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Array<T>,
    pub grad: Array<T>,
}

/// Named trainable parameters with matching gradient buffers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(DiffError::Invalid {
                op: "param",
                detail: format!("duplicate parameter name `{name}`"),
            });
        }
        let id = ParamId(self.params.len());
        let grad = Array::zeros(value.shape().to_vec());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        Ok(id)
    }

    /// Materializes `specs` in order, drawing random initializers from a
    /// single stream seeded with `seed`.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self::new();
        for spec in specs {
            let n = spec.numel();
            let data: Vec<T> = match spec.init {
                ParamInit::TruncNormal { std } => {
                    let normal = Normal::new(0.0, std).map_err(|e| DiffError::Invalid {
                        op: "param",
                        detail: format!("{}: {e}", spec.name),
                    })?;
                    (0..n)
                        .map(|_| loop {
                            let v: f64 = normal.sample(&mut rng);
                            if v.abs() <= 2.0 * std {
                                break T::lit(v);
                            }
                        })
                        .collect()
                }
                ParamInit::Zeros => vec![T::zero(); n],
                ParamInit::Ones => vec![T::one(); n],
                ParamInit::Constant(c) => vec![T::lit(c); n],
            };
            store.insert(spec.name.clone(), Array::new(spec.shape.clone(), data)?)?;
        }
        Ok(store)
    }

    /// All-zero parameters; the allocation is lazy, so even very large
    /// layouts can be instantiated for counting.
    pub fn zeros(specs: &[ParamSpec]) -> Result<Self> {
        let mut store = Self::new();
        for spec in specs {
            store.insert(spec.name.clone(), Array::zeros(spec.shape.clone()))?;
        }
        Ok(store)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count over all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name).ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array<T> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<ParamSpec> {
        vec![
            ParamSpec {
                name: "w".into(),
                shape: vec![4, 3],
                init: ParamInit::TruncNormal { std: 0.02 },
            },
            ParamSpec {
                name: "g".into(),
                shape: vec![3],
                init: ParamInit::Ones,
            },
        ]
    }

    #[test]
    fn init_is_seeded_and_truncated() {
        let a = ParamStore::<f32>::init(&specs(), 3).unwrap();
        let b = ParamStore::<f32>::init(&specs(), 3).unwrap();
        assert_eq!(a, b);
        let w = a.value(a.require("w").unwrap());
        assert!(w.data().iter().all(|v| v.abs() <= 0.04));
        assert_eq!(a.value(ParamId(1)).data(), &[1.0; 3]);
        assert_eq!(a.numel(), 15);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.insert("x", Array::zeros(vec![1])).unwrap();
        assert!(s.insert("x", Array::zeros(vec![1])).is_err());
    }
}
