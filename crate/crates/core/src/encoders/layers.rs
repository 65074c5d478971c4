use std::sync::Arc;

use crate::diffcore::{AttentionLayout, ParamId, ParamInit, ParamLayout, ParamStore, Real, Tape, Var};

use super::EncError;

pub(crate) const WEIGHT_STD: f64 = 0.02;
const NORM_EPS: f64 = 1e-6;

/// Truncated normal with std `1/sqrt(fan_in)`, so a dense map keeps the
/// scale of its input at any width.
pub(crate) fn dense(fan_in: usize) -> ParamInit {
    ParamInit::TruncNormal {
        std: (fan_in as f64).sqrt().recip(),
    }
}

/// `x · W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub(crate) fn register(layout: &mut ParamLayout, name: &str, inputs: usize, outputs: usize) -> Self {
        Self {
            weight: layout.add(format!("{name}.w"), &[inputs, outputs], dense(inputs)),
            bias: layout.add(format!("{name}.b"), &[outputs], ParamInit::Zeros),
            inputs,
            outputs,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var, EncError> {
        let w = tape.param(store, self.weight)?;
        let b = tape.param(store, self.bias)?;
        let y = tape.matmul(x, w)?;
        Ok(tape.add_row(y, b)?)
    }
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub(crate) fn register(layout: &mut ParamLayout, name: &str, width: usize) -> Self {
        Self {
            gain: layout.add(format!("{name}.g"), &[width], ParamInit::Ones),
            bias: layout.add(format!("{name}.b"), &[width], ParamInit::Zeros),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var, EncError> {
        let g = tape.param(store, self.gain)?;
        let b = tape.param(store, self.bias)?;
        Ok(tape.layernorm(x, g, b, NORM_EPS)?)
    }
}

/// Multi-head self-attention with separate query, key, value and output maps.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub(crate) fn register(layout: &mut ParamLayout, name: &str, width: usize, heads: usize) -> Self {
        Self {
            query: Linear::register(layout, &format!("{name}.q"), width, width),
            key: Linear::register(layout, &format!("{name}.k"), width, width),
            value: Linear::register(layout, &format!("{name}.v"), width, width),
            out: Linear::register(layout, &format!("{name}.out"), width, width),
            heads,
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        layout: Arc<AttentionLayout>,
    ) -> Result<Var, EncError> {
        let q = self.query.forward(tape, store, x)?;
        let k = self.key.forward(tape, store, x)?;
        let v = self.value.forward(tape, store, x)?;
        let a = tape.attention(q, k, v, self.heads, layout)?;
        self.out.forward(tape, store, a)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub(crate) fn register(layout: &mut ParamLayout, name: &str, width: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::register(layout, &format!("{name}.fc1"), width, hidden),
            fc2: Linear::register(layout, &format!("{name}.fc2"), hidden, width),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var, EncError> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, store, h)
    }
}

/// `x + f(norm(x))`.
pub(crate) fn residual<T: Real, F>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    norm: &Norm,
    f: F,
) -> Result<Var, EncError>
where
    F: FnOnce(&mut Tape<T>, Var) -> Result<Var, EncError>,
{
    let h = norm.forward(tape, store, x)?;
    let h = f(tape, h)?;
    Ok(tape.add(x, h)?)
}
