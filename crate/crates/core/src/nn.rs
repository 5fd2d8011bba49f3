//! Layer building blocks over the tape.

use rand::Rng;

use crate::matrix::Matrix;
use crate::params::{trunc_normal, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

pub const INIT_STD: f64 = 0.02;

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a, T: Scalar, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    pub group: ParamGroup,
    prefix: String,
}

impl<'a, T: Scalar, R: Rng> Builder<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R, group: ParamGroup, prefix: &str) -> Self {
        Self { store, rng, group, prefix: prefix.to_string() }
    }

    pub fn scope<'b>(&'b mut self, name: &str) -> Builder<'b, T, R> {
        let prefix = self.name(name);
        Builder { store: self.store, rng: self.rng, group: self.group, prefix }
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let value = trunc_normal(rows, cols, INIT_STD, self.rng);
        let full = self.name(name);
        self.store.add(full, value, self.group)
    }

    pub fn filled(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> ParamId {
        let full = self.name(name);
        self.store.add(full, Matrix::filled(rows, cols, T::lit(v)), self.group)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let mut s = b.scope(name);
        Self { weight: s.normal("weight", fan_in, fan_out), bias: s.filled("bias", 1, fan_out, 0.0) }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w);
        tape.add_bias(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, dim: usize) -> Self {
        let mut s = b.scope(name);
        Self { gamma: s.filled("gamma", 1, dim, 1.0), beta: s.filled("beta", 1, dim, 0.0) }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Two-layer perceptron with a GELU between the layers.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, dim: usize, hidden: usize, out: usize) -> Self {
        let mut s = b.scope(name);
        Self { fc1: Linear::new(&mut s, "fc1", dim, hidden), fc2: Linear::new(&mut s, "fc2", hidden, out) }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let h = self.fc1.forward(tape, x);
        let h = tape.gelu(h);
        self.fc2.forward(tape, h)
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, dim: usize, heads: usize) -> Self {
        let mut s = b.scope(name);
        Self {
            q: Linear::new(&mut s, "q", dim, dim),
            k: Linear::new(&mut s, "k", dim, dim),
            v: Linear::new(&mut s, "v", dim, dim),
            o: Linear::new(&mut s, "o", dim, dim),
            heads,
        }
    }

    /// Returns `(output, probs_node)`; per-head probabilities are readable via
    /// [`Tape::attention_probs`] on the second value.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, query: Var, kv: Var) -> (Var, Var) {
        self.forward_split(tape, query, kv, kv)
    }

    /// Separate inputs for the key and value projections.
    pub fn forward_split<T: Scalar>(&self, tape: &mut Tape<'_, T>, query: Var, key: Var, value: Var) -> (Var, Var) {
        let q = self.q.forward(tape, query);
        let k = self.k.forward(tape, key);
        let v = self.v.forward(tape, value);
        let a = tape.attention(q, k, v, self.heads);
        (self.o.forward(tape, a), a)
    }
}

/// Mean over heads of the recorded attention probabilities.
pub fn mean_attention<T: Scalar>(tape: &Tape<'_, T>, node: Var) -> Matrix<T> {
    let probs = tape.attention_probs(node).expect("attention node");
    let mut acc = probs[0].clone();
    for p in &probs[1..] {
        acc.add_assign(p);
    }
    acc.scale_assign(T::one() / T::lit(probs.len() as f64));
    acc
}
