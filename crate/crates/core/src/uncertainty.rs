//! Gaussian token perception (self- and cross-modal), reparameterized
//! sampling, the KL regularizer and uncertainty fusion.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{Attention, Builder, LayerNorm, Mlp};
use crate::params::ParamId;
use crate::scalar::Scalar;
use crate::tape::{kl_mean, Tape, Var};

/// Initial output bias of the log-variance head.
pub const LOG_VAR_INIT: f64 = -4.0;

/// Token sequence with an optional positional table row per token.
#[derive(Clone, Debug)]
pub struct Tokens<'a> {
    pub x: Var,
    pub slots: &'a [usize],
}

/// Cross-attention whose inputs get a learned positional encoding before
/// projection.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttention {
    pub attn: Attention,
    pub pos: ParamId,
}

impl CrossAttention {
    pub fn new<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        dim: usize,
        heads: usize,
        slots: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dimension {dim} not divisible by {heads} heads")));
        }
        let mut s = b.scope(name);
        Ok(Self { attn: Attention::new(&mut s, "attn", dim, heads), pos: s.normal("pos", slots, dim) })
    }

    /// `(output, attention node)`; output has one row per query token.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, query: &Tokens, kv: &Tokens) -> Result<(Var, Var)> {
        let (qd, kd) = (tape.shape(query.x).1, tape.shape(kv.x).1);
        if qd != kd {
            return Err(Error::Config(format!("query width {qd} differs from key width {kd}")));
        }
        if tape.shape(kv.x).0 == 0 {
            return Err(Error::Degenerate("empty key/value token set".into()));
        }
        let table = tape.param(self.pos);
        let q = tape.add_rows(query.x, table, query.slots);
        let k = tape.add_rows(kv.x, table, kv.slots);
        Ok(self.attn.forward(tape, q, k))
    }
}

/// Mean and log-variance token sequences on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mu: Var,
    pub log_var: Var,
    /// Attention node of the perception step.
    pub attention: Var,
}

/// Detached Gaussian tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianTokens<T> {
    pub mu: Matrix<T>,
    pub log_var: Matrix<T>,
}

impl<T: Scalar> GaussianTokens<T> {
    pub fn from_tape(tape: &Tape<'_, T>, g: GaussianVars) -> Self {
        Self { mu: tape.value(g.mu).clone(), log_var: tape.value(g.log_var).clone() }
    }

    pub fn sigma(&self) -> Matrix<T> {
        self.log_var.map(|l| (l * T::lit(0.5)).exp())
    }
}

/// Predicts per-token Gaussians from attention over a key/value sequence.
/// With the query sequence as keys this is the RGB-only (self-attention)
/// perception; with event tokens as keys it is the cross-modal one.
#[derive(Clone, Copy, Debug)]
pub struct Perception {
    pub cross: CrossAttention,
    pub mu_head: Mlp,
    pub var_head: Mlp,
    pub clamp: f64,
}

impl Perception {
    pub fn new<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        dim: usize,
        heads: usize,
        slots: usize,
        clamp: f64,
    ) -> Result<Self> {
        let mut s = b.scope(name);
        let cross = CrossAttention::new(&mut s, "cross", dim, heads, slots)?;
        let mu_head = Mlp::new(&mut s, "mu", dim, 2 * dim, dim);
        let var_head = Mlp::new(&mut s, "log_var", dim, 2 * dim, dim);
        // small initial variance
        *s.store.value_mut(var_head.fc2.bias) = Matrix::filled(1, dim, T::lit(LOG_VAR_INIT));
        Ok(Self { cross, mu_head, var_head, clamp })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, fv: &Tokens, fe: &Tokens) -> Result<GaussianVars> {
        let (a, attention) = self.cross.forward(tape, fv, fe)?;
        let h = tape.add(fv.x, a);
        let m = self.mu_head.forward(tape, h);
        let mu = tape.add(h, m);
        let lv = self.var_head.forward(tape, h);
        let c = T::lit(self.clamp);
        let log_var = tape.clamp(lv, -c, c);
        Ok(GaussianVars { mu, log_var, attention })
    }

    /// Self-attention form: queries, keys and values all from `fv`.
    pub fn forward_self<T: Scalar>(&self, tape: &mut Tape<'_, T>, fv: &Tokens) -> Result<GaussianVars> {
        self.forward(tape, fv, fv)
    }
}

/// `mu + eps·exp(log_var/2)` with `eps` drawn from `rng`; `None` returns `mu`
/// itself.
pub fn reparameterize<T: Scalar, R: Rng + ?Sized>(tape: &mut Tape<'_, T>, g: GaussianVars, rng: Option<&mut R>) -> Var {
    match rng {
        None => g.mu,
        Some(rng) => {
            let (r, c) = tape.shape(g.mu);
            let eps = Matrix::from_fn(r, c, |_, _| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z)
            });
            tape.reparam(g.mu, g.log_var, eps)
        }
    }
}

/// Mean over all elements of `−½(1 + log σ² − μ² − σ²)`.
pub fn kl_regularizer<T: Scalar>(g: &GaussianTokens<T>) -> Result<T> {
    if g.mu.shape() != g.log_var.shape() {
        return Err(Error::Numeric(format!("mu {:?} and log_var {:?} differ in shape", g.mu.shape(), g.log_var.shape())));
    }
    if !g.mu.is_finite() || !g.log_var.is_finite() {
        return Err(Error::Numeric("non-finite Gaussian token parameters".into()));
    }
    Ok(kl_mean(g.mu.as_slice(), g.log_var.as_slice()))
}

/// Fuses the RGB sample (queries) with the cross-modal sample (keys/values):
/// cross-attention, residual, perceptron with residual, layer norm.
#[derive(Clone, Copy, Debug)]
pub struct Fusion {
    pub cross: CrossAttention,
    pub mlp: Mlp,
    pub norm: LayerNorm,
}

impl Fusion {
    pub fn new<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        dim: usize,
        heads: usize,
        slots: usize,
    ) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            cross: CrossAttention::new(&mut s, "cross", dim, heads, slots)?,
            mlp: Mlp::new(&mut s, "mlp", dim, 2 * dim, dim),
            norm: LayerNorm::new(&mut s, "norm", dim),
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, sv: &Tokens, sm: &Tokens) -> Result<(Var, Var)> {
        let (a, node) = self.cross.forward(tape, sv, sm)?;
        let a = tape.add(sv.x, a);
        let m = self.mlp.forward(tape, a);
        let b = tape.add(a, m);
        Ok((self.norm.forward(tape, b), node))
    }
}
