//! Semantic prior: a frozen teacher sees the clean image, a trainable student
//! sees the degraded one, and cosine distillation pulls the two embeddings
//! together. The student embedding is split into a short context sequence
//! that deep UNet layers read through cross-attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, AttentionProj, ConvTrunk, Init, Linear};
use crate::params::{ParamStore, Session};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemanticConfig {
    /// Trunk width (first conv stage).
    pub width: usize,
    /// Embedding size `D_sem`.
    pub dim: usize,
    /// Context token count `M`.
    pub tokens: usize,
    /// The teacher is initialised from this seed, independent of the run seed.
    pub teacher_seed: u64,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        SemanticConfig {
            width: 16,
            dim: 64,
            tokens: 4,
            teacher_seed: 0x5EED_7EAC,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SemanticEncoder {
    pub trunk: ConvTrunk,
    pub prefix: String,
}

impl SemanticEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_ch: usize,
        cfg: &SemanticConfig,
        rng: &mut R,
    ) -> Self {
        SemanticEncoder {
            trunk: ConvTrunk::new(store, prefix, in_ch, cfg.width, cfg.dim, rng),
            prefix: prefix.to_string(),
        }
    }

    /// The frozen teacher under `teacher.*`, always drawn from
    /// `cfg.teacher_seed`.
    pub fn teacher(store: &mut ParamStore, in_ch: usize, cfg: &SemanticConfig) -> Self {
        let mut r = rng::stream(cfg.teacher_seed, rng::streams::TEACHER);
        let enc = Self::new(store, "teacher", in_ch, cfg, &mut r);
        store.set_trainable_prefix("teacher.", false);
        enc
    }

    pub fn student<R: Rng + ?Sized>(store: &mut ParamStore, in_ch: usize, cfg: &SemanticConfig, rng: &mut R) -> Self {
        Self::new(store, "student", in_ch, cfg, rng)
    }

    /// `z = E(x)` for one `[C, H, W]` image.
    pub fn encode(&self, s: &Session, x: Var) -> Result<Var> {
        self.trunk.forward(s, x)
    }

    /// Row-stacked embeddings `[B, D]` of a batch.
    pub fn encode_batch(&self, s: &Session, xs: &[Var]) -> Result<Var> {
        let rows = xs.iter().map(|&x| self.encode(s, x)).collect::<Result<Vec<_>>>()?;
        nn::stack_rows(s.tape(), &rows)
    }
}

/// `(1/B) Σ_i (1 − cos(z_s_i, z_t_i))` for `[B, D]` inputs.
pub fn distill_loss(tape: &Tape, z_s: Var, z_t: Var) -> Result<Var> {
    let (ss, ts) = (tape.shape(z_s), tape.shape(z_t));
    if ss.len() != 2 || ss != ts || ss[0] == 0 {
        return Err(Error::shape("distill_loss", &ss, &ts));
    }
    let cos = tape.sum_last(tape.mul(tape.normalize_rows(z_s)?, tape.normalize_rows(z_t)?)?);
    let mean_cos = tape.mean(cos);
    Ok(tape.add_scalar(tape.scale(mean_cos, -1.0), 1.0))
}

/// Projection of the student embedding into `M` context tokens of width `D`.
#[derive(Clone, Debug)]
pub struct SemanticProjection {
    pub linear: Linear,
    pub tokens: usize,
    pub width: usize,
}

impl SemanticProjection {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        sem_dim: usize,
        tokens: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        SemanticProjection {
            linear: Linear::new(store, name, sem_dim, tokens * width, true, Init::Default, rng),
            tokens,
            width,
        }
    }

    /// `C̄ = reshape(W z + b, [M, D])`.
    pub fn context(&self, s: &Session, z: Var) -> Result<Var> {
        let flat = self.linear.forward(s, z)?;
        s.tape().reshape(flat, &[self.tokens, self.width])
    }
}

/// The student's context tokens for one degraded image.
pub fn extract_semantic(
    s: &Session,
    student: &SemanticEncoder,
    projection: &SemanticProjection,
    x_lq: Var,
) -> Result<Var> {
    let z = student.encode(s, x_lq)?;
    projection.context(s, z)
}

/// `softmax(X̄ W_q (C̄ W_k)ᵀ / sqrt(d)) C̄ W_v`; the caller adds it to `X̄`.
pub fn deep_cross_attention(s: &Session, x_bar: Var, c_bar: Var, proj: &AttentionProj) -> Result<Var> {
    let tape = s.tape();
    let (xs, cs) = (tape.shape(x_bar), tape.shape(c_bar));
    let (qd, cd) = (s.store().get(proj.wq).shape()[0], s.store().get(proj.wk).shape()[0]);
    if xs.len() != 2 || cs.len() != 2 || xs[1] != qd || cs[1] != cd {
        return Err(Error::InvalidShape {
            op: "deep_cross_attention",
            msg: format!("queries {xs:?} (want width {qd}), context {cs:?} (want width {cd})"),
        });
    }
    proj.forward(s, x_bar, c_bar)
}

/// Mean cosine similarity between matching rows of two `[B, D]` matrices.
pub fn mean_cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    let loss = distill_loss(&tape, tape.constant(a.clone()), tape.constant(b.clone()))?;
    Ok(1.0 - tape.scalar(loss))
}
