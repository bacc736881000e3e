//! Small layer library over [`Session`]-bound parameters.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    Default,
    Zero,
}

fn init_tensor<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, init: Init, rng: &mut R) -> Tensor {
    match init {
        Init::Zero => Tensor::zeros(shape),
        Init::Default => {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Tensor::rand_uniform(shape, -bound, bound, rng)
        }
    }
}

/// `y = x W + b` with `W: [in, out]`; accepts `[L, in]` or `[in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.w"),
            init_tensor(&[in_dim, out_dim], in_dim, init, rng),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]), true));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        let tape = s.tape();
        let shape = tape.shape(x);
        let vector = shape.len() == 1;
        let x2 = if vector { tape.reshape(x, &[1, shape[0]])? } else { x };
        let mut y = tape.matmul(x2, s.param(self.weight))?;
        if let Some(b) = self.bias {
            y = tape.add(y, s.param(b))?;
        }
        if vector {
            y = tape.reshape(y, &[self.out_dim])?;
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add(
            format!("{name}.w"),
            init_tensor(&[out_ch, in_ch, kernel, kernel], fan_in, Init::Default, rng),
            true,
        );
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[out_ch]), true);
        Conv2d {
            weight,
            bias,
            stride,
            padding,
        }
    }

    /// 3×3, stride 1, same padding.
    pub fn same3<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, i: usize, o: usize, rng: &mut R) -> Self {
        Self::new(store, name, i, o, 3, 1, 1, rng)
    }

    /// 3×3, stride 2: halves the resolution.
    pub fn down3<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, i: usize, o: usize, rng: &mut R) -> Self {
        Self::new(store, name, i, o, 3, 2, 1, rng)
    }

    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        s.tape().conv2d(
            x,
            s.param(self.weight),
            Some(s.param(self.bias)),
            self.stride,
            self.padding,
        )
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    /// Uses `groups` groups, or the largest divisor of `channels` below it.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        let groups = (1..=groups.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1);
        GroupNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            groups,
        }
    }

    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        s.tape()
            .group_norm(x, s.param(self.gamma), s.param(self.beta), self.groups)
    }
}

/// Conv stem, two stride-2 stages and global average pooling, then a linear
/// head: image `[C, H, W]` to a vector `[dim]`.
#[derive(Clone, Debug)]
pub struct ConvTrunk {
    pub stem: Conv2d,
    pub down1: Conv2d,
    pub norm1: GroupNorm,
    pub down2: Conv2d,
    pub norm2: GroupNorm,
    pub head: Linear,
}

impl ConvTrunk {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        width: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        ConvTrunk {
            stem: Conv2d::same3(store, &format!("{name}.stem"), in_ch, width, rng),
            down1: Conv2d::down3(store, &format!("{name}.down1"), width, 2 * width, rng),
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), 2 * width, 4),
            down2: Conv2d::down3(store, &format!("{name}.down2"), 2 * width, 2 * width, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), 2 * width, 4),
            head: Linear::new(store, &format!("{name}.head"), 2 * width, dim, true, Init::Default, rng),
        }
    }

    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        let tape = s.tape();
        let h = tape.silu(self.stem.forward(s, x)?);
        let h = self.down1.forward(s, h)?;
        let h = tape.silu(self.norm1.forward(s, h)?);
        let h = self.down2.forward(s, h)?;
        let h = tape.silu(self.norm2.forward(s, h)?);
        let pooled = tape.mean_spatial(h)?;
        self.head.forward(s, pooled)
    }
}

/// Stacks equal-length vectors into the rows of a `[B, D]` matrix.
pub fn stack_rows(tape: &Tape, rows: &[Var]) -> Result<Var> {
    let reshaped = rows
        .iter()
        .map(|&r| {
            let n = tape.shape(r).iter().product();
            tape.reshape(r, &[1, n])
        })
        .collect::<Result<Vec<_>>>()?;
    tape.concat(&reshaped)
}

/// Single-head scaled dot-product attention: `softmax(Q Kᵀ / sqrt(d)) V`.
pub fn attention(tape: &Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let (qs, ks, vs) = (tape.shape(q), tape.shape(k), tape.shape(v));
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(Error::InvalidShape {
            op: "attention",
            msg: format!("q {qs:?}, k {ks:?}, v {vs:?}"),
        });
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (qs[1] as f64).sqrt());
    let weights = tape.softmax(scores);
    tape.matmul(weights, v)
}

/// Query/key/value projections followed by [`attention`], optionally split
/// into several heads whose outputs are concatenated.
#[derive(Clone, Debug)]
pub struct AttentionProj {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub heads: usize,
}

impl AttentionProj {
    /// `value_init` lets callers zero the value projection so the block
    /// starts as an exact no-op when added residually.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        query_dim: usize,
        context_dim: usize,
        key_dim: usize,
        value_dim: usize,
        heads: usize,
        value_init: Init,
        rng: &mut R,
    ) -> Self {
        assert!(heads >= 1 && key_dim % heads == 0 && value_dim % heads == 0);
        let wq = store.add(
            format!("{name}.wq"),
            init_tensor(&[query_dim, key_dim], query_dim, Init::Default, rng),
            true,
        );
        let wk = store.add(
            format!("{name}.wk"),
            init_tensor(&[context_dim, key_dim], context_dim, Init::Default, rng),
            true,
        );
        let wv = store.add(
            format!("{name}.wv"),
            init_tensor(&[context_dim, value_dim], context_dim, value_init, rng),
            true,
        );
        AttentionProj { wq, wk, wv, heads }
    }

    pub fn forward(&self, s: &Session, queries: Var, context: Var) -> Result<Var> {
        let tape = s.tape();
        let q = tape.matmul(queries, s.param(self.wq))?;
        let k = tape.matmul(context, s.param(self.wk))?;
        let v = tape.matmul(context, s.param(self.wv))?;
        if self.heads == 1 {
            return attention(tape, q, k, v);
        }
        // Heads are column blocks; transpose so they become row blocks.
        let (qt, kt, vt) = (tape.transpose(q)?, tape.transpose(k)?, tape.transpose(v)?);
        let dk = tape.shape(qt)[0] / self.heads;
        let dv = tape.shape(vt)[0] / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.transpose(tape.narrow(qt, h * dk, dk)?)?;
            let kh = tape.transpose(tape.narrow(kt, h * dk, dk)?)?;
            let vh = tape.transpose(tape.narrow(vt, h * dv, dv)?)?;
            outs.push(tape.transpose(attention(tape, qh, kh, vh)?)?);
        }
        tape.transpose(tape.concat(&outs)?)
    }
}

/// Sinusoidal embedding of a scalar step, `[sin(τ ω_i), cos(τ ω_i)]` with
/// geometric frequencies `ω_i = 10000^{-i/half}`.
pub fn sinusoidal_embedding(tau: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        data[i] = (tau * freq).sin();
        data[half + i] = (tau * freq).cos();
    }
    Tensor::from_vec(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn linear_vector_and_matrix_inputs_agree() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(0, 0);
        let lin = Linear::new(&mut store, "l", 3, 2, true, Init::Default, &mut r);
        let tape = Tape::new();
        let s = Session::new(&tape, &store, false);
        let x = Tensor::from_vec(vec![0.1, -0.4, 2.0]);
        let y1 = lin.forward(&s, tape.constant(x.clone())).unwrap();
        let y2 = lin
            .forward(&s, tape.constant(x.reshape(&[1, 3]).unwrap()))
            .unwrap();
        assert_eq!(tape.shape(y1), vec![2]);
        assert_eq!(tape.value(y1).data(), tape.value(y2).data());
    }

    #[test]
    fn single_key_attention_copies_value() {
        let tape = Tape::new();
        let mut r = rng::stream(1, 0);
        let q = tape.constant(Tensor::randn(&[5, 3], 1.0, &mut r));
        let k = tape.constant(Tensor::randn(&[1, 3], 1.0, &mut r));
        let v = tape.constant(Tensor::new(&[1, 2], vec![0.25, -4.0]).unwrap());
        let out = tape.value(attention(&tape, q, k, v).unwrap());
        for row in out.data().chunks(2) {
            assert_eq!(row, &[0.25, -4.0]);
        }
    }

    #[test]
    fn group_count_falls_back_to_divisor() {
        let mut store = ParamStore::new();
        assert_eq!(GroupNorm::new(&mut store, "a", 6, 4).groups, 3);
        assert_eq!(GroupNorm::new(&mut store, "b", 8, 4).groups, 4);
    }

    #[test]
    fn two_heads_match_manual_split() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(2, 0);
        let attn = AttentionProj::new(&mut store, "a", 4, 3, 4, 6, 2, Init::Default, &mut r);
        let tape = Tape::new();
        let s = Session::new(&tape, &store, false);
        let x = Tensor::randn(&[5, 4], 1.0, &mut r);
        let c = Tensor::randn(&[3, 3], 1.0, &mut r);
        let out = tape.value(
            attn.forward(&s, tape.constant(x.clone()), tape.constant(c.clone()))
                .unwrap(),
        );
        let q = x.matmul(store.get(attn.wq)).unwrap();
        let k = c.matmul(store.get(attn.wk)).unwrap();
        let v = c.matmul(store.get(attn.wv)).unwrap();
        for h in 0..2 {
            for i in 0..5 {
                let mut w: Vec<f64> = (0..3)
                    .map(|j| (0..2).map(|d| q.at(&[i, 2 * h + d]) * k.at(&[j, 2 * h + d])).sum::<f64>() / 2f64.sqrt())
                    .collect();
                let m = w.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = w.iter().map(|x| (x - m).exp()).sum();
                w.iter_mut().for_each(|x| *x = (*x - m).exp() / z);
                for d in 0..3 {
                    let want: f64 = (0..3).map(|j| w[j] * v.at(&[j, 3 * h + d])).sum();
                    assert!((out.at(&[i, 3 * h + d]) - want).abs() < 1e-12);
                }
            }
        }
    }
}
