//! Structural prior from three aligned cue maps (depth, segmentation, DoG).
//!
//! Each cue goes through its own 1×1 adapter, gets a learnable modality
//! embedding added, and runs through a shared strided encoder. The resulting
//! token sets are concatenated and compressed by a small set of learnable
//! latents (cross-attention, linear, self-attention). UNet features consume
//! the latents through FiLM.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AttentionProj, Conv2d, Init, Linear};
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Depth,
    Seg,
    Dog,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Depth, Modality::Seg, Modality::Dog];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Depth => "depth",
            Modality::Seg => "seg",
            Modality::Dog => "dog",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "depth" | "dep" => Ok(Modality::Depth),
            "seg" | "segmentation" => Ok(Modality::Seg),
            "dog" => Ok(Modality::Dog),
            _ => Err(Error::Unknown {
                what: "modality",
                name: s.to_string(),
            }),
        }
    }
}

/// Cue maps aligned with the degraded input, each `[1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuralCues {
    pub depth: Tensor,
    pub seg: Tensor,
    pub dog: Tensor,
}

impl StructuralCues {
    pub fn get(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Depth => &self.depth,
            Modality::Seg => &self.seg,
            Modality::Dog => &self.dog,
        }
    }
}

fn gaussian_1d(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Mirror an out-of-range index back into `0..n` without repeating the edge.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Separable Gaussian blur of a `[H, W]` plane with reflect padding.
fn blur_plane(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_1d(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * plane[y * w + reflect(x as isize + j as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[reflect(y as isize + j as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// The 2-D DoG kernel `G(σ1) − G(σ2)`, sized for the wider Gaussian.
pub fn dog_kernel(sigma1: f64, sigma2: f64) -> Result<Tensor> {
    check_sigmas(sigma1, sigma2)?;
    let (g1, g2) = (gaussian_1d(sigma1), gaussian_1d(sigma2));
    let n = g2.len();
    let off = (n - g1.len()) / 2;
    let mut data = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let inner = if (off..off + g1.len()).contains(&y) && (off..off + g1.len()).contains(&x) {
                g1[y - off] * g1[x - off]
            } else {
                0.0
            };
            data[y * n + x] = inner - g2[y] * g2[x];
        }
    }
    Tensor::new(&[n, n], data)
}

fn check_sigmas(sigma1: f64, sigma2: f64) -> Result<()> {
    if !(sigma1 > 0.0 && sigma2 > sigma1 && sigma2.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "DoG needs 0 < sigma1 < sigma2, got ({sigma1}, {sigma2})"
        )));
    }
    Ok(())
}

/// `G(σ1) * x − G(σ2) * x` on a single-channel `[1, H, W]` image.
pub fn compute_dog(x: &Tensor, sigma1: f64, sigma2: f64) -> Result<Tensor> {
    check_sigmas(sigma1, sigma2)?;
    let &[1, h, w] = x.shape() else {
        return Err(Error::InvalidShape {
            op: "compute_dog",
            msg: format!("want a [1, H, W] image, got {:?}", x.shape()),
        });
    };
    let a = blur_plane(x.data(), h, w, sigma1);
    let b = blur_plane(x.data(), h, w, sigma2);
    Tensor::new(&[1, h, w], a.iter().zip(&b).map(|(p, q)| p - q).collect())
}

/// ITU-R BT.601 luma of a 3-channel image; single-channel input passes
/// through.
pub fn grayscale(x: &Tensor) -> Result<Tensor> {
    match x.shape() {
        &[1, _, _] => Ok(x.clone()),
        &[3, h, w] => {
            let n = h * w;
            let d = x.data();
            let data = (0..n)
                .map(|i| 0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i])
                .collect();
            Tensor::new(&[1, h, w], data)
        }
        s => Err(Error::InvalidShape {
            op: "grayscale",
            msg: format!("want 1 or 3 channels, got {s:?}"),
        }),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StructuralConfig {
    /// Channels after the per-modality adapter.
    pub adapter_channels: usize,
    /// Hidden channels of the shared encoder.
    pub encoder_channels: usize,
    /// Token width `D`.
    pub dim: usize,
    /// Latent token count `N`.
    pub latents: usize,
    pub heads: usize,
    pub dog_sigmas: (f64, f64),
}

impl Default for StructuralConfig {
    fn default() -> Self {
        StructuralConfig {
            adapter_channels: 8,
            encoder_channels: 16,
            dim: 64,
            latents: 16,
            heads: 1,
            dog_sigmas: (1.0, 2.0),
        }
    }
}

/// Per-modality adapters `φ_m`, embeddings `e_m` and the shared encoder `E`.
#[derive(Clone, Debug)]
pub struct StructuralEncoder {
    pub adapters: [Conv2d; 3],
    pub embeddings: [ParamId; 3],
    pub convs: [Conv2d; 3],
    pub dim: usize,
}

/// Token count produced per modality on an `h × w` input.
pub fn tokens_per_modality(h: usize, w: usize) -> usize {
    let down = |n: usize| (n + 2 - 3) / 2 + 1;
    down(down(down(h))) * down(down(down(w)))
}

impl StructuralEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &StructuralConfig, rng: &mut R) -> Self {
        let a = cfg.adapter_channels;
        let adapters = Modality::ALL.map(|m| Conv2d::new(store, &format!("{name}.phi.{m}"), 1, a, 1, 1, 0, rng));
        // Distinct random embeddings so modalities are separable from step 0.
        let embeddings = Modality::ALL.map(|m| {
            let e = Tensor::randn(&[a, 1, 1], 1.0 / (a as f64).sqrt(), rng);
            store.add(format!("{name}.embed.{m}"), e, true)
        });
        let c = cfg.encoder_channels;
        let convs = [
            Conv2d::down3(store, &format!("{name}.enc0"), a, c, rng),
            Conv2d::down3(store, &format!("{name}.enc1"), c, c, rng),
            Conv2d::down3(store, &format!("{name}.enc2"), c, cfg.dim, rng),
        ];
        StructuralEncoder {
            adapters,
            embeddings,
            convs,
            dim: cfg.dim,
        }
    }

    /// `Flat(E(φ_m(x_m) + e_m))`: `[n_tok, D]` tokens for one cue map.
    pub fn encode_modality(&self, s: &Session, cue: Var, m: Modality) -> Result<Var> {
        let tape = s.tape();
        let i = m.index();
        let adapted = self.adapters[i].forward(s, cue)?;
        let mut h = tape.add(adapted, s.param(self.embeddings[i]))?;
        for (k, conv) in self.convs.iter().enumerate() {
            h = conv.forward(s, h)?;
            if k + 1 < self.convs.len() {
                h = tape.silu(h);
            }
        }
        let shape = tape.shape(h);
        let flat = tape.reshape(h, &[shape[0], shape[1] * shape[2]])?;
        tape.transpose(flat)
    }

    /// `T_M = [T_depth; T_seg; T_dog]`.
    pub fn encode_all(&self, s: &Session, cues: &[Var; 3]) -> Result<Var> {
        let parts = Modality::ALL
            .iter()
            .zip(cues)
            .map(|(&m, &c)| self.encode_modality(s, c, m))
            .collect::<Result<Vec<_>>>()?;
        s.tape().concat(&parts)
    }
}

/// Structural token aggregator: `z = SA(Linear(CA(L, T_M, T_M)))`.
#[derive(Clone, Debug)]
pub struct TokenAggregator {
    pub latents: ParamId,
    pub cross: AttentionProj,
    pub linear: Linear,
    pub self_attn: AttentionProj,
}

impl TokenAggregator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &StructuralConfig, rng: &mut R) -> Self {
        let d = cfg.dim;
        let latents = store.add(
            format!("{name}.latents"),
            Tensor::randn(&[cfg.latents, d], 1.0 / (d as f64).sqrt(), rng),
            true,
        );
        TokenAggregator {
            latents,
            cross: AttentionProj::new(store, &format!("{name}.ca"), d, d, d, d, cfg.heads, Init::Default, rng),
            linear: Linear::new(store, &format!("{name}.proj"), d, d, true, Init::Default, rng),
            self_attn: AttentionProj::new(store, &format!("{name}.sa"), d, d, d, d, cfg.heads, Init::Default, rng),
        }
    }
}

/// Compresses modality token sets into the `[N, D]` structural prior.
pub fn sta_aggregate(s: &Session, sta: &TokenAggregator, tokens: &[Var]) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("structural token set is empty".into()));
    }
    let tape = s.tape();
    let t_m = tape.concat(tokens)?;
    let l = s.param(sta.latents);
    let d = tape.shape(l)[1];
    if tape.shape(t_m)[1] != d {
        return Err(Error::shape("sta_aggregate", &tape.shape(l), &tape.shape(t_m)));
    }
    let l_tilde = sta.cross.forward(s, l, t_m)?;
    let projected = sta.linear.forward(s, l_tilde)?;
    sta.self_attn.forward(s, projected, projected)
}

/// `F ⊙ (1 + γ) + β` with per-channel `γ, β: [C]` broadcast over `H × W`.
pub fn apply_film(tape: &Tape, f: Var, gamma: Var, beta: Var) -> Result<Var> {
    let fs = tape.shape(f);
    let c = fs[0];
    if fs.len() != 3 || tape.shape(gamma) != [c] || tape.shape(beta) != [c] {
        return Err(Error::InvalidShape {
            op: "film",
            msg: format!("features {fs:?}, gamma {:?}, beta {:?}", tape.shape(gamma), tape.shape(beta)),
        });
    }
    let g = tape.reshape(tape.add_scalar(gamma, 1.0), &[c, 1, 1])?;
    let b = tape.reshape(beta, &[c, 1, 1])?;
    tape.add(tape.mul(f, g)?, b)
}

/// Mean-pool `P` and two-layer MLP `F` predicting `[γ, β]` for `C` channels.
/// The last layer starts at zero, so the adapter is the identity at init.
#[derive(Clone, Debug)]
pub struct StructuralAdapter {
    pub hidden: Linear,
    pub out: Linear,
    pub channels: usize,
}

impl StructuralAdapter {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        prior_dim: usize,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        StructuralAdapter {
            hidden: Linear::new(store, &format!("{name}.fc1"), prior_dim, prior_dim, true, Init::Default, rng),
            out: Linear::new(store, &format!("{name}.fc2"), prior_dim, 2 * channels, true, Init::Zero, rng),
            channels,
        }
    }

    /// `[γ, β] = F(P(z))`.
    pub fn modulation(&self, s: &Session, z_struct: Var) -> Result<(Var, Var)> {
        let tape = s.tape();
        let zs = tape.shape(z_struct);
        if zs.len() != 2 || zs[1] != self.hidden.in_dim {
            return Err(Error::InvalidShape {
                op: "structural_film",
                msg: format!("prior {zs:?}, adapter expects width {}", self.hidden.in_dim),
            });
        }
        let pooled = tape.mean_first(z_struct)?;
        let h = tape.silu(self.hidden.forward(s, pooled)?);
        let gb = self.out.forward(s, h)?;
        Ok((tape.narrow(gb, 0, self.channels)?, tape.narrow(gb, self.channels, self.channels)?))
    }
}

pub fn structural_film(s: &Session, adapter: &StructuralAdapter, f: Var, z_struct: Var) -> Result<Var> {
    let c = s.tape().shape(f)[0];
    if c != adapter.channels {
        return Err(Error::InvalidShape {
            op: "structural_film",
            msg: format!("features have {c} channels, adapter predicts {}", adapter.channels),
        });
    }
    let (gamma, beta) = adapter.modulation(s, z_struct)?;
    apply_film(s.tape(), f, gamma, beta)
}

/// Encoder plus aggregator: cue maps to `z_struct`.
#[derive(Clone, Debug)]
pub struct StructuralPrior {
    pub encoder: StructuralEncoder,
    pub sta: TokenAggregator,
}

impl StructuralPrior {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &StructuralConfig, rng: &mut R) -> Self {
        StructuralPrior {
            encoder: StructuralEncoder::new(store, &format!("{name}.enc"), cfg, rng),
            sta: TokenAggregator::new(store, &format!("{name}.sta"), cfg, rng),
        }
    }

    pub fn extract(&self, s: &Session, cues: &StructuralCues) -> Result<Var> {
        let tape = s.tape();
        let tokens = Modality::ALL
            .iter()
            .map(|&m| self.encoder.encode_modality(s, tape.constant(cues.get(m).clone()), m))
            .collect::<Result<Vec<_>>>()?;
        sta_aggregate(s, &self.sta, &tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::grad_check_probes;
    use proptest::prelude::*;

    #[test]
    fn dog_of_constant_is_zero_and_kernel_sums_to_zero() {
        let x = Tensor::full(&[1, 12, 9], 0.37);
        let d = compute_dog(&x, 1.0, 2.0).unwrap();
        assert!(d.data().iter().all(|v| v.abs() < 1e-15));
        let k = dog_kernel(1.0, 2.0).unwrap();
        assert!(k.sum().abs() < 1e-10);
        assert!(compute_dog(&x, 2.0, 1.0).is_err());
        assert!(compute_dog(&x, 0.0, 1.0).is_err());
    }

    /// Direct 2-D reflect-padded correlation with the full DoG kernel.
    fn brute_dog(x: &Tensor, s1: f64, s2: f64) -> Tensor {
        let k = dog_kernel(s1, s2).unwrap();
        let n = k.shape()[0];
        let r = (n / 2) as isize;
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let mut out = Tensor::zeros(&[1, h, w]);
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for ky in 0..n {
                    for kx in 0..n {
                        let sy = reflect(y as isize + ky as isize - r, h);
                        let sx = reflect(xx as isize + kx as isize - r, w);
                        acc += k.at(&[ky, kx]) * x.at(&[0, sy, sx]);
                    }
                }
                out.set(&[0, y, xx], acc);
            }
        }
        out
    }

    #[test]
    fn impulse_response_matches_brute_force() {
        let mut x = Tensor::zeros(&[1, 9, 9]);
        x.set(&[0, 4, 4], 1.0);
        let d = compute_dog(&x, 1.0, 2.0).unwrap();
        assert!(d.max_abs_diff(&brute_dog(&x, 1.0, 2.0)) < 1e-14);
    }

    proptest! {
        #[test]
        fn dog_matches_brute_force(seed in any::<u64>(), h in 3usize..14, w in 3usize..14) {
            let x = Tensor::rand_uniform(&[1, h, w], 0.0, 1.0, &mut rng::stream(seed, 0));
            let d = compute_dog(&x, 1.0, 2.0).unwrap();
            prop_assert!(d.max_abs_diff(&brute_dog(&x, 1.0, 2.0)) < 1e-13);
        }

        // Content two kernel radii from the border never meets the reflected
        // padding, so the response is a plain zero-sum correlation.
        #[test]
        fn dog_mean_vanishes_for_interior_content(seed in any::<u64>(), h in 1usize..6, w in 1usize..6) {
            let pad = 12;
            let mut r = rng::stream(seed, 0);
            let (hh, ww) = (h + 2 * pad, w + 2 * pad);
            let mut x = Tensor::zeros(&[1, hh, ww]);
            for y in 0..h {
                for xx in 0..w {
                    x.set(&[0, y + pad, xx + pad], rand::Rng::random::<f64>(&mut r));
                }
            }
            let d = compute_dog(&x, 1.0, 2.0).unwrap();
            prop_assert!(d.mean().abs() < 1e-8);
        }
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect(-5, 1), 0);
    }

    #[test]
    fn modality_tags_parse() {
        for m in Modality::ALL {
            assert_eq!(m.tag().parse::<Modality>().unwrap(), m);
        }
        assert!(matches!("edges".parse::<Modality>(), Err(Error::Unknown { .. })));
    }

    fn setup(seed: u64) -> (ParamStore, StructuralPrior, StructuralConfig) {
        let cfg = StructuralConfig {
            dim: 8,
            latents: 3,
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let prior = StructuralPrior::new(&mut store, "struct", &cfg, &mut rng::stream(seed, 0));
        (store, prior, cfg)
    }

    #[test]
    fn token_count_and_modality_separation() {
        let (store, prior, _) = setup(1);
        let cue = Tensor::rand_uniform(&[1, 16, 24], 0.0, 1.0, &mut rng::stream(2, 0));
        let tape = Tape::new();
        let s = Session::new(&tape, &store, false);
        let c = tape.constant(cue);
        let a = prior.encoder.encode_modality(&s, c, Modality::Depth).unwrap();
        let b = prior.encoder.encode_modality(&s, c, Modality::Seg).unwrap();
        assert_eq!(tape.shape(a), vec![tokens_per_modality(16, 24), 8]);
        assert_eq!(tokens_per_modality(16, 24), 2 * 3);
        assert_eq!(tokens_per_modality(24, 24), 9);
        // Distinct adapters and embeddings: equal cues give different tokens.
        assert!(tape.value(a).max_abs_diff(&tape.value(b)) > 1e-6);
        let again = prior.encoder.encode_modality(&s, c, Modality::Depth).unwrap();
        assert_eq!(tape.value(a), tape.value(again));
    }

    #[test]
    fn sta_rejects_empty_and_collapses_identical_rows() {
        let (store, prior, _) = setup(3);
        let tape = Tape::new();
        let s = Session::new(&tape, &store, false);
        assert!(sta_aggregate(&s, &prior.sta, &[]).is_err());
        let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
        let same = Tensor::new(&[5, 8], row.repeat(5)).unwrap();
        let z = tape.value(sta_aggregate(&s, &prior.sta, &[tape.constant(same)]).unwrap());
        let first = &z.data()[..8];
        for r in z.data().chunks(8) {
            for (a, b) in r.iter().zip(first) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn sta_matches_dense_oracle() {
        // N = 2 latents, 3 tokens, width 2, every projection written out.
        let cfg = StructuralConfig {
            dim: 2,
            latents: 2,
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let sta = TokenAggregator::new(&mut store, "sta", &cfg, &mut rng::stream(8, 0));
        let tokens = Tensor::new(&[3, 2], vec![0.5, -1.0, 2.0, 0.25, -0.7, 1.1]).unwrap();
        let tape = Tape::new();
        let s = Session::new(&tape, &store, false);
        let got = tape.value(sta_aggregate(&s, &sta, &[tape.constant(tokens.clone())]).unwrap());

        let attend = |q: &Tensor, kv: &Tensor, p: &AttentionProj| -> Tensor {
            let q = q.matmul(store.get(p.wq)).unwrap();
            let k = kv.matmul(store.get(p.wk)).unwrap();
            let v = kv.matmul(store.get(p.wv)).unwrap();
            let mut out = Tensor::zeros(&[q.shape()[0], 2]);
            for i in 0..q.shape()[0] {
                let scores: Vec<f64> = (0..k.shape()[0])
                    .map(|j| (q.at(&[i, 0]) * k.at(&[j, 0]) + q.at(&[i, 1]) * k.at(&[j, 1])) / 2f64.sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|x| (x - m).exp()).sum();
                for d in 0..2 {
                    let val: f64 = (0..k.shape()[0]).map(|j| (scores[j] - m).exp() / z * v.at(&[j, d])).sum();
                    out.set(&[i, d], val);
                }
            }
            out
        };
        let l_tilde = attend(store.get(sta.latents), &tokens, &sta.cross);
        let mut lin = l_tilde.matmul(store.get(sta.linear.weight)).unwrap();
        let b = store.get(sta.linear.bias.unwrap());
        for i in 0..2 {
            for d in 0..2 {
                lin.set(&[i, d], lin.at(&[i, d]) + b.data()[d]);
            }
        }
        let want = attend(&lin, &lin, &sta.self_attn);
        assert!(got.max_abs_diff(&want) < 1e-14);
    }

    proptest! {
        #[test]
        fn sta_is_permutation_invariant(seed in any::<u64>(), rot in 1usize..9) {
            let (store, prior, _) = setup(seed);
            let t = Tensor::randn(&[9, 8], 1.0, &mut rng::stream(seed, 1));
            let mut rows = t.data().to_vec();
            rows.rotate_left(8 * rot);
            let t2 = Tensor::new(&[9, 8], rows).unwrap();
            let run = |x: &Tensor| {
                let tape = Tape::new();
                let s = Session::new(&tape, &store, false);
                tape.value(sta_aggregate(&s, &prior.sta, &[tape.constant(x.clone())]).unwrap())
            };
            prop_assert!(run(&t).max_abs_diff(&run(&t2)) < 1e-10);
        }
    }

    #[test]
    fn film_arithmetic() {
        let tape = Tape::new();
        let f = tape.constant(Tensor::full(&[2, 3, 3], 2.0));
        let c = |v: f64| tape.constant(Tensor::full(&[2], v));
        assert_eq!(tape.value(apply_film(&tape, f, c(0.0), c(0.0)).unwrap()), Tensor::full(&[2, 3, 3], 2.0));
        assert_eq!(tape.value(apply_film(&tape, f, c(1.0), c(0.0)).unwrap()), Tensor::full(&[2, 3, 3], 4.0));
        assert_eq!(tape.value(apply_film(&tape, f, c(0.5), c(-1.0)).unwrap()), Tensor::full(&[2, 3, 3], 2.0));
        assert!(apply_film(&tape, f, tape.constant(Tensor::zeros(&[3])), c(0.0)).is_err());
    }

    #[test]
    fn zero_init_adapter_is_identity() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(4, 0);
        let ad = StructuralAdapter::new(&mut store, "film", 8, 4, &mut r);
        let f = Tensor::randn(&[4, 5, 5], 1.0, &mut r);
        let z = Tensor::randn(&[3, 8], 1.0, &mut r);
        let tape = Tape::new();
        let s = Session::new(&tape, &store, false);
        let out = structural_film(&s, &ad, tape.constant(f.clone()), tape.constant(z)).unwrap();
        assert_eq!(tape.value(out), f);
        let bad = tape.constant(Tensor::zeros(&[3, 7]));
        assert!(structural_film(&s, &ad, tape.constant(f), bad).is_err());
    }

    #[test]
    fn gradient_reaches_embeddings_and_latents() {
        let (mut store, prior, _) = setup(6);
        let mut r = rng::stream(7, 0);
        let ad = StructuralAdapter::new(&mut store, "film", 8, 2, &mut r);
        // Nonzero output layer so the loss depends on z_struct.
        let w = Tensor::randn(&[8, 4], 0.5, &mut r);
        store.set(ad.out.weight, w).unwrap();
        let cues = StructuralCues {
            depth: Tensor::rand_uniform(&[1, 8, 8], 0.0, 1.0, &mut r),
            seg: Tensor::rand_uniform(&[1, 8, 8], 0.0, 1.0, &mut r),
            dog: Tensor::randn(&[1, 8, 8], 0.1, &mut r),
        };
        let feat = Tensor::randn(&[2, 4, 4], 1.0, &mut r);
        let params: Vec<Tensor> = store.iter().map(|(_, p)| p.value.clone()).collect();
        let watch = [
            store.id("struct.enc.embed.depth").unwrap(),
            store.id("struct.enc.embed.dog").unwrap(),
            prior.sta.latents,
        ];
        let probes: Vec<(usize, usize)> = watch
            .iter()
            .flat_map(|id| (0..3).map(move |e| (id.index(), e)))
            .collect();
        let report = grad_check_probes(
            |tape, vars| {
                let s = Session::prebound(tape, &store, vars);
                let z = prior.extract(&s, &cues)?;
                let out = structural_film(&s, &ad, tape.constant(feat.clone()), z)?;
                Ok(tape.sum(tape.mul(out, out)?))
            },
            &params,
            1e-5,
            &probes,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
