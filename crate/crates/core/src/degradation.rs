//! Degradation prior: a compact encoder trained with a label-smoothed
//! classifier, whose pooled feature steers the diffusion time embedding
//! through a bank of learnable prompts.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, ConvTrunk, Init, Linear};
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegradationKind {
    Noise,
    Rain,
    Haze,
    Lowlight,
    Blur,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 5] = [
        DegradationKind::Noise,
        DegradationKind::Rain,
        DegradationKind::Haze,
        DegradationKind::Lowlight,
        DegradationKind::Blur,
    ];

    pub fn label(self) -> usize {
        self as usize
    }

    pub fn from_label(label: usize) -> Result<Self> {
        Self::ALL.get(label).copied().ok_or(Error::LabelOutOfRange {
            label,
            classes: Self::ALL.len(),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            DegradationKind::Noise => "noise",
            DegradationKind::Rain => "rain",
            DegradationKind::Haze => "haze",
            DegradationKind::Lowlight => "lowlight",
            DegradationKind::Blur => "blur",
        }
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Unknown {
                what: "degradation kind",
                name: s.to_string(),
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationConfig {
    pub width: usize,
    /// Feature size `D_deg`.
    pub dim: usize,
    /// Prompt bank size `K`.
    pub prompts: usize,
    /// Label smoothing `ε`.
    pub smoothing: f64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        DegradationConfig {
            width: 16,
            dim: 64,
            prompts: 8,
            smoothing: 0.01,
        }
    }
}

/// Encoder `E_deg` plus the training-only classifier head.
#[derive(Clone, Debug)]
pub struct DegradationEncoder {
    pub trunk: ConvTrunk,
    pub head: Linear,
}

impl DegradationEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, in_ch: usize, cfg: &DegradationConfig, rng: &mut R) -> Self {
        DegradationEncoder {
            trunk: ConvTrunk::new(store, "deg.enc", in_ch, cfg.width, cfg.dim, rng),
            head: Linear::new(
                store,
                "deg.head",
                cfg.dim,
                DegradationKind::ALL.len(),
                true,
                Init::Default,
                rng,
            ),
        }
    }

    /// `z_deg = F_g = E_deg(x_LQ)`; never touches the head.
    pub fn extract(&self, s: &Session, x_lq: Var) -> Result<Var> {
        self.trunk.forward(s, x_lq)
    }

    /// Class logits `[B, N]` for a batch (training path).
    pub fn logits(&self, s: &Session, xs: &[Var]) -> Result<Var> {
        let feats = xs.iter().map(|&x| self.extract(s, x)).collect::<Result<Vec<_>>>()?;
        let stacked = nn::stack_rows(s.tape(), &feats)?;
        self.head.forward(s, stacked)
    }

    pub fn head_params(&self) -> Vec<ParamId> {
        std::iter::once(self.head.weight).chain(self.head.bias).collect()
    }
}

/// `−(1/B) Σ_i Σ_c q_ic log softmax(z_i)_c` with
/// `q_ic = (1 − ε) [c = y_i] + ε / N`.
pub fn deg_class_loss(tape: &Tape, logits: Var, labels: &[usize], eps: f64) -> Result<Var> {
    let shape = tape.shape(logits);
    let &[b, n] = shape.as_slice() else {
        return Err(Error::InvalidShape {
            op: "deg_class_loss",
            msg: format!("want [B, N] logits, got {shape:?}"),
        });
    };
    if labels.len() != b {
        return Err(Error::shape("deg_class_loss", &shape, &[labels.len()]));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::InvalidArgument(format!("smoothing must be in [0, 1), got {eps}")));
    }
    let mut q = vec![eps / n as f64; b * n];
    for (i, &y) in labels.iter().enumerate() {
        if y >= n {
            return Err(Error::LabelOutOfRange { label: y, classes: n });
        }
        q[i * n + y] += 1.0 - eps;
    }
    let q = tape.constant(Tensor::new(&[b, n], q)?);
    let logp = tape.log_softmax(logits);
    let total = tape.sum(tape.mul(q, logp)?);
    Ok(tape.scale(total, -1.0 / b as f64))
}

/// `t' = ψ(τ) + φ(softmax(W_d z_deg) P)` with a `K`-row prompt bank `P`.
#[derive(Clone, Debug)]
pub struct TimeModulator {
    pub wd: Linear,
    pub prompts: ParamId,
    pub phi_hidden: Linear,
    pub phi_out: Linear,
    pub time_dim: usize,
}

impl TimeModulator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        deg_dim: usize,
        prompts: usize,
        time_dim: usize,
        rng: &mut R,
    ) -> Self {
        TimeModulator {
            wd: Linear::new(store, &format!("{name}.wd"), deg_dim, prompts, true, Init::Default, rng),
            prompts: store.add(
                format!("{name}.prompts"),
                Tensor::randn(&[prompts, time_dim], 1.0, rng),
                true,
            ),
            phi_hidden: Linear::new(store, &format!("{name}.phi1"), time_dim, time_dim, true, Init::Default, rng),
            phi_out: Linear::new(store, &format!("{name}.phi2"), time_dim, time_dim, true, Init::Zero, rng),
            time_dim,
        }
    }

    /// Slot weights `softmax(W_d z_deg)`, shape `[K]`.
    pub fn slot_weights(&self, s: &Session, z_deg: Var) -> Result<Var> {
        Ok(s.tape().softmax(self.wd.forward(s, z_deg)?))
    }

    /// Convex prompt mixture `Σ_k w_k P_k`, shape `[D_t]`.
    pub fn mixed_prompt(&self, s: &Session, z_deg: Var) -> Result<Var> {
        let tape = s.tape();
        let w = self.slot_weights(s, z_deg)?;
        let k = tape.shape(w)[0];
        let row = tape.reshape(w, &[1, k])?;
        let mixed = tape.matmul(row, s.param(self.prompts))?;
        tape.reshape(mixed, &[self.time_dim])
    }
}

/// `ψ(τ)`, plus the degradation-driven offset when `z_deg` is given.
pub fn modulate_time(s: &Session, tau: f64, z_deg: Option<Var>, modulator: &TimeModulator) -> Result<Var> {
    let tape = s.tape();
    let psi = tape.constant(nn::sinusoidal_embedding(tau, modulator.time_dim));
    let Some(z) = z_deg else {
        return Ok(psi);
    };
    let mixed = modulator.mixed_prompt(s, z)?;
    let h = tape.silu(modulator.phi_hidden.forward(s, mixed)?);
    let offset = modulator.phi_out.forward(s, h)?;
    tape.add(psi, offset)
}

/// Fraction of rows whose arg-max logit equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let n = logits.shape()[1];
    let hits = logits
        .data()
        .chunks(n)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            best == y
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn ce(logits: &[f64], n: usize, labels: &[usize], eps: f64) -> Result<f64> {
        let tape = Tape::new();
        let l = tape.constant(Tensor::new(&[labels.len(), n], logits.to_vec())?);
        let loss = deg_class_loss(&tape, l, labels, eps)?;
        Ok(tape.scalar(loss))
    }

    #[test]
    fn smoothed_ce_reference_values() {
        for y in [0, 1] {
            assert!((ce(&[0.0, 0.0], 2, &[y], 0.01).unwrap() - 2f64.ln()).abs() < 1e-15);
        }
        // Independent evaluation: q = [0.995, 0.005], log p = [-ln(1 + e^-1), -1 - ln(1 + e^-1)].
        let lse = (1.0 + (-1.0f64).exp()).ln();
        let want = 0.995 * lse + 0.005 * (1.0 + lse);
        let got = ce(&[1.0, 0.0], 2, &[0], 0.01).unwrap();
        assert!((got - want).abs() < 1e-14);
        assert!((got - 0.31826).abs() < 1e-4);

        let plain = ce(&[0.3, -1.2, 2.0], 3, &[2], 0.0).unwrap();
        let z: f64 = [0.3f64, -1.2, 2.0].iter().map(|v| v.exp()).sum();
        assert!((plain - (z.ln() - 2.0)).abs() < 1e-14);

        assert!(matches!(
            ce(&[0.0, 0.0], 2, &[2], 0.01),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
        assert!(ce(&[0.0, 0.0], 2, &[0], 1.0).is_err());
    }

    #[test]
    fn smoothed_ce_minimised_at_target_distribution() {
        // Sweep p = sigmoid(a) for N = 2; the optimum should sit at p0 = 0.995.
        let eps = 0.01;
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..=20_000 {
            let a = -2.0 + 12.0 * i as f64 / 20_000.0;
            let loss = ce(&[a, 0.0], 2, &[0], eps).unwrap();
            if loss < best.0 {
                best = (loss, a);
            }
        }
        let p0 = 1.0 / (1.0 + (-best.1).exp());
        assert!((p0 - (1.0 - eps + eps / 2.0)).abs() < 1e-4, "p0 = {p0}");
    }

    fn modulator(seed: u64, k: usize) -> (ParamStore, TimeModulator) {
        let mut store = ParamStore::new();
        let m = TimeModulator::new(&mut store, "tmod", 6, k, 16, &mut rng::stream(seed, 0));
        (store, m)
    }

    #[test]
    fn zero_init_modulation_is_identity() {
        let (store, m) = modulator(1, 8);
        let tape = Tape::new();
        let s = Session::new(&tape, &store, false);
        let z = tape.constant(Tensor::randn(&[6], 1.0, &mut rng::stream(2, 0)));
        for tau in [0.0, 1.0, 37.0, 100.0] {
            let t = tape.value(modulate_time(&s, tau, Some(z), &m).unwrap());
            assert_eq!(t, nn::sinusoidal_embedding(tau, 16));
        }
    }

    #[test]
    fn slot_weights_form_a_simplex() {
        let (mut store, m) = modulator(3, 8);
        let tape = Tape::new();
        let s = Session::new(&tape, &store, false);
        let z = tape.constant(Tensor::randn(&[6], 3.0, &mut rng::stream(4, 0)));
        let w = tape.value(m.slot_weights(&s, z).unwrap());
        assert!((w.sum() - 1.0).abs() < 1e-12);
        assert!(w.data().iter().all(|&v| v >= 0.0));

        // W_d z constant across slots: zero weight and equal biases.
        store.set(m.wd.weight, Tensor::zeros(&[6, 8])).unwrap();
        let tape = Tape::new();
        let s = Session::new(&tape, &store, false);
        let w = tape.value(m.slot_weights(&s, tape.constant(Tensor::ones(&[6]))).unwrap());
        assert!(w.data().iter().all(|&v| (v - 0.125).abs() < 1e-15));
    }

    #[test]
    fn two_slot_mixture() {
        let (mut store, m) = modulator(5, 2);
        // Logits [1, -1]: weight column makes W_d z = [z0, -z0].
        let mut w = Tensor::zeros(&[6, 2]);
        w.set(&[0, 0], 1.0);
        w.set(&[0, 1], -1.0);
        store.set(m.wd.weight, w).unwrap();
        let mut z = Tensor::zeros(&[6]);
        z.set(&[0], 1.0);
        let tape = Tape::new();
        let s = Session::new(&tape, &store, false);
        let mixed = tape.value(m.mixed_prompt(&s, tape.constant(z)).unwrap());
        let p = store.get(m.prompts);
        let w0 = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((w0 - 0.8808).abs() < 1e-4);
        for d in 0..16 {
            let want = w0 * p.at(&[0, d]) + (1.0 - w0) * p.at(&[1, d]);
            assert!((mixed.data()[d] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn inference_never_reads_the_head() {
        let mut store = ParamStore::new();
        let enc = DegradationEncoder::new(&mut store, 3, &DegradationConfig::default(), &mut rng::stream(6, 0));
        let tape = Tape::new();
        let s = Session::new(&tape, &store, false);
        let x = Tensor::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut rng::stream(7, 0));
        let z1 = tape.value(enc.extract(&s, tape.constant(x.clone())).unwrap());
        let z2 = tape.value(enc.extract(&s, tape.constant(x)).unwrap());
        assert_eq!(z1, z2);
        assert!(z1.is_finite());
        let touched = s.accessed();
        assert!(enc.head_params().iter().all(|p| !touched.contains(p)));
        let flat = tape.value(enc.extract(&s, tape.constant(Tensor::full(&[3, 16, 16], 0.5))).unwrap());
        assert!(flat.is_finite());
    }

    #[test]
    fn kind_names_roundtrip() {
        for k in DegradationKind::ALL {
            assert_eq!(k.name().parse::<DegradationKind>().unwrap(), k);
            assert_eq!(DegradationKind::from_label(k.label()).unwrap(), k);
        }
        assert!("snow".parse::<DegradationKind>().is_err());
        assert!(DegradationKind::from_label(5).is_err());
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let l = Tensor::new(&[3, 2], vec![1.0, 0.0, 0.0, 2.0, 5.0, 1.0]).unwrap();
        assert!((accuracy(&l, &[0, 1, 1]) - 2.0 / 3.0).abs() < 1e-15);
    }
}
