//! Mean-reverting (Ornstein–Uhlenbeck) diffusion toward a degraded mean `μ`.
//!
//! Forward: `dx = θ_t (μ − x) dt + σ_t dw` with `σ_t² = 2 λ² θ_t`, which
//! keeps the marginals Gaussian:
//!
//! ```text
//! m_t = μ + (x0 − μ) e^{−θ̄_t}        v_t = λ² (1 − e^{−2 θ̄_t})
//! ```
//!
//! Time is discretized uniformly on `[0, 1]` with `Δt = 1/T`, and
//! `θ̄_t = Σ_{z=1..t} θ_z Δt`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ThetaRule {
    /// Constant `θ`.
    #[default]
    Constant,
    /// Raised-cosine ramp: small near `t = 0`, flat near `t = T`.
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdeSchedule {
    steps: usize,
    lambda: f64,
    /// `θ_t` for `t = 1..=T` (index `t − 1`).
    theta: Vec<f64>,
    /// `σ_t` for `t = 1..=T` (index `t − 1`).
    sigma: Vec<f64>,
    /// `θ̄_t` for `t = 0..=T`.
    theta_bar: Vec<f64>,
}

/// Gaussian marginal of the forward process at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Marginal {
    pub mean: Tensor,
    pub variance: f64,
}

impl SdeSchedule {
    /// Builds a schedule whose cumulative rate reaches `theta_bar_end` at
    /// `t = T`.
    pub fn new(steps: usize, lambda: f64, rule: ThetaRule, theta_bar_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
        }
        if !(theta_bar_end > 0.0 && theta_bar_end.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "theta_bar_end must be positive, got {theta_bar_end}"
            )));
        }
        let shape: Vec<f64> = match rule {
            ThetaRule::Constant => vec![1.0; steps],
            ThetaRule::Cosine => (1..=steps)
                .map(|t| {
                    let phase = std::f64::consts::PI * (t as f64 - 0.5) / steps as f64;
                    0.5 * (1.0 - phase.cos())
                })
                .collect(),
        };
        let dt = 1.0 / steps as f64;
        let total: f64 = shape.iter().sum::<f64>() * dt;
        let theta: Vec<f64> = shape.iter().map(|s| s * theta_bar_end / total).collect();
        Self::from_theta(lambda, theta)
    }

    /// A schedule from explicit per-step rates (`θ_1..θ_T`, all positive).
    pub fn from_theta(lambda: f64, theta: Vec<f64>) -> Result<Self> {
        if theta.is_empty() || theta.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return Err(Error::InvalidArgument("theta must be positive and finite".into()));
        }
        let steps = theta.len();
        let dt = 1.0 / steps as f64;
        let sigma = theta.iter().map(|&t| (2.0 * lambda * lambda * t).sqrt()).collect();
        let mut theta_bar = Vec::with_capacity(steps + 1);
        theta_bar.push(0.0);
        let mut acc = 0.0;
        for &t in &theta {
            acc += t * dt;
            theta_bar.push(acc);
        }
        Ok(SdeSchedule {
            steps,
            lambda,
            theta,
            sigma,
            theta_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    /// `θ_t`, `1 ≤ t ≤ T`.
    pub fn theta(&self, t: usize) -> f64 {
        self.theta[t - 1]
    }

    /// `σ_t`, `1 ≤ t ≤ T`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn theta_bar(&self, t: usize) -> f64 {
        self.theta_bar[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::TimeOutOfRange { t, max: self.steps });
        }
        Ok(())
    }

    /// `v_t = λ² (1 − e^{−2 θ̄_t})`.
    pub fn variance(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.lambda * self.lambda * -(-2.0 * self.theta_bar[t]).exp_m1())
    }

    pub fn marginal(&self, x0: &Tensor, mu: &Tensor, t: usize) -> Result<Marginal> {
        self.check_t(t)?;
        let decay = (-self.theta_bar[t]).exp();
        let mean = x0.zip_map(mu, "marginal", |x, m| m + (x - m) * decay)?;
        Ok(Marginal {
            mean,
            variance: self.variance(t)?,
        })
    }

    /// Draws `x_t = m_t + sqrt(v_t) ε` and returns it with the `ε` used.
    /// At `t = 0` this is `(x0, 0)`.
    pub fn sample_forward<R: Rng + ?Sized>(
        &self,
        x0: &Tensor,
        mu: &Tensor,
        t: usize,
        rng: &mut R,
    ) -> Result<(Tensor, Tensor)> {
        let Marginal { mean, variance } = self.marginal(x0, mu, t)?;
        if t == 0 {
            return Ok((x0.clone(), Tensor::zeros(x0.shape())));
        }
        let eps = Tensor::randn(x0.shape(), 1.0, rng);
        let std = variance.sqrt();
        let xt = mean.zip_map(&eps, "sample_forward", |m, e| m + std * e)?;
        Ok((xt, eps))
    }

    /// `∇_x log p_t(x) = −(x_t − m_t) / v_t`; undefined at `t = 0`.
    pub fn analytic_score(&self, xt: &Tensor, x0: &Tensor, mu: &Tensor, t: usize) -> Result<Tensor> {
        self.check_t(t)?;
        if t == 0 {
            return Err(Error::InvalidArgument(
                "score is undefined at t = 0 (zero variance)".into(),
            ));
        }
        let Marginal { mean, variance } = self.marginal(x0, mu, t)?;
        xt.zip_map(&mean, "analytic_score", |x, m| -(x - m) / variance)
    }

    /// Converts a noise prediction into a score, `s = −ε / sqrt(v_t)`.
    pub fn score_from_noise(&self, eps: &Tensor, t: usize) -> Result<Tensor> {
        if t == 0 {
            return Err(Error::InvalidArgument("score is undefined at t = 0".into()));
        }
        let std = self.variance(t)?.sqrt();
        Ok(eps.scale(-1.0 / std))
    }

    /// One Euler–Maruyama step of the reverse-time SDE from `t` to `t − 1`:
    ///
    /// `x ← x − [θ_t (μ − x) − σ_t² s] Δt + σ_t sqrt(Δt) z`
    ///
    /// The noise term is skipped when `stochastic` is false.
    #[allow(clippy::too_many_arguments)]
    pub fn reverse_step<R: Rng + ?Sized>(
        &self,
        xt: &Tensor,
        mu: &Tensor,
        t: usize,
        score: &Tensor,
        rng: &mut R,
        stochastic: bool,
    ) -> Result<Tensor> {
        if t == 0 || t > self.steps {
            return Err(Error::TimeOutOfRange { t, max: self.steps });
        }
        if xt.shape() != mu.shape() || xt.shape() != score.shape() {
            return Err(Error::shape("reverse_step", xt.shape(), score.shape()));
        }
        let (theta, sigma, dt) = (self.theta(t), self.sigma(t), self.dt());
        let sigma2 = sigma * sigma;
        let noise_scale = sigma * dt.sqrt();
        let data = xt
            .data()
            .iter()
            .zip(mu.data())
            .zip(score.data())
            .map(|((&x, &m), &s)| {
                let drift = theta * (m - x) - sigma2 * s;
                let mut next = x - drift * dt;
                if stochastic {
                    next += noise_scale * rng.sample::<f64, _>(StandardNormal);
                }
                next
            })
            .collect();
        Tensor::new(xt.shape(), data)
    }

    /// A draw from the (approximately) stationary terminal state,
    /// `x_T ~ N(μ, v_T)`.
    pub fn terminal_sample<R: Rng + ?Sized>(&self, mu: &Tensor, rng: &mut R) -> Result<Tensor> {
        let std = self.variance(self.steps)?.sqrt();
        let noise = Tensor::randn(mu.shape(), std, rng);
        mu.add(&noise)
    }
}

/// Anything that predicts the forward noise `ε` of `x_t`.
pub trait NoisePredictor {
    fn predict_noise(&self, xt: &Tensor, mu: &Tensor, t: usize) -> Result<Tensor>;
}

/// How [`sample_restore`] integrates the reverse process.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    /// Euler–Maruyama on the reverse SDE; the final `t = 1 → 0` step adds
    /// no noise.
    Sde,
    /// Drift only at every step.
    Deterministic,
}

/// Solves the reverse SDE from `x_T ~ N(μ, v_T)` down to `x̂_0`, using the
/// predictor's noise estimate as `s = −ε̂ / sqrt(v_t)`.
pub fn sample_restore<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    schedule: &SdeSchedule,
    mu: &Tensor,
    predictor: &P,
    sampler: Sampler,
    rng: &mut R,
) -> Result<Tensor> {
    let mut x = schedule.terminal_sample(mu, rng)?;
    for t in (1..=schedule.steps()).rev() {
        let eps = predictor.predict_noise(&x, mu, t)?;
        let score = schedule.score_from_noise(&eps, t)?;
        let stochastic = sampler == Sampler::Sde && t > 1;
        x = schedule.reverse_step(&x, mu, t, &score, rng, stochastic)?;
        if !x.is_finite() {
            return Err(Error::Diverged {
                step: t,
                detail: "reverse trajectory left the finite range".into(),
            });
        }
    }
    Ok(x)
}
