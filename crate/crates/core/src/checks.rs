//! Self-contained property checks against independent oracles: forward
//! moments, score, reverse recovery, gradients, closed-form values and
//! structural invariants. Used by `tpg check` and the acceptance suite.

use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::denoiser::PriorBundle;
use crate::error::Result;
use crate::metrics::psnr;
use crate::model::{ModelConfig, TpgModel};
use crate::nn::attention;
use crate::params::{ParamStore, Session};
use crate::rng::{self, SeededRng};
use crate::sde::{sample_restore, NoisePredictor, Sampler, SdeSchedule, ThetaRule};
use crate::semantic::distill_loss;
use crate::degradation::deg_class_loss;
use crate::structural::{compute_dog, sta_aggregate, StructuralConfig, StructuralPrior};
use crate::synth::{make_sample, render_scene, CorpusConfig};
use crate::tensor::{grad_check, GradCheckReport, Tape, Tensor, Var};
use crate::DegradationKind;

/// One named outcome for reporting.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Check {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

/// Closed-form `(θ̄_t, m_t, v_t)` of a scalar path, accumulated from the
/// per-step rates rather than taken from the schedule's own tables.
fn oracle_moments(s: &SdeSchedule, x0: f64, mu: f64, t: usize) -> (f64, f64) {
    let theta_bar: f64 = (1..=t).map(|i| s.theta(i) * s.dt()).sum();
    let lambda = s.lambda();
    let mean = mu + (x0 - mu) * (-theta_bar).exp();
    let var = lambda * lambda * (1.0 - (-2.0 * theta_bar).exp());
    (mean, var)
}

#[derive(Clone, Copy, Debug)]
pub struct MomentRow {
    pub t: usize,
    /// Empirical-minus-closed-form mean, in standard errors.
    pub mean_z: f64,
    /// Same for the variance.
    pub var_z: f64,
}

/// Forward samples of a scalar path at `T/4`, `T/2` and `T`.
pub fn sde_moments(s: &SdeSchedule, paths: usize, seed: u64) -> Result<Vec<MomentRow>> {
    let (x0, mu) = (0.8, 0.3);
    let x0_t = Tensor::full(&[paths], x0);
    let mu_t = Tensor::full(&[paths], mu);
    let n = paths as f64;
    let steps = s.steps();
    [steps / 4, steps / 2, steps]
        .into_iter()
        .map(|t| {
            let (xt, _) = s.sample_forward(&x0_t, &mu_t, t, &mut rng::stream(seed, t as u64))?;
            let mean = xt.mean();
            let var = xt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let (m, v) = oracle_moments(s, x0, mu, t);
            Ok(MomentRow {
                t,
                mean_z: (mean - m) / (v / n).sqrt(),
                var_z: (var - v) / (v * (2.0 / (n - 1.0)).sqrt()),
            })
        })
        .collect()
}

/// Largest relative error of the analytic score against central
/// differences of the Gaussian log-density.
pub fn score_fd_error(s: &SdeSchedule, probes: usize, seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let t = r.random_range(1..=s.steps());
        let x0: Vec<f64> = (0..4).map(|_| r.random()).collect();
        let mu: Vec<f64> = (0..4).map(|_| r.random()).collect();
        let (xt, _) = s.sample_forward(&Tensor::from_vec(x0.clone()), &Tensor::from_vec(mu.clone()), t, &mut r)?;
        let score = s.analytic_score(&xt, &Tensor::from_vec(x0.clone()), &Tensor::from_vec(mu.clone()), t)?;
        let log_p = |x: &[f64]| -> f64 {
            x.iter()
                .zip(&x0)
                .zip(&mu)
                .map(|((&x, &a), &m)| {
                    let (mean, var) = oracle_moments(s, a, m, t);
                    -(x - mean).powi(2) / (2.0 * var) - 0.5 * (2.0 * std::f64::consts::PI * var).ln()
                })
                .sum()
        };
        let h = 1e-5;
        for i in 0..4 {
            let mut x = xt.data().to_vec();
            x[i] += h;
            let plus = log_p(&x);
            x[i] -= 2.0 * h;
            let minus = log_p(&x);
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max((score.data()[i] - numeric).abs() / (numeric.abs() + 1e-8));
        }
    }
    Ok(worst)
}

/// Noise predictor that knows the clean image, `ε = (x_t − m_t) / sqrt(v_t)`.
pub struct OraclePredictor<'a> {
    pub schedule: &'a SdeSchedule,
    pub x0: &'a Tensor,
}

impl NoisePredictor for OraclePredictor<'_> {
    fn predict_noise(&self, xt: &Tensor, mu: &Tensor, t: usize) -> Result<Tensor> {
        let m = self.schedule.marginal(self.x0, mu, t)?;
        let sd = m.variance.sqrt();
        xt.zip_map(&m.mean, "oracle", |x, mean| (x - mean) / sd)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RecoveryRow {
    pub steps: usize,
    pub mse: f64,
    pub psnr: f64,
}

/// Deterministic reverse pass with the oracle score on a 16×16 scene with
/// `μ = x0 + N(0, 0.1²)`, at a fixed terminal `θ̄_T` for every step count.
pub fn reverse_recovery(lambda: f64, theta_bar_end: f64, steps: &[usize], seed: u64) -> Result<Vec<RecoveryRow>> {
    let x0 = render_scene(seed, 16, 16)?.image;
    let mu = x0.add(&Tensor::randn(x0.shape(), 0.1, &mut rng::stream(seed, 1)))?;
    steps
        .iter()
        .map(|&n| {
            let s = SdeSchedule::new(n, lambda, ThetaRule::Constant, theta_bar_end)?;
            let oracle = OraclePredictor { schedule: &s, x0: &x0 };
            let x = sample_restore(&s, &mu, &oracle, Sampler::Deterministic, &mut rng::stream(seed, 2))?;
            let mse = x.sub(&x0)?.map(|v| v * v).mean();
            Ok(RecoveryRow {
                steps: n,
                mse,
                psnr: psnr(&x, &x0, 1.0)?,
            })
        })
        .collect()
}

type Primitive = Box<dyn Fn(&Tape, &[Var]) -> Result<Var>>;

/// Reduces an output to a scalar through fixed random weights, so every
/// output element contributes a distinct gradient.
fn weighted(tape: &Tape, out: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(&tape.shape(out), 1.0, &mut rng::stream(seed, 77));
    Ok(tape.sum(tape.mul(out, tape.constant(w))?))
}

/// Finite-difference audit of every differentiable tape operation and the
/// loss functions built on them.
pub fn primitive_gradients(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut r: SeededRng = rng::stream(seed, 0);
    let mut randn = |shape: &[usize]| Tensor::randn(shape, 1.0, &mut r);
    // Bounded away from zero so |x| stays differentiable under perturbation.
    let away = |t: Tensor| t.map(|v| if v.abs() < 0.1 { v.signum() * 0.1 + v } else { v });
    let cases: Vec<(&str, Vec<Tensor>, Primitive)> = vec![
        ("add", vec![randn(&[3, 4]), randn(&[4])], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![randn(&[2, 3, 4]), randn(&[3, 1])], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![randn(&[3, 4]), randn(&[3, 4])], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![randn(&[5])], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        ("add_scalar", vec![randn(&[5])], Box::new(|t, v| Ok(t.add_scalar(v[0], 0.3)))),
        ("matmul", vec![randn(&[3, 5]), randn(&[5, 2])], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("transpose", vec![randn(&[3, 5])], Box::new(|t, v| t.transpose(v[0]))),
        ("reshape", vec![randn(&[2, 6])], Box::new(|t, v| t.reshape(v[0], &[3, 4]))),
        ("flatten", vec![randn(&[2, 3, 2])], Box::new(|t, v| t.flatten(v[0]))),
        ("softmax", vec![randn(&[3, 5])], Box::new(|t, v| Ok(t.softmax(v[0])))),
        ("log_softmax", vec![randn(&[3, 5])], Box::new(|t, v| Ok(t.log_softmax(v[0])))),
        (
            "conv2d",
            vec![randn(&[2, 6, 5]), randn(&[3, 2, 3, 3]), randn(&[3])],
            Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1)),
        ),
        (
            "conv2d_strided",
            vec![randn(&[2, 7, 6]), randn(&[2, 2, 3, 3])],
            Box::new(|t, v| t.conv2d(v[0], v[1], None, 2, 1)),
        ),
        (
            "group_norm",
            vec![randn(&[4, 3, 3]), randn(&[4]), randn(&[4])],
            Box::new(|t, v| t.group_norm(v[0], v[1], v[2], 2)),
        ),
        ("silu", vec![randn(&[3, 4])], Box::new(|t, v| Ok(t.silu(v[0])))),
        ("abs", vec![away(randn(&[3, 4]))], Box::new(|t, v| Ok(t.abs(v[0])))),
        ("upsample2x", vec![randn(&[2, 3, 2])], Box::new(|t, v| t.upsample2x(v[0]))),
        ("sum", vec![randn(&[3, 4])], Box::new(|t, v| Ok(t.sum(v[0])))),
        ("mean", vec![randn(&[3, 4])], Box::new(|t, v| Ok(t.mean(v[0])))),
        ("sum_last", vec![randn(&[3, 4])], Box::new(|t, v| Ok(t.sum_last(v[0])))),
        ("mean_last", vec![randn(&[3, 4])], Box::new(|t, v| Ok(t.mean_last(v[0])))),
        ("mean_first", vec![randn(&[3, 4])], Box::new(|t, v| t.mean_first(v[0]))),
        ("mean_spatial", vec![randn(&[2, 3, 4])], Box::new(|t, v| t.mean_spatial(v[0]))),
        ("concat", vec![randn(&[2, 3]), randn(&[1, 3])], Box::new(|t, v| t.concat(&[v[0], v[1]]))),
        ("narrow", vec![randn(&[5, 3])], Box::new(|t, v| t.narrow(v[0], 1, 3))),
        ("normalize_rows", vec![randn(&[3, 4])], Box::new(|t, v| t.normalize_rows(v[0]))),
        (
            "attention",
            vec![randn(&[2, 4]), randn(&[3, 4]), randn(&[3, 5])],
            Box::new(|t, v| attention(t, v[0], v[1], v[2])),
        ),
        ("distill_loss", vec![randn(&[3, 4]), randn(&[3, 4])], Box::new(|t, v| distill_loss(t, v[0], v[1]))),
        (
            "deg_class_loss",
            vec![randn(&[4, 5])],
            Box::new(|t, v| deg_class_loss(t, v[0], &[0, 3, 1, 4], 0.05)),
        ),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, params, f))| {
            let report = grad_check(|t, v| weighted(t, f(t, v)?, i as u64), &params, 1e-5)?;
            Ok((name.to_string(), report))
        })
        .collect()
}

/// Smallest central-difference gradient a denoiser probe must carry to
/// count; below it the difference is dominated by rounding.
pub const DENOISER_PROBE_FLOOR: f64 = 1e-5;

/// Finite-difference audit of the conditioned noise prediction (structural
/// prior extracted on the tape, frozen priors as constants). Random stage-2
/// parameter elements are drawn until `probes` of them carry a gradient
/// above [`DENOISER_PROBE_FLOOR`]; the report covers those. Zero-initialised
/// layers are perturbed first so every conditioning path carries gradient.
pub fn denoiser_gradient(cfg: &ModelConfig, seed: u64, probes: usize) -> Result<GradCheckReport> {
    let mut model = TpgModel::new(cfg, seed)?;
    let mut r = rng::stream(seed, 11);
    let ids: Vec<_> = model.store.ids().collect();
    for &id in &ids {
        if model.store.get(id).data().iter().all(|&v| v == 0.0) {
            let t = Tensor::randn(model.store.get(id).shape(), 0.2, &mut r);
            model.store.set(id, t)?;
        }
    }
    let schedule = SdeSchedule::new(100, 50.0 / 255.0, ThetaRule::Constant, 9.0)?;
    let corpus = CorpusConfig {
        height: 16,
        width: 16,
        ..Default::default()
    };
    let sample = make_sample(seed, DegradationKind::Haze, &corpus)?;
    let frozen = model.frozen_priors(&sample.x_lq)?;
    let t = 63;
    let (xt, _) = schedule.sample_forward(&sample.x_gt, &sample.x_lq, t, &mut r)?;
    let weights = Tensor::randn(xt.shape(), 1.0, &mut r);

    let params: Vec<Tensor> = model.store.iter().map(|(_, p)| p.value.clone()).collect();
    let candidates: Vec<usize> = model
        .store
        .iter()
        .enumerate()
        .filter(|(_, (_, p))| !["teacher.", "student.", "deg."].iter().any(|pre| p.name.starts_with(pre)))
        .map(|(i, _)| i)
        .collect();
    let mut drawn: Vec<(usize, usize)> = ["unet.mid.xattn.wq", "unet.enc0.film.fc1.w", "tmod.prompts"]
        .iter()
        .filter_map(|n| model.store.id(n))
        .map(|id| (id.index(), 0))
        .collect();
    while drawn.len() < 4 * probes {
        let p = candidates[r.random_range(0..candidates.len())];
        drawn.push((p, r.random_range(0..params[p].numel())));
    }
    let model = &model;
    let full = crate::tensor::grad_check_probes(
        |tape, vars| {
            let s = Session::prebound(tape, &model.store, vars);
            let mut priors = frozen.bind(tape);
            if let Some(sp) = &model.structural {
                priors.structural = Some(sp.extract(&s, &sample.cues)?);
            }
            let (x, mu) = (tape.constant(xt.clone()), tape.constant(sample.x_lq.clone()));
            let raw = model.unet.forward(&s, x, mu, t as f64, &priors)?;
            let eps = model.noise_from_output(tape, &schedule, raw, x, mu, t)?;
            Ok(tape.sum(tape.mul(eps, tape.constant(weights.clone()))?))
        },
        &params,
        1e-4,
        &drawn,
    )?;
    let entries: Vec<_> = full
        .entries
        .into_iter()
        .filter(|e| e.3.abs() >= DENOISER_PROBE_FLOOR)
        .take(probes)
        .collect();
    if entries.len() < probes {
        return Err(crate::Error::InvalidArgument(format!(
            "only {} of {} drawn probes carry gradient above {DENOISER_PROBE_FLOOR:e}",
            entries.len(),
            drawn.len()
        )));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        probes,
        entries: Vec::new(),
    };
    for &(p, e, a, n) in &entries {
        let rel = (a - n).abs() / (n.abs() + 1e-8);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = (p, e);
        }
    }
    report.entries = entries;
    Ok(report)
}

/// `distill_loss` on a single pair of embeddings.
pub fn distill_value(z_s: &[f64], z_t: &[f64]) -> Result<f64> {
    let tape = Tape::new();
    let d = z_s.len();
    let a = tape.constant(Tensor::new(&[1, d], z_s.to_vec())?);
    let b = tape.constant(Tensor::new(&[1, z_t.len()], z_t.to_vec())?);
    Ok(tape.scalar(distill_loss(&tape, a, b)?))
}

/// Label-smoothed cross-entropy of a single row of logits.
pub fn smoothed_ce_value(logits: &[f64], label: usize, eps: f64) -> Result<f64> {
    let tape = Tape::new();
    let z = tape.constant(Tensor::new(&[1, logits.len()], logits.to_vec())?);
    Ok(tape.scalar(deg_class_loss(&tape, z, &[label], eps)?))
}

/// Largest output change of the structural aggregator when its input
/// token rows are rotated.
pub fn sta_permutation_gap(seed: u64) -> Result<f64> {
    let cfg = StructuralConfig {
        dim: 8,
        latents: 4,
        ..Default::default()
    };
    let mut store = ParamStore::new();
    let prior = StructuralPrior::new(&mut store, "struct", &cfg, &mut rng::stream(seed, 0));
    let tokens = Tensor::randn(&[12, 8], 1.0, &mut rng::stream(seed, 1));
    let run = |x: &Tensor| -> Result<Tensor> {
        let tape = Tape::new();
        let s = Session::new(&tape, &store, false);
        Ok(tape.value(sta_aggregate(&s, &prior.sta, &[tape.constant(x.clone())])?))
    };
    let base = run(&tokens)?;
    let mut worst: f64 = 0.0;
    for rot in 1..12 {
        let mut rows = tokens.data().to_vec();
        rows.rotate_left(8 * rot);
        worst = worst.max(run(&Tensor::new(&[12, 8], rows)?)?.max_abs_diff(&base));
    }
    Ok(worst)
}

/// Whether a freshly built model predicts bit-identical noise with and
/// without its priors, at the given configuration.
pub fn prior_noop_at_init(cfg: &ModelConfig, seed: u64) -> Result<bool> {
    let model = TpgModel::new(cfg, seed)?;
    let schedule = SdeSchedule::new(100, 50.0 / 255.0, ThetaRule::Constant, 9.0)?;
    let corpus = CorpusConfig {
        height: 16,
        width: 16,
        ..Default::default()
    };
    let sample = make_sample(seed, DegradationKind::Rain, &corpus)?;
    let priors = model.prior_bundle(&sample.x_lq, &sample.cues)?;
    let (xt, _) = schedule.sample_forward(&sample.x_gt, &sample.x_lq, 37, &mut rng::stream(seed, 3))?;
    let on = model.predict_noise(&schedule, &xt, &sample.x_lq, 37, &priors)?;
    let off = model.predict_noise(&schedule, &xt, &sample.x_lq, 37, &PriorBundle::default())?;
    Ok(on.data().iter().zip(off.data()).all(|(a, b)| a.to_bits() == b.to_bits()))
}

/// Largest DoG response to a constant image, or change in response when a
/// random image is shifted by a constant.
pub fn dog_zero_sum(seed: u64) -> Result<f64> {
    let flat = compute_dog(&Tensor::full(&[1, 20, 20], 0.37), 1.0, 2.0)?;
    let img = Tensor::rand_uniform(&[1, 20, 20], 0.0, 1.0, &mut rng::stream(seed, 0));
    let a = compute_dog(&img, 1.0, 2.0)?;
    let b = compute_dog(&img.map(|v| v + 0.25), 1.0, 2.0)?;
    let flat_max = flat.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(flat_max.max(a.max_abs_diff(&b)))
}

/// Saves a fresh model, reloads it into another and compares bits.
pub fn checkpoint_roundtrip(cfg: &ModelConfig, seed: u64, dir: &std::path::Path) -> Result<bool> {
    let a = TpgModel::new(cfg, seed)?;
    let path = dir.join("roundtrip.ckpt");
    let ck = Checkpoint::from_store(&a.store, 2, 0, "");
    ck.save(&path)?;
    let mut b = TpgModel::new(cfg, seed.wrapping_add(1))?;
    Checkpoint::load(&path)?.restore_into(&mut b.store, |_| true)?;
    let bits = |m: &TpgModel| -> Vec<u64> { m.store.iter().flat_map(|(_, p)| p.value.data().iter().map(|v| v.to_bits())).collect() };
    Ok(bits(&a) == bits(&b) && Checkpoint::load(&path)? == ck)
}

/// Fast subset of the acceptance suite with its tolerances.
pub fn quick_suite(scratch: &std::path::Path) -> Result<Vec<Check>> {
    let schedule = SdeSchedule::new(100, 50.0 / 255.0, ThetaRule::Constant, 9.0)?;
    let mut out = Vec::new();

    let rows = sde_moments(&schedule, 100_000, 0)?;
    let worst = rows.iter().map(|r| r.mean_z.abs().max(r.var_z.abs())).fold(0.0, f64::max);
    out.push(Check::new("sde moments", worst < 3.0, format!("max |z| {worst:.2} (limit 3)")));

    let err = score_fd_error(&schedule, 100, 0)?;
    out.push(Check::new("score vs finite differences", err < 1e-5, format!("max rel err {err:.2e}")));

    let rec = reverse_recovery(50.0 / 255.0, 9.0, &[25, 50, 100, 400], 0)?;
    let decreasing = rec.windows(2).all(|w| w[1].mse < w[0].mse);
    let gain = rec[3].psnr - rec[0].psnr;
    out.push(Check::new(
        "reverse recovery",
        decreasing && gain >= 3.0,
        format!("PSNR {:.1} -> {:.1} dB over T = 25..400", rec[0].psnr, rec[3].psnr),
    ));

    let grads = primitive_gradients(0)?;
    let (name, worst) = grads
        .iter()
        .map(|(n, r)| (n.as_str(), r.max_rel_error))
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    out.push(Check::new(
        "primitive gradients",
        worst < 1e-6,
        format!("{} ops, worst {worst:.2e} ({name})", grads.len()),
    ));

    let distill = [
        distill_value(&[1.0, 2.0], &[1.0, 2.0])?,
        distill_value(&[1.0, 0.0], &[0.0, 1.0])?,
        distill_value(&[1.0, 0.0], &[-1.0, 0.0])?,
        distill_value(&[1.0, 1.0], &[1.0, 0.0])?,
    ];
    let want = [0.0, 1.0, 2.0, 1.0 - 0.5f64.sqrt()];
    let ce = smoothed_ce_value(&[1.0, 0.0], 0, 0.01)?;
    let ok = distill.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-4) && (ce - 0.31826).abs() < 1e-4;
    out.push(Check::new("closed-form losses", ok, format!("distill {distill:.5?}, ce {ce:.5}")));

    let mut cfg = ModelConfig::default();
    cfg.unet.base_channels = 8;
    cfg.unet.max_channels = 32;
    cfg.unet.time_dim = 32;
    cfg.unet.attn_dim = 16;
    let g = denoiser_gradient(&cfg, 0, 32)?;
    out.push(Check::new(
        "denoiser gradient",
        g.max_rel_error < 1e-4,
        format!("{} probes, worst {:.2e}", g.probes, g.max_rel_error),
    ));

    let gap = sta_permutation_gap(0)?;
    out.push(Check::new("sta permutation invariance", gap < 1e-10, format!("max diff {gap:.1e}")));
    let noop = prior_noop_at_init(&cfg, 0)?;
    out.push(Check::new("prior no-op at init", noop, "bit-exact comparison".into()));
    let dog = dog_zero_sum(0)?;
    out.push(Check::new("dog zero sum", dog < 1e-10, format!("max residual {dog:.1e}")));
    let rt = checkpoint_roundtrip(&cfg, 0, scratch)?;
    out.push(Check::new("checkpoint round trip", rt, "bit-exact comparison".into()));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_moments_match_schedule() {
        let s = SdeSchedule::new(40, 0.3, ThetaRule::Cosine, 5.0).unwrap();
        for t in [1, 7, 40] {
            let (m, v) = oracle_moments(&s, 0.9, 0.2, t);
            let got = s.marginal(&Tensor::full(&[1], 0.9), &Tensor::full(&[1], 0.2), t).unwrap();
            assert!((got.mean.data()[0] - m).abs() < 1e-12);
            assert!((got.variance - v).abs() < 1e-12);
        }
    }

    #[test]
    fn every_primitive_passes() {
        for (name, r) in primitive_gradients(1).unwrap() {
            assert!(r.max_rel_error < 1e-6, "{name}: {r:?}");
        }
    }

    #[test]
    fn closed_form_values() {
        assert!((distill_value(&[3.0, 0.0], &[0.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((smoothed_ce_value(&[1.0, 0.0], 0, 0.01).unwrap() - 0.3182616).abs() < 1e-6);
    }
}
