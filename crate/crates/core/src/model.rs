//! The full restoration model: prior extractors, denoiser and their
//! training steps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::degradation::{deg_class_loss, DegradationConfig, DegradationEncoder};
use crate::denoiser::{l1_loss, OutputKind, PriorBundle, PriorDims, PriorVars, UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::nn::stack_rows;
use crate::optim::AdamW;
use crate::params::{ParamId, ParamStore, Session};
use crate::rng::{self, SeededRng};
use crate::sde::{sample_restore, NoisePredictor, Sampler, SdeSchedule};
use crate::semantic::{distill_loss, SemanticConfig, SemanticEncoder};
use crate::structural::{StructuralConfig, StructuralCues, StructuralPrior};
use crate::tensor::{Tape, Tensor, Var};

/// Architecture of every learned component.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub semantic: SemanticConfig,
    pub structural: StructuralConfig,
    pub degradation: DegradationConfig,
    pub unet: UNetConfig,
}

/// Parameter-name prefixes frozen once stage 1 is done.
pub const STAGE1_PREFIXES: [&str; 2] = ["student.", "deg."];

#[derive(Debug)]
pub struct TpgModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub teacher: SemanticEncoder,
    pub student: SemanticEncoder,
    pub deg: DegradationEncoder,
    pub structural: Option<StructuralPrior>,
    pub unet: UNet,
}

/// Stage-1 inputs: degraded image, frozen teacher embedding of the clean
/// image, and the degradation label.
#[derive(Clone, Debug)]
pub struct Stage1Sample {
    pub x_lq: Tensor,
    pub z_teacher: Tensor,
    pub label: usize,
}

/// Stage-2 inputs with the frozen priors already evaluated.
#[derive(Clone, Debug)]
pub struct Stage2Sample {
    pub x_lq: Tensor,
    pub x_gt: Tensor,
    pub cues: StructuralCues,
    pub frozen: PriorBundle,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage1Losses {
    pub sem: f64,
    pub deg: f64,
}

impl TpgModel {
    /// Builds every component; each draws from its own stream of `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let ch = cfg.unet.image_channels;
        let mut store = ParamStore::new();
        let teacher = SemanticEncoder::teacher(&mut store, ch, &cfg.semantic);
        let init = rng::derive_seed(seed, rng::streams::INIT);
        let student = SemanticEncoder::student(&mut store, ch, &cfg.semantic, &mut rng::stream(init, 0));
        let deg = DegradationEncoder::new(&mut store, ch, &cfg.degradation, &mut rng::stream(init, 1));
        let structural = cfg
            .unet
            .priors
            .structural
            .then(|| StructuralPrior::new(&mut store, "struct", &cfg.structural, &mut rng::stream(init, 2)));
        let dims = PriorDims {
            sem_dim: cfg.semantic.dim,
            sem_tokens: cfg.semantic.tokens,
            struct_dim: cfg.structural.dim,
            deg_dim: cfg.degradation.dim,
            prompts: cfg.degradation.prompts,
        };
        let unet = UNet::new(&mut store, &cfg.unet, dims, &mut rng::stream(init, 3))?;
        Ok(TpgModel {
            cfg: cfg.clone(),
            store,
            teacher,
            student,
            deg,
            structural,
            unet,
        })
    }

    /// Freezes the semantic student and degradation encoder.
    pub fn freeze_stage1(&mut self) {
        for p in STAGE1_PREFIXES {
            self.store.set_trainable_prefix(p, false);
        }
    }

    fn infer<T>(&self, f: impl FnOnce(&Session) -> Result<T>) -> Result<T> {
        let tape = Tape::new();
        let s = Session::new(&tape, &self.store, false);
        f(&s)
    }

    /// Teacher embedding `z_t = E_T(x_GT)`.
    pub fn teacher_embedding(&self, x_gt: &Tensor) -> Result<Tensor> {
        self.infer(|s| {
            let z = self.teacher.encode(s, s.tape().constant(x_gt.clone()))?;
            Ok(s.tape().value(z))
        })
    }

    /// Student embedding `z_s = E_sem(x_LQ)`.
    pub fn student_embedding(&self, x_lq: &Tensor) -> Result<Tensor> {
        self.infer(|s| {
            let z = self.student.encode(s, s.tape().constant(x_lq.clone()))?;
            Ok(s.tape().value(z))
        })
    }

    /// Degradation-class logits for one image.
    pub fn deg_logits(&self, x_lq: &Tensor) -> Result<Tensor> {
        self.infer(|s| {
            let l = self.deg.logits(s, &[s.tape().constant(x_lq.clone())])?;
            Ok(s.tape().value(l))
        })
    }

    /// Semantic and degradation priors, which stay fixed during stage 2.
    pub fn frozen_priors(&self, x_lq: &Tensor) -> Result<PriorBundle> {
        let flags = self.cfg.unet.priors;
        self.infer(|s| {
            let tape = s.tape();
            let x = tape.constant(x_lq.clone());
            let sem = if flags.sem {
                Some(tape.value(self.student.encode(s, x)?))
            } else {
                None
            };
            let deg = if flags.deg {
                Some(tape.value(self.deg.extract(s, x)?))
            } else {
                None
            };
            Ok(PriorBundle {
                sem,
                structural: None,
                deg,
            })
        })
    }

    /// All enabled priors for one degraded input.
    pub fn prior_bundle(&self, x_lq: &Tensor, cues: &StructuralCues) -> Result<PriorBundle> {
        let mut bundle = self.frozen_priors(x_lq)?;
        if let Some(sp) = &self.structural {
            bundle.structural = Some(self.infer(|s| Ok(s.tape().value(sp.extract(s, cues)?)))?);
        }
        Ok(bundle)
    }

    pub fn prepare_stage2(&self, x_lq: &Tensor, x_gt: &Tensor, cues: &StructuralCues) -> Result<Stage2Sample> {
        Ok(Stage2Sample {
            x_lq: x_lq.clone(),
            x_gt: x_gt.clone(),
            cues: cues.clone(),
            frozen: self.frozen_priors(x_lq)?,
        })
    }

    /// `ε̂_θ(x_t, μ, t)` with precomputed priors.
    pub fn predict_noise(
        &self,
        schedule: &SdeSchedule,
        x_t: &Tensor,
        mu: &Tensor,
        t: usize,
        priors: &PriorBundle,
    ) -> Result<Tensor> {
        self.infer(|s| {
            let tape = s.tape();
            let (x, m) = (tape.constant(x_t.clone()), tape.constant(mu.clone()));
            let raw = self.unet.forward(s, x, m, t as f64, &priors.bind(tape))?;
            Ok(tape.value(self.noise_from_output(tape, schedule, raw, x, m, t)?))
        })
    }

    /// Maps the network output to `ε̂` according to [`OutputKind`].
    pub fn noise_from_output(&self, tape: &Tape, schedule: &SdeSchedule, raw: Var, x_t: Var, mu: Var, t: usize) -> Result<Var> {
        match self.cfg.unet.output {
            OutputKind::Noise => Ok(raw),
            OutputKind::Residual => {
                let sd = schedule.variance(t)?.sqrt();
                if !(sd > 0.0) {
                    return Err(Error::TimeOutOfRange { t, max: schedule.steps() });
                }
                let decay = (-schedule.theta_bar(t)).exp();
                let dev = tape.scale(tape.sub(x_t, mu)?, 1.0 / sd);
                tape.sub(dev, tape.scale(raw, decay / sd))
            }
        }
    }

    /// Full reverse-time restoration of `x_lq`.
    pub fn restore<R: Rng + ?Sized>(
        &self,
        schedule: &SdeSchedule,
        x_lq: &Tensor,
        cues: &StructuralCues,
        sampler: Sampler,
        rng: &mut R,
    ) -> Result<Tensor> {
        let priors = self.prior_bundle(x_lq, cues)?;
        let predictor = Conditioned {
            model: self,
            schedule,
            priors: &priors,
        };
        sample_restore(schedule, x_lq, &predictor, sampler, rng)
    }

    /// One joint stage-1 update: `L_sem + L_deg` over the batch.
    pub fn stage1_step(&mut self, opt: &mut AdamW, batch: &[&Stage1Sample], smoothing: f64) -> Result<Stage1Losses> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let tape = Tape::new();
        let s = Session::new(&tape, &self.store, true);
        let xs: Vec<_> = batch.iter().map(|b| tape.constant(b.x_lq.clone())).collect();
        let z_s = self.student.encode_batch(&s, &xs)?;
        let targets: Vec<_> = batch.iter().map(|b| tape.constant(b.z_teacher.clone())).collect();
        let z_t = stack_rows(&tape, &targets)?;
        let l_sem = distill_loss(&tape, z_s, z_t)?;
        let labels: Vec<usize> = batch.iter().map(|b| b.label).collect();
        let l_deg = deg_class_loss(&tape, self.deg.logits(&s, &xs)?, &labels, smoothing)?;
        let total = tape.add(l_sem, l_deg)?;
        let losses = Stage1Losses {
            sem: tape.scalar(l_sem),
            deg: tape.scalar(l_deg),
        };
        let grads = gradients(&tape, &s, total, opt.steps_taken())?;
        drop(s);
        opt.step(&mut self.store, &grads)?;
        Ok(losses)
    }

    /// One denoiser update: draw `t` and `(x_t, ε)` per sample, regress
    /// `ε̂` onto `ε` with L1.
    pub fn training_step(
        &mut self,
        opt: &mut AdamW,
        schedule: &SdeSchedule,
        batch: &[&Stage2Sample],
        rng: &mut SeededRng,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let tape = Tape::new();
        let s = Session::new(&tape, &self.store, true);
        let mut losses = Vec::with_capacity(batch.len());
        for b in batch {
            let t = rng.random_range(1..=schedule.steps());
            let (x_t, eps) = schedule.sample_forward(&b.x_gt, &b.x_lq, t, rng)?;
            let mut priors: PriorVars = b.frozen.bind(&tape);
            if let Some(sp) = &self.structural {
                priors.structural = Some(sp.extract(&s, &b.cues)?);
            }
            let (x, mu) = (tape.constant(x_t), tape.constant(b.x_lq.clone()));
            let raw = self.unet.forward(&s, x, mu, t as f64, &priors)?;
            let eps_hat = self.noise_from_output(&tape, schedule, raw, x, mu, t)?;
            losses.push(l1_loss(&tape, eps_hat, tape.constant(eps))?);
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l)?;
        }
        let loss = tape.scale(total, 1.0 / batch.len() as f64);
        let value = tape.scalar(loss);
        let grads = gradients(&tape, &s, loss, opt.steps_taken())?;
        drop(s);
        opt.step(&mut self.store, &grads)?;
        Ok(value)
    }
}

fn gradients(tape: &Tape, s: &Session, loss: Var, step: usize) -> Result<Vec<(ParamId, Tensor)>> {
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Diverged {
            step,
            detail: format!("loss is {value}"),
        });
    }
    Ok(s.param_grads(&tape.backward(loss)?))
}

/// The model paired with one input's priors, as a reverse-process noise
/// estimator.
pub struct Conditioned<'a> {
    pub model: &'a TpgModel,
    pub schedule: &'a SdeSchedule,
    pub priors: &'a PriorBundle,
}

impl NoisePredictor for Conditioned<'_> {
    fn predict_noise(&self, x_t: &Tensor, mu: &Tensor, t: usize) -> Result<Tensor> {
        self.model.predict_noise(self.schedule, x_t, mu, t, self.priors)
    }
}
