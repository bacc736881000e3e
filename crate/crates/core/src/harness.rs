//! Two-stage training, evaluation and ablation orchestration.

use std::collections::BTreeMap;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{config_diff, RunConfig, Stage1Mode, ARCHITECTURE_KEYS};
use crate::degradation::{accuracy, DegradationKind};
use crate::denoiser::{Placement, PriorFlags};
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim, SSIM_WINDOW};
use crate::model::{Stage1Losses, Stage1Sample, Stage2Sample, TpgModel, STAGE1_PREFIXES};
use crate::optim::AdamW;
use crate::rng::{self, streams};
use crate::sde::{Sampler, SdeSchedule};
use crate::semantic::mean_cosine;
use crate::synth::DegradationSample;
use crate::tensor::Tensor;

/// Prefixes of the parameters a stage-1 checkpoint carries.
pub const STAGE1_CHECKPOINT_PREFIXES: [&str; 3] = ["teacher.", "student.", "deg."];
/// Config keys a stage-2 run must share with its stage-1 checkpoint.
pub const STAGE1_ARCH_KEYS: [&str; 3] = ["model.semantic", "model.degradation", "model.unet.image_channels"];

/// Stratified train/held-out split: each class contributes
/// `round(holdout · count)` held-out indices, chosen by `seed`.
pub fn split_indices(labels: &[usize], holdout: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = rng::stream(seed, streams::SHUFFLE + 100);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (_, mut idx) in by_class {
        idx.shuffle(&mut rng);
        let k = (holdout * idx.len() as f64).round() as usize;
        test.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Epoch-wise shuffled minibatch indices.
pub struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: rng::SeededRng,
}

impl Batcher {
    pub fn new(n: usize, seed: u64, stream: u64) -> Self {
        Batcher {
            order: (0..n).collect(),
            pos: n,
            rng: rng::stream(seed, stream),
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1LogRow {
    pub step: usize,
    pub lr: f64,
    pub l_sem: Option<f64>,
    pub l_deg: Option<f64>,
}

#[derive(Debug)]
pub struct Stage1Outcome {
    pub model: TpgModel,
    pub log: Vec<Stage1LogRow>,
    /// Held-out `L_sem` before and after training.
    pub sem_loss_before: f64,
    pub sem_loss_after: f64,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
}

impl Stage1Outcome {
    pub fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        let step = self.log.last().map_or(0, |r| r.step as u64);
        let mut ck = Checkpoint::from_store(&self.model.store, 1, step, &cfg.to_toml());
        ck.records
            .retain(|r| STAGE1_CHECKPOINT_PREFIXES.iter().any(|p| r.name.starts_with(p)));
        ck
    }
}

fn stage1_samples(model: &TpgModel, data: &[DegradationSample]) -> Result<Vec<Stage1Sample>> {
    data.iter()
        .map(|s| {
            Ok(Stage1Sample {
                x_lq: s.x_lq.clone(),
                z_teacher: model.teacher_embedding(&s.x_gt)?,
                label: s.label(),
            })
        })
        .collect()
}

/// Held-out `(L_sem, accuracy)` of the current student and classifier.
fn stage1_metrics(model: &TpgModel, data: &[Stage1Sample]) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let rows = |f: &dyn Fn(&Stage1Sample) -> Result<Tensor>| -> Result<Tensor> {
        let parts = data.iter().map(f).collect::<Result<Vec<_>>>()?;
        let n = parts[0].numel();
        let flat: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
        Tensor::new(&[data.len(), n], flat)
    };
    let z_s = rows(&|s| model.student_embedding(&s.x_lq))?;
    let z_t = rows(&|s| Ok(s.z_teacher.clone()))?;
    let logits = rows(&|s| model.deg_logits(&s.x_lq))?;
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    Ok((1.0 - mean_cosine(&z_s, &z_t)?, accuracy(&logits, &labels)))
}

/// Trains the semantic student and degradation classifier.
pub fn run_stage1(cfg: &RunConfig, train: &[DegradationSample], test: &[DegradationSample]) -> Result<Stage1Outcome> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("stage 1 needs training samples".into()));
    }
    let mut model = TpgModel::new(&cfg.model, cfg.seed)?;
    let train1 = stage1_samples(&model, train)?;
    let test1 = stage1_samples(&model, test)?;
    let (sem_loss_before, accuracy_before) = stage1_metrics(&model, &test1)?;
    let s1 = &cfg.stage1;
    let phases: Vec<(bool, bool)> = match s1.mode {
        Stage1Mode::Joint => vec![(true, true)],
        Stage1Mode::Sequential => vec![(true, false), (false, true)],
    };
    let smoothing = cfg.model.degradation.smoothing;
    let mut batcher = Batcher::new(train1.len(), cfg.seed, streams::STAGE1);
    let mut log = Vec::new();
    for (sem_on, deg_on) in phases {
        let mut opt = AdamW::new(s1.optim.clone(), s1.steps);
        // Sequential phases train one branch; the other stays fixed.
        model.store.set_trainable_prefix("student.", sem_on);
        model.store.set_trainable_prefix("deg.", deg_on);
        for _ in 0..s1.steps {
            let batch: Vec<&Stage1Sample> = batcher.next_batch(s1.batch).into_iter().map(|i| &train1[i]).collect();
            let lr = opt.current_lr();
            let Stage1Losses { sem, deg } = model.stage1_step(&mut opt, &batch, smoothing)?;
            log.push(Stage1LogRow {
                step: log.len() + 1,
                lr,
                l_sem: sem_on.then_some(sem),
                l_deg: deg_on.then_some(deg),
            });
        }
    }
    for p in STAGE1_PREFIXES {
        model.store.set_trainable_prefix(p, true);
    }
    let (sem_loss_after, accuracy_after) = stage1_metrics(&model, &test1)?;
    info!(
        "stage 1: held-out L_sem {sem_loss_before:.4} -> {sem_loss_after:.4}, accuracy {accuracy_before:.3} -> {accuracy_after:.3}"
    );
    Ok(Stage1Outcome {
        model,
        log,
        sem_loss_before,
        sem_loss_after,
        accuracy_before,
        accuracy_after,
    })
}

/// Stage-2 model with the stage-1 extractors loaded and frozen.
pub fn stage2_model(cfg: &RunConfig, stage1: &Checkpoint) -> Result<TpgModel> {
    if stage1.stage != 1 {
        return Err(Error::Config(format!("expected a stage-1 checkpoint, got stage {}", stage1.stage)));
    }
    if let Some(diff) = config_diff(&cfg.to_toml(), &stage1.config, &STAGE1_ARCH_KEYS)? {
        return Err(Error::ConfigMismatch { diff });
    }
    let mut model = TpgModel::new(&cfg.model, cfg.seed)?;
    stage1.restore_into(&mut model.store, |n| STAGE1_CHECKPOINT_PREFIXES.iter().any(|p| n.starts_with(p)))?;
    model.freeze_stage1();
    Ok(model)
}

/// Rebuilds a trained model from a stage-2 checkpoint, refusing one
/// written under a different architecture.
pub fn load_model(cfg: &RunConfig, ck: &Checkpoint) -> Result<TpgModel> {
    if let Some(diff) = config_diff(&cfg.to_toml(), &ck.config, &ARCHITECTURE_KEYS)? {
        return Err(Error::ConfigMismatch { diff });
    }
    let mut model = TpgModel::new(&cfg.model, cfg.seed)?;
    ck.restore_into(&mut model.store, |_| true)?;
    model.freeze_stage1();
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub eval_psnr: Option<f64>,
    pub eval_ssim: Option<f64>,
}

#[derive(Debug)]
pub struct Stage2Outcome {
    pub model: TpgModel,
    pub log: Vec<Stage2LogRow>,
}

impl Stage2Outcome {
    pub fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        let step = self.log.last().map_or(0, |r| r.step as u64);
        Checkpoint::from_store(&self.model.store, 2, step, &cfg.to_toml())
    }
}

/// Trains the denoiser on `train`, with periodic restoration of `test`.
pub fn run_stage2(
    cfg: &RunConfig,
    stage1: &Checkpoint,
    train: &[DegradationSample],
    test: &[DegradationSample],
) -> Result<Stage2Outcome> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("stage 2 needs training samples".into()));
    }
    let mut model = stage2_model(cfg, stage1)?;
    let schedule = cfg.sde.schedule()?;
    let prepared: Vec<Stage2Sample> = train
        .iter()
        .map(|s| model.prepare_stage2(&s.x_lq, &s.x_gt, &s.cues))
        .collect::<Result<_>>()?;
    let s2 = &cfg.stage2;
    let mut opt = AdamW::new(s2.optim.clone(), s2.steps);
    let mut batcher = Batcher::new(prepared.len(), cfg.seed, streams::STAGE2);
    let mut rng = rng::stream(cfg.seed, streams::STAGE2 + 100);
    let eval_set = &test[..test.len().min(s2.eval_limit)];
    let mut log = Vec::with_capacity(s2.steps);
    for step in 1..=s2.steps {
        let batch: Vec<&Stage2Sample> = batcher.next_batch(s2.batch).into_iter().map(|i| &prepared[i]).collect();
        let lr = opt.current_lr();
        let loss = model.training_step(&mut opt, &schedule, &batch, &mut rng)?;
        let mut row = Stage2LogRow {
            step,
            lr,
            loss,
            eval_psnr: None,
            eval_ssim: None,
        };
        if s2.eval_every > 0 && step % s2.eval_every == 0 && !eval_set.is_empty() {
            let report = evaluate(&model, &schedule, eval_set, s2.sampler, cfg.seed)?;
            info!("stage 2 step {step}: loss {loss:.4}, held-out PSNR {:.2}", report.mean_psnr);
            row.eval_psnr = Some(report.mean_psnr);
            row.eval_ssim = report.mean_ssim;
        }
        log.push(row);
    }
    Ok(Stage2Outcome { model, log })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub index: usize,
    pub kind: DegradationKind,
    pub psnr: f64,
    pub ssim: Option<f64>,
    pub identity_psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAggregate {
    pub kind: DegradationKind,
    pub count: usize,
    pub psnr: f64,
    pub ssim: Option<f64>,
    pub identity_psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub per_class: Vec<ClassAggregate>,
    pub mean_psnr: f64,
    pub mean_ssim: Option<f64>,
    pub mean_identity_psnr: f64,
}

/// Arithmetic mean of the finite values; infinite PSNR is excluded.
pub fn finite_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .filter(|v| v.is_finite())
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn aggregate(rows: &[&EvalRow]) -> (f64, Option<f64>, f64) {
    let ssim = rows
        .iter()
        .map(|r| r.ssim)
        .collect::<Option<Vec<_>>>()
        .map(|v| finite_mean(v));
    (
        finite_mean(rows.iter().map(|r| r.psnr)),
        ssim,
        finite_mean(rows.iter().map(|r| r.identity_psnr)),
    )
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Self {
        let all: Vec<&EvalRow> = rows.iter().collect();
        let (mean_psnr, mean_ssim, mean_identity_psnr) = aggregate(&all);
        let per_class = DegradationKind::ALL
            .iter()
            .filter_map(|&kind| {
                let sel: Vec<&EvalRow> = rows.iter().filter(|r| r.kind == kind).collect();
                (!sel.is_empty()).then(|| {
                    let (psnr, ssim, identity_psnr) = aggregate(&sel);
                    ClassAggregate {
                        kind,
                        count: sel.len(),
                        psnr,
                        ssim,
                        identity_psnr,
                    }
                })
            })
            .collect();
        EvalReport {
            rows,
            per_class,
            mean_psnr,
            mean_ssim,
            mean_identity_psnr,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Quality of one output against its reference; SSIM is skipped for images
/// smaller than its window.
pub fn score(restored: &Tensor, gt: &Tensor) -> Result<(f64, Option<f64>)> {
    let small = gt.shape().iter().skip(1).any(|&d| d < SSIM_WINDOW);
    let s = if small { None } else { Some(ssim(restored, gt)?) };
    Ok((psnr(restored, gt, 1.0)?, s))
}

/// Restores every sample (clamped to `[0, 1]`) and scores it against its
/// clean image. Sample `i` uses its own rng stream, so results do not
/// depend on evaluation order.
pub fn evaluate(
    model: &TpgModel,
    schedule: &SdeSchedule,
    samples: &[DegradationSample],
    sampler: Sampler,
    seed: u64,
) -> Result<EvalReport> {
    let rows = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut r = rng::stream(rng::derive_seed(seed, i as u64), streams::RESTORE);
            let out = model.restore(schedule, &s.x_lq, &s.cues, sampler, &mut r)?.clamp(0.0, 1.0);
            let (p, ss) = score(&out, &s.x_gt)?;
            Ok(EvalRow {
                index: i,
                kind: s.kind,
                psnr: p,
                ssim: ss,
                identity_psnr: psnr(&s.x_lq, &s.x_gt, 1.0)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_rows(rows))
}

/// One configuration of an ablation matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub name: String,
    pub priors: PriorFlags,
    pub sem_placement: Placement,
    pub struct_placement: Placement,
}

impl AblationCell {
    fn new(name: &str, priors: PriorFlags, sem: Placement, structural: Placement) -> Self {
        AblationCell {
            name: name.to_string(),
            priors,
            sem_placement: sem,
            struct_placement: structural,
        }
    }

    pub fn apply(&self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        c.model.unet.priors = self.priors;
        c.model.unet.sem_placement = self.sem_placement;
        c.model.unet.struct_placement = self.struct_placement;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationMatrix {
    pub cells: Vec<AblationCell>,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

impl AblationMatrix {
    /// Prior-type rows: none, degradation, degradation + semantic, all.
    pub fn prior_types(seeds: Vec<u64>) -> Self {
        let f = |deg, sem, structural| PriorFlags { deg, sem, structural };
        let (d, s) = (Placement::Deep, Placement::Shallow);
        AblationMatrix {
            cells: vec![
                AblationCell::new("none", f(false, false, false), d, s),
                AblationCell::new("deg", f(true, false, false), d, s),
                AblationCell::new("deg+sem", f(true, true, false), d, s),
                AblationCell::new("all", f(true, true, true), d, s),
            ],
            seeds,
        }
    }

    /// Placement rows: semantic everywhere without structure, swapped, and
    /// semantic-deep / structural-shallow.
    pub fn placements(seeds: Vec<u64>) -> Self {
        let all = PriorFlags::default();
        let (d, s, b) = (Placement::Deep, Placement::Shallow, Placement::Both);
        AblationMatrix {
            cells: vec![
                AblationCell::new(
                    "sem-both",
                    PriorFlags {
                        structural: false,
                        ..all
                    },
                    b,
                    s,
                ),
                AblationCell::new("swapped", all, s, d),
                AblationCell::new("aligned", all, d, s),
            ],
            seeds,
        }
    }

    pub fn preset(name: &str, seeds: Vec<u64>) -> Result<Self> {
        match name {
            "priors" => Ok(Self::prior_types(seeds)),
            "placement" => Ok(Self::placements(seeds)),
            other => Err(Error::Unknown {
                what: "ablation matrix",
                name: other.to_string(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: String,
    pub seed: u64,
    pub psnr: f64,
    pub ssim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// `(cell, mean PSNR over seeds)`, best first.
    pub ranking: Vec<(String, f64)>,
}

impl AblationReport {
    pub fn mean_psnr(&self, cell: &str) -> Option<f64> {
        self.ranking.iter().find(|(c, _)| c == cell).map(|(_, p)| *p)
    }
}

/// Trains and evaluates every cell for every seed. `stage1` maps a seed to
/// its stage-1 checkpoint, shared by all cells of that seed.
pub fn run_ablation(
    base: &RunConfig,
    matrix: &AblationMatrix,
    stage1: &dyn Fn(u64) -> Result<Checkpoint>,
    train: &[DegradationSample],
    test: &[DegradationSample],
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for &seed in &matrix.seeds {
        let ck = stage1(seed)?;
        for cell in &matrix.cells {
            let mut cfg = cell.apply(base);
            cfg.seed = seed;
            cfg.stage2.eval_every = 0;
            let out = run_stage2(&cfg, &ck, train, test)?;
            let report = evaluate(&out.model, &cfg.sde.schedule()?, test, cfg.stage2.sampler, seed)?;
            info!("ablation {} seed {seed}: {:.3} dB", cell.name, report.mean_psnr);
            rows.push(AblationRow {
                cell: cell.name.clone(),
                seed,
                psnr: report.mean_psnr,
                ssim: report.mean_ssim,
            });
        }
    }
    let mut ranking: Vec<(String, f64)> = matrix
        .cells
        .iter()
        .map(|c| {
            let p = finite_mean(rows.iter().filter(|r| r.cell == c.name).map(|r| r.psnr));
            (c.name.clone(), p)
        })
        .collect();
    ranking.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(AblationReport { rows, ranking })
}

/// Append-friendly CSV of serialisable rows.
pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
