//! `tpg`: corpus synthesis, two-stage training, restoration, evaluation
//! and ablations.
//!
//! Every config key can be overridden with `--section.key=value` (or
//! `--seed=N`) anywhere on the command line.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use sha2::{Digest, Sha256};

use tpg_core::checkpoint::hex;
use tpg_core::harness::{
    evaluate, load_model, run_ablation, run_stage1, run_stage2, split_indices, write_rows, AblationMatrix,
};
use tpg_core::rng::{self, streams};
use tpg_core::synth::{build_corpus, dog_cue, load_corpus, load_png, save_png, MANIFEST_FILE};
use tpg_core::tensor::{read_tensor, write_tensor};
use tpg_core::{Checkpoint, DegradationSample, RunConfig, StructuralCues, Tensor};

#[derive(Parser, Debug)]
#[command(name = "tpg", version, about = "Prior-guided SDE image restoration")]
struct Cli {
    /// TOML file merged over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Base preset: default, desk or full.
    #[arg(long, global = true, default_value = "default")]
    preset: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic degradation corpus.
    Synth {
        /// Output directory [default: paths.corpus].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage 1: train the semantic student and degradation classifier.
    TrainPriors {
        /// Corpus manifest [default: <paths.corpus>/manifest.csv].
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Stage 2: train the denoiser with the stage-1 extractors frozen.
    TrainDiffusion {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Stage-1 checkpoint [default: <paths.out>/stage1.ckpt].
        #[arg(long)]
        stage1: Option<PathBuf>,
    },
    /// Restore one image (`.t` tensor or `.png`).
    Restore {
        lq: PathBuf,
        out: PathBuf,
        /// Stage-2 checkpoint [default: <paths.out>/stage2.ckpt].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory holding `depth.t` and `seg.t` [default: the input's directory].
        #[arg(long)]
        cues: Option<PathBuf>,
    },
    /// Restore and score every sample of a manifest.
    Eval {
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Per-sample CSV [default: <paths.out>/eval.csv].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Only the held-out split.
        #[arg(long)]
        holdout_only: bool,
    },
    /// Run an ablation matrix (`priors`, `placement` or a TOML file).
    Ablate {
        matrix: String,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Run the property suite.
    Check,
}

/// Splits `--key=value` config overrides from the arguments clap sees.
fn split_args(args: Vec<OsString>) -> (Vec<OsString>, Vec<String>) {
    let top: BTreeSet<String> = toml::from_str::<toml::Table>(&RunConfig::default().to_toml())
        .map(|t| t.keys().cloned().collect())
        .unwrap_or_default();
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        let is_override = a.to_str().and_then(|s| s.strip_prefix("--")).is_some_and(|s| {
            s.split_once('=')
                .is_some_and(|(k, _)| top.contains(k.split('.').next().unwrap_or("")))
        });
        match (is_override, a.into_string()) {
            (true, Ok(s)) => overrides.push(s),
            (_, Ok(s)) => rest.push(OsString::from(s)),
            (_, Err(os)) => rest.push(os),
        }
    }
    (rest, overrides)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let (args, overrides) = split_args(std::env::args_os().collect());
    let cli = Cli::parse_from(args);
    match run(cli, &overrides) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli, overrides: &[String]) -> Result<ExitCode> {
    let resolve = || RunConfig::resolve(&cli.preset, cli.config.as_deref(), overrides).context("resolving config");
    match cli.command {
        Command::Synth { out } => {
            let cfg = resolve()?;
            let dir = out.unwrap_or_else(|| cfg.paths.corpus.clone());
            let rows = build_corpus(&cfg.corpus, cfg.seed, &dir)?;
            let manifest = dir.join(MANIFEST_FILE);
            println!("wrote {} samples to {}", rows.len(), manifest.display());
            println!("manifest sha256 {}", file_hash(&manifest)?);
        }
        Command::TrainPriors { manifest } => {
            let cfg = resolve()?;
            let (train, test) = load_split(&cfg, manifest)?;
            let out = run_dir(&cfg)?;
            let s1 = run_stage1(&cfg, &train, &test)?;
            let path = out.join("stage1.ckpt");
            s1.checkpoint(&cfg).save(&path)?;
            write_rows(&out.join("stage1_log.csv"), &s1.log)?;
            println!(
                "held-out L_sem {:.4} -> {:.4}, accuracy {:.3} -> {:.3}",
                s1.sem_loss_before, s1.sem_loss_after, s1.accuracy_before, s1.accuracy_after
            );
            println!("checkpoint {} sha256 {}", path.display(), file_hash(&path)?);
        }
        Command::TrainDiffusion { manifest, stage1 } => {
            let cfg = resolve()?;
            let (train, test) = load_split(&cfg, manifest)?;
            let out = run_dir(&cfg)?;
            let s1_path = stage1.unwrap_or_else(|| out.join("stage1.ckpt"));
            let ck = Checkpoint::load(&s1_path).with_context(|| format!("loading {}", s1_path.display()))?;
            let s2 = run_stage2(&cfg, &ck, &train, &test)?;
            let path = out.join("stage2.ckpt");
            s2.checkpoint(&cfg).save(&path)?;
            write_rows(&out.join("stage2_log.csv"), &s2.log)?;
            let report = evaluate(&s2.model, &cfg.sde.schedule()?, &test, cfg.stage2.sampler, cfg.seed)?;
            report.write_csv(&out.join("eval.csv"))?;
            print_report(&report);
            println!("checkpoint {} sha256 {}", path.display(), file_hash(&path)?);
        }
        Command::Restore {
            lq,
            out,
            checkpoint,
            cues,
        } => {
            let (cfg, ck) = trained(&cli.preset, overrides, checkpoint)?;
            let model = load_model(&cfg, &ck)?;
            let x_lq = read_image(&lq)?;
            let cues = load_cues(&cfg, &x_lq, cues.as_deref().or(lq.parent()))?;
            let mut r = rng::stream(cfg.seed, streams::RESTORE);
            let restored = model
                .restore(&cfg.sde.schedule()?, &x_lq, &cues, cfg.stage2.sampler, &mut r)?
                .clamp(0.0, 1.0);
            write_image(&out, &restored)?;
            println!("wrote {}", out.display());
        }
        Command::Eval {
            manifest,
            checkpoint,
            out,
            holdout_only,
        } => {
            let (cfg, ck) = trained(&cli.preset, overrides, checkpoint)?;
            let model = load_model(&cfg, &ck)?;
            let samples = if holdout_only {
                load_split(&cfg, Some(manifest))?.1
            } else {
                load_corpus(&manifest)?
            };
            let report = evaluate(&model, &cfg.sde.schedule()?, &samples, cfg.stage2.sampler, cfg.seed)?;
            let path = out.unwrap_or_else(|| cfg.paths.out.join("eval.csv"));
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            report.write_csv(&path)?;
            print_report(&report);
        }
        Command::Ablate {
            matrix,
            seeds,
            manifest,
        } => {
            let cfg = resolve()?;
            let m = load_matrix(&matrix, seeds)?;
            let (train, test) = load_split(&cfg, manifest)?;
            let out = run_dir(&cfg)?;
            let stage1 = |seed: u64| {
                let mut c = cfg.clone();
                c.seed = seed;
                info!("stage 1 for seed {seed}");
                Ok(run_stage1(&c, &train, &test)?.checkpoint(&c))
            };
            let report = run_ablation(&cfg, &m, &stage1, &train, &test)?;
            write_rows(&out.join("ablation.csv"), &report.rows)?;
            for (cell, p) in &report.ranking {
                println!("{cell:>10}  {p:.3} dB");
            }
        }
        Command::Check => {
            let scratch = std::env::temp_dir().join(format!("tpg-check-{}", std::process::id()));
            std::fs::create_dir_all(&scratch)?;
            let results = tpg_core::checks::quick_suite(&scratch);
            std::fs::remove_dir_all(&scratch).ok();
            let mut failed = 0;
            for c in results? {
                println!("{} {:<28} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                println!("{failed} check(s) failed");
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.paths.out.clone();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(dir)
}

/// Loads the corpus and splits it with the configured seed and holdout.
fn load_split(cfg: &RunConfig, manifest: Option<PathBuf>) -> Result<(Vec<DegradationSample>, Vec<DegradationSample>)> {
    let path = manifest.unwrap_or_else(|| cfg.paths.corpus.join(MANIFEST_FILE));
    if !path.exists() {
        bail!("no corpus manifest at {} (run `tpg synth` first)", path.display());
    }
    let data = load_corpus(&path)?;
    let labels: Vec<usize> = data.iter().map(|s| s.label()).collect();
    let (tr, te) = split_indices(&labels, cfg.holdout, cfg.seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| data[i].clone()).collect::<Vec<_>>();
    info!("corpus {}: {} train, {} held out", path.display(), tr.len(), te.len());
    Ok((pick(&tr), pick(&te)))
}

/// Config of a trained checkpoint with command-line overrides applied on top.
fn trained(preset: &str, overrides: &[String], checkpoint: Option<PathBuf>) -> Result<(RunConfig, Checkpoint)> {
    let base = RunConfig::resolve(preset, None, overrides)?;
    let path = checkpoint.unwrap_or_else(|| base.paths.out.join("stage2.ckpt"));
    let ck = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    if ck.stage != 2 {
        bail!("{} is a stage-{} checkpoint; restoration needs stage 2", path.display(), ck.stage);
    }
    let cfg = RunConfig::resolve_from(preset, Some(&ck.config), overrides, None)?;
    Ok((cfg, ck))
}

fn read_image(path: &Path) -> Result<Tensor> {
    let t = match path.extension().and_then(|e| e.to_str()) {
        Some("png") => load_png(path)?,
        _ => read_tensor(path)?,
    };
    Ok(t)
}

fn write_image(path: &Path, x: &Tensor) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => save_png(path, x)?,
        _ => write_tensor(path, x)?,
    }
    Ok(())
}

/// Depth and segmentation from `dir`; the DoG cue is recomputed from the
/// input. Without a structural prior, missing maps are replaced by zeros.
fn load_cues(cfg: &RunConfig, x_lq: &Tensor, dir: Option<&Path>) -> Result<StructuralCues> {
    let [_, h, w] = *x_lq.shape() else {
        bail!("expected a [C, H, W] image, got {:?}", x_lq.shape());
    };
    let dog = dog_cue(x_lq, cfg.corpus.dog_sigmas)?;
    let dir = dir.unwrap_or(Path::new("."));
    let (d, s) = (dir.join("depth.t"), dir.join("seg.t"));
    if d.exists() && s.exists() {
        return Ok(StructuralCues {
            depth: read_tensor(&d)?,
            seg: read_tensor(&s)?,
            dog,
        });
    }
    if cfg.model.unet.priors.structural {
        bail!("structural prior needs depth.t and seg.t in {} (use --cues)", dir.display());
    }
    Ok(StructuralCues {
        depth: Tensor::zeros(&[1, h, w]),
        seg: Tensor::zeros(&[1, h, w]),
        dog,
    })
}

fn load_matrix(name: &str, seeds: Vec<u64>) -> Result<AblationMatrix> {
    let path = Path::new(name);
    if path.extension().is_some_and(|e| e == "toml") {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {name}"))?;
        let mut m: AblationMatrix = toml::from_str(&text).with_context(|| format!("parsing {name}"))?;
        if m.seeds.is_empty() {
            m.seeds = seeds;
        }
        return Ok(m);
    }
    Ok(AblationMatrix::preset(name, seeds)?)
}

fn print_report(report: &tpg_core::harness::EvalReport) {
    for c in &report.per_class {
        println!(
            "{:>9}  n={:<3} PSNR {:.2} dB (identity {:.2}){}",
            c.kind.name(),
            c.count,
            c.psnr,
            c.identity_psnr,
            c.ssim.map_or(String::new(), |s| format!("  SSIM {s:.4}"))
        );
    }
    println!(
        "     mean  PSNR {:.2} dB (identity {:.2}){}",
        report.mean_psnr,
        report.mean_identity_psnr,
        report.mean_ssim.map_or(String::new(), |s| format!("  SSIM {s:.4}"))
    );
}
