//! Run configuration: TOML file, presets and `--key=value` overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::OptimConfig;
use crate::sde::{Sampler, SdeSchedule, ThetaRule};
use crate::synth::CorpusConfig;

/// Environment variable consulted when no `seed` is configured.
pub const SEED_ENV: &str = "TPG_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdeConfig {
    pub steps: usize,
    pub lambda: f64,
    pub theta_rule: ThetaRule,
    /// Cumulative `θ̄` reached at the final step.
    pub theta_bar_end: f64,
}

impl Default for SdeConfig {
    fn default() -> Self {
        SdeConfig {
            steps: 100,
            lambda: 50.0 / 255.0,
            theta_rule: ThetaRule::Constant,
            theta_bar_end: 9.0,
        }
    }
}

impl SdeConfig {
    pub fn schedule(&self) -> Result<SdeSchedule> {
        SdeSchedule::new(self.steps, self.lambda, self.theta_rule, self.theta_bar_end)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage1Mode {
    /// One update on `L_sem + L_deg` per step.
    Joint,
    /// `steps` updates on `L_sem`, then `steps` on `L_deg`.
    Sequential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub steps: usize,
    pub batch: usize,
    pub mode: Stage1Mode,
    pub optim: OptimConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            steps: 2000,
            batch: 8,
            mode: Stage1Mode::Joint,
            optim: OptimConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub steps: usize,
    pub batch: usize,
    /// Periodic held-out evaluation interval; `0` disables it.
    pub eval_every: usize,
    /// Cap on held-out samples restored by a periodic evaluation.
    pub eval_limit: usize,
    pub sampler: Sampler,
    pub optim: OptimConfig,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            steps: 10_000,
            batch: 8,
            eval_every: 500,
            eval_limit: 16,
            sampler: Sampler::Sde,
            optim: OptimConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            corpus: "corpus".into(),
            out: "runs".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Fraction of the corpus held out for evaluation.
    pub holdout: f64,
    pub model: ModelConfig,
    pub sde: SdeConfig,
    pub corpus: CorpusConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            holdout: 0.1,
            model: ModelConfig::default(),
            sde: SdeConfig::default(),
            corpus: CorpusConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            paths: PathsConfig::default(),
        }
    }
}

/// Sections whose values fix parameter shapes.
pub const ARCHITECTURE_KEYS: [&str; 1] = ["model"];

impl RunConfig {
    /// Named starting points: `default`, `desk` (small, single-core) and
    /// `full` (the large-scale training regime).
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        match name {
            "default" => {}
            "desk" => {
                let u = &mut c.model.unet;
                u.base_channels = 8;
                u.max_channels = 32;
                u.time_dim = 32;
                u.attn_dim = 16;
                c.corpus.height = 16;
                c.corpus.width = 16;
                c.stage1.optim.lr = 1e-3;
                c.stage2.optim.lr = 1e-3;
                c.stage2.steps = 3000;
            }
            "full" => {
                let u = &mut c.model.unet;
                u.base_channels = 64;
                u.max_channels = 512;
                c.corpus.height = 256;
                c.corpus.width = 256;
                c.stage1.batch = 512;
                c.stage2.batch = 16;
                c.stage2.steps = 700_000;
            }
            other => {
                return Err(Error::Unknown {
                    what: "preset",
                    name: other.to_string(),
                })
            }
        }
        Ok(c)
    }

    /// Builds a config from an optional TOML file and `key=value`
    /// overrides. Without a configured seed, `TPG_SEED` is used if set.
    pub fn resolve(preset: &str, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let env = std::env::var(SEED_ENV).ok();
        let text = match file {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::resolve_from(preset, text.as_deref(), overrides, env.as_deref())
    }

    pub fn resolve_from(preset: &str, file: Option<&str>, overrides: &[String], env_seed: Option<&str>) -> Result<Self> {
        let mut table = toml::Table::try_from(Self::preset(preset)?).map_err(|e| Error::Config(e.to_string()))?;
        let mut seed_set = false;
        if let Some(text) = file {
            let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
            seed_set |= user.contains_key("seed");
            merge(&mut table, user);
        }
        for o in overrides {
            let (key, value) = split_override(o)?;
            seed_set |= key == "seed";
            set_dotted(&mut table, key, parse_value(value))?;
        }
        if !seed_set {
            if let Some(s) = env_seed {
                let seed = s
                    .trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}={s} is not an unsigned integer")))?;
                table.insert("seed".into(), toml::Value::Integer(seed as i64));
            }
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(Error::Config(format!("holdout must be in [0, 1), got {}", self.holdout)));
        }
        if self.stage1.batch == 0 || self.stage2.batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        self.model.unet.validate(self.corpus.height, self.corpus.width)?;
        self.sde.schedule()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn split_override(raw: &str) -> Result<(&str, &str)> {
    let s = raw.strip_prefix("--").unwrap_or(raw);
    s.split_once('=')
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| Error::Config(format!("override '{raw}' is not key=value")))
}

/// A TOML literal if it parses as one, else a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        cur = match cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("'{part}' in '{key}' is not a section"))),
        };
    }
    Ok(())
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut BTreeMap<String, String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

/// Line-per-key difference of two config texts restricted to `sections`;
/// `None` when they agree.
pub fn config_diff(ours: &str, theirs: &str, sections: &[&str]) -> Result<Option<String>> {
    let flat = |text: &str| -> Result<BTreeMap<String, String>> {
        let v: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = BTreeMap::new();
        flatten("", &v, &mut out);
        out.retain(|k, _| sections.iter().any(|s| k == s || k.starts_with(&format!("{s}."))));
        Ok(out)
    };
    let (a, b) = (flat(ours)?, flat(theirs)?);
    let mut lines = Vec::new();
    for key in a.keys().chain(b.keys().filter(|k| !a.contains_key(*k))) {
        match (a.get(key), b.get(key)) {
            (Some(x), Some(y)) if x == y => {}
            (x, y) => lines.push(format!(
                "  {key}: ours {} / checkpoint {}",
                x.map_or("<absent>", |s| s.as_str()),
                y.map_or("<absent>", |s| s.as_str())
            )),
        }
    }
    Ok((!lines.is_empty()).then(|| lines.join("\n")))
}
