//! Noise-predicting UNet with layer-aware prior injection.
//!
//! Stages are split by resolution: anything at `H/4` or finer is shallow,
//! `H/8` or coarser (and the bottleneck) is deep. Structural FiLM and
//! semantic cross-attention are attached to the stages selected by their
//! placement; every residual block consumes the (optionally
//! degradation-modulated) time embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::degradation::{modulate_time, TimeModulator};
use crate::error::{Error, Result};
use crate::nn::{AttentionProj, Conv2d, GroupNorm, Init, Linear};
use crate::params::{ParamStore, Session};
use crate::rng::SeededRng;
use crate::semantic::{deep_cross_attention, SemanticProjection};
use crate::structural::{structural_film, StructuralAdapter};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Depth {
    Shallow,
    Deep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    Deep,
    Shallow,
    Both,
}

impl Placement {
    pub fn covers(self, d: Depth) -> bool {
        matches!(
            (self, d),
            (Placement::Both, _) | (Placement::Deep, Depth::Deep) | (Placement::Shallow, Depth::Shallow)
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Encoder(usize),
    Bottleneck,
    Decoder(usize),
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Encoder(i) => write!(f, "enc{i}"),
            Stage::Bottleneck => f.write_str("mid"),
            Stage::Decoder(j) => write!(f, "dec{j}"),
        }
    }
}

/// Which priors exist in the architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorFlags {
    pub deg: bool,
    pub sem: bool,
    pub structural: bool,
}

impl Default for PriorFlags {
    fn default() -> Self {
        PriorFlags {
            deg: true,
            sem: true,
            structural: true,
        }
    }
}

impl PriorFlags {
    pub const NONE: PriorFlags = PriorFlags {
        deg: false,
        sem: false,
        structural: false,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub image_channels: usize,
    pub stages: usize,
    pub base_channels: usize,
    /// Channel cap; stage widths are `min(base · 2^i, max)`.
    pub max_channels: usize,
    pub groups: usize,
    /// Width of `ψ(τ)` and `t'`.
    pub time_dim: usize,
    /// Context token width `D` of the semantic cross-attention.
    pub attn_dim: usize,
    pub heads: usize,
    pub priors: PriorFlags,
    pub sem_placement: Placement,
    pub struct_placement: Placement,
    pub output: OutputKind,
}

/// What the network's raw output estimates; the noise `ε̂` is derived from
/// it in either case.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputKind {
    /// `ε̂` directly.
    Noise,
    /// `x_0 − μ`, mapped to `ε̂ = (x_t − μ − e^{−θ̄_t} r̂) / sqrt(v_t)`.
    #[default]
    Residual,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            image_channels: 3,
            stages: 4,
            base_channels: 32,
            max_channels: 256,
            groups: 4,
            time_dim: 128,
            attn_dim: 64,
            heads: 1,
            priors: PriorFlags::default(),
            sem_placement: Placement::Deep,
            struct_placement: Placement::Shallow,
            output: OutputKind::Residual,
        }
    }
}

impl UNetConfig {
    pub fn channels(&self, i: usize) -> usize {
        (self.base_channels << i).min(self.max_channels)
    }

    /// Downsampling factor of a stage relative to the input.
    pub fn stage_scale(&self, stage: Stage) -> usize {
        match stage {
            Stage::Encoder(i) => 1 << i,
            Stage::Bottleneck => 1 << (self.stages - 1),
            Stage::Decoder(j) => 1 << (self.stages - 1 - j),
        }
    }

    pub fn all_stages(&self) -> Vec<Stage> {
        let d = self.stages;
        (0..d)
            .map(Stage::Encoder)
            .chain([Stage::Bottleneck])
            .chain((0..d).map(Stage::Decoder))
            .collect()
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        let f = 1 << (self.stages - 1);
        if self.stages == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::InvalidArgument(format!(
                "{h}x{w} input is not divisible by 2^{} for a {}-stage UNet",
                self.stages - 1,
                self.stages
            )));
        }
        Ok(())
    }
}

/// Resolution rule: stages at `H/4` or finer are shallow, coarser ones deep.
pub fn classify_scale(scale: usize) -> Depth {
    if scale <= 4 {
        Depth::Shallow
    } else {
        Depth::Deep
    }
}

/// Shallow/deep class of a stage; the bottleneck is always deep.
pub fn classify_stage(stage: Stage, cfg: &UNetConfig) -> Depth {
    match stage {
        Stage::Bottleneck => Depth::Deep,
        s => classify_scale(cfg.stage_scale(s)),
    }
}

/// Prior values for one image, independent of any tape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PriorBundle {
    /// Student embedding `z_s`, `[D_sem]`.
    pub sem: Option<Tensor>,
    /// `z_struct`, `[N, D]`.
    pub structural: Option<Tensor>,
    /// `z_deg`, `[D_deg]`.
    pub deg: Option<Tensor>,
}

/// Prior values bound to a tape.
#[derive(Clone, Copy, Debug, Default)]
pub struct PriorVars {
    pub sem: Option<Var>,
    pub structural: Option<Var>,
    pub deg: Option<Var>,
}

impl PriorBundle {
    pub fn bind(&self, tape: &Tape) -> PriorVars {
        PriorVars {
            sem: self.sem.as_ref().map(|t| tape.constant(t.clone())),
            structural: self.structural.as_ref().map(|t| tape.constant(t.clone())),
            deg: self.deg.as_ref().map(|t| tape.constant(t.clone())),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ResBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv2d,
    pub temb: Linear,
    pub norm2: GroupNorm,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
    pub out_ch: usize,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        temb_dim: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        ResBlock {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), in_ch, groups),
            conv1: Conv2d::same3(store, &format!("{name}.conv1"), in_ch, out_ch, rng),
            temb: Linear::new(store, &format!("{name}.temb"), temb_dim, out_ch, true, Init::Default, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), out_ch, groups),
            conv2: Conv2d::same3(store, &format!("{name}.conv2"), out_ch, out_ch, rng),
            skip: (in_ch != out_ch).then(|| Conv2d::new(store, &format!("{name}.skip"), in_ch, out_ch, 1, 1, 0, rng)),
            out_ch,
        }
    }

    pub fn forward(&self, s: &Session, x: Var, temb: Var) -> Result<Var> {
        let tape = s.tape();
        let h = self.conv1.forward(s, tape.silu(self.norm1.forward(s, x)?))?;
        // The time bias goes after the norm: with few channels per group a
        // per-channel offset before it would be normalised away.
        let t = self.temb.forward(s, tape.silu(temb))?;
        let h = tape.add(self.norm2.forward(s, h)?, tape.reshape(t, &[self.out_ch, 1, 1])?)?;
        let h = self.conv2.forward(s, tape.silu(h))?;
        let skip = match &self.skip {
            Some(c) => c.forward(s, x)?,
            None => x,
        };
        tape.add(h, skip)
    }
}

/// Optional per-stage prior hooks.
#[derive(Clone, Debug, Default)]
pub struct StageInjection {
    pub film: Option<StructuralAdapter>,
    pub cross: Option<AttentionProj>,
}

#[derive(Clone, Debug)]
pub struct StageBlock {
    pub stage: Stage,
    pub depth: Depth,
    pub block: ResBlock,
    pub inject: StageInjection,
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub cfg: UNetConfig,
    pub in_conv: Conv2d,
    pub time_hidden: Linear,
    pub time_out: Linear,
    pub modulator: Option<TimeModulator>,
    pub sem_proj: Option<SemanticProjection>,
    pub encoder: Vec<StageBlock>,
    pub downs: Vec<Conv2d>,
    pub mid: StageBlock,
    pub decoder: Vec<StageBlock>,
    pub ups: Vec<Conv2d>,
    pub out_norm: GroupNorm,
    pub out_conv: Conv2d,
}

/// Dimensions of the prior vectors the UNet consumes.
#[derive(Clone, Copy, Debug)]
pub struct PriorDims {
    pub sem_dim: usize,
    pub sem_tokens: usize,
    pub struct_dim: usize,
    pub deg_dim: usize,
    pub prompts: usize,
}

impl UNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &UNetConfig,
        dims: PriorDims,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.stages == 0 || cfg.attn_dim % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "unet needs stages >= 1 and attn_dim divisible by heads, got {} / {}",
                cfg.stages, cfg.heads
            )));
        }
        // Prior-specific weights draw from their own stream so the backbone
        // initialisation does not depend on which priors are enabled.
        let seed: u64 = rng.random();
        let rng = &mut crate::rng::stream(seed, 0);
        let extra = &mut crate::rng::stream(seed, 1);
        let temb_dim = 4 * cfg.base_channels;
        let d = cfg.stages;
        let in_conv = Conv2d::same3(store, "unet.in", 2 * cfg.image_channels, cfg.channels(0), rng);
        let time_hidden = Linear::new(store, "unet.time1", cfg.time_dim, temb_dim, true, Init::Default, rng);
        let time_out = Linear::new(store, "unet.time2", temb_dim, temb_dim, true, Init::Default, rng);
        let modulator = cfg
            .priors
            .deg
            .then(|| TimeModulator::new(store, "tmod", dims.deg_dim, dims.prompts, cfg.time_dim, extra));
        let sem_proj = cfg
            .priors
            .sem
            .then(|| SemanticProjection::new(store, "sem_proj", dims.sem_dim, dims.sem_tokens, cfg.attn_dim, extra));

        let make = |store: &mut ParamStore, stage: Stage, in_ch: usize, out_ch: usize, rng: &mut SeededRng, extra: &mut SeededRng| {
            let depth = classify_stage(stage, cfg);
            let name = format!("unet.{stage}");
            let block = ResBlock::new(store, &name, in_ch, out_ch, temb_dim, cfg.groups, rng);
            let film = (cfg.priors.structural && cfg.struct_placement.covers(depth))
                .then(|| StructuralAdapter::new(store, &format!("{name}.film"), dims.struct_dim, out_ch, extra));
            let cross = (cfg.priors.sem && cfg.sem_placement.covers(depth)).then(|| {
                AttentionProj::new(
                    store,
                    &format!("{name}.xattn"),
                    out_ch,
                    cfg.attn_dim,
                    cfg.attn_dim,
                    out_ch,
                    1,
                    Init::Zero,
                    extra,
                )
            });
            StageBlock {
                stage,
                depth,
                block,
                inject: StageInjection { film, cross },
            }
        };

        let mut encoder = Vec::with_capacity(d);
        let mut downs = Vec::with_capacity(d - 1);
        let mut ch = cfg.channels(0);
        for i in 0..d {
            let out = cfg.channels(i);
            encoder.push(make(store, Stage::Encoder(i), ch, out, rng, extra));
            ch = out;
            if i + 1 < d {
                downs.push(Conv2d::down3(store, &format!("unet.down{i}"), ch, ch, rng));
            }
        }
        let mid = make(store, Stage::Bottleneck, ch, ch, rng, extra);
        let mut decoder = Vec::with_capacity(d);
        let mut ups = Vec::with_capacity(d - 1);
        for j in 0..d {
            let skip_ch = cfg.channels(d - 1 - j);
            let out = skip_ch;
            decoder.push(make(store, Stage::Decoder(j), ch + skip_ch, out, rng, extra));
            ch = out;
            if j + 1 < d {
                ups.push(Conv2d::same3(store, &format!("unet.up{j}"), ch, ch, rng));
            }
        }
        let out_norm = GroupNorm::new(store, "unet.out_norm", ch, cfg.groups);
        let out_conv = Conv2d::same3(store, "unet.out", ch, cfg.image_channels, rng);
        Ok(UNet {
            cfg: cfg.clone(),
            in_conv,
            time_hidden,
            time_out,
            modulator,
            sem_proj,
            encoder,
            downs,
            mid,
            decoder,
            ups,
            out_norm,
            out_conv,
        })
    }

    fn inject(&self, s: &Session, sb: &StageBlock, h: Var, ctx: Option<Var>, z_struct: Option<Var>) -> Result<Var> {
        let tape = s.tape();
        let mut h = h;
        if let (Some(film), Some(z)) = (&sb.inject.film, z_struct) {
            h = structural_film(s, film, h, z).map_err(|e| stage_error(sb.stage, e))?;
        }
        if let (Some(proj), Some(c)) = (&sb.inject.cross, ctx) {
            let shape = tape.shape(h);
            let (ch, hw) = (shape[0], shape[1] * shape[2]);
            let x_bar = tape.transpose(tape.reshape(h, &[ch, hw])?)?;
            let o = deep_cross_attention(s, x_bar, c, proj).map_err(|e| stage_error(sb.stage, e))?;
            let o = tape.reshape(tape.transpose(o)?, &shape)?;
            h = tape.add(h, o)?;
        }
        Ok(h)
    }

    /// `ε̂_θ(x_t, μ, τ; priors)`. Any missing prior skips its injection.
    pub fn forward(&self, s: &Session, x_t: Var, mu: Var, tau: f64, priors: &PriorVars) -> Result<Var> {
        let tape = s.tape();
        let xs = tape.shape(x_t);
        if xs != tape.shape(mu) || xs.len() != 3 || xs[0] != self.cfg.image_channels {
            return Err(Error::InvalidShape {
                op: "unet input",
                msg: format!("x_t {xs:?}, mu {:?}", tape.shape(mu)),
            });
        }
        self.cfg.validate(xs[1], xs[2])?;

        let deg = match (&self.modulator, priors.deg) {
            (Some(_), Some(z)) => Some(z),
            _ => None,
        };
        let t_prime = match &self.modulator {
            Some(m) => modulate_time(s, tau, deg, m)?,
            None => tape.constant(crate::nn::sinusoidal_embedding(tau, self.cfg.time_dim)),
        };
        let temb = self.time_out.forward(s, tape.silu(self.time_hidden.forward(s, t_prime)?))?;
        let ctx = match (&self.sem_proj, priors.sem) {
            (Some(p), Some(z)) => Some(p.context(s, z)?),
            _ => None,
        };
        let z_struct = priors.structural;

        let mut h = self.in_conv.forward(s, tape.concat(&[x_t, mu])?)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for (i, sb) in self.encoder.iter().enumerate() {
            h = sb.block.forward(s, h, temb).map_err(|e| stage_error(sb.stage, e))?;
            h = self.inject(s, sb, h, ctx, z_struct)?;
            skips.push(h);
            if let Some(down) = self.downs.get(i) {
                h = down.forward(s, h)?;
            }
        }
        h = self.mid.block.forward(s, h, temb).map_err(|e| stage_error(Stage::Bottleneck, e))?;
        h = self.inject(s, &self.mid, h, ctx, z_struct)?;
        for (j, sb) in self.decoder.iter().enumerate() {
            let skip = skips.pop().expect("one skip per encoder stage");
            h = tape.concat(&[h, skip]).map_err(|e| stage_error(sb.stage, e))?;
            h = sb.block.forward(s, h, temb).map_err(|e| stage_error(sb.stage, e))?;
            h = self.inject(s, sb, h, ctx, z_struct)?;
            if let Some(up) = self.ups.get(j) {
                h = up.forward(s, tape.upsample2x(h)?)?;
            }
        }
        let h = tape.silu(self.out_norm.forward(s, h)?);
        self.out_conv.forward(s, h)
    }
}

fn stage_error(stage: Stage, e: Error) -> Error {
    match e {
        Error::InvalidShape { op, msg } => Error::InvalidShape {
            op,
            msg: format!("stage {stage}: {msg}"),
        },
        other => other,
    }
}

/// `mean |a − b|`.
pub fn l1_loss(tape: &Tape, a: Var, b: Var) -> Result<Var> {
    Ok(tape.mean(tape.abs(tape.sub(a, b)?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::grad_check_probes;

    pub(crate) fn tiny_cfg() -> UNetConfig {
        UNetConfig {
            base_channels: 4,
            max_channels: 8,
            time_dim: 16,
            attn_dim: 8,
            ..Default::default()
        }
    }

    pub(crate) fn dims() -> PriorDims {
        PriorDims {
            sem_dim: 6,
            sem_tokens: 3,
            struct_dim: 8,
            deg_dim: 5,
            prompts: 4,
        }
    }

    fn bundle(seed: u64) -> PriorBundle {
        let mut r = rng::stream(seed, 9);
        PriorBundle {
            sem: Some(Tensor::randn(&[6], 1.0, &mut r)),
            structural: Some(Tensor::randn(&[5, 8], 1.0, &mut r)),
            deg: Some(Tensor::randn(&[5], 1.0, &mut r)),
        }
    }

    #[test]
    fn partition_matches_the_depth_table() {
        let cfg = UNetConfig::default();
        use Depth::*;
        let want = [
            (Stage::Encoder(0), Shallow),
            (Stage::Encoder(1), Shallow),
            (Stage::Encoder(2), Shallow),
            (Stage::Encoder(3), Deep),
            (Stage::Bottleneck, Deep),
            (Stage::Decoder(0), Deep),
            (Stage::Decoder(1), Shallow),
            (Stage::Decoder(2), Shallow),
            (Stage::Decoder(3), Shallow),
        ];
        assert_eq!(cfg.all_stages().len(), want.len());
        for (stage, d) in want {
            assert_eq!(classify_stage(stage, &cfg), d, "{stage}");
        }
        assert_eq!(cfg.stage_scale(Stage::Decoder(2)), 2);
    }

    #[test]
    fn output_shape_matches_input() {
        for size in [8, 16, 32] {
            let mut store = ParamStore::new();
            let net = UNet::new(&mut store, &tiny_cfg(), dims(), &mut rng::stream(0, 0)).unwrap();
            let tape = Tape::new();
            let s = Session::new(&tape, &store, false);
            let mut r = rng::stream(1, 0);
            let x = tape.constant(Tensor::randn(&[3, size, size], 1.0, &mut r));
            let mu = tape.constant(Tensor::randn(&[3, size, size], 1.0, &mut r));
            let p = bundle(2).bind(&tape);
            let out = net.forward(&s, x, mu, 10.0, &p).unwrap();
            assert_eq!(tape.shape(out), vec![3, size, size]);
        }
    }

    #[test]
    fn bad_input_shapes_are_rejected() {
        let mut store = ParamStore::new();
        let net = UNet::new(&mut store, &tiny_cfg(), dims(), &mut rng::stream(0, 0)).unwrap();
        let tape = Tape::new();
        let s = Session::new(&tape, &store, false);
        let x = tape.constant(Tensor::zeros(&[3, 12, 12]));
        assert!(net.forward(&s, x, x, 1.0, &PriorVars::default()).is_err());
        let y = tape.constant(Tensor::zeros(&[3, 8, 8]));
        let mut p = bundle(1);
        p.structural = Some(Tensor::zeros(&[5, 3]));
        let err = net.forward(&s, y, y, 1.0, &p.bind(&tape)).unwrap_err();
        assert!(err.to_string().contains("stage enc0"), "{err}");
    }

    #[test]
    fn priors_are_a_no_op_at_init() {
        let mut store = ParamStore::new();
        let net = UNet::new(&mut store, &tiny_cfg(), dims(), &mut rng::stream(3, 0)).unwrap();
        let mut r = rng::stream(4, 0);
        let x = Tensor::randn(&[3, 16, 16], 1.0, &mut r);
        let mu = Tensor::randn(&[3, 16, 16], 1.0, &mut r);
        let run = |store: &ParamStore, p: &PriorBundle| {
            let tape = Tape::new();
            let s = Session::new(&tape, store, false);
            let out = net
                .forward(&s, tape.constant(x.clone()), tape.constant(mu.clone()), 42.0, &p.bind(&tape))
                .unwrap();
            tape.value(out)
        };
        let on = run(&store, &bundle(5));
        let off = run(&store, &PriorBundle::default());
        assert_eq!(on, off);

        // A nonzero FiLM/attention output layer breaks the tie.
        let fc2 = store.id("unet.enc0.film.fc2.w").unwrap();
        let w = Tensor::randn(store.get(fc2).shape(), 0.1, &mut r);
        store.set(fc2, w).unwrap();
        assert!(run(&store, &bundle(5)).max_abs_diff(&off) > 1e-8);
    }

    #[test]
    fn placement_controls_where_hooks_live() {
        let mut cfg = tiny_cfg();
        cfg.sem_placement = Placement::Shallow;
        cfg.struct_placement = Placement::Deep;
        let mut store = ParamStore::new();
        let net = UNet::new(&mut store, &cfg, dims(), &mut rng::stream(0, 0)).unwrap();
        for sb in net.encoder.iter().chain([&net.mid]).chain(&net.decoder) {
            assert_eq!(sb.inject.cross.is_some(), sb.depth == Depth::Shallow, "{}", sb.stage);
            assert_eq!(sb.inject.film.is_some(), sb.depth == Depth::Deep, "{}", sb.stage);
        }
        cfg.priors = PriorFlags::NONE;
        let mut store = ParamStore::new();
        let net = UNet::new(&mut store, &cfg, dims(), &mut rng::stream(0, 0)).unwrap();
        assert!(net.modulator.is_none() && net.sem_proj.is_none());
        assert!(store.iter().all(|(_, p)| p.name.starts_with("unet.")));
    }

    #[test]
    fn conditioned_forward_gradients() {
        let mut store = ParamStore::new();
        let net = UNet::new(&mut store, &tiny_cfg(), dims(), &mut rng::stream(6, 0)).unwrap();
        let mut r = rng::stream(7, 0);
        // Perturb every zero-initialised output layer so the check sees
        // nonzero attention, FiLM and prompt paths.
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.get(id).data().iter().all(|&v| v == 0.0) {
                let t = Tensor::randn(store.get(id).shape(), 0.2, &mut r);
                store.set(id, t).unwrap();
            }
        }
        let x = Tensor::randn(&[3, 8, 8], 1.0, &mut r);
        let mu = Tensor::randn(&[3, 8, 8], 1.0, &mut r);
        let weights = Tensor::randn(&[3, 8, 8], 1.0, &mut r);
        let p = bundle(8);
        let params: Vec<Tensor> = store.iter().map(|(_, p)| p.value.clone()).collect();
        let mut probes: Vec<(usize, usize)> = ["unet.mid.xattn.wq", "unet.mid.xattn.wv", "unet.enc1.film.fc1.w", "tmod.prompts", "tmod.wd.w"]
            .iter()
            .map(|n| (store.id(n).unwrap().index(), 1))
            .collect();
        while probes.len() < 32 {
            let pi = rand::Rng::random_range(&mut r, 0..params.len());
            let e = rand::Rng::random_range(&mut r, 0..params[pi].numel());
            probes.push((pi, e));
        }
        let report = grad_check_probes(
            |tape, vars| {
                let s = Session::prebound(tape, &store, vars);
                let out = net.forward(&s, tape.constant(x.clone()), tape.constant(mu.clone()), 17.0, &p.bind(tape))?;
                Ok(tape.sum(tape.mul(out, tape.constant(weights.clone()))?))
            },
            &params,
            1e-5,
            &probes,
        )
        .unwrap();
        let name = store.name(store.ids().nth(report.worst.0).unwrap());
        assert!(report.max_rel_error < 1e-4, "{report:?} {name}");
    }
}
