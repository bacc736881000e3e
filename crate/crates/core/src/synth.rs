//! Procedural paired data: layered shape scenes with exact depth and
//! segmentation, five parametric degradations, and an on-disk corpus.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::degradation::DegradationKind;
use crate::error::{Error, Result};
use crate::rng::{self, SeededRng};
use crate::structural::{compute_dog, grayscale, StructuralCues};
use crate::tensor::{read_tensor, write_tensor, Tensor};

const SUPERSAMPLE: usize = 4;
/// Depth of the background plane.
pub const BACKGROUND_DEPTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShapeKind {
    Disk { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    /// Rectangle filled with alternating bands along `angle`.
    Stripes {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        angle: f64,
        period: f64,
    },
}

impl ShapeKind {
    /// Point coverage in normalised `[0, 1]²` coordinates.
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            ShapeKind::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            ShapeKind::Rect { x0, y0, x1, y1 } | ShapeKind::Stripes { x0, y0, x1, y1, .. } => {
                (x0..=x1).contains(&x) && (y0..=y1).contains(&y)
            }
        }
    }

    /// Whether a covered point takes the shape's secondary colour.
    fn alternate(&self, x: f64, y: f64) -> bool {
        match *self {
            ShapeKind::Stripes { angle, period, .. } => {
                let u = x * angle.cos() + y * angle.sin();
                (u / period).rem_euclid(1.0) >= 0.5
            }
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub color: [f64; 3],
    pub alt_color: [f64; 3],
    pub depth: f64,
}

/// A rendered scene; shapes are listed in compositing order (far to near).
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Tensor,
    pub depth: Tensor,
    /// Integer labels: 0 for background, `k + 1` for `shapes[k]`.
    pub labels: Vec<usize>,
    pub shapes: Vec<Shape>,
    pub seed: u64,
}

impl Scene {
    /// Label map scaled to `[0, 1]` by the largest possible label.
    pub fn seg_map(&self) -> Tensor {
        let [_, h, w] = [0, self.depth.shape()[1], self.depth.shape()[2]];
        let top = self.shapes.len().max(1) as f64;
        Tensor::new(&[1, h, w], self.labels.iter().map(|&l| l as f64 / top).collect()).expect("label map shape")
    }
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)]
}

fn random_shape<R: Rng + ?Sized>(rng: &mut R) -> ShapeKind {
    let box_ = |rng: &mut R| {
        let (cx, cy) = (rng.random_range(0.1..0.9), rng.random_range(0.1..0.9));
        let (hw, hh) = (rng.random_range(0.1..0.3), rng.random_range(0.1..0.3));
        (cx - hw, cy - hh, cx + hw, cy + hh)
    };
    match rng.random_range(0..3) {
        0 => ShapeKind::Disk {
            cx: rng.random_range(0.1..0.9),
            cy: rng.random_range(0.1..0.9),
            r: rng.random_range(0.12..0.3),
        },
        1 => {
            let (x0, y0, x1, y1) = box_(rng);
            ShapeKind::Rect { x0, y0, x1, y1 }
        }
        _ => {
            let (x0, y0, x1, y1) = box_(rng);
            ShapeKind::Stripes {
                x0,
                y0,
                x1,
                y1,
                angle: rng.random_range(0.0..std::f64::consts::PI),
                period: rng.random_range(0.12..0.25),
            }
        }
    }
}

/// Composites 3–8 random shapes over a gradient background.
///
/// Colours are anti-aliased by 4×4 supersampling. Depth and labels follow
/// the front-most shape covering each pixel centre. Draws are repeated
/// until every shape owns at least one pixel.
pub fn render_scene(seed: u64, h: usize, w: usize) -> Result<Scene> {
    if !(8..=64).contains(&h) || !(8..=64).contains(&w) {
        return Err(Error::InvalidArgument(format!("scene size {h}x{w} outside 8..=64")));
    }
    let mut rng = rng::stream(seed, rng::streams::CORPUS);
    loop {
        let n = rng.random_range(3..=8);
        let top = random_color(&mut rng);
        let bottom = random_color(&mut rng);
        // Distinct depths, sorted far to near so compositing order is depth order.
        let mut depths: Vec<f64> = (0..n).map(|k| 0.9 - 0.8 * (k as f64 + rng.random::<f64>() * 0.9) / n as f64).collect();
        depths.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let shapes: Vec<Shape> = depths
            .into_iter()
            .map(|depth| Shape {
                kind: random_shape(&mut rng),
                color: random_color(&mut rng),
                alt_color: random_color(&mut rng),
                depth,
            })
            .collect();
        let scene = composite(&shapes, top, bottom, h, w, seed)?;
        let visible = (1..=n).all(|l| scene.labels.contains(&l));
        if visible {
            return Ok(scene);
        }
    }
}

fn composite(shapes: &[Shape], top: [f64; 3], bottom: [f64; 3], h: usize, w: usize, seed: u64) -> Result<Scene> {
    let mut image = vec![0.0; 3 * h * w];
    let mut depth = vec![BACKGROUND_DEPTH; h * w];
    let mut labels = vec![0usize; h * w];
    let ss = SUPERSAMPLE as f64;
    for py in 0..h {
        for px in 0..w {
            let mut acc = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = (px as f64 + (sx as f64 + 0.5) / ss) / w as f64;
                    let y = (py as f64 + (sy as f64 + 0.5) / ss) / h as f64;
                    let c = sample_color(shapes, top, bottom, x, y);
                    (0..3).for_each(|ch| acc[ch] += c[ch]);
                }
            }
            for ch in 0..3 {
                image[(ch * h + py) * w + px] = acc[ch] / (ss * ss);
            }
            let (cx, cy) = ((px as f64 + 0.5) / w as f64, (py as f64 + 0.5) / h as f64);
            if let Some(k) = shapes.iter().rposition(|s| s.kind.contains(cx, cy)) {
                depth[py * w + px] = shapes[k].depth;
                labels[py * w + px] = k + 1;
            }
        }
    }
    Ok(Scene {
        image: Tensor::new(&[3, h, w], image)?,
        depth: Tensor::new(&[1, h, w], depth)?,
        labels,
        shapes: shapes.to_vec(),
        seed,
    })
}

fn sample_color(shapes: &[Shape], top: [f64; 3], bottom: [f64; 3], x: f64, y: f64) -> [f64; 3] {
    match shapes.iter().rev().find(|s| s.kind.contains(x, y)) {
        Some(s) if s.kind.alternate(x, y) => s.alt_color,
        Some(s) => s.color,
        None => [0, 1, 2].map(|c| top[c] * (1.0 - y) + bottom[c] * y),
    }
}

/// Concrete parameters of one degradation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DegradeParams {
    /// `x + σ_n N(0, I)`.
    Noise { sigma: f64 },
    /// Bright oriented streaks of the given count, length (px) and
    /// intensity.
    Rain {
        streaks: usize,
        length: f64,
        angle: f64,
        intensity: f64,
    },
    /// `I = J t + A (1 − t)` with `t = exp(−β depth)`.
    Haze { beta: f64, airlight: f64 },
    /// `gain · x^γ` plus signal-dependent shot noise with `photons` scale.
    Lowlight { gamma: f64, gain: f64, photons: f64 },
    /// Linear motion blur of `length` taps along `angle`.
    Blur { length: usize, angle: f64 },
}

impl DegradeParams {
    pub fn kind(&self) -> DegradationKind {
        match self {
            DegradeParams::Noise { .. } => DegradationKind::Noise,
            DegradeParams::Rain { .. } => DegradationKind::Rain,
            DegradeParams::Haze { .. } => DegradationKind::Haze,
            DegradeParams::Lowlight { .. } => DegradationKind::Lowlight,
            DegradeParams::Blur { .. } => DegradationKind::Blur,
        }
    }

    /// Maps `severity ∈ (0, 1]` onto each model's parameter range; nuisance
    /// parameters (angles, airlight) come from `rng`.
    pub fn from_severity<R: Rng + ?Sized>(kind: DegradationKind, severity: f64, rng: &mut R) -> Result<Self> {
        if !(severity > 0.0 && severity <= 1.0) {
            return Err(Error::InvalidArgument(format!("severity must be in (0, 1], got {severity}")));
        }
        let s = severity;
        Ok(match kind {
            DegradationKind::Noise => DegradeParams::Noise { sigma: 0.05 + 0.15 * s },
            DegradationKind::Rain => DegradeParams::Rain {
                streaks: (4.0 + 16.0 * s).round() as usize,
                length: 4.0 + 4.0 * s,
                angle: rng.random_range(1.2..1.9),
                intensity: 0.2 + 0.3 * s,
            },
            DegradationKind::Haze => DegradeParams::Haze {
                beta: 0.15 + 0.5 * s,
                airlight: rng.random_range(0.7..0.9),
            },
            DegradationKind::Lowlight => DegradeParams::Lowlight {
                gamma: 1.05 + 0.35 * s,
                gain: 0.95 - 0.2 * s,
                photons: 800.0 - 500.0 * s,
            },
            DegradationKind::Blur => DegradeParams::Blur {
                length: 3 + 2 * (2.0 * s).round() as usize,
                angle: rng.random_range(0.0..std::f64::consts::PI),
            },
        })
    }
}

/// `J t + A (1 − t)` per pixel; `transmission` is `[1, H, W]`.
pub fn haze(x: &Tensor, transmission: &Tensor, airlight: f64) -> Result<Tensor> {
    let [c, h, w] = image_dims(x)?;
    if transmission.shape() != [1, h, w] {
        return Err(Error::shape("haze", x.shape(), transmission.shape()));
    }
    let t = transmission.data();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            let tv = t[i % (h * w)];
            j * tv + airlight * (1.0 - tv)
        })
        .collect();
    let _ = c;
    Tensor::new(x.shape(), data)
}

fn image_dims(x: &Tensor) -> Result<[usize; 3]> {
    match *x.shape() {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(Error::InvalidShape {
            op: "degrade",
            msg: format!("want [C, H, W], got {:?}", x.shape()),
        }),
    }
}

fn motion_kernel(length: usize, angle: f64) -> Vec<(isize, isize, f64)> {
    let half = (length as f64 - 1.0) / 2.0;
    let taps: Vec<(isize, isize)> = (0..length)
        .map(|k| {
            let u = k as f64 - half;
            ((u * angle.cos()).round() as isize, (u * angle.sin()).round() as isize)
        })
        .collect();
    let wgt = 1.0 / taps.len() as f64;
    taps.into_iter().map(|(dx, dy)| (dx, dy, wgt)).collect()
}

/// Applies `params` to a clean image; `depth` is only read by haze.
pub fn degrade<R: Rng + ?Sized>(x_gt: &Tensor, depth: &Tensor, params: &DegradeParams, rng: &mut R) -> Result<Tensor> {
    let [c, h, w] = image_dims(x_gt)?;
    let out = match *params {
        DegradeParams::Noise { sigma } => x_gt.map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal)),
        DegradeParams::Haze { beta, airlight } => {
            let t = depth.map(|d| (-beta * d).exp());
            haze(x_gt, &t, airlight)?
        }
        DegradeParams::Lowlight { gamma, gain, photons } => x_gt.map(|v| {
            let dark = gain * v.max(0.0).powf(gamma);
            dark + (dark / photons).sqrt() * rng.sample::<f64, _>(StandardNormal)
        }),
        DegradeParams::Blur { length, angle } => {
            let k = motion_kernel(length, angle);
            let src = x_gt.data();
            let mut data = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data[(ch * h + y) * w + x] = k
                            .iter()
                            .map(|&(dx, dy, wt)| {
                                let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                                let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                                wt * src[(ch * h + sy) * w + sx]
                            })
                            .sum();
                    }
                }
            }
            Tensor::new(x_gt.shape(), data)?
        }
        DegradeParams::Rain {
            streaks,
            length,
            angle,
            intensity,
        } => {
            let mut layer = vec![0.0; h * w];
            let (dx, dy) = (angle.cos(), angle.sin());
            for _ in 0..streaks {
                let (x0, y0) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
                let a = intensity * rng.random_range(0.7..1.0);
                let steps = (2.0 * length).ceil() as usize;
                for k in 0..=steps {
                    let u = k as f64 / 2.0;
                    let (x, y) = (x0 + u * dx, y0 + u * dy);
                    if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                        let i = y as usize * w + x as usize;
                        layer[i] = f64::max(layer[i], a);
                    }
                }
            }
            let mut out = x_gt.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += layer[i % (h * w)];
            }
            out
        }
    };
    Ok(out.clamp(0.0, 1.0))
}

/// Spec-level entry point: draws parameters for `kind` at `severity`.
pub fn degrade_kind<R: Rng + ?Sized>(
    x_gt: &Tensor,
    depth: &Tensor,
    kind: DegradationKind,
    severity: f64,
    rng: &mut R,
) -> Result<Tensor> {
    let params = DegradeParams::from_severity(kind, severity, rng)?;
    degrade(x_gt, depth, &params, rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegradationSample {
    pub x_lq: Tensor,
    pub x_gt: Tensor,
    pub kind: DegradationKind,
    pub severity: f64,
    pub cues: StructuralCues,
    pub seed: u64,
}

impl DegradationSample {
    pub fn label(&self) -> usize {
        self.kind.label()
    }
}

/// DoG cue of the degraded input, using the default σ pair.
pub fn dog_cue(x_lq: &Tensor, sigmas: (f64, f64)) -> Result<Tensor> {
    compute_dog(&grayscale(x_lq)?, sigmas.0, sigmas.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    /// Severity is drawn uniformly from this range.
    pub severity: (f64, f64),
    pub kinds: Vec<DegradationKind>,
    pub dog_sigmas: (f64, f64),
    /// Also write `gt.png` / `lq.png` next to the tensors.
    pub previews: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            per_class: 50,
            height: 24,
            width: 24,
            severity: (0.25, 1.0),
            kinds: DegradationKind::ALL.to_vec(),
            dog_sigmas: (1.0, 2.0),
            previews: false,
        }
    }
}

/// One sample from `(seed, kind)`: scene, degradation and cues.
pub fn make_sample(seed: u64, kind: DegradationKind, cfg: &CorpusConfig) -> Result<DegradationSample> {
    let scene = render_scene(seed, cfg.height, cfg.width)?;
    let mut rng: SeededRng = rng::stream(seed, rng::streams::CORPUS + 100);
    let (lo, hi) = cfg.severity;
    let severity = if hi > lo { rng.random_range(lo..=hi) } else { hi };
    let x_lq = degrade_kind(&scene.image, &scene.depth, kind, severity, &mut rng)?;
    let dog = dog_cue(&x_lq, cfg.dog_sigmas)?;
    Ok(DegradationSample {
        cues: StructuralCues {
            depth: scene.depth.clone(),
            seg: scene.seg_map(),
            dog,
        },
        x_gt: scene.image,
        x_lq,
        kind,
        severity,
        seed,
    })
}

/// Class sequence of length `per_class · kinds`, arranged in blocks that
/// each hold every class once in shuffled order.
pub fn balanced_order<R: Rng + ?Sized>(kinds: &[DegradationKind], per_class: usize, rng: &mut R) -> Vec<DegradationKind> {
    let mut out = Vec::with_capacity(kinds.len() * per_class);
    for _ in 0..per_class {
        let mut block = kinds.to_vec();
        block.shuffle(rng);
        out.extend(block);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub label: usize,
    pub kind: DegradationKind,
    pub severity: f64,
    pub seed: u64,
}

pub const MANIFEST_FILE: &str = "manifest.csv";

/// Writes a balanced corpus under `out` and returns its manifest rows.
pub fn build_corpus(cfg: &CorpusConfig, seed: u64, out: &Path) -> Result<Vec<ManifestRow>> {
    if cfg.kinds.is_empty() || cfg.per_class == 0 {
        return Err(Error::InvalidArgument("corpus needs at least one class and sample".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut order_rng = rng::stream(seed, rng::streams::SHUFFLE);
    let order = balanced_order(&cfg.kinds, cfg.per_class, &mut order_rng);
    let mut rows = Vec::with_capacity(order.len());
    for (i, kind) in order.into_iter().enumerate() {
        let sample_seed = rng::derive_seed(seed, i as u64);
        let sample = make_sample(sample_seed, kind, cfg)?;
        let rel = format!("samples/{i:05}");
        write_sample(&out.join(&rel), &sample, cfg.previews)?;
        rows.push(ManifestRow {
            path: rel,
            label: kind.label(),
            kind,
            severity: sample.severity,
            seed: sample_seed,
        });
    }
    write_manifest(&out.join(MANIFEST_FILE), &rows)?;
    Ok(rows)
}

pub fn write_sample(dir: &Path, s: &DegradationSample, previews: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_tensor(dir.join("gt.t"), &s.x_gt)?;
    write_tensor(dir.join("lq.t"), &s.x_lq)?;
    write_tensor(dir.join("depth.t"), &s.cues.depth)?;
    write_tensor(dir.join("seg.t"), &s.cues.seg)?;
    write_tensor(dir.join("dog.t"), &s.cues.dog)?;
    if previews {
        save_png(&dir.join("gt.png"), &s.x_gt)?;
        save_png(&dir.join("lq.png"), &s.x_lq)?;
    }
    Ok(())
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["path", "label", "kind", "severity", "seed"] {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("unexpected manifest header {headers:?}"),
        });
    }
    let rows: Vec<ManifestRow> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    for row in &rows {
        if row.kind.label() != row.label {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("row {} has label {} but kind {}", row.path, row.label, row.kind),
            });
        }
    }
    Ok(rows)
}

/// Loads one manifest row relative to the manifest's directory.
pub fn load_sample(root: &Path, row: &ManifestRow) -> Result<DegradationSample> {
    let dir: PathBuf = root.join(&row.path);
    Ok(DegradationSample {
        x_gt: read_tensor(dir.join("gt.t"))?,
        x_lq: read_tensor(dir.join("lq.t"))?,
        cues: StructuralCues {
            depth: read_tensor(dir.join("depth.t"))?,
            seg: read_tensor(dir.join("seg.t"))?,
            dog: read_tensor(dir.join("dog.t"))?,
        },
        kind: row.kind,
        severity: row.severity,
        seed: row.seed,
    })
}

/// Loads every sample listed in a manifest file.
pub fn load_corpus(manifest: &Path) -> Result<Vec<DegradationSample>> {
    let root = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?.iter().map(|r| load_sample(root, r)).collect()
}

/// 8-bit PNG of a 1- or 3-channel image in `[0, 1]`.
pub fn save_png(path: &Path, x: &Tensor) -> Result<()> {
    let [c, h, w] = image_dims(x)?;
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut buf = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        for ch in 0..3 {
            let src = if c == 3 { ch } else { 0 };
            buf.push(q(x.data()[src * h * w + i]));
        }
    }
    image::save_buffer(path, &buf, w as u32, h as u32, image::ExtendedColorType::Rgb8).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Reads an 8-bit PNG into a `[3, H, W]` tensor in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * h * w + i] = px.0[ch] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;
    use std::collections::BTreeSet;

    #[test]
    fn scenes_are_reproducible_and_fully_labelled() {
        for seed in 0..20 {
            let a = render_scene(seed, 24, 20).unwrap();
            assert_eq!(a, render_scene(seed, 24, 20).unwrap());
            let distinct: BTreeSet<_> = a.labels.iter().copied().collect();
            assert!((3..=8).contains(&a.shapes.len()));
            assert_eq!(distinct.len(), a.shapes.len() + 1, "seed {seed}");
            assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(render_scene(0, 4, 16).is_err());
    }

    #[test]
    fn depth_follows_compositing_order() {
        // Oracle: re-render each pixel centre by walking shapes front to back.
        for seed in 0..10 {
            let s = render_scene(seed, 16, 16).unwrap();
            for w in s.shapes.windows(2) {
                assert!(w[0].depth > w[1].depth);
            }
            for py in 0..16 {
                for px in 0..16 {
                    let (x, y) = ((px as f64 + 0.5) / 16.0, (py as f64 + 0.5) / 16.0);
                    let covering: Vec<usize> = (0..s.shapes.len()).filter(|&k| s.shapes[k].kind.contains(x, y)).collect();
                    let want = covering.iter().map(|&k| s.shapes[k].depth).fold(BACKGROUND_DEPTH, f64::min);
                    assert_eq!(s.depth.at(&[0, py, px]), want);
                    if covering.len() > 1 {
                        let front = *covering.last().unwrap();
                        assert_eq!(s.labels[py * 16 + px], front + 1);
                    }
                }
            }
        }
    }

    #[test]
    fn haze_limits_and_inversion() {
        let mut r = rng::stream(1, 0);
        let x = Tensor::rand_uniform(&[3, 8, 8], 0.0, 1.0, &mut r);
        assert_eq!(haze(&x, &Tensor::ones(&[1, 8, 8]), 0.8).unwrap(), x);
        assert_eq!(haze(&x, &Tensor::zeros(&[1, 8, 8]), 0.8).unwrap(), Tensor::full(&[3, 8, 8], 0.8));

        let depth = Tensor::rand_uniform(&[1, 8, 8], 0.1, 1.0, &mut r);
        let params = DegradeParams::Haze { beta: 1.5, airlight: 0.9 };
        let lq = degrade(&x, &depth, &params, &mut r).unwrap();
        let t = depth.map(|d| (-1.5 * d).exp());
        for i in 0..3 * 64 {
            let tv = t.data()[i % 64];
            if tv > 0.1 {
                let j = (lq.data()[i] - 0.9 * (1.0 - tv)) / tv;
                assert!((j - x.data()[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn noise_level_matches_sigma() {
        let x = Tensor::full(&[1, 100, 100], 0.5);
        let d = Tensor::ones(&[1, 100, 100]);
        let lq = degrade(&x, &d, &DegradeParams::Noise { sigma: 0.1 }, &mut rng::stream(2, 0)).unwrap();
        let diff = lq.sub(&x).unwrap();
        let mean = diff.mean();
        let var = diff.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (diff.numel() - 1) as f64;
        assert!((var.sqrt() - 0.1).abs() < 0.005, "std {}", var.sqrt());
    }

    #[test]
    fn every_kind_degrades_and_stays_in_range() {
        let scene = render_scene(3, 24, 24).unwrap();
        for kind in DegradationKind::ALL {
            for sev in [0.25, 1.0] {
                let mut r = rng::stream(4, kind.label() as u64);
                let lq = degrade_kind(&scene.image, &scene.depth, kind, sev, &mut r).unwrap();
                assert!(lq.data().iter().all(|v| (0.0..=1.0).contains(v)));
                let p = psnr(&lq, &scene.image, 1.0).unwrap();
                assert!(p.is_finite(), "{kind} at {sev}");
            }
        }
        let mut r = rng::stream(0, 0);
        assert!(degrade_kind(&scene.image, &scene.depth, DegradationKind::Rain, 0.0, &mut r).is_err());
    }

    #[test]
    fn identity_baseline_sits_in_target_band() {
        let cfg = CorpusConfig::default();
        for kind in DegradationKind::ALL {
            let mean = (0..40)
                .map(|seed| {
                    let s = make_sample(seed, kind, &cfg).unwrap();
                    psnr(&s.x_lq, &s.x_gt, 1.0).unwrap()
                })
                .sum::<f64>()
                / 40.0;
            assert!((15.0..=25.0).contains(&mean), "{kind}: {mean:.2} dB");
        }
    }

    #[test]
    fn balanced_blocks() {
        for seed in 0..20 {
            let order = balanced_order(&DegradationKind::ALL, 10, &mut rng::stream(seed, 0));
            assert_eq!(order.len(), 50);
            for k in DegradationKind::ALL {
                assert_eq!(order.iter().filter(|&&o| o == k).count(), 10);
            }
            // Any five consecutive rows hold at least two distinct labels.
            for w in order.windows(5) {
                let set: BTreeSet<_> = w.iter().collect();
                assert!(set.len() >= 2);
            }
        }
    }

    #[test]
    fn corpus_roundtrip_and_determinism() {
        let cfg = CorpusConfig {
            per_class: 2,
            height: 16,
            width: 16,
            previews: true,
            ..Default::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let rows = build_corpus(&cfg, 11, a.path()).unwrap();
        build_corpus(&cfg, 11, b.path()).unwrap();
        assert_eq!(rows.len(), 10);
        let read = read_manifest(&a.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(read, rows);
        for row in &rows {
            for f in ["gt.t", "lq.t", "depth.t", "seg.t", "dog.t"] {
                let pa = fs::read(a.path().join(&row.path).join(f)).unwrap();
                let pb = fs::read(b.path().join(&row.path).join(f)).unwrap();
                assert_eq!(pa, pb);
            }
            let s = load_sample(a.path(), row).unwrap();
            assert_eq!(s.cues.dog, dog_cue(&s.x_lq, (1.0, 2.0)).unwrap());
            assert!(a.path().join(&row.path).join("lq.png").exists());
        }
        let header = fs::read_to_string(a.path().join(MANIFEST_FILE)).unwrap();
        assert!(header.starts_with("path,label,kind,severity,seed\n"));
    }

    #[test]
    fn png_roundtrip_is_8bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let x = Tensor::rand_uniform(&[3, 5, 7], 0.0, 1.0, &mut rng::stream(0, 0)).map(|v| (v * 255.0).round() / 255.0);
        let p = dir.path().join("x.png");
        save_png(&p, &x).unwrap();
        assert!(load_png(&p).unwrap().max_abs_diff(&x) < 1e-12);
    }
}
