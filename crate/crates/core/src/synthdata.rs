//! Synthetic ultrasound-like sequences with exact ground-truth motion.
//!
//! A static speckle texture (Gaussian-blurred random scatterers, envelope
//! detected) modulated by a U-shaped "myocardium" band is pushed through an
//! analytic, invertible warp anchored at an apex point:
//!
//! ```text
//! u, v   = coordinates along / across the apex–base axis, relative to the apex
//! u'     = u · (1 − a·φ)
//! v'     = v · (1 − κ·a·φ · u² / (u² + ℓ²))
//! p'     = apex + R(θ·φ) · (u'·axis + v'·normal) + t·φ
//! ```
//!
//! `φ(s)` rises from 0 at frame 0 to exactly 1 at frame `round(0.4·(S−1))`
//! and falls back to 0 at the last frame (half-cosine ramps), so one sequence
//! is one simulated contraction cycle. Frame `s` is the texture sampled at the
//! inverse warp of each pixel; ground-truth tracks are the forward warp of the
//! queries, exact to rounding.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::container::{read_scene, write_json, write_scene, Scene};
use crate::error::{Error, Result};
use crate::sequence::{sample_plane, ImageSequence, Point, QuerySet, Resolution, TrajectorySet, MIN_SIDE};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA: &str = "echotrack.benchmark/1";
const SCENES_DIR: &str = "scenes";

/// Apex–base deformation driven by the cyclic phase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Motion {
    Cardiac {
        /// Longitudinal shortening at peak phase, in `[0, 0.5)`.
        amplitude: f64,
        /// Transverse contraction relative to the longitudinal one, `[0, 1]`.
        kappa: f64,
        /// Rotation about the apex at peak phase, radians.
        rotation: f64,
        /// Translation at peak phase, pixels.
        translation: [f64; 2],
    },
    /// Uniform drift of `velocity` pixels per frame (no cycle).
    Translation { velocity: [f64; 2] },
}

/// Where query points are placed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Along the midline of the U-shaped band, ordered base → apex → base.
    Band,
    /// On a straight segment of the apex–base axis, ordered away from the apex.
    Axis,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub resolution: Resolution,
    pub frames: usize,
    pub points: usize,
    /// 1/e autocorrelation length of the speckle intensity, pixels.
    pub grain: f64,
    /// Expected scatterers per pixel.
    pub density: f64,
    pub motion: Motion,
    pub layout: Layout,
    /// Standard deviation of the per-frame multiplicative noise.
    pub speckle_noise: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            resolution: Resolution::new(64, 64),
            frames: 16,
            points: 8,
            grain: 2.0,
            density: 4.0,
            motion: Motion::Cardiac {
                amplitude: 0.2,
                kappa: 0.5,
                rotation: 0.0,
                translation: [0.0, 0.0],
            },
            layout: Layout::Band,
            speckle_noise: 0.05,
            noise: 0.02,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let r = self.resolution;
        if r.height < MIN_SIDE || r.width < MIN_SIDE {
            return Err(Error::invalid(format!("scene must be at least {MIN_SIDE}x{MIN_SIDE}")));
        }
        if self.frames < 2 || self.points == 0 {
            return Err(Error::invalid("a scene needs at least 2 frames and 1 point"));
        }
        let max_grain = r.height.min(r.width) as f64 / 4.0;
        if !(0.5..=max_grain).contains(&self.grain) {
            return Err(Error::invalid(format!("grain {} outside [0.5, {max_grain}]", self.grain)));
        }
        if !(self.density > 0.0 && self.density <= 1e3) {
            return Err(Error::invalid(format!("density {} outside (0, 1000]", self.density)));
        }
        for (name, v) in [("noise", self.noise), ("speckle_noise", self.speckle_noise)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} {v} outside [0, 1]")));
            }
        }
        match self.motion {
            Motion::Cardiac {
                amplitude,
                kappa,
                rotation,
                translation,
            } => {
                if !(0.0..0.5).contains(&amplitude) {
                    return Err(Error::invalid(format!("amplitude {amplitude} outside [0, 0.5)")));
                }
                if !(0.0..=1.0).contains(&kappa) {
                    return Err(Error::invalid(format!("kappa {kappa} outside [0, 1]")));
                }
                if !(rotation.abs() <= PI / 4.0) || !translation.iter().all(|t| t.is_finite()) {
                    return Err(Error::invalid("rotation must be within ±π/4 and translation finite"));
                }
            }
            Motion::Translation { velocity } => {
                if !velocity.iter().all(|v| v.is_finite()) {
                    return Err(Error::invalid("velocity must be finite"));
                }
            }
        }
        Ok(())
    }
}

/// Frame of maximal contraction.
pub fn peak_frame(frames: usize) -> usize {
    let s = (0.4 * (frames.saturating_sub(1)) as f64).round() as usize;
    s.clamp(1, frames.saturating_sub(1).max(1))
}

/// Contraction phase in `[0, 1]` at frame `s`.
pub fn phase(s: usize, frames: usize) -> f64 {
    let peak = peak_frame(frames);
    let last = frames.saturating_sub(1);
    if s <= peak {
        0.5 * (1.0 - (PI * s as f64 / peak as f64).cos())
    } else if peak == last {
        1.0
    } else {
        0.5 * (1.0 + (PI * (s - peak) as f64 / (last - peak) as f64).cos())
    }
}

/// Scene geometry shared by the warp and the tissue layout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    pub apex: Point,
    /// Transverse falloff length ℓ of the contraction.
    pub falloff: f64,
    /// Midline of the band: a half ellipse centered at `center` below the
    /// apex, opening downwards.
    pub center: Point,
    pub half_width: f64,
    pub half_height: f64,
    pub thickness: f64,
}

impl Geometry {
    pub fn for_resolution(r: Resolution) -> Self {
        let (h, w) = (r.height as f64, r.width as f64);
        let apex = Point::new(0.5 * (w - 1.0), 0.08 * h);
        let center = Point::new(apex.x, 0.86 * h);
        Self {
            apex,
            falloff: 0.25 * h,
            center,
            half_width: 0.3 * w,
            half_height: center.y - apex.y - 0.06 * h,
            thickness: 0.1 * w.min(h),
        }
    }

    /// Midline point at parameter `t ∈ [0, 1]` (0 = left base, 1 = right base).
    pub fn midline(&self, t: f64) -> Point {
        let theta = PI * (1.0 - t);
        Point::new(
            self.center.x + self.half_width * theta.cos(),
            self.center.y - self.half_height * theta.sin(),
        )
    }

    /// Signed distance-like band coordinate: 0 on the midline, ±1 at the
    /// band edges, negative inside the cavity.
    fn band_offset(&self, p: Point) -> f64 {
        let dx = (p.x - self.center.x) / self.half_width;
        let dy = (p.y - self.center.y).min(0.0) / self.half_height;
        let r = (dx * dx + dy * dy).sqrt();
        let scale = self.half_width.min(self.half_height);
        (r - 1.0) * scale / (0.5 * self.thickness)
    }
}

/// The analytic deformation of one scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Warp {
    pub motion: Motion,
    pub geometry: Geometry,
    pub frames: usize,
}

impl Warp {
    /// Position at frame `s` of the material point at `p` on frame 0.
    pub fn forward(&self, p: Point, s: usize) -> Point {
        let phi = phase(s, self.frames);
        match self.motion {
            Motion::Translation { velocity } => {
                Point::new(p.x + velocity[0] * s as f64, p.y + velocity[1] * s as f64)
            }
            Motion::Cardiac {
                amplitude,
                kappa,
                rotation,
                translation,
            } => {
                let a = self.geometry.apex;
                let (u, v) = (p.y - a.y, p.x - a.x);
                let l2 = self.geometry.falloff * self.geometry.falloff;
                let u2 = u * (1.0 - amplitude * phi);
                let v2 = v * (1.0 - kappa * amplitude * phi * u * u / (u * u + l2));
                let (sin, cos) = (rotation * phi).sin_cos();
                Point::new(
                    a.x + cos * v2 - sin * u2 + translation[0] * phi,
                    a.y + sin * v2 + cos * u2 + translation[1] * phi,
                )
            }
        }
    }

    /// Frame-0 position of the material point found at `q` on frame `s`.
    pub fn inverse(&self, q: Point, s: usize) -> Point {
        let phi = phase(s, self.frames);
        match self.motion {
            Motion::Translation { velocity } => {
                Point::new(q.x - velocity[0] * s as f64, q.y - velocity[1] * s as f64)
            }
            Motion::Cardiac {
                amplitude,
                kappa,
                rotation,
                translation,
            } => {
                let a = self.geometry.apex;
                let (x, y) = (q.x - a.x - translation[0] * phi, q.y - a.y - translation[1] * phi);
                let (sin, cos) = (rotation * phi).sin_cos();
                let v2 = cos * x + sin * y;
                let u2 = -sin * x + cos * y;
                let u = u2 / (1.0 - amplitude * phi);
                let l2 = self.geometry.falloff * self.geometry.falloff;
                let v = v2 / (1.0 - kappa * amplitude * phi * u * u / (u * u + l2));
                Point::new(a.x + v, a.y + u)
            }
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = k.iter().sum();
    k.into_iter().map(|v| v / norm).collect()
}

/// Separable "valid" blur: the output is `(h - 2r) × (w - 2r)`.
fn blur_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let r = k.len() / 2;
    let (oh, ow) = (h - 2 * r, w - 2 * r);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Speckle envelope on an `h × w` grid, normalized to unit mean. The
/// intensity autocorrelation falls to 1/e at a lag of `grain` pixels.
pub fn speckle_texture(h: usize, w: usize, grain: f64, density: f64, rng: &mut impl Rng) -> Vec<f64> {
    // Blurring white complex noise with σ gives a field correlation of
    // exp(−τ²/4σ²) and an intensity correlation of exp(−τ²/2σ²).
    let sigma = grain / 2f64.sqrt();
    let k = gaussian_kernel(sigma);
    let r = k.len() / 2;
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let counts = Poisson::new(density).expect("positive density");
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut re = vec![0.0; ph * pw];
    let mut im = vec![0.0; ph * pw];
    for i in 0..ph * pw {
        let n: f64 = counts.sample(rng);
        let s = n.sqrt();
        re[i] = s * normal.sample(rng);
        im[i] = s * normal.sample(rng);
    }
    let (re, _, _) = blur_valid(&re, ph, pw, &k);
    let (im, _, _) = blur_valid(&im, ph, pw, &k);
    let env: Vec<f64> = re.iter().zip(&im).map(|(a, b)| a.hypot(*b)).collect();
    let mean = env.iter().sum::<f64>() / env.len() as f64;
    env.into_iter().map(|v| v / mean.max(1e-12)).collect()
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Echogenicity of the reference anatomy: bright band, dark cavity, dim
/// surroundings.
fn reflectivity(g: &Geometry, p: Point) -> f64 {
    let d = g.band_offset(p);
    let band = 1.0 - smoothstep(0.8, 1.3, d.abs());
    let cavity = 1.0 - smoothstep(-1.6, -0.9, d);
    let tissue = 0.22 + 0.53 * band;
    tissue * (1.0 - 0.75 * cavity * (1.0 - band))
}

fn place_queries(cfg: &SceneConfig, g: &Geometry) -> Vec<Point> {
    let n = cfg.points;
    let r = cfg.resolution;
    let clamp = |p: Point| {
        Point::new(
            p.x.clamp(0.0, r.width as f64 - 1.0),
            p.y.clamp(0.0, r.height as f64 - 1.0),
        )
    };
    (0..n)
        .map(|i| {
            let t = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
            clamp(match cfg.layout {
                Layout::Band => g.midline(0.04 + 0.92 * t),
                Layout::Axis => {
                    let u = (0.12 + 0.6 * t) * r.height as f64;
                    Point::new(g.apex.x, g.apex.y + u)
                }
            })
        })
        .collect()
}

/// Generates frames, queries and exact ground-truth tracks.
pub fn generate_scene(cfg: &SceneConfig) -> Result<(ImageSequence, QuerySet, TrajectorySet)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w, frames) = (cfg.resolution.height, cfg.resolution.width, cfg.frames);
    let geometry = Geometry::for_resolution(cfg.resolution);
    let warp = Warp {
        motion: cfg.motion,
        geometry,
        frames,
    };

    // The texture extends past the frame so inverse-warped samples stay on it.
    let margin = (h.max(w) / 4).max(4);
    let (th, tw) = (h + 2 * margin, w + 2 * margin);
    let speckle = speckle_texture(th, tw, cfg.grain, cfg.density, &mut rng);
    let texture: Vec<f64> = (0..th * tw)
        .map(|i| {
            let p = Point::new((i % tw) as f64 - margin as f64, (i / tw) as f64 - margin as f64);
            0.45 * reflectivity(&geometry, p) * speckle[i]
        })
        .collect();

    let mult = Normal::new(1.0, cfg.speckle_noise.max(1e-300)).expect("finite std");
    let add = Normal::new(0.0, cfg.noise.max(1e-300)).expect("finite std");
    let mut data = Vec::with_capacity(frames * h * w);
    for s in 0..frames {
        for y in 0..h {
            for x in 0..w {
                let p = warp.inverse(Point::new(x as f64, y as f64), s);
                let mut v = sample_plane(&texture, th, tw, p.x + margin as f64, p.y + margin as f64);
                if cfg.speckle_noise > 0.0 {
                    v *= mult.sample(&mut rng);
                }
                if cfg.noise > 0.0 {
                    v += add.sample(&mut rng);
                }
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    let seq = ImageSequence::new(data, frames, cfg.resolution)?;
    let queries = QuerySet::new(place_queries(cfg, &geometry), cfg.resolution)?;
    let tracks: Vec<Vec<Point>> = queries
        .points()
        .iter()
        .map(|&q| {
            std::iter::once(q)
                .chain((1..frames).map(|s| warp.forward(q, s)))
                .collect()
        })
        .collect();
    Ok((seq, queries, TrajectorySet::from_tracks(&tracks)?))
}

/// The warp a [`SceneConfig`] describes.
pub fn scene_warp(cfg: &SceneConfig) -> Warp {
    Warp {
        motion: cfg.motion,
        geometry: Geometry::for_resolution(cfg.resolution),
        frames: cfg.frames,
    }
}

/// Parameter ranges a benchmark draws its scenes from (inclusive).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub scenes: usize,
    pub seed: u64,
    pub resolution: Resolution,
    pub frames: [usize; 2],
    pub points: [usize; 2],
    pub amplitude: [f64; 2],
    pub kappa: [f64; 2],
    /// Largest |rotation| at peak, radians.
    pub rotation: f64,
    /// Largest |translation| per axis at peak, pixels.
    pub translation: f64,
    pub grain: [f64; 2],
    pub density: f64,
    pub speckle_noise: [f64; 2],
    pub noise: [f64; 2],
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            scenes: 100,
            seed: 0,
            resolution: Resolution::new(64, 64),
            frames: [16, 16],
            points: [8, 8],
            amplitude: [0.1, 0.3],
            kappa: [0.3, 0.8],
            rotation: 0.08,
            translation: 3.0,
            grain: [1.6, 2.4],
            density: 4.0,
            speckle_noise: [0.02, 0.08],
            noise: [0.01, 0.03],
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 {
            return Err(Error::invalid("a benchmark needs at least one scene"));
        }
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if self.frames[0] > self.frames[1] || self.points[0] > self.points[1] {
            return Err(Error::invalid("frame and point ranges must be ordered"));
        }
        for (name, r) in [
            ("amplitude", self.amplitude),
            ("kappa", self.kappa),
            ("grain", self.grain),
            ("speckle_noise", self.speckle_noise),
            ("noise", self.noise),
        ] {
            if !ordered(r) {
                return Err(Error::invalid(format!("{name} range {r:?} is not ordered")));
            }
        }
        if !(self.rotation.is_finite() && self.translation.is_finite()) {
            return Err(Error::invalid("rotation and translation must be finite"));
        }
        // Both ends of every range must give valid scenes.
        for corner in [0, 1] {
            self.scene_config(
                self.frames[corner],
                self.points[corner],
                self.amplitude[corner],
                self.kappa[corner],
                self.rotation,
                [self.translation; 2],
                self.grain[corner],
                self.speckle_noise[corner],
                self.noise[corner],
                0,
            )
            .validate()?;
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn scene_config(
        &self,
        frames: usize,
        points: usize,
        amplitude: f64,
        kappa: f64,
        rotation: f64,
        translation: [f64; 2],
        grain: f64,
        speckle_noise: f64,
        noise: f64,
        seed: u64,
    ) -> SceneConfig {
        SceneConfig {
            resolution: self.resolution,
            frames,
            points,
            grain,
            density: self.density,
            motion: Motion::Cardiac {
                amplitude,
                kappa,
                rotation,
                translation,
            },
            layout: Layout::Band,
            speckle_noise,
            noise,
            seed,
        }
    }

    /// Configuration of scene `index`, drawn deterministically from the seed.
    pub fn draw(&self, index: usize) -> SceneConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64 + 1);
        let mut uni = |r: [f64; 2]| if r[0] == r[1] { r[0] } else { rng.random_range(r[0]..=r[1]) };
        let amplitude = uni(self.amplitude);
        let kappa = uni(self.kappa);
        let rotation = uni([-self.rotation.abs(), self.rotation.abs()]);
        let translation = [
            uni([-self.translation.abs(), self.translation.abs()]),
            uni([-self.translation.abs(), self.translation.abs()]),
        ];
        let grain = uni(self.grain);
        let speckle_noise = uni(self.speckle_noise);
        let noise = uni(self.noise);
        let frames = rng.random_range(self.frames[0]..=self.frames[1]);
        let points = rng.random_range(self.points[0]..=self.points[1]);
        let seed = rng.random();
        self.scene_config(
            frames,
            points,
            amplitude,
            kappa,
            rotation,
            translation,
            grain,
            speckle_noise,
            noise,
            seed,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?} (train, val, test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub id: String,
    pub split: Split,
    pub config: SceneConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkManifest {
    pub schema: String,
    pub config: BenchmarkConfig,
    pub scenes: Vec<SceneEntry>,
}

impl BenchmarkManifest {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let m: BenchmarkManifest =
            serde_json::from_slice(bytes).map_err(|e| Error::malformed("benchmark manifest", e.to_string()))?;
        if m.schema != MANIFEST_SCHEMA {
            return Err(Error::malformed("benchmark manifest", format!("schema {:?}", m.schema)));
        }
        let mut ids = std::collections::BTreeSet::new();
        for e in &m.scenes {
            let plain = !e.id.is_empty()
                && e.id.len() <= 64
                && e.id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-');
            if !plain || !ids.insert(e.id.as_str()) {
                return Err(Error::malformed("benchmark manifest", format!("bad or duplicate scene id {:?}", e.id)));
            }
        }
        Ok(m)
    }

    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.scenes
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.id.as_str())
            .collect()
    }
}

/// Split sizes for `n` scenes: 80/10/10, rounding the smaller splits.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let val = (n as f64 * 0.1).round() as usize;
    let test = (n as f64 * 0.1).round() as usize;
    let train = n.saturating_sub(val + test);
    (train, val, n - train - val)
}

fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let (train, val, _) = split_sizes(n);
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

fn scene_dir(root: &Path, id: &str) -> PathBuf {
    root.join(SCENES_DIR).join(id)
}

/// Writes `cfg.scenes` scenes and a manifest into `dir`.
pub fn make_benchmark(dir: &Path, cfg: &BenchmarkConfig, force: bool) -> Result<BenchmarkManifest> {
    cfg.validate()?;
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::DirectoryNotEmpty(dir.to_path_buf()));
        }
        let scenes = dir.join(SCENES_DIR);
        if scenes.exists() {
            std::fs::remove_dir_all(&scenes).map_err(|e| Error::io(&scenes, e))?;
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let splits = assign_splits(cfg.scenes, cfg.seed ^ 0x5eed_5eed);
    let mut entries = Vec::with_capacity(cfg.scenes);
    for (i, split) in splits.into_iter().enumerate() {
        let id = format!("scene_{i:04}");
        let config = cfg.draw(i);
        let (sequence, queries, tracks) = generate_scene(&config)?;
        let scene = Scene {
            sequence,
            queries: Some(queries),
            tracks: Some(tracks),
            info: Some(serde_json::to_value(&config)?),
        };
        write_scene(&scene_dir(dir, &id), &scene)?;
        entries.push(SceneEntry { id, split, config });
    }
    let manifest = BenchmarkManifest {
        schema: MANIFEST_SCHEMA.into(),
        config: cfg.clone(),
        scenes: entries,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// A benchmark directory written by [`make_benchmark`].
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub root: PathBuf,
    pub manifest: BenchmarkManifest,
}

impl Benchmark {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest: BenchmarkManifest::parse(&bytes)?,
        })
    }

    pub fn load(&self, id: &str) -> Result<Scene> {
        let scene = read_scene(&scene_dir(&self.root, id))?;
        if scene.tracks.is_none() {
            return Err(Error::malformed("benchmark scene", format!("{id} has no ground-truth tracks")));
        }
        Ok(scene)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<(String, Scene)>> {
        self.manifest
            .ids(split)
            .into_iter()
            .map(|id| Ok((id.to_owned(), self.load(id)?)))
            .collect()
    }
}
