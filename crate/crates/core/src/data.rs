//! Synthetic dynamic scenes with closed-form ray casting, blurry-video
//! synthesis by sub-frame averaging, pose corruption, pseudo-depth
//! perturbation and the on-disk dataset format.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::se3::{average_quaternions, exp_rotation, slerp, CameraPose, Intrinsics, Quaternion};

pub const DATASET_VERSION: u32 = 1;
pub const DEPTH_MAGIC: &[u8; 8] = b"MBRFDPT1";
pub const PRESETS: &[&str] = &["moving-quad-64", "static-64"];

/// Linear RGB image with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn pixel(&self, u: usize, v: usize) -> [f64; 3] {
        let i = 3 * (v * self.width + u);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, u: usize, v: usize, c: [f64; 3]) {
        let i = 3 * (v * self.width + u);
        self.data[i..i + 3].copy_from_slice(&c);
    }

    /// Rounds every channel to the nearest multiple of 1/255.
    pub fn quantized(&self) -> Self {
        Self {
            data: self.data.iter().map(|&x| quantize(x) as f64 / 255.0).collect(),
            ..*self
        }
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&x| quantize(x)).collect()
    }
}

fn quantize(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Per-pixel ray distances, stored in 32-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u] as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn at(&self, u: usize, v: usize) -> bool {
        self.data[v * self.width + u]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }
}

/// Procedural color as a function of 2-D surface coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Texture {
    Uniform([f64; 3]),
    /// Alternating cells of side `1 / cells`.
    Checker { cells: f64, a: [f64; 3], b: [f64; 3] },
    /// Per channel `base + amp * sin(2π (f·x) + phase)`.
    Waves {
        base: [f64; 3],
        amp: [f64; 3],
        freq: [[f64; 2]; 3],
        phase: [f64; 3],
    },
    /// `(1 - w) * first + w * second`.
    Mix(Box<Texture>, Box<Texture>, f64),
}

impl Texture {
    pub fn color(&self, x: f64, y: f64) -> [f64; 3] {
        let c = match self {
            Texture::Uniform(c) => *c,
            Texture::Checker { cells, a, b } => {
                let k = (x * cells).floor() as i64 + (y * cells).floor() as i64;
                if k.rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Waves { base, amp, freq, phase } => {
                std::array::from_fn(|i| base[i] + amp[i] * (2.0 * PI * (freq[i][0] * x + freq[i][1] * y) + phase[i]).sin())
            }
            Texture::Mix(a, b, w) => {
                let (ca, cb) = (a.color(x, y), b.color(x, y));
                std::array::from_fn(|i| (1.0 - w) * ca[i] + w * cb[i])
            }
        };
        c.map(|v| v.clamp(0.0, 1.0))
    }
}

/// `Σ amp sin(2π freq τ + phase)` per axis, plus a linear drift.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub offset: [f64; 3],
    pub velocity: [f64; 3],
    pub waves: Vec<AxisWave>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisWave {
    pub axis: usize,
    pub amp: f64,
    pub freq: f64,
    pub phase: f64,
}

impl Trajectory {
    pub fn at(&self, tau: f64) -> Vector3<f64> {
        let mut p = Vector3::from(self.offset) + Vector3::from(self.velocity) * tau;
        for w in &self.waves {
            p[w.axis] += w.amp * (2.0 * PI * w.freq * tau + w.phase).sin();
        }
        p
    }
}

/// Fronto-parallel textured plane `z = depth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundPlane {
    pub depth: f64,
    pub texture: Texture,
}

/// Square parallel to the image plane that translates and spins about its
/// normal. Texture coordinates span `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MovingQuad {
    pub center: Trajectory,
    pub half_size: f64,
    pub spin_rate: f64,
    pub spin_amp: f64,
    pub spin_freq: f64,
    pub texture: Texture,
}

impl MovingQuad {
    pub fn spin(&self, tau: f64) -> f64 {
        self.spin_rate * tau + self.spin_amp * (2.0 * PI * self.spin_freq * tau).sin()
    }

    /// Ray distance and texture coordinates of the hit, if any.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>, tau: f64) -> Option<(f64, f64, f64)> {
        let c = self.center.at(tau);
        if d.z.abs() < 1e-12 {
            return None;
        }
        let k = (c.z - o.z) / d.z;
        if k <= 0.0 {
            return None;
        }
        let p = o + d * k - c;
        let (s, co) = self.spin(tau).sin_cos();
        let lx = co * p.x + s * p.y;
        let ly = -s * p.x + co * p.y;
        (lx.abs() <= self.half_size && ly.abs() <= self.half_size)
            .then(|| (k, lx / self.half_size, ly / self.half_size))
    }
}

/// Camera rotation `exp(ω(τ))` and center `c(τ)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CameraPath {
    pub rotation: Trajectory,
    pub translation: Trajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    pub intrinsics: Intrinsics,
    pub near: f64,
    pub far: f64,
    pub background: BackgroundPlane,
    pub quads: Vec<MovingQuad>,
    pub camera: CameraPath,
}

/// Sharp render with first-hit ray distance and dynamic-hit mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SharpFrame {
    pub image: Image,
    pub depth: Vec<f64>,
    pub mask: Mask,
}

/// Sub-frame window: `2 * window + 1` instants spaced one `rate`-th of a frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExposureConfig {
    pub window: usize,
    pub rate: usize,
}

impl Default for ExposureConfig {
    fn default() -> Self {
        Self { window: 4, rate: 8 }
    }
}

impl AnalyticScene {
    /// Named preset scenes.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "moving-quad-64" => Ok(Self::moving_quad_64()),
            "static-64" => {
                let mut s = Self::moving_quad_64();
                s.quads.clear();
                s.camera = CameraPath::default();
                Ok(s)
            }
            _ => Err(Error::InvalidArgument(format!(
                "unknown scene preset `{name}`; available: {}",
                PRESETS.join(", ")
            ))),
        }
    }

    fn moving_quad_64() -> Self {
        let wave = |axis, amp, freq, phase| AxisWave { axis, amp, freq, phase };
        let background = Texture::Mix(
            Box::new(Texture::Waves {
                base: [0.55, 0.5, 0.45],
                amp: [0.3, 0.25, 0.3],
                freq: [[0.9, 0.35], [-0.4, 0.8], [0.6, -0.7]],
                phase: [0.0, 1.3, 2.1],
            }),
            Box::new(Texture::Checker {
                cells: 2.5,
                a: [0.85, 0.8, 0.7],
                b: [0.15, 0.2, 0.3],
            }),
            0.35,
        );
        let quad = MovingQuad {
            center: Trajectory {
                offset: [0.0, 0.0, 2.5],
                velocity: [0.0; 3],
                waves: vec![wave(0, 0.4, 1.5, 0.0), wave(1, 0.15, 1.0, PI / 2.0)],
            },
            half_size: 0.42,
            spin_rate: 0.0,
            spin_amp: 0.6,
            spin_freq: 1.0,
            texture: Texture::Checker {
                cells: 1.5,
                a: [0.95, 0.3, 0.1],
                b: [0.1, 0.35, 0.95],
            },
        };
        Self {
            width: 64,
            height: 64,
            num_frames: 24,
            intrinsics: Intrinsics {
                fx: 70.0,
                fy: 70.0,
                cx: 31.5,
                cy: 31.5,
            },
            near: 1.0,
            far: 5.5,
            background: BackgroundPlane { depth: 4.0, texture: background },
            quads: vec![quad],
            camera: CameraPath {
                rotation: Trajectory {
                    offset: [0.0; 3],
                    velocity: [0.0; 3],
                    waves: vec![
                        wave(0, 0.025, 4.0, 1.1),
                        wave(1, 0.035, 3.0, 0.3),
                        wave(2, 0.02, 2.5, 2.0),
                    ],
                },
                translation: Trajectory {
                    offset: [0.0; 3],
                    velocity: [0.0; 3],
                    waves: vec![wave(0, 0.04, 2.0, 0.7), wave(1, 0.03, 3.5, 1.9)],
                },
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if self.width == 0 || self.height == 0 || self.num_frames == 0 {
            return Err(Error::InvalidArgument("scene needs positive size and frame count".into()));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::InvalidArgument(format!("need 0 < near < far, got {} {}", self.near, self.far)));
        }
        Ok(())
    }

    /// Normalized time of frame `t`: `(t + 1) / (N_f + 1)`.
    pub fn frame_time(&self, t: usize) -> f64 {
        (t + 1) as f64 / (self.num_frames + 1) as f64
    }

    /// One frame interval in normalized time.
    pub fn frame_interval(&self) -> f64 {
        1.0 / (self.num_frames + 1) as f64
    }

    pub fn camera_pose(&self, tau: f64, frame: usize) -> CameraPose {
        CameraPose {
            rotation: exp_rotation(&self.camera.rotation.at(tau)),
            translation: self.camera.translation.at(tau),
            intrinsics: self.intrinsics,
            frame,
        }
    }

    pub fn true_pose(&self, t: usize) -> CameraPose {
        self.camera_pose(self.frame_time(t), t)
    }

    /// Closed-form first hit: `(distance, color, dynamic)`.
    pub fn cast(&self, o: &Vector3<f64>, d: &Vector3<f64>, tau: f64) -> (f64, [f64; 3], bool) {
        let mut best: Option<(f64, [f64; 3])> = None;
        for q in &self.quads {
            if let Some((k, u, v)) = q.intersect(o, d, tau) {
                if best.is_none_or(|(bk, _)| k < bk) {
                    best = Some((k, q.texture.color(u, v)));
                }
            }
        }
        if let Some((k, c)) = best {
            return (k, c, true);
        }
        // The camera always faces the background, so every pixel ray hits it.
        let k = (self.background.depth - o.z) / d.z;
        let p = o + d * k;
        (k, self.background.texture.color(p.x, p.y), false)
    }
}

/// Ray-casts one sharp frame from `pose` at scene time `tau`.
pub fn render_sharp(scene: &AnalyticScene, pose: &CameraPose, tau: f64) -> Result<SharpFrame> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("scene time {tau} outside [0, 1]")));
    }
    let (w, h) = (scene.width, scene.height);
    let mut image = Image::new(w, h);
    let mut depth = vec![0.0; w * h];
    let mut mask = vec![false; w * h];
    for v in 0..h {
        for u in 0..w {
            let ray = pose.pixel_ray(u as f64, v as f64, scene.near, scene.far, (u as u32, v as u32));
            let (k, c, dynamic) = scene.cast(&ray.origin, &ray.direction, tau);
            image.set_pixel(u, v, c);
            depth[v * w + u] = k;
            mask[v * w + u] = dynamic;
        }
    }
    Ok(SharpFrame {
        image,
        depth,
        mask: Mask {
            width: w,
            height: h,
            data: mask,
        },
    })
}

/// Linear-light mean of the sub-frames and its 8-bit quantization.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurryFrame {
    pub mean: Image,
    pub quantized: Image,
    pub subframes: Vec<Image>,
}

/// Sub-frame times `τ_t + k / (rate (N_f + 1))` for `k = -W..=W`.
pub fn subframe_times(scene: &AnalyticScene, t: usize, exposure: ExposureConfig) -> Vec<f64> {
    let w = exposure.window as i64;
    let step = scene.frame_interval() / exposure.rate as f64;
    (-w..=w).map(|k| scene.frame_time(t) + k as f64 * step).collect()
}

/// Averages sharp sub-frames rendered along the true camera path.
pub fn synth_blurry_frame(scene: &AnalyticScene, t: usize, exposure: ExposureConfig) -> Result<BlurryFrame> {
    if t >= scene.num_frames {
        return Err(Error::FrameOutOfRange {
            index: t,
            count: scene.num_frames,
        });
    }
    if exposure.rate == 0 {
        return Err(Error::InvalidArgument("sub-frame rate must be positive".into()));
    }
    let times = subframe_times(scene, t, exposure);
    let subframes = times
        .iter()
        .map(|&tau| Ok(render_sharp(scene, &scene.camera_pose(tau, t), tau)?.image))
        .collect::<Result<Vec<_>>>()?;
    let mut mean = Image::new(scene.width, scene.height);
    for f in &subframes {
        for (m, x) in mean.data.iter_mut().zip(&f.data) {
            *m += x;
        }
    }
    let k = subframes.len() as f64;
    mean.data.iter_mut().for_each(|m| *m /= k);
    Ok(BlurryFrame {
        quantized: mean.quantized(),
        mean,
        subframes,
    })
}

/// Pose reconstructed from discrete frames the way a blurry capture's
/// pose estimate averages over its exposure: sub-frame rotations are
/// slerped towards the neighboring frames (ends clamped) and averaged as
/// quaternions, translations are interpolated linearly and averaged.
pub fn synth_corrupt_pose(poses: &[CameraPose], t: usize, exposure: ExposureConfig) -> Result<CameraPose> {
    if t >= poses.len() {
        return Err(Error::FrameOutOfRange {
            index: t,
            count: poses.len(),
        });
    }
    let prev = &poses[t.saturating_sub(1)];
    let next = &poses[(t + 1).min(poses.len() - 1)];
    let center = &poses[t];
    let qc = Quaternion::from_matrix(&center.rotation);
    let w = exposure.window as i64;
    let mut quats = Vec::new();
    let mut trans = Vector3::zeros();
    for k in -w..=w {
        let u = k.unsigned_abs() as f64 / exposure.rate as f64;
        let other = if k < 0 { prev } else { next };
        quats.push(slerp(&qc, &Quaternion::from_matrix(&other.rotation), u));
        trans += center.translation * (1.0 - u) + other.translation * u;
    }
    let q = average_quaternions(&quats)?;
    Ok(CameraPose {
        rotation: q.to_matrix(),
        translation: trans / quats.len() as f64,
        intrinsics: center.intrinsics,
        frame: center.frame,
    })
}

/// Draws the per-frame scale `a ∈ [0.5, 2]` and shift `b ∈ [-0.5, 0.5]`.
pub fn depth_affine(seed: u64, frame: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(frame as u64));
    (rng.gen_range(0.5..=2.0), rng.gen_range(-0.5..=0.5))
}

/// `a D + b`, clamped to stay positive.
pub fn apply_depth_affine(depth: &DepthMap, a: f64, b: f64) -> DepthMap {
    DepthMap {
        data: depth.data.iter().map(|&d| (a * d as f64 + b).max(1e-3) as f32).collect(),
        ..*depth
    }
}

/// Pseudo-depth with a seeded per-frame scale/shift ambiguity.
pub fn perturb_depth(depth: &DepthMap, seed: u64, frame: usize) -> DepthMap {
    let (a, b) = depth_affine(seed, frame);
    apply_depth_affine(depth, a, b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisInfo {
    pub preset: String,
    pub seed: u64,
    pub exposure: ExposureConfig,
    pub color_space: String,
    /// Per-frame `(a, b)` applied to the pseudo-depths.
    pub depth_affine: Vec<(f64, f64)>,
    pub scene: AnalyticScene,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub num_frames: usize,
    pub intrinsics: Intrinsics,
    pub near: f64,
    pub far: f64,
    pub synthesis: SynthesisInfo,
}

/// Training inputs plus evaluation ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurryDataset {
    pub meta: DatasetMeta,
    pub blurry: Vec<Image>,
    pub sharp: Vec<Image>,
    pub poses_corrupt: Vec<CameraPose>,
    pub poses_true: Vec<CameraPose>,
    pub depth_pseudo: Vec<DepthMap>,
    pub depth_true: Vec<DepthMap>,
    pub mask_true: Vec<Mask>,
}

impl BlurryDataset {
    pub fn num_frames(&self) -> usize {
        self.meta.num_frames
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.meta.num_frames;
        let counts = [
            self.blurry.len(),
            self.sharp.len(),
            self.poses_corrupt.len(),
            self.poses_true.len(),
            self.depth_pseudo.len(),
            self.depth_true.len(),
            self.mask_true.len(),
        ];
        if counts.iter().any(|&c| c != n) {
            return Err(Error::InvalidArgument(format!("dataset payload counts {counts:?} != {n} frames")));
        }
        if self.depth_pseudo.iter().any(|d| d.data.iter().any(|&x| !(x > 0.0))) {
            return Err(Error::InvalidArgument("pseudo-depth must be strictly positive".into()));
        }
        Ok(())
    }
}

/// Synthesizes a complete dataset from a scene.
pub fn synthesize(scene: &AnalyticScene, preset: &str, seed: u64, exposure: ExposureConfig) -> Result<BlurryDataset> {
    scene.validate()?;
    let n = scene.num_frames;
    let (w, h) = (scene.width, scene.height);
    let poses_true: Vec<CameraPose> = (0..n).map(|t| scene.true_pose(t)).collect();
    let mut ds = BlurryDataset {
        meta: DatasetMeta {
            version: DATASET_VERSION,
            height: h,
            width: w,
            num_frames: n,
            intrinsics: scene.intrinsics,
            near: scene.near,
            far: scene.far,
            synthesis: SynthesisInfo {
                preset: preset.to_owned(),
                seed,
                exposure,
                color_space: "linear".into(),
                depth_affine: Vec::new(),
                scene: scene.clone(),
            },
        },
        blurry: Vec::new(),
        sharp: Vec::new(),
        poses_corrupt: Vec::new(),
        poses_true: poses_true.clone(),
        depth_pseudo: Vec::new(),
        depth_true: Vec::new(),
        mask_true: Vec::new(),
    };
    for t in 0..n {
        let sharp = render_sharp(scene, &poses_true[t], scene.frame_time(t))?;
        let depth = DepthMap {
            width: w,
            height: h,
            data: sharp.depth.iter().map(|&d| d as f32).collect(),
        };
        let (a, b) = depth_affine(seed, t);
        ds.meta.synthesis.depth_affine.push((a, b));
        ds.depth_pseudo.push(apply_depth_affine(&depth, a, b));
        ds.depth_true.push(depth);
        ds.sharp.push(sharp.image.quantized());
        ds.mask_true.push(sharp.mask);
        ds.blurry.push(synth_blurry_frame(scene, t, exposure)?.quantized);
        ds.poses_corrupt.push(synth_corrupt_pose(&poses_true, t, exposure)?);
    }
    Ok(ds)
}

fn frame_path(dir: &Path, sub: &str, t: usize, ext: &str) -> PathBuf {
    dir.join(sub).join(format!("{t:04}.{ext}"))
}

fn png_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format {
        path: path.to_owned(),
        reason: e.to_string(),
    }
}

pub fn write_png_rgb(path: &Path, img: &Image) -> Result<()> {
    write_png(path, img.width, img.height, png::ColorType::Rgb, &img.to_u8())
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = BufWriter::new(fs::File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_error(path, e))?;
    writer.write_image_data(data).map_err(|e| png_error(path, e))?;
    writer.finish().map_err(|e| png_error(path, e))
}

fn read_png(path: &Path, expect: png::ColorType) -> Result<(usize, usize, Vec<u8>)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_owned()));
    }
    let dec = png::Decoder::new(BufReader::new(fs::File::open(path)?));
    let mut reader = dec.read_info().map_err(|e| png_error(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_error(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_error(path, e))?;
    if info.color_type != expect || info.bit_depth != png::BitDepth::Eight {
        return Err(png_error(
            path,
            format!("expected 8-bit {expect:?}, found {:?} {:?}", info.bit_depth, info.color_type),
        ));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}

pub fn read_png_rgb(path: &Path) -> Result<Image> {
    let (w, h, buf) = read_png(path, png::ColorType::Rgb)?;
    Ok(Image {
        width: w,
        height: h,
        data: buf.iter().map(|&b| b as f64 / 255.0).collect(),
    })
}

pub fn write_mask(path: &Path, m: &Mask) -> Result<()> {
    let data: Vec<u8> = m.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_png(path, m.width, m.height, png::ColorType::Grayscale, &data)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let (w, h, buf) = read_png(path, png::ColorType::Grayscale)?;
    Ok(Mask {
        width: w,
        height: h,
        data: buf.iter().map(|&b| b >= 128).collect(),
    })
}

pub fn write_depth(path: &Path, d: &DepthMap) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * d.data.len());
    buf.extend_from_slice(DEPTH_MAGIC);
    buf.extend_from_slice(&(d.height as u32).to_le_bytes());
    buf.extend_from_slice(&(d.width as u32).to_le_bytes());
    for x in &d.data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_owned()));
    }
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |reason: String| Error::Format {
        path: path.to_owned(),
        reason,
    };
    if bytes.len() < 16 || &bytes[..8] != DEPTH_MAGIC {
        return Err(bad("missing depth magic".into()));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let payload = &bytes[16..];
    if payload.len() != 4 * w * h {
        return Err(bad(format!(
            "shape mismatch: header says {h}x{w} ({} bytes) but payload has {} bytes",
            4 * w * h,
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(DepthMap {
        width: w,
        height: h,
        data,
    })
}

pub fn write_poses(path: &Path, poses: &[CameraPose]) -> Result<()> {
    let mut s = String::new();
    for p in poses {
        let row: Vec<String> = p.to_row_major().iter().map(|x| format!("{x:.16e}")).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_poses(path: &Path, intrinsics: Intrinsics) -> Result<Vec<CameraPose>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_owned()));
    }
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(t, line)| {
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|x| x.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format {
                    path: path.to_owned(),
                    reason: format!("line {}: {e}", t + 1),
                })?;
            let m: [f64; 12] = vals.try_into().map_err(|v: Vec<f64>| Error::Format {
                path: path.to_owned(),
                reason: format!("line {}: expected 12 values, found {}", t + 1, v.len()),
            })?;
            Ok(CameraPose::from_row_major(&m, intrinsics, t))
        })
        .collect()
}

/// Writes the dataset directory layout.
pub fn write_dataset(dir: &Path, ds: &BlurryDataset) -> Result<()> {
    ds.validate()?;
    for sub in ["blur", "sharp", "depth_pseudo", "depth_true", "mask_true"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&ds.meta)? + "\n")?;
    for t in 0..ds.num_frames() {
        write_png_rgb(&frame_path(dir, "blur", t, "png"), &ds.blurry[t])?;
        write_png_rgb(&frame_path(dir, "sharp", t, "png"), &ds.sharp[t])?;
        write_depth(&frame_path(dir, "depth_pseudo", t, "raw"), &ds.depth_pseudo[t])?;
        write_depth(&frame_path(dir, "depth_true", t, "raw"), &ds.depth_true[t])?;
        write_mask(&frame_path(dir, "mask_true", t, "png"), &ds.mask_true[t])?;
    }
    write_poses(&dir.join("poses_corrupt.txt"), &ds.poses_corrupt)?;
    write_poses(&dir.join("poses_true.txt"), &ds.poses_true)?;
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join("meta.json");
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path)?)?;
    let version = value.get("version").and_then(|v| v.as_u64());
    if version != Some(DATASET_VERSION as u64) {
        return Err(Error::VersionMismatch {
            path,
            expected: DATASET_VERSION.to_string(),
            found: version.map_or_else(|| "none".into(), |v| v.to_string()),
        });
    }
    Ok(serde_json::from_value(value)?)
}

pub fn read_dataset(dir: &Path) -> Result<BlurryDataset> {
    let meta = read_meta(dir)?;
    let (w, h, n) = (meta.width, meta.height, meta.num_frames);
    let check = |path: PathBuf, fw: usize, fh: usize| -> Result<()> {
        if (fw, fh) != (w, h) {
            return Err(Error::Format {
                path,
                reason: format!("shape mismatch: {fw}x{fh}, expected {w}x{h}"),
            });
        }
        Ok(())
    };
    let mut ds = BlurryDataset {
        poses_corrupt: read_poses(&dir.join("poses_corrupt.txt"), meta.intrinsics)?,
        poses_true: read_poses(&dir.join("poses_true.txt"), meta.intrinsics)?,
        meta,
        blurry: Vec::with_capacity(n),
        sharp: Vec::with_capacity(n),
        depth_pseudo: Vec::with_capacity(n),
        depth_true: Vec::with_capacity(n),
        mask_true: Vec::with_capacity(n),
    };
    for t in 0..n {
        let p = frame_path(dir, "blur", t, "png");
        let img = read_png_rgb(&p)?;
        check(p, img.width, img.height)?;
        ds.blurry.push(img);
        let p = frame_path(dir, "sharp", t, "png");
        let img = read_png_rgb(&p)?;
        check(p, img.width, img.height)?;
        ds.sharp.push(img);
        for (sub, dst) in [("depth_pseudo", &mut ds.depth_pseudo), ("depth_true", &mut ds.depth_true)] {
            let p = frame_path(dir, sub, t, "raw");
            let d = read_depth(&p)?;
            check(p, d.width, d.height)?;
            dst.push(d);
        }
        let p = frame_path(dir, "mask_true", t, "png");
        let m = read_mask(&p)?;
        check(p, m.width, m.height)?;
        ds.mask_true.push(m);
    }
    ds.validate()?;
    Ok(ds)
}

/// World-space rotation of the camera over one frame of a uniform spin about
/// `axis`; used to build synthetic trajectories in tests.
pub fn uniform_rotation_poses(axis: Vector3<f64>, per_frame: f64, frames: usize, intrinsics: Intrinsics) -> Vec<CameraPose> {
    (0..frames)
        .map(|t| CameraPose {
            rotation: exp_rotation(&(axis.normalize() * per_frame * t as f64)),
            translation: Vector3::zeros(),
            intrinsics,
            frame: t,
        })
        .collect()
}

/// `R` such that `R e_z = d`; for placing test cameras.
pub fn look_rotation(d: &Vector3<f64>) -> Matrix3<f64> {
    let z = d.normalize();
    let up = if z.y.abs() < 0.9 { Vector3::y() } else { Vector3::x() };
    let x = up.cross(&z).normalize();
    let y = z.cross(&x);
    Matrix3::from_columns(&[x, y, z])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::rotation_error;

    fn static_scene() -> AnalyticScene {
        AnalyticScene::preset("static-64").unwrap()
    }

    #[test]
    fn presets() {
        let s = AnalyticScene::preset("moving-quad-64").unwrap();
        assert_eq!((s.width, s.height, s.num_frames), (64, 64, 24));
        let err = AnalyticScene::preset("nope").unwrap_err().to_string();
        assert!(err.contains("moving-quad-64") && err.contains("static-64"));
    }

    #[test]
    fn static_scene_is_time_invariant() {
        let s = static_scene();
        let pose = s.true_pose(0);
        let a = render_sharp(&s, &pose, 0.1).unwrap();
        let b = render_sharp(&s, &pose, 0.8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mask.count(), 0);
    }

    #[test]
    fn background_depth_is_plane_distance() {
        let s = static_scene();
        let pose = s.true_pose(3);
        let f = render_sharp(&s, &pose, 0.5).unwrap();
        for v in 0..s.height {
            for u in 0..s.width {
                let r = pose.pixel_ray(u as f64, v as f64, s.near, s.far, (0, 0));
                // Camera at the origin facing +z: z-depth equals the plane depth.
                let z = f.depth[v * s.width + u] * r.direction.z;
                assert!((z - 4.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quad_mask_matches_projected_corners() {
        let mut s = static_scene();
        s.quads.push(MovingQuad {
            center: Trajectory {
                offset: [0.21, -0.11, 2.0],
                ..Trajectory::default()
            },
            half_size: 0.3,
            spin_rate: 0.0,
            spin_amp: 0.0,
            spin_freq: 0.0,
            texture: Texture::Uniform([1.0; 3]),
        });
        let pose = s.true_pose(0);
        let f = render_sharp(&s, &pose, 0.5).unwrap();
        let k = &s.intrinsics;
        // Projected corners: u = fx x / z + cx. Offsets keep edges off pixel centers.
        let (u0, u1) = (k.fx * (-0.09) / 2.0 + k.cx, k.fx * 0.51 / 2.0 + k.cx);
        let (v0, v1) = (k.fy * (-0.41) / 2.0 + k.cy, k.fy * 0.19 / 2.0 + k.cy);
        for v in 0..s.height {
            for u in 0..s.width {
                let inside = (u0..=u1).contains(&(u as f64)) && (v0..=v1).contains(&(v as f64));
                assert_eq!(f.mask.at(u, v), inside, "pixel {u},{v}");
            }
        }
    }

    #[test]
    fn zero_window_gives_sharp_frame() {
        let s = AnalyticScene::preset("moving-quad-64").unwrap();
        let ex = ExposureConfig { window: 0, rate: 8 };
        let b = synth_blurry_frame(&s, 5, ex).unwrap();
        let sharp = render_sharp(&s, &s.true_pose(5), s.frame_time(5)).unwrap();
        assert_eq!(b.mean, sharp.image);
        assert_eq!(b.subframes.len(), 1);
    }

    #[test]
    fn blurry_frame_is_mean_of_subframes() {
        let s = AnalyticScene::preset("moving-quad-64").unwrap();
        let b = synth_blurry_frame(&s, 7, ExposureConfig::default()).unwrap();
        assert_eq!(b.subframes.len(), 9);
        for i in (0..b.mean.data.len()).step_by(37) {
            let m: f64 = b.subframes.iter().map(|f| f.data[i]).sum::<f64>() / 9.0;
            assert!((m - b.mean.data[i]).abs() < 1e-15);
        }
        let times = subframe_times(&s, 7, ExposureConfig::default());
        assert!((times[8] - times[0] - s.frame_interval()).abs() < 1e-15);
        assert!(synth_blurry_frame(&s, 24, ExposureConfig::default()).is_err());
    }

    #[test]
    fn corrupt_pose_constant_and_uniform_rotation() {
        let k = static_scene().intrinsics;
        let constant = vec![
            CameraPose {
                rotation: exp_rotation(&Vector3::new(0.1, 0.2, -0.3)),
                translation: Vector3::new(1.0, 2.0, 3.0),
                intrinsics: k,
                frame: 0,
            };
            5
        ];
        for t in 0..5 {
            let c = synth_corrupt_pose(&constant, t, ExposureConfig::default()).unwrap();
            assert!((c.rotation - constant[t].rotation).abs().max() < 1e-10);
            assert!((c.translation - constant[t].translation).abs().max() < 1e-10);
        }
        let deg = PI / 180.0;
        let poses = uniform_rotation_poses(Vector3::z(), 2.0 * deg, 6, k);
        let c = synth_corrupt_pose(&poses, 3, ExposureConfig::default()).unwrap();
        assert!(rotation_error(&c.rotation) < 1e-10);
        let q = Quaternion::from_matrix(&c.rotation);
        assert!(q.x.abs() < 1e-12 && q.y.abs() < 1e-12);
        // Symmetric window: mean of the sampled angles is the center angle.
        assert!((2.0 * q.z.atan2(q.w) - 6.0 * deg).abs() < 1e-9);
        // Clamped end: samples cover [0, 1/2] frame, so mean angle is 1/4
        // frame with the quaternion mean of equally spaced angles.
        let c0 = synth_corrupt_pose(&poses, 0, ExposureConfig::default()).unwrap();
        let want: Vec<Quaternion> = (-4i32..=4)
            .map(|k| Quaternion::from_axis_angle(&Vector3::z(), 2.0 * deg * (k.max(0) as f64) / 8.0))
            .collect();
        let want = average_quaternions(&want).unwrap();
        assert!((Quaternion::from_matrix(&c0.rotation).dot(&want) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn corrupt_pose_uniform_translation() {
        let k = static_scene().intrinsics;
        let poses: Vec<CameraPose> = (0..4)
            .map(|t| CameraPose {
                rotation: Matrix3::identity(),
                translation: Vector3::new(0.1 * t as f64, 0.0, -0.05 * t as f64),
                intrinsics: k,
                frame: t,
            })
            .collect();
        let c = synth_corrupt_pose(&poses, 2, ExposureConfig::default()).unwrap();
        assert!((c.translation - poses[2].translation).norm() < 1e-12);
        let c = synth_corrupt_pose(&poses, 3, ExposureConfig::default()).unwrap();
        // Right half clamped: offsets (-4..0)/8 frames, then 4 zeros; mean = -10/72 frame.
        let want = poses[3].translation + Vector3::new(0.1, 0.0, -0.05) * (-10.0 / 72.0);
        assert!((c.translation - want).norm() < 1e-12);
    }

    #[test]
    fn depth_perturbation() {
        let d = DepthMap {
            width: 2,
            height: 1,
            data: vec![1.5, 3.0],
        };
        assert_eq!(apply_depth_affine(&d, 1.0, 0.0), d);
        assert_eq!(perturb_depth(&d, 5, 2), perturb_depth(&d, 5, 2));
        for t in 0..50 {
            let (a, b) = depth_affine(9, t);
            assert!((0.5..=2.0).contains(&a) && (-0.5..=0.5).contains(&b));
        }
        assert!(apply_depth_affine(&d, 0.5, -5.0).data.iter().all(|&x| x > 0.0));
    }

    fn tiny_dataset() -> BlurryDataset {
        let mut s = AnalyticScene::preset("moving-quad-64").unwrap();
        s.width = 12;
        s.height = 10;
        s.num_frames = 3;
        s.intrinsics.cx = 5.5;
        s.intrinsics.cy = 4.5;
        synthesize(&s, "moving-quad-64", 3, ExposureConfig::default()).unwrap()
    }

    #[test]
    fn dataset_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset();
        write_dataset(dir.path(), &ds).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.meta, ds.meta);
        assert_eq!(back.blurry, ds.blurry);
        assert_eq!(back.sharp, ds.sharp);
        assert_eq!(back.depth_pseudo, ds.depth_pseudo);
        assert_eq!(back.depth_true, ds.depth_true);
        assert_eq!(back.mask_true, ds.mask_true);
        assert_eq!(back.poses_true, ds.poses_true);
        assert_eq!(back.poses_corrupt, ds.poses_corrupt);
        assert_eq!(back, ds);

        let raw = dir.path().join("depth_true/0001.raw");
        let bytes = fs::read(&raw).unwrap();
        fs::write(&raw, &bytes[..bytes.len() - 4]).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format { .. }) && err.to_string().contains("shape mismatch"));
        fs::write(&raw, &bytes).unwrap();

        let meta = dir.path().join("meta.json");
        let text = fs::read_to_string(&meta).unwrap().replacen("\"version\": 1", "\"version\": 99", 1);
        fs::write(&meta, text).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::VersionMismatch { .. })));

        fs::remove_file(&meta).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::MissingFile(_))));
    }
}
