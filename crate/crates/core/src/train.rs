//! Two-stage optimization: base-ray initialization with interleaved
//! warp/field updates, then blur-model training with frozen base screws.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::blur::{blur_average_graph, latent_rays_graph};
use crate::data::{synthesize, AnalyticScene, BlurryDataset, ExposureConfig};
use crate::diffmath::gradcheck::{relative_error, CheckReport};
use crate::diffmath::{AdamConfig, Graph, LrSchedule, Tensor, Var};
use crate::error::{Error, Result};
use crate::fields::{
    EncodingConfig, MlpSpec, Model, ModelConfig, GROUP_DYNAMIC, GROUP_LOCAL, GROUP_SCREW_BASE, GROUP_SCREW_GLOBAL,
    GROUP_STATIC,
};
use crate::loss::{
    lg_graph, masked_photometric_graph, photometric_graph, staticness_graph, GeometryPatch, LossBreakdown, LossWeights,
};
use crate::render::{render_batch, BatchGrid, BatchRender};
use crate::se3::{warp_rays_graph, ScrewAxis};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    Desk,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            _ => Err(Error::InvalidArgument(format!("unknown profile `{s}`; expected paper or desk"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateRange {
    pub start: f64,
    pub end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub profile: Profile,
    pub bri_iters: usize,
    pub mdd_iters: usize,
    pub batch_size: usize,
    pub n_samples: usize,
    pub num_latent: usize,
    pub mlp: MlpSpec,
    pub encoding: EncodingConfig,
    /// Field and local-motion MLPs, decayed over both stages.
    pub mlp_lr: RateRange,
    /// Base screws, decayed over the first stage.
    pub base_screw_lr: RateRange,
    /// Global latent screws, decayed over the second stage.
    pub global_screw_lr: RateRange,
    pub loss: LossWeights,
    /// Fraction of each batch that also supervises local geometry.
    pub lg_fraction: f64,
    /// In the second stage, supervise local geometry only where the base
    /// ray's motion mask is set.
    pub lg_mdd_masked_only: bool,
    /// Std of the antithetic global-screw spread applied when the second
    /// stage starts; zero keeps the identity warps.
    pub global_screw_init_std: f64,
    pub staticness_bias: f64,
    pub glo_init_std: f64,
    pub seed: u64,
    /// Verify frozen groups by checksum after every update.
    pub check_freeze: bool,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            profile: Profile::Paper,
            bri_iters: 200_000,
            mdd_iters: 100_000,
            batch_size: 128,
            n_samples: 128,
            num_latent: 6,
            mlp: MlpSpec::default(),
            encoding: EncodingConfig::default(),
            mlp_lr: RateRange { start: 1e-3, end: 1e-4 },
            base_screw_lr: RateRange { start: 1e-4, end: 1e-6 },
            global_screw_lr: RateRange { start: 1e-4, end: 1e-6 },
            loss: LossWeights::default(),
            lg_fraction: 0.25,
            lg_mdd_masked_only: true,
            global_screw_init_std: 1e-3,
            // Starts every ray static so the first warp steps see the whole frame.
            staticness_bias: 2.0,
            glo_init_std: 0.01,
            seed: 0,
            check_freeze: true,
            log_every: 1000,
        }
    }

    pub fn desk() -> Self {
        Self {
            profile: Profile::Desk,
            bri_iters: 3000,
            mdd_iters: 1500,
            batch_size: 256,
            n_samples: 32,
            num_latent: 4,
            mlp: MlpSpec::desk(),
            mlp_lr: RateRange { start: 5e-3, end: 5e-4 },
            base_screw_lr: RateRange { start: 1e-3, end: 1e-5 },
            global_screw_lr: RateRange { start: 1e-3, end: 1e-5 },
            global_screw_init_std: 5e-3,
            log_every: 100,
            ..Self::paper()
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Paper => Self::paper(),
            Profile::Desk => Self::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.n_samples == 0 || self.log_every == 0 {
            return Err(Error::InvalidArgument("batch size, sample count and log cadence must be positive".into()));
        }
        if self.num_latent > 10 {
            return Err(Error::InvalidArgument(format!("num_latent {} exceeds 10", self.num_latent)));
        }
        if !(0.0..=1.0).contains(&self.lg_fraction) {
            return Err(Error::InvalidArgument(format!("lg_fraction {} outside [0, 1]", self.lg_fraction)));
        }
        for r in [self.mlp_lr, self.base_screw_lr, self.global_screw_lr] {
            LrSchedule::new(r.start, r.end, 1)?;
        }
        self.mlp.validate()?;
        self.encoding.validate()
    }

    /// Positions are scaled by `1 / far` so the scene spans roughly a unit box.
    pub fn model_config(&self, num_frames: usize, far: f64) -> ModelConfig {
        ModelConfig {
            encoding: EncodingConfig {
                position_scale: 1.0 / far,
                ..self.encoding
            },
            mlp: self.mlp,
            num_frames,
            num_latent: self.num_latent,
            glo_init_std: self.glo_init_std,
            staticness_bias: self.staticness_bias,
        }
    }

    pub fn total_iters(&self) -> usize {
        self.bri_iters + self.mdd_iters
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Bri,
    Mdd,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Bri => "bri",
            Stage::Mdd => "mdd",
        })
    }
}

/// Which objective and which parameter groups a step uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    /// Static field and base screws.
    BriEven,
    /// Static and dynamic fields.
    BriOdd,
    /// Fields, local-motion MLP and global screws.
    Mdd,
}

impl StepKind {
    pub fn trainable(self) -> &'static [&'static str] {
        match self {
            StepKind::BriEven => &[GROUP_STATIC, GROUP_SCREW_BASE],
            StepKind::BriOdd => &[GROUP_STATIC, GROUP_DYNAMIC],
            StepKind::Mdd => &[GROUP_STATIC, GROUP_DYNAMIC, GROUP_LOCAL, GROUP_SCREW_GLOBAL],
        }
    }

    pub fn frozen(self) -> Vec<&'static str> {
        [GROUP_STATIC, GROUP_DYNAMIC, GROUP_LOCAL, GROUP_SCREW_BASE, GROUP_SCREW_GLOBAL]
            .into_iter()
            .filter(|g| !self.trainable().contains(g))
            .collect()
    }

    pub fn parity(self) -> &'static str {
        match self {
            StepKind::BriEven => "even",
            StepKind::BriOdd => "odd",
            StepKind::Mdd => "-",
        }
    }
}

/// Progress through the two stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageState {
    pub stage: Stage,
    /// Iteration within the current stage.
    pub iteration: usize,
    pub frozen: Vec<String>,
    pub last: LossBreakdown,
    pub checkpoint_every: usize,
}

impl StageState {
    pub fn step_kind(&self) -> StepKind {
        match self.stage {
            Stage::Bri if self.iteration % 2 == 0 => StepKind::BriEven,
            Stage::Bri => StepKind::BriOdd,
            Stage::Mdd => StepKind::Mdd,
        }
    }
}

/// Per-pixel training inputs derived from the dataset.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    pub near: f64,
    pub far: f64,
    origins: Vec<[f64; 3]>,
    /// Indexed by `(t * height + v) * width + u`.
    dirs: Vec<[f64; 3]>,
    targets: Vec<[f64; 3]>,
    depth: Vec<f64>,
}

impl TrainingData {
    /// Input rays come from the corrupted poses.
    pub fn from_dataset(ds: &BlurryDataset) -> Result<Self> {
        ds.validate()?;
        let (w, h, n) = (ds.meta.width, ds.meta.height, ds.meta.num_frames);
        let mut data = Self {
            width: w,
            height: h,
            num_frames: n,
            near: ds.meta.near,
            far: ds.meta.far,
            origins: Vec::with_capacity(n),
            dirs: Vec::with_capacity(n * w * h),
            targets: Vec::with_capacity(n * w * h),
            depth: Vec::with_capacity(n * w * h),
        };
        for t in 0..n {
            let pose = &ds.poses_corrupt[t];
            data.origins.push(pose.translation.into());
            for v in 0..h {
                for u in 0..w {
                    let r = pose.pixel_ray(u as f64, v as f64, data.near, data.far, (u as u32, v as u32));
                    data.dirs.push(r.direction.into());
                    data.targets.push(ds.blurry[t].pixel(u, v));
                    data.depth.push(ds.depth_pseudo[t].at(u, v));
                }
            }
        }
        Ok(data)
    }

    fn index(&self, t: usize, u: usize, v: usize) -> usize {
        (t * self.height + v) * self.width + u
    }
}

/// Rays, targets and sample positions of one step. Rows `0..n_base` are
/// photometrically supervised; later rows are geometry neighbors.
#[derive(Clone, Debug)]
pub struct Batch {
    pub frames: Vec<usize>,
    pub pixels: Vec<(usize, usize)>,
    pub origins: Tensor,
    pub dirs: Tensor,
    pub targets: Tensor,
    pub n_base: usize,
    pub patches: Vec<GeometryPatch>,
    pub grid: BatchGrid,
}

impl Batch {
    /// Draws `size` pixels uniformly over frames; the first `lg_count` come
    /// from pixels with right and down neighbors, which are appended.
    pub fn sample(data: &TrainingData, size: usize, lg_count: usize, n_samples: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let lg_count = lg_count.min(size);
        if data.width < 2 || data.height < 2 {
            return Err(Error::InvalidArgument("frames must be at least 2x2".into()));
        }
        let mut frames = Vec::with_capacity(size + 2 * lg_count);
        let mut pixels = Vec::with_capacity(size + 2 * lg_count);
        for i in 0..size {
            let t = rng.gen_range(0..data.num_frames);
            let (uw, vh) = if i < lg_count {
                (data.width - 1, data.height - 1)
            } else {
                (data.width, data.height)
            };
            frames.push(t);
            pixels.push((rng.gen_range(0..uw), rng.gen_range(0..vh)));
        }
        let mut patches = Vec::with_capacity(lg_count);
        for i in 0..lg_count {
            let (t, (u, v)) = (frames[i], pixels[i]);
            let right = frames.len();
            frames.extend([t, t]);
            pixels.extend([(u + 1, v), (u, v + 1)]);
            patches.push(GeometryPatch {
                rows: [i, right, right + 1],
                depth: [
                    data.depth[data.index(t, u, v)],
                    data.depth[data.index(t, u + 1, v)],
                    data.depth[data.index(t, u, v + 1)],
                ],
            });
        }
        Self::assemble(data, frames, pixels, size, patches, n_samples, Some(rng))
    }

    /// Batch of explicit pixels with no geometry supervision; `rng = None`
    /// uses bin midpoints.
    pub fn from_pixels(
        data: &TrainingData,
        frames: Vec<usize>,
        pixels: Vec<(usize, usize)>,
        n_samples: usize,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Self> {
        let n = frames.len();
        Self::assemble(data, frames, pixels, n, Vec::new(), n_samples, rng)
    }

    fn assemble(
        data: &TrainingData,
        frames: Vec<usize>,
        pixels: Vec<(usize, usize)>,
        n_base: usize,
        patches: Vec<GeometryPatch>,
        n_samples: usize,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Self> {
        let r = frames.len();
        let mut o = Vec::with_capacity(3 * r);
        let mut d = Vec::with_capacity(3 * r);
        let mut c = Vec::with_capacity(3 * n_base);
        for (k, (&t, &(u, v))) in frames.iter().zip(&pixels).enumerate() {
            if t >= data.num_frames || u >= data.width || v >= data.height {
                return Err(Error::InvalidArgument(format!("pixel ({u}, {v}) of frame {t} out of range")));
            }
            let i = data.index(t, u, v);
            o.extend(data.origins[t]);
            d.extend(data.dirs[i]);
            if k < n_base {
                c.extend(data.targets[i]);
            }
        }
        let step = (data.far - data.near) / n_samples as f64;
        let mut samples = Vec::with_capacity(r * n_samples);
        let deltas = vec![step; r * n_samples];
        match rng {
            Some(rng) => {
                for _ in 0..r {
                    for i in 0..n_samples {
                        samples.push(data.near + step * (i as f64 + rng.gen::<f64>()));
                    }
                }
            }
            None => {
                for _ in 0..r {
                    for i in 0..n_samples {
                        samples.push(data.near + step * (i as f64 + 0.5));
                    }
                }
            }
        }
        // Last bin edge is `far`.
        Ok(Self {
            frames,
            pixels,
            origins: Tensor::from_vec(r, 3, o)?,
            dirs: Tensor::from_vec(r, 3, d)?,
            targets: Tensor::from_vec(n_base, 3, c)?,
            n_base,
            patches,
            grid: BatchGrid {
                samples: Tensor::from_vec(r, n_samples, samples)?,
                deltas: Tensor::from_vec(r, n_samples, deltas)?,
            },
        })
    }

    /// Drops geometry neighbors, keeping the photometric rows.
    pub fn without_geometry(&self) -> Self {
        let idx: Vec<usize> = (0..self.n_base).collect();
        let pick = |t: &Tensor| Tensor {
            rows: self.n_base,
            cols: t.cols,
            data: t.data[..self.n_base * t.cols].to_vec(),
        };
        Self {
            frames: self.frames[..self.n_base].to_vec(),
            pixels: self.pixels[..self.n_base].to_vec(),
            origins: pick(&self.origins),
            dirs: pick(&self.dirs),
            targets: self.targets.clone(),
            n_base: self.n_base,
            patches: Vec::new(),
            grid: self.grid.select(&idx),
        }
    }
}

/// Graph of one step's objective.
pub struct LossGraph {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub mask: Vec<bool>,
    pub lorr_rows: usize,
}

/// Builds the objective of `kind` on `batch` in `g`.
pub fn build_loss(g: &mut Graph, model: &Model, cfg: &TrainConfig, batch: &Batch, kind: StepKind, near: f64, far: f64) -> Result<LossGraph> {
    let nb = batch.n_base;
    let o0 = g.constant(batch.origins.clone());
    let d0 = g.constant(batch.dirs.clone());
    let screws = model.base_screws(g, &batch.frames)?;
    let w = g.slice_cols(screws, 0, 3)?;
    let v = g.slice_cols(screws, 3, 6)?;
    let (o, d) = warp_rays_graph(g, o0, d0, w, v)?;
    let br = render_batch(g, model, o, d, &batch.frames, &batch.grid)?;
    let mask: Vec<bool> = br.mask()[..nb].to_vec();

    let base_rows: Vec<usize> = (0..nb).collect();
    let has_extra = g.shape(br.color_static).0 != nb;
    let rows = |g: &mut Graph, x: Var| -> Result<Var> {
        if has_extra {
            g.gather_rows(x, &base_rows)
        } else {
            Ok(x)
        }
    };
    let cs = rows(g, br.color_static)?;

    let zero = g.constant(Tensor::scalar(0.0));
    let mut lorr_rows = 0;
    let (mphoto, photo_d, photo_f, sm, lg) = match kind {
        StepKind::BriEven => {
            let m = masked_photometric_graph(g, cs, &batch.targets, &mask)?;
            (m, zero, zero, zero, zero)
        }
        StepKind::BriOdd => {
            let cd = rows(g, br.color_dynamic)?;
            let cf = rows(g, br.color_full)?;
            let m = masked_photometric_graph(g, cs, &batch.targets, &mask)?;
            let pd = photometric_graph(g, cd, &batch.targets)?;
            let pf = photometric_graph(g, cf, &batch.targets)?;
            let sm = staticness_graph(g, br.p_st, cfg.loss.sm)?;
            let lg = geometry_term(g, &br, batch, o, d, &batch.patches, cfg.loss.lg)?;
            (m, pd, pf, sm, lg)
        }
        StepKind::Mdd => {
            let ob = rows(g, o)?;
            let db = rows(g, d)?;
            let base_frames = &batch.frames[..nb];
            let k = model.num_latent();
            let (bs, bd, bf, p_st) = if k > 0 {
                let lat = latent_rays_graph(g, model, ob, db, base_frames, &mask, near, far)?;
                lorr_rows = lat.lorr_rows;
                let lgrid = batch.grid.select(&lat.base_index);
                let lr = render_batch(g, model, lat.origins, lat.dirs, &lat.frames, &lgrid)?;
                let cd = rows(g, br.color_dynamic)?;
                let cf = rows(g, br.color_full)?;
                let bs = blur_average_graph(g, cs, lr.color_static, k)?;
                let bd = blur_average_graph(g, cd, lr.color_dynamic, k)?;
                let bf = blur_average_graph(g, cf, lr.color_full, k)?;
                let p_st = g.concat_rows(&[br.p_st, lr.p_st])?;
                (bs, bd, bf, p_st)
            } else {
                let cd = rows(g, br.color_dynamic)?;
                let cf = rows(g, br.color_full)?;
                (cs, cd, cf, br.p_st)
            };
            let m = masked_photometric_graph(g, bs, &batch.targets, &mask)?;
            let pd = photometric_graph(g, bd, &batch.targets)?;
            let pf = photometric_graph(g, bf, &batch.targets)?;
            let sm = staticness_graph(g, p_st, cfg.loss.sm)?;
            let patches: Vec<GeometryPatch> = if cfg.lg_mdd_masked_only {
                batch.patches.iter().filter(|p| mask[p.rows[0]]).copied().collect()
            } else {
                batch.patches.clone()
            };
            // Masked-out pixels count toward the mean as zeros.
            let lg = geometry_term(g, &br, batch, o, d, &patches, cfg.loss.lg)?;
            let lg = if patches.is_empty() || patches.len() == batch.patches.len() {
                lg
            } else {
                g.scale(lg, patches.len() as f64 / batch.patches.len() as f64)
            };
            (m, pd, pf, sm, lg)
        }
    };
    let s1 = g.add(mphoto, photo_d)?;
    let s2 = g.add(s1, photo_f)?;
    let s3 = g.add(s2, sm)?;
    let total = g.add(s3, lg)?;
    let val = |g: &Graph, x: Var| g.value(x).item();
    let breakdown = LossBreakdown {
        photo_dynamic: val(g, photo_d),
        photo_full: val(g, photo_f),
        mphoto_static: val(g, mphoto),
        sm: val(g, sm),
        lg: val(g, lg),
        total: val(g, total),
    };
    Ok(LossGraph {
        total,
        breakdown,
        mask,
        lorr_rows,
    })
}

fn geometry_term(
    g: &mut Graph,
    br: &BatchRender,
    batch: &Batch,
    o: Var,
    d: Var,
    patches: &[GeometryPatch],
    lambda: f64,
) -> Result<Var> {
    if patches.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let _ = batch;
    let ov = g.value(o).clone();
    let dv = g.value(d).clone();
    lg_graph(g, &ov, &dv, br.kappa_star, patches, lambda)
}

/// One training log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub stage: Stage,
    pub parity: String,
    pub loss: LossBreakdown,
    pub lr: BTreeMap<String, f64>,
}

impl LogRecord {
    pub fn line(&self) -> String {
        let lrs: Vec<String> = self.lr.iter().map(|(k, v)| format!("lr_{k}={v:.3e}")).collect();
        format!(
            "it={} stage={} parity={} {} {}",
            self.iteration,
            self.stage,
            self.parity,
            self.loss,
            lrs.join(" ")
        )
    }
}

/// Final record of a training run.
#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub bri_iters: usize,
    pub mdd_iters: usize,
    pub final_loss: LossBreakdown,
    pub checksum: u64,
    pub group_checksums: BTreeMap<String, u64>,
    pub bri_seconds: f64,
    pub mdd_seconds: f64,
}

/// Owns the model, the optimizer state and the stage bookkeeping.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub state: StageState,
    pub data: TrainingData,
    pub log: Vec<LogRecord>,
    pub history: Vec<LossBreakdown>,
    adam: AdamConfig,
    out_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(config: TrainConfig, ds: &BlurryDataset) -> Result<Self> {
        config.validate()?;
        let data = TrainingData::from_dataset(ds)?;
        let model = Model::new(config.model_config(data.num_frames, data.far), config.seed)?;
        Self::with_model(config, data, model)
    }

    pub fn with_model(config: TrainConfig, data: TrainingData, model: Model) -> Result<Self> {
        config.validate()?;
        if model.num_frames() != data.num_frames {
            return Err(Error::InvalidArgument(format!(
                "model has {} frames but the dataset has {}",
                model.num_frames(),
                data.num_frames
            )));
        }
        let every = (config.bri_iters / 10).max(1);
        let mut t = Self {
            config,
            model,
            state: StageState {
                stage: Stage::Bri,
                iteration: 0,
                frozen: Vec::new(),
                last: LossBreakdown::default(),
                checkpoint_every: every,
            },
            data,
            log: Vec::new(),
            history: Vec::new(),
            adam: AdamConfig::default(),
            out_dir: None,
        };
        if t.config.bri_iters == 0 {
            t.start_mdd();
        }
        Ok(t)
    }

    /// Directory for checkpoints and the log file.
    pub fn set_output(&mut self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("checkpoints"))?;
        self.out_dir = Some(dir.to_owned());
        Ok(())
    }

    pub fn global_iteration(&self) -> usize {
        match self.state.stage {
            Stage::Bri => self.state.iteration,
            Stage::Mdd => self.config.bri_iters + self.state.iteration,
        }
    }

    pub fn is_done(&self) -> bool {
        self.state.stage == Stage::Mdd && self.state.iteration >= self.config.mdd_iters
    }

    fn lg_count(&self) -> usize {
        (self.config.batch_size as f64 * self.config.lg_fraction).round() as usize
    }

    /// The batch of a given global iteration; a pure function of the seed.
    pub fn batch_at(&self, global_iter: usize) -> Result<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(global_iter as u64 + 1);
        let lg = self.lg_count();
        Batch::sample(&self.data, self.config.batch_size, lg, self.config.n_samples, &mut rng)
    }

    /// Learning rate of `group` at the current step.
    pub fn rate(&self, group: &str) -> Result<f64> {
        let c = &self.config;
        let (range, step, total) = match group {
            GROUP_SCREW_BASE => (c.base_screw_lr, self.global_iteration().min(c.bri_iters), c.bri_iters),
            GROUP_SCREW_GLOBAL => (
                c.global_screw_lr,
                if self.state.stage == Stage::Mdd { self.state.iteration } else { 0 },
                c.mdd_iters,
            ),
            _ => (c.mlp_lr, self.global_iteration(), c.total_iters()),
        };
        LrSchedule::new(range.start, range.end, total)?.rate_at(step)
    }

    fn rates(&self) -> Result<BTreeMap<String, f64>> {
        self.model
            .store
            .groups()
            .into_iter()
            .map(|g| {
                let r = self.rate(&g)?;
                Ok((g, r))
            })
            .collect()
    }

    /// Objective value of `kind` on `batch` without updating anything.
    pub fn evaluate_loss(&self, batch: &Batch, kind: StepKind) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        Ok(build_loss(&mut g, &self.model, &self.config, batch, kind, self.data.near, self.data.far)?.breakdown)
    }

    /// One optimizer step on `batch` with the current stage/parity.
    pub fn step_on(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        let kind = self.state.step_kind();
        let it = self.global_iteration();
        let mut g = Graph::new();
        let lgraph = build_loss(&mut g, &self.model, &self.config, batch, kind, self.data.near, self.data.far)?;
        if !lgraph.breakdown.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                stage: self.state.stage.to_string(),
                breakdown: lgraph.breakdown.to_string(),
            });
        }
        g.backward_into(lgraph.total, &mut self.model.store)?;
        drop(g);

        let frozen = kind.frozen();
        self.model.store.freeze_only(&frozen);
        self.state.frozen = frozen.iter().map(|s| (*s).to_owned()).collect();
        let before: Vec<u64> = if self.config.check_freeze {
            frozen.iter().map(|f| self.model.store.group_checksum(f)).collect()
        } else {
            Vec::new()
        };
        let rates = self.rates()?;
        self.model
            .store
            .adam_step(|grp| rates.get(grp).copied().unwrap_or(0.0), self.adam)?;
        if self.config.check_freeze {
            for (f, b) in frozen.iter().zip(before) {
                if self.model.store.group_checksum(f) != b {
                    return Err(Error::FreezeViolation {
                        group: (*f).to_owned(),
                        stage: self.state.stage.to_string(),
                        iteration: it,
                    });
                }
            }
        }
        if let Some((_, p)) = self.model.store.iter().find(|(_, p)| !p.value.all_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }

        self.state.last = lgraph.breakdown;
        self.history.push(lgraph.breakdown);
        if it % self.config.log_every == 0 || it + 1 == self.config.total_iters() {
            let rec = LogRecord {
                iteration: it,
                stage: self.state.stage,
                parity: kind.parity().to_owned(),
                loss: lgraph.breakdown,
                lr: rates,
            };
            log::info!("{}", rec.line());
            self.log.push(rec);
        }
        self.state.iteration += 1;
        Ok(lgraph.breakdown)
    }

    /// Next scheduled step (stratified batch from the seed).
    pub fn step(&mut self) -> Result<LossBreakdown> {
        if self.is_done() {
            return Err(Error::InvalidArgument("training already complete".into()));
        }
        let batch = self.batch_at(self.global_iteration())?;
        let batch = if self.state.step_kind() == StepKind::BriEven {
            batch.without_geometry()
        } else {
            batch
        };
        let out = self.step_on(&batch)?;
        self.after_step()?;
        Ok(out)
    }

    pub fn bri_step(&mut self) -> Result<LossBreakdown> {
        if self.state.stage != Stage::Bri {
            return Err(Error::InvalidArgument("bri_step called outside the first stage".into()));
        }
        self.step()
    }

    pub fn mdd_step(&mut self) -> Result<LossBreakdown> {
        if self.state.stage != Stage::Mdd {
            return Err(Error::InvalidArgument("mdd_step called before the first stage completed".into()));
        }
        self.step()
    }

    fn after_step(&mut self) -> Result<()> {
        let stage_len = match self.state.stage {
            Stage::Bri => self.config.bri_iters,
            Stage::Mdd => self.config.mdd_iters,
        };
        if self.state.stage == Stage::Bri && self.state.iteration >= stage_len {
            self.start_mdd();
        }
        if self.out_dir.is_some() && self.state.iteration % self.state.checkpoint_every == 0 {
            self.save_checkpoint()?;
        }
        Ok(())
    }

    /// Enters the second stage and breaks the symmetry of the latent screws.
    pub fn start_mdd(&mut self) {
        self.state.stage = Stage::Mdd;
        self.state.iteration = 0;
        self.state.checkpoint_every = (self.config.mdd_iters / 10).max(1);
        let std = self.config.global_screw_init_std;
        if std > 0.0 && self.model.num_latent() > 0 {
            spread_global_screws(&mut self.model, std, self.config.seed);
        }
    }

    pub fn save_checkpoint(&self) -> Result<PathBuf> {
        let dir = self
            .out_dir
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("no output directory set".into()))?;
        let path = dir
            .join("checkpoints")
            .join(format!("{}-{:06}.ckpt", self.state.stage, self.state.iteration));
        self.model.save(&path)?;
        fs::write(dir.join("checkpoints").join("state.json"), serde_json::to_string_pretty(&ResumeState {
            checkpoint: path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            state: self.state.clone(),
        })?)?;
        Ok(path)
    }

    /// Restores model, optimizer moments and stage position from `out_dir`.
    pub fn resume(config: TrainConfig, ds: &BlurryDataset, out_dir: &Path) -> Result<Self> {
        let state_path = out_dir.join("checkpoints").join("state.json");
        if !state_path.exists() {
            return Err(Error::MissingFile(state_path));
        }
        let rs: ResumeState = serde_json::from_str(&fs::read_to_string(&state_path)?)?;
        let model = Model::load(&out_dir.join("checkpoints").join(&rs.checkpoint))?;
        let data = TrainingData::from_dataset(ds)?;
        let mut t = Self::with_model(config, data, model)?;
        t.state = rs.state;
        t.set_output(out_dir)?;
        Ok(t)
    }

    /// Runs both stages to completion.
    pub fn run(&mut self) -> Result<TrainSummary> {
        let start = Instant::now();
        while self.state.stage == Stage::Bri {
            self.step()?;
        }
        let bri_seconds = start.elapsed().as_secs_f64();
        let mid = Instant::now();
        while !self.is_done() {
            self.step()?;
        }
        let summary = self.summary(bri_seconds, mid.elapsed().as_secs_f64());
        if let Some(dir) = &self.out_dir {
            self.model.save(&dir.join("model.ckpt"))?;
            let lines: Vec<String> = self.log.iter().map(LogRecord::line).collect();
            fs::write(dir.join("train.log"), lines.join("\n") + "\n")?;
            fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
        }
        Ok(summary)
    }

    pub fn summary(&self, bri_seconds: f64, mdd_seconds: f64) -> TrainSummary {
        TrainSummary {
            bri_iters: self.config.bri_iters,
            mdd_iters: self.config.mdd_iters,
            final_loss: self.state.last,
            checksum: self.model.store.checksum(),
            group_checksums: self
                .model
                .store
                .groups()
                .into_iter()
                .map(|g| {
                    let c = self.model.store.group_checksum(&g);
                    (g, c)
                })
                .collect(),
            bri_seconds,
            mdd_seconds,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ResumeState {
    checkpoint: String,
    state: StageState,
}

/// Antithetic normal spread of the latent screws: for each frame, latent
/// `2k` gets `+x_k` and `2k + 1` gets `-x_k`.
pub fn spread_global_screws(model: &mut Model, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5c4e_u64);
    let normal = Normal::new(0.0, std).expect("positive std");
    let nb = model.num_latent();
    let id = model.screw_global_id();
    let table = &mut model.store.get_mut(id).value;
    for t in 0..model.config.num_frames {
        let mut prev = [0.0; 6];
        for q in 0..nb {
            let row = table.row_mut(t * nb + q);
            if q % 2 == 0 {
                prev = std::array::from_fn(|_| normal.sample(&mut rng));
                row.copy_from_slice(&prev);
            } else {
                for (x, p) in row.iter_mut().zip(prev) {
                    *x = -p;
                }
            }
        }
    }
}

/// Convenience wrapper: trains on `ds` and returns the model and summary.
pub fn run(config: TrainConfig, ds: &BlurryDataset, out_dir: Option<&Path>) -> Result<(Model, TrainSummary, Vec<LogRecord>)> {
    let mut t = Trainer::new(config, ds)?;
    if let Some(dir) = out_dir {
        t.set_output(dir)?;
    }
    let s = t.run()?;
    Ok((t.model, s, t.log))
}

/// Finite-difference check of the full objective's parameter gradient on
/// `probes` randomly chosen parameter entries (at least one per group).
pub fn gradcheck_loss(
    model: &Model,
    cfg: &TrainConfig,
    batch: &Batch,
    kind: StepKind,
    near: f64,
    far: f64,
    probes: usize,
    step: f64,
    tolerance: f64,
    seed: u64,
) -> Result<CheckReport> {
    let mut analytic_store = model.store.clone();
    analytic_store.zero_grad();
    let mut g = Graph::new();
    let lg = build_loss(&mut g, model, cfg, batch, kind, near, far)?;
    g.backward_into(lg.total, &mut analytic_store)?;
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.store.iter().map(|(id, p)| (id, p.group.clone(), p.value.len())).collect();
    let mut picks = Vec::new();
    for grp in kind.trainable() {
        let members: Vec<_> = ids.iter().filter(|(_, g, _)| g == grp).collect();
        for k in 0..probes.max(1) {
            // Prefer entries with a nonzero gradient so the check is not vacuous.
            let (id, _, len) = members[(k + rng.gen_range(0..members.len())) % members.len()];
            let mut best = rng.gen_range(0..*len);
            for _ in 0..8 {
                if analytic_store.get(*id).grad.data[best] != 0.0 {
                    break;
                }
                best = rng.gen_range(0..*len);
            }
            picks.push((*id, best));
        }
    }
    let eval = |m: &Model| -> Result<f64> {
        let mut g = Graph::new();
        Ok(build_loss(&mut g, m, cfg, batch, kind, near, far)?.breakdown.total)
    };
    let mut analytic = Vec::with_capacity(picks.len());
    let mut numeric = Vec::with_capacity(picks.len());
    let mut probe = model.clone();
    for (id, i) in picks {
        let x = model.store.get(id).value.data[i];
        probe.store.get_mut(id).value.data[i] = x + step;
        let fp = eval(&probe)?;
        probe.store.get_mut(id).value.data[i] = x - step;
        let fm = eval(&probe)?;
        probe.store.get_mut(id).value.data[i] = x;
        numeric.push((fp - fm) / (2.0 * step));
        analytic.push(analytic_store.get(id).grad.data[i]);
    }
    let err = relative_error(&analytic, &numeric);
    Ok(CheckReport {
        name: format!("loss_{}", match kind {
            StepKind::BriEven => "bri_even",
            StepKind::BriOdd => "bri_odd",
            StepKind::Mdd => "mdd",
        }),
        max_rel_error: err,
        tolerance,
        passed: err < tolerance,
    })
}

/// Small in-memory scene for the end-to-end gradient checks.
pub fn gradcheck_dataset(seed: u64) -> Result<BlurryDataset> {
    let mut s = AnalyticScene::preset("moving-quad-64")?;
    s.width = 16;
    s.height = 16;
    s.num_frames = 4;
    s.intrinsics = s.intrinsics.scaled(0.25);
    synthesize(&s, "moving-quad-64", seed, ExposureConfig::default())
}

/// Full-objective gradient checks for every step kind on a 4-ray batch,
/// with nonzero latent screws so every warp carries gradient.
pub fn end_to_end_gradchecks(seed: u64, tolerance: f64) -> Result<Vec<CheckReport>> {
    let ds = gradcheck_dataset(seed)?;
    let cfg = TrainConfig {
        batch_size: 4,
        n_samples: 6,
        num_latent: 2,
        mlp: MlpSpec {
            trunk_depth: 2,
            trunk_width: 16,
            rgb_width: 8,
            local_depth: 1,
            local_width: 8,
        },
        staticness_bias: 0.0,
        seed,
        ..TrainConfig::desk()
    };
    let mut t = Trainer::new(cfg.clone(), &ds)?;
    spread_global_screws(&mut t.model, 0.01, seed);
    for f in 0..ds.num_frames() {
        let s = ScrewAxis::from_slice(&[0.003, -0.002, 0.001, 0.01, 0.0, -0.01]);
        t.model.set_base_screw(f, &s)?;
    }
    let batch = t.batch_at(1)?;
    [StepKind::BriEven, StepKind::BriOdd, StepKind::Mdd]
        .into_iter()
        .map(|kind| gradcheck_loss(&t.model, &cfg, &batch, kind, t.data.near, t.data.far, 3, 1e-6, tolerance, seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset() -> BlurryDataset {
        gradcheck_dataset(1).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            bri_iters: 6,
            mdd_iters: 4,
            batch_size: 8,
            n_samples: 6,
            num_latent: 2,
            mlp: MlpSpec {
                trunk_depth: 2,
                trunk_width: 16,
                rgb_width: 8,
                local_depth: 1,
                local_width: 8,
            },
            log_every: 1,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn profiles() {
        let p = TrainConfig::paper();
        assert_eq!((p.n_samples, p.num_latent, p.bri_iters, p.mdd_iters), (128, 6, 200_000, 100_000));
        assert_eq!((p.mlp.trunk_depth, p.mlp.trunk_width), (9, 256));
        let d = TrainConfig::desk();
        assert_eq!((d.n_samples, d.num_latent, d.bri_iters, d.mdd_iters, d.batch_size), (32, 4, 3000, 1500, 256));
        assert_eq!((d.mlp.trunk_depth, d.mlp.trunk_width), (4, 64));
        assert!("bogus".parse::<Profile>().is_err());
        let mut bad = d.clone();
        bad.mlp_lr.start = -1.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn parity_and_freeze_sets() {
        let ds = tiny_dataset();
        let mut t = Trainer::new(tiny_config(), &ds).unwrap();
        assert_eq!(t.state.step_kind(), StepKind::BriEven);
        let dyn0 = t.model.store.group_checksum(GROUP_DYNAMIC);
        let base0 = t.model.store.group_checksum(GROUP_SCREW_BASE);
        t.bri_step().unwrap();
        assert_eq!(t.model.store.group_checksum(GROUP_DYNAMIC), dyn0);
        assert_ne!(t.model.store.group_checksum(GROUP_SCREW_BASE), base0);
        assert_eq!(t.state.step_kind(), StepKind::BriOdd);
        let base1 = t.model.store.group_checksum(GROUP_SCREW_BASE);
        t.bri_step().unwrap();
        assert_eq!(t.model.store.group_checksum(GROUP_SCREW_BASE), base1);
        assert_ne!(t.model.store.group_checksum(GROUP_DYNAMIC), dyn0);
        assert!(t.mdd_step().is_err());
    }

    #[test]
    fn batches_are_seeded() {
        let ds = tiny_dataset();
        let t = Trainer::new(tiny_config(), &ds).unwrap();
        let a = t.batch_at(5).unwrap();
        let b = t.batch_at(5).unwrap();
        assert_eq!(a.grid, b.grid);
        assert_eq!(a.pixels, b.pixels);
        assert_ne!(t.batch_at(6).unwrap().pixels, a.pixels);
        assert_eq!(a.n_base, 8);
        assert_eq!(a.frames.len(), 8 + 2 * 2);
        for p in &a.patches {
            let (u, v) = a.pixels[p.rows[0]];
            assert_eq!(a.pixels[p.rows[1]], (u + 1, v));
            assert_eq!(a.pixels[p.rows[2]], (u, v + 1));
        }
        let s = &a.grid.samples;
        assert!(s.data.iter().all(|&x| x >= 1.0 && x <= 5.5));
    }

    #[test]
    fn full_run_is_deterministic_and_resumable() {
        let ds = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        let (_, s1, log) = run(tiny_config(), &ds, Some(dir.path())).unwrap();
        let (_, s2, _) = run(tiny_config(), &ds, None).unwrap();
        assert_eq!(s1.checksum, s2.checksum);
        assert_eq!(log.len(), 10);
        assert!(dir.path().join("model.ckpt").exists());
        let text = fs::read_to_string(dir.path().join("train.log")).unwrap();
        assert!(text.lines().next().unwrap().starts_with("it=0 stage=bri parity=even"));

        // Resume from the last first-stage checkpoint and finish.
        let mut cfg = tiny_config();
        cfg.bri_iters = 6;
        let dir2 = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(cfg.clone(), &ds).unwrap();
        t.set_output(dir2.path()).unwrap();
        for _ in 0..6 {
            t.step().unwrap();
        }
        let mut r = Trainer::resume(cfg, &ds, dir2.path()).unwrap();
        assert_eq!(r.state.stage, Stage::Mdd);
        let s3 = r.run().unwrap();
        assert_eq!(s3.checksum, s1.checksum);
    }

    #[test]
    fn mdd_keeps_base_screws_and_gates_local_mlp() {
        let ds = tiny_dataset();
        let mut cfg = tiny_config();
        cfg.bri_iters = 0;
        cfg.staticness_bias = 8.0;
        let mut t = Trainer::new(cfg.clone(), &ds).unwrap();
        assert_eq!(t.state.stage, Stage::Mdd);
        // Strongly static field: no ray is masked, so the local MLP gets
        // no gradient.
        let batch = t.batch_at(0).unwrap();
        let mut g = Graph::new();
        let l = build_loss(&mut g, &t.model, &cfg, &batch, StepKind::Mdd, t.data.near, t.data.far).unwrap();
        assert!(l.mask.iter().all(|m| !m));
        assert_eq!(l.lorr_rows, 0);
        let mut store = t.model.store.clone();
        g.backward_into(l.total, &mut store).unwrap();
        assert!(store.iter().filter(|(_, p)| p.group == GROUP_LOCAL).all(|(_, p)| p.grad.max_abs() == 0.0));
        let base = t.model.store.group_checksum(GROUP_SCREW_BASE);
        for _ in 0..4 {
            t.mdd_step().unwrap();
            assert_eq!(t.model.store.group_checksum(GROUP_SCREW_BASE), base);
        }
    }

    #[test]
    fn end_to_end_gradients_small_batch() {
        for r in end_to_end_gradchecks(5, 1e-3).unwrap() {
            assert!(r.passed, "{r:?}");
        }
    }
}
