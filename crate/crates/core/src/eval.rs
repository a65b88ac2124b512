//! Sharp inference from base rays and image-quality metrics.

use serde::{Serialize, Serializer};

use crate::data::{BlurryDataset, Image, Mask};
use crate::error::{Error, Result};
use crate::fields::Model;
use crate::render::{motion_mask, render_rays, Ray};
use crate::se3::{warp_ray, CameraPose};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

/// Rays per rendering chunk during inference.
pub const INFER_CHUNK: usize = 512;

/// Output of [`infer_frame`].
#[derive(Clone, Debug, PartialEq)]
pub struct InferredFrame {
    pub image: Image,
    pub p_dy: Vec<f64>,
    pub mask: Mask,
}

/// Base rays of frame `t`: pixel rays of `pose` warped by the learned `S_t`.
pub fn base_rays(model: &Model, pose: &CameraPose, t: usize, width: usize, height: usize, near: f64, far: f64) -> Result<Vec<Ray>> {
    let s = model.base_screw(t)?;
    let mut rays = Vec::with_capacity(width * height);
    for v in 0..height {
        for u in 0..width {
            let mut r = pose.pixel_ray(u as f64, v as f64, near, far, (u as u32, v as u32));
            r.frame = t;
            rays.push(warp_ray(&r, &s));
        }
    }
    Ok(rays)
}

/// Deterministic full-model render of frame `t` from `pose`, without blur
/// averaging.
pub fn infer_frame(
    model: &Model,
    pose: &CameraPose,
    t: usize,
    width: usize,
    height: usize,
    n_samples: usize,
    near: f64,
    far: f64,
) -> Result<InferredFrame> {
    let rays = base_rays(model, pose, t, width, height, near, far)?;
    let results = render_rays(model, &rays, n_samples, INFER_CHUNK)?;
    let mut image = Image::new(width, height);
    for (i, r) in results.iter().enumerate() {
        image.set_pixel(i % width, i / width, r.color_full.map(|c| c.clamp(0.0, 1.0)));
    }
    let p_dy: Vec<f64> = results.iter().map(|r| r.p_dy).collect();
    Ok(InferredFrame {
        mask: Mask {
            width,
            height,
            data: p_dy.iter().map(|&p| motion_mask(p)).collect(),
        },
        image,
        p_dy,
    })
}

fn check_shapes(a: &Image, b: &Image, region: Option<&Mask>) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::ShapeMismatch {
            op: "image metric",
            left: (a.height, a.width),
            right: (b.height, b.width),
        });
    }
    if let Some(m) = region {
        if (m.width, m.height) != (a.width, a.height) {
            return Err(Error::ShapeMismatch {
                op: "image metric region",
                left: (m.height, m.width),
                right: (a.height, a.width),
            });
        }
    }
    Ok(())
}

/// `10 log10(1 / MSE)` over pixels inside `region` (all pixels when
/// `None`); `+∞` when the images agree there.
pub fn psnr(a: &Image, b: &Image, region: Option<&Mask>) -> Result<f64> {
    check_shapes(a, b, region)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in 0..a.width * a.height {
        if region.is_some_and(|m| !m.data[p]) {
            continue;
        }
        for c in 0..3 {
            let d = a.data[3 * p + c] - b.data[3 * p + c];
            sum += d * d;
        }
        count += 3;
    }
    if count == 0 {
        return Err(Error::InvalidArgument("psnr region selects no pixels".into()));
    }
    let mse = sum / count as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|x| x / s).collect()
}

fn grayscale(img: &Image) -> Vec<f64> {
    img.data.chunks_exact(3).map(|c| (c[0] + c[1] + c[2]) / 3.0).collect()
}

/// Separable Gaussian filtering over valid window positions.
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut rows = vec![0.0; ow * h];
    for v in 0..h {
        for u in 0..ow {
            rows[v * ow + u] = (0..n).map(|i| k[i] * x[v * w + u + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for v in 0..oh {
        for u in 0..ow {
            out[v * ow + u] = (0..n).map(|i| k[i] * rows[(v + i) * ow + u]).sum();
        }
    }
    out
}

/// Mean SSIM of the channel-mean grayscale images over window centers
/// inside `region`.
pub fn ssim(a: &Image, b: &Image, region: Option<&Mask>) -> Result<f64> {
    check_shapes(a, b, region)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let k = gaussian_window();
    let (x, y) = (grayscale(a), grayscale(b));
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(s, t)| s * t).collect::<Vec<_>>();
    let mx = filter_valid(&x, w, h, &k);
    let my = filter_valid(&y, w, h, &k);
    let sxx = filter_valid(&prod(&x, &x), w, h, &k);
    let syy = filter_valid(&prod(&y, &y), w, h, &k);
    let sxy = filter_valid(&prod(&x, &y), w, h, &k);
    let ow = w - SSIM_WINDOW + 1;
    let half = SSIM_WINDOW / 2;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..mx.len() {
        let (u, v) = (i % ow + half, i / ow + half);
        if region.is_some_and(|m| !m.at(u, v)) {
            continue;
        }
        let (mu_x, mu_y) = (mx[i], my[i]);
        let vx = sxx[i] - mu_x * mu_x;
        let vy = syy[i] - mu_y * mu_y;
        let cxy = sxy[i] - mu_x * mu_y;
        total += ((2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cxy + SSIM_C2))
            / ((mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (vx + vy + SSIM_C2));
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidArgument("ssim region selects no window centers".into()));
    }
    Ok(total / count as f64)
}

/// `|A ∩ B| / |A ∪ B|`; one when both are empty.
pub fn mask_iou(pred: &Mask, truth: &Mask) -> Result<f64> {
    if (pred.width, pred.height) != (truth.width, truth.height) {
        return Err(Error::ShapeMismatch {
            op: "mask_iou",
            left: (pred.height, pred.width),
            right: (truth.height, truth.width),
        });
    }
    let inter = pred.data.iter().zip(&truth.data).filter(|(a, b)| **a && **b).count();
    let union = pred.data.iter().zip(&truth.data).filter(|(a, b)| **a || **b).count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// JSON has no infinity; emit it as the string `"inf"`.
fn ser_db<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if x.is_infinite() {
        s.serialize_str(if *x > 0.0 { "inf" } else { "-inf" })
    } else {
        s.serialize_f64(*x)
    }
}

fn ser_opt_db<S: Serializer>(x: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match x {
        Some(v) => ser_db(v, s),
        None => s.serialize_none(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameMetrics {
    pub frame: usize,
    #[serde(serialize_with = "ser_db")]
    pub psnr: f64,
    pub ssim: f64,
    #[serde(serialize_with = "ser_opt_db")]
    pub masked_psnr: Option<f64>,
    pub masked_ssim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub label: String,
    pub frames: Vec<FrameMetrics>,
    #[serde(serialize_with = "ser_db")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub frame_count: usize,
}

impl MetricReport {
    /// Metrics of `pred[i]` against `truth[i]` for frame ids `frames[i]`.
    pub fn compute(
        label: &str,
        frames: &[usize],
        pred: &[Image],
        truth: &[Image],
        regions: Option<&[Mask]>,
    ) -> Result<Self> {
        if pred.len() != truth.len() || pred.len() != frames.len() || pred.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "metric inputs need equal nonzero counts: {} frames, {} predictions, {} references",
                frames.len(),
                pred.len(),
                truth.len()
            )));
        }
        let mut rows = Vec::with_capacity(pred.len());
        for (i, (&frame, (p, t))) in frames.iter().zip(pred.iter().zip(truth)).enumerate() {
            let region = regions.map(|r| &r[i]);
            rows.push(FrameMetrics {
                frame,
                psnr: psnr(p, t, None)?,
                ssim: ssim(p, t, None)?,
                masked_psnr: region.map(|m| psnr(p, t, Some(m))).transpose()?,
                masked_ssim: region.map(|m| ssim(p, t, Some(m))).transpose()?,
            });
        }
        let n = rows.len() as f64;
        Ok(Self {
            label: label.to_owned(),
            mean_psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
            mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
            frame_count: rows.len(),
            frames: rows,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# {}\n{:>6} {:>10} {:>8} {:>12} {:>12}\n", self.label, "frame", "psnr_db", "ssim", "mpsnr_db", "mssim");
        let opt = |x: Option<f64>, p: usize| x.map_or_else(|| "-".to_owned(), |v| format!("{v:.p$}"));
        for r in &self.frames {
            s += &format!(
                "{:>6} {:>10.4} {:>8.4} {:>12} {:>12}\n",
                r.frame,
                r.psnr,
                r.ssim,
                opt(r.masked_psnr, 4),
                opt(r.masked_ssim, 4)
            );
        }
        s += &format!("{:>6} {:>10.4} {:>8.4}\n", "mean", self.mean_psnr, self.mean_ssim);
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Frames scored by the deblurring evaluation.
pub const EVAL_FRAMES: [usize; 4] = [3, 9, 15, 21];

/// Base-ray renders against sharp ground truth, with the blurry inputs as
/// the baseline.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeblurReport {
    pub model: MetricReport,
    pub blurry: MetricReport,
    #[serde(serialize_with = "ser_db")]
    pub gain_db: f64,
    pub mean_iou: f64,
    /// Mean of `1 - p_dy` over pixels outside the true motion mask.
    pub mean_static_prob: f64,
}

/// [`EVAL_FRAMES`] clipped to the dataset length; every frame when none fit.
pub fn eval_frames(num_frames: usize) -> Vec<usize> {
    let f: Vec<usize> = EVAL_FRAMES.iter().copied().filter(|&t| t < num_frames).collect();
    if f.is_empty() {
        (0..num_frames).collect()
    } else {
        f
    }
}

/// Scores `model` on `frames` of `ds` from the input (corrupted) poses.
pub fn evaluate_deblurring(model: &Model, ds: &BlurryDataset, frames: &[usize], n_samples: usize) -> Result<DeblurReport> {
    let (w, h) = (ds.meta.width, ds.meta.height);
    let mut pred = Vec::with_capacity(frames.len());
    let mut iou = 0.0;
    let mut static_prob = 0.0;
    for &t in frames {
        if t >= ds.num_frames() {
            return Err(Error::FrameOutOfRange {
                index: t,
                count: ds.num_frames(),
            });
        }
        let f = infer_frame(model, &ds.poses_corrupt[t], t, w, h, n_samples, ds.meta.near, ds.meta.far)?;
        iou += mask_iou(&f.mask, &ds.mask_true[t])?;
        let outside: Vec<f64> = f
            .p_dy
            .iter()
            .zip(&ds.mask_true[t].data)
            .filter(|(_, &m)| !m)
            .map(|(p, _)| 1.0 - p)
            .collect();
        static_prob += outside.iter().sum::<f64>() / outside.len().max(1) as f64;
        pred.push(f.image);
    }
    let truth: Vec<Image> = frames.iter().map(|&t| ds.sharp[t].clone()).collect();
    let blurry: Vec<Image> = frames.iter().map(|&t| ds.blurry[t].clone()).collect();
    let regions: Vec<Mask> = frames.iter().map(|&t| ds.mask_true[t].clone()).collect();
    let regions = regions.iter().all(|m| m.count() > 0).then_some(regions.as_slice());
    let model_report = MetricReport::compute("base-ray render vs sharp", frames, &pred, &truth, regions)?;
    let blurry_report = MetricReport::compute("blurry input vs sharp", frames, &blurry, &truth, regions)?;
    let n = frames.len() as f64;
    Ok(DeblurReport {
        gain_db: model_report.mean_psnr - blurry_report.mean_psnr,
        model: model_report,
        blurry: blurry_report,
        mean_iou: iou / n,
        mean_static_prob: static_prob / n,
    })
}
