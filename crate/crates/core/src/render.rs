//! Ray sampling and volume rendering: single-field and probabilistic
//! static/dynamic composition, dynamicness, motion masks and the expected
//! dynamic ray distance.

use nalgebra::Vector3;
use rand::Rng;

use crate::diffmath::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::fields::{FieldSample, Model};

/// Weight sums at or below this yield zero dynamicness.
pub const WEIGHT_EPS: f64 = 1e-8;

/// `r(κ) = o + κ d` for one pixel of one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub frame: usize,
    pub pixel: (u32, u32),
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, kappa: f64) -> Vector3<f64> {
        self.origin + self.direction * kappa
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.near < self.far && self.far.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "ray bounds need 0 < near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        if (self.direction.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "ray direction must be unit length, got norm {}",
                self.direction.norm()
            )));
        }
        Ok(())
    }
}

/// `N` uniform bins over `[near, far]` with one sample per bin.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrid {
    /// `N + 1` bin edges; the last equals `far`.
    pub boundaries: Vec<f64>,
    pub samples: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl SampleGrid {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Bins `[near, far]` into `n` equal segments. With an rng each sample is a
/// uniform draw inside its bin; without one it is the bin midpoint.
pub fn sample_along_ray<R: Rng + ?Sized>(ray: &Ray, n: usize, rng: Option<&mut R>) -> Result<SampleGrid> {
    if n < 1 {
        return Err(Error::InvalidArgument("need at least one sample per ray".into()));
    }
    ray.validate()?;
    let step = (ray.far - ray.near) / n as f64;
    let mut boundaries: Vec<f64> = (0..n).map(|i| ray.near + step * i as f64).collect();
    boundaries.push(ray.far);
    let deltas: Vec<f64> = boundaries.windows(2).map(|w| w[1] - w[0]).collect();
    let samples = match rng {
        Some(rng) => boundaries
            .windows(2)
            .map(|w| w[0] + (w[1] - w[0]) * rng.gen::<f64>())
            .collect(),
        None => boundaries.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect(),
    };
    Ok(SampleGrid {
        boundaries,
        samples,
        deltas,
    })
}

/// Output of [`composite`].
#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub color: [f64; 3],
    pub weights: Vec<f64>,
    /// `N + 1` values; the last is the residual transmittance.
    pub transmittance: Vec<f64>,
}

/// Alpha compositing of one field: `C = Σ T_n α_n c_n`.
pub fn composite(samples: &[FieldSample], grid: &SampleGrid) -> Result<Composite> {
    if samples.len() != grid.len() {
        return Err(Error::ShapeMismatch {
            op: "composite",
            left: (samples.len(), 1),
            right: (grid.len(), 1),
        });
    }
    let mut color = [0.0; 3];
    let mut weights = Vec::with_capacity(samples.len());
    let mut transmittance = Vec::with_capacity(samples.len() + 1);
    let mut t = 1.0;
    for (s, &delta) in samples.iter().zip(&grid.deltas) {
        transmittance.push(t);
        let e = (-s.sigma * delta).exp();
        let w = t * (1.0 - e);
        for (c, sc) in color.iter_mut().zip(s.color) {
            *c += w * sc;
        }
        weights.push(w);
        t *= e;
    }
    transmittance.push(t);
    Ok(Composite {
        color,
        weights,
        transmittance,
    })
}

/// Per-ray rendering output.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderResult {
    pub color_static: [f64; 3],
    pub color_dynamic: [f64; 3],
    pub color_full: [f64; 3],
    pub p_dy: f64,
    pub kappa_star: f64,
    /// Full-model compositing weights, one per sample.
    pub weights: Vec<f64>,
}

impl RenderResult {
    pub fn mask(&self) -> bool {
        motion_mask(self.p_dy)
    }
}

/// Probabilistic composition of a static and a dynamic field on one grid.
pub fn render_full(stat: &[FieldSample], dynamic: &[FieldSample], grid: &SampleGrid) -> Result<RenderResult> {
    if dynamic.len() != stat.len() {
        return Err(Error::ShapeMismatch {
            op: "render_full",
            left: (stat.len(), 1),
            right: (dynamic.len(), 1),
        });
    }
    let cs = composite(stat, grid)?;
    let cd = composite(dynamic, grid)?;
    let mut color_full = [0.0; 3];
    let mut weights = Vec::with_capacity(stat.len());
    let mut p_st = Vec::with_capacity(stat.len());
    let mut t = 1.0;
    for ((s, d), &delta) in stat.iter().zip(dynamic).zip(&grid.deltas) {
        let p = s.p_st.unwrap_or(1.0);
        let a_s = p * (1.0 - (-s.sigma * delta).exp());
        let a_d = (1.0 - p) * (1.0 - (-d.sigma * delta).exp());
        for ((c, sc), dc) in color_full.iter_mut().zip(s.color).zip(d.color) {
            *c += t * (a_s * sc + a_d * dc);
        }
        weights.push(t * (a_s + a_d));
        p_st.push(p);
        t *= (1.0 - a_s) * (1.0 - a_d);
    }
    let kappa_star = cd.weights.iter().zip(&grid.samples).map(|(w, s)| w * s).sum();
    Ok(RenderResult {
        color_static: cs.color,
        color_dynamic: cd.color,
        color_full,
        p_dy: dynamicness(&weights, &p_st),
        kappa_star,
        weights,
    })
}

/// `Σ_n ŵ_n (1 − p_st,n)` with the full weights normalized to sum one;
/// zero when the weight sum is at most [`WEIGHT_EPS`].
pub fn dynamicness(weights: &[f64], p_st: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    if total <= WEIGHT_EPS {
        return 0.0;
    }
    let acc: f64 = weights.iter().zip(p_st).map(|(w, p)| w * (1.0 - p)).sum();
    (acc / total).clamp(0.0, 1.0)
}

/// Strict threshold at one half.
pub fn motion_mask(p_dy: f64) -> bool {
    p_dy > 0.5
}

/// Sample distances and segment lengths for a batch of rays (`r x n` each).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchGrid {
    pub samples: Tensor,
    pub deltas: Tensor,
}

impl BatchGrid {
    pub fn from_grids(grids: &[SampleGrid]) -> Result<Self> {
        let n = grids.first().map_or(0, SampleGrid::len);
        if grids.iter().any(|g| g.len() != n) {
            return Err(Error::InvalidArgument("all grids in a batch need the same sample count".into()));
        }
        let r = grids.len();
        let samples = Tensor::from_vec(r, n, grids.iter().flat_map(|g| g.samples.iter().copied()).collect())?;
        let deltas = Tensor::from_vec(r, n, grids.iter().flat_map(|g| g.deltas.iter().copied()).collect())?;
        Ok(Self { samples, deltas })
    }

    pub fn rays(&self) -> usize {
        self.samples.rows
    }

    pub fn per_ray(&self) -> usize {
        self.samples.cols
    }

    /// Grid for rows `idx` of this batch.
    pub fn select(&self, idx: &[usize]) -> Self {
        let pick = |t: &Tensor| Tensor {
            rows: idx.len(),
            cols: t.cols,
            data: idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect(),
        };
        Self {
            samples: pick(&self.samples),
            deltas: pick(&self.deltas),
        }
    }
}

/// Graph handles for a batch of `r` rays rendered with `n` samples each.
#[derive(Clone, Debug)]
pub struct BatchRender {
    pub color_static: Var,
    pub color_dynamic: Var,
    pub color_full: Var,
    /// Expected dynamic ray distance (`r x 1`).
    pub kappa_star: Var,
    /// Staticness at every sample (`r*n x 1`).
    pub p_st: Var,
    /// Dynamicness per ray; computed without gradient.
    pub p_dy: Vec<f64>,
    /// Full-model weights (`r x n`), values only.
    pub weights: Tensor,
}

impl BatchRender {
    pub fn mask(&self) -> Vec<bool> {
        self.p_dy.iter().map(|&p| motion_mask(p)).collect()
    }
}

/// `T_n = Π_{k<n} e_k` and `w_n = T_n (1 − e_n)` for `e = exp(−σδ)` rows.
fn alpha_weights(g: &mut Graph, sigma: Var, deltas: Var) -> Result<(Var, Var)> {
    let neg = g.scale(sigma, -1.0);
    let od = g.mul(neg, deltas)?;
    let keep = g.exp(od);
    let alpha = g.one_minus(keep);
    let trans = g.cumprod_exclusive(keep);
    let w = g.mul(trans, alpha)?;
    Ok((alpha, w))
}

/// `Σ_n w_n c_n` per ray from `r x n` weights and `r*n x 3` colors.
fn weighted_color(g: &mut Graph, w: Var, color: Var, n: usize) -> Result<Var> {
    let (r, _) = g.shape(w);
    let col = g.reshape(w, r * n, 1)?;
    let wc = g.mul(color, col)?;
    g.sum_groups(wc, n)
}

/// Renders `r` rays (`r x 3` origins and unit directions) through both
/// fields. `frames` selects each ray's latent code.
pub fn render_batch(
    g: &mut Graph,
    model: &Model,
    origins: Var,
    dirs: Var,
    frames: &[usize],
    grid: &BatchGrid,
) -> Result<BatchRender> {
    let (r, n) = (grid.rays(), grid.per_ray());
    if g.shape(origins) != (r, 3) || g.shape(dirs) != (r, 3) || frames.len() != r {
        return Err(Error::ShapeMismatch {
            op: "render_batch",
            left: g.shape(origins),
            right: (r, 3),
        });
    }
    let enc = model.config.encoding;
    let rep: Vec<usize> = (0..r).flat_map(|i| std::iter::repeat(i).take(n)).collect();

    let dist = g.constant(Tensor::from_vec(r * n, 1, grid.samples.data.clone())?);
    let o = g.gather_rows(origins, &rep)?;
    let d = g.gather_rows(dirs, &rep)?;
    let step = g.mul(d, dist)?;
    let pts = g.add(o, step)?;
    let pts = g.scale(pts, enc.position_scale);
    let pos_enc = g.posenc(pts, enc.position_levels);
    let ray_dir_enc = g.posenc(dirs, enc.direction_levels);
    let dir_enc = g.gather_rows(ray_dir_enc, &rep)?;
    let codes = model.glo_codes(g, frames)?;
    let codes = g.gather_rows(codes, &rep)?;

    let fs = model.static_field(g, pos_enc, dir_enc)?;
    let fd = model.dynamic_field(g, pos_enc, dir_enc, codes)?;
    let p_col = fs.p_st.ok_or_else(|| Error::InvalidArgument("static field lacks staticness head".into()))?;

    let deltas = g.constant(grid.deltas.clone());
    let sigma_s = g.reshape(fs.sigma, r, n)?;
    let sigma_d = g.reshape(fd.sigma, r, n)?;
    let (alpha_s, w_s) = alpha_weights(g, sigma_s, deltas)?;
    let (alpha_d, w_d) = alpha_weights(g, sigma_d, deltas)?;
    let color_static = weighted_color(g, w_s, fs.color, n)?;
    let color_dynamic = weighted_color(g, w_d, fd.color, n)?;

    let p = g.reshape(p_col, r, n)?;
    let q = g.one_minus(p);
    let a_s = g.mul(p, alpha_s)?;
    let a_d = g.mul(q, alpha_d)?;
    let keep_s = g.one_minus(a_s);
    let keep_d = g.one_minus(a_d);
    let keep = g.mul(keep_s, keep_d)?;
    let trans = g.cumprod_exclusive(keep);
    let wf_s = g.mul(trans, a_s)?;
    let wf_d = g.mul(trans, a_d)?;
    let cf_s = weighted_color(g, wf_s, fs.color, n)?;
    let cf_d = weighted_color(g, wf_d, fd.color, n)?;
    let color_full = g.add(cf_s, cf_d)?;

    let s = g.constant(grid.samples.clone());
    let ws = g.mul(w_d, s)?;
    let kappa_star = g.sum_cols(ws);

    let mut weights = g.value(wf_s).clone();
    weights.add_assign(g.value(wf_d));
    let pv = g.value(p);
    let p_dy = (0..r).map(|i| dynamicness(weights.row(i), pv.row(i))).collect();

    Ok(BatchRender {
        color_static,
        color_dynamic,
        color_full,
        kappa_star,
        p_st: p_col,
        p_dy,
        weights,
    })
}

/// Builds `r x 3` origin and direction constants from rays.
pub fn ray_tensors(rays: &[Ray]) -> Result<(Tensor, Tensor)> {
    let o = rays.iter().flat_map(|r| r.origin.iter().copied()).collect();
    let d = rays.iter().flat_map(|r| r.direction.iter().copied()).collect();
    Ok((Tensor::from_vec(rays.len(), 3, o)?, Tensor::from_vec(rays.len(), 3, d)?))
}

/// Deterministic midpoint renders of `rays`, evaluated in chunks.
pub fn render_rays(model: &Model, rays: &[Ray], n: usize, chunk: usize) -> Result<Vec<RenderResult>> {
    let mut out = Vec::with_capacity(rays.len());
    for part in rays.chunks(chunk.max(1)) {
        let grids = part
            .iter()
            .map(|r| sample_along_ray::<rand::rngs::ThreadRng>(r, n, None))
            .collect::<Result<Vec<_>>>()?;
        let grid = BatchGrid::from_grids(&grids)?;
        let (o, d) = ray_tensors(part)?;
        let mut g = Graph::new();
        let o = g.constant(o);
        let d = g.constant(d);
        let frames: Vec<usize> = part.iter().map(|r| r.frame).collect();
        let br = render_batch(&mut g, model, o, d, &frames, &grid)?;
        out.extend(read_results(&g, &br));
    }
    Ok(out)
}

/// Per-ray values of a batch render.
pub fn read_results(g: &Graph, br: &BatchRender) -> Vec<RenderResult> {
    let cs = g.value(br.color_static);
    let cd = g.value(br.color_dynamic);
    let cf = g.value(br.color_full);
    let k = g.value(br.kappa_star);
    (0..cs.rows)
        .map(|i| RenderResult {
            color_static: cs.row3(i),
            color_dynamic: cd.row3(i),
            color_full: cf.row3(i),
            p_dy: br.p_dy[i],
            kappa_star: k.data[i],
            weights: br.weights.row(i).to_vec(),
        })
        .collect()
}
