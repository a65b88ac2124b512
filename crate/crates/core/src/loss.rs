//! Training objectives: photometric and masked photometric errors,
//! staticness maximization and local-geometry distillation.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::render::Ray;

/// Cross-product norms below this mark a pixel as degenerate.
pub const DEGENERATE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub sm: f64,
    pub lg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { sm: 0.002, lg: 0.075 }
    }
}

/// Per-component loss values of one step; `total` is their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub photo_dynamic: f64,
    pub photo_full: f64,
    pub mphoto_static: f64,
    pub sm: f64,
    pub lg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(photo_dynamic: f64, photo_full: f64, mphoto_static: f64, sm: f64, lg: f64) -> Self {
        Self {
            photo_dynamic,
            photo_full,
            mphoto_static,
            sm,
            lg,
            total: photo_dynamic + photo_full + mphoto_static + sm + lg,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.photo_dynamic, self.photo_full, self.mphoto_static, self.sm, self.lg, self.total]
            .iter()
            .all(|x| x.is_finite())
    }
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "total={:.6e} mphoto_s={:.6e} photo_d={:.6e} photo_full={:.6e} sm={:.6e} lg={:.6e}",
            self.total, self.mphoto_static, self.photo_dynamic, self.photo_full, self.sm, self.lg
        )
    }
}

fn sq_err(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean over pixels of the channel-summed squared error.
pub fn photometric(pred: &[[f64; 3]], target: &[[f64; 3]]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(target).map(|(a, b)| sq_err(a, b)).sum::<f64>() / pred.len() as f64
}

/// [`photometric`] with pixels where `mask` is set contributing zero.
pub fn masked_photometric(pred: &[[f64; 3]], target: &[[f64; 3]], mask: &[bool]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let s: f64 = pred
        .iter()
        .zip(target)
        .zip(mask)
        .filter(|(_, &m)| !m)
        .map(|((a, b), _)| sq_err(a, b))
        .sum();
    s / pred.len() as f64
}

/// `λ_sm · mean |log p_st|`.
pub fn staticness_max(p_st: &[f64], lambda: f64) -> Result<f64> {
    check_staticness(p_st)?;
    if p_st.is_empty() {
        return Ok(0.0);
    }
    Ok(lambda * p_st.iter().map(|p| p.ln().abs()).sum::<f64>() / p_st.len() as f64)
}

fn check_staticness(p_st: &[f64]) -> Result<()> {
    match p_st.iter().find(|&&p| !(p > 0.0 && p < 1.0)) {
        Some(&p) => Err(Error::StaticnessOutOfRange(p)),
        None => Ok(()),
    }
}

/// Unit normal from forward differences of back-projected points at
/// `p`, `p + (1, 0)` and `p + (0, 1)`; `None` when degenerate.
pub fn local_geometry_unit(rays: [&Ray; 3], depth: [f64; 3]) -> Option<Vector3<f64>> {
    let x0 = rays[0].at(depth[0]);
    let du = rays[1].at(depth[1]) - x0;
    let dv = rays[2].at(depth[2]) - x0;
    let c = du.cross(&dv);
    let n = c.norm();
    (n >= DEGENERATE_EPS && n.is_finite()).then(|| c / n)
}

/// `λ_lg · mean ‖ĝ − g‖²`; pairs with a degenerate side contribute zero.
pub fn lg_loss(pred: &[Option<Vector3<f64>>], target: &[Option<Vector3<f64>>], lambda: f64) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let s: f64 = pred
        .iter()
        .zip(target)
        .filter_map(|(a, b)| Some((a.as_ref()?, b.as_ref()?)))
        .map(|(a, b)| (a - b).norm_squared())
        .sum();
    lambda * s / pred.len() as f64
}

// Graph versions used by training.

/// `pred`: `r x 3`; `target`: `r x 3` values.
pub fn photometric_graph(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    let t = g.constant(target.clone());
    let d = g.sub(pred, t)?;
    let sq = g.mul(d, d)?;
    let per = g.sum_cols(sq);
    Ok(g.mean(per))
}

pub fn masked_photometric_graph(g: &mut Graph, pred: Var, target: &Tensor, mask: &[bool]) -> Result<Var> {
    let t = g.constant(target.clone());
    let keep = Tensor::from_vec(mask.len(), 1, mask.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect())?;
    let keep = g.constant(keep);
    let d = g.sub(pred, t)?;
    let sq = g.mul(d, d)?;
    let per = g.sum_cols(sq);
    let masked = g.mul(per, keep)?;
    Ok(g.mean(masked))
}

pub fn staticness_graph(g: &mut Graph, p_st: Var, lambda: f64) -> Result<Var> {
    check_staticness(&g.value(p_st).data)?;
    // |log p| = −log p on (0, 1).
    let l = g.log(p_st);
    let m = g.mean(l);
    Ok(g.scale(m, -lambda))
}

/// One supervised pixel: batch rows of the pixel and its right and down
/// neighbors, plus their pseudo-depths.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometryPatch {
    pub rows: [usize; 3],
    pub depth: [f64; 3],
}

/// Local-geometry loss over `patches`. `origins`/`dirs` are the batch ray
/// values (`r x 3`); `kappa` is the rendered `r x 1` ray distance.
pub fn lg_graph(
    g: &mut Graph,
    origins: &Tensor,
    dirs: &Tensor,
    kappa: Var,
    patches: &[GeometryPatch],
    lambda: f64,
) -> Result<Var> {
    if patches.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let ray = |row: usize| Ray {
        origin: Vector3::from_row_slice(origins.row(row)),
        direction: Vector3::from_row_slice(dirs.row(row)),
        frame: 0,
        pixel: (0, 0),
        near: 0.0,
        far: 0.0,
    };
    let kv = g.value(kappa).clone();
    let mut valid = Vec::new();
    let mut targets = Vec::new();
    for p in patches {
        let rs = p.rows.map(ray);
        let target = local_geometry_unit([&rs[0], &rs[1], &rs[2]], p.depth);
        let pred = local_geometry_unit([&rs[0], &rs[1], &rs[2]], p.rows.map(|r| kv.data[r]));
        if let (Some(t), Some(_)) = (target, pred) {
            valid.push(*p);
            targets.extend(t.iter().copied());
        }
    }
    if valid.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let pick = |k: usize| -> Vec<usize> { valid.iter().map(|p| p.rows[k]).collect() };
    let gather_const = |t: &Tensor, idx: &[usize]| Tensor {
        rows: idx.len(),
        cols: 3,
        data: idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect(),
    };
    let mut pts = Vec::with_capacity(3);
    for k in 0..3 {
        let idx = pick(k);
        let o = g.constant(gather_const(origins, &idx));
        let d = g.constant(gather_const(dirs, &idx));
        let kk = g.gather_rows(kappa, &idx)?;
        let step = g.mul(d, kk)?;
        pts.push(g.add(o, step)?);
    }
    let du = g.sub(pts[1], pts[0])?;
    let dv = g.sub(pts[2], pts[0])?;
    let c = g.cross3(du, dv)?;
    let n = g.normalize3(c)?;
    let t = g.constant(Tensor::from_vec(valid.len(), 3, targets)?);
    let diff = g.sub(n, t)?;
    let sq = g.mul(diff, diff)?;
    let s = g.sum(sq);
    Ok(g.scale(s, lambda / patches.len() as f64))
}
