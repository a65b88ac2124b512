//! Blur formation: global latent rays from per-frame screws, local
//! refinement of rays that hit moving content, and the blur average.

use crate::diffmath::{Graph, Var};
use crate::error::Result;
use crate::fields::Model;
use crate::render::{render_rays, Ray, RenderResult};
use crate::se3::{warp_ray, warp_rays_graph};

/// A base ray and its latent sharp rays.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentRayBundle {
    pub base: Ray,
    pub latent: Vec<Ray>,
    /// Base-ray motion mask; selects local refinement for the whole bundle.
    pub dynamic: bool,
    /// Number of local refinements applied while building the bundle.
    pub lorr_calls: usize,
}

/// Latent ray `q` is the base ray warped by the global screw `S^g_{t;q}`.
pub fn gmrp(base: &Ray, model: &Model, t: usize) -> Result<Vec<Ray>> {
    (0..model.num_latent())
        .map(|q| Ok(warp_ray(base, &model.global_screw(t, q)?)))
        .collect()
}

/// Refines a latent ray by its predicted local screw.
pub fn lorr(ray: &Ray, model: &Model, t: usize) -> Result<Ray> {
    let s = model.local_screw(ray, t)?;
    Ok(warp_ray(ray, &s))
}

/// Builds the bundle; local refinement runs only when `dynamic` is set.
pub fn build_bundle(base: &Ray, model: &Model, dynamic: bool) -> Result<LatentRayBundle> {
    let t = base.frame;
    let mut latent = gmrp(base, model, t)?;
    let mut lorr_calls = 0;
    if dynamic {
        for r in &mut latent {
            *r = lorr(r, model, t)?;
            lorr_calls += 1;
        }
    }
    Ok(LatentRayBundle {
        base: *base,
        latent,
        dynamic,
        lorr_calls,
    })
}

/// `(C_base + Σ_q C_q) / (N_b + 1)`.
pub fn blur_average(base: [f64; 3], latent: &[[f64; 3]]) -> [f64; 3] {
    let mut acc = base;
    for c in latent {
        for (a, x) in acc.iter_mut().zip(c) {
            *a += x;
        }
    }
    let k = (latent.len() + 1) as f64;
    acc.map(|a| a / k)
}

/// Blurry static, dynamic and full colors of one base ray.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurryColors {
    pub color_static: [f64; 3],
    pub color_dynamic: [f64; 3],
    pub color_full: [f64; 3],
    pub base: RenderResult,
    pub bundle: LatentRayBundle,
}

/// Renders the base ray, masks it, builds and renders the bundle and
/// averages each color separately.
pub fn blurry_render(base: &Ray, model: &Model, n_samples: usize) -> Result<BlurryColors> {
    let b = render_rays(model, std::slice::from_ref(base), n_samples, 1)?.remove(0);
    let bundle = build_bundle(base, model, b.mask())?;
    let latent = render_rays(model, &bundle.latent, n_samples, bundle.latent.len().max(1))?;
    let avg = |f: fn(&RenderResult) -> [f64; 3]| blur_average(f(&b), &latent.iter().map(f).collect::<Vec<_>>());
    Ok(BlurryColors {
        color_static: avg(|r| r.color_static),
        color_dynamic: avg(|r| r.color_dynamic),
        color_full: avg(|r| r.color_full),
        base: b,
        bundle,
    })
}

/// Latent rays of a batch, ordered ray-major (`i * N_b + q`).
#[derive(Clone, Debug)]
pub struct LatentBatch {
    pub origins: Var,
    pub dirs: Var,
    pub frames: Vec<usize>,
    /// Base-ray index of every latent row.
    pub base_index: Vec<usize>,
    pub lorr_rows: usize,
}

/// Differentiable bundle construction for `r` base rays. `mask[i]` gates
/// local refinement for all latent rays of base ray `i`.
pub fn latent_rays_graph(
    g: &mut Graph,
    model: &Model,
    origins: Var,
    dirs: Var,
    frames: &[usize],
    mask: &[bool],
    near: f64,
    far: f64,
) -> Result<LatentBatch> {
    let nb = model.num_latent();
    let r = frames.len();
    let base_index: Vec<usize> = (0..r).flat_map(|i| std::iter::repeat(i).take(nb)).collect();
    let lat_frames: Vec<usize> = base_index.iter().map(|&i| frames[i]).collect();
    let q: Vec<usize> = (0..r).flat_map(|_| 0..nb).collect();

    let o = g.gather_rows(origins, &base_index)?;
    let d = g.gather_rows(dirs, &base_index)?;
    let screws = model.global_screws(g, &lat_frames, &q)?;
    let w = g.slice_cols(screws, 0, 3)?;
    let v = g.slice_cols(screws, 3, 6)?;
    let (mut o, mut d) = warp_rays_graph(g, o, d, w, v)?;

    let refine: Vec<usize> = (0..base_index.len()).filter(|&k| mask[base_index[k]]).collect();
    if !refine.is_empty() {
        let keep: Vec<usize> = (0..base_index.len()).filter(|&k| !mask[base_index[k]]).collect();
        let ro = g.gather_rows(o, &refine)?;
        let rd = g.gather_rows(d, &refine)?;
        let rf: Vec<usize> = refine.iter().map(|&k| lat_frames[k]).collect();
        let s = model.local_screws_graph(g, ro, rd, &rf, near, far)?;
        let w = g.slice_cols(s, 0, 3)?;
        let v = g.slice_cols(s, 3, 6)?;
        let (ro, rd) = warp_rays_graph(g, ro, rd, w, v)?;
        // Restore ray-major order after splitting kept and refined rows.
        let mut perm = vec![0; base_index.len()];
        for (pos, &k) in keep.iter().chain(&refine).enumerate() {
            perm[k] = pos;
        }
        let ko = g.gather_rows(o, &keep)?;
        let kd = g.gather_rows(d, &keep)?;
        let all_o = g.concat_rows(&[ko, ro])?;
        let all_d = g.concat_rows(&[kd, rd])?;
        o = g.gather_rows(all_o, &perm)?;
        d = g.gather_rows(all_d, &perm)?;
    }
    Ok(LatentBatch {
        origins: o,
        dirs: d,
        frames: lat_frames,
        base_index,
        lorr_rows: refine.len(),
    })
}

/// Batched blur average: `base` is `r x 3`, `latent` is `r*nb x 3` in
/// ray-major order.
pub fn blur_average_graph(g: &mut Graph, base: Var, latent: Var, nb: usize) -> Result<Var> {
    if nb == 0 {
        return Ok(base);
    }
    let sum = g.sum_groups(latent, nb)?;
    let total = g.add(base, sum)?;
    Ok(g.scale(total, 1.0 / (nb + 1) as f64))
}

#[cfg(test)]
mod tests {
    use nalgebra::Vector3;

    use super::*;
    use crate::diffmath::Tensor;
    use crate::fields::{MlpSpec, ModelConfig};
    use crate::se3::ScrewAxis;

    fn model(nb: usize) -> Model {
        let cfg = ModelConfig {
            mlp: MlpSpec {
                trunk_depth: 2,
                trunk_width: 12,
                rgb_width: 8,
                local_depth: 2,
                local_width: 8,
            },
            num_frames: 2,
            num_latent: nb,
            ..ModelConfig::default()
        };
        Model::new(cfg, 17).unwrap()
    }

    fn base() -> Ray {
        Ray {
            origin: Vector3::new(0.0, 0.0, -2.0),
            direction: Vector3::new(0.05, 0.02, 1.0).normalize(),
            frame: 1,
            pixel: (3, 4),
            near: 0.5,
            far: 4.0,
        }
    }

    fn screw(k: f64) -> ScrewAxis {
        ScrewAxis::from_slice(&[0.01 * k, -0.02 * k, 0.015 * k, 0.03 * k, 0.01, -0.02 * k])
    }

    #[test]
    fn zero_screws_give_base_ray() {
        let m = model(3);
        let rays = gmrp(&base(), &m, 1).unwrap();
        assert_eq!(rays.len(), 3);
        for r in rays {
            assert_eq!(r.origin, base().origin);
            assert!((r.direction - base().direction).norm() < 1e-15);
            assert_eq!((r.frame, r.pixel), (1, (3, 4)));
        }
        assert!(gmrp(&base(), &model(0), 1).unwrap().is_empty());
    }

    #[test]
    fn distinct_screws_match_standalone_warps() {
        let mut m = model(3);
        for q in 0..3 {
            m.set_global_screw(1, q, &screw(q as f64 + 1.0)).unwrap();
        }
        let rays = gmrp(&base(), &m, 1).unwrap();
        for (q, r) in rays.iter().enumerate() {
            assert_eq!(*r, warp_ray(&base(), &screw(q as f64 + 1.0)));
        }
        assert_ne!(rays[0], rays[1]);
    }

    #[test]
    fn lorr_identity_and_gating() {
        let m = model(2);
        assert_eq!(lorr(&base(), &m, 1).unwrap().origin, base().origin);
        let b = build_bundle(&base(), &m, false).unwrap();
        assert_eq!(b.lorr_calls, 0);
        let b = build_bundle(&base(), &m, true).unwrap();
        assert_eq!(b.lorr_calls, 2);
    }

    #[test]
    fn lorr_matches_warp_with_predicted_screw() {
        let mut m = model(2);
        let id = m.store.id("local.out.b").unwrap();
        m.store.get_mut(id).value = Tensor::from_vec(1, 6, vec![0.02, 0.01, -0.03, 0.05, -0.04, 0.02]).unwrap();
        let s = m.local_screw(&base(), 1).unwrap();
        assert!(s.angle() > 0.0);
        assert_eq!(lorr(&base(), &m, 1).unwrap(), warp_ray(&base(), &s));
    }

    #[test]
    fn averaging() {
        assert_eq!(blur_average([0.2, 0.3, 0.4], &[]), [0.2, 0.3, 0.4]);
        assert_eq!(blur_average([0.0; 3], &[[1.0; 3]]), [0.5; 3]);
        let c = [0.25, 0.5, 0.75];
        assert_eq!(blur_average(c, &[c, c, c]), c);
        let a = blur_average([0.1, 0.2, 0.3], &[[0.9, 0.1, 0.5], [0.4, 0.4, 0.0]]);
        let b = blur_average([0.1, 0.2, 0.3], &[[0.4, 0.4, 0.0], [0.9, 0.1, 0.5]]);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_init_blurry_render_equals_sharp_render() {
        let m = model(3);
        let b = blurry_render(&base(), &m, 8).unwrap();
        for i in 0..3 {
            assert!((b.color_full[i] - b.base.color_full[i]).abs() < 1e-12);
            assert!((b.color_static[i] - b.base.color_static[i]).abs() < 1e-12);
            assert!((b.color_dynamic[i] - b.base.color_dynamic[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_bundle_matches_plain_bundle() {
        let mut m = model(2);
        for q in 0..2 {
            m.set_global_screw(0, q, &screw(q as f64 + 0.5)).unwrap();
            m.set_global_screw(1, q, &screw(-(q as f64) - 1.0)).unwrap();
        }
        let id = m.store.id("local.out.b").unwrap();
        m.store.get_mut(id).value = Tensor::from_vec(1, 6, vec![0.01, 0.0, 0.02, -0.03, 0.0, 0.01]).unwrap();
        let mut b2 = base();
        b2.frame = 0;
        b2.direction = Vector3::new(-0.1, 0.0, 1.0).normalize();
        let rays = [base(), b2];
        let mask = [true, false];
        let (o, d) = crate::render::ray_tensors(&rays).unwrap();
        let mut g = Graph::new();
        let o = g.constant(o);
        let d = g.constant(d);
        let lb = latent_rays_graph(&mut g, &m, o, d, &[1, 0], &mask, 0.5, 4.0).unwrap();
        assert_eq!(lb.lorr_rows, 2);
        assert_eq!(lb.base_index, vec![0, 0, 1, 1]);
        for (i, r) in rays.iter().enumerate() {
            let bundle = build_bundle(r, &m, mask[i]).unwrap();
            for (q, lr) in bundle.latent.iter().enumerate() {
                let row = i * 2 + q;
                let go = g.value(lb.origins).row3(row);
                let gd = g.value(lb.dirs).row3(row);
                for k in 0..3 {
                    assert!((go[k] - lr.origin[k]).abs() < 1e-12);
                    assert!((gd[k] - lr.direction[k]).abs() < 1e-12);
                }
            }
        }
    }
}
