//! Learnable function approximators: encodings, the static and dynamic
//! radiance fields, the local object-motion MLP, per-frame latent codes and
//! the screw embedding tables.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffmath::{posenc_values, Activation, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::render::Ray;
use crate::se3::ScrewAxis;

/// The staticness head maps into `[ε, 1 − ε]` so `log p_st` stays finite
/// when the sigmoid saturates.
pub const STATICNESS_EPS: f64 = 1e-6;

pub const GROUP_STATIC: &str = "static";
pub const GROUP_DYNAMIC: &str = "dynamic";
pub const GROUP_LOCAL: &str = "local";
pub const GROUP_SCREW_BASE: &str = "screw_base";
pub const GROUP_SCREW_GLOBAL: &str = "screw_global";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncodingConfig {
    pub position_levels: usize,
    pub direction_levels: usize,
    pub glo_dim: usize,
    /// Samples per ray in the discretized ray embedding.
    pub ray_samples: usize,
    /// Frequency levels applied to each ray-embedding sample.
    pub ray_levels: usize,
    /// World positions are multiplied by this before encoding.
    pub position_scale: f64,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            position_levels: 8,
            direction_levels: 4,
            glo_dim: 8,
            ray_samples: 32,
            ray_levels: 2,
            position_scale: 1.0,
        }
    }
}

impl EncodingConfig {
    pub fn position_dim(&self) -> usize {
        3 * (1 + 2 * self.position_levels)
    }

    pub fn direction_dim(&self) -> usize {
        3 * (1 + 2 * self.direction_levels)
    }

    pub fn ray_embedding_dim(&self) -> usize {
        self.ray_samples * 3 * (1 + 2 * self.ray_levels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.position_levels == 0
            || self.direction_levels == 0
            || self.glo_dim == 0
            || self.ray_samples < 2
            || self.ray_levels == 0
            || !(self.position_scale > 0.0 && self.position_scale.is_finite())
        {
            return Err(Error::InvalidArgument(format!("encoding sizes must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Layer counts and widths. The sigma and staticness heads are single linear
/// layers; the rgb head is one hidden layer plus the output layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpSpec {
    pub trunk_depth: usize,
    pub trunk_width: usize,
    pub rgb_width: usize,
    pub local_depth: usize,
    pub local_width: usize,
}

impl Default for MlpSpec {
    fn default() -> Self {
        Self {
            trunk_depth: 9,
            trunk_width: 256,
            rgb_width: 128,
            local_depth: 8,
            local_width: 128,
        }
    }
}

impl MlpSpec {
    pub fn desk() -> Self {
        Self {
            trunk_depth: 4,
            trunk_width: 64,
            rgb_width: 64,
            local_depth: 3,
            local_width: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.trunk_depth, self.trunk_width, self.rgb_width, self.local_depth, self.local_width].contains(&0) {
            return Err(Error::InvalidArgument(format!("layer counts and widths must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoding: EncodingConfig,
    pub mlp: MlpSpec,
    pub num_frames: usize,
    pub num_latent: usize,
    pub glo_init_std: f64,
    /// Initial bias of the staticness head.
    pub staticness_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoding: EncodingConfig::default(),
            mlp: MlpSpec::default(),
            num_frames: 1,
            num_latent: 6,
            glo_init_std: 0.01,
            staticness_bias: 0.0,
        }
    }
}

/// Per-point field output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldSample {
    pub color: [f64; 3],
    pub sigma: f64,
    /// Staticness probability; only the static field produces it.
    pub p_st: Option<f64>,
}

/// Graph handles of a batch of field evaluations (`m` points).
#[derive(Clone, Copy, Debug)]
pub struct FieldVars {
    /// `m x 1`
    pub sigma: Var,
    /// `m x 3`
    pub color: Var,
    /// `m x 1`, static field only.
    pub p_st: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var, act: Activation) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.dense(x, w, b, act)
    }
}

#[derive(Clone, Debug)]
struct FieldNet {
    trunk: Vec<Dense>,
    sigma: Dense,
    rgb_hidden: Dense,
    rgb_out: Dense,
    staticness: Option<Dense>,
}

/// The full set of learnable components and their parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    static_net: FieldNet,
    dynamic_net: FieldNet,
    local_net: Vec<Dense>,
    local_out: Dense,
    glo: ParamId,
    screw_base: ParamId,
    screw_global: ParamId,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    /// Uniform fan-in init: `±sqrt(6/fan_in)` for relu layers,
    /// `±sqrt(3/fan_in)` for output layers; zero bias.
    fn dense(&mut self, name: &str, group: &str, fan_in: usize, fan_out: usize, hidden: bool) -> Result<Dense> {
        let bound = if hidden {
            (6.0 / fan_in as f64).sqrt()
        } else {
            (3.0 / fan_in as f64).sqrt()
        };
        let data = (0..fan_in * fan_out).map(|_| self.rng.gen_range(-bound..bound)).collect();
        let w = self.store.add(format!("{name}.w"), group, Tensor::from_vec(fan_in, fan_out, data)?)?;
        let b = self.store.add(format!("{name}.b"), group, Tensor::zeros(1, fan_out))?;
        Ok(Dense { w, b })
    }

    fn zero_dense(&mut self, name: &str, group: &str, fan_in: usize, fan_out: usize) -> Result<Dense> {
        let w = self.store.add(format!("{name}.w"), group, Tensor::zeros(fan_in, fan_out))?;
        let b = self.store.add(format!("{name}.b"), group, Tensor::zeros(1, fan_out))?;
        Ok(Dense { w, b })
    }

    fn field(&mut self, prefix: &str, group: &str, cfg: &ModelConfig, extra_in: usize, staticness: bool) -> Result<FieldNet> {
        let m = &cfg.mlp;
        let mut trunk = Vec::with_capacity(m.trunk_depth);
        let mut fan_in = cfg.encoding.position_dim() + extra_in;
        for i in 0..m.trunk_depth {
            trunk.push(self.dense(&format!("{prefix}.trunk.{i}"), group, fan_in, m.trunk_width, true)?);
            fan_in = m.trunk_width;
        }
        let sigma = self.dense(&format!("{prefix}.sigma"), group, m.trunk_width, 1, false)?;
        let rgb_hidden = self.dense(
            &format!("{prefix}.rgb.0"),
            group,
            m.trunk_width + cfg.encoding.direction_dim(),
            m.rgb_width,
            true,
        )?;
        let rgb_out = self.dense(&format!("{prefix}.rgb.1"), group, m.rgb_width, 3, false)?;
        let staticness = if staticness {
            let d = self.dense(&format!("{prefix}.staticness"), group, m.trunk_width, 1, false)?;
            self.store.get_mut(d.b).value.data.fill(cfg.staticness_bias);
            Some(d)
        } else {
            None
        };
        Ok(FieldNet {
            trunk,
            sigma,
            rgb_hidden,
            rgb_out,
            staticness,
        })
    }
}

impl Model {
    /// Fresh model; screw tables start at zero and the local MLP's output
    /// layer is zero so every warp is the identity.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.encoding.validate()?;
        config.mlp.validate()?;
        if config.num_frames == 0 {
            return Err(Error::InvalidArgument("model needs at least one frame".into()));
        }
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let enc = config.encoding;
        let static_net = init.field("static", GROUP_STATIC, &config, 0, true)?;
        let dynamic_net = init.field("dynamic", GROUP_DYNAMIC, &config, enc.glo_dim, false)?;

        let normal = Normal::new(0.0, config.glo_init_std.max(0.0))
            .map_err(|e| Error::InvalidArgument(format!("glo init: {e}")))?;
        let codes = (0..config.num_frames * enc.glo_dim)
            .map(|_| normal.sample(&mut init.rng))
            .collect();
        let glo = init.store.add(
            "dynamic.glo",
            GROUP_DYNAMIC,
            Tensor::from_vec(config.num_frames, enc.glo_dim, codes)?,
        )?;

        let mut local_net = Vec::new();
        let mut fan_in = enc.ray_embedding_dim() + enc.glo_dim;
        for i in 0..config.mlp.local_depth {
            local_net.push(init.dense(&format!("local.{i}"), GROUP_LOCAL, fan_in, config.mlp.local_width, true)?);
            fan_in = config.mlp.local_width;
        }
        let local_out = init.zero_dense("local.out", GROUP_LOCAL, fan_in, 6)?;

        let screw_base = init
            .store
            .add("screw.base", GROUP_SCREW_BASE, Tensor::zeros(config.num_frames, 6))?;
        let screw_global = init.store.add(
            "screw.global",
            GROUP_SCREW_GLOBAL,
            Tensor::zeros(config.num_frames * config.num_latent, 6),
        )?;

        Ok(Self {
            config,
            store,
            static_net,
            dynamic_net,
            local_net,
            local_out,
            glo,
            screw_base,
            screw_global,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.config.num_frames
    }

    pub fn num_latent(&self) -> usize {
        self.config.num_latent
    }

    pub fn check_frame(&self, t: usize) -> Result<()> {
        if t >= self.config.num_frames {
            return Err(Error::FrameOutOfRange {
                index: t,
                count: self.config.num_frames,
            });
        }
        Ok(())
    }

    fn check_frames(&self, frames: &[usize]) -> Result<()> {
        frames.iter().try_for_each(|&t| self.check_frame(t))
    }

    pub fn screw_base_id(&self) -> ParamId {
        self.screw_base
    }

    pub fn screw_global_id(&self) -> ParamId {
        self.screw_global
    }

    pub fn glo_id(&self) -> ParamId {
        self.glo
    }

    /// Learned base screw `S_t`.
    pub fn base_screw(&self, t: usize) -> Result<ScrewAxis> {
        self.check_frame(t)?;
        Ok(ScrewAxis::from_slice(self.store.get(self.screw_base).value.row(t)))
    }

    /// Learned global screw `S^g_{t;q}`.
    pub fn global_screw(&self, t: usize, q: usize) -> Result<ScrewAxis> {
        self.check_frame(t)?;
        if q >= self.config.num_latent {
            return Err(Error::InvalidArgument(format!("latent index {q} >= {}", self.config.num_latent)));
        }
        let row = t * self.config.num_latent + q;
        Ok(ScrewAxis::from_slice(self.store.get(self.screw_global).value.row(row)))
    }

    /// Replaces the latent screw table with `k` zero screws per frame,
    /// discarding its optimizer state.
    pub fn set_num_latent(&mut self, k: usize) -> Result<()> {
        if k > 10 {
            return Err(Error::InvalidArgument(format!("num_latent {k} exceeds 10")));
        }
        let rows = self.config.num_frames * k;
        let p = self.store.get_mut(self.screw_global);
        p.value = Tensor::zeros(rows, 6);
        p.grad = Tensor::zeros(rows, 6);
        p.first_moment = Tensor::zeros(rows, 6);
        p.second_moment = Tensor::zeros(rows, 6);
        p.step = 0;
        self.config.num_latent = k;
        Ok(())
    }

    pub fn set_global_screw(&mut self, t: usize, q: usize, screw: &ScrewAxis) -> Result<()> {
        self.global_screw(t, q)?;
        let row = t * self.config.num_latent + q;
        let dst = self.store.get_mut(self.screw_global).value.row_mut(row);
        dst[..3].copy_from_slice(screw.omega.as_slice());
        dst[3..].copy_from_slice(screw.v.as_slice());
        Ok(())
    }

    pub fn set_base_screw(&mut self, t: usize, screw: &ScrewAxis) -> Result<()> {
        self.check_frame(t)?;
        let dst = self.store.get_mut(self.screw_base).value.row_mut(t);
        dst[..3].copy_from_slice(screw.omega.as_slice());
        dst[3..].copy_from_slice(screw.v.as_slice());
        Ok(())
    }

    /// Per-ray rows of the base screw table (`n x 6`).
    pub fn base_screws(&self, g: &mut Graph, frames: &[usize]) -> Result<Var> {
        self.check_frames(frames)?;
        let table = g.param(&self.store, self.screw_base);
        g.gather_rows(table, frames)
    }

    /// Rows `t * num_latent + q` of the global screw table.
    pub fn global_screws(&self, g: &mut Graph, frames: &[usize], latent: &[usize]) -> Result<Var> {
        self.check_frames(frames)?;
        let nb = self.config.num_latent;
        let rows: Vec<usize> = frames.iter().zip(latent).map(|(&t, &q)| t * nb + q).collect();
        let table = g.param(&self.store, self.screw_global);
        g.gather_rows(table, &rows)
    }

    /// Per-ray latent codes `l(t)` (`n x glo_dim`).
    pub fn glo_codes(&self, g: &mut Graph, frames: &[usize]) -> Result<Var> {
        self.check_frames(frames)?;
        let table = g.param(&self.store, self.glo);
        g.gather_rows(table, frames)
    }

    fn eval_field(
        &self,
        net: &FieldNet,
        g: &mut Graph,
        trunk_in: Var,
        dir_enc: Var,
    ) -> Result<FieldVars> {
        let mut h = trunk_in;
        for layer in &net.trunk {
            h = layer.apply(g, &self.store, h, Activation::Relu)?;
        }
        let sigma = net.sigma.apply(g, &self.store, h, Activation::Softplus)?;
        let rgb_in = g.concat_cols(&[h, dir_enc])?;
        let hidden = net.rgb_hidden.apply(g, &self.store, rgb_in, Activation::Relu)?;
        let color = net.rgb_out.apply(g, &self.store, hidden, Activation::Sigmoid)?;
        let p_st = match &net.staticness {
            Some(d) => {
                let p = d.apply(g, &self.store, h, Activation::Sigmoid)?;
                Some(g.affine(p, 1.0 - 2.0 * STATICNESS_EPS, STATICNESS_EPS))
            }
            None => None,
        };
        Ok(FieldVars { sigma, color, p_st })
    }

    /// Static field on encoded positions and directions.
    pub fn static_field(&self, g: &mut Graph, pos_enc: Var, dir_enc: Var) -> Result<FieldVars> {
        self.eval_field(&self.static_net, g, pos_enc, dir_enc)
    }

    /// Dynamic field; `codes` holds one latent code per point.
    pub fn dynamic_field(&self, g: &mut Graph, pos_enc: Var, dir_enc: Var, codes: Var) -> Result<FieldVars> {
        let trunk_in = g.concat_cols(&[pos_enc, codes])?;
        self.eval_field(&self.dynamic_net, g, trunk_in, dir_enc)
    }

    /// Discretized ray embedding of `n` rays given as `n x 3` origins and
    /// directions: `ray_samples` points at uniform distances in `[near, far]`,
    /// each frequency-encoded and concatenated (`n x ray_embedding_dim`).
    pub fn ray_embedding_graph(&self, g: &mut Graph, origins: Var, dirs: Var, near: f64, far: f64) -> Result<Var> {
        if !(near < far) {
            return Err(Error::InvalidArgument(format!("ray bounds need near < far, got {near} >= {far}")));
        }
        let enc = &self.config.encoding;
        let k = enc.ray_samples;
        let n = g.shape(origins).0;
        let idx: Vec<usize> = (0..n).flat_map(|r| std::iter::repeat(r).take(k)).collect();
        let dists: Vec<f64> = (0..n)
            .flat_map(|_| (0..k).map(move |i| near + (far - near) * i as f64 / (k - 1) as f64))
            .collect();
        let dist = g.constant(Tensor::from_vec(n * k, 1, dists)?);
        let o = g.gather_rows(origins, &idx)?;
        let d = g.gather_rows(dirs, &idx)?;
        let step = g.mul(d, dist)?;
        let pts = g.add(o, step)?;
        let pts = g.scale(pts, enc.position_scale);
        let e = g.posenc(pts, enc.ray_levels);
        g.reshape(e, n, enc.ray_embedding_dim())
    }

    /// Local object-motion screws `F_l(φ(ray), l(t))` (`n x 6`).
    pub fn local_screws_graph(
        &self,
        g: &mut Graph,
        origins: Var,
        dirs: Var,
        frames: &[usize],
        near: f64,
        far: f64,
    ) -> Result<Var> {
        let phi = self.ray_embedding_graph(g, origins, dirs, near, far)?;
        let codes = self.glo_codes(g, frames)?;
        let mut h = g.concat_cols(&[phi, codes])?;
        for layer in &self.local_net {
            h = layer.apply(g, &self.store, h, Activation::Relu)?;
        }
        self.local_out.apply(g, &self.store, h, Activation::Identity)
    }

    // Single-point convenience evaluators.

    pub fn encode_position(&self, x: [f64; 3]) -> Vec<f64> {
        let k = self.config.encoding.position_scale;
        encode_position(x.map(|c| c * k), self.config.encoding.position_levels)
    }

    pub fn glo_lookup(&self, t: usize) -> Result<Vec<f64>> {
        self.check_frame(t)?;
        Ok(self.store.get(self.glo).value.row(t).to_vec())
    }

    pub fn static_eval(&self, x: [f64; 3], d: [f64; 3]) -> Result<FieldSample> {
        let mut g = Graph::new();
        let (pe, de) = self.point_encodings(&mut g, x, d)?;
        let f = self.static_field(&mut g, pe, de)?;
        Ok(read_sample(&g, &f))
    }

    pub fn dynamic_eval(&self, x: [f64; 3], d: [f64; 3], t: usize) -> Result<FieldSample> {
        let mut g = Graph::new();
        let (pe, de) = self.point_encodings(&mut g, x, d)?;
        let codes = self.glo_codes(&mut g, &[t])?;
        let f = self.dynamic_field(&mut g, pe, de, codes)?;
        Ok(read_sample(&g, &f))
    }

    pub fn ray_embedding(&self, ray: &Ray) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let (o, d) = ray_vars(&mut g, ray)?;
        let e = self.ray_embedding_graph(&mut g, o, d, ray.near, ray.far)?;
        Ok(g.value(e).data.clone())
    }

    pub fn local_screw(&self, ray: &Ray, t: usize) -> Result<ScrewAxis> {
        let mut g = Graph::new();
        let (o, d) = ray_vars(&mut g, ray)?;
        let s = self.local_screws_graph(&mut g, o, d, &[t], ray.near, ray.far)?;
        Ok(ScrewAxis::from_slice(&g.value(s).data))
    }

    fn point_encodings(&self, g: &mut Graph, x: [f64; 3], d: [f64; 3]) -> Result<(Var, Var)> {
        let enc = &self.config.encoding;
        let xv = g.constant(Tensor::from_vec(1, 3, x.iter().map(|c| c * enc.position_scale).collect())?);
        let dv = g.constant(Tensor::from_vec(1, 3, d.to_vec())?);
        Ok((g.posenc(xv, enc.position_levels), g.posenc(dv, enc.direction_levels)))
    }

    /// Writes every parameter (and its optimizer state) to `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_string(&self.config)?;
        let mut arrays = Vec::new();
        for (_, p) in self.store.iter() {
            arrays.push((format!("param/{}", p.name), p.group.clone(), &p.value));
            arrays.push((format!("adam_m/{}", p.name), p.group.clone(), &p.first_moment));
            arrays.push((format!("adam_v/{}", p.name), p.group.clone(), &p.second_moment));
        }
        let steps: Vec<(String, u64)> = self.store.iter().map(|(_, p)| (p.name.clone(), p.step)).collect();
        let header = serde_json::json!({ "model": serde_json::from_str::<serde_json::Value>(&meta)?, "adam_steps": steps });
        write_arrays(path, &header.to_string(), &arrays)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, arrays) = read_arrays(path)?;
        let header: serde_json::Value = serde_json::from_str(&header)?;
        let config: ModelConfig = serde_json::from_value(header["model"].clone())?;
        let steps: Vec<(String, u64)> = serde_json::from_value(header["adam_steps"].clone())?;
        let mut model = Model::new(config, 0)?;
        let ids: Vec<(ParamId, String)> = model.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let fetch = |prefix: &str| -> Result<Tensor> {
                let key = format!("{prefix}/{name}");
                arrays
                    .iter()
                    .find(|(n, _)| *n == key)
                    .map(|(_, t)| t.clone())
                    .ok_or_else(|| Error::Format {
                        path: path.to_owned(),
                        reason: format!("missing array `{key}`"),
                    })
            };
            let value = fetch("param")?;
            let p = model.store.get_mut(id);
            if value.shape() != p.value.shape() {
                return Err(Error::Format {
                    path: path.to_owned(),
                    reason: format!("array `{name}` has shape {:?}, expected {:?}", value.shape(), p.value.shape()),
                });
            }
            p.value = value;
            p.first_moment = fetch("adam_m")?;
            p.second_moment = fetch("adam_v")?;
            p.step = steps.iter().find(|(n, _)| *n == name).map_or(0, |(_, s)| *s);
        }
        Ok(model)
    }
}

fn ray_vars(g: &mut Graph, ray: &Ray) -> Result<(Var, Var)> {
    let o = g.constant(Tensor::from_vec(1, 3, ray.origin.as_slice().to_vec())?);
    let d = g.constant(Tensor::from_vec(1, 3, ray.direction.as_slice().to_vec())?);
    Ok((o, d))
}

fn read_sample(g: &Graph, f: &FieldVars) -> FieldSample {
    let c = g.value(f.color);
    FieldSample {
        color: [c.data[0], c.data[1], c.data[2]],
        sigma: g.value(f.sigma).data[0],
        p_st: f.p_st.map(|p| g.value(p).data[0]),
    }
}

/// `[x, sin(2^k π x), cos(2^k π x)]_{k<levels}`; length `3 + 6 * levels`.
pub fn encode_position(x: [f64; 3], levels: usize) -> Vec<f64> {
    let t = Tensor {
        rows: 1,
        cols: 3,
        data: x.to_vec(),
    };
    posenc_values(&t, levels).data
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MBRFCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Checkpoint layout (little-endian): magic `MBRFCKPT`, u32 version, u32
/// header length + UTF-8 JSON header, u32 array count, then per array:
/// u32 name length + name, u32 group length + group, u32 rows, u32 cols,
/// `rows * cols` f64 values in row-major order.
pub fn write_arrays(path: &Path, header: &str, arrays: &[(String, String, &Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let put_str = |buf: &mut Vec<u8>, s: &str| {
        buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
        buf.extend_from_slice(s.as_bytes());
    };
    put_str(&mut buf, header);
    buf.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, group, t) in arrays {
        put_str(&mut buf, name);
        put_str(&mut buf, group);
        buf.extend_from_slice(&(t.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(t.cols as u32).to_le_bytes());
        for x in &t.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    fs::File::create(&tmp)?.write_all(&buf)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn read_arrays(path: &Path) -> Result<(String, Vec<(String, Tensor)>)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_owned()));
    }
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |reason: &str| Error::Format {
        path: path.to_owned(),
        reason: reason.to_owned(),
    };
    let mut cur = Cursor { bytes: &bytes, pos: 0, path };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_owned(),
            expected: CHECKPOINT_VERSION.to_string(),
            found: version.to_string(),
        });
    }
    let header = cur.string()?;
    let count = cur.u32()? as usize;
    let mut arrays = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = cur.string()?;
        let _group = cur.string()?;
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let raw = cur.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        arrays.push((name, Tensor { rows, cols, data }));
    }
    Ok((header, arrays))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .pos
            .checked_add(n)
            .and_then(|end| self.bytes.get(self.pos..end))
            .ok_or_else(|| Error::Format {
                path: self.path.to_owned(),
                reason: "truncated checkpoint".into(),
            })?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let s = self.take(4)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
            path: self.path.to_owned(),
            reason: "invalid utf-8".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use nalgebra::Vector3;

    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            mlp: MlpSpec {
                trunk_depth: 2,
                trunk_width: 16,
                rgb_width: 8,
                local_depth: 2,
                local_width: 8,
            },
            num_frames: 4,
            num_latent: 2,
            ..ModelConfig::default()
        }
    }

    fn ray() -> Ray {
        Ray {
            origin: Vector3::new(0.1, 0.2, -1.0),
            direction: Vector3::new(0.0, 0.1, 1.0).normalize(),
            frame: 1,
            pixel: (0, 0),
            near: 0.5,
            far: 5.0,
        }
    }

    #[test]
    fn position_encoding_shape_and_zero() {
        let e = encode_position([0.0; 3], 8);
        assert_eq!(e.len(), 51);
        for k in 0..8 {
            let s = 3 + 6 * k;
            assert_eq!(&e[s..s + 3], &[0.0; 3]);
            assert_eq!(&e[s + 3..s + 6], &[1.0; 3]);
        }
        assert_eq!(encode_position([0.3, -1.2, 4.0], 8), encode_position([0.3, -1.2, 4.0], 8));
    }

    #[test]
    fn glo_codes_are_small_and_stable() {
        let m = Model::new(small_config(), 7).unwrap();
        for t in 0..4 {
            let c = m.glo_lookup(t).unwrap();
            assert_eq!(c.len(), 8);
            assert_eq!(c, m.glo_lookup(t).unwrap());
            assert!(c.iter().map(|x| x * x).sum::<f64>().sqrt() <= 0.1);
        }
        assert!(matches!(m.glo_lookup(4), Err(Error::FrameOutOfRange { .. })));
    }

    #[test]
    fn field_outputs_respect_ranges() {
        let m = Model::new(small_config(), 3).unwrap();
        let d = [0.0, 0.6, 0.8];
        for x in [[0.0, 0.0, 0.0], [10.0, -10.0, 10.0], [-3.3, 2.2, 7.1]] {
            let s = m.static_eval(x, d).unwrap();
            let p = s.p_st.unwrap();
            assert!(p > 0.0 && p < 1.0);
            assert!(s.sigma >= 0.0 && s.sigma.is_finite());
            assert!(s.color.iter().all(|c| (0.0..=1.0).contains(c)));
            let dy = m.dynamic_eval(x, d, 2).unwrap();
            assert!(dy.p_st.is_none() && dy.sigma >= 0.0);
        }
        let again = Model::new(small_config(), 3).unwrap();
        assert_eq!(m.static_eval([1.0, 2.0, 3.0], d).unwrap(), again.static_eval([1.0, 2.0, 3.0], d).unwrap());
        assert!(m.dynamic_eval([0.0; 3], d, 9).is_err());
    }

    #[test]
    fn glo_code_changes_dynamic_output() {
        let mut m = Model::new(small_config(), 5).unwrap();
        let before = m.dynamic_eval([0.1, 0.2, 0.3], [0.0, 0.0, 1.0], 1).unwrap();
        let glo = m.glo_id();
        m.store.get_mut(glo).value.row_mut(1)[0] += 0.5;
        let after = m.dynamic_eval([0.1, 0.2, 0.3], [0.0, 0.0, 1.0], 1).unwrap();
        assert_ne!(before, after);
    }

    #[test]
    fn ray_embedding_properties() {
        let cfg = small_config();
        let m = Model::new(cfg, 1).unwrap();
        let r = ray();
        let e = m.ray_embedding(&r).unwrap();
        assert_eq!(e.len(), 480);
        assert_eq!(e, m.ray_embedding(&r).unwrap());
        let mut r2 = r;
        r2.direction = Vector3::new(0.1, 0.0, 1.0).normalize();
        assert_ne!(e, m.ray_embedding(&r2).unwrap());
        let mut bad = r;
        bad.far = bad.near;
        assert!(m.ray_embedding(&bad).is_err());
    }

    #[test]
    fn local_screw_starts_at_zero() {
        let m = Model::new(small_config(), 2).unwrap();
        let s = m.local_screw(&ray(), 3).unwrap();
        assert_eq!(s, ScrewAxis::default());
        assert_eq!(s, m.local_screw(&ray(), 3).unwrap());
        for t in 0..4 {
            assert_eq!(m.base_screw(t).unwrap(), ScrewAxis::default());
            for q in 0..2 {
                assert_eq!(m.global_screw(t, q).unwrap(), ScrewAxis::default());
            }
        }
    }

    #[test]
    fn local_mlp_receives_gradient_once_output_layer_moves() {
        // With a zero output layer only the output layer gets gradient; after
        // nudging it, the hidden layers do too. Probe one hidden weight by
        // central differences.
        let mut m = Model::new(small_config(), 4).unwrap();
        let out_w = m.store.id("local.out.w").unwrap();
        m.store.get_mut(out_w).value.data.iter_mut().enumerate().for_each(|(i, x)| *x = 0.01 * ((i % 7) as f64 - 3.0));
        let hidden = m.store.id("local.0.w").unwrap();
        let r = ray();
        let objective = |m: &Model| -> f64 {
            let s = m.local_screw(&r, 2).unwrap();
            s.omega.sum() + s.v.sum()
        };
        let mut g = Graph::new();
        let (o, d) = ray_vars(&mut g, &r).unwrap();
        let s = m.local_screws_graph(&mut g, o, d, &[2], r.near, r.far).unwrap();
        let root = g.sum(s);
        let mut store = m.store.clone();
        g.backward_into(root, &mut store).unwrap();
        let analytic = store.get(hidden).grad.data[5];
        let h = 1e-6;
        let mut plus = m.clone();
        plus.store.get_mut(hidden).value.data[5] += h;
        let mut minus = m.clone();
        minus.store.get_mut(hidden).value.data[5] -= h;
        let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
        assert!((analytic - numeric).abs() < 1e-6 * numeric.abs().max(1e-3), "{analytic} vs {numeric}");
        assert!(store.iter().filter(|(_, p)| p.group == GROUP_LOCAL).any(|(_, p)| p.grad.max_abs() > 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut m = Model::new(small_config(), 9).unwrap();
        m.set_base_screw(1, &ScrewAxis::from_slice(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6])).unwrap();
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.config, m.config);
        for ((_, a), (_, b)) in m.store.iter().zip(back.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(Model::load(&path), Err(Error::Format { .. })));
        let mut v = bytes.clone();
        v[8] = 9;
        fs::write(&path, &v).unwrap();
        assert!(matches!(Model::load(&path), Err(Error::VersionMismatch { .. })));
    }
}
