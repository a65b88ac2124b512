use std::collections::BTreeSet;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable array with its gradient accumulator and Adam moments.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameters grouped for per-group learning rates and freezing.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.id(&name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{name}`")));
        }
        let (r, c) = value.shape();
        self.params.push(Param {
            name,
            group: group.into(),
            value,
            grad: Tensor::zeros(r, c),
            first_moment: Tensor::zeros(r, c),
            second_moment: Tensor::zeros(r, c),
            step: 0,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn groups(&self) -> BTreeSet<String> {
        self.params.iter().map(|p| p.group.clone()).collect()
    }

    pub fn set_frozen(&mut self, group: &str, frozen: bool) {
        if frozen {
            self.frozen.insert(group.to_owned());
        } else {
            self.frozen.remove(group);
        }
    }

    /// Freezes exactly the listed groups.
    pub fn freeze_only(&mut self, groups: &[&str]) {
        self.frozen = groups.iter().map(|g| (*g).to_owned()).collect();
    }

    pub fn is_frozen(&self, group: &str) -> bool {
        self.frozen.contains(group)
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        self.params[id.0].grad.add_assign(g);
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// One Adam update of every unfrozen parameter; frozen parameters and their
    /// moments are left untouched. Gradients are zeroed afterwards.
    pub fn adam_step(&mut self, rate: impl Fn(&str) -> f64, cfg: AdamConfig) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
        for p in &mut self.params {
            if self.frozen.contains(&p.group) {
                continue;
            }
            let lr = rate(&p.group);
            p.step += 1;
            let bc1 = 1.0 - cfg.beta1.powi(p.step as i32);
            let bc2 = 1.0 - cfg.beta2.powi(p.step as i32);
            for (((x, &g), m), v) in p
                .value
                .data
                .iter_mut()
                .zip(&p.grad.data)
                .zip(p.first_moment.data.iter_mut())
                .zip(p.second_moment.data.iter_mut())
            {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        self.zero_grad();
        Ok(())
    }

    /// FNV-1a over the bit patterns of every value in `group`.
    pub fn group_checksum(&self, group: &str) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for p in self.params.iter().filter(|p| p.group == group) {
            for x in &p.value.data {
                for b in x.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn checksum(&self) -> u64 {
        self.groups()
            .iter()
            .fold(0u64, |acc, g| acc.rotate_left(7) ^ self.group_checksum(g))
    }
}
