use std::collections::BTreeMap;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    AddOn,
    Prototypes,
    LastLayer,
}

#[derive(Clone, Debug)]
pub(crate) struct Param {
    pub var: Var,
    pub group: ParamGroup,
    pub trainable: bool,
}

/// Named parameters, initialised from a seeded generator so that model
/// construction is reproducible.
pub(crate) struct ParamStore {
    params: BTreeMap<String, Param>,
    rng: ChaCha8Rng,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, device: &Device) -> Self {
        Self {
            params: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: device.clone(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, tensor: Tensor, group: ParamGroup, trainable: bool) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(Error::Checkpoint(format!("parameter `{name}` registered twice")));
        }
        let var = Var::from_tensor(&tensor)?;
        self.params.insert(
            name.to_string(),
            Param {
                var: var.clone(),
                group,
                trainable,
            },
        );
        Ok(var)
    }

    /// He-normal initialisation with fan-in from all but the leading dimension.
    pub fn kaiming(&mut self, name: &str, shape: impl Into<Shape>, group: ParamGroup) -> Result<Var> {
        let shape = shape.into();
        let fan_in: usize = shape.dims()[1..].iter().product();
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let data: Vec<f32> = (0..shape.elem_count())
            .map(|_| normal.sample(&mut self.rng) as f32)
            .collect();
        let t = Tensor::from_vec(data, shape, &self.device)?;
        self.insert(name, t, group, true)
    }

    pub fn uniform(&mut self, name: &str, shape: impl Into<Shape>, lo: f32, hi: f32, group: ParamGroup) -> Result<Var> {
        let shape = shape.into();
        let data: Vec<f32> = (0..shape.elem_count())
            .map(|_| self.rng.random_range(lo..hi))
            .collect();
        let t = Tensor::from_vec(data, shape, &self.device)?;
        self.insert(name, t, group, true)
    }

    pub fn constant(&mut self, name: &str, shape: impl Into<Shape>, value: f64, group: ParamGroup, trainable: bool) -> Result<Var> {
        let t = (Tensor::ones(shape, DType::F32, &self.device)? * value)?;
        self.insert(name, t, group, trainable)
    }

    pub fn from_tensor(&mut self, name: &str, tensor: Tensor, group: ParamGroup) -> Result<Var> {
        self.insert(name, tensor, group, true)
    }

    pub fn trainable(&self, groups: &[ParamGroup]) -> Vec<Var> {
        self.params
            .values()
            .filter(|p| p.trainable && groups.contains(&p.group))
            .map(|p| p.var.clone())
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if p.var.dims() != value.dims() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                p.var.dims(),
                value.dims()
            )));
        }
        p.var
            .set(&value.to_dtype(DType::F32)?.to_device(&self.device)?)?;
        Ok(())
    }

    /// Deep copies of every parameter value.
    pub fn values(&self) -> Result<BTreeMap<String, Tensor>> {
        self.params
            .iter()
            .map(|(k, p)| Ok((k.clone(), p.var.as_tensor().copy()?)))
            .collect()
    }
}
