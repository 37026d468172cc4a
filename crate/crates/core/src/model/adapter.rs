use candle_core::Tensor;

use super::config::{Activation, AdapterSpec};
use super::layers::{activate, Linear};
use super::params::{Init, ParamStore};
use crate::error::Result;

/// Residual bottleneck: `z + up(act(down(z)))`.
#[derive(Clone, Debug)]
pub struct Adapter {
    down: Linear,
    up: Linear,
    act: Activation,
}

impl Adapter {
    pub fn new(store: &mut ParamStore, prefix: &str, hidden: usize, spec: &AdapterSpec) -> Result<Self> {
        let bottleneck = spec.bottleneck_dim(hidden)?;
        let down = Linear::new(
            store,
            &format!("{prefix}.down"),
            hidden,
            bottleneck,
            Init::Normal(1.0 / (hidden as f64).sqrt()),
            true,
        )?;
        let up = Linear::new(
            store,
            &format!("{prefix}.up"),
            bottleneck,
            hidden,
            Init::Normal(spec.init_scale),
            true,
        )?;
        Ok(Self { down, up, act: spec.nonlinearity })
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let h = activate(&self.down.forward(z)?, self.act)?;
        Ok((z + self.up.forward(&h)?)?)
    }
}

/// Trainable parameters of one adapter block.
pub fn adapter_param_count(hidden: usize, bottleneck: usize) -> usize {
    2 * hidden * bottleneck + bottleneck + hidden
}
