use super::{ParamGroup, ParamId, ParamStore, Real, Tensor};
use crate::error::Result;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization: learnable scale/shift plus running statistics.
///
/// All four vectors live in the [`ParamStore`]; the running statistics are
/// registered as buffers so they travel with checkpoints.
#[derive(Debug, Clone)]
pub struct BatchNormState {
    pub channels: usize,
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, channels: usize, group: ParamGroup) -> Result<Self> {
        Ok(BatchNormState {
            channels,
            scale: store.add(&format!("{prefix}.weight"), Tensor::ones(vec![channels]), group)?,
            shift: store.add(&format!("{prefix}.bias"), Tensor::zeros(vec![channels]), group)?,
            running_mean: store.add_buffer(
                &format!("{prefix}.running_mean"),
                Tensor::zeros(vec![channels]),
                group,
            )?,
            running_var: store.add_buffer(
                &format!("{prefix}.running_var"),
                Tensor::ones(vec![channels]),
                group,
            )?,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        })
    }
}
