use super::{BatchNormState, Graph, Mode, ParamStore, Real, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// 1x1 convolution `w [Cout,Cin]` over `x [B,Cin,H,W]`, then optional BN, then activation.
pub fn pointwise_conv<T: Real>(
    g: &mut Graph<T>,
    store: &mut ParamStore<T>,
    x: Var,
    w: Var,
    bn: Option<&BatchNormState>,
    activation: Activation,
    mode: Mode,
) -> Result<Var> {
    let ws = g.shape(w).to_vec();
    if ws.len() != 2 {
        return Err(Error::invalid("pointwise_conv", format!("weights must be [Cout,Cin], got {ws:?}")));
    }
    let kernel = g.reshape(w, &[ws[0], ws[1], 1, 1])?;
    let mut y = g.conv2d(x, kernel, 1, 0)?;
    if let Some(bn) = bn {
        y = g.batch_norm(store, bn, y, mode)?;
    }
    match activation {
        Activation::Relu => g.relu(y),
        Activation::Identity => Ok(y),
    }
}
