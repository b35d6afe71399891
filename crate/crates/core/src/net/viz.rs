//! First-layer filter visualization: one column per filter, one row per
//! input channel, every tile min-max normalized to [0, 1].

use crate::error::{Error, Result};
use crate::net::{LayerSpec, NetworkConfig, NetworkState};
use crate::tensor::Tensor;

/// Render conv1 filters as a (rows * k, filters * k) grayscale grid.
/// `channels_per_filter` selects how many input channels (rows) to show;
/// a constant tile renders as uniform 0.5.
pub fn visualize_first_layer(
    config: &NetworkConfig,
    state: &NetworkState,
    channels_per_filter: usize,
) -> Result<Tensor> {
    let Some(LayerSpec::Conv { filters, kernel, .. }) = config.layers.first() else {
        return Err(Error::Argument("first layer is not a convolution".into()));
    };
    let weight = state
        .layers
        .first()
        .and_then(|p| p.weight.as_ref())
        .ok_or_else(|| Error::State("first conv layer has no weights".into()))?;
    let in_c = weight.shape()[1];
    if channels_per_filter == 0 || channels_per_filter > in_c {
        return Err(Error::Argument(format!(
            "channels_per_filter must be in 1..={in_c}, got {channels_per_filter}"
        )));
    }
    let (f, k) = (*filters, *kernel);
    let rows = channels_per_filter;
    let mut grid = Tensor::zeros(&[rows * k, f * k])?;
    let w = weight.data();
    for filter in 0..f {
        for channel in 0..rows {
            let tile = &w[(filter * in_c + channel) * k * k..(filter * in_c + channel + 1) * k * k];
            let mut lo = f32::INFINITY;
            let mut hi = f32::NEG_INFINITY;
            for &v in tile {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            for ty in 0..k {
                for tx in 0..k {
                    let v = tile[ty * k + tx];
                    let norm = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
                    grid.set(&[channel * k + ty, filter * k + tx], norm);
                }
            }
        }
    }
    Ok(grid)
}
