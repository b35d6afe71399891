//! Forward and backward passes over the whole network.

use crate::error::{Error, Result};
use crate::net::layers::*;
use crate::net::{LayerSpec, NetworkConfig, NetworkStateBase, ParamSet};
use crate::rng::Rng;
use crate::tensor::{Scalar, TensorBase};

enum LayerCache<T> {
    Conv { input: TensorBase<T>, geo: ConvGeometry },
    Relu { input: TensorBase<T> },
    MaxPool { input_shape: Vec<usize>, argmax: Vec<u32> },
    Lrn { input: TensorBase<T>, denom: Vec<T> },
    Fc { input_flat: TensorBase<T> },
    Dropout { mask: Option<Vec<T>> },
    Softmax { output: TensorBase<T> },
}

/// Everything backward needs from a forward run.
pub struct ForwardPass<T> {
    /// Per-head softmax probabilities, each (n, classes).
    pub head_probs: Vec<TensorBase<T>>,
    /// Per-head pre-softmax logits, each (n, classes).
    pub head_logits: Vec<TensorBase<T>>,
    /// Trunk output flattened to (n, features).
    pub features: TensorBase<T>,
    caches: Vec<LayerCache<T>>,
    batch: usize,
}

/// Parameter gradients mirroring the state layout, plus the input gradient.
pub struct Gradients<T> {
    pub layers: Vec<ParamSet<T>>,
    pub heads: Vec<ParamSet<T>>,
    pub input: TensorBase<T>,
}

fn flatten_batch<T: Scalar>(t: &TensorBase<T>) -> TensorBase<T> {
    let n = t.shape()[0];
    let rest = t.len() / n;
    t.clone().reshape(&[n, rest]).expect("flatten")
}

/// Run the trunk and every head on a batch shaped (n, c, h, w).
///
/// In train mode dropout layers draw their masks from `rng`; in eval mode
/// dropout is the identity (inverted scaling at train time) and `rng` is
/// unused. Softmax head outputs sum to 1 per sample.
pub fn forward<T: Scalar>(
    config: &NetworkConfig,
    state: &NetworkStateBase<T>,
    input: &TensorBase<T>,
    train: bool,
    mut rng: Option<&mut Rng>,
) -> Result<ForwardPass<T>> {
    let (c, h, w) = config.input;
    if input.rank() != 4 || input.shape()[1..] != [c, h, w] {
        return Err(Error::Shape(format!(
            "input {:?} does not match config input (n, {c}, {h}, {w})",
            input.shape()
        )));
    }
    if state.layers.len() != config.layers.len() || state.heads.len() != config.heads.len() {
        return Err(Error::State("state does not match config layout".into()));
    }
    let batch = input.shape()[0];
    let mut current = input.clone();
    let mut caches = Vec::with_capacity(config.layers.len());
    for (spec, params) in config.layers.iter().zip(&state.layers) {
        current = match spec {
            LayerSpec::Conv {
                filters,
                kernel,
                stride,
                pad,
            } => {
                let geo = ConvGeometry::new(current.shape(), *filters, *kernel, *stride, *pad)?;
                let weight = params.weight.as_ref().ok_or_else(missing_params)?;
                let bias = params.bias.as_ref().ok_or_else(missing_params)?;
                let out = conv_forward(&current, weight, bias, &geo);
                caches.push(LayerCache::Conv {
                    input: current,
                    geo,
                });
                out
            }
            LayerSpec::Relu => {
                let out = relu_forward(&current);
                caches.push(LayerCache::Relu { input: current });
                out
            }
            LayerSpec::MaxPool { window, stride } => {
                let (out, argmax) = maxpool_forward(&current, *window, *stride)?;
                caches.push(LayerCache::MaxPool {
                    input_shape: current.shape().to_vec(),
                    argmax,
                });
                out
            }
            LayerSpec::Lrn {
                depth,
                k,
                alpha,
                beta,
            } => {
                let (out, denom) = lrn_forward(&current, *depth, *k, *alpha, *beta)?;
                caches.push(LayerCache::Lrn {
                    input: current,
                    denom,
                });
                out
            }
            LayerSpec::FullyConnected { .. } => {
                let flat = flatten_batch(&current);
                let weight = params.weight.as_ref().ok_or_else(missing_params)?;
                let bias = params.bias.as_ref().ok_or_else(missing_params)?;
                if flat.shape()[1] != weight.shape()[1] {
                    return Err(Error::Shape(format!(
                        "fc input {} does not match weight {:?}",
                        flat.shape()[1],
                        weight.shape()
                    )));
                }
                let out = fc_forward(&flat, weight, bias);
                caches.push(LayerCache::Fc { input_flat: flat });
                out
            }
            LayerSpec::Dropout { keep } => {
                if train {
                    let rng = rng
                        .as_deref_mut()
                        .ok_or_else(|| Error::Argument("train-mode dropout needs an rng".into()))?;
                    let mask = dropout_mask::<T>(current.len(), *keep, rng);
                    let out = apply_mask(&current, &mask);
                    caches.push(LayerCache::Dropout { mask: Some(mask) });
                    out
                } else {
                    caches.push(LayerCache::Dropout { mask: None });
                    current
                }
            }
            LayerSpec::Softmax => {
                let flat = flatten_batch(&current);
                let out = softmax_rows(&flat);
                let out = out.reshape(current.shape())?;
                caches.push(LayerCache::Softmax { output: out.clone() });
                out
            }
        };
    }

    let features = flatten_batch(&current);
    let mut head_logits = Vec::with_capacity(config.heads.len());
    let mut head_probs = Vec::with_capacity(config.heads.len());
    for params in &state.heads {
        let weight = params.weight.as_ref().ok_or_else(missing_params)?;
        let bias = params.bias.as_ref().ok_or_else(missing_params)?;
        if features.shape()[1] != weight.shape()[1] {
            return Err(Error::Shape(format!(
                "head weight {:?} does not match feature length {}",
                weight.shape(),
                features.shape()[1]
            )));
        }
        let logits = fc_forward(&features, weight, bias);
        head_probs.push(softmax_rows(&logits));
        head_logits.push(logits);
    }

    Ok(ForwardPass {
        head_probs,
        head_logits,
        features,
        caches,
        batch,
    })
}

fn missing_params() -> Error {
    Error::State("layer is missing its parameters".into())
}

/// Back-propagate per-head logit gradients through the heads and trunk.
///
/// `head_logit_grads[h]` is dLoss/dlogits for head h, shaped (n, classes);
/// for cross-entropy that seed is (probs - onehot) / samples. Returns
/// gradients shaped exactly like the state plus the input gradient.
pub fn backward<T: Scalar>(
    config: &NetworkConfig,
    state: &NetworkStateBase<T>,
    pass: &ForwardPass<T>,
    head_logit_grads: &[TensorBase<T>],
) -> Result<Gradients<T>> {
    if pass.caches.len() != config.layers.len() {
        return Err(Error::State(
            "forward caches do not match the config (stale or foreign pass)".into(),
        ));
    }
    if head_logit_grads.len() != config.heads.len() {
        return Err(Error::State(format!(
            "{} head gradients for {} heads",
            head_logit_grads.len(),
            config.heads.len()
        )));
    }
    for (g, head) in head_logit_grads.iter().zip(&config.heads) {
        if g.shape() != [pass.batch, head.classes] {
            return Err(Error::Shape(format!(
                "head gradient {:?} does not match (n, {})",
                g.shape(),
                head.classes
            )));
        }
    }

    // heads: accumulate feature gradient and per-head parameter gradients
    let mut feat_grad = pass.features.zeros_like();
    let mut head_grads = Vec::with_capacity(state.heads.len());
    for (params, grad_logits) in state.heads.iter().zip(head_logit_grads) {
        let weight = params.weight.as_ref().ok_or_else(missing_params)?;
        let fc = fc_backward(&pass.features, weight, grad_logits);
        feat_grad = TensorBase::elementwise(crate::tensor::ElemOp::Add, &feat_grad, &fc.input)?;
        head_grads.push(ParamSet {
            weight: Some(fc.weight),
            bias: Some(fc.bias),
        });
    }

    // trunk: walk layers in reverse
    let mut layer_grads: Vec<ParamSet<T>> = (0..config.layers.len())
        .map(|_| ParamSet {
            weight: None,
            bias: None,
        })
        .collect();
    let mut grad = feat_grad;
    for (idx, (spec, cache)) in config.layers.iter().zip(&pass.caches).enumerate().rev() {
        grad = match (spec, cache) {
            (LayerSpec::Conv { .. }, LayerCache::Conv { input, geo }) => {
                let weight = state.layers[idx].weight.as_ref().ok_or_else(missing_params)?;
                let grad_spatial = grad.reshape(&[
                    pass.batch,
                    geo.filters,
                    geo.out_h,
                    geo.out_w,
                ])?;
                let grads = conv_backward(input, weight, geo, &grad_spatial);
                layer_grads[idx] = ParamSet {
                    weight: Some(grads.weight),
                    bias: Some(grads.bias),
                };
                grads.input
            }
            (LayerSpec::Relu, LayerCache::Relu { input }) => {
                let g = grad.reshape(input.shape())?;
                relu_backward(input, &g)
            }
            (LayerSpec::MaxPool { window, stride }, LayerCache::MaxPool { input_shape, argmax }) => {
                let oh = (input_shape[2] - window) / stride + 1;
                let ow = (input_shape[3] - window) / stride + 1;
                let g = grad.reshape(&[input_shape[0], input_shape[1], oh, ow])?;
                maxpool_backward(input_shape, argmax, &g)
            }
            (
                LayerSpec::Lrn {
                    depth, alpha, beta, ..
                },
                LayerCache::Lrn { input, denom },
            ) => {
                let g = grad.reshape(input.shape())?;
                lrn_backward(input, denom, *depth, *alpha, *beta, &g)
            }
            (LayerSpec::FullyConnected { .. }, LayerCache::Fc { input_flat }) => {
                let weight = state.layers[idx].weight.as_ref().ok_or_else(missing_params)?;
                let fc = fc_backward(input_flat, weight, &grad);
                layer_grads[idx] = ParamSet {
                    weight: Some(fc.weight),
                    bias: Some(fc.bias),
                };
                fc.input
            }
            (LayerSpec::Dropout { .. }, LayerCache::Dropout { mask }) => match mask {
                Some(mask) => apply_mask(&grad, mask),
                None => grad,
            },
            (LayerSpec::Softmax, LayerCache::Softmax { output }) => {
                let g = grad.reshape(output.shape())?;
                softmax_backward(output, &g)
            }
            _ => return Err(Error::State("cache kind does not match layer kind".into())),
        };
    }

    let (c, h, w) = config.input;
    Ok(Gradients {
        layers: layer_grads,
        heads: head_grads,
        input: grad.reshape(&[pass.batch, c, h, w])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::tests::tiny_config;
    use crate::net::{HeadSpec, NetworkState};

    fn batch_input(rng: &mut Rng, n: usize, c: usize, h: usize, w: usize) -> TensorBase<f32> {
        rng.uniform(&[n, c, h, w], -1.0, 1.0).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let config = tiny_config(2, 3);
        let mut state = NetworkState::init(&config, &mut Rng::new(0)).unwrap();
        for set in state.layers.iter_mut().chain(state.heads.iter_mut()) {
            if let Some(w) = &mut set.weight {
                *w = w.zeros_like();
            }
        }
        let mut rng = Rng::new(1);
        let input = batch_input(&mut rng, 2, 2, 8, 8);
        let pass = forward(&config, &state, &input, false, None).unwrap();
        for row in pass.head_probs[0].data().chunks(3) {
            for &p in row {
                assert!((p - 1.0 / 3.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identity_conv_passes_input_through() {
        // single 1x1 conv with weight 1, bias 0
        let config = NetworkConfig {
            input: (1, 3, 3),
            layers: vec![LayerSpec::Conv {
                filters: 1,
                kernel: 1,
                stride: 1,
                pad: 0,
            }],
            heads: vec![HeadSpec {
                id: "m".into(),
                classes: 2,
                dataset: "m".into(),
            }],
        };
        let mut state = NetworkState::init(&config, &mut Rng::new(0)).unwrap();
        state.layers[0].weight = Some(TensorBase::new(&[1, 1, 1, 1], 1.0).unwrap());
        let mut rng = Rng::new(2);
        let input = batch_input(&mut rng, 1, 1, 3, 3);
        let pass = forward(&config, &state, &input, false, None).unwrap();
        // trunk output equals input
        assert_eq!(pass.features.data(), input.data());
    }

    #[test]
    fn hand_computed_forward_on_3x3() {
        // 2x2 conv stride 1 on a 3x3 input, then a 2-class head; all values
        // chosen for exact arithmetic
        let config = NetworkConfig {
            input: (1, 3, 3),
            layers: vec![LayerSpec::Conv {
                filters: 1,
                kernel: 2,
                stride: 1,
                pad: 0,
            }],
            heads: vec![HeadSpec {
                id: "m".into(),
                classes: 2,
                dataset: "m".into(),
            }],
        };
        let mut state = NetworkState::init(&config, &mut Rng::new(0)).unwrap();
        state.layers[0].weight =
            Some(TensorBase::from_vec(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        state.layers[0].bias = Some(TensorBase::from_vec(&[1], vec![0.5]).unwrap());
        state.heads[0].weight =
            Some(TensorBase::from_vec(&[2, 4], vec![
                1.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 1.0,
            ])
            .unwrap());
        state.heads[0].bias = Some(TensorBase::from_vec(&[2], vec![0.0, 0.0]).unwrap());
        let input = TensorBase::from_vec(
            &[1, 1, 3, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let pass = forward(&config, &state, &input, false, None).unwrap();
        // conv output: x + x_below_right + 0.5 -> [6.5, 8.5, 12.5, 14.5]
        assert_eq!(pass.features.data(), &[6.5, 8.5, 12.5, 14.5]);
        // head logits: [6.5, 14.5]; softmax by hand
        let e0 = (6.5f64 - 14.5).exp();
        let p1 = 1.0 / (1.0 + e0);
        let probs = pass.head_probs[0].data();
        assert!((probs[1] as f64 - p1).abs() < 1e-5);
        assert!((probs[0] as f64 - (1.0 - p1)).abs() < 1e-5);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let config = tiny_config(2, 3);
        let state = NetworkState::init(&config, &mut Rng::new(7)).unwrap();
        let mut rng = Rng::new(8);
        let input = batch_input(&mut rng, 5, 2, 8, 8);
        let pass = forward(&config, &state, &input, false, None).unwrap();
        for row in pass.head_probs[0].data().chunks(3) {
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let config = tiny_config(2, 3);
        let state = NetworkState::init(&config, &mut Rng::new(0)).unwrap();
        let input = TensorBase::zeros(&[1, 3, 8, 8]).unwrap();
        assert!(matches!(
            forward(&config, &state, &input, false, None),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn train_dropout_requires_rng() {
        let mut config = tiny_config(2, 3);
        config.layers.push(LayerSpec::Dropout { keep: 0.5 });
        let state = NetworkState::init(&config, &mut Rng::new(0)).unwrap();
        let input = TensorBase::zeros(&[1, 2, 8, 8]).unwrap();
        assert!(matches!(
            forward(&config, &state, &input, true, None),
            Err(Error::Argument(_))
        ));
        // eval mode is fine without one
        assert!(forward(&config, &state, &input, false, None).is_ok());
    }

    #[test]
    fn zero_head_gradient_gives_zero_param_gradients() {
        let config = tiny_config(2, 3);
        let state = NetworkState::init(&config, &mut Rng::new(3)).unwrap();
        let mut rng = Rng::new(4);
        let input = batch_input(&mut rng, 2, 2, 8, 8);
        let pass = forward(&config, &state, &input, false, None).unwrap();
        let zero_seed = TensorBase::zeros(&[2, 3]).unwrap();
        let grads = backward(&config, &state, &pass, &[zero_seed]).unwrap();
        for set in grads.layers.iter().chain(grads.heads.iter()) {
            if let Some(w) = &set.weight {
                assert!(w.data().iter().all(|&v| v == 0.0));
            }
        }
        assert!(grads.input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_blocks_gradient_at_negative_preactivation() {
        // fc -> relu with a negative pre-activation: gradient through that
        // unit must be exactly zero
        let config = NetworkConfig {
            input: (1, 1, 1),
            layers: vec![
                LayerSpec::FullyConnected { units: 1 },
                LayerSpec::Relu,
            ],
            heads: vec![HeadSpec {
                id: "m".into(),
                classes: 2,
                dataset: "m".into(),
            }],
        };
        let mut state = NetworkState::init(&config, &mut Rng::new(0)).unwrap();
        state.layers[0].weight = Some(TensorBase::from_vec(&[1, 1], vec![1.0]).unwrap());
        state.layers[0].bias = Some(TensorBase::from_vec(&[1], vec![-5.0]).unwrap());
        let input = TensorBase::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let pass = forward(&config, &state, &input, false, None).unwrap();
        let seed = TensorBase::from_vec(&[1, 2], vec![1.0, -1.0]).unwrap();
        let grads = backward(&config, &state, &pass, &[seed]).unwrap();
        let w_grad = grads.layers[0].weight.as_ref().unwrap();
        assert!(w_grad.data().iter().all(|&v| v == 0.0));
        assert!(grads.input.data().iter().all(|&v| v == 0.0));
    }
}
