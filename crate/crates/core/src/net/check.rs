//! Central finite-difference gradient checking.
//!
//! The harness runs the network at f64 (the kernels are generic) and
//! compares analytic gradients against (f(x+eps) - f(x-eps)) / (2 eps)
//! per parameter. It never calls `backward` to produce the numeric side,
//! so the two routes stay independent.

use crate::net::NetworkStateBase;
use crate::tensor::TensorBase;

/// max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Numeric gradient of `loss` with respect to every element of one
/// parameter tensor, by central differences.
fn fd_tensor<F>(
    state: &NetworkStateBase<f64>,
    select: impl Fn(&mut NetworkStateBase<f64>) -> &mut TensorBase<f64>,
    eps: f64,
    loss: &F,
) -> Vec<f64>
where
    F: Fn(&NetworkStateBase<f64>) -> f64,
{
    let len = {
        let mut probe = state.clone();
        select(&mut probe).len()
    };
    (0..len)
        .map(|i| {
            let mut plus = state.clone();
            select(&mut plus).data_mut()[i] += eps;
            let mut minus = state.clone();
            select(&mut minus).data_mut()[i] -= eps;
            (loss(&plus) - loss(&minus)) / (2.0 * eps)
        })
        .collect()
}

/// Which parameter tensor a slot refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamSlot {
    LayerWeight(usize),
    LayerBias(usize),
    HeadWeight(usize),
    HeadBias(usize),
}

/// All parameter slots present in a state.
pub fn param_slots<T: crate::tensor::Scalar>(state: &NetworkStateBase<T>) -> Vec<ParamSlot> {
    let mut slots = Vec::new();
    for (i, p) in state.layers.iter().enumerate() {
        if p.weight.is_some() {
            slots.push(ParamSlot::LayerWeight(i));
        }
        if p.bias.is_some() {
            slots.push(ParamSlot::LayerBias(i));
        }
    }
    for (i, p) in state.heads.iter().enumerate() {
        if p.weight.is_some() {
            slots.push(ParamSlot::HeadWeight(i));
        }
        if p.bias.is_some() {
            slots.push(ParamSlot::HeadBias(i));
        }
    }
    slots
}

fn slot_tensor(state: &mut NetworkStateBase<f64>, slot: ParamSlot) -> &mut TensorBase<f64> {
    match slot {
        ParamSlot::LayerWeight(i) => state.layers[i].weight.as_mut().unwrap(),
        ParamSlot::LayerBias(i) => state.layers[i].bias.as_mut().unwrap(),
        ParamSlot::HeadWeight(i) => state.heads[i].weight.as_mut().unwrap(),
        ParamSlot::HeadBias(i) => state.heads[i].bias.as_mut().unwrap(),
    }
}

/// Central-difference gradients for every element of every parameter
/// tensor, in slot order.
pub fn fd_param_gradients<F>(
    state: &NetworkStateBase<f64>,
    eps: f64,
    loss: F,
) -> Vec<(ParamSlot, Vec<f64>)>
where
    F: Fn(&NetworkStateBase<f64>) -> f64,
{
    param_slots(state)
        .into_iter()
        .map(|slot| {
            let grads = fd_tensor(state, move |s| slot_tensor(s, slot), eps, &loss);
            (slot, grads)
        })
        .collect()
}

/// Central-difference gradient with respect to the network input.
pub fn fd_input_gradients<F>(input: &TensorBase<f64>, eps: f64, loss: F) -> Vec<f64>
where
    F: Fn(&TensorBase<f64>) -> f64,
{
    (0..input.len())
        .map(|i| {
            let mut plus = input.clone();
            plus.data_mut()[i] += eps;
            let mut minus = input.clone();
            minus.data_mut()[i] -= eps;
            (loss(&plus) - loss(&minus)) / (2.0 * eps)
        })
        .collect()
}

/// Analytic gradient slice for a slot, for comparison against the numeric
/// side.
pub fn slot_gradient<'a, T: crate::tensor::Scalar>(
    grads: &'a crate::net::Gradients<T>,
    slot: ParamSlot,
) -> &'a TensorBase<T> {
    match slot {
        ParamSlot::LayerWeight(i) => grads.layers[i].weight.as_ref().unwrap(),
        ParamSlot::LayerBias(i) => grads.layers[i].bias.as_ref().unwrap(),
        ParamSlot::HeadWeight(i) => grads.heads[i].weight.as_ref().unwrap(),
        ParamSlot::HeadBias(i) => grads.heads[i].bias.as_ref().unwrap(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multitask::{multitask_loss, RoutedBatch};
    use crate::net::tests::tiny_config;
    use crate::net::{backward, forward, NetworkStateBase};
    use crate::rng::Rng;

    #[test]
    fn tiny_net_parameter_gradients_match_fd() {
        let config = tiny_config(2, 3);
        let state64: NetworkStateBase<f64> =
            NetworkStateBase::<f32>::init(&config, &mut Rng::new(3))
                .unwrap()
                .cast();
        let mut rng = Rng::new(11);
        let input = rng.uniform(&[2, 2, 8, 8], -1.0, 1.0).unwrap();
        let input64 = input.cast::<f64>();
        let batch = RoutedBatch::single_task(input, vec![0, 2], "main");

        let loss_fn = |s: &NetworkStateBase<f64>| {
            let pass = forward(&config, s, &input64, false, None).unwrap();
            multitask_loss(&config.heads, &pass, &batch).unwrap().total
        };

        let pass = forward(&config, &state64, &input64, false, None).unwrap();
        let loss = multitask_loss(&config.heads, &pass, &batch).unwrap();
        let analytic = backward(&config, &state64, &pass, &loss.seeds).unwrap();

        for (slot, numeric) in fd_param_gradients(&state64, 1e-3, loss_fn) {
            let a = slot_gradient(&analytic, slot);
            let err = max_relative_error(a.data(), &numeric, 1e-6);
            assert!(err < 1e-3, "{slot:?}: max rel err {err}");
        }
    }
}
