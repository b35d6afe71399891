//! SGD with momentum, the fixed learning-rate schedules, and the training
//! loop.

use crate::error::{Error, Result};
use crate::multitask::{multitask_loss, RoutedBatch};
use crate::net::{forward, backward, Gradients, NetworkConfig, NetworkStateBase, ParamSet};
use crate::rng::Rng;
use crate::tensor::{Scalar, TensorBase};

/// Momentum coefficient used throughout.
pub const MOMENTUM: f32 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleMode {
    Scratch,
    FineTune,
}

impl std::str::FromStr for ScheduleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(ScheduleMode::Scratch),
            "fine-tune" | "finetune" => Ok(ScheduleMode::FineTune),
            other => Err(Error::Argument(format!("unknown schedule mode {other}"))),
        }
    }
}

/// Piecewise-constant learning-rate schedule.
///
/// At unit scale: training from scratch starts at 1e-2, drops to 1e-3 at
/// 50k and 1e-4 at 70k iterations, and stops at 80k; fine-tuning starts at
/// 1e-2, drops to 1e-3 at 14k and stops at 20k. `scale` multiplies every
/// breakpoint (not the rates) so desk-scale runs keep the schedule shape.
#[derive(Clone, Debug)]
pub struct TrainSchedule {
    pub mode: ScheduleMode,
    pub base_lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub scale: f64,
    drops: Vec<(u64, f32)>,
    stop: u64,
}

fn scaled(point: u64, scale: f64) -> u64 {
    ((point as f64 * scale).round() as u64).max(1)
}

impl TrainSchedule {
    pub fn new(mode: ScheduleMode, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Argument(format!("schedule scale must be positive, got {scale}")));
        }
        let (drops, stop) = match mode {
            ScheduleMode::Scratch => (
                vec![(scaled(50_000, scale), 1e-3), (scaled(70_000, scale), 1e-4)],
                scaled(80_000, scale),
            ),
            ScheduleMode::FineTune => (vec![(scaled(14_000, scale), 1e-3)], scaled(20_000, scale)),
        };
        for pair in drops.windows(2) {
            if pair[0].0 >= pair[1].0 {
                return Err(Error::Argument(
                    "schedule scale collapses the drop points".into(),
                ));
            }
        }
        if drops.last().is_some_and(|&(at, _)| at >= stop) {
            return Err(Error::Argument("drop points must precede the stop point".into()));
        }
        Ok(Self {
            mode,
            base_lr: 1e-2,
            momentum: MOMENTUM,
            batch_size: 256,
            scale,
            drops,
            stop,
        })
    }

    pub fn scratch(scale: f64) -> Result<Self> {
        Self::new(ScheduleMode::Scratch, scale)
    }

    pub fn fine_tune(scale: f64) -> Result<Self> {
        Self::new(ScheduleMode::FineTune, scale)
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size;
        self
    }

    pub fn stop_iteration(&self) -> u64 {
        self.stop
    }

    /// Learning rate at an iteration; the schedule is exhausted at and
    /// past the stop point.
    pub fn lr_at(&self, iteration: u64) -> Result<f32> {
        if iteration >= self.stop {
            return Err(Error::ScheduleExhausted(iteration));
        }
        let mut lr = self.base_lr;
        for &(at, rate) in &self.drops {
            if iteration >= at {
                lr = rate;
            }
        }
        Ok(lr)
    }
}

/// One momentum-SGD step: m <- momentum * m - lr * g; w <- w + m.
/// Advances the iteration counter once per call.
pub fn sgd_step<T: Scalar>(
    state: &mut NetworkStateBase<T>,
    grads: &Gradients<T>,
    lr: f32,
    momentum: f32,
) -> Result<()> {
    if grads.layers.len() != state.layers.len() || grads.heads.len() != state.heads.len() {
        return Err(Error::Shape("gradients do not match state layout".into()));
    }
    let lr = T::from_f32(lr);
    let mu = T::from_f32(momentum);
    let mut apply = |param: &mut Option<TensorBase<T>>,
                     vel: &mut Option<TensorBase<T>>,
                     grad: &Option<TensorBase<T>>|
     -> Result<()> {
        let (Some(p), Some(m)) = (param.as_mut(), vel.as_mut()) else {
            return Ok(());
        };
        let Some(g) = grad.as_ref() else {
            return Ok(());
        };
        if g.shape() != p.shape() {
            return Err(Error::Shape(format!(
                "gradient shape {:?} does not match parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        for ((pv, mv), &gv) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut().iter_mut())
            .zip(g.data())
        {
            *mv = mu * *mv - lr * gv;
            *pv += *mv;
        }
        Ok(())
    };
    for i in 0..state.layers.len() {
        let (params, vel) = (&mut state.layers[i], &mut state.layer_momentum[i]);
        apply(&mut params.weight, &mut vel.weight, &grads.layers[i].weight)?;
        apply(&mut params.bias, &mut vel.bias, &grads.layers[i].bias)?;
    }
    for i in 0..state.heads.len() {
        let (params, vel) = (&mut state.heads[i], &mut state.head_momentum[i]);
        apply(&mut params.weight, &mut vel.weight, &grads.heads[i].weight)?;
        apply(&mut params.bias, &mut vel.bias, &grads.heads[i].bias)?;
    }
    state.iteration += 1;
    Ok(())
}

/// Supplies one labeled batch per training iteration.
pub trait BatchSource {
    fn next_batch(&mut self, rng: &mut Rng) -> Result<RoutedBatch>;
}

pub struct TrainOutcome {
    pub state: NetworkStateBase<f32>,
    /// Total multi-task loss per iteration.
    pub loss_trace: Vec<f32>,
}

/// Train until the schedule stops. Deterministic for a fixed seed: batch
/// sampling, dropout masks, and init all replay from the rng.
pub fn train(
    config: &NetworkConfig,
    schedule: &TrainSchedule,
    source: &mut dyn BatchSource,
    rng: &mut Rng,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut state = NetworkStateBase::<f32>::init(config, rng)?;
    let trace = train_from(config, schedule, source, &mut state, rng)?;
    Ok(TrainOutcome {
        state,
        loss_trace: trace,
    })
}

/// Training loop on an existing state (fine-tuning entry point).
pub fn train_from(
    config: &NetworkConfig,
    schedule: &TrainSchedule,
    source: &mut dyn BatchSource,
    state: &mut NetworkStateBase<f32>,
    rng: &mut Rng,
) -> Result<Vec<f32>> {
    let mut trace = Vec::new();
    for iteration in 0..schedule.stop_iteration() {
        let lr = schedule.lr_at(iteration)?;
        let batch = source.next_batch(rng)?;
        batch.validate()?;
        let pass = forward(config, state, &batch.inputs, true, Some(rng))?;
        let loss = multitask_loss(&config.heads, &pass, &batch)?;
        if !loss.total.is_finite() {
            return Err(Error::Data(format!(
                "non-finite loss at iteration {iteration}"
            )));
        }
        let grads = backward(config, state, &pass, &loss.seeds)?;
        sgd_step(state, &grads, lr, schedule.momentum)?;
        trace.push(loss.total);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::tests::tiny_config;
    use crate::net::NetworkState;

    #[test]
    fn lr_schedule_paper_breakpoints() {
        let s = TrainSchedule::scratch(1.0).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 1e-2);
        assert_eq!(s.lr_at(49_999).unwrap(), 1e-2);
        assert_eq!(s.lr_at(50_000).unwrap(), 1e-3);
        assert_eq!(s.lr_at(69_999).unwrap(), 1e-3);
        assert_eq!(s.lr_at(70_000).unwrap(), 1e-4);
        assert_eq!(s.lr_at(79_999).unwrap(), 1e-4);
        assert!(matches!(
            s.lr_at(80_000),
            Err(Error::ScheduleExhausted(80_000))
        ));

        let f = TrainSchedule::fine_tune(1.0).unwrap();
        assert_eq!(f.lr_at(0).unwrap(), 1e-2);
        assert_eq!(f.lr_at(13_999).unwrap(), 1e-2);
        assert_eq!(f.lr_at(14_000).unwrap(), 1e-3);
        assert!(f.lr_at(20_000).is_err());
    }

    #[test]
    fn scaled_schedule_keeps_shape() {
        let s = TrainSchedule::scratch(0.001).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 1e-2);
        assert_eq!(s.lr_at(50).unwrap(), 1e-3);
        assert_eq!(s.lr_at(70).unwrap(), 1e-4);
        assert_eq!(s.stop_iteration(), 80);
    }

    #[test]
    fn collapsed_scale_rejected() {
        assert!(TrainSchedule::scratch(1e-9).is_err());
    }

    fn zero_grads(state: &NetworkState) -> Gradients<f32> {
        Gradients {
            layers: state
                .layers
                .iter()
                .map(|p| ParamSet {
                    weight: p.weight.as_ref().map(|t| t.zeros_like()),
                    bias: p.bias.as_ref().map(|t| t.zeros_like()),
                })
                .collect(),
            heads: state
                .heads
                .iter()
                .map(|p| ParamSet {
                    weight: p.weight.as_ref().map(|t| t.zeros_like()),
                    bias: p.bias.as_ref().map(|t| t.zeros_like()),
                })
                .collect(),
            input: TensorBase::zeros(&[1, 2, 8, 8]).unwrap(),
        }
    }

    #[test]
    fn sgd_zero_gradient_keeps_parameters() {
        let config = tiny_config(2, 3);
        let mut state = NetworkState::init(&config, &mut Rng::new(1)).unwrap();
        let before = state.clone();
        let grads = zero_grads(&state);
        sgd_step(&mut state, &grads, 0.1, MOMENTUM).unwrap();
        assert_eq!(state.layers, before.layers);
        assert_eq!(state.iteration, 1);
    }

    #[test]
    fn sgd_first_step_is_minus_lr_g() {
        let config = tiny_config(2, 3);
        let mut state = NetworkState::init(&config, &mut Rng::new(1)).unwrap();
        let w_before = state.heads[0].weight.clone().unwrap();
        let mut grads = zero_grads(&state);
        let g = TensorBase::new(w_before.shape(), 2.0).unwrap();
        grads.heads[0].weight = Some(g);
        sgd_step(&mut state, &grads, 0.05, MOMENTUM).unwrap();
        let w_after = state.heads[0].weight.as_ref().unwrap();
        for (a, b) in w_after.data().iter().zip(w_before.data()) {
            assert!((a - (b - 0.05 * 2.0)).abs() < 1e-7);
        }
    }

    #[test]
    fn sgd_two_steps_accumulate_momentum() {
        // constant gradient g: total displacement after two steps is
        // -lr*g * (1 + 1.9) from the momentum recurrence
        let config = tiny_config(2, 3);
        let mut state = NetworkState::init(&config, &mut Rng::new(1)).unwrap();
        let w_before = state.heads[0].weight.clone().unwrap();
        let mut grads = zero_grads(&state);
        grads.heads[0].weight = Some(TensorBase::new(w_before.shape(), 1.0).unwrap());
        sgd_step(&mut state, &grads, 0.01, MOMENTUM).unwrap();
        sgd_step(&mut state, &grads, 0.01, MOMENTUM).unwrap();
        let w_after = state.heads[0].weight.as_ref().unwrap();
        for (a, b) in w_after.data().iter().zip(w_before.data()) {
            let delta = a - b;
            assert!((delta + 0.01 * (1.0 + 1.9)).abs() < 1e-6, "delta {delta}");
        }
    }

    #[test]
    fn sgd_shape_mismatch_rejected() {
        let config = tiny_config(2, 3);
        let mut state = NetworkState::init(&config, &mut Rng::new(1)).unwrap();
        let mut grads = zero_grads(&state);
        grads.heads[0].weight = Some(TensorBase::zeros(&[1, 1]).unwrap());
        assert!(matches!(
            sgd_step(&mut state, &grads, 0.01, MOMENTUM),
            Err(Error::Shape(_))
        ));
    }
}
