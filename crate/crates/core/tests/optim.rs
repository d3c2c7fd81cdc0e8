mod common;

use byol_core::config::RunConfig;
use byol_core::model::{Param, ParamRole, Subnet};
use byol_core::optim::{param_groups, Lars, LarsConfig, Nesterov, ParamGroup, Schedule, TauSchedule};
use byol_core::trainer::{TrainState, Trainer};
use byol_tensor::Tensor;
use common::{tiny_config, tiny_data};
use proptest::prelude::*;

fn param(name: &str, role: ParamRole, values: &[f64]) -> Param {
    Param { name: name.into(), value: Tensor::new(&[values.len()], values.to_vec()).unwrap(), role, subnet: Subnet::Encoder }
}

fn lars(momentum: f64, weight_decay: f64, trust: f64, params: &[Param]) -> Lars {
    Lars::new(LarsConfig { momentum, weight_decay, trust_coefficient: trust }, params)
}

#[test]
fn trust_ratio_three_four_five() {
    let mut params = vec![param("w", ParamRole::Weight, &[3.0, 4.0])];
    let groups = param_groups(&params);
    let mut opt = lars(0.0, 0.0, 0.001, &params);
    let g = Tensor::new(&[2], vec![0.6, 0.8]).unwrap();
    let local = opt.local_lr(&params[0].value, &g);
    assert!((local - 0.005).abs() < 1e-11, "{local}");
    opt.step(&mut params, &groups, &[g], 1.0).unwrap();
    let w = params[0].value.data();
    assert!((w[0] - (3.0 - 0.005 * 0.6)).abs() < 1e-11);
    assert!((w[1] - (4.0 - 0.005 * 0.8)).abs() < 1e-11);
}

#[test]
fn zero_gradient_without_decay_leaves_parameters() {
    let mut params = vec![param("w", ParamRole::Weight, &[1.0, -2.0]), param("b", ParamRole::Bias, &[0.5])];
    let before = params.clone();
    let groups = param_groups(&params);
    let mut opt = lars(0.9, 0.0, 0.001, &params);
    let grads = vec![Tensor::zeros(&[2]), Tensor::zeros(&[1])];
    for _ in 0..3 {
        opt.step(&mut params, &groups, &grads, 0.7).unwrap();
    }
    assert_eq!(params, before);
}

#[test]
fn biases_and_norm_parameters_take_plain_momentum_steps() {
    for role in [ParamRole::Bias, ParamRole::BatchNorm] {
        let mut outcomes = Vec::new();
        for trust in [1e-3, 0.5, 10.0] {
            let mut params = vec![param("b", role, &[2.0, -1.0, 0.5])];
            let groups = param_groups(&params);
            let mut opt = lars(0.9, 0.1, trust, &params);
            let grads = [Tensor::new(&[3], vec![0.3, -0.2, 0.1]).unwrap()];
            for _ in 0..3 {
                opt.step(&mut params, &groups, &grads, 0.05).unwrap();
            }
            outcomes.push(params[0].value.clone());
        }
        // SGD with momentum, no weight decay, no trust ratio.
        let (mut w, mut buf) = (vec![2.0, -1.0, 0.5], vec![0.0; 3]);
        let g = [0.3, -0.2, 0.1];
        for _ in 0..3 {
            for i in 0..3 {
                buf[i] = 0.9 * buf[i] + 0.05 * g[i];
                w[i] -= buf[i];
            }
        }
        for out in &outcomes {
            for (a, b) in out.data().iter().zip(&w) {
                assert!((a - b).abs() < 1e-14, "{role:?}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn nesterov_two_steps_on_a_quadratic_bowl() {
    // Loss x²/2 from x = 1 with lr 0.1: plain SGD gives 0.81 after two steps.
    let mut x = vec![Tensor::scalar(1.0)];
    let mut opt = Nesterov::new(0.9, &x);
    for _ in 0..2 {
        let g = x[0].clone();
        opt.step(&mut x, &[g], 0.1).unwrap();
    }
    // By hand: b1 = 1, x1 = 1 − 0.1(1 + 0.9) = 0.81; b2 = 0.9 + 0.81 = 1.71,
    // x2 = 0.81 − 0.1(0.81 + 0.9·1.71) = 0.5751.
    let got = x[0].item().unwrap();
    assert!((got - 0.5751).abs() < 1e-12, "{got}");
    assert!(got < 0.81);
}

#[test]
fn nesterov_zero_gradient_is_a_no_op() {
    let mut x = vec![Tensor::new(&[2], vec![0.3, -0.4]).unwrap()];
    let before = x.clone();
    let mut opt = Nesterov::new(0.9, &x);
    opt.step(&mut x, &[Tensor::zeros(&[2])], 0.5).unwrap();
    assert_eq!(x, before);
}

fn first_step_state(config: &RunConfig, adapt: bool) -> TrainState {
    let data = tiny_data(config);
    let mut state = TrainState::new(config).unwrap();
    if !adapt {
        state.groups.iter_mut().for_each(|g: &mut ParamGroup| g.lars_adapt = false);
    }
    let mut t = Trainer::with_state(config.clone(), &data, state).unwrap();
    t.step().unwrap();
    t.state
}

fn subnet_update_norm(before: &TrainState, after: &TrainState, subnet: Subnet) -> f64 {
    before
        .pair
        .online
        .iter()
        .zip(&after.pair.online)
        .filter(|(p, _)| p.subnet == subnet)
        .flat_map(|(a, b)| a.value.data().iter().zip(b.value.data()).map(|(x, y)| (x - y).powi(2)).collect::<Vec<_>>())
        .sum::<f64>()
        .sqrt()
}

#[test]
fn predictor_multiplier_scales_the_first_update() {
    let base = tiny_config();
    let init = TrainState::new(&base).unwrap();
    let mut fast = base.clone();
    fast.set("optim.predictor_lr_mult", "10").unwrap();
    let slow_step = first_step_state(&base, false);
    let fast_step = first_step_state(&fast, false);
    let ratio = subnet_update_norm(&init, &fast_step, Subnet::Predictor)
        / subnet_update_norm(&init, &slow_step, Subnet::Predictor);
    assert!((ratio / 10.0 - 1.0).abs() < 0.05, "ratio {ratio}");
    let enc = subnet_update_norm(&init, &fast_step, Subnet::Encoder) / subnet_update_norm(&init, &slow_step, Subnet::Encoder);
    assert!((enc - 1.0).abs() < 1e-9, "encoder ratio {enc}");
}

#[test]
fn unit_multipliers_reproduce_the_baseline_and_zero_freezes_the_predictor() {
    let base = tiny_config();
    let mut unit = base.clone();
    unit.set("optim.predictor_lr_mult", "1").unwrap();
    unit.set("optim.projector_lr_mult", "1").unwrap();
    assert_eq!(first_step_state(&base, true).pair, first_step_state(&unit, true).pair);

    let mut frozen = base.clone();
    frozen.set("optim.predictor_lr_mult", "0").unwrap();
    let data = tiny_data(&frozen);
    let mut t = Trainer::new(frozen.clone(), &data).unwrap();
    let pred = |t: &Trainer| -> Vec<Param> {
        t.state.pair.online.iter().filter(|p| p.subnet == Subnet::Predictor).cloned().collect()
    };
    let start = pred(&t);
    t.run_until(5, |_, _| Ok(())).unwrap();
    assert_eq!(pred(&t), start);
    let enc_moved = subnet_update_norm(&TrainState::new(&frozen).unwrap(), &t.state, Subnet::Encoder);
    assert!(enc_moved > 0.0);
}

fn schedule_strategy() -> impl Strategy<Value = Schedule> {
    (1u64..400, 0.0f64..1.0, 0.0f64..2.0, 1usize..512, prop::bool::ANY).prop_flat_map(|(k, tau, lr, b, cosine)| {
        (0..=k).prop_map(move |w| Schedule {
            base_lr: lr,
            batch_size: b,
            warmup_steps: w,
            total_steps: k,
            tau_base: tau,
            tau_schedule: if cosine { TauSchedule::Cosine } else { TauSchedule::Constant },
        })
    })
}

proptest! {
    #[test]
    fn lr_stays_in_range_and_decays_after_warmup(s in schedule_strategy()) {
        let peak = s.peak_lr();
        let mut prev = f64::INFINITY;
        for k in 0..=s.total_steps {
            let lr = s.lr_at(k).unwrap();
            prop_assert!((0.0..=peak * (1.0 + 1e-12)).contains(&lr));
            if k < s.warmup_steps {
                prop_assert!(lr <= s.lr_at(k + 1).unwrap() + 1e-15);
            } else {
                prop_assert!(lr <= prev + 1e-15);
                prev = lr;
            }
        }
        prop_assert!(s.lr_at(s.total_steps + 1).is_err());
    }

    #[test]
    fn tau_rises_monotonically_from_base_to_one(s in schedule_strategy()) {
        let mut prev = s.tau_at(0).unwrap();
        prop_assert_eq!(prev, s.tau_base);
        for k in 1..=s.total_steps {
            let t = s.tau_at(k).unwrap();
            prop_assert!(t >= prev - 1e-15 && t <= 1.0);
            prev = t;
        }
        if s.tau_schedule == TauSchedule::Cosine {
            prop_assert_eq!(s.tau_at(s.total_steps).unwrap(), 1.0);
        }
    }
}

#[test]
fn full_preset_tau_endpoints_are_exact() {
    let s = RunConfig::preset("full").unwrap().schedule();
    assert_eq!(s.tau_at(0).unwrap(), 0.996);
    assert_eq!(s.tau_at(s.total_steps).unwrap(), 1.0);
    assert!((s.tau_at(s.total_steps / 2).unwrap() - 0.998).abs() < 1e-15);
}
