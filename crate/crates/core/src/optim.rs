//! LARS and Nesterov SGD, parameter groups, and the learning-rate and
//! target-decay schedules.

use std::f64::consts::PI;

use byol_tensor::Tensor;

use crate::error::{Error, Result};
use crate::model::{Param, ParamRole, Subnet};

/// Added to the denominator of the LARS trust ratio.
pub const LARS_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TauSchedule {
    /// `τ = 1 − (1 − τ_base)(cos(πk/K) + 1)/2`.
    Cosine,
    /// `τ = τ_base` throughout.
    Constant,
}

impl TauSchedule {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cosine => "cosine",
            Self::Constant => "constant",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cosine" => Some(Self::Cosine),
            "constant" => Some(Self::Constant),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    /// Images per optimizer update, accumulation included.
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub tau_base: f64,
    pub tau_schedule: TauSchedule,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::InvalidArgument(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(0.0..=1.0).contains(&self.tau_base) {
            return Err(Error::InvalidArgument(format!("tau_base {} outside [0, 1]", self.tau_base)));
        }
        if !(self.base_lr >= 0.0) {
            return Err(Error::InvalidArgument(format!("base_lr {} must be nonnegative", self.base_lr)));
        }
        Ok(())
    }

    /// `base_lr × batch_size / 256`.
    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    fn check_step(&self, k: u64) -> Result<()> {
        if k > self.total_steps {
            return Err(Error::InvalidArgument(format!("step {k} beyond total {}", self.total_steps)));
        }
        Ok(())
    }

    /// Linear warmup to the peak, then cosine decay to zero at `K`.
    pub fn lr_at(&self, k: u64) -> Result<f64> {
        self.check_step(k)?;
        let peak = self.peak_lr();
        let w = self.warmup_steps;
        if k < w {
            return Ok(peak * k as f64 / w as f64);
        }
        let decay = self.total_steps - w;
        if decay == 0 {
            return Ok(peak);
        }
        let t = (k - w) as f64 / decay as f64;
        Ok(peak * ((PI * t).cos() + 1.0) / 2.0)
    }

    pub fn tau_at(&self, k: u64) -> Result<f64> {
        self.check_step(k)?;
        match self.tau_schedule {
            TauSchedule::Constant => Ok(self.tau_base),
            TauSchedule::Cosine if self.total_steps == 0 => Ok(self.tau_base),
            // Written so that both endpoints come out exact.
            TauSchedule::Cosine if k == self.total_steps => Ok(1.0),
            TauSchedule::Cosine => {
                let c = (PI * k as f64 / self.total_steps as f64).cos();
                Ok(self.tau_base + (1.0 - self.tau_base) * (1.0 - c) / 2.0)
            }
        }
    }
}

/// Optimizer treatment of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub role: ParamRole,
    pub subnet: Subnet,
    pub lr_multiplier: f64,
    pub lars_adapt: bool,
    pub weight_decay: bool,
}

/// One group per parameter; biases and batch-norm parameters are excluded
/// from trust-ratio adaptation and weight decay.
pub fn param_groups(params: &[Param]) -> Vec<ParamGroup> {
    params
        .iter()
        .map(|p| {
            let weight = p.role == ParamRole::Weight;
            ParamGroup {
                name: p.name.clone(),
                role: p.role,
                subnet: p.subnet,
                lr_multiplier: 1.0,
                lars_adapt: weight,
                weight_decay: weight,
            }
        })
        .collect()
}

/// Sets the learning-rate multiplier of predictor groups to `lambda_pred`
/// and of projector groups to `mu_proj`.
pub fn group_multipliers(groups: &mut [ParamGroup], lambda_pred: f64, mu_proj: f64) -> Result<()> {
    if !(lambda_pred >= 0.0 && mu_proj >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "learning-rate multipliers must be nonnegative, got {lambda_pred} and {mu_proj}"
        )));
    }
    for g in groups {
        g.lr_multiplier = match g.subnet {
            Subnet::Predictor => lambda_pred,
            Subnet::Projector => mu_proj,
            Subnet::Encoder => 1.0,
        };
    }
    Ok(())
}

fn check_finite(name: &str, g: &Tensor) -> Result<()> {
    if g.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteGradient(name.to_string()))
    }
}

fn check_lengths(params: usize, grads: usize, buffers: usize) -> Result<()> {
    if params != grads || params != buffers {
        return Err(Error::Shape(format!(
            "{params} parameters, {grads} gradients, {buffers} momentum buffers"
        )));
    }
    Ok(())
}

fn trust_ratio(trust: f64, w: &Tensor, update: &Tensor) -> f64 {
    let (wn, un) = (w.norm(), update.norm());
    if wn > 0.0 && un > 0.0 {
        trust * wn / (un + LARS_EPS)
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LarsConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub trust_coefficient: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lars {
    pub config: LarsConfig,
    pub buffers: Vec<Tensor>,
}

impl Lars {
    pub fn new(config: LarsConfig, params: &[Param]) -> Self {
        Self { config, buffers: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect() }
    }

    /// Trust ratio for one parameter; 1 when either norm vanishes.
    pub fn local_lr(&self, w: &Tensor, update: &Tensor) -> f64 {
        trust_ratio(self.config.trust_coefficient, w, update)
    }

    pub fn step(&mut self, params: &mut [Param], groups: &[ParamGroup], grads: &[Tensor], lr: f64) -> Result<()> {
        check_lengths(params.len(), grads.len(), self.buffers.len())?;
        if groups.len() != params.len() {
            return Err(Error::Shape(format!("{} groups for {} parameters", groups.len(), params.len())));
        }
        for (p, g) in params.iter().zip(grads) {
            check_finite(&p.name, g)?;
            if p.value.shape() != g.shape() {
                return Err(Error::Shape(format!("{}: gradient shape {:?}", p.name, g.shape())));
            }
        }
        let LarsConfig { momentum, weight_decay, trust_coefficient } = self.config;
        for ((p, g), (group, buf)) in params.iter_mut().zip(grads).zip(groups.iter().zip(&mut self.buffers)) {
            let mut update = g.clone();
            if group.weight_decay && weight_decay != 0.0 {
                update.axpy(weight_decay, &p.value);
            }
            let mut scale = lr * group.lr_multiplier;
            if group.lars_adapt {
                scale *= trust_ratio(trust_coefficient, &p.value, &update);
            }
            buf.scale_in_place(momentum);
            buf.axpy(scale, &update);
            p.value.axpy(-1.0, buf);
        }
        Ok(())
    }
}

/// SGD with Nesterov momentum: `b ← μb + g`, `w ← w − lr (g + μb)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Nesterov {
    pub momentum: f64,
    pub buffers: Vec<Tensor>,
}

impl Nesterov {
    pub fn new(momentum: f64, params: &[Tensor]) -> Self {
        Self { momentum, buffers: params.iter().map(|p| Tensor::zeros(p.shape())).collect() }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        check_lengths(params.len(), grads.len(), self.buffers.len())?;
        for (i, g) in grads.iter().enumerate() {
            check_finite(&format!("param{i}"), g)?;
        }
        let mu = self.momentum;
        for ((w, g), b) in params.iter_mut().zip(grads).zip(&mut self.buffers) {
            b.scale_in_place(mu);
            b.axpy(1.0, g);
            w.axpy(-lr, g);
            w.axpy(-lr * mu, b);
        }
        Ok(())
    }
}
