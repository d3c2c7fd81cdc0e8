//! Online and target networks.
//!
//! The online network is encoder → projector → predictor; the target network
//! is a second encoder → projector whose parameters only ever change through
//! [`NetworkPair::ema_update`]. Online parameters are stored encoder first,
//! then projector, then predictor, so the first [`NetworkPair::num_target_params`]
//! online parameters line up one-to-one with the target parameters.

use std::fmt;

use byol_tensor::{BnMode, NodeId, RunningStats, Tape, Tensor};
use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    /// Stack of 3x3 conv + BN + ReLU + 2x2 average pooling blocks, then
    /// global average pooling.
    SmallConv,
    /// Flattened input through Linear + BN + ReLU layers.
    Mlp,
}

impl EncoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::SmallConv => "small_conv",
            Self::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "small_conv" => Some(Self::SmallConv),
            "mlp" => Some(Self::Mlp),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureSpec {
    pub encoder: EncoderKind,
    /// Conv channels per block, or MLP hidden widths. The last entry is the
    /// representation dimension.
    pub encoder_widths: Vec<usize>,
    pub input_channels: usize,
    /// Side of the square network input.
    pub input_size: usize,
    pub projector_hidden: usize,
    pub projection_dim: usize,
    /// Batch normalization after every hidden layer. Without it, conv
    /// layers gain a bias.
    pub batch_norm: bool,
}

impl ArchitectureSpec {
    /// 4 conv blocks, representation 128, projector 512 → 64, for 32x32 RGB.
    pub fn desk_conv() -> Self {
        Self {
            encoder: EncoderKind::SmallConv,
            encoder_widths: vec![32, 64, 128, 128],
            input_channels: 3,
            input_size: 32,
            projector_hidden: 512,
            projection_dim: 64,
            batch_norm: true,
        }
    }

    pub fn representation_dim(&self) -> usize {
        *self.encoder_widths.last().expect("validated")
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.input_channels,
            self.input_size,
            self.projector_hidden,
            self.projection_dim,
        ];
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) || dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("degenerate architecture {self:?}")));
        }
        if self.encoder == EncoderKind::SmallConv {
            let pools = self.encoder_widths.len() - 1;
            if self.input_size >> pools == 0 {
                return Err(Error::InvalidArgument(format!(
                    "input {} too small for {} pooling stages",
                    self.input_size, pools
                )));
            }
        }
        Ok(())
    }

    fn encoder_layers(&self) -> Vec<Layer> {
        let mut layers = Vec::new();
        match self.encoder {
            EncoderKind::Mlp => {
                layers.push(Layer::Flatten);
                let mut prev = self.input_channels * self.input_size * self.input_size;
                for &w in &self.encoder_widths {
                    layers.push(Layer::Linear { inputs: prev, outputs: w });
                    if self.batch_norm {
                        layers.push(Layer::BatchNorm { features: w });
                    }
                    layers.push(Layer::Relu);
                    prev = w;
                }
            }
            EncoderKind::SmallConv => {
                let mut prev = self.input_channels;
                let last = self.encoder_widths.len() - 1;
                for (i, &w) in self.encoder_widths.iter().enumerate() {
                    layers.push(Layer::Conv3x3 { inputs: prev, outputs: w, bias: !self.batch_norm });
                    if self.batch_norm {
                        layers.push(Layer::BatchNorm { features: w });
                    }
                    layers.push(Layer::Relu);
                    if i < last {
                        layers.push(Layer::AvgPool2);
                    }
                    prev = w;
                }
                layers.push(Layer::GlobalAvgPool);
            }
        }
        layers
    }

    fn head_layers(&self, inputs: usize) -> Vec<Layer> {
        let mut layers = vec![Layer::Linear { inputs, outputs: self.projector_hidden }];
        if self.batch_norm {
            layers.push(Layer::BatchNorm { features: self.projector_hidden });
        }
        layers.push(Layer::Relu);
        // Final projection: no batch norm, no activation.
        layers.push(Layer::Linear { inputs: self.projector_hidden, outputs: self.projection_dim });
        layers
    }

    fn stages(&self) -> [(Subnet, Vec<Layer>); 3] {
        [
            (Subnet::Encoder, self.encoder_layers()),
            (Subnet::Projector, self.head_layers(self.representation_dim())),
            (Subnet::Predictor, self.head_layers(self.projection_dim)),
        ]
    }

    /// Number of scalar parameters per subnetwork, from the layer arithmetic.
    pub fn parameter_count(&self, subnet: Subnet) -> usize {
        let stages = self.stages();
        let (_, layers) = stages.iter().find(|(s, _)| *s == subnet).expect("all subnets");
        layers.iter().map(Layer::parameter_count).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Subnet {
    Encoder,
    Projector,
    Predictor,
}

impl Subnet {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Encoder => "encoder",
            Self::Projector => "projector",
            Self::Predictor => "predictor",
        }
    }
}

impl fmt::Display for Subnet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Weight,
    Bias,
    BatchNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Linear { inputs: usize, outputs: usize },
    Conv3x3 { inputs: usize, outputs: usize, bias: bool },
    BatchNorm { features: usize },
    Relu,
    AvgPool2,
    GlobalAvgPool,
    Flatten,
}

impl Layer {
    fn parameter_count(&self) -> usize {
        match *self {
            Self::Linear { inputs, outputs } => inputs * outputs + outputs,
            Self::Conv3x3 { inputs, outputs, bias } => inputs * outputs * 9 + if bias { outputs } else { 0 },
            Self::BatchNorm { features } => 2 * features,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub role: ParamRole,
    pub subnet: Subnet,
}

fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect()).expect("shape")
}

#[derive(Debug, Clone, PartialEq)]
struct Stage {
    subnet: Subnet,
    layers: Vec<Layer>,
    params: std::ops::Range<usize>,
    stats: std::ops::Range<usize>,
}

/// Online parameters θ, target parameters ξ, and their batch-norm statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkPair {
    arch: ArchitectureSpec,
    stages: Vec<Stage>,
    pub online: Vec<Param>,
    pub online_stats: Vec<RunningStats>,
    pub target: Vec<Param>,
    pub target_stats: Vec<RunningStats>,
}

/// Values produced by one online forward pass.
#[derive(Debug, Clone, Copy)]
pub struct OnlineOutputs {
    pub representation: NodeId,
    pub projection: NodeId,
    pub prediction: Option<NodeId>,
}

/// Which parameters produce the regression targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetMode {
    /// Online parameters, gradients flow through the targets.
    Online,
    /// Online parameters behind a stop-gradient.
    StopGradOnline,
    /// The moving-average target network.
    MovingAverage,
}

impl TargetMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Online => "theta",
            Self::StopGradOnline => "sg_theta",
            Self::MovingAverage => "xi",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "theta" => Some(Self::Online),
            "sg_theta" => Some(Self::StopGradOnline),
            "xi" => Some(Self::MovingAverage),
            _ => None,
        }
    }
}

impl NetworkPair {
    /// Fan-in scaled uniform weights, zero biases, unit BN scale, zero BN
    /// shift. The target starts as an exact copy of the online encoder and
    /// projector.
    pub fn new(arch: ArchitectureSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = RngStream::new(seed).split(0x1417).rng();
        let mut stages = Vec::new();
        let mut online = Vec::new();
        let mut online_stats = Vec::new();
        for (subnet, layers) in arch.stages() {
            let (p0, s0) = (online.len(), online_stats.len());
            for (i, layer) in layers.iter().enumerate() {
                let name = |kind: &str| format!("{subnet}.{i}.{kind}");
                match *layer {
                    Layer::Linear { inputs, outputs } => {
                        let bound = (1.0 / inputs as f64).sqrt();
                        online.push(Param {
                            name: name("weight"),
                            value: uniform_tensor(&[inputs, outputs], bound, &mut rng),
                            role: ParamRole::Weight,
                            subnet,
                        });
                        online.push(Param {
                            name: name("bias"),
                            value: Tensor::zeros(&[outputs]),
                            role: ParamRole::Bias,
                            subnet,
                        });
                    }
                    Layer::Conv3x3 { inputs, outputs, bias } => {
                        let bound = (1.0 / (inputs * 9) as f64).sqrt();
                        online.push(Param {
                            name: name("kernel"),
                            value: uniform_tensor(&[outputs, inputs, 3, 3], bound, &mut rng),
                            role: ParamRole::Weight,
                            subnet,
                        });
                        if bias {
                            online.push(Param {
                                name: name("bias"),
                                value: Tensor::zeros(&[outputs]),
                                role: ParamRole::Bias,
                                subnet,
                            });
                        }
                    }
                    Layer::BatchNorm { features } => {
                        online.push(Param {
                            name: name("gamma"),
                            value: Tensor::full(&[features], 1.0),
                            role: ParamRole::BatchNorm,
                            subnet,
                        });
                        online.push(Param {
                            name: name("beta"),
                            value: Tensor::zeros(&[features]),
                            role: ParamRole::BatchNorm,
                            subnet,
                        });
                        online_stats.push(RunningStats::new(features));
                    }
                    _ => {}
                }
            }
            stages.push(Stage { subnet, layers, params: p0..online.len(), stats: s0..online_stats.len() });
        }
        let predictor = &stages[2];
        let target = online[..predictor.params.start].to_vec();
        let target_stats = online_stats[..predictor.stats.start].to_vec();
        Ok(Self { arch, stages, online, online_stats, target, target_stats })
    }

    pub fn arch(&self) -> &ArchitectureSpec {
        &self.arch
    }

    pub fn num_target_params(&self) -> usize {
        self.target.len()
    }

    pub fn layers(&self, subnet: Subnet) -> &[Layer] {
        &self.stage(subnet).layers
    }

    fn stage(&self, subnet: Subnet) -> &Stage {
        self.stages.iter().find(|s| s.subnet == subnet).expect("all subnets built")
    }

    /// Registers every online parameter as a trainable leaf.
    pub fn register_online(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.online.iter().map(|p| tape.param(p.value.clone())).collect()
    }

    /// Registers the online parameters as constants.
    pub fn register_online_frozen(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.online.iter().map(|p| tape.constant(p.value.clone())).collect()
    }

    /// Registers the target parameters as constants.
    pub fn register_target(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.target.iter().map(|p| tape.constant(p.value.clone())).collect()
    }

    fn check_input(&self, tape: &Tape, x: NodeId) -> Result<()> {
        let shape = tape.value(x)?.shape();
        let a = &self.arch;
        let want = [a.input_channels, a.input_size, a.input_size];
        if shape.len() != 4 || shape[1..] != want {
            return Err(Error::Shape(format!(
                "network input {shape:?}, expected (N, {}, {}, {})",
                want[0], want[1], want[2]
            )));
        }
        Ok(())
    }

    fn run_stage(
        &self,
        subnet: Subnet,
        tape: &mut Tape,
        params: &[NodeId],
        stats: &mut [RunningStats],
        mut x: NodeId,
        mode: BnMode,
    ) -> Result<NodeId> {
        let stage = self.stage(subnet);
        let params = &params[stage.params.clone()];
        let stats = &mut stats[stage.stats.clone()];
        let (mut pi, mut si) = (0, 0);
        for layer in &stage.layers {
            x = match *layer {
                Layer::Linear { .. } => {
                    let h = tape.matmul(x, params[pi])?;
                    let h = tape.add_bias(h, params[pi + 1])?;
                    pi += 2;
                    h
                }
                Layer::Conv3x3 { bias, .. } => {
                    let mut h = tape.conv2d(x, params[pi], 1, 1)?;
                    pi += 1;
                    if bias {
                        h = tape.add_bias(h, params[pi])?;
                        pi += 1;
                    }
                    h
                }
                Layer::BatchNorm { .. } => {
                    let h = tape.batch_norm(x, params[pi], params[pi + 1], &mut stats[si], mode)?;
                    pi += 2;
                    si += 1;
                    h
                }
                Layer::Relu => tape.relu(x)?,
                Layer::AvgPool2 => tape.avg_pool2d(x, 2)?,
                Layer::GlobalAvgPool => tape.global_avg_pool(x)?,
                Layer::Flatten => tape.flatten(x)?,
            };
        }
        Ok(x)
    }

    /// Representation `y = f(x)` using online parameters.
    pub fn encode(&mut self, tape: &mut Tape, params: &[NodeId], x: NodeId, mode: BnMode) -> Result<NodeId> {
        self.check_input(tape, x)?;
        let mut stats = std::mem::take(&mut self.online_stats);
        let out = self.run_stage(Subnet::Encoder, tape, params, &mut stats, x, mode);
        self.online_stats = stats;
        out
    }

    /// `y = f(x)`, `z = g(y)` and, when requested, `p = q(z)`.
    pub fn forward_online(
        &mut self,
        tape: &mut Tape,
        params: &[NodeId],
        x: NodeId,
        mode: BnMode,
        with_predictor: bool,
    ) -> Result<OnlineOutputs> {
        self.check_input(tape, x)?;
        let mut stats = std::mem::take(&mut self.online_stats);
        let result = (|| {
            let y = self.run_stage(Subnet::Encoder, tape, params, &mut stats, x, mode)?;
            let z = self.run_stage(Subnet::Projector, tape, params, &mut stats, y, mode)?;
            let p = if with_predictor {
                Some(self.run_stage(Subnet::Predictor, tape, params, &mut stats, z, mode)?)
            } else {
                None
            };
            Ok(OnlineOutputs { representation: y, projection: z, prediction: p })
        })();
        self.online_stats = stats;
        result
    }

    /// Target projection `z' = g_ξ(f_ξ(x))` behind a stop-gradient. `params`
    /// must come from [`NetworkPair::register_target`].
    pub fn forward_target(&mut self, tape: &mut Tape, params: &[NodeId], x: NodeId) -> Result<NodeId> {
        self.check_input(tape, x)?;
        let mut stats = std::mem::take(&mut self.target_stats);
        let result = (|| {
            let y = self.run_stage(Subnet::Encoder, tape, params, &mut stats, x, BnMode::Train)?;
            let z = self.run_stage(Subnet::Projector, tape, params, &mut stats, y, BnMode::Train)?;
            Ok(tape.stop_grad(z)?)
        })();
        self.target_stats = stats;
        result
    }

    /// Regression targets for `x` under `mode`. `online_projection` must be
    /// the online projection of the same batch; the online modes reuse it
    /// instead of running the (identical) forward pass again.
    pub fn target_view(
        &mut self,
        mode: TargetMode,
        tape: &mut Tape,
        target_params: &[NodeId],
        x: NodeId,
        online_projection: NodeId,
    ) -> Result<NodeId> {
        match mode {
            TargetMode::Online => Ok(online_projection),
            TargetMode::StopGradOnline => Ok(tape.stop_grad(online_projection)?),
            TargetMode::MovingAverage => self.forward_target(tape, target_params, x),
        }
    }

    /// `ξ ← τ ξ + (1 − τ) θ` over the encoder and projector; target batch-norm
    /// running statistics follow the same average of the online ones.
    pub fn ema_update(&mut self, tau: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::InvalidArgument(format!("tau = {tau} outside [0, 1]")));
        }
        // The incremental form is exact at τ = 1 and whenever ξ = θ already.
        let mix = |xi: &mut f64, theta: f64| {
            *xi = if tau == 0.0 { theta } else { *xi + (1.0 - tau) * (theta - *xi) }
        };
        for (t, o) in self.target.iter_mut().zip(&self.online) {
            for (x, &th) in t.value.data_mut().iter_mut().zip(o.value.data()) {
                mix(x, th);
            }
        }
        for (t, o) in self.target_stats.iter_mut().zip(&self.online_stats) {
            for (x, &th) in t.mean.iter_mut().zip(&o.mean) {
                mix(x, th);
            }
            for (x, &th) in t.var.iter_mut().zip(&o.var) {
                mix(x, th);
            }
        }
        Ok(())
    }

    /// `sqrt(Σ ‖ξ_i − θ_i‖²)` over matching parameters.
    pub fn target_distance(&self) -> f64 {
        self.target
            .iter()
            .zip(&self.online)
            .flat_map(|(t, o)| t.value.data().iter().zip(o.value.data()).map(|(a, b)| (a - b).powi(2)))
            .sum::<f64>()
            .sqrt()
    }

    /// Named arrays for every parameter and running statistic of both
    /// networks.
    pub fn export(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (prefix, params, stats) in [
            ("online", &self.online, &self.online_stats),
            ("target", &self.target, &self.target_stats),
        ] {
            for p in params {
                out.push((format!("{prefix}/{}", p.name), p.value.clone()));
            }
            for (i, s) in stats.iter().enumerate() {
                let n = s.channels();
                out.push((format!("{prefix}_bn/{i}/mean"), Tensor::new(&[n], s.mean.clone()).expect("shape")));
                out.push((format!("{prefix}_bn/{i}/var"), Tensor::new(&[n], s.var.clone()).expect("shape")));
            }
        }
        out
    }

    /// Overwrites parameters and statistics from named arrays; every array
    /// must be present with the exact shape this architecture expects.
    pub fn import(&mut self, arrays: &Checkpoint) -> Result<()> {
        let fetch = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = arrays.require(name)?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} in checkpoint, {:?} expected",
                    t.shape(),
                    shape
                )));
            }
            Ok(t.clone())
        };
        for (prefix, params, stats) in [
            ("online", &mut self.online, &mut self.online_stats),
            ("target", &mut self.target, &mut self.target_stats),
        ] {
            for p in params.iter_mut() {
                p.value = fetch(&format!("{prefix}/{}", p.name), p.value.shape())?;
            }
            for (i, s) in stats.iter_mut().enumerate() {
                let n = [s.channels()];
                s.mean = fetch(&format!("{prefix}_bn/{i}/mean"), &n)?.into_data();
                s.var = fetch(&format!("{prefix}_bn/{i}/var"), &n)?.into_data();
            }
        }
        Ok(())
    }

    /// Eval-mode representations of a `(N, C, H, W)` batch; statistics are
    /// not touched.
    pub fn represent(&self, x: &Tensor) -> Result<Tensor> {
        let mut net = self.eval_view();
        let mut tape = Tape::new();
        let params = net.register_online_frozen(&mut tape);
        let x = tape.constant(x.clone());
        let y = net.encode(&mut tape, &params, x, BnMode::Eval)?;
        Ok(tape.value(y)?.clone())
    }

    /// Eval-mode online projections of a batch.
    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        let mut net = self.eval_view();
        let mut tape = Tape::new();
        let params = net.register_online_frozen(&mut tape);
        let x = tape.constant(x.clone());
        let out = net.forward_online(&mut tape, &params, x, BnMode::Eval, false)?;
        Ok(tape.value(out.projection)?.clone())
    }

    fn eval_view(&self) -> Self {
        // Eval mode never writes statistics, so the target half can be
        // dropped from the copy.
        Self {
            arch: self.arch.clone(),
            stages: self.stages.clone(),
            online: self.online.clone(),
            online_stats: self.online_stats.clone(),
            target: Vec::new(),
            target_stats: Vec::new(),
        }
    }

    pub fn param_count(&self, subnet: Subnet) -> usize {
        self.online.iter().filter(|p| p.subnet == subnet).map(|p| p.value.numel()).sum()
    }
}
