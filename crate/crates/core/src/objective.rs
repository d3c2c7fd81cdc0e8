//! Loss functions: the normalized regression loss, the InfoNCE family with
//! temperature and negative weight, and the closed-form linear predictor.

use byol_tensor::{NodeId, Tape, Tensor};

use crate::error::{Error, Result};
use crate::model::TargetMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossFamily {
    Byol,
    InfoNce,
}

impl LossFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Byol => "byol",
            Self::InfoNce => "infonce",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "byol" => Some(Self::Byol),
            "infonce" => Some(Self::InfoNce),
            _ => None,
        }
    }
}

/// Normalization `n(·)` applied to predictions and targets before the
/// regression loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    L2,
    /// Per-sample standardization divided by `√d`.
    LayerNorm,
    /// Per-feature batch standardization divided by `√d`.
    BatchNorm,
    None,
}

impl Normalization {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::L2 => "l2",
            Self::LayerNorm => "layernorm",
            Self::BatchNorm => "batchnorm",
            Self::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "l2" => Some(Self::L2),
            "layernorm" => Some(Self::LayerNorm),
            "batchnorm" => Some(Self::BatchNorm),
            "none" => Some(Self::None),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    pub family: LossFamily,
    /// Temperature α.
    pub temperature: f64,
    /// Weight β of the negative term.
    pub beta: f64,
    pub use_predictor: bool,
    /// Replace the predictor network by the per-batch least-squares linear
    /// map from online projections to targets.
    pub closed_form_predictor: bool,
    pub target_mode: TargetMode,
    pub normalization: Normalization,
    /// Constant multiplier on the total loss.
    pub scale: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            family: LossFamily::Byol,
            temperature: 0.1,
            beta: 0.0,
            use_predictor: true,
            closed_form_predictor: false,
            target_mode: TargetMode::MovingAverage,
            normalization: Normalization::L2,
            scale: 1.0,
        }
    }
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        if self.family == LossFamily::InfoNce && !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature {} must be positive", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidArgument(format!("beta {} outside [0, 1]", self.beta)));
        }
        if !self.scale.is_finite() {
            return Err(Error::InvalidArgument("loss scale must be finite".into()));
        }
        Ok(())
    }

    /// Whether the online branch runs the predictor network.
    pub fn predictor_network(&self) -> bool {
        self.use_predictor && !self.closed_form_predictor
    }
}

fn same_shape(tape: &Tape, a: NodeId, b: NodeId, op: &str) -> Result<(usize, usize)> {
    let sa = tape.value(a)?.dims2()?;
    let sb = tape.value(b)?.dims2()?;
    if sa != sb {
        return Err(Error::Shape(format!("{op}: {sa:?} vs {sb:?}")));
    }
    if sa.0 == 0 {
        return Err(Error::Shape(format!("{op}: empty batch")));
    }
    Ok(sa)
}

/// Applies `n(·)` row-wise to a `(B, d)` matrix.
pub fn normalize(tape: &mut Tape, x: NodeId, n: Normalization) -> Result<NodeId> {
    let (_, d) = tape.value(x)?.dims2()?;
    let inv = 1.0 / (d as f64).sqrt();
    Ok(match n {
        Normalization::L2 => tape.l2_normalize(x, 1)?,
        Normalization::LayerNorm => {
            let s = tape.layer_standardize(x)?;
            tape.scale(s, inv)?
        }
        Normalization::BatchNorm => {
            let s = tape.batch_standardize(x)?;
            tape.scale(s, inv)?
        }
        Normalization::None => x,
    })
}

/// `mean_i ‖n(p_i) − n(z'_i)‖²`.
pub fn byol_pair_loss(tape: &mut Tape, p: NodeId, target: NodeId, n: Normalization) -> Result<NodeId> {
    let (b, _) = same_shape(tape, p, target, "byol_pair_loss")?;
    let np = normalize(tape, p, n)?;
    let nt = normalize(tape, target, n)?;
    let d = tape.sub(np, nt)?;
    let sq = tape.mul(d, d)?;
    let total = tape.sum(sq)?;
    Ok(tape.scale(total, 1.0 / b as f64)?)
}

/// Negated InfoNCE with temperature `alpha` and negative weight `beta`:
///
/// `−(2/B) Σ_i S(v_i, v'_i) + β (2α/B) Σ_i ln( Σ_{j≠i} e^{S(v_i, v_j)/α} + Σ_j e^{S(v_i, v'_j)/α} )`
///
/// with `S(a, b) = ⟨φ(a), ψ(b)⟩ / (‖φ(a)‖ ‖ψ(b)‖)`. `phi` holds `φ(v)`,
/// `psi_same` holds `ψ(v)` and `psi_other` holds `ψ(v')`.
pub fn infonce_loss(
    tape: &mut Tape,
    phi: NodeId,
    psi_same: NodeId,
    psi_other: NodeId,
    alpha: f64,
    beta: f64,
) -> Result<NodeId> {
    let (b, _) = same_shape(tape, phi, psi_other, "infonce_loss")?;
    same_shape(tape, phi, psi_same, "infonce_loss")?;
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {alpha} must be positive")));
    }
    let bf = b as f64;
    let nphi = tape.l2_normalize(phi, 1)?;
    let nother = tape.l2_normalize(psi_other, 1)?;
    let pos = tape.mul(nphi, nother)?;
    let pos = tape.sum(pos)?;
    let pos = tape.scale(pos, -2.0 / bf)?;
    if beta == 0.0 {
        return Ok(pos);
    }
    let nsame = tape.l2_normalize(psi_same, 1)?;
    let t_same = tape.transpose(nsame)?;
    let t_other = tape.transpose(nother)?;
    let s_same = tape.matmul(nphi, t_same)?;
    let s_other = tape.matmul(nphi, t_other)?;
    let logits = tape.concat_cols(s_same, s_other)?;
    let logits = tape.scale(logits, 1.0 / alpha)?;
    let mut include = vec![true; b * 2 * b];
    for i in 0..b {
        include[i * 2 * b + i] = false;
    }
    let lse = tape.logsumexp_rows(logits, Some(&include))?;
    let neg = tape.sum(lse)?;
    let neg = tape.scale(neg, beta * 2.0 * alpha / bf)?;
    Ok(tape.add(pos, neg)?)
}

/// Symmetrized loss over both view orders. `phi[k]` is the online output
/// used for view `k` and `psi[k]` the target for view `k`.
pub fn symmetrized_loss(tape: &mut Tape, spec: &LossSpec, phi: [NodeId; 2], psi: [NodeId; 2]) -> Result<NodeId> {
    let (a, b) = match spec.family {
        LossFamily::Byol => (
            byol_pair_loss(tape, phi[0], psi[1], spec.normalization)?,
            byol_pair_loss(tape, phi[1], psi[0], spec.normalization)?,
        ),
        LossFamily::InfoNce => (
            infonce_loss(tape, phi[0], psi[0], psi[1], spec.temperature, spec.beta)?,
            infonce_loss(tape, phi[1], psi[1], psi[0], spec.temperature, spec.beta)?,
        ),
    };
    let total = tape.add(a, b)?;
    if spec.scale == 1.0 {
        Ok(total)
    } else {
        Ok(tape.scale(total, spec.scale)?)
    }
}

/// Row-wise cosine similarity of two equally shaped matrices.
pub fn row_cosines(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, _) = a.dims2().expect("matrix");
    (0..n)
        .map(|i| {
            let (x, y) = (a.row(i), b.row(i));
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            dot / (nx * ny).max(byol_tensor::NORM_EPS)
        })
        .collect()
}

/// Ridge weight for [`closed_form_predictor`]: a small fraction of the mean
/// eigenvalue of `ZᵀZ`, floored.
pub fn ridge_lambda(ztz_trace: f64, features: usize) -> f64 {
    (1e-6 * ztz_trace / features as f64).max(1e-12)
}

/// `Q = (ZᵀZ + λI)⁻¹ ZᵀZ'` via Cholesky of the regularized Gram matrix.
pub fn closed_form_predictor(z: &Tensor, target: &Tensor) -> Result<Tensor> {
    let (b, f) = z.dims2()?;
    if target.dims2()? != (b, f) {
        return Err(Error::Shape(format!("closed_form_predictor: {:?} vs {:?}", z.shape(), target.shape())));
    }
    if b == 0 {
        return Err(Error::Shape("closed_form_predictor: empty batch".into()));
    }
    if !z.is_finite() || !target.is_finite() {
        return Err(Error::InvalidArgument("closed_form_predictor: non-finite input".into()));
    }
    let zt = z.transpose2()?;
    let mut gram = zt.matmul(z)?;
    let rhs = zt.matmul(target)?;
    let trace: f64 = (0..f).map(|i| gram.data()[i * f + i]).sum();
    let lambda = ridge_lambda(trace, f);
    for i in 0..f {
        gram.data_mut()[i * f + i] += lambda;
    }
    let l = cholesky(gram.data(), f)?;
    let mut q = rhs.into_data();
    cholesky_solve(&l, f, &mut q, f);
    Ok(Tensor::new(&[f, f], q)?)
}

/// Lower-triangular factor of a symmetric positive definite `n × n` matrix.
fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > 0.0) {
            return Err(Error::InvalidArgument("matrix not positive definite".into()));
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ X = B` in place for `B` of shape `(n, cols)`.
fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64], cols: usize) {
    for c in 0..cols {
        for i in 0..n {
            let mut s = b[i * cols + c];
            for k in 0..i {
                s -= l[i * n + k] * b[k * cols + c];
            }
            b[i * cols + c] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i * cols + c];
            for k in i + 1..n {
                s -= l[k * n + i] * b[k * cols + c];
            }
            b[i * cols + c] = s / l[i * n + i];
        }
    }
}
