use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Infonce,
    Siglip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Initial logit multiplier; defaults to 14 (InfoNCE) or 10 (SigLIP).
    #[serde(default)]
    pub init_scale: Option<f64>,
    /// Initial SigLIP bias; defaults to -10.
    #[serde(default)]
    pub init_bias: Option<f64>,
    #[serde(default = "default_true")]
    pub learnable: bool,
}

fn default_true() -> bool {
    true
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Infonce,
            init_scale: None,
            init_bias: None,
            learnable: true,
        }
    }
}

impl LossConfig {
    pub fn initial_state(&self) -> Result<LossState> {
        let scale = self.init_scale.unwrap_or(match self.kind {
            LossKind::Infonce => 14.0,
            LossKind::Siglip => 10.0,
        });
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("loss scale must be positive, got {scale}")));
        }
        let bias = match self.kind {
            LossKind::Infonce => 0.0,
            LossKind::Siglip => self.init_bias.unwrap_or(-10.0),
        };
        Ok(LossState {
            kind: self.kind,
            log_scale: scale.ln(),
            bias,
        })
    }
}

/// Trainable loss scalars. The multiplier is `exp(log_scale)`, which keeps
/// the temperature positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossState {
    pub kind: LossKind,
    pub log_scale: f64,
    pub bias: f64,
}

/// A loss value with its partial derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub d_logits: Matrix,
    pub d_log_scale: f64,
    pub d_bias: f64,
}

impl LossState {
    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    pub fn evaluate(&self, logits: &Matrix) -> Result<LossValue> {
        match self.kind {
            LossKind::Infonce => infonce_loss(logits, self.scale()),
            LossKind::Siglip => siglip_loss(logits, self.scale(), self.bias),
        }
    }
}

fn square(logits: &Matrix) -> Result<usize> {
    if logits.rows() != logits.cols() {
        return Err(Error::shape(
            format!("{0}x{0}", logits.rows()),
            format!("{}x{}", logits.rows(), logits.cols()),
        ));
    }
    Ok(logits.rows())
}

/// Softmax of `values` and its log-sum-exp.
fn softmax(values: &[f64]) -> (Vec<f64>, f64) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    (exps.iter().map(|e| e / sum).collect(), max + sum.ln())
}

/// Symmetric cross-entropy with diagonal targets over `scale * logits`.
pub fn infonce_loss(logits: &Matrix, scale: f64) -> Result<LossValue> {
    let b = square(logits)?;
    if b < 2 {
        return Err(Error::shape("at least 2x2 logits", format!("{b}x{b}")));
    }
    let z = logits.scale(scale);
    let zt = z.transpose();
    let mut dz = Matrix::zeros(b, b);
    let mut value = 0.0;
    let w = 1.0 / (2.0 * b as f64);
    for i in 0..b {
        let (p, lse) = softmax(z.row(i));
        value += (lse - z.get(i, i)) * w;
        for (j, pj) in p.iter().enumerate() {
            dz.row_mut(i)[j] += (pj - f64::from(u8::from(i == j))) * w;
        }
        let (p, lse) = softmax(zt.row(i));
        value += (lse - z.get(i, i)) * w;
        for (r, pr) in p.iter().enumerate() {
            dz.row_mut(r)[i] += (pr - f64::from(u8::from(r == i))) * w;
        }
    }
    let d_log_scale = dz.as_slice().iter().zip(z.as_slice()).map(|(a, b)| a * b).sum();
    Ok(LossValue {
        value,
        d_logits: dz.scale(scale),
        d_log_scale,
        d_bias: 0.0,
    })
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean pairwise sigmoid loss over `scale * logits + bias`, positives on
/// the diagonal.
pub fn siglip_loss(logits: &Matrix, scale: f64, bias: f64) -> Result<LossValue> {
    let b = square(logits)?;
    if b == 0 {
        return Err(Error::shape("non-empty logits", "0x0"));
    }
    let n = (b * b) as f64;
    let mut value = 0.0;
    let mut d_logits = Matrix::zeros(b, b);
    let mut d_scale = 0.0;
    let mut d_bias = 0.0;
    for i in 0..b {
        for j in 0..b {
            let y = if i == j { 1.0 } else { -1.0 };
            let l = logits.get(i, j);
            let u = scale * l + bias;
            value += softplus(-y * u) / n;
            let du = -y * sigmoid(-y * u) / n;
            d_logits.set(i, j, du * scale);
            d_scale += du * l;
            d_bias += du;
        }
    }
    Ok(LossValue {
        value,
        d_logits,
        d_log_scale: d_scale * scale,
        d_bias,
    })
}
