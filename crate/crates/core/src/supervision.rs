//! Uncertainty-weighted adaptive supervision.
//!
//! Each supervisory signal gets a scalar uncertainty score (mean closeness
//! of its probabilities to 0.5), the scores are softmax-normalized, then
//! max-scaled so the most uncertain signal carries weight exactly 1. The
//! per-signal structure loss is weighted IoU + weighted BCE with a
//! boundary-emphasizing pixel weight map built from the ground truth.
//! Weights are recomputed every step and treated as constants during
//! backpropagation.

use crate::model::SignalSet;
use crate::tensor::{box_average, sigmoid_scalar, Tape, Tensor, TensorError, TensorId};

/// The supervision-weighting ablation ladder, from plain uniform weights
/// up to the full softmax + max-scaling schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Uniform,
    UncertaintyRaw,
    PlusSoftmax,
    PlusMaxScaling,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Uniform, Mode::UncertaintyRaw, Mode::PlusSoftmax, Mode::PlusMaxScaling];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Uniform => "uniform",
            Mode::UncertaintyRaw => "uncertainty_raw",
            Mode::PlusSoftmax => "plus_softmax",
            Mode::PlusMaxScaling => "plus_max_scaling",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(Mode::Uniform),
            "uncertainty_raw" => Ok(Mode::UncertaintyRaw),
            "plus_softmax" => Ok(Mode::PlusSoftmax),
            "plus_max_scaling" => Ok(Mode::PlusMaxScaling),
            other => Err(format!("unknown supervision mode '{other}'")),
        }
    }
}

/// Per-signal scalars of one weighting step.
#[derive(Debug, Clone)]
pub struct WeightVector {
    pub u: Vec<f64>,
    pub u_bar: Vec<f64>,
    pub lambda: Vec<f64>,
}

/// Per-signal loss terms and the weighted total.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    /// (iou_loss, bce_loss, lambda) per signal.
    pub per_signal: Vec<(f64, f64, f64)>,
    pub total: f64,
}

/// Mean over all pixels (and batch) of 1 - |p - 0.5| / 0.5.
/// Inputs are probabilities; values outside [0,1] are rejected.
pub fn uncertainty(p: &Tensor) -> Result<f64, TensorError> {
    let mut acc = 0.0;
    for &v in p.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(TensorError::InvalidArgument {
                op: "uncertainty",
                msg: format!("probability {v} outside [0,1]"),
            });
        }
        acc += 1.0 - (v - 0.5).abs() / 0.5;
    }
    Ok(acc / p.numel() as f64)
}

/// Softmax over the raw uncertainty scores.
pub fn normalize_weights(u: &[f64]) -> Vec<f64> {
    let m = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = u.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / s).collect()
}

/// Divide by the maximum so the largest weight is exactly 1.
pub fn max_scale(u_bar: &[f64]) -> Vec<f64> {
    let m = u_bar.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    u_bar.iter().map(|&x| x / m).collect()
}

impl WeightVector {
    /// Compute the schedule for one step from per-signal probabilities.
    pub fn from_probs(probs: &[Tensor], mode: Mode) -> Result<WeightVector, TensorError> {
        let u: Vec<f64> = probs.iter().map(uncertainty).collect::<Result<_, _>>()?;
        let u_bar = normalize_weights(&u);
        let lambda = match mode {
            Mode::Uniform => vec![1.0; u.len()],
            Mode::UncertaintyRaw => u.clone(),
            Mode::PlusSoftmax => u_bar.clone(),
            Mode::PlusMaxScaling => max_scale(&u_bar),
        };
        Ok(WeightVector { u, u_bar, lambda })
    }
}

/// Boundary-emphasizing pixel weights: w = 1 + 5*|boxavg31(G) - G|.
/// G must be binary; w lands in [1, 6].
pub fn pixel_weight_map(gt: &Tensor) -> Result<Tensor, TensorError> {
    for &v in gt.data() {
        if v != 0.0 && v != 1.0 {
            return Err(TensorError::InvalidArgument {
                op: "pixel_weight_map",
                msg: format!("ground truth value {v} is not binary"),
            });
        }
    }
    let pooled = box_average(gt, 31)?;
    let mut w = pooled;
    for (wv, &g) in w.data_mut().iter_mut().zip(gt.data()) {
        *wv = 1.0 + 5.0 * (*wv - g).abs();
    }
    Ok(w)
}

/// Build the weighted adaptive supervision loss on the tape.
///
/// The lambda schedule is computed from the current signal probabilities
/// and folded in as constants, so no gradient flows through the weights.
/// Returns the scalar loss id plus the diagnostics.
pub fn total_loss(
    tape: &mut Tape,
    signals: &SignalSet,
    gt: &Tensor,
    mode: Mode,
) -> Result<(TensorId, LossBreakdown, WeightVector), TensorError> {
    if signals.logits.is_empty() {
        return Err(TensorError::InvalidArgument { op: "total_loss", msg: "no signals".into() });
    }
    let probs: Vec<Tensor> = signals
        .logits
        .iter()
        .map(|&id| tape.value(id).map(sigmoid_scalar))
        .collect();
    let weights = WeightVector::from_probs(&probs, mode)?;
    let wmap = pixel_weight_map(gt)?;

    let mut per_signal = Vec::with_capacity(signals.logits.len());
    let mut total_id: Option<TensorId> = None;
    for (i, &z) in signals.logits.iter().enumerate() {
        let iou = tape.weighted_iou(z, gt, &wmap)?;
        let bce = tape.weighted_bce(z, gt, &wmap)?;
        let li = tape.add(iou, bce)?;
        per_signal.push((tape.value(iou).data()[0], tape.value(bce).data()[0], weights.lambda[i]));
        let weighted = tape.scale(li, weights.lambda[i]);
        total_id = Some(match total_id {
            None => weighted,
            Some(acc) => tape.add(acc, weighted)?,
        });
    }
    let total_id = total_id.unwrap();
    let breakdown = LossBreakdown { per_signal, total: tape.value(total_id).data()[0] };
    Ok((total_id, breakdown, weights))
}
