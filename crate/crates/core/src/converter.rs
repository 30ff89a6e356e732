//! ANN→SNN conversion: weights copied verbatim, `θˡ ← λˡ`, `vˡ(0) ← θˡ·φ`.

use crate::error::{Error, Result};
use crate::network::{ActivationKind, AnnModel, IfParams, Layer, LinearOp, SnnLayer, SnnModel};
use crate::tensor::Tensor;

/// Lower clamp for data-driven thresholds.
pub const THRESHOLD_FLOOR: f64 = 1e-6;

/// Chunk size used when scanning calibration data.
const CALIBRATION_CHUNK: usize = 500;

fn effective_shift(kind: ActivationKind, shift: f64) -> f64 {
    match kind {
        ActivationKind::QcfNoShift => 0.0,
        _ => shift,
    }
}

/// Converts a trained QCFS network. `shift_override` replaces every layer's
/// shift when choosing `v(0)`.
pub fn convert(ann: &AnnModel, shift_override: Option<f64>) -> Result<SnnModel> {
    if let Some(s) = shift_override {
        if !s.is_finite() {
            return Err(Error::Config(format!("shift override must be finite, got {s}")));
        }
    }
    let layers = ann
        .layers()
        .iter()
        .enumerate()
        .map(|(index, layer)| match layer {
            Layer::Linear(op) => Ok(SnnLayer::Linear(op.clone())),
            Layer::Activation { kind, params } => match kind {
                ActivationKind::Qcfs | ActivationKind::QcfNoShift => {
                    let theta = params.lambda;
                    let phi = shift_override.unwrap_or_else(|| effective_shift(*kind, params.shift));
                    Ok(SnnLayer::Spiking(IfParams { theta, v0: theta * phi }))
                }
                other => Err(Error::Conversion {
                    index,
                    kind: other.to_string(),
                }),
            },
        })
        .collect::<Result<Vec<_>>>()?;
    SnnModel::new(ann.input_shape().to_vec(), layers)
}

/// Converts with explicit per-layer thresholds; `v(0) = θ·φ` as in [`convert`].
pub fn convert_with_thresholds(ann: &AnnModel, thresholds: &[f64], shift_override: Option<f64>) -> Result<SnnModel> {
    let snn = convert(ann, shift_override)?;
    let kinds = ann.activation_params();
    if thresholds.len() != kinds.len() {
        return Err(Error::Usage(format!(
            "{} thresholds given for {} spiking layers",
            thresholds.len(),
            kinds.len()
        )));
    }
    let params: Vec<IfParams> = thresholds
        .iter()
        .zip(&kinds)
        .map(|(&theta, (kind, p))| IfParams {
            theta,
            v0: theta * shift_override.unwrap_or_else(|| effective_shift(*kind, p.shift)),
        })
        .collect();
    snn.with_spiking_params(&params)
}

/// Per activation layer, the largest pre-activation observed on the
/// calibration inputs, clamped below at [`THRESHOLD_FLOOR`].
pub fn max_activation_threshold(ann: &AnnModel, calibration: &Tensor) -> Result<Vec<f64>> {
    let n = calibration.batch_len();
    if calibration.is_empty() || n == 0 {
        return Err(Error::Usage("calibration set is empty".into()));
    }
    let mut maxima = vec![THRESHOLD_FLOOR; ann.activation_indices().len()];
    let mut start = 0;
    while start < n {
        let end = (start + CALIBRATION_CHUNK).min(n);
        let out = ann.forward(&calibration.slice_batch(start, end)?)?;
        for (m, z) in maxima.iter_mut().zip(&out.preactivations) {
            *m = z.data().iter().fold(*m, |acc, &v| acc.max(v));
        }
        start = end;
    }
    Ok(maxima)
}

fn bound_op(op: &LinearOp, signed_input: bool) -> LinearOp {
    let part = |w: &Tensor| {
        if signed_input {
            w.map(f64::abs)
        } else {
            w.map(|v| v.max(0.0))
        }
    };
    match op {
        LinearOp::Dense { weight, bias } => LinearOp::Dense {
            weight: part(weight),
            bias: bias.clone(),
        },
        LinearOp::Conv2d {
            weight,
            bias,
            stride,
            pad,
        } => LinearOp::Conv2d {
            weight: part(weight),
            bias: bias.clone(),
            stride: *stride,
            pad: *pad,
        },
        other => other.clone(),
    }
}

/// Thresholds bounding every neuron's per-step input from above.
///
/// The analog input is assumed to satisfy `|x| ≤ input_bound`, so the first
/// spiking layer uses `Σ|W|·input_bound + b`. Later layers receive spikes
/// in `{0, θˡ⁻¹}` and use `Σ max(W, 0)·θˡ⁻¹ + b`. Pooling and flattening are
/// followed through. Each threshold is the maximum over the layer's neurons,
/// clamped below at [`THRESHOLD_FLOOR`].
pub fn positive_weight_sum_thresholds(ann: &AnnModel, input_bound: f64) -> Result<Vec<f64>> {
    if !(input_bound >= 0.0 && input_bound.is_finite()) {
        return Err(Error::Config(format!(
            "input bound must be finite and ≥ 0, got {input_bound}"
        )));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(ann.input_shape());
    let mut h = Tensor::full(&shape, input_bound);
    let mut signed = true;
    let mut thresholds = Vec::new();
    for layer in ann.layers() {
        match layer {
            Layer::Linear(op) => h = bound_op(op, signed).forward(&h)?,
            Layer::Activation { .. } => {
                let theta = h.data().iter().fold(THRESHOLD_FLOOR, |m, &v| m.max(v));
                thresholds.push(theta);
                h = Tensor::full(h.shape(), theta);
                signed = false;
            }
        }
    }
    Ok(thresholds)
}
