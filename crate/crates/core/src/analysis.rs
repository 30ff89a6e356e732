//! Conversion-error measurement, closed-form estimates, Monte Carlo checks of
//! the expectation results, and energy accounting.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::{batched, AnnModel, Layer, SnnModel};
use crate::snn::{self, SimTrace};
use crate::tensor::Tensor;

/// Energy per synaptic operation, in joules.
pub const SOP_ENERGY_J: f64 = 77e-15;
/// Energy per floating-point operation, in joules.
pub const FLOP_ENERGY_J: f64 = 12.5e-12;

/// Number of standard errors a Monte Carlo mean may deviate from zero.
pub const ZERO_TEST_SIGMAS: f64 = 4.0;

const ENERGY_CHUNK: usize = 250;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerErrorReport {
    /// 0-based index among the activation layers.
    pub layer: usize,
    /// Simulated `φˡ(T) − aˡ`.
    pub err: Tensor,
    /// Closed-form estimate of the same difference.
    pub est_err: Tensor,
    pub mean_abs: f64,
    pub max_abs: f64,
    pub est_max_abs: f64,
    /// Mean of `vˡ(T)`.
    pub residual_mean: f64,
    /// Largest `|vˡ(T)|`.
    pub residual_max_abs: f64,
}

/// `θ · clip(floor(z·T/θ + v0/θ) / T, 0, 1)`.
#[inline]
pub fn estimated_phi_scalar(z: f64, horizon: usize, theta: f64, v0: f64) -> f64 {
    let t = horizon as f64;
    let k = (z * t / theta + v0 / theta).floor().clamp(0.0, t);
    theta * (k / t)
}

/// Closed-form average PSP of an IF neuron under constant per-step charge.
pub fn estimated_phi(z: &Tensor, horizon: usize, theta: f64, v0: f64) -> Result<Tensor> {
    check_horizon_theta(horizon, theta)?;
    Ok(z.map(|v| estimated_phi_scalar(v, horizon, theta, v0)))
}

/// `clip((θ/T)·floor(a·T/λ), 0, θ)`: the SNN value an ANN activation maps to.
pub fn clip_floor_map(a: &Tensor, horizon: usize, theta: f64, lambda: f64) -> Result<Tensor> {
    check_horizon_theta(horizon, theta)?;
    if lambda.is_nan() || lambda <= 0.0 {
        return Err(Error::Config(format!("λ must be positive, got {lambda}")));
    }
    let t = horizon as f64;
    Ok(a.map(|v| ((theta / t) * (v * t / lambda).floor()).clamp(0.0, theta)))
}

fn check_horizon_theta(horizon: usize, theta: f64) -> Result<()> {
    if horizon == 0 {
        return Err(Error::Usage("T must be ≥ 1".into()));
    }
    if !(theta > 0.0 && theta.is_finite()) {
        return Err(Error::Config(format!("θ must be positive, got {theta}")));
    }
    Ok(())
}

/// Error of activation layer `layer` when both networks receive the same
/// input `aˡ⁻¹` (the ANN's previous activation, or `x` for the first layer).
/// The SNN layer is driven by the resulting charge as a constant current.
pub fn layer_conversion_error(
    ann: &AnnModel,
    snn: &SnnModel,
    x: &Tensor,
    horizon: usize,
    layer: usize,
) -> Result<LayerErrorReport> {
    let act_idx = ann.activation_indices();
    let params = snn.spiking_params();
    if act_idx.len() != params.len() || ann.specs().len() != snn.specs().len() {
        return Err(Error::Usage("ANN and SNN do not share a topology".into()));
    }
    if layer >= act_idx.len() {
        return Err(Error::Usage(format!(
            "layer {layer} out of range: the model has {} activation layers",
            act_idx.len()
        )));
    }
    if horizon == 0 {
        return Err(Error::Usage("T must be ≥ 1".into()));
    }
    let out = ann.forward(x)?;
    let (start, mut h) = if layer == 0 {
        (0, batched(ann.input_shape(), x)?)
    } else {
        (act_idx[layer - 1] + 1, out.activations[layer - 1].clone())
    };
    for l in &ann.layers()[start..act_idx[layer]] {
        if let Layer::Linear(op) = l {
            h = op.forward(&h)?;
        }
    }
    let z = h;
    let a = &out.activations[layer];
    let p = params[layer];
    let mut err = Vec::with_capacity(z.len());
    let mut est = Vec::with_capacity(z.len());
    let mut residual = Vec::with_capacity(z.len());
    for (&zi, &ai) in z.data().iter().zip(a.data()) {
        let (count, v) = snn::constant_current_neuron(zi, horizon, p.theta, p.v0);
        let phi = p.theta * (count as f64 / horizon as f64);
        err.push(phi - ai);
        est.push(estimated_phi_scalar(zi, horizon, p.theta, p.v0) - ai);
        residual.push(v);
    }
    let shape = z.shape().to_vec();
    let err = Tensor::new(shape.clone(), err)?;
    let est_err = Tensor::new(shape, est)?;
    let n = err.len() as f64;
    Ok(LayerErrorReport {
        layer,
        mean_abs: err.data().iter().map(|e| e.abs()).sum::<f64>() / n,
        max_abs: err.max_abs(),
        est_max_abs: est_err.max_abs(),
        residual_mean: residual.iter().sum::<f64>() / n,
        residual_max_abs: residual.iter().fold(0.0, |m: f64, v| m.max(v.abs())),
        err,
        est_err,
    })
}

/// Sample mean and standard error of a Monte Carlo statistic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct McStats {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

impl McStats {
    fn from_samples(n: usize, mut sample: impl FnMut() -> f64) -> Self {
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..n {
            let d = sample();
            sum += d;
            sum_sq += d * d;
        }
        let nf = n as f64;
        let mean = sum / nf;
        let var = ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0);
        McStats {
            mean,
            stderr: (var / nf).sqrt(),
            samples: n,
        }
    }

    /// `|mean| ≤ 4·stderr`.
    pub fn passes_zero_test(&self) -> bool {
        self.mean.abs() <= ZERO_TEST_SIGMAS * self.stderr
    }

    /// `|mean − expected| ≤ 4·stderr`.
    pub fn matches(&self, expected: f64) -> bool {
        (self.mean - expected).abs() <= ZERO_TEST_SIGMAS * self.stderr
    }
}

fn check_samples(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::Usage("Monte Carlo needs at least 2 samples".into()));
    }
    Ok(())
}

/// Edges `m_0 = 0, m_t = (t − ½)θ/T, m_{T+1} = θ` of the intervals on which
/// rounding to the `θ/T` grid is constant.
pub fn lemma1_edges(horizon: usize, theta: f64) -> Vec<f64> {
    let t = horizon as f64;
    let mut edges = vec![0.0];
    edges.extend((1..=horizon).map(|i| (i as f64 - 0.5) * theta / t));
    edges.push(theta);
    edges
}

fn lemma1_stat(x: f64, horizon: usize, theta: f64) -> f64 {
    let t = horizon as f64;
    x - (theta / t) * (t * x / theta + 0.5).floor()
}

/// Mean of `x − (θ/T)·floor(T·x/θ + ½)` for `x` uniform on `[0, θ]`.
pub fn lemma1_montecarlo(horizon: usize, theta: f64, n_samples: usize, seed: u64) -> Result<McStats> {
    lemma1_montecarlo_weighted(horizon, theta, &vec![1.0; horizon + 1], n_samples, seed)
}

/// As [`lemma1_montecarlo`], with `x` drawn from a piecewise-uniform density
/// whose height on the `t`-th interval of [`lemma1_edges`] is proportional to
/// `weights[t]`.
pub fn lemma1_montecarlo_weighted(
    horizon: usize,
    theta: f64,
    weights: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<McStats> {
    check_horizon_theta(horizon, theta)?;
    check_samples(n_samples)?;
    let edges = lemma1_edges(horizon, theta);
    if weights.len() != horizon + 1 || weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
        return Err(Error::Config(format!(
            "need {} non-negative interval weights",
            horizon + 1
        )));
    }
    let masses: Vec<f64> = weights
        .iter()
        .zip(edges.windows(2))
        .map(|(w, e)| w * (e[1] - e[0]))
        .collect();
    let total: f64 = masses.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::Config("interval weights sum to zero".into()));
    }
    let mut cumulative = Vec::with_capacity(masses.len());
    let mut acc = 0.0;
    for m in &masses {
        acc += m / total;
        cumulative.push(acc);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Uniform::new(0.0, 1.0).expect("valid range");
    Ok(McStats::from_samples(n_samples, || {
        let u = unit.sample(&mut rng);
        let i = cumulative.partition_point(|&c| c <= u).min(masses.len() - 1);
        let x = edges[i] + unit.sample(&mut rng) * (edges[i + 1] - edges[i]);
        lemma1_stat(x, horizon, theta)
    }))
}

/// Normalized densities `p_t` implied by interval weights.
pub fn lemma1_densities(horizon: usize, theta: f64, weights: &[f64]) -> Vec<f64> {
    let edges = lemma1_edges(horizon, theta);
    let total: f64 = weights
        .iter()
        .zip(edges.windows(2))
        .map(|(w, e)| w * (e[1] - e[0]))
        .sum();
    weights.iter().map(|w| w / total).collect()
}

/// `(p_0 − p_T)·θ²/(8T²)`: the expected rounding error of the skewed density.
pub fn lemma1_skewed_expectation(horizon: usize, theta: f64, weights: &[f64]) -> f64 {
    let p = lemma1_densities(horizon, theta, weights);
    let t = horizon as f64;
    (p[0] - p[horizon]) * theta * theta / (8.0 * t * t)
}

/// Difference between the SNN estimate on the `θ/T` grid and the QCFS
/// output on the `λ/L` grid, for `z` uniform on `[0, λ]`.
#[allow(clippy::too_many_arguments)]
pub fn theorem2_montecarlo(
    horizon: usize,
    levels: u32,
    theta: f64,
    lambda: f64,
    shift: f64,
    n_samples: usize,
    seed: u64,
) -> Result<McStats> {
    check_horizon_theta(horizon, theta)?;
    check_samples(n_samples)?;
    if theta != lambda {
        return Err(Error::Usage(format!("θ ({theta}) must equal λ ({lambda})")));
    }
    if levels == 0 {
        return Err(Error::Usage("L must be ≥ 1".into()));
    }
    let (t, l) = (horizon as f64, levels as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new_inclusive(0.0, lambda).expect("valid range");
    Ok(McStats::from_samples(n_samples, || {
        let z: f64 = dist.sample(&mut rng);
        let snn = theta * ((z * t / theta + shift).floor().clamp(0.0, t) / t);
        let ann = lambda * ((z * l / lambda + shift).floor().clamp(0.0, l) / l);
        snn - ann
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UnevennessCase {
    pub name: &'static str,
    pub input_times: [Vec<usize>; 2],
    pub output_times: Vec<usize>,
    pub phi: f64,
    pub expected_phi: f64,
}

impl UnevennessCase {
    pub fn passed(&self) -> bool {
        self.phi == self.expected_phi
    }
}

/// Two presynaptic neurons with weights `[2, −2]` driving one IF neuron
/// (`θ = 1`, `v0 = 0`) over five steps. Each scenario has the same input
/// rates but a different spike arrangement.
pub fn unevenness_demo() -> Result<Vec<UnevennessCase>> {
    let scenarios: [(&str, [&[usize]; 2], f64); 3] = [
        ("even", [&[1, 3, 5], &[2, 4]], 0.4),
        ("more", [&[1, 2, 3], &[4, 5]], 0.8),
        ("fewer", [&[3, 4, 5], &[1, 2]], 0.2),
    ];
    scenarios
        .iter()
        .map(|(name, times, expected)| {
            let trains = snn::spike_trains(5, times)?;
            let r = snn::spike_timing_run(&[2.0, -2.0], &trains, 1.0, 1.0, 0.0)?;
            Ok(UnevennessCase {
                name,
                input_times: [times[0].to_vec(), times[1].to_vec()],
                output_times: r.spike_times(),
                phi: r.phi,
                expected_phi: *expected,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnergyReport {
    pub images: usize,
    pub horizon: usize,
    pub flops_per_image: u64,
    /// Total synaptic operations over all images.
    pub sops_total: u64,
    pub sops_per_image: f64,
    pub ann_energy_j: f64,
    pub snn_energy_j: f64,
}

/// Synaptic operations implied by per-neuron spike counts.
pub fn sops_from_counts(counts: &[Vec<u32>], fanouts: &[Vec<u64>]) -> u64 {
    counts
        .iter()
        .zip(fanouts)
        .map(|(c, f)| {
            c.iter()
                .enumerate()
                .map(|(i, &n)| n as u64 * f[i % f.len()])
                .sum::<u64>()
        })
        .sum()
}

/// Recounts synaptic operations spike by spike from a recorded trace.
pub fn sops_from_trace(trace: &SimTrace, fanouts: &[Vec<u64>]) -> u64 {
    let mut total = 0;
    for step in &trace.steps {
        for (rec, f) in step.iter().zip(fanouts) {
            for (i, &s) in rec.s.data().iter().enumerate() {
                if s == 1.0 {
                    total += f[i % f.len()];
                }
            }
        }
    }
    total
}

/// FLOPs (2 per multiply-accumulate) of the ANN and synaptic operations of
/// the SNN over `horizon` steps, averaged per image, with their energies.
/// The analog input's contribution to the first layer is not counted as
/// synaptic work.
pub fn energy_report(ann: &AnnModel, snn: &SnnModel, inputs: &Tensor, horizon: usize) -> Result<EnergyReport> {
    if horizon == 0 {
        return Err(Error::Usage("T must be ≥ 1".into()));
    }
    let inputs = batched(snn.input_shape(), inputs)?;
    let n = inputs.batch_len();
    let fanouts = snn.fanouts()?;
    let mut sops_total = 0;
    let mut start = 0;
    while start < n {
        let end = (start + ENERGY_CHUNK).min(n);
        let out = snn::run(snn, &inputs.slice_batch(start, end)?, horizon, false)?;
        sops_total += sops_from_counts(&out.trace.spike_counts, &fanouts);
        start = end;
    }
    let flops_per_image = 2 * ann.macs();
    let sops_per_image = sops_total as f64 / n as f64;
    Ok(EnergyReport {
        images: n,
        horizon,
        flops_per_image,
        sops_total,
        sops_per_image,
        ann_energy_j: flops_per_image as f64 * FLOP_ENERGY_J,
        snn_energy_j: sops_per_image * SOP_ENERGY_J,
    })
}
