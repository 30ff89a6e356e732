//! Discrete-time integrate-and-fire simulation with reset-by-subtraction.
//!
//! Per time-step and spiking layer:
//!
//! ```text
//! m = v + input           charge
//! s = H(m − θ)            H(0) = 1
//! v = m − s·θ             soft reset
//! x = s·θ                 unweighted postsynaptic potential
//! ```
//!
//! Spikes propagate through the whole network within the same time-step.
//! The analog input is applied identically at every step.

use std::io::Write;

use crate::error::{Error, Result};
use crate::network::{batched, IfParams, SnnLayer, SnnModel};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct LayerState {
    /// Membrane potential after firing.
    pub v: Tensor,
    pub spike_counts: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct SimState {
    /// Number of completed time-steps.
    pub t: usize,
    pub layers: Vec<LayerState>,
    /// Sum over completed steps of the input to the output layer.
    pub output_sum: Option<Tensor>,
    batch: usize,
}

impl SimState {
    /// Fresh state with every membrane at its layer's `v(0)`.
    pub fn new(model: &SnnModel, batch: usize) -> Self {
        let shapes = model.shapes();
        let layers = model
            .layers()
            .iter()
            .zip(&shapes)
            .filter_map(|(l, s)| match l {
                SnnLayer::Spiking(p) => {
                    let mut shape = vec![batch];
                    shape.extend_from_slice(s);
                    let n = shape.iter().product();
                    Some(LayerState {
                        v: Tensor::full(&shape, p.v0),
                        spike_counts: vec![0; n],
                    })
                }
                _ => None,
            })
            .collect();
        SimState {
            t: 0,
            layers,
            output_sum: None,
            batch,
        }
    }

    /// Readout after the steps so far: accumulated output input divided by `t`.
    pub fn readout(&self) -> Option<Tensor> {
        let t = self.t as f64;
        self.output_sum.as_ref().map(|s| s.map(|v| v / t))
    }

    /// Average unweighted PSP `φ(t) = θ·count/t` of each spiking layer.
    pub fn phi(&self, model: &SnnModel) -> Vec<Tensor> {
        let t = self.t as f64;
        self.layers
            .iter()
            .zip(model.spiking_params())
            .map(|(l, p)| {
                let data = l.spike_counts.iter().map(|&c| p.theta * (c as f64 / t)).collect();
                Tensor::new(l.v.shape().to_vec(), data).expect("shape")
            })
            .collect()
    }
}

/// One spiking layer's record at one time-step.
#[derive(Clone, Debug)]
pub struct LayerStep {
    pub m: Tensor,
    pub s: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct SimTrace {
    /// `steps[t-1][layer]`, empty unless recording was requested.
    pub steps: Vec<Vec<LayerStep>>,
    /// `φˡ(T)` per spiking layer.
    pub phi: Vec<Tensor>,
    /// `vˡ(0)` per spiking layer.
    pub initial_v: Vec<Tensor>,
    /// `vˡ(T)` per spiking layer.
    pub final_v: Vec<Tensor>,
    pub spike_counts: Vec<Vec<u32>>,
    pub horizon: usize,
}

impl SimTrace {
    /// Writes the recorded steps as CSV `layer,t,neuron,m,s,v`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "layer,t,neuron,m,s,v")?;
        for (t, layers) in self.steps.iter().enumerate() {
            for (l, rec) in layers.iter().enumerate() {
                for (n, ((m, s), v)) in rec.m.data().iter().zip(rec.s.data()).zip(rec.v.data()).enumerate() {
                    writeln!(w, "{l},{},{n},{m},{s},{v}", t + 1)?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SimOutput {
    /// `readouts[t-1]` is the average logit after `t` steps.
    pub readouts: Vec<Tensor>,
    pub trace: SimTrace,
}

impl SimOutput {
    pub fn logits(&self) -> &Tensor {
        self.readouts.last().expect("T ≥ 1")
    }
}

fn fire(p: &IfParams, state: &mut LayerState, input: &Tensor, record: Option<&mut Vec<LayerStep>>) -> Result<Tensor> {
    if input.shape() != state.v.shape() {
        return Err(Error::dim("spiking layer", input.shape(), state.v.shape()));
    }
    let mut m = record.as_ref().map(|_| Vec::with_capacity(input.len()));
    let mut s = record.as_ref().map(|_| Vec::with_capacity(input.len()));
    let mut x = Vec::with_capacity(input.len());
    for ((v, &i), count) in state
        .v
        .data_mut()
        .iter_mut()
        .zip(input.data())
        .zip(state.spike_counts.iter_mut())
    {
        let charge = *v + i;
        let spike = charge >= p.theta;
        *v = if spike { charge - p.theta } else { charge };
        if spike {
            *count += 1;
            x.push(p.theta);
        } else {
            x.push(0.0);
        }
        if let (Some(m), Some(s)) = (m.as_mut(), s.as_mut()) {
            m.push(charge);
            s.push(if spike { 1.0 } else { 0.0 });
        }
    }
    let shape = input.shape().to_vec();
    if let (Some(rec), Some(m), Some(s)) = (record, m, s) {
        rec.push(LayerStep {
            m: Tensor::new(shape.clone(), m)?,
            s: Tensor::new(shape.clone(), s)?,
            v: state.v.clone(),
        });
    }
    Tensor::new(shape, x)
}

/// Index of the first spiking layer; everything before it sees only the
/// constant input.
fn prefix_len(model: &SnnModel) -> usize {
    model
        .layers()
        .iter()
        .position(|l| matches!(l, SnnLayer::Spiking(_)))
        .unwrap_or(model.layers().len())
}

fn apply_prefix(model: &SnnModel, x0: &Tensor) -> Result<Tensor> {
    let mut h = batched(model.input_shape(), x0)?;
    for layer in &model.layers()[..prefix_len(model)] {
        if let SnnLayer::Linear(op) = layer {
            h = op.forward(&h)?;
        }
    }
    Ok(h)
}

fn step_from_prefix(
    model: &SnnModel,
    state: &mut SimState,
    prefix: Tensor,
    mut record: Option<&mut Vec<LayerStep>>,
) -> Result<Tensor> {
    let mut h = prefix;
    let mut spiking = 0;
    for layer in &model.layers()[prefix_len(model)..] {
        h = match layer {
            SnnLayer::Linear(op) => op.forward(&h)?,
            SnnLayer::Spiking(p) => {
                let out = fire(p, &mut state.layers[spiking], &h, record.as_deref_mut())?;
                spiking += 1;
                out
            }
        };
    }
    match &mut state.output_sum {
        Some(acc) => {
            for (a, &v) in acc.data_mut().iter_mut().zip(h.data()) {
                *a += v;
            }
        }
        None => state.output_sum = Some(h.clone()),
    }
    state.t += 1;
    Ok(h)
}

/// Advances the network by one time-step under input `x0`; returns the
/// input delivered to the output layer during this step.
pub fn step(model: &SnnModel, state: &mut SimState, x0: &Tensor) -> Result<Tensor> {
    let prefix = apply_prefix(model, x0)?;
    if prefix.batch_len() != state.batch {
        return Err(Error::dim("simulation batch", prefix.shape(), &[state.batch]));
    }
    step_from_prefix(model, state, prefix, None)
}

/// Simulates `horizon` steps of constant-current input and returns the
/// readout after every step.
pub fn run(model: &SnnModel, x0: &Tensor, horizon: usize, record_trace: bool) -> Result<SimOutput> {
    if horizon == 0 {
        return Err(Error::Usage("simulation horizon T must be ≥ 1".into()));
    }
    let prefix = apply_prefix(model, x0)?;
    let mut state = SimState::new(model, prefix.batch_len());
    let initial_v = state.layers.iter().map(|l| l.v.clone()).collect();
    let mut readouts = Vec::with_capacity(horizon);
    let mut steps = Vec::new();
    for _ in 0..horizon {
        let mut rec = record_trace.then(Vec::new);
        step_from_prefix(model, &mut state, prefix.clone(), rec.as_mut())?;
        if let Some(rec) = rec {
            steps.push(rec);
        }
        readouts.push(state.readout().expect("one step done"));
    }
    let trace = SimTrace {
        steps,
        phi: state.phi(model),
        initial_v,
        final_v: state.layers.iter().map(|l| l.v.clone()).collect(),
        spike_counts: state.layers.into_iter().map(|l| l.spike_counts).collect(),
        horizon,
    };
    Ok(SimOutput { readouts, trace })
}

/// Single IF neuron under constant per-step charge `z`; returns the spike
/// count and final membrane potential after `horizon` steps.
pub fn constant_current_neuron(z: f64, horizon: usize, theta: f64, v0: f64) -> (u32, f64) {
    let mut v = v0;
    let mut count = 0;
    for _ in 0..horizon {
        let m = v + z;
        if m >= theta {
            v = m - theta;
            count += 1;
        } else {
            v = m;
        }
    }
    (count, v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpikeTimingResult {
    /// Output spike train, one entry per time-step.
    pub spikes: Vec<bool>,
    /// `θ · count / T`.
    pub phi: f64,
}

impl SpikeTimingResult {
    /// 1-based time-steps at which the neuron fired.
    pub fn spike_times(&self) -> Vec<usize> {
        self.spikes
            .iter()
            .enumerate()
            .filter(|(_, &s)| s)
            .map(|(t, _)| t + 1)
            .collect()
    }
}

/// One postsynaptic IF neuron driven by explicit presynaptic spike trains
/// `trains[T×N]` (binary), each spike delivering `theta_prev · w_j`.
pub fn spike_timing_run(
    weights: &[f64],
    trains: &Tensor,
    theta_prev: f64,
    theta: f64,
    v0: f64,
) -> Result<SpikeTimingResult> {
    let [horizon, n] = trains.dims2("spike_timing_run")?;
    if n != weights.len() {
        return Err(Error::dim("spike_timing_run", trains.shape(), &[weights.len()]));
    }
    if let Some(bad) = trains.data().iter().find(|&&s| s != 0.0 && s != 1.0) {
        return Err(Error::Data(format!("spike train entry {bad} is not binary")));
    }
    let mut v = v0;
    let mut spikes = Vec::with_capacity(horizon);
    for row in trains.data().chunks_exact(n) {
        let input: f64 = row.iter().zip(weights).map(|(s, w)| s * w * theta_prev).sum();
        let m = v + input;
        let fired = m >= theta;
        v = if fired { m - theta } else { m };
        spikes.push(fired);
    }
    let count = spikes.iter().filter(|&&s| s).count();
    Ok(SpikeTimingResult {
        spikes,
        phi: theta * (count as f64 / horizon as f64),
    })
}

/// Builds a `T×N` binary spike-train tensor from 1-based firing times.
pub fn spike_trains(horizon: usize, times: &[&[usize]]) -> Result<Tensor> {
    let n = times.len();
    let mut data = vec![0.0; horizon * n];
    for (j, ts) in times.iter().enumerate() {
        for &t in *ts {
            if t == 0 || t > horizon {
                return Err(Error::Data(format!("spike time {t} outside 1..={horizon}")));
            }
            data[(t - 1) * n + j] = 1.0;
        }
    }
    Tensor::new(vec![horizon, n], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::LinearOp;

    fn single_neuron(theta: f64, v0: f64) -> SnnModel {
        SnnModel::new(
            vec![1],
            vec![
                SnnLayer::Linear(LinearOp::dense(Tensor::full(&[1, 1], 1.0), Tensor::zeros(&[1])).unwrap()),
                SnnLayer::Spiking(IfParams { theta, v0 }),
            ],
        )
        .unwrap()
    }

    #[test]
    fn hand_simulation_constant_input() {
        let m = single_neuron(1.0, 0.5);
        let out = run(&m, &Tensor::vector(&[0.3]), 4, true).unwrap();
        let spikes: Vec<f64> = out.trace.steps.iter().map(|s| s[0].s.data()[0]).collect();
        assert_eq!(spikes, vec![0.0, 1.0, 0.0, 0.0]);
        let charges: Vec<f64> = out.trace.steps.iter().map(|s| s[0].m.data()[0]).collect();
        for (c, want) in charges.iter().zip([0.8, 1.1, 0.4, 0.7]) {
            assert!((c - want).abs() < 1e-12);
        }
        assert_eq!(out.trace.phi[0].data(), &[0.25]);
    }

    #[test]
    fn subthreshold_never_fires() {
        let m = single_neuron(1.0, 0.7);
        let out = run(&m, &Tensor::vector(&[0.0]), 50, false).unwrap();
        assert_eq!(out.trace.phi[0].data(), &[0.0]);
    }

    #[test]
    fn suprathreshold_fires_every_step() {
        let m = single_neuron(1.0, 0.0);
        let out = run(&m, &Tensor::vector(&[1.5]), 6, false).unwrap();
        assert_eq!(out.trace.phi[0].data(), &[1.0]);
        assert_eq!(out.trace.final_v[0].data(), &[3.0]);
    }

    #[test]
    fn run_equals_manual_steps() {
        let m = single_neuron(0.9, 0.45);
        let x = Tensor::new(vec![3, 1], vec![0.1, 0.5, 1.2]).unwrap();
        let out = run(&m, &x, 7, false).unwrap();
        let mut st = SimState::new(&m, 3);
        for _ in 0..7 {
            step(&m, &mut st, &x).unwrap();
        }
        assert_eq!(st.readout().unwrap(), *out.logits());
        let one = run(&m, &x, 1, false).unwrap();
        let mut st1 = SimState::new(&m, 3);
        step(&m, &mut st1, &x).unwrap();
        assert_eq!(st1.readout().unwrap(), *one.logits());
    }

    #[test]
    fn three_spike_timing_scenarios() {
        let w = [2.0, -2.0];
        type Case<'a> = (&'a [usize], &'a [usize], &'a [usize], f64);
        let cases: [Case; 3] = [
            (&[1, 3, 5], &[2, 4], &[1, 3], 0.4),
            (&[1, 2, 3], &[4, 5], &[1, 2, 3, 4], 0.8),
            (&[3, 4, 5], &[1, 2], &[5], 0.2),
        ];
        for (a, b, want, phi) in cases {
            let trains = spike_trains(5, &[a, b]).unwrap();
            let r = spike_timing_run(&w, &trains, 1.0, 1.0, 0.0).unwrap();
            assert_eq!(r.spike_times(), want);
            assert_eq!(r.phi, phi);
        }
    }

    #[test]
    fn non_binary_train_is_data_error() {
        let trains = Tensor::from_rows(&[&[1.0, 0.5]]).unwrap();
        assert!(matches!(
            spike_timing_run(&[1.0, 1.0], &trains, 1.0, 1.0, 0.0),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let m = single_neuron(1.0, 0.5);
        let out = run(&m, &Tensor::vector(&[0.3]), 2, true).unwrap();
        let mut buf = Vec::new();
        out.trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "layer,t,neuron,m,s,v");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("0,2,0,1.1"));
    }
}
