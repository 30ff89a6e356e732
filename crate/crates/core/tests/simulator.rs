use proptest::prelude::*;
use qcfs_core::converter::convert;
use qcfs_core::snn::{self, constant_current_neuron, SimState};
use qcfs_core::{
    ActivationKind, AnnModel, Architecture, IfParams, Layer, LinearOp, QcfsParams, SnnLayer, SnnModel, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn mlp_snn(seed: u64) -> SnnModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    for (i, o) in [(6, 9), (9, 7), (7, 4)] {
        layers.push(SnnLayer::Linear(
            LinearOp::dense(
                random_tensor(&mut rng, &[o, i], -1.0, 1.0),
                random_tensor(&mut rng, &[o], -0.2, 0.2),
            )
            .unwrap(),
        ));
        if o != 4 {
            let theta = rng.random_range(0.3..2.0);
            layers.push(SnnLayer::Spiking(IfParams {
                theta,
                v0: rng.random_range(0.0..theta),
            }));
        }
    }
    SnnModel::new(vec![6], layers).unwrap()
}

#[test]
fn average_psp_conservation() {
    for seed in 0..20 {
        let model = mlp_snn(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let x = random_tensor(&mut rng, &[5, 6], -1.0, 2.0);
        let horizon = rng.random_range(1..80);
        let out = snn::run(&model, &x, horizon, false).unwrap();
        let tr = &out.trace;
        let mut prev = x.clone();
        let mut spiking = 0;
        let mut charge = prev.clone();
        for layer in model.layers() {
            match layer {
                SnnLayer::Linear(op) => charge = op.forward(&charge).unwrap(),
                SnnLayer::Spiking(_) => {
                    let phi = &tr.phi[spiking];
                    for i in 0..phi.len() {
                        let want = charge.data()[i]
                            - (tr.final_v[spiking].data()[i] - tr.initial_v[spiking].data()[i]) / horizon as f64;
                        assert!(
                            (phi.data()[i] - want).abs() < 1e-10,
                            "seed {seed} layer {spiking} neuron {i}"
                        );
                    }
                    prev = phi.clone();
                    charge = prev.clone();
                    spiking += 1;
                }
            }
        }
        // The readout is the output layer's response to the last layer's φ.
        let SnnLayer::Linear(last) = model.layers().last().unwrap() else {
            unreachable!()
        };
        let expect = last.forward(&prev).unwrap();
        for (a, b) in out.logits().data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn prefix_readouts_match_shorter_runs() {
    let model = mlp_snn(3);
    let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(4), &[3, 6], -1.0, 2.0);
    let long = snn::run(&model, &x, 20, false).unwrap();
    for t in [1, 5, 13, 20] {
        let short = snn::run(&model, &x, t, false).unwrap();
        assert_eq!(short.logits(), &long.readouts[t - 1]);
    }
}

#[test]
fn identical_inputs_give_identical_traces() {
    let model = mlp_snn(9);
    let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(1), &[2, 6], -1.0, 2.0);
    let a = snn::run(&model, &x, 30, true).unwrap();
    let b = snn::run(&model, &x, 30, true).unwrap();
    for (sa, sb) in a.trace.steps.iter().zip(&b.trace.steps) {
        for (la, lb) in sa.iter().zip(sb) {
            assert_eq!((&la.m, &la.s, &la.v), (&lb.m, &lb.s, &lb.v));
        }
    }
    assert_eq!(a.readouts, b.readouts);
}

#[test]
fn batched_simulation_matches_per_sample() {
    let model = mlp_snn(12);
    let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(2), &[4, 6], -1.0, 2.0);
    let batch = snn::run(&model, &x, 17, false).unwrap();
    for i in 0..4 {
        let one = snn::run(&model, &x.slice_batch(i, i + 1).unwrap(), 17, false).unwrap();
        assert_eq!(one.logits().data(), &batch.logits().data()[i * 4..(i + 1) * 4]);
    }
}

#[test]
fn step_api_tracks_spike_counts() {
    let model = mlp_snn(5);
    let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(6), &[1, 6], -1.0, 2.0);
    let mut state = SimState::new(&model, 1);
    for _ in 0..10 {
        snn::step(&model, &mut state, &x).unwrap();
    }
    let run = snn::run(&model, &x, 10, false).unwrap();
    for (l, counts) in run.trace.spike_counts.iter().enumerate() {
        assert_eq!(&state.layers[l].spike_counts, counts);
    }
    assert_eq!(state.phi(&model), run.trace.phi);
}

#[test]
fn single_qcfs_layer_equals_its_activation_at_t_equals_l() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for levels in [1u32, 2, 3, 4, 8, 16] {
        let ann = Architecture::Mlp
            .build(
                &[10],
                3,
                ActivationKind::Qcfs,
                QcfsParams::new(levels, rng.random_range(0.5..4.0), 0.5).unwrap(),
                &mut rng,
            )
            .unwrap();
        let snn = convert(&ann, None).unwrap();
        let x = random_tensor(&mut rng, &[50, 10], -3.0, 3.0);
        let run = snn::run(&snn, &x, levels as usize, false).unwrap();
        let out = ann.forward(&x).unwrap();
        assert_eq!(run.trace.phi[0], out.activations[0], "L = {levels}");
        // With one hidden layer the readout reproduces the ANN logits up to rounding.
        for (a, b) in run.logits().data().iter().zip(out.logits.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn negative_membranes_are_not_clamped() {
    let model = SnnModel::new(
        vec![1],
        vec![
            SnnLayer::Linear(LinearOp::dense(Tensor::full(&[1, 1], 1.0), Tensor::zeros(&[1])).unwrap()),
            SnnLayer::Spiking(IfParams { theta: 1.0, v0: 0.0 }),
        ],
    )
    .unwrap();
    let out = snn::run(&model, &Tensor::vector(&[-0.25]), 4, false).unwrap();
    assert_eq!(out.trace.final_v[0].data(), &[-1.0]);
}

#[test]
fn maxpool_is_rejected_by_snn() {
    let layers = vec![SnnLayer::Linear(LinearOp::MaxPool2d { size: 2 })];
    assert!(SnnModel::new(vec![1, 4, 4], layers).is_err());
    let ann = AnnModel::new(
        vec![1, 4, 4],
        vec![
            Layer::Linear(LinearOp::MaxPool2d { size: 2 }),
            Layer::Linear(LinearOp::Flatten),
        ],
    )
    .unwrap();
    assert!(convert(&ann, None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn constant_input_spike_count_closed_form(
        theta in 0.1f64..4.0, zf in -3.0f64..4.0, v0f in 0.0f64..1.0, horizon in 1usize..200,
    ) {
        let (z, v0) = (zf * theta, v0f * theta);
        let (count, v) = constant_current_neuron(z, horizon, theta, v0);
        let t = horizon as f64;
        let want = ((z * t + v0) / theta).floor().clamp(0.0, t);
        prop_assert_eq!(count as f64, want);
        if (0.0..1.0).contains(&zf) {
            prop_assert!((0.0..theta).contains(&v), "v = {} outside [0, θ)", v);
        }
    }
}
