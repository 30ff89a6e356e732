use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use qcfs_core::analysis::{
    self, energy_report, estimated_phi_scalar, lemma1_montecarlo, lemma1_montecarlo_weighted,
    lemma1_skewed_expectation, theorem2_montecarlo, McStats,
};
use qcfs_core::checkpoint::{load_checkpoint, save_checkpoint};
use qcfs_core::converter::{self, convert_with_thresholds, max_activation_threshold, positive_weight_sum_thresholds};
use qcfs_core::snn::{self, constant_current_neuron};
use qcfs_core::trainer::{self, accuracy, build_model, EpochStats};
use qcfs_core::{
    ActivationKind, AnnModel, Checkpoint, Dataset, IfParams, Layer, LinearOp, Metadata, QcfsParams, SnnModel, Split,
    Tensor, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{limited, load, load_both, num_classes};
use crate::{
    Check, ConvertArgs, EnergyArgs, EvalArgs, KeepArg, SweepArgs, ThresholdMode, TrainArgs, TrainOpts, V0Mode,
    VerificationFailed, VerifyArgs,
};

const EVAL_CHUNK: usize = 1000;

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn train_config(opts: &TrainOpts, levels: u32) -> TrainConfig {
    TrainConfig {
        epochs: opts.epochs as usize,
        batch_size: opts.batch_size as usize,
        lr0: opts.lr,
        momentum: opts.momentum,
        weight_decay: opts.weight_decay,
        seed: opts.seed,
        levels,
        shift: opts.shift,
    }
}

fn fit(
    opts: &TrainOpts,
    levels: u32,
    train: &Dataset,
    test: &Dataset,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(trainer::TrainOutcome, TrainConfig)> {
    let cfg = train_config(opts, levels);
    cfg.validate()?;
    let model = build_model(opts.arch.into(), train.sample_shape(), num_classes(&opts.data), &cfg)?;
    let outcome = trainer::train(model, train, test, &cfg, |s| on_epoch(s))?;
    Ok((outcome, cfg))
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let (tr, te) = load_both(&args.opts.data)?;
    let mut out = io::stdout().lock();
    writeln!(out, "{}", EpochStats::CSV_HEADER)?;
    let (outcome, cfg) = fit(&args.opts, args.levels, &tr, &te, |s| {
        let _ = writeln!(out, "{}", s.csv_row());
        let _ = out.flush();
    })?;
    let (model, label) = match args.keep {
        KeepArg::Last => (outcome.last.clone(), "last"),
        KeepArg::Best => (outcome.best.clone(), "best"),
    };
    let final_acc = outcome.history.last().map_or(0.0, |s| s.test_acc);
    let mut meta = Metadata {
        seed: Some(cfg.seed),
        config_digest: Some(cfg.digest()),
        ..Metadata::default()
    };
    meta.extra
        .insert("arch".into(), format!("{:?}", args.opts.arch).to_lowercase());
    meta.extra
        .insert("dataset".into(), format!("{:?}", args.opts.data.dataset).to_lowercase());
    meta.extra.insert("kept".into(), label.into());
    meta.extra.insert("best_epoch".into(), outcome.best_epoch.to_string());
    save_checkpoint(&Checkpoint::ann(model, meta), &args.out)?;
    eprintln!(
        "final test accuracy {:.2}%; best {:.2}% at epoch {}; wrote {} weights to {}",
        100.0 * final_acc,
        100.0 * outcome.best_test_acc,
        outcome.best_epoch,
        label,
        args.out.display()
    );
    Ok(())
}

pub fn convert(args: &ConvertArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.input)?;
    let source_meta = ckpt.metadata.clone();
    let ann = ckpt.into_ann()?;
    let shift_override = match args.v0_mode {
        V0Mode::Shift => None,
        V0Mode::Zero => Some(0.0),
    };
    let snn = match args.threshold_mode {
        ThresholdMode::Lambda => converter::convert(&ann, shift_override)?,
        ThresholdMode::MaxAct => {
            let calib = limited(load(&args.data, Split::Train)?, Some(args.calib_samples as usize))?;
            let thresholds = max_activation_threshold(&ann, &calib.inputs)?;
            convert_with_thresholds(&ann, &thresholds, shift_override)?
        }
    };
    let mut meta = Metadata {
        seed: source_meta.seed,
        config_digest: source_meta.config_digest,
        extra: source_meta.extra,
    };
    meta.extra.insert("source_checksum".into(), ann.weight_checksum());
    meta.extra
        .insert("v0_mode".into(), format!("{:?}", args.v0_mode).to_lowercase());
    meta.extra.insert(
        "threshold_mode".into(),
        format!("{:?}", args.threshold_mode).to_lowercase(),
    );
    for (i, p) in snn.spiking_params().iter().enumerate() {
        eprintln!("spiking layer {i}: θ = {}, v0 = {}", p.theta, p.v0);
    }
    save_checkpoint(&Checkpoint::snn(snn, meta), &args.out)?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

fn normalized(list: &[u64]) -> Vec<usize> {
    let mut v: Vec<usize> = list.iter().map(|&t| t as usize).collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Accuracy at every listed horizon from one simulation per chunk.
fn snn_accuracies(snn: &SnnModel, data: &Dataset, horizons: &[usize]) -> Result<Vec<f64>> {
    let max_t = *horizons.last().context("empty T list")?;
    let mut hits = vec![0usize; horizons.len()];
    let n = data.len();
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let out = snn::run(snn, &data.inputs.slice_batch(start, end)?, max_t, false)?;
        for (h, &t) in hits.iter_mut().zip(horizons) {
            let pred = out.readouts[t - 1].argmax_rows()?;
            *h += pred
                .iter()
                .zip(&data.labels[start..end])
                .filter(|(p, y)| p == y)
                .count();
        }
        start = end;
    }
    Ok(hits.iter().map(|&h| h as f64 / n as f64).collect())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let test = limited(load(&args.data, Split::Test)?, args.limit)?;
    let ckpt = load_checkpoint(&args.model)?;
    if args.ann {
        let acc = accuracy(&ckpt.into_ann()?, &test)?;
        let mut out = sink(args.out.as_deref())?;
        writeln!(out, "T,accuracy\nann,{acc}")?;
        return Ok(out.flush()?);
    }
    let snn = ckpt.into_snn()?;
    let mut out = sink(args.out.as_deref())?;
    writeln!(out, "T,accuracy")?;
    let horizons = normalized(&args.t_list);
    for (t, acc) in horizons.iter().zip(snn_accuracies(&snn, &test, &horizons)?) {
        writeln!(out, "{t},{acc}")?;
    }
    out.flush()?;
    if let Some(path) = &args.trace {
        let first = test.inputs.slice_batch(0, 1)?;
        let run = snn::run(&snn, &first, *horizons.last().unwrap(), true)?;
        let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
        run.trace.write_csv(BufWriter::new(file))?;
    }
    Ok(())
}

pub fn sweep(args: &SweepArgs) -> Result<()> {
    let (tr, te) = load_both(&args.opts.data)?;
    let te = limited(te, args.limit)?;
    let horizons = normalized(&args.t_list);
    let mut levels = args.l_list.clone();
    levels.sort_unstable();
    levels.dedup();
    let mut out = sink(args.out.as_deref())?;
    writeln!(out, "L,T,ann_accuracy,snn_accuracy")?;
    for &l in &levels {
        let (outcome, _) = fit(&args.opts, l, &tr, &te, |_| {})?;
        let ann_acc = accuracy(&outcome.last, &te)?;
        let snn = converter::convert(&outcome.last, None)?;
        let accs = snn_accuracies(&snn, &te, &horizons)?;
        for (t, acc) in horizons.iter().zip(&accs) {
            writeln!(out, "{l},{t},{ann_acc},{acc}")?;
        }
        out.flush()?;
        eprintln!(
            "L = {l}: ANN {:.2}%, SNN at T = {} {:.2}%",
            100.0 * ann_acc,
            horizons.last().unwrap(),
            100.0 * accs.last().unwrap()
        );
    }
    Ok(())
}

pub fn energy(args: &EnergyArgs) -> Result<()> {
    let ann = load_checkpoint(&args.ann)?.into_ann()?;
    let snn = load_checkpoint(&args.snn)?.into_snn()?;
    let test = limited(load(&args.data, Split::Test)?, args.limit)?;
    let r = energy_report(&ann, &snn, &test.inputs, args.horizon as usize)?;
    let mut out = sink(args.out.as_deref())?;
    writeln!(out, "kind,ops,energy_joules")?;
    writeln!(out, "ann_flops,{},{:e}", r.flops_per_image, r.ann_energy_j)?;
    writeln!(out, "snn_sops,{},{:e}", r.sops_per_image, r.snn_energy_j)?;
    out.flush()?;
    eprintln!(
        "per image over {} images at T = {}: ANN {:.3e} J, SNN {:.3e} J",
        r.images, r.horizon, r.ann_energy_j, r.snn_energy_j
    );
    Ok(())
}

struct Report {
    out: Box<dyn Write>,
    failures: Vec<String>,
}

impl Report {
    fn new(header: &str) -> Result<Self> {
        let mut out = sink(None)?;
        writeln!(out, "{header}")?;
        Ok(Report {
            out,
            failures: Vec::new(),
        })
    }

    fn row(&mut self, pass: bool, fields: String, what: impl FnOnce() -> String) -> Result<()> {
        writeln!(self.out, "{fields},{}", if pass { "pass" } else { "fail" })?;
        if !pass {
            self.failures.push(what());
        }
        Ok(())
    }

    fn finish(mut self, summary: String) -> Result<()> {
        self.out.flush()?;
        if self.failures.is_empty() {
            eprintln!("{summary}");
            Ok(())
        } else {
            Err(VerificationFailed(self.failures.join("; ")).into())
        }
    }
}

fn mc_fields(name: &str, t: usize, l: &str, s: &McStats, expected: f64) -> String {
    format!("{name},{t},{l},{},{},{expected}", s.mean, s.stderr)
}

fn horizons_or(args: &VerifyArgs, default: &[usize]) -> Vec<usize> {
    args.horizon.map_or_else(|| default.to_vec(), |t| vec![t as usize])
}

pub fn verify(args: &VerifyArgs) -> Result<()> {
    let n = args.samples as usize;
    match args.check {
        Check::Lemma1 => {
            let mut rep = Report::new("check,T,L,mean,stderr,expected,result")?;
            let horizons = horizons_or(args, &[1, 2, 4, 8, 16, 32]);
            for (k, &t) in horizons.iter().enumerate() {
                let seed = args.seed.wrapping_add(2 * k as u64);
                let s = lemma1_montecarlo(t, 1.0, n, seed)?;
                rep.row(s.passes_zero_test(), mc_fields("uniform", t, "", &s, 0.0), || {
                    format!("uniform T={t}: mean {} exceeds 4 stderr", s.mean)
                })?;
                let mut weights = vec![1.0; t + 1];
                weights[0] = 3.0;
                weights[t] = 0.25;
                let expected = lemma1_skewed_expectation(t, 1.0, &weights);
                let s = lemma1_montecarlo_weighted(t, 1.0, &weights, n, seed + 1)?;
                rep.row(s.matches(expected), mc_fields("skewed", t, "", &s, expected), || {
                    format!("skewed T={t}: mean {} vs {expected}", s.mean)
                })?;
            }
            rep.finish(format!("rounding error: {} horizons within 4 stderr", horizons.len()))
        }
        Check::Theorem2 => {
            let mut rep = Report::new("check,T,L,mean,stderr,expected,result")?;
            let t = args.horizon.unwrap_or(8) as usize;
            let s = theorem2_montecarlo(t, args.levels, 1.0, 1.0, args.shift, n, args.seed)?;
            let fields = mc_fields(&format!("shift={}", args.shift), t, &args.levels.to_string(), &s, 0.0);
            rep.row(s.passes_zero_test(), fields, || {
                format!(
                    "T={t}, L={}, shift={}: mean {} is {:.1} stderr from zero",
                    args.levels,
                    args.shift,
                    s.mean,
                    s.mean.abs() / s.stderr
                )
            })?;
            rep.finish(format!(
                "mean conversion error {} ± {} is consistent with zero",
                s.mean, s.stderr
            ))
        }
        Check::Theorem3 => {
            let mut rep = Report::new("net,T,potentials,max_v_over_theta,result")?;
            let t = args.horizon.unwrap_or(64) as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            let nets = 50;
            for net in 0..nets {
                let (records, worst, violations) = theorem3_net(&mut rng, t)?;
                rep.row(violations == 0, format!("{net},{t},{records},{worst}"), || {
                    format!("net {net}: {violations} potentials reached θ")
                })?;
            }
            rep.finish(format!("{nets} networks kept every potential below θ over {t} steps"))
        }
        Check::Unevenness => {
            let mut rep = Report::new("case,input_times,output_times,phi,expected,result")?;
            let cases = analysis::unevenness_demo()?;
            let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
            for c in &cases {
                let inputs = format!("{} | {}", join(&c.input_times[0]), join(&c.input_times[1]));
                let fields = format!(
                    "{},{inputs},{},{},{}",
                    c.name,
                    join(&c.output_times),
                    c.phi,
                    c.expected_phi
                );
                rep.row(c.passed(), fields, || {
                    format!("{}: φ = {} vs {}", c.name, c.phi, c.expected_phi)
                })?;
            }
            let phis: Vec<String> = cases.iter().map(|c| c.phi.to_string()).collect();
            rep.finish(format!("φ = {}", phis.join(", ")))
        }
        Check::Eq12 => {
            let mut rep = Report::new("T,v0,points,mismatches,result")?;
            let theta = 1.0;
            let points = 10_000;
            for t in horizons_or(args, &[1, 2, 4, 8, 32]) {
                for v0 in [0.0, theta / 2.0] {
                    let mismatches = (0..points)
                        .filter(|&k| {
                            let z = -2.0 * theta + 5.0 * theta * k as f64 / (points - 1) as f64;
                            let (count, _) = constant_current_neuron(z, t, theta, v0);
                            estimated_phi_scalar(z, t, theta, v0) != theta * (count as f64 / t as f64)
                        })
                        .count();
                    rep.row(mismatches == 0, format!("{t},{v0},{points},{mismatches}"), || {
                        format!("T={t}, v0={v0}: {mismatches} mismatches")
                    })?;
                }
            }
            rep.finish("simulated spike counts equal the closed form at every grid point".into())
        }
    }
}

/// Simulates one random three-hidden-layer network with positive-weight-sum
/// thresholds and random `v0 < θ`; returns the number of recorded potentials,
/// the largest `v/θ` and the number of potentials at or above `θ`.
fn theorem3_net(rng: &mut ChaCha8Rng, horizon: usize) -> Result<(usize, f64, usize)> {
    let dims = [
        8,
        rng.random_range(4..16),
        rng.random_range(4..16),
        rng.random_range(4..16),
        3,
    ];
    let mut layers = Vec::new();
    for (k, w) in dims.windows(2).enumerate() {
        let weight: Vec<f64> = (0..w[0] * w[1]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..w[1]).map(|_| rng.random_range(-0.1..0.1)).collect();
        layers.push(Layer::Linear(LinearOp::dense(
            Tensor::new(vec![w[1], w[0]], weight)?,
            Tensor::vector(&bias),
        )?));
        if k + 2 < dims.len() {
            layers.push(Layer::Activation {
                kind: ActivationKind::Qcfs,
                params: QcfsParams::new(4, 1.0, 0.5)?,
            });
        }
    }
    let ann = AnnModel::new(vec![8], layers)?;
    let x = Tensor::new(vec![16, 8], (0..128).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let thresholds = positive_weight_sum_thresholds(&ann, x.max_abs())?;
    let params: Vec<IfParams> = thresholds
        .iter()
        .map(|&theta| IfParams {
            theta,
            v0: rng.random_range(0.0..theta),
        })
        .collect();
    let snn = convert_with_thresholds(&ann, &thresholds, Some(0.0))?.with_spiking_params(&params)?;
    let run = snn::run(&snn, &x, horizon, true)?;
    let mut records = 0;
    let mut worst = f64::NEG_INFINITY;
    let mut violations = 0;
    for step in &run.trace.steps {
        for (rec, p) in step.iter().zip(&params) {
            for &v in rec.v.data() {
                worst = worst.max(v / p.theta);
                violations += usize::from(v >= p.theta);
                records += 1;
            }
        }
    }
    Ok((records, worst, violations))
}
