use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use qread_core::baseline::{self, window_slice, ReadoutWindow};
use qread_core::dse::{self, DseSpec, Method};
use qread_core::fxp::{self, FoldedNet};
use qread_core::ip::{self, IpConfig, IpSim};
use qread_core::metrics::{ConfusionCounts, FidelityReport};
use qread_core::mlp::{self, MlpArch, TrainConfig};
use qread_core::physics::{self, DeviceParams, NoiseModel, ShotSet, State};
use qread_core::{dataset, rng};
use serde::Serialize;
use serde_json::json;

use crate::artifacts::{self, CalibrationFile, CalibrationRequest, ModelFile, RunManifest};
use crate::error::{CliError, Result};
use crate::{CalibrateArgs, Cli, Command, DseArgs, EvalArgs, GenArgs, Global, MethodArg, SimArgs, TrainArgs};

// Sub-seed paths, one per consumer of --seed.
const SEED_CALIBRATION: u64 = 1;
const SEED_SPLIT: u64 = 2;
const SEED_TRAIN: u64 = 3;
const SEED_DSE: u64 = 4;

pub fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.global.jobs {
        if j == 0 {
            return Err(CliError::Usage("--jobs must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let g = &cli.global;
    match cli.command {
        Command::Gen(a) => gen(g, &a),
        Command::Calibrate(a) => calibrate(g, &a),
        Command::Train(a) => train(g, &a),
        Command::Eval(a) => eval(g, &a),
        Command::Dse(a) => run_dse(g, &a),
        Command::Sim(a) => sim(g, &a),
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| CliError::json("stdout", e))?;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{s}").and_then(|_| out.flush()) {
        // A closed pipe (`| head`) is not a failure of the command.
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::io("stdout", e)),
        _ => Ok(()),
    }
}

fn is_csv(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn load_shots(p: &Path) -> Result<ShotSet> {
    let f = File::open(p).map_err(|e| CliError::io(p.display(), e))?;
    if is_csv(p) {
        // CSV carries no metadata; assume the default device.
        Ok(dataset::read_csv(f, DeviceParams::default(), NoiseModel::new(0.0, 0))?)
    } else {
        Ok(dataset::decode(f)?)
    }
}

fn create(p: &Path) -> Result<BufWriter<File>> {
    File::create(p).map(BufWriter::new).map_err(|e| CliError::io(p.display(), e))
}

fn check_fraction(name: &str, f: f64) -> Result<()> {
    if f > 0.0 && f < 0.5 {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{name} must lie in (0, 0.5), got {f}")))
    }
}

fn calibration_request(g: &Global, target: f64, window: ReadoutWindow, n_cal: usize) -> CalibrationRequest {
    CalibrationRequest {
        target_fidelity: target,
        window,
        n_cal,
        seed: rng::derive_seed(g.seed, &[SEED_CALIBRATION]),
        device: DeviceParams::default(),
    }
}

fn calibrate(g: &Global, a: &CalibrateArgs) -> Result<()> {
    let req = calibration_request(g, a.target_fidelity, a.window, a.shots);
    let file = artifacts::calibrate_cached(&req, g.debug)?;
    if let Some(out) = &a.out {
        artifacts::write_json(out, &file)?;
        RunManifest::new("calibrate", g.seed, json!({ "request": req }))
            .output(out)
            .write_beside(out)?;
    }
    print_json(&file)
}

fn gen(g: &Global, a: &GenArgs) -> Result<()> {
    if a.shots == 0 {
        return Err(CliError::Usage("--shots must be >= 1".into()));
    }
    let dev = DeviceParams::default();
    let mut inputs = Vec::new();
    let (sigma, calibration) = match (&a.sigma, &a.calibration) {
        (Some(s), _) => (*s, None),
        (None, Some(p)) => {
            let file: CalibrationFile = artifacts::read_json(p)?;
            if file.request.device != dev {
                return Err(CliError::Usage(format!(
                    "{} was calibrated for a different device",
                    p.display()
                )));
            }
            inputs.push(p.clone());
            (file.result.sigma, Some(file))
        }
        (None, None) => {
            let req = calibration_request(g, a.target_fidelity, a.window, a.cal_shots);
            let file = artifacts::calibrate_cached(&req, g.debug)?;
            (file.result.sigma, Some(file))
        }
    };
    let noise = NoiseModel::new(sigma, g.seed);
    let set = physics::synth_dataset(a.shots, &dev, &noise)?;
    if g.debug {
        eprintln!(
            "generated {} shots, sigma {sigma:.4e}, saturation {:.2e}",
            set.len(),
            set.saturation_rate()
        );
    }
    if is_csv(&a.out) {
        let mut w = create(&a.out)?;
        dataset::write_csv(&set, &mut w)?;
        w.flush().map_err(|e| CliError::io(a.out.display(), e))?;
    } else {
        dataset::write_shots(&a.out, &set)?;
    }
    let mut m = RunManifest::new(
        "gen",
        g.seed,
        json!({
            "shots_per_class": a.shots,
            "device": dev,
            "noise": noise,
            "calibration": calibration,
        }),
    );
    for p in &inputs {
        m = m.input(p);
    }
    m.output(&a.out).write_beside(&a.out)?;
    Ok(())
}

fn train_config(g: &Global, a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig {
        seed: rng::derive_seed(g.seed, &[SEED_TRAIN]),
        ..TrainConfig::default()
    };
    if let Some(v) = a.epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.patience {
        cfg.patience = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(g: &Global, a: &TrainArgs) -> Result<()> {
    let set = load_shots(&a.data)?;
    let w = a.window;
    w.check(set.n_samples())?;
    let (model, config, train_fidelity) = match a.method {
        MethodArg::Th => {
            let m = baseline::fit_threshold(&set, w)?;
            let f = baseline::evaluate(&m, &set)?.fidelity;
            (ModelFile::Threshold(m), json!({ "method": "th", "window": w }), f)
        }
        MethodArg::Mf => {
            let m = baseline::fit_matched_filter(&set, w)?;
            let f = baseline::evaluate(&m, &set)?.fidelity;
            (ModelFile::MatchedFilter(m), json!({ "method": "mf", "window": w }), f)
        }
        MethodArg::Nn => {
            check_fraction("--val-fraction", a.val_fraction)?;
            let hidden = match a.arch {
                Some((n_in, _)) if n_in != w.n_features() => {
                    return Err(CliError::Usage(format!(
                        "--arch input {n_in} does not match window {w} ({} features)",
                        w.n_features()
                    )))
                }
                Some((_, h)) => h,
                None => 4,
            };
            let cfg = train_config(g, a)?;
            let (tr, va) = split_two(&set, a.val_fraction, g.seed)?;
            let arch = MlpArch::new(w.n_features(), hidden);
            let m0 = mlp::init_model(arch, cfg.seed);
            let (m, hist) = mlp::train_qat(&m0, &tr, &va, w, &cfg, a.quant)?;
            if g.debug {
                for e in &hist.epochs {
                    eprintln!("epoch {:>3}: loss {:.5} val {:.4}", e.epoch, e.train_loss, e.val_fidelity);
                }
            }
            let f = mlp::evaluate(&m, &tr, w)?.fidelity;
            (
                ModelFile::Mlp(m),
                json!({
                    "method": "nn",
                    "window": w,
                    "arch": arch,
                    "quant": a.quant,
                    "val_fraction": a.val_fraction,
                    "train": cfg,
                    "epochs_run": hist.epochs.len(),
                    "best_epoch": hist.best_epoch,
                }),
                f,
            )
        }
    };
    model.save(&a.out)?;
    RunManifest::new("train", g.seed, config)
        .input(&a.data)
        .output(&a.out)
        .write_beside(&a.out)?;
    print_json(&json!({ "kind": model.kind(), "window": w, "train_fidelity": train_fidelity }))
}

/// Stratified train/validation split.
fn split_two(set: &ShotSet, val_fraction: f64, seed: u64) -> Result<(ShotSet, ShotSet)> {
    // The three-way split needs a non-empty test part; fold it back in.
    let tiny = val_fraction / 10.0;
    let (mut tr, va, rest) = dataset::split(
        set,
        (1.0 - val_fraction - tiny, val_fraction, tiny),
        rng::derive_seed(seed, &[SEED_SPLIT]),
    )?;
    tr.shots.extend(rest.shots);
    Ok((tr, va))
}

fn resolve_window(model: &ModelFile, flag: Option<ReadoutWindow>) -> Result<ReadoutWindow> {
    match (model.window(), flag) {
        (Some(m), Some(f)) if m != f => Err(CliError::Usage(format!(
            "model was fitted on window {m}, --window says {f}"
        ))),
        (Some(m), _) => Ok(m),
        (None, Some(f)) => Ok(f),
        (None, None) => Err(CliError::Usage("model has no window; pass --window".into())),
    }
}

fn fxp_report(net: &FoldedNet, set: &ShotSet, w: ReadoutWindow, sf: u32) -> Result<FidelityReport> {
    let rows = set
        .shots
        .iter()
        .map(|s| window_slice(s, w))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let out = fxp::infer_batch(net, &rows, sf)?;
    let preds: Vec<State> = out.iter().map(|o| o.decision).collect();
    Ok(ConfusionCounts::from_predictions(&set.labels(), &preds)?.report())
}

fn eval(g: &Global, a: &EvalArgs) -> Result<()> {
    let model = ModelFile::load(&a.model)?;
    let set = load_shots(&a.data)?;
    let w = resolve_window(&model, a.window)?;
    w.check(set.n_samples())?;
    let report = match (&model, a.fxp) {
        (ModelFile::Threshold(m), false) => baseline::evaluate(m, &set)?,
        (ModelFile::MatchedFilter(m), false) => baseline::evaluate(m, &set)?,
        (ModelFile::Mlp(m), false) => mlp::evaluate(m, &set, w)?,
        (ModelFile::Mlp(m), true) => fxp_report(&FoldedNet::from_model(m)?, &set, w, a.scaling_factor)?,
        (other, true) => {
            return Err(CliError::Usage(format!(
                "--fxp needs a network model, got {}",
                other.kind()
            )))
        }
    };
    if let Some(out) = &a.out {
        artifacts::write_json(out, &report)?;
        RunManifest::new(
            "eval",
            g.seed,
            json!({ "window": w, "fxp": a.fxp, "scaling_factor": a.scaling_factor }),
        )
        .input(&a.model)
        .input(&a.data)
        .output(out)
        .write_beside(out)?;
    }
    print_json(&report)
}

fn run_dse(g: &Global, a: &DseArgs) -> Result<()> {
    check_fraction("--val-fraction", a.val_fraction)?;
    check_fraction("--test-fraction", a.test_fraction)?;
    let mut spec = DseSpec {
        seed: rng::derive_seed(g.seed, &[SEED_DSE]),
        replicate_seeds: a.replicates,
        full_window: !a.no_full_window,
        ..DseSpec::default()
    };
    spec.train.seed = spec.seed;
    if let Some(ms) = &a.methods {
        spec.methods = ms.iter().map(|s| s.parse::<Method>()).collect::<std::result::Result<_, _>>()?;
    }
    if let Some(v) = &a.starts {
        spec.starts = v.clone();
    }
    if let Some(v) = &a.sizes {
        spec.sizes = v.clone();
    }
    if let Some(e) = a.epochs {
        spec.train.max_epochs = e;
    }
    spec.validate()?;
    let set = load_shots(&a.data)?;
    let (tr, va, te) = dataset::split(
        &set,
        (1.0 - a.val_fraction - a.test_fraction, a.val_fraction, a.test_fraction),
        rng::derive_seed(g.seed, &[SEED_SPLIT]),
    )?;
    let result = dse::run_grid(&spec, &tr, &va, &te)?;
    if g.debug {
        for s in &result.skipped {
            eprintln!("skipped {}:{:?} {}: {}", s.start, s.size, s.method, s.reason);
        }
    }
    let mut w = create(&a.out)?;
    dse::write_csv(&result, &mut w)?;
    w.flush().map_err(|e| CliError::io(a.out.display(), e))?;
    let mut plot = a.out.as_os_str().to_owned();
    plot.push(".plot.json");
    let plot = std::path::PathBuf::from(plot);
    std::fs::write(&plot, dse::plot_data_json(&result)).map_err(|e| CliError::io(plot.display(), e))?;

    let best = spec
        .methods
        .iter()
        .map(|m| {
            dse::best_config(&result, *m).map(|b| json!({ "method": m.to_string(), "start": b.start, "size": b.size, "fidelity": b.fidelity }))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    RunManifest::new(
        "dse",
        g.seed,
        json!({ "spec": spec, "val_fraction": a.val_fraction, "test_fraction": a.test_fraction }),
    )
    .input(&a.data)
    .output(&a.out)
    .output(&plot)
    .write_beside(&a.out)?;
    print_json(&json!({ "cells": result.records.len(), "skipped": result.skipped.len(), "best": best }))
}

fn sim(g: &Global, a: &SimArgs) -> Result<()> {
    let model = ModelFile::load(&a.model)?;
    let ModelFile::Mlp(m) = &model else {
        return Err(CliError::Usage(format!("sim needs a network model, got {}", model.kind())));
    };
    let w = resolve_window(&model, a.window)?;
    let mut set = load_shots(&a.data)?;
    if let Some(n) = a.limit {
        set.shots.truncate(n);
    }
    let offset = a.offset.unwrap_or(w.start as u32);
    let mut cfg = IpConfig::new(offset, w.size as u32);
    cfg.scaling_factor = a.scaling_factor;
    cfg.debug = g.debug;
    let net = FoldedNet::from_model(m)?;
    let mut ipsim = IpSim::new(net.clone(), cfg)?;
    if g.debug && a.out.is_some() {
        ipsim.enable_trace();
    }
    let events = ip::replay(&mut ipsim, &set)?;

    // Cross-check every decision against direct fixed-point inference on the
    // samples the IP actually captured.
    let captured = ReadoutWindow::new(offset as usize, w.size);
    let mut mismatches = 0usize;
    for (shot, e) in set.shots.iter().zip(&events) {
        let direct = fxp::infer_fxp(&net, window_slice(shot, captured)?, a.scaling_factor)?;
        if direct != e.output {
            mismatches += 1;
        }
    }
    let preds: Vec<State> = events.iter().map(|e| e.output.decision).collect();
    let report = ConfusionCounts::from_predictions(&set.labels(), &preds)?.report();

    if let Some(out) = &a.out {
        let mut f = create(out)?;
        let io = |e| CliError::io(out.display(), e);
        writeln!(f, "index,cycle,logit,neg_logit,decision").map_err(io)?;
        for e in &events {
            writeln!(
                f,
                "{},{},{},{},{}",
                e.index,
                e.cycle,
                e.record.0,
                e.record.1,
                ip::record_decision(e.record).bit()
            )
            .map_err(io)?;
        }
        f.flush().map_err(io)?;
        let mut m = RunManifest::new("sim", g.seed, json!({ "ip": cfg, "window": w, "limit": a.limit }))
            .input(&a.model)
            .input(&a.data)
            .output(out);
        if g.debug {
            let mut t = out.as_os_str().to_owned();
            t.push(".trace.csv");
            let t = std::path::PathBuf::from(t);
            let mut tf = create(&t)?;
            ipsim.write_trace_csv(&mut tf)?;
            tf.flush().map_err(|e| CliError::io(t.display(), e))?;
            m = m.output(&t);
        }
        m.write_beside(out)?;
    }
    if g.debug {
        for line in ipsim.debug_log().iter().take(50) {
            eprintln!("{line}");
        }
    }
    let lat = net.latency;
    print_json(&json!({
        "shots": set.len(),
        "predictions": ipsim.get_classifier_prediction_count(),
        "mismatches_vs_direct": mismatches,
        "fidelity": report,
        "latency_cycles": lat.compute_cycles + lat.store_cycles,
        "latency_ns": fxp::latency_ns(&lat, fxp::DEFAULT_CLOCK_NS)?,
    }))
}
