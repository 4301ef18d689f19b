//! Oracles and generators shared by the integration tests.
#![allow(dead_code)]

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use qread_core::fxp::{FoldedNet, FxpFormat, LatencyModel, NetFormats, Overflow, Rounding, INPUT_BITS};
use qread_core::mlp::{loss_and_gradients, BnMode, MlpArch, MlpModel, QuantScheme};
use qread_core::State;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---- arbitrary-precision fixed-point oracle ----

fn pow2(e: i32) -> BigRational {
    let p = BigRational::from_integer(BigInt::one() << e.unsigned_abs());
    if e >= 0 {
        p
    } else {
        p.recip()
    }
}

fn rat(raw: i64, frac: i32) -> BigRational {
    BigRational::from_integer(BigInt::from(raw)) * pow2(-frac)
}

/// Exact value -> raw code of `fmt`, straight from the definitions.
pub fn oracle_cast(v: &BigRational, fmt: &FxpFormat) -> i64 {
    let scaled = v * pow2(fmt.frac_bits());
    let fl = scaled.floor();
    let q = match fmt.rounding {
        Rounding::TruncateTowardNegInf => fl.to_integer(),
        Rounding::RoundHalfEven => {
            let rem = &scaled - &fl;
            let half = BigRational::new(BigInt::one(), BigInt::from(2));
            let fi = fl.to_integer();
            let odd = (&fi % BigInt::from(2)) != BigInt::zero();
            if rem > half || (rem == half && odd) {
                fi + 1
            } else {
                fi
            }
        }
    };
    let lo = BigInt::from(fmt.raw_min());
    let hi = BigInt::from(fmt.raw_max());
    let r = match fmt.overflow {
        Overflow::Saturate => q.clamp(lo, hi),
        Overflow::Wrap => {
            let m = BigInt::one() << fmt.total_bits;
            let mut r = ((q % &m) + &m) % &m;
            if fmt.signed && r > hi {
                r -= m;
            }
            r
        }
    };
    r.to_i64().expect("fits the format")
}

/// `(logit, neg_logit)` raw codes computed with exact rationals.
pub fn oracle_infer(net: &FoldedNet, features: &[u16], scaling_factor: u32) -> (i64, i64) {
    let f = &net.formats;
    let div = BigInt::one() << scaling_factor;
    let x: Vec<BigRational> = features
        .iter()
        .map(|&c| {
            // floor(c / 2^sf): a plain right shift of the code
            BigRational::from_integer(BigInt::from(c)) / BigRational::from_integer(div.clone())
        })
        .map(|v| BigRational::from_integer(v.floor().to_integer()))
        .collect();
    let mut out = BigRational::zero();
    for i in 0..net.n_hidden {
        let mut acc = BigRational::zero();
        for j in 0..net.n_in {
            acc += BigRational::from_integer(BigInt::from(net.w1[i * net.n_in + j])) * &x[j];
        }
        let acc = oracle_cast(&acc, &f.accumulator);
        let pre = rat(net.mult[i], f.multiplier.frac_bits()) * rat(acc, 0) + rat(net.bias[i], f.hidden.frac_bits());
        let mut h = oracle_cast(&pre, &f.hidden);
        if net.hidden_relu && h < 0 {
            h = 0;
        }
        out += BigRational::from_integer(BigInt::from(net.w2[i])) * rat(h, f.hidden.frac_bits());
    }
    let v = rat(net.out_mult, f.out_multiplier.frac_bits()) * out + rat(net.out_bias, f.logit.frac_bits());
    let logit = oracle_cast(&v, &f.logit);
    let neg = oracle_cast(&(-rat(logit, f.logit.frac_bits())), &f.logit);
    (logit, neg)
}

fn random_mode(r: &mut ChaCha8Rng) -> (Rounding, Overflow) {
    let rounding = if r.random_bool(0.5) {
        Rounding::RoundHalfEven
    } else {
        Rounding::TruncateTowardNegInf
    };
    let overflow = if r.random_bool(0.7) {
        Overflow::Saturate
    } else {
        Overflow::Wrap
    };
    (rounding, overflow)
}

fn random_format(r: &mut ChaCha8Rng, bits: std::ops::RangeInclusive<u32>, max_frac: i32) -> FxpFormat {
    let total = r.random_range(bits);
    let frac = r.random_range(0..=max_frac);
    let (rounding, overflow) = random_mode(r);
    FxpFormat::signed(total, total as i32 - frac)
        .with_rounding(rounding)
        .with_overflow(overflow)
}

fn random_raw(r: &mut ChaCha8Rng, fmt: &FxpFormat) -> i64 {
    r.random_range(fmt.raw_min()..=fmt.raw_max()) as i64
}

/// Small random network with random formats, narrow enough that every
/// saturation and wrap path gets exercised.
pub fn random_net(r: &mut ChaCha8Rng, n_in: usize) -> FoldedNet {
    let n_hidden = r.random_range(1..=4);
    let quant = match r.random_range(0..4) {
        0 => QuantScheme::ternary(),
        1 => QuantScheme::FixedUniform { bits: 3 },
        2 => QuantScheme::FixedUniform { bits: 6 },
        _ => QuantScheme::FixedUniform { bits: 16 },
    };
    let q = i64::from(quant.max_code().unwrap());
    let acc_bits = r.random_range(4..=40);
    let (acc_round, acc_over) = random_mode(r);
    let formats = NetFormats {
        input: FxpFormat::unsigned(INPUT_BITS, INPUT_BITS as i32),
        accumulator: FxpFormat::signed(acc_bits, acc_bits as i32)
            .with_rounding(acc_round)
            .with_overflow(acc_over),
        multiplier: random_format(r, 4..=24, 28),
        hidden: random_format(r, 6..=32, 20),
        out_multiplier: random_format(r, 4..=24, 28),
        logit: random_format(r, 8..=32, 20),
    };
    let f = formats;
    FoldedNet {
        n_in,
        n_hidden,
        hidden_relu: r.random_bool(0.5),
        window: None,
        quant,
        w1: (0..n_in * n_hidden).map(|_| r.random_range(-q..=q)).collect(),
        mult: (0..n_hidden).map(|_| random_raw(r, &f.multiplier)).collect(),
        bias: (0..n_hidden).map(|_| random_raw(r, &f.hidden)).collect(),
        w2: (0..n_hidden).map(|_| r.random_range(-q..=q)).collect(),
        out_mult: random_raw(r, &f.out_multiplier),
        out_bias: random_raw(r, &f.logit),
        formats,
        latency: LatencyModel::default(),
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---- finite-difference gradient check ----

/// Relative error with the denominator floored, so gradients that are
/// zero in exact arithmetic (a bias feeding batch-norm) are compared in
/// absolute terms instead of amplifying round-off.
pub const GRAD_DENOM_FLOOR: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-5;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_DENOM_FLOOR)
}

/// Worst relative error between analytic and central-difference gradients
/// for one random float instance.
pub fn gradient_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n_in = r.random_range(2..=8);
    let h = r.random_range(1..=4);
    let mut arch = MlpArch::new(n_in, h);
    arch.hidden_relu = r.random_bool(0.5);
    let mut m = MlpModel::zeros(arch);
    for v in [&mut m.w1, &mut m.b1, &mut m.w2, &mut m.bn.beta, &mut m.bn.mean] {
        v.iter_mut().for_each(|w| *w = r.random_range(-1.0..1.0));
    }
    m.bn.gamma.iter_mut().for_each(|w| *w = r.random_range(0.5..1.5));
    m.bn.var.iter_mut().for_each(|w| *w = r.random_range(0.5..1.5));
    m.b2 = r.random_range(-0.5..0.5);
    let batch = r.random_range(4..=16);
    let data: Vec<Vec<f64>> = (0..batch)
        .map(|_| (0..n_in).map(|_| r.random_range(-2.0..2.0)).collect())
        .collect();
    let rows: Vec<&[f64]> = data.iter().map(Vec::as_slice).collect();
    // both classes present
    let labels: Vec<State> = (0..batch)
        .map(|k| if k == 0 { State::Ground } else if k == 1 { State::Excited } else if r.random_bool(0.5) { State::Excited } else { State::Ground })
        .collect();
    let mode = if r.random_bool(0.5) { BnMode::Batch } else { BnMode::Frozen };
    let (_, g) = loss_and_gradients(&m, &rows, &labels, mode).unwrap();
    let loss = |p: &MlpModel| loss_and_gradients(p, &rows, &labels, mode).unwrap().0;

    let mut worst = 0.0f64;
    let mut check = |get: &dyn Fn(&mut MlpModel) -> &mut f64, analytic: f64| {
        let mut up = m.clone();
        *get(&mut up) += FD_STEP;
        let mut down = m.clone();
        *get(&mut down) -= FD_STEP;
        let numeric = (loss(&up) - loss(&down)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic, numeric));
    };
    for k in 0..m.w1.len() {
        check(&|p| &mut p.w1[k], g.w1[k]);
    }
    for i in 0..h {
        check(&|p| &mut p.b1[i], g.b1[i]);
        check(&|p| &mut p.bn.gamma[i], g.gamma[i]);
        check(&|p| &mut p.bn.beta[i], g.beta[i]);
        check(&|p| &mut p.w2[i], g.w2[i]);
    }
    check(&|p| &mut p.b2, g.b2);
    worst
}

// ---- physics ----

/// Chi-square goodness of fit of binned decay times against
/// `exp(-t/T1)`. `counts[b]` holds decays in `(edges[b], edges[b + 1]]`;
/// shots still excited after the last edge form one more bin. T1 is not
/// fitted, so dof = number of bins - 1. Returns `(chi2, dof, p)`.
pub fn decay_chi2(counts: &[u64], survivors: u64, edges: &[f64], t1: f64) -> (f64, usize, f64) {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    assert_eq!(edges.len(), counts.len() + 1);
    let n = (counts.iter().sum::<u64>() + survivors) as f64;
    let cdf = |t: f64| 1.0 - (-t / t1).exp();
    let mut observed: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    observed.push(survivors as f64);
    let mut expected: Vec<f64> = edges.windows(2).map(|e| n * (cdf(e[1]) - cdf(e[0]))).collect();
    expected.push(n * (1.0 - cdf(edges[edges.len() - 1])));
    let chi2: f64 = observed.iter().zip(&expected).map(|(o, e)| (o - e).powi(2) / e).sum();
    let dof = observed.len() - 1;
    let p = 1.0 - ChiSquared::new(dof as f64).unwrap().cdf(chi2);
    (chi2, dof, p)
}

/// Decay histogram of the qubits that start excited, read off the
/// per-sample true-state traces. Bin edges are every `stride` samples.
pub fn decay_histogram(set: &qread_core::ShotSet, stride: usize) -> (Vec<u64>, u64, Vec<f64>) {
    let dev = &set.device;
    let n = set.n_samples();
    let mut idx: Vec<usize> = (0..n).step_by(stride).collect();
    if *idx.last().unwrap() != n - 1 {
        idx.push(n - 1);
    }
    let edges: Vec<f64> = idx.iter().map(|&k| dev.sample_time(k)).collect();
    let mut counts = vec![0u64; idx.len() - 1];
    let mut survivors = 0;
    for s in &set.shots {
        let trace = s.true_state_trace(dev).expect("latent kept");
        if trace[0] != 1 {
            continue;
        }
        // first ground sample k: the decay fell in (t_{k-1}, t_k]
        match trace.iter().position(|&b| b == 0) {
            Some(k) => counts[idx.partition_point(|&e| e < k) - 1] += 1,
            None => survivors += 1,
        }
    }
    (counts, survivors, edges)
}

// ---- classifier IP ----

/// A trained-looking ternary net for a `window`-cycle capture.
pub fn ip_net(window: usize, seed: u64) -> FoldedNet {
    let mut r = rng(seed);
    let mut m = MlpModel::zeros(MlpArch::new(2 * window, 4));
    m.w1.iter_mut().for_each(|w| *w = r.random_range(-1e-3..1e-3));
    m.w2.iter_mut().for_each(|w| *w = r.random_range(-1.0..1.0));
    m.bn.mean.iter_mut().for_each(|w| *w = r.random_range(-1.0..1.0));
    m.bn.var.iter_mut().for_each(|w| *w = r.random_range(1.0..4.0));
    m.quant = QuantScheme::ternary();
    m.snap_to_grid();
    FoldedNet::from_model(&m).unwrap()
}

/// Cycle at which the first prediction becomes visible when the trigger
/// fires at `trigger_at` and a valid word arrives every cycle.
pub fn event_cycle(sim: &mut qread_core::IpSim, trigger_at: u64, word: u32) -> u64 {
    use qread_core::ip::CycleInputs;
    for _ in 0..1_000_000 {
        let c = sim.cycle();
        let e = sim
            .step(CycleInputs {
                trigger: c == trigger_at,
                in_valid: true,
                in_word: word,
            })
            .unwrap();
        if let Some(e) = e {
            return e.cycle;
        }
    }
    panic!("no prediction");
}

// ---- determinism ----

/// Serialized output of every pipeline stage for one seed, in order.
pub fn pipeline_fingerprint(seed: u64) -> Vec<(&'static str, Vec<u8>)> {
    use qread_core::baseline::{fit_matched_filter, fit_threshold, window_slice};
    use qread_core::dse::{self, DseSpec, Method};
    use qread_core::fxp::infer_batch;
    use qread_core::ip::replay;
    use qread_core::mlp::{init_model, train_qat, TrainConfig};
    use qread_core::physics::{calibrate_noise, synth_dataset};
    use qread_core::{dataset, DeviceParams, IpConfig, IpSim, NoiseModel, ReadoutWindow};

    let dev = DeviceParams::default();
    let w = ReadoutWindow::new(100, 400);
    let mut out: Vec<(&'static str, Vec<u8>)> = Vec::new();

    let cal = calibrate_noise(0.96, w, &dev, 600, seed).unwrap();
    out.push(("calibrate", json(&cal)));
    let set = synth_dataset(600, &dev, &NoiseModel::new(cal.sigma, seed)).unwrap();
    let mut bytes = Vec::new();
    dataset::encode(&set, &mut bytes).unwrap();
    out.push(("synthesize", bytes));
    let (tr, va, te) = dataset::split(&set, (0.7, 0.15, 0.15), seed).unwrap();
    let mut bytes = Vec::new();
    for part in [&tr, &va, &te] {
        dataset::encode(part, &mut bytes).unwrap();
    }
    out.push(("split", bytes));
    out.push(("threshold", json(&fit_threshold(&tr, w).unwrap())));
    out.push(("matched_filter", json(&fit_matched_filter(&tr, w).unwrap())));
    let cfg = TrainConfig {
        max_epochs: 3,
        batch_size: 128,
        seed,
        ..TrainConfig::default()
    };
    let m0 = init_model(MlpArch::new(800, 4), seed);
    let (m, hist) = train_qat(&m0, &tr, &va, w, &cfg, QuantScheme::ternary()).unwrap();
    out.push(("train", m.to_json().unwrap().into_bytes()));
    out.push(("history", json(&hist)));
    let net = FoldedNet::from_model(&m).unwrap();
    out.push(("fold", net.to_json().unwrap().into_bytes()));
    let rows: Vec<&[u16]> = te.shots.iter().map(|s| window_slice(s, w).unwrap()).collect();
    out.push(("infer", json(&infer_batch(&net, &rows, 0).unwrap())));
    let mut sim = IpSim::new(net, IpConfig::new(100, 400)).unwrap();
    let events = replay(&mut sim, &te).unwrap();
    out.push(("ip", format!("{events:?}").into_bytes()));
    let spec = DseSpec {
        starts: vec![50, 100],
        sizes: vec![200, 400],
        full_window: false,
        methods: vec![
            Method::Th,
            Method::Mf,
            Method::Nn {
                hidden: 2,
                quant: QuantScheme::ternary(),
            },
        ],
        seed,
        train: cfg,
        ..DseSpec::default()
    };
    let grid = dse::run_grid(&spec, &tr, &va, &te).unwrap().without_timing();
    let mut csv = Vec::new();
    dse::write_csv(&grid, &mut csv).unwrap();
    out.push(("dse", csv));
    out
}

fn json<T: serde::Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).unwrap()
}

/// One readout of `words` starting at the next cycle, trigger held for a
/// single cycle. Returns where the record went and what it holds.
fn one_readout(sim: &mut qread_core::IpSim, words: &[u32]) -> (usize, (u32, u32)) {
    use qread_core::ip::CycleInputs;
    let mut t = 0usize;
    loop {
        let inputs = CycleInputs {
            trigger: t == 0,
            in_valid: true,
            in_word: words.get(t).copied().unwrap_or(0),
        };
        t += 1;
        if let Some(e) = sim.step(inputs).unwrap() {
            return (e.index, e.record);
        }
    }
}

/// Property test of the circular prediction buffer: random readout
/// counts (most beyond one wrap), random data, an optional shallow or deep
/// reset part way. Panics on a counterexample; returns readouts simulated.
pub fn buffer_property(cases: u32) -> u64 {
    use proptest::prelude::*;
    use proptest::test_runner::{Config, TestRunner};
    use qread_core::ip::{pack_word, BUFFER_CAPACITY};
    use qread_core::{IpConfig, IpSim};

    let net = ip_net(1, 11);
    let total = std::cell::Cell::new(0u64);
    let mut runner = TestRunner::new(Config {
        cases,
        ..Config::default()
    });
    runner
        .run(
            &(2_500usize..40_000, any::<u64>(), prop::option::of(0usize..2_500)),
            |(n, seed, reset_at)| {
                let mut sim = IpSim::new(net.clone(), IpConfig::new(0, 1)).unwrap();
                let mut r = rng(seed);
                let mut stored: Vec<(u32, u32)> = Vec::new();
                for k in 0..n {
                    if Some(k) == reset_at {
                        sim.reset_classifier(0, BUFFER_CAPACITY - 1, r.random_bool(0.5)).unwrap();
                        stored.clear();
                    }
                    let w = pack_word(r.random_range(0..16384), r.random_range(0..16384)).unwrap();
                    let (index, rec) = one_readout(&mut sim, &[w]);
                    prop_assert_eq!(index, stored.len() % BUFFER_CAPACITY);
                    stored.push(rec);
                    prop_assert_eq!(sim.get_classifier_prediction(index).unwrap(), rec);
                }
                prop_assert_eq!(sim.get_classifier_prediction_count(), stored.len() as u64);
                // the newest min(count, capacity) records are all retrievable
                let keep = stored.len().min(BUFFER_CAPACITY);
                for k in stored.len() - keep..stored.len() {
                    prop_assert_eq!(sim.get_classifier_prediction(k % BUFFER_CAPACITY).unwrap(), stored[k]);
                }
                total.set(total.get() + n as u64);
                Ok(())
            },
        )
        .unwrap();
    total.get()
}
