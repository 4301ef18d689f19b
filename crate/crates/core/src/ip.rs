//! Cycle-accurate model of the streaming classifier IP.
//!
//! One [`IpSim::step`] per clock. A rising trigger edge while idle starts a
//! readout: wait `readout_offset` cycles, capture `window_size` valid stream
//! words, compute for `compute_cycles`, store for `store_cycles`. The logit
//! pair lands in a 16 384-record circular buffer at the end of the last
//! storing cycle. The simulator adds timing only; values come straight from
//! [`infer_fxp`].

use std::fmt;
use std::io::Write;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::ReadoutWindow;
use crate::fxp::{infer_fxp, FoldedNet, FxpError, FxpOutput, INPUT_BITS};
use crate::physics::{ShotSet, State};

pub const BUFFER_CAPACITY: usize = 16_384;
/// Two 32-bit logit words per record.
pub const RECORD_BYTES: usize = 8;
pub const BUFFER_BYTES: usize = BUFFER_CAPACITY * RECORD_BYTES;

#[derive(Debug, Error)]
pub enum IpError {
    #[error("value {value:#x} does not fit in 14 bits")]
    ValueTooWide { value: u16 },
    #[error("buffer index {index} outside 0..{capacity}")]
    IndexOutOfRange { index: usize, capacity: usize },
    #[error("classifier busy ({phase})")]
    Busy { phase: Phase },
    #[error("window of {window} cycles gives {} features, network takes {n_in}", 2 * window)]
    ConfigMismatch { window: u32, n_in: usize },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("shot {shot} has {have} samples, readout needs {need}")]
    ShotTooShort { shot: usize, have: usize, need: usize },
    #[error(transparent)]
    Fxp(#[from] FxpError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const LANE_MASK: u32 = (1 << INPUT_BITS) - 1;

/// I in bits 13:0, Q in bits 29:16, zero padding elsewhere.
pub fn pack_word(i: u16, q: u16) -> Result<u32, IpError> {
    for v in [i, q] {
        if u32::from(v) > LANE_MASK {
            return Err(IpError::ValueTooWide { value: v });
        }
    }
    Ok(u32::from(i) | (u32::from(q) << 16))
}

/// Inverse of [`pack_word`]; padding bits are ignored.
pub fn unpack_word(w: u32) -> (u16, u16) {
    ((w & LANE_MASK) as u16, ((w >> 16) & LANE_MASK) as u16)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IpConfig {
    pub readout_offset: u32,
    pub window_size: u32,
    pub scaling_factor: u32,
    #[serde(default)]
    pub debug: bool,
}

impl IpConfig {
    pub fn new(readout_offset: u32, window_size: u32) -> Self {
        IpConfig {
            readout_offset,
            window_size,
            scaling_factor: 0,
            debug: false,
        }
    }

    pub fn validate(&self) -> Result<(), IpError> {
        if self.window_size < 1 {
            return Err(IpError::BadConfig("window_size must be >= 1".into()));
        }
        if self.scaling_factor > INPUT_BITS - 1 {
            return Err(IpError::BadConfig(format!(
                "scaling_factor {} outside [0, {}]",
                self.scaling_factor,
                INPUT_BITS - 1
            )));
        }
        Ok(())
    }

    /// The slice of a trace this configuration captures when the stream
    /// starts on the trigger cycle.
    pub fn window(&self) -> ReadoutWindow {
        ReadoutWindow::new(self.readout_offset as usize, self.window_size as usize)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Idle,
    Waiting { remaining: u32 },
    Loading { captured: u32 },
    Inferring { remaining: u32 },
    Storing { remaining: u32 },
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Idle => f.write_str("idle"),
            Phase::Waiting { remaining } => write!(f, "waiting({remaining})"),
            Phase::Loading { captured } => write!(f, "loading({captured})"),
            Phase::Inferring { remaining } => write!(f, "inferring({remaining})"),
            Phase::Storing { remaining } => write!(f, "storing({remaining})"),
        }
    }
}

/// Stored logit words, two's complement.
pub type Record = (u32, u32);

fn record_of(out: &FxpOutput) -> Record {
    (out.logit as i32 as u32, out.neg_logit as i32 as u32)
}

/// Decision encoded by a stored record.
pub fn record_decision(r: Record) -> State {
    if r.0 as i32 >= 0 {
        State::Excited
    } else {
        State::Ground
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictionBuffer {
    records: Vec<Record>,
    total_count: u64,
}

impl Default for PredictionBuffer {
    fn default() -> Self {
        PredictionBuffer {
            records: vec![(0, 0); BUFFER_CAPACITY],
            total_count: 0,
        }
    }
}

impl PredictionBuffer {
    pub fn write_index(&self) -> usize {
        (self.total_count % BUFFER_CAPACITY as u64) as usize
    }

    pub fn total_count(&self) -> u64 {
        self.total_count
    }

    fn push(&mut self, r: Record) -> usize {
        let i = self.write_index();
        self.records[i] = r;
        self.total_count += 1;
        i
    }

    pub fn get(&self, index: usize) -> Result<Record, IpError> {
        self.records.get(index).copied().ok_or(IpError::IndexOutOfRange {
            index,
            capacity: BUFFER_CAPACITY,
        })
    }
}

/// Interface levels sampled in one cycle.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CycleInputs {
    pub trigger: bool,
    pub in_valid: bool,
    pub in_word: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PredictionEvent {
    /// First cycle at which the record is visible in the buffer.
    pub cycle: u64,
    pub index: usize,
    pub record: Record,
    pub output: FxpOutput,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRow {
    pub cycle: u64,
    pub trigger: bool,
    pub in_valid: bool,
    pub in_word: u32,
    pub phase: Phase,
    pub event: bool,
}

#[derive(Clone, Debug)]
pub struct IpSim {
    net: FoldedNet,
    config: IpConfig,
    phase: Phase,
    buffer: PredictionBuffer,
    cycle: u64,
    last_trigger: bool,
    captured: Vec<u16>,
    pending: Option<FxpOutput>,
    log: Vec<String>,
    trace: Option<Vec<TraceRow>>,
}

impl IpSim {
    pub fn new(net: FoldedNet, config: IpConfig) -> Result<Self, IpError> {
        net.validate()?;
        if net.formats.logit.total_bits > 32 {
            return Err(IpError::BadConfig(format!(
                "logit format is {} bits, stored words hold 32",
                net.formats.logit.total_bits
            )));
        }
        let mut sim = IpSim {
            net,
            config,
            phase: Phase::Idle,
            buffer: PredictionBuffer::default(),
            cycle: 0,
            last_trigger: false,
            captured: Vec::new(),
            pending: None,
            log: Vec::new(),
            trace: None,
        };
        sim.configure_classifier(config)?;
        Ok(sim)
    }

    pub fn config(&self) -> IpConfig {
        self.config
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    pub fn buffer(&self) -> &PredictionBuffer {
        &self.buffer
    }

    pub fn net(&self) -> &FoldedNet {
        &self.net
    }

    /// Transition log, filled while `config.debug` is set.
    pub fn debug_log(&self) -> &[String] {
        &self.log
    }

    /// Start recording one [`TraceRow`] per cycle.
    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> &[TraceRow] {
        self.trace.as_deref().unwrap_or(&[])
    }

    fn enter(&mut self, next: Phase) {
        if self.config.debug {
            self.log
                .push(format!("cycle {}: {} -> {}", self.cycle, self.phase, next));
        }
        self.phase = next;
    }

    fn finish_loading(&mut self) -> Result<(), IpError> {
        let out = infer_fxp(&self.net, &self.captured, self.config.scaling_factor)?;
        self.pending = Some(out);
        self.captured.clear();
        self.enter(Phase::Inferring {
            remaining: self.net.latency.compute_cycles,
        });
        Ok(())
    }

    fn store(&mut self) -> PredictionEvent {
        let output = self.pending.take().expect("inference precedes storage");
        let record = record_of(&output);
        let index = self.buffer.push(record);
        self.enter(Phase::Idle);
        PredictionEvent {
            cycle: self.cycle + 1,
            index,
            record,
            output,
        }
    }

    /// Advance one clock cycle.
    pub fn step(&mut self, inputs: CycleInputs) -> Result<Option<PredictionEvent>, IpError> {
        let rising = inputs.trigger && !self.last_trigger;
        self.last_trigger = inputs.trigger;
        let mut event = None;

        if self.phase == Phase::Idle && rising {
            self.enter(Phase::Waiting {
                remaining: self.config.readout_offset,
            });
        }
        if let Phase::Waiting { remaining: 0 } = self.phase {
            self.enter(Phase::Loading { captured: 0 });
        }
        match self.phase {
            Phase::Idle => {}
            Phase::Waiting { remaining } => {
                let remaining = remaining - 1;
                if remaining == 0 {
                    self.enter(Phase::Loading { captured: 0 });
                } else {
                    self.phase = Phase::Waiting { remaining };
                }
            }
            Phase::Loading { captured } => {
                if inputs.in_valid {
                    let (i, q) = unpack_word(inputs.in_word);
                    self.captured.extend([i, q]);
                    let captured = captured + 1;
                    self.phase = Phase::Loading { captured };
                    if captured == self.config.window_size {
                        self.finish_loading()?;
                    }
                }
            }
            Phase::Inferring { remaining } => {
                let remaining = remaining - 1;
                if remaining > 0 {
                    self.phase = Phase::Inferring { remaining };
                } else if self.net.latency.store_cycles == 0 {
                    event = Some(self.store());
                } else {
                    self.enter(Phase::Storing {
                        remaining: self.net.latency.store_cycles,
                    });
                }
            }
            Phase::Storing { remaining } => {
                let remaining = remaining - 1;
                if remaining > 0 {
                    self.phase = Phase::Storing { remaining };
                } else {
                    event = Some(self.store());
                }
            }
        }

        if let Some(t) = self.trace.as_mut() {
            t.push(TraceRow {
                cycle: self.cycle,
                trigger: inputs.trigger,
                in_valid: inputs.in_valid,
                in_word: inputs.in_word,
                phase: self.phase,
                event: event.is_some(),
            });
        }
        self.cycle += 1;
        Ok(event)
    }

    /// Clear the counters and return to idle; a deep reset also zeroes the
    /// records in `[index_lo, index_hi]`.
    pub fn reset_classifier(&mut self, index_lo: usize, index_hi: usize, deep: bool) -> Result<(), IpError> {
        for index in [index_lo, index_hi] {
            if index >= BUFFER_CAPACITY {
                return Err(IpError::IndexOutOfRange {
                    index,
                    capacity: BUFFER_CAPACITY,
                });
            }
        }
        if index_lo > index_hi {
            return Err(IpError::BadConfig(format!(
                "reset range {index_lo}..={index_hi} is empty"
            )));
        }
        if deep {
            self.buffer.records[index_lo..=index_hi].fill((0, 0));
        }
        self.buffer.total_count = 0;
        self.captured.clear();
        self.pending = None;
        self.enter(Phase::Idle);
        if self.config.debug {
            self.log.push(format!(
                "reset [{index_lo}, {index_hi}]{}",
                if deep { " deep" } else { "" }
            ));
        }
        Ok(())
    }

    pub fn configure_classifier(&mut self, cfg: IpConfig) -> Result<(), IpError> {
        if self.phase != Phase::Idle {
            return Err(IpError::Busy { phase: self.phase });
        }
        cfg.validate()?;
        if 2 * cfg.window_size as usize != self.net.n_in {
            return Err(IpError::ConfigMismatch {
                window: cfg.window_size,
                n_in: self.net.n_in,
            });
        }
        self.config = cfg;
        if cfg.debug {
            self.log.push(format!("configure {cfg:?}"));
        }
        Ok(())
    }

    pub fn get_classifier_prediction_count(&self) -> u64 {
        self.buffer.total_count
    }

    pub fn get_classifier_prediction(&self, index: usize) -> Result<Record, IpError> {
        self.buffer.get(index)
    }

    pub fn get_classifier_predictions(&self, range: RangeInclusive<usize>) -> Result<Vec<Record>, IpError> {
        range.map(|i| self.buffer.get(i)).collect()
    }

    /// One line per record: index, both logits as reals, decision.
    pub fn print_classifier_buffer(&self, range: RangeInclusive<usize>) -> Result<String, IpError> {
        let fmt = self.net.formats.logit;
        let mut s = String::new();
        for i in range {
            let r = self.buffer.get(i)?;
            let d = match record_decision(r) {
                State::Ground => 'g',
                State::Excited => 'e',
            };
            s.push_str(&format!(
                "{i:5} {:>14.6} {:>14.6} {d}\n",
                fmt.to_f64(i64::from(r.0 as i32)),
                fmt.to_f64(i64::from(r.1 as i32))
            ));
        }
        Ok(s)
    }

    /// Per-cycle waveform CSV of the recorded trace.
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<(), IpError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["cycle", "trigger", "in_valid", "in_word", "phase", "event"])?;
        for r in self.trace() {
            w.write_record([
                r.cycle.to_string(),
                u8::from(r.trigger).to_string(),
                u8::from(r.in_valid).to_string(),
                format!("{:08x}", r.in_word),
                r.phase.to_string(),
                u8::from(r.event).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Play every shot of `set` through the simulator: trigger on the first
/// cycle of each readout and stream its samples, one word per cycle.
pub fn replay(sim: &mut IpSim, set: &ShotSet) -> Result<Vec<PredictionEvent>, IpError> {
    let cfg = sim.config();
    let need = (cfg.readout_offset + cfg.window_size) as usize;
    let mut events = Vec::with_capacity(set.len());
    for (k, shot) in set.shots.iter().enumerate() {
        let n = shot.n_samples();
        if n < need {
            return Err(IpError::ShotTooShort { shot: k, have: n, need });
        }
        // Let a held trigger drop so the next edge registers.
        if sim.last_trigger {
            sim.step(CycleInputs::default())?;
        }
        let mut t = 0usize;
        loop {
            let inputs = if t < n {
                CycleInputs {
                    trigger: t == 0,
                    in_valid: true,
                    in_word: pack_word(shot.iq[t][0], shot.iq[t][1])?,
                }
            } else {
                CycleInputs::default()
            };
            t += 1;
            if let Some(e) = sim.step(inputs)? {
                events.push(e);
                break;
            }
        }
    }
    Ok(events)
}
