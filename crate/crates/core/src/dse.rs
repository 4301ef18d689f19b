//! Readout-window design-space exploration: every (start, size) cell of a
//! grid, every method, a number of replicate seeds.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::{self, ReadoutWindow};
use crate::mlp::{self, MlpArch, QuantScheme, TrainConfig};
use crate::physics::ShotSet;
use crate::rng;

#[derive(Debug, Error)]
pub enum DseError {
    #[error("no records for method {0}")]
    EmptyResult(String),
    #[error("invalid grid: {0}")]
    BadSpec(String),
    #[error("data sets disagree: {0}")]
    Data(String),
    #[error("unknown method {0:?}")]
    BadMethod(String),
    #[error("CSV row {row}: {reason}")]
    BadCsv { row: usize, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Method {
    Th,
    Mf,
    Nn { hidden: usize, quant: QuantScheme },
}

impl Method {
    /// Trainable parameters for a window of `size` cycles.
    pub fn parameter_count(&self, size: usize) -> usize {
        match *self {
            // Projection axis (2 components) and threshold.
            Method::Th => 3,
            Method::Mf => 2 * size + 1,
            Method::Nn { hidden, .. } => MlpArch::new(2 * size, hidden).parameter_count(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Th => f.write_str("TH"),
            Method::Mf => f.write_str("MF"),
            Method::Nn { hidden, quant } => write!(f, "NN{hidden}:{quant}"),
        }
    }
}

impl FromStr for Method {
    type Err = DseError;

    /// `TH`, `MF` or `NN<hidden>:<quant>`, e.g. `NN4:ternary`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DseError::BadMethod(s.to_string());
        match s {
            "TH" => Ok(Method::Th),
            "MF" => Ok(Method::Mf),
            _ => {
                let rest = s.strip_prefix("NN").ok_or_else(bad)?;
                let (h, q) = rest.split_once(':').ok_or_else(bad)?;
                Ok(Method::Nn {
                    hidden: h.parse().map_err(|_| bad())?,
                    quant: q.parse().map_err(|_| bad())?,
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DseSpec {
    pub starts: Vec<usize>,
    pub sizes: Vec<usize>,
    /// Add a cell per start covering the rest of the trace.
    pub full_window: bool,
    pub methods: Vec<Method>,
    pub replicate_seeds: usize,
    pub seed: u64,
    /// Network training inside each cell.
    pub train: TrainConfig,
}

impl Default for DseSpec {
    fn default() -> Self {
        DseSpec {
            starts: (0..=350).step_by(50).collect(),
            sizes: (50..=700).step_by(50).collect(),
            full_window: true,
            methods: vec![
                Method::Th,
                Method::Mf,
                Method::Nn {
                    hidden: 4,
                    quant: QuantScheme::ternary(),
                },
            ],
            replicate_seeds: 1,
            seed: 0,
            train: TrainConfig {
                max_epochs: 10,
                ..TrainConfig::default()
            },
        }
    }
}

/// One grid cell before feasibility is known. `size == None` is the
/// full-window cell.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Cell {
    start: usize,
    size: Option<usize>,
    method_index: usize,
    method: Method,
    replicate: usize,
}

impl DseSpec {
    pub fn validate(&self) -> Result<(), DseError> {
        if self.starts.is_empty() || (self.sizes.is_empty() && !self.full_window) {
            return Err(DseError::BadSpec("no starts or sizes".into()));
        }
        if self.methods.is_empty() || self.replicate_seeds == 0 {
            return Err(DseError::BadSpec("need at least one method and one seed".into()));
        }
        if self.sizes.contains(&0) {
            return Err(DseError::BadSpec("window sizes must be >= 1".into()));
        }
        Ok(())
    }

    /// Nominal number of (start, size) cells.
    pub fn n_windows(&self) -> usize {
        self.starts.len() * (self.sizes.len() + usize::from(self.full_window))
    }

    fn cells(&self) -> Vec<Cell> {
        let mut sizes: Vec<Option<usize>> = self.sizes.iter().copied().map(Some).collect();
        if self.full_window {
            sizes.push(None);
        }
        let mut cells = Vec::new();
        for &start in &self.starts {
            for &size in &sizes {
                for (method_index, &method) in self.methods.iter().enumerate() {
                    for replicate in 0..self.replicate_seeds {
                        cells.push(Cell {
                            start,
                            size,
                            method_index,
                            method,
                            replicate,
                        });
                    }
                }
            }
        }
        cells
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DseRecord {
    pub start: usize,
    pub size: usize,
    pub method: Method,
    /// Replicate index.
    pub seed: usize,
    pub fidelity: f64,
    pub sem: f64,
    pub params: usize,
    pub wall_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedCell {
    pub start: usize,
    /// `None` for a full-window cell that has no samples left.
    pub size: Option<usize>,
    pub method: Method,
    pub seed: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DseResult {
    pub records: Vec<DseRecord>,
    pub skipped: Vec<SkippedCell>,
}

impl DseResult {
    /// Copy with wall times zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> DseResult {
        let mut r = self.clone();
        r.records.iter_mut().for_each(|x| x.wall_s = 0.0);
        r
    }

    /// Mean fidelity over replicates, keyed by (start, size).
    pub fn mean_fidelity(&self, method: Method) -> BTreeMap<(usize, usize), f64> {
        let mut acc: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.method == method) {
            let e = acc.entry((r.start, r.size)).or_default();
            e.0 += r.fidelity;
            e.1 += 1;
        }
        acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }
}

fn run_cell(
    cell: &Cell,
    spec: &DseSpec,
    train: &ShotSet,
    val: &ShotSet,
    test: &ShotSet,
) -> Result<DseRecord, SkippedCell> {
    let n = train.n_samples();
    let skip = |size: Option<usize>, reason: String| SkippedCell {
        start: cell.start,
        size,
        method: cell.method,
        seed: cell.replicate,
        reason,
    };
    let size = match cell.size {
        Some(s) => s,
        None if cell.start < n => n - cell.start,
        None => return Err(skip(None, format!("start {} leaves no samples of {n}", cell.start))),
    };
    if cell.start + size > n {
        return Err(skip(
            Some(size),
            format!("window {}:{} exceeds {n} samples", cell.start, size),
        ));
    }
    let w = ReadoutWindow::new(cell.start, size);
    let t0 = Instant::now();
    let report = match cell.method {
        Method::Th => baseline::fit_threshold(train, w)
            .and_then(|m| baseline::evaluate(&m, test))
            .map_err(|e| e.to_string()),
        Method::Mf => baseline::fit_matched_filter(train, w)
            .and_then(|m| baseline::evaluate(&m, test))
            .map_err(|e| e.to_string()),
        Method::Nn { hidden, quant } => {
            let seed = rng::derive_seed(
                spec.seed,
                &[cell.start as u64, size as u64, cell.method_index as u64, cell.replicate as u64],
            );
            let cfg = TrainConfig {
                seed,
                ..spec.train.clone()
            };
            let m0 = mlp::init_model(MlpArch::new(2 * size, hidden), seed);
            mlp::train_qat(&m0, train, val, w, &cfg, quant)
                .and_then(|(m, _)| mlp::evaluate(&m, test, w))
                .map_err(|e| e.to_string())
        }
    }
    .map_err(|reason| skip(Some(size), reason))?;
    Ok(DseRecord {
        start: cell.start,
        size,
        method: cell.method,
        seed: cell.replicate,
        fidelity: report.fidelity,
        sem: report.sem_fidelity,
        params: cell.method.parameter_count(size),
        wall_s: t0.elapsed().as_secs_f64(),
    })
}

/// Fit/train on `train` (networks early-stop on `val`) and score on `test`
/// for every cell. Cells run in parallel; a failing cell is recorded as
/// skipped with its error rather than aborting the grid.
pub fn run_grid(spec: &DseSpec, train: &ShotSet, val: &ShotSet, test: &ShotSet) -> Result<DseResult, DseError> {
    spec.validate()?;
    let n = train.n_samples();
    if val.n_samples() != n || test.n_samples() != n {
        return Err(DseError::Data(format!(
            "sample counts {}, {}, {}",
            n,
            val.n_samples(),
            test.n_samples()
        )));
    }
    let outcomes: Vec<Result<DseRecord, SkippedCell>> = spec
        .cells()
        .par_iter()
        .map(|c| run_cell(c, spec, train, val, test))
        .collect();
    let mut result = DseResult::default();
    for o in outcomes {
        match o {
            Ok(r) => result.records.push(r),
            Err(s) => result.skipped.push(s),
        }
    }
    Ok(result)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestCell {
    pub start: usize,
    pub size: usize,
    pub fidelity: f64,
}

/// Highest replicate-mean fidelity; ties go to the smaller window, then
/// the earlier start.
pub fn best_config(result: &DseResult, method: Method) -> Result<BestCell, DseError> {
    result
        .mean_fidelity(method)
        .into_iter()
        .map(|((start, size), fidelity)| BestCell { start, size, fidelity })
        .reduce(|best, c| {
            let better = c.fidelity > best.fidelity
                || (c.fidelity == best.fidelity
                    && (c.size, c.start) < (best.size, best.start));
            if better {
                c
            } else {
                best
            }
        })
        .ok_or_else(|| DseError::EmptyResult(method.to_string()))
}

pub const CSV_HEADER: [&str; 8] = ["start", "size", "method", "seed", "fidelity", "sem", "params", "wall_s"];

pub fn write_csv<W: Write>(result: &DseResult, out: W) -> Result<(), DseError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in &result.records {
        w.write_record([
            r.start.to_string(),
            r.size.to_string(),
            r.method.to_string(),
            r.seed.to_string(),
            r.fidelity.to_string(),
            r.sem.to_string(),
            r.params.to_string(),
            r.wall_s.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<DseRecord>, DseError> {
    let mut rd = csv::Reader::from_reader(input);
    if rd.headers()?.iter().ne(CSV_HEADER) {
        return Err(DseError::BadCsv {
            row: 0,
            reason: format!("expected header {}", CSV_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for (k, rec) in rd.records().enumerate() {
        let rec = rec?;
        let row = k + 1;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let bad = |what: &str| DseError::BadCsv {
            row,
            reason: format!("bad {what}"),
        };
        out.push(DseRecord {
            start: field(0).parse().map_err(|_| bad("start"))?,
            size: field(1).parse().map_err(|_| bad("size"))?,
            method: field(2).parse()?,
            seed: field(3).parse().map_err(|_| bad("seed"))?,
            fidelity: field(4).parse().map_err(|_| bad("fidelity"))?,
            sem: field(5).parse().map_err(|_| bad("sem"))?,
            params: field(6).parse().map_err(|_| bad("params"))?,
            wall_s: field(7).parse().map_err(|_| bad("wall_s"))?,
        });
    }
    Ok(out)
}

#[derive(Serialize)]
struct PlotPoint {
    start: usize,
    size: usize,
    fidelity: f64,
}

/// Replicate-mean fidelity per method over (start, size), as JSON.
pub fn plot_data_json(result: &DseResult) -> String {
    let mut methods: Vec<Method> = Vec::new();
    for r in &result.records {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    let data: BTreeMap<String, Vec<PlotPoint>> = methods
        .into_iter()
        .map(|m| {
            let pts = result
                .mean_fidelity(m)
                .into_iter()
                .map(|((start, size), fidelity)| PlotPoint { start, size, fidelity })
                .collect();
            (m.to_string(), pts)
        })
        .collect();
    serde_json::to_string_pretty(&data).expect("plot data serializes")
}
