//! `.qrds` shot files, CSV exchange and stratified splitting.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic        4 bytes  "QRDS"
//! version      u16      1
//! n_shots      u32
//! n_samples    u32
//! adc_bits     u8
//! flags        u8       bit0 = labels present
//! metadata_len u32
//! metadata     metadata_len bytes of UTF-8 JSON (device, noise)
//! per shot:    label u8, then n_samples x (I u16, Q u16)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::physics::{DeviceParams, NoiseModel, Shot, ShotSet, State};
use crate::rng;

pub const MAGIC: [u8; 4] = *b"QRDS";
pub const VERSION: u16 = 1;
pub const FLAG_LABELS: u8 = 0b1;
/// Fixed part of the header, before the metadata blob.
pub const FIXED_HEADER_LEN: u64 = 20;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic at offset 0: {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {version} at offset 4")]
    UnsupportedVersion { version: u16 },
    #[error("file truncated at offset {offset} (needed {needed} more bytes)")]
    TruncatedFile { offset: u64, needed: u64 },
    #[error("sample {value:#06x} at offset {offset} exceeds {adc_bits} bits")]
    SampleOutOfRange { offset: u64, value: u16, adc_bits: u32 },
    #[error("invalid header field at offset {offset}: {reason}")]
    BadHeader { offset: u64, reason: String },
    #[error("label byte {value} at offset {offset} is neither 0 nor 1")]
    BadLabel { offset: u64, value: u8 },
    #[error("file carries no labels; unlabeled sets are not supported")]
    Unlabeled,
    #[error("shot {index} is invalid: {reason}")]
    InvalidShot { index: usize, reason: String },
    #[error("split fractions must be positive and sum to 1, got {0:?}")]
    BadFractions((f64, f64, f64)),
    #[error("class {label:?} has {have} shots, fewer than the 3 split parts")]
    ClassTooSmall { label: State, have: usize },
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("CSV row {row}: {reason}")]
    BadCsv { row: usize, reason: String },
    #[error("metadata: {0}")]
    Metadata(#[from] serde_json::Error),
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    device: DeviceParams,
    noise: NoiseModel,
}

/// Parsed fixed header.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShotFileHeader {
    pub version: u16,
    pub n_shots: u32,
    pub n_samples: u32,
    pub adc_bits: u8,
    pub flags: u8,
    pub metadata_len: u32,
}

fn validate_for_write(set: &ShotSet) -> Result<(), DatasetError> {
    let n = set.n_samples();
    let bits = set.device.adc_bits;
    if !(2..=16).contains(&bits) {
        return Err(DatasetError::InvalidShot {
            index: 0,
            reason: format!("adc_bits {bits} outside [2, 16]"),
        });
    }
    if n == 0 {
        return Err(DatasetError::InvalidShot {
            index: 0,
            reason: "n_samples must be >= 1".into(),
        });
    }
    for (index, s) in set.shots.iter().enumerate() {
        if s.iq.len() != n {
            return Err(DatasetError::InvalidShot {
                index,
                reason: format!("{} samples, expected {n}", s.iq.len()),
            });
        }
        if let Some(k) = s.first_out_of_range(bits) {
            return Err(DatasetError::InvalidShot {
                index,
                reason: format!("sample {k} exceeds {bits} bits"),
            });
        }
    }
    Ok(())
}

/// Serialize `set` into `out`; returns the number of bytes written.
pub fn encode<W: Write>(set: &ShotSet, out: W) -> Result<u64, DatasetError> {
    validate_for_write(set)?;
    let mut out = BufWriter::new(out);
    let meta = serde_json::to_vec(&Metadata {
        device: set.device.clone(),
        noise: set.noise.clone(),
    })?;
    let n_samples = set.n_samples();
    out.write_all(&MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(set.shots.len() as u32).to_le_bytes())?;
    out.write_all(&(n_samples as u32).to_le_bytes())?;
    out.write_all(&[set.device.adc_bits as u8, FLAG_LABELS])?;
    out.write_all(&(meta.len() as u32).to_le_bytes())?;
    out.write_all(&meta)?;
    let mut buf = Vec::with_capacity(1 + 4 * n_samples);
    for s in &set.shots {
        buf.clear();
        buf.push(s.label.bit());
        for &[i, q] in &s.iq {
            buf.extend_from_slice(&i.to_le_bytes());
            buf.extend_from_slice(&q.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(FIXED_HEADER_LEN + meta.len() as u64 + set.shots.len() as u64 * (1 + 4 * n_samples as u64))
}

pub fn write_shots(path: impl AsRef<Path>, set: &ShotSet) -> Result<u64, DatasetError> {
    validate_for_write(set)?;
    encode(set, File::create(path)?)
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn take(&mut self, buf: &mut [u8]) -> Result<(), DatasetError> {
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    return Err(DatasetError::TruncatedFile {
                        offset: self.offset + filled as u64,
                        needed: (buf.len() - filled) as u64,
                    })
                }
                Ok(k) => filled += k,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u8(&mut self) -> Result<u8, DatasetError> {
        let mut b = [0u8; 1];
        self.take(&mut b)?;
        Ok(b[0])
    }

    fn u16(&mut self) -> Result<u16, DatasetError> {
        let mut b = [0u8; 2];
        self.take(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self) -> Result<u32, DatasetError> {
        let mut b = [0u8; 4];
        self.take(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
}

fn read_header<R: Read>(c: &mut Cursor<R>) -> Result<ShotFileHeader, DatasetError> {
    let mut magic = [0u8; 4];
    c.take(&mut magic)?;
    if magic != MAGIC {
        return Err(DatasetError::BadMagic(magic));
    }
    let version = c.u16()?;
    if version != VERSION {
        return Err(DatasetError::UnsupportedVersion { version });
    }
    let n_shots = c.u32()?;
    let n_samples = c.u32()?;
    if n_samples == 0 {
        return Err(DatasetError::BadHeader {
            offset: 10,
            reason: "n_samples must be >= 1".into(),
        });
    }
    let adc_bits = c.u8()?;
    if !(2..=16).contains(&adc_bits) {
        return Err(DatasetError::BadHeader {
            offset: 14,
            reason: format!("adc_bits {adc_bits} outside [2, 16]"),
        });
    }
    let flags = c.u8()?;
    let metadata_len = c.u32()?;
    Ok(ShotFileHeader {
        version,
        n_shots,
        n_samples,
        adc_bits,
        flags,
        metadata_len,
    })
}

/// Parse a `.qrds` stream, validating every sample against `adc_bits`.
pub fn decode<R: Read>(input: R) -> Result<ShotSet, DatasetError> {
    let mut c = Cursor {
        inner: BufReader::new(input),
        offset: 0,
    };
    let h = read_header(&mut c)?;
    if h.flags & FLAG_LABELS == 0 {
        return Err(DatasetError::Unlabeled);
    }
    let mut meta = vec![0u8; h.metadata_len as usize];
    c.take(&mut meta)?;
    let Metadata { mut device, noise } = serde_json::from_slice(&meta)?;
    device.n_samples = h.n_samples as usize;
    device.adc_bits = u32::from(h.adc_bits);
    let max = (1u32 << h.adc_bits) - 1;
    let n = h.n_samples as usize;
    let mut shots = Vec::with_capacity(h.n_shots as usize);
    let mut buf = vec![0u8; 4 * n];
    for _ in 0..h.n_shots {
        let label_offset = c.offset;
        let value = c.u8()?;
        let label = State::from_bit(value).ok_or(DatasetError::BadLabel {
            offset: label_offset,
            value,
        })?;
        let base = c.offset;
        c.take(&mut buf)?;
        let mut iq = Vec::with_capacity(n);
        for (k, chunk) in buf.chunks_exact(4).enumerate() {
            let i = u16::from_le_bytes([chunk[0], chunk[1]]);
            let q = u16::from_le_bytes([chunk[2], chunk[3]]);
            for (j, v) in [i, q].into_iter().enumerate() {
                if u32::from(v) > max {
                    return Err(DatasetError::SampleOutOfRange {
                        offset: base + 4 * k as u64 + 2 * j as u64,
                        value: v,
                        adc_bits: u32::from(h.adc_bits),
                    });
                }
            }
            iq.push([i, q]);
        }
        shots.push(Shot {
            label,
            latent: None,
            iq,
        });
    }
    Ok(ShotSet {
        device,
        noise,
        shots,
    })
}

pub fn read_shots(path: impl AsRef<Path>) -> Result<ShotSet, DatasetError> {
    decode(File::open(path)?)
}

/// CSV export: one row per shot, `label,I_0,Q_0,...,I_{n-1},Q_{n-1}`.
pub fn write_csv<W: Write>(set: &ShotSet, out: W) -> Result<(), DatasetError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    let mut row: Vec<String> = Vec::new();
    for s in &set.shots {
        row.clear();
        row.push(s.label.bit().to_string());
        row.extend(s.interleaved().iter().map(u16::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// CSV import. `device` supplies the physical metadata; its `n_samples`
/// is overwritten from the data.
pub fn read_csv<R: Read>(
    input: R,
    mut device: DeviceParams,
    noise: NoiseModel,
) -> Result<ShotSet, DatasetError> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let max = u32::from(device.max_code());
    let mut shots = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |reason: String| DatasetError::BadCsv { row, reason };
        if rec.len() < 3 || rec.len() % 2 == 0 {
            return Err(bad(format!("{} fields; expected 1 + 2n", rec.len())));
        }
        let label = rec[0]
            .trim()
            .parse::<u8>()
            .ok()
            .and_then(State::from_bit)
            .ok_or_else(|| bad(format!("label {:?}", &rec[0])))?;
        let codes = rec
            .iter()
            .skip(1)
            .map(|f| {
                f.trim()
                    .parse::<u32>()
                    .ok()
                    .filter(|&v| v <= max)
                    .map(|v| v as u16)
                    .ok_or_else(|| bad(format!("sample {f:?} is not a {}-bit code", device.adc_bits)))
            })
            .collect::<Result<Vec<u16>, _>>()?;
        let iq: Vec<[u16; 2]> = codes.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        if let Some(first) = shots.first().map(|s: &Shot| s.iq.len()) {
            if first != iq.len() {
                return Err(bad(format!("{} samples, expected {first}", iq.len())));
            }
        }
        shots.push(Shot {
            label,
            latent: None,
            iq,
        });
    }
    if let Some(s) = shots.first() {
        device.n_samples = s.iq.len();
    }
    Ok(ShotSet {
        device,
        noise,
        shots,
    })
}

/// Stratified split into train/validation/test.
pub fn split(
    set: &ShotSet,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(ShotSet, ShotSet, ShotSet), DatasetError> {
    let (a, b, c) = fractions;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(DatasetError::BadFractions(fractions));
    }
    let mut parts: [Vec<Vec<&Shot>>; 3] = Default::default();
    for label in State::BOTH {
        let mut idx: Vec<&Shot> = set.shots.iter().filter(|s| s.label == label).collect();
        let n = idx.len();
        if n < 3 {
            return Err(DatasetError::ClassTooSmall { label, have: n });
        }
        idx.shuffle(&mut rng::stream(seed, &[0x5EED, u64::from(label.bit())]));
        let n_train = ((a * n as f64).round() as usize).clamp(1, n - 2);
        let n_val = ((b * n as f64).round() as usize).clamp(1, n - n_train - 1);
        let (tr, rest) = idx.split_at(n_train);
        let (va, te) = rest.split_at(n_val);
        parts[0].push(tr.to_vec());
        parts[1].push(va.to_vec());
        parts[2].push(te.to_vec());
    }
    let build = |classes: &Vec<Vec<&Shot>>| {
        let longest = classes.iter().map(Vec::len).max().unwrap_or(0);
        let mut shots = Vec::new();
        for k in 0..longest {
            for class in classes {
                if let Some(s) = class.get(k) {
                    shots.push((*s).clone());
                }
            }
        }
        ShotSet {
            device: set.device.clone(),
            noise: set.noise.clone(),
            shots,
        }
    };
    Ok((build(&parts[0]), build(&parts[1]), build(&parts[2])))
}
