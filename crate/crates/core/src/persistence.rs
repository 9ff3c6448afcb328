//! Binary array container, JSON sidecars and CSV result tables.
//!
//! Container layout (all integers little-endian):
//!
//! | bytes        | field                                              |
//! |--------------|----------------------------------------------------|
//! | 0..4         | magic `UDIG`                                       |
//! | 4            | version (`1`)                                      |
//! | 5            | dtype code: 0 = f32, 1 = f64, 2 = u8               |
//! | 6            | ndim                                               |
//! | 7..7+4*ndim  | shape, one `u32` per axis                          |
//! | rest         | row-major payload                                  |

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"UDIG";
pub const VERSION: u8 = 1;

/// Element type of a stored array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
    U8,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
            Dtype::U8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            2 => Ok(Dtype::U8),
            other => Err(Error::UnsupportedDtype(other)),
        }
    }

    pub fn element_size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "float32",
            Dtype::F64 => "float64",
            Dtype::U8 => "uint8",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl ArrayData {
    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            ArrayData::F32(_) => Dtype::F32,
            ArrayData::F64(_) => Dtype::F64,
            ArrayData::U8(_) => Dtype::U8,
        }
    }
}

/// An n-dimensional row-major array with its element type.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseArray {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl DenseArray {
    pub fn new(shape: Vec<usize>, data: ArrayData) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(&[n], &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, ArrayData::F32(data))
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(shape, ArrayData::F64(data))
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    /// Element values widened to `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            ArrayData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::F64(v) => v.clone(),
            ArrayData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    fn is_finite(&self) -> bool {
        match &self.data {
            ArrayData::F32(v) => v.iter().all(|x| x.is_finite()),
            ArrayData::F64(v) => v.iter().all(|x| x.is_finite()),
            ArrayData::U8(_) => true,
        }
    }
}

/// Serializes an array into container bytes.
pub fn encode_array(array: &DenseArray) -> Result<Vec<u8>> {
    if array.shape.len() > u8::MAX as usize {
        return Err(Error::invalid("too many dimensions"));
    }
    let mut out = Vec::with_capacity(7 + 4 * array.shape.len() + array.data.len() * array.dtype().element_size());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(array.dtype().code());
    out.push(array.shape.len() as u8);
    for &d in &array.shape {
        let d = u32::try_from(d).map_err(|_| Error::invalid("axis length exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match &array.data {
        ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        ArrayData::U8(v) => out.extend_from_slice(v),
    }
    Ok(out)
}

/// Parses container bytes. Never panics on malformed input.
pub fn decode_array(bytes: &[u8]) -> Result<DenseArray> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedHeader);
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 7 {
        return Err(Error::TruncatedHeader);
    }
    if bytes[4] != VERSION {
        return Err(Error::VersionMismatch(bytes[4]));
    }
    let dtype = Dtype::from_code(bytes[5])?;
    let ndim = bytes[6] as usize;
    let header_len = 7 + 4 * ndim;
    if bytes.len() < header_len {
        return Err(Error::TruncatedHeader);
    }
    let shape: Vec<usize> = bytes[7..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::invalid("shape product overflows"))?;
    let expected = count
        .checked_mul(dtype.element_size())
        .ok_or_else(|| Error::invalid("payload size overflows"))?;
    let payload = &bytes[header_len..];
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::TrailingBytes {
            expected,
            found: payload.len(),
        });
    }
    let data = match dtype {
        Dtype::F32 => ArrayData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        Dtype::F64 => ArrayData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect(),
        ),
        Dtype::U8 => ArrayData::U8(payload.to_vec()),
    };
    Ok(DenseArray { shape, data })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub description: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_array(path: impl AsRef<Path>, data: &DenseArray) -> Result<()> {
    save_array_described(path, data, "")
}

/// Writes the container plus a `<path>.json` sidecar carrying `description`.
pub fn save_array_described(path: impl AsRef<Path>, data: &DenseArray, description: &str) -> Result<()> {
    let path = path.as_ref();
    if !data.is_finite() {
        return Err(Error::NonFinite);
    }
    let bytes = encode_array(data)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let sidecar = Sidecar {
        dtype: data.dtype().name().to_string(),
        shape: data.shape.clone(),
        description: description.to_string(),
    };
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(side, e))?;
    Ok(())
}

pub fn load_array(path: impl AsRef<Path>) -> Result<DenseArray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_array(&bytes)
}

pub fn load_sidecar(path: impl AsRef<Path>) -> Result<Sidecar> {
    let side = sidecar_path(path.as_ref());
    let bytes = fs::read(&side).map_err(|e| Error::io(&side, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Writes any serializable value as pretty JSON.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "MRI", alias = "mri")]
    Mri,
    #[serde(rename = "CT", alias = "ct")]
    Ct,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Mri => "MRI",
            Task::Ct => "CT",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "MRI" | "mri" => Ok(Task::Mri),
            "CT" | "ct" => Ok(Task::Ct),
            other => Err(Error::invalid(format!("unknown task {other:?}"))),
        }
    }
}

/// One aggregated line of a results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub task: Task,
    pub setting: String,
    pub method: String,
    pub psnr_mean_db: f64,
    pub psnr_std_db: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub runtime_minutes: f64,
}

impl ResultRow {
    pub fn validate(&self) -> Result<()> {
        if !(self.psnr_std_db >= 0.0) {
            return Err(Error::invalid(format!("negative PSNR std in row {}", self.method)));
        }
        if !(0.0..=1.0).contains(&self.ssim_mean) {
            return Err(Error::invalid(format!("SSIM mean outside [0,1] in row {}", self.method)));
        }
        Ok(())
    }
}

pub const RESULTS_HEADER: [&str; 8] = [
    "task",
    "setting",
    "method",
    "psnr_mean_db",
    "psnr_std_db",
    "ssim_mean",
    "ssim_std",
    "runtime_minutes",
];

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::invalid(format!("csv error in {}: {other:?}", path.display())),
    }
}

/// Renders rows as CSV text with four-decimal floats.
pub fn results_csv_string(rows: &[ResultRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::invalid("results table has no rows"));
    }
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::invalid(format!("csv encode: {e}"));
    w.write_record(RESULTS_HEADER).map_err(to_err)?;
    for row in rows {
        row.validate()?;
        w.write_record([
            row.task.to_string(),
            row.setting.clone(),
            row.method.clone(),
            format!("{:.4}", row.psnr_mean_db),
            format!("{:.4}", row.psnr_std_db),
            format!("{:.4}", row.ssim_mean),
            format!("{:.4}", row.ssim_std),
            format!("{:.4}", row.runtime_minutes),
        ])
        .map_err(to_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv flush: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_results_csv(rows: &[ResultRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = results_csv_string(rows)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses results CSV text produced by [`results_csv_string`].
pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let headers = r
        .headers()
        .map_err(|e| Error::invalid(format!("csv header: {e}")))?
        .clone();
    if headers.iter().ne(RESULTS_HEADER.iter().copied()) {
        return Err(Error::invalid("unexpected results header"));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::invalid(format!("csv record: {e}")))?;
        if rec.len() != RESULTS_HEADER.len() {
            return Err(Error::invalid("wrong field count"));
        }
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad number in column {}", RESULTS_HEADER[i])))
        };
        rows.push(ResultRow {
            task: rec[0].parse()?,
            setting: rec[1].to_string(),
            method: rec[2].to_string(),
            psnr_mean_db: num(3)?,
            psnr_std_db: num(4)?,
            ssim_mean: num(5)?,
            ssim_std: num(6)?,
            runtime_minutes: num(7)?,
        });
    }
    Ok(rows)
}

pub fn read_results_csv(path: impl AsRef<Path>) -> Result<Vec<ResultRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_results_csv(&text)
}

/// Per-iteration trace columns written next to every reconstruction.
pub fn write_trace_csv(
    path: impl AsRef<Path>,
    iterations: &[usize],
    psnr_db: &[f64],
    ssim: &[f64],
    data_loss: &[f64],
) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    w.write_record(TRACE_HEADER)
        .map_err(|e| csv_err(path, e))?;
    for i in 0..iterations.len() {
        w.write_record([
            iterations[i].to_string(),
            format!("{:.6}", psnr_db[i]),
            format!("{:.6}", ssim[i]),
            format!("{:.6e}", data_loss[i]),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trace columns as read back from disk.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceColumns {
    pub iterations: Vec<usize>,
    pub psnr_db: Vec<f64>,
    pub ssim: Vec<f64>,
    pub data_loss: Vec<f64>,
}

pub const TRACE_HEADER: [&str; 4] = ["iteration", "psnr_db", "ssim", "data_loss"];

/// Parses trace CSV text produced by [`write_trace_csv`].
pub fn parse_trace_csv(text: &str) -> Result<TraceColumns> {
    let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let headers = r
        .headers()
        .map_err(|e| Error::invalid(format!("csv header: {e}")))?
        .clone();
    if headers.iter().ne(TRACE_HEADER.iter().copied()) {
        return Err(Error::invalid("unexpected trace header"));
    }
    let mut out = TraceColumns::default();
    for (line, rec) in r.records().enumerate() {
        let bad = || Error::invalid(format!("malformed trace row {}", line + 1));
        let rec = rec.map_err(|_| bad())?;
        if rec.len() != TRACE_HEADER.len() {
            return Err(bad());
        }
        out.iterations.push(rec[0].parse().map_err(|_| bad())?);
        out.psnr_db.push(rec[1].parse().map_err(|_| bad())?);
        out.ssim.push(rec[2].parse().map_err(|_| bad())?);
        out.data_loss.push(rec[3].parse().map_err(|_| bad())?);
    }
    Ok(out)
}

pub fn read_trace_csv(path: impl AsRef<Path>) -> Result<TraceColumns> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trace_csv(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}
