//! Binary dataset (`TRRD`) and model (`UTRR`) files.
//!
//! Both are little-endian: a 4-byte magic, a `u32` version, `u32`
//! dimensions, `f64` payload, and a CRC32 of everything before the trailer.
//!
//! ```text
//! TRRD | version | M | N | n_train | n_val | n_test | Phi (row-major) | (y, x) per pair | crc32
//! UTRR | version | M | N | L | K_last | A_t (row-major) per layer | (rho_t, alpha_t) per layer | crc32
//! ```
//!
//! Pair counts are real-valued pairs, stored train, then val, then test.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::sensing::{Dataset, DatasetSplits, MeasurementMatrix, Part, RealPair, Snr, Split};
use crate::utrr::{UtrrLayer, UtrrParams};

pub const DATASET_MAGIC: [u8; 4] = *b"TRRD";
pub const MODEL_MAGIC: [u8; 4] = *b"UTRR";
pub const FORMAT_VERSION: u32 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: [u8; 4]) -> Self {
        let mut w = Writer { buf: magic.to_vec() };
        w.u32(FORMAT_VERSION);
        w
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn dim(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::InvalidDimension(format!("{v} does not fit in u32")))?;
        self.u32(v);
        Ok(())
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn matrix_row_major(&mut self, m: &DMatrix<f64>) {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self.f64(m[(i, j)]);
            }
        }
    }

    fn vector(&mut self, v: &DVector<f64>) {
        v.iter().for_each(|&x| self.f64(x));
    }

    fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

struct Reader<'a> {
    kind: &'static str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn open(kind: &'static str, bytes: &'a [u8], magic: [u8; 4]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(format_err(kind, "file too short"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(format_err(kind, "checksum mismatch"));
        }
        if body[..4] != magic {
            return Err(format_err(kind, "bad magic"));
        }
        let mut r = Reader {
            kind,
            bytes: body,
            pos: 4,
        };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(format_err(kind, &format!("unsupported version {version}")));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err(self.kind, "truncated payload"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn dim(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn matrix_row_major(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = self.f64()?;
            }
        }
        Ok(m)
    }

    fn vector(&mut self, len: usize) -> Result<DVector<f64>> {
        let mut v = DVector::zeros(len);
        for x in v.iter_mut() {
            *x = self.f64()?;
        }
        Ok(v)
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(format_err(self.kind, "trailing bytes before checksum"));
        }
        Ok(())
    }
}

fn format_err(kind: &'static str, message: &str) -> Error {
    Error::Format {
        kind,
        message: message.to_string(),
    }
}

pub fn encode_dataset(splits: &DatasetSplits) -> Result<Vec<u8>> {
    let phi = &splits.train.phi;
    for split in Split::ALL {
        if splits.get(split).phi != *phi {
            return Err(format_err("dataset", "splits must share one measurement matrix"));
        }
    }
    let mut w = Writer::new(DATASET_MAGIC);
    w.dim(phi.m_rows())?;
    w.dim(phi.n_cols())?;
    for split in Split::ALL {
        w.dim(splits.get(split).len())?;
    }
    w.matrix_row_major(phi.matrix());
    for split in Split::ALL {
        for pair in &splits.get(split).pairs {
            w.vector(&pair.measurement);
            w.vector(&pair.label);
        }
    }
    Ok(w.finish())
}

/// Decode a dataset file. The SNR is not stored in the file and is attached
/// from the caller's config.
pub fn decode_dataset(bytes: &[u8], snr: Snr) -> Result<DatasetSplits> {
    let mut r = Reader::open("dataset", bytes, DATASET_MAGIC)?;
    let m = r.dim()?;
    let n = r.dim()?;
    let counts = [r.dim()?, r.dim()?, r.dim()?];
    let phi = Arc::new(MeasurementMatrix::from_matrix(r.matrix_row_major(m, n)?)?);
    let mut read_split = |split: Split, count: usize| -> Result<Dataset> {
        let mut pairs = Vec::with_capacity(count);
        for i in 0..count {
            let measurement = r.vector(m)?;
            let label = r.vector(n)?;
            let part = if i % 2 == 0 { Part::Real } else { Part::Imag };
            pairs.push(RealPair {
                measurement,
                label,
                part,
            });
        }
        Ok(Dataset {
            pairs,
            phi: Arc::clone(&phi),
            snr,
            split,
        })
    };
    let train = read_split(Split::Train, counts[0])?;
    let val = read_split(Split::Val, counts[1])?;
    let test = read_split(Split::Test, counts[2])?;
    r.finish()?;
    Ok(DatasetSplits { train, val, test })
}

pub fn write_dataset(path: &Path, splits: &DatasetSplits) -> Result<()> {
    std::fs::write(path, encode_dataset(splits)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path, snr: Snr) -> Result<DatasetSplits> {
    decode_dataset(&std::fs::read(path)?, snr)
}

pub fn encode_model(params: &UtrrParams) -> Result<Vec<u8>> {
    let mut w = Writer::new(MODEL_MAGIC);
    w.dim(params.m_rows())?;
    w.dim(params.n_cols())?;
    w.dim(params.n_layers())?;
    w.dim(params.top_k_last)?;
    for layer in &params.layers {
        w.matrix_row_major(&layer.a_matrix);
    }
    for layer in &params.layers {
        w.f64(layer.rho);
        w.f64(layer.alpha);
    }
    Ok(w.finish())
}

/// Decode a model file against the measurement matrix of its dataset. The
/// file does not record the reduced-complexity flag, so the caller supplies it.
pub fn decode_model(bytes: &[u8], phi: Arc<MeasurementMatrix>, rcc: bool) -> Result<UtrrParams> {
    let mut r = Reader::open("model", bytes, MODEL_MAGIC)?;
    let m = r.dim()?;
    let n = r.dim()?;
    let n_layers = r.dim()?;
    let top_k_last = r.dim()?;
    if m != phi.m_rows() {
        return Err(Error::mismatch("model measurements", phi.m_rows(), m));
    }
    if n != phi.n_cols() {
        return Err(Error::mismatch("model antennas", phi.n_cols(), n));
    }
    let mats = (0..n_layers)
        .map(|_| r.matrix_row_major(m, 2 * n))
        .collect::<Result<Vec<_>>>()?;
    let mut layers = Vec::with_capacity(n_layers);
    for a_matrix in mats {
        let rho = r.f64()?;
        let alpha = r.f64()?;
        layers.push(UtrrLayer { a_matrix, rho, alpha });
    }
    r.finish()?;
    UtrrParams::from_layers(phi, layers, top_k_last, rcc)
}

pub fn write_model(path: &Path, params: &UtrrParams) -> Result<()> {
    std::fs::write(path, encode_model(params)?)?;
    Ok(())
}

pub fn read_model(path: &Path, phi: Arc<MeasurementMatrix>, rcc: bool) -> Result<UtrrParams> {
    decode_model(&std::fs::read(path)?, phi, rcc)
}
