//! On-disk formats.
//!
//! `mfacbin` gradient files are little-endian:
//!
//! ```text
//! 0..4    magic "MFAC"
//! 4       version (1)
//! 5       dtype code (0 = f32, 1 = f64)
//! 6..8    reserved, zero
//! 8..16   m (u64)
//! 16..24  d (u64)
//! 24..    m*d values, row-major
//! ```
//!
//! Sketches and checkpoints use a tagged container with the same first 24
//! bytes, except that byte 6 is [`CONTAINER_FLAG`] and byte 7 holds the
//! payload kind. It continues with a u64 section count and a list of
//! sections, each laid out as
//!
//! ```text
//! 0..4    tag (ASCII, NUL padded)
//! 4       dtype code
//! 5..8    reserved, zero
//! 8..16   rows (u64)
//! 16..24  cols (u64)
//! 24..    rows*cols values
//! ```

use std::fs;
use std::path::Path;

use crate::config::Dtype;
use crate::error::{MfacError, Result};
use crate::gradients::GradientMatrix;

pub const MAGIC: &[u8; 4] = b"MFAC";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 24;
pub const CONTAINER_FLAG: u8 = 1;

/// Largest `m * d` accepted from CSV input.
pub const CSV_MAX_ENTRIES: usize = 1_000_000;

/// Input encodings accepted by [`load_gradients`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientFormat {
    MfacBin,
    Csv,
}

impl GradientFormat {
    /// Guess from the file extension; anything other than `.csv` is binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => GradientFormat::Csv,
            _ => GradientFormat::MfacBin,
        }
    }
}

/// Load a gradient matrix, rounding values to `dtype`.
pub fn load_gradients(path: &Path, format: GradientFormat, dtype: Dtype) -> Result<GradientMatrix> {
    let g = match format {
        GradientFormat::MfacBin => decode_mfacbin(&fs::read(path)?)?,
        GradientFormat::Csv => parse_csv(&fs::read_to_string(path)?)?,
    };
    Ok(g.quantized(dtype))
}

pub fn save_mfacbin(path: &Path, g: &GradientMatrix, dtype: Dtype) -> Result<()> {
    fs::write(path, encode_mfacbin(g, dtype))?;
    Ok(())
}

fn put_header(out: &mut Vec<u8>, dtype: Dtype, b6: u8, b7: u8, m: usize, d: usize) {
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype.code());
    out.push(b6);
    out.push(b7);
    out.extend_from_slice(&(m as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
}

fn put_values(out: &mut Vec<u8>, values: &[f64], dtype: Dtype) {
    match dtype {
        Dtype::F32 => values.iter().for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes())),
        Dtype::F64 => values.iter().for_each(|&x| out.extend_from_slice(&x.to_le_bytes())),
    }
}

fn read_u64(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8-byte slice"))
}

fn read_values(bytes: &[u8], count: usize, dtype: Dtype) -> Vec<f64> {
    match dtype {
        Dtype::F32 => bytes[..count * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
            .collect(),
        Dtype::F64 => bytes[..count * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    }
}

struct Header {
    dtype: Dtype,
    b6: u8,
    b7: u8,
    m: usize,
    d: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_LEN {
        return Err(MfacError::Format(format!("file too short for header ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(MfacError::Format(format!("bad magic {:?}, expected \"MFAC\"", &bytes[0..4])));
    }
    if bytes[4] != VERSION {
        return Err(MfacError::Format(format!("unsupported version {}", bytes[4])));
    }
    let dtype = Dtype::from_code(bytes[5])?;
    let m = usize::try_from(read_u64(bytes, 8)).map_err(|_| MfacError::Format("m overflows usize".into()))?;
    let d = usize::try_from(read_u64(bytes, 16)).map_err(|_| MfacError::Format("d overflows usize".into()))?;
    Ok(Header {
        dtype,
        b6: bytes[6],
        b7: bytes[7],
        m,
        d,
    })
}

pub fn encode_mfacbin(g: &GradientMatrix, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + g.as_slice().len() * dtype.width());
    put_header(&mut out, dtype, 0, 0, g.rows(), g.cols());
    put_values(&mut out, g.as_slice(), dtype);
    out
}

pub fn decode_mfacbin(bytes: &[u8]) -> Result<GradientMatrix> {
    let h = parse_header(bytes)?;
    if h.b6 != 0 || h.b7 != 0 {
        return Err(MfacError::Format("reserved header bytes are not zero".into()));
    }
    if h.d == 0 {
        return Err(MfacError::Format("header declares d = 0".into()));
    }
    let count = h
        .m
        .checked_mul(h.d)
        .ok_or_else(|| MfacError::Format("m * d overflows".into()))?;
    let expected = count
        .checked_mul(h.dtype.width())
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| MfacError::Format("payload size overflows".into()))?;
    if bytes.len() != expected {
        return Err(MfacError::Format(format!(
            "header declares {}x{} values ({expected} bytes) but file has {} bytes",
            h.m,
            h.d,
            bytes.len()
        )));
    }
    let values = read_values(&bytes[HEADER_LEN..], count, h.dtype);
    GradientMatrix::from_flat(h.m, h.d, values)
}

/// Parse one gradient per line, comma separated.
pub fn parse_csv(text: &str) -> Result<GradientMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| MfacError::Format(format!("csv row {rows}: {e}")))?;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        match cols {
            None => cols = Some(record.len()),
            Some(c) if c != record.len() => {
                return Err(MfacError::Format(format!(
                    "csv row {rows} has {} columns, expected {c}",
                    record.len()
                )))
            }
            _ => {}
        }
        for (col, field) in record.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| MfacError::Format(format!("csv row {rows}, column {col}: cannot parse `{field}`")))?;
            if !v.is_finite() {
                return Err(MfacError::NonFinite { row: rows, col });
            }
            data.push(v);
        }
        rows += 1;
        if data.len() > CSV_MAX_ENTRIES {
            return Err(MfacError::Format(format!(
                "csv input exceeds {CSV_MAX_ENTRIES} entries; use mfacbin"
            )));
        }
    }
    let cols = cols.ok_or_else(|| MfacError::Format("csv input is empty".into()))?;
    GradientMatrix::from_flat(rows, cols, data)
}

/// One tagged matrix inside a container.
#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub tag: [u8; 4],
    pub dtype: Dtype,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Section {
    pub fn new(tag: &str, dtype: Dtype, rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            tag: tag_bytes(tag),
            dtype,
            rows,
            cols,
            data,
        }
    }
}

fn tag_bytes(tag: &str) -> [u8; 4] {
    let mut out = [0u8; 4];
    for (o, b) in out.iter_mut().zip(tag.bytes()) {
        *o = b;
    }
    out
}

/// Tagged multi-section file.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: u8,
    pub dtype: Dtype,
    pub m: usize,
    pub d: usize,
    pub sections: Vec<Section>,
}

impl Container {
    pub fn section(&self, tag: &str) -> Result<&Section> {
        let want = tag_bytes(tag);
        self.sections
            .iter()
            .find(|s| s.tag == want)
            .ok_or_else(|| MfacError::Format(format!("missing section `{tag}`")))
    }

    /// Fetch a section and check its shape.
    pub fn matrix(&self, tag: &str, rows: usize, cols: usize) -> Result<&[f64]> {
        let s = self.section(tag)?;
        if s.rows != rows || s.cols != cols {
            return Err(MfacError::Format(format!(
                "section `{tag}` is {}x{}, expected {rows}x{cols}",
                s.rows, s.cols
            )));
        }
        Ok(&s.data)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_header(&mut out, self.dtype, CONTAINER_FLAG, self.kind, self.m, self.d);
        out.extend_from_slice(&(self.sections.len() as u64).to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&s.tag);
            out.push(s.dtype.code());
            out.extend_from_slice(&[0, 0, 0]);
            out.extend_from_slice(&(s.rows as u64).to_le_bytes());
            out.extend_from_slice(&(s.cols as u64).to_le_bytes());
            put_values(&mut out, &s.data, s.dtype);
        }
        out
    }

    pub fn decode(bytes: &[u8], expected_kind: u8) -> Result<Self> {
        let h = parse_header(bytes)?;
        if h.b6 != CONTAINER_FLAG {
            return Err(MfacError::Format("not a tagged container".into()));
        }
        if h.b7 != expected_kind {
            return Err(MfacError::Format(format!(
                "container holds payload kind {}, expected {expected_kind}",
                h.b7
            )));
        }
        let mut at = HEADER_LEN;
        let need = |at: usize, n: usize| -> Result<()> {
            if bytes.len() < at + n {
                Err(MfacError::Format(format!("container truncated at byte {at}")))
            } else {
                Ok(())
            }
        };
        need(at, 8)?;
        let count = read_u64(bytes, at) as usize;
        at += 8;
        let mut sections = Vec::new();
        for _ in 0..count {
            need(at, 24)?;
            let tag: [u8; 4] = bytes[at..at + 4].try_into().expect("4-byte tag");
            let dtype = Dtype::from_code(bytes[at + 4])?;
            let rows = read_u64(bytes, at + 8) as usize;
            let cols = read_u64(bytes, at + 16) as usize;
            at += 24;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| MfacError::Format("section size overflows".into()))?;
            need(at, n * dtype.width())?;
            let data = read_values(&bytes[at..], n, dtype);
            at += n * dtype.width();
            sections.push(Section {
                tag,
                dtype,
                rows,
                cols,
                data,
            });
        }
        if at != bytes.len() {
            return Err(MfacError::Format(format!("{} trailing bytes", bytes.len() - at)));
        }
        Ok(Self {
            kind: h.b7,
            dtype: h.dtype,
            m: h.m,
            d: h.d,
            sections,
        })
    }
}
