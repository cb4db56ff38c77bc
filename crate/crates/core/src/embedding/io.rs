//! CSV and binary interchange for [`EmbeddingSet`].
//!
//! CSV header: `sample_id,kind,subject_a,subject_b,tool,d0,...,d{dim-1}`.
//! Binary: magic `EMB1`, u32 dim, u64 count, then per record five
//! u32-length-prefixed UTF-8 strings (id, kind, subject_a, subject_b, tool;
//! empty string = absent) followed by `dim` little-endian f64.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Embedding, EmbeddingSet, SampleKind, SampleRecord};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"EMB1";
const FIXED_COLUMNS: [&str; 5] = ["sample_id", "kind", "subject_a", "subject_b", "tool"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingFormat {
    Csv,
    Binary,
}

impl EmbeddingFormat {
    /// `.csv` selects CSV, anything else the binary format.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => EmbeddingFormat::Csv,
            _ => EmbeddingFormat::Binary,
        }
    }
}

pub fn load_embeddings(path: &Path, format: EmbeddingFormat) -> Result<EmbeddingSet> {
    let file = File::open(path)?;
    match format {
        EmbeddingFormat::Csv => read_csv(BufReader::new(file)),
        EmbeddingFormat::Binary => read_binary(BufReader::new(file)),
    }
}

pub fn save_embeddings(set: &EmbeddingSet, path: &Path, format: EmbeddingFormat) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    match format {
        EmbeddingFormat::Csv => write_csv(set, &mut out)?,
        EmbeddingFormat::Binary => write_binary(set, &mut out)?,
    }
    out.flush()?;
    Ok(())
}

fn opt(s: &str) -> Option<String> {
    (!s.is_empty()).then(|| s.to_string())
}

pub(crate) fn read_csv<R: BufRead>(reader: R) -> Result<EmbeddingSet> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(line) => line?,
        None => return Err(Error::Parse { line: 1, message: "missing header".into() }),
    };
    let cols: Vec<&str> = header.trim_end_matches('\r').split(',').collect();
    if cols.len() < FIXED_COLUMNS.len() || cols[..5] != FIXED_COLUMNS {
        return Err(Error::Parse {
            line: 1,
            message: format!("header must start with {}", FIXED_COLUMNS.join(",")),
        });
    }
    let dim = cols.len() - FIXED_COLUMNS.len();
    for (i, c) in cols[5..].iter().enumerate() {
        if *c != format!("d{i}") {
            return Err(Error::Parse { line: 1, message: format!("expected column d{i}, got {c}") });
        }
    }
    if dim == 0 {
        return Err(Error::Parse { line: 1, message: "no embedding columns".into() });
    }

    let mut records = Vec::new();
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            if fields.len() > 5 {
                return Err(Error::dims(dim, fields.len() - 5));
            }
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected {} fields, got {}", cols.len(), fields.len()),
            });
        }
        let kind = SampleKind::from_token(fields[1]).ok_or_else(|| Error::Parse {
            line: lineno,
            message: format!("unknown kind `{}`", fields[1]),
        })?;
        let values = fields[5..]
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|e| Error::Parse {
                    line: lineno,
                    message: format!("bad number `{f}`: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let rec = SampleRecord {
            sample_id: fields[0].to_string(),
            kind,
            subject_a: fields[2].to_string(),
            subject_b: opt(fields[3]),
            tool: opt(fields[4]),
            embedding: Embedding::new(values)?,
        };
        rec.validate()?;
        records.push(rec);
    }
    EmbeddingSet::new(dim, records)
}

fn check_field(field: &str) -> Result<()> {
    if field.contains([',', '\n', '\r']) {
        return Err(Error::Format(format!("field `{field}` cannot be stored in CSV")));
    }
    Ok(())
}

pub(crate) fn write_csv<W: Write>(set: &EmbeddingSet, out: &mut W) -> Result<()> {
    let mut header = FIXED_COLUMNS.join(",");
    for i in 0..set.dim() {
        header.push_str(&format!(",d{i}"));
    }
    writeln!(out, "{header}")?;
    for rec in set.records() {
        let b = rec.subject_b.as_deref().unwrap_or("");
        let t = rec.tool.as_deref().unwrap_or("");
        for f in [rec.sample_id.as_str(), rec.subject_a.as_str(), b, t] {
            check_field(f)?;
        }
        write!(out, "{},{},{},{},{}", rec.sample_id, rec.kind.token(), rec.subject_a, b, t)?;
        for v in rec.embedding.as_slice() {
            // shortest representation that parses back to the same bits
            write!(out, ",{v:?}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

fn write_str<W: Write>(out: &mut W, s: &str) -> Result<()> {
    let len = u32::try_from(s.len()).map_err(|_| Error::Format("string too long".into()))?;
    out.write_all(&len.to_le_bytes())?;
    out.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn write_binary<W: Write>(set: &EmbeddingSet, out: &mut W) -> Result<()> {
    out.write_all(MAGIC)?;
    let dim = u32::try_from(set.dim()).map_err(|_| Error::Format("dimension too large".into()))?;
    out.write_all(&dim.to_le_bytes())?;
    out.write_all(&(set.len() as u64).to_le_bytes())?;
    for rec in set.records() {
        write_str(out, &rec.sample_id)?;
        write_str(out, rec.kind.token())?;
        write_str(out, &rec.subject_a)?;
        write_str(out, rec.subject_b.as_deref().unwrap_or(""))?;
        write_str(out, rec.tool.as_deref().unwrap_or(""))?;
        for v in rec.embedding.as_slice() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Little-endian reader that maps premature EOF to [`Error::Format`].
pub(crate) struct LeReader<R> {
    inner: R,
}

impl<R: Read> LeReader<R> {
    pub(crate) fn new(inner: R) -> Self {
        LeReader { inner }
    }

    pub(crate) fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format("truncated file".into()),
            _ => Error::Io(e),
        })?;
        Ok(buf)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let mut buf = vec![0u8; len];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format("truncated file".into()),
            _ => Error::Io(e),
        })?;
        String::from_utf8(buf).map_err(|_| Error::Format("invalid UTF-8 string".into()))
    }

    /// Fails unless the stream is exhausted.
    pub(crate) fn finish(mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(Error::Format("trailing bytes after payload".into())),
        }
    }
}

pub(crate) fn read_binary<R: Read>(reader: R) -> Result<EmbeddingSet> {
    let mut r = LeReader::new(reader);
    if &r.bytes::<4>()? != MAGIC {
        return Err(Error::Format("bad magic, expected EMB1".into()));
    }
    let dim = r.u32()? as usize;
    let count = r.u64()?;
    let mut records = Vec::new();
    for _ in 0..count {
        let sample_id = r.string()?;
        let kind_token = r.string()?;
        let kind = SampleKind::from_token(&kind_token)
            .ok_or_else(|| Error::Format(format!("unknown kind `{kind_token}`")))?;
        let subject_a = r.string()?;
        let subject_b = opt(&r.string()?);
        let tool = opt(&r.string()?);
        let embedding = Embedding::new(r.f64s(dim)?)?;
        records.push(SampleRecord { sample_id, kind, subject_a, subject_b, tool, embedding });
    }
    r.finish()?;
    EmbeddingSet::new(dim, records)
}
