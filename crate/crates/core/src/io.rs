//! File formats.
//!
//! Embedding files: 8-byte magic `IMGEMB01`, little-endian `u32` dim,
//! `u64` count, then `count × dim` little-endian `f32`. Row ids live in a
//! sidecar text file, one id per line, in row order.
//!
//! Text lookups (captions, plausibility scores, templates, manifests) are
//! tab-separated lines; blank lines and lines starting with `#` are skipped.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::types::{EmbeddingRecord, EmbeddingVector};

pub const EMB_MAGIC: &[u8; 8] = b"IMGEMB01";

/// A dense block of `count × dim` rows as read from an embedding file.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub dim: usize,
    pub rows: Vec<Vec<f64>>,
}

pub fn write_embeddings<W: Write>(w: &mut W, dim: usize, rows: &[Vec<f64>]) -> std::io::Result<()> {
    w.write_all(EMB_MAGIC)?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    w.write_all(&(rows.len() as u64).to_le_bytes())?;
    for r in rows {
        assert_eq!(r.len(), dim, "embedding row width");
        for &x in r {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_embeddings<R: Read>(r: &mut R) -> Result<EmbeddingMatrix> {
    let bad = |detail: String| Error::Format { what: "embedding file", detail };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| bad(e.to_string()))?;
    if &magic != EMB_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|e| bad(e.to_string()))?;
    let dim = u32::from_le_bytes(b4) as usize;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(|e| bad(e.to_string()))?;
    let count = u64::from_le_bytes(b8) as usize;
    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(|e| bad(e.to_string()))?;
    let expected = count
        .checked_mul(dim)
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| bad("size overflow".into()))?;
    if body.len() != expected {
        return Err(bad(format!("expected {expected} payload bytes, found {}", body.len())));
    }
    let vals: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let rows = if dim == 0 { vec![Vec::new(); count] } else { vals.chunks_exact(dim).map(<[f64]>::to_vec).collect() };
    Ok(EmbeddingMatrix { dim, rows })
}

pub fn save_embeddings(path: &Path, dim: usize, rows: &[Vec<f64>]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_embeddings(&mut w, dim, rows).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_embeddings(&mut BufReader::new(f))
}

pub fn save_ids(path: &Path, ids: &[String]) -> Result<()> {
    let mut out = String::new();
    for id in ids {
        if id.contains('\n') {
            return Err(Error::Format { what: "id sidecar", detail: format!("id contains newline: {id:?}") });
        }
        out.push_str(id);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_ids(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Sidecar path convention: `foo.bin` → `foo.ids`.
pub fn sidecar_path(bin: &Path) -> std::path::PathBuf {
    bin.with_extension("ids")
}

/// Loads an embedding file plus its id sidecar into records.
pub fn load_records(bin: &Path, ids: &Path) -> Result<Vec<EmbeddingRecord>> {
    let m = load_embeddings(bin)?;
    let ids = load_ids(ids)?;
    if ids.len() != m.rows.len() {
        return Err(Error::Format {
            what: "id sidecar",
            detail: format!("{} ids for {} rows", ids.len(), m.rows.len()),
        });
    }
    Ok(ids
        .into_iter()
        .zip(m.rows)
        .map(|(id, v)| EmbeddingRecord { id, vector: EmbeddingVector::new(v) })
        .collect())
}

pub fn save_records(bin: &Path, ids: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    let dim = records.first().map_or(0, |r| r.vector.dim());
    if let Some(bad) = records.iter().find(|r| r.vector.dim() != dim) {
        return Err(Error::DimensionMismatch { expected: dim, got: bad.vector.dim() });
    }
    let rows: Vec<Vec<f64>> = records.iter().map(|r| r.vector.values.clone()).collect();
    save_embeddings(bin, dim, &rows)?;
    save_ids(ids, &records.iter().map(|r| r.id.clone()).collect::<Vec<_>>())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Format {
            what: "jsonl record",
            detail: format!("{}:{}: {e}", path.display(), i + 1),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Tab-separated fields of every non-blank, non-comment line.
pub fn read_tsv(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_tsv(&text))
}

pub fn parse_tsv(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_layout_is_exact() {
        let mut buf = Vec::new();
        write_embeddings(&mut buf, 2, &[vec![1.0, -2.5], vec![0.0, 3.0]]).unwrap();
        assert_eq!(&buf[..8], b"IMGEMB01");
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..20], &2u64.to_le_bytes());
        assert_eq!(&buf[20..24], &1.0f32.to_le_bytes());
        assert_eq!(&buf[24..28], &(-2.5f32).to_le_bytes());
        assert_eq!(buf.len(), 20 + 16);
        let m = read_embeddings(&mut buf.as_slice()).unwrap();
        assert_eq!(m.rows, vec![vec![1.0, -2.5], vec![0.0, 3.0]]);
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut buf = Vec::new();
        write_embeddings(&mut buf, 2, &[vec![1.0, 2.0]]).unwrap();
        buf.pop();
        assert!(matches!(read_embeddings(&mut buf.as_slice()), Err(Error::Format { .. })));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_embeddings(&mut bad.as_slice()).is_err());
    }

    #[test]
    fn tsv_skips_comments() {
        let rows = parse_tsv("# header\na\tb\n\nc\td\te\n");
        assert_eq!(rows, vec![vec!["a", "b"], vec!["c", "d", "e"]]);
    }
}
