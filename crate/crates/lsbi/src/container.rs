//! Checksummed binary container for datasets and model checkpoints.
//!
//! One format serves both: a fixed 8-byte magic string identifying the file
//! kind, a version byte, a JSON metadata block (self-describing: it also
//! declares the names and shapes of the arrays that follow), the arrays as
//! little-endian 32-bit floats in row-major order, and a trailing CRC-32 of
//! everything before it. The layout is deliberately language-neutral — any
//! environment with JSON and a CRC-32 can read it.
//!
//! ```text
//! ┌───────────┬─────────┬──────────────┬───────────┬─────────────┬─────────┐
//! │ magic [8] │ version │ meta_len u64 │ meta JSON │ f32 arrays… │ crc u32 │
//! └───────────┴─────────┴──────────────┴───────────┴─────────────┴─────────┘
//! ```
//!
//! Reading verifies the checksum over the whole file *before* interpreting
//! anything, so a truncated or bit-flipped file is rejected outright rather
//! than yielding a partially valid result. All multi-byte integers are
//! little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Declared shape of one stored array, kept inside the metadata block under
/// the reserved `"__arrays"` key.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct ArrayDecl {
    name: String,
    rows: usize,
    cols: usize,
}

/// A fully parsed container file.
#[derive(Debug, Clone)]
pub struct Container {
    pub version: u8,
    /// User metadata (the reserved `"__arrays"` key is stripped).
    pub metadata: serde_json::Value,
    arrays: Vec<(String, Array2<f32>)>,
}

impl Container {
    /// Borrow a stored array by name.
    pub fn array(&self, name: &str) -> Result<&Array2<f32>> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| Error::Format(format!("container has no array named {name:?}")))
    }

    /// Remove and return a stored array by name (avoids a copy for large
    /// arrays).
    pub fn take_array(&mut self, name: &str) -> Result<Array2<f32>> {
        let pos = self
            .arrays
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("container has no array named {name:?}")))?;
        Ok(self.arrays.remove(pos).1)
    }

    pub fn array_names(&self) -> Vec<&str> {
        self.arrays.iter().map(|(n, _)| n.as_str()).collect()
    }
}

/// Forward bytes to a writer while feeding the running CRC.
struct HashingWriter<W: Write> {
    inner: W,
    hasher: crc32fast::Hasher,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }
    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

/// Write a container file. `metadata` must be a JSON object; the array
/// declarations are added under the reserved `"__arrays"` key.
pub fn write_container(
    path: &Path,
    magic: &[u8; 8],
    version: u8,
    metadata: &serde_json::Value,
    arrays: &[(&str, &Array2<f32>)],
) -> Result<()> {
    let mut meta = match metadata {
        serde_json::Value::Object(map) => map.clone(),
        _ => return Err(Error::Format("container metadata must be a JSON object".into())),
    };
    if meta.contains_key("__arrays") {
        return Err(Error::Format("metadata key \"__arrays\" is reserved".into()));
    }
    let decls: Vec<ArrayDecl> = arrays
        .iter()
        .map(|(name, a)| ArrayDecl {
            name: (*name).to_string(),
            rows: a.nrows(),
            cols: a.ncols(),
        })
        .collect();
    meta.insert(
        "__arrays".into(),
        serde_json::to_value(&decls).expect("array declarations serialize"),
    );
    let meta_bytes =
        serde_json::to_vec(&serde_json::Value::Object(meta)).expect("metadata serializes");

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = HashingWriter {
        inner: BufWriter::new(file),
        hasher: crc32fast::Hasher::new(),
    };

    w.write_all(magic).map_err(|e| Error::io(path, e))?;
    w.write_all(&[version]).map_err(|e| Error::io(path, e))?;
    w.write_all(&(meta_bytes.len() as u64).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    w.write_all(&meta_bytes).map_err(|e| Error::io(path, e))?;

    let mut row_buf = Vec::new();
    for (_, a) in arrays {
        for row in a.outer_iter() {
            row_buf.clear();
            row_buf.reserve(row.len() * 4);
            for v in row {
                row_buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&row_buf).map_err(|e| Error::io(path, e))?;
        }
    }

    let crc = w.hasher.clone().finalize();
    w.inner
        .write_all(&crc.to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    w.inner.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read and fully validate a container file written by [`write_container`].
///
/// Validation order: checksum over the entire file first (so corruption is
/// always reported as a checksum error), then magic, then version is handed
/// back to the caller for its own compatibility check.
pub fn read_container(path: &Path, expected_magic: &[u8; 8]) -> Result<Container> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let total_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    const FIXED: u64 = 8 + 1 + 8 + 4; // magic + version + meta_len + crc
    if total_len < FIXED {
        return Err(Error::Format(format!(
            "container {} is truncated ({total_len} bytes)",
            path.display()
        )));
    }

    // Pass 1: checksum everything except the trailing CRC field.
    let mut reader = BufReader::new(file);
    let body_len = total_len - 4;
    let mut hasher = crc32fast::Hasher::new();
    let mut remaining = body_len;
    let mut chunk = vec![0u8; 1 << 16];
    while remaining > 0 {
        let take = remaining.min(chunk.len() as u64) as usize;
        reader
            .read_exact(&mut chunk[..take])
            .map_err(|e| Error::io(path, e))?;
        hasher.update(&chunk[..take]);
        remaining -= take as u64;
    }
    let mut crc_bytes = [0u8; 4];
    reader
        .read_exact(&mut crc_bytes)
        .map_err(|e| Error::io(path, e))?;
    let stored_crc = u32::from_le_bytes(crc_bytes);
    let computed_crc = hasher.finalize();
    if stored_crc != computed_crc {
        return Err(Error::Format(format!(
            "checksum mismatch in {}: stored {stored_crc:#010x}, computed {computed_crc:#010x}",
            path.display()
        )));
    }

    // Pass 2: parse, now that integrity is established.
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut magic = [0u8; 8];
    reader.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != expected_magic {
        return Err(Error::Format(format!(
            "wrong magic bytes in {}: expected {:?}, found {:?}",
            path.display(),
            String::from_utf8_lossy(expected_magic),
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut version = [0u8; 1];
    reader
        .read_exact(&mut version)
        .map_err(|e| Error::io(path, e))?;
    let mut len_bytes = [0u8; 8];
    reader
        .read_exact(&mut len_bytes)
        .map_err(|e| Error::io(path, e))?;
    let meta_len = u64::from_le_bytes(len_bytes);
    if FIXED + meta_len > total_len {
        return Err(Error::Format(format!(
            "container {} declares a {meta_len}-byte metadata block but only {total_len} bytes exist",
            path.display()
        )));
    }
    let mut meta_bytes = vec![0u8; meta_len as usize];
    reader
        .read_exact(&mut meta_bytes)
        .map_err(|e| Error::io(path, e))?;
    let mut metadata: serde_json::Value = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::Format(format!("invalid metadata JSON: {e}")))?;

    let decls: Vec<ArrayDecl> = match metadata
        .as_object_mut()
        .and_then(|map| map.remove("__arrays"))
    {
        Some(v) => serde_json::from_value(v)
            .map_err(|e| Error::Format(format!("invalid array declarations: {e}")))?,
        None => Vec::new(),
    };

    let declared_bytes: u64 = decls.iter().map(|d| (d.rows * d.cols * 4) as u64).sum();
    if FIXED + meta_len + declared_bytes != total_len {
        return Err(Error::Format(format!(
            "container {} size mismatch: declared {} array bytes, file holds {}",
            path.display(),
            declared_bytes,
            total_len - FIXED - meta_len
        )));
    }

    let mut arrays = Vec::with_capacity(decls.len());
    let mut row_buf = Vec::new();
    for decl in decls {
        let mut data = Vec::with_capacity(decl.rows * decl.cols);
        row_buf.resize(decl.cols * 4, 0);
        for _ in 0..decl.rows {
            reader
                .read_exact(&mut row_buf)
                .map_err(|e| Error::io(path, e))?;
            data.extend(
                row_buf
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            );
        }
        let array = Array2::from_shape_vec((decl.rows, decl.cols), data)
            .map_err(|e| Error::Format(format!("array {:?} shape error: {e}", decl.name)))?;
        arrays.push((decl.name, array));
    }

    Ok(Container {
        version: version[0],
        metadata,
        arrays,
    })
}
