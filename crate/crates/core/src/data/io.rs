//! Binary shard persistence.
//!
//! Layout (little-endian throughout):
//!   bytes 0..4    magic "FSDS"
//!   bytes 4..8    u32 format version (currently 1)
//!   bytes 8..12   u32 sample count n (>= 1)
//!   bytes 12..16  u32 feature dim d (>= 1)
//!   bytes 16..20  u32 class count c (>= 1)
//!   then n*d f64 features (row-major), then n u32 labels.
//!
//! Loading validates structure and reports the byte offset of the first
//! problem; a file round-trips to a bitwise-identical dataset.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"FSDS";
pub const FORMAT_VERSION: u32 = 1;

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(
        &u32::try_from(dataset.len())
            .map_err(|_| too_big("samples"))?
            .to_le_bytes(),
    )?;
    w.write_all(
        &u32::try_from(dataset.input_dim())
            .map_err(|_| too_big("feature dim"))?
            .to_le_bytes(),
    )?;
    w.write_all(
        &u32::try_from(dataset.class_count())
            .map_err(|_| too_big("classes"))?
            .to_le_bytes(),
    )?;
    for &x in dataset.features().data() {
        w.write_all(&x.to_le_bytes())?;
    }
    for &y in dataset.labels() {
        let y = u32::try_from(y).map_err(|_| too_big("label"))?;
        w.write_all(&y.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn too_big(what: &str) -> Error {
    Error::Domain {
        op: "save_dataset",
        message: format!("{what} exceeds u32 range"),
    }
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(Error::Format {
                offset: at,
                message: format!("file truncated while reading {what}"),
            }),
            Err(e) => Err(e.into()),
        }
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_f64(&mut self, what: &str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path)?;
    let mut r = Cursor {
        inner: BufReader::new(file),
        offset: 0,
    };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = r.read_u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported format version {version}"),
        });
    }
    let n = r.read_u32("sample count")?;
    if n == 0 {
        return Err(Error::Format {
            offset: 8,
            message: "sample count must be >= 1".into(),
        });
    }
    let d = r.read_u32("feature dim")?;
    if d == 0 {
        return Err(Error::Format {
            offset: 12,
            message: "feature dim must be >= 1".into(),
        });
    }
    let c = r.read_u32("class count")?;
    if c == 0 {
        return Err(Error::Format {
            offset: 16,
            message: "class count must be >= 1".into(),
        });
    }

    let (n, d, c) = (n as usize, d as usize, c as usize);
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        let at = r.offset;
        let x = r.read_f64("features")?;
        if !x.is_finite() {
            return Err(Error::Format {
                offset: at,
                message: format!("non-finite feature {x}"),
            });
        }
        data.push(x);
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.offset;
        let y = r.read_u32("labels")? as usize;
        if y >= c {
            return Err(Error::Format {
                offset: at,
                message: format!("label {y} out of range for {c} classes"),
            });
        }
        labels.push(y);
    }

    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing)? != 0 {
        return Err(Error::Format {
            offset: r.offset,
            message: "trailing bytes after labels".into(),
        });
    }

    Dataset::new(Tensor::matrix(n, d, data)?, labels, c)
}
