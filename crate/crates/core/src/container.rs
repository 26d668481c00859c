//! The "LDCT" binary container: named, shaped scalar arrays in one file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"LDCT"
//! version  u16
//! count    u32
//! entry*   name_len: u32, name: UTF-8 bytes,
//!          dtype: u8 (0 = f32, 1 = f64),
//!          rank: u8, extents: rank x u64,
//!          data: product(extents) scalars, little-endian
//! ```
//!
//! Images, sinograms, and model checkpoints all ship in this format.
//! Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image2D;

pub const MAGIC: &[u8; 4] = b"LDCT";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype_code(&self) -> u8 {
        match self {
            Payload::F32(_) => 0,
            Payload::F64(_) => 1,
        }
    }

    /// Values widened to f64 regardless of storage dtype.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Payload::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::F64(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub extents: Vec<u64>,
    pub payload: Payload,
}

impl Entry {
    pub fn f32(name: impl Into<String>, extents: Vec<u64>, values: Vec<f32>) -> Self {
        Entry {
            name: name.into(),
            extents,
            payload: Payload::F32(values),
        }
    }

    pub fn f64(name: impl Into<String>, extents: Vec<u64>, values: Vec<f64>) -> Self {
        Entry {
            name: name.into(),
            extents,
            payload: Payload::F64(values),
        }
    }

    /// Single-value f64 entry, used for scalar metadata in checkpoints.
    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        Entry::f64(name, vec![1], vec![value])
    }

    fn numel(&self) -> u64 {
        self.extents.iter().product()
    }
}

pub fn write(path: &Path, entries: &[Entry]) -> Result<()> {
    for e in entries {
        if e.numel() != e.payload.len() as u64 {
            return Err(Error::shape(
                format!("container entry '{}'", e.name),
                format!("{} values from extents {:?}", e.numel(), e.extents),
                format!("{} values", e.payload.len()),
            ));
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);

    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    for e in entries {
        let name = e.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())
            .map_err(io_err)?;
        w.write_all(name).map_err(io_err)?;
        w.write_all(&[e.payload.dtype_code(), e.extents.len() as u8])
            .map_err(io_err)?;
        for &ext in &e.extents {
            w.write_all(&ext.to_le_bytes()).map_err(io_err)?;
        }
        match &e.payload {
            Payload::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes()).map_err(io_err)?;
                }
            }
            Payload::F64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes()).map_err(io_err)?;
                }
            }
        }
    }
    w.flush().map_err(io_err)
}

pub fn read(path: &Path) -> Result<Vec<Entry>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io_err = |e| Error::io(path, e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {:?}, not an LDCT container",
            path.display(),
            magic
        )));
    }
    let mut buf2 = [0u8; 2];
    r.read_exact(&mut buf2).map_err(io_err)?;
    let version = u16::from_le_bytes(buf2);
    if version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported container version {}",
            path.display(),
            version
        )));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4).map_err(io_err)?;
    let count = u32::from_le_bytes(buf4);

    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        r.read_exact(&mut buf4).map_err(io_err)?;
        let name_len = u32::from_le_bytes(buf4) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(io_err)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format(format!("{}: entry name is not UTF-8", path.display())))?;
        r.read_exact(&mut buf2).map_err(io_err)?;
        let [dtype, rank] = buf2;
        let mut extents = Vec::with_capacity(rank as usize);
        let mut buf8 = [0u8; 8];
        for _ in 0..rank {
            r.read_exact(&mut buf8).map_err(io_err)?;
            extents.push(u64::from_le_bytes(buf8));
        }
        let numel: u64 = extents.iter().product();
        let payload = match dtype {
            0 => {
                let mut v = Vec::with_capacity(numel as usize);
                for _ in 0..numel {
                    r.read_exact(&mut buf4).map_err(io_err)?;
                    v.push(f32::from_le_bytes(buf4));
                }
                Payload::F32(v)
            }
            1 => {
                let mut v = Vec::with_capacity(numel as usize);
                let mut buf8 = [0u8; 8];
                for _ in 0..numel {
                    r.read_exact(&mut buf8).map_err(io_err)?;
                    v.push(f64::from_le_bytes(buf8));
                }
                Payload::F64(v)
            }
            other => {
                return Err(Error::Format(format!(
                    "{}: unknown dtype code {} in entry '{}'",
                    path.display(),
                    other,
                    name
                )))
            }
        };
        entries.push(Entry {
            name,
            extents,
            payload,
        });
    }
    Ok(entries)
}

/// Write a single image to its own container file (f32 image + f64 spacing).
pub fn write_image(path: &Path, image: &Image2D) -> Result<()> {
    let data: Vec<f32> = image.data().iter().map(|&v| v as f32).collect();
    write(
        path,
        &[
            Entry::f32(
                "image",
                vec![image.height() as u64, image.width() as u64],
                data,
            ),
            Entry::scalar("spacing", image.spacing()),
        ],
    )
}

pub fn read_image(path: &Path) -> Result<Image2D> {
    let entries = read(path)?;
    let find = |name: &str| {
        entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format(format!("{}: missing entry '{}'", path.display(), name)))
    };
    let img = find("image")?;
    if img.extents.len() != 2 {
        return Err(Error::Format(format!(
            "{}: image entry has rank {}, expected 2",
            path.display(),
            img.extents.len()
        )));
    }
    let spacing = find("spacing")?.payload.to_f64()[0];
    Image2D::from_vec(
        img.extents[0] as usize,
        img.extents[1] as usize,
        spacing,
        img.payload.to_f64(),
    )
}
