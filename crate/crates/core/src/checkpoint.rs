//! Binary network snapshots.
//!
//! Layout: the 5 magic bytes `ALSK1`, then records back to back until end of
//! file. Each record is
//!
//! ```text
//! u32 LE  name length in bytes
//! ...     UTF-8 name
//! u32 LE  rank
//! u32 LE  dims[rank]
//! f64 LE  payload, product(dims) values
//! ```
//!
//! Every trainable parameter and every persistent buffer (e.g. the
//! spectral-norm power-iteration vectors) is stored under its network-wide
//! name. 32-bit networks are widened to f64 on write and narrowed on read,
//! which is lossless in that direction, so save → load → save reproduces the
//! file byte for byte.

use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::param::Net;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 5] = *b"ALSK1";

/// One named tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for r in records {
        if !seen.insert(&r.name) {
            return Err(Error::Checkpoint(format!("duplicate tensor name {:?}", r.name)));
        }
        let n: usize = r.dims.iter().product();
        if n != r.data.len() {
            return Err(Error::Checkpoint(format!(
                "{}: dims {:?} do not cover {} values",
                r.name,
                r.dims,
                r.data.len()
            )));
        }
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    for r in records {
        buf.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(r.name.as_bytes());
        buf.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
        for &d in &r.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &r.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated at byte {} (wanted {} more)",
                self.path, self.pos, n
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path: path.display().to_string() };
    let magic = r.take(5)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: unrecognized magic {magic:02x?}", r.path)));
    }
    let mut records = Vec::new();
    while r.pos < r.bytes.len() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Checkpoint(format!("{}: bad tensor name: {e}", r.path)))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let payload = r.take(8 * n)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(Record { name, dims, data });
    }
    Ok(records)
}

fn tensor_record<E: Element>(name: &str, t: &Tensor<E>) -> Record {
    Record {
        name: name.to_string(),
        dims: t.shape().to_vec(),
        data: t.data().iter().map(|v| v.to_f64()).collect(),
    }
}

/// Snapshot all parameters and buffers of a network.
pub fn save_net<E: Element>(path: &Path, net: &mut dyn Net<E>) -> Result<()> {
    let mut records = Vec::new();
    for p in net.params() {
        records.push(tensor_record(&p.name, &p.value));
    }
    for (name, t) in net.buffers() {
        records.push(tensor_record(&name, t));
    }
    write_records(path, &records)
}

/// Restore a network from a snapshot. Every stored tensor must land in
/// exactly one parameter or buffer with a matching shape, and every
/// parameter and buffer must be covered — partial loads are rejected.
pub fn load_net<E: Element>(path: &Path, net: &mut dyn Net<E>) -> Result<()> {
    let mut by_name: std::collections::HashMap<String, Record> =
        read_records(path)?.into_iter().map(|r| (r.name.clone(), r)).collect();
    let ctx = path.display().to_string();

    let mut fill = |name: &str, t: &mut Tensor<E>| -> Result<()> {
        let rec = by_name
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("{ctx}: no record for tensor {name:?}")))?;
        if rec.dims != t.shape() {
            return Err(Error::Checkpoint(format!(
                "{ctx}: {name:?} stored as {:?} but the network expects {:?}",
                rec.dims,
                t.shape()
            )));
        }
        for (dst, &v) in t.data_mut().iter_mut().zip(rec.data.iter()) {
            *dst = E::from_f64(v);
        }
        Ok(())
    };

    for p in net.params() {
        let name = p.name.clone();
        fill(&name, &mut p.value)?;
    }
    for (name, t) in net.buffers() {
        fill(&name, t)?;
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Checkpoint(format!(
            "{ctx}: stored tensor {extra:?} has no destination in this network"
        )));
    }
    Ok(())
}
