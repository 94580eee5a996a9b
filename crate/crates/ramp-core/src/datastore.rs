//! The non-parametric memory: embedding keys, score values, and exact
//! top-K nearest-neighbor search under L2.
//!
//! Keys are stored in f32, distance math runs in f64 after widening. The
//! store is immutable once built; concurrent searches are safe.
//!
//! On disk (little-endian, no padding):
//! magic `RAMPDS01` (8 bytes), u32 version = 1, u32 dim, u64 count, then per
//! record `dim * f32` key, `f64` value, `u32` id length, id UTF-8 bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::dataio::SampleSet;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RAMPDS01";
const VERSION: u32 = 1;

/// Immutable key/value memory over (embedding, score) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Datastore {
    dim: usize,
    keys: Vec<f32>,
    values: Vec<f64>,
    ids: Vec<String>,
}

/// One search result. `distance` is the true L2 distance between the query
/// and the stored key, computed in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborHit {
    pub index: usize,
    pub distance: f64,
    pub value: f64,
}

impl Datastore {
    /// One entry per sample, in sample order. Keys are narrowed to f32.
    pub fn build(set: &SampleSet) -> Result<Self> {
        if set.is_empty() {
            return Err(Error::EmptyInput("datastore build"));
        }
        let dim = set.dim();
        let mut keys = Vec::with_capacity(set.len() * dim);
        let mut values = Vec::with_capacity(set.len());
        let mut ids = Vec::with_capacity(set.len());
        for s in set.samples() {
            keys.extend(s.embedding.iter().map(|&v| v as f32));
            values.push(s.score);
            ids.push(s.id.clone());
        }
        Ok(Datastore {
            dim,
            keys,
            values,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn value(&self, index: usize) -> f64 {
        self.values[index]
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    /// The stored f32 key of entry `index`.
    pub fn key(&self, index: usize) -> &[f32] {
        &self.keys[index * self.dim..(index + 1) * self.dim]
    }

    /// L2 distance between the query and entry `index`, in f64.
    pub fn distance(&self, query: &[f64], index: usize) -> f64 {
        let mut acc = 0.0;
        for (q, k) in query.iter().zip(self.key(index)) {
            let d = q - *k as f64;
            acc += d * d;
        }
        acc.sqrt()
    }

    /// Exact top-K scan. Hits come back sorted by distance ascending, ties
    /// broken by lower index. Asking for more hits than entries returns all
    /// entries.
    pub fn search(&self, query: &[f64], k: usize) -> Result<Vec<NeighborHit>> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "search query",
                expected: self.dim,
                actual: query.len(),
            });
        }
        if k == 0 {
            return Err(Error::InvalidConfig("search k must be >= 1".into()));
        }
        let mut scored: Vec<(f64, usize)> = (0..self.len())
            .map(|i| (self.distance(query, i), i))
            .collect();
        scored.sort_unstable_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
        });
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(distance, index)| NeighborHit {
                index,
                distance,
                value: self.values[index],
            })
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for i in 0..self.len() {
            for v in self.key(i) {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&self.values[i].to_le_bytes())?;
            let id = self.ids[i].as_bytes();
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path)?;
        Self::read_from(&mut BufReader::new(file))
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::NotADatastore);
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::DatastoreVersion { found: version });
        }
        let dim = read_u32(r)? as usize;
        let count = read_u64(r)? as usize;
        if dim == 0 || count == 0 {
            return Err(Error::EmptyInput("datastore file"));
        }
        let mut keys = Vec::with_capacity(count * dim);
        let mut values = Vec::with_capacity(count);
        let mut ids = Vec::with_capacity(count);
        for _ in 0..count {
            for _ in 0..dim {
                let mut b = [0u8; 4];
                read_exact(r, &mut b)?;
                keys.push(f32::from_le_bytes(b));
            }
            let mut b = [0u8; 8];
            read_exact(r, &mut b)?;
            values.push(f64::from_le_bytes(b));
            let id_len = read_u32(r)? as usize;
            let mut id = vec![0u8; id_len];
            read_exact(r, &mut id)?;
            ids.push(String::from_utf8(id).map_err(|_| Error::TruncatedDatastore)?);
        }
        Ok(Datastore {
            dim,
            keys,
            values,
            ids,
        })
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::TruncatedDatastore
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
