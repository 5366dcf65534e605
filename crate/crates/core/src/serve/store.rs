use std::cmp::Ordering;
use std::collections::HashSet;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::codec;
use crate::error::{Error, Result};
use crate::ingest::{EntityKey, EntityType};
use crate::lnn::EntityEmbedding;

const MAGIC: &[u8; 4] = b"DDSE";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 8 + 4 + 8;

/// Header value for a store that holds every entity's latest snapshot.
pub const LATEST: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StoreHeader {
    pub dim: u32,
    pub model_version: u64,
    /// Embeddings reflect snapshots strictly before this one
    /// ([`LATEST`] for all snapshots).
    pub snapshot: u32,
    pub count: u64,
}

/// Read-only, fully loaded embedding store. Records are sorted by key and
/// located by binary search over the trailing offset index.
#[derive(Debug)]
pub struct EmbeddingStore {
    header: StoreHeader,
    buf: Vec<u8>,
    offsets: Vec<u64>,
}

/// Writes a store atomically (temp file + rename).
pub fn store_write(
    path: &Path,
    dim: usize,
    model_version: u64,
    snapshot: u32,
    embeddings: &[EntityEmbedding],
) -> Result<()> {
    let mut seen = HashSet::with_capacity(embeddings.len());
    for e in embeddings {
        if e.vector.len() != dim {
            return Err(Error::Shape(format!(
                "embedding for {} has width {}, store {dim}",
                e.key,
                e.vector.len()
            )));
        }
        if e.vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("embedding"));
        }
        if e.model_version != model_version {
            return Err(Error::VersionMismatch {
                expected: model_version,
                found: e.model_version,
            });
        }
        if !seen.insert(&e.key) {
            return Err(Error::Invalid(format!("duplicate key {}", e.key)));
        }
    }
    let mut sorted: Vec<&EntityEmbedding> = embeddings.iter().collect();
    sorted.sort_by(|a, b| a.key.cmp(&b.key));
    codec::write_atomic(path, |w| {
        codec::write_header(w, MAGIC, VERSION)?;
        w.write_u32::<LE>(dim as u32)?;
        w.write_u64::<LE>(model_version)?;
        w.write_u32::<LE>(snapshot)?;
        w.write_u64::<LE>(sorted.len() as u64)?;
        let mut offsets = Vec::with_capacity(sorted.len());
        let mut pos = HEADER_LEN as u64;
        for e in &sorted {
            offsets.push(pos);
            w.write_u8(e.key.entity_type.tag())?;
            codec::write_str(w, &e.key.value)?;
            w.write_u32::<LE>(e.snapshot)?;
            codec::write_f64s(w, &e.vector)?;
            pos += 1 + 4 + e.key.value.len() as u64 + 4 + 8 * dim as u64;
        }
        for o in offsets {
            w.write_u64::<LE>(o)?;
        }
        w.flush()?;
        Ok(())
    })
}

impl EmbeddingStore {
    pub fn open(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(buf)
    }

    pub fn from_bytes(buf: Vec<u8>) -> Result<Self> {
        let mut r = Cursor::new(&buf[..]);
        codec::read_header(&mut r, MAGIC, VERSION)?;
        let short = |_| Error::Format("truncated store header".into());
        let dim = r.read_u32::<LE>().map_err(short)?;
        let model_version = r.read_u64::<LE>().map_err(short)?;
        let snapshot = r.read_u32::<LE>().map_err(short)?;
        let count = r.read_u64::<LE>().map_err(short)?;
        let index_len = count
            .checked_mul(8)
            .filter(|&n| n <= (buf.len() - HEADER_LEN) as u64)
            .ok_or_else(|| Error::Format("store index exceeds file".into()))?
            as usize;
        let mut idx = Cursor::new(&buf[buf.len() - index_len..]);
        let mut offsets = vec![0u64; count as usize];
        idx.read_u64_into::<LE>(&mut offsets)?;
        let data_end = (buf.len() - index_len) as u64;
        if offsets
            .iter()
            .any(|&o| o < HEADER_LEN as u64 || o >= data_end)
        {
            return Err(Error::Format("store offset out of range".into()));
        }
        let store = EmbeddingStore {
            header: StoreHeader {
                dim,
                model_version,
                snapshot,
                count,
            },
            buf,
            offsets,
        };
        // Decode every record once so corruption surfaces at open time.
        let mut prev: Option<EntityKey> = None;
        for i in 0..store.offsets.len() {
            let (key, _) = store.key_at(i)?;
            if prev.as_ref().is_some_and(|p| p >= &key) {
                return Err(Error::Format(
                    "store records are not strictly sorted".into(),
                ));
            }
            store.record_at(i)?;
            prev = Some(key);
        }
        Ok(store)
    }

    pub fn header(&self) -> StoreHeader {
        self.header
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Errors unless the store was produced by `model_version`.
    pub fn check_version(&self, model_version: u64) -> Result<()> {
        if self.header.model_version != model_version {
            return Err(Error::VersionMismatch {
                expected: model_version,
                found: self.header.model_version,
            });
        }
        Ok(())
    }

    fn key_at(&self, i: usize) -> Result<(EntityKey, Cursor<&[u8]>)> {
        let mut r = Cursor::new(&self.buf[..]);
        r.set_position(self.offsets[i]);
        let tag = r.read_u8()?;
        let entity_type = EntityType::from_tag(tag)
            .ok_or_else(|| Error::Format(format!("unknown entity tag {tag}")))?;
        let value = codec::read_str(&mut r)?;
        Ok((EntityKey { entity_type, value }, r))
    }

    fn record_at(&self, i: usize) -> Result<EntityEmbedding> {
        let (key, mut r) = self.key_at(i)?;
        let snapshot = r.read_u32::<LE>()?;
        let vector = codec::read_f64s(&mut r, self.header.dim as usize)?;
        Ok(EntityEmbedding {
            key,
            vector,
            snapshot,
            model_version: self.header.model_version,
        })
    }

    /// Compares the key stored at record `i` with `key` without allocating.
    fn cmp_at(&self, i: usize, key: &EntityKey) -> Ordering {
        let o = self.offsets[i] as usize;
        let tag = self.buf[o];
        let len = u32::from_le_bytes(self.buf[o + 1..o + 5].try_into().expect("4 bytes")) as usize;
        let value = &self.buf[o + 5..o + 5 + len];
        tag.cmp(&key.entity_type.tag())
            .then_with(|| value.cmp(key.value.as_bytes()))
    }

    pub fn get(&self, key: &EntityKey) -> Option<EntityEmbedding> {
        let (mut lo, mut hi) = (0, self.offsets.len());
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            match self.cmp_at(mid, key) {
                Ordering::Less => lo = mid + 1,
                Ordering::Greater => hi = mid,
                Ordering::Equal => return self.record_at(mid).ok(),
            }
        }
        None
    }

    pub fn iter(&self) -> impl Iterator<Item = EntityEmbedding> + '_ {
        (0..self.offsets.len()).filter_map(|i| self.record_at(i).ok())
    }
}
