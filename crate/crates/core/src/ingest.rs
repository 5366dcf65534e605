//! Transaction log parsing and the static order/entity graph.
//!
//! Orders and entities share one vertex index space in [`StaticGraph`]:
//! orders occupy `0..n_orders` and entities follow at `n_orders..`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::codec;
use crate::error::{Error, Result};

/// The entity kinds a checkout can link to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityType {
    ShippingAddress,
    Email,
    IpAddress,
    DeviceId,
    Phone,
    PaymentToken,
    Account,
}

impl EntityType {
    pub const ALL: [EntityType; 7] = [
        EntityType::ShippingAddress,
        EntityType::Email,
        EntityType::IpAddress,
        EntityType::DeviceId,
        EntityType::Phone,
        EntityType::PaymentToken,
        EntityType::Account,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EntityType::ShippingAddress => "shipping_address",
            EntityType::Email => "email",
            EntityType::IpAddress => "ip_address",
            EntityType::DeviceId => "device_id",
            EntityType::Phone => "phone",
            EntityType::PaymentToken => "payment_token",
            EntityType::Account => "account",
        }
    }

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EntityType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown entity type `{s}`")))
    }
}

/// Trim + lowercase. Empty values count as absent.
pub fn normalize_value(raw: &str) -> Option<String> {
    let v = raw.trim().to_lowercase();
    (!v.is_empty()).then_some(v)
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityKey {
    pub entity_type: EntityType,
    pub value: String,
}

impl EntityKey {
    /// Builds a key from a raw value; `None` when the value normalizes to empty.
    pub fn new(entity_type: EntityType, raw: &str) -> Option<Self> {
        normalize_value(raw).map(|value| EntityKey { entity_type, value })
    }
}

impl fmt::Display for EntityKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.entity_type, self.value)
    }
}

/// One checkout event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransactionRecord {
    pub order_id: String,
    pub event_time: i64,
    /// Normalized values; absent kinds are simply missing from the map.
    pub entities: BTreeMap<EntityType, String>,
    pub features: Vec<f64>,
    pub label: Option<u8>,
}

impl TransactionRecord {
    pub fn entity_keys(&self) -> impl Iterator<Item = EntityKey> + '_ {
        self.entities.iter().map(|(&t, v)| EntityKey {
            entity_type: t,
            value: v.clone(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecordFormat {
    Jsonl,
    Csv,
}

impl RecordFormat {
    /// Guesses the format from a file extension, defaulting to JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => RecordFormat::Csv,
            _ => RecordFormat::Jsonl,
        }
    }
}

impl FromStr for RecordFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" | "json" => Ok(RecordFormat::Jsonl),
            "csv" => Ok(RecordFormat::Csv),
            other => Err(Error::Invalid(format!("unknown record format `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowError {
    /// 1-based line number in the source file.
    pub line: usize,
    pub message: String,
}

impl fmt::Display for RowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParseOutcome {
    pub records: Vec<TransactionRecord>,
    pub errors: Vec<RowError>,
    /// Feature dimension declared by the header (CSV) or the first valid row (JSONL).
    pub feature_dim: Option<usize>,
}

impl ParseOutcome {
    pub fn error_count(&self) -> usize {
        self.errors.len()
    }
}

/// Parses a transaction log. Per-row problems are collected in
/// [`ParseOutcome::errors`]; only an unreadable file is fatal.
pub fn parse_transactions(path: &Path, format: RecordFormat) -> Result<ParseOutcome> {
    let file = File::open(path)?;
    match format {
        RecordFormat::Jsonl => parse_jsonl(BufReader::new(file)),
        RecordFormat::Csv => parse_csv(file),
    }
}

pub fn parse_jsonl<R: BufRead>(reader: R) -> Result<ParseOutcome> {
    let mut out = ParseOutcome::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        match parse_json_row(&line, out.feature_dim) {
            Ok(rec) => {
                out.feature_dim.get_or_insert(rec.features.len());
                out.records.push(rec);
            }
            Err(message) => out.errors.push(RowError {
                line: lineno,
                message,
            }),
        }
    }
    Ok(out)
}

fn parse_json_row(
    line: &str,
    dim: Option<usize>,
) -> std::result::Result<TransactionRecord, String> {
    let v: Value = serde_json::from_str(line).map_err(|e| format!("malformed json: {e}"))?;
    let obj = v.as_object().ok_or("row is not a json object")?;
    let order_id = match obj.get("order_id") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => return Err("missing order_id".into()),
    };
    let event_time = obj
        .get("event_time")
        .and_then(Value::as_i64)
        .ok_or("missing or non-integer event_time")?;
    let mut entities = BTreeMap::new();
    match obj.get("entities") {
        None | Some(Value::Null) => {}
        Some(Value::Object(map)) => {
            for (k, val) in map {
                let t = EntityType::from_str(k).map_err(|e| e.to_string())?;
                match val {
                    Value::Null => {}
                    Value::String(s) => {
                        if let Some(norm) = normalize_value(s) {
                            entities.insert(t, norm);
                        }
                    }
                    _ => return Err(format!("entity `{k}` is not a string")),
                }
            }
        }
        Some(_) => return Err("entities is not an object".into()),
    }
    let features = match obj.get("features") {
        Some(Value::Array(xs)) => xs
            .iter()
            .enumerate()
            .map(|(j, x)| {
                x.as_f64()
                    .ok_or_else(|| format!("non-numeric feature at index {j}"))
            })
            .collect::<std::result::Result<Vec<f64>, String>>()?,
        _ => return Err("missing features array".into()),
    };
    check_dim(&features, dim)?;
    let label = parse_label_value(obj.get("label"))?;
    Ok(TransactionRecord {
        order_id,
        event_time,
        entities,
        features,
        label,
    })
}

fn check_dim(features: &[f64], dim: Option<usize>) -> std::result::Result<(), String> {
    if let Some(d) = dim {
        if features.len() != d {
            return Err(format!(
                "feature length {} does not match declared dimension {d}",
                features.len()
            ));
        }
    }
    if features.iter().any(|x| !x.is_finite()) {
        return Err("non-finite feature".into());
    }
    Ok(())
}

fn parse_label_value(v: Option<&Value>) -> std::result::Result<Option<u8>, String> {
    match v {
        None | Some(Value::Null) => Ok(None),
        Some(v) => match v.as_u64() {
            Some(0) => Ok(Some(0)),
            Some(1) => Ok(Some(1)),
            _ => Err(format!("label must be 0, 1 or null, got {v}")),
        },
    }
}

/// CSV layout: `order_id,event_time,label,<entity columns...>,f0..f{d-1}`.
/// Entity columns are named by type; the `f*` columns declare the dimension.
pub fn parse_csv<R: Read>(reader: R) -> Result<ParseOutcome> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut id_col = None;
    let mut time_col = None;
    let mut label_col = None;
    let mut entity_cols = Vec::new();
    let mut feature_cols: Vec<(usize, usize)> = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        match h {
            "order_id" => id_col = Some(i),
            "event_time" => time_col = Some(i),
            "label" => label_col = Some(i),
            _ => {
                if let Some(idx) = h.strip_prefix('f').and_then(|s| s.parse::<usize>().ok()) {
                    feature_cols.push((idx, i));
                } else {
                    entity_cols.push((EntityType::from_str(h)?, i));
                }
            }
        }
    }
    feature_cols.sort_unstable();
    if feature_cols
        .iter()
        .enumerate()
        .any(|(j, &(idx, _))| j != idx)
    {
        return Err(Error::Format("feature columns must be f0..f{d-1}".into()));
    }
    let dim = feature_cols.len();
    let mut out = ParseOutcome {
        feature_dim: Some(dim),
        ..Default::default()
    };
    for (i, row) in rdr.records().enumerate() {
        let lineno = i + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                out.errors.push(RowError {
                    line: lineno,
                    message: format!("malformed csv row: {e}"),
                });
                continue;
            }
        };
        let field = |c: Option<usize>| c.and_then(|c| row.get(c)).unwrap_or("").trim();
        let parsed = (|| -> std::result::Result<TransactionRecord, String> {
            let order_id = field(id_col);
            if order_id.is_empty() {
                return Err("missing order_id".into());
            }
            let event_time = field(time_col)
                .parse::<i64>()
                .map_err(|_| "missing or non-integer event_time".to_string())?;
            let label = match field(label_col) {
                "" | "null" => None,
                "0" => Some(0),
                "1" => Some(1),
                other => return Err(format!("label must be 0, 1 or empty, got {other}")),
            };
            let mut entities = BTreeMap::new();
            for &(t, c) in &entity_cols {
                if let Some(v) = row.get(c).and_then(normalize_value) {
                    entities.insert(t, v);
                }
            }
            let features = feature_cols
                .iter()
                .map(|&(j, c)| {
                    row.get(c)
                        .and_then(|s| s.trim().parse::<f64>().ok())
                        .ok_or_else(|| format!("non-numeric feature f{j}"))
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            check_dim(&features, Some(dim))?;
            Ok(TransactionRecord {
                order_id: order_id.to_string(),
                event_time,
                entities,
                features,
                label,
            })
        })();
        match parsed {
            Ok(r) => out.records.push(r),
            Err(message) => out.errors.push(RowError {
                line: lineno,
                message,
            }),
        }
    }
    Ok(out)
}

pub fn write_transactions(
    records: &[TransactionRecord],
    path: &Path,
    format: RecordFormat,
) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    match format {
        RecordFormat::Jsonl => write_jsonl(records, w),
        RecordFormat::Csv => write_csv(records, w),
    }
}

pub fn write_jsonl<W: Write>(records: &[TransactionRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv<W: Write>(records: &[TransactionRecord], w: W) -> Result<()> {
    let dim = records.first().map_or(0, |r| r.features.len());
    let mut wtr = csv::Writer::from_writer(w);
    let mut header: Vec<String> = vec!["order_id".into(), "event_time".into(), "label".into()];
    header.extend(EntityType::ALL.iter().map(|t| t.name().to_string()));
    header.extend((0..dim).map(|j| format!("f{j}")));
    wtr.write_record(&header)?;
    for r in records {
        let mut row: Vec<String> = vec![
            r.order_id.clone(),
            r.event_time.to_string(),
            r.label.map(|l| l.to_string()).unwrap_or_default(),
        ];
        for t in EntityType::ALL {
            row.push(r.entities.get(&t).cloned().unwrap_or_default());
        }
        // `{:?}` on f64 prints the shortest string that round-trips.
        row.extend(r.features.iter().map(|x| format!("{x:?}")));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Maps event times onto fixed-width snapshot buckets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotIndex {
    pub origin_time: i64,
    /// Bucket width in seconds.
    pub duration: i64,
    /// Number of snapshots; valid ids are `0..n_snapshots`.
    pub n_snapshots: u32,
}

pub const DAY_SECONDS: i64 = 86_400;

impl SnapshotIndex {
    pub fn new(origin_time: i64, duration: i64, n_snapshots: u32) -> Result<Self> {
        if duration <= 0 {
            return Err(Error::Config(format!(
                "snapshot duration must be > 0, got {duration}"
            )));
        }
        Ok(SnapshotIndex {
            origin_time,
            duration,
            n_snapshots,
        })
    }

    /// Smallest index with the given origin and duration that covers every record.
    pub fn covering(
        records: &[TransactionRecord],
        origin_time: i64,
        duration: i64,
    ) -> Result<Self> {
        let mut idx = Self::new(origin_time, duration, 0)?;
        let mut max_t = None;
        for r in records {
            let t = idx.snapshot_of(r.event_time)?;
            max_t = max_t.max(Some(t));
        }
        idx.n_snapshots = max_t.map_or(0, |t| t + 1);
        Ok(idx)
    }

    pub fn snapshot_of(&self, event_time: i64) -> Result<u32> {
        if event_time < self.origin_time {
            return Err(Error::BeforeOrigin {
                event_time,
                origin: self.origin_time,
            });
        }
        let t = (event_time - self.origin_time).div_euclid(self.duration);
        u32::try_from(t).map_err(|_| Error::Invalid(format!("snapshot id {t} out of range")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrderVertex {
    pub order_id: String,
    pub event_time: i64,
    pub snapshot: u32,
    pub features: Vec<f64>,
    pub label: Option<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VertexKind {
    Order,
    Entity,
}

/// Bipartite order↔entity graph.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticGraph {
    pub index: SnapshotIndex,
    pub feature_dim: usize,
    pub orders: Vec<OrderVertex>,
    /// Entities in first-appearance order.
    pub entities: Vec<EntityKey>,
    /// Entity indices per order, sorted by entity type (at most one per type).
    order_entities: Vec<Vec<u32>>,
    /// Order indices per entity, ascending.
    entity_orders: Vec<Vec<u32>>,
    entity_lookup: HashMap<EntityKey, u32>,
}

impl StaticGraph {
    pub fn build(records: &[TransactionRecord], index: SnapshotIndex) -> Result<Self> {
        let feature_dim = records.first().map_or(0, |r| r.features.len());
        let mut seen = HashMap::with_capacity(records.len());
        let mut orders = Vec::with_capacity(records.len());
        let mut entities = Vec::new();
        let mut entity_lookup: HashMap<EntityKey, u32> = HashMap::new();
        let mut order_entities = Vec::with_capacity(records.len());
        let mut entity_orders: Vec<Vec<u32>> = Vec::new();
        for (oi, r) in records.iter().enumerate() {
            if seen.insert(r.order_id.as_str(), oi).is_some() {
                return Err(Error::DuplicateOrder(r.order_id.clone()));
            }
            if r.features.len() != feature_dim {
                return Err(Error::Shape(format!(
                    "order `{}` has {} features, expected {feature_dim}",
                    r.order_id,
                    r.features.len()
                )));
            }
            if let Some(l) = r.label {
                if l > 1 {
                    return Err(Error::Invalid(format!(
                        "order `{}` has label {l}",
                        r.order_id
                    )));
                }
            }
            let snapshot = index.snapshot_of(r.event_time)?;
            if snapshot >= index.n_snapshots {
                return Err(Error::Invalid(format!(
                    "order `{}` falls in snapshot {snapshot}, index has {}",
                    r.order_id, index.n_snapshots
                )));
            }
            orders.push(OrderVertex {
                order_id: r.order_id.clone(),
                event_time: r.event_time,
                snapshot,
                features: r.features.clone(),
                label: r.label,
            });
            // BTreeMap iteration is already sorted by entity type.
            let mut adj = Vec::with_capacity(r.entities.len());
            for key in r.entity_keys() {
                if key.value.is_empty() {
                    continue;
                }
                let ei = match entity_lookup.get(&key) {
                    Some(&ei) => ei,
                    None => {
                        let ei = entities.len() as u32;
                        entity_lookup.insert(key.clone(), ei);
                        entities.push(key);
                        entity_orders.push(Vec::new());
                        ei
                    }
                };
                adj.push(ei);
                entity_orders[ei as usize].push(oi as u32);
            }
            order_entities.push(adj);
        }
        Ok(StaticGraph {
            index,
            feature_dim,
            orders,
            entities,
            order_entities,
            entity_orders,
            entity_lookup,
        })
    }

    pub fn n_orders(&self) -> usize {
        self.orders.len()
    }

    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn n_vertices(&self) -> usize {
        self.orders.len() + self.entities.len()
    }

    pub fn n_edges(&self) -> usize {
        self.order_entities.iter().map(Vec::len).sum()
    }

    /// τ(v): whether a unified vertex index is an order or an entity.
    pub fn vertex_kind(&self, v: usize) -> VertexKind {
        if v < self.orders.len() {
            VertexKind::Order
        } else {
            VertexKind::Entity
        }
    }

    pub fn entity_vertex(&self, entity: u32) -> usize {
        self.orders.len() + entity as usize
    }

    pub fn order_entities(&self, order: usize) -> &[u32] {
        &self.order_entities[order]
    }

    pub fn entity_orders(&self, entity: usize) -> &[u32] {
        &self.entity_orders[entity]
    }

    pub fn entity_index(&self, key: &EntityKey) -> Option<u32> {
        self.entity_lookup.get(key).copied()
    }

    /// Neighbors of a unified vertex, also in unified indices.
    pub fn neighbors(&self, v: usize) -> Vec<usize> {
        let n_orders = self.orders.len();
        if v < n_orders {
            self.order_entities[v]
                .iter()
                .map(|&e| n_orders + e as usize)
                .collect()
        } else {
            self.entity_orders[v - n_orders]
                .iter()
                .map(|&o| o as usize)
                .collect()
        }
    }

    pub fn degree(&self, v: usize) -> usize {
        let n_orders = self.orders.len();
        if v < n_orders {
            self.order_entities[v].len()
        } else {
            self.entity_orders[v - n_orders].len()
        }
    }

    const MAGIC: [u8; 4] = *b"DDSG";
    const VERSION: u16 = 1;

    /// Binary layout (little-endian), see `docs/formats.md`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        codec::write_header(w, &Self::MAGIC, Self::VERSION)?;
        w.write_i64::<LE>(self.index.origin_time)?;
        w.write_i64::<LE>(self.index.duration)?;
        w.write_u32::<LE>(self.index.n_snapshots)?;
        w.write_u32::<LE>(self.feature_dim as u32)?;
        w.write_u64::<LE>(self.orders.len() as u64)?;
        for o in &self.orders {
            codec::write_str(w, &o.order_id)?;
            w.write_i64::<LE>(o.event_time)?;
            w.write_u32::<LE>(o.snapshot)?;
            w.write_u8(o.label.unwrap_or(u8::MAX))?;
            codec::write_f64s(w, &o.features)?;
        }
        w.write_u64::<LE>(self.entities.len() as u64)?;
        for e in &self.entities {
            w.write_u8(e.entity_type.tag())?;
            codec::write_str(w, &e.value)?;
        }
        for adj in &self.order_entities {
            w.write_u8(adj.len() as u8)?;
            for &e in adj {
                w.write_u32::<LE>(e)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        codec::read_header(r, &Self::MAGIC, Self::VERSION)?;
        let origin_time = r.read_i64::<LE>()?;
        let duration = r.read_i64::<LE>()?;
        let n_snapshots = r.read_u32::<LE>()?;
        let index = SnapshotIndex::new(origin_time, duration, n_snapshots)?;
        let feature_dim = r.read_u32::<LE>()? as usize;
        let n_orders = r.read_u64::<LE>()? as usize;
        let mut records = Vec::with_capacity(n_orders);
        for _ in 0..n_orders {
            let order_id = codec::read_str(r)?;
            let event_time = r.read_i64::<LE>()?;
            let _snapshot = r.read_u32::<LE>()?;
            let label = match r.read_u8()? {
                u8::MAX => None,
                l @ (0 | 1) => Some(l),
                l => return Err(Error::Format(format!("bad label byte {l}"))),
            };
            let features = codec::read_f64s(r, feature_dim)?;
            records.push(TransactionRecord {
                order_id,
                event_time,
                entities: BTreeMap::new(),
                features,
                label,
            });
        }
        let n_entities = r.read_u64::<LE>()? as usize;
        let mut keys = Vec::with_capacity(n_entities);
        for _ in 0..n_entities {
            let tag = r.read_u8()?;
            let entity_type = EntityType::from_tag(tag)
                .ok_or_else(|| Error::Format(format!("bad entity tag {tag}")))?;
            keys.push(EntityKey {
                entity_type,
                value: codec::read_str(r)?,
            });
        }
        for rec in records.iter_mut() {
            let deg = r.read_u8()? as usize;
            for _ in 0..deg {
                let e = r.read_u32::<LE>()? as usize;
                let key = keys
                    .get(e)
                    .ok_or_else(|| Error::Format(format!("edge to unknown entity {e}")))?;
                rec.entities.insert(key.entity_type, key.value.clone());
            }
        }
        let g = StaticGraph::build(&records, index)?;
        if g.entities != keys {
            return Err(Error::Format(
                "entity table is not in first-appearance order".into(),
            ));
        }
        Ok(g)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_atomic(path, |w| self.write_to(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, t: i64, ents: &[(EntityType, &str)]) -> TransactionRecord {
        TransactionRecord {
            order_id: id.into(),
            event_time: t,
            entities: ents.iter().map(|&(k, v)| (k, v.to_string())).collect(),
            features: vec![1.0, 2.0],
            label: Some(0),
        }
    }

    #[test]
    fn parses_single_jsonl_row() {
        let line = r#"{"order_id":"o1","event_time":5,"entities":{"email":" A@B.com "},"features":[1,2.5,3],"label":1}"#;
        let out = parse_jsonl(line.as_bytes()).unwrap();
        assert!(out.errors.is_empty());
        assert_eq!(out.records.len(), 1);
        let r = &out.records[0];
        assert_eq!(r.order_id, "o1");
        assert_eq!(r.features.len(), 3);
        assert_eq!(r.entities[&EntityType::Email], "a@b.com");
        assert_eq!(r.label, Some(1));
    }

    #[test]
    fn rejects_rows_with_line_numbers() {
        let text = [
            r#"{"event_time":5,"features":[1]}"#,
            r#"{"order_id":"o2","event_time":5,"features":["x"]}"#,
            r#"{"order_id":"o3","event_time":5,"entities":{"fax":"1"},"features":[1]}"#,
            r#"{"order_id":"o4","event_time":5,"features":[1],"label":2}"#,
            r#"{"order_id":"o5","event_time":5,"features":[1]}"#,
            r#"{"order_id":"o6","event_time":5,"features":[1,2]}"#,
            "not json",
        ]
        .join("\n");
        let out = parse_jsonl(text.as_bytes()).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].order_id, "o5");
        let lines: Vec<usize> = out.errors.iter().map(|e| e.line).collect();
        assert_eq!(lines, vec![1, 2, 3, 4, 6, 7]);
        assert!(out.errors[0].message.contains("order_id"));
        assert!(out.errors[2].message.contains("unknown entity type"));
    }

    #[test]
    fn null_and_blank_entities_are_absent() {
        let line = r#"{"order_id":"o1","event_time":0,"entities":{"email":null,"phone":"  "},"features":[],"label":null}"#;
        let out = parse_jsonl(line.as_bytes()).unwrap();
        assert!(out.records[0].entities.is_empty());
        assert_eq!(out.records[0].label, None);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let recs = vec![rec("a", 0, &[(EntityType::Email, "x")]), rec("b", 10, &[])];
        let mut buf = Vec::new();
        write_csv(&recs, &mut buf).unwrap();
        let out = parse_csv(buf.as_slice()).unwrap();
        assert_eq!(out.records, recs);
        assert_eq!(out.feature_dim, Some(2));

        let bad = "order_id,event_time,label,f0\n,1,0,1.0\nx,1,0,abc\n";
        let out = parse_csv(bad.as_bytes()).unwrap();
        assert_eq!(
            out.errors.iter().map(|e| e.line).collect::<Vec<_>>(),
            vec![2, 3]
        );
    }

    #[test]
    fn unreadable_file_is_fatal() {
        assert!(
            parse_transactions(Path::new("/nonexistent/x.jsonl"), RecordFormat::Jsonl).is_err()
        );
    }

    #[test]
    fn snapshot_boundaries() {
        let idx = SnapshotIndex::new(0, DAY_SECONDS, 10).unwrap();
        assert_eq!(idx.snapshot_of(0).unwrap(), 0);
        assert_eq!(idx.snapshot_of(86_399).unwrap(), 0);
        assert_eq!(idx.snapshot_of(86_400).unwrap(), 1);
        assert!(matches!(
            idx.snapshot_of(-1),
            Err(Error::BeforeOrigin { .. })
        ));
        assert!(SnapshotIndex::new(0, 0, 1).is_err());
    }

    #[test]
    fn snapshot_matches_integer_division() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let origin: i64 = rng.gen_range(-1_000_000..1_000_000);
            let duration: i64 = rng.gen_range(1..200_000);
            let dt: i64 = rng.gen_range(0..100_000_000);
            let idx = SnapshotIndex::new(origin, duration, u32::MAX).unwrap();
            let expected = (dt / duration) as u32;
            assert_eq!(idx.snapshot_of(origin + dt).unwrap(), expected);
        }
    }

    #[test]
    fn shared_email_gives_one_entity() {
        let recs = vec![
            rec("o1", 0, &[(EntityType::Email, "e")]),
            rec("o2", 1, &[(EntityType::Email, "e")]),
        ];
        let g = StaticGraph::build(&recs, SnapshotIndex::new(0, DAY_SECONDS, 1).unwrap()).unwrap();
        assert_eq!(g.n_orders(), 2);
        assert_eq!(g.n_entities(), 1);
        assert_eq!(g.n_edges(), 2);
        assert_eq!(g.vertex_kind(0), VertexKind::Order);
        assert_eq!(g.vertex_kind(2), VertexKind::Entity);
        assert_eq!(g.neighbors(2), vec![0, 1]);
    }

    #[test]
    fn full_order_has_degree_seven() {
        let ents: Vec<_> = EntityType::ALL.iter().map(|&t| (t, "v")).collect();
        let g = StaticGraph::build(&[rec("o", 0, &ents)], SnapshotIndex::new(0, 1, 1).unwrap())
            .unwrap();
        assert_eq!(g.degree(0), 7);
        assert_eq!(g.n_entities(), 7);
    }

    #[test]
    fn duplicate_order_is_fatal() {
        let recs = vec![rec("o1", 0, &[]), rec("o1", 0, &[])];
        let err = StaticGraph::build(&recs, SnapshotIndex::new(0, 1, 1).unwrap()).unwrap_err();
        assert!(matches!(err, Error::DuplicateOrder(ref id) if id == "o1"));
    }

    #[test]
    fn binary_round_trip() {
        let recs = vec![
            rec(
                "o1",
                0,
                &[(EntityType::Email, "e"), (EntityType::Phone, "p")],
            ),
            rec("o2", 90_000, &[(EntityType::Email, "e")]),
        ];
        let idx = SnapshotIndex::covering(&recs, 0, DAY_SECONDS).unwrap();
        let g = StaticGraph::build(&recs, idx).unwrap();
        let mut buf = Vec::new();
        g.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"DDSG");
        let back = StaticGraph::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, g);
        buf[0] = b'X';
        assert!(matches!(
            StaticGraph::read_from(&mut buf.as_slice()),
            Err(Error::Format(_))
        ));
    }
}
