use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::EmbeddingStore;
use crate::error::{Error, Result};
use crate::ingest::{EntityKey, EntityType, TransactionRecord};
use crate::lnn::LnnModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub order_id: String,
    pub features: Vec<f64>,
    /// Raw entity values; normalized before lookup.
    #[serde(default)]
    pub entities: BTreeMap<EntityType, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub order_id: String,
    pub score: f64,
    pub used_entities: Vec<EntityType>,
    pub latency_micros: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub order_id: Option<String>,
    pub error: ErrorBody,
}

impl From<&TransactionRecord> for ScoreRequest {
    fn from(r: &TransactionRecord) -> Self {
        ScoreRequest {
            order_id: r.order_id.clone(),
            features: r.features.clone(),
            entities: r.entities.clone(),
        }
    }
}

/// Stage 2 of a trained model plus the current store. The store can be
/// swapped for a fresher file; the model cannot.
pub struct Scorer {
    model: LnnModel,
    version: u64,
    store: RwLock<Arc<EmbeddingStore>>,
    latencies: Mutex<Vec<u64>>,
}

impl Scorer {
    /// Refuses a store written by a different model version.
    pub fn new(model: LnnModel, store: EmbeddingStore) -> Result<Self> {
        let version = model.version();
        store.check_version(version)?;
        if store.header().dim as usize != model.embedding_dim() {
            return Err(Error::Shape(format!(
                "store width {} vs model embedding width {}",
                store.header().dim,
                model.embedding_dim()
            )));
        }
        Ok(Scorer {
            model,
            version,
            store: RwLock::new(Arc::new(store)),
            latencies: Mutex::new(Vec::new()),
        })
    }

    pub fn model(&self) -> &LnnModel {
        &self.model
    }

    pub fn store(&self) -> Arc<EmbeddingStore> {
        self.store.read().expect("store lock poisoned").clone()
    }

    /// Replaces the store with a freshly written file. In-flight requests
    /// finish against the store they started with.
    pub fn reload(&self, path: &Path) -> Result<()> {
        let next = EmbeddingStore::open(path)?;
        next.check_version(self.version)?;
        *self.store.write().expect("store lock poisoned") = Arc::new(next);
        Ok(())
    }

    pub fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse> {
        let start = Instant::now();
        let store = self.store();
        let mut lookups = Vec::with_capacity(req.entities.len());
        let mut used = Vec::new();
        for (&ty, raw) in &req.entities {
            let found = EntityKey::new(ty, raw).and_then(|k| store.get(&k));
            if found.is_some() {
                used.push(ty);
            }
            lookups.push((ty, found));
        }
        let record = TransactionRecord {
            order_id: req.order_id.clone(),
            event_time: 0,
            entities: BTreeMap::new(),
            features: req.features.clone(),
            label: None,
        };
        let score = self.model.score_with_store(&record, &lookups)?;
        let latency_micros = start.elapsed().as_micros() as u64;
        self.latencies
            .lock()
            .expect("latency lock poisoned")
            .push(latency_micros);
        Ok(ScoreResponse {
            order_id: req.order_id.clone(),
            score,
            used_entities: used,
            latency_micros,
        })
    }

    /// Latencies of every request scored so far.
    pub fn latencies(&self) -> Vec<u64> {
        self.latencies
            .lock()
            .expect("latency lock poisoned")
            .clone()
    }

    /// One NDJSON line in, one line out. Never fails: problems become an
    /// error response.
    pub fn handle_line(&self, line: &str) -> String {
        let reply = match serde_json::from_str::<ScoreRequest>(line) {
            Ok(req) => match self.score(&req) {
                Ok(resp) => serde_json::to_string(&resp),
                Err(e) => serde_json::to_string(&error_response(Some(req.order_id), &e)),
            },
            Err(e) => {
                let order_id = serde_json::from_str::<serde_json::Value>(line)
                    .ok()
                    .and_then(|v| v.get("order_id")?.as_str().map(str::to_string));
                serde_json::to_string(&error_response(order_id, &Error::from(e)))
            }
        };
        reply.expect("responses always serialize")
    }
}

fn error_response(order_id: Option<String>, e: &Error) -> ErrorResponse {
    ErrorResponse {
        order_id,
        error: ErrorBody {
            kind: e.kind().to_string(),
            message: e.to_string(),
        },
    }
}

/// Serves NDJSON over any line-oriented reader/writer pair until EOF.
pub fn serve_lines<R: BufRead, W: Write>(scorer: &Scorer, reader: R, mut writer: W) -> Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        writeln!(writer, "{}", scorer.handle_line(&line))?;
        writer.flush()?;
    }
    Ok(())
}

/// A running TCP listener with one thread per connection.
pub struct TcpService {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
    scorer: Arc<Scorer>,
}

impl TcpService {
    pub fn start<A: ToSocketAddrs>(scorer: Arc<Scorer>, addr: A) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let flag = shutdown.clone();
        let sc = scorer.clone();
        let accept = std::thread::spawn(move || {
            let mut workers: Vec<JoinHandle<()>> = Vec::new();
            while !flag.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let sc = sc.clone();
                        let flag = flag.clone();
                        workers.push(std::thread::spawn(move || {
                            handle_connection(&sc, stream, &flag)
                        }));
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        std::thread::sleep(Duration::from_millis(2));
                    }
                    Err(e) => log::warn!("accept failed: {e}"),
                }
                workers.retain(|w| !w.is_finished());
            }
            for w in workers {
                let _ = w.join();
            }
        });
        Ok(TcpService {
            addr,
            shutdown,
            accept: Some(accept),
            scorer,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn scorer(&self) -> &Arc<Scorer> {
        &self.scorer
    }

    /// Stops accepting, waits for open connections to close.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for TcpService {
    fn drop(&mut self) {
        self.stop();
    }
}

fn handle_connection(scorer: &Scorer, stream: TcpStream, shutdown: &AtomicBool) {
    let _ = stream.set_nodelay(true);
    let _ = stream.set_nonblocking(false);
    let _ = stream.set_read_timeout(Some(Duration::from_millis(200)));
    let Ok(write_half) = stream.try_clone() else {
        return;
    };
    let mut reader = BufReader::new(stream);
    let mut writer = BufWriter::new(write_half);
    let mut line = String::new();
    loop {
        match reader.read_line(&mut line) {
            Ok(0) => return,
            Ok(_) => {
                if !line.trim().is_empty() {
                    let reply = scorer.handle_line(line.trim_end());
                    if writeln!(writer, "{reply}")
                        .and_then(|_| writer.flush())
                        .is_err()
                    {
                        return;
                    }
                }
                line.clear();
            }
            Err(e)
                if matches!(
                    e.kind(),
                    std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
                ) =>
            {
                // Partial lines stay buffered in `line` across timeouts.
                if shutdown.load(Ordering::SeqCst) {
                    return;
                }
            }
            Err(_) => return,
        }
    }
}

/// Order statistics of request latencies, nearest-rank rule:
/// the p-th percentile is the `ceil(p/100 · n)`-th smallest sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub count: usize,
    pub p50_micros: u64,
    pub p95_micros: u64,
    pub p99_micros: u64,
    pub max_micros: u64,
    /// Requests per second of busy time (`count / Σ latency`).
    pub throughput: f64,
}

pub const MIN_LATENCY_SAMPLES: usize = 100;

pub fn percentile(sorted: &[u64], p: f64) -> u64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

pub fn latency_report(latencies: &[u64]) -> Result<LatencyReport> {
    if latencies.len() < MIN_LATENCY_SAMPLES {
        return Err(Error::Invalid(format!(
            "latency report needs >= {MIN_LATENCY_SAMPLES} samples, got {}",
            latencies.len()
        )));
    }
    let mut s = latencies.to_vec();
    s.sort_unstable();
    let busy: u64 = s.iter().sum();
    Ok(LatencyReport {
        count: s.len(),
        p50_micros: percentile(&s, 50.0),
        p95_micros: percentile(&s, 95.0),
        p99_micros: percentile(&s, 99.0),
        max_micros: *s.last().expect("non-empty"),
        throughput: if busy == 0 {
            f64::INFINITY
        } else {
            s.len() as f64 / (busy as f64 / 1e6)
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_rule() {
        let xs: Vec<u64> = (1..=100).collect();
        let r = latency_report(&xs).unwrap();
        assert_eq!((r.p50_micros, r.p95_micros, r.p99_micros), (50, 95, 99));
        let c = latency_report(&[7; 150]).unwrap();
        assert_eq!(c.p50_micros, c.p99_micros);
        assert!(latency_report(&[1; 99]).is_err());
    }
}
