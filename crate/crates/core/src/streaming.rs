//! Streaming maintenance of the sphering model.
//!
//! Only the second moments `K_X = Σ x xᵀ` and `K_Q = Σ q qᵀ` are kept. The
//! model is refreshed from their eigendecompositions, and stored sphered rows
//! are carried to the newest model by the linear map between consecutive
//! encodings instead of re-reading raw vectors.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use parking_lot::RwLock;

use crate::dataset::VectorSet;
use crate::error::{Error, Result};
use crate::linalg;
use crate::sphering::{FlexibleSpheringModel, CONDITION_WARNING};

pub const DEFAULT_REFRESH_PERIOD: u64 = 1000;

/// Running second moments and the update counter driving refreshes.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryStats {
    k_x: DMatrix<f64>,
    k_q: DMatrix<f64>,
    updates: u64,
    period: u64,
    decay: f64,
}

fn add_outer(m: &mut DMatrix<f64>, v: &[f32], sign: f64) {
    for i in 0..v.len() {
        let vi = sign * f64::from(v[i]);
        for j in 0..v.len() {
            m[(i, j)] += vi * f64::from(v[j]);
        }
    }
}

impl SummaryStats {
    pub fn new(dim: usize) -> Self {
        SummaryStats {
            k_x: DMatrix::zeros(dim, dim),
            k_q: DMatrix::zeros(dim, dim),
            updates: 0,
            period: DEFAULT_REFRESH_PERIOD,
            decay: 1.0,
        }
    }

    /// Refresh every `period` updates; `0` disables automatic refreshes.
    pub fn with_period(mut self, period: u64) -> Self {
        self.period = period;
        self
    }

    /// `K_Q ← γ K_Q + q qᵀ` on every observed query. `γ = 1` keeps all history.
    pub fn with_decay(mut self, decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::param(format!("decay {decay} outside (0, 1]")));
        }
        self.decay = decay;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.k_x.nrows()
    }

    pub fn k_x(&self) -> &DMatrix<f64> {
        &self.k_x
    }

    pub fn k_q(&self) -> &DMatrix<f64> {
        &self.k_q
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn period(&self) -> u64 {
        self.period
    }

    fn check(&self, v: &[f32]) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                record: 0,
                expected: self.dim(),
                found: v.len(),
            });
        }
        Ok(())
    }

    pub fn add_database(&mut self, x: &[f32]) -> Result<()> {
        self.check(x)?;
        add_outer(&mut self.k_x, x, 1.0);
        self.updates += 1;
        Ok(())
    }

    pub fn remove_database(&mut self, x: &[f32]) -> Result<()> {
        self.check(x)?;
        add_outer(&mut self.k_x, x, -1.0);
        self.updates += 1;
        Ok(())
    }

    pub fn add_query(&mut self, q: &[f32]) -> Result<()> {
        self.check(q)?;
        if self.decay != 1.0 {
            self.k_q *= self.decay;
        }
        add_outer(&mut self.k_q, q, 1.0);
        self.updates += 1;
        Ok(())
    }

    /// True when the counter sits on a multiple of the period.
    pub fn refresh_due(&self) -> bool {
        self.period > 0 && self.updates > 0 && self.updates.is_multiple_of(self.period)
    }

    /// New model: `W` from the eigendecomposition of `K_Q`, `P′` from that of
    /// `W K_X W`.
    pub fn refresh(&self) -> Result<FlexibleSpheringModel> {
        FlexibleSpheringModel::from_second_moments(&self.k_q, &self.k_x)
    }
}

/// A stored sphered row and the epoch of the model that encoded it.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub x_prime: Vec<f32>,
    pub epoch: usize,
}

/// Map from old-epoch `x′` to next-epoch `x′`: `P_new W_new W_old⁺ P_oldᵀ`.
/// `None` when the old `W` was too ill-conditioned to undo.
type Transition = Option<DMatrix<f64>>;

fn transition(old: &FlexibleSpheringModel, new: &FlexibleSpheringModel) -> Transition {
    if old.transform().condition() < CONDITION_WARNING {
        return None;
    }
    Some(new.database_map() * old.w_pinv() * old.p_full().transpose())
}

fn apply_transition(t: &DMatrix<f64>, x: &[f32]) -> Vec<f32> {
    (0..t.nrows())
        .map(|r| {
            (0..t.ncols())
                .map(|k| t[(r, k)] * f64::from(x[k]))
                .sum::<f64>() as f32
        })
        .collect()
}

/// Sphered store with streaming model refreshes.
///
/// Writers (`insert`, `remove`, `observe_query`, `refresh`) take `&mut self`;
/// readers share `&self`. Stale records are brought to the current epoch
/// either all at once ([`StreamingIndex::reproject_all`]) or when read
/// ([`StreamingIndex::get`]); both apply the same per-epoch steps, so they
/// produce identical records.
#[derive(Debug)]
pub struct StreamingIndex {
    stats: SummaryStats,
    /// Model per epoch; epoch 0 is the identity.
    models: Vec<Arc<FlexibleSpheringModel>>,
    transitions: Vec<Transition>,
    store: RwLock<HashMap<u64, Arc<Record>>>,
}

impl StreamingIndex {
    pub fn new(stats: SummaryStats) -> Self {
        let dim = stats.dim();
        StreamingIndex {
            stats,
            models: vec![Arc::new(FlexibleSpheringModel::identity(dim))],
            transitions: Vec::new(),
            store: RwLock::new(HashMap::new()),
        }
    }

    pub fn stats(&self) -> &SummaryStats {
        &self.stats
    }

    pub fn dim(&self) -> usize {
        self.stats.dim()
    }

    pub fn epoch(&self) -> usize {
        self.models.len() - 1
    }

    pub fn model(&self) -> &Arc<FlexibleSpheringModel> {
        self.models.last().expect("epoch 0 always exists")
    }

    pub fn model_at(&self, epoch: usize) -> Option<&Arc<FlexibleSpheringModel>> {
        self.models.get(epoch)
    }

    pub fn len(&self) -> usize {
        self.store.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.read().is_empty()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.store.read().contains_key(&id)
    }

    pub fn ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.store.read().keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    /// Runs a refresh when the update counter says so. A refresh that fails
    /// because no queries have been seen yet is skipped.
    fn after_update(&mut self) -> Result<Option<usize>> {
        if !self.stats.refresh_due() {
            return Ok(None);
        }
        if self.stats.k_q().iter().all(|v| *v == 0.0) {
            log::info!("refresh skipped: no queries observed yet");
            return Ok(None);
        }
        self.refresh().map(Some)
    }

    /// Adds `x x ᵀ` to `K_X` and stores `x′` under the current model.
    /// Returns the new epoch if the update triggered a refresh.
    pub fn insert(&mut self, id: u64, x: &[f32]) -> Result<Option<usize>> {
        if self.contains(id) {
            return Err(Error::DuplicateId(id));
        }
        self.stats.add_database(x)?;
        let record = Record {
            x_prime: self.model().encode(x),
            epoch: self.epoch(),
        };
        self.store.write().insert(id, Arc::new(record));
        self.after_update()
    }

    /// Subtracts `x xᵀ` and drops the record. `x` must be the vector that was
    /// inserted under `id`; it is checked against the stored encoding.
    pub fn remove(&mut self, id: u64, x: &[f32]) -> Result<Option<usize>> {
        let record = self
            .store
            .read()
            .get(&id)
            .cloned()
            .ok_or(Error::UnknownId(id))?;
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                record: 0,
                expected: self.dim(),
                found: x.len(),
            });
        }
        let expect = self.models[record.epoch].encode(x);
        let scale = expect.iter().map(|v| v.abs()).fold(1e-6f32, f32::max);
        let diff = expect
            .iter()
            .zip(&record.x_prime)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        if diff > 1e-3 * scale {
            return Err(Error::param(format!(
                "vector supplied for id {id} does not match the stored record"
            )));
        }
        self.stats.remove_database(x)?;
        self.store.write().remove(&id);
        self.after_update()
    }

    pub fn observe_query(&mut self, q: &[f32]) -> Result<Option<usize>> {
        self.stats.add_query(q)?;
        self.after_update()
    }

    /// Starts a new epoch from the current statistics. Stored records are
    /// left at their epoch until reprojected.
    pub fn refresh(&mut self) -> Result<usize> {
        let model = Arc::new(self.stats.refresh()?);
        let t = transition(self.model(), &model);
        if t.is_none() {
            log::warn!(
                "previous sphering matrix is singular; records from epoch {} need re-ingestion",
                self.epoch()
            );
        }
        self.transitions.push(t);
        self.models.push(model);
        Ok(self.epoch())
    }

    fn bring_forward(&self, id: u64, record: &Record) -> Result<Record> {
        let mut x = record.x_prime.clone();
        for epoch in record.epoch..self.epoch() {
            let t = self.transitions[epoch].as_ref().ok_or_else(|| {
                Error::Numeric(format!(
                    "record {id} was encoded under a singular model (epoch {epoch}); re-ingest it"
                ))
            })?;
            x = apply_transition(t, &x);
        }
        Ok(Record {
            x_prime: x,
            epoch: self.epoch(),
        })
    }

    /// The record for `id` at the current epoch, reprojecting it first if it
    /// is stale. Concurrent readers see either the old or the new record.
    pub fn get(&self, id: u64) -> Result<Arc<Record>> {
        let record = self
            .store
            .read()
            .get(&id)
            .cloned()
            .ok_or(Error::UnknownId(id))?;
        if record.epoch == self.epoch() {
            return Ok(record);
        }
        let fresh = Arc::new(self.bring_forward(id, &record)?);
        let mut store = self.store.write();
        match store.get(&id) {
            Some(current) if current.epoch >= fresh.epoch => Ok(current.clone()),
            Some(_) => {
                store.insert(id, fresh.clone());
                Ok(fresh)
            }
            None => Err(Error::UnknownId(id)),
        }
    }

    /// Reprojects every stale record. Returns how many were updated.
    pub fn reproject_all(&self) -> Result<usize> {
        let mut count = 0;
        for id in self.ids() {
            let stale = self
                .store
                .read()
                .get(&id)
                .is_some_and(|r| r.epoch < self.epoch());
            if stale {
                self.get(id)?;
                count += 1;
            }
        }
        Ok(count)
    }

    /// Replaces the record for `id` by encoding the raw vector under the
    /// current model. Needed after a refusal to reproject.
    pub fn reingest(&self, id: u64, x: &[f32]) -> Result<()> {
        let record = Arc::new(Record {
            x_prime: self.model().encode(x),
            epoch: self.epoch(),
        });
        match self.store.write().get_mut(&id) {
            Some(slot) => {
                *slot = record;
                Ok(())
            }
            None => Err(Error::UnknownId(id)),
        }
    }

    /// Exhaustive top-`k` by `⟨A′q, x′⟩` on the first `d` dimensions; ties go
    /// to the lower id.
    pub fn search(&self, q: &[f32], k: usize, d: usize) -> Result<Vec<(u64, f32)>> {
        if d == 0 || d > self.dim() {
            return Err(Error::param(format!(
                "search dimension {d} outside [1, {}]",
                self.dim()
            )));
        }
        if q.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                record: 0,
                expected: self.dim(),
                found: q.len(),
            });
        }
        let view = self.model().preprocess_query(q);
        let mut scored = Vec::with_capacity(self.len());
        for id in self.ids() {
            let r = self.get(id)?;
            scored.push((id, linalg::dot(&view[..d], &r.x_prime[..d])));
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored)
    }
}

/// One line of a replay log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogOp {
    /// Insert database row `offset` under `id`.
    Insert {
        id: u64,
        offset: usize,
    },
    Remove {
        id: u64,
    },
    /// Observe query row `offset`.
    Query {
        offset: usize,
    },
    Refresh,
}

impl fmt::Display for LogOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LogOp::Insert { id, offset } => write!(f, "INSERT {id} {offset}"),
            LogOp::Remove { id } => write!(f, "REMOVE {id}"),
            LogOp::Query { offset } => write!(f, "QUERY {offset}"),
            LogOp::Refresh => write!(f, "REFRESH"),
        }
    }
}

impl FromStr for LogOp {
    type Err = String;

    fn from_str(line: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let num = |s: &str| s.parse::<u64>().map_err(|_| format!("bad number {s:?}"));
        match parts.as_slice() {
            ["INSERT", id, off] => Ok(LogOp::Insert {
                id: num(id)?,
                offset: num(off)? as usize,
            }),
            ["REMOVE", id] => Ok(LogOp::Remove { id: num(id)? }),
            ["QUERY", off] => Ok(LogOp::Query {
                offset: num(off)? as usize,
            }),
            ["REFRESH"] => Ok(LogOp::Refresh),
            _ => Err(format!("unrecognized operation {line:?}")),
        }
    }
}

/// Parses a log; blank lines and `#` comments are skipped. Errors name the
/// 1-based line.
pub fn parse_log(text: &str) -> Result<Vec<LogOp>> {
    let mut ops = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        ops.push(line.parse().map_err(|reason| Error::Malformed {
            record: n + 1,
            reason,
        })?);
    }
    Ok(ops)
}

pub fn format_log(ops: &[LogOp]) -> String {
    ops.iter().map(|op| format!("{op}\n")).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplaySummary {
    pub inserts: usize,
    pub removes: usize,
    pub queries: usize,
    pub refreshes: usize,
}

/// Applies a log. Row offsets index `database` and `queries`; removals look up
/// the row their id was inserted from.
pub fn replay(
    index: &mut StreamingIndex,
    ops: &[LogOp],
    database: &VectorSet,
    queries: &VectorSet,
) -> Result<ReplaySummary> {
    let mut origin: HashMap<u64, usize> = HashMap::new();
    let mut summary = ReplaySummary::default();
    let row = |set: &VectorSet, offset: usize, what: &str| -> Result<Vec<f32>> {
        if offset >= set.len() {
            return Err(Error::param(format!(
                "{what} offset {offset} beyond {} rows",
                set.len()
            )));
        }
        Ok(set.row(offset).to_vec())
    };
    for op in ops {
        let triggered = match *op {
            LogOp::Insert { id, offset } => {
                let x = row(database, offset, "database")?;
                let t = index.insert(id, &x)?;
                origin.insert(id, offset);
                summary.inserts += 1;
                t
            }
            LogOp::Remove { id } => {
                let offset = *origin.get(&id).ok_or(Error::UnknownId(id))?;
                let x = row(database, offset, "database")?;
                let t = index.remove(id, &x)?;
                origin.remove(&id);
                summary.removes += 1;
                t
            }
            LogOp::Query { offset } => {
                let q = row(queries, offset, "query")?;
                summary.queries += 1;
                index.observe_query(&q)?
            }
            LogOp::Refresh => {
                summary.refreshes += 1;
                index.refresh()?;
                None
            }
        };
        if triggered.is_some() {
            summary.refreshes += 1;
        }
    }
    Ok(summary)
}
