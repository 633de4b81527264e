//! Persistent dataset catalog and query job table, shared by the HTTP
//! service and the CLI so both paths run the same code.
//!
//! On disk, each dataset lives in `<data_dir>/datasets/<id>/`:
//!
//! * `descriptor.json`: id and name (counts are recomputed on load);
//! * `store/`: the persisted entity and relationship stores;
//! * `raw/`: the ingested documents and sidecars after re-segmentation.
//!
//! New datasets are built in a hidden temporary directory and renamed into
//! place. Updates write a complete `store.next/` and swap it in.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use scenequery_core::backends::mock::{MockEmbedder, MockVerifier};
use scenequery_core::backends::remote::{RemoteEmbedder, RemoteVerifier};
use scenequery_core::backends::{Embedder, GroundTruth, SegmentTruth, Verifier};
use scenequery_core::dataset::PersistError;
use scenequery_core::engine::Stage;
use scenequery_core::ingest::IngestStats;
use scenequery_core::model::{validate_query, Fps, HyperParamError, ValidationReport};
use scenequery_core::{Dataset, EngineError, ExecutionReport, HyperParams, MatchResult, QueryEngine, QuerySpec};
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::archive::{Archive, ArchiveError, Diagnostic};
use crate::config::{BackendConfig, BackendKind, ServiceConfig};

const DESCRIPTOR_FILE: &str = "descriptor.json";
const STORE_DIR: &str = "store";
const RAW_DIR: &str = "raw";
/// Finished query records kept in memory.
const RETAINED_QUERIES: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub preprocessed: String,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub dataset_id: String,
    pub name: String,
    pub segment_count: usize,
    pub entity_count: usize,
    pub relationship_count: usize,
    pub frame_count: usize,
    pub dimension: usize,
    /// Frame rate shared by every segment, when there is one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<Fps>,
    pub paths: DatasetPaths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSummary {
    pub vid: String,
    pub source_video: String,
    pub fps: Fps,
    pub first_frame: Option<u32>,
    pub last_frame: Option<u32>,
    pub frame_count: usize,
    pub entity_count: usize,
    pub relationship_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestOutcome {
    pub descriptor: DatasetDescriptor,
    pub stats: IngestStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryStatus {
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryFailure {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
    pub message: String,
}

/// Status and payload of one query execution. This is what the CLI prints
/// and what `GET /queries/{id}` returns alongside the ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryState {
    pub status: QueryStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub results: Option<Vec<MatchResult>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<ExecutionReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<QueryFailure>,
}

impl QueryState {
    fn running() -> Self {
        Self { status: QueryStatus::Running, results: None, report: None, error: None }
    }

    fn from_outcome(outcome: Result<scenequery_core::QueryOutcome, EngineError>) -> Self {
        match outcome {
            Ok(o) => Self { status: QueryStatus::Done, results: Some(o.results), report: Some(o.report), error: None },
            Err(e) => Self {
                status: QueryStatus::Failed,
                results: None,
                report: None,
                error: Some(QueryFailure { stage: e.stage(), message: e.to_string() }),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub dataset_id: String,
    #[serde(flatten)]
    pub state: QueryState,
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{kind} {id:?} not found")]
    NotFound { kind: &'static str, id: String },
    #[error("invalid archive ({} problems)", .0.len())]
    InvalidArchive(Vec<Diagnostic>),
    #[error("malformed query document: {0}")]
    MalformedQuery(String),
    #[error("invalid query:\n{0}")]
    InvalidQuery(ValidationReport),
    #[error("invalid parameters: {0}")]
    InvalidParams(#[from] HyperParamError),
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Persist(#[from] PersistError),
}

impl From<ArchiveError> for ServiceError {
    fn from(e: ArchiveError) -> Self {
        match e {
            ArchiveError::Io { path, source } => ServiceError::Io { path, source },
            ArchiveError::Invalid(d) => ServiceError::InvalidArchive(d),
        }
    }
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> ServiceError + '_ {
    move |source| ServiceError::Io { path: path.display().to_string(), source }
}

/// Immutable view of a dataset; replaced wholesale on update.
struct Snapshot {
    descriptor: DatasetDescriptor,
    dataset: Dataset,
    truth: BTreeMap<String, SegmentTruth>,
    embedder: Arc<dyn Embedder>,
    verifier: Arc<dyn Verifier>,
}

struct Entry {
    dir: PathBuf,
    /// Write lease: one ingestion at a time per dataset.
    lease: Mutex<()>,
    current: RwLock<Arc<Snapshot>>,
}

impl Entry {
    fn snapshot(&self) -> Arc<Snapshot> {
        self.current.read().expect("snapshot lock").clone()
    }
}

#[derive(Default)]
struct JobTable {
    records: HashMap<String, QueryRecord>,
    finished: VecDeque<String>,
}

impl JobTable {
    fn finish(&mut self, id: &str, state: QueryState) {
        if let Some(r) = self.records.get_mut(id) {
            r.state = state;
            self.finished.push_back(id.to_owned());
        }
        while self.finished.len() > RETAINED_QUERIES {
            if let Some(old) = self.finished.pop_front() {
                self.records.remove(&old);
            }
        }
    }
}

/// A validated query waiting to run on its dataset snapshot.
pub struct QueryJob {
    pub query_id: String,
    snapshot: Arc<Snapshot>,
    engine: Arc<QueryEngine>,
    jobs: Arc<Mutex<JobTable>>,
    query: QuerySpec,
    params: HyperParams,
}

impl QueryJob {
    /// Executes the query and records its final state.
    pub fn run(self) -> QueryState {
        let s = &self.snapshot;
        let state = QueryState::from_outcome(self.engine.execute(&s.dataset, &*s.embedder, &*s.verifier, &self.query, &self.params));
        if state.status == QueryStatus::Failed {
            warn!(query = %self.query_id, error = ?state.error, "query failed");
        }
        self.jobs.lock().expect("job table").finish(&self.query_id, state.clone());
        state
    }
}

pub struct Catalog {
    root: PathBuf,
    backend: BackendConfig,
    segment_length: Option<usize>,
    engine: Arc<QueryEngine>,
    remote: Option<(Arc<RemoteEmbedder>, Arc<RemoteVerifier>)>,
    datasets: RwLock<BTreeMap<String, Arc<Entry>>>,
    jobs: Arc<Mutex<JobTable>>,
    /// Serializes id allocation for new datasets.
    create: Mutex<()>,
}

impl std::fmt::Debug for Catalog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Catalog").field("root", &self.root).field("backend", &self.backend.kind).finish_non_exhaustive()
    }
}

fn slug(name: &str) -> String {
    let mut s = String::new();
    for c in name.chars().flat_map(char::to_lowercase) {
        if c.is_ascii_alphanumeric() {
            s.push(c);
        } else if !s.ends_with('-') {
            s.push('-');
        }
    }
    let s = s.trim_matches('-').to_owned();
    if s.is_empty() {
        "dataset".into()
    } else {
        s
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ServiceError> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io_at(&tmp))?;
    f.write_all(bytes).map_err(io_at(&tmp))?;
    f.sync_all().map_err(io_at(&tmp))?;
    fs::rename(&tmp, path).map_err(io_at(path))
}

/// Saves `dataset` as `dir/store`, replacing any previous store only once
/// the new one is complete.
fn save_store(dir: &Path, dataset: &Dataset) -> Result<(), ServiceError> {
    let (cur, next, old) = (dir.join(STORE_DIR), dir.join("store.next"), dir.join("store.old"));
    if next.exists() {
        fs::remove_dir_all(&next).map_err(io_at(&next))?;
    }
    dataset.save(&next)?;
    if cur.exists() {
        fs::rename(&cur, &old).map_err(io_at(&cur))?;
    }
    fs::rename(&next, &cur).map_err(io_at(&next))?;
    if old.exists() {
        fs::remove_dir_all(&old).map_err(io_at(&old))?;
    }
    Ok(())
}

/// Completes an interrupted store swap.
fn recover_store(dir: &Path) -> Result<(), ServiceError> {
    let (cur, next, old) = (dir.join(STORE_DIR), dir.join("store.next"), dir.join("store.old"));
    if !cur.exists() {
        // a complete store.next only exists once the old store was moved aside
        if next.exists() && old.exists() {
            fs::rename(&next, &cur).map_err(io_at(&next))?;
        } else if old.exists() {
            fs::rename(&old, &cur).map_err(io_at(&old))?;
        }
    }
    for leftover in [next, old] {
        if leftover.exists() {
            fs::remove_dir_all(&leftover).map_err(io_at(&leftover))?;
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct StoredDescriptor {
    dataset_id: String,
    name: String,
}

impl Catalog {
    /// Opens (creating if needed) the catalog under `config.data_dir` and
    /// reloads every persisted dataset.
    pub fn open(config: &ServiceConfig) -> Result<Self, ServiceError> {
        config.validate().map_err(|e| ServiceError::Config(e.to_string()))?;
        let root = config.data_dir.join("datasets");
        fs::create_dir_all(&root).map_err(io_at(&root))?;
        let remote = (config.backend.kind == BackendKind::Remote).then(|| {
            (
                Arc::new(RemoteEmbedder::new(config.backend.remote.clone())),
                Arc::new(RemoteVerifier::new(config.backend.remote.clone())),
            )
        });
        let engine = QueryEngine::new(config.engine.clone()).map_err(|e| ServiceError::Config(e.to_string()))?;
        let catalog = Self {
            root: root.clone(),
            backend: config.backend.clone(),
            segment_length: config.segment_length,
            engine: Arc::new(engine),
            remote,
            datasets: RwLock::new(BTreeMap::new()),
            jobs: Arc::new(Mutex::new(JobTable::default())),
            create: Mutex::new(()),
        };

        let mut names: Vec<String> = fs::read_dir(&root)
            .map_err(io_at(&root))?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_ok_and(|t| t.is_dir()))
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        names.sort();
        let mut map = BTreeMap::new();
        for name in names {
            let dir = root.join(&name);
            if name.starts_with('.') {
                // an interrupted creation
                fs::remove_dir_all(&dir).map_err(io_at(&dir))?;
                continue;
            }
            let entry = catalog.load_entry(&dir)?;
            map.insert(name, Arc::new(entry));
        }
        info!(datasets = map.len(), root = %root.display(), "catalog opened");
        *catalog.datasets.write().expect("catalog lock") = map;
        Ok(catalog)
    }

    pub fn engine(&self) -> &QueryEngine {
        &self.engine
    }

    fn load_entry(&self, dir: &Path) -> Result<Entry, ServiceError> {
        let path = dir.join(DESCRIPTOR_FILE);
        let text = fs::read(&path).map_err(io_at(&path))?;
        let stored: StoredDescriptor = serde_json::from_slice(&text)
            .map_err(|e| ServiceError::Persist(PersistError::Json { path: path.display().to_string(), source: e }))?;
        recover_store(dir)?;
        let dataset = Dataset::load(&dir.join(STORE_DIR))?;
        if dataset.dimension() != self.backend.dimension() {
            return Err(ServiceError::Config(format!(
                "dataset {:?} has embedding dimension {} but the configured backend produces {}",
                stored.dataset_id,
                dataset.dimension(),
                self.backend.dimension()
            )));
        }
        let raw = Archive::read_dir(&dir.join(RAW_DIR))?;
        let truth = raw.sidecars.into_iter().map(|s| (s.vid.clone(), s)).collect();
        let snapshot = self.snapshot(stored.dataset_id, stored.name, dir, dataset, truth)?;
        Ok(Entry { dir: dir.to_owned(), lease: Mutex::new(()), current: RwLock::new(Arc::new(snapshot)) })
    }

    fn backends(&self, truth: &BTreeMap<String, SegmentTruth>) -> Result<(Arc<dyn Embedder>, Arc<dyn Verifier>), Vec<Diagnostic>> {
        if let Some((e, v)) = &self.remote {
            return Ok((e.clone(), v.clone()));
        }
        let truth = GroundTruth::from_segments(truth.values().cloned())
            .map_err(|e| vec![Diagnostic::new("sidecars", None, e)])?;
        let truth = Arc::new(truth);
        let embedder = MockEmbedder::new(self.backend.mock.seed, self.backend.mock.dimension).with_truth(truth.clone());
        Ok((Arc::new(embedder), Arc::new(MockVerifier::new(truth))))
    }

    fn snapshot(
        &self,
        dataset_id: String,
        name: String,
        dir: &Path,
        dataset: Dataset,
        truth: BTreeMap<String, SegmentTruth>,
    ) -> Result<Snapshot, ServiceError> {
        let (embedder, verifier) = self.backends(&truth).map_err(ServiceError::InvalidArchive)?;
        let fps = {
            let mut rates = dataset.segments().map(|s| s.fps);
            let first = rates.next();
            first.filter(|f| rates.all(|r| r == *f))
        };
        let descriptor = DatasetDescriptor {
            dataset_id,
            name,
            segment_count: dataset.segment_count(),
            entity_count: dataset.entities().len(),
            relationship_count: dataset.relationships().len(),
            frame_count: dataset.total_frames(),
            dimension: dataset.dimension(),
            fps,
            paths: DatasetPaths {
                preprocessed: dir.join(STORE_DIR).display().to_string(),
                raw: dir.join(RAW_DIR).display().to_string(),
            },
        };
        Ok(Snapshot { descriptor, dataset, truth, embedder, verifier })
    }

    fn entry(&self, id: &str) -> Result<Arc<Entry>, ServiceError> {
        self.datasets
            .read()
            .expect("catalog lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound { kind: "dataset", id: id.to_owned() })
    }

    pub fn list(&self) -> Vec<DatasetDescriptor> {
        self.datasets.read().expect("catalog lock").values().map(|e| e.snapshot().descriptor.clone()).collect()
    }

    pub fn describe(&self, id: &str) -> Result<DatasetDescriptor, ServiceError> {
        Ok(self.entry(id)?.snapshot().descriptor.clone())
    }

    pub fn segments(&self, id: &str) -> Result<Vec<SegmentSummary>, ServiceError> {
        let snap = self.entry(id)?.snapshot();
        let ds = &snap.dataset;
        Ok(ds
            .segments()
            .map(|s| SegmentSummary {
                vid: s.vid.clone(),
                source_video: s.source_video.clone(),
                fps: s.fps,
                first_frame: s.first_frame(),
                last_frame: s.last_frame(),
                frame_count: s.frame_ids.len(),
                entity_count: ds.entities().segment(&s.vid).map_or(0, |r| r.len()),
                relationship_count: ds.relationships().segment(&s.vid).map_or(0, |r| r.len()),
            })
            .collect())
    }

    fn prepare(&self, archive: Archive, segment_length: Option<usize>) -> Result<Archive, ServiceError> {
        archive.check().map_err(ServiceError::InvalidArchive)?;
        match segment_length.or(self.segment_length) {
            Some(0) => Err(ServiceError::InvalidArchive(vec![Diagnostic::new("segment_length", None, "must be positive")])),
            Some(n) => archive.resegment(n).map_err(ServiceError::InvalidArchive),
            None => Ok(archive),
        }
    }

    fn ingest_into(
        &self,
        dataset: &mut Dataset,
        archive: &Archive,
        embedder: &dyn Embedder,
        replace: bool,
    ) -> Result<IngestStats, ServiceError> {
        let docs: Vec<_> = archive.documents.iter().map(|d| d.document.clone()).collect();
        let diag = |index: usize, e: &dyn ToString| {
            let d = &archive.documents[index];
            Diagnostic::new(&d.origin, Some(d.document.vid()), e.to_string())
        };
        if !replace {
            return dataset
                .ingest_batch(&docs, embedder)
                .map_err(|errs| ServiceError::InvalidArchive(errs.iter().map(|e| diag(e.index, &e.error)).collect()));
        }
        let mut stats = IngestStats::default();
        for (i, d) in docs.iter().enumerate() {
            let s = dataset.upsert_segment(d, embedder).map_err(|e| ServiceError::InvalidArchive(vec![diag(i, &e)]))?;
            stats.merge(&s);
        }
        Ok(stats)
    }

    /// Ingests a whole archive as a new dataset. Any invalid member rejects
    /// the archive; nothing is persisted in that case.
    pub fn create_dataset(
        &self,
        name: Option<String>,
        archive: Archive,
        segment_length: Option<usize>,
    ) -> Result<IngestOutcome, ServiceError> {
        let archive = self.prepare(archive, segment_length)?;
        let truth: BTreeMap<String, SegmentTruth> = archive.sidecars.iter().map(|s| (s.vid.clone(), s.clone())).collect();
        let (embedder, _) = self.backends(&truth).map_err(ServiceError::InvalidArchive)?;
        let mut dataset = Dataset::new(self.backend.dimension());
        let stats = self.ingest_into(&mut dataset, &archive, &*embedder, false)?;
        let name = name.unwrap_or_else(|| "dataset".into());

        let _guard = self.create.lock().expect("create lock");
        let base = slug(&name);
        let id = {
            let taken = self.datasets.read().expect("catalog lock");
            let mut id = base.clone();
            let mut n = 2;
            while taken.contains_key(&id) || self.root.join(&id).exists() {
                id = format!("{base}-{n}");
                n += 1;
            }
            id
        };
        let tmp = self.root.join(format!(".tmp-{}", uuid::Uuid::new_v4().simple()));
        let dir = self.root.join(&id);
        let built = (|| {
            fs::create_dir_all(&tmp).map_err(io_at(&tmp))?;
            archive.write_dir(&tmp.join(RAW_DIR)).map_err(io_at(&tmp))?;
            dataset.save(&tmp.join(STORE_DIR))?;
            let stored = StoredDescriptor { dataset_id: id.clone(), name: name.clone() };
            write_file(&tmp.join(DESCRIPTOR_FILE), &serde_json::to_vec_pretty(&stored).expect("serializes"))?;
            fs::rename(&tmp, &dir).map_err(io_at(&dir))
        })();
        if let Err(e) = built {
            let _ = fs::remove_dir_all(&tmp);
            return Err(e);
        }
        let snapshot = self.snapshot(id.clone(), name, &dir, dataset, truth)?;
        let descriptor = snapshot.descriptor.clone();
        let entry = Entry { dir, lease: Mutex::new(()), current: RwLock::new(Arc::new(snapshot)) };
        self.datasets.write().expect("catalog lock").insert(id.clone(), Arc::new(entry));
        info!(dataset = %id, segments = descriptor.segment_count, "dataset created");
        Ok(IngestOutcome { descriptor, stats })
    }

    /// Adds or replaces segments of an existing dataset under its write
    /// lease. Untouched segments keep their stored records; queries keep
    /// running against the previous snapshot until the swap.
    pub fn upsert_segments(
        &self,
        id: &str,
        archive: Archive,
        segment_length: Option<usize>,
    ) -> Result<IngestOutcome, ServiceError> {
        let entry = self.entry(id)?;
        let _lease = entry.lease.lock().expect("dataset lease");
        let snap = entry.snapshot();
        let archive = self.prepare(archive, segment_length)?;

        let mut truth = snap.truth.clone();
        for s in &archive.sidecars {
            truth.insert(s.vid.clone(), s.clone());
        }
        let (embedder, _) = self.backends(&truth).map_err(ServiceError::InvalidArchive)?;
        let mut dataset = snap.dataset.clone();
        let stats = self.ingest_into(&mut dataset, &archive, &*embedder, true)?;

        save_store(&entry.dir, &dataset)?;
        let raw = entry.dir.join(RAW_DIR);
        archive.write_dir(&raw).map_err(io_at(&raw))?;
        let next = self.snapshot(snap.descriptor.dataset_id.clone(), snap.descriptor.name.clone(), &entry.dir, dataset, truth)?;
        let descriptor = next.descriptor.clone();
        *entry.current.write().expect("snapshot lock") = Arc::new(next);
        info!(dataset = %id, added = stats.segments_added, replaced = stats.segments_replaced, "segments upserted");
        Ok(IngestOutcome { descriptor, stats })
    }

    /// Validates a query against a dataset and registers it as running.
    pub fn submit_query(&self, dataset_id: &str, query: QuerySpec, params: HyperParams) -> Result<QueryJob, ServiceError> {
        let snapshot = self.entry(dataset_id)?.snapshot();
        params.validate()?;
        let report = validate_query(&query);
        if !report.is_valid() {
            return Err(ServiceError::InvalidQuery(report));
        }
        let query_id = uuid::Uuid::new_v4().simple().to_string();
        let record = QueryRecord { query_id: query_id.clone(), dataset_id: dataset_id.to_owned(), state: QueryState::running() };
        self.jobs.lock().expect("job table").records.insert(query_id.clone(), record);
        Ok(QueryJob { query_id, snapshot, engine: self.engine.clone(), jobs: self.jobs.clone(), query, params })
    }

    /// Submits and runs a query on the calling thread.
    pub fn run_query(&self, dataset_id: &str, query: QuerySpec, params: HyperParams) -> Result<QueryRecord, ServiceError> {
        let job = self.submit_query(dataset_id, query, params)?;
        let id = job.query_id.clone();
        job.run();
        self.query(&id)
    }

    pub fn query(&self, query_id: &str) -> Result<QueryRecord, ServiceError> {
        self.jobs
            .lock()
            .expect("job table")
            .records
            .get(query_id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound { kind: "query", id: query_id.to_owned() })
    }

    /// Rewrites every descriptor. Stores are already durable after each
    /// write, so this only guards against a torn descriptor.
    pub fn flush(&self) -> Result<(), ServiceError> {
        for entry in self.datasets.read().expect("catalog lock").values() {
            let d = &entry.snapshot().descriptor;
            let stored = StoredDescriptor { dataset_id: d.dataset_id.clone(), name: d.name.clone() };
            write_file(&entry.dir.join(DESCRIPTOR_FILE), &serde_json::to_vec_pretty(&stored).expect("serializes"))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs() {
        assert_eq!(slug("Street Cam 02 (daytime)"), "street-cam-02-daytime");
        assert_eq!(slug("  "), "dataset");
        assert_eq!(slug("Ünïcode"), "n-code");
    }

    #[test]
    fn store_swap_recovers_each_crash_point() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::new(8);
        save_store(dir.path(), &ds).unwrap();
        // crash after moving the old store aside
        fs::rename(dir.path().join(STORE_DIR), dir.path().join("store.old")).unwrap();
        ds.save(&dir.path().join("store.next")).unwrap();
        recover_store(dir.path()).unwrap();
        assert_eq!(Dataset::load(&dir.path().join(STORE_DIR)).unwrap(), ds);
        assert!(!dir.path().join("store.old").exists());
        // crash while writing store.next
        fs::create_dir_all(dir.path().join("store.next")).unwrap();
        recover_store(dir.path()).unwrap();
        assert!(!dir.path().join("store.next").exists());
        assert_eq!(Dataset::load(&dir.path().join(STORE_DIR)).unwrap(), ds);
    }
}
