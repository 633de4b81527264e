//! `scenequery`: ingest scene-graph archives, run moment queries and serve
//! the HTTP API over the same on-disk catalog.
//!
//! Output is JSON on stdout. `--pretty` switches to a human summary. Errors
//! go to stderr as the same JSON bodies the HTTP API returns.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid input.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scenequery_core::model::parse_query;
use scenequery_core::synth::{self, CorpusConfig, BACKPACK_BICYCLE_QUERY};
use scenequery_core::HyperParams;
use scenequery_service::api::{error_payload, validate_document};
use scenequery_service::config::ConfigError;
use scenequery_service::{
    Archive, BackendKind, Catalog, DatasetDescriptor, IngestOutcome, QueryState, QueryStatus, ServiceConfig, ServiceError,
};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "scenequery", version, about = "Moment retrieval over scene-graph video archives")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML configuration file. Environment variables override it, flags override both.
    #[arg(long, global = true, env = "SCENEQUERY_CONFIG")]
    config: Option<PathBuf>,
    /// Directory holding ingested datasets.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    backend: Option<Backend>,
    /// Human-readable output instead of JSON.
    #[arg(long, global = true)]
    pretty: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Mock,
    Remote,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest an archive directory as a new dataset.
    Ingest {
        /// Directory of `*.json` scene graphs and `*.truth.json` sidecars.
        #[arg(long)]
        dataset: PathBuf,
        /// Dataset name; defaults to the directory name.
        #[arg(long)]
        name: Option<String>,
        /// Split documents longer than this many frames.
        #[arg(long)]
        segment_length: Option<usize>,
    },
    /// Run a query document against a dataset.
    Query {
        /// Dataset id.
        #[arg(long)]
        dataset: String,
        /// Query document (JSON).
        query: PathBuf,
        #[command(flatten)]
        params: ParamArgs,
        /// Also print the relational filters issued per triple, on stderr.
        #[arg(long)]
        explain: bool,
    },
    /// Check a query document without running it.
    Validate { query: PathBuf },
    /// List datasets, or describe one.
    Datasets { id: Option<String> },
    /// Serve the HTTP API until interrupted.
    Serve {
        /// Socket address; overrides the configuration.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Write a synthetic archive and a matching query document.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "backpack")]
        corpus: SynthCorpus,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthCorpus {
    Backpack,
    Sparse,
    Random,
}

#[derive(Args)]
struct ParamArgs {
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    text_threshold: Option<f64>,
    #[arg(long)]
    image_threshold: Option<f64>,
    /// Require candidate rows to carry a label similar to the relationship.
    #[arg(long)]
    rel_label_threshold: Option<f64>,
}

impl ParamArgs {
    fn params(&self) -> HyperParams {
        let mut p = HyperParams::default();
        if let Some(v) = self.top_k {
            p.top_k = v;
        }
        if let Some(v) = self.temperature {
            p.temperature = v;
        }
        if let Some(v) = self.text_threshold {
            p.text_threshold = v;
        }
        if let Some(v) = self.image_threshold {
            p.image_threshold = v;
        }
        p.rel_label_threshold = self.rel_label_threshold;
        p
    }
}

/// A failed command: the JSON body for stderr and the exit code.
struct Failure {
    code: u8,
    body: Value,
}

impl From<ServiceError> for Failure {
    fn from(e: ServiceError) -> Self {
        let (status, body) = error_payload(&e);
        Failure { code: if status.is_client_error() { 2 } else { 1 }, body }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        invalid("invalid_config", e)
    }
}

fn invalid(code: &str, message: impl ToString) -> Failure {
    Failure { code: 2, body: json!({ "error": code, "message": message.to_string() }) }
}

fn internal(message: impl ToString) -> Failure {
    Failure { code: 1, body: json!({ "error": "internal", "message": message.to_string() }) }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = if matches!(cli.command, Command::Serve { .. }) { "info" } else { "warn" };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| default_level.into());
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.body);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(g: &Global) -> Result<ServiceConfig, Failure> {
    let mut config = ServiceConfig::load(g.config.as_deref())?;
    if let Some(dir) = &g.data_dir {
        config.data_dir = dir.clone();
    }
    if let Some(b) = g.backend {
        config.backend.kind = match b {
            Backend::Mock => BackendKind::Mock,
            Backend::Remote => BackendKind::Remote,
        };
    }
    config.validate()?;
    Ok(config)
}

fn emit(pretty: bool, value: &impl serde::Serialize, human: impl FnOnce() -> String) {
    if pretty {
        print!("{}", human());
    } else {
        println!("{}", serde_json::to_string(value).expect("serializes"));
    }
}

fn read_file(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| internal(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let g = &cli.global;
    match cli.command {
        Command::Ingest { dataset, name, segment_length } => {
            let config = load_config(g)?;
            let archive = Archive::read_dir(&dataset).map_err(|e| match e {
                scenequery_service::archive::ArchiveError::Io { .. } => internal(e),
                scenequery_service::archive::ArchiveError::Invalid(d) => ServiceError::InvalidArchive(d).into(),
            })?;
            let name = name.or_else(|| dataset.file_name().map(|n| n.to_string_lossy().into_owned()));
            let catalog = Catalog::open(&config)?;
            let outcome = catalog.create_dataset(name, archive, segment_length)?;
            catalog.flush()?;
            emit(g.pretty, &outcome, || ingest_text(&outcome));
            Ok(())
        }
        Command::Query { dataset, query, params, explain } => {
            let config = load_config(g)?;
            let text = read_file(&query)?;
            let spec = parse_query(&text).map_err(|e| ServiceError::MalformedQuery(e.to_string()))?;
            let catalog = Catalog::open(&config)?;
            let record = catalog.run_query(&dataset, spec, params.params())?;
            let state = record.state;
            if explain {
                if let Some(r) = &state.report {
                    for f in &r.filters {
                        eprintln!("{f}");
                    }
                }
            }
            emit(g.pretty, &state, || query_text(&state));
            if state.status == QueryStatus::Failed {
                return Err(Failure { code: 1, body: serde_json::to_value(&state.error).expect("serializes") });
            }
            Ok(())
        }
        Command::Validate { query } => {
            let text = read_file(&query)?;
            let v = serde_json::from_str::<Value>(&text).unwrap_or(Value::String(text));
            let response = validate_document(&v);
            let valid = response.valid;
            emit(g.pretty, &response, || {
                let mut s = String::new();
                match (&response.error, valid) {
                    (Some(e), _) => s.push_str(&format!("malformed: {e}\n")),
                    (None, true) => s.push_str("valid\n"),
                    (None, false) => s.push_str("invalid\n"),
                }
                for f in &response.findings {
                    s.push_str(&format!("  {}\n", f.message));
                }
                s
            });
            if valid {
                Ok(())
            } else {
                let code = if response.error.is_some() { "malformed_query" } else { "invalid_query" };
                Err(Failure { code: 2, body: json!({ "error": code, "findings": response.findings }) })
            }
        }
        Command::Datasets { id } => {
            let config = load_config(g)?;
            let catalog = Catalog::open(&config)?;
            match id {
                Some(id) => {
                    let d = catalog.describe(&id)?;
                    emit(g.pretty, &d, || describe_text(&d));
                }
                None => {
                    let all = catalog.list();
                    emit(g.pretty, &all, || all.iter().map(describe_text).collect::<Vec<_>>().join("\n"));
                }
            }
            Ok(())
        }
        Command::Serve { listen } => {
            let mut config = load_config(g)?;
            if let Some(l) = listen {
                config.listen = l;
                config.validate()?;
            }
            let catalog = Arc::new(Catalog::open(&config)?);
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(internal)?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(&config.listen)
                    .await
                    .map_err(|e| internal(format!("{}: {e}", config.listen)))?;
                scenequery_service::api::serve(catalog, listener, scenequery_service::api::shutdown_signal()).await?;
                Ok(())
            })
        }
        Command::Synth { out, corpus, seed } => {
            let (corpus, query) = match corpus {
                SynthCorpus::Backpack => (synth::backpack_bicycle_corpus(), BACKPACK_BICYCLE_QUERY.to_owned()),
                SynthCorpus::Sparse => (synth::sparse_corpus(seed), BACKPACK_BICYCLE_QUERY.to_owned()),
                SynthCorpus::Random => {
                    let c = synth::random_corpus(seed, &CorpusConfig::default());
                    let q = synth::random_query(&mut ChaCha8Rng::seed_from_u64(seed), &c);
                    let q = serde_json::to_string_pretty(&q).expect("serializes");
                    (c, q)
                }
            };
            let archive = Archive {
                documents: corpus
                    .docs
                    .into_iter()
                    .map(|d| scenequery_service::archive::NamedDocument { origin: d.vid().to_owned(), document: d })
                    .collect(),
                sidecars: corpus.truth,
            };
            let io = |e: std::io::Error| internal(format!("{}: {e}", out.display()));
            archive.write_dir(&out.join("archive")).map_err(io)?;
            std::fs::write(out.join("query.json"), query).map_err(io)?;
            let summary = json!({
                "archive": out.join("archive"),
                "query": out.join("query.json"),
                "segments": archive.documents.len(),
            });
            emit(g.pretty, &summary, || format!("wrote {} segments to {}\n", archive.documents.len(), out.display()));
            Ok(())
        }
    }
}

fn describe_text(d: &DatasetDescriptor) -> String {
    format!(
        "{} ({})\n  segments {}  frames {}  entities {}  relationships {}  dimension {}\n  store {}\n",
        d.dataset_id, d.name, d.segment_count, d.frame_count, d.entity_count, d.relationship_count, d.dimension, d.paths.preprocessed
    )
}

fn ingest_text(o: &IngestOutcome) -> String {
    let s = &o.stats;
    format!(
        "{}added {} segments, replaced {}; {} entities, {} relationships embedded\n",
        describe_text(&o.descriptor),
        s.segments_added,
        s.segments_replaced,
        s.entities_added,
        s.relationships_added
    )
}

fn query_text(state: &QueryState) -> String {
    let mut s = String::new();
    if let Some(e) = &state.error {
        let stage = e.stage.map(|st| format!(" in {st}")).unwrap_or_default();
        s.push_str(&format!("failed{stage}: {}\n", e.message));
        return s;
    }
    let results = state.results.as_deref().unwrap_or_default();
    if results.is_empty() {
        s.push_str("no matching moments\n");
    }
    for (i, r) in results.iter().enumerate() {
        let bindings: Vec<String> = r.entity_bindings.iter().map(|(k, v)| format!("{k}={v}")).collect();
        s.push_str(&format!("{}. {} frames {:?} score {:.4} [{}]\n", i + 1, r.vid, r.frame_assignment, r.score, bindings.join(" ")));
    }
    if let Some(r) = &state.report {
        s.push_str(&format!(
            "searched {} segments, {} rows; {} coarse pairs, {} verifier calls ({} failed), {} assignments\n",
            r.total_segments, r.total_rows, r.coarse_pairs, r.verifier_calls, r.verifier_failures, r.assignments
        ));
    }
    s
}
