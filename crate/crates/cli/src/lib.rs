//! Implementation of the `biaslens` command line.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use biaslens_core::embedding::{EmbeddingError, FileProvider, HashProvider};
use biaslens_core::engine::{BiasError, ScoringSnapshot};
use biaslens_core::generation::{ImageGenerator, MockGenerator};
use biaslens_core::report::{self, BiasReportRow, Validation};
use biaslens_core::session::{
    import_anchor_images, load_session, save_session, AnchorSpec, ImportOptions, SESSION_FILE,
};
use biaslens_core::synthetic;
use biaslens_core::{AnchorId, EmbeddingProvider, Session, SessionConfig, SessionError};
use biaslens_service::mock::{embedder_router, generator_router};
use biaslens_service::{endpoint_reachable, HttpGenerator, HttpProvider, NoProvider, Router, Server, ServerConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_PROVIDER: u8 = 3;
pub const EXIT_DATA: u8 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("provider error: {0}")]
    Provider(String),
    #[error("data error: {0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Provider(_) => EXIT_PROVIDER,
            CliError::Data(_) => EXIT_DATA,
        }
    }
}

impl From<SessionError> for CliError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::Embedding(EmbeddingError::ProviderUnavailable(m)) => CliError::Provider(m),
            SessionError::InvalidConfig(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<BiasError> for CliError {
    fn from(e: BiasError) -> Self {
        match e {
            BiasError::ProviderUnavailable(_) | BiasError::Provider(_) => CliError::Provider(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn data(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "biaslens",
    version,
    about = "Zero-shot bias probing over image and text embeddings"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the API server.
    Serve(ServeArgs),
    /// Create an empty session directory.
    Init(InitArgs),
    /// Add anchor images to a session.
    Import(ImportArgs),
    /// Score every concept in a file and write a bias report.
    Probe(ProbeArgs),
    /// Test whether one concept separates the two anchors' similarity samples.
    Validate(ValidateArgs),
    /// Mock services and synthetic fixtures for offline use.
    #[command(subcommand)]
    Mock(MockCommand),
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Directory holding the sessions (or a single session).
    #[arg(long)]
    pub session_dir: PathBuf,
    #[arg(long)]
    pub embedder_url: Option<String>,
    #[arg(long)]
    pub generator_url: Option<String>,
    /// Background score workers.
    #[arg(long, default_value_t = 2)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long)]
    pub session: PathBuf,
    #[arg(long, default_value = "session")]
    pub name: String,
    /// Anchor prompt; give at least two.
    #[arg(long = "anchor", required = true)]
    pub anchors: Vec<String>,
    /// Images per anchor.
    #[arg(long, default_value_t = biaslens_core::session::DEFAULT_N)]
    pub n: usize,
    /// Images per generation job.
    #[arg(long, default_value_t = biaslens_core::session::DEFAULT_M)]
    pub m: usize,
}

/// Where text and image embeddings come from.
#[derive(Debug, Args, Default)]
pub struct EmbedderArgs {
    /// Embeddings file with vectors keyed by text and by image hash.
    #[arg(long, conflicts_with = "embedder_url")]
    pub embedder_file: Option<PathBuf>,
    #[arg(long)]
    pub embedder_url: Option<String>,
}

impl EmbedderArgs {
    pub fn provider(&self) -> Result<Arc<dyn EmbeddingProvider>, CliError> {
        if let Some(path) = &self.embedder_file {
            let p = FileProvider::open(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            return Ok(Arc::new(p));
        }
        if let Some(url) = &self.embedder_url {
            return Ok(Arc::new(HttpProvider::new(url.clone())));
        }
        Ok(Arc::new(NoProvider))
    }
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    #[arg(long)]
    pub session: PathBuf,
    /// Anchor id, such as `c1`.
    #[arg(long)]
    pub anchor: String,
    /// PNG files, or directories whose PNG files are imported in name order.
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
    /// Embeddings file keyed by image id (file stem); no provider calls are made.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[command(flatten)]
    pub embedder: EmbedderArgs,
    /// Accept a count different from the session's `n`.
    #[arg(long)]
    pub allow_partial: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub session: PathBuf,
    /// One test concept per line.
    #[arg(long)]
    pub concepts: PathBuf,
    /// Output file; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Concurrent embedding calls; defaults to the number of cores.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[command(flatten)]
    pub embedder: EmbedderArgs,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub session: PathBuf,
    #[arg(long)]
    pub concept: String,
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub embedder: EmbedderArgs,
}

#[derive(Debug, Subcommand)]
pub enum MockCommand {
    /// Serve the embedding provider protocol.
    Embedder {
        #[arg(long, default_value_t = 9001)]
        port: u16,
        /// Serve vectors from this file instead of hashing inputs.
        #[arg(long)]
        embeddings_file: Option<PathBuf>,
        #[arg(long, default_value_t = 512)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Serve the image generator protocol with deterministic noise images.
    Generator {
        #[arg(long, default_value_t = 9002)]
        port: u16,
        /// Images completed per status poll.
        #[arg(long, default_value_t = 1)]
        step: usize,
        /// Delay added to every status response.
        #[arg(long, default_value_t = 0)]
        latency_ms: u64,
        /// Fail jobs whose prompt contains this text.
        #[arg(long)]
        fail_on: Option<String>,
    },
    /// Write a synthetic session plus matching provider embeddings.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = FixtureKind::Separable)]
        kind: FixtureKind,
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FixtureKind {
    Separable,
    Balanced,
}

/// File names written by `mock fixture` next to the session directory.
pub const FIXTURE_SESSION_DIR: &str = "session";
pub const FIXTURE_PROVIDER_FILE: &str = "provider.embeddings.json";
pub const FIXTURE_CONCEPTS_FILE: &str = "concepts.txt";

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Serve(a) => cmd_serve(a),
        Command::Init(a) => cmd_init(&a).map(|s| println!("created session {} in {}", s.id(), a.session.display())),
        Command::Import(a) => cmd_import(&a),
        Command::Probe(a) => {
            let provider = a.embedder.provider()?;
            let (anchors, rows) = cmd_probe(&a.session, &a.concepts, provider.as_ref(), a.jobs)?;
            match &a.out {
                Some(path) => {
                    let file = std::fs::File::create(path).map_err(data)?;
                    write_report(std::io::BufWriter::new(file), a.format, &anchors, &rows)
                }
                None => write_report(std::io::stdout().lock(), a.format, &anchors, &rows),
            }
        }
        Command::Validate(a) => {
            let provider = a.embedder.provider()?;
            let v = cmd_validate(&a.session, &a.concept, provider.as_ref())?;
            if a.json {
                println!("{}", serde_json::to_string_pretty(&v).map_err(data)?);
            } else {
                println!(
                    "D({}) = {:.4}, p = {:.4}: {}",
                    v.ks.n1.min(v.ks.n2),
                    v.ks.d_statistic,
                    v.ks.p_value,
                    v.verdict
                );
            }
            Ok(())
        }
        Command::Mock(m) => cmd_mock(m),
    }
}

pub fn cmd_init(a: &InitArgs) -> Result<Session, CliError> {
    if a.session.join(SESSION_FILE).exists() {
        return Err(CliError::Config(format!(
            "{} already holds a session",
            a.session.display()
        )));
    }
    let config = SessionConfig {
        n: a.n,
        m: a.m,
        dim: None,
    };
    let anchors = a.anchors.iter().map(AnchorSpec::new).collect();
    let session = Session::create(&a.name, anchors, config).map_err(|e| match e {
        SessionError::DuplicateAnchor(_) | SessionError::InvalidConfig(_) => CliError::Config(e.to_string()),
        other => other.into(),
    })?;
    save_session(&session, &a.session)?;
    Ok(session)
}

fn png_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(input)
                .map_err(data)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(input.clone());
        }
    }
    Ok(files)
}

pub fn cmd_import(a: &ImportArgs) -> Result<(), CliError> {
    let mut session = load_session(&a.session)?;
    let files = png_files(&a.images)?;
    let table = a
        .embeddings
        .as_deref()
        .map(biaslens_core::embedding::EmbeddingTable::read)
        .transpose()
        .map_err(data)?;
    let provider = a.embedder.provider()?;
    let report = import_anchor_images(
        &mut session,
        &a.session,
        &AnchorId::new(a.anchor.clone()),
        &files,
        table.as_ref(),
        Some(provider.as_ref()),
        ImportOptions {
            allow_partial: a.allow_partial,
        },
    )?;
    save_session(&session, &a.session)?;
    println!(
        "imported {} images into {} ({} provider calls)",
        report.imported.len(),
        report.anchor,
        report.provider_calls
    );
    Ok(())
}

/// Scores each concept in `concepts_file` against the session's anchors.
pub fn cmd_probe(
    session_dir: &Path,
    concepts_file: &Path,
    provider: &dyn EmbeddingProvider,
    jobs: Option<usize>,
) -> Result<(Vec<AnchorId>, Vec<BiasReportRow>), CliError> {
    let session = load_session(session_dir)?;
    let text = std::fs::read_to_string(concepts_file)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", concepts_file.display())))?;
    let concepts = report::parse_concepts(&text);
    let anchors: Vec<AnchorId> = session.anchors().iter().map(|a| a.id.clone()).collect();
    let snap = ScoringSnapshot::capture(&session, &concepts)?;
    let (rows, _) = report::probe(&snap, &concepts, provider, jobs)?;
    Ok((anchors, rows))
}

pub fn write_report<W: Write>(
    out: W,
    format: Format,
    anchors: &[AnchorId],
    rows: &[BiasReportRow],
) -> Result<(), CliError> {
    match format {
        Format::Csv => report::write_csv(out, anchors, rows).map_err(data),
        Format::Json => report::write_json(out, rows).map_err(data),
    }
}

pub fn cmd_validate(
    session_dir: &Path,
    concept: &str,
    provider: &dyn EmbeddingProvider,
) -> Result<Validation, CliError> {
    let session = load_session(session_dir)?;
    let snap = ScoringSnapshot::capture(&session, &[concept])?;
    Ok(report::validate_concept(&snap, concept, provider)?.0)
}

fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Config(format!("cannot start runtime: {e}")))
}

async fn shutdown_signal() {
    let _ = tokio::signal::ctrl_c().await;
}

/// Binds, prints the address and serves `router` until interrupted.
fn serve_router(host: &str, port: u16, what: &str, router: Router) -> Result<(), CliError> {
    let rt = runtime()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .map_err(|e| CliError::Config(format!("cannot bind {host}:{port}: {e}")))?;
        let addr = listener.local_addr().map_err(data)?;
        println!("{what} listening on http://{addr}");
        let _ = std::io::stdout().flush();
        biaslens_service::serve_router(listener, router, shutdown_signal())
            .await
            .map_err(data)
    })
}

pub fn cmd_serve(a: ServeArgs) -> Result<(), CliError> {
    let provider: Arc<dyn EmbeddingProvider> = match &a.embedder_url {
        Some(url) => {
            if !endpoint_reachable(url) {
                log::warn!("embedder at {url} is unreachable; running in degraded mode until it responds");
            }
            Arc::new(HttpProvider::new(url.clone()))
        }
        None => {
            log::warn!("no --embedder-url given; running in degraded mode, only cached scores are available");
            Arc::new(NoProvider)
        }
    };
    let generator: Option<Arc<dyn ImageGenerator>> = match &a.generator_url {
        Some(url) => {
            if !endpoint_reachable(url) {
                log::warn!("generator at {url} is unreachable; jobs will fail until it responds");
            }
            Some(Arc::new(HttpGenerator::new(url.clone())))
        }
        None => {
            log::info!("no --generator-url given; generation jobs are disabled");
            None
        }
    };
    if a.workers == 0 {
        return Err(CliError::Config("--workers must be at least 1".into()));
    }
    let mut config = ServerConfig::new(&a.session_dir);
    config.workers = a.workers;
    let server = Server::start(config, provider, generator)?;
    let router = biaslens_service::router(server.shared());
    let result = serve_router(&a.host, a.port, "biaslens", router);
    drop(server);
    result
}

pub fn cmd_mock(m: MockCommand) -> Result<(), CliError> {
    match m {
        MockCommand::Embedder {
            port,
            embeddings_file,
            dim,
            seed,
        } => {
            let provider: Arc<dyn EmbeddingProvider> = match embeddings_file {
                Some(path) => Arc::new(
                    FileProvider::open(&path)
                        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?,
                ),
                None => Arc::new(HashProvider::new(dim, seed)),
            };
            serve_router("127.0.0.1", port, "mock embedder", embedder_router(provider))
        }
        MockCommand::Generator {
            port,
            step,
            latency_ms,
            fail_on,
        } => {
            let mut g = MockGenerator::new(step);
            if let Some(marker) = fail_on {
                g = g.failing_on(marker);
            }
            let router = generator_router(Arc::new(g), Duration::from_millis(latency_ms));
            serve_router("127.0.0.1", port, "mock generator", router)
        }
        MockCommand::Fixture {
            out,
            kind,
            n,
            dim,
            seed,
        } => {
            write_fixture(&out, kind, n, dim, seed)?;
            println!(
                "wrote {kind:?} fixture: session {}, provider file {}, concepts {}",
                out.join(FIXTURE_SESSION_DIR).display(),
                out.join(FIXTURE_PROVIDER_FILE).display(),
                out.join(FIXTURE_CONCEPTS_FILE).display()
            );
            Ok(())
        }
    }
}

/// Writes a synthetic session, its provider embeddings and probe concepts.
pub fn write_fixture(out: &Path, kind: FixtureKind, n: usize, dim: usize, seed: u64) -> Result<(), CliError> {
    if dim < 4 {
        return Err(CliError::Config("--dim must be at least 4".into()));
    }
    let fixture = match kind {
        FixtureKind::Separable => synthetic::separable(n, dim, seed),
        FixtureKind::Balanced => synthetic::balanced(n, dim, seed),
    };
    fixture.build_session(&out.join(FIXTURE_SESSION_DIR))?;
    fixture
        .provider_table()
        .write(&out.join(FIXTURE_PROVIDER_FILE))
        .map_err(data)?;
    let mut concepts = fixture.probes.join("\n");
    concepts.push('\n');
    std::fs::write(out.join(FIXTURE_CONCEPTS_FILE), concepts).map_err(data)?;
    Ok(())
}
