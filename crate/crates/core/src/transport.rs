//! Client–server protocol and the dispatch service.
//!
//! Frames are a 4-byte big-endian body length followed by a UTF-8 JSON body.
//! Bodies are canonical (sorted keys, no whitespace) and always carry
//! `protocol_version` alongside the `type` tag.
//!
//! The [`DispatchServer`] is transport-agnostic: it maps request frames to
//! response frames. [`InProcess`] drives it directly through the byte path;
//! [`serve_tcp`] / [`TcpTransport`] put the same frames on a socket.

use std::collections::{HashMap, HashSet};
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::{self, JoinHandle};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundler::{canonical_json, diff, BundlePatch, TestBundle};
use crate::client_sim::{ExecutionResult, Outcome};
use crate::registry::{DeviceId, DeviceProfile, Registry};
use crate::scheduler::{allocate, Assignment, CrashReport, Dispatch, DispatchCursor, SchedulerError, Strategy};
use crate::testbank::{TestBank, TestCase};

pub const PROTOCOL_VERSION: u32 = 1;
pub const MAX_FRAME_BYTES: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    Malformed,
    UnsupportedVersion,
    UnexpectedMessage,
    InvalidProfile,
    RegistrationClosed,
    UnknownDevice,
    NotReady,
    StaleCursor,
    StaleBatch,
    ProtocolViolation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Message {
    Register {
        profile: DeviceProfile,
    },
    Registered {
        device_id: DeviceId,
    },
    BatchRequest {
        device_id: DeviceId,
        /// Queue position just past the last batch the client received.
        cursor_position: usize,
        bundle_version: u64,
        crash_report: Option<CrashReport>,
    },
    BatchResponse {
        batch_index: u64,
        start_position: usize,
        manifest: Vec<String>,
        patch: Option<BundlePatch>,
    },
    Done,
    Results {
        device_id: DeviceId,
        batch_index: u64,
        results: Vec<ExecutionResult>,
    },
    Ack {
        accepted_count: usize,
    },
    Error {
        code: ErrorCode,
        message: String,
        current_batch_index: Option<u64>,
        expected_position: Option<usize>,
    },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Register { .. } => "REGISTER",
            Message::Registered { .. } => "REGISTERED",
            Message::BatchRequest { .. } => "BATCH_REQUEST",
            Message::BatchResponse { .. } => "BATCH_RESPONSE",
            Message::Done => "DONE",
            Message::Results { .. } => "RESULTS",
            Message::Ack { .. } => "ACK",
            Message::Error { .. } => "ERROR",
        }
    }

    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        Message::Error {
            code,
            message: message.into(),
            current_batch_index: None,
            expected_position: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    protocol_version: u32,
    #[serde(flatten)]
    message: Message,
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("frame shorter than the 4-byte length prefix ({0} bytes)")]
    Truncated(usize),
    #[error("length prefix says {declared} bytes but {actual} follow")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("frame of {0} bytes exceeds limit")]
    TooLarge(usize),
    #[error("frame body is not UTF-8")]
    Utf8,
    #[error("frame body: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported protocol version {0}")]
    Version(u32),
}

pub fn encode(message: &Message) -> Vec<u8> {
    let body = canonical_json(&Envelope {
        protocol_version: PROTOCOL_VERSION,
        message: message.clone(),
    });
    let mut frame = Vec::with_capacity(4 + body.len());
    frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
    frame.extend_from_slice(body.as_bytes());
    frame
}

pub fn decode(frame: &[u8]) -> Result<Message, FrameError> {
    if frame.len() < 4 {
        return Err(FrameError::Truncated(frame.len()));
    }
    let declared = u32::from_be_bytes([frame[0], frame[1], frame[2], frame[3]]) as usize;
    if declared > MAX_FRAME_BYTES {
        return Err(FrameError::TooLarge(declared));
    }
    let body = &frame[4..];
    if body.len() != declared {
        return Err(FrameError::LengthMismatch {
            declared,
            actual: body.len(),
        });
    }
    let text = std::str::from_utf8(body).map_err(|_| FrameError::Utf8)?;
    let raw: serde_json::Value = serde_json::from_str(text)?;
    let version = raw
        .get("protocol_version")
        .and_then(serde_json::Value::as_u64)
        .unwrap_or(0) as u32;
    if version != PROTOCOL_VERSION {
        return Err(FrameError::Version(version));
    }
    let envelope: Envelope = serde_json::from_value(raw)?;
    Ok(envelope.message)
}

/// Reads one whole frame (prefix included). `Ok(None)` on clean EOF.
pub fn read_frame(reader: &mut impl Read) -> io::Result<Option<Vec<u8>>> {
    let mut prefix = [0u8; 4];
    match reader.read_exact(&mut prefix) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(prefix) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame too large"));
    }
    let mut frame = vec![0u8; 4 + len];
    frame[..4].copy_from_slice(&prefix);
    reader.read_exact(&mut frame[4..])?;
    Ok(Some(frame))
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("framing: {0}")]
    Frame(#[from] FrameError),
    #[error("connection closed")]
    Closed,
    #[error("{0}")]
    Other(String),
}

/// Request/response exchange with a dispatch server.
pub trait Transport {
    fn exchange(&mut self, request: &Message) -> Result<Message, TransportError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerConfig {
    pub batch_size: usize,
    pub strategy: Strategy,
    pub redundancy: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            strategy: Strategy::Discard,
            redundancy: 1,
        }
    }
}

/// Append-only store of results, idempotent on
/// `(device, batch_index, test_id)`.
#[derive(Debug, Default)]
pub struct ResultSink {
    inner: Mutex<SinkInner>,
}

#[derive(Debug, Default)]
struct SinkInner {
    records: Vec<ExecutionResult>,
    keys: HashSet<(DeviceId, u64, String)>,
}

impl ResultSink {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores results not seen before; returns how many were new.
    pub fn append(&self, results: impl IntoIterator<Item = ExecutionResult>) -> usize {
        let mut inner = self.inner.lock().expect("sink lock poisoned");
        let mut added = 0;
        for r in results {
            let key = (r.device.clone(), r.batch_index, r.test_id.clone());
            if inner.keys.insert(key) {
                inner.records.push(r);
                added += 1;
            }
        }
        added
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("sink lock poisoned").records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snapshot(&self) -> Vec<ExecutionResult> {
        self.inner.lock().expect("sink lock poisoned").records.clone()
    }
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("dispatch already started")]
    AlreadyStarted,
    #[error("dispatch not started")]
    NotStarted,
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error("new bundle lacks allocated test {0}")]
    MissingAllocatedTest(String),
}

#[derive(Debug)]
struct BundleStore {
    current: TestBundle,
    /// Patch from the previous version to `current`.
    latest_patch: Option<BundlePatch>,
}

impl BundleStore {
    fn patch_for(&self, client_version: u64) -> Option<BundlePatch> {
        if client_version == self.current.version {
            return None;
        }
        match &self.latest_patch {
            Some(p) if p.base_version == client_version => Some(p.clone()),
            _ => Some(BundlePatch::full(&self.current)),
        }
    }
}

#[derive(Debug)]
struct DeviceSession {
    queue: Vec<String>,
    cursor: DispatchCursor,
    last_request: Option<Message>,
    last_response: Option<Message>,
    finished: bool,
}

#[derive(Debug)]
struct DispatchState {
    assignment: Assignment,
    sessions: HashMap<DeviceId, Mutex<DeviceSession>>,
}

/// Binds registry, test bank, scheduler and bundles into the dispatch
/// service. Registration is open until [`DispatchServer::start_dispatch`]
/// allocates the bank over the registered clusters.
#[derive(Debug)]
pub struct DispatchServer {
    config: ServerConfig,
    registry: Registry,
    bank: TestBank,
    bundles: RwLock<BundleStore>,
    dispatch: RwLock<Option<DispatchState>>,
    sink: ResultSink,
    auto_start_after: Option<usize>,
}

impl DispatchServer {
    pub fn new(config: ServerConfig, bank: TestBank) -> Self {
        let current = TestBundle::new(1, bank.cases().iter().cloned());
        let latest_patch = diff(&TestBundle::empty(), &current).ok();
        Self {
            config,
            registry: Registry::new(),
            bank,
            bundles: RwLock::new(BundleStore { current, latest_patch }),
            dispatch: RwLock::new(None),
            sink: ResultSink::new(),
            auto_start_after: None,
        }
    }

    /// Start dispatch automatically once `n` devices have registered.
    pub fn with_auto_start(mut self, n: usize) -> Self {
        self.auto_start_after = Some(n);
        self
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn bank(&self) -> &TestBank {
        &self.bank
    }

    pub fn sink(&self) -> &ResultSink {
        &self.sink
    }

    pub fn bundle_version(&self) -> u64 {
        self.bundles.read().expect("bundle lock poisoned").current.version
    }

    pub fn register(&self, profile: DeviceProfile) -> Message {
        // Holding the dispatch lock keeps registration and allocation ordered.
        let dispatch = self.dispatch.write().expect("dispatch lock poisoned");
        if dispatch.is_some() {
            return Message::error(ErrorCode::RegistrationClosed, "dispatch already started");
        }
        let id = match self.registry.register_device(profile) {
            Ok(id) => id,
            Err(e) => return Message::error(ErrorCode::InvalidProfile, e.to_string()),
        };
        drop(dispatch);
        if self.auto_start_after == Some(self.registry.len()) {
            if let Err(e) = self.start_dispatch() {
                log::error!("auto start failed: {e}");
            }
        }
        Message::Registered { device_id: id }
    }

    /// Closes registration and allocates the bank over the current clusters.
    pub fn start_dispatch(&self) -> Result<(), ServerError> {
        let mut dispatch = self.dispatch.write().expect("dispatch lock poisoned");
        if dispatch.is_some() {
            return Err(ServerError::AlreadyStarted);
        }
        let clusters = self.registry.cluster_devices();
        let assignment = allocate(&self.bank.ids(), &clusters, self.config.redundancy)?;
        let mut sessions = HashMap::new();
        for (device, queue) in &assignment.queues {
            let cursor = DispatchCursor::new(
                device.clone(),
                queue.len(),
                self.config.strategy,
                self.config.batch_size,
            )?;
            sessions.insert(
                device.clone(),
                Mutex::new(DeviceSession {
                    queue: queue.clone(),
                    cursor,
                    last_request: None,
                    last_response: None,
                    finished: false,
                }),
            );
        }
        *dispatch = Some(DispatchState { assignment, sessions });
        Ok(())
    }

    pub fn is_dispatching(&self) -> bool {
        self.dispatch.read().expect("dispatch lock poisoned").is_some()
    }

    pub fn assignment(&self) -> Option<Assignment> {
        self.dispatch
            .read()
            .expect("dispatch lock poisoned")
            .as_ref()
            .map(|d| d.assignment.clone())
    }

    /// Snapshot of every device cursor, keyed by device.
    pub fn cursors(&self) -> Vec<DispatchCursor> {
        let dispatch = self.dispatch.read().expect("dispatch lock poisoned");
        let mut out: Vec<DispatchCursor> = dispatch
            .iter()
            .flat_map(|d| d.sessions.values())
            .map(|s| s.lock().expect("session lock poisoned").cursor.clone())
            .collect();
        out.sort_by(|a, b| a.device().cmp(b.device()));
        out
    }

    /// True once every allocated device has been answered DONE.
    pub fn all_finished(&self) -> bool {
        let dispatch = self.dispatch.read().expect("dispatch lock poisoned");
        dispatch.as_ref().is_some_and(|d| {
            d.sessions
                .values()
                .all(|s| s.lock().expect("session lock poisoned").finished)
        })
    }

    /// Publishes a hotfixed bundle. Every allocated test must still exist.
    pub fn publish_bundle(&self, cases: Vec<TestCase>) -> Result<u64, ServerError> {
        let ids: HashSet<&str> = cases.iter().map(|c| c.id.as_str()).collect();
        if let Some(missing) = self.bank.cases().iter().find(|c| !ids.contains(c.id.as_str())) {
            return Err(ServerError::MissingAllocatedTest(missing.id.clone()));
        }
        let mut store = self.bundles.write().expect("bundle lock poisoned");
        let next = TestBundle::new(store.current.version + 1, cases);
        let patch = diff(&store.current, &next).expect("consecutive versions");
        store.current = next;
        store.latest_patch = Some(patch);
        Ok(store.current.version)
    }

    pub fn handle_frame(&self, frame: &[u8]) -> Vec<u8> {
        let response = match decode(frame) {
            Ok(request) => self.handle(request),
            Err(FrameError::Version(v)) => Message::error(
                ErrorCode::UnsupportedVersion,
                format!("protocol version {v} not supported"),
            ),
            Err(e) => Message::error(ErrorCode::Malformed, e.to_string()),
        };
        encode(&response)
    }

    pub fn handle(&self, request: Message) -> Message {
        match request {
            Message::Register { profile } => self.register(profile),
            Message::BatchRequest { .. } => self.batch_request(request),
            Message::Results {
                device_id,
                batch_index,
                results,
            } => self.results(&device_id, batch_index, results),
            other => Message::error(
                ErrorCode::UnexpectedMessage,
                format!("{} is not a request", other.kind()),
            ),
        }
    }

    fn with_session<F>(&self, device: &DeviceId, f: F) -> Message
    where
        F: FnOnce(&mut DeviceSession) -> Message,
    {
        let dispatch = self.dispatch.read().expect("dispatch lock poisoned");
        match dispatch.as_ref() {
            None if self.registry.contains(device) => Message::error(ErrorCode::NotReady, "dispatch has not started"),
            None => Message::error(ErrorCode::UnknownDevice, format!("unknown device {device}")),
            Some(state) => match state.sessions.get(device) {
                Some(session) => f(&mut session.lock().expect("session lock poisoned")),
                None => Message::error(ErrorCode::UnknownDevice, format!("unknown device {device}")),
            },
        }
    }

    fn batch_request(&self, request: Message) -> Message {
        let Message::BatchRequest {
            device_id,
            cursor_position,
            bundle_version,
            crash_report,
        } = &request
        else {
            unreachable!("caller matched BATCH_REQUEST");
        };
        self.with_session(device_id, |session| {
            if session.last_request.as_ref() == Some(&request) {
                if let Some(cached) = &session.last_response {
                    return cached.clone();
                }
            }
            let patch = || {
                self.bundles
                    .read()
                    .expect("bundle lock poisoned")
                    .patch_for(*bundle_version)
            };
            let retransmit =
                crash_report.is_none() && session.cursor.open_batch().is_some_and(|b| b.start == *cursor_position);
            let response = if retransmit {
                let open = *session.cursor.open_batch().expect("checked above");
                Message::BatchResponse {
                    batch_index: open.index,
                    start_position: open.start,
                    manifest: session.queue[open.positions()].to_vec(),
                    patch: patch(),
                }
            } else if *cursor_position != session.cursor.position() {
                return Message::Error {
                    code: ErrorCode::StaleCursor,
                    message: format!(
                        "cursor at {cursor_position}, server expects {}",
                        session.cursor.position()
                    ),
                    current_batch_index: session.cursor.history().last().map(|b| b.index),
                    expected_position: Some(session.cursor.position()),
                };
            } else {
                match session.cursor.next_batch(*crash_report) {
                    Err(e) => {
                        return Message::Error {
                            code: ErrorCode::ProtocolViolation,
                            message: e.to_string(),
                            current_batch_index: session.cursor.open_batch().map(|b| b.index),
                            expected_position: Some(session.cursor.position()),
                        }
                    }
                    Ok(dispatch) => {
                        if let Some(crash) = crash_report {
                            self.record_discarded(device_id, session, crash);
                        }
                        match dispatch {
                            Dispatch::Done => {
                                session.finished = true;
                                Message::Done
                            }
                            Dispatch::Batch(slice) => Message::BatchResponse {
                                batch_index: slice.index,
                                start_position: slice.start,
                                manifest: slice.test_ids(&session.queue),
                                patch: patch(),
                            },
                        }
                    }
                }
            };
            session.last_request = Some(request.clone());
            session.last_response = Some(response.clone());
            response
        })
    }

    fn record_discarded(&self, device: &DeviceId, session: &DeviceSession, crash: &CrashReport) {
        if session.cursor.strategy() != Strategy::Discard {
            return;
        }
        let Some(record) = session.cursor.history().get(crash.batch_index as usize) else {
            return;
        };
        let skipped = record.unexecuted().map(|pos| {
            let test_id = session.queue[pos].clone();
            let target_api = self
                .bank
                .get(&test_id)
                .map(|c| c.target_api.clone())
                .unwrap_or_default();
            ExecutionResult {
                test_id,
                target_api,
                device: device.clone(),
                outcome: Outcome::SkippedCrash,
                batch_index: record.index,
                timestamp: 0,
            }
        });
        self.sink.append(skipped);
    }

    fn results(&self, device: &DeviceId, batch_index: u64, results: Vec<ExecutionResult>) -> Message {
        self.with_session(device, |session| {
            let Some(record) = session.cursor.history().last().copied() else {
                return Message::Error {
                    code: ErrorCode::StaleBatch,
                    message: "no batch has been dispatched".into(),
                    current_batch_index: None,
                    expected_position: None,
                };
            };
            if record.index != batch_index {
                return Message::Error {
                    code: ErrorCode::StaleBatch,
                    message: format!("results for batch {batch_index}, current batch is {}", record.index),
                    current_batch_index: Some(record.index),
                    expected_position: None,
                };
            }
            let manifest: HashSet<&str> = session.queue[record.positions()].iter().map(String::as_str).collect();
            for r in &results {
                let problem = if r.device != *device {
                    Some(format!("result for {} sent by {device}", r.device))
                } else if r.batch_index != batch_index {
                    Some(format!("result tagged batch {} in batch {batch_index}", r.batch_index))
                } else if !manifest.contains(r.test_id.as_str()) {
                    Some(format!("test {} not in batch {batch_index}", r.test_id))
                } else if r.outcome == Outcome::SkippedCrash {
                    Some("clients do not report skipped tests".into())
                } else {
                    None
                };
                if let Some(message) = problem {
                    return Message::Error {
                        code: ErrorCode::ProtocolViolation,
                        message,
                        current_batch_index: Some(record.index),
                        expected_position: None,
                    };
                }
            }
            Message::Ack {
                accepted_count: self.sink.append(results),
            }
        })
    }
}

/// Drives a server in the same process through the full encode/decode path.
#[derive(Debug, Clone)]
pub struct InProcess {
    server: Arc<DispatchServer>,
}

impl InProcess {
    pub fn new(server: Arc<DispatchServer>) -> Self {
        Self { server }
    }
}

impl Transport for InProcess {
    fn exchange(&mut self, request: &Message) -> Result<Message, TransportError> {
        let reply = self.server.handle_frame(&encode(request));
        Ok(decode(&reply)?)
    }
}

pub struct TcpTransport {
    stream: TcpStream,
}

impl TcpTransport {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self { stream })
    }
}

impl Transport for TcpTransport {
    fn exchange(&mut self, request: &Message) -> Result<Message, TransportError> {
        self.stream.write_all(&encode(request))?;
        let frame = read_frame(&mut self.stream)?.ok_or(TransportError::Closed)?;
        Ok(decode(&frame)?)
    }
}

/// Running TCP listener for a [`DispatchServer`].
pub struct ServiceHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the blocking accept
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        if self.accept.is_some() {
            self.stop_accepting();
        }
    }
}

/// Serves frames on `addr`, one thread per connection.
pub fn serve_tcp(server: Arc<DispatchServer>, addr: impl ToSocketAddrs) -> io::Result<ServiceHandle> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop_flag = Arc::clone(&stop);
    let accept = thread::spawn(move || {
        for stream in listener.incoming() {
            if stop_flag.load(Ordering::SeqCst) {
                break;
            }
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    continue;
                }
            };
            let server = Arc::clone(&server);
            thread::spawn(move || {
                if let Err(e) = serve_connection(&server, stream) {
                    log::debug!("connection ended: {e}");
                }
            });
        }
    });
    Ok(ServiceHandle {
        addr: local,
        stop,
        accept: Some(accept),
    })
}

fn serve_connection(server: &DispatchServer, mut stream: TcpStream) -> io::Result<()> {
    stream.set_nodelay(true)?;
    while let Some(frame) = read_frame(&mut stream)? {
        let reply = server.handle_frame(&frame);
        stream.write_all(&reply)?;
    }
    Ok(())
}
