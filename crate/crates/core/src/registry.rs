//! Pipes, streams and the capture engine.
//!
//! A driver writes events to a stream; events that pass the stream's filter
//! are held in the owning pipe's bounded buffer until a dump collects them.
//! Data streams produce a single snapshot per dump instead.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::glob;
use crate::profile::{CaptureConfig, CctoolInvocation};

/// Default number of events a pipe buffers before evicting the oldest.
pub const DEFAULT_PIPE_CAPACITY: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("pipe {owner}/{name} is already registered")]
    DuplicatePipe { owner: String, name: String },
    #[error("unknown pipe id {0}")]
    UnknownPipe(usize),
    #[error("stream {stream} already exists under {owner}/{pipe}")]
    DuplicateStream { owner: String, pipe: String, stream: String },
    #[error("unknown stream {owner}/{pipe}/{stream}")]
    UnknownStream { owner: String, pipe: String, stream: String },
    #[error("{0} is not a log stream")]
    NotALogStream(String),
    #[error("{0} is not a data stream")]
    NotADataStream(String),
    #[error("pipe capacity must be at least 1")]
    ZeroCapacity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LogPolicy {
    Off,
    Continuous,
}

impl LogPolicy {
    pub fn from_value(value: u32) -> Option<Self> {
        match value {
            0 => Some(LogPolicy::Off),
            1 => Some(LogPolicy::Continuous),
            _ => None,
        }
    }

    pub fn value(self) -> u32 {
        match self {
            LogPolicy::Off => 0,
            LogPolicy::Continuous => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PipeDescriptor {
    pub owner: String,
    pub name: String,
    pub log_policy: LogPolicy,
    pub capacity: usize,
}

impl PipeDescriptor {
    /// A pipe with policy off and the default capacity.
    pub fn new(owner: impl Into<String>, name: impl Into<String>) -> Self {
        PipeDescriptor {
            owner: owner.into(),
            name: name.into(),
            log_policy: LogPolicy::Off,
            capacity: DEFAULT_PIPE_CAPACITY,
        }
    }

    pub fn with_policy(mut self, policy: LogPolicy) -> Self {
        self.log_policy = policy;
        self
    }

    pub fn with_capacity(mut self, capacity: usize) -> Self {
        self.capacity = capacity;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    LogStream,
    DataStream,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StreamDescriptor {
    pub name: String,
    pub kind: StreamKind,
    pub log_level: u32,
    pub log_flags: u64,
    pub console_level: u32,
    pub console_flags: u64,
}

impl StreamDescriptor {
    /// Log stream with everything filtered out (level 0, no flags).
    pub fn log(name: impl Into<String>) -> Self {
        StreamDescriptor {
            name: name.into(),
            kind: StreamKind::LogStream,
            log_level: 0,
            log_flags: 0,
            console_level: 0,
            console_flags: 0,
        }
    }

    pub fn data(name: impl Into<String>) -> Self {
        StreamDescriptor {
            kind: StreamKind::DataStream,
            ..Self::log(name)
        }
    }

    pub fn with_filter(mut self, level: u32, flags: u64) -> Self {
        self.log_level = level;
        self.log_flags = flags;
        self
    }

    /// Filter rule: the level must not exceed the stream's ceiling, and
    /// the event's flags must intersect the stream mask. Events without
    /// flags only need to pass the level check.
    pub fn accepts(&self, level: u32, flags: u64) -> bool {
        level <= self.log_level && (flags == 0 || flags & self.log_flags != 0)
    }
}

/// Nanoseconds since the Unix epoch.
pub type Timestamp = u64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LogEvent {
    pub timestamp: Timestamp,
    pub level: u32,
    pub flags: u64,
    pub payload: Vec<u8>,
    /// Assigned when the event is accepted; zero before that.
    pub sequence: u64,
}

impl LogEvent {
    pub fn new(timestamp: Timestamp, level: u32, flags: u64, payload: impl Into<Vec<u8>>) -> Self {
        LogEvent {
            timestamp,
            level,
            flags,
            payload: payload.into(),
            sequence: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DumpReason {
    Manual,
    Error,
}

impl fmt::Display for DumpReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DumpReason::Manual => "manual",
            DumpReason::Error => "error",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StreamEvents {
    pub owner: String,
    pub pipe: String,
    pub stream: String,
    pub events: Vec<LogEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Snapshot {
    pub owner: String,
    pub pipe: String,
    pub stream: String,
    pub payload: Vec<u8>,
    /// False when the data stream had no provider at dump time.
    pub provided: bool,
}

/// Everything one trigger collected.
///
/// `streams` is sorted by (owner, pipe, stream); events inside a group are in
/// acceptance order. `snapshots` is sorted the same way.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DumpBundle {
    pub reason: DumpReason,
    pub trigger_time: Timestamp,
    pub streams: Vec<StreamEvents>,
    pub snapshots: Vec<Snapshot>,
}

impl DumpBundle {
    pub fn empty(reason: DumpReason, trigger_time: Timestamp) -> Self {
        DumpBundle {
            reason,
            trigger_time,
            streams: Vec::new(),
            snapshots: Vec::new(),
        }
    }

    pub fn event_count(&self) -> usize {
        self.streams.iter().map(|s| s.events.len()).sum()
    }

    /// True when no events were collected (snapshots are not counted).
    pub fn has_no_events(&self) -> bool {
        self.event_count() == 0
    }

    pub fn is_empty(&self) -> bool {
        self.streams.is_empty() && self.snapshots.is_empty()
    }

    pub fn events(&self) -> impl Iterator<Item = (&StreamEvents, &LogEvent)> {
        self.streams
            .iter()
            .flat_map(|g| g.events.iter().map(move |e| (g, e)))
    }

    /// Events of one pipe across its streams, in sequence order.
    pub fn pipe_events(&self, owner: &str, pipe: &str) -> Vec<&LogEvent> {
        let mut out: Vec<&LogEvent> = self
            .streams
            .iter()
            .filter(|g| g.owner == owner && g.pipe == pipe)
            .flat_map(|g| g.events.iter())
            .collect();
        out.sort_by_key(|e| e.sequence);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PipeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StreamId {
    pipe: usize,
    stream: usize,
}

impl StreamId {
    pub fn pipe(self) -> PipeId {
        PipeId(self.pipe)
    }
}

type SnapshotProvider = Box<dyn FnMut() -> Vec<u8> + Send>;

struct Stream {
    desc: StreamDescriptor,
    provider: Option<SnapshotProvider>,
}

struct Buffered {
    stream: usize,
    event: LogEvent,
}

struct Pipe {
    desc: PipeDescriptor,
    streams: Vec<Stream>,
    buffer: VecDeque<Buffered>,
}

impl Pipe {
    fn stream_index(&self, name: &str) -> Option<usize> {
        self.streams.iter().position(|s| s.desc.name == name)
    }
}

/// What a configuration change touched.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChangeTarget {
    Pipe { owner: String, pipe: String },
    Stream { owner: String, pipe: String, stream: String },
}

impl fmt::Display for ChangeTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChangeTarget::Pipe { owner, pipe } => write!(f, "{owner}/{pipe}"),
            ChangeTarget::Stream { owner, pipe, stream } => write!(f, "{owner}/{pipe}/{stream}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RejectedChange {
    pub target: ChangeTarget,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ChangeReport {
    pub applied: Vec<ChangeTarget>,
    pub unmatched: Vec<ChangeTarget>,
    pub rejected: Vec<RejectedChange>,
}

impl ChangeReport {
    pub fn is_empty(&self) -> bool {
        self.applied.is_empty() && self.unmatched.is_empty() && self.rejected.is_empty()
    }

    fn extend(&mut self, other: ChangeReport) {
        self.applied.extend(other.applied);
        self.unmatched.extend(other.unmatched);
        self.rejected.extend(other.rejected);
    }
}

/// A pipe as seen by [`Registry::query`], with its streams.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PipeView {
    pub pipe: PipeDescriptor,
    pub streams: Vec<StreamDescriptor>,
    pub buffered: usize,
}

/// The pipe/stream registry and capture engine.
///
/// Mutation takes `&mut self`, so a registry shared between threads needs a
/// lock around it; [`Registry::query`] returns owned values that can be
/// handed to readers.
#[derive(Default)]
pub struct Registry {
    pipes: Vec<Pipe>,
    by_name: BTreeMap<(String, String), usize>,
    next_sequence: u64,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("pipes", &self.query("*", "*"))
            .field("next_sequence", &self.next_sequence)
            .finish()
    }
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_pipe(&mut self, desc: PipeDescriptor) -> Result<PipeId, RegistryError> {
        if desc.capacity == 0 {
            return Err(RegistryError::ZeroCapacity);
        }
        let key = (desc.owner.clone(), desc.name.clone());
        if self.by_name.contains_key(&key) {
            return Err(RegistryError::DuplicatePipe {
                owner: key.0,
                name: key.1,
            });
        }
        let id = self.pipes.len();
        self.pipes.push(Pipe {
            desc,
            streams: Vec::new(),
            buffer: VecDeque::new(),
        });
        self.by_name.insert(key, id);
        Ok(PipeId(id))
    }

    pub fn register_stream(
        &mut self,
        pipe: PipeId,
        desc: StreamDescriptor,
    ) -> Result<StreamId, RegistryError> {
        let p = self
            .pipes
            .get_mut(pipe.0)
            .ok_or(RegistryError::UnknownPipe(pipe.0))?;
        if p.stream_index(&desc.name).is_some() {
            return Err(RegistryError::DuplicateStream {
                owner: p.desc.owner.clone(),
                pipe: p.desc.name.clone(),
                stream: desc.name,
            });
        }
        p.streams.push(Stream {
            desc,
            provider: None,
        });
        Ok(StreamId {
            pipe: pipe.0,
            stream: p.streams.len() - 1,
        })
    }

    pub fn pipe_id(&self, owner: &str, name: &str) -> Option<PipeId> {
        self.by_name
            .get(&(owner.to_string(), name.to_string()))
            .copied()
            .map(PipeId)
    }

    fn locate(&self, owner: &str, pipe: &str, stream: &str) -> Result<(usize, usize), RegistryError> {
        let unknown = || RegistryError::UnknownStream {
            owner: owner.to_string(),
            pipe: pipe.to_string(),
            stream: stream.to_string(),
        };
        let p = self.pipe_id(owner, pipe).ok_or_else(unknown)?.0;
        let s = self.pipes[p].stream_index(stream).ok_or_else(unknown)?;
        Ok((p, s))
    }

    /// Apply pipe policies and stream filters. Unknown targets and invalid
    /// values are reported, never fatal.
    pub fn apply_config(&mut self, config: &CaptureConfig) -> ChangeReport {
        let mut report = ChangeReport::default();
        for (owner, pipe, setting) in config.iter_pipes() {
            let target = ChangeTarget::Pipe {
                owner: owner.into(),
                pipe: pipe.into(),
            };
            report.extend(self.set_policy(target, setting.policy));
        }
        for (owner, pipe, stream, s) in config.iter_streams() {
            let target = ChangeTarget::Stream {
                owner: owner.into(),
                pipe: pipe.into(),
                stream: stream.into(),
            };
            report.extend(self.set_filters(
                target,
                Some(s.log_level),
                Some(s.log_flags),
                s.console_level,
                s.console_flags,
            ));
        }
        report
    }

    /// Apply one cctool configuration line. Only the values present on the
    /// line are changed. Owner, pipe and stream may be globs (`*`, `?`).
    /// Capture commands are ignored here (see [`Registry::trigger_dump`]).
    pub fn apply_cctool(&mut self, inv: &CctoolInvocation) -> ChangeReport {
        let mut report = ChangeReport::default();
        let pipes = self.expand_pipes(&inv.owner, &inv.pipe);
        if let Some(policy) = inv.policy {
            if pipes.is_empty() {
                report.unmatched.push(ChangeTarget::Pipe {
                    owner: inv.owner.clone(),
                    pipe: inv.pipe.clone(),
                });
            }
            for (owner, pipe) in &pipes {
                let target = ChangeTarget::Pipe {
                    owner: owner.clone(),
                    pipe: pipe.clone(),
                };
                report.extend(self.set_policy(target, policy));
            }
        }
        let any = inv.log_level.is_some()
            || inv.log_flags.is_some()
            || inv.console_level.is_some()
            || inv.console_flags.is_some();
        if let (Some(stream_glob), true) = (&inv.stream, any) {
            let mut targets = Vec::new();
            for (owner, pipe) in &pipes {
                let id = self.by_name[&(owner.clone(), pipe.clone())];
                for st in &self.pipes[id].streams {
                    if st.desc.name == *stream_glob || glob::matches(stream_glob, &st.desc.name) {
                        targets.push(ChangeTarget::Stream {
                            owner: owner.clone(),
                            pipe: pipe.clone(),
                            stream: st.desc.name.clone(),
                        });
                    }
                }
            }
            if targets.is_empty() {
                report.unmatched.push(ChangeTarget::Stream {
                    owner: inv.owner.clone(),
                    pipe: inv.pipe.clone(),
                    stream: stream_glob.clone(),
                });
            }
            for target in targets {
                report.extend(self.set_filters(
                    target,
                    inv.log_level,
                    inv.log_flags,
                    inv.console_level,
                    inv.console_flags,
                ));
            }
        }
        report
    }

    /// Registered (owner, pipe) names matching a pair of globs; an exact
    /// name always matches itself.
    fn expand_pipes(&self, owner_glob: &str, pipe_glob: &str) -> Vec<(String, String)> {
        self.by_name
            .keys()
            .filter(|(o, n)| {
                (o == owner_glob || glob::matches(owner_glob, o))
                    && (n == pipe_glob || glob::matches(pipe_glob, n))
            })
            .cloned()
            .collect()
    }

    fn set_policy(&mut self, target: ChangeTarget, value: u32) -> ChangeReport {
        let mut report = ChangeReport::default();
        let ChangeTarget::Pipe { owner, pipe } = &target else {
            unreachable!("pipe target");
        };
        let Some(id) = self.pipe_id(owner, pipe) else {
            report.unmatched.push(target);
            return report;
        };
        match LogPolicy::from_value(value) {
            Some(policy) => {
                self.pipes[id.0].desc.log_policy = policy;
                report.applied.push(target);
            }
            None => report.rejected.push(RejectedChange {
                target,
                reason: format!("unsupported policy value {value}"),
            }),
        }
        report
    }

    fn set_filters(
        &mut self,
        target: ChangeTarget,
        level: Option<u32>,
        flags: Option<u64>,
        console_level: Option<u32>,
        console_flags: Option<u64>,
    ) -> ChangeReport {
        let mut report = ChangeReport::default();
        let ChangeTarget::Stream { owner, pipe, stream } = &target else {
            unreachable!("stream target");
        };
        let Ok((p, s)) = self.locate(owner, pipe, stream) else {
            report.unmatched.push(target);
            return report;
        };
        let desc = &mut self.pipes[p].streams[s].desc;
        if let Some(v) = level {
            desc.log_level = v;
        }
        if let Some(v) = flags {
            desc.log_flags = v;
        }
        if let Some(v) = console_level {
            desc.console_level = v;
        }
        if let Some(v) = console_flags {
            desc.console_flags = v;
        }
        report.applied.push(target);
        report
    }

    /// Offer an event to a log stream. Returns whether it was buffered.
    ///
    /// When the pipe is full the oldest buffered event is evicted.
    pub fn emit_event(
        &mut self,
        owner: &str,
        pipe: &str,
        stream: &str,
        mut event: LogEvent,
    ) -> Result<bool, RegistryError> {
        let (p, s) = self.locate(owner, pipe, stream)?;
        let pipe = &mut self.pipes[p];
        let desc = &pipe.streams[s].desc;
        if desc.kind != StreamKind::LogStream {
            return Err(RegistryError::NotALogStream(format!("{owner}/{}/{stream}", pipe.desc.name)));
        }
        if pipe.desc.log_policy != LogPolicy::Continuous || !desc.accepts(event.level, event.flags) {
            return Ok(false);
        }
        self.next_sequence += 1;
        event.sequence = self.next_sequence;
        while pipe.buffer.len() >= pipe.desc.capacity {
            pipe.buffer.pop_front();
        }
        pipe.buffer.push_back(Buffered { stream: s, event });
        Ok(true)
    }

    /// Install the snapshot provider of a data stream. It runs once per dump.
    pub fn set_data_snapshot<F>(
        &mut self,
        owner: &str,
        pipe: &str,
        stream: &str,
        provider: F,
    ) -> Result<(), RegistryError>
    where
        F: FnMut() -> Vec<u8> + Send + 'static,
    {
        let (p, s) = self.locate(owner, pipe, stream)?;
        let st = &mut self.pipes[p].streams[s];
        if st.desc.kind != StreamKind::DataStream {
            return Err(RegistryError::NotADataStream(format!("{owner}/{pipe}/{stream}")));
        }
        st.provider = Some(Box::new(provider));
        Ok(())
    }

    /// Collect and clear the buffers of every pipe matching both globs, and
    /// take a snapshot of each of their data streams.
    pub fn trigger_dump(
        &mut self,
        owner_glob: &str,
        pipe_glob: &str,
        reason: DumpReason,
        trigger_time: Timestamp,
    ) -> DumpBundle {
        let mut bundle = DumpBundle::empty(reason, trigger_time);
        let matched: Vec<usize> = self
            .by_name
            .iter()
            .filter(|((o, n), _)| glob::matches(owner_glob, o) && glob::matches(pipe_glob, n))
            .map(|(_, &id)| id)
            .collect();

        for id in matched {
            let pipe = &mut self.pipes[id];
            let owner = pipe.desc.owner.clone();
            let pipe_name = pipe.desc.name.clone();

            let mut groups: BTreeMap<String, Vec<LogEvent>> = BTreeMap::new();
            for b in pipe.buffer.drain(..) {
                let name = pipe.streams[b.stream].desc.name.clone();
                groups.entry(name).or_default().push(b.event);
            }
            for (stream, events) in groups {
                bundle.streams.push(StreamEvents {
                    owner: owner.clone(),
                    pipe: pipe_name.clone(),
                    stream,
                    events,
                });
            }

            let mut snaps: Vec<Snapshot> = pipe
                .streams
                .iter_mut()
                .filter(|s| s.desc.kind == StreamKind::DataStream)
                .map(|s| {
                    let (payload, provided) = match s.provider.as_mut() {
                        Some(f) => (f(), true),
                        None => (Vec::new(), false),
                    };
                    Snapshot {
                        owner: owner.clone(),
                        pipe: pipe_name.clone(),
                        stream: s.desc.name.clone(),
                        payload,
                        provided,
                    }
                })
                .collect();
            snaps.sort_by(|a, b| a.stream.cmp(&b.stream));
            bundle.snapshots.extend(snaps);
        }
        bundle
    }

    /// Pipes matching both globs, ordered by owner, pipe and stream name.
    pub fn query(&self, owner_glob: &str, pipe_glob: &str) -> Vec<PipeView> {
        self.by_name
            .iter()
            .filter(|((o, n), _)| glob::matches(owner_glob, o) && glob::matches(pipe_glob, n))
            .map(|(_, &id)| {
                let p = &self.pipes[id];
                let mut streams: Vec<StreamDescriptor> =
                    p.streams.iter().map(|s| s.desc.clone()).collect();
                streams.sort_by(|a, b| a.name.cmp(&b.name));
                PipeView {
                    pipe: p.desc.clone(),
                    streams,
                    buffered: p.buffer.len(),
                }
            })
            .collect()
    }

    /// Events currently buffered in a pipe, oldest first.
    pub fn buffered_events(&self, owner: &str, pipe: &str) -> Vec<LogEvent> {
        self.pipe_id(owner, pipe)
            .map(|id| self.pipes[id.0].buffer.iter().map(|b| b.event.clone()).collect())
            .unwrap_or_default()
    }
}
