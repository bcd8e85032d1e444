//! CoreCapture trace folders.
//!
//! A capture folder holds a `Metadata/` directory plus one directory per
//! owner (driver bundle id), mirroring the pipes and streams of the
//! registry:
//!
//! ```text
//! <capture>/
//!   Metadata/
//!   com.apple.driver.AppleBCMWLANCoreV3.0/   DatapathEvents, DriverLogs, FirmwareBusLogs,
//!                                            FirmwareLogs, StateSnapshots
//!   com.apple.iokit.IO80211Family/           AssociationEventHistory, ControlPath,
//!                                            IO80211AWDLPeerManager, OneStats, IOReporters
//! ```
//!
//! Scanning never fails on a bad member file; problems become [`Finding`]s.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{self, BufReader, Read};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use base64::Engine;
use plist::{Dictionary, Value};
use serde::Serialize;
use serde_json::json;
use thiserror::Error;
use walkdir::WalkDir;

use crate::dissect::printable_ratio;
use crate::pcap::{
    self, has_pcap_magic, LinkType, PcapError, PcapGlobalHeader, PcapReader, PcapRecord,
};
use crate::profile::{generate_profile, CaptureConfig};
use crate::registry::{DumpBundle, LogEvent, Timestamp};

pub const REPORT_SCHEMA: &str = "cctrace-report/1";
pub const METADATA_DIR: &str = "Metadata";
pub const METADATA_FILE: &str = "CaptureMetadata.plist";
pub const CONFIG_SNAPSHOT_FILE: &str = "CaptureConfig.mobileconfig";
/// Bytes handed to [`classify_file`] for sniffing.
pub const HEAD_LEN: usize = 64;

#[derive(Debug, Error)]
pub enum FolderError {
    #[error("capture folder {0} not found")]
    RootNotFound(PathBuf),
    #[error("destination {0} exists and is not empty")]
    DestinationNotEmpty(PathBuf),
    #[error("failed to write {path}: {source}")]
    WriteFailure { path: PathBuf, source: io::Error },
    #[error("cannot encode {path}: {reason}")]
    Encode { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Platform {
    Ios,
    Macos,
}

impl Platform {
    pub fn as_str(self) -> &'static str {
        match self {
            Platform::Ios => "ios",
            Platform::Macos => "macos",
        }
    }
}

impl fmt::Display for Platform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Platform {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ios" => Ok(Platform::Ios),
            "macos" | "osx" => Ok(Platform::Macos),
            other => Err(format!("unknown platform {other:?} (expected ios or macos)")),
        }
    }
}

/// Guess the platform from owner folder names: the AppleBCMWLANCore driver
/// ships on iOS, Brcm4360 on macOS.
pub fn infer_platform<'a>(owners: impl IntoIterator<Item = &'a str>) -> Option<Platform> {
    let mut found = BTreeSet::new();
    for owner in owners {
        if owner.contains("AppleBCMWLANCore") {
            found.insert(Platform::Ios);
        } else if owner.contains("Brcm4360") {
            found.insert(Platform::Macos);
        }
    }
    if found.len() == 1 {
        found.into_iter().next()
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FileFormat {
    Pcap,
    Txt,
    Xml,
    Bin,
}

impl FileFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            FileFormat::Pcap => "PCAP",
            FileFormat::Txt => "TXT",
            FileFormat::Xml => "XML",
            FileFormat::Bin => "BIN",
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            FileFormat::Pcap => "pcap",
            FileFormat::Txt => "txt",
            FileFormat::Xml => "xml",
            FileFormat::Bin => "bin",
        }
    }
}

impl fmt::Display for FileFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Known members of a capture folder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum KindName {
    DatapathEvents,
    DriverLogs,
    FirmwareBusLogs,
    FirmwareLogs,
    StateSnapshots,
    AssociationEventHistory,
    ControlPath,
    #[serde(rename = "IO80211AWDLPeerManager")]
    Io80211AwdlPeerManager,
    OneStats,
    IOReporters,
    Metadata,
    Unknown,
}

use FileFormat::{Bin, Pcap, Txt, Xml};

struct KindInfo {
    name: KindName,
    display: &'static str,
    formats: &'static [FileFormat],
    ios: bool,
    macos: bool,
}

const KINDS: &[KindInfo] = &[
    KindInfo { name: KindName::DatapathEvents, display: "DatapathEvents", formats: &[Pcap], ios: true, macos: false },
    KindInfo { name: KindName::DriverLogs, display: "DriverLogs", formats: &[Txt], ios: true, macos: true },
    KindInfo { name: KindName::FirmwareBusLogs, display: "FirmwareBusLogs", formats: &[Pcap], ios: true, macos: false },
    KindInfo { name: KindName::FirmwareLogs, display: "FirmwareLogs", formats: &[Txt], ios: true, macos: false },
    KindInfo { name: KindName::StateSnapshots, display: "StateSnapshots", formats: &[Txt, Bin], ios: true, macos: true },
    KindInfo { name: KindName::AssociationEventHistory, display: "AssociationEventHistory", formats: &[Xml], ios: true, macos: true },
    KindInfo { name: KindName::ControlPath, display: "ControlPath", formats: &[Pcap], ios: true, macos: true },
    KindInfo { name: KindName::Io80211AwdlPeerManager, display: "IO80211AWDLPeerManager", formats: &[Pcap], ios: true, macos: true },
    KindInfo { name: KindName::OneStats, display: "OneStats", formats: &[Xml], ios: true, macos: true },
    KindInfo { name: KindName::IOReporters, display: "IOReporters", formats: &[Xml], ios: true, macos: true },
];

impl KindName {
    fn info(self) -> Option<&'static KindInfo> {
        KINDS.iter().find(|k| k.name == self)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            KindName::Metadata => "Metadata",
            KindName::Unknown => "Unknown",
            other => other.info().expect("listed kind").display,
        }
    }

    /// Formats the kind may legitimately have; empty for Metadata/Unknown.
    pub fn expected_formats(self) -> &'static [FileFormat] {
        self.info().map(|k| k.formats).unwrap_or(&[])
    }

    pub fn expected_on(self, platform: Platform) -> bool {
        self.info().is_some_and(|k| match platform {
            Platform::Ios => k.ios,
            Platform::Macos => k.macos,
        })
    }

    /// Look up a kind by a file stem: case-insensitive, whitespace ignored,
    /// and tolerant of extra text separated by a non-alphanumeric character
    /// (e.g. a timestamp).
    pub fn from_stem(stem: &str) -> KindName {
        let norm: String = stem
            .chars()
            .filter(|c| !c.is_whitespace())
            .collect::<String>()
            .to_ascii_lowercase();
        let boundary = |c: Option<char>| c.is_none_or(|c| !c.is_ascii_alphanumeric());
        for k in KINDS {
            let key = k.display.to_ascii_lowercase();
            if norm == key {
                return k.name;
            }
            if let Some(rest) = norm.strip_prefix(&key) {
                if boundary(rest.chars().next()) {
                    return k.name;
                }
            }
            if let Some(rest) = norm.strip_suffix(&key) {
                if boundary(rest.chars().last()) {
                    return k.name;
                }
            }
        }
        KindName::Unknown
    }

    pub fn all_known() -> impl Iterator<Item = KindName> {
        KINDS.iter().map(|k| k.name)
    }
}

impl fmt::Display for KindName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A classified file: its kind by name and its format by content.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct FileKind {
    pub name: KindName,
    pub format: FileFormat,
}

impl FileKind {
    /// False only when the kind has expected formats and the sniffed one is
    /// not among them.
    pub fn format_matches(&self) -> bool {
        let expected = self.name.expected_formats();
        expected.is_empty() || expected.contains(&self.format)
    }
}

/// Decide a format from leading bytes alone. `None` when `head` is empty.
pub fn sniff_format(head: &[u8]) -> Option<FileFormat> {
    if head.is_empty() {
        return None;
    }
    if has_pcap_magic(head) {
        return Some(Pcap);
    }
    let body = head.strip_prefix(b"\xef\xbb\xbf").unwrap_or(head);
    let start = body
        .iter()
        .position(|b| !b.is_ascii_whitespace())
        .unwrap_or(body.len());
    let body = &body[start..];
    if body.starts_with(b"<?xml") || body.starts_with(b"<plist") || body.starts_with(b"<!DOCTYPE") {
        return Some(Xml);
    }
    // A 64-byte window may cut a multi-byte character; allow for that.
    let trimmed = trim_partial_utf8(head);
    if printable_ratio(trimmed) >= crate::dissect::TEXT_PRINTABLE_RATIO {
        return Some(Txt);
    }
    Some(Bin)
}

fn trim_partial_utf8(bytes: &[u8]) -> &[u8] {
    match std::str::from_utf8(bytes) {
        Ok(_) => bytes,
        Err(e) if e.error_len().is_none() && e.valid_up_to() > 0 => &bytes[..e.valid_up_to()],
        Err(_) => bytes,
    }
}

/// Classify a member file from its path relative to the capture root and
/// its first bytes. Files under `Metadata/` are Metadata; everything else
/// is named by file stem. An empty head takes the kind's first expected
/// format (BIN for unknown files).
pub fn classify_file(relative_path: &str, head: &[u8]) -> FileKind {
    let normalized = relative_path.replace('\\', "/");
    let mut parts = normalized.split('/').filter(|s| !s.is_empty());
    let first = parts.next().unwrap_or("");
    let file_name = normalized.rsplit('/').next().unwrap_or("");
    let name = if first == METADATA_DIR && normalized.contains('/') {
        KindName::Metadata
    } else {
        let stem = file_name.split('.').next().unwrap_or(file_name);
        KindName::from_stem(stem)
    };
    let format = sniff_format(head).unwrap_or_else(|| match name {
        KindName::Metadata => Xml,
        other => other.expected_formats().first().copied().unwrap_or(Bin),
    });
    FileKind { name, format }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Info,
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub severity: Severity,
    pub code: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub message: String,
}

impl Finding {
    fn new(severity: Severity, code: &'static str, path: Option<&str>, message: impl Into<String>) -> Self {
        Finding {
            severity,
            code,
            path: path.map(str::to_string),
            message: message.into(),
        }
    }
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Info => "info",
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        match &self.path {
            Some(p) => write!(f, "{sev}: {} [{}] {}", p, self.code, self.message),
            None => write!(f, "{sev}: [{}] {}", self.code, self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PcapStats {
    pub records: u64,
    pub link_type: LinkType,
    pub link_type_name: String,
    pub first_timestamp_ns: Option<u64>,
    pub last_timestamp_ns: Option<u64>,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FolderEntry {
    /// `/`-separated path relative to the capture root.
    pub path: String,
    pub owner: Option<String>,
    pub kind: FileKind,
    pub size: u64,
    /// `PCAP`, `PCAP(truncated)`, `TXT`, or e.g. `TXT(expected PCAP)`.
    pub verdict: String,
    pub pcap: Option<PcapStats>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FolderIndex {
    pub root: PathBuf,
    pub metadata: BTreeMap<String, String>,
    pub owners: Vec<String>,
    pub entries: Vec<FolderEntry>,
    pub findings: Vec<Finding>,
    /// Platform given by the caller, else recorded in metadata, else
    /// inferred from owner names.
    pub platform: Option<Platform>,
}

impl FolderIndex {
    pub fn finding_count(&self, severity: Severity) -> usize {
        self.findings.iter().filter(|f| f.severity == severity).count()
    }

    pub fn has_errors(&self) -> bool {
        self.finding_count(Severity::Error) > 0
    }

    pub fn entry(&self, path: &str) -> Option<&FolderEntry> {
        self.entries.iter().find(|e| e.path == path)
    }

    /// Replace the findings with the full validation result for `hint`
    /// (falling back to the index's own platform).
    pub fn validated(mut self, hint: Option<Platform>) -> Self {
        if hint.is_some() {
            self.platform = hint;
        }
        self.findings = validate_index(&self, self.platform);
        self
    }
}

fn verdict_text(kind: &FileKind, truncated: bool) -> String {
    let base = if truncated {
        format!("{}(truncated)", kind.format)
    } else {
        kind.format.to_string()
    };
    if kind.format_matches() {
        base
    } else {
        let expected: Vec<&str> = kind.name.expected_formats().iter().map(|f| f.as_str()).collect();
        format!("{base}(expected {})", expected.join("|"))
    }
}

fn read_head(path: &Path) -> io::Result<Vec<u8>> {
    let mut f = fs::File::open(path)?;
    let mut head = Vec::with_capacity(HEAD_LEN);
    f.by_ref().take(HEAD_LEN as u64).read_to_end(&mut head)?;
    Ok(head)
}

/// Walk a PCAP to the end; stats cover every complete record.
pub fn pcap_stats(path: &Path) -> Result<PcapStats, PcapError> {
    let file = fs::File::open(path)?;
    let mut reader = PcapReader::open(BufReader::new(file))?;
    let unit = reader.header().timestamp_unit;
    let link_type = reader.header().link_type;
    let mut stats = PcapStats {
        records: 0,
        link_type,
        link_type_name: link_type.name(),
        first_timestamp_ns: None,
        last_timestamp_ns: None,
        truncated: false,
    };
    loop {
        match reader.next_record() {
            Ok(Some(rec)) => {
                let ts = rec.timestamp_nanos(unit);
                stats.records += 1;
                stats.first_timestamp_ns.get_or_insert(ts);
                stats.last_timestamp_ns = Some(ts);
            }
            Ok(None) => break,
            Err(PcapError::TruncatedRecord { .. }) => {
                stats.truncated = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(stats)
}

fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

fn flatten_plist(prefix: &str, value: &Value, out: &mut BTreeMap<String, String>) {
    match value {
        Value::Dictionary(d) => {
            for (k, v) in d {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_plist(&key, v, out);
            }
        }
        Value::String(s) => {
            out.insert(prefix.to_string(), s.clone());
        }
        Value::Integer(i) => {
            out.insert(prefix.to_string(), i.to_string());
        }
        Value::Real(r) => {
            out.insert(prefix.to_string(), r.to_string());
        }
        Value::Boolean(b) => {
            out.insert(prefix.to_string(), b.to_string());
        }
        Value::Date(d) => {
            out.insert(prefix.to_string(), d.to_xml_format());
        }
        Value::Array(a) => {
            out.insert(prefix.to_string(), format!("<array of {}>", a.len()));
        }
        Value::Data(d) => {
            out.insert(prefix.to_string(), format!("<{} bytes>", d.len()));
        }
        _ => {}
    }
}

/// Best-effort key/value extraction from a metadata file: plist
/// dictionaries are flattened, text is read as `key: value` or `key=value`
/// lines. Returns false if nothing could be read.
fn read_metadata_file(path: &Path, rel: &str, out: &mut BTreeMap<String, String>) -> bool {
    let Ok(bytes) = fs::read(path) else {
        return false;
    };
    if let Ok(value) = Value::from_reader(io::Cursor::new(&bytes)) {
        if value.as_dictionary().is_some() {
            flatten_plist("", &value, out);
            return true;
        }
    }
    let Ok(text) = std::str::from_utf8(&bytes) else {
        return false;
    };
    let mut any = false;
    for line in text.lines() {
        let Some((k, v)) = line.split_once(':').or_else(|| line.split_once('=')) else {
            continue;
        };
        let k = k.trim();
        if !k.is_empty() {
            out.insert(k.to_string(), v.trim().to_string());
            any = true;
        }
    }
    if !any {
        out.insert(format!("file:{rel}"), format!("{} bytes", bytes.len()));
    }
    any
}

/// Inventory a capture folder. Member files that cannot be read or decoded
/// become findings; only a missing root is an error.
pub fn scan_folder(root: &Path) -> Result<FolderIndex, FolderError> {
    if !root.is_dir() {
        return Err(FolderError::RootNotFound(root.to_path_buf()));
    }
    let mut index = FolderIndex {
        root: root.to_path_buf(),
        metadata: BTreeMap::new(),
        owners: Vec::new(),
        entries: Vec::new(),
        findings: Vec::new(),
        platform: None,
    };
    let mut has_metadata_dir = false;

    for item in WalkDir::new(root).min_depth(1).sort_by_file_name() {
        let item = match item {
            Ok(item) => item,
            Err(e) => {
                let path = e.path().map(|p| relative(root, p));
                index.findings.push(Finding::new(
                    Severity::Error,
                    "unreadable",
                    path.as_deref(),
                    e.to_string(),
                ));
                continue;
            }
        };
        let rel = relative(root, item.path());
        if item.file_type().is_dir() {
            if item.depth() == 1 {
                if rel == METADATA_DIR {
                    has_metadata_dir = true;
                } else {
                    index.owners.push(rel);
                }
            }
            continue;
        }
        if !item.file_type().is_file() {
            continue;
        }
        let owner = rel
            .split_once('/')
            .map(|(first, _)| first.to_string())
            .filter(|first| first != METADATA_DIR);

        let size = item.metadata().map(|m| m.len()).unwrap_or(0);
        let head = match read_head(item.path()) {
            Ok(h) => h,
            Err(e) => {
                index.findings.push(Finding::new(Severity::Error, "unreadable", Some(&rel), e.to_string()));
                Vec::new()
            }
        };
        let kind = classify_file(&rel, &head);

        if kind.name == KindName::Metadata
            && !rel.ends_with(".mobileconfig")
            && !read_metadata_file(item.path(), &rel, &mut index.metadata)
        {
            index.findings.push(Finding::new(
                Severity::Info,
                "metadata-unparsed",
                Some(&rel),
                "metadata file listed without key/value content",
            ));
        }

        let mut stats = None;
        if kind.format == Pcap && !head.is_empty() {
            match pcap_stats(item.path()) {
                Ok(s) => {
                    if s.truncated {
                        index.findings.push(Finding::new(
                            Severity::Warning,
                            "pcap-truncated",
                            Some(&rel),
                            format!("last record is truncated after {} complete records", s.records),
                        ));
                    }
                    stats = Some(s);
                }
                Err(e) => {
                    index.findings.push(Finding::new(Severity::Error, "pcap-unreadable", Some(&rel), e.to_string()));
                    stats = Some(PcapStats {
                        records: 0,
                        link_type: LinkType(0),
                        link_type_name: String::new(),
                        first_timestamp_ns: None,
                        last_timestamp_ns: None,
                        truncated: true,
                    });
                }
            }
        } else if kind.format == Pcap {
            // Empty file named like a PCAP kind: no header to read.
            stats = Some(PcapStats {
                records: 0,
                link_type: LinkType(0),
                link_type_name: String::new(),
                first_timestamp_ns: None,
                last_timestamp_ns: None,
                truncated: false,
            });
        }
        let truncated = stats.as_ref().is_some_and(|s| s.truncated);
        index.entries.push(FolderEntry {
            verdict: verdict_text(&kind, truncated),
            path: rel,
            owner,
            kind,
            size,
            pcap: stats,
        });
    }

    if index.owners.is_empty() && !has_metadata_dir && index.entries.is_empty() {
        index.findings.push(Finding::new(
            Severity::Warning,
            "no-owner-folders",
            None,
            "no owner folders found",
        ));
    }
    index.platform = index
        .metadata
        .get("Platform")
        .and_then(|p| p.parse().ok())
        .or_else(|| infer_platform(index.owners.iter().map(String::as_str)));
    Ok(index)
}

/// Scan-time findings plus per-kind checks: missing kinds expected on
/// `platform`, format mismatches (error), empty files and unknown files
/// (info). Without a platform the missing-file check is skipped.
pub fn validate_index(index: &FolderIndex, platform: Option<Platform>) -> Vec<Finding> {
    let mut findings: Vec<Finding> = index
        .findings
        .iter()
        .filter(|f| SCAN_CODES.contains(&f.code))
        .cloned()
        .collect();

    for e in &index.entries {
        if e.kind.name == KindName::Metadata {
            continue;
        }
        if !e.kind.format_matches() {
            let expected: Vec<&str> = e.kind.name.expected_formats().iter().map(|f| f.as_str()).collect();
            findings.push(Finding::new(
                Severity::Error,
                "format-mismatch",
                Some(&e.path),
                format!("{} is {}, expected {}", e.kind.name, e.kind.format, expected.join(" or ")),
            ));
        }
        if e.size == 0 {
            findings.push(Finding::new(Severity::Info, "empty-file", Some(&e.path), "file is empty"));
        }
        if e.kind.name == KindName::Unknown {
            findings.push(Finding::new(
                Severity::Info,
                "unknown-file",
                Some(&e.path),
                "file does not match a known CoreCapture member",
            ));
        }
    }

    if let Some(platform) = platform {
        let present: BTreeSet<KindName> = index.entries.iter().map(|e| e.kind.name).collect();
        for kind in KindName::all_known() {
            if kind.expected_on(platform) && !present.contains(&kind) {
                findings.push(Finding::new(
                    Severity::Warning,
                    "missing-expected-file",
                    None,
                    format!("missing expected file {kind} (expected on {platform})"),
                ));
            }
        }
    }
    findings
}

const SCAN_CODES: &[&str] = &[
    "unreadable",
    "metadata-unparsed",
    "pcap-truncated",
    "pcap-unreadable",
    "no-owner-folders",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Json,
}

fn format_ns(ns: u64) -> String {
    let secs = (ns / 1_000_000_000) as i64;
    let nanos = (ns % 1_000_000_000) as u32;
    chrono::DateTime::from_timestamp(secs, nanos)
        .map(|t| t.format("%Y-%m-%dT%H:%M:%S%.9fZ").to_string())
        .unwrap_or_else(|| ns.to_string())
}

/// Report on an index. Pure: equal indexes give identical output.
pub fn summarize(index: &FolderIndex, format: ReportFormat) -> String {
    let pcap_entries = index.entries.iter().filter(|e| e.pcap.is_some()).count();
    let records: u64 = index.entries.iter().filter_map(|e| e.pcap.as_ref()).map(|s| s.records).sum();
    let counts = (
        index.finding_count(Severity::Info),
        index.finding_count(Severity::Warning),
        index.finding_count(Severity::Error),
    );
    match format {
        ReportFormat::Json => {
            let entries: Vec<_> = index
                .entries
                .iter()
                .map(|e| {
                    json!({
                        "path": e.path,
                        "owner": e.owner,
                        "kind": e.kind.name,
                        "format": e.kind.format,
                        "expected_formats": e.kind.name.expected_formats(),
                        "verdict": e.verdict,
                        "size": e.size,
                        "pcap": e.pcap.as_ref().map(|s| json!({
                            "records": s.records,
                            "link_type": s.link_type,
                            "link_type_name": s.link_type_name,
                            "first_timestamp_ns": s.first_timestamp_ns,
                            "last_timestamp_ns": s.last_timestamp_ns,
                            "truncated": s.truncated,
                        })),
                    })
                })
                .collect();
            let report = json!({
                "schema": REPORT_SCHEMA,
                "root": index.root.to_string_lossy(),
                "platform": index.platform,
                "metadata": index.metadata,
                "owners": index.owners,
                "entries": entries,
                "findings": index.findings,
                "counts": {
                    "files": index.entries.len(),
                    "pcap_files": pcap_entries,
                    "pcap_records": records,
                    "info": counts.0,
                    "warning": counts.1,
                    "error": counts.2,
                },
            });
            let mut s = serde_json::to_string_pretty(&report).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Text => {
            use std::fmt::Write;
            let mut s = String::new();
            let _ = writeln!(s, "capture folder: {}", index.root.display());
            let _ = writeln!(
                s,
                "platform: {}",
                index.platform.map_or("unknown", Platform::as_str)
            );
            for (k, v) in &index.metadata {
                let _ = writeln!(s, "metadata: {k} = {v}");
            }
            let _ = writeln!(s, "owners ({}):", index.owners.len());
            for o in &index.owners {
                let _ = writeln!(s, "  {o}");
            }
            let _ = writeln!(s, "files ({}):", index.entries.len());
            for e in &index.entries {
                let _ = write!(s, "  {:<60} {:<24} {:<22} {:>10}", e.path, e.kind.name.as_str(), e.verdict, e.size);
                if let Some(p) = &e.pcap {
                    let _ = write!(s, "  {} records, {}", p.records, p.link_type_name);
                    if let (Some(a), Some(b)) = (p.first_timestamp_ns, p.last_timestamp_ns) {
                        let _ = write!(s, ", {} .. {}", format_ns(a), format_ns(b));
                    }
                }
                s.push('\n');
            }
            let _ = writeln!(s, "pcap files: {pcap_entries}, records: {records}");
            let _ = writeln!(
                s,
                "findings: {} info, {} warning, {} error",
                counts.0, counts.1, counts.2
            );
            for f in &index.findings {
                let _ = writeln!(s, "  {f}");
            }
            s
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), FolderError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| FolderError::WriteFailure {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| FolderError::WriteFailure {
        path: path.to_path_buf(),
        source,
    })
}

/// File name for a pipe/stream group: the pipe name alone when the stream
/// shares it, `<pipe>_<stream>` otherwise.
fn member_stem(pipe: &str, stream: &str) -> String {
    let clean = |s: &str| {
        s.chars()
            .map(|c| if c == '/' || c == '\\' || c.is_control() { '_' } else { c })
            .collect::<String>()
    };
    if pipe == stream {
        clean(pipe)
    } else {
        format!("{}_{}", clean(pipe), clean(stream))
    }
}

/// Printable rendering of a payload for text logs; bytes outside printable
/// ASCII are written as `\xNN`.
fn escape_payload(payload: &[u8]) -> String {
    let text = payload.strip_suffix(b"\n").unwrap_or(payload);
    let mut out = String::with_capacity(text.len());
    for &b in text {
        match b {
            b'\\' => out.push_str("\\\\"),
            0x20..=0x7e | b'\t' => out.push(b as char),
            _ => out.push_str(&format!("\\x{b:02x}")),
        }
    }
    out
}

fn text_log(events: &[LogEvent]) -> Vec<u8> {
    let mut out = String::new();
    for e in events {
        out.push_str(&format!(
            "{} seq={} level={} flags=0x{:x} {}\n",
            format_ns(e.timestamp),
            e.sequence,
            e.level,
            e.flags,
            escape_payload(&e.payload)
        ));
    }
    out.into_bytes()
}

fn pcap_for(events: &[LogEvent], path: &Path) -> Result<Vec<u8>, FolderError> {
    let max_len = events.iter().map(|e| e.payload.len()).max().unwrap_or(0);
    let snaplen = u32::try_from(max_len.max(pcap::DEFAULT_SNAPLEN as usize)).map_err(|_| FolderError::Encode {
        path: path.to_path_buf(),
        reason: "payload larger than 4 GiB".into(),
    })?;
    let header = PcapGlobalHeader::new(LinkType::USER3, snaplen).with_nanoseconds();
    let records = events
        .iter()
        .map(|e| {
            let secs = u32::try_from(e.timestamp / 1_000_000_000).map_err(|_| FolderError::Encode {
                path: path.to_path_buf(),
                reason: format!("timestamp {} does not fit a pcap record", e.timestamp),
            })?;
            Ok(PcapRecord::new(secs, (e.timestamp % 1_000_000_000) as u32, e.payload.clone()))
        })
        .collect::<Result<Vec<_>, FolderError>>()?;
    pcap::write_file(&header, &records).map_err(|e| FolderError::Encode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn xml_wrap(payload: &[u8], pipe: &str, stream: &str) -> Vec<u8> {
    if sniff_format(payload) == Some(Xml) {
        return payload.to_vec();
    }
    let mut d = Dictionary::new();
    d.insert("Pipe".into(), pipe.into());
    d.insert("Stream".into(), stream.into());
    d.insert("Data".into(), Value::Data(payload.to_vec()));
    let mut out = Vec::new();
    Value::Dictionary(d).to_writer_xml(&mut out).expect("in-memory write");
    out.push(b'\n');
    out
}

fn is_empty_dir(path: &Path) -> io::Result<bool> {
    Ok(fs::read_dir(path)?.next().is_none())
}

/// Write a dump as a capture folder and return its scan.
///
/// Each stream group is written in the format its kind expects: PCAP
/// (USER3, nanosecond timestamps) for PCAP and unknown kinds, text lines
/// for TXT kinds, a plist for XML kinds. Snapshots become TXT or BIN
/// (XML for XML kinds). `Metadata/` receives the capture description and
/// the configuration as a profile.
pub fn materialize_folder(
    bundle: &DumpBundle,
    config: &CaptureConfig,
    dest: &Path,
) -> Result<FolderIndex, FolderError> {
    if dest.exists() {
        let empty = dest.is_dir()
            && is_empty_dir(dest).map_err(|source| FolderError::WriteFailure {
                path: dest.to_path_buf(),
                source,
            })?;
        if !empty {
            return Err(FolderError::DestinationNotEmpty(dest.to_path_buf()));
        }
    }
    fs::create_dir_all(dest).map_err(|source| FolderError::WriteFailure {
        path: dest.to_path_buf(),
        source,
    })?;

    let mut written: BTreeSet<PathBuf> = BTreeSet::new();
    let mut claim = |path: PathBuf| -> Result<PathBuf, FolderError> {
        if !written.insert(path.clone()) {
            return Err(FolderError::Encode {
                path,
                reason: "two streams map to the same file name".into(),
            });
        }
        Ok(path)
    };

    for group in &bundle.streams {
        let stem = member_stem(&group.pipe, &group.stream);
        let kind = KindName::from_stem(&stem);
        let format = match kind.expected_formats().first() {
            Some(Txt) => Txt,
            Some(Xml) => Xml,
            _ => Pcap,
        };
        let path = claim(dest.join(&group.owner).join(format!("{stem}.{}", format.extension())))?;
        let bytes = match format {
            Txt => text_log(&group.events),
            Xml => {
                let joined: Vec<u8> = group.events.iter().flat_map(|e| e.payload.iter().copied()).collect();
                xml_wrap(&joined, &group.pipe, &group.stream)
            }
            _ => pcap_for(&group.events, &path)?,
        };
        write_file(&path, &bytes)?;
    }

    for snap in &bundle.snapshots {
        let stem = member_stem(&snap.pipe, &snap.stream);
        let kind = KindName::from_stem(&stem);
        let expected = kind.expected_formats();
        let sniffed = sniff_format(&snap.payload);
        let as_event = || LogEvent::new(bundle.trigger_time, 0, 0, snap.payload.clone());
        let (format, bytes) = match sniffed {
            // Stored as-is when the content already has an acceptable format.
            Some(f) if expected.is_empty() || expected.contains(&f) => (f, snap.payload.clone()),
            None => (expected.first().copied().unwrap_or(Bin), Vec::new()),
            Some(_) => match expected.first() {
                Some(Xml) => (Xml, xml_wrap(&snap.payload, &snap.pipe, &snap.stream)),
                Some(Pcap) => {
                    let path = dest.join(&snap.owner).join(format!("{stem}.pcap"));
                    (Pcap, pcap_for(&[as_event()], &path)?)
                }
                _ => (Txt, text_log(&[as_event()])),
            },
        };
        let path = claim(dest.join(&snap.owner).join(format!("{stem}.{}", format.extension())))?;
        write_file(&path, &bytes)?;
    }

    let owners: BTreeSet<&str> = bundle
        .streams
        .iter()
        .map(|g| g.owner.as_str())
        .chain(bundle.snapshots.iter().map(|s| s.owner.as_str()))
        .collect();
    let mut meta = Dictionary::new();
    meta.insert("CaptureTime".into(), format_ns(bundle.trigger_time).into());
    meta.insert("CaptureTimeNanos".into(), Value::Integer(bundle.trigger_time.into()));
    meta.insert("Reason".into(), bundle.reason.to_string().into());
    meta.insert("Tool".into(), "cctrace".into());
    meta.insert("ToolVersion".into(), crate::TOOL_VERSION.into());
    meta.insert("EventCount".into(), Value::Integer((bundle.event_count() as u64).into()));
    meta.insert(
        "UnprovidedSnapshots".into(),
        Value::Array(
            bundle
                .snapshots
                .iter()
                .filter(|s| !s.provided)
                .map(|s| Value::String(format!("{}/{}/{}", s.owner, s.pipe, s.stream)))
                .collect(),
        ),
    );
    if let Some(p) = infer_platform(owners.iter().copied()) {
        meta.insert("Platform".into(), p.as_str().into());
    }
    let mut meta_bytes = Vec::new();
    Value::Dictionary(meta)
        .to_writer_xml(&mut meta_bytes)
        .expect("in-memory write");
    meta_bytes.push(b'\n');
    write_file(&dest.join(METADATA_DIR).join(METADATA_FILE), &meta_bytes)?;
    write_file(&dest.join(METADATA_DIR).join(CONFIG_SNAPSHOT_FILE), &generate_profile(config))?;

    Ok(scan_folder(dest)?.validated(None))
}

/// Decode a base64 snapshot argument (used by the simulation script).
pub(crate) fn decode_base64(text: &str) -> Result<Vec<u8>, base64::DecodeError> {
    base64::engine::general_purpose::STANDARD.decode(text)
}

pub fn timestamp_now() -> Timestamp {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classify_examples() {
        assert_eq!(
            classify_file("com.apple.driver.AirPort.Brcm4360.0/DriverLogs.txt", b"wl0: link up\n"),
            FileKind { name: KindName::DriverLogs, format: Txt }
        );
        assert_eq!(
            classify_file("com.apple.iokit.IO80211Family/IOReporters.xml", b"<?xml version=\"1.0\"?>"),
            FileKind { name: KindName::IOReporters, format: Xml }
        );
        let noise = [0x8f, 0x01, 0xfe, 0x33, 0x00, 0x9c, 0xd1, 0x07];
        assert_eq!(classify_file("mystery.bin", &noise), FileKind { name: KindName::Unknown, format: Bin });
    }

    #[test]
    fn classify_names_leniently() {
        assert_eq!(KindName::from_stem("AssociationEvent History"), KindName::AssociationEventHistory);
        assert_eq!(KindName::from_stem("IO80211AWDL PeerManager"), KindName::Io80211AwdlPeerManager);
        assert_eq!(KindName::from_stem("controlpath"), KindName::ControlPath);
        assert_eq!(KindName::from_stem("DriverLogs_2019-03-01"), KindName::DriverLogs);
        assert_eq!(KindName::from_stem("2019-03-01_FirmwareLogs"), KindName::FirmwareLogs);
        assert_eq!(KindName::from_stem("DriverLogsX"), KindName::Unknown);
        assert_eq!(classify_file("Metadata/Info.plist", b"<?xml").name, KindName::Metadata);
        assert_eq!(classify_file("Metadata", b"x").name, KindName::Unknown);
    }

    #[test]
    fn mismatch_is_kept_in_kind() {
        let k = classify_file("o/ControlPath.pcap", b"just some text\n");
        assert_eq!(k, FileKind { name: KindName::ControlPath, format: Txt });
        assert!(!k.format_matches());
        assert_eq!(verdict_text(&k, false), "TXT(expected PCAP)");
    }

    #[test]
    fn sniffing_pcap_magics() {
        for magic in [[0xa1, 0xb2, 0xc3, 0xd4], [0xd4, 0xc3, 0xb2, 0xa1], [0xa1, 0xb2, 0x3c, 0x4d], [0x4d, 0x3c, 0xb2, 0xa1]] {
            assert_eq!(sniff_format(&magic), Some(Pcap));
        }
        assert_eq!(sniff_format(&[0x0a, 0x0d, 0x0d, 0x0a, 0, 0, 0, 0x1c]), Some(Bin));
        assert_eq!(sniff_format(b""), None);
        assert_eq!(classify_file("o/AssociationEventHistory.xml", b"").format, Xml);
    }

    #[test]
    fn platform_inference() {
        assert_eq!(infer_platform(["com.apple.driver.AppleBCMWLANCoreV3.0"]), Some(Platform::Ios));
        assert_eq!(infer_platform(["com.apple.driver.AirPort.Brcm4360.0", "com.apple.iokit.IO80211Family"]), Some(Platform::Macos));
        assert_eq!(infer_platform(["com.apple.iokit.IO80211Family"]), None);
    }

    #[test]
    fn availability_table() {
        assert!(KindName::DatapathEvents.expected_on(Platform::Ios));
        assert!(!KindName::DatapathEvents.expected_on(Platform::Macos));
        assert!(!KindName::FirmwareLogs.expected_on(Platform::Macos));
        assert!(!KindName::FirmwareBusLogs.expected_on(Platform::Macos));
        assert!(KindName::DriverLogs.expected_on(Platform::Macos));
        assert_eq!(KindName::StateSnapshots.expected_formats(), [Txt, Bin]);
        assert_eq!(KindName::all_known().filter(|k| k.expected_on(Platform::Ios)).count(), 10);
        assert_eq!(KindName::all_known().filter(|k| k.expected_on(Platform::Macos)).count(), 7);
    }

    #[test]
    fn escaping_keeps_text_printable() {
        assert_eq!(escape_payload(b"a\x00b\\\n"), "a\\x00b\\\\");
        let log = text_log(&[LogEvent::new(0, 1, 2, vec![0xff, b'x'])]);
        assert_eq!(sniff_format(&log), Some(Txt));
    }
}
