//! CoreCapture configuration: property-list profiles and cctool command lines.
//!
//! Both front-ends produce the same [`CaptureConfig`]. In a profile the
//! settings live in a `com.apple.corecapture.configure` payload:
//!
//! ```text
//! CCConfigurePipe   : owner -> pipe -> { Policy }
//! CCConfigureStream : owner -> pipe -> stream -> { CoreCapture: { LogFlags, LogLevel },
//!                                                  Console:     { LogFlags, LogLevel } }
//! ```
//!
//! The `Console` dictionary carries the console settings that cctool sets
//! with `-g`/`-m`; it is omitted when no console values are configured.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use plist::{Dictionary, Value};
use serde::Serialize;
use thiserror::Error;

pub const CORECAPTURE_PAYLOAD_TYPE: &str = "com.apple.corecapture.configure";
const KEY_PIPES: &str = "CCConfigurePipe";
const KEY_STREAMS: &str = "CCConfigureStream";
const KEY_CORECAPTURE: &str = "CoreCapture";
const KEY_CONSOLE: &str = "Console";
const KEY_POLICY: &str = "Policy";
const KEY_LOG_LEVEL: &str = "LogLevel";
const KEY_LOG_FLAGS: &str = "LogFlags";

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("malformed property list: {0}")]
    MalformedPlist(String),
    #[error("invalid value at {path}: {reason}")]
    InvalidValue { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CctoolError {
    #[error("unknown flag {0}")]
    UnknownFlag(String),
    #[error("flag {0} requires a value")]
    MissingValue(String),
    #[error("-c cannot be combined with configuration flags")]
    MixedCaptureAndConfig,
    #[error("missing required flag {0}")]
    MissingRequired(&'static str),
    #[error("invalid value {value:?} for {flag}")]
    InvalidValue { flag: String, value: String },
    #[error("nothing to do: no configuration flags and no -c command")]
    EmptyInvocation,
    #[error("stream settings need both -l and -f ({0})")]
    IncompleteStreamSetting(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    SignedProfile,
    UnsignedProfile,
    CommandLine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PipeSetting {
    pub policy: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StreamSetting {
    pub log_level: u32,
    pub log_flags: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub console_level: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub console_flags: Option<u64>,
}

impl StreamSetting {
    pub fn new(log_level: u32, log_flags: u64) -> Self {
        StreamSetting {
            log_level,
            log_flags,
            console_level: None,
            console_flags: None,
        }
    }

    pub fn with_console(mut self, level: u32, flags: u64) -> Self {
        self.console_level = Some(level);
        self.console_flags = Some(flags);
        self
    }
}

pub type PipeSettings = BTreeMap<String, BTreeMap<String, PipeSetting>>;
pub type StreamSettings = BTreeMap<String, BTreeMap<String, BTreeMap<String, StreamSetting>>>;

/// Pipe and stream settings addressed by owner and name.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CaptureConfig {
    pub pipes: PipeSettings,
    pub streams: StreamSettings,
    pub provenance: BTreeSet<Provenance>,
}

impl CaptureConfig {
    pub fn new(provenance: Provenance) -> Self {
        CaptureConfig {
            provenance: BTreeSet::from([provenance]),
            ..Default::default()
        }
    }

    pub fn set_pipe(&mut self, owner: &str, pipe: &str, setting: PipeSetting) {
        self.pipes
            .entry(owner.to_string())
            .or_default()
            .insert(pipe.to_string(), setting);
    }

    pub fn set_stream(&mut self, owner: &str, pipe: &str, stream: &str, setting: StreamSetting) {
        self.streams
            .entry(owner.to_string())
            .or_default()
            .entry(pipe.to_string())
            .or_default()
            .insert(stream.to_string(), setting);
    }

    pub fn pipe(&self, owner: &str, pipe: &str) -> Option<&PipeSetting> {
        self.pipes.get(owner)?.get(pipe)
    }

    pub fn stream(&self, owner: &str, pipe: &str, stream: &str) -> Option<&StreamSetting> {
        self.streams.get(owner)?.get(pipe)?.get(stream)
    }

    pub fn is_empty(&self) -> bool {
        self.pipes.is_empty() && self.streams.is_empty()
    }

    /// Drop empty inner maps.
    pub fn normalize(&mut self) {
        self.pipes.retain(|_, pipes| !pipes.is_empty());
        for pipes in self.streams.values_mut() {
            pipes.retain(|_, streams| !streams.is_empty());
        }
        self.streams.retain(|_, pipes| !pipes.is_empty());
    }

    /// Equality ignoring provenance.
    pub fn same_settings(&self, other: &CaptureConfig) -> bool {
        self.pipes == other.pipes && self.streams == other.streams
    }

    pub fn iter_pipes(&self) -> impl Iterator<Item = (&str, &str, &PipeSetting)> {
        self.pipes.iter().flat_map(|(owner, pipes)| {
            pipes
                .iter()
                .map(move |(pipe, s)| (owner.as_str(), pipe.as_str(), s))
        })
    }

    pub fn iter_streams(&self) -> impl Iterator<Item = (&str, &str, &str, &StreamSetting)> {
        self.streams.iter().flat_map(|(owner, pipes)| {
            pipes.iter().flat_map(move |(pipe, streams)| {
                streams
                    .iter()
                    .map(move |(stream, s)| (owner.as_str(), pipe.as_str(), stream.as_str(), s))
            })
        })
    }
}

/// Union of two configurations; values from `signed` win on conflict.
///
/// Stream console settings merge field by field, so a signed stream without
/// console values keeps the unsigned profile's console values.
pub fn merge_configs(signed: &CaptureConfig, unsigned: &CaptureConfig) -> CaptureConfig {
    let mut out = unsigned.clone();
    for (owner, pipe, setting) in signed.iter_pipes() {
        out.set_pipe(owner, pipe, *setting);
    }
    for (owner, pipe, stream, setting) in signed.iter_streams() {
        let merged = match unsigned.stream(owner, pipe, stream) {
            Some(base) => StreamSetting {
                log_level: setting.log_level,
                log_flags: setting.log_flags,
                console_level: setting.console_level.or(base.console_level),
                console_flags: setting.console_flags.or(base.console_flags),
            },
            None => *setting,
        };
        out.set_stream(owner, pipe, stream, merged);
    }
    out.provenance = signed.provenance.union(&unsigned.provenance).copied().collect();
    out.normalize();
    out
}

/// A payload found in a profile, whether or not it was interpreted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PayloadSummary {
    pub payload_type: String,
    pub identifier: Option<String>,
    pub interpreted: bool,
}

/// Bytes around the embedded XML of a signature-wrapped profile, kept opaque.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignatureWrapper {
    pub prefix: Vec<u8>,
    pub suffix: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedProfile {
    pub config: CaptureConfig,
    pub payloads: Vec<PayloadSummary>,
    pub signature: Option<SignatureWrapper>,
    /// Set when no CoreCapture payload was present (the config is empty).
    pub no_corecapture_payload: bool,
}

/// Locate the XML property list in `bytes`, skipping a signature wrapper.
fn unwrap_signature(bytes: &[u8]) -> Result<(&[u8], Option<SignatureWrapper>), ProfileError> {
    let trimmed_start = bytes
        .iter()
        .position(|b| !b.is_ascii_whitespace())
        .unwrap_or(bytes.len());
    let body = &bytes[trimmed_start..];
    let body = body.strip_prefix(b"\xef\xbb\xbf").unwrap_or(body);
    if body.starts_with(b"<") || body.starts_with(b"bplist") {
        return Ok((bytes, None));
    }
    let start = find(bytes, b"<?xml")
        .or_else(|| find(bytes, b"<plist"))
        .ok_or_else(|| ProfileError::MalformedPlist("no XML property list found".into()))?;
    let end = rfind(bytes, b"</plist>")
        .map(|p| p + b"</plist>".len())
        .filter(|&e| e > start)
        .ok_or_else(|| ProfileError::MalformedPlist("unterminated embedded property list".into()))?;
    Ok((
        &bytes[start..end],
        Some(SignatureWrapper {
            prefix: bytes[..start].to_vec(),
            suffix: bytes[end..].to_vec(),
        }),
    ))
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

fn rfind(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).rposition(|w| w == needle)
}

/// Parse a configuration profile (plain or signature-wrapped).
///
/// Only `com.apple.corecapture.configure` payloads are interpreted; other
/// payloads are listed in [`ParsedProfile::payloads`]. A bare dictionary
/// that holds `CCConfigurePipe`/`CCConfigureStream` directly is treated as
/// a CoreCapture payload.
pub fn parse_profile(bytes: &[u8]) -> Result<ParsedProfile, ProfileError> {
    let (xml, signature) = unwrap_signature(bytes)?;
    let root = Value::from_reader(std::io::Cursor::new(xml))
        .map_err(|e| ProfileError::MalformedPlist(e.to_string()))?;
    let root = root
        .as_dictionary()
        .ok_or_else(|| ProfileError::MalformedPlist("root is not a dictionary".into()))?;

    let provenance = if signature.is_some() {
        Provenance::SignedProfile
    } else {
        Provenance::UnsignedProfile
    };
    let mut config = CaptureConfig::new(provenance);
    let mut payloads = Vec::new();
    let mut found = false;

    let mut visit = |payload: &Dictionary, path: &str| -> Result<(), ProfileError> {
        let payload_type = payload
            .get("PayloadType")
            .and_then(Value::as_string)
            .map(str::to_string);
        let has_cc_keys = payload.contains_key(KEY_PIPES) || payload.contains_key(KEY_STREAMS);
        let is_cc = payload_type.as_deref() == Some(CORECAPTURE_PAYLOAD_TYPE)
            || (payload_type.is_none() && has_cc_keys);
        if is_cc {
            found = true;
            read_corecapture_payload(payload, path, &mut config)?;
        }
        if payload_type.is_some() || is_cc {
            payloads.push(PayloadSummary {
                payload_type: payload_type.unwrap_or_else(|| CORECAPTURE_PAYLOAD_TYPE.into()),
                identifier: payload
                    .get("PayloadIdentifier")
                    .and_then(Value::as_string)
                    .map(str::to_string),
                interpreted: is_cc,
            });
        }
        Ok(())
    };

    match root.get("PayloadContent").and_then(Value::as_array) {
        Some(content) => {
            for (i, item) in content.iter().enumerate() {
                if let Some(dict) = item.as_dictionary() {
                    visit(dict, &format!("PayloadContent[{i}]"))?;
                }
            }
        }
        None => visit(root, "")?,
    }

    config.normalize();
    Ok(ParsedProfile {
        config,
        payloads,
        signature,
        no_corecapture_payload: !found,
    })
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn dict_at<'a>(value: &'a Value, path: &str) -> Result<&'a Dictionary, ProfileError> {
    value.as_dictionary().ok_or_else(|| ProfileError::InvalidValue {
        path: path.to_string(),
        reason: "expected a dictionary".into(),
    })
}

fn unsigned_at(dict: &Dictionary, key: &str, path: &str) -> Result<Option<u64>, ProfileError> {
    let Some(value) = dict.get(key) else {
        return Ok(None);
    };
    let path = join(path, key);
    match value {
        Value::Integer(i) => i.as_unsigned().map(Some).ok_or(ProfileError::InvalidValue {
            path,
            reason: "negative integer".into(),
        }),
        _ => Err(ProfileError::InvalidValue {
            path,
            reason: "expected an integer".into(),
        }),
    }
}

fn u32_at(dict: &Dictionary, key: &str, path: &str) -> Result<Option<u32>, ProfileError> {
    unsigned_at(dict, key, path)?
        .map(|v| {
            u32::try_from(v).map_err(|_| ProfileError::InvalidValue {
                path: join(path, key),
                reason: format!("{v} does not fit in 32 bits"),
            })
        })
        .transpose()
}

fn read_corecapture_payload(
    payload: &Dictionary,
    path: &str,
    config: &mut CaptureConfig,
) -> Result<(), ProfileError> {
    if let Some(pipes) = payload.get(KEY_PIPES) {
        let p = join(path, KEY_PIPES);
        for (owner, per_owner) in dict_at(pipes, &p)? {
            let p = join(&p, owner);
            for (pipe, settings) in dict_at(per_owner, &p)? {
                let p = join(&p, pipe);
                let settings = dict_at(settings, &p)?;
                if let Some(policy) = u32_at(settings, KEY_POLICY, &p)? {
                    config.set_pipe(owner, pipe, PipeSetting { policy });
                }
            }
        }
    }
    if let Some(streams) = payload.get(KEY_STREAMS) {
        let p = join(path, KEY_STREAMS);
        for (owner, per_owner) in dict_at(streams, &p)? {
            let p = join(&p, owner);
            for (pipe, per_pipe) in dict_at(per_owner, &p)? {
                let p = join(&p, pipe);
                for (stream, settings) in dict_at(per_pipe, &p)? {
                    let p = join(&p, stream);
                    let settings = dict_at(settings, &p)?;
                    if let Some(setting) = read_stream_setting(settings, &p)? {
                        config.set_stream(owner, pipe, stream, setting);
                    }
                }
            }
        }
    }
    Ok(())
}

fn read_stream_setting(dict: &Dictionary, path: &str) -> Result<Option<StreamSetting>, ProfileError> {
    let Some(cc) = dict.get(KEY_CORECAPTURE) else {
        return Ok(None);
    };
    let cc_path = join(path, KEY_CORECAPTURE);
    let cc = dict_at(cc, &cc_path)?;
    let level = u32_at(cc, KEY_LOG_LEVEL, &cc_path)?;
    let flags = unsigned_at(cc, KEY_LOG_FLAGS, &cc_path)?;
    let (Some(log_level), Some(log_flags)) = (level, flags) else {
        if level.is_none() && flags.is_none() {
            return Ok(None);
        }
        return Err(ProfileError::InvalidValue {
            path: cc_path,
            reason: "LogLevel and LogFlags must appear together".into(),
        });
    };
    let mut setting = StreamSetting::new(log_level, log_flags);
    if let Some(console) = dict.get(KEY_CONSOLE) {
        let c_path = join(path, KEY_CONSOLE);
        let console = dict_at(console, &c_path)?;
        setting.console_level = u32_at(console, KEY_LOG_LEVEL, &c_path)?;
        setting.console_flags = unsigned_at(console, KEY_LOG_FLAGS, &c_path)?;
    }
    Ok(Some(setting))
}

fn level_dict(level: u32, flags: u64) -> Value {
    let mut d = Dictionary::new();
    d.insert(KEY_LOG_FLAGS.into(), Value::Integer(flags.into()));
    d.insert(KEY_LOG_LEVEL.into(), Value::Integer(u64::from(level).into()));
    Value::Dictionary(d)
}

/// Build the `com.apple.corecapture.configure` payload dictionary.
pub fn corecapture_payload(config: &CaptureConfig, identifier: &str, uuid: &str) -> Dictionary {
    let mut pipes = Dictionary::new();
    for (owner, per_owner) in &config.pipes {
        let mut od = Dictionary::new();
        for (pipe, s) in per_owner {
            let mut pd = Dictionary::new();
            pd.insert(KEY_POLICY.into(), Value::Integer(u64::from(s.policy).into()));
            od.insert(pipe.clone(), Value::Dictionary(pd));
        }
        pipes.insert(owner.clone(), Value::Dictionary(od));
    }

    let mut streams = Dictionary::new();
    for (owner, per_owner) in &config.streams {
        let mut od = Dictionary::new();
        for (pipe, per_pipe) in per_owner {
            let mut pd = Dictionary::new();
            for (stream, s) in per_pipe {
                let mut sd = Dictionary::new();
                if s.console_level.is_some() || s.console_flags.is_some() {
                    let mut c = Dictionary::new();
                    if let Some(f) = s.console_flags {
                        c.insert(KEY_LOG_FLAGS.into(), Value::Integer(f.into()));
                    }
                    if let Some(l) = s.console_level {
                        c.insert(KEY_LOG_LEVEL.into(), Value::Integer(u64::from(l).into()));
                    }
                    sd.insert(KEY_CONSOLE.into(), Value::Dictionary(c));
                }
                sd.insert(KEY_CORECAPTURE.into(), level_dict(s.log_level, s.log_flags));
                pd.insert(stream.clone(), Value::Dictionary(sd));
            }
            od.insert(pipe.clone(), Value::Dictionary(pd));
        }
        streams.insert(owner.clone(), Value::Dictionary(od));
    }

    let mut payload = Dictionary::new();
    payload.insert(KEY_PIPES.into(), Value::Dictionary(pipes));
    payload.insert(KEY_STREAMS.into(), Value::Dictionary(streams));
    payload.insert("PayloadDisplayName".into(), "CoreCapture".into());
    payload.insert("PayloadIdentifier".into(), identifier.into());
    payload.insert("PayloadType".into(), CORECAPTURE_PAYLOAD_TYPE.into());
    payload.insert("PayloadUUID".into(), uuid.into());
    payload.insert("PayloadVersion".into(), Value::Integer(1.into()));
    payload
}

const PROFILE_IDENTIFIER: &str = "org.cctrace.corecapture";

/// Deterministic UUID derived from the settings (no provenance).
fn settings_uuid(config: &CaptureConfig, salt: &str) -> String {
    let lines = emit_cctool_commands(config).join("\n");
    let name = format!("{salt}\n{lines}");
    uuid::Uuid::new_v5(&uuid::Uuid::NAMESPACE_OID, name.as_bytes())
        .hyphenated()
        .to_string()
        .to_uppercase()
}

/// Emit an unsigned `.mobileconfig` profile holding one CoreCapture payload.
///
/// Output is a pure function of the settings: equal configs give identical
/// bytes.
pub fn generate_profile(config: &CaptureConfig) -> Vec<u8> {
    let payload = corecapture_payload(
        config,
        &format!("{PROFILE_IDENTIFIER}.configure"),
        &settings_uuid(config, "payload"),
    );
    let mut root = Dictionary::new();
    root.insert(
        "PayloadContent".into(),
        Value::Array(vec![Value::Dictionary(payload)]),
    );
    root.insert("PayloadDescription".into(), "CoreCapture logging settings".into());
    root.insert("PayloadDisplayName".into(), "CoreCapture".into());
    root.insert("PayloadIdentifier".into(), PROFILE_IDENTIFIER.into());
    root.insert("PayloadRemovalDisallowed".into(), Value::Boolean(false));
    root.insert("PayloadType".into(), "Configuration".into());
    root.insert("PayloadUUID".into(), settings_uuid(config, "profile").into());
    root.insert("PayloadVersion".into(), Value::Integer(1.into()));

    let mut out = Vec::new();
    Value::Dictionary(root)
        .to_writer_xml(&mut out)
        .expect("writing to a Vec cannot fail");
    out.push(b'\n');
    out
}

/// One cctool command line, as arguments after the program name.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CctoolInvocation {
    pub owner: String,
    pub pipe: String,
    pub stream: Option<String>,
    pub policy: Option<u32>,
    pub log_level: Option<u32>,
    pub log_flags: Option<u64>,
    pub console_level: Option<u32>,
    pub console_flags: Option<u64>,
    pub capture_command: Option<String>,
}

impl CctoolInvocation {
    pub fn has_configuration(&self) -> bool {
        self.policy.is_some()
            || self.log_level.is_some()
            || self.log_flags.is_some()
            || self.console_level.is_some()
            || self.console_flags.is_some()
    }

    /// Fold the settings of this line into `config`.
    ///
    /// Stream lines need both `-l` and `-f`, since a config entry always
    /// carries both.
    pub fn merge_into(&self, config: &mut CaptureConfig) -> Result<(), CctoolError> {
        if let Some(policy) = self.policy {
            config.set_pipe(&self.owner, &self.pipe, PipeSetting { policy });
        }
        let stream_values = self.log_level.is_some()
            || self.log_flags.is_some()
            || self.console_level.is_some()
            || self.console_flags.is_some();
        if let Some(stream) = &self.stream {
            if stream_values {
                let (Some(level), Some(flags)) = (self.log_level, self.log_flags) else {
                    return Err(CctoolError::IncompleteStreamSetting(stream.clone()));
                };
                let mut s = StreamSetting::new(level, flags);
                s.console_level = self.console_level;
                s.console_flags = self.console_flags;
                config.set_stream(&self.owner, &self.pipe, stream, s);
            }
        }
        Ok(())
    }
}

impl fmt::Display for CctoolInvocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "-o {} -p {}", self.owner, self.pipe)?;
        if let Some(s) = &self.stream {
            write!(f, " -s {s}")?;
        }
        if let Some(v) = self.policy {
            write!(f, " -x {v}")?;
        }
        if let Some(v) = self.log_level {
            write!(f, " -l {v}")?;
        }
        if let Some(v) = self.log_flags {
            write!(f, " -f {v}")?;
        }
        if let Some(v) = self.console_level {
            write!(f, " -g {v}")?;
        }
        if let Some(v) = self.console_flags {
            write!(f, " -m {v}")?;
        }
        if let Some(c) = &self.capture_command {
            write!(f, " -c {c}")?;
        }
        Ok(())
    }
}

/// Command lines reproducing `config`: per owner and pipe (sorted), the
/// `-x` line first, then one line per stream.
pub fn emit_cctool_commands(config: &CaptureConfig) -> Vec<String> {
    invocations_for(config).iter().map(ToString::to_string).collect()
}

pub fn invocations_for(config: &CaptureConfig) -> Vec<CctoolInvocation> {
    let mut keys: BTreeSet<(&str, &str)> = config.iter_pipes().map(|(o, p, _)| (o, p)).collect();
    keys.extend(config.iter_streams().map(|(o, p, _, _)| (o, p)));

    let mut out = Vec::new();
    for (owner, pipe) in keys {
        if let Some(s) = config.pipe(owner, pipe) {
            out.push(CctoolInvocation {
                owner: owner.into(),
                pipe: pipe.into(),
                policy: Some(s.policy),
                ..Default::default()
            });
        }
        if let Some(streams) = config.streams.get(owner).and_then(|p| p.get(pipe)) {
            for (stream, s) in streams {
                out.push(CctoolInvocation {
                    owner: owner.into(),
                    pipe: pipe.into(),
                    stream: Some(stream.clone()),
                    log_level: Some(s.log_level),
                    log_flags: Some(s.log_flags),
                    console_level: s.console_level,
                    console_flags: s.console_flags,
                    ..Default::default()
                });
            }
        }
    }
    out
}

/// Numeric cctool value: decimal, `0x` hex, or `-1` for the type's maximum.
fn parse_number(flag: &str, value: &str, max: u64) -> Result<u64, CctoolError> {
    let invalid = || CctoolError::InvalidValue {
        flag: flag.to_string(),
        value: value.to_string(),
    };
    if value == "-1" {
        return Ok(max);
    }
    let parsed = match value.strip_prefix("0x").or_else(|| value.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => value.parse::<u64>(),
    }
    .map_err(|_| invalid())?;
    if parsed > max {
        return Err(invalid());
    }
    Ok(parsed)
}

fn parse_u32(flag: &str, value: &str) -> Result<u32, CctoolError> {
    parse_number(flag, value, u64::from(u32::MAX)).map(|v| v as u32)
}

/// Parse cctool arguments (without the program name).
///
/// Flags and values strictly alternate, so a value may start with `-`
/// (e.g. `-f -1`).
pub fn parse_cctool_args<S: AsRef<str>>(args: &[S]) -> Result<CctoolInvocation, CctoolError> {
    let mut inv = CctoolInvocation::default();
    let mut owner = None;
    let mut pipe = None;
    let mut it = args.iter().map(AsRef::as_ref);
    while let Some(flag) = it.next() {
        let known = matches!(flag, "-o" | "-p" | "-s" | "-x" | "-l" | "-f" | "-g" | "-m" | "-c");
        if !known {
            return Err(CctoolError::UnknownFlag(flag.to_string()));
        }
        let value = it
            .next()
            .ok_or_else(|| CctoolError::MissingValue(flag.to_string()))?;
        match flag {
            "-o" => owner = Some(value.to_string()),
            "-p" => pipe = Some(value.to_string()),
            "-s" => inv.stream = Some(value.to_string()),
            "-x" => inv.policy = Some(parse_u32(flag, value)?),
            "-l" => inv.log_level = Some(parse_u32(flag, value)?),
            "-f" => inv.log_flags = Some(parse_number(flag, value, u64::MAX)?),
            "-g" => inv.console_level = Some(parse_u32(flag, value)?),
            "-m" => inv.console_flags = Some(parse_number(flag, value, u64::MAX)?),
            "-c" => inv.capture_command = Some(value.to_string()),
            _ => unreachable!(),
        }
    }
    if inv.capture_command.is_some() && inv.has_configuration() {
        return Err(CctoolError::MixedCaptureAndConfig);
    }
    inv.owner = owner.ok_or(CctoolError::MissingRequired("-o"))?;
    inv.pipe = pipe.ok_or(CctoolError::MissingRequired("-p"))?;
    if inv.capture_command.is_none() && !inv.has_configuration() {
        return Err(CctoolError::EmptyInvocation);
    }
    Ok(inv)
}

/// Split one cctool command line into arguments.
///
/// Anything before the first flag (`sudo`, `$CCTOOL`, a path to cctool) is
/// dropped and double quotes around a token are removed, so lines can be
/// pasted from a shell script. Blank lines and `#` comments yield `None`.
pub fn split_cctool_line(line: &str) -> Option<Vec<String>> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return None;
    }
    let tokens: Vec<&str> = line.split_whitespace().collect();
    let first_flag = tokens.iter().position(|t| t.starts_with('-'))?;
    Some(
        tokens[first_flag..]
            .iter()
            .map(|t| {
                t.strip_prefix('"')
                    .and_then(|t| t.strip_suffix('"'))
                    .unwrap_or(t)
                    .to_string()
            })
            .collect(),
    )
}

/// Parse a block of cctool command lines into invocations.
pub fn parse_cctool_script(text: &str) -> Result<Vec<CctoolInvocation>, (usize, CctoolError)> {
    text.lines()
        .enumerate()
        .filter_map(|(i, line)| split_cctool_line(line).map(|args| (i + 1, args)))
        .map(|(n, args)| parse_cctool_args(&args).map_err(|e| (n, e)))
        .collect()
}

/// Build a config from the configuration lines among `invocations`;
/// capture commands are ignored.
pub fn config_from_invocations(invocations: &[CctoolInvocation]) -> Result<CaptureConfig, CctoolError> {
    let mut config = CaptureConfig::new(Provenance::CommandLine);
    for inv in invocations.iter().filter(|i| i.capture_command.is_none()) {
        inv.merge_into(&mut config)?;
    }
    config.normalize();
    Ok(config)
}
