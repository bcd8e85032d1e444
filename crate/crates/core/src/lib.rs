//! CoreCapture tooling.
//!
//! The crate models the CoreCapture logging lifecycle (streams feeding
//! bounded pipes that are dumped into trace folders on demand) and provides
//! the readers needed to inspect what such a capture produced:
//!
//! - [`pcap`]: classic PCAP reader/writer and the link-type registry.
//! - [`registry`]: pipes, streams and the capture engine.
//! - [`profile`]: configuration profiles and cctool-style command lines.
//! - [`folder`]: trace folder scanning, validation, reporting and writing.
//! - [`dissect`]: dissection of private-use (USER3) record payloads.
//! - [`cli`]: the `cctrace` command-line front-end.

pub mod cli;
pub mod dissect;
pub mod folder;
mod glob;
pub mod pcap;
pub mod profile;
pub mod registry;

pub use dissect::{DissectedFrame, DissectorRegistry, DissectorSelector, TlvConfig};
pub use folder::{scan_folder, validate_index, FileKind, FolderIndex, Platform};
pub use pcap::{LinkType, PcapGlobalHeader, PcapReader, PcapRecord};
pub use profile::{CaptureConfig, CctoolInvocation};
pub use registry::{DumpBundle, LogEvent, PipeDescriptor, Registry, StreamDescriptor};

/// Version string recorded in trace folder metadata.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
