//! The `cctrace` command line.
//!
//! Exit codes: 0 success, 1 validation findings, 2 usage error, 3 I/O or
//! parse failure.
//!
//! # Simulation scripts
//!
//! `simulate` and `dump` read a line-oriented script that drives a
//! [`Registry`] without a kernel. Blank lines and `#` comments are skipped.
//!
//! ```text
//! PIPE <owner> <pipe> [capacity=N] [policy=0|1]
//! STREAM <owner> <pipe> <stream> log|data
//! CCTOOL <cctool arguments>          # configuration, or -c <cmd> to dump
//! SNAPSHOT <owner> <pipe> <stream> <base64>
//! TIME <ns>
//! EVENT <owner> <pipe> <stream> <level> <flags-hex> <base64-payload>
//! DUMP <owner-glob> <pipe-glob> [manual|error]
//! ```
//!
//! The clock starts at 0 and advances by 1000 ns after every `EVENT`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::dissect::{emit_wireshark_user_dlt, frame_json, render, DissectorRegistry, RenderFormat};
use crate::folder::{
    decode_base64, materialize_folder, scan_folder, summarize, Platform, ReportFormat, Severity,
};
use crate::pcap::{PcapError, PcapReader};
use crate::profile::{
    emit_cctool_commands, generate_profile, merge_configs, parse_cctool_args, parse_cctool_script,
    parse_profile, split_cctool_line, CaptureConfig, CctoolInvocation, PipeSetting, Provenance,
    StreamSetting,
};
use crate::registry::{
    ChangeReport, DumpBundle, DumpReason, LogEvent, LogPolicy, PipeDescriptor, Registry,
    StreamDescriptor, StreamKind, Timestamp,
};

/// Advance of the simulated clock per `EVENT` line.
pub const EVENT_TICK_NS: u64 = 1000;

pub const NVRAM_COMMANDS: [&str; 2] = [
    "csrutil enable --without nvram",
    "nvram boot-args=debug=0x10000 awdl_log_flags=0xffffffffffffffff awdl_log_flags_verbose=0xffffffffffffffff awdl_log_flags_config=1 wlan.debug.enable=0xff",
];

#[derive(Parser, Debug)]
#[command(
    name = "cctrace",
    version,
    about = "Configure, simulate, dump, scan and dissect CoreCapture traces"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Merge profiles and cctool settings and print the normalized config as JSON
    Configure(ConfigInput),
    /// Write a .mobileconfig profile for the given settings
    EmitProfile {
        #[command(flatten)]
        input: ConfigInput,
        /// Output file (stdout when omitted or "-")
        #[arg(long, short = 'O')]
        output: Option<PathBuf>,
    },
    /// Print cctool command lines reproducing the given settings
    EmitCctool {
        #[command(flatten)]
        input: ConfigInput,
        /// Text placed before every line, e.g. "sudo cctool"
        #[arg(long)]
        prefix: Option<String>,
    },
    /// Run a simulation script and report the registry state as JSON
    Simulate {
        /// Script file ("-" for stdin)
        script: PathBuf,
    },
    /// Run a simulation script, trigger a dump and write a capture folder
    Dump {
        /// Script file ("-" for stdin)
        script: PathBuf,
        /// Owner glob
        #[arg(short = 'o', long, default_value = "*")]
        owner: String,
        /// Pipe glob
        #[arg(short = 'p', long, default_value = "*")]
        pipe: String,
        #[arg(long, value_enum, default_value_t = ReasonArg::Manual)]
        reason: ReasonArg,
        /// Destination folder (must not exist or be empty)
        #[arg(long)]
        out: PathBuf,
    },
    /// Index and validate a capture folder
    Scan {
        folder: PathBuf,
        #[arg(long)]
        json: bool,
        /// Platform the capture came from (ios or macos)
        #[arg(long)]
        platform: Option<Platform>,
    },
    /// Dissect every record of a PCAP file
    Extract {
        pcap: PathBuf,
        #[arg(long)]
        json: bool,
        /// Stream name used to select dissectors (defaults to the file stem)
        #[arg(long)]
        context: Option<String>,
    },
    /// Print a Wireshark user_dlts entry
    WiresharkMap {
        #[arg(long, default_value_t = 150)]
        dlt: u32,
        #[arg(long, default_value = "corecapture")]
        protocol: String,
    },
    /// Show the macOS boot-args commands for more driver output (nothing is run)
    NvramHelp,
}

#[derive(Args, Debug, Default)]
struct ConfigInput {
    /// Configuration profile; signed profiles take precedence ("-" for stdin)
    #[arg(long = "profile", value_name = "PATH")]
    profiles: Vec<PathBuf>,
    /// File of cctool command lines
    #[arg(long = "cctool-file", value_name = "PATH")]
    cctool_files: Vec<PathBuf>,
    /// cctool arguments (-o -p -s -x -l -f -g -m); must come last
    #[arg(long, num_args = 1.., allow_hyphen_values = true, value_name = "ARGS")]
    cctool: Vec<String>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ReasonArg {
    Manual,
    Error,
}

impl From<ReasonArg> for DumpReason {
    fn from(r: ReasonArg) -> Self {
        match r {
            ReasonArg::Manual => DumpReason::Manual,
            ReasonArg::Error => DumpReason::Error,
        }
    }
}

enum Failure {
    Usage(String),
    Input(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Input(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Input(m) => m,
        }
    }
}

fn input_err(context: impl std::fmt::Display, e: impl std::fmt::Display) -> Failure {
    Failure::Input(format!("{context}: {e}"))
}

struct Io<'a> {
    stdin: &'a mut dyn Read,
    stdout: &'a mut dyn Write,
    stderr: &'a mut dyn Write,
}

impl Io<'_> {
    fn read_path(&mut self, path: &Path) -> Result<Vec<u8>, Failure> {
        if path == Path::new("-") {
            let mut buf = Vec::new();
            self.stdin
                .read_to_end(&mut buf)
                .map_err(|e| input_err("stdin", e))?;
            Ok(buf)
        } else {
            fs::read(path).map_err(|e| input_err(path.display(), e))
        }
    }

    fn out(&mut self, bytes: &[u8]) -> Result<(), Failure> {
        self.stdout
            .write_all(bytes)
            .map_err(|e| input_err("stdout", e))
    }
}

/// Run the tool on `argv` (program name first) and return the exit code.
pub fn run<I, S>(argv: I, stdin: &mut dyn Read, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = stdout.write_all(text.as_bytes());
                    0
                }
                _ => {
                    let _ = stderr.write_all(text.as_bytes());
                    2
                }
            };
        }
    };
    let mut io = Io { stdin, stdout, stderr };
    match dispatch(cli.command, &mut io) {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(io.stderr, "cctrace: {}", f.message());
            if let Failure::Usage(_) = f {
                use clap::CommandFactory;
                let _ = writeln!(io.stderr, "\n{}", Cli::command().render_usage());
            }
            f.code()
        }
    }
}

fn dispatch(command: Command, io: &mut Io<'_>) -> Result<i32, Failure> {
    match command {
        Command::Configure(input) => {
            let config = load_config(&input, io)?;
            let text = serde_json::to_string_pretty(&config).expect("config serializes");
            io.out(text.as_bytes())?;
            io.out(b"\n")?;
            Ok(0)
        }
        Command::EmitProfile { input, output } => {
            let config = load_config(&input, io)?;
            let bytes = generate_profile(&config);
            match output {
                Some(path) if path != Path::new("-") => {
                    fs::write(&path, bytes).map_err(|e| input_err(path.display(), e))?
                }
                _ => io.out(&bytes)?,
            }
            Ok(0)
        }
        Command::EmitCctool { input, prefix } => {
            let config = load_config(&input, io)?;
            for line in emit_cctool_commands(&config) {
                let line = match &prefix {
                    Some(p) if !p.is_empty() => format!("{p} {line}\n"),
                    _ => format!("{line}\n"),
                };
                io.out(line.as_bytes())?;
            }
            Ok(0)
        }
        Command::Simulate { script } => {
            let text = script_text(&script, io)?;
            let sim = Simulation::run(&text)?;
            let report = sim.report();
            io.out(serde_json::to_string_pretty(&report).expect("report serializes").as_bytes())?;
            io.out(b"\n")?;
            Ok(0)
        }
        Command::Dump {
            script,
            owner,
            pipe,
            reason,
            out,
        } => {
            let text = script_text(&script, io)?;
            let mut sim = Simulation::run(&text)?;
            let bundle = sim
                .registry
                .trigger_dump(&owner, &pipe, reason.into(), sim.clock);
            let index = materialize_folder(&bundle, &sim.effective_config(), &out)
                .map_err(|e| input_err("dump", e))?;
            let _ = writeln!(
                io.stderr,
                "wrote {} ({} events, {} snapshots, {} files)",
                out.display(),
                bundle.event_count(),
                bundle.snapshots.len(),
                index.entries.len()
            );
            io.out(summarize(&index, ReportFormat::Text).as_bytes())?;
            Ok(if index.has_errors() { 1 } else { 0 })
        }
        Command::Scan {
            folder,
            json,
            platform,
        } => {
            let index = scan_folder(&folder)
                .map_err(|e| input_err("scan", e))?
                .validated(platform);
            let format = if json { ReportFormat::Json } else { ReportFormat::Text };
            io.out(summarize(&index, format).as_bytes())?;
            Ok(if index.finding_count(Severity::Error) > 0 { 1 } else { 0 })
        }
        Command::Extract {
            pcap,
            json,
            context,
        } => extract(&pcap, json, context, io),
        Command::WiresharkMap { dlt, protocol } => {
            let line = emit_wireshark_user_dlt(dlt, &protocol).map_err(|e| Failure::Usage(e.to_string()))?;
            io.out(format!("{line}\n").as_bytes())?;
            Ok(0)
        }
        Command::NvramHelp => {
            let mut text = String::new();
            text.push_str("WARNING: these commands change the boot configuration of a Mac.\n");
            text.push_str("WARNING: only use them on a dedicated, non-production machine.\n");
            text.push_str("cctrace does not run them. Boot into recovery mode, open a terminal and enter:\n\n");
            for cmd in NVRAM_COMMANDS {
                text.push_str("    ");
                text.push_str(cmd);
                text.push('\n');
            }
            text.push_str("\nReboot afterwards. Reset with `nvram -d boot-args` and `csrutil enable`.\n");
            io.out(text.as_bytes())?;
            Ok(0)
        }
    }
}

fn script_text(path: &Path, io: &mut Io<'_>) -> Result<String, Failure> {
    let bytes = io.read_path(path)?;
    String::from_utf8(bytes).map_err(|e| input_err(path.display(), e))
}

/// Signed profiles over unsigned ones, then cctool lines applied on top in
/// order (a later line overrides an earlier one).
fn load_config(input: &ConfigInput, io: &mut Io<'_>) -> Result<CaptureConfig, Failure> {
    let mut signed = CaptureConfig::default();
    let mut unsigned = CaptureConfig::default();
    for path in &input.profiles {
        let bytes = io.read_path(path)?;
        let parsed = parse_profile(&bytes).map_err(|e| input_err(path.display(), e))?;
        if parsed.no_corecapture_payload {
            let _ = writeln!(io.stderr, "cctrace: {}: no CoreCapture payload", path.display());
        }
        let target = if parsed.signature.is_some() { &mut signed } else { &mut unsigned };
        // Among profiles of the same kind the later one wins.
        *target = merge_configs(&parsed.config, target);
    }
    let mut config = merge_configs(&signed, &unsigned);

    let mut invocations: Vec<CctoolInvocation> = Vec::new();
    for path in &input.cctool_files {
        let bytes = io.read_path(path)?;
        let text = String::from_utf8(bytes).map_err(|e| input_err(path.display(), e))?;
        let parsed = parse_cctool_script(&text)
            .map_err(|(line, e)| Failure::Input(format!("{}:{line}: {e}", path.display())))?;
        invocations.extend(parsed);
    }
    if !input.cctool.is_empty() {
        let inv = parse_cctool_args(&input.cctool).map_err(|e| Failure::Usage(format!("--cctool: {e}")))?;
        invocations.push(inv);
    }
    for inv in &invocations {
        if inv.capture_command.is_some() {
            let _ = writeln!(io.stderr, "cctrace: ignoring capture command in `{inv}`");
            continue;
        }
        inv.merge_into(&mut config).map_err(|e| Failure::Usage(format!("`{inv}`: {e}")))?;
        config.provenance.insert(Provenance::CommandLine);
    }
    config.normalize();
    Ok(config)
}

/// A registry driven by a simulation script.
pub struct Simulation {
    pub registry: Registry,
    pub clock: Timestamp,
    pub accepted: usize,
    pub rejected: usize,
    pub dumps: Vec<DumpBundle>,
    pub changes: ChangeReport,
}

fn script_err(line: usize, msg: impl std::fmt::Display) -> Failure {
    Failure::Input(format!("script line {line}: {msg}"))
}

fn parse_num<T: std::str::FromStr>(line: usize, what: &str, text: &str) -> Result<T, Failure> {
    text.parse()
        .map_err(|_| script_err(line, format!("invalid {what} {text:?}")))
}

impl Simulation {
    pub fn run_script(text: &str) -> Result<Simulation, String> {
        Simulation::run(text).map_err(|f| f.message().to_string())
    }

    fn run(text: &str) -> Result<Simulation, Failure> {
        let mut sim = Simulation {
            registry: Registry::new(),
            clock: 0,
            accepted: 0,
            rejected: 0,
            dumps: Vec::new(),
            changes: ChangeReport::default(),
        };
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            let args: Vec<&str> = rest.split_whitespace().collect();
            match word.to_ascii_uppercase().as_str() {
                "PIPE" => sim.pipe(n, &args)?,
                "STREAM" => sim.stream(n, &args)?,
                "CCTOOL" => sim.cctool(n, rest)?,
                "SNAPSHOT" => {
                    let [owner, pipe, stream, data] = args[..] else {
                        return Err(script_err(n, "SNAPSHOT needs <owner> <pipe> <stream> <base64>"));
                    };
                    let payload = decode_base64(data).map_err(|e| script_err(n, e))?;
                    sim.registry
                        .set_data_snapshot(owner, pipe, stream, move || payload.clone())
                        .map_err(|e| script_err(n, e))?;
                }
                "TIME" => {
                    let [t] = args[..] else {
                        return Err(script_err(n, "TIME needs <ns>"));
                    };
                    sim.clock = parse_num(n, "time", t)?;
                }
                "EVENT" => sim.event(n, &args)?,
                "DUMP" => {
                    let (owner, pipe, reason) = match args[..] {
                        [o, p] => (o, p, DumpReason::Manual),
                        [o, p, r] => (o, p, parse_reason(n, r)?),
                        _ => return Err(script_err(n, "DUMP needs <owner-glob> <pipe-glob> [reason]")),
                    };
                    let bundle = sim.registry.trigger_dump(owner, pipe, reason, sim.clock);
                    sim.dumps.push(bundle);
                }
                other => return Err(script_err(n, format!("unknown directive {other}"))),
            }
        }
        Ok(sim)
    }

    /// Current pipe policies and log stream filters of the registry.
    pub fn effective_config(&self) -> CaptureConfig {
        let mut config = CaptureConfig::new(Provenance::CommandLine);
        for view in self.registry.query("*", "*") {
            let (owner, pipe) = (&view.pipe.owner, &view.pipe.name);
            config.set_pipe(owner, pipe, PipeSetting { policy: view.pipe.log_policy.value() });
            for st in view.streams.iter().filter(|s| s.kind == StreamKind::LogStream) {
                let setting = StreamSetting::new(st.log_level, st.log_flags)
                    .with_console(st.console_level, st.console_flags);
                config.set_stream(owner, pipe, &st.name, setting);
            }
        }
        config
    }

    fn pipe(&mut self, n: usize, args: &[&str]) -> Result<(), Failure> {
        let [owner, name, opts @ ..] = args else {
            return Err(script_err(n, "PIPE needs <owner> <pipe>"));
        };
        let mut desc = PipeDescriptor::new(*owner, *name);
        for opt in opts {
            match opt.split_once('=') {
                Some(("capacity", v)) => desc = desc.with_capacity(parse_num(n, "capacity", v)?),
                Some(("policy", v)) => {
                    let p = LogPolicy::from_value(parse_num(n, "policy", v)?)
                        .ok_or_else(|| script_err(n, format!("unsupported policy {v}")))?;
                    desc = desc.with_policy(p);
                }
                _ => return Err(script_err(n, format!("unknown PIPE option {opt:?}"))),
            }
        }
        self.registry.register_pipe(desc).map_err(|e| script_err(n, e))?;
        Ok(())
    }

    fn stream(&mut self, n: usize, args: &[&str]) -> Result<(), Failure> {
        let [owner, pipe, name, kind] = args[..] else {
            return Err(script_err(n, "STREAM needs <owner> <pipe> <stream> log|data"));
        };
        let id = self
            .registry
            .pipe_id(owner, pipe)
            .ok_or_else(|| script_err(n, format!("unknown pipe {owner}/{pipe}")))?;
        let desc = match kind {
            "log" => StreamDescriptor::log(name),
            "data" => StreamDescriptor::data(name),
            other => return Err(script_err(n, format!("stream kind must be log or data, not {other}"))),
        };
        self.registry.register_stream(id, desc).map_err(|e| script_err(n, e))?;
        Ok(())
    }

    fn cctool(&mut self, n: usize, rest: &str) -> Result<(), Failure> {
        let args = split_cctool_line(&format!("cctool {rest}"))
            .ok_or_else(|| script_err(n, "empty CCTOOL line"))?;
        let inv = parse_cctool_args(&args).map_err(|e| script_err(n, e))?;
        if let Some(cmd) = &inv.capture_command {
            let reason = if cmd.contains("error") { DumpReason::Error } else { DumpReason::Manual };
            let bundle = self.registry.trigger_dump(&inv.owner, &inv.pipe, reason, self.clock);
            self.dumps.push(bundle);
            return Ok(());
        }
        let report = self.registry.apply_cctool(&inv);
        self.changes.applied.extend(report.applied);
        self.changes.unmatched.extend(report.unmatched);
        self.changes.rejected.extend(report.rejected);
        Ok(())
    }

    fn event(&mut self, n: usize, args: &[&str]) -> Result<(), Failure> {
        let [owner, pipe, stream, level, flags, payload] = args[..] else {
            return Err(script_err(n, "EVENT needs <owner> <pipe> <stream> <level> <flags-hex> <base64>"));
        };
        let level: u32 = parse_num(n, "level", level)?;
        let digits = flags
            .strip_prefix("0x")
            .or_else(|| flags.strip_prefix("0X"))
            .unwrap_or(flags);
        let flags = u64::from_str_radix(digits, 16)
            .map_err(|_| script_err(n, format!("invalid flags {flags:?}")))?;
        let payload = decode_base64(payload).map_err(|e| script_err(n, e))?;
        let event = LogEvent::new(self.clock, level, flags, payload);
        self.clock += EVENT_TICK_NS;
        if self
            .registry
            .emit_event(owner, pipe, stream, event)
            .map_err(|e| script_err(n, e))?
        {
            self.accepted += 1;
        } else {
            self.rejected += 1;
        }
        Ok(())
    }

    fn report(&self) -> serde_json::Value {
        let pipes: Vec<_> = self
            .registry
            .query("*", "*")
            .into_iter()
            .map(|v| {
                json!({
                    "owner": v.pipe.owner,
                    "pipe": v.pipe.name,
                    "policy": v.pipe.log_policy,
                    "capacity": v.pipe.capacity,
                    "buffered": v.buffered,
                    "streams": v.streams,
                })
            })
            .collect();
        let dumps: Vec<_> = self
            .dumps
            .iter()
            .map(|d| {
                json!({
                    "reason": d.reason,
                    "trigger_time": d.trigger_time,
                    "events": d.event_count(),
                    "snapshots": d.snapshots.len(),
                })
            })
            .collect();
        json!({
            "clock": self.clock,
            "accepted": self.accepted,
            "rejected": self.rejected,
            "pipes": pipes,
            "dumps": dumps,
            "changes": self.changes,
        })
    }
}

fn parse_reason(n: usize, text: &str) -> Result<DumpReason, Failure> {
    match text {
        "manual" => Ok(DumpReason::Manual),
        "error" => Ok(DumpReason::Error),
        other => Err(script_err(n, format!("reason must be manual or error, not {other}"))),
    }
}

fn extract(path: &Path, json: bool, context: Option<String>, io: &mut Io<'_>) -> Result<i32, Failure> {
    let bytes = io.read_path(path)?;
    let mut reader = PcapReader::open(io::Cursor::new(bytes)).map_err(|e| input_err(path.display(), e))?;
    let header = reader.header().clone();
    let context = context.or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .filter(|s| s != "-")
    });
    let registry = DissectorRegistry::new();
    let mut frames = Vec::new();
    let mut code = 0;
    let mut index = 0usize;
    loop {
        let rec = match reader.next_record() {
            Ok(Some(rec)) => rec,
            Ok(None) => break,
            Err(e @ PcapError::TruncatedRecord { .. }) => {
                let _ = writeln!(io.stderr, "cctrace: {}: {e}", path.display());
                code = 1;
                break;
            }
            Err(e) => return Err(input_err(path.display(), e)),
        };
        index += 1;
        let frame = registry.dissect(header.link_type, &rec.payload, context.as_deref());
        let ts = rec.timestamp_nanos(header.timestamp_unit);
        if json {
            frames.push(json!({
                "index": index,
                "timestamp_ns": ts,
                "captured_length": rec.captured_length(),
                "original_length": rec.original_length,
                "frame": frame_json(&frame),
            }));
        } else {
            let text = format!(
                "frame {index}: t={ts} ns, {}/{} bytes, link type {}\n{}\n",
                rec.captured_length(),
                rec.original_length,
                header.link_type.name(),
                render(&frame, RenderFormat::Text).trim_end()
            );
            io.out(text.as_bytes())?;
        }
    }
    if json {
        let doc = json!({
            "link_type": header.link_type,
            "link_type_name": header.link_type.name(),
            "frames": frames,
        });
        io.out(serde_json::to_string_pretty(&doc).expect("frames serialize").as_bytes())?;
        io.out(b"\n")?;
    }
    Ok(code)
}
