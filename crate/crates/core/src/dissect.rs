//! Dissection of private-use link-type payloads.
//!
//! The layout of CoreCapture records is not public, so dissection is a
//! registry of pluggable dissectors with a heuristic fallback. Every
//! [`DissectedFrame`] states how much it can be trusted via [`Confidence`],
//! and its top-level fields plus the residue always partition the payload.

use std::fmt::Write as _;

use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::glob;
use crate::pcap::LinkType;

pub const FRAME_SCHEMA: &str = "cctrace-frame/1";
pub const PROTO_RAW: &str = "raw";
pub const PROTO_LOGTEXT: &str = "cc-logtext";
pub const PROTO_TLV: &str = "cc-tlv";

/// Share of printable bytes required to call a payload text.
pub const TEXT_PRINTABLE_RATIO: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DissectError {
    #[error("DLT {0} is outside the private-use range 147..=162")]
    DltOutOfPrivateRange(u32),
    #[error("TLV value of {len} bytes does not fit a {width}-byte length field")]
    LengthOverflow { len: usize, width: u8 },
    #[error("TLV type {value} does not fit a {width}-byte type field")]
    TypeOverflow { value: u32, width: u8 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("field {name} range {offset}+{length} exceeds bounds {bound_start}..{bound_end}")]
    OutOfBounds {
        name: String,
        offset: usize,
        length: usize,
        bound_start: usize,
        bound_end: usize,
    },
    #[error("field {name} overlaps its previous sibling")]
    Overlap { name: String },
    #[error("top-level fields and residue leave a gap or overlap at byte {0}")]
    CoverageGap(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct ByteRange {
    pub offset: usize,
    pub length: usize,
}

impl ByteRange {
    pub fn new(offset: usize, length: usize) -> Self {
        ByteRange { offset, length }
    }

    pub fn end(self) -> usize {
        self.offset + self.length
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(untagged)]
pub enum FieldValue {
    None,
    Unsigned(u64),
    Text(String),
    Bytes(#[serde(serialize_with = "hex_string")] Vec<u8>),
}

fn hex_string<S: serde::Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&to_hex(bytes))
}

fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Field {
    pub name: String,
    pub range: ByteRange,
    pub value: FieldValue,
    pub children: Vec<Field>,
}

impl Field {
    pub fn new(name: impl Into<String>, range: ByteRange, value: FieldValue) -> Self {
        Field {
            name: name.into(),
            range,
            value,
            children: Vec::new(),
        }
    }

    pub fn with_children(mut self, children: Vec<Field>) -> Self {
        self.children = children;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Confidence {
    Exact,
    Heuristic,
    Opaque,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DissectedFrame {
    pub protocol: String,
    pub payload: Vec<u8>,
    pub fields: Vec<Field>,
    pub residue: ByteRange,
    pub confidence: Confidence,
}

impl DissectedFrame {
    /// The whole payload as residue.
    pub fn raw(payload: &[u8]) -> Self {
        DissectedFrame {
            protocol: PROTO_RAW.into(),
            payload: payload.to_vec(),
            fields: Vec::new(),
            residue: ByteRange::new(0, payload.len()),
            confidence: Confidence::Opaque,
        }
    }

    /// Check field bounds, sibling overlap and that top-level fields plus
    /// the residue tile the payload exactly.
    pub fn validate(&self) -> Result<(), FrameError> {
        let len = self.payload.len();
        check_siblings(&self.fields, 0, len)?;
        if self.residue.end() > len {
            return Err(FrameError::OutOfBounds {
                name: "residue".into(),
                offset: self.residue.offset,
                length: self.residue.length,
                bound_start: 0,
                bound_end: len,
            });
        }
        let mut ranges: Vec<ByteRange> = self.fields.iter().map(|f| f.range).collect();
        if self.residue.length > 0 || ranges.is_empty() {
            ranges.push(self.residue);
        }
        ranges.retain(|r| r.length > 0);
        ranges.sort_by_key(|r| r.offset);
        let mut cursor = 0;
        for r in ranges {
            if r.offset != cursor {
                return Err(FrameError::CoverageGap(cursor.min(r.offset)));
            }
            cursor = r.end();
        }
        if cursor != len {
            return Err(FrameError::CoverageGap(cursor));
        }
        Ok(())
    }
}

fn check_siblings(fields: &[Field], start: usize, end: usize) -> Result<(), FrameError> {
    let mut sorted: Vec<&Field> = fields.iter().collect();
    sorted.sort_by_key(|f| f.range.offset);
    let mut prev_end = start;
    for (i, f) in sorted.iter().enumerate() {
        if f.range.offset < start || f.range.end() > end {
            return Err(FrameError::OutOfBounds {
                name: f.name.clone(),
                offset: f.range.offset,
                length: f.range.length,
                bound_start: start,
                bound_end: end,
            });
        }
        if i > 0 && f.range.offset < prev_end {
            return Err(FrameError::Overlap { name: f.name.clone() });
        }
        prev_end = prev_end.max(f.range.end());
        check_siblings(&f.children, f.range.offset, f.range.end())?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Endianness {
    Big,
    Little,
}

/// Field widths of a TLV encoding. Widths are 1, 2 or 4 bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct TlvConfig {
    pub type_width: u8,
    pub length_width: u8,
    pub endianness: Endianness,
}

impl TlvConfig {
    /// Panics if a width is not 1, 2 or 4.
    pub fn new(type_width: u8, length_width: u8, endianness: Endianness) -> Self {
        assert!(matches!(type_width, 1 | 2 | 4), "type width {type_width}");
        assert!(matches!(length_width, 1 | 2 | 4), "length width {length_width}");
        TlvConfig {
            type_width,
            length_width,
            endianness,
        }
    }

    pub fn header_len(self) -> usize {
        usize::from(self.type_width) + usize::from(self.length_width)
    }

    fn read(self, bytes: &[u8]) -> u32 {
        let mut v: u32 = 0;
        match self.endianness {
            Endianness::Big => {
                for b in bytes {
                    v = (v << 8) | u32::from(*b);
                }
            }
            Endianness::Little => {
                for b in bytes.iter().rev() {
                    v = (v << 8) | u32::from(*b);
                }
            }
        }
        v
    }

    fn write(self, out: &mut Vec<u8>, value: u32, width: u8) {
        let be = value.to_be_bytes();
        let bytes = &be[4 - usize::from(width)..];
        match self.endianness {
            Endianness::Big => out.extend_from_slice(bytes),
            Endianness::Little => out.extend(bytes.iter().rev()),
        }
    }
}

/// The probe order used by [`heuristic_classify`]: type widths 1, 2, 4,
/// then length widths 1, 2, 4, each big-endian before little-endian.
pub fn default_probe_set() -> Vec<TlvConfig> {
    let widths = [1u8, 2, 4];
    let mut out = Vec::with_capacity(18);
    for t in widths {
        for l in widths {
            for e in [Endianness::Big, Endianness::Little] {
                out.push(TlvConfig::new(t, l, e));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TlvItem {
    pub tlv_type: u32,
    pub offset: usize,
    pub value: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TlvParse {
    pub items: Vec<TlvItem>,
    /// Bytes left after the last complete item.
    pub residue: usize,
}

impl TlvParse {
    pub fn tiles_exactly(&self) -> bool {
        self.residue == 0
    }

    pub fn consumed(&self, payload_len: usize) -> usize {
        payload_len - self.residue
    }
}

/// Parse items until the next one does not fit.
pub fn parse_tlv(payload: &[u8], config: TlvConfig) -> TlvParse {
    let tw = usize::from(config.type_width);
    let lw = usize::from(config.length_width);
    let mut items = Vec::new();
    let mut pos = 0;
    while payload.len() - pos >= tw + lw {
        let tlv_type = config.read(&payload[pos..pos + tw]);
        let len = config.read(&payload[pos + tw..pos + tw + lw]) as usize;
        let value_start = pos + tw + lw;
        if payload.len() - value_start < len {
            break;
        }
        items.push(TlvItem {
            tlv_type,
            offset: pos,
            value: payload[value_start..value_start + len].to_vec(),
        });
        pos = value_start + len;
    }
    TlvParse {
        items,
        residue: payload.len() - pos,
    }
}

/// Encode items with `config`.
pub fn serialize_tlv(items: &[TlvItem], config: TlvConfig) -> Result<Vec<u8>, DissectError> {
    let max = |w: u8| -> u64 { (1u64 << (8 * u32::from(w))) - 1 };
    let mut out = Vec::new();
    for item in items {
        if u64::from(item.tlv_type) > max(config.type_width) {
            return Err(DissectError::TypeOverflow {
                value: item.tlv_type,
                width: config.type_width,
            });
        }
        if item.value.len() as u64 > max(config.length_width) {
            return Err(DissectError::LengthOverflow {
                len: item.value.len(),
                width: config.length_width,
            });
        }
        config.write(&mut out, item.tlv_type, config.type_width);
        config.write(&mut out, item.value.len() as u32, config.length_width);
        out.extend_from_slice(&item.value);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadClass {
    TextLog,
    TlvLike(TlvConfig),
    Binary,
}

fn is_printable_or_space(b: u8) -> bool {
    matches!(b, 0x20..=0x7e | b'\t' | b'\n' | b'\r')
}

/// Share of bytes that are printable ASCII or whitespace. Bytes of
/// multi-byte UTF-8 characters count as printable when the whole payload is
/// valid UTF-8.
pub fn printable_ratio(payload: &[u8]) -> f64 {
    if payload.is_empty() {
        return 0.0;
    }
    let utf8 = std::str::from_utf8(payload).is_ok();
    let printable = payload
        .iter()
        .filter(|&&b| is_printable_or_space(b) || (utf8 && b >= 0x80))
        .count();
    printable as f64 / payload.len() as f64
}

/// Text if non-empty and at least 95% printable; otherwise TLV if some probe
/// configuration tiles the payload exactly; otherwise binary.
pub fn heuristic_classify(payload: &[u8]) -> PayloadClass {
    if payload.is_empty() {
        return PayloadClass::Binary;
    }
    if printable_ratio(payload) >= TEXT_PRINTABLE_RATIO {
        return PayloadClass::TextLog;
    }
    default_probe_set()
        .into_iter()
        .find(|cfg| parse_tlv(payload, *cfg).tiles_exactly())
        .map(PayloadClass::TlvLike)
        .unwrap_or(PayloadClass::Binary)
}

fn text_frame(payload: &[u8]) -> DissectedFrame {
    let text = String::from_utf8_lossy(payload).into_owned();
    DissectedFrame {
        protocol: PROTO_LOGTEXT.into(),
        payload: payload.to_vec(),
        fields: vec![Field::new(
            "text",
            ByteRange::new(0, payload.len()),
            FieldValue::Text(text),
        )],
        residue: ByteRange::new(payload.len(), 0),
        confidence: Confidence::Heuristic,
    }
}

/// Frame with one field per TLV item and the unparsed tail as residue.
pub fn tlv_frame(payload: &[u8], config: TlvConfig, confidence: Confidence) -> DissectedFrame {
    let parsed = parse_tlv(payload, config);
    let tw = usize::from(config.type_width);
    let lw = usize::from(config.length_width);
    let fields = parsed
        .items
        .iter()
        .map(|item| {
            let total = tw + lw + item.value.len();
            Field::new(
                "tlv",
                ByteRange::new(item.offset, total),
                FieldValue::Unsigned(u64::from(item.tlv_type)),
            )
            .with_children(vec![
                Field::new(
                    "type",
                    ByteRange::new(item.offset, tw),
                    FieldValue::Unsigned(u64::from(item.tlv_type)),
                ),
                Field::new(
                    "length",
                    ByteRange::new(item.offset + tw, lw),
                    FieldValue::Unsigned(item.value.len() as u64),
                ),
                Field::new(
                    "value",
                    ByteRange::new(item.offset + tw + lw, item.value.len()),
                    FieldValue::Bytes(item.value.clone()),
                ),
            ])
        })
        .collect();
    let consumed = parsed.consumed(payload.len());
    DissectedFrame {
        protocol: PROTO_TLV.into(),
        payload: payload.to_vec(),
        fields,
        residue: ByteRange::new(consumed, parsed.residue),
        confidence,
    }
}

/// Decode a payload without any registered dissector.
pub fn heuristic_dissect(payload: &[u8]) -> DissectedFrame {
    match heuristic_classify(payload) {
        PayloadClass::TextLog => text_frame(payload),
        PayloadClass::TlvLike(cfg) => tlv_frame(payload, cfg, Confidence::Heuristic),
        PayloadClass::Binary => DissectedFrame::raw(payload),
    }
}

/// A pluggable dissector. Returning `None` declines the payload.
///
/// Implementations must be pure over `(payload, context)`.
pub trait Dissector: Send + Sync {
    fn dissect(&self, payload: &[u8], context: Option<&str>) -> Option<DissectedFrame>;
}

impl<F> Dissector for F
where
    F: Fn(&[u8], Option<&str>) -> Option<DissectedFrame> + Send + Sync,
{
    fn dissect(&self, payload: &[u8], context: Option<&str>) -> Option<DissectedFrame> {
        self(payload, context)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DissectorSelector {
    pub link_type: LinkType,
    /// When set, only frames whose stream context matches are offered.
    pub stream_name_glob: Option<String>,
    pub priority: i32,
}

impl DissectorSelector {
    pub fn new(link_type: LinkType, priority: i32) -> Self {
        DissectorSelector {
            link_type,
            stream_name_glob: None,
            priority,
        }
    }

    pub fn for_streams(mut self, glob: impl Into<String>) -> Self {
        self.stream_name_glob = Some(glob.into());
        self
    }

    fn matches(&self, link_type: LinkType, context: Option<&str>) -> bool {
        if self.link_type != link_type {
            return false;
        }
        match (&self.stream_name_glob, context) {
            (None, _) => true,
            (Some(g), Some(ctx)) => glob::matches(g, ctx),
            (Some(_), None) => false,
        }
    }
}

struct Entry {
    selector: DissectorSelector,
    dissector: Box<dyn Dissector>,
}

/// Registered dissectors. Build it once, then share it read-only.
#[derive(Default)]
pub struct DissectorRegistry {
    entries: Vec<Entry>,
}

impl DissectorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn register_dissector<D: Dissector + 'static>(&mut self, selector: DissectorSelector, dissector: D) {
        self.entries.push(Entry {
            selector,
            dissector: Box::new(dissector),
        });
    }

    /// Offer the payload to matching dissectors by descending priority
    /// (earlier registration first on ties). A dissector that declines or
    /// returns a structurally invalid frame is skipped. Falls back to
    /// [`heuristic_dissect`].
    pub fn dissect(&self, link_type: LinkType, payload: &[u8], context: Option<&str>) -> DissectedFrame {
        let mut candidates: Vec<(usize, &Entry)> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.selector.matches(link_type, context))
            .collect();
        candidates.sort_by(|(ia, a), (ib, b)| {
            b.selector
                .priority
                .cmp(&a.selector.priority)
                .then(ia.cmp(ib))
        });
        for (_, entry) in candidates {
            if let Some(frame) = entry.dissector.dissect(payload, context) {
                if frame.payload == payload && frame.validate().is_ok() {
                    return frame;
                }
            }
        }
        heuristic_dissect(payload)
    }
}

/// A line for Wireshark's `user_dlts` table mapping a private-use DLT to a
/// payload protocol.
pub fn emit_wireshark_user_dlt(dlt: u32, protocol: &str) -> Result<String, DissectError> {
    if !(147..=162).contains(&dlt) {
        return Err(DissectError::DltOutOfPrivateRange(dlt));
    }
    Ok(format!(
        "\"User {} (DLT={dlt})\",\"{protocol}\",\"0\",\"\",\"0\",\"\"",
        dlt - 147
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderFormat {
    Text,
    Json,
}

/// Canonical hexdump: offset, 16 hex bytes, ASCII gutter.
pub fn hexdump(bytes: &[u8], indent: &str) -> String {
    let mut out = String::new();
    for (i, chunk) in bytes.chunks(16).enumerate() {
        let hex: Vec<String> = chunk.iter().map(|b| format!("{b:02x}")).collect();
        let ascii: String = chunk
            .iter()
            .map(|&b| if (0x20..0x7f).contains(&b) { b as char } else { '.' })
            .collect();
        let _ = writeln!(out, "{indent}{:04x}  {:<47}  |{ascii}|", i * 16, hex.join(" "));
    }
    out
}

fn value_text(v: &FieldValue) -> String {
    match v {
        FieldValue::None => String::new(),
        FieldValue::Unsigned(n) => n.to_string(),
        FieldValue::Text(t) => format!("{:?}", t),
        FieldValue::Bytes(b) => to_hex(b),
    }
}

fn render_field(out: &mut String, f: &Field, depth: usize) {
    let indent = "  ".repeat(depth + 1);
    let value = value_text(&f.value);
    let _ = write!(out, "{indent}[0x{:04x}+{}] {}", f.range.offset, f.range.length, f.name);
    if !value.is_empty() {
        let _ = write!(out, ": {value}");
    }
    out.push('\n');
    for c in &f.children {
        render_field(out, c, depth + 1);
    }
}

fn field_json(f: &Field) -> Value {
    json!({
        "name": f.name,
        "offset": f.range.offset,
        "length": f.range.length,
        "value": f.value,
        "children": f.children.iter().map(field_json).collect::<Vec<_>>(),
    })
}

/// JSON form of a frame (`cctrace-frame/1`).
pub fn frame_json(frame: &DissectedFrame) -> Value {
    json!({
        "schema": FRAME_SCHEMA,
        "protocol": frame.protocol,
        "confidence": frame.confidence,
        "length": frame.payload.len(),
        "fields": frame.fields.iter().map(field_json).collect::<Vec<_>>(),
        "residue": {
            "offset": frame.residue.offset,
            "length": frame.residue.length,
            "hex": to_hex(&frame.payload[frame.residue.offset..frame.residue.end()]),
        },
    })
}

pub fn render(frame: &DissectedFrame, format: RenderFormat) -> String {
    match format {
        RenderFormat::Json => {
            serde_json::to_string_pretty(&frame_json(frame)).expect("frame JSON serializes")
        }
        RenderFormat::Text => {
            let conf = match frame.confidence {
                Confidence::Exact => "exact",
                Confidence::Heuristic => "heuristic",
                Confidence::Opaque => "opaque",
            };
            let mut out = format!(
                "{} ({conf}), {} bytes\n",
                frame.protocol,
                frame.payload.len()
            );
            for f in &frame.fields {
                render_field(&mut out, f, 0);
            }
            if frame.residue.length > 0 {
                let _ = writeln!(
                    out,
                    "  residue [0x{:04x}+{}]",
                    frame.residue.offset, frame.residue.length
                );
            }
            out.push_str(&hexdump(&frame.payload, "  "));
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const BIG11: TlvConfig = TlvConfig {
        type_width: 1,
        length_width: 1,
        endianness: Endianness::Big,
    };

    #[test]
    fn parse_tlv_cases() {
        let p = parse_tlv(&[], BIG11);
        assert!(p.items.is_empty());
        assert_eq!(p.residue, 0);

        let p = parse_tlv(&[0x01, 0x03, 0xaa, 0xbb, 0xcc], BIG11);
        assert_eq!(p.items, vec![TlvItem { tlv_type: 1, offset: 0, value: vec![0xaa, 0xbb, 0xcc] }]);
        assert_eq!(p.residue, 0);

        let p = parse_tlv(&[0x01, 0xff, 0xaa], BIG11);
        assert!(p.items.is_empty());
        assert_eq!(p.residue, 3);
    }

    #[test]
    fn multibyte_widths_respect_endianness() {
        let bytes = [0x00, 0x01, 0x00, 0x02, 0xde, 0xad];
        let be = parse_tlv(&bytes, TlvConfig::new(2, 2, Endianness::Big));
        assert_eq!(be.items[0].tlv_type, 1);
        assert_eq!(be.items[0].value, [0xde, 0xad]);
        let le = parse_tlv(&bytes, TlvConfig::new(2, 2, Endianness::Little));
        assert!(le.items.is_empty());
        assert_eq!(le.residue, 6);
    }

    #[test]
    fn probe_set_order() {
        let set = default_probe_set();
        assert_eq!(set.len(), 18);
        assert_eq!(set[0], BIG11);
        assert_eq!(set[1], TlvConfig::new(1, 1, Endianness::Little));
        assert_eq!(set[17], TlvConfig::new(4, 4, Endianness::Little));
    }

    #[test]
    fn classify_examples() {
        assert_eq!(heuristic_classify(b"wl: scan started\n"), PayloadClass::TextLog);
        assert_eq!(
            heuristic_classify(&[0x01, 0x03, 0xaa, 0xbb, 0xcc, 0x02, 0x01, 0xff]),
            PayloadClass::TlvLike(BIG11)
        );
        assert_eq!(
            heuristic_classify(&[0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0x00]),
            PayloadClass::Binary
        );
        assert_eq!(heuristic_classify(&[]), PayloadClass::Binary);
        assert_eq!(heuristic_classify("état: associé\n".as_bytes()), PayloadClass::TextLog);
    }

    #[test]
    fn dissect_fallbacks() {
        let reg = DissectorRegistry::new();
        let f = reg.dissect(LinkType::USER3, b"wl: scan started\n", None);
        assert_eq!(f.protocol, PROTO_LOGTEXT);
        assert_eq!(f.confidence, Confidence::Heuristic);
        assert_eq!(f.fields.len(), 1);
        assert_eq!(f.fields[0].value, FieldValue::Text("wl: scan started\n".into()));

        let f = reg.dissect(LinkType::USER3, &[], None);
        assert_eq!(f.protocol, PROTO_RAW);
        assert!(f.fields.is_empty());
        assert_eq!(f.residue.length, 0);
        f.validate().unwrap();

        let f = reg.dissect(LinkType::USER3, &[0x01, 0x03, 0xaa, 0xbb, 0xcc], None);
        assert_eq!(f.protocol, PROTO_TLV);
        assert_eq!(f.fields.len(), 1);
        let kids = &f.fields[0].children;
        assert_eq!(kids[0].value, FieldValue::Unsigned(1));
        assert_eq!(kids[1].value, FieldValue::Unsigned(3));
        assert_eq!(kids[2].value, FieldValue::Bytes(vec![0xaa, 0xbb, 0xcc]));
        f.validate().unwrap();
    }

    fn tagged(tag: &'static str) -> impl Fn(&[u8], Option<&str>) -> Option<DissectedFrame> + Send + Sync {
        move |p: &[u8], _: Option<&str>| {
            let mut f = DissectedFrame::raw(p);
            f.protocol = tag.into();
            f.confidence = Confidence::Exact;
            Some(f)
        }
    }

    #[test]
    fn dispatch_priority_and_ties() {
        let mut reg = DissectorRegistry::new();
        reg.register_dissector(DissectorSelector::new(LinkType::USER3, 1), tagged("low"));
        reg.register_dissector(DissectorSelector::new(LinkType::USER3, 2), tagged("high"));
        reg.register_dissector(DissectorSelector::new(LinkType::USER3, 2), tagged("high-later"));
        assert_eq!(reg.dissect(LinkType::USER3, b"\x00", None).protocol, "high");
        assert_eq!(reg.dissect(LinkType(149), b"\x00", None).protocol, PROTO_RAW);
    }

    #[test]
    fn dispatch_by_stream_context() {
        let mut reg = DissectorRegistry::new();
        reg.register_dissector(
            DissectorSelector::new(LinkType::USER3, 5).for_streams("IO80211AWDL*"),
            tagged("awdl"),
        );
        let p = [0xffu8, 0x00, 0x9c];
        assert_eq!(reg.dissect(LinkType::USER3, &p, Some("IO80211AWDLPeerManager")).protocol, "awdl");
        assert_eq!(reg.dissect(LinkType::USER3, &p, Some("ControlPath")).protocol, PROTO_RAW);
        assert_eq!(reg.dissect(LinkType::USER3, &p, None).protocol, PROTO_RAW);
    }

    #[test]
    fn declining_or_invalid_plugins_fall_through() {
        let mut reg = DissectorRegistry::new();
        reg.register_dissector(DissectorSelector::new(LinkType::USER3, 9), |_: &[u8], _: Option<&str>| None);
        reg.register_dissector(DissectorSelector::new(LinkType::USER3, 8), |p: &[u8], _: Option<&str>| {
            let mut f = DissectedFrame::raw(p);
            f.residue = ByteRange::new(0, p.len() + 1);
            Some(f)
        });
        let f = reg.dissect(LinkType::USER3, b"hello\n", None);
        assert_eq!(f.protocol, PROTO_LOGTEXT);
    }

    #[test]
    fn validate_catches_problems() {
        let payload = vec![0u8; 4];
        let mut f = DissectedFrame::raw(&payload);
        f.validate().unwrap();
        f.residue = ByteRange::new(0, 3);
        assert!(matches!(f.validate(), Err(FrameError::CoverageGap(3))));
        f.fields = vec![
            Field::new("a", ByteRange::new(0, 2), FieldValue::None),
            Field::new("b", ByteRange::new(1, 2), FieldValue::None),
        ];
        f.residue = ByteRange::new(3, 1);
        assert!(matches!(f.validate(), Err(FrameError::Overlap { .. })));
        f.fields = vec![Field::new("a", ByteRange::new(0, 3), FieldValue::None)
            .with_children(vec![Field::new("c", ByteRange::new(2, 2), FieldValue::None)])];
        assert!(matches!(f.validate(), Err(FrameError::OutOfBounds { .. })));
    }

    #[test]
    fn wireshark_lines() {
        assert_eq!(
            emit_wireshark_user_dlt(150, "corecapture").unwrap(),
            r#""User 3 (DLT=150)","corecapture","0","","0","""#
        );
        assert_eq!(
            emit_wireshark_user_dlt(147, "x").unwrap(),
            r#""User 0 (DLT=147)","x","0","","0","""#
        );
        assert_eq!(emit_wireshark_user_dlt(146, "x"), Err(DissectError::DltOutOfPrivateRange(146)));
        assert_eq!(emit_wireshark_user_dlt(163, "x"), Err(DissectError::DltOutOfPrivateRange(163)));
    }

    #[test]
    fn render_forms() {
        let raw = DissectedFrame::raw(&[0xde, 0xad, 0xbe, 0xef]);
        let text = render(&raw, RenderFormat::Text);
        assert!(text.contains("0000  de ad be ef"), "{text}");

        let tlv = heuristic_dissect(&[0x01, 0x03, 0xaa, 0xbb, 0xcc, 0x02, 0x01, 0xff]);
        let v: Value = serde_json::from_str(&render(&tlv, RenderFormat::Json)).unwrap();
        assert_eq!(v["schema"], FRAME_SCHEMA);
        assert_eq!(v["fields"].as_array().unwrap().len(), 2);
        assert_eq!(v["fields"][0]["children"][2]["value"], "aabbcc");
        assert_eq!(render(&tlv, RenderFormat::Json), render(&tlv.clone(), RenderFormat::Json));
    }

    #[test]
    fn serialize_rejects_overflow() {
        let item = TlvItem { tlv_type: 256, offset: 0, value: vec![] };
        assert!(matches!(serialize_tlv(&[item], BIG11), Err(DissectError::TypeOverflow { .. })));
        let item = TlvItem { tlv_type: 1, offset: 0, value: vec![0; 256] };
        assert!(matches!(serialize_tlv(&[item], BIG11), Err(DissectError::LengthOverflow { .. })));
    }

    proptest! {
        #[test]
        fn dissect_is_total_and_partitions(payload in proptest::collection::vec(any::<u8>(), 0..96)) {
            let reg = DissectorRegistry::new();
            let f = reg.dissect(LinkType::USER3, &payload, None);
            prop_assert!(f.validate().is_ok());
            prop_assert_eq!(&f, &reg.dissect(LinkType::USER3, &payload, None));
        }

        #[test]
        fn tlv_prefix_reserializes(payload in proptest::collection::vec(any::<u8>(), 0..64), idx in 0usize..18) {
            let cfg = default_probe_set()[idx];
            let parsed = parse_tlv(&payload, cfg);
            let consumed = parsed.consumed(payload.len());
            prop_assert_eq!(serialize_tlv(&parsed.items, cfg).unwrap(), payload[..consumed].to_vec());
        }
    }
}
