//! Classic PCAP container files.
//!
//! Layout: a 24-byte global header followed by records, each with a 16-byte
//! header (`ts_sec`, `ts_frac`, `incl_len`, `orig_len`) and `incl_len` bytes
//! of payload. The magic number selects the byte order and whether the
//! fractional timestamp counts microseconds or nanoseconds.
//!
//! pcapng is not supported.

use std::fmt;
use std::io::{self, Read, Write};

use serde::Serialize;
use thiserror::Error;

pub const GLOBAL_HEADER_LEN: usize = 24;
pub const RECORD_HEADER_LEN: usize = 16;

const MAGIC_MICROS: u32 = 0xa1b2_c3d4;
const MAGIC_NANOS: u32 = 0xa1b2_3c4d;

pub const DEFAULT_SNAPLEN: u32 = 65535;

#[derive(Debug, Error)]
pub enum PcapError {
    #[error("input too short for a pcap global header ({0} of 24 bytes)")]
    Truncated(usize),
    #[error("unknown pcap magic 0x{0:08x}")]
    UnknownMagic(u32),
    #[error("truncated record at byte offset {offset}: {reason}")]
    TruncatedRecord { offset: u64, reason: String },
    #[error("record {index} captured length {captured} exceeds snaplen {snaplen}")]
    RecordExceedsSnaplen { index: usize, captured: usize, snaplen: u32 },
    #[error("record {index} captured length {captured} exceeds original length {original}")]
    CapturedExceedsOriginal { index: usize, captured: usize, original: u32 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Link-layer type code from the pcap global header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct LinkType(pub u16);

impl LinkType {
    pub const ETHERNET: LinkType = LinkType(1);
    pub const IEEE802_11: LinkType = LinkType(105);
    pub const USER0: LinkType = LinkType(147);
    /// The private-use type CoreCapture writes its traces with.
    pub const USER3: LinkType = LinkType(150);
    pub const USER15: LinkType = LinkType(162);

    pub fn code(self) -> u16 {
        self.0
    }

    /// True for the private-use range USER0..USER15 (147..=162).
    pub fn is_private_use(self) -> bool {
        (Self::USER0.0..=Self::USER15.0).contains(&self.0)
    }

    /// `N` of `USER<N>` for private-use codes.
    pub fn user_index(self) -> Option<u8> {
        self.is_private_use().then(|| (self.0 - Self::USER0.0) as u8)
    }

    pub fn name(self) -> String {
        link_type_name(u32::from(self.0))
    }
}

impl fmt::Display for LinkType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

// Subset of the tcpdump.org LINKTYPE_ registry.
const LINK_TYPE_NAMES: &[(u32, &str)] = &[
    (0, "NULL"),
    (1, "ETHERNET"),
    (3, "AX25"),
    (6, "IEEE802_5"),
    (7, "ARCNET_BSD"),
    (8, "SLIP"),
    (9, "PPP"),
    (10, "FDDI"),
    (50, "PPP_HDLC"),
    (51, "PPP_ETHER"),
    (100, "ATM_RFC1483"),
    (101, "RAW"),
    (104, "C_HDLC"),
    (105, "IEEE802_11"),
    (107, "FRELAY"),
    (108, "LOOP"),
    (113, "LINUX_SLL"),
    (114, "LTALK"),
    (117, "PFLOG"),
    (119, "IEEE802_11_PRISM"),
    (127, "IEEE802_11_RADIOTAP"),
    (163, "IEEE802_11_AVS"),
    (187, "BLUETOOTH_HCI_H4"),
    (189, "USB_LINUX"),
    (192, "PPI"),
    (201, "BLUETOOTH_HCI_H4_WITH_PHDR"),
    (220, "USB_LINUX_MMAPPED"),
    (228, "IPV4"),
    (229, "IPV6"),
    (253, "NETLINK"),
    (256, "BLUETOOTH_LE_LL"),
    (258, "PKTAP"),
    (276, "LINUX_SLL2"),
];

/// Canonical registry name of a link-type code, `USER0`..`USER15` for the
/// private-use range and `UNKNOWN(<code>)` for anything unlisted.
pub fn link_type_name(code: u32) -> String {
    if (147..=162).contains(&code) {
        return format!("USER{}", code - 147);
    }
    LINK_TYPE_NAMES
        .iter()
        .find(|(c, _)| *c == code)
        .map(|(_, name)| (*name).to_string())
        .unwrap_or_else(|| format!("UNKNOWN({code})"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ByteOrder {
    Big,
    Little,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TimestampUnit {
    Microsecond,
    Nanosecond,
}

impl TimestampUnit {
    pub fn fractions_per_second(self) -> u64 {
        match self {
            TimestampUnit::Microsecond => 1_000_000,
            TimestampUnit::Nanosecond => 1_000_000_000,
        }
    }

    fn magic(self) -> u32 {
        match self {
            TimestampUnit::Microsecond => MAGIC_MICROS,
            TimestampUnit::Nanosecond => MAGIC_NANOS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PcapGlobalHeader {
    pub byte_order: ByteOrder,
    pub timestamp_unit: TimestampUnit,
    pub version_major: u16,
    pub version_minor: u16,
    /// GMT offset (`thiszone`); zero in practice.
    pub utc_offset: i32,
    /// Timestamp accuracy (`sigfigs`); zero in practice.
    pub sigfigs: u32,
    pub snaplen: u32,
    pub link_type: LinkType,
    /// Upper 16 bits of the link-type word (FCS information), kept verbatim.
    pub link_type_flags: u16,
}

impl PcapGlobalHeader {
    /// Version 2.4, little-endian, microsecond timestamps.
    pub fn new(link_type: LinkType, snaplen: u32) -> Self {
        PcapGlobalHeader {
            byte_order: ByteOrder::Little,
            timestamp_unit: TimestampUnit::Microsecond,
            version_major: 2,
            version_minor: 4,
            utc_offset: 0,
            sigfigs: 0,
            snaplen,
            link_type,
            link_type_flags: 0,
        }
    }

    pub fn with_nanoseconds(mut self) -> Self {
        self.timestamp_unit = TimestampUnit::Nanosecond;
        self
    }

    pub fn with_byte_order(mut self, byte_order: ByteOrder) -> Self {
        self.byte_order = byte_order;
        self
    }

    pub fn magic(&self) -> u32 {
        self.timestamp_unit.magic()
    }

    pub fn to_bytes(&self) -> [u8; GLOBAL_HEADER_LEN] {
        let mut out = [0u8; GLOBAL_HEADER_LEN];
        let e = Endian(self.byte_order);
        e.put_u32(&mut out[0..4], self.magic());
        e.put_u16(&mut out[4..6], self.version_major);
        e.put_u16(&mut out[6..8], self.version_minor);
        e.put_u32(&mut out[8..12], self.utc_offset as u32);
        e.put_u32(&mut out[12..16], self.sigfigs);
        e.put_u32(&mut out[16..20], self.snaplen);
        e.put_u32(
            &mut out[20..24],
            (u32::from(self.link_type_flags) << 16) | u32::from(self.link_type.0),
        );
        out
    }

    /// Decode a global header; the magic decides byte order and unit.
    pub fn parse(bytes: &[u8]) -> Result<Self, PcapError> {
        if bytes.len() >= 4 {
            // Detection happens before the length check so that garbage
            // input reports the magic rather than its size.
            detect_magic(&bytes[0..4])?;
        }
        if bytes.len() < GLOBAL_HEADER_LEN {
            return Err(PcapError::Truncated(bytes.len()));
        }
        let (byte_order, timestamp_unit) = detect_magic(&bytes[0..4])?;
        let e = Endian(byte_order);
        let link = e.u32(&bytes[20..24]);
        Ok(PcapGlobalHeader {
            byte_order,
            timestamp_unit,
            version_major: e.u16(&bytes[4..6]),
            version_minor: e.u16(&bytes[6..8]),
            utc_offset: e.u32(&bytes[8..12]) as i32,
            sigfigs: e.u32(&bytes[12..16]),
            snaplen: e.u32(&bytes[16..20]),
            link_type: LinkType((link & 0xffff) as u16),
            link_type_flags: (link >> 16) as u16,
        })
    }
}

/// Recognize the four accepted magics from the first four file bytes.
pub fn detect_magic(first4: &[u8]) -> Result<(ByteOrder, TimestampUnit), PcapError> {
    let raw: [u8; 4] = first4[..4].try_into().expect("four bytes");
    let be = u32::from_be_bytes(raw);
    let le = u32::from_le_bytes(raw);
    match (be, le) {
        (MAGIC_MICROS, _) => Ok((ByteOrder::Big, TimestampUnit::Microsecond)),
        (MAGIC_NANOS, _) => Ok((ByteOrder::Big, TimestampUnit::Nanosecond)),
        (_, MAGIC_MICROS) => Ok((ByteOrder::Little, TimestampUnit::Microsecond)),
        (_, MAGIC_NANOS) => Ok((ByteOrder::Little, TimestampUnit::Nanosecond)),
        _ => Err(PcapError::UnknownMagic(be)),
    }
}

/// True if the bytes start with any accepted pcap magic.
pub fn has_pcap_magic(head: &[u8]) -> bool {
    head.len() >= 4 && detect_magic(&head[..4]).is_ok()
}

#[derive(Clone, Copy)]
struct Endian(ByteOrder);

impl Endian {
    fn u16(self, b: &[u8]) -> u16 {
        let raw = [b[0], b[1]];
        match self.0 {
            ByteOrder::Big => u16::from_be_bytes(raw),
            ByteOrder::Little => u16::from_le_bytes(raw),
        }
    }

    fn u32(self, b: &[u8]) -> u32 {
        let raw = [b[0], b[1], b[2], b[3]];
        match self.0 {
            ByteOrder::Big => u32::from_be_bytes(raw),
            ByteOrder::Little => u32::from_le_bytes(raw),
        }
    }

    fn put_u16(self, out: &mut [u8], v: u16) {
        out.copy_from_slice(&match self.0 {
            ByteOrder::Big => v.to_be_bytes(),
            ByteOrder::Little => v.to_le_bytes(),
        });
    }

    fn put_u32(self, out: &mut [u8], v: u32) {
        out.copy_from_slice(&match self.0 {
            ByteOrder::Big => v.to_be_bytes(),
            ByteOrder::Little => v.to_le_bytes(),
        });
    }
}

/// One captured frame. `fraction` is in the unit declared by the file header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PcapRecord {
    pub ts_sec: u32,
    pub ts_frac: u32,
    pub original_length: u32,
    pub payload: Vec<u8>,
}

impl PcapRecord {
    /// A record whose original length equals its payload length.
    pub fn new(ts_sec: u32, ts_frac: u32, payload: Vec<u8>) -> Self {
        PcapRecord {
            ts_sec,
            ts_frac,
            original_length: payload.len() as u32,
            payload,
        }
    }

    pub fn captured_length(&self) -> usize {
        self.payload.len()
    }

    /// Timestamp as nanoseconds since the epoch.
    pub fn timestamp_nanos(&self, unit: TimestampUnit) -> u64 {
        let per_frac = 1_000_000_000 / unit.fractions_per_second();
        u64::from(self.ts_sec) * 1_000_000_000 + u64::from(self.ts_frac) * per_frac
    }
}

/// Streaming reader over any byte source.
///
/// After the last record (or a truncated one) every further call returns
/// `Ok(None)`.
pub struct PcapReader<R> {
    inner: R,
    header: PcapGlobalHeader,
    offset: u64,
    index: usize,
    done: bool,
}

impl<R: Read> PcapReader<R> {
    pub fn open(mut inner: R) -> Result<Self, PcapError> {
        let mut buf = [0u8; GLOBAL_HEADER_LEN];
        let n = read_up_to(&mut inner, &mut buf)?;
        let header = PcapGlobalHeader::parse(&buf[..n])?;
        Ok(PcapReader {
            inner,
            header,
            offset: GLOBAL_HEADER_LEN as u64,
            index: 0,
            done: false,
        })
    }

    pub fn header(&self) -> &PcapGlobalHeader {
        &self.header
    }

    /// Number of records returned so far.
    pub fn records_read(&self) -> usize {
        self.index
    }

    /// Byte offset of the next record header.
    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn next_record(&mut self) -> Result<Option<PcapRecord>, PcapError> {
        if self.done {
            return Ok(None);
        }
        let start = self.offset;
        let mut rh = [0u8; RECORD_HEADER_LEN];
        let n = read_up_to(&mut self.inner, &mut rh)?;
        if n == 0 {
            self.done = true;
            return Ok(None);
        }
        if n < RECORD_HEADER_LEN {
            self.done = true;
            return Err(PcapError::TruncatedRecord {
                offset: start,
                reason: format!("record header has {n} of 16 bytes"),
            });
        }
        let e = Endian(self.header.byte_order);
        let ts_sec = e.u32(&rh[0..4]);
        let ts_frac = e.u32(&rh[4..8]);
        let incl_len = e.u32(&rh[8..12]);
        let orig_len = e.u32(&rh[12..16]);

        let mut payload = Vec::new();
        (&mut self.inner)
            .take(u64::from(incl_len))
            .read_to_end(&mut payload)?;
        if payload.len() < incl_len as usize {
            self.done = true;
            return Err(PcapError::TruncatedRecord {
                offset: start,
                reason: format!(
                    "captured length {incl_len} but only {} payload bytes remain",
                    payload.len()
                ),
            });
        }
        self.offset = start + RECORD_HEADER_LEN as u64 + u64::from(incl_len);
        self.index += 1;
        Ok(Some(PcapRecord {
            ts_sec,
            ts_frac,
            original_length: orig_len,
            payload,
        }))
    }
}

impl<R: Read> Iterator for PcapReader<R> {
    type Item = Result<PcapRecord, PcapError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_record().transpose()
    }
}

fn read_up_to<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Decode a complete in-memory file.
pub fn parse_file(bytes: &[u8]) -> Result<(PcapGlobalHeader, Vec<PcapRecord>), PcapError> {
    let mut reader = PcapReader::open(bytes)?;
    let mut records = Vec::new();
    while let Some(rec) = reader.next_record()? {
        records.push(rec);
    }
    Ok((reader.header, records))
}

fn check_record(index: usize, rec: &PcapRecord, snaplen: u32) -> Result<(), PcapError> {
    let captured = rec.captured_length();
    if captured > snaplen as usize {
        return Err(PcapError::RecordExceedsSnaplen { index, captured, snaplen });
    }
    if captured > rec.original_length as usize {
        return Err(PcapError::CapturedExceedsOriginal {
            index,
            captured,
            original: rec.original_length,
        });
    }
    Ok(())
}

/// Serialize a header and records, honoring the header's byte order and
/// timestamp unit. Every record is checked before anything is written.
pub fn write_to<W: Write>(
    mut out: W,
    header: &PcapGlobalHeader,
    records: &[PcapRecord],
) -> Result<(), PcapError> {
    for (i, rec) in records.iter().enumerate() {
        check_record(i, rec, header.snaplen)?;
    }
    out.write_all(&header.to_bytes())?;
    let e = Endian(header.byte_order);
    for rec in records {
        let mut rh = [0u8; RECORD_HEADER_LEN];
        e.put_u32(&mut rh[0..4], rec.ts_sec);
        e.put_u32(&mut rh[4..8], rec.ts_frac);
        e.put_u32(&mut rh[8..12], rec.payload.len() as u32);
        e.put_u32(&mut rh[12..16], rec.original_length);
        out.write_all(&rh)?;
        out.write_all(&rec.payload)?;
    }
    Ok(())
}

pub fn write_file(header: &PcapGlobalHeader, records: &[PcapRecord]) -> Result<Vec<u8>, PcapError> {
    let size = GLOBAL_HEADER_LEN
        + records
            .iter()
            .map(|r| RECORD_HEADER_LEN + r.payload.len())
            .sum::<usize>();
    let mut out = Vec::with_capacity(size);
    write_to(&mut out, header, records)?;
    Ok(out)
}
