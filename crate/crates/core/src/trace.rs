//! Mirrored packet headers and the line-oriented trace format.
//!
//! One record per line, comma separated, in field order:
//!
//! ```text
//! timestamp_us,src_vm,dst_vm,src_port,dst_port,protocol,payload_len,flags,seq,ack
//! ```
//!
//! Flags are `+`-joined tokens (`SYN+ACK`); an empty field means no flags.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Microseconds since epoch.
pub type Micros = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VmId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub u32);

impl fmt::Display for VmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for VmId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        s.trim()
            .parse()
            .map(VmId)
            .map_err(|_| Error::Parse(format!("bad vm id `{s}`")))
    }
}

impl FromStr for AgentId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        s.trim()
            .parse()
            .map(AgentId)
            .map_err(|_| Error::Parse(format!("bad agent id `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Protocol {
    Tcp,
    Udp,
    Other,
}

impl Protocol {
    fn as_str(self) -> &'static str {
        match self {
            Protocol::Tcp => "TCP",
            Protocol::Udp => "UDP",
            Protocol::Other => "OTHER",
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "TCP" => Ok(Protocol::Tcp),
            "UDP" => Ok(Protocol::Udp),
            "OTHER" => Ok(Protocol::Other),
            _ => Err(Error::Parse(format!("unknown protocol `{s}`"))),
        }
    }
}

/// Subset of TCP flags the agents care about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct TcpFlags(u8);

impl TcpFlags {
    pub const NONE: TcpFlags = TcpFlags(0);
    pub const SYN: TcpFlags = TcpFlags(1);
    pub const ACK: TcpFlags = TcpFlags(2);
    pub const FIN: TcpFlags = TcpFlags(4);
    pub const RST: TcpFlags = TcpFlags(8);

    const TOKENS: [(TcpFlags, &'static str); 4] = [
        (TcpFlags::SYN, "SYN"),
        (TcpFlags::ACK, "ACK"),
        (TcpFlags::FIN, "FIN"),
        (TcpFlags::RST, "RST"),
    ];

    pub fn contains(self, other: TcpFlags) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

impl std::ops::BitOr for TcpFlags {
    type Output = TcpFlags;
    fn bitor(self, rhs: TcpFlags) -> TcpFlags {
        TcpFlags(self.0 | rhs.0)
    }
}

impl fmt::Display for TcpFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (flag, token) in Self::TOKENS {
            if self.contains(flag) {
                if !first {
                    f.write_str("+")?;
                }
                f.write_str(token)?;
                first = false;
            }
        }
        Ok(())
    }
}

impl FromStr for TcpFlags {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut flags = TcpFlags::NONE;
        if s.is_empty() {
            return Ok(flags);
        }
        for tok in s.split('+') {
            let flag = Self::TOKENS
                .iter()
                .find(|(_, t)| *t == tok)
                .map(|(f, _)| *f)
                .ok_or_else(|| Error::Parse(format!("unknown tcp flag `{tok}`")))?;
            flags = flags | flag;
        }
        Ok(flags)
    }
}

/// One packet header as duplicated by the hypervisor and handed to an agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketHeaderRecord {
    pub timestamp: Micros,
    pub src_vm: VmId,
    pub dst_vm: VmId,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: Protocol,
    pub payload_len: u32,
    pub tcp_flags: TcpFlags,
    pub seq: u32,
    pub ack: u32,
}

impl PacketHeaderRecord {
    pub fn is_tcp(&self) -> bool {
        self.protocol == Protocol::Tcp
    }

    pub fn has(&self, flag: TcpFlags) -> bool {
        self.tcp_flags.contains(flag)
    }

    fn validate(&self) -> Result<()> {
        if !self.is_tcp() && !self.tcp_flags.is_empty() {
            return Err(Error::Parse("tcp flags on a non-TCP record".into()));
        }
        Ok(())
    }
}

impl fmt::Display for PacketHeaderRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{},{},{},{},{}",
            self.timestamp,
            self.src_vm,
            self.dst_vm,
            self.src_port,
            self.dst_port,
            self.protocol.as_str(),
            self.payload_len,
            self.tcp_flags,
            self.seq,
            self.ack
        )
    }
}

impl FromStr for PacketHeaderRecord {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != 10 {
            return Err(Error::Parse(format!(
                "expected 10 fields, found {}",
                fields.len()
            )));
        }
        fn num<T: FromStr>(s: &str, name: &str) -> Result<T> {
            s.parse()
                .map_err(|_| Error::Parse(format!("bad {name} `{s}`")))
        }
        let rec = PacketHeaderRecord {
            timestamp: num(fields[0], "timestamp")?,
            src_vm: fields[1].parse()?,
            dst_vm: fields[2].parse()?,
            src_port: num(fields[3], "src_port")?,
            dst_port: num(fields[4], "dst_port")?,
            protocol: fields[5].parse()?,
            payload_len: num(fields[6], "payload_len")?,
            tcp_flags: fields[7].parse()?,
            seq: num(fields[8], "seq")?,
            ack: num(fields[9], "ack")?,
        };
        rec.validate()?;
        Ok(rec)
    }
}

pub fn write_trace<W: Write>(mut out: W, records: &[PacketHeaderRecord]) -> std::io::Result<()> {
    for r in records {
        writeln!(out, "{r}")?;
    }
    Ok(())
}

/// Reads a whole trace file. Any malformed line aborts with its line number.
pub fn read_trace(path: &Path) -> Result<Vec<PacketHeaderRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let rec = line.parse().map_err(|e: Error| Error::MalformedLine {
            path: path.to_path_buf(),
            line: idx + 1,
            reason: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(records)
}
