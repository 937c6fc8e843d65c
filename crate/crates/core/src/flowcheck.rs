//! Netflow records: timestamp decomposition and structural invariant checks.
//!
//! The rule formulations are this crate's own stand-ins for the usual
//! netflow sanity checks.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Read;
use std::net::Ipv4Addr;
use std::path::Path;

use chrono::{Datelike, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column names of the post-processed layout, in order.
pub const COLUMNS: [&str; 15] = [
    "weekday",
    "hour",
    "minute",
    "second",
    "millisecond",
    "src_ip",
    "dst_ip",
    "protocol",
    "src_port",
    "dst_port",
    "duration",
    "bytes",
    "packets",
    "flags",
    "tos",
];

const TCP_SERVICE_PORTS: [u16; 5] = [80, 443, 22, 21, 25];
const DNS_PORT: u16 = 53;
const NETBIOS_PORTS: std::ops::RangeInclusive<u16> = 137..=139;
const MIN_FRAME: u64 = 42;
const MAX_FRAME: u64 = 65535;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Protocol {
    Tcp,
    Udp,
    Icmp,
    Igmp,
    Other(String),
}

impl Protocol {
    pub fn parse(s: &str) -> Protocol {
        match s.trim().to_ascii_uppercase().as_str() {
            "TCP" => Protocol::Tcp,
            "UDP" => Protocol::Udp,
            "ICMP" => Protocol::Icmp,
            "IGMP" => Protocol::Igmp,
            other => Protocol::Other(other.to_string()),
        }
    }

    fn is_transport(&self) -> bool {
        matches!(self, Protocol::Tcp | Protocol::Udp)
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Tcp => f.write_str("TCP"),
            Protocol::Udp => f.write_str("UDP"),
            Protocol::Icmp => f.write_str("ICMP"),
            Protocol::Igmp => f.write_str("IGMP"),
            Protocol::Other(s) => f.write_str(s),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub weekday: u8,
    pub hour: u8,
    pub minute: u8,
    pub second: u8,
    pub millisecond: u16,
    pub src_ip: String,
    pub dst_ip: String,
    pub protocol: Protocol,
    pub src_port: u16,
    pub dst_port: u16,
    pub duration: f64,
    pub bytes: u64,
    pub packets: u64,
    pub flags: String,
    pub tos: u8,
}

fn parse<T: std::str::FromStr>(value: &str, column: &str, row: usize) -> Result<T> {
    value.trim().parse().map_err(|_| Error::NotNumeric {
        row,
        column: column.to_string(),
        value: value.to_string(),
    })
}

fn bounded(value: &str, column: &str, row: usize, limit: u16) -> Result<u16> {
    let v: u16 = parse(value, column, row)?;
    if v >= limit {
        return Err(Error::invalid(format!("row {row}: {column} = {v} is not below {limit}")));
    }
    Ok(v)
}

impl FlowRecord {
    /// Builds a record from the 15 post-processed fields in [`COLUMNS`]
    /// order. `row` only labels errors.
    pub fn from_fields(fields: &[&str], row: usize) -> Result<Self> {
        if fields.len() < COLUMNS.len() {
            return Err(Error::Shape(format!(
                "row {row}: {} fields, expected {}",
                fields.len(),
                COLUMNS.len()
            )));
        }
        let c = &COLUMNS;
        Ok(FlowRecord {
            weekday: bounded(fields[0], c[0], row, 7)? as u8,
            hour: bounded(fields[1], c[1], row, 24)? as u8,
            minute: bounded(fields[2], c[2], row, 60)? as u8,
            second: bounded(fields[3], c[3], row, 60)? as u8,
            millisecond: bounded(fields[4], c[4], row, 1000)?,
            src_ip: fields[5].trim().to_string(),
            dst_ip: fields[6].trim().to_string(),
            protocol: Protocol::parse(fields[7]),
            src_port: parse(fields[8], c[8], row)?,
            dst_port: parse(fields[9], c[9], row)?,
            duration: parse(fields[10], c[10], row)?,
            bytes: parse(fields[11], c[11], row)?,
            packets: parse(fields[12], c[12], row)?,
            flags: fields[13].trim().to_string(),
            tos: parse(fields[14], c[14], row)?,
        })
    }

    /// Canonical string of every field, in [`COLUMNS`] order.
    pub fn values(&self) -> [String; 15] {
        [
            self.weekday.to_string(),
            self.hour.to_string(),
            self.minute.to_string(),
            self.second.to_string(),
            self.millisecond.to_string(),
            self.src_ip.clone(),
            self.dst_ip.clone(),
            self.protocol.to_string(),
            self.src_port.to_string(),
            self.dst_port.to_string(),
            self.duration.to_string(),
            self.bytes.to_string(),
            self.packets.to_string(),
            self.flags.clone(),
            self.tos.to_string(),
        ]
    }

    fn has_port(&self, pred: impl Fn(u16) -> bool) -> bool {
        pred(self.src_port) || pred(self.dst_port)
    }
}

/// Reads records from a CSV with a header row and the 15 post-processed
/// columns; a 16th column, if present, is ignored.
pub fn read_flows<R: Read>(reader: R) -> Result<Vec<FlowRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() != 15 && header.len() != 16 {
        return Err(Error::Shape(format!("{} columns, expected 15 or 16", header.len())));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let fields: Vec<&str> = rec.iter().collect();
        out.push(FlowRecord::from_fields(&fields, i + 1)?);
    }
    Ok(out)
}

pub fn load_flows(path: impl AsRef<Path>) -> Result<Vec<FlowRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_flows(std::io::BufReader::new(file))
}

/// Splits a timestamp into (weekday with Monday = 0, hour, minute, second,
/// millisecond). The date itself is dropped.
pub fn decompose_timestamp(ts: &str) -> Result<(u8, u8, u8, u8, u16)> {
    const FORMATS: [&str; 4] = ["%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S"];
    let dt = FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(ts.trim(), f).ok())
        .ok_or_else(|| Error::invalid(format!("unparseable timestamp `{ts}`")))?;
    if dt.nanosecond() >= 1_000_000_000 {
        return Err(Error::invalid(format!("second out of range in `{ts}`")));
    }
    Ok((
        dt.weekday().num_days_from_monday() as u8,
        dt.hour() as u8,
        dt.minute() as u8,
        dt.second() as u8,
        (dt.nanosecond() / 1_000_000) as u16,
    ))
}

/// RFC 1918 private space.
pub fn is_private(ip: &str) -> bool {
    ip.parse::<Ipv4Addr>().map(|a| a.is_private()).unwrap_or(false)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Rule {
    TcpFlags,
    PrivateIps,
    TcpPort,
    Dns,
    ValidValues,
    NetBios,
    PacketRatios,
}

impl Rule {
    pub const ALL: [Rule; 7] = [
        Rule::TcpFlags,
        Rule::PrivateIps,
        Rule::TcpPort,
        Rule::Dns,
        Rule::ValidValues,
        Rule::NetBios,
        Rule::PacketRatios,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Rule::TcpFlags => "TCP Flags",
            Rule::PrivateIps => "Private IPs",
            Rule::TcpPort => "TCP Port",
            Rule::Dns => "DNS",
            Rule::ValidValues => "Valid Values",
            Rule::NetBios => "NetBios",
            Rule::PacketRatios => "Packet Ratios",
        }
    }
}

/// Per-column sets of values seen in training records.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    columns: Vec<BTreeSet<String>>,
}

impl Vocabulary {
    pub fn from_records(records: &[FlowRecord]) -> Self {
        let mut columns = vec![BTreeSet::new(); COLUMNS.len()];
        for r in records {
            for (set, v) in columns.iter_mut().zip(r.values()) {
                set.insert(v);
            }
        }
        Vocabulary { columns }
    }

    pub fn contains_all(&self, record: &FlowRecord) -> bool {
        self.columns.iter().zip(record.values()).all(|(set, v)| set.contains(&v))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOptions {
    /// DNS flows may carry at most this many bytes per packet.
    pub dns_bytes_per_packet: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            dns_bytes_per_packet: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleOutcome {
    pub rule: String,
    pub applicable: usize,
    pub violations: usize,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantReport {
    pub records: usize,
    pub rules: Vec<RuleOutcome>,
}

impl InvariantReport {
    pub fn rate(&self, rule: Rule) -> f64 {
        self.outcome(rule).rate
    }

    pub fn outcome(&self, rule: Rule) -> &RuleOutcome {
        self.rules.iter().find(|o| o.rule == rule.name()).expect("every rule is reported")
    }
}

/// Whether `rule` applies to `r`, and if so whether `r` violates it.
fn judge(rule: Rule, r: &FlowRecord, vocab: Option<&Vocabulary>, opts: &CheckOptions) -> Option<bool> {
    match rule {
        Rule::TcpFlags => (r.protocol != Protocol::Tcp).then(|| r.flags.chars().any(|c| c != '.')),
        Rule::PrivateIps => Some(!is_private(&r.src_ip) && !is_private(&r.dst_ip)),
        Rule::TcpPort => r
            .has_port(|p| TCP_SERVICE_PORTS.contains(&p))
            .then(|| r.protocol != Protocol::Tcp),
        Rule::Dns => r.has_port(|p| p == DNS_PORT).then(|| {
            !r.protocol.is_transport() || r.bytes > opts.dns_bytes_per_packet.saturating_mul(r.packets)
        }),
        Rule::ValidValues => vocab.map(|v| !v.contains_all(r)),
        Rule::NetBios => r
            .has_port(|p| NETBIOS_PORTS.contains(&p))
            .then(|| !r.protocol.is_transport() || !is_private(&r.dst_ip)),
        Rule::PacketRatios => {
            Some(r.bytes < MIN_FRAME.saturating_mul(r.packets) || r.bytes > MAX_FRAME.saturating_mul(r.packets))
        }
    }
}

/// Violation rate of each rule over the records it applies to. Without a
/// vocabulary the Valid Values rule applies to nothing.
pub fn check_invariants(records: &[FlowRecord], vocab: Option<&Vocabulary>, opts: &CheckOptions) -> InvariantReport {
    let rules = Rule::ALL
        .iter()
        .map(|&rule| {
            let (mut applicable, mut violations) = (0, 0);
            for r in records {
                if let Some(bad) = judge(rule, r, vocab, opts) {
                    applicable += 1;
                    violations += bad as usize;
                }
            }
            RuleOutcome {
                rule: rule.name().to_string(),
                applicable,
                violations,
                rate: if applicable == 0 {
                    0.0
                } else {
                    violations as f64 / applicable as f64
                },
            }
        })
        .collect();
    InvariantReport {
        records: records.len(),
        rules,
    }
}
