//! CAN trace ingestion.
//!
//! Three on-disk layouts are understood:
//!
//! * **canonical CSV**: `timestamp,ID_hex4,DLC,byte0,...,byte{DLC-1},flag` with
//!   `flag` one of `R` (benign), `T` (attack) or `U` (unknown). This is the
//!   format written by the synthesizer and the one that round-trips exactly.
//! * **benchmark CSV**: the layouts of the public HCRL / can-train-and-test
//!   releases: optional `R`/`T` flag column, lower-case hex, short DLC rows, the
//!   `Timestamp: ... ID: ... DLC: ...` attack-free text layout and the
//!   `timestamp,arbitration_id,data_field,attack` layout.
//! * **candump**: `(ts) iface ID#HEXPAYLOAD` as written by `candump -l`.

use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest 11-bit arbitration identifier.
pub const MAX_CAN_ID: u16 = 0x7FF;
/// Largest classic CAN payload.
pub const MAX_DLC: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Benign,
    Attack,
    Unknown,
}

impl Label {
    pub fn flag(self) -> char {
        match self {
            Label::Benign => 'R',
            Label::Attack => 'T',
            Label::Unknown => 'U',
        }
    }

    fn from_flag(s: &str) -> Option<Label> {
        match s {
            "R" | "r" => Some(Label::Benign),
            "T" | "t" => Some(Label::Attack),
            "U" | "u" => Some(Label::Unknown),
            _ => None,
        }
    }
}

/// One classic CAN data frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanMessage {
    /// Seconds since epoch or trace start.
    pub timestamp: f64,
    pub can_id: u16,
    pub payload: Vec<u8>,
    pub label: Label,
}

impl CanMessage {
    /// Builds a message, checking the 11-bit id, the 8-byte payload limit and
    /// the timestamp.
    pub fn new(timestamp: f64, can_id: u16, payload: Vec<u8>, label: Label) -> Result<Self, ParseError> {
        if can_id > MAX_CAN_ID {
            return Err(ParseError::IdOutOfRange(can_id as u32));
        }
        if payload.len() > MAX_DLC {
            return Err(ParseError::DlcMismatch { dlc: payload.len(), bytes: payload.len() });
        }
        if !timestamp.is_finite() || timestamp < 0.0 {
            return Err(ParseError::BadTimestamp(timestamp.to_string()));
        }
        Ok(CanMessage { timestamp, can_id, payload, label })
    }

    pub fn dlc(&self) -> usize {
        self.payload.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("malformed line: {0}")]
    MalformedLine(String),
    #[error("CAN id {0:#X} exceeds the 11-bit range")]
    IdOutOfRange(u32),
    #[error("DLC {dlc} does not match {bytes} payload bytes")]
    DlcMismatch { dlc: usize, bytes: usize },
    #[error("invalid payload byte {0:?}")]
    BadByte(String),
    #[error("hex payload {0:?} has an odd number of digits")]
    OddHexLength(String),
    #[error("invalid timestamp {0:?}")]
    BadTimestamp(String),
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("unsupported trace format {0:?}")]
    UnsupportedFormat(String),
    #[error("line {line}: timestamp {timestamp} is earlier than the previous message")]
    NonMonotonicTimestamp { line: usize, timestamp: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceFormat {
    BenchmarkCsv,
    CandumpText,
    CanonicalCsv,
}

impl FromStr for TraceFormat {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "canonical" | "canonical-csv" => Ok(TraceFormat::CanonicalCsv),
            "benchmark" | "benchmark-csv" | "hcrl" => Ok(TraceFormat::BenchmarkCsv),
            "candump" | "log" => Ok(TraceFormat::CandumpText),
            other => Err(IngestError::UnsupportedFormat(other.to_string())),
        }
    }
}

impl fmt::Display for TraceFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TraceFormat::BenchmarkCsv => "benchmark",
            TraceFormat::CandumpText => "candump",
            TraceFormat::CanonicalCsv => "canonical",
        })
    }
}

#[derive(Debug, Clone)]
pub struct TraceSource {
    pub format: TraceFormat,
    pub path: PathBuf,
    /// When false every message is labelled [`Label::Unknown`].
    pub has_labels: bool,
}

impl TraceSource {
    pub fn new(format: TraceFormat, path: impl Into<PathBuf>) -> Self {
        TraceSource { format, path: path.into(), has_labels: true }
    }

    /// Guesses the format from the file extension: `.log` is candump, `.csv`
    /// canonical, `.txt` benchmark.
    pub fn detect(path: impl Into<PathBuf>) -> Result<Self, IngestError> {
        let path = path.into();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .unwrap_or_default();
        let format = match ext.as_str() {
            "log" => TraceFormat::CandumpText,
            "csv" => TraceFormat::CanonicalCsv,
            "txt" => TraceFormat::BenchmarkCsv,
            other => return Err(IngestError::UnsupportedFormat(other.to_string())),
        };
        Ok(TraceSource::new(format, path))
    }
}

fn parse_id(token: &str) -> Result<u16, ParseError> {
    let token = token.trim();
    if token.is_empty() {
        return Err(ParseError::MalformedLine("empty CAN id".into()));
    }
    let value = u32::from_str_radix(token, 16)
        .map_err(|_| ParseError::MalformedLine(format!("bad CAN id {token:?}")))?;
    if value > MAX_CAN_ID as u32 {
        return Err(ParseError::IdOutOfRange(value));
    }
    Ok(value as u16)
}

fn parse_byte(token: &str) -> Result<u8, ParseError> {
    let token = token.trim();
    if token.is_empty() || token.len() > 2 {
        return Err(ParseError::BadByte(token.to_string()));
    }
    u8::from_str_radix(token, 16).map_err(|_| ParseError::BadByte(token.to_string()))
}

fn parse_timestamp(token: &str) -> Result<f64, ParseError> {
    let token = token.trim();
    let t: f64 = token.parse().map_err(|_| ParseError::BadTimestamp(token.to_string()))?;
    if !t.is_finite() || t < 0.0 {
        return Err(ParseError::BadTimestamp(token.to_string()));
    }
    Ok(t)
}

fn parse_dlc(token: &str) -> Result<usize, ParseError> {
    let dlc: usize = token
        .trim()
        .parse()
        .map_err(|_| ParseError::MalformedLine(format!("bad DLC {token:?}")))?;
    if dlc > MAX_DLC {
        return Err(ParseError::MalformedLine(format!("DLC {dlc} exceeds {MAX_DLC}")));
    }
    Ok(dlc)
}

fn parse_hex_payload(hex: &str) -> Result<Vec<u8>, ParseError> {
    if !hex.len().is_multiple_of(2) {
        return Err(ParseError::OddHexLength(hex.to_string()));
    }
    if hex.len() / 2 > MAX_DLC {
        return Err(ParseError::DlcMismatch { dlc: MAX_DLC, bytes: hex.len() / 2 });
    }
    hex.as_bytes()
        .chunks(2)
        .map(|pair| {
            let s = std::str::from_utf8(pair).map_err(|_| ParseError::BadByte(hex.to_string()))?;
            parse_byte(s)
        })
        .collect()
}

/// Parses one canonical CSV line.
pub fn parse_canonical_line(line: &str) -> Result<CanMessage, ParseError> {
    let fields: Vec<&str> = line.trim().split(',').collect();
    if fields.len() < 4 {
        return Err(ParseError::MalformedLine(format!(
            "expected at least 4 fields, found {}",
            fields.len()
        )));
    }
    let timestamp = parse_timestamp(fields[0])?;
    let dlc = parse_dlc(fields[2])?;
    let bytes = &fields[3..fields.len() - 1];
    if bytes.len() != dlc {
        return Err(ParseError::DlcMismatch { dlc, bytes: bytes.len() });
    }
    let can_id = parse_id(fields[1])?;
    let payload = bytes.iter().map(|b| parse_byte(b)).collect::<Result<Vec<_>, _>>()?;
    let flag = fields[fields.len() - 1].trim();
    let label = Label::from_flag(flag)
        .ok_or_else(|| ParseError::MalformedLine(format!("unknown flag {flag:?}")))?;
    Ok(CanMessage { timestamp, can_id, payload, label })
}

/// Formats a message as one canonical CSV line (no trailing newline).
///
/// The timestamp uses the shortest decimal that parses back to the same `f64`,
/// padded to at least six fractional digits.
pub fn format_canonical_line(msg: &CanMessage) -> String {
    let mut out = format_timestamp(msg.timestamp);
    out.push_str(&format!(",{:04X},{}", msg.can_id, msg.payload.len()));
    for b in &msg.payload {
        out.push_str(&format!(",{b:02X}"));
    }
    out.push(',');
    out.push(msg.label.flag());
    out
}

fn format_timestamp(t: f64) -> String {
    let mut s = format!("{t}");
    let frac = match s.find('.') {
        Some(dot) => s.len() - dot - 1,
        None => {
            s.push('.');
            0
        }
    };
    for _ in frac..6 {
        s.push('0');
    }
    s
}

/// Parses one `candump -l` line: `(ts) iface ID#HEXPAYLOAD`.
pub fn parse_candump_line(line: &str) -> Result<CanMessage, ParseError> {
    let mut parts = line.split_whitespace();
    let ts = parts
        .next()
        .and_then(|t| t.strip_prefix('(').and_then(|t| t.strip_suffix(')')))
        .ok_or_else(|| ParseError::MalformedLine("missing (timestamp)".into()))?;
    let _iface = parts
        .next()
        .ok_or_else(|| ParseError::MalformedLine("missing interface".into()))?;
    let frame = parts
        .next()
        .ok_or_else(|| ParseError::MalformedLine("missing frame".into()))?;
    if parts.next().is_some() {
        return Err(ParseError::MalformedLine("trailing tokens".into()));
    }
    let (id, data) = frame
        .split_once('#')
        .ok_or_else(|| ParseError::MalformedLine(format!("frame {frame:?} lacks '#'")))?;
    if data.starts_with('#') || data.starts_with('R') {
        return Err(ParseError::MalformedLine("CAN-FD and remote frames are not supported".into()));
    }
    let timestamp = parse_timestamp(ts)?;
    let can_id = parse_id(id)?;
    let payload = parse_hex_payload(data)?;
    Ok(CanMessage { timestamp, can_id, payload, label: Label::Unknown })
}

/// Parses one line of a public benchmark release. Returns `Ok(None)` for
/// header lines.
pub fn parse_benchmark_line(line: &str) -> Result<Option<CanMessage>, ParseError> {
    let line = line.trim();
    if let Some(rest) = line.strip_prefix("Timestamp:") {
        return parse_hcrl_text(rest).map(Some);
    }
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields[0].parse::<f64>().is_err() {
        if fields[0].chars().next().is_some_and(|c| c.is_ascii_alphabetic()) {
            return Ok(None);
        }
        return Err(ParseError::BadTimestamp(fields[0].to_string()));
    }
    if fields.len() == 4 && matches!(fields[3], "0" | "1") && fields[2].len() != 1 {
        // timestamp,arbitration_id,data_field,attack
        let timestamp = parse_timestamp(fields[0])?;
        let can_id = parse_id(fields[1])?;
        let payload = parse_hex_payload(fields[2])?;
        let label = if fields[3] == "1" { Label::Attack } else { Label::Benign };
        return Ok(Some(CanMessage { timestamp, can_id, payload, label }));
    }
    if fields.len() < 3 {
        return Err(ParseError::MalformedLine(format!("expected at least 3 fields, found {}", fields.len())));
    }
    let timestamp = parse_timestamp(fields[0])?;
    let can_id = parse_id(fields[1])?;
    let dlc = parse_dlc(fields[2])?;
    let rest: Vec<&str> = fields[3..].iter().copied().filter(|f| !f.is_empty()).collect();
    let (bytes, label) = if rest.len() == dlc + 1 {
        let flag = rest[dlc];
        let label = match flag {
            "R" | "r" => Label::Benign,
            "T" | "t" => Label::Attack,
            _ => return Err(ParseError::MalformedLine(format!("unknown flag {flag:?}"))),
        };
        (&rest[..dlc], label)
    } else if rest.len() == dlc {
        (&rest[..], Label::Unknown)
    } else {
        return Err(ParseError::DlcMismatch { dlc, bytes: rest.len() });
    };
    let payload = bytes.iter().map(|b| parse_byte(b)).collect::<Result<Vec<_>, _>>()?;
    Ok(Some(CanMessage { timestamp, can_id, payload, label }))
}

// `Timestamp: 1479121434.850202        ID: 0350    000    DLC: 8    05 28 84 66 6d 00 00 a2`
fn parse_hcrl_text(rest: &str) -> Result<CanMessage, ParseError> {
    let tokens: Vec<&str> = rest.split_whitespace().collect();
    let ts = tokens.first().ok_or_else(|| ParseError::MalformedLine("missing timestamp".into()))?;
    let timestamp = parse_timestamp(ts)?;
    let id_pos = tokens
        .iter()
        .position(|t| *t == "ID:")
        .ok_or_else(|| ParseError::MalformedLine("missing ID:".into()))?;
    let can_id = parse_id(tokens.get(id_pos + 1).copied().unwrap_or(""))?;
    let dlc_pos = tokens
        .iter()
        .position(|t| *t == "DLC:")
        .ok_or_else(|| ParseError::MalformedLine("missing DLC:".into()))?;
    let dlc = parse_dlc(tokens.get(dlc_pos + 1).copied().unwrap_or(""))?;
    let bytes = &tokens[(dlc_pos + 2).min(tokens.len())..];
    if bytes.len() != dlc {
        return Err(ParseError::DlcMismatch { dlc, bytes: bytes.len() });
    }
    let payload = bytes.iter().map(|b| parse_byte(b)).collect::<Result<Vec<_>, _>>()?;
    Ok(CanMessage { timestamp, can_id, payload, label: Label::Unknown })
}

/// A skipped line and why.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    /// 1-based line number.
    pub line: usize,
    pub error: ParseError,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TraceSummary {
    pub parsed: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReadOptions {
    /// Reject out-of-order timestamps instead of sorting.
    pub strict: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub messages: Vec<CanMessage>,
    pub summary: TraceSummary,
    pub diagnostics: Vec<Diagnostic>,
}

/// Line-by-line parser over any buffered reader. Blank lines and headers are
/// passed over silently; every other line yields a message or a diagnostic.
pub struct TraceReader<R> {
    lines: io::Lines<R>,
    format: TraceFormat,
    has_labels: bool,
    line_no: usize,
}

impl<R: BufRead> TraceReader<R> {
    pub fn new(reader: R, format: TraceFormat, has_labels: bool) -> Self {
        TraceReader { lines: reader.lines(), format, has_labels, line_no: 0 }
    }
}

/// Item type of [`TraceReader`]: I/O failures abort, parse failures are per line.
pub type LineResult = io::Result<Result<CanMessage, Diagnostic>>;

impl<R: BufRead> Iterator for TraceReader<R> {
    type Item = LineResult;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(line) => line,
                Err(e) => return Some(Err(e)),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let parsed = match self.format {
                TraceFormat::CanonicalCsv => parse_canonical_line(&line).map(Some),
                TraceFormat::CandumpText => parse_candump_line(&line).map(Some),
                TraceFormat::BenchmarkCsv => parse_benchmark_line(&line),
            };
            let item = match parsed {
                Ok(None) => continue,
                Ok(Some(mut msg)) => {
                    if !self.has_labels {
                        msg.label = Label::Unknown;
                    }
                    Ok(msg)
                }
                Err(error) => Err(Diagnostic { line: self.line_no, error }),
            };
            return Some(Ok(item));
        }
    }
}

/// Reads a whole trace from a buffered reader, applying the timestamp policy.
pub fn read_trace_from<R: BufRead>(
    reader: R,
    format: TraceFormat,
    has_labels: bool,
    opts: ReadOptions,
) -> Result<Trace, IngestError> {
    let mut trace = Trace::default();
    let mut last = f64::NEG_INFINITY;
    let mut sorted = true;
    let mut reader = TraceReader::new(reader, format, has_labels);
    while let Some(item) = reader.next() {
        let item = item.map_err(|source| IngestError::Io { path: PathBuf::new(), source })?;
        match item {
            Ok(msg) => {
                if msg.timestamp < last {
                    if opts.strict {
                        return Err(IngestError::NonMonotonicTimestamp {
                            line: reader.line_no,
                            timestamp: msg.timestamp,
                        });
                    }
                    sorted = false;
                }
                last = last.max(msg.timestamp);
                trace.messages.push(msg);
            }
            Err(diag) => {
                log::debug!("line {}: {}", diag.line, diag.error);
                trace.diagnostics.push(diag);
            }
        }
    }
    if !sorted {
        // Vec::sort_by is stable, so equal timestamps keep input order.
        trace.messages.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    }
    trace.summary = TraceSummary { parsed: trace.messages.len(), skipped: trace.diagnostics.len() };
    Ok(trace)
}

/// Reads the trace described by `source`.
pub fn read_trace(source: &TraceSource, opts: ReadOptions) -> Result<Trace, IngestError> {
    let file = File::open(&source.path).map_err(|e| IngestError::Io { path: source.path.clone(), source: e })?;
    read_trace_from(BufReader::new(file), source.format, source.has_labels, opts).map_err(|e| match e {
        IngestError::Io { source: io, .. } => IngestError::Io { path: source.path.clone(), source: io },
        other => other,
    })
}

/// Writes messages as canonical CSV.
pub fn write_canonical<W: io::Write>(mut out: W, messages: &[CanMessage]) -> io::Result<()> {
    for msg in messages {
        writeln!(out, "{}", format_canonical_line(msg))?;
    }
    out.flush()
}

/// Convenience wrapper around [`write_canonical`] for a file path.
pub fn write_canonical_file(path: &Path, messages: &[CanMessage]) -> io::Result<()> {
    let file = File::create(path)?;
    write_canonical(io::BufWriter::new(file), messages)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn canonical_examples() {
        let m = parse_canonical_line("0.000000,0316,8,05,21,68,09,21,21,00,6F,R").unwrap();
        assert_eq!(m.timestamp, 0.0);
        assert_eq!(m.can_id, 0x316);
        assert_eq!(m.payload, vec![0x05, 0x21, 0x68, 0x09, 0x21, 0x21, 0x00, 0x6F]);
        assert_eq!(m.label, Label::Benign);

        let m = parse_canonical_line("1.500000,0000,2,FF,FF,T").unwrap();
        assert_eq!((m.timestamp, m.can_id, m.dlc()), (1.5, 0, 2));
        assert_eq!(m.payload, vec![0xFF, 0xFF]);
        assert_eq!(m.label, Label::Attack);

        assert!(matches!(
            parse_canonical_line("1.0,0900,8,00"),
            Err(ParseError::DlcMismatch { .. })
        ));
    }

    #[test]
    fn canonical_errors() {
        assert!(matches!(parse_canonical_line("1.0,0100"), Err(ParseError::MalformedLine(_))));
        assert!(matches!(parse_canonical_line("1.0,0800,0,R"), Err(ParseError::IdOutOfRange(0x800))));
        assert!(matches!(parse_canonical_line("1.0,0100,1,GG,R"), Err(ParseError::BadByte(_))));
        assert!(matches!(parse_canonical_line("-1.0,0100,0,R"), Err(ParseError::BadTimestamp(_))));
        assert!(matches!(parse_canonical_line("1.0,0100,0,X"), Err(ParseError::MalformedLine(_))));
    }

    #[test]
    fn candump_examples() {
        let m = parse_candump_line("(0.100000) can0 316#0521680921210060").unwrap();
        assert_eq!((m.timestamp, m.can_id, m.dlc()), (0.1, 0x316, 8));
        assert_eq!(m.payload, vec![0x05, 0x21, 0x68, 0x09, 0x21, 0x21, 0x00, 0x60]);
        assert_eq!(m.label, Label::Unknown);

        let m = parse_candump_line("(2.0) can0 001#").unwrap();
        assert_eq!((m.timestamp, m.can_id), (2.0, 1));
        assert!(m.payload.is_empty());

        assert!(matches!(parse_candump_line("(2.0) can0 FFFF#00"), Err(ParseError::IdOutOfRange(0xFFFF))));
        assert!(matches!(parse_candump_line("(2.0) can0 100#012"), Err(ParseError::OddHexLength(_))));
        assert!(matches!(parse_candump_line("2.0 can0 100#01"), Err(ParseError::MalformedLine(_))));
    }

    #[test]
    fn benchmark_variants() {
        let m = parse_benchmark_line("1478198376.389427,0316,8,05,21,68,09,21,21,00,6f,R")
            .unwrap()
            .unwrap();
        assert_eq!(m.label, Label::Benign);
        assert_eq!(m.payload[7], 0x6F);

        let m = parse_benchmark_line("1478198376.389427,0000,8,00,00,00,00,00,00,00,00,T").unwrap().unwrap();
        assert_eq!(m.label, Label::Attack);

        // short DoS-style rows carry only `dlc` bytes before the flag
        let m = parse_benchmark_line("1478198376.4,05f0,2,01,00,R").unwrap().unwrap();
        assert_eq!(m.payload, vec![1, 0]);

        let m = parse_benchmark_line("1478198376.4,0316,2,01,00").unwrap().unwrap();
        assert_eq!(m.label, Label::Unknown);

        let m = parse_benchmark_line(
            "Timestamp: 1479121434.850202        ID: 0350    000    DLC: 8    05 28 84 66 6d 00 00 a2",
        )
        .unwrap()
        .unwrap();
        assert_eq!(m.can_id, 0x350);
        assert_eq!(m.payload, vec![0x05, 0x28, 0x84, 0x66, 0x6d, 0x00, 0x00, 0xa2]);

        let m = parse_benchmark_line("1672531200.5,0C1,0000000000000000,1").unwrap().unwrap();
        assert_eq!((m.can_id, m.dlc(), m.label), (0x0C1, 8, Label::Attack));

        assert_eq!(parse_benchmark_line("Timestamp,CAN ID,DLC,DATA,Flag").unwrap(), None);
        assert!(parse_benchmark_line("1.0,0316,8,00,R").is_err());
    }

    #[test]
    fn read_trace_counts() {
        let text = "0.1,0100,1,00,R\nnot a line\n0.2,0101,0,T\n";
        let trace = read_trace_from(text.as_bytes(), TraceFormat::CanonicalCsv, true, ReadOptions::default()).unwrap();
        assert_eq!(trace.summary, TraceSummary { parsed: 2, skipped: 1 });
        assert_eq!(trace.diagnostics[0].line, 2);

        let trace = read_trace_from("".as_bytes(), TraceFormat::CanonicalCsv, true, ReadOptions::default()).unwrap();
        assert_eq!(trace.summary, TraceSummary { parsed: 0, skipped: 0 });
        assert!(trace.messages.is_empty());
    }

    #[test]
    fn timestamp_policy() {
        let text = "0.3,0100,0,R\n0.1,0101,0,R\n0.1,0102,0,R\n0.2,0103,0,R\n";
        let strict = read_trace_from(text.as_bytes(), TraceFormat::CanonicalCsv, true, ReadOptions { strict: true });
        assert!(matches!(strict, Err(IngestError::NonMonotonicTimestamp { line: 2, .. })));

        let lenient = read_trace_from(text.as_bytes(), TraceFormat::CanonicalCsv, true, ReadOptions::default()).unwrap();
        let ids: Vec<u16> = lenient.messages.iter().map(|m| m.can_id).collect();
        assert_eq!(ids, vec![0x101, 0x102, 0x103, 0x100]);
    }

    #[test]
    fn unlabeled_source_forces_unknown() {
        let text = "0.1,0100,0,T\n";
        let trace = read_trace_from(text.as_bytes(), TraceFormat::CanonicalCsv, false, ReadOptions::default()).unwrap();
        assert_eq!(trace.messages[0].label, Label::Unknown);
    }

    #[test]
    fn format_detection() {
        assert_eq!(TraceSource::detect("a.log").unwrap().format, TraceFormat::CandumpText);
        assert!(matches!(TraceSource::detect("a.pcap"), Err(IngestError::UnsupportedFormat(_))));
        assert!("parquet".parse::<TraceFormat>().is_err());
    }

    fn arb_message() -> impl Strategy<Value = CanMessage> {
        (
            0.0f64..1.0e10,
            0u16..=MAX_CAN_ID,
            proptest::collection::vec(any::<u8>(), 0..=8),
            prop_oneof![Just(Label::Benign), Just(Label::Attack), Just(Label::Unknown)],
        )
            .prop_map(|(timestamp, can_id, payload, label)| CanMessage { timestamp, can_id, payload, label })
    }

    proptest! {
        #[test]
        fn canonical_round_trip(msg in arb_message()) {
            let line = format_canonical_line(&msg);
            prop_assert_eq!(parse_canonical_line(&line).unwrap(), msg);
        }

        #[test]
        fn parsers_are_total(line in "\\PC{0,60}") {
            let _ = parse_canonical_line(&line);
            let _ = parse_candump_line(&line);
            let _ = parse_benchmark_line(&line);
        }

        #[test]
        fn parsers_are_total_on_csvish(line in "[0-9A-Fa-f.,#() RTU-]{0,60}") {
            let _ = parse_canonical_line(&line);
            let _ = parse_candump_line(&line);
            let _ = parse_benchmark_line(&line);
        }
    }
}
