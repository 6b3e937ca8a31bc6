//! Length-prefixed big-endian binary format.
//!
//! A frame is a 4-byte payload length followed by the payload: a 1-byte type
//! tag and the record fields in declaration order. Integers are fixed-width
//! big-endian, texts are a 2-byte length plus UTF-8 bytes, floats are IEEE-754
//! big-endian. Files and TCP streams start with the 5-byte [`PREAMBLE`].

use std::io::{self, BufRead, BufReader, Read, Write};

use thiserror::Error;

use super::{
    LogEventRecord, MetricSampleRecord, MonitoringRecord, OperationExecutionRecord, RecordKind,
    Severity, MAX_TEXT_LEN,
};

pub const MAGIC: [u8; 4] = *b"KOF2";
pub const FORMAT_VERSION: u8 = 0x01;
pub const PREAMBLE: [u8; 5] = [MAGIC[0], MAGIC[1], MAGIC[2], MAGIC[3], FORMAT_VERSION];
pub const PREAMBLE_LEN: usize = PREAMBLE.len();

const HEADER_LEN: usize = 4;

/// Upper bound on any valid payload (the operation execution variant with
/// three maximal texts). Longer length prefixes are rejected as malformed.
pub const MAX_PAYLOAD_LEN: usize = 1 + 8 + 4 + 4 + 8 + 8 + 3 * (2 + MAX_TEXT_LEN);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EncodeError {
    #[error("text field `{field}` is {len} bytes, limit is 65535")]
    TextTooLong { field: &'static str, len: usize },
    #[error("metric value {0} is not finite")]
    NonFiniteValue(f64),
    #[error("exit timestamp {tout} precedes entry timestamp {tin}")]
    ExitBeforeEntry { tin: u64, tout: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    /// More input is required; `needed` is the minimum total length of the buffer.
    #[error("incomplete record: need {needed} bytes, have {available}")]
    Incomplete { needed: usize, available: usize },
    #[error("malformed record: {0}")]
    Malformed(String),
}

impl DecodeError {
    pub fn is_incomplete(&self) -> bool {
        matches!(self, DecodeError::Incomplete { .. })
    }
}

/// Encodes one record as a complete frame.
pub fn encode_record(record: &MonitoringRecord) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::with_capacity(64);
    encode_record_into(record, &mut out)?;
    Ok(out)
}

/// Appends one frame to `out`. On error `out` is left unchanged.
pub fn encode_record_into(record: &MonitoringRecord, out: &mut Vec<u8>) -> Result<(), EncodeError> {
    record.validate()?;
    let start = out.len();
    out.extend_from_slice(&[0; HEADER_LEN]);
    out.push(record.kind().tag());
    match record {
        MonitoringRecord::OperationExecution(r) => {
            out.extend_from_slice(&r.trace_id.to_be_bytes());
            out.extend_from_slice(&r.eoi.to_be_bytes());
            out.extend_from_slice(&r.ess.to_be_bytes());
            put_text(out, &r.operation_signature);
            put_text(out, &r.host_name);
            out.extend_from_slice(&r.tin.to_be_bytes());
            out.extend_from_slice(&r.tout.to_be_bytes());
            put_text(out, &r.session_id);
        }
        MonitoringRecord::MetricSample(r) => {
            out.extend_from_slice(&r.timestamp.to_be_bytes());
            put_text(out, &r.sampler_name);
            put_text(out, &r.metric_name);
            out.extend_from_slice(&r.value.to_be_bytes());
            put_text(out, &r.host_name);
        }
        MonitoringRecord::LogEvent(r) => {
            out.extend_from_slice(&r.timestamp.to_be_bytes());
            out.push(r.severity.as_u8());
            put_text(out, &r.message);
            put_text(out, &r.host_name);
        }
    }
    let payload_len = (out.len() - start - HEADER_LEN) as u32;
    out[start..start + HEADER_LEN].copy_from_slice(&payload_len.to_be_bytes());
    Ok(())
}

fn put_text(out: &mut Vec<u8>, text: &str) {
    // length checked by validate()
    out.extend_from_slice(&(text.len() as u16).to_be_bytes());
    out.extend_from_slice(text.as_bytes());
}

/// Reads the frame length from the start of `bytes`: header plus payload.
pub fn frame_len(bytes: &[u8]) -> Result<usize, DecodeError> {
    if bytes.len() < HEADER_LEN {
        return Err(DecodeError::Incomplete {
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    let payload_len = u32::from_be_bytes(bytes[..HEADER_LEN].try_into().unwrap()) as usize;
    if payload_len == 0 {
        return Err(DecodeError::Malformed("zero-length payload".into()));
    }
    if payload_len > MAX_PAYLOAD_LEN {
        return Err(DecodeError::Malformed(format!(
            "payload length {payload_len} exceeds {MAX_PAYLOAD_LEN}"
        )));
    }
    Ok(HEADER_LEN + payload_len)
}

/// Decodes the frame at the start of `bytes`, returning the record and the
/// number of bytes consumed.
pub fn decode_record(bytes: &[u8]) -> Result<(MonitoringRecord, usize), DecodeError> {
    let total = frame_len(bytes)?;
    if bytes.len() < total {
        return Err(DecodeError::Incomplete {
            needed: total,
            available: bytes.len(),
        });
    }
    let record = decode_payload(&bytes[HEADER_LEN..total])?;
    Ok((record, total))
}

/// Decodes a payload (tag plus fields) without its length prefix.
pub fn decode_payload(payload: &[u8]) -> Result<MonitoringRecord, DecodeError> {
    let mut cur = Cursor { buf: payload, pos: 0 };
    let tag = cur.u8()?;
    let kind = RecordKind::from_tag(tag)
        .ok_or_else(|| DecodeError::Malformed(format!("unknown type tag 0x{tag:02x}")))?;
    let record = match kind {
        RecordKind::OperationExecution => {
            let trace_id = cur.u64()?;
            let eoi = cur.u32()?;
            let ess = cur.u32()?;
            let operation_signature = cur.text()?;
            let host_name = cur.text()?;
            let tin = cur.u64()?;
            let tout = cur.u64()?;
            let session_id = cur.text()?;
            if tout < tin {
                return Err(DecodeError::Malformed(format!(
                    "exit timestamp {tout} precedes entry timestamp {tin}"
                )));
            }
            MonitoringRecord::OperationExecution(OperationExecutionRecord {
                trace_id,
                eoi,
                ess,
                operation_signature,
                host_name,
                tin,
                tout,
                session_id,
            })
        }
        RecordKind::MetricSample => {
            let timestamp = cur.u64()?;
            let sampler_name = cur.text()?;
            let metric_name = cur.text()?;
            let value = f64::from_be_bytes(cur.array()?);
            if !value.is_finite() {
                return Err(DecodeError::Malformed(format!("metric value {value} is not finite")));
            }
            let host_name = cur.text()?;
            MonitoringRecord::MetricSample(MetricSampleRecord {
                timestamp,
                sampler_name,
                metric_name,
                value,
                host_name,
            })
        }
        RecordKind::LogEvent => {
            let timestamp = cur.u64()?;
            let raw = cur.u8()?;
            let severity = Severity::from_u8(raw)
                .ok_or_else(|| DecodeError::Malformed(format!("unknown severity {raw}")))?;
            let message = cur.text()?;
            let host_name = cur.text()?;
            MonitoringRecord::LogEvent(LogEventRecord {
                timestamp,
                severity,
                message,
                host_name,
            })
        }
    };
    if cur.pos != payload.len() {
        return Err(DecodeError::Malformed(format!(
            "{} trailing payload bytes",
            payload.len() - cur.pos
        )));
    }
    Ok(record)
}

/// Reader over a payload whose length is already known, so running out of
/// bytes means the length prefix lied: malformed, not incomplete.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(DecodeError::Malformed(format!(
                "field overruns payload at byte {}",
                self.pos
            )));
        }
        let slice = &self.buf[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.array()?))
    }

    fn text(&mut self) -> Result<String, DecodeError> {
        let len = u16::from_be_bytes(self.array()?) as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|e| DecodeError::Malformed(format!("invalid UTF-8 in text field: {e}")))
    }
}

/// Checks a stream preamble.
pub fn check_preamble(bytes: &[u8]) -> Result<(), DecodeError> {
    let magic_len = bytes.len().min(MAGIC.len());
    if bytes[..magic_len] != MAGIC[..magic_len] {
        return Err(DecodeError::Malformed("bad magic bytes".into()));
    }
    if bytes.len() < PREAMBLE_LEN {
        return Err(DecodeError::Incomplete {
            needed: PREAMBLE_LEN,
            available: bytes.len(),
        });
    }
    if bytes[MAGIC.len()] != FORMAT_VERSION {
        return Err(DecodeError::Malformed(format!(
            "unsupported format version 0x{:02x}",
            bytes[MAGIC.len()]
        )));
    }
    Ok(())
}

/// Incremental decoder for byte streams that arrive in arbitrary chunks.
#[derive(Debug, Default)]
pub struct StreamDecoder {
    buf: Vec<u8>,
    start: usize,
    expect_preamble: bool,
    consumed: u64,
}

impl StreamDecoder {
    /// Decoder for a raw sequence of frames.
    pub fn new() -> Self {
        Self::default()
    }

    /// Decoder that first expects the stream preamble.
    pub fn with_preamble() -> Self {
        Self {
            expect_preamble: true,
            ..Self::default()
        }
    }

    pub fn push(&mut self, bytes: &[u8]) {
        if self.start > 0 && self.start == self.buf.len() {
            self.buf.clear();
            self.start = 0;
        }
        self.buf.extend_from_slice(bytes);
    }

    /// Bytes consumed so far, including the preamble: the stream offset of the next frame.
    pub fn offset(&self) -> u64 {
        self.consumed
    }

    /// Buffered bytes not yet consumed.
    pub fn pending(&self) -> usize {
        self.buf.len() - self.start
    }

    fn skip_preamble(&mut self) -> Result<bool, DecodeError> {
        if self.expect_preamble {
            match check_preamble(&self.buf[self.start..]) {
                Ok(()) => {
                    self.advance(PREAMBLE_LEN);
                    self.expect_preamble = false;
                }
                Err(DecodeError::Incomplete { .. }) => return Ok(false),
                Err(e) => return Err(e),
            }
        }
        Ok(true)
    }

    fn advance(&mut self, n: usize) {
        self.start += n;
        self.consumed += n as u64;
        if self.start > 64 * 1024 && self.start * 2 > self.buf.len() {
            self.buf.drain(..self.start);
            self.start = 0;
        }
    }

    /// Splits off the next complete frame without decoding its payload.
    pub fn next_frame(&mut self) -> Result<Option<Vec<u8>>, DecodeError> {
        if !self.skip_preamble()? {
            return Ok(None);
        }
        let rest = &self.buf[self.start..];
        let total = match frame_len(rest) {
            Ok(total) if total <= rest.len() => total,
            Ok(_) | Err(DecodeError::Incomplete { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let frame = rest[..total].to_vec();
        self.advance(total);
        Ok(Some(frame))
    }

    /// Decodes the next complete record, or `None` if more bytes are needed.
    pub fn next_record(&mut self) -> Result<Option<MonitoringRecord>, DecodeError> {
        if !self.skip_preamble()? {
            return Ok(None);
        }
        match decode_record(&self.buf[self.start..]) {
            Ok((record, used)) => {
                self.advance(used);
                Ok(Some(record))
            }
            Err(DecodeError::Incomplete { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

/// Writes the preamble once and then frames.
pub struct RecordWriter<W: Write> {
    inner: W,
    scratch: Vec<u8>,
}

impl<W: Write> RecordWriter<W> {
    pub fn new(mut inner: W) -> io::Result<Self> {
        inner.write_all(&PREAMBLE)?;
        Ok(Self {
            inner,
            scratch: Vec::with_capacity(256),
        })
    }

    pub fn write(&mut self, record: &MonitoringRecord) -> io::Result<()> {
        self.scratch.clear();
        encode_record_into(record, &mut self.scratch)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
        self.inner.write_all(&self.scratch)
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }

    pub fn get_ref(&self) -> &W {
        &self.inner
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("at byte offset {offset}: {source}")]
    Decode { offset: u64, source: DecodeError },
}

impl StreamError {
    pub fn offset(&self) -> Option<u64> {
        match self {
            StreamError::Decode { offset, .. } => Some(*offset),
            StreamError::Io(_) => None,
        }
    }
}

/// Reads a preamble-led record stream, reporting the byte offset of the
/// first bad frame.
pub struct RecordReader<R: Read> {
    inner: BufReader<R>,
    offset: u64,
    started: bool,
    failed: bool,
    frame: Vec<u8>,
}

impl<R: Read> RecordReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner: BufReader::new(inner),
            offset: 0,
            started: false,
            failed: false,
            frame: Vec::new(),
        }
    }

    /// Offset of the next unread frame.
    pub fn offset(&self) -> u64 {
        self.offset
    }

    /// Fills `self.frame` with exactly `len` bytes or reports how many arrived before EOF.
    fn read_exact_or_eof(&mut self, len: usize) -> io::Result<usize> {
        self.frame.resize(len, 0);
        let mut got = 0;
        while got < len {
            match self.inner.read(&mut self.frame[got..]) {
                Ok(0) => break,
                Ok(n) => got += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e),
            }
        }
        Ok(got)
    }

    fn decode_err(&mut self, source: DecodeError) -> StreamError {
        self.failed = true;
        StreamError::Decode {
            offset: self.offset,
            source,
        }
    }

    fn read_next(&mut self) -> Option<Result<MonitoringRecord, StreamError>> {
        if !self.started {
            self.started = true;
            let got = match self.read_exact_or_eof(PREAMBLE_LEN) {
                Ok(n) => n,
                Err(e) => return Some(Err(e.into())),
            };
            if let Err(e) = check_preamble(&self.frame[..got]) {
                return Some(Err(self.decode_err(e)));
            }
            self.offset = PREAMBLE_LEN as u64;
        }
        match self.inner.fill_buf() {
            Ok([]) => return None,
            Ok(_) => {}
            Err(e) => return Some(Err(e.into())),
        }
        let got = match self.read_exact_or_eof(HEADER_LEN) {
            Ok(n) => n,
            Err(e) => return Some(Err(e.into())),
        };
        let total = match frame_len(&self.frame[..got]) {
            Ok(total) => total,
            Err(e) => return Some(Err(self.decode_err(e))),
        };
        let mut frame = std::mem::take(&mut self.frame);
        frame.resize(total, 0);
        self.frame = frame;
        let mut have = HEADER_LEN;
        while have < total {
            match self.inner.read(&mut self.frame[have..]) {
                Ok(0) => break,
                Ok(n) => have += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Some(Err(e.into())),
            }
        }
        let result = decode_record(&self.frame[..have]);
        match result {
            Ok((record, used)) => {
                self.offset += used as u64;
                Some(Ok(record))
            }
            Err(e) => Some(Err(self.decode_err(e))),
        }
    }
}

impl<R: Read> Iterator for RecordReader<R> {
    type Item = Result<MonitoringRecord, StreamError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        self.read_next()
    }
}
