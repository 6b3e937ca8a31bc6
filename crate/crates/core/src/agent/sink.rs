//! Destinations for the writer thread.

use std::fs::File;
use std::io::{self, BufWriter};
use std::net::{TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crate::records::{MonitoringRecord, RecordWriter};

/// Consumer of monitoring records. Only the writer thread calls it (or the
/// application thread in synchronous delivery mode).
pub trait RecordSink: Send {
    fn write(&mut self, record: &MonitoringRecord) -> io::Result<()>;

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl<S: RecordSink + ?Sized> RecordSink for Box<S> {
    fn write(&mut self, record: &MonitoringRecord) -> io::Result<()> {
        (**self).write(record)
    }

    fn flush(&mut self) -> io::Result<()> {
        (**self).flush()
    }
}

/// Keeps every record in memory. Clones share the same buffer.
#[derive(Debug, Clone, Default)]
pub struct MemorySink {
    records: Arc<Mutex<Vec<MonitoringRecord>>>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> Vec<MonitoringRecord> {
        self.records.lock().unwrap().clone()
    }

    pub fn take(&self) -> Vec<MonitoringRecord> {
        std::mem::take(&mut *self.records.lock().unwrap())
    }
}

impl RecordSink for MemorySink {
    fn write(&mut self, record: &MonitoringRecord) -> io::Result<()> {
        self.records.lock().unwrap().push(record.clone());
        Ok(())
    }
}

/// Counts records and discards them.
#[derive(Debug, Clone, Default)]
pub struct CountingSink {
    count: Arc<AtomicU64>,
}

impl CountingSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> u64 {
        self.count.load(Ordering::Acquire)
    }
}

impl RecordSink for CountingSink {
    fn write(&mut self, _record: &MonitoringRecord) -> io::Result<()> {
        self.count.fetch_add(1, Ordering::AcqRel);
        Ok(())
    }
}

/// Binary record file: preamble then frames.
pub struct FileSink {
    writer: RecordWriter<BufWriter<File>>,
}

impl FileSink {
    pub fn create(path: impl AsRef<Path>) -> io::Result<Self> {
        let file = File::create(path)?;
        Ok(Self {
            writer: RecordWriter::new(BufWriter::with_capacity(64 * 1024, file))?,
        })
    }
}

impl RecordSink for FileSink {
    fn write(&mut self, record: &MonitoringRecord) -> io::Result<()> {
        self.writer.write(record)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.writer.flush()
    }
}

/// Streams the binary format to a collector.
pub struct TcpSink {
    writer: RecordWriter<BufWriter<TcpStream>>,
}

impl TcpSink {
    pub const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);

    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let mut last = None;
        for addr in addr.to_socket_addrs()? {
            match TcpStream::connect_timeout(&addr, Self::CONNECT_TIMEOUT) {
                Ok(stream) => {
                    stream.set_nodelay(true)?;
                    return Ok(Self {
                        writer: RecordWriter::new(BufWriter::with_capacity(64 * 1024, stream))?,
                    });
                }
                Err(e) => last = Some(e),
            }
        }
        Err(last.unwrap_or_else(|| {
            io::Error::new(io::ErrorKind::InvalidInput, "address resolved to nothing")
        }))
    }
}

impl RecordSink for TcpSink {
    fn write(&mut self, record: &MonitoringRecord) -> io::Result<()> {
        self.writer.write(record)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.writer.flush()
    }
}

/// Sleeps for a fixed time per record before forwarding it. Models a slow
/// backend in overhead experiments.
pub struct DelaySink<S> {
    inner: S,
    delay: Duration,
}

impl<S: RecordSink> DelaySink<S> {
    pub fn new(inner: S, delay: Duration) -> Self {
        Self { inner, delay }
    }
}

impl<S: RecordSink> RecordSink for DelaySink<S> {
    fn write(&mut self, record: &MonitoringRecord) -> io::Result<()> {
        std::thread::sleep(self.delay);
        self.inner.write(record)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}
