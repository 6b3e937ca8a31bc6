//! Destinations for OTLP/JSON documents.

use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("http error: {0}")]
    Http(String),
}

pub trait Exporter: Send {
    /// Delivers one document. Called again on failure, up to the retry limit.
    fn export(&mut self, document: &str) -> Result<(), ExportError>;

    fn flush(&mut self) -> Result<(), ExportError> {
        Ok(())
    }
}

impl<E: Exporter + ?Sized> Exporter for Box<E> {
    fn export(&mut self, document: &str) -> Result<(), ExportError> {
        (**self).export(document)
    }

    fn flush(&mut self) -> Result<(), ExportError> {
        (**self).flush()
    }
}

/// POSTs each document to an OTLP/HTTP traces endpoint.
pub struct HttpExporter {
    agent: ureq::Agent,
    url: String,
}

impl HttpExporter {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(true)
            .build()
            .new_agent();
        Self {
            agent,
            url: url.into(),
        }
    }

    /// `host:port` or a full URL; a bare authority gets `http://` and `/v1/traces`.
    pub fn endpoint_url(target: &str) -> String {
        if target.contains("://") {
            target.to_string()
        } else {
            format!("http://{}/v1/traces", target.trim_end_matches('/'))
        }
    }
}

impl Exporter for HttpExporter {
    fn export(&mut self, document: &str) -> Result<(), ExportError> {
        self.agent
            .post(&self.url)
            .content_type("application/json")
            .send(document)
            .map(|_| ())
            .map_err(|e| ExportError::Http(e.to_string()))
    }
}

/// Appends one document per line.
pub struct FileExporter {
    out: BufWriter<File>,
}

impl FileExporter {
    pub fn create(path: impl AsRef<Path>) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }
}

impl Exporter for FileExporter {
    fn export(&mut self, document: &str) -> Result<(), ExportError> {
        self.out.write_all(document.as_bytes())?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    fn flush(&mut self) -> Result<(), ExportError> {
        Ok(self.out.flush()?)
    }
}

/// Prints one document per line.
pub struct StdoutExporter;

impl Exporter for StdoutExporter {
    fn export(&mut self, document: &str) -> Result<(), ExportError> {
        let mut out = io::stdout().lock();
        out.write_all(document.as_bytes())?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }
}

/// Accepts and forgets every document.
pub struct DiscardExporter;

impl Exporter for DiscardExporter {
    fn export(&mut self, _document: &str) -> Result<(), ExportError> {
        Ok(())
    }
}

/// Keeps documents in memory; clones share the same buffer.
#[derive(Debug, Clone, Default)]
pub struct MemoryExporter {
    documents: Arc<Mutex<Vec<String>>>,
}

impl MemoryExporter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn documents(&self) -> Vec<String> {
        self.documents.lock().unwrap().clone()
    }

    pub fn len(&self) -> usize {
        self.documents.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Exporter for MemoryExporter {
    fn export(&mut self, document: &str) -> Result<(), ExportError> {
        self.documents.lock().unwrap().push(document.to_string());
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    /// Wait before the second attempt; doubles after each further failure.
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff: Duration::from_millis(100),
        }
    }
}

impl RetryPolicy {
    /// Tries `export` up to `attempts` times. Returns the number of failed
    /// attempts and the last error if every attempt failed.
    pub fn run(
        &self,
        exporter: &mut dyn Exporter,
        document: &str,
    ) -> (u32, Option<ExportError>) {
        let mut backoff = self.initial_backoff;
        let mut failures = 0;
        loop {
            match exporter.export(document) {
                Ok(()) => return (failures, None),
                Err(e) => {
                    failures += 1;
                    if failures >= self.attempts.max(1) {
                        return (failures, Some(e));
                    }
                    log::warn!("export attempt {failures} failed: {e}; retrying in {backoff:?}");
                    thread::sleep(backoff);
                    backoff *= 2;
                }
            }
        }
    }
}
