use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::Path;
use std::sync::Arc;

use parking_lot::Mutex;

/// Destination of serialized log records, one line per event.
pub trait LogSink: Send {
    fn write_record(&mut self, line: &[u8]) -> io::Result<()>;
    fn sync(&mut self) -> io::Result<()>;
}

/// Append-only log file.
pub struct FileSink {
    file: File,
}

impl FileSink {
    pub fn open(path: &Path) -> io::Result<FileSink> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(FileSink { file })
    }
}

impl LogSink for FileSink {
    fn write_record(&mut self, line: &[u8]) -> io::Result<()> {
        let mut rec = Vec::with_capacity(line.len() + 1);
        rec.extend_from_slice(line);
        rec.push(b'\n');
        self.file.write_all(&rec)
    }

    fn sync(&mut self) -> io::Result<()> {
        self.file.sync_data()
    }
}

/// In-memory log whose bytes stay readable through a shared handle, so a
/// test can "restart" from exactly what was persisted.
#[derive(Clone, Default)]
pub struct MemorySink {
    buf: Arc<Mutex<Vec<u8>>>,
}

impl MemorySink {
    pub fn new() -> MemorySink {
        MemorySink::default()
    }

    pub fn bytes(&self) -> Vec<u8> {
        self.buf.lock().clone()
    }
}

impl LogSink for MemorySink {
    fn write_record(&mut self, line: &[u8]) -> io::Result<()> {
        let mut buf = self.buf.lock();
        buf.extend_from_slice(line);
        buf.push(b'\n');
        Ok(())
    }

    fn sync(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Discards everything.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullSink;

impl LogSink for NullSink {
    fn write_record(&mut self, _line: &[u8]) -> io::Result<()> {
        Ok(())
    }

    fn sync(&mut self) -> io::Result<()> {
        Ok(())
    }
}
