//! JSON-lines metrics log: exactly one object per training step, flushed
//! eagerly so a crashed or killed run still leaves a parseable file.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
    lines: usize,
}

impl MetricsWriter {
    /// Start a fresh log, truncating anything present.
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path)?;
        Ok(Self { out: BufWriter::new(file), path: path.to_path_buf(), lines: 0 })
    }

    /// Continue an existing log (used on resume); missing files are created.
    pub fn append_to(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { out: BufWriter::new(file), path: path.to_path_buf(), lines: 0 })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Lines written through this writer (not counting pre-existing ones).
    pub fn lines_written(&self) -> usize {
        self.lines
    }

    pub fn append(&mut self, record: &serde_json::Value) -> Result<()> {
        if !record.is_object() {
            return Err(Error::Config("metrics records must be JSON objects".into()));
        }
        serde_json::to_writer(&mut self.out, record).map_err(|e| Error::Msg(e.to_string()))?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        self.lines += 1;
        Ok(())
    }
}
