//! JSON-lines run log. Keys are emitted in sorted order and no wall-clock
//! values are recorded, so identical runs produce identical bytes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub struct JsonLog {
    out: Box<dyn Write>,
}

impl JsonLog {
    pub fn new(out: Box<dyn Write>) -> Self {
        Self { out }
    }

    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(Self::new(Box::new(BufWriter::new(f))))
    }

    pub fn record(&mut self, value: &serde_json::Value) -> Result<()> {
        let line = serde_json::to_string(value).map_err(|e| Error::Json {
            context: "log record".into(),
            source: e,
        })?;
        writeln!(self.out, "{line}").map_err(|e| Error::io("log", e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io("log", e))
    }
}

impl Drop for JsonLog {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}
