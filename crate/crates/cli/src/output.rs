//! Output files and the run manifest.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::{hex, RunConfig};
use crate::error::CliError;

struct HashingWriter<W> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

/// Writes result files into the output directory and remembers their digests.
pub struct Outputs {
    dir: PathBuf,
    written: Vec<(String, String)>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf(), written: Vec::new() }
    }

    pub fn write<F>(&mut self, name: &str, body: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut dyn Write) -> Result<(), CliError>,
    {
        fs::create_dir_all(&self.dir)?;
        let file = BufWriter::new(File::create(self.dir.join(name))?);
        let mut w = HashingWriter { inner: file, hasher: Sha256::new() };
        body(&mut w)?;
        w.flush()?;
        self.written.push((name.to_string(), hex(&w.hasher.finalize())));
        Ok(())
    }

    /// Writes `manifest.txt`: version, command, status, seed, config hash,
    /// the resolved configuration and the digest of every output written.
    pub fn manifest(&self, command: &str, config: Option<&RunConfig>, failure: Option<&CliError>) -> io::Result<()> {
        fs::create_dir_all(&self.dir)?;
        let mut w = BufWriter::new(File::create(self.dir.join("manifest.txt"))?);
        writeln!(w, "tool=panelvar")?;
        writeln!(w, "version={}", env!("CARGO_PKG_VERSION"))?;
        writeln!(w, "command={command}")?;
        writeln!(w, "status={}", if failure.is_some() { "error" } else { "ok" })?;
        if let Some(e) = failure {
            writeln!(w, "error={}", e.to_string().replace('\n', " "))?;
        }
        if let Some(cfg) = config {
            writeln!(w, "seed={}", cfg.seed)?;
            writeln!(w, "config_hash={}", cfg.hash())?;
            for line in cfg.canonical().lines() {
                writeln!(w, "config.{line}")?;
            }
        }
        for (name, digest) in &self.written {
            writeln!(w, "output.{name}={digest}")?;
        }
        w.flush()
    }
}
