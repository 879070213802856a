//! Data and report streams. Data goes to `--out` or standard output; the
//! report goes to standard output when data has a file, standard error
//! otherwise, so the data stream stays machine-clean.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{Format, RunConfig};
use crate::error::CliError;

pub struct Output {
    data: Box<dyn Write>,
    to_file: bool,
}

impl Output {
    pub fn open(cfg: &RunConfig) -> Result<Self, CliError> {
        let (data, to_file): (Box<dyn Write>, bool) = match &cfg.out {
            Some(p) => (Box::new(BufWriter::new(create(p)?)), true),
            None => (Box::new(BufWriter::new(io::stdout())), false),
        };
        Ok(Output { data, to_file })
    }

    /// Writes the config echo in the header style of `cfg.format`. JSON
    /// documents cannot carry a header line, so their config goes to a
    /// `<out>.config.json` sidecar (or to the report stream).
    pub fn header(&mut self, cfg: &RunConfig) -> Result<(), CliError> {
        let echo = format!("{{\"config\":{}}}", cfg.echo());
        match cfg.format {
            Format::Jsonl => writeln!(self.data, "{echo}")?,
            Format::Csv => writeln!(self.data, "# {echo}")?,
            Format::Json => match &cfg.out {
                Some(p) => std::fs::write(sidecar(p), format!("{echo}\n"))?,
                None => self.report(&echo),
            },
        }
        Ok(())
    }

    pub fn line(&mut self, s: &str) -> Result<(), CliError> {
        writeln!(self.data, "{s}")?;
        Ok(())
    }

    pub fn json_line<T: Serialize>(&mut self, v: &T) -> Result<(), CliError> {
        serde_json::to_writer(&mut self.data, v).map_err(|e| CliError::Io(e.to_string()))?;
        writeln!(self.data)?;
        Ok(())
    }

    pub fn json_document<T: Serialize>(&mut self, v: &T) -> Result<(), CliError> {
        serde_json::to_writer_pretty(&mut self.data, v).map_err(|e| CliError::Io(e.to_string()))?;
        writeln!(self.data)?;
        Ok(())
    }

    pub fn report(&self, s: &str) {
        if self.to_file {
            println!("{s}");
        } else {
            eprintln!("{s}");
        }
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.data.flush()?;
        Ok(())
    }
}

pub fn sidecar(p: &Path) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

fn create(p: &Path) -> Result<File, CliError> {
    File::create(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
}
