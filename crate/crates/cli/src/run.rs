//! Exit-code errors, the per-directory run guard and the `run.lock` record.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use wmage_core::fsio::write_atomic;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

/// A failed command: the message goes to stderr, the code to the shell.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub msg: String,
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            msg: msg.into(),
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            msg: msg.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

// Library errors are data or config problems by the time they reach here.
impl<E: std::error::Error> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::data(e.to_string())
    }
}

pub type CliResult<T> = Result<T, Failure>;

pub fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

const GUARD: &str = ".wmage.lock";

/// Exclusive claim on an output directory for the lifetime of a command.
/// Written outputs are collected so the run record can list checksums.
pub struct OutputDir {
    dir: PathBuf,
    guard: PathBuf,
    written: BTreeMap<String, String>,
}

impl OutputDir {
    pub fn claim(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| Failure::data(format!("{}: {e}", dir.display())))?;
        let guard = dir.join(GUARD);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&guard)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    Failure::data(format!(
                        "{} is in use by another run (remove {} if that run died)",
                        dir.display(),
                        guard.display()
                    ))
                } else {
                    Failure::data(format!("{}: {e}", guard.display()))
                }
            })?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(Self {
            dir: dir.to_path_buf(),
            guard,
            written: BTreeMap::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    /// Atomically writes `name` inside the directory.
    pub fn put(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let p = self.dir.join(name);
        write_atomic(&p, bytes).map_err(|e| Failure::data(format!("{}: {e}", p.display())))?;
        self.written.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    /// Records a file some library call wrote into the directory.
    pub fn adopt(&mut self, name: &str) -> CliResult<()> {
        let bytes = read_bytes(&self.dir.join(name))?;
        self.written.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    /// Writes the run record as `record_name` and releases the claim.
    pub fn finish(mut self, record_name: &str, record: RunRecord) -> CliResult<()> {
        let outputs = std::mem::take(&mut self.written);
        let json = serde_json::json!({
            "command": record.command,
            "seed": record.seed,
            "config": record.config,
            "inputs": record.inputs,
            "outputs": outputs,
        });
        let text = serde_json::to_string_pretty(&json).expect("json values serialise") + "\n";
        let p = self.dir.join(record_name);
        write_atomic(&p, text.as_bytes())
            .map_err(|e| Failure::data(format!("{}: {e}", p.display())))
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.guard);
    }
}

/// What a command resolved and read; outputs are added by [`OutputDir`].
#[derive(Default)]
pub struct RunRecord {
    pub command: String,
    pub seed: Option<u64>,
    pub config: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
}

impl RunRecord {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            ..Self::default()
        }
    }

    pub fn input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs
            .insert(path.display().to_string(), sha256_hex(bytes));
    }

    pub fn config<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) {
        for (k, v) in pairs {
            self.config.insert(k.into(), v.into());
        }
    }
}
