//! Run directories: exclusive ownership through a lock file, refusal to
//! overwrite a finished or partial run, and helpers for append-only
//! line-delimited files.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};

use crate::Failure;

pub const LOCK_FILE: &str = "run.lock";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Fresh,
    /// Delete the previous run's contents first.
    Force,
    /// Continue from the checkpoints already in the directory.
    Resume,
}

impl Mode {
    pub fn from_flags(force: bool, resume: bool) -> Result<Self, Failure> {
        match (force, resume) {
            (true, true) => Err(Failure::config(anyhow!("--force and --resume are mutually exclusive"))),
            (true, false) => Ok(Mode::Force),
            (false, true) => Ok(Mode::Resume),
            (false, false) => Ok(Mode::Fresh),
        }
    }
}

/// A locked run directory. The lock file is removed on drop.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn open(root: &Path, mode: Mode) -> Result<Self, Failure> {
        fs::create_dir_all(root)
            .with_context(|| format!("cannot create run directory {}", root.display()))
            .map_err(Failure::runtime)?;
        let lock = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Failure::config(anyhow!(
                    "{} is locked by another process (remove {} if that process is gone)",
                    root.display(),
                    lock.display()
                )));
            }
            Err(e) => return Err(Failure::runtime(anyhow!(e).context(format!("cannot create {}", lock.display())))),
        }
        let dir = RunDir { root: root.to_path_buf() };
        let existing = root.join(CONFIG_FILE).exists();
        match mode {
            Mode::Fresh if existing => {
                return Err(Failure::config(anyhow!(
                    "{} already holds a run; pass --force to overwrite it or --resume to continue it",
                    root.display()
                )))
            }
            Mode::Resume if !existing => return Err(Failure::config(anyhow!("{} holds no run to resume", root.display()))),
            Mode::Force => dir.clear().map_err(Failure::runtime)?,
            _ => {}
        }
        Ok(dir)
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn subdir(&self, rel: &str) -> anyhow::Result<PathBuf> {
        let p = self.root.join(rel);
        fs::create_dir_all(&p).with_context(|| format!("cannot create {}", p.display()))?;
        Ok(p)
    }

    /// Removes everything except the lock.
    fn clear(&self) -> anyhow::Result<()> {
        if !self.root.join(CONFIG_FILE).exists() {
            return Ok(());
        }
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            if entry.file_name() == LOCK_FILE {
                continue;
            }
            let p = entry.path();
            if entry.file_type()?.is_dir() {
                fs::remove_dir_all(&p)
            } else {
                fs::remove_file(&p)
            }
            .with_context(|| format!("cannot remove {}", p.display()))?;
        }
        Ok(())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.root.join(LOCK_FILE));
    }
}

/// Writes a file through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> anyhow::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).with_context(|| format!("cannot write {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

pub fn append_lines(path: &Path) -> anyhow::Result<File> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("cannot open {}", path.display()))
}

/// Keeps only the lines for which `keep` holds, rewriting the file. Used on
/// resume to drop records written after the last checkpoint.
pub fn retain_lines(path: &Path, mut keep: impl FnMut(usize, &str) -> anyhow::Result<bool>) -> anyhow::Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let f = File::open(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut out = String::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if keep(i, &line).with_context(|| format!("{} line {}", path.display(), i + 1))? {
            out.push_str(&line);
            out.push('\n');
        }
    }
    write_atomic(path, out.as_bytes())
}

/// Integer field of a JSON record.
pub fn json_u64(line: &str, field: &str) -> anyhow::Result<u64> {
    let v: serde_json::Value = serde_json::from_str(line)?;
    v.get(field).and_then(|x| x.as_u64()).ok_or_else(|| anyhow!("missing integer field `{field}`"))
}
