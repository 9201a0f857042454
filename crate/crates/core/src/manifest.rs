//! Output directories that appear atomically, with a manifest of every
//! artifact and its SHA-256.
//!
//! Files are written into `<out>.partial` and the directory is renamed into
//! place only once the manifest is written. Dropping an unfinished
//! [`ArtifactDir`] deletes the staging directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("refusing to replace {0}: it exists and is not a previous output directory")]
    Occupied(String),
    #[error("invalid artifact name `{0}`")]
    BadName(String),
    #[error("artifact `{0}` written twice")]
    Duplicate(String),
    #[error("manifest line {line}: `{text}`")]
    Format { line: usize, text: String },
    #[error("artifact `{0}` does not match its manifest entry")]
    Mismatch(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ManifestError + '_ {
    move |source| ManifestError::Io { path: path.display().to_string(), source }
}

struct HashingWriter<W> {
    inner: W,
    hasher: Sha256,
    bytes: u64,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        self.bytes += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactEntry {
    pub sha256: String,
    pub bytes: u64,
}

/// Parsed manifest: echoed settings and artifact entries, both sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub settings: Vec<(String, String)>,
    pub artifacts: BTreeMap<String, ArtifactEntry>,
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.settings {
            s.push_str(&format!("config {k} {v}\n"));
        }
        for (name, e) in &self.artifacts {
            s.push_str(&format!("artifact {name} {} {}\n", e.sha256, e.bytes));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        let mut m = Manifest::default();
        for (i, line) in text.lines().enumerate() {
            let bad = || ManifestError::Format { line: i + 1, text: line.to_string() };
            if let Some(rest) = line.strip_prefix("config ") {
                let (k, v) = rest.split_once(' ').ok_or_else(bad)?;
                m.settings.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("artifact ") {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 3 {
                    return Err(bad());
                }
                let bytes = f[2].parse().map_err(|_| bad())?;
                m.artifacts.insert(f[0].to_string(), ArtifactEntry { sha256: f[1].to_string(), bytes });
            } else if !line.trim().is_empty() {
                return Err(bad());
            }
        }
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Self, ManifestError> {
        let path = dir.join(MANIFEST_NAME);
        Manifest::parse(&fs::read_to_string(&path).map_err(io_err(&path))?)
    }

    pub fn setting(&self, key: &str) -> Option<&str> {
        self.settings.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Checks that `dir` holds exactly the listed artifacts plus the
    /// manifest, with matching hashes and sizes.
    pub fn verify(&self, dir: &Path) -> Result<(), ManifestError> {
        let mut present = BTreeMap::new();
        for entry in fs::read_dir(dir).map_err(io_err(dir))? {
            let entry = entry.map_err(io_err(dir))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name != MANIFEST_NAME {
                present.insert(name, entry.path());
            }
        }
        for name in present.keys() {
            if !self.artifacts.contains_key(name) {
                return Err(ManifestError::Mismatch(name.clone()));
            }
        }
        for (name, expected) in &self.artifacts {
            let path = present.get(name).ok_or_else(|| ManifestError::Mismatch(name.clone()))?;
            let data = fs::read(path).map_err(io_err(path))?;
            let actual = ArtifactEntry { sha256: hex::encode(Sha256::digest(&data)), bytes: data.len() as u64 };
            if &actual != expected {
                return Err(ManifestError::Mismatch(name.clone()));
            }
        }
        Ok(())
    }
}

pub struct ArtifactDir {
    out: PathBuf,
    staging: PathBuf,
    entries: BTreeMap<String, ArtifactEntry>,
    finished: bool,
}

impl ArtifactDir {
    /// `out` may be absent, empty, or a directory holding a manifest from an
    /// earlier run (which is replaced on success).
    pub fn create(out: &Path) -> Result<Self, ManifestError> {
        if out.exists() {
            let replaceable = out.is_dir()
                && (out.join(MANIFEST_NAME).is_file()
                    || fs::read_dir(out).map_err(io_err(out))?.next().is_none());
            if !replaceable {
                return Err(ManifestError::Occupied(out.display().to_string()));
            }
        }
        let mut staging = out.as_os_str().to_owned();
        staging.push(".partial");
        let staging = PathBuf::from(staging);
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(io_err(&staging))?;
        }
        fs::create_dir_all(&staging).map_err(io_err(&staging))?;
        Ok(ArtifactDir { out: out.to_path_buf(), staging, entries: BTreeMap::new(), finished: false })
    }

    pub fn staging(&self) -> &Path {
        &self.staging
    }

    /// Streams one artifact through `fill`, recording its hash and size.
    pub fn write<F>(&mut self, name: &str, fill: F) -> Result<(), ManifestError>
    where
        F: FnOnce(&mut dyn Write) -> io::Result<()>,
    {
        if name.is_empty() || name == MANIFEST_NAME || name.contains(['/', '\\', ' ']) {
            return Err(ManifestError::BadName(name.to_string()));
        }
        if self.entries.contains_key(name) {
            return Err(ManifestError::Duplicate(name.to_string()));
        }
        let path = self.staging.join(name);
        let file = fs::File::create(&path).map_err(io_err(&path))?;
        let mut w = HashingWriter { inner: BufWriter::new(file), hasher: Sha256::new(), bytes: 0 };
        fill(&mut w).map_err(io_err(&path))?;
        w.flush().map_err(io_err(&path))?;
        let entry = ArtifactEntry { sha256: hex::encode(w.hasher.finalize()), bytes: w.bytes };
        self.entries.insert(name.to_string(), entry);
        Ok(())
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<(), ManifestError> {
        self.write(name, |w| w.write_all(bytes))
    }

    /// Writes the manifest and moves the directory into place.
    pub fn finish(mut self, settings: Vec<(String, String)>) -> Result<Manifest, ManifestError> {
        let manifest = Manifest { settings, artifacts: std::mem::take(&mut self.entries) };
        let path = self.staging.join(MANIFEST_NAME);
        fs::write(&path, manifest.render()).map_err(io_err(&path))?;
        if self.out.exists() {
            fs::remove_dir_all(&self.out).map_err(io_err(&self.out))?;
        }
        fs::rename(&self.staging, &self.out).map_err(io_err(&self.out))?;
        self.finished = true;
        Ok(manifest)
    }
}

impl Drop for ArtifactDir {
    fn drop(&mut self) {
        if !self.finished {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finish_moves_and_verifies() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("run");
        let mut dir = ArtifactDir::create(&out).unwrap();
        dir.write_bytes("a.txt", b"abc").unwrap();
        dir.write("b.csv", |w| writeln!(w, "x,y")).unwrap();
        assert!(matches!(dir.write_bytes("a.txt", b""), Err(ManifestError::Duplicate(_))));
        assert!(matches!(dir.write_bytes("../x", b""), Err(ManifestError::BadName(_))));
        let m = dir.finish(vec![("seed".into(), "1".into())]).unwrap();
        assert_eq!(
            m.artifacts["a.txt"].sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert!(!tmp.path().join("run.partial").exists());
        let back = Manifest::load(&out).unwrap();
        assert_eq!(back, m);
        back.verify(&out).unwrap();

        fs::write(out.join("extra"), "x").unwrap();
        assert!(matches!(back.verify(&out), Err(ManifestError::Mismatch(_))));
    }

    #[test]
    fn dropped_dir_leaves_nothing() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("run");
        {
            let mut dir = ArtifactDir::create(&out).unwrap();
            dir.write_bytes("a.txt", b"abc").unwrap();
        }
        assert!(!out.exists());
        assert!(!tmp.path().join("run.partial").exists());
    }

    #[test]
    fn refuses_foreign_directory() {
        let tmp = tempfile::tempdir().unwrap();
        fs::write(tmp.path().join("notes.txt"), "keep me").unwrap();
        assert!(matches!(ArtifactDir::create(tmp.path()), Err(ManifestError::Occupied(_))));
    }
}
