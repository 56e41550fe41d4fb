//! CSV tables, atomic file writes and run manifests.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

/// 17 significant digits; round-trips every `f64`.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Like [`num`] with an empty cell for absent values.
pub fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// In-memory CSV document with a fixed header.
#[derive(Debug, Clone)]
pub struct Csv {
    width: usize,
    text: String,
}

impl Csv {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        let mut text = String::new();
        push_row(&mut text, header);
        Self {
            width: header.len(),
            text,
        }
    }

    pub fn row<S: AsRef<str>>(&mut self, cells: &[S]) {
        assert_eq!(cells.len(), self.width, "csv row width");
        push_row(&mut self.text, cells);
    }

    pub fn as_bytes(&self) -> &[u8] {
        self.text.as_bytes()
    }
}

fn push_row<S: AsRef<str>>(text: &mut String, cells: &[S]) {
    for (j, c) in cells.iter().enumerate() {
        if j > 0 {
            text.push(',');
        }
        let c = c.as_ref();
        if c.contains([',', '"', '\n']) {
            text.push('"');
            text.push_str(&c.replace('"', "\"\""));
            text.push('"');
        } else {
            text.push_str(c);
        }
    }
    text.push('\n');
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = dir.join(format!(
        ".{}.{}.tmp",
        name.to_string_lossy(),
        std::process::id()
    ));
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    res
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Files written by one command, with their digests.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    files: Vec<(String, String)>,
}

impl OutputDir {
    pub fn create(root: &Path) -> io::Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// `name` may contain `/` for files in subdirectories that already exist.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> io::Result<()> {
        write_atomic(&self.root.join(name), bytes)?;
        self.files.push((name.to_string(), sha256_hex(bytes)));
        Ok(())
    }

    pub fn files(&self) -> &[(String, String)] {
        &self.files
    }

    pub fn paths(&self) -> Vec<PathBuf> {
        self.files.iter().map(|(n, _)| self.root.join(n)).collect()
    }
}

/// Flat `key = value` record of one invocation.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub command: String,
    pub scenario: String,
    pub scenario_sha256: String,
    pub seed: Option<u64>,
    pub paths: Option<u64>,
    pub started: u64,
    pub finished: u64,
    pub files: Vec<(String, String)>,
    pub extra: Vec<(String, String)>,
}

impl RunManifest {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: &str| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("tool", concat!("mftg ", env!("CARGO_PKG_VERSION")));
        kv("command", &self.command);
        kv("scenario", &self.scenario);
        kv("scenario_sha256", &self.scenario_sha256);
        kv(
            "seed",
            &self
                .seed
                .map(|s| s.to_string())
                .unwrap_or_else(|| "none".into()),
        );
        kv(
            "paths",
            &self
                .paths
                .map(|s| s.to_string())
                .unwrap_or_else(|| "none".into()),
        );
        kv("started_unix", &self.started.to_string());
        kv("finished_unix", &self.finished.to_string());
        for (k, v) in &self.extra {
            kv(k, v);
        }
        for (name, digest) in &self.files {
            kv(&format!("file.{name}"), digest);
        }
        out
    }
}

/// Parses a manifest back into ordered key-value pairs.
pub fn parse_manifest(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}
