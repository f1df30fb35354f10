//! Output directories: every file written is listed in `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::CliError;

/// Bumped whenever a CSV header or manifest field changes.
pub const SCHEMA_VERSION: u32 = 1;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub kind: String,
    pub description: String,
    #[serde(default)]
    pub columns: Option<Vec<String>>,
    /// False for files that change between identical runs (wall time).
    pub deterministic: bool,
}

#[derive(Debug, Serialize)]
struct Manifest<'a, T: Serialize> {
    schema_version: u32,
    toolkit: &'static str,
    version: &'static str,
    command: &'a str,
    config: &'a ExperimentConfig,
    #[serde(flatten)]
    body: &'a T,
    files: &'a [FileEntry],
}

#[derive(Deserialize)]
struct Listing {
    files: Vec<FileEntry>,
}

pub struct OutputDir {
    root: PathBuf,
    files: Vec<FileEntry>,
}

impl OutputDir {
    /// Creates `root`, removing files listed by a manifest already there so
    /// none of them outlives the listing that described it.
    pub fn open(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(CliError::io(format!("creating {}", root.display())))?;
        let previous = root.join(MANIFEST);
        if let Ok(text) = fs::read_to_string(&previous) {
            if let Ok(listing) = serde_json::from_str::<Listing>(&text) {
                for entry in listing.files {
                    let path = root.join(&entry.path);
                    if path.parent() == Some(root) && path.is_file() {
                        fs::remove_file(&path).map_err(CliError::io(format!("removing {}", path.display())))?;
                    }
                }
            }
            fs::remove_file(&previous).map_err(CliError::io(format!("removing {}", previous.display())))?;
        }
        Ok(Self { root: root.to_path_buf(), files: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, name: &str, kind: &str, description: &str, bytes: &[u8]) -> Result<(), CliError> {
        self.write_entry(
            FileEntry {
                path: name.into(),
                kind: kind.into(),
                description: description.into(),
                columns: None,
                deterministic: true,
            },
            bytes,
        )
    }

    pub fn write_csv(&mut self, name: &str, description: &str, columns: &[&str], bytes: &[u8]) -> Result<(), CliError> {
        self.write_entry(
            FileEntry {
                path: name.into(),
                kind: "csv".into(),
                description: description.into(),
                columns: Some(columns.iter().map(|c| c.to_string()).collect()),
                deterministic: true,
            },
            bytes,
        )
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, description: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
        text.push('\n');
        self.write(name, "json", description, text.as_bytes())
    }

    /// Wall time goes to its own file so the other outputs stay byte-identical.
    pub fn write_timing(&mut self, seconds: f64) -> Result<(), CliError> {
        self.write_entry(
            FileEntry {
                path: "timing.txt".into(),
                kind: "text".into(),
                description: "wall-clock seconds of the command".into(),
                columns: None,
                deterministic: false,
            },
            format!("wall_time_seconds {seconds:.3}\n").as_bytes(),
        )
    }

    fn write_entry(&mut self, entry: FileEntry, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.root.join(&entry.path);
        fs::write(&path, bytes).map_err(CliError::io(format!("writing {}", path.display())))?;
        self.files.push(entry);
        Ok(())
    }

    pub fn finish<T: Serialize>(self, command: &str, config: &ExperimentConfig, body: &T) -> Result<PathBuf, CliError> {
        // the manifest sits in the output directory, so its own path is "."
        let echo = ExperimentConfig { output_dir: PathBuf::from("."), ..config.clone() };
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            toolkit: "taskphase",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config: &echo,
            body,
            files: &self.files,
        };
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
        text.push('\n');
        let path = self.root.join(MANIFEST);
        fs::write(&path, text).map_err(CliError::io(format!("writing {}", path.display())))?;
        Ok(path)
    }
}

/// Serializes rows with a header line, in order.
pub fn csv_bytes<T: Serialize>(rows: &[T], columns: &[&str]) -> Result<Vec<u8>, CliError> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    writer.write_record(columns).map_err(|e| CliError::Runtime(e.to_string()))?;
    for row in rows {
        writer.serialize(row).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    writer.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}
