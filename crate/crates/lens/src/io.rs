//! Small file helpers shared by the formats.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::FORMAT_VERSION;

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let tmp = tmp_sibling(path);
    fs::write(&tmp, bytes).map_err(Error::io(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::io(path))
}

fn tmp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// `value` as a JSON object with a leading `format_version` field.
pub fn versioned<T: Serialize>(value: &T) -> serde_json::Value {
    let inner = serde_json::to_value(value).expect("serializable");
    let mut obj = serde_json::Map::new();
    obj.insert("format_version".into(), FORMAT_VERSION.into());
    match inner {
        serde_json::Value::Object(m) => obj.extend(m.into_iter().filter(|(k, _)| k != "format_version")),
        other => {
            obj.insert("data".into(), other);
        }
    }
    serde_json::Value::Object(obj)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(&versioned(value)).expect("serializable");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let tmp = tmp_sibling(path);
    let file = fs::File::create(&tmp).map_err(Error::io(&tmp))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| Error::format(&tmp, e))?;
        w.write_all(b"\n").map_err(Error::io(&tmp))?;
    }
    w.flush().map_err(Error::io(&tmp))?;
    drop(w);
    fs::rename(&tmp, path).map_err(Error::io(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(Error::io(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// Appends one JSON line (used for per-epoch metrics).
pub fn append_jsonl<T: Serialize>(path: &Path, item: &T) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(Error::io(path))?;
    let mut line = serde_json::to_vec(item).expect("serializable");
    line.push(b'\n');
    f.write_all(&line).map_err(Error::io(path))
}

/// CSV with a `format_version` first column on every row.
pub struct CsvOut {
    path: PathBuf,
    writer: csv::Writer<fs::File>,
}

impl CsvOut {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        let mut writer = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
        let mut row = vec!["format_version"];
        row.extend_from_slice(header);
        writer.write_record(&row).map_err(|e| Error::format(path, e))?;
        Ok(Self { path: path.to_path_buf(), writer })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut row = vec![FORMAT_VERSION.to_string()];
        row.extend(fields.into_iter().map(Into::into));
        self.writer.write_record(&row).map_err(|e| Error::format(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush().map_err(Error::io(&self.path))
    }
}

/// Empty string for missing values.
pub fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}
