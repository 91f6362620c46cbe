//! File-based data exchange between driver tasks.
//!
//! Every file a reader may look at is replaced by rename, never rewritten in
//! place, so a concurrent reader sees either the old or the new content.

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, Context};

use crate::model::TaskSpec;

/// Replaces `path` with `contents` in one rename.
pub fn write_atomic(path: &Path, contents: &str) -> io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents.as_bytes())?;
    tmp.as_file().sync_data()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// One value per line; blank lines are ignored.
pub fn read_values(path: &Path) -> anyhow::Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.parse::<f64>()
                .with_context(|| format!("{}:{}: not a number: {l:?}", path.display(), i + 1))
        })
        .collect()
}

/// Like [`read_values`], but a missing file is an empty series.
pub fn read_series(path: &Path) -> anyhow::Result<Vec<f64>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    read_values(path)
}

pub fn format_values(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v}\n")).collect()
}

/// Stores `value` as entry `index` of the series at `path`, dropping any
/// later entries. A rerun of the same step therefore overwrites instead of
/// appending twice.
pub fn set_series_entry(path: &Path, index: usize, value: f64) -> anyhow::Result<()> {
    let mut values = read_series(path)?;
    if values.len() < index {
        return Err(anyhow!(
            "{}: entry {index} written before entry {}",
            path.display(),
            values.len()
        ));
    }
    values.truncate(index);
    values.push(value);
    write_atomic(path, &format_values(&values))?;
    Ok(())
}

/// Newline-separated paths, relative to the shared data directory.
pub fn read_manifest(path: &Path) -> io::Result<Vec<String>> {
    match std::fs::read_to_string(path) {
        Ok(text) => Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e),
    }
}

/// Adds `entry` unless already listed. Callers must be the manifest's only writer.
pub fn add_to_manifest(path: &Path, entry: &str) -> io::Result<()> {
    let mut entries = read_manifest(path)?;
    if entries.iter().any(|e| e == entry) {
        return Ok(());
    }
    entries.push(entry.to_string());
    entries.sort();
    write_atomic(path, &entries.iter().map(|e| format!("{e}\n")).collect::<String>())
}

/// Sums every readable data file listed in `entries`. Files that are missing
/// or malformed are skipped with a warning; the caller is reading a
/// snapshot other tasks keep extending.
pub fn sum_entries(shared: &Path, entries: &[String]) -> (f64, u64) {
    let mut sum = 0.0;
    let mut n = 0;
    for e in entries {
        match read_values(&shared.join(e)) {
            Ok(v) => {
                sum += v.iter().sum::<f64>();
                n += v.len() as u64;
            }
            Err(err) => log::warn!("skipping unreadable data file: {err:#}"),
        }
    }
    (sum, n)
}

/// `key=value` task arguments.
#[derive(Debug, Clone, Default)]
pub struct KernelArgs(BTreeMap<String, String>);

impl KernelArgs {
    pub fn parse(spec: &TaskSpec) -> anyhow::Result<Self> {
        spec.arguments
            .iter()
            .map(|a| {
                a.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| anyhow!("{}: argument {a:?} is not key=value", spec.uid))
            })
            .collect::<anyhow::Result<_>>()
            .map(Self)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> anyhow::Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.0.get(key).ok_or_else(|| anyhow!("missing argument {key}"))?;
        raw.parse().map_err(|e| anyhow!("argument {key}={raw}: {e}"))
    }

    pub fn str(&self, key: &str) -> anyhow::Result<&str> {
        self.0.get(key).map(String::as_str).ok_or_else(|| anyhow!("missing argument {key}"))
    }
}

/// Renders `key=value` arguments in a stable order.
pub fn args<'a>(pairs: impl IntoIterator<Item = (&'a str, String)>) -> Vec<String> {
    pairs.into_iter().map(|(k, v)| format!("{k}={v}")).collect()
}

pub fn rel(path: &Path, shared: &Path) -> String {
    path.strip_prefix(shared).unwrap_or(path).to_string_lossy().into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn series_entries_overwrite_on_rerun() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("est");
        set_series_entry(&p, 0, 1.5).unwrap();
        set_series_entry(&p, 1, 2.5).unwrap();
        set_series_entry(&p, 1, 3.0).unwrap();
        assert_eq!(read_series(&p).unwrap(), [1.5, 3.0]);
        assert!(set_series_entry(&p, 5, 0.0).is_err());
    }

    #[test]
    fn manifest_is_a_sorted_set() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest");
        add_to_manifest(&p, "b").unwrap();
        add_to_manifest(&p, "a").unwrap();
        add_to_manifest(&p, "b").unwrap();
        assert_eq!(read_manifest(&p).unwrap(), ["a", "b"]);
    }

    #[test]
    fn unreadable_entries_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        write_atomic(&dir.path().join("ok"), "1\n2\n").unwrap();
        write_atomic(&dir.path().join("bad"), "1\nx\n").unwrap();
        let (sum, n) = sum_entries(dir.path(), &["ok".into(), "bad".into(), "missing".into()]);
        assert_eq!((sum, n), (3.0, 2));
    }

    #[test]
    fn values_roundtrip_exactly() {
        let v = [0.1, -1e-300, 12345.678_901_234_5];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v");
        write_atomic(&p, &format_values(&v)).unwrap();
        assert_eq!(read_values(&p).unwrap(), v);
    }
}
