use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub label: String,
    pub duration_s: f64,
}

/// Tab-separated utterance list `id<TAB>path<TAB>label<TAB>duration_s`.
///
/// Labels are interned in sorted order, so class `k` is the `k`-th distinct
/// label alphabetically.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    entries: Vec<ManifestEntry>,
    labels: Vec<String>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for e in &entries {
            if !ids.insert(e.id.as_str()) {
                return Err(Error::Config(format!("duplicate utterance id {:?}", e.id)));
            }
        }
        let labels = entries.iter().map(|e| e.label.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        Ok(Self { entries, labels })
    }

    /// Parses manifest text. Relative paths are joined onto `base`; blank
    /// lines and lines starting with `#` are skipped.
    pub fn parse(text: &str, source: &Path, base: Option<&Path>) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Manifest { path: source.to_path_buf(), line, msg };
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(err(i + 1, format!("expected 4 tab-separated fields, found {}", fields.len())));
            }
            if fields[0].is_empty() || fields[2].is_empty() {
                return Err(err(i + 1, "empty id or label".into()));
            }
            let duration_s: f64 =
                fields[3].trim().parse().map_err(|_| err(i + 1, format!("bad duration {:?}", fields[3])))?;
            if !(duration_s.is_finite() && duration_s > 0.0) {
                return Err(err(i + 1, format!("duration must be positive, got {duration_s}")));
            }
            let mut path = PathBuf::from(fields[1]);
            if let (Some(base), true) = (base, path.is_relative()) {
                path = base.join(path);
            }
            entries.push(ManifestEntry { id: fields[0].to_string(), path, label: fields[2].to_string(), duration_s });
        }
        Self::new(entries).map_err(|e| err(0, e.to_string()))
    }

    /// Reads a manifest file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, path, path.parent())
    }

    pub fn to_tsv(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\t{}\n", e.id, e.path.display(), e.label, e.duration_s))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    /// Class indices of every entry under `labels` (usually a checkpoint's
    /// label list). Fails on a label the list does not contain.
    pub fn class_ids(&self, labels: &[String]) -> Result<Vec<usize>> {
        self.entries
            .iter()
            .map(|e| {
                labels
                    .iter()
                    .position(|l| *l == e.label)
                    .ok_or_else(|| Error::Config(format!("utterance {} has unknown label {:?}", e.id, e.label)))
            })
            .collect()
    }
}

/// Location of an utterance's ADIF file inside a feature directory.
pub fn feature_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.adif"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Manifest> {
        Manifest::parse(text, Path::new("m.tsv"), Some(Path::new("/data")))
    }

    #[test]
    fn labels_are_sorted_and_contiguous() {
        let m = parse("a\tx.wav\tLEV\t2.0\nb\t/abs/y.wav\tEGY\t1.5\n\n# note\nc\tz.wav\tLEV\t3\n").unwrap();
        assert_eq!(m.labels(), ["EGY", "LEV"]);
        assert_eq!(m.class_ids(m.labels()).unwrap(), vec![1, 0, 1]);
        assert_eq!(m.entries()[0].path, PathBuf::from("/data/x.wav"));
        assert_eq!(m.entries()[1].path, PathBuf::from("/abs/y.wav"));
        assert_eq!(m.label_index("LEV"), Some(1));
        assert_eq!(m.label_index("GLF"), None);
    }

    #[test]
    fn round_trips_through_tsv() {
        let m = parse("a\t/p/x.wav\tk\t2.5\n").unwrap();
        let again = Manifest::parse(&m.to_tsv(), Path::new("m.tsv"), None).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        for (text, line) in [
            ("a\tx\tk\t1\nb\tx\tk\n", 2),
            ("a\tx\tk\tfast\n", 1),
            ("a\tx\tk\t-1\n", 1),
            ("\tx\tk\t1\n", 1),
        ] {
            match parse(text) {
                Err(Error::Manifest { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
        assert!(parse("a\tx\tk\t1\na\ty\tk\t1\n").is_err());
    }

    #[test]
    fn unknown_label_against_foreign_list() {
        let m = parse("a\tx\tk\t1\n").unwrap();
        assert!(m.class_ids(&["j".to_string()]).is_err());
    }
}
