//! Tab-separated dataset manifests.
//!
//! Each non-blank line is `rgb<TAB>gt` or `rgb<TAB>gt<TAB>depth`, with paths
//! resolved relative to the manifest's directory. Entries are returned
//! sorted by the rgb path so iteration order never depends on file order.

use std::fs;
use std::path::{Path, PathBuf};

use super::{DataError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub rgb: PathBuf,
    pub gt: PathBuf,
    pub depth: Option<PathBuf>,
}

pub fn read_file(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| DataError::File {
        path: path.display().to_string(),
        source: e,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    parse(&text, base).map_err(|e| e.with_path(path))
}

pub fn parse(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 2 || cols.len() > 3 || cols.iter().any(|c| c.is_empty()) {
            return Err(DataError::Manifest {
                line: idx + 1,
                msg: format!(
                    "expected 2 or 3 tab-separated paths, got {} column(s)",
                    cols.len()
                ),
            });
        }
        entries.push(ManifestEntry {
            rgb: base.join(cols[0]),
            gt: base.join(cols[1]),
            depth: cols.get(2).map(|c| base.join(c)),
        });
    }
    entries.sort_by(|a, b| a.rgb.cmp(&b.rgb));
    Ok(entries)
}

/// Serialize entries with paths relative to `base` (as written by the
/// synthetic-set generator).
pub fn render(entries: &[ManifestEntry], base: &Path) -> String {
    let mut out = String::new();
    for e in entries {
        let rel = |p: &Path| {
            p.strip_prefix(base).unwrap_or(p).display().to_string()
        };
        out.push_str(&rel(&e.rgb));
        out.push('\t');
        out.push_str(&rel(&e.gt));
        if let Some(d) = &e.depth {
            out.push('\t');
            out.push_str(&rel(d));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_two_and_three_column_rows() {
        let text = "b.ppm\tb.pgm\na.ppm\ta.pgm\tad.pgm\n";
        let got = parse(text, Path::new("/ds")).unwrap();
        assert_eq!(got.len(), 2);
        // Sorted by rgb path, so a.ppm first.
        assert_eq!(got[0].rgb, PathBuf::from("/ds/a.ppm"));
        assert_eq!(got[0].depth, Some(PathBuf::from("/ds/ad.pgm")));
        assert_eq!(got[1].rgb, PathBuf::from("/ds/b.ppm"));
        assert_eq!(got[1].depth, None);
    }

    #[test]
    fn blank_lines_and_crlf_are_tolerated() {
        let text = "x.ppm\tx.pgm\r\n\n  \ny.ppm\ty.pgm\n";
        let got = parse(text, Path::new("")).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].rgb, PathBuf::from("x.ppm"));
    }

    #[test]
    fn wrong_column_count_reports_line_number() {
        let text = "a.ppm\ta.pgm\nonly-one-column\n";
        match parse(text, Path::new("")) {
            Err(DataError::Manifest { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected manifest error, got {other:?}"),
        }
    }

    #[test]
    fn empty_column_is_rejected() {
        assert!(parse("a.ppm\t\n", Path::new("")).is_err());
        assert!(parse("a.ppm\tg.pgm\t\n", Path::new("")).is_err());
    }

    #[test]
    fn render_round_trips_through_parse() {
        let base = Path::new("/data");
        let entries = vec![
            ManifestEntry {
                rgb: base.join("img/0.ppm"),
                gt: base.join("gt/0.pgm"),
                depth: Some(base.join("d/0.pgm")),
            },
            ManifestEntry { rgb: base.join("img/1.ppm"), gt: base.join("gt/1.pgm"), depth: None },
        ];
        let text = render(&entries, base);
        let back = parse(&text, base).unwrap();
        assert_eq!(back, entries);
    }
}
