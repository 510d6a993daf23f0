//! JSON-lines manifest: one `{image, caption, category, lineage?, origin?}`
//! object per line, image paths relative to the manifest's directory.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CaptionSample, Dataset};
use crate::error::{Error, Result};
use crate::prompt::PromptCatalog;

pub const CATALOG_FILE: &str = "catalog.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    image: String,
    caption: String,
    category: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    lineage: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    origin: Option<String>,
}

fn path_string(p: &Path) -> String {
    p.to_string_lossy().replace('\\', "/")
}

/// Parses manifest text without touching the filesystem.
pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<CaptionSample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |detail: String| Error::Manifest {
            path: path.to_path_buf(),
            line: line_no,
            detail,
        };
        let r: Record = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if r.image.trim().is_empty() {
            return Err(err("empty image path".into()));
        }
        if r.caption.trim().is_empty() {
            return Err(err("empty caption".into()));
        }
        if r.category.trim().is_empty() {
            return Err(err("empty category".into()));
        }
        out.push(CaptionSample {
            image: r.image.into(),
            caption: r.caption,
            category: r.category,
            lineage: r.lineage,
            origin: r.origin.map(PathBuf::from),
        });
    }
    Ok(out)
}

/// Loads a manifest, checks every referenced image exists and resolves the
/// label catalog from a `catalog.json` sidecar (or sorted distinct categories).
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let samples = parse_manifest(&text, path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    for (i, s) in samples.iter().enumerate() {
        if !root.join(&s.image).is_file() {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line: line_of(&text, i),
                detail: format!("image {} not found", s.image.display()),
            });
        }
    }
    let sidecar = root.join(CATALOG_FILE);
    let catalog = if sidecar.is_file() {
        let raw = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let c: PromptCatalog = serde_json::from_str(&raw)?;
        c.validate()?;
        c
    } else {
        let labels: BTreeSet<&str> = samples.iter().map(|s| s.category.as_str()).collect();
        PromptCatalog::from_labels(labels.into_iter().map(String::from).collect())?
    };
    for (i, s) in samples.iter().enumerate() {
        if catalog.index_of(&s.category).is_none() {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line: line_of(&text, i),
                detail: format!("category {:?} missing from catalog", s.category),
            });
        }
    }
    Ok(Dataset { root, samples, catalog })
}

/// 1-based line of the `index`-th non-blank record.
fn line_of(text: &str, index: usize) -> usize {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .nth(index)
        .map_or(0, |(i, _)| i + 1)
}

/// Writes `manifest.jsonl` and `catalog.json` into `dir`.
pub fn write_manifest(dir: &Path, samples: &[CaptionSample], catalog: &PromptCatalog) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("manifest.jsonl");
    let mut buf = Vec::new();
    for s in samples {
        let r = Record {
            image: path_string(&s.image),
            caption: s.caption.clone(),
            category: s.category.clone(),
            lineage: s.lineage.clone(),
            origin: s.origin.as_deref().map(path_string),
        };
        serde_json::to_writer(&mut buf, &r)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&path, e))?;
    let cat_path = dir.join(CATALOG_FILE);
    let json = serde_json::to_string_pretty(catalog)?;
    std::fs::write(&cat_path, json).map_err(|e| Error::io(&cat_path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reports_line_of_bad_record() {
        let text = "{\"image\":\"a.png\",\"caption\":\"x\",\"category\":\"c\"}\n\n{\"image\":\"b.png\"}\n";
        match parse_manifest(text, Path::new("m.jsonl")) {
            Err(Error::Manifest { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_unknown_fields_and_empty_captions() {
        let p = Path::new("m");
        assert!(parse_manifest("{\"image\":\"a\",\"caption\":\"x\",\"category\":\"c\",\"z\":1}", p).is_err());
        assert!(parse_manifest("{\"image\":\"a\",\"caption\":\" \",\"category\":\"c\"}", p).is_err());
    }

    #[test]
    fn round_trip_and_missing_image() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = CaptionSample::new("images/a.png", "a deity", "deity");
        s.lineage = vec!["flip(horizontal)".into()];
        s.origin = Some("images/o.png".into());
        let catalog = PromptCatalog::from_labels(vec!["deity".into()]).unwrap();
        let path = write_manifest(dir.path(), std::slice::from_ref(&s), &catalog).unwrap();
        match load_manifest(&path) {
            Err(Error::Manifest { line, detail, .. }) => {
                assert_eq!(line, 1);
                assert!(detail.contains("not found"));
            }
            other => panic!("{other:?}"),
        }
        crate::data::image_io::save_png(&crate::tensor::Tensor::zeros(&[2, 2, 3]), &dir.path().join("images/a.png")).unwrap();
        let ds = load_manifest(&path).unwrap();
        assert_eq!(ds.samples, vec![s]);
        assert_eq!(ds.catalog, catalog);
    }

    #[test]
    fn catalog_falls_back_to_sorted_categories() {
        let dir = tempfile::tempdir().unwrap();
        let img = crate::tensor::Tensor::zeros(&[2, 2, 3]);
        crate::data::image_io::save_png(&img, &dir.path().join("a.png")).unwrap();
        let text = "{\"image\":\"a.png\",\"caption\":\"x\",\"category\":\"zeta\"}\n{\"image\":\"a.png\",\"caption\":\"y\",\"category\":\"alpha\"}\n";
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, text).unwrap();
        let ds = load_manifest(&path).unwrap();
        assert_eq!(ds.catalog.labels, vec!["alpha", "zeta"]);
    }
}
