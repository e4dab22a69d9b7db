use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::formats::{decode_grid, encode_grid};
use crate::dataset::{validate_items, DatasetItem};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Grid file, relative to the manifest's directory unless absolute.
    pub path: String,
    #[serde(default = "one")]
    pub weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<u32>,
}

fn one() -> f64 {
    1.0
}

/// Dataset listing: shared grid shape and `K`, optional class names, items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub shape: Vec<usize>,
    pub k: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub classes: Vec<String>,
    pub items: Vec<ManifestEntry>,
}

fn parse_error(e: serde_json::Error, text: &str) -> Error {
    // convert line/column into a byte offset
    let offset = text
        .split_inclusive('\n')
        .take(e.line().saturating_sub(1))
        .map(str::len)
        .sum::<usize>()
        + e.column().saturating_sub(1);
    Error::format(offset, format!("manifest: {e}"))
}

/// Parse a manifest and load every grid it references.
pub fn load_manifest(path: &Path) -> Result<(Manifest, Vec<DatasetItem>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::from(e).context(&path.display().to_string()))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| parse_error(e, &text))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut items = Vec::with_capacity(manifest.items.len());
    for entry in &manifest.items {
        let file = resolve(base, &entry.path);
        let bytes = fs::read(&file).map_err(|e| Error::from(e).context(&file.display().to_string()))?;
        let grid = decode_grid(&bytes).map_err(|e| e.context(&entry.path))?;
        if grid.shape().dims() != manifest.shape.as_slice() || grid.k() != manifest.k {
            return Err(Error::Shape(format!(
                "{}: grid shape or K differs from the manifest header",
                entry.id
            )));
        }
        if let (Some(c), false) = (entry.class_id, manifest.classes.is_empty()) {
            if c as usize >= manifest.classes.len() {
                return Err(Error::Validation(format!("{}: class id {c} out of range", entry.id)));
            }
        }
        items.push(DatasetItem {
            id: entry.id.clone(),
            grid,
            weight: entry.weight,
            class: entry.class_id,
        });
    }
    validate_items(&items)?;
    Ok((manifest, items))
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Write each item as `<dir>/<id>.dvxg` plus `<dir>/manifest.json`.
pub fn write_dataset(dir: &Path, items: &[DatasetItem], class_names: &[String]) -> Result<PathBuf> {
    let (shape, k) = validate_items(items)?;
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(items.len());
    for item in items {
        let name = format!("{}.dvxg", item.id);
        fs::write(dir.join(&name), encode_grid(&item.grid))?;
        entries.push(ManifestEntry {
            id: item.id.clone(),
            path: name,
            weight: item.weight,
            class_id: item.class,
        });
    }
    let manifest = Manifest {
        shape: shape.dims().to_vec(),
        k,
        classes: class_names.to_vec(),
        items: entries,
    };
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest).expect("serializable");
    text.push('\n');
    fs::write(&path, text)?;
    Ok(path)
}
