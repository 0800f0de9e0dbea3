//! On-disk dataset store: one JSON file per dataset plus an index manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::summary::HierarchicalDataset;
use crate::{Error, Result};

pub const STORE_SCHEMA: u32 = 1;
pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreEntry {
    pub file: String,
    pub family: String,
    pub model_index: Option<usize>,
    pub seed: u64,
    pub groups: usize,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreIndex {
    pub schema_version: u32,
    pub entries: Vec<StoreEntry>,
}

/// Writes every dataset as `data-XXXXXX.json` and the index manifest into `dir`.
pub fn write_store(dir: &Path, datasets: &[HierarchicalDataset]) -> Result<StoreIndex> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(datasets.len());
    for (i, d) in datasets.iter().enumerate() {
        let file = format!("data-{i:06}.json");
        d.save(&dir.join(&file))?;
        entries.push(StoreEntry {
            file,
            family: d.meta.family.clone(),
            model_index: d.meta.model_index,
            seed: d.meta.seed,
            groups: d.num_groups(),
            rows: d.total_rows(),
        });
    }
    let index = StoreIndex {
        schema_version: STORE_SCHEMA,
        entries,
    };
    fs::write(dir.join(INDEX_FILE), serde_json::to_string_pretty(&index)?)?;
    Ok(index)
}

pub fn read_index(dir: &Path) -> Result<StoreIndex> {
    let index: StoreIndex = serde_json::from_str(&fs::read_to_string(dir.join(INDEX_FILE))?)?;
    if index.schema_version != STORE_SCHEMA {
        return Err(Error::config(format!(
            "store schema version {} is not supported (expected {STORE_SCHEMA})",
            index.schema_version
        )));
    }
    Ok(index)
}

/// Loads every dataset listed in the index, in index order.
pub fn read_store(dir: &Path) -> Result<Vec<HierarchicalDataset>> {
    read_index(dir)?
        .entries
        .iter()
        .map(|e| HierarchicalDataset::load(&dir.join(&e.file)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::summary::DatasetMeta;

    #[test]
    fn round_trip_and_empty_store() {
        let tmp = tempfile::tempdir().unwrap();
        let meta = DatasetMeta {
            family: "sdt".into(),
            model_index: Some(1),
            seed: 9,
        };
        let d = HierarchicalDataset::from_flat(2, vec![vec![0.0, 1.0, 1.0, 1.0], vec![1.0, 0.0]], meta).unwrap();
        let idx = write_store(tmp.path(), &[d.clone(), d.clone()]).unwrap();
        assert_eq!(idx.entries.len(), 2);
        assert_eq!(idx.entries[0].rows, 3);
        assert_eq!(read_store(tmp.path()).unwrap(), vec![d.clone(), d]);

        let empty = tmp.path().join("empty");
        write_store(&empty, &[]).unwrap();
        assert!(read_store(&empty).unwrap().is_empty());
    }
}
