//! Manifest ingestion: labels.csv rows of `filename,label`, validated on
//! load.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::ferhead::NUM_EXPRESSIONS;
use crate::image::Image;

#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub path: PathBuf,
    pub label: usize,
    pub image: Image,
}

/// An ingested dataset. Iteration order is sorted by filename, so two
/// manifests listing the same files in different orders train identically.
#[derive(Debug, Clone)]
pub struct Dataset {
    items: Vec<DatasetItem>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[DatasetItem] {
        &self.items
    }

    pub fn images(&self) -> Vec<Image> {
        self.items.iter().map(|i| i.image.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.label).collect()
    }
}

/// Loads and validates a manifest. Each failure carries its own error code:
/// missing manifest, bad label (with row number), unreadable image.
pub fn ingest(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    if !manifest_path.is_file() {
        return Err(Error::ManifestMissing(manifest_path.to_path_buf()));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|e| Error::io(manifest_path, e))?;
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (filename, label_text) = line.rsplit_once(',').ok_or_else(|| Error::BadLabel {
            row,
            label: line.to_string(),
        })?;
        let label: usize = label_text.trim().parse().map_err(|_| Error::BadLabel {
            row,
            label: label_text.to_string(),
        })?;
        if label >= NUM_EXPRESSIONS {
            return Err(Error::BadLabel {
                row,
                label: label_text.to_string(),
            });
        }
        let path = base.join(filename.trim());
        let image = Image::load_png(&path).map_err(|e| Error::UnreadableImage {
            row,
            path: path.clone(),
            reason: e.to_string(),
        })?;
        items.push(DatasetItem { path, label, image });
    }
    if items.is_empty() {
        return Err(Error::EmptyInput("manifest has no rows"));
    }
    items.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(Dataset { items })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toydata::generate_toy_dataset;
    use crate::util::stream_rng;
    use rand::seq::SliceRandom;

    fn fresh_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("lofer_ds_{tag}"));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn valid_manifest_loads_fully() {
        let dir = fresh_dir("valid");
        let manifest = generate_toy_dataset(10, 3, &dir).unwrap();
        let ds = ingest(&manifest).unwrap();
        assert_eq!(ds.len(), 10);
        for item in ds.items() {
            assert!(item.label < NUM_EXPRESSIONS);
        }
    }

    #[test]
    fn bad_label_reports_row_number() {
        let dir = fresh_dir("badlabel");
        let manifest = generate_toy_dataset(3, 4, &dir).unwrap();
        let mut text = std::fs::read_to_string(&manifest).unwrap();
        text.push_str("face_0000_c0.png,9\n");
        std::fs::write(&manifest, text).unwrap();
        match ingest(&manifest) {
            Err(Error::BadLabel { row, label }) => {
                assert_eq!(row, 4);
                assert_eq!(label, "9");
            }
            other => panic!("expected BadLabel, got {other:?}"),
        }
    }

    #[test]
    fn missing_manifest_and_missing_image_are_distinct() {
        let dir = fresh_dir("missing");
        assert!(matches!(
            ingest(dir.join("absent.csv")),
            Err(Error::ManifestMissing(_))
        ));
        std::fs::write(dir.join("labels.csv"), "ghost.png,2\n").unwrap();
        match ingest(dir.join("labels.csv")) {
            Err(Error::UnreadableImage { row, .. }) => assert_eq!(row, 1),
            other => panic!("expected UnreadableImage, got {other:?}"),
        }
    }

    /// Shuffling the manifest rows must not change the epoch batch order:
    /// iteration is filename-sorted and the shuffle stream depends only on
    /// the seed.
    #[test]
    fn shuffled_manifest_same_batch_sequence() {
        let dir = fresh_dir("shuffle");
        let manifest = generate_toy_dataset(12, 5, &dir).unwrap();
        let ds1 = ingest(&manifest).unwrap();

        let text = std::fs::read_to_string(&manifest).unwrap();
        let mut rows: Vec<&str> = text.lines().collect();
        let mut rng = stream_rng(99, "manifest-shuffle", 0);
        rows.shuffle(&mut rng);
        std::fs::write(&manifest, rows.join("\n")).unwrap();
        let ds2 = ingest(&manifest).unwrap();

        let order = |ds: &Dataset, epoch: u64| -> Vec<PathBuf> {
            let mut idx: Vec<usize> = (0..ds.len()).collect();
            let mut rng = stream_rng(7, "epoch-order", epoch);
            idx.shuffle(&mut rng);
            idx.iter().map(|&i| ds.items()[i].path.clone()).collect()
        };
        for epoch in 0..3 {
            assert_eq!(order(&ds1, epoch), order(&ds2, epoch));
        }
    }
}
