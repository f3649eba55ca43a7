//! File-backed visual feature store.
//!
//! Layout: one embedding file (`IMGEMB01`, dim = `d_v`) holding every
//! image's patch rows back to back, and a manifest with one
//! `image_id<TAB>row_offset<TAB>num_patches` line per image.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io;
use crate::types::VisualFeatureSet;

#[derive(Debug, Clone, Default)]
pub struct FeatureProvider {
    d_v: usize,
    sets: HashMap<String, VisualFeatureSet>,
}

impl FeatureProvider {
    pub fn new(d_v: usize) -> Self {
        FeatureProvider { d_v, sets: HashMap::new() }
    }

    pub fn insert(&mut self, id: impl Into<String>, v: VisualFeatureSet) -> Result<()> {
        if v.d_v() != self.d_v {
            return Err(Error::DimensionMismatch { expected: self.d_v, got: v.d_v() });
        }
        self.sets.insert(id.into(), v);
        Ok(())
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.sets.contains_key(id)
    }

    pub fn get(&self, image_id: &str) -> Result<&VisualFeatureSet> {
        self.sets.get(image_id).ok_or_else(|| Error::UnknownImage(image_id.to_string()))
    }

    pub fn load(bin: &Path, manifest: &Path) -> Result<Self> {
        let m = io::load_embeddings(bin)?;
        let mut p = FeatureProvider::new(m.dim);
        for row in io::read_tsv(manifest)? {
            let bad = || Error::Format { what: "feature manifest", detail: row.join("\t") };
            if row.len() != 3 {
                return Err(bad());
            }
            let off: usize = row[1].parse().map_err(|_| bad())?;
            let count: usize = row[2].parse().map_err(|_| bad())?;
            if count == 0 || off + count > m.rows.len() {
                return Err(bad());
            }
            let v = VisualFeatureSet::from_rows(m.dim, &m.rows[off..off + count])?;
            if p.sets.insert(row[0].clone(), v).is_some() {
                return Err(Error::DuplicateId(row[0].clone()));
            }
        }
        Ok(p)
    }

    /// Writes all sets in id order.
    pub fn save(&self, bin: &Path, manifest: &Path) -> Result<()> {
        let mut ids: Vec<&String> = self.sets.keys().collect();
        ids.sort();
        let mut rows = Vec::new();
        let mut lines = String::new();
        for id in ids {
            let v = &self.sets[id];
            lines.push_str(&format!("{id}\t{}\t{}\n", rows.len(), v.num_patches()));
            rows.extend(v.rows().map(<[f64]>::to_vec));
        }
        io::save_embeddings(bin, self.d_v, &rows)?;
        std::fs::write(manifest, lines).map_err(|e| Error::io(manifest, e))
    }
}

/// Looks up the stored patch matrix for `image_id`.
pub fn visual_features(image_id: &str, provider: &FeatureProvider) -> Result<VisualFeatureSet> {
    provider.get(image_id).cloned()
}
