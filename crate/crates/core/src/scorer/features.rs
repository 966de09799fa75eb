use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{EssayRecord, FeatureManifest, FeatureVector, PanelDataset};

/// Which blocks of the version features enter the design matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSubset {
    pub embedding: bool,
    pub style: bool,
    pub extras: bool,
    /// One-hot categorical covariates (prompt and declared demographics).
    pub covariates: bool,
}

impl Default for FeatureSubset {
    fn default() -> Self {
        FeatureSubset {
            embedding: true,
            style: true,
            extras: true,
            covariates: true,
        }
    }
}

impl FeatureSubset {
    pub fn embedding_only() -> Self {
        FeatureSubset {
            embedding: true,
            style: false,
            extras: false,
            covariates: false,
        }
    }

    pub fn style_only() -> Self {
        FeatureSubset {
            embedding: false,
            style: true,
            extras: false,
            covariates: false,
        }
    }

    pub fn embedding_and_style() -> Self {
        FeatureSubset {
            embedding: true,
            style: true,
            extras: false,
            covariates: false,
        }
    }
}

/// Maps an essay's covariates and a version's features to a design row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEncoder {
    pub embedding_dim: usize,
    pub style_columns: Vec<String>,
    pub extra_columns: Vec<String>,
    pub subset: FeatureSubset,
    /// (covariate name, sorted levels) for one-hot blocks.
    pub categorical: Vec<(String, Vec<String>)>,
}

impl FeatureEncoder {
    /// Levels are collected over every essay so fold models share one layout.
    pub fn from_dataset(ds: &PanelDataset, subset: FeatureSubset) -> Self {
        let m = ds.manifest();
        let mut categorical = Vec::new();
        if subset.covariates {
            let names = std::iter::once("prompt_name".to_string()).chain(m.covariates.iter().cloned());
            for name in names {
                let levels: BTreeSet<String> = ds
                    .essays()
                    .iter()
                    .filter_map(|e| e.covariate(&name).map(String::from))
                    .collect();
                if levels.len() > 1 {
                    categorical.push((name, levels.into_iter().collect()));
                }
            }
        }
        FeatureEncoder {
            embedding_dim: m.embedding_dim,
            style_columns: m.style_columns.clone(),
            extra_columns: m.extra_columns.clone(),
            subset,
            categorical,
        }
    }

    pub fn width(&self) -> usize {
        let s = &self.subset;
        let mut w = 0;
        if s.embedding {
            w += self.embedding_dim;
        }
        if s.style {
            w += self.style_columns.len();
        }
        if s.extras {
            w += self.extra_columns.len();
        }
        w + self.categorical.iter().map(|(_, l)| l.len()).sum::<usize>()
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.width());
        if self.subset.embedding {
            out.extend((0..self.embedding_dim).map(|i| format!("emb_{i}")));
        }
        if self.subset.style {
            out.extend(self.style_columns.iter().cloned());
        }
        if self.subset.extras {
            out.extend(self.extra_columns.iter().cloned());
        }
        for (name, levels) in &self.categorical {
            out.extend(levels.iter().map(|l| format!("{name}={l}")));
        }
        out
    }

    pub fn encode_into(&self, essay: &EssayRecord, f: &FeatureVector, out: &mut Vec<f64>) {
        if self.subset.embedding {
            out.extend_from_slice(&f.embedding);
        }
        if self.subset.style {
            out.extend_from_slice(&f.style);
        }
        if self.subset.extras {
            out.extend_from_slice(&f.extras);
        }
        for (name, levels) in &self.categorical {
            let v = essay.covariate(name);
            out.extend(levels.iter().map(|l| if Some(l.as_str()) == v { 1.0 } else { 0.0 }));
        }
    }

    pub fn encode(&self, essay: &EssayRecord, f: &FeatureVector) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.width());
        self.encode_into(essay, f, &mut out);
        out
    }

    /// `true` when the dataset's feature layout matches this encoder's.
    pub fn matches(&self, m: &FeatureManifest) -> bool {
        self.embedding_dim == m.embedding_dim
            && self.style_columns == m.style_columns
            && self.extra_columns == m.extra_columns
    }

    /// Hex SHA-256 over the layout and one-hot levels.
    pub fn manifest_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("encoder serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Hash of a dataset's feature layout, comparable across encoders built from it.
pub fn layout_hash(m: &FeatureManifest) -> String {
    let key = (m.embedding_dim, &m.style_columns, &m.extra_columns);
    hex::encode(Sha256::digest(serde_json::to_vec(&key).expect("layout serializes")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixtures::tiny;

    #[test]
    fn encoding_layout() {
        let ds = tiny();
        let enc = FeatureEncoder::from_dataset(&ds, FeatureSubset::default());
        // single prompt and single grade level carry no information
        assert!(enc.categorical.is_empty());
        assert_eq!(enc.column_names(), ["emb_0", "sty_0"]);
        let e = &ds.essays()[0];
        let v = ds.original_of(0).unwrap();
        assert_eq!(enc.encode(e, &v.features), vec![1.0, 0.5]);
        let emb = FeatureEncoder::from_dataset(&ds, FeatureSubset::embedding_only());
        assert_eq!(emb.encode(e, &v.features), vec![1.0]);
        assert_ne!(enc.manifest_hash(), emb.manifest_hash());
    }
}
