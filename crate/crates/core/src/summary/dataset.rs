use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DatasetMeta {
    pub family: String,
    /// Index of the generating model, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_index: Option<usize>,
    pub seed: u64,
}

/// Two-level nested data: `M` groups of `N_m` observations, each a `D`-vector.
///
/// Observations are stored row-major per group. An optional mask marks each
/// observation row as observed (`true`) or missing; masked rows hold zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DatasetJson", into = "DatasetJson")]
pub struct HierarchicalDataset {
    dim: usize,
    groups: Vec<Vec<f64>>,
    mask: Option<Vec<Vec<bool>>>,
    pub meta: DatasetMeta,
}

#[derive(Serialize, Deserialize)]
struct DatasetJson {
    meta: DatasetMeta,
    groups: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<Vec<Vec<u8>>>,
}

impl TryFrom<DatasetJson> for HierarchicalDataset {
    type Error = Error;

    fn try_from(j: DatasetJson) -> Result<Self> {
        let mut d = HierarchicalDataset::new(j.groups, j.meta)?;
        if let Some(mask) = j.mask {
            let mask = mask
                .into_iter()
                .map(|g| g.into_iter().map(|v| v != 0).collect())
                .collect();
            d.set_mask(mask)?;
        }
        Ok(d)
    }
}

impl From<HierarchicalDataset> for DatasetJson {
    fn from(d: HierarchicalDataset) -> Self {
        let groups = (0..d.num_groups())
            .map(|m| d.group_rows(m).map(<[f64]>::to_vec).collect())
            .collect();
        let mask = d
            .mask
            .map(|mk| mk.into_iter().map(|g| g.into_iter().map(u8::from).collect()).collect());
        DatasetJson {
            meta: d.meta,
            groups,
            mask,
        }
    }
}

impl HierarchicalDataset {
    pub fn new(groups: Vec<Vec<Vec<f64>>>, meta: DatasetMeta) -> Result<Self> {
        let dim = groups
            .first()
            .and_then(|g| g.first())
            .map(Vec::len)
            .ok_or_else(|| Error::shape("dataset needs at least one non-empty group"))?;
        let flat = groups
            .into_iter()
            .map(|g| {
                let mut v = Vec::with_capacity(g.len() * dim);
                for row in g {
                    if row.len() != dim {
                        return Err(Error::shape(format!(
                            "observation of dimension {} in a {dim}-D dataset",
                            row.len()
                        )));
                    }
                    v.extend(row);
                }
                Ok(v)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_flat(dim, flat, meta)
    }

    /// Builds a dataset from per-group row-major buffers of width `dim`.
    pub fn from_flat(dim: usize, groups: Vec<Vec<f64>>, meta: DatasetMeta) -> Result<Self> {
        if dim == 0 {
            return Err(Error::shape("observation dimension must be positive"));
        }
        if groups.is_empty() {
            return Err(Error::shape("dataset needs at least one group"));
        }
        for (m, g) in groups.iter().enumerate() {
            if g.is_empty() || g.len() % dim != 0 {
                return Err(Error::shape(format!(
                    "group {m} holds {} values, not a positive multiple of {dim}",
                    g.len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::domain(format!("group {m} contains non-finite values")));
            }
        }
        Ok(Self {
            dim,
            groups,
            mask: None,
            meta,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group_size(&self, m: usize) -> usize {
        self.groups[m].len() / self.dim
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        (0..self.num_groups()).map(|m| self.group_size(m)).collect()
    }

    pub fn total_rows(&self) -> usize {
        self.groups.iter().map(|g| g.len() / self.dim).sum()
    }

    pub fn group_values(&self, m: usize) -> &[f64] {
        &self.groups[m]
    }

    pub fn group_rows(&self, m: usize) -> impl Iterator<Item = &[f64]> + '_ {
        self.groups[m].chunks_exact(self.dim)
    }

    pub fn row(&self, m: usize, n: usize) -> &[f64] {
        &self.groups[m][n * self.dim..(n + 1) * self.dim]
    }

    pub fn mask(&self) -> Option<&[Vec<bool>]> {
        self.mask.as_deref()
    }

    pub fn is_observed(&self, m: usize, n: usize) -> bool {
        self.mask.as_ref().is_none_or(|mk| mk[m][n])
    }

    pub fn observed_count(&self, m: usize) -> usize {
        match &self.mask {
            Some(mk) => mk[m].iter().filter(|&&b| b).count(),
            None => self.group_size(m),
        }
    }

    /// Installs a mask and zeroes the masked rows. Every group must keep at
    /// least one observed row.
    pub fn set_mask(&mut self, mask: Vec<Vec<bool>>) -> Result<()> {
        if mask.len() != self.num_groups() {
            return Err(Error::shape("mask group count differs from data"));
        }
        for (m, g) in mask.iter().enumerate() {
            if g.len() != self.group_size(m) {
                return Err(Error::shape(format!("mask for group {m} has wrong length")));
            }
            if !g.iter().any(|&b| b) {
                return Err(Error::shape(format!("group {m} has no observed entries")));
            }
        }
        for (m, g) in mask.iter().enumerate() {
            for (n, &obs) in g.iter().enumerate() {
                if !obs {
                    self.groups[m][n * self.dim..(n + 1) * self.dim].fill(0.0);
                }
            }
        }
        self.mask = Some(mask);
        Ok(())
    }

    pub fn clear_mask(&mut self) {
        self.mask = None;
    }

    /// Keeps only the listed groups, in the given order (repeats allowed).
    pub fn select_groups(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::shape("dataset needs at least one group"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.num_groups()) {
            return Err(Error::shape(format!("group index {bad} out of range")));
        }
        Ok(Self {
            dim: self.dim,
            groups: indices.iter().map(|&i| self.groups[i].clone()).collect(),
            mask: self
                .mask
                .as_ref()
                .map(|mk| indices.iter().map(|&i| mk[i].clone()).collect()),
            meta: self.meta.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
