//! Dataset loading, non-i.i.d. partitioning, and shared client statistics.

mod har;
mod mnist;
mod partition;
mod stats;

pub use har::load_har;
pub use mnist::load_mnist;
pub use partition::{dirichlet_partition, PartitionSpec};
pub use stats::{compute_client_stats, ClientStats, StatsMode};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A labeled dataset: features with a leading sample dimension and one
/// class id per row.
#[derive(Debug, Clone)]
pub struct Dataset {
    name: String,
    features: Tensor,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        features: Tensor,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Self> {
        let n = features.batch();
        if n == 0 {
            return Err(Error::Data("dataset has no rows".into()));
        }
        if labels.len() != n {
            return Err(Error::Data(format!(
                "{} labels for {} feature rows",
                labels.len(),
                n
            )));
        }
        if class_count == 0 {
            return Err(Error::Data("class count must be positive".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::Data(format!(
                "label {bad} outside [0, {class_count})"
            )));
        }
        Ok(Dataset {
            name: name.into(),
            features,
            labels,
            class_count,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copy the given rows into a new dataset (order preserved).
    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        if rows.is_empty() {
            return Err(Error::Data("cannot take an empty subset".into()));
        }
        let row_len = self.features.row_len();
        let data = self.features.data();
        let mut features = Vec::with_capacity(rows.len() * row_len);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            if r >= self.len() {
                return Err(Error::Data(format!("row {r} outside dataset of {}", self.len())));
            }
            features.extend_from_slice(&data[r * row_len..(r + 1) * row_len]);
            labels.push(self.labels[r]);
        }
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(&self.features.shape()[1..]);
        Dataset::new(
            self.name.clone(),
            Tensor::new(shape, features)?,
            labels,
            self.class_count,
        )
    }

    /// Histogram of labels, length `class_count`.
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.class_count];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }
}

/// Seeded uniform subsample of `fraction` of the rows (at least one), row
/// order preserved. Used by desk-scale presets; never applied to test sets.
pub fn subsample_dataset(data: &Dataset, fraction: f64, master_seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "subset fraction {fraction} outside (0, 1]"
        )));
    }
    if fraction >= 1.0 {
        return Ok(data.clone());
    }
    use rand::seq::SliceRandom;
    let keep = ((data.len() as f64) * fraction).floor().max(1.0) as usize;
    let mut rng = crate::seed::derived_rng(master_seed, "subset", 0, 0);
    let mut rows: Vec<usize> = (0..data.len()).collect();
    rows.shuffle(&mut rng);
    rows.truncate(keep);
    rows.sort_unstable();
    data.subset(&rows)
}

/// One client's local shard of a dataset.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    client_id: usize,
    data: Dataset,
}

impl ClientDataset {
    pub fn new(client_id: usize, data: Dataset) -> Self {
        ClientDataset { client_id, data }
    }

    pub fn client_id(&self) -> usize {
        self.client_id
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    /// Number of local rows (`d_i`).
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}
