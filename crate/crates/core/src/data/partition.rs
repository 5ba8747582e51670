//! Dirichlet label-skew partitioning.
//!
//! For every class, a proportion vector drawn from `Dir(alpha * 1_N)` splits
//! that class's (shuffled) rows across the `N` clients. Smaller `alpha`
//! yields more skewed per-client label distributions. Draws are rejected and
//! retried until every client holds at least `max(min_per_client, 1)` rows.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};

use super::{ClientDataset, Dataset};

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub client_count: usize,
    pub alpha: f64,
    pub rng_seed: u64,
    pub min_per_client: usize,
    /// Rejection budget before giving up.
    pub max_retries: usize,
}

impl PartitionSpec {
    pub fn new(client_count: usize, alpha: f64, rng_seed: u64, min_per_client: usize) -> Self {
        PartitionSpec {
            client_count,
            alpha,
            rng_seed,
            min_per_client,
            max_retries: 2000,
        }
    }

    fn validate(&self, rows: usize) -> Result<()> {
        if self.client_count < 2 {
            return Err(Error::InvalidArgument(
                "partition needs at least 2 clients".into(),
            ));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "dirichlet alpha {} must be positive",
                self.alpha
            )));
        }
        if rows < self.client_count * self.min_per_client.max(1) {
            return Err(Error::InvalidArgument(format!(
                "{rows} rows cannot give {} clients {} rows each",
                self.client_count,
                self.min_per_client.max(1)
            )));
        }
        Ok(())
    }
}

/// Split `data` into per-client shards. The partition is exact (disjoint and
/// exhaustive) and deterministic for a fixed seed.
pub fn dirichlet_partition(data: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientDataset>> {
    spec.validate(data.len())?;
    let n_clients = spec.client_count;
    let min_rows = spec.min_per_client.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);

    // Row indices per class, fixed across retries; only proportions and
    // shuffles are redrawn.
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.class_count()];
    for (i, &y) in data.labels().iter().enumerate() {
        by_class[y].push(i);
    }

    let gamma = Gamma::new(spec.alpha, 1.0).map_err(|e| {
        Error::InvalidArgument(format!("dirichlet alpha {}: {e}", spec.alpha))
    })?;

    for _attempt in 0..spec.max_retries {
        let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
        for class_rows in &by_class {
            if class_rows.is_empty() {
                continue;
            }
            // Dir(alpha * 1_N) via normalized Gamma draws.
            let mut props: Vec<f64> = (0..n_clients).map(|_| gamma.sample(&mut rng)).collect();
            let mut total: f64 = props.iter().sum();
            if total <= 0.0 {
                // All draws underflowed (tiny alpha); fall back to a single
                // uniform winner so the class is still assigned.
                let w = rng.gen_range(0..n_clients);
                props.iter_mut().for_each(|p| *p = 0.0);
                props[w] = 1.0;
                total = 1.0;
            }
            let mut order: Vec<usize> = class_rows.clone();
            order.shuffle(&mut rng);
            // Cumulative rounding gives an exact split of the class.
            let n_c = order.len() as f64;
            let mut cum = 0.0;
            let mut start = 0usize;
            for (j, &p) in props.iter().enumerate() {
                cum += p / total;
                let end = if j + 1 == n_clients {
                    order.len()
                } else {
                    ((cum * n_c).round() as usize).min(order.len())
                };
                assigned[j].extend_from_slice(&order[start..end.max(start)]);
                start = end.max(start);
            }
        }
        if assigned.iter().all(|rows| rows.len() >= min_rows) {
            let mut clients = Vec::with_capacity(n_clients);
            for (id, mut rows) in assigned.into_iter().enumerate() {
                rows.sort_unstable();
                clients.push(ClientDataset::new(id, data.subset(&rows)?));
            }
            return Ok(clients);
        }
    }
    Err(Error::Partition {
        attempts: spec.max_retries,
        reason: format!(
            "could not give every one of {n_clients} clients {min_rows} rows at alpha {}; \
             try a larger alpha or a smaller min_per_client",
            spec.alpha
        ),
    })
}
