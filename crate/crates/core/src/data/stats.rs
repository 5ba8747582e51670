//! The statistics a client shares with the server: mean, standard
//! deviation, and skewness of its local features.

use crate::data::ClientDataset;

/// How the statistics vector is laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsMode {
    /// One `(mean, std, skewness)` triple over all flattened feature values.
    Scalar,
    /// A triple per feature column, concatenated as all means, then all
    /// standard deviations, then all skewnesses.
    PerFeature,
}

/// The vector a client shares with the server.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientStats {
    pub client_id: usize,
    pub stats: Vec<f64>,
}

// Variance below this (relative to the squared mean) is treated as zero so
// constant data gets sigma = 0 and skewness = 0 instead of noise-driven
// values.
const DEGENERATE_VAR: f64 = 1e-24;

fn moments(values: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64, f64) {
    let n_f = n as f64;
    let mean = values.clone().sum::<f64>() / n_f;
    let mut m2 = 0.0;
    let mut m3 = 0.0;
    for v in values {
        let d = v - mean;
        m2 += d * d;
        m3 += d * d * d;
    }
    m2 /= n_f; // population variance
    m3 /= n_f;
    if m2 <= DEGENERATE_VAR * (1.0 + mean * mean) {
        return (mean, 0.0, 0.0);
    }
    (mean, m2.sqrt(), m3 / m2.powf(1.5))
}

/// Compute the client's shared statistics over its local rows only.
pub fn compute_client_stats(client: &ClientDataset, mode: StatsMode) -> ClientStats {
    let features = client.data().features();
    let data = features.data();
    let n = features.batch();
    let row_len = features.row_len();
    let stats = match mode {
        StatsMode::Scalar => {
            let (mean, std, skew) = moments(data.iter().copied(), data.len());
            vec![mean, std, skew]
        }
        StatsMode::PerFeature => {
            let mut means = Vec::with_capacity(row_len);
            let mut stds = Vec::with_capacity(row_len);
            let mut skews = Vec::with_capacity(row_len);
            for j in 0..row_len {
                let col = data[j..].iter().step_by(row_len).copied();
                let (mean, std, skew) = moments(col, n);
                means.push(mean);
                stds.push(std);
                skews.push(skew);
            }
            means.extend_from_slice(&stds);
            means.extend_from_slice(&skews);
            means
        }
    };
    ClientStats {
        client_id: client.client_id(),
        stats,
    }
}
