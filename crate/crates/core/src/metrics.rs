//! Per-round metrics, parameter-variance diagnostics, and CSV/JSON output.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ModelParams;

pub const SCHEMA_VERSION: u32 = 1;

/// Cluster-level training diagnostics for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClusterMetrics {
    pub cluster_id: usize,
    pub member_count: usize,
    pub mean_student_train_loss: f64,
    /// Absent for strategies without teachers (FedAvg, FL+HC).
    pub teacher_train_loss: Option<f64>,
}

/// Everything recorded about one communication round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub per_cluster: Vec<PerClusterMetrics>,
    /// Member-weighted mean of within-cluster parameter variances.
    pub var_intra: f64,
    /// Variance of all client parameter vectors around the global mean.
    pub var_total: f64,
    /// Wall-clock duration of the round. Kept out of the CSV so re-runs are
    /// byte-identical; the JSON summary carries it.
    pub wall_ms: u64,
}

/// Streaming moments of flattened parameter vectors for one cluster.
#[derive(Debug, Clone)]
pub struct ClusterMoments {
    pub count: usize,
    pub sum: Vec<f64>,
    pub sum_sq_norm: f64,
}

impl ClusterMoments {
    pub fn new(dim: usize) -> Self {
        ClusterMoments {
            count: 0,
            sum: vec![0.0; dim],
            sum_sq_norm: 0.0,
        }
    }

    pub fn push(&mut self, theta: &[f64]) {
        debug_assert_eq!(theta.len(), self.sum.len());
        self.count += 1;
        let mut sq = 0.0;
        for (s, &v) in self.sum.iter_mut().zip(theta) {
            *s += v;
            sq += v * v;
        }
        self.sum_sq_norm += sq;
    }

    /// Within-cluster variance `(1/n) Σ ‖θ_i − μ‖²` in moment form
    /// `(1/n) Σ ‖θ_i‖² − ‖μ‖²`, clamped at zero against rounding.
    fn variance(&self) -> f64 {
        let n = self.count as f64;
        let mean_sq: f64 = self.sum.iter().map(|s| (s / n) * (s / n)).sum();
        (self.sum_sq_norm / n - mean_sq).max(0.0)
    }
}

/// `(var_intra, var_total)` from per-cluster moments.
///
/// `var_intra` is the member-weighted mean of within-cluster variances, so a
/// single cluster holding every client reproduces `var_total` exactly.
/// `var_total` is assembled by the total-variance decomposition
/// `var_total = var_intra + Σ_k (n_k/N) ‖μ_k − θ̄‖²`, which keeps the
/// defining inequality `var_intra <= var_total` intact under rounding.
pub fn variance_from_moments(clusters: &[ClusterMoments]) -> Result<(f64, f64)> {
    if clusters.is_empty() || clusters.iter().any(|c| c.count == 0) {
        return Err(Error::Metrics("variance over an empty cluster".into()));
    }
    let dim = clusters[0].sum.len();
    if clusters.iter().any(|c| c.sum.len() != dim) {
        return Err(Error::Metrics("clusters disagree on parameter size".into()));
    }
    let total_n: usize = clusters.iter().map(|c| c.count).sum();
    let n_f = total_n as f64;

    let mut global_mean = vec![0.0f64; dim];
    for c in clusters {
        for (g, s) in global_mean.iter_mut().zip(&c.sum) {
            *g += s;
        }
    }
    for g in &mut global_mean {
        *g /= n_f;
    }

    let mut var_intra = 0.0;
    let mut between = 0.0;
    for c in clusters {
        let w = c.count as f64 / n_f;
        var_intra += w * c.variance();
        let mut d2 = 0.0;
        for (s, g) in c.sum.iter().zip(&global_mean) {
            let d = s / c.count as f64 - g;
            d2 += d * d;
        }
        between += w * d2;
    }
    Ok((var_intra, var_intra + between))
}

/// Variance diagnostics over client parameter sets grouped by `labels`.
pub fn variance_diagnostics(
    client_params: &[ModelParams],
    labels: &[usize],
) -> Result<(f64, f64)> {
    if client_params.is_empty() {
        return Err(Error::Metrics("no client parameters".into()));
    }
    if client_params.len() != labels.len() {
        return Err(Error::Metrics(format!(
            "{} parameter sets but {} cluster labels",
            client_params.len(),
            labels.len()
        )));
    }
    let arch = client_params[0].architecture_id();
    if client_params.iter().any(|p| p.architecture_id() != arch) {
        return Err(Error::Metrics(
            "client parameters span different architectures".into(),
        ));
    }
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    let dim = client_params[0].param_count();
    let mut clusters = vec![ClusterMoments::new(dim); k];
    let mut buf = Vec::with_capacity(dim);
    for (p, &l) in client_params.iter().zip(labels) {
        buf.clear();
        p.flatten_into(&mut buf);
        clusters[l].push(&buf);
    }
    variance_from_moments(&clusters)
}

/// Fixed CSV header. Timings deliberately stay out (see [`RoundMetrics`]);
/// the nested per-cluster table is serialized as a JSON cell.
pub const CSV_HEADER: [&str; 7] = [
    "schema_version",
    "round",
    "accuracy",
    "loss",
    "var_intra",
    "var_total",
    "per_cluster",
];

/// Write rounds as CSV. Byte-stable for identical rows.
pub fn write_metrics(rows: &[RoundMetrics], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Metrics("refusing to write zero rounds".into()));
    }
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let io_err = |e: csv::Error| Error::Metrics(format!("csv write to {}: {e}", path.display()));
    w.write_record(CSV_HEADER).map_err(io_err)?;
    for r in rows {
        let per_cluster = serde_json::to_string(&r.per_cluster)
            .map_err(|e| Error::Metrics(format!("per-cluster json: {e}")))?;
        w.write_record([
            SCHEMA_VERSION.to_string(),
            r.round.to_string(),
            format!("{}", r.test_accuracy),
            format!("{}", r.test_loss),
            format!("{}", r.var_intra),
            format!("{}", r.var_total),
            per_cluster,
        ])
        .map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Read a CSV produced by [`write_metrics`]; `wall_ms` is restored as 0.
pub fn read_metrics(path: &Path) -> Result<Vec<RoundMetrics>> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = csv::Reader::from_reader(BufReader::new(file));
    let parse_err = |e: String| Error::Metrics(format!("csv read from {}: {e}", path.display()));
    let headers = r.headers().map_err(|e| parse_err(e.to_string()))?.clone();
    if headers.iter().ne(CSV_HEADER) {
        return Err(parse_err(format!("unexpected header {headers:?}")));
    }
    let mut rows = Vec::new();
    for record in r.records() {
        let rec = record.map_err(|e| parse_err(e.to_string()))?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let version: u32 = field(0).parse().map_err(|_| parse_err("bad schema_version".into()))?;
        if version != SCHEMA_VERSION {
            return Err(parse_err(format!("schema_version {version} unsupported")));
        }
        rows.push(RoundMetrics {
            round: field(1).parse().map_err(|_| parse_err("bad round".into()))?,
            test_accuracy: field(2).parse().map_err(|_| parse_err("bad accuracy".into()))?,
            test_loss: field(3).parse().map_err(|_| parse_err("bad loss".into()))?,
            var_intra: field(4).parse().map_err(|_| parse_err("bad var_intra".into()))?,
            var_total: field(5).parse().map_err(|_| parse_err("bad var_total".into()))?,
            per_cluster: serde_json::from_str(field(6))
                .map_err(|e| parse_err(format!("per_cluster json: {e}")))?,
            wall_ms: 0,
        });
    }
    Ok(rows)
}

/// Accuracy/loss extract for the summary tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundExtract {
    pub round: usize,
    pub accuracy: f64,
    pub loss: f64,
}

/// Companion JSON document: the resolved configuration, the full per-round
/// table, and the first-five/final-round extracts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub schema_version: u32,
    pub config: serde_json::Value,
    pub rounds: Vec<RoundMetrics>,
    pub first_five: Vec<RoundExtract>,
    pub final_round: RoundExtract,
}

impl ExperimentSummary {
    pub fn new(config: serde_json::Value, rounds: Vec<RoundMetrics>) -> Result<Self> {
        let last = rounds
            .last()
            .ok_or_else(|| Error::Metrics("summary needs at least one round".into()))?;
        let extract = |r: &RoundMetrics| RoundExtract {
            round: r.round,
            accuracy: r.test_accuracy,
            loss: r.test_loss,
        };
        Ok(ExperimentSummary {
            schema_version: SCHEMA_VERSION,
            config,
            first_five: rounds.iter().take(5).map(extract).collect(),
            final_round: extract(last),
            rounds,
        })
    }
}

pub fn write_summary(summary: &ExperimentSummary, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(summary)
        .map_err(|e| Error::Metrics(format!("summary json: {e}")))?;
    let mut f = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(json.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(b"\n")
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<ExperimentSummary> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::Metrics(format!("summary json from {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, Architecture, LayerSpec};

    fn one_param_model(value: f64) -> ModelParams {
        let arch = Architecture::new("p1", vec![1], vec![LayerSpec::Dense { units: 1 }]).unwrap();
        let mut p = build_model(&arch, 0).unwrap();
        p.layers_mut()[0].weights.data_mut()[0] = value;
        p.layers_mut()[0].biases.data_mut()[0] = 0.0;
        p
    }

    #[test]
    fn hand_set_two_cluster_oracle() {
        // Clusters {0, 0} and {10, 10}: var_intra = 0, var_total = 25.
        let params = vec![
            one_param_model(0.0),
            one_param_model(0.0),
            one_param_model(10.0),
            one_param_model(10.0),
        ];
        let (vi, vt) = variance_diagnostics(&params, &[0, 0, 1, 1]).unwrap();
        assert!(vi.abs() < 1e-12, "{vi}");
        assert!((vt - 25.0).abs() < 1e-9, "{vt}");
    }

    #[test]
    fn single_cluster_collapses_to_total()
    {
        let params = vec![
            one_param_model(1.0),
            one_param_model(2.0),
            one_param_model(4.0),
        ];
        let (vi, vt) = variance_diagnostics(&params, &[0, 0, 0]).unwrap();
        assert!((vi - vt).abs() < 1e-12);
        // Direct formula: mean 7/3, variance = ((1-7/3)^2+(2-7/3)^2+(4-7/3)^2)/3
        let mean: f64 = 7.0 / 3.0;
        let expect = ((1.0 - mean).powi(2) + (2.0 - mean).powi(2) + (4.0 - mean).powi(2)) / 3.0;
        assert!((vt - expect).abs() < 1e-12);
    }

    #[test]
    fn intra_never_exceeds_total_and_is_permutation_invariant() {
        let values = [0.5, 1.5, -2.0, 3.0, 0.25, 8.0];
        let labels = [0usize, 1, 0, 1, 2, 2];
        let params: Vec<ModelParams> = values.iter().map(|&v| one_param_model(v)).collect();
        let (vi, vt) = variance_diagnostics(&params, &labels).unwrap();
        assert!(vi <= vt);

        let perm = [3usize, 0, 5, 1, 4, 2];
        let p2: Vec<ModelParams> = perm.iter().map(|&i| params[i].clone()).collect();
        let l2: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let (vi2, vt2) = variance_diagnostics(&p2, &l2).unwrap();
        assert!((vi - vi2).abs() < 1e-12);
        assert!((vt - vt2).abs() < 1e-12);
    }

    #[test]
    fn scaling_params_scales_variances_quadratically() {
        let values = [0.5, 1.5, -2.0, 3.0];
        let labels = [0usize, 0, 1, 1];
        let params: Vec<ModelParams> = values.iter().map(|&v| one_param_model(v)).collect();
        let scaled: Vec<ModelParams> = values.iter().map(|&v| one_param_model(3.0 * v)).collect();
        let (vi, vt) = variance_diagnostics(&params, &labels).unwrap();
        let (vi9, vt9) = variance_diagnostics(&scaled, &labels).unwrap();
        assert!((vi9 - 9.0 * vi).abs() < 1e-9 * (1.0 + vi.abs()));
        assert!((vt9 - 9.0 * vt).abs() < 1e-9 * (1.0 + vt.abs()));
        assert!(vi9 <= vt9);
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let rows = vec![
            RoundMetrics {
                round: 1,
                test_accuracy: 0.517,
                test_loss: 1.45,
                per_cluster: vec![PerClusterMetrics {
                    cluster_id: 0,
                    member_count: 3,
                    mean_student_train_loss: 0.123456789,
                    teacher_train_loss: Some(0.9),
                }],
                var_intra: 0.25,
                var_total: 1.0 / 3.0,
                wall_ms: 1234,
            },
            RoundMetrics {
                round: 2,
                test_accuracy: 0.6644,
                test_loss: 10.1,
                per_cluster: vec![],
                var_intra: 0.0,
                var_total: 0.0,
                wall_ms: 999,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics(&rows, &path).unwrap();
        let back = read_metrics(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(a.round, b.round);
            assert_eq!(a.test_accuracy, b.test_accuracy);
            assert_eq!(a.test_loss, b.test_loss);
            assert_eq!(a.var_intra, b.var_intra);
            assert_eq!(a.var_total, b.var_total);
            assert_eq!(a.per_cluster, b.per_cluster);
        }
        // One header line plus one line per row.
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);

        // Identical rows -> identical bytes.
        let path2 = dir.path().join("metrics2.csv");
        write_metrics(&rows, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn summary_extracts_match_table() {
        let rows: Vec<RoundMetrics> = (1..=7)
            .map(|i| RoundMetrics {
                round: i,
                test_accuracy: i as f64 / 10.0,
                test_loss: 1.0 / i as f64,
                per_cluster: vec![],
                var_intra: 0.0,
                var_total: 0.0,
                wall_ms: 0,
            })
            .collect();
        let s = ExperimentSummary::new(serde_json::json!({"seed": 1}), rows.clone()).unwrap();
        assert_eq!(s.first_five.len(), 5);
        for (e, r) in s.first_five.iter().zip(&rows) {
            assert_eq!(e.accuracy, r.test_accuracy);
            assert_eq!(e.loss, r.test_loss);
        }
        assert_eq!(s.final_round.round, 7);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("summary.json");
        write_summary(&s, &path).unwrap();
        let back = read_summary(&path).unwrap();
        assert_eq!(back.final_round, s.final_round);
        assert_eq!(back.rounds.len(), 7);
    }
}
