//! Round orchestration: FedSiKD (statistics-based clustering + per-cluster
//! teacher→student distillation), FedAvg, random clustering, and FL+HC.
//!
//! One round: clients initialize from the previous global model, train
//! locally, and the server aggregates. Cluster strategies first train each
//! cluster's teacher on the union of its members' rows, distill into the
//! members' students, average students within the cluster, then average the
//! cluster means into the new global model.

use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;

use crate::clustering::{
    agglomerative_cluster, kmeans, select_k, standardize_columns, AgglomCut, KScore,
    KmeansOptions, PointSet,
};
use crate::data::{
    compute_client_stats, dirichlet_partition, ClientDataset, ClientStats, Dataset,
    PartitionSpec, StatsMode,
};
use crate::error::{Error, Result};
use crate::metrics::{variance_from_moments, ClusterMoments, PerClusterMetrics, RoundMetrics};
use crate::nn::{
    build_model, ce_loss_and_grad, forward_eval, sgd_train, sgd_train_view, Architecture,
    DataView, ModelParams, ParamMean, TrainConfig,
};
use crate::seed::{derive_seed, derived_rng};

/// Aggregation strategy under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    FedSiKd,
    FedAvg,
    RandomCluster,
    FlHc,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::FedSiKd => "fedsikd",
            Strategy::FedAvg => "fedavg",
            Strategy::RandomCluster => "random_cluster",
            Strategy::FlHc => "fl_hc",
        }
    }
}

/// What rows a student trains on (the paper's student objective sums over
/// the cluster minus the student itself; local data is the default).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudentData {
    Local,
    ClusterExclSelf,
}

/// Full configuration of one experiment run.
#[derive(Debug, Clone)]
pub struct FederationConfig {
    pub strategy: Strategy,
    pub rounds: usize,
    pub client_count: usize,
    pub alpha: f64,
    pub min_per_client: usize,
    pub train: TrainConfig,
    pub teacher_epochs: usize,
    pub stats_mode: StatsMode,
    pub k_min: usize,
    pub k_max: usize,
    /// Overrides index-based selection when set.
    pub fixed_k: Option<usize>,
    pub kmeans: KmeansOptions,
    /// Switches FL+HC from fixed-count to distance-threshold cutting.
    pub fl_hc_threshold: Option<f64>,
    pub student_data: StudentData,
    /// FedAvg aggregation weighted by client dataset size (the classic rule).
    pub fedavg_weighted: bool,
    pub master_seed: u64,
    pub eval_batch: usize,
    pub teacher_arch: Architecture,
    pub student_arch: Architecture,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::InvalidArgument("rounds must be >= 1".into()));
        }
        if self.client_count < 2 {
            return Err(Error::InvalidArgument("need at least 2 clients".into()));
        }
        self.train.validate()?;
        if self.eval_batch == 0 {
            return Err(Error::InvalidArgument("eval batch must be positive".into()));
        }
        let tq = self.teacher_arch.class_count()?;
        let sq = self.student_arch.class_count()?;
        if tq != sq {
            return Err(Error::InvalidArgument(format!(
                "teacher predicts {tq} classes, student predicts {sq}"
            )));
        }
        if let Some(k) = self.fixed_k {
            if k == 0 || k > self.client_count {
                return Err(Error::InvalidArgument(format!(
                    "fixed_k {k} outside [1, {}]",
                    self.client_count
                )));
            }
        }
        Ok(())
    }
}

/// A cluster's teacher model and which client hosts it.
#[derive(Debug, Clone)]
pub struct TeacherState {
    pub params: ModelParams,
    pub client_id: usize,
}

/// One cluster: its members and (for distillation strategies) its teacher.
#[derive(Debug, Clone)]
pub struct ClusterState {
    pub cluster_id: usize,
    pub members: Vec<usize>,
    pub teacher: Option<TeacherState>,
}

/// How the clients were grouped, for logging and diagnostics.
#[derive(Debug, Clone)]
pub struct ClusteringReport {
    /// Client id -> cluster id.
    pub labels: Vec<usize>,
    /// K chosen by the quality indices (absent when fixed or not applicable).
    pub selected_k: Option<usize>,
    /// Scores for every candidate K examined.
    pub scores: Vec<KScore>,
}

/// Output of a full run.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub rounds: Vec<RoundMetrics>,
    pub clustering: ClusteringReport,
}

/// Evaluate parameters on a test set: top-1 accuracy (argmax ties go to the
/// lowest class id) and mean cross-entropy, batched eval-mode forward.
pub fn evaluate(params: &ModelParams, test: &Dataset, batch: usize) -> Result<(f64, f64)> {
    if batch == 0 {
        return Err(Error::InvalidArgument("eval batch must be positive".into()));
    }
    let n = test.len();
    let view = DataView::Whole(test);
    let ranges: Vec<(usize, usize)> = (0..n.div_ceil(batch))
        .map(|b| (b * batch, ((b + 1) * batch).min(n)))
        .collect();
    let results: Vec<Result<(usize, f64)>> = ranges
        .par_iter()
        .map(|&(start, end)| {
            let idx: Vec<usize> = (start..end).collect();
            let (features, labels) = view.gather(&idx)?;
            let logits = forward_eval(params, &features)?;
            let (loss, _) = ce_loss_and_grad(&logits, &labels)?;
            let q = logits.shape()[1];
            let data = logits.data();
            let mut correct = 0usize;
            for (i, &y) in labels.iter().enumerate() {
                let row = &data[i * q..(i + 1) * q];
                let mut best = 0usize;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                if best == y {
                    correct += 1;
                }
            }
            Ok((correct, loss * idx.len() as f64))
        })
        .collect();
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    for r in results {
        let (c, l) = r?;
        correct += c;
        loss_sum += l;
    }
    Ok((correct as f64 / n as f64, loss_sum / n as f64))
}

/// Group clients by their shared statistics: z-score the statistic columns,
/// pick K with the three quality indices (unless fixed), run k-means, and
/// appoint each cluster's largest-data client as its teacher (ties to the
/// lowest client id).
pub fn form_clusters(
    stats: &[ClientStats],
    client_sizes: &[usize],
    teacher_arch: &Architecture,
    k_min: usize,
    k_max: usize,
    fixed_k: Option<usize>,
    opts: &KmeansOptions,
    master_seed: u64,
) -> Result<(Vec<ClusterState>, ClusteringReport)> {
    let labels_report = cluster_stats_labels(stats, k_min, k_max, fixed_k, opts, master_seed)?;
    let clusters = clusters_with_teachers(
        &labels_report.labels,
        client_sizes,
        teacher_arch,
        master_seed,
    )?;
    Ok((clusters, labels_report))
}

fn stats_point_set(stats: &[ClientStats]) -> Result<PointSet> {
    if stats.len() < 2 {
        return Err(Error::Clustering("need stats from at least 2 clients".into()));
    }
    let dim = stats[0].stats.len();
    if stats.iter().any(|s| s.stats.len() != dim) {
        return Err(Error::Clustering("clients disagree on statistics length".into()));
    }
    let flat: Vec<f64> = stats.iter().flat_map(|s| s.stats.iter().copied()).collect();
    let mut points = Array2::from_shape_vec((stats.len(), dim), flat)
        .map_err(|e| Error::Clustering(e.to_string()))?;
    standardize_columns(&mut points);
    PointSet::new(points)
}

fn cluster_stats_labels(
    stats: &[ClientStats],
    k_min: usize,
    k_max: usize,
    fixed_k: Option<usize>,
    opts: &KmeansOptions,
    master_seed: u64,
) -> Result<ClusteringReport> {
    let points = stats_point_set(stats)?;
    let n = points.len();
    if let Some(k) = fixed_k {
        let assignment = kmeans(&points, k, opts, derive_seed(master_seed, "kmeans_fixed", k as u64, 0))?;
        return Ok(ClusteringReport {
            labels: assignment.labels,
            selected_k: None,
            scores: Vec::new(),
        });
    }
    let k_max_eff = k_max.min(n.saturating_sub(1));
    let k_min_eff = k_min.max(2);
    if k_min_eff > k_max_eff {
        // Too few clients to scan a range; the smallest meaningful split.
        let k = 2.min(n);
        let assignment = kmeans(&points, k, opts, derive_seed(master_seed, "kmeans_fixed", k as u64, 0))?;
        return Ok(ClusteringReport {
            labels: assignment.labels,
            selected_k: Some(k),
            scores: Vec::new(),
        });
    }
    let selection = select_k(
        &points,
        k_min_eff,
        k_max_eff,
        opts,
        derive_seed(master_seed, "select_k", 0, 0),
    )?;
    Ok(ClusteringReport {
        labels: selection.best.labels,
        selected_k: Some(selection.best_k),
        scores: selection.scores,
    })
}

fn clusters_with_teachers(
    labels: &[usize],
    client_sizes: &[usize],
    teacher_arch: &Architecture,
    master_seed: u64,
) -> Result<Vec<ClusterState>> {
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (client, &l) in labels.iter().enumerate() {
        members[l].push(client);
    }
    let mut clusters = Vec::with_capacity(k);
    for (cluster_id, members) in members.into_iter().enumerate() {
        if members.is_empty() {
            return Err(Error::Clustering(format!(
                "cluster {cluster_id} is empty after assignment"
            )));
        }
        // Largest local dataset stands in for compute capability.
        let teacher_client = *members
            .iter()
            .max_by(|&&a, &&b| client_sizes[a].cmp(&client_sizes[b]).then(b.cmp(&a)))
            .expect("cluster is non-empty");
        let params = build_model(
            teacher_arch,
            derive_seed(master_seed, "teacher_init", cluster_id as u64, 0),
        )?;
        clusters.push(ClusterState {
            cluster_id,
            members,
            teacher: Some(TeacherState {
                params,
                client_id: teacher_client,
            }),
        });
    }
    Ok(clusters)
}

/// Uniform random client→cluster assignment with deterministic repair of
/// empty clusters (a member of the largest cluster moves over).
fn random_assignment(n: usize, k: usize, master_seed: u64) -> Vec<usize> {
    let mut rng = derived_rng(master_seed, "random_assign", 0, 0);
    let mut labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    loop {
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            break;
        };
        let donor = (0..k)
            .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
            .expect("k >= 1");
        let mover = labels
            .iter()
            .position(|&l| l == donor)
            .expect("donor cluster is non-empty");
        labels[mover] = empty;
    }
    labels
}

struct ClusterRuntime {
    state: ClusterState,
    /// (client index, row index) pairs covering the members' rows, used for
    /// teacher training on "cluster data".
    union_rows: Vec<(u32, u32)>,
}

/// Drives one experiment: owns the partition, the cluster states, and the
/// global model, and advances round by round.
pub struct ExperimentRunner<'a> {
    cfg: FederationConfig,
    clients: Vec<ClientDataset>,
    test: &'a Dataset,
    clusters: Vec<ClusterRuntime>,
    global: ModelParams,
    round: usize,
    clustering: ClusteringReport,
}

impl<'a> ExperimentRunner<'a> {
    pub fn new(cfg: FederationConfig, train: &Dataset, test: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        let spec = PartitionSpec::new(
            cfg.client_count,
            cfg.alpha,
            derive_seed(cfg.master_seed, "partition", 0, 0),
            cfg.min_per_client,
        );
        let clients = dirichlet_partition(train, &spec)?;
        Self::with_clients(cfg, clients, test)
    }

    /// Build a runner over an existing partition (used by tests that need
    /// hand-constructed client data).
    pub fn with_clients(
        cfg: FederationConfig,
        clients: Vec<ClientDataset>,
        test: &'a Dataset,
    ) -> Result<Self> {
        cfg.validate()?;
        if clients.len() != cfg.client_count {
            return Err(Error::InvalidArgument(format!(
                "{} clients provided, config says {}",
                clients.len(),
                cfg.client_count
            )));
        }
        let global = build_model(
            &cfg.student_arch,
            derive_seed(cfg.master_seed, "global_init", 0, 0),
        )?;
        let sizes: Vec<usize> = clients.iter().map(|c| c.len()).collect();

        let (cluster_states, clustering) = match cfg.strategy {
            Strategy::FedAvg => {
                let members: Vec<usize> = (0..clients.len()).collect();
                (
                    vec![ClusterState {
                        cluster_id: 0,
                        members,
                        teacher: None,
                    }],
                    ClusteringReport {
                        labels: vec![0; clients.len()],
                        selected_k: None,
                        scores: Vec::new(),
                    },
                )
            }
            Strategy::FedSiKd => {
                let stats: Vec<ClientStats> = clients
                    .iter()
                    .map(|c| compute_client_stats(c, cfg.stats_mode))
                    .collect();
                form_clusters(
                    &stats,
                    &sizes,
                    &cfg.teacher_arch,
                    cfg.k_min,
                    cfg.k_max,
                    cfg.fixed_k,
                    &cfg.kmeans,
                    cfg.master_seed,
                )?
            }
            Strategy::RandomCluster => {
                // Same K as the statistics-based pipeline would pick, but a
                // seeded uniform assignment fixed before round 1.
                let stats: Vec<ClientStats> = clients
                    .iter()
                    .map(|c| compute_client_stats(c, cfg.stats_mode))
                    .collect();
                let report = cluster_stats_labels(
                    &stats,
                    cfg.k_min,
                    cfg.k_max,
                    cfg.fixed_k,
                    &cfg.kmeans,
                    cfg.master_seed,
                )?;
                let k = cfg
                    .fixed_k
                    .or(report.selected_k)
                    .unwrap_or_else(|| report.labels.iter().max().map_or(1, |&m| m + 1));
                let labels = random_assignment(clients.len(), k, cfg.master_seed);
                let clusters =
                    clusters_with_teachers(&labels, &sizes, &cfg.teacher_arch, cfg.master_seed)?;
                (
                    clusters,
                    ClusteringReport {
                        labels,
                        selected_k: report.selected_k,
                        scores: report.scores,
                    },
                )
            }
            Strategy::FlHc => {
                Self::form_fl_hc_clusters(&cfg, &clients, &global)?
            }
        };

        let clusters = cluster_states
            .into_iter()
            .map(|state| {
                let mut union_rows = Vec::new();
                for &m in &state.members {
                    for r in 0..clients[m].len() {
                        union_rows.push((m as u32, r as u32));
                    }
                }
                ClusterRuntime { state, union_rows }
            })
            .collect();

        Ok(ExperimentRunner {
            cfg,
            clients,
            test,
            clusters,
            global,
            round: 0,
            clustering,
        })
    }

    /// FL+HC grouping: one warm-up epoch per client from the common init,
    /// then average-linkage clustering of the flattened student weights.
    /// Every client shares the warm-up seed, so weight distances reflect
    /// data differences only (clients with identical rows land at zero
    /// distance).
    fn form_fl_hc_clusters(
        cfg: &FederationConfig,
        clients: &[ClientDataset],
        global: &ModelParams,
    ) -> Result<(Vec<ClusterState>, ClusteringReport)> {
        let warm_cfg = TrainConfig {
            local_epochs: 1,
            ..cfg.train.clone()
        }
        .with_seed(derive_seed(cfg.master_seed, "warmup", 0, 0));
        let dim = global.param_count();
        let mut points = Array2::<f64>::zeros((clients.len(), dim));
        let chunk = rayon::current_num_threads().max(1) * 2;
        let mut row = 0usize;
        for batch in clients.chunks(chunk) {
            let trained: Vec<Result<ModelParams>> = batch
                .par_iter()
                .map(|client| sgd_train(global, client, &warm_cfg, None).map(|(p, _)| p))
                .collect();
            for params in trained {
                let params = params?;
                let mut buf = Vec::with_capacity(dim);
                params.flatten_into(&mut buf);
                for (j, v) in buf.into_iter().enumerate() {
                    points[(row, j)] = v;
                }
                row += 1;
            }
        }
        let point_set = PointSet::new(points)?;
        let cut = match cfg.fl_hc_threshold {
            Some(t) => AgglomCut::Threshold(t),
            None => {
                // Default: same cluster count the statistics pipeline picks,
                // so the baselines are comparable.
                let k = match cfg.fixed_k {
                    Some(k) => k,
                    None => {
                        let stats: Vec<ClientStats> = clients
                            .iter()
                            .map(|c| compute_client_stats(c, cfg.stats_mode))
                            .collect();
                        let report = cluster_stats_labels(
                            &stats,
                            cfg.k_min,
                            cfg.k_max,
                            None,
                            &cfg.kmeans,
                            cfg.master_seed,
                        )?;
                        report
                            .selected_k
                            .unwrap_or_else(|| report.labels.iter().max().map_or(1, |&m| m + 1))
                    }
                };
                AgglomCut::FixedK(k)
            }
        };
        let labels = agglomerative_cluster(&point_set, cut)?;
        let k = labels.iter().max().map_or(0, |&m| m + 1);
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (client, &l) in labels.iter().enumerate() {
            members[l].push(client);
        }
        let clusters = members
            .into_iter()
            .enumerate()
            .map(|(cluster_id, members)| ClusterState {
                cluster_id,
                members,
                teacher: None,
            })
            .collect();
        Ok((
            clusters,
            ClusteringReport {
                labels,
                selected_k: Some(k),
                scores: Vec::new(),
            },
        ))
    }

    pub fn config(&self) -> &FederationConfig {
        &self.cfg
    }

    pub fn clients(&self) -> &[ClientDataset] {
        &self.clients
    }

    pub fn global_params(&self) -> &ModelParams {
        &self.global
    }

    pub fn clustering(&self) -> &ClusteringReport {
        &self.clustering
    }

    pub fn clusters(&self) -> Vec<&ClusterState> {
        self.clusters.iter().map(|c| &c.state).collect()
    }

    pub fn rounds_done(&self) -> usize {
        self.round
    }

    /// Advance one communication round and report its metrics.
    pub fn step(&mut self) -> Result<RoundMetrics> {
        let t = self.round + 1;
        let started = Instant::now();
        let result = match self.cfg.strategy {
            Strategy::FedAvg => self.round_fedavg(t),
            Strategy::FedSiKd | Strategy::RandomCluster => self.round_distillation(t),
            Strategy::FlHc => self.round_clustered_fedavg(t),
        };
        let (per_cluster, diag) = result.map_err(|e| Error::Federation {
            round: t,
            reason: e.to_string(),
        })?;
        let (accuracy, loss) =
            evaluate(&self.global, self.test, self.cfg.eval_batch).map_err(|e| {
                Error::Federation {
                    round: t,
                    reason: format!("evaluation: {e}"),
                }
            })?;
        self.round = t;
        Ok(RoundMetrics {
            round: t,
            test_accuracy: accuracy,
            test_loss: loss,
            per_cluster,
            var_intra: diag.0,
            var_total: diag.1,
            wall_ms: started.elapsed().as_millis() as u64,
        })
    }

    /// FedSiKD / RandomCluster round: teachers on cluster unions, students
    /// with distillation, two-level unweighted averaging.
    fn round_distillation(&mut self, t: usize) -> Result<(Vec<PerClusterMetrics>, (f64, f64))> {
        let cfg = &self.cfg;
        let clients = &self.clients;

        // Teacher phase, clusters in parallel. Teachers warm-start from
        // their previous-round weights; students are rebuilt from the
        // global model below.
        let teacher_losses: Vec<Option<f64>> = if cfg.teacher_epochs == 0 {
            vec![None; self.clusters.len()]
        } else {
            let teacher_results: Vec<Result<(ModelParams, f64)>> = self
                .clusters
                .par_iter()
                .map(|cluster| {
                    let teacher = cluster
                        .state
                        .teacher
                        .as_ref()
                        .expect("distillation clusters carry teachers");
                    let view = DataView::Union {
                        parts: clients.iter().map(|c| c.data()).collect(),
                        rows: cluster.union_rows.clone(),
                    };
                    let cfg_t = TrainConfig {
                        local_epochs: cfg.teacher_epochs,
                        ..cfg.train.clone()
                    }
                    .with_seed(derive_seed(
                        cfg.master_seed,
                        "teacher_train",
                        cluster.state.cluster_id as u64,
                        t as u64,
                    ));
                    sgd_train_view(&teacher.params, &view, &cfg_t, None)
                })
                .collect();
            let mut losses = Vec::with_capacity(self.clusters.len());
            for (cluster, result) in self.clusters.iter_mut().zip(teacher_results) {
                let (params, loss) = result?;
                let teacher = cluster.state.teacher.as_mut().expect("teacher present");
                teacher.params = params;
                losses.push(Some(loss));
            }
            losses
        };
        self.train_students_and_aggregate(t, &teacher_losses)
    }

    /// FL+HC round: same two-level aggregation, no teachers.
    fn round_clustered_fedavg(&mut self, t: usize) -> Result<(Vec<PerClusterMetrics>, (f64, f64))> {
        let no_teachers = vec![None; self.clusters.len()];
        self.train_students_and_aggregate(t, &no_teachers)
    }

    fn train_students_and_aggregate(
        &mut self,
        t: usize,
        teacher_losses: &[Option<f64>],
    ) -> Result<(Vec<PerClusterMetrics>, (f64, f64))> {
        let cfg = &self.cfg;
        let clients = &self.clients;
        let clusters = &self.clusters;
        let global = &self.global;
        let dim = global.param_count();

        struct Job {
            cluster_idx: usize,
            client_id: usize,
        }
        let jobs: Vec<Job> = clusters
            .iter()
            .enumerate()
            .flat_map(|(ci, c)| {
                c.state.members.iter().map(move |&m| Job {
                    cluster_idx: ci,
                    client_id: m,
                })
            })
            .collect();

        let mut cluster_means: Vec<ParamMean> =
            (0..clusters.len()).map(|_| ParamMean::new()).collect();
        let mut moments: Vec<ClusterMoments> = (0..clusters.len())
            .map(|_| ClusterMoments::new(dim))
            .collect();
        let mut loss_sums = vec![0.0f64; clusters.len()];
        let mut flat_buf = Vec::with_capacity(dim);

        // Chunked so at most a handful of freshly trained parameter sets
        // are alive at once; fold order is fixed by the job list.
        let chunk = rayon::current_num_threads().max(1) * 2;
        for batch in jobs.chunks(chunk) {
            let trained: Vec<Result<(usize, ModelParams, f64)>> = batch
                .par_iter()
                .map(|job| {
                    let cluster = &clusters[job.cluster_idx];
                    let teacher = cluster.state.teacher.as_ref().map(|ts| &ts.params);
                    let cfg_i = cfg.train.with_seed(derive_seed(
                        cfg.master_seed,
                        "client_train",
                        job.client_id as u64,
                        t as u64,
                    ));
                    let result = match cfg.student_data {
                        StudentData::ClusterExclSelf if cluster.state.members.len() > 1 => {
                            let rows: Vec<(u32, u32)> = cluster
                                .union_rows
                                .iter()
                                .copied()
                                .filter(|&(c, _)| c as usize != job.client_id)
                                .collect();
                            let view = DataView::Union {
                                parts: clients.iter().map(|c| c.data()).collect(),
                                rows,
                            };
                            sgd_train_view(global, &view, &cfg_i, teacher)
                        }
                        _ => sgd_train(global, &clients[job.client_id], &cfg_i, teacher),
                    };
                    result.map(|(p, l)| (job.cluster_idx, p, l))
                })
                .collect();
            for item in trained {
                let (cluster_idx, params, loss) = item?;
                flat_buf.clear();
                params.flatten_into(&mut flat_buf);
                moments[cluster_idx].push(&flat_buf);
                cluster_means[cluster_idx].push(&params, 1.0)?;
                loss_sums[cluster_idx] += loss;
            }
        }

        let mut per_cluster = Vec::with_capacity(clusters.len());
        let mut global_mean = ParamMean::new();
        for (ci, (mean, cluster)) in cluster_means.into_iter().zip(clusters).enumerate() {
            let members = cluster.state.members.len();
            let cluster_avg = mean.finish()?;
            global_mean.push(&cluster_avg, 1.0)?;
            per_cluster.push(PerClusterMetrics {
                cluster_id: cluster.state.cluster_id,
                member_count: members,
                mean_student_train_loss: loss_sums[ci] / members as f64,
                teacher_train_loss: teacher_losses[ci],
            });
        }
        let diag = variance_from_moments(&moments)?;
        self.global = global_mean.finish()?;
        Ok((per_cluster, diag))
    }

    /// Plain FedAvg round: every client trains the student architecture
    /// with cross-entropy; dataset-size-weighted mean by default.
    fn round_fedavg(&mut self, t: usize) -> Result<(Vec<PerClusterMetrics>, (f64, f64))> {
        let cfg = &self.cfg;
        let clients = &self.clients;
        let global = &self.global;
        let dim = global.param_count();

        let mut mean = ParamMean::new();
        let mut moments = ClusterMoments::new(dim);
        let mut loss_sum = 0.0f64;
        let mut flat_buf = Vec::with_capacity(dim);

        let chunk = rayon::current_num_threads().max(1) * 2;
        for batch in clients.chunks(chunk) {
            let trained: Vec<Result<(usize, ModelParams, f64)>> = batch
                .par_iter()
                .map(|client| {
                    let cfg_i = cfg.train.with_seed(derive_seed(
                        cfg.master_seed,
                        "client_train",
                        client.client_id() as u64,
                        t as u64,
                    ));
                    sgd_train(global, client, &cfg_i, None)
                        .map(|(p, l)| (client.client_id(), p, l))
                })
                .collect();
            for item in trained {
                let (client_id, params, loss) = item?;
                flat_buf.clear();
                params.flatten_into(&mut flat_buf);
                moments.push(&flat_buf);
                let weight = if cfg.fedavg_weighted {
                    clients[client_id].len() as f64
                } else {
                    1.0
                };
                mean.push(&params, weight)?;
                loss_sum += loss;
            }
        }
        self.global = mean.finish()?;
        let diag = variance_from_moments(std::slice::from_ref(&moments))?;
        Ok((
            vec![PerClusterMetrics {
                cluster_id: 0,
                member_count: clients.len(),
                mean_student_train_loss: loss_sum / clients.len() as f64,
                teacher_train_loss: None,
            }],
            diag,
        ))
    }
}

/// Partition, cluster, and run all configured rounds.
pub fn run_experiment(
    cfg: &FederationConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<ExperimentOutput> {
    let mut runner = ExperimentRunner::new(cfg.clone(), train, test)?;
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        rounds.push(runner.step()?);
    }
    Ok(ExperimentOutput {
        rounds,
        clustering: runner.clustering.clone(),
    })
}

#[cfg(test)]
mod tests;
