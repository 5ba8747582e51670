//! Test-only oracles, gated behind the `testkit` feature.
//!
//! Everything here recomputes expected values from first principles and
//! stays off the implementation paths it checks: the gradient checker only
//! calls `forward`, the clustering references only read raw points.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{backward, build_model, forward, Architecture, ModelParams};
use crate::tensor::Tensor;

/// Worst observed relative error of a gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

fn probe_loss(
    params: &ModelParams,
    input: &Tensor,
    probe: &[f64],
    mask_seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let (logits, _) = forward(params, input, true, &mut rng)?;
    Ok(logits.data().iter().zip(probe).map(|(y, g)| y * g).sum())
}

/// Check analytic gradients (parameters and input) of a model against
/// central finite differences on one random instance.
///
/// Inputs are sampled away from ReLU kinks and given distinct jitter so
/// max-pool argmax choices are stable under the `eps` perturbation.
pub fn gradcheck(arch: &Architecture, instance_seed: u64, eps: f64) -> Result<GradCheckReport> {
    let params = build_model(arch, instance_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(instance_seed ^ 0x5eed_0f0d);
    let mask_seed = instance_seed ^ 0xd00d_1e55;

    let batch = 2usize;
    let mut shape = vec![batch];
    shape.extend_from_slice(arch.input_shape());
    let n_in: usize = shape.iter().product();
    let data: Vec<f64> = (0..n_in)
        .map(|i| {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            sign * (0.1 + 0.9 * rng.gen::<f64>()) + i as f64 * 7e-4
        })
        .collect();
    let input = Tensor::new(shape, data)?;

    let out_len: usize = batch * arch.output_shapes()?.last().expect("non-empty").iter().product::<usize>();
    let probe: Vec<f64> = (0..out_len).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();

    // Analytic pass.
    let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let (logits, cache) = forward(&params, &input, true, &mut mask_rng)?;
    let probe_t = Tensor::new(logits.shape().to_vec(), probe.clone())?;
    let (grads, dinput) = backward(&params, &cache, &probe_t)?;

    let mut max_rel: f64 = 0.0;
    let mut checked = 0usize;
    let mut record = |analytic: f64, fd: f64| {
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
        if rel > max_rel {
            max_rel = rel;
        }
        checked += 1;
    };

    // Parameter coordinates.
    for li in 0..params.layers().len() {
        for which in 0..2 {
            let len = if which == 0 {
                params.layers()[li].weights.len()
            } else {
                params.layers()[li].biases.len()
            };
            for i in 0..len {
                let mut plus = params.clone();
                let mut minus = params.clone();
                {
                    let t = if which == 0 {
                        &mut plus.layers_mut()[li].weights
                    } else {
                        &mut plus.layers_mut()[li].biases
                    };
                    t.data_mut()[i] += eps;
                }
                {
                    let t = if which == 0 {
                        &mut minus.layers_mut()[li].weights
                    } else {
                        &mut minus.layers_mut()[li].biases
                    };
                    t.data_mut()[i] -= eps;
                }
                let fd = (probe_loss(&plus, &input, &probe, mask_seed)?
                    - probe_loss(&minus, &input, &probe, mask_seed)?)
                    / (2.0 * eps);
                let analytic = if which == 0 {
                    grads.layers[li].weights.data()[i]
                } else {
                    grads.layers[li].biases.data()[i]
                };
                record(analytic, fd);
            }
        }
    }

    // Input coordinates.
    for i in 0..input.len() {
        let mut plus = input.clone();
        plus.data_mut()[i] += eps;
        let mut minus = input.clone();
        minus.data_mut()[i] -= eps;
        let fd = (probe_loss(&params, &plus, &probe, mask_seed)?
            - probe_loss(&params, &minus, &probe, mask_seed)?)
            / (2.0 * eps);
        record(dinput.data()[i], fd);
    }

    Ok(GradCheckReport {
        max_rel_err: max_rel,
        coords_checked: checked,
    })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn centroid(points: &[Vec<f64>], members: &[usize]) -> Vec<f64> {
    let dim = points[0].len();
    let mut c = vec![0.0; dim];
    for &m in members {
        for (cv, pv) in c.iter_mut().zip(&points[m]) {
            *cv += pv;
        }
    }
    for cv in &mut c {
        *cv /= members.len() as f64;
    }
    c
}

fn groups_of(labels: &[usize]) -> Vec<Vec<usize>> {
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    let mut groups = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        groups[l].push(i);
    }
    groups
}

/// Direct per-point silhouette formula.
pub fn silhouette_reference(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let groups = groups_of(labels);
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        let own = &groups[labels[i]];
        if own.len() == 1 {
            continue;
        }
        let a = own
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| dist(&points[i], &points[j]))
            .sum::<f64>()
            / (own.len() - 1) as f64;
        let b = groups
            .iter()
            .enumerate()
            .filter(|(g, members)| *g != labels[i] && !members.is_empty())
            .map(|(_, members)| {
                members
                    .iter()
                    .map(|&j| dist(&points[i], &points[j]))
                    .sum::<f64>()
                    / members.len() as f64
            })
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    total / n as f64
}

/// Direct Calinski-Harabasz formula.
pub fn calinski_harabasz_reference(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let groups = groups_of(labels);
    let n = points.len();
    let k = groups.len();
    let all: Vec<usize> = (0..n).collect();
    let global = centroid(points, &all);
    let mut between = 0.0;
    let mut within = 0.0;
    for members in &groups {
        let c = centroid(points, members);
        between += members.len() as f64 * dist(&c, &global).powi(2);
        for &m in members {
            within += dist(&points[m], &c).powi(2);
        }
    }
    if within == 0.0 {
        return f64::INFINITY;
    }
    (between / (k - 1) as f64) / (within / (n - k) as f64)
}

/// Direct Davies-Bouldin formula.
pub fn davies_bouldin_reference(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let groups = groups_of(labels);
    let k = groups.len();
    let cents: Vec<Vec<f64>> = groups.iter().map(|m| centroid(points, m)).collect();
    let spreads: Vec<f64> = groups
        .iter()
        .enumerate()
        .map(|(g, members)| {
            members
                .iter()
                .map(|&m| dist(&points[m], &cents[g]))
                .sum::<f64>()
                / members.len() as f64
        })
        .collect();
    let mut total = 0.0;
    for i in 0..k {
        let mut worst: f64 = 0.0;
        for j in 0..k {
            if i == j {
                continue;
            }
            let d = dist(&cents[i], &cents[j]);
            if d == 0.0 {
                return f64::INFINITY;
            }
            worst = worst.max((spreads[i] + spreads[j]) / d);
        }
        total += worst;
    }
    total / k as f64
}

/// Exhaustive best 2-partition by the k-means objective (usable up to a
/// dozen points). Returns `(labels, inertia)`.
pub fn best_two_partition(points: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = points.len();
    assert!(n >= 2 && n <= 16, "exhaustive search needs 2..=16 points");
    let mut best_labels = Vec::new();
    let mut best_j = f64::INFINITY;
    // Fix point 0 in cluster 0 to halve the search space.
    for mask in 0..(1u32 << (n - 1)) {
        let labels: Vec<usize> = (0..n)
            .map(|i| {
                if i == 0 {
                    0
                } else {
                    ((mask >> (i - 1)) & 1) as usize
                }
            })
            .collect();
        let groups = groups_of(&labels);
        if groups.iter().any(|g| g.is_empty()) || groups.len() != 2 {
            continue;
        }
        let mut j_total = 0.0;
        for members in &groups {
            let c = centroid(points, members);
            for &m in members {
                j_total += dist(&points[m], &c).powi(2);
            }
        }
        if j_total < best_j {
            best_j = j_total;
            best_labels = labels;
        }
    }
    (best_labels, best_j)
}

/// O(n^3) average-linkage reference: recomputes every inter-cluster average
/// pairwise distance from raw points at each step.
pub fn average_linkage_reference(points: &[Vec<f64>]) -> Vec<(usize, usize, f64)> {
    let n = points.len();
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut merges = Vec::new();
    while clusters.len() > 1 {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..clusters.len() {
            for j in (i + 1)..clusters.len() {
                let mut sum = 0.0;
                for &a in &clusters[i] {
                    for &b in &clusters[j] {
                        sum += dist(&points[a], &points[b]);
                    }
                }
                let d = sum / (clusters[i].len() * clusters[j].len()) as f64;
                let key = (
                    *clusters[i].iter().min().unwrap(),
                    *clusters[j].iter().min().unwrap(),
                );
                let better = match best {
                    None => true,
                    Some((bi, bj, bd)) => {
                        let bkey = (
                            *clusters[bi].iter().min().unwrap(),
                            *clusters[bj].iter().min().unwrap(),
                        );
                        d < bd || (d == bd && key < bkey)
                    }
                };
                if better {
                    best = Some((i, j, d));
                }
            }
        }
        let (i, j, d) = best.expect("at least two clusters");
        let (mi, mj) = (
            *clusters[i].iter().min().unwrap(),
            *clusters[j].iter().min().unwrap(),
        );
        merges.push((mi.min(mj), mi.max(mj), d));
        let s = clusters.swap_remove(j);
        clusters[i].extend(s);
    }
    merges
}
