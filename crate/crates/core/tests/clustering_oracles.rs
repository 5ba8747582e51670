//! Clustering implementations against independent brute-force references.

use fedsikd::clustering::{
    agglomerative_merges, calinski_harabasz, davies_bouldin, kmeans, select_k, silhouette,
    KmeansOptions, PointSet,
};
use fedsikd::testkit::{
    average_linkage_reference, best_two_partition, calinski_harabasz_reference,
    davies_bouldin_reference, silhouette_reference,
};

fn lcg_points(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    (0..n)
        .map(|_| (0..dim).map(|_| next() * 10.0 - 5.0).collect())
        .collect()
}

/// A fixed, hand-checkable 6-point instance: two loose triples.
fn six_points() -> (Vec<Vec<f64>>, Vec<usize>) {
    let points = vec![
        vec![0.0, 0.0],
        vec![1.0, 0.0],
        vec![0.5, 1.0],
        vec![6.0, 5.0],
        vec![7.0, 5.5],
        vec![6.5, 6.5],
    ];
    let labels = vec![0, 0, 0, 1, 1, 1];
    (points, labels)
}

#[test]
fn silhouette_matches_reference_to_1e9() {
    let (points, labels) = six_points();
    let ps = PointSet::from_rows(&points).unwrap();
    let got = silhouette(&ps, &labels).unwrap();
    let expect = silhouette_reference(&points, &labels);
    assert!((got - expect).abs() <= 1e-9 * expect.abs().max(1.0), "{got} vs {expect}");

    for seed in 0..10 {
        let pts = lcg_points(9, 3, seed);
        let labels: Vec<usize> = (0..9).map(|i| i % 3).collect();
        let ps = PointSet::from_rows(&pts).unwrap();
        let got = silhouette(&ps, &labels).unwrap();
        let expect = silhouette_reference(&pts, &labels);
        assert!((got - expect).abs() <= 1e-9, "seed {seed}: {got} vs {expect}");
    }
}

#[test]
fn calinski_harabasz_matches_reference_to_1e9() {
    let (points, labels) = six_points();
    let ps = PointSet::from_rows(&points).unwrap();
    let got = calinski_harabasz(&ps, &labels).unwrap();
    let expect = calinski_harabasz_reference(&points, &labels);
    assert!(
        ((got - expect) / expect).abs() <= 1e-9,
        "{got} vs {expect}"
    );
}

#[test]
fn calinski_harabasz_separated_beats_random_labels() {
    let (points, good) = six_points();
    let ps = PointSet::from_rows(&points).unwrap();
    let bad = vec![0, 1, 0, 1, 0, 1];
    let s_good = calinski_harabasz(&ps, &good).unwrap();
    let s_bad = calinski_harabasz(&ps, &bad).unwrap();
    assert!(s_good > s_bad, "{s_good} vs {s_bad}");
}

#[test]
fn davies_bouldin_matches_reference_to_1e9() {
    let (points, labels) = six_points();
    let ps = PointSet::from_rows(&points).unwrap();
    let got = davies_bouldin(&ps, &labels).unwrap();
    let expect = davies_bouldin_reference(&points, &labels);
    assert!(
        ((got - expect) / expect).abs() <= 1e-9,
        "{got} vs {expect}"
    );

    for seed in 10..18 {
        let pts = lcg_points(8, 2, seed);
        let labels: Vec<usize> = (0..8).map(|i| i % 2).collect();
        let ps = PointSet::from_rows(&pts).unwrap();
        let got = davies_bouldin(&ps, &labels).unwrap();
        let expect = davies_bouldin_reference(&pts, &labels);
        assert!((got - expect).abs() <= 1e-9 * expect.max(1.0), "{got} vs {expect}");
    }
}

#[test]
fn kmeans_k2_matches_exhaustive_partition_search() {
    // The four-corner instance from the module contract…
    let corners = vec![
        vec![0.0, 0.0],
        vec![0.0, 1.0],
        vec![10.0, 0.0],
        vec![10.0, 1.0],
    ];
    let (_, best_j) = best_two_partition(&corners);
    let ps = PointSet::from_rows(&corners).unwrap();
    let got = kmeans(&ps, 2, &KmeansOptions::default(), 3).unwrap();
    assert!((got.inertia - best_j).abs() <= 1e-9 * best_j.max(1.0));
    assert_eq!(got.labels[0], got.labels[1]);
    assert_eq!(got.labels[2], got.labels[3]);
    assert_ne!(got.labels[0], got.labels[2]);

    // …and random instances with n <= 8.
    for seed in 0..12 {
        let pts = lcg_points(5 + (seed as usize % 4), 2, 100 + seed);
        let (_, best_j) = best_two_partition(&pts);
        let ps = PointSet::from_rows(&pts).unwrap();
        let got = kmeans(&ps, 2, &KmeansOptions::default(), seed).unwrap();
        assert!(
            (got.inertia - best_j).abs() <= 1e-9 * best_j.max(1.0),
            "seed {seed}: {} vs exhaustive {best_j}",
            got.inertia
        );
    }
}

#[test]
fn average_linkage_merges_match_cubic_reference() {
    for seed in 0..10 {
        let pts = lcg_points(5, 2, 200 + seed);
        let ps = PointSet::from_rows(&pts).unwrap();
        let got = agglomerative_merges(&ps);
        let expect = average_linkage_reference(&pts);
        assert_eq!(got.len(), expect.len());
        for (g, e) in got.iter().zip(&expect) {
            assert_eq!((g.a, g.b), (e.0, e.1), "seed {seed}");
            assert!(
                (g.distance - e.2).abs() <= 1e-9 * e.2.max(1.0),
                "seed {seed}: {} vs {}",
                g.distance,
                e.2
            );
        }
    }
}

#[test]
fn select_k_is_scale_invariant_on_blobs() {
    let mut rows = Vec::new();
    for (cx, cy) in [(0.0, 0.0), (15.0, 0.0), (0.0, 15.0), (15.0, 15.0)] {
        for p in lcg_points(6, 2, (cx * 31.0 + cy) as u64 + 77) {
            rows.push(vec![cx + p[0] * 0.2, cy + p[1] * 0.2]);
        }
    }
    let ps = PointSet::from_rows(&rows).unwrap();
    let base = select_k(&ps, 2, 8, &KmeansOptions::default(), 9).unwrap();
    assert_eq!(base.best_k, 4);

    for scale in [0.01, 3.0, 250.0] {
        let scaled: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|v| v * scale).collect())
            .collect();
        let ps_s = PointSet::from_rows(&scaled).unwrap();
        let sel = select_k(&ps_s, 2, 8, &KmeansOptions::default(), 9).unwrap();
        assert_eq!(sel.best_k, base.best_k, "scale {scale}");
    }
}
