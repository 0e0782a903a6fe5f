use cre_core::replay::{kmeans, KMeansParams};
use cre_core::rng;

fn sse_of(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let dim = points[0].len();
    let mut total = 0.0;
    for c in 0..k {
        let members: Vec<&Vec<f64>> = points
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == c)
            .map(|(p, _)| p)
            .collect();
        if members.is_empty() {
            continue;
        }
        let mut mean = vec![0.0; dim];
        for p in &members {
            for (m, x) in mean.iter_mut().zip(p.iter()) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= members.len() as f64;
        }
        for p in &members {
            total += p.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>();
        }
    }
    total
}

/// Minimum SSE over every partition into exactly `k` non-empty groups,
/// enumerated as restricted growth strings.
fn exhaustive_optimum(points: &[Vec<f64>], k: usize) -> f64 {
    fn go(points: &[Vec<f64>], k: usize, labels: &mut Vec<usize>, used: usize, best: &mut f64) {
        let n = points.len();
        if labels.len() == n {
            if used == k {
                *best = best.min(sse_of(points, labels, k));
            }
            return;
        }
        let remaining = n - labels.len();
        if used + remaining < k {
            return;
        }
        for c in 0..=used.min(k - 1) {
            labels.push(c);
            go(points, k, labels, used.max(c + 1), best);
            labels.pop();
        }
    }
    let mut best = f64::INFINITY;
    go(points, k, &mut Vec::new(), 0, &mut best);
    best
}

fn fixtures() -> Vec<Vec<Vec<f64>>> {
    let mut out = vec![
        vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 0.0], vec![10.0, 1.0]],
        vec![vec![1.0], vec![2.0], vec![3.0], vec![10.0], vec![11.0], vec![30.0]],
        // collinear, equal spacing: several optimal partitions tie
        (0..8).map(|i| vec![i as f64]).collect(),
        // duplicated points
        vec![
            vec![1.0, 1.0],
            vec![1.0, 1.0],
            vec![1.0, 1.0],
            vec![5.0, 5.0],
            vec![5.0, 5.0],
        ],
    ];
    let mut g = rng::seeded(2024);
    for n in 3..=8 {
        for dim in 1..=3 {
            for _ in 0..3 {
                out.push(
                    (0..n)
                        .map(|_| (0..dim).map(|_| 10.0 * rng::unit_f64(&mut g)).collect())
                        .collect(),
                );
            }
        }
    }
    out
}

#[test]
fn kmeans_matches_exhaustive_optimum() {
    let params = KMeansParams {
        restarts: 10,
        ..KMeansParams::default()
    };
    let mut checked = 0;
    for (f, points) in fixtures().iter().enumerate() {
        for k in 1..=3.min(points.len()) {
            let optimum = exhaustive_optimum(points, k);
            let got = kmeans(points, k, 7 + f as u64, &params).unwrap();
            let rel = (got.sse - optimum).abs() / optimum.max(f64::MIN_POSITIVE);
            assert!(
                rel <= 1e-9 || (got.sse - optimum).abs() < 1e-12,
                "fixture {f}, k={k}: sse {} vs optimum {optimum}",
                got.sse
            );
            assert!(got
                .sse_trace
                .windows(2)
                .all(|w| w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0)));
            checked += 1;
        }
    }
    assert!(checked > 150);
}

#[test]
fn sse_trace_never_increases() {
    let mut g = rng::seeded(5);
    for trial in 0..200u64 {
        let n = 5 + rng::below(&mut g, 60);
        let k = 1 + rng::below(&mut g, n.min(8));
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..4).map(|_| rng::unit_f64(&mut g) * 3.0 - 1.5).collect())
            .collect();
        let r = kmeans(&points, k, trial, &KMeansParams::default()).unwrap();
        for w in r.sse_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * w[0].max(1.0), "trial {trial}: {:?}", r.sse_trace);
        }
        assert!((r.sse - r.sse_trace.last().copied().unwrap()).abs() <= 1e-9 * r.sse.max(1.0));
    }
}
